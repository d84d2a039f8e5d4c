use intseg::annotate::{annotate_all, Filter};
use intseg::crossings::{build_network, JoinConfig, Weighting};
use intseg::home::EsDefinition;
use intseg::ingest::PingStore;
use intseg::layers::GeoLayer;
use intseg::segregation::{is_decomposed, standardized_es};
use intseg::synthcity::{self, CityRecipe};

#[test]
fn unstratified_venues_give_flat_cov_and_no_venue_segregation() {
    let mut r = CityRecipe::mechanism(800, 5);
    r.distance_decay_m = 1e9;
    r.travel_radius_m = 1e9;
    r.taste_sigma = 0.0;
    for c in &mut r.categories {
        c.sigma_v = 0.0;
        c.gamma = 0.0;
    }
    let city = synthcity::generate(&r).unwrap();
    let row = synthcity::measure_city("flat", &city, &JoinConfig::default()).unwrap();
    let cov = row.venue_cov.unwrap();
    println!("{row:?}");
    assert!(cov < 0.1, "{cov}");

    let persons = city.true_persons();
    let store = PingStore::from_pings(city.pings.iter().cloned());
    let (net, _) = build_network(&store, &JoinConfig::default(), 0).unwrap();
    let layer = GeoLayer::from_records(city.layer.clone()).unwrap();
    let ann = annotate_all(&net, &persons, &layer, 0);
    let es = standardized_es(&persons, EsDefinition::Rent);
    let e = is_decomposed(&net, &ann, &es, &|_: &str| true, &Filter::InPoi, Weighting::DedupPairs).unwrap();
    println!("{e:?}");
    // uniform mixing leaves a ~ 0; REML may then sit on the var_u = 0
    // boundary, where rho is only the sign of a
    assert!(e.rho.abs() < 0.1 || (e.var_u == 0.0 && e.diagnostic.is_some() && e.a.abs() < 0.02), "{e:?}");
}
