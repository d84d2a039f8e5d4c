//! Synthetic cities: tracts, homes, ES, venues, hubs and ping streams with
//! a venue-choice model, plus the population sweep built on top of them.

use std::collections::HashMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::{annotate_all, Filter};
use crate::bridging::{bridging_index, Diversity, Hub};
use crate::crossings::{build_network, JoinConfig, Weighting};
use crate::error::{Error, Result};
use crate::geo::{haversine_m, LocalFrame, Polygon};
use crate::home::{compute_es_variants, EsDefinition, Person, Property};
use crate::ingest::{Ping, PingStore};
use crate::layers::{FeatureRecord, GeoLayer};
use crate::seed::rng_for;
use crate::segregation::{
    coefficient_of_variation, ego_groups, fit_mixed, is_decomposed, standardized_es, venue_stats,
};
use crate::stats::{self, Correlation};

pub const START_T: i64 = 1_488_326_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EsLayout {
    #[default]
    Lognormal,
    Checkerboard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HubPlacement {
    #[default]
    None,
    /// Interior tract corners, where neighborhoods meet.
    Bridging,
    /// Tract centers.
    Segregating,
    Random,
    /// One hub at the region center.
    Central,
}

impl std::str::FromStr for HubPlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "bridging" => Self::Bridging,
            "segregating" => Self::Segregating,
            "random" => Self::Random,
            "central" => Self::Central,
            _ => return Err(Error::Config(format!("unknown hub placement `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VenuePlacement {
    /// Inside hubs, round-robin.
    Hubs,
    /// An equal share inside every tract; visits stay in the home tract.
    Tracts,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VenueCategory {
    /// Category suffix; the layer category is `poi:<name>`.
    pub name: String,
    pub venues_per_1000: f64,
    pub min_venues: usize,
    /// Spread of venue ES levels, in person ES standard deviations.
    pub sigma_v: f64,
    /// Strength of the preference for ES-similar venues.
    pub gamma: f64,
    /// Relative share of visits going to this category.
    pub visit_share: f64,
    pub placement: VenuePlacement,
    /// Category share multiplier `exp(es_affinity * z)` for a person at ES z-score `z`.
    #[serde(default)]
    pub es_affinity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityRecipe {
    pub population: usize,
    pub tracts_per_side: usize,
    pub tract_size_m: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub es_median: f64,
    /// Standard deviation of tract log-ES offsets (or checkerboard amplitude).
    pub tract_sigma: f64,
    pub within_sigma: f64,
    pub es_layout: EsLayout,
    pub hub_placement: HubPlacement,
    pub n_random_hubs: usize,
    pub hub_size_m: f64,
    pub venue_size_m: f64,
    /// Minimum distance between venue centers; hubs grow to fit their venues.
    #[serde(default = "default_spacing")]
    pub venue_spacing_m: f64,
    pub categories: Vec<VenueCategory>,
    pub visits_per_day: usize,
    pub visit_minutes: f64,
    pub travel_radius_m: f64,
    pub distance_decay_m: f64,
    /// Persistent per-person offset added to the ES z-score used for venue choice.
    #[serde(default)]
    pub taste_sigma: f64,
    /// Per-person log-normal noise on category shares.
    #[serde(default)]
    pub share_sigma: f64,
    /// Venues per category a person ever visits; 0 means any.
    #[serde(default)]
    pub favorites: usize,
    pub days: usize,
    pub night_pings: bool,
    pub night_rate_per_h: f64,
    pub visit_rate_per_h: f64,
    pub noise_m: f64,
    pub seed: u64,
}

fn default_spacing() -> f64 {
    80.0
}

impl Default for CityRecipe {
    fn default() -> Self {
        Self {
            population: 1000,
            tracts_per_side: 4,
            tract_size_m: 500.0,
            origin_lat: 37.0,
            origin_lon: -95.0,
            es_median: 1800.0,
            tract_sigma: 0.5,
            within_sigma: 0.3,
            es_layout: EsLayout::Lognormal,
            hub_placement: HubPlacement::Random,
            n_random_hubs: 4,
            hub_size_m: 200.0,
            venue_size_m: 60.0,
            venue_spacing_m: default_spacing(),
            categories: vec![
                VenueCategory {
                    name: "restaurant".into(),
                    venues_per_1000: 10.0,
                    min_venues: 4,
                    sigma_v: 1.0,
                    gamma: 2.0,
                    visit_share: 1.0,
                    placement: VenuePlacement::Hubs,
                    es_affinity: 0.0,
                },
                VenueCategory {
                    name: "grocery".into(),
                    venues_per_1000: 5.0,
                    min_venues: 2,
                    sigma_v: 0.3,
                    gamma: 1.0,
                    visit_share: 1.0,
                    placement: VenuePlacement::Uniform,
                    es_affinity: 0.0,
                },
            ],
            visits_per_day: 2,
            visit_minutes: 60.0,
            travel_radius_m: 5000.0,
            distance_decay_m: 1500.0,
            taste_sigma: 0.3,
            share_sigma: 0.0,
            favorites: 0,
            days: 14,
            night_pings: true,
            night_rate_per_h: 2.2,
            visit_rate_per_h: 4.0,
            noise_m: 10.0,
            seed: 1,
        }
    }
}

impl CityRecipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("infeasible recipe: {m}")));
        if self.population < 2 {
            return bad("population must be at least 2");
        }
        if self.tracts_per_side == 0 || !(self.tract_size_m > 0.0) {
            return bad("need at least one tract of positive size");
        }
        if !(self.es_median > 0.0) {
            return bad("es_median must be positive");
        }
        if self.visits_per_day > 0 {
            if self.categories.is_empty() || self.categories.iter().all(|c| c.visit_share <= 0.0) {
                return bad("visits requested but no venue categories");
            }
            if self.categories.iter().any(|c| c.placement == VenuePlacement::Hubs)
                && self.hub_placement == HubPlacement::None
            {
                return bad("hub-placed venues need a hub placement");
            }
            if self.categories.iter().any(|c| c.venues_per_1000 <= 0.0 && c.min_venues == 0) {
                return bad("a venue category has zero venues");
            }
        }
        if !self.night_pings && self.visits_per_day == 0 {
            return bad("no pings would be generated");
        }
        Ok(())
    }

    /// Population-scaled venue differentiation: larger cities are denser,
    /// have more venues and a wider spread of venue ES levels.
    pub fn mechanism(population: usize, seed: u64) -> Self {
        let scale = (population as f64 / 500.0).max(1.0);
        Self {
            population,
            tracts_per_side: 4,
            tract_size_m: 400.0 * scale.powf(0.25),
            hub_placement: HubPlacement::None,
            categories: vec![VenueCategory {
                name: "restaurant".into(),
                venues_per_1000: 20.0,
                min_venues: 5,
                sigma_v: 0.3 + 0.4 * scale.ln(),
                gamma: 3.0,
                visit_share: 1.0,
                placement: VenuePlacement::Uniform,
                es_affinity: 0.0,
            }],
            days: 2,
            night_pings: false,
            seed,
            ..Self::default()
        }
    }

    /// Checkerboard ES neighborhoods served by hubs; only the hub
    /// placement differs between regimes.
    pub fn hub_regime(population: usize, placement: HubPlacement, seed: u64) -> Self {
        Self {
            population,
            tracts_per_side: 4,
            tract_size_m: 500.0,
            es_layout: EsLayout::Checkerboard,
            tract_sigma: 0.8,
            within_sigma: 0.15,
            hub_placement: placement,
            categories: vec![VenueCategory {
                name: "shop".into(),
                venues_per_1000: 30.0,
                min_venues: 16,
                sigma_v: 0.7,
                gamma: 1.0,
                visit_share: 1.0,
                placement: VenuePlacement::Hubs,
                es_affinity: 0.0,
            }],
            travel_radius_m: 2000.0,
            distance_decay_m: 60.0,
            days: 3,
            night_pings: false,
            seed,
            ..Self::default()
        }
    }

    /// Homophilous visits to venues inside the home tract plus ES-blind
    /// visits to a central hub.
    pub fn homophily_visitor(population: usize, seed: u64) -> Self {
        Self {
            population,
            tracts_per_side: 4,
            tract_size_m: 500.0,
            tract_sigma: 0.4,
            within_sigma: 0.4,
            hub_placement: HubPlacement::Central,
            hub_size_m: 150.0,
            categories: vec![
                VenueCategory {
                    name: "local".into(),
                    venues_per_1000: 64.0,
                    min_venues: 16,
                    sigma_v: 1.5,
                    gamma: 4.0,
                    visit_share: 1.0,
                    placement: VenuePlacement::Tracts,
                    es_affinity: 0.0,
                },
                VenueCategory {
                    name: "downtown".into(),
                    venues_per_1000: 40.0,
                    min_venues: 8,
                    sigma_v: 0.6,
                    gamma: 0.6,
                    visit_share: 1.0,
                    placement: VenuePlacement::Hubs,
                    es_affinity: 0.0,
                },
            ],
            travel_radius_m: 10_000.0,
            distance_decay_m: 1.0e9,
            taste_sigma: 0.6,
            seed,
            ..Self::default()
        }
    }

    /// Two uniformly placed venue categories with differentiated venues and
    /// ES-dependent, noisy category shares.
    pub fn stratified(population: usize, seed: u64) -> Self {
        Self {
            population,
            hub_placement: HubPlacement::None,
            categories: vec![
                VenueCategory {
                    name: "restaurant".into(),
                    venues_per_1000: 20.0,
                    min_venues: 5,
                    sigma_v: 1.0,
                    gamma: 3.0,
                    visit_share: 1.0,
                    placement: VenuePlacement::Uniform,
                    es_affinity: 0.2,
                },
                VenueCategory {
                    name: "grocery".into(),
                    venues_per_1000: 10.0,
                    min_venues: 3,
                    sigma_v: 0.5,
                    gamma: 2.0,
                    visit_share: 1.0,
                    placement: VenuePlacement::Uniform,
                    es_affinity: -0.2,
                },
            ],
            share_sigma: 1.5,
            days: 2,
            night_pings: false,
            seed,
            ..Self::default()
        }
    }

    fn frame(&self) -> LocalFrame {
        LocalFrame::new(self.origin_lat, self.origin_lon)
    }

    pub fn side_m(&self) -> f64 {
        self.tracts_per_side as f64 * self.tract_size_m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruePerson {
    pub person_id: String,
    pub home_lat: f64,
    pub home_lon: f64,
    pub tract_id: String,
    pub es: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Venue {
    pub id: String,
    pub category: String,
    pub lat: f64,
    pub lon: f64,
    pub tract: usize,
    pub level: f64,
    pub hub_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub recipe: CityRecipe,
    pub persons: Vec<TruePerson>,
    pub venues: Vec<Venue>,
    pub hubs: Vec<Hub>,
}

#[derive(Debug, Clone)]
pub struct City {
    pub truth: GroundTruth,
    pub properties: Vec<Property>,
    pub layer: Vec<FeatureRecord>,
    pub pings: Vec<Ping>,
}

impl City {
    /// Analysis persons built from ground truth (true homes and ES).
    pub fn true_persons(&self) -> Vec<Person> {
        let mut ps: Vec<Person> = self
            .truth
            .persons
            .iter()
            .map(|t| Person::new(&t.person_id, t.home_lat, t.home_lon, &t.tract_id, "R0", t.es))
            .collect();
        compute_es_variants(&mut ps);
        ps
    }
}

fn tract_id(k: usize) -> String {
    format!("T{k:03}")
}

fn rect_xy(f: &LocalFrame, x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
    let (la0, lo0) = f.to_latlon(x0, y0);
    let (la1, lo1) = f.to_latlon(x1, y1);
    Polygon::rect(lo0, la0, lo1, la1)
}

fn hub_centers(r: &CityRecipe, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let g = r.tracts_per_side;
    let s = r.tract_size_m;
    let side = r.side_m();
    let half = r.hub_size_m * 0.5;
    match r.hub_placement {
        HubPlacement::None => Vec::new(),
        HubPlacement::Segregating => {
            (0..g * g).map(|k| (((k % g) as f64 + 0.5) * s, ((k / g) as f64 + 0.5) * s)).collect()
        }
        HubPlacement::Bridging => {
            if g < 2 {
                return vec![(side * 0.5, side * 0.5)];
            }
            (0..(g - 1) * (g - 1)).map(|k| (((k % (g - 1)) + 1) as f64 * s, ((k / (g - 1)) + 1) as f64 * s)).collect()
        }
        HubPlacement::Random => (0..r.n_random_hubs.max(1))
            .map(|_| (rng.gen_range(half..side - half), rng.gen_range(half..side - half)))
            .collect(),
        HubPlacement::Central => vec![(side * 0.5, side * 0.5)],
    }
}

/// Tract ES offsets, homes and true ES; the returned RNG continues the
/// layout stream.
fn draw_residents(r: &CityRecipe) -> (ChaCha8Rng, Vec<f64>, Vec<(f64, f64)>, Vec<TruePerson>) {
    let f = r.frame();
    let g = r.tracts_per_side;
    let n_tracts = g * g;
    let s = r.tract_size_m;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = rng_for(r.seed, &["layout"]);
    let offsets: Vec<f64> = (0..n_tracts)
        .map(|k| match r.es_layout {
            EsLayout::Lognormal => r.tract_sigma * std_normal.sample(&mut rng),
            EsLayout::Checkerboard => {
                if (k % g + k / g) % 2 == 0 {
                    r.tract_sigma
                } else {
                    -r.tract_sigma
                }
            }
        })
        .collect();

    let mut prng = rng_for(r.seed, &["persons"]);
    let mut homes_xy = Vec::with_capacity(r.population);
    let mut persons = Vec::with_capacity(r.population);
    for k in 0..r.population {
        let t = k % n_tracts;
        let (tx, ty) = ((t % g) as f64 * s, (t / g) as f64 * s);
        let x = tx + prng.gen_range(1.0..s - 1.0);
        let y = ty + prng.gen_range(1.0..s - 1.0);
        let log_es = r.es_median.ln() + offsets[t] + r.within_sigma * std_normal.sample(&mut prng);
        let es = log_es.exp().clamp(200.0, 20_000.0);
        let (lat, lon) = f.to_latlon(x, y);
        homes_xy.push((x, y));
        persons.push(TruePerson {
            person_id: format!("p{k:06}"),
            home_lat: lat,
            home_lon: lon,
            tract_id: tract_id(t),
            es,
        });
    }
    (rng, offsets, homes_xy, persons)
}

/// True ES of every resident, without generating venues or pings.
pub fn resident_es(r: &CityRecipe) -> Result<Vec<f64>> {
    r.validate()?;
    Ok(draw_residents(r).3.into_iter().map(|p| p.es).collect())
}

/// Builds the static part of a city and all ping streams.
pub fn generate(r: &CityRecipe) -> Result<City> {
    r.validate()?;
    let f = r.frame();
    let g = r.tracts_per_side;
    let n_tracts = g * g;
    let s = r.tract_size_m;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let (mut rng, offsets, homes_xy, persons) = draw_residents(r);
    let log_es: Vec<f64> = persons.iter().map(|p| p.es.ln()).collect();
    let (lm, ls) = (stats::mean(&log_es), stats::pop_std(&log_es).max(1e-12));
    let z: Vec<f64> = log_es.iter().map(|v| (v - lm) / ls).collect();
    let mut tract_z = vec![Vec::new(); n_tracts];
    for (k, zz) in z.iter().enumerate() {
        tract_z[k % n_tracts].push(*zz);
    }
    let tract_z_mean: Vec<f64> = tract_z.iter().map(|v| if v.is_empty() { 0.0 } else { stats::mean(v) }).collect();

    // hubs and venues
    let hubs_xy = hub_centers(r, &mut rng);
    let hubs: Vec<Hub> = hubs_xy
        .iter()
        .enumerate()
        .map(|(k, &(x, y))| {
            let (lat, lon) = f.to_latlon(x, y);
            Hub { id: format!("H{k:03}"), lat, lon }
        })
        .collect();
    let cat_counts: Vec<usize> = r
        .categories
        .iter()
        .map(|cat| {
            let n = ((cat.venues_per_1000 * r.population as f64 / 1000.0).round() as usize).max(cat.min_venues);
            if cat.placement == VenuePlacement::Tracts {
                n.div_ceil(n_tracts) * n_tracts
            } else {
                n
            }
        })
        .collect();
    let mut per_hub = vec![0usize; hubs_xy.len()];
    for (cat, &n) in r.categories.iter().zip(&cat_counts) {
        if cat.placement == VenuePlacement::Hubs {
            for v in 0..n {
                per_hub[v % hubs_xy.len()] += 1;
            }
        }
    }
    let sp = r.venue_spacing_m.max(r.venue_size_m);
    let lattice: Vec<usize> = per_hub.iter().map(|&c| (c as f64).sqrt().ceil() as usize).collect();
    let hub_side: Vec<f64> = lattice.iter().map(|&l| r.hub_size_m.max(l as f64 * sp)).collect();
    let mut hub_slot = vec![0usize; hubs_xy.len()];
    let mut venues: Vec<Venue> = Vec::new();
    let mut venue_xy: Vec<(f64, f64)> = Vec::new();
    let vhalf = r.venue_size_m * 0.5;
    let far_enough = |xy: &[(f64, f64)], x: f64, y: f64| xy.iter().all(|&(a, b)| (a - x).hypot(b - y) >= sp);
    for (cat, &n) in r.categories.iter().zip(&cat_counts) {
        for v in 0..n {
            let (x, y, tract, hub) = match cat.placement {
                VenuePlacement::Hubs => {
                    let h = v % hubs_xy.len();
                    let (hx, hy) = hubs_xy[h];
                    let (l, k) = (lattice[h], hub_slot[h]);
                    hub_slot[h] += 1;
                    let off = (l as f64 - 1.0) * 0.5;
                    let x = hx + ((k % l) as f64 - off) * sp;
                    let y = hy + ((k / l) as f64 - off) * sp;
                    (x, y, usize::MAX, Some(hubs[h].id.clone()))
                }
                VenuePlacement::Tracts | VenuePlacement::Uniform => {
                    let (x0, y0, x1, y1, t) = if cat.placement == VenuePlacement::Tracts {
                        let t = v % n_tracts;
                        let (tx, ty) = ((t % g) as f64 * s, (t / g) as f64 * s);
                        (tx, ty, tx + s, ty + s, t)
                    } else {
                        (0.0, 0.0, r.side_m(), r.side_m(), usize::MAX)
                    };
                    let mut draw = || {
                        (
                            rng.gen_range(x0 + vhalf + 1.0..x1 - vhalf - 1.0),
                            rng.gen_range(y0 + vhalf + 1.0..y1 - vhalf - 1.0),
                        )
                    };
                    let mut xy = draw();
                    for _ in 0..200 {
                        if far_enough(&venue_xy, xy.0, xy.1) {
                            break;
                        }
                        xy = draw();
                    }
                    (xy.0, xy.1, t, None)
                }
            };
            let tract = if tract == usize::MAX {
                (((y / s).floor().clamp(0.0, (g - 1) as f64) as usize) * g)
                    + (x / s).floor().clamp(0.0, (g - 1) as f64) as usize
            } else {
                tract
            };
            let base = if cat.placement == VenuePlacement::Tracts { tract_z_mean[tract] } else { 0.0 };
            let level = base + cat.sigma_v * std_normal.sample(&mut rng);
            let (lat, lon) = f.to_latlon(x, y);
            venues.push(Venue {
                id: format!("V_{}_{v:05}", cat.name),
                category: cat.name.clone(),
                lat,
                lon,
                tract,
                level,
                hub_id: hub,
            });
            venue_xy.push((x, y));
        }
    }

    // layer
    let mut layer = Vec::new();
    let side = r.side_m();
    let mut region = FeatureRecord::polygon("R0", "region", None, &rect_xy(&f, 0.0, 0.0, side, side));
    region.attrs.insert("name".into(), serde_json::json!("synthetic"));
    layer.push(region);
    for t in 0..n_tracts {
        let (tx, ty) = ((t % g) as f64 * s, (t / g) as f64 * s);
        let mut rec = FeatureRecord::polygon(&tract_id(t), "tract", None, &rect_xy(&f, tx, ty, tx + s, ty + s));
        let mean_es = r.es_median * offsets[t].exp();
        rec.attrs.insert("tract_income".into(), serde_json::json!(12.0 * 3.0 * mean_es));
        layer.push(rec);
    }
    for ((h, &(x, y)), side) in hubs.iter().zip(&hubs_xy).zip(&hub_side) {
        let hh = side * 0.5;
        layer.push(FeatureRecord::polygon(&h.id, "hub", None, &rect_xy(&f, x - hh, y - hh, x + hh, y + hh)));
    }
    for (v, &(x, y)) in venues.iter().zip(&venue_xy) {
        layer.push(FeatureRecord::polygon(
            &v.id,
            &format!("poi:{}", v.category),
            v.hub_id.as_deref(),
            &rect_xy(&f, x - vhalf, y - vhalf, x + vhalf, y + vhalf),
        ));
    }
    for k in 1..g {
        let c = k as f64 * s;
        for (id, a, b) in [(format!("road_x{k}"), (c, 0.0), (c, side)), (format!("road_y{k}"), (0.0, c), (side, c))] {
            let (la0, lo0) = f.to_latlon(a.0, a.1);
            let (la1, lo1) = f.to_latlon(b.0, b.1);
            layer.push(FeatureRecord {
                id,
                kind: "polyline".into(),
                category: "road".into(),
                parent_id: None,
                coords: vec![[lo0, la0], [lo1, la1]],
                attrs: Default::default(),
            });
        }
    }

    let properties: Vec<Property> = persons
        .iter()
        .map(|p| Property { lat: p.home_lat, lon: p.home_lon, rent: p.es, kind: "residential".into() })
        .collect();

    // venue choice and pings
    let cat_index: HashMap<&str, usize> = r.categories.iter().enumerate().map(|(k, c)| (c.name.as_str(), k)).collect();
    let mut by_cat: Vec<Vec<usize>> = vec![Vec::new(); r.categories.len()];
    for (k, v) in venues.iter().enumerate() {
        by_cat[cat_index[v.category.as_str()]].push(k);
    }
    let pings: Vec<Ping> = (0..r.population)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_for(r.seed, &["pings", &k.to_string()]);
            let z_taste = z[k] + r.taste_sigma * std_normal.sample(&mut rng);
            let mut shares = Vec::with_capacity(r.categories.len());
            let choices: Vec<Option<(Vec<usize>, WeightedIndex<f64>)>> = r
                .categories
                .iter()
                .enumerate()
                .map(|(c, cat)| {
                    let noise = r.share_sigma * std_normal.sample(&mut rng);
                    shares.push(cat.visit_share.max(0.0) * (cat.es_affinity * z[k] + noise).exp());
                    let (cand, w) =
                        venue_choice(r, cat, &by_cat[c], &venues, &venue_xy, homes_xy[k], k % n_tracts, z_taste)?;
                    let (cand, w) = pick_favorites(cand, w, r.favorites, &mut rng);
                    Some((cand, WeightedIndex::new(&w).ok()?))
                })
                .collect();
            for (s, c) in shares.iter_mut().zip(&choices) {
                if c.is_none() {
                    *s = 0.0;
                }
            }
            let cat_pick = WeightedIndex::new(&shares).ok();
            person_pings(r, &f, &persons[k], homes_xy[k], &venue_xy, &choices, cat_pick.as_ref(), &mut rng)
        })
        .flatten()
        .collect();

    Ok(City { truth: GroundTruth { recipe: r.clone(), persons, venues, hubs }, properties, layer, pings })
}

#[allow(clippy::too_many_arguments)]
fn venue_choice(
    r: &CityRecipe,
    cat: &VenueCategory,
    members: &[usize],
    venues: &[Venue],
    venue_xy: &[(f64, f64)],
    home: (f64, f64),
    tract: usize,
    z: f64,
) -> Option<(Vec<usize>, Vec<f64>)> {
    let dist = |v: usize| ((venue_xy[v].0 - home.0).powi(2) + (venue_xy[v].1 - home.1).powi(2)).sqrt();
    let mut cand: Vec<usize> = members
        .iter()
        .copied()
        .filter(|&v| {
            if cat.placement == VenuePlacement::Tracts {
                venues[v].tract == tract
            } else {
                dist(v) <= r.travel_radius_m
            }
        })
        .collect();
    if cand.is_empty() {
        cand = members.iter().copied().min_by(|&a, &b| dist(a).total_cmp(&dist(b))).into_iter().collect();
    }
    if cand.is_empty() {
        return None;
    }
    let w: Vec<f64> = cand
        .iter()
        .map(|&v| (-cat.gamma * (z - venues[v].level).abs() - dist(v) / r.distance_decay_m).exp().max(1e-300))
        .collect();
    Some((cand, w))
}

/// Keeps `k` venues drawn without replacement in proportion to `w`
/// (exponential keys) and visits them uniformly; `k = 0` keeps all.
fn pick_favorites(cand: Vec<usize>, w: Vec<f64>, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<f64>) {
    if k == 0 || cand.len() <= k {
        return (cand, w);
    }
    let mut keyed: Vec<(f64, usize)> = cand.iter().zip(&w).map(|(&v, &wv)| (-rng.gen::<f64>().ln() / wv, v)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let fav: Vec<usize> = keyed.into_iter().take(k).map(|x| x.1).collect();
    let ones = vec![1.0; fav.len()];
    (fav, ones)
}

#[allow(clippy::too_many_arguments)]
fn person_pings(
    r: &CityRecipe,
    f: &LocalFrame,
    p: &TruePerson,
    home: (f64, f64),
    venue_xy: &[(f64, f64)],
    choices: &[Option<(Vec<usize>, WeightedIndex<f64>)>],
    cat_pick: Option<&WeightedIndex<f64>>,
    rng: &mut ChaCha8Rng,
) -> Vec<Ping> {
    let noise = Normal::new(0.0, r.noise_m.max(1e-9)).expect("positive sd");
    let mut out = Vec::new();
    let mut emit = |rng: &mut ChaCha8Rng, t: i64, x: f64, y: f64| {
        let (lat, lon) = f.to_latlon(x + noise.sample(rng), y + noise.sample(rng));
        out.push(Ping { person_id: p.person_id.clone(), t, lat, lon, accuracy_m: Some(r.noise_m.round()) });
    };
    let poisson_times = |rng: &mut ChaCha8Rng, start: f64, end: f64, rate_per_h: f64| -> Vec<i64> {
        if rate_per_h <= 0.0 || end <= start {
            return Vec::new();
        }
        let expected = rate_per_h * (end - start) / 3600.0;
        let n = Poisson::new(expected).map(|d| d.sample(rng) as usize).unwrap_or(0);
        let mut ts: Vec<i64> = (0..n).map(|_| rng.gen_range(start..end).floor() as i64).collect();
        ts.sort_unstable();
        ts
    };
    let day_start = 9.0 * 3600.0;
    let day_len = 9.0 * 3600.0;
    let dur = r.visit_minutes * 60.0;
    for d in 0..r.days {
        let d0 = (START_T + d as i64 * 86_400) as f64;
        if r.night_pings {
            // evening of day d to the next morning
            for t in poisson_times(rng, d0 + 18.0 * 3600.0, d0 + 33.0 * 3600.0, r.night_rate_per_h) {
                emit(rng, t, home.0, home.1);
            }
        }
        let Some(pick) = cat_pick else { continue };
        if r.visits_per_day == 0 {
            continue;
        }
        let slot = day_len / r.visits_per_day as f64;
        for v in 0..r.visits_per_day {
            let c = pick.sample(rng);
            let Some((cand, idx)) = &choices[c] else { continue };
            let venue = cand[idx.sample(rng)];
            let slack = (slot - dur).max(0.0);
            let start = d0 + day_start + v as f64 * slot + rng.gen_range(0.0..=slack);
            let (vx, vy) = venue_xy[venue];
            let j = (r.venue_size_m * 0.5 - 3.0 * r.noise_m).max(0.0);
            let (px, py) = (vx + rng.gen_range(-j..=j), vy + rng.gen_range(-j..=j));
            for t in poisson_times(rng, start, start + dur.min(slot), r.visit_rate_per_h) {
                emit(rng, t, px, py);
            }
        }
    }
    out
}

/// One row of a population sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub population: usize,
    pub venue_count: usize,
    pub venue_cov: Option<f64>,
    pub venue_is: Option<f64>,
    pub overall_is: Option<f64>,
    pub naive_is: Option<f64>,
    pub bi: Option<f64>,
    pub interactions: u64,
}

/// Runs the ping join and estimators on a generated city, using true
/// homes and ES.
pub fn measure_city(label: &str, city: &City, join: &JoinConfig) -> Result<SweepRow> {
    let r = &city.truth.recipe;
    let store = PingStore::from_pings(city.pings.iter().cloned());
    let (net, _) = build_network(&store, join, 0)?;
    let persons = city.true_persons();
    let layer = GeoLayer::from_records(city.layer.clone())?;
    let ann = annotate_all(&net, &persons, &layer, 0);
    let es = standardized_es(&persons, EsDefinition::Rent);
    let all = |_: &str| true;
    let groups = ego_groups(&net, |_| true, &es, &all, join.weighting);
    let overall = fit_mixed(&groups).ok();
    let naive = crate::segregation::naive_corr(&groups).ok();
    let venue = is_decomposed(&net, &ann, &es, &all, &Filter::InPoi, join.weighting).ok();
    let mut covs = Vec::new();
    for cat in &r.categories {
        let name = format!("poi:{}", cat.name);
        let vs: Vec<(String, f64, f64)> =
            city.truth.venues.iter().filter(|v| v.category == cat.name).map(|v| (v.id.clone(), v.lat, v.lon)).collect();
        let residents: Vec<&Person> = persons.iter().collect();
        if let Some(c) = venue_stats(&net, &ann, &persons, &residents, &name, &vs, 10_000.0).cov {
            covs.push(c);
        }
    }
    let homes: Vec<(f64, f64, f64)> = persons.iter().map(|p| (p.home_lat, p.home_lon, p.es_raw)).collect();
    let bi = if city.truth.hubs.is_empty() {
        None
    } else {
        bridging_index(&homes, &city.truth.hubs, Diversity::Gini).ok().map(|b| b.bi)
    };
    Ok(SweepRow {
        label: label.to_string(),
        population: r.population,
        venue_count: city.truth.venues.len(),
        venue_cov: (!covs.is_empty()).then(|| stats::mean(&covs)),
        venue_is: venue.map(|e| e.rho),
        overall_is: overall.map(|e| e.rho),
        naive_is: naive,
        bi,
        interactions: net.items.len() as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub spearman_population_is: Option<Correlation>,
}

/// Generates and measures every recipe; rows keep recipe order.
pub fn sweep(recipes: &[(String, CityRecipe)], join: &JoinConfig) -> Result<SweepResult> {
    let rows: Vec<SweepRow> =
        recipes.par_iter().map(|(label, r)| measure_city(label, &generate(r)?, join)).collect::<Result<_>>()?;
    let pairs: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.overall_is.map(|v| (r.population as f64, v))).collect();
    let (p, v): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let spearman_population_is = if p.len() >= 3 { stats::spearman(&p, &v) } else { None };
    Ok(SweepResult { rows, spearman_population_is })
}

/// Mean and maximum distance between inferred and true homes, and the
/// fraction within `tol_m`.
pub fn home_recovery(truth: &GroundTruth, inferred: &[(String, f64, f64)], tol_m: f64) -> (f64, usize) {
    let by_id: HashMap<&str, &TruePerson> = truth.persons.iter().map(|p| (p.person_id.as_str(), p)).collect();
    let mut ok = 0usize;
    for (id, lat, lon) in inferred {
        if let Some(t) = by_id.get(id.as_str()) {
            if haversine_m(*lat, *lon, t.home_lat, t.home_lon) <= tol_m {
                ok += 1;
            }
        }
    }
    (ok as f64 / truth.persons.len() as f64, ok)
}

/// Weighting used when a sweep is asked for repeat-weighted estimates.
pub fn weighting_variant(base: &JoinConfig, w: Weighting) -> JoinConfig {
    JoinConfig { weighting: w, ..base.clone() }
}

/// Coefficient of variation of venue ES levels as generated (in ES
/// standard deviations around 1), independent of any visits.
pub fn venue_level_cov(city: &City, category: &str) -> Option<f64> {
    let lv: Vec<f64> = city.truth.venues.iter().filter(|v| v.category == category).map(|v| v.level.exp()).collect();
    coefficient_of_variation(&lv)
}
