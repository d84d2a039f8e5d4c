use intseg::crossings::{join_bruteforce, join_indexed, JoinConfig, TieStrength, Weighting};
use intseg::geo::LocalFrame;
use intseg::ingest::{Ping, PingStore};
use proptest::prelude::*;

fn cfg(dist_m: f64, time_s: i64) -> JoinConfig {
    JoinConfig {
        dist_m,
        time_s,
        tie_strength: TieStrength::Any,
        weighting: Weighting::DedupPairs,
        collapse_repeats: false,
    }
}

fn store(raw: &[(u8, i64, f64, f64)], lat0: f64, lon0: f64) -> PingStore {
    let f = LocalFrame::new(lat0, lon0);
    PingStore::from_pings(raw.iter().map(|&(p, t, x, y)| {
        let (lat, lon) = f.to_latlon(x, y);
        Ping { person_id: format!("p{p:02}"), t, lat, lon, accuracy_m: None }
    }))
}

// great-circle distance written out independently of the library
fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let r = 6_371_000.0;
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dp = p2 - p1;
    let dl = (b.1 - a.1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * r * h.sqrt().min(1.0).asin()
}

fn oracle_count(s: &PingStore, d: f64, t: i64) -> usize {
    let pings: Vec<Ping> = s.to_pings().collect();
    let mut n = 0;
    for (a, pa) in pings.iter().enumerate() {
        for pb in &pings[a + 1..] {
            if pa.person_id != pb.person_id && (pa.t - pb.t).abs() < t && dist((pa.lat, pa.lon), (pb.lat, pb.lon)) < d {
                n += 1;
            }
        }
    }
    n
}

fn fixture() -> impl Strategy<Value = Vec<(u8, i64, f64, f64)>> {
    (1usize..12, 5.0f64..400.0).prop_flat_map(|(people, extent)| {
        prop::collection::vec((0..people as u8, 0i64..1800, -extent..extent, -extent..extent), 0..400)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn indexed_equals_bruteforce(raw in fixture(), di in 0usize..3, ti in 0usize..3, lat0 in -60.0f64..60.0) {
        let d = [10.0, 25.0, 50.0][di];
        let t = [60, 120, 300][ti];
        let s = store(&raw, lat0, 20.0);
        let c = cfg(d, t);
        let a = join_indexed(&s, &c).unwrap();
        let b = join_bruteforce(&s, &c).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), oracle_count(&s, d, t));
    }

    #[test]
    fn wider_thresholds_keep_every_interaction(raw in fixture()) {
        let s = store(&raw, 35.0, -80.0);
        let small = join_indexed(&s, &cfg(10.0, 60)).unwrap();
        let big = join_indexed(&s, &cfg(50.0, 300)).unwrap();
        for x in &small {
            prop_assert!(big.iter().any(|y| y.i == x.i && y.j == x.j && y.t == x.t && y.lat == x.lat && y.lon == x.lon));
        }
    }

    #[test]
    fn time_shift_leaves_pairs_unchanged(raw in fixture(), shift in -100_000i64..100_000) {
        let s = store(&raw, 35.0, -80.0);
        let moved: Vec<_> = raw.iter().map(|&(p, t, x, y)| (p, t + shift, x, y)).collect();
        let m = store(&moved, 35.0, -80.0);
        let a = join_indexed(&s, &cfg(25.0, 120)).unwrap();
        let b = join_indexed(&m, &cfg(25.0, 120)).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!((x.i, x.j, x.t + shift), (y.i, y.j, y.t));
        }
    }
}

#[test]
fn pairs_across_the_antimeridian() {
    let s = PingStore::from_pings([
        Ping { person_id: "a".into(), t: 0, lat: 10.0, lon: 179.99990, accuracy_m: None },
        Ping { person_id: "b".into(), t: 30, lat: 10.0, lon: -179.99990, accuracy_m: None },
    ]);
    let c = cfg(50.0, 300);
    assert_eq!(join_indexed(&s, &c).unwrap().len(), 1);
    assert_eq!(join_bruteforce(&s, &c).unwrap().len(), 1);
}
