//! Interaction segregation estimates, residential sorting and auxiliary
//! venue and connectedness statistics.

mod mixed;

pub use mixed::{fit_mixed, fit_stats, naive_corr, rho_of, EgoGroup, GroupStats, SegregationEstimate};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::annotate::{Annotation, Filter};
use crate::crossings::{alter_lists, Network, Weighting};
use crate::error::{Error, Result};
use crate::geo::haversine_m;
use crate::home::{EsDefinition, Person};
use crate::stats;

/// Standardized ES per person under the chosen definition (z-scored over
/// every person that has a value).
pub fn standardized_es(persons: &[Person], def: EsDefinition) -> HashMap<&str, f64> {
    let vals: Vec<(&str, f64)> =
        persons.iter().filter_map(|p| p.es_value(def).map(|v| (p.person_id.as_str(), v))).collect();
    let raw: Vec<f64> = vals.iter().map(|v| v.1).collect();
    let (m, s) = (stats::mean(&raw), stats::pop_std(&raw));
    vals.into_iter().map(|(id, v)| (id, if s > 0.0 { (v - m) / s } else { 0.0 })).collect()
}

/// Builds ego groups from a network. `egos` selects the persons whose
/// groups are formed; alters are any partner with ES.
pub fn ego_groups(
    net: &Network,
    keep: impl Fn(usize) -> bool,
    es: &HashMap<&str, f64>,
    egos: &dyn Fn(&str) -> bool,
    weighting: Weighting,
) -> Vec<EgoGroup> {
    let es_of: Vec<Option<f64>> = net.ids.iter().map(|id| es.get(id.as_str()).copied()).collect();
    let pairs = net.items.iter().enumerate().filter(|(n, _)| keep(*n)).map(|(_, x)| (x.i, x.j));
    alter_lists(pairs, net.ids.len(), weighting)
        .into_iter()
        .enumerate()
        .filter_map(|(p, alters)| {
            let id = &net.ids[p];
            let x = es_of[p]?;
            if !egos(id) {
                return None;
            }
            let ys: Vec<f64> = alters.iter().filter_map(|&a| es_of[a as usize]).collect();
            (!ys.is_empty()).then(|| EgoGroup { ego: id.clone(), x, ys })
        })
        .collect()
}

/// Mixed-model estimate on the interactions whose annotation passes
/// `filter`.
pub fn is_decomposed(
    net: &Network,
    ann: &[Annotation],
    es: &HashMap<&str, f64>,
    egos: &dyn Fn(&str) -> bool,
    filter: &Filter,
    weighting: Weighting,
) -> Result<SegregationEstimate> {
    if !ann.iter().any(|a| filter.matches(a)) {
        return Err(Error::Degenerate(format!("no interactions match filter `{}`", filter.label())));
    }
    let groups = ego_groups(net, |n| filter.matches(&ann[n]), es, egos, weighting);
    fit_mixed(&groups)
}

/// Residents grouped by home tract, sorted by tract id.
fn by_tract<'a>(persons: &'a [Person], es: &HashMap<&str, f64>) -> BTreeMap<&'a str, Vec<(&'a str, f64)>> {
    let mut out: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
    for p in persons {
        if let Some(&v) = es.get(p.person_id.as_str()) {
            out.entry(p.home_tract_id.as_str()).or_default().push((p.person_id.as_str(), v));
        }
    }
    out
}

/// Neighborhood sorting index: Pearson correlation of ES with the mean ES
/// of the person's home tract (the person included).
pub fn nsi(persons: &[Person], es: &HashMap<&str, f64>) -> Result<f64> {
    let tracts = by_tract(persons, es);
    if tracts.len() < 2 {
        return Err(Error::Degenerate(format!("NSI needs at least 2 tracts, got {}", tracts.len())));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for members in tracts.values() {
        let m = stats::mean(&members.iter().map(|v| v.1).collect::<Vec<_>>());
        for &(_, v) in members {
            x.push(v);
            y.push(m);
        }
    }
    stats::pearson(&x, &y).ok_or_else(|| Error::Degenerate("tract mean ES has zero variance".into()))
}

/// Ego groups of the complete within-tract network: every resident
/// interacts once with every other resident of their tract.
pub fn within_tract_groups(persons: &[Person], es: &HashMap<&str, f64>) -> Vec<EgoGroup> {
    let mut out = Vec::new();
    for members in by_tract(persons, es).values() {
        for (k, &(id, x)) in members.iter().enumerate() {
            let ys: Vec<f64> = members.iter().enumerate().filter(|(m, _)| *m != k).map(|(_, v)| v.1).collect();
            if !ys.is_empty() {
                out.push(EgoGroup { ego: id.to_string(), x, ys });
            }
        }
    }
    out
}

/// Fraction of interactions between known persons whose endpoints share a
/// home tract.
pub fn same_tract_share(net: &Network, persons: &[Person]) -> Option<f64> {
    let tract: HashMap<&str, &str> = persons.iter().map(|p| (p.person_id.as_str(), p.home_tract_id.as_str())).collect();
    let mut n = 0usize;
    let mut same = 0usize;
    for x in &net.items {
        if let (Some(a), Some(b)) =
            (tract.get(net.ids[x.i as usize].as_str()), tract.get(net.ids[x.j as usize].as_str()))
        {
            n += 1;
            same += (a == b) as usize;
        }
    }
    (n > 0).then(|| same as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VenueStats {
    pub category: String,
    /// (venue id, median visitor ES in dollars), venues with visitors only.
    pub venue_es: Vec<(String, f64)>,
    /// Population std / mean of venue medians.
    pub cov: Option<f64>,
    /// Mean count of category venues within `radius_m` of a resident's home.
    pub accessibility: Option<f64>,
    /// Mean distance from a resident's home to the nearest category venue.
    pub localization_m: Option<f64>,
    pub n_venues: usize,
}

/// Coefficient of variation with population standard deviation.
pub fn coefficient_of_variation(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let m = stats::mean(v);
    (m != 0.0).then(|| stats::pop_std(v) / m)
}

/// Venue differentiation and accessibility for one POI category.
///
/// `venues` are `(id, lat, lon)` anchors of the category's POIs and
/// `residents` the region's persons.
pub fn venue_stats(
    net: &Network,
    ann: &[Annotation],
    persons: &[Person],
    residents: &[&Person],
    category: &str,
    venues: &[(String, f64, f64)],
    radius_m: f64,
) -> VenueStats {
    let es_raw: HashMap<&str, f64> = persons.iter().map(|p| (p.person_id.as_str(), p.es_raw)).collect();
    let wanted: BTreeSet<&str> = venues.iter().map(|v| v.0.as_str()).collect();
    let mut visitors: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for (x, a) in net.items.iter().zip(ann) {
        if a.poi_category.as_deref() != Some(category) {
            continue;
        }
        if let Some(v) = a.poi_id.as_deref().filter(|v| wanted.contains(v)) {
            let set = visitors.entry(v).or_default();
            set.insert(x.i);
            set.insert(x.j);
        }
    }
    let venue_es: Vec<(String, f64)> = visitors
        .into_iter()
        .filter_map(|(v, who)| {
            let vals: Vec<f64> =
                who.iter().filter_map(|&p| es_raw.get(net.ids[p as usize].as_str()).copied()).collect();
            stats::median(&vals).map(|m| (v.to_string(), m))
        })
        .collect();
    let medians: Vec<f64> = venue_es.iter().map(|v| v.1).collect();
    let (accessibility, localization_m) = if venues.is_empty() || residents.is_empty() {
        (None, None)
    } else {
        let mut count = 0usize;
        let mut nearest = 0.0;
        for p in residents {
            let mut best = f64::INFINITY;
            for v in venues {
                let d = haversine_m(p.home_lat, p.home_lon, v.1, v.2);
                count += (d <= radius_m) as usize;
                best = best.min(d);
            }
            nearest += best;
        }
        let n = residents.len() as f64;
        (Some(count as f64 / n), Some(nearest / n))
    };
    VenueStats {
        category: category.to_string(),
        cov: coefficient_of_variation(&medians),
        venue_es,
        accessibility,
        localization_m,
        n_venues: venues.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Connectedness {
    pub region_a: String,
    pub region_b: String,
    pub pairs: u64,
    pub score: f64,
}

/// Unique interacting person pairs spanning two regions divided by the
/// product of their populations, for every pair of distinct regions.
pub fn connectedness(net: &Network, region_of: &HashMap<String, String>) -> Vec<Connectedness> {
    let mut sizes: BTreeMap<&str, u64> = BTreeMap::new();
    for r in region_of.values() {
        *sizes.entry(r.as_str()).or_default() += 1;
    }
    let reg: Vec<Option<&str>> = net.ids.iter().map(|id| region_of.get(id).map(String::as_str)).collect();
    let unique: BTreeSet<(u32, u32)> = net.pairs().collect();
    let mut counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
    for (i, j) in unique {
        if let (Some(a), Some(b)) = (reg[i as usize], reg[j as usize]) {
            if a != b {
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
    }
    let names: Vec<&str> = sizes.keys().copied().collect();
    let mut out = Vec::new();
    for (k, &a) in names.iter().enumerate() {
        for &b in &names[k + 1..] {
            let pairs = counts.get(&(a, b)).copied().unwrap_or(0);
            out.push(Connectedness {
                region_a: a.into(),
                region_b: b.into(),
                pairs,
                score: pairs as f64 / (sizes[a] * sizes[b]) as f64,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossings::Interaction;

    fn person(id: &str, tract: &str, es: f64) -> Person {
        let mut p = Person::new(id, 0.0, 0.0, tract, "all", es);
        p.es = es;
        p
    }

    fn es_map(ps: &[Person]) -> HashMap<&str, f64> {
        standardized_es(ps, EsDefinition::Rent)
    }

    #[test]
    fn nsi_uniform_tracts() {
        let ps = vec![
            person("a", "t1", 1000.0),
            person("b", "t1", 1000.0),
            person("c", "t2", 3000.0),
            person("d", "t2", 3000.0),
        ];
        assert!((nsi(&ps, &es_map(&ps)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nsi_degenerate() {
        let ps = vec![person("a", "t1", 1000.0), person("b", "t1", 2000.0)];
        assert!(nsi(&ps, &es_map(&ps)).is_err());
        let ps = vec![
            person("a", "t1", 1000.0),
            person("b", "t1", 3000.0),
            person("c", "t2", 1000.0),
            person("d", "t2", 3000.0),
        ];
        assert!(matches!(nsi(&ps, &es_map(&ps)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn within_tract_groups_exclude_self() {
        let ps = vec![person("a", "t1", 1.0), person("b", "t1", 2.0), person("c", "t2", 5.0)];
        let g = within_tract_groups(&ps, &es_map(&ps));
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].ys.len(), 1);
    }

    #[test]
    fn cov_examples() {
        assert_eq!(coefficient_of_variation(&[2000.0]), Some(0.0));
        assert_eq!(coefficient_of_variation(&[1000.0, 3000.0]), Some(0.5));
    }

    fn net(ids: &[&str], pairs: &[(u32, u32)]) -> Network {
        Network {
            ids: ids.iter().map(|s| s.to_string()).collect(),
            items: pairs.iter().map(|&(i, j)| Interaction { i, j, t: 0, lat: 0.0, lon: 0.0, k: 0 }).collect(),
        }
    }

    #[test]
    fn venue_medians_and_access() {
        let ps = vec![
            person("a", "t", 1000.0),
            person("b", "t", 1000.0),
            person("c", "t", 3000.0),
            person("d", "t", 3000.0),
        ];
        let n = net(&["a", "b", "c", "d"], &[(0, 1), (2, 3)]);
        let ann = vec![
            Annotation { poi_id: Some("v1".into()), poi_category: Some("poi:food".into()), ..Default::default() },
            Annotation { poi_id: Some("v2".into()), poi_category: Some("poi:food".into()), ..Default::default() },
        ];
        let f = crate::geo::LocalFrame::new(0.0, 0.0);
        let at = |x: f64| {
            let (la, lo) = f.to_latlon(x, 0.0);
            (la, lo)
        };
        let venues: Vec<(String, f64, f64)> = [("v1", 1000.0), ("v2", 5000.0), ("v3", 20_000.0)]
            .iter()
            .map(|&(id, x)| {
                let (la, lo) = at(x);
                (id.to_string(), la, lo)
            })
            .collect();
        let residents: Vec<&Person> = ps[..1].iter().collect();
        let s = venue_stats(&n, &ann, &ps, &residents, "poi:food", &venues, 10_000.0);
        assert_eq!(s.venue_es, vec![("v1".to_string(), 1000.0), ("v2".to_string(), 3000.0)]);
        assert_eq!(s.cov, Some(0.5));
        assert_eq!(s.accessibility, Some(2.0));
        assert!((s.localization_m.unwrap() - 1000.0).abs() < 1e-6);
        let empty = venue_stats(&n, &ann, &ps, &residents, "poi:gym", &[], 10_000.0);
        assert_eq!((empty.cov, empty.accessibility), (None, None));
    }

    #[test]
    fn connectedness_counts() {
        let region: HashMap<String, String> = [("a", "R1"), ("b", "R1"), ("c", "R2"), ("d", "R2"), ("e", "R3")]
            .iter()
            .map(|(p, r)| (p.to_string(), r.to_string()))
            .collect();
        let n = net(&["a", "b", "c", "d", "e"], &[(0, 2), (0, 2), (0, 3), (1, 2), (1, 3), (0, 1), (3, 4)]);
        let c = connectedness(&n, &region);
        let score = |a: &str, b: &str| c.iter().find(|x| x.region_a == a && x.region_b == b).unwrap().score;
        assert_eq!(score("R1", "R2"), 1.0);
        assert_eq!(score("R1", "R3"), 0.0);
        assert_eq!(score("R2", "R3"), 0.5);
    }

    #[test]
    fn identity_filter_equals_unfiltered() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let ps: Vec<Person> = (0..60).map(|k| person(&format!("p{k:02}"), "t", rng.gen_range(500.0..5000.0))).collect();
        let mut pairs = Vec::new();
        for _ in 0..400 {
            let i = rng.gen_range(0..60u32);
            let j = rng.gen_range(0..60u32);
            if i != j {
                pairs.push((i.min(j), i.max(j)));
            }
        }
        let ids: Vec<String> = ps.iter().map(|p| p.person_id.clone()).collect();
        let idr: Vec<&str> = ids.iter().map(String::as_str).collect();
        let n = net(&idr, &pairs);
        let ann = vec![Annotation::default(); n.items.len()];
        let es = es_map(&ps);
        let all = |_: &str| true;
        let a = is_decomposed(&n, &ann, &es, &all, &Filter::All, Weighting::DedupPairs).unwrap();
        let b = fit_mixed(&ego_groups(&n, |_| true, &es, &all, Weighting::DedupPairs)).unwrap();
        assert_eq!(a, b);
        assert!(is_decomposed(&n, &ann, &es, &all, &Filter::InPoi, Weighting::DedupPairs).is_err());
    }
}
