//! Counterfactual interaction networks: constant homophily and a
//! per-category configuration model.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::Annotation;
use crate::crossings::{assign_ordinals, Interaction, Network};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::segregation::{fit_mixed, EgoGroup, SegregationEstimate};
use crate::stats::{self, Correlation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    Linear,
    Softmax,
}

impl std::str::FromStr for Kernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "softmax" => Ok(Self::Softmax),
            _ => Err(Error::Config(format!("kernel `{s}`; expected linear or softmax"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EsTransform {
    #[default]
    Raw,
    Percentile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HomophilyConfig {
    pub degree_per_person: usize,
    pub h: f64,
    pub kernel: Kernel,
    pub es_transform: EsTransform,
    pub seed: u64,
}

impl Default for HomophilyConfig {
    fn default() -> Self {
        Self { degree_per_person: 75, h: 1.0, kernel: Kernel::Linear, es_transform: EsTransform::Raw, seed: 0 }
    }
}

/// Complement of the range-normalized ES distance.
pub fn similarity(es_i: f64, es_j: f64, es_min: f64, es_max: f64) -> Result<f64> {
    if !(es_max > es_min) {
        return Err(Error::Degenerate("ES range is empty; similarity undefined".into()));
    }
    Ok(1.0 - (es_i - es_j).abs() / (es_max - es_min))
}

/// Partner weight scaled to [0, 1] so it can serve as an acceptance
/// probability. The softmax kernel `exp(H s)` is divided by its maximum
/// `exp(H)`, which leaves the normalized probabilities unchanged.
fn kernel_weight(sim: f64, cfg: &HomophilyConfig) -> f64 {
    match cfg.kernel {
        Kernel::Linear => {
            if cfg.h == 0.0 {
                1.0
            } else {
                sim.max(0.0).powf(cfg.h)
            }
        }
        Kernel::Softmax => (cfg.h * (sim - 1.0)).exp(),
    }
}

fn transformed(es: &[f64], t: EsTransform) -> Vec<f64> {
    match t {
        EsTransform::Raw => es.to_vec(),
        EsTransform::Percentile => stats::percentile_ranks(es),
    }
}

/// Draws `degree` distinct partners for `ego`, sequentially, each with
/// probability proportional to its weight among those not yet drawn.
fn draw_partners<R: Rng>(
    rng: &mut R,
    ego: usize,
    es: &[f64],
    lo: f64,
    hi: f64,
    cfg: &HomophilyConfig,
    degree: usize,
) -> Vec<u32> {
    let n = es.len();
    let w = |j: usize| kernel_weight(1.0 - (es[ego] - es[j]).abs() / (hi - lo), cfg);
    let mut chosen: Vec<u32> = Vec::with_capacity(degree);
    let budget = 200 * degree.max(1);
    let mut tries = 0;
    while chosen.len() < degree && tries < budget {
        tries += 1;
        let mut j = rng.gen_range(0..n - 1);
        if j >= ego {
            j += 1;
        }
        if chosen.contains(&(j as u32)) {
            continue;
        }
        if rng.gen::<f64>() < w(j) {
            chosen.push(j as u32);
        }
    }
    if chosen.len() < degree {
        // Low acceptance: finish with exponential-key sampling, which gives
        // the same sequential without-replacement law.
        let mut keyed: Vec<(f64, u32)> = (0..n)
            .filter(|&j| j != ego && !chosen.contains(&(j as u32)))
            .filter_map(|j| {
                let wj = w(j);
                (wj > 0.0).then(|| (-rng.gen::<f64>().ln() / wj, j as u32))
            })
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        chosen.extend(keyed.into_iter().take(degree - chosen.len()).map(|k| k.1));
    }
    chosen
}

/// Constant-homophily random network over persons with the given ES
/// values. Returns sorted unique undirected pairs `(i, j)`, `i < j`.
pub fn sample_homophily_network(es: &[f64], cfg: &HomophilyConfig) -> Result<Vec<(u32, u32)>> {
    let n = es.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("homophily network needs at least 2 persons, got {n}")));
    }
    if cfg.degree_per_person == 0 {
        return Err(Error::Config("degree_per_person must be at least 1".into()));
    }
    if cfg.degree_per_person >= n - 1 {
        log::warn!("degree {} >= n - 1 = {}; returning the complete graph", cfg.degree_per_person, n - 1);
        return Ok((0..n as u32).flat_map(|i| (i + 1..n as u32).map(move |j| (i, j))).collect());
    }
    let vals = transformed(es, cfg.es_transform);
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Degenerate("ES range is empty; similarity undefined".into()));
    }
    let mut rng = rng_for(cfg.seed, &["homophily"]);
    let mut pairs = Vec::with_capacity(n * cfg.degree_per_person);
    for ego in 0..n {
        for j in draw_partners(&mut rng, ego, &vals, lo, hi, cfg, cfg.degree_per_person) {
            let (a, b) = (ego as u32, j);
            pairs.push((a.min(b), a.max(b)));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    Ok(pairs)
}

/// Ego groups over standardized ES for a pair list.
pub fn groups_from_pairs(pairs: &[(u32, u32)], es: &[f64]) -> Vec<EgoGroup> {
    let (m, s) = (stats::mean(es), stats::pop_std(es));
    let z: Vec<f64> = es.iter().map(|v| if s > 0.0 { (v - m) / s } else { 0.0 }).collect();
    let mut ys: Vec<Vec<f64>> = vec![Vec::new(); es.len()];
    for &(i, j) in pairs {
        ys[i as usize].push(z[j as usize]);
        ys[j as usize].push(z[i as usize]);
    }
    ys.into_iter()
        .enumerate()
        .filter(|(_, y)| !y.is_empty())
        .map(|(k, y)| EgoGroup { ego: k.to_string(), x: z[k], ys: y })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewireReport {
    /// Categories that exhausted the restart budget; their remaining
    /// self-matches were dropped.
    pub self_match_categories: Vec<String>,
    pub dropped_self_matches: u64,
    /// Categories where an odd stub was discarded.
    pub odd_stub_categories: Vec<String>,
}

const MAX_RESTARTS: usize = 100;

/// Rewires POI interactions within each category by uniform stub
/// matching, preserving every person's per-category degree. Interactions
/// outside POIs pass through unchanged.
pub fn configuration_by_category(
    net: &Network,
    ann: &[Annotation],
    seed: u64,
) -> (Network, Vec<Annotation>, RewireReport) {
    let mut by_cat: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut out: Vec<(Interaction, Annotation)> = Vec::with_capacity(net.items.len());
    for (n, a) in ann.iter().enumerate() {
        match a.poi_category.as_deref() {
            Some(c) => by_cat.entry(c).or_default().push(n),
            None => out.push((net.items[n], a.clone())),
        }
    }
    let mut report = RewireReport::default();
    for (cat, edges) in by_cat {
        let mut rng = rng_for(seed, &["config_model", cat]);
        let mut stubs: Vec<u32> = edges.iter().flat_map(|&n| [net.items[n].i, net.items[n].j]).collect();
        if stubs.len() % 2 == 1 {
            let k = rng.gen_range(0..stubs.len());
            stubs.swap_remove(k);
            log::warn!("odd stub count in category {cat}; dropped one stub");
            report.odd_stub_categories.push(cat.to_string());
        }
        let mut clean = false;
        for _ in 0..MAX_RESTARTS {
            stubs.shuffle(&mut rng);
            if stubs.chunks_exact(2).all(|p| p[0] != p[1]) {
                clean = true;
                break;
            }
        }
        if !clean {
            report.self_match_categories.push(cat.to_string());
        }
        for (k, p) in stubs.chunks_exact(2).enumerate() {
            if p[0] == p[1] {
                report.dropped_self_matches += 1;
                continue;
            }
            let src = edges[k];
            let mut x = net.items[src];
            x.i = p[0].min(p[1]);
            x.j = p[0].max(p[1]);
            let mut a = ann[src].clone();
            a.at_home_i = false;
            a.at_home_j = false;
            a.in_home_tract_i = false;
            a.in_home_tract_j = false;
            out.push((x, a));
        }
    }
    out.sort_by(|a, b| a.0.canonical_cmp(&b.0));
    let (mut items, anns): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    assign_ordinals(&mut items);
    (Network { ids: net.ids.clone(), items }, anns, report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullRegion {
    pub population: usize,
    pub estimate: SegregationEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSweep {
    pub regions: Vec<NullRegion>,
    pub spearman: Option<Correlation>,
}

/// Mixed-model segregation of a constant-homophily network drawn for each
/// region's ES values. Region `k` uses a seed derived from `(cfg.seed, k)`.
pub fn population_sweep_null(regions: &[Vec<f64>], cfg: &HomophilyConfig) -> Result<NullSweep> {
    let out: Vec<NullRegion> = regions
        .par_iter()
        .enumerate()
        .map(|(k, es)| {
            let mut c = cfg.clone();
            c.seed = crate::seed::derive_seed(cfg.seed, &["null_region", &k.to_string()]);
            let pairs = sample_homophily_network(es, &c)?;
            let estimate = fit_mixed(&groups_from_pairs(&pairs, es))?;
            Ok(NullRegion { population: es.len(), estimate })
        })
        .collect::<Result<_>>()?;
    let pop: Vec<f64> = out.iter().map(|r| r.population as f64).collect();
    let is: Vec<f64> = out.iter().map(|r| r.estimate.rho).collect();
    let spearman = if out.len() >= 3 { stats::spearman(&pop, &is) } else { None };
    Ok(NullSweep { regions: out, spearman })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(3.0, 3.0, 0.0, 10.0).unwrap(), 1.0);
        assert_eq!(similarity(0.0, 1000.0, 0.0, 1000.0).unwrap(), 0.0);
        assert_eq!(similarity(250.0, 750.0, 0.0, 1000.0).unwrap(), 0.5);
        assert!(similarity(1.0, 1.0, 2.0, 2.0).is_err());
    }

    fn partner_counts(es: &[f64], cfg: &HomophilyConfig, draws: usize) -> Vec<u64> {
        let mut rng = rng_for(cfg.seed, &["test"]);
        let lo = es.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = es.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0u64; es.len()];
        for _ in 0..draws {
            for j in draw_partners(&mut rng, 0, es, lo, hi, cfg, 1) {
                counts[j as usize] += 1;
            }
        }
        counts
    }

    #[test]
    fn zero_exponent_is_uniform() {
        let es: Vec<f64> = (0..10).map(|k| 1000.0 + 100.0 * (k * k) as f64).collect();
        let cfg = HomophilyConfig { h: 0.0, ..Default::default() };
        let counts = partner_counts(&es, &cfg, 100_000);
        assert_eq!(counts[0], 0);
        let expect = 100_000.0 / 9.0;
        let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        let p = 1.0 - ChiSquared::new(8.0).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2 {chi2} p {p}");
    }

    #[test]
    fn three_person_frequencies() {
        // ego ES 0, others 250 and 1000: similarities 0.75 and 0.0 against
        // range 1000; adding a fourth at 500 gives 0.5
        let es = [0.0, 250.0, 1000.0, 500.0];
        let cfg = HomophilyConfig::default();
        let n = 200_000;
        let counts = partner_counts(&es, &cfg, n);
        let p1 = counts[1] as f64 / n as f64;
        let p3 = counts[3] as f64 / n as f64;
        assert_eq!(counts[2], 0);
        assert!((p1 - 0.6).abs() < 0.01, "{p1}");
        assert!((p3 - 0.4).abs() < 0.01, "{p3}");
        let es3 = [0.0, 400.0, 1000.0];
        let counts = partner_counts(&es3, &cfg, n);
        assert_eq!(counts[1], n as u64);
    }

    #[test]
    fn softmax_frequencies() {
        let es = [0.0, 500.0, 1000.0];
        let cfg = HomophilyConfig { kernel: Kernel::Softmax, ..Default::default() };
        let n = 200_000;
        let counts = partner_counts(&es, &cfg, n);
        let (a, b) = (0.5f64.exp(), 0.0f64.exp());
        let p1 = counts[1] as f64 / n as f64;
        assert!((p1 - a / (a + b)).abs() < 0.01, "{p1}");
    }

    #[test]
    fn exact_fallback_matches_law() {
        // strong exponent: low acceptance, some draws finish by key sampling
        let es = [0.0, 100.0, 900.0, 1000.0];
        let cfg = HomophilyConfig { h: 25.0, ..Default::default() };
        let n = 20_000;
        let counts = partner_counts(&es, &cfg, n);
        let w = [0.9f64.powf(25.0), 0.1f64.powf(25.0)];
        let p1 = counts[1] as f64 / n as f64;
        assert!((p1 - w[0] / (w[0] + w[1])).abs() < 0.01);
    }

    #[test]
    fn network_shape_and_determinism() {
        let es: Vec<f64> = (0..300).map(|k| 500.0 + (k * 37 % 300) as f64 * 20.0).collect();
        let cfg = HomophilyConfig { degree_per_person: 10, seed: 7, ..Default::default() };
        let a = sample_homophily_network(&es, &cfg).unwrap();
        assert_eq!(a, sample_homophily_network(&es, &cfg).unwrap());
        assert!(a.iter().all(|&(i, j)| i < j));
        let mean_degree = 2.0 * a.len() as f64 / es.len() as f64;
        assert!(mean_degree > 15.0 && mean_degree <= 20.0, "{mean_degree}");
        let complete = sample_homophily_network(&es[..5], &HomophilyConfig { degree_per_person: 4, ..cfg }).unwrap();
        assert_eq!(complete.len(), 10);
    }

    fn toy(pairs: &[(u32, u32, &str)]) -> (Network, Vec<Annotation>) {
        let ids: Vec<String> = (0..6).map(|k| format!("p{k}")).collect();
        let items = pairs.iter().map(|&(i, j, _)| Interaction { i, j, t: 0, lat: 0.0, lon: 0.0, k: 0 }).collect();
        let ann = pairs
            .iter()
            .map(|&(_, _, c)| Annotation { poi_category: (!c.is_empty()).then(|| c.to_string()), ..Default::default() })
            .collect();
        (Network { ids, items }, ann)
    }

    fn degrees(net: &Network, ann: &[Annotation]) -> BTreeMap<(u32, String), usize> {
        let mut d = BTreeMap::new();
        for (x, a) in net.items.iter().zip(ann) {
            let c = a.poi_category.clone().unwrap_or_default();
            *d.entry((x.i, c.clone())).or_default() += 1;
            *d.entry((x.j, c)).or_default() += 1;
        }
        d
    }

    #[test]
    fn forced_matching() {
        let (net, ann) = toy(&[(1, 4, "poi:bar")]);
        let (out, _, rep) = configuration_by_category(&net, &ann, 3);
        assert_eq!((out.items[0].i, out.items[0].j), (1, 4));
        assert!(rep.self_match_categories.is_empty());
    }

    #[test]
    fn degrees_are_preserved() {
        let (net, ann) = toy(&[
            (0, 1, "poi:bar"),
            (0, 2, "poi:bar"),
            (3, 4, "poi:bar"),
            (1, 5, "poi:gym"),
            (2, 3, "poi:gym"),
            (0, 5, ""),
        ]);
        for seed in 0..20 {
            let (out, ann2, rep) = configuration_by_category(&net, &ann, seed);
            if rep.dropped_self_matches == 0 {
                assert_eq!(degrees(&out, &ann2), degrees(&net, &ann));
            }
            assert!(out.items.iter().any(|x| (x.i, x.j) == (0, 5)));
        }
    }
}
