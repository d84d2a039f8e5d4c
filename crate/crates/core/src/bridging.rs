//! Bridging Index: ES diversity within nearest-hub clusters relative to the
//! diversity of the whole region.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_m, Polygon};
use crate::seed::rng_for;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Diversity {
    #[default]
    Gini,
    Variance,
}

impl std::str::FromStr for Diversity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gini" => Ok(Self::Gini),
            "variance" => Ok(Self::Variance),
            _ => Err(Error::Config(format!("diversity measure `{s}`; expected gini or variance"))),
        }
    }
}

/// Mean-absolute-difference Gini, computed from sorted values in
/// O(n log n).
pub fn gini(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("Gini of an empty set".into()));
    }
    if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("Gini requires positive finite values".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    // sum_{i,j} |v_i - v_j| = 2 * sum_k (2k - n + 1) v_(k)
    let mut acc = 0.0;
    for (k, v) in s.iter().enumerate() {
        acc += (2.0 * k as f64 - n + 1.0) * v;
    }
    let total: f64 = s.iter().sum();
    Ok((acc / (n * total)).max(0.0))
}

pub fn diversity(values: &[f64], measure: Diversity) -> Result<f64> {
    match measure {
        Diversity::Gini => gini(values),
        Diversity::Variance => {
            if values.is_empty() {
                return Err(Error::InvalidInput("variance of an empty set".into()));
            }
            Ok(stats::pop_variance(values))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hub {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub hub_id: String,
    pub size: usize,
    pub diversity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgingResult {
    pub bi: f64,
    pub overall_diversity: f64,
    pub measure: Diversity,
    /// Non-empty clusters in hub id order.
    pub clusters: Vec<Cluster>,
}

/// Index of the nearest hub; ties go to the smallest hub id.
pub fn nearest_hub(hubs: &[Hub], lat: f64, lon: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, h) in hubs.iter().enumerate() {
        let d = haversine_m(lat, lon, h.lat, h.lon);
        if d < best_d || (d == best_d && h.id < hubs[best].id) {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Bridging index of persons given as `(lat, lon, es_dollars)`.
pub fn bridging_index(persons: &[(f64, f64, f64)], hubs: &[Hub], measure: Diversity) -> Result<BridgingResult> {
    if hubs.is_empty() {
        return Err(Error::InvalidInput("bridging index needs at least one hub".into()));
    }
    if persons.len() < 2 {
        return Err(Error::Degenerate(format!("bridging index needs at least 2 persons, got {}", persons.len())));
    }
    let es: Vec<f64> = persons.iter().map(|p| p.2).collect();
    let overall = diversity(&es, measure)?;
    if !(overall > 0.0) {
        return Err(Error::Degenerate("overall ES diversity is zero; bridging index undefined".into()));
    }
    let assign: Vec<usize> = persons.par_iter().map(|p| nearest_hub(hubs, p.0, p.1)).collect();
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); hubs.len()];
    for (p, &h) in persons.iter().zip(&assign) {
        members[h].push(p.2);
    }
    let mut order: Vec<usize> = (0..hubs.len()).collect();
    order.sort_by(|&a, &b| hubs[a].id.cmp(&hubs[b].id));
    let mut clusters = Vec::new();
    let mut within = 0.0;
    for h in order {
        let m = &members[h];
        if m.is_empty() {
            continue;
        }
        let d = if m.len() == 1 { 0.0 } else { diversity(m, measure)? };
        within += m.len() as f64 * d;
        clusters.push(Cluster { hub_id: hubs[h].id.clone(), size: m.len(), diversity: d });
    }
    Ok(BridgingResult { bi: within / (persons.len() as f64 * overall), overall_diversity: overall, measure, clusters })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub trials: Vec<f64>,
    pub mean: f64,
}

impl Ablation {
    /// Empirical quantile (nearest rank) of the trial values.
    pub fn quantile(&self, q: f64) -> f64 {
        let mut s = self.trials.clone();
        s.sort_by(f64::total_cmp);
        let k = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
        s[k]
    }
}

/// Bridging index with `k` hubs placed uniformly in `region`, repeated
/// `trials` times. Trial `t` draws from a stream derived from `(seed, t)`.
pub fn ablate_random_hubs(
    persons: &[(f64, f64, f64)],
    k: usize,
    region: &Polygon,
    trials: usize,
    seed: u64,
    measure: Diversity,
) -> Result<Ablation> {
    if k == 0 || trials == 0 {
        return Err(Error::InvalidInput("ablation needs k >= 1 and trials >= 1".into()));
    }
    if !(region.area_m2() > 0.0) {
        return Err(Error::Layer("ablation region polygon is degenerate".into()));
    }
    let values: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(seed, &["ablation", &t.to_string()]);
            let hubs = (0..k)
                .map(|h| {
                    let (lon, lat) = region
                        .sample_uniform(&mut rng, 1_000_000)
                        .ok_or_else(|| Error::Layer("could not sample inside ablation region".into()))?;
                    Ok(Hub { id: format!("random_{h:05}"), lat, lon })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(bridging_index(persons, &hubs, measure)?.bi)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = stats::mean(&values);
    Ok(Ablation { trials: values, mean })
}
