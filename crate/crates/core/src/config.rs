//! Run configuration shared by all pipeline stages.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridging::Diversity;
use crate::crossings::JoinConfig;
use crate::error::{Error, Result};
use crate::home::{EsDefinition, HomeConfig, LinkConfig};
use crate::ingest::{ColumnMap, IngestConfig};
use crate::nullmodels::HomophilyConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub pings: Option<PathBuf>,
    pub properties: Option<PathBuf>,
    pub layers: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    pub measure: Diversity,
    pub ablation_trials: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self { measure: Diversity::Gini, ablation_trials: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VenueConfig {
    /// Radius for the venue accessibility count.
    pub access_radius_m: f64,
}

impl Default for VenueConfig {
    fn default() -> Self {
        Self { access_radius_m: 1000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub columns: ColumnMap,
    pub ingest: IngestConfig,
    pub home: HomeConfig,
    pub link: LinkConfig,
    pub join: JoinConfig,
    pub es_definition: EsDefinition,
    /// Region polygon id, or `all`.
    pub region: String,
    pub bridge: BridgeConfig,
    pub venues: VenueConfig,
    pub null: HomophilyConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths { out_dir: PathBuf::from("out"), ..Default::default() },
            columns: ColumnMap::default(),
            ingest: IngestConfig::default(),
            home: HomeConfig::default(),
            link: LinkConfig::default(),
            join: JoinConfig::default(),
            es_definition: EsDefinition::Rent,
            region: "all".into(),
            bridge: BridgeConfig::default(),
            venues: VenueConfig::default(),
            null: HomophilyConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.join.validate()?;
        if self.home.night_start_hour > 23 || self.home.night_end_hour > 23 {
            return Err(Error::Config("night hours must be in 0..=23".into()));
        }
        if !(self.link.es_winsor_max > 0.0) {
            return Err(Error::Config("es_winsor_max must be positive".into()));
        }
        if self.region.is_empty() {
            return Err(Error::Config("region must be a polygon id or `all`".into()));
        }
        Ok(())
    }

    pub fn utc_offset_s(&self) -> i64 {
        crate::home::offset_seconds(self.home.utc_offset_hours)
    }

    /// Hex SHA-256 of the analysis parameters (paths excluded).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("paths");
        }
        let text = serde_json::to_string(&v).expect("value serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Human-readable list of parameters that differ from the primary
    /// configuration.
    pub fn deviations(&self) -> Vec<String> {
        let d = RunConfig::default();
        let mut out = Vec::new();
        let mut check = |name: &str, a: String, b: String| {
            if a != b {
                out.push(format!("{name} = {a} (default {b})"));
            }
        };
        check("join.dist_m", self.join.dist_m.to_string(), d.join.dist_m.to_string());
        check("join.time_s", self.join.time_s.to_string(), d.join.time_s.to_string());
        check("join.tie_strength", self.join.tie_strength.to_string(), d.join.tie_strength.to_string());
        check("join.weighting", format!("{:?}", self.join.weighting), format!("{:?}", d.join.weighting));
        check("es_definition", format!("{:?}", self.es_definition), format!("{:?}", d.es_definition));
        check("link.es_winsor_max", self.link.es_winsor_max.to_string(), d.link.es_winsor_max.to_string());
        check("home", format!("{:?}", self.home), format!("{:?}", d.home));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_primary_thresholds() {
        let c = RunConfig::default();
        assert_eq!(c.join.dist_m, 50.0);
        assert_eq!(c.join.time_s, 300);
        assert_eq!(c.link.es_winsor_max, 20_000.0);
        assert_eq!(c.home.home_move_thresh_m, 50.0);
        assert!(c.deviations().is_empty());
        c.validate().unwrap();
    }

    #[test]
    fn hash_ignores_paths_and_tracks_parameters() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.join.dist_m = 25.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(b.deviations().len(), 1);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"join": {"dist_m": 10.0, "time_s": 60, "tie_strength": {"kind": "any"}, "weighting": "dedup_pairs", "collapse_repeats": true}, "seed": 7}"#).unwrap();
        assert_eq!(c.join.dist_m, 10.0);
        assert_eq!(c.seed, 7);
        assert_eq!(c.region, "all");
    }
}
