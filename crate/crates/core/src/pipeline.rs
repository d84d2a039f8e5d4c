//! File-based pipeline stages. Each stage reads the artifacts of earlier
//! stages from the output directory and writes its own, plus a
//! `<file>.meta.json` sidecar carrying the config hash.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotate::{annotate_all, read_annotated, write_annotated, Annotation, Filter, TractContext};
use crate::bridging::{ablate_random_hubs, bridging_index, Hub};
use crate::config::RunConfig;
use crate::crossings::{
    build_network, read_network, write_network, JoinConfig, Network, NetworkMeta, TieStrength, Weighting,
};
use crate::error::{Error, Result};
use crate::geo::Polygon;
use crate::home::{
    build_persons, infer_homes, read_homes, read_persons, read_properties, write_homes, write_persons, EsDefinition,
    Person,
};
use crate::ingest::{ingest, write_pings, ColumnMap, IngestReport, PingStore};
use crate::layers::{Category, GeoLayer};
use crate::nullmodels::{configuration_by_category, groups_from_pairs, sample_homophily_network, RewireReport};
use crate::segregation::{
    coefficient_of_variation, connectedness, ego_groups, fit_mixed, is_decomposed, naive_corr, nsi, standardized_es,
    venue_stats, within_tract_groups, Connectedness, SegregationEstimate,
};
use crate::stats::{self, Correlation};
use crate::synthcity::{City, SweepRow};

pub const PINGS: &str = "pings.csv";
pub const HOMES: &str = "homes.csv";
pub const PERSONS: &str = "persons.csv";
pub const NETWORK: &str = "network.csv";
pub const ANNOTATED: &str = "annotated.csv";
pub const REGION: &str = "region.json";
pub const NSI: &str = "nsi.json";
pub const BRIDGE: &str = "bridge.json";
pub const ROBUSTNESS: &str = "robustness.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub stage: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_meta(path: &Path, stage: &str, cfg: &RunConfig, details: serde_json::Value) -> Result<()> {
    let m = Meta { stage: stage.into(), config_hash: cfg.hash(), details };
    write_json(&meta_path(path), &m)
}

pub fn read_meta(path: &Path) -> Option<Meta> {
    let text = std::fs::read_to_string(meta_path(path)).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Path of an upstream artifact, or an error naming the stage that
/// produces it. A hash mismatch is logged, not fatal.
pub fn upstream(cfg: &RunConfig, file: &str, stage: &str) -> Result<PathBuf> {
    let p = cfg.paths.out_dir.join(file);
    if !p.exists() {
        return Err(Error::MissingUpstream { stage: stage.into(), path: p.display().to_string() });
    }
    if let Some(m) = read_meta(&p) {
        if m.config_hash != cfg.hash() {
            log::warn!("{} was produced under a different configuration ({})", p.display(), &m.config_hash[..12]);
        }
    }
    Ok(p)
}

fn input(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path.clone().ok_or_else(|| Error::Config(format!("no {what} path configured")))?;
    if !p.exists() {
        return Err(Error::InvalidInput(format!("{what} file {} not found", p.display())));
    }
    Ok(p)
}

fn out(cfg: &RunConfig, file: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    Ok(cfg.paths.out_dir.join(file))
}

fn warn_deviations(cfg: &RunConfig) {
    for d in cfg.deviations() {
        log::warn!("robustness variant active: {d}");
    }
}

pub fn load_layer(cfg: &RunConfig) -> Result<GeoLayer> {
    let p = input(&cfg.paths.layers, "layers")?;
    GeoLayer::read_jsonl(BufReader::new(File::open(p)?))
}

pub fn load_store(cfg: &RunConfig) -> Result<PingStore> {
    let p = upstream(cfg, PINGS, "ingest")?;
    let (store, _) = ingest(
        File::open(p)?,
        &ColumnMap::default(),
        &crate::ingest::IngestConfig { max_accuracy_m: f64::INFINITY, min_pings: 0, dedup_overlap_frac: f64::INFINITY },
    )?;
    Ok(store)
}

pub fn load_persons(cfg: &RunConfig) -> Result<Vec<Person>> {
    read_persons(File::open(upstream(cfg, PERSONS, "link-es")?)?)
}

pub fn load_annotated(cfg: &RunConfig, persons: &[Person]) -> Result<(Network, Vec<Annotation>)> {
    let ids: Vec<String> = persons.iter().map(|p| p.person_id.clone()).collect();
    read_annotated(File::open(upstream(cfg, ANNOTATED, "annotate")?)?, &ids)
}

pub fn stage_ingest(cfg: &RunConfig) -> Result<IngestReport> {
    let src = input(&cfg.paths.pings, "pings")?;
    let (store, report) = ingest(File::open(src)?, &cfg.columns, &cfg.ingest)?;
    let dst = out(cfg, PINGS)?;
    write_pings(BufWriter::new(File::create(&dst)?), store.to_pings())?;
    write_meta(&dst, "ingest", cfg, serde_json::to_value(&report)?)?;
    Ok(report)
}

pub fn stage_infer_homes(cfg: &RunConfig) -> Result<usize> {
    let store = load_store(cfg)?;
    let homes = infer_homes(&store, &cfg.home);
    let dst = out(cfg, HOMES)?;
    write_homes(BufWriter::new(File::create(&dst)?), &homes)?;
    write_meta(
        &dst,
        "infer-homes",
        cfg,
        serde_json::json!({"persons_in": store.person_count(), "homes": homes.len()}),
    )?;
    Ok(homes.len())
}

pub fn stage_link_es(cfg: &RunConfig) -> Result<crate::home::LinkReport> {
    let homes = read_homes(File::open(upstream(cfg, HOMES, "infer-homes")?)?)?;
    let props = read_properties(File::open(input(&cfg.paths.properties, "properties")?)?)?;
    let layer = load_layer(cfg)?;
    let (persons, report) = build_persons(homes, &props, &layer, &cfg.link)?;
    let dst = out(cfg, PERSONS)?;
    write_persons(BufWriter::new(File::create(&dst)?), &persons)?;
    write_meta(&dst, "link-es", cfg, serde_json::to_value(&report)?)?;
    Ok(report)
}

pub fn stage_join(cfg: &RunConfig) -> Result<NetworkMeta> {
    warn_deviations(cfg);
    let store = load_store(cfg)?;
    let (net, meta) = build_network(&store, &cfg.join, cfg.utc_offset_s())?;
    let dst = out(cfg, NETWORK)?;
    write_network(BufWriter::new(File::create(&dst)?), &net)?;
    write_meta(&dst, "join", cfg, serde_json::to_value(&meta)?)?;
    Ok(meta)
}

pub fn stage_annotate(cfg: &RunConfig) -> Result<usize> {
    let persons = load_persons(cfg)?;
    let ids: Vec<String> = persons.iter().map(|p| p.person_id.clone()).collect();
    let net = read_network(File::open(upstream(cfg, NETWORK, "join")?)?, &ids)?;
    let layer = load_layer(cfg)?;
    let ann = annotate_all(&net, &persons, &layer, cfg.utc_offset_s());
    let dst = out(cfg, ANNOTATED)?;
    write_annotated(BufWriter::new(File::create(&dst)?), &net, &ann)?;
    write_meta(&dst, "annotate", cfg, serde_json::json!({"interactions": net.items.len()}))?;
    Ok(net.items.len())
}

/// Per-region estimate written by `segregate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEstimate {
    pub region_id: String,
    pub rho: f64,
    pub a: f64,
    pub b: f64,
    pub var_u: f64,
    pub var_e: f64,
    pub n_egos: usize,
    pub n_obs: usize,
    pub converged: bool,
    pub filter: String,
    pub es_definition: EsDefinition,
    pub weighting: Weighting,
    pub naive_rho: Option<f64>,
    pub diagnostic: Option<String>,
}

impl RegionEstimate {
    fn new(region: &str, e: &SegregationEstimate, filter: &Filter, cfg: &RunConfig, naive: Option<f64>) -> Self {
        Self {
            region_id: region.into(),
            rho: e.rho,
            a: e.a,
            b: e.b,
            var_u: e.var_u,
            var_e: e.var_e,
            n_egos: e.n_egos,
            n_obs: e.n_obs,
            converged: e.converged,
            filter: filter.label(),
            es_definition: cfg.es_definition,
            weighting: cfg.join.weighting,
            naive_rho: naive,
            diagnostic: e.diagnostic.clone(),
        }
    }
}

/// Headline statistics of one region, the unit merged by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub config_hash: String,
    pub estimate: RegionEstimate,
    pub summary: SweepRow,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub connectedness: Vec<Connectedness>,
}

fn region_filter<'a>(cfg: &'a RunConfig, persons: &'a [Person]) -> impl Fn(&str) -> bool + 'a {
    let members: std::collections::HashSet<&str> = persons
        .iter()
        .filter(|p| cfg.region == "all" || p.region_id == cfg.region)
        .map(|p| p.person_id.as_str())
        .collect();
    move |id: &str| members.contains(id)
}

fn residents<'a>(cfg: &RunConfig, persons: &'a [Person]) -> Vec<&'a Person> {
    persons.iter().filter(|p| cfg.region == "all" || p.region_id == cfg.region).collect()
}

/// Mixed-model estimate for the configured region on the interactions
/// passing `filter`.
pub fn estimate(
    cfg: &RunConfig,
    net: &Network,
    ann: &[Annotation],
    persons: &[Person],
    filter: &Filter,
) -> Result<RegionEstimate> {
    let es = standardized_es(persons, cfg.es_definition);
    let egos = region_filter(cfg, persons);
    let e = is_decomposed(net, ann, &es, &egos, filter, cfg.join.weighting)?;
    let groups = ego_groups(net, |n| filter.matches(&ann[n]), &es, &egos, cfg.join.weighting);
    Ok(RegionEstimate::new(&cfg.region, &e, filter, cfg, naive_corr(&groups).ok()))
}

fn venue_anchors(layer: &GeoLayer, category: &str) -> Vec<(String, f64, f64)> {
    layer
        .pois()
        .filter(|f| f.category.as_string() == category)
        .map(|f| {
            let (lat, lon) = f.anchor();
            (f.id.clone(), lat, lon)
        })
        .collect()
}

fn hubs_of(layer: &GeoLayer) -> Vec<Hub> {
    layer
        .of_category(&Category::Hub)
        .map(|f| {
            let (lat, lon) = f.anchor();
            Hub { id: f.id.clone(), lat, lon }
        })
        .collect()
}

/// Overall, in-venue and venue-differentiation statistics for a region.
pub fn region_report(
    cfg: &RunConfig,
    net: &Network,
    ann: &[Annotation],
    persons: &[Person],
    layer: &GeoLayer,
) -> Result<RegionReport> {
    let est = estimate(cfg, net, ann, persons, &Filter::All)?;
    let venue_is = estimate(cfg, net, ann, persons, &Filter::InPoi).ok().map(|e| e.rho);
    let res = residents(cfg, persons);
    let mut covs = Vec::new();
    for cat in layer.poi_categories() {
        let name = format!("poi:{cat}");
        let vs = venue_anchors(layer, &name);
        if let Some(c) = venue_stats(net, ann, persons, &res, &name, &vs, cfg.venues.access_radius_m).cov {
            covs.push(c);
        }
    }
    let hubs = hubs_of(layer);
    let homes: Vec<(f64, f64, f64)> = res.iter().map(|p| (p.home_lat, p.home_lon, p.es_raw)).collect();
    let bi = if hubs.is_empty() { None } else { bridging_index(&homes, &hubs, cfg.bridge.measure).ok().map(|b| b.bi) };
    let region_of: HashMap<String, String> =
        persons.iter().map(|p| (p.person_id.clone(), p.region_id.clone())).collect();
    let n_regions = persons.iter().map(|p| p.region_id.as_str()).collect::<std::collections::BTreeSet<_>>().len();
    let summary = SweepRow {
        label: cfg.region.clone(),
        population: res.len(),
        venue_count: layer.pois().count(),
        venue_cov: (!covs.is_empty()).then(|| stats::mean(&covs)),
        venue_is,
        overall_is: Some(est.rho),
        naive_is: est.naive_rho,
        bi,
        interactions: net.items.len() as u64,
    };
    Ok(RegionReport {
        config_hash: cfg.hash(),
        estimate: est,
        summary,
        connectedness: if n_regions > 1 { connectedness(net, &region_of) } else { Vec::new() },
    })
}

pub fn stage_segregate(cfg: &RunConfig) -> Result<RegionReport> {
    warn_deviations(cfg);
    let persons = load_persons(cfg)?;
    let (net, ann) = load_annotated(cfg, &persons)?;
    let layer = load_layer(cfg)?;
    let rep = region_report(cfg, &net, &ann, &persons, &layer)?;
    write_json(&out(cfg, REGION)?, &rep)?;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsiReport {
    pub config_hash: String,
    pub region_id: String,
    pub nsi: f64,
    /// Mixed-model estimate on the complete within-tract network.
    pub within_tract_rho: Option<f64>,
    pub n_persons: usize,
}

pub fn nsi_report(cfg: &RunConfig, persons: &[Person]) -> Result<NsiReport> {
    let res: Vec<Person> = residents(cfg, persons).into_iter().cloned().collect();
    let es = standardized_es(&res, cfg.es_definition);
    let value = nsi(&res, &es)?;
    let mixed = fit_mixed(&within_tract_groups(&res, &es)).ok().map(|e| e.rho);
    Ok(NsiReport {
        config_hash: cfg.hash(),
        region_id: cfg.region.clone(),
        nsi: value,
        within_tract_rho: mixed,
        n_persons: res.len(),
    })
}

pub fn stage_nsi(cfg: &RunConfig) -> Result<NsiReport> {
    let persons = load_persons(cfg)?;
    let rep = nsi_report(cfg, &persons)?;
    write_json(&out(cfg, NSI)?, &rep)?;
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecomposeBy {
    Hour,
    PoiCategory,
    TractContext,
    Road,
}

impl std::str::FromStr for DecomposeBy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hour" => Self::Hour,
            "poi-category" => Self::PoiCategory,
            "tract-context" => Self::TractContext,
            "road" => Self::Road,
            _ => return Err(Error::Config(format!("unknown decomposition `{s}`"))),
        })
    }
}

impl DecomposeBy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hour => "hour",
            Self::PoiCategory => "poi-category",
            Self::TractContext => "tract-context",
            Self::Road => "road",
        }
    }
}

/// One decomposition cell. Venue columns are filled for POI categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposeRow {
    pub filter: String,
    pub interactions: usize,
    pub rho: Option<f64>,
    pub n_egos: Option<usize>,
    pub converged: Option<bool>,
    pub venue_cov: Option<f64>,
    pub accessibility: Option<f64>,
    pub localization_m: Option<f64>,
    pub n_venues: Option<usize>,
    pub error: Option<String>,
}

pub fn decompose(
    cfg: &RunConfig,
    net: &Network,
    ann: &[Annotation],
    persons: &[Person],
    layer: &GeoLayer,
    by: DecomposeBy,
) -> Vec<DecomposeRow> {
    let filters: Vec<Filter> = match by {
        DecomposeBy::Hour => (0..8).map(Filter::HourBucket).collect(),
        DecomposeBy::PoiCategory => {
            layer.poi_categories().iter().map(|c| Filter::PoiCategory(format!("poi:{c}"))).collect()
        }
        DecomposeBy::TractContext => {
            std::iter::once(Filter::All).chain(TractContext::ALL.iter().map(|&c| Filter::TractContext(c))).collect()
        }
        DecomposeBy::Road => vec![Filter::All, Filter::ExcludeRoad],
    };
    let res = residents(cfg, persons);
    filters
        .iter()
        .map(|f| {
            let interactions = ann.iter().filter(|a| f.matches(a)).count();
            let est = estimate(cfg, net, ann, persons, f);
            let mut row = DecomposeRow {
                filter: f.label(),
                interactions,
                rho: None,
                n_egos: None,
                converged: None,
                venue_cov: None,
                accessibility: None,
                localization_m: None,
                n_venues: None,
                error: None,
            };
            match est {
                Ok(e) => {
                    row.rho = Some(e.rho);
                    row.n_egos = Some(e.n_egos);
                    row.converged = Some(e.converged);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            if let Filter::PoiCategory(c) = f {
                let vs = venue_anchors(layer, c);
                let v = venue_stats(net, ann, persons, &res, c, &vs, cfg.venues.access_radius_m);
                row.venue_cov = v.cov;
                row.accessibility = v.accessibility;
                row.localization_m = v.localization_m;
                row.n_venues = Some(v.n_venues);
            }
            row
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    if rows.is_empty() && !header.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn stage_decompose(cfg: &RunConfig, by: DecomposeBy) -> Result<Vec<DecomposeRow>> {
    warn_deviations(cfg);
    let persons = load_persons(cfg)?;
    let (net, ann) = load_annotated(cfg, &persons)?;
    let layer = load_layer(cfg)?;
    let rows = decompose(cfg, &net, &ann, &persons, &layer, by);
    let dst = out(cfg, &format!("decompose_{}.csv", by.as_str()))?;
    write_csv(&dst, &rows, &[])?;
    write_meta(&dst, "decompose", cfg, serde_json::Value::Null)?;
    Ok(rows)
}

/// One row of the robustness matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub variant: String,
    pub rho: Option<f64>,
    pub n_egos: Option<usize>,
    pub interactions: Option<usize>,
    pub error: Option<String>,
}

/// A robustness variant: join, ES, weighting and interaction filter.
#[derive(Debug, Clone)]
pub struct Variant {
    pub name: &'static str,
    pub join: JoinConfig,
    pub es: EsDefinition,
    pub filter: Filter,
}

pub fn robustness_variants(base: &JoinConfig) -> Vec<Variant> {
    let j =
        |dist_m: f64, time_s: i64, tie: TieStrength| JoinConfig { dist_m, time_s, tie_strength: tie, ..base.clone() };
    let no_home = Filter::ExcludeSameHome;
    let leisure_out = Filter::And(vec![Filter::InPoi, Filter::TractContext(TractContext::BothOut)]);
    let v = |name, join, es, filter| Variant { name, join, es, filter };
    vec![
        v("primary", base.clone(), EsDefinition::Rent, Filter::All),
        v(
            "count_repeats",
            JoinConfig { weighting: Weighting::CountRepeats, ..base.clone() },
            EsDefinition::Rent,
            Filter::All,
        ),
        v("es_percentile", base.clone(), EsDefinition::Percentile, Filter::All),
        v("es_percentile_within_region", base.clone(), EsDefinition::PercentileWithinRegion, Filter::All),
        v("es_tract_income", base.clone(), EsDefinition::TractIncome, Filter::All),
        v("exclude_roads", base.clone(), EsDefinition::Rent, Filter::ExcludeRoad),
        v("exclude_same_home", base.clone(), EsDefinition::Rent, no_home.clone()),
        v("neither_in_home_tract", base.clone(), EsDefinition::Rent, Filter::TractContext(TractContext::BothOut)),
        v("leisure_in_poi", base.clone(), EsDefinition::Rent, leisure_out),
        v("dist_25", j(25.0, base.time_s, base.tie_strength), EsDefinition::Rent, no_home.clone()),
        v("dist_10", j(10.0, base.time_s, base.tie_strength), EsDefinition::Rent, no_home.clone()),
        v("time_120", j(base.dist_m, 120, base.tie_strength), EsDefinition::Rent, no_home.clone()),
        v("time_60", j(base.dist_m, 60, base.tie_strength), EsDefinition::Rent, no_home.clone()),
        v(
            "consecutive_2",
            j(base.dist_m, base.time_s, TieStrength::Consecutive(2)),
            EsDefinition::Rent,
            no_home.clone(),
        ),
        v(
            "consecutive_3",
            j(base.dist_m, base.time_s, TieStrength::Consecutive(3)),
            EsDefinition::Rent,
            no_home.clone(),
        ),
        v(
            "unique_days_2",
            j(base.dist_m, base.time_s, TieStrength::UniqueDays(2)),
            EsDefinition::Rent,
            no_home.clone(),
        ),
        v(
            "unique_days_3",
            j(base.dist_m, base.time_s, TieStrength::UniqueDays(3)),
            EsDefinition::Rent,
            no_home.clone(),
        ),
        v("d25_t120_consecutive_2", j(25.0, 120, TieStrength::Consecutive(2)), EsDefinition::Rent, no_home.clone()),
        v("d25_t120_unique_days_2", j(25.0, 120, TieStrength::UniqueDays(2)), EsDefinition::Rent, no_home.clone()),
        v("d10_t60_consecutive_3", j(10.0, 60, TieStrength::Consecutive(3)), EsDefinition::Rent, no_home.clone()),
        v("d10_t60_unique_days_3", j(10.0, 60, TieStrength::UniqueDays(3)), EsDefinition::Rent, no_home),
    ]
}

/// Recomputes the region estimate under every robustness variant. Joins
/// are shared between variants with identical join settings.
pub fn robustness_matrix(
    cfg: &RunConfig,
    store: &PingStore,
    persons: &[Person],
    layer: &GeoLayer,
) -> Result<Vec<RobustnessRow>> {
    let mut joined: BTreeMap<String, (Network, Vec<Annotation>)> = BTreeMap::new();
    let mut rows = Vec::new();
    for v in robustness_variants(&cfg.join) {
        let key = serde_json::to_string(&JoinConfig { weighting: Weighting::DedupPairs, ..v.join.clone() })?;
        if !joined.contains_key(&key) {
            let (net, _) = build_network(store, &v.join, cfg.utc_offset_s())?;
            let ann = annotate_all(&net, persons, layer, cfg.utc_offset_s());
            joined.insert(key.clone(), (net, ann));
        }
        let (net, ann) = &joined[&key];
        let mut c = cfg.clone();
        c.join = v.join.clone();
        c.es_definition = v.es;
        let row = match estimate(&c, net, ann, persons, &v.filter) {
            Ok(e) => RobustnessRow {
                variant: v.name.into(),
                rho: Some(e.rho),
                n_egos: Some(e.n_egos),
                interactions: Some(ann.iter().filter(|a| v.filter.matches(a)).count()),
                error: None,
            },
            Err(e) => RobustnessRow {
                variant: v.name.into(),
                rho: None,
                n_egos: None,
                interactions: None,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

pub fn stage_robustness(cfg: &RunConfig) -> Result<Vec<RobustnessRow>> {
    let store = load_store(cfg)?;
    let persons = load_persons(cfg)?;
    let layer = load_layer(cfg)?;
    let rows = robustness_matrix(cfg, &store, &persons, &layer)?;
    let dst = out(cfg, ROBUSTNESS)?;
    write_csv(&dst, &rows, &[])?;
    write_meta(&dst, "decompose", cfg, serde_json::Value::Null)?;
    Ok(rows)
}

/// Correlation of each variant with the primary measure across regions,
/// plus median and mean, from per-region robustness matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub variant: String,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub median: Option<f64>,
    pub mean: Option<f64>,
    pub n_regions: usize,
}

pub fn summarize_robustness(regions: &[Vec<RobustnessRow>]) -> Vec<RobustnessSummary> {
    let Some(first) = regions.first() else { return Vec::new() };
    first
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let (mut prim, mut var) = (Vec::new(), Vec::new());
            for r in regions {
                if let (Some(p), Some(v)) = (r[0].rho, r.get(k).and_then(|x| x.rho)) {
                    prim.push(p);
                    var.push(v);
                }
            }
            let ok = prim.len() >= 3;
            RobustnessSummary {
                variant: row.variant.clone(),
                pearson: if ok { stats::pearson(&prim, &var) } else { None },
                spearman: if ok { stats::spearman(&prim, &var).map(|c| c.r) } else { None },
                median: stats::median(&var),
                mean: (!var.is_empty()).then(|| stats::mean(&var)),
                n_regions: var.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeReport {
    pub config_hash: String,
    pub region_id: String,
    pub bi: f64,
    pub overall_diversity: f64,
    pub n_hubs: usize,
    pub ablation_trials: usize,
    pub ablation_mean: Option<f64>,
    pub ablation_p95: Option<f64>,
    /// Share of random-hub trials with BI strictly below the actual BI.
    pub ablation_rank: Option<f64>,
    pub clusters: Vec<crate::bridging::Cluster>,
}

fn region_polygon(cfg: &RunConfig, layer: &GeoLayer) -> Result<Polygon> {
    if cfg.region != "all" {
        return layer
            .get(&cfg.region)
            .and_then(|f| f.polygon().cloned())
            .ok_or_else(|| Error::Layer(format!("region polygon `{}` not found", cfg.region)));
    }
    let regions: Vec<&Polygon> = layer.of_category(&Category::Region).filter_map(|f| f.polygon()).collect();
    if regions.len() == 1 {
        return Ok(regions[0].clone());
    }
    let tracts: Vec<&Polygon> = layer.of_category(&Category::Tract).filter_map(|f| f.polygon()).collect();
    let mut b = tracts.first().map(|p| p.bbox()).ok_or_else(|| Error::Layer("layer has no tracts".into()))?;
    for p in &tracts[1..] {
        let o = p.bbox();
        b.min_lon = b.min_lon.min(o.min_lon);
        b.min_lat = b.min_lat.min(o.min_lat);
        b.max_lon = b.max_lon.max(o.max_lon);
        b.max_lat = b.max_lat.max(o.max_lat);
    }
    Ok(Polygon::rect(b.min_lon, b.min_lat, b.max_lon, b.max_lat))
}

pub fn bridge_report(cfg: &RunConfig, persons: &[Person], layer: &GeoLayer, hubs: &[Hub]) -> Result<BridgeReport> {
    let homes: Vec<(f64, f64, f64)> =
        residents(cfg, persons).iter().map(|p| (p.home_lat, p.home_lon, p.es_raw)).collect();
    let res = bridging_index(&homes, hubs, cfg.bridge.measure)?;
    let ablation = if cfg.bridge.ablation_trials > 0 {
        let poly = region_polygon(cfg, layer)?;
        let seed = crate::seed::derive_seed(cfg.seed, &["bridge", &cfg.region]);
        Some(ablate_random_hubs(&homes, hubs.len(), &poly, cfg.bridge.ablation_trials, seed, cfg.bridge.measure)?)
    } else {
        None
    };
    Ok(BridgeReport {
        config_hash: cfg.hash(),
        region_id: cfg.region.clone(),
        bi: res.bi,
        overall_diversity: res.overall_diversity,
        n_hubs: hubs.len(),
        ablation_trials: cfg.bridge.ablation_trials,
        ablation_mean: ablation.as_ref().map(|a| a.mean),
        ablation_p95: ablation.as_ref().map(|a| a.quantile(0.95)),
        ablation_rank: ablation
            .as_ref()
            .map(|a| a.trials.iter().filter(|&&v| v < res.bi).count() as f64 / a.trials.len() as f64),
        clusters: res.clusters,
    })
}

pub fn stage_bridge(cfg: &RunConfig) -> Result<BridgeReport> {
    let persons = load_persons(cfg)?;
    let layer = load_layer(cfg)?;
    let hubs = hubs_of(&layer);
    let rep = bridge_report(cfg, &persons, &layer, &hubs)?;
    write_json(&out(cfg, BRIDGE)?, &rep)?;
    Ok(rep)
}

/// Provenance of a null-model run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullProvenance {
    pub config_hash: String,
    pub model: String,
    pub seed: u64,
    pub parameters: serde_json::Value,
    pub interactions: usize,
    pub estimate: Option<RegionEstimate>,
    pub observed: Option<RegionEstimate>,
    pub rewire: Option<RewireReport>,
}

pub fn stage_null_homophily(cfg: &RunConfig) -> Result<NullProvenance> {
    let persons = load_persons(cfg)?;
    let res = residents(cfg, &persons);
    let es_raw: Vec<f64> =
        res.iter().map(|p| p.es_value(cfg.es_definition)).collect::<Option<_>>().ok_or_else(|| {
            Error::InvalidInput(format!("ES definition {:?} missing for some persons", cfg.es_definition))
        })?;
    let mut hc = cfg.null.clone();
    hc.seed = crate::seed::derive_seed(cfg.seed, &["nullmodel", "homophily", &cfg.region]);
    let pairs = sample_homophily_network(&es_raw, &hc)?;
    let est = fit_mixed(&groups_from_pairs(&pairs, &es_raw))?;
    let mut ids: Vec<String> = res.iter().map(|p| p.person_id.clone()).collect();
    ids.sort();
    let pos: HashMap<&str, u32> = ids.iter().enumerate().map(|(k, id)| (id.as_str(), k as u32)).collect();
    let remap: Vec<u32> = res.iter().map(|p| pos[p.person_id.as_str()]).collect();
    let mut items: Vec<crate::crossings::Interaction> = pairs
        .iter()
        .map(|&(a, b)| {
            let (i, j) = (remap[a as usize].min(remap[b as usize]), remap[a as usize].max(remap[b as usize]));
            crate::crossings::Interaction { i, j, t: 0, lat: 0.0, lon: 0.0, k: 0 }
        })
        .collect();
    items.sort_by(crate::crossings::Interaction::canonical_cmp);
    crate::crossings::assign_ordinals(&mut items);
    let net = Network { ids, items };
    let dst = out(cfg, "null_homophily.csv")?;
    write_network(BufWriter::new(File::create(&dst)?), &net)?;
    let prov = NullProvenance {
        config_hash: cfg.hash(),
        model: "homophily".into(),
        seed: hc.seed,
        parameters: serde_json::to_value(&hc)?,
        interactions: net.items.len(),
        estimate: Some(RegionEstimate::new(&cfg.region, &est, &Filter::All, cfg, None)),
        observed: None,
        rewire: None,
    };
    write_json(&out(cfg, "null_homophily.json")?, &prov)?;
    Ok(prov)
}

pub fn stage_null_config(cfg: &RunConfig) -> Result<NullProvenance> {
    let persons = load_persons(cfg)?;
    let (net, ann) = load_annotated(cfg, &persons)?;
    let seed = crate::seed::derive_seed(cfg.seed, &["nullmodel", "config", &cfg.region]);
    let (rn, ra, report) = configuration_by_category(&net, &ann, seed);
    let observed = estimate(cfg, &net, &ann, &persons, &Filter::All).ok();
    let est = estimate(cfg, &rn, &ra, &persons, &Filter::All).ok();
    let dst = out(cfg, "null_config.csv")?;
    write_annotated(BufWriter::new(File::create(&dst)?), &rn, &ra)?;
    let prov = NullProvenance {
        config_hash: cfg.hash(),
        model: "config-model".into(),
        seed,
        parameters: serde_json::Value::Null,
        interactions: rn.items.len(),
        estimate: est,
        observed,
        rewire: Some(report),
    };
    write_json(&out(cfg, "null_config.json")?, &prov)?;
    Ok(prov)
}

/// Writes a generated city as pipeline inputs: `pings.csv`,
/// `properties.csv`, `layers.jsonl` and `truth.json` under `dir`.
pub fn write_city(city: &City, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_pings(BufWriter::new(File::create(dir.join("pings.csv"))?), city.pings.iter().cloned())?;
    crate::home::write_properties(BufWriter::new(File::create(dir.join("properties.csv"))?), &city.properties)?;
    GeoLayer::write_records(BufWriter::new(File::create(dir.join("layers.jsonl"))?), &city.layer)?;
    write_json(&dir.join("truth.json"), &city.truth)?;
    Ok(())
}

/// Sweep-table header, shared by `sweep` and `report`.
pub const SWEEP_HEADER: &[&str] =
    &["label", "population", "venue_count", "venue_cov", "venue_is", "overall_is", "naive_is", "bi", "interactions"];

/// Merges region reports into sweep-table rows. Mixed config hashes are
/// refused unless `force`.
pub fn merge_reports(reports: &[RegionReport], force: bool) -> Result<Vec<SweepRow>> {
    if let Some(first) = reports.first() {
        if let Some(bad) = reports.iter().find(|r| r.config_hash != first.config_hash) {
            let msg = format!(
                "region {} has config {} but {} has {}",
                bad.estimate.region_id, bad.config_hash, first.estimate.region_id, first.config_hash
            );
            if !force {
                return Err(Error::ConfigMismatch(msg));
            }
            log::warn!("merging despite mismatch: {msg}");
        }
    }
    Ok(reports.iter().map(|r| r.summary.clone()).collect())
}

/// Spearman correlation between paired per-region estimates.
pub fn paired_spearman(a: &[f64], b: &[f64]) -> Option<Correlation> {
    stats::spearman(a, b)
}

/// CoV of per-region values; used in summaries.
pub fn cov(values: &[f64]) -> Option<f64> {
    coefficient_of_variation(values)
}
