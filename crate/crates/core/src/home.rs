//! Home inference from nighttime stationarity, economic standing (ES)
//! linkage from a property table, and home tract assignment.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_m, LocalFrame, RadiusGrid};
use crate::ingest::{PingStore, StoredPing};
use crate::layers::GeoLayer;
use crate::stats;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct HomeConfig {
    pub night_start_hour: u32,
    pub night_end_hour: u32,
    pub home_move_thresh_m: f64,
    pub home_min_nights: usize,
    pub home_min_frac: f64,
    pub max_gap_h: f64,
    pub utc_offset_hours: f64,
}

impl Default for HomeConfig {
    fn default() -> Self {
        Self {
            night_start_hour: 18,
            night_end_hour: 9,
            home_move_thresh_m: 50.0,
            home_min_nights: 3,
            home_min_frac: 0.6,
            max_gap_h: 6.0,
            utc_offset_hours: 0.0,
        }
    }
}

pub fn offset_seconds(utc_offset_hours: f64) -> i64 {
    (utc_offset_hours * 3600.0).round() as i64
}

/// Interpolated position at a whole local hour; `t` is UTC epoch seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HourlyPos {
    pub t: i64,
    pub lat: f64,
    pub lon: f64,
}

/// Linear interpolation of the track at every whole local hour between the
/// first and last ping. Hours whose bracketing pings are more than
/// `max_gap_h` apart are left out.
pub fn interpolate_hourly(pings: &[StoredPing], utc_offset_s: i64, max_gap_h: f64) -> Vec<HourlyPos> {
    if pings.len() < 2 {
        return Vec::new();
    }
    let max_gap = (max_gap_h * 3600.0) as i64;
    let first_local = pings[0].t + utc_offset_s;
    let last_local = pings[pings.len() - 1].t + utc_offset_s;
    let mut hour_local = first_local.div_euclid(3600) * 3600;
    if hour_local < first_local {
        hour_local += 3600;
    }
    let mut out = Vec::new();
    let mut k = 0usize;
    while hour_local <= last_local {
        let tau = hour_local - utc_offset_s;
        while k + 1 < pings.len() && pings[k + 1].t <= tau {
            k += 1;
        }
        let a = &pings[k];
        if a.t == tau {
            out.push(HourlyPos { t: tau, lat: a.lat, lon: a.lon });
        } else if k + 1 < pings.len() {
            let b = &pings[k + 1];
            if b.t - a.t <= max_gap {
                let f = (tau - a.t) as f64 / (b.t - a.t) as f64;
                out.push(HourlyPos { t: tau, lat: a.lat + f * (b.lat - a.lat), lon: a.lon + f * (b.lon - a.lon) });
            }
        }
        hour_local += 3600;
    }
    out
}

fn local_hour(t: i64, utc_offset_s: i64) -> u32 {
    ((t + utc_offset_s).rem_euclid(86_400) / 3600) as u32
}

fn in_window(hour: u32, start: u32, end: u32) -> bool {
    if start <= end {
        hour >= start && hour < end
    } else {
        hour >= start || hour < end
    }
}

/// Night identifier: nights run from `night_start` on day d to
/// `night_end` on day d+1 and share the id d.
fn night_id(t: i64, utc_offset_s: i64, night_end_hour: u32) -> i64 {
    (t + utc_offset_s - night_end_hour as i64 * 3600).div_euclid(86_400)
}

/// Infers a home point `(lat, lon)` from hourly positions, or `None` when
/// the stationary nighttime evidence is too thin or too scattered.
pub fn infer_home(hourly: &[HourlyPos], cfg: &HomeConfig) -> Option<(f64, f64)> {
    let off = offset_seconds(cfg.utc_offset_hours);
    let mut stationary: Vec<(&HourlyPos, i64)> = Vec::new();
    for w in hourly.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.t - a.t != 3600 {
            continue;
        }
        if !in_window(local_hour(a.t, off), cfg.night_start_hour, cfg.night_end_hour) {
            continue;
        }
        if haversine_m(a.lat, a.lon, b.lat, b.lon) < cfg.home_move_thresh_m {
            stationary.push((a, night_id(a.t, off, cfg.night_end_hour)));
        }
    }
    let mut nights: Vec<i64> = stationary.iter().map(|s| s.1).collect();
    nights.sort_unstable();
    nights.dedup();
    if nights.len() < cfg.home_min_nights {
        return None;
    }
    let frame = LocalFrame::new(stationary[0].0.lat, stationary[0].0.lon);
    let xy: Vec<(f64, f64)> = stationary.iter().map(|(p, _)| frame.to_xy(p.lat, p.lon)).collect();
    let medoid = (0..xy.len())
        .map(|i| {
            let cost: f64 = xy.iter().map(|q| ((xy[i].0 - q.0).powi(2) + (xy[i].1 - q.1).powi(2)).sqrt()).sum();
            (cost, i)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, i)| stationary[i].0)?;
    let inliers: Vec<&HourlyPos> = stationary
        .iter()
        .map(|s| s.0)
        .filter(|p| haversine_m(p.lat, p.lon, medoid.lat, medoid.lon) <= cfg.home_move_thresh_m)
        .collect();
    if (inliers.len() as f64) < cfg.home_min_frac * stationary.len() as f64 {
        return None;
    }
    let lats: Vec<f64> = inliers.iter().map(|p| p.lat).collect();
    let lons: Vec<f64> = inliers.iter().map(|p| p.lon).collect();
    Some((stats::median(&lats)?, stats::median(&lons)?))
}

/// Home per person (id order); persons without a resolvable home are omitted.
pub fn infer_homes(store: &PingStore, cfg: &HomeConfig) -> Vec<(String, f64, f64)> {
    let off = offset_seconds(cfg.utc_offset_hours);
    (0..store.person_count())
        .into_par_iter()
        .filter_map(|i| {
            let hourly = interpolate_hourly(store.pings_of(i), off, cfg.max_gap_h);
            infer_home(&hourly, cfg).map(|(lat, lon)| (store.id(i).to_string(), lat, lon))
        })
        .collect()
}

/// Drops persons whose inferred home coordinates exactly equal another's.
pub fn drop_identical_homes(homes: Vec<(String, f64, f64)>) -> Vec<(String, f64, f64)> {
    let mut counts: HashMap<(u64, u64), usize> = HashMap::new();
    for h in &homes {
        *counts.entry((h.1.to_bits(), h.2.to_bits())).or_default() += 1;
    }
    homes.into_iter().filter(|h| counts[&(h.1.to_bits(), h.2.to_bits())] == 1).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Property {
    pub lat: f64,
    pub lon: f64,
    pub rent: f64,
    #[serde(default = "default_kind")]
    pub kind: String,
}

fn default_kind() -> String {
    "residential".into()
}

pub fn read_properties<R: Read>(reader: R) -> Result<Vec<Property>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<Property>() {
        let p = rec?;
        if !(p.rent > 0.0) {
            return Err(Error::InvalidInput(format!("property rent must be positive, got {}", p.rent)));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_properties<W: Write>(writer: W, props: &[Property]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in props {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Nearest-property lookup within a fixed radius.
pub struct PropertyIndex<'a> {
    props: &'a [Property],
    grid: RadiusGrid,
    max_dist_m: f64,
}

impl<'a> PropertyIndex<'a> {
    pub fn new(props: &'a [Property], max_dist_m: f64) -> Result<Self> {
        if props.is_empty() {
            return Err(Error::Config("property table is empty".into()));
        }
        let pts: Vec<(f64, f64)> = props.iter().map(|p| (p.lat, p.lon)).collect();
        Ok(Self { props, grid: RadiusGrid::new(&pts, max_dist_m, 89.9), max_dist_m })
    }

    /// Index and distance of the nearest property within the radius.
    pub fn nearest(&self, lat: f64, lon: f64) -> Option<(usize, f64)> {
        let mut buf = Vec::new();
        self.grid.candidates(lat, lon, &mut buf);
        buf.iter()
            .map(|&i| {
                let p = &self.props[i as usize];
                (i as usize, haversine_m(lat, lon, p.lat, p.lon))
            })
            .filter(|&(_, d)| d <= self.max_dist_m)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
    }
}

/// Rent of the nearest property within range, winsorized at `winsor_max`.
pub fn link_es(index: &PropertyIndex<'_>, lat: f64, lon: f64, winsor_max: f64) -> Option<(f64, usize)> {
    index.nearest(lat, lon).map(|(i, _)| (index.props[i].rent.min(winsor_max), i))
}

/// Removes persons linked to a single-family property shared with more than
/// `max_others` other persons.
pub fn drop_crowded_single_family(
    linked: Vec<(String, usize)>,
    props: &[Property],
    max_others: usize,
) -> Vec<(String, usize)> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for (_, p) in &linked {
        *counts.entry(*p).or_default() += 1;
    }
    linked.into_iter().filter(|(_, p)| props[*p].kind != "single_family" || counts[p] <= max_others + 1).collect()
}

/// A person in the analysis population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub person_id: String,
    pub home_lat: f64,
    pub home_lon: f64,
    pub home_tract_id: String,
    pub region_id: String,
    /// Monthly rent in dollars, winsorized.
    pub es_raw: f64,
    /// es_raw standardized over the analysis population.
    pub es: f64,
    pub es_percentile: f64,
    pub es_percentile_within_region: f64,
    pub es_tract_demeaned: f64,
    pub tract_income: Option<f64>,
}

impl Person {
    pub fn new(person_id: &str, home_lat: f64, home_lon: f64, tract: &str, region: &str, es_raw: f64) -> Self {
        Self {
            person_id: person_id.into(),
            home_lat,
            home_lon,
            home_tract_id: tract.into(),
            region_id: region.into(),
            es_raw,
            es: 0.0,
            es_percentile: 0.0,
            es_percentile_within_region: 0.0,
            es_tract_demeaned: 0.0,
            tract_income: None,
        }
    }

    pub fn es_value(&self, def: EsDefinition) -> Option<f64> {
        match def {
            EsDefinition::Rent => Some(self.es_raw),
            EsDefinition::Percentile => Some(self.es_percentile),
            EsDefinition::PercentileWithinRegion => Some(self.es_percentile_within_region),
            EsDefinition::TractDemeaned => Some(self.es_tract_demeaned),
            EsDefinition::TractIncome => self.tract_income,
        }
    }
}

/// Which ES quantity feeds the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EsDefinition {
    #[default]
    Rent,
    Percentile,
    PercentileWithinRegion,
    TractDemeaned,
    TractIncome,
}

impl std::str::FromStr for EsDefinition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rent" => Self::Rent,
            "percentile" => Self::Percentile,
            "percentile_within_region" => Self::PercentileWithinRegion,
            "tract_demeaned" => Self::TractDemeaned,
            "tract_income" => Self::TractIncome,
            _ => return Err(Error::Config(format!("unknown ES definition `{s}`"))),
        })
    }
}

/// Fills the standardized and alternative ES fields.
pub fn compute_es_variants(persons: &mut [Person]) {
    if persons.is_empty() {
        return;
    }
    let raw: Vec<f64> = persons.iter().map(|p| p.es_raw).collect();
    let mu = stats::mean(&raw);
    let sd = stats::pop_std(&raw);
    let pct = stats::percentile_ranks(&raw);
    for (p, q) in persons.iter_mut().zip(pct) {
        p.es = if sd > 0.0 { (p.es_raw - mu) / sd } else { 0.0 };
        p.es_percentile = q;
    }
    let mut by_region: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut by_tract: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, p) in persons.iter().enumerate() {
        by_region.entry(p.region_id.clone()).or_default().push(i);
        by_tract.entry(p.home_tract_id.clone()).or_default().push(i);
    }
    for members in by_region.values() {
        let vals: Vec<f64> = members.iter().map(|&i| persons[i].es_raw).collect();
        for (&i, q) in members.iter().zip(stats::percentile_ranks(&vals)) {
            persons[i].es_percentile_within_region = q;
        }
    }
    for members in by_tract.values() {
        let vals: Vec<f64> = members.iter().map(|&i| persons[i].es_raw).collect();
        let m = stats::mean(&vals);
        for &i in members {
            persons[i].es_tract_demeaned = if members.len() == 1 { 0.0 } else { persons[i].es_raw - m };
        }
    }
}

/// Tract containing the home point (shared edges go to the smallest id).
pub fn assign_tract<'a>(layer: &'a GeoLayer, lat: f64, lon: f64) -> Option<&'a str> {
    layer.tract_at(lat, lon).map(|f| f.id.as_str())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LinkConfig {
    pub es_link_max_dist_m: f64,
    pub es_winsor_max: f64,
    /// Single-family residences shared by more than this many other persons
    /// drop all their residents; `None` disables the filter.
    pub max_single_family_others: Option<usize>,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self { es_link_max_dist_m: 100.0, es_winsor_max: 20_000.0, max_single_family_others: Some(10) }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct LinkReport {
    pub homes_in: u64,
    pub dropped_identical_home: u64,
    pub dropped_no_property: u64,
    pub dropped_crowded_residence: u64,
    pub dropped_no_tract: u64,
    pub persons_out: u64,
}

/// Joins homes to properties and tracts and computes ES variants.
pub fn build_persons(
    homes: Vec<(String, f64, f64)>,
    props: &[Property],
    layer: &GeoLayer,
    cfg: &LinkConfig,
) -> Result<(Vec<Person>, LinkReport)> {
    let mut report = LinkReport { homes_in: homes.len() as u64, ..Default::default() };
    let index = PropertyIndex::new(props, cfg.es_link_max_dist_m)?;
    let n0 = homes.len();
    let homes = drop_identical_homes(homes);
    report.dropped_identical_home = (n0 - homes.len()) as u64;
    let home_of: HashMap<String, (f64, f64)> = homes.iter().map(|h| (h.0.clone(), (h.1, h.2))).collect();
    let linked: Vec<(String, usize, f64)> = homes
        .par_iter()
        .filter_map(|(id, lat, lon)| link_es(&index, *lat, *lon, cfg.es_winsor_max).map(|(es, p)| (id.clone(), p, es)))
        .collect();
    report.dropped_no_property = (homes.len() - linked.len()) as u64;
    let es_of: HashMap<String, f64> = linked.iter().map(|l| (l.0.clone(), l.2)).collect();
    let mut kept: Vec<(String, usize)> = linked.into_iter().map(|l| (l.0, l.1)).collect();
    if let Some(max_others) = cfg.max_single_family_others {
        let n = kept.len();
        kept = drop_crowded_single_family(kept, props, max_others);
        report.dropped_crowded_residence = (n - kept.len()) as u64;
    }
    let has_regions = layer.features().iter().any(|f| f.category == crate::layers::Category::Region);
    let mut persons = Vec::with_capacity(kept.len());
    for (id, _) in kept {
        let (lat, lon) = home_of[&id];
        let Some(tract) = layer.tract_at(lat, lon) else {
            report.dropped_no_tract += 1;
            continue;
        };
        let region = if has_regions {
            match layer.region_at(lat, lon) {
                Some(r) => r.id.clone(),
                None => {
                    report.dropped_no_tract += 1;
                    continue;
                }
            }
        } else {
            "all".to_string()
        };
        let mut p = Person::new(&id, lat, lon, &tract.id, &region, es_of[&id]);
        p.tract_income = tract.attr_f64("tract_income");
        persons.push(p);
    }
    persons.sort_by(|a, b| a.person_id.cmp(&b.person_id));
    compute_es_variants(&mut persons);
    report.persons_out = persons.len() as u64;
    Ok((persons, report))
}

pub fn write_persons<W: Write>(writer: W, persons: &[Person]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in persons {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_persons<R: Read>(reader: R) -> Result<Vec<Person>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_homes<W: Write>(writer: W, homes: &[(String, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["person_id", "home_lat", "home_lon"])?;
    for (id, lat, lon) in homes {
        w.write_record([id.as_str(), &lat.to_string(), &lon.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_homes<R: Read>(reader: R) -> Result<Vec<(String, f64, f64)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocalFrame;
    use crate::geo::Polygon;
    use crate::layers::FeatureRecord;

    const DAY0: i64 = 1_488_326_400; // 2017-03-01 00:00 UTC

    fn sp(t: i64, lat: f64, lon: f64) -> StoredPing {
        StoredPing { t, lat, lon, accuracy_m: None }
    }

    #[test]
    fn midpoint_interpolation() {
        let pings = [sp(DAY0 + 17 * 3600 + 1800, 0.0, 0.0), sp(DAY0 + 18 * 3600 + 1800, 0.0, 0.001)];
        let h = interpolate_hourly(&pings, 0, 6.0);
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].t, DAY0 + 18 * 3600);
        assert!((h[0].lon - 0.0005).abs() < 1e-15);
        assert_eq!(h[0].lat, 0.0);
    }

    #[test]
    fn degenerate_and_gap_cases() {
        assert!(interpolate_hourly(&[sp(DAY0, 1.0, 1.0)], 0, 6.0).is_empty());
        let pings = [sp(DAY0 + 1800, 0.0, 0.0), sp(DAY0 + 1800 + 8 * 3600, 0.0, 0.0)];
        assert!(interpolate_hourly(&pings, 0, 6.0).is_empty());
    }

    #[test]
    fn hours_follow_local_offset() {
        let pings = [sp(DAY0 + 1000, 0.0, 0.0), sp(DAY0 + 5000, 0.0, 0.0)];
        // UTC-5:30 puts local whole hours at :30 UTC
        let h = interpolate_hourly(&pings, -5 * 3600 - 1800, 6.0);
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].t, DAY0 + 1800);
    }

    /// Hourly track: nights at `home` with `other` spots mixed in.
    fn night_track(nights: i64, at: impl Fn(i64, i64) -> (f64, f64)) -> Vec<HourlyPos> {
        let mut out = Vec::new();
        for n in 0..nights {
            for h in 18..(24 + 10) {
                let t = DAY0 + n * 86_400 + h * 3600;
                let (lat, lon) = at(n, h);
                out.push(HourlyPos { t, lat, lon });
            }
        }
        out
    }

    #[test]
    fn constant_home() {
        let hourly = night_track(5, |_, _| (37.5, -122.2));
        let home = infer_home(&hourly, &HomeConfig::default()).unwrap();
        assert_eq!(home, (37.5, -122.2));
    }

    #[test]
    fn split_nights_fail_fraction() {
        let frame = LocalFrame::new(37.5, -122.2);
        let b = frame.to_latlon(1000.0, 0.0);
        // alternate whole nights between A and B
        let hourly = night_track(6, |n, _| if n % 2 == 0 { (37.5, -122.2) } else { b });
        assert_eq!(infer_home(&hourly, &HomeConfig::default()), None);
    }

    #[test]
    fn seventy_percent_home() {
        let frame = LocalFrame::new(37.5, -122.2);
        let jitter = |k: i64| ((k * 7919) % 11 - 5) as f64;
        // nights 0..4 at A (with meter-scale jitter); night 4 split across far spots
        let hourly = night_track(6, |n, h| {
            if n < 4 {
                frame.to_latlon(jitter(h + n), jitter(h * 3 + n))
            } else {
                frame.to_latlon(3000.0 + (h % 3) as f64 * 5.0, 2000.0 * (n - 3) as f64)
            }
        });
        let cfg = HomeConfig::default();
        let home = infer_home(&hourly, &cfg).unwrap();
        // oracle: median of stationary nighttime points within 50 m of A
        let mut lats = Vec::new();
        let mut lons = Vec::new();
        for w in hourly.windows(2) {
            let lh = local_hour(w[0].t, 0);
            if w[1].t - w[0].t == 3600
                && in_window(lh, 18, 9)
                && haversine_m(w[0].lat, w[0].lon, w[1].lat, w[1].lon) < 50.0
                && haversine_m(w[0].lat, w[0].lon, 37.5, -122.2) <= 50.0
            {
                lats.push(w[0].lat);
                lons.push(w[0].lon);
            }
        }
        let expect = (stats::median(&lats).unwrap(), stats::median(&lons).unwrap());
        assert!(haversine_m(home.0, home.1, expect.0, expect.1) < 1.0);
        assert!(haversine_m(home.0, home.1, 37.5, -122.2) < 10.0);
    }

    #[test]
    fn too_few_nights() {
        let hourly = night_track(2, |_, _| (1.0, 1.0));
        assert_eq!(infer_home(&hourly, &HomeConfig::default()), None);
    }

    #[test]
    fn home_translation_invariant_in_longitude() {
        let frame = LocalFrame::new(40.0, -75.0);
        let hourly =
            night_track(5, |n, h| frame.to_latlon(((n * 13 + h * 7) % 17) as f64, ((n * 5 + h * 3) % 19) as f64));
        let cfg = HomeConfig::default();
        let a = infer_home(&hourly, &cfg).unwrap();
        let shifted: Vec<_> = hourly.iter().map(|p| HourlyPos { lon: p.lon + 0.25, ..*p }).collect();
        let b = infer_home(&shifted, &cfg).unwrap();
        assert!((b.0 - a.0).abs() < 1e-12);
        assert!((b.1 - (a.1 + 0.25)).abs() < 1e-9);
    }

    fn props() -> Vec<Property> {
        let frame = LocalFrame::new(30.0, -90.0);
        let mk = |x: f64, rent: f64| {
            let (lat, lon) = frame.to_latlon(x, 0.0);
            Property { lat, lon, rent, kind: "residential".into() }
        };
        vec![mk(40.0, 1500.0), mk(400.0, 25_000.0), mk(-150.0, 900.0)]
    }

    #[test]
    fn link_nearest_within_range() {
        let props = props();
        let idx = PropertyIndex::new(&props, 100.0).unwrap();
        let frame = LocalFrame::new(30.0, -90.0);
        let (lat, lon) = frame.to_latlon(0.0, 0.0);
        assert_eq!(link_es(&idx, lat, lon, 20_000.0).map(|x| x.0), Some(1500.0));
        let (lat, lon) = frame.to_latlon(-300.0, 0.0);
        assert_eq!(link_es(&idx, lat, lon, 20_000.0), None);
        let (lat, lon) = frame.to_latlon(410.0, 0.0);
        assert_eq!(link_es(&idx, lat, lon, 20_000.0).map(|x| x.0), Some(20_000.0));
        assert!(matches!(PropertyIndex::new(&[], 100.0), Err(Error::Config(_))));
    }

    #[test]
    fn linkage_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let frame = LocalFrame::new(45.0, 10.0);
        let props: Vec<Property> = (0..300)
            .map(|_| {
                let (lat, lon) = frame.to_latlon(rng.gen_range(0.0..2000.0), rng.gen_range(0.0..2000.0));
                Property { lat, lon, rent: rng.gen_range(500.0..4000.0), kind: "residential".into() }
            })
            .collect();
        let idx = PropertyIndex::new(&props, 100.0).unwrap();
        for _ in 0..500 {
            let (lat, lon) = frame.to_latlon(rng.gen_range(0.0..2000.0), rng.gen_range(0.0..2000.0));
            let brute = props
                .iter()
                .enumerate()
                .map(|(i, p)| (i, haversine_m(lat, lon, p.lat, p.lon)))
                .filter(|x| x.1 <= 100.0)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            assert_eq!(idx.nearest(lat, lon).map(|x| x.0), brute.map(|x| x.0));
        }
    }

    fn person(id: &str, tract: &str, region: &str, es: f64) -> Person {
        Person::new(id, 0.0, 0.0, tract, region, es)
    }

    #[test]
    fn es_variants_examples() {
        let mut ps =
            vec![person("a", "t1", "r", 1000.0), person("b", "t2", "r", 2000.0), person("c", "t1", "r", 3000.0)];
        compute_es_variants(&mut ps);
        assert!(ps[1].es.abs() < 1e-15);
        assert_eq!(ps[2].es_percentile, 1.0);
        assert_eq!(ps[0].es_tract_demeaned, -1000.0);
        assert_eq!(ps[2].es_tract_demeaned, 1000.0);
        assert_eq!(ps[1].es_tract_demeaned, 0.0);
        let es: Vec<f64> = ps.iter().map(|p| p.es).collect();
        assert!(stats::mean(&es).abs() < 1e-9);
        assert!((stats::pop_variance(&es) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn percentile_within_region() {
        let mut ps = vec![
            person("a", "t", "r1", 10.0),
            person("b", "t", "r1", 20.0),
            person("c", "t", "r2", 5.0),
            person("d", "t", "r2", 50.0),
        ];
        compute_es_variants(&mut ps);
        let within: Vec<f64> = ps.iter().map(|p| p.es_percentile_within_region).collect();
        assert_eq!(within, vec![0.0, 1.0, 0.0, 1.0]);
    }

    fn tract_layer() -> GeoLayer {
        let recs = vec![
            FeatureRecord::polygon("T2", "tract", None, &Polygon::rect(1.0, 0.0, 2.0, 1.0)),
            FeatureRecord::polygon("T1", "tract", None, &Polygon::rect(0.0, 0.0, 1.0, 1.0)),
        ];
        GeoLayer::from_records(recs).unwrap()
    }

    #[test]
    fn tract_assignment() {
        let layer = tract_layer();
        assert_eq!(assign_tract(&layer, 0.5, 0.5), Some("T1"));
        assert_eq!(assign_tract(&layer, 0.5, 1.5), Some("T2"));
        assert_eq!(assign_tract(&layer, 0.5, 1.0), Some("T1"));
        assert_eq!(assign_tract(&layer, 3.0, 3.0), None);
    }

    #[test]
    fn build_persons_filters() {
        let layer = tract_layer();
        let props = vec![
            Property { lat: 0.5, lon: 0.5, rent: 1000.0, kind: "residential".into() },
            Property { lat: 0.5, lon: 1.5, rent: 3000.0, kind: "residential".into() },
            Property { lat: 5.0, lon: 5.0, rent: 3000.0, kind: "residential".into() },
        ];
        let homes = vec![
            ("a".to_string(), 0.5, 0.5),
            ("b".to_string(), 0.5, 1.5),
            ("c".to_string(), 0.5, 1.5),
            ("d".to_string(), 0.7, 0.7),
            ("e".to_string(), 5.0, 5.0),
        ];
        let (persons, report) = build_persons(homes, &props, &layer, &LinkConfig::default()).unwrap();
        let ids: Vec<_> = persons.iter().map(|p| p.person_id.as_str()).collect();
        assert_eq!(ids, vec!["a"]);
        assert_eq!(report.dropped_identical_home, 2);
        assert_eq!(report.dropped_no_property, 1);
        assert_eq!(report.dropped_no_tract, 1);
    }

    #[test]
    fn crowded_single_family() {
        let props = vec![Property { lat: 0.0, lon: 0.0, rent: 1.0, kind: "single_family".into() }];
        let linked: Vec<(String, usize)> = (0..12).map(|i| (format!("p{i}"), 0)).collect();
        assert!(drop_crowded_single_family(linked.clone(), &props, 10).is_empty());
        assert_eq!(drop_crowded_single_family(linked[..11].to_vec(), &props, 10).len(), 11);
    }
}
