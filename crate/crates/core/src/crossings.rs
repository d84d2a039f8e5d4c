//! Proximity join producing the interaction network.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_m, RadiusGrid};
use crate::ingest::PingStore;

pub const BRUTEFORCE_MAX_PINGS: usize = 10_000;

/// One path crossing between persons `i < j` (indices into an id table
/// sorted ascending, so index order is id order).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub i: u32,
    pub j: u32,
    pub t: i64,
    pub lat: f64,
    pub lon: f64,
    /// Ordinal of this interaction within its pair.
    pub k: u32,
}

impl Interaction {
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        (self.i, self.j, self.t)
            .cmp(&(other.i, other.j, other.t))
            .then(self.lat.total_cmp(&other.lat))
            .then(self.lon.total_cmp(&other.lon))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum TieStrength {
    #[default]
    Any,
    Consecutive(u32),
    UniqueDays(u32),
}

impl FromStr for TieStrength {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("tie strength `{s}`; expected any, consecutive:K or unique_days:K"));
        if s == "any" {
            return Ok(Self::Any);
        }
        let (name, k) = s.split_once(':').ok_or_else(bad)?;
        let k: u32 = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match name {
            "consecutive" => Ok(Self::Consecutive(k)),
            "unique_days" => Ok(Self::UniqueDays(k)),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for TieStrength {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Any => write!(f, "any"),
            Self::Consecutive(k) => write!(f, "consecutive:{k}"),
            Self::UniqueDays(k) => write!(f, "unique_days:{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    DedupPairs,
    CountRepeats,
}

impl FromStr for Weighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dedup_pairs" => Ok(Self::DedupPairs),
            "count_repeats" => Ok(Self::CountRepeats),
            _ => Err(Error::Config(format!("weighting `{s}`; expected dedup_pairs or count_repeats"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JoinConfig {
    pub dist_m: f64,
    pub time_s: i64,
    pub tie_strength: TieStrength,
    pub weighting: Weighting,
    /// Collapse repeat ping pairs of one person pair inside a `time_s`
    /// window into the earliest one.
    pub collapse_repeats: bool,
}

impl Default for JoinConfig {
    fn default() -> Self {
        Self {
            dist_m: 50.0,
            time_s: 300,
            tie_strength: TieStrength::Any,
            weighting: Weighting::DedupPairs,
            collapse_repeats: true,
        }
    }
}

impl JoinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dist_m > 0.0 && self.dist_m.is_finite()) {
            return Err(Error::Config(format!("dist_m must be positive, got {}", self.dist_m)));
        }
        if self.time_s <= 0 {
            return Err(Error::Config(format!("time_s must be positive, got {}", self.time_s)));
        }
        Ok(())
    }
}

/// Flattened ping: (person, t, lat, lon).
#[derive(Clone, Copy)]
struct Pt {
    p: u32,
    t: i64,
    lat: f64,
    lon: f64,
}

fn flatten(store: &PingStore) -> Vec<Pt> {
    let mut out = Vec::with_capacity(store.ping_count());
    for p in 0..store.person_count() {
        for s in store.pings_of(p) {
            out.push(Pt { p: p as u32, t: s.t, lat: s.lat, lon: s.lon });
        }
    }
    out
}

fn qualifies(a: &Pt, b: &Pt, cfg: &JoinConfig) -> bool {
    a.p != b.p && (a.t - b.t).abs() < cfg.time_s && haversine_m(a.lat, a.lon, b.lat, b.lon) < cfg.dist_m
}

fn make(a: &Pt, b: &Pt) -> Interaction {
    let (x, y) = if a.p < b.p { (a, b) } else { (b, a) };
    Interaction { i: x.p, j: y.p, t: x.t.min(y.t), lat: (x.lat + y.lat) * 0.5, lon: (x.lon + y.lon) * 0.5, k: 0 }
}

fn finish(mut out: Vec<Interaction>) -> Vec<Interaction> {
    out.par_sort_unstable_by(Interaction::canonical_cmp);
    assign_ordinals(&mut out);
    out
}

/// Renumbers `k` within each (i, j) run of a canonically sorted list.
pub fn assign_ordinals(items: &mut [Interaction]) {
    let mut k = 0;
    for n in 0..items.len() {
        if n > 0 && (items[n].i, items[n].j) == (items[n - 1].i, items[n - 1].j) {
            k += 1;
        } else {
            k = 0;
        }
        items[n].k = k;
    }
}

/// Exhaustive O(n^2) join over every ping pair. Refuses stores above
/// [`BRUTEFORCE_MAX_PINGS`].
pub fn join_bruteforce(store: &PingStore, cfg: &JoinConfig) -> Result<Vec<Interaction>> {
    cfg.validate()?;
    if store.ping_count() > BRUTEFORCE_MAX_PINGS {
        return Err(Error::OracleGuard(format!(
            "brute-force join limited to {BRUTEFORCE_MAX_PINGS} pings, got {}",
            store.ping_count()
        )));
    }
    let pts = flatten(store);
    let mut out = Vec::new();
    for a in 0..pts.len() {
        for b in a + 1..pts.len() {
            if qualifies(&pts[a], &pts[b], cfg) {
                out.push(make(&pts[a], &pts[b]));
            }
        }
    }
    Ok(finish(out))
}

/// Slab-and-grid join. Pings are bucketed into `time_s`-wide slabs; each
/// slab gets a radius grid, queried by its own pings and by the pings of
/// the following slab, so every pair with |dt| < T is seen exactly once.
pub fn join_indexed(store: &PingStore, cfg: &JoinConfig) -> Result<Vec<Interaction>> {
    cfg.validate()?;
    let mut pts = flatten(store);
    let slab_of = |t: i64| t.div_euclid(cfg.time_s);
    pts.par_sort_unstable_by_key(|p| (slab_of(p.t), p.p, p.t));
    let mut bounds: Vec<(i64, usize, usize)> = Vec::new();
    let mut s = 0;
    while s < pts.len() {
        let slab = slab_of(pts[s].t);
        let mut e = s;
        while e < pts.len() && slab_of(pts[e].t) == slab {
            e += 1;
        }
        bounds.push((slab, s, e));
        s = e;
    }
    let max_lat = |r: &[Pt]| r.iter().fold(0.0f64, |m, p| m.max(p.lat.abs()));
    let chunks: Vec<Vec<Interaction>> = (0..bounds.len())
        .into_par_iter()
        .map(|n| {
            let (slab, s, e) = bounds[n];
            let own = &pts[s..e];
            let next = bounds.get(n + 1).filter(|b| b.0 == slab + 1).map(|b| &pts[b.1..b.2]).unwrap_or(&[]);
            let lat_bound = max_lat(own).max(max_lat(next));
            let coords: Vec<(f64, f64)> = own.iter().map(|p| (p.lat, p.lon)).collect();
            let grid = RadiusGrid::new(&coords, cfg.dist_m, lat_bound);
            let mut buf = Vec::new();
            let mut out = Vec::new();
            for (a, pa) in own.iter().enumerate() {
                grid.candidates(pa.lat, pa.lon, &mut buf);
                for &b in &buf {
                    let b = b as usize;
                    if b > a && qualifies(pa, &own[b], cfg) {
                        out.push(make(pa, &own[b]));
                    }
                }
            }
            for pa in next {
                grid.candidates(pa.lat, pa.lon, &mut buf);
                for &b in &buf {
                    let pb = &own[b as usize];
                    if qualifies(pa, pb, cfg) {
                        out.push(make(pa, pb));
                    }
                }
            }
            out
        })
        .collect();
    Ok(finish(chunks.concat()))
}

fn pair_runs(items: &[Interaction]) -> impl Iterator<Item = &[Interaction]> {
    items.chunk_by(|a, b| (a.i, a.j) == (b.i, b.j))
}

/// Keeps only pairs meeting the tie-strength rule; kept pairs retain all
/// their interactions. Input must be canonically sorted.
pub fn apply_tie_strength(
    items: Vec<Interaction>,
    rule: TieStrength,
    time_s: i64,
    utc_offset_s: i64,
) -> Vec<Interaction> {
    let keep = |run: &[Interaction]| -> bool {
        match rule {
            TieStrength::Any => true,
            TieStrength::Consecutive(k) => {
                let mut best = 1u32;
                let mut cur = 1u32;
                for w in run.windows(2) {
                    cur = if w[1].t - w[0].t < time_s { cur + 1 } else { 1 };
                    best = best.max(cur);
                }
                best >= k
            }
            TieStrength::UniqueDays(k) => {
                let days: BTreeSet<i64> = run.iter().map(|x| (x.t + utc_offset_s).div_euclid(86_400)).collect();
                days.len() >= k as usize
            }
        }
    };
    let mut out: Vec<Interaction> = pair_runs(&items).filter(|r| keep(r)).flatten().copied().collect();
    assign_ordinals(&mut out);
    out
}

/// Within each pair, keeps an interaction and drops later ones starting
/// less than `time_s` after it. Input must be canonically sorted.
pub fn collapse_repeats(items: Vec<Interaction>, time_s: i64) -> Vec<Interaction> {
    let mut out = Vec::with_capacity(items.len());
    for run in pair_runs(&items) {
        let mut kept_t = None;
        for x in run {
            if kept_t.map_or(true, |t0| x.t >= t0 + time_s) {
                out.push(*x);
                kept_t = Some(x.t);
            }
        }
    }
    assign_ordinals(&mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub dist_m: f64,
    pub time_s: i64,
    pub tie_strength: String,
    pub collapse_repeats: bool,
    pub raw_interactions: u64,
    pub interactions: u64,
}

/// An interaction list together with its person id table.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub ids: Vec<String>,
    pub items: Vec<Interaction>,
}

impl Network {
    pub fn index_of(&self, id: &str) -> Option<u32> {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).ok().map(|i| i as u32)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.items.iter().map(|x| (x.i, x.j))
    }
}

/// Indexed join followed by tie-strength filtering and repeat collapse.
pub fn build_network(store: &PingStore, cfg: &JoinConfig, utc_offset_s: i64) -> Result<(Network, NetworkMeta)> {
    let raw = join_indexed(store, cfg)?;
    let raw_n = raw.len() as u64;
    let mut items = apply_tie_strength(raw, cfg.tie_strength, cfg.time_s, utc_offset_s);
    if cfg.collapse_repeats {
        items = collapse_repeats(items, cfg.time_s);
    }
    let meta = NetworkMeta {
        dist_m: cfg.dist_m,
        time_s: cfg.time_s,
        tie_strength: cfg.tie_strength.to_string(),
        collapse_repeats: cfg.collapse_repeats,
        raw_interactions: raw_n,
        interactions: items.len() as u64,
    };
    Ok((Network { ids: store.ids().to_vec(), items }, meta))
}

/// Per-person alter lists (indices). `DedupPairs` lists each partner
/// once; `CountRepeats` once per interaction.
pub fn alter_lists(pairs: impl Iterator<Item = (u32, u32)>, n_persons: usize, weighting: Weighting) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); n_persons];
    for (i, j) in pairs {
        out[i as usize].push(j);
        out[j as usize].push(i);
    }
    for v in &mut out {
        v.sort_unstable();
        if weighting == Weighting::DedupPairs {
            v.dedup();
        }
    }
    out
}

/// Alter ES multisets keyed by person index. Alters without ES are skipped
/// and persons left with no alters are omitted.
pub fn alter_multisets(net: &Network, es: impl Fn(&str) -> Option<f64>, weighting: Weighting) -> Vec<(u32, Vec<f64>)> {
    let es_of: Vec<Option<f64>> = net.ids.iter().map(|id| es(id)).collect();
    alter_lists(net.pairs(), net.ids.len(), weighting)
        .into_iter()
        .enumerate()
        .filter_map(|(p, alters)| {
            let ys: Vec<f64> = alters.iter().filter_map(|&a| es_of[a as usize]).collect();
            (!ys.is_empty()).then_some((p as u32, ys))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Row<'a> {
    i: &'a str,
    j: &'a str,
    t: i64,
    lat: f64,
    lon: f64,
}

pub fn write_network<W: Write>(writer: W, net: &Network) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for x in &net.items {
        w.serialize(Row { i: &net.ids[x.i as usize], j: &net.ids[x.j as usize], t: x.t, lat: x.lat, lon: x.lon })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `i,j,t,lat,lon` rows. Ids referenced by rows form the id table,
/// extended by `extra_ids` (persons without interactions).
pub fn read_network<R: Read>(reader: R, extra_ids: &[String]) -> Result<Network> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows: Vec<(String, String, i64, f64, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get =
            |n: usize| rec.get(n).ok_or_else(|| Error::Schema(format!("interaction row has {} fields", rec.len())));
        let num = |n: usize| -> Result<f64> {
            get(n)?.parse().map_err(|_| Error::Schema(format!("bad number in interaction row: {:?}", rec)))
        };
        let (a, b) = (get(0)?.to_string(), get(1)?.to_string());
        if a == b {
            return Err(Error::InvalidInput(format!("self interaction for {a}")));
        }
        let t: i64 = get(2)?.parse().map_err(|_| Error::Schema(format!("bad t in interaction row: {:?}", rec)))?;
        rows.push((a, b, t, num(3)?, num(4)?));
    }
    let mut ids: Vec<String> =
        rows.iter().flat_map(|r| [r.0.clone(), r.1.clone()]).chain(extra_ids.iter().cloned()).collect();
    ids.sort_unstable();
    ids.dedup();
    let idx = |s: &str| ids.binary_search_by(|x| x.as_str().cmp(s)).unwrap() as u32;
    let items: Vec<Interaction> = rows
        .iter()
        .map(|(a, b, t, lat, lon)| {
            let (x, y) = (idx(a), idx(b));
            Interaction { i: x.min(y), j: x.max(y), t: *t, lat: *lat, lon: *lon, k: 0 }
        })
        .collect();
    Ok(Network { ids, items: finish(items) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocalFrame;
    use crate::ingest::Ping;

    fn ping(id: &str, t: i64, lat: f64, lon: f64) -> Ping {
        Ping { person_id: id.into(), t, lat, lon, accuracy_m: None }
    }

    fn cfg() -> JoinConfig {
        JoinConfig::default()
    }

    #[test]
    fn basic_threshold_cases() {
        let f = LocalFrame::new(37.0, -122.0);
        let (la, lo) = f.to_latlon(30.0, 0.0);
        let store = PingStore::from_pings([ping("a", 1000, 37.0, -122.0), ping("b", 1060, la, lo)]);
        let out = join_indexed(&store, &cfg()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].t, 1000);
        assert_eq!(join_bruteforce(&store, &cfg()).unwrap(), out);

        let store = PingStore::from_pings([ping("a", 1000, 37.0, -122.0), ping("b", 1400, la, lo)]);
        assert!(join_indexed(&store, &cfg()).unwrap().is_empty());

        let (la, lo) = f.to_latlon(1.0, 0.0);
        let store = PingStore::from_pings([ping("a", 1000, 37.0, -122.0), ping("a", 1001, la, lo)]);
        assert!(join_indexed(&store, &cfg()).unwrap().is_empty());
    }

    #[test]
    fn identical_location_complete_graph() {
        let pings: Vec<Ping> = (0..12).map(|n| ping(&format!("p{n:02}"), 5000 + n, 10.0, 20.0)).collect();
        let store = PingStore::from_pings(pings);
        assert_eq!(join_indexed(&store, &cfg()).unwrap().len(), 66);
    }

    #[test]
    fn spaced_line_has_no_pairs() {
        let f = LocalFrame::new(0.0, 0.0);
        let pings: Vec<Ping> = (0..50)
            .map(|n| {
                let (la, lo) = f.to_latlon(n as f64 * 100.0, 0.0);
                ping(&format!("p{n}"), 777, la, lo)
            })
            .collect();
        assert!(join_indexed(&PingStore::from_pings(pings), &cfg()).unwrap().is_empty());
    }

    #[test]
    fn bruteforce_guard() {
        let pings: Vec<Ping> = (0..10_001).map(|n| ping("x", 1 + n, 0.0, 0.0)).collect();
        let store = PingStore::from_pings(pings);
        assert!(matches!(join_bruteforce(&store, &cfg()), Err(Error::OracleGuard(_))));
    }

    #[test]
    fn interaction_fields_are_canonical() {
        let store = PingStore::from_pings([ping("b", 2000, 1.0, 2.0), ping("a", 2100, 1.0002, 2.0)]);
        let out = join_indexed(&store, &cfg()).unwrap();
        assert_eq!((out[0].i, out[0].j, out[0].t), (0, 1, 2000));
        assert_eq!(out[0].lat, (1.0002 + 1.0) * 0.5);
    }

    fn it(t: i64) -> Interaction {
        Interaction { i: 0, j: 1, t, lat: 0.0, lon: 0.0, k: 0 }
    }

    #[test]
    fn tie_strength_rules() {
        let two = vec![it(0), it(60)];
        assert_eq!(apply_tie_strength(two.clone(), TieStrength::Consecutive(2), 300, 0).len(), 2);
        assert!(apply_tie_strength(vec![it(0)], TieStrength::Consecutive(2), 300, 0).is_empty());
        assert!(apply_tie_strength(vec![it(0), it(300)], TieStrength::Consecutive(2), 300, 0).is_empty());
        let days = vec![it(1000), it(1000 + 86_400)];
        assert_eq!(apply_tie_strength(days, TieStrength::UniqueDays(2), 300, 0).len(), 2);
        assert!(apply_tie_strength(two, TieStrength::UniqueDays(2), 300, 0).is_empty());
    }

    #[test]
    fn collapse_keeps_earliest_per_window() {
        let out = collapse_repeats(vec![it(0), it(100), it(299), it(300), it(450), it(700)], 300);
        let ts: Vec<i64> = out.iter().map(|x| x.t).collect();
        assert_eq!(ts, vec![0, 300, 700]);
        assert_eq!(out.iter().map(|x| x.k).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn multiset_weighting_example() {
        let net = Network {
            ids: vec!["A".into(), "B".into(), "C".into()],
            items: vec![
                Interaction { i: 0, j: 1, t: 1, lat: 0.0, lon: 0.0, k: 0 },
                Interaction { i: 0, j: 1, t: 900, lat: 0.0, lon: 0.0, k: 1 },
                Interaction { i: 0, j: 2, t: 5, lat: 0.0, lon: 0.0, k: 0 },
            ],
        };
        let es = |id: &str| match id {
            "B" => Some(1000.0),
            "C" => Some(2000.0),
            _ => Some(1.0),
        };
        let mean_a = |w| {
            let m = alter_multisets(&net, es, w);
            let ys = &m.iter().find(|x| x.0 == 0).unwrap().1;
            ys.iter().sum::<f64>() / ys.len() as f64
        };
        assert_eq!(mean_a(Weighting::DedupPairs), 1500.0);
        assert!((mean_a(Weighting::CountRepeats) - 1333.333_333).abs() < 1e-3);
        let lonely = Network { ids: vec!["Z".into()], items: vec![] };
        assert!(alter_multisets(&lonely, es, Weighting::DedupPairs).is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let store = PingStore::from_pings([
            ping("a", 1000, 1.0, 2.0),
            ping("b", 1010, 1.0001, 2.0),
            ping("c", 1020, 1.0, 2.0001),
        ]);
        let (net, _) = build_network(&store, &cfg(), 0).unwrap();
        let mut buf = Vec::new();
        write_network(&mut buf, &net).unwrap();
        let back = read_network(&buf[..], store.ids()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn parse_tie_strength() {
        assert_eq!("consecutive:3".parse::<TieStrength>().unwrap(), TieStrength::Consecutive(3));
        assert_eq!("unique_days:2".parse::<TieStrength>().unwrap().to_string(), "unique_days:2");
        assert!("consecutive:0".parse::<TieStrength>().is_err());
        assert!("weekly:2".parse::<TieStrength>().is_err());
    }
}
