//! Ping parsing, quality filters and the per-person ping store.

use std::collections::HashMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One timestamped GPS observation of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct Ping {
    pub person_id: String,
    /// Epoch seconds, UTC.
    pub t: i64,
    pub lat: f64,
    pub lon: f64,
    pub accuracy_m: Option<f64>,
}

impl Ping {
    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
            && self.t > 0
            && self.accuracy_m.map_or(true, |a| a >= 0.0 && a.is_finite())
            && !self.person_id.is_empty()
    }
}

/// Header names for the ping CSV columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub person_id: String,
    pub t: String,
    pub lat: String,
    pub lon: String,
    pub accuracy: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            person_id: "person_id".into(),
            t: "t".into(),
            lat: "lat".into(),
            lon: "lon".into(),
            accuracy: Some("accuracy_m".into()),
        }
    }
}

/// Streaming ping parser. Malformed or out-of-range rows are skipped and
/// counted in [`PingParser::rows_rejected`].
pub struct PingParser<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    idx: [usize; 4],
    acc_idx: Option<usize>,
    rows_read: u64,
    rows_rejected: u64,
}

impl<R: Read> PingParser<R> {
    pub fn new(reader: R, schema: &ColumnMap) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let mut idx = [0usize; 4];
        for (slot, name) in [&schema.person_id, &schema.t, &schema.lat, &schema.lon].into_iter().enumerate() {
            idx[slot] = find(name).ok_or_else(|| Error::Schema(format!("missing required column `{name}`")))?;
        }
        let acc_idx = schema.accuracy.as_deref().and_then(find);
        Ok(Self { records: rdr.into_records(), idx, acc_idx, rows_read: 0, rows_rejected: 0 })
    }

    pub fn rows_read(&self) -> u64 {
        self.rows_read
    }

    pub fn rows_rejected(&self) -> u64 {
        self.rows_rejected
    }

    fn parse_record(&self, rec: &csv::StringRecord) -> Option<Ping> {
        let field = |i: usize| rec.get(i).map(str::trim);
        let person_id = field(self.idx[0])?.to_string();
        let t_str = field(self.idx[1])?;
        let t = t_str.parse::<i64>().ok().or_else(|| {
            let f = t_str.parse::<f64>().ok()?;
            (f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
        })?;
        let lat = field(self.idx[2])?.parse::<f64>().ok()?;
        let lon = field(self.idx[3])?.parse::<f64>().ok()?;
        let accuracy_m = match self.acc_idx.and_then(field) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<f64>().ok()?),
        };
        let ping = Ping { person_id, t, lat, lon, accuracy_m };
        ping.is_valid().then_some(ping)
    }
}

impl<R: Read> Iterator for PingParser<R> {
    type Item = Ping;

    fn next(&mut self) -> Option<Ping> {
        loop {
            let rec = self.records.next()?;
            self.rows_read += 1;
            match rec.ok().and_then(|r| self.parse_record(&r)) {
                Some(p) => return Some(p),
                None => self.rows_rejected += 1,
            }
        }
    }
}

/// Parses a whole ping CSV, returning valid pings and the reject counters.
pub fn parse_pings<R: Read>(reader: R, schema: &ColumnMap) -> Result<(Vec<Ping>, u64, u64)> {
    let mut parser = PingParser::new(reader, schema)?;
    let pings: Vec<Ping> = parser.by_ref().collect();
    Ok((pings, parser.rows_read(), parser.rows_rejected()))
}

pub fn write_pings<W: Write>(writer: W, pings: impl IntoIterator<Item = Ping>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["person_id", "t", "lat", "lon", "accuracy_m"])?;
    for p in pings {
        let acc = p.accuracy_m.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([p.person_id.as_str(), &p.t.to_string(), &p.lat.to_string(), &p.lon.to_string(), &acc])?;
    }
    w.flush()?;
    Ok(())
}

/// Keeps pings with accuracy at most `max_m` meters (or no accuracy field).
pub fn filter_accuracy(pings: impl IntoIterator<Item = Ping>, max_m: f64) -> impl Iterator<Item = Ping> {
    pings.into_iter().filter(move |p| p.accuracy_m.map_or(true, |a| a <= max_m))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoredPing {
    pub t: i64,
    pub lat: f64,
    pub lon: f64,
    pub accuracy_m: Option<f64>,
}

/// Immutable per-person ping arrays. Persons are ordered by id, so person
/// indices compare the same way ids do.
#[derive(Debug, Clone, Default)]
pub struct PingStore {
    ids: Vec<String>,
    offsets: Vec<usize>,
    pings: Vec<StoredPing>,
}

fn ping_order(a: &StoredPing, b: &StoredPing) -> std::cmp::Ordering {
    a.t.cmp(&b.t).then(a.lat.total_cmp(&b.lat)).then(a.lon.total_cmp(&b.lon))
}

impl PingStore {
    /// Groups pings by person and sorts each person's pings by
    /// `(t, lat, lon)`. Exact duplicate observations collapse to one.
    pub fn from_pings(pings: impl IntoIterator<Item = Ping>) -> Self {
        let mut by_person: HashMap<String, Vec<StoredPing>> = HashMap::new();
        for p in pings {
            by_person.entry(p.person_id).or_default().push(StoredPing {
                t: p.t,
                lat: p.lat,
                lon: p.lon,
                accuracy_m: p.accuracy_m,
            });
        }
        let mut groups: Vec<(String, Vec<StoredPing>)> = by_person.into_iter().collect();
        groups.sort_by(|a, b| a.0.cmp(&b.0));
        groups.par_iter_mut().for_each(|(_, v)| {
            v.sort_by(ping_order);
            v.dedup_by(|a, b| a.t == b.t && a.lat == b.lat && a.lon == b.lon);
        });
        Self::from_groups(groups)
    }

    fn from_groups(groups: Vec<(String, Vec<StoredPing>)>) -> Self {
        let mut store = PingStore {
            ids: Vec::with_capacity(groups.len()),
            offsets: vec![0],
            pings: Vec::with_capacity(groups.iter().map(|g| g.1.len()).sum()),
        };
        for (id, v) in groups {
            store.ids.push(id);
            store.pings.extend(v);
            store.offsets.push(store.pings.len());
        }
        store
    }

    pub fn person_count(&self) -> usize {
        self.ids.len()
    }

    pub fn ping_count(&self) -> usize {
        self.pings.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, person: usize) -> &str {
        &self.ids[person]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).ok()
    }

    pub fn pings_of(&self, person: usize) -> &[StoredPing] {
        &self.pings[self.offsets[person]..self.offsets[person + 1]]
    }

    pub fn persons(&self) -> impl Iterator<Item = (&str, &[StoredPing])> {
        (0..self.ids.len()).map(move |i| (self.ids[i].as_str(), self.pings_of(i)))
    }

    /// Keeps the persons for which `keep(index, pings)` holds.
    pub fn retain(&self, mut keep: impl FnMut(usize, &[StoredPing]) -> bool) -> PingStore {
        let groups = (0..self.ids.len())
            .filter(|&i| keep(i, self.pings_of(i)))
            .map(|i| (self.ids[i].clone(), self.pings_of(i).to_vec()))
            .collect();
        Self::from_groups(groups)
    }

    /// All pings flattened back to records, in store order.
    pub fn to_pings(&self) -> impl Iterator<Item = Ping> + '_ {
        self.persons().flat_map(|(id, ps)| {
            ps.iter().map(move |p| Ping {
                person_id: id.to_string(),
                t: p.t,
                lat: p.lat,
                lon: p.lon,
                accuracy_m: p.accuracy_m,
            })
        })
    }
}

/// Drops persons with fewer than `min_count` pings.
pub fn filter_min_pings(store: &PingStore, min_count: usize) -> PingStore {
    store.retain(|_, p| p.len() >= min_count)
}

fn dedup_key(p: &StoredPing) -> (i64, i64, i64) {
    (p.t, (p.lat * 1e6).round() as i64, (p.lon * 1e6).round() as i64)
}

/// Removes devices whose pings duplicate another device's.
///
/// For every pair where more than `overlap_frac` of one person's pings match
/// the other's `(t, lat, lon)` (coordinates rounded to 1e-6 degrees), the
/// person with fewer pings is removed; equal counts remove the larger id.
/// Returns the filtered store and the removed ids in id order.
pub fn dedup_devices(store: &PingStore, overlap_frac: f64) -> (PingStore, Vec<String>) {
    let mut owners: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    for person in 0..store.person_count() {
        let mut keys: Vec<_> = store.pings_of(person).iter().map(dedup_key).collect();
        keys.sort_unstable();
        keys.dedup();
        for k in keys {
            owners.entry(k).or_default().push(person as u32);
        }
    }
    let mut shared: HashMap<(u32, u32), u64> = HashMap::new();
    for persons in owners.values().filter(|v| v.len() > 1) {
        for (a_pos, &a) in persons.iter().enumerate() {
            for &b in &persons[a_pos + 1..] {
                *shared.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
    }
    let distinct_keys = |p: usize| {
        let mut keys: Vec<_> = store.pings_of(p).iter().map(dedup_key).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.len() as f64
    };
    let mut removed = vec![false; store.person_count()];
    let mut pairs: Vec<_> = shared.into_iter().collect();
    pairs.sort_unstable();
    for ((a, b), n) in pairs {
        let (a, b) = (a as usize, b as usize);
        let frac_a = n as f64 / distinct_keys(a);
        let frac_b = n as f64 / distinct_keys(b);
        if frac_a > overlap_frac || frac_b > overlap_frac {
            let (na, nb) = (store.pings_of(a).len(), store.pings_of(b).len());
            // a < b, so on equal counts b has the larger id
            let victim = if na < nb { a } else { b };
            removed[victim] = true;
        }
    }
    let removed_ids = (0..store.person_count()).filter(|&i| removed[i]).map(|i| store.id(i).to_string()).collect();
    (store.retain(|i, _| !removed[i]), removed_ids)
}

/// Counters emitted by the ingest stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: u64,
    pub rows_rejected: u64,
    pub persons_in: u64,
    pub persons_out: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub max_accuracy_m: f64,
    pub min_pings: usize,
    pub dedup_overlap_frac: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { max_accuracy_m: 100.0, min_pings: 500, dedup_overlap_frac: 0.8 }
    }
}

/// Parse, accuracy filter, minimum ping count, device dedup; in that order.
pub fn ingest<R: Read>(reader: R, schema: &ColumnMap, cfg: &IngestConfig) -> Result<(PingStore, IngestReport)> {
    let mut parser = PingParser::new(reader, schema)?;
    let kept: Vec<Ping> = filter_accuracy(parser.by_ref(), cfg.max_accuracy_m).collect();
    let mut report =
        IngestReport { rows_read: parser.rows_read(), rows_rejected: parser.rows_rejected(), ..Default::default() };
    let mut ids: Vec<&str> = kept.iter().map(|p| p.person_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    report.persons_in = ids.len() as u64;
    drop(ids);
    let store = PingStore::from_pings(kept);
    let store = filter_min_pings(&store, cfg.min_pings);
    let (store, _) = dedup_devices(&store, cfg.dedup_overlap_frac);
    report.persons_out = store.person_count() as u64;
    Ok((store, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ping(id: &str, t: i64, lat: f64, lon: f64, acc: Option<f64>) -> Ping {
        Ping { person_id: id.into(), t, lat, lon, accuracy_m: acc }
    }

    #[test]
    fn parses_valid_row() {
        let csv = "person_id,t,lat,lon,accuracy_m\nu1,1488326400,37.77,-122.41,12\n";
        let (pings, read, rejected) = parse_pings(csv.as_bytes(), &ColumnMap::default()).unwrap();
        assert_eq!(pings, vec![ping("u1", 1488326400, 37.77, -122.41, Some(12.0))]);
        assert_eq!((read, rejected), (1, 0));
    }

    #[test]
    fn rejects_out_of_range_and_garbage() {
        let csv = "person_id,t,lat,lon,accuracy_m\nu1,1,95,0,\nu1,x,1,1,\nu2,5,1,1,\nu3,5,1\n";
        let (pings, read, rejected) = parse_pings(csv.as_bytes(), &ColumnMap::default()).unwrap();
        assert_eq!(pings.len(), 1);
        assert_eq!(pings[0].accuracy_m, None);
        assert_eq!((read, rejected), (4, 3));
    }

    #[test]
    fn empty_file_and_missing_columns() {
        let (pings, read, rejected) = parse_pings("person_id,t,lat,lon\n".as_bytes(), &ColumnMap::default()).unwrap();
        assert!(pings.is_empty());
        assert_eq!((read, rejected), (0, 0));
        let err = parse_pings("person_id,t,lat\n".as_bytes(), &ColumnMap::default());
        assert!(matches!(err, Err(Error::Schema(_))));
    }

    #[test]
    fn accuracy_threshold_is_inclusive() {
        let pings = vec![
            ping("a", 1, 0.0, 0.0, Some(100.0)),
            ping("a", 2, 0.0, 0.0, Some(101.0)),
            ping("a", 3, 0.0, 0.0, None),
        ];
        let kept: Vec<_> = filter_accuracy(pings, 100.0).map(|p| p.t).collect();
        assert_eq!(kept, vec![1, 3]);
    }

    fn stream(id: &str, n: usize, offset: i64) -> Vec<Ping> {
        (0..n).map(|k| ping(id, 1_000 + offset + k as i64, 10.0 + k as f64 * 1e-4, 20.0, None)).collect()
    }

    #[test]
    fn min_pings_boundary() {
        let mut pings = stream("a", 500, 0);
        pings.extend(stream("b", 499, 0));
        let store = PingStore::from_pings(pings);
        let kept = filter_min_pings(&store, 500);
        assert_eq!(kept.ids(), &["a".to_string()]);
        assert_eq!(filter_min_pings(&store, 1).person_count(), 2);
    }

    #[test]
    fn store_sorts_and_breaks_ties() {
        let store = PingStore::from_pings(vec![
            ping("b", 5, 1.0, 0.0, None),
            ping("a", 9, 0.0, 0.0, None),
            ping("b", 5, 0.5, 0.0, None),
            ping("b", 2, 3.0, 0.0, None),
            ping("b", 2, 3.0, 0.0, None),
        ]);
        assert_eq!(store.ids(), &["a".to_string(), "b".to_string()]);
        let b: Vec<_> = store.pings_of(1).iter().map(|p| (p.t, p.lat)).collect();
        assert_eq!(b, vec![(2, 3.0), (5, 0.5), (5, 1.0)]);
    }

    #[test]
    fn dedup_identical_pair() {
        let mut pings = stream("a", 1000, 0);
        pings.extend(stream("b", 1000, 0));
        let (store, removed) = dedup_devices(&PingStore::from_pings(pings), 0.8);
        assert_eq!(store.ids(), &["a".to_string()]);
        assert_eq!(removed, vec!["b".to_string()]);
    }

    #[test]
    fn dedup_below_threshold_keeps_both() {
        let mut pings = stream("a", 100, 0);
        // b shares 79 of a's 100 pings and adds 21 of its own
        pings.extend(stream("b", 79, 0));
        pings.extend(stream("b", 21, 10_000));
        let (store, removed) = dedup_devices(&PingStore::from_pings(pings), 0.8);
        assert_eq!(store.person_count(), 2);
        assert!(removed.is_empty());
    }

    fn brute_overlap(store: &PingStore, a: usize, b: usize) -> f64 {
        let kb: Vec<_> = store.pings_of(b).iter().map(dedup_key).collect();
        let hits = store.pings_of(a).iter().filter(|p| kb.contains(&dedup_key(p))).count();
        hits as f64 / store.pings_of(a).len() as f64
    }

    #[test]
    fn dedup_three_identical() {
        let mut pings = stream("x", 50, 0);
        pings.extend(stream("y", 50, 0));
        pings.extend(stream("z", 50, 0));
        let store = PingStore::from_pings(pings);
        // brute-force oracle: every pair overlaps fully
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    assert_eq!(brute_overlap(&store, a, b), 1.0);
                }
            }
        }
        let (kept, removed) = dedup_devices(&store, 0.8);
        assert_eq!(kept.ids(), &["x".to_string()]);
        assert_eq!(removed.len(), 2);
    }

    #[test]
    fn ingest_report_counts() {
        let mut buf = Vec::new();
        let mut pings = stream("a", 600, 0);
        pings.extend(stream("b", 10, 0));
        write_pings(&mut buf, pings).unwrap();
        buf.extend_from_slice(b"c,1,200,0,\n");
        let (store, report) = ingest(buf.as_slice(), &ColumnMap::default(), &IngestConfig::default()).unwrap();
        assert_eq!(store.person_count(), 1);
        assert_eq!(report, IngestReport { rows_read: 611, rows_rejected: 1, persons_in: 2, persons_out: 1 });
    }

    fn arb_ping() -> impl Strategy<Value = Ping> {
        ("[a-z]{1,4}", 1i64..2_000_000_000, -90.0..=90.0f64, -180.0..=180.0f64, proptest::option::of(0.0..500.0f64))
            .prop_map(|(id, t, lat, lon, acc)| ping(&id, t, lat, lon, acc))
    }

    proptest! {
        #[test]
        fn write_then_parse_round_trips(pings in proptest::collection::vec(arb_ping(), 0..40)) {
            let mut buf = Vec::new();
            write_pings(&mut buf, pings.clone()).unwrap();
            let (back, read, rejected) = parse_pings(buf.as_slice(), &ColumnMap::default()).unwrap();
            prop_assert_eq!(back, pings.clone());
            prop_assert_eq!(read as usize, pings.len());
            prop_assert_eq!(rejected, 0);
        }

        #[test]
        fn accuracy_and_min_pings_commute(
            pings in proptest::collection::vec(arb_ping(), 0..200),
            min in 1usize..6,
        ) {
            // accuracy first, then min-pings
            let a = filter_min_pings(&PingStore::from_pings(filter_accuracy(pings.clone(), 100.0)), min);
            // person predicate on accurate-ping counts first, record filter second
            let store = PingStore::from_pings(pings.clone());
            let pre = store.retain(|_, ps| {
                ps.iter().filter(|p| p.accuracy_m.map_or(true, |x| x <= 100.0)).count() >= min
            });
            let b = PingStore::from_pings(filter_accuracy(pre.to_pings().collect::<Vec<_>>(), 100.0));
            prop_assert_eq!(a.ids(), b.ids());
        }

        #[test]
        fn dedup_leaves_no_overlapping_pair(seed_pings in proptest::collection::vec((0usize..4, 0i64..30), 1..120)) {
            let pings: Vec<Ping> = seed_pings
                .iter()
                .map(|&(p, k)| ping(&format!("p{p}"), 100 + k, 1.0, 1.0, None))
                .collect();
            let (store, _) = dedup_devices(&PingStore::from_pings(pings), 0.8);
            for a in 0..store.person_count() {
                for b in 0..store.person_count() {
                    if a != b {
                        prop_assert!(brute_overlap(&store, a, b) <= 0.8);
                    }
                }
            }
        }
    }
}
