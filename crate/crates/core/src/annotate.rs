//! Geographic and temporal labels for interactions, and the filters used
//! by decompositions.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossings::{Interaction, Network};
use crate::error::{Error, Result};
use crate::geo::haversine_m;
use crate::home::Person;
use crate::layers::GeoLayer;

pub const AT_HOME_M: f64 = 50.0;
pub const ROAD_M: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Annotation {
    pub at_home_i: bool,
    pub at_home_j: bool,
    pub in_home_tract_i: bool,
    pub in_home_tract_j: bool,
    pub poi_id: Option<String>,
    pub poi_category: Option<String>,
    pub hub_id: Option<String>,
    pub on_road: bool,
    pub hour_bucket: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TractContext {
    BothInHomeTract,
    OneOut,
    BothOut,
}

impl FromStr for TractContext {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both_in_home_tract" => Ok(Self::BothInHomeTract),
            "one_out" => Ok(Self::OneOut),
            "both_out" => Ok(Self::BothOut),
            _ => Err(Error::Config(format!("unknown tract context `{s}`"))),
        }
    }
}

impl TractContext {
    pub const ALL: [TractContext; 3] = [Self::BothInHomeTract, Self::OneOut, Self::BothOut];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::BothInHomeTract => "both_in_home_tract",
            Self::OneOut => "one_out",
            Self::BothOut => "both_out",
        }
    }
}

pub fn classify_tract_context(a: &Annotation) -> TractContext {
    match (a.in_home_tract_i, a.in_home_tract_j) {
        (true, true) => TractContext::BothInHomeTract,
        (false, false) => TractContext::BothOut,
        _ => TractContext::OneOut,
    }
}

/// Three-hour local window index, 0..=7.
pub fn hour_bucket(t: i64, utc_offset_s: i64) -> u8 {
    ((t + utc_offset_s).rem_euclid(86_400) / (3 * 3600)) as u8
}

/// Labels one interaction point. Endpoints without a `Person` record get
/// false home flags.
pub fn annotate_one(
    x: &Interaction,
    pi: Option<&Person>,
    pj: Option<&Person>,
    layer: &GeoLayer,
    utc_offset_s: i64,
) -> Annotation {
    let at_home =
        |p: Option<&Person>| p.is_some_and(|p| haversine_m(x.lat, x.lon, p.home_lat, p.home_lon) <= AT_HOME_M);
    let tract = layer.tract_at(x.lat, x.lon).map(|f| f.id.as_str());
    let in_tract = |p: Option<&Person>| p.is_some_and(|p| tract == Some(p.home_tract_id.as_str()));
    let poi = layer.poi_at(x.lat, x.lon);
    let hub = poi
        .and_then(|p| p.parent_id.as_deref())
        .map(str::to_string)
        .or_else(|| layer.hub_at(x.lat, x.lon).map(|h| h.id.clone()));
    Annotation {
        at_home_i: at_home(pi),
        at_home_j: at_home(pj),
        in_home_tract_i: in_tract(pi),
        in_home_tract_j: in_tract(pj),
        poi_id: poi.map(|p| p.id.clone()),
        poi_category: poi.map(|p| p.category.as_string()),
        hub_id: hub,
        on_road: layer.near_road(x.lat, x.lon, ROAD_M),
        hour_bucket: hour_bucket(x.t, utc_offset_s),
    }
}

/// Annotations aligned with `net.items`.
pub fn annotate_all(net: &Network, persons: &[Person], layer: &GeoLayer, utc_offset_s: i64) -> Vec<Annotation> {
    let by_id: HashMap<&str, &Person> = persons.iter().map(|p| (p.person_id.as_str(), p)).collect();
    let lookup: Vec<Option<&Person>> = net.ids.iter().map(|id| by_id.get(id.as_str()).copied()).collect();
    net.items
        .par_iter()
        .map(|x| annotate_one(x, lookup[x.i as usize], lookup[x.j as usize], layer, utc_offset_s))
        .collect()
}

/// Predicate over annotations used to decompose segregation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    All,
    HourBucket(u8),
    PoiCategory(String),
    InPoi,
    Hub(String),
    TractContext(TractContext),
    ExcludeRoad,
    ExcludeSameHome,
    And(Vec<Filter>),
}

impl Filter {
    pub fn matches(&self, a: &Annotation) -> bool {
        match self {
            Filter::All => true,
            Filter::HourBucket(h) => a.hour_bucket == *h,
            Filter::PoiCategory(c) => a.poi_category.as_deref() == Some(c.as_str()),
            Filter::InPoi => a.poi_id.is_some(),
            Filter::Hub(h) => a.hub_id.as_deref() == Some(h.as_str()),
            Filter::TractContext(c) => classify_tract_context(a) == *c,
            Filter::ExcludeRoad => !a.on_road,
            Filter::ExcludeSameHome => !(a.at_home_i && a.at_home_j),
            Filter::And(fs) => fs.iter().all(|f| f.matches(a)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Filter::All => "all".into(),
            Filter::HourBucket(h) => format!("hour:{h}"),
            Filter::PoiCategory(c) => format!("poi_category:{c}"),
            Filter::InPoi => "in_poi".into(),
            Filter::Hub(h) => format!("hub:{h}"),
            Filter::TractContext(c) => format!("tract_context:{}", c.as_str()),
            Filter::ExcludeRoad => "exclude_road".into(),
            Filter::ExcludeSameHome => "exclude_same_home".into(),
            Filter::And(fs) => fs.iter().map(Filter::label).collect::<Vec<_>>().join("&"),
        }
    }
}

impl FromStr for Filter {
    type Err = Error;
    /// Parses labels produced by [`Filter::label`].
    fn from_str(s: &str) -> Result<Self> {
        if s.contains('&') {
            return s.split('&').map(str::parse).collect::<Result<Vec<_>>>().map(Filter::And);
        }
        let bad = || Error::Config(format!("unknown filter `{s}`"));
        Ok(match s.split_once(':') {
            None => match s {
                "all" => Filter::All,
                "in_poi" => Filter::InPoi,
                "exclude_road" => Filter::ExcludeRoad,
                "exclude_same_home" => Filter::ExcludeSameHome,
                _ => return Err(bad()),
            },
            Some(("hour", h)) => match h.parse::<u8>() {
                Ok(h) if h < 8 => Filter::HourBucket(h),
                _ => return Err(bad()),
            },
            Some(("poi_category", c)) => Filter::PoiCategory(c.into()),
            Some(("hub", h)) => Filter::Hub(h.into()),
            Some(("tract_context", c)) => Filter::TractContext(c.parse()?),
            _ => return Err(bad()),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Row {
    i: String,
    j: String,
    t: i64,
    lat: f64,
    lon: f64,
    at_home_i: bool,
    at_home_j: bool,
    in_home_tract_i: bool,
    in_home_tract_j: bool,
    poi_id: Option<String>,
    poi_category: Option<String>,
    hub_id: Option<String>,
    on_road: bool,
    hour_bucket: u8,
}

pub fn write_annotated<W: Write>(writer: W, net: &Network, ann: &[Annotation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (x, a) in net.items.iter().zip(ann) {
        w.serialize(Row {
            i: net.ids[x.i as usize].clone(),
            j: net.ids[x.j as usize].clone(),
            t: x.t,
            lat: x.lat,
            lon: x.lon,
            at_home_i: a.at_home_i,
            at_home_j: a.at_home_j,
            in_home_tract_i: a.in_home_tract_i,
            in_home_tract_j: a.in_home_tract_j,
            poi_id: a.poi_id.clone(),
            poi_category: a.poi_category.clone(),
            hub_id: a.hub_id.clone(),
            on_road: a.on_road,
            hour_bucket: a.hour_bucket,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an annotated interaction file written by [`write_annotated`].
pub fn read_annotated<R: Read>(reader: R, extra_ids: &[String]) -> Result<(Network, Vec<Annotation>)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let rows: Vec<Row> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    let mut ids: Vec<String> =
        rows.iter().flat_map(|r| [r.i.clone(), r.j.clone()]).chain(extra_ids.iter().cloned()).collect();
    ids.sort_unstable();
    ids.dedup();
    let idx = |s: &str| ids.binary_search_by(|x| x.as_str().cmp(s)).unwrap() as u32;
    let mut pairs: Vec<(Interaction, Annotation)> = Vec::with_capacity(rows.len());
    for r in rows {
        let (a, b) = (idx(&r.i), idx(&r.j));
        if a == b {
            return Err(Error::InvalidInput(format!("self interaction for {}", r.i)));
        }
        let (i, j, swap) = if a < b { (a, b, false) } else { (b, a, true) };
        let mut ann = Annotation {
            at_home_i: r.at_home_i,
            at_home_j: r.at_home_j,
            in_home_tract_i: r.in_home_tract_i,
            in_home_tract_j: r.in_home_tract_j,
            poi_id: r.poi_id,
            poi_category: r.poi_category,
            hub_id: r.hub_id,
            on_road: r.on_road,
            hour_bucket: r.hour_bucket,
        };
        if swap {
            std::mem::swap(&mut ann.at_home_i, &mut ann.at_home_j);
            std::mem::swap(&mut ann.in_home_tract_i, &mut ann.in_home_tract_j);
        }
        pairs.push((Interaction { i, j, t: r.t, lat: r.lat, lon: r.lon, k: 0 }, ann));
    }
    pairs.sort_by(|a, b| a.0.canonical_cmp(&b.0));
    let (mut items, ann): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    crate::crossings::assign_ordinals(&mut items);
    Ok((Network { ids, items }, ann))
}
