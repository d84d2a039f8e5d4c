//! Geographic layers: tracts, regions, POIs, hubs and roads, loaded from
//! line-delimited JSON and indexed by bounding box.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rstar::primitives::{GeomWithData, Rectangle};
use rstar::{RTree, AABB};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{distance_to_polyline_m, Polygon, M_PER_DEG};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Tract,
    Region,
    Hub,
    Road,
    Poi(String),
    Other(String),
}

impl Category {
    pub fn parse(s: &str) -> Self {
        match s {
            "tract" => Category::Tract,
            "region" => Category::Region,
            "hub" => Category::Hub,
            "road" => Category::Road,
            _ => match s.strip_prefix("poi:") {
                Some(c) => Category::Poi(c.to_string()),
                None => Category::Other(s.to_string()),
            },
        }
    }

    pub fn as_string(&self) -> String {
        match self {
            Category::Tract => "tract".into(),
            Category::Region => "region".into(),
            Category::Hub => "hub".into(),
            Category::Road => "road".into(),
            Category::Poi(c) => format!("poi:{c}"),
            Category::Other(c) => c.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Polygon(Polygon),
    Polyline(Vec<(f64, f64)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub id: String,
    pub category: Category,
    pub parent_id: Option<String>,
    pub geometry: Geometry,
    pub attrs: BTreeMap<String, serde_json::Value>,
}

impl Feature {
    pub fn polygon(&self) -> Option<&Polygon> {
        match &self.geometry {
            Geometry::Polygon(p) => Some(p),
            Geometry::Polyline(_) => None,
        }
    }

    pub fn attr_f64(&self, key: &str) -> Option<f64> {
        self.attrs.get(key).and_then(|v| v.as_f64())
    }

    /// Representative point: ring centroid or first polyline vertex, as (lat, lon).
    pub fn anchor(&self) -> (f64, f64) {
        match &self.geometry {
            Geometry::Polygon(p) => {
                let (lon, lat) = p.centroid();
                (lat, lon)
            }
            Geometry::Polyline(c) => (c[0].1, c[0].0),
        }
    }
}

/// On-disk feature record, one per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub kind: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub coords: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, serde_json::Value>,
}

impl FeatureRecord {
    pub fn polygon(id: &str, category: &str, parent_id: Option<&str>, poly: &Polygon) -> Self {
        Self {
            id: id.into(),
            kind: "polygon".into(),
            category: category.into(),
            parent_id: parent_id.map(str::to_string),
            coords: poly.ring().iter().map(|&(x, y)| [x, y]).collect(),
            attrs: BTreeMap::new(),
        }
    }

    fn into_feature(self) -> Result<Feature> {
        let coords: Vec<(f64, f64)> = self.coords.iter().map(|c| (c[0], c[1])).collect();
        let geometry = match self.kind.as_str() {
            "polygon" => {
                Geometry::Polygon(Polygon::new(coords).map_err(|e| Error::Layer(format!("feature {}: {e}", self.id)))?)
            }
            "polyline" => {
                if coords.is_empty() {
                    return Err(Error::Layer(format!("feature {}: empty polyline", self.id)));
                }
                Geometry::Polyline(coords)
            }
            other => return Err(Error::Layer(format!("feature {}: unknown kind `{other}`", self.id))),
        };
        Ok(Feature {
            id: self.id,
            category: Category::parse(&self.category),
            parent_id: self.parent_id,
            geometry,
            attrs: self.attrs,
        })
    }
}

type BoxEntry = GeomWithData<Rectangle<[f64; 2]>, usize>;

/// Validated, indexed collection of features.
#[derive(Debug, Clone)]
pub struct GeoLayer {
    features: Vec<Feature>,
    by_id: BTreeMap<String, usize>,
    polygons: RTree<BoxEntry>,
    roads: RTree<BoxEntry>,
    poi_categories: Vec<String>,
}

impl GeoLayer {
    pub fn from_records(records: Vec<FeatureRecord>) -> Result<Self> {
        let features = records.into_iter().map(FeatureRecord::into_feature).collect::<Result<Vec<_>>>()?;
        Self::new(features)
    }

    pub fn new(features: Vec<Feature>) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (i, f) in features.iter().enumerate() {
            if by_id.insert(f.id.clone(), i).is_some() {
                return Err(Error::Layer(format!("duplicate feature id `{}`", f.id)));
            }
        }
        for f in &features {
            if let Some(parent) = &f.parent_id {
                match by_id.get(parent) {
                    Some(&p) if features[p].polygon().is_some() => {}
                    _ => return Err(Error::Layer(format!("feature {} references missing parent `{parent}`", f.id))),
                }
            }
        }
        let mut poly_entries = Vec::new();
        let mut road_entries = Vec::new();
        for (i, f) in features.iter().enumerate() {
            match &f.geometry {
                Geometry::Polygon(p) => {
                    let b = p.bbox();
                    poly_entries.push(BoxEntry::new(
                        Rectangle::from_corners([b.min_lon, b.min_lat], [b.max_lon, b.max_lat]),
                        i,
                    ));
                }
                Geometry::Polyline(chain) => {
                    for w in
                        chain.windows(2).map(|w| [w[0], w[1]]).chain((chain.len() == 1).then(|| [chain[0], chain[0]]))
                    {
                        road_entries.push(BoxEntry::new(
                            Rectangle::from_corners(
                                [w[0].0.min(w[1].0), w[0].1.min(w[1].1)],
                                [w[0].0.max(w[1].0), w[0].1.max(w[1].1)],
                            ),
                            i,
                        ));
                    }
                }
            }
        }
        let mut poi_categories: Vec<String> = features
            .iter()
            .filter_map(|f| match &f.category {
                Category::Poi(c) => Some(c.clone()),
                _ => None,
            })
            .collect();
        poi_categories.sort();
        poi_categories.dedup();
        let layer = Self {
            features,
            by_id,
            polygons: RTree::bulk_load(poly_entries),
            roads: RTree::bulk_load(road_entries),
            poi_categories,
        };
        layer.validate_tracts()?;
        Ok(layer)
    }

    fn validate_tracts(&self) -> Result<()> {
        for (i, f) in self.features.iter().enumerate() {
            if f.category != Category::Tract {
                continue;
            }
            let p = f.polygon().ok_or_else(|| Error::Layer(format!("tract {} is not a polygon", f.id)))?;
            let b = p.bbox();
            let env = AABB::from_corners([b.min_lon, b.min_lat], [b.max_lon, b.max_lat]);
            for e in self.polygons.locate_in_envelope_intersecting(&env) {
                let j = e.data;
                if j <= i || self.features[j].category != Category::Tract {
                    continue;
                }
                if p.interiors_overlap(self.features[j].polygon().expect("indexed as polygon")) {
                    return Err(Error::Layer(format!("tracts {} and {} overlap", f.id, self.features[j].id)));
                }
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FeatureRecord =
                serde_json::from_str(&line).map_err(|e| Error::Layer(format!("line {}: {e}", n + 1)))?;
            records.push(rec);
        }
        Self::from_records(records)
    }

    pub fn write_records<W: Write>(mut w: W, records: &[FeatureRecord]) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn get(&self, id: &str) -> Option<&Feature> {
        self.by_id.get(id).map(|&i| &self.features[i])
    }

    pub fn of_category<'a>(&'a self, cat: &'a Category) -> impl Iterator<Item = &'a Feature> + 'a {
        self.features.iter().filter(move |f| &f.category == cat)
    }

    pub fn pois(&self) -> impl Iterator<Item = &Feature> {
        self.features.iter().filter(|f| matches!(f.category, Category::Poi(_)))
    }

    pub fn poi_categories(&self) -> &[String] {
        &self.poi_categories
    }

    /// Polygon features of `want` containing the point (on-edge counts).
    fn containing(&self, lat: f64, lon: f64, want: impl Fn(&Category) -> bool) -> Vec<&Feature> {
        self.polygons
            .locate_in_envelope_intersecting(&AABB::from_point([lon, lat]))
            .map(|e| &self.features[e.data])
            .filter(|f| want(&f.category))
            .filter(|f| f.polygon().is_some_and(|p| p.contains(lon, lat)))
            .collect()
    }

    /// Tract containing the point; shared-edge ties go to the smallest id.
    pub fn tract_at(&self, lat: f64, lon: f64) -> Option<&Feature> {
        self.containing(lat, lon, |c| *c == Category::Tract).into_iter().min_by(|a, b| a.id.cmp(&b.id))
    }

    pub fn region_at(&self, lat: f64, lon: f64) -> Option<&Feature> {
        self.containing(lat, lon, |c| *c == Category::Region).into_iter().min_by(|a, b| a.id.cmp(&b.id))
    }

    fn smallest<'a>(found: Vec<&'a Feature>) -> Option<&'a Feature> {
        found.into_iter().min_by(|a, b| {
            let (pa, pb) = (a.polygon().unwrap(), b.polygon().unwrap());
            pa.area_m2().total_cmp(&pb.area_m2()).then(a.id.cmp(&b.id))
        })
    }

    /// Smallest-area POI containing the point.
    pub fn poi_at(&self, lat: f64, lon: f64) -> Option<&Feature> {
        Self::smallest(self.containing(lat, lon, |c| matches!(c, Category::Poi(_))))
    }

    pub fn hub_at(&self, lat: f64, lon: f64) -> Option<&Feature> {
        Self::smallest(self.containing(lat, lon, |c| *c == Category::Hub))
    }

    /// Whether any road polyline lies within `radius_m` of the point.
    pub fn near_road(&self, lat: f64, lon: f64, radius_m: f64) -> bool {
        let dlat = radius_m / M_PER_DEG * 1.01;
        let dlon = dlat / lat.to_radians().cos().max(1e-6);
        let env = AABB::from_corners([lon - dlon, lat - dlat], [lon + dlon, lat + dlat]);
        self.roads.locate_in_envelope_intersecting(&env).any(|e| match &self.features[e.data].geometry {
            Geometry::Polyline(chain) => distance_to_polyline_m(lat, lon, chain) <= radius_m,
            Geometry::Polygon(_) => false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, kind: &str, cat: &str, parent: Option<&str>, coords: &[[f64; 2]]) -> FeatureRecord {
        FeatureRecord {
            id: id.into(),
            kind: kind.into(),
            category: cat.into(),
            parent_id: parent.map(str::to_string),
            coords: coords.to_vec(),
            attrs: BTreeMap::new(),
        }
    }

    fn square(x0: f64, y0: f64, s: f64) -> Vec<[f64; 2]> {
        vec![[x0, y0], [x0 + s, y0], [x0 + s, y0 + s], [x0, y0 + s], [x0, y0]]
    }

    #[test]
    fn parses_jsonl_and_resolves_tracts() {
        let text = r#"{"id":"T2","kind":"polygon","category":"tract","coords":[[1,0],[2,0],[2,1],[1,1],[1,0]],"attrs":{"tract_income":52000}}
{"id":"T1","kind":"polygon","category":"tract","coords":[[0,0],[1,0],[1,1],[0,1],[0,0]]}
"#;
        let layer = GeoLayer::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(layer.tract_at(0.5, 0.5).unwrap().id, "T1");
        assert_eq!(layer.tract_at(0.5, 1.0).unwrap().id, "T1");
        assert_eq!(layer.tract_at(0.5, 1.5).unwrap().id, "T2");
        assert!(layer.tract_at(5.0, 5.0).is_none());
        assert_eq!(layer.get("T2").unwrap().attr_f64("tract_income"), Some(52000.0));
    }

    #[test]
    fn overlapping_tracts_are_fatal() {
        let recs = vec![
            rec("A", "polygon", "tract", None, &square(0.0, 0.0, 1.0)),
            rec("B", "polygon", "tract", None, &square(0.5, 0.5, 1.0)),
        ];
        assert!(matches!(GeoLayer::from_records(recs), Err(Error::Layer(_))));
    }

    #[test]
    fn invalid_ring_and_parent() {
        let open = rec("A", "polygon", "tract", None, &[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
        assert!(GeoLayer::from_records(vec![open]).is_err());
        let orphan = rec("p", "polygon", "poi:food", Some("nope"), &square(0.0, 0.0, 1.0));
        assert!(GeoLayer::from_records(vec![orphan]).is_err());
    }

    #[test]
    fn smallest_poi_wins() {
        let recs = vec![
            rec("mall", "polygon", "hub", None, &square(0.0, 0.0, 0.01)),
            rec("big", "polygon", "poi:food", None, &square(0.0, 0.0, 0.005)),
            rec("small", "polygon", "poi:food", Some("mall"), &square(0.001, 0.001, 0.001)),
        ];
        let layer = GeoLayer::from_records(recs).unwrap();
        assert_eq!(layer.poi_at(0.0015, 0.0015).unwrap().id, "small");
        assert_eq!(layer.poi_at(0.004, 0.004).unwrap().id, "big");
        assert_eq!(layer.hub_at(0.004, 0.004).unwrap().id, "mall");
        assert_eq!(layer.poi_categories(), &["food".to_string()]);
    }
}
