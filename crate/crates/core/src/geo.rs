//! Geodesy and planar geometry helpers.
//!
//! All reported distances are haversine meters on a spherical earth. Planar
//! work (polygon containment, segment distance) happens in degrees or in a
//! local equirectangular frame, and every index built here only generates
//! candidates: callers confirm with the exact haversine test.

use std::collections::HashMap;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Meters per degree of great-circle arc.
pub const M_PER_DEG: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

/// Great-circle distance in meters. Symmetric bit-for-bit in its arguments.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let p1 = lat1.to_radians();
    let p2 = lat2.to_radians();
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp * 0.5).sin().powi(2) + p1.cos() * p2.cos() * (dl * 0.5).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.min(1.0).sqrt().asin()
}

/// Local equirectangular frame centred on a reference point, in meters.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    pub lat0: f64,
    pub lon0: f64,
    cos0: f64,
}

impl LocalFrame {
    pub fn new(lat0: f64, lon0: f64) -> Self {
        Self { lat0, lon0, cos0: lat0.to_radians().cos() }
    }

    pub fn to_xy(&self, lat: f64, lon: f64) -> (f64, f64) {
        let x = (lon - self.lon0).to_radians() * EARTH_RADIUS_M * self.cos0;
        let y = (lat - self.lat0).to_radians() * EARTH_RADIUS_M;
        (x, y)
    }

    pub fn to_latlon(&self, x: f64, y: f64) -> (f64, f64) {
        let lat = self.lat0 + (y / EARTH_RADIUS_M).to_degrees();
        let lon = self.lon0 + (x / (EARTH_RADIUS_M * self.cos0)).to_degrees();
        (lat, lon)
    }
}

/// Where a point sits relative to a polygon ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Containment {
    Inside,
    Boundary,
    Outside,
}

const EDGE_EPS: f64 = 1e-12;

/// A simple polygon with a closed ring of `(lon, lat)` vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    ring: Vec<(f64, f64)>,
    bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl BBox {
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.min_lon - EDGE_EPS
            && lon <= self.max_lon + EDGE_EPS
            && lat >= self.min_lat - EDGE_EPS
            && lat <= self.max_lat + EDGE_EPS
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.min_lon <= other.max_lon
            && other.min_lon <= self.max_lon
            && self.min_lat <= other.max_lat
            && other.min_lat <= self.max_lat
    }
}

fn on_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt().max(1.0);
    if cross.abs() > EDGE_EPS * len {
        return false;
    }
    p.0 >= a.0.min(b.0) - EDGE_EPS
        && p.0 <= a.0.max(b.0) + EDGE_EPS
        && p.1 >= a.1.min(b.1) - EDGE_EPS
        && p.1 <= a.1.max(b.1) + EDGE_EPS
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

/// Segments cross at a single interior point of both.
fn proper_crossing(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

impl Polygon {
    /// Builds a polygon from a closed ring, rejecting rings that are open,
    /// too short, zero-area or self-intersecting.
    pub fn new(ring: Vec<(f64, f64)>) -> Result<Self, String> {
        if ring.len() < 4 {
            return Err(format!("ring has {} vertices, need at least 4", ring.len()));
        }
        if ring.first() != ring.last() {
            return Err("ring is not closed".into());
        }
        if ring.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err("ring has non-finite coordinates".into());
        }
        let n = ring.len() - 1;
        for i in 0..n {
            for j in (i + 1)..n {
                // adjacent edges share a vertex
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                if proper_crossing(ring[i], ring[i + 1], ring[j], ring[j + 1]) {
                    return Err(format!("ring self-intersects at edges {i} and {j}"));
                }
            }
        }
        let bbox = ring.iter().fold(
            BBox {
                min_lon: f64::INFINITY,
                min_lat: f64::INFINITY,
                max_lon: f64::NEG_INFINITY,
                max_lat: f64::NEG_INFINITY,
            },
            |b, &(x, y)| BBox {
                min_lon: b.min_lon.min(x),
                min_lat: b.min_lat.min(y),
                max_lon: b.max_lon.max(x),
                max_lat: b.max_lat.max(y),
            },
        );
        let poly = Self { ring, bbox };
        if poly.signed_area_deg2().abs() <= 0.0 {
            return Err("ring has zero area".into());
        }
        Ok(poly)
    }

    /// Axis-aligned rectangle in degrees.
    pub fn rect(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Self {
        Self::new(vec![
            (min_lon, min_lat),
            (max_lon, min_lat),
            (max_lon, max_lat),
            (min_lon, max_lat),
            (min_lon, min_lat),
        ])
        .expect("rectangle is a valid ring")
    }

    pub fn ring(&self) -> &[(f64, f64)] {
        &self.ring
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    fn signed_area_deg2(&self) -> f64 {
        self.ring.windows(2).map(|w| w[0].0 * w[1].1 - w[1].0 * w[0].1).sum::<f64>() * 0.5
    }

    /// Approximate area in square meters (local equirectangular scaling).
    pub fn area_m2(&self) -> f64 {
        let lat_mid = 0.5 * (self.bbox.min_lat + self.bbox.max_lat);
        self.signed_area_deg2().abs() * M_PER_DEG * M_PER_DEG * lat_mid.to_radians().cos()
    }

    /// Vertex average of the ring (closing vertex excluded).
    pub fn centroid(&self) -> (f64, f64) {
        let n = (self.ring.len() - 1) as f64;
        let (sx, sy) = self.ring[..self.ring.len() - 1].iter().fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x, sy + y));
        (sx / n, sy / n)
    }

    /// Ray casting; points on an edge report `Boundary`.
    pub fn classify(&self, lon: f64, lat: f64) -> Containment {
        if !self.bbox.contains(lon, lat) {
            return Containment::Outside;
        }
        let p = (lon, lat);
        let mut inside = false;
        for w in self.ring.windows(2) {
            let (a, b) = (w[0], w[1]);
            if on_segment(p, a, b) {
                return Containment::Boundary;
            }
            if (a.1 > lat) != (b.1 > lat) {
                let x_cross = a.0 + (lat - a.1) * (b.0 - a.0) / (b.1 - a.1);
                if lon < x_cross {
                    inside = !inside;
                }
            }
        }
        if inside {
            Containment::Inside
        } else {
            Containment::Outside
        }
    }

    /// Containment with on-edge counted as inside.
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        self.classify(lon, lat) != Containment::Outside
    }

    /// True when the interiors of the two polygons intersect.
    pub fn interiors_overlap(&self, other: &Polygon) -> bool {
        if !self.bbox.intersects(&other.bbox) {
            return false;
        }
        for e in self.ring.windows(2) {
            for f in other.ring.windows(2) {
                if proper_crossing(e[0], e[1], f[0], f[1]) {
                    return true;
                }
            }
        }
        let strictly_in = |p: &Polygon, q: &Polygon| {
            q.ring.iter().any(|&(x, y)| p.classify(x, y) == Containment::Inside)
                || q.interior_point().is_some_and(|(x, y)| p.classify(x, y) == Containment::Inside)
        };
        strictly_in(self, other) || strictly_in(other, self)
    }

    /// Some point strictly inside the polygon, if one is found cheaply.
    pub fn interior_point(&self) -> Option<(f64, f64)> {
        let c = self.centroid();
        if self.classify(c.0, c.1) == Containment::Inside {
            return Some(c);
        }
        // midpoint of a horizontal chord through the bbox centre
        let lat = 0.5 * (self.bbox.min_lat + self.bbox.max_lat);
        let mut xs: Vec<f64> = self
            .ring
            .windows(2)
            .filter(|w| (w[0].1 > lat) != (w[1].1 > lat))
            .map(|w| w[0].0 + (lat - w[0].1) * (w[1].0 - w[0].0) / (w[1].1 - w[0].1))
            .collect();
        xs.sort_by(f64::total_cmp);
        xs.chunks(2)
            .filter(|c| c.len() == 2)
            .map(|c| (0.5 * (c[0] + c[1]), lat))
            .find(|&(x, y)| self.classify(x, y) == Containment::Inside)
    }

    /// Uniform rejection sampling inside the polygon's bounding box.
    pub fn sample_uniform<R: rand::Rng>(&self, rng: &mut R, max_tries: usize) -> Option<(f64, f64)> {
        for _ in 0..max_tries {
            let lon = rng.gen_range(self.bbox.min_lon..=self.bbox.max_lon);
            let lat = rng.gen_range(self.bbox.min_lat..=self.bbox.max_lat);
            if self.contains(lon, lat) {
                return Some((lon, lat));
            }
        }
        None
    }
}

/// Minimum haversine distance (meters) from a point to a polyline.
///
/// The closest point on each segment is found in a local frame centred on
/// the query point, then measured exactly.
pub fn distance_to_polyline_m(lat: f64, lon: f64, chain: &[(f64, f64)]) -> f64 {
    let frame = LocalFrame::new(lat, lon);
    let mut best = f64::INFINITY;
    if chain.len() == 1 {
        return haversine_m(lat, lon, chain[0].1, chain[0].0);
    }
    for w in chain.windows(2) {
        let (ax, ay) = frame.to_xy(w[0].1, w[0].0);
        let (bx, by) = frame.to_xy(w[1].1, w[1].0);
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let s = if len2 > 0.0 { ((-ax * dx - ay * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (clat, clon) = frame.to_latlon(ax + s * dx, ay + s * dy);
        best = best.min(haversine_m(lat, lon, clat, clon));
    }
    best
}

/// Uniform grid over lat/lon whose cells are at least `radius_m` wide in
/// great-circle terms, so every pair closer than the radius falls in the
/// same or an adjacent cell. Longitude cells wrap around the antimeridian.
#[derive(Debug, Clone)]
pub struct RadiusGrid {
    lat_cell_deg: f64,
    lon_cell_deg: f64,
    n_lon: i64,
    order: Vec<u32>,
    cells: HashMap<(i64, i64), (u32, u32)>,
}

impl RadiusGrid {
    /// `max_abs_lat` must bound the latitude of every point that will be
    /// inserted or queried.
    pub fn new(points: &[(f64, f64)], radius_m: f64, max_abs_lat: f64) -> Self {
        let ang = radius_m / EARTH_RADIUS_M;
        let lat_cell_deg = (ang.to_degrees() * (1.0 + 1e-9)).max(1e-12);
        let cos_max = max_abs_lat.abs().min(90.0).to_radians().cos();
        let s = (ang * 0.5).sin();
        let lon_needed =
            if cos_max <= s { 360.0 } else { (2.0 * (s / cos_max).min(1.0).asin()).to_degrees() * (1.0 + 1e-9) };
        let n_lon = ((360.0 / lon_needed).floor() as i64).max(1);
        let lon_cell_deg = 360.0 / n_lon as f64;
        let mut grid = Self { lat_cell_deg, lon_cell_deg, n_lon, order: Vec::new(), cells: HashMap::new() };
        let mut keyed: Vec<((i64, i64), u32)> =
            points.iter().enumerate().map(|(i, &(lat, lon))| (grid.cell_of(lat, lon), i as u32)).collect();
        keyed.sort_unstable();
        let mut start = 0usize;
        while start < keyed.len() {
            let key = keyed[start].0;
            let mut end = start;
            while end < keyed.len() && keyed[end].0 == key {
                end += 1;
            }
            grid.cells.insert(key, (start as u32, end as u32));
            start = end;
        }
        grid.order = keyed.into_iter().map(|(_, i)| i).collect();
        grid
    }

    fn cell_of(&self, lat: f64, lon: f64) -> (i64, i64) {
        let iy = (lat / self.lat_cell_deg).floor() as i64;
        let ix = (((lon + 180.0) / self.lon_cell_deg).floor() as i64).rem_euclid(self.n_lon);
        (iy, ix)
    }

    /// Indices of points in the 3x3 block of cells around the query.
    pub fn candidates(&self, lat: f64, lon: f64, out: &mut Vec<u32>) {
        out.clear();
        let (iy, ix) = self.cell_of(lat, lon);
        let mut xs = [ix - 1, ix, ix + 1].map(|x| x.rem_euclid(self.n_lon));
        xs.sort_unstable();
        let mut prev = None;
        for &x in &xs {
            if prev == Some(x) {
                continue;
            }
            prev = Some(x);
            for y in iy - 1..=iy + 1 {
                if let Some(&(s, e)) = self.cells.get(&(y, x)) {
                    out.extend_from_slice(&self.order[s as usize..e as usize]);
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}
