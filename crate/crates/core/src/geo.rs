//! Geodesic primitives, point-in-polygon tests, and region lookup.
//!
//! Everything here treats the Earth as a sphere of radius 6 371 000 m and
//! polygon interiors by the even-odd rule in plain lat/lon space. Points on
//! a ring boundary count as inside, so geo-tags sitting exactly on a region
//! line are never dropped.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters used by all great-circle math.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// A WGS84 coordinate. `lat` in [-90, 90], `lon` in [-180, 180).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::Validation(format!(
                "non-finite coordinate ({lat}, {lon})"
            )));
        }
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..180.0).contains(&lon) {
            return Err(Error::Validation(format!(
                "coordinate out of range ({lat}, {lon})"
            )));
        }
        Ok(GeoPoint { lat, lon })
    }
}

/// Great-circle distance in meters (haversine formula).
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// A polygon as ordered rings: the first ring is the outer boundary, the
/// rest are holes. Rings close implicitly (last vertex connects to first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub rings: Vec<Vec<GeoPoint>>,
}

impl Polygon {
    pub fn new(rings: Vec<Vec<GeoPoint>>) -> Result<Self> {
        let poly = Polygon { rings };
        poly.validate()?;
        Ok(poly)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rings.is_empty() {
            return Err(Error::MalformedGeometry("polygon has no rings".into()));
        }
        for (i, ring) in self.rings.iter().enumerate() {
            if ring.len() < 3 {
                return Err(Error::MalformedGeometry(format!(
                    "ring {i} has {} vertices, need at least 3",
                    ring.len()
                )));
            }
        }
        if self.self_intersects() {
            log::warn!("polygon has self-intersecting rings; containment may be surprising");
        }
        Ok(())
    }

    /// (min_lat, min_lon, max_lat, max_lon) over all rings.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for ring in &self.rings {
            for p in ring {
                b.0 = b.0.min(p.lat);
                b.1 = b.1.min(p.lon);
                b.2 = b.2.max(p.lat);
                b.3 = b.3.max(p.lon);
            }
        }
        b
    }

    fn self_intersects(&self) -> bool {
        // O(E^2) proper-crossing scan; adjacent segments sharing a vertex are skipped.
        for ring in &self.rings {
            let n = ring.len();
            for i in 0..n {
                let (a1, a2) = (ring[i], ring[(i + 1) % n]);
                for j in (i + 2)..n {
                    if i == 0 && j == n - 1 {
                        continue;
                    }
                    let (b1, b2) = (ring[j], ring[(j + 1) % n]);
                    if segments_cross(a1, a2, b1, b2) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

fn orient(a: GeoPoint, b: GeoPoint, c: GeoPoint) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn segments_cross(a1: GeoPoint, a2: GeoPoint, b1: GeoPoint, b2: GeoPoint) -> bool {
    let d1 = orient(b1, b2, a1);
    let d2 = orient(b1, b2, a2);
    let d3 = orient(a1, a2, b1);
    let d4 = orient(a1, a2, b2);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

/// True if `p` lies exactly on the segment from `a` to `b`.
fn on_segment(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> bool {
    if orient(a, b, p) != 0.0 {
        return false;
    }
    p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
        && p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
}

/// Even-odd containment test in lat/lon space. Points on any ring boundary
/// (outer or hole) count as inside.
pub fn point_in_polygon(p: GeoPoint, poly: &Polygon) -> Result<bool> {
    poly.validate()?;
    for ring in &poly.rings {
        let n = ring.len();
        for i in 0..n {
            if on_segment(p, ring[i], ring[(i + 1) % n]) {
                return Ok(true);
            }
        }
    }
    let mut inside = false;
    for ring in &poly.rings {
        let n = ring.len();
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (ring[i], ring[j]);
            // Half-open rule on the latitude interval avoids double-counting
            // crossings at vertices.
            if (a.lat > p.lat) != (b.lat > p.lat) {
                let x = (b.lon - a.lon) * (p.lat - a.lat) / (b.lat - a.lat) + a.lon;
                if p.lon < x {
                    inside = !inside;
                }
            }
            j = i;
        }
    }
    Ok(inside)
}

/// Anything with an id and a polygon footprint that `locate` can search.
pub trait Region {
    fn region_id(&self) -> &str;
    fn geometry(&self) -> &Polygon;
}

/// A county-scale model vertex: geometry plus the human population and
/// vector carrying capacity that drive the patch dynamics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Patch {
    pub id: String,
    pub name: String,
    pub geometry: Polygon,
    pub human_population: f64,
    pub vector_capacity: f64,
}

impl Patch {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if !self.human_population.is_finite() || self.human_population <= 0.0 {
            return Err(Error::Validation(format!(
                "patch {}: human_population must be > 0, got {}",
                self.id, self.human_population
            )));
        }
        if self.vector_capacity < 0.0 {
            return Err(Error::Validation(format!(
                "patch {}: vector_capacity must be >= 0, got {}",
                self.id, self.vector_capacity
            )));
        }
        Ok(())
    }
}

impl Region for Patch {
    fn region_id(&self) -> &str {
        &self.id
    }
    fn geometry(&self) -> &Polygon {
        &self.geometry
    }
}

/// A square-mile-scale region used for the high-resolution risk stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Neighborhood {
    pub id: String,
    pub name: String,
    pub geometry: Polygon,
}

impl Region for Neighborhood {
    fn region_id(&self) -> &str {
        &self.id
    }
    fn geometry(&self) -> &Polygon {
        &self.geometry
    }
}

/// Id of the containing region, or `None`. Regions are assumed disjoint;
/// if a point falls in several, the lexicographically smallest id wins and
/// a warning is logged.
pub fn locate<R: Region>(p: GeoPoint, regions: &[R]) -> Result<Option<&str>> {
    let mut hits: Vec<&str> = Vec::new();
    for r in regions {
        let (lo_lat, lo_lon, hi_lat, hi_lon) = r.geometry().bbox();
        if p.lat < lo_lat || p.lat > hi_lat || p.lon < lo_lon || p.lon > hi_lon {
            continue;
        }
        if point_in_polygon(p, r.geometry())? {
            hits.push(r.region_id());
        }
    }
    if hits.len() > 1 {
        hits.sort_unstable();
        log::warn!(
            "point ({}, {}) falls in {} overlapping regions; keeping {}",
            p.lat,
            p.lon,
            hits.len(),
            hits[0]
        );
    }
    Ok(hits.first().copied())
}

/// Precomputed bounding boxes for repeated lookups over a fixed region set.
pub struct RegionLocator<'r, R: Region> {
    regions: &'r [R],
    bboxes: Vec<(f64, f64, f64, f64)>,
}

impl<'r, R: Region> RegionLocator<'r, R> {
    pub fn new(regions: &'r [R]) -> Self {
        let bboxes = regions.iter().map(|r| r.geometry().bbox()).collect();
        RegionLocator { regions, bboxes }
    }

    pub fn locate(&self, p: GeoPoint) -> Result<Option<&'r str>> {
        let mut hits: Vec<&str> = Vec::new();
        for (r, &(lo_lat, lo_lon, hi_lat, hi_lon)) in self.regions.iter().zip(&self.bboxes) {
            if p.lat < lo_lat || p.lat > hi_lat || p.lon < lo_lon || p.lon > hi_lon {
                continue;
            }
            if point_in_polygon(p, r.geometry())? {
                hits.push(r.region_id());
            }
        }
        if hits.len() > 1 {
            hits.sort_unstable();
            log::warn!("overlapping regions at ({}, {}); keeping {}", p.lat, p.lon, hits[0]);
        }
        Ok(hits.first().copied())
    }
}

// ---------------------------------------------------------------------------
// GeoJSON loading
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct GjCollection {
    #[serde(rename = "type")]
    kind: String,
    features: Vec<GjFeature>,
}

#[derive(Deserialize)]
struct GjFeature {
    geometry: GjGeometry,
    properties: BTreeMap<String, serde_json::Value>,
}

#[derive(Deserialize)]
struct GjGeometry {
    #[serde(rename = "type")]
    kind: String,
    coordinates: serde_json::Value,
}

fn ring_from_coords(raw: &serde_json::Value) -> Result<Vec<GeoPoint>> {
    let arr = raw
        .as_array()
        .ok_or_else(|| Error::Format("ring is not an array".into()))?;
    let mut ring = Vec::with_capacity(arr.len());
    for pos in arr {
        let pair = pos
            .as_array()
            .ok_or_else(|| Error::Format("position is not an array".into()))?;
        if pair.len() < 2 {
            return Err(Error::Format("position needs [lon, lat]".into()));
        }
        let lon = pair[0].as_f64().ok_or_else(|| Error::Format("lon not a number".into()))?;
        let lat = pair[1].as_f64().ok_or_else(|| Error::Format("lat not a number".into()))?;
        ring.push(GeoPoint::new(lat, lon)?);
    }
    // GeoJSON rings repeat the first vertex; our rings close implicitly.
    if ring.len() >= 2 && ring.first() == ring.last() {
        ring.pop();
    }
    Ok(ring)
}

fn polygon_from_geometry(geom: &GjGeometry) -> Result<Polygon> {
    if geom.kind != "Polygon" {
        return Err(Error::Format(format!(
            "unsupported geometry type {:?} (only Polygon)",
            geom.kind
        )));
    }
    let rings_raw = geom
        .coordinates
        .as_array()
        .ok_or_else(|| Error::Format("coordinates is not an array".into()))?;
    let mut rings = Vec::with_capacity(rings_raw.len());
    for r in rings_raw {
        rings.push(ring_from_coords(r)?);
    }
    Polygon::new(rings)
}

fn prop_str(props: &BTreeMap<String, serde_json::Value>, key: &str) -> Result<String> {
    props
        .get(key)
        .and_then(|v| v.as_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::Format(format!("feature missing string property {key:?}")))
}

fn prop_f64(props: &BTreeMap<String, serde_json::Value>, key: &str) -> Result<f64> {
    props
        .get(key)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Format(format!("feature missing numeric property {key:?}")))
}

fn load_collection(path: &Path) -> Result<GjCollection> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let coll: GjCollection =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if coll.kind != "FeatureCollection" {
        return Err(Error::Format(format!(
            "{}: expected FeatureCollection, got {:?}",
            path.display(),
            coll.kind
        )));
    }
    Ok(coll)
}

/// Load patches from a GeoJSON FeatureCollection. Required feature
/// properties: `id`, `name`, `population`; `vector_capacity` defaults to
/// 1.5x the population when absent.
pub fn load_patches(path: impl AsRef<Path>) -> Result<Vec<Patch>> {
    let coll = load_collection(path.as_ref())?;
    let mut patches = Vec::with_capacity(coll.features.len());
    for f in &coll.features {
        let human_population = prop_f64(&f.properties, "population")?;
        let vector_capacity = match f.properties.get("vector_capacity") {
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::Format("vector_capacity is not a number".into()))?,
            None => 1.5 * human_population,
        };
        let patch = Patch {
            id: prop_str(&f.properties, "id")?,
            name: prop_str(&f.properties, "name")?,
            geometry: polygon_from_geometry(&f.geometry)?,
            human_population,
            vector_capacity,
        };
        patch.validate()?;
        patches.push(patch);
    }
    Ok(patches)
}

/// Load neighborhoods from a GeoJSON FeatureCollection. Required feature
/// properties: `id`, `name`.
pub fn load_neighborhoods(path: impl AsRef<Path>) -> Result<Vec<Neighborhood>> {
    let coll = load_collection(path.as_ref())?;
    let mut out = Vec::with_capacity(coll.features.len());
    for f in &coll.features {
        out.push(Neighborhood {
            id: prop_str(&f.properties, "id")?,
            name: prop_str(&f.properties, "name")?,
            geometry: polygon_from_geometry(&f.geometry)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn unit_square() -> Polygon {
        Polygon::new(vec![vec![pt(0.0, 0.0), pt(0.0, 1.0), pt(1.0, 1.0), pt(1.0, 0.0)]]).unwrap()
    }

    #[test]
    fn haversine_identity() {
        let a = pt(25.7617, -80.1918);
        assert_eq!(haversine_m(a, a), 0.0);
    }

    #[test]
    fn haversine_miami_san_juan() {
        let d = haversine_m(pt(25.7617, -80.1918), pt(18.4655, -66.1057));
        let expected = 1.67e6;
        assert!((d - expected).abs() / expected < 0.01, "got {d}");
    }

    #[test]
    fn haversine_small_arc() {
        // Pure meridian arc: R * dphi.
        let d = haversine_m(pt(0.0, 0.0), pt(0.001, 0.0));
        let expected = EARTH_RADIUS_M * 0.001_f64.to_radians();
        assert!((d - expected).abs() / expected < 0.001, "got {d} vs {expected}");
    }

    #[test]
    fn pip_centroid_and_outside() {
        let sq = unit_square();
        assert!(point_in_polygon(pt(0.5, 0.5), &sq).unwrap());
        assert!(!point_in_polygon(pt(2.0, 2.0), &sq).unwrap());
    }

    #[test]
    fn pip_boundary_counts_as_inside() {
        let sq = unit_square();
        assert!(point_in_polygon(pt(0.0, 0.5), &sq).unwrap());
        assert!(point_in_polygon(pt(0.0, 0.0), &sq).unwrap());
    }

    #[test]
    fn pip_hole_excluded() {
        let poly = Polygon::new(vec![
            vec![pt(0.0, 0.0), pt(0.0, 4.0), pt(4.0, 4.0), pt(4.0, 0.0)],
            vec![pt(1.0, 1.0), pt(1.0, 3.0), pt(3.0, 3.0), pt(3.0, 1.0)],
        ])
        .unwrap();
        assert!(!point_in_polygon(pt(2.0, 2.0), &poly).unwrap());
        assert!(point_in_polygon(pt(0.5, 0.5), &poly).unwrap());
        // On the hole boundary: inside by the documented rule.
        assert!(point_in_polygon(pt(1.0, 2.0), &poly).unwrap());
    }

    #[test]
    fn pip_degenerate_ring_rejected() {
        let bad = Polygon {
            rings: vec![vec![pt(0.0, 0.0), pt(1.0, 1.0)]],
        };
        assert!(matches!(
            point_in_polygon(pt(0.5, 0.5), &bad),
            Err(Error::MalformedGeometry(_))
        ));
    }

    /// Independent even-odd oracle: count ray crossings along +lon with a
    /// different edge-walk than the implementation.
    fn pip_oracle(p: GeoPoint, poly: &Polygon) -> bool {
        for ring in &poly.rings {
            let n = ring.len();
            for i in 0..n {
                if on_segment(p, ring[i], ring[(i + 1) % n]) {
                    return true;
                }
            }
        }
        let mut crossings = 0usize;
        for ring in &poly.rings {
            let n = ring.len();
            for i in 0..n {
                let a = ring[i];
                let b = ring[(i + 1) % n];
                let (lo, hi) = if a.lat < b.lat { (a, b) } else { (b, a) };
                if p.lat >= lo.lat && p.lat < hi.lat {
                    let t = (p.lat - lo.lat) / (hi.lat - lo.lat);
                    let lon_at = lo.lon + t * (hi.lon - lo.lon);
                    if lon_at > p.lon {
                        crossings += 1;
                    }
                }
            }
        }
        crossings % 2 == 1
    }

    #[test]
    fn pip_matches_bruteforce_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        // Concave polygon plus a hole.
        let poly = Polygon::new(vec![
            vec![
                pt(0.0, 0.0),
                pt(0.0, 6.0),
                pt(3.0, 3.0),
                pt(6.0, 6.0),
                pt(6.0, 0.0),
            ],
            vec![pt(1.0, 1.0), pt(1.0, 2.0), pt(2.0, 2.0), pt(2.0, 1.0)],
        ])
        .unwrap();
        for _ in 0..100 {
            let p = pt(rng.gen_range(-1.0..7.0), rng.gen_range(-1.0..7.0));
            assert_eq!(
                point_in_polygon(p, &poly).unwrap(),
                pip_oracle(p, &poly),
                "disagreement at {p:?}"
            );
        }
    }

    #[test]
    fn locate_basic_and_overlap() {
        let a = Patch {
            id: "a".into(),
            name: "A".into(),
            geometry: unit_square(),
            human_population: 10.0,
            vector_capacity: 0.0,
        };
        let mut b = a.clone();
        b.id = "b".into();
        b.geometry =
            Polygon::new(vec![vec![pt(0.0, 2.0), pt(0.0, 3.0), pt(1.0, 3.0), pt(1.0, 2.0)]])
                .unwrap();
        let regions = vec![a.clone(), b];
        assert_eq!(locate(pt(0.5, 0.5), &regions).unwrap(), Some("a"));
        assert_eq!(locate(pt(0.5, 2.5), &regions).unwrap(), Some("b"));
        assert_eq!(locate(pt(5.0, 5.0), &regions).unwrap(), None);

        // Overlapping copies: smallest id wins.
        let mut c = a.clone();
        c.id = "c".into();
        let overlapping = vec![c, a];
        assert_eq!(locate(pt(0.5, 0.5), &overlapping).unwrap(), Some("a"));
    }

    #[test]
    fn geojson_patches_load_with_vector_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zones.geojson");
        std::fs::write(
            &path,
            r#"{"type":"FeatureCollection","features":[
                {"type":"Feature","properties":{"id":"a","name":"A","population":1000,"vector_capacity":900},
                 "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1],[0,0]]]}},
                {"type":"Feature","properties":{"id":"b","name":"B","population":2000},
                 "geometry":{"type":"Polygon","coordinates":[[[2,0],[3,0],[3,1],[2,1],[2,0]]]}}
            ]}"#,
        )
        .unwrap();
        let patches = load_patches(&path).unwrap();
        assert_eq!(patches.len(), 2);
        assert_eq!(patches[0].vector_capacity, 900.0);
        assert_eq!(patches[1].vector_capacity, 3000.0); // 1.5x population default
        // GeoJSON closes rings explicitly; loading drops the repeat vertex.
        assert_eq!(patches[0].geometry.rings[0].len(), 4);

        std::fs::write(
            &path,
            r#"{"type":"FeatureCollection","features":[
                {"type":"Feature","properties":{"id":"a","name":"A","population":1000},
                 "geometry":{"type":"Point","coordinates":[0,0]}}
            ]}"#,
        )
        .unwrap();
        assert!(matches!(load_patches(&path), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn haversine_symmetric_and_triangle(
            lat1 in -80.0f64..80.0, lon1 in -179.0f64..179.0,
            lat2 in -80.0f64..80.0, lon2 in -179.0f64..179.0,
            lat3 in -80.0f64..80.0, lon3 in -179.0f64..179.0,
        ) {
            let a = pt(lat1, lon1);
            let b = pt(lat2, lon2);
            let c = pt(lat3, lon3);
            prop_assert_eq!(haversine_m(a, b), haversine_m(b, a));
            let (ab, bc, ac) = (haversine_m(a, b), haversine_m(b, c), haversine_m(a, c));
            prop_assert!(ac <= ab + bc + 1e-6 * (ab + bc).max(1.0));
        }

        #[test]
        fn pip_proptest_oracle(plat in -0.5f64..6.5, plon in -0.5f64..6.5) {
            let poly = Polygon::new(vec![vec![
                pt(0.0, 0.0), pt(0.0, 6.0), pt(3.0, 2.5), pt(6.0, 6.0), pt(6.0, 0.0),
            ]]).unwrap();
            let p = pt(plat, plon);
            prop_assert_eq!(point_in_polygon(p, &poly).unwrap(), pip_oracle(p, &poly));
        }
    }
}
