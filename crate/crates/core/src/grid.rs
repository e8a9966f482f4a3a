//! Hierarchical icosahedral sphere mesh.
//!
//! Level 0 is an icosahedron with one vertex on the north pole and one on the
//! south pole; the two rings of five sit at latitude ±atan(1/2), the upper
//! ring starting at longitude 0 and the lower ring offset by 36°. Each level
//! bisects every edge and projects the midpoint onto the unit sphere. New
//! vertices are appended in face order, so the vertices of level `L - 1` are an
//! exact prefix of level `L`.

use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::error::{invalid, Error, Result};

pub const MAX_LEVEL: usize = 5;

const CACHE_MAGIC: &[u8; 4] = b"ICOG";
const CACHE_VERSION: u32 = 1;

pub type Vec3 = [f64; 3];

/// Number of vertices of the level-`level` mesh: `10 * 4^level + 2`.
pub const fn vertex_count(level: usize) -> usize {
    10 * (1 << (2 * level)) + 2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone)]
pub struct IcosahedralGrid {
    level: usize,
    vertices: Vec<LatLon>,
    unit_xyz: Vec<Vec3>,
    area_weights: Vec<f64>,
    /// Index into the level-1 grid; inherited vertices map to themselves and
    /// an edge midpoint maps to the lower-indexed endpoint of its edge.
    /// Empty at level 0.
    parent_map: Vec<usize>,
    faces: Vec<[usize; 3]>,
    neighbors: Vec<Vec<usize>>,
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    scale(a, 1.0 / n)
}

/// Maps any longitude in degrees into `[-180, 180)`.
pub fn normalize_lon(lon: f64) -> f64 {
    let l = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if l >= 180.0 {
        l - 360.0
    } else {
        l
    }
}

pub fn latlon_to_xyz(lat: f64, lon: f64) -> Vec3 {
    let (phi, lam) = (lat.to_radians(), lon.to_radians());
    [phi.cos() * lam.cos(), phi.cos() * lam.sin(), phi.sin()]
}

pub fn xyz_to_latlon(p: Vec3) -> LatLon {
    let lat = p[2].clamp(-1.0, 1.0).asin().to_degrees();
    let lon = if p[0] == 0.0 && p[1] == 0.0 {
        0.0
    } else {
        normalize_lon(p[1].atan2(p[0]).to_degrees())
    };
    LatLon { lat, lon }
}

/// Great-circle angle between two unit vectors in radians, via the chord so it
/// stays accurate for nearly coincident points.
pub fn angular_distance(a: Vec3, b: Vec3) -> f64 {
    let c = dot(sub(a, b), sub(a, b)).sqrt();
    2.0 * (0.5 * c).min(1.0).asin()
}

fn base_icosahedron() -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let ring_lat = 0.5f64.atan().to_degrees();
    let mut v = Vec::with_capacity(12);
    v.push([0.0, 0.0, 1.0]);
    for k in 0..5 {
        v.push(latlon_to_xyz(ring_lat, 72.0 * k as f64));
    }
    for k in 0..5 {
        v.push(latlon_to_xyz(-ring_lat, 36.0 + 72.0 * k as f64));
    }
    v.push([0.0, 0.0, -1.0]);

    let mut faces = Vec::with_capacity(20);
    for k in 0..5 {
        let (u0, u1) = (1 + k, 1 + (k + 1) % 5);
        let (l0, l1) = (6 + k, 6 + (k + 1) % 5);
        faces.push([0, u0, u1]);
        faces.push([u0, l0, u1]);
        faces.push([u1, l0, l1]);
        faces.push([11, l1, l0]);
    }
    // Orient every face counter-clockwise seen from outside.
    for f in &mut faces {
        let n = cross(sub(v[f[1]], v[f[0]]), sub(v[f[2]], v[f[0]]));
        let c = [
            v[f[0]][0] + v[f[1]][0] + v[f[2]][0],
            v[f[0]][1] + v[f[1]][1] + v[f[2]][1],
            v[f[0]][2] + v[f[1]][2] + v[f[2]][2],
        ];
        if dot(n, c) < 0.0 {
            f.swap(1, 2);
        }
    }
    (v, faces)
}

fn subdivide(xyz: &mut Vec<Vec3>, faces: &[[usize; 3]]) -> (Vec<[usize; 3]>, Vec<usize>) {
    let coarse_count = xyz.len();
    let mut parent: Vec<usize> = (0..coarse_count).collect();
    let mut midpoints: HashMap<(usize, usize), usize> = HashMap::with_capacity(faces.len() * 3 / 2);
    let mut midpoint = |a: usize, b: usize, xyz: &mut Vec<Vec3>, parent: &mut Vec<usize>| -> usize {
        let key = (a.min(b), a.max(b));
        *midpoints.entry(key).or_insert_with(|| {
            let (pa, pb) = (xyz[a], xyz[b]);
            xyz.push(normalize([pa[0] + pb[0], pa[1] + pb[1], pa[2] + pb[2]]));
            parent.push(key.0);
            xyz.len() - 1
        })
    };
    let mut out = Vec::with_capacity(faces.len() * 4);
    for &[a, b, c] in faces {
        let ab = midpoint(a, b, xyz, &mut parent);
        let bc = midpoint(b, c, xyz, &mut parent);
        let ca = midpoint(c, a, xyz, &mut parent);
        out.push([a, ab, ca]);
        out.push([b, bc, ab]);
        out.push([c, ca, bc]);
        out.push([ab, bc, ca]);
    }
    (out, parent)
}

/// Builds the level-`level` mesh (0 ≤ level ≤ 5).
pub fn build_grid(level: usize) -> Result<IcosahedralGrid> {
    if level > MAX_LEVEL {
        return Err(invalid(format!("grid level {level} outside 0..={MAX_LEVEL}")));
    }
    let (mut xyz, mut faces) = base_icosahedron();
    let mut parent_map = Vec::new();
    for _ in 0..level {
        let (f, p) = subdivide(&mut xyz, &faces);
        faces = f;
        parent_map = p;
    }
    debug_assert_eq!(xyz.len(), vertex_count(level));

    let mut neighbors = vec![Vec::new(); xyz.len()];
    for &[a, b, c] in &faces {
        for (u, v) in [(a, b), (b, c), (c, a)] {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
    }
    for n in &mut neighbors {
        n.sort_unstable();
        n.dedup();
    }

    let vertices = xyz.iter().map(|&p| xyz_to_latlon(p)).collect();
    let mut grid = IcosahedralGrid {
        level,
        vertices,
        unit_xyz: xyz,
        area_weights: Vec::new(),
        parent_map,
        faces,
        neighbors,
    };
    grid.area_weights = compute_area_weights(&grid);
    Ok(grid)
}

/// Solid angle of the spherical triangle `(a, b, c)`, signed by orientation.
fn triangle_solid_angle(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let num = dot(a, cross(b, c));
    let den = 1.0 + dot(a, b) + dot(b, c) + dot(c, a);
    2.0 * num.atan2(den)
}

/// Spherical-Voronoi cell areas of every vertex, normalized to sum to 1.
///
/// The faces of the mesh are its convex hull and hence its spherical Delaunay
/// triangulation, so each Voronoi cell is the polygon through the
/// circumcenters of the faces around the vertex.
pub fn compute_area_weights(grid: &IcosahedralGrid) -> Vec<f64> {
    let xyz = &grid.unit_xyz;
    let centers: Vec<Vec3> = grid
        .faces
        .iter()
        .map(|&[a, b, c]| normalize(cross(sub(xyz[b], xyz[a]), sub(xyz[c], xyz[a]))))
        .collect();
    let mut incident = vec![Vec::with_capacity(6); xyz.len()];
    for (fi, f) in grid.faces.iter().enumerate() {
        for &v in f {
            incident[v].push(fi);
        }
    }

    let areas: Vec<f64> = incident
        .iter()
        .enumerate()
        .map(|(v, fs)| {
            let p = xyz[v];
            let helper = if p[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
            let e1 = normalize(cross(helper, p));
            let e2 = cross(p, e1);
            let mut ring: Vec<(f64, Vec3)> = fs
                .iter()
                .map(|&f| {
                    let c = centers[f];
                    (dot(c, e2).atan2(dot(c, e1)), c)
                })
                .collect();
            ring.sort_by(|a, b| a.0.total_cmp(&b.0));
            (0..ring.len())
                .map(|i| triangle_solid_angle(p, ring[i].1, ring[(i + 1) % ring.len()].1))
                .sum()
        })
        .collect();
    let total: f64 = areas.iter().sum();
    areas.iter().map(|a| a / total).collect()
}

impl IcosahedralGrid {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertices(&self) -> &[LatLon] {
        &self.vertices
    }

    pub fn unit_xyz(&self) -> &[Vec3] {
        &self.unit_xyz
    }

    pub fn area_weights(&self) -> &[f64] {
        &self.area_weights
    }

    pub fn parent_map(&self) -> &[usize] {
        &self.parent_map
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    /// One pass of neighbor averaging: each vertex becomes the plain mean of
    /// itself and its mesh neighbors.
    pub fn smooth_once(&self, field: &[f64]) -> Vec<f64> {
        assert_eq!(field.len(), self.len(), "field length must match the grid");
        self.neighbors
            .iter()
            .enumerate()
            .map(|(v, nb)| {
                let s: f64 = field[v] + nb.iter().map(|&u| field[u]).sum::<f64>();
                s / (nb.len() + 1) as f64
            })
            .collect()
    }

    /// Area-weighted mean of `field` over the vertices selected by `mask`.
    /// Returns `None` when the mask is empty.
    pub fn masked_mean(&self, field: &[f64], mask: &[bool]) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for ((&f, &m), &w) in field.iter().zip(mask).zip(&self.area_weights) {
            if m {
                num += w * f;
                den += w;
            }
        }
        (den > 0.0).then(|| num / den)
    }

    pub fn global_mean(&self, field: &[f64]) -> f64 {
        field.iter().zip(&self.area_weights).map(|(f, w)| f * w).sum()
    }

    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w_header(&mut w, self.level as u32, self.len() as u32)?;
        let coords: Vec<f64> = self.vertices.iter().flat_map(|v| [v.lat, v.lon]).collect();
        binio::write_f64s(&mut w, &coords)?;
        binio::write_f64s(&mut w, &self.area_weights)?;
        std::io::Write::flush(&mut w)?;
        Ok(())
    }
}

fn w_header<W: std::io::Write>(w: &mut W, level: u32, count: u32) -> Result<()> {
    w.write_all(CACHE_MAGIC)?;
    binio::write_u32(w, CACHE_VERSION)?;
    binio::write_u32(w, level)?;
    binio::write_u32(w, count)
}

/// Contents of a grid cache file.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCache {
    pub level: usize,
    pub vertices: Vec<LatLon>,
    pub area_weights: Vec<f64>,
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<GridCache> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(CACHE_MAGIC)?;
    let version = r.u32("version")?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("grid cache version {version}, expected {CACHE_VERSION}")));
    }
    let level = r.u32("level")? as usize;
    let count = r.u32("count")? as usize;
    if level > MAX_LEVEL || count != vertex_count(level) {
        return Err(Error::CorruptFile(format!("grid cache level {level} with {count} vertices")));
    }
    let coords = r.f64s(2 * count, "coordinates")?;
    let area_weights = r.f64s(count, "area weights")?;
    r.finish()?;
    let vertices = coords.chunks_exact(2).map(|c| LatLon { lat: c[0], lon: c[1] }).collect();
    Ok(GridCache { level, vertices, area_weights })
}

/// Averages a level-`L` field onto level `L - 1`: each coarse vertex receives
/// the area-weighted mean of the fine vertices whose parent it is.
pub fn coarsen(field: &[f64], fine: &IcosahedralGrid, coarse: &IcosahedralGrid) -> Result<Vec<f64>> {
    if fine.level == 0 || coarse.level + 1 != fine.level {
        return Err(invalid(format!(
            "cannot coarsen level {} onto level {}",
            fine.level, coarse.level
        )));
    }
    if field.len() != fine.len() {
        return Err(invalid(format!(
            "field has {} values, level {} grid has {}",
            field.len(),
            fine.level,
            fine.len()
        )));
    }
    let mut num = vec![0.0; coarse.len()];
    let mut den = vec![0.0; coarse.len()];
    for ((&p, &f), &w) in fine.parent_map.iter().zip(field).zip(&fine.area_weights) {
        num[p] += w * f;
        den[p] += w;
    }
    Ok(num.iter().zip(&den).map(|(n, d)| n / d).collect())
}

/// All grids from level 0 up to a native level, built once and shared.
#[derive(Debug, Clone)]
pub struct GridHierarchy {
    grids: Vec<IcosahedralGrid>,
}

impl GridHierarchy {
    pub fn new(native_level: usize) -> Result<Self> {
        let grids = (0..=native_level).map(build_grid).collect::<Result<_>>()?;
        Ok(Self { grids })
    }

    pub fn native_level(&self) -> usize {
        self.grids.len() - 1
    }

    pub fn native(&self) -> &IcosahedralGrid {
        self.grids.last().expect("hierarchy has at least level 0")
    }

    pub fn level(&self, level: usize) -> Option<&IcosahedralGrid> {
        self.grids.get(level)
    }

    /// Coarsens a native-level field to `target` by repeated single-level steps.
    pub fn coarsen_to(&self, field: &[f64], target: usize) -> Result<Vec<f64>> {
        let native = self.native_level();
        if target > native {
            return Err(invalid(format!("level {target} is finer than the native level {native}")));
        }
        let mut cur = field.to_vec();
        for l in (target + 1..=native).rev() {
            cur = coarsen(&cur, &self.grids[l], &self.grids[l - 1])?;
        }
        Ok(cur)
    }
}

/// A regular latitude-longitude field in row-major `[lat][lon]` order.
#[derive(Debug, Clone)]
pub struct LatLonField {
    pub lat: Vec<f64>,
    pub lon: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMethod {
    Nearest,
    InverseDistance,
}

const IDW_NEIGHBORS: usize = 4;
const EXACT_HIT_RAD: f64 = 1e-9;

fn strictly_monotone(axis: &[f64]) -> bool {
    let inc = axis.windows(2).all(|w| w[1] > w[0]);
    let dec = axis.windows(2).all(|w| w[1] < w[0]);
    inc || dec
}

/// Samples a lat-lon field at every grid vertex.
///
/// Candidate cells are exact: along any latitude row the great-circle distance
/// grows with the longitude offset, so the `k` nearest cells overall are among
/// the `k` nearest longitudes of each row.
pub fn resample_latlon(field: &LatLonField, grid: &IcosahedralGrid, method: ResampleMethod) -> Result<Vec<f64>> {
    let (nlat, nlon) = (field.lat.len(), field.lon.len());
    if nlat == 0 || nlon == 0 || field.values.is_empty() {
        return Err(invalid("empty lat-lon field"));
    }
    if field.values.len() != nlat * nlon {
        return Err(invalid(format!(
            "field has {} values for a {nlat}x{nlon} axis pair",
            field.values.len()
        )));
    }
    if !strictly_monotone(&field.lat) || !strictly_monotone(&field.lon) {
        return Err(invalid("lat/lon axes must be strictly monotone"));
    }
    if field.values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("field contains non-finite values"));
    }
    let lons: Vec<f64> = field.lon.iter().map(|&l| normalize_lon(l)).collect();
    let centers: Vec<Vec3> = field
        .lat
        .iter()
        .flat_map(|&la| lons.iter().map(move |&lo| latlon_to_xyz(la, lo)))
        .collect();
    let per_row = match method {
        ResampleMethod::Nearest => 2,
        ResampleMethod::InverseDistance => IDW_NEIGHBORS,
    }
    .min(nlon);
    let keep = match method {
        ResampleMethod::Nearest => 1,
        ResampleMethod::InverseDistance => IDW_NEIGHBORS.min(nlat * nlon),
    };

    let mut lon_order: Vec<(f64, usize)> = Vec::with_capacity(nlon);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(keep + 1);
    let out = grid
        .vertices
        .iter()
        .zip(&grid.unit_xyz)
        .map(|(ll, &p)| {
            lon_order.clear();
            lon_order.extend(lons.iter().enumerate().map(|(j, &lo)| {
                let d = (ll.lon - lo).rem_euclid(360.0);
                (d.min(360.0 - d), j)
            }));
            lon_order.select_nth_unstable_by(per_row - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            best.clear();
            for i in 0..nlat {
                for &(_, j) in &lon_order[..per_row] {
                    let idx = i * nlon + j;
                    let d = dot(p, centers[idx]);
                    // Larger dot product is nearer; ties go to the lower flat index.
                    let pos = best
                        .iter()
                        .position(|&(bd, bi)| d > bd || (d == bd && idx < bi))
                        .unwrap_or(best.len());
                    if pos < keep {
                        best.insert(pos, (d, idx));
                        best.truncate(keep);
                    }
                }
            }
            match method {
                ResampleMethod::Nearest => field.values[best[0].1],
                ResampleMethod::InverseDistance => {
                    let (mut num, mut den) = (0.0, 0.0);
                    for &(_, idx) in &best {
                        let d = angular_distance(p, centers[idx]);
                        if d < EXACT_HIT_RAD {
                            return field.values[idx];
                        }
                        num += field.values[idx] / d;
                        den += 1.0 / d;
                    }
                    num / den
                }
            }
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLonBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl LatLonBox {
    pub const fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Self {
        Self { lat_min, lat_max, lon_min, lon_max }
    }

    /// Latitude bounds are inclusive; the longitude interval is half-open
    /// `[lon_min, lon_max)` walking eastward, so a box and its longitudinal
    /// complement partition the sphere.
    pub fn contains(&self, p: LatLon) -> bool {
        if p.lat < self.lat_min || p.lat > self.lat_max {
            return false;
        }
        let span = self.lon_max - self.lon_min;
        if span >= 360.0 {
            return true;
        }
        let width = span.rem_euclid(360.0);
        (p.lon - self.lon_min).rem_euclid(360.0) < width
    }

    fn validate(&self) -> Result<()> {
        let vals = [self.lat_min, self.lat_max, self.lon_min, self.lon_max];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(invalid("box bounds must be finite"));
        }
        if !(self.lat_min < self.lat_max) {
            return Err(invalid(format!(
                "box lat_min {} must be below lat_max {}",
                self.lat_min, self.lat_max
            )));
        }
        if self.lat_min < -90.0 || self.lat_max > 90.0 {
            return Err(invalid("box latitudes must lie in [-90, 90]"));
        }
        Ok(())
    }
}

/// Where an intervention is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionSpec {
    Named { name: String },
    LatlonBox {
        #[serde(rename = "box")]
        bounds: LatLonBox,
    },
    /// Ordered `(lat, lon)` vertices. The region is the side to the left of the
    /// direction of travel, i.e. the ring is counter-clockwise seen from
    /// outside the sphere.
    Polygon { vertices: Vec<LatLon> },
}

impl RegionSpec {
    pub fn named(name: &str) -> Self {
        RegionSpec::Named { name: name.to_string() }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RegionSpec::Named { name } if name.is_empty() => Err(invalid("region name is empty")),
            RegionSpec::Named { .. } => Ok(()),
            RegionSpec::LatlonBox { bounds } => bounds.validate(),
            RegionSpec::Polygon { vertices } => {
                if vertices.len() < 3 {
                    return Err(invalid(format!("polygon needs at least 3 vertices, got {}", vertices.len())));
                }
                if vertices.iter().any(|v| !v.lat.is_finite() || !v.lon.is_finite() || v.lat.abs() > 90.0) {
                    return Err(invalid("polygon vertices must be finite with |lat| <= 90"));
                }
                Ok(())
            }
        }
    }
}

/// Named intervention regions and their boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCatalog {
    pub regions: Vec<(String, LatLonBox)>,
}

impl Default for RegionCatalog {
    /// Conventional stratocumulus-deck boxes.
    fn default() -> Self {
        Self {
            regions: vec![
                ("NEP".into(), LatLonBox::new(15.0, 35.0, -140.0, -110.0)),
                ("SEP".into(), LatLonBox::new(-30.0, 0.0, -110.0, -70.0)),
                ("SEA".into(), LatLonBox::new(-30.0, 0.0, -15.0, 15.0)),
            ],
        }
    }
}

impl RegionCatalog {
    pub fn get(&self, name: &str) -> Option<LatLonBox> {
        self.regions.iter().find(|(n, _)| n == name).map(|(_, b)| *b)
    }
}

fn on_arc(p: Vec3, a: Vec3, b: Vec3) -> bool {
    let n = cross(a, b);
    let nn = dot(n, n).sqrt();
    if nn == 0.0 {
        return false;
    }
    let n = scale(n, 1.0 / nn);
    dot(p, n).abs() < 1e-12 && dot(cross(a, p), n) >= -1e-12 && dot(cross(p, b), n) >= -1e-12
}

/// Winding of the ring around `p` measured in the tangent plane at `p`;
/// `+2π` for points left of a counter-clockwise ring. Points on an edge count
/// as inside.
fn polygon_contains(p: Vec3, ring: &[Vec3]) -> bool {
    let mut total = 0.0;
    for (i, &a) in ring.iter().enumerate() {
        let b = ring[(i + 1) % ring.len()];
        if on_arc(p, a, b) {
            return true;
        }
        let ta = sub(a, scale(p, dot(a, p)));
        let tb = sub(b, scale(p, dot(b, p)));
        total += dot(p, cross(ta, tb)).atan2(dot(ta, tb));
    }
    total > std::f64::consts::PI
}

/// Per-vertex membership of `region`, resolving names against the default catalog.
pub fn region_mask(grid: &IcosahedralGrid, region: &RegionSpec) -> Result<Vec<bool>> {
    region_mask_with(grid, region, &RegionCatalog::default())
}

pub fn region_mask_with(grid: &IcosahedralGrid, region: &RegionSpec, catalog: &RegionCatalog) -> Result<Vec<bool>> {
    region.validate()?;
    match region {
        RegionSpec::Named { name } => {
            let b = catalog
                .get(name)
                .ok_or_else(|| Error::NotFound(format!("unknown named region `{name}`")))?;
            Ok(grid.vertices.iter().map(|&v| b.contains(v)).collect())
        }
        RegionSpec::LatlonBox { bounds } => Ok(grid.vertices.iter().map(|&v| bounds.contains(v)).collect()),
        RegionSpec::Polygon { vertices } => {
            let ring: Vec<Vec3> = vertices.iter().map(|v| latlon_to_xyz(v.lat, v.lon)).collect();
            Ok(grid.unit_xyz.iter().map(|&p| polygon_contains(p, &ring)).collect())
        }
    }
}
