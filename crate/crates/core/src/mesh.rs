//! Triangle meshes: OFF/OBJ ingestion, unit normalization, rigid rotation
//! and area-weighted surface sampling.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Mat3, Vec3};

/// Default cap on triangles per mesh after fan triangulation.
pub const DEFAULT_FACE_CAP: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("malformed record on line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("vertex index {index} out of range for {vertex_count} vertices")]
    IndexOutOfRange { index: i64, vertex_count: usize },
    #[error("non-finite coordinate on vertex {vertex}")]
    NonFiniteCoordinate { vertex: usize },
    #[error("{faces} triangles exceed the cap of {cap}")]
    FaceCountExceedsCap { faces: usize, cap: usize },
    #[error("degenerate mesh: {0}")]
    DegenerateMesh(&'static str),
    #[error("invalid range: {0}")]
    InvalidRange(String),
}

pub type Result<T> = std::result::Result<T, MeshError>;

/// Indexed triangle mesh with cached unit face normals.
///
/// Zero-area faces are kept; their cached normal is the zero vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMesh", into = "RawMesh")]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    face_normals: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
struct RawMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

impl TryFrom<RawMesh> for TriangleMesh {
    type Error = MeshError;
    fn try_from(raw: RawMesh) -> Result<Self> {
        TriangleMesh::new(raw.vertices, raw.faces)
    }
}

impl From<TriangleMesh> for RawMesh {
    fn from(m: TriangleMesh) -> Self {
        RawMesh { vertices: m.vertices, faces: m.faces }
    }
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(vertex) = vertices.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(MeshError::NonFiniteCoordinate { vertex });
        }
        for f in &faces {
            for &i in f {
                if i >= vertices.len() {
                    return Err(MeshError::IndexOutOfRange { index: i as i64, vertex_count: vertices.len() });
                }
            }
        }
        let face_normals = faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| vertices[i]);
                geom::normalize(geom::cross(geom::sub(b, a), geom::sub(c, a))).unwrap_or([0.0; 3])
            })
            .collect();
        Ok(Self { vertices, faces, face_normals })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn face_normals(&self) -> &[Vec3] {
        &self.face_normals
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        self.faces[face].map(|i| self.vertices[i])
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.triangle(face);
        0.5 * geom::norm(geom::cross(geom::sub(b, a), geom::sub(c, a)))
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.vertices.len() as f64;
        let mut c = [0.0; 3];
        for v in &self.vertices {
            c = geom::add(c, *v);
        }
        geom::scale(c, 1.0 / n)
    }

    pub fn max_vertex_norm(&self) -> f64 {
        self.vertices.iter().map(|&v| geom::norm(v)).fold(0.0, f64::max)
    }

    fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> Self {
        let vertices = self.vertices.iter().map(|&v| f(v)).collect();
        Self::new(vertices, self.faces.clone()).expect("topology unchanged")
    }
}

/// Points sampled on a mesh surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rotation by `angle_deg` about a unit `axis`; positive angles turn
/// counter-clockwise when viewed from the tip of the axis (right-handed).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidRotation {
    axis: Vec3,
    angle_deg: f64,
}

impl RigidRotation {
    pub fn new(axis: Vec3, angle_deg: f64) -> Result<Self> {
        let axis = geom::normalize(axis).ok_or_else(|| MeshError::InvalidRange("rotation axis is zero".into()))?;
        if !(-180.0..=180.0).contains(&angle_deg) {
            return Err(MeshError::InvalidRange(format!("angle {angle_deg} outside [-180, 180]")));
        }
        Ok(Self { axis, angle_deg })
    }

    pub fn about_y(angle_deg: f64) -> Result<Self> {
        Self::new([0.0, 1.0, 0.0], angle_deg)
    }

    pub fn identity() -> Self {
        Self { axis: [0.0, 1.0, 0.0], angle_deg: 0.0 }
    }

    pub fn axis(&self) -> Vec3 {
        self.axis
    }

    pub fn angle_deg(&self) -> f64 {
        self.angle_deg
    }

    /// Rodrigues rotation matrix.
    pub fn matrix(&self) -> Mat3 {
        let [x, y, z] = self.axis;
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let t = 1.0 - c;
        [
            [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
            [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
            [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
        ]
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        geom::mat_vec(&self.matrix(), v)
    }
}

/// Shapes that can be rigidly rotated about the origin.
pub trait Rotate: Sized {
    fn rotated(&self, rotation: &RigidRotation) -> Self;
}

impl Rotate for TriangleMesh {
    fn rotated(&self, rotation: &RigidRotation) -> Self {
        let m = rotation.matrix();
        self.map_vertices(|v| geom::mat_vec(&m, v))
    }
}

impl Rotate for PointCloud {
    fn rotated(&self, rotation: &RigidRotation) -> Self {
        let m = rotation.matrix();
        PointCloud { points: self.points.iter().map(|&p| geom::mat_vec(&m, p)).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// About the gravity (Y) axis.
    YOnly,
    AnyAxis,
}

/// Draws a rotation: `YOnly` picks an angle uniformly in `±max_angle_deg`
/// about +Y; `AnyAxis` picks a uniform axis on the sphere and an angle
/// uniformly in `[−180, 180]`.
pub fn random_rotation(seed: u64, mode: RotationMode, max_angle_deg: f64) -> Result<RigidRotation> {
    if !(max_angle_deg > 0.0 && max_angle_deg <= 180.0) {
        return Err(MeshError::InvalidRange(format!("max angle {max_angle_deg} not in (0, 180]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        RotationMode::YOnly => {
            let angle = rng.random_range(-max_angle_deg..=max_angle_deg);
            RigidRotation::about_y(angle)
        }
        RotationMode::AnyAxis => {
            let z: f64 = rng.random_range(-1.0..=1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).max(0.0).sqrt();
            let angle = rng.random_range(-180.0..=180.0);
            RigidRotation::new([r * phi.cos(), r * phi.sin(), z], angle)
        }
    }
}

/// Centers the vertex centroid at the origin and scales so the farthest
/// vertex lies on the unit sphere.
pub fn normalize_unit(mesh: &TriangleMesh) -> Result<TriangleMesh> {
    if mesh.vertices.is_empty() {
        return Err(MeshError::DegenerateMesh("mesh has no vertices"));
    }
    let c = mesh.centroid();
    let radius = mesh.vertices.iter().map(|&v| geom::norm(geom::sub(v, c))).fold(0.0, f64::max);
    if radius <= 0.0 {
        return Err(MeshError::DegenerateMesh("all vertices coincide"));
    }
    let inv = 1.0 / radius;
    Ok(mesh.map_vertices(|v| geom::scale(geom::sub(v, c), inv)))
}

/// Area-proportional surface sampling with uniform barycentric coordinates.
pub fn sample_points(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<PointCloud> {
    sample_points_with_faces(mesh, count, seed).map(|(cloud, _)| cloud)
}

/// Like [`sample_points`], also returning the source face of every point.
pub fn sample_points_with_faces(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    if count == 0 {
        return Err(MeshError::InvalidRange("point count must be at least 1".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.face_count());
    let mut total = 0.0;
    for f in 0..mesh.face_count() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(MeshError::DegenerateMesh("total surface area is zero"));
    }
    let last_positive = (0..mesh.face_count()).rev().find(|&f| mesh.face_area(f) > 0.0).expect("positive area");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    let mut sources = Vec::with_capacity(count);
    for _ in 0..count {
        let u = rng.random::<f64>() * total;
        let face = cumulative.partition_point(|&c| c <= u).min(last_positive);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        let [a, b, c] = mesh.triangle(face);
        points.push([
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ]);
        sources.push(face);
    }
    Ok((PointCloud { points }, sources))
}

/// Barycentric coordinates of `p` with respect to triangle `tri`, computed by
/// least squares in the triangle's plane.
pub fn barycentric(p: Vec3, tri: [Vec3; 3]) -> Option<[f64; 3]> {
    let v0 = geom::sub(tri[1], tri[0]);
    let v1 = geom::sub(tri[2], tri[0]);
    let v2 = geom::sub(p, tri[0]);
    let (d00, d01, d11) = (geom::dot(v0, v0), geom::dot(v0, v1), geom::dot(v1, v1));
    let (d20, d21) = (geom::dot(v2, v0), geom::dot(v2, v1));
    let den = d00 * d11 - d01 * d01;
    if den.abs() < f64::EPSILON * d00 * d11 {
        return None;
    }
    let v = (d11 * d20 - d01 * d21) / den;
    let w = (d00 * d21 - d01 * d20) / den;
    Some([1.0 - v - w, v, w])
}

/// Options for mesh file ingestion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    pub face_cap: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { face_cap: DEFAULT_FACE_CAP }
    }
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| MeshError::Malformed { line, reason: format!("bad number {tok:?}") })
}

fn fan(polygon: &[usize], out: &mut Vec<[usize; 3]>) {
    for k in 1..polygon.len() - 1 {
        out.push([polygon[0], polygon[k], polygon[k + 1]]);
    }
}

fn finish(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>, opts: LoadOptions) -> Result<TriangleMesh> {
    if faces.len() > opts.face_cap {
        return Err(MeshError::FaceCountExceedsCap { faces: faces.len(), cap: opts.face_cap });
    }
    TriangleMesh::new(vertices, faces)
}

/// Parses an OFF file. Polygons with more than three corners are
/// fan-triangulated; per-vertex and per-face colour fields are ignored.
pub fn load_off(bytes: &[u8], opts: LoadOptions) -> Result<TriangleMesh> {
    let text = std::str::from_utf8(bytes).map_err(|_| MeshError::MalformedHeader("not UTF-8 text".into()))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, strip_comment(l))).filter(|(_, l)| !l.is_empty());
    let (_, header) = lines.next().ok_or_else(|| MeshError::MalformedHeader("empty file".into()))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| MeshError::MalformedHeader(format!("expected OFF, found {header:?}")))?
        .trim();
    // Some ModelNet files glue the counts onto the header ("OFF490 518 0").
    let counts_line = if rest.is_empty() {
        lines.next().map(|(_, l)| l).ok_or_else(|| MeshError::MalformedHeader("missing counts line".into()))?
    } else {
        rest
    };
    let counts: Vec<usize> = counts_line
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| MeshError::MalformedHeader(format!("bad counts line {counts_line:?}")))?;
    if counts.len() < 2 {
        return Err(MeshError::MalformedHeader(format!("bad counts line {counts_line:?}")));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    for k in 0..nv {
        let (line, l) = lines.next().ok_or(MeshError::Malformed { line: 0, reason: format!("missing vertex {k}") })?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(MeshError::Malformed { line, reason: "vertex needs 3 coordinates".into() });
        }
        let v = [parse_f64(toks[0], line)?, parse_f64(toks[1], line)?, parse_f64(toks[2], line)?];
        if v.iter().any(|c| !c.is_finite()) {
            return Err(MeshError::NonFiniteCoordinate { vertex: k });
        }
        vertices.push(v);
    }
    let mut faces = Vec::with_capacity(nf);
    let mut polygon = Vec::new();
    for k in 0..nf {
        let (line, l) = lines.next().ok_or(MeshError::Malformed { line: 0, reason: format!("missing face {k}") })?;
        let mut toks = l.split_whitespace();
        let n: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or(MeshError::Malformed { line, reason: "bad face arity".into() })?;
        if n < 3 {
            return Err(MeshError::Malformed { line, reason: format!("face with {n} corners") });
        }
        polygon.clear();
        for _ in 0..n {
            let t = toks.next().ok_or(MeshError::Malformed { line, reason: "face truncated".into() })?;
            let idx: i64 = t.parse().map_err(|_| MeshError::Malformed { line, reason: format!("bad index {t:?}") })?;
            if idx < 0 || idx as usize >= nv {
                return Err(MeshError::IndexOutOfRange { index: idx, vertex_count: nv });
            }
            polygon.push(idx as usize);
        }
        fan(&polygon, &mut faces);
    }
    finish(vertices, faces, opts)
}

/// Parses the `v`/`f` records of a Wavefront OBJ file; other records are
/// ignored. Supports `i/t/n` corner syntax and negative (relative) indices.
pub fn load_obj(bytes: &[u8], opts: LoadOptions) -> Result<TriangleMesh> {
    let text = std::str::from_utf8(bytes).map_err(|_| MeshError::MalformedHeader("not UTF-8 text".into()))?;
    let mut vertices = Vec::new();
    let mut polygons: Vec<(usize, Vec<i64>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = strip_comment(raw);
        let mut toks = l.split_whitespace();
        match toks.next() {
            Some("v") => {
                let c: Vec<f64> = toks.take(3).map(|t| parse_f64(t, line)).collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(MeshError::Malformed { line, reason: "vertex needs 3 coordinates".into() });
                }
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(MeshError::NonFiniteCoordinate { vertex: vertices.len() });
                }
                vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let idx: Vec<i64> = toks
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        first.parse::<i64>().map_err(|_| MeshError::Malformed { line, reason: format!("bad index {t:?}") })
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(MeshError::Malformed { line, reason: "face needs 3 corners".into() });
                }
                // negative indices refer to vertices defined so far
                let resolved = idx.iter().map(|&k| if k < 0 { vertices.len() as i64 + k + 1 } else { k }).collect();
                polygons.push((line, resolved));
            }
            _ => {}
        }
    }
    let nv = vertices.len();
    let mut faces = Vec::new();
    for (_, poly) in polygons {
        let zero_based = poly
            .iter()
            .map(|&k| {
                if k < 1 || k as usize > nv {
                    Err(MeshError::IndexOutOfRange { index: k, vertex_count: nv })
                } else {
                    Ok(k as usize - 1)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        fan(&zero_based, &mut faces);
    }
    finish(vertices, faces, opts)
}

/// Serializes a mesh as OFF text. Coordinates use Rust's shortest
/// round-trip float formatting, so parsing the output is lossless.
pub fn write_off(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "OFF\n{} {} 0", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}
