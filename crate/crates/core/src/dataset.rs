//! Labeled shape collections: synthetic primitives, ModelNet-style OFF
//! directories, manifests and checkpoint files.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::camera::{circular_config, CameraPose};
use crate::geom::Vec3;
use crate::mesh::{self, load_off, normalize_unit, random_rotation, write_off, LoadOptions, MeshError, Rotate, RotationMode, TriangleMesh};
use crate::render::{hard_silhouette, RenderError, RenderSettings};
use crate::train::{AdamState, Checkpoint, OptimizerStates};

/// Generated primitives stay at or below this many triangles.
pub const SYNTHETIC_FACE_CAP: usize = 500;
/// Minimum fraction of differing silhouette pixels between class exemplars.
pub const SILHOUETTE_MIN_DIFFERENCE: f64 = 0.05;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MVTNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error("classes {a} and {b} differ in only {fraction:.4} of silhouette pixels")]
    SilhouetteCollision { a: String, b: String, fraction: f64 },
    #[error("class directory missing: {0}")]
    MissingClass(String),
    #[error("checkpoint version mismatch: file has {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledShape {
    pub id: String,
    pub mesh: TriangleMesh,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub shapes: Vec<LabeledShape>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> Vec<&LabeledShape> {
        self.shapes.iter().filter(|s| s.split == split).collect()
    }

    /// A dataset holding only one split.
    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            shapes: self.shapes.iter().filter(|s| s.split == split).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }
}

/// Closed parameter interval `[lo, hi]`.
pub type Interval = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Primitive {
    Box { size_x: Interval, size_y: Interval, size_z: Interval },
    /// Icosphere scaled along Y by `squash`.
    Sphere { squash: Interval, subdivisions: u32 },
    Cylinder { radius: Interval, height: Interval, segments: usize },
    Cone { radius: Interval, height: Interval, segments: usize },
    Torus { major: Interval, minor: Interval, major_segments: usize, minor_segments: usize },
}

impl Primitive {
    fn intervals(&self) -> Vec<Interval> {
        match self {
            Primitive::Box { size_x, size_y, size_z } => vec![*size_x, *size_y, *size_z],
            Primitive::Sphere { squash, .. } => vec![*squash],
            Primitive::Cylinder { radius, height, .. } | Primitive::Cone { radius, height, .. } => vec![*radius, *height],
            Primitive::Torus { major, minor, .. } => vec![*major, *minor],
        }
    }

    fn face_count(&self) -> usize {
        match self {
            Primitive::Box { .. } => 12,
            Primitive::Sphere { subdivisions, .. } => 20 * 4usize.pow(*subdivisions),
            Primitive::Cylinder { segments, .. } => 4 * segments,
            Primitive::Cone { segments, .. } => 2 * segments,
            Primitive::Torus { major_segments, minor_segments, .. } => 2 * major_segments * minor_segments,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        for [lo, hi] in self.intervals() {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(format!("interval [{lo}, {hi}] must be positive and ordered"));
            }
        }
        let segs_ok = match self {
            Primitive::Cylinder { segments, .. } | Primitive::Cone { segments, .. } => *segments >= 3,
            Primitive::Torus { major_segments, minor_segments, major, minor } => {
                *major_segments >= 3 && *minor_segments >= 3 && minor[1] < major[0]
            }
            Primitive::Sphere { subdivisions, .. } => *subdivisions <= 3,
            Primitive::Box { .. } => true,
        };
        if !segs_ok {
            return Err("tessellation out of range (or torus tube wider than its ring)".into());
        }
        if self.face_count() > SYNTHETIC_FACE_CAP {
            return Err(format!("{} faces exceed the synthetic cap {SYNTHETIC_FACE_CAP}", self.face_count()));
        }
        Ok(())
    }

    /// Builds the primitive with every interval parameter at fraction `t[i]`
    /// of its range.
    fn build(&self, t: &[f64]) -> Result<TriangleMesh> {
        let pick = |i: usize| {
            let [lo, hi] = self.intervals()[i];
            lo + (hi - lo) * t[i]
        };
        let mesh = match self {
            Primitive::Box { .. } => box_mesh([pick(0), pick(1), pick(2)]),
            Primitive::Sphere { subdivisions, .. } => {
                let s = icosphere(*subdivisions);
                let squash = pick(0);
                let v = s.vertices().iter().map(|v| [v[0], v[1] * squash, v[2]]).collect();
                Ok(TriangleMesh::new(v, s.faces().to_vec())?)
            }
            Primitive::Cylinder { segments, .. } => cylinder(pick(0), pick(0), pick(1), *segments),
            Primitive::Cone { segments, .. } => cone(pick(0), pick(1), *segments),
            Primitive::Torus { major_segments, minor_segments, .. } => torus(pick(0), pick(1), *major_segments, *minor_segments),
        }?;
        Ok(mesh)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub primitive: Primitive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassSpec>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    #[serde(default)]
    pub rotation: Option<RotationMode>,
    #[serde(default = "default_rotation_angle")]
    pub rotation_max_deg: f64,
}

fn default_rotation_angle() -> f64 {
    180.0
}

/// The five stock classes: box, sphere, cylinder, cone, torus.
pub fn stock_classes() -> Vec<ClassSpec> {
    let c = |name: &str, primitive| ClassSpec { name: name.into(), primitive };
    vec![
        c("box", Primitive::Box { size_x: [0.8, 1.2], size_y: [0.3, 0.5], size_z: [0.5, 0.8] }),
        c("sphere", Primitive::Sphere { squash: [0.85, 1.0], subdivisions: 1 }),
        c("cylinder", Primitive::Cylinder { radius: [0.25, 0.35], height: [1.6, 2.0], segments: 12 }),
        c("cone", Primitive::Cone { radius: [0.6, 0.8], height: [1.0, 1.3], segments: 12 }),
        c("torus", Primitive::Torus { major: [0.8, 0.9], minor: [0.2, 0.3], major_segments: 12, minor_segments: 6 }),
    ]
}

impl SyntheticSpec {
    /// Five classes, 40 train and 20 test shapes each.
    pub fn benchmark(seed: u64) -> Self {
        Self { classes: stock_classes(), train_per_class: 40, test_per_class: 20, seed, rotation: None, rotation_max_deg: 180.0 }
    }

    /// The first `classes` stock classes with `train` training shapes each.
    pub fn small(classes: usize, train: usize, test: usize, seed: u64) -> Self {
        Self {
            classes: stock_classes().into_iter().take(classes).collect(),
            train_per_class: train,
            test_per_class: test,
            seed,
            rotation: None,
            rotation_max_deg: 180.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DatasetError::SpecInvalid(m));
        if self.classes.len() < 2 {
            return bad("need at least two classes".into());
        }
        if self.train_per_class == 0 && self.test_per_class == 0 {
            return bad("counts must not both be zero".into());
        }
        let names: BTreeSet<_> = self.classes.iter().map(|c| &c.name).collect();
        if names.len() != self.classes.len() || self.classes.iter().any(|c| c.name.is_empty() || c.name.contains(['/', '\\'])) {
            return bad("class names must be unique, nonempty path components".into());
        }
        for c in &self.classes {
            c.primitive.validate().or_else(|e| bad(format!("class {}: {e}", c.name)))?;
        }
        if self.rotation.is_some() && !(self.rotation_max_deg > 0.0 && self.rotation_max_deg <= 180.0) {
            return bad(format!("rotation angle {} not in (0, 180]", self.rotation_max_deg));
        }
        Ok(())
    }
}

/// Every pair of class exemplars (primitives at mid-range parameters) must
/// differ in at least 5% of hard-silhouette pixels over the four circular
/// 32×32 views.
pub fn silhouette_self_check(classes: &[ClassSpec]) -> Result<()> {
    let settings = RenderSettings::default();
    let views = circular_config(4, 30.0, 2.2).expect("four views");
    let mut sils = Vec::with_capacity(classes.len());
    for c in classes {
        let mesh = normalize_unit(&c.primitive.build(&[0.5; 3])?)?;
        let mut pixels = Vec::new();
        for (a, e) in views.angles() {
            let pose = CameraPose::new(a, e, views.distance).expect("valid pose");
            pixels.extend(hard_silhouette(&mesh, &pose, &settings)?.data);
        }
        sils.push(pixels);
    }
    for i in 0..classes.len() {
        for j in 0..i {
            let diff = sils[i].iter().zip(&sils[j]).filter(|(a, b)| a != b).count();
            let fraction = diff as f64 / sils[i].len() as f64;
            if fraction < SILHOUETTE_MIN_DIFFERENCE {
                return Err(DatasetError::SilhouetteCollision { a: classes[j].name.clone(), b: classes[i].name.clone(), fraction });
            }
        }
    }
    Ok(())
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    silhouette_self_check(&spec.classes)?;
    let mut jobs = Vec::new();
    for (label, _) in spec.classes.iter().enumerate() {
        for (split, count) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
            for k in 0..count {
                jobs.push((label, split, k));
            }
        }
    }
    let shapes = jobs
        .par_iter()
        .map(|&(label, split, k)| {
            let class = &spec.classes[label];
            let split_tag = if split == Split::Train { 0 } else { 1 };
            let stream = crate::derive_seed(spec.seed, ((label as u64) << 40) | (split_tag << 32) | k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let t: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            let mut mesh = normalize_unit(&class.primitive.build(&t)?)?;
            if let Some(mode) = spec.rotation {
                mesh = mesh.rotated(&random_rotation(rng.random(), mode, spec.rotation_max_deg)?);
            }
            let id = format!("{}_{}_{:04}", class.name, split.dir_name(), k);
            Ok(LabeledShape { id, mesh, label, split })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { class_names: spec.classes.iter().map(|c| c.name.clone()).collect(), shapes })
}

fn box_mesh(size: Vec3) -> Result<TriangleMesh> {
    let h = size.map(|s| s / 2.0);
    let mut v = Vec::with_capacity(8);
    for i in 0..8 {
        let sx = if i & 1 == 0 { -h[0] } else { h[0] };
        let sy = if i & 2 == 0 { -h[1] } else { h[1] };
        let sz = if i & 4 == 0 { -h[2] } else { h[2] };
        v.push([sx, sy, sz]);
    }
    let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    let f = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
    Ok(TriangleMesh::new(v, f)?)
}

/// Unit icosphere after `level` midpoint subdivisions.
pub fn icosphere(level: u32) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = vec![
        [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
        [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
        [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
    ];
    let mut f: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    let unit = |p: Vec3| crate::geom::normalize(p).expect("nonzero");
    v.iter_mut().for_each(|p| *p = unit(*p));
    for _ in 0..level {
        let mut cache = std::collections::HashMap::new();
        let mut mid = |a: usize, b: usize, v: &mut Vec<Vec3>| {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(unit(crate::geom::scale(crate::geom::add(v[a], v[b]), 0.5)));
                v.len() - 1
            })
        };
        let mut next = Vec::with_capacity(f.len() * 4);
        for &[a, b, c] in &f {
            let (ab, bc, ca) = (mid(a, b, &mut v), mid(b, c, &mut v), mid(c, a, &mut v));
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = next;
    }
    TriangleMesh::new(v, f).expect("icosphere is valid")
}

/// Frustum between radius `r0` at y = −h/2 and `r1` at y = +h/2, capped.
fn cylinder(r0: f64, r1: f64, height: f64, segments: usize) -> Result<TriangleMesh> {
    let n = segments;
    let mut v = Vec::with_capacity(2 * n + 2);
    for (r, y) in [(r0, -height / 2.0), (r1, height / 2.0)] {
        for k in 0..n {
            let a = TAU * k as f64 / n as f64;
            v.push([r * a.cos(), y, r * a.sin()]);
        }
    }
    v.push([0.0, -height / 2.0, 0.0]);
    v.push([0.0, height / 2.0, 0.0]);
    let (bot, top) = (2 * n, 2 * n + 1);
    let mut f = Vec::with_capacity(4 * n);
    for k in 0..n {
        let k1 = (k + 1) % n;
        f.push([k, k1, n + k1]);
        f.push([k, n + k1, n + k]);
        f.push([bot, k1, k]);
        f.push([top, n + k, n + k1]);
    }
    Ok(TriangleMesh::new(v, f)?)
}

fn cone(radius: f64, height: f64, segments: usize) -> Result<TriangleMesh> {
    let n = segments;
    let mut v: Vec<Vec3> = (0..n)
        .map(|k| {
            let a = TAU * k as f64 / n as f64;
            [radius * a.cos(), -height / 2.0, radius * a.sin()]
        })
        .collect();
    v.push([0.0, height / 2.0, 0.0]);
    v.push([0.0, -height / 2.0, 0.0]);
    let (apex, base) = (n, n + 1);
    let mut f = Vec::with_capacity(2 * n);
    for k in 0..n {
        let k1 = (k + 1) % n;
        f.push([k, apex, k1]);
        f.push([base, k, k1]);
    }
    Ok(TriangleMesh::new(v, f)?)
}

/// Torus around +Y; genus one, so `V − E + F = 0`.
fn torus(major: f64, minor: f64, nu: usize, nv: usize) -> Result<TriangleMesh> {
    let mut v = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        let u = TAU * i as f64 / nu as f64;
        for j in 0..nv {
            let w = TAU * j as f64 / nv as f64;
            let r = major + minor * w.cos();
            v.push([r * u.cos(), minor * w.sin(), r * u.sin()]);
        }
    }
    let idx = |i: usize, j: usize| (i % nu) * nv + (j % nv);
    let mut f = Vec::with_capacity(2 * nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            f.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            f.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    Ok(TriangleMesh::new(v, f)?)
}

/// Files that failed to load, with reasons.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportReport {
    pub accepted: Vec<PathBuf>,
    pub rejected: Vec<(PathBuf, String)>,
}

/// Reads `root/<class>/<train|test>/*.off`. With `class_names = None` every
/// subdirectory of `root` is a class (sorted by name).
pub fn import_modelnet_off(root: &Path, class_names: Option<&[String]>, opts: LoadOptions) -> Result<(Dataset, ImportReport)> {
    let names: Vec<String> = match class_names {
        Some(n) => n.to_vec(),
        None => {
            let mut n: Vec<String> = fs::read_dir(root)
                .map_err(io_err(root))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .filter_map(|e| e.file_name().into_string().ok())
                .collect();
            n.sort();
            n
        }
    };
    let mut shapes = Vec::new();
    let mut report = ImportReport::default();
    for (label, name) in names.iter().enumerate() {
        let class_dir = root.join(name);
        if !class_dir.is_dir() {
            return Err(DatasetError::MissingClass(name.clone()));
        }
        for split in [Split::Train, Split::Test] {
            let dir = class_dir.join(split.dir_name());
            let Ok(entries) = fs::read_dir(&dir) else { continue };
            let mut files: Vec<PathBuf> = entries
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("off")))
                .collect();
            files.sort();
            for path in files {
                let loaded = fs::read(&path)
                    .map_err(|e| e.to_string())
                    .and_then(|b| load_off(&b, opts).map_err(|e| e.to_string()))
                    .and_then(|m| normalize_unit(&m).map_err(|e| e.to_string()));
                match loaded {
                    Ok(mesh) => {
                        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        shapes.push(LabeledShape { id, mesh, label, split });
                        report.accepted.push(path);
                    }
                    Err(reason) => report.rejected.push((path, reason)),
                }
            }
        }
    }
    Ok((Dataset { class_names: names, shapes }, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub path: PathBuf,
    pub faces: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub shapes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `dir/<class>/<split>/<id>.off` for every shape plus `manifest.json`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.shapes {
        let rel = PathBuf::from(&dataset.class_names[s.label]).join(s.split.dir_name()).join(format!("{}.off", s.id));
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, write_off(&s.mesh)).map_err(io_err(&path))?;
        entries.push(ManifestEntry { id: s.id.clone(), label: s.label, split: s.split, path: rel, faces: s.mesh.face_count() });
    }
    let manifest = Manifest { class_names: dataset.class_names.clone(), shapes: entries };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Loads a directory written by [`write_dataset`]. Meshes are taken as
/// stored; OFF output is lossless so they match what was written.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    let mut shapes = Vec::with_capacity(manifest.shapes.len());
    for e in manifest.shapes {
        if e.label >= manifest.class_names.len() {
            return Err(DatasetError::Manifest(format!("label {} out of range for {}", e.label, e.id)));
        }
        let p = dir.join(&e.path);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        let mesh = load_off(&bytes, LoadOptions { face_cap: usize::MAX })?;
        shapes.push(LabeledShape { id: e.id, mesh, label: e.label, split: e.split });
    }
    Ok(Dataset { class_names: manifest.class_names, shapes })
}

/// Container: magic, little-endian u32 version, u64 header length, JSON
/// header, raw little-endian f64 blocks, SHA-256 of everything before it.
pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let blocks: [(&str, &[f64]); 5] = [
        ("params", &ck.params.data),
        ("mvtn_m", &ck.optim.mvtn.m),
        ("mvtn_v", &ck.optim.mvtn.v),
        ("main_m", &ck.optim.main.m),
        ("main_v", &ck.optim.main.v),
    ];
    let header = serde_json::json!({
        "version": CHECKPOINT_VERSION,
        "meta": ck.meta(),
        "blocks": blocks.iter().map(|(n, b)| (n.to_string(), b.len())).collect::<Vec<_>>(),
    });
    let header = serde_json::to_vec(&header).map_err(|e| DatasetError::CorruptFile(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + header.len() + 8 * blocks.iter().map(|b| b.1.len()).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, b) in blocks {
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: &str| DatasetError::CorruptFile(m.to_string());
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        // a version bump is reported as such even though it also breaks the digest
        let header = parse_header(body).ok();
        if let Some(found) = header.map(|h| h.0).filter(|&v| v != CHECKPOINT_VERSION).or((version != CHECKPOINT_VERSION).then_some(version)) {
            return Err(DatasetError::VersionMismatch { found, expected: CHECKPOINT_VERSION });
        }
        return Err(corrupt("checksum mismatch"));
    }
    let (found, header, data_start) = parse_header(body)?;
    if found != CHECKPOINT_VERSION || version != CHECKPOINT_VERSION {
        return Err(DatasetError::VersionMismatch { found: if found != CHECKPOINT_VERSION { found } else { version }, expected: CHECKPOINT_VERSION });
    }
    let blocks: Vec<(String, usize)> =
        serde_json::from_value(header["blocks"].clone()).map_err(|e| DatasetError::CorruptFile(e.to_string()))?;
    let expected: usize = blocks.iter().map(|b| b.1 * 8).sum();
    if body.len() - data_start != expected {
        return Err(corrupt("block lengths disagree with the header"));
    }
    let mut cursor = data_start;
    let mut read = |len: usize| {
        let v: Vec<f64> = body[cursor..cursor + 8 * len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        cursor += 8 * len;
        v
    };
    let mut arrays = std::collections::HashMap::new();
    for (name, len) in &blocks {
        arrays.insert(name.clone(), read(*len));
    }
    let mut take = |n: &str| arrays.remove(n).ok_or_else(|| corrupt(&format!("missing block {n}")));
    let params = take("params")?;
    let optim = OptimizerStates {
        mvtn: AdamState { m: take("mvtn_m")?, v: take("mvtn_v")?, step: 0 },
        main: AdamState { m: take("main_m")?, v: take("main_v")?, step: 0 },
    };
    Checkpoint::from_meta(header["meta"].clone(), params, optim).map_err(|e| DatasetError::CorruptFile(e.to_string()))
}

fn parse_header(body: &[u8]) -> Result<(u32, serde_json::Value, usize)> {
    let corrupt = |m: &str| DatasetError::CorruptFile(m.to_string());
    if body.len() < 20 {
        return Err(corrupt("file too short"));
    }
    let len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize.checked_add(len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header length out of range"))?;
    let header: serde_json::Value = serde_json::from_slice(&body[20..end]).map_err(|e| DatasetError::CorruptFile(e.to_string()))?;
    let version = header["version"].as_u64().ok_or_else(|| corrupt("header lacks a version"))? as u32;
    Ok((version, header, end))
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(ck)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    checkpoint_from_bytes(&bytes)
}

/// `V − E + F` with edges counted as unordered vertex pairs.
pub fn euler_characteristic(mesh: &TriangleMesh) -> i64 {
    let mut edges = BTreeSet::new();
    for f in mesh.faces() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            edges.insert((a.min(b), a.max(b)));
        }
    }
    mesh.vertices().len() as i64 - edges.len() as i64 + mesh.face_count() as i64
}

/// Re-exported so callers can sample points from dataset shapes directly.
pub use mesh::sample_points;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_counts_and_determinism() {
        let spec = SyntheticSpec { train_per_class: 20, test_per_class: 10, ..SyntheticSpec::small(4, 20, 10, 3) };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a.len(), 120);
        assert_eq!(a.split(Split::Train).len(), 80);
        assert_eq!(a.split(Split::Test).len(), 40);
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        for s in &a.shapes {
            assert!(s.mesh.face_count() <= SYNTHETIC_FACE_CAP);
            assert!((s.mesh.max_vertex_norm() - 1.0).abs() < 1e-12);
        }
        let other = generate_synthetic(&SyntheticSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn primitive_topology() {
        let t = Primitive::Torus { major: [0.8, 0.8], minor: [0.2, 0.2], major_segments: 12, minor_segments: 6 };
        assert_eq!(euler_characteristic(&t.build(&[0.5; 3]).unwrap()), 0);
        for c in stock_classes().iter().filter(|c| c.name != "torus") {
            let m = c.primitive.build(&[0.3; 3]).unwrap();
            assert_eq!(euler_characteristic(&m), 2, "{}", c.name);
            assert_eq!(m.face_count(), c.primitive.face_count());
        }
        assert_eq!(icosphere(2).face_count(), 320);
    }

    #[test]
    fn self_check_rejects_twins() {
        let mut classes = stock_classes();
        classes.push(ClassSpec { name: "box2".into(), primitive: classes[0].primitive.clone() });
        assert!(matches!(silhouette_self_check(&classes), Err(DatasetError::SilhouetteCollision { .. })));
        assert!(silhouette_self_check(&stock_classes()).is_ok());
    }

    #[test]
    fn spec_validation() {
        let mut s = SyntheticSpec::small(3, 2, 1, 0);
        assert!(s.validate().is_ok());
        s.classes[0].primitive = Primitive::Sphere { squash: [1.0, 1.0], subdivisions: 4 };
        assert!(s.validate().is_err());
        let mut s = SyntheticSpec::small(3, 2, 1, 0);
        s.classes[1].name = s.classes[0].name.clone();
        assert!(s.validate().is_err());
        let json = r#"{"classes": [], "train_per_class": 1, "test_per_class": 1, "seed": 0, "bogus": 1}"#;
        assert!(serde_json::from_str::<SyntheticSpec>(json).is_err());
    }

    #[test]
    fn rotated_benchmark_changes_orientation_only() {
        let plain = generate_synthetic(&SyntheticSpec::small(2, 2, 0, 1)).unwrap();
        let rot = generate_synthetic(&SyntheticSpec { rotation: Some(RotationMode::AnyAxis), ..SyntheticSpec::small(2, 2, 0, 1) }).unwrap();
        for (a, b) in plain.shapes.iter().zip(&rot.shapes) {
            assert_ne!(a.mesh.vertices(), b.mesh.vertices());
            assert_eq!(a.mesh.faces(), b.mesh.faces());
            let na: Vec<f64> = a.mesh.vertices().iter().map(|&v| crate::geom::norm(v)).collect();
            let nb: Vec<f64> = b.mesh.vertices().iter().map(|&v| crate::geom::norm(v)).collect();
            for (x, y) in na.iter().zip(&nb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dataset_directory_round_trip() {
        let ds = generate_synthetic(&SyntheticSpec::small(2, 2, 1, 5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(manifest.shapes.len(), 6);
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
        let (imported, report) = import_modelnet_off(dir.path(), Some(&ds.class_names), LoadOptions::default()).unwrap();
        assert!(report.rejected.is_empty());
        assert_eq!(imported.len(), 6);
        for s in &imported.shapes {
            assert_eq!(ds.class_names[s.label], s.id.split('_').next().unwrap());
        }
    }

    fn small_checkpoint() -> Checkpoint {
        let ds = generate_synthetic(&SyntheticSpec::small(2, 2, 1, 8)).unwrap();
        let cfg = crate::train::TrainConfig { epochs: 1, batch_size: 2, points: 32, ..Default::default() };
        crate::train::train(&ds, &cfg).unwrap()
    }

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let ck = small_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run/model.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(bits(&back.params.data), bits(&ck.params.data));
        assert_eq!(bits(&back.optim.mvtn.v), bits(&ck.optim.mvtn.v));
        assert_eq!(bits(&back.optim.main.m), bits(&ck.optim.main.m));
        let (a, b) = (&back.history.epochs[0], &ck.history.epochs[0]);
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(back, ck);
        assert_eq!(checkpoint_to_bytes(&back).unwrap(), checkpoint_to_bytes(&ck).unwrap());
    }

    #[test]
    fn checkpoint_corruption_is_detected() {
        let bytes = checkpoint_to_bytes(&small_checkpoint()).unwrap();
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(checkpoint_from_bytes(&bytes[..cut]), Err(DatasetError::CorruptFile(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = bytes.len() - 100;
        flipped[mid] ^= 1;
        assert!(matches!(checkpoint_from_bytes(&flipped), Err(DatasetError::CorruptFile(_))));

        let mut bumped = bytes.clone();
        bumped[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        let err = checkpoint_from_bytes(&bumped).unwrap_err();
        assert!(matches!(err, DatasetError::VersionMismatch { found: 2, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('1') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn import_reports_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let tetra = "OFF\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n";
        let mut files = Vec::new();
        for class in ["chair", "lamp"] {
            for (split, n) in [("train", 2), ("test", 1)] {
                let d = dir.path().join(class).join(split);
                fs::create_dir_all(&d).unwrap();
                for k in 0..n {
                    let p = d.join(format!("{class}_{k}.off"));
                    fs::write(&p, tetra).unwrap();
                    files.push(p);
                }
            }
        }
        let big = dir.path().join("lamp/train/huge.off");
        let mut text = String::from("OFF\n3 5 0\n0 0 0\n1 0 0\n0 1 0\n");
        for _ in 0..5 {
            text.push_str("3 0 1 2\n");
        }
        fs::write(&big, text).unwrap();
        files.push(big.clone());
        let bad = dir.path().join("chair/test/broken.off");
        fs::write(&bad, "OFF\n1 1\n").unwrap();
        files.push(bad.clone());

        let (ds, report) = import_modelnet_off(dir.path(), None, LoadOptions { face_cap: 4 }).unwrap();
        assert_eq!(ds.class_names, vec!["chair", "lamp"]);
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.shapes.iter().filter(|s| s.label == 1).count(), 3);
        let rejected: BTreeSet<_> = report.rejected.iter().map(|r| r.0.clone()).collect();
        assert_eq!(rejected, BTreeSet::from([big, bad]));
        let mut all: Vec<_> = report.accepted.iter().cloned().chain(rejected).collect();
        all.sort();
        files.sort();
        assert_eq!(all, files);
        assert!(matches!(
            import_modelnet_off(dir.path(), Some(&["sofa".to_string()]), LoadOptions::default()),
            Err(DatasetError::MissingClass(_))
        ));
    }
}
