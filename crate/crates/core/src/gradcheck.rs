//! Built-in finite-difference fixtures for the renderer and the full
//! regressor-to-loss pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{central_differences, finite_diff_check, Graph, GradCheckReport};
use crate::camera::{apply_offset_nodes, default_bounds, BoundMode};
use crate::geom::{self, Vec3};
use crate::mesh::{normalize_unit, TriangleMesh};
use crate::nn::{init_params, Group, ParameterStore};
use crate::render::{render_views, LightMode, RenderError, RenderSettings};
use crate::train::{forward_gradient, training_forward, TrainConfig, TrainError, Variant};

/// Every fixture must stay below this relative error.
pub const TOLERANCE: f64 = 1e-3;
/// Finite-difference step for camera angles, in degrees.
pub const ANGLE_EPS_DEG: f64 = 1e-4;
/// Finite-difference step for network parameters.
pub const PARAM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct FixtureResult {
    pub name: String,
    pub faces: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

impl FixtureResult {
    fn new(name: String, faces: usize, r: GradCheckReport) -> Self {
        Self { name, faces, analytic: r.analytic, numeric: r.numeric, max_rel_error: r.max_rel_error }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn octahedron() -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let v = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]];
    let f = vec![[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]];
    (v, f)
}

/// A random closed or open mesh with at most 50 faces: a radially jittered
/// octahedron or icosahedron, or a soup of random triangles.
pub fn random_fixture_mesh(seed: u64) -> TriangleMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut v, f) = match rng.random_range(0..3) {
        0 => octahedron(),
        1 => {
            let m = crate::dataset::icosphere(0);
            (m.vertices().to_vec(), m.faces().to_vec())
        }
        _ => {
            let n = rng.random_range(5..=50);
            let mut v = Vec::with_capacity(3 * n);
            for _ in 0..n {
                let c: Vec3 = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
                for _ in 0..3 {
                    v.push(geom::add(c, [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)]));
                }
            }
            let f = (0..n).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
            (v, f)
        }
    };
    if f.len() <= 20 {
        for p in &mut v {
            *p = geom::scale(*p, rng.random_range(0.6..1.2));
        }
    }
    let mesh = TriangleMesh::new(v, f).expect("fixture mesh is valid");
    normalize_unit(&mesh).expect("fixture mesh has extent")
}

/// `∂(Σ pixels)/∂(azimuth, elevation)` against central differences for one
/// random mesh and pose at 16×16.
pub fn renderer_fixture(seed: u64) -> Result<FixtureResult, RenderError> {
    let mesh = random_fixture_mesh(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, 0x90de));
    let pose = [rng.random_range(-180.0..180.0), rng.random_range(-85.0..=85.0)];
    let distance = rng.random_range(2.0..3.0);
    let settings = RenderSettings { image_height: 16, image_width: 16, ..RenderSettings::default() };
    let build = |g: &mut Graph, p: &[crate::autodiff::NodeId]| -> Result<_, RenderError> {
        let d = g.constant(distance);
        let views = render_views(g, &mesh, p, d, &settings, LightMode::Fixed)?;
        Ok(g.sum(views[0].pixels.nodes()))
    };
    let report = finite_diff_check(build, &pose, ANGLE_EPS_DEG)?;
    Ok(FixtureResult::new(
        format!("render#{seed} az={:.1} el={:.1} d={:.2}", pose[0], pose[1], distance),
        mesh.face_count(),
        report,
    ))
}

pub fn renderer_fixtures(count: usize, seed: u64) -> Result<Vec<FixtureResult>, RenderError> {
    (0..count).map(|i| renderer_fixture(crate::derive_seed(seed, i as u64))).collect()
}

/// The offset bounding `u0 + b·tanh(raw)` on its own.
pub fn bounding_fixture(seed: u64) -> Result<FixtureResult, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let u0 = crate::camera::circular_config(4, 30.0, 2.2)?;
    let bounds = default_bounds(BoundMode::Offset, 4);
    let build = |g: &mut Graph, p: &[crate::autodiff::NodeId]| -> Result<_, TrainError> {
        let u = apply_offset_nodes(g, &u0, p, &bounds)?;
        let sq: Vec<_> = u.iter().map(|&n| g.mul(n, n)).collect();
        Ok(g.sum(&sq))
    };
    Ok(FixtureResult::new("bounding".into(), 0, finite_diff_check(build, &raw, 1e-6)?))
}

/// Offset pipeline on one shape: points → H → G → bounded views → render →
/// f → C → cross-entropy. Compares gradients of `coordinates` random entries
/// of (θ_H, θ_G). G's zero-initialized final layer is replaced by small
/// random weights so every upstream parameter carries gradient.
pub fn end_to_end_fixture(seed: u64, coordinates: usize) -> Result<FixtureResult, TrainError> {
    let cfg = TrainConfig { variant: Variant::Offset, points: 64, seed, ..TrainConfig::default() };
    let mesh = random_fixture_mesh(seed);
    let mut store = init_params(&cfg.model_spec(3), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, 0xe2e));
    let last = store.layout().mvtn.last().copied().expect("regressor layers");
    for v in &mut store.data[store.tensors[last.weight].range()] {
        *v = rng.random_range(-0.3..0.3);
    }
    let (h, gr) = (store.group_range(Group::PointEncoder), store.group_range(Group::Mvtn));
    let picks: Vec<usize> = (0..coordinates)
        .map(|k| if k % 2 == 0 { rng.random_range(h.clone()) } else { rng.random_range(gr.clone()) })
        .collect();
    let label = 1;
    let loss_at = |s: &ParameterStore| -> Result<f64, TrainError> {
        let f = training_forward(s, &cfg, &mesh, label, 1, 0)?;
        Ok(f.graph.value(f.loss))
    };
    let mut fwd = training_forward(&store, &cfg, &mesh, label, 1, 0)?;
    let full = forward_gradient(&mut fwd, store.len(), |g| store.group_range(g))?;
    let analytic: Vec<f64> = picks.iter().map(|&i| full[i]).collect();
    let base: Vec<f64> = picks.iter().map(|&i| store.data[i]).collect();
    let mut failure = None;
    let mut probe = store.clone();
    let numeric = central_differences(
        |p| {
            for (&i, &v) in picks.iter().zip(p) {
                probe.data[i] = v;
            }
            loss_at(&probe).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        },
        &base,
        PARAM_EPS,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let report = GradCheckReport::from_gradients(analytic, numeric);
    let names: Vec<String> = picks.iter().map(|&i| if h.contains(&i) { format!("h[{i}]") } else { format!("g[{i}]") }).collect();
    Ok(FixtureResult::new(format!("end-to-end#{seed} {}", names.join(" ")), mesh.face_count(), report))
}
