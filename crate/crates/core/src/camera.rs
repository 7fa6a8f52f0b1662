//! Camera rigs: initial view configurations, bounded view regression and
//! look-at frames.
//!
//! Angles are degrees at every public boundary. A pose at azimuth `a` and
//! elevation `e` sits at `d·(cos e·sin a, sin e, cos e·cos a)` looking at
//! the origin with +Y up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::geom::{self, Mat3, Vec3};

pub const DEFAULT_DISTANCE: f64 = 2.2;
pub const DEFAULT_CIRCULAR_ELEVATION: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("view count must be at least 1, got {0}")]
    InvalidViewCount(usize),
    #[error("non-finite regressor output at index {0}")]
    NonFiniteInput(usize),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),
    #[error("bounds must be positive and finite")]
    InvalidBounds,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, CameraError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub distance: f64,
}

impl CameraPose {
    pub fn new(azimuth_deg: f64, elevation_deg: f64, distance: f64) -> Result<Self> {
        if !(distance > 0.0 && distance.is_finite()) {
            return Err(CameraError::DegeneratePose(format!("distance {distance}")));
        }
        if !azimuth_deg.is_finite() || !(-90.0..=90.0).contains(&elevation_deg) {
            return Err(CameraError::DegeneratePose(format!("angles ({azimuth_deg}, {elevation_deg})")));
        }
        Ok(Self { azimuth_deg, elevation_deg, distance })
    }

    pub fn position(&self) -> Vec3 {
        let f = CameraFrame::new(self.azimuth_deg, self.elevation_deg).forward;
        geom::scale(f, -self.distance)
    }
}

/// The `2M` scene parameters `[azimuth_1..azimuth_M, elevation_1..elevation_M]`
/// plus the shared camera distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub values: Vec<f64>,
    pub distance: f64,
}

impl SceneParams {
    pub fn new(azimuths: &[f64], elevations: &[f64], distance: f64) -> Result<Self> {
        if azimuths.is_empty() {
            return Err(CameraError::InvalidViewCount(0));
        }
        if azimuths.len() != elevations.len() {
            return Err(CameraError::LengthMismatch { expected: azimuths.len(), got: elevations.len() });
        }
        let mut values = azimuths.to_vec();
        values.extend_from_slice(elevations);
        Ok(Self { values, distance })
    }

    pub fn zeros(views: usize, distance: f64) -> Self {
        Self { values: vec![0.0; 2 * views], distance }
    }

    pub fn num_views(&self) -> usize {
        self.values.len() / 2
    }

    pub fn azimuths(&self) -> &[f64] {
        &self.values[..self.num_views()]
    }

    pub fn elevations(&self) -> &[f64] {
        &self.values[self.num_views()..]
    }

    /// Per-view `(azimuth, elevation)` pairs.
    pub fn angles(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.azimuths().iter().copied().zip(self.elevations().iter().copied())
    }
}

/// Permissible half-ranges for the regressed angles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub azimuth_bound_deg: f64,
    pub elevation_bound_deg: f64,
}

impl ParamBounds {
    pub fn new(azimuth_bound_deg: f64, elevation_bound_deg: f64) -> Result<Self> {
        let ok = |b: f64| b > 0.0 && b.is_finite();
        if !ok(azimuth_bound_deg) || !ok(elevation_bound_deg) {
            return Err(CameraError::InvalidBounds);
        }
        Ok(Self { azimuth_bound_deg, elevation_bound_deg })
    }

    /// Bound for coordinate `i` of a `2M` parameter vector.
    pub fn coordinate(&self, i: usize, views: usize) -> f64 {
        if i < views {
            self.azimuth_bound_deg
        } else {
            self.elevation_bound_deg
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    /// Views regressed from scratch.
    Direct,
    /// Views regressed as offsets to an initial configuration.
    Offset,
}

/// Offset mode bounds azimuth by `180/M` so neighbouring circular views
/// cannot swap order; direct mode allows the full `±180`. Elevation is
/// bounded by 90 in both.
pub fn default_bounds(mode: BoundMode, views: usize) -> ParamBounds {
    let azimuth = match mode {
        BoundMode::Direct => 180.0,
        BoundMode::Offset => 180.0 / views.max(1) as f64,
    };
    ParamBounds { azimuth_bound_deg: azimuth, elevation_bound_deg: 90.0 }
}

/// Equispaced azimuths `k·360/M` at a shared elevation.
pub fn circular_config(views: usize, elevation_deg: f64, distance: f64) -> Result<SceneParams> {
    if views < 1 {
        return Err(CameraError::InvalidViewCount(views));
    }
    let az: Vec<f64> = (0..views).map(|k| (k * 360) as f64 / views as f64).collect();
    SceneParams::new(&az, &vec![elevation_deg; views], distance)
}

/// Equal-area generalized spiral: `z_k = −1 + (2k − 1)/M`, with the
/// longitude advancing by `3.6 / √(M·(1 − z_k²))` between points.
pub fn spherical_config(views: usize, distance: f64) -> Result<SceneParams> {
    if views < 1 {
        return Err(CameraError::InvalidViewCount(views));
    }
    let m = views as f64;
    let mut phi: f64 = 0.0;
    let mut az = Vec::with_capacity(views);
    let mut el = Vec::with_capacity(views);
    for k in 1..=views {
        let z = -1.0 + (2 * k - 1) as f64 / m;
        if k > 1 {
            let s = 1.0 - z * z;
            if s > 0.0 {
                phi += 3.6 / (m * s).sqrt();
            }
        }
        az.push(phi.to_degrees().rem_euclid(360.0));
        el.push(z.asin().to_degrees());
    }
    SceneParams::new(&az, &el, distance)
}

/// Directions uniform on the sphere.
pub fn random_config(views: usize, seed: u64, distance: f64) -> Result<SceneParams> {
    if views < 1 {
        return Err(CameraError::InvalidViewCount(views));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut az = Vec::with_capacity(views);
    let mut el = Vec::with_capacity(views);
    for _ in 0..views {
        let z: f64 = rng.random_range(-1.0..=1.0);
        el.push(z.asin().to_degrees());
        az.push(rng.random_range(0.0..360.0));
    }
    SceneParams::new(&az, &el, distance)
}

/// `base + bound·t` with `t = tanh(raw)`, nudged toward `base` by whole ulps
/// whenever rounding would land on the bound itself.
pub fn bounded_value(base: f64, bound: f64, t: f64) -> f64 {
    let mut v = base + bound * t;
    while (v - base).abs() >= bound {
        v = if v > base { v.next_down() } else { v.next_up() };
    }
    v
}

fn check_raw(raw: &[f64]) -> Result<()> {
    match raw.iter().position(|r| !r.is_finite()) {
        Some(i) => Err(CameraError::NonFiniteInput(i)),
        None => Ok(()),
    }
}

/// `u = bound·tanh(raw)`.
pub fn apply_direct(raw: &[f64], bounds: &ParamBounds, distance: f64) -> Result<SceneParams> {
    let zeros = SceneParams::zeros(raw.len() / 2, distance);
    if !raw.len().is_multiple_of(2) || raw.is_empty() {
        return Err(CameraError::LengthMismatch { expected: 2 * zeros.num_views().max(1), got: raw.len() });
    }
    apply_offset(&zeros, raw, bounds)
}

/// `u = u0 + bound·tanh(raw)`.
pub fn apply_offset(u0: &SceneParams, raw: &[f64], bounds: &ParamBounds) -> Result<SceneParams> {
    if raw.len() != u0.values.len() {
        return Err(CameraError::LengthMismatch { expected: u0.values.len(), got: raw.len() });
    }
    check_raw(raw)?;
    let m = u0.num_views();
    let values = u0
        .values
        .iter()
        .zip(raw)
        .enumerate()
        .map(|(i, (&base, &r))| bounded_value(base, bounds.coordinate(i, m), r.tanh()))
        .collect();
    Ok(SceneParams { values, distance: u0.distance })
}

/// Differentiable counterpart of [`apply_offset`]; values agree bitwise.
pub fn apply_offset_nodes(
    graph: &mut Graph,
    u0: &SceneParams,
    raw: &[NodeId],
    bounds: &ParamBounds,
) -> Result<Vec<NodeId>> {
    if raw.len() != u0.values.len() {
        return Err(CameraError::LengthMismatch { expected: u0.values.len(), got: raw.len() });
    }
    let m = u0.num_views();
    let mut out = Vec::with_capacity(raw.len());
    for (i, (&base, &r)) in u0.values.iter().zip(raw).enumerate() {
        let x = graph.value(r);
        if !x.is_finite() {
            return Err(CameraError::NonFiniteInput(i));
        }
        let bound = bounds.coordinate(i, m);
        let t = x.tanh();
        let v = bounded_value(base, bound, t);
        out.push(graph.custom(v, &[(r, bound * (1.0 - t * t))])?);
    }
    Ok(out)
}

/// Orthonormal camera basis for a pose.
///
/// `right = (cos a, 0, −sin a)`, `up = (−sin a·sin e, cos e, −cos a·sin e)`,
/// `forward = −(cos e·sin a, sin e, cos e·cos a)`. For |e| < 90 this is the
/// standard look-at basis with +Y up; at the poles and beyond it continues
/// smoothly instead of degenerating.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraFrame {
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
}

impl CameraFrame {
    pub fn new(azimuth_deg: f64, elevation_deg: f64) -> Self {
        let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let (sa, ca, se, ce) = (a.sin(), a.cos(), e.sin(), e.cos());
        Self {
            right: [ca, 0.0, -sa],
            up: [-sa * se, ce, -ca * se],
            forward: [-(ce * sa), -se, -(ce * ca)],
        }
    }
}

/// The camera basis as graph nodes, differentiable in both angles (degrees).
#[derive(Clone, Copy, Debug)]
pub struct FrameNodes {
    pub right: [NodeId; 3],
    pub up: [NodeId; 3],
    pub forward: [NodeId; 3],
}

pub fn frame_nodes(graph: &mut Graph, azimuth_deg: NodeId, elevation_deg: NodeId) -> FrameNodes {
    let deg = std::f64::consts::PI / 180.0;
    let a = graph.scale(azimuth_deg, deg);
    let e = graph.scale(elevation_deg, deg);
    let (sa, ca, se, ce) = (graph.sin(a), graph.cos(a), graph.sin(e), graph.cos(e));
    let zero = graph.constant(0.0);
    let neg_sa = graph.neg(sa);
    let sa_se = graph.mul(sa, se);
    let ca_se = graph.mul(ca, se);
    let ce_sa = graph.mul(ce, sa);
    let ce_ca = graph.mul(ce, ca);
    FrameNodes {
        right: [ca, zero, neg_sa],
        up: [graph.neg(sa_se), ce, graph.neg(ca_se)],
        forward: [graph.neg(ce_sa), graph.neg(se), graph.neg(ce_ca)],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Projection {
    /// Vertical field of view in degrees.
    Perspective { fov_deg: f64 },
    /// Half-width of the visible square in model units.
    Orthographic { half_extent: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub projection: Projection,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn perspective(fov_deg: f64, width: usize, height: usize) -> Self {
        Self { projection: Projection::Perspective { fov_deg }, width, height }
    }
}

/// World-to-view transform `p_view = R·p + t`; the camera looks down −Z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewMatrix {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub intrinsics: Intrinsics,
}

impl ViewMatrix {
    /// Pixel coordinates (x right, y down) and positive view depth, or
    /// `None` when the point is not in front of the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let v = geom::add(geom::mat_vec(&self.rotation, p), self.translation);
        let depth = -v[2];
        let (w, h) = (self.intrinsics.width as f64, self.intrinsics.height as f64);
        let (nx, ny) = match self.intrinsics.projection {
            Projection::Perspective { fov_deg } => {
                if depth <= 0.0 {
                    return None;
                }
                let t = (fov_deg.to_radians() / 2.0).tan();
                (v[0] / (depth * t * (w / h)), v[1] / (depth * t))
            }
            Projection::Orthographic { half_extent } => (v[0] / (half_extent * (w / h)), v[1] / half_extent),
        };
        Some(((nx + 1.0) * 0.5 * w, (1.0 - ny) * 0.5 * h, depth))
    }
}

pub fn look_at(pose: &CameraPose, intrinsics: Intrinsics) -> Result<ViewMatrix> {
    if !(pose.distance > 0.0 && pose.distance.is_finite()) {
        return Err(CameraError::DegeneratePose(format!("distance {}", pose.distance)));
    }
    if !pose.azimuth_deg.is_finite() || !pose.elevation_deg.is_finite() {
        return Err(CameraError::DegeneratePose("non-finite angle".into()));
    }
    if intrinsics.width == 0 || intrinsics.height == 0 {
        return Err(CameraError::DegeneratePose("empty image".into()));
    }
    let f = CameraFrame::new(pose.azimuth_deg, pose.elevation_deg);
    let rotation = [f.right, f.up, geom::scale(f.forward, -1.0)];
    let eye = pose.position();
    let translation = geom::scale(geom::mat_vec(&rotation, eye), -1.0);
    Ok(ViewMatrix { rotation, translation, intrinsics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn great_circle(a: (f64, f64), b: (f64, f64)) -> f64 {
        let d = |(az, el): (f64, f64)| CameraFrame::new(az, el).forward;
        geom::dot(d(a), d(b)).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn circular_twelve() {
        let u = circular_config(12, 30.0, 2.2).unwrap();
        let expected: Vec<f64> = (0..12).map(|k| 30.0 * k as f64).collect();
        assert_eq!(u.azimuths(), expected.as_slice());
        assert!(u.elevations().iter().all(|&e| e == 30.0));
        let one = circular_config(1, 30.0, 2.2).unwrap();
        assert_eq!(one.values, vec![0.0, 30.0]);
        assert_eq!(circular_config(4, 30.0, DEFAULT_DISTANCE).unwrap().distance, 2.2);
        assert_eq!(circular_config(0, 30.0, 2.2), Err(CameraError::InvalidViewCount(0)));
    }

    #[test]
    fn circular_spacing_all_view_counts() {
        for m in 1..=40usize {
            let u = circular_config(m, 30.0, 2.2).unwrap();
            let step = 360.0 / m as f64;
            for w in u.azimuths().windows(2) {
                assert!((w[1] - w[0] - step).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spherical_small_counts() {
        let one = spherical_config(1, 2.2).unwrap();
        assert_eq!(one.elevations(), &[0.0]);
        let two = spherical_config(2, 2.2).unwrap();
        let el = two.elevations();
        assert!((el[0] + 30.0).abs() < 1e-12 && (el[1] - 30.0).abs() < 1e-12, "{el:?}");
    }

    #[test]
    fn spherical_twelve_is_spread_out() {
        let u = spherical_config(12, 2.2).unwrap();
        let pts: Vec<_> = u.angles().collect();
        let mut min = f64::INFINITY;
        for i in 0..12 {
            for j in 0..i {
                min = min.min(great_circle(pts[i], pts[j]));
            }
        }
        let cap = 2.0 * (1.0f64 / 12.0).sqrt().asin();
        assert!(min >= 0.8 * cap, "{min} vs {cap}");
        for (az, el) in pts {
            let d = CameraFrame::new(az, el).forward;
            assert!((geom::norm(d) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_config_properties() {
        let a = random_config(6, 42, 2.2).unwrap();
        assert_eq!(a, random_config(6, 42, 2.2).unwrap());
        assert_eq!(a.values.len(), 12);
        assert!(a.elevations().iter().all(|e| (-90.0..=90.0).contains(e)));
        let n = 100_000;
        let mean_z: f64 = (0..n)
            .map(|s| random_config(1, s, 2.2).unwrap().elevations()[0].to_radians().sin())
            .sum::<f64>()
            / n as f64;
        // z uniform on [−1, 1] has variance 1/3
        assert!(mean_z.abs() < 3.0 * (1.0 / 3.0 / n as f64).sqrt());
    }

    #[test]
    fn bounds_defaults() {
        assert_eq!(default_bounds(BoundMode::Offset, 6), ParamBounds { azimuth_bound_deg: 30.0, elevation_bound_deg: 90.0 });
        assert_eq!(default_bounds(BoundMode::Direct, 7).azimuth_bound_deg, 180.0);
        assert_eq!(default_bounds(BoundMode::Offset, 1).azimuth_bound_deg, 180.0);
        assert!(ParamBounds::new(0.0, 1.0).is_err());
    }

    #[test]
    fn direct_bounding() {
        let b = ParamBounds::new(30.0, 90.0).unwrap();
        let zero = apply_direct(&[0.0, 0.0], &b, 2.2).unwrap();
        assert_eq!(zero.values, vec![0.0, 0.0]);
        let one = apply_direct(&[1.0, 0.0], &b, 2.2).unwrap();
        assert!((one.values[0] - 22.847_824_678_672_95).abs() < 1e-12);
        let big = apply_direct(&[1e6, -1e6], &b, 2.2).unwrap();
        assert!(big.values[0] < 30.0 && big.values[0] > 29.9999);
        assert!(big.values[1] > -90.0);
        assert_eq!(apply_direct(&[f64::NAN, 0.0], &b, 2.2), Err(CameraError::NonFiniteInput(0)));
    }

    #[test]
    fn offset_bounding() {
        let u0 = circular_config(12, 30.0, 2.2).unwrap();
        let b = default_bounds(BoundMode::Offset, 12);
        let same = apply_offset(&u0, &[0.0; 24], &b).unwrap();
        assert_eq!(same, u0);
        let mut raw = vec![0.0; 24];
        raw[1] = -1e9;
        let low = apply_offset(&u0, &raw, &b).unwrap();
        assert!(low.values[1] > 15.0 && low.values[1] < 15.0001);
        assert!(matches!(apply_offset(&u0, &[0.0; 3], &b), Err(CameraError::LengthMismatch { .. })));
    }

    #[test]
    fn offsets_never_reorder_circular_views() {
        let u0 = circular_config(12, 30.0, 2.2).unwrap();
        let b = default_bounds(BoundMode::Offset, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..24).map(|_| rng.random_range(-20.0..20.0)).collect();
            let u = apply_offset(&u0, &raw, &b).unwrap();
            for w in u.azimuths().windows(2) {
                assert!(w[0] < w[1]);
            }
        }
    }

    #[test]
    fn offset_nodes_agree_with_plain() {
        let u0 = spherical_config(3, 2.2).unwrap();
        let b = default_bounds(BoundMode::Offset, 3);
        let raw = [0.3, -2.0, 40.0, 0.0, 1.5, -0.7];
        let plain = apply_offset(&u0, &raw, &b).unwrap();
        let mut g = Graph::new();
        let leaves: Vec<_> = raw.iter().map(|&r| g.leaf(r)).collect();
        let nodes = apply_offset_nodes(&mut g, &u0, &leaves, &b).unwrap();
        assert_eq!(g.values_of(&nodes), plain.values);
        let s = g.sum(&nodes);
        g.backward(s).unwrap();
        let grads = g.grads_of(&leaves).unwrap();
        for (i, (&r, gr)) in raw.iter().zip(grads).enumerate() {
            let bound = b.coordinate(i, 3);
            assert!((gr - bound * (1.0 - r.tanh().powi(2))).abs() < 1e-12);
        }
    }

    #[test]
    fn look_at_axis_aligned() {
        let intr = Intrinsics::perspective(45.0, 64, 64);
        let v = look_at(&CameraPose::new(0.0, 0.0, 2.2).unwrap(), intr).unwrap();
        assert_eq!(CameraPose::new(0.0, 0.0, 2.2).unwrap().position(), [-0.0, -0.0, 2.2]);
        let f = CameraFrame::new(0.0, 0.0).forward;
        assert_eq!(f, [-0.0, -0.0, -1.0]);
        let (x, y, z) = v.project([0.0; 3]).unwrap();
        assert_eq!((x, y), (32.0, 32.0));
        assert!((z - 2.2).abs() < 1e-15);
        let side = CameraPose::new(90.0, 0.0, 2.2).unwrap().position();
        assert!((side[0] - 2.2).abs() < 1e-15 && side[1].abs() < 1e-15 && side[2].abs() < 1e-15);
    }

    #[test]
    fn pinhole_offset() {
        let intr = Intrinsics::perspective(45.0, 64, 64);
        let v = look_at(&CameraPose::new(0.0, 0.0, 2.2).unwrap(), intr).unwrap();
        let (x, _, _) = v.project([0.1, 0.0, 0.0]).unwrap();
        let expected = 32.0 * (0.1 / 2.2) / 22.5f64.to_radians().tan();
        assert!((x - 32.0 - expected).abs() < 1e-12);
    }

    #[test]
    fn poles_are_well_defined() {
        let intr = Intrinsics::perspective(45.0, 32, 32);
        for el in [90.0, -90.0] {
            let v = look_at(&CameraPose::new(37.0, el, 2.2).unwrap(), intr).unwrap();
            let r = v.rotation;
            assert!((geom::det(&r) - 1.0).abs() < 1e-12);
            let (x, y, _) = v.project([0.0; 3]).unwrap();
            assert!((x - 16.0).abs() < 1e-12 && (y - 16.0).abs() < 1e-12);
        }
        assert!(CameraPose::new(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn frame_nodes_match_plain_frame() {
        let mut g = Graph::new();
        let a = g.leaf(33.0);
        let e = g.leaf(-12.0);
        let n = frame_nodes(&mut g, a, e);
        let f = CameraFrame::new(33.0, -12.0);
        for k in 0..3 {
            assert_eq!(g.value(n.right[k]), f.right[k]);
            assert_eq!(g.value(n.up[k]), f.up[k]);
            assert_eq!(g.value(n.forward[k]), f.forward[k]);
        }
    }

    proptest! {
        #[test]
        fn look_at_is_a_rotation(az in -720.0f64..720.0, el in -89.9f64..89.9, d in 0.5f64..10.0) {
            let v = look_at(&CameraPose::new(az, el, d).unwrap(), Intrinsics::perspective(45.0, 16, 16)).unwrap();
            let r = v.rotation;
            let rtr = geom::mat_mul(&geom::transpose(&r), &r);
            for i in 0..3 {
                for j in 0..3 {
                    let id = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((rtr[i][j] - id).abs() < 1e-10);
                }
            }
            prop_assert!((geom::det(&r) - 1.0).abs() < 1e-10);
            let (x, y, depth) = v.project([0.0; 3]).unwrap();
            prop_assert!((x - 8.0).abs() < 1e-9 && (y - 8.0).abs() < 1e-9);
            prop_assert!((depth - d).abs() < 1e-9);
        }

        #[test]
        fn bound_is_strict(raw in prop::collection::vec(-1e3f64..1e3, 8), seed in 0u64..1000) {
            let u0 = random_config(4, seed, 2.2).unwrap();
            let b = default_bounds(BoundMode::Offset, 4);
            let u = apply_offset(&u0, &raw, &b).unwrap();
            for i in 0..8 {
                prop_assert!((u.values[i] - u0.values[i]).abs() < b.coordinate(i, 4));
            }
            let d = apply_direct(&raw, &default_bounds(BoundMode::Direct, 4), 2.2).unwrap();
            for i in 0..8 {
                prop_assert!(d.values[i].abs() < default_bounds(BoundMode::Direct, 4).coordinate(i, 4));
            }
        }
    }
}
