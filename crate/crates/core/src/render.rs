//! Soft rasterization of triangle meshes into silhouettes and Lambertian
//! shaded views, differentiable in camera azimuth, elevation and distance.
//!
//! Screen space is NDC: x right and y up in `[−1, 1]`; pixel `(row, col)`
//! has its center at `((2·col + 1)/W − 1, 1 − (2·row + 1)/H)`. `sigma` is
//! measured in NDC². Depth is mapped to `z̃ = (far − z)/(far − near)` so
//! nearer surfaces weigh more.
//!
//! Every kernel is generic over [`Dual`]: `Dual<0>` is the value-only path
//! and `Dual<3>` carries derivatives in (azimuth, elevation, distance). Both
//! perform the same float operations on values, so the two paths agree
//! bitwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Dual, Graph, NodeId, TensorView};
use crate::camera::{CameraError, CameraPose, SceneParams, ViewMatrix};
use crate::geom::{self, Vec3};
use crate::mesh::TriangleMesh;

/// Pruned (pixel, face) pairs move any pixel by less than this.
const PRUNE_EFFECT: f64 = 1e-9;
const DEGENERATE_AREA: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid render settings: {0}")]
    InvalidSettings(String),
    #[error("invalid light: {0}")]
    InvalidLight(String),
    #[error("every vertex is behind the near plane in view {view}")]
    AllBehindCamera { view: usize },
    #[error("expected {expected} scene parameters, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RenderError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    pub image_height: usize,
    pub image_width: usize,
    pub sigma: f64,
    pub gamma: f64,
    pub background: f64,
    pub fov_deg: f64,
    pub channels: usize,
    pub near: f64,
    pub far: f64,
    pub ambient: f64,
    pub diffuse: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            sigma: 1e-4,
            gamma: 1e-2,
            background: 0.0,
            fov_deg: 45.0,
            channels: 1,
            near: 0.1,
            far: 10.0,
            ambient: 0.4,
            diffuse: 0.6,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(RenderError::InvalidSettings(msg.into()));
        if self.image_height < 4 || self.image_width < 4 {
            return bad("image dimensions must be at least 4");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) || !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("sigma and gamma must be positive");
        }
        if !(0.0..=1.0).contains(&self.background) {
            return bad("background must lie in [0, 1]");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("fov must lie in (0, 180)");
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels must be 1 or 3");
        }
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return bad("need 0 < near < far");
        }
        LightSpec::new([0.0, 0.0, 1.0], self.ambient, self.diffuse).map_err(|e| RenderError::InvalidSettings(e.to_string()))?;
        Ok(())
    }

    pub fn pixels_per_channel(&self) -> usize {
        self.image_height * self.image_width
    }

    /// Squared-distance-over-sigma beyond which an outside pair is pruned.
    ///
    /// Depth weights can amplify a faint face by up to `exp(1/gamma)`
    /// relative to what lies behind it, hence the extra term.
    pub fn prune_threshold(&self) -> f64 {
        1.0 / self.gamma + (1.0 / PRUNE_EFFECT).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightSpec {
    pub direction: Vec3,
    pub ambient: f64,
    pub diffuse: f64,
}

impl LightSpec {
    pub fn new(direction: Vec3, ambient: f64, diffuse: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ambient) || !(0.0..=1.0).contains(&diffuse) || ambient + diffuse > 1.0 + 1e-12 {
            return Err(RenderError::InvalidLight(format!("ambient {ambient}, diffuse {diffuse}")));
        }
        if (geom::norm(direction) - 1.0).abs() > 1e-9 {
            return Err(RenderError::InvalidLight("direction must have unit norm".into()));
        }
        Ok(Self { direction, ambient, diffuse })
    }

    /// `ambient + diffuse·|n·l|`.
    pub fn intensity(&self, normal: Vec3) -> f64 {
        self.ambient + self.diffuse * geom::dot(normal, self.direction).abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LightMode {
    /// Light travels from the camera toward the origin.
    Fixed,
    /// One uniformly random direction per view.
    Random { seed: u64 },
}

/// Per-view light directions; `None` means the camera forward vector.
pub fn light_directions(mode: LightMode, views: usize) -> Vec<Option<Vec3>> {
    match mode {
        LightMode::Fixed => vec![None; views],
        LightMode::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..views).map(|_| Some(UnitSphere.sample(&mut rng))).collect()
        }
    }
}

/// An `h × w × c` image in row-major HWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Binary PPM: P5 for one channel, P6 for three, 8 bits per sample.
    pub fn to_ppm(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_ppm(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// One differentiable view: pixels shaped `[h, w, c]`.
#[derive(Clone, Debug)]
pub struct RenderedView {
    pub pixels: TensorView,
    pub view: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScreenVertex {
    /// Pixel coordinates, x right and y down.
    pub x: f64,
    pub y: f64,
    /// View-space depth, positive in front of the camera.
    pub depth: f64,
    pub in_front: bool,
}

/// Projects every vertex through `view`; vertices on or behind the near
/// plane are reported with `in_front = false`.
pub fn project_vertices(mesh: &TriangleMesh, view: &ViewMatrix, near: f64) -> Result<Vec<ScreenVertex>> {
    let out: Vec<ScreenVertex> = mesh
        .vertices()
        .iter()
        .map(|&p| {
            let v = geom::add(geom::mat_vec(&view.rotation, p), view.translation);
            match view.project(p) {
                Some((x, y, depth)) if depth > near => ScreenVertex { x, y, depth, in_front: true },
                _ => ScreenVertex { x: f64::NAN, y: f64::NAN, depth: -v[2], in_front: false },
            }
        })
        .collect();
    if !out.iter().any(|v| v.in_front) {
        return Err(RenderError::AllBehindCamera { view: 0 });
    }
    Ok(out)
}

/// Differentiable vertex projection: `[x_pixel, y_pixel, depth]` per vertex
/// as nodes depending on the azimuth, elevation (degrees) and distance nodes.
pub fn project_vertices_nodes(
    graph: &mut Graph,
    mesh: &TriangleMesh,
    azimuth_deg: NodeId,
    elevation_deg: NodeId,
    distance: NodeId,
    settings: &RenderSettings,
) -> Result<Vec<[NodeId; 3]>> {
    settings.validate()?;
    let (a, e, d) = (graph.value(azimuth_deg), graph.value(elevation_deg), graph.value(distance));
    let cam = Camera::<3>::new(a, e, d, settings);
    let parents = [azimuth_deg, elevation_deg, distance];
    let (w, h) = (settings.image_width as f64, settings.image_height as f64);
    let mut out = Vec::with_capacity(mesh.vertices().len());
    for &p in mesh.vertices() {
        let v = cam.project(p);
        let px = (v.x + 1.0) * (0.5 * w);
        let py = (-v.y + 1.0) * (0.5 * h);
        let mut ids = Vec::with_capacity(3);
        for q in [px, py, v.depth] {
            let edges: Vec<_> = parents.iter().zip(q.d).map(|(&n, g)| (n, g)).collect();
            ids.push(graph.custom(q.v, &edges)?);
        }
        out.push([ids[0], ids[1], ids[2]]);
    }
    Ok(out)
}

/// `sigmoid(s·d²/sigma)` where `d` is the distance from `pixel` to the
/// triangle boundary and `s` is +1 inside, −1 outside. Degenerate triangles
/// have no influence.
pub fn triangle_influence(pixel: [f64; 2], tri: [[f64; 2]; 3], sigma: f64) -> f64 {
    let t = tri.map(|q| [Dual::<0>::constant(q[0]), Dual::constant(q[1])]);
    match coverage(pixel, &t) {
        Some(c) => (c.dist2 * (c.sign / sigma)).sigmoid().v,
        None => 0.0,
    }
}

/// Depth-weighted blend of `(D_j, z̃_j, c_j)` triples over `background`
/// (whose `z̃` is 0).
pub fn blend_pixel(entries: &[(f64, f64, f64)], gamma: f64, background: f64) -> f64 {
    let e: Vec<Entry<0>> = entries
        .iter()
        .map(|&(d, z, c)| Entry { influence: d.into(), zt: z.into(), color: c.into() })
        .collect();
    aggregate(&e, gamma, background).shade.v
}

/// `1 − Π(1 − D_j)` per pixel.
pub fn soft_silhouette(mesh: &TriangleMesh, pose: &CameraPose, settings: &RenderSettings) -> Result<Image> {
    render_plain(mesh, pose, settings, None, Output::Silhouette)
}

/// Shaded image with the depth-weighted blend, before silhouette compositing.
pub fn shade_lambertian(
    mesh: &TriangleMesh,
    pose: &CameraPose,
    light: &LightSpec,
    settings: &RenderSettings,
) -> Result<Image> {
    render_plain(mesh, pose, settings, Some(light.direction), Output::Shaded)
}

/// The view fed to the network: the shaded image composited over the
/// background with silhouette coverage, `bg + I·(P − bg)`.
pub fn render_image(
    mesh: &TriangleMesh,
    pose: &CameraPose,
    settings: &RenderSettings,
    light: Option<Vec3>,
) -> Result<Image> {
    render_plain(mesh, pose, settings, light, Output::Composite)
}

/// Value-only rendering of every view in `params`.
pub fn render_views_values(
    mesh: &TriangleMesh,
    params: &SceneParams,
    settings: &RenderSettings,
    light: LightMode,
) -> Result<Vec<Image>> {
    settings.validate()?;
    let lights = light_directions(light, params.num_views());
    let angles: Vec<_> = params.angles().collect();
    angles
        .par_iter()
        .zip(lights)
        .enumerate()
        .map(|(k, (&(a, e), l))| {
            let cam = Camera::<0>::new(a, e, params.distance, settings);
            let data = rasterize(mesh, &cam, settings, l, Output::Composite).ok_or(RenderError::AllBehindCamera { view: k })?;
            Ok(to_image(settings, data.iter().map(|d| d.v)))
        })
        .collect()
}

/// Differentiable rendering. `params` holds `2M` nodes ordered
/// `[azimuths.., elevations..]` in degrees.
pub fn render_views(
    graph: &mut Graph,
    mesh: &TriangleMesh,
    params: &[NodeId],
    distance: NodeId,
    settings: &RenderSettings,
    light: LightMode,
) -> Result<Vec<RenderedView>> {
    settings.validate()?;
    if params.is_empty() || !params.len().is_multiple_of(2) {
        return Err(RenderError::LengthMismatch { expected: 2 * (params.len() / 2).max(1), got: params.len() });
    }
    let m = params.len() / 2;
    let dist = graph.value(distance);
    let angles: Vec<(f64, f64)> = (0..m).map(|k| (graph.value(params[k]), graph.value(params[m + k]))).collect();
    let lights = light_directions(light, m);
    let images: Vec<Vec<Dual<3>>> = angles
        .par_iter()
        .zip(lights)
        .enumerate()
        .map(|(k, (&(a, e), l))| {
            let cam = Camera::<3>::new(a, e, dist, settings);
            rasterize(mesh, &cam, settings, l, Output::Composite).ok_or(RenderError::AllBehindCamera { view: k })
        })
        .collect::<Result<_>>()?;
    let shape = vec![settings.image_height, settings.image_width, settings.channels];
    let mut views = Vec::with_capacity(m);
    for (k, img) in images.into_iter().enumerate() {
        let parents = [params[k], params[m + k], distance];
        let mut nodes = Vec::with_capacity(img.len() * settings.channels);
        for px in img {
            let id = if px.d.iter().all(|&g| g == 0.0) {
                graph.constant(px.v)
            } else {
                let edges = [(parents[0], px.d[0]), (parents[1], px.d[1]), (parents[2], px.d[2])];
                graph.custom(px.v, &edges)?
            };
            nodes.extend(std::iter::repeat_n(id, settings.channels));
        }
        views.push(RenderedView { pixels: TensorView::new(shape.clone(), nodes)?, view: k });
    }
    Ok(views)
}

/// Binary occupancy: 1 where a pixel center lies inside any projected face.
pub fn hard_silhouette(mesh: &TriangleMesh, pose: &CameraPose, settings: &RenderSettings) -> Result<Image> {
    settings.validate()?;
    let cam = Camera::<0>::new(pose.azimuth_deg, pose.elevation_deg, pose.distance, settings);
    let (verts, any) = cam.project_all(mesh, settings.near);
    if !any {
        return Err(RenderError::AllBehindCamera { view: 0 });
    }
    let (h, w) = (settings.image_height, settings.image_width);
    let mut data = vec![0.0; h * w];
    for face in mesh.faces() {
        let Some(tri) = screen_triangle(&verts, face, settings.near) else { continue };
        for (i, px) in data.iter_mut().enumerate() {
            let p = pixel_center(i / w, i % w, settings);
            if coverage(p, &tri).is_some_and(|c| c.sign > 0.0) {
                *px = 1.0;
            }
        }
    }
    Ok(to_image(&RenderSettings { channels: 1, ..settings.clone() }, data))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Output {
    Silhouette,
    Shaded,
    Composite,
}

#[derive(Clone, Copy)]
struct ProjVertex<const N: usize> {
    x: Dual<N>,
    y: Dual<N>,
    depth: Dual<N>,
}

/// Camera basis and projection with derivatives seeded in
/// (azimuth°, elevation°, distance).
struct Camera<const N: usize> {
    right: [Dual<N>; 3],
    up: [Dual<N>; 3],
    forward: [Dual<N>; 3],
    distance: Dual<N>,
    tan_half_fov: f64,
    aspect: f64,
}

impl<const N: usize> Camera<N> {
    fn new(azimuth_deg: f64, elevation_deg: f64, distance: f64, s: &RenderSettings) -> Self {
        let deg = std::f64::consts::PI / 180.0;
        let a = Dual::<N>::variable(azimuth_deg.to_radians(), 0, deg);
        let e = Dual::<N>::variable(elevation_deg.to_radians(), 1, deg);
        let (sa, ca, se, ce) = (a.sin(), a.cos(), e.sin(), e.cos());
        let zero = Dual::constant(0.0);
        Self {
            right: [ca, zero, -sa],
            up: [-(sa * se), ce, -(ca * se)],
            forward: [-(ce * sa), -se, -(ce * ca)],
            distance: Dual::variable(distance, 2, 1.0),
            tan_half_fov: (s.fov_deg.to_radians() / 2.0).tan(),
            aspect: s.image_width as f64 / s.image_height as f64,
        }
    }

    fn project(&self, p: Vec3) -> ProjVertex<N> {
        let dot = |b: &[Dual<N>; 3]| b[0] * p[0] + b[1] * p[1] + b[2] * p[2];
        let depth = dot(&self.forward) + self.distance;
        let scale = depth * self.tan_half_fov;
        ProjVertex { x: dot(&self.right) / (scale * self.aspect), y: dot(&self.up) / scale, depth }
    }

    fn project_all(&self, mesh: &TriangleMesh, near: f64) -> (Vec<ProjVertex<N>>, bool) {
        let verts: Vec<_> = mesh.vertices().iter().map(|&p| self.project(p)).collect();
        let any = verts.iter().any(|v| v.depth.v > near);
        (verts, any)
    }
}

type Tri<const N: usize> = [[Dual<N>; 2]; 3];

fn screen_triangle<const N: usize>(verts: &[ProjVertex<N>], face: &[usize; 3], near: f64) -> Option<Tri<N>> {
    let v = face.map(|i| verts[i]);
    v.iter().all(|q| q.depth.v > near).then(|| v.map(|q| [q.x, q.y]))
}

fn pixel_center(row: usize, col: usize, s: &RenderSettings) -> [f64; 2] {
    [
        (2 * col + 1) as f64 / s.image_width as f64 - 1.0,
        1.0 - (2 * row + 1) as f64 / s.image_height as f64,
    ]
}

struct Coverage<const N: usize> {
    dist2: Dual<N>,
    sign: f64,
    /// Screen-space barycentric weights, unclipped.
    bary: [Dual<N>; 3],
}

fn cross2<const N: usize>(a: [Dual<N>; 2], b: [Dual<N>; 2]) -> Dual<N> {
    a[0] * b[1] - a[1] * b[0]
}

fn coverage<const N: usize>(p: [f64; 2], t: &Tri<N>) -> Option<Coverage<N>> {
    let sub = |a: [Dual<N>; 2], b: [Dual<N>; 2]| [a[0] - b[0], a[1] - b[1]];
    let area = cross2(sub(t[1], t[0]), sub(t[2], t[0]));
    if area.v.abs() < DEGENERATE_AREA {
        return None;
    }
    let pd = [Dual::constant(p[0]), Dual::constant(p[1])];
    let rel: [[Dual<N>; 2]; 3] = [sub(t[0], pd), sub(t[1], pd), sub(t[2], pd)];
    let bary = [
        cross2(rel[1], rel[2]) / area,
        cross2(rel[2], rel[0]) / area,
        cross2(rel[0], rel[1]) / area,
    ];
    let inside = bary.iter().all(|w| w.v >= 0.0);
    let mut best: Option<Dual<N>> = None;
    for k in 0..3 {
        let (a, b) = (t[k], t[(k + 1) % 3]);
        let e = sub(b, a);
        let len2 = e[0] * e[0] + e[1] * e[1];
        let ap = sub(pd, a);
        let s = ((ap[0] * e[0] + ap[1] * e[1]) / len2).clamp(0.0, 1.0);
        let q = [ap[0] - e[0] * s, ap[1] - e[1] * s];
        let d2 = q[0] * q[0] + q[1] * q[1];
        if best.is_none_or(|b| d2.v < b.v) {
            best = Some(d2);
        }
    }
    Some(Coverage { dist2: best?, sign: if inside { 1.0 } else { -1.0 }, bary })
}

#[derive(Clone, Copy)]
struct Entry<const N: usize> {
    influence: Dual<N>,
    zt: Dual<N>,
    color: Dual<N>,
}

struct Aggregate<const N: usize> {
    silhouette: Dual<N>,
    shade: Dual<N>,
}

fn aggregate<const N: usize>(entries: &[Entry<N>], gamma: f64, background: f64) -> Aggregate<N> {
    let mut miss = Dual::constant(1.0);
    let mut zmax: f64 = 0.0;
    for e in entries {
        miss = miss * (Dual::constant(1.0) - e.influence);
        zmax = zmax.max(e.zt.v);
    }
    // exp(−zmax/γ) is the background weight; the shift by zmax cancels in
    // the ratio, so treating it as a constant leaves derivatives exact.
    let eb = (-zmax / gamma).exp();
    let mut num = Dual::constant(eb * background);
    let mut den = Dual::constant(eb);
    for e in entries {
        let w = e.influence * ((e.zt - zmax) * (1.0 / gamma)).exp();
        num = num + w * e.color;
        den = den + w;
    }
    Aggregate { silhouette: Dual::constant(1.0) - miss, shade: num / den }
}

fn to_image(s: &RenderSettings, values: impl IntoIterator<Item = f64>) -> Image {
    let c = s.channels;
    let data = values.into_iter().flat_map(|v| std::iter::repeat_n(v, c)).collect();
    Image { height: s.image_height, width: s.image_width, channels: c, data }
}

fn render_plain(
    mesh: &TriangleMesh,
    pose: &CameraPose,
    settings: &RenderSettings,
    light: Option<Vec3>,
    out: Output,
) -> Result<Image> {
    settings.validate()?;
    let cam = Camera::<0>::new(pose.azimuth_deg, pose.elevation_deg, pose.distance, settings);
    let data = rasterize(mesh, &cam, settings, light, out).ok_or(RenderError::AllBehindCamera { view: 0 })?;
    Ok(to_image(settings, data.iter().map(|d| d.v)))
}

/// One value per pixel (channels not yet replicated), or `None` when every
/// vertex sits behind the camera.
fn rasterize<const N: usize>(
    mesh: &TriangleMesh,
    cam: &Camera<N>,
    s: &RenderSettings,
    light: Option<Vec3>,
    out: Output,
) -> Option<Vec<Dual<N>>> {
    let (verts, any) = cam.project_all(mesh, s.near);
    if !any {
        return None;
    }
    let (h, w) = (s.image_height, s.image_width);
    let (wf, hf) = (w as f64, h as f64);
    let threshold = s.prune_threshold();
    let reach = (threshold * s.sigma).sqrt();
    let depth_span = s.far - s.near;
    let mut entries: Vec<Vec<Entry<N>>> = vec![Vec::new(); h * w];

    for (fi, face) in mesh.faces().iter().enumerate() {
        let Some(tri) = screen_triangle(&verts, face, s.near) else { continue };
        let n = mesh.face_normals()[fi];
        let cos = match light {
            Some(l) => Dual::constant(geom::dot(n, l)),
            None => cam.forward[0] * n[0] + cam.forward[1] * n[1] + cam.forward[2] * n[2],
        };
        let color = cos.abs() * s.diffuse + s.ambient;
        let plain: Tri<0> = tri.map(|q| [Dual::constant(q[0].v), Dual::constant(q[1].v)]);
        if coverage([0.0, 0.0], &plain).is_none() {
            continue;
        }
        let xs = tri.map(|q| q[0].v);
        let ys = tri.map(|q| q[1].v);
        let (x0, x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min) - reach, xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + reach);
        let (y0, y1) = (ys.iter().cloned().fold(f64::INFINITY, f64::min) - reach, ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + reach);
        let col_lo = (((x0 + 1.0) * wf - 1.0) / 2.0).ceil().max(0.0);
        let col_hi = (((x1 + 1.0) * wf - 1.0) / 2.0).floor().min(wf - 1.0);
        let row_lo = (((1.0 - y1) * hf - 1.0) / 2.0).ceil().max(0.0);
        let row_hi = (((1.0 - y0) * hf - 1.0) / 2.0).floor().min(hf - 1.0);
        if col_lo > col_hi || row_lo > row_hi {
            continue;
        }
        let z = [verts[face[0]].depth, verts[face[1]].depth, verts[face[2]].depth];
        for row in row_lo as usize..=row_hi as usize {
            for col in col_lo as usize..=col_hi as usize {
                let p = pixel_center(row, col, s);
                let Some(pc) = coverage(p, &plain) else { continue };
                if pc.sign < 0.0 && pc.dist2.v / s.sigma > threshold {
                    continue;
                }
                let Some(c) = coverage(p, &tri) else { continue };
                let influence = (c.dist2 * (c.sign / s.sigma)).sigmoid();
                let zt = if out == Output::Silhouette {
                    Dual::constant(0.0)
                } else {
                    let wts = c.bary.map(|b| b.clamp(0.0, 1.0));
                    let total = wts[0] + wts[1] + wts[2];
                    let inv_z = (wts[0] / z[0] + wts[1] / z[1] + wts[2] / z[2]) / total;
                    (Dual::constant(s.far) - inv_z.recip()) * (1.0 / depth_span)
                };
                entries[row * w + col].push(Entry { influence, zt, color });
            }
        }
    }

    Some(
        entries
            .iter()
            .map(|e| {
                if e.is_empty() {
                    return Dual::constant(if out == Output::Silhouette { 0.0 } else { s.background });
                }
                let agg = aggregate(e, s.gamma, s.background);
                match out {
                    Output::Silhouette => agg.silhouette,
                    Output::Shaded => agg.shade,
                    Output::Composite => agg.silhouette * (agg.shade - s.background) + s.background,
                }
            })
            .collect(),
    )
}
