//! End-to-end training of the multi-view classifier, with fixed views or with
//! views predicted per shape by the regressor G, plus evaluation protocols.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax_cross_entropy_values, AutodiffError, Graph, NodeId, TensorView};
use crate::camera::{
    apply_offset, apply_offset_nodes, circular_config, default_bounds, random_config, spherical_config, BoundMode, CameraError,
    SceneParams, DEFAULT_CIRCULAR_ELEVATION, DEFAULT_DISTANCE,
};
use crate::dataset::{Dataset, LabeledShape};
use crate::mesh::{random_rotation, sample_points, MeshError, PointCloud, Rotate, RotationMode, TriangleMesh};
use crate::nn::{
    fusion_point_forward, init_params, late_fusion_forward, mlp_values, mvcnn_head_forward, mvtn_forward, point_encoder_forward,
    view_cnn_forward, BoundParams, Group, ModelSpec, MvtnVariant, NnError, ParameterStore,
};
use crate::render::{render_views, render_views_values, Image, LightMode, RenderError, RenderSettings};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("checkpoint has {checkpoint} classes but the dataset has {dataset}")]
    ClassCountMismatch { checkpoint: usize, dataset: usize },
    #[error("checkpoint has no trained view regressor")]
    MissingMvtn,
    #[error("dataset has no shapes to {0}")]
    EmptyDataset(&'static str),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Where the views come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Views fixed at `u0`; H and G are not used.
    Fixed,
    Direct,
    Offset,
}

impl Variant {
    pub fn mvtn(self) -> Option<MvtnVariant> {
        match self {
            Variant::Fixed => None,
            Variant::Direct => Some(MvtnVariant::Direct),
            Variant::Offset => Some(MvtnVariant::Offset),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseConfig {
    Circular,
    Spherical,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MainOptimizer {
    Adamw,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Regularizers {
    pub view_dropout_p: f64,
    pub view_noise_std_deg: f64,
    /// Adds a learned camera distance `d0 + 0.5·tanh(raw)` to G's outputs.
    pub learn_distance: bool,
}

impl Default for Regularizers {
    fn default() -> Self {
        Self { view_dropout_p: 0.0, view_noise_std_deg: 0.0, learn_distance: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub base_config: BaseConfig,
    pub views: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_mvtn: f64,
    pub weight_decay: f64,
    /// Global-norm clip for the (H, G) gradients.
    pub clip_norm: f64,
    /// Also clip the (f, C) gradients at `clip_norm`.
    pub clip_main: bool,
    pub main_optimizer: MainOptimizer,
    pub momentum: f64,
    pub circular_elevation_deg: f64,
    pub distance: f64,
    /// Points sampled per shape for the point encoder.
    pub points: usize,
    /// Random light per view while training; evaluation always uses the
    /// fixed camera light.
    pub random_light_train: bool,
    pub regularizers: Regularizers,
    pub late_fusion: bool,
    pub render: RenderSettings,
    pub seed: u64,
    pub eval_train_each_epoch: bool,
    pub eval_test_each_epoch: bool,
    /// Stop once the fixed-light training accuracy reaches this value
    /// (requires `eval_train_each_epoch`).
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Offset,
            base_config: BaseConfig::Circular,
            views: 4,
            epochs: 20,
            batch_size: 8,
            lr_main: 3e-4,
            lr_mvtn: 1e-3,
            weight_decay: 0.01,
            clip_norm: 30.0,
            clip_main: false,
            main_optimizer: MainOptimizer::Adamw,
            momentum: 0.9,
            circular_elevation_deg: DEFAULT_CIRCULAR_ELEVATION,
            distance: DEFAULT_DISTANCE,
            points: 256,
            random_light_train: true,
            regularizers: Regularizers::default(),
            late_fusion: false,
            render: RenderSettings::default(),
            seed: 0,
            eval_train_each_epoch: false,
            eval_test_each_epoch: true,
            stop_at_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lr_main > 0.0 && self.lr_mvtn > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight_decay must be ≥ 0 and momentum in [0, 1)");
        }
        let r = &self.regularizers;
        if !(0.0..1.0).contains(&r.view_dropout_p) {
            return bad("view_dropout_p must lie in [0, 1)");
        }
        if !(r.view_noise_std_deg >= 0.0 && r.view_noise_std_deg.is_finite()) {
            return bad("view_noise_std_deg must be finite and ≥ 0");
        }
        if self.views == 0 || self.batch_size == 0 {
            return bad("views and batch_size must be ≥ 1");
        }
        if self.points == 0 && (self.variant != Variant::Fixed || self.late_fusion) {
            return bad("the point encoder needs at least one point");
        }
        if r.learn_distance && self.variant == Variant::Fixed {
            return bad("learn_distance needs a view regressor");
        }
        if !(self.distance > 0.0) {
            return bad("distance must be positive");
        }
        self.render.validate()?;
        Ok(())
    }

    /// The initial view configuration `u0`.
    pub fn base_views(&self) -> Result<SceneParams> {
        Ok(match self.base_config {
            BaseConfig::Circular => circular_config(self.views, self.circular_elevation_deg, self.distance)?,
            BaseConfig::Spherical => spherical_config(self.views, self.distance)?,
            BaseConfig::Random => random_config(self.views, crate::derive_seed(self.seed, TAG_BASE), self.distance)?,
        })
    }

    pub fn model_spec(&self, classes: usize) -> ModelSpec {
        let r = &self.render;
        let mut spec = ModelSpec::desk(self.views, classes, [r.image_height, r.image_width, r.channels]);
        if self.late_fusion {
            spec = spec.with_fusion();
        }
        spec.learn_distance = self.regularizers.learn_distance;
        spec
    }

    fn bound_mode(&self) -> BoundMode {
        match self.variant {
            Variant::Direct => BoundMode::Direct,
            _ => BoundMode::Offset,
        }
    }
}

const TAG_BASE: u64 = 0xba5e;
const TAG_SHUFFLE: u64 = 0x5f1e;
const TAG_EPOCH: u64 = 0xe90c;
const TAG_EVAL: u64 = 0xe7a1;
const TAG_POINTS: u64 = 1;
const TAG_LIGHT: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_NOISE: u64 = 4;

/// `−log softmax(logits)[label]` and its gradient.
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(TrainError::LabelOutOfRange { label, classes: logits.len() });
    }
    let (loss, mut grad) = softmax_cross_entropy_values(logits, label);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// AdamW with decoupled decay: `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hp: &AdamParams) -> Result<()> {
    let n = params.len();
    for got in [grads.len(), state.m.len(), state.v.len()] {
        if got != n {
            return Err(TrainError::ShapeMismatch { expected: n, got });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= hp.lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * params[i]);
    }
    Ok(())
}

/// Heavy ball: `v ← μ·v + g`, `p ← p − lr·v`. The velocity lives in `state.m`.
pub fn sgd_momentum_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, momentum: f64) -> Result<()> {
    let n = params.len();
    for got in [grads.len(), state.m.len()] {
        if got != n {
            return Err(TrainError::ShapeMismatch { expected: n, got });
        }
    }
    state.step += 1;
    for i in 0..n {
        state.m[i] = momentum * state.m[i] + grads[i];
        params[i] -= lr * state.m[i];
    }
    Ok(())
}

/// Rescales `grads` in place so the global ℓ2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> Result<f64> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    Ok(norm)
}

/// Which views survive; never all dropped (an all-dropped draw is redrawn).
pub fn view_dropout_mask(views: usize, p: f64, seed: u64) -> Vec<bool> {
    if p <= 0.0 || views == 0 {
        return vec![true; views];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let keep: Vec<bool> = (0..views).map(|_| rng.random::<f64>() >= p).collect();
        if keep.iter().any(|&k| k) {
            return keep;
        }
    }
}

/// Dropped views become uniform background images.
pub fn view_dropout(images: &[Image], p: f64, seed: u64, background: f64) -> Vec<Image> {
    let keep = view_dropout_mask(images.len(), p, seed);
    images
        .iter()
        .zip(keep)
        .map(|(img, k)| if k { img.clone() } else { Image { data: vec![background; img.data.len()], ..img.clone() } })
        .collect()
}

fn noise_offsets(len: usize, std_deg: f64, seed: u64) -> Vec<f64> {
    let normal = Normal::new(0.0, std_deg).expect("validated std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| normal.sample(&mut rng)).collect()
}

fn noisy(v: f64, delta: f64, elevation: bool) -> f64 {
    let x = v + delta;
    if elevation { x.clamp(-90.0, 90.0) } else { x }
}

/// Gaussian jitter on every angle; elevations clamped to `[−90, 90]`.
pub fn view_noise(u: &SceneParams, std_deg: f64, seed: u64) -> SceneParams {
    if std_deg <= 0.0 {
        return u.clone();
    }
    let m = u.num_views();
    let deltas = noise_offsets(u.values.len(), std_deg, seed);
    let values = u.values.iter().zip(&deltas).enumerate().map(|(i, (&v, &d))| noisy(v, d, i >= m)).collect();
    SceneParams { values, distance: u.distance }
}

fn view_noise_nodes(g: &mut Graph, params: &[NodeId], std_deg: f64, seed: u64) -> Vec<NodeId> {
    let m = params.len() / 2;
    let deltas = noise_offsets(params.len(), std_deg, seed);
    params
        .iter()
        .zip(deltas)
        .enumerate()
        .map(|(i, (&p, d))| {
            let v = g.value(p);
            let x = noisy(v, d, i >= m);
            if x == v + d { g.add_const(p, d) } else { g.constant(x) }
        })
        .collect()
}

/// Everything random about one forward pass.
#[derive(Clone, Copy, Debug)]
struct SampleCtx {
    points_seed: u64,
    light: LightMode,
    dropout_seed: Option<u64>,
    noise_seed: Option<u64>,
}

impl SampleCtx {
    fn train(cfg: &TrainConfig, epoch: usize, shape_index: usize) -> Self {
        let base = crate::derive_seed(crate::derive_seed(cfg.seed, TAG_EPOCH ^ ((epoch as u64) << 16)), shape_index as u64);
        let light =
            if cfg.random_light_train { LightMode::Random { seed: crate::derive_seed(base, TAG_LIGHT) } } else { LightMode::Fixed };
        Self {
            points_seed: crate::derive_seed(base, TAG_POINTS),
            light,
            dropout_seed: (cfg.regularizers.view_dropout_p > 0.0).then(|| crate::derive_seed(base, TAG_DROPOUT)),
            noise_seed: (cfg.regularizers.view_noise_std_deg > 0.0).then(|| crate::derive_seed(base, TAG_NOISE)),
        }
    }

    fn eval(cfg: &TrainConfig, shape_index: usize) -> Self {
        let base = crate::derive_seed(crate::derive_seed(cfg.seed, TAG_EVAL), shape_index as u64);
        Self { points_seed: crate::derive_seed(base, TAG_POINTS), light: LightMode::Fixed, dropout_seed: None, noise_seed: None }
    }
}

/// Which parameter groups enter a graph, and whether they train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binding {
    Train,
    TrainFrozenMvtn,
    /// Every group constant.
    Eval,
}

fn bindings(cfg: &TrainConfig, binding: Binding) -> Vec<(Group, bool)> {
    let mut out = Vec::new();
    let mvtn_trains = binding == Binding::Train;
    let main_trains = binding != Binding::Eval;
    if cfg.variant != Variant::Fixed {
        out.push((Group::PointEncoder, mvtn_trains));
        out.push((Group::Mvtn, mvtn_trains));
    }
    out.push((Group::Backbone, main_trains));
    out.push((Group::Head, main_trains));
    if cfg.late_fusion {
        out.push((Group::Fusion, main_trains));
    }
    out
}

/// One forward graph. `views` are the `2M` angle nodes after bounding (and
/// noise when training).
pub struct Forward {
    pub graph: Graph,
    pub params: BoundParams,
    pub views: Vec<NodeId>,
    pub distance: NodeId,
    pub logits: Vec<NodeId>,
    pub signature: Vec<NodeId>,
    pub loss: NodeId,
}

fn build_forward(
    store: &ParameterStore,
    cfg: &TrainConfig,
    mesh: &TriangleMesh,
    label: usize,
    ctx: SampleCtx,
    binding: Binding,
) -> Result<Forward> {
    if label >= store.spec.classes {
        return Err(TrainError::LabelOutOfRange { label, classes: store.spec.classes });
    }
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, store, &bindings(cfg, binding))?;
    let u0 = cfg.base_views()?;
    let needs_points = cfg.variant != Variant::Fixed || cfg.late_fusion;
    let cloud: Option<PointCloud> = if needs_points { Some(sample_points(mesh, cfg.points, ctx.points_seed)?) } else { None };

    let mut views: Vec<NodeId> = match cfg.variant.mvtn() {
        None => u0.values.iter().map(|&v| g.constant(v)).collect(),
        Some(variant) => {
            let feats = point_encoder_forward(&mut g, store, &p, cloud.as_ref().expect("points sampled"))?;
            let raw = mvtn_forward(&mut g, store, &p, &u0, &feats, variant)?;
            let base = if variant == MvtnVariant::Direct { SceneParams::zeros(cfg.views, cfg.distance) } else { u0.clone() };
            apply_offset_nodes(&mut g, &base, &raw, &default_bounds(cfg.bound_mode(), cfg.views))?
        }
    };
    if let Some(seed) = ctx.noise_seed {
        views = view_noise_nodes(&mut g, &views, cfg.regularizers.view_noise_std_deg, seed);
    }
    let distance = match p.distance_node() {
        Some(raw) => {
            let raw = raw?;
            let t = g.value(raw).tanh();
            g.custom(cfg.distance + 0.5 * t, &[(raw, 0.5 * (1.0 - t * t))])?
        }
        None => g.constant(cfg.distance),
    };

    let settings = &cfg.render;
    let shape = [settings.image_height, settings.image_width, settings.channels];
    let mut images: Vec<TensorView> = if binding == Binding::Eval {
        // Same pixel values as the differentiable path, without the dual parts.
        let angles = SceneParams { values: g.values_of(&views), distance: g.value(distance) };
        render_views_values(mesh, &angles, settings, ctx.light)?
            .into_iter()
            .map(|img| TensorView::constants(&mut g, &shape, &img.data))
            .collect::<std::result::Result<_, _>>()?
    } else {
        render_views(&mut g, mesh, &views, distance, settings, ctx.light)?.into_iter().map(|v| v.pixels).collect()
    };
    if let Some(seed) = ctx.dropout_seed {
        let keep = view_dropout_mask(cfg.views, cfg.regularizers.view_dropout_p, seed);
        let blank = vec![settings.background; shape.iter().product()];
        for (img, k) in images.iter_mut().zip(keep) {
            if !k {
                *img = TensorView::constants(&mut g, &shape, &blank)?;
            }
        }
    }
    let mut features = Vec::with_capacity(images.len());
    for img in &images {
        features.push(view_cnn_forward(&mut g, store, &p, img)?);
    }
    let head = if cfg.late_fusion {
        let point_feats = fusion_point_forward(&mut g, store, &p, cloud.as_ref().expect("points sampled"))?;
        late_fusion_forward(&mut g, store, &p, &point_feats, &features)?
    } else {
        mvcnn_head_forward(&mut g, store, &p, &features)?
    };
    let loss = g.softmax_cross_entropy(&head.logits, label)?;
    Ok(Forward { graph: g, params: p, views, distance, logits: head.logits, signature: head.signature, loss })
}

/// The differentiable training forward pass for shape `shape_index` in epoch
/// `epoch`, exposed for gradient checks.
pub fn training_forward(
    store: &ParameterStore,
    cfg: &TrainConfig,
    mesh: &TriangleMesh,
    label: usize,
    epoch: usize,
    shape_index: usize,
) -> Result<Forward> {
    build_forward(store, cfg, mesh, label, SampleCtx::train(cfg, epoch, shape_index), Binding::Train)
}

/// Full-length gradient of the loss (zero for groups that are not trained).
pub fn forward_gradient(fwd: &mut Forward, len: usize, ranges: impl Fn(Group) -> Range<usize>) -> Result<Vec<f64>> {
    fwd.graph.backward(fwd.loss)?;
    let mut grad = vec![0.0; len];
    for (group, nodes) in fwd.params.leaves() {
        if let Some(gs) = fwd.graph.grads_of(nodes) {
            grad[ranges(*group)].copy_from_slice(&gs);
        }
    }
    Ok(grad)
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best }).0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean loss and accuracy of the training passes (random light,
    /// regularizers on); for the initial entry, fixed-light evaluation.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_train_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub skipped_steps: usize,
    pub mean_mvtn_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    /// Fixed-light evaluation before any update.
    pub initial: EpochMetrics,
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsHistory {
    /// `epoch,split,loss,accuracy` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy\n");
        for m in std::iter::once(&self.initial).chain(&self.epochs) {
            out.push_str(&format!("{},train,{},{}\n", m.epoch, m.train_loss, m.train_accuracy));
            if let Some(a) = m.eval_train_accuracy {
                out.push_str(&format!("{},train_eval,,{}\n", m.epoch, a));
            }
            if let (Some(l), Some(a)) = (m.test_loss, m.test_accuracy) {
                out.push_str(&format!("{},test,{},{}\n", m.epoch, l, a));
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerStates {
    /// Over the contiguous (H, G) span.
    pub mvtn: AdamState,
    /// Over the contiguous (f, C, fusion) span.
    pub main: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParameterStore,
    pub optim: OptimizerStates,
    /// Completed epochs. All randomness derives from `config.seed` and the
    /// epoch index, so this is the whole RNG state.
    pub epoch: usize,
    pub history: MetricsHistory,
    pub class_names: Vec<String>,
    pub skipped_steps: usize,
    pub frozen_mvtn: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    spec: ModelSpec,
    tensors: Vec<crate::nn::TensorInfo>,
    epoch: usize,
    history: MetricsHistory,
    class_names: Vec<String>,
    skipped_steps: usize,
    frozen_mvtn: bool,
    mvtn_step: u64,
    main_step: u64,
}

fn span(store: &ParameterStore, groups: &[Group]) -> Range<usize> {
    let ranges: Vec<Range<usize>> = groups.iter().map(|&g| store.group_range(g)).filter(|r| !r.is_empty()).collect();
    match (ranges.first(), ranges.last()) {
        (Some(a), Some(b)) => a.start..b.end,
        _ => 0..0,
    }
}

fn mvtn_span(store: &ParameterStore) -> Range<usize> {
    span(store, &[Group::PointEncoder, Group::Mvtn])
}

fn main_span(store: &ParameterStore) -> Range<usize> {
    span(store, &[Group::Backbone, Group::Head, Group::Fusion])
}

impl Checkpoint {
    pub fn meta(&self) -> serde_json::Value {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            spec: self.params.spec.clone(),
            tensors: self.params.tensors.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            class_names: self.class_names.clone(),
            skipped_steps: self.skipped_steps,
            frozen_mvtn: self.frozen_mvtn,
            mvtn_step: self.optim.mvtn.step,
            main_step: self.optim.main.step,
        };
        serde_json::to_value(meta).expect("metadata serializes")
    }

    pub fn from_meta(meta: serde_json::Value, data: Vec<f64>, mut optim: OptimizerStates) -> std::result::Result<Self, String> {
        let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| e.to_string())?;
        let total = meta.tensors.last().map_or(0, |t| t.range().end);
        if total != data.len() {
            return Err(format!("parameter block holds {} values, layout needs {total}", data.len()));
        }
        optim.mvtn.step = meta.mvtn_step;
        optim.main.step = meta.main_step;
        let params = ParameterStore { spec: meta.spec, tensors: meta.tensors, data };
        for (state, r) in [(&optim.mvtn, mvtn_span(&params)), (&optim.main, main_span(&params))] {
            if state.m.len() != r.len() || (state.v.len() != r.len() && !state.v.is_empty()) {
                return Err("optimizer state does not match the parameter layout".into());
            }
        }
        Ok(Self {
            config: meta.config,
            params,
            optim,
            epoch: meta.epoch,
            history: meta.history,
            class_names: meta.class_names,
            skipped_steps: meta.skipped_steps,
            frozen_mvtn: meta.frozen_mvtn,
        })
    }

    pub fn has_mvtn(&self) -> bool {
        self.config.variant != Variant::Fixed
    }
}

fn check_classes(ck: &Checkpoint, dataset: &Dataset) -> Result<()> {
    if ck.params.spec.classes != dataset.num_classes() {
        return Err(TrainError::ClassCountMismatch { checkpoint: ck.params.spec.classes, dataset: dataset.num_classes() });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// Pre-classifier activations, in dataset order.
    pub signatures: Vec<Vec<f64>>,
}

fn evaluate_meshes(store: &ParameterStore, cfg: &TrainConfig, items: &[(&TriangleMesh, usize)]) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(TrainError::EmptyDataset("evaluate"));
    }
    let outs: Vec<(f64, usize, Vec<f64>)> = items
        .par_iter()
        .enumerate()
        .map(|(i, &(mesh, label))| {
            let fwd = build_forward(store, cfg, mesh, label, SampleCtx::eval(cfg, i), Binding::Eval)?;
            let g = &fwd.graph;
            Ok((g.value(fwd.loss), argmax(&g.values_of(&fwd.logits)), g.values_of(&fwd.signature)))
        })
        .collect::<Result<_>>()?;
    let n = items.len() as f64;
    let loss = outs.iter().map(|o| o.0).sum::<f64>() / n;
    let correct = outs.iter().zip(items).filter(|(o, it)| o.1 == it.1).count();
    let (predictions, signatures) = outs.into_iter().map(|o| (o.1, o.2)).unzip();
    Ok(Evaluation { loss, accuracy: correct as f64 / n, predictions, signatures })
}

fn evaluate_shapes(store: &ParameterStore, cfg: &TrainConfig, shapes: &[&LabeledShape]) -> Result<Evaluation> {
    let items: Vec<(&TriangleMesh, usize)> = shapes.iter().map(|s| (&s.mesh, s.label)).collect();
    evaluate_meshes(store, cfg, &items)
}

/// Fixed-light evaluation over every shape in `dataset`.
pub fn evaluate(ck: &Checkpoint, dataset: &Dataset) -> Result<Evaluation> {
    check_classes(ck, dataset)?;
    let shapes: Vec<&LabeledShape> = dataset.shapes.iter().collect();
    evaluate_shapes(&ck.params, &ck.config, &shapes)
}

pub fn evaluate_accuracy(ck: &Checkpoint, dataset: &Dataset) -> Result<f64> {
    Ok(evaluate(ck, dataset)?.accuracy)
}

/// The views a checkpoint uses for one shape (evaluation sampling).
pub fn predict_views(ck: &Checkpoint, mesh: &TriangleMesh, shape_index: usize) -> Result<SceneParams> {
    let cfg = &ck.config;
    let u0 = cfg.base_views()?;
    let Some(variant) = cfg.variant.mvtn() else { return Ok(u0) };
    let store = &ck.params;
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, store, &[(Group::PointEncoder, false), (Group::Mvtn, false)])?;
    let cloud = sample_points(mesh, cfg.points, SampleCtx::eval(cfg, shape_index).points_seed)?;
    let feats = point_encoder_forward(&mut g, store, &p, &cloud)?;
    let raw = mvtn_forward(&mut g, store, &p, &u0, &feats, variant)?;
    let base = if variant == MvtnVariant::Direct { SceneParams::zeros(cfg.views, cfg.distance) } else { u0 };
    let mut u = apply_offset(&base, &g.values_of(&raw), &default_bounds(cfg.bound_mode(), cfg.views))?;
    if let Some(i) = store.find("g.distance") {
        u.distance = cfg.distance + 0.5 * store.tensor(i)[0].tanh();
    }
    Ok(u)
}

/// Signature features (last hidden activation of C) for every shape, under
/// evaluation conditions.
pub fn signatures(ck: &Checkpoint, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    check_classes(ck, dataset)?;
    dataset
        .shapes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let fwd = build_forward(&ck.params, &ck.config, &s.mesh, s.label, SampleCtx::eval(&ck.config, i), Binding::Eval)?;
            Ok(fwd.graph.values_of(&fwd.signature))
        })
        .collect()
}

fn initial_metrics(store: &ParameterStore, cfg: &TrainConfig, train: &[&LabeledShape], test: &[&LabeledShape]) -> Result<EpochMetrics> {
    let tr = evaluate_shapes(store, cfg, train)?;
    let te = if test.is_empty() { None } else { Some(evaluate_shapes(store, cfg, test)?) };
    Ok(EpochMetrics {
        epoch: 0,
        train_loss: tr.loss,
        train_accuracy: tr.accuracy,
        eval_train_accuracy: Some(tr.accuracy),
        test_loss: te.as_ref().map(|e| e.loss),
        test_accuracy: te.map(|e| e.accuracy),
        skipped_steps: 0,
        mean_mvtn_grad_norm: 0.0,
    })
}

/// Trains from scratch on the train split of `dataset`, evaluating on its
/// test split.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let store = init_params(&config.model_spec(dataset.num_classes()), config.seed)?;
    let ck = fresh_checkpoint(dataset, config, store, false)?;
    continue_training(ck, dataset, config.epochs)
}

fn fresh_checkpoint(dataset: &Dataset, config: &TrainConfig, store: ParameterStore, frozen_mvtn: bool) -> Result<Checkpoint> {
    let train_set = dataset.split(crate::dataset::Split::Train);
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    let test_set = dataset.split(crate::dataset::Split::Test);
    let initial = initial_metrics(&store, config, &train_set, &test_set)?;
    let optim = OptimizerStates {
        mvtn: AdamState::new(mvtn_span(&store).len()),
        main: AdamState::new(main_span(&store).len()),
    };
    Ok(Checkpoint {
        config: config.clone(),
        params: store,
        optim,
        epoch: 0,
        history: MetricsHistory { initial, epochs: Vec::new() },
        class_names: dataset.class_names.clone(),
        skipped_steps: 0,
        frozen_mvtn,
    })
}

/// Runs epochs `ck.epoch + 1 ..= until_epoch`. Resuming a saved checkpoint
/// continues exactly as an uninterrupted run would.
pub fn continue_training(mut ck: Checkpoint, dataset: &Dataset, until_epoch: usize) -> Result<Checkpoint> {
    let cfg = ck.config.clone();
    cfg.validate()?;
    if ck.class_names.len() != dataset.num_classes() {
        return Err(TrainError::ClassCountMismatch { checkpoint: ck.class_names.len(), dataset: dataset.num_classes() });
    }
    let train_set = dataset.split(crate::dataset::Split::Train);
    let test_set = dataset.split(crate::dataset::Split::Test);
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    let binding = if ck.frozen_mvtn { Binding::TrainFrozenMvtn } else { Binding::Train };
    let mvtn_r = mvtn_span(&ck.params);
    let main_r = main_span(&ck.params);
    let n_params = ck.params.len();
    let store_ranges: Vec<(Group, Range<usize>)> = Group::ALL.iter().map(|&g| (g, ck.params.group_range(g))).collect();
    let range_of = |g: Group| store_ranges.iter().find(|r| r.0 == g).expect("all groups").1.clone();

    while ck.epoch < until_epoch {
        let epoch = ck.epoch + 1;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, TAG_SHUFFLE ^ ((epoch as u64) << 16))));
        let (mut loss_sum, mut correct, mut skipped, mut norm_sum, mut steps) = (0.0, 0usize, 0usize, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, bool, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let s = train_set[i];
                    let mut fwd = build_forward(&ck.params, &cfg, &s.mesh, s.label, SampleCtx::train(&cfg, epoch, i), binding)?;
                    let loss = fwd.graph.value(fwd.loss);
                    let hit = argmax(&fwd.graph.values_of(&fwd.logits)) == s.label;
                    let grad = forward_gradient(&mut fwd, n_params, range_of)?;
                    Ok((loss, hit, grad))
                })
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; n_params];
            for (loss, hit, g) in &results {
                loss_sum += loss;
                correct += *hit as usize;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if grad.iter().any(|g| !g.is_finite()) {
                skipped += 1;
                continue;
            }
            let train_mvtn = cfg.variant != Variant::Fixed && !ck.frozen_mvtn;
            if train_mvtn {
                norm_sum += clip_global_norm(&mut grad[mvtn_r.clone()], cfg.clip_norm)?;
            }
            if cfg.clip_main {
                clip_global_norm(&mut grad[main_r.clone()], cfg.clip_norm)?;
            }
            steps += 1;
            if train_mvtn {
                let hp = AdamParams::new(cfg.lr_mvtn, cfg.weight_decay);
                adamw_step(&mut ck.params.data[mvtn_r.clone()], &grad[mvtn_r.clone()], &mut ck.optim.mvtn, &hp)?;
            }
            match cfg.main_optimizer {
                MainOptimizer::Adamw => {
                    let hp = AdamParams::new(cfg.lr_main, cfg.weight_decay);
                    adamw_step(&mut ck.params.data[main_r.clone()], &grad[main_r.clone()], &mut ck.optim.main, &hp)?;
                }
                MainOptimizer::SgdMomentum => {
                    sgd_momentum_step(&mut ck.params.data[main_r.clone()], &grad[main_r.clone()], &mut ck.optim.main, cfg.lr_main, cfg.momentum)?;
                }
            }
        }
        let n = train_set.len() as f64;
        let eval_train = if cfg.eval_train_each_epoch { Some(evaluate_shapes(&ck.params, &cfg, &train_set)?.accuracy) } else { None };
        let test = if cfg.eval_test_each_epoch && !test_set.is_empty() { Some(evaluate_shapes(&ck.params, &cfg, &test_set)?) } else { None };
        ck.skipped_steps += skipped;
        ck.history.epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            eval_train_accuracy: eval_train,
            test_loss: test.as_ref().map(|t| t.loss),
            test_accuracy: test.map(|t| t.accuracy),
            skipped_steps: skipped,
            mean_mvtn_grad_norm: if steps > 0 { norm_sum / steps as f64 } else { 0.0 },
        });
        ck.epoch = epoch;
        if let (Some(target), Some(acc)) = (cfg.stop_at_train_accuracy, eval_train) {
            if acc >= target {
                break;
            }
        }
    }
    Ok(ck)
}

/// Trains a fresh f and C on views from a frozen, copied (H, G).
pub fn train_with_frozen_mvtn(source: &Checkpoint, dataset: &Dataset, config: &TrainConfig) -> Result<Checkpoint> {
    if !source.has_mvtn() {
        return Err(TrainError::MissingMvtn);
    }
    let src = &source.config;
    let cfg = TrainConfig {
        variant: src.variant,
        base_config: src.base_config,
        views: src.views,
        circular_elevation_deg: src.circular_elevation_deg,
        distance: src.distance,
        points: src.points,
        regularizers: Regularizers { learn_distance: src.regularizers.learn_distance, ..config.regularizers.clone() },
        render: src.render.clone(),
        ..config.clone()
    };
    cfg.validate()?;
    let mut store = init_params(&cfg.model_spec(dataset.num_classes()), cfg.seed)?;
    for group in [Group::PointEncoder, Group::Mvtn] {
        let (dst, from) = (store.group_range(group), source.params.group_range(group));
        let same_layout = store.tensors.iter().filter(|t| t.group == group).map(|t| (&t.name, &t.shape)).eq(source
            .params
            .tensors
            .iter()
            .filter(|t| t.group == group)
            .map(|t| (&t.name, &t.shape)));
        if !same_layout {
            return Err(TrainError::MissingMvtn);
        }
        store.data[dst].copy_from_slice(&source.params.data[from]);
    }
    let ck = fresh_checkpoint(dataset, &cfg, store, true)?;
    continue_training(ck, dataset, cfg.epochs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `accuracies`.
    pub std: f64,
    pub mode: RotationMode,
    pub max_angle_deg: f64,
    /// Rotations skipped entirely (the zero-angle limit).
    pub bypass: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessOptions {
    pub mode: RotationMode,
    pub max_angle_deg: f64,
    pub repeats: usize,
    pub seed: u64,
    pub bypass: bool,
}

impl Default for RobustnessOptions {
    fn default() -> Self {
        Self { mode: RotationMode::YOnly, max_angle_deg: 180.0, repeats: 10, seed: 0, bypass: false }
    }
}

/// Accuracy under independent random test-time rotations, repeated.
pub fn robustness_eval(ck: &Checkpoint, dataset: &Dataset, opts: &RobustnessOptions) -> Result<RobustnessReport> {
    check_classes(ck, dataset)?;
    if opts.repeats == 0 {
        return Err(TrainError::InvalidRange("repeats must be ≥ 1".into()));
    }
    if !opts.bypass && !(opts.max_angle_deg > 0.0 && opts.max_angle_deg <= 180.0) {
        return Err(TrainError::InvalidRange(format!("max angle {} not in (0, 180]", opts.max_angle_deg)));
    }
    let mut accuracies = Vec::with_capacity(opts.repeats);
    for r in 0..opts.repeats {
        let acc = if opts.bypass {
            evaluate_accuracy(ck, dataset)?
        } else {
            let rseed = crate::derive_seed(opts.seed, r as u64);
            let meshes: Vec<TriangleMesh> = dataset
                .shapes
                .iter()
                .enumerate()
                .map(|(i, s)| Ok(s.mesh.rotated(&random_rotation(crate::derive_seed(rseed, i as u64), opts.mode, opts.max_angle_deg)?)))
                .collect::<Result<_>>()?;
            let items: Vec<(&TriangleMesh, usize)> = meshes.iter().zip(&dataset.shapes).map(|(m, s)| (m, s.label)).collect();
            evaluate_meshes(&ck.params, &ck.config, &items)?.accuracy
        };
        accuracies.push(acc);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = (accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    Ok(RobustnessReport { accuracies, mean, std, mode: opts.mode, max_angle_deg: opts.max_angle_deg, bypass: opts.bypass })
}

/// Value-only G output for a given feature vector; used by tests that probe
/// the regressor in isolation.
pub fn mvtn_raw_values(store: &ParameterStore, u0: &SceneParams, features: &[f64], variant: MvtnVariant) -> Vec<f64> {
    let mut x = crate::nn::mvtn_input_angles(u0, variant);
    x.extend_from_slice(features);
    mlp_values(&store.spec.mvtn, store, &store.layout().mvtn, &x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_examples() {
        let (l, g) = cross_entropy_loss(&[0.0; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        let (l, _) = cross_entropy_loss(&[10.0, 0.0, 0.0], 0).unwrap();
        let oracle = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        assert!((l - oracle).abs() < 1e-15);
        assert!((l - 9.08e-5).abs() < 1e-7);
        assert!(matches!(cross_entropy_loss(&[0.0; 3], 3), Err(TrainError::LabelOutOfRange { .. })));
    }

    #[test]
    fn adamw_examples() {
        let hp = AdamParams::new(1e-3, 0.0);
        for g in [0.7, -3.0, 1e-3] {
            let mut p = [0.5];
            let mut s = AdamState::new(1);
            adamw_step(&mut p, &[g], &mut s, &hp).unwrap();
            // step one: m̂ = g, v̂ = g², update lr·g/(|g| + ε)
            let expected = 0.5 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15);
        }
        let mut p = [1.0];
        let mut s = AdamState::new(1);
        adamw_step(&mut p, &[0.0], &mut s, &hp).unwrap();
        assert_eq!(p[0], 1.0);
        adamw_step(&mut p, &[0.0], &mut s, &AdamParams::new(1e-3, 0.01)).unwrap();
        assert_eq!(p[0], 1.0 - 1e-5);
        assert!(matches!(adamw_step(&mut p, &[0.0, 1.0], &mut s, &hp), Err(TrainError::ShapeMismatch { .. })));
    }

    #[test]
    fn sgd_examples() {
        let mut p = [1.0];
        let mut s = AdamState::new(1);
        sgd_momentum_step(&mut p, &[2.0], &mut s, 0.1, 0.0).unwrap();
        assert_eq!(p[0], 1.0 - 0.1 * 2.0);
        let mut p = [0.0];
        let mut s = AdamState::new(1);
        for _ in 0..2 {
            sgd_momentum_step(&mut p, &[1.5], &mut s, 0.01, 0.9).unwrap();
        }
        assert!((p[0] + 0.01 * 1.5 * 2.9).abs() < 1e-15);
        let v0 = s.m[0];
        sgd_momentum_step(&mut p, &[0.0], &mut s, 0.01, 0.9).unwrap();
        assert!((s.m[0] - 0.9 * v0).abs() < 1e-15);
    }

    #[test]
    fn clip_examples() {
        let mut g = [36.0, 48.0];
        assert_eq!(clip_global_norm(&mut g, 30.0).unwrap(), 60.0);
        assert_eq!(g, [18.0, 24.0]);
        let mut g = [3.0, 4.0];
        clip_global_norm(&mut g, 30.0).unwrap();
        assert_eq!(g, [3.0, 4.0]);
        let mut g = [1.0, f64::NAN];
        assert!(matches!(clip_global_norm(&mut g, 30.0), Err(TrainError::NonFiniteGradient)));
    }

    proptest! {
        #[test]
        fn clip_bounds_norm_and_keeps_direction(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let mut g = v.clone();
            clip_global_norm(&mut g, 30.0).unwrap();
            let n = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(n(&g) <= 30.0 + 1e-9);
            if n(&v) > 30.0 {
                let cos = v.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / (n(&v) * n(&g));
                prop_assert!((cos - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_conditional_mean() {
        assert_eq!(view_dropout_mask(4, 0.0, 1), vec![true; 4]);
        let trials = 10_000;
        let mut total = 0usize;
        for t in 0..trials {
            let mask = view_dropout_mask(4, 0.5, t);
            assert!(mask.iter().any(|&k| k));
            total += mask.iter().filter(|&&k| k).count();
        }
        // E[kept | kept ≥ 1] by enumerating all 16 equally likely masks
        let (mut s, mut c) = (0usize, 0usize);
        for mask in 1u32..16 {
            s += mask.count_ones() as usize;
            c += 1;
        }
        let oracle = s as f64 / c as f64;
        let mean = total as f64 / trials as f64;
        assert!((mean - oracle).abs() < 0.03, "{mean} vs {oracle}");
        let img = Image { height: 1, width: 2, channels: 1, data: vec![0.3, 0.7] };
        let out = view_dropout(&[img.clone(), img.clone()], 0.0, 9, 1.0);
        assert_eq!(out, vec![img.clone(), img]);
    }

    #[test]
    fn noise_statistics() {
        let u = circular_config(4, 30.0, 2.2).unwrap();
        assert_eq!(view_noise(&u, 0.0, 3), u);
        let mut samples = Vec::new();
        for s in 0..12_500u64 {
            let n = view_noise(&u, 5.0, s);
            samples.extend(n.azimuths().iter().zip(u.azimuths()).map(|(a, b)| a - b));
            samples.extend(n.elevations().iter().zip(u.elevations()).map(|(a, b)| a - b));
        }
        assert_eq!(samples.len(), 100_000);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let std = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / samples.len() as f64).sqrt();
        assert!((std / 5.0 - 1.0).abs() < 0.02, "{std}");
        let high = SceneParams::new(&[0.0], &[89.0], 2.2).unwrap();
        for s in 0..2000 {
            assert!(view_noise(&high, 5.0, s).elevations()[0] <= 90.0);
        }
    }

    fn tiny() -> (Dataset, TrainConfig) {
        let ds = generate_synthetic(&SyntheticSpec::small(2, 2, 1, 11)).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 2, points: 64, ..TrainConfig::default() };
        (ds, cfg)
    }

    #[test]
    fn zero_init_offset_matches_fixed_first_pass() {
        let (ds, cfg) = tiny();
        let fixed_cfg = TrainConfig { variant: Variant::Fixed, ..cfg.clone() };
        let spec = cfg.model_spec(2);
        let store = init_params(&spec, 4).unwrap();
        let s = &ds.shapes[0];
        let a = training_forward(&store, &cfg, &s.mesh, s.label, 1, 0).unwrap();
        let b = training_forward(&store, &fixed_cfg, &s.mesh, s.label, 1, 0).unwrap();
        assert_eq!(a.graph.values_of(&a.views), b.graph.values_of(&b.views));
        assert_eq!(a.graph.value(a.loss).to_bits(), b.graph.value(b.loss).to_bits());
    }

    #[test]
    fn history_length_and_reproducibility() {
        let (ds, mut cfg) = tiny();
        cfg.epochs = 2;
        let a = train(&ds, &cfg).unwrap();
        assert_eq!(a.history.epochs.len(), 2);
        assert_eq!(a.epoch, 2);
        let b = train(&ds, &cfg).unwrap();
        assert!(a == b, "reruns diverged");
        let one = train(&ds, &TrainConfig { epochs: 1, ..cfg.clone() }).unwrap();
        let resumed = continue_training(one, &ds, 2).unwrap();
        assert!(resumed.params.data.iter().zip(&a.params.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(resumed.optim, a.optim);
        assert_eq!(resumed.history, a.history);
    }

    #[test]
    fn frozen_mvtn_stays_bitwise() {
        let (ds, cfg) = tiny();
        let src = train(&ds, &cfg).unwrap();
        let out = train_with_frozen_mvtn(&src, &ds, &cfg).unwrap();
        for g in [Group::PointEncoder, Group::Mvtn] {
            assert_eq!(&out.params.data[out.params.group_range(g)], &src.params.data[src.params.group_range(g)]);
        }
        assert!(out.optim.mvtn.m.iter().all(|&m| m == 0.0));
        let fixed = train(&ds, &TrainConfig { variant: Variant::Fixed, ..cfg.clone() }).unwrap();
        assert!(matches!(train_with_frozen_mvtn(&fixed, &ds, &cfg), Err(TrainError::MissingMvtn)));
    }

    #[test]
    fn evaluation_contracts() {
        let (ds, cfg) = tiny();
        let ck = train(&ds, &TrainConfig { epochs: 0, ..cfg }).unwrap();
        let a = evaluate_accuracy(&ck, &ds).unwrap();
        assert_eq!(a, evaluate_accuracy(&ck, &ds).unwrap());
        assert_eq!(evaluate(&ck, &ds).unwrap().signatures, signatures(&ck, &ds).unwrap());
        let opts = RobustnessOptions { bypass: true, repeats: 3, ..RobustnessOptions::default() };
        let r = robustness_eval(&ck, &ds, &opts).unwrap();
        assert_eq!(r.accuracies, vec![a; 3]);
        let r = robustness_eval(&ck, &ds, &RobustnessOptions { repeats: 10, ..RobustnessOptions::default() }).unwrap();
        assert_eq!(r.accuracies.len(), 10);
        assert!((r.accuracies.iter().sum::<f64>() / 10.0 - r.mean).abs() <= 1e-15);
        assert!(matches!(
            robustness_eval(&ck, &ds, &RobustnessOptions { max_angle_deg: 0.0, ..RobustnessOptions::default() }),
            Err(TrainError::InvalidRange(_))
        ));
        let mut three = ds.clone();
        three.class_names.push("extra".into());
        assert!(matches!(evaluate_accuracy(&ck, &three), Err(TrainError::ClassCountMismatch { .. })));
        let one = Dataset { class_names: ds.class_names.clone(), shapes: vec![ds.shapes[0].clone()] };
        let mut pred_one = one.clone();
        pred_one.shapes[0].label = evaluate(&ck, &one).unwrap().predictions[0];
        assert_eq!(evaluate_accuracy(&ck, &pred_one).unwrap(), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr_main: 0.0, ..TrainConfig::default() },
            TrainConfig { clip_norm: -1.0, ..TrainConfig::default() },
            TrainConfig { regularizers: Regularizers { view_dropout_p: 1.0, ..Regularizers::default() }, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
        }
        let json = r#"{"variant": "fixed", "typo_field": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }
}
