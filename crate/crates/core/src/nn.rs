//! Learnable components: point encoder H, view regressor G, view backbone f,
//! multi-view head C and the late-fusion point branch.
//!
//! All parameters live in one flat [`ParameterStore`] grouped by component.
//! Groups are contiguous, and so are the tensors inside a group, which lets a
//! group's gradient be read back as one aligned slice.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{dense_values, AutodiffError, Graph, NodeId, TensorView};
use crate::camera::SceneParams;
use crate::mesh::PointCloud;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("fusion widths differ: point branch {point}, views {views}")]
    WidthMismatch { point: usize, views: usize },
    #[error("image shape {got:?} does not match the backbone input {expected:?}")]
    ShapeMismatch { expected: [usize; 3], got: Vec<usize> },
    #[error("parameter group {0:?} is not bound in this graph")]
    Unbound(Group),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// θ_H
    PointEncoder,
    /// θ_G
    Mvtn,
    /// θ_f
    Backbone,
    /// θ_C
    Head,
    /// Point branch of the late-fusion ablation.
    Fusion,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::PointEncoder, Group::Mvtn, Group::Backbone, Group::Head, Group::Fusion];

    fn seed_tag(self) -> u64 {
        match self {
            Group::PointEncoder => 0x4865,
            Group::Mvtn => 0x4d56,
            Group::Backbone => 0x6662,
            Group::Head => 0x4368,
            Group::Fusion => 0x4675,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    /// Same float operations as the graph ops, so values agree bitwise.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn node(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    pub bias: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: Activation) -> Self {
        Self { widths, hidden, output, bias: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(NnError::InvalidSpec(format!("mlp widths {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 2 == self.widths.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + if self.bias { w[1] } else { 0 })
            .sum()
    }
}

/// Shared per-point MLP (every layer relu), max over points, then a head MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointEncoderSpec {
    pub point_widths: Vec<usize>,
    pub head: MlpSpec,
}

impl PointEncoderSpec {
    pub fn desk(output: usize) -> Self {
        Self {
            point_widths: vec![3, 32, 64],
            head: MlpSpec::new(vec![64, 64, output], Activation::Relu, Activation::Identity),
        }
    }

    fn point_mlp(&self) -> MlpSpec {
        MlpSpec::new(self.point_widths.clone(), Activation::Relu, Activation::Relu)
    }

    pub fn validate(&self) -> Result<()> {
        self.point_mlp().validate()?;
        self.head.validate()?;
        if self.point_widths[0] != 3 {
            return Err(NnError::InvalidSpec("point MLP must take 3 coordinates".into()));
        }
        if self.head.input_width() != *self.point_widths.last().expect("validated") {
            return Err(NnError::InvalidSpec("point head input must equal the pooled width".into()));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.head.output_width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Square max-pool window (and stride); 1 disables pooling.
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewCnnSpec {
    /// `[h, w, c]`
    pub input: [usize; 3],
    pub stages: Vec<ConvStage>,
    pub feature_dim: usize,
}

impl ViewCnnSpec {
    pub fn desk(height: usize, width: usize, channels: usize) -> Self {
        let stage = |channels| ConvStage { channels, kernel: 3, stride: 1, pool: 2 };
        Self { input: [height, width, channels], stages: vec![stage(8), stage(16), stage(32)], feature_dim: 128 }
    }

    /// Spatial size after every stage, or an error if some stage would not fit.
    pub fn stage_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let [mut h, mut w, _] = self.input;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            if s.kernel == 0 || s.stride == 0 || s.pool == 0 || s.channels == 0 || h < s.kernel || w < s.kernel {
                return Err(NnError::InvalidSpec(format!("stage {i} does not fit a {h}x{w} input")));
            }
            h = (h - s.kernel) / s.stride + 1;
            w = (w - s.kernel) / s.stride + 1;
            if s.pool > 1 {
                if h < s.pool || w < s.pool {
                    return Err(NnError::InvalidSpec(format!("stage {i} pool does not fit {h}x{w}")));
                }
                h = (h - s.pool) / s.pool + 1;
                w = (w - s.pool) / s.pool + 1;
            }
            out.push([h, w, s.channels]);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.feature_dim == 0 || self.input.contains(&0) {
            return Err(NnError::InvalidSpec("backbone needs stages, a feature width and a nonempty input".into()));
        }
        self.stage_shapes().map(|_| ())
    }
}

/// The whole network for `views` cameras and `classes` labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub views: usize,
    pub classes: usize,
    pub point: PointEncoderSpec,
    pub mvtn: MlpSpec,
    pub cnn: ViewCnnSpec,
    pub head: MlpSpec,
    pub fusion: Option<PointEncoderSpec>,
    pub learn_distance: bool,
}

/// Feature width `b` of the point encoder.
pub const DEFAULT_POINT_FEATURES: usize = 40;

/// Widths `(b + 2M) → b → b → 5M → 2M → 2M` with tanh hidden layers.
pub fn mvtn_spec(views: usize, b: usize) -> MlpSpec {
    let m = views;
    MlpSpec::new(vec![b + 2 * m, b, b, 5 * m, 2 * m, 2 * m], Activation::Tanh, Activation::Identity)
}

impl ModelSpec {
    pub fn desk(views: usize, classes: usize, image: [usize; 3]) -> Self {
        let b = DEFAULT_POINT_FEATURES;
        let cnn = ViewCnnSpec::desk(image[0], image[1], image[2]);
        let d = cnn.feature_dim;
        Self {
            views,
            classes,
            point: PointEncoderSpec::desk(b),
            mvtn: mvtn_spec(views, b),
            cnn,
            head: MlpSpec::new(vec![d, 64, classes], Activation::Relu, Activation::Identity),
            fusion: None,
            learn_distance: false,
        }
    }

    pub fn with_fusion(mut self) -> Self {
        self.fusion = Some(PointEncoderSpec::desk(self.cnn.feature_dim));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.classes < 2 {
            return Err(NnError::InvalidSpec("need at least one view and two classes".into()));
        }
        self.point.validate()?;
        self.mvtn.validate()?;
        self.cnn.validate()?;
        self.head.validate()?;
        let b = self.point.output_width();
        if self.mvtn.input_width() != b + 2 * self.views || self.mvtn.output_width() != 2 * self.views {
            return Err(NnError::InvalidSpec(format!(
                "regressor widths {:?} do not fit b = {b}, M = {}",
                self.mvtn.widths, self.views
            )));
        }
        if self.head.input_width() != self.cnn.feature_dim || self.head.output_width() != self.classes {
            return Err(NnError::InvalidSpec("head must map d features to K logits".into()));
        }
        if let Some(f) = &self.fusion {
            f.validate()?;
            if f.output_width() != self.cnn.feature_dim {
                return Err(NnError::WidthMismatch { point: f.output_width(), views: self.cnn.feature_dim });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Tensor indices of one dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerRef {
    pub weight: usize,
    pub bias: Option<usize>,
}

/// Where every component's tensors sit in the store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelLayout {
    pub point_mlp: Vec<LayerRef>,
    pub point_head: Vec<LayerRef>,
    pub mvtn: Vec<LayerRef>,
    pub distance: Option<usize>,
    pub convs: Vec<LayerRef>,
    pub cnn_linear: LayerRef,
    pub head: Vec<LayerRef>,
    pub fusion_mlp: Vec<LayerRef>,
    pub fusion_head: Vec<LayerRef>,
}

#[derive(Default)]
struct LayoutBuilder {
    tensors: Vec<TensorInfo>,
    next: usize,
}

impl LayoutBuilder {
    fn tensor(&mut self, name: String, group: Group, shape: Vec<usize>) -> usize {
        let info = TensorInfo { name, group, shape, offset: self.next };
        self.next += info.len();
        self.tensors.push(info);
        self.tensors.len() - 1
    }

    fn mlp(&mut self, prefix: &str, group: Group, spec: &MlpSpec) -> Vec<LayerRef> {
        spec.widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerRef {
                weight: self.tensor(format!("{prefix}.{i}.weight"), group, vec![w[1], w[0]]),
                bias: spec.bias.then(|| self.tensor(format!("{prefix}.{i}.bias"), group, vec![w[1]])),
            })
            .collect()
    }
}

fn build_layout(spec: &ModelSpec) -> (Vec<TensorInfo>, ModelLayout) {
    let mut b = LayoutBuilder::default();
    let point_mlp = b.mlp("h.point", Group::PointEncoder, &spec.point.point_mlp());
    let point_head = b.mlp("h.head", Group::PointEncoder, &spec.point.head);
    let mvtn = b.mlp("g", Group::Mvtn, &spec.mvtn);
    let distance = spec.learn_distance.then(|| b.tensor("g.distance".into(), Group::Mvtn, vec![1]));
    let mut in_c = spec.cnn.input[2];
    let mut convs = Vec::new();
    for (i, s) in spec.cnn.stages.iter().enumerate() {
        convs.push(LayerRef {
            weight: b.tensor(format!("f.conv{i}.weight"), Group::Backbone, vec![s.channels, s.kernel, s.kernel, in_c]),
            bias: Some(b.tensor(format!("f.conv{i}.bias"), Group::Backbone, vec![s.channels])),
        });
        in_c = s.channels;
    }
    let d = spec.cnn.feature_dim;
    let cnn_linear = LayerRef {
        weight: b.tensor("f.linear.weight".into(), Group::Backbone, vec![d, in_c]),
        bias: Some(b.tensor("f.linear.bias".into(), Group::Backbone, vec![d])),
    };
    let head = b.mlp("c", Group::Head, &spec.head);
    let (fusion_mlp, fusion_head) = match &spec.fusion {
        Some(f) => (b.mlp("fusion.point", Group::Fusion, &f.point_mlp()), b.mlp("fusion.head", Group::Fusion, &f.head)),
        None => (Vec::new(), Vec::new()),
    };
    let layout = ModelLayout { point_mlp, point_head, mvtn, distance, convs, cnn_linear, head, fusion_mlp, fusion_head };
    (b.tensors, layout)
}

/// Analytic parameter count of the regressor `(b+2M) → b → b → 5M → 2M → 2M`
/// with biases: `14M² + (7b + 9)M + 2b² + 2b`, i.e. `14M² + 289M + 3280`
/// for `b = 40`.
pub fn mvtn_parameter_count(views: usize, b: usize) -> usize {
    let m = views;
    14 * m * m + (7 * b + 9) * m + 2 * b * b + 2 * b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    pub spec: ModelSpec,
    pub tensors: Vec<TensorInfo>,
    pub data: Vec<f64>,
}

impl ParameterStore {
    pub fn layout(&self) -> ModelLayout {
        build_layout(&self.spec).1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, index: usize) -> &[f64] {
        &self.data[self.tensors[index].range()]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Contiguous span of a group's parameters (empty when absent).
    pub fn group_range(&self, group: Group) -> Range<usize> {
        let mut it = self.tensors.iter().filter(|t| t.group == group);
        match it.next() {
            None => 0..0,
            Some(first) => {
                let end = it.next_back().unwrap_or(first).range().end;
                first.offset..end
            }
        }
    }

    pub fn group_len(&self, group: Group) -> usize {
        self.group_range(group).len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// He-uniform weights `U(±√(6/fan_in))`, zero biases, zero final regressor
/// layer. Each group draws from its own seeded stream so, for instance, the
/// backbone initializes identically whether or not a regressor exists.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParameterStore> {
    spec.validate()?;
    let (tensors, layout) = build_layout(spec);
    let total = tensors.last().map_or(0, |t| t.range().end);
    let mut data = vec![0.0; total];
    let zero_final: Vec<usize> = layout.mvtn.last().map(|l| [Some(l.weight), l.bias]).into_iter().flatten().flatten().collect();
    for group in Group::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, group.seed_tag()));
        for (i, t) in tensors.iter().enumerate().filter(|(_, t)| t.group == group) {
            if !t.name.ends_with(".weight") || zero_final.contains(&i) {
                continue;
            }
            let fan_in: usize = t.shape[1..].iter().product();
            let limit = (6.0 / fan_in as f64).sqrt();
            for v in &mut data[t.range()] {
                *v = rng.random_range(-limit..limit);
            }
        }
    }
    Ok(ParameterStore { spec: spec.clone(), tensors, data })
}

/// Parameter tensors bound into one graph. Trainable groups become leaves,
/// frozen groups constants; unbound groups are absent.
pub struct BoundParams {
    views: Vec<Option<TensorView>>,
    leaves: Vec<(Group, Vec<NodeId>)>,
    layout: ModelLayout,
}

impl BoundParams {
    pub fn bind(graph: &mut Graph, store: &ParameterStore, groups: &[(Group, bool)]) -> Result<Self> {
        let mut views = vec![None; store.tensors.len()];
        let mut leaves = Vec::new();
        for &(group, trainable) in groups {
            let mut nodes = Vec::with_capacity(store.group_len(group));
            for (i, t) in store.tensors.iter().enumerate().filter(|(_, t)| t.group == group) {
                let values = &store.data[t.range()];
                let view = if trainable {
                    TensorView::leaves(graph, &t.shape, values)?
                } else {
                    TensorView::constants(graph, &t.shape, values)?
                };
                if trainable {
                    nodes.extend_from_slice(view.nodes());
                }
                views[i] = Some(view);
            }
            if trainable {
                leaves.push((group, nodes));
            }
        }
        Ok(Self { views, leaves, layout: store.layout() })
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    fn view(&self, index: usize, group: Group) -> Result<&TensorView> {
        self.views[index].as_ref().ok_or(NnError::Unbound(group))
    }

    /// Leaves of every trainable group, aligned with [`ParameterStore::group_range`].
    pub fn leaves(&self) -> &[(Group, Vec<NodeId>)] {
        &self.leaves
    }

    pub fn distance_node(&self) -> Option<Result<NodeId>> {
        self.layout.distance.map(|i| self.view(i, Group::Mvtn).map(|v| v.nodes()[0]))
    }
}

fn dense_layer(g: &mut Graph, p: &BoundParams, layer: LayerRef, group: Group, x: &[NodeId]) -> Result<Vec<NodeId>> {
    let w = p.view(layer.weight, group)?;
    let b = layer.bias.map(|b| p.view(b, group)).transpose()?;
    Ok(g.dense(x, w, b)?)
}

/// Post-activation outputs of every layer.
pub fn mlp_forward(
    g: &mut Graph,
    spec: &MlpSpec,
    p: &BoundParams,
    layers: &[LayerRef],
    group: Group,
    x: &[NodeId],
) -> Result<Vec<Vec<NodeId>>> {
    if x.len() != spec.input_width() {
        return Err(NnError::LengthMismatch { expected: spec.input_width(), got: x.len() });
    }
    let mut outs: Vec<Vec<NodeId>> = Vec::with_capacity(layers.len());
    for (i, &layer) in layers.iter().enumerate() {
        let input = outs.last().map_or(x, |v| v.as_slice());
        let z = dense_layer(g, p, layer, group, input)?;
        let act = spec.activation(i);
        outs.push(z.into_iter().map(|n| act.node(g, n)).collect());
    }
    Ok(outs)
}

/// Value-only MLP with the same float operations as [`mlp_forward`].
pub fn mlp_values(spec: &MlpSpec, store: &ParameterStore, layers: &[LayerRef], x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        let w = store.tensor(layer.weight);
        let b = layer.bias.map(|b| store.tensor(b));
        let out_dim = store.tensors[layer.weight].shape[0];
        let act = spec.activation(i);
        cur = dense_values(w, b, &cur, out_dim).into_iter().map(|v| act.apply(v)).collect();
    }
    cur
}

fn encode_points(
    g: &mut Graph,
    spec: &PointEncoderSpec,
    store: &ParameterStore,
    p: &BoundParams,
    (mlp_layers, head_layers): (&[LayerRef], &[LayerRef]),
    group: Group,
    cloud: &PointCloud,
) -> Result<Vec<NodeId>> {
    if cloud.points.is_empty() {
        return Err(NnError::Empty("point cloud"));
    }
    let point_spec = spec.point_mlp();
    let width = *spec.point_widths.last().expect("validated");
    // Value pass over all points; only the per-channel argmax points enter
    // the graph, which is exactly where the max subgradient flows.
    let mut best = vec![(f64::NEG_INFINITY, 0usize); width];
    for (i, q) in cloud.points.iter().enumerate() {
        let feats = mlp_values(&point_spec, store, mlp_layers, q);
        for (c, &v) in feats.iter().enumerate() {
            if v > best[c].0 || i == 0 {
                best[c] = (v, i);
            }
        }
    }
    let mut chosen: Vec<usize> = best.iter().map(|b| b.1).collect();
    chosen.sort_unstable();
    chosen.dedup();
    let mut per_point = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        let q = cloud.points[i];
        let xs = [g.constant(q[0]), g.constant(q[1]), g.constant(q[2])];
        let outs = mlp_forward(g, &point_spec, p, mlp_layers, group, &xs)?;
        per_point.push(outs.into_iter().last().expect("nonempty mlp"));
    }
    let pooled: Vec<NodeId> = (0..width)
        .map(|c| {
            let k = chosen.binary_search(&best[c].1).expect("chosen contains every argmax");
            per_point[k][c]
        })
        .collect();
    let outs = mlp_forward(g, &spec.head, p, head_layers, group, &pooled)?;
    Ok(outs.into_iter().last().expect("nonempty mlp"))
}

/// `H(S)`: the `b` point features of a cloud.
pub fn point_encoder_forward(g: &mut Graph, store: &ParameterStore, p: &BoundParams, cloud: &PointCloud) -> Result<Vec<NodeId>> {
    let l = p.layout();
    encode_points(g, &store.spec.point, store, p, (&l.point_mlp, &l.point_head), Group::PointEncoder, cloud)
}

/// How the regressor's output turns into views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MvtnVariant {
    Direct,
    Offset,
}

/// `u0` as fed to G: azimuth/180 and elevation/90, or zeros for the direct
/// variant.
pub fn mvtn_input_angles(u0: &SceneParams, variant: MvtnVariant) -> Vec<f64> {
    let m = u0.num_views();
    match variant {
        MvtnVariant::Direct => vec![0.0; 2 * m],
        MvtnVariant::Offset => u0
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| if i < m { v / 180.0 } else { v / 90.0 })
            .collect(),
    }
}

/// `G(u0, H(S))`: the `2M` raw (pre-tanh) outputs.
pub fn mvtn_forward(
    g: &mut Graph,
    store: &ParameterStore,
    p: &BoundParams,
    u0: &SceneParams,
    features: &[NodeId],
    variant: MvtnVariant,
) -> Result<Vec<NodeId>> {
    let spec = &store.spec;
    if u0.num_views() != spec.views {
        return Err(NnError::LengthMismatch { expected: 2 * spec.views, got: u0.values.len() });
    }
    let b = spec.point.output_width();
    if features.len() != b {
        return Err(NnError::LengthMismatch { expected: b, got: features.len() });
    }
    let mut input: Vec<NodeId> = mvtn_input_angles(u0, variant).into_iter().map(|v| g.constant(v)).collect();
    input.extend_from_slice(features);
    let outs = mlp_forward(g, &spec.mvtn, p, &p.layout().mvtn, Group::Mvtn, &input)?;
    Ok(outs.into_iter().last().expect("nonempty mlp"))
}

/// `f(x)`: conv stages with relu and max-pool, global average pool, then a
/// relu linear layer to `d` features.
pub fn view_cnn_forward(g: &mut Graph, store: &ParameterStore, p: &BoundParams, image: &TensorView) -> Result<Vec<NodeId>> {
    let spec = &store.spec.cnn;
    if image.shape() != spec.input {
        return Err(NnError::ShapeMismatch { expected: spec.input, got: image.shape().to_vec() });
    }
    let layout = p.layout();
    let mut x = image.clone();
    for (stage, layer) in spec.stages.iter().zip(&layout.convs) {
        let w = p.view(layer.weight, Group::Backbone)?;
        let b = layer.bias.map(|b| p.view(b, Group::Backbone)).transpose()?;
        x = g.conv2d_valid(&x, w, b, stage.stride)?;
        x = g.relu_view(&x);
        if stage.pool > 1 {
            x = g.max_pool(&x, stage.pool, stage.pool)?;
        }
    }
    let pooled = g.global_avg_pool(&x)?;
    let z = dense_layer(g, p, layout.cnn_linear, Group::Backbone, pooled.nodes())?;
    Ok(z.into_iter().map(|n| g.relu(n)).collect())
}

/// Logits plus the activation of the last layer before the classifier.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub logits: Vec<NodeId>,
    pub signature: Vec<NodeId>,
    pub pooled: Vec<NodeId>,
}

fn view_max(g: &mut Graph, features: &[Vec<NodeId>]) -> Result<Vec<NodeId>> {
    let first = features.first().ok_or(NnError::Empty("view features"))?;
    if let Some(bad) = features.iter().find(|f| f.len() != first.len()) {
        return Err(NnError::LengthMismatch { expected: first.len(), got: bad.len() });
    }
    let mut column = Vec::with_capacity(features.len());
    Ok((0..first.len())
        .map(|i| {
            column.clear();
            column.extend(features.iter().map(|f| f[i]));
            g.max_of(&column)
        })
        .collect())
}

fn classify(g: &mut Graph, store: &ParameterStore, p: &BoundParams, pooled: Vec<NodeId>) -> Result<HeadOutput> {
    let spec = &store.spec.head;
    let mut outs = mlp_forward(g, spec, p, &p.layout().head, Group::Head, &pooled)?;
    let logits = outs.pop().expect("nonempty mlp");
    let signature = outs.pop().unwrap_or_else(|| pooled.clone());
    Ok(HeadOutput { logits, signature, pooled })
}

/// `C(max_i f(x_i))`.
pub fn mvcnn_head_forward(
    g: &mut Graph,
    store: &ParameterStore,
    p: &BoundParams,
    view_features: &[Vec<NodeId>],
) -> Result<HeadOutput> {
    let pooled = view_max(g, view_features)?;
    classify(g, store, p, pooled)
}

/// Point-branch features of the late-fusion ablation (width `d`).
pub fn fusion_point_forward(g: &mut Graph, store: &ParameterStore, p: &BoundParams, cloud: &PointCloud) -> Result<Vec<NodeId>> {
    let spec = store.spec.fusion.as_ref().ok_or(NnError::Unbound(Group::Fusion))?;
    let l = p.layout();
    encode_points(g, spec, store, p, (&l.fusion_mlp, &l.fusion_head), Group::Fusion, cloud)
}

/// Elementwise max of point-branch and pooled view features, then `C`.
pub fn late_fusion_forward(
    g: &mut Graph,
    store: &ParameterStore,
    p: &BoundParams,
    point_features: &[NodeId],
    view_features: &[Vec<NodeId>],
) -> Result<HeadOutput> {
    let pooled = view_max(g, view_features)?;
    if point_features.len() != pooled.len() {
        return Err(NnError::WidthMismatch { point: point_features.len(), views: pooled.len() });
    }
    let fused = point_features.iter().zip(&pooled).map(|(&a, &b)| g.max2(b, a)).collect();
    classify(g, store, p, fused)
}
