//! The two-branch pair classifier and its flat genome view.
//!
//! Each branch maps one scan through `conv_layers` blocks of
//! (3x3 conv, stride 2, pad 1, ReLU), flattens, and projects to `fc_branch`
//! units with SELU. The two branch vectors are concatenated and passed
//! through two SELU dense layers and a linear two-unit output.
//!
//! Genome layout: branch 1 conv layers (weights then biases), branch 1 dense,
//! then branch 2 in the same order (omitted when branches are shared), then
//! the head dense layers. Weights are row-major within each layer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Xoshiro256StarStar;
use crate::tensor::{
    conv2d_forward, conv_output_dim, dense_forward, relu_in_place, selu_in_place, ConvWeights,
    DenseWeights, Shape, ShapeError, Tensor, KERNEL,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("genome length mismatch: config needs {expected} parameters, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub fc_branch: usize,
    pub fc2: usize,
    pub fc3: usize,
    pub outputs: usize,
    pub share_branch_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            input_channels: 1,
            conv_layers: 4,
            conv_channels: 32,
            kernel: KERNEL,
            stride: 2,
            pad: 1,
            fc_branch: 256,
            fc2: 256,
            fc3: 128,
            outputs: 2,
            share_branch_weights: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.input_size < 16 {
            return bad(format!("input_size must be >= 16, got {}", self.input_size));
        }
        if self.kernel != KERNEL {
            return bad(format!("kernel must be {KERNEL}, got {}", self.kernel));
        }
        if self.outputs != 2 {
            return bad(format!("outputs must be 2, got {}", self.outputs));
        }
        if self.stride == 0 {
            return bad("stride must be >= 1".into());
        }
        for (name, v) in [
            ("input_channels", self.input_channels),
            ("conv_layers", self.conv_layers),
            ("conv_channels", self.conv_channels),
            ("fc_branch", self.fc_branch),
            ("fc2", self.fc2),
            ("fc3", self.fc3),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        let mut side = self.input_size;
        for layer in 0..self.conv_layers {
            side = match conv_output_dim(side, self.stride, self.pad) {
                Some(s) => s,
                None => {
                    return bad(format!(
                        "conv layer {} has an empty output for input_size {}",
                        layer + 1,
                        self.input_size
                    ))
                }
            };
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(self.input_channels, self.input_size, self.input_size)
    }

    /// Feature-map shapes along one branch, starting with the input.
    pub fn branch_shapes(&self) -> Vec<Shape> {
        let mut shapes = vec![self.input_shape()];
        let mut side = self.input_size;
        for _ in 0..self.conv_layers {
            side = conv_output_dim(side, self.stride, self.pad).unwrap_or(0);
            shapes.push(Shape::new(self.conv_channels, side, side));
        }
        shapes
    }

    pub fn flatten_len(&self) -> usize {
        self.branch_shapes().last().map_or(0, Shape::len)
    }

    pub fn concat_len(&self) -> usize {
        2 * self.fc_branch
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Number of parameters (weights and biases) described by `config`.
pub fn genome_len(config: &ModelConfig) -> usize {
    config.layout().len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { in_channels: usize, out_channels: usize },
    Dense { inputs: usize, outputs: usize },
}

impl LayerKind {
    pub fn weight_count(&self) -> usize {
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
            } => out_channels * in_channels * KERNEL * KERNEL,
            LayerKind::Dense { inputs, outputs } => inputs * outputs,
        }
    }

    pub fn bias_count(&self) -> usize {
        match *self {
            LayerKind::Conv { out_channels, .. } => out_channels,
            LayerKind::Dense { outputs, .. } => outputs,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.bias_count()
    }

    /// Glorot uniform bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot_bound(&self) -> f64 {
        let (fan_in, fan_out) = match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
            } => (KERNEL * KERNEL * in_channels, KERNEL * KERNEL * out_channels),
            LayerKind::Dense { inputs, outputs } => (inputs, outputs),
        };
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub offset: usize,
}

impl LayerSpec {
    pub fn weights_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.kind.weight_count()
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.kind.weight_count();
        start..start + self.kind.bias_count()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.kind.param_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

/// Where a genome index lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLocation {
    pub layer: usize,
    pub role: ParamRole,
    pub index: usize,
}

/// Canonical placement of every layer inside the flat genome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    layers: Vec<LayerSpec>,
    branch_layers: usize,
    shared: bool,
    len: usize,
}

impl Layout {
    fn new(config: &ModelConfig) -> Self {
        let mut branch = Vec::new();
        let mut in_ch = config.input_channels;
        for i in 0..config.conv_layers {
            branch.push((
                format!("conv{}", i + 1),
                LayerKind::Conv {
                    in_channels: in_ch,
                    out_channels: config.conv_channels,
                },
            ));
            in_ch = config.conv_channels;
        }
        branch.push((
            "fc1".to_string(),
            LayerKind::Dense {
                inputs: config.flatten_len(),
                outputs: config.fc_branch,
            },
        ));
        let head = [
            ("fc2", config.concat_len(), config.fc2),
            ("fc3", config.fc2, config.fc3),
            ("out", config.fc3, config.outputs),
        ];

        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, kind: LayerKind| {
            layers.push(LayerSpec { name, kind, offset });
            offset += kind.param_count();
        };
        let branch_count = if config.share_branch_weights { 1 } else { 2 };
        for b in 1..=branch_count {
            for (name, kind) in &branch {
                let prefix = if config.share_branch_weights {
                    "shared".to_string()
                } else {
                    format!("branch{b}")
                };
                push(format!("{prefix}.{name}"), *kind);
            }
        }
        for (name, inputs, outputs) in head {
            push(
                format!("head.{name}"),
                LayerKind::Dense { inputs, outputs },
            );
        }
        Self {
            branch_layers: branch.len(),
            shared: config.share_branch_weights,
            len: offset,
            layers,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Layers of branch `b` (0 or 1); both map to the same layers when shared.
    pub fn branch(&self, b: usize) -> &[LayerSpec] {
        let start = if self.shared { 0 } else { b * self.branch_layers };
        &self.layers[start..start + self.branch_layers]
    }

    pub fn head(&self) -> &[LayerSpec] {
        let branches = if self.shared { 1 } else { 2 };
        &self.layers[branches * self.branch_layers..]
    }

    pub fn locate(&self, index: usize) -> Option<ParamLocation> {
        let layer = self
            .layers
            .iter()
            .position(|l| l.range().contains(&index))?;
        let spec = &self.layers[layer];
        let (role, index) = if spec.weights_range().contains(&index) {
            (ParamRole::Weight, index - spec.offset)
        } else {
            (ParamRole::Bias, index - spec.bias_range().start)
        };
        Some(ParamLocation { layer, role, index })
    }
}

/// Flat parameter vector of a [`Model`] in canonical layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Genome(Vec<f32>);

impl Genome {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bits_eq(&self, other: &Genome) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Output class. Index 1 is progression, index 0 regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Class {
    Regression = 0,
    Progression = 1,
}

impl Class {
    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(Class::Regression),
            1 => Some(Class::Progression),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Regression => "regression",
            Class::Progression => "progression",
        }
    }
}

impl std::fmt::Display for Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Argmax over the two logits; ties (and NaN comparisons) go to index 0.
pub fn argmax_class(logits: [f32; 2]) -> Class {
    if logits[1] > logits[0] {
        Class::Progression
    } else {
        Class::Regression
    }
}

/// Shapes and intermediate values recorded by [`Model::trace`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub branch_shapes: [Vec<Shape>; 2],
    pub flatten_lens: [usize; 2],
    pub fc1_concat: Vec<f32>,
    pub logits: [f32; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: Genome,
}

impl Model {
    /// Glorot-uniform weights drawn in genome order from `seed`; zero biases.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        let mut params = vec![0.0f32; layout.len()];
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        for layer in layout.layers() {
            let bound = layer.kind.glorot_bound();
            for w in &mut params[layer.weights_range()] {
                *w = glorot_draw(&mut rng, bound);
            }
        }
        Ok(Self {
            config,
            layout,
            params: Genome(params),
        })
    }

    pub fn from_genome(config: ModelConfig, genome: Genome) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        if genome.len() != layout.len() {
            return Err(ModelError::LengthMismatch {
                expected: layout.len(),
                actual: genome.len(),
            });
        }
        Ok(Self {
            config,
            layout,
            params: genome,
        })
    }

    pub fn to_genome(&self) -> Genome {
        self.params.clone()
    }

    pub fn into_genome(self) -> Genome {
        self.params
    }

    pub fn genome(&self) -> &Genome {
        &self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn layer_weights(&self, layer: &LayerSpec) -> &[f32] {
        &self.params.values()[layer.weights_range()]
    }

    pub fn layer_bias(&self, layer: &LayerSpec) -> &[f32] {
        &self.params.values()[layer.bias_range()]
    }

    fn check_input(&self, scan: &Tensor) -> Result<(), ModelError> {
        let expected = self.config.input_shape();
        if scan.shape() != expected {
            return Err(ShapeError::Mismatch {
                expected: format!("scan of shape {expected}"),
                actual: format!("{}", scan.shape()),
            }
            .into());
        }
        Ok(())
    }

    fn dense<'a>(&'a self, layer: &LayerSpec) -> Result<DenseWeights<'a>, ShapeError> {
        match layer.kind {
            LayerKind::Dense { inputs, outputs } => DenseWeights::new(
                outputs,
                inputs,
                self.layer_weights(layer),
                self.layer_bias(layer),
            ),
            LayerKind::Conv { .. } => unreachable!("dense layer expected at {}", layer.name),
        }
    }

    fn run_branch(
        &self,
        scan: &Tensor,
        branch: usize,
        shapes: Option<&mut Vec<Shape>>,
    ) -> Result<Vec<f32>, ModelError> {
        let layers = self.layout.branch(branch);
        let (convs, fc) = layers.split_at(layers.len() - 1);
        let mut recorded = vec![scan.shape()];
        let mut x: Option<Tensor> = None;
        for layer in convs {
            let LayerKind::Conv {
                in_channels,
                out_channels,
            } = layer.kind
            else {
                unreachable!("conv layer expected at {}", layer.name)
            };
            let w = ConvWeights::new(
                out_channels,
                in_channels,
                self.layer_weights(layer),
                self.layer_bias(layer),
            )?;
            let mut y = conv2d_forward(x.as_ref().unwrap_or(scan), &w, self.config.stride, self.config.pad)?;
            relu_in_place(y.data_mut());
            recorded.push(y.shape());
            x = Some(y);
        }
        let flat = match x {
            Some(t) => t.into_vec(),
            None => scan.data().to_vec(),
        };
        let mut h = dense_forward(&flat, &self.dense(&fc[0])?)?;
        selu_in_place(&mut h);
        if let Some(out) = shapes {
            *out = recorded;
        }
        Ok(h)
    }

    fn run(
        &self,
        scan1: &Tensor,
        scan2: &Tensor,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<[f32; 2], ModelError> {
        self.check_input(scan1)?;
        self.check_input(scan2)?;
        let mut concat = self.run_branch(scan1, 0, trace.as_mut().map(|t| &mut t.branch_shapes[0]))?;
        let fc1_2 = self.run_branch(scan2, 1, trace.as_mut().map(|t| &mut t.branch_shapes[1]))?;
        concat.extend_from_slice(&fc1_2);

        let head = self.layout.head();
        let mut h = dense_forward(&concat, &self.dense(&head[0])?)?;
        selu_in_place(&mut h);
        let mut h = dense_forward(&h, &self.dense(&head[1])?)?;
        selu_in_place(&mut h);
        let out = dense_forward(&h, &self.dense(&head[2])?)?;
        let logits = [out[0], out[1]];
        if let Some(t) = trace {
            t.flatten_lens = t.branch_shapes.clone().map(|s| s.last().map_or(0, Shape::len));
            t.fc1_concat = concat;
            t.logits = logits;
        }
        Ok(logits)
    }

    /// Raw output logits for a (scan 1, scan 2) pair.
    pub fn forward(&self, scan1: &Tensor, scan2: &Tensor) -> Result<[f32; 2], ModelError> {
        self.run(scan1, scan2, None)
    }

    pub fn predict(&self, scan1: &Tensor, scan2: &Tensor) -> Result<Class, ModelError> {
        self.forward(scan1, scan2).map(argmax_class)
    }

    /// Forward pass that also records feature-map shapes and the FC1 concat vector.
    pub fn trace(&self, scan1: &Tensor, scan2: &Tensor) -> Result<ForwardTrace, ModelError> {
        let mut trace = ForwardTrace {
            branch_shapes: [Vec::new(), Vec::new()],
            flatten_lens: [0, 0],
            fc1_concat: Vec::new(),
            logits: [0.0, 0.0],
        };
        self.run(scan1, scan2, Some(&mut trace))?;
        Ok(trace)
    }
}

fn glorot_draw(rng: &mut Xoshiro256StarStar, bound: f64) -> f32 {
    // Open interval (0, 1) so the f64 draw never touches the bound.
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    let w = ((2.0 * u - 1.0) * bound) as f32;
    if f64::from(w).abs() >= bound {
        // Rounding to f32 landed on or past the bound.
        libm::nextafterf(w, 0.0)
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            conv_channels: 4,
            fc_branch: 8,
            fc2: 8,
            fc3: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn layer_counts() {
        let layout = ModelConfig::default().layout();
        let counts: Vec<usize> = layout.layers().iter().map(|l| l.kind.param_count()).collect();
        assert_eq!(counts[0], 320);
        assert_eq!(counts[1], 9_248);
        assert_eq!(counts[4], 131_328);
    }

    #[test]
    fn shared_branches_count_once() {
        let shared = ModelConfig {
            share_branch_weights: true,
            ..ModelConfig::default()
        };
        assert_eq!(genome_len(&shared), 320 + 3 * 9_248 + 131_328 + 131_328 + 32_896 + 258);
    }

    #[test]
    fn rejects_invalid_configs() {
        for cfg in [
            ModelConfig { input_size: 8, ..ModelConfig::default() },
            ModelConfig { outputs: 3, ..ModelConfig::default() },
            ModelConfig { kernel: 5, ..ModelConfig::default() },
            ModelConfig { conv_channels: 0, ..ModelConfig::default() },
        ] {
            assert!(matches!(Model::build(cfg, 1), Err(ModelError::InvalidConfig(_))));
        }
    }

    #[test]
    fn from_genome_checks_length() {
        let err = Model::from_genome(small(), Genome::zeros(3)).unwrap_err();
        assert!(matches!(err, ModelError::LengthMismatch { actual: 3, .. }));
    }

    #[test]
    fn biases_start_at_zero() {
        let model = Model::build(small(), 3).unwrap();
        for layer in model.layout().layers() {
            assert!(model.layer_bias(layer).iter().all(|&b| b.to_bits() == 0));
        }
    }

    #[test]
    fn zero_genome_gives_zero_logits() {
        let cfg = small();
        let model = Model::from_genome(cfg.clone(), Genome::zeros(genome_len(&cfg))).unwrap();
        let scan = Tensor::from_vec(cfg.input_shape(), vec![0.7; 256]).unwrap();
        assert_eq!(model.forward(&scan, &scan).unwrap(), [0.0, 0.0]);
        assert_eq!(model.predict(&scan, &scan).unwrap(), Class::Regression);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let model = Model::build(small(), 3).unwrap();
        let bad = Tensor::zeros(Shape::new(1, 15, 15));
        let good = Tensor::zeros(model.config().input_shape());
        assert!(matches!(model.forward(&bad, &good), Err(ModelError::Shape(_))));
    }

    #[test]
    fn argmax_tie_break() {
        assert_eq!(argmax_class([1.0, -1.0]), Class::Regression);
        assert_eq!(argmax_class([-0.1, 0.2]), Class::Progression);
        assert_eq!(argmax_class([0.0, 0.0]), Class::Regression);
        assert_eq!(argmax_class([f32::NAN, 1.0]), Class::Regression);
    }

    #[test]
    fn locate_maps_weights_and_biases() {
        let layout = small().layout();
        let first = &layout.layers()[0];
        assert_eq!(
            layout.locate(0),
            Some(ParamLocation { layer: 0, role: ParamRole::Weight, index: 0 })
        );
        assert_eq!(
            layout.locate(first.bias_range().start),
            Some(ParamLocation { layer: 0, role: ParamRole::Bias, index: 0 })
        );
        assert_eq!(layout.locate(layout.len()), None);
    }
}
