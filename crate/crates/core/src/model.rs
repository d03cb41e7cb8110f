//! In-memory model descriptor, weight storage and structural validation.
//!
//! A [`Model`] is an immutable value: a [`ModelDescriptor`] (layer list plus
//! tensor table) and a flat little-endian `f32` blob that the tensor table
//! indexes into by byte offset. Pruning never mutates a model in place; it
//! builds a new one.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};

/// Version written into every container header.
pub const FORMAT_VERSION: u32 = 1;

/// Default batch-norm epsilon when a model does not specify one.
pub const DEFAULT_BN_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output size is `ceil(input / stride)`; zero padding split floor/ceil.
    Same,
    /// No padding; output size is `(input - kernel) / stride + 1`.
    Valid,
}

/// Element order produced by a flatten layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlattenOrder {
    /// `((row * width) + col) * channels + channel`
    ChannelsLast,
    /// `(channel * height + row) * width + col`
    ChannelsFirst,
}

impl FlattenOrder {
    pub fn index(self, row: usize, col: usize, channel: usize, height: usize, width: usize, channels: usize) -> usize {
        match self {
            FlattenOrder::ChannelsLast => (row * width + col) * channels + channel,
            FlattenOrder::ChannelsFirst => (channel * height + row) * width + col,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Semantic label per axis, e.g. `["out", "in", "kh", "kw"]`.
    pub axis_order: Vec<String>,
    pub byte_offset: u64,
    pub element_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerKind {
    #[serde(rename = "conv2d")]
    Conv2d {
        out_channels: usize,
        in_channels: usize,
        /// `[kH, kW]`
        kernel: [usize; 2],
        #[serde(default = "unit_stride")]
        stride: [usize; 2],
        padding: Padding,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm { channels: usize, gamma: String, beta: String, moving_mean: String, moving_variance: String },
    #[serde(rename = "maxpool")]
    MaxPool {
        /// `[pH, pW]`; stride equals the window.
        window: [usize; 2],
    },
    #[serde(rename = "flatten")]
    Flatten,
    #[serde(rename = "dense")]
    Dense {
        in_units: usize,
        out_units: usize,
        /// Shape `[in_units, out_units]`.
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "softmax")]
    Softmax,
    /// Identity at inference.
    #[serde(rename = "dropout")]
    Dropout { rate: f32 },
}

fn unit_stride() -> [usize; 2] {
    [1, 1]
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::Softmax => "softmax",
            LayerKind::Dropout { .. } => "dropout",
        }
    }

    /// Tensor names referenced by this layer, in declaration order.
    pub fn tensor_refs(&self) -> Vec<&str> {
        match self {
            LayerKind::Conv2d { weight, bias, .. } | LayerKind::Dense { weight, bias, .. } => {
                let mut refs = vec![weight.as_str()];
                refs.extend(bias.as_deref());
                refs
            }
            LayerKind::BatchNorm { gamma, beta, moving_mean, moving_variance, .. } => {
                vec![gamma.as_str(), beta.as_str(), moving_mean.as_str(), moving_variance.as_str()]
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub format_version: u32,
    /// `(height, width, channels)`
    pub input_shape: [usize; 3],
    /// Required whenever a flatten layer sits between a conv layer and a dense layer
    /// and that boundary is pruned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flatten_order: Option<FlattenOrder>,
    #[serde(default = "default_epsilon")]
    pub batchnorm_epsilon: f64,
    pub layers: Vec<LayerDescriptor>,
    pub tensors: Vec<TensorSpec>,
}

fn default_epsilon() -> f64 {
    DEFAULT_BN_EPSILON
}

/// Activation shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Map { height: usize, width: usize, channels: usize },
    Flat { units: usize },
}

impl Activation {
    pub fn len(&self) -> usize {
        match *self {
            Activation::Map { height, width, channels } => height * width * channels,
            Activation::Flat { units } => units,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Channel count (units for flat activations).
    pub fn channels(&self) -> usize {
        match *self {
            Activation::Map { channels, .. } => channels,
            Activation::Flat { units } => units,
        }
    }
}

/// Output spatial size of a convolution along one axis, or `None` when it would be empty.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return None;
    }
    match padding {
        Padding::Same => Some(input.div_ceil(stride)),
        Padding::Valid => (input >= kernel).then(|| (input - kernel) / stride + 1),
    }
}

/// Zero padding inserted before the first row/column for a convolution axis.
pub fn same_padding_before(input: usize, kernel: usize, stride: usize) -> usize {
    let out = input.div_ceil(stride);
    let needed = ((out - 1) * stride + kernel).saturating_sub(input);
    needed / 2
}

/// Applies one layer to an activation shape.
pub fn propagate_layer(layer: &LayerDescriptor, input: Activation) -> std::result::Result<Activation, Violation> {
    let fail = |msg: String| Violation::layer(&layer.name, msg);
    match (&layer.kind, input) {
        (
            LayerKind::Conv2d { out_channels, in_channels, kernel, stride, padding, .. },
            Activation::Map { height, width, channels },
        ) => {
            if *in_channels != channels {
                return Err(fail(format!(
                    "in_channels {in_channels} does not match the incoming feature map's {channels} channels"
                )));
            }
            if *out_channels == 0 {
                return Err(fail("out_channels must be positive".into()));
            }
            let oh = conv_output_len(height, kernel[0], stride[0], *padding);
            let ow = conv_output_len(width, kernel[1], stride[1], *padding);
            match (oh, ow) {
                (Some(h), Some(w)) => Ok(Activation::Map { height: h, width: w, channels: *out_channels }),
                _ => Err(fail(format!(
                    "kernel {kernel:?} / stride {stride:?} yields an empty output on a {height}x{width} map"
                ))),
            }
        }
        (LayerKind::Conv2d { .. }, Activation::Flat { .. }) => {
            Err(fail("conv2d requires a spatial feature map, found a flat vector".into()))
        }
        (LayerKind::BatchNorm { channels, .. }, act) => {
            if *channels != act.channels() {
                Err(fail(format!("batchnorm over {channels} channels follows an activation with {}", act.channels())))
            } else {
                Ok(act)
            }
        }
        (LayerKind::MaxPool { window }, Activation::Map { height, width, channels }) => {
            if window[0] == 0 || window[1] == 0 {
                return Err(fail("pool window must be positive".into()));
            }
            if window[0] > height || window[1] > width {
                return Err(fail(format!("pool window {window:?} is larger than the {height}x{width} feature map")));
            }
            Ok(Activation::Map { height: height / window[0], width: width / window[1], channels })
        }
        (LayerKind::MaxPool { .. }, Activation::Flat { .. }) => {
            Err(fail("maxpool requires a spatial feature map".into()))
        }
        (LayerKind::Flatten, act) => Ok(Activation::Flat { units: act.len() }),
        (LayerKind::Dense { in_units, out_units, .. }, Activation::Flat { units }) => {
            if *in_units != units {
                return Err(fail(format!("in_units {in_units} does not match the flattened input size {units}")));
            }
            if *out_units == 0 {
                return Err(fail("out_units must be positive".into()));
            }
            Ok(Activation::Flat { units: *out_units })
        }
        (LayerKind::Dense { .. }, Activation::Map { .. }) => Err(fail("dense layer requires a flattened input".into())),
        (LayerKind::Dropout { rate }, act) => {
            if !(0.0..1.0).contains(rate) {
                return Err(fail(format!("dropout rate {rate} outside [0, 1)")));
            }
            Ok(act)
        }
        (LayerKind::Relu | LayerKind::Softmax, act) => Ok(act),
    }
}

impl ModelDescriptor {
    pub fn input_activation(&self) -> Activation {
        let [height, width, channels] = self.input_shape;
        Activation::Map { height, width, channels }
    }

    /// Activation shapes: element 0 is the model input, element `i + 1` the output of layer `i`.
    pub fn propagate(&self) -> std::result::Result<Vec<Activation>, Violation> {
        if self.input_shape.contains(&0) {
            return Err(Violation::model(format!("input shape {:?} has a zero dimension", self.input_shape)));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut current = self.input_activation();
        acts.push(current);
        for layer in &self.layers {
            current = propagate_layer(layer, current)?;
            acts.push(current);
        }
        Ok(acts)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn tensor_spec(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Names of conv2d layers in network order.
    pub fn conv_layer_names(&self) -> Vec<&str> {
        self.layers.iter().filter(|l| matches!(l.kind, LayerKind::Conv2d { .. })).map(|l| l.name.as_str()).collect()
    }
}

/// Owned tensor used when assembling a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub axis_order: Vec<String>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, axis_order: &[&str], data: Vec<f32>) -> Self {
        Self { name: name.into(), shape, axis_order: axis_order.iter().map(|s| s.to_string()).collect(), data }
    }
}

/// Descriptor plus weight blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub descriptor: ModelDescriptor,
    /// Little-endian `f32` data addressed by the tensor table.
    pub blob: Vec<f32>,
}

impl Model {
    /// Packs `tensors` contiguously in order and fills in offsets. Does not validate.
    pub fn from_parts(
        input_shape: [usize; 3],
        flatten_order: Option<FlattenOrder>,
        batchnorm_epsilon: f64,
        layers: Vec<LayerDescriptor>,
        tensors: Vec<Tensor>,
    ) -> Self {
        let mut specs = Vec::with_capacity(tensors.len());
        let mut blob = Vec::new();
        for t in tensors {
            specs.push(TensorSpec {
                name: t.name,
                shape: t.shape,
                axis_order: t.axis_order,
                byte_offset: 4 * blob.len() as u64,
                element_count: t.data.len() as u64,
            });
            blob.extend_from_slice(&t.data);
        }
        Model {
            descriptor: ModelDescriptor {
                format_version: FORMAT_VERSION,
                input_shape,
                flatten_order,
                batchnorm_epsilon,
                layers,
                tensors: specs,
            },
            blob,
        }
    }

    /// Same as [`Model::from_parts`] but rejects invalid models.
    pub fn new(
        input_shape: [usize; 3],
        flatten_order: Option<FlattenOrder>,
        batchnorm_epsilon: f64,
        layers: Vec<LayerDescriptor>,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        let model = Self::from_parts(input_shape, flatten_order, batchnorm_epsilon, layers, tensors);
        model.validated()
    }

    pub fn validated(self) -> Result<Self> {
        let violations = validate_descriptor(&self);
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(Error::Validation(violations))
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        let spec = self.descriptor.tensor_spec(name)?;
        let start = usize::try_from(spec.byte_offset / 4).ok()?;
        let end = start.checked_add(usize::try_from(spec.element_count).ok()?)?;
        self.blob.get(start..end)
    }

    /// Like [`Model::tensor`] but reports a missing tensor as an error.
    pub fn require(&self, name: &str) -> Result<&[f32]> {
        self.tensor(name).ok_or_else(|| Error::Argument(format!("tensor `{name}` is not present in the model")))
    }

    /// All tensors as owned values in table order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.descriptor
            .tensors
            .iter()
            .map(|spec| Tensor {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                axis_order: spec.axis_order.clone(),
                data: self.tensor(&spec.name).map(<[f32]>::to_vec).unwrap_or_default(),
            })
            .collect()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerDescriptor> {
        self.descriptor.layers.iter().find(|l| l.name == name)
    }

    /// Per-filter weights of a conv layer: `out_channels` slices of `in_channels * kH * kW` values.
    pub fn conv_filters(&self, layer_name: &str) -> Result<Vec<crate::rank1::FilterTensor>> {
        let layer = self.layer(layer_name).ok_or_else(|| Error::Argument(format!("unknown layer `{layer_name}`")))?;
        let LayerKind::Conv2d { out_channels, in_channels, kernel, weight, .. } = &layer.kind else {
            return Err(Error::Argument(format!("layer `{layer_name}` is not a conv2d layer")));
        };
        let data = self.require(weight)?;
        let per_filter = in_channels * kernel[0] * kernel[1];
        Ok((0..*out_channels)
            .map(|f| {
                crate::rank1::FilterTensor::new(
                    kernel[0],
                    kernel[1],
                    *in_channels,
                    data[f * per_filter..(f + 1) * per_filter].to_vec(),
                )
            })
            .collect())
    }
}

fn expected_shape(expected: &[usize], spec: &TensorSpec, layer: &str, role: &str, out: &mut Vec<Violation>) {
    if spec.shape != expected {
        out.push(Violation::layer(
            layer,
            format!("{role} tensor `{}` has shape {:?}, expected {:?}", spec.name, spec.shape, expected),
        ));
    }
}

/// Checks every descriptor invariant. An empty list means the model is valid.
pub fn validate_descriptor(model: &Model) -> Vec<Violation> {
    let desc = &model.descriptor;
    let mut out = Vec::new();
    let blob_bytes = 4 * model.blob.len() as u64;

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for spec in &desc.tensors {
        *counts.entry(spec.name.as_str()).or_default() += 1;
        let product: u64 = spec.shape.iter().map(|&d| d as u64).product();
        if spec.shape.is_empty() || spec.shape.contains(&0) {
            out.push(Violation::model(format!("tensor `{}` has a non-positive shape {:?}", spec.name, spec.shape)));
        }
        if spec.element_count != product {
            out.push(Violation::model(format!(
                "tensor `{}` declares {} elements but its shape {:?} holds {}",
                spec.name, spec.element_count, spec.shape, product
            )));
        }
        if spec.axis_order.len() != spec.shape.len() {
            out.push(Violation::model(format!(
                "tensor `{}` labels {} axes but has {}",
                spec.name,
                spec.axis_order.len(),
                spec.shape.len()
            )));
        }
        if spec.byte_offset % 4 != 0 {
            out.push(Violation::model(format!(
                "tensor `{}` byte offset {} is not 4-aligned",
                spec.name, spec.byte_offset
            )));
        }
        let end = spec.element_count.checked_mul(4).and_then(|n| n.checked_add(spec.byte_offset));
        if end.is_none_or(|end| end > blob_bytes) {
            out.push(Violation::model(format!("tensor `{}` extends past the {blob_bytes}-byte data blob", spec.name)));
        }
    }
    for (name, n) in &counts {
        if *n > 1 {
            out.push(Violation::model(format!("tensor name `{name}` appears {n} times")));
        }
    }

    let mut layer_names = HashSet::new();
    for layer in &desc.layers {
        if layer.name.is_empty() {
            out.push(Violation::model("layer with empty name"));
        } else if !layer_names.insert(layer.name.as_str()) {
            out.push(Violation::layer(&layer.name, "duplicate layer name"));
        }
        for r in layer.kind.tensor_refs() {
            match counts.get(r) {
                None => out.push(Violation::layer(&layer.name, format!("references missing tensor `{r}`"))),
                Some(1) => {}
                Some(_) => out.push(Violation::layer(&layer.name, format!("tensor reference `{r}` is ambiguous"))),
            }
        }
        check_tensor_shapes(desc, layer, &mut out);
    }

    if !(desc.batchnorm_epsilon.is_finite() && desc.batchnorm_epsilon >= 0.0) {
        out.push(Violation::model(format!(
            "batchnorm epsilon {} must be finite and non-negative",
            desc.batchnorm_epsilon
        )));
    }
    if desc.format_version != FORMAT_VERSION {
        out.push(Violation::model(format!("unsupported format version {}", desc.format_version)));
    }

    if let Err(v) = desc.propagate() {
        out.push(v);
    }
    out
}

fn check_tensor_shapes(desc: &ModelDescriptor, layer: &LayerDescriptor, out: &mut Vec<Violation>) {
    let find = |name: &str| desc.tensor_spec(name);
    match &layer.kind {
        LayerKind::Conv2d { out_channels, in_channels, kernel, stride, weight, bias, .. } => {
            if kernel.contains(&0) || stride.contains(&0) {
                out.push(Violation::layer(&layer.name, "kernel and stride must be positive"));
            }
            if let Some(spec) = find(weight) {
                expected_shape(&[*out_channels, *in_channels, kernel[0], kernel[1]], spec, &layer.name, "weight", out);
            }
            if let Some(spec) = bias.as_deref().and_then(find) {
                expected_shape(&[*out_channels], spec, &layer.name, "bias", out);
            }
        }
        LayerKind::BatchNorm { channels, gamma, beta, moving_mean, moving_variance } => {
            for (role, name) in
                [("gamma", gamma), ("beta", beta), ("moving_mean", moving_mean), ("moving_variance", moving_variance)]
            {
                if let Some(spec) = find(name) {
                    expected_shape(&[*channels], spec, &layer.name, role, out);
                }
            }
        }
        LayerKind::Dense { in_units, out_units, weight, bias } => {
            if let Some(spec) = find(weight) {
                expected_shape(&[*in_units, *out_units], spec, &layer.name, "weight", out);
            }
            if let Some(spec) = bias.as_deref().and_then(find) {
                expected_shape(&[*out_units], spec, &layer.name, "bias", out);
            }
        }
        _ => {}
    }
}

/// Incremental construction of sequential models with inferred channel counts.
///
/// Tensor names follow `<layer>.<role>`.
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    input_shape: [usize; 3],
    flatten_order: Option<FlattenOrder>,
    epsilon: f64,
    layers: Vec<LayerDescriptor>,
    tensors: Vec<Tensor>,
    current: Activation,
}

impl ModelBuilder {
    pub fn new(input_shape: [usize; 3]) -> Self {
        let [height, width, channels] = input_shape;
        Self {
            input_shape,
            flatten_order: Some(FlattenOrder::ChannelsLast),
            epsilon: DEFAULT_BN_EPSILON,
            layers: Vec::new(),
            tensors: Vec::new(),
            current: Activation::Map { height, width, channels },
        }
    }

    pub fn flatten_order(mut self, order: Option<FlattenOrder>) -> Self {
        self.flatten_order = order;
        self
    }

    pub fn batchnorm_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Shape the next layer will receive.
    pub fn current(&self) -> Activation {
        self.current
    }

    fn push(mut self, name: &str, kind: LayerKind) -> Self {
        let layer = LayerDescriptor { name: name.to_string(), kind };
        // Invalid shapes are reported by `build`; keep the last good shape so chaining continues.
        if let Ok(next) = propagate_layer(&layer, self.current) {
            self.current = next;
        }
        self.layers.push(layer);
        self
    }

    /// Adds a conv layer. `weights` is `[out, in, kH, kW]` row-major.
    pub fn conv2d(
        mut self,
        name: &str,
        out_channels: usize,
        kernel: [usize; 2],
        padding: Padding,
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Self {
        let in_channels = self.current.channels();
        let weight = format!("{name}.weight");
        self.tensors.push(Tensor::new(
            &weight,
            vec![out_channels, in_channels, kernel[0], kernel[1]],
            &["out", "in", "kh", "kw"],
            weights,
        ));
        let bias = bias.map(|b| {
            let bname = format!("{name}.bias");
            self.tensors.push(Tensor::new(&bname, vec![out_channels], &["out"], b));
            bname
        });
        self.push(name, LayerKind::Conv2d { out_channels, in_channels, kernel, stride: [1, 1], padding, weight, bias })
    }

    pub fn batchnorm(
        mut self,
        name: &str,
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        variance: Vec<f32>,
    ) -> Self {
        let channels = gamma.len();
        let mut names = Vec::with_capacity(4);
        for (role, data) in [("gamma", gamma), ("beta", beta), ("moving_mean", mean), ("moving_variance", variance)] {
            let tname = format!("{name}.{role}");
            self.tensors.push(Tensor::new(&tname, vec![data.len()], &["channel"], data));
            names.push(tname);
        }
        let mut names = names.into_iter();
        let mut next = || names.next().unwrap_or_default();
        let kind = LayerKind::BatchNorm {
            channels,
            gamma: next(),
            beta: next(),
            moving_mean: next(),
            moving_variance: next(),
        };
        self.push(name, kind)
    }

    pub fn maxpool(self, name: &str, window: [usize; 2]) -> Self {
        self.push(name, LayerKind::MaxPool { window })
    }

    pub fn flatten(self, name: &str) -> Self {
        self.push(name, LayerKind::Flatten)
    }

    /// Adds a dense layer. `weights` is `[in_units, out_units]` row-major.
    pub fn dense(mut self, name: &str, out_units: usize, weights: Vec<f32>, bias: Option<Vec<f32>>) -> Self {
        let in_units = self.current.len();
        let weight = format!("{name}.weight");
        self.tensors.push(Tensor::new(&weight, vec![in_units, out_units], &["in", "out"], weights));
        let bias = bias.map(|b| {
            let bname = format!("{name}.bias");
            self.tensors.push(Tensor::new(&bname, vec![out_units], &["out"], b));
            bname
        });
        self.push(name, LayerKind::Dense { in_units, out_units, weight, bias })
    }

    pub fn relu(self, name: &str) -> Self {
        self.push(name, LayerKind::Relu)
    }

    pub fn softmax(self, name: &str) -> Self {
        self.push(name, LayerKind::Softmax)
    }

    pub fn dropout(self, name: &str, rate: f32) -> Self {
        self.push(name, LayerKind::Dropout { rate })
    }

    pub fn build(self) -> Result<Model> {
        Model::new(self.input_shape, self.flatten_order, self.epsilon, self.layers, self.tensors)
    }

    /// Packs the model without validating it.
    pub fn build_unchecked(self) -> Model {
        Model::from_parts(self.input_shape, self.flatten_order, self.epsilon, self.layers, self.tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelBuilder {
        ModelBuilder::new([6, 6, 2])
            .conv2d("c1", 3, [3, 3], Padding::Same, vec![0.1; 54], Some(vec![0.0; 3]))
            .batchnorm("bn1", vec![1.0; 3], vec![0.0; 3], vec![0.0; 3], vec![1.0; 3])
            .relu("r1")
            .maxpool("p1", [2, 3])
            .flatten("f")
            .dense("d1", 4, vec![0.01; 18 * 4], Some(vec![0.0; 4]))
            .softmax("s")
    }

    #[test]
    fn small_model_is_valid() {
        let model = small().build().unwrap();
        let acts = model.descriptor.propagate().unwrap();
        assert_eq!(acts[4], Activation::Map { height: 3, width: 2, channels: 3 });
        assert_eq!(*acts.last().unwrap(), Activation::Flat { units: 4 });
    }

    #[test]
    fn channel_mismatch_names_the_layer() {
        let mut model = small().build_unchecked();
        if let LayerKind::Conv2d { in_channels, .. } = &mut model.descriptor.layers[0].kind {
            *in_channels = 5;
        }
        let v = validate_descriptor(&model);
        assert!(v.iter().any(|v| v.layer.as_deref() == Some("c1") && v.message.contains("in_channels")), "{v:?}");
    }

    #[test]
    fn dense_in_units_mismatch_is_reported() {
        let mut model = small().build_unchecked();
        let idx = model.descriptor.layer_index("d1").unwrap();
        if let LayerKind::Dense { in_units, .. } = &mut model.descriptor.layers[idx].kind {
            *in_units = 19;
        }
        let v = validate_descriptor(&model);
        assert!(v.iter().any(|v| v.layer.as_deref() == Some("d1") && v.message.contains("in_units")), "{v:?}");
    }

    #[test]
    fn oversized_pool_window_is_reported() {
        let model = ModelBuilder::new([4, 4, 1]).maxpool("p", [5, 2]).build_unchecked();
        let v = validate_descriptor(&model);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].layer.as_deref(), Some("p"));
    }

    #[test]
    fn tensor_past_blob_end_is_reported() {
        let mut model = small().build_unchecked();
        model.blob.truncate(10);
        assert!(!validate_descriptor(&model).is_empty());
    }

    #[test]
    fn element_count_must_match_shape() {
        let mut model = small().build_unchecked();
        model.descriptor.tensors[1].element_count = 2;
        let v = validate_descriptor(&model);
        assert!(v.iter().any(|v| v.message.contains("declares 2 elements")), "{v:?}");
    }

    #[test]
    fn missing_tensor_reference() {
        let mut model = small().build_unchecked();
        if let LayerKind::Conv2d { weight, .. } = &mut model.descriptor.layers[0].kind {
            *weight = "nope".into();
        }
        let v = validate_descriptor(&model);
        assert!(v.iter().any(|v| v.message.contains("missing tensor `nope`")));
    }

    #[test]
    fn validation_is_deterministic() {
        let mut model = small().build_unchecked();
        model.descriptor.layers.swap(0, 4);
        assert_eq!(validate_descriptor(&model), validate_descriptor(&model));
    }

    #[test]
    fn same_padding_sizes() {
        assert_eq!(conv_output_len(40, 7, 1, Padding::Same), Some(40));
        assert_eq!(conv_output_len(5, 3, 2, Padding::Same), Some(3));
        assert_eq!(conv_output_len(5, 7, 1, Padding::Valid), None);
        assert_eq!(same_padding_before(40, 7, 1), 3);
        assert_eq!(same_padding_before(6, 4, 1), 1);
    }

    #[test]
    fn flatten_orders() {
        // 2x3 map with 4 channels
        assert_eq!(FlattenOrder::ChannelsLast.index(1, 2, 3, 2, 3, 4), (3 + 2) * 4 + 3);
        assert_eq!(FlattenOrder::ChannelsFirst.index(1, 2, 3, 2, 3, 4), (3 * 2 + 1) * 3 + 2);
    }
}
