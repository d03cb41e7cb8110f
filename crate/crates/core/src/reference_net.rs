//! Inference-only forward pass used to check surgery and MAC accounting.
//!
//! Feature maps are `(height, width, channels)` row-major. Every dot product
//! accumulates in f64 and is stored as f32. The conv loop runs over the
//! zero-padded input, so every kernel tap of every output is one executed MAC.

use std::path::Path;

use crate::container::{decode, encode};
use crate::error::{Error, Result};
use crate::model::{same_padding_before, LayerKind, Model, Padding, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Argument(format!(
                "{} values do not fill a {height}x{width}x{channels} feature map",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    fn at(&self, r: usize, c: usize, ch: usize) -> f32 {
        self.data[(r * self.width + c) * self.channels + ch]
    }
}

enum Value {
    Map(FeatureMap),
    Flat(Vec<f32>),
}

/// Class scores (probabilities when the model ends in softmax).
pub fn forward(model: &Model, input: &FeatureMap) -> Result<Vec<f32>> {
    Ok(forward_counted(model, input)?.0)
}

/// Multiply-accumulate operations actually executed by [`forward`].
pub fn macs_executed(model: &Model, input: &FeatureMap) -> Result<u64> {
    Ok(forward_counted(model, input)?.1)
}

/// Output together with the executed MAC count.
pub fn forward_counted(model: &Model, input: &FeatureMap) -> Result<(Vec<f32>, u64)> {
    let desc = &model.descriptor;
    if [input.height, input.width, input.channels] != desc.input_shape {
        return Err(Error::Argument(format!(
            "input is {}x{}x{}, model expects {:?}",
            input.height, input.width, input.channels, desc.input_shape
        )));
    }
    if input.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("input contains non-finite values".into()));
    }
    for layer in &desc.layers {
        for name in layer.kind.tensor_refs() {
            if model.require(name)?.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("layer `{}` tensor `{name}` has non-finite weights", layer.name)));
            }
        }
    }

    let mut macs = 0u64;
    let mut value = Value::Map(input.clone());
    for layer in &desc.layers {
        value = match (&layer.kind, value) {
            (LayerKind::Conv2d { out_channels, in_channels, kernel, stride, padding, weight, bias }, Value::Map(x)) => {
                let w = model.require(weight)?;
                let b = bias.as_deref().map(|n| model.require(n)).transpose()?;
                Value::Map(conv2d(&x, w, b, *out_channels, *in_channels, *kernel, *stride, *padding, &mut macs))
            }
            (LayerKind::BatchNorm { gamma, beta, moving_mean, moving_variance, .. }, v) => {
                let params = [gamma, beta, moving_mean, moving_variance].map(|n| model.require(n));
                let [g, b, m, var] = params;
                let (g, b, m, var) = (g?, b?, m?, var?);
                let eps = desc.batchnorm_epsilon;
                let norm = |x: f32, ch: usize| -> Result<f32> {
                    let denom = (f64::from(var[ch]) + eps).sqrt();
                    if denom.is_nan() || denom <= 0.0 {
                        return Err(Error::Numerical(format!(
                            "layer `{}`: moving variance {} + epsilon is not positive",
                            layer.name, var[ch]
                        )));
                    }
                    Ok((f64::from(g[ch]) * (f64::from(x) - f64::from(m[ch])) / denom + f64::from(b[ch])) as f32)
                };
                match v {
                    Value::Map(mut x) => {
                        let c = x.channels;
                        for (i, v) in x.data.iter_mut().enumerate() {
                            *v = norm(*v, i % c)?;
                        }
                        Value::Map(x)
                    }
                    Value::Flat(mut x) => {
                        for (i, v) in x.iter_mut().enumerate() {
                            *v = norm(*v, i)?;
                        }
                        Value::Flat(x)
                    }
                }
            }
            (LayerKind::MaxPool { window }, Value::Map(x)) => Value::Map(maxpool(&x, *window)),
            (LayerKind::Flatten, Value::Map(x)) => {
                let order = desc.flatten_order.ok_or_else(|| {
                    Error::Argument(format!("layer `{}` flattens but the model records no flatten order", layer.name))
                })?;
                let mut out = vec![0.0; x.data.len()];
                for r in 0..x.height {
                    for c in 0..x.width {
                        for ch in 0..x.channels {
                            out[order.index(r, c, ch, x.height, x.width, x.channels)] = x.at(r, c, ch);
                        }
                    }
                }
                Value::Flat(out)
            }
            (LayerKind::Flatten, flat @ Value::Flat(_)) => flat,
            (LayerKind::Dense { in_units, out_units, weight, bias }, Value::Flat(x)) => {
                let w = model.require(weight)?;
                let b = bias.as_deref().map(|n| model.require(n)).transpose()?;
                let mut out = Vec::with_capacity(*out_units);
                for o in 0..*out_units {
                    let mut acc = b.map_or(0.0, |b| f64::from(b[o]));
                    for i in 0..*in_units {
                        acc += f64::from(x[i]) * f64::from(w[i * out_units + o]);
                        macs += 1;
                    }
                    out.push(acc as f32);
                }
                Value::Flat(out)
            }
            (LayerKind::Relu, v) => map_values(v, |x| if x > 0.0 { x } else { 0.0 }),
            (LayerKind::Dropout { .. }, v) => v,
            (LayerKind::Softmax, Value::Flat(x)) => Value::Flat(softmax(&x)),
            (LayerKind::Softmax, Value::Map(mut x)) => {
                x.data = softmax(&x.data);
                Value::Map(x)
            }
            (kind, _) => {
                return Err(Error::Argument(format!(
                    "layer `{}` ({}) received an incompatible activation",
                    layer.name,
                    kind.tag()
                )))
            }
        };
    }
    let out = match value {
        Value::Map(x) => x.data,
        Value::Flat(x) => x,
    };
    Ok((out, macs))
}

fn map_values(v: Value, f: impl Fn(f32) -> f32) -> Value {
    match v {
        Value::Map(mut x) => {
            x.data.iter_mut().for_each(|v| *v = f(*v));
            Value::Map(x)
        }
        Value::Flat(mut x) => {
            x.iter_mut().for_each(|v| *v = f(*v));
            Value::Flat(x)
        }
    }
}

fn softmax(x: &[f32]) -> Vec<f32> {
    let max = x.iter().map(|&v| f64::from(v)).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

#[allow(clippy::too_many_arguments)]
fn conv2d(
    x: &FeatureMap,
    w: &[f32],
    bias: Option<&[f32]>,
    out_channels: usize,
    in_channels: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: Padding,
    macs: &mut u64,
) -> FeatureMap {
    let [kh, kw] = kernel;
    let (out_h, out_w, pad_top, pad_left) = match padding {
        Padding::Same => (
            x.height.div_ceil(stride[0]),
            x.width.div_ceil(stride[1]),
            same_padding_before(x.height, kh, stride[0]),
            same_padding_before(x.width, kw, stride[1]),
        ),
        Padding::Valid => ((x.height - kh) / stride[0] + 1, (x.width - kw) / stride[1] + 1, 0, 0),
    };
    // Zero-padded copy of the input large enough for every tap.
    let ph = (out_h - 1) * stride[0] + kh;
    let pw = (out_w - 1) * stride[1] + kw;
    let mut padded = vec![0.0f64; ph * pw * in_channels];
    for r in 0..x.height {
        let pr = r + pad_top;
        if pr >= ph {
            continue;
        }
        for c in 0..x.width {
            let pc = c + pad_left;
            if pc >= pw {
                continue;
            }
            for ch in 0..in_channels {
                padded[(pr * pw + pc) * in_channels + ch] = f64::from(x.at(r, c, ch));
            }
        }
    }
    let weights: Vec<f64> = w.iter().map(|&v| f64::from(v)).collect();
    let per_filter = in_channels * kh * kw;

    let mut out = vec![0.0f32; out_h * out_w * out_channels];
    let mut count = 0u64;
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (y0, x0) = (oy * stride[0], ox * stride[1]);
            for oc in 0..out_channels {
                let filter = &weights[oc * per_filter..(oc + 1) * per_filter];
                let mut acc = bias.map_or(0.0, |b| f64::from(b[oc]));
                for ci in 0..in_channels {
                    for ky in 0..kh {
                        let row = (y0 + ky) * pw;
                        let wrow = &filter[(ci * kh + ky) * kw..(ci * kh + ky + 1) * kw];
                        for (kx, &wv) in wrow.iter().enumerate() {
                            acc += wv * padded[(row + x0 + kx) * in_channels + ci];
                            count += 1;
                        }
                    }
                }
                out[(oy * out_w + ox) * out_channels + oc] = acc as f32;
            }
        }
    }
    *macs += count;
    FeatureMap { height: out_h, width: out_w, channels: out_channels, data: out }
}

fn maxpool(x: &FeatureMap, window: [usize; 2]) -> FeatureMap {
    let (oh, ow) = (x.height / window[0], x.width / window[1]);
    let mut out = Vec::with_capacity(oh * ow * x.channels);
    for r in 0..oh {
        for c in 0..ow {
            for ch in 0..x.channels {
                let mut best = f32::NEG_INFINITY;
                for dr in 0..window[0] {
                    for dc in 0..window[1] {
                        let v = x.at(r * window[0] + dr, c * window[1] + dc, ch);
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    FeatureMap { height: oh, width: ow, channels: x.channels, data: out }
}

const INPUT_TENSOR: &str = "input";

/// Stores a feature map as a layer-less container holding one `[height, width, channels]` tensor.
pub fn feature_map_to_bytes(map: &FeatureMap) -> Result<Vec<u8>> {
    let model = Model::from_parts(
        [map.height, map.width, map.channels],
        None,
        crate::model::DEFAULT_BN_EPSILON,
        Vec::new(),
        vec![Tensor::new(
            INPUT_TENSOR,
            vec![map.height, map.width, map.channels],
            &["row", "col", "channel"],
            map.data.clone(),
        )],
    );
    encode(&model)
}

pub fn feature_map_from_bytes(bytes: &[u8]) -> Result<FeatureMap> {
    let model = decode(bytes)?;
    let [spec] = model.descriptor.tensors.as_slice() else {
        return Err(Error::Format(format!(
            "input container must hold exactly one tensor, found {}",
            model.descriptor.tensors.len()
        )));
    };
    let &[h, w, c] = spec.shape.as_slice() else {
        return Err(Error::Format(format!(
            "input tensor has shape {:?}, expected [height, width, channels]",
            spec.shape
        )));
    };
    FeatureMap::new(h, w, c, model.require(&spec.name)?.to_vec())
}

pub fn save_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, feature_map_to_bytes(map)?)?;
    Ok(())
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    feature_map_from_bytes(&std::fs::read(path)?)
}
