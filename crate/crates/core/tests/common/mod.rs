#![allow(dead_code)]

//! Test-only oracles and generators, independent of the library's numerics.

use prunekit::model::{Activation, LayerKind, Model, ModelBuilder, Padding};
use prunekit::rank1::Matrix;
use prunekit::surgery::Removals;
use rand::seq::SliceRandom;
use rand::Rng;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and column eigenvectors (row-major `n x n`).
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Largest singular value from the eigenvalues of `F^T F` (or `F F^T`, whichever is smaller).
pub fn oracle_sigma1(m: &Matrix) -> f64 {
    let (rows, cols) = (m.rows, m.cols);
    let (n, gram) = if cols <= rows {
        let mut g = vec![0.0; cols * cols];
        for i in 0..cols {
            for j in 0..cols {
                g[i * cols + j] = (0..rows).map(|r| m.data[r * cols + i] * m.data[r * cols + j]).sum();
            }
        }
        (cols, g)
    } else {
        let mut g = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                g[i * rows + j] = (0..cols).map(|c| m.data[i * cols + c] * m.data[j * cols + c]).sum();
            }
        }
        (rows, g)
    };
    let (eig, _) = jacobi_eigen(&gram, n);
    eig.into_iter().fold(0.0, f64::max).max(0.0).sqrt()
}

pub fn frob(data: &[f64]) -> f64 {
    data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Random sequential conv net ending in flatten -> dense, with 1-3 conv blocks.
pub fn random_model(rng: &mut impl Rng) -> Model {
    let h = rng.gen_range(3..9);
    let w = rng.gen_range(3..9);
    let c = rng.gen_range(1..4);
    let mut b = ModelBuilder::new([h, w, c]);
    if rng.gen_bool(0.2) {
        b = b.flatten_order(Some(prunekit::model::FlattenOrder::ChannelsFirst));
    }
    let blocks = rng.gen_range(1..4);
    for i in 0..blocks {
        let prunekit::model::Activation::Map { height, width, channels } = b.current() else { unreachable!() };
        let kh = rng.gen_range(1..4).min(height);
        let kw = rng.gen_range(1..4).min(width);
        let padding = if rng.gen_bool(0.7) { Padding::Same } else { Padding::Valid };
        let out = rng.gen_range(2..6);
        let bias = rng.gen_bool(0.8).then(|| rand_vec(rng, out));
        b = b.conv2d(&format!("conv{i}"), out, [kh, kw], padding, rand_vec(rng, out * channels * kh * kw), bias);
        if rng.gen_bool(0.6) {
            let gamma = rand_vec(rng, out);
            let beta = rand_vec(rng, out);
            let mean = rand_vec(rng, out);
            let var = (0..out).map(|_| rng.gen_range(0.1f32..2.0)).collect();
            b = b.batchnorm(&format!("bn{i}"), gamma, beta, mean, var);
        }
        if rng.gen_bool(0.7) {
            b = b.relu(&format!("relu{i}"));
        }
        let prunekit::model::Activation::Map { height, width, .. } = b.current() else { unreachable!() };
        if height >= 2 && width >= 2 && rng.gen_bool(0.4) {
            b = b.maxpool(&format!("pool{i}"), [rng.gen_range(1..3), rng.gen_range(1..3)]);
        }
        if rng.gen_bool(0.2) {
            b = b.dropout(&format!("drop{i}"), 0.25);
        }
    }
    b = b.flatten("flatten");
    let units = rng.gen_range(2..6);
    let inputs = b.current().len();
    b = b.dense("fc", units, rand_vec(rng, inputs * units), Some(rand_vec(rng, units)));
    if rng.gen_bool(0.5) {
        b = b.relu("fc_relu");
        let outs = rng.gen_range(2..5);
        b = b.dense("head", outs, rand_vec(rng, units * outs), None);
    }
    if rng.gen_bool(0.5) {
        b = b.softmax("softmax");
    }
    b.build().expect("generated model must be valid")
}

pub fn conv_out_channels(model: &Model, name: &str) -> usize {
    match model.layer(name).map(|l| &l.kind) {
        Some(LayerKind::Conv2d { out_channels, .. }) => *out_channels,
        _ => panic!("{name} is not a conv layer"),
    }
}

/// Random non-exhaustive removal set for a random subset of conv layers.
pub fn random_removals(rng: &mut impl Rng, model: &Model) -> Removals {
    let mut out = Removals::new();
    for name in model.descriptor.conv_layer_names() {
        if rng.gen_bool(0.3) {
            continue;
        }
        let n = conv_out_channels(model, name);
        let count = rng.gen_range(0..n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let mut removed = idx[..count].to_vec();
        removed.sort_unstable();
        out.insert(name.to_string(), removed);
    }
    out
}

pub fn random_input(rng: &mut impl Rng, model: &Model) -> prunekit::reference_net::FeatureMap {
    let [h, w, c] = model.descriptor.input_shape;
    prunekit::reference_net::FeatureMap::new(h, w, c, rand_vec(rng, h * w * c)).unwrap()
}

/// Zeroes filter `k` of conv layer `name` (weights and bias) and the gamma/beta
/// of the batch-norm that consumes it, if any.
pub fn zero_filter(model: &Model, name: &str, k: usize) -> Model {
    let mut m = model.clone();
    let idx = m.descriptor.layer_index(name).unwrap();
    let mut zero = |tensor: &str, range: std::ops::Range<usize>| {
        let spec = m.descriptor.tensor_spec(tensor).unwrap().clone();
        let base = (spec.byte_offset / 4) as usize;
        for i in range {
            m.blob[base + i] = 0.0;
        }
    };
    let LayerKind::Conv2d { in_channels, kernel, weight, bias, .. } = model.descriptor.layers[idx].kind.clone() else {
        panic!()
    };
    let per = in_channels * kernel[0] * kernel[1];
    zero(&weight, k * per..(k + 1) * per);
    if let Some(bias) = bias {
        zero(&bias, k..k + 1);
    }
    for layer in &model.descriptor.layers[idx + 1..] {
        match &layer.kind {
            LayerKind::BatchNorm { gamma, beta, .. } => {
                zero(gamma, k..k + 1);
                zero(beta, k..k + 1);
            }
            LayerKind::Conv2d { .. } | LayerKind::Flatten => break,
            _ => {}
        }
    }
    m
}

fn kept(n: usize, removed: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| !removed.contains(i)).collect()
}

/// Recomputes every surviving tensor from the original by index arithmetic and
/// compares bit patterns.
pub fn check_weights_preserved(orig: &Model, pruned: &Model, removals: &Removals) -> Result<(), String> {
    let acts = orig.descriptor.propagate().unwrap();
    let removed_of = |name: &str| removals.get(name).cloned().unwrap_or_default();
    // channels removed from the activation entering each layer
    let mut incoming: Vec<usize> = Vec::new();
    let mut flat_removed: Option<Vec<usize>> = None;
    for (i, layer) in orig.descriptor.layers.iter().enumerate() {
        let after = pruned.layer(&layer.name).ok_or_else(|| format!("layer {} missing after pruning", layer.name))?;
        match (&layer.kind, &after.kind) {
            (
                LayerKind::Conv2d { out_channels, in_channels, kernel, weight, bias, .. },
                LayerKind::Conv2d { weight: w2, bias: b2, .. },
            ) => {
                let outs = kept(*out_channels, &removed_of(&layer.name));
                let ins = kept(*in_channels, &incoming);
                let area = kernel[0] * kernel[1];
                let src = orig.tensor(weight).unwrap();
                let expected: Vec<u32> = outs
                    .iter()
                    .flat_map(|&o| {
                        ins.iter().flat_map(move |&c| (0..area).map(move |p| (o * in_channels + c) * area + p))
                    })
                    .map(|idx| src[idx].to_bits())
                    .collect();
                let got: Vec<u32> = pruned.tensor(w2).unwrap().iter().map(|x| x.to_bits()).collect();
                if got != expected {
                    return Err(format!("conv {}: surviving weights differ", layer.name));
                }
                if let (Some(b), Some(b2)) = (bias, b2) {
                    let src = orig.tensor(b).unwrap();
                    let expected: Vec<u32> = outs.iter().map(|&o| src[o].to_bits()).collect();
                    let got: Vec<u32> = pruned.tensor(b2).unwrap().iter().map(|x| x.to_bits()).collect();
                    if got != expected {
                        return Err(format!("{}: surviving weights differ", layer.name));
                    }
                }
                incoming = removed_of(&layer.name);
            }
            (
                LayerKind::BatchNorm { channels, gamma, beta, moving_mean, moving_variance },
                LayerKind::BatchNorm { .. },
            ) => {
                let keep = kept(*channels, &incoming);
                let LayerKind::BatchNorm { gamma: g2, beta: b2, moving_mean: m2, moving_variance: v2, .. } =
                    &after.kind
                else {
                    unreachable!()
                };
                for (a, b) in [(gamma, g2), (beta, b2), (moving_mean, m2), (moving_variance, v2)] {
                    let src = orig.tensor(a).unwrap();
                    let expected: Vec<u32> = keep.iter().map(|&c| src[c].to_bits()).collect();
                    let got: Vec<u32> = pruned.tensor(b).unwrap().iter().map(|x| x.to_bits()).collect();
                    if got != expected {
                        return Err(format!("{}: surviving weights differ", layer.name));
                    }
                }
            }
            (LayerKind::Flatten, _) => {
                if let Activation::Map { height, width, channels } = acts[i] {
                    let order = orig.descriptor.flatten_order.unwrap();
                    let mut rows = Vec::new();
                    for r in 0..height {
                        for c in 0..width {
                            for &ch in &incoming {
                                rows.push(order.index(r, c, ch, height, width, channels));
                            }
                        }
                    }
                    rows.sort_unstable();
                    flat_removed = Some(rows);
                }
            }
            (LayerKind::Dense { in_units, out_units, weight, .. }, LayerKind::Dense { weight: w2, .. }) => {
                let removed_rows = flat_removed.take().unwrap_or_default();
                let rows = kept(*in_units, &removed_rows);
                let src = orig.tensor(weight).unwrap();
                let expected: Vec<u32> =
                    rows.iter().flat_map(|&r| (0..*out_units).map(move |o| src[r * out_units + o].to_bits())).collect();
                let got: Vec<u32> = pruned.tensor(w2).unwrap().iter().map(|x| x.to_bits()).collect();
                if got != expected {
                    return Err(format!("dense {}: surviving weights differ", layer.name));
                }
            }
            _ => {}
        }
    }
    Ok(())
}
