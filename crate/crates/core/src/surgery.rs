//! Structural pruning: per-layer filter removals become a closed set of tensor
//! slices, which are then applied to produce a new, smaller model.
//!
//! Removing output channel `k` of a conv layer also deletes entry `k` of any
//! batch-norm that follows it, input channel `k` of the next conv layer, or,
//! across a flatten, every dense-layer input row fed by channel `k`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::model::{Activation, FlattenOrder, LayerKind, Model, Tensor};

/// Removed filter indices keyed by conv layer name.
pub type Removals = BTreeMap<String, Vec<usize>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    /// Ascending.
    pub kept: Vec<usize>,
    /// Ascending.
    pub removed: Vec<usize>,
}

/// Spatial layout at a flatten boundary, needed to translate channels into dense rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlattenMapping {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub order: FlattenOrder,
}

impl FlattenMapping {
    /// Flattened positions of the given channels, ascending.
    pub fn positions(&self, channels: &[usize]) -> Vec<usize> {
        let mut rows: Vec<usize> = channels
            .iter()
            .flat_map(|&ch| {
                (0..self.height).flat_map(move |r| {
                    (0..self.width).map(move |c| self.order.index(r, c, ch, self.height, self.width, self.channels))
                })
            })
            .collect();
        rows.sort_unstable();
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "edit", rename_all = "snake_case")]
pub enum SliceEdit {
    /// Drop filters (weight axis 0) and their biases.
    OutputChannels { layer: String, removed: Vec<usize> },
    /// Drop conv weight axis 1.
    InputChannels { layer: String, removed: Vec<usize> },
    /// Drop entries of gamma, beta, moving mean and moving variance.
    BatchNormChannels { layer: String, removed: Vec<usize> },
    /// Drop rows of a `[in_units, out_units]` dense weight.
    DenseRows { layer: String, removed: Vec<usize>, source_channels: Vec<usize>, mapping: FlattenMapping },
}

impl SliceEdit {
    pub fn layer(&self) -> &str {
        match self {
            SliceEdit::OutputChannels { layer, .. }
            | SliceEdit::InputChannels { layer, .. }
            | SliceEdit::BatchNormChannels { layer, .. }
            | SliceEdit::DenseRows { layer, .. } => layer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningPlan {
    /// Conv layers with a selection, in network order.
    pub layers: Vec<LayerPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flatten_order: Option<FlattenOrder>,
    #[serde(default)]
    pub edits: Vec<SliceEdit>,
}

impl PruningPlan {
    pub fn removals(&self) -> Removals {
        self.layers.iter().map(|l| (l.name.clone(), l.removed.clone())).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.edits.is_empty()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Expands per-layer removals into a plan closed under channel propagation.
pub fn build_plan(model: &Model, removals: &Removals) -> Result<PruningPlan> {
    let desc = &model.descriptor;
    let acts = desc.propagate().map_err(|v| Error::Validation(vec![v]))?;

    for name in removals.keys() {
        match desc.layers.iter().find(|l| &l.name == name) {
            None => return Err(Error::Argument(format!("unknown layer `{name}`"))),
            Some(l) if !matches!(l.kind, LayerKind::Conv2d { .. }) => {
                return Err(Error::Argument(format!(
                    "layer `{name}` is a {}, only conv2d filters can be pruned",
                    l.kind.tag()
                )))
            }
            Some(_) => {}
        }
    }

    let mut layers = Vec::new();
    let mut edits = Vec::new();
    for (idx, layer) in desc.layers.iter().enumerate() {
        let Some(requested) = removals.get(&layer.name) else { continue };
        let LayerKind::Conv2d { out_channels, .. } = layer.kind else { unreachable!() };
        let removed: BTreeSet<usize> = requested.iter().copied().collect();
        if let Some(&bad) = removed.iter().find(|&&i| i >= out_channels) {
            return Err(Error::Plan(format!(
                "filter index {bad} out of range for layer `{}` with {out_channels} filters",
                layer.name
            )));
        }
        if removed.len() == out_channels {
            return Err(Error::Plan(format!("removal would delete every filter of layer `{}`", layer.name)));
        }
        let removed: Vec<usize> = removed.into_iter().collect();
        let kept = (0..out_channels).filter(|i| removed.binary_search(i).is_err()).collect();
        layers.push(LayerPlan { name: layer.name.clone(), kept, removed: removed.clone() });
        if removed.is_empty() {
            continue;
        }
        edits.push(SliceEdit::OutputChannels { layer: layer.name.clone(), removed: removed.clone() });
        propagate_removal(model, &acts, idx, &removed, &mut edits)?;
    }
    Ok(PruningPlan { layers, flatten_order: desc.flatten_order, edits })
}

fn propagate_removal(
    model: &Model,
    acts: &[Activation],
    conv_idx: usize,
    removed: &[usize],
    edits: &mut Vec<SliceEdit>,
) -> Result<()> {
    let desc = &model.descriptor;
    // Channel indices before a flatten, flattened positions after it.
    let mut current = removed.to_vec();
    let mut mapping: Option<FlattenMapping> = None;
    for (j, next) in desc.layers.iter().enumerate().skip(conv_idx + 1) {
        match &next.kind {
            LayerKind::BatchNorm { .. } => {
                edits.push(SliceEdit::BatchNormChannels { layer: next.name.clone(), removed: current.clone() });
            }
            LayerKind::Conv2d { .. } => {
                edits.push(SliceEdit::InputChannels { layer: next.name.clone(), removed: current.clone() });
                return Ok(());
            }
            LayerKind::Flatten => {
                let order = desc.flatten_order.ok_or_else(|| {
                    Error::Plan(format!(
                        "layer `{}` flattens pruned channels but the model does not record a flatten order",
                        next.name
                    ))
                })?;
                let Activation::Map { height, width, channels } = acts[j] else {
                    return Ok(());
                };
                let m = FlattenMapping { height, width, channels, order };
                current = m.positions(&current);
                mapping = Some(m);
            }
            LayerKind::Dense { .. } => {
                let Some(mapping) = mapping else {
                    return Err(Error::Plan(format!("dense layer `{}` reached without a flatten", next.name)));
                };
                edits.push(SliceEdit::DenseRows {
                    layer: next.name.clone(),
                    removed: current,
                    source_channels: removed.to_vec(),
                    mapping,
                });
                return Ok(());
            }
            LayerKind::MaxPool { .. } | LayerKind::Relu | LayerKind::Softmax | LayerKind::Dropout { .. } => {}
        }
    }
    Ok(())
}

fn keep_along_axis(data: &[f32], shape: &[usize], axis: usize, removed: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let kept: Vec<usize> = (0..len).filter(|i| removed.binary_search(i).is_err()).collect();
    let mut out = Vec::with_capacity(outer * kept.len() * inner);
    for o in 0..outer {
        for &k in &kept {
            let start = (o * len + k) * inner;
            out.extend_from_slice(&data[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = kept.len();
    (out, new_shape)
}

fn slice_tensor(tensors: &mut HashMap<String, Tensor>, name: &str, axis: usize, removed: &[usize]) -> Result<()> {
    let t = tensors
        .get_mut(name)
        .ok_or_else(|| Error::Validation(vec![Violation::model(format!("missing tensor `{name}`"))]))?;
    let (data, shape) = keep_along_axis(&t.data, &t.shape, axis, removed);
    t.data = data;
    t.shape = shape;
    Ok(())
}

/// Applies a plan produced by [`build_plan`] for this model.
///
/// Surviving weights are copied, never recomputed.
pub fn apply_plan(model: &Model, plan: &PruningPlan) -> Result<Model> {
    let expected = build_plan(model, &plan.removals()).map_err(|e| mismatch(format!("{e}")))?;
    if &expected != plan {
        return Err(mismatch("plan was not built for this model".into()));
    }

    let desc = &model.descriptor;
    let order: Vec<String> = desc.tensors.iter().map(|t| t.name.clone()).collect();
    let mut tensors: HashMap<String, Tensor> = model.tensors().into_iter().map(|t| (t.name.clone(), t)).collect();
    let mut layers = desc.layers.clone();

    for edit in &plan.edits {
        let layer = layers
            .iter_mut()
            .find(|l| l.name == edit.layer())
            .ok_or_else(|| mismatch(format!("unknown layer `{}`", edit.layer())))?;
        match (edit, &mut layer.kind) {
            (SliceEdit::OutputChannels { removed, .. }, LayerKind::Conv2d { out_channels, weight, bias, .. }) => {
                slice_tensor(&mut tensors, weight, 0, removed)?;
                if let Some(bias) = bias {
                    slice_tensor(&mut tensors, bias, 0, removed)?;
                }
                *out_channels -= removed.len();
            }
            (SliceEdit::InputChannels { removed, .. }, LayerKind::Conv2d { in_channels, weight, .. }) => {
                slice_tensor(&mut tensors, weight, 1, removed)?;
                *in_channels -= removed.len();
            }
            (
                SliceEdit::BatchNormChannels { removed, .. },
                LayerKind::BatchNorm { channels, gamma, beta, moving_mean, moving_variance },
            ) => {
                for name in [&*gamma, &*beta, &*moving_mean, &*moving_variance] {
                    slice_tensor(&mut tensors, name, 0, removed)?;
                }
                *channels -= removed.len();
            }
            (SliceEdit::DenseRows { removed, .. }, LayerKind::Dense { in_units, weight, .. }) => {
                slice_tensor(&mut tensors, weight, 0, removed)?;
                *in_units -= removed.len();
            }
            (edit, kind) => {
                return Err(mismatch(format!("edit {edit:?} does not apply to a {} layer", kind.tag())));
            }
        }
    }

    let tensors = order.iter().filter_map(|name| tensors.remove(name)).collect();
    Model::new(desc.input_shape, desc.flatten_order, desc.batchnorm_epsilon, layers, tensors)
}

fn mismatch(message: String) -> Error {
    Error::Validation(vec![Violation::model(format!("plan/model mismatch: {message}"))])
}

/// Removals on the original model equivalent to applying `first` and then
/// `second` (whose indices refer to the model produced by `first`).
pub fn compose_removals(model: &Model, first: &PruningPlan, second: &PruningPlan) -> Result<Removals> {
    let mut out = first.removals();
    for lp in &second.layers {
        let kept_after_first: Vec<usize> = match first.layer(&lp.name) {
            Some(a) => a.kept.clone(),
            None => {
                let layer =
                    model.layer(&lp.name).ok_or_else(|| Error::Argument(format!("unknown layer `{}`", lp.name)))?;
                let LayerKind::Conv2d { out_channels, .. } = layer.kind else {
                    return Err(Error::Argument(format!("layer `{}` is not a conv2d layer", lp.name)));
                };
                (0..out_channels).collect()
            }
        };
        let entry = out.entry(lp.name.clone()).or_default();
        for &r in &lp.removed {
            let original = *kept_after_first
                .get(r)
                .ok_or_else(|| Error::Plan(format!("index {r} out of range for layer `{}`", lp.name)))?;
            entry.push(original);
        }
        entry.sort_unstable();
        entry.dedup();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelBuilder, Padding};

    fn seq(n: usize) -> Vec<f32> {
        (0..n).map(|i| i as f32 * 0.25 - 1.0).collect()
    }

    fn two_conv() -> Model {
        ModelBuilder::new([4, 4, 1])
            .conv2d("c1", 3, [3, 3], Padding::Same, seq(27), Some(seq(3)))
            .batchnorm("bn1", vec![1.0; 3], vec![0.5; 3], vec![0.1; 3], vec![2.0; 3])
            .relu("r1")
            .conv2d("c2", 2, [1, 1], Padding::Same, seq(6), Some(seq(2)))
            .maxpool("p", [2, 2])
            .flatten("f")
            .dense("d", 3, seq(8 * 3), Some(seq(3)))
            .build()
            .unwrap()
    }

    fn removals(pairs: &[(&str, &[usize])]) -> Removals {
        pairs.iter().map(|(n, r)| (n.to_string(), r.to_vec())).collect()
    }

    #[test]
    fn propagation_reaches_bn_and_next_conv() {
        let m = two_conv();
        let plan = build_plan(&m, &removals(&[("c1", &[1])])).unwrap();
        assert_eq!(plan.layers[0].kept, vec![0, 2]);
        assert_eq!(
            plan.edits,
            vec![
                SliceEdit::OutputChannels { layer: "c1".into(), removed: vec![1] },
                SliceEdit::BatchNormChannels { layer: "bn1".into(), removed: vec![1] },
                SliceEdit::InputChannels { layer: "c2".into(), removed: vec![1] },
            ]
        );
    }

    #[test]
    fn propagation_crosses_flatten() {
        let m = two_conv();
        let plan = build_plan(&m, &removals(&[("c2", &[0])])).unwrap();
        let SliceEdit::DenseRows { removed, mapping, .. } = &plan.edits[1] else { panic!("{:?}", plan.edits) };
        // 2x2x2 map, channels last: channel 0 sits at even positions
        assert_eq!(removed, &vec![0, 2, 4, 6]);
        assert_eq!(mapping.order, FlattenOrder::ChannelsLast);
    }

    #[test]
    fn apply_slices_every_tensor() {
        let m = two_conv();
        let plan = build_plan(&m, &removals(&[("c1", &[1]), ("c2", &[0])])).unwrap();
        let p = apply_plan(&m, &plan).unwrap();
        let w1 = p.tensor("c1.weight").unwrap();
        assert_eq!(w1.len(), 18);
        assert_eq!(&w1[..9], &m.tensor("c1.weight").unwrap()[..9]);
        assert_eq!(&w1[9..], &m.tensor("c1.weight").unwrap()[18..]);
        assert_eq!(p.tensor("bn1.gamma").unwrap().len(), 2);
        // c2 weight [2,3,1,1] -> keep filter 1, input channels 0 and 2
        assert_eq!(
            p.tensor("c2.weight").unwrap(),
            &[m.tensor("c2.weight").unwrap()[3], m.tensor("c2.weight").unwrap()[5]]
        );
        let d = m.tensor("d.weight").unwrap();
        let expected: Vec<f32> = [1, 3, 5, 7].iter().flat_map(|&r| d[r * 3..r * 3 + 3].to_vec()).collect();
        assert_eq!(p.tensor("d.weight").unwrap(), expected.as_slice());
    }

    #[test]
    fn identity_plan_is_noop() {
        let m = two_conv();
        let plan = build_plan(&m, &Removals::new()).unwrap();
        assert!(plan.is_identity());
        assert_eq!(apply_plan(&m, &plan).unwrap(), m);
        let plan = build_plan(&m, &removals(&[("c1", &[])])).unwrap();
        assert!(plan.is_identity());
        assert_eq!(apply_plan(&m, &plan).unwrap(), m);
    }

    #[test]
    fn removing_every_filter_is_rejected() {
        let m = two_conv();
        assert!(matches!(build_plan(&m, &removals(&[("c2", &[0, 1])])), Err(Error::Plan(_))));
        assert!(matches!(build_plan(&m, &removals(&[("c2", &[5])])), Err(Error::Plan(_))));
        assert!(matches!(build_plan(&m, &removals(&[("zz", &[0])])), Err(Error::Argument(_))));
        assert!(matches!(build_plan(&m, &removals(&[("bn1", &[0])])), Err(Error::Argument(_))));
    }

    #[test]
    fn missing_flatten_order_is_refused() {
        let mut m = two_conv();
        m.descriptor.flatten_order = None;
        assert!(matches!(build_plan(&m, &removals(&[("c2", &[0])])), Err(Error::Plan(_))));
        // pruning that never reaches the flatten is fine
        assert!(build_plan(&m, &removals(&[("c1", &[0])])).is_ok());
    }

    #[test]
    fn foreign_plan_is_rejected() {
        let m = two_conv();
        let mut plan = build_plan(&m, &removals(&[("c1", &[1])])).unwrap();
        plan.edits.pop();
        assert!(matches!(apply_plan(&m, &plan), Err(Error::Validation(_))));
    }

    #[test]
    fn two_filter_layer_keeps_the_other() {
        let m = two_conv();
        for k in 0..2 {
            let plan = build_plan(&m, &removals(&[("c2", &[k])])).unwrap();
            let p = apply_plan(&m, &plan).unwrap();
            let orig = m.tensor("c2.weight").unwrap();
            assert_eq!(p.tensor("c2.weight").unwrap(), &orig[(1 - k) * 3..(2 - k) * 3]);
        }
    }

    #[test]
    fn channels_first_positions() {
        let m = FlattenMapping { height: 2, width: 2, channels: 3, order: FlattenOrder::ChannelsFirst };
        assert_eq!(m.positions(&[1]), vec![4, 5, 6, 7]);
        let m = FlattenMapping { order: FlattenOrder::ChannelsLast, ..m };
        assert_eq!(m.positions(&[1]), vec![1, 4, 7, 10]);
    }
}
