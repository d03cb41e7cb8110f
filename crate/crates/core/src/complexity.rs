//! Parameter and multiply-accumulate (MAC) accounting.
//!
//! MACs count one multiply plus one accumulate per weight tap: conv layers
//! contribute `out_h * out_w * kH * kW * in * out`, dense layers `in * out`.
//! Batch-norm, pooling and activations cost nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, LayerKind, Model};
use crate::surgery::{apply_plan, PruningPlan};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub total_params: u64,
    pub total_macs: u64,
    pub layers: Vec<LayerCost>,
}

fn layer_params(kind: &LayerKind) -> u64 {
    match *kind {
        LayerKind::Conv2d { out_channels, in_channels, kernel, ref bias, .. } => {
            (kernel[0] * kernel[1] * in_channels * out_channels) as u64
                + bias.as_ref().map_or(0, |_| out_channels as u64)
        }
        LayerKind::BatchNorm { channels, .. } => 4 * channels as u64,
        LayerKind::Dense { in_units, out_units, ref bias, .. } => {
            (in_units * out_units) as u64 + bias.as_ref().map_or(0, |_| out_units as u64)
        }
        _ => 0,
    }
}

fn layer_macs(kind: &LayerKind, output: Activation) -> u64 {
    match (kind, output) {
        (LayerKind::Conv2d { out_channels, in_channels, kernel, .. }, Activation::Map { height, width, .. }) => {
            (height * width * kernel[0] * kernel[1] * in_channels * out_channels) as u64
        }
        (LayerKind::Dense { in_units, out_units, .. }, _) => (in_units * out_units) as u64,
        _ => 0,
    }
}

/// Parameter and MAC counts per layer. Fails only if shape propagation fails.
pub fn count(model: &Model) -> Result<Counts> {
    let desc = &model.descriptor;
    let acts = desc.propagate().map_err(|v| Error::Validation(vec![v]))?;
    let layers: Vec<LayerCost> = desc
        .layers
        .iter()
        .zip(&acts[1..])
        .map(|(l, &out)| LayerCost {
            name: l.name.clone(),
            kind: l.kind.tag(),
            params: layer_params(&l.kind),
            macs: layer_macs(&l.kind, out),
        })
        .collect();
    Ok(Counts {
        total_params: layers.iter().map(|l| l.params).sum(),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        layers,
    })
}

pub fn count_params(model: &Model) -> Result<u64> {
    Ok(count(model)?.total_params)
}

pub fn count_macs(model: &Model) -> Result<u64> {
    Ok(count(model)?.total_macs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacsMode {
    /// Full recount of both models.
    Exact,
    /// Each pruned conv layer saves `removed / original` of its own MACs;
    /// savings in downstream layers' input channels are ignored.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub macs_mode: MacsMode,
    pub before: Counts,
    pub after: Counts,
    pub params_reduced: u64,
    /// `100 * (before - after) / before`, rounded to 0.01.
    pub params_reduction_pct: f64,
    /// Unrounded; fractional in paper mode.
    pub macs_reduced: f64,
    pub macs_reduction_pct: f64,
}

fn pct(reduced: f64, before: f64) -> f64 {
    if before == 0.0 {
        return 0.0;
    }
    (100.0 * reduced / before * 100.0).round() / 100.0
}

/// Compares an unpruned model with a pruned version of it.
pub fn reduction_report(before: &Model, after: &Model, mode: MacsMode) -> Result<ComplexityReport> {
    let b = &before.descriptor;
    let a = &after.descriptor;
    if b.layers.len() != a.layers.len()
        || b.layers.iter().zip(&a.layers).any(|(x, y)| x.name != y.name || x.kind.tag() != y.kind.tag())
    {
        return Err(Error::Argument("models do not share the same layer sequence".into()));
    }
    let before_counts = count(before)?;
    let after_counts = count(after)?;

    let macs_reduced = match mode {
        MacsMode::Exact => before_counts.total_macs as f64 - after_counts.total_macs as f64,
        MacsMode::Paper => {
            let mut saved = 0.0;
            for ((lb, la), cost) in b.layers.iter().zip(&a.layers).zip(&before_counts.layers) {
                if let (LayerKind::Conv2d { out_channels: nb, .. }, LayerKind::Conv2d { out_channels: na, .. }) =
                    (&lb.kind, &la.kind)
                {
                    if na > nb {
                        return Err(Error::Argument(format!("layer `{}` grew from {nb} to {na} filters", lb.name)));
                    }
                    saved += (nb - na) as f64 / *nb as f64 * cost.macs as f64;
                }
            }
            saved
        }
    };
    let params_reduced = before_counts.total_params.saturating_sub(after_counts.total_params);
    Ok(ComplexityReport {
        macs_mode: mode,
        params_reduction_pct: pct(params_reduced as f64, before_counts.total_params as f64),
        macs_reduction_pct: pct(macs_reduced, before_counts.total_macs as f64),
        params_reduced,
        macs_reduced,
        before: before_counts,
        after: after_counts,
    })
}

/// Same as [`reduction_report`] with the pruned model derived from a plan.
pub fn reduction_report_for_plan(before: &Model, plan: &PruningPlan, mode: MacsMode) -> Result<ComplexityReport> {
    let after = apply_plan(before, plan)?;
    reduction_report(before, &after, mode)
}

impl ComplexityReport {
    /// Plain-text table for terminals.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:<10} {:>10} {:>10} {:>16} {:>16}\n",
            "layer", "kind", "params", "params'", "MACs", "MACs'"
        ));
        for (b, a) in self.before.layers.iter().zip(&self.after.layers) {
            if b.params == 0 && b.macs == 0 {
                continue;
            }
            out.push_str(&format!(
                "{:<12} {:<10} {:>10} {:>10} {:>16} {:>16}\n",
                b.name, b.kind, b.params, a.params, b.macs, a.macs
            ));
        }
        out.push_str(&format!(
            "{:<23} {:>10} {:>10} {:>16} {:>16}\n",
            "total", self.before.total_params, self.after.total_params, self.before.total_macs, self.after.total_macs
        ));
        out.push_str(&format!(
            "params reduced by {} ({:.2}%), MACs reduced by {:.2}M ({:.2}%, {} mode)\n",
            self.params_reduced,
            self.params_reduction_pct,
            self.macs_reduced / 1e6,
            self.macs_reduction_pct,
            match self.macs_mode {
                MacsMode::Exact => "exact",
                MacsMode::Paper => "paper",
            }
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelBuilder, Padding};

    #[test]
    fn conv_params_closed_form() {
        let m = ModelBuilder::new([40, 500, 1])
            .conv2d("c", 16, [7, 7], Padding::Same, vec![0.0; 784], Some(vec![0.0; 16]))
            .build()
            .unwrap();
        assert_eq!(count_params(&m).unwrap(), 7 * 7 * 16 + 16);
        assert_eq!(count_params(&m).unwrap(), 800);
    }

    #[test]
    fn conv_macs_closed_form() {
        let m = ModelBuilder::new([40, 500, 16])
            .conv2d("c", 16, [7, 7], Padding::Same, vec![0.0; 49 * 256], None)
            .build()
            .unwrap();
        assert_eq!(count_macs(&m).unwrap(), 40 * 500 * 7 * 7 * 16 * 16);
        assert_eq!(count_macs(&m).unwrap(), 250_880_000);
    }

    #[test]
    fn dense_counts() {
        let m = ModelBuilder::new([1, 1, 64])
            .flatten("f")
            .dense("d", 100, vec![0.0; 6400], Some(vec![0.0; 100]))
            .build()
            .unwrap();
        assert_eq!(count_params(&m).unwrap(), 6500);
        assert_eq!(count_macs(&m).unwrap(), 6400);
    }

    #[test]
    fn identity_report_is_zero() {
        let m = ModelBuilder::new([4, 4, 1])
            .conv2d("c", 2, [3, 3], Padding::Same, vec![0.1; 18], Some(vec![0.0; 2]))
            .build()
            .unwrap();
        for mode in [MacsMode::Exact, MacsMode::Paper] {
            let r = reduction_report(&m, &m, mode).unwrap();
            assert_eq!(r.params_reduction_pct, 0.0);
            assert_eq!(r.macs_reduction_pct, 0.0);
        }
    }

    #[test]
    fn incomparable_models_are_rejected() {
        let a = ModelBuilder::new([4, 4, 1]).relu("r").build().unwrap();
        let b = ModelBuilder::new([4, 4, 1]).relu("x").build().unwrap();
        assert!(matches!(reduction_report(&a, &b, MacsMode::Exact), Err(Error::Argument(_))));
    }
}
