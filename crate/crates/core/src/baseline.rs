//! The DCASE 2021 Task 1A acoustic-scene baseline as a model fixture.
//!
//! Input is a 40 x 500 log-mel patch with one channel:
//!
//! ```text
//! C1  conv 7x7 same, 16 filters -> BN -> ReLU
//! C2  conv 7x7 same, 16 filters -> BN -> ReLU -> maxpool 5x5 -> dropout
//! C3  conv 7x7 same, 32 filters -> BN -> ReLU -> maxpool 4x100 -> dropout
//!     flatten (2x1x32 = 64) -> dense 100 -> ReLU -> dropout -> dense 10 -> softmax
//! ```
//!
//! 46,246 parameters and 286,637,800 MACs per inference. Weights are random
//! (seeded); trained weights have to be supplied as a container file.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{FlattenOrder, Model, ModelBuilder, Padding};

pub const INPUT_SHAPE: [usize; 3] = [40, 500, 1];
pub const CONV_LAYERS: [&str; 3] = ["C1", "C2", "C3"];
pub const BASELINE_PARAMS: u64 = 46_246;
/// Rounded figure quoted for the baseline.
pub const BASELINE_MACS_NOMINAL: u64 = 286_000_000;

/// Glorot-uniform weights plus small random biases and batch-norm statistics.
struct Init(ChaCha8Rng);

impl Init {
    fn glorot(&mut self, n: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..n).map(|_| self.0.gen_range(-limit..limit) as f32).collect()
    }

    fn uniform(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.0.gen_range(lo..hi)).collect()
    }

    fn conv(&mut self, b: ModelBuilder, name: &str, filters: usize) -> ModelBuilder {
        let in_ch = b.current().channels();
        let w = self.glorot(filters * in_ch * 49, in_ch * 49, filters * 49);
        let bias = self.uniform(filters, -0.05, 0.05);
        b.conv2d(name, filters, [7, 7], Padding::Same, w, Some(bias))
    }

    fn bn(&mut self, b: ModelBuilder, name: &str) -> ModelBuilder {
        let c = b.current().channels();
        let gamma = self.uniform(c, 0.8, 1.2);
        let beta = self.uniform(c, -0.1, 0.1);
        let mean = self.uniform(c, -0.2, 0.2);
        let var = self.uniform(c, 0.5, 1.5);
        b.batchnorm(name, gamma, beta, mean, var)
    }

    fn dense(&mut self, b: ModelBuilder, name: &str, units: usize) -> ModelBuilder {
        let inputs = b.current().len();
        let w = self.glorot(inputs * units, inputs, units);
        let bias = self.uniform(units, -0.05, 0.05);
        b.dense(name, units, w, Some(bias))
    }
}

/// Builds the baseline with weights drawn from `seed`.
pub fn dcase2021_task1a(seed: u64) -> Result<Model> {
    let mut init = Init(ChaCha8Rng::seed_from_u64(seed));
    let mut b = ModelBuilder::new(INPUT_SHAPE).flatten_order(Some(FlattenOrder::ChannelsLast));
    b = init.conv(b, "C1", 16);
    b = init.bn(b, "BN1");
    b = init.conv(b.relu("ReLU1"), "C2", 16);
    b = init.bn(b, "BN2");
    b = b.relu("ReLU2").maxpool("Pool1", [5, 5]).dropout("Dropout1", 0.3);
    b = init.conv(b, "C3", 32);
    b = init.bn(b, "BN3");
    b = b.relu("ReLU3").maxpool("Pool2", [4, 100]).dropout("Dropout2", 0.3).flatten("Flatten");
    b = init.dense(b, "Dense1", 100);
    b = b.relu("ReLU4").dropout("Dropout3", 0.3);
    b = init.dense(b, "Dense2", 10);
    b.softmax("Softmax").build()
}
