use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geom::BoxDelta;
use crate::loss::sigmoid;

/// Linear classification and box-regression heads over per-anchor feature
/// rows. Dropout, when used, acts on the shared head inputs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToyModel {
    pub n_classes: usize,
    pub dim: usize,
    /// `n_classes x dim`, row-major.
    pub cls_weights: Vec<f64>,
    pub cls_bias: Vec<f64>,
    /// `4 x dim`, row-major.
    pub reg_weights: Vec<f64>,
    pub reg_bias: [f64; 4],
}

/// Head outputs for a batch of anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `anchors x n_classes`.
    pub logits: Vec<f64>,
    pub deltas: Vec<BoxDelta>,
}

impl ToyModel {
    /// Small Gaussian weights, zero regression bias and classification bias
    /// set so every class starts at probability `prior`.
    pub fn init(n_classes: usize, dim: usize, init_std: f64, prior: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    init_std * z
                })
                .collect()
        };
        let cls_weights = draw(n_classes * dim);
        let reg_weights = draw(4 * dim);
        ToyModel {
            n_classes,
            dim,
            cls_weights,
            cls_bias: vec![-libm::log((1.0 - prior) / prior); n_classes],
            reg_weights,
            reg_bias: [0.0; 4],
        }
    }

    pub fn num_params(&self) -> usize {
        self.cls_weights.len() + self.cls_bias.len() + self.reg_weights.len() + 4
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(f64::is_finite)
    }

    /// All parameters in a fixed order: class weights, class bias,
    /// regression weights, regression bias.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.cls_weights
            .iter()
            .chain(&self.cls_bias)
            .chain(&self.reg_weights)
            .chain(&self.reg_bias)
            .copied()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.cls_weights
            .iter_mut()
            .chain(&mut self.cls_bias)
            .chain(&mut self.reg_weights)
            .chain(&mut self.reg_bias)
    }

    fn head_row(&self, x: &[f64], logits: &mut Vec<f64>) -> BoxDelta {
        for c in 0..self.n_classes {
            let w = &self.cls_weights[c * self.dim..(c + 1) * self.dim];
            logits.push(self.cls_bias[c] + dot(w, x));
        }
        let mut d = [0.0; 4];
        for (k, v) in d.iter_mut().enumerate() {
            *v = self.reg_bias[k] + dot(&self.reg_weights[k * self.dim..(k + 1) * self.dim], x);
        }
        BoxDelta::from_array(d)
    }

    /// Deterministic forward pass over `anchors x dim` feature rows.
    pub fn forward(&self, features: &[f64]) -> HeadOutput {
        let n = features.len() / self.dim;
        let mut logits = Vec::with_capacity(n * self.n_classes);
        let deltas = features
            .chunks_exact(self.dim)
            .map(|x| self.head_row(x, &mut logits))
            .collect();
        HeadOutput { logits, deltas }
    }

    /// Forward pass with inverted dropout on the head inputs: every input is
    /// zeroed with probability `rate` and the survivors are scaled by
    /// `1 / (1 - rate)`. At `rate == 0` no randomness is drawn and the output
    /// equals [`ToyModel::forward`]; at `rate >= 1` only the biases remain.
    pub fn forward_dropout(&self, features: &[f64], rate: f64, rng: &mut ChaCha8Rng) -> HeadOutput {
        if rate <= 0.0 {
            return self.forward(features);
        }
        let n = features.len() / self.dim;
        let mut logits = Vec::with_capacity(n * self.n_classes);
        let mut dropped = vec![0.0; self.dim];
        let deltas = features
            .chunks_exact(self.dim)
            .map(|x| {
                if rate >= 1.0 {
                    dropped.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    let scale = 1.0 / (1.0 - rate);
                    for (o, v) in dropped.iter_mut().zip(x) {
                        *o = if rng.random::<f64>() < rate { 0.0 } else { v * scale };
                    }
                }
                self.head_row(&dropped, &mut logits)
            })
            .collect();
        HeadOutput { logits, deltas }
    }

    pub fn probs(logits: &[f64]) -> Vec<f64> {
        logits.iter().map(|z| sigmoid(*z)).collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
