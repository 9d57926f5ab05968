//! Gradient taps on score-function call sites.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, SeededRng};

/// One tapped `(score input, ∂L/∂input)` pair. `site` numbers the score
/// inputs of a layer in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapSample {
    pub x: f64,
    pub grad: f64,
    pub site: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientTapRecord {
    pub step: usize,
    pub layer_index: usize,
    pub sample_cap: usize,
    /// Score entries seen by the reservoir, including those not kept.
    pub seen: usize,
    pub samples: Vec<TapSample>,
}

#[derive(Debug, Default)]
struct Reservoir {
    seen: usize,
    samples: Vec<TapSample>,
}

/// Reservoir-samples tapped pairs, independently per layer.
#[derive(Debug)]
pub struct TapCollector {
    cap: usize,
    rng: SeededRng,
    layers: BTreeMap<usize, Reservoir>,
}

impl TapCollector {
    /// Collector for one tapped step. The sampling stream is derived from
    /// `(seed, step)`, so re-running a step reproduces its samples.
    pub fn for_step(sample_cap: usize, seed: u64, step: usize) -> Self {
        Self { cap: sample_cap, rng: rng::substream(seed, step as u64 + 1), layers: BTreeMap::new() }
    }

    pub(crate) fn observe(&mut self, layer: usize, site_offset: usize, inputs: &[f64], grads: &[f64]) {
        let res = self.layers.entry(layer).or_default();
        for (i, (&x, &grad)) in inputs.iter().zip(grads).enumerate() {
            let sample = TapSample { x, grad, site: site_offset + i };
            if res.samples.len() < self.cap {
                res.samples.push(sample);
            } else {
                let j = self.rng.random_range(0..=res.seen);
                if j < self.cap {
                    res.samples[j] = sample;
                }
            }
            res.seen += 1;
        }
    }

    pub fn into_records(self, step: usize) -> Vec<GradientTapRecord> {
        let cap = self.cap;
        self.layers
            .into_iter()
            .map(|(layer_index, res)| GradientTapRecord {
                step,
                layer_index,
                sample_cap: cap,
                seen: res.seen,
                samples: res.samples,
            })
            .collect()
    }
}
