//! Linear probe: one softmax layer trained with Adam on frozen features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_rect, AnalysisError, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::seeded;
use crate::tensor::{matmul_raw, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            batch: 512,
            lr: 1e-4,
            epochs: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Highest test accuracy after any epoch.
    pub best_test_accuracy: f64,
    pub best_epoch: usize,
    /// Test accuracy after each epoch.
    pub curve: Vec<f64>,
}

fn accuracy(w: &[f64], b: &[f64], x: &[Vec<f64>], y: &[usize], d: usize, k: usize) -> f64 {
    let correct = x
        .iter()
        .zip(y)
        .filter(|(row, &label)| {
            let logits = matmul_raw(row, w, 1, d, k);
            let mut best = 0;
            for c in 1..k {
                if logits[c] + b[c] > logits[best] + b[best] {
                    best = c;
                }
            }
            best == label
        })
        .count();
    correct as f64 / x.len() as f64
}

/// Trains from zero weights on `(train_x, train_y)` and reports the best
/// accuracy on `(test_x, test_y)` seen after any epoch.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if cfg.batch == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(AnalysisError::Config(format!("{cfg:?}")));
    }
    if train_x.is_empty() || test_x.is_empty() {
        return Err(AnalysisError::TooFewSamples { need: 1, got: 0 });
    }
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(AnalysisError::Ragged);
    }
    let d = check_rect(train_x)?;
    if check_rect(test_x)? != d {
        return Err(AnalysisError::Ragged);
    }
    let k = train_y.iter().chain(test_y).max().map_or(0, |m| m + 1);
    if train_y.iter().all(|&c| c == train_y[0]) {
        return Err(AnalysisError::SingleClass);
    }
    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let mut opt = Adam::new(AdamConfig::adam(cfg.lr), &[d * k, k]);
    let mut rng = seeded(seed);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let wv = tape.leaf(Tensor::matrix(d, k, w.clone())?);
            let bv = tape.leaf(Tensor::vector(b.clone()));
            let xs: Vec<f64> = chunk.iter().flat_map(|&i| train_x[i].iter().copied()).collect();
            let xv = tape.constant(Tensor::matrix(chunk.len(), d, xs)?);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let logits = tape.matmul(xv, wv)?;
            let logits = tape.add_row(logits, bv)?;
            let lsm = tape.log_softmax(logits)?;
            let picked = tape.pick(lsm, &labels)?;
            let m = tape.mean(picked);
            let loss = tape.neg(m);
            let grads = tape.backward(loss)?;
            let gw = grads.get_or_zeros(wv, d * k);
            let gb = grads.get_or_zeros(bv, k);
            opt.step(&mut [&mut w, &mut b], &[gw, gb]);
        }
        curve.push(accuracy(&w, &b, test_x, test_y, d, k));
    }
    let (best_epoch, best) = curve
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &a)| if a > acc.1 { (i, a) } else { acc });
    Ok(ProbeResult {
        best_test_accuracy: best,
        best_epoch,
        curve,
    })
}

pub fn curve_csv(r: &ProbeResult) -> String {
    let mut out = String::from("epoch,test_accuracy\n");
    for (i, a) in r.curve.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, a));
    }
    out
}
