//! Intra- versus inter-genus similarity of category representations.

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::rng::seeded;
use crate::world::cosine;

pub const CROSS_PICKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenusDelta {
    pub target: usize,
    pub same: usize,
    pub cross: Vec<usize>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenusReport {
    pub deltas: Vec<GenusDelta>,
    pub mean_delta: f64,
    pub skipped: Vec<usize>,
}

/// For each target, `sim(target, one same-genus peer) - mean sim(target, four
/// cross-genus peers)`, peers drawn with a seeded generator. Targets lacking
/// peers are skipped.
pub fn genus_delta(
    n: usize,
    genus: &[usize],
    sim: impl Fn(usize, usize) -> f64,
    seed: u64,
) -> GenusReport {
    let mut rng = seeded(seed);
    let mut deltas = Vec::new();
    let mut skipped = Vec::new();
    for target in 0..n {
        let same: Vec<usize> = (0..n).filter(|&j| j != target && genus[j] == genus[target]).collect();
        let cross: Vec<usize> = (0..n).filter(|&j| genus[j] != genus[target]).collect();
        if same.is_empty() || cross.len() < CROSS_PICKS {
            log::info!("genus delta: target {target} lacks peers, skipped");
            skipped.push(target);
            continue;
        }
        let s = *same.choose(&mut rng).expect("non-empty");
        let mut c = cross;
        c.shuffle(&mut rng);
        c.truncate(CROSS_PICKS);
        let cross_mean = c.iter().map(|&j| sim(target, j)).sum::<f64>() / CROSS_PICKS as f64;
        deltas.push(GenusDelta {
            target,
            same: s,
            delta: sim(target, s) - cross_mean,
            cross: c,
        });
    }
    let mean_delta = if deltas.is_empty() {
        0.0
    } else {
        deltas.iter().map(|d| d.delta).sum::<f64>() / deltas.len() as f64
    };
    GenusReport {
        deltas,
        mean_delta,
        skipped,
    }
}

/// [`genus_delta`] with cosine similarity over `embeddings`.
pub fn genus_delta_cosine(embeddings: &[Vec<f64>], genus: &[usize], seed: u64) -> GenusReport {
    genus_delta(embeddings.len(), genus, |a, b| cosine(&embeddings[a], &embeddings[b]), seed)
}
