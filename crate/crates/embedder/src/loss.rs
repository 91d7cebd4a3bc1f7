//! Triplet loss over squared Euclidean distances and online semi-hard mining.

use finpipe_core::EmbeddingVector;

use crate::error::{EmbedError, Result};

pub type Triplet = (usize, usize, usize);

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(0, |a-p|^2 - |a-n|^2 + margin)` over raw slices.
pub fn triplet_loss_raw(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<f64> {
    if a.len() != p.len() {
        return Err(EmbedError::DimensionMismatch(a.len(), p.len()));
    }
    if a.len() != n.len() {
        return Err(EmbedError::DimensionMismatch(a.len(), n.len()));
    }
    Ok((sq_dist(a, p) - sq_dist(a, n) + margin).max(0.0))
}

pub fn triplet_loss(
    a: &EmbeddingVector,
    p: &EmbeddingVector,
    n: &EmbeddingVector,
    margin: f64,
) -> Result<f64> {
    let cast = |v: &EmbeddingVector| v.values.iter().map(|&x| x as f64).collect::<Vec<_>>();
    triplet_loss_raw(&cast(a), &cast(p), &cast(n), margin)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mining {
    pub triplets: Vec<Triplet>,
    /// Set when the batch holds fewer than two classes.
    pub degenerate: bool,
}

/// For every ordered anchor/positive pair `(a, p)` with `a != p`, picks the
/// negative `n` with `d(a,p) < d(a,n) < d(a,p) + sqrt(margin)` minimising
/// `d(a,n)` (lowest index on ties). Pairs without such a negative are skipped.
pub fn mine_semi_hard<L: PartialEq>(embeddings: &[Vec<f64>], labels: &[L], margin: f64) -> Mining {
    assert_eq!(embeddings.len(), labels.len(), "one label per embedding");
    let n = embeddings.len();
    let distinct = labels.iter().any(|l| *l != labels[0]);
    if n == 0 || !distinct {
        log::warn!("semi-hard mining on a single-class batch; no triplets");
        return Mining { triplets: Vec::new(), degenerate: true };
    }
    let band = margin.sqrt();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(&embeddings[i], &embeddings[j]).sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut triplets = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let dap = dist[a * n + p];
            let mut best: Option<(f64, usize)> = None;
            for neg in 0..n {
                if labels[neg] == labels[a] {
                    continue;
                }
                let dan = dist[a * n + neg];
                if dan > dap && dan < dap + band && best.map_or(true, |(bd, _)| dan < bd) {
                    best = Some((dan, neg));
                }
            }
            if let Some((_, neg)) = best {
                triplets.push((a, p, neg));
            }
        }
    }
    Mining { triplets, degenerate: false }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Mean loss over all mined triplets (0 when none).
    pub loss: f64,
    /// Triplets with strictly positive loss.
    pub active: usize,
    /// Gradient of `loss` with respect to each embedding.
    pub grads: Vec<Vec<f64>>,
}

pub fn batch_loss(embeddings: &[Vec<f64>], triplets: &[Triplet], margin: f64) -> BatchLoss {
    let dim = embeddings.first().map_or(0, |e| e.len());
    let mut grads = vec![vec![0.0; dim]; embeddings.len()];
    if triplets.is_empty() {
        return BatchLoss { loss: 0.0, active: 0, grads };
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut total = 0.0;
    let mut active = 0;
    for &(a, p, n) in triplets {
        let (ea, ep, en) = (&embeddings[a], &embeddings[p], &embeddings[n]);
        let l = sq_dist(ea, ep) - sq_dist(ea, en) + margin;
        if l <= 0.0 {
            continue;
        }
        total += l;
        active += 1;
        for k in 0..dim {
            grads[a][k] += scale * 2.0 * (en[k] - ep[k]);
            grads[p][k] += scale * -2.0 * (ea[k] - ep[k]);
            grads[n][k] += scale * 2.0 * (ea[k] - en[k]);
        }
    }
    BatchLoss { loss: total * scale, active, grads }
}
