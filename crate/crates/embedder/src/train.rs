//! Triplet-loss training loop with class-balanced batches.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::augment;
use crate::config::{AugmentStrategy, BackboneConfig, Optimiser, TrainConfig};
use crate::error::{EmbedError, Result};
use crate::loss::{batch_loss, mine_semi_hard};
use crate::network::{Network, Params};
use crate::preprocess::to_input;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub active_triplets: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<EpochStats>,
}

/// Independent RNG stream for one sample of one batch.
pub fn sample_rng(seed: u64, epoch: usize, batch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 40) ^ ((batch as u64) << 16) ^ index as u64);
    rng
}

/// Draws `P` classes and `K` examples of each; classes with fewer than `K`
/// examples are sampled with replacement.
pub fn sample_batch<R: Rng>(by_class: &[Vec<usize>], p: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let classes: Vec<usize> = (0..by_class.len()).collect();
    let chosen: Vec<usize> = classes.choose_multiple(rng, p.min(classes.len())).copied().collect();
    let mut batch = Vec::with_capacity(chosen.len() * k);
    for c in chosen {
        let members = &by_class[c];
        if members.len() >= k {
            batch.extend(members.choose_multiple(rng, k).copied());
        } else {
            for _ in 0..k {
                batch.push(*members.choose(rng).expect("non-empty class"));
            }
        }
    }
    batch
}

struct OptimiserState {
    m: Params,
    v: Params,
    step: i32,
}

fn optimiser_step(net: &mut Params, grads: &mut Params, state: &mut OptimiserState, tc: &TrainConfig, lr: f64) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    state.step += 1;
    let bc1 = 1.0 - B1.powi(state.step);
    let bc2 = 1.0 - B2.powi(state.step);
    let wd = tc.weight_decay;
    let adam = tc.optimiser == Optimiser::AdaptiveMoment;
    for (((w, g), m), v) in net
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors_mut())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for i in 0..w.len() {
            let gi = g[i] + wd * w[i];
            if adam {
                m[i] = B1 * m[i] + (1.0 - B1) * gi;
                v[i] = B2 * v[i] + (1.0 - B2) * gi * gi;
                w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPS);
            } else {
                w[i] -= lr * gi;
            }
        }
    }
}

/// Trains a freshly initialised backbone on labelled crops.
pub fn train(
    images: &[RgbImage],
    labels: &[String],
    bc: &BackboneConfig,
    tc: &TrainConfig,
    strategy: AugmentStrategy,
) -> Result<TrainOutcome> {
    bc.validate()?;
    tc.validate()?;
    if images.len() != labels.len() {
        return Err(EmbedError::Config(format!("{} images but {} labels", images.len(), labels.len())));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.as_str()).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(EmbedError::InsufficientClasses { needed: 2, found: groups.len() });
    }
    let by_class: Vec<Vec<usize>> = groups.into_values().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut network = Network::new(bc.clone(), &mut rng);
    let mut state = OptimiserState {
        m: network.params.zeros_like(),
        v: network.params.zeros_like(),
        step: 0,
    };
    let per_batch = tc.batch_classes * tc.batch_examples_per_class;
    let batches = (images.len() / per_batch).max(1);
    let mut history = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        let lr = tc.lr_at_epoch(epoch);
        let mut loss_sum = 0.0;
        let mut active_sum = 0;
        for batch in 0..batches {
            let members = sample_batch(&by_class, tc.batch_classes, tc.batch_examples_per_class, &mut rng);
            let mut caches = Vec::with_capacity(members.len());
            for (idx, &m) in members.iter().enumerate() {
                let mut srng = sample_rng(tc.seed, epoch, batch, idx);
                let img = augment(&images[m], strategy, &mut srng);
                let input = to_input(&img, bc.input_size);
                caches.push(network.forward(&input, Some(&mut srng)));
            }
            let embs: Vec<Vec<f64>> = caches.iter().map(|c| c.embedding.to_vec()).collect();
            let batch_labels: Vec<&str> = members.iter().map(|&m| labels[m].as_str()).collect();
            let mined = mine_semi_hard(&embs, &batch_labels, tc.margin);
            let bl = batch_loss(&embs, &mined.triplets, tc.margin);
            if !bl.loss.is_finite() || embs.iter().flatten().any(|v| !v.is_finite()) {
                return Err(EmbedError::NonFiniteLoss {
                    epoch,
                    batch,
                    detail: format!(
                        "loss {} over {} triplets (lr {lr:e})",
                        bl.loss,
                        mined.triplets.len()
                    ),
                });
            }
            loss_sum += bl.loss;
            active_sum += bl.active;
            if bl.active > 0 {
                let mut grads = network.params.zeros_like();
                for (cache, g) in caches.iter().zip(&bl.grads) {
                    if g.iter().any(|&v| v != 0.0) {
                        network.backward(cache, &Array1::from(g.clone()), &mut grads);
                    }
                }
                drop(caches);
                optimiser_step(&mut network.params, &mut grads, &mut state, tc, lr);
            }
            log::debug!(
                "epoch {epoch} batch {batch}: loss {:.6}, {} triplets ({} active)",
                bl.loss,
                mined.triplets.len(),
                bl.active
            );
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / batches as f64,
            lr,
            active_triplets: active_sum,
        };
        log::info!(
            "epoch {epoch}: mean loss {:.6}, lr {:e}, active triplets {}",
            stats.mean_loss,
            lr,
            active_sum
        );
        history.push(stats);
    }
    Ok(TrainOutcome { network, history })
}

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let io = |e: std::io::Error| EmbedError::Io { path: path.to_path_buf(), source: e };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    for row in history {
        w.serialize(row).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}
