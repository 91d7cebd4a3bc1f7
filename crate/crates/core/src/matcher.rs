//! Most-likely catalogue matching: median prototypes, Euclidean ranking,
//! open-set novelty flagging, and top-N scoring.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::catalogue::{Catalogue, EmbeddingVector};
use crate::error::{CoreError, Result};
use crate::maskproc::nearest_rank;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    /// Distance above which a query is flagged as a probable new individual.
    pub novelty_threshold: f64,
    /// Quantile of within-class training distances used to calibrate the
    /// novelty threshold.
    pub novelty_quantile: f64,
    pub top_n: usize,
    pub include_noise_in_ranking: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            novelty_threshold: 1.0,
            novelty_quantile: 0.95,
            top_n: 10,
            include_noise_in_ranking: true,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.novelty_threshold > 0.0) || self.top_n == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "novelty threshold must be > 0 and top_n >= 1, got {} and {}",
                self.novelty_threshold, self.top_n
            )));
        }
        if !(self.novelty_quantile > 0.0 && self.novelty_quantile < 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "novelty quantile must lie in (0, 1), got {}",
                self.novelty_quantile
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedMatch {
    pub individual_id: String,
    pub label: String,
    pub distance: f64,
    #[serde(default)]
    pub is_noise: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Ascending by distance.
    pub ranked: Vec<RankedMatch>,
    pub novel: bool,
    pub threshold_used: f64,
}

impl MatchResult {
    pub fn truncated(&self, n: usize) -> MatchResult {
        MatchResult {
            ranked: self.ranked.iter().take(n).cloned().collect(),
            novel: self.novel,
            threshold_used: self.threshold_used,
        }
    }

    pub fn position_of(&self, individual_id: &str) -> Option<usize> {
        self.ranked.iter().position(|m| m.individual_id == individual_id)
    }
}

/// A prototype as seen by the ranker.
#[derive(Debug, Clone)]
pub struct PrototypeRef<'a> {
    pub individual_id: &'a str,
    pub label: &'a str,
    pub is_noise: bool,
    pub vector: &'a [f32],
}

/// Coordinate-wise lower median: the value at sorted position `(n - 1) / 2`
/// in every dimension. Re-normalised when all inputs are normalised.
pub fn build_prototype(embeddings: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    let first = embeddings.first().ok_or(CoreError::EmptyInput("prototype embeddings"))?;
    let dim = first.dim();
    for e in embeddings {
        e.check_dim(dim)?;
    }
    let mid = (embeddings.len() - 1) / 2;
    let mut column = Vec::with_capacity(embeddings.len());
    let values: Vec<f32> = (0..dim)
        .map(|d| {
            column.clear();
            column.extend(embeddings.iter().map(|e| e.values[d]));
            *column
                .select_nth_unstable_by(mid, |a, b| a.total_cmp(b))
                .1
        })
        .collect();
    if embeddings.iter().all(|e| e.normalized) {
        Ok(EmbeddingVector::normalized(values))
    } else {
        Ok(EmbeddingVector::new(values, false))
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// True when the nearest non-noise prototype is farther than `threshold`.
/// With no non-noise candidates every query is novel.
pub fn flag_novel(ranked: &[RankedMatch], threshold: f64) -> bool {
    ranked
        .iter()
        .filter(|m| !m.is_noise)
        .map(|m| m.distance)
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))))
        .map_or(true, |min| min > threshold)
}

/// Ranks `prototypes` by Euclidean distance to `query`; equal distances are
/// ordered by individual id.
pub fn rank_prototypes(
    query: &EmbeddingVector,
    prototypes: &[PrototypeRef<'_>],
    config: &MatcherConfig,
) -> Result<MatchResult> {
    let mut ranked = Vec::with_capacity(prototypes.len());
    for p in prototypes {
        if p.is_noise && !config.include_noise_in_ranking {
            continue;
        }
        if p.vector.len() != query.dim() {
            return Err(CoreError::EmbeddingDimension {
                expected: p.vector.len(),
                found: query.dim(),
            });
        }
        ranked.push(RankedMatch {
            individual_id: p.individual_id.to_string(),
            label: p.label.to_string(),
            distance: euclidean(&query.values, p.vector),
            is_noise: p.is_noise,
        });
    }
    if ranked.is_empty() {
        return Err(CoreError::EmptyInput("catalogue prototypes"));
    }
    ranked.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.individual_id.cmp(&b.individual_id))
    });
    let novel = flag_novel(&ranked, config.novelty_threshold);
    Ok(MatchResult {
        ranked,
        novel,
        threshold_used: config.novelty_threshold,
    })
}

/// Ranks all prototyped individuals of a catalogue snapshot.
pub fn rank(query: &EmbeddingVector, catalogue: &Catalogue) -> Result<MatchResult> {
    query.check_dim(catalogue.dimension)?;
    let protos: Vec<PrototypeRef<'_>> = catalogue
        .individuals
        .iter()
        .filter_map(|ind| {
            ind.prototype.as_ref().map(|p| PrototypeRef {
                individual_id: &ind.id,
                label: &ind.label,
                is_noise: ind.is_noise,
                vector: &p.values,
            })
        })
        .collect();
    rank_prototypes(query, &protos, &catalogue.matcher_config)
}

/// Nearest-rank `quantile` of the distances from each training embedding to
/// its own class prototype.
pub fn calibrate_novelty_threshold(
    classes: &[(Vec<EmbeddingVector>, EmbeddingVector)],
    quantile: f64,
) -> Result<f64> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(CoreError::InvalidConfig(format!(
            "quantile must lie in (0, 1], got {quantile}"
        )));
    }
    let mut distances = Vec::new();
    for (members, proto) in classes {
        for e in members {
            e.check_dim(proto.dim())?;
            distances.push(e.distance(proto));
        }
    }
    if distances.is_empty() {
        return Err(CoreError::EmptyInput("training embeddings"));
    }
    let rank = nearest_rank(quantile, distances.len());
    let (_, value, _) = distances.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    Ok(*value)
}

/// Percentage of queries whose true individual is among the first `n`
/// ranked entries.
pub fn top_n_accuracy(results: &[MatchResult], truths: &[String], n: usize) -> Result<f64> {
    if results.len() != truths.len() {
        return Err(CoreError::DimensionMismatch {
            expected: (truths.len(), 1),
            found: (results.len(), 1),
        });
    }
    if n == 0 {
        return Err(CoreError::InvalidConfig("top-N needs N >= 1".into()));
    }
    if results.is_empty() {
        return Err(CoreError::EmptyInput("match results"));
    }
    let hits = results
        .iter()
        .zip(truths)
        .filter(|(r, t)| r.ranked.iter().take(n).any(|m| &m.individual_id == *t))
        .count();
    Ok(100.0 * hits as f64 / results.len() as f64)
}

/// Structured match report shared by the service and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub query: String,
    pub ranked: Vec<RankedMatch>,
    pub novel: bool,
    pub threshold: f64,
}

impl MatchReport {
    pub fn new(query: impl Into<String>, result: &MatchResult, top_n: usize) -> Self {
        MatchReport {
            query: query.into(),
            ranked: result.ranked.iter().take(top_n).cloned().collect(),
            novel: result.novel,
            threshold: result.threshold_used,
        }
    }
}
