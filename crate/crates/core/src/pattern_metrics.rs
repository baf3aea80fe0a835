//! Hallucination-pattern features computed from step scores.
//!
//! - CV score: coefficient of variation over the early window (fluctuation).
//! - Attention score: how often late steps attend to shallow or overthinking
//!   earlier steps (incorrect backtracking).
//! - Step perplexity and its Pearson correlation with step scores
//!   (spurious verification).
//! - Triple classification into Stable / Rising-1 / Rising-2.
//!
//! Thresholds (`tau`, triple thresholds) are expressed in scaled score units.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::StepBoundaries;
use crate::stats;
use crate::trace_store::{AttentionData, TraceLabel};

/// Hyperparameters of the pattern features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternConfig {
    /// Early window is the first `ceil(S / r)` steps.
    pub r: f64,
    /// Later steps start at 1-based index `ceil(eta * S)`.
    pub eta: f64,
    /// Number of most-attended predecessors per later step.
    pub k_att: usize,
    /// Overthinking threshold on scaled scores.
    pub tau: f64,
    pub stable_diff: f64,
    pub rising_gap: f64,
    pub rising_split: f64,
    /// Divide by the number of attended predecessors instead of `k_att`.
    pub normalize_by_attended: bool,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            r: 2.0,
            eta: 0.75,
            k_att: 5,
            tau: 4.0,
            stable_diff: 0.1,
            rising_gap: 1.0,
            rising_split: 4.0,
            normalize_by_attended: false,
        }
    }
}

impl PatternConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 1.0) {
            return Err(Error::Invalid(format!("r must be > 1, got {}", self.r)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Invalid(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        if self.k_att == 0 {
            return Err(Error::Invalid("k_att must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }

    /// Size of the early window for `num_steps` steps.
    pub fn early_window(&self, num_steps: usize) -> usize {
        ((num_steps as f64 / self.r).ceil() as usize).clamp(1.min(num_steps), num_steps)
    }

    /// 0-based index of the first later step.
    pub fn later_start(&self, num_steps: usize) -> usize {
        ((self.eta * num_steps as f64).ceil() as usize).max(1) - 1
    }
}

/// Coefficient of variation over the early window.
///
/// Population standard deviation; returns 0 when the window mean is below 1e-12.
pub fn cv_score(scores: &[f64], r: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Invalid("cv_score needs at least one step".into()));
    }
    if !(r > 1.0) {
        return Err(Error::Invalid(format!("r must be > 1, got {r}")));
    }
    let window = ((scores.len() as f64 / r).ceil() as usize).clamp(1, scores.len());
    let early = &scores[..window];
    if stats::all_equal(early) {
        return Ok(0.0);
    }
    let mu = stats::mean(early);
    if mu.abs() < 1e-12 {
        return Ok(0.0);
    }
    Ok(stats::std_pop(early) / mu)
}

/// Mean step-to-step attention, `a[k][j]` for `j < k`, zero elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAttentionMatrix {
    size: usize,
    values: Vec<f64>,
}

impl StepAttentionMatrix {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            values: vec![0.0; size * size],
        }
    }

    /// Builds from a dense row-major `size × size` array, discarding the
    /// diagonal and upper triangle.
    pub fn from_dense(size: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != size * size {
            return Err(Error::Dimension(format!(
                "step attention needs {} entries, got {}",
                size * size,
                dense.len()
            )));
        }
        let mut m = Self::zeros(size);
        for k in 0..size {
            for j in 0..k {
                m.values[k * size + j] = dense[k * size + j];
            }
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.size + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Reduces attention to step pairs.
///
/// For token-level input, `a[k][j]` is the mean over `t ∈ c_k`, `s ∈ c_j` of
/// the attention averaged over `layers` (each already head-averaged).
/// Step-level input is passed through.
pub fn step_attention(
    attn: &AttentionData,
    boundaries: &StepBoundaries,
    layers: &[usize],
) -> Result<StepAttentionMatrix> {
    let s = boundaries.len();
    match attn {
        AttentionData::StepLevel(t) => {
            if t.shape() != [s, s] {
                return Err(Error::Dimension(format!(
                    "step attention shape {:?} for {s} steps",
                    t.shape()
                )));
            }
            let dense: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
            StepAttentionMatrix::from_dense(s, &dense)
        }
        AttentionData::TokenLevel(per_layer) => {
            let layers = crate::reasoning_score::normalize_layers(layers);
            if layers.is_empty() {
                return Err(Error::Invalid("attention layer set is empty".into()));
            }
            let mut sums = vec![0.0f64; s * s];
            for l in &layers {
                let a = per_layer.get(l).ok_or(Error::MissingLayer(*l))?;
                let n = a.rows();
                if let Some(last) = boundaries.ranges().last() {
                    if last.end > n {
                        return Err(Error::Invalid(format!(
                            "step boundary {} exceeds attention size {n}",
                            last.end
                        )));
                    }
                }
                let mut layer_sums = vec![0.0f64; s * s];
                for (k, rk) in boundaries.iter().enumerate() {
                    for t in rk.tokens() {
                        let row = a.row(t);
                        for (j, rj) in boundaries.iter().enumerate().take(k) {
                            layer_sums[k * s + j] += row[rj.tokens()].iter().map(|&x| x as f64).sum::<f64>();
                        }
                    }
                }
                for (acc, v) in sums.iter_mut().zip(layer_sums) {
                    *acc += v;
                }
            }
            let mut m = StepAttentionMatrix::zeros(s);
            let nl = layers.len() as f64;
            for (k, rk) in boundaries.iter().enumerate() {
                for (j, rj) in boundaries.iter().enumerate().take(k) {
                    let pairs = (rk.len() * rj.len()) as f64;
                    m.values[k * s + j] = sums[k * s + j] / nl / pairs;
                }
            }
            Ok(m)
        }
    }
}

/// Indices of the `k` predecessors of step `k_step` with the largest attention.
///
/// Ties are broken toward the earlier step.
pub fn top_attended(matrix: &StepAttentionMatrix, k_step: usize, k: usize) -> Vec<usize> {
    let mut preds: Vec<usize> = (0..k_step).collect();
    preds.sort_by(|&a, &b| matrix.get(k_step, b).total_cmp(&matrix.get(k_step, a)).then(a.cmp(&b)));
    preds.truncate(k);
    preds
}

/// Trace-level attention score.
///
/// For each later step, counts how many of its top-`k_att` attended
/// predecessors have a scaled score at or below the first quartile of all
/// step scores, or at or above `tau`; the count is divided by `k_att` and
/// averaged over later steps. Returns 0 for fewer than two steps.
pub fn attention_score(matrix: &StepAttentionMatrix, scaled_scores: &[f64], cfg: &PatternConfig) -> Result<f64> {
    let s = scaled_scores.len();
    if matrix.size() != s {
        return Err(Error::LengthMismatch {
            left: matrix.size(),
            right: s,
        });
    }
    if s < 2 {
        return Ok(0.0);
    }
    let q1 = stats::quantile_linear(scaled_scores, 0.25);
    let flagged = |j: usize| scaled_scores[j] <= q1 || scaled_scores[j] >= cfg.tau;
    let start = cfg.later_start(s);
    let mut total = 0.0;
    for k in start..s {
        let top = top_attended(matrix, k, cfg.k_att);
        let hits = top.iter().filter(|&&j| flagged(j)).count() as f64;
        let denom = if cfg.normalize_by_attended {
            top.len().max(1) as f64
        } else {
            cfg.k_att as f64
        };
        total += hits / denom;
    }
    Ok(total / (s - start) as f64)
}

/// Per-step perplexity `exp(-mean logprob)` over each step's tokens.
pub fn step_ppl(logprobs: &[f64], boundaries: &StepBoundaries) -> Result<Vec<f64>> {
    boundaries.validate(logprobs.len())?;
    boundaries
        .iter()
        .enumerate()
        .map(|(k, r)| {
            if r.is_empty() {
                return Err(Error::EmptyStep(k));
            }
            let lp = &logprobs[r.tokens()];
            Ok((-lp.iter().sum::<f64>() / lp.len() as f64).exp())
        })
        .collect()
}

/// Pearson correlation; 0 if either sequence has zero variance.
pub fn pcc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::Invalid("pcc needs at least two points".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pcc input".into()));
    }
    Ok(stats::pearson(xs, ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TripleKind {
    Stable,
    Rising1,
    Rising2,
    None,
}

/// Classification of the consecutive steps `(index, index + 1, index + 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleClass {
    pub index: usize,
    pub class: TripleKind,
}

/// Labels every consecutive triple of scaled scores.
///
/// With a trace label present, Stable triples only come from truthful traces
/// and Rising triples only from hallucinated ones.
pub fn classify_triples(scaled_scores: &[f64], label: Option<TraceLabel>, cfg: &PatternConfig) -> Vec<TripleClass> {
    let allow_stable = !matches!(label, Some(TraceLabel::Hallucinated));
    let allow_rising = !matches!(label, Some(TraceLabel::Truthful));
    scaled_scores
        .windows(3)
        .enumerate()
        .map(|(index, w)| {
            let (a, b, c) = (w[0], w[1], w[2]);
            let class = if allow_rising && c - b > cfg.rising_gap && c < cfg.rising_split {
                TripleKind::Rising1
            } else if allow_rising && c - b > cfg.rising_gap && c > cfg.rising_split {
                TripleKind::Rising2
            } else if allow_stable && (b - a).abs() < cfg.stable_diff && (c - b).abs() < cfg.stable_diff {
                TripleKind::Stable
            } else {
                TripleKind::None
            };
            TripleClass { index, class }
        })
        .collect()
}

/// Counts of each triple kind, keyed by name.
pub fn triple_counts(triples: &[TripleClass]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for t in triples {
        *out.entry(format!("{:?}", t.class)).or_insert(0) += 1;
    }
    out
}
