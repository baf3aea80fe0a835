//! Logit-lens projections, Jensen–Shannon divergence and step-level reasoning scores.
//!
//! A step's score is the mean, over its tokens, of the mean over the selected
//! reasoning layers of `JSD(q_final, q_layer)`, where each `q` is the softmax
//! of the logit-lens projection of the hidden state at the position *before*
//! the token. The trace-initial token has no predecessor and is skipped.
//!
//! Divergences use natural logs, so every score lies in `[0, ln 2]`. Scores are
//! tiny in raw units; [`StepScores::scaled`] multiplies by the display scale
//! (1e5 by default), the unit all thresholds downstream are expressed in.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::StepBoundaries;
use crate::trace_store::{Mode, Tensor, TraceBundle};

pub const DEFAULT_SCALE: f64 = 1e5;

/// Reasoning layers for a 28-block model.
pub const DEFAULT_REASONING_LAYERS: [usize; 7] = [14, 16, 18, 20, 22, 24, 26];

/// Final-norm parameters and unembedding matrix used by the logit lens.
#[derive(Debug, Clone, Copy)]
pub struct LensParams<'a> {
    pub gamma: &'a [f32],
    pub beta: &'a [f32],
    pub epsilon: f32,
    /// `[hidden_dim, vocab_size]`, row-major.
    pub unembed: &'a Tensor,
}

impl<'a> LensParams<'a> {
    pub fn from_bundle(bundle: &'a TraceBundle) -> Result<Self> {
        let acts = bundle
            .activations
            .as_ref()
            .ok_or_else(|| Error::Missing(format!("bundle {} has no activations", bundle.meta.trace_id)))?;
        Ok(Self {
            gamma: acts.ln_gamma.data(),
            beta: acts.ln_beta.data(),
            epsilon: bundle.meta.ln_epsilon,
            unembed: &acts.unembed,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.unembed.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.unembed.cols()
    }
}

/// LayerNorm over the hidden dimension with population variance.
pub fn layer_norm(hidden: &[f32], gamma: &[f32], beta: &[f32], epsilon: f32) -> Vec<f32> {
    let n = hidden.len() as f32;
    let mean = hidden.iter().sum::<f32>() / n;
    let var = hidden.iter().map(|h| (h - mean) * (h - mean)).sum::<f32>() / n;
    let denom = (var + epsilon).sqrt();
    let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    hidden
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(h, (g, b))| (h - mean) * inv * g + b)
        .collect()
}

/// Projects one hidden state into vocabulary logits: `LayerNorm(h) · W_U`.
pub fn logit_lens(hidden: &[f32], lens: &LensParams<'_>) -> Result<Vec<f32>> {
    let d = lens.hidden_dim();
    if hidden.len() != d || lens.gamma.len() != d || lens.beta.len() != d {
        return Err(Error::Dimension(format!(
            "hidden {} / gamma {} / beta {} vs unembedding rows {d}",
            hidden.len(),
            lens.gamma.len(),
            lens.beta.len()
        )));
    }
    let normed = layer_norm(hidden, lens.gamma, lens.beta, lens.epsilon);
    let v = lens.vocab_size();
    let mut logits = vec![0.0f32; v];
    for (i, &x) in normed.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (acc, w) in logits.iter_mut().zip(lens.unembed.row(i)) {
            *acc += x * w;
        }
    }
    Ok(logits)
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabDistribution(Vec<f64>);

impl VocabDistribution {
    /// Wraps `probs` after checking non-negativity and unit mass (1e-6).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Invalid("distribution entries must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("distribution sums to {total}")));
        }
        Ok(Self(probs))
    }

    /// Numerically stable softmax (max subtraction, f64 accumulation).
    pub fn from_logits(logits: &[f32]) -> Self {
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut probs: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Jensen–Shannon divergence in nats, `½KL(p‖m) + ½KL(q‖m)` with `m = (p+q)/2`.
///
/// Symmetric bit-for-bit; `0·ln 0` is taken as 0 and the result is clamped
/// to `[0, ln 2]`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    if p.iter().chain(q).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("distribution".into()));
    }
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if m <= 0.0 {
            continue;
        }
        let ta = if a > 0.0 { a * (a / m).ln() } else { 0.0 };
        let tb = if b > 0.0 { b * (b / m).ln() } else { 0.0 };
        total += 0.5 * (ta + tb);
    }
    Ok(total.clamp(0.0, std::f64::consts::LN_2))
}

/// Sorted, deduplicated copy of a layer set.
pub(crate) fn normalize_layers(layers: &[usize]) -> Vec<usize> {
    let mut v = layers.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

fn check_layers(bundle: &TraceBundle, layers: &[usize]) -> Result<Vec<usize>> {
    let layers = normalize_layers(layers);
    if layers.is_empty() {
        return Err(Error::Invalid("reasoning layer set is empty".into()));
    }
    for l in &layers {
        if !bundle.meta.reasoning_layers.contains(l) {
            return Err(Error::MissingLayer(*l));
        }
    }
    Ok(layers)
}

/// Per-layer JSDs at one hidden position, in the order of `layers`.
fn position_jsds(bundle: &TraceBundle, lens: &LensParams<'_>, layers: &[usize], pos: usize) -> Result<Vec<f64>> {
    let acts = bundle.activations.as_ref().expect("full-mode bundle");
    let final_h = acts
        .hidden
        .get(&bundle.meta.final_layer)
        .ok_or(Error::MissingLayer(bundle.meta.final_layer))?;
    let anchor = VocabDistribution::from_logits(&logit_lens(final_h.row(pos), lens)?);
    layers
        .iter()
        .map(|l| {
            let h = acts.hidden.get(l).ok_or(Error::MissingLayer(*l))?;
            let q = VocabDistribution::from_logits(&logit_lens(h.row(pos), lens)?);
            jsd(anchor.probs(), q.probs())
        })
        .collect()
}

/// Per-token JSDs for every layer in `layers`.
///
/// Entry `t` of each vector is the divergence of the distributions predicting
/// token `t`; entry 0 is 0. Works in both modes.
pub fn token_jsds(bundle: &TraceBundle, layers: &[usize]) -> Result<BTreeMap<usize, Vec<f64>>> {
    let layers = check_layers(bundle, layers)?;
    let n = bundle.meta.num_tokens;
    match bundle.meta.mode {
        Mode::Compact => {
            let cs = bundle.compact.as_ref().ok_or_else(|| Error::Missing("compact scores".into()))?;
            layers
                .iter()
                .map(|l| {
                    let v = cs.jsd.get(l).ok_or(Error::MissingLayer(*l))?;
                    Ok((*l, v.data().iter().map(|&x| x as f64).collect()))
                })
                .collect()
        }
        Mode::Full => {
            let lens = LensParams::from_bundle(bundle)?;
            let rows: Vec<Vec<f64>> = (1..n)
                .into_par_iter()
                .map(|t| position_jsds(bundle, &lens, &layers, t - 1))
                .collect::<Result<_>>()?;
            let mut out = BTreeMap::new();
            for (i, l) in layers.iter().enumerate() {
                let mut v = Vec::with_capacity(n);
                if n > 0 {
                    v.push(0.0);
                }
                v.extend(rows.iter().map(|r| r[i]));
                out.insert(*l, v);
            }
            Ok(out)
        }
    }
}

/// Step-level reasoning scores for one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScores {
    pub trace_id: String,
    pub boundaries: StepBoundaries,
    /// Raw per-step scores in nats.
    pub scores: Vec<f64>,
    pub scale: f64,
}

impl StepScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Scores multiplied by the display scale.
    pub fn scaled(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s * self.scale).collect()
    }
}

/// Computes per-step reasoning scores over the layer set `layers`.
///
/// The layer set is sorted before averaging, so its order does not matter.
/// A step made of the trace-initial token alone has nothing to score and gets 0.
pub fn step_scores(bundle: &TraceBundle, boundaries: &StepBoundaries, layers: &[usize]) -> Result<StepScores> {
    boundaries.validate(bundle.meta.num_tokens)?;
    let layers = check_layers(bundle, layers)?;
    let token_means: Vec<f64> = match bundle.meta.mode {
        Mode::Compact => {
            let per_layer = token_jsds(bundle, &layers)?;
            (0..bundle.meta.num_tokens)
                .map(|t| per_layer.values().map(|v| v[t]).sum::<f64>() / layers.len() as f64)
                .collect()
        }
        Mode::Full => {
            let lens = LensParams::from_bundle(bundle)?;
            let wanted: Vec<usize> = boundaries.iter().flat_map(|r| r.tokens()).filter(|&t| t > 0).collect();
            let values: Vec<f64> = wanted
                .par_iter()
                .map(|&t| {
                    let v = position_jsds(bundle, &lens, &layers, t - 1)?;
                    Ok(v.iter().sum::<f64>() / layers.len() as f64)
                })
                .collect::<Result<_>>()?;
            let mut means = vec![0.0; bundle.meta.num_tokens];
            for (t, v) in wanted.into_iter().zip(values) {
                means[t] = v;
            }
            means
        }
    };
    let mut scores = Vec::with_capacity(boundaries.len());
    for (k, r) in boundaries.iter().enumerate() {
        let toks: Vec<usize> = r.tokens().filter(|&t| t > 0).collect();
        if toks.is_empty() {
            log::warn!("step {k} holds only the trace-initial token; scoring it 0");
            scores.push(0.0);
            continue;
        }
        let sum: f64 = toks.iter().map(|&t| token_means[t]).sum();
        scores.push(sum / toks.len() as f64);
    }
    Ok(StepScores {
        trace_id: bundle.meta.trace_id.clone(),
        boundaries: boundaries.clone(),
        scores,
        scale: DEFAULT_SCALE,
    })
}
