//! Trace feature vectors, the composite hallucination score and grid-search
//! fitting of its weights.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval_harness::{self, Mc2Normalization, QuestionGroup};
use crate::pattern_metrics::{self, PatternConfig};
use crate::reasoning_score::{self, DEFAULT_SCALE};
use crate::segmentation::{self, SegmentConfig, StepBoundaries};
use crate::stats;
use crate::trace_store::{TraceBundle, TraceLabel};

/// The four covariates of one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub trace_id: String,
    #[serde(default)]
    pub question_id: Option<String>,
    #[serde(default)]
    pub label: Option<TraceLabel>,
    /// Mean scaled step score.
    pub avg_score: f64,
    pub cv: f64,
    pub attn_score: f64,
    /// Correlation between step scores and step perplexities.
    pub pcc: f64,
}

impl FeatureVector {
    pub fn as_array(&self) -> [f64; 4] {
        [self.avg_score, self.cv, self.attn_score, self.pcc]
    }

    /// Question id, falling back to the trace id.
    pub fn group_key(&self) -> &str {
        self.question_id.as_deref().unwrap_or(&self.trace_id)
    }
}

/// Settings for [`extract_features`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub pattern: PatternConfig,
    /// Reasoning layers; the bundle's own set when absent.
    pub reasoning_layers: Option<Vec<usize>>,
    /// Attention layers; the bundle's own set when absent.
    pub attention_layers: Option<Vec<usize>>,
    pub scale: f64,
    pub segment: SegmentConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            pattern: PatternConfig::default(),
            reasoning_layers: None,
            attention_layers: None,
            scale: DEFAULT_SCALE,
            segment: SegmentConfig::default(),
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        self.pattern.validate()?;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Invalid(format!("scale must be positive, got {}", self.scale)));
        }
        for (name, set) in [("reasoning", &self.reasoning_layers), ("attention", &self.attention_layers)] {
            if set.as_ref().is_some_and(|s| s.is_empty()) {
                return Err(Error::Invalid(format!("{name} layer set is empty")));
            }
        }
        Ok(())
    }

    pub fn reasoning_layers_for(&self, bundle: &TraceBundle) -> Vec<usize> {
        self.reasoning_layers.clone().unwrap_or_else(|| bundle.meta.reasoning_layers.clone())
    }

    pub fn attention_layers_for(&self, bundle: &TraceBundle) -> Vec<usize> {
        self.attention_layers.clone().unwrap_or_else(|| bundle.meta.attention_layers.clone())
    }
}

/// Step boundaries recorded in the bundle, or a fresh segmentation of its tokens.
pub fn boundaries_for(bundle: &TraceBundle, cfg: &SegmentConfig) -> StepBoundaries {
    match &bundle.meta.step_boundaries {
        Some(b) => b.clone(),
        None => segmentation::segment(&bundle.tokens, cfg),
    }
}

/// Everything computed for one trace on the way to its feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceAnalysis {
    pub features: FeatureVector,
    pub boundaries: StepBoundaries,
    pub scaled_scores: Vec<f64>,
    pub step_ppl: Vec<f64>,
    pub triples: Vec<pattern_metrics::TripleClass>,
}

/// Scores, perplexities, triples and features for one trace.
pub fn analyze_trace(bundle: &TraceBundle, boundaries: &StepBoundaries, cfg: &FeatureConfig) -> Result<TraceAnalysis> {
    cfg.validate()?;
    if boundaries.is_empty() {
        return Err(Error::Invalid(format!("trace {} has no steps", bundle.meta.trace_id)));
    }
    let mut scores = reasoning_score::step_scores(bundle, boundaries, &cfg.reasoning_layers_for(bundle))?;
    scores.scale = cfg.scale;
    let scaled = scores.scaled();
    let ppl = pattern_metrics::step_ppl(&bundle.logprobs(), boundaries)?;

    let attn_score = match &bundle.attention {
        Some(a) if scaled.len() >= 2 => {
            let m = pattern_metrics::step_attention(a, boundaries, &cfg.attention_layers_for(bundle))?;
            pattern_metrics::attention_score(&m, &scaled, &cfg.pattern)?
        }
        Some(_) => 0.0,
        None => return Err(Error::Missing(format!("attention for trace {}", bundle.meta.trace_id))),
    };
    let pcc = if scaled.len() >= 2 {
        pattern_metrics::pcc(&scaled, &ppl)?
    } else {
        0.0
    };
    let features = FeatureVector {
        trace_id: bundle.meta.trace_id.clone(),
        question_id: bundle.meta.question_id.clone(),
        label: bundle.meta.label,
        avg_score: stats::mean(&scaled),
        cv: pattern_metrics::cv_score(&scaled, cfg.pattern.r)?,
        attn_score,
        pcc,
    };
    if features.as_array().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("features of trace {}", features.trace_id)));
    }
    let triples = pattern_metrics::classify_triples(&scaled, bundle.meta.label, &cfg.pattern);
    Ok(TraceAnalysis {
        features,
        boundaries: boundaries.clone(),
        scaled_scores: scaled,
        step_ppl: ppl,
        triples,
    })
}

pub fn extract_features(bundle: &TraceBundle, boundaries: &StepBoundaries, cfg: &FeatureConfig) -> Result<FeatureVector> {
    analyze_trace(bundle, boundaries, cfg).map(|a| a.features)
}

/// Non-negative weights of the composite score, in feature order
/// `(avg_score, cv, attn_score, pcc)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhdWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
}

impl RhdWeights {
    pub const ZERO: RhdWeights = RhdWeights {
        alpha1: 0.0,
        alpha2: 0.0,
        alpha3: 0.0,
        alpha4: 0.0,
    };

    pub fn new(alpha: [f64; 4]) -> Result<Self> {
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Invalid(format!("weights must be finite and non-negative, got {alpha:?}")));
        }
        Ok(Self::from_array(alpha))
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self {
            alpha1: a[0],
            alpha2: a[1],
            alpha3: a[2],
            alpha4: a[3],
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha1, self.alpha2, self.alpha3, self.alpha4]
    }
}

/// Weighted sum of the four features.
pub fn hallucination_score(f: &FeatureVector, w: &RhdWeights) -> f64 {
    w.alpha1 * f.avg_score + w.alpha2 * f.cv + w.alpha3 * f.attn_score + w.alpha4 * f.pcc
}

/// Validation metric for weight selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auc,
    Pcc,
    Mc1,
    Mc2,
    Mc3,
}

impl Metric {
    fn is_grouped(self) -> bool {
        matches!(self, Metric::Mc1 | Metric::Mc2 | Metric::Mc3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub grid_step: f64,
    pub metric: Metric,
    pub seed: u64,
    pub mc2_normalization: Mc2Normalization,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            grid_step: 0.1,
            metric: Metric::Auc,
            seed: 7,
            mc2_normalization: Mc2Normalization::Softmax,
        }
    }
}

/// Outcome of [`fit_weights`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub weights: RhdWeights,
    pub metric: Metric,
    pub grid_step: f64,
    pub seed: u64,
    pub combinations_evaluated: usize,
    /// Question ids in each fold, in shuffled order.
    pub folds: [Vec<String>; 2],
    /// Metric of the selected weights on each fold.
    pub fold_metrics: [f64; 2],
    pub mean_metric: f64,
    pub zero_weight_metric: f64,
}

/// One fold prepared for repeated metric evaluation.
struct Fold {
    features: Vec<[f64; 4]>,
    labels: Vec<bool>,
    /// Trace indices (into `features`) per question with both labels.
    groups: Vec<Vec<usize>>,
}

impl Fold {
    fn metric(&self, w: &[f64; 4], metric: Metric, norm: Mc2Normalization) -> Result<f64> {
        let scores: Vec<f64> = self
            .features
            .iter()
            .map(|f| w[0] * f[0] + w[1] * f[1] + w[2] * f[2] + w[3] * f[3])
            .collect();
        match metric {
            Metric::Auc => eval_harness::auc(&scores, &self.labels),
            Metric::Pcc => eval_harness::pcc_metric(&scores, &self.labels),
            Metric::Mc1 | Metric::Mc2 | Metric::Mc3 => {
                let groups: Vec<QuestionGroup> = self
                    .groups
                    .iter()
                    .map(|idx| QuestionGroup {
                        question_id: String::new(),
                        traces: idx.iter().map(|&i| (scores[i], self.labels[i])).collect(),
                    })
                    .collect();
                let mc = eval_harness::mc_metrics(&groups, norm)?;
                Ok(match metric {
                    Metric::Mc1 => mc.mc1,
                    Metric::Mc2 => mc.mc2,
                    _ => mc.mc3,
                })
            }
        }
    }
}

/// Number of grid intervals for `step`, which must divide 1.
fn grid_intervals(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Invalid(format!("grid step must lie in (0, 1], got {step}")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("grid step {step} does not divide [0, 1]")));
    }
    Ok(n as usize)
}

/// Splits question ids into two folds with a seeded shuffle; fold 0 gets
/// `floor(n / 2)` questions.
pub fn split_folds(question_ids: &BTreeSet<String>, seed: u64) -> [Vec<String>; 2] {
    let mut ids: Vec<String> = question_ids.iter().cloned().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let second = ids.split_off(ids.len() / 2);
    [ids, second]
}

/// Exhaustive grid search over `[0, 1]^4` with two-fold validation.
///
/// Selects the weights with the highest mean fold metric; ties go to the
/// smallest L1 norm, then to the lexicographically smallest weights.
pub fn fit_weights(dataset: &[FeatureVector], cfg: &FitConfig) -> Result<FitReport> {
    let n = grid_intervals(cfg.grid_step)?;
    let mut labels = Vec::with_capacity(dataset.len());
    for f in dataset {
        match f.label.and_then(TraceLabel::as_positive) {
            Some(l) => labels.push(l),
            None => return Err(Error::Invalid(format!("trace {} has no label", f.trace_id))),
        }
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::Undefined("dataset has a single label class".into()));
    }
    let questions: BTreeSet<String> = dataset.iter().map(|f| f.group_key().to_string()).collect();
    let folds = split_folds(&questions, cfg.seed);
    if folds.iter().any(|f| f.len() < 2) {
        return Err(Error::Invalid(format!(
            "need at least two questions per fold, have {}",
            questions.len()
        )));
    }

    let prepared: Vec<Fold> = folds
        .iter()
        .map(|qs| {
            let members: BTreeSet<&str> = qs.iter().map(String::as_str).collect();
            let idx: Vec<usize> = (0..dataset.len()).filter(|&i| members.contains(dataset[i].group_key())).collect();
            let features: Vec<[f64; 4]> = idx.iter().map(|&i| dataset[i].as_array()).collect();
            let fold_labels: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            let mut groups = Vec::new();
            for q in qs {
                let g: Vec<usize> = (0..idx.len()).filter(|&j| dataset[idx[j]].group_key() == q).collect();
                let any_pos = g.iter().any(|&j| fold_labels[j]);
                let any_neg = g.iter().any(|&j| !fold_labels[j]);
                if any_pos && any_neg {
                    groups.push(g);
                }
            }
            Fold {
                features,
                labels: fold_labels,
                groups,
            }
        })
        .collect();
    for (i, f) in prepared.iter().enumerate() {
        if cfg.metric.is_grouped() && f.groups.is_empty() {
            return Err(Error::Undefined(format!("fold {i} has no question with both labels")));
        }
        if !cfg.metric.is_grouped() && (f.labels.iter().all(|&l| l) || !f.labels.iter().any(|&l| l)) {
            return Err(Error::Undefined(format!("fold {i} has a single label class")));
        }
    }

    let evaluate = |w: &[f64; 4]| -> Result<[f64; 2]> {
        Ok([
            prepared[0].metric(w, cfg.metric, cfg.mc2_normalization)?,
            prepared[1].metric(w, cfg.metric, cfg.mc2_normalization)?,
        ])
    };

    let side = n + 1;
    let total = side.pow(4);
    // Candidate: (mean metric, integer grid coordinates, fold metrics).
    type Candidate = (f64, [usize; 4], [f64; 2]);
    let better = |a: &Candidate, b: &Candidate| -> bool {
        match a.0.total_cmp(&b.0) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => {
                let la: usize = a.1.iter().sum();
                let lb: usize = b.1.iter().sum();
                (la, a.1) < (lb, b.1)
            }
        }
    };
    let best = (0..total)
        .into_par_iter()
        .map(|code| {
            let c = [code / side.pow(3), (code / side.pow(2)) % side, (code / side) % side, code % side];
            let w = c.map(|i| i as f64 / n as f64);
            let m = evaluate(&w)?;
            Ok::<Candidate, Error>(((m[0] + m[1]) / 2.0, c, m))
        })
        .try_reduce_with(|a, b| Ok(if better(&b, &a) { b } else { a }))
        .ok_or_else(|| Error::Invalid("empty grid".into()))??;

    let zero = evaluate(&[0.0; 4])?;
    Ok(FitReport {
        weights: RhdWeights::from_array(best.1.map(|i| i as f64 / n as f64)),
        metric: cfg.metric,
        grid_step: cfg.grid_step,
        seed: cfg.seed,
        combinations_evaluated: total,
        folds,
        fold_metrics: best.2,
        mean_metric: best.0,
        zero_weight_metric: (zero[0] + zero[1]) / 2.0,
    })
}

/// Per-trace output of [`detect`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub trace_id: String,
    pub question_id: Option<String>,
    pub score: f64,
    /// `score >= threshold` when a threshold is given.
    pub hallucinated: Option<bool>,
}

pub fn detect(features: &[FeatureVector], weights: &RhdWeights, threshold: Option<f64>) -> Vec<Detection> {
    features
        .iter()
        .map(|f| {
            let score = hallucination_score(f, weights);
            Detection {
                trace_id: f.trace_id.clone(),
                question_id: f.question_id.clone(),
                score,
                hallucinated: threshold.map(|t| score >= t),
            }
        })
        .collect()
}
