//! Seeded synthetic bundles.
//!
//! Compact traces carry planted step scores, step attention and perplexities
//! so detector features have a known ground truth. Full-mode bundles are
//! small random tensors for format and pipeline tests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern_metrics::PatternConfig;
use crate::reasoning_score::{logit_lens, LensParams, VocabDistribution, DEFAULT_REASONING_LAYERS, DEFAULT_SCALE};
use crate::segmentation::StepBoundaries;
use crate::trace_store::{
    self, ActivationSet, AttentionData, BundleMeta, CompactScores, DType, Mode, Tensor, TokenRecord, TraceBundle,
    TraceLabel,
};

pub const SYNTH_MODEL_ID: &str = "synthetic";
const COMPACT_LAYERS_TOTAL: usize = 28;
const COMPACT_FINAL_LAYER: usize = 27;
const DEFAULT_ATTENTION_LAYERS: [usize; 7] = [1, 3, 5, 7, 9, 11, 13];
/// Predecessor attention mass of every step-attention row.
const ROW_MASS: f64 = 0.5;
/// Recency decay of the baseline step attention.
const RECENCY: f64 = 2.0;

const FILLER_WORDS: [&str; 12] = [
    " we", " check", " the", " sum", " of", " terms", " and", " get", " x", " value", " from", " here",
];

fn default_tau() -> f64 {
    4.0
}

fn default_scale() -> f64 {
    DEFAULT_SCALE
}

fn default_reasoning_layers() -> Vec<usize> {
    DEFAULT_REASONING_LAYERS.to_vec()
}

fn default_attention_layers() -> Vec<usize> {
    DEFAULT_ATTENTION_LAYERS.to_vec()
}

/// A step with an explicit scaled score target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedStep {
    pub index: usize,
    pub score: f64,
    /// Perplexity target; derived from the score when absent.
    #[serde(default)]
    pub ppl: Option<f64>,
}

/// Recipe for one compact trace. Scores are in scaled units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub trace_id: String,
    #[serde(default)]
    pub question_id: Option<String>,
    pub label: TraceLabel,
    pub num_steps: usize,
    pub tokens_per_step: usize,
    pub base_score: f64,
    /// Relative drift of normal step scores from the first to the last step.
    #[serde(default)]
    pub drift: f64,
    /// Relative amplitude of score fluctuation inside the early window.
    #[serde(default)]
    pub fluctuation: f64,
    /// Steps excluded from fluctuation and drift.
    #[serde(default)]
    pub protected_steps: Vec<usize>,
    #[serde(default)]
    pub shallow_steps: Vec<PlantedStep>,
    #[serde(default)]
    pub overthink_steps: Vec<PlantedStep>,
    /// Fraction of each later step's predecessor attention that goes to
    /// shallow and overthinking steps.
    #[serde(default)]
    pub backtrack_mass: f64,
    pub base_ppl: f64,
    /// Step perplexity is `base_ppl * exp(slope * (score / base_score - 1))`.
    #[serde(default)]
    pub ppl_slope: f64,
    /// Standard deviation of the multiplicative log-normal noise applied to
    /// planted scores, perplexities and attention weights.
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_reasoning_layers")]
    pub reasoning_layers: Vec<usize>,
    #[serde(default = "default_attention_layers")]
    pub attention_layers: Vec<usize>,
    pub seed: u64,
}

impl PatternSpec {
    fn pattern_config(&self) -> PatternConfig {
        PatternConfig {
            tau: self.tau,
            ..PatternConfig::default()
        }
    }

    fn bad_steps(&self) -> BTreeSet<usize> {
        self.shallow_steps.iter().chain(&self.overthink_steps).map(|p| p.index).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.num_steps;
        if s == 0 {
            return Err(Error::Invalid("spec needs at least one step".into()));
        }
        if self.tokens_per_step < 2 {
            return Err(Error::Invalid("tokens_per_step must be at least 2".into()));
        }
        if !(self.base_score > 0.0) || !(self.scale > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Invalid("base_score, scale and tau must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.backtrack_mass) {
            return Err(Error::Invalid(format!("backtrack mass {} outside [0, 1]", self.backtrack_mass)));
        }
        if !(self.base_ppl >= 1.0) || !(self.noise >= 0.0) || !(self.fluctuation >= 0.0) {
            return Err(Error::Invalid("base_ppl must be >= 1 and noise, fluctuation >= 0".into()));
        }
        let mut seen = BTreeSet::new();
        for p in self.shallow_steps.iter().chain(&self.overthink_steps) {
            if p.index >= s || !seen.insert(p.index) {
                return Err(Error::Invalid(format!("planted step {} out of range or repeated", p.index)));
            }
            if !(p.score > 0.0) || p.score / self.scale > std::f64::consts::LN_2 {
                return Err(Error::Invalid(format!("planted score {} not representable as a JSD", p.score)));
            }
            if p.ppl.is_some_and(|v| !(v >= 1.0)) {
                return Err(Error::Invalid("planted perplexity must be >= 1".into()));
            }
        }
        if let Some(p) = self.overthink_steps.iter().find(|p| p.score <= self.tau) {
            return Err(Error::Invalid(format!("overthink step {} score {} is not above tau", p.index, p.score)));
        }
        if self.label == TraceLabel::Truthful && (!seen.is_empty() || self.backtrack_mass > 0.0) {
            return Err(Error::Invalid("a truthful spec plants no bad steps".into()));
        }
        if self.reasoning_layers.is_empty() || self.attention_layers.is_empty() {
            return Err(Error::Invalid("layer sets must be non-empty".into()));
        }
        if self.reasoning_layers.iter().chain(&self.attention_layers).any(|&l| l >= COMPACT_LAYERS_TOTAL) {
            return Err(Error::Invalid(format!("layers must lie below {COMPACT_LAYERS_TOTAL}")));
        }
        Ok(())
    }
}

/// What the generator planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub trace_id: String,
    pub question_id: Option<String>,
    pub label: TraceLabel,
    /// Planted scaled step scores.
    pub step_scores: Vec<f64>,
    pub step_ppl: Vec<f64>,
    pub shallow_steps: Vec<usize>,
    pub overthink_steps: Vec<usize>,
    pub early_window: usize,
    pub later_start: usize,
    /// `(row, fraction of predecessor attention on bad steps)` for later rows.
    pub backtrack_rows: Vec<(usize, f64)>,
    /// Start of a triple guaranteed to classify as Rising-2.
    pub rising2_at: Option<usize>,
}

fn lognormal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 1.0;
    }
    let z: f64 = rng.sample(StandardNormal);
    (sd * z).exp()
}

/// Values `1 + amp * u` with `u ~ U(-1, 1)`, rescaled to mean exactly 1.
fn unit_mean_jitter(rng: &mut ChaCha8Rng, n: usize, amp: f64, shape: impl Fn(usize) -> f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|i| shape(i) * (1.0 + amp * rng.random_range(-1.0..1.0))).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    raw.into_iter().map(|x| x / mean).collect()
}

fn step_texts(spec: &PatternSpec, rng: &mut ChaCha8Rng) -> Vec<String> {
    let shallow: BTreeSet<usize> = spec.shallow_steps.iter().map(|p| p.index).collect();
    let overthink: BTreeSet<usize> = spec.overthink_steps.iter().map(|p| p.index).collect();
    let openers = ["So", "Then", "Next", "Now"];
    let mut out = Vec::with_capacity(spec.num_steps * spec.tokens_per_step);
    for k in 0..spec.num_steps {
        let first = if overthink.contains(&k) {
            "Wait,"
        } else if shallow.contains(&k) {
            "Hmm,"
        } else if k == 0 {
            "Okay,"
        } else {
            openers[rng.random_range(0..openers.len())]
        };
        out.push(first.to_string());
        for _ in 1..spec.tokens_per_step - 1 {
            out.push(FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())].to_string());
        }
        out.push(" ok.\n\n".to_string());
    }
    out
}

/// Generates one compact trace realizing `spec`.
pub fn gen_compact_trace(spec: &PatternSpec) -> Result<(TraceBundle, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.num_steps;
    let m = spec.tokens_per_step;
    let n_tok = s * m;
    let pcfg = spec.pattern_config();
    let early = pcfg.early_window(s);
    let later = pcfg.later_start(s);
    let bad = spec.bad_steps();
    let protected: BTreeSet<usize> = spec.protected_steps.iter().copied().collect();
    let planted: BTreeMap<usize, &PlantedStep> =
        spec.shallow_steps.iter().chain(&spec.overthink_steps).map(|p| (p.index, p)).collect();
    let overthink: BTreeSet<usize> = spec.overthink_steps.iter().map(|p| p.index).collect();
    let max_scaled = std::f64::consts::LN_2 * spec.scale * 0.99;

    let texts = step_texts(spec, &mut rng);

    // Step score targets in scaled units.
    let mut scores = Vec::with_capacity(s);
    for k in 0..s {
        let sc = match planted.get(&k) {
            Some(p) => {
                let v = p.score * lognormal(&mut rng, spec.noise);
                if overthink.contains(&k) {
                    v.max(spec.tau + 0.25)
                } else {
                    v
                }
            }
            None => {
                let mut v = spec.base_score;
                if !protected.contains(&k) {
                    let pos = if s > 1 { k as f64 / (s - 1) as f64 - 0.5 } else { 0.0 };
                    v *= 1.0 + spec.drift * pos;
                    if k < early {
                        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                        v *= 1.0 + spec.fluctuation * sign * rng.random_range(0.5..1.0);
                    }
                }
                let v = v * lognormal(&mut rng, spec.noise);
                if spec.label == TraceLabel::Truthful {
                    v.min(0.9 * spec.tau)
                } else {
                    v
                }
            }
        };
        scores.push(sc.clamp(1e-3, max_scaled));
    }

    // Per-token per-layer divergences hitting each step's target mean.
    let n_layers = spec.reasoning_layers.len();
    let mut jsd: Vec<Vec<f32>> = vec![vec![0.0; n_tok]; n_layers];
    for k in 0..s {
        let tokens: Vec<usize> = (k * m..(k + 1) * m).filter(|&t| t > 0).collect();
        let cells = tokens.len() * n_layers;
        let layer_shape = |i: usize| {
            let li = i % n_layers;
            let frac = if n_layers > 1 { li as f64 / (n_layers - 1) as f64 } else { 0.5 };
            1.0 + 0.4 * (0.5 - frac)
        };
        let w = unit_mean_jitter(&mut rng, cells, 0.2, layer_shape);
        let target = scores[k] / spec.scale;
        for (ti, &t) in tokens.iter().enumerate() {
            for (l, row) in jsd.iter_mut().enumerate() {
                row[t] = (target * w[ti * n_layers + l]).min(std::f64::consts::LN_2) as f32;
            }
        }
    }

    // Step perplexities and token log-probabilities.
    let mut ppl = Vec::with_capacity(s);
    for (k, sc) in scores.iter().enumerate() {
        let derived = spec.base_ppl * (spec.ppl_slope * (sc / spec.base_score - 1.0)).exp();
        let v = planted.get(&k).and_then(|p| p.ppl).unwrap_or(derived) * lognormal(&mut rng, spec.noise);
        ppl.push(v.max(1.01));
    }
    let mut logprobs = vec![0.0f32; n_tok];
    for k in 0..s {
        let w = unit_mean_jitter(&mut rng, m, 0.3, |_| 1.0);
        let mean_lp = -ppl[k].ln();
        for i in 0..m {
            logprobs[k * m + i] = (mean_lp * w[i]) as f32;
        }
    }

    // Lower-triangular step attention with planted backtracking.
    let mut attn = vec![0.0f32; s * s];
    let mut backtrack_rows = Vec::new();
    for k in 1..s {
        let weights: Vec<f64> = (0..k)
            .map(|j| (-((k - 1 - j) as f64) / RECENCY).exp() * lognormal(&mut rng, spec.noise))
            .collect();
        let bad_preds: Vec<usize> = (0..k).filter(|j| bad.contains(j)).collect();
        let backtrack = k >= later && !bad_preds.is_empty() && spec.backtrack_mass > 0.0;
        let mut row = vec![0.0; k];
        if backtrack {
            let good_total: f64 = (0..k).filter(|j| !bad.contains(j)).map(|j| weights[j]).sum();
            let bad_total: f64 = bad_preds.iter().map(|&j| weights[j]).sum();
            let bad_mass = if good_total > 0.0 { spec.backtrack_mass } else { 1.0 };
            for j in 0..k {
                row[j] = if bad.contains(&j) {
                    ROW_MASS * bad_mass * weights[j] / bad_total
                } else {
                    ROW_MASS * (1.0 - bad_mass) * weights[j] / good_total
                };
            }
        } else {
            let total: f64 = weights.iter().sum();
            for j in 0..k {
                row[j] = ROW_MASS * weights[j] / total;
            }
        }
        for j in 0..k {
            attn[k * s + j] = row[j] as f32;
        }
        if k >= later {
            let stored: Vec<f64> = (0..k).map(|j| attn[k * s + j] as f64).collect();
            let bad_sum: f64 = bad_preds.iter().map(|&j| stored[j]).sum();
            backtrack_rows.push((k, bad_sum / stored.iter().sum::<f64>()));
        }
    }

    let boundaries = StepBoundaries::from_lengths(&vec![m; s])?;
    let tokens: Vec<TokenRecord> = texts
        .into_iter()
        .zip(&logprobs)
        .enumerate()
        .map(|(index, (surface_text, &logprob))| TokenRecord {
            index,
            surface_text,
            logprob,
        })
        .collect();
    let mut jsd_map = BTreeMap::new();
    let layers = crate::reasoning_score::normalize_layers(&spec.reasoning_layers);
    if layers.len() != spec.reasoning_layers.len() {
        return Err(Error::Invalid("repeated reasoning layer".into()));
    }
    for (i, l) in spec.reasoning_layers.iter().enumerate() {
        jsd_map.insert(*l, Tensor::vector(DType::Fp32, jsd[i].clone())?);
    }
    let meta = BundleMeta {
        trace_id: spec.trace_id.clone(),
        question_id: spec.question_id.clone(),
        model_id: SYNTH_MODEL_ID.into(),
        num_tokens: n_tok,
        hidden_dim: 0,
        vocab_size: 0,
        num_layers_total: COMPACT_LAYERS_TOTAL,
        reasoning_layers: spec.reasoning_layers.clone(),
        final_layer: COMPACT_FINAL_LAYER,
        attention_layers: spec.attention_layers.clone(),
        num_heads: 0,
        mode: Mode::Compact,
        ln_epsilon: 0.0,
        question_text: format!("Synthetic question for {}", spec.trace_id),
        label: Some(spec.label),
        step_boundaries: Some(boundaries),
    };
    let bundle = TraceBundle {
        meta,
        tokens,
        activations: None,
        attention: Some(AttentionData::StepLevel(Tensor::matrix(s, s, DType::Fp32, attn)?)),
        compact: Some(CompactScores { jsd: jsd_map }),
    };
    bundle.validate()?;

    let rising2_at = spec
        .overthink_steps
        .iter()
        .map(|p| p.index)
        .find(|&o| o >= 2 && protected.contains(&(o - 1)) && !bad.contains(&(o - 1)))
        .map(|o| o - 2);
    let truth = GroundTruth {
        trace_id: spec.trace_id.clone(),
        question_id: spec.question_id.clone(),
        label: spec.label,
        step_scores: scores,
        step_ppl: ppl,
        shallow_steps: spec.shallow_steps.iter().map(|p| p.index).collect(),
        overthink_steps: spec.overthink_steps.iter().map(|p| p.index).collect(),
        early_window: early,
        later_start: later,
        backtrack_rows,
        rising2_at,
    };
    Ok((bundle, truth))
}

/// Parameters of [`gen_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub n_questions: usize,
    pub traces_per_question: usize,
    pub hallucination_rate: f64,
    /// 0 plants full-strength patterns; 1 makes hallucinated traces look truthful.
    pub difficulty: f64,
    pub seed: u64,
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hallucination_rate) || !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::Invalid("hallucination rate and difficulty must lie in [0, 1]".into()));
        }
        if self.n_questions == 0 || self.traces_per_question == 0 {
            return Err(Error::Invalid("dataset needs questions and traces".into()));
        }
        Ok(())
    }
}

/// Draws the spec for trace `index` of a dataset.
pub fn dataset_spec(params: &DatasetParams, index: usize) -> PatternSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64);
    let q = index / params.traces_per_question;
    let t = index % params.traces_per_question;
    let halluc = rng.random_bool(params.hallucination_rate);
    let strength = 1.0 - params.difficulty;
    let num_steps = rng.random_range(10..=14);
    let tokens_per_step = rng.random_range(3..=6);
    let base_score = rng.random_range(1.5..3.0);
    let base_ppl = rng.random_range(1.5..3.0);
    let noise = 0.02 + 0.25 * params.difficulty;
    let truthful_fluct = rng.random_range(0.02..0.06);
    let mut spec = PatternSpec {
        trace_id: format!("q{q:04}-t{t:02}"),
        question_id: Some(format!("q{q:04}")),
        label: TraceLabel::Truthful,
        num_steps,
        tokens_per_step,
        base_score,
        drift: 0.15,
        fluctuation: truthful_fluct,
        protected_steps: Vec::new(),
        shallow_steps: Vec::new(),
        overthink_steps: Vec::new(),
        backtrack_mass: 0.0,
        base_ppl,
        ppl_slope: -0.5,
        noise,
        tau: default_tau(),
        scale: DEFAULT_SCALE,
        reasoning_layers: default_reasoning_layers(),
        attention_layers: default_attention_layers(),
        seed: rng.random(),
    };
    if halluc {
        let pcfg = spec.pattern_config();
        let early = pcfg.early_window(num_steps);
        let later = pcfg.later_start(num_steps);
        let o = rng.random_range(early..later.max(early + 1)).min(num_steps - 1);
        let mut candidates: Vec<usize> = (0..early).filter(|&k| k + 1 != o).collect();
        let n_shallow = rng.random_range(1..=2).min(candidates.len());
        let mut shallow = Vec::new();
        for _ in 0..n_shallow {
            let idx = candidates.remove(rng.random_range(0..candidates.len()));
            let ratio = rng.random_range(0.2..0.35);
            shallow.push(PlantedStep {
                index: idx,
                score: base_score * (1.0 - strength * (1.0 - ratio)),
                ppl: None,
            });
        }
        shallow.sort_by_key(|p| p.index);
        let full_fluct = rng.random_range(0.35..0.5);
        spec.label = TraceLabel::Hallucinated;
        spec.fluctuation = strength * full_fluct + (1.0 - strength) * truthful_fluct;
        spec.protected_steps = vec![o - 1];
        spec.shallow_steps = shallow;
        spec.overthink_steps = vec![PlantedStep {
            index: o,
            score: spec.tau + rng.random_range(1.0..2.0),
            ppl: None,
        }];
        spec.backtrack_mass = strength * rng.random_range(0.5..0.8);
        spec.ppl_slope = strength * 0.5 + (1.0 - strength) * -0.5;
    }
    spec
}

/// A generated dataset, ordered by trace id.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub params: DatasetParams,
    pub bundles: Vec<TraceBundle>,
    pub truth: Vec<GroundTruth>,
}

pub fn gen_dataset(params: &DatasetParams) -> Result<SyntheticDataset> {
    params.validate()?;
    let n = params.n_questions * params.traces_per_question;
    let generated: Vec<(TraceBundle, GroundTruth)> =
        (0..n).into_par_iter().map(|i| gen_compact_trace(&dataset_spec(params, i))).collect::<Result<_>>()?;
    let (bundles, truth) = generated.into_iter().unzip();
    Ok(SyntheticDataset {
        params: params.clone(),
        bundles,
        truth,
    })
}

pub const DATASET_FILE: &str = "dataset.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetIndex {
    params: DatasetParams,
    traces: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes each bundle to `dir/<trace_id>` plus an index and the ground truth.
pub fn write_dataset(ds: &SyntheticDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ds.bundles
        .par_iter()
        .map(|b| trace_store::write_bundle(b, dir.join(&b.meta.trace_id)).map_err(Error::from))
        .collect::<Result<Vec<()>>>()?;
    let index = DatasetIndex {
        params: ds.params.clone(),
        traces: ds.bundles.iter().map(|b| b.meta.trace_id.clone()).collect(),
    };
    write_json(&dir.join(DATASET_FILE), &index)?;
    write_json(&dir.join(GROUND_TRUTH_FILE), &ds.truth)
}

/// Opens every bundle directly below `dir`, sorted by directory name.
pub fn read_bundle_dir(dir: impl AsRef<Path>) -> Result<Vec<TraceBundle>> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if p.is_dir() && !hidden && p.join(trace_store::MANIFEST_FILE).is_file() {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Missing(format!("no bundles under {}", dir.display())));
    }
    paths.par_iter().map(|p| trace_store::open_bundle(p).map_err(Error::from)).collect()
}

pub fn read_ground_truth(dir: impl AsRef<Path>) -> Result<Vec<GroundTruth>> {
    let path = dir.as_ref().join(GROUND_TRUTH_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Shape of a random full-mode bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullDims {
    pub num_tokens: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub num_reasoning_layers: usize,
    pub num_heads: usize,
}

impl FullDims {
    pub fn new(num_tokens: usize, hidden_dim: usize, vocab_size: usize, num_reasoning_layers: usize) -> Self {
        Self {
            num_tokens,
            hidden_dim,
            vocab_size,
            num_reasoning_layers,
            num_heads: 4,
        }
    }

    /// Total depth: reasoning layers sit on every other block below the final one.
    pub fn num_layers_total(&self) -> usize {
        2 * self.num_reasoning_layers + 4
    }

    pub fn final_layer(&self) -> usize {
        self.num_layers_total() - 1
    }

    pub fn reasoning_layers(&self) -> Vec<usize> {
        let n = self.num_reasoning_layers;
        (0..n).map(|i| self.final_layer() - 2 * (n - i)).collect()
    }

    pub fn attention_layers(&self) -> Vec<usize> {
        vec![1, 3]
    }
}

const PLACEHOLDER_VOCAB: [&str; 16] = [
    "Okay", " the", " x", " =", " 2", ".\n\n", " Wait", ",", " so", " But", " value", " Hmm", " is", " 3", " check",
    " done",
];

/// Surface text of placeholder token `id`.
pub fn placeholder_token(id: usize) -> String {
    match PLACEHOLDER_VOCAB.get(id) {
        Some(s) => s.to_string(),
        None => format!(" tok{id}"),
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (z * sd) as f32
        })
        .collect()
}

/// Random full-mode bundle.
///
/// Token `t >= 1` is the argmax of the final-layer logit lens at position
/// `t - 1` and carries that distribution's log-probability. With `zero_jsd`
/// every reasoning layer repeats the final layer's hidden states.
pub fn gen_full_bundle(dims: &FullDims, seed: u64, zero_jsd: bool) -> Result<TraceBundle> {
    let (t, d, v) = (dims.num_tokens, dims.hidden_dim, dims.vocab_size);
    if t == 0 || d == 0 || v == 0 || dims.num_reasoning_layers == 0 {
        return Err(Error::Invalid(format!("degenerate dimensions {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let final_layer = dims.final_layer();
    let reasoning = dims.reasoning_layers();

    let final_hidden = Tensor::matrix(t, d, DType::Fp16, normal_vec(&mut rng, t * d, 1.0))?;
    let mut hidden = BTreeMap::new();
    for &l in &reasoning {
        let h = if zero_jsd {
            final_hidden.clone()
        } else {
            Tensor::matrix(t, d, DType::Fp16, normal_vec(&mut rng, t * d, 1.0))?
        };
        hidden.insert(l, h);
    }
    hidden.insert(final_layer, final_hidden);
    let gamma: Vec<f32> = normal_vec(&mut rng, d, 0.1).into_iter().map(|g| 1.0 + g).collect();
    let acts = ActivationSet {
        ln_gamma: Tensor::vector(DType::Fp32, gamma)?,
        ln_beta: Tensor::vector(DType::Fp32, normal_vec(&mut rng, d, 0.1))?,
        unembed: Tensor::matrix(d, v, DType::Fp32, normal_vec(&mut rng, d * v, 1.0))?,
        hidden,
    };

    let mut attention = BTreeMap::new();
    for l in dims.attention_layers() {
        let mut a = vec![0.0f32; t * t];
        for row in 0..t {
            let w: Vec<f64> = (0..=row).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = w.iter().sum();
            for (s, x) in w.iter().enumerate() {
                a[row * t + s] = (x / total) as f32;
            }
        }
        attention.insert(l, Tensor::matrix(t, t, DType::Fp16, a)?);
    }

    let first = rng.random_range(0..v);
    let eps = 1e-5f32;
    let mut tokens = vec![TokenRecord {
        index: 0,
        surface_text: placeholder_token(first),
        logprob: -(v as f32).ln(),
    }];
    {
        let lens = LensParams {
            gamma: acts.ln_gamma.data(),
            beta: acts.ln_beta.data(),
            epsilon: eps,
            unembed: &acts.unembed,
        };
        let fh = &acts.hidden[&final_layer];
        for pos in 1..t {
            let q = VocabDistribution::from_logits(&logit_lens(fh.row(pos - 1), &lens)?);
            let (id, p) = q
                .probs()
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
            tokens.push(TokenRecord {
                index: pos,
                surface_text: placeholder_token(id),
                logprob: (p.ln() as f32).min(0.0),
            });
        }
    }

    let meta = BundleMeta {
        trace_id: format!("full-{seed}"),
        question_id: None,
        model_id: SYNTH_MODEL_ID.into(),
        num_tokens: t,
        hidden_dim: d,
        vocab_size: v,
        num_layers_total: dims.num_layers_total(),
        reasoning_layers: reasoning,
        final_layer,
        attention_layers: dims.attention_layers(),
        num_heads: dims.num_heads,
        mode: Mode::Full,
        ln_epsilon: eps,
        question_text: String::new(),
        label: None,
        step_boundaries: None,
    };
    let bundle = TraceBundle {
        meta,
        tokens,
        activations: Some(acts),
        attention: Some(AttentionData::TokenLevel(attention)),
        compact: None,
    };
    bundle.validate()?;
    Ok(bundle)
}
