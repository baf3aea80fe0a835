//! The `rhd` command-line front end.
//!
//! Every subcommand prints a JSON report to stdout and, with `--json <file>`,
//! writes the same bytes to a file. Exit status is 0 on success, 1 on
//! validation or I/O errors and 2 on usage errors.
//!
//! `--config <file>` reads a flat JSON object whose keys mirror the
//! subcommand's long flags (`k_att` or `k-att`); flags given on the command
//! line take precedence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval_harness::{self, CommandOracle, Mc2Normalization};
use crate::grpo_shaping::{self, ClipVariant, ShapingConfig, Trajectory};
use crate::pattern_metrics::{self, PatternConfig};
use crate::reasoning_score::{self, DEFAULT_SCALE};
use crate::rhd_detector::{self, FeatureConfig, FeatureVector, FitConfig, Metric, RhdWeights};
use crate::segmentation::{self, SegmentConfig, DEFAULT_DELIMITER, DEFAULT_MARKERS};
use crate::synthgen::{self, DatasetParams, FullDims, PatternSpec};
use crate::trace_store::{self, TraceBundle, TraceLabel};

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "RHD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "rhd", version, about = "Reasoning-trace hallucination analytics", args_override_self = true)]
struct Cli {
    /// Worker threads (default: $RHD_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write the JSON report to this file.
    #[arg(long, global = true, value_name = "FILE")]
    json: Option<PathBuf>,
    /// Flat JSON file of flag values; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a bundle and summarize its manifest.
    Inspect {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Split tokens into reasoning steps.
    Segment(SegmentArgs),
    /// Per-step reasoning scores and perplexities of one bundle.
    Score(ScoreArgs),
    /// Feature vectors for one bundle or every bundle in a directory.
    Features(FeaturesArgs),
    /// Fit detector weights by grid search with two-fold validation.
    Fit(FitArgs),
    /// Apply detector weights to feature vectors.
    Detect(DetectArgs),
    /// AUC, PCC and (grouped) MC1/MC2/MC3 of hallucination scores.
    Eval(EvalArgs),
    /// Shaped rewards and token advantages for a group of trajectories.
    Shape(ShapeArgs),
    /// Check policy invariance of the shaping on random tabular MDPs.
    VerifyShaping(VerifyArgs),
    /// Generate synthetic bundles.
    Synth(SynthArgs),
    /// Binary-search the first hallucinated step with an external oracle.
    Locate(LocateArgs),
    /// Convert a full-mode bundle to compact mode.
    Compact(CompactArgs),
}

#[derive(Debug, Clone, Args)]
struct SegmentOpts {
    /// Comma-separated step markers.
    #[arg(long, value_delimiter = ',')]
    markers: Option<Vec<String>>,
    /// Step delimiter (escape sequences \n and \t are expanded).
    #[arg(long)]
    delimiter: Option<String>,
}

impl SegmentOpts {
    fn config(&self) -> SegmentConfig {
        SegmentConfig {
            markers: self
                .markers
                .clone()
                .unwrap_or_else(|| DEFAULT_MARKERS.iter().map(|s| s.to_string()).collect()),
            delimiter: self
                .delimiter
                .as_deref()
                .map(|d| d.replace("\\n", "\n").replace("\\t", "\t"))
                .unwrap_or_else(|| DEFAULT_DELIMITER.to_string()),
        }
    }
}

#[derive(Debug, Args)]
struct SegmentArgs {
    /// Bundle whose tokens are segmented.
    #[arg(long, conflicts_with = "tokens", required_unless_present = "tokens")]
    bundle: Option<PathBuf>,
    /// JSON array of token surface strings.
    #[arg(long)]
    tokens: Option<PathBuf>,
    #[command(flatten)]
    seg: SegmentOpts,
}

#[derive(Debug, Clone, Args)]
struct LayerOpts {
    /// Reasoning layers (default: the bundle's own).
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Attention layers (default: the bundle's own).
    #[arg(long, value_delimiter = ',')]
    attn_layers: Option<Vec<usize>>,
    /// Multiplier applied to raw step scores.
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    scale: f64,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    layers: LayerOpts,
    #[command(flatten)]
    seg: SegmentOpts,
    /// Write a `step,start,end,score,scaled_score,ppl` CSV series.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct PatternOpts {
    #[arg(long, default_value_t = 2.0)]
    r: f64,
    #[arg(long, default_value_t = 0.75)]
    eta: f64,
    #[arg(long, default_value_t = 5)]
    k_att: usize,
    #[arg(long, default_value_t = 4.0)]
    tau: f64,
    /// Divide attention hits by the number of attended steps instead of k_att.
    #[arg(long)]
    normalize_by_attended: bool,
}

impl PatternOpts {
    fn config(&self) -> PatternConfig {
        PatternConfig {
            r: self.r,
            eta: self.eta,
            k_att: self.k_att,
            tau: self.tau,
            normalize_by_attended: self.normalize_by_attended,
            ..PatternConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    bundle: Option<PathBuf>,
    /// Directory of bundles.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    pattern: PatternOpts,
    #[command(flatten)]
    layers: LayerOpts,
    #[command(flatten)]
    seg: SegmentOpts,
    /// Write the features as CSV.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Feature vectors (JSON or .csv).
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::Auc)]
    metric: Metric,
    #[arg(long, default_value_t = 0.1)]
    grid_step: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Mc2Normalization::Softmax)]
    mc2_norm: Mc2Normalization,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    features: PathBuf,
    /// Weights JSON, or a fit report containing them.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// JSON array of objects with `trace_id` and `score`.
    #[arg(long)]
    scores: PathBuf,
    /// JSON array of objects with `trace_id` and `label`, a map from trace id to label, or a features CSV.
    #[arg(long)]
    labels: PathBuf,
    /// Also report MC1/MC2/MC3 over question groups.
    #[arg(long)]
    grouped: bool,
    #[arg(long, value_enum, default_value_t = Mc2Normalization::Softmax)]
    mc2_norm: Mc2Normalization,
}

#[derive(Debug, Clone, Args)]
struct ShapingOpts {
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 4.0)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, value_enum, default_value_t = ClipVariant::ClipToZero)]
    variant: ClipVariant,
}

impl ShapingOpts {
    fn config(&self) -> ShapingConfig {
        ShapingConfig {
            alpha: self.alpha,
            tau: self.tau,
            gamma: self.gamma,
            variant: self.variant,
        }
    }
}

#[derive(Debug, Args)]
struct ShapeArgs {
    /// JSON array of trajectories forming one group.
    #[arg(long)]
    trajectories: PathBuf,
    #[command(flatten)]
    shaping: ShapingOpts,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    num_mdps: usize,
    /// Random fixed policies evaluated per MDP.
    #[arg(long, default_value_t = 10)]
    policies: usize,
    #[command(flatten)]
    shaping: ShapingOpts,
}

#[derive(Debug, Args)]
#[command(args_conflicts_with_subcommands = true)]
struct SynthArgs {
    /// Pattern spec JSON for a single compact trace.
    #[arg(long, requires = "out")]
    spec: Option<PathBuf>,
    /// Output bundle directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    kind: Option<SynthKind>,
}

#[derive(Debug, Subcommand)]
enum SynthKind {
    /// A labeled dataset of compact traces grouped by question.
    Dataset {
        /// Number of questions.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        per_q: usize,
        #[arg(long, default_value_t = 0.5)]
        rate: f64,
        #[arg(long, default_value_t = 0.2)]
        difficulty: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// A random full-mode bundle.
    Full {
        #[arg(long, default_value_t = 16)]
        tokens: usize,
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        #[arg(long, default_value_t = 13)]
        vocab: usize,
        /// Number of reasoning layers.
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Copy final-layer states into the reasoning layers.
        #[arg(long)]
        zero_jsd: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct LocateArgs {
    /// Number of steps in the trace.
    #[arg(long)]
    steps: usize,
    /// Shell command run as `<cmd> <k> <rollouts>`; prints a failure fraction.
    #[arg(long)]
    oracle_cmd: String,
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    #[arg(long, default_value_t = 16)]
    rollouts: usize,
}

#[derive(Debug, Args)]
struct CompactArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seg: SegmentOpts,
}

const SUBCOMMANDS: [&str; 12] = [
    "inspect",
    "segment",
    "score",
    "features",
    "fit",
    "detect",
    "eval",
    "shape",
    "verify-shaping",
    "synth",
    "locate",
    "compact",
];

/// Failure of [`run`] before or during dispatch.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

/// Removes `--config <file>` from `args` and returns the path.
fn take_config(args: &mut Vec<OsString>) -> std::result::Result<Option<PathBuf>, Failure> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy().into_owned();
        if a == "--" {
            break;
        }
        if a == "--config" {
            if i + 1 >= args.len() {
                return Err(Failure::Usage("--config requires a file".into()));
            }
            let p = PathBuf::from(args.remove(i + 1));
            args.remove(i);
            return Ok(Some(p));
        }
        if let Some(v) = a.strip_prefix("--config=") {
            args.remove(i);
            return Ok(Some(PathBuf::from(v)));
        }
        i += 1;
    }
    Ok(None)
}

/// Converts a flat JSON config into long flags.
fn config_flags(path: &Path) -> std::result::Result<Vec<OsString>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Run(Error::io(path, e)))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Failure::Run(Error::json(path, e)))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Failure::Usage(format!("{} must hold a JSON object", path.display())))?;
    let mut out = Vec::new();
    for (key, v) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        let scalar = |v: &Value| -> std::result::Result<String, Failure> {
            match v {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                Value::Bool(b) => Ok(b.to_string()),
                _ => Err(Failure::Usage(format!("config key `{key}` must be a scalar or a list of scalars"))),
            }
        };
        match v {
            Value::Bool(true) => out.push(flag.into()),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let parts = items.iter().map(scalar).collect::<std::result::Result<Vec<_>, _>>()?;
                out.push(flag.into());
                out.push(parts.join(",").into());
            }
            other => {
                out.push(flag.into());
                out.push(scalar(other)?.into());
            }
        }
    }
    Ok(out)
}

/// Index just past the (possibly nested) subcommand name.
fn subcommand_end(args: &[OsString]) -> Option<usize> {
    let pos = args.iter().position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))?;
    if args[pos] == "synth" {
        if let Some(next) = args.get(pos + 1) {
            if next == "dataset" || next == "full" {
                return Some(pos + 2);
            }
        }
    }
    Some(pos + 1)
}

fn thread_count(cli: &Cli) -> std::result::Result<Option<usize>, Failure> {
    if let Some(n) = cli.threads {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{THREADS_ENV} must be a thread count, got `{v}`"))),
        _ => Ok(None),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match try_run(argv.into_iter().map(Into::into).collect()) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("{msg}");
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn try_run(mut args: Vec<OsString>) -> std::result::Result<(), Failure> {
    if let Some(cfg) = take_config(&mut args)? {
        let flags = config_flags(&cfg)?;
        let at = subcommand_end(&args).ok_or_else(|| Failure::Usage("--config needs a subcommand".into()))?;
        args.splice(at..at, flags);
    }
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(Failure::Usage(e.render().to_string()));
        }
    };
    let report = match thread_count(&cli)? {
        Some(0) => return Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::Run(Error::Invalid(format!("thread pool: {e}"))))?;
            pool.install(|| dispatch(&cli.command))?
        }
        None => dispatch(&cli.command)?,
    };
    emit(&report.value, cli.json.as_deref())?;
    if report.failed {
        return Err(Failure::Run(Error::Invalid(report.failure.unwrap_or_default())));
    }
    Ok(())
}

struct Report {
    value: Value,
    /// Set when the command completed but its check failed.
    failed: bool,
    failure: Option<String>,
}

impl Report {
    fn ok<T: Serialize>(v: &T) -> Result<Self> {
        Ok(Self {
            value: to_value(v)?,
            failed: false,
            failure: None,
        })
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Invalid(format!("cannot serialize report: {e}")))
}

fn emit(value: &Value, json_path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))? + "\n";
    print!("{text}");
    if let Some(p) = json_path {
        std::fs::write(p, &text).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.into(),
        source: e,
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Csv {
            path: path.into(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads feature vectors from JSON or CSV, sorted by trace id.
pub fn read_features(path: &Path) -> Result<Vec<FeatureVector>> {
    let mut out: Vec<FeatureVector> = if is_csv(path) {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv {
            path: path.into(),
            source: e,
        })?;
        r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| Error::Csv {
            path: path.into(),
            source: e,
        })?
    } else {
        read_json(path)?
    };
    out.sort_by(|a, b| a.trace_id.cmp(&b.trace_id));
    Ok(out)
}

fn open(path: &Path) -> Result<TraceBundle> {
    trace_store::open_bundle(path).map_err(Error::from)
}

fn feature_config(pattern: &PatternOpts, layers: &LayerOpts, seg: &SegmentOpts) -> FeatureConfig {
    FeatureConfig {
        pattern: pattern.config(),
        reasoning_layers: layers.layers.clone(),
        attention_layers: layers.attn_layers.clone(),
        scale: layers.scale,
        segment: seg.config(),
    }
}

#[derive(Serialize)]
struct InspectReport<'a> {
    trace_id: &'a str,
    question_id: Option<&'a str>,
    model_id: &'a str,
    mode: trace_store::Mode,
    num_tokens: usize,
    hidden_dim: usize,
    vocab_size: usize,
    num_layers_total: usize,
    reasoning_layers: &'a [usize],
    final_layer: usize,
    attention_layers: &'a [usize],
    attention: &'static str,
    label: Option<TraceLabel>,
    num_steps: Option<usize>,
    valid: bool,
}

#[derive(Serialize)]
struct ScoreRow {
    step: usize,
    start: usize,
    end: usize,
    score: f64,
    scaled_score: f64,
    ppl: f64,
}

#[derive(Serialize)]
struct ScoreReport {
    trace_id: String,
    layers: Vec<usize>,
    scale: f64,
    boundaries: segmentation::StepBoundaries,
    scores: Vec<f64>,
    scaled_scores: Vec<f64>,
    step_ppl: Vec<f64>,
    triples: Vec<pattern_metrics::TripleClass>,
}

#[derive(Deserialize)]
struct ScoreEntry {
    trace_id: String,
    #[serde(default)]
    question_id: Option<String>,
    score: f64,
}

#[derive(Deserialize)]
struct LabelEntry {
    trace_id: String,
    #[serde(default)]
    question_id: Option<String>,
    label: Option<TraceLabel>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LabelFile {
    List(Vec<LabelEntry>),
    Map(BTreeMap<String, TraceLabel>),
}

fn dispatch(cmd: &Command) -> Result<Report> {
    match cmd {
        Command::Inspect { bundle } => {
            let b = open(bundle)?;
            let m = &b.meta;
            Report::ok(&InspectReport {
                trace_id: &m.trace_id,
                question_id: m.question_id.as_deref(),
                model_id: &m.model_id,
                mode: m.mode,
                num_tokens: m.num_tokens,
                hidden_dim: m.hidden_dim,
                vocab_size: m.vocab_size,
                num_layers_total: m.num_layers_total,
                reasoning_layers: &m.reasoning_layers,
                final_layer: m.final_layer,
                attention_layers: &m.attention_layers,
                attention: match &b.attention {
                    None => "none",
                    Some(trace_store::AttentionData::TokenLevel(_)) => "token_level",
                    Some(trace_store::AttentionData::StepLevel(_)) => "step_level",
                },
                label: m.label,
                num_steps: m.step_boundaries.as_ref().map(|s| s.len()),
                valid: true,
            })
        }
        Command::Segment(a) => {
            let cfg = a.seg.config();
            let boundaries = match (&a.bundle, &a.tokens) {
                (Some(p), _) => segmentation::segment(&open(p)?.tokens, &cfg),
                (None, Some(p)) => segmentation::segment(&read_json::<Vec<String>>(p)?, &cfg),
                (None, None) => unreachable!("clap requires one input"),
            };
            Report::ok(&boundaries)
        }
        Command::Score(a) => {
            let b = open(&a.bundle)?;
            let boundaries = rhd_detector::boundaries_for(&b, &a.seg.config());
            let layers = a.layers.layers.clone().unwrap_or_else(|| b.meta.reasoning_layers.clone());
            let mut scores = reasoning_score::step_scores(&b, &boundaries, &layers)?;
            scores.scale = a.layers.scale;
            let ppl = pattern_metrics::step_ppl(&b.logprobs(), &boundaries)?;
            let scaled = scores.scaled();
            if let Some(csv_path) = &a.csv {
                let rows: Vec<ScoreRow> = boundaries
                    .iter()
                    .enumerate()
                    .map(|(k, r)| ScoreRow {
                        step: k,
                        start: r.start,
                        end: r.end,
                        score: scores.scores[k],
                        scaled_score: scaled[k],
                        ppl: ppl[k],
                    })
                    .collect();
                write_csv(csv_path, &rows)?;
            }
            let triples = pattern_metrics::classify_triples(&scaled, b.meta.label, &PatternConfig::default());
            let mut layers = layers;
            layers.sort_unstable();
            layers.dedup();
            Report::ok(&ScoreReport {
                trace_id: b.meta.trace_id.clone(),
                layers,
                scale: scores.scale,
                boundaries,
                scores: scores.scores,
                scaled_scores: scaled,
                step_ppl: ppl,
                triples,
            })
        }
        Command::Features(a) => {
            let cfg = feature_config(&a.pattern, &a.layers, &a.seg);
            cfg.validate()?;
            let bundles = match (&a.bundle, &a.dataset) {
                (Some(p), _) => vec![open(p)?],
                (None, Some(d)) => synthgen::read_bundle_dir(d)?,
                (None, None) => unreachable!("clap requires one input"),
            };
            use rayon::prelude::*;
            let mut feats: Vec<FeatureVector> = bundles
                .par_iter()
                .map(|b| rhd_detector::extract_features(b, &rhd_detector::boundaries_for(b, &cfg.segment), &cfg))
                .collect::<Result<_>>()?;
            feats.sort_by(|x, y| x.trace_id.cmp(&y.trace_id));
            if let Some(p) = &a.csv {
                write_csv(p, &feats)?;
            }
            Report::ok(&feats)
        }
        Command::Fit(a) => {
            let feats = read_features(&a.features)?;
            let cfg = FitConfig {
                grid_step: a.grid_step,
                metric: a.metric,
                seed: a.seed,
                mc2_normalization: a.mc2_norm,
            };
            Report::ok(&rhd_detector::fit_weights(&feats, &cfg)?)
        }
        Command::Detect(a) => {
            let feats = read_features(&a.features)?;
            let raw: Value = read_json(&a.weights)?;
            let w = raw.get("weights").cloned().unwrap_or(raw);
            let w: RhdWeights = serde_json::from_value(w).map_err(|e| Error::json(&a.weights, e))?;
            let w = RhdWeights::new(w.as_array())?;
            Report::ok(&rhd_detector::detect(&feats, &w, a.threshold))
        }
        Command::Eval(a) => {
            let scores: Vec<ScoreEntry> = read_json(&a.scores)?;
            let labels: BTreeMap<String, (Option<String>, Option<TraceLabel>)> = if is_csv(&a.labels) {
                read_features(&a.labels)?.into_iter().map(|f| (f.trace_id, (f.question_id, f.label))).collect()
            } else {
                match read_json::<LabelFile>(&a.labels)? {
                    LabelFile::List(v) => v.into_iter().map(|e| (e.trace_id, (e.question_id, e.label))).collect(),
                    LabelFile::Map(m) => m.into_iter().map(|(k, l)| (k, (None, Some(l)))).collect(),
                }
            };
            let mut rows = Vec::with_capacity(scores.len());
            for s in scores {
                let (q, l) = labels
                    .get(&s.trace_id)
                    .ok_or_else(|| Error::Missing(format!("label for trace {}", s.trace_id)))?;
                let positive = l
                    .and_then(TraceLabel::as_positive)
                    .ok_or_else(|| Error::Invalid(format!("trace {} is unlabeled", s.trace_id)))?;
                let question = s.question_id.or_else(|| q.clone()).unwrap_or_else(|| s.trace_id.clone());
                rows.push((s.trace_id, question, s.score, positive));
            }
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            let rows: Vec<(String, f64, bool)> = rows.into_iter().map(|r| (r.1, r.2, r.3)).collect();
            Report::ok(&eval_harness::evaluate(&rows, a.grouped, a.mc2_norm)?)
        }
        Command::Shape(a) => {
            let trajs: Vec<Trajectory> = read_json(&a.trajectories)?;
            Report::ok(&grpo_shaping::shape_group(&trajs, &a.shaping.config())?)
        }
        Command::VerifyShaping(a) => {
            let rep = grpo_shaping::verify_random(a.seed, a.num_mdps, a.policies, &a.shaping.config())?;
            let mut out = Report::ok(&rep)?;
            if !rep.all_actions_match || rep.max_policy_value_gap > 1e-9 || rep.max_optimal_value_gap > 1e-9 {
                out.failed = true;
                out.failure = Some("shaping changed optimal actions or broke the value identity".into());
            }
            Ok(out)
        }
        Command::Synth(a) => match (&a.kind, &a.spec, &a.out) {
            (Some(SynthKind::Dataset { n, per_q, rate, difficulty, seed, out }), _, _) => {
                let params = DatasetParams {
                    n_questions: *n,
                    traces_per_question: *per_q,
                    hallucination_rate: *rate,
                    difficulty: *difficulty,
                    seed: *seed,
                };
                let ds = synthgen::gen_dataset(&params)?;
                synthgen::write_dataset(&ds, out)?;
                let halluc = ds.truth.iter().filter(|t| t.label == TraceLabel::Hallucinated).count();
                Report::ok(&serde_json::json!({
                    "params": params,
                    "num_traces": ds.bundles.len(),
                    "num_hallucinated": halluc,
                    "out": out,
                }))
            }
            (Some(SynthKind::Full { tokens, hidden, vocab, layers, seed, zero_jsd, out }), _, _) => {
                let b = synthgen::gen_full_bundle(&FullDims::new(*tokens, *hidden, *vocab, *layers), *seed, *zero_jsd)?;
                trace_store::write_bundle(&b, out)?;
                Report::ok(&serde_json::json!({ "trace_id": b.meta.trace_id, "out": out }))
            }
            (None, Some(spec), Some(out)) => {
                let spec: PatternSpec = read_json(spec)?;
                let (b, truth) = synthgen::gen_compact_trace(&spec)?;
                trace_store::write_bundle(&b, out)?;
                Report::ok(&truth)
            }
            _ => Err(Error::Invalid("synth needs --spec and --out, or a `dataset`/`full` subcommand".into())),
        },
        Command::Locate(a) => {
            let mut oracle = CommandOracle {
                command: a.oracle_cmd.clone(),
            };
            Report::ok(&eval_harness::locate_hallucination_step(a.steps, &mut oracle, a.threshold, a.rollouts)?)
        }
        Command::Compact(a) => {
            let b = open(&a.bundle)?;
            let boundaries = rhd_detector::boundaries_for(&b, &a.seg.config());
            let c = trace_store::compact(&b, &boundaries)?;
            trace_store::write_bundle(&c, &a.out)?;
            Report::ok(&serde_json::json!({
                "trace_id": c.meta.trace_id,
                "num_steps": boundaries.len(),
                "out": a.out,
            }))
        }
    }
}
