//! Detection metrics and the hallucination-step locator.
//!
//! Hallucinated traces are the positive class throughout. Ranking metrics
//! (MC1/MC2/MC3) are computed per question group and macro-averaged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("both classes must be present".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via the Mann–Whitney statistic; ties count ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let mid_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += mid_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Pearson correlation between scores and 0/1 labels.
pub fn pcc_metric(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.len() < 2 {
        return Err(Error::Invalid("pcc needs at least two traces".into()));
    }
    let ys: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    crate::pattern_metrics::pcc(scores, &ys)
}

/// Candidate traces for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionGroup {
    pub question_id: String,
    /// `(hallucination score, is_hallucinated)` per trace.
    pub traces: Vec<(f64, bool)>,
}

impl QuestionGroup {
    pub fn has_both_labels(&self) -> bool {
        self.traces.iter().any(|t| t.1) && self.traces.iter().any(|t| !t.1)
    }
}

/// Groups `(question_id, score, label)` triples by question, ordered by id.
pub fn group_by_question<'a>(rows: impl IntoIterator<Item = (&'a str, f64, bool)>) -> Vec<QuestionGroup> {
    let mut map: BTreeMap<&str, Vec<(f64, bool)>> = BTreeMap::new();
    for (q, s, l) in rows {
        map.entry(q).or_default().push((s, l));
    }
    map.into_iter()
        .map(|(q, traces)| QuestionGroup {
            question_id: q.to_string(),
            traces,
        })
        .collect()
}

/// Normalization used for MC2.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mc2Normalization {
    /// Softmax over the group's scores.
    #[default]
    Softmax,
    /// Scores shifted to a zero minimum, then divided by their sum.
    MinShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McMetrics {
    pub mc1: f64,
    pub mc2: f64,
    pub mc3: f64,
}

fn mc2_share(group: &QuestionGroup, norm: Mc2Normalization) -> f64 {
    let scores: Vec<f64> = group.traces.iter().map(|t| t.0).collect();
    let weights: Vec<f64> = match norm {
        Mc2Normalization::Softmax => {
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            scores.iter().map(|s| (s - max).exp()).collect()
        }
        Mc2Normalization::MinShift => {
            let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let shifted: Vec<f64> = scores.iter().map(|s| s - min).collect();
            if shifted.iter().all(|&s| s == 0.0) {
                vec![1.0; scores.len()]
            } else {
                shifted
            }
        }
    };
    let total: f64 = weights.iter().sum();
    let halluc: f64 = weights.iter().zip(&group.traces).filter(|(_, t)| t.1).map(|(w, _)| w).sum();
    halluc / total
}

/// MC1, MC2 and MC3 macro-averaged over question groups.
///
/// MC1: best hallucinated score strictly above best truthful score.
/// MC2: normalized score mass on hallucinated traces.
/// MC3: fraction of hallucinated traces strictly above every truthful trace.
pub fn mc_metrics(groups: &[QuestionGroup], norm: Mc2Normalization) -> Result<McMetrics> {
    if groups.is_empty() {
        return Err(Error::Undefined("no question groups".into()));
    }
    let (mut mc1, mut mc2, mut mc3) = (0.0, 0.0, 0.0);
    for g in groups {
        if !g.has_both_labels() {
            return Err(Error::Undefined(format!(
                "question {} lacks a hallucinated or truthful trace",
                g.question_id
            )));
        }
        if g.traces.iter().any(|t| !t.0.is_finite()) {
            return Err(Error::NonFinite(format!("scores of question {}", g.question_id)));
        }
        let best_truthful = g.traces.iter().filter(|t| !t.1).map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let halluc: Vec<f64> = g.traces.iter().filter(|t| t.1).map(|t| t.0).collect();
        let best_halluc = halluc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if best_halluc > best_truthful {
            mc1 += 1.0;
        }
        mc3 += halluc.iter().filter(|&&s| s > best_truthful).count() as f64 / halluc.len() as f64;
        mc2 += mc2_share(g, norm);
    }
    let n = groups.len() as f64;
    Ok(McMetrics {
        mc1: mc1 / n,
        mc2: mc2 / n,
        mc3: mc3 / n,
    })
}

/// Full evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_traces: usize,
    pub auc: f64,
    pub pcc: f64,
    pub num_groups: Option<usize>,
    pub mc1: Option<f64>,
    pub mc2: Option<f64>,
    pub mc3: Option<f64>,
}

/// Computes AUC and PCC over all traces, and MC metrics over question groups
/// that contain both labels when `grouped` is set.
pub fn evaluate(rows: &[(String, f64, bool)], grouped: bool, norm: Mc2Normalization) -> Result<EvalReport> {
    let scores: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.2).collect();
    let mut report = EvalReport {
        num_traces: rows.len(),
        auc: auc(&scores, &labels)?,
        pcc: pcc_metric(&scores, &labels)?,
        num_groups: None,
        mc1: None,
        mc2: None,
        mc3: None,
    };
    if grouped {
        let groups: Vec<QuestionGroup> = group_by_question(rows.iter().map(|r| (r.0.as_str(), r.1, r.2)))
            .into_iter()
            .filter(QuestionGroup::has_both_labels)
            .collect();
        let mc = mc_metrics(&groups, norm)?;
        report.num_groups = Some(groups.len());
        report.mc1 = Some(mc.mc1);
        report.mc2 = Some(mc.mc2);
        report.mc3 = Some(mc.mc3);
    }
    Ok(report)
}

/// Failure-rate oracle over trace prefixes.
pub trait RolloutOracle {
    /// Fraction of `rollouts` continuations from the first `prefix_steps`
    /// steps that end in a wrong answer.
    fn failure_rate(&mut self, prefix_steps: usize, rollouts: usize) -> Result<f64>;
}

impl<F> RolloutOracle for F
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    fn failure_rate(&mut self, prefix_steps: usize, rollouts: usize) -> Result<f64> {
        self(prefix_steps, rollouts)
    }
}

/// Oracle that shells out to `sh -c "<command> <k> <rollouts>"` and parses
/// the failure fraction from stdout.
#[derive(Debug, Clone)]
pub struct CommandOracle {
    pub command: String,
}

impl RolloutOracle for CommandOracle {
    fn failure_rate(&mut self, prefix_steps: usize, rollouts: usize) -> Result<f64> {
        let out = std::process::Command::new("sh")
            .arg("-c")
            .arg(format!("{} {prefix_steps} {rollouts}", self.command))
            .output()
            .map_err(|e| Error::Oracle(format!("failed to run `{}`: {e}", self.command)))?;
        if !out.status.success() {
            return Err(Error::Oracle(format!(
                "`{}` exited with {} for k = {prefix_steps}",
                self.command, out.status
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim()
            .parse::<f64>()
            .map_err(|e| Error::Oracle(format!("could not parse `{}` as a failure fraction: {e}", text.trim())))
    }
}

/// Outcome of [`locate_hallucination_step`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocateResult {
    /// Smallest 1-based prefix length whose failure rate reaches the threshold.
    pub step: Option<usize>,
    pub oracle_calls: usize,
    /// Every `(k, failure rate)` the search observed, ordered by `k`.
    pub observations: Vec<(usize, f64)>,
}

/// Binary search for the first prefix length whose failure rate is at least
/// `threshold`.
///
/// Uses at most `ceil(log2 S) + 1` oracle calls and fails with
/// [`Error::Monotonicity`] if the observed rates decrease with `k`.
pub fn locate_hallucination_step(
    num_steps: usize,
    oracle: &mut dyn RolloutOracle,
    threshold: f64,
    rollouts: usize,
) -> Result<LocateResult> {
    let mut seen: BTreeMap<usize, f64> = BTreeMap::new();
    let mut query = |k: usize, seen: &mut BTreeMap<usize, f64>| -> Result<f64> {
        if let Some(v) = seen.get(&k) {
            return Ok(*v);
        }
        let v = oracle.failure_rate(k, rollouts)?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Oracle(format!("failure rate {v} for k = {k} outside [0, 1]")));
        }
        seen.insert(k, v);
        let mut prev: Option<(usize, f64)> = None;
        for (&kk, &vv) in seen.iter() {
            if let Some((pk, pv)) = prev {
                if pv > vv {
                    return Err(Error::Monotonicity {
                        lo_k: pk,
                        lo_value: pv,
                        hi_k: kk,
                        hi_value: vv,
                    });
                }
            }
            prev = Some((kk, vv));
        }
        Ok(v)
    };

    let mut step = None;
    if num_steps > 0 && query(num_steps, &mut seen)? >= threshold {
        let (mut lo, mut hi) = (1, num_steps);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if query(mid, &mut seen)? >= threshold {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        step = Some(lo);
    }
    Ok(LocateResult {
        step,
        oracle_calls: seen.len(),
        observations: seen.into_iter().collect(),
    })
}

/// Mean and population standard deviation of a metric across repeated runs.
pub fn summarize(values: &[f64]) -> (f64, f64) {
    (stats::mean(values), stats::std_pop(values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.5, 0.4], &[true, true]), Err(Error::Undefined(_))));
        // Brute-force pair count with ties at 1/2.
        let s = [0.3, 0.7, 0.7, 0.1, 0.5, 0.7];
        let l = [true, false, true, false, true, false];
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if l[i] && !l[j] {
                    pairs += 1.0;
                    wins += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert!((auc(&s, &l).unwrap() - wins / pairs).abs() < 1e-15);
    }

    #[test]
    fn pcc_metric_examples() {
        assert!((pcc_metric(&[1.0, 1.0, 0.0, 0.0], &[true, true, false, false]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(pcc_metric(&[0.4; 4], &[true, true, false, false]).unwrap(), 0.0);
    }

    fn one_group() -> QuestionGroup {
        QuestionGroup {
            question_id: "q".into(),
            traces: vec![(0.9, true), (0.2, false), (0.4, false)],
        }
    }

    #[test]
    fn mc_examples() {
        let m = mc_metrics(&[one_group()], Mc2Normalization::Softmax).unwrap();
        assert_eq!(m.mc1, 1.0);
        assert_eq!(m.mc3, 1.0);
        let e = |x: f64| x.exp();
        let expected = e(0.9) / (e(0.9) + e(0.4) + e(0.2));
        assert!((m.mc2 - expected).abs() < 1e-12);
        assert!((m.mc2 - 0.47548).abs() < 1e-5);

        let tie = QuestionGroup {
            question_id: "t".into(),
            traces: vec![(0.4, true), (0.1, true), (0.4, false)],
        };
        let m = mc_metrics(&[tie], Mc2Normalization::Softmax).unwrap();
        assert_eq!(m.mc1, 0.0);
        assert_eq!(m.mc3, 0.0);

        let bad = QuestionGroup {
            question_id: "b".into(),
            traces: vec![(0.4, true)],
        };
        assert!(mc_metrics(&[bad], Mc2Normalization::Softmax).is_err());
    }

    #[test]
    fn mc2_min_shift() {
        // Shifted scores (0.7, 0, 0.2): hallucinated share 0.7 / 0.9.
        let m = mc_metrics(&[one_group()], Mc2Normalization::MinShift).unwrap();
        assert!((m.mc2 - 0.7 / 0.9).abs() < 1e-12);
    }

    #[test]
    fn locate_step_function() {
        for s in 1..=40usize {
            for target in 1..=s {
                let mut calls = 0;
                let mut oracle = |k: usize, _r: usize| -> Result<f64> {
                    calls += 1;
                    Ok(if k >= target { 1.0 } else { 0.0 })
                };
                let res = locate_hallucination_step(s, &mut oracle, 0.9, 16).unwrap();
                assert_eq!(res.step, Some(target));
                let bound = (s as f64).log2().ceil() as usize + 1;
                assert!(calls <= bound, "S={s} target={target} calls={calls}");
            }
        }
        let mut zero = |_: usize, _: usize| -> Result<f64> { Ok(0.0) };
        assert_eq!(locate_hallucination_step(10, &mut zero, 0.9, 16).unwrap().step, None);
    }

    #[test]
    fn locate_detects_non_monotone_oracle() {
        // The midpoint reports a higher failure rate than the full trace.
        let mut oracle = |k: usize, _: usize| -> Result<f64> { Ok(if k == 8 { 0.95 } else if k >= 4 { 0.99 } else { 0.0 }) };
        let err = locate_hallucination_step(8, &mut oracle, 0.9, 16).unwrap_err();
        assert!(matches!(err, Error::Monotonicity { .. }), "{err}");
    }
}
