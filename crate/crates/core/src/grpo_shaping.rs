//! Reasoning-score reward shaping for group-relative policy optimization.
//!
//! Step scores (scaled units) are clipped into a potential
//! `Φ(s) = -clip(score(s))`, turned into potential-based shaped step rewards
//! `r̄_t = r_t + γΦ(s_{t+1}) - Φ(s_t)`, standardized across the group and
//! spread onto tokens as suffix sums. A tabular verifier checks that the
//! shaping leaves optimal actions unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ClipVariant {
    /// `α·s` if `s <= τ`, else 0.
    #[default]
    ClipToZero,
    /// `min(s, τ)`.
    MinClip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapingConfig {
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    pub variant: ClipVariant,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            tau: 4.0,
            gamma: 1.0,
            variant: ClipVariant::ClipToZero,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Invalid(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

pub fn clipped_score(score: f64, cfg: &ShapingConfig) -> f64 {
    match cfg.variant {
        ClipVariant::ClipToZero => {
            if score <= cfg.tau {
                cfg.alpha * score
            } else {
                0.0
            }
        }
        ClipVariant::MinClip => score.min(cfg.tau),
    }
}

/// One reasoning step of a sampled output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajStep {
    /// Scaled reasoning score of the step's state.
    pub score: f64,
    /// Raw reward; only the last step may be nonzero.
    #[serde(default)]
    pub reward: f64,
    /// Token span `[start, end)`.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajStep>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        let t = self.steps.len();
        if t == 0 {
            return Err(Error::Invalid("trajectory has no steps".into()));
        }
        let mut expected = 0;
        for (i, s) in self.steps.iter().enumerate() {
            if !s.score.is_finite() || !s.reward.is_finite() {
                return Err(Error::NonFinite(format!("step {i} of trajectory")));
            }
            if i + 1 < t && s.reward != 0.0 {
                return Err(Error::Invalid(format!("step {i} carries a reward but is not the last step")));
            }
            if s.start != expected || s.end <= s.start {
                return Err(Error::Invalid(format!(
                    "step {i} span [{}, {}) does not continue at token {expected}",
                    s.start, s.end
                )));
            }
            expected = s.end;
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.steps.last().map_or(0, |s| s.end)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }
}

/// Potentials `Φ(s_t) = -clip(score_t)`, with the last step's potential 0.
pub fn potentials(traj: &Trajectory, cfg: &ShapingConfig) -> Vec<f64> {
    let t = traj.steps.len();
    traj.steps
        .iter()
        .enumerate()
        .map(|(i, s)| if i + 1 == t { 0.0 } else { -clipped_score(s.score, cfg) })
        .collect()
}

/// `r̄_t = r_t + γΦ_{t+1} - Φ_t`, with the potential past the end taken as 0.
pub fn shape_with_potentials(rewards: &[f64], phi: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.len() != phi.len() {
        return Err(Error::LengthMismatch {
            left: rewards.len(),
            right: phi.len(),
        });
    }
    Ok((0..rewards.len())
        .map(|t| {
            let next = phi.get(t + 1).copied().unwrap_or(0.0);
            rewards[t] + gamma * next - phi[t]
        })
        .collect())
}

pub fn shape_rewards(traj: &Trajectory, cfg: &ShapingConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    traj.validate()?;
    shape_with_potentials(&traj.rewards(), &potentials(traj, cfg), cfg.gamma)
}

/// Standardizes pooled rewards with the population standard deviation.
///
/// Returns all zeros (and logs a warning) when the rewards are constant.
pub fn standardize_group(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Invalid(format!("need at least two rewards, got {}", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("rewards".into()));
    }
    let mu = stats::mean(rewards);
    let sd = stats::std_pop(rewards);
    let magnitude = rewards.iter().fold(1.0_f64, |a, r| a.max(r.abs()));
    if sd <= 1e-12 * magnitude {
        log::warn!("shaped rewards have zero spread; advantages set to 0");
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mu) / sd).collect())
}

/// Per-step suffix sums `Â(k) = Σ_{j >= k} r̂(j)`.
pub fn step_advantages(standardized: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; standardized.len()];
    let mut acc = 0.0;
    for k in (0..standardized.len()).rev() {
        acc = standardized[k] + acc;
        out[k] = acc;
    }
    out
}

/// Token-level advantages: every token of step `k` gets `Â(k)`.
pub fn token_advantages(traj: &Trajectory, standardized: &[f64]) -> Result<Vec<f64>> {
    traj.validate()?;
    if standardized.len() != traj.steps.len() {
        return Err(Error::LengthMismatch {
            left: standardized.len(),
            right: traj.steps.len(),
        });
    }
    let step_adv = step_advantages(standardized);
    let mut out = Vec::with_capacity(traj.num_tokens());
    for (s, a) in traj.steps.iter().zip(step_adv) {
        out.extend(std::iter::repeat_n(a, s.end - s.start));
    }
    Ok(out)
}

/// Shaped, standardized and token-level rewards for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapedGroup {
    pub shaped: Vec<Vec<f64>>,
    pub standardized: Vec<Vec<f64>>,
    pub token_advantages: Vec<Vec<f64>>,
}

/// Shapes every trajectory, standardizes over the pooled step rewards and
/// expands to token advantages.
pub fn shape_group(trajs: &[Trajectory], cfg: &ShapingConfig) -> Result<ShapedGroup> {
    let shaped: Vec<Vec<f64>> = trajs.par_iter().map(|t| shape_rewards(t, cfg)).collect::<Result<_>>()?;
    let pooled: Vec<f64> = shaped.iter().flatten().copied().collect();
    let flat = standardize_group(&pooled)?;
    let mut standardized = Vec::with_capacity(trajs.len());
    let mut offset = 0;
    for s in &shaped {
        standardized.push(flat[offset..offset + s.len()].to_vec());
        offset += s.len();
    }
    let token_advantages = trajs
        .iter()
        .zip(&standardized)
        .map(|(t, r)| token_advantages(t, r))
        .collect::<Result<_>>()?;
    Ok(ShapedGroup {
        shaped,
        standardized,
        token_advantages,
    })
}

/// Per-token probability ratios of one sampled output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRatios {
    /// `π_θ / π_θold`.
    pub ratio: Vec<f64>,
    /// `π_ref / π_θ`.
    pub ref_ratio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub outputs: Vec<TokenRatios>,
    pub epsilon: f64,
    pub beta: f64,
}

/// Per-token KL estimate `r - ln r - 1`.
pub fn kl_estimate(ref_ratio: f64) -> f64 {
    ref_ratio - ref_ratio.ln() - 1.0
}

/// Clipped surrogate minus the KL penalty, averaged over tokens and then outputs.
pub fn grpo_objective(batch: &GroupBatch, advantages: &[Vec<f64>]) -> Result<f64> {
    let g = batch.outputs.len();
    if g < 2 {
        return Err(Error::Invalid(format!("group needs at least two outputs, got {g}")));
    }
    if advantages.len() != g {
        return Err(Error::LengthMismatch {
            left: advantages.len(),
            right: g,
        });
    }
    if !(batch.epsilon >= 0.0) || !(batch.beta >= 0.0) {
        return Err(Error::Invalid("epsilon and beta must be non-negative".into()));
    }
    let mut total = 0.0;
    for (o, adv) in batch.outputs.iter().zip(advantages) {
        if o.ratio.len() != adv.len() || o.ref_ratio.len() != adv.len() {
            return Err(Error::LengthMismatch {
                left: o.ratio.len(),
                right: adv.len(),
            });
        }
        if adv.is_empty() {
            return Err(Error::Invalid("output has no tokens".into()));
        }
        let mut sum = 0.0;
        for ((&ratio, &rr), &a) in o.ratio.iter().zip(&o.ref_ratio).zip(adv) {
            if !(ratio > 0.0 && rr > 0.0) || !ratio.is_finite() || !rr.is_finite() {
                return Err(Error::Invalid(format!("probability ratios must be positive, got {ratio} and {rr}")));
            }
            let clipped = ratio.clamp(1.0 - batch.epsilon, 1.0 + batch.epsilon);
            sum += (ratio * a).min(clipped * a) - batch.beta * kl_estimate(rr);
        }
        total += sum / adv.len() as f64;
    }
    Ok(total / g as f64)
}

/// Finite-horizon tabular MDP with per-state reasoning scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// `P(s' | s, a)` at index `(s * A + a) * S + s'`.
    pub transitions: Vec<f64>,
    /// `r_t(s, a)` at index `(t * S + s) * A + a`.
    pub rewards: Vec<f64>,
    /// Scaled reasoning score of each state.
    pub scores: Vec<f64>,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let (s, a, t) = (self.num_states, self.num_actions, self.horizon);
        if s == 0 || a == 0 || t == 0 {
            return Err(Error::Invalid("MDP needs states, actions and a horizon".into()));
        }
        if self.transitions.len() != s * a * s {
            return Err(Error::Dimension(format!("{} transition entries for {s} states and {a} actions", self.transitions.len())));
        }
        if self.rewards.len() != t * s * a || self.scores.len() != s {
            return Err(Error::Dimension("reward or score table has the wrong size".into()));
        }
        for row in self.transitions.chunks(s) {
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid("transition rows must be probability distributions".into()));
            }
        }
        if self.rewards.iter().chain(&self.scores).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("MDP rewards or scores".into()));
        }
        Ok(())
    }

    fn p(&self, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let i = (s * self.num_actions + a) * n;
        &self.transitions[i..i + n]
    }

    fn r(&self, t: usize, s: usize, a: usize) -> f64 {
        self.rewards[(t * self.num_states + s) * self.num_actions + a]
    }

    /// `Φ_t(s)` for `t = 0..=horizon`; zero at the last decision step and after it.
    pub fn potentials(&self, cfg: &ShapingConfig) -> Vec<Vec<f64>> {
        (0..=self.horizon)
            .map(|t| {
                self.scores
                    .iter()
                    .map(|&sc| if t + 1 >= self.horizon { 0.0 } else { -clipped_score(sc, cfg) })
                    .collect()
            })
            .collect()
    }
}

/// Time-indexed stochastic policy, `π_t(a | s)` at `[t][s][a]`.
pub type Policy = Vec<Vec<Vec<f64>>>;

/// Value tables `[t][s]` for `t = 0..=horizon`.
type Values = Vec<Vec<f64>>;

/// Expected one-step return of `(s, a)` at time `t`, shaped when `phi` is given.
fn q_value(mdp: &TabularMdp, gamma: f64, phi: Option<&[Vec<f64>]>, next_v: &[f64], t: usize, s: usize, a: usize) -> f64 {
    let p = mdp.p(s, a);
    let mut cont = 0.0;
    for (s2, &prob) in p.iter().enumerate() {
        let bonus = phi.map_or(0.0, |phi| phi[t + 1][s2]);
        cont += prob * (bonus + next_v[s2]);
    }
    mdp.r(t, s, a) + gamma * cont - phi.map_or(0.0, |phi| phi[t][s])
}

/// Backward induction; returns optimal values and optimal action sets `[t][s]`.
fn optimal(mdp: &TabularMdp, gamma: f64, phi: Option<&[Vec<f64>]>, tol: f64) -> (Values, Vec<Vec<Vec<usize>>>) {
    let (ns, na, h) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut v = vec![vec![0.0; ns]; h + 1];
    let mut best = vec![vec![Vec::new(); ns]; h];
    for t in (0..h).rev() {
        for s in 0..ns {
            let q: Vec<f64> = (0..na).map(|a| q_value(mdp, gamma, phi, &v[t + 1], t, s, a)).collect();
            let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            best[t][s] = (0..na).filter(|&a| q[a] >= m - tol).collect();
            v[t][s] = m;
        }
    }
    (v, best)
}

fn evaluate_policy(mdp: &TabularMdp, gamma: f64, phi: Option<&[Vec<f64>]>, policy: &Policy) -> Values {
    let (ns, na, h) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut v = vec![vec![0.0; ns]; h + 1];
    for t in (0..h).rev() {
        for s in 0..ns {
            v[t][s] = (0..na).map(|a| policy[t][s][a] * q_value(mdp, gamma, phi, &v[t + 1], t, s, a)).sum();
        }
    }
    v
}

fn max_identity_gap(v: &Values, v_shaped: &Values, phi: &[Vec<f64>]) -> f64 {
    let mut gap = 0.0_f64;
    for t in 0..v.len() {
        for s in 0..v[t].len() {
            gap = gap.max((v_shaped[t][s] - (v[t][s] - phi[t][s])).abs());
        }
    }
    gap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    /// Optimal action sets `[t][s]` under raw rewards.
    pub raw_optimal_actions: Vec<Vec<Vec<usize>>>,
    /// Optimal action sets `[t][s]` under shaped rewards.
    pub shaped_optimal_actions: Vec<Vec<Vec<usize>>>,
    pub actions_match: bool,
    /// `max |V'(s) - (V(s) - Φ(s))|` for the optimal values.
    pub optimal_value_gap: f64,
    /// The same gap for each supplied policy.
    pub policy_value_gaps: Vec<f64>,
}

/// Tolerance for treating two action values as tied.
pub const ACTION_TIE_TOLERANCE: f64 = 1e-9;

pub fn verify_policy_invariance(mdp: &TabularMdp, cfg: &ShapingConfig, policies: &[Policy]) -> Result<InvarianceReport> {
    cfg.validate()?;
    mdp.validate()?;
    for p in policies {
        let ok = p.len() == mdp.horizon
            && p.iter().all(|pt| {
                pt.len() == mdp.num_states
                    && pt.iter().all(|ps| {
                        ps.len() == mdp.num_actions
                            && ps.iter().all(|x| *x >= 0.0)
                            && (ps.iter().sum::<f64>() - 1.0).abs() <= 1e-9
                    })
            });
        if !ok {
            return Err(Error::Invalid("policy does not match the MDP".into()));
        }
    }
    let phi = mdp.potentials(cfg);
    let (v, raw) = optimal(mdp, cfg.gamma, None, ACTION_TIE_TOLERANCE);
    let (v_shaped, shaped) = optimal(mdp, cfg.gamma, Some(&phi), ACTION_TIE_TOLERANCE);
    let policy_value_gaps = policies
        .iter()
        .map(|p| {
            let a = evaluate_policy(mdp, cfg.gamma, None, p);
            let b = evaluate_policy(mdp, cfg.gamma, Some(&phi), p);
            max_identity_gap(&a, &b, &phi)
        })
        .collect();
    Ok(InvarianceReport {
        actions_match: raw == shaped,
        optimal_value_gap: max_identity_gap(&v, &v_shaped, &phi),
        raw_optimal_actions: raw,
        shaped_optimal_actions: shaped,
        policy_value_gaps,
    })
}

fn random_distribution(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Random MDP with `2..=max_states` states, `2..=max_actions` actions and
/// horizon `1..=max_horizon`; scores straddle `tau`.
pub fn random_mdp(rng: &mut impl Rng, max_states: usize, max_actions: usize, max_horizon: usize, tau: f64) -> TabularMdp {
    let ns = rng.random_range(2..=max_states.max(2));
    let na = rng.random_range(2..=max_actions.max(2));
    let h = rng.random_range(1..=max_horizon.max(1));
    let transitions = (0..ns * na).flat_map(|_| random_distribution(rng, ns)).collect();
    let rewards = (0..h * ns * na).map(|_| rng.random_range(-1.0..1.0)).collect();
    let scores = (0..ns).map(|_| rng.random_range(0.0..2.0 * tau)).collect();
    TabularMdp {
        num_states: ns,
        num_actions: na,
        horizon: h,
        transitions,
        rewards,
        scores,
    }
}

pub fn random_policy(rng: &mut impl Rng, mdp: &TabularMdp) -> Policy {
    (0..mdp.horizon)
        .map(|_| (0..mdp.num_states).map(|_| random_distribution(rng, mdp.num_actions)).collect())
        .collect()
}

/// Summary of invariance checks over a batch of random MDPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomVerifyReport {
    pub seed: u64,
    pub num_mdps: usize,
    pub policies_per_mdp: usize,
    pub all_actions_match: bool,
    pub mismatched_mdps: Vec<usize>,
    pub max_optimal_value_gap: f64,
    pub max_policy_value_gap: f64,
}

/// Checks `num_mdps` seeded random MDPs (at most 20 states, 4 actions,
/// horizon 10), each with `policies_per_mdp` random policies.
pub fn verify_random(seed: u64, num_mdps: usize, policies_per_mdp: usize, cfg: &ShapingConfig) -> Result<RandomVerifyReport> {
    cfg.validate()?;
    let reports: Vec<InvarianceReport> = (0..num_mdps)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mdp = random_mdp(&mut rng, 20, 4, 10, cfg.tau);
            let policies: Vec<Policy> = (0..policies_per_mdp).map(|_| random_policy(&mut rng, &mdp)).collect();
            verify_policy_invariance(&mdp, cfg, &policies)
        })
        .collect::<Result<_>>()?;
    let mismatched_mdps: Vec<usize> = reports.iter().enumerate().filter(|(_, r)| !r.actions_match).map(|(i, _)| i).collect();
    Ok(RandomVerifyReport {
        seed,
        num_mdps,
        policies_per_mdp,
        all_actions_match: mismatched_mdps.is_empty(),
        mismatched_mdps,
        max_optimal_value_gap: reports.iter().map(|r| r.optimal_value_gap).fold(0.0, f64::max),
        max_policy_value_gap: reports.iter().flat_map(|r| r.policy_value_gaps.iter().copied()).fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: ClipVariant) -> ShapingConfig {
        ShapingConfig {
            alpha: 0.5,
            tau: 4.0,
            gamma: 1.0,
            variant,
        }
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clipped_score(2.0, &cfg(ClipVariant::ClipToZero)), 1.0);
        assert_eq!(clipped_score(5.0, &cfg(ClipVariant::ClipToZero)), 0.0);
        assert_eq!(clipped_score(4.0, &cfg(ClipVariant::ClipToZero)), 2.0);
        assert_eq!(clipped_score(5.0, &cfg(ClipVariant::MinClip)), 4.0);
        assert_eq!(clipped_score(3.0, &cfg(ClipVariant::MinClip)), 3.0);
    }

    #[test]
    fn hand_shaping() {
        let r = shape_with_potentials(&[0.0, 0.0, 1.0], &[-1.0, -2.0, 0.0], 1.0).unwrap();
        assert_eq!(r, vec![-1.0, 2.0, 1.0]);
        // Equal interior potentials cancel.
        let r = shape_with_potentials(&[0.0, 0.0, 1.0], &[-3.0, -3.0, 0.0], 1.0).unwrap();
        assert_eq!(r[0], 0.0);
    }

    #[test]
    fn trajectory_potentials_zero_last() {
        let traj = Trajectory {
            steps: vec![
                TrajStep { score: 2.0, reward: 0.0, start: 0, end: 2 },
                TrajStep { score: 6.0, reward: 0.0, start: 2, end: 3 },
                TrajStep { score: 1.0, reward: 1.0, start: 3, end: 5 },
            ],
        };
        let c = cfg(ClipVariant::ClipToZero);
        assert_eq!(potentials(&traj, &c), vec![-1.0, 0.0, 0.0]);
        assert_eq!(shape_rewards(&traj, &c).unwrap(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn trajectory_validation() {
        let bad_reward = Trajectory {
            steps: vec![
                TrajStep { score: 0.0, reward: 1.0, start: 0, end: 1 },
                TrajStep { score: 0.0, reward: 0.0, start: 1, end: 2 },
            ],
        };
        assert!(bad_reward.validate().is_err());
        let gap = Trajectory {
            steps: vec![
                TrajStep { score: 0.0, reward: 0.0, start: 0, end: 1 },
                TrajStep { score: 0.0, reward: 0.0, start: 2, end: 3 },
            ],
        };
        assert!(gap.validate().is_err());
    }

    #[test]
    fn standardize_examples() {
        assert_eq!(standardize_group(&[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(standardize_group(&[0.3, 0.3, 0.3]).unwrap(), vec![0.0; 3]);
        assert!(standardize_group(&[1.0]).is_err());
    }

    #[test]
    fn advantage_examples() {
        let traj = Trajectory {
            steps: vec![
                TrajStep { score: 0.0, reward: 0.0, start: 0, end: 2 },
                TrajStep { score: 0.0, reward: 1.0, start: 2, end: 4 },
            ],
        };
        assert_eq!(token_advantages(&traj, &[0.5, -0.5]).unwrap(), vec![0.0, 0.0, -0.5, -0.5]);
        let single = Trajectory {
            steps: vec![TrajStep { score: 0.0, reward: 1.0, start: 0, end: 3 }],
        };
        assert_eq!(token_advantages(&single, &[0.7]).unwrap(), vec![0.7; 3]);
    }

    #[test]
    fn objective_examples() {
        let ones = TokenRatios { ratio: vec![1.0; 2], ref_ratio: vec![1.0; 2] };
        let batch = GroupBatch { outputs: vec![ones.clone(), ones], epsilon: 0.2, beta: 0.0 };
        let obj = grpo_objective(&batch, &[vec![1.0, 2.0], vec![-1.0, 0.0]]).unwrap();
        assert!((obj - 0.5).abs() < 1e-15);

        let hi = TokenRatios { ratio: vec![1.5], ref_ratio: vec![1.0] };
        let batch = GroupBatch { outputs: vec![hi.clone(), hi], epsilon: 0.2, beta: 0.3 };
        assert!((grpo_objective(&batch, &[vec![1.0], vec![1.0]]).unwrap() - 1.2).abs() < 1e-15);

        assert_eq!(kl_estimate(1.0), 0.0);
        let bad = TokenRatios { ratio: vec![0.0], ref_ratio: vec![1.0] };
        let batch = GroupBatch { outputs: vec![bad.clone(), bad], epsilon: 0.2, beta: 0.0 };
        assert!(grpo_objective(&batch, &[vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn chain_mdp_by_hand() {
        // Two states, one deterministic "stay" and one "switch" action, horizon 3.
        // Reward 1 for being in state 1 at any step, regardless of action.
        let mdp = TabularMdp {
            num_states: 2,
            num_actions: 2,
            horizon: 3,
            transitions: vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0],
            rewards: (0..3).flat_map(|_| [0.0, 0.0, 1.0, 1.0]).collect(),
            scores: vec![2.0, 6.0],
        };
        let c = cfg(ClipVariant::ClipToZero);
        let phi = mdp.potentials(&c);
        // Φ_t = (-1, 0) before the last decision step.
        assert_eq!(phi[0], vec![-1.0, 0.0]);
        assert_eq!(phi[2], vec![0.0, 0.0]);
        let rep = verify_policy_invariance(&mdp, &c, &[]).unwrap();
        assert!(rep.actions_match);
        // From state 0 at t=0: switch, then stay twice, collecting 2.
        assert_eq!(rep.raw_optimal_actions[0][0], vec![1]);
        let (v, _) = optimal(&mdp, 1.0, None, ACTION_TIE_TOLERANCE);
        let (vs, _) = optimal(&mdp, 1.0, Some(&phi), ACTION_TIE_TOLERANCE);
        assert_eq!(v[0], vec![2.0, 3.0]);
        assert_eq!(vs[0], vec![3.0, 3.0]);
        assert!(rep.optimal_value_gap < 1e-12);
    }

    #[test]
    fn zero_potential_keeps_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mdp = random_mdp(&mut rng, 5, 3, 4, 4.0);
        // Every score above tau clips to zero.
        mdp.scores = vec![9.0; mdp.num_states];
        let c = cfg(ClipVariant::ClipToZero);
        let policy = random_policy(&mut rng, &mdp);
        let phi = mdp.potentials(&c);
        let a = evaluate_policy(&mdp, 1.0, None, &policy);
        let b = evaluate_policy(&mdp, 1.0, Some(&phi), &policy);
        assert_eq!(a, b);
    }

    #[test]
    fn random_batch_is_invariant() {
        let c = ShapingConfig::default();
        let rep = verify_random(7, 10, 3, &c).unwrap();
        assert!(rep.all_actions_match);
        assert!(rep.max_policy_value_gap <= 1e-9);
    }
}
