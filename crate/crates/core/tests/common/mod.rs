//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rhd_core::segmentation::StepBoundaries;
use rhd_core::trace_store::{AttentionData, TraceBundle};

/// Double-double number `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
    pub const LN2: Dd = Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    pub fn from(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let e = e + t;
        let r = quick_two_sum(s, e);
        quick_two_sum(r.hi, r.lo + f)
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi))
    }

    pub fn mul_f64(self, x: f64) -> Dd {
        self.mul(Dd::from(x))
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul_f64(q1));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul_f64(q2));
        let q3 = r.hi / o.hi;
        let q = quick_two_sum(q1, q2);
        q.add(Dd::from(q3))
    }

    pub fn exp(self) -> Dd {
        if self.hi == 0.0 {
            return Dd::ONE;
        }
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = self.sub(Dd::LN2.mul_f64(k));
        // exp(r) = exp(r / 1024)^1024 with a Taylor series on the small argument.
        let s = Dd {
            hi: r.hi / 1024.0,
            lo: r.lo / 1024.0,
        };
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for n in 1..=14 {
            term = term.mul(s).div(Dd::from(n as f64));
            sum = sum.add(term);
        }
        for _ in 0..10 {
            sum = sum.mul(sum);
        }
        let scale = 2f64.powi(k as i32);
        Dd {
            hi: sum.hi * scale,
            lo: sum.lo * scale,
        }
    }

    /// Natural log by Newton iteration on `exp`.
    pub fn ln(self) -> Dd {
        assert!(self.hi > 0.0);
        let mut y = Dd::from(self.hi.ln());
        for _ in 0..2 {
            y = y.add(self.mul(y.neg().exp())).sub(Dd::ONE);
        }
        y
    }
}

/// Jensen–Shannon divergence evaluated in double-double arithmetic.
pub fn jsd_dd(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = Dd::ZERO;
    for (&a, &b) in p.iter().zip(q) {
        let m = Dd::from(a).add(Dd::from(b)).mul_f64(0.5);
        if a > 0.0 {
            acc = acc.add(Dd::from(a).mul(Dd::from(a).div(m).ln()));
        }
        if b > 0.0 {
            acc = acc.add(Dd::from(b).mul(Dd::from(b).div(m).ln()));
        }
    }
    acc.mul_f64(0.5).to_f64()
}

/// Random probability vector; roughly one entry in eight is exactly zero.
pub fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.125) { 0.0 } else { rng.random::<f64>().powi(3) })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        w[0] = 1.0;
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

fn lens_distribution(bundle: &TraceBundle, layer: usize, pos: usize) -> Vec<f64> {
    let acts = bundle.activations.as_ref().unwrap();
    let h = acts.hidden[&layer].row(pos);
    let d = h.len();
    let mean = h.iter().map(|&x| x as f64).sum::<f64>() / d as f64;
    let var = h.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / d as f64;
    let denom = (var + bundle.meta.ln_epsilon as f64).sqrt();
    let gamma = acts.ln_gamma.data();
    let beta = acts.ln_beta.data();
    let normed: Vec<f64> = (0..d)
        .map(|i| {
            let z = if denom == 0.0 { 0.0 } else { (h[i] as f64 - mean) / denom };
            z * gamma[i] as f64 + beta[i] as f64
        })
        .collect();
    let v = bundle.meta.vocab_size;
    let mut logits = vec![0.0f64; v];
    for (i, x) in normed.iter().enumerate() {
        for (j, l) in logits.iter_mut().enumerate() {
            *l += x * acts.unembed.get(i, j) as f64;
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Direct JSD formula in f64.
pub fn jsd_direct(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            s += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            s += 0.5 * b * (b / m).ln();
        }
    }
    s
}

/// Nested-loop step scores (raw nats) of a full-mode bundle.
pub fn brute_step_scores(bundle: &TraceBundle, boundaries: &StepBoundaries, layers: &[usize]) -> Vec<f64> {
    let fin = bundle.meta.final_layer;
    boundaries
        .iter()
        .map(|r| {
            let mut total = 0.0;
            let mut count = 0;
            for t in r.start..r.end {
                if t == 0 {
                    continue;
                }
                let anchor = lens_distribution(bundle, fin, t - 1);
                let mut per_token = 0.0;
                for &l in layers {
                    per_token += jsd_direct(&anchor, &lens_distribution(bundle, l, t - 1));
                }
                total += per_token / layers.len() as f64;
                count += 1;
            }
            total / count as f64
        })
        .collect()
}

/// Nested-loop per-token JSD for one layer; entry 0 is 0.
pub fn brute_token_jsd(bundle: &TraceBundle, layer: usize) -> Vec<f64> {
    let fin = bundle.meta.final_layer;
    let mut out = vec![0.0];
    for t in 1..bundle.meta.num_tokens {
        out.push(jsd_direct(&lens_distribution(bundle, fin, t - 1), &lens_distribution(bundle, layer, t - 1)));
    }
    out
}

/// Naive mean over token pairs and layers of token-level attention.
pub fn brute_step_attention(bundle: &TraceBundle, boundaries: &StepBoundaries) -> Vec<Vec<f64>> {
    let Some(AttentionData::TokenLevel(per_layer)) = &bundle.attention else {
        panic!("token-level attention expected");
    };
    let s = boundaries.len();
    let ranges = boundaries.ranges();
    let mut out = vec![vec![0.0; s]; s];
    for k in 0..s {
        for j in 0..k {
            let mut sum = 0.0;
            for a in per_layer.values() {
                let mut pair_sum = 0.0;
                for t in ranges[k].start..ranges[k].end {
                    for u in ranges[j].start..ranges[j].end {
                        pair_sum += a.get(t, u) as f64;
                    }
                }
                sum += pair_sum / (ranges[k].len() * ranges[j].len()) as f64;
            }
            out[k][j] = sum / per_layer.len() as f64;
        }
    }
    out
}

/// Random contiguous step boundaries covering `n` tokens; the first step has
/// at least two tokens so every step has a scorable token.
pub fn random_boundaries(rng: &mut ChaCha8Rng, n: usize) -> StepBoundaries {
    assert!(n >= 2);
    let mut lengths = vec![rng.random_range(2..=n.min(6))];
    let mut used = lengths[0];
    while used < n {
        let l = rng.random_range(1..=(n - used).min(6));
        lengths.push(l);
        used += l;
    }
    StepBoundaries::from_lengths(&lengths).unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two-sided Welch t-test p-value and t statistic for `a` vs `b`.
pub fn welch(a: &[f64], b: &[f64]) -> (f64, f64) {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (var(a, ma) / a.len() as f64, var(b, mb) / b.len() as f64);
    let t = (ma - mb) / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).unwrap();
    (t, 2.0 * (1.0 - dist.cdf(t.abs())))
}
