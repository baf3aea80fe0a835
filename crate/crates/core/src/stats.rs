//! Small descriptive-statistics helpers shared by the metric modules.
//!
//! All reductions run left to right over the input so results do not depend
//! on scheduling.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_pop(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    var.sqrt()
}

pub(crate) fn all_equal(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// Linear-interpolation quantile (Hyndman–Fan type 7).
pub fn quantile_linear(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pearson correlation; 0 when either side has (numerically) zero variance.
///
/// Callers guarantee equal, non-zero lengths.
pub(crate) fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    if all_equal(xs) || all_equal(ys) {
        return 0.0;
    }
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let scale_x = xs.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    let scale_y = ys.iter().fold(0.0_f64, |a, y| a.max(y.abs()));
    let n = xs.len() as f64;
    if (sxx / n).sqrt() <= 1e-12 * scale_x || (syy / n).sqrt() <= 1e-12 * scale_y {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_type7() {
        let xs = [5.0, 0.1, 2.0, 2.0];
        assert!((quantile_linear(&xs, 0.25) - 1.525).abs() < 1e-12);
        assert_eq!(quantile_linear(&[3.0], 0.25), 3.0);
        assert_eq!(quantile_linear(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5), 3.0);
    }

    #[test]
    fn population_std() {
        assert!((std_pop(&[1.0, 2.0]) - 0.5).abs() < 1e-15);
        assert_eq!(std_pop(&[4.0, 4.0, 4.0]), 0.0);
    }

    #[test]
    fn pearson_basic() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]) + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[0.1, 0.1, 0.1], &[1.0, 2.0, 3.0]), 0.0);
    }
}
