//! Small shared statistics helpers.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Z-scores of a series against the statistics of its first `baseline_n`
/// samples (the pre-onset segment). A degenerate baseline std is floored to
/// avoid division blowups on constant series.
pub fn zscores_vs_baseline(values: &[f64], baseline_n: usize) -> Vec<f64> {
    let n = baseline_n.min(values.len()).max(2);
    let base = &values[..n];
    let m = mean(base);
    let s = std_dev(base).max(1e-9).max(m.abs() * 1e-6);
    values.iter().map(|&x| (x - m) / s).collect()
}

/// Z-scores of a series against its own full-window statistics.
pub fn zscores_self(values: &[f64]) -> Vec<f64> {
    let m = mean(values);
    let s = std_dev(values).max(1e-12);
    values.iter().map(|&x| (x - m) / s).collect()
}

/// Linear-interpolated percentile, `p` in `[0, 100]`.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// First index where `|z| > threshold` holds for at least `sustain`
/// consecutive samples.
pub fn sustained_crossing(z: &[f64], threshold: f64, sustain: usize) -> Option<usize> {
    let mut run = 0usize;
    for (i, &v) in z.iter().enumerate() {
        if v.abs() > threshold {
            run += 1;
            if run >= sustain {
                return Some(i + 1 - run);
            }
        } else {
            run = 0;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscore_flags_step() {
        let mut v = vec![1.0, 1.1, 0.9, 1.0, 1.05, 0.95, 1.0, 1.1];
        v.extend(vec![5.0; 4]);
        let z = zscores_vs_baseline(&v, 8);
        assert!(z[8] > 3.0);
        assert_eq!(sustained_crossing(&z, 3.0, 2), Some(8));
    }

    #[test]
    fn sustained_ignores_single_spike() {
        let z = vec![0.0, 4.0, 0.0, 0.0, 4.0, 4.0, 4.0];
        assert_eq!(sustained_crossing(&z, 3.0, 2), Some(4));
    }
}
