use crate::error::{Error, Result};

/// `c(m) = sum_{i=1..m} 1/i`.
pub fn harmonic(m: usize) -> f64 {
    (1..=m).map(|i| 1.0 / i as f64).sum()
}

/// Step-up thresholds `i q / (m c(m))` for ranks `i = 1..=m`.
pub fn by_thresholds(m: usize, q: f64) -> Vec<f64> {
    let c = harmonic(m);
    (1..=m).map(|i| i as f64 * q / (m as f64 * c)).collect()
}

/// Benjamini–Yekutieli step-up procedure at level `q`.
///
/// Returns rejection flags in input order.
pub fn by_correction(p_values: &[f64], q: f64) -> Result<Vec<bool>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Input(format!("FDR level must lie in (0, 1), got {q}")));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Input(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let thresholds = by_thresholds(m, q);
    let k = (0..m).rev().find(|&i| p_values[order[i]] <= thresholds[i]);
    let mut flags = vec![false; m];
    if let Some(k) = k {
        for &idx in &order[..=k] {
            flags[idx] = true;
        }
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_examples() {
        assert_eq!(by_correction(&[0.04], 0.05).unwrap(), [true]);
        let t = by_thresholds(3, 0.05);
        assert!((harmonic(3) - 11.0 / 6.0).abs() < 1e-15);
        for (a, b) in t.iter().zip([0.05 / 5.5, 0.1 / 5.5, 0.15 / 5.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(by_correction(&[0.005, 0.02, 0.5], 0.05).unwrap(), [true, false, false]);
        assert_eq!(by_correction(&[1.0; 4], 0.05).unwrap(), [false; 4]);
        assert!(by_correction(&[], 0.05).unwrap().is_empty());
        assert!(by_correction(&[0.1], 1.0).is_err());
        assert!(by_correction(&[1.1], 0.05).is_err());
    }

    #[test]
    fn step_up_rescues_earlier_ranks() {
        // Thresholds are [1/60, 1/30]; the smaller p misses the first but the
        // larger one meets the second, so both are rejected.
        let p = [0.03, 0.02];
        let t = by_thresholds(2, 0.05);
        assert!(p[1] > t[0] && p[0] <= t[1]);
        assert_eq!(by_correction(&p, 0.05).unwrap(), [true, true]);
    }

    proptest! {
        #[test]
        fn monotone_and_at_least_as_strict_as_bh(
            p in prop::collection::vec(0.0f64..1.0, 1..40),
            which in any::<prop::sample::Index>(),
            shrink in 0.0f64..1.0,
        ) {
            let base = by_correction(&p, 0.05).unwrap();
            let mut lowered = p.clone();
            let i = which.index(p.len());
            lowered[i] *= shrink;
            let after = by_correction(&lowered, 0.05).unwrap();
            for j in 0..p.len() {
                prop_assert!(!base[j] || after[j]);
            }
            // Benjamini–Hochberg is BY with c(m) = 1.
            let m = p.len();
            let mut sorted = p.clone();
            sorted.sort_by(f64::total_cmp);
            let bh_k = (1..=m).rev().find(|&k| sorted[k - 1] <= k as f64 * 0.05 / m as f64).unwrap_or(0);
            prop_assert!(base.iter().filter(|&&r| r).count() <= bh_k);
        }
    }
}
