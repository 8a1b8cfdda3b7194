use serde::{Deserialize, Serialize};

use super::special::student_t_cdf;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub n: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub t: f64,
    /// Lower-tail probability (alternative: after < before).
    pub p: f64,
    /// Differences are constant to machine precision.
    pub degenerate: bool,
}

/// Sample mean and standard error (`sd / sqrt(n)`, `None` for `n < 2`).
pub fn mean_and_se(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(var.sqrt() / (n as f64).sqrt()))
}

/// One-sided paired t-test of `after < before`.
///
/// Differences are `after - before`. When they are constant the statistic
/// is degenerate: a zero mean gives `t = 0, p = 0.5`; otherwise `t` is
/// infinite with `p = 0` for a negative mean and `p = 1` for a positive one.
pub fn paired_t_one_sided(before: &[f64], after: &[f64]) -> Result<PairedTTest> {
    if before.len() != after.len() {
        return Err(Error::Input(format!(
            "paired samples differ in length ({} vs {})",
            before.len(),
            after.len()
        )));
    }
    let n = before.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("paired t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sd <= 8.0 * f64::EPSILON * scale {
        let (t, p) = if scale == 0.0 || mean == 0.0 {
            (0.0, 0.5)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 0.0)
        } else {
            (f64::INFINITY, 1.0)
        };
        return Ok(PairedTTest {
            n,
            mean_diff: mean,
            sd_diff: sd,
            t,
            p,
            degenerate: true,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    Ok(PairedTTest {
        n,
        mean_diff: mean,
        sd_diff: sd,
        t,
        p: student_t_cdf(t, (n - 1) as f64),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn null_case() {
        let x = [0.3, 0.5, 0.9];
        let r = paired_t_one_sided(&x, &x).unwrap();
        assert_eq!((r.t, r.p), (0.0, 0.5));
        assert!(r.degenerate);
    }

    #[test]
    fn small_worked_example() {
        let r = paired_t_one_sided(&[0.5, 0.6, 0.7], &[0.4, 0.52, 0.58]).unwrap();
        assert!((r.mean_diff + 0.1).abs() < 1e-12);
        assert!((r.sd_diff - 0.02).abs() < 1e-12);
        assert!((r.t + 8.660254037844386).abs() < 1e-9);
        // df = 2 closed form.
        let exact = 0.5 + r.t / (2.0 * (2.0 + r.t * r.t).sqrt());
        assert!((r.p - exact).abs() < 1e-12);
        assert!((r.p - 0.0065).abs() < 1e-4);
    }

    #[test]
    fn constant_shift_is_degenerate() {
        let before = [0.6, 0.62, 0.7, 0.58];
        let after: Vec<f64> = before.iter().map(|b| b - 0.2).collect();
        let r = paired_t_one_sided(&before, &after).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 0.0);
        let r = paired_t_one_sided(&after, &before).unwrap();
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(paired_t_one_sided(&[1.0], &[0.0]), Err(Error::InsufficientData(_))));
        assert!(paired_t_one_sided(&[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn standard_error() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se.unwrap() - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(mean_and_se(&[1.0]).1, None);
    }

    proptest! {
        #[test]
        fn antisymmetric(pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..30)) {
            let (b, a): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let fwd = paired_t_one_sided(&b, &a).unwrap();
            let rev = paired_t_one_sided(&a, &b).unwrap();
            prop_assert!((fwd.t + rev.t).abs() <= 1e-9 * fwd.t.abs().max(1.0));
            prop_assert!((fwd.p - (1.0 - rev.p)).abs() < 1e-12);
        }
    }
}
