//! Welch's unequal-variance t-test.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::{AnalysisError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub dof: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided p-value of Student's t with `dof` degrees of freedom.
pub fn t_two_sided_p(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(dof / 2.0, 0.5, dof / (dof + t * t)).clamp(0.0, 1.0)
}

/// Welch statistic, Welch–Satterthwaite degrees of freedom, two-sided p.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    for x in [a, b] {
        if x.len() < 2 {
            return Err(AnalysisError::TooFewSamples { need: 2, got: x.len() });
        }
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    if sa + sb == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let dof = (sa + sb).powi(2)
        / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    Ok(TTestResult {
        t,
        p: t_two_sided_p(t, dof),
        dof,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples() {
        let r = welch_t(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-15);
    }

    #[test]
    fn swap_negates_t() {
        let a = [1.0, 2.0, 3.0];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let x = welch_t(&a, &b).unwrap();
        let y = welch_t(&b, &a).unwrap();
        assert_eq!(x.t, -y.t);
        assert_eq!(x.p, y.p);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(welch_t(&[1.0], &[1.0, 2.0]).is_err());
        assert!(welch_t(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }
}
