use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{AnalysisError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
}

/// Mean and sample (n − 1) standard deviation. `std` is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Welch's unequal-variance two-sample t-test.
pub fn two_sample_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    for g in [a, b] {
        if g.len() < 2 {
            return Err(AnalysisError::TooFewSamples { op: "two_sample_ttest", min: 2, got: g.len() });
        }
    }
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let va = sa * sa / a.len() as f64;
    let vb = sb * sb / b.len() as f64;
    let se2 = va + vb;
    if se2 == 0.0 {
        // both groups constant
        return Ok(if ma == mb {
            TTest { t: 0.0, p: 1.0, df: f64::NAN }
        } else {
            TTest {
                t: if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY },
                p: 0.0,
                df: f64::NAN,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_groups() {
        let r = two_sample_ttest(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
    }

    #[test]
    fn separated_groups() {
        let r = two_sample_ttest(&[1.0, 2.0, 3.0], &[101.0, 102.0, 103.0]).unwrap();
        assert!(r.p < 1e-3 && r.t < 0.0);
    }

    #[test]
    fn small_groups_rejected() {
        assert!(two_sample_ttest(&[1.0], &[1.0, 2.0]).is_err());
    }
}
