//! Central finite-difference oracle for graph gradients.

use super::{Graph, Result, Tensor, TensorError, Var};
use crate::par::Exec;

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences, over every coordinate of every parameter.
///
/// `f` receives a fresh 64-bit graph and one `Var` per entry of `params`,
/// and must return a scalar node. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn gradient_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidEpsilon(eps));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::with_exec(Exec::Sequential);
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::with_exec(Exec::Sequential);
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .map(|t| t.into_data())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = p.data()[j];
            probe[pi].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(&[1], &[2.0]).unwrap();
        let err = gradient_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_positive_eps_is_rejected() {
        let x = Tensor::from_f64(&[1], &[2.0]).unwrap();
        for eps in [0.0, -1e-3, f64::NAN] {
            let r = gradient_check(|g, v| Ok(g.sum(v[0])), &[x.clone()], eps);
            assert!(matches!(r, Err(TensorError::InvalidEpsilon(_))));
        }
    }
}
