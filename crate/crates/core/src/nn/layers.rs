use super::params::{Ctx, ParamId, ParamKind, ParamStore};
use super::Result;
use crate::rng::SplitMix64;
use crate::tensor::{Tensor, Var};

pub const BN_EPS: f32 = 1e-5;
/// Weight of the newest batch in running statistics.
pub const BN_MOMENTUM: f32 = 0.1;

fn uniform(rng: &mut SplitMix64, shape: &[usize], bound: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-uniform weights, `bound = sqrt(6 / fan_in)`; zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let w = uniform(rng, &[cout, cin, k, k], (6.0 / fan_in).sqrt());
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        Ok(ctx.g.conv2d(x, w, b, self.stride, self.pad)?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, zero_gamma: bool) -> Self {
        let gamma = if zero_gamma {
            Tensor::zeros(&[channels])
        } else {
            Tensor::ones(&[channels])
        };
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::NormScale, gamma),
            beta: store.add(format!("{name}.beta"), ParamKind::NormShift, Tensor::zeros(&[channels])),
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::RunningMean,
                Tensor::zeros(&[channels]),
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::RunningVar,
                Tensor::ones(&[channels]),
            ),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.var(self.gamma);
        let beta = ctx.var(self.beta);
        if ctx.train() {
            let out = ctx.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            let store = ctx.store_mut();
            for (rm, m) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&out.mean) {
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
            }
            for (rv, v) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&out.var_unbiased) {
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v;
            }
            Ok(out.out)
        } else {
            let rm = ctx.store().get(self.running_mean).data().to_vec();
            let rv = ctx.store().get(self.running_var).data().to_vec();
            Ok(ctx.g.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)?)
        }
    }
}

/// Fully connected layer `y = x·W + b` with `W` stored as (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform init with `bound = 1 / sqrt(fan_in)`.
    pub fn new(store: &mut ParamStore, rng: &mut SplitMix64, name: &str, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), ParamKind::Weight, uniform(rng, &[din, dout], bound)),
            bias: store.add(format!("{name}.bias"), ParamKind::Bias, uniform(rng, &[dout], bound)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = ctx.var(self.bias);
        let y = ctx.g.matmul(x, w)?;
        Ok(ctx.g.add_row_bias(y, b)?)
    }
}
