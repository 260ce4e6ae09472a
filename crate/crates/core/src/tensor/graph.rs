use super::kernels::{self, ConvGeom};
use super::{shape_err, Element, Result, Tensor, TensorError};
use crate::par::Exec;

/// Added to row norms in [`Graph::l2_normalize`] so dead rows map to zero.
pub const L2_NORM_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    StopGradient,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Upsample2x(Var),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    MeanSquare(Var),
    RowSum(Var),
    LogSumExpRows(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of a train-mode batch norm: the output plus the batch statistics
/// the caller folds into its running averages.
pub struct BatchNormOutput<T> {
    pub out: Var,
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance, the convention running statistics use.
    pub var_unbiased: Vec<T>,
}

/// A recording of one forward computation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Graph::backward`] walks it in reverse.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    exec: Exec,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::current())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        if !matches!(op, Op::Leaf) && !value.all_finite() {
            let inputs_finite = inputs_of(&op).iter().all(|v| self.nodes[v.0].value.all_finite());
            debug_assert!(!inputs_finite, "non-finite output from finite inputs in {op:?}");
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Adds a leaf holding `t`. Gradients are recorded only for leaves with
    /// `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Identity in the forward pass; blocks every gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient, false)
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `x` (n, d) plus `bias` (d) broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(shape_err("add_row_bias", format!("{xs:?} + {bs:?}")));
        }
        let d = xs[1];
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(v, Op::AddRowBias(x, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("expected 2-d, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        let v = Tensor::new(vec![c, r], out)?;
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// 2-d convolution of `x` (N, Cin, H, W) with `w` (Cout, Cin, k, k),
    /// square kernel, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] {
            return Err(shape_err("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!("kernel {k} larger than padded input {xs:?} (pad {pad})"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), ws[0]),
                ));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k,
            stride,
            pad,
            hout: (xs[2] + 2 * pad - k) / stride + 1,
            wout: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let cols = kernels::im2col(self.exec, &geom, self.value(x).data());
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut outc = vec![T::zero(); geom.cout * ncols];
        T::gemm(
            geom.cout,
            rows,
            ncols,
            self.value(w).data(),
            (rows as isize, 1),
            &cols,
            (ncols as isize, 1),
            T::zero(),
            &mut outc,
            (ncols as isize, 1),
        );
        let p = geom.out_pixels();
        let mut out = kernels::channel_major_to_batch_major(&outc, geom.n, geom.cout, p);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, plane) in out.chunks_mut(p).enumerate() {
                let bb = bias[i % geom.cout];
                plane.iter_mut().for_each(|v| *v += bb);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let v = Tensor::new(vec![geom.n, geom.cout, geom.hout, geom.wout], out)?;
        // Keep the unfolded input only when the weight gradient will need it.
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(v, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Nearest-neighbour ×2 upsampling of (N, C, H, W).
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("upsample2x", format!("expected 4-d, got {s:?}")));
        }
        let out = kernels::upsample2x(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let rg = self.rg(x);
        let v = Tensor::new(vec![s[0], s[1], 2 * s[2], 2 * s[3]], out)?;
        Ok(self.push(v, Op::Upsample2x(x), rg))
    }

    /// Concatenation along axis 1 (channels for images, columns for matrices).
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(shape_err("concat", "no inputs"));
        };
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(shape_err("concat", format!("rank < 2: {s0:?}")));
        }
        let inner: usize = s0[2..].iter().product();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(shape_err("concat", format!("{s0:?} vs {s:?}")));
            }
            total += s[1];
        }
        let n = s0[0];
        let mut out = Vec::with_capacity(n * total * inner);
        for ni in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[ni * c * inner..(ni + 1) * c * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Concat(xs.to_vec()), rg))
    }

    /// Slice `[start, start + len)` along axis 1.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] || len == 0 {
            return Err(shape_err("narrow", format!("{s:?}[{start}..{}]", start + len)));
        }
        let inner: usize = s[2..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * len * inner);
        for ni in 0..s[0] {
            let base = (ni * s[1] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        let rg = self.rg(x);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Narrow { x, start }, rg))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(shape_err("batch_norm", format!("rank < 2: {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "{c} channels but gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok((s[0], c, s[2..].iter().product()))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
        (n, c, s): (usize, usize, usize),
    ) -> Result<Var> {
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for i in base..base + s {
                    let h = (src[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + b[ci];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Batch norm over every axis except 1, normalizing with batch statistics.
    /// Works for (N, C) and (N, C, H, W) alike.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<BatchNormOutput<T>> {
        let dims = self.bn_check(x, gamma, beta)?;
        let (n, c, s) = dims;
        let m = n * s;
        if m < 2 {
            return Err(shape_err("batch_norm", "train mode needs at least 2 values per channel"));
        }
        let (mean, var) = kernels::channel_moments(self.value(x).data(), n, c, s);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mt = T::from_usize(m).unwrap();
        let var_unbiased = var.iter().map(|&v| v * mt / (mt - T::one())).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true, dims)?;
        Ok(BatchNormOutput {
            out,
            mean,
            var_unbiased,
        })
    }

    /// Batch norm using externally supplied (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let dims = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != dims.1 || running_var.len() != dims.1 {
            return Err(shape_err("batch_norm", "running statistics length"));
        }
        let inv_std = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false, dims)
    }

    /// Spatial mean of (N, C, H, W), giving (N, C).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("expected 4-d, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let rg = self.rg(x);
        let v = Tensor::new(vec![s[0], s[1]], out)?;
        Ok(self.push(v, Op::GlobalAvgPool(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(T::zero(), |a, &v| a + v) / T::from_usize(t.numel()).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of squared entries.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(T::zero(), |a, &v| a + v * v) / T::from_usize(t.numel()).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanSquare(x), rg)
    }

    /// Row sums of (n, d), giving (n, 1).
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("row_sum", format!("expected 2-d, got {s:?}")));
        }
        let out = self
            .value(x)
            .data()
            .chunks(s[1])
            .map(|r| r.iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        let rg = self.rg(x);
        let v = Tensor::new(vec![s[0], 1], out)?;
        Ok(self.push(v, Op::RowSum(x), rg))
    }

    /// Numerically stable `log Σ exp` of each row of (n, d), giving (n, 1).
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(shape_err("logsumexp_rows", format!("expected non-empty 2-d, got {s:?}")));
        }
        let out = self
            .value(x)
            .data()
            .chunks(s[1])
            .map(|r| {
                let m = r.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
                m + r.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln()
            })
            .collect();
        let rg = self.rg(x);
        let v = Tensor::new(vec![s[0], 1], out)?;
        Ok(self.push(v, Op::LogSumExpRows(x), rg))
    }

    /// Scales each row of (n, d) to unit Euclidean norm; the norm is offset by
    /// [`L2_NORM_EPS`].
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("l2_normalize", format!("expected 2-d, got {s:?}")));
        }
        let eps = T::from_f64_lossy(L2_NORM_EPS);
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(src.len());
        for r in src.chunks(s[1]) {
            let nrm = r.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            let d = nrm + eps;
            out.extend(r.iter().map(|&v| v / d));
            norms.push(nrm);
        }
        let rg = self.rg(x);
        let v = Tensor::new(s, out)?;
        Ok(self.push(v, Op::L2Normalize { x, norms }, rg))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    /// `targets` is treated as data: no gradient flows into it.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.binary_same_shape("bce_with_logits", logits, targets)?;
        let (l, t) = (self.value(logits).data(), self.value(targets).data());
        let total = l.iter().zip(t).fold(T::zero(), |a, (&x, &y)| {
            a + x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln()
        });
        let v = total / T::from_usize(l.len()).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(v), Op::BceWithLogits { logits, targets }, rg))
    }

    /// Gradient of the most recent [`Graph::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Like [`Graph::grad`] but consumes the stored buffer.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0)?.take()
    }

    /// Reverse-mode sweep from a scalar `loss`. Replaces gradients from any
    /// earlier call. Every node reachable from `loss` through
    /// gradient-carrying edges receives the sum of its contributions.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if !self.rg(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        // Intermediate buffers are kept; callers read leaves through `grad`.
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, g: Vec<T>, grads: &mut [Option<Vec<T>>]| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += *x),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                acc(*a, dy.to_vec(), grads);
                acc(*b, dy.to_vec(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, dy.to_vec(), grads);
                acc(*b, dy.iter().map(|&g| -g).collect(), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.rg(*a) {
                    acc(*a, dy.iter().zip(vb).map(|(&g, &y)| g * y).collect(), grads);
                }
                if self.rg(*b) {
                    acc(*b, dy.iter().zip(va).map(|(&g, &x)| g * x).collect(), grads);
                }
            }
            Op::Scale(a, c) => acc(*a, dy.iter().map(|&g| g * *c).collect(), grads),
            Op::AddRowBias(x, b) => {
                acc(*x, dy.to_vec(), grads);
                if self.rg(*b) {
                    let d = self.shape(*b)[0];
                    let mut gb = vec![T::zero(); d];
                    for row in dy.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(o, &g)| *o += g);
                    }
                    acc(*b, gb, grads);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let nn = self.shape(*b)[1];
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, nn, k, dy, (nn as isize, 1), val(*b), (1, nn as isize), T::zero(), &mut ga, (k as isize, 1));
                    acc(*a, ga, grads);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let mut gb = vec![T::zero(); k * nn];
                    T::gemm(k, m, nn, val(*a), (1, k as isize), dy, (nn as isize, 1), T::zero(), &mut gb, (nn as isize, 1));
                    acc(*b, gb, grads);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut g = vec![T::zero(); r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        g[i2 * c + j] = dy[j * r + i2];
                    }
                }
                acc(*a, g, grads);
            }
            Op::Relu(a) => {
                let g = dy
                    .iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                acc(*a, g, grads);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let g = dy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                acc(*a, g, grads);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let p = geom.out_pixels();
                let dyc = kernels::batch_major_to_channel_major(dy, geom.n, geom.cout, p);
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                if let Some(b) = b {
                    if self.rg(*b) {
                        let gb = dyc
                            .chunks(ncols)
                            .map(|r| r.iter().fold(T::zero(), |a, &v| a + v))
                            .collect();
                        acc(*b, gb, grads);
                    }
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); geom.cout * rows];
                    T::gemm(geom.cout, ncols, rows, &dyc, (ncols as isize, 1), cols, (1, ncols as isize), T::zero(), &mut gw, (rows as isize, 1));
                    acc(*w, gw, grads);
                }
                if self.rg(*x) {
                    let mut gcols = vec![T::zero(); rows * ncols];
                    T::gemm(rows, geom.cout, ncols, val(*w), (1, rows as isize), &dyc, (ncols as isize, 1), T::zero(), &mut gcols, (ncols as isize, 1));
                    acc(*x, kernels::col2im(self.exec, geom, &gcols), grads);
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                acc(*x, kernels::upsample2x_backward(dy, s[0] * s[1], s[2], s[3]), grads);
            }
            Op::Concat(xs) => {
                let s0 = self.shape(xs[0]);
                let inner: usize = s0[2..].iter().product();
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.rg(v) {
                        let mut g = Vec::with_capacity(s0[0] * c * inner);
                        for ni in 0..s0[0] {
                            let base = (ni * total + offset) * inner;
                            g.extend_from_slice(&dy[base..base + c * inner]);
                        }
                        acc(v, g, grads);
                    }
                    offset += c;
                }
            }
            Op::Narrow { x, start } => {
                let s = self.shape(*x);
                let inner: usize = s[2..].iter().product();
                let len = node.value.shape()[1];
                let mut g = vec![T::zero(); self.value(*x).numel()];
                for ni in 0..s[0] {
                    let dst = (ni * s[1] + start) * inner;
                    let src = ni * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&dy[src..src + len * inner]);
                }
                acc(*x, g, grads);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*x);
                let (n, c, sp) = (s[0], s[1], s[2..].iter().product::<usize>());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * sp;
                        for j in base..base + sp {
                            dgamma[ci] += dy[j] * xhat[j];
                            dbeta[ci] += dy[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let g = val(*gamma);
                    let mut dx = vec![T::zero(); dy.len()];
                    let m = T::from_usize(n * sp).unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * sp;
                            let scale = g[ci] * inv_std[ci];
                            for j in base..base + sp {
                                dx[j] = if *train {
                                    scale * (dy[j] - dbeta[ci] / m - xhat[j] * dgamma[ci] / m)
                                } else {
                                    scale * dy[j]
                                };
                            }
                        }
                    }
                    acc(*x, dx, grads);
                }
                acc(*gamma, dgamma, grads);
                acc(*beta, dbeta, grads);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut g = Vec::with_capacity(self.value(*x).numel());
                for &d in dy {
                    g.extend(std::iter::repeat(d * inv).take(hw));
                }
                acc(*x, g, grads);
            }
            Op::Sum(x) => acc(*x, vec![dy[0]; self.value(*x).numel()], grads),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![dy[0] / T::from_usize(n).unwrap(); n], grads);
            }
            Op::MeanSquare(x) => {
                let v = val(*x);
                let c = dy[0] * T::from_f64_lossy(2.0) / T::from_usize(v.len()).unwrap();
                acc(*x, v.iter().map(|&a| a * c).collect(), grads);
            }
            Op::RowSum(x) => {
                let d = self.shape(*x)[1];
                let mut g = Vec::with_capacity(self.value(*x).numel());
                for &r in dy {
                    g.extend(std::iter::repeat(r).take(d));
                }
                acc(*x, g, grads);
            }
            Op::LogSumExpRows(x) => {
                let d = self.shape(*x)[1];
                let lse = node.value.data();
                let mut g = Vec::with_capacity(self.value(*x).numel());
                for (r, row) in val(*x).chunks(d).enumerate() {
                    g.extend(row.iter().map(|&v| dy[r] * (v - lse[r]).exp()));
                }
                acc(*x, g, grads);
            }
            Op::L2Normalize { x, norms } => {
                let d = self.shape(*x)[1];
                let eps = T::from_f64_lossy(L2_NORM_EPS);
                let mut g = Vec::with_capacity(dy.len());
                for (r, (row, drow)) in val(*x).chunks(d).zip(dy.chunks(d)).enumerate() {
                    let nrm = norms[r];
                    let den = nrm + eps;
                    let dot = row.iter().zip(drow).fold(T::zero(), |a, (&v, &gv)| a + v * gv);
                    let k = if nrm > T::zero() { dot / (den * den * nrm) } else { T::zero() };
                    g.extend(row.iter().zip(drow).map(|(&v, &gv)| gv / den - v * k));
                }
                acc(*x, g, grads);
            }
            Op::BceWithLogits { logits, targets } => {
                let (l, t) = (val(*logits), val(*targets));
                let scale = dy[0] / T::from_usize(l.len()).unwrap();
                let g = l.iter().zip(t).map(|(&x, &y)| (sigmoid(x) - y) * scale).collect();
                acc(*logits, g, grads);
            }
        }
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(debug_assertions)]
fn inputs_of<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf | Op::StopGradient => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) | Op::MatMul(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Upsample2x(a)
        | Op::GlobalAvgPool(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::MeanSquare(a)
        | Op::RowSum(a)
        | Op::LogSumExpRows(a) => vec![*a],
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b.iter().copied());
            v
        }
        Op::Concat(xs) => xs.clone(),
        Op::Narrow { x, .. } | Op::L2Normalize { x, .. } => vec![*x],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::BceWithLogits { logits, targets } => vec![*logits, *targets],
    }
}
