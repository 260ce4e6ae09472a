//! Training objectives: InfoNCE against a key queue, Barlow Twins, SimSiam,
//! L2 reconstruction and the weighted CAiD sum.
//!
//! Every loss is built on a [`Graph`] so it differentiates like any other
//! node and works in both `f32` (training) and `f64` (gradient checks).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Element, Graph, Tensor, TensorError, Var};

/// Allowed deviation of an input row's norm from 1 in [`info_nce`].
pub const NORM_TOLERANCE: f64 = 1e-4;
/// Added to the batch variance when standardizing Barlow Twins embeddings.
pub const BT_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("{op}: row {row} has norm {norm}, expected unit norm")]
    NotNormalized { op: &'static str, row: usize, norm: f64 },
    #[error("{op}: row {row} has zero norm")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("{op} needs a batch of at least 2, got {got}")]
    BatchTooSmall { op: &'static str, got: usize },
    #[error("{op}: shape mismatch {a:?} vs {b:?}")]
    Shape {
        op: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("queue: {0}")]
    Queue(String),
    #[error("loss weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the reconstruction loss in the combined objective.
    pub lambda_ca: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Barlow Twins off-diagonal coefficient.
    pub lambda_bt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ca: 10.0,
            tau: 0.2,
            lambda_bt: 0.005,
        }
    }
}

impl LossWeights {
    /// `tau` and `lambda_bt` must be positive. `lambda_ca` may be zero, which
    /// turns the combined objective into plain instance discrimination.
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(ObjectiveError::Temperature(self.tau));
        }
        if !(self.lambda_bt > 0.0) {
            return Err(ObjectiveError::Weights(format!("lambda_bt must be positive, got {}", self.lambda_bt)));
        }
        if !(self.lambda_ca >= 0.0) || !self.lambda_ca.is_finite() {
            return Err(ObjectiveError::Weights(format!("lambda_ca must be >= 0, got {}", self.lambda_ca)));
        }
        Ok(())
    }
}

/// FIFO ring of unit-norm keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Queue {
    capacity: usize,
    dim: usize,
    data: Vec<f32>,
    /// Next slot to overwrite, which is also the oldest key once full.
    cursor: usize,
    len: usize,
}

impl Queue {
    /// `capacity` must be a positive multiple of `batch`.
    pub fn new(capacity: usize, dim: usize, batch: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 || batch == 0 || capacity % batch != 0 {
            return Err(ObjectiveError::Queue(format!(
                "capacity {capacity} must be a positive multiple of batch size {batch}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            cursor: 0,
            len: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    /// Appends rows of `keys` (row-major, `dim` wide), evicting the oldest.
    pub fn push(&mut self, keys: &[f32]) -> Result<()> {
        if keys.len() % self.dim != 0 {
            return Err(ObjectiveError::Queue(format!("{} values is not a whole number of rows", keys.len())));
        }
        for (row, k) in keys.chunks(self.dim).enumerate() {
            let norm = k.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(ObjectiveError::NotNormalized { op: "queue", row, norm });
            }
        }
        for k in keys.chunks(self.dim) {
            let start = self.cursor * self.dim;
            self.data[start..start + self.dim].copy_from_slice(k);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored keys as a (len, dim) tensor, oldest first.
    pub fn ordered(&self) -> Tensor<f32> {
        let start = if self.is_full() { self.cursor } else { 0 };
        let mut out = Vec::with_capacity(self.len * self.dim);
        for i in 0..self.len {
            let r = (start + i) % self.capacity;
            out.extend_from_slice(&self.data[r * self.dim..(r + 1) * self.dim]);
        }
        Tensor::new(vec![self.len, self.dim], out).expect("queue geometry")
    }
}

fn check_unit_rows<T: Element>(g: &Graph<T>, v: Var, op: &'static str) -> Result<()> {
    let s = g.shape(v);
    if s.len() != 2 {
        return Err(ObjectiveError::Shape { op, a: s.to_vec(), b: vec![] });
    }
    for (row, r) in g.value(v).data().chunks(s[1]).enumerate() {
        let norm = r.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(ObjectiveError::NotNormalized { op, row, norm });
        }
    }
    Ok(())
}

fn same_shape<T: Element>(g: &Graph<T>, a: Var, b: Var, op: &'static str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(ObjectiveError::Shape {
            op,
            a: g.shape(a).to_vec(),
            b: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Mean over the batch of
/// `−log[exp(z·z′/τ) / (exp(z·z′/τ) + Σₙ exp(z·kₙ/τ))]`.
///
/// `z` and `z_prime` are (B, d) with unit rows; `keys` is (N, d) and enters
/// as a constant.
pub fn info_nce<T: Element>(g: &mut Graph<T>, z: Var, z_prime: Var, keys: &Tensor<T>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(ObjectiveError::Temperature(tau));
    }
    same_shape(g, z, z_prime, "info_nce")?;
    check_unit_rows(g, z, "info_nce")?;
    check_unit_rows(g, z_prime, "info_nce")?;
    let d = g.shape(z)[1];
    if keys.shape().len() != 2 || keys.shape()[1] != d {
        return Err(ObjectiveError::Shape {
            op: "info_nce",
            a: g.shape(z).to_vec(),
            b: keys.shape().to_vec(),
        });
    }
    let zz = g.mul(z, z_prime)?;
    let pos = g.row_sum(zz)?;
    let logits = if keys.shape()[0] > 0 {
        let k = g.constant(keys.clone());
        let kt = g.transpose(k)?;
        let neg = g.matmul(z, kt)?;
        g.concat(&[pos, neg])?
    } else {
        pos
    };
    let logits = g.scale(logits, T::from_f64_lossy(1.0 / tau));
    let lse = g.logsumexp_rows(logits)?;
    let first = g.narrow(logits, 0, 1)?;
    let per_row = g.sub(lse, first)?;
    Ok(g.mean(per_row))
}

/// Redundancy-reduction loss on the batch cross-correlation of
/// column-standardized `za`, `zb` (both (B, d)).
pub fn barlow_twins<T: Element>(g: &mut Graph<T>, za: Var, zb: Var, lambda_bt: f64) -> Result<Var> {
    same_shape(g, za, zb, "barlow_twins")?;
    let s = g.shape(za).to_vec();
    if s.len() != 2 {
        return Err(ObjectiveError::Shape { op: "barlow_twins", a: s, b: vec![] });
    }
    let (b, d) = (s[0], s[1]);
    if b < 2 {
        return Err(ObjectiveError::BatchTooSmall { op: "barlow_twins", got: b });
    }
    let eps = T::from_f64_lossy(BT_EPS);
    let standardize = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        let one = g.constant(Tensor::ones(&[d]));
        let zero = g.constant(Tensor::zeros(&[d]));
        Ok(g.batch_norm_train(x, one, zero, eps)?.out)
    };
    let na = standardize(g, za)?;
    let nb = standardize(g, zb)?;
    let nat = g.transpose(na)?;
    let c = g.matmul(nat, nb)?;
    let c = g.scale(c, T::one() / T::from_usize(b).unwrap());
    let mut eye = Tensor::zeros(&[d, d]);
    let mut weights = Tensor::full(&[d, d], T::from_f64_lossy(lambda_bt));
    for i in 0..d {
        eye.data_mut()[i * d + i] = T::one();
        weights.data_mut()[i * d + i] = T::one();
    }
    let eye = g.constant(eye);
    let weights = g.constant(weights);
    let diff = g.sub(c, eye)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, weights)?;
    Ok(g.sum(weighted))
}

fn check_nonzero_rows<T: Element>(g: &Graph<T>, v: Var, op: &'static str) -> Result<()> {
    let s = g.shape(v);
    if s.len() != 2 {
        return Err(ObjectiveError::Shape { op, a: s.to_vec(), b: vec![] });
    }
    for (row, r) in g.value(v).data().chunks(s[1]).enumerate() {
        if r.iter().all(|x| x.is_zero()) {
            return Err(ObjectiveError::ZeroNorm { op, row });
        }
    }
    Ok(())
}

/// `−mean(cos(p, y))` with `y` behind a stop-gradient.
fn negative_cosine<T: Element>(g: &mut Graph<T>, p: Var, y: Var) -> Result<Var> {
    let y = g.stop_gradient(y);
    let pn = g.l2_normalize(p)?;
    let yn = g.l2_normalize(y)?;
    let prod = g.mul(pn, yn)?;
    let cos = g.row_sum(prod)?;
    let m = g.mean(cos);
    Ok(g.scale(m, -T::one()))
}

/// `½·D(p_a, sg(y_b)) + ½·D(p_b, sg(y_a))` with `D` the negative cosine
/// similarity averaged over the batch.
pub fn simsiam<T: Element>(g: &mut Graph<T>, p_a: Var, y_b: Var, p_b: Var, y_a: Var) -> Result<Var> {
    for (a, b) in [(p_a, y_b), (p_b, y_a), (p_a, p_b)] {
        same_shape(g, a, b, "simsiam")?;
    }
    for v in [p_a, y_b, p_b, y_a] {
        check_nonzero_rows(g, v, "simsiam")?;
    }
    let da = negative_cosine(g, p_a, y_b)?;
    let db = negative_cosine(g, p_b, y_a)?;
    let sum = g.add(da, db)?;
    Ok(g.scale(sum, T::from_f64_lossy(0.5)))
}

/// Mean squared error between the original crop and its reconstruction.
pub fn reconstruction_l2<T: Element>(g: &mut Graph<T>, s_c: Var, recon: Var) -> Result<Var> {
    same_shape(g, s_c, recon, "reconstruction_l2")?;
    let d = g.sub(recon, s_c)?;
    Ok(g.mean_square(d))
}

/// `λ_ca·l_ca + l_id`.
pub fn combined<T: Element>(g: &mut Graph<T>, l_ca: Var, l_id: Var, lambda_ca: f64) -> Result<Var> {
    let w = g.scale(l_ca, T::from_f64_lossy(lambda_ca));
    Ok(g.add(w, l_id)?)
}
