use serde::{Deserialize, Serialize};

use super::matrix::{dot, norm, Matrix};
use crate::error::{invalid_input, Result};

/// Tolerance used when validating that a distribution sums to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Discrete probability distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(invalid_input("empty distribution"));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid_input("distribution entries must be finite and non-negative"));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > PROB_SUM_TOL {
            return Err(invalid_input(format!("distribution sums to {s}, expected 1")));
        }
        Ok(Self(p))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Index of the first maximal entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Temperature softmax with max-subtraction.
pub fn softmax(v: &[f64], temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid_input("softmax temperature must be positive"));
    }
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(invalid_input("softmax input must be non-empty and finite"));
    }
    Ok(ProbVector(softmax_unchecked(v, temperature)))
}

pub(crate) fn softmax_unchecked(v: &[f64], temperature: f64) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

/// A similarity value that may have been computed on degenerate input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub value: f64,
    pub degenerate: bool,
}

impl Scored {
    fn ok(value: f64) -> Self {
        Self {
            value,
            degenerate: false,
        }
    }

    fn degenerate(value: f64) -> Self {
        Self {
            value,
            degenerate: true,
        }
    }
}

/// Cosine similarity; a zero-norm operand yields `0` with the degenerate flag.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<Scored> {
    if u.len() != v.len() {
        return Err(invalid_input(format!(
            "cosine length mismatch {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Ok(Scored::degenerate(0.0));
    }
    Ok(Scored::ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)))
}

/// Jensen-Shannon divergence with base-2 logarithms, bounded in `[0, 1]`.
pub fn jsd2(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid_input(format!(
            "jsd length mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(jsd2_raw(p.as_slice(), q.as_slice()))
}

pub(crate) fn jsd2_raw(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += a * (a / m).log2();
        }
        if b > 0.0 {
            acc += b * (b / m).log2();
        }
    }
    (0.5 * acc).clamp(0.0, 1.0)
}

/// Linear CKA on column-centered activations,
/// `‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)`.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<Scored> {
    if x.rows() != y.rows() {
        return Err(invalid_input(format!(
            "cka sample count mismatch {} vs {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Ok(Scored::degenerate(0.0));
    }
    let xc = x.center_columns();
    let yc = y.center_columns();
    let xt = xc.transpose();
    let yt = yc.transpose();
    let yx = yt.matmul(&xc)?.frobenius_sq();
    let xx = xt.matmul(&xc)?.frobenius();
    let yy = yt.matmul(&yc)?.frobenius();
    if xx == 0.0 || yy == 0.0 {
        return Ok(Scored::degenerate(0.0));
    }
    Ok(Scored::ok((yx / (xx * yy)).clamp(0.0, 1.0)))
}

/// Plain gradient descent step over a parameter set.
pub fn sgd_step(params: &[Matrix], grads: &[Matrix], lr: f64) -> Result<Vec<Matrix>> {
    let mut out = params.to_vec();
    sgd_step_in_place(&mut out, grads, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(params: &mut [Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(invalid_input("learning rate must be positive"));
    }
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| !p.same_shape(g)) {
        return Err(invalid_input("gradient shapes do not match parameters"));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        p.add_scaled(g, -lr);
    }
    Ok(())
}
