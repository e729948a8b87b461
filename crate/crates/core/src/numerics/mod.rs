//! Dense matrices, the deterministic generator, and the metric kernels.

mod matrix;
mod metrics;
mod rng;

pub use matrix::{dot, norm, pairwise_mean, pairwise_sum, Matrix};
pub use metrics::{
    argmax, cosine_sim, jsd2, linear_cka, sgd_step, sgd_step_in_place, softmax, ProbVector,
    Scored, PROB_SUM_TOL,
};
pub(crate) use metrics::{jsd2_raw, softmax_unchecked};
pub use rng::{derive_seed, mix64, Rng};

/// Random orthogonal matrix from modified Gram-Schmidt on a Gaussian draw.
pub fn random_orthogonal(rng: &mut Rng, n: usize) -> Matrix {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(n, 1.0)).collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let (head, tail) = cols.split_at_mut(i);
                let proj = dot(&tail[0], &head[j]);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= proj * b;
                }
            }
            let nrm = norm(&cols[i]);
            if nrm < 1e-8 {
                ok = false;
                break;
            }
            cols[i].iter_mut().for_each(|v| *v /= nrm);
        }
        if ok {
            return Matrix::from_fn(n, n, |r, c| cols[c][r]);
        }
    }
}
