//! Small numeric helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// `log(Σ exp(v_k))`, accumulated relative to the maximum.
///
/// Returns `-inf` for an empty slice or when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max.is_nan() {
        return f64::NAN;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalized weights `exp(v_k - logsumexp(v))`, in input order.
pub fn softmax(log_values: &[f64]) -> Vec<f64> {
    let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = log_values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = shifted.iter().sum();
    shifted.into_iter().map(|w| w / sum).collect()
}

/// Kish effective sample size of a normalized weight vector.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    if sq > 0.0 {
        1.0 / sq
    } else {
        0.0
    }
}

pub fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

pub fn block_diagonal(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Central-difference gradient of a scalar field.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> DVector<f64> {
    let mut probe = x.to_vec();
    DVector::from_fn(x.len(), |i, _| {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        (plus - minus) / (2.0 * step)
    })
}

/// Central-difference Jacobian of a vector field, symmetrized when square
/// and `symmetrize` is set (used for Hessians built from gradients).
pub fn fd_jacobian(f: &dyn Fn(&[f64]) -> DVector<f64>, x: &[f64], step: f64, symmetrize: bool) -> DMatrix<f64> {
    let mut probe = x.to_vec();
    let base = f(x);
    let mut jac = DMatrix::zeros(base.len(), x.len());
    for j in 0..x.len() {
        let orig = probe[j];
        probe[j] = orig + step;
        let plus = f(&probe);
        probe[j] = orig - step;
        let minus = f(&probe);
        probe[j] = orig;
        jac.set_column(j, &((plus - minus) / (2.0 * step)));
    }
    if symmetrize && jac.is_square() {
        jac = (&jac + jac.transpose()) * 0.5;
    }
    jac
}
