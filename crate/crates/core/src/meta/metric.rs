//! Cosine-distance metric head, residual combination and the loss Hessian.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::basenet::{FeatureSet, FeatureVars, NUM_FEATURES};
use crate::error::{dim_err, Error, Result};
use crate::numerics::graph::cosine_distance_raw;
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// `d(a, b) = −a·b / (‖a‖‖b‖)`; 0 (with a warning) when either norm is zero.
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    cosine_distance_raw(a, b)
}

/// `Λ[j][m]`: mean over class `j`'s shots of the cosine distance between
/// feature `m` of the shot and of the query. Returned as `N_c×M`.
pub fn metric_distances<T: Scalar>(support: &[Vec<&FeatureSet<T>>], query: &FeatureSet<T>) -> Result<Tensor<T>> {
    let mut out = Vec::with_capacity(support.len() * NUM_FEATURES);
    for (j, shots) in support.iter().enumerate() {
        if shots.is_empty() {
            return Err(Error::Episode(format!("class {j} has no support observations")));
        }
        for m in 0..NUM_FEATURES {
            let mut acc = T::zero();
            for s in shots {
                acc = acc + cosine_distance(s.get(m), query.get(m))?;
            }
            out.push(acc / T::of(shots.len() as f64));
        }
    }
    Tensor::matrix(support.len(), NUM_FEATURES, out)
}

/// Graph version of [`metric_distances`].
pub fn metric_distances_graph<T: Scalar>(
    g: &mut Graph<T>,
    support: &[Vec<FeatureVars>],
    query: FeatureVars,
) -> Result<Var> {
    let mut cells = Vec::with_capacity(support.len() * NUM_FEATURES);
    for (j, shots) in support.iter().enumerate() {
        if shots.is_empty() {
            return Err(Error::Episode(format!("class {j} has no support observations")));
        }
        for m in 0..NUM_FEATURES {
            let ds = shots
                .iter()
                .map(|s| g.cosine_distance(s.0[m], query.0[m]))
                .collect::<Result<Vec<_>>>()?;
            cells.push(g.mean_of(&ds)?);
        }
    }
    let flat = g.concat(&cells)?;
    g.reshape(flat, &[support.len(), NUM_FEATURES])
}

/// `z_j = −Λ_j · η[:, j]` for `Λ: N_c×M`, `η: M×N_c`.
pub fn metric_logits<T: Scalar>(lambda: &Tensor<T>, eta: &Tensor<T>) -> Result<Vec<T>> {
    let (nc, m) = lambda.dims2()?;
    if eta.shape() != [m, nc] {
        return dim_err(format!(
            "eta shape {:?} does not match distances {:?}",
            eta.shape(),
            lambda.shape()
        ));
    }
    Ok((0..nc)
        .map(|j| -(0..m).map(|i| lambda.get2(j, i) * eta.get2(i, j)).sum::<T>())
        .collect())
}

/// Graph version of [`metric_logits`].
pub fn metric_logits_graph<T: Scalar>(g: &mut Graph<T>, lambda: Var, eta: Var) -> Result<Var> {
    let (nc, m) = g.value(lambda).dims2()?;
    if g.shape(eta) != [m, nc] {
        return dim_err(format!(
            "eta shape {:?} does not match distances {:?}",
            g.shape(eta),
            g.shape(lambda)
        ));
    }
    let eta_t = g.transpose(eta)?;
    let weighted = g.mul(lambda, eta_t)?;
    let s = g.sum_rows(weighted)?;
    g.scale(s, -T::one())
}

/// Final logits `z + ŷ`.
pub fn residual_combine<T: Scalar>(z: &[T], y_hat: &[T]) -> Result<Vec<T>> {
    if z.len() != y_hat.len() {
        return dim_err(format!("residual of lengths {} and {}", z.len(), y_hat.len()));
    }
    Ok(z.iter().zip(y_hat).map(|(&a, &b)| a + b).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax of a logit vector, max-shifted.
pub fn softmax_vec<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut out = v.to_vec();
    crate::numerics::graph::softmax_in_place(&mut out);
    out
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
    lse - logits[target]
}

/// Second derivatives of the cross-entropy of `softmax(−Λβ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHessian {
    /// With respect to the logits, `N_c×N_c`.
    pub h_u: DMatrix<f64>,
    /// With respect to `β` by the chain rule, `M×M`.
    pub h_beta: DMatrix<f64>,
}

/// `γ_k = exp(−Λ_k·β)`, `H_u = diag(γ)/Σγ − γγᵀ/(Σγ)²`, `H_β = ΛᵀH_uΛ`.
pub fn loss_hessian(lambda: &DMatrix<f64>, beta: &[f64]) -> Result<LossHessian> {
    if lambda.ncols() != beta.len() {
        return dim_err(format!(
            "distances have {} columns but beta has {} entries",
            lambda.ncols(),
            beta.len()
        ));
    }
    if lambda.iter().chain(beta).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "loss_hessian input".into(),
        });
    }
    let b = nalgebra::DVector::from_column_slice(beta);
    let s = -(lambda * b);
    // H_u is invariant to a common scale of γ, so shift by the max to avoid overflow
    let top = s.max();
    let gamma = s.map(|v| (v - top).exp());
    let total = gamma.sum();
    let p = gamma / total;
    let h_u = DMatrix::from_diagonal(&p) - &p * p.transpose();
    let h_beta = lambda.transpose() * &h_u * lambda;
    Ok(LossHessian { h_u, h_beta })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}
