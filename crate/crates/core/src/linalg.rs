//! Dense symmetric eigensolvers with a reproducible sign convention.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenpairs sorted by non-increasing eigenvalue; column `i` of `vectors`
/// pairs with `values[i]`.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

/// Flips `v` so its largest-magnitude entry is positive. Ties go to the
/// lowest index.
pub fn canonical_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Full decomposition of a symmetric matrix. Only the lower triangle is
/// trusted; the input is symmetrized first.
pub fn symmetric_eigen(mut mat: DMatrix<f64>) -> Result<EigenPairs> {
    let n = mat.nrows();
    if n != mat.ncols() {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: mat.ncols(),
        });
    }
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (mat[(i, j)] + mat[(j, i)]);
            mat[(i, j)] = avg;
            mat[(j, i)] = avg;
        }
    }
    let eig = SymmetricEigen::try_new(mat, f64::EPSILON, 1000 + 100 * n).ok_or_else(|| {
        Error::NumericalFailure(format!("symmetric eigensolver did not converge (n = {n})"))
    })?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite eigenvalue".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col: Vec<f64> = eig.eigenvectors.column(src).iter().copied().collect();
        canonical_sign(&mut col);
        vectors.set_column(dst, &DVector::from_vec(col));
    }
    Ok(EigenPairs { values, vectors })
}

/// Outcome of [`power_iteration`].
#[derive(Debug, Clone)]
pub struct PowerResult {
    pub value: f64,
    pub vector: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Leading eigenpair of a positive semi-definite operator given only its
/// action `apply(v) = M v`.
///
/// Iterates on `M + shift * I`; the shift is removed from the returned value.
/// Stops when the eigen-residual `||M v - lambda v||` falls under
/// `tol * max(lambda, 1)`.
pub fn power_iteration<F>(
    apply: F,
    dim: usize,
    shift: f64,
    tol: f64,
    max_iter: usize,
) -> Result<PowerResult>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if dim == 0 {
        return Err(Error::InvalidArgument("power iteration on empty operator".into()));
    }
    // Deterministic start with no special symmetry.
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749).fract());
    v /= v.norm();
    let mut value = 0.0;
    for it in 1..=max_iter {
        let mv = apply(&v);
        value = v.dot(&mv);
        let residual = (&mv - &v * value).norm();
        if !residual.is_finite() {
            return Err(Error::NumericalFailure("power iteration diverged".into()));
        }
        if residual <= tol * value.abs().max(1.0) {
            return Ok(PowerResult {
                value,
                vector: v,
                iterations: it,
                converged: true,
            });
        }
        let mut next = mv + &v * shift;
        let norm = next.norm();
        if norm == 0.0 {
            return Ok(PowerResult {
                value: 0.0,
                vector: v,
                iterations: it,
                converged: true,
            });
        }
        next /= norm;
        v = next;
    }
    Ok(PowerResult {
        value,
        vector: v,
        iterations: max_iter,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_convention_positive_max_entry() {
        let mut v = vec![0.1, -0.9, 0.3];
        canonical_sign(&mut v);
        assert_eq!(v, vec![-0.1, 0.9, -0.3]);
        let mut tie = vec![-0.5, 0.5];
        canonical_sign(&mut tie);
        assert_eq!(tie, vec![0.5, -0.5]);
    }

    #[test]
    fn eigen_sorted_and_reconstructs() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let e = symmetric_eigen(a.clone()).unwrap();
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        let recon = &e.vectors * DMatrix::from_diagonal(&DVector::from_vec(e.values.clone())) * e.vectors.transpose();
        assert!((recon - a).amax() < 1e-12);
    }

    #[test]
    fn power_iteration_matches_dense() {
        let b = DMatrix::from_fn(6, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let m = b.transpose() * &b;
        let dense = symmetric_eigen(m.clone()).unwrap();
        let p = power_iteration(|v| &m * v, 4, 0.0, 1e-12, 10_000).unwrap();
        assert!(p.converged);
        assert!((p.value - dense.values[0]).abs() < 1e-9 * dense.values[0]);
        let cos = p.vector.dot(&dense.vectors.column(0)).abs();
        assert!(cos > 1.0 - 1e-10);
    }
}
