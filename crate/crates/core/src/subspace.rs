//! Latent subspace estimation for one class.
//!
//! The class scatter `(1/m) X^T X` of the preprocessed rows is decomposed,
//! the leading components are kept until their cumulative share of the
//! variance reaches a threshold, and the residual Gram matrix
//! `X^T (I - P P^T) X` is formed against the kept basis `P`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{canonical_sign, symmetric_eigen};
use crate::repr_store::PreprocessedClass;

pub const DEFAULT_CPV: f64 = 0.95;
const ORTHONORMAL_TOL: f64 = 1e-8;

/// Eigen-decomposition of a class scatter matrix.
///
/// `eigenvalues` always has length `n`. When the Gram route is taken
/// (`n > m`) only the eigenvectors of non-zero eigenvalues are available, so
/// `eigenvectors` is `n x r` with `r <= m`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    nsamples: usize,
}

impl Spectrum {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn nsamples(&self) -> usize {
        self.nsamples
    }

    pub fn nfeatures(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn total_variance(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }
}

fn clamp_nonnegative(values: &mut [f64]) {
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Decomposes `(1/m) X^T X` for the unit-norm, clean-centered rows of `x`.
pub fn covariance_eigen(x: &PreprocessedClass) -> Result<Spectrum> {
    let (m, n) = (x.nsamples(), x.nfeatures());
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    let cols = x.samples_as_columns();
    if n <= m {
        let scatter = (&cols * cols.transpose()) / m as f64;
        let mut eig = symmetric_eigen(scatter)?;
        clamp_nonnegative(&mut eig.values);
        return Ok(Spectrum {
            eigenvalues: eig.values,
            eigenvectors: eig.vectors,
            nsamples: m,
        });
    }

    // Gram route: G = X X^T / m shares its non-zero spectrum with the scatter;
    // v = X^T u / sqrt(m mu) maps Gram eigenvectors into feature space.
    let gram = (cols.transpose() * &cols) / m as f64;
    let mut eig = symmetric_eigen(gram)?;
    clamp_nonnegative(&mut eig.values);
    let top = eig.values.first().copied().unwrap_or(0.0);
    let cutoff = top * 1e-10;
    let r = eig.values.iter().take_while(|&&v| v > cutoff && v > 0.0).count();
    let mut vectors = DMatrix::zeros(n, r);
    for i in 0..r {
        let mut v: Vec<f64> = (&cols * eig.vectors.column(i))
            .iter()
            .map(|x| x / (m as f64 * eig.values[i]).sqrt())
            .collect();
        canonical_sign(&mut v);
        vectors.set_column(i, &nalgebra::DVector::from_vec(v));
    }
    let mut values = eig.values;
    values.truncate(n.min(values.len()));
    for v in values.iter_mut().skip(r) {
        *v = 0.0;
    }
    values.resize(n, 0.0);
    Ok(Spectrum {
        eigenvalues: values,
        eigenvectors: vectors,
        nsamples: m,
    })
}

/// Number of leading components and the cumulative variance share they hold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentSelection {
    pub k: usize,
    pub cpv: f64,
}

/// Smallest `k` whose cumulative percentage variance reaches `threshold`.
pub fn select_components(spectrum: &Spectrum, threshold: f64) -> Result<ComponentSelection> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "CPV threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let total = spectrum.total_variance();
    if total < 1e-15 {
        return Err(Error::ZeroVariance);
    }
    let positive = spectrum.eigenvalues.iter().filter(|&&v| v > 0.0).count();
    // Relative slack absorbs rounding at exact boundaries such as 9/(9+1) = 0.9.
    let target = threshold * total * (1.0 - 1e-12);
    let mut cum = 0.0;
    for (i, &v) in spectrum.eigenvalues.iter().enumerate().take(positive) {
        cum += v;
        if cum >= target {
            return Ok(ComponentSelection {
                k: i + 1,
                cpv: cum / total,
            });
        }
    }
    Ok(ComponentSelection {
        k: positive,
        cpv: 1.0,
    })
}

/// Orthonormal `n x k` basis of the latent subspace.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    p: DMatrix<f64>,
    cpv: Option<f64>,
}

impl SubspaceBasis {
    /// Wraps an externally supplied basis, checking `P^T P = I`.
    pub fn from_orthonormal(p: DMatrix<f64>) -> Result<Self> {
        if p.ncols() == 0 || p.ncols() > p.nrows() {
            return Err(Error::InvalidArgument(format!(
                "basis must be n x k with 1 <= k <= n, got {}x{}",
                p.nrows(),
                p.ncols()
            )));
        }
        let gram = p.transpose() * &p;
        let err = (gram - DMatrix::identity(p.ncols(), p.ncols())).amax();
        if err > ORTHONORMAL_TOL {
            return Err(Error::InvalidArgument(format!(
                "basis columns are not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(SubspaceBasis { p, cpv: None })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn k(&self) -> usize {
        self.p.ncols()
    }

    pub fn nfeatures(&self) -> usize {
        self.p.nrows()
    }

    /// Captured variance share, when the basis came from a spectrum.
    pub fn cpv(&self) -> Option<f64> {
        self.cpv
    }
}

/// Takes the first `k` eigenvectors, `1 <= k <= min(m - 1, n)`.
pub fn build_basis(spectrum: &Spectrum, k: usize) -> Result<SubspaceBasis> {
    let n = spectrum.nfeatures();
    let limit = n.min(spectrum.nsamples.saturating_sub(1));
    if k == 0 || k > limit {
        return Err(Error::InvalidArgument(format!(
            "component count {k} outside 1..={limit}"
        )));
    }
    if k > spectrum.eigenvectors.ncols() {
        return Err(Error::InvalidArgument(format!(
            "only {} eigenvectors with non-zero eigenvalue are available, asked for {k}",
            spectrum.eigenvectors.ncols()
        )));
    }
    let total = spectrum.total_variance();
    let captured: f64 = spectrum.eigenvalues[..k].iter().sum();
    Ok(SubspaceBasis {
        p: spectrum.eigenvectors.columns(0, k).into_owned(),
        cpv: Some(if total > 0.0 { captured / total } else { 0.0 }),
    })
}

/// `Y = (I - P P^T) X` with one sample per column (`n x m`).
pub fn residual_columns(x: &PreprocessedClass, basis: &SubspaceBasis) -> Result<DMatrix<f64>> {
    if basis.nfeatures() != x.nfeatures() {
        return Err(Error::DimensionMismatch {
            expected: x.nfeatures(),
            found: basis.nfeatures(),
        });
    }
    let cols = x.samples_as_columns();
    let p = basis.matrix();
    let coeffs = p.transpose() * &cols;
    Ok(cols - p * coeffs)
}

/// `M = Y^T Y`, the `m x m` residual Gram matrix.
pub fn residual_gram(x: &PreprocessedClass, basis: &SubspaceBasis) -> Result<DMatrix<f64>> {
    let y = residual_columns(x, basis)?;
    let mut gram = y.transpose() * &y;
    let m = gram.nrows();
    for j in 0..m {
        for i in (j + 1)..m {
            let avg = 0.5 * (gram[(i, j)] + gram[(j, i)]);
            gram[(i, j)] = avg;
            gram[(j, i)] = avg;
        }
    }
    Ok(gram)
}
