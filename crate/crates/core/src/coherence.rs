//! Coherence-maximizing sample weights.
//!
//! For a class `X` (samples as columns) and latent basis `P`, the weight
//! vector is the unit `a` maximizing `a^T X^T (I - P P^T) X a`, i.e. the top
//! eigenvector of the residual Gram matrix. Samples lying inside `span(P)`
//! contribute nothing to the objective and receive small weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{power_iteration, symmetric_eigen};
use crate::repr_store::{ClassId, PreprocessedClass};
use crate::subspace::{residual_columns, SubspaceBasis};

/// Objective values below this mean the class lies inside `span(P)`.
pub const DEGENERATE_LAMBDA: f64 = 1e-12;
/// Top-eigenvalue gaps below this are treated as a repeated eigenvalue.
pub const TIE_GAP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverRoute {
    /// Dense decomposition of the `m x m` residual Gram matrix.
    DenseSamples,
    /// Dense decomposition of the `n x n` matrix `Y Y^T`, mapped back by `Y^T`.
    DenseFeatures,
    /// Power iteration on `v -> Y^T Y v`.
    Power,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Largest side handled by a dense decomposition.
    pub dense_limit: usize,
    pub power_tol: f64,
    pub power_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            dense_limit: 4096,
            power_tol: 1e-12,
            power_max_iter: 10_000,
        }
    }
}

/// Unit-norm sample weights with the attained objective `lambda_star`.
#[derive(Debug, Clone)]
pub struct WeightVector {
    pub class_id: ClassId,
    pub a: DVector<f64>,
    pub lambda_star: f64,
    pub row_map: Vec<usize>,
    /// Set when the leading eigenvalue is repeated; `a` is then one arbitrary
    /// unit vector of the leading eigenspace.
    pub degenerate_top_space: bool,
    /// `lambda_1 - lambda_2` when the dense routes computed it.
    pub spectral_gap: Option<f64>,
    pub route: SolverRoute,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.a.as_slice()
    }
}

pub fn optimize_weights(x: &PreprocessedClass, basis: &SubspaceBasis) -> Result<WeightVector> {
    optimize_weights_with(x, basis, &SolverConfig::default())
}

pub fn optimize_weights_with(
    x: &PreprocessedClass,
    basis: &SubspaceBasis,
    cfg: &SolverConfig,
) -> Result<WeightVector> {
    let m = x.nsamples();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    let y = residual_columns(x, basis)?;
    let n = y.nrows();

    let (lambda, mut a, gap, route) = if m.min(n) <= cfg.dense_limit {
        if m <= n {
            let gram = y.transpose() * &y;
            let eig = symmetric_eigen(gram)?;
            let gap = eig.values[0] - eig.values.get(1).copied().unwrap_or(0.0);
            (
                eig.values[0],
                eig.vectors.column(0).into_owned(),
                Some(gap),
                SolverRoute::DenseSamples,
            )
        } else {
            let outer = &y * y.transpose();
            let eig = symmetric_eigen(outer)?;
            let lambda = eig.values[0];
            // M = Y^T Y has the non-zero spectrum of Y Y^T plus m - n zeros.
            let second = eig.values.get(1).copied().unwrap_or(0.0).max(0.0);
            let a = if lambda > DEGENERATE_LAMBDA {
                let mut a = y.transpose() * eig.vectors.column(0);
                let norm = a.norm();
                a /= norm;
                a
            } else {
                DVector::zeros(m)
            };
            (lambda, a, Some(lambda - second), SolverRoute::DenseFeatures)
        }
    } else {
        let yt = y.transpose();
        let res = power_iteration(
            |v| &yt * (&y * v),
            m,
            0.0,
            cfg.power_tol,
            cfg.power_max_iter,
        )?;
        if !res.converged {
            return Err(Error::NumericalFailure(format!(
                "power iteration did not converge in {} iterations",
                res.iterations
            )));
        }
        (res.value, res.vector, None, SolverRoute::Power)
    };

    if !(lambda >= DEGENERATE_LAMBDA) {
        return Err(Error::DegenerateObjective {
            lambda: lambda.max(0.0),
        });
    }
    if a.sum() < 0.0 {
        a.neg_mut();
    }
    Ok(WeightVector {
        class_id: x.class_id().clone(),
        a,
        lambda_star: lambda,
        row_map: x.row_map().to_vec(),
        degenerate_top_space: gap.is_some_and(|g| g < TIE_GAP),
        spectral_gap: gap,
        route,
    })
}

/// `x_i^T x_j` for unit-norm rows, clamped to `[-1, 1]`.
pub fn pairwise_coherence(x: &PreprocessedClass, i: usize, j: usize) -> Result<f64> {
    let m = x.nsamples();
    for idx in [i, j] {
        if idx >= m {
            return Err(Error::IndexOutOfRange { index: idx, len: m });
        }
    }
    let data = x.matrix().as_matrix();
    let rho = data.row(i).dot(&data.row(j));
    Ok(rho.clamp(-1.0, 1.0))
}

/// Pairwise check of `|a_i - a_j| <= sqrt(2 (1 - rho_ij) / lambda*)`.
#[derive(Debug, Clone)]
pub struct GroupingReport {
    /// Largest `|a_i - a_j| - bound_ij` over all pairs (negative when every
    /// pair is strictly inside its bound).
    pub max_violation: f64,
    pub worst_pair: (usize, usize),
    /// `bound_ij - |a_i - a_j|` for `i < j`, row by row.
    pub slack: Vec<f64>,
    m: usize,
}

impl GroupingReport {
    pub fn pair_slack(&self, i: usize, j: usize) -> Option<f64> {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        if i == j || j >= self.m {
            return None;
        }
        let offset = i * (2 * self.m - i - 1) / 2 + (j - i - 1);
        self.slack.get(offset).copied()
    }

    pub fn violations(&self, tol: f64) -> usize {
        self.slack.iter().filter(|&&s| -s > tol).count()
    }
}

pub fn grouping_bound_report(x: &PreprocessedClass, w: &WeightVector) -> Result<GroupingReport> {
    let m = x.nsamples();
    if w.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: w.len(),
        });
    }
    let data = x.matrix().as_matrix();
    let rho: DMatrix<f64> = data * data.transpose();
    let mut slack = Vec::with_capacity(m * (m - 1) / 2);
    let mut max_violation = f64::NEG_INFINITY;
    let mut worst_pair = (0, 1.min(m - 1));
    for i in 0..m {
        for j in (i + 1)..m {
            let r = rho[(i, j)].clamp(-1.0, 1.0);
            let bound = ((2.0 * (1.0 - r)).max(0.0) / w.lambda_star).sqrt();
            let diff = (w.a[i] - w.a[j]).abs();
            let violation = diff - bound;
            if violation > max_violation {
                max_violation = violation;
                worst_pair = (i, j);
            }
            slack.push(-violation);
        }
    }
    Ok(GroupingReport {
        max_violation,
        worst_pair,
        slack,
        m,
    })
}
