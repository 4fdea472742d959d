//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Modified Gram-Schmidt on the columns.
pub fn orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = a.clone();
    for j in 0..q.ncols() {
        for i in 0..j {
            let qi = q.column(i).into_owned();
            let r = qi.dot(&q.column(j));
            let mut cj = q.column_mut(j);
            cj -= qi * r;
        }
        let n = q.column(j).norm();
        let mut cj = q.column_mut(j);
        cj /= n;
    }
    q
}

pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    orthonormalize(&gaussian_matrix(rng, n, n))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Eigenvalues are
/// returned in non-increasing order with matching eigenvector columns.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let scale: f64 = (0..n).map(|i| a[(i, i)] * a[(i, i)]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (values, vectors)
}

/// All-pairs shortest paths on a dense weight matrix (`INFINITY` = no edge).
pub fn floyd_warshall(w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let mut d = w.clone();
    for i in 0..n {
        d[(i, i)] = 0.0;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[(i, k)] + d[(k, j)];
                if via < d[(i, j)] {
                    d[(i, j)] = via;
                }
            }
        }
    }
    d
}

/// Minimum 2-means inertia over every split of the sorted values, each side
/// scored as the sum of squared deviations from its own mean.
pub fn split_scan_optimum(a: &[f64]) -> f64 {
    let mut s = a.to_vec();
    s.sort_by(f64::total_cmp);
    let ss = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
    };
    let mut best = f64::INFINITY;
    for cut in 1..s.len() {
        let cost = ss(&s[..cut]) + ss(&s[cut..]);
        if cost < best {
            best = cost;
        }
    }
    best
}

/// Element of rank `floor((len - 1) / 2)` found by counting, without
/// sorting.
pub fn low_median_by_rank(v: &[f64]) -> f64 {
    let r = (v.len() - 1) / 2;
    for &x in v {
        let below = v.iter().filter(|&&y| y < x).count();
        let at_most = v.iter().filter(|&&y| y <= x).count();
        if below <= r && r < at_most {
            return x;
        }
    }
    unreachable!("some element has the requested rank")
}

/// Pairwise-median scale by direct enumeration of all ordered pairs.
pub fn apd_enumeration(v: &[f64]) -> f64 {
    let inner: Vec<f64> = (0..v.len())
        .map(|i| {
            let d: Vec<f64> = (0..v.len()).filter(|&j| j != i).map(|j| (v[i] - v[j]).abs()).collect();
            low_median_by_rank(&d)
        })
        .collect();
    low_median_by_rank(&inner)
}

pub fn log_normal_density_sum(a: &[f64], mu: f64, sigma2: f64) -> f64 {
    a.iter()
        .map(|x| {
            let z = (x - mu) * (x - mu) / sigma2;
            ((-0.5 * z).exp() / (2.0 * std::f64::consts::PI * sigma2).sqrt()).ln()
        })
        .sum()
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}
