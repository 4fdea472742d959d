//! Per-class bimodality test on the weight vector and the cross-class
//! anomaly screen.
//!
//! Each class's weights are fitted by a single Gaussian (null) and by a
//! two-component Gaussian mixture (alternative, via EM). The statistic
//! `J = 2 (loglik_mix - loglik_single)` is then standardized across classes
//! with the median and the pairwise-median scale estimator:
//!
//! ```text
//! J_hat_t = |J_t - med(J)| / (1.1926 * apd(J))
//! ```
//!
//! and a class is flagged when `J_hat_t > tau` and `J_t > med(J)`.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::repr_store::ClassId;

pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Finite-sample consistency factor of the pairwise-median scale.
pub const APD_CONSISTENCY: f64 = 1.1926;
pub const DEFAULT_TAU: f64 = 3.0;
/// Free parameters of the mixture (5) minus those of the single Gaussian (2).
pub const MIXTURE_DOF: f64 = 3.0;
const PI_BOUND: f64 = 1e-6;
/// Restarts whose smaller component holds fewer expected points are dropped.
const MIN_COMPONENT_MASS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mu: f64,
    pub sigma2: f64,
    pub loglik: f64,
}

fn log_normal(x: f64, mu: f64, sigma2: f64) -> f64 {
    let d = x - mu;
    -0.5 * ((2.0 * PI * sigma2).ln() + d * d / sigma2)
}

pub fn fit_gaussian(a: &[f64]) -> Result<GaussianFit> {
    let m = a.len();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    let mu = a.iter().sum::<f64>() / m as f64;
    let var = a.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m as f64;
    let sigma2 = var.max(VARIANCE_FLOOR);
    let loglik = a.iter().map(|&x| log_normal(x, mu, sigma2)).sum();
    Ok(GaussianFit { mu, sigma2, loglik })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Convergence threshold on the change in log-likelihood.
    pub tol: f64,
    /// Number of random quantile-split pairs.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 200,
            tol: 1e-8,
            restarts: 5,
            seed: 0,
        }
    }
}

/// Parameters of a two-component 1-D mixture; `pi` weights component 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub pi: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub sigma2_1: f64,
    pub sigma2_2: f64,
}

impl MixtureParams {
    fn log_terms(&self, x: f64) -> (f64, f64) {
        (
            self.pi.ln() + log_normal(x, self.mu1, self.sigma2_1),
            (1.0 - self.pi).ln() + log_normal(x, self.mu2, self.sigma2_2),
        )
    }

    pub fn loglik(&self, a: &[f64]) -> f64 {
        a.iter()
            .map(|&x| {
                let (l1, l2) = self.log_terms(x);
                log_add(l1, l2)
            })
            .sum()
    }

    fn from_groups(low: &[f64], high: &[f64]) -> Self {
        let stats = |g: &[f64]| {
            let mu = g.iter().sum::<f64>() / g.len() as f64;
            let var = g.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / g.len() as f64;
            (mu, var.max(VARIANCE_FLOOR))
        };
        let (mu1, s1) = stats(low);
        let (mu2, s2) = stats(high);
        MixtureParams {
            pi: (low.len() as f64 / (low.len() + high.len()) as f64).clamp(PI_BOUND, 1.0 - PI_BOUND),
            mu1,
            mu2,
            sigma2_1: s1,
            sigma2_2: s2,
        }
    }

    fn smaller_mass(&self, m: usize) -> f64 {
        self.pi.min(1.0 - self.pi) * m as f64
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmInit {
    /// Both components at the single-Gaussian fit, means split by +-sigma/2.
    NullSplit,
    MedianSplit,
    Quantile,
}

/// One EM trajectory. `trace[0]` is the log-likelihood at the initial
/// parameters, `trace[t]` after the `t`-th M-step.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub init: EmInit,
    pub params: MixtureParams,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

fn e_step(a: &[f64], p: &MixtureParams, resp: &mut [f64]) -> f64 {
    let mut ll = 0.0;
    for (r, &x) in resp.iter_mut().zip(a) {
        let (l1, l2) = p.log_terms(x);
        let total = log_add(l1, l2);
        *r = (l1 - total).exp();
        ll += total;
    }
    ll
}

fn m_step(a: &[f64], resp: &[f64], prev: &MixtureParams) -> MixtureParams {
    let m = a.len() as f64;
    let n1: f64 = resp.iter().sum();
    let n2 = m - n1;
    let mut next = *prev;
    next.pi = (n1 / m).clamp(PI_BOUND, 1.0 - PI_BOUND);
    if n1 > 0.0 {
        let mu = resp.iter().zip(a).map(|(r, x)| r * x).sum::<f64>() / n1;
        let var = resp.iter().zip(a).map(|(r, x)| r * (x - mu) * (x - mu)).sum::<f64>() / n1;
        next.mu1 = mu;
        next.sigma2_1 = var.max(VARIANCE_FLOOR);
    }
    if n2 > 0.0 {
        let mu = resp.iter().zip(a).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / n2;
        let var = resp
            .iter()
            .zip(a)
            .map(|(r, x)| (1.0 - r) * (x - mu) * (x - mu))
            .sum::<f64>()
            / n2;
        next.mu2 = mu;
        next.sigma2_2 = var.max(VARIANCE_FLOOR);
    }
    next
}

pub fn em_run(a: &[f64], init: MixtureParams, kind: EmInit, max_iter: usize, tol: f64) -> EmRun {
    let mut resp = vec![0.0; a.len()];
    let mut params = init;
    let mut ll = e_step(a, &params, &mut resp);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iter {
        params = m_step(a, &resp, &params);
        let next = e_step(a, &params, &mut resp);
        trace.push(next);
        iterations = it;
        let delta = (next - ll).abs();
        ll = next;
        if delta < tol {
            converged = true;
            break;
        }
    }
    EmRun {
        init: kind,
        params,
        loglik: ll,
        iterations,
        converged,
        trace,
    }
}

#[derive(Debug, Clone)]
pub struct MixtureFit {
    pub pi: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub sigma2_1: f64,
    pub sigma2_2: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// EM runs that were not discarded as collapsed.
    pub restarts_used: usize,
    /// No EM run survived; the fit is the single Gaussian embedded as a
    /// mixture.
    pub collapsed: bool,
    /// Every EM run, including discarded ones.
    pub runs: Vec<EmRun>,
}

impl MixtureFit {
    pub fn params(&self) -> MixtureParams {
        MixtureParams {
            pi: self.pi,
            mu1: self.mu1,
            mu2: self.mu2,
            sigma2_1: self.sigma2_1,
            sigma2_2: self.sigma2_2,
        }
    }
}

/// Fits the two-component mixture by EM from several starts and keeps the
/// best log-likelihood.
///
/// The single-Gaussian fit embedded as a mixture (both components equal) is
/// always a candidate, so the result never scores below the null model.
pub fn fit_gmm2(a: &[f64], cfg: &EmConfig) -> Result<MixtureFit> {
    let m = a.len();
    if m < 4 {
        return Err(Error::TooFewSamples { needed: 4, got: m });
    }
    let null = fit_gaussian(a)?;
    let sd = null.sigma2.sqrt();
    let mut sorted = a.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut inits = vec![
        (
            EmInit::NullSplit,
            MixtureParams {
                pi: 0.5,
                mu1: null.mu - 0.5 * sd,
                mu2: null.mu + 0.5 * sd,
                sigma2_1: null.sigma2,
                sigma2_2: null.sigma2,
            },
        ),
        (
            EmInit::MedianSplit,
            MixtureParams::from_groups(&sorted[..m / 2], &sorted[m / 2..]),
        ),
    ];
    // Quantile splits come in mirrored pairs so the start set maps onto
    // itself when the data are negated.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.restarts {
        let q: f64 = rng.random_range(0.1..0.9);
        let cut = ((q * m as f64).round() as usize).clamp(2, m - 2);
        for cut in [cut, m - cut] {
            inits.push((
                EmInit::Quantile,
                MixtureParams::from_groups(&sorted[..cut], &sorted[cut..]),
            ));
        }
    }

    let runs: Vec<EmRun> = inits
        .into_iter()
        .map(|(kind, p)| em_run(a, p, kind, cfg.max_iter, cfg.tol))
        .collect();

    let embedded = MixtureParams {
        pi: 0.5,
        mu1: null.mu,
        mu2: null.mu,
        sigma2_1: null.sigma2,
        sigma2_2: null.sigma2,
    };
    let embedded_ll = embedded.loglik(a);

    let survivors: Vec<&EmRun> = runs
        .iter()
        .filter(|r| r.loglik.is_finite() && r.params.smaller_mass(m) >= MIN_COMPONENT_MASS)
        .collect();
    let best = survivors
        .iter()
        .copied()
        .max_by(|x, y| x.loglik.total_cmp(&y.loglik));
    let restarts_used = survivors.len();

    let fit = match best {
        Some(run) if run.loglik > embedded_ll => MixtureFit {
            pi: run.params.pi,
            mu1: run.params.mu1,
            mu2: run.params.mu2,
            sigma2_1: run.params.sigma2_1,
            sigma2_2: run.params.sigma2_2,
            loglik: run.loglik,
            iterations: run.iterations,
            converged: run.converged,
            restarts_used,
            collapsed: false,
            runs,
        },
        _ => MixtureFit {
            pi: embedded.pi,
            mu1: embedded.mu1,
            mu2: embedded.mu2,
            sigma2_1: embedded.sigma2_1,
            sigma2_2: embedded.sigma2_2,
            loglik: embedded_ll.max(null.loglik),
            iterations: 0,
            converged: true,
            restarts_used,
            collapsed: restarts_used == 0,
            runs,
        },
    };
    Ok(fit)
}

/// `J = -2 log(L0 / L1)`, clamped at zero.
pub fn likelihood_ratio(null: &GaussianFit, mix: &MixtureFit) -> f64 {
    (2.0 * (mix.loglik - null.loglik)).max(0.0)
}

/// Upper-tail chi-square probability of `j` with `dof` degrees of freedom.
pub fn chi2_pvalue(j: f64, dof: f64) -> f64 {
    if !(j > 0.0) {
        return 1.0;
    }
    statrs::function::gamma::gamma_ur(0.5 * dof, 0.5 * j)
}

/// Sample median (mean of the two central values for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn low_median(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 2]
}

/// Pairwise-median scale: `lomed_i lomed_{j != i} |v_i - v_j|`.
///
/// The inner low median over the `T - 1` other values equals the high median
/// over all `T` values including the zero self-difference.
pub fn apd(values: &[f64]) -> Result<f64> {
    let t = values.len();
    if t < 3 {
        return Err(Error::TooFewClasses { got: t });
    }
    let mut inner = Vec::with_capacity(t);
    let mut diffs = Vec::with_capacity(t - 1);
    for (i, &vi) in values.iter().enumerate() {
        diffs.clear();
        diffs.extend(
            values
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &vj)| (vi - vj).abs()),
        );
        diffs.sort_by(f64::total_cmp);
        inner.push(low_median(&diffs));
    }
    inner.sort_by(f64::total_cmp);
    Ok(low_median(&inner))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyIndex {
    pub scores: Vec<f64>,
    pub median: f64,
    pub apd: f64,
    pub warning: Option<Warning>,
}

pub fn anomaly_index(values: &[f64]) -> Result<AnomalyIndex> {
    let spread = apd(values)?;
    let med = median(values);
    if spread <= 0.0 {
        return Ok(AnomalyIndex {
            scores: vec![0.0; values.len()],
            median: med,
            apd: spread,
            warning: Some(Warning::DegenerateSpread),
        });
    }
    let scale = APD_CONSISTENCY * spread;
    Ok(AnomalyIndex {
        scores: values.iter().map(|v| (v - med).abs() / scale).collect(),
        median: med,
        apd: spread,
        warning: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStatistics {
    pub class_id: ClassId,
    pub j: f64,
    pub j_hat: f64,
    pub above_tau: bool,
    pub above_median: bool,
    pub infected: bool,
    pub p_value: Option<f64>,
}

impl ClassStatistics {
    pub fn new(class_id: ClassId, j: f64, j_hat: f64) -> Self {
        ClassStatistics {
            class_id,
            j,
            j_hat,
            above_tau: false,
            above_median: false,
            infected: false,
            p_value: None,
        }
    }
}

/// Flags classes with `J_hat > tau` and `J > median(J)`, recording both
/// conditions on each record.
pub fn detect_infected(stats: &mut [ClassStatistics], tau: f64) -> Result<BTreeSet<ClassId>> {
    if stats.len() < 3 {
        return Err(Error::TooFewClasses { got: stats.len() });
    }
    let j: Vec<f64> = stats.iter().map(|s| s.j).collect();
    let med = median(&j);
    let mut flagged = BTreeSet::new();
    for s in stats.iter_mut() {
        s.above_tau = s.j_hat > tau;
        s.above_median = s.j > med;
        s.infected = s.above_tau && s.above_median;
        if s.infected {
            flagged.insert(s.class_id.clone());
        }
    }
    Ok(flagged)
}

/// Cross-class screen over per-class J values.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub stats: Vec<ClassStatistics>,
    pub median_j: f64,
    pub apd: f64,
    pub infected: BTreeSet<ClassId>,
    pub warnings: Vec<Warning>,
}

pub fn screen_classes(per_class: &[(ClassId, f64)], tau: f64) -> Result<Detection> {
    let j: Vec<f64> = per_class.iter().map(|(_, j)| *j).collect();
    let index = anomaly_index(&j)?;
    let mut stats: Vec<ClassStatistics> = per_class
        .iter()
        .zip(&index.scores)
        .map(|((id, j), &h)| {
            let mut s = ClassStatistics::new(id.clone(), *j, h);
            s.p_value = Some(chi2_pvalue(*j, MIXTURE_DOF));
            s
        })
        .collect();
    let infected = detect_infected(&mut stats, tau)?;
    Ok(Detection {
        stats,
        median_j: index.median,
        apd: index.apd,
        infected,
        warnings: index.warning.into_iter().collect(),
    })
}

/// Per-class seed, stable across runs and independent of processing order.
pub fn class_seed(global: u64, class_id: &ClassId) -> u64 {
    // FNV-1a over the id, mixed with the global seed by splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in class_id.as_str().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ global.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
