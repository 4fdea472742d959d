//! Synthetic representation sets with known structure: every class lies near
//! its own random low-rank subspace, and one class may carry extra samples
//! drawn from a second subspace tilted away from the first by a
//! controlled angle.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::class_seed;
use crate::error::{Error, Result};
use crate::repr_store::{compute_clean_mean, ClassId, CleanReference, LabeledDataset, RepresentationMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubspaceModelConfig {
    /// Ambient dimension.
    pub n: usize,
    /// Number of classes.
    pub classes: usize,
    /// Rank of each class subspace.
    pub d: usize,
    pub m_per_class: usize,
    pub infected_class: Option<usize>,
    pub m_poison: usize,
    pub noise_sigma: f64,
    /// Every principal angle between the infected class's subspace and the
    /// poison subspace, in radians.
    pub subspace_angle: f64,
    /// Variance of the poison coefficients relative to the genuine ones.
    pub variance_ratio: f64,
    pub seed: u64,
}

impl Default for SubspaceModelConfig {
    fn default() -> Self {
        SubspaceModelConfig {
            n: 64,
            classes: 10,
            d: 5,
            m_per_class: 200,
            infected_class: Some(0),
            m_poison: 100,
            noise_sigma: 0.05,
            subspace_angle: std::f64::consts::FRAC_PI_3,
            variance_ratio: 1.0,
            seed: 0,
        }
    }
}

impl SubspaceModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InfeasibleConfig(msg));
        if self.n == 0 || self.d == 0 || self.classes == 0 || self.m_per_class == 0 {
            return bad("n, d, classes and m_per_class must be positive".into());
        }
        if self.d > self.n {
            return bad(format!("subspace rank {} exceeds dimension {}", self.d, self.n));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        if !(self.variance_ratio > 0.0) || !self.variance_ratio.is_finite() {
            return bad(format!("variance_ratio {} must be positive", self.variance_ratio));
        }
        if let Some(t) = self.infected_class {
            if t >= self.classes {
                return bad(format!("infected class {t} out of range for {} classes", self.classes));
            }
            if self.m_poison > 0 {
                if 2 * self.d > self.n {
                    return bad(format!(
                        "two rank-{} subspaces at a positive angle need n >= {}, got {}",
                        self.d,
                        2 * self.d,
                        self.n
                    ));
                }
                let a = self.subspace_angle;
                if !(a > 0.0 && a <= std::f64::consts::FRAC_PI_2) {
                    return bad(format!("subspace_angle {a} outside (0, pi/2]"));
                }
            }
        }
        Ok(())
    }

    pub fn class_id(&self, c: usize) -> ClassId {
        let width = (self.classes.saturating_sub(1)).to_string().len();
        ClassId::new(format!("{c:0width$}"))
    }

    /// Held-out clean samples per class.
    pub fn clean_per_class(&self) -> usize {
        self.m_per_class.div_ceil(10).max(5)
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Dataset row indices of poisoned samples, ascending, for every class.
    pub poisoned_indices: BTreeMap<ClassId, Vec<usize>>,
    pub bases: BTreeMap<ClassId, DMatrix<f64>>,
    pub infected_class: Option<ClassId>,
    pub poison_basis: Option<DMatrix<f64>>,
    /// Between the infected class's basis and the poison basis, ascending.
    pub principal_angles: Vec<f64>,
}

impl GroundTruth {
    pub fn poisoned(&self, class_id: &ClassId) -> &[usize] {
        self.poisoned_indices.get(class_id).map_or(&[], Vec::as_slice)
    }

    pub fn summary(&self) -> GroundTruthSummary {
        GroundTruthSummary {
            infected_class: self.infected_class.clone(),
            poisoned_indices: self.poisoned_indices.clone(),
            principal_angles: self.principal_angles.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSummary {
    pub infected_class: Option<ClassId>,
    pub poisoned_indices: BTreeMap<ClassId, Vec<usize>>,
    pub principal_angles: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: LabeledDataset,
    pub clean: RepresentationMatrix,
    pub reference: CleanReference,
    pub truth: GroundTruth,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Orthonormal basis of a uniformly random `d`-dimensional subspace of R^n.
pub fn random_basis(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    loop {
        let g = gaussian(rng, n, d, 1.0);
        let qr = g.qr();
        if qr.r().diagonal().iter().all(|v| v.abs() > 1e-8) {
            return qr.q();
        }
    }
}

/// Rotates each column `b_i` toward an orthonormal complement direction
/// `u_i` by `angle` (a Givens rotation in each plane `(b_i, u_i)`), so every
/// principal angle to `basis` equals `angle`.
fn tilted_basis(rng: &mut ChaCha8Rng, basis: &DMatrix<f64>, angle: f64) -> DMatrix<f64> {
    let (n, d) = basis.shape();
    let u = loop {
        let g = gaussian(rng, n, d, 1.0);
        let g = &g - basis * (basis.transpose() * &g);
        let qr = g.qr();
        if qr.r().diagonal().iter().all(|v| v.abs() > 1e-8) {
            break qr.q();
        }
    };
    basis * angle.cos() + u * angle.sin()
}

/// Principal angles between the column spans of two orthonormal bases,
/// ascending.
pub fn principal_angles(b1: &DMatrix<f64>, b2: &DMatrix<f64>) -> Result<Vec<f64>> {
    if b1.nrows() != b2.nrows() {
        return Err(Error::DimensionMismatch { expected: b1.nrows(), found: b2.nrows() });
    }
    let s = (b1.transpose() * b2).singular_values();
    let mut angles: Vec<f64> = s.iter().map(|v| v.clamp(-1.0, 1.0).acos()).collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

struct ClassDraw {
    samples: DMatrix<f64>,
    poisoned_local: Vec<usize>,
    clean: DMatrix<f64>,
    basis: DMatrix<f64>,
    poison_basis: Option<DMatrix<f64>>,
}

/// Keeps generator streams apart from the analysis streams drawn under the
/// same user seed.
const STREAM_SALT: u64 = 0x5eed_da7a;

fn draw_class(cfg: &SubspaceModelConfig, c: usize) -> ClassDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(class_seed(cfg.seed ^ STREAM_SALT, &cfg.class_id(c)));
    let (n, d) = (cfg.n, cfg.d);
    let coef_scale = 1.0 / (d as f64).sqrt();
    let basis = random_basis(&mut rng, n, d);

    let m_poison = if cfg.infected_class == Some(c) { cfg.m_poison } else { 0 };
    let poison_basis = (m_poison > 0).then(|| tilted_basis(&mut rng, &basis, cfg.subspace_angle));

    let genuine = &basis * gaussian(&mut rng, d, cfg.m_per_class, coef_scale);
    let mut columns: Vec<(DMatrix<f64>, bool)> = vec![(genuine, false)];
    if let Some(pb) = &poison_basis {
        let poison = pb * gaussian(&mut rng, d, m_poison, coef_scale * cfg.variance_ratio.sqrt());
        columns.push((poison, true));
    }
    let total = cfg.m_per_class + m_poison;
    let mut z = DMatrix::zeros(n, total);
    let mut is_poison = Vec::with_capacity(total);
    let mut at = 0;
    for (block, flag) in &columns {
        z.columns_mut(at, block.ncols()).copy_from(block);
        is_poison.extend(std::iter::repeat_n(*flag, block.ncols()));
        at += block.ncols();
    }
    let mut order: Vec<usize> = (0..total).collect();
    if m_poison > 0 {
        order.shuffle(&mut rng);
    }
    let noise = gaussian(&mut rng, n, total, cfg.noise_sigma);
    let mut samples = DMatrix::zeros(total, n);
    let mut poisoned_local = Vec::new();
    for (row, &src) in order.iter().enumerate() {
        let col = z.column(src) + noise.column(row);
        samples.set_row(row, &col.transpose());
        if is_poison[src] {
            poisoned_local.push(row);
        }
    }

    let k = cfg.clean_per_class();
    let clean_z = &basis * gaussian(&mut rng, d, k, coef_scale);
    let clean = (clean_z + gaussian(&mut rng, n, k, cfg.noise_sigma)).transpose();

    ClassDraw {
        samples,
        poisoned_local,
        clean,
        basis,
        poison_basis,
    }
}

/// Draws a dataset from the subspace model. Rows are grouped by class in
/// ascending class order; inside the infected class genuine and poisoned
/// rows are shuffled together. Identical configurations produce
/// bit-identical output regardless of thread count.
pub fn generate(cfg: &SubspaceModelConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let draws: Vec<ClassDraw> = (0..cfg.classes).into_par_iter().map(|c| draw_class(cfg, c)).collect();

    let total: usize = draws.iter().map(|d| d.samples.nrows()).sum();
    let clean_total: usize = draws.iter().map(|d| d.clean.nrows()).sum();
    let mut x = DMatrix::zeros(total, cfg.n);
    let mut clean = DMatrix::zeros(clean_total, cfg.n);
    let mut labels = Vec::with_capacity(total);
    let mut truth = GroundTruth {
        poisoned_indices: BTreeMap::new(),
        bases: BTreeMap::new(),
        infected_class: None,
        poison_basis: None,
        principal_angles: Vec::new(),
    };
    let (mut row, mut crow) = (0, 0);
    for (c, draw) in draws.into_iter().enumerate() {
        let id = cfg.class_id(c);
        let m = draw.samples.nrows();
        x.rows_mut(row, m).copy_from(&draw.samples);
        clean.rows_mut(crow, draw.clean.nrows()).copy_from(&draw.clean);
        labels.extend(std::iter::repeat_n(id.clone(), m));
        truth
            .poisoned_indices
            .insert(id.clone(), draw.poisoned_local.iter().map(|r| r + row).collect());
        if let Some(pb) = draw.poison_basis {
            truth.principal_angles = principal_angles(&draw.basis, &pb)?;
            truth.poison_basis = Some(pb);
            truth.infected_class = Some(id.clone());
        }
        truth.bases.insert(id, draw.basis);
        row += m;
        crow += draw.clean.nrows();
    }
    let clean = RepresentationMatrix::new(clean)?;
    let reference = compute_clean_mean(&clean);
    Ok(SyntheticData {
        dataset: LabeledDataset::with_index_ids(RepresentationMatrix::new(x)?, labels)?,
        clean,
        reference,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn small() -> SubspaceModelConfig {
        SubspaceModelConfig {
            n: 12,
            classes: 3,
            d: 3,
            m_per_class: 30,
            infected_class: Some(1),
            m_poison: 10,
            noise_sigma: 0.01,
            subspace_angle: 0.7,
            variance_ratio: 1.0,
            seed: 9,
        }
    }

    #[test]
    fn shapes_and_ground_truth() {
        let cfg = small();
        let s = generate(&cfg).unwrap();
        assert_eq!(s.dataset.len(), 3 * 30 + 10);
        assert_eq!(s.clean.nrows(), 3 * 5);
        let infected = cfg.class_id(1);
        assert_eq!(s.truth.infected_class.as_ref(), Some(&infected));
        let p = s.truth.poisoned(&infected);
        assert_eq!(p.len(), 10);
        assert!(p.iter().all(|&r| s.dataset.labels()[r] == infected));
        assert!(s.truth.poisoned(&cfg.class_id(0)).is_empty());
        for a in &s.truth.principal_angles {
            assert!((a - 0.7).abs() < 1e-10);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.dataset.matrix().to_row_major(), b.dataset.matrix().to_row_major());
        assert_eq!(a.clean.to_row_major(), b.clean.to_row_major());
        let c = generate(&SubspaceModelConfig { seed: 10, ..small() }).unwrap();
        assert_ne!(a.dataset.matrix().to_row_major(), c.dataset.matrix().to_row_major());
    }

    #[test]
    fn infeasible_configs() {
        let too_wide = SubspaceModelConfig { d: 7, ..small() };
        assert!(matches!(generate(&too_wide), Err(Error::InfeasibleConfig(_))));
        let flat = SubspaceModelConfig { subspace_angle: 0.0, ..small() };
        assert!(matches!(generate(&flat), Err(Error::InfeasibleConfig(_))));
        let obtuse = SubspaceModelConfig { subspace_angle: 2.0, ..small() };
        assert!(matches!(generate(&obtuse), Err(Error::InfeasibleConfig(_))));
        let clean_only = SubspaceModelConfig { d: 7, m_poison: 0, ..small() };
        assert!(generate(&clean_only).is_ok());
    }

    #[test]
    fn clean_count_floor() {
        assert_eq!(SubspaceModelConfig { m_per_class: 20, ..small() }.clean_per_class(), 5);
        assert_eq!(SubspaceModelConfig { m_per_class: 200, ..small() }.clean_per_class(), 20);
        assert_eq!(SubspaceModelConfig { m_per_class: 201, ..small() }.clean_per_class(), 21);
    }

    #[test]
    fn padded_class_ids() {
        let cfg = SubspaceModelConfig { classes: 43, ..small() };
        assert_eq!(cfg.class_id(7).as_str(), "07");
        assert_eq!(cfg.class_id(42).as_str(), "42");
    }

    #[test]
    fn angles_identity_and_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_basis(&mut rng, 8, 3);
        for a in principal_angles(&b, &b).unwrap() {
            assert!(a.abs() < 1e-7);
        }
        let t = tilted_basis(&mut rng, &b, FRAC_PI_2);
        for a in principal_angles(&b, &t).unwrap() {
            assert!((a - FRAC_PI_2).abs() < 1e-12);
        }
    }

    #[test]
    fn poison_residual_gap() {
        let cfg = SubspaceModelConfig { noise_sigma: 0.0, ..small() };
        let s = generate(&cfg).unwrap();
        let id = cfg.class_id(1);
        let b = &s.truth.bases[&id];
        let poisoned = s.truth.poisoned(&id);
        let x = s.dataset.matrix().as_matrix();
        let labels = s.dataset.labels();
        let (mut pr, mut np, mut gr, mut ng) = (0.0, 0, 0.0, 0);
        for (r, label) in labels.iter().enumerate() {
            if *label != id {
                continue;
            }
            let v = x.row(r).transpose();
            let resid = (&v - b * (b.transpose() * &v)).norm_squared();
            if poisoned.contains(&r) {
                pr += resid;
                np += 1;
            } else {
                gr += resid;
                ng += 1;
            }
        }
        assert!(gr / ng as f64 <= 1e-24);
        let expect = 0.7f64.sin().powi(2);
        assert!((pr / np as f64 - expect).abs() < 0.5 * expect);
    }
}
