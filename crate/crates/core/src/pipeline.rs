//! End-to-end analysis: per-class weights, cross-class detection and
//! quarantine of the flagged classes.
//!
//! Each stage is also exposed on its own so that weights can be computed
//! once, stored, and screened or mitigated later with identical results.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coherence::{optimize_weights_with, SolverConfig};
use crate::detect::{
    class_seed, fit_gaussian, fit_gmm2, likelihood_ratio, screen_classes, EmConfig, DEFAULT_TAU,
};
use crate::error::{Error, Result, Warning};
use crate::mitigate::{emit_cleaned, identify_poisoned, kmeans_1d, CleanedOutput, KmeansConfig, QuarantineResult};
use crate::repr_store::{
    decode_binary, encode_binary, partition_by_class, preprocess, ClassId, ClassPartition, CleanReference,
    LabeledDataset, RepresentationMatrix,
};
use crate::subspace::{build_basis, covariance_eigen, select_components, DEFAULT_CPV};

pub const WEIGHTS_INDEX: &str = "index.json";

/// Numeric settings of a run. Paths and thread counts belong to the caller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub cpv_threshold: f64,
    pub tau: f64,
    pub em: EmConfig,
    pub kmeans: KmeansConfig,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            cpv_threshold: DEFAULT_CPV,
            tau: DEFAULT_TAU,
            em: EmConfig::default(),
            kmeans: KmeansConfig::default(),
            seed: 0,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cpv_threshold > 0.0 && self.cpv_threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "cpv threshold must lie in (0, 1], got {}",
                self.cpv_threshold
            )));
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidArgument(format!("tau must be finite and >= 0, got {}", self.tau)));
        }
        if !(self.em.tol > 0.0) || self.em.max_iter == 0 {
            return Err(Error::InvalidArgument("EM needs tol > 0 and max_iter >= 1".into()));
        }
        if self.kmeans.max_iter == 0 {
            return Err(Error::InvalidArgument("k-means needs max_iter >= 1".into()));
        }
        Ok(())
    }
}

/// Weight-stage outcome for one class. `weights` is `None` when the class
/// could not be optimized; the reason is in `warnings`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub class_id: ClassId,
    pub m: usize,
    pub k: Option<usize>,
    pub cpv_achieved: Option<f64>,
    pub lambda_star: Option<f64>,
    /// Dataset row of each weight entry.
    pub row_map: Vec<usize>,
    #[serde(skip)]
    pub weights: Option<Vec<f64>>,
    pub warnings: Vec<Warning>,
}

fn downgrade(err: &Error) -> Option<Warning> {
    match err.root() {
        Error::DegenerateObjective { .. } => Some(Warning::DegenerateObjective),
        Error::ZeroVariance => Some(Warning::ZeroVariance),
        Error::TooFewSamples { .. } => Some(Warning::TooFewSamples),
        Error::NumericalFailure(_) => Some(Warning::NumericalFailure),
        _ => None,
    }
}

/// Preprocess, select the latent subspace, and optimize the weights of one
/// class.
pub fn class_weights(part: &ClassPartition, reference: &CleanReference, cfg: &AnalysisConfig) -> Result<ClassWeights> {
    let mut out = ClassWeights {
        class_id: part.class_id.clone(),
        m: part.matrix.nrows(),
        k: None,
        cpv_achieved: None,
        lambda_star: None,
        row_map: part.row_map.clone(),
        weights: None,
        warnings: Vec::new(),
    };
    let x = preprocess(part, reference).map_err(|e| e.in_class(&part.class_id))?;
    let attempt = (|| -> Result<()> {
        let spectrum = covariance_eigen(&x)?;
        let sel = select_components(&spectrum, cfg.cpv_threshold)?;
        let limit = x.nfeatures().min(x.nsamples().saturating_sub(1));
        let k = if sel.k > limit {
            out.warnings.push(Warning::ComponentsClamped);
            limit
        } else {
            sel.k
        };
        let total = spectrum.total_variance();
        out.k = Some(k);
        out.cpv_achieved = Some(spectrum.eigenvalues()[..k].iter().sum::<f64>() / total);
        let basis = build_basis(&spectrum, k)?;
        let w = optimize_weights_with(&x, &basis, &SolverConfig::default())?;
        if w.degenerate_top_space {
            out.warnings.push(Warning::DegenerateTopSpace);
        }
        out.lambda_star = Some(w.lambda_star);
        out.weights = Some(w.a.as_slice().to_vec());
        Ok(())
    })();
    if let Err(e) = attempt {
        match downgrade(&e) {
            Some(w) => out.warnings.push(w),
            None => return Err(e.in_class(&part.class_id)),
        }
    }
    Ok(out)
}

/// Weights for every class of the dataset, in ascending class order.
pub fn compute_weights(ds: &LabeledDataset, reference: &CleanReference, cfg: &AnalysisConfig) -> Result<Vec<ClassWeights>> {
    cfg.validate()?;
    if reference.dim() != ds.matrix().ncols() {
        return Err(Error::DimensionMismatch {
            expected: ds.matrix().ncols(),
            found: reference.dim(),
        });
    }
    let parts: Vec<ClassPartition> = partition_by_class(ds).into_values().collect();
    parts.par_iter().map(|p| class_weights(p, reference, cfg)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub class_id: ClassId,
    pub m: usize,
    pub k: Option<usize>,
    pub cpv_achieved: Option<f64>,
    pub lambda_star: Option<f64>,
    #[serde(rename = "J")]
    pub j: Option<f64>,
    #[serde(rename = "J_hat")]
    pub j_hat: Option<f64>,
    pub p_value: Option<f64>,
    pub above_tau: bool,
    pub above_median: bool,
    pub infected: bool,
    pub warnings: Vec<Warning>,
}

/// One document per run. Holds no timings, so identical inputs give
/// identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub tau: f64,
    pub cpv_threshold: f64,
    pub seed: u64,
    #[serde(rename = "median_J")]
    pub median_j: f64,
    pub apd: f64,
    pub classes: Vec<ClassRecord>,
    pub infected: Vec<ClassId>,
    pub warnings: Vec<Warning>,
}

impl DetectionReport {
    pub fn infected_set(&self) -> BTreeSet<ClassId> {
        self.infected.iter().cloned().collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Likelihood-ratio statistic of one weight vector under the class's
/// derived seed.
pub fn class_statistic(weights: &[f64], class_id: &ClassId, cfg: &AnalysisConfig) -> Result<(f64, Vec<Warning>)> {
    let em = EmConfig {
        seed: class_seed(cfg.seed, class_id),
        ..cfg.em
    };
    let null = fit_gaussian(weights)?;
    let mix = fit_gmm2(weights, &em)?;
    if mix.collapsed {
        return Ok((0.0, vec![Warning::CollapsedMixture]));
    }
    Ok((likelihood_ratio(&null, &mix), Vec::new()))
}

/// Cross-class screen over precomputed weights.
pub fn detect(weights: &[ClassWeights], cfg: &AnalysisConfig) -> Result<DetectionReport> {
    cfg.validate()?;
    type Stat = Option<(f64, Vec<Warning>)>;
    let stats: Vec<Result<Stat>> = weights
        .par_iter()
        .map(|w| match &w.weights {
            None => Ok(None),
            Some(a) => match class_statistic(a, &w.class_id, cfg) {
                Ok(s) => Ok(Some(s)),
                Err(e) => match downgrade(&e) {
                    Some(warn) => Ok(Some((f64::NAN, vec![warn]))),
                    None => Err(e.in_class(&w.class_id)),
                },
            },
        })
        .collect();

    let mut records = Vec::with_capacity(weights.len());
    let mut scored = Vec::new();
    for (w, s) in weights.iter().zip(stats) {
        let s = s?;
        let mut rec = ClassRecord {
            class_id: w.class_id.clone(),
            m: w.m,
            k: w.k,
            cpv_achieved: w.cpv_achieved,
            lambda_star: w.lambda_star,
            j: None,
            j_hat: None,
            p_value: None,
            above_tau: false,
            above_median: false,
            infected: false,
            warnings: w.warnings.clone(),
        };
        match s {
            Some((j, warns)) if j.is_finite() => {
                rec.warnings.extend(warns);
                rec.j = Some(j);
                scored.push((records.len(), w.class_id.clone(), j));
            }
            Some((_, warns)) => {
                rec.warnings.extend(warns);
                rec.warnings.push(Warning::ExcludedFromDetection);
            }
            None => rec.warnings.push(Warning::ExcludedFromDetection),
        }
        records.push(rec);
    }

    let per_class: Vec<(ClassId, f64)> = scored.iter().map(|(_, id, j)| (id.clone(), *j)).collect();
    let det = screen_classes(&per_class, cfg.tau)?;
    for ((idx, _, _), st) in scored.iter().zip(&det.stats) {
        let rec = &mut records[*idx];
        rec.j_hat = Some(st.j_hat);
        rec.p_value = st.p_value;
        rec.above_tau = st.above_tau;
        rec.above_median = st.above_median;
        rec.infected = st.infected;
    }
    Ok(DetectionReport {
        tau: cfg.tau,
        cpv_threshold: cfg.cpv_threshold,
        seed: cfg.seed,
        median_j: det.median_j,
        apd: det.apd,
        infected: det.infected.into_iter().collect(),
        classes: records,
        warnings: det.warnings,
    })
}

/// Splits the weights of every flagged class and records the quarantine.
/// Classes whose weights cannot be split get an `UnsplittableWeights`
/// warning on the report instead.
pub fn mitigate(
    weights: &[ClassWeights],
    report: &mut DetectionReport,
    cfg: &AnalysisConfig,
) -> Result<Vec<QuarantineResult>> {
    let flagged = report.infected_set();
    let by_id: BTreeMap<&ClassId, &ClassWeights> = weights.iter().map(|w| (&w.class_id, w)).collect();
    let jobs: Vec<&ClassWeights> = flagged
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::InvalidDataset(format!("flagged class {id} has no weights")))
        })
        .collect::<Result<_>>()?;
    let outcomes: Vec<Result<Option<QuarantineResult>>> = jobs
        .par_iter()
        .map(|w| {
            let a = w
                .weights
                .as_deref()
                .ok_or_else(|| Error::InvalidDataset(format!("flagged class {} has no weights", w.class_id)))?;
            match kmeans_1d(a, &cfg.kmeans) {
                Ok(assign) => identify_poisoned(&assign, a, &w.class_id, &w.row_map).map(Some),
                Err(Error::DegenerateInput) => Ok(None),
                Err(e) => Err(e.in_class(&w.class_id)),
            }
        })
        .collect();
    let mut out = Vec::new();
    for (w, o) in jobs.iter().zip(outcomes) {
        let rec = report
            .classes
            .iter_mut()
            .find(|r| r.class_id == w.class_id)
            .expect("flagged class has a record");
        match o? {
            Some(q) => {
                if q.tie_broken {
                    rec.warnings.push(Warning::TieBroken);
                }
                if q.suspicious_singleton {
                    rec.warnings.push(Warning::SuspiciousSingleton);
                }
                out.push(q);
            }
            None => rec.warnings.push(Warning::UnsplittableWeights),
        }
    }
    Ok(out)
}

/// Wall-clock seconds per stage. Kept apart from the report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub weights: f64,
    pub detect: f64,
    pub mitigate: f64,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub weights: Vec<ClassWeights>,
    pub report: DetectionReport,
    pub quarantines: Vec<QuarantineResult>,
    pub cleaned: CleanedOutput,
    pub timings: StageTimings,
}

pub fn analyze(ds: &LabeledDataset, reference: &CleanReference, cfg: &AnalysisConfig) -> Result<Analysis> {
    let t0 = Instant::now();
    let weights = compute_weights(ds, reference, cfg)?;
    let t1 = Instant::now();
    let mut report = detect(&weights, cfg)?;
    let t2 = Instant::now();
    let quarantines = mitigate(&weights, &mut report, cfg)?;
    let cleaned = emit_cleaned(ds, &quarantines)?;
    let t3 = Instant::now();
    Ok(Analysis {
        weights,
        report,
        quarantines,
        cleaned,
        timings: StageTimings {
            weights: (t1 - t0).as_secs_f64(),
            detect: (t2 - t1).as_secs_f64(),
            mitigate: (t3 - t2).as_secs_f64(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WeightsEntry {
    #[serde(flatten)]
    meta: ClassWeights,
    file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WeightsIndex {
    cpv_threshold: f64,
    classes: Vec<WeightsEntry>,
}

/// Writes `index.json` plus one `m x 1` binary matrix per optimized class.
pub fn save_weights(dir: &Path, weights: &[ClassWeights], cfg: &AnalysisConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(weights.len());
    for (i, w) in weights.iter().enumerate() {
        let file = match &w.weights {
            Some(a) => {
                let name = format!("class_{i:04}.bin");
                let matrix = RepresentationMatrix::new(DMatrix::from_column_slice(a.len(), 1, a))?;
                fs::write(dir.join(&name), encode_binary(&matrix))?;
                Some(name)
            }
            None => None,
        };
        entries.push(WeightsEntry { meta: w.clone(), file });
    }
    let index = WeightsIndex {
        cpv_threshold: cfg.cpv_threshold,
        classes: entries,
    };
    fs::write(dir.join(WEIGHTS_INDEX), serde_json::to_string_pretty(&index)? + "\n")?;
    Ok(())
}

/// Reads a directory written by [`save_weights`]. Returns the weights and
/// the CPV threshold they were computed with.
pub fn load_weights(dir: &Path) -> Result<(Vec<ClassWeights>, f64)> {
    let text = fs::read_to_string(dir.join(WEIGHTS_INDEX))?;
    let index: WeightsIndex = serde_json::from_str(&text)?;
    let mut out = Vec::with_capacity(index.classes.len());
    for e in index.classes {
        let mut w = e.meta;
        if let Some(name) = e.file {
            let matrix = decode_binary(&fs::read(dir.join(&name))?)?;
            if matrix.ncols() != 1 || matrix.nrows() != w.row_map.len() {
                return Err(Error::MalformedFile(format!(
                    "{name}: expected {} x 1 weights, found {} x {}",
                    w.row_map.len(),
                    matrix.nrows(),
                    matrix.ncols()
                )));
            }
            w.weights = Some(matrix.to_row_major());
        }
        out.push(w);
    }
    Ok((out, index.cpv_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SubspaceModelConfig};

    fn small(seed: u64) -> SubspaceModelConfig {
        SubspaceModelConfig {
            n: 24,
            classes: 5,
            d: 3,
            m_per_class: 60,
            infected_class: Some(2),
            m_poison: 30,
            noise_sigma: 0.02,
            subspace_angle: 1.2,
            variance_ratio: 1.0,
            seed,
        }
    }

    #[test]
    fn report_has_one_record_per_class() {
        let s = generate(&small(1)).unwrap();
        let a = analyze(&s.dataset, &s.reference, &AnalysisConfig::default()).unwrap();
        assert_eq!(a.report.classes.len(), 5);
        let ids: Vec<&str> = a.report.classes.iter().map(|r| r.class_id.as_str()).collect();
        assert_eq!(ids, vec!["0", "1", "2", "3", "4"]);
        for r in &a.report.classes {
            assert_eq!(r.infected, a.report.infected.contains(&r.class_id));
            assert!(r.j.unwrap() >= 0.0);
        }
        assert_eq!(a.cleaned.cleaned.len() + a.cleaned.manifest.len(), s.dataset.len());
    }

    #[test]
    fn weights_roundtrip_preserves_detection() {
        let s = generate(&small(2)).unwrap();
        let cfg = AnalysisConfig::default();
        let w = compute_weights(&s.dataset, &s.reference, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_weights(dir.path(), &w, &cfg).unwrap();
        let (back, cpv) = load_weights(dir.path()).unwrap();
        assert_eq!(cpv, cfg.cpv_threshold);
        assert_eq!(back, w);
        assert_eq!(detect(&back, &cfg).unwrap(), detect(&w, &cfg).unwrap());
    }

    #[test]
    fn degenerate_class_downgrades() {
        let s = generate(&SubspaceModelConfig { infected_class: None, ..small(3) }).unwrap();
        let ds = &s.dataset;
        // One class made of two samples: optimizable only with k = 1, which
        // leaves nothing, so the class is excluded with a warning.
        let mut rows: Vec<usize> = (0..ds.len()).filter(|&r| ds.labels()[r].as_str() != "4").collect();
        let four: Vec<usize> = (0..ds.len()).filter(|&r| ds.labels()[r].as_str() == "4").collect();
        rows.extend(&four[..2]);
        let sub = ds.subset(&rows).unwrap();
        let a = analyze(&sub, &s.reference, &AnalysisConfig::default()).unwrap();
        let rec = a.report.classes.iter().find(|r| r.class_id.as_str() == "4").unwrap();
        assert!(rec.j.is_none());
        assert!(rec.warnings.contains(&Warning::ExcludedFromDetection));
        assert!(!rec.infected);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let s = generate(&small(4)).unwrap();
        let wrong = CleanReference::zeros(3);
        assert!(matches!(
            compute_weights(&s.dataset, &wrong, &AnalysisConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
