use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use purify_core::flatten::{flattening, FlatteningReport};
use purify_core::mitigate::{emit_cleaned, write_manifest, CleanedOutput, QuarantineResult};
use purify_core::pipeline::{self, load_weights, save_weights, DetectionReport};
use purify_core::repr_store::{
    compute_clean_mean, load_dataset, load_matrix, partition_by_class, save_dataset, save_matrix, ClassId,
    LabeledDataset,
};
use purify_core::synth::{generate, SubspaceModelConfig};
use serde::Serialize;

use crate::config::{require_input, require_output, RunConfig};
use crate::{Detected, SynthArgs, UsageError};

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn create_out_dir(cfg: &RunConfig) -> anyhow::Result<std::path::PathBuf> {
    let out = require_output(&cfg.out, "--out")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn load_train(cfg: &RunConfig) -> anyhow::Result<LabeledDataset> {
    let train = require_input(&cfg.train, "--train")?;
    let labels = require_input(&cfg.labels, "--labels")?;
    load_dataset(&train, &labels, cfg.format)
        .with_context(|| format!("loading {} with labels {}", train.display(), labels.display()))
}

fn load_inputs(cfg: &RunConfig) -> anyhow::Result<(LabeledDataset, purify_core::repr_store::CleanReference)> {
    let clean_path = require_input(&cfg.clean, "--clean")?;
    let ds = load_train(cfg)?;
    let clean = load_matrix(&clean_path, cfg.format).with_context(|| format!("loading {}", clean_path.display()))?;
    Ok((ds, compute_clean_mean(&clean)))
}

fn write_mitigation(
    out: &Path,
    cfg: &RunConfig,
    quarantines: &[QuarantineResult],
    cleaned: &CleanedOutput,
) -> anyhow::Result<()> {
    write_json(&out.join("quarantine.json"), &quarantines)?;
    let manifest = out.join("manifest.csv");
    let mut w = BufWriter::new(File::create(&manifest).with_context(|| format!("writing {}", manifest.display()))?);
    write_manifest(&mut w, &cleaned.manifest)?;
    w.flush()?;
    save_dataset(out, "cleaned", &cleaned.cleaned, cfg.format)?;
    Ok(())
}

fn summarize(report: &DetectionReport) {
    let ids: Vec<&str> = report.infected.iter().map(ClassId::as_str).collect();
    println!(
        "{} of {} classes flagged{}{}",
        ids.len(),
        report.classes.len(),
        if ids.is_empty() { "" } else { ": " },
        ids.join(", ")
    );
}

fn finish(report: &DetectionReport, cfg: &RunConfig) -> anyhow::Result<()> {
    summarize(report);
    if cfg.fail_on_detect && !report.infected.is_empty() {
        return Err(Detected.into());
    }
    Ok(())
}

pub fn analyze(cfg: &RunConfig) -> anyhow::Result<()> {
    let (ds, reference) = load_inputs(cfg)?;
    let out = create_out_dir(cfg)?;
    let a = pipeline::analyze(&ds, &reference, &cfg.analysis())?;
    fs::write(out.join("report.json"), a.report.to_json()?)?;
    write_json(&out.join("timings.json"), &a.timings)?;
    write_mitigation(&out, cfg, &a.quarantines, &a.cleaned)?;
    finish(&a.report, cfg)
}

pub fn weights(cfg: &RunConfig) -> anyhow::Result<()> {
    let (ds, reference) = load_inputs(cfg)?;
    let out = create_out_dir(cfg)?;
    let w = pipeline::compute_weights(&ds, &reference, &cfg.analysis())?;
    save_weights(&out, &w, &cfg.analysis())?;
    println!("weights for {} classes written to {}", w.len(), out.display());
    Ok(())
}

fn load_weights_dir(cfg: &RunConfig) -> anyhow::Result<(Vec<pipeline::ClassWeights>, f64)> {
    let dir = require_input(&cfg.weights, "--weights")?;
    load_weights(&dir).with_context(|| format!("loading weights from {}", dir.display()))
}

pub fn detect(cfg: &RunConfig) -> anyhow::Result<()> {
    let (w, cpv) = load_weights_dir(cfg)?;
    let out = create_out_dir(cfg)?;
    let analysis = purify_core::pipeline::AnalysisConfig {
        cpv_threshold: cpv,
        ..cfg.analysis()
    };
    let report = pipeline::detect(&w, &analysis)?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    finish(&report, cfg)
}

pub fn mitigate(cfg: &RunConfig) -> anyhow::Result<()> {
    let (w, _) = load_weights_dir(cfg)?;
    let report_path = require_input(&cfg.report, "--report")?;
    let text = fs::read_to_string(&report_path).with_context(|| format!("reading {}", report_path.display()))?;
    let mut report: DetectionReport =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", report_path.display()))?;
    let ds = load_train(cfg)?;
    let out = create_out_dir(cfg)?;
    let analysis = purify_core::pipeline::AnalysisConfig {
        seed: report.seed,
        ..cfg.analysis()
    };
    let quarantines = pipeline::mitigate(&w, &mut report, &analysis)?;
    let cleaned = emit_cleaned(&ds, &quarantines)?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    write_mitigation(&out, cfg, &quarantines, &cleaned)?;
    println!(
        "{} samples quarantined from {} classes",
        cleaned.manifest.len(),
        quarantines.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct ClassFlattening {
    class_id: ClassId,
    #[serde(flatten)]
    report: FlatteningReport,
}

#[derive(Serialize)]
struct PerClassFlattening {
    k_nn: usize,
    classes: Vec<ClassFlattening>,
}

pub fn flatten(cfg: &RunConfig) -> anyhow::Result<()> {
    let train = require_input(&cfg.train, "--train")?;
    let json = if cfg.labels.is_some() {
        let ds = load_train(cfg)?;
        let mut classes = Vec::new();
        for (id, part) in partition_by_class(&ds) {
            let report = flattening(&part.matrix, cfg.k_nn, cfg.normalization).map_err(|e| e.in_class(&id))?;
            classes.push(ClassFlattening { class_id: id, report });
        }
        serde_json::to_string_pretty(&PerClassFlattening { k_nn: cfg.k_nn, classes })?
    } else {
        let x = load_matrix(&train, cfg.format).with_context(|| format!("loading {}", train.display()))?;
        serde_json::to_string_pretty(&flattening(&x, cfg.k_nn, cfg.normalization)?)?
    };
    match &cfg.out {
        Some(path) => fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| UsageError(format!("--config: cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<SubspaceModelConfig>(&text)
                .map_err(|e| UsageError(format!("--config: invalid config {}: {e}", p.display())))?
        }
        None => SubspaceModelConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.dim {
        cfg.n = v;
    }
    if let Some(v) = a.classes {
        cfg.classes = v;
    }
    if let Some(v) = a.rank {
        cfg.d = v;
    }
    if let Some(v) = a.per_class {
        cfg.m_per_class = v;
    }
    if let Some(v) = a.poison {
        cfg.m_poison = v;
    }
    if let Some(v) = a.infected {
        cfg.infected_class = Some(v);
    }
    if a.no_infected {
        cfg.infected_class = None;
        cfg.m_poison = 0;
    }
    if let Some(v) = a.noise {
        cfg.noise_sigma = v;
    }
    if let Some(v) = a.angle {
        cfg.subspace_angle = v.to_radians();
    }
    if let Some(v) = a.variance_ratio {
        cfg.variance_ratio = v;
    }
    let out = a
        .out
        .ok_or_else(|| UsageError("missing required flag --out".into()))?;
    let format = a.format.unwrap_or_default();
    let data = generate(&cfg)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    save_dataset(&out, "train", &data.dataset, format)?;
    save_matrix(out.join(format!("clean.{}", format.extension())), &data.clean, format)?;
    write_json(&out.join("truth.json"), &data.truth.summary())?;
    write_json(&out.join("synth_config.json"), &cfg)?;
    println!(
        "{} training and {} clean samples written to {}",
        data.dataset.len(),
        data.clean.nrows(),
        out.display()
    );
    Ok(())
}
