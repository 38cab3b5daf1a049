use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ugss::autoclean::{clean_dataset, compute_extent_histograms, CleaningThresholds};
use ugss::data::{self, DatasetManifest, OrganId, ScanRecord};
use ugss::impute::{impute_records, WindowedPredictor};
use ugss::metrics::evaluate_records;
use ugss::nn::checkpoint;
use ugss::phantom::{generate_records, has_injected_noise, PhantomConfig};
use ugss::pipeline::{prepare_data, run_experiment, write_results, ExperimentConfig};
use ugss::preprocess::preprocess_record;
use ugss::train::{train_student, train_teacher, write_curve_csv, Role, TrainConfig, TrainOutcome};

use crate::provenance::Provenance;
use crate::{plot, Command, Common};

/// A problem with the invocation or its inputs rather than with the run.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 2 for configuration and validation errors, 1 for anything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.chain().any(|c| {
        c.is::<UsageError>()
            || matches!(
                c.downcast_ref::<ugss::Error>(),
                Some(ugss::Error::InvalidConfig { .. } | ugss::Error::Validation { .. } | ugss::Error::Json { .. })
            )
    });
    if usage {
        2
    } else {
        1
    }
}

pub fn name(command: &Command) -> &'static str {
    match command {
        Command::Generate { .. } => "generate",
        Command::Preprocess { .. } => "preprocess",
        Command::Clean { .. } => "clean",
        Command::TrainTeacher { .. } => "train-teacher",
        Command::Impute { .. } => "impute",
        Command::TrainStudent { .. } => "train-student",
        Command::Evaluate { .. } => "evaluate",
        Command::Ablation { .. } => "ablation",
        Command::Plot { .. } => "plot",
    }
}

/// Settings of `generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub count: usize,
    /// Index, and so id, of the first phantom.
    pub start_index: u64,
    pub phantom: PhantomConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            count: 20,
            start_index: 0,
            phantom: PhantomConfig::default(),
        }
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    if !path.is_file() {
        return Err(UsageError(format!("config file {} not found", path.display())).into());
    }
    Ok(data::read_json(path)?)
}

fn config_or_default<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> anyhow::Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| read_config(p))
}

fn load_manifest(path: &Path) -> anyhow::Result<DatasetManifest> {
    if !path.exists() {
        return Err(UsageError(format!("manifest {} not found", path.display())).into());
    }
    let manifest = DatasetManifest::load(path)?;
    Ok(manifest)
}

fn load_records(path: &Path) -> anyhow::Result<Vec<ScanRecord>> {
    load_manifest(path)?
        .load_all()
        .with_context(|| format!("loading records of {}", path.display()))
}

fn train_config(common: &Common, role: Role) -> anyhow::Result<TrainConfig> {
    let mut config: TrainConfig = match &common.config {
        Some(p) => read_config(p)?,
        None => match role {
            Role::Teacher => TrainConfig::teacher(),
            Role::Student => TrainConfig::student(),
        },
    };
    config.role = role;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// Runs one command and records its provenance in `run.json`.
pub fn run(command: Command) -> anyhow::Result<()> {
    let started = Instant::now();
    let command_name = name(&command);
    let mut provenance = Provenance::start(command_name);
    let out = match &command {
        Command::Plot { results, out } => out.clone().unwrap_or_else(|| results.join("plots")),
        Command::Generate { common }
        | Command::Preprocess { common, .. }
        | Command::Clean { common, .. }
        | Command::TrainTeacher { common, .. }
        | Command::Impute { common, .. }
        | Command::TrainStudent { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Ablation { common, .. } => common.out.clone(),
    };
    let result = dispatch(command, &mut provenance);
    if out.is_dir() || result.is_ok() {
        provenance.finish(started.elapsed(), result.as_ref().err());
        provenance.write(&out.join("run.json"))?;
    }
    result
}

fn dispatch(command: Command, provenance: &mut Provenance) -> anyhow::Result<()> {
    match command {
        Command::Generate { common } => generate(&common, provenance),
        Command::Preprocess { common, manifest } => preprocess(&common, &manifest, provenance),
        Command::Clean {
            common,
            manifest,
            bin_mm,
        } => clean(&common, &manifest, bin_mm, provenance),
        Command::TrainTeacher {
            common,
            manifest,
            validation,
        } => train(&common, Role::Teacher, &manifest, validation.as_deref(), provenance),
        Command::TrainStudent {
            common,
            manifest,
            validation,
        } => train(&common, Role::Student, &manifest, validation.as_deref(), provenance),
        Command::Impute {
            common,
            manifest,
            checkpoint,
        } => impute(&common, &manifest, &checkpoint, provenance),
        Command::Evaluate {
            common,
            manifest,
            checkpoint,
        } => evaluate(&common, &manifest, &checkpoint, provenance),
        Command::Ablation {
            common,
            parallel_folds,
            cache_dir,
        } => ablation(&common, parallel_folds, cache_dir, provenance),
        Command::Plot { results, out } => {
            let out = out.unwrap_or_else(|| results.join("plots"));
            let written = plot::plot_results(&results, &out)?;
            println!("wrote {} plots to {}", written.len(), out.display());
            Ok(())
        }
    }
}

fn generate(common: &Common, provenance: &mut Provenance) -> anyhow::Result<()> {
    let mut config: GenerateConfig = config_or_default(common.config.as_ref())?;
    if let Some(seed) = common.seed {
        config.phantom.seed = seed;
    }
    provenance.set_config(&config, Some(config.phantom.seed));
    config.phantom.validate()?;
    if config.count == 0 {
        return Err(UsageError("count: must be at least 1".into()).into());
    }
    let records = generate_records(&config.phantom, config.start_index..config.start_index + config.count as u64)?;
    data::write_dataset(&records, &common.out)?;
    println!("generated {} phantoms in {}", records.len(), common.out.display());
    for organ in OrganId::ALL {
        let n = records.iter().filter(|r| r.labels.is_available(organ)).count();
        println!("  {organ}: annotated in {n}");
    }
    let noisy = records.iter().filter(|r| has_injected_noise(r)).count();
    println!("  label noise injected in {noisy}");
    Ok(())
}

fn preprocess(common: &Common, manifest: &Path, provenance: &mut Provenance) -> anyhow::Result<()> {
    provenance.set_config(&serde_json::json!({ "manifest": manifest }), None);
    let records = load_records(manifest)?;
    let processed = records.iter().map(preprocess_record).collect::<ugss::Result<Vec<_>>>()?;
    data::write_dataset(&processed, &common.out)?;
    println!("preprocessed {} records into {}", processed.len(), common.out.display());
    Ok(())
}

fn clean(common: &Common, manifest: &Path, bin_mm: f64, provenance: &mut Provenance) -> anyhow::Result<()> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| UsageError("clean needs --config with the thresholds".into()))?;
    let thresholds: CleaningThresholds = read_config(path)?;
    provenance.set_config(&thresholds, None);
    thresholds.validate()?;
    let input = load_manifest(manifest)?;
    let before = input.load_all()?;
    let (cleaned, report) = clean_dataset(&input, &thresholds, &common.out)?;
    data::write_json(&common.out.join("cleaning_report.json"), &report)?;
    write_histograms(&before, bin_mm, &common.out, "before")?;
    write_histograms(&cleaned.load_all()?, bin_mm, &common.out, "after")?;
    println!(
        "kept {}, discarded {}, modified {} ({} slices cropped, {} bowel voxels deleted), failed {}",
        report.kept,
        report.discarded,
        report.modified,
        report.slices_cropped,
        report.voxels_deleted,
        report.failures.len()
    );
    Ok(())
}

/// Histograms over the records that carry the hip landmark.
fn write_histograms(records: &[ScanRecord], bin_mm: f64, out: &Path, tag: &str) -> anyhow::Result<()> {
    let with_hips: Vec<ScanRecord> = records
        .iter()
        .filter(|r| r.labels.is_available(OrganId::Hips))
        .cloned()
        .collect();
    if with_hips.is_empty() {
        log::warn!("no records with a hips annotation; skipping {tag} histograms");
        return Ok(());
    }
    let (scan, bowel) = compute_extent_histograms(&with_hips, bin_mm)?;
    scan.write_csv(&out.join(format!("hist_scan_extent_{tag}.csv")))?;
    bowel.write_csv(&out.join(format!("hist_bowel_extent_{tag}.csv")))?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    steps: usize,
    best_step: usize,
    best_validation_dice: Option<f64>,
    head_counts: &'a [usize],
    final_loss: Option<f64>,
}

fn save_outcome(outcome: &TrainOutcome<ugss::nn::KHeadModel>, out: &Path) -> anyhow::Result<()> {
    checkpoint::save(&outcome.best, outcome.best_step as u64, &out.join("best.ckpt"))?;
    checkpoint::save(&outcome.last, outcome.losses.len() as u64, &out.join("last.ckpt"))?;
    write_curve_csv(&outcome.curve, &out.join("curve.csv"))?;
    let summary = TrainSummary {
        steps: outcome.losses.len(),
        best_step: outcome.best_step,
        best_validation_dice: outcome.best_dice,
        head_counts: &outcome.head_counts,
        final_loss: outcome.losses.last().copied(),
    };
    data::write_json(&out.join("train_summary.json"), &summary)?;
    Ok(())
}

fn train(
    common: &Common,
    role: Role,
    manifest: &Path,
    validation: Option<&Path>,
    provenance: &mut Provenance,
) -> anyhow::Result<()> {
    let config = train_config(common, role)?;
    provenance.set_config(&config, Some(config.seed));
    let records = load_records(manifest)?;
    let validation = validation.map(load_records).transpose()?.unwrap_or_default();
    let outcome = match role {
        Role::Teacher => train_teacher(&records, &validation, &config)?,
        Role::Student => train_student(&records, &validation, &config)?,
    };
    save_outcome(&outcome, &common.out)?;
    println!(
        "trained on {} records for {} steps; best step {}{}",
        records.len(),
        outcome.losses.len(),
        outcome.best_step,
        outcome
            .best_dice
            .map(|d| format!(", validation Dice {d:.4}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<ugss::nn::KHeadModel> {
    if !path.is_file() {
        return Err(UsageError(format!("checkpoint {} not found", path.display())).into());
    }
    Ok(checkpoint::load(path)?.0)
}

fn impute(common: &Common, manifests: &[PathBuf], checkpoint: &Path, provenance: &mut Provenance) -> anyhow::Result<()> {
    let config = train_config(common, Role::Student)?;
    provenance.set_config(&config.window(), None);
    let model = load_checkpoint(checkpoint)?;
    let mut records = Vec::new();
    for manifest in manifests {
        records.extend(load_records(manifest)?);
    }
    let (imputed, report) = impute_records(&model, &records, &config.window())?;
    data::write_dataset(&imputed, &common.out)?;
    data::write_json(&common.out.join("impute_report.json"), &report)?;
    println!(
        "imputed {} of {} records into {}",
        report.imputed_records,
        report.records,
        common.out.display()
    );
    Ok(())
}

fn evaluate(common: &Common, manifest: &Path, checkpoint: &Path, provenance: &mut Provenance) -> anyhow::Result<()> {
    let config = train_config(common, Role::Teacher)?;
    provenance.set_config(&config.window(), None);
    let model = load_checkpoint(checkpoint)?;
    let records = load_records(manifest)?;
    let predictor = WindowedPredictor {
        model: &model,
        window: config.window(),
    };
    let table = evaluate_records(&predictor, &records)?;
    table.write_csv(&common.out.join("metrics.csv"))?;
    table.write_aggregates_json(&common.out.join("aggregates.json"))?;
    let agg = table.aggregates();
    println!(
        "{} scans: Dice {:.4} ± {:.4}, surface Dice {:.4}, HD95 {:.2} mm",
        records.len(),
        agg.per_scan.dice.mean,
        agg.per_scan.dice.std,
        agg.per_scan.surface_dice.mean,
        agg.per_scan.hd95.mean
    );
    Ok(())
}

fn ablation(
    common: &Common,
    parallel_folds: usize,
    cache_dir: Option<PathBuf>,
    provenance: &mut Provenance,
) -> anyhow::Result<()> {
    let mut config: ExperimentConfig = config_or_default(common.config.as_ref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    provenance.set_config(&config, Some(config.seed));
    config.validate()?;
    if parallel_folds == 0 {
        return Err(UsageError("--parallel-folds must be at least 1".into()).into());
    }
    let data = prepare_data(&config)?;
    let results = run_experiment(&config, &data, parallel_folds)?;
    write_results(&results, &common.out)?;
    let cache = cache_dir.unwrap_or_else(|| common.out.join("cache"));
    for m in &results.models {
        let path = cache.join(format!("{}_fold{}.ckpt", m.label, m.fold));
        checkpoint::save(&m.outcome.best, m.outcome.best_step as u64, &path)?;
    }
    for a in &results.arms {
        match (&a.table, &a.error) {
            (Some(t), _) => {
                let s = t.aggregates().per_scan;
                println!(
                    "{:<32} Dice {:.4} ± {:.4}  SD {:.4}  HD95 {:.2}",
                    a.arm.to_string(),
                    s.dice.mean,
                    s.dice.std,
                    s.surface_dice.mean,
                    s.hd95.mean
                );
            }
            (None, e) => println!("{:<32} failed: {}", a.arm.to_string(), e.as_deref().unwrap_or("")),
        }
    }
    if results.arms.iter().all(|a| a.error.is_some()) {
        anyhow::bail!("every arm failed");
    }
    if results.is_partial() {
        eprintln!("warning: some arms failed; results are partial");
    }
    Ok(())
}
