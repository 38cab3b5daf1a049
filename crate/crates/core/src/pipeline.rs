//! Ablation experiments: phantom data, cleaning, per-fold training of every
//! arm, test-set evaluation and the result tables.
//!
//! All arms of one fold share the fold's records and seed. Models needed by
//! several arms (a teacher imputing for two students, say) are trained once
//! per fold.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::augment::Tier;
use crate::autoclean::{clean_records, compute_extent_histograms, CleaningReport, CleaningThresholds, ExtentHistogram};
use crate::data::{self, OrganId, ScanRecord};
use crate::error::{Error, Result};
use crate::impute::{impute_records, ImputeReport, WindowedPredictor};
use crate::metrics::{evaluate_records, wilcoxon_signed_rank, MetricsTable, Summary};
use crate::nn::KHeadModel;
use crate::phantom::{generate_records, PerOrgan, PhantomConfig, CLINICAL_AVAILABILITY};
use crate::preprocess::preprocess_record;
use crate::train::{make_folds, train_student, train_teacher, write_curve_csv, FoldPlan, Role, TrainConfig, TrainOutcome};

const SALT_TEST: u64 = 0x7E57;

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    /// Single-head network on the uncleaned fully annotated set.
    BaselineFull,
    /// Single-head network on the cleaned fully annotated set.
    BaselineClean,
    BasicTeacher,
    BasicStudent,
    RobustTeacher,
    BasicTeacherRobustStudent,
    RobustTeacherRobustStudent,
    /// Robust student whose labels were imputed by the previous iteration's
    /// student; iteration 1 is `RobustTeacherRobustStudent`.
    Iteration(usize),
}

impl Arm {
    pub fn all_default() -> Vec<Arm> {
        vec![
            Arm::BaselineFull,
            Arm::BaselineClean,
            Arm::BasicTeacher,
            Arm::BasicStudent,
            Arm::RobustTeacher,
            Arm::BasicTeacherRobustStudent,
            Arm::RobustTeacherRobustStudent,
            Arm::Iteration(2),
            Arm::Iteration(3),
        ]
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::BaselineFull => f.write_str("baseline_full"),
            Arm::BaselineClean => f.write_str("baseline_clean"),
            Arm::BasicTeacher => f.write_str("basic_teacher"),
            Arm::BasicStudent => f.write_str("basic_student"),
            Arm::RobustTeacher => f.write_str("robust_teacher"),
            Arm::BasicTeacherRobustStudent => f.write_str("basic_teacher+robust_student"),
            Arm::RobustTeacherRobustStudent => f.write_str("robust_teacher+robust_student"),
            Arm::Iteration(j) => write!(f, "iteration_{j}"),
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let arm = match s {
            "baseline_full" => Arm::BaselineFull,
            "baseline_clean" => Arm::BaselineClean,
            "basic_teacher" => Arm::BasicTeacher,
            "basic_student" => Arm::BasicStudent,
            "robust_teacher" => Arm::RobustTeacher,
            "basic_teacher+robust_student" => Arm::BasicTeacherRobustStudent,
            "robust_teacher+robust_student" => Arm::RobustTeacherRobustStudent,
            other => {
                let j = other
                    .strip_prefix("iteration_")
                    .and_then(|j| j.parse::<usize>().ok())
                    .filter(|&j| j >= 2)
                    .ok_or_else(|| Error::config("arms", format!("unknown arm `{other}`")))?;
                Arm::Iteration(j)
            }
        };
        Ok(arm)
    }
}

impl Serialize for Arm {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Arm {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything an ablation run needs. The experiment seed replaces the seeds
/// nested in the phantom and training sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Label noise and geometry for the training data; its availability
    /// probabilities are ignored (the fully annotated set has every organ).
    pub phantom: PhantomConfig,
    pub partial_availability: PerOrgan<f64>,
    pub n_full: usize,
    pub n_partial: usize,
    pub n_test: usize,
    pub folds: usize,
    /// Run only the first this-many folds.
    pub run_folds: Option<usize>,
    /// Cleaning of the fully annotated set; `None` derives thresholds from
    /// the phantom geometry.
    pub thresholds: Option<CleaningThresholds>,
    pub histogram_bin_mm: f64,
    /// Teacher and baseline schedule; the arm decides the augmentation tier
    /// and the number of heads of the baselines.
    pub teacher: TrainConfig,
    /// Student schedule; the arm decides the augmentation tier.
    pub student: TrainConfig,
    pub arms: Vec<Arm>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            phantom: PhantomConfig::default(),
            partial_availability: CLINICAL_AVAILABILITY,
            n_full: 20,
            n_partial: 100,
            n_test: 20,
            folds: 5,
            run_folds: None,
            thresholds: None,
            histogram_bin_mm: 2.5,
            teacher: TrainConfig::teacher(),
            student: TrainConfig::student(),
            arms: Arm::all_default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        PhantomConfig {
            availability_probs: self.partial_availability,
            ..self.phantom.clone()
        }
        .validate()
        .map_err(|_| Error::config("partial_availability", "probabilities must lie in [0, 1]"))?;
        self.teacher.validate()?;
        self.student.validate()?;
        if self.folds < 2 {
            return Err(Error::config("folds", "need at least 2 folds"));
        }
        if self.n_full < self.folds {
            return Err(Error::config("n_full", format!("{} records cannot fill {} folds", self.n_full, self.folds)));
        }
        if self.n_test == 0 {
            return Err(Error::config("n_test", "need at least one test record"));
        }
        if let Some(r) = self.run_folds {
            if r == 0 || r > self.folds {
                return Err(Error::config("run_folds", format!("must be in 1..={}", self.folds)));
            }
        }
        if let Some(t) = &self.thresholds {
            t.validate()?;
        }
        if !(self.histogram_bin_mm > 0.0) {
            return Err(Error::config("histogram_bin_mm", "must be positive"));
        }
        if self.arms.is_empty() {
            return Err(Error::config("arms", "no arms to run"));
        }
        for (i, a) in self.arms.iter().enumerate() {
            if self.arms[..i].contains(a) {
                return Err(Error::config("arms", format!("`{a}` listed twice")));
            }
        }
        Ok(())
    }

    pub fn folds_to_run(&self) -> usize {
        self.run_folds.unwrap_or(self.folds)
    }

    pub fn thresholds(&self) -> CleaningThresholds {
        self.thresholds.unwrap_or_else(|| CleaningThresholds::for_phantoms(&self.phantom))
    }

    fn full_phantoms(&self) -> PhantomConfig {
        PhantomConfig {
            seed: self.seed,
            availability_probs: PerOrgan::splat(1.0),
            ..self.phantom.clone()
        }
    }

    fn partial_phantoms(&self) -> PhantomConfig {
        PhantomConfig {
            seed: self.seed,
            availability_probs: self.partial_availability,
            ..self.phantom.clone()
        }
    }

    fn test_phantoms(&self) -> PhantomConfig {
        PhantomConfig {
            noise_sigma: self.phantom.noise_sigma,
            spacing_mm: self.phantom.spacing_mm,
            ..PhantomConfig::clean(self.phantom.shape, self.seed ^ SALT_TEST)
        }
    }
}

/// Preprocessed records of one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    /// Fully annotated set as generated, label noise included.
    pub full: Vec<ScanRecord>,
    /// `full` after cleaning; discarded scans are missing.
    pub clean: Vec<ScanRecord>,
    pub cleaning: CleaningReport,
    pub partial: Vec<ScanRecord>,
    /// Noise-free labels, every organ available.
    pub test: Vec<ScanRecord>,
}

fn preprocess_all(records: Vec<ScanRecord>) -> Result<Vec<ScanRecord>> {
    records.iter().map(preprocess_record).collect()
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    config.validate()?;
    let n_full = config.n_full as u64;
    let n_partial = config.n_partial as u64;
    let full = preprocess_all(generate_records(&config.full_phantoms(), 0..n_full)?)?;
    let partial = preprocess_all(generate_records(&config.partial_phantoms(), n_full..n_full + n_partial)?)?;
    let test = preprocess_all(generate_records(&config.test_phantoms(), 0..config.n_test as u64)?)?;
    let (clean, cleaning) = clean_records(&full, &config.thresholds())?;
    Ok(ExperimentData {
        full,
        clean,
        cleaning,
        partial,
        test,
    })
}

/// Which model an arm evaluates, and what it is trained from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum ModelKey {
    Baseline { cleaned: bool },
    Teacher(Tier),
    /// Student of the given tier imputed by `imputer`.
    Student { imputer: &'static ModelKey, tier: Tier },
}

const BASIC_TEACHER: ModelKey = ModelKey::Teacher(Tier::Basic);
const ROBUST_TEACHER: ModelKey = ModelKey::Teacher(Tier::Additional);

/// Iterations are identified by their depth in the robust chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Node {
    Key(ModelKey),
    Iteration(usize),
}

impl Node {
    fn of(arm: Arm) -> Node {
        match arm {
            Arm::BaselineFull => Node::Key(ModelKey::Baseline { cleaned: false }),
            Arm::BaselineClean => Node::Key(ModelKey::Baseline { cleaned: true }),
            Arm::BasicTeacher => Node::Key(BASIC_TEACHER),
            Arm::RobustTeacher => Node::Key(ROBUST_TEACHER),
            Arm::BasicStudent => Node::Key(ModelKey::Student {
                imputer: &BASIC_TEACHER,
                tier: Tier::Basic,
            }),
            Arm::BasicTeacherRobustStudent => Node::Key(ModelKey::Student {
                imputer: &BASIC_TEACHER,
                tier: Tier::Additional,
            }),
            Arm::RobustTeacherRobustStudent => Node::Iteration(1),
            Arm::Iteration(j) => Node::Iteration(j),
        }
    }

    fn label(&self) -> String {
        match self {
            Node::Key(ModelKey::Baseline { cleaned: false }) => "baseline_full".into(),
            Node::Key(ModelKey::Baseline { cleaned: true }) => "baseline_clean".into(),
            Node::Key(ModelKey::Teacher(Tier::Basic)) => "basic_teacher".into(),
            Node::Key(ModelKey::Teacher(Tier::Additional)) => "robust_teacher".into(),
            Node::Key(ModelKey::Student {
                imputer: ModelKey::Teacher(Tier::Basic),
                tier: Tier::Basic,
            }) => "basic_student".into(),
            Node::Key(ModelKey::Student { imputer, tier }) => {
                let t = match imputer {
                    ModelKey::Teacher(Tier::Basic) => "basic_teacher",
                    _ => "robust_teacher",
                };
                let s = match tier {
                    Tier::Basic => "basic_student",
                    Tier::Additional => "robust_student",
                };
                format!("{t}+{s}")
            }
            Node::Iteration(j) => format!("iteration_{j}"),
        }
    }
}

/// Records and configuration of one fold.
struct FoldJob<'a> {
    fold: usize,
    noisy_train: Vec<ScanRecord>,
    noisy_validation: Vec<ScanRecord>,
    clean_train: Vec<ScanRecord>,
    clean_validation: Vec<ScanRecord>,
    partial: &'a [ScanRecord],
    test: &'a [ScanRecord],
    teacher: TrainConfig,
    student: TrainConfig,
}

/// A model trained for one fold, with its training curve.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub label: String,
    pub fold: usize,
    pub outcome: TrainOutcome<KHeadModel>,
    /// Set for students.
    pub imputation: Option<ImputeReport>,
}

type Trained = std::result::Result<TrainedModel, String>;

struct FoldRun<'a> {
    job: FoldJob<'a>,
    models: BTreeMap<Node, Trained>,
}

fn with_tier(config: &TrainConfig, tier: Tier) -> TrainConfig {
    let mut c = *config;
    c.augment.tier = tier;
    c
}

fn zero_uncertainty(records: &[ScanRecord]) -> Vec<ScanRecord> {
    records
        .iter()
        .map(|r| ScanRecord {
            uncertainty: Some(Array3::zeros(r.shape())),
            ..r.clone()
        })
        .collect()
}

impl<'a> FoldRun<'a> {
    fn model(&mut self, node: Node) -> Trained {
        if let Some(m) = self.models.get(&node) {
            return m.clone();
        }
        let trained = self.train(node);
        self.models.insert(node, trained.clone());
        trained
    }

    fn student_from(&mut self, imputer: Node, tier: Tier, label: String) -> Trained {
        let imputer = self.model(imputer).map_err(|e| format!("imputer failed: {e}"))?;
        let job = &self.job;
        let config = with_tier(&job.student, tier);
        let run = || -> Result<TrainedModel> {
            let (imputed, report) = impute_records(&imputer.outcome.best, job.partial, &config.window())?;
            let mut training = zero_uncertainty(&job.clean_train);
            training.extend(imputed);
            let outcome = train_student(&training, &job.clean_validation, &config)?;
            Ok(TrainedModel {
                label,
                fold: job.fold,
                outcome,
                imputation: Some(report),
            })
        };
        run().map_err(|e| e.to_string())
    }

    fn train(&mut self, node: Node) -> Trained {
        let label = node.label();
        match node {
            Node::Key(ModelKey::Baseline { cleaned }) => {
                let job = &self.job;
                let mut config = with_tier(&job.teacher, Tier::Basic);
                config.model.k = 1;
                let (train, validation) = if cleaned {
                    (&job.clean_train, &job.clean_validation)
                } else {
                    (&job.noisy_train, &job.noisy_validation)
                };
                self.teacher_model(train, validation, &config, label)
            }
            Node::Key(ModelKey::Teacher(tier)) => {
                let job = &self.job;
                let config = with_tier(&job.teacher, tier);
                self.teacher_model(&job.clean_train, &job.clean_validation, &config, label)
            }
            Node::Key(ModelKey::Student { imputer, tier }) => self.student_from(Node::Key(*imputer), tier, label),
            Node::Iteration(1) => self.student_from(Node::Key(ROBUST_TEACHER), Tier::Additional, label),
            Node::Iteration(j) => self.student_from(Node::Iteration(j - 1), Tier::Additional, label),
        }
    }

    fn teacher_model(&self, train: &[ScanRecord], validation: &[ScanRecord], config: &TrainConfig, label: String) -> Trained {
        train_teacher(train, validation, config)
            .map(|outcome| TrainedModel {
                label,
                fold: self.job.fold,
                outcome,
                imputation: None,
            })
            .map_err(|e| e.to_string())
    }

    fn evaluate(&mut self, arm: Arm) -> std::result::Result<MetricsTable, String> {
        let trained = self.model(Node::of(arm))?;
        let predictor = WindowedPredictor {
            model: &trained.outcome.best,
            window: self.job.student.window(),
        };
        let mut table = evaluate_records(&predictor, self.job.test).map_err(|e| e.to_string())?;
        for row in &mut table.rows {
            row.scan_id = format!("fold{}/{}", self.job.fold, row.scan_id);
        }
        Ok(table)
    }
}

struct FoldOutput {
    tables: Vec<std::result::Result<MetricsTable, String>>,
    models: Vec<TrainedModel>,
}

fn run_fold(job: FoldJob<'_>, arms: &[Arm]) -> FoldOutput {
    log::info!("fold {}: {} training records", job.fold, job.clean_train.len());
    let mut run = FoldRun {
        job,
        models: BTreeMap::new(),
    };
    let tables = arms
        .iter()
        .map(|&arm| {
            log::info!("fold {}: arm {arm}", run.job.fold);
            run.evaluate(arm)
        })
        .collect();
    let models = run.models.into_values().filter_map(|m| m.ok()).collect();
    FoldOutput { tables, models }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    /// Rows of every fold, scan ids prefixed by the fold.
    pub table: Option<MetricsTable>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResults {
    pub arms: Vec<ArmResult>,
    pub cleaning: CleaningReport,
    pub plan: FoldPlan,
    pub folds_run: usize,
    /// Extent histograms of the fully annotated set: (scan, bowel bag)
    /// before and after cleaning.
    pub histograms_before: (ExtentHistogram, ExtentHistogram),
    pub histograms_after: Option<(ExtentHistogram, ExtentHistogram)>,
    pub models: Vec<TrainedModel>,
}

impl ExperimentResults {
    /// True when some arm failed.
    pub fn is_partial(&self) -> bool {
        self.arms.iter().any(|a| a.error.is_some())
    }

    pub fn arm(&self, arm: Arm) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

fn by_ids(records: &[ScanRecord], ids: &[String]) -> Vec<ScanRecord> {
    records.iter().filter(|r| ids.contains(&r.id)).cloned().collect()
}

/// Runs every configured arm on every fold. Up to `parallel_folds` folds
/// train concurrently; the results do not depend on it.
pub fn run_experiment(config: &ExperimentConfig, data: &ExperimentData, parallel_folds: usize) -> Result<ExperimentResults> {
    config.validate()?;
    let ids: Vec<String> = data.full.iter().map(|r| r.id.clone()).collect();
    let plan = make_folds(&ids, config.folds, config.seed)?;
    let folds_run = config.folds_to_run();
    let jobs: Vec<FoldJob<'_>> = plan.folds[..folds_run]
        .iter()
        .enumerate()
        .map(|(fold, f)| {
            let seed = config.seed.wrapping_add(fold as u64);
            FoldJob {
                fold,
                noisy_train: by_ids(&data.full, &f.train),
                noisy_validation: by_ids(&data.full, &f.validation),
                clean_train: by_ids(&data.clean, &f.train),
                clean_validation: by_ids(&data.clean, &f.validation),
                partial: &data.partial,
                test: &data.test,
                teacher: TrainConfig {
                    role: Role::Teacher,
                    seed,
                    ..config.teacher
                },
                student: TrainConfig {
                    role: Role::Student,
                    seed,
                    ..config.student
                },
            }
        })
        .collect();

    let mut outputs: Vec<FoldOutput> = Vec::with_capacity(folds_run);
    let mut jobs = jobs.into_iter().peekable();
    let width = parallel_folds.max(1);
    while jobs.peek().is_some() {
        let batch: Vec<FoldJob<'_>> = jobs.by_ref().take(width).collect();
        if batch.len() == 1 {
            outputs.extend(batch.into_iter().map(|j| run_fold(j, &config.arms)));
            continue;
        }
        let done = std::thread::scope(|s| {
            let handles: Vec<_> = batch.into_iter().map(|j| s.spawn(|| run_fold(j, &config.arms))).collect();
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| Error::validation("fold", "worker thread panicked")))
                .collect::<Result<Vec<_>>>()
        })?;
        outputs.extend(done);
    }

    let arms = config
        .arms
        .iter()
        .enumerate()
        .map(|(i, &arm)| {
            let mut table = MetricsTable::default();
            for (fold, out) in outputs.iter().enumerate() {
                match &out.tables[i] {
                    Ok(t) => table.rows.extend(t.rows.iter().cloned()),
                    Err(e) => {
                        return ArmResult {
                            arm,
                            table: None,
                            error: Some(format!("fold {fold}: {e}")),
                        }
                    }
                }
            }
            ArmResult {
                arm,
                table: Some(table),
                error: None,
            }
        })
        .collect();

    let histograms_before = compute_extent_histograms(&data.full, config.histogram_bin_mm)?;
    let histograms_after = if data.clean.is_empty() {
        None
    } else {
        Some(compute_extent_histograms(&data.clean, config.histogram_bin_mm)?)
    };
    Ok(ExperimentResults {
        arms,
        cleaning: data.cleaning.clone(),
        plan,
        folds_run,
        histograms_before,
        histograms_after,
        models: outputs.into_iter().flat_map(|o| o.models).collect(),
    })
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let res = w.write_record(header).and_then(|_| rows.iter().try_for_each(|r| w.write_record(r)));
    res.map_err(|e| Error::validation("csv", e.to_string()))?;
    w.into_inner().map_err(|e| Error::validation("csv", e.to_string()))
}

fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        x.to_string()
    }
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Per-scan-mean table: one row per arm, mean and std over scans.
pub fn table1_csv(results: &ExperimentResults) -> Result<Vec<u8>> {
    let header = strings(&[
        "arm",
        "status",
        "scans",
        "dice_mean",
        "dice_std",
        "surface_dice_mean",
        "surface_dice_std",
        "hd95_mean",
        "hd95_std",
        "hd95_undefined",
    ]);
    let rows: Vec<Vec<String>> = results
        .arms
        .iter()
        .map(|a| match &a.table {
            Some(t) => {
                let s = t.aggregates().per_scan;
                vec![
                    a.arm.to_string(),
                    "ok".into(),
                    s.dice.n.to_string(),
                    num(s.dice.mean),
                    num(s.dice.std),
                    num(s.surface_dice.mean),
                    num(s.surface_dice.std),
                    num(s.hd95.mean),
                    num(s.hd95.std),
                    s.hd95.undefined.to_string(),
                ]
            }
            None => {
                let mut row = vec![a.arm.to_string(), "failed".into()];
                row.resize(header.len(), String::new());
                row
            }
        })
        .collect();
    csv_bytes(&header, &rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AppendixMetric {
    Dice,
    SurfaceDice,
    Hd95,
}

impl AppendixMetric {
    pub const ALL: [AppendixMetric; 3] = [AppendixMetric::Dice, AppendixMetric::SurfaceDice, AppendixMetric::Hd95];

    pub fn file_name(self) -> &'static str {
        match self {
            AppendixMetric::Dice => "appendix_dice.csv",
            AppendixMetric::SurfaceDice => "appendix_sd.csv",
            AppendixMetric::Hd95 => "appendix_hd.csv",
        }
    }
}

/// Per-organ table of one metric: mean and std over scans of each organ.
pub fn appendix_csv(results: &ExperimentResults, metric: AppendixMetric) -> Result<Vec<u8>> {
    let mut header = strings(&["arm", "status"]);
    for o in OrganId::ALL {
        header.push(format!("{}_mean", o.name()));
        header.push(format!("{}_std", o.name()));
    }
    let rows = results
        .arms
        .iter()
        .map(|a| {
            let mut row = vec![a.arm.to_string()];
            match &a.table {
                Some(t) => {
                    row.push("ok".into());
                    let agg = t.aggregates();
                    for o in OrganId::ALL {
                        let m = &agg.per_organ[o.name()];
                        let s: Summary = match metric {
                            AppendixMetric::Dice => m.dice,
                            AppendixMetric::SurfaceDice => m.surface_dice,
                            AppendixMetric::Hd95 => m.hd95,
                        };
                        row.push(num(s.mean));
                        row.push(num(s.std));
                    }
                }
                None => {
                    row.push("failed".into());
                    row.resize(header.len(), String::new());
                }
            }
            row
        })
        .collect::<Vec<_>>();
    csv_bytes(&header, &rows)
}

/// Paired signed-rank tests on per-scan mean Dice between every two arms
/// that completed.
pub fn wilcoxon_csv(results: &ExperimentResults) -> Result<Vec<u8>> {
    let header = strings(&["arm_a", "arm_b", "metric", "n", "statistic", "p_value", "method", "note"]);
    let done: Vec<(Arm, Vec<f64>)> = results
        .arms
        .iter()
        .filter_map(|a| a.table.as_ref().map(|t| (a.arm, t.per_scan_dice())))
        .collect();
    let mut rows = Vec::new();
    for i in 0..done.len() {
        for j in i + 1..done.len() {
            let (a, x) = &done[i];
            let (b, y) = &done[j];
            let mut row = vec![a.to_string(), b.to_string(), "dice".into()];
            match wilcoxon_signed_rank(x, y) {
                Ok(w) => row.extend([
                    w.n.to_string(),
                    w.statistic.to_string(),
                    w.p_value.to_string(),
                    format!("{:?}", w.method).to_lowercase(),
                    String::new(),
                ]),
                Err(e) => row.extend([String::new(), String::new(), String::new(), String::new(), e.to_string()]),
            }
            rows.push(row);
        }
    }
    csv_bytes(&header, &rows)
}

#[derive(Serialize)]
struct ArmStatus<'a> {
    arm: Arm,
    status: &'static str,
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    partial: bool,
    folds: usize,
    folds_run: usize,
    arms: Vec<ArmStatus<'a>>,
}

/// Writes the result tables, per-arm metrics, training curves, cleaning
/// report and extent histograms under `dir`.
pub fn write_results(results: &ExperimentResults, dir: &Path) -> Result<()> {
    data::write_atomic(&dir.join("table1.csv"), &table1_csv(results)?)?;
    for m in AppendixMetric::ALL {
        data::write_atomic(&dir.join(m.file_name()), &appendix_csv(results, m)?)?;
    }
    data::write_atomic(&dir.join("wilcoxon.csv"), &wilcoxon_csv(results)?)?;
    for a in &results.arms {
        if let Some(t) = &a.table {
            t.write_csv(&dir.join("metrics").join(format!("{}.csv", a.arm)))?;
            t.write_aggregates_json(&dir.join("metrics").join(format!("{}.json", a.arm)))?;
        }
    }
    for m in &results.models {
        write_curve_csv(&m.outcome.curve, &dir.join("curves").join(format!("{}_fold{}.csv", m.label, m.fold)))?;
    }
    data::write_json(&dir.join("cleaning_report.json"), &results.cleaning)?;
    let (scan, bowel) = &results.histograms_before;
    scan.write_csv(&dir.join("hist_scan_extent_before.csv"))?;
    bowel.write_csv(&dir.join("hist_bowel_extent_before.csv"))?;
    if let Some((scan, bowel)) = &results.histograms_after {
        scan.write_csv(&dir.join("hist_scan_extent_after.csv"))?;
        bowel.write_csv(&dir.join("hist_bowel_extent_after.csv"))?;
    }
    let summary = RunSummary {
        partial: results.is_partial(),
        folds: results.plan.k,
        folds_run: results.folds_run,
        arms: results
            .arms
            .iter()
            .map(|a| ArmStatus {
                arm: a.arm,
                status: if a.error.is_some() { "failed" } else { "ok" },
                error: a.error.as_deref(),
            })
            .collect(),
    };
    data::write_json(&dir.join("summary.json"), &summary)
}

/// Mean over test scans of one organ's Dice.
pub fn organ_dice(result: &ArmResult, organ: OrganId) -> Option<f64> {
    let t = result.table.as_ref()?;
    let rows: Vec<f64> = t.organ_rows(organ).map(|r| r.dice).collect();
    (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Mean over test scans of the per-scan mean Dice of one arm.
pub fn mean_dice(result: &ArmResult) -> Option<f64> {
    let d = result.table.as_ref()?.per_scan_dice();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentConfig;
    use crate::nn::ModelConfig;

    pub(crate) fn tiny_experiment() -> ExperimentConfig {
        let train = TrainConfig {
            epochs: 1,
            patch_depth: 8,
            window_overlap: 4,
            augment: AugmentConfig::default(),
            model: ModelConfig {
                k: 2,
                levels: 1,
                base_channels: 2,
                num_classes: 5,
                head_depth: 1,
            },
            ..TrainConfig::default()
        };
        ExperimentConfig {
            phantom: PhantomConfig {
                shape: [24, 16, 16],
                ..PhantomConfig::default()
            },
            n_full: 4,
            n_partial: 3,
            n_test: 2,
            folds: 2,
            run_folds: Some(1),
            teacher: train,
            student: TrainConfig {
                role: Role::Student,
                ..train
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn arm_names_round_trip() {
        let mut arms = Arm::all_default();
        arms.push(Arm::Iteration(7));
        for a in arms {
            assert_eq!(a.to_string().parse::<Arm>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(serde_json::from_str::<Arm>(&json).unwrap(), a);
        }
        assert!("iteration_1".parse::<Arm>().is_err());
        assert!("teacher".parse::<Arm>().is_err());
    }

    #[test]
    fn node_labels_match_arm_names() {
        for a in Arm::all_default() {
            let label = Node::of(a).label();
            let expected = match a {
                Arm::RobustTeacherRobustStudent => "iteration_1".to_string(),
                other => other.to_string(),
            };
            assert_eq!(label, expected);
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = tiny_experiment();
        c.validate().unwrap();
        c.arms = vec![Arm::BasicTeacher, Arm::BasicTeacher];
        assert!(c.validate().unwrap_err().to_string().contains("arms"));
        let mut c = tiny_experiment();
        c.n_full = 1;
        assert!(c.validate().unwrap_err().to_string().contains("n_full"));
        let mut c = tiny_experiment();
        c.run_folds = Some(3);
        assert!(c.validate().unwrap_err().to_string().contains("run_folds"));
        let mut c = tiny_experiment();
        c.partial_availability.bladder = 1.5;
        assert!(c.validate().unwrap_err().to_string().contains("partial_availability"));
    }

    #[test]
    fn data_sets_have_the_configured_annotations() {
        let c = tiny_experiment();
        let d = prepare_data(&c).unwrap();
        assert_eq!((d.full.len(), d.partial.len(), d.test.len()), (4, 3, 2));
        assert!(d.full.iter().chain(&d.test).all(|r| r.labels.is_fully_annotated()));
        assert_eq!(d.clean.len() + d.cleaning.discarded + d.cleaning.failures.len(), 4);
        let full_ids: Vec<&str> = d.full.iter().map(|r| r.id.as_str()).collect();
        assert!(d.partial.iter().all(|r| !full_ids.contains(&r.id.as_str())));
        assert!(!d.test.iter().any(crate::phantom::has_injected_noise));
    }

    #[test]
    fn single_arm_gives_one_row_per_arm() {
        let mut c = tiny_experiment();
        c.arms = vec![Arm::BaselineClean];
        let d = prepare_data(&c).unwrap();
        let r = run_experiment(&c, &d, 1).unwrap();
        let table = String::from_utf8(table1_csv(&r).unwrap()).unwrap();
        assert_eq!(table.lines().count(), 2);
        assert!(table.lines().nth(1).unwrap().starts_with("baseline_clean,ok,2,"));
        assert_eq!(r.arms[0].table.as_ref().unwrap().rows.len(), 2 * 4);
    }

    #[test]
    fn shared_models_are_trained_once_per_fold() {
        let mut c = tiny_experiment();
        c.arms = vec![Arm::BasicTeacher, Arm::BasicStudent, Arm::Iteration(2)];
        let d = prepare_data(&c).unwrap();
        let r = run_experiment(&c, &d, 1).unwrap();
        let mut labels: Vec<&str> = r.models.iter().map(|m| m.label.as_str()).collect();
        labels.sort();
        assert_eq!(
            labels,
            vec!["basic_student", "basic_teacher", "iteration_1", "iteration_2", "robust_teacher"]
        );
        assert!(!r.is_partial());
        let students = r.models.iter().filter(|m| m.imputation.is_some()).count();
        assert_eq!(students, 3);
    }

    #[test]
    fn failing_arm_is_isolated() {
        let mut c = tiny_experiment();
        c.arms = vec![Arm::BaselineClean, Arm::BasicTeacher];
        let mut d = prepare_data(&c).unwrap();
        // a partially annotated record in the cleaned set breaks every
        // model trained on it, but not the noisy baseline
        c.arms.insert(0, Arm::BaselineFull);
        for r in &mut d.clean {
            r.labels.hide(OrganId::Rectum);
        }
        let r = run_experiment(&c, &d, 1).unwrap();
        assert!(r.is_partial());
        assert!(r.arm(Arm::BaselineFull).unwrap().error.is_none());
        assert!(r.arm(Arm::BasicTeacher).unwrap().error.as_deref().unwrap().contains("not fully annotated"));
        let table = String::from_utf8(table1_csv(&r).unwrap()).unwrap();
        assert!(table.contains("basic_teacher,failed,"));
    }

    #[test]
    fn parallel_folds_do_not_change_results() {
        let mut c = tiny_experiment();
        c.run_folds = None;
        c.arms = vec![Arm::BaselineClean];
        let d = prepare_data(&c).unwrap();
        let serial = run_experiment(&c, &d, 1).unwrap();
        let parallel = run_experiment(&c, &d, 2).unwrap();
        assert_eq!(serial.arms, parallel.arms);
        assert_eq!(table1_csv(&serial).unwrap(), table1_csv(&parallel).unwrap());
    }
}
