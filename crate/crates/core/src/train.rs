//! Teacher and student training loops, folds and iterative self-training.
//!
//! Every step samples one record, augments it, crops one z patch, picks one
//! head at random and takes an Adam step on the trunk plus that head. The
//! randomness of a step is keyed by `(epoch, record)` and the head choice
//! by its own stream, so runs are reproducible bit for bit.

use std::io::Write as _;
use std::path::Path;

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_augmentation, AugmentConfig};
use crate::data::{self, DatasetManifest, ManifestEntry, OrganId, ScanRecord};
use crate::error::{Error, Result};
use crate::impute::{impute_records, predict_full_volume, ImputeReport, SlidingWindow};
use crate::losses::{loss_and_grad, ProbMap, TargetMap};
use crate::metrics::dice;
use crate::nn::{adam_step, build_model, AdamConfig, KHeadModel, ModelConfig, Segmenter, Tensor};
use crate::rng::stream;

const SALT_ORDER: u64 = 0x0D3;
const SALT_SAMPLE: u64 = 0x5A3;
const SALT_HEAD: u64 = 0x4EAD;
const SALT_FOLDS: u64 = 0xF01D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    /// Cross-entropy on fully annotated records.
    Teacher,
    /// Uncertainty-weighted cross-entropy on clinical plus imputed labels.
    Student,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub role: Role,
    /// Passes over the training records, one random patch per record each.
    pub epochs: usize,
    pub learning_rate: f64,
    /// Step-decay factor applied every third of the run.
    pub gamma: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub patch_depth: usize,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub seed: u64,
    /// Epochs between validation passes; the last epoch is always validated.
    pub validate_every: usize,
    /// Slices shared by neighbouring windows during validation inference.
    pub window_overlap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            role: Role::Teacher,
            epochs: 30,
            learning_rate: 1e-3,
            gamma: 0.1,
            adam: AdamConfig::default(),
            batch_size: 1,
            patch_depth: 32,
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
            validate_every: 1,
            window_overlap: 16,
        }
    }
}

impl TrainConfig {
    pub fn teacher() -> Self {
        Self::default()
    }

    pub fn student() -> Self {
        TrainConfig {
            role: Role::Student,
            epochs: 15,
            ..Self::default()
        }
    }

    pub fn window(&self) -> SlidingWindow {
        SlidingWindow {
            patch_depth: self.patch_depth,
            overlap: self.window_overlap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size != 1 {
            return Err(Error::config("batch_size", "only a batch size of 1 is supported"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma", "must be in (0, 1]"));
        }
        let div = self.model.divisor();
        if self.patch_depth == 0 || !self.patch_depth.is_multiple_of(div) {
            return Err(Error::config(
                "patch_depth",
                format!("{} must be a positive multiple of {div}", self.patch_depth),
            ));
        }
        if self.validate_every == 0 {
            return Err(Error::config("validate_every", "must be positive"));
        }
        self.window().validate()
    }
}

/// Step-decayed learning rate: `lr * gamma^(step / (total / 3))`.
pub fn lr_at(step: usize, total: usize, base: f64, gamma: f64) -> f64 {
    let size = (total / 3).max(1);
    base * gamma.powi((step / size) as i32)
}

/// One training sample: a z window of a record, padded where needed.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Tensor,
    pub target: TargetMap,
    /// Per-voxel uncertainty, present for records that carry one.
    pub uncertainty: Option<Vec<f64>>,
    /// First record slice in the patch (before any padding).
    pub offset: usize,
}

/// Crops `patch_depth` slices at a uniformly random offset. Thinner records
/// are zero-padded symmetrically in z, and in-plane axes are zero-padded at
/// the far end to a multiple of `divisor`. Padding is background with zero
/// uncertainty.
pub fn sample_patch(record: &ScanRecord, patch_depth: usize, divisor: usize, rng: &mut ChaCha8Rng) -> Result<Patch> {
    let [nz, ny, nx] = record.shape();
    let round_up = |n: usize| n.div_ceil(divisor) * divisor;
    let (py, px) = (round_up(ny), round_up(nx));
    let offset = if nz > patch_depth { rng.gen_range(0..=nz - patch_depth) } else { 0 };
    let take = nz.min(patch_depth);
    let z_pad = (patch_depth - take) / 2;
    let zs = s![offset..offset + take, .., ..];
    let place = s![z_pad..z_pad + take, ..ny, ..nx];

    let mut image = Array3::<f32>::zeros((patch_depth, py, px));
    image.slice_mut(place).assign(&record.image.data.slice(zs));
    let classes = record.labels.to_class_map();
    let mut target = Array3::<u8>::zeros((patch_depth, py, px));
    target.slice_mut(place).assign(&classes.slice(zs));
    let uncertainty = record.uncertainty.as_ref().map(|u| {
        let mut out = Array3::<f32>::zeros((patch_depth, py, px));
        out.slice_mut(place).assign(&u.slice(zs));
        out.iter().map(|&v| v as f64).collect()
    });
    Ok(Patch {
        image: Tensor::from_vec(1, [patch_depth, py, px], image.into_iter().collect()),
        target: TargetMap(target.into_iter().collect()),
        uncertainty,
        offset,
    })
}

/// What one optimizer step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub record: usize,
    pub head: usize,
    pub lr: f64,
    pub loss: f64,
}

fn check_training_set(records: &[ScanRecord], role: Role) -> Result<()> {
    if records.is_empty() {
        return Err(Error::validation("records", "training set is empty"));
    }
    for r in records {
        match role {
            Role::Teacher if !r.labels.is_fully_annotated() => {
                return Err(Error::NotFullyAnnotated { id: r.id.clone() });
            }
            Role::Student => {
                if r.labels.sources.contains(&data::LabelSource::None) {
                    return Err(Error::NotFullyAnnotated { id: r.id.clone() });
                }
                if r.uncertainty.is_none() {
                    return Err(Error::MissingUncertainty { id: r.id.clone() });
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Step-by-step driver of the training loop.
pub struct Trainer<'a, M> {
    model: M,
    records: &'a [ScanRecord],
    config: TrainConfig,
    step: usize,
    order: Vec<usize>,
    head_rng: ChaCha8Rng,
}

impl<'a, M: Segmenter> Trainer<'a, M> {
    pub fn new(model: M, records: &'a [ScanRecord], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        check_training_set(records, config.role)?;
        Ok(Trainer {
            model,
            records,
            config: *config,
            step: 0,
            order: Vec::new(),
            head_rng: stream(config.seed, SALT_HEAD, 0),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.records.len()
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn into_model(self) -> M {
        self.model
    }

    pub fn step(&mut self) -> Result<StepReport> {
        if self.is_finished() {
            return Err(Error::validation("step", "training already finished"));
        }
        let n = self.records.len();
        let epoch = self.step / n;
        let position = self.step % n;
        if position == 0 {
            self.order = (0..n).collect();
            self.order.shuffle(&mut stream(self.config.seed, SALT_ORDER, epoch as u64));
        }
        let index = self.order[position];
        let mut rng = stream(self.config.seed, SALT_SAMPLE, (epoch * n + index) as u64);
        let record = sample_augmentation(&self.records[index], &self.config.augment, &mut rng)?;
        let patch = sample_patch(&record, self.config.patch_depth, self.config.model.divisor(), &mut rng)?;
        let head = self.head_rng.gen_range(0..self.model.num_heads());

        let (logits, tape) = self.model.forward_head(&patch.image, head);
        let wide: Vec<f64> = logits.data.iter().map(|&v| v as f64).collect();
        let probs = ProbMap::from_logits(logits.channels, &wide)?;
        let u = match self.config.role {
            Role::Teacher => None,
            Role::Student => patch.uncertainty.as_deref(),
        };
        let (loss, grad) = loss_and_grad(&probs, &patch.target, u)?;
        let dlogits = Tensor::from_vec(logits.channels, logits.dims, grad.iter().map(|&g| g as f32).collect());
        self.model.backward(tape, dlogits);
        let lr = lr_at(self.step, self.total_steps(), self.config.learning_rate, self.config.gamma);
        adam_step(self.model.trainable_mut(head), lr, &self.config.adam);

        let report = StepReport {
            step: self.step,
            epoch,
            record: index,
            head,
            lr,
            loss,
        };
        self.step += 1;
        Ok(report)
    }
}

/// Mean Dice per organ over `records`, in [`OrganId::ALL`] order.
pub fn validation_dice(model: &dyn Segmenter, records: &[ScanRecord], window: &SlidingWindow) -> Result<[f64; 4]> {
    let mut sum = [0.0; 4];
    for r in records {
        if !r.labels.is_fully_annotated() {
            return Err(Error::NotFullyAnnotated { id: r.id.clone() });
        }
        let map = predict_full_volume(model, &r.image.data, window)?.class_map();
        for (slot, organ) in OrganId::ALL.into_iter().enumerate() {
            let pred = map.mapv(|c| c == organ.class_index());
            sum[slot] += dice(&pred, r.labels.mask(organ))?;
        }
    }
    Ok(sum.map(|s| s / records.len().max(1) as f64))
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// Steps completed.
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous row.
    pub loss: f64,
    /// Per-organ validation Dice, absent without a validation set.
    pub dice: Option<[f64; 4]>,
}

/// Writes `step,lr,loss,dice_<organ>...`; missing Dice values are empty.
pub fn write_curve_csv(rows: &[CurveRow], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    write!(out, "step,lr,loss").unwrap();
    for o in OrganId::ALL {
        write!(out, ",dice_{}", o.name()).unwrap();
    }
    writeln!(out).unwrap();
    for r in rows {
        write!(out, "{},{},{}", r.step, r.lr, r.loss).unwrap();
        for slot in 0..4 {
            match r.dice {
                Some(d) => write!(out, ",{}", d[slot]).unwrap(),
                None => write!(out, ",").unwrap(),
            }
        }
        writeln!(out).unwrap();
    }
    data::write_atomic(path, &out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Checkpoint with the highest mean validation Dice (earliest on ties),
    /// or the final model without validation records.
    pub best: M,
    /// Steps completed at the best checkpoint.
    pub best_step: usize,
    pub best_dice: Option<f64>,
    pub last: M,
    pub curve: Vec<CurveRow>,
    /// Training loss of every step.
    pub losses: Vec<f64>,
    /// Number of steps each head was selected.
    pub head_counts: Vec<usize>,
}

/// Runs the whole loop, validating every `validate_every` epochs.
pub fn train_model<M: Segmenter + Clone>(
    model: M,
    train: &[ScanRecord],
    validation: &[ScanRecord],
    config: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    let mut trainer = Trainer::new(model, train, config)?;
    let window = config.window();
    let n = train.len();
    let mut losses = Vec::with_capacity(trainer.total_steps());
    let mut head_counts = vec![0; trainer.model().num_heads()];
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, M)> = None;
    let mut since = 0.0;
    let mut since_n = 0usize;
    while !trainer.is_finished() {
        let report = trainer.step()?;
        losses.push(report.loss);
        head_counts[report.head] += 1;
        since += report.loss;
        since_n += 1;
        let done = trainer.steps_done();
        let epoch_end = done % n == 0;
        let epochs_done = done / n;
        if epoch_end && (epochs_done.is_multiple_of(config.validate_every) || trainer.is_finished()) {
            let dice = if validation.is_empty() {
                None
            } else {
                Some(validation_dice(trainer.model(), validation, &window)?)
            };
            if let Some(d) = dice {
                let mean = d.iter().sum::<f64>() / 4.0;
                if best.as_ref().is_none_or(|(b, _, _)| mean > *b) {
                    best = Some((mean, done, trainer.model().clone()));
                }
            }
            curve.push(CurveRow {
                step: done,
                lr: report.lr,
                loss: since / since_n as f64,
                dice,
            });
            since = 0.0;
            since_n = 0;
        }
    }
    let last = trainer.into_model();
    let (best_dice, best_step, best) = match best {
        Some((d, s, m)) => (Some(d), s, m),
        None => (None, losses.len(), last.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_step,
        best_dice,
        last,
        curve,
        losses,
        head_counts,
    })
}

/// Fresh K-head model trained with cross-entropy on fully annotated records.
pub fn train_teacher(train: &[ScanRecord], validation: &[ScanRecord], config: &TrainConfig) -> Result<TrainOutcome<KHeadModel>> {
    let config = TrainConfig {
        role: Role::Teacher,
        ..*config
    };
    train_model(build_model(&config.model, config.seed)?, train, validation, &config)
}

/// Fresh K-head model trained with the uncertainty-weighted loss on
/// clinical plus imputed labels.
pub fn train_student(train: &[ScanRecord], validation: &[ScanRecord], config: &TrainConfig) -> Result<TrainOutcome<KHeadModel>> {
    let config = TrainConfig {
        role: Role::Student,
        ..*config
    };
    train_model(build_model(&config.model, config.seed)?, train, validation, &config)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// K-fold split of record ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Seeded shuffle, then contiguous parts; fold `i` validates on part `i`.
/// Earlier parts take one extra id when the count does not divide evenly.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::config("k", "need at least two folds"));
    }
    if ids.len() < k {
        return Err(Error::validation("records", format!("{} records cannot fill {k} folds", ids.len())));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut stream(seed, SALT_FOLDS, 0));
    let base = ids.len() / k;
    let extra = ids.len() % k;
    let mut parts = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        parts.push(shuffled[start..start + len].to_vec());
        start += len;
    }
    let folds = (0..k)
        .map(|i| Fold {
            validation: parts[i].clone(),
            train: parts
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, p)| p.iter().cloned())
                .collect(),
        })
        .collect();
    Ok(FoldPlan { k, seed, folds })
}

impl FoldPlan {
    /// Train and validation manifests of one fold, sharing the root of `all`.
    pub fn manifests(&self, all: &DatasetManifest, fold: usize) -> Result<(DatasetManifest, DatasetManifest)> {
        let f = self
            .folds
            .get(fold)
            .ok_or_else(|| Error::config("fold", format!("{fold} is out of range for {} folds", self.k)))?;
        let pick = |ids: &[String]| -> Result<DatasetManifest> {
            let entries = ids
                .iter()
                .map(|id| {
                    all.records
                        .iter()
                        .find(|e| &e.id == id)
                        .cloned()
                        .ok_or_else(|| Error::validation("records", format!("`{id}` not in manifest")))
                })
                .collect::<Result<Vec<ManifestEntry>>>()?;
            Ok(DatasetManifest::new(all.root(), entries))
        };
        Ok((pick(&f.train)?, pick(&f.validation)?))
    }
}

/// Records of `records` whose ids are listed, in list order.
pub fn select<'a>(records: &'a [ScanRecord], ids: &[String]) -> Result<Vec<&'a ScanRecord>> {
    ids.iter()
        .map(|id| {
            records
                .iter()
                .find(|r| &r.id == id)
                .ok_or_else(|| Error::validation("records", format!("`{id}` not found")))
        })
        .collect()
}

/// One round of imputation followed by a fresh student.
#[derive(Clone, Debug)]
pub struct SelfTrainingRound {
    pub imputed: Vec<ScanRecord>,
    pub report: ImputeReport,
    pub student: TrainOutcome<KHeadModel>,
}

#[derive(Clone, Debug)]
pub struct SelfTraining {
    pub teacher: TrainOutcome<KHeadModel>,
    pub rounds: Vec<SelfTrainingRound>,
}

/// Teacher on `full`, then `iterations` rounds in which the latest model
/// imputes `partial` and a freshly initialised student trains on `full`
/// plus the imputed records. Each round's best student imputes for the
/// next one.
pub fn iterate_teacher_student(
    iterations: usize,
    teacher: &TrainConfig,
    student: &TrainConfig,
    full: &[ScanRecord],
    partial: &[ScanRecord],
    validation: &[ScanRecord],
) -> Result<SelfTraining> {
    if iterations == 0 {
        return Err(Error::config("iterations", "need at least one iteration"));
    }
    let teacher = train_teacher(full, validation, teacher)?;
    let mut rounds: Vec<SelfTrainingRound> = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let imputer = rounds.last().map_or(&teacher.best, |r| &r.student.best);
        let mut training = full.to_vec();
        let (imputed, report) = impute_records(imputer, partial, &student.window())?;
        for r in &mut training {
            r.uncertainty = Some(Array3::zeros(r.shape()));
        }
        training.extend(imputed.iter().cloned());
        let outcome = train_student(&training, validation, student)?;
        rounds.push(SelfTrainingRound {
            imputed,
            report,
            student: outcome,
        });
    }
    Ok(SelfTraining { teacher, rounds })
}
