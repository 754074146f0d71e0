//! Leave-participants-out cross-validation: fold plans, training with
//! early stopping, the majority baseline, aggregation and significance.

mod config;
mod report;
mod stats;

pub use config::ExperimentConfig;
pub use report::{
    aggregate, read_fold_records, render_report, summarize, write_fold_records, ConfigSummary, EvalReport,
    PairwiseTest,
};
pub use stats::{
    bonferroni_adjust, bonferroni_adjusted, midranks_sorted, signed_ranks, wilcoxon_signed_rank, WilcoxonResult,
    EXACT_MAX_N,
};

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::models::{Inputs, Modality, Model, ModelConfig};
use crate::nn::{derive_seed, seeded_rng, Adam, Mode};
use crate::timecond::Strategy;

pub const DEFAULT_PARTICIPANTS: usize = 20;
pub const DEFAULT_FOLDS: usize = 10;

/// One train/validation/test split of the participants.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FoldPlan {
    pub repeat: usize,
    pub fold: usize,
    /// Seed of the repeat; also seeds the fold's model initialisation.
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl FoldPlan {
    /// Seed for network initialisation, shared by every configuration
    /// trained on this plan.
    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, 1 + self.fold as u64)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let sets = [&self.train, &self.validation, &self.test].map(|v| v.iter().collect::<BTreeSet<_>>());
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            if let Some(id) = sets[i].intersection(&sets[j]).next() {
                return Err(Error::Data(format!(
                    "participant `{id}` leaks across splits in repeat {} fold {}",
                    self.repeat, self.fold
                )));
            }
        }
        Ok(())
    }
}

/// Shuffles the participants once per repeat seed and cuts them into
/// `folds` equal groups; fold `k` tests group `k`, validates on group
/// `k + 1 (mod folds)` and trains on the rest.
pub fn make_folds(ids: &[String], repeat_seeds: &[u64], folds: usize, expected_participants: usize) -> Result<Vec<FoldPlan>> {
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Data("participant ids are not unique".into()));
    }
    if ids.len() != expected_participants {
        return Err(Error::Data(format!(
            "expected {expected_participants} participants, found {}",
            ids.len()
        )));
    }
    if folds < 3 || !ids.len().is_multiple_of(folds) {
        return Err(Error::Config(format!(
            "{} participants cannot be split into {folds} equal folds (need at least 3)",
            ids.len()
        )));
    }
    if repeat_seeds.is_empty() {
        return Err(Error::Config("at least one repeat seed is required".into()));
    }
    let group = ids.len() / folds;
    let mut plans = Vec::with_capacity(folds * repeat_seeds.len());
    for (repeat, &seed) in repeat_seeds.iter().enumerate() {
        let mut order: Vec<String> = unique.iter().map(|s| s.to_string()).collect();
        order.shuffle(&mut seeded_rng(seed));
        let groups: Vec<&[String]> = order.chunks(group).collect();
        for fold in 0..folds {
            let validation_fold = (fold + 1) % folds;
            let train = (0..folds)
                .filter(|&k| k != fold && k != validation_fold)
                .flat_map(|k| groups[k].iter().cloned())
                .collect();
            plans.push(FoldPlan {
                repeat,
                fold,
                seed,
                train,
                validation: groups[validation_fold].to_vec(),
                test: groups[fold].to_vec(),
            });
        }
    }
    Ok(plans)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            patience: 5,
            lr: 0.005,
            batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, patience and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Tracks the best validation accuracy; signals a stop after `patience`
/// consecutive epochs without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records epoch `epoch` (1-based). Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> (bool, bool) {
        if accuracy > self.best {
            self.best = accuracy;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Outcome of one configuration on one fold plan.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub modality: Modality,
    pub conditioning: Strategy,
    pub repeat: usize,
    pub fold: usize,
    pub seed: u64,
    pub test_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub test_windows: usize,
    pub test_accuracy: f64,
    pub baseline_accuracy: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    /// Predicted class per test window, in dataset order.
    pub predictions: Vec<u8>,
}

impl FoldResult {
    /// Identifies the fold for pairing across configurations.
    pub fn pairing_key(&self) -> (usize, usize, u64, Vec<String>) {
        (self.repeat, self.fold, self.seed, self.test_ids.clone())
    }
}

/// Majority class of the training labels (ties predict high).
pub fn majority_class(train_labels: &[usize]) -> usize {
    let high = train_labels.iter().filter(|&&l| l == 1).count();
    usize::from(2 * high >= train_labels.len())
}

pub fn majority_baseline_accuracy(train_labels: &[usize], test_labels: &[usize]) -> f64 {
    let class = majority_class(train_labels);
    accuracy_of(test_labels.iter().map(|_| class), test_labels)
}

pub fn majority_baseline(plan: &FoldPlan, data: &Dataset) -> Result<f64> {
    let split = Split::new(plan, data)?;
    Ok(majority_baseline_accuracy(&split.train.labels, &split.test.labels))
}

fn accuracy_of(predictions: impl Iterator<Item = usize>, labels: &[usize]) -> f64 {
    let correct = predictions.zip(labels).filter(|(p, l)| p == *l).count();
    correct as f64 / labels.len() as f64
}

struct Split {
    train: Dataset,
    validation: Dataset,
    test: Dataset,
}

impl Split {
    fn new(plan: &FoldPlan, data: &Dataset) -> Result<Self> {
        plan.check_disjoint()?;
        let train = data.select(&data.rows_for(&plan.train));
        let validation = data.select(&data.rows_for(&plan.validation));
        let test = data.select(&data.rows_for(&plan.test));
        let ids = |d: &Dataset| d.participants.iter().cloned().collect::<BTreeSet<_>>();
        let (a, b, c) = (ids(&train), ids(&validation), ids(&test));
        assert!(
            a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c),
            "window participant sets overlap in repeat {} fold {}",
            plan.repeat,
            plan.fold
        );
        for (name, d) in [("training", &train), ("validation", &validation), ("test", &test)] {
            if d.is_empty() {
                return Err(Error::Data(format!(
                    "repeat {} fold {}: {name} split has no windows",
                    plan.repeat, plan.fold
                )));
            }
        }
        let [low, high] = train.class_counts();
        if low == 0 || high == 0 {
            return Err(Error::Data(format!(
                "repeat {} fold {}: training split has {low} low and {high} high windows; both classes are required",
                plan.repeat, plan.fold
            )));
        }
        Ok(Self { train, validation, test })
    }
}

fn inputs<'a>(data: &'a Dataset, modality: Modality) -> Inputs<'a> {
    Inputs::new(
        modality.uses_gamepad().then(|| data.gamepad.view()),
        modality.uses_frames().then(|| data.frames.view()),
        &data.levels,
    )
}

fn accuracy(model: &Model, data: &Dataset) -> Result<(f64, Vec<usize>)> {
    let predictions = model.predict(&inputs(data, model.config().modality))?;
    Ok((accuracy_of(predictions.iter().copied(), &data.labels), predictions))
}

/// Trains one configuration on one fold and evaluates the restored best
/// model on the test participants.
pub fn train_fold(plan: &FoldPlan, model_config: &ModelConfig, data: &Dataset, train: &TrainConfig) -> Result<(FoldResult, Model)> {
    train.validate()?;
    let split = Split::new(plan, data)?;
    let modality = model_config.modality;
    let mut model = Model::new(model_config)?;
    let mut best = model.clone();
    let mut adam = Adam::new(train.lr);
    let mut rng = seeded_rng(derive_seed(model_config.seed, 0x5eed));
    let mut stopper = EarlyStopping::new(train.patience);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut epochs_run = 0;

    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(train.batch_size) {
            let gamepad: Option<Array2<f64>> = modality.uses_gamepad().then(|| split.train.gamepad.select(Axis(0), batch));
            let frames: Option<Array2<f64>> = modality.uses_frames().then(|| split.train.frames.select(Axis(0), batch));
            let levels: Vec<u8> = batch.iter().map(|&i| split.train.levels[i]).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| split.train.labels[i]).collect();
            let batch_inputs = Inputs::new(gamepad.as_ref().map(|g| g.view()), frames.as_ref().map(|f| f.view()), &levels);
            let pass = model.forward(&batch_inputs, Mode::Train, &mut rng)?;
            let loss = model.backward(&pass, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss in epoch {epoch}")));
            }
            adam.step(&mut model.params_mut())?;
            model.touch();
        }
        epochs_run = epoch;
        let (val_acc, _) = accuracy(&model, &split.validation)?;
        let (improved, stop) = stopper.observe(epoch, val_acc);
        if improved {
            best = model.clone();
        }
        if stop {
            break;
        }
    }

    let (test_accuracy, predictions) = accuracy(&best, &split.test)?;
    let result = FoldResult {
        modality,
        conditioning: model_config.conditioning,
        repeat: plan.repeat,
        fold: plan.fold,
        seed: plan.seed,
        test_ids: plan.test.clone(),
        validation_ids: plan.validation.clone(),
        test_windows: split.test.len(),
        test_accuracy,
        baseline_accuracy: majority_baseline_accuracy(&split.train.labels, &split.test.labels),
        epochs_run,
        best_epoch: stopper.best_epoch(),
        best_validation_accuracy: stopper.best(),
        predictions: predictions.into_iter().map(|p| p as u8).collect(),
    };
    Ok((result, best))
}

/// Runs every configuration of `config` on every fold plan, using at most
/// `jobs` worker threads. Results come back in (modality, conditioning,
/// repeat, fold) order regardless of `jobs`.
pub fn run_experiment(data: &Dataset, config: &ExperimentConfig, jobs: usize) -> Result<Vec<FoldResult>> {
    config.validate()?;
    let plans = make_folds(&data.participant_ids(), &config.repeat_seeds(), config.folds, config.participants)?;
    let mut tasks = Vec::new();
    for &modality in &config.modalities {
        for &conditioning in &config.strategies {
            for plan in &plans {
                tasks.push((config.model_config(modality, conditioning, plan.model_seed()), plan));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        tasks
            .par_iter()
            .map(|(model_config, plan)| train_fold(plan, model_config, data, &config.train).map(|r| r.0))
            .collect()
    })
}
