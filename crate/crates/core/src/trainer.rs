//! SGD training, FLOPs metering and the grow-from-small experiment driver.

use std::f64::consts::PI;
use std::fmt::Write as _;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::data::{augment, epoch_rng, BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::flops::{model_forward_macs, training_macs, Budget};
use crate::growth::{grow, growth_step_metrics, GrowthPlan, GrowthStepMetrics};
use crate::network::{Gradients, Mode, Model, ModelOptions, NetworkSpec, ParamKind};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    /// `lr0 * (1 + cos(pi * epoch / epochs)) / 2`.
    Cosine,
    /// `lr0 * factor^(milestones passed)`.
    Step { milestones: Vec<usize>, factor: f64 },
}

/// What the learning rate does after growth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PostGrowthSchedule {
    /// A fresh schedule over the epochs the remaining budget affords.
    #[default]
    Restart,
    /// Carry on along the original schedule from the growth epoch.
    Continue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to coefficient vectors as well.
    pub decay_coefficients: bool,
    pub batch_size: usize,
    /// Length of the full schedule, in epochs.
    pub epochs: usize,
    pub schedule: Schedule,
    pub post_growth: PostGrowthSchedule,
    pub seed: u64,
    /// Evaluate test accuracy every this many epochs (and after the last).
    pub eval_every: usize,
    pub augment: bool,
    pub templates: usize,
    pub train_edge_coefficients: bool,
    /// Allowance as a fraction of the target network's full-schedule cost.
    pub budget_norm: f64,
    pub count_pretrained: bool,
    pub growth: GrowthPlan,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_coefficients: false,
            batch_size: 128,
            epochs: 30,
            schedule: Schedule::Cosine,
            post_growth: PostGrowthSchedule::Restart,
            seed: 0,
            eval_every: 1,
            augment: false,
            templates: 2,
            train_edge_coefficients: false,
            budget_norm: 0.5,
            count_pretrained: false,
            growth: GrowthPlan::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be >= 1".into());
        }
        if self.templates == 0 {
            return fail("templates must be >= 1".into());
        }
        if !(self.budget_norm >= 0.0) {
            return fail(format!("budget_norm must be >= 0, got {}", self.budget_norm));
        }
        if let Schedule::Step { milestones, factor } = &self.schedule {
            if milestones.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!("milestones must be strictly increasing: {milestones:?}"));
            }
            if !(*factor > 0.0) {
                return fail(format!("step factor must be > 0, got {factor}"));
            }
        }
        self.growth.validate()
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            templates: self.templates,
            train_edge_coefficients: self.train_edge_coefficients,
        }
    }

    /// Learning rate at `epoch` of the full schedule.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        lr_at(&self.schedule, self.lr, epoch, self.epochs)
    }
}

/// Learning rate at `epoch` of a schedule `epochs` long.
pub fn lr_at(schedule: &Schedule, lr0: f64, epoch: usize, epochs: usize) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside a {epochs}-epoch schedule"
        )));
    }
    Ok(match schedule {
        Schedule::Cosine => lr0 * 0.5 * (1.0 + (PI * epoch as f64 / epochs as f64).cos()),
        Schedule::Step { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| epoch >= m).count();
            lr0 * factor.powi(passed as i32)
        }
    })
}

/// Momentum buffers mirroring [`Model::param_slots`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &mut Model<f32>) -> Self {
        Self {
            velocity: model
                .param_slots()
                .iter()
                .map(|s| vec![0.0; s.values.len()])
                .collect(),
            step: 0,
        }
    }
}

/// `v = momentum * v + g + wd * p; p -= lr * v`, skipping frozen coefficients.
pub fn sgd_step(
    model: &mut Model<f32>,
    grads: &Gradients<f32>,
    opt: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    let grad_slices = grads.slices();
    let mut slots = model.param_slots();
    if slots.len() != grad_slices.len() || slots.len() != opt.velocity.len() {
        return Err(Error::dim(format!(
            "{} parameter buffers, {} gradients, {} velocity buffers",
            slots.len(),
            grad_slices.len(),
            opt.velocity.len()
        )));
    }
    let (lr, mu) = (lr as f32, config.momentum as f32);
    for ((slot, g), v) in slots.iter_mut().zip(grad_slices).zip(&mut opt.velocity) {
        if slot.values.len() != g.len() || g.len() != v.len() {
            return Err(Error::dim("gradient buffer does not match its parameter"));
        }
        let wd = match slot.kind {
            ParamKind::Coefficient { trainable: false } => continue,
            ParamKind::Coefficient { .. } if !config.decay_coefficients => 0.0,
            ParamKind::BnShift => 0.0,
            _ => config.weight_decay as f32,
        };
        for ((p, &gi), vi) in slot.values.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + gi + wd * *p;
            *p -= lr * *vi;
        }
    }
    opt.step += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Training a small net from scratch.
    Small,
    /// Training the second small net before fusion.
    Small2,
    Grown,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Small => "small",
            Phase::Small2 => "small2",
            Phase::Grown => "grown",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Phase::Small => 0x5EED_0001,
            Phase::Small2 => 0x5EED_0002,
            Phase::Grown => 0x5EED_0003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub test_top1: Option<f64>,
    pub lr: f64,
    pub cumulative_macs: u64,
    pub flops_norm: f64,
    /// False when the budget ran out mid-epoch.
    pub complete: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    /// Number of history epochs completed before growth.
    pub growth_epoch: Option<usize>,
    pub growth_metrics: Option<GrowthStepMetrics>,
}

impl RunHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,phase,loss,top1,lr,macs_cum,flops_norm,growth\n");
        for r in &self.records {
            let top1 = r.test_top1.map(|a| a.to_string()).unwrap_or_default();
            let marker = u8::from(self.growth_epoch == Some(r.epoch) && r.phase == Phase::Grown);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.phase.name(),
                r.train_loss,
                top1,
                r.lr,
                r.cumulative_macs,
                r.flops_norm,
                marker
            );
        }
        out
    }

    pub fn final_top1(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.test_top1)
    }
}

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn new(train: Dataset, test: Dataset) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if train.example_shape() != test.example_shape() || train.class_count != test.class_count {
            return Err(Error::dim("train and test splits disagree in shape or classes"));
        }
        Ok(Self { train, test })
    }
}

/// Everything needed to continue a training phase exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: Model<f32>,
    pub opt: OptimizerState,
    pub budget: Budget,
    pub history: RunHistory,
    pub phase: Phase,
    /// Next epoch of this phase.
    pub epoch: usize,
    /// Epochs this phase runs for.
    pub phase_epochs: usize,
    /// Learning-rate schedule length and the schedule position of phase epoch 0.
    pub schedule_epochs: usize,
    pub schedule_offset: usize,
    /// History epoch number of phase epoch 0.
    pub epoch_base: usize,
}

impl TrainState {
    pub fn new(mut model: Model<f32>, budget: Budget, phase: Phase, phase_epochs: usize) -> Self {
        let opt = OptimizerState::new(&mut model);
        Self {
            model,
            opt,
            budget,
            history: RunHistory::default(),
            phase,
            epoch: 0,
            phase_epochs,
            schedule_epochs: phase_epochs,
            schedule_offset: 0,
            epoch_base: 0,
        }
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.phase_epochs || self.budget.exhausted()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Completed,
    BudgetExhausted,
}

/// Runs epochs of the current phase until `until` (phase-relative, capped at
/// the phase length) or until the budget runs out.
pub fn train_epochs(state: &mut TrainState, data: &Splits, config: &TrainConfig, until: usize) -> Result<Stop> {
    if data.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let until = until.min(state.phase_epochs);
    let per_example = model_forward_macs(&state.model.spec)?.train_macs_per_example;
    let seed = config.seed ^ state.phase.salt();
    let mut iter = BatchIterator::new(data.train.len(), config.batch_size, seed, true)?;
    while state.epoch < until {
        if state.budget.exhausted() {
            return Ok(Stop::BudgetExhausted);
        }
        let global = state.epoch_base + state.epoch;
        let lr = lr_at(
            &config.schedule,
            config.lr,
            (state.schedule_offset + state.epoch).min(state.schedule_epochs - 1),
            state.schedule_epochs,
        )?;
        iter.start_epoch(global as u64);
        let mut aug_rng = epoch_rng(seed ^ 0xA06, global as u64);
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        let mut complete = true;
        while let Some(batch) = iter.next_batch(&data.train) {
            if state.budget.exhausted() {
                complete = false;
                break;
            }
            let (mut images, labels) = batch?;
            if config.augment {
                augment(&mut images, &mut aug_rng);
            }
            let (loss, grads, trace) = state.model.loss_and_grads(&images, &labels, Mode::Train)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            state.model.update_running_stats(&trace);
            sgd_step(&mut state.model, &grads, &mut state.opt, lr, config)?;
            state.budget.charge(per_example * labels.len() as u64);
            loss_sum += loss as f64 * labels.len() as f64;
            seen += labels.len();
        }
        if seen == 0 {
            return Ok(Stop::BudgetExhausted);
        }
        state.epoch += 1;
        let last = state.epoch == state.phase_epochs || !complete || state.budget.exhausted();
        let test_top1 = if state.epoch.is_multiple_of(config.eval_every) || last {
            Some(state.model.top1_accuracy(&data.test.images, &data.test.labels, EVAL_BATCH)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: global,
            phase: state.phase,
            train_loss: loss_sum / seen as f64,
            test_top1,
            lr,
            cumulative_macs: state.budget.consumed_macs,
            flops_norm: crate::flops::flops_norm(&state.budget)?,
            complete,
        };
        debug!(
            "{} epoch {global}: loss {:.4} top1 {:?} lr {lr:.5}",
            state.phase.name(),
            record.train_loss,
            test_top1
        );
        state.history.records.push(record);
        if !complete {
            return Ok(Stop::BudgetExhausted);
        }
    }
    Ok(if state.budget.exhausted() && state.epoch < state.phase_epochs {
        Stop::BudgetExhausted
    } else {
        Stop::Completed
    })
}

/// Cost of training the full-width network for the full schedule.
pub fn target_macs(small: &NetworkSpec, growth: &GrowthPlan, examples: usize, epochs: usize) -> Result<u64> {
    training_macs(&small.widened(growth.g.max(2)), examples as u64, epochs as u64)
}

/// Called after every completed (or budget-truncated) epoch.
pub type EpochObserver<'a> = dyn FnMut(&TrainState) -> Result<()> + 'a;

/// [`train_epochs`] one epoch at a time, reporting each to `observer`.
pub fn train_observed(
    state: &mut TrainState,
    data: &Splits,
    config: &TrainConfig,
    until: usize,
    observer: &mut EpochObserver,
) -> Result<Stop> {
    let until = until.min(state.phase_epochs);
    while state.epoch < until {
        let before = state.epoch;
        let stop = train_epochs(state, data, config, before + 1)?;
        if state.epoch > before {
            observer(state)?;
        }
        if stop == Stop::BudgetExhausted || state.epoch == before {
            return Ok(Stop::BudgetExhausted);
        }
    }
    Ok(Stop::Completed)
}

/// Trains a fresh small network for the full schedule. Its budget meters the
/// cost against the full-width target but never stops it.
pub fn train_small(spec: &NetworkSpec, data: &Splits, config: &TrainConfig, seed: u64) -> Result<TrainState> {
    train_small_observed(spec, data, config, seed, &mut |_| Ok(()))
}

pub fn train_small_observed(
    spec: &NetworkSpec,
    data: &Splits,
    config: &TrainConfig,
    seed: u64,
    observer: &mut EpochObserver,
) -> Result<TrainState> {
    config.validate()?;
    let model = Model::build(spec, config.model_options(), seed)?;
    let target = target_macs(spec, &config.growth, data.train.len(), config.epochs)?;
    let mut state = TrainState::new(model, Budget::new(target, u64::MAX)?, Phase::Small, config.epochs);
    train_observed(&mut state, data, config, config.epochs, observer)?;
    Ok(state)
}

/// Trains `model` with a fresh schedule spanning as many epochs as the
/// budget's remaining allowance affords (rounded up; the budget stops the
/// last one).
pub fn train_for_budget(
    model: Model<f32>,
    data: &Splits,
    config: &TrainConfig,
    budget: Budget,
    phase: Phase,
    epoch_base: usize,
) -> Result<TrainState> {
    let mut state = budget_state(model, data, budget, phase, epoch_base)?;
    let until = state.phase_epochs;
    train_epochs(&mut state, data, config, until)?;
    Ok(state)
}

fn budget_state(model: Model<f32>, data: &Splits, budget: Budget, phase: Phase, epoch_base: usize) -> Result<TrainState> {
    let per_epoch = model_forward_macs(&model.spec)?.train_macs_per_example * data.train.len() as u64;
    let epochs = (budget.remaining().div_ceil(per_epoch.max(1)) as usize).max(1);
    let mut state = TrainState::new(model, budget, phase, epochs);
    state.epoch_base = epoch_base;
    Ok(state)
}

pub struct ExperimentOutcome {
    pub history: RunHistory,
    pub model: Model<f32>,
    pub small2: Option<Model<f32>>,
    pub budget: Budget,
}

/// Second-net training (with fusion), growth, then training of the grown
/// network until the budget runs out. `small1`'s own training cost is
/// excluded unless `count_pretrained` is set.
pub fn run_growth_experiment(config: &TrainConfig, small1: &Model<f32>, data: &Splits) -> Result<ExperimentOutcome> {
    run_growth_experiment_observed(config, small1, data, &mut |_| Ok(()))
}

pub fn run_growth_experiment_observed(
    config: &TrainConfig,
    small1: &Model<f32>,
    data: &Splits,
    observer: &mut EpochObserver,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    let plan = &config.growth;
    let spec = &small1.spec;
    let n = data.train.len();
    let target = target_macs(spec, plan, n, config.epochs)?;
    let mut budget = Budget::with_norm(target, config.budget_norm)?;
    budget.count_pretrained = config.count_pretrained;
    budget.pretrained_macs = training_macs(spec, n as u64, config.epochs as u64)?;

    let mut history = RunHistory::default();
    let small2 = if plan.fusion {
        let fresh = Model::build(spec, config.model_options(), config.seed.wrapping_add(0x2))?;
        let mut state = TrainState::new(fresh, budget, Phase::Small2, plan.growth_epoch);
        // The second net follows the first `e` epochs of a full-length schedule.
        state.schedule_epochs = config.epochs.max(plan.growth_epoch);
        let stop = train_observed(&mut state, data, config, plan.growth_epoch, observer)?;
        if stop == Stop::BudgetExhausted || (state.budget.exhausted() && plan.growth_epoch > 0) {
            return Err(Error::BudgetExhausted(format!(
                "budget ran out after {} of {} second-net epochs",
                state.epoch, plan.growth_epoch
            )));
        }
        budget = state.budget;
        history.records.extend(state.history.records);
        Some(state.model)
    } else {
        None
    };

    let grown = grow(small1, small2.as_ref(), plan, config.seed.wrapping_add(0x3))?;
    let before: Vec<&Model<f32>> = std::iter::once(small1).chain(small2.as_ref()).collect();
    let metrics = growth_step_metrics(&before, &grown, &data.test.images, &data.test.labels, EVAL_BATCH)?;
    info!(
        "grew {} with {} init: accuracy {:.4} -> {:.4}",
        spec.name,
        plan.strategy.name(),
        metrics.acc_before,
        metrics.acc_at_growth
    );
    let growth_epoch = history.records.len();
    history.growth_epoch = Some(growth_epoch);
    history.growth_metrics = Some(metrics);

    let mut state = budget_state(grown, data, budget, Phase::Grown, growth_epoch)?;
    if config.post_growth == PostGrowthSchedule::Continue {
        state.schedule_offset = plan.growth_epoch;
        state.schedule_epochs = config.epochs.max(plan.growth_epoch + state.phase_epochs);
    }
    let until = state.phase_epochs;
    train_observed(&mut state, data, config, until, observer)?;
    history.records.append(&mut state.history.records);
    Ok(ExperimentOutcome {
        history,
        model: state.model,
        small2,
        budget: state.budget,
    })
}
