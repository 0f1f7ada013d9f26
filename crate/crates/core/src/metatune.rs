//! Meta-fine-tuning engines: inner-loop adaptation, the meta update, a
//! plain-SGD baseline, and forgetting measurement.
//!
//! The engines are generic over the task loss, so the closed-form quadratic
//! oracles in the tests exercise exactly the code path the segmentation
//! network runs through. A task loss builds a scalar loss node on a shared
//! tape from parameter values and one task datum.
//!
//! Second-order mode differentiates through the inner update (the adapted
//! parameters keep their dependence on the initial ones); first-order mode
//! treats the inner gradient as a constant, which reduces the meta gradient
//! to the outer gradient evaluated at the adapted parameters.

use crate::autodiff::{AdError, Tape, Val};
use crate::metrics::{dice_report, MetricsError};
use crate::rng::subseed_indexed;
use crate::sampler::{
    decompose_tasks, order_active, order_log_rows, order_naive, order_passive, split_inner_outer,
    OrderMethod, PoolSide, SampleRef, SamplerError,
};
use crate::segnet::{self, ParamVector, SegNetError};
use crate::tensor::{Sample, Tensor};
use rayon::prelude::*;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::time::{Duration, Instant};

#[derive(Debug)]
pub enum MetaError {
    Config(String),
    Empty(&'static str),
    NonFinite { context: String },
    /// Failure while processing one (inner, outer) pair of a meta batch.
    Pair { index: usize, source: Box<MetaError> },
    /// Failure at one meta step of a run.
    Step { index: usize, source: Box<MetaError> },
    Ad(AdError),
    Net(SegNetError),
    Sampler(SamplerError),
    Metrics(MetricsError),
}

impl fmt::Display for MetaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetaError::Config(msg) => write!(f, "invalid tuning config: {msg}"),
            MetaError::Empty(what) => write!(f, "{what} must be nonempty"),
            MetaError::NonFinite { context } => write!(f, "non-finite value: {context}"),
            MetaError::Pair { index, source } => write!(f, "pair {index}: {source}"),
            MetaError::Step { index, source } => write!(f, "meta step {index}: {source}"),
            MetaError::Ad(e) => write!(f, "{e}"),
            MetaError::Net(e) => write!(f, "{e}"),
            MetaError::Sampler(e) => write!(f, "{e}"),
            MetaError::Metrics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MetaError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            MetaError::Pair { source, .. } | MetaError::Step { source, .. } => Some(source),
            MetaError::Ad(e) => Some(e),
            MetaError::Net(e) => Some(e),
            MetaError::Sampler(e) => Some(e),
            MetaError::Metrics(e) => Some(e),
            _ => None,
        }
    }
}

impl From<AdError> for MetaError {
    fn from(e: AdError) -> Self {
        MetaError::Ad(e)
    }
}

impl From<SegNetError> for MetaError {
    fn from(e: SegNetError) -> Self {
        MetaError::Net(e)
    }
}

impl From<SamplerError> for MetaError {
    fn from(e: SamplerError) -> Self {
        MetaError::Sampler(e)
    }
}

impl From<MetricsError> for MetaError {
    fn from(e: MetricsError) -> Self {
        MetaError::Metrics(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaMode {
    SecondOrder,
    FirstOrder,
}

impl MetaMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetaMode::SecondOrder => "second",
            MetaMode::FirstOrder => "first",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "second" => Some(MetaMode::SecondOrder),
            "first" => Some(MetaMode::FirstOrder),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetaTuneConfig {
    /// Inner-loop learning rate.
    pub alpha: f64,
    /// Meta learning rate.
    pub beta: f64,
    pub meta_steps: usize,
    /// Gradient steps per inner adaptation.
    pub inner_steps: usize,
    /// Fraction of a patient's slices assigned to the inner pool.
    pub split_ratio: f64,
    /// Good/bad partition threshold on mean foreground Dice.
    pub tau: f64,
    pub mode: MetaMode,
    pub method: OrderMethod,
    pub seed: u64,
}

impl Default for MetaTuneConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.005,
            meta_steps: 30,
            inner_steps: 1,
            split_ratio: 0.5,
            tau: 0.5,
            mode: MetaMode::SecondOrder,
            method: OrderMethod::Active,
            seed: 0,
        }
    }
}

impl MetaTuneConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        if !(self.alpha > 0.0) {
            return Err(MetaError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta > 0.0) {
            return Err(MetaError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.inner_steps == 0 {
            return Err(MetaError::Config("inner_steps must be at least 1".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(MetaError::Config(format!(
                "split_ratio must lie strictly between 0 and 1, got {}",
                self.split_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(MetaError::Config(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

/// One patient's labelled slices, the unit a meta batch is drawn from.
#[derive(Debug, Clone, Copy)]
pub struct PatientTasks<'a> {
    pub id: &'a str,
    pub samples: &'a [Sample],
}

/// Flatten patient sets into one slice list for evaluation.
pub fn all_samples<'a>(sets: &[PatientTasks<'a>]) -> Vec<&'a Sample> {
    sets.iter().flat_map(|p| p.samples.iter()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub outer_loss: f64,
    pub source_val_dsc: f64,
    pub target_val_dsc: f64,
}

#[derive(Debug)]
pub struct TuneResult {
    pub records: Vec<StepRecord>,
    pub final_params: ParamVector,
    pub config: MetaTuneConfig,
    pub wall_time: Duration,
    /// Audit rows for every consumed schedule (empty for the naive method);
    /// format as in `sampler::order_log_rows`.
    pub order_log: String,
}

impl TuneResult {
    /// Trajectory CSV: header plus one row per completed step, 6 decimals.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("step,outer_loss,source_val_dsc,target_val_dsc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                r.step, r.outer_loss, r.source_val_dsc, r.target_val_dsc
            ));
        }
        out
    }
}

/// Pins a task-loss closure to the higher-rank signature the engines expect.
pub fn task_loss_fn<T, F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Val<'t>], &T) -> Result<Val<'t>, AdError>,
{
    f
}

/// Take `steps` gradient steps on `loss(theta; task)`, building the updates
/// on the tape. With `create_graph` the adapted parameters stay
/// differentiable with respect to `theta`; without it the inner gradients
/// enter as constants, so later differentiation sees only the identity path.
pub fn inner_adapt<'t, T, F>(
    tape: &'t Tape,
    theta: &[Val<'t>],
    task: &T,
    loss: &F,
    alpha: f64,
    steps: usize,
    create_graph: bool,
) -> Result<Vec<Val<'t>>, MetaError>
where
    F: for<'s> Fn(&'s Tape, &[Val<'s>], &T) -> Result<Val<'s>, AdError>,
{
    if !(alpha > 0.0) {
        return Err(MetaError::Config(format!("alpha must be positive, got {alpha}")));
    }
    if steps == 0 {
        return Err(MetaError::Config("inner adaptation needs at least 1 step".into()));
    }
    let mut current: Vec<Val<'t>> = theta.to_vec();
    for step in 0..steps {
        let l = loss(tape, &current, task)?;
        let value = l.scalar()?;
        if !value.is_finite() {
            return Err(MetaError::NonFinite {
                context: format!("inner loss at adaptation step {step}"),
            });
        }
        let grads = tape.grad(l, &current, create_graph)?;
        for g in &grads {
            if !g.tensor().is_finite() {
                return Err(MetaError::NonFinite {
                    context: format!("inner gradient at adaptation step {step}"),
                });
            }
        }
        current = current
            .iter()
            .zip(&grads)
            .map(|(&p, &g)| tape.add(p, tape.scale(g, -alpha)?))
            .collect::<Result<_, AdError>>()?;
    }
    Ok(current)
}

/// Meta gradient of the summed outer loss over a batch of (inner, outer)
/// task pairs, plus the outer loss value.
pub fn meta_gradient<T, F>(
    params: &[Tensor],
    pairs: &[(T, T)],
    loss: &F,
    alpha: f64,
    inner_steps: usize,
    mode: MetaMode,
) -> Result<(Vec<Tensor>, f64), MetaError>
where
    F: for<'t> Fn(&'t Tape, &[Val<'t>], &T) -> Result<Val<'t>, AdError>,
{
    if pairs.is_empty() {
        return Err(MetaError::Empty("meta-batch pairs"));
    }
    let tape = Tape::new();
    let theta: Vec<Val<'_>> = params.iter().map(|t| tape.param(t.clone())).collect();
    let create_graph = mode == MetaMode::SecondOrder;
    let mut total: Option<Val<'_>> = None;
    for (index, (inner_task, outer_task)) in pairs.iter().enumerate() {
        let wrap = |e: MetaError| MetaError::Pair { index, source: Box::new(e) };
        let adapted =
            inner_adapt(&tape, &theta, inner_task, loss, alpha, inner_steps, create_graph)
                .map_err(wrap)?;
        let outer = loss(&tape, &adapted, outer_task).map_err(|e| wrap(e.into()))?;
        let value = outer.scalar().map_err(|e| wrap(e.into()))?;
        if !value.is_finite() {
            return Err(wrap(MetaError::NonFinite { context: "outer loss".into() }));
        }
        total = Some(match total {
            None => outer,
            Some(t) => tape.add(t, outer)?,
        });
    }
    let total = total.expect("pairs nonempty");
    let outer_loss = total.scalar()?;
    let grads = tape.grad(total, &theta, false)?;
    let grads: Vec<Tensor> = grads.iter().map(|g| g.tensor().as_ref().clone()).collect();
    for g in &grads {
        if !g.is_finite() {
            return Err(MetaError::NonFinite { context: "meta gradient".into() });
        }
    }
    Ok((grads, outer_loss))
}

fn step_tensors(params: &[Tensor], grads: &[Tensor], lr: f64) -> Result<Vec<Tensor>, MetaError> {
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            let data = p.data().iter().zip(g.data()).map(|(&a, &b)| a - lr * b).collect();
            Tensor::new(p.shape().to_vec(), data).map_err(|e| MetaError::NonFinite {
                context: format!("updated parameters: {e}"),
            })
        })
        .collect()
}

/// One meta update: theta - beta * meta_gradient. Returns the new
/// parameters and the outer loss at the old ones.
pub fn meta_step<T, F>(
    params: &[Tensor],
    pairs: &[(T, T)],
    loss: &F,
    config: &MetaTuneConfig,
) -> Result<(Vec<Tensor>, f64), MetaError>
where
    F: for<'t> Fn(&'t Tape, &[Val<'t>], &T) -> Result<Val<'t>, AdError>,
{
    config.validate()?;
    let (grads, outer_loss) =
        meta_gradient(params, pairs, loss, config.alpha, config.inner_steps, config.mode)?;
    let new_params = step_tensors(params, &grads, config.beta)?;
    Ok((new_params, outer_loss))
}

/// Mean over slices of each slice's mean foreground Dice under `params`.
pub fn mean_foreground_dsc(
    params: &ParamVector,
    samples: &[&Sample],
) -> Result<f64, MetaError> {
    if samples.is_empty() {
        return Err(MetaError::Empty("evaluation set"));
    }
    let num_classes = params.config().num_classes as u8;
    let scores: Vec<f64> = samples
        .par_iter()
        .map(|sample| {
            let pred = segnet::predict(params, &sample.image)?;
            Ok(dice_report(&pred, &sample.labels, num_classes)?.mean_foreground)
        })
        .collect::<Result<_, MetaError>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean over slices of one class's Dice under `params`.
pub fn class_dsc(params: &ParamVector, samples: &[&Sample], class: u8) -> Result<f64, MetaError> {
    if samples.is_empty() {
        return Err(MetaError::Empty("evaluation set"));
    }
    let num_classes = params.config().num_classes as u8;
    let scores: Vec<f64> = samples
        .par_iter()
        .map(|sample| {
            let pred = segnet::predict(params, &sample.image)?;
            let report = dice_report(&pred, &sample.labels, num_classes)?;
            Ok(report.per_class[class as usize])
        })
        .collect::<Result<_, MetaError>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Drop in source-validation Dice from `theta0` to `theta_final`; positive
/// means the tuned model forgot some of the source domain.
pub fn forgetting(
    theta0: &ParamVector,
    theta_final: &ParamVector,
    source_val: &[&Sample],
) -> Result<f64, MetaError> {
    Ok(mean_foreground_dsc(theta0, source_val)? - mean_foreground_dsc(theta_final, source_val)?)
}

fn segnet_task_loss(
    config: segnet::NetworkConfig,
) -> impl for<'t> Fn(&'t Tape, &[Val<'t>], &&Sample) -> Result<Val<'t>, AdError> {
    move |tape, params, sample| {
        let image = tape.constant(sample.image.clone());
        let labels = Rc::new(sample.labels.clone());
        segnet::loss(tape, &config, params, image, &labels)
    }
}

fn patient_refs(patient: &PatientTasks<'_>) -> Vec<SampleRef> {
    (0..patient.samples.len())
        .map(|slice| SampleRef { patient: patient.id.to_string(), slice, pool: PoolSide::Inner })
        .collect()
}

/// Meta-tune `theta0` on the target domain.
///
/// A meta batch covers one target-train patient (patients cycle in order):
/// its slices are split into inner and outer pools, both pools are
/// partitioned by the current model's Dice, and `config.method` fixes the
/// paired schedule. The schedule is then consumed one pair per meta step,
/// each applying one meta update, so the order genuinely shapes the
/// trajectory; scores go stale within a batch but never survive into the
/// next one, where the partition is rebuilt at the current parameters.
/// Source- and target-validation Dice are recorded after every meta step.
pub fn run_meta_tune(
    theta0: &ParamVector,
    target_train: &[PatientTasks<'_>],
    source_val: &[PatientTasks<'_>],
    target_val: &[PatientTasks<'_>],
    config: &MetaTuneConfig,
) -> Result<TuneResult, MetaError> {
    config.validate()?;
    if config.method == OrderMethod::Naive {
        return Err(MetaError::Config(
            "the naive method has no meta schedule; use run_naive_tune".into(),
        ));
    }
    if target_train.is_empty() {
        return Err(MetaError::Empty("target training set"));
    }
    let source_val = all_samples(source_val);
    let target_val = all_samples(target_val);
    if source_val.is_empty() {
        return Err(MetaError::Empty("source validation set"));
    }
    if target_val.is_empty() {
        return Err(MetaError::Empty("target validation set"));
    }

    let started = Instant::now();
    let task_loss = segnet_task_loss(theta0.config().clone());
    let mut theta = theta0.clone();
    let mut records = Vec::with_capacity(config.meta_steps);
    let mut order_log = String::new();
    let mut batch = 0usize;
    // Pairs remaining in the current batch's schedule, next pair last.
    let mut pending: Vec<(&Sample, &Sample)> = Vec::new();

    for step in 0..config.meta_steps {
        let wrap = |e: MetaError| MetaError::Step { index: step, source: Box::new(e) };
        if pending.is_empty() {
            let patient = &target_train[batch % target_train.len()];
            let refs = patient_refs(patient);
            let split_seed = subseed_indexed(config.seed, "split", batch as u64);
            let (inner_refs, outer_refs) = split_inner_outer(&refs, config.split_ratio, split_seed)
                .map_err(|e| wrap(e.into()))?;
            let pool_of = |refs: &[SampleRef]| -> Vec<(SampleRef, &Sample)> {
                refs.iter().map(|r| (r.clone(), &patient.samples[r.slice])).collect()
            };
            let inner_part = decompose_tasks(&theta, &pool_of(&inner_refs), config.tau)
                .map_err(|e| wrap(e.into()))?;
            let outer_part = decompose_tasks(&theta, &pool_of(&outer_refs), config.tau)
                .map_err(|e| wrap(e.into()))?;
            let schedule = match config.method {
                OrderMethod::Passive => {
                    let order_seed = subseed_indexed(config.seed, "order", batch as u64);
                    order_passive(&inner_part, &outer_part, order_seed)
                }
                OrderMethod::Active => order_active(&inner_part, &outer_part),
                OrderMethod::Naive => unreachable!("rejected above"),
            }
            .map_err(|e| wrap(e.into()))?;
            order_log.push_str(&order_log_rows(batch + 1, &schedule));
            pending = schedule
                .pairs
                .iter()
                .rev()
                .map(|p| {
                    let outer = p.outer.as_ref().expect("meta schedules always pair");
                    (&patient.samples[p.inner.sample.slice], &patient.samples[outer.sample.slice])
                })
                .collect();
            batch += 1;
        }

        let pair = pending.pop().expect("schedule pairs are never empty");
        let (new_tensors, outer_loss) =
            meta_step(theta.tensors(), &[pair], &task_loss, config).map_err(wrap)?;
        theta = ParamVector::from_tensors(theta.config(), new_tensors)
            .map_err(|e| wrap(e.into()))?;

        records.push(StepRecord {
            step: step + 1,
            outer_loss,
            source_val_dsc: mean_foreground_dsc(&theta, &source_val).map_err(wrap)?,
            target_val_dsc: mean_foreground_dsc(&theta, &target_val).map_err(wrap)?,
        });
    }

    Ok(TuneResult {
        records,
        final_params: theta,
        config: config.clone(),
        wall_time: started.elapsed(),
        order_log,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the training slices; epoch 0 evaluates the
    /// untrained parameters without stepping.
    pub train_loss: f64,
    pub val_dsc: f64,
}

#[derive(Debug)]
pub struct PretrainResult {
    pub records: Vec<EpochRecord>,
    pub final_params: ParamVector,
    pub wall_time: Duration,
}

impl PretrainResult {
    /// CSV: header plus the epoch-0 row and one row per epoch, 6 decimals.
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,source_val_dsc\n");
        for r in &self.records {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.epoch, r.train_loss, r.val_dsc));
        }
        out
    }
}

/// Supervised pre-training: `epochs` seeded-shuffle passes of per-sample
/// SGD over the training slices, recording validation Dice after each.
/// Always starts with an epoch-0 record evaluating `theta0` untouched.
pub fn run_pretrain(
    theta0: &ParamVector,
    train: &[PatientTasks<'_>],
    val: &[PatientTasks<'_>],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<PretrainResult, MetaError> {
    if !(lr > 0.0) {
        return Err(MetaError::Config(format!("learning rate must be positive, got {lr}")));
    }
    let train: Vec<&Sample> = all_samples(train);
    let val = all_samples(val);
    if train.is_empty() {
        return Err(MetaError::Empty("training set"));
    }
    if val.is_empty() {
        return Err(MetaError::Empty("validation set"));
    }

    let started = Instant::now();
    let mut theta = theta0.clone();
    let mut records = Vec::with_capacity(epochs + 1);
    let initial_loss: f64 = train
        .par_iter()
        .map(|s| segnet::sample_loss(&theta, s))
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .sum::<f64>()
        / train.len() as f64;
    records.push(EpochRecord {
        epoch: 0,
        train_loss: initial_loss,
        val_dsc: mean_foreground_dsc(&theta, &val)?,
    });

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=epochs {
        let mut rng =
            crate::rng::Rng::from_seed(subseed_indexed(seed, "pretrain-epoch", epoch as u64 - 1));
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for &i in &order {
            loss_sum += segnet::sgd_step(&mut theta, train[i], lr)
                .map_err(|e| MetaError::Step { index: epoch, source: Box::new(e.into()) })?;
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_dsc: mean_foreground_dsc(&theta, &val)?,
        });
    }

    Ok(PretrainResult { records, final_params: theta, wall_time: started.elapsed() })
}

/// Samples a naive pass consumes between two trajectory records: the same
/// count one meta step consumes (`inner_steps` inner-loop samples plus one
/// outer sample), so record k of either method sits at the same cumulative
/// sample budget and the trajectories are comparable step for step.
pub fn naive_block_size(inner_steps: usize) -> usize {
    inner_steps + 1
}

/// Plain-SGD baseline: shuffled passes over all target-train slices at
/// learning rate alpha, recording validation Dice after every block of
/// `naive_block_size` samples. `outer_loss` records the block's mean
/// training loss. Ignores beta, tau, mode, and method.
pub fn run_naive_tune(
    theta0: &ParamVector,
    target_train: &[PatientTasks<'_>],
    source_val: &[PatientTasks<'_>],
    target_val: &[PatientTasks<'_>],
    config: &MetaTuneConfig,
) -> Result<TuneResult, MetaError> {
    config.validate()?;
    if target_train.is_empty() {
        return Err(MetaError::Empty("target training set"));
    }
    let source_val = all_samples(source_val);
    let target_val = all_samples(target_val);
    if source_val.is_empty() {
        return Err(MetaError::Empty("source validation set"));
    }
    if target_val.is_empty() {
        return Err(MetaError::Empty("target validation set"));
    }

    let started = Instant::now();
    let mut lookup: HashMap<(&str, usize), &Sample> = HashMap::new();
    let mut pool = Vec::new();
    for patient in target_train {
        for (slice, sample) in patient.samples.iter().enumerate() {
            lookup.insert((patient.id, slice), sample);
            pool.push(SampleRef {
                patient: patient.id.to_string(),
                slice,
                pool: PoolSide::Inner,
            });
        }
    }
    let block = naive_block_size(config.inner_steps);

    let mut theta = theta0.clone();
    let mut records = Vec::with_capacity(config.meta_steps);
    let mut epoch = 0u64;
    let mut queue: Vec<SampleRef> = Vec::new();
    for step in 0..config.meta_steps {
        let wrap = |e: MetaError| MetaError::Step { index: step, source: Box::new(e) };
        let mut loss_sum = 0.0;
        for _ in 0..block {
            if queue.is_empty() {
                let seed = subseed_indexed(config.seed, "naive-epoch", epoch);
                epoch += 1;
                let schedule = order_naive(&pool, seed).map_err(|e| wrap(e.into()))?;
                queue = schedule.pairs.into_iter().map(|p| p.inner.sample).collect();
                queue.reverse();
            }
            let r = queue.pop().expect("refilled above");
            let sample = lookup[&(r.patient.as_str(), r.slice)];
            loss_sum +=
                segnet::sgd_step(&mut theta, sample, config.alpha).map_err(|e| wrap(e.into()))?;
        }
        records.push(StepRecord {
            step: step + 1,
            outer_loss: loss_sum / block as f64,
            source_val_dsc: mean_foreground_dsc(&theta, &source_val).map_err(wrap)?,
            target_val_dsc: mean_foreground_dsc(&theta, &target_val).map_err(wrap)?,
        });
    }

    Ok(TuneResult {
        records,
        final_params: theta,
        config: config.clone(),
        wall_time: started.elapsed(),
        order_log: String::new(),
    })
}
