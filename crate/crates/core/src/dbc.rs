//! Distillation-based classification (DBC) and the training/validation machinery it
//! shares with the reservoir-based loop.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{distill_step, export_distilled, init_distilled, matcher_reinit, DistillConfig, ReinitSchedule};
use crate::error::{Error, Result};
use crate::metrics::{Clock, Event, EventKind};
use crate::nn::{
    argmax, build_model, cross_entropy, images_to_tensor, Arch, Model, ModelCheckpoint, Optimizer,
    OptimizerConfig, Tensor,
};
use crate::stream::{ImageShape, LabeledExample, StreamBatch};

/// Mini-batch size used inside every training epoch.
pub const MINIBATCH: usize = 32;
/// Consecutive epoch-loss increases that stop training early.
pub const EARLY_STOP_PATIENCE: usize = 3;

const MATCHER_SEED_SALT: u64 = 0x6d61_7463_6865_7200;

/// Everything a run consumes: the stream, the test set and an optional held-out split.
#[derive(Clone, Copy, Debug)]
pub struct StreamRun<'a, 'd> {
    pub batches: &'a [StreamBatch<'d>],
    pub test: &'a [LabeledExample],
    pub holdout: &'a [LabeledExample],
    pub num_classes: usize,
    pub shape: ImageShape,
}

impl StreamRun<'_, '_> {
    pub(crate) fn validate_holdout(&self, model: &Model) -> Result<(f64, f64)> {
        if self.holdout.is_empty() {
            return Err(Error::config("held-out validation requested but no held-out split was provided"));
        }
        evaluate(model, self.holdout)
    }
}

/// What validation measures against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationSource {
    /// The current (distilled) reservoir.
    Reservoir,
    /// A fraction of the stream withheld up front.
    Holdout,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub loss: f64,
    pub acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationStat {
    pub batch: usize,
    pub acc: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochStat>,
    pub validations: Vec<ValidationStat>,
    /// Running maximum of validation accuracy, starting at 0.
    pub max_acc_val: f64,
}

impl TrainingTrace {
    /// Records a validation; returns whether it set a new maximum (strictly above).
    pub fn record_validation(&mut self, batch: usize, acc: f64, loss: f64) -> bool {
        self.validations.push(ValidationStat { batch, acc, loss });
        if acc > self.max_acc_val {
            self.max_acc_val = acc;
            true
        } else {
            false
        }
    }
}

/// Stops when the epoch loss strictly increases `patience` epochs in a row.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    previous: Option<f64>,
    increases: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            previous: None,
            increases: 0,
        }
    }

    /// Feeds one epoch loss; returns `true` when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if self.previous.is_some_and(|p| loss > p) {
            self.increases += 1;
        } else {
            self.increases = 0;
        }
        self.previous = Some(loss);
        self.increases >= self.patience
    }
}

/// Runs up to `max_epochs` epochs, stopping early per [`EarlyStopping`].
pub fn run_epochs<F>(max_epochs: usize, mut epoch: F) -> Result<Vec<EpochStat>>
where
    F: FnMut(usize) -> Result<EpochStat>,
{
    let mut stop = EarlyStopping::new(EARLY_STOP_PATIENCE);
    let mut stats = Vec::new();
    for e in 0..max_epochs {
        let s = epoch(e)?;
        stats.push(s);
        if stop.observe(s.loss) {
            break;
        }
    }
    Ok(stats)
}

/// Full-reservoir cross-entropy training: shuffled mini-batches of [`MINIBATCH`], one
/// optimizer step per mini-batch.
pub fn train_model_on_reservoir<R: Rng>(
    model: &mut Model,
    inputs: &Tensor,
    labels: &[usize],
    optimizer: &mut Optimizer,
    max_epochs: usize,
    rng: &mut R,
) -> Result<Vec<EpochStat>> {
    let n = labels.len();
    if n == 0 || inputs.batch() != n {
        return Err(Error::contract("training needs a non-empty reservoir with one label per input"));
    }
    let sample_shape = inputs.shape()[1..].to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    run_epochs(max_epochs, |_| {
        order.shuffle(rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(MINIBATCH) {
            let x = Tensor::stack(&sample_shape, chunk.iter().map(|&i| inputs.row(i)))?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let out = model.forward(&x)?;
            let loss = cross_entropy(&out, &y)?;
            correct += out.rows().zip(&y).filter(|(row, &t)| argmax(row) == t).count();
            loss_sum += loss.value * chunk.len() as f64;
            model.backward(&loss.grad, false)?;
            optimizer.step(model);
        }
        Ok(EpochStat {
            loss: loss_sum / n as f64,
            acc: correct as f64 / n as f64,
        })
    })
}

const EVAL_CHUNK: usize = 256;

/// Accuracy (argmax) and mean cross-entropy; never mutates the model.
pub fn validate(model: &Model, inputs: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    if labels.is_empty() || inputs.batch() != labels.len() {
        return Err(Error::contract("validation set must be non-empty with one label per input"));
    }
    let sample_shape = &inputs.shape()[1..];
    let idx: Vec<usize> = (0..labels.len()).collect();
    let (mut correct, mut loss) = (0usize, 0.0);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = Tensor::stack(sample_shape, chunk.iter().map(|&i| inputs.row(i)))?;
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let (c, l) = score(model, &x, &y)?;
        correct += c;
        loss += l;
    }
    Ok((correct as f64 / labels.len() as f64, loss / labels.len() as f64))
}

/// [`validate`] over labeled images, converted chunk by chunk.
pub fn evaluate(model: &Model, examples: &[LabeledExample]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let (mut correct, mut loss) = (0usize, 0.0);
    for chunk in examples.chunks(EVAL_CHUNK) {
        let x = images_to_tensor(chunk.iter().map(|e| &e.image));
        let y: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let (c, l) = score(model, &x, &y)?;
        correct += c;
        loss += l;
    }
    Ok((correct as f64 / examples.len() as f64, loss / examples.len() as f64))
}

fn score(model: &Model, x: &Tensor, y: &[usize]) -> Result<(usize, f64)> {
    let out = model.infer(x)?;
    let ce = cross_entropy(&out, y)?;
    let correct = out.rows().zip(y).filter(|(row, &t)| argmax(row) == t).count();
    Ok((correct, ce.value * y.len() as f64))
}

/// `X` for "validate every X batches": the configured value, or `ceil(total / 20)`.
pub fn validation_interval(configured: Option<usize>, total_batches: usize) -> Result<usize> {
    match configured {
        Some(0) => Err(Error::config("validation interval must be at least 1")),
        Some(x) => Ok(x),
        None => Ok(total_batches.div_ceil(20).max(1)),
    }
}

/// Outcome of one RBC or DBC run.
#[derive(Clone, Debug)]
pub struct LoopReport {
    pub events: Vec<Event>,
    pub trace: TrainingTrace,
    /// The model that was tested.
    pub best: ModelCheckpoint,
    /// No validation ever improved on 0, so the final model was tested instead.
    pub fallback: bool,
    /// Most images held at once (reservoir plus the batch in flight).
    pub peak_retained_images: usize,
    pub test_acc: f64,
    pub test_loss: f64,
}

pub(crate) fn evaluate_best(
    run: &StreamRun,
    final_model: Model,
    best: Option<ModelCheckpoint>,
    trace: TrainingTrace,
    mut events: Vec<Event>,
    peak_retained_images: usize,
    clock: &mut Clock,
) -> Result<LoopReport> {
    let fallback = best.is_none();
    let best = best.unwrap_or_else(|| {
        log::warn!("no validation improved on 0; testing the final model");
        final_model.checkpoint(trace.max_acc_val)
    });
    let (test_acc, test_loss) = evaluate(best.model(), run.test)?;
    events.push(Event::new(EventKind::Test, run.batches.len(), test_acc, test_loss, clock.elapsed()));
    Ok(LoopReport {
        events,
        trace,
        best,
        fallback,
        peak_retained_images,
        test_acc,
        test_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbcConfig {
    /// Total distilled slots S.
    pub reservoir_size: usize,
    pub batch_size: usize,
    pub model: OptimizerConfig,
    pub matcher_arch: Arch,
    pub matcher: OptimizerConfig,
    /// Keep the matcher's parameters fixed during distillation.
    pub freeze_matcher: bool,
    /// Epoch cap E per batch.
    pub epochs: usize,
    /// Validate every X batches; defaults to `ceil(batches / 20)`.
    pub validation_interval: Option<usize>,
    pub matcher_reinit: ReinitSchedule,
    pub distill: DistillConfig,
    pub validation: ValidationSource,
    /// When set, distilled images are written here after every batch.
    pub export_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for DbcConfig {
    fn default() -> Self {
        DbcConfig {
            reservoir_size: 100,
            batch_size: 100,
            model: OptimizerConfig::adam(1e-4),
            matcher_arch: Arch::IntermediateCnn,
            matcher: OptimizerConfig::adam(1e-4),
            freeze_matcher: false,
            epochs: 10,
            validation_interval: None,
            matcher_reinit: ReinitSchedule::Never,
            distill: DistillConfig::default(),
            validation: ValidationSource::Reservoir,
            export_dir: None,
            seed: 0,
        }
    }
}

impl DbcConfig {
    fn check(&self, num_classes: usize) -> Result<()> {
        if self.reservoir_size < num_classes {
            return Err(Error::config(format!(
                "distilled reservoir of {} slots cannot hold {num_classes} classes",
                self.reservoir_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs per batch must be at least 1"));
        }
        Ok(())
    }
}

pub fn matcher_seed(seed: u64) -> u64 {
    seed ^ MATCHER_SEED_SALT
}

/// The DBC loop: initialize the distilled reservoir, train M on it, then per batch distill,
/// retrain M, validate on schedule keeping the best checkpoint, and finally test it.
pub fn run_dbc(run: &StreamRun, config: &DbcConfig, clock: &mut Clock) -> Result<LoopReport> {
    config.check(run.num_classes)?;
    let interval = validation_interval(config.validation_interval, run.batches.len())?;
    let (mut distilled, consumed) = init_distilled(run.batches, config.reservoir_size, run.num_classes, run.shape)?;
    let mut peak = distilled.len() + run.batches[consumed - 1].len();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = build_model(Arch::CompactNet, run.shape, run.num_classes, config.seed)?;
    let mut optimizer = config.model.build();
    let mut matcher = build_model(config.matcher_arch, run.shape, 0, matcher_seed(config.seed))?;
    let mut matcher_opt = config.matcher.build();
    let mut trace = TrainingTrace::default();
    let mut events = Vec::new();
    let mut best = None;

    clock.start();
    let (inputs, labels) = distilled.training_set();
    let epochs = train_model_on_reservoir(&mut model, &inputs, &labels, &mut optimizer, config.epochs, &mut rng)?;
    let last = *epochs.last().expect("at least one epoch");
    trace.epochs.extend(epochs);
    clock.tick();
    events.push(Event::new(EventKind::Train, consumed - 1, last.acc, last.loss, clock.elapsed()));

    for batch in &run.batches[consumed..] {
        if matcher_reinit(&mut matcher, config.matcher_reinit, batch.index, matcher_seed(config.seed))? {
            matcher_opt.reset();
        }
        let opt = (!config.freeze_matcher).then_some(&mut matcher_opt);
        let step = distill_step(&mut distilled, &batch.examples, &mut matcher, opt, &config.distill)?;
        log::debug!(
            "batch {}: distill losses {:?}, image grad norm {:.3e}, matcher update norm {:.3e}",
            batch.index,
            step.losses,
            step.image_grad_norm,
            step.matcher_update_norm
        );
        peak = peak.max(distilled.len() + batch.len());
        if let Some(dir) = &config.export_dir {
            export_distilled(dir, batch.index, &distilled)?;
        }

        let (inputs, labels) = distilled.training_set();
        let epochs = train_model_on_reservoir(&mut model, &inputs, &labels, &mut optimizer, config.epochs, &mut rng)?;
        let last = *epochs.last().expect("at least one epoch");
        trace.epochs.extend(epochs);
        clock.tick();
        events.push(Event::new(EventKind::Train, batch.index, last.acc, last.loss, clock.elapsed()));

        if (batch.index + 1) % interval == 0 {
            let (acc, loss) = match config.validation {
                ValidationSource::Reservoir => validate(&model, &inputs, &labels)?,
                ValidationSource::Holdout => run.validate_holdout(&model)?,
            };
            events.push(Event::new(EventKind::Validate, batch.index, acc, loss, clock.elapsed()));
            if trace.record_validation(batch.index, acc, loss) {
                best = Some(model.checkpoint(acc));
            }
        }
    }
    evaluate_best(run, model, best, trace, events, peak, clock)
}
