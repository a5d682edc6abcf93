//! Stratified reservoir sampling (algorithm R per class) and the reservoir-based
//! classification (RBC) loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dbc::{
    evaluate_best, train_model_on_reservoir, validate, validation_interval, LoopReport, StreamRun,
    TrainingTrace, ValidationSource,
};
use crate::error::{Error, Result};
use crate::metrics::{Clock, Event, EventKind};
use crate::nn::{build_model, images_to_tensor, Arch, Model, OptimizerConfig};
use crate::stream::LabeledExample;

/// Splits `total` slots over `classes`: `floor(total / classes)` each, with the remainder
/// going one apiece to the lowest class indices.
pub fn class_capacities(total: usize, classes: usize) -> Result<Vec<usize>> {
    if classes == 0 || total < classes {
        return Err(Error::config(format!(
            "reservoir of {total} slots cannot cover {classes} classes"
        )));
    }
    let (base, extra) = (total / classes, total % classes);
    Ok((0..classes).map(|c| base + (c < extra) as usize).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    /// Fill phase: stored at this 1-based slot.
    Stored(usize),
    /// Replaced the item at this 1-based slot.
    Replaced(usize),
    Discarded,
}

/// One class's fixed-capacity sample store.
#[derive(Clone, Debug, PartialEq)]
pub struct Stratum<T> {
    capacity: usize,
    seen: u64,
    items: Vec<T>,
}

impl<T> Stratum<T> {
    pub fn new(capacity: usize) -> Self {
        Stratum {
            capacity,
            seen: 0,
            items: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Items of this class seen so far (`i_c`).
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    /// Algorithm R with an explicit draw: `pick(i)` must return `j` uniform in `1..=i`.
    pub fn insert_with(&mut self, item: T, pick: impl FnOnce(u64) -> u64) -> InsertOutcome {
        self.seen += 1;
        let i = self.seen;
        if i as usize <= self.capacity {
            self.items.push(item);
            return InsertOutcome::Stored(i as usize);
        }
        let j = pick(i);
        debug_assert!((1..=i).contains(&j));
        if j as usize <= self.capacity {
            self.items[j as usize - 1] = item;
            InsertOutcome::Replaced(j as usize)
        } else {
            InsertOutcome::Discarded
        }
    }
}

/// Inserts `item` into its class stratum, drawing `j` uniformly from `1..=i_c`.
pub fn reservoir_insert<T, R: Rng>(stratum: &mut Stratum<T>, item: T, rng: &mut R) -> InsertOutcome {
    stratum.insert_with(item, |i| rng.random_range(1..=i))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StratifiedReservoir<T> {
    strata: Vec<Stratum<T>>,
}

impl<T> StratifiedReservoir<T> {
    pub fn new(total: usize, classes: usize) -> Result<Self> {
        Ok(StratifiedReservoir {
            strata: class_capacities(total, classes)?.into_iter().map(Stratum::new).collect(),
        })
    }

    pub fn strata(&self) -> &[Stratum<T>] {
        &self.strata
    }

    pub fn capacity(&self) -> usize {
        self.strata.iter().map(Stratum::capacity).sum()
    }

    pub fn len(&self) -> usize {
        self.strata.iter().map(|s| s.items.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(class, item)` pairs in stratum order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &T)> {
        self.strata
            .iter()
            .enumerate()
            .flat_map(|(c, s)| s.items.iter().map(move |it| (c, it)))
    }

    /// Routes each `(label, item)` to its stratum.
    pub fn update<R, I>(&mut self, items: I, rng: &mut R) -> Result<()>
    where
        R: Rng,
        I: IntoIterator<Item = (usize, T)>,
    {
        for (label, item) in items {
            let classes = self.strata.len();
            let stratum = self
                .strata
                .get_mut(label)
                .ok_or_else(|| Error::contract(format!("label {label} not below {classes}")))?;
            reservoir_insert(stratum, item, rng);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    /// Keep optimizing the same model across batches.
    Continue,
    /// Re-initialize the model before every batch (ablation).
    FromScratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RbcConfig {
    pub reservoir_size: usize,
    pub batch_size: usize,
    pub model: OptimizerConfig,
    pub epochs: usize,
    /// Validate every X batches; defaults to `ceil(batches / 20)`.
    pub validation_interval: Option<usize>,
    pub retrain: RetrainMode,
    pub validation: ValidationSource,
    pub seed: u64,
}

impl Default for RbcConfig {
    fn default() -> Self {
        RbcConfig {
            reservoir_size: 200,
            batch_size: 200,
            model: OptimizerConfig::adam(1e-4),
            epochs: 10,
            validation_interval: None,
            retrain: RetrainMode::Continue,
            validation: ValidationSource::Reservoir,
            seed: 0,
        }
    }
}

/// Reservoir-based classification: stratified sampling, retraining the classifier on the
/// reservoir after every batch, validating on schedule and testing the best checkpoint.
pub fn run_rbc(run: &StreamRun, config: &RbcConfig, clock: &mut Clock) -> Result<LoopReport> {
    if run.batches.is_empty() {
        return Err(Error::Initialization {
            missing: (0..run.num_classes).collect(),
        });
    }
    if config.epochs == 0 {
        return Err(Error::config("epochs per batch must be at least 1"));
    }
    let interval = validation_interval(config.validation_interval, run.batches.len())?;
    let mut reservoir: StratifiedReservoir<&LabeledExample> =
        StratifiedReservoir::new(config.reservoir_size, run.num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fresh = |seed: u64| -> Result<Model> { build_model(Arch::CompactNet, run.shape, run.num_classes, seed) };
    let mut model = fresh(config.seed)?;
    let mut optimizer = config.model.build();
    let mut trace = TrainingTrace::default();
    let mut events = Vec::new();
    let mut best = None;
    let mut peak = 0;

    clock.start();
    for batch in run.batches {
        reservoir.update(batch.examples.iter().map(|e| (e.label, *e)), &mut rng)?;
        peak = peak.max(reservoir.len() + batch.len());
        if config.retrain == RetrainMode::FromScratch {
            model = fresh(config.seed.wrapping_add(batch.index as u64 + 1))?;
            optimizer = config.model.build();
        }
        let (inputs, labels) = reservoir_tensor(&reservoir);
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

fn reservoir_tensor(reservoir: &StratifiedReservoir<&LabeledExample>) -> (crate::nn::Tensor, Vec<usize>) {
    let inputs = images_to_tensor(reservoir.iter().map(|(_, e)| &e.image));
    let labels = reservoir.iter().map(|(c, _)| c).collect();
    (inputs, labels)
}
