//! Benchmark harness: JSON configuration, per-(method, seed) runs and their output files.
//!
//! Output layout under the output directory:
//!
//! ```text
//! {config_id}_{method}_seed{seed}.jsonl        one event per line
//! {config_id}_{method}_seed{seed}.config.json  effective settings of that run
//! summary.csv                                  method,config_id,seed,best_val_acc,test_acc,train_seconds
//! ```

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dbc::{run_dbc, validation_interval, DbcConfig, LoopReport, StreamRun, ValidationSource};
use crate::embed::{load_embeddings, Embedder, RandomProjection, DEFAULT_PROJECTION_DIM};
use crate::error::{Error, Result};
use crate::forest::{AdaptiveForest, ForestConfig};
use crate::hoeffding::{HoeffdingConfig, HoeffdingTree};
use crate::metrics::{write_events, write_summary, Clock, ClockKind, Event, EventKind, Method, RunMetrics, SummaryRow};
use crate::reservoir::{run_rbc, RbcConfig};
use crate::stream::{load_record_files, stream_batches, stream_batches_in_order, Dataset, ImageShape, StreamBatch};
use crate::synth::{make_synthetic_stream, SyntheticSpec};

/// Environment variable holding a comma-separated seed list that replaces the configured seeds.
pub const SEED_ENV: &str = "DRIFTBENCH_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Cifar10 {
        train: Vec<PathBuf>,
        test: PathBuf,
    },
    /// Label-prefixed planar records of any shape.
    Records {
        train: Vec<PathBuf>,
        test: PathBuf,
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSpec {
    Projection {
        #[serde(default = "default_projection_dim")]
        dim: usize,
    },
    /// Precomputed tables for the training and test files, in canonical order.
    File { train: PathBuf, test: PathBuf },
}

fn default_projection_dim() -> usize {
    DEFAULT_PROJECTION_DIM
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        EmbeddingSpec::Projection {
            dim: DEFAULT_PROJECTION_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HtSettings {
    pub batch_size: usize,
    pub validation_interval: Option<usize>,
    pub tree: HoeffdingConfig,
}

impl Default for HtSettings {
    fn default() -> Self {
        HtSettings {
            batch_size: 200,
            validation_interval: None,
            tree: HoeffdingConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArfSettings {
    pub batch_size: usize,
    pub validation_interval: Option<usize>,
    pub forest: ForestConfig,
}

impl Default for ArfSettings {
    fn default() -> Self {
        ArfSettings {
            batch_size: 200,
            validation_interval: None,
            forest: ForestConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub id: String,
    pub dataset: DatasetSpec,
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub clock: ClockKind,
    #[serde(default)]
    pub embedding: EmbeddingSpec,
    /// Fraction of the stream withheld for held-out validation (RBC/DBC in holdout mode).
    #[serde(default)]
    pub holdout_fraction: f64,
    /// Shuffle the stream with the run seed; otherwise replay canonical order.
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default)]
    pub ht: HtSettings,
    #[serde(default)]
    pub arf: ArfSettings,
    #[serde(default)]
    pub rbc: RbcConfig,
    #[serde(default)]
    pub dbc: DbcConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_true() -> bool {
    true
}

impl BenchConfig {
    /// Reads a config file; relative paths inside it resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: BenchConfig = serde_json::from_str(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSpec::Synthetic(_) => {}
            DatasetSpec::Cifar10 { train, test } | DatasetSpec::Records { train, test, .. } => {
                train.iter_mut().for_each(fix);
                fix(test);
            }
        }
        if let EmbeddingSpec::File { train, test } = &mut self.embedding {
            fix(train);
            fix(test);
        }
        fix(&mut self.output_dir);
        if let Some(d) = &mut self.dbc.export_dir {
            fix(d);
        }
    }
}

/// Seeds from [`SEED_ENV`], if set.
pub fn seeds_from_env() -> Result<Option<Vec<u64>>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::config(format!("{SEED_ENV} must be a comma-separated list of integers, got `{v}`")))
            })
            .collect::<Result<Vec<u64>>>()
            .map(Some),
        Err(_) => Ok(None),
    }
}

/// Training and test data for one benchmark.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn prepare(spec: &DatasetSpec) -> Result<Prepared> {
    let (train, test) = match spec {
        DatasetSpec::Synthetic(s) => make_synthetic_stream(s)?,
        DatasetSpec::Cifar10 { train, test } => (
            load_record_files(train, ImageShape::CIFAR10, 10)?,
            load_record_files(&[test], ImageShape::CIFAR10, 10)?,
        ),
        DatasetSpec::Records {
            train,
            test,
            channels,
            height,
            width,
            num_classes,
        } => {
            let shape = ImageShape::new(*channels, *height, *width);
            (
                load_record_files(train, shape, *num_classes)?,
                load_record_files(&[test], shape, *num_classes)?,
            )
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::config("training and test sets must both be non-empty"));
    }
    Ok(Prepared { train, test })
}

fn batches<'d>(dataset: &'d Dataset, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<StreamBatch<'d>>> {
    if shuffle {
        stream_batches(dataset, batch_size, seed)
    } else {
        stream_batches_in_order(dataset, batch_size)
    }
}

/// Online learners driven prequentially over embeddings.
trait OnlineLearner {
    fn predict_proba(&self, x: &[f32]) -> Result<Vec<f64>>;
    fn learn(&mut self, x: &[f32], label: usize) -> Result<()>;
}

impl OnlineLearner for HoeffdingTree {
    fn predict_proba(&self, x: &[f32]) -> Result<Vec<f64>> {
        HoeffdingTree::predict_proba(self, x)
    }

    fn learn(&mut self, x: &[f32], label: usize) -> Result<()> {
        self.observe(x, label)
    }
}

struct Forest {
    forest: AdaptiveForest,
    rng: ChaCha8Rng,
}

impl OnlineLearner for Forest {
    fn predict_proba(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.forest.predict_proba(x)
    }

    fn learn(&mut self, x: &[f32], label: usize) -> Result<()> {
        self.forest.train_instance(x, label, &mut self.rng)
    }
}

fn class_of(proba: &[f64]) -> usize {
    crate::nn::argmax(proba)
}

fn log_loss(proba: &[f64], label: usize) -> f64 {
    -proba[label].max(1e-12).ln()
}

/// Embedders for the stream and the test set.
pub struct Embedders {
    pub train: Embedder,
    pub test: Embedder,
}

pub fn build_embedders(spec: &EmbeddingSpec, shape: ImageShape, seed: u64) -> Result<Embedders> {
    Ok(match spec {
        EmbeddingSpec::Projection { dim } => {
            let p = RandomProjection::new(shape.len(), *dim, seed)?;
            Embedders {
                train: Embedder::Projection(p.clone()),
                test: Embedder::Projection(p),
            }
        }
        EmbeddingSpec::File { train, test } => Embedders {
            train: Embedder::Lookup(load_embeddings(train)?),
            test: Embedder::Lookup(load_embeddings(test)?),
        },
    })
}

/// Prequential run: each example is predicted, then learned. Train events carry the batch's
/// prequential accuracy and log loss; validation events the cumulative ones.
fn run_online<L: OnlineLearner>(
    learner: &mut L,
    batches: &[StreamBatch],
    test: &Dataset,
    embedders: &Embedders,
    interval: usize,
    clock: &mut Clock,
) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    let (mut hits, mut loss_sum, mut seen) = (0usize, 0.0, 0usize);
    clock.start();
    for batch in batches {
        let (mut bh, mut bl) = (0usize, 0.0);
        for (&pos, e) in batch.positions.iter().zip(&batch.examples) {
            let x = embedders.train.embed(pos, &e.image)?;
            let p = learner.predict_proba(x.values())?;
            bh += (class_of(&p) == e.label) as usize;
            bl += log_loss(&p, e.label);
            learner.learn(x.values(), e.label)?;
        }
        hits += bh;
        loss_sum += bl;
        seen += batch.len();
        clock.tick();
        let n = batch.len() as f64;
        events.push(Event::new(EventKind::Train, batch.index, bh as f64 / n, bl / n, clock.elapsed()));
        if (batch.index + 1) % interval == 0 {
            let s = seen as f64;
            events.push(Event::new(EventKind::Validate, batch.index, hits as f64 / s, loss_sum / s, clock.elapsed()));
        }
    }
    let (mut th, mut tl) = (0usize, 0.0);
    for (i, e) in test.examples.iter().enumerate() {
        let x = embedders.test.embed(i, &e.image)?;
        let p = learner.predict_proba(x.values())?;
        th += (class_of(&p) == e.label) as usize;
        tl += log_loss(&p, e.label);
    }
    let n = test.len() as f64;
    events.push(Event::new(EventKind::Test, batches.len(), th as f64 / n, tl / n, clock.elapsed()));
    Ok(events)
}

/// Runs one method with one seed; returns its events and the settings echo.
pub fn run_method(config: &BenchConfig, data: &Prepared, method: Method, seed: u64) -> Result<(Vec<Event>, serde_json::Value)> {
    let mut clock = Clock::new(config.clock);
    let shape = data.train.shape;
    let classes = data.train.num_classes;
    match method {
        Method::Ht | Method::Arf => {
            let embedders = build_embedders(&config.embedding, shape, seed)?;
            let dim = embedders.train.dim();
            let (batch_size, interval) = match method {
                Method::Ht => (config.ht.batch_size, config.ht.validation_interval),
                _ => (config.arf.batch_size, config.arf.validation_interval),
            };
            let stream = batches(&data.train, batch_size, config.shuffle, seed)?;
            let interval = validation_interval(interval, stream.len())?;
            let (events, settings) = if method == Method::Ht {
                let mut tree = HoeffdingTree::new(dim, classes, config.ht.tree)?;
                let ev = run_online(&mut tree, &stream, &data.test, &embedders, interval, &mut clock)?;
                (ev, serde_json::to_value(&config.ht)?)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let forest = AdaptiveForest::new(dim, classes, config.arf.forest, &mut rng)?;
                let mut learner = Forest { forest, rng };
                let ev = run_online(&mut learner, &stream, &data.test, &embedders, interval, &mut clock)?;
                (ev, serde_json::to_value(&config.arf)?)
            };
            Ok((events, settings))
        }
        Method::Rbc => {
            let cfg = RbcConfig {
                seed,
                ..config.rbc.clone()
            };
            let report = run_loop(config, data, seed, cfg.batch_size, cfg.validation, |run, clock| {
                run_rbc(run, &cfg, clock)
            }, &mut clock)?;
            Ok((report.events, serde_json::to_value(&cfg)?))
        }
        Method::Dbc => {
            let cfg = DbcConfig {
                seed,
                ..config.dbc.clone()
            };
            let report = run_loop(config, data, seed, cfg.batch_size, cfg.validation, |run, clock| {
                run_dbc(run, &cfg, clock)
            }, &mut clock)?;
            Ok((report.events, serde_json::to_value(&cfg)?))
        }
    }
}

fn run_loop<F>(
    config: &BenchConfig,
    data: &Prepared,
    seed: u64,
    batch_size: usize,
    validation: ValidationSource,
    f: F,
    clock: &mut Clock,
) -> Result<LoopReport>
where
    F: FnOnce(&StreamRun, &mut Clock) -> Result<LoopReport>,
{
    let (train, holdout) = if validation == ValidationSource::Holdout {
        if !(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0) {
            return Err(Error::config("holdout validation needs 0 < holdout_fraction < 1"));
        }
        let count = (config.holdout_fraction * data.train.len() as f64).round() as usize;
        let (t, h) = data.train.clone().split_holdout(count, seed);
        (t, h.examples)
    } else {
        (data.train.clone(), Vec::new())
    };
    let stream = batches(&train, batch_size, config.shuffle, seed)?;
    let run = StreamRun {
        batches: &stream,
        test: &data.test.examples,
        holdout: &holdout,
        num_classes: train.num_classes,
        shape: train.shape,
    };
    f(&run, clock)
}

/// Selection of what to run; empty vectors mean "as configured".
#[derive(Clone, Debug, Default)]
pub struct RunSelection {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

pub fn run_file_stem(config_id: &str, method: Method, seed: u64) -> String {
    format!("{config_id}_{method}_seed{seed}")
}

/// Executes every (method, seed) pair, writing per-run event logs, settings echoes and the
/// summary CSV. Returns the finished runs in execution order.
pub fn run_benchmark(config: &BenchConfig, selection: &RunSelection) -> Result<Vec<RunMetrics>> {
    let methods = if selection.methods.is_empty() {
        config.methods.clone()
    } else {
        selection.methods.clone()
    };
    let seeds = if !selection.seeds.is_empty() {
        selection.seeds.clone()
    } else if let Some(env) = seeds_from_env()? {
        env
    } else {
        config.seeds.clone()
    };
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::config("nothing to run: no methods or no seeds"));
    }
    let out = selection.output_dir.clone().unwrap_or_else(|| config.output_dir.clone());
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let data = prepare(&config.dataset)?;
    let mut runs = Vec::new();
    for &method in &methods {
        for &seed in &seeds {
            log::info!("running {method} seed {seed}");
            let (events, settings) = run_method(config, &data, method, seed)?;
            let echo = json!({
                "config_id": config.id,
                "method": method,
                "seed": seed,
                "dataset": config.dataset,
                "embedding": config.embedding,
                "clock": config.clock,
                "shuffle": config.shuffle,
                "holdout_fraction": config.holdout_fraction,
                "settings": settings,
            });
            let metrics = RunMetrics::new(method, &config.id, seed, echo, events)?;
            let stem = run_file_stem(&config.id, method, seed);
            let jsonl = out.join(format!("{stem}.jsonl"));
            let file = File::create(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
            write_events(BufWriter::new(file), &metrics.events)?;
            let echo_path = out.join(format!("{stem}.config.json"));
            fs::write(&echo_path, serde_json::to_string_pretty(&metrics.config)?).map_err(|e| Error::io(&echo_path, e))?;
            runs.push(metrics);
        }
    }
    let rows: Vec<SummaryRow> = runs.iter().map(|r| r.summary.clone()).collect();
    let summary = out.join("summary.csv");
    let file = File::create(&summary).map_err(|e| Error::io(&summary, e))?;
    write_summary(file, &rows)?;
    Ok(runs)
}
