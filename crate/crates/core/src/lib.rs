//! Streaming image classification under fixed memory budgets.
//!
//! Four learners share one stream abstraction: a Hoeffding tree and an adaptive random forest
//! over image embeddings, and two CNN classifiers trained on a bounded image store, either a
//! stratified reservoir sample (RBC) or a reservoir of distilled images (DBC). The [`harness`]
//! runs them from a JSON config and writes comparable metrics.

pub mod dbc;
pub mod distill;
pub mod embed;
pub mod error;
pub mod forest;
pub mod harness;
pub mod hoeffding;
pub mod metrics;
pub mod nn;
pub mod reservoir;
pub mod stream;
pub mod synth;

pub use dbc::{run_dbc, DbcConfig, LoopReport, StreamRun, TrainingTrace, ValidationSource};
pub use distill::{distill_step, init_distilled, DistillConfig, DistilledReservoir, ReinitSchedule};
pub use embed::{load_embeddings, write_embeddings, Embedder, Embedding, EmbeddingTable, RandomProjection};
pub use error::{Error, Result};
pub use forest::{AdaptiveForest, ForestConfig};
pub use harness::{run_benchmark, BenchConfig, RunSelection};
pub use hoeffding::{HoeffdingConfig, HoeffdingTree};
pub use metrics::{Clock, ClockKind, Event, EventKind, Method, RunMetrics, SummaryRow};
pub use reservoir::{run_rbc, RbcConfig, StratifiedReservoir};
pub use stream::{load_cifar10_binary, stream_batches, Dataset, Image, ImageShape, LabeledExample, StreamBatch};
pub use synth::{make_synthetic_stream, SyntheticSpec};
