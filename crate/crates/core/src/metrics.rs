//! Run events, the per-run summary row, the summary CSV and the comparison report.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "HT")]
    Ht,
    #[serde(rename = "ARF")]
    Arf,
    #[serde(rename = "RBC")]
    Rbc,
    #[serde(rename = "DBC")]
    Dbc,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ht, Method::Arf, Method::Rbc, Method::Dbc];

    pub fn id(self) -> &'static str {
        match self {
            Method::Ht => "HT",
            Method::Arf => "ARF",
            Method::Rbc => "RBC",
            Method::Dbc => "DBC",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Train,
    Validate,
    Test,
}

/// One line of a run's JSONL log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event: EventKind,
    pub batch: usize,
    pub acc: f64,
    pub loss: f64,
    pub elapsed_s: f64,
}

impl Event {
    pub fn new(event: EventKind, batch: usize, acc: f64, loss: f64, elapsed_s: f64) -> Self {
        Event {
            event,
            batch,
            acc,
            loss,
            elapsed_s,
        }
    }
}

/// Time source for `elapsed_s`. The logical clock counts processed batches, which keeps event
/// logs byte-identical across runs.
#[derive(Clone, Debug)]
pub enum Clock {
    Wall { start: Option<Instant> },
    Logical { ticks: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    #[default]
    Wall,
    Logical,
}

impl Clock {
    pub fn new(kind: ClockKind) -> Self {
        match kind {
            ClockKind::Wall => Clock::Wall { start: None },
            ClockKind::Logical => Clock::Logical { ticks: 0 },
        }
    }

    pub fn start(&mut self) {
        match self {
            Clock::Wall { start } => *start = Some(Instant::now()),
            Clock::Logical { ticks } => *ticks = 0,
        }
    }

    /// Marks one processed batch.
    pub fn tick(&mut self) {
        if let Clock::Logical { ticks } = self {
            *ticks += 1;
        }
    }

    pub fn elapsed(&self) -> f64 {
        match self {
            Clock::Wall { start } => start.map_or(0.0, |s| s.elapsed().as_secs_f64()),
            Clock::Logical { ticks } => *ticks as f64,
        }
    }
}

pub fn write_events<W: Write>(mut out: W, events: &[Event]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(|e| Error::io("<events>", e))?;
    }
    Ok(())
}

pub fn parse_events(text: &str) -> Result<Vec<Event>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i as u64 + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// One row of the summary CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub config_id: String,
    pub seed: u64,
    pub best_val_acc: f64,
    pub test_acc: f64,
    pub train_seconds: f64,
}

impl SummaryRow {
    /// Derives the row from a run's events: the maximum validation accuracy (0 without any),
    /// the single test accuracy, and the last training timestamp.
    pub fn from_events(method: Method, config_id: &str, seed: u64, events: &[Event]) -> Result<Self> {
        let tests: Vec<&Event> = events.iter().filter(|e| e.event == EventKind::Test).collect();
        let [test] = tests[..] else {
            return Err(Error::contract(format!("a run must log exactly one test event, found {}", tests.len())));
        };
        let best_val_acc = events
            .iter()
            .filter(|e| e.event == EventKind::Validate)
            .map(|e| e.acc)
            .fold(0.0, f64::max);
        let train_seconds = events
            .iter()
            .filter(|e| e.event == EventKind::Train)
            .map(|e| e.elapsed_s)
            .fold(0.0, f64::max);
        Ok(SummaryRow {
            method,
            config_id: config_id.to_string(),
            seed,
            best_val_acc,
            test_acc: test.acc,
            train_seconds,
        })
    }
}

/// A finished run: method, configuration echo, events and the derived summary.
#[derive(Clone, Debug, Serialize)]
pub struct RunMetrics {
    pub method: Method,
    pub config_id: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub events: Vec<Event>,
    pub summary: SummaryRow,
}

impl RunMetrics {
    pub fn new(method: Method, config_id: &str, seed: u64, config: serde_json::Value, events: Vec<Event>) -> Result<Self> {
        let summary = SummaryRow::from_events(method, config_id, seed, &events)?;
        Ok(RunMetrics {
            method,
            config_id: config_id.to_string(),
            seed,
            config,
            events,
            summary,
        })
    }
}

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<summary>", e))
}

pub fn read_summary<R: Read>(input: R) -> Result<Vec<SummaryRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_error))
        .collect()
}

pub fn load_summary(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_summary(file)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Aggregate over seeds for one (method, config) pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: Method,
    pub config_id: String,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub seconds_mean: f64,
    pub seconds_std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups rows by (method, config) and sorts by mean test accuracy, highest first.
pub fn report(rows: &[SummaryRow]) -> Vec<ReportRow> {
    let mut groups: Vec<((Method, &str), Vec<&SummaryRow>)> = Vec::new();
    for r in rows {
        let key = (r.method, r.config_id.as_str());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut out: Vec<ReportRow> = groups
        .into_iter()
        .map(|((method, config_id), g)| {
            let (acc_mean, acc_std) = mean_std(&g.iter().map(|r| r.test_acc).collect::<Vec<_>>());
            let (seconds_mean, seconds_std) = mean_std(&g.iter().map(|r| r.train_seconds).collect::<Vec<_>>());
            ReportRow {
                method,
                config_id: config_id.to_string(),
                runs: g.len(),
                acc_mean,
                acc_std,
                seconds_mean,
                seconds_std,
            }
        })
        .collect();
    out.sort_by(|a, b| b.acc_mean.total_cmp(&a.acc_mean));
    out
}

pub fn render_report(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<8} {:<20} {:>4}  {:>17}  {:>19}\n",
        "method", "config", "runs", "test acc", "train seconds"
    );
    for r in rows {
        s += &format!(
            "{:<8} {:<20} {:>4}  {:>7.4} ± {:<7.4}  {:>8.2} ± {:<8.2}\n",
            r.method.id(),
            r.config_id,
            r.runs,
            r.acc_mean,
            r.acc_std,
            r.seconds_mean,
            r.seconds_std
        );
    }
    s
}
