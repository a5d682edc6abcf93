use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{CommandFactory, Parser, Subcommand};
use driftbench_core::harness::{run_benchmark, BenchConfig, DatasetSpec, RunSelection};
use driftbench_core::metrics::{load_summary, render_report, report, Method};
use driftbench_core::stream::write_records;
use driftbench_core::synth::{make_synthetic_stream, SyntheticSpec};

#[derive(Parser)]
#[command(name = "driftbench", version, about = "Streaming image classification benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured (method, seed) pair and write event logs plus summary.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Restrict to these methods (HT, ARF, RBC, DBC); repeatable.
        #[arg(long = "method")]
        methods: Vec<Method>,
        /// Replace the configured seeds; repeatable.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-method mean ± stddev of test accuracy and train seconds.
    Report { summary: PathBuf },
    /// Generate a synthetic fixture as record files.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            methods,
            seeds,
            out,
        } => {
            let cfg = BenchConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let selection = RunSelection {
                methods,
                seeds,
                output_dir: out,
            };
            let runs = run_benchmark(&cfg, &selection)?;
            let rows: Vec<_> = runs.into_iter().map(|r| r.summary).collect();
            print!("{}", render_report(&report(&rows)));
        }
        Command::Report { summary } => {
            let rows = load_summary(&summary).with_context(|| format!("reading {}", summary.display()))?;
            print!("{}", render_report(&report(&rows)));
        }
        Command::Synth { spec, out } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SyntheticSpec = serde_json::from_str(&text).context("parsing synthetic spec")?;
            let (train, test) = make_synthetic_stream(&spec)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_records(out.join("train.bin"), &train.examples)?;
            write_records(out.join("test.bin"), &test.examples)?;
            let dataset = DatasetSpec::Records {
                train: vec!["train.bin".into()],
                test: "test.bin".into(),
                channels: spec.channels,
                height: spec.height,
                width: spec.width,
                num_classes: spec.num_classes,
            };
            std::fs::write(out.join("dataset.json"), serde_json::to_string_pretty(&dataset)?)?;
            println!("wrote {} stream and {} test examples to {}", train.len(), test.len(), out.display());
        }
    }
    Ok(())
}

fn usage_for(subcommand: Option<&str>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match subcommand.and_then(|name| cmd.find_subcommand_mut(name)) {
        Some(sub) => sub.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let rendered = e.render().to_string();
            eprint!("{rendered}");
            if !rendered.contains("Usage:") {
                eprintln!("\n{}", usage_for(std::env::args().nth(1).as_deref()));
            }
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
