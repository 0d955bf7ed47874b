use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cacovid::bench::{self, BenchConfig};
use cacovid::env::{generate_dataset, Split};
use cacovid::ocss::SampleScope;
use cacovid::policy::PolicyParams;
use cacovid::retention::Strategy;
use cacovid::trainer::train;
use cacovid::Error;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ASSERTION: u8 = 3;

#[derive(Parser)]
#[command(
    name = "cacovid",
    version,
    about = "Contribution-aware video token compression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy and write a checkpoint plus per-iteration metrics.
    Train(Common),
    /// Evaluate a checkpoint on held-out episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Show one token and frame draw on a fresh episode.
    SampleDemo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Exploration-space sizes and FLOPs figures.
    Complexity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        size: Size,
    },
    /// Finite-difference check of the training objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Sampler marginals against exact enumeration.
    SamplerStats {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        size: Size,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Train and evaluate every configured seed and write a report.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// Config file, or `default` for the built-in config.
    #[arg(long, default_value = "default")]
    config: PathBuf,
    /// Replaces the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for reports, checkpoints and metrics.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Budget allocation at evaluation: frame-avg, frame-ada or frame-ada-st.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Share of video tokens kept at evaluation.
    #[arg(long)]
    retention_ratio: Option<f64>,
    /// Whether training draws tokens per frame or over the whole video.
    #[arg(long, value_enum)]
    sample_scope: Option<Scope>,
}

#[derive(Args)]
struct Size {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Frame,
    Video,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}

enum Failure {
    Config(String),
    Assertion(Vec<String>),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

impl Common {
    fn resolve(&self) -> Result<BenchConfig, Failure> {
        let mut cfg = BenchConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(s) = self.strategy {
            cfg.eval.strategy = s;
        }
        if let Some(r) = self.retention_ratio {
            cfg.eval.retention_ratio = r;
        }
        if let Some(scope) = self.sample_scope {
            cfg.train.scope = match scope {
                Scope::Frame => SampleScope::Frame,
                Scope::Video => SampleScope::Video,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn seed(&self, cfg: &BenchConfig) -> u64 {
        self.seed.unwrap_or(cfg.seeds[0])
    }

    fn out_dir(&self, fallback: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
    }
}

/// Prints `report` and, when `out` is set, also writes it as `name`.
fn emit<T: Serialize>(report: &T, out: Option<&Path>, name: &str) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Failure::Other(e.to_string()))?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // a closed reader is not a failure of the command
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
        _ => {}
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), text + "\n")?;
    }
    Ok(())
}

fn verdict(failures: &[String]) -> Result<(), Failure> {
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Assertion(failures.to_vec()))
    }
}

#[derive(Serialize)]
struct TrainReport {
    config: BenchConfig,
    seed: u64,
    filtered: usize,
    iterations: usize,
    final_r_current: Option<f64>,
    checkpoint: PathBuf,
    metrics: PathBuf,
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let seed = common.seed(&cfg);
            let out = common.out_dir("out");
            std::fs::create_dir_all(&out)?;
            let mut tcfg = cfg.train_for(seed);
            let metrics = out.join("metrics.jsonl");
            tcfg.metrics_path = Some(metrics.clone());
            tcfg.diagnostic_path = Some(out.join("diagnostic.json"));
            let episodes = generate_dataset(&tcfg.env, Split::Train, tcfg.samples)?;
            let outcome = train(episodes, &tcfg)?;
            let checkpoint = out.join("policy.ckpt");
            outcome.params.save(&checkpoint)?;
            let report = TrainReport {
                config: cfg,
                seed,
                filtered: outcome.filtered,
                iterations: outcome.metrics.len(),
                final_r_current: outcome.metrics.last().map(|m| m.r_current),
                checkpoint,
                metrics,
            };
            emit(&report, Some(&out), "train.json")
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let report = bench::run_eval(&cfg, &checkpoint, common.seed(&cfg))?;
            emit(&report, common.out.as_deref(), "eval.json")?;
            verdict(&report.failures)
        }
        Command::SampleDemo { common, checkpoint } => {
            let cfg = common.resolve()?;
            let params = checkpoint.map(PolicyParams::load).transpose()?;
            let demo = bench::run_sample_demo(&cfg, common.seed(&cfg), params)?;
            emit(&demo, common.out.as_deref(), "sample-demo.json")
        }
        Command::Complexity { common, size } => {
            let mut cfg = common.resolve()?;
            let c = &mut cfg.complexity;
            c.n = size.n.unwrap_or(c.n);
            c.k = size.k.unwrap_or(c.k);
            c.lambda = size.lambda.unwrap_or(c.lambda);
            let report = bench::run_complexity(&cfg)?;
            emit(&report, common.out.as_deref(), "complexity.json")?;
            verdict(&report.failures)
        }
        Command::Gradcheck { common, instances } => {
            let mut cfg = common.resolve()?;
            if let Some(i) = instances {
                cfg.gradcheck.instances = i;
            }
            if let Some(seed) = common.seed {
                cfg.gradcheck.seed = seed;
            }
            let report = bench::run_gradcheck(&cfg.gradcheck, cfg.assert.max_grad_error)?;
            emit(&report, common.out.as_deref(), "gradcheck.json")?;
            verdict(&report.failures)
        }
        Command::SamplerStats {
            common,
            size,
            draws,
        } => {
            let mut cfg = common.resolve()?;
            let s = &mut cfg.sampler_stats;
            s.n = size.n.unwrap_or(s.n);
            s.k = size.k.unwrap_or(s.k);
            s.lambda = size.lambda.unwrap_or(s.lambda);
            s.draws = draws.unwrap_or(s.draws);
            if let Some(seed) = common.seed {
                s.seed = seed;
            }
            let report = bench::run_sampler_stats(&cfg)?;
            emit(&report, common.out.as_deref(), "sampler-stats.json")?;
            verdict(&report.failures)
        }
        Command::Run(common) => {
            let cfg = common.resolve()?;
            let out = common.out_dir("out");
            let (report, _) = bench::run_experiment(&cfg, &out)?;
            emit(&report, None, "report.json")?;
            verdict(&report.failures)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Assertion(failures)) => {
            for f in failures {
                eprintln!("assertion failed: {f}");
            }
            ExitCode::from(EXIT_ASSERTION)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_OTHER)
        }
    }
}
