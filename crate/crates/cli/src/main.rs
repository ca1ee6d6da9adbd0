use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use supernet_core::environment::{generate_suite, read_suite, write_suite, Environment, QueryInstance};
use supernet_core::error::Error;
use supernet_core::harness::{
    self, checkpoint::checkpoint_id, load_checkpoint, write_report, Checkpoint, FrontierPoint, RunConfig,
};
use supernet_core::runtime::{emit_trace, parse_traces, run_inference, verify_trace, RolloutOptions, TraceMeta};

#[derive(Parser)]
#[command(name = "supernet", version, about = "Train, run and audit supernet workflow controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config (JSON). Defaults apply to every missing field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.reward.lambda=0.3`.
    #[arg(long = "set", value_name = "KEY=JSON")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> supernet_core::error::Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        base.with_overrides(&self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the three-phase curriculum for each configured seed.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Train only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out suite (or a suite file).
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        suite: Option<PathBuf>,
        /// Write per-instance results as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Answer suite instances and write one audit trace per instance.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        suite: Option<PathBuf>,
        /// Only this instance id.
        #[arg(long)]
        instance: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trace destination; stdout when absent.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Sample from the policy instead of decoding greedily.
        #[arg(long)]
        sample: bool,
    },
    /// Train and evaluate across a grid of cost weights.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated λ values; defaults to the config grid.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain with each component removed and compare.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute every logged distribution from a checkpoint.
    TraceVerify {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Generate a synthetic query suite as JSONL.
    GenSuite {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failures carrying the exit code they map to.
enum Failure {
    Config(anyhow::Error),
    Divergence(anyhow::Error),
    Other(anyhow::Error),
    Mismatch(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) => Failure::Config(e.into()),
            Error::NonFiniteLoss(_) => Failure::Divergence(e.into()),
            e => Failure::Other(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(inner) => inner.into(),
            Err(e) => Failure::Other(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.into())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Divergence(e)) => {
            eprintln!("training diverged: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Mismatch(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Train {
            cfg,
            seed,
            out,
            resume,
        } => train(&cfg.load()?, seed, out, resume),
        Command::Eval {
            cfg,
            checkpoint,
            suite,
            report,
        } => eval(&cfg.load()?, &checkpoint, suite.as_deref(), report.as_deref()),
        Command::Infer {
            cfg,
            checkpoint,
            suite,
            instance,
            seed,
            trace,
            sample,
        } => infer(&cfg.load()?, &checkpoint, suite.as_deref(), instance, seed, trace.as_deref(), !sample),
        Command::Sweep { cfg, lambdas, out } => sweep(&cfg.load()?, lambdas, out),
        Command::Ablate { cfg, out } => ablate(&cfg.load()?, out),
        Command::TraceVerify {
            cfg,
            checkpoint,
            trace,
            suite,
            tol,
        } => trace_verify(&cfg.load()?, &checkpoint, &trace, suite.as_deref(), tol),
        Command::GenSuite { cfg, seed, size, out } => gen_suite(&cfg.load()?, seed, size, out.as_deref()),
    }
}

fn output_dir(config: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| config.output_dir.clone())
}

fn train(config: &RunConfig, seed: Option<u64>, out: Option<PathBuf>, resume: Option<PathBuf>) -> CliResult {
    let dir = output_dir(config, out);
    let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| config.seeds.clone());
    if let Some(path) = resume {
        let [seed] = seeds[..] else {
            return Err(Failure::Config(anyhow::anyhow!("--resume needs exactly one seed")));
        };
        let env = config.build_environment()?;
        let ck = load_checkpoint(&path, env.graph.fingerprint())?;
        let suite = config.train_suite(&env)?;
        let mut trainer = supernet_core::training::Trainer::resume(env, config.train.clone(), suite, &ck)?;
        trainer.run()?;
        let seed_dir = dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&seed_dir)?;
        let id = harness::save_checkpoint(&trainer.checkpoint(harness::run_meta(config, seed)), &seed_dir.join("model.bin"))?;
        write_report(config, &trainer.reports, &seed_dir.join("phase_report.csv"))?;
        println!("seed {seed}: checkpoint {id}");
        return Ok(());
    }
    for seed in seeds {
        let seed_dir = dir.join(format!("seed_{seed}"));
        info!("training seed {seed} into {}", seed_dir.display());
        let outcome = harness::train_run(config, seed, Some(&seed_dir))?;
        println!("seed {seed}: checkpoint {}", outcome.checkpoint.id());
    }
    Ok(())
}

fn load_params(env: &Environment, path: &Path) -> Result<Checkpoint, Failure> {
    Ok(load_checkpoint(path, env.graph.fingerprint())
        .with_context(|| format!("loading {}", path.display()))?)
}

fn load_suite(config: &RunConfig, env: &Environment, path: Option<&Path>) -> Result<Vec<QueryInstance>, Failure> {
    match path {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Ok(read_suite(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?)
        }
        None => Ok(config.eval_suite(env)?),
    }
}

fn eval(config: &RunConfig, checkpoint: &Path, suite: Option<&Path>, report: Option<&Path>) -> CliResult {
    let env = config.build_environment()?;
    let ck = load_params(&env, checkpoint)?;
    let suite = load_suite(config, &env, suite)?;
    let r = harness::evaluate(&env, &ck.params, &suite, &config.eval, &config.train.rollout)?;
    if let Some(p) = report {
        write_report(config, &r.instances, p)?;
    }
    println!("{}", serde_json::to_string_pretty(&r.metrics).expect("metrics serialize"));
    Ok(())
}

fn infer(
    config: &RunConfig,
    checkpoint: &Path,
    suite: Option<&Path>,
    instance: Option<String>,
    seed: u64,
    trace: Option<&Path>,
    greedy: bool,
) -> CliResult {
    let env = config.build_environment()?;
    let bytes = std::fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let ck = load_params(&env, checkpoint)?;
    let mut suite = load_suite(config, &env, suite)?;
    if let Some(id) = &instance {
        suite.retain(|q| &q.id == id);
        if suite.is_empty() {
            return Err(Failure::Config(anyhow::anyhow!("no instance with id `{id}`")));
        }
    }
    let meta = TraceMeta {
        checkpoint_id: checkpoint_id(&bytes),
        lambda: config.train.reward.lambda,
    };
    let opts = RolloutOptions {
        greedy,
        ..config.train.rollout
    };
    let mut sink: Box<dyn Write> = match trace {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Error::SinkUnavailable(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    for (i, q) in suite.iter().enumerate() {
        let r = run_inference(&env, &ck.params, q, &opts, config.eval.temperature, seed.wrapping_add(i as u64), &meta)?;
        emit_trace(&r, &mut *sink)?;
        if trace.is_some() {
            println!("{}\t{}", q.id, serde_json::to_string(&r.answer).expect("answer serializes"));
        }
    }
    Ok(())
}

fn sweep(config: &RunConfig, lambdas: Option<Vec<f64>>, out: Option<PathBuf>) -> CliResult {
    let dir = output_dir(config, out);
    let grid = lambdas.unwrap_or_else(|| config.sweep.lambdas.clone());
    let outcomes = harness::pareto_sweep(config, &grid)?;
    let mut points: Vec<FrontierPoint> = Vec::new();
    for o in &outcomes {
        match &o.point {
            Ok(p) => {
                println!(
                    "lambda {:<8} cost {:.4} utility {:.4} accuracy {:.4}",
                    p.lambda, p.mean_normalized_cost, p.mean_utility, p.accuracy
                );
                points.push(*p);
            }
            Err(e) => warn!("lambda {} failed: {e}", o.lambda),
        }
    }
    write_report(config, &points, &dir.join("frontier.csv"))?;
    Ok(())
}

fn ablate(config: &RunConfig, out: Option<PathBuf>) -> CliResult {
    let dir = output_dir(config, out);
    let rows = harness::ablate(config)?;
    for r in &rows {
        println!(
            "{:<16} accuracy {:.4} cost {:.4} delta_cost {:+.4}",
            r.configuration, r.accuracy, r.mean_cost, r.delta_cost
        );
    }
    write_report(config, &rows, &dir.join("ablation.csv"))?;
    Ok(())
}

fn trace_verify(config: &RunConfig, checkpoint: &Path, trace: &Path, suite: Option<&Path>, tol: f64) -> CliResult {
    let env = config.build_environment()?;
    let ck = load_params(&env, checkpoint)?;
    let suite = load_suite(config, &env, suite)?;
    let text = std::fs::read_to_string(trace).with_context(|| format!("reading {}", trace.display()))?;
    let traces = parse_traces(&text)?;
    let bytes = std::fs::read(checkpoint)?;
    let id = checkpoint_id(&bytes);
    let mut failures = 0usize;
    let mut worst = 0.0f64;
    for t in &traces {
        if t.header.checkpoint_id != id {
            warn!("trace for {} was written by checkpoint {}", t.header.instance_id, t.header.checkpoint_id);
        }
        let Some(q) = suite.iter().find(|q| q.id == t.header.instance_id) else {
            failures += 1;
            eprintln!("{}: instance not found in suite", t.header.instance_id);
            continue;
        };
        let r = verify_trace(&env, &ck.params, q, t, tol)?;
        worst = worst.max(r.max_prob_diff);
        if let Some(m) = &r.mismatch {
            failures += 1;
            eprintln!("{}: {m}", t.header.instance_id);
        }
    }
    println!("verified {} traces, {} failed, max |dp| {:e}", traces.len(), failures, worst);
    if failures > 0 {
        return Err(Failure::Mismatch(format!("{failures} of {} traces did not replay", traces.len())));
    }
    Ok(())
}

fn gen_suite(config: &RunConfig, seed: Option<u64>, size: Option<usize>, out: Option<&Path>) -> CliResult {
    let env = config.build_environment()?;
    let mut sc = config.eval_suite.clone();
    if let Some(n) = size {
        sc.size = n;
    }
    let suite = generate_suite(&env.graph, seed.unwrap_or(config.eval_suite_seed), &sc)?;
    match out {
        Some(p) => write_suite(&suite, BufWriter::new(File::create(p)?))?,
        None => write_suite(&suite, std::io::stdout().lock())?,
    }
    Ok(())
}
