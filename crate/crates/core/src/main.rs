use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use metavrf::kernels::ScaleMode;
use metavrf::runner::{
    gradcheck_suite, load_checkpoint, meta_test, meta_train_observed, run_baseline_observed, sweep_basis_count,
    write_curve_csv, write_report, EvalSpec, ExperimentConfig, InferenceMode, KernelKind, Metric, RunError,
    TaskFamily, FIXED_RFF_BASES,
};

#[derive(Parser)]
#[command(name = "metavrf", version, about = "Meta-learned random Fourier feature kernels for few-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model and write checkpoint.bin and metrics.jsonl.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out episodes and write report.json.
    Test(TestArgs),
    /// Train and evaluate a fixed-kernel baseline.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 500)]
        episodes: usize,
    },
    /// Train and evaluate once per basis count and write sweep.csv.
    Sweep {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 500)]
        episodes: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Rff,
    Rbf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Paper,
    Unbiased,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "sine")]
    task: TaskFamily,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    /// Query points per task (regression) or per class (classification).
    #[arg(long)]
    queries: Option<usize>,
    /// Basis count D. `sweep` takes a comma-separated list.
    #[arg(long, value_delimiter = ',')]
    bases: Vec<usize>,
    #[arg(long, value_enum)]
    mode: Option<InferenceMode>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root; overrides the environment variable.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
    #[arg(long)]
    blob_dim: Option<usize>,
    #[arg(long)]
    blob_classes: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
}

impl TrainArgs {
    fn single(&self) -> Result<ExperimentConfig, RunError> {
        if self.bases.len() > 1 {
            return Err(RunError::InvalidConfig("--bases takes one value outside sweep".into()));
        }
        Ok(self.config())
    }

    fn config(&self) -> ExperimentConfig {
        let mut c = ExperimentConfig::for_family(self.task);
        if let Some(d) = self.blob_dim {
            c = c.with_blob_dim(d);
        }
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.ways, self.ways);
        set(&mut c.shots, self.shots);
        set(&mut c.queries, self.queries);
        set(&mut c.bases, self.bases.first().copied());
        set(&mut c.iterations, self.iters);
        set(&mut c.batch, self.batch);
        set(&mut c.log_every, self.log_every);
        set(&mut c.blobs.classes, self.blob_classes);
        if let Some(s) = self.separation {
            c.blobs.separation = s;
        }
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(lr) = self.lr {
            c.learning_rate = lr;
        }
        if let Some(s) = self.scale {
            c.scale_mode = match s {
                ScaleArg::Paper => ScaleMode::Paper,
                ScaleArg::Unbiased => ScaleMode::Unbiased,
            };
        }
        c.seed = self.seed;
        c.out_dir = self.out.clone();
        c.data_root = self.data.clone();
        c
    }
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 500)]
    episodes: usize,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    /// Evaluation seed; defaults to the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Reject the checkpoint unless it was trained on this family.
    #[arg(long, value_enum)]
    task: Option<TaskFamily>,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let RunError::NonFiniteLoss {
                diagnostic: Some(path), ..
            } = &e
            {
                eprintln!("diagnostic written to {}", path.display());
            }
            ExitCode::FAILURE
        }
    }
}

fn print_report(label: &str, metric: Metric, mean: f64, ci95: f64, episodes: usize) {
    let name = match metric {
        Metric::Accuracy => "accuracy",
        Metric::Mse => "mse",
    };
    println!("{label}: {name} {mean:.4} ± {ci95:.4} over {episodes} episodes");
}

fn train_progress(rec: &metavrf::runner::LogRecord) {
    eprintln!("iter {:>6}  loss {:.5}  {:.1}s", rec.iteration, rec.loss, rec.wall_ms / 1e3);
}

fn run(cli: Cli) -> Result<ExitCode, RunError> {
    match cli.command {
        Command::Train(args) => {
            let config = args.single()?;
            let outcome = meta_train_observed(&config, &mut train_progress)?;
            match &config.out_dir {
                Some(dir) => println!("checkpoint written to {}", dir.join("checkpoint.bin").display()),
                None => println!("trained {} iterations (no --out given, nothing written)", config.iterations),
            }
            if let Some(last) = outcome.log.last() {
                println!("final loss {:.5}", last.loss);
            }
        }
        Command::Test(args) => {
            let mut ckpt = load_checkpoint(&args.ckpt)?;
            if args.data.is_some() {
                ckpt.config.data_root = args.data.clone();
            }
            let spec = EvalSpec {
                episodes: args.episodes,
                ways: args.ways,
                shots: args.shots,
                family: args.task,
                seed: args.seed,
                curves: ckpt.config.family == TaskFamily::Sine,
            };
            let report = meta_test(&ckpt, &spec)?;
            let dir = args
                .out
                .clone()
                .unwrap_or_else(|| args.ckpt.parent().map(Path::to_path_buf).unwrap_or_default());
            write_outputs(&dir, &report, &ckpt.config)?;
            print_report("meta-test", report.metric, report.mean, report.ci95, report.episodes);
        }
        Command::Baseline { kind, train, episodes } => {
            let mut config = train.single()?;
            let kernel = match kind {
                BaselineKind::Rff => {
                    if train.bases.is_empty() {
                        config.bases = FIXED_RFF_BASES;
                    }
                    KernelKind::FixedRff
                }
                BaselineKind::Rbf => KernelKind::ExactRbf,
            };
            let spec = EvalSpec {
                curves: config.family == TaskFamily::Sine,
                ..EvalSpec::episodes(episodes)
            };
            let (outcome, report) = run_baseline_observed(&config, kernel, &spec, &mut train_progress)?;
            if let Some(dir) = &config.out_dir {
                write_outputs(dir, &report, &outcome.checkpoint.config)?;
            }
            print_report("baseline", report.metric, report.mean, report.ci95, report.episodes);
        }
        Command::Sweep { train, episodes } => {
            let config = train.config();
            let rows = sweep_basis_count(&config, &train.bases, &EvalSpec::episodes(episodes))?;
            for r in &rows {
                println!("D={:<6} {:.4} ± {:.4}", r.bases, r.metric, r.ci95);
            }
        }
        Command::Gradcheck => {
            let entries = gradcheck_suite()?;
            let mut ok = true;
            for e in &entries {
                ok &= e.passed;
                let verdict = if e.passed { "ok" } else { "FAIL" };
                println!("{:<14} rel err {:.2e} over {:>4} entries  {verdict}", e.name, e.rel_error, e.entries);
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write_outputs(dir: &Path, report: &metavrf::runner::EvalReport, config: &ExperimentConfig) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(|source| RunError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_report(&dir.join("report.json"), report, config)?;
    if !report.curves.is_empty() {
        write_curve_csv(&dir.join("curve.csv"), &report.curves)?;
    }
    Ok(())
}
