use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use q2a::data::{generate_dataset, load_dataset, save_dataset, Dataset};
use q2a::model::Q2ATransformer;
use q2a::nn::Module;
use q2a::train::{
    evaluate, gradcheck_suite, load_checkpoint, run_ablation, save_checkpoint, sweep_answer_dim,
    train, write_history, write_sweep, Checkpoint, EvalReport, TrainState, GRADCHECK_CASES,
};

mod config;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "q2a",
    version,
    about = "Train and evaluate the answer-querying VQA model on synthetic grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=16))]
        grid: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; writes checkpoint, history and resolved config to --out.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for eval.csv (printed to stdout either way).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every block and the full model.
    Gradcheck {
        #[arg(long, default_value = "tiny", value_parser = ["tiny"])]
        dims: String,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train the fusion x head grid once per seed.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
        seeds: u64,
    },
    /// Train one model per answer-embedding width.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=1e-3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; overrides model.seed and train.shuffle_seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Bad invocation: reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Usage(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(())
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, Dataset)> {
        require_file(&self.data, "dataset")?;
        if let Some(c) = &self.config {
            require_file(c, "config")?;
        }
        let cfg = RunConfig::resolve(self.config.as_deref(), &self.overrides, self.seed)
            .map_err(|e| Usage(format!("{e:#}")))?;
        let data =
            load_dataset(&self.data).with_context(|| format!("loading {}", self.data.display()))?;
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok((cfg, data))
    }
}

fn fmt_acc(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

fn gen_data(out: &Path, n: usize, grid: usize, seed: u64) -> Result<()> {
    let data = generate_dataset(n, grid, seed)?;
    save_dataset(&data, out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {n} samples (grid {grid}, seed {seed}) to {}",
        out.display()
    );
    println!("class,answer,count");
    for (class, count) in data.class_counts().iter().enumerate() {
        println!(
            "{class},{},{count}",
            data.answers.answer(class).unwrap_or("?")
        );
    }
    Ok(())
}

fn cmd_train(run: &RunArgs) -> Result<()> {
    let (mut cfg, data) = run.load()?;
    let (train_set, val_set) = cfg.prepare(data)?;
    cfg.write(&run.out)?;
    let (tr, va) = (train_set.encode(&cfg.model)?, val_set.encode(&cfg.model)?);
    let mut model = Q2ATransformer::new(cfg.model.clone())?;
    println!(
        "seed {} | {} parameters | {} train / {} val",
        cfg.seed,
        model.num_parameters(),
        tr.len(),
        va.len()
    );
    let mut state = TrainState::new(model.parameters(), cfg.train.lr, cfg.train.shuffle_seed);
    let start = Instant::now();
    let outcome = train(&mut model, &tr, &va, &cfg.train, &mut state, |r| {
        println!(
            "epoch {:>3}  loss {:.5}  open {}  closed {}  overall {}  ({:.0}s)",
            r.epoch,
            r.train_loss,
            fmt_acc(r.val.open_acc),
            fmt_acc(r.val.closed_acc),
            fmt_acc(r.val.overall_acc),
            start.elapsed().as_secs_f64()
        );
    })?;
    write_history(run.out.join("history.csv"), &outcome.history)?;
    let ckpt = Checkpoint {
        model,
        state,
        answers: train_set.answers.answers().to_vec(),
        tokens: train_set.tokens.tokens().to_vec(),
    };
    save_checkpoint(run.out.join("model.q2a"), &ckpt)?;
    match outcome.best() {
        Some(best) => println!(
            "best epoch {}: overall {} (checkpoint {})",
            best.epoch,
            fmt_acc(best.val.overall_acc),
            run.out.join("model.q2a").display()
        ),
        None => println!("no epochs run; saved the initial model"),
    }
    Ok(())
}

pub const EVAL_HEADER: [&str; 7] = [
    "open_acc",
    "closed_acc",
    "overall_acc",
    "n_open",
    "n_closed",
    "correct_open",
    "correct_closed",
];

fn eval_csv(r: &EvalReport) -> String {
    let acc = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    format!(
        "{}\n{},{},{},{},{},{},{}\n",
        EVAL_HEADER.join(","),
        acc(r.open_acc),
        acc(r.closed_acc),
        acc(r.overall_acc),
        r.n_open,
        r.n_closed,
        r.correct_open,
        r.correct_closed
    )
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    require_file(checkpoint, "checkpoint")?;
    require_file(data, "dataset")?;
    let ckpt =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    data.check_compatible(&ckpt.answers, &ckpt.tokens)
        .context("dataset vocabularies do not match the checkpoint")?;
    let samples = data.encode(ckpt.model.config())?;
    let report = evaluate(&ckpt.model, &samples, Default::default())?;
    let csv = eval_csv(&report);
    print!("{csv}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("eval.csv"), &csv)
            .with_context(|| format!("writing {}", dir.display()))?;
    }
    Ok(())
}

fn cmd_gradcheck(fault: Option<&str>) -> Result<()> {
    if let Some(f) = fault {
        if !GRADCHECK_CASES.contains(&f) {
            return Err(Usage(format!(
                "unknown check {f:?}; expected one of {}",
                GRADCHECK_CASES.join(", ")
            ))
            .into());
        }
    }
    let start = Instant::now();
    let cases = gradcheck_suite(fault, |c| {
        let r = &c.report;
        println!(
            "{:<5} {:<16} max rel error {:.2e} over {} coordinates{}",
            if r.passed() { "ok" } else { "FAIL" },
            c.name,
            r.max_rel_error,
            r.coordinates,
            r.worst_tensor
                .as_deref()
                .map(|t| format!(" (worst in {t})"))
                .unwrap_or_default()
        );
    })?;
    let failed: Vec<&str> = cases
        .iter()
        .filter(|c| !c.report.passed())
        .map(|c| c.name)
        .collect();
    println!(
        "{} checks in {:.2}s",
        cases.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        bail!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(())
}

fn cmd_ablate(run: &RunArgs, seeds: u64) -> Result<()> {
    let (mut cfg, data) = run.load()?;
    let (train_set, val_set) = cfg.prepare(data)?;
    cfg.write(&run.out)?;
    let (tr, va) = (train_set.encode(&cfg.model)?, val_set.encode(&cfg.model)?);
    let seeds: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
    let table = run_ablation(&cfg.model, &cfg.train, &tr, &va, &seeds, |r| {
        println!(
            "#{} {}+{} seed {}: overall {}",
            r.row,
            r.fusion.as_str(),
            r.head.as_str(),
            r.seed,
            fmt_acc(r.report.overall_acc)
        );
    })?;
    table.write_runs(run.out.join("ablation.csv"))?;
    table.write_medians(run.out.join("ablation_medians.csv"))?;
    for m in table.medians() {
        println!(
            "#{} {:<4} {:<7} median open {} closed {} overall {}",
            m.row,
            m.fusion.as_str(),
            m.head.as_str(),
            fmt_acc(m.open_acc),
            fmt_acc(m.closed_acc),
            fmt_acc(m.overall_acc)
        );
    }
    let checks = table.trend_checks();
    for c in &checks {
        println!(
            "trend {:<20} {}",
            c.description,
            if c.holds { "holds" } else { "violated" }
        );
    }
    println!(
        "{}/{} trend comparisons hold",
        checks.iter().filter(|c| c.holds).count(),
        checks.len()
    );
    Ok(())
}

fn cmd_sweep(run: &RunArgs, dims: &[usize]) -> Result<()> {
    let (mut cfg, data) = run.load()?;
    let (train_set, val_set) = cfg.prepare(data)?;
    cfg.write(&run.out)?;
    let (tr, va) = (train_set.encode(&cfg.model)?, val_set.encode(&cfg.model)?);
    let rows = sweep_answer_dim(dims, &cfg.model, &cfg.train, &tr, &va, |r| {
        println!(
            "answer dim {:>5}: overall {}",
            r.dim,
            fmt_acc(r.report.overall_acc)
        );
    })?;
    write_sweep(run.out.join("sweep.csv"), &rows)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, n, grid, seed } => gen_data(&out, n as usize, grid as usize, seed),
        Command::Train { run } => cmd_train(&run),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => cmd_eval(&checkpoint, &data, out.as_deref()),
        Command::Gradcheck {
            dims: _,
            inject_fault,
        } => cmd_gradcheck(inject_fault.as_deref()),
        Command::Ablate { run, seeds } => cmd_ablate(&run, seeds),
        Command::Sweep { run, dims } => cmd_sweep(&run, &dims),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
