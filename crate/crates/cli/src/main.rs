//! `qhb`: train single models, run and resume hyperparameter sweeps, and
//! summarize the resulting record stores.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use qhb_core::data::{pool_side, resolve_data_dir, DataSource};
use qhb_core::head::OptimizerKind;
use qhb_core::model::{train, PAPER_TEST_SAMPLES, PAPER_TRAIN_SAMPLES};
use qhb_core::selftest;
use qhb_core::sweep::{
    aggregate, default_host_label, describe_config, expand_grid, run_sweep, write_aggregate_csv,
    write_report, Field, RecordFilter, RecordStore, ReportFamily, SweepGrid,
    PAPER_RANDOM_CIRCUIT_SEED,
};
use qhb_core::{HqnnConfig, Pauli, ShotSetting, TemplateKind};

#[derive(Parser)]
#[command(name = "qhb", version, about = "Hybrid quantum-classical network benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and print its report as JSON.
    Train(TrainArgs),
    /// Run a hyperparameter grid into a record store.
    Sweep(SweepArgs),
    /// Group-mean CSV of a record store.
    Aggregate(AggregateArgs),
    /// CSV files for one figure family.
    Report(ReportArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory with the four MNIST IDX files (default: $QHB_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Use the seeded Gaussian-blob dataset instead of MNIST.
    #[arg(long, conflicts_with = "data_dir")]
    synthetic: bool,
    /// Seed of the synthetic dataset.
    #[arg(long, default_value_t = 0, requires = "synthetic")]
    synthetic_seed: u64,
    /// Balanced per-class selection instead of the first samples in file order.
    #[arg(long)]
    stratified: bool,
    #[arg(long, default_value_t = PAPER_TRAIN_SAMPLES)]
    train_samples: usize,
    #[arg(long, default_value_t = PAPER_TEST_SAMPLES)]
    test_samples: usize,
}

impl DataArgs {
    fn source(&self) -> Result<DataSource, Usage> {
        if self.synthetic {
            if self.train_samples % 4 != 0 || self.test_samples % 4 != 0 {
                return Err(Usage("synthetic sample counts must be multiples of 4".into()));
            }
            return Ok(DataSource::Synthetic {
                seed: self.synthetic_seed,
                train_per_class: self.train_samples / 4,
                test_per_class: self.test_samples / 4,
            });
        }
        let dir = resolve_data_dir(self.data_dir.as_deref()).ok_or_else(|| {
            Usage("no dataset: pass --data-dir, set QHB_DATA_DIR, or use --synthetic".into())
        })?;
        Ok(DataSource::Mnist {
            dir,
            train_samples: self.train_samples,
            test_samples: self.test_samples,
            stratified: self.stratified,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// be, se or random.
    #[arg(long, default_value = "be")]
    template: String,
    /// Structure seed of the random template.
    #[arg(long, default_value_t = PAPER_RANDOM_CIRCUIT_SEED)]
    random_seed: u64,
    #[arg(long, default_value_t = qhb_core::circuit::DEFAULT_TWO_QUBIT_RATIO)]
    two_qubit_ratio: f64,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    qubits: usize,
    /// x, y or z.
    #[arg(long, default_value = "z")]
    observable: String,
    /// Shot budget per expectation estimate.
    #[arg(long, conflicts_with = "analytic")]
    shots: Option<u32>,
    /// Exact expectations (the default when --shots is absent).
    #[arg(long)]
    analytic: bool,
    #[arg(long, default_value_t = qhb_core::model::PAPER_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = qhb_core::model::PAPER_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long = "lr", default_value_t = qhb_core::model::PAPER_LEARNING_RATE)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// adam or sgd.
    #[arg(long, default_value = "adam")]
    optimizer: String,
    /// Seeded reshuffle of the training set every epoch.
    #[arg(long)]
    shuffle: bool,
    /// Write the trained model as JSON.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// The 270-point preset grid.
    #[arg(long, conflicts_with = "grid", required_unless_present = "grid")]
    paper_grid: bool,
    /// JSON grid definition.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, required_unless_present = "dry_run")]
    store: Option<PathBuf>,
    /// Concurrent experiments (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Skip configs already completed in the store (default).
    #[arg(long, overrides_with = "no_resume")]
    resume: bool,
    /// Run every config even if the store already holds it.
    #[arg(long)]
    no_resume: bool,
    /// Print the expanded configs as JSON lines and exit.
    #[arg(long)]
    dry_run: bool,
    /// Host label stored with every record (default: host name).
    #[arg(long)]
    host_label: Option<String>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    store: PathBuf,
    /// Comma-separated grouping fields: template, qubits, observable, shots.
    #[arg(long, value_delimiter = ',', default_value = "template,qubits")]
    group_by: Vec<String>,
    /// field=value restriction; repeatable.
    #[arg(long)]
    filter: Vec<String>,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    store: PathBuf,
    /// qubits, observables, shots, epochs or best.
    #[arg(long)]
    family: String,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    /// Skip the Monte-Carlo sampling checks.
    #[arg(long)]
    quick: bool,
    /// Print check names without running them.
    #[arg(long)]
    list: bool,
}

/// Invalid flag values; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::Report(a) => cmd_report(a),
        Command::Selftest(a) => cmd_selftest(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn parse_template(s: &str, seed: u64, ratio: f64) -> Result<TemplateKind, Usage> {
    match s.to_ascii_lowercase().as_str() {
        "be" | "basic" | "basic-entangling" => Ok(TemplateKind::BasicEntangling),
        "se" | "strong" | "strongly-entangling" => Ok(TemplateKind::StronglyEntangling),
        "random" | "rc" => Ok(TemplateKind::Random {
            seed,
            two_qubit_ratio: ratio,
        }),
        _ => Err(Usage(format!("unknown template {s:?} (be, se, random)"))),
    }
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    pool_side(a.qubits).map_err(|e| Usage(strip_validation(e)))?;
    let config = HqnnConfig {
        template: parse_template(&a.template, a.random_seed, a.two_qubit_ratio)?,
        n_layers: a.layers,
        n_qubits: a.qubits,
        observable: a.observable.parse::<Pauli>().map_err(|e| Usage(strip_validation(e)))?,
        shots: match a.shots {
            Some(n) => ShotSetting::Shots(n),
            None => ShotSetting::Analytic,
        },
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed: a.seed,
        optimizer: a.optimizer.parse::<OptimizerKind>().map_err(|e| Usage(e.to_string()))?,
        shuffle: a.shuffle,
    };
    config.validate().map_err(|e| Usage(strip_validation(e)))?;
    let source = a.data.source()?;
    let (train_set, test_set) = source.load(config.n_qubits).context("loading dataset")?;
    log::info!("training {} on {}", describe_config(&config), source.describe());
    let (model, report) = train(&config, &train_set, &test_set)?;
    if let Some(path) = &a.checkpoint {
        model.save_checkpoint(path)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn strip_validation(e: qhb_core::Error) -> String {
    match e {
        qhb_core::Error::Validation(msg) => msg,
        other => other.to_string(),
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<ExitCode> {
    let grid = match &a.grid {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SweepGrid>(&text)
                .map_err(|e| Usage(format!("{}: {e}", path.display())))?
        }
        None => SweepGrid::paper_grid(),
    };
    let configs = expand_grid(&grid).map_err(|e| Usage(strip_validation(e)))?;
    for c in &configs {
        pool_side(c.n_qubits).map_err(|e| Usage(strip_validation(e)))?;
        c.validate().map_err(|e| Usage(strip_validation(e)))?;
    }
    if a.dry_run {
        let mut out = std::io::stdout().lock();
        for c in &configs {
            writeln!(out, "{}", serde_json::to_string(c)?)?;
        }
        return Ok(ExitCode::SUCCESS);
    }
    let store_path = a.store.expect("clap requires --store without --dry-run");
    let source = a.data.source()?;
    let workers = a
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(Usage("--workers must be at least 1".into()).into());
    }
    let host = a.host_label.unwrap_or_else(default_host_label);
    let store = RecordStore::new(&store_path);
    let summary = run_sweep(&configs, workers, &store, &source, &host, !a.no_resume);
    let summary = summary.with_context(|| format!("sweep into {}", store_path.display()))?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(if summary.failed > 0 {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn parse_field(s: &str) -> Result<Field, Usage> {
    Field::ALL
        .into_iter()
        .find(|f| f.name() == s.trim())
        .ok_or_else(|| Usage(format!("unknown field {s:?} (template, qubits, layers, observable, shots)")))
}

fn load_store(path: &Path) -> Result<Vec<qhb_core::sweep::ExperimentRecord>> {
    if !path.exists() {
        anyhow::bail!("store {} does not exist", path.display());
    }
    let records = RecordStore::new(path).load()?;
    if !records.iter().any(|r| r.is_completed()) {
        anyhow::bail!("store {} holds no completed records", path.display());
    }
    Ok(records)
}

fn cmd_aggregate(a: AggregateArgs) -> Result<ExitCode> {
    let group: Vec<Field> = a.group_by.iter().map(|s| parse_field(s)).collect::<Result<_, _>>()?;
    let mut filter = RecordFilter::default();
    for f in &a.filter {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| Usage(format!("filter {f:?} is not field=value")))?;
        filter.equals.push((parse_field(k)?, v.trim().to_string()));
    }
    let records = load_store(&a.store)?;
    let series = aggregate(&records, &group, &filter);
    if series.is_empty() {
        anyhow::bail!("no completed records match the filter");
    }
    match &a.out {
        Some(path) => {
            let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_aggregate_csv(&series, std::io::BufWriter::new(f))?;
        }
        None => write_aggregate_csv(&series, std::io::stdout().lock())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(a: ReportArgs) -> Result<ExitCode> {
    let family: ReportFamily = a.family.parse().map_err(Usage)?;
    let records = load_store(&a.store)?;
    for path in write_report(&records, family, &a.out_dir)? {
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_selftest(a: SelftestArgs) -> Result<ExitCode> {
    if a.list {
        for c in selftest::checks() {
            println!("{}", c.name);
        }
        return Ok(ExitCode::SUCCESS);
    }
    let mut failed = Vec::new();
    for o in selftest::run_checks(a.quick) {
        match &o.result {
            Ok(()) => println!("PASS {} ({:.3} s)", o.name, o.elapsed.as_secs_f64()),
            Err(msg) => {
                println!("FAIL {} ({:.3} s): {msg}", o.name, o.elapsed.as_secs_f64());
                failed.push(o.name);
            }
        }
    }
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed checks: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}
