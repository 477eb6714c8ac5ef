//! Grid expansion, resumable execution, record store and aggregation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DataSource, FeatureSet};
use crate::error::{Error, Result};
use crate::head::OptimizerKind;
use crate::model::{
    train, HqnnConfig, ShotSetting, TrainReport, PAPER_BATCH_SIZE, PAPER_EPOCHS,
    PAPER_LEARNING_RATE, PAPER_LAYERS, PAPER_QUBITS, PAPER_SHOTS,
};
use crate::rng::derive_seed;
use crate::{Pauli, TemplateKind};

/// Seed of the random-circuit template in the preset grid. Every experiment
/// of the preset shares this one random structure.
pub const PAPER_RANDOM_CIRCUIT_SEED: u64 = 2024;
pub const PAPER_BASE_SEED: u64 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub templates: Vec<TemplateKind>,
    pub layer_counts: Vec<usize>,
    pub qubit_counts: Vec<usize>,
    pub observables: Vec<Pauli>,
    pub shot_settings: Vec<ShotSetting>,
    pub base_seed: u64,
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default = "paper_epochs")]
    pub epochs: usize,
    #[serde(default = "paper_batch")]
    pub batch_size: usize,
    #[serde(default = "paper_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub shuffle: bool,
}

fn one() -> usize {
    1
}
fn paper_epochs() -> usize {
    PAPER_EPOCHS
}
fn paper_batch() -> usize {
    PAPER_BATCH_SIZE
}
fn paper_lr() -> f64 {
    PAPER_LEARNING_RATE
}

impl SweepGrid {
    /// The 270-point study grid: 3 templates, 5 depths, 3 widths,
    /// 3 observables, 2 shot budgets, one repeat.
    pub fn paper_grid() -> Self {
        Self {
            templates: vec![
                TemplateKind::random(PAPER_RANDOM_CIRCUIT_SEED),
                TemplateKind::BasicEntangling,
                TemplateKind::StronglyEntangling,
            ],
            layer_counts: PAPER_LAYERS.collect(),
            qubit_counts: PAPER_QUBITS.to_vec(),
            observables: Pauli::ALL.to_vec(),
            shot_settings: PAPER_SHOTS.iter().map(|&n| ShotSetting::Shots(n)).collect(),
            base_seed: PAPER_BASE_SEED,
            repeats: 1,
            epochs: PAPER_EPOCHS,
            batch_size: PAPER_BATCH_SIZE,
            learning_rate: PAPER_LEARNING_RATE,
            optimizer: OptimizerKind::Adam,
            shuffle: false,
        }
    }

    pub fn size(&self) -> usize {
        self.templates.len()
            * self.layer_counts.len()
            * self.qubit_counts.len()
            * self.observables.len()
            * self.shot_settings.len()
            * self.repeats
    }

    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("templates", self.templates.is_empty()),
            ("layer_counts", self.layer_counts.is_empty()),
            ("qubit_counts", self.qubit_counts.is_empty()),
            ("observables", self.observables.is_empty()),
            ("shot_settings", self.shot_settings.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::validation(format!("grid list {name} is empty")));
        }
        if self.repeats == 0 {
            return Err(Error::validation("repeats must be at least 1"));
        }
        Ok(())
    }
}

/// Cartesian product in the order template, layers, qubits, observable,
/// shots, with repeats innermost. Seeds are derived from the product index
/// and the repeat index.
pub fn expand_grid(grid: &SweepGrid) -> Result<Vec<HqnnConfig>> {
    grid.validate()?;
    let mut out = Vec::with_capacity(grid.size());
    let mut index = 0u64;
    for &template in &grid.templates {
        for &n_layers in &grid.layer_counts {
            for &n_qubits in &grid.qubit_counts {
                for &observable in &grid.observables {
                    for &shots in &grid.shot_settings {
                        for repeat in 0..grid.repeats as u64 {
                            out.push(HqnnConfig {
                                template,
                                n_layers,
                                n_qubits,
                                observable,
                                shots,
                                epochs: grid.epochs,
                                batch_size: grid.batch_size,
                                learning_rate: grid.learning_rate,
                                seed: derive_seed(grid.base_seed, &[index, repeat]),
                                optimizer: grid.optimizer,
                                shuffle: grid.shuffle,
                            });
                        }
                        index += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Store key: SHA-256 of the config's JSON encoding, hex.
pub fn config_key(config: &HqnnConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RecordStatus {
    Completed,
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub key: String,
    pub config: HqnnConfig,
    pub status: RecordStatus,
    pub report: Option<TrainReport>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub host_label: String,
    pub data_source: String,
}

impl ExperimentRecord {
    pub fn is_completed(&self) -> bool {
        self.status == RecordStatus::Completed && self.report.is_some()
    }

    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.report.as_ref().map(TrainReport::final_train_accuracy)
    }
}

/// Host name from the environment, falling back to `/etc/hostname`.
pub fn default_host_label() -> String {
    std::env::var("HOSTNAME")
        .ok()
        .or_else(|| std::fs::read_to_string("/etc/hostname").ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Append-only JSON-lines file of experiment records.
#[derive(Clone, Debug)]
pub struct RecordStore {
    path: PathBuf,
}

impl RecordStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All records in file order. A missing file is an empty store; an
    /// unterminated last line (interrupted write) is ignored.
    pub fn load(&self) -> Result<Vec<ExperimentRecord>> {
        let text = match std::fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&self.path, e)),
        };
        let complete = match text.rfind('\n') {
            Some(i) => &text[..=i],
            None => "",
        };
        if complete.len() < text.len() {
            log::warn!("{}: ignoring unterminated last line", self.path.display());
        }
        complete
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| {
                    Error::validation(format!("{} line {}: {e}", self.path.display(), i + 1))
                })
            })
            .collect()
    }

    /// Appends one record as a single line under an exclusive file lock.
    /// A partial trailing line left by an interrupted writer is dropped first.
    pub fn append(&self, record: &ExperimentRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let io = |e| Error::io(&self.path, e);
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&self.path)
            .map_err(io)?;
        file.lock().map_err(io)?;
        let result = (|| {
            let len = file.metadata()?.len();
            if len > 0 {
                let mut buf = Vec::new();
                file.seek(SeekFrom::Start(0))?;
                file.read_to_end(&mut buf)?;
                if buf.last() != Some(&b'\n') {
                    let keep = buf.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                    file.set_len(keep as u64)?;
                }
            }
            file.seek(SeekFrom::End(0))?;
            file.write_all(line.as_bytes())?;
            file.sync_data()
        })();
        let unlocked = file.unlock();
        result.map_err(io)?;
        unlocked.map_err(io)
    }

    /// Keys of records with completed status.
    pub fn completed_keys(&self) -> Result<HashSet<String>> {
        Ok(self
            .load()?
            .into_iter()
            .filter(ExperimentRecord::is_completed)
            .map(|r| r.key)
            .collect())
    }
}

/// Latest record per key, in order of first appearance.
pub fn latest_per_key(records: &[ExperimentRecord]) -> Vec<&ExperimentRecord> {
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<&ExperimentRecord> = Vec::new();
    for r in records {
        match slot.get(r.key.as_str()) {
            Some(&i) => out[i] = r,
            None => {
                slot.insert(&r.key, out.len());
                out.push(r);
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SweepSummary {
    pub total: usize,
    pub skipped: usize,
    pub completed: usize,
    pub failed: usize,
}

/// Runs every config, up to `workers` at a time, appending one record per
/// finished experiment. With `resume`, configs already completed in `store`
/// are skipped. Errors and panics inside a run become failed records.
pub fn run_sweep(
    configs: &[HqnnConfig],
    workers: usize,
    store: &RecordStore,
    source: &DataSource,
    host_label: &str,
    resume: bool,
) -> Result<SweepSummary> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(&store.path)
        .map_err(|e| Error::io(&store.path, e))?;
    let done = if resume {
        store.completed_keys()?
    } else {
        HashSet::new()
    };
    let pending: Vec<(String, &HqnnConfig)> = configs
        .iter()
        .map(|c| (config_key(c), c))
        .filter(|(k, _)| !done.contains(k))
        .collect();
    let mut summary = SweepSummary {
        total: configs.len(),
        skipped: configs.len() - pending.len(),
        ..Default::default()
    };
    if pending.is_empty() {
        return Ok(summary);
    }

    let mut datasets: BTreeMap<usize, (FeatureSet, FeatureSet)> = BTreeMap::new();
    for (_, c) in &pending {
        if !datasets.contains_key(&c.n_qubits) {
            datasets.insert(c.n_qubits, source.load(c.n_qubits)?);
        }
    }
    let description = source.describe();
    let tally = Mutex::new((0usize, 0usize, None::<Error>));

    let run_one = |(key, config): &(String, &HqnnConfig)| {
        let (train_set, test_set) = &datasets[&config.n_qubits];
        let started_at = Utc::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| train(config, train_set, test_set)));
        let (status, report) = match outcome {
            Ok(Ok((_, report))) => (RecordStatus::Completed, Some(report)),
            Ok(Err(e)) => (RecordStatus::Failed { reason: e.to_string() }, None),
            Err(panic) => (RecordStatus::Failed { reason: panic_message(&panic) }, None),
        };
        let record = ExperimentRecord {
            key: key.clone(),
            config: (*config).clone(),
            status,
            report,
            started_at,
            finished_at: Utc::now(),
            host_label: host_label.to_string(),
            data_source: description.clone(),
        };
        let mut t = tally.lock().unwrap_or_else(|p| p.into_inner());
        match &record.status {
            RecordStatus::Completed => {
                t.0 += 1;
                log::info!("completed {} ({})", describe_config(config), &key[..12]);
            }
            RecordStatus::Failed { reason } => {
                t.1 += 1;
                log::warn!("failed {}: {reason}", describe_config(config));
            }
        }
        if let Err(e) = store.append(&record) {
            t.2.get_or_insert(e);
        }
    };

    if workers <= 1 {
        pending.iter().for_each(run_one);
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
        pool.install(|| pending.par_iter().for_each(run_one));
    }

    let (completed, failed, store_error) = tally.into_inner().unwrap_or_else(|p| p.into_inner());
    if let Some(e) = store_error {
        return Err(e);
    }
    summary.completed = completed;
    summary.failed = failed;
    Ok(summary)
}

fn panic_message(panic: &Box<dyn std::any::Any + Send>) -> String {
    let msg = panic
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| panic.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown payload".into());
    format!("panic: {msg}")
}

pub fn describe_config(c: &HqnnConfig) -> String {
    format!(
        "{} L{} q{} {} shots={} seed={:#x}",
        c.template, c.n_layers, c.n_qubits, c.observable, c.shots, c.seed
    )
}

/// Hyperparameters usable as grouping keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Template,
    Qubits,
    Layers,
    Observable,
    Shots,
}

impl Field {
    pub const ALL: [Field; 5] = [
        Field::Template,
        Field::Qubits,
        Field::Layers,
        Field::Observable,
        Field::Shots,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::Template => "template",
            Field::Qubits => "qubits",
            Field::Layers => "layers",
            Field::Observable => "observable",
            Field::Shots => "shots",
        }
    }

    pub fn value(self, c: &HqnnConfig) -> String {
        match self {
            Field::Template => c.template.label().to_string(),
            Field::Qubits => c.n_qubits.to_string(),
            Field::Layers => c.n_layers.to_string(),
            Field::Observable => c.observable.name().to_string(),
            Field::Shots => c.shots.to_string(),
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Keeps records whose fields equal every given value.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecordFilter {
    pub equals: Vec<(Field, String)>,
}

impl RecordFilter {
    pub fn matches(&self, c: &HqnnConfig) -> bool {
        self.equals.iter().all(|(f, v)| f.value(c) == *v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregatePoint {
    pub layers: usize,
    pub mean_train_accuracy: f64,
    pub mean_test_accuracy: f64,
    /// `None` when the members ran on different hosts.
    pub mean_time_s: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateSeries {
    pub group: BTreeMap<Field, String>,
    pub averaged_over: Vec<Field>,
    pub points: Vec<AggregatePoint>,
}

/// Means of final train accuracy, test accuracy and time per group and
/// layer count. Uses the latest completed record per key; sums run in store
/// order.
pub fn aggregate(
    records: &[ExperimentRecord],
    group_keys: &[Field],
    filter: &RecordFilter,
) -> Vec<AggregateSeries> {
    let group_keys: Vec<Field> = group_keys.iter().copied().filter(|f| *f != Field::Layers).collect();
    let averaged_over: Vec<Field> = Field::ALL
        .into_iter()
        .filter(|f| *f != Field::Layers && !group_keys.contains(f))
        .collect();
    let mut groups: BTreeMap<BTreeMap<Field, String>, BTreeMap<usize, Vec<&ExperimentRecord>>> =
        BTreeMap::new();
    for r in latest_per_key(records) {
        if !r.is_completed() || !filter.matches(&r.config) {
            continue;
        }
        let key = group_keys.iter().map(|&f| (f, f.value(&r.config))).collect();
        groups
            .entry(key)
            .or_default()
            .entry(r.config.n_layers)
            .or_default()
            .push(r);
    }
    if groups.is_empty() {
        log::warn!("no completed records match the filter");
    }
    groups
        .into_iter()
        .map(|(group, by_layer)| AggregateSeries {
            group,
            averaged_over: averaged_over.clone(),
            points: by_layer
                .into_iter()
                .map(|(layers, members)| mean_point(layers, &members))
                .collect(),
        })
        .collect()
}

fn mean_point(layers: usize, members: &[&ExperimentRecord]) -> AggregatePoint {
    let n = members.len() as f64;
    let mut train = 0.0;
    let mut test = 0.0;
    let mut time = 0.0;
    for r in members {
        let report = r.report.as_ref().expect("completed record has a report");
        train += report.final_train_accuracy();
        test += report.test_accuracy;
        time += report.wall_clock_training_seconds;
    }
    let one_host = members.windows(2).all(|w| w[0].host_label == w[1].host_label);
    AggregatePoint {
        layers,
        mean_train_accuracy: train / n,
        mean_test_accuracy: test / n,
        mean_time_s: one_host.then_some(time / n),
        count: members.len(),
    }
}

pub const CSV_HEADER: [&str; 9] = [
    "template",
    "qubits",
    "layers",
    "observable",
    "shots",
    "mean_train_acc",
    "mean_test_acc",
    "mean_time_s",
    "n_records",
];

/// One row per point; averaged-over columns hold `*`.
pub fn write_aggregate_csv<W: Write>(series: &[AggregateSeries], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for s in series {
        for p in &s.points {
            let field = |f: Field| -> String {
                if f == Field::Layers {
                    p.layers.to_string()
                } else {
                    s.group.get(&f).cloned().unwrap_or_else(|| "*".into())
                }
            };
            w.write_record([
                field(Field::Template),
                field(Field::Qubits),
                field(Field::Layers),
                field(Field::Observable),
                field(Field::Shots),
                p.mean_train_accuracy.to_string(),
                p.mean_test_accuracy.to_string(),
                p.mean_time_s.map(|t| t.to_string()).unwrap_or_default(),
                p.count.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Mean per-epoch train accuracy over every completed record of a template.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSeries {
    pub template: String,
    pub mean_accuracy: Vec<f64>,
    pub count: usize,
}

pub fn epoch_convergence(records: &[ExperimentRecord], filter: &RecordFilter) -> Vec<EpochSeries> {
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for r in latest_per_key(records) {
        if !r.is_completed() || !filter.matches(&r.config) {
            continue;
        }
        let curve = &r.report.as_ref().expect("completed").per_epoch_train_accuracy;
        let (sum, n) = sums.entry(r.config.template.label().to_string()).or_default();
        if sum.len() < curve.len() {
            sum.resize(curve.len(), 0.0);
        }
        for (s, a) in sum.iter_mut().zip(curve) {
            *s += a;
        }
        *n += 1;
    }
    sums.into_iter()
        .map(|(template, (sum, n))| EpochSeries {
            template,
            mean_accuracy: sum.into_iter().map(|s| s / n as f64).collect(),
            count: n,
        })
        .collect()
}

pub fn write_epoch_csv<W: Write>(series: &[EpochSeries], out: W) -> Result<()> {
    let epochs = series.iter().map(|s| s.mean_accuracy.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["template".to_string()];
    header.extend((1..=epochs).map(|e| format!("epoch_{e}")));
    header.push("n_records".into());
    w.write_record(&header)?;
    for s in series {
        let mut row = vec![s.template.clone()];
        row.extend((0..epochs).map(|e| s.mean_accuracy.get(e).map(f64::to_string).unwrap_or_default()));
        row.push(s.count.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Completed record with the highest final train accuracy; ties go to the
/// shorter training time, then to the lexicographically smaller config JSON.
pub fn best_record(records: &[ExperimentRecord]) -> Result<&ExperimentRecord> {
    latest_per_key(records)
        .into_iter()
        .filter(|r| r.is_completed())
        .min_by(|a, b| {
            let ra = a.report.as_ref().expect("completed");
            let rb = b.report.as_ref().expect("completed");
            rb.final_train_accuracy()
                .total_cmp(&ra.final_train_accuracy())
                .then(ra.wall_clock_training_seconds.total_cmp(&rb.wall_clock_training_seconds))
                .then_with(|| {
                    let ja = serde_json::to_string(&a.config).unwrap_or_default();
                    let jb = serde_json::to_string(&b.config).unwrap_or_default();
                    ja.cmp(&jb)
                })
        })
        .ok_or_else(|| Error::validation("store holds no completed records"))
}

pub fn write_best_csv<W: Write>(record: &ExperimentRecord, out: W) -> Result<()> {
    let report = record.report.as_ref().expect("completed");
    let c = &record.config;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "template",
        "qubits",
        "layers",
        "observable",
        "shots",
        "train_acc",
        "test_acc",
        "time_min",
        "host",
    ])?;
    w.write_record([
        c.template.label().to_string(),
        c.n_qubits.to_string(),
        c.n_layers.to_string(),
        c.observable.name().to_string(),
        c.shots.to_string(),
        report.final_train_accuracy().to_string(),
        report.test_accuracy.to_string(),
        (report.wall_clock_training_seconds / 60.0).to_string(),
        record.host_label.clone(),
    ])?;
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Figure families emitted by the report command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFamily {
    Qubits,
    Observables,
    Shots,
    Epochs,
    Best,
}

impl ReportFamily {
    pub fn name(self) -> &'static str {
        match self {
            ReportFamily::Qubits => "qubits",
            ReportFamily::Observables => "observables",
            ReportFamily::Shots => "shots",
            ReportFamily::Epochs => "epochs",
            ReportFamily::Best => "best",
        }
    }

    /// Second grouping key next to the template; `None` for non-series families.
    pub fn series_field(self) -> Option<Field> {
        match self {
            ReportFamily::Qubits => Some(Field::Qubits),
            ReportFamily::Observables => Some(Field::Observable),
            ReportFamily::Shots => Some(Field::Shots),
            ReportFamily::Epochs | ReportFamily::Best => None,
        }
    }
}

impl std::str::FromStr for ReportFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "qubits" => Ok(ReportFamily::Qubits),
            "observables" | "observable" => Ok(ReportFamily::Observables),
            "shots" => Ok(ReportFamily::Shots),
            "epochs" => Ok(ReportFamily::Epochs),
            "best" => Ok(ReportFamily::Best),
            _ => Err(format!("unknown report family {s:?} (qubits, observables, shots, epochs, best)")),
        }
    }
}

/// Writes the CSVs of one family into `dir` and returns their paths. Series
/// families produce one file per template.
pub fn write_report(records: &[ExperimentRecord], family: ReportFamily, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let create = |name: String| -> Result<(PathBuf, BufWriter<File>)> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok((path, BufWriter::new(file)))
    };
    let mut written = Vec::new();
    match family.series_field() {
        Some(field) => {
            let series = aggregate(records, &[Field::Template, field], &RecordFilter::default());
            if series.is_empty() {
                return Err(Error::validation("store holds no completed records"));
            }
            let mut by_template: BTreeMap<String, Vec<AggregateSeries>> = BTreeMap::new();
            for s in series {
                by_template.entry(s.group[&Field::Template].clone()).or_default().push(s);
            }
            for (template, series) in by_template {
                let (path, file) = create(format!("{}-{template}.csv", family.name()))?;
                write_aggregate_csv(&series, file)?;
                written.push(path);
            }
        }
        None if family == ReportFamily::Epochs => {
            let series = epoch_convergence(records, &RecordFilter::default());
            if series.is_empty() {
                return Err(Error::validation("store holds no completed records"));
            }
            let (path, file) = create("epochs.csv".into())?;
            write_epoch_csv(&series, file)?;
            written.push(path);
        }
        None => {
            let best = best_record(records)?;
            let (path, file) = create("best.csv".into())?;
            write_best_csv(best, file)?;
            written.push(path);
        }
    }
    Ok(written)
}
