//! The hybrid model: angle encoder, parameterized circuit, Pauli readout and
//! a dense softmax head, plus its training loop.

use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{CircuitSpec, TemplateKind};
use crate::data::FeatureSet;
use crate::error::{Error, Result};
use crate::grad::{parameter_shift_grad, quantum_forward};
use crate::head::{argmax, DenseLayer, Optimizer, OptimizerKind, NUM_CLASSES};
use crate::rng::{derive_seed, SplitMix64};
use crate::sim::{Pauli, ShotMode, MAX_QUBITS};

// Stream tags keep the different consumers of an experiment seed apart.
const TAG_INIT_QUANTUM: u64 = 1;
const TAG_INIT_HEAD: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_TRAIN_FORWARD: u64 = 4;
const TAG_TRAIN_SHIFT: u64 = 5;
const TAG_TRAIN_ACCURACY: u64 = 6;
const TAG_TEST: u64 = 7;

pub const PAPER_LAYERS: std::ops::RangeInclusive<usize> = 2..=6;
pub const PAPER_QUBITS: [usize; 3] = [4, 9, 16];
pub const PAPER_SHOTS: [u32; 2] = [100, 1024];
pub const PAPER_EPOCHS: usize = 5;
pub const PAPER_BATCH_SIZE: usize = 5;
pub const PAPER_LEARNING_RATE: f64 = 0.01;
pub const PAPER_TRAIN_SAMPLES: usize = 100;
pub const PAPER_TEST_SAMPLES: usize = 100;

/// Readout setting of an experiment: exact expectations or a shot budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "ShotRepr", into = "ShotRepr")]
pub enum ShotSetting {
    Analytic,
    Shots(u32),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ShotRepr {
    Count(u32),
    Label(String),
}

impl TryFrom<ShotRepr> for ShotSetting {
    type Error = String;

    fn try_from(repr: ShotRepr) -> std::result::Result<Self, String> {
        match repr {
            ShotRepr::Count(0) => Err("shot count must be positive".into()),
            ShotRepr::Count(n) => Ok(ShotSetting::Shots(n)),
            ShotRepr::Label(s) if s == "analytic" => Ok(ShotSetting::Analytic),
            ShotRepr::Label(s) => Err(format!("expected shot count or \"analytic\", got {s:?}")),
        }
    }
}

impl From<ShotSetting> for ShotRepr {
    fn from(s: ShotSetting) -> Self {
        match s {
            ShotSetting::Analytic => ShotRepr::Label("analytic".into()),
            ShotSetting::Shots(n) => ShotRepr::Count(n),
        }
    }
}

impl ShotSetting {
    pub fn mode(self, stream: u64) -> ShotMode {
        match self {
            ShotSetting::Analytic => ShotMode::Analytic,
            ShotSetting::Shots(shots) => ShotMode::Sampled { shots, stream },
        }
    }
}

impl fmt::Display for ShotSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShotSetting::Analytic => f.write_str("analytic"),
            ShotSetting::Shots(n) => write!(f, "{n}"),
        }
    }
}

/// One experiment point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HqnnConfig {
    pub template: TemplateKind,
    pub n_layers: usize,
    pub n_qubits: usize,
    pub observable: Pauli,
    pub shots: ShotSetting,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub shuffle: bool,
}

impl Default for HqnnConfig {
    fn default() -> Self {
        Self {
            template: TemplateKind::BasicEntangling,
            n_layers: 4,
            n_qubits: 4,
            observable: Pauli::Z,
            shots: ShotSetting::Analytic,
            epochs: PAPER_EPOCHS,
            batch_size: PAPER_BATCH_SIZE,
            learning_rate: PAPER_LEARNING_RATE,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            shuffle: false,
        }
    }
}

impl HqnnConfig {
    /// Library-mode checks: any legal value.
    pub fn validate(&self) -> Result<()> {
        if self.n_qubits == 0 || self.n_qubits > MAX_QUBITS {
            return Err(Error::Capacity(self.n_qubits));
        }
        if self.n_layers == 0 {
            return Err(Error::validation("layer count must be at least 1"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.shots == ShotSetting::Shots(0) {
            return Err(Error::validation("shot count must be positive"));
        }
        if let TemplateKind::Random { two_qubit_ratio, .. } = self.template {
            if !(0.0..1.0).contains(&two_qubit_ratio) {
                return Err(Error::validation("two-qubit ratio must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Accepts exactly the tested values of the original study.
    pub fn validate_paper_grid(&self) -> Result<()> {
        self.validate()?;
        let mut problems = Vec::new();
        if !PAPER_LAYERS.contains(&self.n_layers) {
            problems.push(format!("layers {} not in 2..=6", self.n_layers));
        }
        if !PAPER_QUBITS.contains(&self.n_qubits) {
            problems.push(format!("qubits {} not in {{4,9,16}}", self.n_qubits));
        }
        if !matches!(self.shots, ShotSetting::Shots(n) if PAPER_SHOTS.contains(&n)) {
            problems.push(format!("shots {} not in {{100,1024}}", self.shots));
        }
        if self.epochs != PAPER_EPOCHS
            || self.batch_size != PAPER_BATCH_SIZE
            || self.learning_rate != PAPER_LEARNING_RATE
        {
            problems.push("training settings differ from epochs 5, batch 5, lr 0.01".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(problems.join("; ")))
        }
    }

    pub fn param_count(&self) -> usize {
        crate::circuit::param_count(self.template, self.n_qubits, self.n_layers)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub per_epoch_train_accuracy: Vec<f64>,
    pub per_epoch_mean_loss: Vec<f64>,
    pub test_accuracy: f64,
    /// Gradient steps, optimizer updates and per-epoch accuracy passes.
    pub wall_clock_training_seconds: f64,
    pub circuit_executions: u64,
    pub optimizer_steps: u64,
}

impl TrainReport {
    pub fn final_train_accuracy(&self) -> f64 {
        self.per_epoch_train_accuracy.last().copied().unwrap_or(0.0)
    }

    /// Same report with the wall-clock field zeroed, for determinism checks.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_training_seconds: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HqnnModel {
    pub config: HqnnConfig,
    pub circuit: CircuitSpec,
    pub quantum_params: Vec<f64>,
    pub head: DenseLayer,
}

struct SampleGrad {
    loss: f64,
    grads: Vec<f64>,
}

impl HqnnModel {
    /// Seeded initialization: rotation angles uniform in `[0, 2π)`, head by
    /// fan-in uniform.
    pub fn new(config: HqnnConfig) -> Result<Self> {
        config.validate()?;
        let circuit = CircuitSpec::build(config.template, config.n_qubits, config.n_layers)?;
        let mut rng = SplitMix64::new(derive_seed(config.seed, &[TAG_INIT_QUANTUM]));
        let quantum_params = (0..circuit.param_count)
            .map(|_| rng.uniform(0.0, TAU))
            .collect();
        let mut rng = SplitMix64::new(derive_seed(config.seed, &[TAG_INIT_HEAD]));
        let head = DenseLayer::init(config.n_qubits, &mut rng);
        Ok(Self {
            config,
            circuit,
            quantum_params,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.quantum_params.len() + self.head.param_count()
    }

    /// Quantum angles, then head weights (row-major), then head bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.quantum_params);
        out.extend_from_slice(&self.head.weights);
        out.extend_from_slice(&self.head.bias);
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Length {
                what: "flat parameters",
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let (q, rest) = flat.split_at(self.quantum_params.len());
        let (w, b) = rest.split_at(self.head.weights.len());
        self.quantum_params.copy_from_slice(q);
        self.head.weights.copy_from_slice(w);
        self.head.bias.copy_from_slice(b);
        Ok(())
    }

    pub fn expectations(&self, features: &[f64], stream: u64) -> Result<Vec<f64>> {
        Ok(quantum_forward(
            &self.circuit,
            &self.quantum_params,
            features,
            self.config.observable,
            self.config.shots.mode(stream),
        )?
        .expectations)
    }

    /// Class probabilities for one sample. `stream` only matters with shots.
    pub fn forward(&self, features: &[f64], stream: u64) -> Result<[f64; NUM_CLASSES]> {
        self.head.forward(&self.expectations(features, stream)?)
    }

    fn sample_gradient(&self, features: &[f64], label: usize, stream: u64) -> Result<SampleGrad> {
        let x = self.expectations(features, derive_seed(stream, &[TAG_TRAIN_FORWARD]))?;
        let back = self.head.loss_and_backward(&x, label)?;
        let q = parameter_shift_grad(
            &self.circuit,
            &self.quantum_params,
            features,
            self.config.observable,
            self.config.shots.mode(derive_seed(stream, &[TAG_TRAIN_SHIFT])),
            &back.cotangent,
        )?;
        let mut grads = q.d_loss_d_params;
        grads.extend_from_slice(&back.d_weights);
        grads.extend_from_slice(&back.d_bias);
        Ok(SampleGrad {
            loss: back.loss,
            grads,
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = Checkpoint {
            config: self.config.clone(),
            quantum_params: self.quantum_params.clone(),
            weights: self.head.weights.clone(),
            bias: self.head.bias,
            seed: self.config.seed,
        };
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(&ckpt)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        let mut model = HqnnModel::new(ckpt.config)?;
        let mut flat = ckpt.quantum_params;
        flat.extend_from_slice(&ckpt.weights);
        flat.extend_from_slice(&ckpt.bias);
        model.set_flat_params(&flat)?;
        Ok(model)
    }
}

/// On-disk model: `{config, quantum_params, weights, bias, seed}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: HqnnConfig,
    pub quantum_params: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: [f64; NUM_CLASSES],
    pub seed: u64,
}

fn accuracy_with_stream(model: &HqnnModel, data: &FeatureSet, base: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    let correct: Result<Vec<bool>> = data
        .features
        .par_iter()
        .zip(&data.labels)
        .enumerate()
        .map(|(i, (x, &label))| {
            let probs = model.forward(x, derive_seed(base, &[i as u64]))?;
            Ok(argmax(&probs) == label)
        })
        .collect();
    let hits = correct?.into_iter().filter(|&c| c).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Fraction of samples whose most probable class matches the label.
pub fn evaluate(model: &HqnnModel, data: &FeatureSet) -> Result<f64> {
    accuracy_with_stream(model, data, derive_seed(model.config.seed, &[TAG_TEST]))
}

fn check_dataset(config: &HqnnConfig, data: &FeatureSet, what: &str) -> Result<()> {
    if data.n_qubits != config.n_qubits {
        return Err(Error::validation(format!(
            "{what} set has {} features per sample, model has {} qubits",
            data.n_qubits, config.n_qubits
        )));
    }
    if data.is_empty() {
        return Err(Error::validation(format!("{what} set is empty")));
    }
    if let Some(x) = data.features.iter().find(|x| x.len() != config.n_qubits) {
        return Err(Error::Length {
            what: "sample features",
            expected: config.n_qubits,
            actual: x.len(),
        });
    }
    Ok(())
}

/// Trains from the seeded initialization and evaluates once on `test`.
///
/// Each batch gradient is the mean of per-sample gradients, summed in sample
/// order so analytic runs are bit-reproducible. A non-finite loss or gradient
/// aborts with [`Error::NonFinite`].
pub fn train(
    config: &HqnnConfig,
    train_set: &FeatureSet,
    test_set: &FeatureSet,
) -> Result<(HqnnModel, TrainReport)> {
    config.validate()?;
    check_dataset(config, train_set, "training")?;
    check_dataset(config, test_set, "test")?;
    let mut model = HqnnModel::new(config.clone())?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, model.param_count());
    let n_train = train_set.len();
    let executions_per_sample = 1 + 2 * model.circuit.param_count as u64;
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut executions = 0u64;
    let mut per_epoch_train_accuracy = Vec::with_capacity(config.epochs);
    let mut per_epoch_mean_loss = Vec::with_capacity(config.epochs);

    let started = Instant::now();
    for epoch in 0..config.epochs {
        if config.shuffle {
            let mut rng = SplitMix64::new(derive_seed(config.seed, &[TAG_SHUFFLE, epoch as u64]));
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let samples: Result<Vec<SampleGrad>> = batch
                .par_iter()
                .map(|&i| {
                    let stream = derive_seed(config.seed, &[epoch as u64, i as u64]);
                    model.sample_gradient(&train_set.features[i], train_set.labels[i], stream)
                })
                .collect();
            let samples = samples?;
            let mut grad = vec![0.0; model.param_count()];
            for s in &samples {
                if !s.loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {} at epoch {}",
                        s.loss,
                        epoch + 1
                    )));
                }
                loss_sum += s.loss;
                for (acc, g) in grad.iter_mut().zip(&s.grads) {
                    *acc += g;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let mut flat = model.flat_params();
            optimizer.step(&mut flat, &grad)?;
            model.set_flat_params(&flat)?;
            executions += batch.len() as u64 * executions_per_sample;
        }
        per_epoch_mean_loss.push(loss_sum / n_train as f64);
        let stream = derive_seed(config.seed, &[TAG_TRAIN_ACCURACY, epoch as u64]);
        per_epoch_train_accuracy.push(accuracy_with_stream(&model, train_set, stream)?);
        executions += n_train as u64;
    }
    let wall_clock_training_seconds = started.elapsed().as_secs_f64();

    let test_accuracy = evaluate(&model, test_set)?;
    executions += test_set.len() as u64;

    let report = TrainReport {
        per_epoch_train_accuracy,
        per_epoch_mean_loss,
        test_accuracy,
        wall_clock_training_seconds,
        circuit_executions: executions,
        optimizer_steps: optimizer.steps(),
    };
    Ok((model, report))
}

/// Executions predicted by the cost model for a run without failures.
pub fn predicted_circuit_executions(config: &HqnnConfig, n_train: usize, n_test: usize) -> u64 {
    let per_sample = 1 + 2 * config.param_count() as u64;
    (config.epochs * n_train) as u64 * per_sample + (config.epochs * n_train + n_test) as u64
}

/// `epochs × ceil(n_train / batch_size)`.
pub fn predicted_optimizer_steps(config: &HqnnConfig, n_train: usize) -> u64 {
    (config.epochs * n_train.div_ceil(config.batch_size)) as u64
}
