//! Dense softmax output layer, cross-entropy loss and optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const NUM_CLASSES: usize = 4;

/// `n_in → 4` affine map followed by softmax. Weights are row-major, one row
/// per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub n_in: usize,
    pub weights: Vec<f64>,
    pub bias: [f64; NUM_CLASSES],
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadBackward {
    pub loss: f64,
    pub probs: [f64; NUM_CLASSES],
    pub d_weights: Vec<f64>,
    pub d_bias: [f64; NUM_CLASSES],
    /// `Wᵀ (p − onehot)`, the gradient with respect to the layer input.
    pub cotangent: Vec<f64>,
}

pub fn softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.map(|z| (z - max).exp());
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

impl DenseLayer {
    pub fn zeros(n_in: usize) -> Self {
        Self {
            n_in,
            weights: vec![0.0; NUM_CLASSES * n_in],
            bias: [0.0; NUM_CLASSES],
        }
    }

    /// Fan-in uniform init in `[-1/√n_in, 1/√n_in]`, zero bias.
    pub fn init(n_in: usize, rng: &mut SplitMix64) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        Self {
            n_in,
            weights: (0..NUM_CLASSES * n_in)
                .map(|_| rng.uniform(-bound, bound))
                .collect(),
            bias: [0.0; NUM_CLASSES],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + NUM_CLASSES
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.n_in {
            Ok(())
        } else {
            Err(Error::Length {
                what: "head input",
                expected: self.n_in,
                actual: x.len(),
            })
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<[f64; NUM_CLASSES]> {
        self.check_input(x)?;
        let mut out = self.bias;
        for (c, row) in self.weights.chunks_exact(self.n_in).enumerate() {
            out[c] += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        Ok(out)
    }

    pub fn forward(&self, x: &[f64]) -> Result<[f64; NUM_CLASSES]> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn loss_and_backward(&self, x: &[f64], label: usize) -> Result<HeadBackward> {
        if label >= NUM_CLASSES {
            return Err(Error::validation(format!("label {label} is not a class index")));
        }
        let logits = self.logits(x)?;
        let probs = softmax(&logits);
        // log-sum-exp form stays finite when probs[label] underflows.
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let loss = lse - logits[label];

        let mut delta = probs;
        delta[label] -= 1.0;
        let mut d_weights = Vec::with_capacity(self.weights.len());
        for d in delta {
            d_weights.extend(x.iter().map(|v| d * v));
        }
        let mut cotangent = vec![0.0; self.n_in];
        for (row, d) in self.weights.chunks_exact(self.n_in).zip(delta) {
            for (c, w) in cotangent.iter_mut().zip(row) {
                *c += w * d;
            }
        }
        Ok(HeadBackward {
            loss,
            probs,
            d_weights,
            d_bias: delta,
            cotangent,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::validation(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, n_params: usize) -> Self {
        let moments = match kind {
            OptimizerKind::Adam => n_params,
            OptimizerKind::Sgd => 0,
        };
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update in place. Non-finite gradients abort without touching
    /// `params`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Length {
                what: "gradient",
                expected: params.len(),
                actual: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i} is {}", grads[i])));
        }
        self.t += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    return Err(Error::Length {
                        what: "optimizer state",
                        expected: self.m.len(),
                        actual: params.len(),
                    });
                }
                let t = self.t as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}
