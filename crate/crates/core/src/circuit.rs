//! Encoder and parameterized layer templates.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::sim::{gates, ControlledGate, Mat2, Op, Pauli, StateVector, MAX_QUBITS};

pub const DEFAULT_TWO_QUBIT_RATIO: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GateKind {
    Rx,
    Ry,
    Rz,
    #[serde(rename = "Rot")]
    Rot,
    H,
    #[serde(rename = "SDag")]
    SDag,
    Cnot,
    Cz,
}

impl GateKind {
    pub fn param_arity(self) -> usize {
        match self {
            GateKind::Rx | GateKind::Ry | GateKind::Rz => 1,
            GateKind::Rot => 3,
            GateKind::H | GateKind::SDag | GateKind::Cnot | GateKind::Cz => 0,
        }
    }

    pub fn wire_arity(self) -> usize {
        match self {
            GateKind::Cnot | GateKind::Cz => 2,
            _ => 1,
        }
    }
}

/// Where a rotation angle comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    /// Input feature index (encoder only).
    Feature(usize),
    /// Index into the trainable parameter vector.
    Param(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GateInstance {
    pub kind: GateKind,
    pub wires: Vec<usize>,
    pub slots: Vec<Slot>,
}

impl GateInstance {
    fn rotation(kind: GateKind, wire: usize, slots: Vec<Slot>) -> Self {
        Self {
            kind,
            wires: vec![wire],
            slots,
        }
    }

    fn controlled(kind: GateKind, control: usize, target: usize) -> Self {
        Self {
            kind,
            wires: vec![control, target],
            slots: Vec::new(),
        }
    }

    /// Trainable parameter indices referenced by this gate, in slot order.
    pub fn param_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().filter_map(|s| match s {
            Slot::Param(k) => Some(*k),
            Slot::Feature(_) => None,
        })
    }

    pub fn is_trainable(&self) -> bool {
        self.slots.iter().any(|s| matches!(s, Slot::Param(_)))
    }

    fn resolve(&self, slot: Slot, params: &[f64], features: &[f64]) -> f64 {
        match slot {
            Slot::Feature(i) => features[i],
            Slot::Param(k) => params[k],
        }
    }

    /// 2×2 matrix for a single-qubit gate with the given bindings. `shift`
    /// adds `(slot position, delta)` to one of the angles.
    pub(crate) fn matrix(
        &self,
        params: &[f64],
        features: &[f64],
        shift: Option<(usize, f64)>,
    ) -> Mat2 {
        let angle = |pos: usize| {
            let base = self.resolve(self.slots[pos], params, features);
            match shift {
                Some((p, delta)) if p == pos => base + delta,
                _ => base,
            }
        };
        match self.kind {
            GateKind::Rx => gates::rx(angle(0)),
            GateKind::Ry => gates::ry(angle(0)),
            GateKind::Rz => gates::rz(angle(0)),
            GateKind::Rot => gates::rot(angle(0), angle(1), angle(2)),
            GateKind::H => gates::hadamard(),
            GateKind::SDag => gates::s_dag(),
            GateKind::Cnot | GateKind::Cz => unreachable!("controlled gate has no 2x2 matrix"),
        }
    }

    /// The gate with its bindings evaluated.
    pub(crate) fn op(&self, params: &[f64], features: &[f64], shift: Option<(usize, f64)>) -> Op {
        match self.kind {
            GateKind::Cnot | GateKind::Cz => Op::Controlled {
                gate: if self.kind == GateKind::Cnot {
                    ControlledGate::Cnot
                } else {
                    ControlledGate::Cz
                },
                control: self.wires[0],
                target: self.wires[1],
            },
            _ => Op::Single {
                u: self.matrix(params, features, shift),
                wire: self.wires[0],
            },
        }
    }

    /// The gate with the Pauli generator of angle `pos` inserted where that
    /// rotation acts. Shifting the angle by `±π/2` then equals
    /// `(plain ∓ i · inserted) / √2` on any input state.
    pub(crate) fn ops_with_generator(&self, params: &[f64], features: &[f64], pos: usize) -> Vec<Op> {
        let wire = self.wires[0];
        let single = |u: Mat2| Op::Single { u, wire };
        let angle = |p: usize| self.resolve(self.slots[p], params, features);
        let plain = self.op(params, features, None);
        match (self.kind, pos) {
            (GateKind::Rx, 0) => vec![plain, single(Pauli::X.matrix())],
            (GateKind::Ry, 0) => vec![plain, single(Pauli::Y.matrix())],
            (GateKind::Rz, 0) => vec![plain, single(Pauli::Z.matrix())],
            (GateKind::Rot, 0) => vec![single(Pauli::Z.matrix()), plain],
            (GateKind::Rot, 1) => vec![
                single(gates::rz(angle(0))),
                single(Pauli::Y.matrix()),
                single(gates::matmul(&gates::rz(angle(2)), &gates::ry(angle(1)))),
            ],
            (GateKind::Rot, 2) => vec![plain, single(Pauli::Z.matrix())],
            (kind, pos) => unreachable!("{kind:?} has no angle {pos}"),
        }
    }

    /// Applies the gate. Wires are assumed validated at construction.
    #[cfg(test)]
    pub(crate) fn apply(
        &self,
        state: &mut StateVector,
        params: &[f64],
        features: &[f64],
        shift: Option<(usize, f64)>,
    ) {
        state.apply_ops(&[self.op(params, features, shift)]);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemplateKind {
    BasicEntangling,
    StronglyEntangling,
    Random { seed: u64, two_qubit_ratio: f64 },
}

impl TemplateKind {
    pub fn random(seed: u64) -> Self {
        TemplateKind::Random {
            seed,
            two_qubit_ratio: DEFAULT_TWO_QUBIT_RATIO,
        }
    }

    /// Short label used in CSV output and file names.
    pub fn label(&self) -> &'static str {
        match self {
            TemplateKind::BasicEntangling => "be",
            TemplateKind::StronglyEntangling => "se",
            TemplateKind::Random { .. } => "random",
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A complete circuit: encoder followed by repeated layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitSpec {
    pub n_qubits: usize,
    pub encoder_gates: Vec<GateInstance>,
    pub layer_gates: Vec<Vec<GateInstance>>,
    pub param_count: usize,
}

impl CircuitSpec {
    pub fn build(template: TemplateKind, n_qubits: usize, n_layers: usize) -> Result<Self> {
        match template {
            TemplateKind::BasicEntangling => build_basic_entangling(n_qubits, n_layers),
            TemplateKind::StronglyEntangling => build_strongly_entangling(n_qubits, n_layers),
            TemplateKind::Random {
                seed,
                two_qubit_ratio,
            } => build_random(n_qubits, n_layers, seed, two_qubit_ratio),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layer_gates.len()
    }

    /// All gates in execution order.
    pub fn gates(&self) -> impl Iterator<Item = &GateInstance> {
        self.encoder_gates
            .iter()
            .chain(self.layer_gates.iter().flatten())
    }

    pub fn gate_count(&self) -> usize {
        self.encoder_gates.len() + self.layer_gates.iter().map(Vec::len).sum::<usize>()
    }

    pub(crate) fn check_inputs(&self, params: &[f64], features: &[f64]) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::Length {
                what: "parameters",
                expected: self.param_count,
                actual: params.len(),
            });
        }
        if features.len() != self.n_qubits {
            return Err(Error::Length {
                what: "features",
                expected: self.n_qubits,
                actual: features.len(),
            });
        }
        Ok(())
    }

    /// Runs encoder and layers on `|0…0⟩`.
    pub fn prepare_state(&self, params: &[f64], features: &[f64]) -> Result<StateVector> {
        self.check_inputs(params, features)?;
        let mut state = StateVector::zero(self.n_qubits)?;
        state.apply_ops(&self.ops(params, features));
        Ok(state)
    }

    /// Every gate with its bindings evaluated, in execution order.
    pub(crate) fn ops(&self, params: &[f64], features: &[f64]) -> Vec<Op> {
        self.gates().map(|g| g.op(params, features, None)).collect()
    }

    /// JSON debug dump: the flat gate list in execution order.
    pub fn dump_json(&self) -> Result<String> {
        let gates: Vec<&GateInstance> = self.gates().collect();
        Ok(serde_json::to_string_pretty(&gates)?)
    }
}

pub fn param_count(template: TemplateKind, n_qubits: usize, n_layers: usize) -> usize {
    match template {
        TemplateKind::StronglyEntangling => 3 * n_layers * n_qubits,
        TemplateKind::BasicEntangling | TemplateKind::Random { .. } => n_layers * n_qubits,
    }
}

fn check_shape(n_qubits: usize, n_layers: usize) -> Result<()> {
    if n_qubits == 0 || n_qubits > MAX_QUBITS {
        return Err(Error::Capacity(n_qubits));
    }
    if n_layers == 0 {
        return Err(Error::validation("layer count must be at least 1"));
    }
    Ok(())
}

/// One `RY(x_i)` per qubit with angle bound to feature `i`.
pub fn build_encoder(n_qubits: usize) -> Vec<GateInstance> {
    (0..n_qubits)
        .map(|q| GateInstance::rotation(GateKind::Ry, q, vec![Slot::Feature(q)]))
        .collect()
}

/// CNOT ring edges `i -> i+1 mod n`; a 2-qubit ring is the single edge (0, 1).
fn ring_edges(n_qubits: usize) -> Vec<(usize, usize)> {
    match n_qubits {
        0 | 1 => Vec::new(),
        2 => vec![(0, 1)],
        n => (0..n).map(|i| (i, (i + 1) % n)).collect(),
    }
}

pub fn build_basic_entangling(n_qubits: usize, n_layers: usize) -> Result<CircuitSpec> {
    check_shape(n_qubits, n_layers)?;
    let layer_gates = (0..n_layers)
        .map(|l| {
            let mut layer: Vec<GateInstance> = (0..n_qubits)
                .map(|q| {
                    GateInstance::rotation(GateKind::Rx, q, vec![Slot::Param(l * n_qubits + q)])
                })
                .collect();
            layer.extend(
                ring_edges(n_qubits)
                    .into_iter()
                    .map(|(c, t)| GateInstance::controlled(GateKind::Cnot, c, t)),
            );
            layer
        })
        .collect();
    Ok(CircuitSpec {
        n_qubits,
        encoder_gates: build_encoder(n_qubits),
        layer_gates,
        param_count: n_layers * n_qubits,
    })
}

/// Entangler range for layer `l`: `(l mod (n-1)) + 1`.
pub fn strongly_entangling_range(layer: usize, n_qubits: usize) -> usize {
    layer % (n_qubits - 1) + 1
}

pub fn build_strongly_entangling(n_qubits: usize, n_layers: usize) -> Result<CircuitSpec> {
    check_shape(n_qubits, n_layers)?;
    let layer_gates = (0..n_layers)
        .map(|l| {
            let mut layer: Vec<GateInstance> = (0..n_qubits)
                .map(|q| {
                    let base = 3 * (l * n_qubits + q);
                    GateInstance::rotation(
                        GateKind::Rot,
                        q,
                        (base..base + 3).map(Slot::Param).collect(),
                    )
                })
                .collect();
            if n_qubits > 1 {
                let r = strongly_entangling_range(l, n_qubits);
                layer.extend(
                    (0..n_qubits)
                        .map(|i| GateInstance::controlled(GateKind::Cnot, i, (i + r) % n_qubits)),
                );
            }
            layer
        })
        .collect();
    Ok(CircuitSpec {
        n_qubits,
        encoder_gates: build_encoder(n_qubits),
        layer_gates,
        param_count: 3 * n_layers * n_qubits,
    })
}

/// Seeded random layer, generated once and repeated `n_layers` times with
/// fresh trainable slots per repetition.
pub fn build_random(
    n_qubits: usize,
    n_layers: usize,
    seed: u64,
    two_qubit_ratio: f64,
) -> Result<CircuitSpec> {
    check_shape(n_qubits, n_layers)?;
    if !(0.0..1.0).contains(&two_qubit_ratio) {
        return Err(Error::validation(format!(
            "two-qubit ratio {two_qubit_ratio} outside [0, 1)"
        )));
    }
    let template = random_layer_structure(n_qubits, seed, two_qubit_ratio);
    let layer_gates = (0..n_layers)
        .map(|l| {
            template
                .iter()
                .map(|g| GateInstance {
                    kind: g.kind,
                    wires: g.wires.clone(),
                    slots: g
                        .slots
                        .iter()
                        .map(|s| match s {
                            Slot::Param(k) => Slot::Param(l * n_qubits + k),
                            other => *other,
                        })
                        .collect(),
                })
                .collect()
        })
        .collect();
    Ok(CircuitSpec {
        n_qubits,
        encoder_gates: build_encoder(n_qubits),
        layer_gates,
        param_count: n_layers * n_qubits,
    })
}

/// The single layer drawn from the splitmix64 stream keyed by `seed`; slots
/// are numbered `0..n_qubits`.
fn random_layer_structure(n_qubits: usize, seed: u64, ratio: f64) -> Vec<GateInstance> {
    const ENTANGLERS: [GateKind; 2] = [GateKind::Cnot, GateKind::Cz];
    const ROTATIONS: [GateKind; 3] = [GateKind::Rx, GateKind::Ry, GateKind::Rz];
    let n = n_qubits as u64;
    let mut rng = SplitMix64::new(seed);
    let mut gates = Vec::new();
    for slot in 0..n_qubits {
        if n_qubits > 1 && rng.next_f64() < ratio {
            let kind = ENTANGLERS[rng.below(2) as usize];
            let control = rng.below(n) as usize;
            let mut target = rng.below(n - 1) as usize;
            if target >= control {
                target += 1;
            }
            gates.push(GateInstance::controlled(kind, control, target));
        }
        let kind = ROTATIONS[rng.below(3) as usize];
        let wire = rng.below(n) as usize;
        gates.push(GateInstance::rotation(kind, wire, vec![Slot::Param(slot)]));
    }
    gates
}
