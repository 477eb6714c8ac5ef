//! Forward evaluation and parameter-shift differentiation of the quantum layer.

use std::f64::consts::FRAC_PI_2;

use crate::circuit::{CircuitSpec, Slot};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::sim::{basis_rotation_ops, shifted_pair_readout, Pauli, ShotMode, StateVector};

pub const PARAM_SHIFT: f64 = FRAC_PI_2;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantumForwardResult {
    pub expectations: Vec<f64>,
    pub cached_features: Vec<f64>,
    pub shot_mode: ShotMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantumGradient {
    pub d_loss_d_params: Vec<f64>,
    /// Circuit executions spent, always `2 * param_count`.
    pub executions: u64,
}

pub fn quantum_forward(
    spec: &CircuitSpec,
    params: &[f64],
    features: &[f64],
    obs: Pauli,
    mode: ShotMode,
) -> Result<QuantumForwardResult> {
    let state = spec.prepare_state(params, features)?;
    let expectations = state.into_expectations(obs, mode)?;
    Ok(QuantumForwardResult {
        expectations,
        cached_features: features.to_vec(),
        shot_mode: mode,
    })
}

/// Sampling stream for the shifted evaluation of `param` in direction `sign`.
fn shift_stream(mode: ShotMode, param: usize, plus: bool) -> ShotMode {
    match mode {
        ShotMode::Analytic => ShotMode::Analytic,
        ShotMode::Sampled { stream, .. } => {
            mode.with_stream(derive_seed(stream, &[param as u64, u64::from(plus)]))
        }
    }
}

/// Vector-Jacobian product `cotangent · ∂E/∂θ` by the two-term shift rule.
///
/// For a rotation `G(θ) = exp(−iθP/2)`, `G(θ ± π/2) = G(θ)(1 ∓ iP)/√2`, so
/// both shifted output states are `(ψ ∓ iχ)/√2` where `ψ` is the unshifted
/// output and `χ` the output with `P` inserted at the gate. One suffix run per
/// parameter yields `χ`; each shifted state is then read out on its own. In
/// sampled mode every shifted circuit draws from its own substream of
/// `mode`'s stream.
pub fn parameter_shift_grad(
    spec: &CircuitSpec,
    params: &[f64],
    features: &[f64],
    obs: Pauli,
    mode: ShotMode,
    cotangent: &[f64],
) -> Result<QuantumGradient> {
    spec.check_inputs(params, features)?;
    if cotangent.len() != spec.n_qubits {
        return Err(Error::Length {
            what: "cotangent",
            expected: spec.n_qubits,
            actual: cotangent.len(),
        });
    }
    if let ShotMode::Sampled { shots: 0, .. } = mode {
        return Err(Error::validation("shot count must be positive"));
    }
    let gates: Vec<_> = spec.gates().collect();
    let ops = spec.ops(params, features);
    let rotation = basis_rotation_ops(obs, spec.n_qubits);
    let mut grad = vec![0.0; spec.param_count];
    let mut executions = 0u64;

    // `psi` and `chi` are kept in the measurement basis of `obs`.
    let mut psi = StateVector::zero(spec.n_qubits)?;
    psi.apply_ops(&ops);
    psi.apply_ops(&rotation);
    let mut prefix = StateVector::zero(spec.n_qubits)?;
    let mut chi = prefix.clone();

    for (idx, gate) in gates.iter().enumerate() {
        for (pos, slot) in gate.slots.iter().enumerate() {
            let Slot::Param(k) = *slot else {
                continue;
            };
            chi.copy_from(&prefix);
            let mut tail = gate.ops_with_generator(params, features, pos);
            tail.extend_from_slice(&ops[idx + 1..]);
            tail.extend_from_slice(&rotation);
            chi.apply_ops(&tail);

            let modes = [shift_stream(mode, k, true), shift_stream(mode, k, false)];
            let [plus, minus] = shifted_pair_readout(&psi, &chi, modes)?;
            let dot = |e: &[f64]| cotangent.iter().zip(e).map(|(c, v)| c * v).sum::<f64>();
            grad[k] += (dot(&plus) - dot(&minus)) / 2.0;
            executions += 2;
        }
        prefix.apply_ops(&ops[idx..=idx]);
    }

    Ok(QuantumGradient {
        d_loss_d_params: grad,
        executions,
    })
}

/// Central finite differences of `cotangent · E(θ)`; analytic mode only.
pub fn finite_difference_grad(
    spec: &CircuitSpec,
    params: &[f64],
    features: &[f64],
    obs: Pauli,
    mode: ShotMode,
    h: f64,
    cotangent: &[f64],
) -> Result<QuantumGradient> {
    if mode.is_sampled() {
        return Err(Error::validation(
            "finite differences require analytic expectations",
        ));
    }
    if !(h > 0.0) {
        return Err(Error::validation(format!("step {h} must be positive")));
    }
    if cotangent.len() != spec.n_qubits {
        return Err(Error::Length {
            what: "cotangent",
            expected: spec.n_qubits,
            actual: cotangent.len(),
        });
    }
    let objective = |p: &[f64]| -> Result<f64> {
        let e = quantum_forward(spec, p, features, obs, ShotMode::Analytic)?.expectations;
        Ok(cotangent.iter().zip(&e).map(|(c, v)| c * v).sum())
    };
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        work[k] = params[k] + h;
        let plus = objective(&work)?;
        work[k] = params[k] - h;
        let minus = objective(&work)?;
        work[k] = params[k];
        grad.push((plus - minus) / (2.0 * h));
    }
    spec.check_inputs(params, features)?;
    Ok(QuantumGradient {
        executions: 2 * params.len() as u64,
        d_loss_d_params: grad,
    })
}
