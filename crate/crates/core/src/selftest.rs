//! Built-in invariant checks run by `qhb selftest`.

use std::f64::consts::{PI, TAU};
use std::time::{Duration, Instant};

use num_complex::Complex64;

use crate::circuit::CircuitSpec;
use crate::grad::{finite_difference_grad, parameter_shift_grad};
use crate::rng::{derive_seed, SplitMix64};
use crate::sim::{gates, ControlledGate, Pauli, ShotMode, StateVector};
use crate::TemplateKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Deterministic,
    /// Monte-Carlo sampling checks, skipped by `--quick`.
    Sampling,
}

pub struct Check {
    pub name: &'static str,
    pub kind: CheckKind,
    pub run: fn() -> Result<(), String>,
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub result: Result<(), String>,
    pub elapsed: Duration,
}

pub fn checks() -> Vec<Check> {
    vec![
        Check {
            name: "norm-preservation",
            kind: CheckKind::Deterministic,
            run: norm_preservation,
        },
        Check {
            name: "gate-identities",
            kind: CheckKind::Deterministic,
            run: gate_identities,
        },
        Check {
            name: "gradient-vs-finite-difference",
            kind: CheckKind::Deterministic,
            run: gradient_vs_finite_difference,
        },
        Check {
            name: "random-circuit-determinism",
            kind: CheckKind::Deterministic,
            run: random_circuit_determinism,
        },
        Check {
            name: "sampling-convergence",
            kind: CheckKind::Sampling,
            run: sampling_convergence,
        },
    ]
}

/// Runs the checks in order, skipping sampling checks when `quick`.
pub fn run_checks(quick: bool) -> Vec<CheckOutcome> {
    checks()
        .into_iter()
        .filter(|c| !(quick && c.kind == CheckKind::Sampling))
        .map(|c| {
            let start = Instant::now();
            let result = (c.run)();
            CheckOutcome {
                name: c.name,
                result,
                elapsed: start.elapsed(),
            }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_state(n: usize, rng: &mut SplitMix64) -> StateVector {
    let mut state = StateVector::zero(n).expect("valid size");
    for q in 0..n {
        let u = gates::rot(rng.uniform(0.0, TAU), rng.uniform(0.0, TAU), rng.uniform(0.0, TAU));
        state.apply_single(&u, q).expect("valid qubit");
    }
    state
}

fn norm_preservation() -> Result<(), String> {
    let mut rng = SplitMix64::new(0x5eed);
    for trial in 0..1000 {
        let n = 1 + rng.below(6) as usize;
        let mut state = random_state(n, &mut rng);
        for _ in 0..20 {
            if n > 1 && rng.next_f64() < 0.3 {
                let c = rng.below(n as u64) as usize;
                let t = (c + 1 + rng.below(n as u64 - 1) as usize) % n;
                let g = if rng.below(2) == 0 {
                    ControlledGate::Cnot
                } else {
                    ControlledGate::Cz
                };
                state.apply_controlled(g, c, t).map_err(|e| e.to_string())?;
            } else {
                let theta = rng.uniform(0.0, TAU);
                let u = match rng.below(5) {
                    0 => gates::rx(theta),
                    1 => gates::ry(theta),
                    2 => gates::rz(theta),
                    3 => gates::hadamard(),
                    _ => gates::rot(theta, rng.uniform(0.0, TAU), rng.uniform(0.0, TAU)),
                };
                let q = rng.below(n as u64) as usize;
                state.apply_single(&u, q).map_err(|e| e.to_string())?;
            }
        }
        let err = (state.norm() - 1.0).abs();
        ensure(err < 1e-10, || format!("sequence {trial}: norm drift {err:e}"))?;
    }
    Ok(())
}

fn gate_identities() -> Result<(), String> {
    let close = |a: Complex64, b: Complex64| (a - b).norm() < 1e-12;
    let mut rng = SplitMix64::new(7);
    let start = random_state(3, &mut rng);
    let mut s = start.clone();
    s.apply_single(&gates::hadamard(), 1).map_err(|e| e.to_string())?;
    s.apply_single(&gates::hadamard(), 1).map_err(|e| e.to_string())?;
    let same = (0..s.len()).all(|i| close(s.amplitude(i), start.amplitude(i)));
    ensure(same, || "H·H is not the identity".into())?;

    let mut s = StateVector::zero(2).map_err(|e| e.to_string())?;
    s.apply_single(&gates::rx(PI), 0).map_err(|e| e.to_string())?;
    s.apply_single(&gates::rx(PI), 1).map_err(|e| e.to_string())?;
    let before = s.amplitude(3);
    s.apply_controlled(ControlledGate::Cz, 0, 1).map_err(|e| e.to_string())?;
    ensure(close(s.amplitude(3), -before), || "CZ does not negate |11>".into())?;

    let mut s = StateVector::zero(1).map_err(|e| e.to_string())?;
    s.apply_single(&gates::ry(PI), 0).map_err(|e| e.to_string())?;
    ensure(
        close(s.amplitude(0), Complex64::new(0.0, 0.0)) && close(s.amplitude(1), Complex64::new(1.0, 0.0)),
        || "RY(pi)|0> is not |1>".into(),
    )
}

const TEMPLATES: [TemplateKind; 3] = [
    TemplateKind::BasicEntangling,
    TemplateKind::StronglyEntangling,
    TemplateKind::Random {
        seed: 11,
        two_qubit_ratio: 0.3,
    },
];

fn gradient_vs_finite_difference() -> Result<(), String> {
    let mut rng = SplitMix64::new(0x9ad);
    let n = 4;
    for i in 0..60 {
        let template = TEMPLATES[i % 3];
        let layers = 2 + (i / 3) % 2;
        let obs = Pauli::ALL[(i / 6) % 3];
        let spec = CircuitSpec::build(template, n, layers).map_err(|e| e.to_string())?;
        let params: Vec<f64> = (0..spec.param_count).map(|_| rng.uniform(0.0, TAU)).collect();
        let features: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, PI)).collect();
        for q in 0..n {
            let mut cot = vec![0.0; n];
            cot[q] = 1.0;
            let ps = parameter_shift_grad(&spec, &params, &features, obs, ShotMode::Analytic, &cot)
                .map_err(|e| e.to_string())?;
            let fd = finite_difference_grad(&spec, &params, &features, obs, ShotMode::Analytic, 1e-4, &cot)
                .map_err(|e| e.to_string())?;
            let err = ps
                .d_loss_d_params
                .iter()
                .zip(&fd.d_loss_d_params)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            ensure(err < 1e-5, || {
                format!("{template} L{layers} {obs} qubit {q}: max error {err:e}")
            })?;
        }
    }
    Ok(())
}

fn random_circuit_determinism() -> Result<(), String> {
    for i in 0..100u64 {
        let seed = derive_seed(0xc1c, &[i]);
        let n = [4, 9, 16][(i % 3) as usize];
        let layers = 2 + (i % 5) as usize;
        let template = TemplateKind::random(seed);
        let a = CircuitSpec::build(template, n, layers).map_err(|e| e.to_string())?;
        let b = CircuitSpec::build(template, n, layers).map_err(|e| e.to_string())?;
        let ja = a.dump_json().map_err(|e| e.to_string())?;
        let jb = b.dump_json().map_err(|e| e.to_string())?;
        ensure(ja == jb, || format!("seed {seed:#x}: gate lists differ"))?;
        let first = &a.layer_gates[0];
        for layer in &a.layer_gates[1..] {
            let same = layer.len() == first.len()
                && layer
                    .iter()
                    .zip(first)
                    .all(|(g, h)| g.kind == h.kind && g.wires == h.wires);
            ensure(same, || format!("seed {seed:#x}: layer structures differ"))?;
        }
    }
    Ok(())
}

fn sampling_convergence() -> Result<(), String> {
    let mut plus = StateVector::zero(1).map_err(|e| e.to_string())?;
    plus.apply_single(&gates::hadamard(), 0).map_err(|e| e.to_string())?;
    let shots = 100u32;
    let runs = 200u64;
    let mut sum = 0.0;
    for r in 0..runs {
        let mode = ShotMode::Sampled {
            shots,
            stream: derive_seed(0x5a3, &[r]),
        };
        let e = plus.expectation_all(Pauli::Z, mode).map_err(|e| e.to_string())?[0];
        let steps = (e + 1.0) * f64::from(shots) / 2.0;
        ensure((steps - steps.round()).abs() < 1e-9, || format!("estimate {e} is not a multiple of 2/shots"))?;
        sum += e;
    }
    let mean = sum / runs as f64;
    let bound = 4.0 / ((runs * u64::from(shots)) as f64).sqrt();
    ensure(mean.abs() <= bound, || format!("mean {mean} exceeds {bound}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for outcome in run_checks(false) {
            assert!(outcome.result.is_ok(), "{}: {:?}", outcome.name, outcome.result);
        }
    }

    #[test]
    fn quick_skips_sampling() {
        let names: Vec<_> = run_checks(true).iter().map(|o| o.name).collect();
        assert!(!names.contains(&"sampling-convergence"));
        assert_eq!(names.len(), checks().len() - 1);
    }
}
