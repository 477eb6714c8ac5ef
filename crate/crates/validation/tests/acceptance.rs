//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fails.
//!
//! Needs the MNIST fixture in `data/mnist-fixture` and the committed grid
//! store `results/paper-grid.jsonl`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::{PI, TAU};
use std::path::PathBuf;
use std::time::Instant;

use num_complex::Complex64;
use qhb_core::data::DataSource;
use qhb_core::grad::{parameter_shift_grad, quantum_forward};
use qhb_core::model::train;
use qhb_core::rng::{derive_seed, SplitMix64};
use qhb_core::sim::{gates, ControlledGate};
use qhb_core::sweep::{
    aggregate, config_key, expand_grid, ExperimentRecord, Field, RecordFilter, RecordStatus,
    RecordStore, SweepGrid,
};
use qhb_core::{CircuitSpec, HqnnConfig, Pauli, ShotMode, ShotSetting, StateVector, TemplateKind, TrainReport};

type Outcome = Result<String, String>;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist() -> DataSource {
    DataSource::Mnist {
        dir: root().join("data/mnist-fixture"),
        train_samples: 100,
        test_samples: 100,
        stratified: false,
    }
}

fn smoke_config(seed: u64) -> HqnnConfig {
    HqnnConfig {
        template: TemplateKind::BasicEntangling,
        n_layers: 4,
        n_qubits: 4,
        observable: Pauli::X,
        shots: ShotSetting::Analytic,
        epochs: 5,
        batch_size: 5,
        learning_rate: 0.01,
        seed,
        ..HqnnConfig::default()
    }
}

/// Smoke runs over seeds 0..5; seed 0 is the reference run.
struct Smoke {
    reports: Vec<TrainReport>,
    n_train: usize,
    n_test: usize,
    param_count: usize,
}

fn smoke_runs() -> Result<Smoke, String> {
    let (train_set, test_set) = mnist().load(4).map_err(|e| e.to_string())?;
    let reports = (0..5)
        .map(|seed| train(&smoke_config(seed), &train_set, &test_set).map(|(_, r)| r))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    Ok(Smoke {
        reports,
        n_train: train_set.len(),
        n_test: test_set.len(),
        param_count: smoke_config(0).param_count(),
    })
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let templates = [
        TemplateKind::BasicEntangling,
        TemplateKind::StronglyEntangling,
        TemplateKind::random(1234),
    ];
    let mut rng = SplitMix64::new(2718);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for i in 0..60 {
        let template = templates[i % 3];
        let layers = 2 + (i / 3) % 2;
        let obs = Pauli::ALL[(i / 6) % 3];
        let spec = CircuitSpec::build(template, 4, layers).map_err(|e| e.to_string())?;
        let params: Vec<f64> = (0..spec.param_count).map(|_| rng.uniform(0.0, TAU)).collect();
        let features: Vec<f64> = (0..4).map(|_| rng.uniform(0.0, PI)).collect();
        let expect = |p: &[f64]| quantum_forward(&spec, p, &features, obs, ShotMode::Analytic).unwrap().expectations;
        // Full Jacobian by central differences, compared row by row.
        let mut jac = vec![vec![0.0; spec.param_count]; 4];
        let mut work = params.clone();
        for k in 0..spec.param_count {
            work[k] = params[k] + h;
            let plus = expect(&work);
            work[k] = params[k] - h;
            let minus = expect(&work);
            work[k] = params[k];
            for q in 0..4 {
                jac[q][k] = (plus[q] - minus[q]) / (2.0 * h);
            }
        }
        for (q, row) in jac.iter().enumerate() {
            let mut cot = [0.0; 4];
            cot[q] = 1.0;
            let g = parameter_shift_grad(&spec, &params, &features, obs, ShotMode::Analytic, &cot)
                .map_err(|e| e.to_string())?;
            for (a, b) in g.d_loss_d_params.iter().zip(row) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("max abs error {worst:.2e} over 60 configs, {secs:.2} s");
    if worst < 1e-5 && secs < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn simulator_invariants() -> Outcome {
    let mut rng = SplitMix64::new(99);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 1 + rng.below(8) as usize;
        let mut s = StateVector::zero(n).map_err(|e| e.to_string())?;
        for _ in 0..30 {
            let q = rng.below(n as u64) as usize;
            if n > 1 && rng.below(4) == 0 {
                let t = (q + 1 + rng.below(n as u64 - 1) as usize) % n;
                let g = [ControlledGate::Cnot, ControlledGate::Cz][rng.below(2) as usize];
                s.apply_controlled(g, q, t).map_err(|e| e.to_string())?;
            } else {
                let a = rng.uniform(0.0, TAU);
                let u = match rng.below(6) {
                    0 => gates::rx(a),
                    1 => gates::ry(a),
                    2 => gates::rz(a),
                    3 => gates::hadamard(),
                    4 => gates::s_dag(),
                    _ => gates::rot(a, rng.uniform(0.0, TAU), rng.uniform(0.0, TAU)),
                };
                s.apply_single(&u, q).map_err(|e| e.to_string())?;
            }
        }
        worst = worst.max((s.norm() - 1.0).abs());
    }

    let close = |a: Complex64, b: Complex64| (a - b).norm() < 1e-12;
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    let mut ok = Vec::new();
    let mut s = StateVector::zero(1).unwrap();
    s.apply_single(&gates::ry(0.7), 0).unwrap();
    let before = s.clone();
    s.apply_single(&gates::hadamard(), 0).unwrap();
    s.apply_single(&gates::hadamard(), 0).unwrap();
    ok.push(("H^2=I", (0..2).all(|i| close(s.amplitude(i), before.amplitude(i)))));
    let mut s = StateVector::from_amplitudes(vec![zero, zero, zero, one]).unwrap();
    s.apply_controlled(ControlledGate::Cz, 0, 1).unwrap();
    ok.push(("CZ|11>=-|11>", close(s.amplitude(3), -one)));
    let mut s = StateVector::zero(1).unwrap();
    s.apply_single(&gates::ry(PI), 0).unwrap();
    ok.push(("RY(pi)|0>=|1>", close(s.amplitude(0), zero) && close(s.amplitude(1), one)));

    let failed: Vec<_> = ok.iter().filter(|(_, v)| !v).map(|(n, _)| *n).collect();
    let detail = format!("max norm drift {worst:.1e} over 1000 sequences; identities failed: {failed:?}");
    if worst < 1e-10 && failed.is_empty() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn shot_statistics() -> Outcome {
    let mut plus = StateVector::zero(1).unwrap();
    plus.apply_single(&gates::hadamard(), 0).unwrap();
    let shots = 100u32;
    let mut sum = 0.0;
    let mut quantized = true;
    for r in 0..200u64 {
        let mode = ShotMode::Sampled {
            shots,
            stream: derive_seed(0xacce, &[r]),
        };
        let e = plus.expectation_all(Pauli::Z, mode).map_err(|e| e.to_string())?[0];
        let steps = e / (2.0 / f64::from(shots));
        quantized &= (steps - steps.round()).abs() < 1e-9;
        sum += e;
    }
    let mean = sum / 200.0;
    let bound = 4.0 / (200.0f64 * 100.0).sqrt();
    let detail = format!("mean {mean:+.4} (bound {bound:.4}), quantized to 2/shots: {quantized}");
    if mean.abs() <= bound && quantized {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_circuit_determinism() -> Outcome {
    let mut rng = SplitMix64::new(31337);
    for _ in 0..100 {
        let seed = rng.next_u64();
        let n = 1 + rng.below(16) as usize;
        let layers = 1 + rng.below(6) as usize;
        let a = CircuitSpec::build(TemplateKind::random(seed), n, layers).map_err(|e| e.to_string())?;
        let b = CircuitSpec::build(TemplateKind::random(seed), n, layers).map_err(|e| e.to_string())?;
        if a.dump_json().unwrap() != b.dump_json().unwrap() {
            return Err(format!("seed {seed}: gate lists differ"));
        }
        let shape = |l: &Vec<qhb_core::GateInstance>| l.iter().map(|g| (g.kind, g.wires.clone())).collect::<Vec<_>>();
        if a.layer_gates.iter().any(|l| shape(l) != shape(&a.layer_gates[0])) {
            return Err(format!("seed {seed}: layer structure not repeated"));
        }
        let slots: HashSet<_> = a.gates().flat_map(|g| g.param_slots().collect::<Vec<_>>()).collect();
        if slots.len() != layers * n {
            return Err(format!("seed {seed}: {} distinct slots, expected {}", slots.len(), layers * n));
        }
    }
    Ok("100 triples byte-identical, structure repeated across layers".into())
}

fn step_count_identity(smoke: &Smoke) -> Outcome {
    let r = &smoke.reports[0];
    let steps = 5 * smoke.n_train.div_ceil(5) as u64;
    let per_sample = 1 + 2 * smoke.param_count as u64;
    let executions = 5 * smoke.n_train as u64 * per_sample + 5 * smoke.n_train as u64 + smoke.n_test as u64;
    let detail = format!(
        "steps {} (expected {steps}), executions {} (expected {executions})",
        r.optimizer_steps, r.circuit_executions
    );
    if r.optimizer_steps == 100 && steps == 100 && r.circuit_executions == executions {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn smoke_training(smoke: &Smoke) -> Outcome {
    let pilot = root().join("results/smoke-pilot.csv");
    let acc = smoke.reports[0].final_train_accuracy();
    let curve = &smoke.reports[0].per_epoch_train_accuracy;
    let detail = format!(
        "final train accuracy {acc:.2} (threshold 0.60), curve {curve:?}, pilot committed: {}",
        pilot.exists()
    );
    if acc >= 0.60 && pilot.exists() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn timing_trend() -> Outcome {
    let mut times = Vec::new();
    for n in [4, 9, 16] {
        let (train_set, test_set) = mnist().load(n).map_err(|e| e.to_string())?;
        let config = HqnnConfig {
            n_qubits: n,
            observable: Pauli::Z,
            shots: ShotSetting::Shots(100),
            ..smoke_config(0)
        };
        let (_, r) = train(&config, &train_set, &test_set).map_err(|e| e.to_string())?;
        times.push(r.wall_clock_training_seconds);
    }
    let detail = format!("BE L4 Z 100 shots: 4q {:.2} s, 9q {:.2} s, 16q {:.2} s", times[0], times[1], times[2]);
    if times[0] < times[1] && times[1] < times[2] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn load_grid_store() -> Result<Vec<ExperimentRecord>, String> {
    let path = root().join("results/paper-grid.jsonl");
    if !path.exists() {
        return Err(format!("{} missing", path.display()));
    }
    RecordStore::new(path).load().map_err(|e| e.to_string())
}

fn grid_feasibility(records: &[ExperimentRecord]) -> Outcome {
    let configs = expand_grid(&SweepGrid::paper_grid()).map_err(|e| e.to_string())?;
    let wanted: HashSet<String> = configs.iter().map(config_key).collect();
    let mut completed = HashSet::new();
    let mut failed = 0;
    for r in records {
        match r.status {
            RecordStatus::Completed if r.report.is_some() => {
                completed.insert(r.key.clone());
            }
            _ => failed += 1,
        }
    }
    let covered = wanted.intersection(&completed).count();
    let family_best = records
        .iter()
        .filter(|r| {
            let c = &r.config;
            matches!(c.template, TemplateKind::Random { .. })
                && c.n_qubits == 16
                && c.observable == Pauli::X
                && c.shots == ShotSetting::Shots(1024)
                && (3..=6).contains(&c.n_layers)
        })
        .filter_map(|r| r.report.as_ref().map(|rep| rep.final_train_accuracy()))
        .fold(None::<f64>, |m, a| Some(m.map_or(a, |m| m.max(a))));
    let soft = match family_best {
        Some(a) if a >= 0.80 => format!("soft check met ({a:.2} >= 0.80)"),
        Some(a) => format!("soft check not met (best {a:.2} < 0.80)"),
        None => "soft check: no records in family".into(),
    };
    let detail = format!("{covered}/270 configs completed, {failed} failed records; {soft}");
    if covered == 270 && failed == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn aggregation_oracle(records: &[ExperimentRecord]) -> Outcome {
    // Latest record per key, then only completed ones, in store order.
    let mut last: HashMap<&str, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        last.insert(&r.key, i);
    }
    let members: Vec<&ExperimentRecord> = records
        .iter()
        .enumerate()
        .filter(|(i, r)| last[r.key.as_str()] == *i && r.status == RecordStatus::Completed)
        .map(|(_, r)| r)
        .collect();
    if members.is_empty() {
        return Err("store holds no completed records".into());
    }
    let groupings: [&[Field]; 4] = [
        &[Field::Template, Field::Qubits],
        &[Field::Template, Field::Observable],
        &[Field::Template, Field::Shots],
        &[],
    ];
    let mut points = 0;
    for keys in groupings {
        let mut expected: BTreeMap<(Vec<String>, usize), (f64, f64, f64, usize, HashSet<&str>)> = BTreeMap::new();
        for r in &members {
            let rep = r.report.as_ref().unwrap();
            let k: Vec<String> = keys.iter().map(|f| f.value(&r.config)).collect();
            let e = expected.entry((k, r.config.n_layers)).or_default();
            e.0 += *rep.per_epoch_train_accuracy.last().unwrap();
            e.1 += rep.test_accuracy;
            e.2 += rep.wall_clock_training_seconds;
            e.3 += 1;
            e.4.insert(&r.host_label);
        }
        let series = aggregate(records, keys, &RecordFilter::default());
        let got: usize = series.iter().map(|s| s.points.len()).sum();
        if got != expected.len() {
            return Err(format!("{keys:?}: {got} points, expected {}", expected.len()));
        }
        for s in &series {
            let k: Vec<String> = keys.iter().map(|f| s.group[f].clone()).collect();
            for p in &s.points {
                let (tr, te, ti, n, hosts) = &expected[&(k.clone(), p.layers)];
                let nf = *n as f64;
                let time = (hosts.len() == 1).then_some(ti / nf);
                if p.mean_train_accuracy != tr / nf
                    || p.mean_test_accuracy != te / nf
                    || p.mean_time_s != time
                    || p.count != *n
                {
                    return Err(format!("{keys:?} {k:?} L{}: aggregate differs from recomputation", p.layers));
                }
                points += 1;
            }
        }
    }
    Ok(format!("{points} points over 4 groupings equal the brute-force means exactly"))
}

fn epoch_convergence(smoke: &Smoke) -> Outcome {
    let epochs = smoke.reports[0].per_epoch_train_accuracy.len();
    let mean: Vec<f64> = (0..epochs)
        .map(|e| smoke.reports.iter().map(|r| r.per_epoch_train_accuracy[e]).sum::<f64>() / smoke.reports.len() as f64)
        .collect();
    let early = (mean[1] - mean[0]).abs();
    let late = (mean[4] - mean[3]).abs();
    let detail = format!(
        "mean curve {:?}; epoch5 >= epoch1: {}, |d45| {late:.3} <= |d12| {early:.3}: {}",
        mean.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        mean[4] >= mean[0],
        late <= early
    );
    if mean[4] >= mean[0] && late <= early {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(index: usize, name: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(detail) => println!("PASS [{index}] {name}: {detail}"),
        Err(detail) => {
            *failures += 1;
            println!("FAIL [{index}] {name}: {detail}");
        }
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failures = 0;
    report(1, "gradient correctness", gradient_correctness(), &mut failures);
    report(2, "simulator invariants", simulator_invariants(), &mut failures);
    report(3, "shot-estimator statistics", shot_statistics(), &mut failures);
    report(4, "seeded random-circuit determinism", random_circuit_determinism(), &mut failures);
    let smoke = smoke_runs();
    let store = load_grid_store();
    let with_smoke = |f: fn(&Smoke) -> Outcome| match &smoke {
        Ok(s) => f(s),
        Err(e) => Err(format!("smoke runs failed: {e}")),
    };
    let with_store = |f: fn(&[ExperimentRecord]) -> Outcome| match &store {
        Ok(r) => f(r),
        Err(e) => Err(e.clone()),
    };
    report(5, "step-count identity", with_smoke(step_count_identity), &mut failures);
    report(6, "smoke training", with_smoke(smoke_training), &mut failures);
    report(7, "timing trend", timing_trend(), &mut failures);
    report(8, "paper-grid feasibility", with_store(grid_feasibility), &mut failures);
    report(9, "aggregation oracle", with_store(aggregation_oracle), &mut failures);
    report(10, "epoch convergence", with_smoke(epoch_convergence), &mut failures);
    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
