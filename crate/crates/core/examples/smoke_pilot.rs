//! Smoke-training pilot: 4 qubits, basic entangler, 4 layers, Pauli X,
//! analytic readout, default training settings, over several seeds.
//!
//! Usage: `cargo run --release -p qhb-core --example smoke_pilot [DATA_DIR] [SEEDS]`

use std::path::PathBuf;

use qhb_core::data::DataSource;
use qhb_core::model::train;
use qhb_core::{HqnnConfig, Pauli, ShotSetting, TemplateKind};

fn main() -> qhb_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/mnist-fixture"));
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let source = DataSource::Mnist {
        dir,
        train_samples: 100,
        test_samples: 100,
        stratified: false,
    };
    let (train_set, test_set) = source.load(4)?;
    println!("seed,epoch1,epoch2,epoch3,epoch4,epoch5,test");
    for seed in 0..seeds {
        let config = HqnnConfig {
            template: TemplateKind::BasicEntangling,
            n_layers: 4,
            n_qubits: 4,
            observable: Pauli::X,
            shots: ShotSetting::Analytic,
            seed,
            ..HqnnConfig::default()
        };
        let (_, report) = train(&config, &train_set, &test_set)?;
        let accs: Vec<String> = report.per_epoch_train_accuracy.iter().map(|a| format!("{a:.2}")).collect();
        println!("{seed},{},{:.2}", accs.join(","), report.test_accuracy);
    }
    Ok(())
}
