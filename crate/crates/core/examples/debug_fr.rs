//! Scratch: embedder hyperparameter probe.

use uvcloak_core::fr::{train_fr, ArchitectureId, FrTrainSpec, LossId};
use uvcloak_core::world::{sample_bank, WorldConfig};

fn main() {
    let config = WorldConfig {
        image_size: 32,
        texture_size: 64,
        ..WorldConfig::default()
    };
    let bank = sample_bank(1000, 1000, 10, 12, &config).unwrap();
    let flat: Vec<_> = bank.into_iter().flatten().collect();

    for (loss, lrs) in [
        (LossId::Softmax, vec![0.005, 0.01, 0.02]),
        (LossId::ArcMargin, vec![0.0005, 0.001, 0.002, 0.005]),
    ] {
        for lr in lrs {
            for arch in [ArchitectureId::Conv3, ArchitectureId::Conv4] {
                let spec = FrTrainSpec {
                    arch,
                    loss,
                    training_seed: 5,
                    epochs: 40,
                    learning_rate: lr,
                    accuracy_floor: 0.0,
                    ..FrTrainSpec::default()
                };
                let t = std::time::Instant::now();
                match train_fr(&flat, &spec) {
                    Ok(m) => println!(
                        "{:?} {:?} lr={lr}: verification {:.3} ({:?})",
                        loss,
                        arch,
                        m.accuracy,
                        t.elapsed()
                    ),
                    Err(e) => println!("{:?} {:?} lr={lr}: ERROR {e}", loss, arch),
                }
            }
        }
    }
}
