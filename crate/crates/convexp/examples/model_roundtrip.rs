//! Model container round trip: build a convolutional Sylvester stack,
//! save it, load it back, and drive the invertibility checker over the
//! file.
//!
//!     cargo run --release --example model_roundtrip

use convexp::commands::{cmd_invertcheck, cmd_train, DatasetId, InvertCheckConfig, ModelPreset, TrainConfig};

fn main() {
    let dir = std::env::temp_dir().join("convexp_model_roundtrip");
    // a brief training run produces a non-trivial model file
    let mut cfg = TrainConfig::new(DatasetId::Moons2d, ModelPreset::ConvSylvester2d, dir);
    cfg.iters = 500;
    cfg.val_every = 250;
    cfg.val_samples = 1024;
    cfg.final_samples = 2048;
    cfg.learning_rate = 1e-3;
    let report = cmd_train(&cfg).expect("training failed");
    println!(
        "trained convsylvester2d to {:.4} nats; model at {}",
        report.final_per_node_nll,
        report.model_path.display()
    );

    let check = cmd_invertcheck(&InvertCheckConfig {
        model_path: report.model_path,
        samples: 256,
        tolerance: 1e-3,
        seed: 1,
        out_dir: None,
    })
    .expect("invertcheck failed");
    println!(
        "round trip: data {:.3e}, latent {:.3e}, fixed-point iterations ≤ {}",
        check.max_data_error, check.max_latent_error, check.max_fixed_point_iters
    );
    assert!(check.pass, "inversion out of tolerance");
    println!("model file round-trips within tolerance");
}
