//! Runs every invariant suite at desk scale: oracle equivalences,
//! log-det/trace identities, inverse round trips, Sylvester invertibility,
//! equivariance commutators.
//!
//!     cargo run --release --example verify_suites

use convexp::commands::{cmd_verify, VerifyConfig, VerifyScope};

fn main() {
    let report = cmd_verify(&VerifyConfig {
        scope: VerifyScope::All,
        seed: 0,
        out_dir: Some(std::env::temp_dir().join("convexp_verify")),
        inject_bug: None,
    })
    .expect("verify failed to run");
    for row in &report.rows {
        println!(
            "[{}] {}::{} worst {:.3e} (tolerance {:.1e})",
            if row.pass { "pass" } else { "FAIL" },
            row.module,
            row.property,
            row.worst,
            row.tolerance
        );
    }
    assert!(report.passed, "some properties failed");
    println!("all {} properties hold", report.rows.len());
}
