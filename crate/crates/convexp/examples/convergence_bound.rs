//! Per-term norm bound ‖M‖ⁱ/i! next to measured series terms for operators
//! normalized to several spectral norms; the factorial wins quickly even
//! when the norm exceeds one.
//!
//!     cargo run --release --example convergence_bound

use convexp::commands::{cmd_fig4, Fig4Config};

fn main() {
    let cfg = Fig4Config {
        norms: vec![0.5, 0.9, 2.0, 3.0],
        max_terms: 25,
        seed: 0,
        out_dir: std::env::temp_dir().join("convexp_convergence"),
    };
    let path = cmd_fig4(&cfg).expect("fig4 failed");
    println!("table written to {}", path.display());

    // quick look at the 0.9 curve
    let text = std::fs::read_to_string(&path).unwrap();
    println!("{:>4} {:>12} {:>12}", "i", "bound", "measured");
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols[0] == "0.9" && cols[1].parse::<usize>().unwrap() <= 10 {
            let b: f64 = cols[2].parse().unwrap();
            let m: f64 = cols[3].parse().unwrap();
            println!("{:>4} {:>12.3e} {:>12.3e}", cols[1], b, m);
        }
    }
}
