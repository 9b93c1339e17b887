//! The convolution exponential as an invertible linear map: apply it
//! implicitly, invert it with the negated kernel, and read the log
//! Jacobian determinant off the kernel's center taps — all without ever
//! forming the equivalent matrix.
//!
//!     cargo run --release --example conv_exponential

use convexp::convops::Padding;
use convexp::dense::{build_equivalent_matrix, dense_expm, logdet_via_lu, DIMENSION_CAP};
use convexp::expseries::{expv, inverse_expv, logdet_exp, ExpConfig};
use convexp::linop::{estimate_sigma, ConvKernel, ConvOp, PowerIterState};
use convexp::rng::Rng;
use convexp::tensor::Tensor;

fn main() {
    let mut rng = Rng::seeded(42);
    let shape = [2usize, 8, 8];

    // random 3x3 kernel, spectrally normalized to 0.9 so six series terms
    // are already accurate to ~1e-3 and twenty to ~1e-12
    let raw = Tensor::randn(&mut rng, &[2, 2, 3, 3], 1.0);
    let op = ConvOp::new(ConvKernel::new(raw.clone(), Padding::Zero).unwrap(), &shape).unwrap();
    let mut state = PowerIterState::init(&shape);
    let sigma = estimate_sigma(&op, &mut state, 300).unwrap();
    println!("raw kernel spectral norm ≈ {sigma:.4}");
    let kernel = ConvKernel::new(raw.scale(0.9 / sigma), Padding::Zero).unwrap();
    let op = ConvOp::new(kernel, &shape).unwrap();

    let x = Tensor::randn(&mut rng, &shape, 1.0);
    let z6 = expv(&op, &x, &ExpConfig::fixed(6)).unwrap().value;
    let z20 = expv(&op, &x, &ExpConfig::fixed(20)).unwrap().value;
    println!(
        "six-term vs twenty-term output difference: {:.3e}",
        z6.max_abs_diff(&z20)
    );

    let back = inverse_expv(&op, &z20, &ExpConfig::fixed(20)).unwrap().value;
    println!("inverse round trip error: {:.3e}", back.max_abs_diff(&x));

    // log-det: closed form (h·w · center taps) against the dense oracle
    let analytic = logdet_exp(&op).unwrap();
    let m = build_equivalent_matrix(&op, DIMENSION_CAP).unwrap();
    let (dense, _) = logdet_via_lu(&dense_expm(&m)).unwrap();
    println!("log-det: closed form {analytic:.10}, dense oracle {dense:.10}");

    // adaptive truncation reports how many terms the tolerance needed
    let adaptive = expv(&op, &x, &ExpConfig::adaptive(1e-8, 30)).unwrap();
    println!(
        "adaptive mode met 1e-8 after {} terms (converged: {})",
        adaptive.terms_used, adaptive.tail_converged
    );
}
