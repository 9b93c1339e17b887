//! A convolutional Sylvester layer end to end: forward with its exact
//! log-determinant, the dense-Jacobian cross-check, and the fixed-point
//! inverse with its iteration count.
//!
//!     cargo run --release --example sylvester_flow

use convexp::dense::{logdet_via_lu, DenseMatrix};
use convexp::rng::Rng;
use convexp::sylvester::{ArFunction, FixedPointConfig, SylvesterLayer};
use convexp::tensor::Tensor;

fn main() {
    let mut rng = Rng::seeded(4);
    let shape = [2usize, 6, 6];
    let mut layer = SylvesterLayer::init_conv(&shape, 16, 2, 2, &mut rng);
    // randomize away from the identity initialization so there is
    // something to invert
    if let Some(k) = &mut layer.kernel {
        k.weights = Tensor::randn(&mut rng, k.weights.shape(), 0.3);
    }
    if let ArFunction::MaskedNet(net) = &mut layer.ar {
        for conv in net.trunk.iter_mut().chain(net.heads.iter_mut()) {
            conv.weights = Tensor::randn(&mut rng, conv.weights.shape(), 0.4);
            conv.bias = Tensor::randn(&mut rng, conv.bias.shape(), 0.2);
        }
    }
    layer.exp_terms = 20;
    layer.refresh_certificates(300);

    let x = Tensor::randn(&mut rng, &[1, 2, 6, 6], 1.0);
    let (z, logdet) = layer.forward(&x).unwrap();
    println!("analytic log-det: {:.8}", logdet[0]);

    let (back, report) = layer.inverse(&z, &FixedPointConfig::default()).unwrap();
    println!(
        "fixed-point inverse: {} iterations, converged = {}, residual {:.2e}",
        report.iters_used, report.converged, report.residual
    );
    println!("round-trip error: {:.3e}", back.max_abs_diff(&x));

    // dense numerical Jacobian at a smaller shape for the determinant
    let small_shape = [1usize, 3, 3];
    let small = {
        let mut l = SylvesterLayer::init_conv(&small_shape, 8, 2, 0, &mut rng);
        if let Some(k) = &mut l.kernel {
            k.weights = Tensor::randn(&mut rng, k.weights.shape(), 0.3);
        }
        if let ArFunction::MaskedNet(net) = &mut l.ar {
            for conv in net.trunk.iter_mut().chain(net.heads.iter_mut()) {
                conv.weights = Tensor::randn(&mut rng, conv.weights.shape(), 0.4);
            }
        }
        l.exp_terms = 20;
        l.refresh_certificates(300);
        l
    };
    let xs = Tensor::randn(&mut rng, &[1, 1, 3, 3], 1.0);
    let (_, ld) = small.forward(&xs).unwrap();
    let eps = 1e-5;
    let mut jac = DenseMatrix::zeros(9, 9);
    for j in 0..9 {
        let mut up = xs.clone();
        up.data_mut()[j] += eps;
        let mut dn = xs.clone();
        dn.data_mut()[j] -= eps;
        let (zu, _) = small.forward(&up).unwrap();
        let (zd, _) = small.forward(&dn).unwrap();
        for i in 0..9 {
            jac.set(i, j, (zu.data()[i] - zd.data()[i]) / (2.0 * eps));
        }
    }
    let (numeric, _) = logdet_via_lu(&jac).unwrap();
    println!(
        "determinant identity at 1x3x3: analytic {:.8}, dense Jacobian {:.8}",
        ld[0], numeric
    );
}
