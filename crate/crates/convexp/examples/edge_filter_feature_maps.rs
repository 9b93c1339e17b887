//! Feature maps of the convolution exponential with the edge filter
//! m = [0.6, 0, -0.6]: the forward series z = m ⋆e x term by term, then the
//! reverse series x = (-m) ⋆e z recovering the input. Each partial sum is
//! written as a PGM heatmap.
//!
//!     cargo run --release --example edge_filter_feature_maps

use convexp::commands::write_pgm;
use convexp::convops::Padding;
use convexp::dense::DenseMatrix;
use convexp::expseries::{expv, inverse_expv, ExpConfig};
use convexp::linop::{ConvKernel, ConvOp, LinearOperator};
use convexp::rng::Rng;
use convexp::tensor::Tensor;

fn save_map(x: &Tensor, dir: &std::path::Path, name: &str) {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let m = DenseMatrix::from_vec(h, w, x.data().to_vec());
    write_pgm(&m, &dir.join(name)).expect("pgm write failed");
}

fn main() {
    let dir = std::env::temp_dir().join("convexp_edge_filter");
    std::fs::create_dir_all(&dir).unwrap();
    let size = 32usize;

    // a smooth synthetic image with a couple of blobs
    let mut rng = Rng::seeded(7);
    let mut x = Tensor::zeros(&[1, size, size]);
    for i in 0..size {
        for j in 0..size {
            let (fi, fj) = (i as f64 / size as f64, j as f64 / size as f64);
            let blob1 = (-((fi - 0.35).powi(2) + (fj - 0.4).powi(2)) / 0.02).exp();
            let blob2 = (-((fi - 0.7).powi(2) + (fj - 0.65).powi(2)) / 0.05).exp();
            x.data_mut()[i * size + j] = blob1 + 0.7 * blob2 + 0.02 * rng.normal();
        }
    }

    let weights = Tensor::from_vec(&[1, 1, 1, 3], vec![0.6, 0.0, -0.6]);
    let kernel = ConvKernel::new(weights, Padding::Zero).unwrap();
    let op = ConvOp::new(kernel, &[1, size, size]).unwrap();

    // forward partial sums: x, x + m⋆x, x + m⋆x + m⋆²x/2!, ...
    save_map(&x, &dir, "forward_term_0.pgm");
    let mut z = x.clone();
    let mut pi = x.clone();
    for i in 1..=6 {
        pi = op.apply(&pi).unwrap().scale(1.0 / i as f64);
        z = z.add(&pi);
        save_map(&z, &dir, &format!("forward_term_{i}.pgm"));
    }
    let z_full = expv(&op, &x, &ExpConfig::fixed(20)).unwrap().value;
    save_map(&z_full, &dir, "forward_full.pgm");

    // reverse: the negated series takes z back to x
    let back = inverse_expv(&op, &z_full, &ExpConfig::fixed(20)).unwrap().value;
    save_map(&back, &dir, "reverse_full.pgm");

    println!("feature maps written to {}", dir.display());
    println!(
        "max |reverse(forward(x)) - x| = {:.3e}",
        back.max_abs_diff(&x)
    );
}
