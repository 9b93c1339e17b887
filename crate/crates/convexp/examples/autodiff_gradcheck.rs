//! Reverse-mode gradients through the full stack checked against central
//! finite differences: a conv-exponential, a Sylvester layer and a coupling
//! layer composed into one likelihood.
//!
//!     cargo run --release --example autodiff_gradcheck

use convexp::autodiff::gradcheck;
use convexp::flows::{
    ActNormLayer, ConvExpLayer, FlowModel, ImageCoupling, ImageMask, Layer, ModelKind,
};
use convexp::rng::Rng;
use convexp::sylvester::SylvesterLayer;
use convexp::tensor::Tensor;

fn main() {
    let mut rng = Rng::seeded(9);
    let kind = ModelKind::Image { c: 1, h: 4, w: 4 };
    let mut layers = vec![
        Layer::ActNorm(ActNormLayer::identity(1)),
        Layer::ConvExp(ConvExpLayer::init(&kind, &mut rng)),
        Layer::Sylvester(SylvesterLayer::init_conv(&[1, 4, 4], 8, 2, 0, &mut rng)),
        Layer::CouplingImage(ImageCoupling::init(
            &kind,
            ImageMask::Checkerboard,
            false,
            8,
            &mut rng,
        )),
    ];
    // randomize away from the identity initialization
    for layer in &mut layers {
        let mut ps = layer.params();
        for p in &mut ps {
            let noise = Tensor::randn(&mut rng, p.shape(), 0.2);
            *p = p.add(&noise);
        }
        layer.set_params(&ps);
        layer.refresh_certificates(300);
    }
    let model = FlowModel::new(kind, layers);
    let batch = Tensor::randn(&mut rng, &[2, 1, 4, 4], 1.0);
    let params = model.params();
    let count: usize = params.iter().map(|p| p.numel()).sum();
    println!(
        "checking d(NLL)/dθ for {count} parameters across {} tensors...",
        params.len()
    );
    let err = gradcheck(
        |tape, ids| model.nll_loss_tape(tape, &batch, ids),
        &params,
        1e-5,
    )
    .expect("gradcheck failed to run");
    println!("max relative error vs central differences: {err:.3e}");
    assert!(err < 1e-4);
}
