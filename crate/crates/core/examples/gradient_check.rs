//! Checks the analytic gradients of the deformable convolution against
//! central finite differences.
//!
//! Run with `cargo run --example gradient_check`.

use dtcn::deformconv::{ddconv, ddconv_backward, DepthwiseKernel, OffsetField, Padding};
use dtcn::numcore::{grad_check, FnOp, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dtcn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (channels, len, taps, dilation) = (3, 12, 3, 2);
    let op = FnOp {
        forward: |xs: &[Tensor]| {
            let k = DepthwiseKernel::new(xs[1].clone(), dilation)?;
            ddconv(&xs[0], &k, &OffsetField { tau: xs[2].clone() }, Padding::Same)
        },
        backward: |xs: &[Tensor], up: &Tensor| {
            let k = DepthwiseKernel::new(xs[1].clone(), dilation)?;
            let g = ddconv_backward(&xs[0], &k, &OffsetField { tau: xs[2].clone() }, Padding::Same, up)?;
            Ok(vec![g.y, g.kernel, g.tau])
        },
    };
    // Offsets are kept away from integers, where the interpolation has kinks.
    let mut tau = Tensor::uniform(&[len, taps], 0.3, &mut rng);
    tau.data_mut().iter_mut().for_each(|v| *v += 0.5);
    let inputs = [
        Tensor::randn(&[channels, len], &mut rng),
        Tensor::randn(&[channels, taps], &mut rng),
        tau,
    ];
    let report = grad_check(&op, &inputs, 1e-6, 1)?;
    println!(
        "{} entries checked, worst relative error {:.2e} at input {} entry {}",
        report.entries_checked, report.max_rel_error, report.worst.0, report.worst.1
    );
    Ok(())
}
