//! Depthwise convolution with and without learned sampling offsets.
//!
//! Run with `cargo run --example deformable_conv`.

use dtcn::deformconv::{dconv, ddconv, ddconv_backward, linear_interp, DepthwiseKernel, OffsetField, Padding};
use dtcn::numcore::Tensor;

fn main() -> dtcn::Result<()> {
    let y = Tensor::from_vec(&[1, 8], vec![0.0, 1.0, 4.0, 9.0, 16.0, 25.0, 36.0, 49.0])?;
    println!("interpolated y(2.5) = {}", linear_interp(&y, 2.5, 0)?);

    // Three taps with dilation 2 read samples l, l+2 and l+4 of the padded input.
    let k = DepthwiseKernel::new(Tensor::from_vec(&[1, 3], vec![0.25, 0.5, 0.25])?, 2)?;
    let plain = dconv(&y, &k, Padding::Same)?;
    let zero = ddconv(&y, &k, &OffsetField::zeros(8, 3), Padding::Same)?;
    println!("dconv            {:?}", plain.row(0));
    println!("ddconv, tau = 0  {:?}", zero.row(0));

    // Pull the first tap half a sample to the right and push the last one back.
    let mut tau = OffsetField::zeros(8, 3);
    for l in 0..8 {
        tau.tau.row_mut(l)[0] = 0.5;
        tau.tau.row_mut(l)[2] = -0.5;
    }
    let shifted = ddconv(&y, &k, &tau, Padding::Same)?;
    println!("ddconv, shifted  {:?}", shifted.row(0));

    let g = ddconv_backward(&y, &k, &tau, Padding::Same, &Tensor::full(&[1, 8], 1.0))?;
    println!("d(sum)/d tau at frame 3: {:?}", g.tau.row(3));
    Ok(())
}
