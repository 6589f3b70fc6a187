//! Folds a batch-norm layer into a convolution two ways: into the float
//! weights, and into a per-channel integer multiplier that leaves the
//! power-of-two codes untouched.

use powshift::fuse::{fuse_conv_bn_float, fuse_conv_bn_pot, BnParams};
use powshift::kernels::{conv2d_float, FloatTensor};
use powshift::quantize::{pot_scale, quantize_pot, AffineParams};

fn main() -> anyhow::Result<()> {
    let shape = [2, 1, 3, 3];
    let w: Vec<f64> = (0..18)
        .map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0)
        .collect();
    let b = vec![0.1, -0.2];
    let bn = BnParams {
        gamma: vec![1.5, -0.5],
        beta: vec![0.2, 0.0],
        mean: vec![0.05, -0.1],
        var: vec![0.8, 1.2],
        eps: 1e-5,
    };
    let x = FloatTensor::new(
        [1, 1, 4, 4],
        (0..16).map(|i| (i % 3) as f64 - 1.0).collect(),
    )?;

    let y = conv2d_float(&x, &w, shape, &b, 1, 0)?;
    let (wf, bf) = fuse_conv_bn_float(&w, &b, &bn)?;
    let fused = conv2d_float(&x, &wf, shape, &bf, 1, 0)?;
    let plane = y.data.len() / 2;
    for (i, (a, f)) in y.data.iter().zip(&fused.data).enumerate() {
        println!("conv+bn {:+.6}  fused {:+.6}", bn.apply(i / plane, *a), f);
    }

    let pot = quantize_pot(&w, shape, pot_scale(&w))?;
    let packed = pot.packed().to_vec();
    let layer = fuse_conv_bn_pot(
        pot,
        &b,
        &bn,
        AffineParams::new(2.0 / 255.0, 0)?,
        AffineParams::new(0.02, 0)?,
        1,
        0,
    )?;
    for (c, m) in layer.requant.iter().enumerate() {
        println!(
            "channel {c}: multiplier {} / 2^{} = {:.9}, bias_q {}",
            m.m,
            m.shift,
            m.to_f64(),
            layer.bias_q[c]
        );
    }
    let unchanged = matches!(&layer.weights, powshift::fuse::ConvWeights::Pot(t) if t.packed() == packed.as_slice());
    println!("power-of-two codes unchanged: {unchanged}");
    Ok(())
}
