//! Runs one convolution with multiply-accumulate and shift-accumulate and
//! checks that the integer accumulators are identical.

use powshift::kernels::{conv2d_int_bac, conv2d_int_mac, Int8Tensor};
use powshift::quantize::{AffineParams, PotCode, PotTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [8, 4, 3, 3];
    let codes: Vec<PotCode> = (0..shape.iter().product::<usize>())
        .map(|_| PotCode::from_bits(rng.gen_range(0..16)))
        .collect();
    let weights = PotTensor::from_codes(shape, &codes, 0.5)?;
    let q = AffineParams::new(0.05, -3)?;
    let x = Int8Tensor::new([1, 4, 12, 12], (0..4 * 144).map(|_| rng.gen()).collect(), q)?;

    println!("code -> integer weight -> shift");
    for c in codes.iter().take(4) {
        println!(
            "  {:04b} -> {:+4} -> << {}",
            c.bits(),
            c.int_weight(),
            c.shift()
        );
    }
    let mac = conv2d_int_mac(&x, &weights.int_weights(), shape, q.zero_point, 1, 1)?;
    let bac = conv2d_int_bac(&x, &weights, q.zero_point, 1, 1)?;
    println!("{} accumulators, identical: {}", mac.data.len(), mac == bac);
    println!("first row: {:?}", &bac.data[..6]);
    Ok(())
}
