//! Power-of-two weight quantization: codes, packed bytes and the error
//! against 4-bit uniform quantization on Gaussian weights.

use powshift::quantize::{dequantize_pot, fake_quant_uniform, pot_scale, quantize_pot};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let normal = Normal::new(0.0, 0.1)?;
    let shape = [32, 16, 3, 3];
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();

    let pot = quantize_pot(&w, shape, pot_scale(&w))?;
    let back = dequantize_pot(&pot);
    println!("layer scale {:.5}", pot.scale());
    for (i, v) in w.iter().take(6).enumerate() {
        let c = pot.code(i);
        println!(
            "w={v:+.5} -> code {:04b} (sign {}, exp {}) -> {:+.5}",
            c.bits(),
            c.is_negative() as u8,
            c.exp(),
            back[i]
        );
    }
    println!(
        "{n} weights packed into {} bytes ({}x smaller than f32)",
        pot.packed().len(),
        4 * n / pot.packed().len()
    );
    println!(
        "rms error: pot {:.5}, uniform int4 {:.5}",
        rms(&w, &back),
        rms(&w, &fake_quant_uniform(&w, 4))
    );
    Ok(())
}
