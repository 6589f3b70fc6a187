//! Parameter counts and packed weight sizes of the toy network under each
//! quantization scheme, then a save/load round trip of the smallest one.

use powshift::model::{
    load_pwrq, model_stats, quantize_model, save_pwrf, save_pwrq, QuantizeOptions, Scheme,
};
use powshift::train::{Mode, ToyNet, TrainConfig};

fn main() -> anyhow::Result<()> {
    let cfg = TrainConfig::new(Mode::Baseline, 2);
    let calib = cfg.train_set()?.head(16);
    let float = ToyNet::init(2).to_float_model(cfg.tau_us);
    println!(
        "float model: {} parameters, PWRF {} bytes",
        float.param_count(),
        save_pwrf(&float).len()
    );

    for scheme in Scheme::ALL {
        let q = quantize_model(&float, &calib, scheme, QuantizeOptions::default())?;
        let stats = model_stats(&q);
        println!(
            "{scheme:>12}: PWRQ {:>6} bytes, pot weights {:>5}, compression {:.3}x",
            save_pwrq(&q)?.len(),
            stats.pot_weights,
            stats.pot_compression()
        );
    }

    let q = quantize_model(
        &float,
        &calib,
        Scheme::Log4wInt8a,
        QuantizeOptions::default(),
    )?;
    let bytes = save_pwrq(&q)?;
    assert_eq!(load_pwrq(&bytes)?, q);
    println!("\n{}", model_stats(&q));
    Ok(())
}
