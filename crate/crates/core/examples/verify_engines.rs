//! Quantizes an untrained toy network to power-of-two weights with int8
//! activations and compares the float, multiply and shift engines layer by
//! layer.

use powshift::model::{
    quantize_model, run_tensor, verify_layerwise, Engine, QuantizeOptions, RunOptions, Scheme,
};
use powshift::train::{Mode, ToyNet, TrainConfig};

fn main() -> anyhow::Result<()> {
    let cfg = TrainConfig::new(Mode::Log4wInt8a, 1);
    let data = cfg.test_set()?;
    let float = ToyNet::init(1).to_float_model(cfg.tau_us);
    let q = quantize_model(
        &float,
        &data.head(32),
        Scheme::Log4wInt8a,
        QuantizeOptions::default(),
    )?;

    let report = verify_layerwise(&q, &data.head(16))?;
    println!("layer,kind,engines_agree,max_lsb");
    for l in &report.layers {
        println!("{},{},{},{}", l.index, l.kind, l.engines_agree, l.max_lsb);
    }
    println!(
        "worst deviation from the float reference: {} LSB",
        report.worst_lsb()
    );

    let x = data.head(4);
    let opts = RunOptions { keep_taps: false };
    for engine in [Engine::Float, Engine::Mac, Engine::Bac] {
        println!(
            "{:>5}: predictions {:?}",
            engine.name(),
            run_tensor(&q, &x, engine, opts)?.predictions()
        );
    }
    Ok(())
}
