//! Trains the toy network on the moving-bar task, then fine-tunes the
//! power-of-two and uniform 4-bit arms from the baseline.

use std::time::Instant;

use powshift::train::{metrics_csv, train, Mode, TrainConfig, DEFAULT_SEED};

fn main() -> anyhow::Result<()> {
    let started = Instant::now();
    let base = train(&TrainConfig::new(Mode::Baseline, DEFAULT_SEED), None)?;
    print!("{}", metrics_csv(&base.metrics));
    for mode in [Mode::Log4w, Mode::Int4w] {
        let run = train(&TrainConfig::new(mode, DEFAULT_SEED), Some(&base.float))?;
        print!("{}", metrics_csv(&run.metrics));
    }
    eprintln!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
