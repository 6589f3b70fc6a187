//! Generates a synthetic moving bar, slices it into 2 ms windows and prints
//! each frame as text. Pass a directory to also write the frames as PGM files.

use powshift::event_io::{gen_synthetic_bar, window_iter, write_pgm, SynthConfig};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1);
    let cfg = SynthConfig::default();
    let (stream, label) = gen_synthetic_bar(2, 17, &cfg)?;
    println!(
        "{} events over {} us, direction {label}",
        stream.len(),
        cfg.duration_us()
    );

    for (k, frame) in window_iter(&stream, 2_000).enumerate() {
        println!(
            "window {k}: [{}, {}) us, {} active pixels",
            frame.t_begin(),
            frame.t_end(),
            frame.nonzero_count()
        );
        for row in frame.values().chunks(frame.width() as usize) {
            let line: String = row
                .iter()
                .map(|v| match v {
                    1 => '+',
                    -1 => '-',
                    _ => '.',
                })
                .collect();
            println!("  {line}");
        }
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir)?;
            std::fs::write(format!("{dir}/frame_{k:06}.pgm"), write_pgm(&frame))?;
        }
    }
    Ok(())
}
