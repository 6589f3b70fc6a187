//! Times the multiply-accumulate and shift-accumulate kernels on a few layer
//! shapes and prints a markdown table. Ratios are reported, not judged.

use powshift::bench::{
    emit_report, run_bench_with, BacKernel, BenchCase, BenchOptions, MacKernel, ReportFormat,
};

fn main() -> anyhow::Result<()> {
    let threads = std::env::args()
        .nth(1)
        .map(|t| t.parse())
        .transpose()?
        .unwrap_or(1);
    let cases = [
        BenchCase::new("c16_32x32_k3", 16, 16, 32, 3),
        BenchCase::new("c32_28x28_k3", 32, 32, 28, 3),
        BenchCase::new("c64_14x14_k1", 64, 64, 14, 1),
    ];
    let report = run_bench_with(
        &cases,
        &MacKernel,
        &BacKernel,
        BenchOptions { threads, seed: 0 },
    )?;
    print!("{}", emit_report(&report, ReportFormat::Markdown)?);
    Ok(())
}
