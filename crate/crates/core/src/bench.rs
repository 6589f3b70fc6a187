//! Wall-clock comparison of the multiply-accumulate and shift-accumulate
//! convolution kernels.
//!
//! Every case is cross-checked first: if the two kernels disagree on the
//! case's inputs, nothing is timed. Results are reported as median and
//! interquartile range over the repetitions; no speed threshold is applied.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::kernels::{
    conv2d_int_bac, conv2d_int_mac, AccTensor, ConvGeometry, Int8Tensor, KernelError, I32_ACC_TERMS,
};
use crate::quantize::{percentile_sorted, AffineParams, PotCode, PotTensor};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("case {case}: {reference} and {candidate} outputs differ")]
    CorrectnessMismatch {
        case: String,
        reference: String,
        candidate: String,
    },
    #[error("invalid case {case}: {reason}")]
    BadCase { case: String, reason: String },
    #[error("report is empty")]
    EmptyReport,
    #[error("malformed input: {0}")]
    Parse(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// One layer geometry to time.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct BenchCase {
    pub id: String,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub reps: usize,
    pub warmup: usize,
}

impl BenchCase {
    pub fn new(id: impl Into<String>, c_in: usize, c_out: usize, hw: usize, k: usize) -> Self {
        Self {
            id: id.into(),
            c_in,
            c_out,
            h: hw,
            w: hw,
            k,
            stride: 1,
            reps: 5,
            warmup: 1,
        }
    }

    fn geometry(&self) -> Result<ConvGeometry, BenchError> {
        let bad = |reason: String| BenchError::BadCase {
            case: self.id.clone(),
            reason,
        };
        if self.reps < 3 {
            return Err(bad(format!("{} repetitions, need at least 3", self.reps)));
        }
        let g = ConvGeometry::new(
            [1, self.c_in, self.h, self.w],
            [self.c_out, self.c_in, self.k, self.k],
            self.stride,
            self.k / 2,
        )
        .map_err(|e| bad(e.to_string()))?;
        if g.terms() > I32_ACC_TERMS {
            return Err(bad(format!(
                "{} terms exceed the accumulator bound",
                g.terms()
            )));
        }
        Ok(g)
    }
}

/// Inputs shared by both kernels of one case.
pub struct CaseInputs {
    pub x: Int8Tensor,
    pub weights: PotTensor,
    pub zero_point: i8,
    pub stride: usize,
    pub pad: usize,
}

/// A convolution kernel under test.
pub trait ConvKernel: Sync {
    fn name(&self) -> &str;
    fn run(&self, inputs: &CaseInputs) -> Result<AccTensor, KernelError>;
}

pub struct MacKernel;
pub struct BacKernel;

impl ConvKernel for MacKernel {
    fn name(&self) -> &str {
        "mac"
    }

    fn run(&self, i: &CaseInputs) -> Result<AccTensor, KernelError> {
        let w = i.weights.int_weights();
        conv2d_int_mac(&i.x, &w, i.weights.shape(), i.zero_point, i.stride, i.pad)
    }
}

impl ConvKernel for BacKernel {
    fn name(&self) -> &str {
        "bac"
    }

    fn run(&self, i: &CaseInputs) -> Result<AccTensor, KernelError> {
        conv2d_int_bac(&i.x, &i.weights, i.zero_point, i.stride, i.pad)
    }
}

/// Deterministic random int8 inputs and power-of-two weights for a case.
pub fn case_inputs(case: &BenchCase, seed: u64) -> Result<CaseInputs, BenchError> {
    let g = case.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = AffineParams {
        scale: 1.0 / 64.0,
        zero_point: rng.gen(),
    };
    let x = Int8Tensor {
        shape: [1, g.c_in, g.h, g.w],
        data: (0..g.c_in * g.h * g.w).map(|_| rng.gen()).collect(),
        q,
    };
    let shape = [g.c_out, g.c_in, g.k, g.k];
    let codes: Vec<PotCode> = (0..shape.iter().product::<usize>())
        .map(|_| PotCode::from_bits(rng.gen_range(0..16)))
        .collect();
    let weights =
        PotTensor::from_codes(shape, &codes, 1.0).map_err(|e| BenchError::Parse(e.to_string()))?;
    Ok(CaseInputs {
        x,
        weights,
        zero_point: q.zero_point,
        stride: g.stride,
        pad: g.pad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub case_id: String,
    pub engine: String,
    pub median_ns: f64,
    pub iqr_ns: f64,
    /// Candidate median over reference median; 1 for the reference row.
    pub ratio: f64,
    pub ops_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    /// Worker threads for the kernels; 1 times the single-threaded path.
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            seed: 0,
        }
    }
}

fn summarize(mut samples: Vec<f64>) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    let median = percentile_sorted(&samples, 50.0);
    let iqr = percentile_sorted(&samples, 75.0) - percentile_sorted(&samples, 25.0);
    (median, iqr)
}

fn time_kernel(
    kernel: &dyn ConvKernel,
    inputs: &CaseInputs,
    case: &BenchCase,
) -> Result<Vec<f64>, BenchError> {
    for _ in 0..case.warmup {
        std::hint::black_box(kernel.run(inputs)?);
    }
    let mut samples = Vec::with_capacity(case.reps);
    for _ in 0..case.reps {
        let start = Instant::now();
        std::hint::black_box(kernel.run(inputs)?);
        samples.push(start.elapsed().as_nanos() as f64);
    }
    Ok(samples)
}

/// Times `reference` and `candidate` on every case after checking that they
/// produce identical accumulators.
pub fn run_bench_with(
    cases: &[BenchCase],
    reference: &dyn ConvKernel,
    candidate: &dyn ConvKernel,
    opts: BenchOptions,
) -> Result<BenchReport, BenchError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| BenchError::Parse(e.to_string()))?;
    pool.install(|| {
        let mut report = BenchReport::default();
        for (i, case) in cases.iter().enumerate() {
            let g = case.geometry()?;
            let inputs = case_inputs(case, opts.seed.wrapping_add(i as u64))?;
            if reference.run(&inputs)? != candidate.run(&inputs)? {
                return Err(BenchError::CorrectnessMismatch {
                    case: case.id.clone(),
                    reference: reference.name().into(),
                    candidate: candidate.name().into(),
                });
            }
            let (ref_med, ref_iqr) = summarize(time_kernel(reference, &inputs, case)?);
            let (cand_med, cand_iqr) = summarize(time_kernel(candidate, &inputs, case)?);
            let ops = g.ops() as f64;
            for (kernel, med, iqr, ratio) in [
                (reference, ref_med, ref_iqr, 1.0),
                (candidate, cand_med, cand_iqr, cand_med / ref_med),
            ] {
                report.rows.push(ReportRow {
                    case_id: case.id.clone(),
                    engine: kernel.name().into(),
                    median_ns: med,
                    iqr_ns: iqr,
                    ratio,
                    ops_per_sec: ops / (med.max(1.0) * 1e-9),
                });
            }
        }
        Ok(report)
    })
}

/// MAC against BAC with default options.
pub fn run_bench(cases: &[BenchCase]) -> Result<BenchReport, BenchError> {
    run_bench_with(cases, &MacKernel, &BacKernel, BenchOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub const REPORT_COLUMNS: [&str; 5] = ["case_id", "engine", "median_ns", "iqr_ns", "ratio"];

pub fn emit_report(report: &BenchReport, format: ReportFormat) -> Result<String, BenchError> {
    if report.rows.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&REPORT_COLUMNS.join(","));
            out.push('\n');
            for r in &report.rows {
                let _ = writeln!(
                    out,
                    "{},{},{:.1},{:.1},{:.6}",
                    r.case_id, r.engine, r.median_ns, r.iqr_ns, r.ratio
                );
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| {} |", REPORT_COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(REPORT_COLUMNS.len()));
            for r in &report.rows {
                let _ = writeln!(
                    out,
                    "| {} | {} | {:.1} | {:.1} | {:.6} |",
                    r.case_id, r.engine, r.median_ns, r.iqr_ns, r.ratio
                );
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    case_id: String,
    engine: String,
    median_ns: f64,
    iqr_ns: f64,
    ratio: f64,
}

/// Reads back a CSV report. Throughput is not part of the CSV and comes back as 0.
pub fn parse_report_csv(text: &str) -> Result<BenchReport, BenchError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows = rdr
        .deserialize::<CsvRow>()
        .map(|r| {
            r.map(|r| ReportRow {
                case_id: r.case_id,
                engine: r.engine,
                median_ns: r.median_ns,
                iqr_ns: r.iqr_ns,
                ratio: r.ratio,
                ops_per_sec: 0.0,
            })
            .map_err(|e| BenchError::Parse(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    Ok(BenchReport { rows })
}

/// Cases file: CSV with header `id,c_in,c_out,h,w,k,stride,reps,warmup`.
pub fn parse_cases(text: &str) -> Result<Vec<BenchCase>, BenchError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let cases: Vec<BenchCase> = rdr
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| BenchError::Parse(e.to_string()))?;
    for c in &cases {
        c.geometry()?;
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_known_samples() {
        let (med, iqr) = summarize(vec![5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(med, 3.0);
        assert_eq!(iqr, 2.0);
    }

    #[test]
    fn cases_file_parses() {
        let text =
            "id,c_in,c_out,h,w,k,stride,reps,warmup\n# comment\na, 4, 8, 10, 10, 3, 1, 3, 0\n";
        let cases = parse_cases(text).unwrap();
        assert_eq!(cases[0].c_out, 8);
        let bad = "id,c_in,c_out,h,w,k,stride,reps,warmup\nb,4,8,10,10,3,1,2,0\n";
        assert!(matches!(parse_cases(bad), Err(BenchError::BadCase { .. })));
    }
}
