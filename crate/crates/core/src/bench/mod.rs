//! Cost model and measurement harness.
//!
//! Cost is counted in layer invocations: one per (pass, layer) no matter
//! how many tokens the pass carries, which is the memory-bound view of
//! decoding. Wall-clock numbers are recorded alongside but are advisory on
//! a CPU, where the work is compute-bound.

mod plt;
mod scaling;
mod trace;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use plt::{measure_plt, plt_theoretical, ratio_f64, reuse_layers, PltReport};
pub use scaling::{fit_scaling_law, fit_training_log, ScalingFit};
pub use trace::{InvocationTrace, PassKind, TraceEntry};

use crate::error::{Error, Result};
use crate::infer::{generate_lockstep, GenerateOptions, SamplerConfig};
use crate::model::Model;
use crate::tensor::Real;
use crate::train::{BaseVariant, CyclePlan};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const COMPUTE_BOUND_NOTE: &str = "CPU runs are compute-bound: layer invocation counts are the \
authoritative efficiency metric and tokens/sec is advisory";

#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputConfig {
    pub taus: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub context_len: usize,
    pub gen_len: usize,
    pub variant: BaseVariant,
    pub seed: u64,
}

impl Default for ThroughputConfig {
    fn default() -> Self {
        ThroughputConfig {
            taus: vec![1, 2, 3, 4],
            batch_sizes: vec![1, 4],
            context_len: 16,
            gen_len: 24,
            variant: BaseVariant::Embedding,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThroughputRow {
    pub tau: usize,
    pub batch: usize,
    /// Tokens generated per stream.
    pub gen_tokens: usize,
    /// Forward passes per stream, prefill included.
    pub passes: usize,
    /// Layer invocations per stream; streams in a batch share each pass.
    pub layer_invocations: u64,
    /// Same count for a plain decoder running every layer per token.
    pub vanilla_invocations: u64,
    pub plt: f64,
    pub seconds: f64,
    pub tokens_per_sec: f64,
}

/// Random contexts from a seeded stream, one per batch entry.
pub fn random_contexts(seed: u64, batch: usize, len: usize, vocab: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| (0..len).map(|_| rng.gen_range(0..vocab)).collect())
        .collect()
}

/// Times greedy lockstep generation for every (tau, batch) pair.
pub fn throughput_bench<T: Real>(model: &Model<T>, config: &ThroughputConfig) -> Result<Vec<ThroughputRow>> {
    let c = model.config();
    if config.gen_len == 0 || config.context_len == 0 {
        return Err(Error::config("throughput bench needs positive context and generation lengths"));
    }
    if config.context_len + config.gen_len > c.max_seq_len + 1 {
        return Err(Error::config(format!(
            "context {} plus {} generated tokens exceeds max_seq_len {}",
            config.context_len, config.gen_len, c.max_seq_len
        )));
    }
    let partition = model.partition();
    let l = partition.total() as u64;
    let mut rows = Vec::new();
    for &tau in &config.taus {
        let plan = CyclePlan::new(tau, config.variant)?;
        for &batch in &config.batch_sizes {
            if batch == 0 {
                return Err(Error::config("batch sizes must be positive"));
            }
            let contexts = random_contexts(config.seed, batch, config.context_len, c.vocab_size);
            let start = Instant::now();
            let reports = generate_lockstep(
                model,
                &contexts,
                config.gen_len,
                &plan,
                SamplerConfig::greedy(),
                GenerateOptions::default(),
            )?;
            let seconds = start.elapsed().as_secs_f64();
            let trace = &reports[0].trace;
            let gen_tokens = reports[0].tokens.len();
            let produced: usize = reports.iter().map(|r| r.tokens.len()).sum();
            let invocations = trace.layer_invocations(&partition);
            rows.push(ThroughputRow {
                tau,
                batch,
                gen_tokens,
                passes: trace.pass_count(),
                layer_invocations: invocations,
                vanilla_invocations: gen_tokens as u64 * l,
                plt: invocations as f64 / (gen_tokens as u64 * l) as f64,
                seconds,
                tokens_per_sec: produced as f64 / seconds.max(f64::MIN_POSITIVE),
            });
        }
    }
    Ok(rows)
}

/// PLT rows for every `tau` at generation length `gen_len`.
pub fn plt_sweep<T: Real>(
    model: &Model<T>,
    taus: &[usize],
    variant: BaseVariant,
    context_len: usize,
    gen_len: usize,
    seed: u64,
) -> Result<Vec<PltReport>> {
    let context = random_contexts(seed, 1, context_len, model.config().vocab_size).remove(0);
    let partition = model.partition();
    let mut out = Vec::new();
    for &tau in taus {
        let plan = CyclePlan::new(tau, variant)?;
        let r = crate::infer::generate(
            model,
            &context,
            gen_len,
            &plan,
            SamplerConfig::greedy(),
            GenerateOptions::default(),
        )?;
        out.push(measure_plt(&r.trace, &partition, &plan, r.tokens.len())?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub note: &'static str,
    pub plt: Vec<PltReport>,
    pub throughput: Vec<ThroughputRow>,
}

impl BenchReport {
    pub fn new(plt: Vec<PltReport>, throughput: Vec<ThroughputRow>) -> Self {
        BenchReport {
            schema_version: REPORT_SCHEMA_VERSION,
            note: COMPUTE_BOUND_NOTE,
            plt,
            throughput,
        }
    }

    /// Writes `bench_plt.csv`, `bench_throughput.csv` and
    /// `bench_report.json` into `dir`; returns the paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let plt_path = dir.join("bench_plt.csv");
        let mut w = csv::Writer::from_path(&plt_path).map_err(csv_error)?;
        w.write_record([
            "schema_version",
            "l",
            "l_e",
            "l_t",
            "l_d",
            "tau",
            "variant",
            "generated_tokens",
            "theoretical_plt",
            "measured_plt",
            "theoretical_value",
            "measured_value",
            "match",
        ])
        .map_err(csv_error)?;
        for r in &self.plt {
            w.write_record([
                REPORT_SCHEMA_VERSION.to_string(),
                r.l.to_string(),
                r.l_e.to_string(),
                r.l_t.to_string(),
                r.l_d.to_string(),
                r.tau.to_string(),
                serde_json::to_value(r.variant)?.as_str().unwrap_or_default().to_string(),
                r.generated_tokens.to_string(),
                format!("{}/{}", r.theoretical_plt.numer(), r.theoretical_plt.denom()),
                format!("{}/{}", r.measured_plt.numer(), r.measured_plt.denom()),
                format!("{:.6}", r.theoretical_f64()),
                format!("{:.6}", r.measured_f64()),
                r.matches.to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;

        let tp_path = dir.join("bench_throughput.csv");
        let mut w = csv::Writer::from_path(&tp_path).map_err(csv_error)?;
        for row in &self.throughput {
            w.serialize(row).map_err(csv_error)?;
        }
        if self.throughput.is_empty() {
            w.write_record([
                "tau",
                "batch",
                "gen_tokens",
                "passes",
                "layer_invocations",
                "vanilla_invocations",
                "plt",
                "seconds",
                "tokens_per_sec",
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;

        let json_path = dir.join("bench_report.json");
        std::fs::write(&json_path, serde_json::to_string_pretty(self)?)?;
        Ok(vec![plt_path, tp_path, json_path])
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
