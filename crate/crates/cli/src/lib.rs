//! `dmtd` command-line runner.
//!
//! Every command reads its settings from a run config (train) or from the
//! config embedded in a checkpoint (everything else). Errors map to exit
//! codes: 2 usage/config, 3 data, 4 numeric.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dmtd_core::bench::{self, BenchReport, ThroughputConfig};
use dmtd_core::config::{RunConfig, TrainState};
use dmtd_core::corpus::{detokenize, tokenize, SEPARATOR_ID};
use dmtd_core::infer::{generate, GenerateOptions, GenerationReport, SampleMode};
use dmtd_core::model::checkpoint::Checkpoint;
use dmtd_core::model::{Model, Stage};
use dmtd_core::train::{evaluate, CyclePlan, TrainRecord, Trainer};
use dmtd_core::Error;

pub const REPORT_DIR_ENV: &str = "DMTD_REPORT_DIR";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TRANSCRIPT: &str = "transcript.json";

#[derive(Debug, Parser)]
#[command(name = "dmtd", version, about = "Direct multi-token decoding: train, generate, eval, bench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a run config, or resume from a checkpoint.
    Train(TrainArgs),
    /// Generate text from a prompt with cycle-based decoding.
    Generate(GenerateArgs),
    /// Held-out loss and perplexity for one or more cycle lengths.
    Eval(EvalArgs),
    /// PLT and throughput report.
    Bench(BenchArgs),
    /// Print the config, partition and tensors of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct ReportDir {
    /// Output directory for logs and reports.
    #[arg(long, env = REPORT_DIR_ENV)]
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides both the model and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub report: ReportDir,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Inference cycle length; defaults to the configured one.
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    /// Sampler seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Switches to temperature sampling.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Write the generation transcript into the report directory.
    #[arg(long)]
    pub transcript: bool,
    #[command(flatten)]
    pub report: ReportDir,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config whose corpus and split replace the embedded ones.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cycle lengths, comma separated; defaults to the training one.
    #[arg(long, value_delimiter = ',')]
    pub tau: Vec<usize>,
    #[command(flatten)]
    pub report: ReportDir,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cycle lengths, comma separated; 1 is always included.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4])]
    pub tau: Vec<usize>,
    /// Lockstep batch sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 4])]
    pub batch: Vec<usize>,
    #[arg(long, default_value_t = 24)]
    pub max_new: usize,
    #[arg(long, default_value_t = 16)]
    pub context_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub report: ReportDir,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Exit code for a core error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

/// Destinations for command output and diagnostics.
pub struct Console<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

pub fn run(cli: Cli, console: &mut Console) -> Result<(), Error> {
    match cli.command {
        Command::Train(a) => train(&a, console).map(drop),
        Command::Generate(a) => generate_cmd(&a, console).map(drop),
        Command::Eval(a) => eval(&a, console).map(drop),
        Command::Bench(a) => bench_cmd(&a, console).map(drop),
        Command::Inspect(a) => inspect(&a, console),
    }
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig, TrainState), Error> {
    let ck = Checkpoint::load(path)?;
    let (config, state) = RunConfig::from_checkpoint_header(&ck.header, path.parent().unwrap_or(Path::new("")))?;
    Ok((ck, config, state))
}

fn save_checkpoint(trainer: &Trainer, config: &RunConfig) -> Result<(), Error> {
    let state = TrainState {
        step: trainer.step,
        tokens_seen: trainer.tokens_seen,
    };
    let path = &config.paths.checkpoint;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Checkpoint::from_model(&trainer.model, config.checkpoint_header(state)?)
        .with_optimizer(&trainer.model, &trainer.opt)
        .save(path)
}

pub fn read_train_log(path: &Path) -> Result<Vec<TrainRecord>, Error> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_record(log: &mut File, record: &TrainRecord) -> Result<(), Error> {
    if !record.train_loss.is_finite() || !record.eval_loss.is_finite() {
        return Err(Error::Numeric(format!("loss diverged at step {}", record.step)));
    }
    writeln!(log, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn train(args: &TrainArgs, console: &mut Console) -> Result<TrainOutcome, Error> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.model.seed = seed;
        config.train.seed = seed;
    }
    config.validate()?;
    let report_dir = args.report.report_dir.clone().unwrap_or(config.paths.report_dir.clone());
    let plan = config.cycle.train_plan()?;
    let resume = match &args.checkpoint {
        Some(path) => {
            let (ck, ck_config, state) = load_checkpoint(path)?;
            if ck_config.model != config.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different [model] section",
                    path.display()
                )));
            }
            Some((ck, state))
        }
        None => None,
    };
    let corpus = config.corpus()?;
    std::fs::create_dir_all(&report_dir)?;
    let log_path = report_dir.join(TRAIN_LOG);

    let mut records = Vec::new();
    let (mut trainer, mut log) = match resume {
        Some((ck, state)) => {
            let mut trainer = Trainer::new(ck.model()?, config.train.clone(), plan)?;
            ck.restore_optimizer(&trainer.model, &mut trainer.opt)?;
            trainer.resume_at(state.step, state.tokens_seen);
            let kept: Vec<TrainRecord> = match read_train_log(&log_path) {
                Ok(r) => r.into_iter().filter(|r| r.step <= state.step).collect(),
                Err(_) => Vec::new(),
            };
            let mut log = File::create(&log_path)?;
            for r in &kept {
                write_record(&mut log, r)?;
            }
            writeln!(console.err, "resuming at step {}", state.step)?;
            (trainer, log)
        }
        None => {
            let trainer = Trainer::new(Model::init(&config.model)?, config.train.clone(), plan)?;
            let mut log = File::create(&log_path)?;
            let first = trainer.initial_record(&corpus)?;
            write_record(&mut log, &first)?;
            records.push(first);
            (trainer, log)
        }
    };
    let interval = config.train.checkpoint_interval;
    while !trainer.done() {
        if let Some(r) = trainer.step_once(&corpus)? {
            write_record(&mut log, &r)?;
            writeln!(
                console.out,
                "step {:>6} tokens {:>9} train {:.4} eval {:.4} lr {:.2e}",
                r.step, r.tokens_seen, r.train_loss, r.eval_loss, r.lr
            )?;
            records.push(r);
            if interval > 0 && trainer.step % interval == 0 && !trainer.done() {
                save_checkpoint(&trainer, &config)?;
            }
        }
    }
    save_checkpoint(&trainer, &config)?;
    log.flush()?;
    Ok(TrainOutcome {
        records,
        checkpoint: config.paths.checkpoint.clone(),
        log: log_path,
    })
}

#[derive(Debug)]
pub struct GenerateOutcome {
    pub report: GenerationReport,
    pub text: Vec<u8>,
    pub transcript: Option<PathBuf>,
}

pub fn generate_cmd(args: &GenerateArgs, console: &mut Console) -> Result<GenerateOutcome, Error> {
    let (ck, mut config, _) = load_checkpoint(&args.checkpoint)?;
    if let Some(tau) = args.tau {
        config.cycle.tau_infer = Some(tau);
    }
    if let Some(seed) = args.seed {
        config.sampler.seed = seed;
    }
    if let Some(t) = args.temperature {
        config.sampler.mode = SampleMode::Temperature;
        config.sampler.temperature = t;
    }
    config.sampler.validate()?;
    let plan = config.cycle.infer_plan()?;
    if plan.tau != config.cycle.tau_train {
        writeln!(
            console.err,
            "note: inference cycle length {} differs from training cycle length {}",
            plan.tau, config.cycle.tau_train
        )?;
    }
    let model = ck.model()?;
    let context = tokenize(args.prompt.as_bytes());
    if context.is_empty() {
        return Err(Error::Config("--prompt must not be empty".into()));
    }
    if context.len() > model.config().max_seq_len {
        return Err(Error::Config(format!(
            "prompt of {} bytes exceeds max_seq_len {}",
            context.len(),
            model.config().max_seq_len
        )));
    }
    let options = GenerateOptions {
        prefill: config.cycle.prefill,
        stop_token: Some(SEPARATOR_ID),
        record_logits: false,
    };
    let report = generate(&model, &context, args.max_new, &plan, config.sampler, options)?;
    if report.stop == dmtd_core::infer::StopReason::Truncated {
        writeln!(
            console.err,
            "warning: output truncated at max_seq_len {} after {} tokens",
            model.config().max_seq_len,
            report.tokens.len()
        )?;
    }
    let body: Vec<usize> = report.tokens.iter().copied().filter(|t| *t != SEPARATOR_ID).collect();
    let text = detokenize(&body)?;
    console.out.write_all(&text)?;
    writeln!(console.out)?;
    let transcript = if args.transcript {
        let dir = args.report.report_dir.clone().unwrap_or(config.paths.report_dir.clone());
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(TRANSCRIPT);
        let t = report.transcript(&context, config.cycle.prefill);
        std::fs::write(&path, serde_json::to_string_pretty(&t)?)?;
        Some(path)
    } else {
        None
    };
    Ok(GenerateOutcome {
        report,
        text,
        transcript,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub tau: usize,
    pub loss: f64,
    pub perplexity: f64,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    schema_version: u32,
    rows: &'a [EvalRow],
}

pub fn eval(args: &EvalArgs, console: &mut Console) -> Result<Vec<EvalRow>, Error> {
    let (ck, embedded, _) = load_checkpoint(&args.checkpoint)?;
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => embedded.clone(),
    };
    config.model = embedded.model.clone();
    config.cycle.variant = embedded.cycle.variant;
    let model = ck.model()?;
    let corpus = config.corpus()?;
    let taus = if args.tau.is_empty() {
        vec![embedded.cycle.tau_train]
    } else {
        args.tau.clone()
    };
    let mut rows = Vec::new();
    writeln!(console.out, "{:>4} {:>10} {:>12}", "tau", "loss", "perplexity")?;
    for tau in taus {
        let plan = CyclePlan::new(tau, config.cycle.variant)
            .map_err(|_| Error::Config(format!("--tau must be at least 1, got {tau}")))?;
        let loss = evaluate(&model, &corpus, &plan, config.train.eval_windows)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("held-out loss at tau {tau} is {loss}")));
        }
        let row = EvalRow {
            tau,
            loss,
            perplexity: loss.exp(),
        };
        writeln!(console.out, "{:>4} {:>10.4} {:>12.3}", row.tau, row.loss, row.perplexity)?;
        rows.push(row);
    }
    if let Some(dir) = &args.report.report_dir {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("eval.csv")).map_err(|e| Error::Format(e.to_string()))?;
        for r in &rows {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        let report = EvalReport {
            schema_version: bench::REPORT_SCHEMA_VERSION,
            rows: &rows,
        };
        std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(rows)
}

pub fn bench_cmd(args: &BenchArgs, console: &mut Console) -> Result<(BenchReport, Vec<PathBuf>), Error> {
    let (ck, config, _) = load_checkpoint(&args.checkpoint)?;
    let model = ck.model()?;
    let mut taus = args.tau.clone();
    if !taus.contains(&1) {
        taus.insert(0, 1);
    }
    let variant = config.cycle.variant;
    let plt = bench::plt_sweep(&model, &taus, variant, args.context_len, args.max_new, args.seed)?;
    let throughput = bench::throughput_bench(
        &model,
        &ThroughputConfig {
            taus: taus.clone(),
            batch_sizes: args.batch.clone(),
            context_len: args.context_len,
            gen_len: args.max_new,
            variant,
            seed: args.seed,
        },
    )?;
    let report = BenchReport::new(plt, throughput);
    writeln!(console.out, "{}", bench::COMPUTE_BOUND_NOTE)?;
    writeln!(console.out, "{:>4} {:>8} {:>12} {:>12} {:>6}", "tau", "tokens", "theoretical", "measured", "match")?;
    for r in &report.plt {
        writeln!(
            console.out,
            "{:>4} {:>8} {:>12.4} {:>12.4} {:>6}",
            r.tau,
            r.generated_tokens,
            r.theoretical_f64(),
            r.measured_f64(),
            r.matches
        )?;
    }
    writeln!(console.out, "{:>4} {:>6} {:>12} {:>12}", "tau", "batch", "invocations", "tokens/s")?;
    for r in &report.throughput {
        writeln!(
            console.out,
            "{:>4} {:>6} {:>12} {:>12.1}",
            r.tau, r.batch, r.layer_invocations, r.tokens_per_sec
        )?;
    }
    let dir = args.report.report_dir.clone().unwrap_or(config.paths.report_dir.clone());
    let paths = report.write(&dir)?;
    Ok((report, paths))
}

pub fn inspect(args: &InspectArgs, console: &mut Console) -> Result<(), Error> {
    let (ck, config, state) = load_checkpoint(&args.checkpoint)?;
    let model = ck.model()?;
    let part = model.partition();
    let out = &mut console.out;
    writeln!(out, "# checkpoint {}", args.checkpoint.display())?;
    writeln!(out, "step = {}, tokens_seen = {}", state.step, state.tokens_seen)?;
    writeln!(out, "parameters = {}", model.parameter_count())?;
    for stage in Stage::ALL {
        let r = part.range(stage);
        writeln!(out, "{stage:<9} layers {}..{} ({})", r.start, r.end, r.len())?;
    }
    writeln!(out, "tensors = {}", ck.tensors.len())?;
    writeln!(out)?;
    write!(out, "{}", config.to_toml()?)?;
    Ok(())
}
