use std::path::{Path, PathBuf};
use std::process::Command as Process;

use dmtd_cli::{
    bench_cmd, eval, generate_cmd, read_train_log, train, BenchArgs, Console, EvalArgs, GenerateArgs,
    ReportDir, TrainArgs, REPORT_DIR_ENV, TRAIN_LOG, TRANSCRIPT,
};
use dmtd_core::config::{RunConfig, TrainState};
use dmtd_core::model::checkpoint::Checkpoint;
use dmtd_core::model::Model;
use dmtd_core::train::Trainer;

const CONFIG: &str = r#"
[model]
d_model = 16
n_heads = 2
d_ff = 32
n_layers = 3
encoding_layers = 1
thinking_layers = 1
decoding_layers = 1
max_seq_len = 48

[train]
batch_size = 2
seq_len = 24
steps = 40
log_interval = 10
checkpoint_interval = 20
eval_windows = 4
seed = 9

[cycle]
tau_train = 2

[paths]
synthetic_corpus_bytes = 20000
checkpoint = "out/model.ckpt"
report_dir = "out"
"#;

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, format!("{CONFIG}{extra}")).unwrap();
    (dir, path)
}

fn quiet<R>(f: impl FnOnce(&mut Console) -> R) -> R {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    f(&mut Console { out: &mut out, err: &mut err })
}

fn train_args(config: &Path) -> TrainArgs {
    TrainArgs {
        config: config.to_path_buf(),
        checkpoint: None,
        seed: None,
        report: ReportDir { report_dir: None },
    }
}

fn generate_args(ckpt: &Path, report: Option<PathBuf>) -> GenerateArgs {
    GenerateArgs {
        checkpoint: ckpt.to_path_buf(),
        prompt: "The farmer ".into(),
        tau: None,
        max_new: 20,
        seed: Some(4),
        temperature: Some(0.9),
        transcript: true,
        report: ReportDir { report_dir: report },
    }
}

fn dmtd(args: &[&str]) -> Process {
    let mut p = Process::new(env!("CARGO_BIN_EXE_dmtd"));
    p.args(args).env_remove(REPORT_DIR_ENV);
    p
}

#[test]
fn train_and_generate_are_byte_identical_across_runs() {
    let mut logs = Vec::new();
    let mut ckpts = Vec::new();
    let mut transcripts = Vec::new();
    let mut texts = Vec::new();
    // Each run lives in its own directory.
    for _ in 0..2 {
        let (dir, config) = setup("");
        let out = quiet(|c| train(&train_args(&config), c)).unwrap();
        assert!(dir.path().join("out").join(TRAIN_LOG).exists());
        logs.push(std::fs::read(&out.log).unwrap());
        ckpts.push(std::fs::read(&out.checkpoint).unwrap());
        let g = quiet(|c| generate_cmd(&generate_args(&out.checkpoint, None), c)).unwrap();
        transcripts.push(std::fs::read(g.transcript.unwrap()).unwrap());
        texts.push(g.text);
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(ckpts[0], ckpts[1]);
    assert_eq!(transcripts[0], transcripts[1]);
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn training_log_records_are_complete() {
    let (_dir, config) = setup("");
    let out = quiet(|c| train(&train_args(&config), c)).unwrap();
    let records = read_train_log(&out.log).unwrap();
    assert_eq!(records, out.records);
    let steps: Vec<u64> = records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 10, 20, 30, 40]);
    for r in &records {
        assert_eq!(r.offset_losses.len(), 2);
        assert_eq!(r.tokens_seen, r.step * 2 * 24);
        assert!(r.train_loss.is_finite() && r.eval_loss.is_finite());
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let (dir, config) = setup("");
    let full = quiet(|c| train(&train_args(&config), c)).unwrap();
    let full_log = std::fs::read_to_string(&full.log).unwrap();
    let full_ckpt = std::fs::read(&full.checkpoint).unwrap();

    // The state an interrupted run leaves behind after twenty steps.
    let rc = RunConfig::load(&config).unwrap();
    let corpus = rc.corpus().unwrap();
    let mut t = Trainer::new(Model::init(&rc.model).unwrap(), rc.train.clone(), rc.cycle.train_plan().unwrap()).unwrap();
    for _ in 0..20 {
        t.step_once(&corpus).unwrap();
    }
    let header = rc.checkpoint_header(TrainState { step: t.step, tokens_seen: t.tokens_seen }).unwrap();
    let mid = dir.path().join("mid.ckpt");
    Checkpoint::from_model(&t.model, header).with_optimizer(&t.model, &t.opt).save(&mid).unwrap();
    let head: String = full_log.lines().take(3).map(|l| format!("{l}\n")).collect();
    std::fs::write(&full.log, head).unwrap();

    let mut args = train_args(&config);
    args.checkpoint = Some(mid);
    let resumed = quiet(|c| train(&args, c)).unwrap();
    assert_eq!(std::fs::read_to_string(&resumed.log).unwrap(), full_log);
    assert_eq!(std::fs::read(&resumed.checkpoint).unwrap(), full_ckpt);
}

#[test]
fn eval_matches_the_last_logged_eval_loss() {
    let (_dir, config) = setup("");
    let out = quiet(|c| train(&train_args(&config), c)).unwrap();
    let args = EvalArgs {
        checkpoint: out.checkpoint.clone(),
        config: None,
        tau: vec![],
        report: ReportDir { report_dir: None },
    };
    let rows = quiet(|c| eval(&args, c)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].tau, 2);
    let last = out.records.last().unwrap().eval_loss;
    assert!((rows[0].loss - last).abs() < 1e-9, "{} vs {last}", rows[0].loss);
}

#[test]
fn bench_report_is_versioned() {
    let (dir, config) = setup("");
    let out = quiet(|c| train(&train_args(&config), c)).unwrap();
    let report_dir = dir.path().join("bench");
    let args = BenchArgs {
        checkpoint: out.checkpoint,
        tau: vec![2, 3],
        batch: vec![1, 2],
        max_new: 12,
        context_len: 6,
        seed: 1,
        report: ReportDir { report_dir: Some(report_dir.clone()) },
    };
    let (report, paths) = quiet(|c| bench_cmd(&args, c)).unwrap();
    assert_eq!(paths.len(), 3);
    assert!(report.plt.iter().all(|r| r.matches));
    assert_eq!(report.plt.iter().map(|r| r.tau).collect::<Vec<_>>(), vec![1, 2, 3]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report_dir.join("bench_report.json")).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["plt"][1]["measured_plt"], "2/3");
    let mut rdr = csv::Reader::from_path(report_dir.join("bench_plt.csv")).unwrap();
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers[0], "schema_version");
    assert!(headers.contains(&"measured_plt".to_string()));
    assert_eq!(rdr.records().count(), 3);
}

#[test]
fn env_var_sets_the_report_dir() {
    let (dir, config) = setup("");
    let out = quiet(|c| train(&train_args(&config), c)).unwrap();
    let target = dir.path().join("from_env");
    let status = dmtd(&[
        "generate",
        "--checkpoint",
        out.checkpoint.to_str().unwrap(),
        "--prompt",
        "A quiet ",
        "--max-new",
        "6",
        "--transcript",
    ])
    .env(REPORT_DIR_ENV, &target)
    .output()
    .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(target.join(TRANSCRIPT).exists());

    // The flag wins over the variable.
    let flag = dir.path().join("from_flag");
    let status = dmtd(&[
        "generate",
        "--checkpoint",
        out.checkpoint.to_str().unwrap(),
        "--prompt",
        "A quiet ",
        "--max-new",
        "6",
        "--transcript",
        "--report-dir",
        flag.to_str().unwrap(),
    ])
    .env(REPORT_DIR_ENV, &target)
    .output()
    .unwrap();
    assert!(status.status.success());
    assert!(flag.join(TRANSCRIPT).exists());
}

#[test]
fn exit_codes() {
    let (dir, config) = setup("");
    let code = |args: &[&str]| dmtd(args).output().unwrap().status.code().unwrap();

    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["train"]), 2);
    assert_eq!(code(&["train", "--config", "/nonexistent/run.toml"]), 2);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    assert_eq!(code(&["train", "--config", bad.to_str().unwrap()]), 2);

    let (_d2, zero_tau) = setup("");
    let text = std::fs::read_to_string(&zero_tau).unwrap().replace("tau_train = 2", "tau_train = 0");
    std::fs::write(&zero_tau, text).unwrap();
    assert_eq!(code(&["train", "--config", zero_tau.to_str().unwrap()]), 2);

    let out = quiet(|c| train(&train_args(&config), c)).unwrap();
    let ck = out.checkpoint.to_str().unwrap();
    assert_eq!(code(&["generate", "--checkpoint", ck, "--prompt", "x", "--tau", "0"]), 2);
    assert_eq!(code(&["eval", "--checkpoint", ck, "--tau", "0"]), 2);
    assert_eq!(code(&["inspect", "--checkpoint", ck]), 0);

    let mut bytes = std::fs::read(&out.checkpoint).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    let corrupt = dir.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, bytes).unwrap();
    assert_eq!(code(&["inspect", "--checkpoint", corrupt.to_str().unwrap()]), 3);

    let missing_corpus = dir.path().join("missing.toml");
    let text = CONFIG.replace("synthetic_corpus_bytes = 20000", "corpus = [\"nope.txt\"]");
    std::fs::write(&missing_corpus, text).unwrap();
    assert_eq!(code(&["train", "--config", missing_corpus.to_str().unwrap()]), 3);
}

#[test]
fn diverging_run_exits_with_numeric_code() {
    let (_dir, config) = setup("");
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("seed = 9", "seed = 9\nlr = 1e30");
    std::fs::write(&config, text).unwrap();
    let out = dmtd(&["train", "--config", config.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
