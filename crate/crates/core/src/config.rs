//! Run configuration: one TOML document with `[model]`, `[train]`,
//! `[cycle]`, `[sampler]` and `[paths]` sections. Unknown keys are
//! rejected. A checkpoint header holds the same document plus a `[state]`
//! table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{synthetic_documents, Corpus};
use crate::error::{Error, Result};
use crate::infer::{PrefillMode, SamplerConfig};
use crate::model::ModelConfig;
use crate::train::{BaseVariant, CyclePlan, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleConfig {
    pub tau_train: usize,
    /// Defaults to `tau_train`.
    pub tau_infer: Option<usize>,
    pub variant: BaseVariant,
    pub prefill: PrefillMode,
}

impl Default for CycleConfig {
    fn default() -> Self {
        CycleConfig {
            tau_train: 2,
            tau_infer: None,
            variant: BaseVariant::Embedding,
            prefill: PrefillMode::Cyclic,
        }
    }
}

impl CycleConfig {
    pub fn train_plan(&self) -> Result<CyclePlan> {
        CyclePlan::new(self.tau_train, self.variant)
            .map_err(|_| Error::config(format!("cycle.tau_train must be at least 1, got {}", self.tau_train)))
    }

    pub fn infer_plan(&self) -> Result<CyclePlan> {
        let tau = self.tau_infer.unwrap_or(self.tau_train);
        CyclePlan::new(tau, self.variant)
            .map_err(|_| Error::config(format!("cycle.tau_infer must be at least 1, got {tau}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Text files concatenated as documents.
    pub corpus: Vec<PathBuf>,
    /// Size of the seeded synthetic corpus used when `corpus` is empty.
    pub synthetic_corpus_bytes: usize,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: Vec::new(),
            synthetic_corpus_bytes: 0,
            checkpoint: PathBuf::from("run/model.ckpt"),
            report_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cycle: CycleConfig,
    pub sampler: SamplerConfig,
    pub paths: PathsConfig,
}

/// Progress recorded in a checkpoint header.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub step: u64,
    pub tokens_seen: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    cycle: CycleConfig,
    sampler: SamplerConfig,
    paths: PathsConfig,
    state: TrainState,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))
    }

    /// Reads and validates a config file. Relative paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.paths.corpus = config.paths.corpus.iter().map(|p| base.join(p)).collect();
        config.paths.checkpoint = base.join(&config.paths.checkpoint);
        config.paths.report_dir = base.join(&config.paths.report_dir);
        config.validate()?;
        Ok(config)
    }

    /// Checks every nested invariant without touching output paths.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.cycle.train_plan()?.check_model(&self.model)?;
        self.cycle.infer_plan()?;
        self.sampler.validate()?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(Error::config(format!(
                "train.seq_len {} exceeds model.max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        if self.paths.corpus.is_empty() && self.paths.synthetic_corpus_bytes == 0 {
            return Err(Error::config("paths.corpus is empty and paths.synthetic_corpus_bytes is 0"));
        }
        for p in &self.paths.corpus {
            if !p.is_file() {
                return Err(Error::Data(format!("corpus file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Corpus named by `[paths]`, windowed at `train.seq_len`.
    pub fn corpus(&self) -> Result<Corpus> {
        let (w, f, seed) = (self.train.seq_len, self.train.eval_fraction, self.train.seed);
        if self.paths.corpus.is_empty() {
            let docs = synthetic_documents(seed, self.paths.synthetic_corpus_bytes);
            Corpus::from_documents(&docs, w, f, seed)
        } else {
            Corpus::from_files(&self.paths.corpus, w, f, seed)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    /// Header for a checkpoint written to `paths.checkpoint`. Paths under
    /// the checkpoint's directory are stored relative to it, so identical
    /// runs in different directories write identical bytes.
    pub fn checkpoint_header(&self, state: TrainState) -> Result<String> {
        let c = self.clone();
        let dir = absolute(c.paths.checkpoint.parent().unwrap_or(Path::new("")));
        let rel = |p: &Path| {
            let p = absolute(p);
            match p.strip_prefix(&dir) {
                Ok(r) if r.as_os_str().is_empty() => PathBuf::from("."),
                Ok(r) => r.to_path_buf(),
                Err(_) => p,
            }
        };
        let paths = PathsConfig {
            corpus: c.paths.corpus.iter().map(|p| rel(p)).collect(),
            checkpoint: rel(&c.paths.checkpoint),
            report_dir: rel(&c.paths.report_dir),
            ..c.paths
        };
        toml::to_string(&Header {
            model: c.model,
            train: c.train,
            cycle: c.cycle,
            sampler: c.sampler,
            paths,
            state,
        })
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))
    }

    /// Parses a checkpoint header. Relative paths are resolved against
    /// `dir`, the directory the checkpoint was read from.
    pub fn from_checkpoint_header(header: &str, dir: &Path) -> Result<(Self, TrainState)> {
        let mut h: Header =
            toml::from_str(header).map_err(|e| Error::Format(format!("checkpoint header: {}", e.message())))?;
        h.paths.corpus = h.paths.corpus.iter().map(|p| dir.join(p)).collect();
        h.paths.checkpoint = dir.join(&h.paths.checkpoint);
        h.paths.report_dir = dir.join(&h.paths.report_dir);
        let run = RunConfig {
            model: h.model,
            train: h.train,
            cycle: h.cycle,
            sampler: h.sampler,
            paths: h.paths,
        };
        Ok((run, h.state))
    }
}

fn absolute(p: &Path) -> PathBuf {
    let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> RunConfig {
        let mut c = RunConfig::default();
        c.paths.synthetic_corpus_bytes = 10_000;
        c
    }

    #[test]
    fn defaults_validate() {
        synthetic().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[train]\nstepz = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("stepz")), "{err}");
        assert!(RunConfig::parse("[extra]\n").is_err());
    }

    #[test]
    fn zero_tau_is_rejected() {
        let mut c = synthetic();
        c.cycle.tau_train = 0;
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("tau_train")));
        let mut c = synthetic();
        c.cycle.tau_infer = Some(0);
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("tau_infer")));
    }

    #[test]
    fn nested_invariants() {
        let mut c = synthetic();
        c.model.decoding_layers = 0;
        assert!(c.validate().is_err());
        let mut c = synthetic();
        c.cycle.variant = BaseVariant::Encoding;
        assert!(c.validate().is_err());
        let mut c = synthetic();
        c.train.seq_len = 1024;
        assert!(c.validate().is_err());
        let mut c = synthetic();
        c.paths.corpus = vec!["/nonexistent/corpus.txt".into()];
        assert!(matches!(c.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn header_round_trip() {
        let mut c = synthetic();
        c.paths.checkpoint = "/runs/a/model.ckpt".into();
        c.paths.report_dir = "/runs/a".into();
        c.paths.corpus = vec!["/runs/a/data/x.txt".into(), "/data/y.txt".into()];
        let state = TrainState {
            step: 40,
            tokens_seen: 10_240,
        };
        let header = c.checkpoint_header(state).unwrap();
        let (back, s) = RunConfig::from_checkpoint_header(&header, Path::new("/runs/a")).unwrap();
        assert_eq!(back, c);
        assert_eq!(s, state);

        // Moving the whole run directory leaves the header unchanged.
        let mut moved = c.clone();
        moved.paths.checkpoint = "/elsewhere/model.ckpt".into();
        moved.paths.report_dir = "/elsewhere".into();
        moved.paths.corpus = vec!["/elsewhere/data/x.txt".into(), "/data/y.txt".into()];
        assert_eq!(moved.checkpoint_header(state).unwrap(), header);
    }
}
