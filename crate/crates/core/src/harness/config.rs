//! TOML run configuration shared by the command-line tools.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{PretrainConfig, TrainConfig};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "CARVE_SEED";

/// A full training run: backbone source, corpus mixture and schedules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Pretrained dense backbone; when absent one is pretrained first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub corpus: Vec<CorpusSpec>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.normalized()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for c in &mut cfg.corpus {
            c.path = base.join(&c.path);
        }
        if let Some(d) = &mut cfg.dense {
            *d = base.join(&*d);
        }
        Ok(cfg)
    }

    /// Validates every block and propagates the run seed into the
    /// schedules.
    pub fn normalized(mut self) -> Result<Self> {
        self.model.validate()?;
        if self.corpus.is_empty() {
            return Err(Error::Config("at least one [[corpus]] entry is required".into()));
        }
        if let Some(c) = self.corpus.iter().find(|c| !(c.ratio > 0.0 && c.ratio.is_finite())) {
            return Err(Error::Config(format!("corpus {} needs a positive ratio", c.path.display())));
        }
        for (name, len) in [("train", self.train.seq_len), ("pretrain", self.pretrain.seq_len)] {
            if len == 0 || len > self.model.max_seq {
                return Err(Error::Config(format!(
                    "{name}.seq_len {len} must be in 1..={}",
                    self.model.max_seq
                )));
            }
        }
        if self.train.log_every == 0 {
            return Err(Error::Config("train.log_every must be positive".into()));
        }
        self.train.seed = self.seed;
        self.pretrain.seed = self.seed;
        Ok(self)
    }

    /// Replaces the run seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.pretrain.seed = seed;
        self
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.corpus)
    }
}

/// The seed from [`SEED_ENV`], if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 7

[model]
layers = 2
d_model = 32
heads = 2
d_mid = 64
max_seq = 64
target_ratio = 0.6

[train]
iterations = 20
seq_len = 32

[pretrain]
steps = 10
seq_len = 32

[[corpus]]
path = "prose.txt"
ratio = 2

[[corpus]]
path = "code.txt"
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let c = RunConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(c.model.layers, 2);
        assert_eq!(c.model.experts, ModelConfig::default().experts);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.pretrain.seed, 7);
        assert_eq!(c.corpus[1].ratio, 1.0);
        assert_eq!(c.train.lr, 1e-3);
    }

    #[test]
    fn round_trip_equals_normalized() {
        let c = RunConfig::from_toml(SAMPLE).unwrap();
        let again = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn malformed_configs_are_rejected() {
        for bad in [
            "corpus = []",
            "[model]\nlayers = 2\n[[corpus]]\npath = \"a\"\nratio = -1",
            "[model]\nheads = 3\n[[corpus]]\npath = \"a\"",
            "[train]\nseq_len = 100000\n[[corpus]]\npath = \"a\"",
            "[modle]\nlayers = 1\n[[corpus]]\npath = \"a\"",
            "seed = \"x\"\n[[corpus]]\npath = \"a\"",
            "this is not toml",
        ] {
            assert!(matches!(RunConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, SAMPLE).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.corpus[0].path, dir.path().join("prose.txt"));
    }

    #[test]
    fn shipped_toy_config_matches_defaults() {
        let cfg = RunConfig::from_toml(include_str!("../../../../configs/toy.toml")).unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.pretrain, PretrainConfig::default());
        assert_eq!(cfg.corpus.len(), 3);
    }
}
