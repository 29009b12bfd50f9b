//! On-disk forms of the dense backbone and of a controller training run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::controllers::Controllers;
use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::io::{meta_field, Container};
use crate::model::{DenseWeights, ModelConfig};
use crate::trainer::{PretrainConfig, TrainConfig};

pub const DENSE_KIND: &str = "carve-dense";
pub const CHECKPOINT_KIND: &str = "carve-checkpoint";

fn put_dense(c: &mut Container, dense: &DenseWeights) {
    for (name, t) in dense.named() {
        c.insert(format!("backbone/{name}"), (*t).clone());
    }
}

fn get_dense(c: &Container, cfg: &ModelConfig) -> Result<DenseWeights> {
    DenseWeights::from_named(cfg, |n| c.tensors.get(&format!("backbone/{n}")).cloned())
}

pub fn save_dense(path: impl AsRef<Path>, cfg: &ModelConfig, dense: &DenseWeights) -> Result<()> {
    let mut c = Container::new(DENSE_KIND, json!({ "model": cfg }));
    put_dense(&mut c, dense);
    c.save(path)
}

pub fn dense_from_container(c: &Container) -> Result<(ModelConfig, DenseWeights)> {
    c.expect_kind(DENSE_KIND)?;
    let cfg: ModelConfig = meta_field(&c.meta, "model")?;
    cfg.validate()?;
    let dense = get_dense(c, &cfg)?;
    Ok((cfg, dense))
}

pub fn load_dense(path: impl AsRef<Path>) -> Result<(ModelConfig, DenseWeights)> {
    dense_from_container(&Container::load(path)?)
}

/// How a checkpoint was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub train: TrainConfig,
    pub pretrain: Option<PretrainConfig>,
    /// Corpus files with paths as given to the run.
    pub corpus: Vec<CorpusSpec>,
    pub iterations_done: usize,
}

/// Frozen backbone plus controllers.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub dense: DenseWeights,
    pub controllers: Controllers,
    pub run: RunInfo,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let meta = json!({ "model": self.model, "run": self.run });
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        put_dense(&mut c, &self.dense);
        for (name, t) in self.controllers.named() {
            c.insert(format!("controller/{name}"), t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let model: ModelConfig = meta_field(&c.meta, "model")?;
        model.validate()?;
        let run: RunInfo = meta_field(&c.meta, "run")?;
        let dense = get_dense(c, &model)?;
        let controllers =
            Controllers::from_named(&model, |n| c.tensors.get(&format!("controller/{n}")).cloned())?;
        let known = c.tensors.keys().filter(|k| k.starts_with("backbone/") || k.starts_with("controller/"));
        if known.count() != c.tensors.len() {
            return Err(Error::Format("checkpoint holds unrecognised tensors".into()));
        }
        Ok(Checkpoint {
            model,
            dense,
            controllers,
            run,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig::micro();
        let ck = Checkpoint {
            model: cfg.clone(),
            dense: DenseWeights::init(&cfg, 1).unwrap(),
            controllers: Controllers::init(&cfg, 2).unwrap(),
            run: RunInfo {
                train: TrainConfig::default(),
                pretrain: Some(PretrainConfig::default()),
                corpus: vec![CorpusSpec {
                    path: "a.txt".into(),
                    ratio: 2.0,
                }],
                iterations_done: 7,
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_container().to_bytes().unwrap(), std::fs::read(&p).unwrap());
        assert!(load_dense(&p).is_err());
    }

    #[test]
    fn dense_round_trip() {
        let cfg = ModelConfig::micro();
        let dense = DenseWeights::init(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d");
        save_dense(&p, &cfg, &dense).unwrap();
        let (c2, d2) = load_dense(&p).unwrap();
        assert_eq!((c2, d2), (cfg, dense));
        assert!(Checkpoint::load(&p).is_err());
    }
}
