//! Frozen-backbone self-distillation of the controllers, and the dense
//! pretraining that produces a toy backbone worth distilling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::controllers::{Controllers, GumbelRng, NoiseMode, Relax};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::masked::{tomoe_forward, PassOptions};
use crate::model::decoder::{forward, NoMasks};
use crate::model::{DenseWeights, ModelConfig};
use crate::objectives::{objective, LossReport};
use crate::optim::AdamW;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seq_len: usize,
    pub seed: u64,
    /// Steps per log row; each row holds the mean over its interval.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            lr: 1e-3,
            weight_decay: 0.05,
            seq_len: 256,
            seed: 0,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub warmup: usize,
    pub weight_decay: f32,
    pub seq_len: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1200,
            lr: 2e-3,
            warmup: 100,
            weight_decay: 0.0,
            seq_len: 256,
            seed: 0,
            log_every: 100,
        }
    }
}

/// One row of the training-dynamics log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub kd: f64,
    pub r_p: f64,
    pub r_u: f64,
    pub r_l: f64,
    pub active_ratio: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "iteration,kd,r_p,r_u,r_l,active_ratio";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration, self.kd, self.r_p, self.r_u, self.r_l, self.active_ratio
        )
    }

    pub fn parse_csv(text: &str) -> Result<Vec<LogRow>> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::Format("missing dynamics log header".into()));
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 6 {
                    return Err(Error::Format(format!("bad log line {l:?}")));
                }
                let num = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad number {s:?}: {e}")))
                };
                Ok(LogRow {
                    iteration: f[0]
                        .parse()
                        .map_err(|e| Error::Format(format!("bad iteration {:?}: {e}", f[0])))?,
                    kd: num(f[1])?,
                    r_p: num(f[2])?,
                    r_u: num(f[3])?,
                    r_l: num(f[4])?,
                    active_ratio: num(f[5])?,
                })
            })
            .collect()
    }

    fn mean(iteration: usize, reports: &[LossReport]) -> LogRow {
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LogRow {
            iteration,
            kd: avg(|r| r.kd),
            r_p: avg(|r| r.r_p),
            r_u: avg(|r| r.r_u),
            r_l: avg(|r| r.r_l),
            active_ratio: avg(|r| r.active_ratio),
        }
    }
}

/// All controller parameters flattened in visiting order.
pub fn flat_params(c: &Controllers) -> Vec<f32> {
    c.params
        .named()
        .into_iter()
        .flat_map(|(_, t)| t.data().to_vec())
        .collect()
}

/// Inverse of [`flat_params`].
pub fn set_flat_params(c: &mut Controllers, flat: &[f32]) -> Result<()> {
    let total: usize = c.params.named().iter().map(|(_, t)| t.numel()).sum();
    if flat.len() != total {
        return Err(Error::shape("set_flat_params", &[total], &[flat.len()]));
    }
    let mut off = 0;
    for t in c.params.leaves_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(())
}

/// Total loss and its flattened controller gradient for one pass.
pub fn loss_and_grad(
    cfg: &ModelConfig,
    dense: &DenseWeights,
    ctl: &Controllers,
    tokens: &[u32],
    teacher: &Tensor,
    rng: &mut GumbelRng,
    relax: Relax,
) -> Result<(LossReport, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let opts = PassOptions {
        relax,
        trainable: true,
        ..PassOptions::default()
    };
    let pass = tomoe_forward(&mut g, cfg, dense, ctl, tokens, rng, &opts)?;
    let obj = objective(&mut g, cfg, &pass.masks, pass.logits, teacher, relax)?;
    let report = obj.report(&g, cfg);
    if !report.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss components kd={} r_p={} r_u={} r_l={}; widths mlp={:?} mha={:?} qk={:?}",
            report.kd,
            report.r_p,
            report.r_u,
            report.r_l,
            report.widths.mlp,
            report.widths.mha,
            report.widths.qk
        )));
    }
    let mut grads = g.backward(obj.total)?;
    let vars = pass.controllers.all();
    Ok((report, vars.into_iter().map(|v| grads.take(v)).collect()))
}

/// Smooth surrogate of the total loss (no noise, no rounding) with its
/// gradient flattened like [`flat_params`]; the target of gradient checks.
pub fn surrogate_loss(
    cfg: &ModelConfig,
    dense: &DenseWeights,
    ctl: &Controllers,
    tokens: &[u32],
    teacher: &Tensor,
) -> Result<(f32, Vec<f32>)> {
    let mut rng = GumbelRng::noiseless();
    let (rep, grads) = loss_and_grad(cfg, dense, ctl, tokens, teacher, &mut rng, Relax::Smooth)?;
    let flat = ctl
        .params
        .named()
        .iter()
        .zip(grads)
        .flat_map(|((_, t), g)| match g {
            Some(g) => g.into_data(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    Ok((rep.total as f32, flat))
}

/// Controller training against a frozen backbone.
pub struct Trainer<'a> {
    cfg: &'a ModelConfig,
    dense: &'a DenseWeights,
    tc: TrainConfig,
    pub controllers: Controllers,
    opt: AdamW,
    noise: GumbelRng,
    windows: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: &'a ModelConfig,
        dense: &'a DenseWeights,
        controllers: Controllers,
        tc: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if tc.seq_len == 0 || tc.seq_len > cfg.max_seq {
            return Err(Error::Config(format!(
                "seq_len {} must be in 1..={}",
                tc.seq_len, cfg.max_seq
            )));
        }
        if tc.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(Trainer {
            cfg,
            dense,
            opt: AdamW::new(tc.lr, tc.weight_decay),
            noise: GumbelRng::new(tc.seed ^ 0x9e37_79b9_7f4a_7c15, NoiseMode::Noisy),
            windows: ChaCha8Rng::seed_from_u64(tc.seed),
            tc,
            controllers,
        })
    }

    pub fn with_noise(mut self, noise: GumbelRng) -> Self {
        self.noise = noise;
        self
    }

    /// One self-distillation step: teacher logits from the dense pass,
    /// student logits from the masked pass, then one update of the
    /// controller parameters only.
    pub fn step(&mut self, tokens: &[u32]) -> Result<LossReport> {
        let teacher = self.dense.logits(self.cfg, tokens)?;
        let (report, grads) = loss_and_grad(
            self.cfg,
            self.dense,
            &self.controllers,
            tokens,
            &teacher,
            &mut self.noise,
            Relax::Straight,
        )?;
        if let Some(i) = grads
            .iter()
            .position(|g| g.as_ref().is_some_and(|g| g.data().iter().any(|v| !v.is_finite())))
        {
            let name = self.controllers.params.named().swap_remove(i).0;
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.opt.update(self.controllers.params.leaves_mut(), &grads)?;
        Ok(report)
    }

    /// Runs every iteration on random corpus windows, emitting one log row
    /// per interval.
    pub fn run(&mut self, corpus: &Corpus, mut on_log: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
        if corpus.min_source_len() < self.tc.seq_len {
            return Err(Error::invalid(
                "train",
                format!(
                    "corpus source shorter ({} tokens) than the sequence length {}",
                    corpus.min_source_len(),
                    self.tc.seq_len
                ),
            ));
        }
        let mut rows = Vec::new();
        let mut pending = Vec::with_capacity(self.tc.log_every);
        for it in 1..=self.tc.iterations {
            let (_, window) = corpus.sample_window(&mut self.windows, self.tc.seq_len)?;
            let report = self
                .step(&window)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("iteration {it}: {msg}")),
                    other => other,
                })?;
            pending.push(report);
            if it % self.tc.log_every == 0 || it == self.tc.iterations {
                let row = LogRow::mean(it, &pending);
                on_log(&row);
                rows.push(row);
                pending.clear();
            }
        }
        Ok(rows)
    }
}

/// Next-token cross-entropy over `logits: [T × V]`.
pub fn lm_loss(g: &mut Graph, logits: Var, targets: &[u32]) -> Result<Var> {
    let ls = g.log_softmax(logits);
    let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let picked = g.gather(ls, &ids)?;
    let m = g.mean_all(picked);
    Ok(g.scale(m, -1.0))
}

/// Trains a dense backbone as a byte-level language model.
pub fn pretrain(
    cfg: &ModelConfig,
    pc: &PretrainConfig,
    corpus: &Corpus,
    mut on_log: impl FnMut(usize, f64),
) -> Result<DenseWeights> {
    if pc.seq_len == 0 || pc.seq_len > cfg.max_seq {
        return Err(Error::Config(format!("seq_len {} must be in 1..={}", pc.seq_len, cfg.max_seq)));
    }
    let mut weights = DenseWeights::init(cfg, pc.seed)?;
    let mut opt = AdamW::new(pc.lr, pc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed.wrapping_add(1));
    let mut acc = 0.0;
    let mut n = 0;
    for step in 1..=pc.steps {
        let (_, window) = corpus.sample_window(&mut rng, pc.seq_len + 1)?;
        let mut g = Graph::new();
        let vars = weights.register(&mut g, true);
        let logits = forward(&mut g, cfg, &vars, &window[..pc.seq_len], &mut NoMasks)?;
        let loss = lm_loss(&mut g, logits, &window[1..])?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        let mut grads = g.backward(loss)?;
        let grads: Vec<Option<Tensor>> = vars.all().into_iter().map(|v| grads.take(v)).collect();
        opt.lr = pc.lr * (step as f32 / pc.warmup.max(1) as f32).min(1.0);
        opt.update(weights.tensors_mut(), &grads)?;
        acc += value;
        n += 1;
        if step % pc.log_every.max(1) == 0 || step == pc.steps {
            on_log(step, acc / n as f64);
            acc = 0.0;
            n = 0;
        }
    }
    Ok(weights)
}
