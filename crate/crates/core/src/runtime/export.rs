//! Freezing trained controllers into a sliced mixture-of-experts model.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::finalize::{binarize, compute_k, equalize_experts, kept};
use crate::autograd::Graph;
use crate::controllers::{
    expert_scores, hypernet_forward, qk_scores, Controllers, GumbelRng, ProjD,
};
use crate::error::{Error, Result};
use crate::io::{meta_field, Container};
use crate::masked::{tomoe_forward, PassOptions};
use crate::model::{DenseWeights, ModelConfig, RopeTable};
use crate::objectives::{active_param_count, total_param_count, WidthVector};
use crate::tensor::Tensor;

pub const EXPORT_KIND: &str = "carve-moe";

/// Controller weights that survive export: `L·d·d_e + L·d_e·(d/H) + L·d·N`
/// (projection weights and routers, biases and norms excluded).
pub fn overhead_params(layers: u64, d: u64, heads: u64, d_e: u64, experts: u64) -> u64 {
    layers * d * d_e + layers * d_e * (d / heads) + layers * d * experts
}

pub fn overhead_for(cfg: &ModelConfig) -> u64 {
    overhead_params(
        cfg.layers as u64,
        cfg.d_model as u64,
        cfg.heads as u64,
        cfg.expert_dim as u64,
        cfg.experts as u64,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    /// Kept MLP channels of each expert, ascending.
    pub experts: Vec<Vec<usize>>,
    /// Common expert width after equalisation.
    pub expert_width: usize,
    /// Surviving rotary pair indices of every head.
    pub qk_pairs: Vec<usize>,
    /// Per-token value/output channels kept per head.
    pub value_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub layers: Vec<LayerManifest>,
    pub calibration_sequences: usize,
    pub overhead_params: u64,
    pub active_params: f64,
    pub total_params: u64,
    pub active_ratio: f64,
}

impl Manifest {
    pub fn widths(&self) -> WidthVector {
        WidthVector {
            mlp: self.layers.iter().map(|l| l.expert_width as f32).collect(),
            mha: self.layers.iter().map(|l| l.value_k as f32).collect(),
            qk: self.layers.iter().map(|l| l.qk_pairs.len() as f32).collect(),
        }
    }

    /// Active share of every backbone weight, counting embeddings, norms and
    /// the output head as always active on both sides.
    pub fn whole_model_ratio(&self) -> f64 {
        let m = &self.model;
        let fixed = (2 * m.vocab * m.d_model + (2 * m.layers + 1) * m.d_model) as f64;
        (self.active_params + fixed) / (self.total_params as f64 + fixed)
    }

    /// Structured-text rendering for humans.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    /// `[d × d′]`
    pub w_gate: Tensor,
    /// `[d × d′]`
    pub w_up: Tensor,
    /// `[d′ × d]`
    pub w_down: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    /// `[d × N]`
    pub router: Tensor,
    /// `[N × d_mid]` binary, equal row sums.
    pub expert_masks: Tensor,
    pub experts: Vec<Expert>,
    /// Expanded query/key mask `[d/H]`.
    pub qk_mask: Tensor,
    /// Query/key weights restricted to the surviving columns of every head,
    /// `[d × H·2k0]`, each head laid out as `[pairs | pairs + d/(2H)]`.
    pub wq: Tensor,
    pub wk: Tensor,
    pub rope: RopeTable,
    pub proj_e: Tensor,
    /// `(1/N)·1ᵀE`, added after `proj_e`.
    pub proj_bias: Tensor,
    pub proj_d: ProjD<Tensor>,
}

/// Everything the two inference paths need. The full backbone is kept for
/// the value/output path and for the mask-based evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeExport {
    pub manifest: Manifest,
    pub backbone: DenseWeights,
    pub layers: Vec<MoeLayer>,
}

/// Columns of a `[d × d]` query/key matrix kept by `pairs`, head by head.
pub fn qk_columns(heads: usize, head_dim: usize, pairs: &[usize]) -> Vec<usize> {
    let half = head_dim / 2;
    let mut cols = Vec::with_capacity(heads * 2 * pairs.len());
    for h in 0..heads {
        cols.extend(pairs.iter().map(|&p| h * head_dim + p));
        cols.extend(pairs.iter().map(|&p| h * head_dim + half + p));
    }
    cols
}

fn slice_expert(b: &crate::model::decoder::BlockWeights, keep: &[usize]) -> Expert {
    Expert {
        w_gate: b.w_gate.select_cols(keep),
        w_up: b.w_up.select_cols(keep),
        w_down: b.w_down.select_rows(keep),
    }
}

/// Finalises trained controllers against `dense`. `calib` supplies the
/// sequences over which each layer's value/output `K` is averaged.
pub fn export(
    cfg: &ModelConfig,
    dense: &DenseWeights,
    ctl: &Controllers,
    calib: &[Vec<u32>],
) -> Result<MoeExport> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::invalid("export", "no calibration sequences"));
    }
    let (dh, half) = (cfg.head_dim(), cfg.rope_half());
    let mut g = Graph::new();
    let vars = ctl.register(&mut g, false);
    let slots = hypernet_forward(&mut g, &vars)?;

    let mut row_sums: Vec<Vec<f32>> = vec![Vec::new(); cfg.layers];
    for seq in calib {
        let mut cg = Graph::new();
        let pass = tomoe_forward(
            &mut cg,
            cfg,
            dense,
            ctl,
            seq,
            &mut GumbelRng::noiseless(),
            &PassOptions::default(),
        )?;
        for (l, route) in pass.masks.mha.iter().enumerate() {
            let m = cg.value(route.tokens);
            row_sums[l].extend((0..m.rows()).map(|t| m.row(t).iter().sum::<f32>()));
        }
    }

    let full_rope = RopeTable::new(dh)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut manifests = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let lc = &vars.set.layers[l];
        let b = &dense.blocks[l];

        let scores = expert_scores(&mut g, lc, slots[2 * l + 1])?;
        let masks = equalize_experts(g.value(scores), cfg.gumbel_bias, cfg.tau)
            .map_err(|e| Error::Degenerate(format!("layer {l}: {e}")))?;
        let kept_sets: Vec<Vec<usize>> = (0..cfg.experts).map(|i| kept(masks.row(i))).collect();
        let experts = kept_sets.iter().map(|k| slice_expert(b, k)).collect();

        let e_mean = g.mean_rows(slots[2 * l]);
        let s0 = qk_scores(&mut g, lc, e_mean)?;
        let s0 = binarize(g.value(s0), cfg.gumbel_bias, cfg.tau);
        let pairs = kept(s0.data());
        if pairs.is_empty() {
            return Err(Error::Degenerate(format!("layer {l}: query/key mask keeps nothing")));
        }
        let mut qk_mask = vec![0.0; dh];
        for &p in &pairs {
            qk_mask[p] = 1.0;
            qk_mask[p + half] = 1.0;
        }
        let cols = qk_columns(cfg.heads, dh, &pairs);
        let value_k = compute_k(&row_sums[l]).map_err(|e| Error::Degenerate(format!("layer {l}: {e}")))?;

        let p = &ctl.params.layers[l];
        manifests.push(LayerManifest {
            experts: kept_sets.clone(),
            expert_width: kept_sets[0].len(),
            qk_pairs: pairs.clone(),
            value_k,
        });
        layers.push(MoeLayer {
            router: p.router.clone(),
            expert_masks: masks,
            experts,
            qk_mask: Tensor::vector(qk_mask),
            wq: b.wq.select_cols(&cols),
            wk: b.wk.select_cols(&cols),
            rope: full_rope.subset(&pairs),
            proj_e: p.proj_e.clone(),
            proj_bias: g.value(e_mean).clone(),
            proj_d: p.proj_d.clone(),
        });
    }
    let manifest = build_manifest(cfg, manifests, calib.len());
    Ok(MoeExport {
        manifest,
        backbone: dense.clone(),
        layers,
    })
}

fn build_manifest(cfg: &ModelConfig, layers: Vec<LayerManifest>, calib: usize) -> Manifest {
    let mut m = Manifest {
        model: cfg.clone(),
        layers,
        calibration_sequences: calib,
        overhead_params: overhead_for(cfg),
        active_params: 0.0,
        total_params: total_param_count(cfg),
        active_ratio: 0.0,
    };
    m.active_params = active_param_count(&m.widths(), cfg);
    m.active_ratio = m.active_params / m.total_params as f64;
    m
}

impl MoeExport {
    pub fn cfg(&self) -> &ModelConfig {
        &self.manifest.model
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = json!({ "manifest": self.manifest });
        let mut c = Container::new(EXPORT_KIND, meta);
        for (name, t) in self.backbone.named() {
            c.insert(format!("backbone/{name}"), (*t).clone());
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("moe/layer.{l}");
            c.insert(format!("{p}/router"), layer.router.clone());
            c.insert(format!("{p}/expert_masks"), layer.expert_masks.clone());
            for (i, e) in layer.experts.iter().enumerate() {
                c.insert(format!("{p}/expert.{i}/w_gate"), e.w_gate.clone());
                c.insert(format!("{p}/expert.{i}/w_up"), e.w_up.clone());
                c.insert(format!("{p}/expert.{i}/w_down"), e.w_down.clone());
            }
            c.insert(format!("{p}/qk_mask"), layer.qk_mask.clone());
            c.insert(format!("{p}/wq"), layer.wq.clone());
            c.insert(format!("{p}/wk"), layer.wk.clone());
            c.insert(format!("{p}/proj_e"), layer.proj_e.clone());
            c.insert(format!("{p}/proj_bias"), layer.proj_bias.clone());
            c.insert(format!("{p}/proj_d/gamma"), layer.proj_d.gamma.clone());
            c.insert(format!("{p}/proj_d/beta"), layer.proj_d.beta.clone());
            c.insert(format!("{p}/proj_d/w"), layer.proj_d.w.clone());
            c.insert(format!("{p}/proj_d/b"), layer.proj_d.b.clone());
        }
        Ok(c)
    }

    /// Loads and checks every slice against the stored full weights.
    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(EXPORT_KIND)?;
        let manifest: Manifest = meta_field(&c.meta, "manifest")?;
        let cfg = &manifest.model;
        cfg.validate()?;
        if manifest.layers.len() != cfg.layers {
            return Err(Error::Format("manifest layer count disagrees with config".into()));
        }
        let backbone = DenseWeights::from_named(cfg, |n| c.tensors.get(&format!("backbone/{n}")).cloned())?;
        let (dh, half) = (cfg.head_dim(), cfg.rope_half());
        let full_rope = RopeTable::new(dh)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for (l, lm) in manifest.layers.iter().enumerate() {
            let p = format!("moe/layer.{l}");
            let get = |n: &str| c.get(&format!("{p}/{n}")).cloned();
            let b = &backbone.blocks[l];
            if lm.experts.len() != cfg.experts
                || lm.experts.iter().any(|k| k.len() != lm.expert_width || k.iter().any(|&i| i >= cfg.d_mid))
            {
                return Err(Error::Format(format!("layer {l}: malformed expert index lists")));
            }
            if lm.qk_pairs.is_empty() || lm.qk_pairs.iter().any(|&i| i >= half) || lm.value_k == 0 || lm.value_k > dh {
                return Err(Error::Format(format!("layer {l}: malformed attention selection")));
            }
            let mut experts = Vec::with_capacity(cfg.experts);
            for (i, keep) in lm.experts.iter().enumerate() {
                let e = Expert {
                    w_gate: get(&format!("expert.{i}/w_gate"))?,
                    w_up: get(&format!("expert.{i}/w_up"))?,
                    w_down: get(&format!("expert.{i}/w_down"))?,
                };
                if e != slice_expert(b, keep) {
                    return Err(Error::Format(format!("layer {l} expert {i}: slice disagrees with backbone")));
                }
                experts.push(e);
            }
            let cols = qk_columns(cfg.heads, dh, &lm.qk_pairs);
            let (wq, wk) = (get("wq")?, get("wk")?);
            if wq != b.wq.select_cols(&cols) || wk != b.wk.select_cols(&cols) {
                return Err(Error::Format(format!("layer {l}: query/key slice disagrees with backbone")));
            }
            let layer = MoeLayer {
                router: get("router")?,
                expert_masks: get("expert_masks")?,
                experts,
                qk_mask: get("qk_mask")?,
                wq,
                wk,
                rope: full_rope.subset(&lm.qk_pairs),
                proj_e: get("proj_e")?,
                proj_bias: get("proj_bias")?,
                proj_d: ProjD {
                    gamma: get("proj_d/gamma")?,
                    beta: get("proj_d/beta")?,
                    w: get("proj_d/w")?,
                    b: get("proj_d/b")?,
                },
            };
            check_shapes(cfg, l, &layer)?;
            layers.push(layer);
        }
        Ok(MoeExport {
            manifest,
            backbone,
            layers,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn check_shapes(cfg: &ModelConfig, l: usize, m: &MoeLayer) -> Result<()> {
    let (d, n, d_e, dh) = (cfg.d_model, cfg.experts, cfg.expert_dim, cfg.head_dim());
    let expect: [(&str, &Tensor, Vec<usize>); 8] = [
        ("router", &m.router, vec![d, n]),
        ("expert_masks", &m.expert_masks, vec![n, cfg.d_mid]),
        ("qk_mask", &m.qk_mask, vec![dh]),
        ("proj_e", &m.proj_e, vec![d, d_e]),
        ("proj_bias", &m.proj_bias, vec![d_e]),
        ("proj_d/gamma", &m.proj_d.gamma, vec![d_e]),
        ("proj_d/w", &m.proj_d.w, vec![d_e, dh]),
        ("proj_d/b", &m.proj_d.b, vec![dh]),
    ];
    for (name, t, shape) in expect {
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "layer {l} {name}: shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}
