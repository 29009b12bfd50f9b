//! The instrumented forward pass: the frozen backbone with controller masks
//! inserted on the attention query/key, value/output and MLP middle paths.

use crate::autograd::{Graph, Var};
use crate::controllers::{
    argmax, expert_scores, hypernet_forward, qk_scores, route_mha, route_mlp, rope_mask_expand,
    value_scores, ControllerVars, Controllers, GumbelRng, MhaRoute, MlpRoute, Relax, RouteCtx,
};
use crate::error::Result;
use crate::model::decoder::{forward, AttnMasks, BackboneVars, MaskSource};
use crate::model::{DenseWeights, ModelConfig};
use crate::runtime::finalize::{binarize, equalize_experts, top_k_mask};
use crate::tensor::Tensor;

/// How masks are produced from the controllers.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskPolicy {
    /// Straight-through Gumbel thresholds, as during training.
    Threshold,
    /// Inference masks: width-equalised experts picked by router argmax,
    /// thresholded `s0`, and per-token top-`K` value/output selection with
    /// one `K` per layer.
    Finalized { value_k: Vec<usize> },
}

/// Every mask of one forward pass, as tape variables.
#[derive(Clone, Debug, Default)]
pub struct MaskBundle {
    pub mlp: Vec<MlpRoute>,
    pub mha: Vec<MhaRoute>,
}

struct ControllerMasks<'a, 'r> {
    ctx: RouteCtx<'r>,
    ctl: &'a ControllerVars,
    experts: Vec<Var>,
    policy: &'a MaskPolicy,
    bundle: MaskBundle,
}

impl ControllerMasks<'_, '_> {
    fn finalized_mlp(&mut self, g: &mut Graph, layer: usize, x: Var) -> Result<MlpRoute> {
        let cfg = self.ctx.cfg;
        let ctl = &self.ctl.set.layers[layer];
        let logits = g.matmul(x, ctl.router)?;
        let scores = expert_scores(g, ctl, self.experts[2 * layer + 1])?;
        let masks = equalize_experts(g.value(scores), cfg.gumbel_bias, cfg.tau)?;
        let lv = g.value(logits);
        let n = lv.cols();
        let mut gate = vec![0.0; lv.numel()];
        let mut rows = Vec::with_capacity(lv.rows());
        for t in 0..lv.rows() {
            let i = argmax(lv.row(t));
            gate[t * n + i] = 1.0;
            rows.push(i);
        }
        let tokens = masks.select_rows(&rows);
        let gate = g.constant(Tensor::new(lv.shape().to_vec(), gate)?);
        Ok(MlpRoute {
            logits,
            gate,
            experts: g.constant(masks),
            tokens: g.constant(tokens),
        })
    }

    fn finalized_mha(&mut self, g: &mut Graph, layer: usize, x: Var, k: usize) -> Result<MhaRoute> {
        let cfg = self.ctx.cfg;
        let ctl = &self.ctl.set.layers[layer];
        let e_mean = g.mean_rows(self.experts[2 * layer]);
        let s0 = qk_scores(g, ctl, e_mean)?;
        let s0 = g.constant(binarize(g.value(s0), cfg.gumbel_bias, cfg.tau));
        let s0_expanded = rope_mask_expand(g, s0)?;
        let scores = value_scores(g, ctl, x, e_mean)?;
        let tokens = g.constant(top_k_mask(g.value(scores), k));
        Ok(MhaRoute {
            s0,
            s0_expanded,
            tokens,
        })
    }
}

impl MaskSource for ControllerMasks<'_, '_> {
    fn attention(&mut self, g: &mut Graph, layer: usize, x: Var) -> Result<AttnMasks> {
        let route = match self.policy {
            MaskPolicy::Threshold => {
                let e = self.experts[2 * layer];
                route_mha(g, &mut self.ctx, &self.ctl.set.layers[layer], x, e)?
            }
            MaskPolicy::Finalized { value_k } => {
                let k = value_k[layer];
                self.finalized_mha(g, layer, x, k)?
            }
        };
        self.bundle.mha.push(route);
        Ok(AttnMasks {
            qk: Some(route.s0_expanded),
            value: Some(route.tokens),
        })
    }

    fn mlp(&mut self, g: &mut Graph, layer: usize, x: Var) -> Result<Option<Var>> {
        let route = match self.policy {
            MaskPolicy::Threshold => {
                let e = self.experts[2 * layer + 1];
                route_mlp(g, &mut self.ctx, &self.ctl.set.layers[layer], x, e)?
            }
            MaskPolicy::Finalized { .. } => self.finalized_mlp(g, layer, x)?,
        };
        self.bundle.mlp.push(route);
        Ok(Some(route.tokens))
    }
}

/// Result of [`tomoe_forward`].
pub struct TomoePass {
    pub logits: Var,
    pub masks: MaskBundle,
    pub controllers: ControllerVars,
    pub backbone: BackboneVars,
}

/// Options for one instrumented pass.
pub struct PassOptions<'a> {
    pub relax: Relax,
    pub policy: &'a MaskPolicy,
    /// Register controller weights as trainable leaves.
    pub trainable: bool,
}

impl Default for PassOptions<'_> {
    fn default() -> Self {
        PassOptions {
            relax: Relax::Straight,
            policy: &MaskPolicy::Threshold,
            trainable: false,
        }
    }
}

/// Runs the hypernetwork once, then the masked backbone on `tokens`.
pub fn tomoe_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    dense: &DenseWeights,
    controllers: &Controllers,
    tokens: &[u32],
    rng: &mut GumbelRng,
    opts: &PassOptions<'_>,
) -> Result<TomoePass> {
    let backbone = dense.register(g, false);
    let ctl = controllers.register(g, opts.trainable);
    let experts = hypernet_forward(g, &ctl)?;
    let mut src = ControllerMasks {
        ctx: RouteCtx {
            cfg,
            rng,
            relax: opts.relax,
        },
        ctl: &ctl,
        experts,
        policy: opts.policy,
        bundle: MaskBundle::default(),
    };
    let logits = forward(g, cfg, &backbone, tokens, &mut src)?;
    let masks = src.bundle;
    Ok(TomoePass {
        logits,
        masks,
        controllers: ctl,
        backbone,
    })
}

/// Logits of a noiseless evaluation pass under `policy`.
pub fn tomoe_logits(
    cfg: &ModelConfig,
    dense: &DenseWeights,
    controllers: &Controllers,
    tokens: &[u32],
    policy: &MaskPolicy,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let opts = PassOptions {
        policy,
        ..PassOptions::default()
    };
    let pass = tomoe_forward(
        &mut g,
        cfg,
        dense,
        controllers,
        tokens,
        &mut GumbelRng::noiseless(),
        &opts,
    )?;
    Ok(g.value(pass.logits).clone())
}
