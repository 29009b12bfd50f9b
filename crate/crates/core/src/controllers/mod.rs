//! Trainable conversion modules: the hypernetwork that emits expert
//! embeddings, and the per-layer routers and projection heads.

pub mod gumbel;
mod hypernet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};

pub use gumbel::{argmax, round_half_up, st_gumbel_sigmoid, st_gumbel_softmax};
pub use gumbel::{GumbelRng, NoiseMode, Relax};
pub use hypernet::hypernet_forward;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;

/// `LayerNorm → GELU → Linear(+bias)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjD<T> {
    pub gamma: T,
    pub beta: T,
    pub w: T,
    pub b: T,
}

/// One direction of a GRU with PyTorch gate layout `[r | z | n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gru<T> {
    pub w_ih: T,
    pub w_hh: T,
    pub b_ih: T,
    pub b_hh: T,
}

/// Linear read-out from the recurrent states to one layer slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub w: T,
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperNet<T> {
    pub fwd: Gru<T>,
    pub bwd: Gru<T>,
    /// Slot `2l` feeds attention of block `l`, slot `2l + 1` its MLP.
    pub heads: Vec<Head<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCtl<T> {
    /// `[d × N]`, no bias.
    pub router: T,
    /// `[d × d_e]`, no bias.
    pub proj_e: T,
    /// Per-token value/output scores, width `d/H`.
    pub proj_d: ProjD<T>,
    /// Static query/key scores, width `d/(2H)`.
    pub proj_d0: ProjD<T>,
    /// Expert channel scores, width `d_mid`.
    pub proj_mlp: ProjD<T>,
}

/// All trainable parameters, generic over storage (tensors or tape vars).
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerSet<T> {
    pub hyper: HyperNet<T>,
    pub layers: Vec<LayerCtl<T>>,
}

/// Optimiser groups of the trainable set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    HyperNet,
    Router,
    ProjMha,
    ProjMlp,
}

impl<T> ProjD<T> {
    fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T) -> U) -> ProjD<U> {
        ProjD {
            gamma: f(&format!("{prefix}/gamma"), &self.gamma),
            beta: f(&format!("{prefix}/beta"), &self.beta),
            w: f(&format!("{prefix}/w"), &self.w),
            b: f(&format!("{prefix}/b"), &self.b),
        }
    }

    fn each_mut(&mut self) -> [&mut T; 4] {
        [&mut self.gamma, &mut self.beta, &mut self.w, &mut self.b]
    }

    fn into_each(self) -> [T; 4] {
        [self.gamma, self.beta, self.w, self.b]
    }
}

impl<T> Gru<T> {
    fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T) -> U) -> Gru<U> {
        Gru {
            w_ih: f(&format!("{prefix}/w_ih"), &self.w_ih),
            w_hh: f(&format!("{prefix}/w_hh"), &self.w_hh),
            b_ih: f(&format!("{prefix}/b_ih"), &self.b_ih),
            b_hh: f(&format!("{prefix}/b_hh"), &self.b_hh),
        }
    }

    fn each_mut(&mut self) -> [&mut T; 4] {
        [&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh]
    }

    fn into_each(self) -> [T; 4] {
        [self.w_ih, self.w_hh, self.b_ih, self.b_hh]
    }
}

impl<T> ControllerSet<T> {
    /// Rebuilds the set leaf by leaf, visiting in a fixed order with a
    /// stable name per leaf.
    pub fn map<'a, U>(&'a self, f: &mut dyn FnMut(&str, &'a T) -> U) -> ControllerSet<U> {
        let hyper = HyperNet {
            fwd: self.hyper.fwd.map("hyper/fwd", f),
            bwd: self.hyper.bwd.map("hyper/bwd", f),
            heads: self
                .hyper
                .heads
                .iter()
                .enumerate()
                .map(|(s, h)| Head {
                    w: f(&format!("hyper/head.{s}/w"), &h.w),
                    b: f(&format!("hyper/head.{s}/b"), &h.b),
                })
                .collect(),
        };
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, c)| LayerCtl {
                router: f(&format!("layer.{l}/router"), &c.router),
                proj_e: f(&format!("layer.{l}/proj_e"), &c.proj_e),
                proj_d: c.proj_d.map(&format!("layer.{l}/proj_d"), f),
                proj_d0: c.proj_d0.map(&format!("layer.{l}/proj_d0"), f),
                proj_mlp: c.proj_mlp.map(&format!("layer.{l}/proj_mlp"), f),
            })
            .collect();
        ControllerSet { hyper, layers }
    }

    /// Mutable leaves in the same order as [`Self::map`].
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = Vec::new();
        out.extend(self.hyper.fwd.each_mut());
        out.extend(self.hyper.bwd.each_mut());
        for h in &mut self.hyper.heads {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        for c in &mut self.layers {
            out.push(&mut c.router);
            out.push(&mut c.proj_e);
            out.extend(c.proj_d.each_mut());
            out.extend(c.proj_d0.each_mut());
            out.extend(c.proj_mlp.each_mut());
        }
        out
    }

    /// Leaves by value in the same order as [`Self::map`].
    pub fn into_leaves(self) -> Vec<T> {
        let mut out = Vec::new();
        out.extend(self.hyper.fwd.into_each());
        out.extend(self.hyper.bwd.into_each());
        for h in self.hyper.heads {
            out.push(h.w);
            out.push(h.b);
        }
        for c in self.layers {
            out.push(c.router);
            out.push(c.proj_e);
            out.extend(c.proj_d.into_each());
            out.extend(c.proj_d0.into_each());
            out.extend(c.proj_mlp.into_each());
        }
        out
    }

    /// `(name, leaf)` pairs in visiting order.
    pub fn named(&self) -> Vec<(String, &T)> {
        self.map(&mut |name, t| (name.to_string(), t)).into_leaves()
    }
}

/// Group of a leaf given its name from [`ControllerSet::map`].
pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("hyper/") {
        ParamGroup::HyperNet
    } else if name.ends_with("/router") {
        ParamGroup::Router
    } else if name.contains("/proj_mlp/") {
        ParamGroup::ProjMlp
    } else {
        ParamGroup::ProjMha
    }
}

/// Controller weights plus the frozen hypernetwork input `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Controllers {
    /// `[N × hn_input]`, drawn once and never updated.
    pub z: Tensor,
    pub params: ControllerSet<Tensor>,
}

/// Controllers registered on a tape.
#[derive(Clone, Debug)]
pub struct ControllerVars {
    pub z: Var,
    pub set: ControllerSet<Var>,
}

impl ControllerVars {
    pub fn all(&self) -> Vec<Var> {
        self.set.clone().into_leaves()
    }
}

fn proj_d_init(rng: &mut ChaCha8Rng, d_e: usize, out: usize) -> ProjD<Tensor> {
    // small read-out keeps every score far above −b, so all masks start at one
    let normal = Normal::new(0.0f32, 0.02).expect("valid std");
    ProjD {
        gamma: Tensor::ones(&[d_e]),
        beta: Tensor::zeros(&[d_e]),
        w: random(rng, &[d_e, out], &normal),
        b: Tensor::zeros(&[out]),
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], dist: &impl Distribution<f32>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl Controllers {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, h, d_e, d) = (cfg.experts, cfg.hn_hidden, cfg.expert_dim, cfg.d_model);
        let z = {
            let data = (0..n * cfg.hn_input)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            Tensor::new(vec![n, cfg.hn_input], data)?
        };
        let k = 1.0 / (h as f32).sqrt();
        let gru_dist = Uniform::new_inclusive(-k, k).expect("valid range");
        let gru = |rng: &mut ChaCha8Rng| Gru {
            w_ih: random(rng, &[cfg.hn_input, 3 * h], &gru_dist),
            w_hh: random(rng, &[h, 3 * h], &gru_dist),
            b_ih: random(rng, &[3 * h], &gru_dist),
            b_hh: random(rng, &[3 * h], &gru_dist),
        };
        let fwd = gru(&mut rng);
        let bwd = gru(&mut rng);
        let kh = 1.0 / ((2 * h) as f32).sqrt();
        let head_dist = Uniform::new_inclusive(-kh, kh).expect("valid range");
        let heads = (0..cfg.slots())
            .map(|_| Head {
                w: random(&mut rng, &[2 * h, d_e], &head_dist),
                b: Tensor::zeros(&[d_e]),
            })
            .collect();
        let router_dist = Normal::new(0.0f32, 0.02).expect("valid std");
        let ke = 1.0 / (d as f32).sqrt();
        let proj_e_dist = Uniform::new_inclusive(-ke, ke).expect("valid range");
        let layers = (0..cfg.layers)
            .map(|_| LayerCtl {
                router: random(&mut rng, &[d, n], &router_dist),
                proj_e: random(&mut rng, &[d, d_e], &proj_e_dist),
                proj_d: proj_d_init(&mut rng, d_e, cfg.head_dim()),
                proj_d0: proj_d_init(&mut rng, d_e, cfg.rope_half()),
                proj_mlp: proj_d_init(&mut rng, d_e, cfg.d_mid),
            })
            .collect();
        Ok(Controllers {
            z,
            params: ControllerSet {
                hyper: HyperNet { fwd, bwd, heads },
                layers,
            },
        })
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> ControllerVars {
        let z = g.constant(self.z.clone());
        let set = self.params.map(&mut |_, t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        });
        ControllerVars { z, set }
    }

    /// Freshly initialised controllers with randomised read-outs, so that
    /// noiseless masks are partial and experts differ. Stands in for a
    /// trained set in checks that need no training.
    pub fn randomized(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut c = Controllers::init(cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let spread = Normal::new(0.0f32, 0.5).expect("valid std");
        let offset = Normal::new(-cfg.gumbel_bias, 1.0).expect("valid std");
        let router = Normal::new(0.0f32, 1.0).expect("valid std");
        for l in &mut c.params.layers {
            l.router = random(&mut rng, l.router.shape(), &router);
            for p in [&mut l.proj_d, &mut l.proj_d0, &mut l.proj_mlp] {
                p.w = random(&mut rng, p.w.shape(), &spread);
                p.b = random(&mut rng, p.b.shape(), &offset);
            }
        }
        Ok(c)
    }

    /// Named tensors for serialisation, `z` first.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("z".to_string(), &self.z)];
        out.extend(self.params.named());
        out
    }

    /// Rebuilds from named tensors, checking every shape against `cfg`.
    pub fn from_named(
        cfg: &ModelConfig,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let reference = Controllers::init(cfg, 0)?;
        let mut fetch = |name: &str, want: &Tensor| -> Result<Tensor> {
            let t = lookup(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != want.shape() {
                return Err(Error::shape("load", want.shape(), t.shape()));
            }
            Ok(t)
        };
        let z = fetch("z", &reference.z)?;
        let mut err = None;
        let params = reference.params.map(&mut |name, want| {
            fetch(name, want).unwrap_or_else(|e| {
                err.get_or_insert(e);
                want.clone()
            })
        });
        match err {
            Some(e) => Err(e),
            None => Ok(Controllers { z, params }),
        }
    }

    /// Number of trainable scalars per group.
    pub fn census(&self) -> Vec<(ParamGroup, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for (name, t) in self.params.named() {
            *counts.entry(group_of(&name)).or_insert(0) += t.numel();
        }
        counts.into_iter().collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Closed-form trainable parameter count from the module shapes.
pub fn controller_param_count(cfg: &ModelConfig) -> usize {
    let (n, h, d_e, d) = (cfg.experts, cfg.hn_hidden, cfg.expert_dim, cfg.d_model);
    let gru = cfg.hn_input * 3 * h + h * 3 * h + 6 * h;
    let hyper = 2 * gru + cfg.slots() * (2 * h * d_e + d_e);
    let proj_d = |out: usize| 2 * d_e + d_e * out + out;
    let layer = d * n + d * d_e + proj_d(cfg.head_dim()) + proj_d(cfg.rope_half()) + proj_d(cfg.d_mid);
    hyper + cfg.layers * layer
}

/// Applies `LayerNorm → GELU → Linear` to `x: [r × d_e]`.
pub fn proj_d_forward(g: &mut Graph, p: &ProjD<Var>, x: Var) -> Result<Var> {
    let y = g.layer_norm(x, p.gamma, p.beta, LN_EPS)?;
    let y = g.gelu(y);
    let y = g.matmul(y, p.w)?;
    g.add(y, p.b)
}

/// Outputs of MLP routing for one layer.
#[derive(Clone, Copy, Debug)]
pub struct MlpRoute {
    /// Router logits before discretisation, `[T × N]`.
    pub logits: Var,
    /// One-hot routing, `[T × N]`.
    pub gate: Var,
    /// Expert masks `[N × d_mid]`.
    pub experts: Var,
    /// Mask of each token's routed expert, `[T × d_mid]`.
    pub tokens: Var,
}

/// Outputs of attention routing for one layer.
#[derive(Clone, Copy, Debug)]
pub struct MhaRoute {
    /// Static query/key mask `[1 × d/(2H)]`.
    pub s0: Var,
    /// `concat(s0, s0)`, `[1 × d/H]`.
    pub s0_expanded: Var,
    /// Per-token value/output masks `[T × d/H]`.
    pub tokens: Var,
}

/// Noise and relaxation settings shared by every routing call of a pass.
pub struct RouteCtx<'a> {
    pub cfg: &'a ModelConfig,
    pub rng: &'a mut GumbelRng,
    pub relax: Relax,
}

impl RouteCtx<'_> {
    fn gs(&mut self, g: &mut Graph, logits: Var) -> Result<Var> {
        let noise = self.rng.sample(g.shape(logits));
        self.gs_with(g, logits, noise)
    }

    fn gs_with(&mut self, g: &mut Graph, logits: Var, noise: Option<Tensor>) -> Result<Var> {
        st_gumbel_sigmoid(g, logits, noise, self.cfg.gumbel_bias, self.cfg.tau, self.relax)
    }
}

/// Pre-sigmoid expert scores `Proj_D^MLP(E)`, `[N × d_mid]`.
pub fn expert_scores(g: &mut Graph, ctl: &LayerCtl<Var>, e: Var) -> Result<Var> {
    proj_d_forward(g, &ctl.proj_mlp, e)
}

/// Routes `x: [T × d]` to one expert per token and builds the token masks
/// `s = ST-GS(Proj_D(G·E))`. The Gumbel draw is made per expert channel and
/// shared by every token routed to that expert, so each token row equals
/// its expert's row of `experts`.
pub fn route_mlp(
    g: &mut Graph,
    ctx: &mut RouteCtx<'_>,
    ctl: &LayerCtl<Var>,
    x: Var,
    e: Var,
) -> Result<MlpRoute> {
    let logits = g.matmul(x, ctl.router)?;
    let noise = ctx.rng.sample(g.shape(logits));
    let gate = st_gumbel_softmax(g, logits, noise, ctx.cfg.tau, ctx.relax)?;

    let scores = expert_scores(g, ctl, e)?;
    let expert_noise = ctx.rng.sample(g.shape(scores));
    let token_noise = match &expert_noise {
        Some(n) => Some(g.value(gate).matmul(n)?),
        None => None,
    };
    let experts = ctx.gs_with(g, scores, expert_noise)?;

    let mixed = g.matmul(gate, e)?;
    let token_scores = proj_d_forward(g, &ctl.proj_mlp, mixed)?;
    let tokens = ctx.gs_with(g, token_scores, token_noise)?;
    Ok(MlpRoute {
        logits,
        gate,
        experts,
        tokens,
    })
}

/// Pre-sigmoid per-token value/output scores
/// `Proj_D(Proj_E(x) + mean(E))`, `[T × d/H]`.
pub fn value_scores(g: &mut Graph, ctl: &LayerCtl<Var>, x: Var, e_mean: Var) -> Result<Var> {
    let p = g.matmul(x, ctl.proj_e)?;
    let p = g.add(p, e_mean)?;
    proj_d_forward(g, &ctl.proj_d, p)
}

/// Pre-sigmoid static query/key scores `Proj_D0(mean(E))`, `[1 × d/(2H)]`.
pub fn qk_scores(g: &mut Graph, ctl: &LayerCtl<Var>, e_mean: Var) -> Result<Var> {
    let w = g.shape(e_mean)[0];
    let row = g.reshape(e_mean, vec![1, w])?;
    proj_d_forward(g, &ctl.proj_d0, row)
}

/// Attention masks for `x: [T × d]`: the input-independent `s0` and the
/// per-token `s_t`.
pub fn route_mha(
    g: &mut Graph,
    ctx: &mut RouteCtx<'_>,
    ctl: &LayerCtl<Var>,
    x: Var,
    e: Var,
) -> Result<MhaRoute> {
    let e_mean = g.mean_rows(e);
    let s0_scores = qk_scores(g, ctl, e_mean)?;
    let s0 = ctx.gs(g, s0_scores)?;
    let s0_expanded = rope_mask_expand(g, s0)?;
    let scores = value_scores(g, ctl, x, e_mean)?;
    let tokens = ctx.gs(g, scores)?;
    Ok(MhaRoute {
        s0,
        s0_expanded,
        tokens,
    })
}

/// Duplicates a half-width query/key mask so both rotation partners of
/// every rotary pair share a decision: `[1 × k] → [1 × 2k]`.
pub fn rope_mask_expand(g: &mut Graph, s0: Var) -> Result<Var> {
    g.concat_cols(&[s0, s0])
}

#[cfg(test)]
mod tests;
