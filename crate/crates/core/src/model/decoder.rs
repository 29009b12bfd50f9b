use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::rope::RopeTable;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: Arc<Tensor>,
    /// `[d × d]`, head `h` owns columns `h·d/H .. (h+1)·d/H`.
    pub wq: Arc<Tensor>,
    pub wk: Arc<Tensor>,
    pub wv: Arc<Tensor>,
    /// `[d × d]`, head `h` owns rows `h·d/H .. (h+1)·d/H`.
    pub wo: Arc<Tensor>,
    pub mlp_norm: Arc<Tensor>,
    pub w_gate: Arc<Tensor>,
    pub w_up: Arc<Tensor>,
    pub w_down: Arc<Tensor>,
}

/// Frozen weights of the dense model.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseWeights {
    pub embed: Arc<Tensor>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Arc<Tensor>,
    pub head: Arc<Tensor>,
}

const BLOCK_FIELDS: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down",
];

impl BlockWeights {
    fn fields(&self) -> [&Arc<Tensor>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }
}

impl DenseWeights {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let resid = Normal::new(0.0f32, 0.02 / (2.0 * cfg.layers as f32).sqrt()).expect("valid std");
        let mut draw = |shape: &[usize], dist: &Normal<f32>| -> Arc<Tensor> {
            let n = shape.iter().product();
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            Arc::new(Tensor::new(shape.to_vec(), data).expect("shape"))
        };
        let (d, m) = (cfg.d_model, cfg.d_mid);
        let embed = draw(&[cfg.vocab, d], &normal);
        let blocks = (0..cfg.layers)
            .map(|_| BlockWeights {
                attn_norm: Arc::new(Tensor::ones(&[d])),
                wq: draw(&[d, d], &normal),
                wk: draw(&[d, d], &normal),
                wv: draw(&[d, d], &normal),
                wo: draw(&[d, d], &resid),
                mlp_norm: Arc::new(Tensor::ones(&[d])),
                w_gate: draw(&[d, m], &normal),
                w_up: draw(&[d, m], &normal),
                w_down: draw(&[m, d], &resid),
            })
            .collect();
        let head = draw(&[d, cfg.vocab], &normal);
        Ok(DenseWeights {
            embed,
            blocks,
            final_norm: Arc::new(Tensor::ones(&[d])),
            head,
        })
    }

    /// Every tensor under a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, Arc<Tensor>)> {
        let mut out = vec![("embed".to_string(), Arc::clone(&self.embed))];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("blocks.{l}.{name}"), Arc::clone(t)));
            }
        }
        out.push(("final_norm".into(), Arc::clone(&self.final_norm)));
        out.push(("head".into(), Arc::clone(&self.head)));
        out
    }

    /// Rebuilds from [`Self::named`] output, checking every shape.
    pub fn from_named(
        cfg: &ModelConfig,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let reference = Self::shapes(cfg);
        let mut take = |name: &str| -> Result<Arc<Tensor>> {
            let t = lookup(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            let want = &reference
                .iter()
                .find(|(n, _)| n == name)
                .expect("known name")
                .1;
            if t.shape() != want.as_slice() {
                return Err(Error::shape("load", want, t.shape()));
            }
            Ok(Arc::new(t))
        };
        let embed = take("embed")?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut f = |n: &str| take(&format!("blocks.{l}.{n}"));
            blocks.push(BlockWeights {
                attn_norm: f("attn_norm")?,
                wq: f("wq")?,
                wk: f("wk")?,
                wv: f("wv")?,
                wo: f("wo")?,
                mlp_norm: f("mlp_norm")?,
                w_gate: f("w_gate")?,
                w_up: f("w_up")?,
                w_down: f("w_down")?,
            });
        }
        Ok(DenseWeights {
            embed,
            blocks,
            final_norm: take("final_norm")?,
            head: take("head")?,
        })
    }

    fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, m) = (cfg.d_model, cfg.d_mid);
        let mut out = vec![("embed".to_string(), vec![cfg.vocab, d])];
        for l in 0..cfg.layers {
            let shapes = [
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d, m],
                vec![d, m],
                vec![m, d],
            ];
            for (name, s) in BLOCK_FIELDS.iter().zip(shapes) {
                out.push((format!("blocks.{l}.{name}"), s));
            }
        }
        out.push(("final_norm".into(), vec![d]));
        out.push(("head".into(), vec![d, cfg.vocab]));
        out
    }

    /// Mutable tensors in [`Self::named`] order, unsharing storage as needed.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![Arc::make_mut(&mut self.embed)];
        for b in &mut self.blocks {
            for t in [
                &mut b.attn_norm,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.mlp_norm,
                &mut b.w_gate,
                &mut b.w_up,
                &mut b.w_down,
            ] {
                out.push(Arc::make_mut(t));
            }
        }
        out.push(Arc::make_mut(&mut self.final_norm));
        out.push(Arc::make_mut(&mut self.head));
        out
    }

    /// Puts every weight on the tape, trainable or frozen.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> BackboneVars {
        let mut reg = |t: &Arc<Tensor>| {
            if trainable {
                g.param((**t).clone())
            } else {
                g.constant_shared(Arc::clone(t))
            }
        };
        let embed = reg(&self.embed);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                attn_norm: reg(&b.attn_norm),
                wq: reg(&b.wq),
                wk: reg(&b.wk),
                wv: reg(&b.wv),
                wo: reg(&b.wo),
                mlp_norm: reg(&b.mlp_norm),
                w_gate: reg(&b.w_gate),
                w_up: reg(&b.w_up),
                w_down: reg(&b.w_down),
            })
            .collect();
        BackboneVars {
            embed,
            blocks,
            final_norm: reg(&self.final_norm),
            head: reg(&self.head),
        }
    }

    /// Dense logits `[T × V]`; the frozen teacher.
    pub fn logits(&self, cfg: &ModelConfig, tokens: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let out = forward(&mut g, cfg, &vars, tokens, &mut NoMasks)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub head: Var,
}

impl BackboneVars {
    /// All variables in the same order as [`DenseWeights::named`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for b in &self.blocks {
            out.extend([
                b.attn_norm, b.wq, b.wk, b.wv, b.wo, b.mlp_norm, b.w_gate, b.w_up, b.w_down,
            ]);
        }
        out.push(self.final_norm);
        out.push(self.head);
        out
    }
}

/// Selection masks for one attention layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttnMasks {
    /// Static query/key mask of width `d/H`, already expanded for rotary pairs.
    pub qk: Option<Var>,
    /// Per-token value/output mask `[T × d/H]`.
    pub value: Option<Var>,
}

/// Supplies per-layer selection masks computed from the normalised layer
/// input. Returning `None` leaves that path dense.
pub trait MaskSource {
    fn attention(&mut self, g: &mut Graph, layer: usize, x: Var) -> Result<AttnMasks>;
    fn mlp(&mut self, g: &mut Graph, layer: usize, x: Var) -> Result<Option<Var>>;
}

/// The unmodified dense model.
pub struct NoMasks;

impl MaskSource for NoMasks {
    fn attention(&mut self, _: &mut Graph, _: usize, _: Var) -> Result<AttnMasks> {
        Ok(AttnMasks::default())
    }

    fn mlp(&mut self, _: &mut Graph, _: usize, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// Causal multi-head attention on `x: [T × d]`, with the optional selection
/// masks inserted on the query/key and value/output paths.
pub fn attention(
    g: &mut Graph,
    cfg: &ModelConfig,
    b: &BlockVars,
    x: Var,
    rope: &Arc<RopeTable>,
    masks: AttnMasks,
) -> Result<Var> {
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let q = g.matmul(x, b.wq)?;
    let k = g.matmul(x, b.wk)?;
    let v = g.matmul(x, b.wv)?;
    let mut q = g.rope(q, Arc::clone(rope))?;
    let mut k = g.rope(k, Arc::clone(rope))?;
    if let Some(m) = masks.qk {
        let tiled = g.repeat_cols(m, h);
        q = g.mul(q, tiled)?;
        k = g.mul(k, tiled)?;
    }
    let scale = 1.0 / (dh as f32).sqrt();
    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        let qh = g.slice_cols(q, i * dh, dh)?;
        let kh = g.slice_cols(k, i * dh, dh)?;
        let vh = g.slice_cols(v, i * dh, dh)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale);
        let a = g.causal_softmax(s)?;
        heads.push(g.matmul(a, vh)?);
    }
    let mut o = g.concat_cols(&heads)?;
    if let Some(m) = masks.value {
        let tiled = g.repeat_cols(m, h);
        o = g.mul(o, tiled)?;
        o = g.mul(o, tiled)?;
    }
    g.matmul(o, b.wo)
}

/// Gated MLP `σ(X W_G ⊙ s) ⊙ (X W_U ⊙ s) ⊙ s · W_D` with SiLU gate.
pub fn gated_mlp(g: &mut Graph, b: &BlockVars, x: Var, mask: Option<Var>) -> Result<Var> {
    let mut gate = g.matmul(x, b.w_gate)?;
    let mut up = g.matmul(x, b.w_up)?;
    if let Some(s) = mask {
        gate = g.mul(gate, s)?;
        up = g.mul(up, s)?;
    }
    let act = g.silu(gate);
    let mut hid = g.mul(act, up)?;
    if let Some(s) = mask {
        hid = g.mul(hid, s)?;
    }
    g.matmul(hid, b.w_down)
}

/// Pre-norm residual decoder returning logits `[T × V]`.
pub fn forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    vars: &BackboneVars,
    tokens: &[u32],
    masks: &mut dyn MaskSource,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::invalid("forward", "empty token sequence"));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::invalid(
            "forward",
            format!("sequence length {} exceeds max_seq {}", tokens.len(), cfg.max_seq),
        ));
    }
    let rope = Arc::new(RopeTable::new(cfg.head_dim())?);
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = g.embedding(vars.embed, &ids)?;
    for (l, b) in vars.blocks.iter().enumerate() {
        let xn = g.rms_norm(x, b.attn_norm, NORM_EPS)?;
        let am = masks.attention(g, l, xn)?;
        let a = attention(g, cfg, b, xn, &rope, am)?;
        x = g.add(x, a)?;
        let xn = g.rms_norm(x, b.mlp_norm, NORM_EPS)?;
        let s = masks.mlp(g, l, xn)?;
        let m = gated_mlp(g, b, xn, s)?;
        x = g.add(x, m)?;
    }
    let xn = g.rms_norm(x, vars.final_norm, NORM_EPS)?;
    g.matmul(xn, vars.head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::micro()
    }

    #[test]
    fn logits_shape_and_determinism() {
        let c = cfg();
        let w = DenseWeights::init(&c, 1).unwrap();
        let toks = [1u32, 5, 7, 2, 9];
        let a = w.logits(&c, &toks).unwrap();
        let b = w.logits(&c, &toks).unwrap();
        assert_eq!(a.shape(), &[5, c.vocab]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn out_of_range_token_is_an_error() {
        let c = cfg();
        let w = DenseWeights::init(&c, 1).unwrap();
        assert!(w.logits(&c, &[1, c.vocab as u32]).is_err());
    }

    #[test]
    fn too_long_sequence_is_an_error() {
        let c = cfg();
        let w = DenseWeights::init(&c, 1).unwrap();
        let toks = vec![0u32; c.max_seq + 1];
        assert!(w.logits(&c, &toks).is_err());
    }

    #[test]
    fn causality() {
        let c = cfg();
        let w = DenseWeights::init(&c, 3).unwrap();
        let a = w.logits(&c, &[1, 2, 3, 4, 5, 6]).unwrap();
        let b = w.logits(&c, &[1, 2, 3, 9, 0, 11]).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn gated_mlp_scalar_case() {
        // d = d_mid = 1, all weights 1, x = 2 → SiLU(2)·2
        let mut g = Graph::new();
        let one = || Arc::new(Tensor::ones(&[1, 1]));
        let w = BlockWeights {
            attn_norm: Arc::new(Tensor::ones(&[1])),
            wq: one(),
            wk: one(),
            wv: one(),
            wo: one(),
            mlp_norm: Arc::new(Tensor::ones(&[1])),
            w_gate: one(),
            w_up: one(),
            w_down: one(),
        };
        let dw = DenseWeights {
            embed: one(),
            blocks: vec![w],
            final_norm: Arc::new(Tensor::ones(&[1])),
            head: one(),
        };
        let vars = dw.register(&mut g, false);
        let x = g.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let y = gated_mlp(&mut g, &vars.blocks[0], x, None).unwrap();
        let expect = 2.0 * (2.0 / (1.0 + (-2.0f64).exp()));
        assert!((g.value(y).item() as f64 - expect).abs() < 1e-6);
        assert!((expect - 3.5232).abs() < 1e-4);
    }

    #[test]
    fn zero_input_gives_zero_mlp_output() {
        let c = cfg();
        let w = DenseWeights::init(&c, 2).unwrap();
        let mut g = Graph::new();
        let vars = w.register(&mut g, false);
        let x = g.constant(Tensor::zeros(&[3, c.d_model]));
        let y = gated_mlp(&mut g, &vars.blocks[0], x, None).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_attention_is_running_mean() {
        // single head of width 2, zero Q/K so attention is uniform over the prefix
        let c = ModelConfig {
            layers: 1,
            d_model: 2,
            heads: 1,
            ..ModelConfig::micro()
        };
        let eye = Arc::new(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap());
        let zero = Arc::new(Tensor::zeros(&[2, 2]));
        let b = BlockWeights {
            attn_norm: Arc::new(Tensor::ones(&[2])),
            wq: Arc::clone(&zero),
            wk: Arc::clone(&zero),
            wv: Arc::clone(&eye),
            wo: Arc::clone(&eye),
            mlp_norm: Arc::new(Tensor::ones(&[2])),
            w_gate: Arc::new(Tensor::zeros(&[2, c.d_mid])),
            w_up: Arc::new(Tensor::zeros(&[2, c.d_mid])),
            w_down: Arc::new(Tensor::zeros(&[c.d_mid, 2])),
        };
        let dw = DenseWeights {
            embed: Arc::new(Tensor::zeros(&[c.vocab, 2])),
            blocks: vec![b],
            final_norm: Arc::new(Tensor::ones(&[2])),
            head: Arc::new(Tensor::zeros(&[2, c.vocab])),
        };
        let mut g = Graph::new();
        let vars = dw.register(&mut g, false);
        let xs = vec![1.0, 2.0, 3.0, -1.0, 5.0, 0.5, -2.0, 4.0];
        let x = g.constant(Tensor::matrix(4, 2, xs.clone()).unwrap());
        let rope = Arc::new(RopeTable::new(2).unwrap());
        let y = attention(&mut g, &c, &vars.blocks[0], x, &rope, AttnMasks::default()).unwrap();
        let y = g.value(y);
        for t in 0..4 {
            for j in 0..2 {
                let mean: f32 = (0..=t).map(|u| xs[u * 2 + j]).sum::<f32>() / (t + 1) as f32;
                assert!((y.at(t, j) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn named_round_trip() {
        let c = cfg();
        let w = DenseWeights::init(&c, 4).unwrap();
        let named = w.named();
        let back = DenseWeights::from_named(&c, |n| {
            named.iter().find(|(k, _)| k == n).map(|(_, t)| (**t).clone())
        })
        .unwrap();
        assert_eq!(back, w);
    }
}
