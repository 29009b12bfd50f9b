//! The two inference paths over an export: `moe_forward` on sliced weights
//! and `pseudo_moe_forward` on full weights with stored masks.

use super::export::{MoeExport, MoeLayer};
use super::finalize::top_k_indices;
use super::kernels::{
    add, causal_softmax, concat_cols, embed, matmul_nt, mul, proj_d, rms_norm, scale, silu_t,
    slice_cols,
};
use crate::controllers::argmax;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RopeTable};
use crate::tensor::Tensor;

/// Multiply-accumulate counts of one `moe_forward` call.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacCount {
    /// Weight-matrix MACs spent on each token: routing, scoring, every
    /// projection, the routed expert and the output head.
    pub per_token: Vec<u64>,
    /// Query·key products and attention-weighted value sums.
    pub attention: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.per_token.iter().sum::<u64>() + self.attention
    }
}

/// Routing decisions of one pass, per layer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Routing {
    /// Expert chosen by every token, `[L][T]`.
    pub experts: Vec<Vec<usize>>,
    /// Value/output channels kept by every token, `[L][T][K]`.
    pub value: Vec<Vec<Vec<usize>>>,
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("forward", "empty token sequence"));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::invalid(
            "forward",
            format!("sequence length {} exceeds max_seq {}", tokens.len(), cfg.max_seq),
        ));
    }
    Ok(())
}

/// Per-token top-`K` value/output channels from the stored scoring weights.
fn value_selection(layer: &MoeLayer, k: usize, xn: &Tensor) -> Result<Vec<Vec<usize>>> {
    let p = add(&xn.matmul(&layer.proj_e)?, &layer.proj_bias);
    let scores = proj_d(&layer.proj_d, &p)?;
    Ok((0..scores.rows()).map(|t| top_k_indices(scores.row(t), k)).collect())
}

fn route(layer: &MoeLayer, xn: &Tensor) -> Result<Vec<usize>> {
    let logits = xn.matmul(&layer.router)?;
    Ok((0..logits.rows()).map(|t| argmax(logits.row(t))).collect())
}

fn head_logits(ex: &MoeExport, x: &Tensor) -> Result<Tensor> {
    let xn = rms_norm(x, &ex.backbone.final_norm);
    xn.matmul(&ex.backbone.head)
}

/// Mask-based evaluation: full weights, each token multiplied by its
/// routed expert mask and its top-`K` value/output mask.
pub fn pseudo_moe_forward(ex: &MoeExport, tokens: &[u32]) -> Result<Tensor> {
    let cfg = ex.cfg();
    check_tokens(cfg, tokens)?;
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let rope = RopeTable::new(dh)?;
    let mut x = embed(&ex.backbone.embed, tokens)?;
    for (l, (b, layer)) in ex.backbone.blocks.iter().zip(&ex.layers).enumerate() {
        let xn = rms_norm(&x, &b.attn_norm);
        let keep = value_selection(layer, ex.manifest.layers[l].value_k, &xn)?;
        let mut vmask = Tensor::zeros(&[tokens.len(), dh]);
        for (t, row) in keep.iter().enumerate() {
            for &j in row {
                vmask.data_mut()[t * dh + j] = 1.0;
            }
        }
        let vmask = tile(&vmask, h);

        let mut q = xn.matmul(&b.wq)?;
        let mut k = xn.matmul(&b.wk)?;
        let v = xn.matmul(&b.wv)?;
        rope.rotate(q.data_mut(), cfg.d_model, false);
        rope.rotate(k.data_mut(), cfg.d_model, false);
        let q = mul(&q, &layer.qk_mask);
        let k = mul(&k, &layer.qk_mask);
        let sc = 1.0 / (dh as f32).sqrt();
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let (qh, kh, vh) = (slice_cols(&q, i * dh, dh), slice_cols(&k, i * dh, dh), slice_cols(&v, i * dh, dh));
            let a = causal_softmax(&scale(&matmul_nt(&qh, &kh), sc));
            heads.push(a.matmul(&vh)?);
        }
        let o = mul(&mul(&concat_cols(&heads), &vmask), &vmask);
        x = add(&x, &o.matmul(&b.wo)?);

        let xn = rms_norm(&x, &b.mlp_norm);
        let s = layer.expert_masks.select_rows(&route(layer, &xn)?);
        let gate = mul(&xn.matmul(&b.w_gate)?, &s);
        let up = mul(&xn.matmul(&b.w_up)?, &s);
        let hid = mul(&mul(&silu_t(&gate), &up), &s);
        x = add(&x, &hid.matmul(&b.w_down)?);
    }
    head_logits(ex, &x)
}

/// `[T × w]` repeated `n` times along columns.
fn tile(m: &Tensor, n: usize) -> Tensor {
    let parts = vec![m.clone(); n];
    concat_cols(&parts)
}

/// Sliced mixture-of-experts evaluation with multiply-accumulate counting.
pub fn moe_forward(ex: &MoeExport, tokens: &[u32]) -> Result<(Tensor, MacCount, Routing)> {
    let cfg = ex.cfg();
    check_tokens(cfg, tokens)?;
    let (t_len, d, h, dh) = (tokens.len(), cfg.d_model, cfg.heads, cfg.head_dim());
    let mut macs = MacCount {
        per_token: vec![0; t_len],
        attention: 0,
    };
    let mut routing = Routing::default();
    let charge = |macs: &mut MacCount, n: usize| macs.per_token.iter_mut().for_each(|m| *m += n as u64);

    let mut x = embed(&ex.backbone.embed, tokens)?;
    for (l, (b, layer)) in ex.backbone.blocks.iter().zip(&ex.layers).enumerate() {
        let lm = &ex.manifest.layers[l];
        let kv = lm.value_k;
        let xn = rms_norm(&x, &b.attn_norm);

        let keep = value_selection(layer, kv, &xn)?;
        charge(&mut macs, d * cfg.expert_dim + cfg.expert_dim * dh);

        // static query/key slice
        let w = 2 * lm.qk_pairs.len();
        let mut q = xn.matmul(&layer.wq)?;
        let mut k = xn.matmul(&layer.wk)?;
        layer.rope.rotate(q.data_mut(), h * w, false);
        layer.rope.rotate(k.data_mut(), h * w, false);
        let v = xn.matmul(&b.wv)?;
        charge(&mut macs, 2 * d * h * w + d * d);

        let sc = 1.0 / (dh as f32).sqrt();
        let mut o = vec![0.0f32; t_len * h * kv];
        for i in 0..h {
            let (qh, kh) = (slice_cols(&q, i * w, w), slice_cols(&k, i * w, w));
            let a = causal_softmax(&scale(&matmul_nt(&qh, &kh), sc));
            macs.attention += (t_len * t_len * w) as u64;
            for (t, sel) in keep.iter().enumerate() {
                let arow = a.row(t);
                for (slot, &j) in sel.iter().enumerate() {
                    let col = i * dh + j;
                    let mut acc = 0.0f32;
                    for (u, &au) in arow[..=t].iter().enumerate() {
                        acc += au * v.data()[u * d + col];
                    }
                    o[(t * h + i) * kv + slot] = acc;
                }
                macs.attention += ((t + 1) * kv) as u64;
            }
        }
        let mut attn = vec![0.0f32; t_len * d];
        for (t, sel) in keep.iter().enumerate() {
            let rows: Vec<usize> = (0..h).flat_map(|i| sel.iter().map(move |&j| i * dh + j)).collect();
            let wo = b.wo.select_rows(&rows);
            let ot = Tensor::matrix(1, h * kv, o[t * h * kv..(t + 1) * h * kv].to_vec())?;
            attn[t * d..(t + 1) * d].copy_from_slice(ot.matmul(&wo)?.data());
            macs.per_token[t] += (rows.len() * d) as u64;
        }
        x = add(&x, &Tensor::matrix(t_len, d, attn)?);

        let xn = rms_norm(&x, &b.mlp_norm);
        let chosen = route(layer, &xn)?;
        charge(&mut macs, d * cfg.experts);
        let mut y = vec![0.0f32; t_len * d];
        for (e, expert) in layer.experts.iter().enumerate() {
            let ids: Vec<usize> = (0..t_len).filter(|&t| chosen[t] == e).collect();
            if ids.is_empty() {
                continue;
            }
            let xe = xn.select_rows(&ids);
            let gate = xe.matmul(&expert.w_gate)?;
            let up = xe.matmul(&expert.w_up)?;
            let out = mul(&silu_t(&gate), &up).matmul(&expert.w_down)?;
            let width = expert.w_gate.cols() + expert.w_up.cols() + expert.w_down.rows();
            for (r, &t) in ids.iter().enumerate() {
                y[t * d..(t + 1) * d].copy_from_slice(out.row(r));
                macs.per_token[t] += (d * width) as u64;
            }
        }
        x = add(&x, &Tensor::matrix(t_len, d, y)?);
        routing.experts.push(chosen);
        routing.value.push(keep);
    }
    charge(&mut macs, d * cfg.vocab);
    Ok((head_logits(ex, &x)?, macs, routing))
}
