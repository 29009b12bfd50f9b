//! Distillation loss, the three regularisers and parameter accounting.

use crate::autograd::{Graph, Var};
use crate::controllers::Relax;
use crate::error::{Error, Result};
use crate::masked::MaskBundle;
use crate::model::ModelConfig;
use crate::tensor::Tensor;

/// Keeps the log finite if a width or union collapses to zero.
const LOG_FLOOR: f32 = 1e-6;

/// `|ln x − ln y|`, i.e. `ln(max(x, y)/min(x, y))`.
pub fn log_ratio_f(x: f64, y: f64) -> Result<f64> {
    if !(x > 0.0 && y > 0.0) {
        return Err(Error::invalid("log_ratio_f", format!("arguments must be positive, got {x} and {y}")));
    }
    Ok((x.ln() - y.ln()).abs())
}

/// Per-layer widths: MLP expert width, value/output width and the
/// half-width query/key count `k0`.
#[derive(Clone, Debug, PartialEq)]
pub struct WidthVector {
    pub mlp: Vec<f32>,
    pub mha: Vec<f32>,
    pub qk: Vec<f32>,
}

impl WidthVector {
    pub fn full(cfg: &ModelConfig) -> Self {
        WidthVector {
            mlp: vec![cfg.d_mid as f32; cfg.layers],
            mha: vec![cfg.head_dim() as f32; cfg.layers],
            qk: vec![cfg.rope_half() as f32; cfg.layers],
        }
    }

    pub fn scaled(&self, k: f32) -> Self {
        let s = |v: &[f32]| v.iter().map(|x| x * k).collect();
        WidthVector {
            mlp: s(&self.mlp),
            mha: s(&self.mha),
            qk: s(&self.qk),
        }
    }
}

/// Coefficients of the active parameter count per unit width:
/// `(mlp, value/output, half query/key)`.
fn width_coefficients(cfg: &ModelConfig) -> (f64, f64, f64) {
    let (d, h) = (cfg.d_model as f64, cfg.heads as f64);
    (3.0 * d, 2.0 * d * h, 2.0 * d * 2.0 * h)
}

/// Active prunable weights: `Σ_l 3·d·w_mlp + 2·d·(2·k0)·H + 2·d·w_mha·H`.
/// Embeddings, norms and the output head are not counted.
pub fn active_param_count(w: &WidthVector, cfg: &ModelConfig) -> f64 {
    let (cm, cv, cq) = width_coefficients(cfg);
    (0..cfg.layers)
        .map(|l| cm * w.mlp[l] as f64 + cv * w.mha[l] as f64 + cq * w.qk[l] as f64)
        .sum()
}

/// Prunable weights of the dense model.
pub fn total_param_count(cfg: &ModelConfig) -> u64 {
    let (d, m) = (cfg.d_model as u64, cfg.d_mid as u64);
    cfg.layers as u64 * (3 * d * m + 4 * d * d)
}

/// `f(T_active, p·T_total)`.
pub fn param_reg(active: f64, total: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid("param_reg", format!("target ratio {p} outside (0, 1]")));
    }
    log_ratio_f(active, p * total)
}

/// Maximum row sum.
pub fn layer_width(masks: &Tensor) -> f32 {
    (0..masks.rows())
        .map(|r| masks.row(r).iter().map(|&v| v as f64).sum::<f64>() as f32)
        .fold(0.0, f32::max)
}

/// `1 − ∏ᵢ (1 − s_i)` over the rows of `masks`.
pub fn union_of_rows(masks: &Tensor) -> Vec<f32> {
    let c = masks.cols();
    let mut prod = vec![1.0f32; c];
    for row in masks.data().chunks(c) {
        for (p, &x) in prod.iter_mut().zip(row) {
            *p *= 1.0 - x;
        }
    }
    prod.into_iter().map(|p| 1.0 - p).collect()
}

/// Mean over slots of `f(mean(union), 1)`.
pub fn union_reg(slots: &[Tensor]) -> Result<f64> {
    if slots.is_empty() {
        return Err(Error::invalid("union_reg", "no layer slots"));
    }
    let mut acc = 0.0;
    for m in slots {
        let u = union_of_rows(m);
        let mean = u.iter().map(|&v| v as f64).sum::<f64>() / u.len() as f64;
        acc += log_ratio_f(mean, 1.0)?;
    }
    Ok(acc / slots.len() as f64)
}

fn softmax_row(row: &[f32]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `N·Σᵢ F_i·P_i` with `F` the routed fraction and `P` the mean router
/// probability.
pub fn load_balance(gate: &Tensor, logits: &Tensor) -> f64 {
    let (t, n) = (gate.rows(), gate.cols());
    let mut f = vec![0.0f64; n];
    let mut p = vec![0.0f64; n];
    for r in 0..t {
        for (i, &v) in gate.row(r).iter().enumerate() {
            f[i] += v as f64 / t as f64;
        }
        for (i, v) in softmax_row(logits.row(r)).into_iter().enumerate() {
            p[i] += v / t as f64;
        }
    }
    n as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

/// Mean over rows of `KL(softmax(teacher) ‖ softmax(student))`.
pub fn kd_loss(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::shape("kd_loss", student.shape(), teacher.shape()));
    }
    let rows = student.rows();
    let mut acc = 0.0;
    for r in 0..rows {
        let pt = softmax_row(teacher.row(r));
        let ps = softmax_row(student.row(r));
        acc += pt
            .iter()
            .zip(&ps)
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, b)| a * (a.ln() - b.ln()))
            .sum::<f64>();
    }
    Ok(acc / rows as f64)
}

pub fn total_loss(kd: f64, r_p: f64, r_u: f64, r_l: f64, cfg: &ModelConfig) -> f64 {
    kd + cfg.alpha as f64 * r_p + cfg.beta as f64 * r_u + cfg.gamma as f64 * r_l
}

/// Scalar summary of one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub kd: f64,
    pub r_p: f64,
    pub r_u: f64,
    pub r_l: f64,
    pub total: f64,
    pub active_ratio: f64,
    pub widths: WidthVector,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.kd, self.r_p, self.r_u, self.r_l, self.total, self.active_ratio]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Tape variables of the full objective.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub kd: Var,
    pub r_p: Var,
    pub r_u: Var,
    pub r_l: Var,
    pub active: Var,
    pub mlp_widths: Vec<Var>,
    pub mha_widths: Vec<Var>,
    pub qk_widths: Vec<Var>,
}

/// Differentiable maximum row sum.
pub fn layer_width_var(g: &mut Graph, masks: Var) -> Result<Var> {
    let sums = g.sum_cols(masks);
    g.max_all(sums)
}

fn log_ratio_var(g: &mut Graph, x: Var, y: f32) -> Var {
    let x = g.add_scalar(x, LOG_FLOOR);
    let lx = g.log(x);
    let d = g.add_scalar(lx, -y.ln());
    g.abs(d)
}

fn mean_of(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f32))
}

/// KL distillation against fixed teacher logits.
pub fn kd_var(g: &mut Graph, student: Var, teacher: &Tensor) -> Result<Var> {
    if g.shape(student) != teacher.shape() {
        return Err(Error::shape("kd_loss", g.shape(student), teacher.shape()));
    }
    let n = teacher.cols();
    let mut p = Vec::with_capacity(teacher.numel());
    let mut lp = Vec::with_capacity(teacher.numel());
    for row in teacher.data().chunks(n) {
        let probs = softmax_row(row);
        for v in probs {
            p.push(v as f32);
            lp.push(if v > 0.0 { v.ln() as f32 } else { 0.0 });
        }
    }
    let p = g.constant(Tensor::new(teacher.shape().to_vec(), p)?);
    let lp = g.constant(Tensor::new(teacher.shape().to_vec(), lp)?);
    let ls = g.log_softmax(student);
    let diff = g.sub(lp, ls)?;
    let kl = g.mul(p, diff)?;
    let s = g.sum_all(kl);
    Ok(g.scale(s, 1.0 / teacher.rows() as f32))
}

/// Builds `KD + α·R_P + β·R_U + γ·R_L` on the tape. Under
/// [`Relax::Straight`] the routed fractions `F` carry no gradient; under
/// [`Relax::Smooth`] they are the mean soft routing probabilities.
pub fn objective(
    g: &mut Graph,
    cfg: &ModelConfig,
    masks: &MaskBundle,
    student: Var,
    teacher: &Tensor,
    relax: Relax,
) -> Result<Objective> {
    let kd = kd_var(g, student, teacher)?;
    let (cm, cv, cq) = width_coefficients(cfg);
    let mut mlp_widths = Vec::new();
    let mut mha_widths = Vec::new();
    let mut qk_widths = Vec::new();
    let mut terms = Vec::new();
    let mut unions = Vec::new();
    let mut balances = Vec::new();
    for (mlp, mha) in masks.mlp.iter().zip(&masks.mha) {
        let wm = layer_width_var(g, mlp.experts)?;
        let wv = layer_width_var(g, mha.tokens)?;
        let wq = g.sum_all(mha.s0);
        terms.push(g.scale(wm, cm as f32));
        terms.push(g.scale(wv, cv as f32));
        terms.push(g.scale(wq, cq as f32));
        mlp_widths.push(wm);
        mha_widths.push(wv);
        qk_widths.push(wq);

        for m in [mha.tokens, mlp.experts] {
            let u = g.union_rows(m);
            let mu = g.mean_all(u);
            unions.push(log_ratio_var(g, mu, 1.0));
        }

        let gate = match relax {
            Relax::Straight => g.detach(mlp.gate),
            Relax::Smooth => mlp.gate,
        };
        let f = g.mean_rows(gate);
        let probs = g.softmax(mlp.logits);
        let p = g.mean_rows(probs);
        let fp = g.mul(f, p)?;
        let s = g.sum_all(fp);
        balances.push(g.scale(s, cfg.experts as f32));
    }
    let mut active = terms[0];
    for &t in &terms[1..] {
        active = g.add(active, t)?;
    }
    let target = cfg.target_ratio as f64 * total_param_count(cfg) as f64;
    let r_p = log_ratio_var(g, active, target as f32);
    let r_u = mean_of(g, &unions)?;
    let r_l = mean_of(g, &balances)?;

    let a = g.scale(r_p, cfg.alpha);
    let b = g.scale(r_u, cfg.beta);
    let c = g.scale(r_l, cfg.gamma);
    let total = g.add(kd, a)?;
    let total = g.add(total, b)?;
    let total = g.add(total, c)?;
    Ok(Objective {
        total,
        kd,
        r_p,
        r_u,
        r_l,
        active,
        mlp_widths,
        mha_widths,
        qk_widths,
    })
}

impl Objective {
    pub fn report(&self, g: &Graph, cfg: &ModelConfig) -> LossReport {
        let item = |v: Var| g.value(v).item() as f64;
        let vals = |vs: &[Var]| vs.iter().map(|&v| g.value(v).item()).collect();
        LossReport {
            kd: item(self.kd),
            r_p: item(self.r_p),
            r_u: item(self.r_u),
            r_l: item(self.r_l),
            total: item(self.total),
            active_ratio: item(self.active) / total_param_count(cfg) as f64,
            widths: WidthVector {
                mlp: vals(&self.mlp_widths),
                mha: vals(&self.mha_widths),
                qk: vals(&self.qk_widths),
            },
        }
    }
}
