//! Quick internal consistency checks, small enough to run in seconds on
//! any machine. Each check compares two independent computations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controllers::Controllers;
use crate::error::Result;
use crate::gradcheck::grad_check_coords;
use crate::io::Container;
use crate::masked::{tomoe_logits, MaskPolicy};
use crate::model::{DenseWeights, ModelConfig};
use crate::objectives::{active_param_count, kd_loss, load_balance, union_of_rows, WidthVector};
use crate::runtime::{export, moe_forward, overhead_params, pseudo_moe_forward, MoeExport};
use crate::tensor::Tensor;
use crate::trainer::{flat_params, set_flat_params, surrogate_loss};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

fn small() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        d_mid: 32,
        vocab: 32,
        max_seq: 64,
        expert_dim: 8,
        experts: 3,
        hn_input: 4,
        hn_hidden: 4,
        ..ModelConfig::default()
    }
}

fn random_seqs(rng: &mut ChaCha8Rng, vocab: usize, n: usize, len: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab as u32)).collect())
        .collect()
}

fn overhead() -> Check {
    let n = overhead_params(32, 4096, 32, 128, 8);
    let pct = n as f64 / 6.74e9 * 100.0;
    Check::new(
        "overhead formula",
        n == 18_350_080 && (pct - 0.27).abs() <= 0.02,
        format!("{n} params, {pct:.3}% of 6.74e9"),
    )
}

fn init_identity(seed: u64) -> Result<Check> {
    let cfg = small();
    let dense = DenseWeights::init(&cfg, seed)?;
    let ctl = Controllers::init(&cfg, seed + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let (mut diff, mut kd) = (0.0f32, 0.0f64);
    for toks in random_seqs(&mut rng, cfg.vocab, 4, 48) {
        let dense_logits = dense.logits(&cfg, &toks)?;
        let masked = tomoe_logits(&cfg, &dense, &ctl, &toks, &MaskPolicy::Threshold)?;
        diff = diff.max(masked.max_abs_diff(&dense_logits));
        kd = kd.max(kd_loss(&masked, &dense_logits)?);
    }
    Ok(Check::new(
        "identity at initialisation",
        diff <= 1e-6 && kd <= 1e-8,
        format!("max |Δlogit| {diff:.2e}, KD {kd:.2e}"),
    ))
}

fn partial_export(seed: u64) -> Result<(ModelConfig, DenseWeights, Controllers, MoeExport)> {
    let cfg = small();
    let dense = DenseWeights::init(&cfg, seed)?;
    let ctl = Controllers::randomized(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let ex = export(&cfg, &dense, &ctl, &random_seqs(&mut rng, cfg.vocab, 4, 32))?;
    Ok((cfg, dense, ctl, ex))
}

fn triangle(seed: u64) -> Result<Check> {
    let (cfg, dense, ctl, ex) = partial_export(seed)?;
    let policy = MaskPolicy::Finalized {
        value_k: ex.manifest.layers.iter().map(|l| l.value_k).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let (mut worst, mut tokens) = (0.0f32, 0);
    for toks in random_seqs(&mut rng, cfg.vocab, 16, 64) {
        let (moe, _, _) = moe_forward(&ex, &toks)?;
        let pseudo = pseudo_moe_forward(&ex, &toks)?;
        let masked = tomoe_logits(&cfg, &dense, &ctl, &toks, &policy)?;
        worst = worst
            .max(moe.max_abs_diff(&pseudo))
            .max(masked.max_abs_diff(&pseudo))
            .max(masked.max_abs_diff(&moe));
        tokens += toks.len();
    }
    Ok(Check::new(
        "masked / pseudo-MoE / MoE agreement",
        worst <= 1e-5,
        format!("max |Δlogit| {worst:.2e} over {tokens} tokens, active ratio {:.3}", ex.manifest.active_ratio),
    ))
}

/// Random binary expert masks and a routing that uses every expert.
fn random_mask_set(rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let n = rng.random_range(1..=8);
    let t = rng.random_range(n..=64);
    let width = rng.random_range(1..=24);
    let density: f64 = rng.random_range(0.05..0.6);
    let masks: Vec<f32> = (0..n * width)
        .map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 })
        .collect();
    let mut routing: Vec<usize> = (0..n).chain((n..t).map(|_| rng.random_range(0..n))).collect();
    for i in (1..routing.len()).rev() {
        routing.swap(i, rng.random_range(0..=i));
    }
    (Tensor::matrix(n, width, masks).expect("shape"), routing)
}

fn union_forms(seed: u64, sets: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..sets {
        let (experts, routing) = random_mask_set(&mut rng);
        let per_token = experts.select_rows(&routing);
        let token_level = union_of_rows(&per_token);
        let expert_level = union_of_rows(&experts);
        let or: Vec<f32> = (0..experts.cols())
            .map(|c| routing.iter().any(|&e| experts.at(e, c) == 1.0) as u8 as f32)
            .collect();
        if token_level != expert_level || expert_level != or {
            mismatches += 1;
        }
    }
    Check::new(
        "union: expert level == token level",
        mismatches == 0,
        format!("{mismatches} mismatches in {sets} mask sets"),
    )
}

fn load_balance_anchors() -> Result<Check> {
    let n = 5;
    let t = 40;
    let mut uniform = vec![0.0; t * n];
    for r in 0..t {
        uniform[r * n + r % n] = 1.0;
    }
    let uniform = Tensor::matrix(t, n, uniform)?;
    let flat = Tensor::zeros(&[t, n]);
    let r_uniform = load_balance(&uniform, &flat);

    let mut collapsed = vec![0.0; t * n];
    let mut logits = vec![0.0; t * n];
    for r in 0..t {
        collapsed[r * n] = 1.0;
        logits[r * n] = 40.0;
    }
    let r_collapsed = load_balance(&Tensor::matrix(t, n, collapsed)?, &Tensor::matrix(t, n, logits)?);
    Ok(Check::new(
        "load-balance anchors",
        (r_uniform - 1.0).abs() <= 1e-6 && (r_collapsed - n as f64).abs() <= 1e-3,
        format!("uniform {r_uniform:.7}, collapsed {r_collapsed:.5} (N = {n})"),
    ))
}

fn gradient(seed: u64) -> Result<Check> {
    let cfg = ModelConfig {
        vocab: 32,
        ..ModelConfig::micro()
    };
    let dense = DenseWeights::init(&cfg, seed)?;
    let ctl = Controllers::randomized(&cfg, seed + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let toks = random_seqs(&mut rng, cfg.vocab, 1, 12).remove(0);
    let teacher = dense.logits(&cfg, &toks)?;
    let point = flat_params(&ctl);
    let mut coords = Vec::new();
    let mut off = 0;
    for (_, t) in ctl.params.named() {
        let n = t.numel();
        coords.extend([off, off + n / 2, off + n - 1]);
        off += n;
    }
    coords.dedup();
    let f = |p: &[f32]| {
        let mut c = ctl.clone();
        set_flat_params(&mut c, p)?;
        surrogate_loss(&cfg, &dense, &c, &toks, &teacher)
    };
    let err = grad_check_coords(f, &point, 1e-3, coords.iter().copied())?;
    Ok(Check::new(
        "total-loss gradient vs finite differences",
        err <= 5e-3,
        format!("max rel err {err:.2e} over {} coordinates", coords.len()),
    ))
}

/// Visits every prunable weight element and counts those on a kept
/// channel: query/key columns by head position, value columns and output
/// rows by head position, MLP middle columns and rows.
fn enumerate_active(dense: &DenseWeights, head_dim: usize, qk: &[bool], v: &[bool], mlp: &[bool]) -> u64 {
    let mut n = 0u64;
    for b in &dense.blocks {
        let visits: [(&Tensor, &dyn Fn(usize, usize) -> bool); 7] = [
            (&b.wq, &|_, c| qk[c % head_dim]),
            (&b.wk, &|_, c| qk[c % head_dim]),
            (&b.wv, &|_, c| v[c % head_dim]),
            (&b.wo, &|r, _| v[r % head_dim]),
            (&b.w_gate, &|_, c| mlp[c]),
            (&b.w_up, &|_, c| mlp[c]),
            (&b.w_down, &|r, _| mlp[r]),
        ];
        for (w, kept) in visits {
            for r in 0..w.rows() {
                for c in 0..w.cols() {
                    n += kept(r, c) as u64;
                }
            }
        }
    }
    n
}

fn counting(seed: u64, configs: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for i in 0..configs {
        let heads = rng.random_range(1..=4);
        let head_dim = 2 * rng.random_range(1..=4);
        let cfg = ModelConfig {
            layers: rng.random_range(1..=3),
            d_model: heads * head_dim,
            heads,
            d_mid: rng.random_range(1..=24),
            vocab: 8,
            max_seq: 8,
            ..ModelConfig::micro()
        };
        let dense = DenseWeights::init(&cfg, seed + i as u64)?;
        let analytic = active_param_count(&WidthVector::full(&cfg), &cfg);
        let (dh, all) = (cfg.head_dim(), |n: usize| vec![true; n]);
        let counted = enumerate_active(&dense, dh, &all(dh), &all(dh), &all(cfg.d_mid));
        if analytic != counted as f64 {
            bad += 1;
        }
    }
    Ok(Check::new(
        "active parameter count vs enumeration",
        bad == 0,
        format!("{bad} of {configs} configurations differ"),
    ))
}

fn constant_cost(seed: u64, inputs: usize) -> Result<Check> {
    let (cfg, _, _, ex) = partial_export(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let mut seen = None;
    let mut same = true;
    for toks in random_seqs(&mut rng, cfg.vocab, inputs, 24) {
        let (_, macs, _) = moe_forward(&ex, &toks)?;
        match &seen {
            None => seen = Some(macs),
            Some(first) => same &= *first == macs,
        }
    }
    let per_token = seen.map(|m| m.per_token[0]).unwrap_or_default();
    Ok(Check::new(
        "input-independent MAC count",
        same,
        format!("{inputs} inputs, {per_token} weight MACs per token"),
    ))
}

fn container_round_trip(seed: u64) -> Result<Check> {
    let (_, _, _, ex) = partial_export(seed)?;
    let bytes = ex.to_container()?.to_bytes()?;
    let back = MoeExport::from_container(&Container::from_bytes(&bytes)?)?;
    let again = back.to_container()?.to_bytes()?;
    Ok(Check::new(
        "export container round trip",
        bytes == again,
        format!("{} bytes", bytes.len()),
    ))
}

/// Runs every check; errors inside a check are reported as failures.
pub fn run(seed: u64) -> Vec<Check> {
    let wrap = |name: &'static str, r: Result<Check>| {
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
    };
    vec![
        overhead(),
        wrap("identity at initialisation", init_identity(seed)),
        wrap("masked / pseudo-MoE / MoE agreement", triangle(seed)),
        union_forms(seed, 1000),
        wrap("load-balance anchors", load_balance_anchors()),
        wrap("total-loss gradient vs finite differences", gradient(seed)),
        wrap("active parameter count vs enumeration", counting(seed, 20)),
        wrap("input-independent MAC count", constant_cost(seed, 100)),
        wrap("export container round trip", container_round_trip(seed)),
    ]
}
