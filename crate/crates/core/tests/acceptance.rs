//! Acceptance criteria 1-10. Every test writes one `PASS`/`FAIL` line to
//! stdout (uncaptured) before asserting, so a full run lists all ten.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use carve_core::autograd::Graph;
use carve_core::controllers::Controllers;
use carve_core::corpus::{synthetic_corpus, Corpus};
use carve_core::gradcheck::grad_check;
use carve_core::masked::{tomoe_logits, MaskPolicy};
use carve_core::model::{DenseWeights, ModelConfig};
use carve_core::objectives::{active_param_count, kd_loss, load_balance, union_of_rows, WidthVector};
use carve_core::runtime::{export, moe_forward, overhead_params, pseudo_moe_forward, MoeExport};
use carve_core::tensor::Tensor;
use carve_core::trainer::{
    flat_params, pretrain, set_flat_params, surrogate_loss, LogRow, PretrainConfig, TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, title: &str, passed: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} {:<4} {title}: {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn random_seqs(rng: &mut ChaCha8Rng, vocab: usize, n: usize, len: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab as u32)).collect())
        .collect()
}

#[test]
fn criterion_01_overhead_parameters() {
    let n = overhead_params(32, 4096, 32, 128, 8);
    let pct = n as f64 / 6.74e9 * 100.0;
    let passed = n == 18_350_080 && (pct - 0.27).abs() <= 0.02;
    report(1, "overhead parameters", passed, &format!("{n} parameters, {pct:.4}% of 6.74e9"));
    assert!(passed);
}

#[test]
fn criterion_02_initialisation_identity() {
    let cfg = ModelConfig::default();
    assert_eq!((cfg.gumbel_bias, cfg.tau), (3.0, 0.4));
    let dense = DenseWeights::init(&cfg, 21).unwrap();
    let ctl = Controllers::init(&cfg, 22).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut diff, mut kd) = (0.0f32, 0.0f64);
    for toks in random_seqs(&mut rng, cfg.vocab, 4, 128) {
        let want = dense.logits(&cfg, &toks).unwrap();
        let got = tomoe_logits(&cfg, &dense, &ctl, &toks, &MaskPolicy::Threshold).unwrap();
        diff = diff.max(got.max_abs_diff(&want));
        kd = kd.max(kd_loss(&got, &want).unwrap());
    }
    let passed = diff <= 1e-6 && kd <= 1e-8;
    report(
        2,
        "initialisation identity",
        passed,
        &format!("max |Δlogit| {diff:.3e} (≤ 1e-6), KD {kd:.3e} (≤ 1e-8)"),
    );
    assert!(passed);
}

/// The trained toy model shared by criteria 3 and 8.
struct ToyRun {
    cfg: ModelConfig,
    corpus_bytes: usize,
    dense: DenseWeights,
    controllers: Controllers,
    rows: Vec<LogRow>,
    export: Result<MoeExport, String>,
    calibration: Vec<Vec<u32>>,
    elapsed: Duration,
}

const TOY_SEED: u64 = 0;

fn toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let started = Instant::now();
        let cfg = ModelConfig::default();
        let corpus: Corpus = synthetic_corpus(TOY_SEED, 360_000).unwrap();
        let dense = pretrain(&cfg, &PretrainConfig::default(), &corpus, |_, _| {}).unwrap();
        let tc = TrainConfig {
            seed: TOY_SEED,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&cfg, &dense, Controllers::init(&cfg, TOY_SEED).unwrap(), tc).unwrap();
        let rows = trainer.run(&corpus, |_| {}).unwrap();
        let controllers = trainer.controllers;
        let mut rng = ChaCha8Rng::seed_from_u64(TOY_SEED + 1);
        let calibration: Vec<Vec<u32>> = (0..16)
            .map(|_| corpus.sample_window(&mut rng, 256).unwrap().1)
            .collect();
        let export = export(&cfg, &dense, &controllers, &calibration).map_err(|e| e.to_string());
        ToyRun {
            corpus_bytes: corpus.total_tokens(),
            cfg,
            dense,
            controllers,
            rows,
            export,
            calibration,
            elapsed: started.elapsed(),
        }
    })
}

#[test]
fn criterion_03_equivalence_triangle() {
    let run = toy_run();
    let ex = match &run.export {
        Ok(ex) => ex,
        Err(e) => {
            report(3, "masked / pseudo-MoE / MoE equivalence", false, &format!("export failed: {e}"));
            panic!("export failed: {e}");
        }
    };
    let policy = MaskPolicy::Finalized {
        value_k: ex.manifest.layers.iter().map(|l| l.value_k).collect(),
    };
    let (mut worst, mut tokens) = (0.0f32, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let corpus = synthetic_corpus(TOY_SEED + 5, 20_000).unwrap();
    let held_out: Vec<Vec<u32>> = (0..4).map(|_| corpus.sample_window(&mut rng, 256).unwrap().1).collect();
    for toks in held_out.iter().chain(&run.calibration[..1]) {
        let (moe, _, _) = moe_forward(ex, toks).unwrap();
        let pseudo = pseudo_moe_forward(ex, toks).unwrap();
        let masked = tomoe_logits(&run.cfg, &run.dense, &run.controllers, toks, &policy).unwrap();
        worst = worst
            .max(moe.max_abs_diff(&pseudo))
            .max(masked.max_abs_diff(&pseudo))
            .max(masked.max_abs_diff(&moe));
        tokens += toks.len();
    }
    let passed = worst <= 1e-5 && tokens >= 1000;
    report(
        3,
        "masked / pseudo-MoE / MoE equivalence",
        passed,
        &format!("max pairwise |Δlogit| {worst:.3e} (≤ 1e-5) over {tokens} tokens of the trained toy model"),
    );
    assert!(passed);
}

#[test]
fn criterion_04_union_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut mismatches = 0;
    let sets = 1000;
    for _ in 0..sets {
        let n = rng.random_range(1..=8);
        let t = rng.random_range(n..=64);
        let width = rng.random_range(1..=32);
        let density: f64 = rng.random_range(0.02..0.7);
        let experts: Vec<f32> = (0..n * width)
            .map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 })
            .collect();
        let experts = Tensor::matrix(n, width, experts).unwrap();
        // every expert routed at least once, the rest at random
        let mut routing: Vec<usize> = (0..n).chain((n..t).map(|_| rng.random_range(0..n))).collect();
        for i in (1..t).rev() {
            routing.swap(i, rng.random_range(0..=i));
        }
        let tokens = experts.select_rows(&routing);

        let token_level = union_of_rows(&tokens);
        let mut g = Graph::new();
        let e = g.constant(experts.clone());
        let u = g.union_rows(e);
        let expert_level = g.value(u).data().to_vec();
        let or: Vec<f32> = (0..width)
            .map(|c| if routing.iter().any(|&r| experts.at(r, c) == 1.0) { 1.0 } else { 0.0 })
            .collect();
        if expert_level != token_level || token_level != or {
            mismatches += 1;
        }
    }
    let passed = mismatches == 0;
    report(
        4,
        "expert-level union == token-level union",
        passed,
        &format!("{mismatches} mismatches over {sets} mask sets (T ≤ 64, N ≤ 8)"),
    );
    assert!(passed);
}

#[test]
fn criterion_05_load_balance_anchors() {
    let (t, n) = (64, 8);
    let mut gate = vec![0.0; t * n];
    for r in 0..t {
        gate[r * n + r % n] = 1.0;
    }
    let uniform = load_balance(&Tensor::matrix(t, n, gate).unwrap(), &Tensor::zeros(&[t, n]));

    let mut gate = vec![0.0; t * n];
    let mut logits = vec![0.0; t * n];
    for r in 0..t {
        gate[r * n + 2] = 1.0;
        logits[r * n + 2] = 30.0;
    }
    let collapsed = load_balance(
        &Tensor::matrix(t, n, gate).unwrap(),
        &Tensor::matrix(t, n, logits).unwrap(),
    );
    let passed = (uniform - 1.0).abs() <= 1e-6 && (collapsed - n as f64).abs() <= 1e-3;
    report(
        5,
        "load-balance anchors",
        passed,
        &format!("uniform R_L {uniform:.9} (1 ± 1e-6), collapsed R_L {collapsed:.6} (N = {n} ± 1e-3)"),
    );
    assert!(passed);
}

#[test]
fn criterion_06_gradient_check() {
    let cfg = ModelConfig {
        vocab: 64,
        ..ModelConfig::micro()
    };
    assert_eq!(cfg.layers, 2);
    let dense = DenseWeights::init(&cfg, 61).unwrap();
    let ctl = Controllers::randomized(&cfg, 62).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let toks = random_seqs(&mut rng, cfg.vocab, 1, 12).remove(0);
    let teacher = dense.logits(&cfg, &toks).unwrap();
    let point = flat_params(&ctl);
    let f = |p: &[f32]| {
        let mut c = ctl.clone();
        set_flat_params(&mut c, p)?;
        surrogate_loss(&cfg, &dense, &c, &toks, &teacher)
    };
    let err = grad_check(f, &point, 1e-3).unwrap();
    let groups: std::collections::BTreeSet<_> = ctl
        .params
        .named()
        .iter()
        .map(|(n, _)| format!("{:?}", carve_core::controllers::group_of(n)))
        .collect();
    let passed = err <= 5e-3 && groups.len() == 4;
    report(
        6,
        "total-loss gradient check",
        passed,
        &format!(
            "max rel err {err:.3e} (≤ 5e-3) over all {} coordinates in groups {groups:?}",
            point.len()
        ),
    );
    assert!(passed);
}

/// Walks every weight element of every block, deciding per element whether
/// it lies on a kept channel.
fn enumerate_active(dense: &DenseWeights, head_dim: usize, qk: &[bool], value: &[bool], mid: &[bool]) -> u64 {
    let mut count = 0u64;
    for b in &dense.blocks {
        for (w, by_col, keep) in [
            (&b.wq, true, qk),
            (&b.wk, true, qk),
            (&b.wv, true, value),
            (&b.wo, false, value),
        ] {
            for r in 0..w.rows() {
                for c in 0..w.cols() {
                    let pos = if by_col { c % head_dim } else { r % head_dim };
                    count += keep[pos] as u64;
                }
            }
        }
        for (w, by_col) in [(&b.w_gate, true), (&b.w_up, true), (&b.w_down, false)] {
            for r in 0..w.rows() {
                for c in 0..w.cols() {
                    count += mid[if by_col { c } else { r }] as u64;
                }
            }
        }
    }
    count
}

#[test]
fn criterion_07_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut failures = Vec::new();
    let configs = 20;
    for i in 0..configs {
        let heads = rng.random_range(1..=6);
        let head_dim = 2 * rng.random_range(1..=6);
        let cfg = ModelConfig {
            layers: rng.random_range(1..=4),
            d_model: heads * head_dim,
            heads,
            d_mid: rng.random_range(1..=96),
            vocab: rng.random_range(2..=40),
            max_seq: 8,
            experts: rng.random_range(2..=8),
            ..ModelConfig::micro()
        };
        let dense = DenseWeights::init(&cfg, 700 + i).unwrap();
        let all = |n: usize| vec![true; n];
        let counted = enumerate_active(&dense, head_dim, &all(head_dim), &all(head_dim), &all(cfg.d_mid));
        let analytic = active_param_count(&WidthVector::full(&cfg), &cfg);
        if analytic != counted as f64 {
            failures.push(format!("{cfg:?}: {analytic} vs {counted}"));
        }
    }
    let passed = failures.is_empty();
    report(
        7,
        "active parameter count vs enumeration",
        passed,
        &format!("{} of {configs} random configurations differ", failures.len()),
    );
    assert!(passed, "{failures:?}");
}

#[test]
fn criterion_08_toy_training_dynamics() {
    let run = toy_run();
    let p = run.cfg.target_ratio as f64;
    let shape_ok = (run.cfg.layers, run.cfg.d_model, run.cfg.heads, run.cfg.d_mid, run.cfg.experts)
        == (4, 128, 4, 512, 4)
        && p == 0.5
        && run.corpus_bytes >= 1 << 20
        && run.rows.last().map(|r| r.iteration) == Some(2000);

    let final_rp = run.rows.last().map_or(f64::NAN, |r| r.r_p);
    let rp_ok = final_rp <= 0.01;

    let (ratio, ratio_ok) = match &run.export {
        Ok(ex) => {
            let r = ex.manifest.active_ratio;
            (format!("{r:.4}"), (r / p - 1.0).abs() <= 0.03)
        }
        Err(e) => (format!("export failed ({e})"), false),
    };

    let n = run.cfg.experts as f64;
    let rl_ok = run.rows.iter().all(|r| r.r_l >= 1.0 && r.r_l <= n);
    let (rl_min, rl_max) = run
        .rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.r_l), hi.max(r.r_l)));

    let kd_at = |it: usize| run.rows.iter().find(|r| r.iteration == it).map_or(f64::NAN, |r| r.kd);
    let (kd100, kd2000) = (kd_at(100), kd_at(2000));
    let kd_ok = kd2000 < kd100;

    let time_ok = run.elapsed <= Duration::from_secs(30 * 60);
    let passed = shape_ok && rp_ok && ratio_ok && rl_ok && kd_ok && time_ok;
    let mark = |ok: bool| if ok { "ok" } else { "FAILED" };
    report(
        8,
        "toy training dynamics",
        passed,
        &format!(
            "final R_P {final_rp:.4} (≤ 0.01, {}); export active ratio {ratio} (0.5 ± 3%, {}); \
             R_L in [{rl_min:.4}, {rl_max:.4}] (within [1, {n}], {}); KD@100 {kd100:.4} vs KD@2000 {kd2000:.4} ({}); \
             {:.0}s incl. backbone pretraining ({})",
            mark(rp_ok),
            mark(ratio_ok),
            mark(rl_ok),
            mark(kd_ok),
            run.elapsed.as_secs_f64(),
            mark(time_ok),
        ),
    );
    assert!(shape_ok, "toy setup does not match the criterion");
    assert!(passed, "toy training dynamics criterion not met");
}

#[test]
fn criterion_09_fixed_budget() {
    let cfg = ModelConfig::default();
    let dense = DenseWeights::init(&cfg, 91).unwrap();
    let ctl = Controllers::randomized(&cfg, 92).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(93);
    let ex = export(&cfg, &dense, &ctl, &random_seqs(&mut rng, cfg.vocab, 4, 64)).unwrap();
    let mut first = None;
    let mut distinct = 0;
    let inputs = 100;
    for toks in random_seqs(&mut rng, cfg.vocab, inputs, 64) {
        let (_, macs, _) = moe_forward(&ex, &toks).unwrap();
        match &first {
            None => first = Some(macs),
            Some(f) => distinct += (*f != macs) as usize,
        }
    }
    let total = first.as_ref().map_or(0, |m| m.total());
    let passed = distinct == 0;
    report(
        9,
        "fixed multiply-accumulate budget",
        passed,
        &format!(
            "{distinct} of {inputs} inputs differ; {total} MACs per 64-token input (active ratio {:.3})",
            ex.manifest.active_ratio
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_10_reproducibility_disclosure() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap_or_default();
    let section = readme
        .split("\n## ")
        .find(|s| s.starts_with("What is not reproduced"))
        .unwrap_or("");
    let passed = section.contains("perplexit") && section.contains("zero-shot");
    report(
        10,
        "non-reproducibility disclosure",
        passed,
        "large-model perplexity and zero-shot accuracy figures are not reproduced at this scale; \
         criteria 1-9 check properties instead (README, \"What is not reproduced\")",
    );
    assert!(passed);
}
