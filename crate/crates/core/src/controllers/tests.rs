use super::*;
use crate::gradcheck::grad_check;

fn embeddings(c: &Controllers) -> Vec<Tensor> {
    let mut g = Graph::new();
    let v = c.register(&mut g, false);
    let e = hypernet_forward(&mut g, &v).unwrap();
    e.iter().map(|&x| g.value(x).clone()).collect()
}

#[test]
fn hypernet_shape_and_determinism() {
    let cfg = ModelConfig::default();
    let c = Controllers::init(&cfg, 1).unwrap();
    let a = embeddings(&c);
    let b = embeddings(&c);
    assert_eq!(a.len(), 8);
    for t in &a {
        assert_eq!(t.shape(), &[cfg.experts, cfg.expert_dim]);
    }
    assert_eq!(a, b);
}

#[test]
fn one_recurrent_weight_moves_every_slot() {
    let cfg = ModelConfig::default();
    let mut c = Controllers::init(&cfg, 1).unwrap();
    let before = embeddings(&c);
    c.params.hyper.fwd.w_hh.data_mut()[3] += 0.05;
    let after = embeddings(&c);
    let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    assert!(changed > 1, "only {changed} slots changed");
}

#[test]
fn gru_matches_reference_cell() {
    // one direction, one step from h0 = 0: h = (1 − z)·n
    let cfg = ModelConfig::micro();
    let c = Controllers::init(&cfg, 5).unwrap();
    let gru = &c.params.hyper.fwd;
    let h = cfg.hn_hidden;
    let x = c.z.row(0);
    let lin = |w: &Tensor, b: &Tensor, col: usize| -> f64 {
        let mut s = b.data()[col] as f64;
        for (i, &xi) in x.iter().enumerate() {
            s += xi as f64 * w.at(i, col) as f64;
        }
        s
    };
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut g = Graph::new();
    let v = c.register(&mut g, false);
    let states = super::hypernet::gru_scan(&mut g, &v.set.hyper.fwd, v.z, false).unwrap();
    let got = g.value(states[0]).clone();
    for j in 0..h {
        let r = sig(lin(&gru.w_ih, &gru.b_ih, j) + gru.b_hh.data()[j] as f64);
        let z = sig(lin(&gru.w_ih, &gru.b_ih, h + j) + gru.b_hh.data()[h + j] as f64);
        let n = (lin(&gru.w_ih, &gru.b_ih, 2 * h + j) + r * gru.b_hh.data()[2 * h + j] as f64).tanh();
        let want = (1.0 - z) * n;
        assert!((got.data()[j] as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn census_matches_closed_form() {
    for cfg in [ModelConfig::default(), ModelConfig::micro()] {
        let c = Controllers::init(&cfg, 2).unwrap();
        assert_eq!(c.num_params(), controller_param_count(&cfg));
        let groups: Vec<ParamGroup> = c.census().iter().map(|(g, _)| *g).collect();
        assert_eq!(
            groups,
            vec![ParamGroup::HyperNet, ParamGroup::Router, ParamGroup::ProjMha, ParamGroup::ProjMlp]
        );
    }
}

#[test]
fn named_round_trip_reproduces_embeddings() {
    let cfg = ModelConfig::micro();
    let c = Controllers::init(&cfg, 3).unwrap();
    let named: Vec<(String, Tensor)> =
        c.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let back = Controllers::from_named(&cfg, |n| {
        named.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone())
    })
    .unwrap();
    assert_eq!(back, c);
    assert_eq!(embeddings(&back), embeddings(&c));
}

fn toy_input(cfg: &ModelConfig, t: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random(&mut rng, &[t, cfg.d_model], &StandardNormal)
}

struct Routed {
    mlp: Vec<Tensor>,
    mha: Vec<Tensor>,
}

fn route(cfg: &ModelConfig, c: &Controllers, x: &Tensor, rng: &mut GumbelRng) -> Routed {
    let mut g = Graph::new();
    let v = c.register(&mut g, false);
    let e = hypernet_forward(&mut g, &v).unwrap();
    let xv = g.constant(x.clone());
    let mut ctx = RouteCtx {
        cfg,
        rng,
        relax: Relax::Straight,
    };
    let mlp = route_mlp(&mut g, &mut ctx, &v.set.layers[0], xv, e[1]).unwrap();
    let mha = route_mha(&mut g, &mut ctx, &v.set.layers[0], xv, e[0]).unwrap();
    Routed {
        mlp: [mlp.logits, mlp.gate, mlp.experts, mlp.tokens]
            .iter()
            .map(|&v| g.value(v).clone())
            .collect(),
        mha: [mha.s0, mha.s0_expanded, mha.tokens]
            .iter()
            .map(|&v| g.value(v).clone())
            .collect(),
    }
}

#[test]
fn masks_start_all_ones() {
    let cfg = ModelConfig::default();
    let c = Controllers::init(&cfg, 7).unwrap();
    let x = toy_input(&cfg, 12, 1);
    let r = route(&cfg, &c, &x, &mut GumbelRng::noiseless());
    for t in [&r.mlp[2], &r.mlp[3], &r.mha[0], &r.mha[1], &r.mha[2]] {
        assert!(t.data().iter().all(|&v| v == 1.0));
    }
    assert_eq!(r.mlp[3].shape(), &[12, cfg.d_mid]);
    assert_eq!(r.mha[0].shape(), &[1, cfg.rope_half()]);
    assert_eq!(r.mha[2].shape(), &[12, cfg.head_dim()]);
}

#[test]
fn token_mask_is_its_experts_mask() {
    let cfg = ModelConfig::micro();
    let mut c = Controllers::init(&cfg, 7).unwrap();
    // push scores near the threshold so masks are mixed
    for l in &mut c.params.layers {
        l.proj_mlp.b = Tensor::full(&[cfg.d_mid], -3.0);
        l.proj_mlp.w = l.proj_mlp.w.map(|w| w * 50.0);
        l.router = l.router.map(|w| w * 100.0);
    }
    let x = toy_input(&cfg, 16, 2);
    let mut rng = GumbelRng::new(3, NoiseMode::Noisy);
    for _ in 0..5 {
        let r = route(&cfg, &c, &x, &mut rng);
        let (gate, experts, tokens) = (&r.mlp[1], &r.mlp[2], &r.mlp[3]);
        let ones: f32 = experts.data().iter().sum();
        assert!(ones > 0.0 && ones < experts.numel() as f32);
        for t in 0..16 {
            let i = argmax(gate.row(t));
            assert_eq!(tokens.row(t), experts.row(i));
        }
    }
}

#[test]
fn s0_ignores_input_and_identical_tokens_share_masks() {
    let cfg = ModelConfig::micro();
    let mut c = Controllers::init(&cfg, 8).unwrap();
    for l in &mut c.params.layers {
        l.proj_d.b = Tensor::full(&[cfg.head_dim()], -3.0);
        l.proj_d.w = l.proj_d.w.map(|w| w * 50.0);
    }
    let mut x = toy_input(&cfg, 6, 3);
    let row0 = x.row(0).to_vec();
    x.data_mut()[4 * cfg.d_model..5 * cfg.d_model].copy_from_slice(&row0);
    let y = toy_input(&cfg, 6, 4);
    let a = route(&cfg, &c, &x, &mut GumbelRng::noiseless());
    let b = route(&cfg, &c, &y, &mut GumbelRng::noiseless());
    assert_eq!(a.mha[0], b.mha[0]);
    assert_eq!(a.mha[2].row(0), a.mha[2].row(4));
    let s0 = a.mha[0].data();
    let expanded = a.mha[1].data();
    assert_eq!(&expanded[..s0.len()], s0);
    assert_eq!(&expanded[s0.len()..], s0);
}

#[test]
fn rope_mask_expand_duplicates() {
    let mut g = Graph::new();
    let s0 = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let e = rope_mask_expand(&mut g, s0).unwrap();
    assert_eq!(g.value(e).data(), &[1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn hypernet_gradients_pass_finite_differences() {
    let cfg = ModelConfig::micro();
    let c = Controllers::init(&cfg, 4).unwrap();
    let base = c.params.hyper.fwd.w_hh.clone();
    let probe: Vec<f32> = (0..cfg.slots() * cfg.experts * cfg.expert_dim)
        .map(|i| ((i * 7 % 11) as f32 - 5.0) / 5.0)
        .collect();
    let f = |p: &[f32]| -> crate::Result<(f32, Vec<f32>)> {
        let mut c = c.clone();
        c.params.hyper.fwd.w_hh = Tensor::new(base.shape().to_vec(), p.to_vec())?;
        let mut g = Graph::new();
        let v = c.register(&mut g, true);
        let e = hypernet_forward(&mut g, &v)?;
        let all = g.concat_rows(&e)?;
        let flat = g.reshape(all, vec![probe.len()])?;
        let w = g.constant(Tensor::vector(probe.clone()));
        let prod = g.mul(flat, w)?;
        let loss = g.sum_all(prod);
        let grads = g.backward(loss)?;
        let grad = grads.get(v.set.hyper.fwd.w_hh).unwrap().data().to_vec();
        Ok((g.value(loss).item(), grad))
    };
    let err = grad_check(f, base.data(), 1e-3).unwrap();
    assert!(err < 1e-3, "rel err {err}");
}
