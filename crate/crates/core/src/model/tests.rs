use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Gradients;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        d: 32,
        heads: 4,
        enc_layers: 2,
        dec_layers: 1,
        ld_layers: 1,
        ffn_dim: 64,
        conv_kernel: 3,
        subsample_factor: 4,
        feature_dim: 8,
        vocab_size: 12,
        ld_vocab_size: LD_VOCAB_SIZE,
        alpha: 0.3,
        beta: 0.0,
        ld_full_context: true,
        use_lpb: false,
        use_grl: false,
        grl_lambda: 1.0,
        lpb_stop_gradient: true,
        dropout: 0.0,
        label_smoothing: 0.1,
    }
}

fn rand_features(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Tensor {
    let data = (0..t * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, &[t, f]).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn grads_by_name(model: &Model, grads: &Gradients) -> Vec<(String, Option<Vec<f64>>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |name, t| {
        out.push((name, grads.get(t).map(<[f64]>::to_vec)));
    });
    out
}

#[test]
fn encode_shape_follows_subsampling_chain() {
    let cfg = ModelConfig { feature_dim: 16, ..small_cfg() };
    let model = Model::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_features(&mut rng, 40, 16);
    let h = model.encode(&x, &mut DropoutCtx::eval()).unwrap();
    assert_eq!(h.shape(), &[10, cfg.d]);
    assert_eq!(cfg.subsampled_len(40), 10);
    assert_eq!(cfg.subsampled_len(41), 11);

    let short = rand_features(&mut rng, 3, 16);
    assert!(model.encode(&short, &mut DropoutCtx::eval()).is_err());
    let wrong_dim = rand_features(&mut rng, 40, 8);
    assert!(model.encode(&wrong_dim, &mut DropoutCtx::eval()).is_err());
}

#[test]
fn encode_eval_is_deterministic_and_input_sensitive() {
    let model = Model::new(small_cfg(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_features(&mut rng, 16, 8);
    let h1 = model.encode(&x, &mut DropoutCtx::eval()).unwrap();
    let h2 = model.encode(&x, &mut DropoutCtx::eval()).unwrap();
    assert_eq!(h1.data(), h2.data());

    let mut bumped = x.data().to_vec();
    bumped[5 * 8 + 2] += 0.5;
    let xb = Tensor::from_vec(bumped, &[16, 8]).unwrap();
    let hb = model.encode(&xb, &mut DropoutCtx::eval()).unwrap();
    assert!(max_abs_diff(&h1, &hb) > 1e-8, "encoder ignores its input");
}

#[test]
fn asr_posteriors_normalized_and_empty_prefix_rejected() {
    let model = Model::new(small_cfg(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_features(&mut rng, 16, 8);
    let h = model.encode(&x, &mut DropoutCtx::eval()).unwrap();
    let logits = model
        .asr_logits(&[3, 4, 5], &h, None, &mut DropoutCtx::eval())
        .unwrap();
    assert_eq!(logits.shape(), &[3, 12]);
    let post = logits.softmax();
    for row in 0..3 {
        let s: f64 = post.data()[row * 12..(row + 1) * 12].iter().sum();
        assert!((s - 1.0).abs() <= 1e-9, "row {row} sums to {s}");
    }
    assert!(model.asr_logits(&[], &h, None, &mut DropoutCtx::eval()).is_err());
}

#[test]
fn asr_decoder_is_causal_in_token_positions() {
    let model = Model::new(small_cfg(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_features(&mut rng, 16, 8);
    let h = model.encode(&x, &mut DropoutCtx::eval()).unwrap();
    let base = model
        .asr_logits(&[3, 4, 5, 6, 7], &h, None, &mut DropoutCtx::eval())
        .unwrap();
    for i in 0..4 {
        let mut ids = vec![3, 4, 5, 6, 7];
        for (j, id) in ids.iter_mut().enumerate().skip(i + 1) {
            *id = (*id + j) % 12;
        }
        let alt = model.asr_logits(&ids, &h, None, &mut DropoutCtx::eval()).unwrap();
        let v = model.cfg.vocab_size;
        for p in 0..=i {
            for c in 0..v {
                let d = (base.data()[p * v + c] - alt.data()[p * v + c]).abs();
                assert!(d <= 1e-12, "position {p} leaked future edit at {i}: {d}");
            }
        }
    }
}

#[test]
fn ld_mask_regimes_differ_exactly_as_specified() {
    let mut cfg = small_cfg();
    cfg.beta = 0.5;
    for trial in 0..3u64 {
        let model = Model::new(cfg.clone(), 100 + trial).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let x = rand_features(&mut rng, 16, 8);
        let h = model.encode(&x, &mut DropoutCtx::eval()).unwrap();
        let ids: Vec<usize> = (0..6).map(|i| 3 + (i % 9)).collect();
        let n = ids.len();

        let causal = model.ld_logits(&ids, &h, false, &mut DropoutCtx::eval()).unwrap();
        let full = model.ld_logits(&ids, &h, true, &mut DropoutCtx::eval()).unwrap();
        for t in [&causal, &full] {
            let p = t.softmax();
            for row in 0..n {
                let s: f64 = p.data()[row * 4..(row + 1) * 4].iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
            }
        }

        for edit in 1..n {
            let mut alt_ids = ids.clone();
            alt_ids[edit] = (alt_ids[edit] + 5) % 12;
            let alt_causal = model.ld_logits(&alt_ids, &h, false, &mut DropoutCtx::eval()).unwrap();
            for p in 0..edit {
                for c in 0..4 {
                    let d = (causal.data()[p * 4 + c] - alt_causal.data()[p * 4 + c]).abs();
                    assert!(d <= 1e-12, "causal leak at position {p} from edit {edit}");
                }
            }
            let alt_full = model.ld_logits(&alt_ids, &h, true, &mut DropoutCtx::eval()).unwrap();
            let leaked = (0..edit).any(|p| {
                (0..4).any(|c| (full.data()[p * 4 + c] - alt_full.data()[p * 4 + c]).abs() > 1e-8)
            });
            assert!(leaked, "full-context output ignored a future edit at {edit}");
        }
    }
}

#[test]
fn lpb_zero_projection_yields_bias_and_reacts_to_posteriors() {
    let mut cfg = small_cfg();
    cfg.use_lpb = true;
    cfg.beta = 0.5;
    let mut model = Model::new(cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);

    let n = 3;
    let e = rand_features(&mut rng, n, 32);
    let mut p_data = vec![0.25; n * 4];
    let posteriors = Tensor::from_vec(p_data.clone(), &[n, 4]).unwrap();

    let bias: Vec<f64> = (0..32).map(|i| 0.01 * i as f64).collect();
    model.visit_params_mut(&mut |name, t| {
        if name == "lpb_proj.w" {
            *t = Tensor::param(vec![0.0; t.numel()], t.shape()).unwrap();
        } else if name == "lpb_proj.b" {
            *t = Tensor::param(bias.clone(), t.shape()).unwrap();
        }
    });
    let out = model.lpb_augment(&e, &posteriors).unwrap();
    for row in 0..n {
        assert_eq!(&out.data()[row * 32..(row + 1) * 32], &bias[..]);
    }

    let mut model = Model::new(ModelConfig { use_lpb: true, beta: 0.5, ..small_cfg() }, 9).unwrap();
    model.visit_params_mut(&mut |name, t| {
        if name == "lpb_proj.w" {
            let vals: Vec<f64> = (0..t.numel()).map(|i| 0.02 * (i % 7) as f64 + 0.01).collect();
            *t = Tensor::param(vals, t.shape()).unwrap();
        }
    });
    let base = model.lpb_augment(&e, &posteriors).unwrap();
    p_data[2] += 0.3;
    p_data[3] -= 0.3;
    let perturbed = Tensor::from_vec(p_data, &[n, 4]).unwrap();
    let out2 = model.lpb_augment(&e, &perturbed).unwrap();
    assert!(max_abs_diff(&base, &out2) > 1e-8, "posterior change had no effect");

    let short = Tensor::from_vec(vec![0.25; 8], &[2, 4]).unwrap();
    assert!(model.lpb_augment(&e, &short).is_err());
}

fn barrier_probe(stop_gradient: bool) -> (bool, bool) {
    let cfg = ModelConfig {
        use_lpb: true,
        beta: 0.5,
        lpb_stop_gradient: stop_gradient,
        ..small_cfg()
    };
    let model = Model::new(cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_features(&mut rng, 16, 8);
    let tokens = [3usize, 4, 5, 6, 3];
    let ld_ids = [2usize, 0, 0, 1, 2];
    let out = model
        .utterance_loss(&x, &tokens, &ld_ids, &mut DropoutCtx::eval())
        .unwrap();
    let grads = out.l_att.backward().unwrap();
    let mut ld_nonzero = false;
    let mut asr_nonzero = false;
    for (name, g) in grads_by_name(&model, &grads) {
        let nz = g.map(|v| v.iter().any(|x| *x != 0.0)).unwrap_or(false);
        if name.starts_with("ld_decoder") {
            ld_nonzero |= nz;
        }
        if name.starts_with("asr_decoder") {
            asr_nonzero |= nz;
        }
    }
    (ld_nonzero, asr_nonzero)
}

#[test]
fn posterior_gradient_barrier_controls_ld_flow() {
    let (ld_nonzero, asr_nonzero) = barrier_probe(true);
    assert!(!ld_nonzero, "token loss leaked into language decoder despite barrier");
    assert!(asr_nonzero);
    let (ld_nonzero, asr_nonzero) = barrier_probe(false);
    assert!(ld_nonzero, "without the barrier the token loss must reach the language decoder");
    assert!(asr_nonzero);
}

#[test]
fn grl_is_forward_identity_with_exact_gradient_flip() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_features(&mut rng, 16, 8);
    let ids = [3usize, 4, 5, 6];
    let ld_ids = [2usize, 0, 1, 2];

    let base_cfg = ModelConfig { beta: 0.5, ..small_cfg() };
    let plain = Model::new(base_cfg.clone(), 14).unwrap();
    let h = plain.encode(&x, &mut DropoutCtx::eval()).unwrap();
    let logits = plain.ld_logits(&ids, &h, true, &mut DropoutCtx::eval()).unwrap();
    let l_ld = losses::label_smoothed_ce(&logits, &ld_ids, 0.1).unwrap();
    let g_plain = l_ld.backward().unwrap();
    let plain_grads = grads_by_name(&plain, &g_plain);

    for lambda in [0.0, 0.5, 1.0] {
        let cfg = ModelConfig { use_grl: true, grl_lambda: lambda, ..base_cfg.clone() };
        let model = Model::new(cfg, 14).unwrap();
        let h2 = model.encode(&x, &mut DropoutCtx::eval()).unwrap();
        let logits2 = model.ld_logits(&ids, &h2, true, &mut DropoutCtx::eval()).unwrap();
        assert_eq!(logits.data(), logits2.data(), "reversal hook changed the forward pass");

        let l2 = losses::label_smoothed_ce(&logits2, &ld_ids, 0.1).unwrap();
        let g2 = l2.backward().unwrap();
        for ((name, a), (name2, b)) in plain_grads.iter().zip(grads_by_name(&model, &g2)) {
            assert_eq!(*name, name2);
            let encoder_side = name.starts_with("frontend") || name.starts_with("encoder");
            let (a, b) = match (a, b) {
                (Some(a), Some(b)) => (a, b),
                (None, None) => continue,
                _ => panic!("gradient presence differs for {name}"),
            };
            for (ga, gb) in a.iter().zip(b.iter()) {
                let expect = if encoder_side { -lambda * ga } else { *ga };
                let tol = 1e-9 * expect.abs().max(1.0);
                assert!(
                    (gb - expect).abs() <= tol,
                    "{name}: lambda {lambda}, expected {expect}, got {gb}"
                );
            }
        }
    }
}

#[test]
fn language_and_token_decoders_share_one_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let dec = TransformerDecoder::new(&mut rng, 12, 4, 32, 4, 64, 1);
    let mut rng2 = ChaCha8Rng::seed_from_u64(16);
    let h = rand_features(&mut rng2, 5, 32);
    let ids = [3usize, 4, 5, 6];

    let via_ids = dec.forward_ids(&ids, &h, true, &mut DropoutCtx::eval()).unwrap();
    let e = dec.embed_ids(&ids).unwrap();
    let via_embed = dec.forward_embedded(&e, &h, true, &mut DropoutCtx::eval()).unwrap();
    assert_eq!(via_ids.data(), via_embed.data());

    let mut rng3 = ChaCha8Rng::seed_from_u64(15);
    let twin = TransformerDecoder::new(&mut rng3, 12, 4, 32, 4, 64, 1);
    let via_twin = twin.forward_ids(&ids, &h, true, &mut DropoutCtx::eval()).unwrap();
    assert_eq!(via_ids.data(), via_twin.data());
}

#[test]
fn ctc_logprob_rows_are_normalized() {
    let model = Model::new(small_cfg(), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_features(&mut rng, 16, 8);
    let h = model.encode(&x, &mut DropoutCtx::eval()).unwrap();
    let logp = model.ctc_logprobs(&h).unwrap();
    assert_eq!(logp.shape(), &[4, 12]);
    for row in 0..4 {
        let lse = logp.data()[row * 12..(row + 1) * 12]
            .iter()
            .fold(f64::NEG_INFINITY, |acc, &v| {
                let (hi, lo) = if acc > v { (acc, v) } else { (v, acc) };
                if hi == f64::NEG_INFINITY { hi } else { hi + (lo - hi).exp().ln_1p() }
            });
        assert!(lse.abs() <= 1e-9, "row {row} logsumexp {lse}");
    }
}

#[test]
fn utterance_loss_reaches_every_parameter() {
    let cfg = ModelConfig {
        use_lpb: true,
        beta: 0.5,
        lpb_stop_gradient: false,
        ..small_cfg()
    };
    let model = Model::new(cfg, 19).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = rand_features(&mut rng, 16, 8);
    let tokens = [3usize, 4, 5, 3];
    let ld_ids = [2usize, 0, 1, 2];
    let out = model
        .utterance_loss(&x, &tokens, &ld_ids, &mut DropoutCtx::eval())
        .unwrap();
    assert!(out.ctc_feasible);
    assert!(out.total.scalar().is_finite());

    let expected = 0.3 * out.l_ctc.scalar()
        + 0.7 * out.l_att.scalar()
        + 0.5 * out.l_ld.as_ref().unwrap().scalar();
    assert!((out.total.scalar() - expected).abs() <= 1e-12);

    let grads = out.total.backward().unwrap();
    for (name, g) in grads_by_name(&model, &grads) {
        assert!(g.is_some(), "{name} is unreachable from the joint loss");
    }
}

#[test]
fn utterance_loss_without_language_decoder_has_no_ld_term() {
    let model = Model::new(small_cfg(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = rand_features(&mut rng, 16, 8);
    let out = model
        .utterance_loss(&x, &[3, 4, 5, 3], &[2, 0, 1, 2], &mut DropoutCtx::eval())
        .unwrap();
    assert!(out.l_ld.is_none());
    assert_eq!(model.ld_pass_count(), 0);
    let expected = 0.3 * out.l_ctc.scalar() + 0.7 * out.l_att.scalar();
    assert!((out.total.scalar() - expected).abs() <= 1e-12);
}

#[test]
fn param_visits_are_stable_unique_and_rebuildable() {
    let cfg = ModelConfig { use_lpb: true, beta: 0.5, ..small_cfg() };
    let mut model = Model::new(cfg, 23).unwrap();
    let snap = model.param_snapshot();
    let mut names: Vec<&String> = snap.iter().map(|(n, _, _)| n).collect();
    let total: usize = snap.iter().map(|(_, d, _)| d.len()).sum();
    assert_eq!(total, model.param_count());
    let before = names.len();
    names.sort();
    names.dedup();
    assert_eq!(before, names.len(), "duplicate parameter names");
    assert!(snap.iter().any(|(n, _, _)| n.starts_with("ld_decoder")));
    assert!(snap.iter().any(|(n, _, _)| n == "lpb_proj.w"));

    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = rand_features(&mut rng, 16, 8);
    let h_before = model.encode(&x, &mut DropoutCtx::eval()).unwrap();
    let mut i = 0;
    model.visit_params_mut(&mut |name, t| {
        assert_eq!(name, snap[i].0, "visit order changed");
        *t = Tensor::param(snap[i].1.clone(), &snap[i].2).unwrap();
        i += 1;
    });
    assert_eq!(i, snap.len());
    let h_after = model.encode(&x, &mut DropoutCtx::eval()).unwrap();
    assert_eq!(h_before.data(), h_after.data());
}

#[test]
fn same_seed_builds_identical_models() {
    let cfg = ModelConfig { beta: 0.5, ..small_cfg() };
    let a = Model::new(cfg.clone(), 42).unwrap();
    let b = Model::new(cfg.clone(), 42).unwrap();
    let c = Model::new(cfg, 43).unwrap();
    let (sa, sb, sc) = (a.param_snapshot(), b.param_snapshot(), c.param_snapshot());
    assert_eq!(sa, sb);
    assert_ne!(sa, sc);
}

#[test]
fn config_validation_rejects_inconsistent_setups() {
    assert!(small_cfg().validate().is_ok());
    let cases = [
        ModelConfig { heads: 5, ..small_cfg() },
        ModelConfig { alpha: 1.5, ..small_cfg() },
        ModelConfig { beta: -0.1, ..small_cfg() },
        ModelConfig { use_lpb: true, use_grl: true, beta: 0.5, ..small_cfg() },
        ModelConfig { use_grl: true, beta: 0.0, ..small_cfg() },
        ModelConfig { conv_kernel: 4, ..small_cfg() },
        ModelConfig { subsample_factor: 3, ..small_cfg() },
        ModelConfig { ld_vocab_size: 5, ..small_cfg() },
        ModelConfig { dropout: 1.0, ..small_cfg() },
        ModelConfig { label_smoothing: 1.0, ..small_cfg() },
    ];
    for (i, cfg) in cases.iter().enumerate() {
        assert!(cfg.validate().is_err(), "case {i} accepted");
        assert!(Model::new(cfg.clone(), 0).is_err(), "construction {i} accepted");
    }
}

#[test]
fn dropout_trains_stochastically_but_evaluates_deterministically() {
    let cfg = ModelConfig { dropout: 0.2, ..small_cfg() };
    let model = Model::new(cfg, 25).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let x = rand_features(&mut rng, 16, 8);

    let mut r1 = ChaCha8Rng::seed_from_u64(7);
    let mut r2 = ChaCha8Rng::seed_from_u64(7);
    let mut r3 = ChaCha8Rng::seed_from_u64(8);
    let a = model.encode(&x, &mut DropoutCtx::train(0.2, &mut r1)).unwrap();
    let b = model.encode(&x, &mut DropoutCtx::train(0.2, &mut r2)).unwrap();
    let c = model.encode(&x, &mut DropoutCtx::train(0.2, &mut r3)).unwrap();
    assert_eq!(a.data(), b.data(), "same dropout stream must reproduce");
    assert!(max_abs_diff(&a, &c) > 1e-8, "different dropout stream had no effect");
}
