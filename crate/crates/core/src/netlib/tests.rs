use super::*;
use crate::diffcore::{adam_step, AdamConfig, AdamState, ParamStore, Tape, Tensor};
use crate::rng::seeded;

fn small_cfg() -> TransformerConfig {
    TransformerConfig {
        layers: 4,
        heads: 2,
        embed_dim: 8,
        ffn_dim: 16,
        use_unet_skips: true,
        cross_attention: false,
        lora_rank: None,
    }
}

fn run(
    model: &Transformer,
    store: &ParamStore,
    x: &Tensor,
    time: Option<&Tensor>,
    cross: Option<&Tensor>,
) -> crate::Result<Tensor> {
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let tv = time.map(|t| tape.constant(t.clone()));
    let cv = cross.map(|c| CrossContext {
        states: tape.constant(c.clone()),
        key_mask: None,
    });
    let y = model.forward(&mut tape, store, xv, tv, cv)?;
    Ok(tape.value(y).clone())
}

#[test]
fn alibi_is_symmetric_with_zero_diagonal() {
    for len in [1, 2, 7, 64, 256] {
        for heads in [1, 4, 8] {
            let b = alibi_bias(len, heads);
            for h in 0..heads {
                for i in 0..len {
                    assert_eq!(b.get(h, i, i), 0.0);
                    for j in 0..i {
                        assert_eq!(b.get(h, i, j), b.get(h, j, i));
                    }
                }
            }
        }
    }
}

#[test]
fn alibi_first_of_eight_heads_has_half_slope() {
    let b = alibi_bias(4, 8);
    assert_eq!(b.slopes[0], 0.5);
    assert_eq!(b.get(0, 1, 2), -0.5);
    assert_eq!(b.get(7, 0, 3), -3.0 * 2f64.powi(-8));
}

#[test]
fn time_embedding_contract() {
    let e = sinusoidal_embed(0.0, 16).unwrap();
    assert!(e[..8].iter().all(|&v| v == 0.0));
    assert!(e[8..].iter().all(|&v| v == 1.0));
    assert!(sinusoidal_embed(0.5, 7).is_err());
    let grid: Vec<Vec<f64>> = (0..=32)
        .map(|i| sinusoidal_embed(i as f64 / 32.0, 64).unwrap())
        .collect();
    for (i, a) in grid.iter().enumerate() {
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        for b in &grid[..i] {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
            assert!(d > 1e-6);
        }
    }
}

#[test]
fn forward_shapes_and_finiteness() {
    let mut rng = seeded(1);
    let mut store = ParamStore::new();
    let model = Transformer::new(&mut store, "tf", &small_cfg(), &mut rng).unwrap();
    for t in [3, 6] {
        let x = Tensor::randn(&[2, t, 8], &mut rng);
        let te = Tensor::randn(&[2, 8], &mut rng);
        let y = run(&model, &store, &x, Some(&te), None).unwrap();
        assert_eq!(y.shape(), &[2, t, 8]);
        assert!(y.all_finite());
    }
}

#[test]
fn cross_context_rejected_when_disabled() {
    let mut rng = seeded(2);
    let mut store = ParamStore::new();
    let model = Transformer::new(&mut store, "tf", &small_cfg(), &mut rng).unwrap();
    let x = Tensor::randn(&[1, 3, 8], &mut rng);
    let c = Tensor::randn(&[1, 2, 8], &mut rng);
    assert!(run(&model, &store, &x, None, Some(&c)).is_err());
}

#[test]
fn config_validation() {
    let mut c = small_cfg();
    c.layers = 3;
    assert!(c.validate().is_err());
    c.layers = 4;
    c.heads = 3;
    assert!(c.validate().is_err());
}

#[test]
fn cross_attention_is_permutation_invariant_in_context() {
    let mut rng = seeded(3);
    let mut store = ParamStore::new();
    let cfg = TransformerConfig {
        cross_attention: true,
        ..small_cfg()
    };
    let model = Transformer::new(&mut store, "tf", &cfg, &mut rng).unwrap();
    let x = Tensor::randn(&[1, 5, 8], &mut rng);
    let te = Tensor::randn(&[1, 8], &mut rng);
    let ctx = Tensor::randn(&[1, 4, 8], &mut rng);
    let rows: Vec<&[f64]> = (0..4).map(|i| &ctx.data()[i * 8..(i + 1) * 8]).collect();
    let perm = [2, 0, 3, 1];
    let permuted = Tensor::new(
        vec![1, 4, 8],
        perm.iter().flat_map(|&i| rows[i].to_vec()).collect(),
    )
    .unwrap();
    let a = run(&model, &store, &x, Some(&te), Some(&ctx)).unwrap();
    let b = run(&model, &store, &x, Some(&te), Some(&permuted)).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn identity_skips_reproduce_the_plain_stack() {
    let mut rng = seeded(4);
    let mut store = ParamStore::new();
    let model = Transformer::new(&mut store, "tf", &small_cfg(), &mut rng).unwrap();
    model.init_skips_identity(&mut store);
    let mut plain = model.clone();
    plain.skips.clear();
    plain.config.use_unet_skips = false;
    let x = Tensor::randn(&[2, 5, 8], &mut rng);
    let te = Tensor::randn(&[2, 8], &mut rng);
    let a = run(&model, &store, &x, Some(&te), None).unwrap();
    let b = run(&plain, &store, &x, Some(&te), None).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn lora_at_init_is_exact_and_counts_match() {
    let mut rng = seeded(5);
    let mut store = ParamStore::new();
    let mut model = Transformer::new(&mut store, "tf", &small_cfg(), &mut rng).unwrap();
    let x = Tensor::randn(&[2, 5, 8], &mut rng);
    let te = Tensor::randn(&[2, 8], &mut rng);
    let base = run(&model, &store, &x, Some(&te), None).unwrap();
    let trainable = lora_wrap(&mut model, &mut store, 2, &mut rng).unwrap();
    // 4 layers × 3 projections × 2·r·D
    assert_eq!(trainable, 4 * 3 * 2 * 2 * 8);
    let wrapped = run(&model, &store, &x, Some(&te), None).unwrap();
    assert_eq!(base.max_abs_diff(&wrapped), 0.0);
    assert!(lora_wrap(&mut model.clone(), &mut store.clone(), 8, &mut rng).is_err());
}

#[test]
fn lora_training_leaves_base_weights_untouched() {
    let mut rng = seeded(6);
    let mut store = ParamStore::new();
    let mut model = Transformer::new(&mut store, "tf", &small_cfg(), &mut rng).unwrap();
    lora_wrap(&mut model, &mut store, 2, &mut rng).unwrap();
    let before = store.to_map();
    let x = Tensor::randn(&[2, 5, 8], &mut rng);
    let target = Tensor::randn(&[2, 5, 8], &mut rng);
    let mut state = AdamState::new(AdamConfig {
        lr: 1e-2,
        warmup_steps: 0,
        ..AdamConfig::default()
    });
    for _ in 0..2 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = model.forward(&mut tape, &store, xv, None, None).unwrap();
        let tv = tape.constant(target.clone());
        let loss = tape.mse(y, tv).unwrap();
        assert!(tape.value(loss).item() > 0.0);
        tape.backward(loss).unwrap().accumulate(&mut store);
        adam_step(&mut store, &mut state);
    }
    let after = store.to_map();
    let mut changed = 0;
    for (name, v) in &before {
        if name.contains("lora") {
            if v != &after[name] {
                changed += 1;
            }
        } else {
            let same = v
                .data()
                .iter()
                .zip(after[name].data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{name} changed");
        }
    }
    assert!(changed > 0);
}

#[test]
fn every_parameter_group_receives_gradient() {
    let mut rng = seeded(7);
    let mut store = ParamStore::new();
    let cfg = TransformerConfig {
        cross_attention: true,
        ..small_cfg()
    };
    let model = Transformer::new(&mut store, "tf", &cfg, &mut rng).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[2, 5, 8], &mut rng));
    let te = tape.constant(Tensor::randn(&[2, 8], &mut rng));
    let c = tape.constant(Tensor::randn(&[2, 3, 8], &mut rng));
    let y = model
        .forward(
            &mut tape,
            &store,
            x,
            Some(te),
            Some(CrossContext {
                states: c,
                key_mask: None,
            }),
        )
        .unwrap();
    let w = tape.constant(Tensor::randn(&[2, 5, 8], &mut rng));
    let p = tape.mul(y, w).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss).unwrap().accumulate(&mut store);
    for (_, p) in store.iter() {
        assert!(p.grad.norm() > 0.0, "{} has zero gradient", p.name);
    }
}

#[test]
fn voice_prompt_encoder_preserves_length_and_is_deterministic() {
    let mut rng = seeded(8);
    let mut store = ParamStore::new();
    let cfg = VoicePromptEncoderConfig {
        layers: 3,
        heads: 2,
        embed_dim: 8,
        ffn_dim: 16,
    };
    let enc = VoicePromptEncoder::new(&mut store, "vp", 4, &cfg, &mut rng).unwrap();
    let go = |frames: &Tensor| {
        let mut tape = Tape::no_grad();
        let f = tape.constant(frames.clone());
        let y = enc.forward(&mut tape, &store, f).unwrap();
        tape.value(y).clone()
    };
    let pseudo = Tensor::zeros(&[1, 1, 4]);
    assert_eq!(go(&pseudo), go(&pseudo));
    for p in [1, 3, 9] {
        assert_eq!(go(&Tensor::randn(&[1, p, 4], &mut rng)).shape(), &[1, p, 8]);
    }
    let mut tape = Tape::no_grad();
    let empty = tape.constant(Tensor::zeros(&[1, 0, 4]));
    assert!(enc.forward(&mut tape, &store, empty).is_err());
}

#[test]
fn mlp_field_gradient_check() {
    let mut rng = seeded(9);
    let mut store = ParamStore::new();
    let cfg = MlpFieldConfig {
        data_dim: 2,
        hidden: 6,
        layers: 2,
        time_dim: 4,
        time_scale: 1.0,
        classes: 3,
    };
    let f = MlpField::new(&mut store, "mlp", &cfg, &mut rng).unwrap();
    // every label row used, so no coordinate has an exactly-zero gradient
    let x = Tensor::randn(&[4, 2], &mut rng);
    let err = crate::diffcore::check_param_gradient(
        &mut store,
        |tape, s| {
            let xv = tape.constant(x.clone());
            let tv = tape.constant(Tensor::vector(vec![0.1, 0.5, 0.9, 0.3]));
            let y = f.forward(tape, s, xv, tv, Some(&[0, 3, 1, 2]))?;
            let sq = tape.square(y);
            Ok(tape.mean(sq))
        },
        // whole-network check: small coordinates need a tighter step
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
