use super::*;
use crate::diffcore::{check_input_gradient, check_param_gradient};
use crate::rng::seeded;
use crate::toydata::{gen_aligned_corpus, CorpusConfig};

fn loss_value(ea: &Tensor, et: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let a = tape.constant(ea.clone());
    let t = tape.constant(et.clone());
    let tau = tape.constant(Tensor::scalar(tau));
    let l = contrastive_loss(&mut tape, a, t, tau)?;
    Ok(tape.value(l).item())
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
    let mut tape = Tape::no_grad();
    let v = tape.constant(Tensor::randn(&[n, d], &mut seeded(seed)));
    let v = tape.l2_normalize(v);
    tape.value(v).clone()
}

fn tiny() -> (JointEmbedder, ParamStore) {
    let mut cfg = JointEmbedConfig::new(3, 6);
    cfg.sequence.embed_dim = 8;
    cfg.sequence.ffn_dim = 16;
    cfg.text = cfg.sequence.clone();
    cfg.embed_dim = 4;
    let mut store = ParamStore::new();
    let m = JointEmbedder::new(&mut store, "je", &cfg, &mut seeded(0)).unwrap();
    (m, store)
}

#[test]
fn orthonormal_pair_case() {
    let e = Tensor::eye(2);
    let l = loss_value(&e, &e, 1.0).unwrap();
    assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12, "{l}");
}

#[test]
fn single_pair_has_zero_loss() {
    let a = unit_rows(1, 5, 1);
    let t = unit_rows(1, 5, 2);
    assert!(loss_value(&a, &t, 0.3).unwrap().abs() < 1e-15);
}

#[test]
fn loss_is_symmetric_and_permutation_invariant() {
    let a = unit_rows(6, 4, 3);
    let t = unit_rows(6, 4, 4);
    let l = loss_value(&a, &t, 0.5).unwrap();
    assert!((l - loss_value(&t, &a, 0.5).unwrap()).abs() < 1e-12);
    let perm = [3, 0, 5, 1, 4, 2];
    let pa = Tensor::stack(&perm.map(|i| Tensor::vector(a.row(i).to_vec()))).unwrap();
    let pt = Tensor::stack(&perm.map(|i| Tensor::vector(t.row(i).to_vec()))).unwrap();
    assert!((l - loss_value(&pa, &pt, 0.5).unwrap()).abs() < 1e-12);
    assert!(l > 0.0);
}

#[test]
fn loss_vanishes_as_temperature_shrinks() {
    let e = Tensor::eye(4);
    let l = loss_value(&e, &e, 0.01).unwrap();
    assert!(l < 1e-40, "{l}");
}

#[test]
fn empty_batch_is_an_error() {
    let z = Tensor::zeros(&[0, 3]);
    assert!(loss_value(&z, &z, 1.0).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let a = unit_rows(5, 3, 5);
    let t = unit_rows(5, 3, 6);
    for (which, point) in [(0, &a), (1, &t)] {
        let err = check_input_gradient(
            |tape, x| {
                let other = tape.constant(if which == 0 { t.clone() } else { a.clone() });
                let tau = tape.constant(Tensor::scalar(0.7));
                let x = tape.l2_normalize(x);
                if which == 0 {
                    contrastive_loss(tape, x, other, tau)
                } else {
                    contrastive_loss(tape, other, x, tau)
                }
            },
            point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
    let err = check_input_gradient(
        |tape, tau| {
            let (x, y) = (tape.constant(a.clone()), tape.constant(t.clone()));
            contrastive_loss(tape, x, y, tau)
        },
        &Tensor::scalar(0.4),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let (m, mut store) = tiny();
    let mut rng = seeded(9);
    let seqs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 3], &mut rng)).collect();
    let descs = [vec![0, 1, 2], vec![3, 4, 5], vec![1, 1, 0]];
    let err = check_param_gradient(
        &mut store,
        |tape, s| {
            let refs: Vec<&Tensor> = seqs.iter().collect();
            let d: Vec<&[usize]> = descs.iter().map(Vec::as_slice).collect();
            let ea = m.encode_sequences(tape, s, &refs)?;
            let et = m.encode_descriptions(tape, s, &d)?;
            let tau = m.temperature(tape, s);
            contrastive_loss(tape, ea, et, tau)
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn embeddings_are_unit_norm_and_deterministic() {
    let (m, store) = tiny();
    let mut rng = seeded(10);
    let a = Tensor::randn(&[7, 3], &mut rng);
    let b = Tensor::randn(&[5, 3], &mut rng);
    let e1 = m.embed_sequences(&store, &[&a, &b]).unwrap();
    let e2 = m.embed_sequences(&store, &[&a, &b]).unwrap();
    assert_eq!(e1, e2);
    let solo = m.embed_sequences(&store, &[&b]).unwrap();
    assert!(
        solo.max_abs_diff(&Tensor::vector(e1.row(1).to_vec()).reshape(&[1, 4]).unwrap()) < 1e-12
    );
    let et = m
        .embed_descriptions(&store, &[&[0, 1], &[2, 3, 4]])
        .unwrap();
    for e in [&e1, &et] {
        for i in 0..e.rows() {
            let n: f64 = e.row(i).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }
    assert!(m
        .embed_sequences(&store, &[&Tensor::zeros(&[0, 3])])
        .is_err());
}

#[test]
fn temperature_is_clamped() {
    let (m, mut store) = tiny();
    assert!((m.tau(&store) - 1.0).abs() < 1e-15);
    let id = store.id("je.log_tau").unwrap();
    store.get_mut(id).value = Tensor::scalar(50.0);
    m.clamp_temperature(&mut store);
    assert!((m.tau(&store) - TAU_MAX).abs() < 1e-9);
}

#[test]
fn recall_on_identical_pairs_is_perfect() {
    let e = Tensor::eye(12);
    let r = retrieval_metrics(&e, &e).unwrap();
    assert_eq!(r.a2t, [1.0; 3]);
    assert_eq!(r.t2a, [1.0; 3]);
}

#[test]
fn constant_rows_fall_back_to_index_order() {
    let n = 20;
    let ea = Tensor::new(vec![n, 2], [0.6, 0.8].repeat(n)).unwrap();
    let et = unit_rows(n, 2, 11);
    let r = retrieval_metrics(&ea, &et).unwrap();
    assert_eq!(r.t2a, [1.0 / 20.0, 5.0 / 20.0, 10.0 / 20.0]);
}

#[test]
fn report_csv_lists_six_rows() {
    let e = Tensor::eye(3);
    let csv = retrieval_metrics(&e, &e).unwrap().to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "direction,k,recall");
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[6], "t2a,10,1");
}

#[test]
fn rerank_contract() {
    let (m, store) = tiny();
    let mut rng = seeded(12);
    let c: Vec<Tensor> = (0..6).map(|_| Tensor::randn(&[5, 3], &mut rng)).collect();
    let refs: Vec<&Tensor> = c.iter().collect();
    let r = rerank(&refs, &[1, 2], &m, &store).unwrap();
    assert_eq!(r.scores.len(), 6);
    assert_eq!(
        r.best_score,
        r.scores.iter().cloned().fold(f64::MIN, f64::max)
    );
    let rev: Vec<&Tensor> = refs.iter().rev().copied().collect();
    let rr = rerank(&rev, &[1, 2], &m, &store).unwrap();
    assert_eq!(rr.best, 5 - r.best);
    let one = rerank(&refs[..1], &[1, 2], &m, &store).unwrap();
    assert_eq!(one.best, 0);
    assert!(rerank(&[], &[1, 2], &m, &store).is_err());
    let dup = rerank(&[refs[0], refs[0]], &[1, 2], &m, &store).unwrap();
    assert_eq!(dup.best, 0);
}

#[test]
fn training_improves_validation_recall() {
    let cc = CorpusConfig {
        train: 120,
        valid: 30,
        test: 0,
        ..CorpusConfig::default()
    };
    let corpus = gen_aligned_corpus(&cc, 3).unwrap();
    let pairs = |u: &[crate::toydata::ToyUtterance]| -> Vec<TrainPair> {
        u.iter()
            .map(|u| TrainPair {
                frames: u.frames.clone(),
                description: u.description.clone(),
            })
            .collect()
    };
    let mut cfg = JointEmbedConfig::new(cc.channels, cc.description_vocab());
    cfg.steps = 60;
    cfg.eval_every = 20;
    let mut store = ParamStore::new();
    let m = JointEmbedder::new(&mut store, "je", &cfg, &mut seeded(1)).unwrap();
    let out = train_joint_embed(
        &m,
        &mut store,
        &pairs(&corpus.train),
        &pairs(&corpus.valid),
        &mut seeded(2),
    )
    .unwrap();
    assert_eq!(out.losses.len(), 60);
    assert!(out.losses[50..].iter().sum::<f64>() < out.losses[..10].iter().sum::<f64>());
    assert!(out.best_a2t10 >= out.validation[0].1);
}

#[test]
fn config_errors_are_listed() {
    let mut cfg = JointEmbedConfig::new(0, 4);
    cfg.tau_init = 0.0;
    match cfg.validate() {
        Err(Error::Config(e)) => assert_eq!(e.len(), 2),
        other => panic!("{other:?}"),
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn loss_positive_and_permutation_invariant(seed in 0u64..1000, n in 2usize..8, tau in 0.05f64..5.0) {
            let a = unit_rows(n, 3, seed);
            let t = unit_rows(n, 3, seed + 5000);
            let l = loss_value(&a, &t, tau).unwrap();
            prop_assert!(l > 0.0);
            let rot: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
            let pa = Tensor::stack(&rot.iter().map(|&i| Tensor::vector(a.row(i).to_vec())).collect::<Vec<_>>()).unwrap();
            let pt = Tensor::stack(&rot.iter().map(|&i| Tensor::vector(t.row(i).to_vec())).collect::<Vec<_>>()).unwrap();
            prop_assert!((l - loss_value(&pa, &pt, tau).unwrap()).abs() < 1e-10);
        }
    }
}
