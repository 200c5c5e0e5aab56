use std::collections::BTreeMap;

use super::*;
use crate::diffcore::Tensor;
use crate::rng::seeded;
use crate::Error;

fn sample_checkpoint() -> Checkpoint {
    let mut tensors = BTreeMap::new();
    tensors.insert(
        "a/w".to_string(),
        Tensor::new(
            vec![2, 3],
            vec![1.0, -0.0, f64::MIN_POSITIVE / 4.0, 1e300, -2.5, 0.1],
        )
        .unwrap(),
    );
    tensors.insert("a/b".to_string(), Tensor::scalar(f64::NAN));
    tensors.insert("z".to_string(), Tensor::zeros(&[0, 4]));
    Checkpoint {
        meta: CheckpointMeta {
            config_hash: format!("{:016x}", fnv1a(b"cfg")),
            step: 42,
            mode: Mode::FinetuneSpeech,
            lora_rank: Some(2),
        },
        tensors,
    }
}

fn bits(c: &Checkpoint) -> Vec<(String, Vec<usize>, Vec<u64>)> {
    c.tensors
        .iter()
        .map(|(k, t)| {
            (
                k.clone(),
                t.shape().to_vec(),
                t.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

#[test]
fn fnv1a_reference_values() {
    assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
    assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    assert_eq!(fnv1a(b"foobar"), 0x8594_4171_f739_67e8);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let c = sample_checkpoint();
    let bytes = c.encode().unwrap();
    assert_eq!(&bytes[..4], b"FBCK");
    assert_eq!(
        u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
        CHECKPOINT_VERSION
    );
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.meta, c.meta);
    assert_eq!(bits(&back), bits(&c));
    assert_eq!(back.encode().unwrap(), bytes);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("nested/ck.fbck");
    c.save(&p).unwrap();
    assert_eq!(bits(&Checkpoint::load(&p).unwrap()), bits(&c));
    assert_eq!(c.section("a/").len(), 2);
}

#[test]
fn checkpoint_rejects_bad_input() {
    let bytes = sample_checkpoint().encode().unwrap();
    let mut wrong = bytes.clone();
    wrong[4] = 9;
    match Checkpoint::decode(&wrong) {
        Err(Error::Checkpoint(m)) => assert!(m.contains("version 9")),
        other => panic!("{other:?}"),
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::decode(&magic).is_err());
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut trailing = bytes;
    trailing.push(0);
    assert!(Checkpoint::decode(&trailing).is_err());
}

#[test]
fn mmd_point_masses() {
    let a = Tensor::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
    let v = mmd2(&a, &b, Some(1.0)).unwrap();
    assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-15);
    assert!((energy_distance(&a, &b).unwrap() - 2.0).abs() < 1e-15);
    assert!(mmd2(&a, &b, Some(0.0)).is_err());
    let one = Tensor::from_rows(&[vec![0.0]]).unwrap();
    assert!(mmd2(&one, &b, None).is_err());
    assert!(energy_distance(&a, &one).is_err());
    let wide = Tensor::zeros(&[3, 2]);
    assert!(mmd2(&a, &wide, None).is_err());
}

#[test]
fn mmd_separates_shifted_gaussians() {
    let mut rng = seeded(4);
    let x = Tensor::randn(&[1000, 1], &mut rng);
    let y = Tensor::randn(&[1000, 1], &mut rng);
    let z = Tensor::randn(&[1000, 1], &mut rng).map(|v| v + 5.0);
    let same = mmd2(&x, &y, None).unwrap();
    let far = mmd2(&x, &z, None).unwrap();
    assert!(far > 10.0 * same.abs(), "{far} vs {same}");
    assert!((far - mmd2(&z, &x, None).unwrap()).abs() < 1e-12);
    let self_mmd = mmd2(&x, &x, None).unwrap();
    assert!(self_mmd <= 1e-2, "{self_mmd}");
    assert!(energy_distance(&x, &z).unwrap() > 10.0 * energy_distance(&x, &y).unwrap().abs());
}

#[test]
fn median_heuristic_on_a_line() {
    let a = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![3.0], vec![6.0]]).unwrap();
    // pairwise distances 1, 3, 6, 2, 5, 3: upper median 3
    assert_eq!(median_heuristic(&a, &b).unwrap(), 3.0);
}

#[test]
fn metrics_csv_schema_and_round_trip() {
    let mut m = MetricsReport::new("run-1");
    m.push(1, "loss", 0.5);
    m.push(2, "loss", 0.25);
    m.push(8, "error/midpoint", 1e-3);
    let csv = m.to_csv().unwrap();
    assert_eq!(csv.lines().next(), Some("run_id,step,metric,value"));
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(m.values("loss"), vec![0.5, 0.25]);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    m.write(&p).unwrap();
    assert_eq!(read_metrics(&p).unwrap(), m.rows());
    assert_eq!(
        MetricsReport::new("x").to_csv().unwrap(),
        "run_id,step,metric,value\n"
    );
}

fn well_formed(svg: &str) -> usize {
    let mut reader = quick_xml::Reader::from_str(svg);
    let mut elements = 0;
    loop {
        match reader.read_event() {
            Ok(quick_xml::events::Event::Eof) => break,
            Ok(quick_xml::events::Event::Start(_) | quick_xml::events::Event::Empty(_)) => {
                elements += 1
            }
            Ok(_) => {}
            Err(e) => panic!("malformed SVG: {e}"),
        }
    }
    elements
}

#[test]
fn error_plot_has_one_series_per_solver() {
    let mut m = MetricsReport::new("r");
    for (solver, pts) in [
        ("euler", vec![(4, 0.3), (8, 0.15)]),
        ("midpoint", vec![(8, 0.05), (16, 0.01)]),
        ("rk4", vec![(16, 1e-3), (32, 1e-5)]),
        ("dopri5", vec![(26, 1e-4)]),
        ("bespoke", vec![(8, 2e-3)]),
    ] {
        for (n, e) in pts {
            m.push(n, &format!("{ERROR_PREFIX}{solver}"), e);
        }
    }
    m.push(1, "loss", 1.0);
    let series = series_from_metrics(m.rows(), PlotKind::ErrorVsNfe).unwrap();
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    assert_eq!(labels, ["bespoke", "dopri5", "euler", "midpoint", "rk4"]);
    let svg = render_svg(PlotKind::ErrorVsNfe, "a < b & c", &series).unwrap();
    well_formed(&svg);
    assert_eq!(svg.matches(r#"class="series""#).count(), 5);
}

#[test]
fn scatter_draws_one_marker_per_sample() {
    let pts = Tensor::randn(&[300, 2], &mut seeded(1));
    let s = scatter_series("samples", &pts).unwrap();
    let svg = render_svg(PlotKind::Scatter2d, "scatter", &[s]).unwrap();
    well_formed(&svg);
    assert_eq!(svg.matches(r#"r="1.6""#).count(), 300);
    assert!(scatter_series("bad", &Tensor::zeros(&[3, 3])).is_err());
}

#[test]
fn empty_series_are_errors() {
    assert!(render_svg(PlotKind::LossCurve, "t", &[]).is_err());
    let empty = Series {
        label: "e".into(),
        points: vec![],
    };
    assert!(render_svg(PlotKind::LossCurve, "t", &[empty]).is_err());
    assert!(series_from_metrics(&[], PlotKind::LossCurve).is_err());
    assert!("bar-chart".parse::<PlotKind>().is_err());
    assert_eq!(
        "error-vs-nfe".parse::<PlotKind>().unwrap(),
        PlotKind::ErrorVsNfe
    );
}

#[test]
fn loss_curve_is_well_formed_with_constant_values() {
    let s = Series {
        label: "loss".into(),
        points: vec![(1.0, 2.0), (2.0, 2.0)],
    };
    let svg = render_svg(PlotKind::LossCurve, "flat", &[s]).unwrap();
    assert!(well_formed(&svg) > 10);
    assert!(!svg.contains("NaN"));
}

const MINIMAL: &str = r#"{"mode": "pretrain", "seed": 3, "corpus": "c", "out_dir": "o"}"#;

#[test]
fn config_defaults_and_seed_override() {
    let c = RunConfig::from_json_with_seed(MINIMAL, None).unwrap();
    assert_eq!(c.seed(), 3);
    assert_eq!(c.steps, 100);
    assert_eq!(c.solver, crate::odesolve::SolverConfig::default());
    let o = RunConfig::from_json_with_seed(MINIMAL, Some("17".into())).unwrap();
    assert_eq!(o.seed(), 17);
    assert_ne!(o.hash(), c.hash());
    assert!(o.run_id().starts_with("pretrain-"));
    assert!(RunConfig::from_json_with_seed(MINIMAL, Some("x".into())).is_err());
    let round = RunConfig::from_json_with_seed(&serde_json::to_string(&c).unwrap(), None).unwrap();
    assert_eq!(round, c);
}

#[test]
fn config_errors_list_every_field() {
    let text = r#"{"mode": "finetune-speech", "corpus": "c", "out_dir": "o", "steps": 0,
                   "cfg": {"weight": -1.0}, "optimizer": {"lr": 0.0, "beta1": 0.9, "beta2": 0.999,
                   "eps": 1e-8, "clip": null, "warmup_steps": 0}}"#;
    match RunConfig::from_json_with_seed(text, None) {
        Err(Error::Config(errs)) => {
            let all = errs.join("\n");
            for needle in ["seed", "init_checkpoint", "steps", "cfg", "optimizer.lr"] {
                assert!(all.contains(needle), "{needle} missing from {all}");
            }
        }
        other => panic!("{other:?}"),
    }
    let unknown = r#"{"mode": "pretrain", "seed": 1, "corpus": "c", "out_dir": "o", "stepz": 3}"#;
    assert!(RunConfig::from_json_with_seed(unknown, None).is_err());
    let lora = r#"{"mode": "pretrain", "seed": 1, "corpus": "c", "out_dir": "o", "lora_rank": 2}"#;
    assert!(RunConfig::from_json_with_seed(lora, None).is_err());
}

#[test]
fn modes_parse_from_cli_names() {
    for m in [
        "pretrain",
        "finetune-speech",
        "finetune-sound",
        "finetune-unified",
        "bespoke",
        "jointembed",
        "sample",
        "eval",
    ] {
        assert_eq!(m.parse::<Mode>().unwrap().name(), m);
    }
    assert!("train".parse::<Mode>().is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn checkpoint_round_trip(values in proptest::collection::vec(proptest::num::f64::ANY, 0..40), step in any::<u64>()) {
            let mut c = sample_checkpoint();
            c.meta.step = step;
            c.tensors.insert("p".into(), Tensor::vector(values));
            let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
            prop_assert_eq!(bits(&back), bits(&c));
            prop_assert_eq!(back.meta, c.meta);
        }

        #[test]
        fn mmd_is_symmetric(seed in 0u64..500, n in 2usize..30, m in 2usize..30) {
            let mut rng = seeded(seed);
            let a = Tensor::randn(&[n, 2], &mut rng);
            let b = Tensor::randn(&[m, 2], &mut rng);
            let d = mmd2(&a, &b, None).unwrap() - mmd2(&b, &a, None).unwrap();
            prop_assert!(d.abs() < 1e-12);
            let e = energy_distance(&a, &b).unwrap() - energy_distance(&b, &a).unwrap();
            prop_assert!(e.abs() < 1e-12);
        }
    }
}
