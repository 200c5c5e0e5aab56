use super::*;
use crate::rng::seeded;

#[test]
fn standard_normal_moments() {
    let x = gen_mixture(&MixtureSpec::standard_normal(2), 10_000, &mut seeded(1)).unwrap();
    let n = x.rows() as f64;
    let mean: Vec<f64> = (0..2)
        .map(|j| (0..x.rows()).map(|i| x.row(i)[j]).sum::<f64>() / n)
        .collect();
    for m in &mean {
        assert!(m.abs() < 0.05);
    }
    for a in 0..2 {
        for b in 0..2 {
            let c = (0..x.rows())
                .map(|i| (x.row(i)[a] - mean[a]) * (x.row(i)[b] - mean[b]))
                .sum::<f64>()
                / (n - 1.0);
            assert!((c - f64::from(a == b)).abs() < 0.05, "cov[{a}][{b}] = {c}");
        }
    }
}

#[test]
fn zero_weight_component_is_never_drawn() {
    let mut spec = MixtureSpec::eight_gaussians(2.0, 0.1);
    spec.means.truncate(2);
    spec.covs.truncate(2);
    spec.weights = vec![1.0, 0.0];
    let (_, labels) = gen_mixture_labeled(&spec, 500, &mut seeded(2)).unwrap();
    assert!(labels.iter().all(|&l| l == 0));
}

#[test]
fn non_pd_covariance_is_rejected() {
    let mut spec = MixtureSpec::gaussian_1d(0.0, 1.0);
    spec.covs[0][0][0] = -1.0;
    assert!(gen_mixture(&spec, 3, &mut seeded(0)).is_err());
    assert!(gen_mixture(&MixtureSpec::gaussian_1d(0.0, 1.0), 0, &mut seeded(0)).is_err());
}

#[test]
fn mixture_density_integrates_to_one() {
    let spec = MixtureSpec::gaussian_1d(3.0, 0.25);
    let h = 1e-3;
    let total: f64 = (0..6000)
        .map(|i| spec.log_density(&[i as f64 * h]).unwrap().exp() * h)
        .sum();
    assert!((total - 1.0).abs() < 1e-6);
}

fn small() -> CorpusConfig {
    CorpusConfig {
        train: 40,
        valid: 10,
        test: 10,
        ..CorpusConfig::default()
    }
}

#[test]
fn corpus_is_reproducible_and_disjoint() {
    let a = gen_aligned_corpus(&small(), 3).unwrap();
    let b = gen_aligned_corpus(&small(), 3).unwrap();
    assert_eq!(a, b);
    let mut ids: Vec<&str> = a.all().map(|u| u.id.as_str()).collect();
    let n = ids.len();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), n);
    for u in a.all() {
        assert_eq!(u.seq.total_frames(), u.len());
        assert_eq!(u.len(), 32);
    }
}

#[test]
fn noiseless_frames_equal_templates() {
    let cfg = CorpusConfig {
        noise_std: [0.0, 0.0],
        ..small()
    };
    let world = ToyWorld::new(&cfg).unwrap();
    let c = gen_aligned_corpus(&cfg, 5).unwrap();
    for u in c.all() {
        assert_eq!(
            u.frames,
            world.oracle_mean(&u.seq, u.style, &u.attributes).unwrap()
        );
    }
}

#[test]
fn fast_tokens_are_shorter_than_slow() {
    let world = ToyWorld::new(&small()).unwrap();
    let mut rng = seeded(6);
    let mut mean_dur = |rate| {
        let a = Attributes {
            rate,
            pitch: Pitch::Low,
            noise: Noise::Clean,
        };
        let u = world.utterance("u".into(), 0, a, &mut rng).unwrap();
        // drop the truncated last token
        let d = &u.seq.durations[..u.seq.durations.len() - 1];
        d.iter().sum::<usize>() as f64 / d.len() as f64
    };
    for _ in 0..20 {
        assert!(mean_dur(Rate::Fast) < mean_dur(Rate::Slow));
    }
}

#[test]
fn per_token_frame_mean_matches_template() {
    let world = ToyWorld::new(&small()).unwrap();
    let a = Attributes {
        rate: Rate::Normal,
        pitch: Pitch::High,
        noise: Noise::Noisy,
    };
    let mut rng = seeded(8);
    let (style, token) = (1, crate::flowmatch::FIRST_PHONE + 3);
    let c = world.config.channels;
    let mut sums = vec![0.0; c];
    let mut count = 0usize;
    for i in 0..1000 {
        let u = world
            .utterance(format!("u{i}"), style, a, &mut rng)
            .unwrap();
        for (f, tok) in u.seq.frame_aligned().iter().enumerate() {
            if *tok == token {
                for (s, v) in sums.iter_mut().zip(u.frames.row(f)) {
                    *s += v;
                }
                count += 1;
            }
        }
    }
    let se = world.oracle_std(&a) / (count as f64).sqrt();
    for (j, s) in sums.iter().enumerate() {
        let expected = world.templates[style][token][j] + world.config.pitch_offset[1];
        assert!((s / count as f64 - expected).abs() < 3.0 * se.max(1e-12) + 1e-12);
    }
}

#[test]
fn corpus_directory_round_trip() {
    let c = gen_aligned_corpus(&small(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &c).unwrap();
    let back = read_corpus(dir.path()).unwrap();
    assert_eq!(c, back);
    let bytes = std::fs::read(
        dir.path()
            .join("frames")
            .join(format!("{}.fbx", c.train[0].id)),
    )
    .unwrap();
    assert_eq!(&bytes[..4], b"FBX1");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 32);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
    let other = tempfile::tempdir().unwrap();
    write_corpus(other.path(), &gen_aligned_corpus(&small(), 9).unwrap()).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("manifest.jsonl")).unwrap(),
        std::fs::read(other.path().join("manifest.jsonl")).unwrap()
    );
    assert!(decode_frames(b"XXXX").is_err());
}

#[test]
fn voice_prompt_selection() {
    let c = gen_aligned_corpus(&small(), 10).unwrap();
    let mut rng = seeded(11);
    for target in c.train.iter().take(10) {
        let p = select_voice_prompt(&c.train, target, Some(0.1), &mut rng).unwrap();
        assert_eq!(p.style, target.style);
        assert_ne!(p.attributes, target.attributes);
    }
    let target = c.train[0].clone();
    let mut twin = target.clone();
    twin.id = "twin".into();
    let err = select_voice_prompt(&[target.clone(), twin], &target, None, &mut rng).unwrap_err();
    assert!(err.to_string().contains(&format!("style {}", target.style)));
}

#[test]
fn descriptions_use_disjoint_token_ranges() {
    let cfg = small();
    let mut seen = std::collections::BTreeSet::new();
    for a in Attributes::all() {
        for s in 0..cfg.styles {
            let d = cfg.describe(s, &a);
            assert_eq!(d.len(), 4);
            assert!(d.iter().all(|&t| t < cfg.null_description()));
            seen.insert(d);
        }
    }
    assert_eq!(seen.len(), 12 * cfg.styles);
}
