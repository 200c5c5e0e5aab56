use std::path::{Path, PathBuf};
use std::process::Command;

use flowbox::harness::{
    read_metrics, run, Checkpoint, Mode, RunConfig, CHECKPOINT_FILE, ERROR_PLOT, LOSS_PLOT,
    METRICS_FILE, REPORT_FILE, RETRIEVAL_FILE,
};
use flowbox::toydata::{gen_aligned_corpus, write_corpus, CorpusConfig};
use flowbox::Error;

fn tiny_corpus(dir: &Path) -> PathBuf {
    let cfg = CorpusConfig {
        frames: 16,
        train: 24,
        valid: 6,
        test: 6,
        ..CorpusConfig::default()
    };
    let p = dir.join("corpus");
    write_corpus(&p, &gen_aligned_corpus(&cfg, 5).unwrap()).unwrap();
    p
}

fn config(mode: Mode, corpus: &Path, out: &Path) -> RunConfig {
    let mut c = RunConfig::new(mode, 11, corpus, out);
    c.steps = 5;
    c.batch = 4;
    c.optimizer.lr = 1e-3;
    c.optimizer.warmup_steps = 0;
    c
}

fn base_tensors(c: &Checkpoint) -> Vec<(String, Vec<u64>)> {
    c.tensors
        .iter()
        .filter(|(k, _)| !k.contains("lora"))
        .map(|(k, t)| (k.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn staged_training_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(tmp.path());

    let pre = config(Mode::Pretrain, &corpus, &tmp.path().join("pre"));
    let s0 = run(&pre).unwrap();
    let ck0 = s0.checkpoint.clone().unwrap();
    assert!(ck0.exists());
    assert_eq!(s0.step, 5);
    let rows = read_metrics(&s0.metrics).unwrap();
    assert_eq!(rows.iter().filter(|r| r.metric == "loss").count(), 5);
    assert!(tmp.path().join("pre").join(LOSS_PLOT).exists());

    let mut ft = config(Mode::FinetuneSpeech, &corpus, &tmp.path().join("ft1"));
    ft.init_checkpoint = Some(ck0.clone());
    ft.lora_rank = Some(4);
    ft.mask = flowbox::flowmatch::MaskSpec::finetune();
    ft.steps = 3;
    let s1 = run(&ft).unwrap();
    assert_eq!(s1.step, 8);
    let c0 = Checkpoint::load(&ck0).unwrap();
    let c1 = Checkpoint::load(s1.checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(base_tensors(&c0), base_tensors(&c1));
    assert!(c1.tensors.keys().any(|k| k.contains("lora")));
    assert_eq!(c1.meta.lora_rank, Some(4));
    assert_ne!(c0.meta.config_hash, c1.meta.config_hash);

    let mut ft2 = ft.clone();
    ft2.mode = Mode::FinetuneUnified;
    ft2.out_dir = tmp.path().join("ft2");
    ft2.init_checkpoint = s1.checkpoint.clone();
    let s2 = run(&ft2).unwrap();
    assert_eq!(s2.step, 11);
    let c2 = Checkpoint::load(s2.checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(base_tensors(&c0), base_tensors(&c2));
    assert_ne!(c1.meta.config_hash, c2.meta.config_hash);

    let mut full = config(Mode::FinetuneSound, &corpus, &tmp.path().join("ft3"));
    full.init_checkpoint = Some(ck0.clone());
    full.steps = 2;
    let s3 = run(&full).unwrap();
    assert_eq!(s3.step, 7);
    let c3 = Checkpoint::load(s3.checkpoint.as_ref().unwrap()).unwrap();
    assert_ne!(base_tensors(&c0), base_tensors(&c3));

    let mut be = config(Mode::Bespoke, &corpus, &tmp.path().join("bespoke"));
    be.init_checkpoint = Some(ck0.clone());
    be.bespoke_trajectories = 2;
    be.bespoke.iterations = 4;
    let sb = run(&be).unwrap();
    let cb = Checkpoint::load(sb.checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(cb.tensors["bespoke/theta_r"].len(), 4);
    assert_eq!(cb.tensors["bespoke/theta_s"].len(), 5);
    let svg = std::fs::read_to_string(tmp.path().join("bespoke").join(ERROR_PLOT)).unwrap();
    assert_eq!(svg.matches(r#"class="series""#).count(), 5);

    let mut sa = config(Mode::Sample, &corpus, &tmp.path().join("sample"));
    sa.init_checkpoint = sb.checkpoint.clone();
    sa.use_bespoke = true;
    sa.eval_samples = 3;
    let ss = run(&sa).unwrap();
    assert_eq!(ss.artifacts.len(), 3);
    let rows = read_metrics(&ss.metrics).unwrap();
    let get = |m: &str| rows.iter().find(|r| r.metric == m).unwrap().value;
    assert_eq!(get("nfe"), 8.0);
    assert_eq!(get("model_calls"), 16.0);

    let mut ev = config(Mode::Eval, &corpus, &tmp.path().join("eval"));
    ev.init_checkpoint = Some(ck0);
    ev.eval_samples = 4;
    run(&ev).unwrap();
    let report = std::fs::read_to_string(tmp.path().join("eval").join(REPORT_FILE)).unwrap();
    assert!(report.contains("MMD²"));
    let rows = read_metrics(&tmp.path().join("eval").join(METRICS_FILE)).unwrap();
    assert!(rows.iter().any(|r| r.metric == "mmd2"));
    assert_eq!(
        rows.iter()
            .find(|r| r.metric == "model_calls")
            .unwrap()
            .value,
        64.0
    );
}

#[test]
fn identical_seed_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(tmp.path());
    let a = run(&config(Mode::Pretrain, &corpus, &tmp.path().join("a"))).unwrap();
    let b = run(&config(Mode::Pretrain, &corpus, &tmp.path().join("b"))).unwrap();
    assert_eq!(
        std::fs::read(&a.metrics).unwrap(),
        std::fs::read(&b.metrics).unwrap()
    );
    let mut other = config(Mode::Pretrain, &corpus, &tmp.path().join("c"));
    other.seed = Some(12);
    let c = run(&other).unwrap();
    assert_ne!(
        std::fs::read(&a.metrics).unwrap(),
        std::fs::read(&c.metrics).unwrap()
    );
}

#[test]
fn finetune_without_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(tmp.path());
    match run(&config(
        Mode::FinetuneSpeech,
        &corpus,
        &tmp.path().join("x"),
    )) {
        Err(Error::Config(e)) => assert!(e.iter().any(|m| m.contains("init_checkpoint"))),
        other => panic!("{other:?}"),
    }
    let mut missing = config(Mode::FinetuneSpeech, &corpus, &tmp.path().join("y"));
    missing.init_checkpoint = Some(tmp.path().join("nope.fbck"));
    assert!(matches!(run(&missing), Err(Error::Io { .. })));
}

#[test]
fn jointembed_mode_writes_retrieval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(tmp.path());
    let mut c = config(Mode::Jointembed, &corpus, &tmp.path().join("je"));
    c.batch = 8;
    let s = run(&c).unwrap();
    let csv = std::fs::read_to_string(tmp.path().join("je").join(RETRIEVAL_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(Checkpoint::load(s.checkpoint.as_ref().unwrap())
        .unwrap()
        .tensors
        .contains_key("jointembed.log_tau"));
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_flowbox");
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let corpus_cfg = tmp.path().join("corpus.json");
    std::fs::write(
        &corpus_cfg,
        serde_json::to_string(&CorpusConfig {
            frames: 12,
            train: 16,
            valid: 4,
            test: 4,
            ..CorpusConfig::default()
        })
        .unwrap(),
    )
    .unwrap();
    let ok = Command::new(bin)
        .args(["gen-data", "--seed", "3", "--out"])
        .arg(&data)
        .arg("--config")
        .arg(&corpus_cfg)
        .status()
        .unwrap();
    assert!(ok.success());
    let out = tmp.path().join("run");
    let status = Command::new(bin)
        .args([
            "pretrain", "--seed", "1", "--steps", "2", "--batch", "2", "--corpus",
        ])
        .arg(&data)
        .arg("--out-dir")
        .arg(&out)
        .env_remove("FLOWBOX_SEED")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join(CHECKPOINT_FILE).exists());
    let plot = Command::new(bin)
        .args(["plot", "--kind", "loss-curve", "--metrics"])
        .arg(out.join(METRICS_FILE))
        .arg("--out")
        .arg(tmp.path().join("loss.svg"))
        .status()
        .unwrap();
    assert!(plot.success());
    let bad = Command::new(bin)
        .args(["finetune", "--seed", "1", "--corpus"])
        .arg(&data)
        .arg("--out-dir")
        .arg(tmp.path().join("ft"))
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("init_checkpoint"));
    let unseeded = Command::new(bin)
        .args(["pretrain", "--corpus"])
        .arg(&data)
        .arg("--out-dir")
        .arg(tmp.path().join("u"))
        .env_remove("FLOWBOX_SEED")
        .status()
        .unwrap();
    assert!(!unseeded.success());
    let seeded_env = Command::new(bin)
        .args(["pretrain", "--steps", "1", "--batch", "2", "--corpus"])
        .arg(&data)
        .arg("--out-dir")
        .arg(tmp.path().join("e"))
        .env("FLOWBOX_SEED", "9")
        .status()
        .unwrap();
    assert!(seeded_env.success());
    assert!(!Command::new(bin).arg("bogus").status().unwrap().success());
}
