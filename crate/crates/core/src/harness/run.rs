//! Staged runs: pretraining, fine-tuning, distillation, joint embedding,
//! sampling and evaluation on a toy corpus directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::{toy_model_config, Mode, RunConfig};
use super::metrics::MetricsReport;
use super::plot::{render_svg, series_from_metrics, write_svg, PlotKind, ERROR_PREFIX};
use super::stats::{energy_distance, mmd2};
use crate::bespoke::{
    bespoke_sample, end_state_rmse, generate_gt, train_bespoke, BespokeParams, GroundTruthSet,
    SECTION as BESPOKE,
};
use crate::diffcore::{adam_step, AdamState, ParamStore, Tape, Tensor};
use crate::flowmatch::{
    build_pseudo_transcript, fm_batch_loss, generate_infill, sample_mask, splice, AudioModel,
    AudioModelConfig, ConditionBundle, ConditionFlags, FeatureSequence, OtPathConfig, FRAME_RATE,
    SILENCE_TOKEN,
};
use crate::jointembed::{
    retrieval_metrics, train_joint_embed, JointEmbedConfig, JointEmbedder, TrainPair,
};
use crate::netlib::lora_wrap;
use crate::odesolve::{integrate, GuidedTapeField, Method, SolverConfig, TapeField};
use crate::rng::{derive, Rng};
use crate::toydata::{encode_frames, read_corpus, select_voice_prompt, CorpusSplit, ToyUtterance};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.fbck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSS_PLOT: &str = "loss-curve.svg";
pub const ERROR_PLOT: &str = "error-vs-nfe.svg";
pub const RETRIEVAL_FILE: &str = "retrieval.csv";
pub const REPORT_FILE: &str = "report.md";

/// Parameter prefix of the flow model.
pub const MODEL_PREFIX: &str = "audio";
/// Parameter prefix of the joint embedder.
pub const EMBED_PREFIX: &str = "jointembed";

/// Additive noise level of voice-prompt augmentation during fine-tuning.
const PROMPT_AUGMENT: f64 = 0.1;
/// Checkpoints per unit time of the distillation references.
const GT_CHECKPOINTS: usize = 200;

// RNG stream labels
const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_NOISE: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub step: u64,
    pub checkpoint: Option<PathBuf>,
    pub metrics: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

struct Outputs {
    dir: PathBuf,
    metrics: MetricsReport,
    artifacts: Vec<PathBuf>,
}

impl Outputs {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn plot(&mut self, kind: PlotKind, title: &str, name: &str) -> Result<()> {
        let series = series_from_metrics(self.metrics.rows(), kind)?;
        let p = self.path(name);
        write_svg(&p, &render_svg(kind, title, &series)?)?;
        self.artifacts.push(p);
        Ok(())
    }
}

/// Executes `config.mode` and writes its artifacts under `config.out_dir`.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let corpus = read_corpus(&config.corpus)?;
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let mut out = Outputs {
        dir: config.out_dir.clone(),
        metrics: MetricsReport::new(config.run_id()),
        artifacts: Vec::new(),
    };
    let (step, checkpoint) = match config.mode {
        Mode::Jointembed => run_jointembed(config, &corpus, &mut out)?,
        _ => {
            let mut flow = FlowState::load(config, &corpus)?;
            match config.mode {
                Mode::Bespoke => run_bespoke(config, &corpus, &mut flow, &mut out)?,
                Mode::Sample | Mode::Eval => run_generate(config, &corpus, &flow, &mut out)?,
                _ => run_train(config, &corpus, &mut flow, &mut out)?,
            }
        }
    };
    let metrics = out.path(METRICS_FILE);
    out.metrics.write(&metrics)?;
    Ok(RunSummary {
        run_id: out.metrics.run_id().to_string(),
        step,
        checkpoint,
        metrics,
        artifacts: out.artifacts,
    })
}

struct FlowState {
    model: AudioModel,
    store: ParamStore,
    step: u64,
    bespoke: Option<BespokeParams>,
}

fn model_config(config: &RunConfig, corpus: &CorpusSplit) -> Result<AudioModelConfig> {
    let m = config
        .model
        .clone()
        .unwrap_or_else(|| toy_model_config(&corpus.config));
    let c = &corpus.config;
    let mut errs = Vec::new();
    if m.channels != c.channels {
        errs.push(format!(
            "model.channels {} but the corpus has {}",
            m.channels, c.channels
        ));
    }
    if m.token_vocab < c.token_vocab() {
        errs.push(format!(
            "model.token_vocab {} below the corpus vocabulary {}",
            m.token_vocab,
            c.token_vocab()
        ));
    }
    if m.description_vocab > 0 && m.description_vocab < c.description_vocab() {
        errs.push(format!(
            "model.description_vocab {} below the corpus description vocabulary {}",
            m.description_vocab,
            c.description_vocab()
        ));
    }
    if errs.is_empty() {
        Ok(m)
    } else {
        Err(Error::Config(errs))
    }
}

impl FlowState {
    fn load(config: &RunConfig, corpus: &CorpusSplit) -> Result<Self> {
        let mcfg = model_config(config, corpus)?;
        let mut rng = derive(config.seed(), STREAM_INIT);
        let mut store = ParamStore::new();
        let mut model = AudioModel::new(&mut store, MODEL_PREFIX, &mcfg, &mut rng)?;
        let mut step = 0;
        let mut bespoke = None;
        if let Some(path) = &config.init_checkpoint {
            let ckpt = Checkpoint::load(path)?;
            if let Some(r) = ckpt.meta.lora_rank {
                model.body.attach_lora(&mut store, r, &mut rng)?;
            }
            let copied = store.load_matching(&ckpt.section(&format!("{MODEL_PREFIX}.")))?;
            if copied.len() != store.len() {
                return Err(Error::Checkpoint(format!(
                    "{} holds {} of the {} model tensors; model configs differ",
                    path.display(),
                    copied.len(),
                    store.len()
                )));
            }
            step = ckpt.meta.step;
            let section = ckpt.section(BESPOKE);
            if !section.is_empty() {
                let mut s = ParamStore::new();
                for (k, v) in section {
                    s.add(k, v);
                }
                bespoke = Some(BespokeParams::from_store(&s)?);
            }
        }
        if let Some(r) = config.lora_rank {
            match model.body.config.lora_rank {
                None => {
                    lora_wrap(&mut model.body, &mut store, r, &mut rng)?;
                }
                Some(have) if have == r => {
                    store.set_all_trainable(false);
                    for name in model.body.lora_param_names(&store) {
                        let id = store.id(&name).expect("adapter registered");
                        store.get_mut(id).trainable = true;
                    }
                }
                Some(have) => {
                    return Err(Error::Config(vec![format!(
                        "lora_rank {r} differs from the initial checkpoint's rank {have}"
                    )]))
                }
            }
        }
        Ok(FlowState {
            model,
            store,
            step,
            bespoke,
        })
    }

    fn save(&self, config: &RunConfig, path: &Path, extra: BTreeMap<String, Tensor>) -> Result<()> {
        let mut tensors = self.store.to_map();
        tensors.extend(extra);
        Checkpoint {
            meta: CheckpointMeta {
                config_hash: config.hash_hex(),
                step: self.step,
                mode: config.mode,
                lora_rank: self.model.body.config.lora_rank,
            },
            tensors,
        }
        .save(path)
    }
}

/// Conditioning inputs a mode may supply.
fn available(mode: Mode, model: &AudioModelConfig) -> ConditionFlags {
    let vp = model.voice_prompt.is_some();
    let cap = model.description_vocab > 0;
    let (has_vp, has_cap) = match mode {
        Mode::Pretrain => (false, false),
        Mode::FinetuneSpeech => (vp, false),
        Mode::FinetuneSound => (false, cap),
        _ => (vp, cap),
    };
    ConditionFlags {
        has_ctx: true,
        has_vp,
        has_cap,
    }
}

fn frame_tokens(mode: Mode, u: &ToyUtterance) -> Result<Vec<usize>> {
    let t = u.len();
    Ok(match mode {
        Mode::Pretrain => vec![SILENCE_TOKEN; t],
        Mode::FinetuneSound => {
            let seq = build_pseudo_transcript(t as f64 / FRAME_RATE as f64, FRAME_RATE)?;
            seq.frame_aligned()
        }
        _ => u.seq.frame_aligned(),
    })
}

/// Builds the conditioning of `u`; `flags` selects which inputs survive.
fn bundle(
    mode: Mode,
    u: &ToyUtterance,
    corpus: &CorpusSplit,
    config: &RunConfig,
    flags: ConditionFlags,
    rng: &mut Rng,
) -> Result<ConditionBundle> {
    let mask = sample_mask(u.len(), &config.mask, rng)?;
    let mut b = ConditionBundle::new(frame_tokens(mode, u)?, &u.frames, mask)?;
    if flags.has_vp {
        b.voice_prompt =
            Some(select_voice_prompt(&corpus.train, u, Some(PROMPT_AUGMENT), rng)?.frames);
    }
    if flags.has_cap {
        b.description = Some(u.description.clone());
    }
    Ok(b.with_flags(flags))
}

fn run_train(
    config: &RunConfig,
    corpus: &CorpusSplit,
    flow: &mut FlowState,
    out: &mut Outputs,
) -> Result<(u64, Option<PathBuf>)> {
    if corpus.train.is_empty() {
        return Err(Error::Corpus("training split is empty".into()));
    }
    let mut rng = derive(config.seed(), STREAM_DATA);
    let avail = available(config.mode, &flow.model.config);
    let path = OtPathConfig::default();
    let mut adam = AdamState::new(config.optimizer.clone());
    let batch = config.batch.min(corpus.train.len());
    for _ in 0..config.steps {
        let idx = sample(&mut rng, corpus.train.len(), batch);
        let mut bundles = Vec::with_capacity(batch);
        let mut frames = Vec::with_capacity(batch);
        for i in idx.iter() {
            let u = &corpus.train[i];
            let flags = if config.mode == Mode::Pretrain {
                avail
            } else {
                let f = config.dropout.sample(&mut rng);
                ConditionFlags {
                    has_ctx: f.has_ctx,
                    has_vp: f.has_vp && avail.has_vp,
                    has_cap: f.has_cap && avail.has_cap,
                }
            };
            bundles.push(bundle(config.mode, u, corpus, config, flags, &mut rng)?);
            frames.push(u.frames.clone());
        }
        let x1 = Tensor::stack(&frames)?;
        let mut tape = Tape::new();
        let loss = fm_batch_loss(
            &mut tape,
            &flow.model,
            &flow.store,
            &x1,
            &bundles,
            &path,
            &mut rng,
        )?;
        let l = tape.value(loss.loss).item();
        if !l.is_finite() {
            return Err(Error::Diverged(format!(
                "loss {l} at step {}",
                flow.step + 1
            )));
        }
        tape.backward(loss.loss)?.accumulate(&mut flow.store);
        adam_step(&mut flow.store, &mut adam);
        flow.step += 1;
        out.metrics.push(flow.step, "loss", l);
    }
    let ckpt = out.path(CHECKPOINT_FILE);
    flow.save(config, &ckpt, BTreeMap::new())?;
    out.plot(
        PlotKind::LossCurve,
        &format!("{} loss", config.mode.name()),
        LOSS_PLOT,
    )?;
    Ok((flow.step, Some(ckpt)))
}

/// Test-time conditioning: every input the model accepts.
fn inference_bundles(
    config: &RunConfig,
    corpus: &CorpusSplit,
    pool: &[ToyUtterance],
    n: usize,
    model: &AudioModelConfig,
    rng: &mut Rng,
) -> Result<Vec<ConditionBundle>> {
    if pool.is_empty() {
        return Err(Error::Corpus("evaluation split is empty".into()));
    }
    let avail = available(Mode::FinetuneUnified, model);
    (0..n)
        .map(|i| {
            bundle(
                Mode::FinetuneUnified,
                &pool[i % pool.len()],
                corpus,
                config,
                avail,
                rng,
            )
        })
        .collect()
}

fn guided<'a>(
    flow: &'a FlowState,
    cond: &'a [ConditionBundle],
    uncond: &'a [ConditionBundle],
    w: f64,
) -> impl TapeField + 'a {
    GuidedTapeField {
        cond: flow.model.field(&flow.store, cond),
        uncond: flow.model.field(&flow.store, uncond),
        weight: w,
    }
}

fn reference_solver(config: &RunConfig) -> SolverConfig {
    if config.solver.method == Method::Dopri5 {
        config.solver.clone()
    } else {
        SolverConfig::dopri5(1e-5)
    }
}

fn run_bespoke(
    config: &RunConfig,
    corpus: &CorpusSplit,
    flow: &mut FlowState,
    out: &mut Outputs,
) -> Result<(u64, Option<PathBuf>)> {
    let mut rng = derive(config.seed(), STREAM_DATA);
    let m = config.bespoke_trajectories;
    let pool = if corpus.valid.is_empty() {
        &corpus.train
    } else {
        &corpus.valid
    };
    let cond = inference_bundles(config, corpus, pool, m, &flow.model.config, &mut rng)?;
    let uncond: Vec<ConditionBundle> = cond.iter().map(ConditionBundle::unconditional).collect();
    let (t, c) = (cond[0].len(), flow.model.config.channels);
    let x0 = Tensor::randn(&[m, t, c], &mut derive(config.seed(), STREAM_NOISE));
    let w = config.cfg.weight;
    let reference = reference_solver(config);

    let mut trajectories = Vec::new();
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (i, xi) in x0.unstack().into_iter().enumerate() {
        let field = guided(flow, &cond[i..=i], &uncond[i..=i], w);
        match generate_gt(
            &field,
            &xi.reshape(&[1, t, c])?,
            GT_CHECKPOINTS,
            w,
            &reference,
        ) {
            Ok(set) => {
                trajectories.extend(set.trajectories);
                kept.push(i);
            }
            Err(e) => skipped.push((i, e.to_string())),
        }
    }
    for (i, reason) in &skipped {
        out.metrics.push(*i as u64, "gt_skipped", 1.0);
        eprintln!("reference trajectory {i} skipped: {reason}");
    }
    let set = GroundTruthSet::new(GT_CHECKPOINTS, trajectories, skipped)?;
    let cond: Vec<ConditionBundle> = kept.iter().map(|&i| cond[i].clone()).collect();
    let uncond: Vec<ConditionBundle> = kept.iter().map(|&i| uncond[i].clone()).collect();
    let field = guided(flow, &cond, &uncond, w);

    let trained = train_bespoke(&field, &set, &config.bespoke)?;
    for (i, l) in trained.losses.iter().enumerate() {
        out.metrics.push(i as u64 + 1, "loss/bespoke", *l);
    }
    let method = config.bespoke.method;
    let nfe = (method.evals_per_step().expect("fixed method") * config.bespoke.n_steps) as u64;
    let rmse = end_state_rmse(&trained.params, method, &field, &set)?;
    out.metrics
        .push(nfe, &format!("{ERROR_PREFIX}bespoke"), rmse);
    for method in [Method::Euler, Method::Midpoint, Method::Rk4] {
        for steps in [2, 4, 8, 16] {
            let (x1, trace) = integrate(&field, set.x0(), &SolverConfig::fixed(method, steps))?;
            out.metrics.push(
                trace.nfe as u64,
                &format!("{ERROR_PREFIX}{}", method.name()),
                rms_diff(&x1, set.x1())?,
            );
        }
    }
    for tol in [1e-2, 1e-3, 1e-4] {
        let (x1, trace) = integrate(&field, set.x0(), &SolverConfig::dopri5(tol))?;
        out.metrics.push(
            trace.nfe as u64,
            &format!("{ERROR_PREFIX}dopri5"),
            rms_diff(&x1, set.x1())?,
        );
    }
    let ckpt = out.path(CHECKPOINT_FILE);
    flow.save(config, &ckpt, trained.params.to_store().to_map())?;
    out.plot(PlotKind::LossCurve, "bespoke distillation loss", LOSS_PLOT)?;
    out.plot(
        PlotKind::ErrorVsNfe,
        "end-state error against NFE",
        ERROR_PLOT,
    )?;
    Ok((flow.step, Some(ckpt)))
}

fn rms_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.sub(b)?;
    Ok((d.sq_norm() / d.len() as f64).sqrt())
}

/// Generated sequences plus evaluation counts.
struct Generated {
    sequences: Vec<FeatureSequence>,
    nfe: usize,
    model_calls: usize,
}

fn generate(
    config: &RunConfig,
    flow: &FlowState,
    cond: &[ConditionBundle],
    rng: &mut Rng,
) -> Result<Generated> {
    let w = config.cfg.weight;
    if config.use_bespoke {
        let params = flow.bespoke.as_ref().ok_or_else(|| {
            Error::Config(vec![
                "use_bespoke needs a checkpoint with bespoke parameters".into(),
            ])
        })?;
        let (t, c) = (cond[0].len(), flow.model.config.channels);
        let x0 = Tensor::randn(&[cond.len(), t, c], rng);
        let uncond: Vec<ConditionBundle> =
            cond.iter().map(ConditionBundle::unconditional).collect();
        let (x1, nfe) = if w == 0.0 {
            bespoke_sample(
                params,
                config.bespoke.method,
                &flow.model.field(&flow.store, cond),
                &x0,
            )?
        } else {
            bespoke_sample(
                params,
                config.bespoke.method,
                &guided(flow, cond, &uncond, w),
                &x0,
            )?
        };
        let sequences = x1
            .unstack()
            .iter()
            .zip(cond)
            .map(|(g, b)| splice(g, b))
            .collect::<Result<_>>()?;
        Ok(Generated {
            sequences,
            nfe,
            model_calls: if w == 0.0 { nfe } else { 2 * nfe },
        })
    } else {
        let guidance = (w > 0.0).then_some(config.cfg);
        let o = generate_infill(
            &flow.model,
            &flow.store,
            cond,
            &config.solver,
            guidance,
            rng,
        )?;
        Ok(Generated {
            sequences: o.sequences,
            nfe: o.trace.nfe,
            model_calls: o.model_calls,
        })
    }
}

/// Rows of the masked frames across all sequences.
fn masked_rows(seqs: impl Iterator<Item = (Tensor, Vec<bool>)>) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut c = 0;
    for (frames, mask) in seqs {
        c = frames.shape()[1];
        for (f, &m) in mask.iter().enumerate() {
            if m {
                rows.extend_from_slice(frames.row(f));
            }
        }
    }
    Tensor::new(vec![rows.len() / c.max(1), c], rows)
}

fn run_generate(
    config: &RunConfig,
    corpus: &CorpusSplit,
    flow: &FlowState,
    out: &mut Outputs,
) -> Result<(u64, Option<PathBuf>)> {
    let mut rng = derive(config.seed(), STREAM_DATA);
    let pool = if corpus.test.is_empty() {
        &corpus.valid
    } else {
        &corpus.test
    };
    let n = config.eval_samples;
    let cond = inference_bundles(config, corpus, pool, n, &flow.model.config, &mut rng)?;
    let g = generate(
        config,
        flow,
        &cond,
        &mut derive(config.seed(), STREAM_NOISE),
    )?;
    out.metrics.push(flow.step, "nfe", g.nfe as f64);
    out.metrics
        .push(flow.step, "model_calls", g.model_calls as f64);
    if config.mode == Mode::Sample {
        let dir = out.path("samples");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, s) in g.sequences.iter().enumerate() {
            let p = dir.join(format!("{:04}-{}.fbx", i, pool[i % pool.len()].id));
            fs::write(&p, encode_frames(&s.frames)?).map_err(|e| Error::io(&p, e))?;
            out.artifacts.push(p);
        }
        return Ok((flow.step, None));
    }
    let real =
        masked_rows((0..n).map(|i| (pool[i % pool.len()].frames.clone(), cond[i].mask.clone())))?;
    let fake = masked_rows(
        g.sequences
            .iter()
            .map(|s| (s.frames.clone(), s.mask.clone())),
    )?;
    let prior = Tensor::randn(real.shape(), &mut derive(config.seed(), STREAM_NOISE + 1));
    let mut lines = vec![
        "# Evaluation report".to_string(),
        String::new(),
        "Distribution metrics are desk-scale substitutes: unbiased Gaussian-kernel MMD² (median-heuristic".to_string(),
        "bandwidth) and energy distance between generated and reference masked frames stand in for".to_string(),
        "perceptual audio metrics, which need pretrained evaluators.".to_string(),
        String::new(),
        "| metric | value |".to_string(),
        "|---|---|".to_string(),
    ];
    if real.rows() >= 2 && fake.rows() >= 2 {
        let metrics = [
            ("mmd2", mmd2(&fake, &real, None)?),
            ("mmd2/prior", mmd2(&prior, &real, None)?),
            ("energy", energy_distance(&fake, &real)?),
            ("energy/prior", energy_distance(&prior, &real)?),
            ("mse/masked", fake.sub(&real)?.sq_norm() / real.len() as f64),
        ];
        for (k, v) in metrics {
            out.metrics.push(flow.step, k, v);
            lines.push(format!("| {k} | {v:.6} |"));
        }
    } else {
        lines.push("| masked frames | fewer than 2; distribution metrics skipped |".to_string());
    }
    lines.push(format!("| nfe | {} |", g.nfe));
    lines.push(format!("| model_calls | {} |", g.model_calls));
    let report = out.path(REPORT_FILE);
    fs::write(&report, lines.join("\n") + "\n").map_err(|e| Error::io(&report, e))?;
    out.artifacts.push(report);
    Ok((flow.step, None))
}

fn pairs(utts: &[ToyUtterance]) -> Vec<TrainPair> {
    utts.iter()
        .map(|u| TrainPair {
            frames: u.frames.clone(),
            description: u.description.clone(),
        })
        .collect()
}

fn run_jointembed(
    config: &RunConfig,
    corpus: &CorpusSplit,
    out: &mut Outputs,
) -> Result<(u64, Option<PathBuf>)> {
    let jcfg = config.jointembed.clone().unwrap_or_else(|| {
        let mut j =
            JointEmbedConfig::new(corpus.config.channels, corpus.config.description_vocab());
        j.steps = config.steps;
        j.batch = config.batch.max(2);
        j
    });
    let mut store = ParamStore::new();
    let model = JointEmbedder::new(
        &mut store,
        EMBED_PREFIX,
        &jcfg,
        &mut derive(config.seed(), STREAM_INIT),
    )?;
    let valid = if corpus.valid.is_empty() {
        &corpus.train
    } else {
        &corpus.valid
    };
    let trained = train_joint_embed(
        &model,
        &mut store,
        &pairs(&corpus.train),
        &pairs(valid),
        &mut derive(config.seed(), STREAM_DATA),
    )?;
    for (i, l) in trained.losses.iter().enumerate() {
        out.metrics.push(i as u64 + 1, "loss", *l);
    }
    for (s, r) in &trained.validation {
        out.metrics.push(*s as u64, "a2t@10/valid", *r);
    }
    let test = if corpus.test.is_empty() {
        valid
    } else {
        &corpus.test
    };
    let seqs: Vec<&Tensor> = test.iter().map(|u| &u.frames).collect();
    let descs: Vec<&[usize]> = test.iter().map(|u| u.description.as_slice()).collect();
    let report = retrieval_metrics(
        &model.embed_sequences(&store, &seqs)?,
        &model.embed_descriptions(&store, &descs)?,
    )?;
    let step = trained.best_step as u64;
    for (dir, r) in [("a2t", report.a2t), ("t2a", report.t2a)] {
        for (k, v) in crate::jointembed::RECALL_KS.iter().zip(r) {
            out.metrics.push(step, &format!("recall/{dir}@{k}"), v);
        }
    }
    let rp = out.path(RETRIEVAL_FILE);
    fs::write(&rp, report.to_csv()).map_err(|e| Error::io(&rp, e))?;
    out.artifacts.push(rp);
    let ckpt = out.path(CHECKPOINT_FILE);
    Checkpoint {
        meta: CheckpointMeta {
            config_hash: config.hash_hex(),
            step,
            mode: config.mode,
            lora_rank: None,
        },
        tensors: store.to_map(),
    }
    .save(&ckpt)?;
    out.plot(PlotKind::LossCurve, "joint embedding loss", LOSS_PLOT)?;
    Ok((step, Some(ckpt)))
}
