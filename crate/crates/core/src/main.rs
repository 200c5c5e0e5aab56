use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use flowbox::harness::{
    read_metrics, render_svg, run, scatter_series, series_from_metrics, write_svg, PlotKind,
    RunConfig,
};
use flowbox::toydata::{decode_frames, gen_aligned_corpus, write_corpus, CorpusConfig};
use flowbox::{Error, Result};

#[derive(Parser)]
#[command(
    name = "flowbox",
    version,
    about = "Toy-scale conditional flow matching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic aligned corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Corpus config JSON; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Masked-infilling pretraining.
    Pretrain(RunArgs),
    /// Fine-tune from a checkpoint.
    Finetune {
        #[arg(long, value_enum, default_value = "unified")]
        stage: Stage,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Distil a few-step sampler from a trained model.
    Bespoke(RunArgs),
    /// Train the contrastive embedder.
    Jointembed(RunArgs),
    /// Generate sequences from a checkpoint.
    Sample(RunArgs),
    /// Generate and score against held-out frames.
    Eval(RunArgs),
    /// Render an SVG chart.
    Plot {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV (loss-curve, error-vs-nfe).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// `[N, 2]` frame file (scatter2d).
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long, default_value = "")]
        title: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Speech,
    Sound,
    Unified,
}

/// Flags override the matching fields of the config file.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    cfg_weight: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// euler, midpoint, rk4 or dopri5.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    use_bespoke: bool,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn object<'a>(v: &'a mut Value, key: &str) -> Result<&'a mut Map<String, Value>> {
    let root = v
        .as_object_mut()
        .ok_or_else(|| Error::Config(vec!["config must be a JSON object".into()]))?;
    let entry = root.entry(key).or_insert_with(|| json!({}));
    entry
        .as_object_mut()
        .ok_or_else(|| Error::Config(vec![format!("{key} must be an object")]))
}

fn build_config(mode: &str, args: &RunArgs) -> Result<RunConfig> {
    let mut v = match &args.config {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    let root = v
        .as_object_mut()
        .ok_or_else(|| Error::Config(vec!["config must be a JSON object".into()]))?;
    root.insert("mode".into(), json!(mode));
    let mut set = |k: &str, x: Option<Value>| {
        if let Some(x) = x {
            root.insert(k.into(), x);
        }
    };
    set("seed", args.seed.map(|s| json!(s)));
    set("corpus", args.corpus.as_ref().map(|p| json!(p)));
    set("out_dir", args.out_dir.as_ref().map(|p| json!(p)));
    set("run_id", args.run_id.as_ref().map(|s| json!(s)));
    set("steps", args.steps.map(|s| json!(s)));
    set("batch", args.batch.map(|s| json!(s)));
    set(
        "init_checkpoint",
        args.init_checkpoint.as_ref().map(|p| json!(p)),
    );
    set("lora_rank", args.lora_rank.map(|s| json!(s)));
    set("eval_samples", args.eval_samples.map(|s| json!(s)));
    if args.use_bespoke {
        set("use_bespoke", Some(json!(true)));
    }
    if let Some(w) = args.cfg_weight {
        object(&mut v, "cfg")?.insert("weight".into(), json!(w));
    }
    if let Some(lr) = args.lr {
        let opt = object(&mut v, "optimizer")?;
        if opt.is_empty() {
            *opt = serde_json::to_value(flowbox::diffcore::AdamConfig::default())?
                .as_object()
                .cloned()
                .expect("struct serializes to an object");
        }
        opt.insert("lr".into(), json!(lr));
    }
    if args.method.is_some() || args.step_size.is_some() {
        let solver = object(&mut v, "solver")?;
        if solver.is_empty() {
            *solver = serde_json::to_value(flowbox::odesolve::SolverConfig::default())?
                .as_object()
                .cloned()
                .expect("struct serializes to an object");
        }
        if let Some(m) = &args.method {
            solver.insert("method".into(), json!(m));
        }
        if let Some(h) = args.step_size {
            solver.insert("step_size".into(), json!(h));
        }
    }
    RunConfig::from_json(&v.to_string())
}

fn execute(cli: Cli) -> Result<()> {
    let (mode, args) = match cli.command {
        Command::GenData { out, seed, config } => {
            let cfg: CorpusConfig = match config {
                Some(p) => serde_json::from_value(read_json(&p)?)?,
                None => CorpusConfig::default(),
            };
            let corpus = gen_aligned_corpus(&cfg, seed)?;
            write_corpus(&out, &corpus)?;
            println!(
                "wrote {} utterances ({} train, {} valid, {} test) to {}",
                corpus.train.len() + corpus.valid.len() + corpus.test.len(),
                corpus.train.len(),
                corpus.valid.len(),
                corpus.test.len(),
                out.display()
            );
            return Ok(());
        }
        Command::Plot {
            kind,
            out,
            metrics,
            samples,
            title,
        } => {
            let kind: PlotKind = kind.parse()?;
            let series = match (kind, metrics, samples) {
                (PlotKind::Scatter2d, _, Some(s)) => {
                    let bytes = fs::read(&s).map_err(|e| Error::Io {
                        path: s.clone(),
                        source: e,
                    })?;
                    vec![scatter_series("samples", &decode_frames(&bytes)?)?]
                }
                (PlotKind::Scatter2d, _, None) => {
                    return Err(Error::InvalidArgument("scatter2d needs --samples".into()))
                }
                (_, Some(m), _) => series_from_metrics(&read_metrics(&m)?, kind)?,
                (_, None, _) => {
                    return Err(Error::InvalidArgument(
                        "this plot kind needs --metrics".into(),
                    ))
                }
            };
            write_svg(&out, &render_svg(kind, &title, &series)?)?;
            println!("wrote {}", out.display());
            return Ok(());
        }
        Command::Pretrain(a) => ("pretrain", a),
        Command::Finetune { stage, run } => (
            match stage {
                Stage::Speech => "finetune-speech",
                Stage::Sound => "finetune-sound",
                Stage::Unified => "finetune-unified",
            },
            run,
        ),
        Command::Bespoke(a) => ("bespoke", a),
        Command::Jointembed(a) => ("jointembed", a),
        Command::Sample(a) => ("sample", a),
        Command::Eval(a) => ("eval", a),
    };
    let config = build_config(mode, &args)?;
    let summary = run(&config)?;
    println!("run {} finished at step {}", summary.run_id, summary.step);
    if let Some(c) = &summary.checkpoint {
        println!("checkpoint {}", c.display());
    }
    println!("metrics {}", summary.metrics.display());
    for a in &summary.artifacts {
        println!("artifact {}", a.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
