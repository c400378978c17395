//! `excae` command line front end.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use excae::gateway::{BackendSpec, Prompt};
use excae::model::Split;
use excae::pipeline::{
    load_checkpoint, report_table, run_pipeline, save_checkpoint, sweep, synth_corpus, train_and_evaluate, write_corpus,
    CaptionCache, CorpusSource, RunConfig, SweepParam, SynthSpec, Workspace,
};
use excae::retrieval::{evaluate, format_table, modality_gap};
use excae::trainer::{encode, write_loss_csv, AlignmentModel, Regime};
use excae::{Error, Result};

#[derive(Parser)]
#[command(name = "excae", version, about = "Caption-enhanced video-text retrieval pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, its scripted backend table and a matching config.
    Synth(SynthArgs),
    /// Search for a better captioning prompt.
    CsiOptimize(CsiArgs),
    /// Caption every train and test video into a cache file.
    Caption(CaptionArgs),
    /// Train an alignment model and write a checkpoint and loss curve.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Modality gap on the test split before and after training.
    Gap(EvalArgs),
    /// Train and evaluate one model per value of a parameter.
    Sweep(SweepArgs),
    /// Full pipeline into a fresh run directory.
    Run(RunArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration JSON. Defaults to the built-in synthetic setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus JSONL overriding the configured corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Script file for every scripted mock backend.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Seed for the built-in synthetic setup.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    num_videos: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    separability: f64,
}

#[derive(Args)]
struct CsiArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    init_prompt: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CaptionArgs {
    #[command(flatten)]
    common: Common,
    /// Prompt text, or a file holding it.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    cache: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, value_parser = parse_regime)]
    regime: Option<Regime>,
    /// `on` uses the optimized prompt given by --prompt, `off` the initial one.
    #[arg(long, value_enum, default_value = "off")]
    csi: Switch,
    #[arg(long, value_enum, default_value = "on")]
    ecs: Switch,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn missing(artifact: &Path, producer: &str) -> Error {
    Error::MissingPrerequisite {
        artifact: artifact.display().to_string(),
        producer: producer.into(),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::synthetic(self.seed),
        };
        if let Some(path) = &self.corpus {
            if !path.exists() {
                return Err(missing(path, "synth"));
            }
            let (frames_per_video, max_tokens) = match &cfg.corpus {
                CorpusSource::File {
                    frames_per_video,
                    max_tokens,
                    ..
                } => (*frames_per_video, *max_tokens),
                CorpusSource::Synthetic(s) => (s.frames, excae::model::DEFAULT_MAX_TOKENS),
            };
            cfg.corpus = CorpusSource::File {
                path: path.clone(),
                frames_per_video,
                max_tokens,
            };
        }
        if let Some(script) = &self.script {
            for spec in cfg.captioner.iter_mut().chain(std::iter::once(&mut cfg.engineer)) {
                if let BackendSpec::ScriptedMock { script: s, .. } = spec {
                    *s = Some(script.clone());
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Prompt from literal text or from a file holding it.
fn read_prompt(arg: &str) -> Result<Prompt> {
    let path = Path::new(arg);
    if path.is_file() {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return Prompt::new(raw.trim_end_matches('\n'));
    }
    if arg.ends_with(".txt") {
        return Err(missing(path, "csi-optimize"));
    }
    Prompt::new(arg)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        num_videos: a.num_videos,
        frames: a.frames,
        dim: a.dim,
        seed: a.seed,
        separability: a.separability,
        ..Default::default()
    };
    spec.validate()?;
    let s = synth_corpus(&spec)?;
    mkdir(&a.out)?;
    let corpus = a.out.join("corpus.jsonl");
    let script = a.out.join("script.json");
    write_corpus(&corpus, &s.corpus)?;
    s.script.save(&script)?;
    let mut cfg = RunConfig::synthetic(a.seed);
    cfg.ecs.dim = a.dim;
    cfg.embedder = excae::embedder::EmbedderConfig::LocalDeterministic {
        dim: a.dim,
        seed: spec.embed_seed,
    };
    cfg.corpus = CorpusSource::File {
        path: corpus.clone(),
        frames_per_video: a.frames,
        max_tokens: excae::model::DEFAULT_MAX_TOKENS,
    };
    let mock = BackendSpec::ScriptedMock {
        script: Some(script),
        name: None,
    };
    cfg.captioner = vec![mock.clone()];
    cfg.engineer = mock;
    cfg.validate()?;
    write(&a.out.join("config.json"), &cfg.to_json()?)?;
    println!("{} pairs written to {}", s.corpus.len(), corpus.display());
    Ok(())
}

fn csi_optimize(a: &CsiArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(p) = &a.init_prompt {
        cfg.init_prompt = p.clone();
    }
    cfg.use_csi = true;
    let ws = Workspace::prepare(&cfg)?;
    let (prompt, state) = ws.optimize_prompt(&cfg)?;
    let state = state.expect("prompt search enabled");
    mkdir(&a.out)?;
    state.write_history(&a.out.join("history.jsonl"))?;
    state.write_best_prompt(&a.out.join("best_prompt.txt"))?;
    println!(
        "{} iteration(s), stopped on {}, best score {:.6}",
        state.iterations(),
        state.termination.as_str(),
        state.best_score
    );
    println!("{}", prompt.text);
    Ok(())
}

fn caption(a: &CaptionArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let prompt = match &a.prompt {
        Some(p) => read_prompt(p)?,
        None => Prompt::new(cfg.init_prompt.clone())?,
    };
    let k = a.k.unwrap_or(cfg.captions_k);
    let ws = Workspace::prepare(&cfg)?;
    let mut cache = CaptionCache::open(&a.cache)?;
    let before = cache.len();
    ws.fill_cache(&prompt, k, &mut cache)?;
    println!(
        "{} new entries for prompt {} (k={k}), {} total",
        cache.len() - before,
        prompt.fingerprint,
        cache.len()
    );
    Ok(())
}

fn open_cache(path: Option<&PathBuf>, regime: Regime) -> Result<CaptionCache> {
    match path {
        Some(p) if regime.uses_captions() => CaptionCache::open_existing(p),
        None if regime.uses_captions() => Err(missing(Path::new("captions.jsonl"), "caption")),
        _ => Ok(CaptionCache::in_memory()),
    }
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(r) = a.regime {
        cfg.regime = r;
    }
    if let Some(k) = a.k {
        cfg.captions_k = k;
    }
    cfg.ecs_enabled = a.ecs.on();
    cfg.use_csi = a.csi.on();
    cfg.validate()?;
    let prompt = match (&a.prompt, a.csi.on()) {
        (Some(p), true) => read_prompt(p)?,
        (None, true) => return Err(missing(Path::new("best_prompt.txt"), "csi-optimize")),
        (_, false) => Prompt::new(cfg.init_prompt.clone())?,
    };
    let cache = open_cache(a.cache.as_ref(), cfg.regime)?;
    let ws = Workspace::prepare(&cfg)?;
    let run = train_and_evaluate(&ws, &cfg, &prompt, &cache)?;
    mkdir(&a.out)?;
    write(&a.out.join("config.json"), &cfg.to_json()?)?;
    write(&a.out.join("prompt.txt"), &format!("{}\n", prompt.text))?;
    save_checkpoint(&a.out.join("checkpoint.bin"), &run.model, &cfg.model_config())?;
    write_loss_csv(&run.loss_curve, &a.out.join("loss.csv"))?;
    println!(
        "train loss {:.4} -> {:.4}; checkpoint in {}",
        run.report.train_loss_before,
        run.report.train_loss_after,
        a.out.display()
    );
    Ok(())
}

/// Configuration, prompt and model for a checkpoint. Settings saved next to
/// the checkpoint by `train` win over defaults.
fn checkpoint_context(a: &EvalArgs) -> Result<(RunConfig, Prompt, AlignmentModel, CaptionCache)> {
    let dir = a.checkpoint.parent().unwrap_or(Path::new("."));
    let mut common = a.common.clone();
    if common.config.is_none() && dir.join("config.json").exists() {
        common.config = Some(dir.join("config.json"));
    }
    let mut cfg = common.resolve()?;
    let (model, mcfg) = load_checkpoint(&a.checkpoint)?;
    cfg.ecs = mcfg.ecs;
    cfg.ecs_enabled = mcfg.ecs_enabled;
    cfg.regime = mcfg.regime;
    let prompt_file = dir.join("prompt.txt");
    let prompt = if prompt_file.exists() {
        read_prompt(&prompt_file.display().to_string())?
    } else {
        Prompt::new(cfg.init_prompt.clone())?
    };
    let cache = open_cache(a.cache.as_ref(), cfg.regime)?;
    Ok((cfg, prompt, model, cache))
}

fn test_samples(ws: &Workspace, cfg: &RunConfig, prompt: &Prompt, cache: &CaptionCache) -> Result<Vec<excae::trainer::Sample>> {
    let captions = if cfg.regime.uses_captions() {
        cache.captions_for(&prompt.fingerprint, cfg.captions_k)
    } else {
        HashMap::new()
    };
    ws.samples(Split::Test, cfg.regime, &captions)
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (cfg, prompt, model, cache) = checkpoint_context(a)?;
    let ws = Workspace::prepare(&cfg)?;
    let samples = test_samples(&ws, &cfg, &prompt, &cache)?;
    let report = evaluate(&model, &cfg.model_config(), &samples)?;
    let json = report.to_json()?;
    if let Some(out) = &a.out {
        write(out, &json)?;
    }
    print!("{json}");
    print!("{}", format_table(&[(cfg.regime.to_string(), report)]));
    Ok(())
}

fn gap_cmd(a: &EvalArgs) -> Result<()> {
    let (cfg, prompt, model, cache) = checkpoint_context(a)?;
    let ws = Workspace::prepare(&cfg)?;
    let samples = test_samples(&ws, &cfg, &prompt, &cache)?;
    let mcfg = cfg.model_config();
    let (v0, t0) = encode(&AlignmentModel::init(&cfg.ecs)?, &mcfg, &samples)?;
    let (v1, t1) = encode(&model, &mcfg, &samples)?;
    let value = serde_json::json!({
        "gap_before": modality_gap(&v0, &t0)?,
        "gap_after": modality_gap(&v1, &t1)?,
    });
    let json = serde_json::to_string_pretty(&value)? + "\n";
    if let Some(out) = &a.out {
        write(out, &json)?;
    }
    print!("{json}");
    Ok(())
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let param: SweepParam = a.param.parse()?;
    let rows = sweep(&cfg, param, &a.values)?;
    if let Some(out) = &a.out {
        let json: Vec<_> = rows
            .iter()
            .map(|(label, r)| serde_json::json!({ "label": label, "report": r }))
            .collect();
        write(out, &(serde_json::to_string_pretty(&json)? + "\n"))?;
    }
    print!("{}", report_table(&rows));
    Ok(())
}

fn run_cmd(a: &RunArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let out = run_pipeline(&cfg)?;
    print!(
        "{}",
        format_table(&[(cfg.regime.to_string(), out.report.test.clone())])
    );
    println!("artifacts in {}", out.dir.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::CsiOptimize(a) => csi_optimize(a),
        Command::Caption(a) => caption(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gap(a) => gap_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Run(a) => run_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
