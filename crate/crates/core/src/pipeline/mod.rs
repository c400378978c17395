//! End-to-end runs: corpus, prompt search, captioning, training and
//! evaluation, with every artifact written under one run directory.

pub mod cache;
pub mod checkpoint;
pub mod corpus_io;
pub mod synth;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csi::{run_csi, CsiConfig, PromptState};
use crate::ecs::EcsConfig;
use crate::embedder::{EmbedderConfig, TextEmbedder};
use crate::error::{Error, Result};
use crate::gateway::{build_chain, fingerprint, generate_captions, BackendChain, BackendSpec, LlmBackend, MockScript, Prompt, DEFAULT_INITIAL_PROMPT};
use crate::model::{Corpus, CorpusPair, Split, DEFAULT_FRAMES, DEFAULT_MAX_TOKENS};
use crate::retrieval::{evaluate, format_table, modality_gap, RetrievalReport};
use crate::trainer::{build_samples, dataset_loss, encode, train, write_loss_csv, AlignmentModel, ModelConfig, Regime, Sample, TrainConfig};

pub use cache::{CacheEntry, CacheProvenance, CaptionCache};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use corpus_io::{ingest, write_corpus};
pub use synth::{synth_corpus, SynthCorpus, SynthSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic(SynthSpec),
    File {
        path: PathBuf,
        #[serde(default = "default_frames")]
        frames_per_video: usize,
        #[serde(default = "default_max_tokens")]
        max_tokens: usize,
    },
}

fn default_frames() -> usize {
    DEFAULT_FRAMES
}
fn default_max_tokens() -> usize {
    DEFAULT_MAX_TOKENS
}

/// Every setting of a run. Persisted verbatim as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSource,
    pub embedder: EmbedderConfig,
    /// Primary captioner first, then fallbacks.
    pub captioner: Vec<BackendSpec>,
    pub engineer: BackendSpec,
    pub init_prompt: String,
    pub use_csi: bool,
    pub csi: CsiConfig,
    /// Captions per video fed to training and evaluation.
    pub captions_k: usize,
    pub regime: Regime,
    pub ecs_enabled: bool,
    pub ecs: EcsConfig,
    pub train: TrainConfig,
    pub runs_dir: PathBuf,
}

impl RunConfig {
    /// Synthetic corpus, scripted backends and desk-scale training settings.
    pub fn synthetic(seed: u64) -> Self {
        let spec = SynthSpec {
            seed,
            ..Default::default()
        };
        let dim = spec.dim;
        let mock = BackendSpec::ScriptedMock {
            script: None,
            name: None,
        };
        Self {
            corpus: CorpusSource::Synthetic(spec),
            embedder: EmbedderConfig::LocalDeterministic { dim, seed: 0 },
            captioner: vec![mock.clone()],
            engineer: mock,
            init_prompt: DEFAULT_INITIAL_PROMPT.into(),
            use_csi: true,
            csi: CsiConfig {
                seed,
                ..Default::default()
            },
            captions_k: crate::model::DEFAULT_CAPTIONS,
            regime: Regime::Both,
            ecs_enabled: true,
            ecs: EcsConfig {
                seed,
                ..EcsConfig::new(dim)
            },
            train: TrainConfig {
                learning_rate: 1e-2,
                temperature: 0.5,
                batch_size: 16,
                epochs: 100,
                seed,
                grad_check: false,
            },
            runs_dir: PathBuf::from("runs"),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                artifact: path.display().to_string(),
                producer: "run".into(),
            });
        }
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&raw).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Short content hash of the resolved configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(fingerprint(&self.to_json()?))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            ecs: self.ecs.clone(),
            ecs_enabled: self.ecs_enabled,
            regime: self.regime,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.captioner.is_empty() {
            return Err(Error::invalid("at least one captioner backend is required"));
        }
        if self.ecs.dim != self.embedder.dim() {
            return Err(Error::DimMismatch {
                expected: self.embedder.dim(),
                actual: self.ecs.dim,
            });
        }
        if self.captions_k == 0 && self.regime.uses_captions() {
            return Err(Error::invalid("captions_k must be positive for caption regimes"));
        }
        self.csi.validate()?;
        self.ecs.validate()?;
        self.train.validate()?;
        if let CorpusSource::Synthetic(s) = &self.corpus {
            s.validate()?;
            if s.dim != self.embedder.dim() {
                return Err(Error::DimMismatch {
                    expected: self.embedder.dim(),
                    actual: s.dim,
                });
            }
        }
        Ok(())
    }
}

/// Everything a run needs that does not depend on training settings.
pub struct Workspace {
    pub corpus: Corpus,
    pub script: Option<MockScript>,
    pub embedder: Box<dyn TextEmbedder>,
    pub captioner: BackendChain,
    pub engineer: Arc<dyn LlmBackend>,
}

impl Workspace {
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let embedder = cfg.embedder.build()?;
        let (corpus, script) = match &cfg.corpus {
            CorpusSource::Synthetic(spec) => {
                let s = synth_corpus(spec)?;
                (s.corpus, Some(s.script))
            }
            CorpusSource::File {
                path,
                frames_per_video,
                max_tokens,
            } => (ingest(path, *max_tokens, Some(embedder.as_ref()), *frames_per_video)?, None),
        };
        if corpus.dim() != embedder.dim() {
            return Err(Error::DimMismatch {
                expected: embedder.dim(),
                actual: corpus.dim(),
            });
        }
        let captioner = build_chain(&cfg.captioner, script.as_ref())?;
        let engineer = cfg.engineer.build(script.as_ref())?;
        Ok(Self {
            corpus,
            script,
            embedder,
            captioner,
            engineer,
        })
    }

    /// Runs the prompt search, or returns the initial prompt when disabled.
    pub fn optimize_prompt(&self, cfg: &RunConfig) -> Result<(Prompt, Option<PromptState>)> {
        let init = Prompt::new(cfg.init_prompt.clone())?;
        if !cfg.use_csi {
            return Ok((init, None));
        }
        let state = run_csi(
            &self.corpus,
            &init,
            &cfg.csi,
            &self.captioner,
            self.engineer.as_ref(),
            self.embedder.as_ref(),
        )?;
        Ok((state.best_prompt.clone(), Some(state)))
    }

    /// Captions every train and test video not yet cached under
    /// `(prompt, k)`.
    pub fn fill_cache(&self, prompt: &Prompt, k: usize, cache: &mut CaptionCache) -> Result<()> {
        let todo: Vec<&CorpusPair> = self
            .corpus
            .pairs()
            .iter()
            .filter(|p| p.split != Split::Val && cache.get(&p.video.id, &prompt.fingerprint, k).is_none())
            .collect();
        let generated: Vec<CacheEntry> = todo
            .par_iter()
            .map(|p| generate_captions(&p.video, prompt, k, &self.captioner).map(|g| CacheEntry::from_generated(&g, k)))
            .collect::<Result<_>>()?;
        for e in generated {
            cache.insert(e)?;
        }
        Ok(())
    }

    pub fn samples(
        &self,
        split: Split,
        regime: Regime,
        captions: &HashMap<String, Vec<String>>,
    ) -> Result<Vec<Sample>> {
        let pairs = self.corpus.split(split);
        if pairs.is_empty() {
            return Err(Error::Validation(format!("{split} split is empty")));
        }
        build_samples(&pairs, captions, regime, self.embedder.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub prompt_fingerprint: String,
    pub regime: Regime,
    pub ecs_enabled: bool,
    pub active_experts: usize,
    pub captions_k: usize,
    pub train_loss_before: f64,
    pub train_loss_after: f64,
    pub gap_before: f64,
    pub gap_after: f64,
    pub test: RetrievalReport,
}

pub struct TrainedRun {
    pub model: AlignmentModel,
    pub loss_curve: Vec<crate::trainer::LossPoint>,
    pub report: RunReport,
}

/// Trains on the train split and evaluates on the test split.
pub fn train_and_evaluate(
    ws: &Workspace,
    cfg: &RunConfig,
    prompt: &Prompt,
    cache: &CaptionCache,
) -> Result<TrainedRun> {
    let mcfg = cfg.model_config();
    let captions = if cfg.regime.uses_captions() {
        cache.captions_for(&prompt.fingerprint, cfg.captions_k)
    } else {
        HashMap::new()
    };
    let train_set = ws.samples(Split::Train, cfg.regime, &captions)?;
    let test_set = ws.samples(Split::Test, cfg.regime, &captions)?;
    let init = AlignmentModel::init(&cfg.ecs)?;
    let tcfg = &cfg.train;
    let loss_before = dataset_loss(&init, &mcfg, &train_set, tcfg.batch_size, tcfg.temperature)?;
    let (v0, t0) = encode(&init, &mcfg, &test_set)?;
    let gap_before = modality_gap(&v0, &t0)?;
    let outcome = train(&train_set, init, &mcfg, tcfg)?;
    let loss_after = dataset_loss(&outcome.model, &mcfg, &train_set, tcfg.batch_size, tcfg.temperature)?;
    let test = evaluate(&outcome.model, &mcfg, &test_set)?;
    Ok(TrainedRun {
        report: RunReport {
            prompt_fingerprint: prompt.fingerprint.clone(),
            regime: cfg.regime,
            ecs_enabled: cfg.ecs_enabled,
            active_experts: if cfg.ecs_enabled { cfg.ecs.active_experts } else { 0 },
            captions_k: cfg.captions_k,
            train_loss_before: loss_before,
            train_loss_after: loss_after,
            gap_before,
            gap_after: test.modality_gap,
            test,
        },
        model: outcome.model,
        loss_curve: outcome.loss_curve,
    })
}

/// Fresh directory `runs_dir/<unix seconds>-<config hash>[-n]`.
pub fn create_run_dir(runs_dir: &Path, hash: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(runs_dir).map_err(|e| Error::io(runs_dir, e))?;
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = format!("{ts}-{hash}");
    let mut dir = runs_dir.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = runs_dir.join(format!("{base}-{n}"));
        n += 1;
    }
    std::fs::create_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub state: Option<PromptState>,
    pub report: RunReport,
}

/// Full pipeline into a new run directory.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome> {
    let ws = Workspace::prepare(cfg)?;
    let dir = create_run_dir(&cfg.runs_dir, &cfg.hash()?)?;
    log::info!("run directory {}", dir.display());
    write(&dir.join("config.json"), &cfg.to_json()?)?;

    let (prompt, state) = ws.optimize_prompt(cfg)?;
    match &state {
        Some(s) => {
            s.write_history(&dir.join("history.jsonl"))?;
            s.write_best_prompt(&dir.join("best_prompt.txt"))?;
        }
        None => {
            write(&dir.join("history.jsonl"), "")?;
            write(&dir.join("best_prompt.txt"), &format!("{}\n", prompt.text))?;
        }
    }

    let mut cache = CaptionCache::open(&dir.join("captions.jsonl"))?;
    if cfg.regime.uses_captions() {
        ws.fill_cache(&prompt, cfg.captions_k, &mut cache)?;
    }
    let run = train_and_evaluate(&ws, cfg, &prompt, &cache)?;
    save_checkpoint(&dir.join("checkpoint.bin"), &run.model, &cfg.model_config())?;
    write_loss_csv(&run.loss_curve, &dir.join("loss.csv"))?;
    write(&dir.join("report.json"), &(serde_json::to_string_pretty(&run.report)? + "\n"))?;
    write(
        &dir.join("report.txt"),
        &format_table(&[(format!("{}", cfg.regime), run.report.test.clone())]),
    )?;
    Ok(RunOutcome {
        dir,
        state,
        report: run.report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    CaptionsK,
    ActiveExperts,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "captions_k" => Ok(SweepParam::CaptionsK),
            "active_experts" => Ok(SweepParam::ActiveExperts),
            other => Err(Error::invalid(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

impl SweepParam {
    /// Configuration for one sweep point. Zero active experts switches the
    /// head off.
    pub fn apply(self, cfg: &RunConfig, value: usize) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            SweepParam::CaptionsK => c.captions_k = value,
            SweepParam::ActiveExperts if value == 0 => c.ecs_enabled = false,
            SweepParam::ActiveExperts => {
                c.ecs_enabled = true;
                c.ecs.active_experts = value;
            }
        }
        c
    }

    pub fn label(self, value: usize) -> String {
        match self {
            SweepParam::CaptionsK => format!("K={value}"),
            SweepParam::ActiveExperts => format!("experts={value}"),
        }
    }
}

/// Runs the prompt search once, then trains and evaluates one model per
/// value. Rows come back in `values` order.
pub fn sweep(cfg: &RunConfig, param: SweepParam, values: &[usize]) -> Result<Vec<(String, RunReport)>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    let ws = Workspace::prepare(cfg)?;
    let (prompt, _) = ws.optimize_prompt(cfg)?;
    let mut cache = CaptionCache::in_memory();
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let point = param.apply(cfg, v);
        point.validate()?;
        if point.regime.uses_captions() {
            ws.fill_cache(&prompt, point.captions_k, &mut cache)?;
        }
        let run = train_and_evaluate(&ws, &point, &prompt, &cache)?;
        log::info!("{}: test t2v R@1 {:.1}", param.label(v), run.report.test.t2v.r1);
        rows.push((param.label(v), run.report));
    }
    Ok(rows)
}

/// Table of sweep or ablation rows.
pub fn report_table(rows: &[(String, RunReport)]) -> String {
    let table: Vec<(String, RetrievalReport)> = rows.iter().map(|(l, r)| (l.clone(), r.test.clone())).collect();
    format_table(&table)
}
