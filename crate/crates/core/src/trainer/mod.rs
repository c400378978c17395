//! Contrastive alignment of pooled video embeddings with projected text
//! embeddings. Gradients are derived by hand and verified by finite
//! differences in [`gradcheck`].

pub mod adamax;
pub mod gradcheck;
pub mod loss;

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecs::{self, EcsConfig, EcsParams, EcsTape, Linear};
use crate::embedder::TextEmbedder;
use crate::error::{Error, Result};
use crate::model::CorpusPair;

pub use adamax::{adamax_step, AdamaxState};
pub use loss::info_nce_loss;

/// Which expressions make up the video side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Video,
    Captions,
    Both,
}

impl Regime {
    pub fn uses_frames(self) -> bool {
        matches!(self, Regime::Video | Regime::Both)
    }

    pub fn uses_captions(self) -> bool {
        matches!(self, Regime::Captions | Regime::Both)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Video => "video",
            Regime::Captions => "captions",
            Regime::Both => "both",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(Regime::Video),
            "captions" => Ok(Regime::Captions),
            "both" => Ok(Regime::Both),
            other => Err(Error::invalid(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_tau")]
    pub temperature: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grad_check: bool,
}

fn default_lr() -> f64 {
    4e-6
}
fn default_tau() -> f64 {
    0.05
}
fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            temperature: default_tau(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            grad_check: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Architecture switches that do not carry parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub ecs: EcsConfig,
    pub ecs_enabled: bool,
    pub regime: Regime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentModel {
    pub ecs: EcsParams,
    /// Applied to caption embeddings before they join the expression rows.
    pub caption_adapter: Linear,
    pub text_projection: Linear,
}

/// Borrowed view of one named parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}

fn flat_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

impl AlignmentModel {
    pub fn init(cfg: &EcsConfig) -> Result<Self> {
        Ok(Self {
            ecs: EcsParams::init(cfg)?,
            caption_adapter: Linear::identity(cfg.dim),
            text_projection: Linear::identity(cfg.dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.ecs.dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ecs: self.ecs.zeros_like(),
            caption_adapter: self.caption_adapter.zeros_like(),
            text_projection: self.text_projection.zeros_like(),
        }
    }

    /// All parameters in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (m, ex) in self.ecs.experts.iter().enumerate() {
            for (part, a) in [("hidden", &ex.hidden), ("output", &ex.output)] {
                out.push(TensorRef {
                    name: format!("ecs.experts.{m}.{part}"),
                    shape: a.shape().to_vec(),
                    values: flat(a),
                });
            }
        }
        for (prefix, lin) in self.linears() {
            out.push(TensorRef {
                name: format!("{prefix}.weight"),
                shape: lin.weight.shape().to_vec(),
                values: flat(&lin.weight),
            });
            out.push(TensorRef {
                name: format!("{prefix}.bias"),
                shape: lin.bias.shape().to_vec(),
                values: flat(&lin.bias),
            });
        }
        out
    }

    /// Mutable views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (m, ex) in self.ecs.experts.iter_mut().enumerate() {
            out.push((format!("ecs.experts.{m}.hidden"), flat_mut(&mut ex.hidden)));
            out.push((format!("ecs.experts.{m}.output"), flat_mut(&mut ex.output)));
        }
        let lins: [(&str, &mut Linear); 5] = [
            ("ecs.routers", &mut self.ecs.routers),
            ("ecs.gate", &mut self.ecs.gate),
            ("ecs.shared_projection", &mut self.ecs.shared_projection),
            ("caption_adapter", &mut self.caption_adapter),
            ("text_projection", &mut self.text_projection),
        ];
        for (prefix, lin) in lins {
            out.push((format!("{prefix}.weight"), flat_mut(&mut lin.weight)));
            out.push((format!("{prefix}.bias"), flat_mut(&mut lin.bias)));
        }
        out
    }

    fn linears(&self) -> [(&'static str, &Linear); 5] {
        [
            ("ecs.routers", &self.ecs.routers),
            ("ecs.gate", &self.ecs.gate),
            ("ecs.shared_projection", &self.ecs.shared_projection),
            ("caption_adapter", &self.caption_adapter),
            ("text_projection", &self.text_projection),
        ]
    }

    pub fn add_assign(&mut self, other: &AlignmentModel) {
        let src = other.tensors();
        for ((_, dst), s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s.values) {
                *d += v;
            }
        }
    }

    /// Errors naming the first tensor holding NaN or infinity.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        for t in self.tensors() {
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{what} of {}", t.name)));
            }
        }
        Ok(())
    }
}

/// One training or evaluation item with raw (unadapted) embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub video_id: String,
    /// N x D.
    pub frames: Array2<f64>,
    /// K x D caption embeddings; may have zero rows.
    pub captions: Array2<f64>,
    pub text: Array1<f64>,
}

/// Embeds texts and captions for `pairs`. Captions are looked up by video id
/// and must cover every pair when `regime` uses them.
pub fn build_samples(
    pairs: &[&CorpusPair],
    captions: &HashMap<String, Vec<String>>,
    regime: Regime,
    embedder: &dyn TextEmbedder,
) -> Result<Vec<Sample>> {
    if regime.uses_captions() {
        let missing: Vec<&str> = pairs
            .iter()
            .filter(|p| captions.get(&p.video.id).is_none_or(|c| c.is_empty()))
            .map(|p| p.video.id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingPrerequisite {
                artifact: format!("captions for {}", missing.join(", ")),
                producer: "caption".into(),
            });
        }
    }
    let d = embedder.dim();
    pairs
        .iter()
        .map(|p| {
            if p.video.dim() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    actual: p.video.dim(),
                });
            }
            let text = Array1::from(embedder.embed_text(&p.text.text)?.into_values());
            let caps = match captions.get(&p.video.id) {
                Some(list) if regime.uses_captions() => {
                    let refs: Vec<&str> = list.iter().map(String::as_str).collect();
                    let rows = embedder.embed_batch(&refs)?;
                    let mut m = Array2::zeros((rows.len(), d));
                    for (mut dst, src) in m.rows_mut().into_iter().zip(&rows) {
                        dst.assign(&ndarray::ArrayView1::from(src.values()));
                    }
                    m
                }
                _ => Array2::zeros((0, d)),
            };
            Ok(Sample {
                video_id: p.video.id.clone(),
                frames: p.video.frames.clone(),
                captions: caps,
                text,
            })
        })
        .collect()
}

pub(crate) struct SampleTape {
    pub ecs: EcsTape,
    /// Row at which adapted caption rows start, if any are present.
    pub caption_offset: Option<usize>,
    pub text_norm: f64,
    pub text_unit: Array1<f64>,
}

fn video_tokens(model: &AlignmentModel, regime: Regime, s: &Sample) -> Result<(Array2<f64>, Option<usize>)> {
    let n = if regime.uses_frames() { s.frames.nrows() } else { 0 };
    let k = if regime.uses_captions() { s.captions.nrows() } else { 0 };
    if n + k == 0 {
        return Err(Error::invalid(format!(
            "video {} has no expressions under regime {regime}",
            s.video_id
        )));
    }
    let d = model.dim();
    let mut tokens = Array2::zeros((n + k, d));
    if n > 0 {
        tokens.slice_mut(s![..n, ..]).assign(&s.frames);
    }
    if k > 0 {
        tokens
            .slice_mut(s![n.., ..])
            .assign(&model.caption_adapter.apply_rows(&s.captions));
    }
    Ok((tokens, (k > 0).then_some(n)))
}

pub(crate) fn forward_sample(model: &AlignmentModel, cfg: &ModelConfig, s: &Sample) -> Result<SampleTape> {
    let (tokens, caption_offset) = video_tokens(model, cfg.regime, s)?;
    let ecs_cfg = cfg.ecs_enabled.then_some(&cfg.ecs);
    let tape = ecs::forward_tokens(&tokens, &model.ecs, ecs_cfg)?;
    let z = model.text_projection.apply(s.text.view());
    let text_norm = z.dot(&z).sqrt();
    if text_norm == 0.0 || !text_norm.is_finite() {
        return Err(Error::NonFinite(format!("text embedding of {}", s.video_id)));
    }
    Ok(SampleTape {
        ecs: tape,
        caption_offset,
        text_norm,
        text_unit: z / text_norm,
    })
}

fn backward_sample(
    model: &AlignmentModel,
    s: &Sample,
    tape: &SampleTape,
    d_video: ndarray::ArrayView1<'_, f64>,
    d_text: ndarray::ArrayView1<'_, f64>,
) -> AlignmentModel {
    let mut g = model.zeros_like();
    let d_tokens = ecs::backward_tokens(&tape.ecs, &model.ecs, d_video, &mut g.ecs);
    if let Some(off) = tape.caption_offset {
        let d_cap = d_tokens.slice(s![off.., ..]);
        g.caption_adapter.weight += &d_cap.t().dot(&s.captions);
        g.caption_adapter.bias += &d_cap.sum_axis(Axis(0));
    }
    let u = &tape.text_unit;
    let dz = (&d_text - &(u * u.dot(&d_text))) / tape.text_norm;
    g.text_projection.weight += &ecs::outer(&dz, &s.text);
    g.text_projection.bias += &dz;
    g
}

fn stack(rows: &[&Array1<f64>], d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), d));
    for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
        dst.assign(*src);
    }
    m
}

/// Pooled video embeddings and projected text embeddings, one row per
/// sample, all unit length.
pub fn encode(model: &AlignmentModel, cfg: &ModelConfig, samples: &[Sample]) -> Result<(Array2<f64>, Array2<f64>)> {
    let tapes: Vec<SampleTape> = samples
        .par_iter()
        .map(|s| forward_sample(model, cfg, s))
        .collect::<Result<_>>()?;
    let d = model.dim();
    let v = stack(&tapes.iter().map(|t| &t.ecs.pooled).collect::<Vec<_>>(), d);
    let t = stack(&tapes.iter().map(|t| &t.text_unit).collect::<Vec<_>>(), d);
    Ok((v, t))
}

/// Contrastive loss of one batch.
pub fn batch_loss(model: &AlignmentModel, cfg: &ModelConfig, batch: &[&Sample], tau: f64) -> Result<f64> {
    let tapes: Vec<SampleTape> = batch
        .par_iter()
        .map(|s| forward_sample(model, cfg, s))
        .collect::<Result<_>>()?;
    let d = model.dim();
    let v = stack(&tapes.iter().map(|t| &t.ecs.pooled).collect::<Vec<_>>(), d);
    let t = stack(&tapes.iter().map(|t| &t.text_unit).collect::<Vec<_>>(), d);
    info_nce_loss(&v, &t, tau)
}

/// Loss and parameter gradients of one batch. Per-sample gradients are
/// reduced in batch order.
pub fn batch_gradients(
    model: &AlignmentModel,
    cfg: &ModelConfig,
    batch: &[&Sample],
    tau: f64,
) -> Result<(f64, AlignmentModel)> {
    let tapes: Vec<SampleTape> = batch
        .par_iter()
        .map(|s| forward_sample(model, cfg, s))
        .collect::<Result<_>>()?;
    let d = model.dim();
    let v = stack(&tapes.iter().map(|t| &t.ecs.pooled).collect::<Vec<_>>(), d);
    let t = stack(&tapes.iter().map(|t| &t.text_unit).collect::<Vec<_>>(), d);
    let (loss, dv, dt) = loss::info_nce_with_grad(&v, &t, tau)?;
    let per_sample: Vec<AlignmentModel> = (0..batch.len())
        .into_par_iter()
        .map(|i| backward_sample(model, batch[i], &tapes[i], dv.row(i), dt.row(i)))
        .collect();
    let mut grads = model.zeros_like();
    for g in &per_sample {
        grads.add_assign(g);
    }
    grads.check_finite("gradient")?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AlignmentModel,
    pub loss_curve: Vec<LossPoint>,
    pub grad_check: Option<gradcheck::GradCheckReport>,
}

/// Mini-batch Adamax training. Batches are reshuffled every epoch from a
/// generator seeded once with `cfg.seed`.
pub fn train(
    samples: &[Sample],
    mut model: AlignmentModel,
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let grad_check = if cfg.grad_check {
        let n = cfg.batch_size.min(samples.len());
        let gc = gradcheck::GradCheckConfig {
            max_coords: Some(256),
            seed: cfg.seed,
            ..Default::default()
        };
        let report = gradcheck::gradient_check(&model, mcfg, &samples[..n], cfg.temperature, &gc)?;
        log::info!(
            "gradient check: max relative error {:.3e} over {} coordinates ({} skipped)",
            report.max_rel_error,
            report.checked,
            report.skipped
        );
        Some(report)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut state = AdamaxState::new(&model);
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) = batch_gradients(&model, mcfg, &batch, cfg.temperature)?;
            adamax_step(&mut model, &grads, &mut state, cfg.learning_rate)?;
            curve.push(LossPoint {
                step: curve.len(),
                loss,
            });
        }
        log::debug!("epoch {epoch}: last batch loss {:.6}", curve.last().map_or(0.0, |p| p.loss));
    }
    model.check_finite("parameter")?;
    Ok(TrainOutcome {
        model,
        loss_curve: curve,
        grad_check,
    })
}

/// Mean contrastive loss over consecutive batches of `batch_size`.
pub fn dataset_loss(model: &AlignmentModel, cfg: &ModelConfig, samples: &[Sample], batch_size: usize, tau: f64) -> Result<f64> {
    if samples.is_empty() || batch_size == 0 {
        return Err(Error::invalid("dataset loss needs samples and a positive batch size"));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in refs.chunks(batch_size) {
        total += batch_loss(model, cfg, chunk, tau)? * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(total / n as f64)
}

pub fn write_loss_csv(curve: &[LossPoint], path: &Path) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for p in curve {
        out.push_str(&format!("{},{}\n", p.step, p.loss));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
