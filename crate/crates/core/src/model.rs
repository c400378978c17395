//! Domain types shared by every stage of the pipeline: embeddings, corpus
//! records, caption sets and the per-video expression matrix.

use std::collections::HashSet;
use std::fmt;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of sampled frames per video.
pub const DEFAULT_FRAMES: usize = 8;
/// Default token cap for texts and captions.
pub const DEFAULT_MAX_TOKENS: usize = 70;
/// Default number of derived captions per video.
pub const DEFAULT_CAPTIONS: usize = 10;

/// Fixed-dimension real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding must have at least one component"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self { values })
    }

    pub fn from_view(view: ArrayView1<'_, f64>) -> Result<Self> {
        Self::new(view.to_vec())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= 1e-9
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }
}

/// Scales `v` to unit Euclidean norm. Zero input is an error.
pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(EmbeddingVector {
        values: v.values.iter().map(|x| x / norm).collect(),
    })
}

pub(crate) fn normalize_slice(values: &mut [f64]) -> Result<f64> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    values.iter_mut().for_each(|v| *v /= norm);
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// N x D frame embeddings.
    pub frames: Array2<f64>,
    /// Path or URI handed to captioning backends.
    pub source_ref: Option<String>,
    /// Free-text description, used to synthesize frames when none are given.
    pub description: Option<String>,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
    pub token_count: usize,
}

impl TextRecord {
    /// Builds a record, truncating to `max_tokens` whitespace tokens.
    pub fn new(id: impl Into<String>, text: &str, max_tokens: usize) -> Self {
        let id = id.into();
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let (text, token_count) = if tokens.len() > max_tokens {
            log::warn!(
                "text {id}: {} tokens truncated to {max_tokens}",
                tokens.len()
            );
            (tokens[..max_tokens].join(" "), max_tokens)
        } else {
            (text.trim().to_string(), tokens.len())
        };
        Self {
            id,
            text,
            token_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub video_id: String,
    pub captions: Vec<String>,
    pub prompt_fingerprint: String,
}

impl CaptionSet {
    pub fn k(&self) -> usize {
        self.captions.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPair {
    pub video: VideoRecord,
    pub text: TextRecord,
    pub split: Split,
}

/// Paired videos and texts sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    dim: usize,
    pub max_tokens: usize,
    pairs: Vec<CorpusPair>,
}

impl Corpus {
    /// Builds a corpus; mixed frame dimensions are rejected.
    pub fn new(pairs: Vec<CorpusPair>, max_tokens: usize) -> Result<Self> {
        let dim = pairs
            .first()
            .map(|p| p.video.dim())
            .ok_or_else(|| Error::Validation("corpus is empty".into()))?;
        for p in &pairs {
            if p.video.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: p.video.dim(),
                });
            }
        }
        Ok(Self {
            dim,
            max_tokens,
            pairs,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pairs(&self) -> &[CorpusPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&CorpusPair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub record: String,
    pub rule: &'static str,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.rule, self.record)
    }
}

/// Lists every broken corpus invariant. Empty means the corpus is valid.
pub fn validate_corpus(corpus: &Corpus) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen: HashSet<(Split, &str)> = HashSet::new();
    for pair in corpus.pairs() {
        let v = &pair.video;
        if !seen.insert((pair.split, v.id.as_str())) {
            out.push(Violation {
                record: v.id.clone(),
                rule: "duplicate id",
            });
        }
        if v.id != pair.text.id {
            out.push(Violation {
                record: v.id.clone(),
                rule: "video/text id mismatch",
            });
        }
        if v.num_frames() == 0 {
            out.push(Violation {
                record: v.id.clone(),
                rule: "no frames",
            });
        }
        if v.frames.iter().any(|x| !x.is_finite()) {
            out.push(Violation {
                record: v.id.clone(),
                rule: "non-finite frame",
            });
        }
        if pair.text.text.trim().is_empty() {
            out.push(Violation {
                record: v.id.clone(),
                rule: "empty text",
            });
        }
        if pair.text.token_count > corpus.max_tokens {
            out.push(Violation {
                record: v.id.clone(),
                rule: "text over token limit",
            });
        }
    }
    out
}

pub fn validate_caption_sets(sets: &[CaptionSet]) -> Vec<Violation> {
    let mut out = Vec::new();
    for set in sets {
        if set.captions.is_empty() {
            out.push(Violation {
                record: set.video_id.clone(),
                rule: "empty caption set",
            });
        } else if set.captions.iter().any(|c| c.trim().is_empty()) {
            out.push(Violation {
                record: set.video_id.clone(),
                rule: "empty caption",
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpressionKind {
    Frame,
    Caption,
}

/// Video-side expressions: N frame rows followed by K caption rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionSet {
    pub video_id: String,
    pub tokens: Array2<f64>,
    pub kinds: Vec<ExpressionKind>,
}

impl ExpressionSet {
    pub fn new(
        video_id: impl Into<String>,
        frames: &Array2<f64>,
        captions: &Array2<f64>,
    ) -> Result<Self> {
        let n = frames.nrows();
        let k = captions.nrows();
        if n + k == 0 {
            return Err(Error::invalid("expression set needs at least one row"));
        }
        let dim = if n > 0 { frames.ncols() } else { captions.ncols() };
        if n > 0 && k > 0 && frames.ncols() != captions.ncols() {
            return Err(Error::DimMismatch {
                expected: frames.ncols(),
                actual: captions.ncols(),
            });
        }
        let mut tokens = Array2::zeros((n + k, dim));
        if n > 0 {
            tokens.slice_mut(ndarray::s![..n, ..]).assign(frames);
        }
        if k > 0 {
            tokens.slice_mut(ndarray::s![n.., ..]).assign(captions);
        }
        if tokens.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("expression set".into()));
        }
        let mut kinds = vec![ExpressionKind::Frame; n];
        kinds.extend(std::iter::repeat_n(ExpressionKind::Caption, k));
        Ok(Self {
            video_id: video_id.into(),
            tokens,
            kinds,
        })
    }

    pub fn rows(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}
