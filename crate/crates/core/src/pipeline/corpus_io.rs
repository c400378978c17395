//! Corpus JSONL reading and writing.
//!
//! One pair per line: `video_id`, `text`, `split`, and either inline
//! `frames` (N rows of D floats) or a `description` to embed.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embedder::TextEmbedder;
use crate::error::{Error, Result};
use crate::model::{validate_corpus, Corpus, CorpusPair, Split, TextRecord, VideoRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub video_id: String,
    pub text: String,
    #[serde(default)]
    pub frames: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub description: Option<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_ref: Option<String>,
}

const REQUIRED: [&str; 3] = ["video_id", "text", "split"];

/// Splits `description` into `n` word windows and embeds each one.
pub fn frames_from_description(description: &str, n: usize, embedder: &dyn TextEmbedder) -> Result<Array2<f64>> {
    let words: Vec<&str> = description.split_whitespace().collect();
    if words.is_empty() || n == 0 {
        return Err(Error::invalid("cannot synthesize frames from an empty description"));
    }
    let width = words.len().div_ceil(n).max(1);
    let chunks: Vec<String> = (0..n)
        .map(|i| {
            let start = (i * width) % words.len();
            (0..width).map(|j| words[(start + j) % words.len()]).collect::<Vec<_>>().join(" ")
        })
        .collect();
    let refs: Vec<&str> = chunks.iter().map(String::as_str).collect();
    let rows = embedder.embed_batch(&refs)?;
    let mut m = Array2::zeros((n, embedder.dim()));
    for (mut dst, src) in m.rows_mut().into_iter().zip(&rows) {
        dst.assign(&ndarray::ArrayView1::from(src.values()));
    }
    Ok(m)
}

fn frames_array(rows: &[Vec<f64>], line: usize) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Validation(format!("line {line}: ragged frame rows")));
    }
    Array2::from_shape_vec((rows.len(), d), rows.concat())
        .map_err(|e| Error::Validation(format!("line {line}: {e}")))
}

/// Parses corpus JSONL text. Lines without frames are embedded from their
/// description into `frames_per_video` rows when an embedder is given.
pub fn parse_corpus(
    raw: &str,
    max_tokens: usize,
    embedder: Option<&dyn TextEmbedder>,
    frames_per_video: usize,
) -> Result<Corpus> {
    let mut pairs = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(line).map_err(|e| Error::Validation(format!("line {n}: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Validation(format!("line {n}: expected a JSON object")))?;
        for field in REQUIRED {
            if !obj.contains_key(field) {
                return Err(Error::Validation(format!("line {n}: missing field {field}")));
            }
        }
        let rec: CorpusLine =
            serde_json::from_value(value).map_err(|e| Error::Validation(format!("line {n}: {e}")))?;
        let frames = match (&rec.frames, &rec.description, embedder) {
            (Some(rows), _, _) => frames_array(rows, n)?,
            (None, Some(desc), Some(emb)) => frames_from_description(desc, frames_per_video, emb)?,
            (None, Some(_), None) => {
                return Err(Error::Validation(format!(
                    "line {n}: frames missing and no embedder configured to synthesize them"
                )))
            }
            (None, None, _) => {
                return Err(Error::Validation(format!("line {n}: neither frames nor description given")))
            }
        };
        pairs.push(CorpusPair {
            video: VideoRecord {
                id: rec.video_id.clone(),
                frames,
                source_ref: rec.source_ref.clone(),
                description: rec.description.clone(),
            },
            text: TextRecord::new(rec.video_id, &rec.text, max_tokens),
            split: rec.split,
        });
    }
    let corpus = Corpus::new(pairs, max_tokens)?;
    let violations = validate_corpus(&corpus);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::Validation(list.join("; ")));
    }
    Ok(corpus)
}

pub fn ingest(
    path: &Path,
    max_tokens: usize,
    embedder: Option<&dyn TextEmbedder>,
    frames_per_video: usize,
) -> Result<Corpus> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite {
            artifact: path.display().to_string(),
            producer: "synth".into(),
        });
    }
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&raw, max_tokens, embedder, frames_per_video)
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = String::new();
    for p in corpus.pairs() {
        let line = CorpusLine {
            video_id: p.video.id.clone(),
            text: p.text.text.clone(),
            frames: Some(p.video.frames.rows().into_iter().map(|r| r.to_vec()).collect()),
            description: p.video.description.clone(),
            split: p.split,
            source_ref: p.video.source_ref.clone(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
