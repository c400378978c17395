//! Recall@K, mean rank and the modality gap.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{encode, AlignmentModel, ModelConfig, Sample};

/// 1-based rank of `correct[q]` in row `q`. Candidates scoring strictly
/// higher rank ahead, and so do equal-scoring candidates with a lower index.
pub fn rank_matrix(sim: &Array2<f64>, correct: &[usize]) -> Result<Vec<usize>> {
    if sim.nrows() != correct.len() {
        return Err(Error::invalid(format!(
            "{} queries but {} correct indices",
            sim.nrows(),
            correct.len()
        )));
    }
    if sim.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("similarity matrix contains NaN".into()));
    }
    let c = sim.ncols();
    (0..sim.nrows())
        .into_par_iter()
        .map(|q| {
            let (row, j) = (sim.row(q), correct[q]);
            if j >= c {
                return Err(Error::invalid(format!("correct index {j} out of range for {c} candidates")));
            }
            let target = row[j];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(i, &s)| s > target || (s == target && i < j))
                .count();
            Ok(ahead + 1)
        })
        .collect()
}

/// Percentage of queries ranked within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::invalid("no ranks to summarize"));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

pub fn mean_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::invalid("no ranks to summarize"));
    }
    Ok(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64)
}

fn centroid_of_units(m: &Array2<f64>, side: &str) -> Result<ndarray::Array1<f64>> {
    let mut acc = ndarray::Array1::zeros(m.ncols());
    for row in m.rows() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Validation(format!("zero or non-finite {side} embedding")));
        }
        acc.scaled_add(1.0 / n, &row);
    }
    Ok(acc / m.nrows() as f64)
}

/// Distance between the centroids of the unit-normalized rows of each set.
pub fn modality_gap(video: &Array2<f64>, text: &Array2<f64>) -> Result<f64> {
    if video.nrows() == 0 || text.nrows() == 0 {
        return Err(Error::invalid("modality gap needs at least one embedding per side"));
    }
    if video.ncols() != text.ncols() {
        return Err(Error::DimMismatch {
            expected: video.ncols(),
            actual: text.ncols(),
        });
    }
    let delta = centroid_of_units(video, "video")? - centroid_of_units(text, "text")?;
    Ok(delta.dot(&delta).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean_rank: f64,
}

impl DirectionMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            r1: recall_at_k(ranks, 1)?,
            r5: recall_at_k(ranks, 5)?,
            r10: recall_at_k(ranks, 10)?,
            mean_rank: mean_rank(ranks)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub t2v: DirectionMetrics,
    pub v2t: DirectionMetrics,
    pub modality_gap: f64,
    pub num_queries: usize,
}

impl RetrievalReport {
    /// Metrics for row-aligned video and text embeddings (pair `i` is row
    /// `i` of both).
    pub fn from_embeddings(video: &Array2<f64>, text: &Array2<f64>) -> Result<Self> {
        if video.nrows() == 0 {
            return Err(Error::Validation("evaluation split is empty".into()));
        }
        if video.dim() != text.dim() {
            return Err(Error::invalid("video and text embeddings differ in shape"));
        }
        let correct: Vec<usize> = (0..video.nrows()).collect();
        let t2v = text.dot(&video.t());
        let v2t = t2v.t().to_owned();
        Ok(Self {
            t2v: DirectionMetrics::from_ranks(&rank_matrix(&t2v, &correct)?)?,
            v2t: DirectionMetrics::from_ranks(&rank_matrix(&v2t, &correct)?)?,
            modality_gap: modality_gap(video, text)?,
            num_queries: video.nrows(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn table(&self) -> String {
        format_table(&[(String::new(), self.clone())])
    }
}

/// Encodes `samples` with the model and scores both retrieval directions.
pub fn evaluate(model: &AlignmentModel, cfg: &ModelConfig, samples: &[Sample]) -> Result<RetrievalReport> {
    if samples.is_empty() {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    let (v, t) = encode(model, cfg, samples)?;
    RetrievalReport::from_embeddings(&v, &t)
}

/// Plain-text table, one report per row, text-to-video columns first.
pub fn format_table(rows: &[(String, RetrievalReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<label_w$} | {:^29} | {:^29}\n",
        "",
        "Text-to-Video",
        "Video-to-Text"
    );
    let cols = format!("{:>6} {:>6} {:>6} {:>8}", "R@1", "R@5", "R@10", "MeanR");
    out.push_str(&format!("{:<label_w$} | {cols} | {cols}\n", "run"));
    for (label, r) in rows {
        let fmt = |m: &DirectionMetrics| {
            format!("{:>6.1} {:>6.1} {:>6.1} {:>8.2}", m.r1, m.r5, m.r10, m.mean_rank)
        };
        out.push_str(&format!("{label:<label_w$} | {} | {}\n", fmt(&r.t2v), fmt(&r.v2t)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn worked_example() {
        let sim = array![[0.9, 0.1, 0.2], [0.8, 0.7, 0.1], [0.1, 0.2, 0.3]];
        let ranks = rank_matrix(&sim, &[0, 1, 2]).unwrap();
        assert_eq!(ranks, vec![1, 2, 1]);
        assert!((recall_at_k(&ranks, 1).unwrap() - 66.67).abs() < 0.005);
        assert!((mean_rank(&ranks).unwrap() - 1.333).abs() < 0.0005);
        assert_eq!(recall_at_k(&ranks, 3).unwrap(), 100.0);
    }

    #[test]
    fn ties_count_against_the_correct_item() {
        let sim = array![[0.5, 0.5, 0.5]];
        assert_eq!(rank_matrix(&sim, &[2]).unwrap(), vec![3]);
        assert_eq!(rank_matrix(&sim, &[0]).unwrap(), vec![1]);
    }

    #[test]
    fn nan_and_empty_inputs_error() {
        assert!(rank_matrix(&array![[f64::NAN, 0.0]], &[0]).is_err());
        assert!(rank_matrix(&array![[1.0, 0.0]], &[2]).is_err());
        assert!(recall_at_k(&[], 1).is_err());
        assert!(mean_rank(&[]).is_err());
    }

    #[test]
    fn identity_similarity_ranks_first() {
        let ranks = rank_matrix(&Array2::eye(4), &[0, 1, 2, 3]).unwrap();
        assert_eq!(ranks, vec![1; 4]);
    }

    #[test]
    fn gap_examples() {
        let a = array![[1.0, 0.0]];
        let b = array![[0.0, 1.0]];
        assert!((modality_gap(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(modality_gap(&a, &a).unwrap(), 0.0);
        assert!(modality_gap(&array![[0.0, 0.0]], &a).is_err());
    }

    #[test]
    fn leaked_text_gives_perfect_recall() {
        let t = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.6, 0.8]];
        let r = RetrievalReport::from_embeddings(&t, &t).unwrap();
        assert_eq!(r.t2v.r1, 100.0);
        assert_eq!(r.v2t.r1, 100.0);
        assert_eq!(r.modality_gap, 0.0);
        assert!(r.table().contains("100.0"));
    }
}
