//! Caption quality score: semantic consistency with the ground-truth text
//! plus pairwise diversity among a video's captions.

use serde::{Deserialize, Serialize};

use crate::embedder::{cosine_sim, TextEmbedder};
use crate::error::{Error, Result};
use crate::model::{CaptionSet, EmbeddingVector, TextRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub consistency: f64,
    pub diversity: f64,
    /// Set when fewer than two captions survived embedding.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub consistency: f64,
    pub diversity: f64,
    pub total: f64,
    pub per_video: Vec<VideoScore>,
}

/// Mean over ordered pairs p != q of `1 - sim(c_p, c_q)`.
pub fn diversity(captions: &[EmbeddingVector]) -> Result<f64> {
    let k = captions.len();
    if k < 2 {
        return Err(Error::invalid("diversity undefined for fewer than two captions"));
    }
    let mut sum = 0.0;
    for p in 0..k {
        for q in (p + 1)..k {
            // sim is symmetric, so each unordered pair stands for two ordered ones
            sum += 2.0 * (1.0 - cosine_sim(&captions[p], &captions[q])?);
        }
    }
    Ok(sum / (k * (k - 1)) as f64)
}

/// Mean cosine similarity between each caption and the text.
pub fn consistency(captions: &[EmbeddingVector], text: &EmbeddingVector) -> Result<f64> {
    if captions.is_empty() {
        return Err(Error::invalid("consistency needs at least one caption"));
    }
    let mut sum = 0.0;
    for c in captions {
        sum += cosine_sim(c, text)?;
    }
    Ok(sum / captions.len() as f64)
}

/// Scores already-embedded caption sets. Each item is
/// `(video_id, caption embeddings, text embedding)`.
pub fn score_embedded(items: &[(String, Vec<EmbeddingVector>, EmbeddingVector)]) -> Result<ScoreBreakdown> {
    if items.is_empty() {
        return Err(Error::invalid("score batch is empty"));
    }
    let mut per_video = Vec::with_capacity(items.len());
    for (id, caps, text) in items {
        if caps.is_empty() {
            return Err(Error::Validation(format!("empty caption set: {id}")));
        }
        let cons = consistency(caps, text)?;
        let (div, flagged) = if caps.len() < 2 {
            (0.0, true)
        } else {
            (diversity(caps)?, false)
        };
        per_video.push(VideoScore {
            video_id: id.clone(),
            consistency: cons,
            diversity: div,
            flagged,
        });
    }
    Ok(reduce(per_video))
}

fn reduce(per_video: Vec<VideoScore>) -> ScoreBreakdown {
    let n = per_video.len() as f64;
    let consistency = per_video.iter().map(|v| v.consistency).sum::<f64>() / n;
    let diversity = per_video.iter().map(|v| v.diversity).sum::<f64>() / n;
    ScoreBreakdown {
        consistency,
        diversity,
        total: consistency + diversity,
        per_video,
    }
}

/// Embeds captions and texts and scores the batch. Blank captions are
/// dropped (and counted in the log); a set left with a single caption scores
/// zero diversity and is flagged.
pub fn score_batch(
    caption_sets: &[CaptionSet],
    texts: &[TextRecord],
    embedder: &dyn TextEmbedder,
) -> Result<ScoreBreakdown> {
    if caption_sets.len() != texts.len() {
        return Err(Error::invalid(format!(
            "{} caption sets for {} texts",
            caption_sets.len(),
            texts.len()
        )));
    }
    let mut items = Vec::with_capacity(texts.len());
    for (set, text) in caption_sets.iter().zip(texts) {
        let usable: Vec<&str> = set
            .captions
            .iter()
            .map(String::as_str)
            .filter(|c| !c.trim().is_empty())
            .collect();
        let dropped = set.captions.len() - usable.len();
        if dropped > 0 {
            log::warn!("video {}: {dropped} blank caption(s) excluded from scoring", set.video_id);
        }
        if usable.is_empty() {
            return Err(Error::Validation(format!("empty caption set: {}", set.video_id)));
        }
        let caps = embedder.embed_batch(&usable)?;
        let t = embedder.embed_text(&text.text)?;
        items.push((set.video_id.clone(), caps, t));
    }
    score_embedded(&items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    /// Ordered-pair double loop, kept independent of the implementation above.
    fn brute_diversity(c: &[Vec<f64>]) -> f64 {
        let k = c.len();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let mut s = 0.0;
        for p in 0..k {
            for q in 0..k {
                if p != q {
                    s += 1.0 - cos(&c[p], &c[q]);
                }
            }
        }
        s / (k * (k - 1)) as f64
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity(&[ev(&[1.0, 0.0]), ev(&[1.0, 0.0])]).unwrap(), 0.0);
        assert_eq!(diversity(&[ev(&[1.0, 0.0]), ev(&[0.0, 1.0])]).unwrap(), 1.0);
        let three = [ev(&[1.0, 0.0]), ev(&[1.0, 0.0]), ev(&[0.0, 1.0])];
        assert_eq!(diversity(&three).unwrap(), 2.0 / 3.0);
        assert_eq!(
            brute_diversity(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]),
            2.0 / 3.0
        );
        let err = diversity(&[ev(&[1.0, 0.0])]).unwrap_err();
        assert!(err.to_string().contains("diversity undefined for fewer than two captions"));
    }

    #[test]
    fn consistency_examples() {
        let t = ev(&[1.0, 0.0]);
        assert_eq!(consistency(&[t.clone(), t.clone()], &t).unwrap(), 1.0);
        assert_eq!(consistency(&[ev(&[1.0, 0.0]), ev(&[0.0, 1.0])], &t).unwrap(), 0.5);
        assert_eq!(consistency(&[ev(&[1.0, 0.0]), ev(&[-1.0, 0.0])], &t).unwrap(), 0.0);
        assert!(consistency(&[ev(&[1.0, 0.0, 0.0])], &t).is_err());
    }

    #[test]
    fn batch_examples() {
        let t = ev(&[1.0, 0.0]);
        let a = ("a".to_string(), vec![t.clone(), t.clone()], t.clone());
        let b = ("b".to_string(), vec![ev(&[1.0, 0.0]), ev(&[0.0, 1.0])], t.clone());
        let s = score_embedded(std::slice::from_ref(&a)).unwrap();
        assert_eq!((s.consistency, s.diversity, s.total), (1.0, 0.0, 1.0));
        let s = score_embedded(std::slice::from_ref(&b)).unwrap();
        assert_eq!(s.total, 1.5);
        let s = score_embedded(&[a, b]).unwrap();
        assert_eq!(s.total, 1.25);
        assert_eq!(s.per_video.len(), 2);
    }

    #[test]
    fn empty_set_names_video() {
        let t = ev(&[1.0, 0.0]);
        let err = score_embedded(&[("v9".into(), vec![], t)]).unwrap_err();
        assert!(err.to_string().contains("v9"));
    }

    #[test]
    fn blank_captions_are_dropped() {
        let e = crate::embedder::LocalEmbedder::new(16, 1).unwrap();
        let set = CaptionSet {
            video_id: "v1".into(),
            captions: vec!["a dog runs".into(), "  ".into()],
            prompt_fingerprint: "fp".into(),
        };
        let text = TextRecord::new("v1", "a dog runs", 70);
        let s = score_batch(&[set], &[text], &e).unwrap();
        assert!(s.per_video[0].flagged);
        assert_eq!(s.diversity, 0.0);
        assert!((s.consistency - 1.0).abs() < 1e-12);
    }

    fn unit_set(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), k).prop_filter("nonzero", |s| {
            s.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-4)
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant(set in unit_set(4), text in unit_set(1), rot in 0usize..4) {
            let caps: Vec<_> = set.iter().map(|v| ev(v)).collect();
            let mut perm = caps.clone();
            perm.rotate_left(rot);
            let t = ev(&text[0]);
            prop_assert!((diversity(&caps).unwrap() - diversity(&perm).unwrap()).abs() < 1e-12);
            prop_assert!((consistency(&caps, &t).unwrap() - consistency(&perm, &t).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn duplication_lowers_diversity(set in unit_set(3), text in unit_set(1)) {
            let caps: Vec<_> = set.iter().map(|v| ev(v)).collect();
            let doubled: Vec<_> = caps.iter().chain(caps.iter()).cloned().collect();
            let t = ev(&text[0]);
            let (d1, d2) = (diversity(&caps).unwrap(), diversity(&doubled).unwrap());
            prop_assert!((consistency(&caps, &t).unwrap() - consistency(&doubled, &t).unwrap()).abs() < 1e-12);
            if d1 > 1e-12 {
                prop_assert!(d2 < d1);
            } else {
                prop_assert!(d2.abs() < 1e-12);
            }
        }

        #[test]
        fn diversity_matches_brute_force(set in unit_set(5)) {
            let caps: Vec<_> = set.iter().map(|v| ev(v)).collect();
            let d = diversity(&caps).unwrap();
            prop_assert!((d - brute_diversity(&set)).abs() < 1e-10);
            prop_assert!((0.0..=2.0).contains(&d));
        }
    }
}
