//! Prompt self-improvement: the engineer rewrites the best prompt, the
//! captioner answers it, and the rewrite is kept only when its caption score
//! strictly beats the best so far.
//!
//! Two loop shapes are supported. The default rewrites once per iteration
//! and scores the whole evaluation slice. With `per_batch` set, each batch is
//! scored with the current prompt, every pair in it proposes a rewrite of the
//! best prompt and the proposals are merged; a pass over all batches is one
//! sweep. Either way the loop stops at a prompt fixed point, after
//! `max_no_improve` unproductive iterations (or sweeps), or at
//! `max_iterations`.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::{CachedEmbedder, TextEmbedder};
use crate::error::{Error, Result};
use crate::gateway::{generate_captions, refine_prompt, summarize_prompts, BackendChain, LlmBackend, Prompt};
use crate::model::{CaptionSet, Corpus, CorpusPair, Split, TextRecord};
use crate::scoring::{score_batch, ScoreBreakdown};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsiConfig {
    #[serde(default = "default_t")]
    pub max_iterations: usize,
    #[serde(default = "default_no_improve")]
    pub max_no_improve: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_k")]
    pub captions_per_video: usize,
    #[serde(default = "default_slice")]
    pub eval_slice: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub per_batch: bool,
}

fn default_t() -> usize {
    400
}
fn default_no_improve() -> usize {
    2
}
fn default_batch() -> usize {
    8
}
fn default_k() -> usize {
    crate::model::DEFAULT_CAPTIONS
}
fn default_slice() -> usize {
    32
}

impl Default for CsiConfig {
    fn default() -> Self {
        Self {
            max_iterations: default_t(),
            max_no_improve: default_no_improve(),
            batch_size: default_batch(),
            captions_per_video: default_k(),
            eval_slice: default_slice(),
            seed: 0,
            per_batch: false,
        }
    }
}

impl CsiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if self.captions_per_video < 2 {
            return Err(Error::invalid("captions_per_video must be at least 2"));
        }
        if self.batch_size == 0 || self.eval_slice == 0 || self.max_no_improve == 0 {
            return Err(Error::invalid(
                "batch_size, eval_slice and max_no_improve must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    FixedPoint,
    NoImprove,
    MaxIterations,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::FixedPoint => "fixed-point",
            Termination::NoImprove => "no-improve",
            Termination::MaxIterations => "max-iterations",
        }
    }
}

/// One persisted line of the optimization history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iter: usize,
    pub prompt_text: String,
    pub fingerprint: String,
    /// Scores are absent for fixed-point and failed iterations.
    pub consistency: Option<f64>,
    pub diversity: Option<f64>,
    pub total: Option<f64>,
    pub accepted: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub best_prompt: Prompt,
    /// Negative infinity until some prompt has been accepted.
    pub best_score: f64,
    pub history: Vec<HistoryEntry>,
    pub no_improve: usize,
    pub termination: Termination,
}

impl PromptState {
    /// Best score after each history entry.
    pub fn best_score_trace(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.history
            .iter()
            .map(|h| {
                if h.accepted {
                    best = h.total.unwrap_or(best);
                }
                best
            })
            .collect()
    }

    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    pub fn write_history(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for h in &self.history {
            out.push_str(&serde_json::to_string(h)?);
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }

    pub fn write_best_prompt(&self, path: &Path) -> Result<()> {
        write_file(path, format!("{}\n", self.best_prompt.text).as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Fixed seeded subsample of the train split, in corpus order.
pub fn evaluation_slice<'a>(corpus: &'a Corpus, cfg: &CsiConfig) -> Result<Vec<&'a CorpusPair>> {
    let train = corpus.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Validation("train split is empty".into()));
    }
    if train.len() <= cfg.eval_slice {
        return Ok(train);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx = sample_indices(&mut rng, train.len(), cfg.eval_slice).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| train[i]).collect())
}

/// Captions every pair of the slice under `prompt`, in slice order.
pub fn caption_slice(
    prompt: &Prompt,
    slice: &[&CorpusPair],
    k: usize,
    captioner: &BackendChain,
) -> Result<Vec<CaptionSet>> {
    slice
        .par_iter()
        .map(|p| generate_captions(&p.video, prompt, k, captioner).map(|g| g.set))
        .collect()
}

/// Caption score of `prompt` over the slice.
pub fn evaluate_prompt(
    prompt: &Prompt,
    slice: &[&CorpusPair],
    cfg: &CsiConfig,
    captioner: &BackendChain,
    embedder: &dyn TextEmbedder,
) -> Result<ScoreBreakdown> {
    if slice.is_empty() {
        return Err(Error::invalid("evaluation slice is empty"));
    }
    let sets = caption_slice(prompt, slice, cfg.captions_per_video, captioner)?;
    let texts: Vec<TextRecord> = slice.iter().map(|p| p.text.clone()).collect();
    score_batch(&sets, &texts, embedder)
}

struct Loop<'a> {
    best: Prompt,
    best_score: f64,
    history: Vec<HistoryEntry>,
    no_improve: usize,
    cfg: &'a CsiConfig,
}

impl Loop<'_> {
    fn record_fixed_point(&mut self, p: &Prompt) {
        self.history.push(HistoryEntry {
            iter: self.history.len() + 1,
            prompt_text: p.text.clone(),
            fingerprint: p.fingerprint.clone(),
            consistency: None,
            diversity: None,
            total: None,
            accepted: false,
            reason: Termination::FixedPoint.as_str().into(),
        });
    }

    fn record_failure(&mut self, p: Option<&Prompt>, err: &Error) {
        log::warn!("iteration {} failed: {err}", self.history.len() + 1);
        self.history.push(HistoryEntry {
            iter: self.history.len() + 1,
            prompt_text: p.map(|p| p.text.clone()).unwrap_or_default(),
            fingerprint: p.map(|p| p.fingerprint.clone()).unwrap_or_default(),
            consistency: None,
            diversity: None,
            total: None,
            accepted: false,
            reason: format!("failed: {err}"),
        });
    }

    /// Records a scored prompt; returns whether it became the best.
    fn record_score(&mut self, p: &Prompt, s: &ScoreBreakdown) -> bool {
        let accepted = s.total > self.best_score;
        let reason = if accepted {
            "improved"
        } else if s.total == self.best_score {
            "tie"
        } else {
            "not-improved"
        };
        self.history.push(HistoryEntry {
            iter: self.history.len() + 1,
            prompt_text: p.text.clone(),
            fingerprint: p.fingerprint.clone(),
            consistency: Some(s.consistency),
            diversity: Some(s.diversity),
            total: Some(s.total),
            accepted,
            reason: reason.into(),
        });
        if accepted {
            self.best = p.clone();
            self.best_score = s.total;
        }
        accepted
    }

    fn iterations_left(&self) -> bool {
        self.history.len() < self.cfg.max_iterations
    }

    fn finish(self, termination: Termination) -> PromptState {
        log::info!(
            "prompt search stopped ({}) after {} iteration(s), best score {}",
            termination.as_str(),
            self.history.len(),
            self.best_score
        );
        PromptState {
            best_prompt: self.best,
            best_score: self.best_score,
            history: self.history,
            no_improve: self.no_improve,
            termination,
        }
    }
}

fn batch_at<'a>(slice: &[&'a CorpusPair], start: usize, size: usize) -> Vec<&'a CorpusPair> {
    (0..size.min(slice.len()))
        .map(|i| slice[(start + i) % slice.len()])
        .collect()
}

pub fn run_csi(
    corpus: &Corpus,
    init: &Prompt,
    cfg: &CsiConfig,
    captioner: &BackendChain,
    engineer: &dyn LlmBackend,
    embedder: &dyn TextEmbedder,
) -> Result<PromptState> {
    cfg.validate()?;
    let slice = evaluation_slice(corpus, cfg)?;
    let embedder = CachedEmbedder::new(embedder);
    let mut lp = Loop {
        best: init.clone(),
        best_score: f64::NEG_INFINITY,
        history: Vec::new(),
        no_improve: 0,
        cfg,
    };
    if cfg.per_batch {
        run_per_batch(&mut lp, &slice, captioner, engineer, &embedder).map(|t| lp.finish(t))
    } else {
        run_whole_slice(&mut lp, &slice, captioner, engineer, &embedder).map(|t| lp.finish(t))
    }
}

fn run_whole_slice(
    lp: &mut Loop<'_>,
    slice: &[&CorpusPair],
    captioner: &BackendChain,
    engineer: &dyn LlmBackend,
    embedder: &dyn TextEmbedder,
) -> Result<Termination> {
    let cfg = lp.cfg;
    while lp.iterations_left() {
        let t = lp.history.len();
        let batch = batch_at(slice, t * cfg.batch_size, cfg.batch_size);
        let pairs: Vec<_> = batch.iter().map(|p| (&p.video, &p.text)).collect();
        let improved = match refine_prompt(&lp.best, &pairs, engineer) {
            Err(e) => {
                lp.record_failure(None, &e);
                false
            }
            Ok(p) if p.same_as(&lp.best) => {
                lp.record_fixed_point(&p);
                return Ok(Termination::FixedPoint);
            }
            Ok(p) => match evaluate_prompt(&p, slice, cfg, captioner, embedder) {
                Ok(score) => lp.record_score(&p, &score),
                Err(e) => {
                    lp.record_failure(Some(&p), &e);
                    false
                }
            },
        };
        lp.no_improve = if improved { 0 } else { lp.no_improve + 1 };
        if lp.no_improve >= cfg.max_no_improve {
            return Ok(Termination::NoImprove);
        }
    }
    Ok(Termination::MaxIterations)
}

fn run_per_batch(
    lp: &mut Loop<'_>,
    slice: &[&CorpusPair],
    captioner: &BackendChain,
    engineer: &dyn LlmBackend,
    embedder: &dyn TextEmbedder,
) -> Result<Termination> {
    let cfg = lp.cfg;
    let mut prompt = lp.best.clone();
    let batches: Vec<Vec<&CorpusPair>> = slice.chunks(cfg.batch_size).map(<[_]>::to_vec).collect();
    while lp.no_improve < cfg.max_no_improve {
        let mut improved = false;
        for batch in &batches {
            if !lp.iterations_left() {
                return Ok(Termination::MaxIterations);
            }
            match evaluate_prompt(&prompt, batch, cfg, captioner, embedder) {
                Ok(score) => improved |= lp.record_score(&prompt, &score),
                Err(e) => lp.record_failure(Some(&prompt), &e),
            }
            let proposals: Vec<Prompt> = batch
                .iter()
                .filter_map(|p| match refine_prompt(&lp.best, &[(&p.video, &p.text)], engineer) {
                    Ok(p) => Some(p),
                    Err(e) => {
                        log::warn!("rewrite for {} failed: {e}", p.video.id);
                        None
                    }
                })
                .collect();
            if proposals.is_empty() {
                continue;
            }
            let next = summarize_prompts(&proposals, None, engineer)?;
            if next.same_as(&lp.best) {
                if !lp.iterations_left() {
                    return Ok(Termination::MaxIterations);
                }
                lp.record_fixed_point(&next);
                return Ok(Termination::FixedPoint);
            }
            prompt = next;
        }
        lp.no_improve = if improved { 0 } else { lp.no_improve + 1 };
    }
    Ok(Termination::NoImprove)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::LocalEmbedder;
    use crate::gateway::{fingerprint, CaptionRule, MockScript, RewriteRule, ScriptedMock};
    use crate::model::{TextRecord, VideoRecord};
    use ndarray::Array2;
    use std::sync::Arc;

    fn corpus(n: usize) -> Corpus {
        let pairs = (0..n)
            .map(|i| CorpusPair {
                video: VideoRecord {
                    id: format!("v{i}"),
                    frames: Array2::ones((1, 16)),
                    source_ref: None,
                    description: None,
                },
                text: TextRecord::new(format!("v{i}"), &format!("a red car number {i}"), 70),
                split: Split::Train,
            })
            .collect();
        Corpus::new(pairs, 70).unwrap()
    }

    fn captions_for(script: &mut MockScript, n: usize, prompt: &str, lines: &[&str]) {
        let fp = fingerprint(prompt);
        for i in 0..n {
            script.captions.push(CaptionRule::lines(&format!("v{i}"), Some(&fp), lines));
        }
    }

    fn cfg() -> CsiConfig {
        CsiConfig {
            max_iterations: 6,
            captions_per_video: 2,
            batch_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn identity_engineer_stops_at_once() {
        let c = corpus(3);
        let mock = Arc::new(ScriptedMock::new(MockScript::default()));
        let emb = LocalEmbedder::new(64, 0).unwrap();
        let init = Prompt::initial();
        let st = run_csi(&c, &init, &cfg(), &BackendChain::single(mock.clone()), mock.as_ref(), &emb).unwrap();
        assert_eq!(st.termination, Termination::FixedPoint);
        assert_eq!(st.iterations(), 1);
        assert_eq!(st.best_prompt, init);
        assert_eq!(st.best_score, f64::NEG_INFINITY);
    }

    #[test]
    fn stagnation_ends_with_no_improve() {
        let c = corpus(2);
        let mut s = MockScript::default();
        let init = Prompt::initial();
        s.rewrites.push(RewriteRule::to(&init.fingerprint, &["good"]));
        s.rewrites.push(RewriteRule::to(&fingerprint("good"), &["bad a", "bad b"]));
        captions_for(&mut s, 2, "good", &["a red car", "a red car driving"]);
        captions_for(&mut s, 2, "bad a", &["sunset over water", "sunset over the sea"]);
        captions_for(&mut s, 2, "bad b", &["sunset over the sea", "sunset over water"]);
        let mock = Arc::new(ScriptedMock::new(s));
        let emb = LocalEmbedder::new(64, 0).unwrap();
        let st = run_csi(&c, &init, &cfg(), &BackendChain::single(mock.clone()), mock.as_ref(), &emb).unwrap();
        assert_eq!(st.termination, Termination::NoImprove);
        assert_eq!(st.best_prompt.text, "good");
        let reasons: Vec<&str> = st.history.iter().map(|h| h.reason.as_str()).collect();
        assert_eq!(reasons, vec!["improved", "not-improved", "not-improved"]);
        assert_eq!(st.history[1].total, st.history[2].total);
    }

    #[test]
    fn failed_iterations_count_as_stagnant() {
        let c = corpus(2);
        let mut s = MockScript::default();
        let init = Prompt::initial();
        // rewritten prompts have no captions scripted, so evaluation fails
        s.rewrites.push(RewriteRule::to(&init.fingerprint, &["x", "y"]));
        let mock = Arc::new(ScriptedMock::new(s));
        let emb = LocalEmbedder::new(64, 0).unwrap();
        let st = run_csi(&c, &init, &cfg(), &BackendChain::single(mock.clone()), mock.as_ref(), &emb).unwrap();
        assert_eq!(st.termination, Termination::NoImprove);
        assert!(st.history.iter().all(|h| h.reason.starts_with("failed")));
        assert_eq!(st.best_prompt, init);
    }

    #[test]
    fn per_batch_mode_merges_proposals() {
        let c = corpus(4);
        let mut s = MockScript::default();
        let init = Prompt::initial();
        captions_for(&mut s, 4, &init.text, &["a red car", "a blue car"]);
        s.default_rewrite = crate::gateway::DefaultRewrite::Append(" Be specific.".into());
        let mock = Arc::new(ScriptedMock::new(s));
        let emb = LocalEmbedder::new(64, 0).unwrap();
        let mut cf = cfg();
        cf.per_batch = true;
        cf.max_iterations = 20;
        let st = run_csi(&c, &init, &cf, &BackendChain::single(mock.clone()), mock.as_ref(), &emb).unwrap();
        // the merged rewrite has no scripted captions, so every later
        // evaluation fails and the search stagnates
        assert!(st.history[0].accepted);
        assert_eq!(st.history[1].prompt_text, format!("{} Be specific.", init.text));
        assert_eq!(st.termination, Termination::NoImprove);
        let trace = st.best_score_trace();
        assert!(trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn slice_is_seeded_subset() {
        let c = corpus(10);
        let cf = CsiConfig {
            eval_slice: 4,
            seed: 3,
            ..cfg()
        };
        let a: Vec<&str> = evaluation_slice(&c, &cf).unwrap().iter().map(|p| p.video.id.as_str()).collect();
        let b: Vec<&str> = evaluation_slice(&c, &cf).unwrap().iter().map(|p| p.video.id.as_str()).collect();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
    }
}
