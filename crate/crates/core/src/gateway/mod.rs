//! Captioner and prompt-engineer backends.
//!
//! A backend answers three kinds of request: derive `k` captions for a video
//! under a prompt, rewrite the current best prompt given example pairs, and
//! merge several candidate prompts into one. Caption requests go through a
//! fallback chain: when a backend refuses (or fails), the next one is tried.

mod http;
mod mock;
mod parse;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CaptionSet, TextRecord, VideoRecord};

pub use http::{HttpChatBackend, HttpChatConfig, LLM_TOKEN_ENV};
pub use mock::{CaptionRule, DefaultRewrite, MockScript, RewriteRule, ScriptedMock};
pub use parse::parse_caption_list;

pub const DEFAULT_INITIAL_PROMPT: &str =
    "Generate 10 captions from different perspectives about this video.";

/// Stable 64-bit content hash of a prompt text, hex encoded.
pub fn fingerprint(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<String>,
}

impl Prompt {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::invalid("prompt text is empty"));
        }
        Ok(Self {
            fingerprint: fingerprint(&text),
            text,
            lineage: None,
        })
    }

    pub fn initial() -> Self {
        Self::new(DEFAULT_INITIAL_PROMPT).expect("non-empty")
    }

    pub fn derived(text: impl Into<String>, parent: &Prompt) -> Result<Self> {
        let mut p = Self::new(text)?;
        p.lineage = Some(parent.fingerprint.clone());
        Ok(p)
    }

    pub fn same_as(&self, other: &Prompt) -> bool {
        self.fingerprint == other.fingerprint
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CaptionReply {
    Captions(Vec<String>),
    Refused(String),
}

pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;

    fn caption(&self, video: &VideoRecord, prompt: &Prompt, k: usize) -> Result<CaptionReply>;

    /// Returns the rewritten prompt text.
    fn rewrite(&self, best: &Prompt, batch: &[(&VideoRecord, &TextRecord)]) -> Result<String>;

    /// Returns one merged prompt text.
    fn summarize(&self, candidates: &[Prompt]) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub backend: String,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    pub fallback: bool,
    pub attempts: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedCaptions {
    pub set: CaptionSet,
    pub provenance: Provenance,
}

/// Ordered list of backends; the first is primary, the rest are fallbacks.
#[derive(Clone)]
pub struct BackendChain {
    backends: Vec<Arc<dyn LlmBackend>>,
}

impl BackendChain {
    pub fn new(backends: Vec<Arc<dyn LlmBackend>>) -> Result<Self> {
        if backends.is_empty() {
            return Err(Error::invalid("backend chain is empty"));
        }
        Ok(Self { backends })
    }

    pub fn single(backend: Arc<dyn LlmBackend>) -> Self {
        Self {
            backends: vec![backend],
        }
    }

    pub fn primary(&self) -> &dyn LlmBackend {
        self.backends[0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.backends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backends.is_empty()
    }
}

/// Asks the chain for exactly `k` captions, walking fallbacks on refusal or
/// failure. At most one attempt per backend.
pub fn generate_captions(
    video: &VideoRecord,
    prompt: &Prompt,
    k: usize,
    chain: &BackendChain,
) -> Result<GeneratedCaptions> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut attempts = Vec::new();
    for (i, backend) in chain.backends.iter().enumerate() {
        match backend.caption(video, prompt, k) {
            Ok(CaptionReply::Captions(lines)) => {
                let captions: Vec<String> = lines
                    .into_iter()
                    .map(|l| l.trim().to_string())
                    .filter(|l| !l.is_empty())
                    .take(k)
                    .collect();
                if captions.len() < k {
                    return Err(Error::ShortCaptionList {
                        video_id: video.id.clone(),
                        wanted: k,
                        got: captions.len(),
                    });
                }
                attempts.push(Attempt {
                    backend: backend.name().to_string(),
                    outcome: "ok".into(),
                });
                return Ok(GeneratedCaptions {
                    set: CaptionSet {
                        video_id: video.id.clone(),
                        captions,
                        prompt_fingerprint: prompt.fingerprint.clone(),
                    },
                    provenance: Provenance {
                        backend: backend.name().to_string(),
                        fallback: i > 0,
                        attempts,
                    },
                });
            }
            Ok(CaptionReply::Refused(reason)) => {
                log::warn!("{} refused video {}: {reason}", backend.name(), video.id);
                attempts.push(Attempt {
                    backend: backend.name().to_string(),
                    outcome: format!("refused: {reason}"),
                });
            }
            Err(e) => {
                log::warn!("{} failed on video {}: {e}", backend.name(), video.id);
                attempts.push(Attempt {
                    backend: backend.name().to_string(),
                    outcome: format!("error: {e}"),
                });
            }
        }
    }
    let reason = attempts
        .iter()
        .map(|a| format!("{} {}", a.backend, a.outcome))
        .collect::<Vec<_>>()
        .join("; ");
    Err(Error::BackendsExhausted {
        video_id: video.id.clone(),
        reason,
    })
}

/// Asks the engineer to rewrite `best`. The result records `best` as parent;
/// an unchanged text means the engineer has reached a fixed point.
pub fn refine_prompt(
    best: &Prompt,
    batch: &[(&VideoRecord, &TextRecord)],
    engineer: &dyn LlmBackend,
) -> Result<Prompt> {
    if batch.is_empty() {
        return Err(Error::invalid("refinement batch is empty"));
    }
    let text = engineer.rewrite(best, batch)?;
    let text = text.trim();
    if text == best.text {
        return Ok(best.clone());
    }
    Prompt::derived(text, best)
}

/// Merges candidate prompts. A single (distinct) candidate is returned
/// unchanged; on backend failure the best-scoring candidate is returned.
pub fn summarize_prompts(
    candidates: &[Prompt],
    scores: Option<&[f64]>,
    engineer: &dyn LlmBackend,
) -> Result<Prompt> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates"));
    }
    let mut distinct: Vec<&Prompt> = Vec::new();
    for c in candidates {
        if !distinct.iter().any(|d| d.same_as(c)) {
            distinct.push(c);
        }
    }
    if distinct.len() == 1 {
        return Ok(distinct[0].clone());
    }
    let owned: Vec<Prompt> = distinct.iter().map(|p| (*p).clone()).collect();
    match engineer.summarize(&owned) {
        Ok(text) => {
            let mut p = Prompt::new(text.trim())?;
            p.lineage = candidates[0].lineage.clone();
            Ok(p)
        }
        Err(e) => {
            log::warn!("prompt summarization failed, keeping best candidate: {e}");
            let best = match scores {
                Some(s) if s.len() == candidates.len() => s
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, v)| if *v > s[best] { i } else { best }),
                _ => 0,
            };
            Ok(candidates[best].clone())
        }
    }
}

/// Serializable backend description used by run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendSpec {
    HttpChat(HttpChatConfig),
    /// `script: None` uses the script emitted by the synthetic corpus generator.
    ScriptedMock {
        #[serde(default)]
        script: Option<PathBuf>,
        #[serde(default)]
        name: Option<String>,
    },
}

impl BackendSpec {
    pub fn build(&self, synthetic: Option<&MockScript>) -> Result<Arc<dyn LlmBackend>> {
        Ok(match self {
            BackendSpec::HttpChat(cfg) => Arc::new(HttpChatBackend::new(cfg.clone())),
            BackendSpec::ScriptedMock { script, name } => {
                let mut s = match script {
                    Some(path) => MockScript::load(path)?,
                    None => synthetic
                        .cloned()
                        .ok_or_else(|| Error::invalid("scripted mock without a script needs a synthetic corpus"))?,
                };
                if let Some(n) = name {
                    s.name = Some(n.clone());
                }
                Arc::new(ScriptedMock::new(s))
            }
        })
    }
}

pub fn build_chain(specs: &[BackendSpec], synthetic: Option<&MockScript>) -> Result<BackendChain> {
    BackendChain::new(
        specs
            .iter()
            .map(|s| s.build(synthetic))
            .collect::<Result<Vec<_>>>()?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn video(id: &str) -> VideoRecord {
        VideoRecord {
            id: id.into(),
            frames: Array2::zeros((1, 2)),
            source_ref: None,
            description: None,
        }
    }

    #[test]
    fn initial_prompt_text() {
        assert_eq!(
            Prompt::initial().text,
            "Generate 10 captions from different perspectives about this video."
        );
    }

    #[test]
    fn mock_echo_captions() {
        let mock = ScriptedMock::new(MockScript {
            captions: vec![CaptionRule::lines("v1", None, &["a", "b", "c"])],
            ..Default::default()
        });
        let chain = BackendChain::single(Arc::new(mock));
        let out = generate_captions(&video("v1"), &Prompt::initial(), 3, &chain).unwrap();
        assert_eq!(out.set.captions, vec!["a", "b", "c"]);
        assert_eq!(out.set.prompt_fingerprint, Prompt::initial().fingerprint);
        assert!(!out.provenance.fallback);
    }

    #[test]
    fn refusal_falls_back() {
        let primary = ScriptedMock::new(MockScript {
            name: Some("primary".into()),
            captions: vec![CaptionRule::refusal("v2", None, "safety block")],
            ..Default::default()
        });
        let offline = ScriptedMock::new(MockScript {
            name: Some("offline".into()),
            captions: vec![CaptionRule::lines("v2", None, &["x", "y"])],
            ..Default::default()
        });
        let chain = BackendChain::new(vec![Arc::new(primary), Arc::new(offline)]).unwrap();
        let out = generate_captions(&video("v2"), &Prompt::initial(), 2, &chain).unwrap();
        assert_eq!(out.set.captions, vec!["x", "y"]);
        assert!(out.provenance.fallback);
        assert_eq!(out.provenance.backend, "offline");
        assert_eq!(out.provenance.attempts.len(), 2);
        assert!(out.provenance.attempts[0].outcome.starts_with("refused"));
    }

    #[test]
    fn exhausted_chain_reports_video_and_reason() {
        let a = ScriptedMock::new(MockScript {
            captions: vec![CaptionRule::refusal("v3", None, "adult content")],
            ..Default::default()
        });
        let chain = BackendChain::single(Arc::new(a));
        let err = generate_captions(&video("v3"), &Prompt::initial(), 2, &chain).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("v3") && msg.contains("adult content"), "{msg}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn short_list_is_an_error() {
        let a = ScriptedMock::new(MockScript {
            captions: vec![CaptionRule::lines("v1", None, &["only one"])],
            ..Default::default()
        });
        let chain = BackendChain::single(Arc::new(a));
        assert!(matches!(
            generate_captions(&video("v1"), &Prompt::initial(), 2, &chain),
            Err(Error::ShortCaptionList { wanted: 2, got: 1, .. })
        ));
    }

    #[test]
    fn identity_engineer_is_fixed_point() {
        let mock = ScriptedMock::new(MockScript::default());
        let v = video("v1");
        let t = TextRecord::new("v1", "a dog", 70);
        let p = Prompt::initial();
        let out = refine_prompt(&p, &[(&v, &t)], &mock).unwrap();
        assert_eq!(out.fingerprint, p.fingerprint);
    }

    #[test]
    fn appending_engineer_sets_lineage() {
        let mock = ScriptedMock::new(MockScript {
            default_rewrite: DefaultRewrite::Append(" Include actions and emotions.".into()),
            ..Default::default()
        });
        let v = video("v1");
        let t = TextRecord::new("v1", "a dog", 70);
        let p = Prompt::initial();
        let out = refine_prompt(&p, &[(&v, &t)], &mock).unwrap();
        assert_ne!(out.fingerprint, p.fingerprint);
        assert_eq!(out.lineage.as_deref(), Some(p.fingerprint.as_str()));
        assert!(out.text.ends_with("Include actions and emotions."));
        assert!(refine_prompt(&p, &[], &mock).is_err());
    }

    #[test]
    fn summarize_cases() {
        let mock = ScriptedMock::new(MockScript::default());
        let p = Prompt::new("Describe actions.").unwrap();
        assert_eq!(summarize_prompts(std::slice::from_ref(&p), None, &mock).unwrap(), p);
        let err = summarize_prompts(&[], None, &mock).unwrap_err();
        assert!(err.to_string().contains("no candidates"));

        let q = Prompt::new("Describe actions. Mention the scene.").unwrap();
        let merged = summarize_prompts(&[p.clone(), q.clone()], None, &mock).unwrap();
        assert_eq!(merged.text, "Describe actions. Mention the scene.");
        let again = summarize_prompts(&[p, q], None, &mock).unwrap();
        assert_eq!(merged, again);
    }

    #[test]
    fn fingerprint_is_stable() {
        assert_eq!(fingerprint("abc"), "ba7816bf8f01cfea");
    }
}
