//! Deterministic scripted backend. Scripts are JSON tables keyed by video id
//! and prompt fingerprint; rewrites are keyed by the fingerprint of the prompt
//! being rewritten.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{CaptionReply, LlmBackend, Prompt};
use crate::error::{Error, Result};
use crate::model::{TextRecord, VideoRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRule {
    pub video_id: String,
    /// `None` matches any prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_fp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lines: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refuse: Option<String>,
}

impl CaptionRule {
    pub fn lines(video_id: &str, prompt_fp: Option<&str>, lines: &[&str]) -> Self {
        Self {
            video_id: video_id.into(),
            prompt_fp: prompt_fp.map(str::to_string),
            lines: Some(lines.iter().map(|s| s.to_string()).collect()),
            refuse: None,
        }
    }

    pub fn refusal(video_id: &str, prompt_fp: Option<&str>, reason: &str) -> Self {
        Self {
            video_id: video_id.into(),
            prompt_fp: prompt_fp.map(str::to_string),
            lines: None,
            refuse: Some(reason.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewriteRule {
    /// `None` matches any prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_fp: Option<String>,
    /// Successive calls cycle through these outputs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub append: Option<String>,
}

impl RewriteRule {
    pub fn to(prompt_fp: &str, outputs: &[&str]) -> Self {
        Self {
            prompt_fp: Some(prompt_fp.into()),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            append: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefaultRewrite {
    /// Return the input unchanged.
    #[default]
    Identity,
    Append(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub captions: Vec<CaptionRule>,
    #[serde(default)]
    pub rewrites: Vec<RewriteRule>,
    #[serde(default)]
    pub default_rewrite: DefaultRewrite,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                artifact: path.display().to_string(),
                producer: "synth".into(),
            });
        }
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw = serde_json::to_string_pretty(self)?;
        std::fs::write(path, raw + "\n").map_err(|e| Error::io(path, e))
    }
}

pub struct ScriptedMock {
    name: String,
    exact: HashMap<(String, String), usize>,
    wildcard: HashMap<String, usize>,
    script: MockScript,
    calls: Mutex<HashMap<usize, usize>>,
}

impl ScriptedMock {
    pub fn new(script: MockScript) -> Self {
        let mut exact = HashMap::new();
        let mut wildcard = HashMap::new();
        for (i, rule) in script.captions.iter().enumerate() {
            match &rule.prompt_fp {
                Some(fp) => {
                    exact.entry((rule.video_id.clone(), fp.clone())).or_insert(i);
                }
                None => {
                    wildcard.entry(rule.video_id.clone()).or_insert(i);
                }
            }
        }
        Self {
            name: script.name.clone().unwrap_or_else(|| "scripted-mock".into()),
            exact,
            wildcard,
            script,
            calls: Mutex::new(HashMap::new()),
        }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }
}

impl LlmBackend for ScriptedMock {
    fn name(&self) -> &str {
        &self.name
    }

    fn caption(&self, video: &VideoRecord, prompt: &Prompt, _k: usize) -> Result<CaptionReply> {
        let idx = self
            .exact
            .get(&(video.id.clone(), prompt.fingerprint.clone()))
            .or_else(|| self.wildcard.get(&video.id))
            .ok_or_else(|| Error::Backend {
                backend: self.name.clone(),
                attempts: 1,
                reason: format!(
                    "no scripted captions for video {} under prompt {}",
                    video.id, prompt.fingerprint
                ),
            })?;
        let rule = &self.script.captions[*idx];
        Ok(match (&rule.refuse, &rule.lines) {
            (Some(reason), _) => CaptionReply::Refused(reason.clone()),
            (None, Some(lines)) => CaptionReply::Captions(lines.clone()),
            (None, None) => CaptionReply::Captions(Vec::new()),
        })
    }

    fn rewrite(&self, best: &Prompt, _batch: &[(&VideoRecord, &TextRecord)]) -> Result<String> {
        let hit = self
            .script
            .rewrites
            .iter()
            .position(|r| r.prompt_fp.as_deref() == Some(best.fingerprint.as_str()))
            .or_else(|| self.script.rewrites.iter().position(|r| r.prompt_fp.is_none()));
        let Some(i) = hit else {
            return Ok(match &self.script.default_rewrite {
                DefaultRewrite::Identity => best.text.clone(),
                DefaultRewrite::Append(suffix) => format!("{}{}", best.text, suffix),
            });
        };
        let rule = &self.script.rewrites[i];
        if let Some(suffix) = &rule.append {
            return Ok(format!("{}{}", best.text, suffix));
        }
        if rule.outputs.is_empty() {
            return Ok(best.text.clone());
        }
        let mut calls = self.calls.lock().expect("mock call counter poisoned");
        let n = calls.entry(i).or_insert(0);
        let out = rule.outputs[*n % rule.outputs.len()].clone();
        *n += 1;
        Ok(out)
    }

    /// Concatenates candidates and drops repeated sentences.
    fn summarize(&self, candidates: &[Prompt]) -> Result<String> {
        let mut seen: Vec<String> = Vec::new();
        for c in candidates {
            for sentence in split_sentences(&c.text) {
                if !seen.contains(&sentence) {
                    seen.push(sentence);
                }
            }
        }
        Ok(seen.join(" "))
    }
}

fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        cur.push(ch);
        if matches!(ch, '.' | '!' | '?') {
            let s = cur.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            cur.clear();
        }
    }
    let s = cur.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_round_trips_through_json() {
        let s = MockScript {
            name: Some("m".into()),
            captions: vec![
                CaptionRule::lines("v1", Some("ab"), &["x"]),
                CaptionRule::refusal("v2", None, "blocked"),
            ],
            rewrites: vec![RewriteRule::to("ab", &["p1", "p2"])],
            default_rewrite: DefaultRewrite::Append(" more".into()),
        };
        let raw = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<MockScript>(&raw).unwrap(), s);
        assert!(serde_json::from_str::<MockScript>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn rewrite_outputs_cycle() {
        let p = Prompt::new("start").unwrap();
        let m = ScriptedMock::new(MockScript {
            rewrites: vec![RewriteRule::to(&p.fingerprint, &["a", "b"])],
            ..Default::default()
        });
        let got: Vec<String> = (0..3).map(|_| m.rewrite(&p, &[]).unwrap()).collect();
        assert_eq!(got, vec!["a", "b", "a"]);
    }

    #[test]
    fn sentences_split_on_terminators() {
        assert_eq!(split_sentences("A b. C d! e"), vec!["A b.", "C d!", "e"]);
    }
}
