//! Chat-completions client (`{model, messages, temperature}` ->
//! `{choices: [{message: {content}}]}`) used for both the captioner and the
//! prompt engineer.

use std::path::Path;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{parse_caption_list, CaptionReply, LlmBackend, Prompt};
use crate::embedder::{http_agent, Semaphore};
use crate::error::{Error, Result};
use crate::model::{TextRecord, VideoRecord};

pub const LLM_TOKEN_ENV: &str = "EXCAE_LLM_TOKEN";

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png", "webp", "gif"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpChatConfig {
    /// Full URL of the chat completions endpoint.
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_attempts() -> usize {
    3
}
fn default_parallelism() -> usize {
    4
}
fn default_timeout() -> u64 {
    120
}
fn default_backoff() -> u64 {
    500
}

impl HttpChatConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            name: None,
            max_attempts: default_attempts(),
            parallelism: default_parallelism(),
            timeout_secs: default_timeout(),
            backoff_ms: default_backoff(),
        }
    }
}

#[derive(Debug)]
enum ChatOutcome {
    Content(String),
    Refused(String),
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

pub struct HttpChatBackend {
    name: String,
    cfg: HttpChatConfig,
    token: Option<String>,
    agent: ureq::Agent,
    gate: Semaphore,
}

impl HttpChatBackend {
    pub fn new(cfg: HttpChatConfig) -> Self {
        Self::with_token(cfg, std::env::var(LLM_TOKEN_ENV).ok())
    }

    pub fn with_token(cfg: HttpChatConfig, token: Option<String>) -> Self {
        Self {
            name: cfg.name.clone().unwrap_or_else(|| format!("http:{}", cfg.model)),
            agent: http_agent(Duration::from_secs(cfg.timeout_secs)),
            gate: Semaphore::new(cfg.parallelism),
            token,
            cfg,
        }
    }

    fn send_once(&self, messages: &Value) -> std::result::Result<ChatOutcome, Failure> {
        let _permit = self.gate.acquire();
        let body = json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": 0,
        });
        let mut req = self.agent.post(&self.cfg.endpoint);
        if let Some(tok) = &self.token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(Failure::Retryable(format!("HTTP {status}: {text}")));
        }
        if status != 200 {
            if text.contains("content_policy") || text.contains("content_filter") {
                return Ok(ChatOutcome::Refused(format!("HTTP {status}: {text}")));
            }
            return Err(Failure::Fatal(format!("HTTP {status}: {text}")));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| Failure::Fatal(format!("bad JSON: {e}")))?;
        interpret(&v).map_err(Failure::Fatal)
    }

    fn chat(&self, messages: Value) -> Result<ChatOutcome> {
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let attempts = self.cfg.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.send_once(&messages) {
                Ok(out) => return Ok(out),
                Err(Failure::Fatal(reason)) => {
                    return Err(Error::Backend {
                        backend: self.name.clone(),
                        attempts: attempt,
                        reason,
                    })
                }
                Err(Failure::Retryable(reason)) => {
                    log::warn!("{} attempt {attempt} failed: {reason}", self.name);
                    last = reason;
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(Error::Backend {
            backend: self.name.clone(),
            attempts,
            reason: last,
        })
    }

    fn text_reply(&self, messages: Value) -> Result<String> {
        match self.chat(messages)? {
            ChatOutcome::Content(c) => Ok(c),
            ChatOutcome::Refused(r) => Err(Error::Backend {
                backend: self.name.clone(),
                attempts: 1,
                reason: format!("refused: {r}"),
            }),
        }
    }
}

fn interpret(v: &Value) -> std::result::Result<ChatOutcome, String> {
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| "response has no choices".to_string())?;
    let message = choice.get("message").cloned().unwrap_or(Value::Null);
    if let Some(r) = message.get("refusal").and_then(Value::as_str) {
        return Ok(ChatOutcome::Refused(r.to_string()));
    }
    if choice.get("finish_reason").and_then(Value::as_str) == Some("content_filter") {
        return Ok(ChatOutcome::Refused("content_filter".into()));
    }
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .ok_or_else(|| "response message has no content".to_string())?;
    if looks_like_refusal(content) {
        return Ok(ChatOutcome::Refused(content.trim().to_string()));
    }
    Ok(ChatOutcome::Content(content.to_string()))
}

fn looks_like_refusal(content: &str) -> bool {
    let head: String = content.trim_start().chars().take(60).collect::<String>().to_lowercase();
    ["i'm sorry", "i am sorry", "i can't assist", "i cannot assist", "i can't help", "i cannot help"]
        .iter()
        .any(|p| head.starts_with(p))
}

/// Image parts for a video: a remote URI is passed through, a local image
/// file (or a directory of frames) is inlined as data URLs.
pub(crate) fn image_parts(source_ref: &str) -> Result<Vec<Value>> {
    if source_ref.starts_with("http://") || source_ref.starts_with("https://") || source_ref.starts_with("data:") {
        return Ok(vec![image_part(source_ref.to_string())]);
    }
    let path = Path::new(source_ref);
    let files = if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_image(p))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    files
        .iter()
        .map(|f| {
            let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
            let mime = match f.extension().and_then(|e| e.to_str()).map(str::to_lowercase).as_deref() {
                Some("png") => "image/png",
                Some("webp") => "image/webp",
                Some("gif") => "image/gif",
                _ => "image/jpeg",
            };
            let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
            Ok(image_part(format!("data:{mime};base64,{b64}")))
        })
        .collect()
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_lowercase().as_str()))
        .unwrap_or(false)
}

fn image_part(url: String) -> Value {
    json!({"type": "image_url", "image_url": {"url": url}})
}

pub(crate) fn caption_messages(video: &VideoRecord, prompt: &Prompt, k: usize) -> Result<Value> {
    let source = video.source_ref.as_deref().ok_or_else(|| {
        Error::invalid(format!("video {} has no source_ref for the http captioner", video.id))
    })?;
    let mut content = vec![json!({
        "type": "text",
        "text": format!(
            "{}\nAnswer with exactly {k} captions as a numbered list, one caption per line.",
            prompt.text
        ),
    })];
    content.extend(image_parts(source)?);
    Ok(json!([
        {"role": "system", "content": "You write captions for videos."},
        {"role": "user", "content": content},
    ]))
}

pub(crate) fn rewrite_messages(best: &Prompt, batch: &[(&VideoRecord, &TextRecord)]) -> Value {
    let mut body = String::new();
    body.push_str(
        "You improve instructions for a video captioning model. Its captions are used to \
         match each video with its reference description, so they must stay faithful to \
         the video while covering it from several distinct angles.\n\nCurrent prompt:\n",
    );
    body.push_str(&best.text);
    body.push_str("\n\n");
    for (_, text) in batch {
        body.push_str("Example target caption: ");
        body.push_str(&text.text);
        body.push('\n');
    }
    body.push_str(
        "\nRewrite the current prompt so the captions it produces resemble the target \
         captions in content and style. Reply with the new prompt only.",
    );
    json!([{"role": "user", "content": body}])
}

pub(crate) fn summarize_messages(candidates: &[Prompt]) -> Value {
    let mut body = String::from(
        "Merge the candidate prompts below into a single prompt that keeps every distinct \
         instruction. Reply with the merged prompt only.\n",
    );
    for (i, c) in candidates.iter().enumerate() {
        body.push_str(&format!("\nCandidate {}: {}", i + 1, c.text));
    }
    json!([{"role": "user", "content": body}])
}

fn unquote(s: &str) -> String {
    let s = s.trim();
    s.strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .unwrap_or(s)
        .trim()
        .to_string()
}

impl LlmBackend for HttpChatBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn caption(&self, video: &VideoRecord, prompt: &Prompt, k: usize) -> Result<CaptionReply> {
        let messages = caption_messages(video, prompt, k)?;
        Ok(match self.chat(messages)? {
            ChatOutcome::Refused(r) => CaptionReply::Refused(r),
            ChatOutcome::Content(c) => CaptionReply::Captions(parse_caption_list(&c)),
        })
    }

    fn rewrite(&self, best: &Prompt, batch: &[(&VideoRecord, &TextRecord)]) -> Result<String> {
        Ok(unquote(&self.text_reply(rewrite_messages(best, batch))?))
    }

    fn summarize(&self, candidates: &[Prompt]) -> Result<String> {
        Ok(unquote(&self.text_reply(summarize_messages(candidates))?))
    }
}
