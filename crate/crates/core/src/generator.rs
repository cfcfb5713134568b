//! Text generators used for dataset building and model-backed attacks.
//!
//! `http_chat` speaks the chat-completions request/response shape; `stub` is a seeded,
//! offline word shuffle so every pipeline stage runs without network access.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::FieldError;
use crate::fingerprint::{derive_seed, fingerprint_of};
use crate::parallel::bounded_map;

pub const DEFAULT_TOKEN_ENV: &str = "FORGEVAL_API_TOKEN";
pub const DEFAULT_PROMPT_TEMPLATE: &str = "Write a passage that covers the same content as the following text.\n\n{text}";
pub const STUB_SUFFIX: &str = "Overall, this captures the main idea.";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("endpoint returned HTTP {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, body: String, attempts: u32 },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("malformed completion response: {0}")]
    Malformed(String),
    #[error("generator returned an empty completion")]
    EmptyCompletion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Stub,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub backend: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    pub model: String,
    #[serde(default = "default_template")]
    pub prompt_template: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub top_k: Option<u32>,
    #[serde(default)]
    pub top_p: Option<f64>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Whether the endpoint accepts a `top_k` field; when false `top_k` is not sent.
    #[serde(default)]
    pub send_top_k: bool,
    #[serde(default = "default_token_env")]
    pub api_key_env: String,
}

fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}
fn default_temperature() -> f64 {
    0.7
}
fn default_max_tokens() -> u32 {
    512
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_token_env() -> String {
    DEFAULT_TOKEN_ENV.to_string()
}

impl GenerationConfig {
    pub fn stub(model: &str, seed: u64) -> Self {
        GenerationConfig {
            backend: BackendKind::Stub,
            base_url: None,
            model: model.to_string(),
            prompt_template: default_template(),
            temperature: default_temperature(),
            top_k: None,
            top_p: None,
            max_tokens: default_max_tokens(),
            seed,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
            send_top_k: false,
            api_key_env: default_token_env(),
        }
    }

    pub fn http_chat(base_url: &str, model: &str) -> Self {
        GenerationConfig {
            backend: BackendKind::HttpChat,
            base_url: Some(base_url.to_string()),
            ..GenerationConfig::stub(model, 0)
        }
    }

    /// Field-level problems, empty when the config is usable.
    pub fn issues(&self, prefix: &str) -> Vec<FieldError> {
        let mut out = Vec::new();
        let mut bad = |field: &str, message: String| out.push(FieldError::new(format!("{prefix}{field}"), message));
        let placeholders = self.prompt_template.matches("{text}").count();
        if placeholders != 1 {
            bad("prompt_template", format!("must contain {{text}} exactly once (found {placeholders})"));
        }
        if self.model.trim().is_empty() {
            bad("model", "must not be empty".into());
        }
        if self.backend == BackendKind::HttpChat {
            match &self.base_url {
                None => bad("base_url", "required for the http_chat backend".into()),
                Some(u) if !(u.starts_with("http://") || u.starts_with("https://")) => {
                    bad("base_url", format!("{u:?} is not an http(s) URL"))
                }
                _ => {}
            }
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            bad("temperature", "must be a finite number >= 0".into());
        }
        if self.top_k == Some(0) {
            bad("top_k", "must be positive".into());
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                bad("top_p", "must lie in (0, 1]".into());
            }
        }
        if self.max_tokens == 0 {
            bad("max_tokens", "must be positive".into());
        }
        if self.timeout_ms == 0 {
            bad("timeout_ms", "must be positive".into());
        }
        if self.max_retries > 10 {
            bad("max_retries", "must be at most 10".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let issues = self.issues("");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(GenerationError::InvalidConfig(
                issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            ))
        }
    }

    /// Hash over the fields that influence generated text. Transport settings
    /// (timeouts, retries, credentials) are excluded.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Relevant<'a> {
            backend: BackendKind,
            base_url: &'a Option<String>,
            model: &'a str,
            prompt_template: &'a str,
            temperature: f64,
            top_k: Option<u32>,
            top_p: Option<f64>,
            max_tokens: u32,
            seed: u64,
        }
        fingerprint_of(&Relevant {
            backend: self.backend,
            base_url: &self.base_url,
            model: &self.model,
            prompt_template: &self.prompt_template,
            temperature: self.temperature,
            top_k: self.top_k,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
            seed: self.seed,
        })
    }

    pub fn render_prompt(&self, text: &str) -> String {
        self.prompt_template.replacen("{text}", text, 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub model: String,
    pub config_fingerprint: String,
    pub latency_ms: f64,
    pub attempts: u32,
}

/// A configured generator. Shareable across threads.
pub struct Generator {
    config: GenerationConfig,
    fingerprint: String,
    client: Option<reqwest::blocking::Client>,
}

impl Generator {
    pub fn new(config: GenerationConfig) -> Result<Self, GenerationError> {
        config.validate()?;
        let client = match config.backend {
            BackendKind::Stub => None,
            BackendKind::HttpChat => Some(
                reqwest::blocking::Client::builder()
                    .timeout(Duration::from_millis(config.timeout_ms))
                    .build()
                    .map_err(|e| GenerationError::InvalidConfig(e.to_string()))?,
            ),
        };
        Ok(Generator { fingerprint: config.fingerprint(), config, client })
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.config
    }

    pub fn generate(&self, input: &str) -> Result<GenerationResult, GenerationError> {
        let start = Instant::now();
        let (text, attempts) = match &self.client {
            None => (self.stub_output(input), 1),
            Some(client) => self.chat(client, &self.config.render_prompt(input))?,
        };
        if text.trim().is_empty() {
            return Err(GenerationError::EmptyCompletion);
        }
        Ok(GenerationResult {
            text,
            model: self.config.model.clone(),
            config_fingerprint: self.fingerprint.clone(),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
            attempts,
        })
    }

    fn stub_output(&self, input: &str) -> String {
        let mut rng = ChaCha8Rng::from_seed(derive_seed(self.config.seed, &format!("{}\u{0}{input}", self.fingerprint)));
        let mut words: Vec<&str> = input.split_whitespace().collect();
        words.shuffle(&mut rng);
        if words.is_empty() {
            STUB_SUFFIX.to_string()
        } else {
            format!("{} {STUB_SUFFIX}", words.join(" "))
        }
    }

    fn request_body(&self, prompt: &str) -> Value {
        let c = &self.config;
        let mut body = json!({
            "model": c.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": c.temperature,
            "max_tokens": c.max_tokens,
            "seed": c.seed,
        });
        if let Some(p) = c.top_p {
            body["top_p"] = json!(p);
        }
        if let (Some(k), true) = (c.top_k, c.send_top_k) {
            body["top_k"] = json!(k);
        }
        body
    }

    fn chat(&self, client: &reqwest::blocking::Client, prompt: &str) -> Result<(String, u32), GenerationError> {
        let base = self.config.base_url.as_deref().unwrap_or_default().trim_end_matches('/');
        let url = format!("{base}/chat/completions");
        let body = self.request_body(prompt);
        let token = std::env::var(&self.config.api_key_env).ok();

        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut req = client.post(&url).json(&body);
            if let Some(t) = &token {
                req = req.bearer_auth(t);
            }
            let failure = match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let value: Value = resp.json().map_err(|e| GenerationError::Malformed(e.to_string()))?;
                    let content = value
                        .pointer("/choices/0/message/content")
                        .and_then(Value::as_str)
                        .ok_or_else(|| GenerationError::Malformed("missing choices[0].message.content".into()))?;
                    return Ok((content.to_string(), attempt));
                }
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let body = resp.text().unwrap_or_default();
                    GenerationError::Status { status, body: truncate(&body, 200), attempts: attempt }
                }
                Err(e) if e.is_timeout() => GenerationError::Timeout { attempts: attempt },
                Err(e) => GenerationError::Transport { message: e.to_string(), attempts: attempt },
            };
            if attempt > self.config.max_retries {
                return Err(failure);
            }
            log::debug!("generation attempt {attempt} against {url} failed: {failure}");
            std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1).min(16)));
        }
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

pub fn generate(config: &GenerationConfig, input: &str) -> Result<GenerationResult, GenerationError> {
    Generator::new(config.clone())?.generate(input)
}

/// Generates for every input with at most `parallelism` requests in flight.
/// Failures are reported per item.
pub fn batch_generate(
    generator: &Generator,
    inputs: &[String],
    parallelism: usize,
) -> Vec<Result<GenerationResult, GenerationError>> {
    bounded_map(inputs, parallelism, |_, input| generator.generate(input))
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stub_is_deterministic() {
        let g = Generator::new(GenerationConfig::stub("stub-a", 1)).unwrap();
        let a = g.generate("the quick brown fox").unwrap();
        let b = Generator::new(GenerationConfig::stub("stub-a", 1)).unwrap().generate("the quick brown fox").unwrap();
        assert_eq!(a.text, b.text);
        let mut words: Vec<&str> = a.text.strip_suffix(STUB_SUFFIX).unwrap().split_whitespace().collect();
        words.sort();
        assert_eq!(words, vec!["brown", "fox", "quick", "the"]);
    }

    #[test]
    fn stub_single_word() {
        let out = generate(&GenerationConfig::stub("s", 9), "hi").unwrap();
        assert!(out.text.contains("hi"));
        assert_eq!(out.text, format!("hi {STUB_SUFFIX}"));
    }

    #[test]
    fn config_validation() {
        let mut c = GenerationConfig::stub("m", 0);
        c.prompt_template = "no placeholder".into();
        assert!(c.validate().is_err());
        c.prompt_template = "{text} and {text}".into();
        assert!(c.validate().is_err());
        let mut h = GenerationConfig::http_chat("http://x", "m");
        assert!(h.validate().is_ok());
        h.base_url = None;
        let issues = h.issues("gen.");
        assert_eq!(issues[0].field, "gen.base_url");
        let mut p = GenerationConfig::stub("m", 0);
        p.top_p = Some(0.0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_generation_fields_only() {
        let base = GenerationConfig::stub("m", 0);
        let mut t = base.clone();
        t.timeout_ms = 5;
        t.max_retries = 0;
        t.api_key_env = "OTHER".into();
        assert_eq!(base.fingerprint(), t.fingerprint());
        let variants: Vec<GenerationConfig> = vec![
            GenerationConfig { temperature: 0.1, ..base.clone() },
            GenerationConfig { top_k: Some(5), ..base.clone() },
            GenerationConfig { top_p: Some(0.9), ..base.clone() },
            GenerationConfig { max_tokens: 7, ..base.clone() },
            GenerationConfig { seed: 3, ..base.clone() },
            GenerationConfig { model: "n".into(), ..base.clone() },
            GenerationConfig { prompt_template: "x {text}".into(), ..base.clone() },
        ];
        for v in variants {
            assert_ne!(base.fingerprint(), v.fingerprint(), "{v:?}");
        }
    }

    #[test]
    fn http_chat_against_mock() {
        let server = mock::serve(|_| (200, mock::completion("canned completion")));
        let mut cfg = GenerationConfig::http_chat(&server.base_url, "gpt-test");
        cfg.top_p = Some(0.9);
        cfg.top_k = Some(40);
        cfg.prompt_template = "Rewrite: {text}".into();
        let out = generate(&cfg, "hello").unwrap();
        assert_eq!(out.text, "canned completion");
        assert!(out.latency_ms > 0.0);
        let reqs = server.requests.lock().unwrap();
        let body: Value = serde_json::from_str(&reqs[0].1).unwrap();
        assert_eq!(body["model"], "gpt-test");
        assert_eq!(body["messages"][0]["content"], "Rewrite: hello");
        assert_eq!(body["top_p"], 0.9);
        assert!(body.get("top_k").is_none(), "top_k is only sent when the endpoint accepts it");
    }

    #[test]
    fn empty_completion_is_an_error() {
        let server = mock::serve(|_| (200, mock::completion("  ")));
        let cfg = GenerationConfig::http_chat(&server.base_url, "m");
        assert!(matches!(generate(&cfg, "x"), Err(GenerationError::EmptyCompletion)));
    }

    #[test]
    fn retries_then_reports_status() {
        let server = mock::serve(|_| (503, "{\"error\":\"busy\"}".into()));
        let mut cfg = GenerationConfig::http_chat(&server.base_url, "m");
        cfg.max_retries = 2;
        cfg.backoff_ms = 1;
        match generate(&cfg, "x") {
            Err(GenerationError::Status { status: 503, attempts: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(server.requests.lock().unwrap().len(), 3);
    }

    #[test]
    fn batch_alignment_and_item_failures() {
        let g = Generator::new(GenerationConfig::stub("s", 2)).unwrap();
        assert!(batch_generate(&g, &[], 4).is_empty());
        let inputs: Vec<String> = (0..10).map(|i| format!("word{i} other{i}")).collect();
        let out = batch_generate(&g, &inputs, 4);
        for (i, r) in out.iter().enumerate() {
            assert!(r.as_ref().unwrap().text.contains(&format!("word{i}")));
        }

        let server = mock::serve(|body| {
            if body.contains("item-3") {
                (500, "{}".into())
            } else {
                let v: Value = serde_json::from_str(body).unwrap();
                (200, mock::completion(&format!("echo {}", v["messages"][0]["content"].as_str().unwrap())))
            }
        });
        let mut cfg = GenerationConfig::http_chat(&server.base_url, "m");
        cfg.prompt_template = "{text}".into();
        cfg.max_retries = 0;
        let g = Generator::new(cfg).unwrap();
        let inputs: Vec<String> = (1..=5).map(|i| format!("item-{i}")).collect();
        let out = batch_generate(&g, &inputs, 3);
        assert_eq!(out.iter().filter(|r| r.is_ok()).count(), 4);
        assert!(out[2].is_err());
        assert_eq!(out[4].as_ref().unwrap().text, "echo item-5");
    }

    proptest! {
        #[test]
        fn stub_output_is_a_permutation(words in proptest::collection::vec("[a-z]{1,6}", 1..12), seed in any::<u64>()) {
            let input = words.join(" ");
            let out = generate(&GenerationConfig::stub("p", seed), &input).unwrap();
            let body = out.text.strip_suffix(STUB_SUFFIX).unwrap().trim_end();
            let mut got: Vec<&str> = body.split(' ').collect();
            let mut want: Vec<&str> = words.iter().map(String::as_str).collect();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
        }
    }
}
