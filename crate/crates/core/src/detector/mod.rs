//! Detectors turn text into a raw real-valued score. Built-in metric detectors
//! read token statistics from a [`TokenScorer`]; everything else attaches over
//! the external line protocol.

mod builtin;
pub mod external;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::parallel::bounded_map;
use crate::schema::Record;
use crate::scoring::{ScoreError, TokenScorer};

pub use builtin::{gltr_buckets, metric_statistic, BuiltinDetector, MetricStat, GLTR_TOP};
pub use external::{
    parse_handshake, parse_score_reply, parse_tokens_reply, request_line, ExternalHttpDetector,
    ExternalProcessDetector, ExternalScorer, Handshake, DEFAULT_EXTERNAL_TIMEOUT_MS,
};

/// Config keys external perturbation-style detectors should use for their knobs.
pub const RESERVED_CONFIG_KEYS: &[&str] = &["perturbation_count", "perturbation_strength"];

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("unknown detector {0:?}")]
    Unknown(String),
    #[error("detector {0:?} is already registered")]
    Duplicate(String),
    #[error("detector {name:?} config: {message}")]
    Config { name: String, message: String },
    #[error("detector {0:?} needs a token scorer")]
    MissingScorer(String),
    #[error("record has empty text")]
    EmptyText,
    #[error(transparent)]
    Scoring(#[from] ScoreError),
    #[error("detector returned a non-finite score")]
    NonFinite,
    #[error("detector timed out after {0} ms")]
    Timeout(u64),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("detector reported an error: {0}")]
    Remote(String),
    #[error("detector process: {0}")]
    Process(String),
    #[error("detector transport: {0}")]
    Transport(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    BuiltinMetric,
    ExternalProcess,
    ExternalHttp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    HigherIsMachine,
    LowerIsMachine,
}

impl Sign {
    /// Oriented score: larger always means "more machine-like".
    pub fn effective(self, raw: f64) -> f64 {
        match self {
            Sign::HigherIsMachine => raw,
            Sign::LowerIsMachine => -raw,
        }
    }

    pub fn flipped(self) -> Sign {
        match self {
            Sign::HigherIsMachine => Sign::LowerIsMachine,
            Sign::LowerIsMachine => Sign::HigherIsMachine,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sign::HigherIsMachine => "higher_is_machine",
            Sign::LowerIsMachine => "lower_is_machine",
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sign {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "higher_is_machine" => Ok(Sign::HigherIsMachine),
            "lower_is_machine" => Ok(Sign::LowerIsMachine),
            other => Err(format!("unknown sign {other:?} (expected higher_is_machine or lower_is_machine)")),
        }
    }
}

/// What a detector's raw score means. Probability and logit outputs skip fitting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    #[default]
    Raw,
    Probability,
    Logit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorHandle {
    pub name: String,
    pub kind: DetectorKind,
    pub sign: Sign,
    #[serde(default)]
    pub config: BTreeMap<String, Value>,
}

impl DetectorHandle {
    pub fn builtin(stat: MetricStat) -> Self {
        DetectorHandle {
            name: stat.name().to_string(),
            kind: DetectorKind::BuiltinMetric,
            sign: stat.default_sign(),
            config: BTreeMap::new(),
        }
    }

    /// `command[0]` is the program, the rest are its arguments.
    pub fn external_process(name: &str, command: &[String], sign: Sign) -> Self {
        let mut config = BTreeMap::new();
        config.insert("command".to_string(), Value::from(command.to_vec()));
        DetectorHandle { name: name.to_string(), kind: DetectorKind::ExternalProcess, sign, config }
    }

    pub fn external_http(name: &str, url: &str, sign: Sign) -> Self {
        let mut config = BTreeMap::new();
        config.insert("url".to_string(), Value::from(url));
        DetectorHandle { name: name.to_string(), kind: DetectorKind::ExternalHttp, sign, config }
    }

    pub fn with_config(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.config.insert(key.to_string(), value.into());
        self
    }

    pub fn with_sign(mut self, sign: Sign) -> Self {
        self.sign = sign;
        self
    }

    pub fn scale(&self) -> ScoreScale {
        self.config
            .get("output")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default()
    }

    pub fn timeout_ms(&self) -> u64 {
        self.config.get("timeout_ms").and_then(Value::as_u64).unwrap_or(DEFAULT_EXTERNAL_TIMEOUT_MS)
    }

    fn config_err(&self, message: impl Into<String>) -> DetectorError {
        DetectorError::Config { name: self.name.clone(), message: message.into() }
    }
}

/// Detector output before latency is attached.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreOutput {
    pub score: f64,
    pub flags: Vec<String>,
    pub metadata: BTreeMap<String, Value>,
    pub gpu_peak_gib: Option<f64>,
}

impl ScoreOutput {
    pub fn new(score: f64) -> Self {
        ScoreOutput { score, ..Default::default() }
    }
}

pub trait Detector: Send + Sync {
    fn handle(&self) -> &DetectorHandle;

    fn score_text(&self, id: &str, text: &str) -> Result<ScoreOutput, DetectorError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawScore {
    pub record_id: String,
    pub score: f64,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_peak_gib: Option<f64>,
}

/// Scores one record. Latency covers only the detector call.
pub fn score(detector: &dyn Detector, record: &Record) -> Result<RawScore, DetectorError> {
    if record.text.is_empty() {
        return Err(DetectorError::EmptyText);
    }
    let start = Instant::now();
    let out = detector.score_text(&record.id, &record.text)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    if !out.score.is_finite() {
        return Err(DetectorError::NonFinite);
    }
    Ok(RawScore {
        record_id: record.id.clone(),
        score: out.score,
        latency_ms,
        flags: out.flags,
        metadata: out.metadata,
        gpu_peak_gib: out.gpu_peak_gib,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyTrace {
    pub wall_seconds: f64,
    pub latencies_ms: Vec<f64>,
    /// Absent when nothing was scored.
    pub throughput_per_s: Option<f64>,
    pub gpu_peak_gib: Option<f64>,
}

impl EfficiencyTrace {
    pub fn mean_latency_ms(&self) -> Option<f64> {
        if self.latencies_ms.is_empty() {
            None
        } else {
            Some(self.latencies_ms.iter().sum::<f64>() / self.latencies_ms.len() as f64)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFailure {
    pub record_id: String,
    pub message: String,
}

#[derive(Debug)]
pub struct BatchScores {
    /// Aligned with the input records.
    pub results: Vec<Result<RawScore, ScoreFailure>>,
    pub trace: EfficiencyTrace,
}

impl BatchScores {
    pub fn failures(&self) -> impl Iterator<Item = &ScoreFailure> {
        self.results.iter().filter_map(|r| r.as_ref().err())
    }
}

pub fn batch_score(detector: &dyn Detector, records: &[Record], parallelism: usize) -> BatchScores {
    let start = Instant::now();
    let results: Vec<Result<RawScore, ScoreFailure>> = bounded_map(records, parallelism.max(1), |_, r| {
        score(detector, r).map_err(|e| ScoreFailure { record_id: r.id.clone(), message: e.to_string() })
    });
    let wall_seconds = start.elapsed().as_secs_f64();
    let ok: Vec<&RawScore> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let latencies_ms: Vec<f64> = ok.iter().map(|s| s.latency_ms).collect();
    let gpu_peak_gib = ok.iter().filter_map(|s| s.gpu_peak_gib).reduce(f64::max);
    let throughput_per_s = if records.is_empty() || wall_seconds <= 0.0 {
        None
    } else {
        Some(records.len() as f64 / wall_seconds)
    };
    BatchScores { results, trace: EfficiencyTrace { wall_seconds, latencies_ms, throughput_per_s, gpu_peak_gib } }
}

/// Name → handle table. Registration is exclusive; duplicates are rejected.
#[derive(Clone, Debug, Default)]
pub struct DetectorRegistry {
    handles: BTreeMap<String, DetectorHandle>,
}

impl DetectorRegistry {
    pub fn empty() -> Self {
        DetectorRegistry::default()
    }

    /// The six built-in metric detectors.
    pub fn with_builtins() -> Self {
        let mut reg = DetectorRegistry::empty();
        for stat in MetricStat::ALL {
            reg.register(DetectorHandle::builtin(stat)).expect("built-in names are distinct");
        }
        reg
    }

    pub fn register(&mut self, handle: DetectorHandle) -> Result<(), DetectorError> {
        if self.handles.contains_key(&handle.name) {
            return Err(DetectorError::Duplicate(handle.name));
        }
        self.handles.insert(handle.name.clone(), handle);
        Ok(())
    }

    pub fn list(&self) -> Vec<&DetectorHandle> {
        self.handles.values().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.handles.keys().cloned().collect()
    }

    pub fn resolve(&self, name: &str) -> Result<&DetectorHandle, DetectorError> {
        self.handles.get(name).ok_or_else(|| DetectorError::Unknown(name.to_string()))
    }
}

/// Builds a runnable detector from a handle. Built-ins need `scorer`.
pub fn instantiate(
    handle: &DetectorHandle,
    scorer: Option<Arc<dyn TokenScorer>>,
) -> Result<Arc<dyn Detector>, DetectorError> {
    match handle.kind {
        DetectorKind::BuiltinMetric => {
            let stat: MetricStat = handle
                .config
                .get("statistic")
                .and_then(Value::as_str)
                .unwrap_or(&handle.name)
                .parse()
                .map_err(|e: String| handle.config_err(e))?;
            let scorer = scorer.ok_or_else(|| DetectorError::MissingScorer(handle.name.clone()))?;
            Ok(Arc::new(BuiltinDetector::new(handle.clone(), stat, scorer)))
        }
        DetectorKind::ExternalProcess => {
            let command = handle
                .config
                .get("command")
                .and_then(|v| serde_json::from_value::<Vec<String>>(v.clone()).ok())
                .filter(|c| !c.is_empty())
                .ok_or_else(|| handle.config_err("external_process needs a non-empty \"command\" array"))?;
            Ok(Arc::new(ExternalProcessDetector::connect(handle.clone(), command)?))
        }
        DetectorKind::ExternalHttp => {
            let url = handle
                .config
                .get("url")
                .and_then(Value::as_str)
                .ok_or_else(|| handle.config_err("external_http needs a \"url\""))?
                .to_string();
            Ok(Arc::new(ExternalHttpDetector::new(handle.clone(), &url)?))
        }
    }
}
