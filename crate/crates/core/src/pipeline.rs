//! Stage runners shared by the CLI and the service: typed configs, output
//! layout, and the build/attack/calibrate/evaluate/detect entry points.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::attack::{attack_dataset, AttackError, AttackMode, AttackProvenance, AttackSpec};
use crate::builder::{build, join_issues, BuildError, BuildSpec};
use crate::calibration::{
    CalibrationError, CalibrationModel, FitOptions, FitTrace, ThresholdPolicy, DEFAULT_L2_LAMBDA, DEFAULT_MAX_ITER,
};
use crate::config::{ConfigError, FieldError};
use crate::detector::{
    batch_score, instantiate, BatchScores, Detector, DetectorError, DetectorHandle, DetectorKind, DetectorRegistry,
    ExternalScorer, RawScore, ScoreScale, DEFAULT_EXTERNAL_TIMEOUT_MS,
};
use crate::fingerprint::{fingerprint_of, sha256_hex};
use crate::metrics::{efficiency, MetricsError, Prediction, SliceKey, DEFAULT_FPR_LEVELS};
use crate::progress::Observer;
use crate::reporting::{build_reports, write_run, PredictionLine, ReportError, ReportInputs, RunReport};
use crate::schema::{
    load_dataset, normalize, records_to_jsonl, write_atomic, DatasetManifest, FormatHint, Label, ManifestStatus,
    Record, SchemaError, SCHEMA_VERSION,
};
use crate::scoring::{NGramLM, ScoreError, TokenScorer, DEFAULT_ALPHA, DEFAULT_ORDER};

pub const ATTACKED_FILE: &str = "attacked.jsonl";
pub const PROVENANCE_FILE: &str = "provenance.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Name of the calibration artifact inside a service run directory.
pub const CALIBRATION_FILE: &str = "model.cal";
pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {}", join_issues(.0))]
    Config(Vec<FieldError>),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Scoring(#[from] ScoreError),
    #[error("{0}")]
    Data(String),
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Invalid(issues) => PipelineError::Config(issues),
            ConfigError::Io { .. } => PipelineError::Usage(e.to_string()),
        }
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        PipelineError::Report(ReportError::Metrics(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Usage,
    Data,
    Backend,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Backend => 3,
        }
    }
}

fn detector_class(e: &DetectorError) -> ErrorClass {
    match e {
        DetectorError::Unknown(_) | DetectorError::Duplicate(_) | DetectorError::Config { .. } => ErrorClass::Usage,
        DetectorError::MissingScorer(_) => ErrorClass::Usage,
        DetectorError::EmptyText | DetectorError::NonFinite => ErrorClass::Data,
        DetectorError::Scoring(ScoreError::External(_)) => ErrorClass::Backend,
        DetectorError::Scoring(_) => ErrorClass::Data,
        DetectorError::Timeout(_)
        | DetectorError::Protocol(_)
        | DetectorError::Remote(_)
        | DetectorError::Process(_)
        | DetectorError::Transport(_) => ErrorClass::Backend,
    }
}

impl PipelineError {
    pub fn class(&self) -> ErrorClass {
        match self {
            PipelineError::Config(_) | PipelineError::Usage(_) => ErrorClass::Usage,
            PipelineError::Build(BuildError::InvalidSpec(_)) => ErrorClass::Usage,
            PipelineError::Build(BuildError::Generator(_) | BuildError::TooManyFailures { .. }) => ErrorClass::Backend,
            PipelineError::Attack(AttackError::InvalidSpec { .. }) => ErrorClass::Usage,
            PipelineError::Attack(AttackError::Backend { .. }) => ErrorClass::Backend,
            PipelineError::Detector(e) => detector_class(e),
            PipelineError::Scoring(ScoreError::External(_)) => ErrorClass::Backend,
            _ => ErrorClass::Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }

    /// Field-level problems, when the error is a config error.
    pub fn field_errors(&self) -> &[FieldError] {
        match self {
            PipelineError::Config(v) | PipelineError::Build(BuildError::InvalidSpec(v)) => v,
            _ => &[],
        }
    }
}

fn default_parallelism() -> usize {
    DEFAULT_PARALLELISM
}
fn default_l2() -> f64 {
    DEFAULT_L2_LAMBDA
}
fn default_order() -> usize {
    DEFAULT_ORDER
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_slices() -> Vec<SliceKey> {
    SliceKey::ALL.to_vec()
}
fn default_fpr_levels() -> Vec<f64> {
    DEFAULT_FPR_LEVELS.to_vec()
}

/// Where a built-in detector gets its token statistics from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerSpec {
    /// A saved n-gram LM artifact.
    Lm { path: PathBuf },
    Process {
        command: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_ms: Option<u64>,
    },
    Http {
        url: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_ms: Option<u64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Dataset file, or a build directory (its test.jsonl is used).
    pub input: PathBuf,
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub mode: AttackMode,
    /// Overrides the seed of every attack spec.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    pub detector: String,
    /// Extra detector handles registered next to the built-ins.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub detectors: Vec<DetectorHandle>,
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    #[serde(default)]
    pub policy: ThresholdPolicy,
    #[serde(default = "default_l2")]
    pub l2_lambda: f64,
    /// Calibrate on a seeded subsample of this many training records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_k: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// When absent, built-in detectors use an n-gram LM trained on the
    /// machine texts of the training file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerSpec>,
    #[serde(default = "default_order")]
    pub lm_order: usize,
    #[serde(default = "default_alpha")]
    pub lm_alpha: f64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub detector: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub detectors: Vec<DetectorHandle>,
    pub model: PathBuf,
    /// Calibration used for the attacked file; must be the clean one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacked_model: Option<PathBuf>,
    pub test: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacked: Option<PathBuf>,
    /// Defaults to the scorer sidecar written next to the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerSpec>,
    #[serde(default = "default_slices")]
    pub slices: Vec<SliceKey>,
    #[serde(default = "default_fpr_levels")]
    pub fpr_levels: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainLmConfig {
    pub corpus: PathBuf,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Keep only records with this label (0 or 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn check_parallelism(p: usize, out: &mut Vec<FieldError>) {
    if p == 0 {
        out.push(FieldError::new("parallelism", "must be at least 1"));
    }
}

impl AttackConfig {
    pub fn issues(&self) -> Vec<FieldError> {
        let mut out = Vec::new();
        if self.attacks.is_empty() {
            out.push(FieldError::new("attacks", "at least one attack is required"));
        }
        for (i, a) in self.attacks.iter().enumerate() {
            if !(0.0..=1.0).contains(&a.rate) {
                out.push(FieldError::new(format!("attacks[{i}].rate"), "must be in [0, 1]"));
            }
        }
        check_parallelism(self.parallelism, &mut out);
        out
    }

    /// Specs with the seed override applied.
    pub fn effective_specs(&self) -> Vec<AttackSpec> {
        let mut specs = self.attacks.clone();
        if let Some(seed) = self.seed {
            specs.iter_mut().for_each(|s| s.seed = seed);
        }
        specs
    }

    pub fn input_file(&self) -> PathBuf {
        if self.input.is_dir() {
            self.input.join("test.jsonl")
        } else {
            self.input.clone()
        }
    }
}

fn check_scorer(scorer: &Option<ScorerSpec>, out: &mut Vec<FieldError>) {
    match scorer {
        Some(ScorerSpec::Process { command, .. }) if command.is_empty() => {
            out.push(FieldError::new("scorer.command", "must not be empty"))
        }
        Some(ScorerSpec::Http { url, .. }) if url.is_empty() => out.push(FieldError::new("scorer.url", "must not be empty")),
        _ => {}
    }
}

impl CalibrateConfig {
    pub fn issues(&self) -> Vec<FieldError> {
        let mut out = Vec::new();
        if self.detector.is_empty() {
            out.push(FieldError::new("detector", "must not be empty"));
        }
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            out.push(FieldError::new("l2_lambda", "must be finite and >= 0"));
        }
        if self.policy == ThresholdPolicy::MaxF1Val && self.val.is_none() {
            out.push(FieldError::new("val", "max_f1_val needs a validation file"));
        }
        if self.sample_k == Some(0) {
            out.push(FieldError::new("sample_k", "must be at least 1"));
        }
        if self.lm_order == 0 {
            out.push(FieldError::new("lm_order", "must be at least 1"));
        }
        if !(self.lm_alpha.is_finite() && self.lm_alpha > 0.0) {
            out.push(FieldError::new("lm_alpha", "must be > 0"));
        }
        check_scorer(&self.scorer, &mut out);
        check_parallelism(self.parallelism, &mut out);
        out
    }
}

impl EvaluateConfig {
    pub fn issues(&self) -> Vec<FieldError> {
        let mut out = Vec::new();
        if self.detector.is_empty() {
            out.push(FieldError::new("detector", "must not be empty"));
        }
        if self.attacked_model.is_some() && self.attacked.is_none() {
            out.push(FieldError::new("attacked_model", "only meaningful together with attacked"));
        }
        for (i, a) in self.fpr_levels.iter().enumerate() {
            if !(*a > 0.0 && *a < 1.0) {
                out.push(FieldError::new(format!("fpr_levels[{i}]"), "must be in (0, 1)"));
            }
        }
        check_scorer(&self.scorer, &mut out);
        check_parallelism(self.parallelism, &mut out);
        out
    }
}

impl TrainLmConfig {
    pub fn issues(&self) -> Vec<FieldError> {
        let mut out = Vec::new();
        if self.order == 0 {
            out.push(FieldError::new("order", "must be at least 1"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            out.push(FieldError::new("alpha", "must be > 0"));
        }
        out
    }
}

fn ensure_valid(issues: Vec<FieldError>) -> Result<(), PipelineError> {
    if issues.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::Config(issues))
    }
}

/// Config as recorded in manifests: output location removed.
fn snapshot<T: Serialize>(cfg: &T) -> BTreeMap<String, Value> {
    match serde_json::to_value(cfg).expect("config serializes") {
        Value::Object(m) => m.into_iter().filter(|(k, _)| k != "out").collect(),
        _ => BTreeMap::new(),
    }
}

fn file_sha(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|source| SchemaError::Io { path: path.display().to_string(), source })?;
    Ok(sha256_hex(&bytes))
}

/// Loads and normalizes a dataset file; warnings come back as strings.
pub fn read_records(path: &Path) -> Result<(Vec<Record>, Vec<String>), PipelineError> {
    let loaded = load_dataset(path, FormatHint::Auto)?;
    let mut warnings: Vec<String> = loaded.warnings.iter().map(ToString::to_string).collect();
    let norm = normalize(loaded.records);
    if norm.dropped_records > 0 {
        warnings.push(format!("{}: {} records with empty text dropped", path.display(), norm.dropped_records));
    }
    if norm.records.is_empty() {
        return Err(PipelineError::Data(format!("{} contains no usable records", path.display())));
    }
    Ok((norm.records, warnings))
}

fn create_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|source| SchemaError::Write { path: dir.display().to_string(), source }.into())
}

/// Runs `work` with a started manifest already on disk; on failure the
/// manifest is rewritten with status failed and the error message.
fn with_manifest<T>(
    path: &Path,
    mut manifest: DatasetManifest,
    work: impl FnOnce(&mut DatasetManifest) -> Result<T, PipelineError>,
) -> Result<(T, DatasetManifest), PipelineError> {
    manifest.write(path)?;
    match work(&mut manifest) {
        Ok(v) => {
            manifest.status = ManifestStatus::Complete;
            manifest.write(path)?;
            Ok((v, manifest))
        }
        Err(e) => {
            manifest.status = ManifestStatus::Failed;
            manifest.error = Some(e.to_string());
            manifest.write(path)?;
            Err(e)
        }
    }
}

// ---------------------------------------------------------------- build

pub fn run_build(spec: &BuildSpec, out_dir: &Path, observer: &dyn Observer) -> Result<Value, PipelineError> {
    ensure_valid(spec.issues())?;
    create_dir(out_dir)?;
    let out = build(spec, Some(out_dir), observer)?;
    let machine = out.records.iter().filter(|r| r.label.is_machine()).count();
    Ok(json!({
        "stage": "build",
        "out": out_dir,
        "records": out.records.len(),
        "human": out.records.len() - machine,
        "machine": machine,
        "train": out.train.len(),
        "val": out.val.len(),
        "test": out.test.len(),
        "skipped_generations": out.failures.len(),
        "seed": spec.seed,
    }))
}

// ---------------------------------------------------------------- attack

pub fn run_attack(cfg: &AttackConfig, out_dir: &Path, observer: &dyn Observer) -> Result<Value, PipelineError> {
    ensure_valid(cfg.issues())?;
    create_dir(out_dir)?;
    let input = cfg.input_file();
    let specs = cfg.effective_specs();
    let mut manifest = DatasetManifest::new("attack", cfg.seed.or(specs.first().map(|s| s.seed)).unwrap_or(0));
    manifest.source_paths = vec![input.display().to_string()];
    manifest.config_snapshot = snapshot(cfg);
    let (summary, _) = with_manifest(&out_dir.join(MANIFEST_FILE), manifest, |m| {
        m.inputs.insert("input".into(), file_sha(&input)?);
        let (records, warnings) = read_records(&input)?;
        m.warnings.extend(warnings);
        observer.log(&format!("loaded {} records from {}", records.len(), input.display()));
        let outcome = attack_dataset(&specs, &records, cfg.mode, cfg.parallelism)?;
        for f in &outcome.failures {
            m.warnings.push(format!("{} on {}: {}", f.attack, f.base_id, f.message));
        }
        if outcome.skipped_attacked > 0 {
            m.warnings.push(format!("{} already-attacked records passed through", outcome.skipped_attacked));
        }
        let mut per_attack: BTreeMap<String, usize> = BTreeMap::new();
        for p in &outcome.provenance {
            *per_attack.entry(p.attack.clone()).or_default() += 1;
        }
        for (attack, n) in &per_attack {
            observer.log(&format!("{attack}: {n} variants"));
        }
        let body = records_to_jsonl(&outcome.records);
        let mut prov = String::new();
        for p in &outcome.provenance {
            prov.push_str(&serde_json::to_string(p).expect("provenance serializes"));
            prov.push('\n');
        }
        for (name, text) in [(ATTACKED_FILE, &body), (PROVENANCE_FILE, &prov)] {
            write_atomic(&out_dir.join(name), text.as_bytes())?;
            m.artifacts.push(name.to_string());
            m.fingerprints.insert(name.to_string(), sha256_hex(text.as_bytes()));
        }
        m.details.insert("variants".into(), json!(per_attack));
        m.details.insert("failures".into(), json!(outcome.failures.len()));
        observer.progress(1.0);
        Ok(json!({
            "stage": "attack",
            "out": out_dir,
            "records": outcome.records.len(),
            "variants": outcome.provenance.len(),
            "failures": outcome.failures.len(),
            "per_attack": per_attack,
        }))
    })?;
    Ok(summary)
}

// ---------------------------------------------------------------- detectors & scorers

pub fn registry_with(extra: &[DetectorHandle]) -> Result<DetectorRegistry, PipelineError> {
    let mut reg = DetectorRegistry::with_builtins();
    for h in extra {
        reg.register(h.clone())?;
    }
    Ok(reg)
}

/// A scorer ready for use, with a description and fingerprint for manifests.
pub struct ResolvedScorer {
    pub scorer: Arc<dyn TokenScorer>,
    pub description: String,
    pub fingerprint: String,
    /// Set when the scorer is an n-gram LM, so it can be copied next to a model.
    pub lm: Option<Arc<NGramLM>>,
}

impl ResolvedScorer {
    fn from_lm(lm: NGramLM) -> Self {
        let lm = Arc::new(lm);
        ResolvedScorer {
            description: lm.describe(),
            fingerprint: lm.fingerprint(),
            scorer: lm.clone(),
            lm: Some(lm),
        }
    }
}

pub fn resolve_scorer(spec: &ScorerSpec) -> Result<ResolvedScorer, PipelineError> {
    Ok(match spec {
        ScorerSpec::Lm { path } => ResolvedScorer::from_lm(NGramLM::load(path)?),
        ScorerSpec::Process { command, timeout_ms } => {
            let s = ExternalScorer::process(command.clone(), timeout_ms.unwrap_or(DEFAULT_EXTERNAL_TIMEOUT_MS))?;
            ResolvedScorer { description: s.describe(), fingerprint: fingerprint_of(spec), scorer: Arc::new(s), lm: None }
        }
        ScorerSpec::Http { url, timeout_ms } => {
            let s = ExternalScorer::http(url, timeout_ms.unwrap_or(DEFAULT_EXTERNAL_TIMEOUT_MS))?;
            ResolvedScorer { description: s.describe(), fingerprint: fingerprint_of(spec), scorer: Arc::new(s), lm: None }
        }
    })
}

fn sidecar(model: &Path, suffix: &str) -> PathBuf {
    let mut name = model.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    model.with_file_name(name)
}

/// `<model>.lm.json`: the n-gram LM a calibration was scored with.
pub fn lm_sidecar(model: &Path) -> PathBuf {
    sidecar(model, ".lm.json")
}

/// `<model>.scorer.json`: an external scorer spec a calibration was scored with.
pub fn scorer_sidecar(model: &Path) -> PathBuf {
    sidecar(model, ".scorer.json")
}

/// `<model>.manifest.json`.
pub fn model_manifest_path(model: &Path) -> PathBuf {
    sidecar(model, ".manifest.json")
}

/// Scorer for a detector that is used with an existing calibration model:
/// the explicit spec, else the sidecars written at calibration time.
fn scorer_for_model(
    handle: &DetectorHandle,
    explicit: Option<&ScorerSpec>,
    model_path: Option<&Path>,
) -> Result<Option<ResolvedScorer>, PipelineError> {
    if handle.kind != DetectorKind::BuiltinMetric {
        return Ok(None);
    }
    if let Some(spec) = explicit {
        return resolve_scorer(spec).map(Some);
    }
    if let Some(model) = model_path {
        let lm = lm_sidecar(model);
        if lm.is_file() {
            return resolve_scorer(&ScorerSpec::Lm { path: lm }).map(Some);
        }
        let sc = scorer_sidecar(model);
        if sc.is_file() {
            let spec: ScorerSpec = crate::config::load_file(&sc)?;
            return resolve_scorer(&spec).map(Some);
        }
    }
    Err(DetectorError::MissingScorer(handle.name.clone()).into())
}

fn score_all(
    detector: &dyn Detector,
    records: &[Record],
    parallelism: usize,
    what: &str,
    observer: &dyn Observer,
    warnings: &mut Vec<String>,
) -> Result<(BatchScores, Vec<(Record, RawScore)>), PipelineError> {
    let batch = batch_score(detector, records, parallelism);
    let mut ok = Vec::with_capacity(records.len());
    let mut first_err = None;
    for (r, res) in records.iter().zip(&batch.results) {
        match res {
            Ok(s) => ok.push((r.clone(), s.clone())),
            Err(f) => {
                warnings.push(format!("{what}: {}: {}", f.record_id, f.message));
                first_err.get_or_insert_with(|| f.message.clone());
            }
        }
    }
    observer.log(&format!("{what}: scored {} of {} records", ok.len(), records.len()));
    if ok.is_empty() && !records.is_empty() {
        let msg = first_err.unwrap_or_default();
        return Err(DetectorError::Remote(format!("every {what} record failed to score (first error: {msg})")).into());
    }
    Ok((batch, ok))
}

// ---------------------------------------------------------------- calibrate

pub fn run_calibrate(cfg: &CalibrateConfig, model_path: &Path, observer: &dyn Observer) -> Result<Value, PipelineError> {
    ensure_valid(cfg.issues())?;
    let registry = registry_with(&cfg.detectors)?;
    let handle = registry.resolve(&cfg.detector)?.clone();
    if let Some(dir) = model_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut manifest = DatasetManifest::new("calibrate", cfg.seed);
    manifest.source_paths = std::iter::once(&cfg.train).chain(&cfg.val).map(|p| p.display().to_string()).collect();
    manifest.config_snapshot = snapshot(cfg);
    let model_name = model_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let (summary, _) = with_manifest(&model_manifest_path(model_path), manifest, |m| {
        m.inputs.insert("train".into(), file_sha(&cfg.train)?);
        if let Some(v) = &cfg.val {
            m.inputs.insert("val".into(), file_sha(v)?);
        }
        let (train, w) = read_records(&cfg.train)?;
        m.warnings.extend(w);
        let val = match &cfg.val {
            Some(p) => {
                let (v, w) = read_records(p)?;
                m.warnings.extend(w);
                Some(v)
            }
            None => None,
        };
        let train = crate::calibration::subsample(&train, cfg.sample_k, cfg.seed);
        observer.log(&format!("calibrating {} on {} training records", handle.name, train.len()));

        let scorer = if handle.kind == DetectorKind::BuiltinMetric {
            Some(match &cfg.scorer {
                Some(spec) => resolve_scorer(spec)?,
                None => {
                    let texts: Vec<&str> =
                        train.iter().filter(|r| r.label.is_machine()).map(|r| r.text.as_str()).collect();
                    if texts.is_empty() {
                        return Err(PipelineError::Data("training file has no machine texts to fit a scorer on".into()));
                    }
                    observer.log(&format!("training order-{} n-gram scorer on {} machine texts", cfg.lm_order, texts.len()));
                    ResolvedScorer::from_lm(NGramLM::train(&texts, cfg.lm_order, cfg.lm_alpha)?)
                }
            })
        } else {
            None
        };
        if let Some(s) = &scorer {
            m.inputs.insert("scorer".into(), s.fingerprint.clone());
            m.details.insert("scorer".into(), json!(s.description));
            if let Some(lm) = &s.lm {
                let path = lm_sidecar(model_path);
                lm.save(&path)?;
                m.artifacts.push(format!("{model_name}.lm.json"));
                m.fingerprints.insert(format!("{model_name}.lm.json"), lm.fingerprint());
            } else if let Some(spec) = &cfg.scorer {
                let text = serde_json::to_string_pretty(spec).expect("scorer spec serializes") + "\n";
                write_atomic(&scorer_sidecar(model_path), text.as_bytes())?;
                m.artifacts.push(format!("{model_name}.scorer.json"));
            }
        }
        let detector = instantiate(&handle, scorer.as_ref().map(|s| s.scorer.clone()))?;
        let mut warnings = Vec::new();
        let (_, train_scores) = score_all(detector.as_ref(), &train, cfg.parallelism, "train", observer, &mut warnings)?;
        observer.progress(0.5);
        let val_scores = match &val {
            Some(v) => Some(score_all(detector.as_ref(), v, cfg.parallelism, "val", observer, &mut warnings)?.1),
            None => None,
        };
        m.warnings.extend(warnings);
        let pairs = |scored: &[(Record, RawScore)]| -> Vec<(f64, u8)> {
            scored.iter().map(|(r, s)| (handle.sign.effective(s.score), r.label.as_u8())).collect()
        };
        let train_pairs = pairs(&train_scores);
        let val_pairs = val_scores.as_deref().map(pairs);
        let (model, trace) = match handle.scale() {
            ScoreScale::Raw => {
                let opts = FitOptions { l2_lambda: cfg.l2_lambda, policy: cfg.policy, max_iter: DEFAULT_MAX_ITER };
                let (model, trace) =
                    CalibrationModel::fit(&handle.name, handle.sign, &train_pairs, val_pairs.as_deref(), &opts)?;
                (model, Some(trace))
            }
            scale => {
                let model = CalibrationModel::identity(&handle.name, handle.sign, scale, val_pairs.as_deref(), cfg.policy)?;
                (model, None)
            }
        };
        if let Some(t) = &trace {
            for (i, obj) in t.objective.iter().enumerate() {
                observer.log(&format!("iteration {i}: objective {obj:.9}"));
            }
        }
        model.save(model_path)?;
        m.artifacts.push(model_name.clone());
        m.fingerprints.insert(model_name.clone(), model.fingerprint());
        let accuracy = |p: &[(f64, u8)]| -> Option<f64> {
            (!p.is_empty()).then(|| p.iter().filter(|(s, y)| model.decide(*s) == *y).count() as f64 / p.len() as f64)
        };
        let log_loss = |p: &[(f64, u8)]| -> Option<f64> {
            (!p.is_empty()).then(|| {
                p.iter()
                    .map(|&(s, y)| {
                        let q = model.apply(s).clamp(1e-15, 1.0 - 1e-15);
                        if y == 1 {
                            -q.ln()
                        } else {
                            -(1.0 - q).ln()
                        }
                    })
                    .sum::<f64>()
                    / p.len() as f64
            })
        };
        let fit = json!({
            "alpha": model.alpha,
            "beta": model.beta,
            "threshold": model.threshold,
            "threshold_policy": model.threshold_policy,
            "iterations": trace.as_ref().map(|t| t.iterations),
            "objective": trace.as_ref().map(|t: &FitTrace| t.objective.clone()),
            "grad_norm": trace.as_ref().map(|t| t.grad_norm),
            "train_n": train_pairs.len(),
            "val_n": val_pairs.as_ref().map(Vec::len),
            "train_accuracy": accuracy(&train_pairs),
            "val_accuracy": val_pairs.as_deref().and_then(accuracy),
            "train_log_loss": log_loss(&train_pairs),
            "val_log_loss": val_pairs.as_deref().and_then(log_loss),
        });
        m.details.insert("fit".into(), fit.clone());
        observer.log(&format!(
            "alpha={:.6} beta={:.6} threshold={:.6} fingerprint={}",
            model.alpha,
            model.beta,
            model.threshold,
            &model.fingerprint()[..16]
        ));
        observer.progress(1.0);
        Ok(json!({
            "stage": "calibrate",
            "model": model_path,
            "calibration_fingerprint": model.fingerprint(),
            "fit": fit,
        }))
    })?;
    Ok(summary)
}

// ---------------------------------------------------------------- evaluate

fn prediction(model: &CalibrationModel, r: &Record, s: &RawScore, base_id: Option<String>) -> Prediction {
    let effective_score = model.sign.effective(s.score);
    Prediction {
        record_id: r.id.clone(),
        y_true: r.label.as_u8(),
        score: s.score,
        effective_score,
        probability: model.apply(effective_score),
        y_pred: model.decide(effective_score),
        attack: r.attack.clone(),
        base_id,
        latency_ms: s.latency_ms,
        source: r.source.clone(),
        lang: r.lang.clone(),
        model: r.model.clone(),
    }
}

/// variant id → base id, from a provenance file next to the attacked file.
fn provenance_map(attacked: &Path) -> Result<HashMap<String, String>, PipelineError> {
    let path = attacked.with_file_name(PROVENANCE_FILE);
    let mut map = HashMap::new();
    if !path.is_file() {
        return Ok(map);
    }
    let text = fs::read_to_string(&path).map_err(|source| SchemaError::Io { path: path.display().to_string(), source })?;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: AttackProvenance = serde_json::from_str(line).map_err(|e| SchemaError::Json {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        map.insert(p.variant_id, p.base_id);
    }
    Ok(map)
}

fn base_of(id: &str, attack: &str, provenance: &HashMap<String, String>) -> Option<String> {
    provenance.get(id).cloned().or_else(|| id.strip_suffix(&format!("#{attack}")).map(str::to_string))
}

pub fn load_model(path: &Path) -> Result<CalibrationModel, PipelineError> {
    Ok(CalibrationModel::load(path)?)
}

pub fn run_evaluate(cfg: &EvaluateConfig, out_dir: &Path, observer: &dyn Observer) -> Result<Value, PipelineError> {
    ensure_valid(cfg.issues())?;
    let registry = registry_with(&cfg.detectors)?;
    let handle = registry.resolve(&cfg.detector)?.clone();
    let model = load_model(&cfg.model)?;
    if model.detector != handle.name {
        return Err(PipelineError::Data(format!(
            "{} was calibrated for detector {:?}, not {:?}",
            cfg.model.display(),
            model.detector,
            handle.name
        )));
    }
    let attacked_model = match &cfg.attacked_model {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    if let Some(am) = &attacked_model {
        if am.fingerprint() != model.fingerprint() {
            return Err(MetricsError::ThresholdMismatch { clean: model.fingerprint(), attacked: am.fingerprint() }.into());
        }
    }
    create_dir(out_dir)?;
    let mut manifest = DatasetManifest::new("evaluate", cfg.seed);
    manifest.source_paths = std::iter::once(&cfg.test).chain(&cfg.attacked).map(|p| p.display().to_string()).collect();
    manifest.config_snapshot = snapshot(cfg);
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.write(&manifest_path)?;
    let result = evaluate_inner(cfg, &handle, &model, out_dir, observer, &mut manifest);
    if let Err(e) = &result {
        manifest.status = ManifestStatus::Failed;
        manifest.error = Some(e.to_string());
        manifest.write(&manifest_path)?;
    }
    result
}

fn evaluate_inner(
    cfg: &EvaluateConfig,
    handle: &DetectorHandle,
    model: &CalibrationModel,
    out_dir: &Path,
    observer: &dyn Observer,
    m: &mut DatasetManifest,
) -> Result<Value, PipelineError> {
    let dataset_fingerprint = file_sha(&cfg.test)?;
    m.inputs.insert("test".into(), dataset_fingerprint.clone());
    m.inputs.insert("calibration".into(), model.fingerprint());
    if let Some(a) = &cfg.attacked {
        m.inputs.insert("attacked".into(), file_sha(a)?);
    }
    let dataset_manifest = cfg.test.with_file_name(MANIFEST_FILE);
    let dataset_manifest_fingerprint = if dataset_manifest.is_file() && dataset_manifest != out_dir.join(MANIFEST_FILE) {
        Some(DatasetManifest::read(&dataset_manifest)?.fingerprint())
    } else {
        None
    };
    if let Some(fp) = &dataset_manifest_fingerprint {
        m.inputs.insert("dataset_manifest".into(), fp.clone());
    }
    let scorer = scorer_for_model(handle, cfg.scorer.as_ref(), Some(&cfg.model))?;
    if let Some(s) = &scorer {
        m.inputs.insert("scorer".into(), s.fingerprint.clone());
    }
    let run_fingerprint = fingerprint_of(&(&m.config_snapshot, &m.inputs));

    let (test, w) = read_records(&cfg.test)?;
    m.warnings.extend(w);
    let attacked: Vec<Record> = match &cfg.attacked {
        Some(path) => {
            let (recs, w) = read_records(path)?;
            m.warnings.extend(w);
            recs.into_iter().filter(|r| r.attack.is_some()).collect()
        }
        None => Vec::new(),
    };
    let provenance = match &cfg.attacked {
        Some(p) => provenance_map(p)?,
        None => HashMap::new(),
    };
    if cfg.attacked.is_some() && attacked.is_empty() {
        m.warnings.push("attacked file has no attacked variants".into());
    }
    observer.log(&format!("evaluating {} on {} test records and {} attacked variants", handle.name, test.len(), attacked.len()));

    let detector = instantiate(handle, scorer.as_ref().map(|s| s.scorer.clone()))?;
    let mut warnings = Vec::new();
    let (clean_batch, clean_scored) = score_all(detector.as_ref(), &test, cfg.parallelism, "test", observer, &mut warnings)?;
    observer.progress(0.5);
    let clean: Vec<Prediction> = clean_scored.iter().map(|(r, s)| prediction(model, r, s, None)).collect();
    let scored_ids: std::collections::HashSet<&str> = clean.iter().map(|p| p.record_id.as_str()).collect();

    let mut attacked_preds = Vec::new();
    let mut attacked_eff = None;
    if !attacked.is_empty() {
        let (batch, scored) = score_all(detector.as_ref(), &attacked, cfg.parallelism, "attacked", observer, &mut warnings)?;
        attacked_eff = Some(efficiency(&batch.trace));
        for (r, s) in &scored {
            let attack = r.attack.as_deref().unwrap_or_default();
            let base = base_of(&r.id, attack, &provenance).ok_or_else(|| MetricsError::UnmatchedProvenance {
                variant: r.id.clone(),
                message: "no provenance entry and the id does not end in #<attack>".into(),
            })?;
            if !scored_ids.contains(base.as_str()) && test.iter().any(|t| t.id == base) {
                warnings.push(format!("attacked: {} skipped because its clean record failed to score", r.id));
                continue;
            }
            attacked_preds.push(prediction(model, r, s, Some(base)));
        }
    }
    m.warnings.extend(warnings);

    let dataset = cfg.test.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let reports = build_reports(&ReportInputs {
        detector: &handle.name,
        dataset: &dataset,
        dataset_fingerprint: &dataset_fingerprint,
        calibration_fingerprint: &model.fingerprint(),
        clean: &clean,
        clean_efficiency: efficiency(&clean_batch.trace),
        attacked: &attacked_preds,
        attacked_efficiency: attacked_eff,
        attacked_calibration_fingerprint: None,
        slices: &cfg.slices,
        fpr_levels: &cfg.fpr_levels,
    })?;
    let lines: Vec<PredictionLine> = clean
        .iter()
        .chain(&attacked_preds)
        .map(|p| PredictionLine { run_fingerprint: run_fingerprint.clone(), detector: handle.name.clone(), prediction: p.clone() })
        .collect();
    let mut report = RunReport {
        schema_version: SCHEMA_VERSION.to_string(),
        run_fingerprint: run_fingerprint.clone(),
        detector: handle.name.clone(),
        scorer: scorer.as_ref().map(|s| s.description.clone()),
        calibration_fingerprint: model.fingerprint(),
        dataset_fingerprint,
        predictions_fingerprint: String::new(),
        dataset_manifest_fingerprint,
        reports,
    };
    m.status = ManifestStatus::Complete;
    m.details.insert("run_fingerprint".into(), json!(run_fingerprint));
    write_run(out_dir, m, &lines, &mut report)?;
    for r in &report.reports {
        let e = &r.effectiveness;
        observer.log(&format!(
            "{} [{}]: n={} accuracy={} f1={} auroc={}{}",
            r.detector,
            r.attack,
            e.n,
            fmt_metric(&e.accuracy),
            fmt_metric(&e.f1),
            fmt_metric(&e.auroc),
            r.asr.as_ref().map(|a| format!(" asr={}", fmt_metric(&a.asr))).unwrap_or_default()
        ));
    }
    observer.progress(1.0);
    Ok(json!({
        "stage": "evaluate",
        "out": out_dir,
        "run_fingerprint": run_fingerprint,
        "predictions": lines.len(),
        "reports": report.reports.iter().map(|r| json!({
            "attack": r.attack,
            "accuracy": r.effectiveness.accuracy,
            "f1": r.effectiveness.f1,
            "auroc": r.effectiveness.auroc,
            "asr": r.asr.as_ref().map(|a| &a.asr),
        })).collect::<Vec<_>>(),
    }))
}

fn fmt_metric(m: &crate::metrics::Metric) -> String {
    m.value().map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

// ---------------------------------------------------------------- detect

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectRequest {
    pub text: String,
    pub detector: String,
    #[serde(default, alias = "model_artifact", skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub detectors: Vec<DetectorHandle>,
    /// Detector config overrides, merged into the handle.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub verdict: String,
    /// Calibrated probability of the predicted class.
    pub confidence: f64,
    pub probability: f64,
    pub score: f64,
    pub latency_ms: f64,
    pub threshold: f64,
    pub detector: String,
}

pub fn detect(req: &DetectRequest) -> Result<Verdict, PipelineError> {
    if req.text.trim().is_empty() {
        return Err(PipelineError::Usage("text must not be empty".into()));
    }
    let registry = registry_with(&req.detectors)?;
    let mut handle = registry.resolve(&req.detector)?.clone();
    for (k, v) in &req.params {
        handle.config.insert(k.clone(), v.clone());
    }
    let model = match &req.model {
        Some(p) => load_model(p)?,
        None if handle.scale() != ScoreScale::Raw => {
            CalibrationModel::identity(&handle.name, handle.sign, handle.scale(), None, ThresholdPolicy::FixedHalf)?
        }
        None => {
            return Err(PipelineError::Usage(format!(
                "detector {:?} emits raw scores; a calibration model is required",
                handle.name
            )))
        }
    };
    if model.detector != handle.name {
        return Err(PipelineError::Data(format!("model was calibrated for {:?}, not {:?}", model.detector, handle.name)));
    }
    let scorer = scorer_for_model(&handle, req.scorer.as_ref(), req.model.as_deref())?;
    let detector = instantiate(&handle, scorer.map(|s| s.scorer))?;
    let record = Record::new("demo", crate::schema::canonical_text(&req.text), Label::Machine);
    let s = crate::detector::score(detector.as_ref(), &record)?;
    let p = model.apply_raw(s.score);
    let machine = model.decide_raw(s.score) == 1;
    Ok(Verdict {
        verdict: if machine { "machine" } else { "human" }.to_string(),
        confidence: if machine { p } else { 1.0 - p },
        probability: p,
        score: s.score,
        latency_ms: s.latency_ms,
        threshold: model.threshold,
        detector: handle.name,
    })
}

// ---------------------------------------------------------------- train-lm

pub fn run_train_lm(cfg: &TrainLmConfig, out: &Path, observer: &dyn Observer) -> Result<Value, PipelineError> {
    ensure_valid(cfg.issues())?;
    let (records, _) = read_records(&cfg.corpus)?;
    let texts: Vec<&str> =
        records.iter().filter(|r| cfg.label.is_none_or(|l| r.label == l)).map(|r| r.text.as_str()).collect();
    if texts.is_empty() {
        return Err(PipelineError::Data("no texts match the label filter".into()));
    }
    let lm = NGramLM::train(&texts, cfg.order, cfg.alpha)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    lm.save(out)?;
    observer.log(&format!("trained {} on {} texts", lm.describe(), texts.len()));
    Ok(json!({
        "stage": "train_lm",
        "out": out,
        "texts": texts.len(),
        "vocabulary": lm.vocabulary().len(),
        "fingerprint": lm.fingerprint(),
    }))
}

// ---------------------------------------------------------------- jobs

/// A stage and its config, as submitted to the service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum JobSpec {
    Build(BuildSpec),
    Attack(AttackConfig),
    Calibrate(CalibrateConfig),
    Evaluate(EvaluateConfig),
}

impl JobSpec {
    pub const KINDS: [&'static str; 4] = ["build", "attack", "calibrate", "evaluate"];

    /// Parses `{kind, config}` with field-level errors (paths under `config`).
    pub fn parse(kind: &str, config: Value) -> Result<JobSpec, Vec<FieldError>> {
        let prefixed = |mut errs: Vec<FieldError>| {
            for e in &mut errs {
                e.field = if e.field == "(root)" { "config".into() } else { format!("config.{}", e.field) };
            }
            errs
        };
        let spec = match kind {
            "build" => JobSpec::Build(crate::config::from_value(config).map_err(prefixed)?),
            "attack" => JobSpec::Attack(crate::config::from_value(config).map_err(prefixed)?),
            "calibrate" => JobSpec::Calibrate(crate::config::from_value(config).map_err(prefixed)?),
            "evaluate" => JobSpec::Evaluate(crate::config::from_value(config).map_err(prefixed)?),
            other => {
                return Err(vec![FieldError::new(
                    "kind",
                    format!("unknown job kind {other:?} (expected one of {})", Self::KINDS.join(", ")),
                )])
            }
        };
        let issues = prefixed(spec.issues());
        if issues.is_empty() {
            Ok(spec)
        } else {
            Err(issues)
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            JobSpec::Build(_) => "build",
            JobSpec::Attack(_) => "attack",
            JobSpec::Calibrate(_) => "calibrate",
            JobSpec::Evaluate(_) => "evaluate",
        }
    }

    pub fn issues(&self) -> Vec<FieldError> {
        match self {
            JobSpec::Build(s) => s.issues(),
            JobSpec::Attack(c) => c.issues(),
            JobSpec::Calibrate(c) => c.issues(),
            JobSpec::Evaluate(c) => c.issues(),
        }
    }

    /// Runs the stage with all outputs under `run_dir`.
    pub fn run(&self, run_dir: &Path, observer: &dyn Observer) -> Result<Value, PipelineError> {
        match self {
            JobSpec::Build(s) => run_build(s, run_dir, observer),
            JobSpec::Attack(c) => run_attack(c, run_dir, observer),
            JobSpec::Calibrate(c) => {
                create_dir(run_dir)?;
                run_calibrate(c, &run_dir.join(CALIBRATION_FILE), observer)
            }
            JobSpec::Evaluate(c) => run_evaluate(c, run_dir, observer),
        }
    }

    /// The resolved plan printed by `--dry-run`.
    pub fn plan(&self, out: &Path) -> Value {
        let config = match self {
            JobSpec::Build(s) => serde_json::to_value(s),
            JobSpec::Attack(c) => serde_json::to_value(c),
            JobSpec::Calibrate(c) => serde_json::to_value(c),
            JobSpec::Evaluate(c) => serde_json::to_value(c),
        }
        .expect("config serializes");
        json!({ "kind": self.kind(), "out": out, "config": config })
    }
}
