//! Build stage: pair a human corpus with generated machine counterparts and
//! emit a labeled, split dataset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::FieldError;
use crate::fingerprint::sha256_hex;
use crate::generator::{batch_generate, GenerationConfig, GenerationError, Generator};
use crate::progress::Observer;
use crate::schema::{
    canonical_text, load_dataset, normalize, records_to_jsonl, split, write_atomic, DatasetManifest, FormatHint,
    Label, ManifestStatus, Record, SchemaError, SplitName, SplitRatio,
};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_FAILURE_CAP: f64 = 0.05;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("invalid build spec: {}", join_issues(.0))]
    InvalidSpec(Vec<FieldError>),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("human corpus {0} has no usable records")]
    NoHumanRecords(String),
    #[error(transparent)]
    Generator(#[from] GenerationError),
    #[error("generation failed for {failed} of {attempted} inputs, above the {cap} failure cap (first error: {first})")]
    TooManyFailures { failed: usize, attempted: usize, cap: f64, first: String },
}

pub(crate) fn join_issues(issues: &[FieldError]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    #[default]
    OneToOne,
    /// `samples_per_text` generations per human text and generator.
    OneToMany,
}

fn default_samples() -> usize {
    2
}
fn default_parallelism() -> usize {
    4
}
fn default_failure_cap() -> f64 {
    DEFAULT_FAILURE_CAP
}
fn default_format() -> FormatHint {
    FormatHint::Auto
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildSpec {
    pub human_corpus_path: PathBuf,
    #[serde(default = "default_format")]
    pub format: FormatHint,
    pub generators: Vec<GenerationConfig>,
    #[serde(default)]
    pub pairing: Pairing,
    #[serde(default = "default_samples")]
    pub samples_per_text: usize,
    #[serde(default)]
    pub split: SplitRatio,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_failure_cap")]
    pub max_failure_fraction: f64,
}

impl BuildSpec {
    pub fn new(human_corpus_path: impl Into<PathBuf>, generators: Vec<GenerationConfig>) -> Self {
        BuildSpec {
            human_corpus_path: human_corpus_path.into(),
            format: FormatHint::Auto,
            generators,
            pairing: Pairing::OneToOne,
            samples_per_text: default_samples(),
            split: SplitRatio::default(),
            seed: 0,
            output_dir: None,
            parallelism: default_parallelism(),
            max_failure_fraction: DEFAULT_FAILURE_CAP,
        }
    }

    pub fn issues(&self) -> Vec<FieldError> {
        let mut out = Vec::new();
        if self.human_corpus_path.as_os_str().is_empty() {
            out.push(FieldError::new("human_corpus_path", "must not be empty"));
        }
        if self.generators.is_empty() {
            out.push(FieldError::new("generators", "at least one generator is required"));
        }
        for (i, g) in self.generators.iter().enumerate() {
            out.extend(g.issues(&format!("generators[{i}]")));
        }
        let mut models: Vec<&str> = self.generators.iter().map(|g| g.model.as_str()).collect();
        models.sort_unstable();
        if models.windows(2).any(|w| w[0] == w[1]) {
            out.push(FieldError::new("generators", "generator model names must be distinct"));
        }
        if self.pairing == Pairing::OneToMany && self.samples_per_text == 0 {
            out.push(FieldError::new("samples_per_text", "must be at least 1"));
        }
        if self.parallelism == 0 {
            out.push(FieldError::new("parallelism", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            out.push(FieldError::new("max_failure_fraction", "must be in [0, 1]"));
        }
        out
    }

    /// Snapshot for the manifest. The output location is not part of the
    /// experiment, so it is left out.
    pub fn snapshot(&self) -> BTreeMap<String, Value> {
        let mut spec = self.clone();
        spec.output_dir = None;
        match serde_json::to_value(spec).expect("spec serializes") {
            Value::Object(m) => m.into_iter().collect(),
            _ => unreachable!(),
        }
    }

    fn per_generator(&self) -> usize {
        match self.pairing {
            Pairing::OneToOne => 1,
            Pairing::OneToMany => self.samples_per_text,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BuildOutput {
    pub records: Vec<Record>,
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
    pub manifest: DatasetManifest,
    pub failures: Vec<String>,
}

/// Id of the `sample`-th machine record generated from `human_id` by generator `gen`.
pub fn machine_id(human_id: &str, gen: usize, sample: Option<usize>) -> String {
    match sample {
        None => format!("{human_id}~{gen}"),
        Some(j) => format!("{human_id}~{gen}.{j}"),
    }
}

/// Loads and standardizes the human corpus, forcing label 0.
pub fn load_human_corpus(path: &Path, format: FormatHint) -> Result<(Vec<Record>, Vec<String>), BuildError> {
    let loaded = load_dataset(path, format)?;
    let mut warnings: Vec<String> =
        loaded.warnings.iter().map(|w| format!("{}[{}]: {}", w.path, w.index, w.message)).collect();
    let mut relabeled = 0;
    let records: Vec<Record> = loaded
        .records
        .into_iter()
        .map(|mut r| {
            if r.label != Label::Human || r.attack.is_some() || r.model.is_some() {
                relabeled += 1;
            }
            r.label = Label::Human;
            r.attack = None;
            r.model = None;
            r
        })
        .collect();
    if relabeled > 0 {
        warnings.push(format!("{relabeled} corpus records were not plain human records; coerced to label 0"));
    }
    let norm = normalize(records);
    if norm.dropped_records > 0 {
        warnings.push(format!("{} records dropped: empty text after normalization", norm.dropped_records));
    }
    if norm.records.is_empty() {
        return Err(BuildError::NoHumanRecords(path.display().to_string()));
    }
    Ok((norm.records, warnings))
}

/// Builds the dataset. With `out_dir`, writes the started manifest before any
/// work, then the dataset files and the final manifest.
pub fn build(spec: &BuildSpec, out_dir: Option<&Path>, observer: &dyn Observer) -> Result<BuildOutput, BuildError> {
    let issues = spec.issues();
    if !issues.is_empty() {
        return Err(BuildError::InvalidSpec(issues));
    }
    let mut manifest = DatasetManifest::new("build", spec.seed);
    manifest.split_ratios = Some(spec.split);
    manifest.source_paths = vec![spec.human_corpus_path.display().to_string()];
    manifest.config_snapshot = spec.snapshot();
    if let Some(dir) = out_dir {
        manifest.write(&dir.join(MANIFEST_FILE))?;
    }
    let result = run_build(spec, out_dir, observer, &mut manifest);
    if let (Err(e), Some(dir)) = (&result, out_dir) {
        manifest.status = ManifestStatus::Failed;
        manifest.error = Some(e.to_string());
        manifest.write(&dir.join(MANIFEST_FILE))?;
    }
    result
}

fn run_build(
    spec: &BuildSpec,
    out_dir: Option<&Path>,
    observer: &dyn Observer,
    manifest: &mut DatasetManifest,
) -> Result<BuildOutput, BuildError> {
    let (humans, warnings) = load_human_corpus(&spec.human_corpus_path, spec.format)?;
    manifest.warnings.extend(warnings);
    observer.log(&format!("loaded {} human records from {}", humans.len(), spec.human_corpus_path.display()));

    let inputs: Vec<String> = humans.iter().map(|r| r.text.clone()).collect();
    let per_gen = spec.per_generator();
    let total_jobs = spec.generators.len() * per_gen;
    // machine[h] collects the generated records for human h, in generator order
    let mut machine: Vec<Vec<Record>> = vec![Vec::new(); humans.len()];
    let mut failures = Vec::new();
    let mut gen_details = Vec::new();
    let mut job = 0;
    for (gi, gcfg) in spec.generators.iter().enumerate() {
        let mut gen_failed = 0;
        for j in 0..per_gen {
            let mut cfg = gcfg.clone();
            cfg.seed = cfg.seed.wrapping_add(j as u64);
            let generator = Generator::new(cfg)?;
            let results = batch_generate(&generator, &inputs, spec.parallelism);
            for (h, res) in results.into_iter().enumerate() {
                let sample = (spec.pairing == Pairing::OneToMany).then_some(j);
                let id = machine_id(&humans[h].id, gi, sample);
                let text = res.map(|g| canonical_text(&g.text)).and_then(|t| {
                    if t.is_empty() {
                        Err(GenerationError::EmptyCompletion)
                    } else {
                        Ok(t)
                    }
                });
                match text {
                    Ok(text) => {
                        let mut r = Record::new(id, text, Label::Machine);
                        r.model = Some(gcfg.model.clone());
                        r.source = humans[h].source.clone();
                        r.lang = humans[h].lang.clone();
                        machine[h].push(r);
                    }
                    Err(e) => {
                        gen_failed += 1;
                        failures.push(format!("{id}: {e}"));
                    }
                }
            }
            job += 1;
            observer.progress(job as f64 / (total_jobs + 1) as f64);
        }
        observer.log(&format!(
            "generator {} ({}): {} generated, {} failed",
            gcfg.model,
            gcfg.fingerprint(),
            inputs.len() * per_gen - gen_failed,
            gen_failed
        ));
        gen_details.push(json!({
            "model": gcfg.model,
            "config_fingerprint": gcfg.fingerprint(),
            "prompt_id": sha256_hex(gcfg.prompt_template.as_bytes()),
            "requests": inputs.len() * per_gen,
            "failures": gen_failed,
        }));
    }
    manifest.details.insert("generators".into(), Value::from(gen_details));

    let attempted = inputs.len() * total_jobs;
    if !failures.is_empty() {
        let fraction = failures.len() as f64 / attempted as f64;
        if fraction > spec.max_failure_fraction {
            return Err(BuildError::TooManyFailures {
                failed: failures.len(),
                attempted,
                cap: spec.max_failure_fraction,
                first: failures[0].clone(),
            });
        }
        manifest.warnings.push(format!("{} of {attempted} generations failed and were skipped", failures.len()));
        manifest.details.insert("generation_failures".into(), json!(failures));
    }

    let mut records = Vec::with_capacity(humans.len() * (1 + total_jobs));
    for (h, ms) in humans.into_iter().zip(machine) {
        records.push(h);
        records.extend(ms);
    }
    let outcome = split(&records, spec.split, spec.seed)?;
    manifest.split_membership = outcome.manifest.split_membership.clone();
    manifest.warnings.extend(outcome.warnings.iter().cloned());
    let counts: BTreeMap<&str, usize> = SplitName::ALL.iter().map(|&s| (s.as_str(), outcome.part(s).len())).collect();
    observer.log(&format!(
        "{} records; train {} / val {} / test {}",
        records.len(),
        counts["train"],
        counts["val"],
        counts["test"]
    ));

    if let Some(dir) = out_dir {
        let files: [(&str, &[Record]); 4] = [
            (DATASET_FILE, &records),
            ("train.jsonl", &outcome.train),
            ("val.jsonl", &outcome.val),
            ("test.jsonl", &outcome.test),
        ];
        for (name, recs) in files {
            let body = records_to_jsonl(recs);
            write_atomic(&dir.join(name), body.as_bytes())?;
            manifest.artifacts.push(name.to_string());
            manifest.fingerprints.insert(name.to_string(), sha256_hex(body.as_bytes()));
        }
    }
    manifest.status = ManifestStatus::Complete;
    if let Some(dir) = out_dir {
        manifest.write(&dir.join(MANIFEST_FILE))?;
    }
    observer.progress(1.0);
    Ok(BuildOutput {
        records,
        train: outcome.train,
        val: outcome.val,
        test: outcome.test,
        manifest: manifest.clone(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::progress::Silent;
    use std::collections::BTreeMap;

    fn corpus(dir: &Path, n: usize) -> PathBuf {
        let path = dir.join("human.jsonl");
        let body: String = (0..n)
            .map(|i| {
                format!("{}\n", json!({"id": format!("h{i:03}"), "text": format!("human text number {i} about cats and dogs"), "label": 0}))
            })
            .collect();
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn ten_texts_two_generators() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BuildSpec::new(
            corpus(dir.path(), 10),
            vec![GenerationConfig::stub("stub-a", 1), GenerationConfig::stub("stub-b", 2)],
        );
        let out = build(&spec, None, &Silent).unwrap();
        assert_eq!(out.records.len(), 30);
        let mut by: BTreeMap<(u8, Option<String>), usize> = BTreeMap::new();
        for r in &out.records {
            *by.entry((r.label.as_u8(), r.model.clone())).or_default() += 1;
        }
        assert_eq!(by[&(0, None)], 10);
        assert_eq!(by[&(1, Some("stub-a".into()))], 10);
        assert_eq!(by[&(1, Some("stub-b".into()))], 10);
        assert!(out.records.iter().all(|r| r.attack.is_none()));
    }

    #[test]
    fn one_to_many() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = BuildSpec::new(corpus(dir.path(), 5), vec![GenerationConfig::stub("stub-a", 1)]);
        spec.pairing = Pairing::OneToMany;
        spec.samples_per_text = 3;
        let out = build(&spec, None, &Silent).unwrap();
        assert_eq!(out.records.iter().filter(|r| r.label == Label::Machine).count(), 15);
        assert!(out.records.iter().any(|r| r.id == "h000~0.2"));
    }

    #[test]
    fn zero_generators_rejected() {
        let spec = BuildSpec::new("x.jsonl", vec![]);
        match build(&spec, None, &Silent) {
            Err(BuildError::InvalidSpec(issues)) => assert_eq!(issues[0].field, "generators"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rerun_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BuildSpec::new(corpus(dir.path(), 40), vec![GenerationConfig::stub("stub-a", 1)]);
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        build(&spec, Some(&a), &Silent).unwrap();
        build(&spec, Some(&b), &Silent).unwrap();
        for f in [DATASET_FILE, "train.jsonl", "val.jsonl", "test.jsonl"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
        let ma = DatasetManifest::read(&a.join(MANIFEST_FILE)).unwrap();
        let mb = DatasetManifest::read(&b.join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma.fingerprint(), mb.fingerprint());
        assert_eq!(ma.status, ManifestStatus::Complete);
        assert!(!ma.config_snapshot.contains_key("output_dir"));
        assert_eq!(ma.split_membership.len(), 80);
    }

    #[test]
    fn failure_cap_aborts_and_manifest_records_it() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = GenerationConfig::http_chat("http://127.0.0.1:9", "down");
        g.max_retries = 0;
        g.timeout_ms = 500;
        let spec = BuildSpec::new(corpus(dir.path(), 3), vec![g]);
        let out = dir.path().join("out");
        let err = build(&spec, Some(&out), &Silent).unwrap_err();
        assert!(matches!(err, BuildError::TooManyFailures { failed: 3, attempted: 3, .. }), "{err}");
        let m = DatasetManifest::read(&out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.status, ManifestStatus::Failed);
        assert!(m.error.is_some());
    }

    #[test]
    fn labeled_corpus_coerced_to_human() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"text\":\"one two\",\"label\":1}\n{\"id\":\"b\",\"text\":\"three\",\"label\":0}\n")
            .unwrap();
        let (recs, warnings) = load_human_corpus(&path, FormatHint::Auto).unwrap();
        assert!(recs.iter().all(|r| r.label == Label::Human));
        assert!(warnings.iter().any(|w| w.contains("coerced")));
    }
}
