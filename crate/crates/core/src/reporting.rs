//! Run directories (manifest, predictions, report json/csv) and cross-run
//! comparison tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::attack::AttackProvenance;
use crate::fingerprint::sha256_hex;
use crate::metrics::{
    asr, effectiveness, fpr_key, slice, Efficiency, EvalReport, Metric, MetricsError, Prediction, SliceKey,
    CLEAN_GROUP, MIN_SLICE_SIZE,
};
use crate::schema::{write_atomic, DatasetManifest, SchemaError, SCHEMA_VERSION};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

pub const CSV_COLUMNS: [&str; 15] = [
    "detector",
    "dataset",
    "attack",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "auroc",
    "aupr",
    "tpr_fpr_0.01",
    "tpr_fpr_0.001",
    "asr",
    "mean_latency_ms",
    "throughput_per_s",
    "gpu_peak_gib",
];

/// Wall-clock derived keys; everything else in a run directory is reproducible.
pub const VOLATILE_KEYS: [&str; 5] = ["created_at", "latency_ms", "wall_seconds", "throughput_per_s", "mean_latency_ms"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("nothing to compare")]
    NothingToCompare,
    #[error("reports cover different datasets ({0}); pass allow_mixed to compare anyway")]
    MixedDatasets(String),
}

/// One line of predictions.jsonl.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub run_fingerprint: String,
    pub detector: String,
    #[serde(flatten)]
    pub prediction: Prediction,
}

/// Contents of report.json.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub run_fingerprint: String,
    pub detector: String,
    pub scorer: Option<String>,
    pub calibration_fingerprint: String,
    pub dataset_fingerprint: String,
    /// Stable fingerprint of predictions.jsonl.
    pub predictions_fingerprint: String,
    /// Fingerprint of the dataset manifest the test split came from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_manifest_fingerprint: Option<String>,
    pub reports: Vec<EvalReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub manifest: DatasetManifest,
    pub predictions: Vec<PredictionLine>,
    pub report: RunReport,
    pub csv: String,
}

/// Inputs for assembling per-group reports of one detector.
pub struct ReportInputs<'a> {
    pub detector: &'a str,
    pub dataset: &'a str,
    pub dataset_fingerprint: &'a str,
    pub calibration_fingerprint: &'a str,
    pub clean: &'a [Prediction],
    pub clean_efficiency: Efficiency,
    /// Attacked variants, each with `attack` and `base_id` set.
    pub attacked: &'a [Prediction],
    pub attacked_efficiency: Option<Efficiency>,
    pub attacked_calibration_fingerprint: Option<&'a str>,
    pub slices: &'a [SliceKey],
    pub fpr_levels: &'a [f64],
}

fn subset_efficiency(base: &Efficiency, preds: &[&Prediction]) -> Efficiency {
    let mut e = base.clone();
    e.n = preds.len();
    e.mean_latency_ms = if preds.is_empty() {
        Metric::absent("nothing scored")
    } else {
        Metric::Value(preds.iter().map(|p| p.latency_ms).sum::<f64>() / preds.len() as f64)
    };
    e
}

/// One report for the clean test set, then one per attack: clean human
/// samples plus that attack's variants, with ASR against the clean predictions.
pub fn build_reports(inp: &ReportInputs) -> Result<Vec<EvalReport>, ReportError> {
    let mk = |attack: &str, preds: &[Prediction], efficiency: Efficiency| -> Result<EvalReport, ReportError> {
        let mut slices = BTreeMap::new();
        for &key in inp.slices {
            slices.insert(key.as_str().to_string(), slice(preds, key, inp.fpr_levels, MIN_SLICE_SIZE)?);
        }
        Ok(EvalReport {
            detector: inp.detector.to_string(),
            dataset: inp.dataset.to_string(),
            dataset_fingerprint: inp.dataset_fingerprint.to_string(),
            calibration_fingerprint: inp.calibration_fingerprint.to_string(),
            attack: attack.to_string(),
            effectiveness: effectiveness(preds, inp.fpr_levels)?,
            asr: None,
            efficiency,
            slices,
        })
    };
    let mut out = vec![mk(CLEAN_GROUP, inp.clean, inp.clean_efficiency.clone())?];
    if inp.attacked.is_empty() {
        return Ok(out);
    }
    let attacked_cal = inp.attacked_calibration_fingerprint.unwrap_or(inp.calibration_fingerprint);
    let attacks: BTreeSet<&str> = inp.attacked.iter().filter_map(|p| p.attack.as_deref()).collect();
    let humans: Vec<Prediction> = inp.clean.iter().filter(|p| p.y_true == 0).cloned().collect();
    let base_eff = inp.attacked_efficiency.clone().unwrap_or_else(|| inp.clean_efficiency.clone());
    for attack in attacks {
        let variants: Vec<&Prediction> = inp.attacked.iter().filter(|p| p.attack.as_deref() == Some(attack)).collect();
        let provenance: Vec<AttackProvenance> = variants
            .iter()
            .map(|p| AttackProvenance {
                variant_id: p.record_id.clone(),
                base_id: p.base_id.clone().unwrap_or_default(),
                attack: attack.to_string(),
                params_fingerprint: String::new(),
                seed: 0,
            })
            .collect();
        let owned: Vec<Prediction> = variants.iter().map(|p| (*p).clone()).collect();
        let result = asr(inp.clean, inp.calibration_fingerprint, &owned, attacked_cal, &provenance)?;
        let mut group = humans.clone();
        group.extend(owned);
        let mut report = mk(attack, &group, subset_efficiency(&base_eff, &variants))?;
        report.asr = Some(result);
        out.push(report);
    }
    Ok(out)
}

fn cell(m: Option<&Metric>) -> String {
    m.and_then(Metric::value).map(|v| format!("{v}")).unwrap_or_default()
}

pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory csv");
    for r in reports {
        let e = &r.effectiveness;
        let tpr = |a: f64| cell(e.tpr_at_fpr.get(&fpr_key(a)).map(|o| &o.tpr));
        let row = [
            r.detector.clone(),
            r.dataset.clone(),
            r.attack.clone(),
            cell(Some(&e.accuracy)),
            cell(Some(&e.precision)),
            cell(Some(&e.recall)),
            cell(Some(&e.f1)),
            cell(Some(&e.auroc)),
            cell(Some(&e.aupr)),
            tpr(0.01),
            tpr(0.001),
            cell(r.asr.as_ref().map(|a| &a.asr)),
            cell(Some(&r.efficiency.mean_latency_ms)),
            cell(Some(&r.efficiency.throughput_per_s)),
            r.efficiency.gpu_peak_gib.map(|g| format!("{g}")).unwrap_or_default(),
        ];
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn predictions_jsonl(lines: &[PredictionLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

fn pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s
}

/// sha256 of an artifact body with timing fields masked, so reruns on the
/// same inputs give the same value.
pub fn stable_fingerprint(name: &str, body: &str) -> String {
    let masked = if name.ends_with(".csv") {
        mask_volatile_csv(body)
    } else if name.ends_with(".jsonl") {
        body.lines()
            .map(|l| match serde_json::from_str::<Value>(l) {
                Ok(mut v) => {
                    mask_volatile(&mut v);
                    v.to_string()
                }
                Err(_) => l.to_string(),
            })
            .collect::<Vec<_>>()
            .join("\n")
    } else {
        match serde_json::from_str::<Value>(body) {
            Ok(mut v) => {
                mask_volatile(&mut v);
                v.to_string()
            }
            Err(_) => body.to_string(),
        }
    };
    sha256_hex(masked.as_bytes())
}

/// Writes the four run files. `report.predictions_fingerprint` is filled in
/// here; the manifest records each file's stable fingerprint.
pub fn write_run(
    run_dir: &Path,
    manifest: &mut DatasetManifest,
    predictions: &[PredictionLine],
    report: &mut RunReport,
) -> Result<Vec<PathBuf>, ReportError> {
    let preds = predictions_jsonl(predictions);
    report.predictions_fingerprint = stable_fingerprint(PREDICTIONS_FILE, &preds);
    let json = pretty(report);
    let csv = report_csv(&report.reports);
    let mut written = Vec::new();
    for (name, body) in [(PREDICTIONS_FILE, &preds), (REPORT_JSON, &json), (REPORT_CSV, &csv)] {
        let path = run_dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        if !manifest.artifacts.iter().any(|a| a == name) {
            manifest.artifacts.push(name.to_string());
        }
        manifest.fingerprints.insert(name.to_string(), stable_fingerprint(name, body));
        written.push(path);
    }
    let mpath = run_dir.join(MANIFEST_FILE);
    manifest.write(&mpath)?;
    written.push(mpath);
    Ok(written)
}

fn read_text(path: &Path) -> Result<String, ReportError> {
    std::fs::read_to_string(path).map_err(|source| ReportError::Io { path: path.display().to_string(), source })
}

pub fn read_report(path: &Path) -> Result<RunReport, ReportError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| ReportError::Parse { path: path.display().to_string(), message: e.to_string() })
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>, ReportError> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReportError::Parse {
                path: format!("{}:{}", path.display(), i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_run(run_dir: &Path) -> Result<RunArtifacts, ReportError> {
    Ok(RunArtifacts {
        manifest: DatasetManifest::read(&run_dir.join(MANIFEST_FILE))?,
        predictions: read_predictions(&run_dir.join(PREDICTIONS_FILE))?,
        report: read_report(&run_dir.join(REPORT_JSON))?,
        csv: read_text(&run_dir.join(REPORT_CSV))?,
    })
}

/// Replaces wall-clock derived values with null, recursively.
pub fn mask_volatile(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for (k, val) in map.iter_mut() {
                if VOLATILE_KEYS.contains(&k.as_str()) {
                    *val = Value::Null;
                } else {
                    mask_volatile(val);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(mask_volatile),
        _ => {}
    }
}

/// Masks the timing columns of a report.csv body.
pub fn mask_volatile_csv(csv_text: &str) -> String {
    let masked: BTreeSet<usize> = CSV_COLUMNS
        .iter()
        .enumerate()
        .filter(|(_, c)| VOLATILE_KEYS.contains(c))
        .map(|(i, _)| i)
        .collect();
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(csv_text.as_bytes());
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    for (n, rec) in r.records().flatten().enumerate() {
        let row: Vec<&str> =
            rec.iter().enumerate().map(|(i, c)| if n > 0 && masked.contains(&i) { "" } else { c }).collect();
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Recomputes every report from predictions.jsonl and returns the differences
/// (empty when the run is self-consistent). Timing-derived values are ignored.
pub fn audit(run: &RunArtifacts) -> Result<Vec<String>, ReportError> {
    let rep = &run.report;
    let preds: Vec<Prediction> = run.predictions.iter().map(|l| l.prediction.clone()).collect();
    let (clean, attacked): (Vec<Prediction>, Vec<Prediction>) = preds.into_iter().partition(|p| p.base_id.is_none());
    let Some(first) = rep.reports.first() else {
        return Ok(vec!["report has no rows".into()]);
    };
    let fpr_levels: Vec<f64> =
        first.effectiveness.tpr_at_fpr.keys().filter_map(|k| k.parse().ok()).collect::<Vec<_>>();
    let slices: Vec<SliceKey> = first.slices.keys().filter_map(|k| k.parse().ok()).collect();
    let inputs = ReportInputs {
        detector: &rep.detector,
        dataset: &first.dataset,
        dataset_fingerprint: &rep.dataset_fingerprint,
        calibration_fingerprint: &rep.calibration_fingerprint,
        clean: &clean,
        clean_efficiency: first.efficiency.clone(),
        attacked: &attacked,
        attacked_efficiency: rep.reports.get(1).map(|r| r.efficiency.clone()),
        attacked_calibration_fingerprint: None,
        slices: &slices,
        fpr_levels: &fpr_levels,
    };
    let recomputed = build_reports(&inputs)?;
    let mut a = serde_json::to_value(&recomputed).expect("serializes");
    let mut b = serde_json::to_value(&rep.reports).expect("serializes");
    mask_volatile(&mut a);
    mask_volatile(&mut b);
    let mut diffs = Vec::new();
    if a != b {
        diffs.push("report.json rows differ from recomputation".to_string());
    }
    if mask_volatile_csv(&report_csv(&recomputed)) != mask_volatile_csv(&run.csv) {
        diffs.push("report.csv differs from recomputation".to_string());
    }
    let body = predictions_jsonl(&run.predictions);
    if stable_fingerprint(PREDICTIONS_FILE, &body) != rep.predictions_fingerprint {
        diffs.push("predictions.jsonl does not match the fingerprint in report.json".to_string());
    }
    if run.predictions.iter().any(|l| l.run_fingerprint != rep.run_fingerprint) {
        diffs.push("predictions carry a different run fingerprint".to_string());
    }
    Ok(diffs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub higher_is_better: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: Option<f64>,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub detector: String,
    pub dataset: String,
    pub attack: String,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub schema_version: String,
    pub columns: Vec<Column>,
    pub rows: Vec<ComparisonRow>,
}

/// Metric columns in display order, with their direction.
pub const COMPARE_COLUMNS: [(&str, bool); 11] = [
    ("accuracy", true),
    ("precision", true),
    ("recall", true),
    ("f1", true),
    ("auroc", true),
    ("aupr", true),
    ("tpr_fpr_0.01", true),
    ("tpr_fpr_0.001", true),
    ("asr", false),
    ("mean_latency_ms", false),
    ("gpu_peak_gib", false),
];

fn column_value(r: &EvalReport, name: &str) -> Option<f64> {
    let e = &r.effectiveness;
    match name {
        "accuracy" => e.accuracy.value(),
        "precision" => e.precision.value(),
        "recall" => e.recall.value(),
        "f1" => e.f1.value(),
        "auroc" => e.auroc.value(),
        "aupr" => e.aupr.value(),
        "tpr_fpr_0.01" => e.tpr_at_fpr.get(&fpr_key(0.01)).and_then(|o| o.tpr.value()),
        "tpr_fpr_0.001" => e.tpr_at_fpr.get(&fpr_key(0.001)).and_then(|o| o.tpr.value()),
        "asr" => r.asr.as_ref().and_then(|a| a.asr.value()),
        "mean_latency_ms" => r.efficiency.mean_latency_ms.value(),
        "gpu_peak_gib" => r.efficiency.gpu_peak_gib,
        _ => None,
    }
}

/// Rows sorted by (detector, dataset, attack). Best values are marked per
/// column among rows of the same attack group. Columns without any value in
/// any row are dropped.
pub fn compare(reports: &[EvalReport], allow_mixed: bool) -> Result<ComparisonTable, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::NothingToCompare);
    }
    let fps: BTreeSet<&str> = reports.iter().map(|r| r.dataset_fingerprint.as_str()).collect();
    if fps.len() > 1 && !allow_mixed {
        let short: Vec<String> = fps.iter().map(|f| f.chars().take(12).collect()).collect();
        return Err(ReportError::MixedDatasets(short.join(", ")));
    }
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| (&a.detector, &a.dataset, &a.attack).cmp(&(&b.detector, &b.dataset, &b.attack)));
    let columns: Vec<Column> = COMPARE_COLUMNS
        .iter()
        .filter(|(name, _)| sorted.iter().any(|r| column_value(r, name).is_some()))
        .map(|&(name, hib)| Column { name: name.to_string(), higher_is_better: hib })
        .collect();
    let mut rows: Vec<ComparisonRow> = sorted
        .iter()
        .map(|r| ComparisonRow {
            detector: r.detector.clone(),
            dataset: r.dataset.clone(),
            attack: r.attack.clone(),
            cells: columns.iter().map(|c| Cell { value: column_value(r, &c.name), best: false }).collect(),
        })
        .collect();
    let groups: BTreeSet<String> = rows.iter().map(|r| r.attack.clone()).collect();
    for group in groups {
        for (ci, col) in columns.iter().enumerate() {
            let vals = rows.iter().filter(|r| r.attack == group).filter_map(|r| r.cells[ci].value);
            let best = if col.higher_is_better { vals.reduce(f64::max) } else { vals.reduce(f64::min) };
            if let Some(best) = best {
                for row in rows.iter_mut().filter(|r| r.attack == group) {
                    if row.cells[ci].value == Some(best) {
                        row.cells[ci].best = true;
                    }
                }
            }
        }
    }
    Ok(ComparisonTable { schema_version: SCHEMA_VERSION.to_string(), columns, rows })
}

impl ComparisonTable {
    /// Plain-text table; best cells carry a trailing `*`, absent cells show `-`.
    pub fn render(&self) -> String {
        let mut header = vec!["detector".to_string(), "dataset".into(), "attack".into()];
        header.extend(self.columns.iter().map(|c| format!("{}{}", c.name, if c.higher_is_better { "↑" } else { "↓" })));
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.detector.clone(), r.dataset.clone(), r.attack.clone()];
                row.extend(r.cells.iter().map(|c| match c.value {
                    Some(v) => format!("{v:.4}{}", if c.best { "*" } else { "" }),
                    None => "-".into(),
                }));
                row
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| body.iter().map(|r| r[i].chars().count()).chain([header[i].chars().count()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in std::iter::once(&header).chain(body.iter()) {
            let line: Vec<String> =
                row.iter().zip(&widths).map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count()))).collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Confusion, DEFAULT_FPR_LEVELS};

    fn pred(id: &str, y: u8, s: f64, y_pred: u8) -> Prediction {
        Prediction {
            record_id: id.into(),
            y_true: y,
            score: s,
            effective_score: s,
            probability: 0.5,
            y_pred,
            attack: None,
            base_id: None,
            latency_ms: 2.0,
            source: Some("wiki".into()),
            lang: None,
            model: None,
        }
    }

    fn eff() -> Efficiency {
        Efficiency {
            n: 0,
            wall_seconds: 1.0,
            throughput_per_s: Metric::Value(20.0),
            mean_latency_ms: Metric::Value(2.0),
            gpu_peak_gib: None,
        }
    }

    fn fixture() -> (Vec<Prediction>, Vec<Prediction>) {
        let clean: Vec<Prediction> = (0..20)
            .map(|i| {
                let y = (i % 2) as u8;
                let s = i as f64 / 20.0 + f64::from(y) * 0.3;
                pred(&format!("r{i}"), y, s, u8::from(s >= 0.5))
            })
            .collect();
        let attacked: Vec<Prediction> = clean
            .iter()
            .filter(|p| p.y_true == 1)
            .map(|p| {
                let mut v = pred(&format!("{}#typo_mixed", p.record_id), 1, p.score - 0.2, u8::from(p.score - 0.2 >= 0.5));
                v.attack = Some("typo_mixed".into());
                v.base_id = Some(p.record_id.clone());
                v
            })
            .collect();
        (clean, attacked)
    }

    fn inputs<'a>(clean: &'a [Prediction], attacked: &'a [Prediction]) -> ReportInputs<'a> {
        ReportInputs {
            detector: "likelihood",
            dataset: "test",
            dataset_fingerprint: "dfp",
            calibration_fingerprint: "cfp",
            clean,
            clean_efficiency: eff(),
            attacked,
            attacked_efficiency: Some(eff()),
            attacked_calibration_fingerprint: None,
            slices: &[SliceKey::Source],
            fpr_levels: &DEFAULT_FPR_LEVELS,
        }
    }

    fn write_fixture(dir: &Path) -> RunArtifacts {
        let (clean, attacked) = fixture();
        let reports = build_reports(&inputs(&clean, &attacked)).unwrap();
        let lines: Vec<PredictionLine> = clean
            .iter()
            .chain(&attacked)
            .map(|p| PredictionLine { run_fingerprint: "run".into(), detector: "likelihood".into(), prediction: p.clone() })
            .collect();
        let mut report = RunReport {
            schema_version: SCHEMA_VERSION.into(),
            run_fingerprint: "run".into(),
            detector: "likelihood".into(),
            scorer: None,
            calibration_fingerprint: "cfp".into(),
            dataset_fingerprint: "dfp".into(),
            predictions_fingerprint: String::new(),
            dataset_manifest_fingerprint: None,
            reports,
        };
        let mut manifest = DatasetManifest::new("evaluate", 0);
        write_run(dir, &mut manifest, &lines, &mut report).unwrap();
        read_run(dir).unwrap()
    }

    #[test]
    fn round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let run = write_fixture(dir.path());
        for f in [MANIFEST_FILE, PREDICTIONS_FILE, REPORT_JSON, REPORT_CSV] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        assert_eq!(run.predictions.len(), 30);
        assert_eq!(run.report.reports.len(), 2);
        assert_eq!(run.manifest.fingerprints.len(), 3);
        let again = read_run(dir.path()).unwrap();
        assert_eq!(again, run);
        let header = run.csv.lines().next().unwrap();
        assert_eq!(header, CSV_COLUMNS.join(","));
    }

    #[test]
    fn audit_is_clean_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = write_fixture(dir.path());
        assert_eq!(audit(&run).unwrap(), Vec::<String>::new());
        run.predictions[0].prediction.y_pred ^= 1;
        assert!(!audit(&run).unwrap().is_empty());
    }

    #[test]
    fn attack_rows_carry_asr() {
        let (clean, attacked) = fixture();
        let reports = build_reports(&inputs(&clean, &attacked)).unwrap();
        let asr = reports[1].asr.as_ref().unwrap();
        let denom = clean.iter().filter(|p| p.y_true == 1 && p.y_pred == 1).count();
        let flipped = clean
            .iter()
            .filter(|p| p.y_true == 1 && p.y_pred == 1)
            .filter(|p| attacked.iter().any(|a| a.base_id.as_deref() == Some(&p.record_id) && a.y_pred == 0))
            .count();
        assert_eq!((asr.denominator, asr.flipped), (denom, flipped));
        assert_eq!(reports[1].effectiveness.n, 20);
        let mut mismatch = inputs(&clean, &attacked);
        mismatch.attacked_calibration_fingerprint = Some("other");
        assert!(matches!(build_reports(&mismatch), Err(ReportError::Metrics(MetricsError::ThresholdMismatch { .. }))));
    }

    fn report(detector: &str, acc: f64, lat: f64, auroc: Option<f64>) -> EvalReport {
        let m = |v: f64| Metric::Value(v);
        EvalReport {
            detector: detector.into(),
            dataset: "test".into(),
            dataset_fingerprint: "dfp".into(),
            calibration_fingerprint: "c".into(),
            attack: CLEAN_GROUP.into(),
            effectiveness: crate::metrics::Effectiveness {
                n: 10,
                positives: 5,
                negatives: 5,
                confusion: Confusion::default(),
                accuracy: m(acc),
                precision: m(acc),
                recall: m(acc),
                f1: m(acc),
                auroc: auroc.map(m).unwrap_or(Metric::absent("x")),
                aupr: Metric::absent("x"),
                tpr_at_fpr: BTreeMap::new(),
            },
            asr: None,
            efficiency: Efficiency {
                n: 10,
                wall_seconds: 1.0,
                throughput_per_s: m(1.0),
                mean_latency_ms: m(lat),
                gpu_peak_gib: None,
            },
            slices: BTreeMap::new(),
        }
    }

    #[test]
    fn compare_single_report_all_best() {
        let t = compare(&[report("a", 0.8, 3.0, Some(0.9))], false).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert!(t.rows[0].cells.iter().all(|c| c.best));
    }

    #[test]
    fn compare_best_markers_match_scan() {
        let reports = vec![report("c", 0.7, 1.0, Some(0.95)), report("a", 0.9, 5.0, None), report("b", 0.9, 2.0, Some(0.5))];
        let t = compare(&reports, false).unwrap();
        assert_eq!(t.rows.iter().map(|r| r.detector.as_str()).collect::<Vec<_>>(), vec!["a", "b", "c"]);
        for (ci, col) in t.columns.iter().enumerate() {
            let vals: Vec<Option<f64>> = t.rows.iter().map(|r| r.cells[ci].value).collect();
            let mut best: Option<f64> = None;
            for v in vals.iter().flatten() {
                best = Some(match best {
                    None => *v,
                    Some(b) if col.higher_is_better => if *v > b { *v } else { b },
                    Some(b) => if *v < b { *v } else { b },
                });
            }
            for (r, v) in t.rows.iter().zip(&vals) {
                assert_eq!(r.cells[ci].best, v.is_some() && *v == best, "{} {}", col.name, r.detector);
            }
        }
        // a has no auroc: the union of columns still includes it, with an absent cell
        let ai = t.columns.iter().position(|c| c.name == "auroc").unwrap();
        assert_eq!(t.rows[0].cells[ai].value, None);
        assert!(t.render().contains('-'));
    }

    #[test]
    fn compare_rejects_mixed_datasets() {
        let mut other = report("b", 0.5, 1.0, None);
        other.dataset_fingerprint = "different".into();
        let reports = vec![report("a", 0.5, 1.0, None), other];
        assert!(matches!(compare(&reports, false), Err(ReportError::MixedDatasets(_))));
        assert_eq!(compare(&reports, true).unwrap().rows.len(), 2);
        assert!(matches!(compare(&[], false), Err(ReportError::NothingToCompare)));
    }

    #[test]
    fn masking() {
        let mut v = serde_json::json!({"a": 1, "latency_ms": 3.5, "inner": [{"wall_seconds": 2}]});
        mask_volatile(&mut v);
        assert_eq!(v, serde_json::json!({"a": 1, "latency_ms": null, "inner": [{"wall_seconds": null}]}));
        let csv_text = format!("{}\nx,d,clean,1,1,1,1,1,1,1,1,,3.2,100,\n", CSV_COLUMNS.join(","));
        let masked = mask_volatile_csv(&csv_text);
        assert!(masked.ends_with("x,d,clean,1,1,1,1,1,1,1,1,,,,\n"), "{masked}");
    }
}
