//! Canonical record schema, dataset loaders for the supported input shapes,
//! normalization, stratified splitting and standardized persistence.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::fingerprint::{derive_seed, sha256_hex};

pub const SCHEMA_VERSION: &str = "forgeval/1";

/// File names that directory discovery never treats as data.
pub const RESERVED_FILE_NAMES: &[&str] = &["manifest.json", "provenance.jsonl", "predictions.jsonl", "report.json"];

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid JSON: {message}")]
    Json { path: String, line: usize, message: String },
    #[error("{path}: invalid CSV: {message}")]
    Csv { path: String, message: String },
    #[error("{path}: item {index} matches none of the supported dataset structures")]
    UnrecognizedStructure { path: String, index: usize },
    #[error("{path}: unsupported file extension (expected .jsonl, .json or .csv)")]
    UnsupportedExtension { path: String },
    #[error("invalid split ratio: {0}")]
    InvalidRatio(String),
    #[error("cannot split an empty record list")]
    EmptyInput,
}

/// Binary detection label. Serialized as the integer `0` or `1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Human = 0,
    Machine = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_machine(self) -> bool {
        self == Label::Machine
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Human),
            1 => Ok(Label::Machine),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Human => "human",
            Label::Machine => "machine",
        })
    }
}

/// One text sample in the standardized binary-detection schema.
///
/// Serializes to exactly the seven standardized fields; absent optional fields are
/// written as `null`. `extra` holds unrecognized input fields and is dropped by
/// [`normalize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text: String,
    pub label: Label,
    pub source: Option<String>,
    pub lang: Option<String>,
    pub model: Option<String>,
    pub attack: Option<String>,
    #[serde(skip)]
    pub extra: BTreeMap<String, Value>,
}

impl Record {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Label) -> Self {
        Record {
            id: id.into(),
            text: text.into(),
            label,
            source: None,
            lang: None,
            model: None,
            attack: None,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatHint {
    Flat,
    Hc3,
    Paired,
    AttackPaired,
    Standardized,
    Auto,
}

impl FromStr for FormatHint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "flat" => FormatHint::Flat,
            "hc3" => FormatHint::Hc3,
            "paired" => FormatHint::Paired,
            "attack_paired" => FormatHint::AttackPaired,
            "standardized" => FormatHint::Standardized,
            "auto" => FormatHint::Auto,
            other => return Err(format!("unknown dataset format {other:?}")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadWarning {
    pub path: String,
    pub index: usize,
    pub message: String,
}

impl fmt::Display for LoadWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]: {}", self.path, self.index, self.message)
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadedDataset {
    pub records: Vec<Record>,
    pub warnings: Vec<LoadWarning>,
}

/// Loads a file or (recursively) a directory of `.jsonl`, `.json` and `.csv` files.
///
/// Directory entries are read in lexicographic path order. Ids missing from the input
/// are synthesized from the file path (relative to the loaded root) and item index.
pub fn load_dataset(path: &Path, hint: FormatHint) -> Result<LoadedDataset, SchemaError> {
    let meta = fs::metadata(path).map_err(|source| SchemaError::Io { path: path.display().to_string(), source })?;
    let (root, files) = if meta.is_dir() {
        let mut files = Vec::new();
        for entry in walkdir::WalkDir::new(path).follow_links(true) {
            let entry = entry.map_err(|e| SchemaError::Io {
                path: path.display().to_string(),
                source: e.into(),
            })?;
            if entry.file_type().is_file() && is_data_file(entry.path()) {
                files.push(entry.into_path());
            }
        }
        files.sort();
        (path.to_path_buf(), files)
    } else {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (root, vec![path.to_path_buf()])
    };

    let mut out = LoadedDataset::default();
    let mut seen = HashSet::new();
    for file in files {
        let rel = relative_name(&root, &file);
        let items = read_items(&file, &rel)?;
        for (index, item) in items.into_iter().enumerate() {
            let mut ctx = ItemContext { rel: &rel, index, warnings: &mut out.warnings };
            for record in ctx.parse(item, hint)? {
                if seen.insert(record.id.clone()) {
                    out.records.push(record);
                } else {
                    ctx.warn(format!("duplicate id {:?} skipped", record.id));
                }
            }
        }
    }
    Ok(out)
}

fn is_data_file(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if RESERVED_FILE_NAMES.contains(&name) || name.ends_with(".manifest.json") || name.starts_with('.') {
        return false;
    }
    matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json" | "csv"))
}

fn relative_name(root: &Path, file: &Path) -> String {
    let rel = file.strip_prefix(root).unwrap_or(file);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Deterministic id for an item lacking one.
pub fn synthesize_id(rel_path: &str, index: &str) -> String {
    let digest = sha256_hex(format!("{rel_path}\u{0}{index}").as_bytes());
    format!("r-{}", &digest[..16])
}

fn read_items(file: &Path, rel: &str) -> Result<Vec<Value>, SchemaError> {
    let io_err = |source| SchemaError::Io { path: rel.to_string(), source };
    match file.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => {
            let content = fs::read_to_string(file).map_err(io_err)?;
            let mut items = Vec::new();
            for (n, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let value = serde_json::from_str(line).map_err(|e| SchemaError::Json {
                    path: rel.to_string(),
                    line: n + 1,
                    message: e.to_string(),
                })?;
                items.push(value);
            }
            Ok(items)
        }
        Some("json") => {
            let content = fs::read_to_string(file).map_err(io_err)?;
            if content.trim().is_empty() {
                return Ok(Vec::new());
            }
            let value: Value = serde_json::from_str(&content).map_err(|e| SchemaError::Json {
                path: rel.to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
            match value {
                Value::Array(items) => Ok(items),
                obj @ Value::Object(_) => Ok(vec![obj]),
                _ => Err(SchemaError::UnrecognizedStructure { path: rel.to_string(), index: 0 }),
            }
        }
        Some("csv") => read_csv_items(file, rel),
        _ => Err(SchemaError::UnsupportedExtension { path: rel.to_string() }),
    }
}

fn read_csv_items(file: &Path, rel: &str) -> Result<Vec<Value>, SchemaError> {
    let csv_err = |e: csv::Error| SchemaError::Csv { path: rel.to_string(), message: e.to_string() };
    let mut reader = csv::Reader::from_path(file).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    if !headers.iter().any(|h| h == "text") || !headers.iter().any(|h| h == "label") {
        return Err(SchemaError::Csv {
            path: rel.to_string(),
            message: "header must contain the columns text and label".into(),
        });
    }
    let mut items = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        let mut obj = Map::new();
        for (key, cell) in headers.iter().zip(row.iter()) {
            // empty optional cells mean "absent"; text and label stay so the record
            // parser can report them
            if cell.is_empty() && key != "text" && key != "label" {
                continue;
            }
            obj.insert(key.to_string(), Value::String(cell.to_string()));
        }
        items.push(Value::Object(obj));
    }
    Ok(items)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Flat,
    Hc3,
    Paired,
    AttackPaired,
}

fn detect_shape(obj: &Map<String, Value>) -> Option<Shape> {
    if obj.contains_key("human_answers") || obj.contains_key("chatgpt_answers") {
        return Some(Shape::Hc3);
    }
    if obj.get("meta").is_some_and(Value::is_object) && obj.get("sample").is_some_and(Value::is_array) {
        return Some(Shape::AttackPaired);
    }
    if PAIRED_KEYS.iter().any(|k| obj.get(*k).is_some_and(Value::is_array)) {
        return Some(Shape::Paired);
    }
    if obj.contains_key("text") || obj.contains_key("label") {
        return Some(Shape::Flat);
    }
    None
}

const PAIRED_KEYS: &[&str] = &["original", "sample", "sampled", "rewritten"];
const RECORD_KEYS: &[&str] = &["id", "text", "label", "source", "lang", "model", "attack"];

struct ItemContext<'a> {
    rel: &'a str,
    index: usize,
    warnings: &'a mut Vec<LoadWarning>,
}

impl ItemContext<'_> {
    fn warn(&mut self, message: String) {
        self.warnings.push(LoadWarning { path: self.rel.to_string(), index: self.index, message });
    }

    fn unrecognized(&self) -> SchemaError {
        SchemaError::UnrecognizedStructure { path: self.rel.to_string(), index: self.index }
    }

    fn parse(&mut self, item: Value, hint: FormatHint) -> Result<Vec<Record>, SchemaError> {
        let Value::Object(obj) = item else {
            return Err(self.unrecognized());
        };
        let detected = detect_shape(&obj);
        let shape = match hint {
            FormatHint::Auto => detected.ok_or_else(|| self.unrecognized())?,
            FormatHint::Flat | FormatHint::Standardized => Shape::Flat,
            FormatHint::Hc3 => Shape::Hc3,
            FormatHint::Paired => Shape::Paired,
            FormatHint::AttackPaired => Shape::AttackPaired,
        };
        if hint != FormatHint::Auto && shape != Shape::Flat && detected != Some(shape) {
            return Err(self.unrecognized());
        }
        if hint == FormatHint::Standardized && !obj.contains_key("id") {
            self.warn("standardized record without id skipped".into());
            return Ok(Vec::new());
        }
        Ok(match shape {
            Shape::Flat => {
                let id = synthesize_id(self.rel, &self.index.to_string());
                self.flat_record(&obj, None, id).into_iter().collect()
            }
            Shape::Hc3 => self.hc3_records(obj),
            Shape::Paired => self.paired_records(&obj),
            Shape::AttackPaired => self.attack_paired_records(&obj),
        })
    }

    /// Parses one flat record object. `forced_label` overrides any label field.
    fn flat_record(&mut self, obj: &Map<String, Value>, forced_label: Option<Label>, fallback_id: String) -> Option<Record> {
        let text = match obj.get("text") {
            Some(Value::String(t)) if !t.trim().is_empty() => t.clone(),
            _ => {
                self.warn("record with missing or empty text skipped".into());
                return None;
            }
        };
        let label = match forced_label {
            Some(l) => l,
            None => match obj.get("label").map(parse_label) {
                Some(Some(l)) => l,
                Some(None) => {
                    self.warn(format!("record with invalid label {} skipped", obj["label"]));
                    return None;
                }
                None => {
                    self.warn("record without label skipped".into());
                    return None;
                }
            },
        };
        let id = obj.get("id").and_then(scalar_string).unwrap_or(fallback_id);
        let mut record = Record::new(id, text, label);
        record.source = obj.get("source").and_then(scalar_string);
        record.lang = obj.get("lang").and_then(scalar_string);
        record.model = obj.get("model").and_then(scalar_string);
        record.attack = obj.get("attack").and_then(scalar_string);
        if record.attack.is_some() && label == Label::Human {
            self.warn(format!("human record {:?} carries an attack field; skipped", record.id));
            return None;
        }
        record.extra = obj
            .iter()
            .filter(|(k, _)| !RECORD_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Some(record)
    }

    fn hc3_records(&mut self, mut obj: Map<String, Value>) -> Vec<Record> {
        let human = obj.remove("human_answers");
        let machine = obj.remove("chatgpt_answers");
        let base_id = obj.get("id").and_then(scalar_string);
        let source = obj.get("source").and_then(scalar_string);
        let lang = obj.get("lang").and_then(scalar_string);
        let extra: BTreeMap<String, Value> = obj
            .into_iter()
            .filter(|(k, _)| !RECORD_KEYS.contains(&k.as_str()))
            .collect();

        let mut out = Vec::new();
        for (answers, label, tag) in [(human, Label::Human, "h"), (machine, Label::Machine, "m")] {
            let answers = match answers {
                None | Some(Value::Null) => continue,
                Some(Value::Array(a)) => a,
                Some(_) => {
                    self.warn(format!("HC3 field for label {label} is not an array; skipped"));
                    continue;
                }
            };
            for (j, answer) in answers.into_iter().enumerate() {
                let text = match answer {
                    Value::String(t) if !t.trim().is_empty() => t,
                    _ => {
                        self.warn(format!("HC3 answer {tag}{j} has no text; skipped"));
                        continue;
                    }
                };
                let id = match &base_id {
                    Some(b) => format!("{b}-{tag}{j}"),
                    None => synthesize_id(self.rel, &format!("{}:{tag}{j}", self.index)),
                };
                let mut r = Record::new(id, text, label);
                r.source = source.clone();
                r.lang = lang.clone();
                if label == Label::Machine {
                    r.model = Some("chatgpt".into());
                }
                r.extra = extra.clone();
                out.push(r);
            }
        }
        out
    }

    fn paired_records(&mut self, obj: &Map<String, Value>) -> Vec<Record> {
        let mut out = Vec::new();
        for key in PAIRED_KEYS {
            let Some(Value::Array(items)) = obj.get(*key) else { continue };
            let label = if *key == "original" { Label::Human } else { Label::Machine };
            for (j, item) in items.iter().enumerate() {
                let fallback = synthesize_id(self.rel, &format!("{}:{key}:{j}", self.index));
                let item_obj = match item {
                    Value::String(t) => {
                        let mut m = Map::new();
                        m.insert("text".into(), Value::String(t.clone()));
                        m
                    }
                    Value::Object(m) => m.clone(),
                    _ => {
                        self.warn(format!("paired item {key}[{j}] is neither text nor object; skipped"));
                        continue;
                    }
                };
                if let Some(r) = self.flat_record(&item_obj, Some(label), fallback) {
                    out.push(r);
                }
            }
        }
        out
    }

    fn attack_paired_records(&mut self, obj: &Map<String, Value>) -> Vec<Record> {
        let meta = obj.get("meta").and_then(Value::as_object).cloned().unwrap_or_default();
        let base_id = meta
            .get("base_id")
            .and_then(scalar_string)
            .unwrap_or_else(|| synthesize_id(self.rel, &self.index.to_string()));
        let active = meta.get("active_attack").and_then(scalar_string);
        let items = obj.get("sample").and_then(Value::as_array).cloned().unwrap_or_default();
        let many = items.len() > 1;
        let mut out = Vec::new();
        for (j, item) in items.iter().enumerate() {
            let Some(item_obj) = item.as_object() else {
                self.warn(format!("attack sample {j} is not an object; skipped"));
                continue;
            };
            let attack = item_obj.get("attack").and_then(scalar_string).or_else(|| active.clone());
            let mut id = match &attack {
                Some(a) => format!("{base_id}#{a}"),
                None => base_id.clone(),
            };
            if many {
                id = format!("{id}:{j}");
            }
            if let Some(mut r) = self.flat_record(item_obj, Some(Label::Machine), id) {
                r.attack = attack;
                r.extra.insert("base_id".into(), Value::String(base_id.clone()));
                out.push(r);
            }
        }
        out
    }
}

fn scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn parse_label(v: &Value) -> Option<Label> {
    match v {
        Value::Number(n) => n.as_u64().and_then(|x| u8::try_from(x).ok()).and_then(|x| Label::try_from(x).ok()),
        Value::Bool(b) => Some(if *b { Label::Machine } else { Label::Human }),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "0" | "human" => Some(Label::Human),
            "1" | "machine" => Some(Label::Machine),
            _ => None,
        },
        _ => None,
    }
}

/// Outcome of [`normalize`]: records in standardized form plus counts of what was lost.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Normalized {
    pub records: Vec<Record>,
    pub dropped_fields: usize,
    pub dropped_records: usize,
}

/// Canonical text form: NFC, then surrounding whitespace trimmed.
pub fn canonical_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.trim().to_string()
}

fn canonical_field(field: Option<String>) -> Option<String> {
    field.map(|f| canonical_text(&f)).filter(|f| !f.is_empty())
}

/// Brings records into standardized form. Idempotent; order preserved.
pub fn normalize(records: Vec<Record>) -> Normalized {
    let mut out = Normalized::default();
    for mut r in records {
        r.text = canonical_text(&r.text);
        if r.text.is_empty() {
            out.dropped_records += 1;
            continue;
        }
        r.source = canonical_field(r.source);
        r.lang = canonical_field(r.lang);
        r.model = canonical_field(r.model);
        r.attack = canonical_field(r.attack);
        out.dropped_fields += r.extra.len();
        r.extra.clear();
        out.records.push(r);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// Train/validation/test proportions held as exact integer weights.
///
/// Parses `"8:1:1"`, `"0.8:0.1:0.1"` or a `{train, val, test}` table; weights are
/// reduced by their gcd so equal ratios compare equal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct SplitRatio {
    pub train: u64,
    pub val: u64,
    pub test: u64,
}

impl SplitRatio {
    pub fn new(train: u64, val: u64, test: u64) -> Result<Self, SchemaError> {
        let total = train
            .checked_add(val)
            .and_then(|t| t.checked_add(test))
            .ok_or_else(|| SchemaError::InvalidRatio("weights overflow".into()))?;
        if total == 0 {
            return Err(SchemaError::InvalidRatio("weights sum to zero".into()));
        }
        let g = gcd(gcd(train, val), test);
        Ok(SplitRatio { train: train / g, val: val / g, test: test / g })
    }

    pub fn total(&self) -> u64 {
        self.train + self.val + self.test
    }

    pub fn weight(&self, split: SplitName) -> u64 {
        match split {
            SplitName::Train => self.train,
            SplitName::Val => self.val,
            SplitName::Test => self.test,
        }
    }

    pub fn fraction(&self, split: SplitName) -> f64 {
        self.weight(split) as f64 / self.total() as f64
    }
}

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio { train: 8, val: 1, test: 1 }
    }
}

impl fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.val, self.test)
    }
}

impl FromStr for SplitRatio {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(SchemaError::InvalidRatio(format!("{s:?} is not of the form a:b:c")));
        }
        let decimals = parts.iter().map(|p| p.split_once('.').map_or(0, |(_, f)| f.len())).max().unwrap_or(0);
        if decimals > 9 {
            return Err(SchemaError::InvalidRatio(format!("{s:?} has too many decimal places")));
        }
        let scale = 10u64.pow(decimals as u32);
        let mut w = [0u64; 3];
        for (slot, part) in w.iter_mut().zip(&parts) {
            let (int, frac) = part.split_once('.').unwrap_or((part, ""));
            let bad = || SchemaError::InvalidRatio(format!("{part:?} is not a non-negative number"));
            if int.is_empty() && frac.is_empty() {
                return Err(bad());
            }
            let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
            let frac_val: u64 = if frac.is_empty() {
                0
            } else {
                let padded = format!("{frac:0<width$}", width = decimals);
                padded.parse().map_err(|_| bad())?
            };
            *slot = int
                .checked_mul(scale)
                .and_then(|v| v.checked_add(frac_val))
                .ok_or_else(|| SchemaError::InvalidRatio("weights overflow".into()))?;
        }
        SplitRatio::new(w[0], w[1], w[2])
    }
}

impl<'de> Deserialize<'de> for SplitRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Table { train: u64, val: u64, test: u64 },
            Triple([u64; 3]),
        }
        let ratio = match Repr::deserialize(d)? {
            Repr::Text(s) => s.parse(),
            Repr::Table { train, val, test } => SplitRatio::new(train, val, test),
            Repr::Triple([a, b, c]) => SplitRatio::new(a, b, c),
        };
        ratio.map_err(serde::de::Error::custom)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestStatus {
    Started,
    Complete,
    Failed,
}

/// Reproducibility envelope written next to every produced artifact set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: String,
    pub stage: String,
    pub status: ManifestStatus,
    pub seed: u64,
    pub split_ratios: Option<SplitRatio>,
    pub split_membership: BTreeMap<String, SplitName>,
    pub source_paths: Vec<String>,
    pub config_snapshot: BTreeMap<String, Value>,
    #[serde(default)]
    pub artifacts: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// sha256 of each written artifact, by file name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fingerprints: BTreeMap<String, String>,
    /// Fingerprints of the artifacts this stage consumed, by role.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, String>,
    /// Stage-specific metadata (generation stats, attack counts, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: String,
}

impl DatasetManifest {
    pub fn new(stage: &str, seed: u64) -> Self {
        DatasetManifest {
            schema_version: SCHEMA_VERSION.to_string(),
            stage: stage.to_string(),
            status: ManifestStatus::Started,
            seed,
            split_ratios: None,
            split_membership: BTreeMap::new(),
            source_paths: Vec::new(),
            config_snapshot: BTreeMap::new(),
            artifacts: Vec::new(),
            warnings: Vec::new(),
            fingerprints: BTreeMap::new(),
            inputs: BTreeMap::new(),
            details: BTreeMap::new(),
            error: None,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), SchemaError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    /// Content fingerprint ignoring the timestamp.
    pub fn fingerprint(&self) -> String {
        let mut m = self.clone();
        m.created_at.clear();
        crate::fingerprint::fingerprint_of(&m)
    }

    pub fn read(path: &Path) -> Result<Self, SchemaError> {
        let text = fs::read_to_string(path).map_err(|source| SchemaError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|e| SchemaError::Json {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SplitOutcome {
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

impl SplitOutcome {
    pub fn part(&self, split: SplitName) -> &[Record] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Stratified, seeded train/val/test split.
///
/// Per label, members are ordered by id and shuffled with a stream keyed by
/// `(seed, label)`, so membership depends only on the ids, ratios and seed. Output
/// lists keep input order.
pub fn split(records: &[Record], ratios: SplitRatio, seed: u64) -> Result<SplitOutcome, SchemaError> {
    if records.is_empty() {
        return Err(SchemaError::EmptyInput);
    }
    let mut by_label: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, r) in records.iter().enumerate() {
        by_label[r.label.as_u8() as usize].push(i);
    }
    let counts = [by_label[0].len() as u64, by_label[1].len() as u64];
    let quotas = stratified_quotas(counts, &ratios);

    let mut assignment = vec![SplitName::Train; records.len()];
    for (label, members) in by_label.iter_mut().enumerate() {
        members.sort_by(|&a, &b| records[a].id.cmp(&records[b].id));
        let mut rng = ChaCha8Rng::from_seed(derive_seed(seed, &format!("split/{label}")));
        members.shuffle(&mut rng);
        let [q_train, q_val, _] = quotas[label];
        for (pos, &idx) in members.iter().enumerate() {
            let pos = pos as u64;
            assignment[idx] = if pos < q_train {
                SplitName::Train
            } else if pos < q_train + q_val {
                SplitName::Val
            } else {
                SplitName::Test
            };
        }
    }

    let mut outcome = SplitOutcome {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        manifest: DatasetManifest::new("split", seed),
        warnings: Vec::new(),
    };
    for (r, &s) in records.iter().zip(&assignment) {
        outcome.manifest.split_membership.insert(r.id.clone(), s);
        match s {
            SplitName::Train => outcome.train.push(r.clone()),
            SplitName::Val => outcome.val.push(r.clone()),
            SplitName::Test => outcome.test.push(r.clone()),
        }
    }
    for s in SplitName::ALL {
        if outcome.part(s).is_empty() {
            outcome.warnings.push(format!(
                "{} split is empty ({} records at ratio {ratios})",
                s.as_str(),
                records.len()
            ));
        }
    }
    outcome.manifest.split_ratios = Some(ratios);
    outcome.manifest.warnings = outcome.warnings.clone();
    Ok(outcome)
}

/// Per-label split sizes: each cell is the floor or ceiling of `count·ratio`, each
/// label's cells sum to its count, and each split total is the floor or ceiling of
/// `N·ratio`. Among such roundings the one closest to the exact targets is taken.
fn stratified_quotas(counts: [u64; 2], ratios: &SplitRatio) -> [[u64; 3]; 2] {
    let w = [ratios.train, ratios.val, ratios.test];
    let total_w = ratios.total() as i128;
    let n_total: u64 = counts.iter().sum();

    // cell choices: (floor, ceil) of n_c * w_s / W
    let bounds: Vec<[u64; 2]> = counts
        .iter()
        .flat_map(|&n| {
            w.iter().map(move |&ws| {
                let num = n as u128 * ws as u128;
                let floor = (num / total_w as u128) as u64;
                let ceil = floor + u64::from(num % total_w as u128 != 0);
                [floor, ceil]
            })
        })
        .collect();

    let mut best: Option<(i128, [[u64; 3]; 2])> = None;
    for mask in 0u32..64 {
        let mut q = [[0u64; 3]; 2];
        for cell in 0..6 {
            q[cell / 3][cell % 3] = bounds[cell][((mask >> cell) & 1) as usize];
        }
        if (0..2).any(|c| q[c].iter().sum::<u64>() != counts[c]) {
            continue;
        }
        let totals_ok = (0..3).all(|s| {
            let scaled = (q[0][s] + q[1][s]) as i128 * total_w;
            (scaled - n_total as i128 * w[s] as i128).abs() < total_w
        });
        if !totals_ok {
            continue;
        }
        let cost: i128 = (0..6)
            .map(|cell| {
                let d = q[cell / 3][cell % 3] as i128 * total_w - counts[cell / 3] as i128 * w[cell % 3] as i128;
                d * d
            })
            .sum();
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, q));
        }
    }
    best.map(|(_, q)| q).unwrap_or_else(|| {
        // unreachable for two labels; fall back to independent largest-remainder rounding
        let mut q = [[0u64; 3]; 2];
        for c in 0..2 {
            q[c] = largest_remainder(counts[c], &w);
        }
        q
    })
}

fn largest_remainder(n: u64, w: &[u64; 3]) -> [u64; 3] {
    let total: u128 = w.iter().map(|&x| x as u128).sum();
    let mut q = [0u64; 3];
    let mut rems = [(0u128, 0usize); 3];
    for s in 0..3 {
        let num = n as u128 * w[s] as u128;
        q[s] = (num / total) as u64;
        rems[s] = (num % total, s);
    }
    let mut left = n - q.iter().sum::<u64>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, s) in &rems {
        if left == 0 {
            break;
        }
        q[s] += 1;
        left -= 1;
    }
    q
}

/// Serializes records one per line in the standardized seven-field shape.
pub fn records_to_jsonl(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_records_jsonl(path: &Path, records: &[Record]) -> Result<(), SchemaError> {
    write_atomic(path, records_to_jsonl(records).as_bytes())
}

/// Writes `records` to `out_path` and the manifest to `manifest.json` beside it.
pub fn save_standardized(records: &[Record], manifest: &DatasetManifest, out_path: &Path) -> Result<Vec<PathBuf>, SchemaError> {
    let dir = out_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|source| SchemaError::Write { path: dir.display().to_string(), source })?;
    write_records_jsonl(out_path, records)?;
    let manifest_path = dir.join("manifest.json");
    manifest.write(&manifest_path)?;
    Ok(vec![out_path.to_path_buf(), manifest_path])
}

/// Writes via a temporary sibling and rename so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SchemaError> {
    let werr = |source| SchemaError::Write { path: path.display().to_string(), source };
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(werr)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or_default()
    ));
    {
        let file = fs::File::create(&tmp).map_err(werr)?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(werr)?;
        w.flush().map_err(werr)?;
    }
    fs::rename(&tmp, path).map_err(werr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
        let p = dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).unwrap();
        }
        fs::write(&p, content).unwrap();
        p
    }

    fn records(n: usize, machine_every: usize) -> Vec<Record> {
        (0..n)
            .map(|i| {
                let label = if i % machine_every == 0 { Label::Machine } else { Label::Human };
                Record::new(format!("id{i:05}"), format!("text {i}"), label)
            })
            .collect()
    }

    #[test]
    fn hc3_expands_answers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "hc3.jsonl",
            r#"{"human_answers":["a"],"chatgpt_answers":["b","c"],"source":"s"}"#,
        );
        let loaded = load_dataset(&p, FormatHint::Auto).unwrap();
        assert_eq!(loaded.records.len(), 3);
        let labels: Vec<u8> = loaded.records.iter().map(|r| r.label.as_u8()).collect();
        assert_eq!(labels, vec![0, 1, 1]);
        assert!(loaded.records.iter().all(|r| r.source.as_deref() == Some("s")));
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn empty_directory_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let loaded = load_dataset(dir.path(), FormatHint::Auto).unwrap();
        assert!(loaded.records.is_empty());
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn csv_round_trips_through_standardized_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let csv = "text,label\nalpha,0\nbeta,1\n\"gamma, with comma\",0\ndelta,1\n\"eps \"\"quoted\"\"\",0\nzeta,1\n";
        let p = write(dir.path(), "flat.csv", csv);
        let first = load_dataset(&p, FormatHint::Auto).unwrap();
        assert_eq!(first.records.len(), 6);

        let out = dir.path().join("out/dataset.jsonl");
        save_standardized(&first.records, &DatasetManifest::new("test", 0), &out).unwrap();
        let second = load_dataset(&out, FormatHint::Standardized).unwrap();
        assert_eq!(first.records, second.records);

        let again = dir.path().join("again/dataset.jsonl");
        save_standardized(&second.records, &DatasetManifest::new("test", 0), &again).unwrap();
        assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn csv_requires_text_and_label_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.csv", "body,label\nx,0\n");
        assert!(matches!(load_dataset(&p, FormatHint::Auto), Err(SchemaError::Csv { .. })));
    }

    #[test]
    fn csv_unknown_columns_kept_as_extra() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "x.csv", "id,text,label,topic,model\na,hello,1,news,gpt\n");
        let loaded = load_dataset(&p, FormatHint::Auto).unwrap();
        let r = &loaded.records[0];
        assert_eq!(r.id, "a");
        assert_eq!(r.model.as_deref(), Some("gpt"));
        assert_eq!(r.extra.get("topic"), Some(&json!("news")));
    }

    #[test]
    fn paired_generation_labels() {
        let dir = tempfile::tempdir().unwrap();
        let obj = json!({
            "original": [{"text": "human one"}],
            "sample": [{"text": "machine one"}],
            "sampled": ["machine two"],
            "rewritten": [{"text": "machine three"}]
        });
        let p = write(dir.path(), "paired.json", &obj.to_string());
        let loaded = load_dataset(&p, FormatHint::Auto).unwrap();
        let labels: Vec<u8> = loaded.records.iter().map(|r| r.label.as_u8()).collect();
        assert_eq!(labels, vec![0, 1, 1, 1]);
        assert_eq!(loaded.records[2].text, "machine two");
    }

    #[test]
    fn attack_paired_sets_attack_and_lineage() {
        let dir = tempfile::tempdir().unwrap();
        let obj = json!({"sample": [{"text": "perturbed", "attack": "homoglyph"}], "meta": {"base_id": "b1", "active_attack": "homoglyph"}});
        let p = write(dir.path(), "a.jsonl", &obj.to_string());
        let loaded = load_dataset(&p, FormatHint::Auto).unwrap();
        let r = &loaded.records[0];
        assert_eq!(r.id, "b1#homoglyph");
        assert_eq!(r.label, Label::Machine);
        assert_eq!(r.attack.as_deref(), Some("homoglyph"));
    }

    #[test]
    fn missing_text_is_warned_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "f.jsonl", "{\"text\":\"ok\",\"label\":0}\n{\"label\":1}\n{\"text\":\"  \",\"label\":1}\n");
        let loaded = load_dataset(&p, FormatHint::Auto).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.warnings.len(), 2);
    }

    #[test]
    fn human_with_attack_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "f.jsonl", "{\"text\":\"x\",\"label\":0,\"attack\":\"typo_insert\"}\n");
        let loaded = load_dataset(&p, FormatHint::Auto).unwrap();
        assert!(loaded.records.is_empty());
        assert_eq!(loaded.warnings.len(), 1);
    }

    #[test]
    fn unrecognized_structure_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "f.jsonl", "{\"foo\":1}\n");
        assert!(matches!(
            load_dataset(&p, FormatHint::Auto),
            Err(SchemaError::UnrecognizedStructure { index: 0, .. })
        ));
        let p = write(dir.path(), "g.jsonl", "{\"text\":\"x\",\"label\":0}\n");
        assert!(matches!(
            load_dataset(&p, FormatHint::Hc3),
            Err(SchemaError::UnrecognizedStructure { .. })
        ));
    }

    #[test]
    fn directory_order_is_lexicographic_and_ids_stable() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "b/x.jsonl", "{\"text\":\"from b\",\"label\":0}\n");
        write(dir.path(), "a.jsonl", "{\"text\":\"from a\",\"label\":1}\n");
        write(dir.path(), "manifest.json", "{\"not\":\"data\"}");
        write(dir.path(), "notes.txt", "ignored");
        let loaded = load_dataset(dir.path(), FormatHint::Auto).unwrap();
        let texts: Vec<&str> = loaded.records.iter().map(|r| r.text.as_str()).collect();
        assert_eq!(texts, vec!["from a", "from b"]);
        let again = load_dataset(dir.path(), FormatHint::Auto).unwrap();
        assert_eq!(loaded.records, again.records);
        assert_eq!(loaded.records[1].id, synthesize_id("b/x.jsonl", "0"));
    }

    #[test]
    fn normalize_trims_and_composes() {
        let mut r = Record::new("a", "  hi\n", Label::Human);
        r.extra.insert("topic".into(), json!("x"));
        let n = normalize(vec![r, Record::new("b", "Cafe\u{301}", Label::Machine)]);
        assert_eq!(n.records[0].text, "hi");
        assert_eq!(n.records[1].text, "Caf\u{e9}");
        assert_eq!(n.dropped_fields, 1);
    }

    #[test]
    fn normalized_mixed_batch_has_seven_fields() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "1.jsonl", "{\"text\":\"a\",\"label\":0,\"extra\":1}\n{\"text\":\"b\",\"label\":\"machine\",\"model\":\"m\"}\n");
        write(dir.path(), "2.json", &json!([{"human_answers":["c","d"],"chatgpt_answers":["e"],"source":"q"}]).to_string());
        write(dir.path(), "3.json", &json!({"original":[{"text":"f"}],"sample":[{"text":"g"}],"rewritten":["h"]}).to_string());
        write(dir.path(), "4.csv", "text,label,lang\ni,0,en\nj,1,\n");
        let loaded = load_dataset(dir.path(), FormatHint::Auto).unwrap();
        let n = normalize(loaded.records);
        assert_eq!(n.records.len(), 10);
        for r in &n.records {
            let v = serde_json::to_value(r).unwrap();
            let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
            assert_eq!(keys.len(), 7, "{v}");
            for k in RECORD_KEYS {
                assert!(v.get(*k).is_some(), "missing {k} in {v}");
            }
        }
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("8:1:1".parse::<SplitRatio>().unwrap(), SplitRatio::new(8, 1, 1).unwrap());
        assert_eq!("0.8:0.1:0.1".parse::<SplitRatio>().unwrap(), SplitRatio::new(8, 1, 1).unwrap());
        assert_eq!("16:2:2".parse::<SplitRatio>().unwrap(), SplitRatio::default());
        assert!("0:0:0".parse::<SplitRatio>().is_err());
        assert!("1:-1:1".parse::<SplitRatio>().is_err());
        assert!("1:1".parse::<SplitRatio>().is_err());
        let from_toml: SplitRatio = toml::from_str::<BTreeMap<String, SplitRatio>>("r = [7, 2, 1]").unwrap()["r"];
        assert_eq!(from_toml, SplitRatio::new(7, 2, 1).unwrap());
    }

    #[test]
    fn split_2000_is_1600_200_200() {
        let recs = records(2000, 2);
        let out = split(&recs, SplitRatio::default(), 1).unwrap();
        assert_eq!((out.train.len(), out.val.len(), out.test.len()), (1600, 200, 200));
        let again = split(&recs, SplitRatio::default(), 1).unwrap();
        assert_eq!(out.manifest.split_membership, again.manifest.split_membership);
    }

    #[test]
    fn split_balanced_within_one() {
        let recs = records(1000, 2);
        let out = split(&recs, SplitRatio::default(), 7).unwrap();
        for s in SplitName::ALL {
            let part = out.part(s);
            let machine = part.iter().filter(|r| r.label.is_machine()).count() as i64;
            let human = part.len() as i64 - machine;
            assert!((machine - human).abs() <= 1, "{s:?}: {machine} vs {human}");
        }
    }

    #[test]
    fn split_warns_on_empty_split() {
        let recs = records(5, 2);
        let out = split(&recs, SplitRatio::new(8, 1, 1).unwrap(), 0).unwrap();
        assert!(!out.warnings.is_empty());
        assert!(split(&[], SplitRatio::default(), 0).is_err());
    }

    #[test]
    fn save_empty_and_line_count() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d.jsonl");
        save_standardized(&[], &DatasetManifest::new("t", 0), &out).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap(), "");
        assert!(dir.path().join("manifest.json").exists());

        let recs = records(3, 2);
        save_standardized(&recs, &DatasetManifest::new("t", 0), &out).unwrap();
        let content = fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = content.lines().collect();
        assert_eq!(lines.len(), 3);
        for line in lines {
            let _: Record = serde_json::from_str(line).unwrap();
        }
    }

    fn arb_text() -> impl Strategy<Value = String> {
        prop_oneof![
            "[ \\t\\n]{0,2}[a-zA-Z0-9 ,.!?]{1,20}[ \\n]{0,2}",
            "\\PC{1,12}",
            Just("e\u{301}x\u{30a}".to_string()),
        ]
    }

    fn arb_record() -> impl Strategy<Value = Record> {
        (arb_text(), any::<bool>(), proptest::option::of("[a-z]{1,5}"), proptest::option::of("[a-z]{1,5}"), any::<bool>())
            .prop_map(|(text, machine, source, model, attacked)| {
                let label = if machine { Label::Machine } else { Label::Human };
                let mut r = Record::new(String::new(), text, label);
                r.source = source;
                r.model = model;
                if machine && attacked {
                    r.attack = Some("typo_insert".into());
                }
                r
            })
    }

    fn with_ids(mut recs: Vec<Record>) -> Vec<Record> {
        for (i, r) in recs.iter_mut().enumerate() {
            r.id = format!("p{i}");
        }
        recs
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(recs in proptest::collection::vec(arb_record(), 0..20)) {
            let once = normalize(with_ids(recs));
            let twice = normalize(once.records.clone());
            prop_assert_eq!(&once.records, &twice.records);
            prop_assert_eq!(twice.dropped_records, 0);
        }

        #[test]
        fn save_load_round_trip(recs in proptest::collection::vec(arb_record(), 0..20)) {
            let recs = normalize(with_ids(recs)).records;
            let dir = tempfile::tempdir().unwrap();
            let out = dir.path().join("data.jsonl");
            save_standardized(&recs, &DatasetManifest::new("t", 0), &out).unwrap();
            let loaded = load_dataset(&out, FormatHint::Auto).unwrap();
            prop_assert!(loaded.warnings.is_empty());
            prop_assert_eq!(loaded.records, recs);
        }

        #[test]
        fn split_partitions_and_respects_ratios(
            n in 1usize..200,
            every in 1usize..5,
            w in (0u64..10, 0u64..10, 0u64..10).prop_filter("non-zero", |(a, b, c)| a + b + c > 0),
            seed in any::<u64>(),
        ) {
            let recs = records(n, every);
            let ratio = SplitRatio::new(w.0, w.1, w.2).unwrap();
            let out = split(&recs, ratio, seed).unwrap();
            prop_assert_eq!(out.train.len() + out.val.len() + out.test.len(), n);
            prop_assert_eq!(out.manifest.split_membership.len(), n);
            let machine_total = recs.iter().filter(|r| r.label.is_machine()).count() as f64;
            let human_total = n as f64 - machine_total;
            for s in SplitName::ALL {
                let part = out.part(s);
                let frac = ratio.fraction(s);
                prop_assert!((part.len() as f64 - frac * n as f64).abs() < 1.0 + 1e-9);
                let m = part.iter().filter(|r| r.label.is_machine()).count() as f64;
                prop_assert!((m - frac * machine_total).abs() < 1.0 + 1e-9);
                prop_assert!(((part.len() as f64 - m) - frac * human_total).abs() < 1.0 + 1e-9);
                for r in part {
                    prop_assert_eq!(out.manifest.split_membership[&r.id], s);
                }
            }
        }

        #[test]
        fn split_ignores_input_order(seed in any::<u64>(), n in 2usize..60) {
            let recs = records(n, 3);
            let mut rev = recs.clone();
            rev.reverse();
            let a = split(&recs, SplitRatio::default(), seed).unwrap();
            let b = split(&rev, SplitRatio::default(), seed).unwrap();
            prop_assert_eq!(a.manifest.split_membership, b.manifest.split_membership);
        }
    }
}
