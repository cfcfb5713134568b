//! The twelve evasion attacks and dataset-level attack application.
//!
//! Only machine-labeled records are perturbed. Every variant is produced from an RNG
//! stream keyed by `(seed, base_id)`, so a record's variant does not depend on where
//! it sits in the dataset.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::fingerprint::{derive_seed, fingerprint_of};
use crate::generator::{GenerationConfig, GenerationError, Generator};
use crate::parallel::bounded_map;
use crate::schema::{Label, Record};

const DEFAULT_HOMOGLYPHS: &str = include_str!("../assets/homoglyphs.json");
const DEFAULT_SYNONYMS: &str = include_str!("../assets/synonyms.json");

/// Zero-width and invisible format codepoints injected by `format_chars`.
pub const FORMAT_CHARS: [char; 5] = ['\u{200B}', '\u{200C}', '\u{200D}', '\u{2060}', '\u{FEFF}'];

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("record {0:?} is human-written; only machine records are attacked")]
    HumanRecord(String),
    #[error("record {0:?} is already an attacked variant; chain attack runs explicitly")]
    AlreadyAttacked(String),
    #[error("invalid attack spec for {attack}: {message}")]
    InvalidSpec { attack: String, message: String },
    #[error("{attack} on {id:?}: {source}")]
    Backend {
        attack: String,
        id: String,
        #[source]
        source: GenerationError,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    TypoInsert,
    TypoDelete,
    TypoSubstitute,
    TypoTranspose,
    TypoMixed,
    Homoglyph,
    FormatChars,
    Synonym,
    SpanPerturb,
    Paraphrase,
    BackTranslate,
    Humanize,
}

impl AttackKind {
    pub const ALL: [AttackKind; 12] = [
        AttackKind::TypoInsert,
        AttackKind::TypoDelete,
        AttackKind::TypoSubstitute,
        AttackKind::TypoTranspose,
        AttackKind::TypoMixed,
        AttackKind::Homoglyph,
        AttackKind::FormatChars,
        AttackKind::Synonym,
        AttackKind::SpanPerturb,
        AttackKind::Paraphrase,
        AttackKind::BackTranslate,
        AttackKind::Humanize,
    ];

    pub const LOCAL: [AttackKind; 8] = [
        AttackKind::TypoInsert,
        AttackKind::TypoDelete,
        AttackKind::TypoSubstitute,
        AttackKind::TypoTranspose,
        AttackKind::TypoMixed,
        AttackKind::Homoglyph,
        AttackKind::FormatChars,
        AttackKind::Synonym,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::TypoInsert => "typo_insert",
            AttackKind::TypoDelete => "typo_delete",
            AttackKind::TypoSubstitute => "typo_substitute",
            AttackKind::TypoTranspose => "typo_transpose",
            AttackKind::TypoMixed => "typo_mixed",
            AttackKind::Homoglyph => "homoglyph",
            AttackKind::FormatChars => "format_chars",
            AttackKind::Synonym => "synonym",
            AttackKind::SpanPerturb => "span_perturb",
            AttackKind::Paraphrase => "paraphrase",
            AttackKind::BackTranslate => "back_translate",
            AttackKind::Humanize => "humanize",
        }
    }

    pub fn uses_backend(self) -> bool {
        matches!(
            self,
            AttackKind::SpanPerturb | AttackKind::Paraphrase | AttackKind::BackTranslate | AttackKind::Humanize
        )
    }

    pub fn granularity(self) -> &'static str {
        match self {
            AttackKind::Synonym => "lexical",
            AttackKind::SpanPerturb | AttackKind::Paraphrase => "paragraph",
            AttackKind::BackTranslate | AttackKind::Humanize => "document",
            _ => "character",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            AttackKind::TypoInsert => "Inserts one keyboard-adjacent character into each selected word.",
            AttackKind::TypoDelete => "Deletes one character from each selected word of length two or more.",
            AttackKind::TypoSubstitute => "Replaces one character per selected word with a keyboard neighbour.",
            AttackKind::TypoTranspose => "Swaps one pair of adjacent, differing characters per selected word.",
            AttackKind::TypoMixed => "Applies one random insert, delete, substitute or transpose edit per selected word.",
            AttackKind::Homoglyph => "Replaces mappable characters with visually confusable codepoints.",
            AttackKind::FormatChars => "Injects one zero-width format character into each selected word.",
            AttackKind::Synonym => "Replaces lexicon words with a listed synonym.",
            AttackKind::SpanPerturb => "Masks a contiguous span of words and has the generator rewrite it.",
            AttackKind::Paraphrase => "Has the generator paraphrase the whole text.",
            AttackKind::BackTranslate => "Translates into a pivot language and back with two generator calls.",
            AttackKind::Humanize => "Has the generator rewrite the text in a human writing style.",
        }
    }

    /// Parameter names understood by the attack (besides `rate` and `seed`).
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            AttackKind::Homoglyph => &["map"],
            AttackKind::Synonym => &["lexicon", "lexicon_path"],
            AttackKind::BackTranslate => &["generator", "pivot", "prompt_template"],
            k if k.uses_backend() => &["generator", "prompt_template"],
            _ => &[],
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown attack {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub name: AttackKind,
    pub rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

impl AttackSpec {
    pub fn new(name: AttackKind, rate: f64, seed: u64) -> Self {
        AttackSpec { name, rate, seed, params: BTreeMap::new() }
    }

    pub fn with_param(mut self, key: &str, value: Value) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn params_fingerprint(&self) -> String {
        fingerprint_of(&(self.name, self.rate, &self.params))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackProvenance {
    /// Id of the attacked variant record.
    pub variant_id: String,
    pub base_id: String,
    pub attack: String,
    pub params_fingerprint: String,
    pub seed: u64,
}

/// Number of units to perturb: `ceil(rate * eligible)`, tolerant of float noise in
/// the product (0.2 * 50 is 10, not 11).
pub fn perturbation_budget(rate: f64, eligible: usize) -> usize {
    let x = rate * eligible as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() < 1e-9 { nearest } else { x.ceil() };
    (k.max(0.0) as usize).min(eligible)
}

/// Char-index ranges of maximal non-whitespace runs.
pub fn word_spans(chars: &[char]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in chars.iter().enumerate() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, chars.len()));
    }
    spans
}

/// Whether a word has an adjacent pair of differing characters to swap.
pub fn transposable(word: &[char]) -> bool {
    word.windows(2).any(|w| w[0] != w[1])
}

fn qwerty_neighbours(c: char) -> &'static str {
    match c {
        'q' => "wa",
        'w' => "qeas",
        'e' => "wrsd",
        'r' => "etdf",
        't' => "ryfg",
        'y' => "tugh",
        'u' => "yihj",
        'i' => "uojk",
        'o' => "ipkl",
        'p' => "ol",
        'a' => "qwsz",
        's' => "awedxz",
        'd' => "serfcx",
        'f' => "drtgvc",
        'g' => "ftyhbv",
        'h' => "gyujnb",
        'j' => "huikmn",
        'k' => "jiolm",
        'l' => "kop",
        'z' => "asx",
        'x' => "zsdc",
        'c' => "xdfv",
        'v' => "cfgb",
        'b' => "vghn",
        'n' => "bhjm",
        'm' => "njk",
        _ => "",
    }
}

/// A plausible typo character near `c`; never equal to `c`.
fn typo_char(c: char, rng: &mut ChaCha8Rng) -> char {
    let lower = c.to_ascii_lowercase();
    let pool: Vec<char> = qwerty_neighbours(lower).chars().collect();
    if let Some(&n) = pool.choose(rng) {
        return if c.is_ascii_uppercase() { n.to_ascii_uppercase() } else { n };
    }
    if c.is_ascii_digit() {
        loop {
            let d = char::from(b'0' + rng.random_range(0..10u8));
            if d != c {
                return d;
            }
        }
    }
    loop {
        let l = char::from(b'a' + rng.random_range(0..26u8));
        if l != c {
            return l;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Edit {
    Insert,
    Delete,
    Substitute,
    Transpose,
}

fn apply_edit(word: &mut Vec<char>, edit: Edit, rng: &mut ChaCha8Rng) {
    match edit {
        Edit::Insert => {
            let pos = rng.random_range(0..=word.len());
            let anchor = word[pos.min(word.len() - 1)];
            let c = typo_char(anchor, rng);
            word.insert(pos, c);
        }
        Edit::Delete => {
            let pos = rng.random_range(0..word.len());
            word.remove(pos);
        }
        Edit::Substitute => {
            let pos = rng.random_range(0..word.len());
            word[pos] = typo_char(word[pos], rng);
        }
        Edit::Transpose => {
            let pairs: Vec<usize> = (0..word.len() - 1).filter(|&i| word[i] != word[i + 1]).collect();
            let &i = pairs.choose(rng).expect("caller checks transposable");
            word.swap(i, i + 1);
        }
    }
}

/// A spec with its assets and generators resolved, ready to apply to many records.
pub struct PreparedAttack {
    spec: AttackSpec,
    params_fingerprint: String,
    homoglyphs: BTreeMap<char, char>,
    lexicon: BTreeMap<String, Vec<String>>,
    /// One generator per backend call in the chain (two for back-translation).
    generators: Vec<Generator>,
}

impl PreparedAttack {
    pub fn new(spec: AttackSpec) -> Result<Self, AttackError> {
        let attack_name = spec.name.to_string();
        let invalid = |message: String| AttackError::InvalidSpec { attack: attack_name.clone(), message };
        if !(0.0..=1.0).contains(&spec.rate) {
            return Err(invalid(format!("rate {} outside [0, 1]", spec.rate)));
        }
        let allowed = spec.name.param_names();
        if let Some(k) = spec.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(invalid(format!("unknown parameter {k:?}")));
        }
        let mut prepared = PreparedAttack {
            params_fingerprint: spec.params_fingerprint(),
            homoglyphs: BTreeMap::new(),
            lexicon: BTreeMap::new(),
            generators: Vec::new(),
            spec,
        };
        match prepared.spec.name {
            AttackKind::Homoglyph => {
                let map = match prepared.spec.params.get("map") {
                    Some(v) => v.clone(),
                    None => serde_json::from_str(DEFAULT_HOMOGLYPHS).expect("shipped homoglyph map parses"),
                };
                prepared.homoglyphs = parse_char_map(&map).map_err(invalid)?;
            }
            AttackKind::Synonym => {
                let lexicon = match (prepared.spec.params.get("lexicon"), prepared.spec.params.get("lexicon_path")) {
                    (Some(v), _) => v.clone(),
                    (None, Some(Value::String(p))) => {
                        let text = std::fs::read_to_string(Path::new(p))
                            .map_err(|e| invalid(format!("cannot read lexicon {p}: {e}")))?;
                        serde_json::from_str(&text).map_err(|e| invalid(format!("lexicon {p}: {e}")))?
                    }
                    (None, Some(_)) => return Err(invalid("lexicon_path must be a string".into())),
                    (None, None) => serde_json::from_str(DEFAULT_SYNONYMS).expect("shipped lexicon parses"),
                };
                prepared.lexicon = parse_lexicon(&lexicon).map_err(invalid)?;
            }
            kind if kind.uses_backend() => {
                let raw = prepared
                    .spec
                    .params
                    .get("generator")
                    .ok_or_else(|| invalid("backend attacks need a `generator` parameter".into()))?;
                let base: GenerationConfig =
                    serde_json::from_value(raw.clone()).map_err(|e| invalid(format!("generator: {e}")))?;
                let custom = prepared.spec.params.get("prompt_template").and_then(Value::as_str).map(str::to_string);
                let templates = match kind {
                    AttackKind::BackTranslate => {
                        let pivot = prepared.spec.params.get("pivot").and_then(Value::as_str).unwrap_or("French");
                        vec![
                            custom.unwrap_or_else(|| {
                                format!("Translate the following text into {pivot}. Reply with the translation only.\n\n{{text}}")
                            }),
                            "Translate the following text into English. Reply with the translation only.\n\n{text}".to_string(),
                        ]
                    }
                    AttackKind::SpanPerturb => vec![custom.unwrap_or_else(|| {
                        "Rewrite the following passage fragment in different words, keeping its meaning. Reply with the rewrite only.\n\n{text}".into()
                    })],
                    AttackKind::Paraphrase => vec![custom.unwrap_or_else(|| {
                        "Paraphrase the following text while keeping its meaning. Reply with the paraphrase only.\n\n{text}".into()
                    })],
                    _ => vec![custom.unwrap_or_else(|| {
                        "Rewrite the following text in a natural human writing style while keeping its meaning. Reply with the rewrite only.\n\n{text}".into()
                    })],
                };
                for template in templates {
                    let config = GenerationConfig { prompt_template: template, ..base.clone() };
                    prepared.generators.push(Generator::new(config).map_err(|e| invalid(e.to_string()))?);
                }
            }
            _ => {}
        }
        Ok(prepared)
    }

    pub fn spec(&self) -> &AttackSpec {
        &self.spec
    }

    pub fn apply(&self, record: &Record) -> Result<(Record, AttackProvenance), AttackError> {
        if record.label == Label::Human {
            return Err(AttackError::HumanRecord(record.id.clone()));
        }
        if record.attack.is_some() {
            return Err(AttackError::AlreadyAttacked(record.id.clone()));
        }
        let mut rng = ChaCha8Rng::from_seed(derive_seed(self.spec.seed, &record.id));
        let text = self.perturb(&record.id, &record.text, &mut rng)?;
        let name = self.spec.name.name();
        let mut variant = record.clone();
        variant.id = format!("{}#{name}", record.id);
        variant.text = text;
        variant.attack = Some(name.to_string());
        let provenance = AttackProvenance {
            variant_id: variant.id.clone(),
            base_id: record.id.clone(),
            attack: name.to_string(),
            params_fingerprint: self.params_fingerprint.clone(),
            seed: self.spec.seed,
        };
        Ok((variant, provenance))
    }

    fn perturb(&self, id: &str, text: &str, rng: &mut ChaCha8Rng) -> Result<String, AttackError> {
        let rate = self.spec.rate;
        if rate == 0.0 {
            return Ok(text.to_string());
        }
        Ok(match self.spec.name {
            AttackKind::TypoInsert => edit_words(text, rate, rng, |_| true, |_, _| Edit::Insert),
            AttackKind::TypoDelete => edit_words(text, rate, rng, |w| w.len() >= 2, |_, _| Edit::Delete),
            AttackKind::TypoSubstitute => edit_words(text, rate, rng, |_| true, |_, _| Edit::Substitute),
            AttackKind::TypoTranspose => edit_words(text, rate, rng, transposable, |_, _| Edit::Transpose),
            AttackKind::TypoMixed => edit_words(
                text,
                rate,
                rng,
                |_| true,
                |w, rng| {
                    let mut ops = vec![Edit::Insert, Edit::Substitute];
                    if w.len() >= 2 {
                        ops.push(Edit::Delete);
                    }
                    if transposable(w) {
                        ops.push(Edit::Transpose);
                    }
                    *ops.choose(rng).unwrap()
                },
            ),
            AttackKind::Homoglyph => {
                let mut chars: Vec<char> = text.chars().collect();
                let eligible: Vec<usize> = (0..chars.len()).filter(|&i| self.homoglyphs.contains_key(&chars[i])).collect();
                let k = perturbation_budget(rate, eligible.len());
                for &i in eligible.choose_multiple(rng, k) {
                    chars[i] = self.homoglyphs[&chars[i]];
                }
                chars.into_iter().collect()
            }
            AttackKind::FormatChars => edit_words_with(text, rate, rng, |_| true, |word, rng| {
                let pos = rng.random_range(0..=word.len());
                word.insert(pos, *FORMAT_CHARS.choose(rng).unwrap());
            }),
            AttackKind::Synonym => self.synonyms(text, rate, rng),
            AttackKind::SpanPerturb => {
                let chars: Vec<char> = text.chars().collect();
                let spans = word_spans(&chars);
                if spans.is_empty() {
                    return Ok(text.to_string());
                }
                let len = perturbation_budget(rate, spans.len()).max(1);
                let first = rng.random_range(0..=spans.len() - len);
                let (start, end) = (spans[first].0, spans[first + len - 1].1);
                let span: String = chars[start..end].iter().collect();
                let rewritten = self.call_backend(0, id, &span)?;
                let mut out: String = chars[..start].iter().collect();
                out.push_str(rewritten.trim());
                out.extend(&chars[end..]);
                out
            }
            AttackKind::Paraphrase | AttackKind::Humanize => self.call_backend(0, id, text)?.trim().to_string(),
            AttackKind::BackTranslate => {
                let pivot = self.call_backend(0, id, text)?;
                self.call_backend(1, id, pivot.trim())?.trim().to_string()
            }
        })
    }

    fn call_backend(&self, step: usize, id: &str, input: &str) -> Result<String, AttackError> {
        self.generators[step].generate(input).map(|r| r.text).map_err(|source| AttackError::Backend {
            attack: self.spec.name.to_string(),
            id: id.to_string(),
            source,
        })
    }

    fn synonyms(&self, text: &str, rate: f64, rng: &mut ChaCha8Rng) -> String {
        let chars: Vec<char> = text.chars().collect();
        let spans = word_spans(&chars);
        // (span index, core start, core end, lexicon key)
        let eligible: Vec<(usize, usize, usize, String)> = spans
            .iter()
            .enumerate()
            .filter_map(|(i, &(s, e))| {
                let word = &chars[s..e];
                let lead = word.iter().take_while(|c| !c.is_alphanumeric()).count();
                let trail = word.iter().rev().take_while(|c| !c.is_alphanumeric()).count();
                if lead + trail >= word.len() {
                    return None;
                }
                let key: String = word[lead..word.len() - trail].iter().collect::<String>().to_lowercase();
                self.lexicon.contains_key(&key).then_some((i, s + lead, e - trail, key))
            })
            .collect();
        let k = perturbation_budget(rate, eligible.len());
        let mut chosen: Vec<&(usize, usize, usize, String)> = eligible.choose_multiple(rng, k).collect();
        chosen.sort_by_key(|c| c.0);
        let mut out = String::new();
        let mut cursor = 0;
        for (_, start, end, key) in chosen {
            out.extend(&chars[cursor..*start]);
            let original: String = chars[*start..*end].iter().collect();
            let replacement = self.lexicon[key].choose(rng).expect("lexicon entries are non-empty");
            out.push_str(&match_case(&original, replacement));
            cursor = *end;
        }
        out.extend(&chars[cursor..]);
        out
    }
}

fn match_case(original: &str, replacement: &str) -> String {
    let letters: Vec<char> = original.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.len() > 1 && letters.iter().all(|c| c.is_uppercase()) {
        return replacement.to_uppercase();
    }
    let mut chars = replacement.chars();
    match (original.chars().next(), chars.next()) {
        (Some(o), Some(first)) if o.is_uppercase() => first.to_uppercase().chain(chars).collect(),
        _ => replacement.to_string(),
    }
}

fn edit_words<E, C>(text: &str, rate: f64, rng: &mut ChaCha8Rng, eligible: E, choose: C) -> String
where
    E: Fn(&[char]) -> bool,
    C: Fn(&[char], &mut ChaCha8Rng) -> Edit,
{
    edit_words_with(text, rate, rng, eligible, |word, rng| {
        let edit = choose(word, rng);
        apply_edit(word, edit, rng);
    })
}

/// Selects `ceil(rate * eligible words)` words uniformly without replacement and edits
/// each once, in text order. Whitespace is preserved verbatim.
fn edit_words_with<E, F>(text: &str, rate: f64, rng: &mut ChaCha8Rng, eligible: E, mut edit: F) -> String
where
    E: Fn(&[char]) -> bool,
    F: FnMut(&mut Vec<char>, &mut ChaCha8Rng),
{
    let chars: Vec<char> = text.chars().collect();
    let spans = word_spans(&chars);
    let candidates: Vec<usize> = (0..spans.len()).filter(|&i| eligible(&chars[spans[i].0..spans[i].1])).collect();
    let k = perturbation_budget(rate, candidates.len());
    let mut chosen: Vec<usize> = candidates.choose_multiple(rng, k).copied().collect();
    chosen.sort_unstable();

    let mut out = String::with_capacity(text.len() + k * 4);
    let mut cursor = 0;
    for i in chosen {
        let (s, e) = spans[i];
        out.extend(&chars[cursor..s]);
        let mut word = chars[s..e].to_vec();
        edit(&mut word, rng);
        out.extend(word);
        cursor = e;
    }
    out.extend(&chars[cursor..]);
    out
}

fn parse_char_map(value: &Value) -> Result<BTreeMap<char, char>, String> {
    let obj = value.as_object().ok_or("homoglyph map must be an object")?;
    let mut map = BTreeMap::new();
    for (k, v) in obj {
        let single = |s: &str| {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => Ok(c),
                _ => Err(format!("homoglyph map entries must be single characters, got {s:?}")),
            }
        };
        let to = v.as_str().ok_or("homoglyph map values must be strings")?;
        let (from, to) = (single(k)?, single(to)?);
        if from == to {
            return Err(format!("homoglyph for {from:?} maps to itself"));
        }
        map.insert(from, to);
    }
    Ok(map)
}

fn parse_lexicon(value: &Value) -> Result<BTreeMap<String, Vec<String>>, String> {
    let obj = value.as_object().ok_or("lexicon must be an object of word -> synonym(s)")?;
    let mut lexicon = BTreeMap::new();
    for (k, v) in obj {
        let options: Vec<String> = match v {
            Value::String(s) => vec![s.clone()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).map(str::to_string).collect(),
            _ => return Err(format!("lexicon entry {k:?} must be a string or list of strings")),
        };
        let options: Vec<String> = options.into_iter().filter(|s| !s.trim().is_empty()).collect();
        if !options.is_empty() {
            lexicon.insert(k.to_lowercase(), options);
        }
    }
    Ok(lexicon)
}

pub fn apply_attack(spec: &AttackSpec, record: &Record) -> Result<(Record, AttackProvenance), AttackError> {
    PreparedAttack::new(spec.clone())?.apply(record)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Replace,
    #[default]
    Append,
}

impl FromStr for AttackMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "replace" => Ok(AttackMode::Replace),
            "append" => Ok(AttackMode::Append),
            other => Err(format!("unknown attack mode {other:?} (expected replace or append)")),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct AttackFailure {
    pub base_id: String,
    pub attack: String,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct AttackOutcome {
    pub records: Vec<Record>,
    pub provenance: Vec<AttackProvenance>,
    pub failures: Vec<AttackFailure>,
    /// Machine records that were already attacked variants and passed through as-is.
    pub skipped_attacked: usize,
}

/// Applies every spec to every clean machine record. Human records pass through
/// unchanged; output order follows input order with variants in spec order.
pub fn attack_dataset(
    specs: &[AttackSpec],
    records: &[Record],
    mode: AttackMode,
    parallelism: usize,
) -> Result<AttackOutcome, AttackError> {
    let prepared: Vec<PreparedAttack> = specs.iter().cloned().map(PreparedAttack::new).collect::<Result<_, _>>()?;
    let variants = bounded_map(records, parallelism, |_, record| {
        if record.label == Label::Human || record.attack.is_some() {
            return Vec::new();
        }
        prepared.iter().map(|p| p.apply(record)).collect::<Vec<_>>()
    });

    let mut out = AttackOutcome::default();
    for (record, results) in records.iter().zip(variants) {
        let attackable = record.label == Label::Machine && record.attack.is_none();
        if record.attack.is_some() {
            out.skipped_attacked += 1;
        }
        if !attackable || mode == AttackMode::Append {
            out.records.push(record.clone());
        }
        for (p, result) in prepared.iter().zip(results) {
            match result {
                Ok((variant, provenance)) => {
                    out.records.push(variant);
                    out.provenance.push(provenance);
                }
                Err(e) => out.failures.push(AttackFailure {
                    base_id: record.id.clone(),
                    attack: p.spec.name.to_string(),
                    message: e.to_string(),
                }),
            }
        }
    }
    Ok(out)
}
