//! Effectiveness, robustness and efficiency metrics over per-sample predictions.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::AttackProvenance;
use crate::detector::EfficiencyTrace;

/// Operating points reported by default.
pub const DEFAULT_FPR_LEVELS: [f64; 2] = [0.01, 0.001];
pub const MIN_SLICE_SIZE: usize = 10;
pub const CLEAN_GROUP: &str = "clean";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no predictions")]
    Empty,
    #[error("unknown slice key {0:?} (expected source, lang, model or attack)")]
    UnknownSliceKey(String),
    #[error("attack provenance for {variant:?} does not resolve: {message}")]
    UnmatchedProvenance { variant: String, message: String },
    #[error("ASR pairs must be machine samples; {0:?} is labeled human")]
    HumanPair(String),
    #[error(
        "threshold reuse violated: clean predictions use calibration {clean} but attacked predictions use {attacked}; \
         the calibrated threshold must be the same on both sides"
    )]
    ThresholdMismatch { clean: String, attacked: String },
}

/// A metric value, or the reason it is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metric {
    Value(f64),
    Absent { absent: String },
}

impl Metric {
    pub fn absent(reason: impl Into<String>) -> Self {
        Metric::Absent { absent: reason.into() }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            Metric::Absent { .. } => None,
        }
    }

    fn ratio(num: usize, den: usize, reason: &str) -> Self {
        if den == 0 {
            Metric::absent(reason)
        } else {
            Metric::Value(num as f64 / den as f64)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: String,
    pub y_true: u8,
    /// Raw detector score.
    pub score: f64,
    /// Score oriented so that larger means more machine-like.
    pub effective_score: f64,
    pub probability: f64,
    pub y_pred: u8,
    #[serde(default)]
    pub attack: Option<String>,
    /// Clean record an attacked variant was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_id: Option<String>,
    pub latency_ms: f64,
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub lang: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let mut c = Confusion::default();
        for (y, p) in pairs {
            match (y, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, _) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&self, o: &Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }

    pub fn accuracy(&self) -> Metric {
        Metric::ratio(self.tp + self.tn, self.total(), "no predictions")
    }

    pub fn precision(&self) -> Metric {
        Metric::ratio(self.tp, self.tp + self.fp, "no samples predicted machine")
    }

    pub fn recall(&self) -> Metric {
        Metric::ratio(self.tp, self.tp + self.fn_, "no machine samples")
    }

    pub fn f1(&self) -> Metric {
        Metric::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, "no machine samples and none predicted")
    }
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let p = labels.iter().filter(|&&y| y == 1).count();
    (p, labels.len() - p)
}

/// Probability that a random positive outscores a random negative, ties ½.
/// Computed from midranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Metric {
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Metric::absent("needs both classes");
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum, to keep midranks integral
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j) as u128; // 2 * average of ranks i+1..=j
        let pos = idx[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank2_sum += midrank2 * pos;
        i = j;
    }
    let p128 = p as u128;
    let u2 = rank2_sum - p128 * (p128 + 1);
    Metric::Value(u2 as f64 / (2 * p * n) as f64)
}

/// Area under the step precision-recall curve, one step per distinct threshold.
pub fn aupr(scores: &[f64], labels: &[u8]) -> Metric {
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Metric::absent("needs both classes");
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut prev_tp) = (0usize, 0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp > prev_tp {
            area += (tp - prev_tp) as f64 / p as f64 * (tp as f64 / (tp + fp) as f64);
            prev_tp = tp;
        }
    }
    Metric::Value(area)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub tpr: Metric,
    /// α is finer than 1 / (number of negatives).
    pub resolution_limited: bool,
}

/// max TPR over thresholds t ∈ distinct scores ∪ {+∞} (predict 1 iff score ≥ t)
/// subject to FPR ≤ α. No interpolation.
pub fn tpr_at_fpr(scores: &[f64], labels: &[u8], alpha: f64) -> OperatingPoint {
    let (p, n) = class_counts(labels);
    if n == 0 {
        return OperatingPoint { tpr: Metric::absent("no human samples"), resolution_limited: false };
    }
    if p == 0 {
        return OperatingPoint { tpr: Metric::absent("no machine samples"), resolution_limited: false };
    }
    let resolution_limited = alpha < 1.0 / n as f64;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut best) = (0usize, 0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if fp as f64 / n as f64 <= alpha {
            best = best.max(tp);
        } else {
            break;
        }
    }
    OperatingPoint { tpr: Metric::Value(best as f64 / p as f64), resolution_limited }
}

pub fn fpr_key(alpha: f64) -> String {
    format!("{alpha}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Effectiveness {
    pub n: usize,
    pub positives: usize,
    pub negatives: usize,
    pub confusion: Confusion,
    pub accuracy: Metric,
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
    pub auroc: Metric,
    pub aupr: Metric,
    pub tpr_at_fpr: BTreeMap<String, OperatingPoint>,
}

pub fn effectiveness(preds: &[Prediction], fpr_levels: &[f64]) -> Result<Effectiveness, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.effective_score).collect();
    let labels: Vec<u8> = preds.iter().map(|p| p.y_true).collect();
    let confusion = Confusion::from_pairs(preds.iter().map(|p| (p.y_true, p.y_pred)));
    let (positives, negatives) = class_counts(&labels);
    Ok(Effectiveness {
        n: preds.len(),
        positives,
        negatives,
        confusion,
        accuracy: confusion.accuracy(),
        precision: confusion.precision(),
        recall: confusion.recall(),
        f1: confusion.f1(),
        auroc: auroc(&scores, &labels),
        aupr: aupr(&scores, &labels),
        tpr_at_fpr: fpr_levels.iter().map(|&a| (fpr_key(a), tpr_at_fpr(&scores, &labels, a))).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrPair {
    pub base_id: String,
    pub variant_id: String,
    pub attack: String,
    pub clean_pred: u8,
    pub attacked_pred: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrResult {
    pub asr: Metric,
    /// Machine samples detected in the clean setting.
    pub denominator: usize,
    /// Of those, variants that evade detection.
    pub flipped: usize,
    pub pairs: Vec<AsrPair>,
}

/// Attack success rate over provenance pairs. Both prediction sets must come
/// from the same calibration model.
pub fn asr(
    clean: &[Prediction],
    clean_calibration: &str,
    attacked: &[Prediction],
    attacked_calibration: &str,
    provenance: &[AttackProvenance],
) -> Result<AsrResult, MetricsError> {
    if clean_calibration != attacked_calibration {
        return Err(MetricsError::ThresholdMismatch {
            clean: clean_calibration.to_string(),
            attacked: attacked_calibration.to_string(),
        });
    }
    let clean_by_id: HashMap<&str, &Prediction> = clean.iter().map(|p| (p.record_id.as_str(), p)).collect();
    let attacked_by_id: HashMap<&str, &Prediction> = attacked.iter().map(|p| (p.record_id.as_str(), p)).collect();
    let mut pairs = Vec::with_capacity(provenance.len());
    for prov in provenance {
        let unmatched = |message: &str| MetricsError::UnmatchedProvenance {
            variant: prov.variant_id.clone(),
            message: message.to_string(),
        };
        let a = attacked_by_id.get(prov.variant_id.as_str()).ok_or_else(|| unmatched("no attacked prediction"))?;
        let c = clean_by_id
            .get(prov.base_id.as_str())
            .ok_or_else(|| unmatched(&format!("no clean prediction for base {:?}", prov.base_id)))?;
        for p in [a, c] {
            if p.y_true != 1 {
                return Err(MetricsError::HumanPair(p.record_id.clone()));
            }
        }
        pairs.push(AsrPair {
            base_id: prov.base_id.clone(),
            variant_id: prov.variant_id.clone(),
            attack: prov.attack.clone(),
            clean_pred: c.y_pred,
            attacked_pred: a.y_pred,
        });
    }
    let denominator = pairs.iter().filter(|p| p.clean_pred == 1).count();
    let flipped = pairs.iter().filter(|p| p.clean_pred == 1 && p.attacked_pred == 0).count();
    Ok(AsrResult {
        asr: Metric::ratio(flipped, denominator, "no machine samples detected in the clean setting"),
        denominator,
        flipped,
        pairs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub n: usize,
    pub wall_seconds: f64,
    pub throughput_per_s: Metric,
    pub mean_latency_ms: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_peak_gib: Option<f64>,
}

pub fn efficiency(trace: &EfficiencyTrace) -> Efficiency {
    Efficiency {
        n: trace.latencies_ms.len(),
        wall_seconds: trace.wall_seconds,
        throughput_per_s: match trace.throughput_per_s {
            Some(t) => Metric::Value(t),
            None => Metric::absent("nothing scored"),
        },
        mean_latency_ms: match trace.mean_latency_ms() {
            Some(m) => Metric::Value(m),
            None => Metric::absent("nothing scored"),
        },
        gpu_peak_gib: trace.gpu_peak_gib,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceKey {
    Source,
    Lang,
    Model,
    Attack,
}

impl SliceKey {
    pub const ALL: [SliceKey; 4] = [SliceKey::Source, SliceKey::Lang, SliceKey::Model, SliceKey::Attack];

    pub fn as_str(self) -> &'static str {
        match self {
            SliceKey::Source => "source",
            SliceKey::Lang => "lang",
            SliceKey::Model => "model",
            SliceKey::Attack => "attack",
        }
    }

    pub fn group_of(self, p: &Prediction) -> String {
        let v = match self {
            SliceKey::Source => &p.source,
            SliceKey::Lang => &p.lang,
            SliceKey::Model => &p.model,
            SliceKey::Attack => &p.attack,
        };
        match (v, self) {
            (Some(v), _) => v.clone(),
            (None, SliceKey::Attack) => CLEAN_GROUP.to_string(),
            (None, _) => "unknown".to_string(),
        }
    }
}

impl fmt::Display for SliceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SliceKey {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SliceKey::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| MetricsError::UnknownSliceKey(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub low_confidence: bool,
    #[serde(flatten)]
    pub metrics: Effectiveness,
}

pub fn slice(
    preds: &[Prediction],
    key: SliceKey,
    fpr_levels: &[f64],
    min_size: usize,
) -> Result<BTreeMap<String, SliceReport>, MetricsError> {
    let mut groups: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
    for p in preds {
        groups.entry(key.group_of(p)).or_default().push(p.clone());
    }
    groups
        .into_iter()
        .map(|(g, ps)| {
            let metrics = effectiveness(&ps, fpr_levels)?;
            Ok((g, SliceReport { low_confidence: ps.len() < min_size, metrics }))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector: String,
    pub dataset: String,
    pub dataset_fingerprint: String,
    pub calibration_fingerprint: String,
    /// Attack group this report covers; "clean" for unattacked data, "all" for pooled.
    pub attack: String,
    #[serde(flatten)]
    pub effectiveness: Effectiveness,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asr: Option<AsrResult>,
    pub efficiency: Efficiency,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub slices: BTreeMap<String, BTreeMap<String, SliceReport>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

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
            latency_ms: 1.0,
            source: None,
            lang: None,
            model: None,
        }
    }

    fn brute_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]), Metric::Value(1.0));
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]), Metric::Value(0.75));
        assert_eq!(auroc(&[0.5, 0.5], &[0, 1]), Metric::Value(0.5));
        assert!(auroc(&[1.0, 2.0], &[1, 1]).value().is_none());
    }

    #[test]
    fn tpr_examples() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let y = [0, 0, 1, 1];
        assert_eq!(tpr_at_fpr(&s, &y, 0.0).tpr, Metric::Value(0.5));
        assert_eq!(tpr_at_fpr(&s, &y, 0.5).tpr, Metric::Value(1.0));
        assert!(tpr_at_fpr(&s, &y, 0.01).resolution_limited);
        assert_eq!(tpr_at_fpr(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0], 0.01).tpr, Metric::Value(1.0));
        assert!(tpr_at_fpr(&[0.9], &[1], 0.01).tpr.value().is_none());
    }

    #[test]
    fn degenerate_predictor() {
        let preds: Vec<Prediction> =
            (0..10).map(|i| pred(&i.to_string(), (i % 2) as u8, i as f64, 1)).collect();
        let e = effectiveness(&preds, &DEFAULT_FPR_LEVELS).unwrap();
        assert_eq!(e.accuracy, Metric::Value(0.5));
        assert_eq!(e.recall, Metric::Value(1.0));
        assert_eq!(e.precision, Metric::Value(0.5));
        let none: Vec<Prediction> = (0..4).map(|i| pred(&i.to_string(), 0, 0.0, 0)).collect();
        let e = effectiveness(&none, &DEFAULT_FPR_LEVELS).unwrap();
        assert!(e.precision.value().is_none());
        assert!(e.f1.value().is_none());
        assert!(matches!(effectiveness(&[], &[]), Err(MetricsError::Empty)));
    }

    #[test]
    fn aupr_hand_example() {
        // descending: 0.8(+) 0.4(-) 0.35(+) 0.1(-) → 0.5·1 + 0.5·(2/3)
        let got = aupr(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).value().unwrap();
        assert_relative_eq!(got, 0.5 + 1.0 / 3.0, epsilon = 1e-15);
    }

    fn prov(base: &str, attack: &str) -> AttackProvenance {
        AttackProvenance {
            variant_id: format!("{base}#{attack}"),
            base_id: base.into(),
            attack: attack.into(),
            params_fingerprint: "x".into(),
            seed: 0,
        }
    }

    #[test]
    fn asr_example() {
        // 10 machine samples, 8 correct clean, 3 of those flip
        let clean: Vec<Prediction> = (0..10).map(|i| pred(&format!("m{i}"), 1, 0.0, u8::from(i < 8))).collect();
        let attacked: Vec<Prediction> =
            (0..10).map(|i| pred(&format!("m{i}#typo"), 1, 0.0, u8::from(!(i < 3)))).collect();
        let provs: Vec<AttackProvenance> = (0..10).map(|i| prov(&format!("m{i}"), "typo")).collect();
        let r = asr(&clean, "fp", &attacked, "fp", &provs).unwrap();
        assert_eq!(r.asr, Metric::Value(0.375));
        assert_eq!((r.flipped, r.denominator), (3, 8));

        let identity: Vec<Prediction> =
            clean.iter().map(|p| pred(&format!("{}#typo", p.record_id), 1, 0.0, p.y_pred)).collect();
        assert_eq!(asr(&clean, "fp", &identity, "fp", &provs).unwrap().asr, Metric::Value(0.0));

        assert!(matches!(asr(&clean, "a", &attacked, "b", &provs), Err(MetricsError::ThresholdMismatch { .. })));
        assert!(matches!(
            asr(&clean, "fp", &attacked, "fp", &[prov("zz", "typo")]),
            Err(MetricsError::UnmatchedProvenance { .. })
        ));
        let none_detected: Vec<Prediction> = clean.iter().map(|p| pred(&p.record_id, 1, 0.0, 0)).collect();
        assert!(asr(&none_detected, "fp", &attacked, "fp", &provs).unwrap().asr.value().is_none());
    }

    #[test]
    fn efficiency_bundle() {
        let trace = EfficiencyTrace {
            wall_seconds: 2.0,
            latencies_ms: vec![5.0; 100],
            throughput_per_s: Some(50.0),
            gpu_peak_gib: None,
        };
        let e = efficiency(&trace);
        assert_eq!(e.throughput_per_s, Metric::Value(50.0));
        assert_eq!(e.mean_latency_ms, Metric::Value(5.0));
        let single = EfficiencyTrace { wall_seconds: 1.0, latencies_ms: vec![7.5], throughput_per_s: Some(1.0), gpu_peak_gib: None };
        assert_eq!(efficiency(&single).mean_latency_ms, Metric::Value(7.5));
    }

    #[test]
    fn slicing() {
        let mut preds: Vec<Prediction> = (0..30).map(|i| pred(&i.to_string(), (i % 2) as u8, i as f64, (i % 3 == 0) as u8)).collect();
        let e = effectiveness(&preds, &DEFAULT_FPR_LEVELS).unwrap();
        let one = slice(&preds, SliceKey::Model, &DEFAULT_FPR_LEVELS, MIN_SLICE_SIZE).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one["unknown"].metrics, e);

        for (i, p) in preds.iter_mut().enumerate() {
            p.attack = match i % 3 {
                0 => None,
                1 => Some("typo_insert".into()),
                _ => Some("homoglyph".into()),
            };
            p.model = Some(["m1", "m2", "m3"][i % 3].to_string());
        }
        let by_attack = slice(&preds, SliceKey::Attack, &DEFAULT_FPR_LEVELS, MIN_SLICE_SIZE).unwrap();
        assert_eq!(by_attack.keys().collect::<Vec<_>>(), vec!["clean", "homoglyph", "typo_insert"]);
        let by_model = slice(&preds, SliceKey::Model, &DEFAULT_FPR_LEVELS, 11).unwrap();
        let mut pooled = Confusion::default();
        for (g, r) in &by_model {
            assert!(r.low_confidence);
            let mine: Vec<&Prediction> = preds.iter().filter(|p| p.model.as_deref() == Some(g)).collect();
            let correct = mine.iter().filter(|p| p.y_true == p.y_pred).count();
            assert_eq!(r.metrics.accuracy, Metric::Value(correct as f64 / mine.len() as f64));
            pooled = pooled.add(&r.metrics.confusion);
        }
        assert_eq!(pooled, e.confusion);
        assert!("nope".parse::<SliceKey>().is_err());
    }

    #[test]
    fn report_serializes_absent_with_reason() {
        let v = serde_json::to_value(Metric::absent("no machine samples")).unwrap();
        assert_eq!(v, serde_json::json!({"absent": "no machine samples"}));
        let back: Metric = serde_json::from_value(serde_json::json!(0.25)).unwrap();
        assert_eq!(back, Metric::Value(0.25));
    }

    fn dataset() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..64).prop_flat_map(|n| {
            (
                proptest::collection::vec(prop_oneof![(-5i32..5).prop_map(f64::from), -5.0f64..5.0], n),
                proptest::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise((s, y) in dataset()) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            let got = auroc(&s, &y).value().unwrap();
            prop_assert!((got - brute_auroc(&s, &y)).abs() <= 1e-12);
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let flipped = auroc(&neg, &y).value().unwrap();
            prop_assert!((got + flipped - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn auroc_invariant_under_monotone_maps((s, y) in dataset(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            let mapped: Vec<f64> = s.iter().map(|v| (a * v + b).tanh() * 0.5 + a * v).collect();
            prop_assert_eq!(auroc(&s, &y), auroc(&mapped, &y));
            prop_assert_eq!(aupr(&s, &y), aupr(&mapped, &y));
        }

        #[test]
        fn tpr_monotone_in_alpha((s, y) in dataset(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let t_lo = tpr_at_fpr(&s, &y, lo).tpr.value().unwrap();
            let t_hi = tpr_at_fpr(&s, &y, hi).tpr.value().unwrap();
            prop_assert!(t_lo <= t_hi);
        }

        #[test]
        fn f1_harmonic_identity(y in proptest::collection::vec(0u8..2, 1..64), p in proptest::collection::vec(0u8..2, 64)) {
            let c = Confusion::from_pairs(y.iter().copied().zip(p.iter().copied()));
            prop_assert_eq!(c.total(), y.len());
            if let (Some(pr), Some(re)) = (c.precision().value(), c.recall().value()) {
                if pr + re > 0.0 {
                    let f = c.f1().value().unwrap();
                    prop_assert!((f - 2.0 * pr * re / (pr + re)).abs() <= 1e-12);
                }
            }
        }
    }
}
