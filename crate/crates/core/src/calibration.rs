//! Logistic calibration of oriented detector scores, p = σ(αs + β), fitted by
//! L2-regularized mean binary cross-entropy.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{ScoreScale, Sign};
use crate::fingerprint::{derive_seed, sha256_hex};

pub const CALIBRATION_FORMAT: &str = "forgeval-calibration/1";
pub const DEFAULT_L2_LAMBDA: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration data has a single class (positives: {positives}, negatives: {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("calibration data contains a non-finite score at index {0}")]
    NonFinite(usize),
    #[error("l2_lambda must be finite and >= 0, got {0}")]
    InvalidLambda(f64),
    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },
    #[error("max_f1_val needs validation scores containing both classes")]
    MissingValidation,
    #[error("probability-scale detectors must be higher_is_machine")]
    ProbabilitySign,
    #[error("calibration artifact {path}: {message}")]
    Artifact { path: String, message: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    #[default]
    FixedHalf,
    MaxF1Val,
}

impl ThresholdPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdPolicy::FixedHalf => "fixed_half",
            ThresholdPolicy::MaxF1Val => "max_f1_val",
        }
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThresholdPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed_half" => Ok(ThresholdPolicy::FixedHalf),
            "max_f1_val" => Ok(ThresholdPolicy::MaxF1Val),
            other => Err(format!("unknown threshold policy {other:?} (expected fixed_half or max_f1_val)")),
        }
    }
}

/// Overflow-safe logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Regularized objective: mean BCE of σ(αs+β) plus λ(α²+β²)/2.
pub fn objective(data: &[(f64, u8)], lambda: f64, alpha: f64, beta: f64) -> f64 {
    let n = data.len() as f64;
    let bce: f64 = data
        .iter()
        .map(|&(s, y)| {
            let z = alpha * s + beta;
            softplus(z) - f64::from(y) * z
        })
        .sum::<f64>()
        / n;
    bce + lambda * (alpha * alpha + beta * beta) / 2.0
}

/// Gradient of [`objective`] with respect to (α, β).
pub fn gradient(data: &[(f64, u8)], lambda: f64, alpha: f64, beta: f64) -> [f64; 2] {
    let n = data.len() as f64;
    let (mut ga, mut gb) = (0.0, 0.0);
    for &(s, y) in data {
        let r = sigmoid(alpha * s + beta) - f64::from(y);
        ga += r * s;
        gb += r;
    }
    [ga / n + lambda * alpha, gb / n + lambda * beta]
}

fn hessian(data: &[(f64, u8)], lambda: f64, alpha: f64, beta: f64) -> [[f64; 2]; 2] {
    let n = data.len() as f64;
    let (mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0);
    for &(s, _) in data {
        let p = sigmoid(alpha * s + beta);
        let w = p * (1.0 - p);
        haa += w * s * s;
        hab += w * s;
        hbb += w;
    }
    [[haa / n + lambda, hab / n], [hab / n, hbb / n + lambda]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub l2_lambda: f64,
    pub policy: ThresholdPolicy,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { l2_lambda: DEFAULT_L2_LAMBDA, policy: ThresholdPolicy::FixedHalf, max_iter: DEFAULT_MAX_ITER }
    }
}

/// Optimizer trace, for display of the objective per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub iterations: usize,
    pub objective: Vec<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationModel {
    pub detector: String,
    pub sign: Sign,
    pub scale: ScoreScale,
    pub alpha: f64,
    pub beta: f64,
    pub threshold: f64,
    pub threshold_policy: ThresholdPolicy,
    pub l2_lambda: f64,
    pub train_fingerprint: String,
}

fn check_data(data: &[(f64, u8)]) -> Result<(), CalibrationError> {
    if let Some(i) = data.iter().position(|(s, _)| !s.is_finite()) {
        return Err(CalibrationError::NonFinite(i));
    }
    let positives = data.iter().filter(|(_, y)| *y == 1).count();
    let negatives = data.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(CalibrationError::SingleClass { positives, negatives });
    }
    Ok(())
}

/// Fingerprint of calibration data: exact bit patterns of every (score, label).
pub fn data_fingerprint(data: &[(f64, u8)]) -> String {
    let mut buf = String::with_capacity(data.len() * 20);
    for (s, y) in data {
        buf.push_str(&format!("{:016x}:{y}\n", s.to_bits()));
    }
    sha256_hex(buf.as_bytes())
}

/// Minimizes the regularized objective by damped Newton with backtracking.
/// Falls back to the gradient direction where the Hessian is not positive definite.
pub fn minimize(data: &[(f64, u8)], lambda: f64, max_iter: usize) -> Result<([f64; 2], FitTrace), CalibrationError> {
    check_data(data)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(CalibrationError::InvalidLambda(lambda));
    }
    let mut theta = [0.0f64, 0.0];
    let mut f = objective(data, lambda, theta[0], theta[1]);
    let mut trace = vec![f];
    for iter in 0..max_iter {
        let g = gradient(data, lambda, theta[0], theta[1]);
        let gnorm = g[0].hypot(g[1]);
        if gnorm <= GRAD_TOL {
            return Ok((theta, FitTrace { iterations: iter, objective: trace, grad_norm: gnorm }));
        }
        let h = hessian(data, lambda, theta[0], theta[1]);
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let mut d = if det > 1e-300 && h[0][0] > 0.0 {
            [-(h[1][1] * g[0] - h[0][1] * g[1]) / det, -(h[0][0] * g[1] - h[1][0] * g[0]) / det]
        } else {
            [-g[0], -g[1]]
        };
        let mut slope = g[0] * d[0] + g[1] * d[1];
        if !(slope < 0.0) {
            d = [-g[0], -g[1]];
            slope = -gnorm * gnorm;
        }
        let mut t = 1.0;
        let accepted = loop {
            let cand = [theta[0] + t * d[0], theta[1] + t * d[1]];
            let fc = objective(data, lambda, cand[0], cand[1]);
            if fc <= f + 1e-4 * t * slope {
                break Some((cand, fc));
            }
            t *= 0.5;
            if t < 1e-20 {
                break None;
            }
        };
        match accepted {
            Some((cand, fc)) => {
                theta = cand;
                f = fc;
                trace.push(f);
            }
            None => {
                // No representable decrease left along d. Accept the point only at
                // rounding-noise distance from stationarity.
                if gnorm <= 1e-6 {
                    return Ok((theta, FitTrace { iterations: iter, objective: trace, grad_norm: gnorm }));
                }
                return Err(CalibrationError::NoConvergence { iterations: iter, grad_norm: gnorm });
            }
        }
    }
    let g = gradient(data, lambda, theta[0], theta[1]);
    let grad_norm = g[0].hypot(g[1]);
    if grad_norm <= GRAD_TOL {
        return Ok((theta, FitTrace { iterations: max_iter, objective: trace, grad_norm }));
    }
    Err(CalibrationError::NoConvergence { iterations: max_iter, grad_norm })
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn f1(c: Counts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// Highest-F1 probability threshold among the distinct validation
/// probabilities (predict machine iff p ≥ t). Ties go to the lowest threshold.
pub fn max_f1_threshold(probs: &[(f64, u8)]) -> Option<f64> {
    let positives = probs.iter().filter(|(_, y)| *y == 1).count();
    if positives == 0 || positives == probs.len() {
        return None;
    }
    let mut sorted: Vec<(f64, u8)> = probs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best: Option<(f64, f64)> = None;
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let score = f1(Counts { tp, fp, fn_: positives - tp });
        // descending sweep: on ties the later (lower) threshold wins
        if best.is_none_or(|(b, _)| score >= b) {
            best = Some((score, t));
        }
    }
    best.map(|(_, t)| t.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// Deterministic subsample of `k` items (order preserved). `None` keeps everything.
pub fn subsample<T: Clone>(items: &[T], k: Option<usize>, seed: u64) -> Vec<T> {
    match k {
        Some(k) if k < items.len() => {
            let mut rng = ChaCha8Rng::from_seed(derive_seed(seed, "calibration/sample_k"));
            let mut idx = sample(&mut rng, items.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| items[i].clone()).collect()
        }
        _ => items.to_vec(),
    }
}

impl CalibrationModel {
    /// Fits on oriented training scores; `val` feeds the max_f1_val policy.
    pub fn fit(
        detector: &str,
        sign: Sign,
        train: &[(f64, u8)],
        val: Option<&[(f64, u8)]>,
        options: &FitOptions,
    ) -> Result<(CalibrationModel, FitTrace), CalibrationError> {
        let ([alpha, beta], trace) = minimize(train, options.l2_lambda, options.max_iter)?;
        let mut model = CalibrationModel {
            detector: detector.to_string(),
            sign,
            scale: ScoreScale::Raw,
            alpha,
            beta,
            threshold: 0.5,
            threshold_policy: options.policy,
            l2_lambda: options.l2_lambda,
            train_fingerprint: data_fingerprint(train),
        };
        model.set_threshold(val)?;
        Ok((model, trace))
    }

    /// No fitting for detectors that already emit probabilities or logits.
    pub fn identity(
        detector: &str,
        sign: Sign,
        scale: ScoreScale,
        val: Option<&[(f64, u8)]>,
        policy: ThresholdPolicy,
    ) -> Result<CalibrationModel, CalibrationError> {
        if scale == ScoreScale::Probability && sign != Sign::HigherIsMachine {
            return Err(CalibrationError::ProbabilitySign);
        }
        let mut model = CalibrationModel {
            detector: detector.to_string(),
            sign,
            scale,
            alpha: 1.0,
            beta: 0.0,
            threshold: 0.5,
            threshold_policy: policy,
            l2_lambda: 0.0,
            train_fingerprint: data_fingerprint(val.unwrap_or_default()),
        };
        model.set_threshold(val)?;
        Ok(model)
    }

    fn set_threshold(&mut self, val: Option<&[(f64, u8)]>) -> Result<(), CalibrationError> {
        self.threshold = match self.threshold_policy {
            ThresholdPolicy::FixedHalf => 0.5,
            ThresholdPolicy::MaxF1Val => {
                let val = val.ok_or(CalibrationError::MissingValidation)?;
                if let Some(i) = val.iter().position(|(s, _)| !s.is_finite()) {
                    return Err(CalibrationError::NonFinite(i));
                }
                let probs: Vec<(f64, u8)> = val.iter().map(|&(s, y)| (self.apply(s), y)).collect();
                max_f1_threshold(&probs).ok_or(CalibrationError::MissingValidation)?
            }
        };
        Ok(())
    }

    /// Probability of "machine" for an oriented score.
    pub fn apply(&self, s: f64) -> f64 {
        match self.scale {
            ScoreScale::Probability => s.clamp(0.0, 1.0),
            ScoreScale::Raw | ScoreScale::Logit => sigmoid(self.alpha * s + self.beta),
        }
    }

    /// 1 iff apply(s) ≥ threshold.
    pub fn decide(&self, s: f64) -> u8 {
        u8::from(self.apply(s) >= self.threshold)
    }

    /// Probability of "machine" for a raw detector score.
    pub fn apply_raw(&self, raw: f64) -> f64 {
        self.apply(self.sign.effective(raw))
    }

    pub fn decide_raw(&self, raw: f64) -> u8 {
        self.decide(self.sign.effective(raw))
    }

    fn body(&self) -> String {
        let scale = match self.scale {
            ScoreScale::Raw => "raw",
            ScoreScale::Probability => "probability",
            ScoreScale::Logit => "logit",
        };
        format!(
            "format={CALIBRATION_FORMAT}\ndetector={}\nsign={}\nscale={scale}\nalpha={:?}\nbeta={:?}\nthreshold={:?}\nthreshold_policy={}\nl2_lambda={:?}\ntrain_fingerprint={}\n",
            self.detector, self.sign, self.alpha, self.beta, self.threshold, self.threshold_policy, self.l2_lambda, self.train_fingerprint
        )
    }

    /// Identifies the exact score→decision map. Clean and attacked evaluations
    /// must agree on it.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.body().as_bytes())
    }

    pub fn to_text(&self) -> String {
        format!("{}fingerprint={}\n", self.body(), self.fingerprint())
    }

    pub fn from_text(text: &str) -> Result<CalibrationModel, String> {
        let mut kv = std::collections::BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| format!("missing key {k:?}"));
        let num = |k: &str| -> Result<f64, String> {
            get(k)?.parse::<f64>().map_err(|e| format!("{k}: {e}"))
        };
        let format = get("format")?;
        if format != CALIBRATION_FORMAT {
            return Err(format!("unsupported format {format:?}"));
        }
        let scale = match get("scale")?.as_str() {
            "raw" => ScoreScale::Raw,
            "probability" => ScoreScale::Probability,
            "logit" => ScoreScale::Logit,
            other => return Err(format!("unknown scale {other:?}")),
        };
        let model = CalibrationModel {
            detector: get("detector")?,
            sign: get("sign")?.parse()?,
            scale,
            alpha: num("alpha")?,
            beta: num("beta")?,
            threshold: num("threshold")?,
            threshold_policy: get("threshold_policy")?.parse()?,
            l2_lambda: num("l2_lambda")?,
            train_fingerprint: get("train_fingerprint")?,
        };
        if !(model.threshold > 0.0 && model.threshold < 1.0) {
            return Err(format!("threshold {} outside (0, 1)", model.threshold));
        }
        let stored = get("fingerprint")?;
        if stored != model.fingerprint() {
            return Err("fingerprint does not match contents".into());
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        crate::schema::write_atomic(path, self.to_text().as_bytes())
            .map_err(|e| CalibrationError::Artifact { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<CalibrationModel, CalibrationError> {
        let err = |message: String| CalibrationError::Artifact { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        CalibrationModel::from_text(&text).map_err(err)
    }
}
