use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde_json::{json, Value};

use super::{Detector, DetectorError, DetectorHandle, ScoreOutput, Sign};
use crate::scoring::{TokenScore, TokenScorer};

/// Rank cutoff for the gltr top bucket.
pub const GLTR_TOP: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricStat {
    Likelihood,
    Rank,
    LogRank,
    Entropy,
    Gltr,
    Lrr,
}

impl MetricStat {
    pub const ALL: [MetricStat; 6] = [
        MetricStat::Likelihood,
        MetricStat::Rank,
        MetricStat::LogRank,
        MetricStat::Entropy,
        MetricStat::Gltr,
        MetricStat::Lrr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricStat::Likelihood => "likelihood",
            MetricStat::Rank => "rank",
            MetricStat::LogRank => "logrank",
            MetricStat::Entropy => "entropy",
            MetricStat::Gltr => "gltr",
            MetricStat::Lrr => "lrr",
        }
    }

    /// Machine text tends to sit in high-probability, low-entropy regions.
    pub fn default_sign(self) -> Sign {
        match self {
            MetricStat::Entropy => Sign::LowerIsMachine,
            _ => Sign::HigherIsMachine,
        }
    }
}

impl fmt::Display for MetricStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricStat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricStat::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric statistic {s:?}"))
    }
}

/// Counts of ranks in the buckets ≤10, ≤100, ≤1000, >1000.
pub fn gltr_buckets(ranks: &[u32]) -> [usize; 4] {
    let mut b = [0; 4];
    for &r in ranks {
        let i = match r {
            0..=10 => 0,
            11..=100 => 1,
            101..=1000 => 2,
            _ => 3,
        };
        b[i] += 1;
    }
    b
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Computes one statistic over a non-empty token stream.
pub fn metric_statistic(stat: MetricStat, tokens: &[TokenScore]) -> Result<ScoreOutput, DetectorError> {
    if tokens.is_empty() {
        return Err(DetectorError::EmptyText);
    }
    let mean_logprob = || mean(tokens.iter().map(|t| t.logprob));
    let neg_mean_logrank = || -mean(tokens.iter().map(|t| f64::from(t.rank).ln()));
    let out = match stat {
        MetricStat::Likelihood => ScoreOutput::new(mean_logprob()),
        MetricStat::Rank => ScoreOutput::new(-mean(tokens.iter().map(|t| f64::from(t.rank)))),
        MetricStat::LogRank => ScoreOutput::new(neg_mean_logrank()),
        MetricStat::Entropy => ScoreOutput::new(mean(tokens.iter().map(|t| t.entropy))),
        MetricStat::Gltr => {
            let ranks: Vec<u32> = tokens.iter().map(|t| t.rank).collect();
            let buckets = gltr_buckets(&ranks);
            let n = tokens.len() as f64;
            let mut out = ScoreOutput::new(buckets[0] as f64 / n);
            let hist: Vec<f64> = buckets.iter().map(|&c| c as f64 / n).collect();
            out.metadata.insert("gltr_histogram".into(), json!(hist));
            out
        }
        MetricStat::Lrr => {
            let denom = neg_mean_logrank();
            if denom == 0.0 {
                let mut out = ScoreOutput::new(0.0);
                out.flags.push("lrr_zero_denominator".into());
                out
            } else {
                ScoreOutput::new(mean_logprob() / denom)
            }
        }
    };
    Ok(out)
}

pub struct BuiltinDetector {
    handle: DetectorHandle,
    stat: MetricStat,
    scorer: Arc<dyn TokenScorer>,
}

impl BuiltinDetector {
    pub fn new(handle: DetectorHandle, stat: MetricStat, scorer: Arc<dyn TokenScorer>) -> Self {
        BuiltinDetector { handle, stat, scorer }
    }

    pub fn stat(&self) -> MetricStat {
        self.stat
    }
}

impl Detector for BuiltinDetector {
    fn handle(&self) -> &DetectorHandle {
        &self.handle
    }

    fn score_text(&self, _id: &str, text: &str) -> Result<ScoreOutput, DetectorError> {
        if text.is_empty() {
            return Err(DetectorError::EmptyText);
        }
        let tokens = self.scorer.score_tokens(text)?;
        let mut out = metric_statistic(self.stat, &tokens)?;
        out.metadata.insert("tokens".into(), Value::from(tokens.len()));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::NGramLM;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tok(rank: u32, logprob: f64) -> TokenScore {
        TokenScore { token: "x".into(), logprob, rank, entropy: 1.0 }
    }

    #[test]
    fn gltr_bucket_example() {
        let tokens: Vec<TokenScore> = [1, 5, 50, 500, 5000].iter().map(|&r| tok(r, -1.0)).collect();
        assert_eq!(gltr_buckets(&[1, 5, 50, 500, 5000]), [2, 1, 1, 1]);
        let out = metric_statistic(MetricStat::Gltr, &tokens).unwrap();
        assert_relative_eq!(out.score, 0.4);
        assert_eq!(out.metadata["gltr_histogram"], json!([0.4, 0.2, 0.2, 0.2]));
    }

    #[test]
    fn uniform_model_is_degenerate() {
        let lm = NGramLM::uniform(3, 0.5, "abcdefghijklmnopqrstuvwxy".chars()).unwrap();
        let det = BuiltinDetector::new(DetectorHandle::builtin(MetricStat::Likelihood), MetricStat::Likelihood, Arc::new(lm));
        for text in ["abc", "hello world", "zzz"] {
            assert_relative_eq!(det.score_text("i", text).unwrap().score, -(27f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn logrank_matches_recomputation() {
        let lm = NGramLM::train(&["the cat sat on the mat", "a dog ran"], 3, 0.5).unwrap();
        let text = "the dog sat on a cat";
        assert_eq!(text.chars().count(), 20);
        let tokens = lm.score_tokens(text).unwrap();
        let mut acc = 0.0;
        for t in &tokens {
            acc += (t.rank as f64).ln();
        }
        let expected = -acc / 20.0;
        let got = metric_statistic(MetricStat::LogRank, &tokens).unwrap().score;
        assert_relative_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn lrr_zero_denominator_flagged() {
        let tokens = vec![tok(1, -0.1), tok(1, -0.2)];
        let out = metric_statistic(MetricStat::Lrr, &tokens).unwrap();
        assert_eq!(out.score, 0.0);
        assert_eq!(out.flags, vec!["lrr_zero_denominator"]);
        let out = metric_statistic(MetricStat::Lrr, &[tok(1, -1.0), tok(3, -2.0)]).unwrap();
        assert_relative_eq!(out.score, -1.5 / (-(3f64).ln() / 2.0));
    }

    #[test]
    fn formulas() {
        let tokens = vec![
            TokenScore { token: "a".into(), logprob: -1.0, rank: 2, entropy: 0.5 },
            TokenScore { token: "b".into(), logprob: -3.0, rank: 4, entropy: 1.5 },
        ];
        let s = |m| metric_statistic(m, &tokens).unwrap().score;
        assert_relative_eq!(s(MetricStat::Likelihood), -2.0);
        assert_relative_eq!(s(MetricStat::Rank), -3.0);
        assert_relative_eq!(s(MetricStat::LogRank), -(8f64).ln() / 2.0);
        assert_relative_eq!(s(MetricStat::Entropy), 1.0);
        assert_relative_eq!(s(MetricStat::Gltr), 1.0);
    }

    #[test]
    fn builtin_scores_are_deterministic() {
        let lm: Arc<dyn TokenScorer> = Arc::new(NGramLM::train(&["some training text here"], 3, 0.5).unwrap());
        for stat in MetricStat::ALL {
            let a = BuiltinDetector::new(DetectorHandle::builtin(stat), stat, lm.clone());
            let b = BuiltinDetector::new(DetectorHandle::builtin(stat), stat, lm.clone());
            let x = a.score_text("1", "the same text").unwrap().score;
            let y = b.score_text("1", "the same text").unwrap().score;
            assert_eq!(x.to_bits(), y.to_bits(), "{stat}");
        }
    }

    proptest! {
        #[test]
        fn gltr_bounds(ranks in proptest::collection::vec(1u32..5000, 1..60)) {
            let tokens: Vec<TokenScore> = ranks.iter().map(|&r| tok(r, -1.0)).collect();
            let out = metric_statistic(MetricStat::Gltr, &tokens).unwrap();
            prop_assert!((0.0..=1.0).contains(&out.score));
            let hist: Vec<f64> = serde_json::from_value(out.metadata["gltr_histogram"].clone()).unwrap();
            prop_assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
