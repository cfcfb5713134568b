//! Per-token predictive statistics for metric detectors, and the built-in
//! character n-gram language model with add-α smoothing.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fingerprint::sha256_hex;

pub const LM_FORMAT: &str = "forgeval-ngram";
pub const LM_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Context padding before the first character. Never predicted.
const BOS: u32 = u32::MAX;
const EOS: u32 = 0;
const UNK: u32 = 1;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("cannot score empty text")]
    EmptyText,
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("n-gram order must be at least 1")]
    InvalidOrder,
    #[error("smoothing alpha must be finite and > 0, got {0}")]
    InvalidAlpha(f64),
    #[error("language model artifact {path}: {message}")]
    Artifact { path: String, message: String },
    #[error("external scorer: {0}")]
    External(String),
}

/// Statistics of the model's predictive distribution at one token position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub logprob: f64,
    /// 1 = most probable token at this position (ties broken by vocabulary order).
    pub rank: u32,
    /// Natural-log entropy of the full predictive distribution.
    pub entropy: f64,
}

/// Anything that can turn text into a stream of [`TokenScore`]s.
pub trait TokenScorer: Send + Sync {
    fn score_tokens(&self, text: &str) -> Result<Vec<TokenScore>, ScoreError>;

    /// Identifies the scorer in fingerprints and reports.
    fn describe(&self) -> String;
}

pub fn score_text(scorer: &dyn TokenScorer, text: &str) -> Result<Vec<TokenScore>, ScoreError> {
    if text.is_empty() {
        return Err(ScoreError::EmptyText);
    }
    scorer.score_tokens(text)
}

/// Predictable tokens: end-of-text, unknown, then the known characters in codepoint
/// order. This order is the rank tie-break order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocabulary {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Self {
        let mut chars: Vec<char> = chars.into_iter().collect();
        chars.sort_unstable();
        chars.dedup();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i as u32 + 2)).collect();
        Vocabulary { chars, index }
    }

    /// Number of predictable tokens, including end-of-text and unknown.
    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    fn id(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    fn token_text(&self, id: u32) -> String {
        match id {
            EOS => "</s>".into(),
            UNK => "<unk>".into(),
            i => self.chars[i as usize - 2].to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ContextCounts {
    counts: Vec<u32>,
    total: u64,
    entropy: f64,
}

/// Character-level n-gram model with add-α smoothing and no backoff: an unseen
/// context predicts the uniform distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct NGramLM {
    order: usize,
    alpha: f64,
    vocab: Vocabulary,
    contexts: HashMap<Vec<u32>, ContextCounts>,
}

impl NGramLM {
    /// A model with no observations over the given characters.
    pub fn uniform(order: usize, alpha: f64, chars: impl IntoIterator<Item = char>) -> Result<Self, ScoreError> {
        check_params(order, alpha)?;
        Ok(NGramLM { order, alpha, vocab: Vocabulary::new(chars), contexts: HashMap::new() })
    }

    pub fn train<S: AsRef<str>>(corpus: &[S], order: usize, alpha: f64) -> Result<Self, ScoreError> {
        check_params(order, alpha)?;
        if corpus.iter().all(|t| t.as_ref().is_empty()) {
            return Err(ScoreError::EmptyCorpus);
        }
        let vocab = Vocabulary::new(corpus.iter().flat_map(|t| t.as_ref().chars()));
        let v = vocab.len();
        let mut raw: HashMap<Vec<u32>, Vec<u32>> = HashMap::new();
        for text in corpus {
            let mut ids: Vec<u32> = text.as_ref().chars().map(|c| vocab.id(c)).collect();
            ids.push(EOS);
            let mut history = vec![BOS; order - 1];
            for id in ids {
                raw.entry(history.clone()).or_insert_with(|| vec![0; v])[id as usize] += 1;
                if order > 1 {
                    history.remove(0);
                    history.push(id);
                }
            }
        }
        let mut lm = NGramLM { order, alpha, vocab, contexts: HashMap::new() };
        lm.contexts = raw.into_iter().map(|(ctx, counts)| (ctx, lm.summarize(counts))).collect();
        Ok(lm)
    }

    fn summarize(&self, counts: Vec<u32>) -> ContextCounts {
        let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        let denom = total as f64 + self.alpha * self.vocab.len() as f64;
        let entropy = -counts
            .iter()
            .map(|&c| {
                let p = (f64::from(c) + self.alpha) / denom;
                p * p.ln()
            })
            .sum::<f64>();
        ContextCounts { counts, total, entropy }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Token ids of `text` as the model sees them (unknown characters collapse).
    fn ids(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.vocab.id(c)).collect()
    }

    /// Full conditional distribution after `history` (most recent last), in
    /// vocabulary order.
    pub fn distribution(&self, history: &str) -> Vec<f64> {
        let ctx = self.context_for(&self.ids(history), self.ids(history).len());
        let v = self.vocab.len();
        match self.contexts.get(&ctx) {
            None => vec![1.0 / v as f64; v],
            Some(cc) => {
                let denom = cc.total as f64 + self.alpha * v as f64;
                cc.counts.iter().map(|&c| (f64::from(c) + self.alpha) / denom).collect()
            }
        }
    }

    /// Context key for predicting `ids[pos]`.
    fn context_for(&self, ids: &[u32], pos: usize) -> Vec<u32> {
        let n = self.order - 1;
        (0..n)
            .map(|k| {
                let back = n - k;
                if pos >= back {
                    ids[pos - back]
                } else {
                    BOS
                }
            })
            .collect()
    }

    fn position_score(&self, ctx: &[u32], token: u32) -> (f64, u32, f64) {
        let v = self.vocab.len();
        match self.contexts.get(ctx) {
            None => ((1.0 / v as f64).ln(), token + 1, (v as f64).ln()),
            Some(cc) => {
                let denom = cc.total as f64 + self.alpha * v as f64;
                let c = cc.counts[token as usize];
                let logprob = ((f64::from(c) + self.alpha) / denom).ln();
                let ahead = cc
                    .counts
                    .iter()
                    .enumerate()
                    .filter(|&(w, &cw)| cw > c || (cw == c && (w as u32) < token))
                    .count();
                (logprob, ahead as u32 + 1, cc.entropy)
            }
        }
    }

    /// Samples one text by ancestral sampling from the start context until
    /// end-of-text or `max_chars`. The unknown token is never emitted.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, max_chars: usize) -> String {
        let mut ids: Vec<u32> = Vec::new();
        while ids.len() < max_chars {
            let ctx = self.context_for(&ids, ids.len());
            let v = self.vocab.len();
            let weights: Vec<f64> = match self.contexts.get(&ctx) {
                None => vec![1.0; v],
                Some(cc) => cc.counts.iter().map(|&c| f64::from(c) + self.alpha).collect(),
            };
            let total: f64 = weights.iter().enumerate().filter(|&(w, _)| w as u32 != UNK).map(|(_, x)| x).sum();
            let mut draw = rng.random::<f64>() * total;
            let mut pick = EOS;
            for (w, &x) in weights.iter().enumerate() {
                if w as u32 == UNK {
                    continue;
                }
                if draw < x {
                    pick = w as u32;
                    break;
                }
                draw -= x;
                pick = w as u32;
            }
            if pick == EOS {
                break;
            }
            ids.push(pick);
        }
        ids.iter().map(|&id| self.vocab.chars[id as usize - 2]).collect()
    }

    pub fn to_artifact(&self) -> LmArtifact {
        let mut contexts: Vec<ContextEntry> = self
            .contexts
            .iter()
            .map(|(ctx, cc)| ContextEntry {
                context: ctx.iter().map(|&id| if id == BOS { -1 } else { i64::from(id) }).collect(),
                counts: cc
                    .counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(w, &c)| (w as u32, c))
                    .collect(),
            })
            .collect();
        contexts.sort_by(|a, b| a.context.cmp(&b.context));
        LmArtifact {
            format: LM_FORMAT.to_string(),
            version: LM_FORMAT_VERSION,
            order: self.order,
            alpha: self.alpha,
            vocabulary: self.vocab.chars.iter().collect(),
            contexts,
        }
    }

    pub fn from_artifact(artifact: LmArtifact) -> Result<Self, String> {
        if artifact.format != LM_FORMAT {
            return Err(format!("not a {LM_FORMAT} artifact (format {:?})", artifact.format));
        }
        if artifact.version != LM_FORMAT_VERSION {
            return Err(format!("unsupported format version {}", artifact.version));
        }
        check_params(artifact.order, artifact.alpha).map_err(|e| e.to_string())?;
        let vocab = Vocabulary::new(artifact.vocabulary.chars());
        if vocab.chars.len() != artifact.vocabulary.chars().count() {
            return Err("vocabulary has duplicate characters".into());
        }
        let v = vocab.len();
        let mut lm = NGramLM { order: artifact.order, alpha: artifact.alpha, vocab, contexts: HashMap::new() };
        for entry in artifact.contexts {
            if entry.context.len() != lm.order - 1 {
                return Err(format!("context {:?} does not match order {}", entry.context, lm.order));
            }
            let ctx = entry
                .context
                .iter()
                .map(|&id| match id {
                    -1 => Ok(BOS),
                    i if i >= 0 && (i as usize) < v => Ok(i as u32),
                    i => Err(format!("token id {i} out of range")),
                })
                .collect::<Result<Vec<u32>, String>>()?;
            let mut counts = vec![0u32; v];
            for (w, c) in entry.counts {
                *counts.get_mut(w as usize).ok_or_else(|| format!("token id {w} out of range"))? = c;
            }
            let cc = lm.summarize(counts);
            lm.contexts.insert(ctx, cc);
        }
        Ok(lm)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(&self.to_artifact()).expect("artifact serializes");
        s.push('\n');
        s
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), ScoreError> {
        crate::schema::write_atomic(path, self.to_json().as_bytes()).map_err(|e| ScoreError::Artifact {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScoreError> {
        let err = |message: String| ScoreError::Artifact { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let artifact: LmArtifact = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        NGramLM::from_artifact(artifact).map_err(err)
    }

    /// Count table as `context string -> token -> count`, for inspection and tests.
    pub fn count_table(&self) -> BTreeMap<String, BTreeMap<String, u32>> {
        let show = |id: u32| if id == BOS { "<s>".to_string() } else { self.vocab.token_text(id) };
        self.contexts
            .iter()
            .map(|(ctx, cc)| {
                let key = ctx.iter().map(|&id| show(id)).collect::<Vec<_>>().join("|");
                let row = cc
                    .counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(w, &c)| (self.vocab.token_text(w as u32), c))
                    .collect();
                (key, row)
            })
            .collect()
    }
}

impl TokenScorer for NGramLM {
    fn score_tokens(&self, text: &str) -> Result<Vec<TokenScore>, ScoreError> {
        if text.is_empty() {
            return Err(ScoreError::EmptyText);
        }
        let ids = self.ids(text);
        Ok(text
            .chars()
            .enumerate()
            .map(|(pos, c)| {
                let ctx = self.context_for(&ids, pos);
                let (logprob, rank, entropy) = self.position_score(&ctx, ids[pos]);
                TokenScore { token: c.to_string(), logprob, rank, entropy }
            })
            .collect())
    }

    fn describe(&self) -> String {
        format!("ngram(order={}, alpha={}, sha256={})", self.order, self.alpha, &self.fingerprint()[..16])
    }
}

fn check_params(order: usize, alpha: f64) -> Result<(), ScoreError> {
    if order == 0 {
        return Err(ScoreError::InvalidOrder);
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(ScoreError::InvalidAlpha(alpha));
    }
    Ok(())
}

/// Persisted form of [`NGramLM`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmArtifact {
    pub format: String,
    pub version: u32,
    pub order: usize,
    pub alpha: f64,
    pub vocabulary: String,
    pub contexts: Vec<ContextEntry>,
}

/// `context` holds token ids with -1 for start-of-text padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub context: Vec<i64>,
    pub counts: Vec<(u32, u32)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    const TRAIN: &[&str] = &[
        "the cat sat on the mat",
        "the dog sat on the log",
        "a cat and a dog met on a mat",
    ];

    #[test]
    fn unigram_hand_counts() {
        // corpus "ab": a=1, b=1, </s>=1, <unk>=0; V = 4
        let lm = NGramLM::train(&["ab"], 1, 1.0).unwrap();
        assert_eq!(lm.vocabulary().len(), 4);
        let dist = lm.distribution("");
        // vocabulary order: </s>, <unk>, a, b
        assert_relative_eq!(dist[0], 2.0 / 7.0, epsilon = 1e-15);
        assert_relative_eq!(dist[1], 1.0 / 7.0, epsilon = 1e-15);
        assert_relative_eq!(dist[2], 2.0 / 7.0, epsilon = 1e-15);
        assert_relative_eq!(dist[3], 2.0 / 7.0, epsilon = 1e-15);
        let scores = lm.score_tokens("ab").unwrap();
        assert_relative_eq!(scores[1].logprob, (2.0f64 / 7.0).ln(), epsilon = 1e-15);
        // b ties with </s> and a; both precede it in vocabulary order
        assert_eq!(scores[1].rank, 3);
        assert_eq!(scores[0].rank, 2);
    }

    #[test]
    fn uniform_model() {
        let letters = "abcdefghijklmnopqrstuvwxy".chars();
        let lm = NGramLM::uniform(3, 0.5, letters).unwrap();
        assert_eq!(lm.vocabulary().len(), 27);
        let scores = lm.score_tokens("hello").unwrap();
        for (s, c) in scores.iter().zip("hello".chars()) {
            assert_relative_eq!(s.logprob, -(27f64).ln(), epsilon = 1e-15);
            assert_relative_eq!(s.entropy, (27f64).ln(), epsilon = 1e-15);
            assert_eq!(s.rank, 3 + (c as u32 - 'a' as u32));
        }
    }

    #[test]
    fn large_alpha_approaches_uniform() {
        let lm = NGramLM::train(TRAIN, 3, 1e9).unwrap();
        let v = lm.vocabulary().len() as f64;
        for s in lm.score_tokens("the cat").unwrap() {
            assert_relative_eq!(s.entropy, v.ln(), epsilon = 1e-6);
            assert_relative_eq!(s.logprob, -v.ln(), epsilon = 1e-6);
        }
    }

    #[test]
    fn mode_token_ranks_first() {
        let lm = NGramLM::train(&["aaaa"], 3, 0.5).unwrap();
        assert!(lm.score_tokens("aaaa").unwrap().iter().all(|s| s.rank == 1));
    }

    #[test]
    fn training_is_deterministic() {
        let a = NGramLM::train(TRAIN, 3, 0.5).unwrap();
        let b = NGramLM::train(TRAIN, 3, 0.5).unwrap();
        assert_eq!(a.count_table(), b.count_table());
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn errors() {
        assert!(matches!(NGramLM::train(&[] as &[&str], 3, 0.5), Err(ScoreError::EmptyCorpus)));
        assert!(matches!(NGramLM::train(&["x"], 0, 0.5), Err(ScoreError::InvalidOrder)));
        assert!(matches!(NGramLM::train(&["x"], 2, 0.0), Err(ScoreError::InvalidAlpha(_))));
        let lm = NGramLM::train(&["x"], 2, 0.5).unwrap();
        assert!(matches!(score_text(&lm, ""), Err(ScoreError::EmptyText)));
    }

    /// Independent recomputation: P(w | context) straight from the counting
    /// definition over the raw corpus, no model internals.
    fn brute_force_logprob(corpus: &[&str], order: usize, alpha: f64, text: &str) -> f64 {
        let mut vocab: Vec<char> = corpus.iter().flat_map(|t| t.chars()).collect();
        vocab.sort();
        vocab.dedup();
        let v = vocab.len() as f64 + 2.0;
        let norm = |c: Option<char>| -> Option<char> {
            match c {
                Some(ch) if !vocab.contains(&ch) => Some('\u{fffd}'),
                other => other,
            }
        };
        // sequences of Option<char>: None is end-of-text; contexts use '\0' for padding
        let seqs: Vec<Vec<Option<char>>> = corpus
            .iter()
            .map(|t| t.chars().map(Some).chain(std::iter::once(None)).collect())
            .collect();
        let ctx_of = |seq: &[Option<char>], pos: usize| -> Vec<Option<char>> {
            (0..order - 1)
                .map(|k| {
                    let back = order - 1 - k;
                    if pos >= back { seq[pos - back] } else { Some('\0') }
                })
                .collect()
        };
        let text_seq: Vec<Option<char>> = text.chars().map(|c| norm(Some(c))).collect();
        let mut total = 0.0;
        for pos in 0..text_seq.len() {
            let ctx = ctx_of(&text_seq, pos);
            let mut c_ctx = 0.0;
            let mut c_tok = 0.0;
            for seq in &seqs {
                for p in 0..seq.len() {
                    if ctx_of(seq, p) == ctx {
                        c_ctx += 1.0;
                        if seq[p] == text_seq[pos] {
                            c_tok += 1.0;
                        }
                    }
                }
            }
            total += ((c_tok + alpha) / (c_ctx + alpha * v)).ln();
        }
        total
    }

    #[test]
    fn chain_rule_matches_brute_force() {
        let lm = NGramLM::train(TRAIN, 3, 0.5).unwrap();
        let text = "the cat met a dog!!";
        let text = format!("{text}z");
        assert_eq!(text.chars().count(), 20);
        let total: f64 = lm.score_tokens(&text).unwrap().iter().map(|s| s.logprob).sum();
        let expected = brute_force_logprob(TRAIN, 3, 0.5, &text);
        assert_relative_eq!(total, expected, max_relative = 1e-12);
    }

    #[test]
    fn artifact_round_trip() {
        let lm = NGramLM::train(TRAIN, 3, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.json");
        lm.save(&p).unwrap();
        let back = NGramLM::load(&p).unwrap();
        assert_eq!(back, lm);
        assert_eq!(back.to_json(), lm.to_json());
        std::fs::write(&p, lm.to_json().replace("\"version\":1", "\"version\":9")).unwrap();
        assert!(NGramLM::load(&p).is_err());
    }

    #[test]
    fn sampling_stays_in_vocabulary() {
        let lm = NGramLM::train(TRAIN, 3, 0.1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = lm.sample(&mut rng, 80);
            assert!(s.chars().count() <= 80);
            assert!(s.chars().all(|c| lm.vocabulary().chars().contains(&c)));
        }
    }

    proptest! {
        #[test]
        fn distribution_properties(text in "[a-z !?]{1,30}", history in "[a-z ]{0,4}", alpha in 0.01f64..5.0) {
            let lm = NGramLM::train(TRAIN, 3, alpha).unwrap();
            let dist = lm.distribution(&history);
            let sum: f64 = dist.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            let v = lm.vocabulary().len() as f64;
            for s in lm.score_tokens(&text).unwrap() {
                prop_assert!(s.rank >= 1);
                prop_assert!(s.logprob <= 0.0);
                prop_assert!(s.entropy >= 0.0 && s.entropy <= v.ln() + 1e-12);
            }
        }

        #[test]
        fn rank_one_iff_mode(text in "[a-z ]{1,20}") {
            let lm = NGramLM::train(TRAIN, 2, 0.5).unwrap();
            let scores = lm.score_tokens(&text).unwrap();
            let chars: Vec<char> = text.chars().collect();
            for (pos, s) in scores.iter().enumerate() {
                let history: String = chars[..pos].iter().collect();
                let dist = lm.distribution(&history);
                let max = dist.iter().cloned().fold(f64::MIN, f64::max);
                let mode = dist.iter().position(|&p| p == max).unwrap();
                let realized = lm.ids(&chars[pos].to_string())[0] as usize;
                prop_assert_eq!(s.rank == 1, realized == mode);
            }
        }
    }
}
