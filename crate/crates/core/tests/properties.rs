use std::collections::BTreeSet;

use forgeval_core::attack::{attack_dataset, AttackKind, AttackMode, AttackSpec};
use forgeval_core::calibration::{CalibrationModel, FitOptions, ThresholdPolicy};
use forgeval_core::metrics::{self, Metric};
use forgeval_core::reporting::stable_fingerprint;
use forgeval_core::schema::{split, Label, Record, SplitRatio};
use forgeval_core::{config, AttackConfig, NGramLM, Sign};
use proptest::prelude::*;

fn records(labels: &[bool], texts: &[String]) -> Vec<Record> {
    labels
        .iter()
        .zip(texts.iter().cycle())
        .enumerate()
        .map(|(i, (&m, t))| Record::new(format!("id{i}"), t.clone(), if m { Label::Machine } else { Label::Human }))
        .collect()
}

fn word_text() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-zA-Z]{1,8}", 1..12).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_stratified_partition(labels in prop::collection::vec(any::<bool>(), 1..300), seed in any::<u64>(),
                                       w in (1u64..10, 0u64..4, 1u64..4)) {
        let recs = records(&labels, &["t".to_string()]);
        let ratio = SplitRatio::new(w.0, w.1, w.2).unwrap();
        let out = split(&recs, ratio, seed).unwrap();
        let mut seen = BTreeSet::new();
        for part in [&out.train, &out.val, &out.test] {
            for r in part.iter() {
                prop_assert!(seen.insert(r.id.clone()), "{} in two splits", r.id);
            }
        }
        prop_assert_eq!(seen.len(), recs.len());
        let again = split(&recs, ratio, seed).unwrap();
        prop_assert_eq!(&out.test, &again.test);
        // per label, each split is within one record of its share
        for label in [Label::Human, Label::Machine] {
            let n = recs.iter().filter(|r| r.label == label).count() as f64;
            for (part, weight) in [(&out.train, w.0), (&out.val, w.1), (&out.test, w.2)] {
                let got = part.iter().filter(|r| r.label == label).count() as f64;
                let share = n * weight as f64 / (w.0 + w.1 + w.2) as f64;
                prop_assert!((got - share).abs() < 1.0 + 1e-9, "{label:?}: {got} vs share {share}");
            }
        }
    }

    #[test]
    fn attacks_leave_humans_alone_and_are_seeded(labels in prop::collection::vec(any::<bool>(), 1..40),
                                                 texts in prop::collection::vec(word_text(), 1..10),
                                                 rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let recs = records(&labels, &texts);
        let specs = vec![AttackSpec::new(AttackKind::TypoMixed, rate, seed), AttackSpec::new(AttackKind::FormatChars, rate, seed)];
        let a = attack_dataset(&specs, &recs, AttackMode::Append, 3).unwrap();
        let b = attack_dataset(&specs, &recs, AttackMode::Append, 1).unwrap();
        prop_assert_eq!(&a.records, &b.records);
        let machines = recs.iter().filter(|r| r.label == Label::Machine).count();
        prop_assert_eq!(a.records.len(), recs.len() + 2 * machines);
        prop_assert_eq!(a.provenance.len(), 2 * machines);
        for r in a.records.iter().filter(|r| r.label == Label::Human) {
            prop_assert!(recs.contains(r));
        }
        let replaced = attack_dataset(&specs, &recs, AttackMode::Replace, 2).unwrap();
        prop_assert!(replaced.records.iter().all(|r| r.label == Label::Human || r.attack.is_some()));
    }

    #[test]
    fn zero_rate_is_identity(texts in prop::collection::vec(word_text(), 1..10), seed in any::<u64>()) {
        let recs = records(&vec![true; texts.len()], &texts);
        for kind in [AttackKind::TypoInsert, AttackKind::TypoDelete, AttackKind::Homoglyph, AttackKind::Synonym] {
            let out = attack_dataset(&[AttackSpec::new(kind, 0.0, seed)], &recs, AttackMode::Replace, 2).unwrap();
            for (v, r) in out.records.iter().zip(&recs) {
                prop_assert_eq!(&v.text, &r.text);
            }
        }
    }

    #[test]
    fn auroc_flips_with_the_sign(pairs in prop::collection::vec((-5i32..5, any::<bool>()), 2..80)) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| u8::from(p.1)).collect();
        match (metrics::auroc(&scores, &labels), metrics::auroc(&neg, &labels)) {
            (Metric::Value(a), Metric::Value(b)) => prop_assert!((a + b - 1.0).abs() < 1e-12),
            (a, b) => prop_assert!(a.value().is_none() && b.value().is_none()),
        }
    }

    #[test]
    fn calibration_is_monotone_and_round_trips(pairs in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 4..100)) {
        let mut data: Vec<(f64, u8)> = pairs.iter().map(|&(s, y)| (s + 2.0 * f64::from(u8::from(y)), u8::from(y))).collect();
        data[0].1 = 0;
        data[1].1 = 1;
        let opts = FitOptions { l2_lambda: 1e-3, policy: ThresholdPolicy::FixedHalf, max_iter: 100 };
        let (model, _) = CalibrationModel::fit("d", Sign::HigherIsMachine, &data, None, &opts).unwrap();
        let mut xs: Vec<f64> = data.iter().map(|d| d.0).collect();
        xs.sort_by(f64::total_cmp);
        for w in xs.windows(2) {
            let (a, b) = (model.apply(w[0]), model.apply(w[1]));
            let ordered = if model.alpha >= 0.0 { a <= b } else { a >= b };
            prop_assert!(ordered, "apply not monotone at {:?}", w);
        }
        let back = CalibrationModel::from_text(&model.to_text()).unwrap();
        prop_assert_eq!(back.fingerprint(), model.fingerprint());
        prop_assert_eq!(back.alpha.to_bits(), model.alpha.to_bits());
    }

    #[test]
    fn lm_distributions_are_normalized(corpus in prop::collection::vec(word_text(), 1..6), history in "[a-z ]{0,5}") {
        let lm = NGramLM::train(&corpus, 3, 0.5).unwrap();
        let total: f64 = lm.distribution(&history).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "sums to {total}");
        let back = NGramLM::from_artifact(lm.to_artifact()).unwrap();
        prop_assert_eq!(back.fingerprint(), lm.fingerprint());
    }

    #[test]
    fn timing_fields_do_not_change_fingerprints(a in 0.0f64..1e4, b in 0.0f64..1e4) {
        let line = |lat: f64| format!("{{\"record_id\":\"x\",\"latency_ms\":{lat},\"score\":1.5}}\n");
        prop_assert_eq!(stable_fingerprint("p.jsonl", &line(a)), stable_fingerprint("p.jsonl", &line(b)));
        let other = "{\"record_id\":\"x\",\"latency_ms\":1,\"score\":2.5}\n";
        prop_assert_ne!(stable_fingerprint("p.jsonl", &line(a)), stable_fingerprint("p.jsonl", other));
    }
}

#[test]
fn toml_and_json_configs_agree() {
    let toml = "input = \"data\"\nseed = 4\n[[attacks]]\nname = \"synonym\"\nrate = 0.25\n";
    let json = serde_json::json!({"input": "data", "seed": 4, "attacks": [{"name": "synonym", "rate": 0.25}]});
    let a: AttackConfig = config::from_toml(toml).unwrap();
    let b: AttackConfig = config::from_value(json).unwrap();
    assert_eq!(a, b);
}
