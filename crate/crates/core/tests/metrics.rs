use hamur_core::data::{Dataset, DatasetSpec, FieldSpec};
use hamur_core::metrics::{auc, evaluate_scores, logloss, TotalMode};
use proptest::prelude::*;

/// Fraction of positive/negative pairs ordered correctly, ties counted ½.
fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        if labels[i] != 1 {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] != 0 {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

fn dataset(domains: &[u32], labels: &[u8]) -> Dataset {
    let spec = DatasetSpec {
        num_domains: *domains.iter().max().unwrap(),
        fields: vec![FieldSpec {
            name: "a".into(),
            vocab: 2,
        }],
        domain_rule: None,
        label_rule: None,
    };
    Dataset::new(spec, vec![1; domains.len()], domains.to_vec(), labels.to_vec()).unwrap()
}

#[test]
fn single_domain_total_equals_domain() {
    let ds = dataset(&[1, 1, 1, 1], &[0, 1, 0, 1]);
    let r = evaluate_scores(&ds, &[0.2, 0.7, 0.4, 0.3], TotalMode::Pooled).unwrap();
    assert_eq!(r.total, r.domains[0]);
}

#[test]
fn pooled_total_matches_pairwise_union() {
    let domains = [1, 1, 1, 2, 2, 2, 2];
    let labels = [0, 1, 1, 0, 1, 0, 1];
    let scores = [0.1, 0.6, 0.3, 0.5, 0.55, 0.2, 0.3];
    let r = evaluate_scores(&dataset(&domains, &labels), &scores, TotalMode::Pooled).unwrap();
    assert!((r.total.auc.unwrap() - pairwise_auc(&scores, &labels)).abs() < 1e-12);
    assert_eq!(r.domains.iter().map(|d| d.n).sum::<usize>(), 7);
    assert_eq!(r.domains[0].n, 3);
}

#[test]
fn macro_total_averages_defined_domains() {
    let domains = [1, 1, 2, 2, 3];
    let labels = [0, 1, 1, 0, 1];
    let scores = [0.1, 0.9, 0.2, 0.8, 0.5];
    let r = evaluate_scores(&dataset(&domains, &labels), &scores, TotalMode::Macro).unwrap();
    assert_eq!(r.domains[2].auc, None);
    assert_eq!(r.total.auc, Some(0.5));
}

#[test]
fn single_class_domain_is_absent_not_zero() {
    let r = evaluate_scores(&dataset(&[1, 1, 2, 2], &[1, 1, 0, 1]), &[0.3, 0.4, 0.1, 0.9], TotalMode::Pooled).unwrap();
    assert_eq!(r.domains[0].auc, None);
    assert_eq!(r.domains[1].auc, Some(1.0));
}

#[test]
fn length_mismatch_is_an_error() {
    assert!(logloss(&[0.5, 0.5], &[1]).is_err());
    assert!(auc(&[0.5, 0.5], &[1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_auc_equals_pairwise(pairs in proptest::collection::vec((0u8..20, 0u8..2), 2..1000)) {
        // Coarse integer scores force many ties.
        let mut scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 20.0).collect();
        let mut labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        labels[0] = 0;
        labels[1] = 1;
        scores[0] = scores[0].min(0.99);
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((a - pairwise_auc(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(raw in proptest::collection::vec((-5.0f64..5.0, 0u8..2), 2..300), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let scores: Vec<f64> = raw.iter().map(|p| (p.0 * 100.0).round() / 100.0).collect();
        let mut labels: Vec<u8> = raw.iter().map(|p| p.1).collect();
        labels[0] = 0;
        labels[1] = 1;
        let base = auc(&scores, &labels).unwrap();
        let maps: [&dyn Fn(f64) -> f64; 3] = [&|x| a * x + b, &|x| (x / 2.0).exp(), &|x| 1.0 / (1.0 + (-a * x).exp())];
        for f in maps {
            let mapped: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            prop_assert!((auc(&mapped, &labels).unwrap() - base).abs() <= 1e-12);
        }
    }
}
