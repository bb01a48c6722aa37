mod support;

use gsmoe::data::{Dataset, VideoRecord};
use gsmoe::losses::{default_k, topk_abnormal_term, topk_indices, topk_normal_term};
use gsmoe::metrics::{abnormal_only, average_precision, evaluate, per_class_auc, roc_auc};
use gsmoe::nn::{Tape, Tensor};
use gsmoe::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{ap_prefix, auc_pairs, random_ranking};

#[test]
fn auc_and_ap_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..200 {
        let (s, l) = random_ranking(&mut rng, 500);
        let auc = roc_auc(&s, &l).unwrap();
        let ap = average_precision(&s, &l).unwrap();
        assert!((auc - auc_pairs(&s, &l)).abs() <= 1e-9, "case {case}");
        assert!((ap - ap_prefix(&s, &l)).abs() <= 1e-9, "case {case}");
    }
}

#[test]
fn ap_by_hand() {
    // ranking: 1 (0.9), 0 (0.8), 1 (0.7), 0 (0.1)
    let s = [0.8, 0.9, 0.1, 0.7];
    let l = [0, 1, 0, 1];
    let ap = average_precision(&s, &l).unwrap();
    assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
    // one of the four positive-negative pairs is misordered
    assert!((roc_auc(&s, &l).unwrap() - 0.75).abs() < 1e-15);
}

#[test]
fn tied_ap_follows_index_order() {
    let s = [0.5, 0.5, 0.5];
    assert!((average_precision(&s, &[1, 0, 0]).unwrap() - 1.0).abs() < 1e-15);
    assert!((average_precision(&s, &[0, 0, 1]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn auc_is_invariant_to_monotone_maps(
        pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..200),
    ) {
        let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let l: Vec<u8> = pairs.iter().map(|p| u8::from(p.1)).collect();
        let pos = l.iter().filter(|&&x| x == 1).count();
        prop_assume!(pos > 0 && pos < l.len());
        let mapped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(roc_auc(&s, &l).unwrap(), roc_auc(&mapped, &l).unwrap());
        let flipped: Vec<u8> = l.iter().map(|&x| 1 - x).collect();
        prop_assert!((roc_auc(&s, &l).unwrap() + roc_auc(&s, &flipped).unwrap() - 1.0).abs() < 1e-12);
        let ap = average_precision(&s, &l).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
    }
}

#[test]
fn single_class_metrics_are_undefined() {
    assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(average_precision(&[0.1, 0.2], &[0, 0]), Err(Error::UndefinedMetric(_))));
}

fn record(id: &str, abnormal: bool, class: Option<usize>, gt: &[u8]) -> VideoRecord {
    VideoRecord {
        id: id.into(),
        features: Tensor::zeros(vec![gt.len(), 1]),
        abnormal,
        class_id: class,
        snippet_gt: Some(gt.to_vec()),
    }
}

#[test]
fn evaluate_pools_snippets_and_splits_by_class() {
    let ds = Dataset {
        class_names: vec!["fire".into(), "theft".into()],
        d_feat: 1,
        records: vec![
            record("n", false, None, &[0, 0, 0]),
            record("a", true, Some(0), &[0, 1, 1]),
            record("b", true, Some(1), &[1, 0, 0]),
        ],
    };
    let scores = vec![vec![0.1, 0.2, 0.3], vec![0.2, 0.9, 0.8], vec![0.25, 0.9, 0.1]];
    let r = evaluate(&ds, &scores).unwrap();
    let all_s: Vec<f64> = scores.concat();
    let all_l = [0, 0, 0, 0, 1, 1, 1, 0, 0];
    assert!((r.auc - auc_pairs(&all_s, &all_l)).abs() < 1e-12);
    assert!((r.ap - ap_prefix(&all_s, &all_l)).abs() < 1e-12);

    let (auc_a, _) = abnormal_only(&ds.records, &scores).unwrap();
    assert!((auc_a - auc_pairs(&all_s[3..], &all_l[3..])).abs() < 1e-12);
    assert_eq!(r.auc_a, auc_a);

    let fire = auc_pairs(&all_s[..6], &all_l[..6]);
    let theft = auc_pairs(&[&all_s[..3], &all_s[6..]].concat(), &[&all_l[..3], &all_l[6..]].concat());
    assert_eq!(r.per_class_auc["fire"], fire);
    assert!((r.per_class_auc["theft"] - theft).abs() < 1e-12);
    assert_eq!(per_class_auc(&ds.records, &scores).unwrap().len(), 2);
}

/// Mean of `-ln σ(±x)` over the `k` largest values, from a plain sort.
fn topk_oracle(videos: &[Vec<f64>], k: usize, abnormal: bool) -> f64 {
    let mut total = 0.0;
    for v in videos {
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for &x in &sorted[..k] {
            let z = if abnormal { x } else { -x };
            total += (1.0 + (-z).exp()).ln();
        }
    }
    total / (videos.len() * k) as f64
}

#[test]
fn topk_terms_match_sort_and_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let len = rng.gen_range(1..80);
        let k = rng.gen_range(1..=len.min(8));
        let videos: Vec<Vec<f64>> = (0..rng.gen_range(1..6))
            .map(|_| (0..len).map(|_| rng.gen_range(-6.0..6.0)).collect())
            .collect();
        for abnormal in [true, false] {
            let mut tape = Tape::new();
            let vars: Vec<_> = videos
                .iter()
                .map(|v| tape.input(&Tensor::new(vec![v.len(), 1], v.clone()).unwrap()))
                .collect();
            let loss = if abnormal {
                topk_abnormal_term(&mut tape, &vars, k)
            } else {
                topk_normal_term(&mut tape, &vars, k)
            }
            .unwrap();
            let want = topk_oracle(&videos, k, abnormal);
            assert!((tape.scalar(loss) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn topk_indices_pick_the_largest() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..100 {
        let v: Vec<f64> = (0..50).map(|_| rng.gen_range(0..10) as f64).collect();
        let k = rng.gen_range(1..=50);
        let idx = topk_indices(&v, k);
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut picked: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
        picked.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(picked, sorted[..k].to_vec());
    }
    assert_eq!(default_k(200), 13);
    assert_eq!(default_k(50), 4);
}
