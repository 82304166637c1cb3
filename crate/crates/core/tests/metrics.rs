mod common;

use common::*;
use ctrg::metrics::{bleu, ce_metrics, retrieval_recall, rouge_l, Averaging, SubjectTokens};
use ctrg::ten::Matrix;
use proptest::prelude::*;

fn t(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn hand_computed_examples() {
    let b = bleu(&[t("the cat sat")], &[vec![t("the cat sat down")]], 1).unwrap();
    assert!((b - (1.0f64 - 4.0 / 3.0).exp()).abs() <= 1e-12);
    assert!((rouge_l(&t("a b c"), &t("a c")).unwrap() - 0.8).abs() <= 1e-12);
    let pred = vec![vec![1, 1, 1, 1, 0, 0]];
    let truth = vec![vec![1, 1, 1, 0, 1, 1]];
    let p = ce_metrics(&pred, &truth, Averaging::Micro).unwrap();
    assert!((p.precision - 0.75).abs() <= 1e-12);
    assert!((p.recall - 0.6).abs() <= 1e-12);
    assert!((p.f1 - 2.0 / 3.0).abs() <= 1e-12);
    let zero = ce_metrics(&[vec![0, 0]], &[vec![1, 0]], Averaging::Micro).unwrap();
    assert_eq!((zero.precision, zero.recall, zero.f1), (0.0, 0.0, 0.0));
}

#[test]
fn macro_averages_per_label() {
    let pred = vec![vec![1, 0], vec![1, 1]];
    let truth = vec![vec![1, 0], vec![0, 1]];
    let m = ce_metrics(&pred, &truth, Averaging::Macro).unwrap();
    // label 0: P 1/2 R 1; label 1: P 1 R 1
    assert!((m.precision - 0.75).abs() <= 1e-12);
    assert!((m.recall - 1.0).abs() <= 1e-12);
}

fn tokens_of(m: &Matrix<f64>) -> SubjectTokens<f64> {
    SubjectTokens {
        tokens: (0..m.rows()).map(|i| Some(m.row(i).to_vec())).collect(),
    }
}

#[test]
fn identical_sets_and_singletons_retrieve_perfectly() {
    let mut r = rng(3);
    let vols: Vec<Matrix<f64>> = (0..10).map(|_| rand_unit_rows(&mut r, 4, 8)).collect();
    let texts: Vec<SubjectTokens<f64>> = vols.iter().map(tokens_of).collect();
    assert_eq!(retrieval_recall(&texts, &vols, &[1]).unwrap(), vec![1.0]);
    assert_eq!(retrieval_recall(&texts[..1], &vols[..1], &[1]).unwrap(), vec![1.0]);
}

#[test]
fn random_embeddings_sit_at_the_permutation_baseline() {
    let mut total = 0.0;
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let vols: Vec<Matrix<f64>> = (0..100).map(|_| rand_unit_rows(&mut r, 4, 16)).collect();
        let texts: Vec<SubjectTokens<f64>> = (0..100).map(|_| tokens_of(&rand_unit_rows(&mut r, 4, 16))).collect();
        total += retrieval_recall(&texts, &vols, &[10]).unwrap()[0];
    }
    let mean = total / 20.0;
    assert!((mean - 0.1).abs() <= 0.06, "{mean}");
}

proptest! {
    #[test]
    fn bleu_and_rouge_match_oracles(seed in any::<u64>(), n in 1usize..5) {
        let mut r = rng(seed);
        let hyps: Vec<Vec<String>> = (0..n).map(|_| rand_words(&mut r, 1, 10, 4)).collect();
        let refs: Vec<Vec<Vec<String>>> = (0..n).map(|_| vec![rand_words(&mut r, 1, 10, 4), rand_words(&mut r, 1, 10, 4)]).collect();
        for order in 1..=4 {
            prop_assert!((bleu(&hyps, &refs, order).unwrap() - bleu_oracle(&hyps, &refs, order)).abs() <= 1e-12);
        }
        for (h, rs) in hyps.iter().zip(&refs) {
            prop_assert!((rouge_l(h, &rs[0]).unwrap() - rouge_oracle(h, &rs[0])).abs() <= 1e-12);
        }
    }

    #[test]
    fn bleu_non_increasing_in_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let hyps: Vec<Vec<String>> = (0..3).map(|_| rand_words(&mut r, 4, 12, 3)).collect();
        let refs: Vec<Vec<Vec<String>>> = (0..3).map(|_| vec![rand_words(&mut r, 4, 12, 3)]).collect();
        let b: Vec<f64> = (1..=4).map(|n| bleu(&hyps, &refs, n).unwrap()).collect();
        for w in b.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn metrics_ignore_case_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let hyps: Vec<Vec<String>> = (0..4).map(|_| rand_words(&mut r, 2, 8, 4)).collect();
        let refs: Vec<Vec<Vec<String>>> = (0..4).map(|_| vec![rand_words(&mut r, 2, 8, 4)]).collect();
        let labels = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<u8>> {
            (0..4).map(|_| (0..3).map(|_| rand::Rng::gen_range(r, 0..2u8)).collect()).collect()
        };
        let (p, tr) = (labels(&mut r), labels(&mut r));
        let rev = |v: &[Vec<String>]| v.iter().rev().cloned().collect::<Vec<_>>();
        let rev_refs: Vec<Vec<Vec<String>>> = refs.iter().rev().cloned().collect();
        prop_assert!((bleu(&hyps, &refs, 4).unwrap() - bleu(&rev(&hyps), &rev_refs, 4).unwrap()).abs() <= 1e-12);
        let rp: Vec<Vec<u8>> = p.iter().rev().cloned().collect();
        let rt: Vec<Vec<u8>> = tr.iter().rev().cloned().collect();
        prop_assert_eq!(ce_metrics(&p, &tr, Averaging::Micro).unwrap(), ce_metrics(&rp, &rt, Averaging::Micro).unwrap());
    }

    #[test]
    fn f1_zero_iff_no_true_positive(
        pred in prop::collection::vec(prop::collection::vec(0u8..2, 4), 1..6),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let truth: Vec<Vec<u8>> = pred.iter().map(|_| (0..4).map(|_| rand::Rng::gen_range(&mut r, 0..2u8)).collect()).collect();
        let tp = pred.iter().zip(&truth).flat_map(|(p, t)| p.iter().zip(t)).filter(|(a, b)| **a == 1 && **b == 1).count();
        let f1 = ce_metrics(&pred, &truth, Averaging::Micro).unwrap().f1;
        prop_assert_eq!(f1 == 0.0, tp == 0);
        let (op, or, of) = ce_oracle(&pred, &truth);
        let got = ce_metrics(&pred, &truth, Averaging::Micro).unwrap();
        prop_assert!(max_abs_diff(&[got.precision, got.recall, got.f1], &[op, or, of]) <= 1e-12);
    }

    #[test]
    fn recall_monotone_in_k(seed in any::<u64>()) {
        let mut r = rng(seed);
        let vols: Vec<Matrix<f64>> = (0..12).map(|_| rand_unit_rows(&mut r, 3, 4)).collect();
        let texts: Vec<SubjectTokens<f64>> = (0..12).map(|_| tokens_of(&rand_unit_rows(&mut r, 3, 4))).collect();
        let v = retrieval_recall(&texts, &vols, &[1, 2, 5, 10, 12]).unwrap();
        for w in v.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert_eq!(v[4], 1.0);
    }
}

#[test]
fn true_volume_ranked_third_counts_from_k3() {
    // query 0 prefers volumes 1 and 2 over its own
    let own = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
    let better = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let text = SubjectTokens {
        tokens: vec![Some(vec![0.8, 0.6])],
    };
    let texts = vec![text.clone(), text.clone(), text];
    let vols = vec![own, better.clone(), better];
    let v = retrieval_recall(&texts[..], &vols, &[1, 5, 10]).unwrap();
    // query 0 is 3rd, query 1 is 1st, query 2 is 2nd (tie broken by index)
    assert!((v[0] - 1.0 / 3.0).abs() <= 1e-12);
    assert_eq!(v[1], 1.0);
}
