mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{brute_force_kappa, decision_maps};
use reviewsim::analysis::{agreement, Histogram, HISTOGRAM_BINS};
use reviewsim::corpus::{largest_remainder_allocation, parse_corpus, stratified_sample, synthetic_corpus, Corpus, DecisionCategory};
use reviewsim::documents::{count_words, parse_review, serialize_review};
use reviewsim::pipeline::{quota_for_batch, round_half_up};
use reviewsim::ReviewDocument;

fn phrase() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-z]{1,10}", 1..15).prop_map(|w| w.join(" "))
}

fn review() -> impl Strategy<Value = ReviewDocument> {
    (
        1u8..=3,
        prop::option::of(0u32..=36),
        phrase(),
        prop::collection::vec(phrase(), 0..6),
        prop::collection::vec(phrase(), 0..6),
        prop::collection::vec(phrase(), 0..6),
    )
        .prop_map(|(j, steps, sig, acc, rej, sug)| {
            ReviewDocument::new(j, steps.map(|s| 1.0 + s as f64 * 0.25), sig, acc, rej, sug)
        })
}

fn category_counts() -> impl Strategy<Value = [usize; 4]> {
    prop::array::uniform4(0usize..60).prop_filter("non-empty corpus", |c| c.iter().sum::<usize>() > 0)
}

fn corpus_of(counts: [usize; 4], seed: u64) -> Corpus {
    synthetic_corpus(
        &DecisionCategory::ALL.iter().copied().zip(counts).collect::<Vec<_>>(),
        seed,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn allocation_sums_to_n_and_stays_within_one(counts in prop::collection::vec(0usize..500, 1..6), frac in 0.0f64..=1.0) {
        let total: usize = counts.iter().sum();
        prop_assume!(total > 0);
        let n = (frac * total as f64).floor() as usize;
        let alloc = largest_remainder_allocation(&counts, n);
        prop_assert_eq!(alloc.iter().sum::<usize>(), n);
        for (a, c) in alloc.iter().zip(&counts) {
            let exact = n as f64 * *c as f64 / total as f64;
            prop_assert!((*a as f64 - exact).abs() < 1.0);
            prop_assert!(a <= c);
        }
    }

    #[test]
    fn sampling_ignores_record_order(counts in category_counts(), frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let corpus = corpus_of(counts, 1);
        let n = (frac * corpus.len() as f64).floor() as usize;
        let mut records = corpus.papers().to_vec();
        records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = Corpus::from_records(records).unwrap();
        let a = stratified_sample(&corpus, n, seed).unwrap();
        let b = stratified_sample(&shuffled, n, seed).unwrap();
        prop_assert_eq!(a.ids().collect::<Vec<_>>(), b.ids().collect::<Vec<_>>());
        prop_assert_eq!(a.len(), n);
    }

    #[test]
    fn corpus_save_load_round_trip(counts in category_counts(), seed in any::<u64>()) {
        let corpus = corpus_of(counts, seed);
        let text = corpus.to_jsonl();
        let back = parse_corpus(&text).unwrap();
        prop_assert_eq!(&back, &corpus);
        prop_assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn review_parse_inverts_serialize(doc in review()) {
        let text = serialize_review(&doc);
        let parsed = parse_review(&text, doc.reviewer_index, doc.rating.is_some()).unwrap();
        prop_assert_eq!(parsed.word_count, count_words(&text));
        prop_assert_eq!(serialize_review(&parsed), text);
        prop_assert_eq!(parsed, doc);
    }

    #[test]
    fn kappa_matches_confusion_matrix(pairs in prop::collection::vec(any::<(bool, bool)>(), 1..200)) {
        let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let (ma, mb) = decision_maps(&a, &b);
        let r = agreement(&ma, &mb).unwrap();
        prop_assert!((r.kappa - brute_force_kappa(&a, &b)).abs() <= 1e-12);
    }

    #[test]
    fn agreement_symmetries(pairs in prop::collection::vec(any::<(bool, bool)>(), 1..200)) {
        let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let (ma, mb) = decision_maps(&a, &b);
        let ab = agreement(&ma, &mb).unwrap();
        let ba = agreement(&mb, &ma).unwrap();
        prop_assert_eq!(ab.jaccard, ba.jaccard);
        prop_assert_eq!(ab.percent_agree, ba.percent_agree);
        prop_assert_eq!(ab.decision_change + ab.percent_agree, 100.0);
        let aa = agreement(&ma, &ma).unwrap();
        prop_assert_eq!(aa.jaccard, 1.0);
        prop_assert_eq!(aa.percent_agree, 100.0);
    }

    #[test]
    fn histogram_is_a_partition(ratings in prop::collection::vec(1.0f64..=10.0, 0..300)) {
        let h = Histogram::from_ratings(ratings.iter().copied());
        prop_assert_eq!(h.counts.len(), HISTOGRAM_BINS);
        prop_assert_eq!(h.total() as usize, ratings.len());
        for r in ratings {
            let (lo, hi) = Histogram::bin_bounds(Histogram::bin_of(r));
            prop_assert!(lo <= r + 1e-9 && (r < hi || (r == 10.0 && hi == 10.0)));
        }
    }

    #[test]
    fn quota_prefixes_track_the_rate(n_batches in 1usize..120, batch_size in 1usize..25, permille in 1u32..=1000) {
        let rate = permille as f64 / 1000.0;
        let mut cumulative = 0usize;
        for i in 1..=n_batches {
            cumulative += quota_for_batch(i, batch_size, rate);
            let exact = rate * (i * batch_size) as f64;
            prop_assert!((cumulative as f64 - exact).abs() <= 0.5 + 1e-9);
            prop_assert_eq!(cumulative as u64, round_half_up(exact));
        }
    }
}

#[test]
fn decision_maps_cover_every_index() {
    let (a, b) = decision_maps(&[true, false], &[false, false]);
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    let expected: BTreeMap<String, bool> = [("p0000".to_string(), true), ("p0001".to_string(), false)].into();
    assert_eq!(a, expected);
}
