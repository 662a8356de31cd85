//! Featurizer properties checked against direct computations.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stmask_core::profile::{
    augment, correlation_gap, embed, merge, project, projection_matrix, summarize, DEFAULT_THETA_CORR, PROFILE_DIM,
};
use stmask_core::synth::{generate_dataset, Event, EventHistory};
use stmask_core::tensor::Dims;

fn history(events: &[(usize, usize, usize)], apps: usize, locs: usize) -> EventHistory {
    let evs = events
        .iter()
        .map(|&(app, location, timestamp)| Event { app, location, timestamp })
        .collect();
    EventHistory::new(evs, apps, locs).unwrap()
}

#[test]
fn disjoint_app_sets_are_less_similar_than_identical_summaries() {
    let a: Vec<_> = (0..20).map(|i| (i % 2, i % 3, i)).collect();
    let b: Vec<_> = (0..20).map(|i| (2 + i % 2, i % 3, i)).collect();
    let (ha, hb) = (history(&a, 4, 5), history(&b, 4, 5));
    let ea = embed(&summarize(&ha, 8, 8).unwrap());
    let eb = embed(&summarize(&hb, 8, 8).unwrap());
    let ea2 = embed(&summarize(&ha, 8, 8).unwrap());
    let same = ea.cosine(&ea2);
    assert!((same - 1.0).abs() < 1e-12);
    assert!(ea.cosine(&eb) < same);
}

fn resampled(src: &[Event], n: usize, seed: u64) -> EventHistory {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut evs: Vec<Event> = (0..n).map(|_| src[r.random_range(0..src.len())]).collect();
    evs.sort_by_key(|e| e.timestamp);
    EventHistory::new(evs, 8, 64).unwrap()
}

#[test]
fn resampling_at_ten_times_length_keeps_the_gap_small() {
    for rec in generate_dataset(2024, 8, Dims::desk()).unwrap() {
        let src = rec.history.events();
        let under = (0..100u64)
            .filter(|&seed| correlation_gap(&rec.history, &resampled(src, 10 * src.len(), seed)).unwrap() < 0.1)
            .count();
        assert!(under >= 95, "only {under}/100 resamples under 0.1");
    }
}

#[test]
fn augmentation_respects_observed_pairs_and_merging_shrinks_the_gap() {
    for rec in generate_dataset(77, 6, Dims::desk()).unwrap() {
        let src = &rec.history;
        let seen: std::collections::HashSet<(usize, usize)> =
            src.events().iter().map(|e| (e.app, e.location)).collect();
        for seed in 0..5 {
            let aug = augment(src, 40, seed, DEFAULT_THETA_CORR).unwrap();
            assert!(aug.events().iter().all(|e| seen.contains(&(e.app, e.location))));
            let alone = correlation_gap(src, &aug).unwrap();
            let merged = correlation_gap(src, &merge(src, &aug).unwrap()).unwrap();
            assert!(merged <= alone + 1e-15, "merged {merged} vs alone {alone}");
            assert!(merged <= DEFAULT_THETA_CORR);
        }
    }
}

fn arb_history() -> impl Strategy<Value = Vec<(usize, usize, usize)>> {
    prop::collection::vec((0usize..4, 0usize..5, 0usize..40), 1..30).prop_map(|mut v| {
        v.sort_by_key(|e| e.2);
        v
    })
}

proptest! {
    #[test]
    fn summaries_ignore_event_order_within_a_slot(events in arb_history(), seed in any::<u64>()) {
        let h = history(&events, 4, 5);
        // shuffle events that share a timestamp, keeping the order valid
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = events.clone();
        shuffled.sort_by_cached_key(|e| (e.2, r.random::<u32>()));
        let s1 = summarize(&h, 8, 8).unwrap();
        let s2 = summarize(&history(&shuffled, 4, 5), 8, 8).unwrap();
        prop_assert_eq!(&s1.cooccur, &s2.cooccur);
        prop_assert_eq!(&s1.time_hist, &s2.time_hist);
        prop_assert_eq!(correlation_gap(&h, &h).unwrap(), 0.0);
        let total: f64 = s1.time_hist.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&s1.session_regularity));
    }

    #[test]
    fn embedding_is_unit_and_projection_is_lipschitz(a in arb_history(), b in arb_history()) {
        let (sa, sb) = (summarize(&history(&a, 4, 5), 8, 8).unwrap(), summarize(&history(&b, 4, 5), 8, 8).unwrap());
        let e = embed(&sa);
        let norm: f64 = e.vec().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-9);
        let (fa, fb) = (sa.features(), sb.features());
        let p = projection_matrix(fa.len(), PROFILE_DIM);
        // Frobenius norm bounds the operator norm
        let p_norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let df = fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let (pa, pb) = (project(&sa, PROFILE_DIM), project(&sb, PROFILE_DIM));
        let dp = pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        prop_assert!(dp <= p_norm * df + 1e-12);
    }
}
