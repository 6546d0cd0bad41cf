mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{brute_force_herding, naive_softmax};
use emp_core::data::{partition_ontology, Label, Span, TypeId};
use emp_core::distill::{feature_kd, prediction_kd};
use emp_core::eval::{group_counts, micro_f1, old_new_breakdown, SpanKey};
use emp_core::memory::herding_select;
use proptest::prelude::*;

fn features(max_n: usize, max_d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_n, 1..=max_d).prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(-5.0..5.0f64, d), n))
}

/// Gold labels over types 0..6 (6 = Other) and predictions over the same.
fn labelled(max: usize) -> impl Strategy<Value = Vec<(u8, u8)>> {
    prop::collection::vec((0u8..7, 0u8..7), 1..max)
}

fn label(c: u8) -> Label {
    if c == 6 {
        Label::Other
    } else {
        Label::Event(TypeId(c as u32))
    }
}

type Fixture = (BTreeMap<SpanKey, Label>, Vec<(SpanKey, Label)>);

fn build(pairs: &[(u8, u8)]) -> Fixture {
    let mut pred = BTreeMap::new();
    let mut gold = Vec::new();
    for (i, &(g, p)) in pairs.iter().enumerate() {
        let key = (i, Span::new(0, 0));
        gold.push((key, label(g)));
        pred.insert(key, label(p));
    }
    (pred, gold)
}

fn seen3() -> BTreeSet<TypeId> {
    (0..3).map(TypeId).collect()
}

proptest! {
    #[test]
    fn herding_matches_brute_force(f in features(30, 6), m in 0usize..35) {
        prop_assert_eq!(herding_select(&f, m).unwrap(), brute_force_herding(&f, m));
    }

    #[test]
    fn herding_orders_are_prefixes(f in features(30, 6), a in 0usize..30, b in 0usize..30) {
        let (lo, hi) = (a.min(b), a.max(b));
        let short = herding_select(&f, lo).unwrap();
        let long = herding_select(&f, hi).unwrap();
        prop_assert_eq!(&long[..short.len()], &short[..]);
    }

    #[test]
    fn micro_f1_ignores_instance_order(pairs in labelled(40), rot in 0usize..40) {
        let (pred, gold) = build(&pairs);
        let mut shuffled = gold.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let a = micro_f1(&pred, &gold, &seen3()).unwrap();
        let b = micro_f1(&pred, &shuffled, &seen3()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn gold_negatives_only_matter_when_predicted_positive(pairs in labelled(40), wrong in 0u8..3) {
        let (mut pred, mut gold) = build(&pairs);
        let base = micro_f1(&pred, &gold, &seen3()).unwrap();
        let key = (pairs.len(), Span::new(0, 0));
        // An unseen-type mention predicted Other is a correct negative.
        gold.push((key, label(5)));
        pred.insert(key, Label::Other);
        let same = micro_f1(&pred, &gold, &seen3()).unwrap();
        prop_assert_eq!(base.micro, same.micro);
        pred.insert(key, label(wrong));
        let worse = micro_f1(&pred, &gold, &seen3()).unwrap();
        prop_assert_eq!(worse.counts.fp, base.counts.fp + 1);
        prop_assert!(worse.micro.precision <= base.micro.precision);
    }

    #[test]
    fn old_new_groups_partition_seen_mentions(pairs in labelled(40), split in 1u32..3) {
        let (pred, gold) = build(&pairs);
        let seen = seen3();
        let scored = micro_f1(&pred, &gold, &seen).unwrap();
        let old: BTreeSet<TypeId> = (0..split).map(TypeId).collect();
        let new: Vec<TypeId> = (split..3).map(TypeId).collect();
        let new_set: BTreeSet<TypeId> = new.iter().copied().collect();
        prop_assert!(old.is_disjoint(&new_set));
        let o = group_counts(&scored.per_type, &old);
        let n = group_counts(&scored.per_type, &new_set);
        prop_assert_eq!(o.gold() + n.gold(), scored.counts.gold());
        prop_assert_eq!(o.tp + n.tp, scored.counts.tp);
        let (of, nf) = old_new_breakdown(&scored.per_type, &new, &old);
        prop_assert_eq!(of.is_some(), o.gold() > 0);
        prop_assert_eq!(nf.is_some(), n.gold() > 0);
    }

    #[test]
    fn partitions_are_disjoint_balanced_and_covering(n_types in 1usize..40, tasks in 1usize..10, seed in 0u64..1000) {
        prop_assume!(tasks <= n_types);
        let parts = partition_ontology(n_types, tasks, seed).unwrap();
        prop_assert_eq!(parts.len(), tasks);
        let all: BTreeSet<TypeId> = parts.iter().flatten().copied().collect();
        prop_assert_eq!(all.len(), n_types);
        prop_assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), n_types);
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn prediction_kd_bounds_teacher_entropy(
        pair in (2usize..8).prop_flat_map(|k| (prop::collection::vec(-6.0..6.0f64, k), prop::collection::vec(-6.0..6.0f64, k)))
    ) {
        let (t, s) = pair;
        let q = naive_softmax(&t.iter().map(|v| v / 2.0).collect::<Vec<_>>());
        let h: f64 = -q.iter().map(|p| p * p.ln()).sum::<f64>();
        prop_assert!(prediction_kd(&t, &s, 2.0).unwrap() - h >= -1e-12);
        prop_assert!((prediction_kd(&t, &t, 2.0).unwrap() - h).abs() < 1e-9);
    }

    #[test]
    fn feature_kd_is_scale_invariant(
        pair in (1usize..10).prop_flat_map(|d| (prop::collection::vec(-3.0..3.0f64, d), prop::collection::vec(-3.0..3.0f64, d))),
        scale in 0.01..100.0f64
    ) {
        let (a, b) = pair;
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let scaled: Vec<f64> = b.iter().map(|v| v * scale).collect();
        let base = feature_kd(&a, &b).unwrap();
        prop_assert!((feature_kd(&a, &scaled).unwrap() - base).abs() < 1e-12);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&base));
    }
}
