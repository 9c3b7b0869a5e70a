use std::collections::HashMap;

use proptest::prelude::*;

use wormnet::trace::{
    batch_clusters, derive_encounters, estimate_rates, parse_associations, parse_encounters, trace_stats,
    write_associations_csv, write_encounters_csv, AssociationRecord, EncounterEvent, SyntheticPlan,
};

fn arb_encounters() -> impl Strategy<Value = Vec<EncounterEvent>> {
    prop::collection::vec((0u32..10_000, 1u32..500, 0u32..15, 0u32..15), 1..200).prop_map(|raw| {
        raw.into_iter()
            .filter(|(_, _, a, b)| a != b)
            .map(|(t, len, a, b)| {
                EncounterEvent::new(f64::from(t), f64::from(t + len), &format!("n{a}"), &format!("n{b}"))
            })
            .collect()
    })
}

fn arb_associations() -> impl Strategy<Value = Vec<AssociationRecord>> {
    prop::collection::vec((0u32..8, 0u32..3, 0u32..300, 1u32..60), 0..120).prop_map(|raw| {
        raw.into_iter()
            .map(|(n, ap, s, len)| AssociationRecord {
                node_id: format!("n{n}"),
                ap_id: format!("ap{ap}"),
                start_ts: f64::from(s),
                end_ts: f64::from(s + len),
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn per_node_encounters_sum_to_twice_the_list(encs in arb_encounters()) {
        prop_assume!(!encs.is_empty());
        let stats = trace_stats(&encs, 3600.0).unwrap();
        let total: usize = stats.nodes.iter().map(|n| n.total_encounters).sum();
        prop_assert_eq!(total, 2 * encs.len());
        prop_assert!(stats.nodes.iter().all(|n| n.unique_peers <= n.total_encounters));
    }

    #[test]
    fn rates_scale_inversely_with_time(encs in arb_encounters(), k in 1.5f64..20.0) {
        prop_assume!(!encs.is_empty());
        let stats = trace_stats(&encs, 3600.0).unwrap();
        let scaled: Vec<EncounterEvent> = encs
            .iter()
            .map(|e| EncounterEvent::new(e.t_start * k, e.t_end * k, &e.node_a, &e.node_b))
            .collect();
        let arrivals: HashMap<String, f64> = stats.nodes.iter().map(|n| (n.node.clone(), n.arrival)).collect();
        let arrivals_k: HashMap<String, f64> = arrivals.iter().map(|(id, t)| (id.clone(), t * k)).collect();
        let groups = &stats.groups.groups;
        let a = estimate_rates(&encs, &arrivals, groups, stats.end);
        let b = estimate_rates(&scaled, &arrivals_k, groups, stats.end * k);
        for (ra, rb) in a.iter().flatten().zip(b.iter().flatten()) {
            prop_assert!((ra - rb * k).abs() <= 1e-9 * ra.abs().max(1e-12), "{} vs {}", ra, rb * k);
        }
    }

    #[test]
    fn derived_encounters_are_canonical_and_disjoint(assocs in arb_associations()) {
        let encs = derive_encounters(&assocs);
        for e in &encs {
            prop_assert!(e.node_a < e.node_b);
            prop_assert!(e.t_start < e.t_end);
        }
        let mut by_pair: HashMap<(&str, &str), Vec<(f64, f64)>> = HashMap::new();
        for e in &encs {
            by_pair.entry((&e.node_a, &e.node_b)).or_default().push((e.t_start, e.t_end));
        }
        for iv in by_pair.values() {
            for w in iv.windows(2) {
                prop_assert!(w[0].1 <= w[1].0, "{:?}", w);
            }
        }
        prop_assert!(encs.windows(2).all(|w| w[0].t_start <= w[1].t_start));
    }

    #[test]
    fn derivation_ignores_record_order(mut assocs in arb_associations(), seed in any::<u64>()) {
        let a = derive_encounters(&assocs);
        let n = assocs.len();
        if n > 1 {
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                assocs.swap(i, (s >> 33) as usize % (i + 1));
            }
        }
        prop_assert_eq!(a, derive_encounters(&assocs));
    }

    #[test]
    fn batches_partition_nodes(times in prop::collection::vec(0u32..100_000, 1..60), window in 1.0f64..20_000.0) {
        let arrivals: HashMap<String, f64> =
            times.iter().enumerate().map(|(i, &t)| (format!("n{i}"), f64::from(t))).collect();
        let batches = batch_clusters(&arrivals, window);
        let total: usize = batches.iter().map(|b| b.size()).sum();
        prop_assert_eq!(total, arrivals.len());
        for w in batches.windows(2) {
            prop_assert!(w[1].start - w[0].end > window);
        }
    }
}

#[test]
fn csv_round_trips() {
    let plan = SyntheticPlan {
        group_sizes: vec![6, 3],
        rates: vec![vec![1e-3, 2e-4], vec![2e-4, 1e-3]],
        arrivals: vec![0.0, 2000.0],
        origin: 1000.0,
        duration: 5000.0,
        encounter_len: 30.0,
    };
    let assocs = plan.associations(3);
    let mut buf = Vec::new();
    write_associations_csv(&assocs, &mut buf).unwrap();
    let back = parse_associations(buf.as_slice()).unwrap();
    assert!(back.rejects.is_empty());
    assert_eq!(back.records, assocs);

    let encs = derive_encounters(&assocs);
    let mut buf = Vec::new();
    write_encounters_csv(&encs, &mut buf).unwrap();
    let back = parse_encounters(buf.as_slice()).unwrap();
    assert_eq!(back.records, encs);
}

#[test]
fn synthetic_associations_reproduce_synthetic_encounters() {
    let plan = SyntheticPlan {
        group_sizes: vec![8, 4],
        rates: vec![vec![5e-4, 1e-4], vec![1e-4, 4e-4]],
        arrivals: vec![0.0, 3000.0],
        origin: 0.0,
        duration: 20_000.0,
        encounter_len: 10.0,
    };
    // same-pair encounters that overlap come back merged
    let mut direct: Vec<EncounterEvent> = Vec::new();
    for e in plan.encounters(9) {
        let prev = direct
            .iter_mut()
            .rev()
            .find(|p| p.node_a == e.node_a && p.node_b == e.node_b && p.t_end > e.t_start);
        match prev {
            Some(p) => p.t_end = p.t_end.max(e.t_end),
            None => direct.push(e),
        }
    }
    let derived = derive_encounters(&plan.associations(9));
    assert_eq!(derived, direct);
}
