use proptest::prelude::*;

use super::*;
use crate::backbone::Projection;
use crate::lora::{adapted_forward, LoraAdapter, LoraPair};
use crate::numerics::{relative_error, seeded_random_matrix, Distribution};

const Q0: InjectionPoint = InjectionPoint {
    layer_index: 0,
    projection: Projection::Query,
};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    seeded_random_matrix(rows, cols, seed, Distribution::Gaussian { std: 1.0 })
}

fn adapter(i: usize, h: usize, d: usize, r: usize, seed: u64) -> LoraAdapter {
    let mut a = LoraAdapter::new(format!("id{i}"), format!("task{i}"), r).with_scale(1.0 + i as f32 * 0.1);
    let pair = LoraPair::new(gaussian(h, r, seed * 1000 + 2 * i as u64), gaussian(r, d, seed * 1000 + 2 * i as u64 + 1)).unwrap();
    a.insert_layer(Q0.name(), pair).unwrap();
    a
}

fn registry(n: usize, h: usize, d: usize, r: usize, seed: u64) -> (LoraRegistry, Vec<LoraAdapter>) {
    let adapters: Vec<_> = (0..n).map(|i| adapter(i, h, d, r, seed)).collect();
    let mut reg = LoraRegistry::new();
    for a in &adapters {
        reg.register(a).unwrap();
    }
    (reg, adapters)
}

/// Independent oracle: explicit triple loops over each selected adapter.
fn naive(x: &Matrix, w: &Matrix, picks: &[(&LoraAdapter, f32)]) -> Vec<f32> {
    let (m, h, d) = (x.rows(), x.cols(), w.cols());
    let mut out = vec![0.0f64; m * d];
    for i in 0..m {
        for j in 0..d {
            out[i * d + j] = (0..h).map(|k| x.get(i, k) as f64 * w.get(k, j) as f64).sum();
        }
    }
    for (ad, weight) in picks {
        let pair = ad.layer(&Q0.name()).unwrap();
        let r = pair.rank();
        for i in 0..m {
            let xa: Vec<f64> = (0..r)
                .map(|c| (0..h).map(|k| x.get(i, k) as f64 * pair.a.get(k, c) as f64).sum())
                .collect();
            for j in 0..d {
                let side: f64 = (0..r).map(|c| xa[c] * pair.b.get(c, j) as f64).sum();
                out[i * d + j] += *weight as f64 * ad.scale() as f64 * side;
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

#[test]
fn single_adapter_plan_matches_adapted_forward() {
    let (reg, ads) = registry(3, 16, 16, 4, 1);
    let x = gaussian(5, 16, 7);
    let w = gaussian(16, 16, 8);
    let fused = fused_forward(&x, &w, &reg, &FusionPlan::single(1), Q0).unwrap();
    let single = adapted_forward(&x, &w, &ads[1], &Q0.name()).unwrap();
    assert!(relative_error(fused.data(), single.data()) <= 1e-5);
}

#[test]
fn zero_b_adapters_leave_base_untouched() {
    let mut reg = LoraRegistry::new();
    for i in 0..3 {
        let mut a = LoraAdapter::new(format!("z{i}"), format!("t{i}"), 2);
        a.insert_layer(Q0.name(), LoraPair::new(gaussian(8, 2, i), Matrix::zeros(2, 8)).unwrap()).unwrap();
        reg.register(&a).unwrap();
    }
    let x = gaussian(3, 8, 1);
    let w = gaussian(8, 8, 2);
    let plan = FusionPlan::new(vec![0, 1, 2], vec![0.2, 0.3, 0.5], 0, vec![]).unwrap();
    assert_eq!(fused_forward(&x, &w, &reg, &plan, Q0).unwrap(), matmul(&x, &w).unwrap());
}

#[test]
fn three_way_plan_matches_naive_loop() {
    let (reg, ads) = registry(4, 16, 16, 4, 2);
    let x = gaussian(2, 16, 3);
    let w = gaussian(16, 16, 4);
    let plan = FusionPlan::new(vec![3, 0, 2], vec![0.5, 0.3, 0.2], 0, vec![]).unwrap();
    let fused = fused_forward(&x, &w, &reg, &plan, Q0).unwrap();
    let oracle = naive(&x, &w, &[(&ads[3], 0.5), (&ads[0], 0.3), (&ads[2], 0.2)]);
    assert!(relative_error(fused.data(), &oracle) <= 1e-5);
}

#[test]
fn convex_endpoints_match_single_paths() {
    let (reg, _) = registry(2, 8, 8, 2, 3);
    let x = gaussian(3, 8, 5);
    let w = gaussian(8, 8, 6);
    for (weights, only) in [([1.0, 0.0], 0), ([0.0, 1.0], 1)] {
        let plan = FusionPlan::new(vec![0, 1], weights.to_vec(), 0, vec![]).unwrap();
        let mixed = fused_forward(&x, &w, &reg, &plan, Q0).unwrap();
        let single = fused_forward(&x, &w, &reg, &FusionPlan::single(only), Q0).unwrap();
        assert!(crate::numerics::max_abs_diff(mixed.data(), single.data()) <= 1e-6);
    }
}

#[test]
fn output_is_continuous_in_weights() {
    let (reg, _) = registry(2, 16, 16, 4, 4);
    let x = gaussian(2, 16, 5);
    let w = gaussian(16, 16, 6);
    let at = |t: f32| {
        let plan = FusionPlan::new(vec![0, 1], vec![t, 1.0 - t], 0, vec![]).unwrap();
        fused_forward(&x, &w, &reg, &plan, Q0).unwrap()
    };
    let base = at(0.5);
    for eps in [1e-2f32, 1e-3] {
        let moved = at(0.5 + eps);
        let diff: f32 = moved.data().iter().zip(base.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
        let big = at(0.6);
        let unit: f32 = big.data().iter().zip(base.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt() / 0.1;
        assert!(diff <= unit * eps * 1.01 + 1e-4, "eps {eps}: {diff} vs {}", unit * eps);
    }
}

#[test]
fn invalid_plans_are_rejected() {
    let (reg, _) = registry(2, 8, 8, 2, 1);
    let x = gaussian(1, 8, 1);
    let w = gaussian(8, 8, 2);
    let out_of_range = FusionPlan::single(5);
    assert!(matches!(fused_forward(&x, &w, &reg, &out_of_range, Q0), Err(Error::Plan(_))));
    assert!(matches!(FusionPlan::new(vec![], vec![], 0, vec![]), Err(Error::Plan(_))));
    assert!(matches!(FusionPlan::new(vec![0, 0], vec![0.5, 0.5], 0, vec![]), Err(Error::Plan(_))));
    assert!(matches!(FusionPlan::new(vec![0, 1], vec![0.5, 0.6], 0, vec![]), Err(Error::Plan(_))));
    let wide = gaussian(1, 9, 1);
    assert!(matches!(fused_forward(&wide, &w, &reg, &FusionPlan::single(0), Q0), Err(Error::Shape { .. })));
}

#[test]
fn batched_matches_per_sentence_calls() {
    let (reg, _) = registry(8, 16, 16, 2, 5);
    let w = gaussian(16, 16, 9);
    let plans = [
        FusionPlan::single(2),
        FusionPlan::new(vec![1, 4], vec![0.6, 0.4], 0, vec![]).unwrap(),
        FusionPlan::new(vec![0, 5, 7], vec![0.2, 0.3, 0.5], 0, vec![]).unwrap(),
        FusionPlan::single(2),
    ];
    let xs: Vec<(Matrix, &FusionPlan)> = plans
        .iter()
        .enumerate()
        .map(|(i, p)| (gaussian(1 + i % 3, 16, 50 + i as u64), p))
        .collect();
    for exec in [Execution::Sequential, Execution::Parallel] {
        let batched = batched_fused_forward(&xs, &w, &reg, Q0, exec).unwrap();
        for ((x, plan), y) in xs.iter().zip(&batched) {
            let single = fused_forward(x, &w, &reg, plan, Q0).unwrap();
            assert!(crate::numerics::max_abs_diff(single.data(), y.data()) <= 1e-6);
        }
    }
}

#[test]
fn registry_examples() {
    let mut reg = LoraRegistry::new();
    assert_eq!(reg.register(&adapter(0, 8, 8, 2, 1)).unwrap(), 0);
    assert_eq!(reg.len(), 1);
    let dup = reg.register(&adapter(0, 8, 8, 2, 1));
    assert!(matches!(dup, Err(Error::Conflict(_))));
    assert_eq!(reg.len(), 1);
    let wrong_rank = reg.register(&adapter(1, 8, 8, 3, 1));
    assert!(matches!(wrong_rank, Err(Error::Rank { expected: 2, found: 3 })));

    // a pool of 26 adapters, each reachable by label
    let (reg26, ads) = registry(26, 8, 8, 2, 2);
    for (i, a) in ads.iter().enumerate() {
        assert_eq!(reg26.slot_for_label(a.task_label()), Some(i));
        assert_eq!(reg26.slot_of(a.id()), Some(i));
    }
}

#[test]
fn removal_compacts_and_frees_rank() {
    let (mut reg, ads) = registry(3, 8, 8, 2, 3);
    reg.remove("id1").unwrap();
    assert_eq!(reg.len(), 2);
    for keep in [0, 2] {
        let slot = reg.slot_of(ads[keep].id()).unwrap();
        assert_eq!(reg.adapter(slot).unwrap(), ads[keep]);
        assert_eq!(reg.slot_for_label(ads[keep].task_label()), Some(slot));
    }
    assert!(reg.slot_for_label("task1").is_none());
    assert!(matches!(reg.remove("id1"), Err(Error::Lookup(_))));
    reg.register(&ads[1]).unwrap();
    assert_eq!(reg.len(), 3);
    for id in ["id0", "id1", "id2"] {
        reg.remove(id).unwrap();
    }
    assert!(reg.is_empty() && reg.uniform_rank().is_none());
    assert_eq!(reg.register(&adapter(9, 8, 8, 5, 3)).unwrap(), 0);
}

#[test]
fn snapshot_roundtrip_preserves_order_and_values() {
    let (mut reg, _) = registry(5, 8, 8, 2, 4);
    reg.remove("id1").unwrap();
    let dir = tempfile::tempdir().unwrap();
    reg.save_snapshot(dir.path()).unwrap();
    let back = LoraRegistry::load_snapshot(dir.path()).unwrap();
    assert_eq!(back.ids(), reg.ids());
    assert_eq!(back.manifest(), reg.manifest());
    for slot in 0..reg.len() {
        assert_eq!(back.adapter(slot).unwrap(), reg.adapter(slot).unwrap());
    }
    assert_eq!(back.stack(Q0), reg.stack(Q0));
}

#[test]
fn plan_for_sentence_examples() {
    let (reg, _) = registry(3, 8, 8, 2, 5);
    let labels: Vec<String> = vec!["task2".into(), "task0".into(), "task1".into()];
    let cfg = RouterConfig {
        p_threshold: 0.3,
        ..Default::default()
    };
    let cls = |p: Vec<f32>| Classification {
        logits: p.iter().map(|v| v.ln()).collect(),
        probs: p,
    };
    let one = plan_for_sentence(&cls(vec![0.9, 0.05, 0.05]), &labels, &reg, &cfg, 4).unwrap();
    assert_eq!(one.selected_slots, vec![2]);
    assert_eq!(one.weights, vec![1.0]);
    assert_eq!(one.source_sentence_index, 4);

    let two = plan_for_sentence(&cls(vec![0.46, 0.45, 0.09]), &labels, &reg, &cfg, 0).unwrap();
    assert_eq!(two.selected_slots, vec![2, 0]);
    assert!((two.weights[0] - 0.5).abs() < 0.01 && (two.weights[1] - 0.5).abs() < 0.01);

    let missing: Vec<String> = vec!["task0".into(), "ghost".into(), "task1".into()];
    let err = plan_for_sentence(&cls(vec![0.1, 0.8, 0.1]), &missing, &reg, &cfg, 0).unwrap_err();
    assert!(matches!(err, Error::Routing { label } if label == "ghost"));
}

#[test]
fn shared_registry_serves_concurrent_readers() {
    let (reg, _) = registry(4, 8, 8, 2, 6);
    let shared: SharedRegistry = Arc::new(RwLock::new(reg));
    let x = gaussian(2, 8, 1);
    let w = gaussian(8, 8, 2);
    let expected = fused_forward(&x, &w, &shared.read().unwrap(), &FusionPlan::single(3), Q0).unwrap();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|_| {
                s.spawn(|| {
                    let guard = shared.read().unwrap();
                    fused_forward(&x, &w, &guard, &FusionPlan::single(3), Q0).unwrap()
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), expected);
        }
    });
    shared.write().unwrap().remove("id0").unwrap();
    assert_eq!(shared.read().unwrap().len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn register_remove_sequences_keep_slices_exact(ops in proptest::collection::vec((any::<bool>(), 0usize..12), 50)) {
        let pool: Vec<LoraAdapter> = (0..12).map(|i| adapter(i, 6, 5, 2, 11)).collect();
        let mut reg = LoraRegistry::new();
        let mut live = std::collections::BTreeSet::new();
        for (add, i) in ops {
            if add {
                let res = reg.register(&pool[i]);
                prop_assert_eq!(res.is_ok(), live.insert(i));
            } else {
                let res = reg.remove(pool[i].id());
                prop_assert_eq!(res.is_ok(), live.remove(&i));
            }
            prop_assert_eq!(reg.len(), live.len());
            let stack_len = reg.stack(Q0).map_or(0, |s| s.a.len());
            prop_assert_eq!(stack_len, live.len());
        }
        for &i in &live {
            let slot = reg.slot_of(pool[i].id()).unwrap();
            prop_assert_eq!(&reg.ids()[slot], pool[i].id());
            prop_assert_eq!(reg.adapter(slot).unwrap(), pool[i].clone());
        }
    }

    #[test]
    fn fused_matches_naive_on_random_configs(
        n in prop::sample::select(vec![2usize, 8, 32]),
        r in prop::sample::select(vec![2usize, 8]),
        h in prop::sample::select(vec![16usize, 64]),
        plan_size in 1usize..=4,
        seed in 0u64..1_000,
    ) {
        let (reg, ads) = registry(n, h, h, r, seed);
        let mut rng = crate::numerics::seeded_rng(seed);
        let mut slots: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(slots.as_mut_slice(), &mut rng);
        slots.truncate(plan_size.min(n));
        let raw: Vec<f32> = (0..slots.len()).map(|k| 1.0 + k as f32).collect();
        let weights = crate::numerics::softmax(&raw).unwrap();
        let plan = FusionPlan::new(slots.clone(), weights.clone(), 0, vec![]).unwrap();
        let x = gaussian(3, h, seed + 77);
        let w = gaussian(h, h, seed + 78);
        let fused = fused_forward(&x, &w, &reg, &plan, Q0).unwrap();
        let picks: Vec<(&LoraAdapter, f32)> = slots.iter().zip(&weights).map(|(&s, &wt)| (&ads[s], wt)).collect();
        prop_assert!(relative_error(fused.data(), &naive(&x, &w, &picks)) <= 1e-5);
    }
}
