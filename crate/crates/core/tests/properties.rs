//! Property tests for the invariants of designs, networks, policy, PPO and
//! the evolutionary mutation operator.

use std::collections::{BTreeSet, HashMap, VecDeque};

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use morphrl::baselines::{mutate, EvoConfig};
use morphrl::design::{AttrVector, DesignGraph, SkeletonAction, DEFAULT_MAX_JOINTS};
use morphrl::nn::{gnn_forward, GnnStack, NodeFeatureBatch, ParamGroup, ParamStore, Tape};
use morphrl::policy::{dist, ActMode, Action, PolicyConfig, PolicyInput, StageFlag, StepRef, Transform2ActPolicy};
use morphrl::ppo::normalize_advantages;

fn random_design(seed: u64, max_n: usize) -> DesignGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_n);
    DesignGraph::random(&mut rng, n, 3, DEFAULT_MAX_JOINTS)
}

fn random_actions(rng: &mut ChaCha8Rng, n: usize) -> Vec<SkeletonAction> {
    (0..n).map(|_| SkeletonAction::from_index(rng.random_range(0..3))).collect()
}

fn index_map(d: &DesignGraph) -> HashMap<u32, String> {
    d.joints().iter().map(|j| (j.id, j.index.to_string())).collect()
}

fn small_policy(seed: u64, jsmlp: bool) -> Transform2ActPolicy {
    Transform2ActPolicy::new(PolicyConfig {
        gnn: vec![6, 6],
        jsmlp: vec![5],
        jsmlp_skeleton: jsmlp,
        jsmlp_attribute: jsmlp,
        jsmlp_execution: jsmlp,
        value_gnn: vec![6],
        value_mlp: vec![6],
        obs_dim: 4,
        normalize_obs: false,
        seed,
        ..PolicyConfig::default()
    })
}

/// Random tree as a parent list (`parents[0] = None`).
fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> Vec<Option<usize>> {
    (0..n).map(|i| if i == 0 { None } else { Some(rng.random_range(0..i)) }).collect()
}

fn gnn_outputs(gnn: &GnnStack, store: &ParamStore, feats: Array2<f64>, parents: &[Option<usize>]) -> Array2<f64> {
    let n = parents.len();
    let batch = NodeFeatureBatch::single(feats, parents, vec![0; n]).unwrap();
    let mut tape = Tape::new(store);
    let out = gnn_forward(&mut tape, gnn, &batch).unwrap();
    tape.value(out).to_owned()
}

fn distances(parents: &[Option<usize>], from: usize) -> Vec<usize> {
    let n = parents.len();
    let mut adj = vec![Vec::new(); n];
    for (c, p) in parents.iter().enumerate() {
        if let Some(p) = *p {
            adj[p].push(c);
            adj[c].push(p);
        }
    }
    let mut dist = vec![usize::MAX; n];
    dist[from] = 0;
    let mut q = VecDeque::from([from]);
    while let Some(u) = q.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                q.push_back(v);
            }
        }
    }
    dist
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn skeleton_edits_preserve_tree_and_unique_indices(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = random_design(seed, 8);
        for _ in 0..rng.random_range(1..6) {
            let acts = random_actions(&mut rng, d.len());
            let next = d.apply_skeleton_actions(&acts).unwrap();
            next.validate().unwrap();
            let idx: Vec<String> = next.joints().iter().map(|j| j.index.to_string()).collect();
            let unique: BTreeSet<&String> = idx.iter().collect();
            prop_assert_eq!(unique.len(), idx.len());
            prop_assert_eq!(next.index_ints(), next.clone().index_ints());

            // each joint adds at most one child; only childless non-root joints can go
            let leaves = d.joints().iter().filter(|j| j.parent.is_some() && j.children.is_empty()).count();
            prop_assert!(next.len() <= 2 * d.len());
            prop_assert!(next.len() >= d.len() - leaves);
            d = next;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn adding_a_joint_keeps_existing_indices(seed in any::<u64>()) {
        let d = random_design(seed, 10);
        let before = index_map(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let parent = d.joints()[rng.random_range(0..d.len())].id;
        if let Some(next) = d.try_add_child(parent).unwrap() {
            let after = index_map(&next);
            for (id, idx) in &before {
                prop_assert_eq!(&after[id], idx);
            }
        }
    }

    #[test]
    fn attribute_updates_are_per_joint(seed in any::<u64>()) {
        let d = random_design(seed, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let deltas: Vec<AttrVector> = (0..d.len())
            .map(|_| AttrVector::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        let all = d.apply_attribute_actions(&deltas).unwrap().attrs();
        for k in 0..d.len() {
            let mut only = vec![AttrVector::default(); d.len()];
            only[k] = deltas[k];
            let one = d.apply_attribute_actions(&only).unwrap().attrs();
            prop_assert_eq!(one[k], all[k]);
        }
        // reversing the order of application of two halves gives the same design
        let (a, b): (Vec<_>, Vec<_>) = (0..d.len()).map(|i| if i % 2 == 0 { (deltas[i], AttrVector::default()) } else { (AttrVector::default(), deltas[i]) }).unzip();
        let ab = d.apply_attribute_actions(&a).unwrap().apply_attribute_actions(&b).unwrap();
        let ba = d.apply_attribute_actions(&b).unwrap().apply_attribute_actions(&a).unwrap();
        prop_assert_eq!(ab.attrs(), ba.attrs());
    }

    #[test]
    fn mutation_closure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EvoConfig::default();
        let mut d = random_design(seed, 6);
        for _ in 0..20 {
            d = mutate(&d, &cfg, &mut rng);
            d.validate().unwrap();
            prop_assert!(d.attrs().iter().all(|a| a.to_array().iter().all(|v| (-1.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn advantage_normalization(xs in proptest::collection::vec(-1e3f64..1e3, 2..300)) {
        let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xs.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let mut a = xs.clone();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-8);
        prop_assert!((std - 1.0).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gnn_is_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..12);
        let parents = random_tree(&mut rng, n);
        let mut store = ParamStore::new();
        let gnn = GnnStack::new(&mut store, "g", ParamGroup::Policy, 5, &[7, 6, 4], seed);
        let feats = Array2::from_shape_fn((n, 5), |_| rng.random_range(-2.0..2.0));

        // new row i holds old node perm[i]
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let pfeats = Array2::from_shape_fn((n, 5), |(i, j)| feats[[perm[i], j]]);
        let pparents: Vec<Option<usize>> = perm.iter().map(|&old| parents[old].map(|p| inv[p])).collect();

        let out = gnn_outputs(&gnn, &store, feats, &parents);
        let pout = gnn_outputs(&gnn, &store, pfeats, &pparents);
        for i in 0..n {
            for j in 0..out.ncols() {
                prop_assert!((pout[[i, j]] - out[[perm[i], j]]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gnn_is_local(seed in any::<u64>(), layers in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..14);
        let parents = random_tree(&mut rng, n);
        let mut store = ParamStore::new();
        let gnn = GnnStack::new(&mut store, "g", ParamGroup::Policy, 3, &vec![5; layers], seed);
        let feats = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let u = rng.random_range(0..n);
        let mut bumped = feats.clone();
        bumped[[u, 0]] += 0.7;
        let a = gnn_outputs(&gnn, &store, feats, &parents);
        let b = gnn_outputs(&gnn, &store, bumped, &parents);
        let dist = distances(&parents, u);
        for v in 0..n {
            if dist[v] > layers {
                prop_assert_eq!(a.row(v), b.row(v));
            }
        }
    }

    #[test]
    fn jsmlp_blocks_match_distinct_indices(seeds in proptest::collection::vec(any::<u64>(), 1..8)) {
        let mut policy = small_policy(1, true);
        let mut seen = BTreeSet::new();
        for s in seeds {
            let d = random_design(s, 9);
            seen.extend(d.index_ints());
            policy.ensure_blocks([&d]);
            policy.ensure_blocks([&d]);
            prop_assert_eq!(policy.block_counts(), [seen.len(); 3]);
        }
    }

    #[test]
    fn log_prob_factorizes_over_joints(seed in any::<u64>()) {
        let policy = small_policy(seed, true);
        let d = random_design(seed, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs: Vec<f64> = (0..d.len() * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        for stage in [StageFlag::SkeletonTransform, StageFlag::AttributeTransform, StageFlag::Execution] {
            let input = PolicyInput { design: &d, stage, obs: (stage == StageFlag::Execution).then_some(&obs[..]) };
            let (action, logp) = policy.act(&input, ActMode::Sample, &mut rng).unwrap();
            let out = policy.head_output(&input).unwrap();
            let per_joint: Vec<f64> = match &action {
                Action::Skeleton(a) => a.iter().enumerate().map(|(i, k)| {
                    dist::log_softmax(out.row(i).as_slice().unwrap())[k.index()]
                }).collect(),
                Action::Attribute(a) => (0..d.len()).map(|i| {
                    dist::gaussian_log_prob(&a[i * 4..i * 4 + 4], out.row(i).as_slice().unwrap(), &policy.attr_log_std())
                }).collect(),
                Action::Execution(a) => a.iter().enumerate().map(|(k, &x)| {
                    dist::gaussian_log_prob(&[x], &[out[[k + 1, 0]]], &[policy.ctrl_log_std()])
                }).collect(),
            };
            prop_assert!((per_joint.iter().sum::<f64>() - logp).abs() < 1e-12);
            let ev = policy.evaluate(&[StepRef { input, action: &action }]).unwrap();
            prop_assert!((ev[0].log_prob - logp).abs() < 1e-12);
        }
    }

    #[test]
    fn execution_head_depends_on_design_and_covariance_is_shared(seed in any::<u64>()) {
        let policy = small_policy(seed, true);
        let d = random_design(seed, 6);
        prop_assume!(d.len() >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs: Vec<f64> = (0..d.len() * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let input = PolicyInput { design: &d, stage: StageFlag::Execution, obs: Some(&obs) };
        let base = policy.head_output(&input).unwrap();

        let shifted: Vec<AttrVector> = d.attrs().iter().map(|a| AttrVector::from_slice(&a.to_array().map(|v| (v * 0.5 + 0.3).clamp(-1.0, 1.0)))).collect();
        let d2 = d.with_attrs(&shifted).unwrap();
        let other = policy.head_output(&PolicyInput { design: &d2, ..input }).unwrap();
        prop_assert!(base != other);

        let (action, _) = policy.act(&input, ActMode::Sample, &mut rng).unwrap();
        let mut obs2 = obs.clone();
        obs2[0] += 1.0;
        let e1 = policy.evaluate(&[StepRef { input, action: &action }]).unwrap()[0];
        let e2 = policy.evaluate(&[StepRef { input: PolicyInput { obs: Some(&obs2), ..input }, action: &action }]).unwrap()[0];
        prop_assert_eq!(e1.entropy, e2.entropy);
    }
}
