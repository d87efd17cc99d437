//! Oracles and fixtures shared by the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use morphrl::design::{AttrVector, DesignGraph, DEFAULT_MAX_JOINTS};
use morphrl::nn::{ParamGroup, ParamId};
use morphrl::policy::{ActMode, Action, PolicyConfig, PolicyInput, StageFlag, StepRef, Transform2ActPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OBS_DIM: usize = 4;

/// Brute-force GAE: the lambda-weighted mixture of every n-step return,
/// evaluated straight from its definition.
pub fn gae_oracle(rewards: &[f64], values: &[f64], last_value: f64, terminal: bool, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let v_at = |k: usize| -> f64 {
        if k < n {
            values[k]
        } else if terminal {
            0.0
        } else {
            last_value
        }
    };
    (0..n)
        .map(|t| {
            let horizon = n - t;
            // n-step return G^(k) for k = 1..=horizon; beyond the end every
            // G^(k) equals the full return G^(horizon)
            let g = |k: usize| -> f64 {
                let mut acc = 0.0;
                for i in 0..k {
                    acc += gamma.powi(i as i32) * rewards[t + i];
                }
                acc + gamma.powi(k as i32) * v_at(t + k)
            };
            let mut lam_ret = 0.0;
            for k in 1..horizon {
                lam_ret += (1.0 - lambda) * lambda.powi(k as i32 - 1) * g(k);
            }
            lam_ret += lambda.powi(horizon as i32 - 1) * g(horizon);
            lam_ret - values[t]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradStack {
    Skeleton,
    Attribute,
    Execution,
    Value,
}

pub struct GradReport {
    pub n_params: usize,
    pub max_rel_err: f64,
}

pub fn tiny_policy(seed: u64) -> Transform2ActPolicy {
    Transform2ActPolicy::new(PolicyConfig {
        gnn: vec![4],
        jsmlp: vec![4],
        value_gnn: vec![4],
        value_mlp: vec![4],
        obs_dim: OBS_DIM,
        normalize_obs: false,
        seed,
        ..PolicyConfig::default()
    })
}

fn stage_of(stack: GradStack) -> StageFlag {
    match stack {
        GradStack::Skeleton => StageFlag::SkeletonTransform,
        GradStack::Attribute => StageFlag::AttributeTransform,
        GradStack::Execution | GradStack::Value => StageFlag::Execution,
    }
}

/// Relative error with a small absolute floor so that two near-zero
/// gradients compare as equal.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Compare analytic gradients of one stack's loss against central
/// differences (eps = 1e-5) over every scalar parameter of the stack.
pub fn gradient_check(stack: GradStack, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = tiny_policy(seed);
    let designs: Vec<DesignGraph> = (0..6)
        .map(|_| {
            let n = rng.random_range(1..=4);
            DesignGraph::random(&mut rng, n, 3, DEFAULT_MAX_JOINTS)
        })
        .collect();
    policy.ensure_blocks(designs.iter());
    let obs: Vec<Vec<f64>> = designs
        .iter()
        .map(|d| (0..d.len() * OBS_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let stage = stage_of(stack);
    let inputs: Vec<PolicyInput<'_>> = designs
        .iter()
        .zip(&obs)
        .map(|(d, o)| PolicyInput {
            design: d,
            stage,
            obs: (stage == StageFlag::Execution).then_some(o.as_slice()),
        })
        .collect();
    let acted: Vec<(Action, f64)> = inputs
        .iter()
        .map(|i| policy.act(i, ActMode::Sample, &mut rng).unwrap())
        .collect();
    let adv: Vec<f64> = inputs.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
    let old: Vec<f64> = acted.iter().map(|(_, lp)| lp + rng.random_range(-0.1..0.1)).collect();
    let returns: Vec<f64> = inputs.iter().map(|_| rng.random_range(-3.0..3.0)).collect();

    let prefix = match stack {
        GradStack::Skeleton => "skeleton.",
        GradStack::Attribute => "attribute.",
        GradStack::Execution => "execution.",
        GradStack::Value => "value.",
    };
    let ids: Vec<ParamId> = policy
        .store()
        .iter()
        .filter(|(_, p)| {
            p.name.starts_with(prefix) && (stack == GradStack::Value) == (p.group == ParamGroup::Value)
        })
        .map(|(id, _)| id)
        .collect();

    let loss_and_grad = |p: &Transform2ActPolicy| {
        let steps: Vec<StepRef<'_>> = inputs
            .iter()
            .zip(&acted)
            .map(|(i, (a, _))| StepRef { input: *i, action: a })
            .collect();
        if stack == GradStack::Value {
            let (g, l) = p.value_loss_grads(&inputs, &returns).unwrap();
            (l, g)
        } else {
            let (g, s) = p.policy_loss_grads(&steps, &adv, &old, 0.2, 0.01).unwrap();
            (s.loss, g)
        }
    };
    let (_, grads) = loss_and_grad(&policy);
    let eps = 1e-5;
    let mut n_params = 0;
    let mut max_rel_err: f64 = 0.0;
    for id in ids {
        let shape = policy.store().value(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                n_params += 1;
                let orig = policy.store().value(id)[[r, c]];
                policy.store_mut().value_mut(id)[[r, c]] = orig + eps;
                let (lp, _) = loss_and_grad(&policy);
                policy.store_mut().value_mut(id)[[r, c]] = orig - eps;
                let (lm, _) = loss_and_grad(&policy);
                policy.store_mut().value_mut(id)[[r, c]] = orig;
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
                max_rel_err = max_rel_err.max(rel_err(analytic, numeric));
            }
        }
    }
    GradReport { n_params, max_rel_err }
}

/// Swimmer chain used as the default initial design.
pub fn swimmer_d0() -> DesignGraph {
    DesignGraph::chain(&[AttrVector::new(0.5, 0.0, 0.0, 0.0); 3], 3, DEFAULT_MAX_JOINTS)
}
