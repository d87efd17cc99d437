//! PPO with a clipped surrogate, GAE and Adam.
//!
//! All three sub-policies and the value network are updated together from
//! one mixed-stage batch.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Gradients, ParamGroup, ParamStore};
use crate::policy::{PolicyError, PolicyInput, StepRef, Transform2ActPolicy};
use crate::rollout::{Memory, Transition};
use crate::util::rng_from;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid PPO config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub minibatch: usize,
    /// Passes over each batch.
    pub iterations: usize,
    pub entropy_coef: f64,
    /// Standardize advantages over each batch.
    pub normalize_advantages: bool,
    /// Per-group gradient norm cap; `0` disables clipping.
    pub max_grad_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            policy_lr: 5e-5,
            value_lr: 3e-4,
            gamma: 0.995,
            lambda: 0.95,
            minibatch: 2048,
            iterations: 10,
            entropy_coef: 0.0,
            normalize_advantages: true,
            max_grad_norm: 40.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.minibatch == 0 {
            return bad("minibatch must be positive");
        }
        Ok(())
    }
}

/// Generalized advantage estimation over one contiguous sequence.
///
/// `next value` of step `t` is `values[t + 1]`, or `last_value` for the
/// final step, masked to zero when `dones[t]`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "gae inputs must align");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let mask = if dones[t] { 0.0 } else { 1.0 };
        let next_v = if t + 1 < n { values[t + 1] } else { last_value };
        let delta = rewards[t] + gamma * next_v * mask - values[t];
        next_adv = delta + gamma * lambda * mask * next_adv;
        adv[t] = next_adv;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Adam with separate learning rates for the policy and value groups.
/// Moment buffers grow as new parameters (JSMLP blocks) appear.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    /// Update count per group: `[policy, value]`.
    pub steps: [u64; 2],
}

fn group_slot(g: ParamGroup) -> usize {
    match g {
        ParamGroup::Policy => 0,
        ParamGroup::Value => 1,
    }
}

impl Adam {
    fn sync(&mut self, store: &ParamStore) {
        for (_, p) in store.iter().skip(self.m.len()) {
            self.m.push(Array2::zeros(p.value.raw_dim()));
            self.v.push(Array2::zeros(p.value.raw_dim()));
        }
    }

    /// Clip the group's gradient norm, then take one Adam step on it.
    /// Returns the pre-clip norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, group: ParamGroup, lr: f64, cfg: &PpoConfig) -> f64 {
        self.sync(store);
        let ids: Vec<_> = store
            .iter()
            .filter(|(id, p)| p.group == group && grads.get(*id).is_some())
            .map(|(id, _)| id)
            .collect();
        let norm = ids
            .iter()
            .map(|id| grads.get(*id).expect("filtered").iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
            cfg.max_grad_norm / (norm + 1e-6)
        } else {
            1.0
        };
        let slot = group_slot(group);
        self.steps[slot] += 1;
        let t = self.steps[slot] as i32;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for id in ids {
            let g = grads.get(id).expect("filtered");
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.value_mut(id);
            ndarray::Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            });
        }
        norm
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub entropy: f64,
    pub minibatches: usize,
}

/// Advantages and returns for every transition of the memory, in order.
pub fn batch_advantages(memory: &Memory, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mut adv = Vec::with_capacity(memory.len());
    let mut ret = Vec::with_capacity(memory.len());
    for ep in &memory.episodes {
        let rewards: Vec<f64> = ep.transitions.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = ep.transitions.iter().map(|t| t.value).collect();
        let dones = vec![false; rewards.len()];
        let (a, r) = compute_gae(&rewards, &values, &dones, ep.bootstrap, gamma, lambda);
        adv.extend(a);
        ret.extend(r);
    }
    (adv, ret)
}

/// Standardize over the whole batch (all stages together).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// One PPO update on a collected batch.
pub fn ppo_update(
    policy: &mut Transform2ActPolicy,
    adam: &mut Adam,
    memory: &Memory,
    cfg: &PpoConfig,
    seed: u64,
    epoch: u64,
) -> Result<UpdateStats, PpoError> {
    cfg.validate()?;
    policy.ensure_blocks(memory.episodes.iter().flat_map(|e| e.transitions.iter().map(|t| t.design.as_ref())));
    let transitions: Vec<&Transition> = memory.transitions().collect();
    let n = transitions.len();
    if n == 0 {
        return Ok(UpdateStats::default());
    }
    let (mut adv, ret) = batch_advantages(memory, cfg.gamma, cfg.lambda);
    if cfg.normalize_advantages {
        normalize_advantages(&mut adv);
    }

    let mut rng = rng_from(seed, &[0x5050_4f, epoch]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    for _ in 0..cfg.iterations {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch) {
            let steps: Vec<StepRef<'_>> = chunk.iter().map(|&i| transitions[i].step_ref()).collect();
            let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
            let old: Vec<f64> = chunk.iter().map(|&i| transitions[i].log_prob).collect();
            let (pg, ps) = policy.policy_loss_grads(&steps, &a, &old, cfg.clip, cfg.entropy_coef)?;
            adam.step(policy.store_mut(), &pg, ParamGroup::Policy, cfg.policy_lr, cfg);

            let inputs: Vec<PolicyInput<'_>> = chunk.iter().map(|&i| transitions[i].input()).collect();
            let r: Vec<f64> = chunk.iter().map(|&i| ret[i]).collect();
            let (vg, vl) = policy.value_loss_grads(&inputs, &r)?;
            adam.step(policy.store_mut(), &vg, ParamGroup::Value, cfg.value_lr, cfg);

            stats.policy_loss += ps.loss;
            stats.value_loss += vl;
            stats.kl += ps.approx_kl;
            stats.clip_frac += ps.clip_frac;
            stats.entropy += ps.entropy;
            stats.minibatches += 1;
        }
    }
    let k = stats.minibatches.max(1) as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.kl /= k;
    stats.clip_frac /= k;
    stats.entropy /= k;
    Ok(stats)
}
