//! Evolutionary design-search baselines.
//!
//! * NGE-lite: graph evolution where children inherit their parent's
//!   control policy weights.
//! * ESS: the same evolution, but every child starts from fresh weights.
//! * RGS: a fixed population of random designs, each trained with PPO;
//!   scored by its best agent.
//!
//! Every species trains a control-only GNN policy on its own samples. The
//! execution-step budget is split evenly over generations and species.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{AttrVector, DesignGraph};
use crate::envs::EnvConfig;
use crate::policy::{PolicyConfig, Transform2ActPolicy};
use crate::ppo::{ppo_update, Adam, PpoConfig, PpoError, UpdateStats};
use crate::rollout::{collect_batch, evaluate_policy, EpisodeConfig, RolloutError};
use crate::util::{derive_seed, rng_from};

#[derive(Debug, thiserror::Error)]
pub enum EvoError {
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvoKind {
    Nge,
    Ess,
    Rgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvoConfig {
    pub population: usize,
    /// Fraction of the population replaced each generation.
    pub elim_frac: f64,
    pub generations: usize,
    pub add_prob: f64,
    pub del_prob: f64,
    pub attr_sigma: f64,
    /// Joint-count range of random designs (RGS).
    pub random_min_joints: usize,
    pub random_max_joints: usize,
}

impl Default for EvoConfig {
    fn default() -> Self {
        Self {
            population: 20,
            elim_frac: 0.15,
            generations: 5,
            add_prob: 0.3,
            del_prob: 0.15,
            attr_sigma: 0.1,
            random_min_joints: 2,
            random_max_joints: 6,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<(), EvoError> {
        let bad = |m: &str| Err(EvoError::Config(m.to_string()));
        if self.population == 0 || self.generations == 0 {
            return bad("population and generations must be positive");
        }
        if !(0.0..1.0).contains(&self.elim_frac) {
            return bad("elim_frac must be in [0, 1)");
        }
        if self.random_min_joints == 0 || self.random_min_joints > self.random_max_joints {
            return bad("random joint range is empty");
        }
        Ok(())
    }

    pub fn eliminated(&self) -> usize {
        (self.elim_frac * self.population as f64).floor() as usize
    }
}

/// Random structural edit plus Gaussian attribute noise.
///
/// With `add_prob` a child is added under a uniformly chosen joint (no-op
/// if that joint is full); with `del_prob` a random childless non-root
/// joint is removed; every attribute then receives `N(0, attr_sigma^2)`
/// noise, clamped to the normalized range.
pub fn mutate<R: Rng + ?Sized>(design: &DesignGraph, cfg: &EvoConfig, rng: &mut R) -> DesignGraph {
    let mut d = design.clone();
    if rng.random::<f64>() < cfg.add_prob {
        let parent = d.joints()[rng.random_range(0..d.len())].id;
        // a full joint or a full design leaves the skeleton unchanged
        if let Ok(Some(next)) = d.try_add_child(parent) {
            d = next;
        }
    }
    if rng.random::<f64>() < cfg.del_prob {
        let leaves: Vec<u32> = d
            .joints()
            .iter()
            .filter(|j| j.parent.is_some() && j.children.is_empty())
            .map(|j| j.id)
            .collect();
        if !leaves.is_empty() {
            let id = leaves[rng.random_range(0..leaves.len())];
            if let Ok(Some(next)) = d.try_remove_leaf(id) {
                d = next;
            }
        }
    }
    if cfg.attr_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.attr_sigma).expect("positive sigma");
        let attrs: Vec<AttrVector> = d
            .attrs()
            .iter()
            .map(|a| {
                let v = a.to_array().map(|x| x + noise.sample(rng));
                AttrVector::from_slice(&v).clamped()
            })
            .collect();
        d = d.with_attrs(&attrs).expect("same joint count");
    }
    d
}

#[derive(Debug, Clone)]
pub struct Species {
    pub id: usize,
    pub design: DesignGraph,
    pub policy: Transform2ActPolicy,
    pub adam: Adam,
    /// Mean training return in the latest batch.
    pub fitness: f64,
    pub epochs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    /// Cumulative execution steps.
    pub steps: usize,
    pub mean_return: f64,
    pub best_return: f64,
    /// Best species fitness seen in any generation so far.
    pub best_so_far: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub best_joints: usize,
}

#[derive(Debug, Clone)]
pub struct EvoResult {
    pub records: Vec<GenerationRecord>,
    pub exec_steps: usize,
    /// Best deterministic evaluation return over the final population.
    pub best_eval_return: f64,
    pub best_design: DesignGraph,
    pub eval_returns: Vec<f64>,
}

pub struct EvoSetup<'a> {
    pub kind: EvoKind,
    pub env: &'a EnvConfig,
    pub initial_design: &'a DesignGraph,
    pub policy: &'a PolicyConfig,
    pub ppo: &'a PpoConfig,
    pub evo: &'a EvoConfig,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub lanes: usize,
    pub eval_episodes: usize,
}

fn new_species(setup: &EvoSetup<'_>, id: usize, design: DesignGraph) -> Species {
    let policy = Transform2ActPolicy::new(PolicyConfig {
        seed: derive_seed(setup.seed, &[0x5350, id as u64]),
        ..setup.policy.clone()
    });
    Species {
        id,
        design,
        policy,
        adam: Adam::default(),
        fitness: f64::NEG_INFINITY,
        epochs: 0,
    }
}

/// Train one species for `steps` execution steps.
fn train_species(setup: &EvoSetup<'_>, sp: &mut Species, steps: usize) -> Result<(f64, UpdateStats), EvoError> {
    let ep = EpisodeConfig::fixed(sp.design.clone());
    let batch = setup.batch_size.min(steps).max(1);
    let mut done = 0;
    let mut last = (f64::NEG_INFINITY, UpdateStats::default());
    let stream = derive_seed(setup.seed, &[0x5350, sp.id as u64]);
    while done < steps {
        let b = batch.min(steps - done);
        let mem = collect_batch(&sp.policy, setup.env, &ep, b, stream, sp.epochs, setup.lanes)?;
        let stats = ppo_update(&mut sp.policy, &mut sp.adam, &mem, setup.ppo, stream, sp.epochs)?;
        if sp.policy.config().normalize_obs {
            sp.policy.normalizer_mut().update(mem.observations());
        }
        done += mem.exec_steps;
        sp.epochs += 1;
        let rets = mem.episode_returns();
        last = (rets.iter().sum::<f64>() / rets.len().max(1) as f64, stats);
    }
    Ok(last)
}

fn eval_species(setup: &EvoSetup<'_>, sp: &Species) -> Result<f64, EvoError> {
    let ep = EpisodeConfig::fixed(sp.design.clone());
    let eps = evaluate_policy(&sp.policy, setup.env, &ep, setup.eval_episodes.max(1), setup.seed)?;
    Ok(eps.iter().map(|e| e.total_reward()).sum::<f64>() / eps.len() as f64)
}

/// Run NGE-lite, ESS or RGS on the full execution-step budget.
pub fn run_evolution(
    setup: &EvoSetup<'_>,
    mut on_generation: impl FnMut(&GenerationRecord),
) -> Result<EvoResult, EvoError> {
    let evo = setup.evo;
    evo.validate()?;
    let pop = evo.population;
    let slots = pop * evo.generations;
    if setup.total_steps < slots {
        return Err(EvoError::Config(format!(
            "budget {} is smaller than population x generations",
            setup.total_steps
        )));
    }
    let mut rng: ChaCha8Rng = rng_from(setup.seed, &[0x45564f]);
    let mut next_id = 0;
    let mut population: Vec<Species> = (0..pop)
        .map(|_| {
            let design = match setup.kind {
                EvoKind::Rgs => {
                    let n = rng.random_range(evo.random_min_joints..=evo.random_max_joints);
                    DesignGraph::random(
                        &mut rng,
                        n,
                        setup.initial_design.max_children(),
                        setup.initial_design.max_joints(),
                    )
                }
                EvoKind::Nge | EvoKind::Ess => mutate(setup.initial_design, evo, &mut rng),
            };
            next_id += 1;
            new_species(setup, next_id - 1, design)
        })
        .collect();

    let base = setup.total_steps / slots;
    let extra = setup.total_steps % slots;
    let mut records = Vec::with_capacity(evo.generations);
    let mut steps = 0;
    let mut best_so_far = f64::NEG_INFINITY;
    for generation in 0..evo.generations {
        let shares: Vec<usize> = (0..pop)
            .map(|i| base + usize::from(generation * pop + i < extra))
            .collect();
        let results: Vec<Result<(f64, UpdateStats), EvoError>> = population
            .par_iter_mut()
            .zip(shares.par_iter())
            .map(|(sp, &share)| train_species(setup, sp, share))
            .collect();
        let mut stats = Vec::with_capacity(pop);
        for (sp, r) in population.iter_mut().zip(results) {
            let (fitness, s) = r?;
            sp.fitness = fitness;
            stats.push(s);
        }
        steps += shares.iter().sum::<usize>();

        let n = pop as f64;
        let best = population
            .iter()
            .max_by(|a, b| a.fitness.total_cmp(&b.fitness))
            .expect("non-empty population");
        best_so_far = best_so_far.max(best.fitness);
        let rec = GenerationRecord {
            generation,
            steps,
            best_so_far,
            mean_return: population.iter().map(|s| s.fitness).sum::<f64>() / n,
            best_return: best.fitness,
            policy_loss: stats.iter().map(|s| s.policy_loss).sum::<f64>() / n,
            value_loss: stats.iter().map(|s| s.value_loss).sum::<f64>() / n,
            kl: stats.iter().map(|s| s.kl).sum::<f64>() / n,
            clip_frac: stats.iter().map(|s| s.clip_frac).sum::<f64>() / n,
            best_joints: best.design.len(),
        };
        on_generation(&rec);
        records.push(rec);

        let last = generation + 1 == evo.generations;
        if setup.kind != EvoKind::Rgs && !last {
            // best first; ties keep the older species ahead
            population.sort_by(|a, b| b.fitness.total_cmp(&a.fitness).then(a.id.cmp(&b.id)));
            let k = evo.eliminated().min(pop - 1);
            population.truncate(pop - k);
            for p in 0..k {
                let parent = &population[p % population.len()];
                let design = mutate(&parent.design, evo, &mut rng);
                let child = match setup.kind {
                    EvoKind::Nge => Species {
                        id: next_id,
                        design,
                        policy: parent.policy.clone(),
                        adam: Adam::default(),
                        fitness: f64::NEG_INFINITY,
                        epochs: 0,
                    },
                    _ => new_species(setup, next_id, design),
                };
                next_id += 1;
                population.push(child);
            }
        }
    }

    let evals: Vec<Result<f64, EvoError>> = population.par_iter().map(|sp| eval_species(setup, sp)).collect();
    let eval_returns: Vec<f64> = evals.into_iter().collect::<Result<_, _>>()?;
    let (bi, best) = eval_returns
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &r)| if r > acc.1 { (i, r) } else { acc });
    Ok(EvoResult {
        records,
        exec_steps: steps,
        best_eval_return: best,
        best_design: population[bi].design.clone(),
        eval_returns,
    })
}
