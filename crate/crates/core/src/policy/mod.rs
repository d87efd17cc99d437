//! The conditional transform-and-control policy.
//!
//! Three sub-policies with disjoint parameters act in turn: a categorical
//! skeleton head, a Gaussian attribute head and a Gaussian control head.
//! Each is a GraphConv stack, a joint-specialized MLP and a linear output
//! layer. A separate value network reads out the root node.

pub mod dist;
mod normalizer;

use std::collections::BTreeSet;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{DesignError, DesignGraph, SkeletonAction, ATTR_DIM};
use crate::nn::checkpoint::{read_tensors, write_tensors, NamedTensor};
use crate::nn::{
    gnn_forward, GnnStack, Gradients, JsmlpHead, Linear, Mlp, NetError, NodeFeatureBatch, NodeFeatureBatchBuilder,
    ParamGroup, ParamId, ParamStore, Tape, Var,
};
pub use normalizer::ObsNormalizer;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy contract violated: {0}")]
    Contract(String),
    #[error("corrupt transition: {0}")]
    Corrupt(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Design(#[from] DesignError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageFlag {
    SkeletonTransform,
    AttributeTransform,
    Execution,
}

impl StageFlag {
    pub fn index(self) -> usize {
        match self {
            Self::SkeletonTransform => 0,
            Self::AttributeTransform => 1,
            Self::Execution => 2,
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }

    pub fn is_transform(self) -> bool {
        self != Self::Execution
    }
}

/// Network sizes and initial exploration noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub gnn: Vec<usize>,
    pub jsmlp: Vec<usize>,
    pub jsmlp_skeleton: bool,
    pub jsmlp_attribute: bool,
    pub jsmlp_execution: bool,
    pub value_gnn: Vec<usize>,
    pub value_mlp: Vec<usize>,
    /// Per-joint environment observation width.
    pub obs_dim: usize,
    pub attr_log_std: f64,
    pub ctrl_log_std: f64,
    pub normalize_obs: bool,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            gnn: vec![64, 64, 64],
            jsmlp: vec![128, 128],
            jsmlp_skeleton: true,
            jsmlp_attribute: true,
            jsmlp_execution: true,
            value_gnn: vec![64, 64, 64],
            value_mlp: vec![512, 256],
            obs_dim: 4,
            attr_log_std: 0.1f64.ln(),
            ctrl_log_std: 0.0,
            normalize_obs: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Argmax,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Skeleton(Vec<SkeletonAction>),
    /// Row-major `n_joints x ATTR_DIM` deltas.
    Attribute(Vec<f64>),
    /// One normalized torque per non-root joint.
    Execution(Vec<f64>),
}

impl Action {
    pub fn stage(&self) -> StageFlag {
        match self {
            Self::Skeleton(_) => StageFlag::SkeletonTransform,
            Self::Attribute(_) => StageFlag::AttributeTransform,
            Self::Execution(_) => StageFlag::Execution,
        }
    }
}

/// What the policy sees at one timestep.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    pub design: &'a DesignGraph,
    pub stage: StageFlag,
    /// Row-major `n_joints x obs_dim`; present exactly in the execution stage.
    pub obs: Option<&'a [f64]>,
}

/// A stored decision to re-score.
#[derive(Debug, Clone, Copy)]
pub struct StepRef<'a> {
    pub input: PolicyInput<'a>,
    pub action: &'a Action,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub log_prob: f64,
    pub entropy: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PolicyLossStats {
    pub loss: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
struct Head {
    gnn: GnnStack,
    jsmlp: JsmlpHead,
    out: Linear,
}

impl Head {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, cfg: &PolicyConfig, jsmlp: bool, d_out: usize) -> Self {
        let gnn = GnnStack::new(store, &format!("{name}.gnn"), ParamGroup::Policy, d_in, &cfg.gnn, cfg.seed);
        let jsmlp = JsmlpHead::new(name, jsmlp, gnn.d_out(), &cfg.jsmlp, ParamGroup::Policy, cfg.seed);
        let out = Linear::new(store, &format!("{name}.out"), ParamGroup::Policy, jsmlp.d_out(), d_out, cfg.seed, 0.01);
        Self { gnn, jsmlp, out }
    }

    fn forward(&self, tape: &mut Tape<'_>, batch: &NodeFeatureBatch) -> Result<Var, PolicyError> {
        let h = gnn_forward(tape, &self.gnn, batch)?;
        let h = self.jsmlp.forward(tape, h, &batch.index_ints);
        Ok(self.out.forward(tape, h))
    }
}

#[derive(Debug, Clone)]
struct ValueNet {
    gnn: GnnStack,
    mlp: Mlp,
    out: Linear,
}

impl ValueNet {
    fn forward(&self, tape: &mut Tape<'_>, batch: &NodeFeatureBatch) -> Result<Var, PolicyError> {
        let h = gnn_forward(tape, &self.gnn, batch)?;
        let roots = tape.gather_rows(h, batch.roots());
        let z = self.mlp.forward(tape, roots);
        Ok(self.out.forward(tape, z))
    }
}

/// Per-sample coefficients of the surrogate loss with respect to the
/// sample's log-probability and entropy.
struct LossSeeds {
    dlogp: Vec<f64>,
    dent: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Transform2ActPolicy {
    cfg: PolicyConfig,
    store: ParamStore,
    skeleton: Head,
    attribute: Head,
    execution: Head,
    value: ValueNet,
    attr_log_std: ParamId,
    ctrl_log_std: ParamId,
    normalizer: ObsNormalizer,
}

const SKELETON: &str = "skeleton";
const ATTRIBUTE: &str = "attribute";
const EXECUTION: &str = "execution";

impl Transform2ActPolicy {
    pub fn new(cfg: PolicyConfig) -> Self {
        let mut store = ParamStore::new();
        let skeleton = Head::new(&mut store, SKELETON, ATTR_DIM, &cfg, cfg.jsmlp_skeleton, 3);
        let attribute = Head::new(&mut store, ATTRIBUTE, ATTR_DIM, &cfg, cfg.jsmlp_attribute, ATTR_DIM);
        let execution = Head::new(&mut store, EXECUTION, cfg.obs_dim + ATTR_DIM, &cfg, cfg.jsmlp_execution, 1);
        let v_in = cfg.obs_dim + ATTR_DIM + 3;
        let vgnn = GnnStack::new(&mut store, "value.gnn", ParamGroup::Value, v_in, &cfg.value_gnn, cfg.seed);
        let vmlp = Mlp::new(&mut store, "value", ParamGroup::Value, vgnn.d_out(), &cfg.value_mlp, cfg.seed);
        let vout = Linear::new(
            &mut store,
            "value.out",
            ParamGroup::Value,
            vmlp.d_out(vgnn.d_out()),
            1,
            cfg.seed,
            1.0,
        );
        let attr_log_std = store.add(
            "attribute.log_std",
            ParamGroup::Policy,
            Array2::from_elem((1, ATTR_DIM), cfg.attr_log_std),
        );
        let ctrl_log_std = store.add("execution.log_std", ParamGroup::Policy, Array2::from_elem((1, 1), cfg.ctrl_log_std));
        let normalizer = ObsNormalizer::new(cfg.obs_dim);
        Self {
            cfg,
            store,
            skeleton,
            attribute,
            execution,
            value: ValueNet {
                gnn: vgnn,
                mlp: vmlp,
                out: vout,
            },
            attr_log_std,
            ctrl_log_std,
            normalizer,
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn normalizer(&self) -> &ObsNormalizer {
        &self.normalizer
    }

    pub fn normalizer_mut(&mut self) -> &mut ObsNormalizer {
        &mut self.normalizer
    }

    pub fn attr_log_std(&self) -> Vec<f64> {
        self.store.value(self.attr_log_std).iter().copied().collect()
    }

    pub fn ctrl_log_std(&self) -> f64 {
        self.store.value(self.ctrl_log_std)[[0, 0]]
    }

    /// Distinct JSMLP blocks registered per head.
    pub fn block_counts(&self) -> [usize; 3] {
        [
            self.skeleton.jsmlp.block_count(),
            self.attribute.jsmlp.block_count(),
            self.execution.jsmlp.block_count(),
        ]
    }

    /// Register JSMLP blocks for every joint index of the given designs.
    pub fn ensure_blocks<'a>(&mut self, designs: impl IntoIterator<Item = &'a DesignGraph>) {
        let mut seen = Vec::new();
        let mut set = BTreeSet::new();
        for d in designs {
            for idx in d.index_ints() {
                if set.insert(idx) {
                    seen.push(idx);
                }
            }
        }
        self.ensure_indices(&seen);
    }

    fn ensure_indices(&mut self, indices: &[u64]) {
        for idx in indices {
            self.skeleton.jsmlp.ensure_blocks(&mut self.store, [*idx]);
            self.attribute.jsmlp.ensure_blocks(&mut self.store, [*idx]);
            self.execution.jsmlp.ensure_blocks(&mut self.store, [*idx]);
        }
    }

    fn head(&self, stage: StageFlag) -> &Head {
        match stage {
            StageFlag::SkeletonTransform => &self.skeleton,
            StageFlag::AttributeTransform => &self.attribute,
            StageFlag::Execution => &self.execution,
        }
    }

    fn check_input(&self, input: &PolicyInput<'_>) -> Result<(), PolicyError> {
        match (input.stage, input.obs) {
            (StageFlag::Execution, None) => Err(PolicyError::Contract("execution stage needs an observation".into())),
            (StageFlag::Execution, Some(obs)) if obs.len() != input.design.len() * self.cfg.obs_dim => {
                Err(PolicyError::Contract(format!(
                    "observation has {} entries, expected {} joints x {}",
                    obs.len(),
                    input.design.len(),
                    self.cfg.obs_dim
                )))
            }
            (s, Some(_)) if s.is_transform() => Err(PolicyError::Contract(
                "transform stages carry no environment state".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Node features for a sub-policy head.
    fn head_features(&self, input: &PolicyInput<'_>) -> Array2<f64> {
        let n = input.design.len();
        let attrs = input.design.attrs();
        match input.stage {
            StageFlag::SkeletonTransform | StageFlag::AttributeTransform => {
                Array2::from_shape_fn((n, ATTR_DIM), |(i, j)| attrs[i].to_array()[j])
            }
            StageFlag::Execution => {
                let w = self.cfg.obs_dim;
                let obs = self.normalized_obs(input.obs.expect("checked"), n);
                Array2::from_shape_fn((n, w + ATTR_DIM), |(i, j)| {
                    if j < w {
                        obs[i * w + j]
                    } else {
                        attrs[i].to_array()[j - w]
                    }
                })
            }
        }
    }

    fn normalized_obs(&self, obs: &[f64], n: usize) -> Vec<f64> {
        if self.cfg.normalize_obs {
            self.normalizer.normalize(obs, n)
        } else {
            obs.to_vec()
        }
    }

    fn value_features(&self, input: &PolicyInput<'_>) -> Array2<f64> {
        let n = input.design.len();
        let w = self.cfg.obs_dim;
        let attrs = input.design.attrs();
        let obs = match (input.stage, input.obs) {
            (StageFlag::Execution, Some(obs)) if obs.len() == n * w => self.normalized_obs(obs, n),
            _ => vec![0.0; n * w],
        };
        let onehot = input.stage.one_hot();
        Array2::from_shape_fn((n, w + ATTR_DIM + 3), |(i, j)| {
            if j < w {
                obs[i * w + j]
            } else if j < w + ATTR_DIM {
                attrs[i].to_array()[j - w]
            } else {
                onehot[j - w - ATTR_DIM]
            }
        })
    }

    fn build_batch<'a>(
        inputs: impl Iterator<Item = (&'a DesignGraph, Array2<f64>)>,
        width: usize,
    ) -> Result<NodeFeatureBatch, PolicyError> {
        let mut b = NodeFeatureBatchBuilder::new(width);
        for (design, feats) in inputs {
            b.push(feats.view(), &design.parent_positions(), &design.index_ints())?;
        }
        Ok(b.finish())
    }

    fn head_width(&self, stage: StageFlag) -> usize {
        match stage {
            StageFlag::Execution => self.cfg.obs_dim + ATTR_DIM,
            _ => ATTR_DIM,
        }
    }

    /// Raw per-joint head outputs for one input: logits or means.
    pub fn head_output(&self, input: &PolicyInput<'_>) -> Result<Array2<f64>, PolicyError> {
        self.check_input(input)?;
        let batch = NodeFeatureBatch::single(
            self.head_features(input),
            &input.design.parent_positions(),
            input.design.index_ints(),
        )?;
        let mut tape = Tape::new(&self.store);
        let out = self.head(input.stage).forward(&mut tape, &batch)?;
        Ok(tape.value(out).to_owned())
    }

    /// Choose an action; returns it with its total log-probability.
    pub fn act<R: Rng + ?Sized>(
        &self,
        input: &PolicyInput<'_>,
        mode: ActMode,
        rng: &mut R,
    ) -> Result<(Action, f64), PolicyError> {
        let out = self.head_output(input)?;
        let n = input.design.len();
        match input.stage {
            StageFlag::SkeletonTransform => {
                let mut acts = Vec::with_capacity(n);
                let mut logp = 0.0;
                for row in out.rows() {
                    let lp = dist::log_softmax(row.as_slice().expect("contiguous"));
                    let k = match mode {
                        ActMode::Sample => dist::sample_categorical(&lp, rng),
                        ActMode::Argmax => dist::argmax(&lp),
                    };
                    logp += lp[k];
                    acts.push(SkeletonAction::from_index(k));
                }
                Ok((Action::Skeleton(acts), logp))
            }
            StageFlag::AttributeTransform => {
                let ls = self.attr_log_std();
                let mut acts = Vec::with_capacity(n * ATTR_DIM);
                let mut logp = 0.0;
                for row in out.rows() {
                    let mean = row.as_slice().expect("contiguous");
                    let a = match mode {
                        ActMode::Sample => dist::sample_gaussian(mean, &ls, rng),
                        ActMode::Argmax => mean.to_vec(),
                    };
                    logp += dist::gaussian_log_prob(&a, mean, &ls);
                    acts.extend(a);
                }
                Ok((Action::Attribute(acts), logp))
            }
            StageFlag::Execution => {
                let ls = [self.ctrl_log_std()];
                let mut acts = Vec::with_capacity(n.saturating_sub(1));
                let mut logp = 0.0;
                for row in out.rows().into_iter().skip(1) {
                    let mean = [row[0]];
                    let a = match mode {
                        ActMode::Sample => dist::sample_gaussian(&mean, &ls, rng)[0],
                        ActMode::Argmax => mean[0],
                    };
                    logp += dist::gaussian_log_prob(&[a], &mean, &ls);
                    acts.push(a);
                }
                Ok((Action::Execution(acts), logp))
            }
        }
    }

    /// State value. Transform-stage observations are ignored (zeroed).
    pub fn value(&self, input: &PolicyInput<'_>) -> Result<f64, PolicyError> {
        if input.stage == StageFlag::Execution {
            self.check_input(input)?;
        }
        let batch = NodeFeatureBatch::single(
            self.value_features(input),
            &input.design.parent_positions(),
            input.design.index_ints(),
        )?;
        let mut tape = Tape::new(&self.store);
        let v = self.value.forward(&mut tape, &batch)?;
        Ok(tape.value(v)[[0, 0]])
    }

    /// Values for many states in one batched pass.
    pub fn values(&self, inputs: &[PolicyInput<'_>]) -> Result<Vec<f64>, PolicyError> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        for input in inputs.iter().filter(|i| i.stage == StageFlag::Execution) {
            self.check_input(input)?;
        }
        let width = self.cfg.obs_dim + ATTR_DIM + 3;
        let batch = Self::build_batch(inputs.iter().map(|i| (i.design, self.value_features(i))), width)?;
        let mut tape = Tape::new(&self.store);
        let v = self.value.forward(&mut tape, &batch)?;
        Ok(tape.value(v).column(0).to_vec())
    }

    /// Log-probability and entropy of stored actions under the current
    /// parameters, plus state values.
    pub fn evaluate(&self, steps: &[StepRef<'_>]) -> Result<Vec<Evaluation>, PolicyError> {
        let mut out = vec![
            Evaluation {
                log_prob: 0.0,
                entropy: 0.0,
                value: 0.0,
            };
            steps.len()
        ];
        let inputs: Vec<PolicyInput<'_>> = steps.iter().map(|s| s.input).collect();
        for (o, v) in out.iter_mut().zip(self.values(&inputs)?) {
            o.value = v;
        }
        let mut tape = Tape::new(&self.store);
        for (stage, members) in self.group_by_stage(steps)? {
            let (var, offsets) = self.stage_forward(&mut tape, stage, steps, &members)?;
            let outv = tape.value(var).to_owned();
            for (k, &i) in members.iter().enumerate() {
                let (lp, ent) = self.score(&outv, offsets[k], steps[i], None)?;
                out[i].log_prob = lp;
                out[i].entropy = ent;
            }
        }
        Ok(out)
    }

    fn group_by_stage(&self, steps: &[StepRef<'_>]) -> Result<Vec<(StageFlag, Vec<usize>)>, PolicyError> {
        let mut groups: [Vec<usize>; 3] = Default::default();
        for (i, s) in steps.iter().enumerate() {
            if s.action.stage() != s.input.stage {
                return Err(PolicyError::Corrupt(format!(
                    "step {i}: {:?} action stored for {:?} stage",
                    s.action.stage(),
                    s.input.stage
                )));
            }
            self.check_input(&s.input)?;
            let n = s.input.design.len();
            let ok = match s.action {
                Action::Skeleton(a) => a.len() == n,
                Action::Attribute(a) => a.len() == n * ATTR_DIM,
                Action::Execution(a) => a.len() + 1 == n,
            };
            if !ok {
                return Err(PolicyError::Corrupt(format!(
                    "step {i}: action size does not match a {n}-joint design"
                )));
            }
            groups[s.input.stage.index()].push(i);
        }
        let stages = [
            StageFlag::SkeletonTransform,
            StageFlag::AttributeTransform,
            StageFlag::Execution,
        ];
        Ok(stages
            .into_iter()
            .zip(groups)
            .filter(|(_, g)| !g.is_empty())
            .collect())
    }

    fn stage_forward(
        &self,
        tape: &mut Tape<'_>,
        stage: StageFlag,
        steps: &[StepRef<'_>],
        members: &[usize],
    ) -> Result<(Var, Vec<usize>), PolicyError> {
        let batch = Self::build_batch(
            members
                .iter()
                .map(|&i| (steps[i].input.design, self.head_features(&steps[i].input))),
            self.head_width(stage),
        )?;
        let offsets = batch.graph_offsets.clone();
        let var = self.head(stage).forward(tape, &batch)?;
        Ok((var, offsets))
    }

    /// Log-prob and entropy of one step from its head output rows. With
    /// `grad = Some((dlogp, dent, dout, dlogstd))`, accumulates gradients.
    fn score(
        &self,
        out: &Array2<f64>,
        offset: usize,
        step: StepRef<'_>,
        grad: Option<(f64, f64, &mut Array2<f64>, &mut [f64])>,
    ) -> Result<(f64, f64), PolicyError> {
        let n = step.input.design.len();
        let mut logp = 0.0;
        let mut ent = 0.0;
        match step.action {
            Action::Skeleton(acts) => {
                let mut lps = Vec::with_capacity(n);
                for (u, a) in acts.iter().enumerate() {
                    let row = out.row(offset + u);
                    let lp = dist::log_softmax(row.as_slice().expect("contiguous"));
                    logp += lp[a.index()];
                    ent += dist::categorical_entropy(&lp);
                    lps.push(lp);
                }
                if let Some((cl, ce, dout, _)) = grad {
                    for (u, a) in acts.iter().enumerate() {
                        let lp = &lps[u];
                        let h: f64 = dist::categorical_entropy(lp);
                        for k in 0..3 {
                            let p = lp[k].exp();
                            let ind = if k == a.index() { 1.0 } else { 0.0 };
                            dout[[offset + u, k]] += cl * (ind - p) + ce * (-p * (lp[k] + h));
                        }
                    }
                }
            }
            Action::Attribute(acts) => {
                let ls = self.attr_log_std();
                let inv_var: Vec<f64> = ls.iter().map(|l| (-2.0 * l).exp()).collect();
                ent = n as f64 * dist::gaussian_entropy(&ls);
                let mut grad = grad;
                for u in 0..n {
                    let row = out.row(offset + u);
                    let mean = row.as_slice().expect("contiguous");
                    let a = &acts[u * ATTR_DIM..(u + 1) * ATTR_DIM];
                    logp += dist::gaussian_log_prob(a, mean, &ls);
                    if let Some((cl, _, dout, dls)) = grad.as_mut() {
                        for d in 0..ATTR_DIM {
                            let diff = a[d] - mean[d];
                            dout[[offset + u, d]] += *cl * diff * inv_var[d];
                            dls[d] += *cl * (diff * diff * inv_var[d] - 1.0);
                        }
                    }
                }
                if let Some((_, ce, _, dls)) = grad {
                    for v in dls.iter_mut() {
                        *v += ce * n as f64;
                    }
                }
            }
            Action::Execution(acts) => {
                let ls = [self.ctrl_log_std()];
                let inv_var = (-2.0 * ls[0]).exp();
                ent = acts.len() as f64 * dist::gaussian_entropy(&ls);
                let mut grad = grad;
                for (k, a) in acts.iter().enumerate() {
                    let mean = out[[offset + k + 1, 0]];
                    logp += dist::gaussian_log_prob(&[*a], &[mean], &ls);
                    if let Some((cl, _, dout, dls)) = grad.as_mut() {
                        let diff = a - mean;
                        dout[[offset + k + 1, 0]] += *cl * diff * inv_var;
                        dls[0] += *cl * (diff * diff * inv_var - 1.0);
                    }
                }
                if let Some((_, ce, _, dls)) = grad {
                    dls[0] += ce * acts.len() as f64;
                }
            }
        }
        Ok((logp, ent))
    }

    /// Clipped surrogate loss over a minibatch and its gradient.
    ///
    /// `loss = -mean(min(r A, clip(r, 1-eps, 1+eps) A)) - ent_coef * mean(H)`
    /// with `r = exp(logp - old_logp)`.
    pub fn policy_loss_grads(
        &self,
        steps: &[StepRef<'_>],
        advantages: &[f64],
        old_log_probs: &[f64],
        clip: f64,
        ent_coef: f64,
    ) -> Result<(Gradients, PolicyLossStats), PolicyError> {
        let b = steps.len();
        if advantages.len() != b || old_log_probs.len() != b {
            return Err(PolicyError::Contract("minibatch arrays differ in length".into()));
        }
        let mut tape = Tape::new(&self.store);
        let groups = self.group_by_stage(steps)?;
        let mut forwards = Vec::with_capacity(groups.len());
        let mut logp = vec![0.0; b];
        let mut ent = vec![0.0; b];
        for (stage, members) in &groups {
            let (var, offsets) = self.stage_forward(&mut tape, *stage, steps, members)?;
            let outv = tape.value(var).to_owned();
            for (k, &i) in members.iter().enumerate() {
                let (lp, h) = self.score(&outv, offsets[k], steps[i], None)?;
                logp[i] = lp;
                ent[i] = h;
            }
            forwards.push((var, outv, offsets));
        }

        let inv_b = 1.0 / b.max(1) as f64;
        let mut stats = PolicyLossStats::default();
        let mut seeds = LossSeeds {
            dlogp: vec![0.0; b],
            dent: vec![-ent_coef * inv_b; b],
        };
        for i in 0..b {
            let ratio = (logp[i] - old_log_probs[i]).exp();
            let a = advantages[i];
            let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
            stats.loss -= inv_b * (ratio * a).min(clipped * a) + ent_coef * inv_b * ent[i];
            let unclipped_active = !((a > 0.0 && ratio > 1.0 + clip) || (a < 0.0 && ratio < 1.0 - clip));
            if unclipped_active {
                seeds.dlogp[i] = -inv_b * a * ratio;
            }
            if (ratio - 1.0).abs() > clip {
                stats.clip_frac += inv_b;
            }
            stats.approx_kl += inv_b * (old_log_probs[i] - logp[i]);
            stats.entropy += inv_b * ent[i];
        }

        let mut tape_seeds = Vec::with_capacity(groups.len());
        let mut d_attr_ls = vec![0.0; ATTR_DIM];
        let mut d_ctrl_ls = vec![0.0; 1];
        for ((stage, members), (var, outv, offsets)) in groups.iter().zip(forwards) {
            let mut dout = Array2::zeros(outv.raw_dim());
            for (k, &i) in members.iter().enumerate() {
                let dls: &mut [f64] = match stage {
                    StageFlag::Execution => &mut d_ctrl_ls,
                    _ => &mut d_attr_ls,
                };
                self.score(
                    &outv,
                    offsets[k],
                    steps[i],
                    Some((seeds.dlogp[i], seeds.dent[i], &mut dout, dls)),
                )?;
            }
            tape_seeds.push((var, dout));
        }
        let mut grads = tape.backward_seeded(tape_seeds)?;
        grads.add(self.attr_log_std, &Array2::from_shape_vec((1, ATTR_DIM), d_attr_ls).expect("shape"));
        grads.add(self.ctrl_log_std, &Array2::from_shape_vec((1, 1), d_ctrl_ls).expect("shape"));
        Ok((grads, stats))
    }

    /// Mean squared value error and its gradient.
    pub fn value_loss_grads(
        &self,
        inputs: &[PolicyInput<'_>],
        returns: &[f64],
    ) -> Result<(Gradients, f64), PolicyError> {
        if inputs.len() != returns.len() {
            return Err(PolicyError::Contract("value targets differ in length".into()));
        }
        let width = self.cfg.obs_dim + ATTR_DIM + 3;
        let batch = Self::build_batch(inputs.iter().map(|i| (i.design, self.value_features(i))), width)?;
        let mut tape = Tape::new(&self.store);
        let v = self.value.forward(&mut tape, &batch)?;
        let vals = tape.value(v).to_owned();
        let inv_b = 1.0 / inputs.len().max(1) as f64;
        let mut loss = 0.0;
        let mut dv = Array2::zeros(vals.raw_dim());
        for (i, r) in returns.iter().enumerate() {
            let e = vals[[i, 0]] - r;
            loss += inv_b * e * e;
            dv[[i, 0]] = 2.0 * inv_b * e;
        }
        let grads = tape.backward_seeded(vec![(v, dv)])?;
        Ok((grads, loss))
    }

    /// All parameters and normalizer statistics as named tensors, in
    /// parameter order.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                value: p.value.clone(),
            })
            .collect();
        out.extend(self.normalizer.to_tensors());
        out
    }

    /// Restore from tensors written by [`Self::named_tensors`] into a
    /// freshly built policy with the same config.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<(), PolicyError> {
        // recreate JSMLP blocks in their original registration order
        let mut order = Vec::new();
        let mut seen = BTreeSet::new();
        for t in tensors {
            if let Some(idx) = parse_block_index(&t.name) {
                if seen.insert(idx) {
                    order.push(idx);
                }
            }
        }
        self.ensure_indices(&order);
        let mut restored = vec![false; self.store.len()];
        for t in tensors {
            if self.normalizer.load_tensor(t)? {
                continue;
            }
            let id = self
                .store
                .find(&t.name)
                .ok_or_else(|| PolicyError::Checkpoint(format!("unknown parameter {}", t.name)))?;
            let slot = self.store.value_mut(id);
            if slot.dim() != t.value.dim() {
                return Err(PolicyError::Checkpoint(format!(
                    "{} has shape {:?}, checkpoint has {:?}",
                    t.name,
                    slot.dim(),
                    t.value.dim()
                )));
            }
            slot.assign(&t.value);
            restored[id.index()] = true;
        }
        if let Some(missing) = restored.iter().position(|r| !r) {
            return Err(PolicyError::Checkpoint(format!(
                "checkpoint lacks parameter {}",
                self.store.iter().nth(missing).map(|(_, p)| p.name.clone()).unwrap_or_default()
            )));
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, w: W) -> Result<(), PolicyError> {
        let meta = serde_json::to_string(&self.cfg).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        write_tensors(w, &meta, &self.named_tensors())?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self, PolicyError> {
        let (meta, tensors) = read_tensors(r)?;
        let cfg: PolicyConfig = serde_json::from_str(&meta).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        let mut policy = Self::new(cfg);
        policy.load_tensors(&tensors)?;
        Ok(policy)
    }
}

/// `"<head>.jsmlp.<index>.<layer>.<w|b>"` -> index.
fn parse_block_index(name: &str) -> Option<u64> {
    let mut parts = name.split('.');
    let _head = parts.next()?;
    if parts.next()? != "jsmlp" {
        return None;
    }
    parts.next()?.parse().ok()
}
