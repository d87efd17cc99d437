use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::params::{ParamGroup, ParamId, ParamStore};
use super::tape::{EdgeList, RowList, Tape, Var};
use super::NetError;
use crate::util::{hash_str, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Fan-in scaled uniform weights and zero bias.
pub fn init_linear<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize, scale: f64) -> (Array2<f64>, Array2<f64>) {
    let bound = scale / (d_in.max(1) as f64).sqrt();
    let w = Array2::from_shape_fn((d_in, d_out), |_| rng.random_range(-bound..=bound));
    (w, Array2::zeros((1, d_out)))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, d_out: usize, seed: u64, scale: f64) -> Self {
        let mut rng = rng_from(seed, &[hash_str(name)]);
        let (w, b) = init_linear(&mut rng, d_in, d_out, scale);
        Self {
            w: store.add(format!("{name}.w"), group, w),
            b: store.add(format!("{name}.b"), group, b),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let xw = tape.matmul(x, w);
        tape.add_bias(xw, b)
    }
}

/// One GraphConv layer: `W_self h_u + W_neigh sum_{v in N(u)} h_v + b`.
#[derive(Debug, Clone)]
pub struct GraphConvLayer {
    pub w_self: ParamId,
    pub w_neigh: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl GraphConvLayer {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[hash_str(name)]);
        // two summed inputs, so each half gets a 1/sqrt(2) share
        let (ws, b) = init_linear(&mut rng, d_in, d_out, std::f64::consts::FRAC_1_SQRT_2);
        let (wn, _) = init_linear(&mut rng, d_in, d_out, std::f64::consts::FRAC_1_SQRT_2);
        Self {
            w_self: store.add(format!("{name}.w_self"), group, ws),
            w_neigh: store.add(format!("{name}.w_neigh"), group, wn),
            bias: store.add(format!("{name}.bias"), group, b),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, h: Var, edges: &EdgeList, act: Activation) -> Var {
        let ws = tape.param(self.w_self);
        let wn = tape.param(self.w_neigh);
        let b = tape.param(self.bias);
        let own = tape.matmul(h, ws);
        let agg = tape.neighbor_sum(h, edges.clone());
        let msg = tape.matmul(agg, wn);
        let z = tape.add(own, msg);
        let z = tape.add_bias(z, b);
        act.apply(tape, z)
    }
}

#[derive(Debug, Clone)]
pub struct GnnStack {
    pub layers: Vec<GraphConvLayer>,
    pub activation: Activation,
    pub d_in: usize,
}

impl GnnStack {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, sizes: &[usize], seed: u64) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut d = d_in;
        for (i, &size) in sizes.iter().enumerate() {
            layers.push(GraphConvLayer::new(store, &format!("{name}.gnn{i}"), group, d, size, seed));
            d = size;
        }
        Self {
            layers,
            activation: Activation::Tanh,
            d_in,
        }
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(self.d_in, |l| l.d_out)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, edges: &EdgeList) -> Var {
        self.layers
            .iter()
            .fold(x, |h, layer| layer.forward(tape, h, edges, self.activation))
    }
}

/// Node features for one or more graphs stacked into a single disjoint union.
#[derive(Debug, Clone)]
pub struct NodeFeatureBatch {
    pub features: Array2<f64>,
    /// Both directions of every tree edge.
    pub edges: EdgeList,
    pub index_ints: Vec<u64>,
    /// First row of each graph; graph roots sit at these rows.
    pub graph_offsets: Vec<usize>,
}

impl NodeFeatureBatch {
    /// `parents[i]` is the local parent row of node `i` (`None` for the root).
    pub fn single(features: Array2<f64>, parents: &[Option<usize>], index_ints: Vec<u64>) -> Result<Self, NetError> {
        let mut b = NodeFeatureBatchBuilder::new(features.ncols());
        b.push(features.view(), parents, &index_ints)?;
        Ok(b.finish())
    }

    pub fn n_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn roots(&self) -> RowList {
        self.graph_offsets.clone().into()
    }
}

pub struct NodeFeatureBatchBuilder {
    width: usize,
    data: Vec<f64>,
    edges: Vec<(u32, u32)>,
    index_ints: Vec<u64>,
    offsets: Vec<usize>,
}

impl NodeFeatureBatchBuilder {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            data: Vec::new(),
            edges: Vec::new(),
            index_ints: Vec::new(),
            offsets: Vec::new(),
        }
    }

    pub fn push(&mut self, features: ArrayView2<'_, f64>, parents: &[Option<usize>], index_ints: &[u64]) -> Result<(), NetError> {
        let n = features.nrows();
        if features.ncols() != self.width || parents.len() != n || index_ints.len() != n {
            return Err(NetError::Shape(format!(
                "graph with {n} rows x {} cols, {} parents, {} indices does not fit width {}",
                features.ncols(),
                parents.len(),
                index_ints.len(),
                self.width
            )));
        }
        let base = self.index_ints.len();
        self.offsets.push(base);
        self.data.extend(features.iter().copied());
        for (child, parent) in parents.iter().enumerate() {
            if let Some(p) = *parent {
                if p >= n {
                    return Err(NetError::Shape(format!("parent {p} out of range for {n} nodes")));
                }
                // incoming from parent first, so symmetric siblings sum in the same order
                self.edges.push(((base + p) as u32, (base + child) as u32));
                self.edges.push(((base + child) as u32, (base + p) as u32));
            }
        }
        self.index_ints.extend_from_slice(index_ints);
        Ok(())
    }

    pub fn finish(self) -> NodeFeatureBatch {
        let rows = self.index_ints.len();
        let features = Array2::from_shape_vec((rows, self.width), self.data).expect("row-major features");
        let mut edges = self.edges;
        // group by destination so each row accumulates parent then children
        edges.sort_by_key(|&(src, dst)| (dst, src));
        NodeFeatureBatch {
            features,
            edges: Arc::from(edges),
            index_ints: self.index_ints,
            graph_offsets: self.offsets,
        }
    }
}

/// Run a GNN stack over a batch and return per-node hidden vectors.
pub fn gnn_forward(tape: &mut Tape<'_>, gnn: &GnnStack, batch: &NodeFeatureBatch) -> Result<Var, NetError> {
    if batch.features.ncols() != gnn.d_in {
        return Err(NetError::Shape(format!(
            "feature width {} does not match GNN input {}",
            batch.features.ncols(),
            gnn.d_in
        )));
    }
    let x = tape.input(batch.features.clone());
    Ok(gnn.forward(tape, x, &batch.edges))
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, sizes: &[usize], seed: u64) -> Self {
        let mut layers = Vec::new();
        let mut d = d_in;
        for (i, &size) in sizes.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.mlp{i}"), group, d, size, seed, 1.0));
            d = size;
        }
        Self { layers }
    }

    pub fn d_out(&self, d_in: usize) -> usize {
        self.layers.last().map_or(d_in, |l| l.d_out)
    }

    /// Every layer is followed by tanh.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        self.layers.iter().fold(x, |h, l| {
            let z = l.forward(tape, h);
            tape.tanh(z)
        })
    }
}

/// Joint-specialized MLP: one parameter block per joint index integer.
///
/// Blocks are created lazily. Their initial values depend only on the head's
/// seed, its name and the index, so a block computed on the fly by a rollout
/// worker equals the one later registered in the store.
#[derive(Debug, Clone)]
pub struct JsmlpHead {
    pub name: String,
    pub enabled: bool,
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub group: ParamGroup,
    seed: u64,
    blocks: BTreeMap<u64, Vec<Linear>>,
    // initial values of blocks used before registration; shared by clones,
    // which always agree on them
    lazy: Arc<RwLock<HashMap<u64, LazyBlock>>>,
}

type LazyBlock = Arc<Vec<(Array2<f64>, Array2<f64>)>>;

impl JsmlpHead {
    pub fn new(name: &str, enabled: bool, d_in: usize, hidden: &[usize], group: ParamGroup, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            enabled,
            d_in,
            hidden: hidden.to_vec(),
            group,
            seed,
            blocks: BTreeMap::new(),
            lazy: Arc::default(),
        }
    }

    pub fn d_out(&self) -> usize {
        if self.enabled {
            self.hidden.last().copied().unwrap_or(self.d_in)
        } else {
            self.d_in
        }
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_indices(&self) -> impl Iterator<Item = u64> + '_ {
        self.blocks.keys().copied()
    }

    pub fn block(&self, index: u64) -> Option<&[Linear]> {
        self.blocks.get(&index).map(|b| b.as_slice())
    }

    fn layer_name(&self, index: u64, layer: usize) -> String {
        format!("{}.jsmlp.{index}.{layer}", self.name)
    }

    fn init_values(&self, index: u64) -> Vec<(Array2<f64>, Array2<f64>)> {
        let mut rng = rng_from(self.seed, &[hash_str(&self.name), index]);
        let mut d = self.d_in;
        self.hidden
            .iter()
            .map(|&size| {
                let wb = init_linear(&mut rng, d, size, 1.0);
                d = size;
                wb
            })
            .collect()
    }

    fn lazy_values(&self, index: u64) -> LazyBlock {
        if let Some(b) = self.lazy.read().expect("lock poisoned").get(&index) {
            return b.clone();
        }
        let b = Arc::new(self.init_values(index));
        self.lazy.write().expect("lock poisoned").insert(index, b.clone());
        b
    }

    /// Register parameter blocks for any index not seen before.
    pub fn ensure_blocks(&mut self, store: &mut ParamStore, indices: impl IntoIterator<Item = u64>) {
        if !self.enabled {
            return;
        }
        for index in indices {
            if self.blocks.contains_key(&index) {
                continue;
            }
            let cached = self.lazy.write().expect("lock poisoned").remove(&index);
            let values = match cached {
                Some(b) => b.as_ref().clone(),
                None => self.init_values(index),
            };
            let block = values
                .into_iter()
                .enumerate()
                .map(|(l, (w, b))| {
                    let name = self.layer_name(index, l);
                    Linear {
                        d_in: w.nrows(),
                        d_out: w.ncols(),
                        w: store.add(format!("{name}.w"), self.group, w),
                        b: store.add(format!("{name}.b"), self.group, b),
                    }
                })
                .collect();
            self.blocks.insert(index, block);
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, h: Var, indices: &[u64]) -> Var {
        if !self.enabled || self.hidden.is_empty() {
            return h;
        }
        let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (row, &idx) in indices.iter().enumerate() {
            groups.entry(idx).or_default().push(row);
        }
        let n = indices.len();
        let mut parts = Vec::with_capacity(groups.len());
        for (idx, rows) in groups {
            let rows: RowList = rows.into();
            let mut x = if rows.len() == n {
                h
            } else {
                tape.gather_rows(h, rows.clone())
            };
            match self.blocks.get(&idx) {
                Some(block) => {
                    for layer in block {
                        let z = layer.forward(tape, x);
                        x = tape.tanh(z);
                    }
                }
                None => {
                    for (w, b) in self.lazy_values(idx).iter() {
                        let wv = tape.input(w.clone());
                        let bv = tape.input(b.clone());
                        let z = tape.matmul(x, wv);
                        let z = tape.add_bias(z, bv);
                        x = tape.tanh(z);
                    }
                }
            }
            if rows.len() == n && rows.iter().enumerate().all(|(k, &r)| k == r) {
                return x;
            }
            parts.push((x, rows));
        }
        tape.assemble(parts, n)
    }
}
