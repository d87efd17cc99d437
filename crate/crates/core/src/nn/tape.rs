//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! Every operation is evaluated eagerly and appended to the tape. Parameter
//! leaves borrow their values from a [`ParamStore`]; [`Tape::backward`]
//! walks the tape in reverse and returns [`Gradients`] aligned with that
//! store. The store itself is never mutated here, so many tapes can read the
//! same parameters concurrently.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::{Gradients, ParamId, ParamStore};
use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Directed `(src, dst)` pairs: row `dst` of the output accumulates row `src`.
pub type EdgeList = Arc<[(u32, u32)]>;
pub type RowList = Arc<[usize]>;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    NeighborSum(Var, EdgeList),
    GatherRows(Var, RowList),
    Assemble(Vec<(Var, RowList)>),
    ConcatCols(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Array2<f64>>,
    op: Op,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(x), _) => x.view(),
            (None, Op::Param(id)) => self.store.value(*id).view(),
            _ => unreachable!("only parameter leaves are stored without a value"),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `x + bias` with a `1 x d` bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let out = &self.value(x) + &self.value(bias);
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) * &self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).mapv(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// Sum of neighbor rows along the given directed edges.
    pub fn neighbor_sum(&mut self, x: Var, edges: EdgeList) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros(xv.raw_dim());
        for &(src, dst) in edges.iter() {
            let mut row = out.row_mut(dst as usize);
            row += &xv.row(src as usize);
        }
        self.push(out, Op::NeighborSum(x, edges))
    }

    pub fn gather_rows(&mut self, x: Var, rows: RowList) -> Var {
        let out = self.value(x).select(Axis(0), &rows);
        self.push(out, Op::GatherRows(x, rows))
    }

    /// Place each part's rows at the listed positions of an `n_rows` matrix.
    /// Rows not covered by any part are zero.
    pub fn assemble(&mut self, parts: Vec<(Var, RowList)>, n_rows: usize) -> Var {
        let n_cols = parts.first().map_or(0, |(v, _)| self.value(*v).ncols());
        let mut out = Array2::zeros((n_rows, n_cols));
        for (v, rows) in &parts {
            let pv = self.value(*v);
            for (k, &r) in rows.iter().enumerate() {
                out.row_mut(r).assign(&pv.row(k));
            }
        }
        self.push(out, Op::Assemble(parts))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Array2::zeros((av.nrows(), av.ncols() + bv.ncols()));
        out.slice_mut(s![.., ..av.ncols()]).assign(&av);
        out.slice_mut(s![.., av.ncols()..]).assign(&bv);
        self.push(out, Op::ConcatCols(a, b))
    }

    /// Sum of all entries as a `1 x 1` matrix.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(x))
    }

    /// Backpropagate from a scalar (`1 x 1`) node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NetError> {
        self.check(loss)?;
        let shape = self.value(loss).dim();
        if shape != (1, 1) {
            return Err(NetError::Shape(format!("backward needs a scalar loss, got {shape:?}")));
        }
        self.backward_seeded(vec![(loss, Array2::ones((1, 1)))])
    }

    /// Backpropagate with explicit output gradients for one or more nodes.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Array2<f64>)>) -> Result<Gradients, NetError> {
        if self.nodes.is_empty() {
            return Err(NetError::State("backward called before any forward pass".into()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        for (v, g) in seeds {
            self.check(v)?;
            if g.dim() != self.value(v).dim() {
                return Err(NetError::Shape(format!(
                    "seed gradient {:?} does not match node {:?}",
                    g.dim(),
                    self.value(v).dim()
                )));
            }
            accumulate(&mut grads[v.0], g);
        }
        let mut out = Gradients::empty(self.store.len());
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => out.add(*id, &g),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::AddBias(x, b) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[b.0], db);
                    accumulate(&mut grads[x.0], g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.value(*b);
                    let db = &g * &self.value(*a);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Scale(x, c) => accumulate(&mut grads[x.0], g.mapv(|v| v * c)),
                Op::Tanh(x) => {
                    let y = self.value(Var(i));
                    let mut d = g;
                    d.zip_mut_with(&y, |gv, &yv| *gv *= 1.0 - yv * yv);
                    accumulate(&mut grads[x.0], d);
                }
                Op::NeighborSum(x, edges) => {
                    let mut d = Array2::zeros(g.raw_dim());
                    for &(src, dst) in edges.iter() {
                        let mut row = d.row_mut(src as usize);
                        row += &g.row(dst as usize);
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::GatherRows(x, rows) => {
                    let mut d = Array2::zeros(self.value(*x).raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut row = d.row_mut(r);
                        row += &g.row(k);
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::Assemble(parts) => {
                    for (v, rows) in parts {
                        let d = g.select(Axis(0), rows);
                        accumulate(&mut grads[v.0], d);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let na = self.value(*a).ncols();
                    accumulate(&mut grads[a.0], g.slice(s![.., ..na]).to_owned());
                    accumulate(&mut grads[b.0], g.slice(s![.., na..]).to_owned());
                }
                Op::Sum(x) => {
                    let gv = g[[0, 0]];
                    let d = Array2::from_elem(self.value(*x).raw_dim(), gv);
                    accumulate(&mut grads[x.0], d);
                }
            }
        }
        Ok(out)
    }

    fn check(&self, v: Var) -> Result<(), NetError> {
        if v.0 >= self.nodes.len() {
            return Err(NetError::State(format!("variable {} not recorded on this tape", v.0)));
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}
