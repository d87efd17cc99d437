//! Agent designs: a rooted joint tree with per-joint attribute vectors.
//!
//! A [`DesignGraph`] is an immutable value. Skeleton and attribute
//! transforms return a fresh graph, so designs can be shared freely between
//! rollout workers behind an `Arc`.
//!
//! Joints are stored in breadth-first order (root first, children in
//! insertion order). Every joint carries a cached [`IndexString`] encoding
//! its path from the root; the JSMLP weight memory is keyed by that path.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::Rng;
use thiserror::Error;

/// Number of attribute components per joint for the planar environments.
pub const ATTR_DIM: usize = 4;

/// Default cap on the number of joints in a design.
pub const DEFAULT_MAX_JOINTS: usize = 20;

pub type JointId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("unknown joint id {0}")]
    UnknownJoint(JointId),
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("index digit {digit} exceeds max children {max_children}")]
    InvalidIndex { digit: u8, max_children: usize },
    #[error("non-finite attribute delta at joint {0}")]
    NonFiniteDelta(JointId),
    #[error("design violates constraint: {0}")]
    Constraint(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

/// Normalized joint attributes. Every component lives in `[-1, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AttrVector {
    pub bone_dir_x: f64,
    pub bone_dir_z: f64,
    pub bone_size: f64,
    pub motor_gear: f64,
}

impl AttrVector {
    pub const fn new(bone_dir_x: f64, bone_dir_z: f64, bone_size: f64, motor_gear: f64) -> Self {
        Self {
            bone_dir_x,
            bone_dir_z,
            bone_size,
            motor_gear,
        }
    }

    pub fn to_array(self) -> [f64; ATTR_DIM] {
        [self.bone_dir_x, self.bone_dir_z, self.bone_size, self.motor_gear]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn clamped(self) -> Self {
        let a = self.to_array().map(|v| v.clamp(-1.0, 1.0));
        Self::from_slice(&a)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        )
    }
}

/// Path-from-root joint index.
///
/// Digits are stored in rendered order: the digit for the deepest step is
/// leftmost. Going to the `i`-th child (1-based) prepends `i`. The root has
/// no digits and renders as `"0"`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IndexString {
    digits: Vec<u8>,
}

impl IndexString {
    pub fn root() -> Self {
        Self::default()
    }

    pub fn is_root(&self) -> bool {
        self.digits.is_empty()
    }

    pub fn digits(&self) -> &[u8] {
        &self.digits
    }

    /// Index of the `ordinal`-th child (1-based) of the joint with this index.
    pub fn child(&self, ordinal: u8) -> Self {
        let mut digits = Vec::with_capacity(self.digits.len() + 1);
        digits.push(ordinal);
        digits.extend_from_slice(&self.digits);
        Self { digits }
    }

    pub fn parse(s: &str) -> Result<Self, DesignError> {
        if s == "0" {
            return Ok(Self::root());
        }
        let mut digits = Vec::with_capacity(s.len());
        for (i, c) in s.chars().enumerate() {
            match c.to_digit(10) {
                Some(d) if d >= 1 => digits.push(d as u8),
                _ => {
                    return Err(DesignError::Parse {
                        line: 1,
                        column: i + 1,
                        message: format!("invalid index digit {c:?}"),
                    })
                }
            }
        }
        if digits.is_empty() {
            return Err(DesignError::Parse {
                line: 1,
                column: 1,
                message: "empty index string".into(),
            });
        }
        Ok(Self { digits })
    }

    /// Positional value of the rendered string in base `n_children_max + 1`.
    pub fn to_int(&self, n_children_max: usize) -> Result<u64, DesignError> {
        let base = n_children_max as u64 + 1;
        let mut acc: u64 = 0;
        for &d in &self.digits {
            if d as usize > n_children_max || d == 0 {
                return Err(DesignError::InvalidIndex {
                    digit: d,
                    max_children: n_children_max,
                });
            }
            acc = acc
                .checked_mul(base)
                .and_then(|a| a.checked_add(d as u64))
                .ok_or_else(|| DesignError::Constraint("index integer overflow".into()))?;
        }
        Ok(acc)
    }
}

impl fmt::Display for IndexString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.digits.is_empty() {
            return f.write_str("0");
        }
        for d in &self.digits {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

/// Free-function form of [`IndexString::to_int`].
pub fn index_to_int(idx: &IndexString, n_children_max: usize) -> Result<u64, DesignError> {
    idx.to_int(n_children_max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointNode {
    pub id: JointId,
    pub parent: Option<JointId>,
    pub attr: AttrVector,
    pub children: Vec<JointId>,
    pub index: IndexString,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SkeletonAction {
    AddJoint = 0,
    DelJoint = 1,
    NoChange = 2,
}

impl SkeletonAction {
    pub const ALL: [SkeletonAction; 3] = [Self::AddJoint, Self::DelJoint, Self::NoChange];

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A rooted joint tree `(V, E)` plus joint attributes `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignGraph {
    joints: Vec<JointNode>,
    max_children: usize,
    max_joints: usize,
    next_id: JointId,
}

impl DesignGraph {
    /// A single root joint.
    pub fn new_root(attr: AttrVector, max_children: usize, max_joints: usize) -> Self {
        let root = JointNode {
            id: 0,
            parent: None,
            attr,
            children: Vec::new(),
            index: IndexString::root(),
        };
        Self {
            joints: vec![root],
            max_children,
            max_joints: max_joints.max(1),
            next_id: 1,
        }
    }

    /// A chain `root -> j1 -> j2 ...` with one attribute vector per joint.
    pub fn chain(attrs: &[AttrVector], max_children: usize, max_joints: usize) -> Self {
        assert!(!attrs.is_empty(), "a chain needs at least one joint");
        let mut g = Self::new_root(attrs[0], max_children, max_joints);
        let mut last = g.root_id();
        for a in &attrs[1..] {
            last = g.push_child(last, *a);
        }
        g.rebuild();
        g
    }

    /// Build a design from `(parent, attr)` pairs; entry 0 is the root and
    /// every parent must refer to an earlier entry. Children are ordered by
    /// appearance.
    pub fn from_parents(
        spec: &[(Option<usize>, AttrVector)],
        max_children: usize,
        max_joints: usize,
    ) -> Result<Self, DesignError> {
        let (first, rest) = spec
            .split_first()
            .ok_or_else(|| DesignError::Constraint("empty design".into()))?;
        if first.0.is_some() {
            return Err(DesignError::Constraint("first entry must be the root".into()));
        }
        let mut g = Self::new_root(first.1, max_children, max_joints);
        let mut ids = vec![g.root_id()];
        for (i, (parent, attr)) in rest.iter().enumerate() {
            let p = parent
                .filter(|&p| p <= i)
                .ok_or_else(|| DesignError::Constraint(format!("entry {} has invalid parent", i + 1)))?;
            ids.push(g.push_child(ids[p], *attr));
        }
        g.rebuild();
        g.validate()?;
        Ok(g)
    }

    pub fn root_id(&self) -> JointId {
        self.joints[0].id
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn max_children(&self) -> usize {
        self.max_children
    }

    pub fn max_joints(&self) -> usize {
        self.max_joints
    }

    /// Joints in breadth-first order.
    pub fn joints(&self) -> &[JointNode] {
        &self.joints
    }

    pub fn joint_ids(&self) -> Vec<JointId> {
        self.joints.iter().map(|j| j.id).collect()
    }

    pub fn position(&self, id: JointId) -> Option<usize> {
        self.joints.iter().position(|j| j.id == id)
    }

    pub fn joint(&self, id: JointId) -> Result<&JointNode, DesignError> {
        self.joints
            .iter()
            .find(|j| j.id == id)
            .ok_or(DesignError::UnknownJoint(id))
    }

    /// Parent→child pairs.
    pub fn edges(&self) -> impl Iterator<Item = (JointId, JointId)> + '_ {
        self.joints
            .iter()
            .flat_map(|j| j.children.iter().map(move |&c| (j.id, c)))
    }

    /// Parent position (in BFS order) for every joint; `None` for the root.
    pub fn parent_positions(&self) -> Vec<Option<usize>> {
        self.joints
            .iter()
            .map(|j| j.parent.map(|p| self.position(p).expect("parent exists")))
            .collect()
    }

    pub fn attrs(&self) -> Vec<AttrVector> {
        self.joints.iter().map(|j| j.attr).collect()
    }

    pub fn compute_index(&self, id: JointId) -> Result<IndexString, DesignError> {
        let mut idx = IndexString::root();
        let mut path = Vec::new();
        let mut cur = self.joint(id)?;
        while let Some(p) = cur.parent {
            let parent = self.joint(p)?;
            let ordinal = parent
                .children
                .iter()
                .position(|&c| c == cur.id)
                .expect("child listed under its parent");
            path.push(ordinal as u8 + 1);
            cur = parent;
        }
        // walk root -> joint, prepending each ordinal
        for &o in path.iter().rev() {
            idx = idx.child(o);
        }
        Ok(idx)
    }

    /// Index integers (base `N_C + 1`) in BFS order.
    pub fn index_ints(&self) -> Vec<u64> {
        self.joints
            .iter()
            .map(|j| j.index.to_int(self.max_children).expect("digits bounded by N_C"))
            .collect()
    }

    pub fn apply_skeleton_actions(&self, actions: &[SkeletonAction]) -> Result<Self, DesignError> {
        if actions.len() != self.joints.len() {
            return Err(DesignError::ActionCount {
                expected: self.joints.len(),
                got: actions.len(),
            });
        }
        let mut next = self.clone();
        let mut count = self.joints.len();
        for (joint, action) in self.joints.iter().zip(actions) {
            match action {
                SkeletonAction::AddJoint => {
                    if joint.children.len() < self.max_children && count < self.max_joints {
                        next.push_child(joint.id, joint.attr);
                        count += 1;
                    }
                }
                SkeletonAction::DelJoint => {
                    if let Some(parent) = joint.parent {
                        if joint.children.is_empty() {
                            next.remove_leaf(parent, joint.id);
                            count -= 1;
                        }
                    }
                }
                SkeletonAction::NoChange => {}
            }
        }
        next.rebuild();
        Ok(next)
    }

    /// `z <- clamp(z + a, -1, 1)` for every joint; deltas are in BFS order.
    pub fn apply_attribute_actions(&self, deltas: &[AttrVector]) -> Result<Self, DesignError> {
        if deltas.len() != self.joints.len() {
            return Err(DesignError::ActionCount {
                expected: self.joints.len(),
                got: deltas.len(),
            });
        }
        let mut next = self.clone();
        for (joint, delta) in next.joints.iter_mut().zip(deltas) {
            if !delta.is_finite() {
                return Err(DesignError::NonFiniteDelta(joint.id));
            }
            let z = joint.attr.to_array();
            let d = delta.to_array();
            let sum: Vec<f64> = z.iter().zip(d.iter()).map(|(a, b)| a + b).collect();
            joint.attr = AttrVector::from_slice(&sum).clamped();
        }
        Ok(next)
    }

    /// Replace the attributes of every joint (BFS order), clamped to `[-1, 1]`.
    pub fn with_attrs(&self, attrs: &[AttrVector]) -> Result<Self, DesignError> {
        if attrs.len() != self.joints.len() {
            return Err(DesignError::ActionCount {
                expected: self.joints.len(),
                got: attrs.len(),
            });
        }
        let mut next = self.clone();
        for (j, a) in next.joints.iter_mut().zip(attrs) {
            j.attr = a.clamped();
        }
        Ok(next)
    }

    /// Add a child to `parent` if the constraints allow it.
    pub fn try_add_child(&self, parent: JointId) -> Result<Option<Self>, DesignError> {
        let p = self.joint(parent)?;
        if p.children.len() >= self.max_children || self.joints.len() >= self.max_joints {
            return Ok(None);
        }
        let mut next = self.clone();
        next.push_child(parent, p.attr);
        next.rebuild();
        Ok(Some(next))
    }

    /// Remove a childless non-root joint.
    pub fn try_remove_leaf(&self, id: JointId) -> Result<Option<Self>, DesignError> {
        let j = self.joint(id)?;
        match j.parent {
            Some(parent) if j.children.is_empty() => {
                let mut next = self.clone();
                next.remove_leaf(parent, id);
                next.rebuild();
                Ok(Some(next))
            }
            _ => Ok(None),
        }
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<(), DesignError> {
        let bad = |m: String| Err(DesignError::Constraint(m));
        if self.joints.is_empty() {
            return bad("design has no joints".into());
        }
        if self.joints.len() > self.max_joints {
            return bad(format!("{} joints exceeds max {}", self.joints.len(), self.max_joints));
        }
        let roots = self.joints.iter().filter(|j| j.parent.is_none()).count();
        if roots != 1 || self.joints[0].parent.is_some() {
            return bad("design must have exactly one root stored first".into());
        }
        let mut seen = BTreeSet::new();
        for j in &self.joints {
            if !seen.insert(j.id) {
                return bad(format!("duplicate joint id {}", j.id));
            }
            if j.children.len() > self.max_children {
                return bad(format!("joint {} has {} children", j.id, j.children.len()));
            }
            if !j.attr.is_finite() || j.attr.to_array().iter().any(|v| v.abs() > 1.0) {
                return bad(format!("joint {} attribute out of range", j.id));
            }
            if let Some(p) = j.parent {
                let parent = self.joint(p)?;
                if parent.children.iter().filter(|&&c| c == j.id).count() != 1 {
                    return bad(format!("joint {} not listed once under parent {p}", j.id));
                }
            }
            for &c in &j.children {
                if self.joint(c)?.parent != Some(j.id) {
                    return bad(format!("child {c} does not point back to {}", j.id));
                }
            }
        }
        // reachability from the root rules out cycles among non-root joints
        let mut reached = 0;
        let mut queue = VecDeque::from([self.root_id()]);
        let mut visited = BTreeSet::new();
        while let Some(id) = queue.pop_front() {
            if !visited.insert(id) {
                return bad("cycle detected".into());
            }
            reached += 1;
            queue.extend(self.joint(id)?.children.iter().copied());
        }
        if reached != self.joints.len() {
            return bad("unreachable joints".into());
        }
        let mut indices = BTreeSet::new();
        for j in &self.joints {
            if j.index != self.compute_index(j.id)? {
                return bad(format!("stale index at joint {}", j.id));
            }
            if !indices.insert(j.index.clone()) {
                return bad(format!("duplicate index {}", j.index));
            }
        }
        Ok(())
    }

    /// Structural equality ignoring joint ids: same shape, child order and
    /// attributes.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.joints.len() == other.joints.len()
            && self.parent_positions() == other.parent_positions()
            && self
                .joints
                .iter()
                .zip(&other.joints)
                .all(|(a, b)| a.index == b.index && a.attr == b.attr)
    }

    /// Same tree shape and child order; attributes may differ.
    pub fn same_skeleton(&self, other: &Self) -> bool {
        self.joints.len() == other.joints.len()
            && self.parent_positions() == other.parent_positions()
            && self.joints.iter().zip(&other.joints).all(|(a, b)| a.index == b.index)
    }

    fn push_child(&mut self, parent: JointId, attr: AttrVector) -> JointId {
        let id = self.next_id;
        self.next_id += 1;
        let pos = self.position(parent).expect("parent exists");
        self.joints[pos].children.push(id);
        self.joints.push(JointNode {
            id,
            parent: Some(parent),
            attr,
            children: Vec::new(),
            index: IndexString::root(),
        });
        id
    }

    fn remove_leaf(&mut self, parent: JointId, id: JointId) {
        if let Some(pos) = self.position(parent) {
            self.joints[pos].children.retain(|&c| c != id);
        }
        self.joints.retain(|j| j.id != id);
    }

    /// Restore BFS storage order and recompute cached index strings.
    fn rebuild(&mut self) {
        let mut by_id: BTreeMap<JointId, JointNode> =
            self.joints.drain(..).map(|j| (j.id, j)).collect();
        let root_id = by_id
            .values()
            .find(|j| j.parent.is_none())
            .map(|j| j.id)
            .expect("root present");
        let mut order = Vec::with_capacity(by_id.len());
        let mut queue = VecDeque::from([(root_id, IndexString::root())]);
        while let Some((id, index)) = queue.pop_front() {
            let mut node = by_id.remove(&id).expect("joint reachable once");
            for (i, &c) in node.children.iter().enumerate() {
                queue.push_back((c, index.child(i as u8 + 1)));
            }
            node.index = index;
            order.push(node);
        }
        self.joints = order;
    }

    /// Serialize to the line-oriented design-file format.
    pub fn serialize(&self) -> String {
        let mut out = format!("designfile v1 nc={}\n", self.max_children);
        for j in &self.joints {
            let parent = j.parent.map_or_else(|| "none".to_string(), |p| p.to_string());
            let a = j.attr.to_array();
            out.push_str(&format!(
                "joint {} parent={} attr={:?},{:?},{:?},{:?}\n",
                j.id, parent, a[0], a[1], a[2], a[3]
            ));
        }
        out
    }

    pub fn deserialize(text: &str) -> Result<Self, DesignError> {
        Self::deserialize_with_max_joints(text, DEFAULT_MAX_JOINTS)
    }

    pub fn deserialize_with_max_joints(text: &str, max_joints: usize) -> Result<Self, DesignError> {
        let err = |line: usize, column: usize, message: String| DesignError::Parse {
            line,
            column,
            message,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (hline, header) = lines.next().ok_or_else(|| err(1, 1, "empty design file".into()))?;
        let mut htoks = header.split_whitespace();
        if htoks.next() != Some("designfile") || htoks.next() != Some("v1") {
            return Err(err(hline, 1, "expected header `designfile v1 nc=<N_C>`".into()));
        }
        let nc_tok = htoks
            .next()
            .ok_or_else(|| err(hline, header.len() + 1, "missing nc=<N_C>".into()))?;
        let nc_col = column_of(header, nc_tok);
        let max_children: usize = nc_tok
            .strip_prefix("nc=")
            .and_then(|v| v.parse().ok())
            .filter(|&v: &usize| (1..=9).contains(&v))
            .ok_or_else(|| err(hline, nc_col, format!("invalid max-children field {nc_tok:?}")))?;

        let mut joints: Vec<JointNode> = Vec::new();
        let mut pos_of: BTreeMap<JointId, usize> = BTreeMap::new();
        for (lno, line) in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 4 || toks[0] != "joint" {
                return Err(err(lno, 1, "expected `joint <id> parent=<id|none> attr=<f,f,f,f>`".into()));
            }
            let id: JointId = toks[1]
                .parse()
                .map_err(|_| err(lno, column_of(line, toks[1]), format!("invalid joint id {:?}", toks[1])))?;
            if pos_of.contains_key(&id) {
                return Err(err(lno, column_of(line, toks[1]), format!("duplicate joint id {id}")));
            }
            let pcol = column_of(line, toks[2]);
            let ptxt = toks[2]
                .strip_prefix("parent=")
                .ok_or_else(|| err(lno, pcol, "expected parent=<id|none>".into()))?;
            let parent = if ptxt == "none" {
                None
            } else {
                let p: JointId = ptxt
                    .parse()
                    .map_err(|_| err(lno, pcol + 7, format!("invalid parent id {ptxt:?}")))?;
                if !pos_of.contains_key(&p) {
                    return Err(err(lno, pcol + 7, format!("parent {p} not declared before joint {id}")));
                }
                Some(p)
            };
            if parent.is_none() && !joints.is_empty() {
                return Err(err(lno, pcol, "only the first joint may be the root".into()));
            }
            if parent.is_some() && joints.is_empty() {
                return Err(err(lno, pcol, "first joint must be the root (parent=none)".into()));
            }
            let acol = column_of(line, toks[3]);
            let atxt = toks[3]
                .strip_prefix("attr=")
                .ok_or_else(|| err(lno, acol, "expected attr=<f,f,f,f>".into()))?;
            let vals: Vec<f64> = atxt
                .split(',')
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| err(lno, acol + 5, format!("invalid attribute list {atxt:?}")))?;
            if vals.len() != ATTR_DIM || vals.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
                return Err(err(lno, acol + 5, format!("expected {ATTR_DIM} finite values in [-1, 1]")));
            }
            if let Some(p) = parent {
                let pp = pos_of[&p];
                joints[pp].children.push(id);
            }
            pos_of.insert(id, joints.len());
            joints.push(JointNode {
                id,
                parent,
                attr: AttrVector::from_slice(&vals),
                children: Vec::new(),
                index: IndexString::root(),
            });
        }
        if joints.is_empty() {
            return Err(err(hline + 1, 1, "design file declares no joints".into()));
        }
        let next_id = joints.iter().map(|j| j.id).max().unwrap_or(0) + 1;
        let mut g = Self {
            joints,
            max_children,
            max_joints,
            next_id,
        };
        g.rebuild();
        g.validate()?;
        Ok(g)
    }

    /// Random tree with `n_joints` joints (clipped to the caps) and uniform
    /// attributes. Each new joint attaches to a uniformly chosen joint with
    /// spare child capacity.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_joints: usize,
        max_children: usize,
        max_joints: usize,
    ) -> Self {
        let mut g = Self::new_root(AttrVector::random(rng), max_children, max_joints);
        let target = n_joints.clamp(1, max_joints);
        while g.joints.len() < target {
            let open: Vec<JointId> = g
                .joints
                .iter()
                .filter(|j| j.children.len() < max_children)
                .map(|j| j.id)
                .collect();
            let parent = open[rng.random_range(0..open.len())];
            g.push_child(parent, AttrVector::random(rng));
        }
        g.rebuild();
        g
    }
}

fn column_of(line: &str, token: &str) -> usize {
    // tokens are subslices of `line`
    let offset = token.as_ptr() as usize - line.as_ptr() as usize;
    offset + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attr(v: f64) -> AttrVector {
        AttrVector::new(v, v, v, v)
    }

    fn chain3() -> DesignGraph {
        DesignGraph::chain(&[attr(0.1), attr(0.2), attr(0.3)], 3, 20)
    }

    fn star3() -> DesignGraph {
        let spec = [(None, attr(0.0)), (Some(0), attr(0.1)), (Some(0), attr(0.2)), (Some(0), attr(0.3))];
        DesignGraph::from_parents(&spec, 3, 20).unwrap()
    }

    #[test]
    fn add_joint_on_root_inherits_attr() {
        let g = DesignGraph::new_root(AttrVector::new(0.3, -0.2, 0.5, 0.1), 3, 20);
        let next = g.apply_skeleton_actions(&[SkeletonAction::AddJoint]).unwrap();
        assert_eq!(next.len(), 2);
        assert_eq!(next.joints()[1].attr, g.joints()[0].attr);
        assert_eq!(next.joints()[1].parent, Some(next.root_id()));
        next.validate().unwrap();
    }

    #[test]
    fn all_no_change_is_identity() {
        let g = chain3();
        let next = g.apply_skeleton_actions(&[SkeletonAction::NoChange; 3]).unwrap();
        assert_eq!(next, g);
    }

    #[test]
    fn delete_with_children_is_ignored() {
        let g = chain3();
        let acts = [SkeletonAction::NoChange, SkeletonAction::DelJoint, SkeletonAction::NoChange];
        assert_eq!(g.apply_skeleton_actions(&acts).unwrap(), g);
    }

    #[test]
    fn root_cannot_be_deleted() {
        let g = DesignGraph::new_root(attr(0.0), 3, 20);
        assert_eq!(g.apply_skeleton_actions(&[SkeletonAction::DelJoint]).unwrap(), g);
    }

    #[test]
    fn add_at_full_parent_is_ignored() {
        let g = star3();
        let mut acts = vec![SkeletonAction::NoChange; 4];
        acts[0] = SkeletonAction::AddJoint;
        assert_eq!(g.apply_skeleton_actions(&acts).unwrap(), g);
    }

    #[test]
    fn star_children_all_add() {
        let g = star3();
        let acts = [
            SkeletonAction::NoChange,
            SkeletonAction::AddJoint,
            SkeletonAction::AddJoint,
            SkeletonAction::AddJoint,
        ];
        let next = g.apply_skeleton_actions(&acts).unwrap();
        assert_eq!(next.len(), 7);
        next.validate().unwrap();
        // grandchildren are BFS positions 4..7, each inheriting its parent's attr
        for (k, v) in [0.1, 0.2, 0.3].iter().enumerate() {
            assert_eq!(next.joints()[4 + k].attr, attr(*v));
            assert_eq!(next.joints()[4 + k].index.to_string(), "1".to_string() + &(k + 1).to_string());
        }
    }

    #[test]
    fn max_joints_caps_growth() {
        let g = DesignGraph::chain(&[attr(0.0), attr(0.0)], 3, 3);
        let next = g.apply_skeleton_actions(&[SkeletonAction::AddJoint; 2]).unwrap();
        assert_eq!(next.len(), 3);
    }

    #[test]
    fn action_count_mismatch_is_an_error() {
        let g = chain3();
        assert!(matches!(
            g.apply_skeleton_actions(&[SkeletonAction::NoChange]),
            Err(DesignError::ActionCount { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn attribute_update_adds_and_clamps() {
        let g = DesignGraph::new_root(AttrVector::new(0.5, 0.9, 0.0, -0.95), 3, 20);
        let next = g
            .apply_attribute_actions(&[AttrVector::new(0.2, 0.5, 0.0, -0.2)])
            .unwrap();
        let a = next.joints()[0].attr;
        assert!((a.bone_dir_x - 0.7).abs() < 1e-15);
        assert_eq!(a.bone_dir_z, 1.0);
        assert_eq!(a.bone_size, 0.0);
        assert_eq!(a.motor_gear, -1.0);
        let same = g.apply_attribute_actions(&[AttrVector::new(0.0, 0.0, 0.0, 0.0)]).unwrap();
        assert_eq!(same, g);
    }

    #[test]
    fn non_finite_delta_rejected() {
        let g = DesignGraph::new_root(attr(0.0), 3, 20);
        let r = g.apply_attribute_actions(&[AttrVector::new(f64::NAN, 0.0, 0.0, 0.0)]);
        assert!(matches!(r, Err(DesignError::NonFiniteDelta(_))));
    }

    #[test]
    fn index_strings() {
        let g = chain3();
        let ids = g.joint_ids();
        assert_eq!(g.compute_index(ids[0]).unwrap().to_string(), "0");
        assert_eq!(g.compute_index(ids[1]).unwrap().to_string(), "1");
        assert_eq!(g.compute_index(ids[2]).unwrap().to_string(), "11");
        assert!(matches!(g.compute_index(999), Err(DesignError::UnknownJoint(999))));
    }

    #[test]
    fn index_integers() {
        assert_eq!(IndexString::parse("31").unwrap().to_int(3).unwrap(), 13);
        assert_eq!(IndexString::parse("0").unwrap().to_int(3).unwrap(), 0);
        assert_eq!(IndexString::parse("211").unwrap().to_int(3).unwrap(), 37);
        assert!(matches!(
            IndexString::parse("41").unwrap().to_int(3),
            Err(DesignError::InvalidIndex { digit: 4, .. })
        ));
    }

    #[test]
    fn round_trip_text() {
        let spec = [
            (None, AttrVector::new(0.1, -0.3333333333333333, 1.0, -1.0)),
            (Some(0), AttrVector::new(0.7, 0.2, 0.0, 1e-17)),
            (Some(0), attr(0.5)),
            (Some(1), attr(-0.25)),
        ];
        let g = DesignGraph::from_parents(&spec, 3, 20).unwrap();
        let text = g.serialize();
        assert!(text.starts_with("designfile v1 nc=3\n"));
        assert_eq!(DesignGraph::deserialize(&text).unwrap(), g);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(DesignGraph::deserialize(""), Err(DesignError::Parse { line: 1, .. })));
        let dup = "designfile v1 nc=3\njoint 0 parent=none attr=0,0,0,0\njoint 0 parent=0 attr=0,0,0,0\n";
        match DesignGraph::deserialize(dup) {
            Err(DesignError::Parse { line, column, message }) => {
                assert_eq!(line, 3);
                assert_eq!(column, 7);
                assert!(message.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad_attr = "designfile v1 nc=3\njoint 0 parent=none attr=0,0,zero,0\n";
        assert!(matches!(
            DesignGraph::deserialize(bad_attr),
            Err(DesignError::Parse { line: 2, column: 26, .. })
        ));
        let too_many_children = "designfile v1 nc=1\njoint 0 parent=none attr=0,0,0,0\njoint 1 parent=0 attr=0,0,0,0\njoint 2 parent=0 attr=0,0,0,0\n";
        assert!(DesignGraph::deserialize(too_many_children).is_err());
    }

    #[test]
    fn random_designs_respect_constraints() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n in 1..30 {
            let g = DesignGraph::random(&mut rng, n, 3, 20);
            g.validate().unwrap();
            assert_eq!(g.len(), n.min(20));
        }
    }
}
