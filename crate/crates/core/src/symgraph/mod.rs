//! Symbolic expression-graph engine.
//!
//! An [`ExprGraph`] is an append-only, hash-consed DAG of scalar operations
//! over variable and parameter slots. Graphs are built once, then evaluated
//! through compiled instruction tapes ([`EvalPlan`]) and differentiated in
//! reverse mode ([`jacobian`]). Every Jacobian entry is itself a node in the
//! same graph, so derivative values stay traceable to model structure.

mod autodiff;
mod dump;
mod eval;

pub use autodiff::{jacobian, JacEntry, SparseJacobian};
pub use dump::parse_graph;
pub use eval::{EvalPlan, EvalScratch};

use std::collections::HashMap;

use crate::error::CoreError;

/// Index of a node inside one [`ExprGraph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl NodeId {
    const NONE: NodeId = NodeId(u32::MAX);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Scalar operation carried by a node.
///
/// `StepLe` is not part of the user-facing builder API; it exists so that
/// `Min`/`Max` have an exact subgradient representation (see [`jacobian`]).
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Op {
    Const(f64),
    Param(u16),
    Var(u16),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Tan,
    ArcTan,
    ArcTan2,
    Tanh,
    Exp,
    Sqrt,
    Pow(f64),
    Min,
    Max,
    /// 1.0 if left <= right else 0.0.
    StepLe,
}

impl Op {
    pub fn arity(self) -> usize {
        match self {
            Op::Const(_) | Op::Param(_) | Op::Var(_) => 0,
            Op::Neg
            | Op::Sin
            | Op::Cos
            | Op::Tan
            | Op::ArcTan
            | Op::Tanh
            | Op::Exp
            | Op::Sqrt
            | Op::Pow(_) => 1,
            Op::Add
            | Op::Sub
            | Op::Mul
            | Op::Div
            | Op::ArcTan2
            | Op::Min
            | Op::Max
            | Op::StepLe => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Op::Const(_) => "const",
            Op::Param(_) => "param",
            Op::Var(_) => "var",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Tan => "tan",
            Op::ArcTan => "atan",
            Op::ArcTan2 => "atan2",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Sqrt => "sqrt",
            Op::Pow(_) => "pow",
            Op::Min => "min",
            Op::Max => "max",
            Op::StepLe => "step_le",
        }
    }

    /// Hashable structural key (payload folded to bits).
    fn key(self) -> (u8, u64) {
        match self {
            Op::Const(v) => (0, v.to_bits()),
            Op::Param(s) => (1, s as u64),
            Op::Var(s) => (2, s as u64),
            Op::Add => (3, 0),
            Op::Sub => (4, 0),
            Op::Mul => (5, 0),
            Op::Div => (6, 0),
            Op::Neg => (7, 0),
            Op::Sin => (8, 0),
            Op::Cos => (9, 0),
            Op::Tan => (10, 0),
            Op::ArcTan => (11, 0),
            Op::ArcTan2 => (12, 0),
            Op::Tanh => (13, 0),
            Op::Exp => (14, 0),
            Op::Sqrt => (15, 0),
            Op::Pow(e) => (16, e.to_bits()),
            Op::Min => (17, 0),
            Op::Max => (18, 0),
            Op::StepLe => (19, 0),
        }
    }
}

/// One node of the DAG. Children always have smaller ids than the node
/// itself, so the `nodes` vector is a topological order by construction.
#[derive(Clone, Copy, Debug)]
pub struct Node {
    pub op: Op,
    a: NodeId,
    b: NodeId,
}

impl Node {
    pub fn children(&self) -> impl Iterator<Item = NodeId> {
        let arity = self.op.arity();
        [self.a, self.b].into_iter().take(arity)
    }

    pub fn child(&self, i: usize) -> NodeId {
        match i {
            0 => self.a,
            1 => self.b,
            _ => panic!("child index {i} out of range"),
        }
    }
}

/// Per-op node counts plus size and depth of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphStats {
    pub node_count: usize,
    pub op_histogram: std::collections::BTreeMap<&'static str, usize>,
    pub depth: usize,
}

/// Hash-consed expression DAG with designated output nodes.
#[derive(Clone, Default)]
pub struct ExprGraph {
    nodes: Vec<Node>,
    cse: HashMap<(u8, u64, u32, u32), NodeId>,
    outputs: Vec<NodeId>,
    n_vars: usize,
    n_params: usize,
}

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn set_outputs(&mut self, outputs: &[NodeId]) {
        for &o in outputs {
            assert!(o.index() < self.nodes.len(), "output {o} out of range");
        }
        self.outputs = outputs.to_vec();
    }

    /// Insert a node, deduplicating structurally identical ones and folding
    /// literal-only subtrees. Stores exactly what was requested otherwise:
    /// `x + 0` stays an `Add` node.
    pub fn push(&mut self, op: Op, children: &[NodeId]) -> Result<NodeId, CoreError> {
        if children.len() != op.arity() {
            return Err(CoreError::Graph(format!(
                "op {} expects {} children, got {}",
                op.name(),
                op.arity(),
                children.len()
            )));
        }
        for &c in children {
            if c.index() >= self.nodes.len() {
                return Err(CoreError::Graph(format!(
                    "child id {c} out of range (graph has {} nodes)",
                    self.nodes.len()
                )));
            }
        }
        let a = children.first().copied().unwrap_or(NodeId::NONE);
        let b = children.get(1).copied().unwrap_or(NodeId::NONE);

        // Constant folding: only when every child is a literal and the value
        // is well-defined.
        if op.arity() > 0 && children.iter().all(|&c| self.constant_value(c).is_some()) {
            let ca = self.constant_value(a).unwrap_or(0.0);
            let cb = children
                .get(1)
                .and_then(|&c| self.constant_value(c))
                .unwrap_or(0.0);
            if let Some(v) = fold_constants(op, ca, cb) {
                return Ok(self.intern(Op::Const(v), NodeId::NONE, NodeId::NONE));
            }
        }

        if let Op::Var(slot) = op {
            self.n_vars = self.n_vars.max(slot as usize + 1);
        }
        if let Op::Param(slot) = op {
            self.n_params = self.n_params.max(slot as usize + 1);
        }
        Ok(self.intern(op, a, b))
    }

    fn intern(&mut self, op: Op, a: NodeId, b: NodeId) -> NodeId {
        let (tag, payload) = op.key();
        let key = (tag, payload, a.0, b.0);
        if let Some(&id) = self.cse.get(&key) {
            return id;
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, a, b });
        self.cse.insert(key, id);
        id
    }

    pub fn constant_value(&self, id: NodeId) -> Option<f64> {
        match self.nodes[id.index()].op {
            Op::Const(v) => Some(v),
            _ => None,
        }
    }

    // Builder conveniences. All go through `push`.

    pub fn var(&mut self, slot: usize) -> NodeId {
        self.push(Op::Var(slot as u16), &[]).expect("leaf")
    }

    pub fn param(&mut self, slot: usize) -> NodeId {
        self.push(Op::Param(slot as u16), &[]).expect("leaf")
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        self.push(Op::Const(v), &[]).expect("leaf")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, &[a, b]).expect("arity")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, &[a, b]).expect("arity")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, &[a, b]).expect("arity")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div, &[a, b]).expect("arity")
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg, &[a]).expect("arity")
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sin, &[a]).expect("arity")
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Cos, &[a]).expect("arity")
    }

    pub fn tan(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tan, &[a]).expect("arity")
    }

    pub fn atan(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ArcTan, &[a]).expect("arity")
    }

    pub fn atan2(&mut self, y: NodeId, x: NodeId) -> NodeId {
        self.push(Op::ArcTan2, &[y, x]).expect("arity")
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh, &[a]).expect("arity")
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp, &[a]).expect("arity")
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt, &[a]).expect("arity")
    }

    pub fn powc(&mut self, a: NodeId, exponent: f64) -> NodeId {
        self.push(Op::Pow(exponent), &[a]).expect("arity")
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Min, &[a, b]).expect("arity")
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Max, &[a, b]).expect("arity")
    }

    /// Copy `src` into `self`, substituting every `Var(slot)` with
    /// `var_sub[slot]` and every `Param(slot)` with `param_sub[slot]`
    /// (arbitrary existing nodes of `self`). Returns the mapped output ids
    /// of `src`. Shared structure is deduplicated on insertion.
    pub fn splice(
        &mut self,
        src: &ExprGraph,
        var_sub: &[NodeId],
        param_sub: &[NodeId],
    ) -> Result<Vec<NodeId>, CoreError> {
        if var_sub.len() < src.n_vars {
            return Err(CoreError::Graph(format!(
                "splice: source uses {} variable slots, {} substitutions given",
                src.n_vars,
                var_sub.len()
            )));
        }
        if param_sub.len() < src.n_params {
            return Err(CoreError::Graph(format!(
                "splice: source uses {} parameter slots, {} substitutions given",
                src.n_params,
                param_sub.len()
            )));
        }
        let mut map = vec![NodeId::NONE; src.nodes.len()];
        for (i, node) in src.nodes.iter().enumerate() {
            let mapped = match node.op {
                Op::Var(slot) => var_sub[slot as usize],
                Op::Param(slot) => param_sub[slot as usize],
                op => {
                    let a = if op.arity() >= 1 { map[node.a.index()] } else { NodeId::NONE };
                    let b = if op.arity() >= 2 { map[node.b.index()] } else { NodeId::NONE };
                    let children: Vec<NodeId> = match op.arity() {
                        0 => vec![],
                        1 => vec![a],
                        _ => vec![a, b],
                    };
                    self.push(op, &children)?
                }
            };
            map[i] = mapped;
        }
        Ok(src.outputs.iter().map(|o| map[o.index()]).collect())
    }

    /// Evaluate all outputs with a one-off full sweep. For repeated
    /// evaluation build an [`EvalPlan`] instead.
    pub fn eval(&self, vars: &[f64], params: &[f64]) -> Result<Vec<f64>, CoreError> {
        let plan = EvalPlan::for_outputs(self, &self.outputs);
        let mut scratch = EvalScratch::new();
        let mut out = vec![0.0; self.outputs.len()];
        plan.eval_into(vars, params, &mut scratch, &mut out)?;
        Ok(out)
    }

    /// Exact node/op counts and longest path over the whole graph.
    pub fn stats(&self) -> GraphStats {
        let mut histogram = std::collections::BTreeMap::new();
        let mut depth = vec![0usize; self.nodes.len()];
        let mut max_depth = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            *histogram.entry(node.op.name()).or_insert(0) += 1;
            let child_depth = node.children().map(|c| depth[c.index()]).max().unwrap_or(0);
            depth[i] = child_depth + 1;
            max_depth = max_depth.max(depth[i]);
        }
        GraphStats {
            node_count: self.nodes.len(),
            op_histogram: histogram,
            depth: max_depth,
        }
    }

    /// For each output, the set of `wrt` variable slots it structurally
    /// depends on. This is the exact sparsity pattern of the Jacobian
    /// without building derivative expressions.
    pub fn dependency_pattern(&self, wrt: &[usize]) -> Vec<Vec<bool>> {
        self.dependency_pattern_by(wrt, false)
    }

    /// Structural dependency of each output on parameter slots.
    pub fn param_dependency_pattern(&self, wrt: &[usize]) -> Vec<Vec<bool>> {
        self.dependency_pattern_by(wrt, true)
    }

    fn dependency_pattern_by(&self, wrt: &[usize], on_params: bool) -> Vec<Vec<bool>> {
        let n_wrt = wrt.len();
        let words = n_wrt.div_ceil(64);
        let mut slot_to_col = HashMap::new();
        for (col, &slot) in wrt.iter().enumerate() {
            slot_to_col.insert(slot as u16, col);
        }
        let mut masks = vec![0u64; self.nodes.len() * words];
        for (i, node) in self.nodes.iter().enumerate() {
            let leaf_slot = match (node.op, on_params) {
                (Op::Var(slot), false) | (Op::Param(slot), true) => Some(slot),
                _ => None,
            };
            if let Some(slot) = leaf_slot {
                if let Some(&col) = slot_to_col.get(&slot) {
                    masks[i * words + col / 64] |= 1u64 << (col % 64);
                }
            } else {
                for c in 0..node.op.arity() {
                    let child = node.child(c).index();
                    for w in 0..words {
                        let bits = masks[child * words + w];
                        masks[i * words + w] |= bits;
                    }
                }
            }
        }
        self.outputs
            .iter()
            .map(|o| {
                (0..n_wrt)
                    .map(|col| masks[o.index() * words + col / 64] & (1u64 << (col % 64)) != 0)
                    .collect()
            })
            .collect()
    }
}

fn fold_constants(op: Op, a: f64, b: f64) -> Option<f64> {
    let v = match op {
        Op::Add => a + b,
        Op::Sub => a - b,
        Op::Mul => a * b,
        Op::Div => {
            if b == 0.0 {
                return None;
            }
            a / b
        }
        Op::Neg => -a,
        Op::Sin => a.sin(),
        Op::Cos => a.cos(),
        Op::Tan => a.tan(),
        Op::ArcTan => a.atan(),
        Op::ArcTan2 => a.atan2(b),
        Op::Tanh => a.tanh(),
        Op::Exp => a.exp(),
        Op::Sqrt => {
            if a < 0.0 {
                return None;
            }
            a.sqrt()
        }
        Op::Pow(e) => a.powf(e),
        Op::Min => {
            if a <= b {
                a
            } else {
                b
            }
        }
        Op::Max => {
            if a >= b {
                a
            } else {
                b
            }
        }
        Op::StepLe => {
            if a <= b {
                1.0
            } else {
                0.0
            }
        }
        Op::Const(_) | Op::Param(_) | Op::Var(_) => return None,
    };
    if v.is_nan() {
        return None;
    }
    Some(v)
}
