//! Reverse-mode differentiation.
//!
//! [`jacobian`] appends derivative expressions to the graph it
//! differentiates, so every Jacobian entry is an ordinary node: it can be
//! evaluated through an [`super::EvalPlan`], dumped, or differentiated
//! again. Absent adjoints are structural zeros and produce no entry at all.

use super::{ExprGraph, NodeId, Op};
use crate::error::CoreError;

/// One structurally nonzero Jacobian entry: `d output[row] / d var[wrt[col]]`
/// lives at `node`.
#[derive(Clone, Copy, Debug)]
pub struct JacEntry {
    pub row: usize,
    pub col: usize,
    pub node: NodeId,
}

/// Sparse Jacobian over chosen outputs and variable slots. Entries are
/// sorted by (row, col).
#[derive(Clone, Debug)]
pub struct SparseJacobian {
    pub n_rows: usize,
    pub n_cols: usize,
    pub entries: Vec<JacEntry>,
}

impl SparseJacobian {
    /// Fraction of structurally nonzero entries.
    pub fn density(&self) -> f64 {
        if self.n_rows == 0 || self.n_cols == 0 {
            return 0.0;
        }
        self.entries.len() as f64 / (self.n_rows * self.n_cols) as f64
    }

    /// Boolean occupancy grid, rows × cols.
    pub fn pattern(&self) -> Vec<Vec<bool>> {
        let mut grid = vec![vec![false; self.n_cols]; self.n_rows];
        for e in &self.entries {
            grid[e.row][e.col] = true;
        }
        grid
    }

    /// Nodes to evaluate, in entry order.
    pub fn value_nodes(&self) -> Vec<NodeId> {
        self.entries.iter().map(|e| e.node).collect()
    }

    /// Scatter evaluated entry values into a dense row-major matrix.
    pub fn scatter_dense(&self, values: &[f64], dense: &mut [f64]) {
        assert_eq!(values.len(), self.entries.len());
        assert_eq!(dense.len(), self.n_rows * self.n_cols);
        dense.fill(0.0);
        for (e, &v) in self.entries.iter().zip(values) {
            dense[e.row * self.n_cols + e.col] = v;
        }
    }
}

/// Differentiate `outputs` with respect to the variable slots listed in
/// `wrt`, appending derivative nodes to `graph`.
///
/// Ties in `Min`/`Max` send the whole derivative to the left operand, so
/// the returned subgradient is always an element of the subdifferential.
pub fn jacobian(
    graph: &mut ExprGraph,
    outputs: &[NodeId],
    wrt: &[usize],
) -> Result<SparseJacobian, CoreError> {
    for &o in outputs {
        if o.index() >= graph.node_count() {
            return Err(CoreError::Graph(format!("output {o} out of range")));
        }
    }
    let mut col_of_slot = std::collections::HashMap::new();
    for (col, &slot) in wrt.iter().enumerate() {
        if col_of_slot.insert(slot as u16, col).is_some() {
            return Err(CoreError::Graph(format!(
                "variable slot {slot} listed twice in wrt"
            )));
        }
    }

    let mut entries = Vec::new();
    for (row, &out) in outputs.iter().enumerate() {
        let sweep_len = out.index() + 1;
        let mut adj: Vec<Option<NodeId>> = vec![None; sweep_len];
        adj[out.index()] = Some(graph.constant(1.0));

        // Node ids are topological and differentiation only appends, so a
        // descending scan below the output visits parents before children.
        for i in (0..sweep_len).rev() {
            let Some(a_bar) = adj[i] else { continue };
            let node = *graph.node(NodeId(i as u32));
            match node.op {
                Op::Const(_) | Op::Param(_) => {}
                Op::Var(slot) => {
                    if let Some(&col) = col_of_slot.get(&slot) {
                        entries.push(JacEntry {
                            row,
                            col,
                            node: a_bar,
                        });
                    }
                }
                Op::Add => {
                    accumulate(graph, &mut adj, node.child(0), Some(a_bar));
                    accumulate(graph, &mut adj, node.child(1), Some(a_bar));
                }
                Op::Sub => {
                    accumulate(graph, &mut adj, node.child(0), Some(a_bar));
                    let n = graph.neg(a_bar);
                    accumulate(graph, &mut adj, node.child(1), Some(n));
                }
                Op::Mul => {
                    let (a, b) = (node.child(0), node.child(1));
                    let ca = ad_mul(graph, a_bar, b);
                    accumulate(graph, &mut adj, a, ca);
                    let cb = ad_mul(graph, a_bar, a);
                    accumulate(graph, &mut adj, b, cb);
                }
                Op::Div => {
                    // q = a/b: dq/da = 1/b, dq/db = -q/b
                    let (a, b) = (node.child(0), node.child(1));
                    let ca = graph.div(a_bar, b);
                    accumulate(graph, &mut adj, a, Some(ca));
                    let q_over_b = graph.div(NodeId(i as u32), b);
                    let t = ad_mul(graph, a_bar, q_over_b);
                    let cb = t.map(|t| graph.neg(t));
                    accumulate(graph, &mut adj, b, cb);
                }
                Op::Neg => {
                    let n = graph.neg(a_bar);
                    accumulate(graph, &mut adj, node.child(0), Some(n));
                }
                Op::Sin => {
                    let c = graph.cos(node.child(0));
                    let contrib = ad_mul(graph, a_bar, c);
                    accumulate(graph, &mut adj, node.child(0), contrib);
                }
                Op::Cos => {
                    let s = graph.sin(node.child(0));
                    let ns = graph.neg(s);
                    let contrib = ad_mul(graph, a_bar, ns);
                    accumulate(graph, &mut adj, node.child(0), contrib);
                }
                Op::Tan => {
                    // d tan = 1 + tan^2, reusing this node
                    let t2 = graph.mul(NodeId(i as u32), NodeId(i as u32));
                    let one = graph.constant(1.0);
                    let d = graph.add(one, t2);
                    let contrib = ad_mul(graph, a_bar, d);
                    accumulate(graph, &mut adj, node.child(0), contrib);
                }
                Op::ArcTan => {
                    let x = node.child(0);
                    let x2 = graph.mul(x, x);
                    let one = graph.constant(1.0);
                    let den = graph.add(one, x2);
                    let d = graph.div(a_bar, den);
                    accumulate(graph, &mut adj, x, Some(d));
                }
                Op::ArcTan2 => {
                    // atan2(y, x): d/dy = x/(x²+y²), d/dx = -y/(x²+y²)
                    let (y, x) = (node.child(0), node.child(1));
                    let x2 = graph.mul(x, x);
                    let y2 = graph.mul(y, y);
                    let den = graph.add(x2, y2);
                    let dy = graph.div(x, den);
                    let cy = ad_mul(graph, a_bar, dy);
                    accumulate(graph, &mut adj, y, cy);
                    let ydden = graph.div(y, den);
                    let dx = graph.neg(ydden);
                    let cx = ad_mul(graph, a_bar, dx);
                    accumulate(graph, &mut adj, x, cx);
                }
                Op::Tanh => {
                    // d tanh = 1 - tanh², reusing this node
                    let t2 = graph.mul(NodeId(i as u32), NodeId(i as u32));
                    let one = graph.constant(1.0);
                    let d = graph.sub(one, t2);
                    let contrib = ad_mul(graph, a_bar, d);
                    accumulate(graph, &mut adj, node.child(0), contrib);
                }
                Op::Exp => {
                    let contrib = ad_mul(graph, a_bar, NodeId(i as u32));
                    accumulate(graph, &mut adj, node.child(0), contrib);
                }
                Op::Sqrt => {
                    // d sqrt(a) = 1/(2 sqrt(a)), reusing this node
                    let two = graph.constant(2.0);
                    let den = graph.mul(two, NodeId(i as u32));
                    let d = graph.div(a_bar, den);
                    accumulate(graph, &mut adj, node.child(0), Some(d));
                }
                Op::Pow(e) => {
                    let x = node.child(0);
                    let contrib = if e == 0.0 {
                        None
                    } else if e == 1.0 {
                        Some(a_bar)
                    } else {
                        let dpow = if e == 2.0 {
                            let two = graph.constant(2.0);
                            graph.mul(two, x)
                        } else {
                            let ec = graph.constant(e);
                            let xm = graph.powc(x, e - 1.0);
                            graph.mul(ec, xm)
                        };
                        ad_mul(graph, a_bar, dpow)
                    };
                    accumulate(graph, &mut adj, x, contrib);
                }
                Op::Min => {
                    // left branch wins ties: d/da = [a<=b], d/db = 1-[a<=b]
                    let (a, b) = (node.child(0), node.child(1));
                    let step = graph.push(Op::StepLe, &[a, b])?;
                    let ca = ad_mul(graph, a_bar, step);
                    accumulate(graph, &mut adj, a, ca);
                    let one = graph.constant(1.0);
                    let inv = graph.sub(one, step);
                    let cb = ad_mul(graph, a_bar, inv);
                    accumulate(graph, &mut adj, b, cb);
                }
                Op::Max => {
                    // left branch wins ties: d/da = [b<=a], d/db = 1-[b<=a]
                    let (a, b) = (node.child(0), node.child(1));
                    let step = graph.push(Op::StepLe, &[b, a])?;
                    let ca = ad_mul(graph, a_bar, step);
                    accumulate(graph, &mut adj, a, ca);
                    let one = graph.constant(1.0);
                    let inv = graph.sub(one, step);
                    let cb = ad_mul(graph, a_bar, inv);
                    accumulate(graph, &mut adj, b, cb);
                }
                // piecewise constant
                Op::StepLe => {}
            }
        }
    }

    entries.sort_by_key(|e| (e.row, e.col));
    Ok(SparseJacobian {
        n_rows: outputs.len(),
        n_cols: wrt.len(),
        entries,
    })
}

/// adj[child] += contrib, eliding the add when either side is absent.
fn accumulate(
    graph: &mut ExprGraph,
    adj: &mut [Option<NodeId>],
    child: NodeId,
    contrib: Option<NodeId>,
) {
    let Some(c) = contrib else { return };
    adj[child.index()] = Some(match adj[child.index()] {
        None => c,
        Some(prev) => graph.add(prev, c),
    });
}

/// Multiply two factors, eliding known zeros and ones. Used only inside
/// differentiation; user-built structure is never rewritten.
fn ad_mul(graph: &mut ExprGraph, a: NodeId, b: NodeId) -> Option<NodeId> {
    match (graph.constant_value(a), graph.constant_value(b)) {
        (Some(0.0), _) | (_, Some(0.0)) => None,
        (Some(1.0), _) => Some(b),
        (_, Some(1.0)) => Some(a),
        _ => Some(graph.mul(a, b)),
    }
}
