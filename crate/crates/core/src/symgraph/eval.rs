//! Instruction-tape evaluation.
//!
//! An [`EvalPlan`] freezes the subgraph reachable from a chosen output set
//! into a flat tape with dense register indices. Building the plan walks the
//! graph once; each evaluation afterwards is a single pass over the tape
//! with no hashing or recursion. Plans are immutable and shareable; the
//! mutable state lives in a caller-owned [`EvalScratch`].

use super::{ExprGraph, NodeId, Op};
use crate::error::CoreError;

#[derive(Clone, Copy, Debug)]
struct Instr {
    op: Op,
    /// Source node in the originating graph, for error reporting.
    node: NodeId,
    a: u32,
    b: u32,
}

/// Compiled evaluation tape for a fixed set of outputs.
#[derive(Clone)]
pub struct EvalPlan {
    tape: Vec<Instr>,
    out_regs: Vec<u32>,
    n_vars: usize,
    n_params: usize,
}

/// Reusable register file for [`EvalPlan::eval_into`].
#[derive(Default, Clone)]
pub struct EvalScratch {
    regs: Vec<f64>,
}

impl EvalScratch {
    pub fn new() -> Self {
        Self::default()
    }
}

impl EvalPlan {
    /// Compile the subgraph reachable from `outputs`.
    pub fn for_outputs(graph: &ExprGraph, outputs: &[NodeId]) -> Self {
        // Mark reachable nodes. Node ids are topological, so one reverse
        // sweep suffices.
        let n = graph.node_count();
        let mut reachable = vec![false; n];
        for &o in outputs {
            reachable[o.index()] = true;
        }
        for i in (0..n).rev() {
            if reachable[i] {
                for c in graph.node(NodeId(i as u32)).children() {
                    reachable[c.index()] = true;
                }
            }
        }

        let mut reg_of = vec![u32::MAX; n];
        let mut tape = Vec::new();
        let mut n_vars = 0usize;
        let mut n_params = 0usize;
        for i in 0..n {
            if !reachable[i] {
                continue;
            }
            let node = graph.node(NodeId(i as u32));
            match node.op {
                Op::Var(s) => n_vars = n_vars.max(s as usize + 1),
                Op::Param(s) => n_params = n_params.max(s as usize + 1),
                _ => {}
            }
            let arity = node.op.arity();
            let a = if arity >= 1 { reg_of[node.child(0).index()] } else { 0 };
            let b = if arity >= 2 { reg_of[node.child(1).index()] } else { 0 };
            reg_of[i] = tape.len() as u32;
            tape.push(Instr {
                op: node.op,
                node: NodeId(i as u32),
                a,
                b,
            });
        }
        let out_regs = outputs.iter().map(|o| reg_of[o.index()]).collect();
        EvalPlan {
            tape,
            out_regs,
            n_vars,
            n_params,
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.out_regs.len()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Tape length; proportional to the work per evaluation.
    pub fn len(&self) -> usize {
        self.tape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tape.is_empty()
    }

    /// Run the tape. `out` must have space for all outputs. Evaluation is
    /// pure: identical inputs produce identical outputs, bit for bit.
    pub fn eval_into(
        &self,
        vars: &[f64],
        params: &[f64],
        scratch: &mut EvalScratch,
        out: &mut [f64],
    ) -> Result<(), CoreError> {
        if vars.len() < self.n_vars {
            return Err(CoreError::Graph(format!(
                "evaluation needs {} variables, got {}",
                self.n_vars,
                vars.len()
            )));
        }
        if params.len() < self.n_params {
            return Err(CoreError::Graph(format!(
                "evaluation needs {} parameters, got {}",
                self.n_params,
                params.len()
            )));
        }
        assert!(out.len() >= self.out_regs.len(), "output buffer too small");

        scratch.regs.resize(self.tape.len(), 0.0);
        let regs = &mut scratch.regs;
        for (i, ins) in self.tape.iter().enumerate() {
            let a = regs[ins.a as usize];
            let b = regs[ins.b as usize];
            let v = match ins.op {
                Op::Const(c) => c,
                Op::Param(s) => params[s as usize],
                Op::Var(s) => vars[s as usize],
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::Div => {
                    if b == 0.0 {
                        return Err(CoreError::Domain {
                            op: "div",
                            node: ins.node.0,
                            detail: "division by zero".into(),
                        });
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
                        return Err(CoreError::Domain {
                            op: "sqrt",
                            node: ins.node.0,
                            detail: format!("negative operand {a}"),
                        });
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
            };
            regs[i] = v;
        }
        for (o, &r) in out.iter_mut().zip(&self.out_regs) {
            *o = regs[r as usize];
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_graph() -> ExprGraph {
        // out0 = sin(x*y) + p0, out1 = x / y
        let mut g = ExprGraph::new();
        let x = g.var(0);
        let y = g.var(1);
        let p = g.param(0);
        let xy = g.mul(x, y);
        let s = g.sin(xy);
        let o0 = g.add(s, p);
        let o1 = g.div(x, y);
        g.set_outputs(&[o0, o1]);
        g
    }

    #[test]
    fn plan_matches_direct_math() {
        let g = sample_graph();
        let plan = EvalPlan::for_outputs(&g, g.outputs());
        let mut scratch = EvalScratch::new();
        let mut out = [0.0; 2];
        plan.eval_into(&[0.7, -1.3], &[2.5], &mut scratch, &mut out)
            .unwrap();
        assert!((out[0] - ((0.7f64 * -1.3).sin() + 2.5)).abs() < 1e-15);
        assert!((out[1] - (0.7 / -1.3)).abs() < 1e-15);
    }

    #[test]
    fn plan_skips_unreachable_nodes() {
        let mut g = sample_graph();
        // dead branch
        let z = g.var(2);
        let _dead = g.exp(z);
        let outs = g.outputs().to_vec();
        let plan = EvalPlan::for_outputs(&g, &outs);
        assert!(plan.len() < g.node_count());
        // the dead var(2) must not raise the input requirement
        assert_eq!(plan.n_vars(), 2);
    }

    #[test]
    fn division_by_zero_reports_node() {
        let g = sample_graph();
        let plan = EvalPlan::for_outputs(&g, g.outputs());
        let mut scratch = EvalScratch::new();
        let mut out = [0.0; 2];
        let err = plan
            .eval_into(&[1.0, 0.0], &[0.0], &mut scratch, &mut out)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("div"), "unexpected message: {msg}");
    }

    #[test]
    fn sqrt_of_negative_is_domain_error() {
        let mut g = ExprGraph::new();
        let x = g.var(0);
        let r = g.sqrt(x);
        g.set_outputs(&[r]);
        let plan = EvalPlan::for_outputs(&g, g.outputs());
        let mut scratch = EvalScratch::new();
        let mut out = [0.0; 1];
        assert!(plan
            .eval_into(&[-1.0], &[], &mut scratch, &mut out)
            .is_err());
        plan.eval_into(&[4.0], &[], &mut scratch, &mut out).unwrap();
        assert_eq!(out[0], 2.0);
    }

    #[test]
    fn missing_inputs_rejected() {
        let g = sample_graph();
        let plan = EvalPlan::for_outputs(&g, g.outputs());
        let mut scratch = EvalScratch::new();
        let mut out = [0.0; 2];
        assert!(plan.eval_into(&[1.0], &[1.0], &mut scratch, &mut out).is_err());
        assert!(plan
            .eval_into(&[1.0, 2.0], &[], &mut scratch, &mut out)
            .is_err());
    }

    #[test]
    fn evaluation_is_pure() {
        let g = sample_graph();
        let plan = EvalPlan::for_outputs(&g, g.outputs());
        let mut scratch = EvalScratch::new();
        let mut a = [0.0; 2];
        let mut b = [0.0; 2];
        plan.eval_into(&[0.3, 0.9], &[1.0], &mut scratch, &mut a)
            .unwrap();
        for _ in 0..5 {
            plan.eval_into(&[0.3, 0.9], &[1.0], &mut scratch, &mut b)
                .unwrap();
            assert_eq!(a[0].to_bits(), b[0].to_bits());
            assert_eq!(a[1].to_bits(), b[1].to_bits());
        }
    }
}
