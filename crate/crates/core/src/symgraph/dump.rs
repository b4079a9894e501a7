//! Plain-text graph serialization.
//!
//! One node per line, children referenced by id, ids strictly increasing:
//!
//! ```text
//! 0 var 0
//! 1 const 2.5
//! 2 mul 0 1
//! 3 pow 1.5 2
//! outputs 3
//! ```
//!
//! Leaf payloads (`const` value, `var`/`param` slot, `pow` exponent) sit
//! between the op name and the children. Blank lines and `#` comments are
//! ignored on parse. Float formatting uses the shortest round-tripping
//! decimal, so dump → parse → dump is byte-identical.

use super::{ExprGraph, NodeId, Op};
use crate::error::CoreError;
use std::fmt::Write as _;

impl ExprGraph {
    /// Serialize every node plus the output list.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, node) in self.nodes().iter().enumerate() {
            write!(s, "{i} {}", node.op.name()).unwrap();
            match node.op {
                Op::Const(v) => write!(s, " {v}").unwrap(),
                Op::Var(slot) | Op::Param(slot) => write!(s, " {slot}").unwrap(),
                Op::Pow(e) => write!(s, " {e}").unwrap(),
                _ => {}
            }
            for c in node.children() {
                write!(s, " {c}").unwrap();
            }
            s.push('\n');
        }
        s.push_str("outputs");
        for o in self.outputs() {
            write!(s, " {o}").unwrap();
        }
        s.push('\n');
        s
    }
}

/// Parse the format produced by [`ExprGraph::dump`]. Nodes are re-interned,
/// so hand-written duplicates collapse and ids in the file are remapped.
pub fn parse_graph(text: &str) -> Result<ExprGraph, CoreError> {
    let mut g = ExprGraph::new();
    let mut map: Vec<NodeId> = Vec::new();
    let mut outputs: Option<Vec<NodeId>> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| {
            CoreError::Graph(format!("graph dump line {}: {what}: {line}", lineno + 1))
        };
        let mut tok = line.split_ascii_whitespace();
        let first = tok.next().unwrap();

        if first == "outputs" {
            if outputs.is_some() {
                return Err(bad("duplicate outputs line"));
            }
            let mut outs = Vec::new();
            for t in tok {
                let id: usize = t.parse().map_err(|_| bad("bad output id"))?;
                let mapped = *map.get(id).ok_or_else(|| bad("output id out of range"))?;
                outs.push(mapped);
            }
            outputs = Some(outs);
            continue;
        }
        if outputs.is_some() {
            return Err(bad("node line after outputs"));
        }

        let id: usize = first.parse().map_err(|_| bad("bad node id"))?;
        if id != map.len() {
            return Err(bad("node ids must be sequential from 0"));
        }
        let name = tok.next().ok_or_else(|| bad("missing op name"))?;

        let payload = |what: &str, tok: &mut dyn Iterator<Item = &str>| -> Result<f64, CoreError> {
            tok.next()
                .ok_or_else(|| bad(what))?
                .parse::<f64>()
                .map_err(|_| bad(what))
        };
        let op = match name {
            "const" => Op::Const(payload("missing const value", &mut tok)?),
            "var" => Op::Var(payload("missing var slot", &mut tok)? as u16),
            "param" => Op::Param(payload("missing param slot", &mut tok)? as u16),
            "pow" => Op::Pow(payload("missing pow exponent", &mut tok)?),
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "neg" => Op::Neg,
            "sin" => Op::Sin,
            "cos" => Op::Cos,
            "tan" => Op::Tan,
            "atan" => Op::ArcTan,
            "atan2" => Op::ArcTan2,
            "tanh" => Op::Tanh,
            "exp" => Op::Exp,
            "sqrt" => Op::Sqrt,
            "min" => Op::Min,
            "max" => Op::Max,
            "step_le" => Op::StepLe,
            _ => return Err(bad("unknown op")),
        };

        let mut children = Vec::with_capacity(op.arity());
        for t in tok.by_ref() {
            let cid: usize = t.parse().map_err(|_| bad("bad child id"))?;
            let mapped = *map.get(cid).ok_or_else(|| bad("child id out of range"))?;
            children.push(mapped);
        }
        if children.len() != op.arity() {
            return Err(bad("wrong child count"));
        }
        map.push(g.push(op, &children)?);
    }

    let outs = outputs.ok_or_else(|| CoreError::Graph("graph dump has no outputs line".into()))?;
    g.set_outputs(&outs);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symgraph::jacobian;

    fn sample() -> ExprGraph {
        let mut g = ExprGraph::new();
        let x = g.var(0);
        let y = g.var(1);
        let p = g.param(0);
        let xy = g.mul(x, y);
        let a = g.atan2(xy, p);
        let sq = g.powc(a, 2.5);
        let mn = g.min(sq, x);
        g.set_outputs(&[mn, xy]);
        g
    }

    #[test]
    fn dump_parse_round_trip_is_stable() {
        let g = sample();
        let text = g.dump();
        let g2 = parse_graph(&text).unwrap();
        assert_eq!(g2.node_count(), g.node_count());
        assert_eq!(g2.dump(), text);
        let vars = [0.37, 1.81];
        let params = [0.9];
        assert_eq!(
            g.eval(&vars, &params).unwrap(),
            g2.eval(&vars, &params).unwrap()
        );
    }

    #[test]
    fn round_trip_covers_derivative_nodes() {
        let mut g = sample();
        let outs = g.outputs().to_vec();
        let jac = jacobian(&mut g, &outs, &[0, 1]).unwrap();
        let mut with_jac = outs.clone();
        with_jac.extend(jac.value_nodes());
        g.set_outputs(&with_jac);
        let text = g.dump();
        let g2 = parse_graph(&text).unwrap();
        assert_eq!(g2.dump(), text);
    }

    #[test]
    fn hand_written_duplicates_collapse() {
        let text = "\
0 var 0
1 var 0
2 sin 0
3 sin 1
4 add 2 3
outputs 4
";
        let g = parse_graph(text).unwrap();
        // var dedup makes both sin nodes identical
        assert_eq!(g.node_count(), 3);
        let v = g.eval(&[0.5], &[]).unwrap();
        assert!((v[0] - 2.0 * 0.5f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(parse_graph("0 bogus\noutputs 0\n").is_err());
        assert!(parse_graph("0 add 5 6\noutputs 0\n").is_err());
        assert!(parse_graph("1 const 1\noutputs 1\n").is_err());
        assert!(parse_graph("0 const 1\n").is_err());
        assert!(parse_graph("0 sin\noutputs 0\n").is_err());
        // forward reference
        assert!(parse_graph("0 var 0\n1 add 0 2\n2 var 1\noutputs 1\n").is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let text = "# dynamics\n\n0 var 0\n1 tanh 0\n\noutputs 1\n";
        let g = parse_graph(text).unwrap();
        assert_eq!(g.node_count(), 2);
    }
}
