//! Symbolic embedding of frozen specialists and the mixed ensemble graph.
//!
//! A frozen net is pure structure: weights become Const nodes, so the
//! whole forward pass (Z-score, affine layers, Tanh, de-normalization)
//! lives in the expression graph and is differentiable like any other
//! dynamics. The ensemble shares analytic kinematic rows and mixes only
//! the dynamic rows, with mixture weights as Parameter slots.

use crate::error::Result;
use crate::symgraph::{ExprGraph, NodeId};
use crate::vehicle::{build_parametric_graph, VAR_SLOTS};

use super::{SpecialistLibrary, SpecialistModel, SpecialistNet, NET_INPUTS, NET_OUTPUTS};

/// Append one frozen net to `g`, returning its six raw-unit output nodes.
/// `inputs` are the nodes carrying (vx, vy, omega, delta, D).
fn append_net(
    g: &mut ExprGraph,
    net: &SpecialistNet,
    inputs: &[NodeId; NET_INPUTS],
) -> [NodeId; NET_OUTPUTS] {
    let mut layer: Vec<NodeId> = inputs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let mean = g.constant(net.input_mean[i]);
            let std = g.constant(net.input_std[i]);
            let centered = g.sub(x, mean);
            g.div(centered, std)
        })
        .collect();

    let n_layers = net.weights.len();
    for l in 0..n_layers {
        let w = &net.weights[l];
        let mut next = Vec::with_capacity(w.nrows());
        for j in 0..w.nrows() {
            let mut acc = g.constant(net.biases[l][j]);
            for (i, &zi) in layer.iter().enumerate() {
                let wji = g.constant(w[(j, i)]);
                let term = g.mul(wji, zi);
                acc = g.add(acc, term);
            }
            if l + 1 < n_layers {
                acc = g.tanh(acc);
            }
            next.push(acc);
        }
        layer = next;
    }

    std::array::from_fn(|r| {
        let std = g.constant(net.output_std[r]);
        let mean = g.constant(net.output_mean[r]);
        let scaled = g.mul(layer[r], std);
        g.add(scaled, mean)
    })
}

/// Embed a frozen net as a standalone graph. Variable slots 0..4 carry
/// (vx, vy, omega, delta, D); outputs are the six raw-unit rows.
pub fn embed_symbolic(net: &SpecialistNet) -> ExprGraph {
    let mut g = ExprGraph::new();
    let inputs: [NodeId; NET_INPUTS] = std::array::from_fn(|i| g.var(i));
    let outs = append_net(&mut g, net, &inputs);
    g.set_outputs(&outs);
    g
}

/// Append one member's dynamic rows (v̇x, v̇y, ω̇) to `g` under the
/// vehicle variable convention.
fn append_member_dynamic_rows(
    g: &mut ExprGraph,
    member: &SpecialistModel,
    vars: &[NodeId; VAR_SLOTS],
) -> Result<[NodeId; 3]> {
    match member {
        SpecialistModel::Net(net) => {
            let inputs = [vars[3], vars[4], vars[5], vars[6], vars[7]];
            let outs = append_net(g, net, &inputs);
            Ok([outs[3], outs[4], outs[5]])
        }
        SpecialistModel::Ode { params, .. } => {
            // regime is frozen, so its physical parameters enter as
            // constants; parameter slots stay reserved for mixture weights
            let src = build_parametric_graph();
            let slots = params.to_slots();
            let consts: Vec<NodeId> = slots.iter().map(|&v| g.constant(v)).collect();
            let outs = g.splice(&src, vars, &consts)?;
            Ok([outs[3], outs[4], outs[5]])
        }
    }
}

/// Build the weight-parametric ensemble graph over the vehicle variable
/// convention (8 slots): rows 0..2 are shared analytic kinematics, rows
/// 3..5 are Σᵢ wᵢ·(member i dynamic rows) with wᵢ in parameter slot i.
pub fn build_ensemble(lib: &SpecialistLibrary) -> Result<ExprGraph> {
    let mut g = ExprGraph::new();
    let vars: [NodeId; VAR_SLOTS] = std::array::from_fn(|i| g.var(i));
    let (psi, vx, vy, omega) = (vars[2], vars[3], vars[4], vars[5]);

    let cos_psi = g.cos(psi);
    let sin_psi = g.sin(psi);
    let vx_cos = g.mul(vx, cos_psi);
    let vy_sin = g.mul(vy, sin_psi);
    let x_dot = g.sub(vx_cos, vy_sin);
    let vx_sin = g.mul(vx, sin_psi);
    let vy_cos = g.mul(vy, cos_psi);
    let y_dot = g.add(vx_sin, vy_cos);

    let mut dyn_rows: [Option<NodeId>; 3] = [None; 3];
    for (i, member) in lib.members.iter().enumerate() {
        let w = g.param(i);
        let rows = append_member_dynamic_rows(&mut g, member, &vars)?;
        for (r, &row) in rows.iter().enumerate() {
            let term = g.mul(w, row);
            dyn_rows[r] = Some(match dyn_rows[r] {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
    }
    let d = dyn_rows.map(|r| r.expect("library is non-empty"));
    g.set_outputs(&[x_dot, y_dot, omega, d[0], d[1], d[2]]);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specialists::testutil::random_net;
    use crate::symgraph::{jacobian, EvalPlan, EvalScratch};
    use crate::vehicle::{continuous_dynamics, VehicleParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(rng: &mut ChaCha8Rng) -> [f64; NET_INPUTS] {
        [
            rng.gen_range(0.1..3.0),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-1.0..1.0),
        ]
    }

    #[test]
    fn embedded_graph_matches_forward_pass() {
        let net = random_net(3);
        let g = embed_symbolic(&net);
        let plan = EvalPlan::for_outputs(&g, g.outputs());
        let mut scratch = EvalScratch::default();
        let mut out = vec![0.0; NET_OUTPUTS];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let x = random_inputs(&mut rng);
            plan.eval_into(&x, &[], &mut scratch, &mut out).unwrap();
            let want = net.forward(&x);
            for r in 0..NET_OUTPUTS {
                assert!(
                    (out[r] - want[r]).abs() <= 1e-12 * want[r].abs().max(1.0),
                    "row {r}: {} vs {}",
                    out[r],
                    want[r]
                );
            }
        }
    }

    #[test]
    fn embedded_jacobian_matches_finite_differences() {
        let net = random_net(4);
        let mut g = embed_symbolic(&net);
        let outputs = g.outputs().to_vec();
        let jac = jacobian(&mut g, &outputs, &[0, 1, 2, 3, 4]).unwrap();
        let value_nodes = jac.value_nodes();
        let plan = EvalPlan::for_outputs(&g, &value_nodes);
        let mut scratch = EvalScratch::default();
        let mut vals = vec![0.0; value_nodes.len()];

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let x = random_inputs(&mut rng);
            plan.eval_into(&x, &[], &mut scratch, &mut vals).unwrap();
            let mut dense = vec![0.0; NET_OUTPUTS * NET_INPUTS];
            jac.scatter_dense(&vals, &mut dense);

            for c in 0..NET_INPUTS {
                let h = 1e-6 * x[c].abs().max(1.0);
                let mut xp = x;
                xp[c] += h;
                let mut xm = x;
                xm[c] -= h;
                let fp = net.forward(&xp);
                let fm = net.forward(&xm);
                for r in 0..NET_OUTPUTS {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    let sym = dense[r * NET_INPUTS + c];
                    let rel = (sym - fd).abs() / fd.abs().max(1.0);
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst < 1e-6, "worst FD mismatch {worst}");
    }

    #[test]
    fn zero_weight_net_reduces_to_bias_path() {
        let mut net = random_net(5);
        for w in net.weights.iter_mut() {
            w.fill(0.0);
        }
        // bias path: out = mean + std·b_last (hidden tanh(b) never reaches
        // the output once the weights vanish)
        let want: Vec<f64> = (0..NET_OUTPUTS)
            .map(|r| net.output_mean[r] + net.output_std[r] * net.biases.last().unwrap()[r])
            .collect();
        let g = embed_symbolic(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x = random_inputs(&mut rng);
            let got = g.eval(&x, &[]).unwrap();
            for r in 0..NET_OUTPUTS {
                assert!((got[r] - want[r]).abs() < 1e-12, "row {r}");
            }
        }
    }

    fn mixed_library() -> SpecialistLibrary {
        let mut hi = VehicleParams::default();
        hi.mu_scale = 1.25;
        SpecialistLibrary::new(vec![
            SpecialistModel::Net(random_net(9)),
            SpecialistModel::Ode {
                params: VehicleParams::default(),
                tag: "nominal".into(),
            },
            SpecialistModel::Ode {
                params: hi,
                tag: "hi".into(),
            },
        ])
        .unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng) -> [f64; 8] {
        [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(0.1..3.0),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-1.0..1.0),
        ]
    }

    #[test]
    fn vertex_weight_reproduces_single_member() {
        let lib = mixed_library();
        let g = build_ensemble(&lib).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for i in 0..lib.len() {
            let mut w = vec![0.0; lib.len()];
            w[i] = 1.0;
            for _ in 0..20 {
                let z = random_state(&mut rng);
                let got = g.eval(&z, &w).unwrap();
                let x: [f64; 6] = std::array::from_fn(|k| z[k]);
                let u = [z[6], z[7]];
                let want = lib.members[i].dynamic_rows(&x, &u);
                for r in 0..3 {
                    assert!(
                        (got[3 + r] - want[r]).abs() <= 1e-12 * want[r].abs().max(1.0),
                        "member {i} row {r}: {} vs {}",
                        got[3 + r],
                        want[r]
                    );
                }
                // kinematic rows are analytic, independent of w
                let psi = z[2];
                assert!((got[0] - (z[3] * psi.cos() - z[4] * psi.sin())).abs() < 1e-12);
                assert!((got[1] - (z[3] * psi.sin() + z[4] * psi.cos())).abs() < 1e-12);
                assert!((got[2] - z[5]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_members_make_mixing_weight_irrelevant() {
        let p = VehicleParams::default();
        let lib = SpecialistLibrary::new(vec![
            SpecialistModel::Ode {
                params: p,
                tag: "a".into(),
            },
            SpecialistModel::Ode {
                params: p,
                tag: "b".into(),
            },
        ])
        .unwrap();
        let g = build_ensemble(&lib).unwrap();
        let z = [0.3, -0.2, 0.7, 1.2, 0.1, -0.5, 0.2, 0.6];
        let uniform = g.eval(&z, &[0.5, 0.5]).unwrap();
        let x: [f64; 6] = std::array::from_fn(|k| z[k]);
        let want = continuous_dynamics(&x, &[z[6], z[7]], &p);
        for r in 3..6 {
            assert!((uniform[r] - want[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn dynamic_outputs_stay_inside_member_hull() {
        let lib = mixed_library();
        let g = build_ensemble(&lib).unwrap();
        let plan = EvalPlan::for_outputs(&g, g.outputs());
        let mut scratch = EvalScratch::default();
        let mut out = vec![0.0; 6];
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..1000 {
            let z = random_state(&mut rng);
            // random simplex point
            let mut w: Vec<f64> = (0..lib.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            plan.eval_into(&z, &w, &mut scratch, &mut out).unwrap();

            let x: [f64; 6] = std::array::from_fn(|k| z[k]);
            let u = [z[6], z[7]];
            for r in 0..3 {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for m in &lib.members {
                    let v = m.dynamic_rows(&x, &u)[r];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                let pad = 1e-10 * hi.abs().max(lo.abs()).max(1.0);
                assert!(
                    out[3 + r] >= lo - pad && out[3 + r] <= hi + pad,
                    "row {r}: {} outside [{lo}, {hi}]",
                    out[3 + r]
                );
            }
        }
    }

    #[test]
    fn ensemble_jacobian_is_convex_in_weights() {
        let lib = mixed_library();
        let mut g = build_ensemble(&lib).unwrap();
        let outputs = g.outputs().to_vec();
        let wrt: Vec<usize> = (0..VAR_SLOTS).collect();
        let jac = jacobian(&mut g, &outputs, &wrt).unwrap();
        let value_nodes = jac.value_nodes();
        let plan = EvalPlan::for_outputs(&g, &value_nodes);
        let mut scratch = EvalScratch::default();
        let mut vals = vec![0.0; value_nodes.len()];
        let n = lib.len();

        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..50 {
            let z = random_state(&mut rng);
            let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);

            let mut dense_w = vec![0.0; 6 * VAR_SLOTS];
            plan.eval_into(&z, &w, &mut scratch, &mut vals).unwrap();
            jac.scatter_dense(&vals, &mut dense_w);

            // Σᵢ wᵢ · J(eᵢ): the same plan evaluated at the vertices
            let mut combo = vec![0.0; 6 * VAR_SLOTS];
            for i in 0..n {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                let mut dense_i = vec![0.0; 6 * VAR_SLOTS];
                plan.eval_into(&z, &e, &mut scratch, &mut vals).unwrap();
                jac.scatter_dense(&vals, &mut dense_i);
                for (c, v) in combo.iter_mut().zip(&dense_i) {
                    *c += w[i] * v;
                }
            }
            for (a, b) in dense_w.iter().zip(&combo) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}
