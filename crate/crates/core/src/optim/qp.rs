//! Primal active-set method for strictly convex QPs with two-sided linear
//! constraints:
//!
//! min ½·xᵀHx + gᵀx  s.t.  cl ≤ C·x ≤ cu
//!
//! Box bounds are passed as unit rows of C. The SQP layer keeps problems
//! tiny (n = 2H = 30, a few dozen rows), so each working-set change is one
//! dense KKT factorization. Rows with cl = cu are permanent equalities.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};

const ACT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-7;
/// dual regularization keeping the KKT system solvable when active rows
/// become linearly dependent (a rate row equals a difference of two box
/// rows, for example)
const DUAL_REG: f64 = 1e-12;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Side {
    Lower,
    Upper,
    Equality,
}

/// Exact minimizer starting from a feasible `x0`. Infeasible starts beyond
/// a small tolerance are rejected rather than repaired.
pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    c: &DMatrix<f64>,
    cl: &DVector<f64>,
    cu: &DVector<f64>,
    x0: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = h.nrows();
    let m = c.nrows();
    assert_eq!(h.ncols(), n);
    assert_eq!(g.len(), n);
    assert_eq!(c.ncols(), n);
    assert_eq!(cl.len(), m);
    assert_eq!(cu.len(), m);

    let mut x = x0.clone();
    let cx0 = c * &x;
    for i in 0..m {
        if cl[i] > cu[i] + 1e-15 {
            return Err(CoreError::Optim(format!(
                "constraint row {i} has crossed bounds [{}, {}]",
                cl[i], cu[i]
            )));
        }
        if cx0[i] < cl[i] - FEAS_TOL || cx0[i] > cu[i] + FEAS_TOL {
            return Err(CoreError::Optim(format!(
                "infeasible start: row {i} value {} outside [{}, {}]",
                cx0[i], cl[i], cu[i]
            )));
        }
    }

    // initial working set: everything at a bound
    let mut active: Vec<(usize, Side)> = Vec::new();
    for i in 0..m {
        if cu[i] - cl[i] <= ACT_TOL {
            active.push((i, Side::Equality));
        } else if cx0[i] <= cl[i] + ACT_TOL {
            active.push((i, Side::Lower));
        } else if cx0[i] >= cu[i] - ACT_TOL {
            active.push((i, Side::Upper));
        }
    }

    let max_pivots = 50 * (m + 1);
    for _ in 0..max_pivots {
        // equality-constrained step: [H Cᵂᵀ; Cᵂ -εI]·[p; μ] = [-(Hx+g); 0]
        let k = active.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        for (j, &(row, _)) in active.iter().enumerate() {
            for col in 0..n {
                kkt[(col, n + j)] = c[(row, col)];
                kkt[(n + j, col)] = c[(row, col)];
            }
            kkt[(n + j, n + j)] = -DUAL_REG;
        }
        let mut rhs = DVector::zeros(n + k);
        let grad = h * &x + g;
        for i in 0..n {
            rhs[i] = -grad[i];
        }
        let sol = kkt
            .lu()
            .solve(&rhs)
            .ok_or_else(|| CoreError::Linear("singular KKT system in QP".into()))?;
        let p = sol.rows(0, n).into_owned();
        let mu = sol.rows(n, k).into_owned();

        // the dual regularization leaves C·p ≈ ε·μ instead of 0, so the
        // subspace-minimizer test and the multiplier sign test must sit
        // above that noise floor, which scales with the gradient
        let noise = 1e-9 * (1.0 + grad.amax());
        if p.amax() < noise {
            // multiplier check; Lagrangian sign convention gives λ = μ for
            // upper bounds and λ = -μ for lower bounds
            let mut worst: Option<(usize, f64)> = None;
            for (j, &(_, side)) in active.iter().enumerate() {
                let lambda = match side {
                    Side::Upper => mu[j],
                    Side::Lower => -mu[j],
                    Side::Equality => continue,
                };
                if lambda < -noise && worst.map_or(true, |(_, w)| lambda < w) {
                    worst = Some((j, lambda));
                }
            }
            match worst {
                None => return Ok(x),
                Some((j, _)) => {
                    active.remove(j);
                    continue;
                }
            }
        }

        // ratio test against rows not in the working set
        let cp = c * &p;
        let cx = c * &x;
        let mut alpha = 1.0;
        let mut blocking: Option<(usize, Side)> = None;
        for i in 0..m {
            if active.iter().any(|&(r, _)| r == i) {
                continue;
            }
            let t = cp[i];
            let (dist, side) = if t > 1e-12 {
                (cu[i] - cx[i], Side::Upper)
            } else if t < -1e-12 {
                (cl[i] - cx[i], Side::Lower)
            } else {
                continue;
            };
            let a = (dist / t).max(0.0);
            if a < alpha - 1e-14 {
                alpha = a;
                blocking = Some((i, side));
            }
        }

        x += alpha * &p;
        if let Some(b) = blocking {
            active.push(b);
        }
    }
    Err(CoreError::Optim(
        "QP active-set iteration limit exceeded".into(),
    ))
}
