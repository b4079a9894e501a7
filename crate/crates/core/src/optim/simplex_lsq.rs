//! Exact least squares over the probability simplex.
//!
//! min_w ‖A·w − y‖²  s.t.  Σw = 1, w ≥ 0.
//!
//! Solved by enumerating supports: for every nonempty subset S of columns,
//! the equality-constrained problem (weights off S pinned to zero, Σ = 1)
//! is a small KKT system; the feasible candidate with least objective is
//! the exact global minimizer. With N ≤ 8 that is at most 255 tiny solves,
//! deterministic and allocation-light, which suits a per-control-step call.

use nalgebra::{DMatrix, DVector};

/// Tolerance below which a slightly negative weight is considered on the
/// boundary and clamped.
const FEAS_TOL: f64 = 1e-9;

/// Tikhonov term used when a support submatrix is rank-deficient.
const RIDGE: f64 = 1e-10;

/// Exact minimizer of `‖A·w − y‖²` over the simplex. Ties between supports
/// are broken toward the larger support, then lexicographically smaller
/// index set.
pub fn solve_simplex_lsq(a: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    assert!(n >= 1, "at least one column required");
    assert_eq!(a.nrows(), y.len(), "row mismatch");

    // Normal-equation blocks are computed once; every support solve reads
    // submatrices of these.
    let gram = a.transpose() * a;
    let cty = a.transpose() * y;
    let yty = y.dot(y);

    let objective = |w: &DVector<f64>| -> f64 {
        (w.transpose() * &gram * w)[(0, 0)] - 2.0 * cty.dot(w) + yty
    };

    let mut best: Option<(f64, Vec<usize>, DVector<f64>)> = None;
    for mask in 1u32..(1u32 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let k = support.len();

        // KKT of min ‖A_S w_S − y‖² s.t. 1ᵀw_S = 1:
        // [2G_SS 1; 1ᵀ 0]·[w_S; ν] = [2c_S; 1]
        let mut kkt = DMatrix::zeros(k + 1, k + 1);
        let mut rhs = DVector::zeros(k + 1);
        for (i, &si) in support.iter().enumerate() {
            for (j, &sj) in support.iter().enumerate() {
                kkt[(i, j)] = 2.0 * gram[(si, sj)];
            }
            kkt[(i, k)] = 1.0;
            kkt[(k, i)] = 1.0;
            rhs[i] = 2.0 * cty[si];
        }
        rhs[k] = 1.0;

        let sol = match kkt.clone().lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                for i in 0..k {
                    kkt[(i, i)] += 2.0 * RIDGE;
                }
                match kkt.lu().solve(&rhs) {
                    Some(s) if s.iter().all(|v| v.is_finite()) => s,
                    _ => continue,
                }
            }
        };

        if (0..k).any(|i| sol[i] < -FEAS_TOL) {
            continue;
        }
        let mut w = DVector::zeros(n);
        for (i, &si) in support.iter().enumerate() {
            w[si] = sol[i].max(0.0);
        }
        let total: f64 = w.sum();
        if total <= 0.0 {
            continue;
        }
        w /= total;

        let obj = objective(&w);
        let better = match &best {
            None => true,
            Some((best_obj, best_support, _)) => {
                let tol = 1e-12 * best_obj.abs().max(1.0);
                if obj < best_obj - tol {
                    true
                } else if obj > best_obj + tol {
                    false
                } else {
                    // tie: larger support, then lexicographically smaller
                    // index set
                    k > best_support.len()
                        || (k == best_support.len() && support < *best_support)
                }
            }
        };
        if better {
            best = Some((obj, support, w));
        }
    }

    // Every single-column support yields the feasible vertex eᵢ, so a best
    // candidate always exists.
    best.expect("at least one feasible support").2
}
