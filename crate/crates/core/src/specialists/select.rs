//! Greedy worst-case library selection.
//!
//! Starting from the nominal regime as reference, repeatedly add the
//! candidate whose true dynamics are worst approximated by any convex
//! combination of the regimes already in the library. The nominal seed is
//! reference only; it enters the returned selection solely by winning a
//! (zero-residual) round itself.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::optim::solve_simplex_lsq;
use crate::vehicle::{continuous_dynamics, VehicleParams};

use super::SpecialistLibrary;

/// Stacked dynamic-row responses (vẋ, vẏ, ω̇) of one regime over all
/// probe states.
fn response(p: &VehicleParams, states: &[([f64; 6], [f64; 2])]) -> DVector<f64> {
    let mut out = DVector::zeros(states.len() * 3);
    for (i, (x, u)) in states.iter().enumerate() {
        let dx = continuous_dynamics(x, u, p);
        out[3 * i] = dx[3];
        out[3 * i + 1] = dx[4];
        out[3 * i + 2] = dx[5];
    }
    out
}

/// Mean-squared residual of the best convex approximation of `target` by
/// the member columns.
fn hull_residual(members: &DMatrix<f64>, target: &DVector<f64>) -> f64 {
    let w = solve_simplex_lsq(members, target);
    (members * w - target).norm_squared() / target.len() as f64
}

/// Indices of the `n` candidates picked by the greedy loop, in selection
/// order. Ties go to the lowest index.
pub fn select_regimes(
    candidates: &[(VehicleParams, String)],
    nominal_idx: usize,
    n: usize,
    val_states: &[([f64; 6], [f64; 2])],
) -> Result<Vec<usize>> {
    if n > candidates.len() {
        return Err(CoreError::Invalid(format!(
            "cannot select {n} from {} candidates",
            candidates.len()
        )));
    }
    if nominal_idx >= candidates.len() {
        return Err(CoreError::Invalid("nominal index out of range".into()));
    }
    if val_states.is_empty() {
        return Err(CoreError::Invalid("selection needs probe states".into()));
    }

    let responses: Vec<DVector<f64>> = candidates
        .iter()
        .map(|(p, _)| response(p, val_states))
        .collect();
    let rows = val_states.len() * 3;

    let mut selected: Vec<usize> = Vec::with_capacity(n);
    while selected.len() < n {
        // reference hull: nominal plus everything selected so far
        let mut member_idx = vec![nominal_idx];
        member_idx.extend(selected.iter().copied().filter(|&i| i != nominal_idx));
        let mut members = DMatrix::zeros(rows, member_idx.len());
        for (c, &i) in member_idx.iter().enumerate() {
            members.set_column(c, &responses[i]);
        }

        let mut best: Option<(usize, f64)> = None;
        for (j, resp) in responses.iter().enumerate() {
            if selected.contains(&j) {
                continue;
            }
            let r = hull_residual(&members, resp);
            match best {
                Some((_, rb)) if r <= rb => {}
                _ => best = Some((j, r)),
            }
        }
        selected.push(best.expect("candidates remain").0);
    }
    Ok(selected)
}

/// Greedy selection packaged as a white-box library over the chosen
/// regimes.
pub fn select_library(
    candidates: &[(VehicleParams, String)],
    nominal_idx: usize,
    n: usize,
    val_states: &[([f64; 6], [f64; 2])],
) -> Result<SpecialistLibrary> {
    let picks = select_regimes(candidates, nominal_idx, n, val_states)?;
    let regimes: Vec<(VehicleParams, String)> =
        picks.iter().map(|&i| candidates[i].clone()).collect();
    SpecialistLibrary::from_regimes(&regimes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::{make_regime, RegimeShift};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mu_regime(base: &VehicleParams, mu: f64) -> VehicleParams {
        make_regime(
            base,
            &RegimeShift {
                mu_scale: Some(mu),
                ..RegimeShift::default()
            },
        )
    }

    fn probe_states(n: usize, seed: u64) -> Vec<([f64; 6], [f64; 2])> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (
                    [
                        0.0,
                        0.0,
                        0.0,
                        rng.gen_range(0.3..2.5),
                        rng.gen_range(-0.4..0.4),
                        rng.gen_range(-4.0..4.0),
                    ],
                    [rng.gen_range(-0.35..0.35), rng.gen_range(-0.5..1.0)],
                )
            })
            .collect()
    }

    fn friction_sweep() -> Vec<(VehicleParams, String)> {
        let base = VehicleParams::default();
        [0.5, 0.75, 1.0, 1.25]
            .iter()
            .map(|&mu| (mu_regime(&base, mu), format!("mu{mu}")))
            .collect()
    }

    /// Brute force: the pair whose hull (with the nominal reference) has
    /// the smallest worst-case residual over all candidates.
    fn best_pair_by_exhaustion(
        candidates: &[(VehicleParams, String)],
        nominal_idx: usize,
        states: &[([f64; 6], [f64; 2])],
    ) -> Vec<usize> {
        let responses: Vec<DVector<f64>> =
            candidates.iter().map(|(p, _)| response(p, states)).collect();
        let rows = states.len() * 3;
        let mut best: Option<(Vec<usize>, f64)> = None;
        for i in 0..candidates.len() {
            for j in i + 1..candidates.len() {
                let mut idx = vec![nominal_idx];
                idx.extend([i, j].iter().copied().filter(|&k| k != nominal_idx));
                let mut members = DMatrix::zeros(rows, idx.len());
                for (c, &k) in idx.iter().enumerate() {
                    members.set_column(c, &responses[k]);
                }
                let worst = responses
                    .iter()
                    .map(|r| hull_residual(&members, r))
                    .fold(0.0f64, f64::max);
                if best.as_ref().map_or(true, |(_, w)| worst < *w) {
                    best = Some((vec![i, j], worst));
                }
            }
        }
        best.unwrap().0
    }

    #[test]
    fn friction_sweep_selects_extreme_pair() {
        let candidates = friction_sweep();
        let states = probe_states(40, 7);
        let mut got = select_regimes(&candidates, 2, 2, &states).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![0, 3], "greedy should pick the friction extremes");

        let mut oracle = best_pair_by_exhaustion(&candidates, 2, &states);
        oracle.sort_unstable();
        assert_eq!(got, oracle, "greedy disagrees with exhaustive search");
    }

    #[test]
    fn selecting_all_returns_every_candidate() {
        let candidates = friction_sweep();
        let states = probe_states(25, 3);
        let mut got = select_regimes(&candidates, 2, 4, &states).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn duplicate_candidate_waits_behind_distinct_ones() {
        let base = VehicleParams::default();
        let candidates = vec![
            (base, "nominal".to_string()),
            (mu_regime(&base, 0.5), "lo".to_string()),
            (mu_regime(&base, 0.5), "lo2".to_string()),
            (mu_regime(&base, 1.25), "hi".to_string()),
        ];
        let states = probe_states(30, 11);
        let got = select_regimes(&candidates, 0, 3, &states).unwrap();
        assert!(!got.contains(&2), "duplicate selected: {got:?}");
        let first_two: Vec<usize> = {
            let mut v = got[0..2].to_vec();
            v.sort_unstable();
            v
        };
        assert_eq!(first_two, vec![1, 3]);
    }

    #[test]
    fn library_wrapper_builds_ode_members() {
        let candidates = friction_sweep();
        let states = probe_states(20, 1);
        let lib = select_library(&candidates, 2, 2, &states).unwrap();
        assert_eq!(lib.len(), 2);
        let tags: Vec<&str> = lib.members.iter().map(|m| m.tag()).collect();
        assert!(tags.contains(&"mu0.5") && tags.contains(&"mu1.25"), "{tags:?}");
    }

    #[test]
    fn rejects_oversized_request_and_empty_probes() {
        let candidates = friction_sweep();
        assert!(select_regimes(&candidates, 0, 5, &probe_states(5, 0)).is_err());
        assert!(select_regimes(&candidates, 0, 2, &[]).is_err());
    }
}
