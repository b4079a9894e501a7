//! Timing comparisons between the parametric and ensemble controllers.
//! Solves are driven by a real closed loop so the warm-start chains and
//! active sets look like production, not like repeated cold solves of
//! one frozen problem.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::governor::{governor_step, GovernorState, DEFAULT_WINDOW};
use crate::ocp::{rebuild_jit_baseline, transcribe, ModelKind, OcpConfig};
use crate::specialists::SpecialistLibrary;
use crate::vehicle::{build_parametric_graph, rk4_step, ControlInput, VehicleParams, VehicleState};

use super::runloop::build_problem;
use super::{make_reference, ShiftKind, Track};

/// warm-up solves excluded from every timing statistic
const WARMUP_SOLVES: usize = 5;
const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Clone, Copy, Debug, Default)]
pub struct TimingStats {
    pub median: f64,
    pub p95: f64,
    /// bootstrap 95% interval for the median
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub n_solves: usize,
    pub parametric_build: f64,
    pub ensemble_build: f64,
    pub parametric_nodes: usize,
    pub ensemble_nodes: usize,
    pub parametric_density: f64,
    pub ensemble_density: f64,
    pub parametric_solve: TimingStats,
    pub ensemble_solve: TimingStats,
    /// median per-solve fractions of ensemble solve time
    pub derivative_share: f64,
    pub linear_share: f64,
    pub line_search_share: f64,
    pub governor: TimingStats,
    /// median in-place coefficient write on the parametric problem
    pub update_median: f64,
    /// median rebuild of a baked single-regime problem
    pub rebuild_median: f64,
    /// ensemble median / parametric median
    pub solve_ratio: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    assert!(n > 0);
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0);
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// 95% bootstrap interval for the median, seeded for reproducibility
pub(crate) fn bootstrap_median_ci(samples: &[f64], rng: &mut ChaCha8Rng) -> (f64, f64) {
    let n = samples.len();
    assert!(n > 1);
    let mut medians = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut resample = vec![0.0; n];
    for _ in 0..BOOTSTRAP_RESAMPLES {
        for slot in resample.iter_mut() {
            *slot = samples[rng.gen_range(0..n)];
        }
        resample.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push(median(&resample));
    }
    medians.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (percentile(&medians, 0.025), percentile(&medians, 0.975))
}

fn stats(mut samples: Vec<f64>, rng: &mut ChaCha8Rng) -> TimingStats {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (ci_lo, ci_hi) = bootstrap_median_ci(&samples, rng);
    TimingStats {
        median: median(&samples),
        p95: percentile(&samples, 0.95),
        ci_lo,
        ci_hi,
    }
}

/// Drives one closed loop with the parametric controller while solving
/// the ensemble problem at the same states, then times the secondary
/// operations (governor reweighting, coefficient writes, baked rebuilds).
pub fn run_phase1_benchmarks(
    lib: &SpecialistLibrary,
    base: &VehicleParams,
    cfg: &OcpConfig,
    track: &Track,
    n_solves: usize,
    seed: u64,
) -> Result<BenchReport> {
    if n_solves < 20 {
        return Err(CoreError::Invalid("benchmark needs at least 20 solves".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let model = build_parametric_graph();
    let mut parametric = transcribe(&model, cfg, ModelKind::Parametric)?;
    parametric.update_params(base)?;
    let mut ensemble = build_problem(lib, cfg)?;

    let n_total = n_solves + WARMUP_SOLVES;
    let shift_step = n_total / 2;
    let shifted = ShiftKind::BenchmarkFrictionUp.apply(base);

    let heading = track.segment_heading(0);
    let wp0 = track.centerline[0];
    let mut state = VehicleState {
        x: wp0[0],
        y: wp0[1],
        psi: heading,
        vx: cfg.v_ref,
        vy: 0.0,
        omega: 0.0,
    };
    let mut gov = GovernorState::new(lib.len(), DEFAULT_WINDOW, cfg.ts);
    let mut prev: Option<(VehicleState, ControlInput)> = None;

    let mut par_times = Vec::with_capacity(n_solves);
    let mut ens_times = Vec::with_capacity(n_solves);
    let mut shares = [Vec::new(), Vec::new(), Vec::new()];
    let mut gov_times = Vec::new();
    let mut warm_par: Option<Vec<f64>> = None;
    let mut warm_ens: Option<Vec<f64>> = None;

    for k in 0..n_total {
        let mut latency = 0.0;
        if let Some((xp, up)) = prev {
            latency = governor_step(&mut gov, state, xp, up, lib, false);
        }
        let refs = make_reference(track, &state, cfg);

        let rp = parametric.solve(&state, &refs, None, warm_par.as_deref())?;
        let re = ensemble.solve(&state, &refs, Some(&gov.w_smooth), warm_ens.as_deref())?;
        warm_par = Some(rp.flat_controls());
        warm_ens = Some(re.flat_controls());

        if k >= WARMUP_SOLVES {
            par_times.push(rp.timing.total);
            ens_times.push(re.timing.total);
            if re.timing.total > 0.0 {
                shares[0].push(re.timing.derivative_eval / re.timing.total);
                shares[1].push(re.timing.linear_solve / re.timing.total);
                shares[2].push(re.timing.line_search / re.timing.total);
            }
            if k >= shift_step {
                gov_times.push(latency);
            }
        }

        let u = rp.u_star[0];
        let p_now = if k >= shift_step { &shifted } else { base };
        let mut xa = state.to_array();
        for _ in 0..10 {
            xa = rk4_step(&xa, &u, p_now, cfg.ts / 10.0);
        }
        if !xa.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Optim(format!("benchmark plant diverged at step {k}")));
        }
        prev = Some((state, ControlInput { delta: u[0], d: u[1] }));
        state = VehicleState::from_array(xa);
    }
    // warm-up trimming keeps the first governor windows out too; the
    // remaining samples all come from full windows
    gov_times.retain(|t| *t > 0.0);
    if gov_times.len() < 10 {
        return Err(CoreError::Invalid(
            "too few governor samples; increase the solve count".into(),
        ));
    }

    // in-place coefficient write, median of 100 alternating updates
    let mut update_times = Vec::with_capacity(100);
    for i in 0..100 {
        let p = if i % 2 == 0 { &shifted } else { base };
        let t0 = Instant::now();
        parametric.update_params(p)?;
        update_times.push(t0.elapsed().as_secs_f64());
    }
    parametric.update_params(base)?;
    update_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let update_median = median(&update_times);

    // full rebuild of a baked problem, median of 3
    let mut rebuild_times = Vec::with_capacity(3);
    for i in 0..3 {
        let p = if i % 2 == 0 { &shifted } else { base };
        let (_, secs) = rebuild_jit_baseline(p, cfg)?;
        rebuild_times.push(secs);
    }
    rebuild_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rebuild_median = median(&rebuild_times);

    let share_median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        median(v)
    };
    let parametric_solve = stats(par_times, &mut rng);
    let ensemble_solve = stats(ens_times, &mut rng);
    let governor = stats(gov_times, &mut rng);

    Ok(BenchReport {
        n_solves,
        parametric_build: parametric.build_time(),
        ensemble_build: ensemble.build_time(),
        parametric_nodes: parametric.node_count(),
        ensemble_nodes: ensemble.node_count(),
        parametric_density: parametric.jacobian_density(),
        ensemble_density: ensemble.jacobian_density(),
        solve_ratio: ensemble_solve.median / parametric_solve.median,
        parametric_solve,
        ensemble_solve,
        derivative_share: share_median(&mut shares[0]),
        linear_share: share_median(&mut shares[1]),
        line_search_share: share_median(&mut shares[2]),
        governor,
        update_median,
        rebuild_median,
    })
}

impl BenchReport {
    /// Flat key/value rows for CSV output.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut r = vec![
            ("n_solves".into(), self.n_solves as f64),
            ("parametric_build_s".into(), self.parametric_build),
            ("ensemble_build_s".into(), self.ensemble_build),
            ("parametric_nodes".into(), self.parametric_nodes as f64),
            ("ensemble_nodes".into(), self.ensemble_nodes as f64),
            ("parametric_density".into(), self.parametric_density),
            ("ensemble_density".into(), self.ensemble_density),
        ];
        let push_stats = |r: &mut Vec<(String, f64)>, name: &str, s: &TimingStats| {
            r.push((format!("{name}_median_s"), s.median));
            r.push((format!("{name}_p95_s"), s.p95));
            r.push((format!("{name}_ci_lo_s"), s.ci_lo));
            r.push((format!("{name}_ci_hi_s"), s.ci_hi));
        };
        push_stats(&mut r, "parametric_solve", &self.parametric_solve);
        push_stats(&mut r, "ensemble_solve", &self.ensemble_solve);
        push_stats(&mut r, "governor", &self.governor);
        r.push(("derivative_share".into(), self.derivative_share));
        r.push(("linear_share".into(), self.linear_share));
        r.push(("line_search_share".into(), self.line_search_share));
        r.push(("update_median_s".into(), self.update_median));
        r.push(("rebuild_median_s".into(), self.rebuild_median));
        r.push(("solve_ratio".into(), self.solve_ratio));
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::regime_library;

    #[test]
    fn bootstrap_interval_brackets_the_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..101).map(|i| 1.0 + 0.01 * i as f64).collect();
        let (lo, hi) = bootstrap_median_ci(&samples, &mut rng);
        let med = 1.5;
        assert!(lo <= med && med <= hi, "[{lo}, {hi}] misses {med}");
        assert!(lo < hi);
        assert!(hi - lo < 0.3, "implausibly wide interval");
    }

    #[test]
    fn mini_benchmark_is_internally_consistent() {
        let base = VehicleParams::default();
        let lib = regime_library(&base, 2).unwrap();
        let track = Track::stadium(1.2, 0.4, 0.02).unwrap();
        let cfg = OcpConfig::default();
        let rep = run_phase1_benchmarks(&lib, &base, &cfg, &track, 40, 9).unwrap();

        assert!(rep.parametric_solve.median > 0.0);
        assert!(rep.ensemble_solve.median > 0.0);
        assert!(rep.ensemble_nodes > rep.parametric_nodes);
        assert!(rep.parametric_solve.ci_lo <= rep.parametric_solve.median);
        assert!(rep.parametric_solve.median <= rep.parametric_solve.ci_hi);
        assert!(rep.governor.p95 >= rep.governor.median);
        let share_sum = rep.derivative_share + rep.linear_share + rep.line_search_share;
        assert!(rep.derivative_share > 0.0 && rep.derivative_share < 1.0);
        assert!(share_sum <= 1.0 + 1e-9, "shares sum to {share_sum}");
        assert!(rep.update_median > 0.0);
        assert!(rep.rebuild_median > rep.update_median);
        assert!(rep.solve_ratio > 0.0);
        assert_eq!(rep.rows().len(), 25);
    }
}
