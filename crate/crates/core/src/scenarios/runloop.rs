//! The synchronous control loop: measure, adapt, solve, actuate. The
//! plant integrates at a finer step than the controller and swaps its
//! parameters instantaneously at the shift time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::governor::{governor_step, GovernorState};
use crate::ocp::{transcribe, ModelKind, OcpConfig, OcpProblem, SolveReport};
use crate::specialists::{build_ensemble, SpecialistLibrary};
use crate::vehicle::{rk4_step, ControlInput, VehicleParams, VehicleState};

use super::{make_reference, Scenario, Tier, Track};

/// plant substeps per control period
const PLANT_SUBSTEPS: usize = 10;
/// transient excluded from the pre-shift metric window, s
const WARMUP_TIME: f64 = 2.0;

/// Everything a run needs besides the scenario cell itself.
#[derive(Clone, Debug)]
pub struct RunSetup {
    pub base_params: VehicleParams,
    pub ocp: OcpConfig,
    pub governor_window: usize,
    pub governor_alpha: f64,
}

impl Default for RunSetup {
    fn default() -> Self {
        RunSetup {
            base_params: VehicleParams::default(),
            ocp: OcpConfig::default(),
            governor_window: crate::governor::DEFAULT_WINDOW,
            governor_alpha: crate::governor::DEFAULT_ALPHA,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TraceStep {
    pub t: f64,
    /// true plant state at the start of the step
    pub state: VehicleState,
    /// what the controller saw (noise added in the noisy tier)
    pub measured: VehicleState,
    pub u: [f64; 2],
    /// first horizon reference point
    pub ref0: [f64; 2],
    pub weights: Vec<f64>,
    /// wall-clock reweighting cost, zero on baseline runs
    pub governor_latency: f64,
    pub solve: SolveReport,
    /// solver stopped without meeting the stationarity tolerance
    pub flagged: bool,
}

#[derive(Clone, Debug)]
pub struct RunTrace {
    pub scenario: Scenario,
    pub steps: Vec<TraceStep>,
    pub ts: f64,
}

/// Ensemble NMPC over the library; the per-tier differences live in the
/// library content and the measurement model, not in the controller.
pub fn build_problem(lib: &SpecialistLibrary, cfg: &OcpConfig) -> Result<OcpProblem> {
    let g = build_ensemble(lib)?;
    transcribe(&g, cfg, ModelKind::Ensemble)
}

/// standard normal via Box-Muller; the uniform draw is clamped away from
/// zero so the log stays finite
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn run_closed_loop(
    setup: &RunSetup,
    track: &Track,
    scenario: &Scenario,
    problem: &mut OcpProblem,
    lib: &SpecialistLibrary,
) -> Result<RunTrace> {
    scenario.validate()?;
    let ts = setup.ocp.ts;
    let n_steps = (scenario.duration / ts).round() as usize;
    let shift_step = (scenario.shift_time / ts).round() as usize;
    let nominal = setup.base_params;
    let shifted = scenario.shift.apply(&nominal);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);

    // seeded start: waypoint 0 with lateral, heading, and speed jitter so
    // seeds decorrelate even in noiseless tiers
    let heading = track.segment_heading(0);
    let wp0 = track.centerline[0];
    let lat = rng.gen_range(-0.05..0.05);
    let head_err = rng.gen_range(-0.05..0.05);
    let vx0 = setup.ocp.v_ref * rng.gen_range(0.85..1.05);
    let vy0 = rng.gen_range(-0.02..0.02);
    let om0 = rng.gen_range(-0.2..0.2);
    let mut state = VehicleState {
        x: wp0[0] - lat * heading.sin(),
        y: wp0[1] + lat * heading.cos(),
        psi: heading + head_err,
        vx: vx0,
        vy: vy0,
        omega: om0,
    };

    let mut gov = GovernorState::new(lib.len(), setup.governor_window, ts);
    gov.alpha = setup.governor_alpha;
    // member 0 is the nominal regime by pipeline construction; the frozen
    // baseline pins it
    let mut baseline_w = vec![0.0; lib.len()];
    baseline_w[0] = 1.0;

    let mut warm: Option<Vec<f64>> = None;
    let mut prev_measured: Option<VehicleState> = None;
    let mut prev_u = ControlInput { delta: 0.0, d: 0.0 };
    let mut steps: Vec<TraceStep> = Vec::with_capacity(n_steps);

    for k in 0..n_steps {
        let t = k as f64 * ts;

        let mut measured = state;
        if scenario.tier == Tier::NoisyOde && scenario.noise_sigma > 0.0 {
            let s = scenario.noise_sigma;
            measured.x += s * gauss(&mut rng);
            measured.y += s * gauss(&mut rng);
            measured.psi += s * gauss(&mut rng);
            measured.vx += s * gauss(&mut rng);
            measured.vy += s * gauss(&mut rng);
            measured.omega += s * gauss(&mut rng);
        }

        let mut latency = 0.0;
        if scenario.adaptive {
            if let Some(prev) = prev_measured {
                latency = governor_step(&mut gov, measured, prev, prev_u, lib, false);
            }
        }
        let w = if scenario.adaptive {
            gov.w_smooth.clone()
        } else {
            baseline_w.clone()
        };

        let refs = make_reference(track, &measured, &setup.ocp);
        let rep = problem
            .solve(&measured, &refs, Some(&w), warm.as_deref())
            .map_err(|e| CoreError::Optim(format!("hard solver failure at step {k}: {e}")))?;
        let u = rep.u_star[0];
        let flagged = !rep.converged;

        let p_now = if k >= shift_step { &shifted } else { &nominal };
        let mut xa = state.to_array();
        for _ in 0..PLANT_SUBSTEPS {
            xa = rk4_step(&xa, &u, p_now, ts / PLANT_SUBSTEPS as f64);
        }
        if !xa.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Optim(format!(
                "plant state left the finite domain at t={t:.2}s (step {k})"
            )));
        }

        warm = Some(rep.flat_controls());
        prev_measured = Some(measured);
        prev_u = ControlInput {
            delta: u[0],
            d: u[1],
        };
        steps.push(TraceStep {
            t,
            state,
            measured,
            u,
            ref0: refs[0],
            weights: w,
            governor_latency: latency,
            solve: rep,
            flagged,
        });
        state = VehicleState::from_array(xa);
    }

    Ok(RunTrace {
        scenario: scenario.clone(),
        steps,
        ts,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WindowRmse {
    pub vx: f64,
    pub vy: f64,
    pub pos: f64,
}

#[derive(Clone, Debug)]
pub struct RunMetrics {
    pub pre: WindowRmse,
    pub post: WindowRmse,
    /// percent, per (vx, vy, pos), against the tier-1 pre-shift baseline
    pub degradation: Option<[f64; 3]>,
    /// percent, per (vx, vy, pos), against the paired frozen run
    pub mitigation: Option<[f64; 3]>,
    pub weight_trace: Vec<Vec<f64>>,
    pub latency_trace: Vec<f64>,
    pub flagged_steps: usize,
}

/// δ = 100 · (post − pre_base) / |pre_base|
pub fn degradation_pct(post: f64, pre_base: f64) -> f64 {
    100.0 * (post - pre_base) / pre_base.abs()
}

/// μ = 100 · (δ_base − δ_adapt) / |δ_base|
pub fn mitigation_pct(delta_base: f64, delta_adapt: f64) -> f64 {
    100.0 * (delta_base - delta_adapt) / delta_base.abs()
}

/// Windowed tracking errors. Speed errors are measured against the
/// constant reference speed, position error as the distance to the
/// centerline, all on the true plant state. Empty windows yield NaN.
pub fn compute_metrics(trace: &RunTrace, track: &Track, v_ref: f64) -> RunMetrics {
    let shift_time = trace.scenario.shift_time;
    let mut acc = [[0.0f64; 3]; 2];
    let mut count = [0usize; 2];
    for step in &trace.steps {
        let window = if step.t >= shift_time {
            1
        } else if step.t >= WARMUP_TIME {
            0
        } else {
            continue;
        };
        let (_, d) = track.project([step.state.x, step.state.y]);
        let e_vx = step.state.vx - v_ref;
        let e_vy = step.state.vy;
        acc[window][0] += e_vx * e_vx;
        acc[window][1] += e_vy * e_vy;
        acc[window][2] += d * d;
        count[window] += 1;
    }
    let rmse = |a: [f64; 3], n: usize| {
        if n == 0 {
            WindowRmse {
                vx: f64::NAN,
                vy: f64::NAN,
                pos: f64::NAN,
            }
        } else {
            WindowRmse {
                vx: (a[0] / n as f64).sqrt(),
                vy: (a[1] / n as f64).sqrt(),
                pos: (a[2] / n as f64).sqrt(),
            }
        }
    };
    RunMetrics {
        pre: rmse(acc[0], count[0]),
        post: rmse(acc[1], count[1]),
        degradation: None,
        mitigation: None,
        weight_trace: trace.steps.iter().map(|s| s.weights.clone()).collect(),
        latency_trace: trace.steps.iter().map(|s| s.governor_latency).collect(),
        flagged_steps: trace.steps.iter().filter(|s| s.flagged).count(),
    }
}

impl RunMetrics {
    /// Standardize degradation to a tier-1 pre-shift baseline.
    pub fn standardize(&mut self, pre_base: &WindowRmse) {
        self.degradation = Some([
            degradation_pct(self.post.vx, pre_base.vx),
            degradation_pct(self.post.vy, pre_base.vy),
            degradation_pct(self.post.pos, pre_base.pos),
        ]);
    }

    /// Mitigation against the paired run differing only in the adaptive
    /// flag. Both runs must already be standardized.
    pub fn pair_with_baseline(&mut self, baseline: &RunMetrics) -> Result<()> {
        let (da, db) = match (self.degradation, baseline.degradation) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(CoreError::Invalid(
                    "mitigation needs standardized degradation on both runs".into(),
                ))
            }
        };
        self.mitigation = Some([
            mitigation_pct(db[0], da[0]),
            mitigation_pct(db[1], da[1]),
            mitigation_pct(db[2], da[2]),
        ]);
        Ok(())
    }
}
