//! Closed-loop experiment harness: procedural track, geometric reference
//! generation, regime-shift scheduling, tier configuration, metric
//! computation, and the latency benchmark drivers.
//!
//! Simulated time is synchronous: the virtual clock advances by Ts per
//! control step no matter how long a solve takes, so every trajectory is a
//! pure function of (scenario, seed, configs). Wall-clock measurements are
//! recorded on the side and never feed back into the simulation.

mod bench;
mod cli;
mod runloop;

pub use bench::{run_phase1_benchmarks, BenchReport, TimingStats};
pub use cli::cli_main;
pub use runloop::{
    build_problem, compute_metrics, degradation_pct, mitigation_pct, run_closed_loop, RunMetrics,
    RunSetup, RunTrace, TraceStep, WindowRmse,
};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::ocp::OcpConfig;
use crate::specialists::{
    candidate_regime_grid, generate_dataset, nominal_candidate_index, select_regimes,
    DatasetConfig, SpecialistLibrary,
};
use crate::vehicle::{make_regime, RegimeShift, VehicleParams, VehicleState};

/// Closed waypoint loop with cumulative arclength. The segment after the
/// last waypoint wraps back to the first.
#[derive(Clone, Debug)]
pub struct Track {
    pub centerline: Vec<[f64; 2]>,
    /// arclength at each waypoint; starts at 0, strictly increasing
    pub cum_arclength: Vec<f64>,
    total: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
}

impl Track {
    pub fn new(centerline: Vec<[f64; 2]>) -> Result<Self> {
        if centerline.len() < 3 {
            return Err(CoreError::Invalid(format!(
                "track needs at least 3 waypoints, got {}",
                centerline.len()
            )));
        }
        let n = centerline.len();
        let mut cum = Vec::with_capacity(n);
        let mut s = 0.0;
        for i in 0..n {
            cum.push(s);
            let step = dist(centerline[i], centerline[(i + 1) % n]);
            if step <= 1e-12 {
                return Err(CoreError::Invalid(format!(
                    "waypoints {i} and {} coincide",
                    (i + 1) % n
                )));
            }
            s += step;
        }
        Ok(Track {
            centerline,
            cum_arclength: cum,
            total: s,
        })
    }

    /// Two straights joined by half-circle arcs, traversed
    /// counterclockwise, sampled at roughly `ds` spacing. Tight radii make
    /// the geometric reference violate friction limits in low-grip
    /// regimes, which is the stress the shift experiments rely on.
    pub fn stadium(straight: f64, radius: f64, ds: f64) -> Result<Self> {
        if !(straight > 0.0) || !(radius > 0.0) || !(ds > 0.0) {
            return Err(CoreError::Invalid(
                "stadium dimensions must be positive".into(),
            ));
        }
        let mut pts: Vec<[f64; 2]> = Vec::new();
        let n_straight = (straight / ds).ceil().max(1.0) as usize;
        let n_arc = (std::f64::consts::PI * radius / ds).ceil().max(2.0) as usize;

        for i in 0..n_straight {
            let t = i as f64 / n_straight as f64;
            pts.push([straight * t, 0.0]);
        }
        for i in 0..n_arc {
            let th = -std::f64::consts::FRAC_PI_2
                + std::f64::consts::PI * i as f64 / n_arc as f64;
            pts.push([straight + radius * th.cos(), radius + radius * th.sin()]);
        }
        for i in 0..n_straight {
            let t = i as f64 / n_straight as f64;
            pts.push([straight * (1.0 - t), 2.0 * radius]);
        }
        for i in 0..n_arc {
            let th = std::f64::consts::FRAC_PI_2
                + std::f64::consts::PI * i as f64 / n_arc as f64;
            pts.push([radius * th.cos(), radius + radius * th.sin()]);
        }
        Track::new(pts)
    }

    pub fn total_arclength(&self) -> f64 {
        self.total
    }

    /// Interpolated point at arclength `s` (wrapped into [0, total)).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let s = s.rem_euclid(self.total);
        let n = self.centerline.len();
        // last cum entry <= s
        let i = match self
            .cum_arclength
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let a = self.centerline[i];
        let b = self.centerline[(i + 1) % n];
        let seg = dist(a, b);
        let t = (s - self.cum_arclength[i]) / seg;
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    /// Arclength of the closest centerline point to `q`, and the distance
    /// to it. Equidistant segments resolve to the lower index.
    pub fn project(&self, q: [f64; 2]) -> (f64, f64) {
        let n = self.centerline.len();
        let mut best = (0.0, f64::INFINITY);
        for i in 0..n {
            let a = self.centerline[i];
            let b = self.centerline[(i + 1) % n];
            let ab = [b[0] - a[0], b[1] - a[1]];
            let seg2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = (((q[0] - a[0]) * ab[0] + (q[1] - a[1]) * ab[1]) / seg2).clamp(0.0, 1.0);
            let p = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d = dist(q, p);
            if d < best.1 {
                best = (self.cum_arclength[i] + t * seg2.sqrt(), d);
            }
        }
        best
    }

    /// Heading of the segment starting at waypoint `i`.
    pub fn segment_heading(&self, i: usize) -> f64 {
        let n = self.centerline.len();
        let a = self.centerline[i % n];
        let b = self.centerline[(i + 1) % n];
        (b[1] - a[1]).atan2(b[0] - a[0])
    }
}

/// Project the vehicle onto the centerline, then advance by k·v_ref·Ts of
/// arclength for each horizon step. The reference ignores friction limits
/// by construction.
pub fn make_reference(track: &Track, x: &VehicleState, cfg: &OcpConfig) -> Vec<[f64; 2]> {
    let (s0, _) = track.project([x.x, x.y]);
    (1..=cfg.h)
        .map(|k| track.point_at(s0 + k as f64 * cfg.v_ref * cfg.ts))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    /// exact parametric dynamics of each regime wrapped as specialists
    IdealOde,
    /// ideal specialists, Gaussian measurement noise
    NoisyOde,
    /// neural specialists frozen after the gradient phase only
    PinnAdam,
    /// neural specialists refined by the second-order phase
    PinnHybrid,
}

impl Tier {
    pub fn name(self) -> &'static str {
        match self {
            Tier::IdealOde => "ideal_ode",
            Tier::NoisyOde => "noisy_ode",
            Tier::PinnAdam => "pinn_adam",
            Tier::PinnHybrid => "pinn_hybrid",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    /// wet track
    FrictionOnly,
    /// fleet heterogeneity: low grip, heavier, draggier
    AllParams,
    /// grip increase used by the latency benchmarks
    BenchmarkFrictionUp,
}

impl ShiftKind {
    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::None => "none",
            ShiftKind::FrictionOnly => "friction_only",
            ShiftKind::AllParams => "all_params",
            ShiftKind::BenchmarkFrictionUp => "benchmark_friction_up",
        }
    }

    pub fn apply(self, base: &VehicleParams) -> VehicleParams {
        let shift = match self {
            ShiftKind::None => RegimeShift::default(),
            ShiftKind::FrictionOnly => RegimeShift {
                mu_scale: Some(0.5),
                ..RegimeShift::default()
            },
            ShiftKind::AllParams => RegimeShift {
                mu_scale: Some(0.5),
                mass_factor: Some(1.2),
                drag_factor: Some(1.4),
            },
            ShiftKind::BenchmarkFrictionUp => RegimeShift {
                mu_scale: Some(1.25),
                ..RegimeShift::default()
            },
        };
        make_regime(base, &shift)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub tier: Tier,
    pub shift: ShiftKind,
    pub shift_time: f64,
    pub duration: f64,
    /// weight adaptation on; off pins the nominal specialist
    pub adaptive: bool,
    pub seed: u64,
    /// measurement noise level for the noisy tier
    pub noise_sigma: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            tier: Tier::IdealOde,
            shift: ShiftKind::FrictionOnly,
            shift_time: 10.0,
            duration: 20.0,
            adaptive: true,
            seed: 0,
            noise_sigma: 0.05,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(CoreError::Invalid(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if !(self.shift_time < self.duration) || !(self.shift_time >= 0.0) {
            return Err(CoreError::Invalid(format!(
                "shift_time {} must lie in [0, duration {})",
                self.shift_time, self.duration
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(CoreError::Invalid(format!(
                "noise sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// compact cell label used for run directories and CSV rows
    pub fn label(&self) -> String {
        format!(
            "{}_{}_{}_s{}",
            self.tier.name(),
            self.shift.name(),
            if self.adaptive { "adaptive" } else { "baseline" },
            self.seed
        )
    }
}

/// The regimes every experiment draws on: the nominal model plus greedy
/// hull-coverage picks from the candidate grid. Member 0 is always the
/// nominal regime; the frozen baseline pins its weight there.
pub fn experiment_regimes(base: &VehicleParams, n: usize) -> Result<Vec<(VehicleParams, String)>> {
    if n < 2 {
        return Err(CoreError::Invalid(format!(
            "need at least 2 regimes, got {n}"
        )));
    }
    let grid = candidate_regime_grid(base);
    let nominal_idx = nominal_candidate_index(base);
    let probe = generate_dataset(base, 120, 0, 1, &DatasetConfig::default());
    let states: Vec<([f64; 6], [f64; 2])> =
        (0..probe.len()).map(|i| probe.state_of_row(i)).collect();
    let picks = select_regimes(&grid, nominal_idx, n - 1, &states)?;
    let mut regimes = vec![grid[nominal_idx].clone()];
    for i in picks {
        if i != nominal_idx {
            regimes.push(grid[i].clone());
        }
    }
    Ok(regimes)
}

/// First-principles specialist library over the experiment regimes,
/// the ideal/noisy tier model set.
pub fn regime_library(base: &VehicleParams, n: usize) -> Result<SpecialistLibrary> {
    SpecialistLibrary::from_regimes(&experiment_regimes(base, n)?)
}
