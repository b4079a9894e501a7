//! Synthetic training data for one regime: settled steady-cornering states
//! with transverse jitter, plus chirp trajectories that drive the plant into
//! high-slip corners the settled rows rarely reach.
//!
//! Stored rows are pose-normalized: the implied full state is
//! (0, 0, 0, vx, vy, omega), so the kinematic derivative rows reduce to
//! (vx, vy, omega) and stay learnable from the 5 pose-invariant inputs.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::vehicle::{continuous_dynamics, rk4_step, VehicleParams};

use super::{NET_INPUTS, NET_OUTPUTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Input rows are (vx, vy, omega, delta, D); target rows are the exact
/// continuous-time derivatives under the generating regime.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub split: Vec<Split>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Full pose-normalized state implied by an input row.
    pub fn state_of_row(&self, i: usize) -> ([f64; 6], [f64; 2]) {
        let r = self.inputs.row(i);
        ([0.0, 0.0, 0.0, r[0], r[1], r[2]], [r[3], r[4]])
    }
}

/// Sampling envelope and excitation schedule.
///
/// Coverage rows come from perturbed cornering sweeps rather than a plain
/// (vy, omega) box: a box either misses real cornering states (steady yaw
/// rate at full steering sits far above any box that still excludes spin
/// states) or is so large that desk-scale sample counts cannot pin the net
/// down inside it. Each sweep settles the plant to a steady cornering
/// state for a sampled (vx, delta), then records at the control rate while
/// steering and throttle execute a bounded random walk, so the states wander
/// through the tube around the manifold that closed-loop transients visit
/// while staying dynamically consistent.
#[derive(Clone, Debug)]
pub struct DatasetConfig {
    /// sweep entry speeds; also the lower validity bound for recorded vx
    pub vx_range: (f64, f64),
    /// validity bounds for recorded transverse states on sweep rows;
    /// chirp rows are bounded by the slip caps alone
    pub vy_range: (f64, f64),
    pub omega_range: (f64, f64),
    pub delta_range: (f64, f64),
    pub d_range: (f64, f64),
    /// plant settle time toward the steady cornering state, s
    pub settle_time: f64,
    /// fraction of the friction budget steady sampling may demand
    pub lat_accel_frac: f64,
    /// rows recorded per sweep (one per control period)
    pub sweep_samples: usize,
    /// steering random-walk half-width around the settled steering
    pub delta_jitter: f64,
    /// throttle random-walk half-width around the speed-holding throttle
    pub d_walk: f64,
    /// samples kept per chirp trajectory (one per control period)
    pub chirp_samples: usize,
    /// chirp length in seconds
    pub chirp_duration: f64,
    /// sweep start/end frequency bounds, Hz
    pub f0_range: (f64, f64),
    pub f1_range: (f64, f64),
    /// steering amplitude bounds, rad
    pub amp_range: (f64, f64),
    /// recorded rows must keep both axle slip angles inside this bound
    /// (rad); beyond it the tire model has no validity and the chirps
    /// would no longer be the high-slip subset
    pub slip_cap: f64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            vx_range: (0.3, 2.8),
            vy_range: (-0.5, 0.5),
            omega_range: (-8.0, 8.0),
            delta_range: (-0.4, 0.4),
            d_range: (-1.0, 1.0),
            settle_time: 0.6,
            lat_accel_frac: 0.85,
            sweep_samples: 30,
            delta_jitter: 0.12,
            d_walk: 0.35,
            chirp_samples: 150,
            chirp_duration: 3.0,
            f0_range: (0.3, 0.8),
            f1_range: (1.5, 3.5),
            amp_range: (0.25, 0.42),
            slip_cap: 0.35,
            train_frac: 0.7,
            val_frac: 0.15,
        }
    }
}

/// Generate `n_uniform` cornering-sweep samples plus `n_chirp_trajs`
/// swept-steering plant trajectories under regime `p`. Deterministic given
/// the seed.
pub fn generate_dataset(
    p: &VehicleParams,
    n_uniform: usize,
    n_chirp_trajs: usize,
    seed: u64,
    cfg: &DatasetConfig,
) -> TrainingSet {
    assert!(n_uniform > 0, "sweep sample count must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<[f64; NET_INPUTS]> = Vec::new();

    let dt_plant = 0.002;
    let sample_every = 10;
    let settle_steps = (cfg.settle_time / dt_plant).round() as usize;
    // lateral capacity of the regime: peak axle force over weight
    let mu_eff = p.mu_scale * (p.df + p.dr) / (p.m * 9.81);
    let wheelbase = p.lf + p.lr;

    let mut sweeps = 0usize;
    while rows.len() < n_uniform {
        sweeps += 1;
        assert!(
            sweeps < n_uniform.saturating_mul(100),
            "cornering sweeps reject nearly every sample; check ranges"
        );
        let vx0 = rng.gen_range(cfg.vx_range.0..cfg.vx_range.1);
        // steering demand the tires can hold steadily at this speed
        let delta_feas = (cfg.lat_accel_frac * mu_eff * 9.81 * wheelbase / (vx0 * vx0))
            .min(cfg.delta_range.1);
        let delta_ss = rng.gen_range(-delta_feas..delta_feas);
        // speed-holding throttle at vx0
        let d_hold = (p.cr0 + p.cd * vx0 * vx0) / (p.cm1 - p.cm2 * vx0);

        let mut x = [0.0, 0.0, 0.0, vx0, 0.0, 0.0];
        for _ in 0..settle_steps {
            x = rk4_step(&x, &[delta_ss, d_hold], p, dt_plant);
            x[0] = 0.0;
            x[1] = 0.0;
            x[2] = 0.0;
        }

        // record while the controls random-walk around the steady pair;
        // clamped increments keep each sweep inside the excitation budget
        let mut w_delta = 0.0f64;
        let mut w_d = 0.0f64;
        for _ in 0..cfg.sweep_samples {
            if rows.len() >= n_uniform {
                break;
            }
            w_delta = (w_delta + rng.gen_range(-cfg.delta_jitter..cfg.delta_jitter) / 4.0)
                .clamp(-cfg.delta_jitter, cfg.delta_jitter);
            w_d = (w_d + rng.gen_range(-cfg.d_walk..cfg.d_walk) / 4.0)
                .clamp(-cfg.d_walk, cfg.d_walk);
            let u = [
                (delta_ss + w_delta).clamp(cfg.delta_range.0, cfg.delta_range.1),
                (d_hold + w_d).clamp(cfg.d_range.0, cfg.d_range.1),
            ];
            let row = [x[3], x[4], x[5], u[0], u[1]];
            let valid = row[0] >= cfg.vx_range.0
                && row[1] >= cfg.vy_range.0
                && row[1] <= cfg.vy_range.1
                && row[2] >= cfg.omega_range.0
                && row[2] <= cfg.omega_range.1
                && front_slip(&row, p).abs() <= cfg.slip_cap
                && rear_slip(&row, p).abs() <= cfg.slip_cap;
            if valid {
                rows.push(row);
            }
            for _ in 0..sample_every {
                x = rk4_step(&x, &u, p, dt_plant);
                x[0] = 0.0;
                x[1] = 0.0;
                x[2] = 0.0;
            }
            if !(x[3] > 0.05 && x.iter().all(|v| v.is_finite())) {
                break;
            }
        }
    }

    for _ in 0..n_chirp_trajs {
        let amp = rng.gen_range(cfg.amp_range.0..cfg.amp_range.1);
        let f0 = rng.gen_range(cfg.f0_range.0..cfg.f0_range.1);
        let f1 = rng.gen_range(cfg.f1_range.0..cfg.f1_range.1);
        let total = cfg.chirp_duration;
        // staged drive levels hold the speed up while steering sweeps
        let stages = [
            rng.gen_range(0.3..0.9),
            rng.gen_range(0.1..0.7),
            rng.gen_range(0.3..0.9),
        ];
        let mut x = [0.0, 0.0, 0.0, rng.gen_range(0.8..2.2), 0.0, 0.0];
        let n_steps = (total / dt_plant).round() as usize;
        // record stride follows the requested per-trajectory sample count
        let stride = (n_steps / cfg.chirp_samples).max(1);
        for step in 0..n_steps {
            let t = step as f64 * dt_plant;
            let delta = amp * (2.0 * std::f64::consts::PI * (f0 + (f1 - f0) * t / total) * t).sin();
            let d = stages[((t / total) * stages.len() as f64) as usize % stages.len()];
            let u = [delta, d];
            if step % stride == 0 {
                let row = [x[3], x[4], x[5], delta, d];
                // only the slip caps bound chirp rows: they mark where the
                // tire model stops holding. The transverse box is a sweep
                // concern; clipping chirps to it removes exactly the
                // far-field rows the physics term is there to anchor
                if front_slip(&row, p).abs() <= cfg.slip_cap
                    && rear_slip(&row, p).abs() <= cfg.slip_cap
                {
                    rows.push(row);
                }
            }
            x = rk4_step(&x, &u, p, dt_plant);
            // keep the pose normalized so the trajectory never depends on
            // where it has driven
            x[0] = 0.0;
            x[1] = 0.0;
            x[2] = 0.0;
        }
    }

    let n = rows.len();
    let mut inputs = Array2::zeros((n, NET_INPUTS));
    let mut targets = Array2::zeros((n, NET_OUTPUTS));
    for (i, row) in rows.iter().enumerate() {
        let state = [0.0, 0.0, 0.0, row[0], row[1], row[2]];
        let control = [row[3], row[4]];
        let dx = continuous_dynamics(&state, &control, p);
        for j in 0..NET_INPUTS {
            inputs[(i, j)] = row[j];
        }
        for j in 0..NET_OUTPUTS {
            targets[(i, j)] = dx[j];
        }
    }

    // disjoint splits by seeded shuffle
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (n as f64 * cfg.train_frac).round() as usize;
    let n_val = (n as f64 * cfg.val_frac).round() as usize;
    let mut split = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        split[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    TrainingSet {
        inputs,
        targets,
        split,
    }
}

/// Front slip angle of an input row, the "how deep into the tire
/// nonlinearity" measure used to validate chirp coverage.
pub fn front_slip(row: &[f64], p: &VehicleParams) -> f64 {
    let (vx, vy, omega, delta) = (row[0], row[1], row[2], row[3]);
    -((vy + p.lf * omega) / (vx + crate::vehicle::V_EPS)).atan() + delta
}

fn rear_slip(row: &[f64], p: &VehicleParams) -> f64 {
    let (vx, vy, omega) = (row[0], row[1], row[2]);
    -((vy - p.lr * omega) / (vx + crate::vehicle::V_EPS)).atan()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (VehicleParams, TrainingSet) {
        let p = VehicleParams::default();
        let ds = generate_dataset(&p, 400, 3, 7, &DatasetConfig::default());
        (p, ds)
    }

    #[test]
    fn deterministic_given_seed() {
        let p = VehicleParams::default();
        let cfg = DatasetConfig::default();
        let a = generate_dataset(&p, 200, 2, 42, &cfg);
        let b = generate_dataset(&p, 200, 2, 42, &cfg);
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.targets, b.targets);
        assert_eq!(a.split, b.split);
        let c = generate_dataset(&p, 200, 2, 43, &cfg);
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn targets_are_exact_dynamics() {
        let (p, ds) = small();
        for i in (0..ds.len()).step_by(17) {
            let (x, u) = ds.state_of_row(i);
            let dx = continuous_dynamics(&x, &u, &p);
            for j in 0..NET_OUTPUTS {
                assert_eq!(ds.targets[(i, j)], dx[j]);
            }
        }
    }

    #[test]
    fn kinematic_targets_reduce_to_velocities() {
        let (_, ds) = small();
        for i in (0..ds.len()).step_by(29) {
            assert_eq!(ds.targets[(i, 0)], ds.inputs[(i, 0)]);
            assert_eq!(ds.targets[(i, 1)], ds.inputs[(i, 1)]);
            assert_eq!(ds.targets[(i, 2)], ds.inputs[(i, 2)]);
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let (_, ds) = small();
        let train = ds.indices_of(Split::Train);
        let val = ds.indices_of(Split::Val);
        let test = ds.indices_of(Split::Test);
        assert_eq!(train.len() + val.len() + test.len(), ds.len());
        assert!(!train.is_empty() && !val.is_empty() && !test.is_empty());
        // roughly the configured proportions
        let f = train.len() as f64 / ds.len() as f64;
        assert!((f - 0.7).abs() < 0.05);
    }

    #[test]
    fn chirps_reach_beyond_uniform_slip_quantile() {
        let p = VehicleParams::default();
        let cfg = DatasetConfig::default();
        let n_uniform = 1500;
        let ds = generate_dataset(&p, n_uniform, 8, 3, &cfg);
        // generation order: uniform rows first, chirp rows after
        let mut uniform_slip: Vec<f64> = (0..n_uniform)
            .map(|i| front_slip(ds.inputs.row(i).as_slice().unwrap(), &p).abs())
            .collect();
        let chirp_max = (n_uniform..ds.len())
            .map(|i| front_slip(ds.inputs.row(i).as_slice().unwrap(), &p).abs())
            .fold(0.0f64, f64::max);
        uniform_slip.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p95 = uniform_slip[(uniform_slip.len() as f64 * 0.95) as usize];
        assert!(
            chirp_max > p95,
            "chirp max slip {chirp_max:.3} does not exceed uniform p95 {p95:.3}"
        );
    }
}
