//! Runtime regime arbitration: simplex-constrained least squares over a
//! sliding window of finite-difference residuals, then EMA smoothing.
//!
//! Residuals use only the dynamic components (vx, vy, omega). Kinematic
//! rows are shared across specialists, so they carry no discriminative
//! signal and would only dilute the regression.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::optim::solve_simplex_lsq;
use crate::specialists::SpecialistLibrary;
use crate::vehicle::{ControlInput, VehicleState};

pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_ALPHA: f64 = 0.1;

/// One transition: the state reached, the state it was reached from, and
/// the control held in between.
#[derive(Clone, Copy, Debug)]
pub struct WindowEntry {
    pub x: VehicleState,
    pub x_prev: VehicleState,
    pub u_prev: ControlInput,
}

/// Time-ordered ring of recent transitions.
#[derive(Clone, Debug)]
pub struct MeasurementWindow {
    entries: VecDeque<WindowEntry>,
    capacity: usize,
    /// sampling period of the stream, s
    pub dt: f64,
}

impl MeasurementWindow {
    pub fn new(capacity: usize, dt: f64) -> Self {
        assert!(capacity >= 1, "window capacity must be positive");
        assert!(dt > 0.0, "dt must be positive");
        MeasurementWindow {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            dt,
        }
    }

    pub fn push(&mut self, e: WindowEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &WindowEntry> {
        self.entries.iter()
    }
}

#[derive(Clone, Debug)]
pub struct GovernorState {
    /// latest regression solution
    pub w_raw: Vec<f64>,
    /// EMA output; this is what the NMPC consumes
    pub w_smooth: Vec<f64>,
    /// new-sample gain of the EMA
    pub alpha: f64,
    pub window: MeasurementWindow,
}

impl GovernorState {
    /// Uniform-weight state for a library of `n` specialists.
    pub fn new(n: usize, capacity: usize, dt: f64) -> Self {
        assert!(n >= 1, "need at least one specialist");
        GovernorState {
            w_raw: vec![1.0 / n as f64; n],
            w_smooth: vec![1.0 / n as f64; n],
            alpha: DEFAULT_ALPHA,
            window: MeasurementWindow::new(capacity, dt),
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Componentwise difference quotient with the heading difference wrapped
/// to (−π, π], so a crossing of ±π never reads as a 2π/dt spike.
pub fn fd_derivative(x_k: &VehicleState, x_prev: &VehicleState, dt: f64) -> [f64; 6] {
    assert!(dt > 0.0, "dt must be positive");
    let a = x_k.to_array();
    let b = x_prev.to_array();
    let mut d = [0.0; 6];
    for i in 0..6 {
        let diff = if i == 2 { wrap_angle(a[i] - b[i]) } else { a[i] - b[i] };
        d[i] = diff / dt;
    }
    d
}

/// Stacked regression blocks for one window: each entry contributes the
/// specialists' dynamic rows (columns) against the measured finite
/// difference (target).
fn regression_blocks(
    window: &MeasurementWindow,
    lib: &SpecialistLibrary,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = lib.members.len();
    let rows = 3 * window.len();
    let mut a = DMatrix::zeros(rows, n);
    let mut y = DVector::zeros(rows);
    for (k, e) in window.iter().enumerate() {
        let fd = fd_derivative(&e.x, &e.x_prev, window.dt);
        let xp = e.x_prev.to_array();
        let up = e.u_prev.to_array();
        for (i, m) in lib.members.iter().enumerate() {
            let dyn_rows = m.dynamic_rows(&xp, &up);
            for j in 0..3 {
                a[(3 * k + j, i)] = dyn_rows[j];
            }
        }
        for j in 0..3 {
            y[3 * k + j] = fd[3 + j];
        }
    }
    (a, y)
}

/// Mean squared dynamic-row residual of the window at mixing weights `w`;
/// the quantity solve_weights minimizes, exposed for oracles and tests.
pub fn window_objective(
    window: &MeasurementWindow,
    lib: &SpecialistLibrary,
    w: &[f64],
) -> f64 {
    let (a, y) = regression_blocks(window, lib);
    let wv = DVector::from_row_slice(w);
    (a * wv - y).norm_squared()
}

/// Exact minimizer of the windowed residual over the simplex.
pub fn solve_weights(
    window: &MeasurementWindow,
    lib: &SpecialistLibrary,
) -> Result<Vec<f64>> {
    let n = lib.members.len();
    if window.is_empty() {
        return Ok(vec![1.0 / n as f64; n]);
    }
    let (a, y) = regression_blocks(window, lib);
    if !(a.iter().all(|v| v.is_finite()) && y.iter().all(|v| v.is_finite())) {
        return Err(CoreError::Optim(
            "non-finite measurement or specialist response in window".into(),
        ));
    }
    let w = solve_simplex_lsq(&a, &y);
    let sum: f64 = w.sum();
    if !(w.iter().all(|v| v.is_finite() && *v >= 0.0) && (sum - 1.0).abs() < 1e-9) {
        return Err(CoreError::Optim("weight solve left the simplex".into()));
    }
    Ok(w.as_slice().to_vec())
}

/// w_smooth ← (1−α)·w_smooth + α·w_new. Convexity keeps the result on the
/// simplex whenever both inputs are on it.
pub fn ema_update(state: &mut GovernorState, w_new: &[f64]) {
    assert_eq!(w_new.len(), state.w_smooth.len(), "weight length mismatch");
    state.w_raw.copy_from_slice(w_new);
    for (s, w) in state.w_smooth.iter_mut().zip(w_new) {
        *s = (1.0 - state.alpha) * *s + state.alpha * w;
    }
}

/// Push one measurement and refresh the weights. Returns the wall-clock
/// latency of the regression in seconds (0 under a noise-free clock, which
/// keeps reruns byte-identical). A failed solve falls back to uniform
/// weights with a warning rather than poisoning the loop.
pub fn governor_step(
    state: &mut GovernorState,
    x_k: VehicleState,
    x_prev: VehicleState,
    u_prev: ControlInput,
    lib: &SpecialistLibrary,
    noise_free_clock: bool,
) -> f64 {
    state.window.push(WindowEntry {
        x: x_k,
        x_prev,
        u_prev,
    });
    if state.window.len() < 2 {
        return 0.0;
    }
    let t0 = Instant::now();
    let w_new = match solve_weights(&state.window, lib) {
        Ok(w) => w,
        Err(e) => {
            log::warn!("weight solve failed ({e}); falling back to uniform");
            let n = lib.members.len();
            vec![1.0 / n as f64; n]
        }
    };
    ema_update(state, &w_new);
    if noise_free_clock {
        0.0
    } else {
        t0.elapsed().as_secs_f64()
    }
}
