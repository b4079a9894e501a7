//! Receding-horizon tracking controller over a symbolic dynamics model:
//! single-shooting transcription, Gauss-Newton SQP with an active-set QP
//! subproblem, and a timing breakdown that separates derivative evaluation
//! from linear algebra.
//!
//! Transcription does not unroll the horizon into one monolithic graph. It
//! differentiates the one-step model symbolically (a 6x8 Jacobian appended
//! to the model graph) and chains the blocks through the forward-Euler
//! recursion numerically:
//!
//!   x_{k+1} = x_k + Ts f(x_k, u_k)
//!   S_{k+1} = S_k + Ts (A_k S_k + B_k E_k),   S_k = dx_k/du
//!
//! This is the exact chain rule of the rolled-out map, so residual
//! Jacobians match a monolithic graph to machine precision, while the
//! stored graph stays the size of one model evaluation plus its Jacobian.
//! A rolled graph grows by the model size per step and again per residual
//! row under reverse-mode appends; a neural ensemble crosses the memory
//! budget before the default horizon.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::optim::solve_qp;
use crate::symgraph::{jacobian, EvalPlan, EvalScratch, ExprGraph, NodeId, SparseJacobian};
use crate::vehicle::{build_parametric_graph, VehicleParams, VehicleState};

const MAX_ITERS: usize = 50;
const KKT_TOL: f64 = 1e-6;
const STEP_TOL: f64 = 1e-8;
const LM_BASE: f64 = 1e-8;
const LM_MAX: f64 = 1e12;
const MAX_BACKTRACK: usize = 25;
const MAX_NONFINITE: usize = 20;
const SIMPLEX_TOL: f64 = 1e-6;
/// active-constraint detection tolerance for the stationarity measure
const ACTIVE_TOL: f64 = 1e-8;

/// Horizon, sampling time, cost weights, and input limits.
///
/// `p_term` of `None` means the terminal positions are weighted like the
/// stage positions. Rate limiting applies to steering only; throttle rate
/// enters the cost but not the constraints.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    pub h: usize,
    pub ts: f64,
    pub q_p: f64,
    pub p_term: Option<f64>,
    pub r_delta: f64,
    pub r_d: f64,
    pub u_min: [f64; 2],
    pub u_max: [f64; 2],
    pub ddelta_max: f64,
    pub v_ref: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            h: 15,
            ts: 0.02,
            q_p: 10.0,
            p_term: None,
            r_delta: 1.0,
            r_d: 0.1,
            u_min: [-0.4, -1.0],
            u_max: [0.4, 1.0],
            ddelta_max: 0.05,
            v_ref: 1.5,
        }
    }
}

impl OcpConfig {
    pub fn terminal_weight(&self) -> f64 {
        self.p_term.unwrap_or(self.q_p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 1 {
            return Err(CoreError::Invalid("horizon must be at least 1".into()));
        }
        if !(self.ts > 0.0) || !self.ts.is_finite() {
            return Err(CoreError::Invalid(format!(
                "sampling time must be positive, got {}",
                self.ts
            )));
        }
        for (name, v) in [
            ("q_p", self.q_p),
            ("p_term", self.terminal_weight()),
            ("r_delta", self.r_delta),
            ("r_d", self.r_d),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(CoreError::Invalid(format!(
                    "weight {name} must be nonnegative, got {v}"
                )));
            }
        }
        for i in 0..2 {
            if !(self.u_min[i] < self.u_max[i]) {
                return Err(CoreError::Invalid(format!(
                    "input bounds component {i} are not ordered: [{}, {}]",
                    self.u_min[i], self.u_max[i]
                )));
            }
        }
        if !(self.ddelta_max >= 0.0) || !self.ddelta_max.is_finite() {
            return Err(CoreError::Invalid(format!(
                "steering rate limit must be nonnegative, got {}",
                self.ddelta_max
            )));
        }
        Ok(())
    }
}

/// What the trailing parameter slots mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// 15 physical slots, written via [`OcpProblem::update_params`].
    Parametric,
    /// one mixture weight per specialist, written via
    /// [`OcpProblem::update_weights`] or per solve.
    Ensemble,
    /// constants baked into the graph; no trailing slots.
    Baked,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SolveTiming {
    pub total: f64,
    pub derivative_eval: f64,
    pub linear_solve: f64,
    pub line_search: f64,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub u_star: Vec<[f64; 2]>,
    pub iterations: usize,
    pub converged: bool,
    pub cost: f64,
    pub kkt_residual: f64,
    pub constraint_violation: f64,
    pub timing: SolveTiming,
    /// accepted-iterate costs, non-increasing by construction
    pub iter_costs: Vec<f64>,
}

impl SolveReport {
    /// Interleaved (delta, D) sequence, the warm-start layout.
    pub fn flat_controls(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.u_star.len());
        for u in &self.u_star {
            v.push(u[0]);
            v.push(u[1]);
        }
        v
    }
}

/// Transcribed tracking problem. Decision vector is the interleaved input
/// sequence (delta_0, D_0, ..., delta_{H-1}, D_{H-1}); states are
/// eliminated by the forward rollout. The parameter vector is
/// `[x0 (6), ref_1..ref_H (2H), tail]` where the tail is the model's own
/// parameter block. Parametric tails start zeroed and must be written
/// through `update_params` before the first solve.
pub struct OcpProblem {
    config: OcpConfig,
    kind: ModelKind,
    plan_fj: EvalPlan,
    plan_f: EvalPlan,
    jac: SparseJacobian,
    params: Vec<f64>,
    tail_len: usize,
    scratch: EvalScratch,
    build_time: f64,
    node_count: usize,
    jac_density: f64,
}

/// Residual layout: position rows for steps 1..H (x then y, stage weight
/// sqrt(Q_p), terminal sqrt(P)), then steering and throttle rate rows for
/// the H-1 within-horizon input differences.
fn n_residuals(h: usize) -> usize {
    4 * h - 2
}

pub fn transcribe(model: &ExprGraph, cfg: &OcpConfig, kind: ModelKind) -> Result<OcpProblem> {
    cfg.validate()?;
    if model.outputs().len() != 6 {
        return Err(CoreError::Invalid(format!(
            "dynamics model must have 6 outputs, got {}",
            model.outputs().len()
        )));
    }
    if model.n_vars() != 8 {
        return Err(CoreError::Invalid(format!(
            "dynamics model must use 8 variable slots (6 state + 2 input), got {}",
            model.n_vars()
        )));
    }
    match kind {
        ModelKind::Parametric if model.n_params() != 15 => {
            return Err(CoreError::Invalid(format!(
                "parametric model must expose 15 parameter slots, got {}",
                model.n_params()
            )));
        }
        ModelKind::Ensemble if model.n_params() == 0 => {
            return Err(CoreError::Invalid(
                "ensemble model exposes no mixture weight slots".into(),
            ));
        }
        ModelKind::Baked if model.n_params() != 0 => {
            return Err(CoreError::Invalid(format!(
                "baked model must have no parameter slots, got {}",
                model.n_params()
            )));
        }
        _ => {}
    }

    let t0 = Instant::now();
    // import into a private graph so appended derivative nodes cannot alias
    // caller state
    let mut g = ExprGraph::new();
    let vars: Vec<NodeId> = (0..8).map(|i| g.var(i)).collect();
    let pars: Vec<NodeId> = (0..model.n_params()).map(|i| g.param(i)).collect();
    let outs = g.splice(model, &vars, &pars)?;
    g.set_outputs(&outs);
    let wrt: Vec<usize> = (0..8).collect();
    let jac = jacobian(&mut g, &outs, &wrt)?;
    let mut fj_outputs = outs.clone();
    fj_outputs.extend(jac.value_nodes());
    let plan_fj = EvalPlan::for_outputs(&g, &fj_outputs);
    let plan_f = EvalPlan::for_outputs(&g, &outs);
    let node_count = g.node_count();
    let jac_density = chained_density(&jac, cfg);
    let tail_len = model.n_params();
    let build_time = t0.elapsed().as_secs_f64();

    Ok(OcpProblem {
        config: cfg.clone(),
        kind,
        plan_fj,
        plan_f,
        jac,
        params: vec![0.0; 6 + 2 * cfg.h + tail_len],
        tail_len,
        scratch: EvalScratch::new(),
        build_time,
        node_count,
        jac_density,
    })
}

/// Structural density of the residual Jacobian, from the model's own
/// sparsity pattern pushed through the sensitivity recursion. Rate rows
/// count only when their weight can make them nonzero.
fn chained_density(jac: &SparseJacobian, cfg: &OcpConfig) -> f64 {
    let h = cfg.h;
    let n = 2 * h;
    let pat = jac.pattern();
    let mut s = vec![vec![false; n]; 6];
    let mut nnz = 0usize;
    for k in 0..h {
        let mut s_new = vec![vec![false; n]; 6];
        for i in 0..6 {
            for c in 0..n {
                let mut v = s[i][c];
                if !v {
                    for (j, srow) in s.iter().enumerate() {
                        if pat[i][j] && srow[c] {
                            v = true;
                            break;
                        }
                    }
                }
                s_new[i][c] = v;
            }
            if pat[i][6] {
                s_new[i][2 * k] = true;
            }
            if pat[i][7] {
                s_new[i][2 * k + 1] = true;
            }
        }
        for srow in s_new.iter().take(2) {
            nnz += srow.iter().filter(|&&b| b).count();
        }
        s = s_new;
    }
    if cfg.r_delta > 0.0 {
        nnz += 2 * (h - 1);
    }
    if cfg.r_d > 0.0 {
        nnz += 2 * (h - 1);
    }
    nnz as f64 / (n_residuals(h) * n) as f64
}

impl OcpProblem {
    pub fn config(&self) -> &OcpConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// transcription wall time, seconds
    pub fn build_time(&self) -> f64 {
        self.build_time
    }

    /// stored graph size after derivative append
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// structural density of the residual Jacobian
    pub fn jacobian_density(&self) -> f64 {
        self.jac_density
    }

    /// `[x0, refs, tail]`, the documented layout
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn tail_offset(&self) -> usize {
        6 + 2 * self.config.h
    }

    pub fn update_weights(&mut self, w: &[f64]) -> Result<()> {
        if self.kind != ModelKind::Ensemble {
            return Err(CoreError::Invalid(
                "mixture weights only apply to an ensemble problem".into(),
            ));
        }
        if w.len() != self.tail_len {
            return Err(CoreError::Invalid(format!(
                "expected {} mixture weights, got {}",
                self.tail_len,
                w.len()
            )));
        }
        let mut sum = 0.0;
        for &wi in w {
            if !wi.is_finite() || wi < -SIMPLEX_TOL {
                return Err(CoreError::Invalid(format!(
                    "mixture weight {wi} is off the simplex"
                )));
            }
            sum += wi;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(CoreError::Invalid(format!(
                "mixture weights sum to {sum}, not 1"
            )));
        }
        let off = self.tail_offset();
        self.params[off..].copy_from_slice(w);
        Ok(())
    }

    pub fn update_params(&mut self, p: &VehicleParams) -> Result<()> {
        if self.kind != ModelKind::Parametric {
            return Err(CoreError::Invalid(
                "physical parameters only apply to a parametric problem".into(),
            ));
        }
        p.validate()?;
        let off = self.tail_offset();
        self.params[off..].copy_from_slice(&p.to_slots());
        Ok(())
    }

    fn write_target(&mut self, x0: &VehicleState, refs: &[[f64; 2]]) -> Result<()> {
        if refs.len() != self.config.h {
            return Err(CoreError::Invalid(format!(
                "expected {} reference positions, got {}",
                self.config.h,
                refs.len()
            )));
        }
        self.params[..6].copy_from_slice(&x0.to_array());
        for (k, r) in refs.iter().enumerate() {
            self.params[6 + 2 * k] = r[0];
            self.params[6 + 2 * k + 1] = r[1];
        }
        Ok(())
    }

    fn bounds_of(&self, i: usize) -> (f64, f64) {
        (self.config.u_min[i & 1], self.config.u_max[i & 1])
    }

    /// Project onto the box, then forward-clamp steering so every rate
    /// constraint holds exactly. The rate interval around a boxed
    /// predecessor always intersects the box, so the order is safe.
    fn clamp_feasible(&self, u: &mut DVector<f64>) {
        for i in 0..u.len() {
            let (lo, hi) = self.bounds_of(i);
            u[i] = u[i].clamp(lo, hi);
        }
        let dmax = self.config.ddelta_max;
        for k in 1..self.config.h {
            let lo = (u[2 * k - 2] - dmax).max(self.config.u_min[0]);
            let hi = (u[2 * k - 2] + dmax).min(self.config.u_max[0]);
            u[2 * k] = u[2 * k].clamp(lo, hi);
        }
    }

    fn violation(&self, u: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        for i in 0..u.len() {
            let (lo, hi) = self.bounds_of(i);
            v = v.max(lo - u[i]).max(u[i] - hi);
        }
        for k in 1..self.config.h {
            v = v.max((u[2 * k] - u[2 * k - 2]).abs() - self.config.ddelta_max);
        }
        v.max(0.0)
    }

    /// Exact residuals and Jacobian of the rolled-out problem at `u`,
    /// via one symbolic block evaluation per step and the sensitivity
    /// recursion.
    fn residuals_and_jacobian(&mut self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let h = self.config.h;
        let n = 2 * h;
        let m = n_residuals(h);
        let ts = self.config.ts;
        let sq = self.config.q_p.sqrt();
        let sp = self.config.terminal_weight().sqrt();
        let nnz = self.jac.entries.len();

        let OcpProblem {
            plan_fj,
            jac,
            scratch,
            params,
            ..
        } = self;
        let tail = &params[6 + 2 * h..];

        let mut r = DVector::zeros(m);
        let mut jmat = DMatrix::zeros(m, n);
        let mut x = [0.0f64; 6];
        x.copy_from_slice(&params[..6]);
        let mut s = DMatrix::<f64>::zeros(6, n);
        let mut vars = [0.0f64; 8];
        let mut buf = vec![0.0f64; 6 + nnz];
        let mut a = [0.0f64; 48];

        for k in 0..h {
            vars[..6].copy_from_slice(&x);
            vars[6] = u[2 * k];
            vars[7] = u[2 * k + 1];
            plan_fj.eval_into(&vars, tail, scratch, &mut buf)?;
            jac.scatter_dense(&buf[6..], &mut a);

            let mut s_new = s.clone();
            for i in 0..6 {
                for c in 0..n {
                    let mut acc = 0.0;
                    for j in 0..6 {
                        acc += a[i * 8 + j] * s[(j, c)];
                    }
                    s_new[(i, c)] += ts * acc;
                }
                s_new[(i, 2 * k)] += ts * a[i * 8 + 6];
                s_new[(i, 2 * k + 1)] += ts * a[i * 8 + 7];
            }
            let mut x_new = [0.0f64; 6];
            for i in 0..6 {
                x_new[i] = x[i] + ts * buf[i];
                if !x_new[i].is_finite() {
                    return Err(CoreError::Optim(format!(
                        "rollout diverged at step {k}, state component {i}"
                    )));
                }
            }

            let wq = if k + 1 == h { sp } else { sq };
            for j in 0..2 {
                let row = 2 * k + j;
                r[row] = wq * (x_new[j] - params[6 + 2 * k + j]);
                for c in 0..n {
                    jmat[(row, c)] = wq * s_new[(j, c)];
                }
            }
            x = x_new;
            s = s_new;
        }

        let srd = self.config.r_delta.sqrt();
        let srt = self.config.r_d.sqrt();
        for k in 0..h - 1 {
            let row = 2 * h + 2 * k;
            r[row] = srd * (u[2 * (k + 1)] - u[2 * k]);
            jmat[(row, 2 * (k + 1))] = srd;
            jmat[(row, 2 * k)] = -srd;
            r[row + 1] = srt * (u[2 * (k + 1) + 1] - u[2 * k + 1]);
            jmat[(row + 1, 2 * (k + 1) + 1)] = srt;
            jmat[(row + 1, 2 * k + 1)] = -srt;
        }
        Ok((r, jmat))
    }

    /// True rolled-out cost at `u`; infinity when the rollout leaves the
    /// finite domain, which the line search treats as a rejected step.
    fn cost(&mut self, u: &[f64]) -> f64 {
        match self.rollout_cost(u) {
            Ok(c) => c,
            Err(_) => f64::INFINITY,
        }
    }

    fn rollout_cost(&mut self, u: &[f64]) -> Result<f64> {
        let h = self.config.h;
        let ts = self.config.ts;
        let q = self.config.q_p;
        let p_t = self.config.terminal_weight();

        let OcpProblem {
            plan_f,
            scratch,
            params,
            ..
        } = self;
        let tail = &params[6 + 2 * h..];

        let mut x = [0.0f64; 6];
        x.copy_from_slice(&params[..6]);
        let mut vars = [0.0f64; 8];
        let mut f = [0.0f64; 6];
        let mut c = 0.0;
        for k in 0..h {
            vars[..6].copy_from_slice(&x);
            vars[6] = u[2 * k];
            vars[7] = u[2 * k + 1];
            plan_f.eval_into(&vars, tail, scratch, &mut f)?;
            for i in 0..6 {
                x[i] += ts * f[i];
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Ok(f64::INFINITY);
            }
            let wq = if k + 1 == h { p_t } else { q };
            let ex = x[0] - params[6 + 2 * k];
            let ey = x[1] - params[6 + 2 * k + 1];
            c += wq * (ex * ex + ey * ey);
        }
        for k in 0..h - 1 {
            let dd = u[2 * (k + 1)] - u[2 * k];
            let dt = u[2 * (k + 1) + 1] - u[2 * k + 1];
            c += self.config.r_delta * dd * dd + self.config.r_d * dt * dt;
        }
        Ok(c)
    }

    /// Stationarity measure: gradient minus its best sign-feasible
    /// expansion in the active constraint normals. Sign clamping keeps the
    /// measure conservative, so it can only overstate the residual.
    fn kkt_residual(&self, u: &DVector<f64>, grad: &DVector<f64>) -> f64 {
        let n = u.len();
        let dmax = self.config.ddelta_max;
        let mut normals: Vec<DVector<f64>> = Vec::new();
        let mut upper: Vec<bool> = Vec::new();
        for i in 0..n {
            let (lo, hi) = self.bounds_of(i);
            if u[i] <= lo + ACTIVE_TOL {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                normals.push(e);
                upper.push(false);
            } else if u[i] >= hi - ACTIVE_TOL {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                normals.push(e);
                upper.push(true);
            }
        }
        for k in 1..self.config.h {
            let d = u[2 * k] - u[2 * k - 2];
            if d.abs() >= dmax - ACTIVE_TOL {
                let mut e = DVector::zeros(n);
                e[2 * k] = 1.0;
                e[2 * k - 2] = -1.0;
                normals.push(e);
                upper.push(d > 0.0);
            }
        }
        if normals.is_empty() {
            return grad.amax();
        }
        let q = normals.len();
        let mut amat = DMatrix::zeros(n, q);
        for (j, col) in normals.iter().enumerate() {
            amat.set_column(j, col);
        }
        let svd = nalgebra::SVD::new(amat.clone(), true, true);
        let mut mu = match svd.solve(grad, 1e-12) {
            Ok(m) => m,
            Err(_) => DVector::zeros(q),
        };
        for j in 0..q {
            // minimizer stationarity: grad = sum c_j a_j with c <= 0 on
            // upper-active normals and c >= 0 on lower-active ones
            if upper[j] {
                mu[j] = mu[j].min(0.0);
            } else {
                mu[j] = mu[j].max(0.0);
            }
        }
        (grad - amat * mu).amax()
    }

    /// One full SQP solve. `w` is required exactly when the problem wraps
    /// an ensemble. `warm_start` is the previous solution in flat layout;
    /// it is shifted one step with the last input repeated.
    pub fn solve(
        &mut self,
        x0: &VehicleState,
        refs: &[[f64; 2]],
        w: Option<&[f64]>,
        warm_start: Option<&[f64]>,
    ) -> Result<SolveReport> {
        let t_total = Instant::now();
        let h = self.config.h;
        let n = 2 * h;
        self.write_target(x0, refs)?;
        match (self.kind, w) {
            (ModelKind::Ensemble, Some(wv)) => self.update_weights(wv)?,
            (ModelKind::Ensemble, None) => {
                return Err(CoreError::Invalid(
                    "ensemble solve requires mixture weights".into(),
                ))
            }
            (_, Some(_)) => {
                return Err(CoreError::Invalid(
                    "mixture weights passed to a non-ensemble problem".into(),
                ))
            }
            (_, None) => {}
        }

        let mut u = DVector::zeros(n);
        if let Some(prev) = warm_start {
            if prev.len() != n {
                return Err(CoreError::Invalid(format!(
                    "warm start length {} does not match decision dimension {n}",
                    prev.len()
                )));
            }
            u.as_mut_slice()[..n - 2].copy_from_slice(&prev[2..]);
            u[n - 2] = prev[n - 2];
            u[n - 1] = prev[n - 1];
        }
        self.clamp_feasible(&mut u);

        // constraint rows: box on every component, then steering rate
        let n_rate = h - 1;
        let mc = n + n_rate;
        let mut cmat = DMatrix::zeros(mc, n);
        for i in 0..n {
            cmat[(i, i)] = 1.0;
        }
        for k in 0..n_rate {
            cmat[(n + k, 2 * (k + 1))] = 1.0;
            cmat[(n + k, 2 * k)] = -1.0;
        }

        let mut timing = SolveTiming::default();
        let mut iter_costs: Vec<f64> = Vec::new();
        let mut lambda = LM_BASE;
        let mut nonfinite = 0usize;
        let mut iterations = 0usize;
        let mut converged = false;
        let mut kkt = f64::INFINITY;
        let mut cur_cost = f64::INFINITY;
        let mut best: (f64, DVector<f64>) = (f64::INFINITY, u.clone());

        'outer: while iterations < MAX_ITERS {
            iterations += 1;
            let td = Instant::now();
            let rj = self.residuals_and_jacobian(&u);
            timing.derivative_eval += td.elapsed().as_secs_f64();
            let (r, jmat) = match rj {
                Ok(v) => v,
                Err(_) => break 'outer,
            };
            let c0 = r.norm_squared();
            if !c0.is_finite() {
                break 'outer;
            }
            cur_cost = c0;
            if iter_costs.is_empty() {
                iter_costs.push(c0);
            }
            if c0 < best.0 {
                best = (c0, u.clone());
            }

            let grad = 2.0 * jmat.transpose() * &r;
            kkt = self.kkt_residual(&u, &grad);
            if kkt < KKT_TOL {
                converged = true;
                break;
            }

            let jtj = jmat.transpose() * &jmat;
            let jtr = jmat.transpose() * &r;

            // constraint bounds relative to the current (feasible) iterate;
            // the min/max guards absorb accumulated float drift so the QP
            // origin stays admissible
            let mut cl = DVector::zeros(mc);
            let mut cu = DVector::zeros(mc);
            for i in 0..n {
                let (lo, hi) = self.bounds_of(i);
                cl[i] = (lo - u[i]).min(0.0);
                cu[i] = (hi - u[i]).max(0.0);
            }
            for k in 0..n_rate {
                let d = u[2 * (k + 1)] - u[2 * k];
                cl[n + k] = (-self.config.ddelta_max - d).min(0.0);
                cu[n + k] = (self.config.ddelta_max - d).max(0.0);
            }

            let mut accepted = false;
            let mut step_norm = f64::INFINITY;
            while !accepted {
                let mut hqp = jtj.clone();
                for i in 0..n {
                    hqp[(i, i)] += lambda;
                }
                let tq = Instant::now();
                let sol = solve_qp(&hqp, &jtr, &cmat, &cl, &cu, &DVector::zeros(n));
                timing.linear_solve += tq.elapsed().as_secs_f64();
                let delta = match sol {
                    Ok(d) => d,
                    Err(e) => {
                        log::trace!("it {iterations} lambda {lambda:.1e} qp err: {e}");
                        lambda *= 10.0;
                        if lambda > LM_MAX {
                            break 'outer;
                        }
                        continue;
                    }
                };
                step_norm = delta.amax();
                log::trace!(
                    "it {iterations} lambda {lambda:.1e} step {step_norm:.3e} kkt {kkt:.3e} cost {cur_cost:.6e}"
                );
                if step_norm < STEP_TOL {
                    // stationary under damping; KKT check above decides
                    // whether this counts as converged
                    break 'outer;
                }

                let mut alpha = 1.0;
                for _ in 0..MAX_BACKTRACK {
                    let cand = &u + alpha * &delta;
                    let tl = Instant::now();
                    let c = self.cost(cand.as_slice());
                    timing.line_search += tl.elapsed().as_secs_f64();
                    if !c.is_finite() {
                        nonfinite += 1;
                        if nonfinite >= MAX_NONFINITE {
                            break 'outer;
                        }
                        alpha *= 0.5;
                        continue;
                    }
                    if c < cur_cost {
                        u = cand;
                        cur_cost = c;
                        iter_costs.push(c);
                        if c < best.0 {
                            best = (c, u.clone());
                        }
                        step_norm *= alpha;
                        accepted = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if !accepted {
                    lambda *= 10.0;
                    if lambda > LM_MAX {
                        break 'outer;
                    }
                }
            }
            lambda = (lambda / 10.0).max(LM_BASE);
            if step_norm < STEP_TOL {
                break;
            }
        }

        // abort paths fall back to the best accepted iterate
        if best.0 < cur_cost {
            u = best.1.clone();
            cur_cost = best.0;
        }
        let violation = self.violation(&u);
        timing.total = t_total.elapsed().as_secs_f64();

        Ok(SolveReport {
            u_star: (0..h).map(|k| [u[2 * k], u[2 * k + 1]]).collect(),
            iterations,
            converged,
            cost: cur_cost,
            kkt_residual: kkt,
            constraint_violation: violation,
            timing,
            iter_costs,
        })
    }
}

/// Full re-transcription with the physical constants baked into the graph,
/// the adaptation strategy this stack exists to avoid. Returns the problem
/// and the wall-clock latency of producing it.
pub fn rebuild_jit_baseline(p: &VehicleParams, cfg: &OcpConfig) -> Result<(OcpProblem, f64)> {
    let t0 = Instant::now();
    let model = build_parametric_graph();
    let mut baked = ExprGraph::new();
    let vars: Vec<NodeId> = (0..8).map(|i| baked.var(i)).collect();
    let consts: Vec<NodeId> = p.to_slots().iter().map(|&v| baked.constant(v)).collect();
    let outs = baked.splice(&model, &vars, &consts)?;
    baked.set_outputs(&outs);
    let problem = transcribe(&baked, cfg, ModelKind::Baked)?;
    Ok((problem, t0.elapsed().as_secs_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::governor::{governor_step, GovernorState};
    use crate::specialists::testutil::random_net;
    use crate::specialists::{build_ensemble, SpecialistLibrary, SpecialistModel};
    use crate::vehicle::{continuous_dynamics, make_regime, rk4_step, RegimeShift};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn nominal_problem() -> OcpProblem {
        let model = build_parametric_graph();
        let mut prob = transcribe(&model, &OcpConfig::default(), ModelKind::Parametric).unwrap();
        prob.update_params(&VehicleParams::default()).unwrap();
        prob
    }

    fn ensemble_problem(n: usize) -> OcpProblem {
        let members: Vec<SpecialistModel> = (0..n)
            .map(|i| SpecialistModel::Net(random_net(i as u64 + 1)))
            .collect();
        let lib = SpecialistLibrary::new(members).unwrap();
        let g = build_ensemble(&lib).unwrap();
        transcribe(&g, &OcpConfig::default(), ModelKind::Ensemble).unwrap()
    }

    fn moving_state() -> VehicleState {
        VehicleState {
            x: 0.0,
            y: 0.0,
            psi: 0.0,
            vx: 1.0,
            vy: 0.0,
            omega: 0.0,
        }
    }

    /// constant-speed arc ahead of the state, curvature 1/radius
    fn arc_refs(x0: &VehicleState, cfg: &OcpConfig, speed: f64, radius: f64) -> Vec<[f64; 2]> {
        (1..=cfg.h)
            .map(|k| {
                let th = speed * cfg.ts * k as f64 / radius;
                [
                    x0.x + radius * th.sin(),
                    x0.y + radius * (1.0 - th.cos()),
                ]
            })
            .collect()
    }

    #[test]
    fn config_validation_rejects_degenerate_setups() {
        let model = build_parametric_graph();
        let bad = [
            OcpConfig {
                h: 0,
                ..OcpConfig::default()
            },
            OcpConfig {
                ts: 0.0,
                ..OcpConfig::default()
            },
            OcpConfig {
                q_p: -1.0,
                ..OcpConfig::default()
            },
            OcpConfig {
                u_min: [0.5, -1.0],
                u_max: [0.4, 1.0],
                ..OcpConfig::default()
            },
            OcpConfig {
                ddelta_max: -0.1,
                ..OcpConfig::default()
            },
        ];
        for cfg in bad {
            assert!(transcribe(&model, &cfg, ModelKind::Parametric).is_err());
        }
    }

    #[test]
    fn transcribe_rejects_wrong_arity() {
        let mut g = ExprGraph::new();
        let v = g.var(0);
        g.set_outputs(&[v]);
        assert!(transcribe(&g, &OcpConfig::default(), ModelKind::Baked).is_err());

        let mut g = ExprGraph::new();
        let vars: Vec<NodeId> = (0..9).map(|i| g.var(i)).collect();
        g.set_outputs(&vars[..6].to_vec());
        assert!(transcribe(&g, &OcpConfig::default(), ModelKind::Baked).is_err());

        let model = build_parametric_graph();
        assert!(transcribe(&model, &OcpConfig::default(), ModelKind::Baked).is_err());
    }

    #[test]
    fn h1_residuals_match_manual_euler() {
        let cfg = OcpConfig {
            h: 1,
            ..OcpConfig::default()
        };
        let model = build_parametric_graph();
        let mut prob = transcribe(&model, &cfg, ModelKind::Parametric).unwrap();
        let p = VehicleParams::default();
        prob.update_params(&p).unwrap();
        let x0 = VehicleState {
            x: 0.3,
            y: -0.2,
            psi: 0.4,
            vx: 1.2,
            vy: 0.05,
            omega: 0.8,
        };
        let refs = [[0.5, 0.1]];
        prob.write_target(&x0, &refs).unwrap();

        let u = DVector::from_vec(vec![0.1, 0.3]);
        let (r, _) = prob.residuals_and_jacobian(&u).unwrap();
        let f = continuous_dynamics(&x0.to_array(), &[0.1, 0.3], &p);
        let sp = cfg.terminal_weight().sqrt();
        let x1 = x0.x + cfg.ts * f[0];
        let y1 = x0.y + cfg.ts * f[1];
        assert_abs_diff_eq!(r[0], sp * (x1 - 0.5), epsilon = 1e-13);
        assert_abs_diff_eq!(r[1], sp * (y1 - 0.1), epsilon = 1e-13);
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn toy_integrator_saturates_at_upper_bound() {
        // xdot = delta, ydot = 0: a far target makes every step saturate
        let mut g = ExprGraph::new();
        let vars: Vec<NodeId> = (0..8).map(|i| g.var(i)).collect();
        let zero = g.constant(0.0);
        g.set_outputs(&[vars[6], zero, zero, zero, zero, zero]);
        let cfg = OcpConfig {
            u_min: [-0.5, -1.0],
            u_max: [0.5, 1.0],
            ddelta_max: 10.0,
            ..OcpConfig::default()
        };
        let mut prob = transcribe(&g, &cfg, ModelKind::Baked).unwrap();
        let x0 = VehicleState {
            x: 0.0,
            y: 0.0,
            psi: 0.0,
            vx: 0.0,
            vy: 0.0,
            omega: 0.0,
        };
        let refs: Vec<[f64; 2]> = vec![[10.0, 0.0]; cfg.h];
        let rep = prob.solve(&x0, &refs, None, None).unwrap();
        assert!(rep.converged, "kkt residual {}", rep.kkt_residual);
        for u in &rep.u_star {
            assert_abs_diff_eq!(u[0], 0.5, epsilon = 1e-6);
            assert!(u[1].abs() <= 1e-9);
        }
        assert!(rep.constraint_violation <= 1e-9);
    }

    #[test]
    fn stationary_reference_needs_only_drag_hold() {
        let mut prob = nominal_problem();
        let x0 = VehicleState {
            x: 0.0,
            y: 0.0,
            psi: 0.0,
            vx: 0.0,
            vy: 0.0,
            omega: 0.0,
        };
        let refs: Vec<[f64; 2]> = vec![[0.0, 0.0]; prob.config.h];
        let rep = prob.solve(&x0, &refs, None, None).unwrap();
        let p = VehicleParams::default();
        let d_hold = p.cr0 / p.cm1;
        assert!(rep.cost <= rep.iter_costs[0] + 1e-15);
        for win in rep.u_star.windows(2) {
            assert!((win[1][0] - win[0][0]).abs() <= 1e-2);
            assert!((win[1][1] - win[0][1]).abs() <= 1e-2);
        }
        for u in &rep.u_star {
            assert!(u[0].abs() <= 1e-2, "steering {}", u[0]);
            assert!((u[1] - d_hold).abs() <= 0.08, "throttle {}", u[1]);
        }
    }

    #[test]
    fn ensemble_build_dwarfs_parametric_build() {
        let par = nominal_problem();
        let ens = ensemble_problem(8);
        assert!(
            ens.build_time() >= 5.0 * par.build_time(),
            "build times: ensemble {} vs parametric {}",
            ens.build_time(),
            par.build_time()
        );
        assert!(
            ens.node_count() >= 8 * par.node_count(),
            "node counts: ensemble {} vs parametric {}",
            ens.node_count(),
            par.node_count()
        );
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut prob = nominal_problem();
        let x0 = VehicleState {
            x: 0.1,
            y: -0.05,
            psi: 0.2,
            vx: 1.1,
            vy: 0.03,
            omega: 0.5,
        };
        let refs = arc_refs(&x0, &OcpConfig::default(), 1.4, 1.5);
        prob.write_target(&x0, &refs).unwrap();
        check_gradient(&mut prob);

        let mut ens = ensemble_problem(2);
        ens.update_weights(&[0.6, 0.4]).unwrap();
        ens.write_target(&x0, &refs).unwrap();
        check_gradient(&mut ens);
    }

    fn check_gradient(prob: &mut OcpProblem) {
        let n = 2 * prob.config.h;
        let mut u = DVector::zeros(n);
        for k in 0..prob.config.h {
            u[2 * k] = 0.05 * ((k as f64) * 0.7).sin();
            u[2 * k + 1] = 0.3 + 0.1 * ((k as f64) * 0.4).cos();
        }
        let (r, jmat) = prob.residuals_and_jacobian(&u).unwrap();
        let grad = 2.0 * jmat.transpose() * &r;
        let mut worst = 0.0f64;
        let scale = grad.amax().max(1.0);
        for i in 0..n {
            let h = 1e-6;
            let mut up = u.clone();
            up[i] += h;
            let mut dn = u.clone();
            dn[i] -= h;
            let fd = (prob.cost(up.as_slice()) - prob.cost(dn.as_slice())) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / scale);
        }
        assert!(worst < 1e-5, "worst relative gradient error {worst}");
    }

    #[test]
    fn tracking_report_is_consistent() {
        let mut prob = nominal_problem();
        let x0 = moving_state();
        let refs = arc_refs(&x0, &OcpConfig::default(), 1.2, 2.0);
        let rep = prob.solve(&x0, &refs, None, None).unwrap();
        assert!(rep.constraint_violation <= 1e-9);
        for w in rep.iter_costs.windows(2) {
            assert!(w[1] <= w[0], "cost increased: {} -> {}", w[0], w[1]);
        }
        let t = rep.timing;
        assert!(t.derivative_eval + t.linear_solve + t.line_search <= t.total + 1e-9);
        if rep.converged {
            assert!(rep.kkt_residual < KKT_TOL);
        }
        assert_abs_diff_eq!(rep.cost, *rep.iter_costs.last().unwrap(), epsilon = 0.0);
    }

    #[test]
    fn straight_line_tracking_settles_under_two_centimeters() {
        let mut prob = nominal_problem();
        let cfg = prob.config.clone();
        let p = VehicleParams::default();
        let mut state = VehicleState {
            x: 0.0,
            y: 0.0,
            psi: 0.0,
            vx: 1.0,
            vy: 0.0,
            omega: 0.0,
        };
        let mut warm: Option<Vec<f64>> = None;
        let mut worst_late = 0.0f64;
        for step in 0..60 {
            let refs: Vec<[f64; 2]> = (1..=cfg.h)
                .map(|k| [state.x + cfg.v_ref * cfg.ts * k as f64, 0.0])
                .collect();
            let rep = prob
                .solve(&state, &refs, None, warm.as_deref())
                .unwrap();
            let u = rep.u_star[0];
            let mut x = state.to_array();
            for _ in 0..10 {
                x = rk4_step(&x, &u, &p, 0.002);
            }
            state = VehicleState::from_array(x);
            warm = Some(rep.flat_controls());
            if step >= 20 {
                worst_late = worst_late.max(state.y.abs());
            }
        }
        assert!(
            worst_late < 0.02,
            "lateral error after transient {worst_late}"
        );
    }

    #[test]
    fn warm_start_never_needs_more_iterations_on_median() {
        let mut prob = nominal_problem();
        let cfg = prob.config.clone();
        let p = VehicleParams::default();
        let mut state = moving_state();
        let mut warm: Option<Vec<f64>> = None;
        let mut warm_iters = Vec::new();
        let mut cold_iters = Vec::new();
        for _ in 0..25 {
            let refs = arc_refs(&state, &cfg, 1.2, 1.5);
            let cold = prob.solve(&state, &refs, None, None).unwrap();
            let rep = prob.solve(&state, &refs, None, warm.as_deref()).unwrap();
            cold_iters.push(cold.iterations);
            warm_iters.push(rep.iterations);
            let u = rep.u_star[0];
            let mut x = state.to_array();
            for _ in 0..10 {
                x = rk4_step(&x, &u, &p, 0.002);
            }
            state = VehicleState::from_array(x);
            warm = Some(rep.flat_controls());
        }
        let med = |v: &mut Vec<usize>| {
            v.sort_unstable();
            v[v.len() / 2]
        };
        let mw = med(&mut warm_iters);
        let mc = med(&mut cold_iters);
        assert!(mw <= mc, "warm median {mw} vs cold median {mc}");
    }

    #[test]
    fn vertex_weights_reduce_to_the_single_specialist() {
        let x0 = moving_state();
        let refs = arc_refs(&x0, &OcpConfig::default(), 1.0, 2.0);

        // two first-principles specialists; the vertex mixture must
        // reproduce the parametric solution of member 0 exactly
        let nominal = VehicleParams::default();
        let shifted = make_regime(
            &nominal,
            &RegimeShift {
                mu_scale: Some(0.5),
                mass_factor: None,
                drag_factor: None,
            },
        );
        let lib = SpecialistLibrary::new(vec![
            SpecialistModel::Ode {
                params: nominal,
                tag: "nominal".into(),
            },
            SpecialistModel::Ode {
                params: shifted,
                tag: "low-grip".into(),
            },
        ])
        .unwrap();
        let g = build_ensemble(&lib).unwrap();
        let mut pair = transcribe(&g, &OcpConfig::default(), ModelKind::Ensemble).unwrap();
        let rep_pair = pair.solve(&x0, &refs, Some(&[1.0, 0.0]), None).unwrap();

        let mut single = nominal_problem();
        let rep_single = single.solve(&x0, &refs, None, None).unwrap();

        for (a, b) in rep_pair.u_star.iter().zip(&rep_single.u_star) {
            assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-6);
            assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-6);
        }
    }

    #[test]
    fn parameter_write_is_negligible_next_to_a_solve() {
        let mut prob = nominal_problem();
        let x0 = moving_state();
        let refs = arc_refs(&x0, &OcpConfig::default(), 1.2, 1.5);
        let t0 = Instant::now();
        prob.solve(&x0, &refs, None, None).unwrap();
        let t_solve = t0.elapsed().as_secs_f64();

        let shifted = make_regime(
            &VehicleParams::default(),
            &RegimeShift {
                mu_scale: Some(1.25),
                mass_factor: None,
                drag_factor: None,
            },
        );
        let t1 = Instant::now();
        for _ in 0..100 {
            prob.update_params(&shifted).unwrap();
        }
        let t_update = t1.elapsed().as_secs_f64() / 100.0;
        assert!(
            t_update < 0.01 * t_solve,
            "update {t_update}s vs solve {t_solve}s"
        );
        let off = prob.tail_offset();
        assert_eq!(&prob.params()[off..], shifted.to_slots().as_slice());
    }

    #[test]
    fn rebuilt_baseline_matches_parametric_update() {
        let shifted = make_regime(
            &VehicleParams::default(),
            &RegimeShift {
                mu_scale: Some(1.25),
                mass_factor: None,
                drag_factor: None,
            },
        );
        let cfg = OcpConfig::default();
        let x0 = moving_state();
        let refs = arc_refs(&x0, &cfg, 1.2, 1.5);

        let model = build_parametric_graph();
        let mut par = transcribe(&model, &cfg, ModelKind::Parametric).unwrap();
        let t0 = Instant::now();
        par.update_params(&shifted).unwrap();
        let t_update = t0.elapsed().as_secs_f64();
        let rep_par = par.solve(&x0, &refs, None, None).unwrap();

        let (mut baked, latency) = rebuild_jit_baseline(&shifted, &cfg).unwrap();
        let rep_baked = baked.solve(&x0, &refs, None, None).unwrap();

        for (a, b) in rep_par.u_star.iter().zip(&rep_baked.u_star) {
            assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-6);
            assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-6);
        }
        assert!(
            latency >= 10.0 * t_update,
            "rebuild {latency}s vs update {t_update}s"
        );

        // rebuilding must also cost more than one reweighting pass
        let combos = [
            RegimeShift {
                mu_scale: Some(0.5),
                mass_factor: None,
                drag_factor: None,
            },
            RegimeShift {
                mu_scale: Some(1.0),
                mass_factor: Some(1.2),
                drag_factor: None,
            },
            RegimeShift {
                mu_scale: Some(1.25),
                mass_factor: None,
                drag_factor: Some(1.4),
            },
        ];
        let members: Vec<SpecialistModel> = combos
            .iter()
            .enumerate()
            .map(|(i, s)| SpecialistModel::Ode {
                params: make_regime(&VehicleParams::default(), s),
                tag: format!("r{i}"),
            })
            .collect();
        let lib = SpecialistLibrary::new(members).unwrap();
        let mut gov = GovernorState::new(lib.len(), 20, cfg.ts);
        let p0 = VehicleParams::default();
        let u = [0.05, 0.4];
        let mut gov_latency = 0.0;
        let mut x_prev = moving_state();
        for _ in 0..21 {
            let xa = rk4_step(&x_prev.to_array(), &u, &p0, cfg.ts);
            let x_k = VehicleState::from_array(xa);
            gov_latency = governor_step(
                &mut gov,
                x_k,
                x_prev,
                crate::vehicle::ControlInput {
                    delta: u[0],
                    d: u[1],
                },
                &lib,
                false,
            );
            x_prev = x_k;
        }
        assert!(
            latency >= gov_latency,
            "rebuild {latency}s vs reweighting {gov_latency}s"
        );
    }

    #[test]
    fn ensemble_solve_is_derivative_bound() {
        let mut ens = ensemble_problem(2);
        let x0 = moving_state();
        let refs = arc_refs(&x0, &OcpConfig::default(), 1.0, 2.0);
        let w = [0.5, 0.5];
        let rep = ens.solve(&x0, &refs, Some(&w), None).unwrap();
        assert!(
            rep.timing.derivative_eval > rep.timing.linear_solve,
            "derivative {}s vs linear {}s",
            rep.timing.derivative_eval,
            rep.timing.linear_solve
        );
    }

    #[test]
    fn jacobian_density_is_model_independent() {
        let par = nominal_problem();
        let ens = ensemble_problem(2);
        let d_par = par.jacobian_density();
        let d_ens = ens.jacobian_density();
        assert!(d_par > 0.0 && d_par < 1.0);
        assert!(
            (d_par - d_ens).abs() <= 0.01,
            "densities diverge: parametric {d_par} vs ensemble {d_ens}"
        );
    }

    #[test]
    fn weight_and_param_writes_are_guarded() {
        let mut par = nominal_problem();
        assert!(par.update_weights(&[1.0]).is_err());
        let x0 = moving_state();
        let refs = arc_refs(&x0, &OcpConfig::default(), 1.0, 2.0);
        assert!(par.solve(&x0, &refs, Some(&[1.0]), None).is_err());
        assert!(par.solve(&x0, &refs[..3], None, None).is_err());

        let mut ens = ensemble_problem(2);
        assert!(ens.update_params(&VehicleParams::default()).is_err());
        assert!(ens.update_weights(&[0.5, 0.6]).is_err());
        assert!(ens.update_weights(&[-0.2, 1.2]).is_err());
        assert!(ens.update_weights(&[0.5]).is_err());
        assert!(ens.solve(&x0, &refs, None, None).is_err());
        ens.update_weights(&[0.25, 0.75]).unwrap();
        let off = ens.tail_offset();
        assert_eq!(&ens.params()[off..], &[0.25, 0.75]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        /// returned controls always satisfy box and rate constraints, and
        /// accepted steps never increase the cost
        #[test]
        fn solves_stay_feasible_and_monotone(
            vx in 0.4f64..2.2,
            vy in -0.25f64..0.25,
            omega in -2.5f64..2.5,
            psi in -3.0f64..3.0,
            radius in 0.6f64..4.0,
            speed in 0.5f64..1.8,
            left in proptest::bool::ANY,
        ) {
            let mut prob = nominal_problem();
            let x0 = VehicleState { x: 0.0, y: 0.0, psi, vx, vy, omega };
            let r = if left { radius } else { -radius };
            let refs = arc_refs(&x0, &OcpConfig::default(), speed, r);
            let rep = prob.solve(&x0, &refs, None, None).unwrap();
            prop_assert!(rep.constraint_violation <= 1e-9);
            for w in rep.iter_costs.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            let t = rep.timing;
            prop_assert!(t.derivative_eval + t.linear_solve + t.line_search <= t.total + 1e-9);
        }
    }
}
