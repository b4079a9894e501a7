//! Ground-truth vehicle model: a 6-state dynamic single-track (bicycle)
//! car with simplified Pacejka tire forces, plus the same model emitted as
//! a parametric expression graph so physical parameters can be updated
//! without rebuilding any symbolic structure.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::symgraph::{ExprGraph, NodeId};

/// Slip-angle regularization added to vx in denominators. Removes the
/// standstill singularity identically in the plant and all symbolic models.
pub const V_EPS: f64 = 1e-3;

/// Global-frame pose plus body-frame velocities.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct VehicleState {
    /// global x position, m
    pub x: f64,
    /// global y position, m
    pub y: f64,
    /// heading, rad
    pub psi: f64,
    /// body longitudinal velocity, m/s
    pub vx: f64,
    /// body lateral velocity, m/s
    pub vy: f64,
    /// yaw rate, rad/s
    pub omega: f64,
}

impl VehicleState {
    pub fn to_array(self) -> [f64; 6] {
        [self.x, self.y, self.psi, self.vx, self.vy, self.omega]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        VehicleState {
            x: a[0],
            y: a[1],
            psi: a[2],
            vx: a[3],
            vy: a[4],
            omega: a[5],
        }
    }
}

/// Steering angle and drive command.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ControlInput {
    /// steering angle, rad
    pub delta: f64,
    /// drive/throttle command, dimensionless in [-1, 1]
    pub d: f64,
}

impl ControlInput {
    pub fn to_array(self) -> [f64; 2] {
        [self.delta, self.d]
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        ControlInput { delta: a[0], d: a[1] }
    }
}

/// Physical parameter set Φ. Defaults are 1:43-scale magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// mass, kg
    pub m: f64,
    /// yaw inertia, kg·m²
    pub iz: f64,
    /// CoG to front axle, m
    pub lf: f64,
    /// CoG to rear axle, m
    pub lr: f64,
    /// Pacejka stiffness/shape/peak, front axle
    pub bf: f64,
    pub cf: f64,
    pub df: f64,
    /// Pacejka stiffness/shape/peak, rear axle
    pub br: f64,
    pub cr: f64,
    pub dr: f64,
    /// drivetrain gain coefficients
    pub cm1: f64,
    pub cm2: f64,
    /// rolling resistance, N
    pub cr0: f64,
    /// aerodynamic drag, N·s²/m²
    pub cd: f64,
    /// friction multiplier on both axle peak factors
    pub mu_scale: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            m: 0.041,
            iz: 27.8e-6,
            lf: 0.029,
            lr: 0.033,
            bf: 2.579,
            cf: 1.2,
            df: 0.192,
            br: 3.3852,
            cr: 1.2691,
            dr: 0.1737,
            cm1: 0.287,
            cm2: 0.0545,
            cr0: 0.0518,
            cd: 0.00035,
            mu_scale: 1.0,
        }
    }
}

/// Canonical parameter order used for graph parameter slots and the
/// key-value parameter file.
pub const PARAM_NAMES: [&str; 15] = [
    "m", "Iz", "lf", "lr", "Bf", "Cf", "Df", "Br", "Cr", "Dr", "Cm1", "Cm2", "Cr0", "Cd",
    "mu_scale",
];

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("Iz", self.iz),
            ("lf", self.lf),
            ("lr", self.lr),
            ("Df", self.df),
            ("Dr", self.dr),
            ("mu_scale", self.mu_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(CoreError::Invalid(format!(
                    "vehicle parameter {name} must be positive, got {v}"
                )));
            }
        }
        for (name, v) in self.to_slots().iter().zip(PARAM_NAMES).map(|(v, n)| (n, *v)) {
            if !v.is_finite() {
                return Err(CoreError::Invalid(format!(
                    "vehicle parameter {name} is not finite"
                )));
            }
        }
        Ok(())
    }

    /// Values in [`PARAM_NAMES`] order, the graph parameter-slot layout.
    pub fn to_slots(&self) -> [f64; 15] {
        [
            self.m, self.iz, self.lf, self.lr, self.bf, self.cf, self.df, self.br, self.cr,
            self.dr, self.cm1, self.cm2, self.cr0, self.cd, self.mu_scale,
        ]
    }

    pub fn from_slots(s: &[f64; 15]) -> Self {
        VehicleParams {
            m: s[0],
            iz: s[1],
            lf: s[2],
            lr: s[3],
            bf: s[4],
            cf: s[5],
            df: s[6],
            br: s[7],
            cr: s[8],
            dr: s[9],
            cm1: s[10],
            cm2: s[11],
            cr0: s[12],
            cd: s[13],
            mu_scale: s[14],
        }
    }

    fn set_by_name(&mut self, name: &str, value: f64) -> Result<()> {
        let mut slots = self.to_slots();
        let idx = PARAM_NAMES
            .iter()
            .position(|&n| n == name)
            .ok_or_else(|| CoreError::Invalid(format!("unknown vehicle parameter: {name}")))?;
        slots[idx] = value;
        *self = VehicleParams::from_slots(&slots);
        Ok(())
    }

    /// Parse a flat `name = value` parameter file. Lines may be blank or
    /// `#` comments; unknown names are rejected. Missing names keep their
    /// defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut p = VehicleParams::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let bad =
                |what: &str| CoreError::Invalid(format!("param file line {}: {what}", lineno + 1));
            let (name, value) = line.split_once('=').ok_or_else(|| bad("expected name = value"))?;
            let name = name.trim();
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| bad("value is not a number"))?;
            if !seen.insert(name.to_string()) {
                return Err(bad("duplicate parameter"));
            }
            p.set_by_name(name, value)?;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.format())?;
        Ok(())
    }

    pub fn format(&self) -> String {
        let slots = self.to_slots();
        let mut s = String::new();
        for (name, v) in PARAM_NAMES.iter().zip(slots) {
            s.push_str(&format!("{name} = {v}\n"));
        }
        s
    }
}

/// Multiplicative/absolute changes that define an operating regime.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegimeShift {
    /// absolute friction multiplier (replaces the current value)
    pub mu_scale: Option<f64>,
    /// factor applied to mass
    pub mass_factor: Option<f64>,
    /// factor applied to aerodynamic drag
    pub drag_factor: Option<f64>,
}

/// Apply a regime shift to a base parameter set.
pub fn make_regime(base: &VehicleParams, shift: &RegimeShift) -> VehicleParams {
    let mut p = *base;
    if let Some(mu) = shift.mu_scale {
        assert!(mu > 0.0, "mu_scale must be positive");
        p.mu_scale = mu;
    }
    if let Some(f) = shift.mass_factor {
        assert!(f > 0.0, "mass_factor must be positive");
        p.m *= f;
    }
    if let Some(f) = shift.drag_factor {
        assert!(f > 0.0, "drag_factor must be positive");
        p.cd *= f;
    }
    p
}

/// Continuous-time state derivative of the single-track model.
///
/// Kinematics: Ẋ = vx·cosψ − vy·sinψ, Ẏ = vx·sinψ + vy·cosψ, ψ̇ = ω.
/// Force balance: v̇x = (Fx − Fyf·sinδ + m·vy·ω)/m,
/// v̇y = (Fyr + Fyf·cosδ − m·vx·ω)/m, ω̇ = (Fyf·lf·cosδ − Fyr·lr)/Iz,
/// with Fy = mu_scale·D·sin(C·atan(B·α)) per axle and
/// Fx = (Cm1 − Cm2·vx)·D − Cr0 − Cd·vx².
pub fn continuous_dynamics(x: &[f64; 6], u: &[f64; 2], p: &VehicleParams) -> [f64; 6] {
    let [_, _, psi, vx, vy, omega] = *x;
    let [delta, d] = *u;

    let alpha_f = -((vy + p.lf * omega) / (vx + V_EPS)).atan() + delta;
    let alpha_r = -((vy - p.lr * omega) / (vx + V_EPS)).atan();
    let fyf = p.mu_scale * p.df * (p.cf * (p.bf * alpha_f).atan()).sin();
    let fyr = p.mu_scale * p.dr * (p.cr * (p.br * alpha_r).atan()).sin();
    let fx = (p.cm1 - p.cm2 * vx) * d - p.cr0 - p.cd * vx * vx;

    [
        vx * psi.cos() - vy * psi.sin(),
        vx * psi.sin() + vy * psi.cos(),
        omega,
        (fx - fyf * delta.sin() + p.m * vy * omega) / p.m,
        (fyr + fyf * delta.cos() - p.m * vx * omega) / p.m,
        (fyf * p.lf * delta.cos() - fyr * p.lr) / p.iz,
    ]
}

/// Classical fourth-order Runge-Kutta update of the plant.
pub fn rk4_step(x: &[f64; 6], u: &[f64; 2], p: &VehicleParams, dt: f64) -> [f64; 6] {
    assert!(dt > 0.0, "dt must be positive");
    let add = |a: &[f64; 6], b: &[f64; 6], s: f64| -> [f64; 6] {
        std::array::from_fn(|i| a[i] + s * b[i])
    };
    let k1 = continuous_dynamics(x, u, p);
    let k2 = continuous_dynamics(&add(x, &k1, dt / 2.0), u, p);
    let k3 = continuous_dynamics(&add(x, &k2, dt / 2.0), u, p);
    let k4 = continuous_dynamics(&add(x, &k3, dt), u, p);
    std::array::from_fn(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Variable-slot layout shared by every dynamics graph in this crate:
/// slots 0..=5 are the state (x, y, psi, vx, vy, omega), 6 is delta, 7 is
/// the drive command.
pub const VAR_SLOTS: usize = 8;

/// Build the single-track model as an expression graph whose physical
/// parameters live in parameter slots ([`PARAM_NAMES`] order). Updating μ,
/// m, or C_d is then a parameter write, never a graph rebuild. Outputs are
/// the six derivative rows.
pub fn build_parametric_graph() -> ExprGraph {
    let mut g = ExprGraph::new();
    let psi = g.var(2);
    let vx = g.var(3);
    let vy = g.var(4);
    let omega = g.var(5);
    let delta = g.var(6);
    let d = g.var(7);

    let p: Vec<NodeId> = (0..PARAM_NAMES.len()).map(|i| g.param(i)).collect();
    let (m, iz, lf, lr) = (p[0], p[1], p[2], p[3]);
    let (bf, cf, df) = (p[4], p[5], p[6]);
    let (br, cr, dr) = (p[7], p[8], p[9]);
    let (cm1, cm2, cr0, cd) = (p[10], p[11], p[12], p[13]);
    let mu = p[14];

    let eps = g.constant(V_EPS);
    let vx_reg = g.add(vx, eps);

    // front/rear slip angles
    let lf_w = g.mul(lf, omega);
    let num_f = g.add(vy, lf_w);
    let quot_f = g.div(num_f, vx_reg);
    let atan_f = g.atan(quot_f);
    let neg_f = g.neg(atan_f);
    let alpha_f = g.add(neg_f, delta);

    let lr_w = g.mul(lr, omega);
    let num_r = g.sub(vy, lr_w);
    let quot_r = g.div(num_r, vx_reg);
    let atan_r = g.atan(quot_r);
    let alpha_r = g.neg(atan_r);

    // Pacejka lateral forces
    let pacejka = |g: &mut ExprGraph, b: NodeId, c: NodeId, dpk: NodeId, alpha: NodeId| {
        let ba = g.mul(b, alpha);
        let at = g.atan(ba);
        let ca = g.mul(c, at);
        let s = g.sin(ca);
        let f = g.mul(dpk, s);
        g.mul(mu, f)
    };
    let fyf = pacejka(&mut g, bf, cf, df, alpha_f);
    let fyr = pacejka(&mut g, br, cr, dr, alpha_r);

    // longitudinal force
    let cm2_vx = g.mul(cm2, vx);
    let gain = g.sub(cm1, cm2_vx);
    let drive = g.mul(gain, d);
    let vx2 = g.mul(vx, vx);
    let drag = g.mul(cd, vx2);
    let t = g.sub(drive, cr0);
    let fx = g.sub(t, drag);

    // kinematic rows
    let cos_psi = g.cos(psi);
    let sin_psi = g.sin(psi);
    let vx_c = g.mul(vx, cos_psi);
    let vy_s = g.mul(vy, sin_psi);
    let x_dot = g.sub(vx_c, vy_s);
    let vx_s = g.mul(vx, sin_psi);
    let vy_c = g.mul(vy, cos_psi);
    let y_dot = g.add(vx_s, vy_c);
    let psi_dot = omega;

    // force balance
    let sin_d = g.sin(delta);
    let cos_d = g.cos(delta);
    let fyf_sd = g.mul(fyf, sin_d);
    let vy_w = g.mul(vy, omega);
    let m_vy_w = g.mul(m, vy_w);
    let t1 = g.sub(fx, fyf_sd);
    let t2 = g.add(t1, m_vy_w);
    let vx_dot = g.div(t2, m);

    let fyf_cd = g.mul(fyf, cos_d);
    let vx_w = g.mul(vx, omega);
    let m_vx_w = g.mul(m, vx_w);
    let t3 = g.add(fyr, fyf_cd);
    let t4 = g.sub(t3, m_vx_w);
    let vy_dot = g.div(t4, m);

    let fyf_lf = g.mul(fyf_cd, lf);
    let fyr_lr = g.mul(fyr, lr);
    let t5 = g.sub(fyf_lf, fyr_lr);
    let omega_dot = g.div(t5, iz);

    g.set_outputs(&[x_dot, y_dot, psi_dot, vx_dot, vy_dot, omega_dot]);
    g
}
