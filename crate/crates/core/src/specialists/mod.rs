//! Specialist dynamics models: dataset generation, physics-regularized MLP
//! training, greedy library selection, and symbolic embedding into the
//! mixed ensemble graph.
//!
//! A specialist predicts the full 6-row state derivative from the 5 pose-
//! invariant inputs (vx, vy, omega, delta, D); the ensemble mixes only the
//! dynamic rows 3..5 and keeps kinematics analytic. Specialists are frozen
//! once trained — adaptation happens purely through mixing weights.

mod dataset;
mod embed;
mod select;
mod train;

pub use dataset::{generate_dataset, DatasetConfig, Split, TrainingSet};
pub use embed::{build_ensemble, embed_symbolic};
pub use select::{select_library, select_regimes};
pub use train::{
    l2_parameter_norm, physics_loss, train_specialist, train_specialist_pair, TrainConfig,
};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::vehicle::{continuous_dynamics, VehicleParams};

/// Net input width: (vx, vy, omega, delta, D). Pose coordinates are
/// excluded because body-frame dynamics are pose-invariant.
pub const NET_INPUTS: usize = 5;
/// Net output width: full state derivative.
pub const NET_OUTPUTS: usize = 6;
/// Hidden layer width.
pub const HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainProtocol {
    AdamOnly,
    Hybrid,
}

/// A frozen MLP dynamics surrogate with its normalization statistics and
/// training provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpecialistNet {
    pub layer_dims: Vec<usize>,
    /// per layer, shape (out, in)
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
    /// the regime Φ the training data was generated under
    pub regime: VehicleParams,
    pub regime_tag: String,
    pub protocol: TrainProtocol,
    /// held-out normalized RMSE recorded at freeze time
    pub holdout_rmse: f64,
}

impl SpecialistNet {
    /// Raw physical input → raw physical derivative prediction.
    pub fn forward(&self, input: &[f64; NET_INPUTS]) -> [f64; NET_OUTPUTS] {
        let mut act: Vec<f64> = (0..NET_INPUTS)
            .map(|i| (input[i] - self.input_mean[i]) / self.input_std[i])
            .collect();
        let n_layers = self.weights.len();
        for l in 0..n_layers {
            let w = &self.weights[l];
            let b = &self.biases[l];
            let mut next = vec![0.0; w.nrows()];
            for (r, out) in next.iter_mut().enumerate() {
                let mut acc = b[r];
                for (c, a) in act.iter().enumerate() {
                    acc += w[(r, c)] * a;
                }
                *out = if l + 1 < n_layers { acc.tanh() } else { acc };
            }
            act = next;
        }
        std::array::from_fn(|r| act[r] * self.output_std[r] + self.output_mean[r])
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2
            || self.layer_dims[0] != NET_INPUTS
            || *self.layer_dims.last().unwrap() != NET_OUTPUTS
        {
            return Err(CoreError::Invalid(format!(
                "bad layer dims {:?}",
                self.layer_dims
            )));
        }
        if self.weights.len() != self.layer_dims.len() - 1
            || self.biases.len() != self.weights.len()
        {
            return Err(CoreError::Invalid("layer count mismatch".into()));
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.nrows() != self.layer_dims[l + 1]
                || w.ncols() != self.layer_dims[l]
                || b.len() != w.nrows()
            {
                return Err(CoreError::Invalid(format!("layer {l} shape mismatch")));
            }
            if w.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::Invalid(format!("layer {l} has non-finite values")));
            }
        }
        let stats_ok = self.input_std.iter().chain(&self.output_std).all(|&s| s > 0.0)
            && self.input_mean.len() == NET_INPUTS
            && self.input_std.len() == NET_INPUTS
            && self.output_mean.len() == NET_OUTPUTS
            && self.output_std.len() == NET_OUTPUTS;
        if !stats_ok {
            return Err(CoreError::Invalid(
                "normalization stats malformed or not strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// One member of a library: a trained net or an exact-physics model of a
/// regime (the "ideal ODE specialist" used by the diagnostic tiers).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpecialistModel {
    Net(SpecialistNet),
    Ode { params: VehicleParams, tag: String },
}

impl SpecialistModel {
    pub fn tag(&self) -> &str {
        match self {
            SpecialistModel::Net(n) => &n.regime_tag,
            SpecialistModel::Ode { tag, .. } => tag,
        }
    }

    /// Dynamic derivative rows (v̇x, v̇y, ω̇) at a raw state/control point.
    pub fn dynamic_rows(&self, x: &[f64; 6], u: &[f64; 2]) -> [f64; 3] {
        match self {
            SpecialistModel::Ode { params, .. } => {
                let dx = continuous_dynamics(x, u, params);
                [dx[3], dx[4], dx[5]]
            }
            SpecialistModel::Net(net) => {
                let input = [x[3], x[4], x[5], u[0], u[1]];
                let out = net.forward(&input);
                [out[3], out[4], out[5]]
            }
        }
    }
}

/// Fixed-size library of frozen specialists sharing one input convention.
#[derive(Clone, Debug)]
pub struct SpecialistLibrary {
    pub members: Vec<SpecialistModel>,
}

impl SpecialistLibrary {
    pub fn new(members: Vec<SpecialistModel>) -> Result<Self> {
        if members.len() < 2 {
            return Err(CoreError::Invalid(format!(
                "library needs at least 2 specialists, got {}",
                members.len()
            )));
        }
        let mut dims: Option<&[usize]> = None;
        for m in &members {
            if let SpecialistModel::Net(n) = m {
                n.validate()?;
                match dims {
                    None => dims = Some(&n.layer_dims),
                    Some(d) if d == n.layer_dims.as_slice() => {}
                    Some(d) => {
                        return Err(CoreError::Invalid(format!(
                            "mixed layer dims in library: {:?} vs {:?}",
                            d, n.layer_dims
                        )))
                    }
                }
            }
        }
        Ok(SpecialistLibrary { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Library of exact-physics specialists, one per regime.
    pub fn from_regimes(regimes: &[(VehicleParams, String)]) -> Result<Self> {
        Self::new(
            regimes
                .iter()
                .map(|(params, tag)| SpecialistModel::Ode {
                    params: *params,
                    tag: tag.clone(),
                })
                .collect(),
        )
    }
}

/// Versioned single-specialist file payload.
#[derive(Serialize, Deserialize)]
struct SpecialistFile {
    version: u32,
    #[serde(flatten)]
    model: SpecialistModel,
}

const FILE_VERSION: u32 = 1;

pub fn save_specialist(model: &SpecialistModel, path: &Path) -> Result<()> {
    let file = SpecialistFile {
        version: FILE_VERSION,
        model: model.clone(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_specialist(path: &Path) -> Result<SpecialistModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Invalid(format!("cannot read specialist {path:?}: {e}")))?;
    let file: SpecialistFile = serde_json::from_str(&text)?;
    if file.version != FILE_VERSION {
        return Err(CoreError::Invalid(format!(
            "specialist file {path:?} has version {}, expected {FILE_VERSION}",
            file.version
        )));
    }
    if let SpecialistModel::Net(n) = &file.model {
        n.validate()?;
    }
    Ok(file.model)
}

/// Library manifest: a list of member file names relative to the manifest.
#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    members: Vec<String>,
}

/// Write a library as one manifest plus one file per member, named
/// `<stem>_<index>_<tag>.json`.
pub fn save_library(lib: &SpecialistLibrary, manifest_path: &Path) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("library");
    let mut names = Vec::new();
    for (i, member) in lib.members.iter().enumerate() {
        let name = format!("{stem}_{i}_{}.json", member.tag());
        save_specialist(member, &dir.join(&name))?;
        names.push(name);
    }
    let manifest = Manifest {
        version: FILE_VERSION,
        members: names,
    };
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_library(manifest_path: &Path) -> Result<SpecialistLibrary> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| {
        CoreError::Invalid(format!("cannot read library manifest {manifest_path:?}: {e}"))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != FILE_VERSION {
        return Err(CoreError::Invalid(format!(
            "manifest version {} unsupported",
            manifest.version
        )));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let members = manifest
        .members
        .iter()
        .map(|name| load_specialist(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    SpecialistLibrary::new(members)
}

/// The candidate regime grid the experiments draw from: the Cartesian
/// product of the shift axes they exercise.
pub fn candidate_regime_grid(base: &VehicleParams) -> Vec<(VehicleParams, String)> {
    let mut out = Vec::new();
    for &mu in &[0.5, 0.75, 1.0, 1.25] {
        for &mass in &[1.0, 1.2] {
            for &drag in &[1.0, 1.4] {
                let shift = crate::vehicle::RegimeShift {
                    mu_scale: Some(mu),
                    mass_factor: Some(mass),
                    drag_factor: Some(drag),
                };
                let tag = format!("mu{mu:.2}_m{mass:.1}_cd{drag:.1}");
                out.push((crate::vehicle::make_regime(base, &shift), tag));
            }
        }
    }
    out
}

/// Index of the unshifted regime inside [`candidate_regime_grid`].
pub fn nominal_candidate_index(base: &VehicleParams) -> usize {
    candidate_regime_grid(base)
        .iter()
        .position(|(p, _)| p == base)
        .expect("grid contains the nominal regime")
}

/// Default library path helper used by the CLI.
pub fn library_manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.manifest.json"))
}
