//! Physics-regularized specialist training.
//!
//! Loss: L_total = L_data + λ·L_phy, both mean-squared in the Z-scored
//! target space. L_phy compares the net's kinematic derivative rows with
//! the analytic kinematics of the (pose-normalized) input state, so the
//! net cannot trade kinematic consistency for data fit.
//!
//! Protocol: Adam with validation early stopping, optionally followed by
//! full-batch L-BFGS refinement from the best Adam checkpoint ("hybrid").

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::optim::{minimize_lbfgs, LbfgsConfig};
use crate::vehicle::VehicleParams;

use super::{
    Split, SpecialistNet, TrainProtocol, TrainingSet, HIDDEN, NET_INPUTS, NET_OUTPUTS,
};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub hidden: usize,
    /// number of hidden tanh layers
    pub hidden_layers: usize,
    pub lambda_phy: f64,
    pub adam_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// epochs without validation improvement before Adam stops
    pub patience: usize,
    pub lbfgs_max_iters: usize,
    pub lbfgs_memory: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: HIDDEN,
            hidden_layers: 3,
            lambda_phy: 0.1,
            adam_lr: 1e-3,
            batch_size: 256,
            max_epochs: 5000,
            patience: 200,
            lbfgs_max_iters: 500,
            lbfgs_memory: 10,
            seed: 0,
        }
    }
}

/// Mutable MLP parameters during training; frozen into a
/// [`SpecialistNet`] afterwards.
struct Mlp {
    dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

impl Mlp {
    fn xavier(dims: &[usize], rng: &mut ChaCha8Rng) -> Mlp {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.gen_range(-limit..limit)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
        }
    }

    fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn flatten_into(&self, out: &mut [f64]) {
        let mut k = 0;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter() {
                out[k] = *v;
                k += 1;
            }
            for v in b.iter() {
                out[k] = *v;
                k += 1;
            }
        }
    }

    fn unflatten_from(&mut self, flat: &[f64]) {
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = flat[k];
                k += 1;
            }
            for v in b.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
    }

    /// Forward pass over a batch (rows × inputs, already normalized),
    /// keeping activations for backprop.
    fn forward(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let n_layers = self.weights.len();
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.clone());
        for l in 0..n_layers {
            let mut z = acts[l].dot(&self.weights[l].t());
            z += &self.biases[l];
            if l + 1 < n_layers {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        acts
    }

    /// Backprop of dL/d(output) through stored activations; returns
    /// per-layer gradients.
    fn backward(
        &self,
        acts: &[Array2<f64>],
        mut delta: Array2<f64>,
    ) -> (Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let n_layers = self.weights.len();
        let mut grad_w = vec![Array2::zeros((0, 0)); n_layers];
        let mut grad_b = vec![Array1::zeros(0); n_layers];
        for l in (0..n_layers).rev() {
            grad_w[l] = delta.t().dot(&acts[l]);
            grad_b[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l]);
                // tanh'(z) = 1 - a², with a the stored activation
                back.zip_mut_with(&acts[l], |d, a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        (grad_w, grad_b)
    }
}

/// Normalized training tensors plus the statistics that produced them.
struct Prepared {
    x_train: Array2<f64>,
    t_train: Array2<f64>,
    /// normalized analytic kinematics of the train inputs (targets for the
    /// physics term)
    k_train: Array2<f64>,
    x_val: Array2<f64>,
    t_val: Array2<f64>,
    k_val: Array2<f64>,
    x_test: Array2<f64>,
    t_test: Array2<f64>,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    output_mean: Vec<f64>,
    output_std: Vec<f64>,
}

fn column_stats(m: &Array2<f64>, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let cols = m.ncols();
    let mut mean = vec![0.0; cols];
    let mut std = vec![0.0; cols];
    for &r in rows {
        for c in 0..cols {
            mean[c] += m[(r, c)];
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    for &r in rows {
        for c in 0..cols {
            let d = m[(r, c)] - mean[c];
            std[c] += d * d;
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n).sqrt();
        // constant features carry no scale; unit std keeps Z-scores finite
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    (mean, std)
}

fn gather_normalized(
    m: &Array2<f64>,
    rows: &[usize],
    mean: &[f64],
    std: &[f64],
) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        for c in 0..m.ncols() {
            out[(i, c)] = (m[(r, c)] - mean[c]) / std[c];
        }
    }
    out
}

fn prepare(data: &TrainingSet) -> Result<Prepared> {
    if data.is_empty() {
        return Err(CoreError::Invalid("empty training set".into()));
    }
    let train = data.indices_of(Split::Train);
    let val = data.indices_of(Split::Val);
    let test = data.indices_of(Split::Test);
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(CoreError::Invalid(
            "training set must contain all three splits".into(),
        ));
    }
    let (input_mean, input_std) = column_stats(&data.inputs, &train);
    let (output_mean, output_std) = column_stats(&data.targets, &train);

    // analytic kinematic rows of a pose-normalized state are simply the
    // body velocities; normalize them with the output statistics
    let kin_normalized = |rows: &[usize]| -> Array2<f64> {
        let mut k = Array2::zeros((rows.len(), 3));
        for (i, &r) in rows.iter().enumerate() {
            for c in 0..3 {
                k[(i, c)] = (data.inputs[(r, c)] - output_mean[c]) / output_std[c];
            }
        }
        k
    };

    Ok(Prepared {
        x_train: gather_normalized(&data.inputs, &train, &input_mean, &input_std),
        t_train: gather_normalized(&data.targets, &train, &output_mean, &output_std),
        k_train: kin_normalized(&train),
        x_val: gather_normalized(&data.inputs, &val, &input_mean, &input_std),
        t_val: gather_normalized(&data.targets, &val, &output_mean, &output_std),
        k_val: kin_normalized(&val),
        x_test: gather_normalized(&data.inputs, &test, &input_mean, &input_std),
        t_test: gather_normalized(&data.targets, &test, &output_mean, &output_std),
        input_mean,
        input_std,
        output_mean,
        output_std,
    })
}

/// L_total and dL/d(prediction) for a batch of normalized predictions.
fn loss_and_delta(
    pred: &Array2<f64>,
    targets: &Array2<f64>,
    kin: &Array2<f64>,
    lambda: f64,
) -> (f64, Array2<f64>) {
    let b = pred.nrows() as f64;
    let resid = pred - targets;
    let l_data = resid.mapv(|v| v * v).sum() / (b * NET_OUTPUTS as f64);
    let kin_resid = &pred.slice(s![.., 0..3]) - kin;
    let l_phy = kin_resid.mapv(|v| v * v).sum() / (b * 3.0);

    let mut delta = resid * (2.0 / (b * NET_OUTPUTS as f64));
    {
        let mut kin_cols = delta.slice_mut(s![.., 0..3]);
        kin_cols += &(&kin_resid * (lambda * 2.0 / (b * 3.0)));
    }
    (l_data + lambda * l_phy, delta)
}

fn eval_loss(mlp: &Mlp, x: &Array2<f64>, t: &Array2<f64>, k: &Array2<f64>, lambda: f64) -> f64 {
    let acts = mlp.forward(x);
    loss_and_delta(acts.last().unwrap(), t, k, lambda).0
}

/// Normalized held-out RMSE over all outputs.
fn rmse(mlp: &Mlp, x: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let acts = mlp.forward(x);
    let resid = acts.last().unwrap() - t;
    (resid.mapv(|v| v * v).sum() / resid.len() as f64).sqrt()
}

/// Diagnostic form of the physics term: raw-unit kinematic mismatch of a
/// net at raw input rows, normalized by the net's output scales. The
/// training loop computes the same quantity in normalized space.
pub fn physics_loss(net: &SpecialistNet, inputs: &Array2<f64>) -> f64 {
    let n = inputs.nrows();
    assert!(n > 0, "empty batch");
    let mut acc = 0.0;
    for i in 0..n {
        let row = inputs.row(i);
        let input: [f64; NET_INPUTS] = std::array::from_fn(|c| row[c]);
        let out = net.forward(&input);
        // analytic kinematics of the pose-normalized state
        let kin = [input[0], input[1], input[2]];
        for r in 0..3 {
            let d = (out[r] - kin[r]) / net.output_std[r];
            acc += d * d;
        }
    }
    acc / (n as f64 * 3.0)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl AdamState {
    fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + EPS);
        }
    }
}

fn adam_phase(mlp: &mut Mlp, prep: &Prepared, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let n_params = mlp.n_params();
    let mut flat = vec![0.0; n_params];
    let mut grad_flat = vec![0.0; n_params];
    let mut adam = AdamState::new(n_params);
    let n_train = prep.x_train.nrows();
    let mut order: Vec<usize> = (0..n_train).collect();

    let mut best_val = f64::INFINITY;
    let mut best_params = vec![0.0; n_params];
    mlp.flatten_into(&mut best_params);
    let mut since_best = 0;

    for _epoch in 0..cfg.max_epochs {
        for i in (1..n_train).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let xb = prep.x_train.select(Axis(0), chunk);
            let tb = prep.t_train.select(Axis(0), chunk);
            let kb = prep.k_train.select(Axis(0), chunk);
            let acts = mlp.forward(&xb);
            let (loss, delta) = loss_and_delta(acts.last().unwrap(), &tb, &kb, cfg.lambda_phy);
            if !loss.is_finite() {
                return Err(CoreError::Optim(
                    "training diverged: non-finite loss under Adam".into(),
                ));
            }
            let (gw, gb) = mlp.backward(&acts, delta);
            let mut k = 0;
            for (w, b) in gw.iter().zip(&gb) {
                for v in w.iter() {
                    grad_flat[k] = *v;
                    k += 1;
                }
                for v in b.iter() {
                    grad_flat[k] = *v;
                    k += 1;
                }
            }
            mlp.flatten_into(&mut flat);
            adam.step(&mut flat, &grad_flat, cfg.adam_lr);
            mlp.unflatten_from(&flat);
        }

        let val = eval_loss(mlp, &prep.x_val, &prep.t_val, &prep.k_val, cfg.lambda_phy);
        if _epoch % 200 == 0 {
            log::debug!("adam epoch {_epoch}: val loss {val:.3e}");
        }
        if val < best_val {
            best_val = val;
            mlp.flatten_into(&mut best_params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::debug!("adam stopped at epoch {_epoch}: best val {best_val:.3e}");
                break;
            }
        }
    }
    mlp.unflatten_from(&best_params);
    Ok(())
}

fn lbfgs_phase(mlp: &mut Mlp, prep: &Prepared, cfg: &TrainConfig) {
    let n_params = mlp.n_params();
    let mut x0 = vec![0.0; n_params];
    mlp.flatten_into(&mut x0);

    // scratch net evaluated inside the closure
    let mut work = Mlp {
        dims: mlp.dims.clone(),
        weights: mlp.weights.clone(),
        biases: mlp.biases.clone(),
    };
    let f_g = |params: &[f64], grad_out: &mut [f64]| -> f64 {
        work.unflatten_from(params);
        let acts = work.forward(&prep.x_train);
        let (loss, delta) =
            loss_and_delta(acts.last().unwrap(), &prep.t_train, &prep.k_train, cfg.lambda_phy);
        let (gw, gb) = work.backward(&acts, delta);
        let mut k = 0;
        for (w, b) in gw.iter().zip(&gb) {
            for v in w.iter() {
                grad_out[k] = *v;
                k += 1;
            }
            for v in b.iter() {
                grad_out[k] = *v;
                k += 1;
            }
        }
        loss
    };

    let out = minimize_lbfgs(
        f_g,
        &x0,
        &LbfgsConfig {
            memory: cfg.lbfgs_memory,
            max_iters: cfg.lbfgs_max_iters,
            grad_tol: 1e-11,
            ..LbfgsConfig::default()
        },
    );
    log::debug!(
        "refinement: {} iterations, loss {:.3e}, line search failed: {}",
        out.iterations,
        out.f,
        out.line_search_failed
    );
    // on line-search failure the outcome already holds the best iterate
    mlp.unflatten_from(&out.x);
}

fn freeze(
    mlp: &Mlp,
    prep: &Prepared,
    regime: &VehicleParams,
    tag: &str,
    protocol: TrainProtocol,
) -> SpecialistNet {
    SpecialistNet {
        layer_dims: mlp.dims.clone(),
        weights: mlp.weights.clone(),
        biases: mlp.biases.clone(),
        input_mean: prep.input_mean.clone(),
        input_std: prep.input_std.clone(),
        output_mean: prep.output_mean.clone(),
        output_std: prep.output_std.clone(),
        regime: *regime,
        regime_tag: tag.to_string(),
        protocol,
        holdout_rmse: rmse(mlp, &prep.x_test, &prep.t_test),
    }
}

/// Train one specialist under the given protocol.
pub fn train_specialist(
    data: &TrainingSet,
    regime: &VehicleParams,
    tag: &str,
    protocol: TrainProtocol,
    cfg: &TrainConfig,
) -> Result<SpecialistNet> {
    let (adam, hybrid) = train_specialist_pair(data, regime, tag, cfg)?;
    Ok(match protocol {
        TrainProtocol::AdamOnly => adam,
        TrainProtocol::Hybrid => hybrid,
    })
}

/// Train the Adam-only checkpoint and its L-BFGS refinement in one pass;
/// the refinement starts from the best Adam weights, so both protocols
/// share the expensive global-search phase.
pub fn train_specialist_pair(
    data: &TrainingSet,
    regime: &VehicleParams,
    tag: &str,
    cfg: &TrainConfig,
) -> Result<(SpecialistNet, SpecialistNet)> {
    let prep = prepare(data)?;
    let mut dims = vec![NET_INPUTS];
    dims.extend(std::iter::repeat(cfg.hidden).take(cfg.hidden_layers));
    dims.push(NET_OUTPUTS);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mlp = Mlp::xavier(&dims, &mut rng);

    adam_phase(&mut mlp, &prep, cfg, &mut rng)?;
    let adam_net = freeze(&mlp, &prep, regime, tag, TrainProtocol::AdamOnly);

    lbfgs_phase(&mut mlp, &prep, cfg);
    let hybrid_net = freeze(&mlp, &prep, regime, tag, TrainProtocol::Hybrid);
    Ok((adam_net, hybrid_net))
}

/// Root sum of squares over all weights; used only by tests guarding
/// against silent weight mutation.
pub fn l2_parameter_norm(net: &SpecialistNet) -> f64 {
    let mut acc = 0.0;
    for (w, b) in net.weights.iter().zip(&net.biases) {
        acc += w.iter().map(|v| v * v).sum::<f64>();
        acc += b.iter().map(|v| v * v).sum::<f64>();
    }
    acc.sqrt()
}



#[cfg(test)]
mod sizing_probe {
    use super::*;
    use crate::specialists::{generate_dataset, DatasetConfig};
    use crate::vehicle::VehicleParams;

    #[test]
    #[ignore]
    fn probe_fullsize_training() {
        let _ = env_logger::builder().is_test(true).try_init();
        probe_one(840, 4, 10);
    }

    fn probe_one(n_uniform: usize, n_chirps: usize, segments: usize) {
        let p = VehicleParams::default();
        let t0 = std::time::Instant::now();
        let dc = DatasetConfig {
            chirp_samples: 300,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&p, n_uniform, n_chirps, 42, &dc);
        let cfg = TrainConfig {
            seed: 7,
            ..TrainConfig::default()
        };
        let prep = prepare(&data).unwrap();
        eprintln!(
            "=== {} sweep + {} chirp rows = {} total, {} train rows, gen {:?} ===",
            n_uniform,
            data.len() - n_uniform,
            data.len(),
            prep.x_train.nrows(),
            t0.elapsed()
        );
        let mut dims = vec![NET_INPUTS];
        dims.extend(std::iter::repeat(cfg.hidden).take(cfg.hidden_layers));
        dims.push(NET_OUTPUTS);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut mlp = Mlp::xavier(&dims, &mut rng);

        let t1 = std::time::Instant::now();
        adam_phase(&mut mlp, &prep, &cfg, &mut rng).unwrap();
        let adam_rmse = rmse(&mlp, &prep.x_test, &prep.t_test);
        eprintln!("adam in {:?}: holdout rmse {:e}", t1.elapsed(), adam_rmse);

        for seg in 1..=segments {
            let seg_cfg = TrainConfig {
                lbfgs_max_iters: 6000,
                ..cfg
            };
            let ts = std::time::Instant::now();
            lbfgs_phase(&mut mlp, &prep, &seg_cfg);
            let tr = eval_loss(&mlp, &prep.x_train, &prep.t_train, &prep.k_train, cfg.lambda_phy);
            let ho = rmse(&mlp, &prep.x_test, &prep.t_test);
            eprintln!(
                "after {:5} iters ({:?}/seg): train loss {:.3e}, holdout rmse {:.3e}, ratio {:.1}",
                seg * 6000,
                ts.elapsed(),
                tr,
                ho,
                adam_rmse / ho
            );
        }
        let hybrid = freeze(&mlp, &prep, &p, "nominal", TrainProtocol::Hybrid);
        decompose_holdout(&hybrid, &data, n_uniform);
    }

    fn decompose_holdout(
        net: &crate::specialists::SpecialistNet,
        data: &crate::specialists::TrainingSet,
        n_uniform: usize,
    ) {
        use crate::specialists::dataset::Split;
        let test_idx = data.indices_of(Split::Test);
        let mut col_sq = [0.0f64; 6];
        let mut env_sq = 0.0;
        let mut env_n = 0usize;
        let mut chirp_sq = 0.0;
        let mut chirp_n = 0usize;
        let mut worst: Vec<(f64, usize)> = Vec::new();
        for &i in &test_idx {
            let mut x = [0.0; 5];
            for (j, v) in data.inputs.row(i).iter().enumerate() {
                x[j] = *v;
            }
            let pred = net.forward(&x);
            let mut row_sq = 0.0;
            for c in 0..6 {
                let e = (pred[c] - data.targets[[i, c]]) / net.output_std[c];
                col_sq[c] += e * e;
                row_sq += e * e;
            }
            if i < n_uniform {
                env_sq += row_sq;
                env_n += 1;
            } else {
                chirp_sq += row_sq;
                chirp_n += 1;
            }
            worst.push((row_sq, i));
        }
        let n = test_idx.len() as f64;
        eprintln!(
            "per-col rmse: {:?}",
            col_sq.map(|s| format!("{:.2e}", (s / n).sqrt()))
        );
        eprintln!(
            "envelope rows ({}) rmse {:.2e}; chirp rows ({}) rmse {:.2e}",
            env_n,
            (env_sq / (6.0 * env_n as f64)).sqrt(),
            chirp_n,
            (chirp_sq / (6.0 * chirp_n as f64)).sqrt()
        );
        worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for (sq, i) in worst.iter().take(5) {
            eprintln!(
                "worst row {} ({}): err {:.2e}, x = {:?}",
                i,
                if *i < n_uniform { "env" } else { "chirp" },
                (sq / 6.0).sqrt(),
                data.inputs.row(*i).to_vec()
            );
        }
    }
}
