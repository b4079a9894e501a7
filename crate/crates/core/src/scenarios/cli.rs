//! Config-file-driven subcommand front end. Every run is seeded, lands in
//! its own directory with a config snapshot, and writes only deterministic
//! values into trace.csv and metrics.csv; wall-clock numbers go to
//! timings.csv so repeated runs stay byte-identical.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::governor::{DEFAULT_ALPHA, DEFAULT_WINDOW};
use crate::ocp::OcpConfig;
use crate::specialists::{
    generate_dataset, library_manifest_path, load_library, save_library, train_specialist_pair,
    DatasetConfig, SpecialistLibrary, SpecialistModel, TrainConfig,
};
use crate::vehicle::VehicleParams;

use super::bench::run_phase1_benchmarks;
use super::runloop::{
    build_problem, compute_metrics, run_closed_loop, RunMetrics, RunSetup, RunTrace,
};
use super::{experiment_regimes, regime_library, Scenario, ShiftKind, Tier, Track};

/// exit codes: 0 ok, 2 bad config or input, 3 runtime/solver failure,
/// 4 missing artifacts
enum CliFailure {
    Config(String),
    Runtime(String),
    Missing(String),
}

impl CliFailure {
    fn code(&self) -> i32 {
        match self {
            CliFailure::Config(_) => 2,
            CliFailure::Runtime(_) => 3,
            CliFailure::Missing(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliFailure::Config(m) | CliFailure::Runtime(m) | CliFailure::Missing(m) => m,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliFailure>;

fn config_err<E: std::fmt::Display>(e: E) -> CliFailure {
    CliFailure::Config(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> CliFailure {
    CliFailure::Runtime(e.to_string())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFile {
    pub vehicle: VehicleSection,
    pub ocp: OcpConfig,
    pub governor: GovernorSection,
    pub scenario: Scenario,
    pub track: TrackSection,
    pub paths: PathsSection,
    pub train: TrainSection,
    pub bench: BenchSection,
    pub matrix: MatrixSection,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleSection {
    /// flat key-value parameter file; absent means built-in defaults
    pub params: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GovernorSection {
    pub window: usize,
    pub alpha: f64,
}

impl Default for GovernorSection {
    fn default() -> Self {
        GovernorSection {
            window: DEFAULT_WINDOW,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackSection {
    pub straight: f64,
    pub radius: f64,
    pub ds: f64,
}

impl Default for TrackSection {
    fn default() -> Self {
        TrackSection {
            straight: 1.2,
            radius: 0.4,
            ds: 0.02,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// directory holding the trained library manifests
    pub library: PathBuf,
    /// root for run output directories
    pub out: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            library: PathBuf::from("artifacts"),
            out: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// library size
    pub n: usize,
    pub sweeps: usize,
    pub chirps: usize,
    pub chirp_samples: usize,
    pub dataset_seed: u64,
    pub train_seed: u64,
    pub adam_epochs: usize,
    /// second-phase budget for ordinary members
    pub lbfgs_iters: usize,
    /// second-phase budget for the nominal member, the pair the
    /// protocol-gap comparison is reported on
    pub showcase_iters: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            n: 8,
            sweeps: 840,
            chirps: 4,
            chirp_samples: 300,
            dataset_seed: 42,
            train_seed: 7,
            adam_epochs: 5000,
            lbfgs_iters: 6000,
            showcase_iters: 60000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub solves: usize,
    /// library size when built from exact-ODE members
    pub ideal_members: usize,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            solves: 100,
            ideal_members: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSection {
    pub seeds: Vec<u64>,
    pub tiers: Vec<Tier>,
    pub shifts: Vec<ShiftKind>,
}

impl Default for MatrixSection {
    fn default() -> Self {
        MatrixSection {
            seeds: (0..20).collect(),
            tiers: vec![Tier::IdealOde, Tier::NoisyOde],
            shifts: vec![ShiftKind::FrictionOnly, ShiftKind::AllParams],
        }
    }
}

#[derive(Parser)]
#[command(name = "govmpc", version, about = "adaptive ensemble NMPC workbench")]
struct Cli {
    /// declarative run file; flags override individual fields
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// train the specialist library in both protocols and save manifests
    Train {
        /// output directory for specialist files and manifests
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        lbfgs_iters: Option<usize>,
        #[arg(long)]
        showcase_iters: Option<usize>,
    },
    /// print the greedy library picks over the candidate regime grid
    Select {
        #[arg(long)]
        n: Option<usize>,
    },
    /// execute one scenario cell
    Run {
        #[arg(long)]
        out: Option<PathBuf>,
        /// ideal_ode, noisy_ode, pinn_adam, or pinn_hybrid
        #[arg(long)]
        tier: Option<String>,
        /// none, friction_only, all_params, or benchmark_friction_up
        #[arg(long)]
        shift: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        adaptive: Option<bool>,
    },
    /// run the full tier x shift grid with paired frozen baselines
    Matrix {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// latency benchmark: parametric vs ensemble plus adaptation paths
    Bench {
        #[arg(long)]
        out: Option<PathBuf>,
        /// build the ensemble from exact-ODE members; needs no artifacts
        #[arg(long)]
        ideal_ode: bool,
        #[arg(long)]
        solves: Option<usize>,
    },
    /// aggregate finished run directories into one summary
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
        /// run directories holding metrics.csv or bench.csv
        dirs: Vec<PathBuf>,
    },
}

pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let rf = load_run_file(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Train {
            out,
            n,
            lbfgs_iters,
            showcase_iters,
        } => {
            let mut rf = rf;
            if let Some(n) = n {
                rf.train.n = n;
            }
            if let Some(i) = lbfgs_iters {
                rf.train.lbfgs_iters = i;
            }
            if let Some(i) = showcase_iters {
                rf.train.showcase_iters = i;
            }
            let dir = out.unwrap_or_else(|| rf.paths.library.clone());
            cmd_train(&rf, &dir)
        }
        Cmd::Select { n } => {
            let n = n.unwrap_or(rf.train.n);
            cmd_select(&rf, n)
        }
        Cmd::Run {
            out,
            tier,
            shift,
            seed,
            adaptive,
        } => {
            let mut rf = rf;
            if let Some(t) = tier {
                rf.scenario.tier = parse_tier(&t)?;
            }
            if let Some(s) = shift {
                rf.scenario.shift = parse_shift(&s)?;
            }
            if let Some(s) = seed {
                rf.scenario.seed = s;
            }
            if let Some(a) = adaptive {
                rf.scenario.adaptive = a;
            }
            let out = out.unwrap_or_else(|| rf.paths.out.clone());
            cmd_run(&rf, &out)
        }
        Cmd::Matrix { out } => {
            let out = out.unwrap_or_else(|| rf.paths.out.clone());
            cmd_matrix(&rf, &out)
        }
        Cmd::Bench {
            out,
            ideal_ode,
            solves,
        } => {
            let mut rf = rf;
            if let Some(s) = solves {
                rf.bench.solves = s;
            }
            let out = out.unwrap_or_else(|| rf.paths.out.clone());
            cmd_bench(&rf, &out, ideal_ode)
        }
        Cmd::Report { out, dirs } => {
            let out = out.unwrap_or_else(|| PathBuf::from("report"));
            cmd_report(&out, &dirs)
        }
    }
}

fn parse_tier(s: &str) -> CliResult<Tier> {
    Ok(match s {
        "ideal_ode" => Tier::IdealOde,
        "noisy_ode" => Tier::NoisyOde,
        "pinn_adam" => Tier::PinnAdam,
        "pinn_hybrid" => Tier::PinnHybrid,
        _ => {
            return Err(CliFailure::Config(format!(
                "unknown tier '{s}' (ideal_ode, noisy_ode, pinn_adam, pinn_hybrid)"
            )))
        }
    })
}

fn parse_shift(s: &str) -> CliResult<ShiftKind> {
    Ok(match s {
        "none" => ShiftKind::None,
        "friction_only" => ShiftKind::FrictionOnly,
        "all_params" => ShiftKind::AllParams,
        "benchmark_friction_up" => ShiftKind::BenchmarkFrictionUp,
        _ => {
            return Err(CliFailure::Config(format!(
                "unknown shift '{s}' (none, friction_only, all_params, benchmark_friction_up)"
            )))
        }
    })
}

fn load_run_file(path: Option<&Path>) -> CliResult<RunFile> {
    let rf: RunFile = match path {
        None => RunFile::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliFailure::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| CliFailure::Config(format!("{}: {e}", p.display())))?
        }
    };
    rf.ocp.validate().map_err(config_err)?;
    rf.scenario.validate().map_err(config_err)?;
    if !(rf.track.straight > 0.0 && rf.track.radius > 0.0 && rf.track.ds > 0.0) {
        return Err(CliFailure::Config(
            "track dimensions must be positive".into(),
        ));
    }
    if rf.governor.window < 2 || !(rf.governor.alpha > 0.0 && rf.governor.alpha <= 1.0) {
        return Err(CliFailure::Config(
            "governor needs window >= 2 and alpha in (0, 1]".into(),
        ));
    }
    Ok(rf)
}

fn load_vehicle(rf: &RunFile) -> CliResult<VehicleParams> {
    match &rf.vehicle.params {
        None => Ok(VehicleParams::default()),
        Some(p) => {
            if !p.exists() {
                return Err(CliFailure::Missing(format!(
                    "vehicle parameter file {} not found",
                    p.display()
                )));
            }
            VehicleParams::load(p).map_err(config_err)
        }
    }
}

fn build_track(rf: &RunFile) -> CliResult<Track> {
    Track::stadium(rf.track.straight, rf.track.radius, rf.track.ds).map_err(config_err)
}

/// Library for a tier: exact-ODE members for the simulation tiers, a
/// trained manifest for the neural tiers.
fn tier_library(rf: &RunFile, base: &VehicleParams, tier: Tier) -> CliResult<SpecialistLibrary> {
    match tier {
        Tier::IdealOde | Tier::NoisyOde => {
            regime_library(base, rf.train.n).map_err(runtime_err)
        }
        Tier::PinnAdam | Tier::PinnHybrid => {
            let name = if tier == Tier::PinnAdam {
                "library_adam"
            } else {
                "library_hybrid"
            };
            let manifest = library_manifest_path(&rf.paths.library, name);
            if !manifest.exists() {
                return Err(CliFailure::Missing(format!(
                    "{} requires trained artifacts; {} not found (run the train subcommand)",
                    tier.name(),
                    manifest.display()
                )));
            }
            load_library(&manifest).map_err(config_err)
        }
    }
}

fn snapshot_config(rf: &RunFile, dir: &Path) -> CliResult<()> {
    let text = toml::to_string_pretty(rf)
        .map_err(|e| CliFailure::Runtime(format!("config snapshot: {e}")))?;
    fs::write(dir.join("config.toml"), text).map_err(runtime_err)
}

fn cmd_train(rf: &RunFile, dir: &Path) -> CliResult<()> {
    let base = load_vehicle(rf)?;
    let t = &rf.train;
    let regimes = experiment_regimes(&base, t.n).map_err(runtime_err)?;
    fs::create_dir_all(dir).map_err(runtime_err)?;

    let dataset_cfg = DatasetConfig {
        chirp_samples: t.chirp_samples,
        ..DatasetConfig::default()
    };
    let mut adam_members = Vec::with_capacity(t.n);
    let mut hybrid_members = Vec::with_capacity(t.n);
    for (i, (params, tag)) in regimes.iter().enumerate() {
        let data = generate_dataset(params, t.sweeps, t.chirps, t.dataset_seed, &dataset_cfg);
        let train_cfg = TrainConfig {
            max_epochs: t.adam_epochs,
            lbfgs_max_iters: if i == 0 { t.showcase_iters } else { t.lbfgs_iters },
            seed: t.train_seed,
            ..TrainConfig::default()
        };
        let (adam, hybrid) =
            train_specialist_pair(&data, params, tag, &train_cfg).map_err(runtime_err)?;
        println!(
            "[{}/{}] {tag}: adam holdout {:.3e}, hybrid holdout {:.3e}",
            i + 1,
            t.n,
            adam.holdout_rmse,
            hybrid.holdout_rmse
        );
        adam_members.push(SpecialistModel::Net(adam));
        hybrid_members.push(SpecialistModel::Net(hybrid));
    }

    for (name, members) in [
        ("library_adam", adam_members),
        ("library_hybrid", hybrid_members),
    ] {
        let lib = SpecialistLibrary::new(members).map_err(runtime_err)?;
        let manifest = library_manifest_path(dir, name);
        save_library(&lib, &manifest).map_err(runtime_err)?;
        println!("wrote {}", manifest.display());
    }
    Ok(())
}

fn cmd_select(rf: &RunFile, n: usize) -> CliResult<()> {
    let base = load_vehicle(rf)?;
    let regimes = experiment_regimes(&base, n).map_err(runtime_err)?;
    for (i, (_, tag)) in regimes.iter().enumerate() {
        println!("{i}: {tag}");
    }
    Ok(())
}

/// Deterministic CSV cell for one float: shortest round-trip decimal.
fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_trace_csv(dir: &Path, trace: &RunTrace) -> CliResult<()> {
    let n_w = trace.steps.first().map_or(0, |s| s.weights.len());
    let mut out = String::new();
    out.push_str("t,x,y,psi,vx,vy,omega,mx,my,mpsi,mvx,mvy,momega,delta,d,ref_x,ref_y");
    for i in 0..n_w {
        let _ = write!(out, ",w{i}");
    }
    out.push_str(",iterations,converged,cost,kkt_residual,flagged\n");
    for s in &trace.steps {
        let x = s.state;
        let m = s.measured;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            fmt(s.t),
            fmt(x.x),
            fmt(x.y),
            fmt(x.psi),
            fmt(x.vx),
            fmt(x.vy),
            fmt(x.omega),
            fmt(m.x),
            fmt(m.y),
            fmt(m.psi),
            fmt(m.vx),
            fmt(m.vy),
            fmt(m.omega),
            fmt(s.u[0]),
            fmt(s.u[1]),
            fmt(s.ref0[0]),
            fmt(s.ref0[1]),
        );
        for w in &s.weights {
            let _ = write!(out, ",{}", fmt(*w));
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{}",
            s.solve.iterations,
            s.solve.converged,
            fmt(s.solve.cost),
            fmt(s.solve.kkt_residual),
            s.flagged
        );
    }
    fs::write(dir.join("trace.csv"), out).map_err(runtime_err)
}

fn write_timings_csv(dir: &Path, trace: &RunTrace) -> CliResult<()> {
    let mut out = String::from(
        "t,solve_total_s,derivative_eval_s,linear_solve_s,line_search_s,governor_latency_s\n",
    );
    for s in &trace.steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt(s.t),
            fmt(s.solve.timing.total),
            fmt(s.solve.timing.derivative_eval),
            fmt(s.solve.timing.linear_solve),
            fmt(s.solve.timing.line_search),
            fmt(s.governor_latency)
        );
    }
    fs::write(dir.join("timings.csv"), out).map_err(runtime_err)
}

fn metrics_rows(m: &RunMetrics) -> Vec<(String, f64)> {
    let mut rows = vec![
        ("pre_rmse_vx".into(), m.pre.vx),
        ("pre_rmse_vy".into(), m.pre.vy),
        ("pre_rmse_pos".into(), m.pre.pos),
        ("post_rmse_vx".into(), m.post.vx),
        ("post_rmse_vy".into(), m.post.vy),
        ("post_rmse_pos".into(), m.post.pos),
        ("flagged_steps".into(), m.flagged_steps as f64),
    ];
    if let Some(d) = m.degradation {
        rows.push(("degradation_vx_pct".into(), d[0]));
        rows.push(("degradation_vy_pct".into(), d[1]));
        rows.push(("degradation_pos_pct".into(), d[2]));
    }
    if let Some(mt) = m.mitigation {
        rows.push(("mitigation_vx_pct".into(), mt[0]));
        rows.push(("mitigation_vy_pct".into(), mt[1]));
        rows.push(("mitigation_pos_pct".into(), mt[2]));
    }
    rows
}

fn write_metrics_csv(dir: &Path, m: &RunMetrics) -> CliResult<()> {
    let mut out = String::from("metric,value\n");
    for (k, v) in metrics_rows(m) {
        let _ = writeln!(out, "{k},{}", fmt(v));
    }
    fs::write(dir.join("metrics.csv"), out).map_err(runtime_err)
}

fn run_one_cell(
    rf: &RunFile,
    track: &Track,
    scenario: &Scenario,
    problem: &mut crate::ocp::OcpProblem,
    lib: &SpecialistLibrary,
    base: &VehicleParams,
) -> CliResult<(RunTrace, RunMetrics)> {
    let setup = RunSetup {
        base_params: *base,
        ocp: rf.ocp.clone(),
        governor_window: rf.governor.window,
        governor_alpha: rf.governor.alpha,
    };
    let trace = run_closed_loop(&setup, track, scenario, problem, lib).map_err(runtime_err)?;
    let metrics = compute_metrics(&trace, track, rf.ocp.v_ref);
    Ok((trace, metrics))
}

fn cmd_run(rf: &RunFile, out_root: &Path) -> CliResult<()> {
    let base = load_vehicle(rf)?;
    let track = build_track(rf)?;
    let lib = tier_library(rf, &base, rf.scenario.tier)?;
    let mut problem = build_problem(&lib, &rf.ocp).map_err(runtime_err)?;

    let dir = out_root.join(rf.scenario.label());
    fs::create_dir_all(&dir).map_err(runtime_err)?;
    snapshot_config(rf, &dir)?;

    let (trace, metrics) = run_one_cell(rf, &track, &rf.scenario, &mut problem, &lib, &base)?;
    write_trace_csv(&dir, &trace)?;
    write_timings_csv(&dir, &trace)?;
    write_metrics_csv(&dir, &metrics)?;
    println!(
        "{}: post rmse pos {:.4} vx {:.4}, flagged {} of {}",
        dir.display(),
        metrics.post.pos,
        metrics.post.vx,
        metrics.flagged_steps,
        trace.steps.len()
    );
    Ok(())
}

/// One aggregated matrix cell in the shape of the results table: a
/// (tier, shift, adaptive) triple with seed-averaged errors.
struct CellAggregate {
    tier: Tier,
    shift: ShiftKind,
    adaptive: bool,
    post_mean: [f64; 3],
    degradation: [f64; 3],
    mitigation: Option<[f64; 3]>,
    positive_frac: Option<f64>,
    flagged_total: usize,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn cmd_matrix(rf: &RunFile, out_root: &Path) -> CliResult<()> {
    if rf.matrix.seeds.is_empty() || rf.matrix.tiers.is_empty() || rf.matrix.shifts.is_empty() {
        return Err(CliFailure::Config(
            "matrix needs at least one seed, tier, and shift".into(),
        ));
    }
    let base = load_vehicle(rf)?;
    let track = build_track(rf)?;
    fs::create_dir_all(out_root).map_err(runtime_err)?;
    snapshot_config(rf, out_root)?;

    // one problem per distinct library; simulation tiers share the
    // exact-ODE library
    let ode_lib = tier_library(rf, &base, Tier::IdealOde)?;
    let mut ode_problem = build_problem(&ode_lib, &rf.ocp).map_err(runtime_err)?;
    let mut net_libs: Vec<(Tier, SpecialistLibrary, crate::ocp::OcpProblem)> = Vec::new();
    for tier in [Tier::PinnAdam, Tier::PinnHybrid] {
        if rf.matrix.tiers.contains(&tier) {
            let lib = tier_library(rf, &base, tier)?;
            let problem = build_problem(&lib, &rf.ocp).map_err(runtime_err)?;
            net_libs.push((tier, lib, problem));
        }
    }

    // per-seed standardization runs: ideal dynamics, no shift, frozen
    // weights; their pre-shift window anchors every degradation number
    let mut pre_base = Vec::with_capacity(rf.matrix.seeds.len());
    for &seed in &rf.matrix.seeds {
        let scenario = Scenario {
            tier: Tier::IdealOde,
            shift: ShiftKind::None,
            adaptive: false,
            seed,
            ..rf.scenario.clone()
        };
        let (_, m) = run_one_cell(rf, &track, &scenario, &mut ode_problem, &ode_lib, &base)?;
        pre_base.push(m.pre);
    }
    let pre_base_mean = [
        mean(&pre_base.iter().map(|p| p.vx).collect::<Vec<_>>()),
        mean(&pre_base.iter().map(|p| p.vy).collect::<Vec<_>>()),
        mean(&pre_base.iter().map(|p| p.pos).collect::<Vec<_>>()),
    ];

    let mut runs_csv = String::from(
        "tier,shift,adaptive,seed,pre_rmse_vx,pre_rmse_vy,pre_rmse_pos,\
         post_rmse_vx,post_rmse_vy,post_rmse_pos,degradation_pos_pct,\
         mitigation_pos_pct,flagged_steps\n",
    );
    let mut cells: Vec<CellAggregate> = Vec::new();

    for &tier in &rf.matrix.tiers {
        for &shift in &rf.matrix.shifts {
            let mut per_adaptive: Vec<Vec<RunMetrics>> = vec![Vec::new(), Vec::new()];
            for &seed in &rf.matrix.seeds {
                let mut pair: Vec<RunMetrics> = Vec::with_capacity(2);
                for adaptive in [true, false] {
                    let scenario = Scenario {
                        tier,
                        shift,
                        adaptive,
                        seed,
                        ..rf.scenario.clone()
                    };
                    let (lib, problem): (&SpecialistLibrary, &mut crate::ocp::OcpProblem) =
                        match net_libs.iter_mut().find(|(t, _, _)| *t == tier) {
                            Some((_, lib, problem)) => (lib, problem),
                            None => (&ode_lib, &mut ode_problem),
                        };
                    let dir = out_root.join("cells").join(scenario.label());
                    fs::create_dir_all(&dir).map_err(runtime_err)?;
                    let (trace, mut m) =
                        run_one_cell(rf, &track, &scenario, problem, lib, &base)?;
                    let idx = rf.matrix.seeds.iter().position(|&s| s == seed).unwrap();
                    m.standardize(&pre_base[idx]);
                    write_trace_csv(&dir, &trace)?;
                    write_timings_csv(&dir, &trace)?;
                    pair.push(m);
                }
                let (mut adaptive_m, baseline_m) = {
                    let b = pair.pop().unwrap();
                    (pair.pop().unwrap(), b)
                };
                adaptive_m.pair_with_baseline(&baseline_m).map_err(runtime_err)?;
                for (m, adaptive) in [(&adaptive_m, true), (&baseline_m, false)] {
                    let _ = writeln!(
                        runs_csv,
                        "{},{},{},{seed},{},{},{},{},{},{},{},{},{}",
                        tier.name(),
                        shift.name(),
                        adaptive,
                        fmt(m.pre.vx),
                        fmt(m.pre.vy),
                        fmt(m.pre.pos),
                        fmt(m.post.vx),
                        fmt(m.post.vy),
                        fmt(m.post.pos),
                        fmt(m.degradation.map_or(f64::NAN, |d| d[2])),
                        m.mitigation
                            .map_or(String::new(), |mt| fmt(mt[2])),
                        m.flagged_steps
                    );
                }
                per_adaptive[0].push(adaptive_m);
                per_adaptive[1].push(baseline_m);
            }

            // aggregate the cell pair the way the results table does:
            // percent changes of seed-averaged errors
            let agg = |ms: &[RunMetrics]| -> [f64; 3] {
                [
                    mean(&ms.iter().map(|m| m.post.vx).collect::<Vec<_>>()),
                    mean(&ms.iter().map(|m| m.post.vy).collect::<Vec<_>>()),
                    mean(&ms.iter().map(|m| m.post.pos).collect::<Vec<_>>()),
                ]
            };
            let post_a = agg(&per_adaptive[0]);
            let post_b = agg(&per_adaptive[1]);
            let deg = |post: [f64; 3]| {
                [
                    super::runloop::degradation_pct(post[0], pre_base_mean[0]),
                    super::runloop::degradation_pct(post[1], pre_base_mean[1]),
                    super::runloop::degradation_pct(post[2], pre_base_mean[2]),
                ]
            };
            let deg_a = deg(post_a);
            let deg_b = deg(post_b);
            let mit = [
                super::runloop::mitigation_pct(deg_b[0], deg_a[0]),
                super::runloop::mitigation_pct(deg_b[1], deg_a[1]),
                super::runloop::mitigation_pct(deg_b[2], deg_a[2]),
            ];
            let positive = per_adaptive[0]
                .iter()
                .filter(|m| m.mitigation.map_or(false, |mt| mt[2] > 0.0))
                .count() as f64
                / per_adaptive[0].len() as f64;
            cells.push(CellAggregate {
                tier,
                shift,
                adaptive: true,
                post_mean: post_a,
                degradation: deg_a,
                mitigation: Some(mit),
                positive_frac: Some(positive),
                flagged_total: per_adaptive[0].iter().map(|m| m.flagged_steps).sum(),
            });
            cells.push(CellAggregate {
                tier,
                shift,
                adaptive: false,
                post_mean: post_b,
                degradation: deg_b,
                mitigation: None,
                positive_frac: None,
                flagged_total: per_adaptive[1].iter().map(|m| m.flagged_steps).sum(),
            });
        }
    }

    fs::write(out_root.join("runs.csv"), runs_csv).map_err(runtime_err)?;

    let mut metrics_csv = String::from(
        "tier,shift,adaptive,seeds,post_rmse_vx,post_rmse_vy,post_rmse_pos,\
         degradation_vx_pct,degradation_vy_pct,degradation_pos_pct,\
         mitigation_vx_pct,mitigation_vy_pct,mitigation_pos_pct,\
         positive_mitigation_frac,flagged_total\n",
    );
    for c in &cells {
        let _ = writeln!(
            metrics_csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.tier.name(),
            c.shift.name(),
            c.adaptive,
            rf.matrix.seeds.len(),
            fmt(c.post_mean[0]),
            fmt(c.post_mean[1]),
            fmt(c.post_mean[2]),
            fmt(c.degradation[0]),
            fmt(c.degradation[1]),
            fmt(c.degradation[2]),
            c.mitigation.map_or(String::new(), |m| fmt(m[0])),
            c.mitigation.map_or(String::new(), |m| fmt(m[1])),
            c.mitigation.map_or(String::new(), |m| fmt(m[2])),
            c.positive_frac.map_or(String::new(), |f| fmt(f)),
            c.flagged_total
        );
    }
    fs::write(out_root.join("metrics.csv"), metrics_csv).map_err(runtime_err)?;

    let mut md = String::from("# Scenario matrix\n\n## Post-shift tracking error (seed mean)\n\n");
    md.push_str("| tier | shift | adaptive | rmse vx | rmse vy | rmse pos | deg pos % |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    for c in &cells {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:+.1} |",
            c.tier.name(),
            c.shift.name(),
            c.adaptive,
            c.post_mean[0],
            c.post_mean[1],
            c.post_mean[2],
            c.degradation[2],
        );
    }
    md.push_str("\n## Mitigation by adaptation (vs paired frozen baseline)\n\n");
    md.push_str("| tier | shift | mit vx % | mit vy % | mit pos % | positive seeds |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for c in cells.iter().filter(|c| c.adaptive) {
        let m = c.mitigation.unwrap();
        let _ = writeln!(
            md,
            "| {} | {} | {:+.1} | {:+.1} | {:+.1} | {:.0}% |",
            c.tier.name(),
            c.shift.name(),
            m[0],
            m[1],
            m[2],
            100.0 * c.positive_frac.unwrap(),
        );
    }
    fs::write(out_root.join("summary.md"), md).map_err(runtime_err)?;
    println!(
        "matrix: {} cells over {} seeds -> {}",
        cells.len(),
        rf.matrix.seeds.len(),
        out_root.display()
    );
    Ok(())
}

fn cmd_bench(rf: &RunFile, out_root: &Path, ideal_ode: bool) -> CliResult<()> {
    let base = load_vehicle(rf)?;
    let track = build_track(rf)?;
    let lib = if ideal_ode {
        regime_library(&base, rf.bench.ideal_members).map_err(runtime_err)?
    } else {
        tier_library(rf, &base, Tier::PinnHybrid)?
    };
    let rep = run_phase1_benchmarks(&lib, &base, &rf.ocp, &track, rf.bench.solves, rf.bench.seed)
        .map_err(runtime_err)?;

    let dir = out_root.join("bench");
    fs::create_dir_all(&dir).map_err(runtime_err)?;
    snapshot_config(rf, &dir)?;
    let mut csv = String::from("metric,value\n");
    for (k, v) in rep.rows() {
        let _ = writeln!(csv, "{k},{}", fmt(v));
    }
    fs::write(dir.join("bench.csv"), csv).map_err(runtime_err)?;

    println!(
        "solve medians: parametric {:.3e}s, ensemble {:.3e}s (ratio {:.1})",
        rep.parametric_solve.median, rep.ensemble_solve.median, rep.solve_ratio
    );
    println!(
        "adaptation: governor median {:.3e}s p95 {:.3e}s, weight write {:.3e}s, rebuild {:.3e}s",
        rep.governor.median, rep.governor.p95, rep.update_median, rep.rebuild_median
    );
    println!("wrote {}", dir.join("bench.csv").display());
    Ok(())
}

fn cmd_report(out_root: &Path, dirs: &[PathBuf]) -> CliResult<()> {
    if dirs.is_empty() {
        return Err(CliFailure::Config("report needs at least one run directory".into()));
    }
    let mut long_rows: Vec<(String, Vec<(String, String)>)> = Vec::new();
    let mut passthrough: Vec<(String, String)> = Vec::new();
    for dir in dirs {
        if !dir.exists() {
            return Err(CliFailure::Missing(format!("{} not found", dir.display())));
        }
        let label = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let mut found = false;
        for name in ["metrics.csv", "bench.csv"] {
            let p = dir.join(name);
            if !p.exists() {
                continue;
            }
            found = true;
            let text = fs::read_to_string(&p).map_err(runtime_err)?;
            let mut lines = text.lines();
            let header = lines.next().unwrap_or_default();
            if header.starts_with("metric,") {
                let rows: Vec<(String, String)> = lines
                    .filter_map(|l| l.split_once(','))
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect();
                long_rows.push((label.clone(), rows));
            } else {
                passthrough.push((format!("{label}/{name}"), text));
            }
        }
        if !found {
            return Err(CliFailure::Missing(format!(
                "{} has neither metrics.csv nor bench.csv",
                dir.display()
            )));
        }
    }

    fs::create_dir_all(out_root).map_err(runtime_err)?;
    // union of keys, first-seen order, one summary row per directory
    let mut keys: Vec<String> = Vec::new();
    for (_, rows) in &long_rows {
        for (k, _) in rows {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
    }
    let mut csv = String::from("run");
    for k in &keys {
        let _ = write!(csv, ",{k}");
    }
    csv.push('\n');
    let mut md = String::from("# Aggregated runs\n\n");
    if !long_rows.is_empty() {
        md.push_str("| run |");
        for k in &keys {
            let _ = write!(md, " {k} |");
        }
        md.push('\n');
        md.push_str("|---|");
        md.push_str(&"---|".repeat(keys.len()));
        md.push('\n');
    }
    for (label, rows) in &long_rows {
        let _ = write!(csv, "{label}");
        let _ = write!(md, "| {label} |");
        for k in &keys {
            let v = rows
                .iter()
                .find(|(rk, _)| rk == k)
                .map(|(_, v)| v.as_str())
                .unwrap_or("");
            let _ = write!(csv, ",{v}");
            let _ = write!(md, " {v} |");
        }
        csv.push('\n');
        md.push('\n');
    }
    for (title, text) in &passthrough {
        let _ = write!(md, "\n## {title}\n\n```\n{text}```\n");
    }
    fs::write(out_root.join("report.csv"), csv).map_err(runtime_err)?;
    fs::write(out_root.join("summary.md"), md).map_err(runtime_err)?;
    println!("wrote {}", out_root.join("summary.md").display());
    Ok(())
}
