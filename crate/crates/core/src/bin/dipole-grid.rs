//! Batch front end: simulate recordings, fit the source model, compare
//! procedures over replications, and render posterior plots as SVG.
//!
//! Exit codes: 0 success, 1 runtime/numeric failure, 2 config/validation
//! failure. All randomness is seeded through the config (or `--seed`), so
//! every command is byte-identical across reruns.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use dipole_grid::dynamic::{self, DynamicConfig, DynamicTrace};
use dipole_grid::em::{self, EmConfig, EmTrace, EmWorkspace, UpdateMask};
use dipole_grid::forward::FieldConstants;
use dipole_grid::geometry::{
    discretize, place_sensors, HeadModel, RoiBox, SensorArray, VoxelGrid,
    DEFAULT_SENSOR_OFFSET,
};
use dipole_grid::multisource::{self, SwitchConfig, SwitchState};
use dipole_grid::statespace::{
    read_trajectory_file, simulate, write_trajectory_file, ModelParams, SimConfig,
    COORDS_PER_SOURCE,
};
use dipole_grid::Error;

#[derive(Parser)]
#[command(name = "dipole-grid", version, about = "Grid-based MEG/EEG source localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulates a recording and writes a trajectory CSV plus metadata.
    Simulate(CommonArgs),
    /// Fits the source model to a measurement CSV.
    Fit(CommonArgs),
    /// Runs seeded replications and tabulates parameter-error metrics.
    Compare(CommonArgs),
    /// Renders posterior-mean line plots and marginal bar charts.
    Plot(CommonArgs),
}

/// Errors tagged with the exit code they map to.
struct AppError {
    code: u8,
    message: String,
}

type AppResult<T> = std::result::Result<T, AppError>;

/// Configuration loading / validation failures: exit code 2.
fn config_err<E: std::fmt::Display>(e: E) -> AppError {
    AppError { code: 2, message: e.to_string() }
}

/// Runtime / numeric failures: exit code 1.
fn run_err<E: std::fmt::Display>(e: E) -> AppError {
    AppError { code: 1, message: e.to_string() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Fit(args) => cmd_fit(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::Plot(args) => cmd_plot(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dipole-grid: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

// ---------------------------------------------------------------------------
// Config schemas. Unknown keys are rejected everywhere.
// ---------------------------------------------------------------------------

fn default_head() -> HeadSpec {
    HeadSpec { center: [0.0; 3], radius: 10.0 }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadSpec {
    center: [f64; 3],
    radius: f64,
}

impl HeadSpec {
    fn build(&self) -> Result<HeadModel, Error> {
        HeadModel::new(self.center, self.radius)
    }
}

fn default_offset() -> f64 {
    DEFAULT_SENSOR_OFFSET
}

/// Random placement on the upper hemisphere.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SensorPlacementSpec {
    count: usize,
    seed: u64,
    #[serde(default = "default_offset")]
    offset: f64,
}

/// External sensor layout: a JSON file holding a serialized sensor array
/// (positions, modality, optional conductivity).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SensorFileSpec {
    file: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum SensorsSpec {
    Placement(SensorPlacementSpec),
    File(SensorFileSpec),
}

impl SensorsSpec {
    fn build(&self, head: &HeadModel) -> Result<SensorArray, Error> {
        match self {
            SensorsSpec::Placement(p) => place_sensors(head, p.count, p.seed, p.offset),
            SensorsSpec::File(f) => {
                let text = fs::read_to_string(&f.file)?;
                let array: SensorArray = serde_json::from_str(&text)?;
                if array.is_empty() {
                    return Err(Error::Config(format!(
                        "sensor file {} holds no sensors",
                        f.file.display()
                    )));
                }
                Ok(array)
            }
        }
    }
}

/// A symmetric matrix given either by its diagonal or in full, row by row.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixSpec {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn build(&self, dim: usize, name: &str) -> Result<DMatrix<f64>, Error> {
        match self {
            MatrixSpec::Diagonal(d) => {
                if d.len() != dim {
                    return Err(Error::Config(format!(
                        "{name}: diagonal has {} entries, expected {dim}",
                        d.len()
                    )));
                }
                Ok(DMatrix::from_diagonal(&DVector::from_row_slice(d)))
            }
            MatrixSpec::Full(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::Config(format!("{name}: expected a {dim}x{dim} matrix")));
                }
                Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
            }
        }
    }
}

/// One source's parameter block: 6-dim state (location then moment).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceSpec {
    mu0: [f64; 6],
    sigma0: MatrixSpec,
    a: MatrixSpec,
    b: [f64; 6],
    sigma: MatrixSpec,
    q: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum NoiseSpec {
    /// Spherical: V = variance * I.
    Variance(f64),
    /// Diagonal V, one variance per sensor.
    Diagonal(Vec<f64>),
    /// Full V, row by row.
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsSpec {
    sources: Vec<SourceSpec>,
    noise: NoiseSpec,
}

impl ParamsSpec {
    fn build(&self, n_sensors: usize) -> Result<ModelParams, Error> {
        if self.sources.is_empty() {
            return Err(Error::Config("at least one source block is required".into()));
        }
        let n = self.sources.len();
        let d = n * COORDS_PER_SOURCE;
        let mut mu0 = DVector::zeros(d);
        let mut b = DVector::zeros(d);
        let mut sigma0 = DMatrix::zeros(d, d);
        let mut a = DMatrix::zeros(d, d);
        let mut sigma = DMatrix::zeros(d, d);
        let mut q_fixed = Vec::with_capacity(n);
        for (s, src) in self.sources.iter().enumerate() {
            let o = s * COORDS_PER_SOURCE;
            for i in 0..6 {
                mu0[o + i] = src.mu0[i];
                b[o + i] = src.b[i];
            }
            let label = format!("source {}", s + 1);
            sigma0
                .view_mut((o, o), (6, 6))
                .copy_from(&src.sigma0.build(6, &format!("{label} sigma0"))?);
            a.view_mut((o, o), (6, 6)).copy_from(&src.a.build(6, &format!("{label} a"))?);
            sigma
                .view_mut((o, o), (6, 6))
                .copy_from(&src.sigma.build(6, &format!("{label} sigma"))?);
            q_fixed.push(src.q);
        }
        let v = match &self.noise {
            NoiseSpec::Variance(var) => DMatrix::from_diagonal_element(n_sensors, n_sensors, *var),
            NoiseSpec::Diagonal(d) => {
                if d.len() != n_sensors {
                    return Err(Error::Config(format!(
                        "noise diagonal has {} entries but there are {n_sensors} sensors",
                        d.len()
                    )));
                }
                DMatrix::from_diagonal(&DVector::from_row_slice(d))
            }
            NoiseSpec::Matrix(rows) => {
                if rows.len() != n_sensors || rows.iter().any(|r| r.len() != n_sensors) {
                    return Err(Error::Config(format!(
                        "noise matrix must be {n_sensors}x{n_sensors}"
                    )));
                }
                DMatrix::from_fn(n_sensors, n_sensors, |i, j| rows[i][j])
            }
        };
        let params = ModelParams { mu0, sigma0, a, b, sigma, v, q_fixed };
        params.validate()?;
        Ok(params)
    }
}

fn matrix_rows(m: &nalgebra::DMatrixView<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Renders fitted parameters in the config schema, so a fit's `params.json`
/// can be fed back as another run's `init`.
fn params_to_spec(params: &ModelParams) -> ParamsSpec {
    let mut sources = Vec::with_capacity(params.n_sources());
    for s in 0..params.n_sources() {
        let o = ModelParams::source_offset(s);
        let mut mu0 = [0.0; 6];
        let mut b = [0.0; 6];
        for i in 0..6 {
            mu0[i] = params.mu0[o + i];
            b[i] = params.b[o + i];
        }
        sources.push(SourceSpec {
            mu0,
            sigma0: MatrixSpec::Full(matrix_rows(&params.sigma0.view((o, o), (6, 6)))),
            a: MatrixSpec::Full(matrix_rows(&params.a.view((o, o), (6, 6)))),
            b,
            sigma: MatrixSpec::Full(matrix_rows(&params.sigma.view((o, o), (6, 6)))),
            q: params.q_fixed[s],
        });
    }
    let l = params.v.nrows();
    let off_diagonal_mass: f64 = (0..l)
        .flat_map(|i| (0..l).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| params.v[(i, j)].abs())
        .sum();
    let noise = if off_diagonal_mass == 0.0 {
        NoiseSpec::Diagonal(params.v.diagonal().iter().cloned().collect())
    } else {
        NoiseSpec::Matrix(matrix_rows(&params.v.view((0, 0), (l, l))))
    };
    ParamsSpec { sources, noise }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldSpec {
    kappa: f64,
}

fn build_consts(field: &Option<FieldSpec>) -> Result<FieldConstants, Error> {
    match field {
        Some(f) => FieldConstants::new(f.kappa),
        None => Ok(FieldConstants::default()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateSpec {
    #[serde(default = "default_head")]
    head: HeadSpec,
    sensors: SensorsSpec,
    steps: usize,
    seed: u64,
    params: ParamsSpec,
    #[serde(default)]
    field: Option<FieldSpec>,
}

fn default_max_iters() -> usize {
    50
}

fn default_tol() -> f64 {
    1e-6
}

/// Inner EM settings. `update` lists the parameters re-estimated each
/// iteration; omitting it updates everything, an empty list freezes all
/// parameters (posterior-only runs).
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EmSpec {
    #[serde(default = "default_max_iters")]
    max_iters: usize,
    #[serde(default = "default_tol")]
    tol: f64,
    #[serde(default)]
    update: Option<Vec<String>>,
    #[serde(default)]
    ridge: Option<f64>,
}

impl EmSpec {
    fn build(&self) -> Result<EmConfig, Error> {
        let mut config = EmConfig::default();
        config.max_iters = self.max_iters.max(1);
        config.tol = self.tol;
        if let Some(names) = &self.update {
            let mut mask = UpdateMask::none();
            for name in names {
                match name.as_str() {
                    "mu0" => mask.mu0 = true,
                    "sigma0" => mask.sigma0 = true,
                    "a" => mask.a = true,
                    "b" => mask.b = true,
                    "sigma" => mask.sigma = true,
                    "v" => mask.v = true,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown update target '{other}' (expected mu0, sigma0, a, b, sigma, v)"
                        )))
                    }
                }
            }
            config.update = mask;
        }
        if let Some(r) = self.ridge {
            config.constraints.ridge = r;
        }
        Ok(config)
    }
}

fn default_mesh_increment() -> usize {
    1
}

fn default_mesh_cap() -> usize {
    25
}

fn default_sigma_multiplier() -> f64 {
    3.0
}

fn default_max_outer_iters() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DynamicSpec {
    mesh_increment: usize,
    mesh_cap: usize,
    sigma_multiplier: f64,
    max_outer_iters: usize,
    shrink_after_convergence: bool,
}

impl Default for DynamicSpec {
    fn default() -> Self {
        Self {
            mesh_increment: default_mesh_increment(),
            mesh_cap: default_mesh_cap(),
            sigma_multiplier: default_sigma_multiplier(),
            max_outer_iters: default_max_outer_iters(),
            shrink_after_convergence: false,
        }
    }
}

impl DynamicSpec {
    fn build(&self, roi: RoiBox, mesh: [usize; 3]) -> DynamicConfig {
        let mut config = DynamicConfig::new(roi, mesh);
        config.mesh_increment = self.mesh_increment;
        config.mesh_cap = self.mesh_cap;
        config.sigma_multiplier = self.sigma_multiplier;
        config.max_outer_iters = self.max_outer_iters;
        config.shrink_after_convergence = self.shrink_after_convergence;
        config
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Procedure {
    /// Plain EM on a fixed grid (single source).
    Em,
    /// EM with dynamic ROI refinement (single source).
    Dynamic,
    /// Switch procedure on fixed per-source grids.
    Switch,
    /// Switch procedure with dynamic refinement per source.
    DynamicSwitch,
}

impl Procedure {
    fn label(&self) -> &'static str {
        match self {
            Procedure::Em => "em",
            Procedure::Dynamic => "dynamic",
            Procedure::Switch => "switch",
            Procedure::DynamicSwitch => "dynamic-switch",
        }
    }
}

fn default_sweeps() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitSpec {
    /// Measurement CSV: either a simulate output or a `t, y1..yL` recording.
    measurements: PathBuf,
    #[serde(default = "default_head")]
    head: HeadSpec,
    sensors: SensorsSpec,
    #[serde(default)]
    field: Option<FieldSpec>,
    procedure: Procedure,
    /// One starting ROI per source, as [[x_lo, x_hi], [y_lo, y_hi], [z_lo, z_hi]].
    rois: Vec<[[f64; 2]; 3]>,
    mesh: [usize; 3],
    /// Initial parameters; omitted = data-free heuristic from the ROI, which
    /// then needs `q` and `noise_variance`.
    #[serde(default)]
    init: Option<ParamsSpec>,
    #[serde(default)]
    q: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    noise_variance: Option<f64>,
    #[serde(default)]
    em: EmSpec,
    #[serde(default)]
    dynamic: DynamicSpec,
    #[serde(default = "default_sweeps")]
    sweeps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareFitSpec {
    procedures: Vec<Procedure>,
    rois: Vec<[[f64; 2]; 3]>,
    mesh: [usize; 3],
    #[serde(default)]
    init: Option<ParamsSpec>,
    #[serde(default)]
    em: EmSpec,
    #[serde(default)]
    dynamic: DynamicSpec,
    #[serde(default = "default_sweeps")]
    sweeps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareSpec {
    simulate: SimulateSpec,
    fit: CompareFitSpec,
    replications: usize,
    /// One seed per replication; defaults to simulate.seed, +1, +2, ...
    #[serde(default)]
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlotSpec {
    /// Long-format posterior CSV written by `fit`.
    posterior: PathBuf,
    /// Optional trajectory CSV with true states to overlay.
    #[serde(default)]
    trajectory: Option<PathBuf>,
    /// Time steps (1-based) for marginal bar charts; defaults to first,
    /// middle, last.
    #[serde(default)]
    bar_times: Option<Vec<usize>>,
}

fn load_spec<T: serde::de::DeserializeOwned>(path: &Path) -> AppResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))
}

fn ensure_out_dir(out: &Path) -> AppResult<()> {
    fs::create_dir_all(out).map_err(|e| {
        run_err(format!("cannot create output directory {}: {e}", out.display()))
    })
}

fn fmt_float(v: f64) -> String {
    format!("{v:.17e}")
}

fn write_text(path: &Path, text: &str) -> AppResult<()> {
    fs::write(path, text).map_err(|e| run_err(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(run_err)?;
    text.push('\n');
    write_text(path, &text)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SimulateMetadata<'a> {
    command: &'static str,
    seed: u64,
    steps: usize,
    head: HeadModel,
    sensors: &'a SensorArray,
    kappa: f64,
    params: ParamsSpec,
}

fn cmd_simulate(args: &CommonArgs) -> AppResult<()> {
    let spec: SimulateSpec = load_spec(&args.config)?;
    let head = spec.head.build().map_err(config_err)?;
    let sensors = spec.sensors.build(&head).map_err(config_err)?;
    let params = spec.params.build(sensors.len()).map_err(config_err)?;
    let consts = build_consts(&spec.field).map_err(config_err)?;
    if spec.steps == 0 {
        return Err(config_err("steps must be >= 1"));
    }
    let seed = args.seed.unwrap_or(spec.seed);
    ensure_out_dir(&args.out)?;

    let config = SimConfig {
        params: params.clone(),
        head,
        sensors: sensors.clone(),
        steps: spec.steps,
        seed,
        consts,
    };
    let trajectory = simulate(&config).map_err(run_err)?;
    write_trajectory_file(&trajectory, &args.out.join("trajectory.csv")).map_err(run_err)?;
    let metadata = SimulateMetadata {
        command: "simulate",
        seed,
        steps: spec.steps,
        head,
        sensors: &sensors,
        kappa: consts.kappa,
        params: params_to_spec(&params),
    };
    write_json(&args.out.join("metadata.json"), &metadata)
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

/// Per-source posteriors on their grids, in long format for export.
struct FitOutcome {
    params: ModelParams,
    /// (grid, T x K posterior) per source.
    posteriors: Vec<(VoxelGrid, DMatrix<f64>)>,
    trace: TraceKind,
}

enum TraceKind {
    Em(EmTrace),
    Dynamic(DynamicTrace),
    Switch(SwitchState),
}

fn stacked_initial_params(
    rois: &[RoiBox],
    mesh: [usize; 3],
    q: &[[f64; 3]],
    n_sensors: usize,
    noise_var: f64,
) -> Result<ModelParams, Error> {
    let mut per_source = Vec::with_capacity(rois.len());
    for (roi, &qn) in rois.iter().zip(q) {
        let grid = discretize(roi, mesh)?;
        per_source.push(em::initial_params(&grid, qn, n_sensors, noise_var)?);
    }
    let n = per_source.len();
    let d = n * COORDS_PER_SOURCE;
    let mut params = ModelParams {
        mu0: DVector::zeros(d),
        sigma0: DMatrix::zeros(d, d),
        a: DMatrix::zeros(d, d),
        b: DVector::zeros(d),
        sigma: DMatrix::zeros(d, d),
        v: per_source[0].v.clone(),
        q_fixed: q.to_vec(),
    };
    for (s, sub) in per_source.iter().enumerate() {
        params.set_source_params(s, sub);
    }
    Ok(params)
}

fn resolve_rois(specs: &[[[f64; 2]; 3]]) -> Result<Vec<RoiBox>, Error> {
    if specs.is_empty() {
        return Err(Error::Config("at least one ROI is required".into()));
    }
    specs.iter().map(|iv| RoiBox::new(*iv)).collect()
}

fn resolve_init(
    init: &Option<ParamsSpec>,
    q: &Option<Vec<[f64; 3]>>,
    noise_variance: Option<f64>,
    rois: &[RoiBox],
    mesh: [usize; 3],
    n_sensors: usize,
) -> Result<ModelParams, Error> {
    match init {
        Some(spec) => spec.build(n_sensors),
        None => {
            let q = q.as_ref().ok_or_else(|| {
                Error::Config("without init, per-source moments 'q' are required".into())
            })?;
            let noise_var = noise_variance.ok_or_else(|| {
                Error::Config("without init, 'noise_variance' is required".into())
            })?;
            if q.len() != rois.len() {
                return Err(Error::Config(format!(
                    "{} moment vectors for {} ROIs",
                    q.len(),
                    rois.len()
                )));
            }
            stacked_initial_params(rois, mesh, q, n_sensors, noise_var)
        }
    }
}

fn run_fit(
    spec_procedure: Procedure,
    init: &ModelParams,
    rois: &[RoiBox],
    mesh: [usize; 3],
    measurements: &DMatrix<f64>,
    sensors: &SensorArray,
    consts: &FieldConstants,
    head: &HeadModel,
    em_config: &EmConfig,
    dynamic_spec: &DynamicSpec,
    sweeps: usize,
) -> Result<FitOutcome, Error> {
    let n = init.n_sources();
    if rois.len() != n {
        return Err(Error::Config(format!(
            "{} ROIs for {} sources",
            rois.len(),
            n
        )));
    }
    match spec_procedure {
        Procedure::Em => {
            if n != 1 {
                return Err(Error::Config("procedure 'em' expects a single source".into()));
            }
            let grid = discretize(&rois[0], mesh)?;
            let (params, trace) = em::fit(init, &grid, measurements, sensors, consts, em_config)?;
            let xi = posterior_on_grid(&params, &grid, measurements, sensors, consts)?;
            Ok(FitOutcome {
                params,
                posteriors: vec![(grid, xi)],
                trace: TraceKind::Em(trace),
            })
        }
        Procedure::Dynamic => {
            if n != 1 {
                return Err(Error::Config("procedure 'dynamic' expects a single source".into()));
            }
            let dconfig = dynamic_spec.build(rois[0], mesh);
            let (params, grid, trace) =
                dynamic::dynamic_fit(init, measurements, sensors, consts, head, &dconfig, em_config)?;
            let xi = posterior_on_grid(&params, &grid, measurements, sensors, consts)?;
            Ok(FitOutcome {
                params,
                posteriors: vec![(grid, xi)],
                trace: TraceKind::Dynamic(trace),
            })
        }
        Procedure::Switch => {
            let grids: Vec<VoxelGrid> =
                rois.iter().map(|r| discretize(r, mesh)).collect::<Result<_, _>>()?;
            let config = SwitchConfig { sweeps, em: *em_config };
            let (params, state) =
                multisource::switch_fit(init, &grids, measurements, sensors, consts, &config)?;
            let posteriors = grids.into_iter().zip(state.zeta.iter().cloned()).collect();
            Ok(FitOutcome { params, posteriors, trace: TraceKind::Switch(state) })
        }
        Procedure::DynamicSwitch => {
            let dconfigs: Vec<DynamicConfig> =
                rois.iter().map(|r| dynamic_spec.build(*r, mesh)).collect();
            let config = SwitchConfig { sweeps, em: *em_config };
            let (params, state, grids) = multisource::switch_fit_dynamic(
                init, measurements, sensors, consts, head, &dconfigs, &config,
            )?;
            let posteriors = grids.into_iter().zip(state.zeta.iter().cloned()).collect();
            Ok(FitOutcome { params, posteriors, trace: TraceKind::Switch(state) })
        }
    }
}

/// Smoothed posterior under fixed parameters on one grid.
fn posterior_on_grid(
    params: &ModelParams,
    grid: &VoxelGrid,
    measurements: &DMatrix<f64>,
    sensors: &SensorArray,
    consts: &FieldConstants,
) -> Result<DMatrix<f64>, Error> {
    let ws = EmWorkspace::new(grid, sensors, params.q_fixed[0], consts, measurements)?;
    let model = em::build_model_from_workspace(params, grid, &ws)?;
    let es = em::e_step(&model, &ws, false)?;
    Ok(es.smoothing.xi)
}

/// Long-format posterior CSV: `t,source,voxel,x,y,z,prob`, `t` and `source`
/// 1-based, voxels in grid order.
fn posterior_csv(posteriors: &[(VoxelGrid, DMatrix<f64>)]) -> String {
    let mut out = String::from("t,source,voxel,x,y,z,prob\n");
    for (s, (grid, xi)) in posteriors.iter().enumerate() {
        for t in 0..xi.nrows() {
            for k in 0..grid.len() {
                let c = grid.centers[k];
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    t + 1,
                    s + 1,
                    k + 1,
                    fmt_float(c[0]),
                    fmt_float(c[1]),
                    fmt_float(c[2]),
                    fmt_float(xi[(t, k)])
                );
            }
        }
    }
    out
}

fn trace_csv(trace: &TraceKind) -> String {
    match trace {
        TraceKind::Em(t) => {
            let mut out = String::from("iter,log_likelihood,q\n");
            for (i, (ll, q)) in t.log_likelihood.iter().zip(&t.q).enumerate() {
                let _ = writeln!(out, "{},{},{}", i + 1, fmt_float(*ll), fmt_float(*q));
            }
            out
        }
        TraceKind::Dynamic(t) => {
            let mut out = String::from(
                "stage,x_lo,x_hi,y_lo,y_hi,z_lo,z_hi,mesh_x,mesh_y,mesh_z,log_likelihood,q\n",
            );
            for (i, stage) in t.stages.iter().enumerate() {
                let iv = stage.roi.intervals;
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    i + 1,
                    fmt_float(iv[0][0]),
                    fmt_float(iv[0][1]),
                    fmt_float(iv[1][0]),
                    fmt_float(iv[1][1]),
                    fmt_float(iv[2][0]),
                    fmt_float(iv[2][1]),
                    stage.mesh[0],
                    stage.mesh[1],
                    stage.mesh[2],
                    fmt_float(stage.log_likelihood),
                    fmt_float(stage.q)
                );
            }
            out
        }
        TraceKind::Switch(state) => {
            let mut out = String::from("source,log_likelihood\n");
            for (s, ll) in state.log_likelihoods.iter().enumerate() {
                let _ = writeln!(out, "{},{}", s + 1, fmt_float(*ll));
            }
            out
        }
    }
}

#[derive(Serialize)]
struct FitMetadata<'a> {
    command: &'static str,
    procedure: &'static str,
    measurements: &'a Path,
    n_sources: usize,
    n_steps: usize,
    n_sensors: usize,
    converged: Option<bool>,
}

fn cmd_fit(args: &CommonArgs) -> AppResult<()> {
    let spec: FitSpec = load_spec(&args.config)?;
    let head = spec.head.build().map_err(config_err)?;
    let sensors = spec.sensors.build(&head).map_err(config_err)?;
    let rois = resolve_rois(&spec.rois).map_err(config_err)?;
    let consts = build_consts(&spec.field).map_err(config_err)?;
    let em_config = spec.em.build().map_err(config_err)?;
    let init = resolve_init(&spec.init, &spec.q, spec.noise_variance, &rois, spec.mesh, sensors.len())
        .map_err(config_err)?;

    let trajectory = read_trajectory_file(&spec.measurements).map_err(config_err)?;
    let measurements = trajectory.measurements;
    if measurements.ncols() != sensors.len() {
        return Err(config_err(format!(
            "measurement CSV has {} sensor columns but the sensor layout has {}",
            measurements.ncols(),
            sensors.len()
        )));
    }
    ensure_out_dir(&args.out)?;

    let outcome = run_fit(
        spec.procedure,
        &init,
        &rois,
        spec.mesh,
        &measurements,
        &sensors,
        &consts,
        &head,
        &em_config,
        &spec.dynamic,
        spec.sweeps,
    )
    .map_err(run_err)?;

    write_json(&args.out.join("params.json"), &params_to_spec(&outcome.params))?;
    write_text(&args.out.join("posterior.csv"), &posterior_csv(&outcome.posteriors))?;
    write_text(&args.out.join("trace.csv"), &trace_csv(&outcome.trace))?;
    let converged = match &outcome.trace {
        TraceKind::Em(t) => Some(t.converged),
        TraceKind::Dynamic(t) => Some(t.converged),
        TraceKind::Switch(_) => None,
    };
    let metadata = FitMetadata {
        command: "fit",
        procedure: spec.procedure.label(),
        measurements: &spec.measurements,
        n_sources: outcome.params.n_sources(),
        n_steps: measurements.nrows(),
        n_sensors: sensors.len(),
        converged,
    };
    write_json(&args.out.join("metadata.json"), &metadata)
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

/// Largest absolute entry of the location blocks of `est - truth` for the
/// AR matrix, and of the location entries for the intercept.
fn location_errors(est: &ModelParams, truth: &ModelParams) -> (f64, f64) {
    let mut err_a = 0.0f64;
    let mut err_b = 0.0f64;
    for s in 0..truth.n_sources() {
        let da = est.location_a(s) - truth.location_a(s);
        let db = est.location_b(s) - truth.location_b(s);
        err_a = err_a.max(da.abs().max());
        err_b = err_b.max(db.abs().max());
    }
    (err_a, err_b)
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

fn cmd_compare(args: &CommonArgs) -> AppResult<()> {
    let spec: CompareSpec = load_spec(&args.config)?;
    if spec.replications == 0 {
        return Err(config_err("replications must be >= 1"));
    }
    if spec.fit.procedures.is_empty() {
        return Err(config_err("at least one procedure is required"));
    }
    let head = spec.simulate.head.build().map_err(config_err)?;
    let sensors = spec.simulate.sensors.build(&head).map_err(config_err)?;
    let truth = spec.simulate.params.build(sensors.len()).map_err(config_err)?;
    let consts = build_consts(&spec.simulate.field).map_err(config_err)?;
    let rois = resolve_rois(&spec.fit.rois).map_err(config_err)?;
    let em_config = spec.fit.em.build().map_err(config_err)?;
    let base_seed = args.seed.unwrap_or(spec.simulate.seed);
    let seeds: Vec<u64> = match &spec.seeds {
        Some(s) => {
            if s.len() != spec.replications {
                return Err(config_err(format!(
                    "{} seeds for {} replications",
                    s.len(),
                    spec.replications
                )));
            }
            s.clone()
        }
        None => (0..spec.replications as u64).map(|i| base_seed + i).collect(),
    };
    let init = match &spec.fit.init {
        Some(p) => p.build(sensors.len()).map_err(config_err)?,
        None => {
            // Heuristic start from the ROI, with the true moments and a
            // noise floor from the true V (the moments are treated as known
            // throughout the inference).
            let noise_var =
                truth.v.diagonal().iter().sum::<f64>() / truth.v.nrows() as f64;
            stacked_initial_params(&rois, spec.fit.mesh, &truth.q_fixed, sensors.len(), noise_var)
                .map_err(config_err)?
        }
    };
    ensure_out_dir(&args.out)?;

    let mut out = String::from("procedure,replication,err_a,err_b\n");
    for &procedure in &spec.fit.procedures {
        let mut errs_a = Vec::with_capacity(seeds.len());
        let mut errs_b = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let sim = SimConfig {
                params: truth.clone(),
                head,
                sensors: sensors.clone(),
                steps: spec.simulate.steps,
                seed,
                consts,
            };
            let trajectory = simulate(&sim).map_err(run_err)?;
            let outcome = run_fit(
                procedure,
                &init,
                &rois,
                spec.fit.mesh,
                &trajectory.measurements,
                &sensors,
                &consts,
                &head,
                &em_config,
                &spec.fit.dynamic,
                spec.fit.sweeps,
            )
            .map_err(run_err)?;
            let (ea, eb) = location_errors(&outcome.params, &truth);
            let _ = writeln!(
                out,
                "{},{},{},{}",
                procedure.label(),
                seed,
                fmt_float(ea),
                fmt_float(eb)
            );
            errs_a.push(ea);
            errs_b.push(eb);
        }
        let (mean_a, std_a) = mean_std(&errs_a);
        let (mean_b, std_b) = mean_std(&errs_b);
        let _ = writeln!(
            out,
            "{},mean,{},{}",
            procedure.label(),
            fmt_float(mean_a),
            fmt_float(mean_b)
        );
        let _ = writeln!(
            out,
            "{},std,{},{}",
            procedure.label(),
            std_a.map(fmt_float).unwrap_or_default(),
            std_b.map(fmt_float).unwrap_or_default()
        );
    }
    write_text(&args.out.join("metrics.csv"), &out)
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

/// Posterior rows grouped per source: per time step, voxel coordinates and
/// probabilities.
struct PosteriorTable {
    /// Per source: (T, voxel coordinates K x 3, probabilities T x K).
    sources: Vec<(Vec<[f64; 3]>, Vec<Vec<f64>>)>,
}

fn read_posterior_csv(path: &Path) -> Result<PosteriorTable, Error> {
    let mut reader = csv::Reader::from_path(path)?;
    let expected = ["t", "source", "voxel", "x", "y", "z", "prob"];
    let header = reader.headers()?.clone();
    if header.iter().ne(expected) {
        return Err(Error::Config(format!(
            "posterior CSV must have columns {expected:?}, found {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    // (source, t, voxel) -> coordinates + prob, all 1-based and dense.
    let mut rows: Vec<(usize, usize, usize, [f64; 3], f64)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| -> Result<f64, Error> {
            record[i]
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad posterior field '{}': {e}", &record[i])))
        };
        rows.push((
            field(1)? as usize,
            field(0)? as usize,
            field(2)? as usize,
            [field(3)?, field(4)?, field(5)?],
            field(6)?,
        ));
    }
    if rows.is_empty() {
        return Err(Error::Config("posterior CSV has no data rows".into()));
    }
    let n_sources = rows.iter().map(|r| r.0).max().unwrap();
    let mut sources = Vec::with_capacity(n_sources);
    for s in 1..=n_sources {
        let sub: Vec<_> = rows.iter().filter(|r| r.0 == s).collect();
        let n_steps = sub.iter().map(|r| r.1).max().unwrap();
        let n_voxels = sub.iter().map(|r| r.2).max().unwrap();
        if sub.len() != n_steps * n_voxels {
            return Err(Error::Config(format!(
                "posterior CSV for source {s} is not dense: {} rows for {n_steps} steps x {n_voxels} voxels",
                sub.len()
            )));
        }
        let mut centers = vec![[0.0; 3]; n_voxels];
        let mut probs = vec![vec![0.0; n_voxels]; n_steps];
        for r in sub {
            centers[r.2 - 1] = r.3;
            probs[r.1 - 1][r.2 - 1] = r.4;
        }
        sources.push((centers, probs));
    }
    Ok(PosteriorTable { sources })
}

/// Minimal deterministic line plot: one or two series over integer t.
fn svg_line_plot(title: &str, series: &[(&str, &[f64])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const ML: f64 = 60.0;
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 40.0;
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, v) in series {
        for &y in *v {
            lo = lo.min(y);
            hi = hi.max(y);
        }
    }
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let sx = (W - ML - MR) / (n as f64 - 1.0);
    let map_y = |y: f64| MT + (H - MT - MB) * (hi - y) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{title}</text>",
        W / 2.0
    );
    // Axes.
    let _ = writeln!(
        svg,
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"black\"/>",
        H - MB
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        H - MB,
        W - MR,
        H - MB
    );
    for i in 0..=4 {
        let y = lo + (hi - lo) * i as f64 / 4.0;
        let py = map_y(y);
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>",
            ML - 6.0,
            py + 4.0,
            y
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{ML}\" y2=\"{py:.1}\" stroke=\"black\"/>",
            ML - 4.0
        );
    }
    let colors = ["#1f77b4", "#d62728"];
    let dashes = ["", " stroke-dasharray=\"6 3\""];
    for (i, (label, values)) in series.iter().enumerate() {
        let mut points = String::new();
        for (t, &y) in values.iter().enumerate() {
            let _ = write!(points, "{:.2},{:.2} ", ML + sx * t as f64, map_y(y));
        }
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{}\"{} stroke-width=\"1.5\" points=\"{}\"/>",
            colors[i % colors.len()],
            dashes[i % dashes.len()],
            points.trim_end()
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{}\">{label}</text>",
            W - MR - 120.0,
            MT + 16.0 * (i + 1) as f64,
            colors[i % colors.len()]
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">t</text>",
        W / 2.0,
        H - 10.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Marginal posterior bar chart over voxel indices at one time step.
fn svg_bar_chart(title: &str, values: &[f64]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const ML: f64 = 60.0;
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 40.0;
    let hi = values.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let n = values.len().max(1);
    let bw = (W - ML - MR) / n as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{title}</text>",
        W / 2.0
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        H - MB,
        W - MR,
        H - MB
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>",
        ML - 6.0,
        MT + 4.0,
        hi
    );
    for (k, &v) in values.iter().enumerate() {
        let bh = (H - MT - MB) * v / hi;
        let _ = writeln!(
            svg,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#1f77b4\"/>",
            ML + bw * k as f64 + 0.1 * bw,
            H - MB - bh,
            0.8 * bw,
            bh
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">voxel</text>",
        W / 2.0,
        H - 10.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn cmd_plot(args: &CommonArgs) -> AppResult<()> {
    let spec: PlotSpec = load_spec(&args.config)?;
    let table = read_posterior_csv(&spec.posterior).map_err(config_err)?;
    let truth = match &spec.trajectory {
        Some(path) => Some(read_trajectory_file(path).map_err(config_err)?),
        None => None,
    };
    ensure_out_dir(&args.out)?;

    let axes = ["x", "y", "z"];
    for (s, (centers, probs)) in table.sources.iter().enumerate() {
        let n_steps = probs.len();
        // Posterior mean per axis and time step.
        let mut means = vec![vec![0.0f64; n_steps]; 3];
        for t in 0..n_steps {
            for (k, c) in centers.iter().enumerate() {
                for i in 0..3 {
                    means[i][t] += probs[t][k] * c[i];
                }
            }
        }
        for i in 0..3 {
            let title = format!("Posterior mean, source {}, {}", s + 1, axes[i]);
            let truth_series: Option<Vec<f64>> = truth.as_ref().and_then(|traj| {
                if traj.states.first().map_or(0, |st| st.len()) > s {
                    Some((0..traj.len()).map(|t| traj.states[t][s].location[i]).collect())
                } else {
                    None
                }
            });
            let mut series: Vec<(&str, &[f64])> = vec![("posterior mean", &means[i])];
            if let Some(ts) = &truth_series {
                series.push(("true location", ts));
            }
            let svg = svg_line_plot(&title, &series);
            write_text(
                &args.out.join(format!("posterior_mean_s{}_{}.svg", s + 1, axes[i])),
                &svg,
            )?;
        }

        let bar_times: Vec<usize> = match &spec.bar_times {
            Some(ts) => ts.clone(),
            None => {
                let mut ts = vec![1, n_steps.div_ceil(2), n_steps];
                ts.dedup();
                ts
            }
        };
        for &t in &bar_times {
            if t == 0 || t > n_steps {
                return Err(config_err(format!(
                    "bar_times entry {t} outside 1..={n_steps}"
                )));
            }
            let title = format!("Marginal posterior, source {}, t = {t}", s + 1);
            let svg = svg_bar_chart(&title, &probs[t - 1]);
            write_text(
                &args.out.join(format!("marginal_s{}_t{:04}.svg", s + 1, t)),
                &svg,
            )?;
        }
    }
    Ok(())
}
