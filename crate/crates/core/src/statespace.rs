//! AR(1) source dynamics, the measurement model, and the simulation
//! generator.
//!
//! The state vector stacks the six coordinates (location, moment) of each
//! source, so `N` sources give a `6N` state. Covariances are block-diagonal
//! by source because the sources are uncorrelated.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::forward::{multi_source_field, DipoleState, FieldConstants};
use crate::geometry::{HeadModel, SensorArray};
use crate::{Error, Result};

pub const COORDS_PER_SOURCE: usize = 6;

/// Full parameter list: initial distribution, AR dynamics, and noise
/// covariances, plus the fixed per-source moment used during inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Measurement noise covariance, L x L.
    pub v: DMatrix<f64>,
    /// Fixed moment vector per source.
    pub q_fixed: Vec<[f64; 3]>,
}

impl ModelParams {
    pub fn n_sources(&self) -> usize {
        self.q_fixed.len()
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn n_sensors(&self) -> usize {
        self.v.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_sources();
        if n == 0 {
            return Err(Error::Params("at least one source is required".into()));
        }
        let d = n * COORDS_PER_SOURCE;
        if self.mu0.len() != d
            || self.b.len() != d
            || self.sigma0.shape() != (d, d)
            || self.a.shape() != (d, d)
            || self.sigma.shape() != (d, d)
        {
            return Err(Error::Dimension(format!(
                "parameter dimensions must match {n} sources (state dim {d})"
            )));
        }
        if self.v.nrows() != self.v.ncols() {
            return Err(Error::Dimension("V must be square".into()));
        }
        for (name, m) in [("Sigma0", &self.sigma0), ("Sigma", &self.sigma), ("V", &self.v)] {
            check_symmetric_psd(name, m)?;
        }
        Ok(())
    }

    /// Index of the first coordinate of source `n`.
    pub fn source_offset(n: usize) -> usize {
        n * COORDS_PER_SOURCE
    }

    pub fn location_a(&self, n: usize) -> Matrix3<f64> {
        let o = Self::source_offset(n);
        self.a.fixed_view::<3, 3>(o, o).into_owned()
    }

    pub fn location_b(&self, n: usize) -> Vector3<f64> {
        let o = Self::source_offset(n);
        Vector3::new(self.b[o], self.b[o + 1], self.b[o + 2])
    }

    pub fn location_sigma(&self, n: usize) -> Matrix3<f64> {
        let o = Self::source_offset(n);
        self.sigma.fixed_view::<3, 3>(o, o).into_owned()
    }

    pub fn location_mu0(&self, n: usize) -> Vector3<f64> {
        let o = Self::source_offset(n);
        Vector3::new(self.mu0[o], self.mu0[o + 1], self.mu0[o + 2])
    }

    pub fn location_sigma0(&self, n: usize) -> Matrix3<f64> {
        let o = Self::source_offset(n);
        self.sigma0.fixed_view::<3, 3>(o, o).into_owned()
    }

    /// Extracts the 6x6 / 6-dim parameter blocks of one source.
    pub fn source_params(&self, n: usize) -> ModelParams {
        let o = Self::source_offset(n);
        ModelParams {
            mu0: self.mu0.rows(o, 6).into_owned(),
            sigma0: self.sigma0.view((o, o), (6, 6)).into_owned(),
            a: self.a.view((o, o), (6, 6)).into_owned(),
            b: self.b.rows(o, 6).into_owned(),
            sigma: self.sigma.view((o, o), (6, 6)).into_owned(),
            v: self.v.clone(),
            q_fixed: vec![self.q_fixed[n]],
        }
    }

    /// Writes one source's 6x6 / 6-dim blocks back into the stacked params.
    pub fn set_source_params(&mut self, n: usize, sub: &ModelParams) {
        let o = Self::source_offset(n);
        self.mu0.rows_mut(o, 6).copy_from(&sub.mu0);
        self.sigma0.view_mut((o, o), (6, 6)).copy_from(&sub.sigma0);
        self.a.view_mut((o, o), (6, 6)).copy_from(&sub.a);
        self.b.rows_mut(o, 6).copy_from(&sub.b);
        self.sigma.view_mut((o, o), (6, 6)).copy_from(&sub.sigma);
        self.v = sub.v.clone();
    }
}

fn check_symmetric_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let n = m.nrows();
    for i in 0..n {
        if !m[(i, i)].is_finite() || m[(i, i)] < -1e-12 {
            return Err(Error::NotPositiveDefinite(format!(
                "{name} has negative or non-finite diagonal entry at {i}"
            )));
        }
        for j in (i + 1)..n {
            let scale = m[(i, i)].abs().max(m[(j, j)].abs()).max(1.0);
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * scale {
                return Err(Error::NotPositiveDefinite(format!(
                    "{name} is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Conditional AR mean: A * state + b.
pub fn ar_mean(params: &ModelParams, state: &DVector<f64>) -> DVector<f64> {
    &params.a * state + &params.b
}

/// One simulated record: per-step source states and sensor measurements.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `states[t][n]` is source `n` at time step `t`.
    pub states: Vec<Vec<DipoleState>>,
    /// T x L.
    pub measurements: DMatrix<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.measurements.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.nrows() == 0
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub params: ModelParams,
    pub head: HeadModel,
    pub sensors: SensorArray,
    pub steps: usize,
    pub seed: u64,
    pub consts: FieldConstants,
}

const MAX_REJECTION_ATTEMPTS: usize = 1000;

/// Square-root factor of a symmetric PSD matrix via eigendecomposition;
/// tolerates zero eigenvalues so degenerate (noise-free) covariances work.
fn psd_sqrt(name: &str, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric_psd(name, m)?;
    let (eigenvalues, eigenvectors) = crate::linalg::symmetric_eigen(m);
    let scale = eigenvalues.iter().cloned().fold(0.0f64, f64::max).max(1.0);
    let mut sqrt_vals = DVector::zeros(m.nrows());
    for i in 0..m.nrows() {
        let lambda = eigenvalues[i];
        if lambda < -1e-10 * scale {
            return Err(Error::NotPositiveDefinite(format!(
                "{name} has negative eigenvalue {lambda:.3e}"
            )));
        }
        sqrt_vals[i] = lambda.max(0.0).sqrt();
    }
    let mut q = eigenvectors;
    for (j, s) in sqrt_vals.iter().enumerate() {
        q.column_mut(j).scale_mut(*s);
    }
    Ok(q)
}

fn standard_normal(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

fn states_from_vector(x: &DVector<f64>, n_sources: usize) -> Vec<DipoleState> {
    (0..n_sources)
        .map(|n| {
            let o = ModelParams::source_offset(n);
            DipoleState::new(
                [x[o], x[o + 1], x[o + 2]],
                [x[o + 3], x[o + 4], x[o + 5]],
            )
        })
        .collect()
}

fn all_inside_head(states: &[DipoleState], head: &HeadModel) -> bool {
    states.iter().all(|s| head.contains(&s.location_vec()))
}

/// Simulates the AR(1) source model and its sensor measurements.
///
/// Draws that put any source location outside the head model are
/// rejection-resampled, which preserves the Gaussian shape conditioned on
/// feasibility. Deterministic given the seed (ChaCha8).
pub fn simulate(config: &SimConfig) -> Result<Trajectory> {
    config.params.validate()?;
    if config.steps == 0 {
        return Err(Error::Config("simulation needs at least one time step".into()));
    }
    let params = &config.params;
    let n = params.n_sources();
    let dim = params.dim();
    let n_sensors = config.sensors.len();
    if params.v.nrows() != n_sensors {
        return Err(Error::Dimension(format!(
            "V is {}x{} but there are {} sensors",
            params.v.nrows(),
            params.v.ncols(),
            n_sensors
        )));
    }

    let sqrt_sigma0 = psd_sqrt("Sigma0", &params.sigma0)?;
    let sqrt_sigma = psd_sqrt("Sigma", &params.sigma)?;
    let sqrt_v = psd_sqrt("V", &params.v)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut states = Vec::with_capacity(config.steps);
    let mut measurements = DMatrix::zeros(config.steps, n_sensors);

    let mut current: DVector<f64> = DVector::zeros(dim);
    for t in 0..config.steps {
        let mut accepted = None;
        for _ in 0..MAX_REJECTION_ATTEMPTS {
            let noise = if t == 0 { &sqrt_sigma0 } else { &sqrt_sigma };
            let mean = if t == 0 { params.mu0.clone() } else { ar_mean(params, &current) };
            let draw = mean + noise * standard_normal(&mut rng, dim);
            let sources = states_from_vector(&draw, n);
            if all_inside_head(&sources, &config.head) {
                accepted = Some((draw, sources));
                break;
            }
        }
        let (draw, sources) = accepted.ok_or(Error::RejectionExhausted {
            step: t,
            attempts: MAX_REJECTION_ATTEMPTS,
        })?;
        current = draw;

        let field = multi_source_field(&sources, &config.sensors, &config.consts)?;
        let noise = &sqrt_v * standard_normal(&mut rng, n_sensors);
        for l in 0..n_sensors {
            measurements[(t, l)] = field[l] + noise[l];
        }
        states.push(sources);
    }

    Ok(Trajectory { states, measurements })
}

/// Writes a trajectory as CSV: one row per step with columns
/// `t, s<n>_px..s<n>_qz` per source, then `y1..yL`.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, writer: W) -> Result<()> {
    let n_sources = traj.states.first().map_or(0, |s| s.len());
    let n_sensors = traj.measurements.ncols();
    let mut w = csv::Writer::from_writer(writer);

    let mut header = vec!["t".to_string()];
    for n in 0..n_sources {
        for coord in ["px", "py", "pz", "qx", "qy", "qz"] {
            header.push(format!("s{}_{}", n + 1, coord));
        }
    }
    for l in 0..n_sensors {
        header.push(format!("y{}", l + 1));
    }
    w.write_record(&header)?;

    for t in 0..traj.len() {
        let mut row = vec![(t + 1).to_string()];
        for s in &traj.states[t] {
            for v in s.location.iter().chain(s.moment.iter()) {
                row.push(format_float(*v));
            }
        }
        for l in 0..n_sensors {
            row.push(format_float(traj.measurements[(t, l)]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn format_float(v: f64) -> String {
    // Round-trippable without locale surprises.
    format!("{v:.17e}")
}

/// Reads a trajectory CSV written by [`write_trajectory_csv`], or a
/// measurement-only CSV (`t, y1..yL`) as produced for real recordings, in
/// which case `states` is empty per step.
pub fn read_trajectory_csv<R: Read>(reader: R) -> Result<Trajectory> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.is_empty() || header.get(0) != Some("t") {
        return Err(Error::Config("trajectory CSV must start with a 't' header column".into()));
    }
    let n_sources = header
        .iter()
        .filter(|h| h.starts_with('s') && h.ends_with("_px"))
        .count();
    let n_state_cols = n_sources * COORDS_PER_SOURCE;
    let n_sensors = header.iter().filter(|h| h.starts_with('y')).count();
    if 1 + n_state_cols + n_sensors != header.len() {
        return Err(Error::Config(format!(
            "unrecognized trajectory CSV header: {} columns, expected t + {} state + {} measurement",
            header.len(),
            n_state_cols,
            n_sensors
        )));
    }

    let mut states = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in r.records() {
        let record = record?;
        let mut values = Vec::with_capacity(record.len());
        for field in record.iter().skip(1) {
            values.push(field.parse::<f64>().map_err(|e| {
                Error::Config(format!("bad numeric field '{field}' in trajectory CSV: {e}"))
            })?);
        }
        let mut step_states = Vec::with_capacity(n_sources);
        for n in 0..n_sources {
            let o = n * COORDS_PER_SOURCE;
            step_states.push(DipoleState::new(
                [values[o], values[o + 1], values[o + 2]],
                [values[o + 3], values[o + 4], values[o + 5]],
            ));
        }
        states.push(step_states);
        rows.push(values[n_state_cols..].to_vec());
    }
    if rows.is_empty() {
        return Err(Error::Config("trajectory CSV has no data rows".into()));
    }
    let measurements =
        DMatrix::from_fn(rows.len(), n_sensors, |t, l| rows[t][l]);
    Ok(Trajectory { states, measurements })
}

pub fn write_trajectory_file(traj: &Trajectory, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trajectory_csv(traj, std::io::BufWriter::new(file))
}

pub fn read_trajectory_file(path: &Path) -> Result<Trajectory> {
    let file = std::fs::File::open(path)?;
    read_trajectory_csv(std::io::BufReader::new(file))
}
