//! EM parameter estimation for the discretized source model.
//!
//! The E-step runs the scaled smoother and accumulates low-dimensional
//! sufficient statistics in a single pass, so the pairwise posteriors are
//! never materialized. The M-step applies the closed-form updates; with the
//! density normalizers carried by the chain (see [`crate::hmm`]) these are
//! the exact maximizers of the expected complete-data log-likelihood, which
//! makes the observed log-likelihood non-decreasing across iterations. The
//! loop enforces that invariant at runtime.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::forward::FieldConstants;
use crate::geometry::{SensorArray, VoxelGrid};
use crate::hmm::{
    self, DiscreteModel, Gaussian3, NoiseModel, SmoothingResult,
};
use crate::statespace::ModelParams;
use crate::{Error, Result};

/// Which parameter blocks the M-step replaces; the rest stay fixed.
#[derive(Debug, Clone, Copy)]
pub struct UpdateMask {
    pub mu0: bool,
    pub sigma0: bool,
    pub a: bool,
    pub b: bool,
    pub sigma: bool,
    pub v: bool,
}

impl Default for UpdateMask {
    fn default() -> Self {
        Self { mu0: true, sigma0: true, a: true, b: true, sigma: true, v: true }
    }
}

impl UpdateMask {
    pub fn none() -> Self {
        Self { mu0: false, sigma0: false, a: false, b: false, sigma: false, v: false }
    }
}

/// Structural constraints on the updated parameters.
#[derive(Debug, Clone, Copy)]
pub struct Constraints {
    /// Zero the off-diagonal entries of the updated Sigma0 and Sigma blocks.
    pub diagonal_sigma: bool,
    /// Update V as a spherical matrix v*I (trace-projected); the full-matrix
    /// update needs T >= L observations to stay positive definite.
    pub scalar_v: bool,
    /// Solve the A-update on the location block only. The full solve
    /// includes the constant moment coordinates, whose centered second
    /// moment is identically zero, so it is reported as singular.
    pub location_only_a: bool,
    /// Ridge added to the diagonal of the centered regression scatter in
    /// the A-update. Zero by default: singular systems are reported, not
    /// silently regularized.
    pub ridge: f64,
}

impl Default for Constraints {
    fn default() -> Self {
        Self { diagonal_sigma: false, scalar_v: true, location_only_a: true, ridge: 0.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Relative log-likelihood change below which the loop stops.
    pub tol: f64,
    pub update: UpdateMask,
    pub constraints: Constraints,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
            update: UpdateMask::default(),
            constraints: Constraints::default(),
        }
    }
}

/// Slack allowed before a log-likelihood decrease is treated as an error.
pub const MONOTONICITY_SLACK: f64 = 1e-9;

/// Posterior moments sufficient for the closed-form updates.
///
/// Locations are 3-D throughout; the constant moment coordinates are
/// reattached analytically where a full-state quantity is needed. `x`
/// denotes the current step (t = 2..T) and `y` the previous one.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    pub n_steps: usize,
    pub n_sensors: usize,
    /// First-step posterior mean of the location.
    pub m1: Vector3<f64>,
    /// First-step posterior second moment E[c c^T].
    pub m1_outer: Matrix3<f64>,
    pub s_x: Vector3<f64>,
    pub s_y: Vector3<f64>,
    pub c_xx: Matrix3<f64>,
    pub c_xy: Matrix3<f64>,
    pub c_yy: Matrix3<f64>,
    /// Posterior-weighted squared residual sum over all steps and voxels.
    pub resid_trace: f64,
    /// Full L x L residual scatter, accumulated only on request.
    pub resid_scatter: Option<DMatrix<f64>>,
    pub log_likelihood: f64,
}

/// Quantities that do not change across EM iterations on a fixed state
/// space: per-state predicted sensor vectors, squared residuals, and the
/// per-state location coordinates used by the moment accumulation.
pub struct EmWorkspace {
    pub predicted: Vec<DVector<f64>>,
    /// T x K matrix of ||Y_t - B(c_k, q)||^2.
    pub resid_sq: DMatrix<f64>,
    /// K x 3 location coordinate of each state (voxel centers for a single
    /// source; per-source centers for a joint chain).
    pub centers: DMatrix<f64>,
    pub measurements: DMatrix<f64>,
}

impl EmWorkspace {
    pub fn new(
        grid: &VoxelGrid,
        sensors: &SensorArray,
        q_fixed: [f64; 3],
        consts: &FieldConstants,
        measurements: &DMatrix<f64>,
    ) -> Result<Self> {
        if measurements.ncols() != sensors.len() {
            return Err(Error::Dimension(format!(
                "measurements have {} columns but the array has {} sensors",
                measurements.ncols(),
                sensors.len()
            )));
        }
        let predicted = hmm::predicted_fields(grid, sensors, q_fixed, consts)?;
        let centers = DMatrix::from_fn(grid.len(), 3, |i, j| grid.centers[i][j]);
        Self::from_parts(predicted, centers, measurements)
    }

    /// Builds a workspace from already-computed predictions; used by the
    /// joint multi-source chain, whose states are voxel tuples.
    pub fn from_parts(
        predicted: Vec<DVector<f64>>,
        centers: DMatrix<f64>,
        measurements: &DMatrix<f64>,
    ) -> Result<Self> {
        if centers.nrows() != predicted.len() || centers.ncols() != 3 {
            return Err(Error::Dimension("centers must be K x 3".into()));
        }
        let n_sensors = measurements.ncols();
        if predicted.iter().any(|p| p.len() != n_sensors) {
            return Err(Error::Dimension(
                "predicted field length does not match measurements".into(),
            ));
        }
        let n_steps = measurements.nrows();
        let mut resid_sq = DMatrix::zeros(n_steps, predicted.len());
        let mut y = DVector::zeros(n_sensors);
        for t in 0..n_steps {
            for l in 0..n_sensors {
                y[l] = measurements[(t, l)];
            }
            for (k, pred) in predicted.iter().enumerate() {
                resid_sq[(t, k)] = (&y - pred).norm_squared();
            }
        }
        Ok(Self { predicted, resid_sq, centers, measurements: measurements.clone() })
    }

    /// Log emission matrix under noise covariance `v`, reusing the cached
    /// residuals when `v` is spherical.
    pub fn log_emission(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match NoiseModel::from_cov(v)? {
            NoiseModel::Spherical { inv_two_var, log_norm_const } => Ok(self
                .resid_sq
                .map(|r| log_norm_const - inv_two_var * r)),
            _ => hmm::emission_from_predicted(&self.measurements, &self.predicted, v),
        }
    }
}

/// Builds the discrete chain for the current parameters on a fixed grid.
pub fn build_model_from_workspace(
    params: &ModelParams,
    grid: &VoxelGrid,
    ws: &EmWorkspace,
) -> Result<DiscreteModel> {
    let (initial, log_initial_norm) = hmm::build_initial_with_norm(params, grid, 0)?;
    let (transition, log_transition_norm) = hmm::build_transition_with_norm(params, grid, 0)?;
    let log_emission = ws.log_emission(&params.v)?;
    Ok(DiscreteModel {
        initial,
        log_initial_norm,
        transition,
        log_transition_norm,
        log_emission,
    })
}

pub struct EStepResult {
    pub smoothing: SmoothingResult,
    pub stats: SufficientStats,
}

/// E-step: smoothed posteriors plus streaming sufficient statistics.
///
/// The cross moment C_xy contracts the pairwise posteriors against the
/// voxel centers one step at a time, so memory stays O(K) regardless of T.
pub fn e_step(
    model: &DiscreteModel,
    ws: &EmWorkspace,
    need_full_scatter: bool,
) -> Result<EStepResult> {
    let smoothing = hmm::smooth(model)?;
    let stats = accumulate_stats(model, &smoothing, ws, need_full_scatter)?;
    Ok(EStepResult { smoothing, stats })
}

/// Location moments of the smoothed posteriors: everything the closed-form
/// updates need besides the emission residuals.
pub(crate) struct LocationMoments {
    pub m1: Vector3<f64>,
    pub m1_outer: Matrix3<f64>,
    pub s_x: Vector3<f64>,
    pub s_y: Vector3<f64>,
    pub c_xx: Matrix3<f64>,
    pub c_xy: Matrix3<f64>,
    pub c_yy: Matrix3<f64>,
}

fn center_row(centers: &DMatrix<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(centers[(i, 0)], centers[(i, 1)], centers[(i, 2)])
}

/// Streams the posterior location moments in O(T K^2) time and O(K) memory;
/// the pairwise posteriors are contracted against `centers` one step at a
/// time instead of being materialized.
pub(crate) fn location_moments(
    model: &DiscreteModel,
    smoothing: &SmoothingResult,
    centers: &DMatrix<f64>,
) -> Result<LocationMoments> {
    let k = model.n_voxels();
    let n_steps = model.n_steps();
    if centers.nrows() != k || centers.ncols() != 3 {
        return Err(Error::Dimension("centers must be K x 3".into()));
    }

    let xi = &smoothing.xi;
    let mut m1 = Vector3::zeros();
    let mut m1_outer = Matrix3::zeros();
    for i in 0..k {
        let c = center_row(centers, i);
        m1 += xi[(0, i)] * c;
        m1_outer += xi[(0, i)] * c * c.transpose();
    }

    let mut s_x = Vector3::zeros();
    let mut s_y = Vector3::zeros();
    let mut c_xx = Matrix3::zeros();
    let mut c_yy = Matrix3::zeros();
    for t in 0..n_steps {
        let mut mean = Vector3::zeros();
        let mut outer = Matrix3::zeros();
        for i in 0..k {
            let w = xi[(t, i)];
            if w == 0.0 {
                continue;
            }
            let c = center_row(centers, i);
            mean += w * c;
            outer += w * c * c.transpose();
        }
        if t >= 1 {
            s_x += mean;
            c_xx += outer;
        }
        if t + 1 < n_steps {
            s_y += mean;
            c_yy += outer;
        }
    }

    // Pairwise cross moment without materializing eta:
    // eta_t = diag(u) P diag(w) with u_l = alpha_{t-1,l} zhat_l and
    // w_k = exp(log_em(t,k) - m_t) beta_t(k) / c~_t, so
    // sum_{l,k} eta(l,k) c_k c_l^T contracts through G = P^T diag(u) C.
    let z_shift = model
        .log_transition_norm
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let z_shift = if z_shift.is_finite() { z_shift } else { 0.0 };
    let zhat = DVector::from_fn(k, |l, _| (model.log_transition_norm[l] - z_shift).exp());

    let mut c_xy = Matrix3::zeros();
    let mut u = DVector::zeros(k);
    for t in 1..n_steps {
        let m = smoothing.emission_shift[t];
        let c_scale = smoothing.shifted_scale[t];
        for l in 0..k {
            u[l] = smoothing.alpha[(t - 1, l)] * zhat[l];
        }
        let weighted_centers = DMatrix::from_fn(k, 3, |i, j| u[i] * centers[(i, j)]);
        let g = model.transition.tr_mul(&weighted_centers); // K x 3
        for kk in 0..k {
            let w = (model.log_emission[(t, kk)] - m).exp() * smoothing.beta[(t, kk)] / c_scale;
            if w == 0.0 {
                continue;
            }
            let ck = center_row(centers, kk);
            for j in 0..3 {
                for i in 0..3 {
                    c_xy[(i, j)] += w * ck[i] * g[(kk, j)];
                }
            }
        }
    }

    Ok(LocationMoments { m1, m1_outer, s_x, s_y, c_xx, c_xy, c_yy })
}

/// Posterior-weighted total squared residual.
pub(crate) fn residual_trace(xi: &DMatrix<f64>, resid_sq: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for t in 0..xi.nrows() {
        for i in 0..xi.ncols() {
            total += xi[(t, i)] * resid_sq[(t, i)];
        }
    }
    total
}

/// Full L x L posterior-weighted residual scatter, assembled from the
/// per-step posterior mean prediction so the cost stays O(T K L + K L^2).
pub(crate) fn residual_scatter(xi: &DMatrix<f64>, ws: &EmWorkspace) -> DMatrix<f64> {
    let n_steps = xi.nrows();
    let k = xi.ncols();
    let n_sensors = ws.measurements.ncols();
    let mut syy = DMatrix::zeros(n_sensors, n_sensors);
    let mut sp = DMatrix::zeros(n_sensors, n_sensors);
    let mut spp = DMatrix::zeros(n_sensors, n_sensors);
    let mut y = DVector::zeros(n_sensors);
    for t in 0..n_steps {
        for l in 0..n_sensors {
            y[l] = ws.measurements[(t, l)];
        }
        let mut pbar = DVector::zeros(n_sensors);
        for i in 0..k {
            let w = xi[(t, i)];
            if w != 0.0 {
                pbar.axpy(w, &ws.predicted[i], 1.0);
            }
        }
        syy.ger(1.0, &y, &y, 1.0);
        sp.ger(1.0, &pbar, &y, 1.0);
    }
    let col_weight: Vec<f64> = (0..k).map(|i| xi.column(i).sum()).collect();
    for i in 0..k {
        if col_weight[i] != 0.0 {
            spp.ger(col_weight[i], &ws.predicted[i], &ws.predicted[i], 1.0);
        }
    }
    let scatter = syy - &sp - sp.transpose() + spp;
    (scatter.clone() + scatter.transpose()) * 0.5
}

fn accumulate_stats(
    model: &DiscreteModel,
    smoothing: &SmoothingResult,
    ws: &EmWorkspace,
    need_full_scatter: bool,
) -> Result<SufficientStats> {
    let k = model.n_voxels();
    let n_steps = model.n_steps();
    let n_sensors = ws.measurements.ncols();
    if ws.resid_sq.shape() != (n_steps, k) {
        return Err(Error::Dimension("workspace does not match the model".into()));
    }

    let LocationMoments { m1, m1_outer, s_x, s_y, c_xx, c_xy, c_yy } =
        location_moments(model, smoothing, &ws.centers)?;
    let resid_trace = residual_trace(&smoothing.xi, &ws.resid_sq);

    let resid_scatter = if need_full_scatter {
        Some(residual_scatter(&smoothing.xi, ws))
    } else {
        None
    };

    Ok(SufficientStats {
        n_steps,
        n_sensors,
        m1,
        m1_outer,
        s_x,
        s_y,
        c_xx,
        c_xy,
        c_yy,
        resid_trace,
        resid_scatter,
        log_likelihood: smoothing.log_likelihood,
    })
}

/// Clamps the eigenvalues of a symmetric 3x3 matrix below at `floor`.
/// Protects against exactly degenerate posteriors (all mass on one voxel),
/// which would otherwise produce a zero covariance the next chain build
/// cannot factor. Non-degenerate updates pass through unchanged.
fn clamp_spd(m: &Matrix3<f64>, floor: f64) -> Matrix3<f64> {
    let sym = (m + m.transpose()) * 0.5;
    // The floor must bound the smallest eigenvalue, not just the diagonal:
    // sym - floor*I admitting a Cholesky factor certifies exactly that.
    if nalgebra::Cholesky::new(sym - Matrix3::from_diagonal_element(floor)).is_some() {
        return sym;
    }
    let (vals, q) =
        crate::linalg::symmetric_eigen(&DMatrix::from_column_slice(3, 3, sym.as_slice()));
    let clamped = &q * DMatrix::from_diagonal(&vals.map(|v| v.max(floor))) * q.transpose();
    Matrix3::from_fn(|i, j| clamped[(i, j)])
}

// Lower bound on estimated variances. Keeping covariances away from
// singularity bounds how much Q evaluations amplify rounding noise in the
// accumulated moments, so the monotonicity checks in `fit` stay meaningful;
// the floor itself (sub-millimeter in head coordinates) is far below any
// resolvable source spread.
const COV_FLOOR: f64 = 1e-4;

fn diagonalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    Matrix3::from_diagonal(&m.diagonal())
}

/// Assembles full 6-D regression moments from the location statistics and
/// the constant moment vector q; used only for the unconstrained A solve.
fn full_state_moments(
    stats: &SufficientStats,
    q: &Vector3<f64>,
) -> (DVector<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let t1 = (stats.n_steps - 1) as f64;
    let mut s_x = DVector::zeros(6);
    let mut s_y = DVector::zeros(6);
    for i in 0..3 {
        s_x[i] = stats.s_x[i];
        s_x[i + 3] = t1 * q[i];
        s_y[i] = stats.s_y[i];
        s_y[i + 3] = t1 * q[i];
    }
    let mut c_xy = DMatrix::zeros(6, 6);
    let mut c_yy = DMatrix::zeros(6, 6);
    for i in 0..3 {
        for j in 0..3 {
            c_xy[(i, j)] = stats.c_xy[(i, j)];
            c_xy[(i, j + 3)] = stats.s_x[i] * q[j];
            c_xy[(i + 3, j)] = q[i] * stats.s_y[j];
            c_xy[(i + 3, j + 3)] = t1 * q[i] * q[j];
            c_yy[(i, j)] = stats.c_yy[(i, j)];
            c_yy[(i, j + 3)] = stats.s_y[i] * q[j];
            c_yy[(i + 3, j)] = q[i] * stats.s_y[j];
            c_yy[(i + 3, j + 3)] = t1 * q[i] * q[j];
        }
    }
    (s_x, s_y, c_xy, c_yy)
}

// Reject regression solves whose normal matrix is conditioned worse than
// this; past it the solve error costs more Q than the monotonicity slack
// allows, and the caller's fallback (skip the A update) is exact.
const A_SOLVE_COND_LIMIT: f64 = 1e7;

// Reject AR solutions with entries beyond this. A stable chain has O(1)
// coefficients; larger values only appear when the regression is nearly
// degenerate, and their sheer size amplifies rounding noise in every later
// Q evaluation past what the monotonicity slack tolerates.
const A_ENTRY_LIMIT: f64 = 10.0;

/// Closed-form M-step for a single source. Blocks outside the mask keep
/// their previous values; the moment coordinates are never touched.
pub fn m_step(
    stats: &SufficientStats,
    old: &ModelParams,
    config: &EmConfig,
) -> Result<ModelParams> {
    if old.n_sources() != 1 {
        return Err(Error::Params("m_step expects single-source parameters".into()));
    }
    if stats.n_steps < 2 {
        return Err(Error::Params("parameter updates need at least two time steps".into()));
    }
    let t1 = (stats.n_steps - 1) as f64;
    let mut new = old.clone();

    if config.update.mu0 {
        for i in 0..3 {
            new.mu0[i] = stats.m1[i];
        }
    }
    if config.update.sigma0 {
        let mu = new.location_mu0(0);
        let mut s0 = stats.m1_outer - stats.m1 * mu.transpose() - mu * stats.m1.transpose()
            + mu * mu.transpose();
        if config.constraints.diagonal_sigma {
            s0 = diagonalize(&s0);
        }
        let s0 = clamp_spd(&s0, COV_FLOOR);
        for i in 0..3 {
            for j in 0..3 {
                new.sigma0[(i, j)] = s0[(i, j)];
            }
        }
    }

    if config.update.a {
        if config.constraints.location_only_a {
            let sxy = stats.c_xy - stats.s_x * stats.s_y.transpose() / t1;
            let mut syy = stats.c_yy - stats.s_y * stats.s_y.transpose() / t1;
            for i in 0..3 {
                syy[(i, i)] += config.constraints.ridge;
            }
            let svd = syy.svd(false, false);
            let s_max = svd.singular_values.max();
            let s_min = svd.singular_values.min();
            if !(s_min > s_max / A_SOLVE_COND_LIMIT) {
                return Err(Error::SingularAUpdate {
                    cond: if s_min > 0.0 { s_max / s_min } else { f64::INFINITY },
                });
            }
            let syy_inv = syy
                .try_inverse()
                .ok_or(Error::SingularAUpdate { cond: s_max / s_min })?;
            let mut a_loc = sxy * syy_inv;
            // One refinement step against the normal equations keeps the
            // solve accurate even near the conditioning limit, where the
            // direct inverse alone loses enough digits to disturb Q.
            a_loc += (sxy - a_loc * syy) * syy_inv;
            if a_loc.amax() > A_ENTRY_LIMIT {
                return Err(Error::SingularAUpdate { cond: s_max / s_min });
            }
            for i in 0..3 {
                for j in 0..3 {
                    new.a[(i, j)] = a_loc[(i, j)];
                }
            }
        } else {
            let q = Vector3::from(old.q_fixed[0]);
            let (s_x, s_y, c_xy, c_yy) = full_state_moments(stats, &q);
            let sxy = c_xy - &s_x * s_y.transpose() / t1;
            let mut syy = c_yy - &s_y * s_y.transpose() / t1;
            for i in 0..6 {
                syy[(i, i)] += config.constraints.ridge;
            }
            let svd = syy.clone().svd(false, false);
            let s_max = svd.singular_values.max();
            let s_min = svd.singular_values.min();
            if !(s_min > s_max / A_SOLVE_COND_LIMIT) {
                return Err(Error::SingularAUpdate {
                    cond: if s_min > 0.0 { s_max / s_min } else { f64::INFINITY },
                });
            }
            let syy_inv = syy
                .clone()
                .try_inverse()
                .ok_or(Error::SingularAUpdate { cond: s_max / s_min })?;
            let mut a_full = &sxy * &syy_inv;
            a_full += (&sxy - &a_full * &syy) * &syy_inv;
            if a_full.amax() > A_ENTRY_LIMIT {
                return Err(Error::SingularAUpdate { cond: s_max / s_min });
            }
            new.a.view_mut((0, 0), (6, 6)).copy_from(&a_full);
        }
    }

    if config.update.b {
        let a_loc = new.location_a(0);
        let b_loc = (stats.s_x - a_loc * stats.s_y) / t1;
        for i in 0..3 {
            new.b[i] = b_loc[i];
        }
    }

    if config.update.sigma {
        let a = new.location_a(0);
        let b = new.location_b(0);
        let r = stats.c_xx
            - stats.c_xy * a.transpose()
            - a * stats.c_xy.transpose()
            + a * stats.c_yy * a.transpose()
            - stats.s_x * b.transpose()
            - b * stats.s_x.transpose()
            + a * stats.s_y * b.transpose()
            + b * (a * stats.s_y).transpose()
            + t1 * b * b.transpose();
        let mut sig = r / t1;
        if config.constraints.diagonal_sigma {
            sig = diagonalize(&sig);
        }
        let sig = clamp_spd(&sig, COV_FLOOR);
        for i in 0..3 {
            for j in 0..3 {
                new.sigma[(i, j)] = sig[(i, j)];
            }
        }
    }

    if config.update.v {
        let t = stats.n_steps as f64;
        let l = stats.n_sensors as f64;
        if config.constraints.scalar_v {
            let var = (stats.resid_trace / (t * l)).max(COV_FLOOR);
            new.v = DMatrix::from_diagonal_element(stats.n_sensors, stats.n_sensors, var);
        } else {
            let scatter = stats.resid_scatter.as_ref().ok_or_else(|| {
                Error::Config("full V update needs the residual scatter from the E-step".into())
            })?;
            new.v = scatter / t;
        }
    }

    new.validate()?;
    Ok(new)
}

/// Expected complete-data log-likelihood of `params` under the posteriors
/// `xi` (T x K) and `etas` (T-1 pairwise matrices), evaluated directly as
/// the triple sum over unnormalized chain densities.
pub fn expected_complete_loglik(
    params: &ModelParams,
    grid: &VoxelGrid,
    measurements: &DMatrix<f64>,
    sensors: &SensorArray,
    consts: &FieldConstants,
    xi: &DMatrix<f64>,
    etas: &[DMatrix<f64>],
) -> Result<f64> {
    let k = grid.len();
    let n_steps = xi.nrows();
    if xi.ncols() != k || etas.len() + 1 != n_steps {
        return Err(Error::Dimension("posterior dimensions do not match the grid".into()));
    }

    let init = Gaussian3::from_cov("Sigma0", &params.location_sigma0(0))?;
    let mu0 = params.location_mu0(0);
    let mut total = 0.0;
    for i in 0..k {
        if xi[(0, i)] != 0.0 {
            total += xi[(0, i)] * init.log_density(&grid.center(i), &mu0);
        }
    }

    let trans = Gaussian3::from_cov("Sigma", &params.location_sigma(0))?;
    let a = params.location_a(0);
    let b = params.location_b(0);
    for (idx, eta) in etas.iter().enumerate() {
        if eta.shape() != (k, k) {
            return Err(Error::Dimension(format!("eta at step {} has wrong shape", idx + 2)));
        }
        for l in 0..k {
            let mean = a * grid.center(l) + b;
            for kk in 0..k {
                if eta[(l, kk)] != 0.0 {
                    total += eta[(l, kk)] * trans.log_density(&grid.center(kk), &mean);
                }
            }
        }
    }

    let log_em = hmm::build_emission(
        measurements,
        grid,
        params,
        params.q_fixed[0],
        sensors,
        consts,
    )?;
    for t in 0..n_steps {
        for i in 0..k {
            if xi[(t, i)] != 0.0 {
                total += xi[(t, i)] * log_em[(t, i)];
            }
        }
    }
    Ok(total)
}

/// Initial- and transition-density terms of Q for one source's location
/// chain, from its posterior moments.
pub(crate) fn q_location_part(params: &ModelParams, stats: &SufficientStats) -> Result<f64> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let t1 = (stats.n_steps - 1) as f64;

    let s0 = params.location_sigma0(0);
    let chol0 = nalgebra::Cholesky::new(s0)
        .ok_or_else(|| Error::NotPositiveDefinite("Sigma0 location block".into()))?;
    let log_det0 = 2.0 * (0..3).map(|i| chol0.l()[(i, i)].ln()).sum::<f64>();
    let inv0 = chol0.inverse();
    let mu0 = params.location_mu0(0);
    let scatter0 = stats.m1_outer - stats.m1 * mu0.transpose() - mu0 * stats.m1.transpose()
        + mu0 * mu0.transpose();
    let q_init = -0.5 * (3.0 * two_pi.ln() + log_det0) - 0.5 * (inv0 * scatter0).trace();

    let sig = params.location_sigma(0);
    let chol = nalgebra::Cholesky::new(sig)
        .ok_or_else(|| Error::NotPositiveDefinite("Sigma location block".into()))?;
    let log_det = 2.0 * (0..3).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
    let inv = chol.inverse();
    let a = params.location_a(0);
    let b = params.location_b(0);
    let r = stats.c_xx
        - stats.c_xy * a.transpose()
        - a * stats.c_xy.transpose()
        + a * stats.c_yy * a.transpose()
        - stats.s_x * b.transpose()
        - b * stats.s_x.transpose()
        + a * stats.s_y * b.transpose()
        + b * (a * stats.s_y).transpose()
        + t1 * b * b.transpose();
    let q_trans = -0.5 * t1 * (3.0 * two_pi.ln() + log_det) - 0.5 * (inv * r).trace();
    Ok(q_init + q_trans)
}

/// Emission-density term of Q; shared across sources in a joint chain.
pub(crate) fn q_emission_part(params: &ModelParams, stats: &SufficientStats) -> Result<f64> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let t = stats.n_steps as f64;
    let l = stats.n_sensors as f64;
    let q_em = match NoiseModel::from_cov(&params.v)? {
        NoiseModel::Spherical { inv_two_var, log_norm_const } => {
            t * log_norm_const - inv_two_var * stats.resid_trace
        }
        NoiseModel::Full { .. } => {
            let scatter = stats.resid_scatter.as_ref().ok_or_else(|| {
                Error::Config("full V evaluation needs the residual scatter".into())
            })?;
            let cholv = nalgebra::Cholesky::new(params.v.clone())
                .ok_or_else(|| Error::NotPositiveDefinite("V".into()))?;
            let log_detv = 2.0 * (0..params.v.nrows())
                .map(|i| cholv.l()[(i, i)].ln())
                .sum::<f64>();
            let invv = cholv.inverse();
            -0.5 * t * (l * two_pi.ln() + log_detv) - 0.5 * (invv * scatter).trace()
        }
    };
    Ok(q_em)
}

/// Same quantity as [`expected_complete_loglik`] computed from the
/// sufficient statistics; algebraically identical.
pub fn q_from_stats(params: &ModelParams, stats: &SufficientStats) -> Result<f64> {
    Ok(q_location_part(params, stats)? + q_emission_part(params, stats)?)
}

#[derive(Debug, Clone, Default)]
pub struct EmTrace {
    /// Observed log-likelihood at the start of each iteration.
    pub log_likelihood: Vec<f64>,
    /// Expected complete-data log-likelihood Q after each M-step, evaluated
    /// on that iteration's posteriors.
    pub q: Vec<f64>,
    pub converged: bool,
    /// Iterations where the A-update was skipped because the centered
    /// regression scatter was numerically singular (the posterior had
    /// collapsed onto too few voxel centers). Holding A fixed for such an
    /// iteration is still a coordinate-ascent step, so monotonicity holds.
    pub a_update_skips: usize,
}

/// M-step with a graceful fallback: if the centered regression scatter is
/// numerically singular (posterior collapsed onto too few voxel centers),
/// the A-update is skipped for this iteration. Holding A fixed is still a
/// coordinate-ascent step, so EM monotonicity is preserved.
pub(crate) fn robust_m_step(
    stats: &SufficientStats,
    params: &ModelParams,
    config: &EmConfig,
    skips: &mut usize,
) -> Result<ModelParams> {
    match m_step(stats, params, config) {
        Ok(p) => Ok(p),
        Err(Error::SingularAUpdate { .. }) if config.update.a => {
            *skips += 1;
            let mut degraded = *config;
            degraded.update.a = false;
            m_step(stats, params, &degraded)
        }
        Err(e) => Err(e),
    }
}

pub(crate) fn needs_full_scatter(params: &ModelParams, config: &EmConfig) -> Result<bool> {
    if config.update.v && !config.constraints.scalar_v {
        return Ok(true);
    }
    Ok(matches!(NoiseModel::from_cov(&params.v)?, NoiseModel::Full { .. }))
}

/// Runs EM on a fixed grid until the expected complete-data log-likelihood
/// stops improving (relative change below `tol`) or `max_iters` is hit.
/// Each iteration the M-step's Q improvement is checked: a decrease beyond
/// the slack means a broken update and is reported as an error, as is any
/// decrease of the observed log-likelihood across iterations.
pub fn fit(
    params0: &ModelParams,
    grid: &VoxelGrid,
    measurements: &DMatrix<f64>,
    sensors: &SensorArray,
    consts: &FieldConstants,
    config: &EmConfig,
) -> Result<(ModelParams, EmTrace)> {
    params0.validate()?;
    if params0.n_sources() != 1 {
        return Err(Error::Params("fit expects single-source parameters".into()));
    }
    let ws = EmWorkspace::new(grid, sensors, params0.q_fixed[0], consts, measurements)?;
    let need_scatter = needs_full_scatter(params0, config)?;

    let mut params = params0.clone();
    let mut trace = EmTrace::default();
    for _ in 0..config.max_iters {
        let model = build_model_from_workspace(&params, grid, &ws)?;
        let es = e_step(&model, &ws, need_scatter)?;
        let ll = es.stats.log_likelihood;
        if let Some(&prev) = trace.log_likelihood.last() {
            if ll < prev - MONOTONICITY_SLACK * prev.abs().max(1.0) {
                return Err(Error::Params(format!(
                    "log-likelihood decreased from {prev} to {ll}"
                )));
            }
        }
        trace.log_likelihood.push(ll);

        let q_before = q_from_stats(&params, &es.stats)?;
        params = robust_m_step(&es.stats, &params, config, &mut trace.a_update_skips)?;
        let q_after = q_from_stats(&params, &es.stats)?;
        if q_after < q_before - MONOTONICITY_SLACK * q_before.abs().max(1.0) {
            return Err(Error::Params(format!(
                "M-step decreased Q from {q_before} to {q_after}"
            )));
        }
        trace.q.push(q_after);
        if (q_after - q_before).abs() <= config.tol * q_before.abs().max(1.0) {
            trace.converged = true;
            break;
        }
    }
    Ok((params, trace))
}

/// Default starting parameters on a grid when nothing better is known:
/// prior centered on the ROI with quarter-width spread, mildly contracting
/// dynamics drifting toward the centroid, and process noise at voxel scale.
pub fn initial_params(
    grid: &VoxelGrid,
    q_fixed: [f64; 3],
    n_sensors: usize,
    noise_var: f64,
) -> Result<ModelParams> {
    if !(noise_var > 0.0) {
        return Err(Error::Params(format!("noise_var must be > 0, got {noise_var}")));
    }
    let centroid = grid.roi.centroid();
    let widths = grid.widths();
    let mut mu0 = DVector::zeros(6);
    let mut sigma0 = DMatrix::zeros(6, 6);
    let mut a = DMatrix::zeros(6, 6);
    let mut b = DVector::zeros(6);
    let mut sigma = DMatrix::zeros(6, 6);
    for i in 0..3 {
        mu0[i] = centroid[i];
        mu0[i + 3] = q_fixed[i];
        let quarter = grid.roi.width(i) / 4.0;
        sigma0[(i, i)] = quarter * quarter;
        sigma0[(i + 3, i + 3)] = 1e-4;
        a[(i, i)] = 0.8;
        a[(i + 3, i + 3)] = 1.0;
        b[i] = 0.2 * centroid[i];
        sigma[(i, i)] = widths[i] * widths[i];
        sigma[(i + 3, i + 3)] = 1e-4;
    }
    let params = ModelParams {
        mu0,
        sigma0,
        a,
        b,
        sigma,
        v: DMatrix::from_diagonal_element(n_sensors, n_sensors, noise_var),
        q_fixed: vec![q_fixed],
    };
    params.validate()?;
    Ok(params)
}
