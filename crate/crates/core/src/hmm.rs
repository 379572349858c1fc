//! Discrete state-space probabilities and the scaled forward-backward
//! smoother over the voxel grid.
//!
//! Initial and transition weights are Gaussian densities of the location
//! dynamics evaluated at voxel centers. The stored vectors and rows are
//! normalized, and the normalizers are kept alongside so that the scaling
//! factors reproduce the density-weighted chain exactly: with them, the
//! closed-form parameter updates are the exact maximizers of the expected
//! complete-data log-likelihood and the observed log-likelihood is
//! non-decreasing across EM iterations.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::forward::{sensor_field, DipoleState, FieldConstants};
use crate::geometry::{SensorArray, VoxelGrid};
use crate::statespace::ModelParams;
use crate::{Error, Result};

/// Discrete hidden-state chain over an abstract state index. For a single
/// source the states are the voxels of one grid; for the joint multi-source
/// chain they are flattened voxel tuples.
#[derive(Debug, Clone)]
pub struct DiscreteModel {
    /// Normalized initial distribution over states.
    pub initial: DVector<f64>,
    /// Log of the initial normalizer: unnormalized weight = initial * exp(log_initial_norm).
    pub log_initial_norm: f64,
    /// Row-normalized transition matrix, entry (l, k) = P(l -> k).
    pub transition: DMatrix<f64>,
    /// Per-row log normalizers of the transition weights.
    pub log_transition_norm: DVector<f64>,
    /// T x K log emission densities.
    pub log_emission: DMatrix<f64>,
}

impl DiscreteModel {
    /// Builds a model from already-normalized components (normalizers zero).
    pub fn new(
        initial: DVector<f64>,
        transition: DMatrix<f64>,
        log_emission: DMatrix<f64>,
    ) -> Result<Self> {
        let k = initial.len();
        let model = Self {
            initial,
            log_initial_norm: 0.0,
            transition,
            log_transition_norm: DVector::zeros(k),
            log_emission,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn n_voxels(&self) -> usize {
        self.initial.len()
    }

    pub fn n_steps(&self) -> usize {
        self.log_emission.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.initial.len();
        if self.transition.shape() != (k, k)
            || self.log_transition_norm.len() != k
            || self.log_emission.ncols() != k
        {
            return Err(Error::Dimension(format!(
                "model components do not match the {k}-state chain"
            )));
        }
        if self.log_emission.nrows() == 0 {
            return Err(Error::Dimension("model needs at least one time step".into()));
        }
        let s = self.initial.sum();
        if (s - 1.0).abs() > 1e-10 {
            return Err(Error::Params(format!("initial distribution sums to {s}, not 1")));
        }
        for l in 0..k {
            let rs = self.transition.row(l).sum();
            if (rs - 1.0).abs() > 1e-8 {
                return Err(Error::Params(format!("transition row {l} sums to {rs}, not 1")));
            }
        }
        if self.log_emission.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Params("log emission matrix contains NaN or +inf".into()));
        }
        Ok(())
    }
}

/// Log-density parameters of a 3-D Gaussian from a Cholesky factor.
pub(crate) struct Gaussian3 {
    mean_free: bool,
    inv_l: Matrix3<f64>,
    log_norm_const: f64,
}

impl Gaussian3 {
    pub(crate) fn from_cov(name: &str, cov: &Matrix3<f64>) -> Result<Self> {
        let chol = nalgebra::Cholesky::new(*cov).ok_or_else(|| {
            Error::NotPositiveDefinite(format!("{name} location block is not positive definite"))
        })?;
        let l = chol.l();
        let log_det = 2.0 * (0..3).map(|i| l[(i, i)].ln()).sum::<f64>();
        let inv_l = l.try_inverse().ok_or_else(|| {
            Error::NotPositiveDefinite(format!("{name} location block is numerically singular"))
        })?;
        Ok(Self {
            mean_free: false,
            inv_l,
            log_norm_const: -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    pub(crate) fn log_density(&self, x: &Vector3<f64>, mean: &Vector3<f64>) -> f64 {
        debug_assert!(!self.mean_free);
        let w = self.inv_l * (x - mean);
        self.log_norm_const - 0.5 * w.norm_squared()
    }
}

/// Normalizes a vector of log weights, returning the probabilities and the
/// log normalizer so the unnormalized weights are recoverable exactly.
fn normalize_log_weights(log_w: &[f64]) -> Option<(DVector<f64>, f64)> {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    let mut w = DVector::from_fn(log_w.len(), |i, _| (log_w[i] - m).exp());
    let total = w.sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    w /= total;
    Some((w, m + total.ln()))
}

/// Initial voxel distribution: Gaussian density of the location block of
/// (mu0, Sigma0) at each voxel center, normalized over the grid.
pub fn build_initial(params: &ModelParams, grid: &VoxelGrid) -> Result<DVector<f64>> {
    build_initial_with_norm(params, grid, 0).map(|(p, _)| p)
}

/// As [`build_initial`], for source `n` of the stacked parameters, also
/// returning the log normalizer.
pub fn build_initial_with_norm(
    params: &ModelParams,
    grid: &VoxelGrid,
    source: usize,
) -> Result<(DVector<f64>, f64)> {
    let gauss = Gaussian3::from_cov("Sigma0", &params.location_sigma0(source))?;
    let mean = params.location_mu0(source);
    let log_w: Vec<f64> = (0..grid.len())
        .map(|k| gauss.log_density(&grid.center(k), &mean))
        .collect();
    normalize_log_weights(&log_w).ok_or(Error::PriorUnderflow)
}

/// Transition matrix: entry (l, k) is the Gaussian density of the location
/// dynamics A* c_l + b* with covariance Sigma* evaluated at c_k, rows
/// normalized over the grid.
pub fn build_transition(params: &ModelParams, grid: &VoxelGrid) -> Result<DMatrix<f64>> {
    build_transition_with_norm(params, grid, 0).map(|(p, _)| p)
}

pub fn build_transition_with_norm(
    params: &ModelParams,
    grid: &VoxelGrid,
    source: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let gauss = Gaussian3::from_cov("Sigma", &params.location_sigma(source))?;
    let a = params.location_a(source);
    let b = params.location_b(source);
    let k = grid.len();
    let centers: Vec<Vector3<f64>> = (0..k).map(|i| grid.center(i)).collect();

    let mut transition = DMatrix::zeros(k, k);
    let mut log_norm = DVector::zeros(k);
    let mut log_row = vec![0.0; k];
    for l in 0..k {
        let mean = a * centers[l] + b;
        for (kk, c) in centers.iter().enumerate() {
            log_row[kk] = gauss.log_density(c, &mean);
        }
        let (probs, norm) =
            normalize_log_weights(&log_row).ok_or(Error::TransitionUnderflow { voxel: l })?;
        transition.row_mut(l).copy_from(&probs.transpose());
        log_norm[l] = norm;
    }
    Ok((transition, log_norm))
}

/// Predicted sensor vector for every voxel, with the source fixed at the
/// voxel center and the moment at `q_fixed`.
pub fn predicted_fields(
    grid: &VoxelGrid,
    sensors: &SensorArray,
    q_fixed: [f64; 3],
    consts: &FieldConstants,
) -> Result<Vec<DVector<f64>>> {
    (0..grid.len())
        .map(|k| {
            let state = DipoleState::new(grid.centers[k], q_fixed);
            sensor_field(&state, sensors, consts)
        })
        .collect()
}

/// Inverse noise model for emission densities: scalar fast path when V is
/// spherical, Cholesky otherwise.
pub enum NoiseModel {
    Spherical { inv_two_var: f64, log_norm_const: f64 },
    Full { inv_l: DMatrix<f64>, log_norm_const: f64 },
}

impl NoiseModel {
    pub fn from_cov(v: &DMatrix<f64>) -> Result<Self> {
        let l = v.nrows();
        if l == 0 {
            return Err(Error::Dimension("V must be non-empty".into()));
        }
        let var = v[(0, 0)];
        let spherical = var > 0.0
            && (0..l).all(|i| {
                (0..l).all(|j| {
                    let expected = if i == j { var } else { 0.0 };
                    (v[(i, j)] - expected).abs() <= 1e-14 * var
                })
            });
        let dim = l as f64;
        if spherical {
            return Ok(NoiseModel::Spherical {
                inv_two_var: 0.5 / var,
                log_norm_const: -0.5 * dim * ((2.0 * std::f64::consts::PI * var).ln()),
            });
        }
        let chol = nalgebra::Cholesky::new(v.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("V is not positive definite".into()))?;
        let lmat = chol.l();
        let log_det = 2.0 * (0..l).map(|i| lmat[(i, i)].ln()).sum::<f64>();
        let inv_l = lmat.try_inverse().ok_or_else(|| {
            Error::NotPositiveDefinite("V is numerically singular".into())
        })?;
        Ok(NoiseModel::Full {
            inv_l,
            log_norm_const: -0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    pub fn log_density(&self, residual: &DVector<f64>) -> f64 {
        match self {
            NoiseModel::Spherical { inv_two_var, log_norm_const } => {
                log_norm_const - inv_two_var * residual.norm_squared()
            }
            NoiseModel::Full { inv_l, log_norm_const } => {
                let w = inv_l * residual;
                log_norm_const - 0.5 * w.norm_squared()
            }
        }
    }
}

/// T x K log emission matrix: entry (t, k) is log N(Y_t; B(c_k, q), V).
pub fn build_emission(
    measurements: &DMatrix<f64>,
    grid: &VoxelGrid,
    params: &ModelParams,
    q_fixed: [f64; 3],
    sensors: &SensorArray,
    consts: &FieldConstants,
) -> Result<DMatrix<f64>> {
    let predicted = predicted_fields(grid, sensors, q_fixed, consts)?;
    emission_from_predicted(measurements, &predicted, &params.v)
}

/// Emission matrix from precomputed per-voxel predictions.
pub fn emission_from_predicted(
    measurements: &DMatrix<f64>,
    predicted: &[DVector<f64>],
    v: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let noise = NoiseModel::from_cov(v)?;
    let n_steps = measurements.nrows();
    let n_sensors = measurements.ncols();
    if predicted.iter().any(|p| p.len() != n_sensors) {
        return Err(Error::Dimension("predicted field length does not match sensors".into()));
    }
    let mut log_em = DMatrix::zeros(n_steps, predicted.len());
    let mut y = DVector::zeros(n_sensors);
    for t in 0..n_steps {
        for l in 0..n_sensors {
            y[l] = measurements[(t, l)];
        }
        for (k, pred) in predicted.iter().enumerate() {
            log_em[(t, k)] = noise.log_density(&(&y - pred));
        }
    }
    Ok(log_em)
}

/// Output of the forward pass: filtered distributions and scaling factors.
pub struct ForwardPass {
    /// T x K filtered distributions, each row sums to 1.
    pub alpha: DMatrix<f64>,
    /// Log scaling factors log c_t; their sum is the log-likelihood.
    pub log_scale: DVector<f64>,
    /// Scaling factors after the per-step emission shift (internal to the
    /// backward pass, which must use the identical stabilization).
    pub(crate) shifted_scale: DVector<f64>,
    /// Per-step max log emission subtracted before exponentiation.
    pub(crate) emission_shift: DVector<f64>,
}

fn transition_weight_scale(model: &DiscreteModel) -> (DVector<f64>, f64) {
    let shift = model
        .log_transition_norm
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = if shift.is_finite() { shift } else { 0.0 };
    let zhat = DVector::from_fn(model.log_transition_norm.len(), |l, _| {
        (model.log_transition_norm[l] - shift).exp()
    });
    (zhat, shift)
}

/// Forward procedure: filtered distributions alpha and scaling factors c_t.
pub fn forward(model: &DiscreteModel) -> Result<ForwardPass> {
    model.validate()?;
    let k = model.n_voxels();
    let n_steps = model.n_steps();
    let (zhat, z_shift) = transition_weight_scale(model);

    let mut alpha = DMatrix::zeros(n_steps, k);
    let mut log_scale = DVector::zeros(n_steps);
    let mut shifted_scale = DVector::zeros(n_steps);
    let mut emission_shift = DVector::zeros(n_steps);

    let mut prev = DVector::zeros(k);
    for t in 0..n_steps {
        let m = model.log_emission.row(t).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::ForwardUnderflow { step: t + 1 });
        }
        let pred = if t == 0 {
            model.initial.clone()
        } else {
            let u = prev.component_mul(&zhat);
            model.transition.tr_mul(&u)
        };
        let mut a = DVector::from_fn(k, |kk, _| {
            (model.log_emission[(t, kk)] - m).exp() * pred[kk]
        });
        let c = a.sum();
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::ForwardUnderflow { step: t + 1 });
        }
        a /= c;
        alpha.row_mut(t).copy_from(&a.transpose());
        shifted_scale[t] = c;
        emission_shift[t] = m;
        log_scale[t] = c.ln() + m + if t == 0 { model.log_initial_norm } else { z_shift };
        prev = a;
    }

    Ok(ForwardPass { alpha, log_scale, shifted_scale, emission_shift })
}

/// Backward procedure: beta factors, using the forward scaling.
pub fn backward(model: &DiscreteModel, fwd: &ForwardPass) -> Result<DMatrix<f64>> {
    let k = model.n_voxels();
    let n_steps = model.n_steps();
    let (zhat, _) = transition_weight_scale(model);

    let mut beta = DMatrix::zeros(n_steps, k);
    beta.row_mut(n_steps - 1).fill(1.0);
    let mut next = DVector::from_element(k, 1.0);
    for t in (0..n_steps.saturating_sub(1)).rev() {
        let m = fwd.emission_shift[t + 1];
        let weighted = DVector::from_fn(k, |l, _| {
            next[l] * (model.log_emission[(t + 1, l)] - m).exp()
        });
        let mut b = &model.transition * weighted;
        b.component_mul_assign(&zhat);
        b /= fwd.shifted_scale[t + 1];
        beta.row_mut(t).copy_from(&b.transpose());
        next = b;
    }
    Ok(beta)
}

/// Smoothed posteriors: alpha, beta, their product xi, and the
/// log-likelihood sum of the log scaling factors.
pub struct SmoothingResult {
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    /// Log scaling factors log c_t.
    pub log_scale: DVector<f64>,
    /// T x K smoothed posterior, each row sums to 1.
    pub xi: DMatrix<f64>,
    pub log_likelihood: f64,
    pub(crate) shifted_scale: DVector<f64>,
    pub(crate) emission_shift: DVector<f64>,
}

pub fn smooth(model: &DiscreteModel) -> Result<SmoothingResult> {
    let fwd = forward(model)?;
    let beta = backward(model, &fwd)?;
    let n_steps = model.n_steps();
    let k = model.n_voxels();

    let mut xi = DMatrix::zeros(n_steps, k);
    for t in 0..n_steps {
        let mut row_sum = 0.0;
        for kk in 0..k {
            let v = fwd.alpha[(t, kk)] * beta[(t, kk)];
            xi[(t, kk)] = v;
            row_sum += v;
        }
        if (row_sum - 1.0).abs() > 1e-8 {
            return Err(Error::Params(format!(
                "posterior row {t} sums to {row_sum}, outside 1e-8 of 1"
            )));
        }
        // Remove residual rounding so downstream weighted sums are exact.
        for kk in 0..k {
            xi[(t, kk)] /= row_sum;
        }
    }

    let log_likelihood = fwd.log_scale.sum();
    Ok(SmoothingResult {
        alpha: fwd.alpha,
        beta,
        log_scale: fwd.log_scale,
        xi,
        log_likelihood,
        shifted_scale: fwd.shifted_scale,
        emission_shift: fwd.emission_shift,
    })
}

/// Pairwise posteriors eta_t for t = 2..T, each a K x K matrix over
/// (previous voxel l, current voxel k) summing to 1.
pub fn pairwise(model: &DiscreteModel, result: &SmoothingResult) -> Result<Vec<DMatrix<f64>>> {
    let k = model.n_voxels();
    let n_steps = model.n_steps();
    let (zhat, _) = transition_weight_scale(model);

    let mut etas = Vec::with_capacity(n_steps.saturating_sub(1));
    for t in 1..n_steps {
        let m = result.emission_shift[t];
        let c = result.shifted_scale[t];
        let mut eta = DMatrix::zeros(k, k);
        for l in 0..k {
            let left = result.alpha[(t - 1, l)] * zhat[l];
            if left == 0.0 {
                continue;
            }
            for kk in 0..k {
                eta[(l, kk)] = left
                    * model.transition[(l, kk)]
                    * (model.log_emission[(t, kk)] - m).exp()
                    * result.beta[(t, kk)]
                    / c;
            }
        }
        let total = eta.sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(Error::Params(format!(
                "pairwise posterior at step {} sums to {total}, outside 1e-8 of 1",
                t + 1
            )));
        }
        etas.push(eta);
    }
    Ok(etas)
}

/// Builds the full discrete model for one source from stacked parameters.
pub fn build_model(
    params: &ModelParams,
    grid: &VoxelGrid,
    measurements: &DMatrix<f64>,
    sensors: &SensorArray,
    consts: &FieldConstants,
) -> Result<DiscreteModel> {
    let (initial, log_initial_norm) = build_initial_with_norm(params, grid, 0)?;
    let (transition, log_transition_norm) = build_transition_with_norm(params, grid, 0)?;
    let log_emission =
        build_emission(measurements, grid, params, params.q_fixed[0], sensors, consts)?;
    let model = DiscreteModel {
        initial,
        log_initial_norm,
        transition,
        log_transition_norm,
        log_emission,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{discretize, RoiBox};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn line_grid(n: usize, width: f64) -> VoxelGrid {
        let roi = RoiBox::new([[0.0, width], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        discretize(&roi, [n, 1, 1]).unwrap()
    }

    fn single_source_params(
        mu0_loc: [f64; 3],
        s0: f64,
        a_loc: [f64; 3],
        b_loc: [f64; 3],
        s: f64,
    ) -> ModelParams {
        let mut mu0 = vec![0.0; 6];
        mu0[..3].copy_from_slice(&mu0_loc);
        mu0[3..].copy_from_slice(&[1.0, 1.0, 1.0]);
        let mut a = vec![1.0; 6];
        a[..3].copy_from_slice(&a_loc);
        let mut b = vec![0.0; 6];
        b[..3].copy_from_slice(&b_loc);
        ModelParams {
            mu0: DVector::from_vec(mu0),
            sigma0: DMatrix::from_diagonal(&DVector::from_vec(vec![s0, s0, s0, 1.0, 1.0, 1.0])),
            a: DMatrix::from_diagonal(&DVector::from_vec(a.clone())),
            b: DVector::from_vec(b),
            sigma: DMatrix::from_diagonal(&DVector::from_vec(vec![s, s, s, 1.0, 1.0, 1.0])),
            v: DMatrix::from_diagonal_element(1, 1, 1.0),
            q_fixed: vec![[1.0, 1.0, 1.0]],
        }
    }

    #[test]
    fn initial_point_mass_limit() {
        let grid = line_grid(3, 3.0);
        // mu0 exactly at the middle center (1.5, 0.5, 0.5), tiny variance.
        let params = single_source_params([1.5, 0.5, 0.5], 1e-12, [1.0; 3], [0.0; 3], 1.0);
        let init = build_initial(&params, &grid).unwrap();
        assert_relative_eq!(init[1], 1.0, epsilon = 1e-12);
        assert!(init[0] < 1e-12 && init[2] < 1e-12);
    }

    #[test]
    fn initial_symmetric() {
        let roi = RoiBox::new([[-1.0, 1.0], [-1.0, 1.0], [-1.0, 1.0]]).unwrap();
        let grid = discretize(&roi, [3, 3, 3]).unwrap();
        let params = single_source_params([0.0, 0.0, 0.0], 0.5, [1.0; 3], [0.0; 3], 1.0);
        let init = build_initial(&params, &grid).unwrap();
        for k in 0..grid.len() {
            let mirror = grid.len() - 1 - k;
            assert_relative_eq!(init[k], init[mirror], max_relative = 1e-10);
        }
        assert_relative_eq!(init.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn initial_single_voxel() {
        let grid = line_grid(1, 1.0);
        let params = single_source_params([0.5, 0.5, 0.5], 0.1, [1.0; 3], [0.0; 3], 1.0);
        let init = build_initial(&params, &grid).unwrap();
        assert_relative_eq!(init[0], 1.0);
    }

    #[test]
    fn transition_frozen_dynamics() {
        let grid = line_grid(4, 4.0);
        let params = single_source_params([0.0; 3], 1.0, [1.0; 3], [0.0; 3], 1e-12);
        let trans = build_transition(&params, &grid).unwrap();
        for l in 0..4 {
            assert_relative_eq!(trans[(l, l)], 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn transition_rows_normalized() {
        let grid = line_grid(5, 2.5);
        let params =
            single_source_params([0.0; 3], 1.0, [0.7, 0.8, 0.9], [0.3, -0.2, 0.1], 0.4);
        let trans = build_transition(&params, &grid).unwrap();
        for l in 0..5 {
            assert_relative_eq!(trans.row(l).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn transition_shift_one_voxel() {
        // 1-D 3-voxel grid, identity dynamics plus one voxel width drift:
        // the density pattern over targets is the same for every row, just
        // centered one cell to the right of the source cell.
        let grid = line_grid(3, 3.0);
        let sigma = 0.3f64;
        let params = single_source_params([0.0; 3], 1.0, [1.0; 3], [1.0, 0.0, 0.0], sigma);
        let trans = build_transition(&params, &grid).unwrap();

        // Hand evaluation for row 0 (center x = 0.5, mean 1.5):
        let d = |x: f64| (-(x - 1.5f64).powi(2) / (2.0 * sigma)).exp();
        let total = d(0.5) + d(1.5) + d(2.5);
        assert_relative_eq!(trans[(0, 0)], d(0.5) / total, max_relative = 1e-10);
        assert_relative_eq!(trans[(0, 1)], d(1.5) / total, max_relative = 1e-10);
        assert_relative_eq!(trans[(0, 2)], d(2.5) / total, max_relative = 1e-10);
        // Mass concentrates one cell right of the diagonal.
        assert!(trans[(1, 2)] > trans[(1, 1)]);
    }

    fn uniform_model(n_steps: usize, k: usize) -> DiscreteModel {
        DiscreteModel::new(
            DVector::from_element(k, 1.0 / k as f64),
            DMatrix::from_element(k, k, 1.0 / k as f64),
            DMatrix::zeros(n_steps, k),
        )
        .unwrap()
    }

    #[test]
    fn forward_single_step_proportional_to_prior_times_emission() {
        let initial = DVector::from_vec(vec![0.5, 0.3, 0.2]);
        let log_em = DMatrix::from_row_slice(1, 3, &[-1.0, -2.0, -0.5]);
        let model = DiscreteModel::new(
            initial.clone(),
            DMatrix::from_element(3, 3, 1.0 / 3.0),
            log_em.clone(),
        )
        .unwrap();
        let fwd = forward(&model).unwrap();
        let mut expected = DVector::from_fn(3, |k, _| initial[k] * log_em[(0, k)].exp());
        let z = expected.sum();
        expected /= z;
        for k in 0..3 {
            assert_relative_eq!(fwd.alpha[(0, k)], expected[k], max_relative = 1e-12);
        }
        assert_relative_eq!(fwd.log_scale[0], z.ln(), max_relative = 1e-12);
    }

    #[test]
    fn forward_k1_always_one() {
        let model = uniform_model(4, 1);
        let fwd = forward(&model).unwrap();
        for t in 0..4 {
            assert_relative_eq!(fwd.alpha[(t, 0)], 1.0);
        }
    }

    #[test]
    fn backward_terminal_row_ones() {
        let model = uniform_model(3, 4);
        let fwd = forward(&model).unwrap();
        let beta = backward(&model, &fwd).unwrap();
        for k in 0..4 {
            assert_relative_eq!(beta[(2, k)], 1.0);
        }
    }

    #[test]
    fn smooth_uniform_is_uniform() {
        let model = uniform_model(3, 4);
        let res = smooth(&model).unwrap();
        for t in 0..3 {
            for k in 0..4 {
                assert_relative_eq!(res.xi[(t, k)], 0.25, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn smooth_single_step_equals_alpha() {
        let model = DiscreteModel::new(
            DVector::from_vec(vec![0.2, 0.5, 0.3]),
            DMatrix::from_element(3, 3, 1.0 / 3.0),
            DMatrix::from_row_slice(1, 3, &[-0.5, -1.5, -0.25]),
        )
        .unwrap();
        let res = smooth(&model).unwrap();
        for k in 0..3 {
            assert_relative_eq!(res.xi[(0, k)], res.alpha[(0, k)]);
        }
    }

    #[test]
    fn pairwise_marginals_match_xi() {
        let initial = DVector::from_vec(vec![0.4, 0.3, 0.2, 0.1]);
        let transition = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.7, 0.1, 0.1, 0.1, //
                0.2, 0.5, 0.2, 0.1, //
                0.1, 0.2, 0.5, 0.2, //
                0.1, 0.1, 0.2, 0.6,
            ],
        );
        let log_em = DMatrix::from_row_slice(
            3,
            4,
            &[-0.2, -1.0, -2.0, -0.7, -1.4, -0.3, -0.9, -2.2, -0.1, -0.5, -1.2, -0.4],
        );
        let model = DiscreteModel::new(initial, transition, log_em).unwrap();
        let res = smooth(&model).unwrap();
        let etas = pairwise(&model, &res).unwrap();
        assert_eq!(etas.len(), 2);
        for (idx, eta) in etas.iter().enumerate() {
            let t = idx + 1;
            assert_relative_eq!(eta.sum(), 1.0, epsilon = 1e-10);
            for k in 0..4 {
                let col: f64 = (0..4).map(|l| eta[(l, k)]).sum();
                assert_relative_eq!(col, res.xi[(t, k)], epsilon = 1e-10);
                let row: f64 = (0..4).map(|l| eta[(k, l)]).sum();
                assert_relative_eq!(row, res.xi[(t - 1, k)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn emission_row_max_at_truth() {
        let head = crate::geometry::HeadModel::new([0.0; 3], 10.0).unwrap();
        let sensors = crate::geometry::place_sensors(&head, 24, 3, 0.5).unwrap();
        let roi = RoiBox::new([[-4.0, 4.0], [-4.0, 4.0], [0.0, 6.0]]).unwrap();
        let grid = discretize(&roi, [4, 4, 3]).unwrap();
        let consts = FieldConstants::default();
        let q = [3.0, 3.0, 3.0];
        let truth = 22; // arbitrary voxel
        let field = sensor_field(
            &DipoleState::new(grid.centers[truth], q),
            &sensors,
            &consts,
        )
        .unwrap();
        let mut measurements = DMatrix::zeros(1, 24);
        measurements.row_mut(0).copy_from(&field.transpose());

        let mut params = single_source_params([0.0; 3], 1.0, [1.0; 3], [0.0; 3], 1.0);
        params.v = DMatrix::from_diagonal_element(24, 24, 1e-4);
        let log_em = build_emission(&measurements, &grid, &params, q, &sensors, &consts).unwrap();
        let argmax = (0..grid.len())
            .max_by(|&a, &b| log_em[(0, a)].partial_cmp(&log_em[(0, b)]).unwrap())
            .unwrap();
        assert_eq!(argmax, truth);

        // Scaling V preserves the argmax.
        params.v *= 2.0;
        let log_em2 = build_emission(&measurements, &grid, &params, q, &sensors, &consts).unwrap();
        let argmax2 = (0..grid.len())
            .max_by(|&a, &b| log_em2[(0, a)].partial_cmp(&log_em2[(0, b)]).unwrap())
            .unwrap();
        assert_eq!(argmax2, truth);
    }

    #[test]
    fn emission_scalar_hand_value() {
        // L = 1, K = 2: plain scalar Gaussian log-density.
        let grid = line_grid(2, 2.0);
        let predicted = vec![DVector::from_vec(vec![1.0]), DVector::from_vec(vec![3.0])];
        let measurements = DMatrix::from_row_slice(1, 1, &[2.0]);
        let v = DMatrix::from_diagonal_element(1, 1, 4.0);
        let log_em = emission_from_predicted(&measurements, &predicted, &v).unwrap();
        let expect = |resid: f64| {
            -0.5 * (2.0 * std::f64::consts::PI * 4.0).ln() - resid * resid / 8.0
        };
        assert_relative_eq!(log_em[(0, 0)], expect(1.0), max_relative = 1e-12);
        assert_relative_eq!(log_em[(0, 1)], expect(-1.0), max_relative = 1e-12);
        let _ = grid;
    }

    #[test]
    fn forward_underflow_reported() {
        let model = DiscreteModel::new(
            DVector::from_vec(vec![0.5, 0.5]),
            DMatrix::from_element(2, 2, 0.5),
            DMatrix::from_element(2, 2, f64::NEG_INFINITY),
        )
        .unwrap();
        assert!(matches!(forward(&model), Err(Error::ForwardUnderflow { step: 1 })));
    }
}
