//! Dynamic ROI refinement: shrink the region of interest from intermediate
//! posteriors and refine the mesh between EM iterations, so late iterations
//! spend their voxel budget where the posterior mass actually is.

use nalgebra::DMatrix;

use crate::em::{
    self, build_model_from_workspace, e_step, needs_full_scatter, q_from_stats, robust_m_step,
    EmConfig, EmWorkspace, MONOTONICITY_SLACK,
};
use crate::forward::FieldConstants;
use crate::geometry::{discretize, HeadModel, RoiBox, SensorArray, VoxelGrid};
use crate::statespace::ModelParams;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct DynamicConfig {
    pub initial_roi: RoiBox,
    pub initial_mesh: [usize; 3],
    /// Added to every mesh axis after each outer iteration.
    pub mesh_increment: usize,
    /// Per-axis mesh cap; keeps the O(T K^2) smoother bounded.
    pub mesh_cap: usize,
    /// The m in the +/- m * sigma posterior intervals.
    pub sigma_multiplier: f64,
    pub max_outer_iters: usize,
    /// Disable ROI shrinking (mesh refinement alone still applies).
    pub shrink: bool,
    /// Shrink only after the inner EM loop has converged on the current
    /// grid, instead of after every single E-step.
    pub shrink_after_convergence: bool,
}

impl DynamicConfig {
    pub fn new(initial_roi: RoiBox, initial_mesh: [usize; 3]) -> Self {
        Self {
            initial_roi,
            initial_mesh,
            mesh_increment: 1,
            mesh_cap: 25,
            sigma_multiplier: 3.0,
            max_outer_iters: 10,
            shrink: true,
            shrink_after_convergence: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_multiplier > 0.0) {
            return Err(Error::Config(format!(
                "sigma_multiplier must be > 0, got {}",
                self.sigma_multiplier
            )));
        }
        if self.max_outer_iters == 0 {
            return Err(Error::Config("max_outer_iters must be >= 1".into()));
        }
        if self.initial_mesh.iter().any(|&m| m == 0) {
            return Err(Error::Config("initial mesh must be >= 1 per axis".into()));
        }
        if self.mesh_cap == 0 || self.initial_mesh.iter().any(|&m| m > self.mesh_cap) {
            return Err(Error::Config("initial mesh exceeds the mesh cap".into()));
        }
        Ok(())
    }
}

/// New ROI from the smoothed posteriors: per axis, the union over time of
/// the +/- m*sigma intervals around the posterior location means, clipped
/// to the head bounding box. Axes that collapse (point-mass posteriors at
/// a single stationary voxel) are expanded to one voxel width.
pub fn shrink_roi(
    xi: &DMatrix<f64>,
    grid: &VoxelGrid,
    multiplier: f64,
    head: &HeadModel,
) -> Result<RoiBox> {
    if xi.ncols() != grid.len() || xi.nrows() == 0 {
        return Err(Error::Dimension("posterior shape does not match the grid".into()));
    }
    if !(multiplier > 0.0) {
        return Err(Error::Config(format!("multiplier must be > 0, got {multiplier}")));
    }
    let bounds = head.bounding_box();
    let widths = grid.widths();
    let mut intervals = [[0.0f64; 2]; 3];
    for axis in 0..3 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in 0..xi.nrows() {
            let mut mean = 0.0;
            let mut second = 0.0;
            for k in 0..grid.len() {
                let c = grid.centers[k][axis];
                mean += xi[(t, k)] * c;
                second += xi[(t, k)] * c * c;
            }
            let var = (second - mean * mean).max(0.0);
            let sd = var.sqrt();
            lo = lo.min(mean - multiplier * sd);
            hi = hi.max(mean + multiplier * sd);
        }
        let mut lo = lo.max(bounds.intervals[axis][0]);
        let mut hi = hi.min(bounds.intervals[axis][1]);
        if !(hi > lo) {
            // Collapsed axis: keep one voxel width around the midpoint.
            let mid = 0.5 * (lo + hi);
            lo = (mid - 0.5 * widths[axis]).max(bounds.intervals[axis][0]);
            hi = (mid + 0.5 * widths[axis]).min(bounds.intervals[axis][1]);
        }
        intervals[axis] = [lo, hi];
    }
    RoiBox::new(intervals)
}

/// Number of time steps at which a true source location falls outside the
/// ROI; monitors the coverage assumption behind the shrinking step.
pub fn coverage_violations(locations: &[[f64; 3]], roi: &RoiBox) -> usize {
    locations
        .iter()
        .filter(|p| !roi.contains(&nalgebra::Vector3::from(**p)))
        .count()
}

/// One outer iteration of the dynamic fit.
#[derive(Debug, Clone)]
pub struct DynamicStage {
    pub roi: RoiBox,
    pub mesh: [usize; 3],
    pub log_likelihood: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DynamicTrace {
    pub stages: Vec<DynamicStage>,
    pub converged: bool,
    pub a_update_skips: usize,
}

fn grown_mesh(mesh: [usize; 3], increment: usize, cap: usize) -> [usize; 3] {
    let mut next = mesh;
    for m in next.iter_mut() {
        *m = (*m + increment).min(cap);
    }
    next
}

/// EM with dynamic ROI refinement. Each outer iteration runs one E-step on
/// the current grid, applies the closed-form M-step, then shrinks the ROI
/// from the smoothed posteriors and refines the mesh for the next
/// iteration. Stops when the expected complete-data log-likelihood changes
/// by less than `econfig.tol` relatively; values computed on different
/// grids are not strictly comparable, so this is a pragmatic criterion
/// rather than a guarantee (log-likelihood monotonicity holds per grid,
/// not across grid changes).
pub fn dynamic_fit(
    params0: &ModelParams,
    measurements: &DMatrix<f64>,
    sensors: &SensorArray,
    consts: &FieldConstants,
    head: &HeadModel,
    dconfig: &DynamicConfig,
    econfig: &EmConfig,
) -> Result<(ModelParams, VoxelGrid, DynamicTrace)> {
    dconfig.validate()?;
    params0.validate()?;
    if params0.n_sources() != 1 {
        return Err(Error::Params("dynamic_fit expects single-source parameters".into()));
    }

    let mut roi = dconfig.initial_roi.clone();
    let mut mesh = dconfig.initial_mesh;
    let mut params = params0.clone();
    let mut trace = DynamicTrace::default();
    let need_scatter = needs_full_scatter(params0, econfig)?;

    let mut grid = discretize(&roi, mesh)?;
    for outer in 0..dconfig.max_outer_iters {
        let ws = EmWorkspace::new(&grid, sensors, params.q_fixed[0], consts, measurements)?;

        let (xi, ll, q) = if dconfig.shrink_after_convergence {
            // Run the inner EM loop to convergence on this grid, then take
            // one more E-step under the fitted parameters for the shrink.
            let (fitted, em_trace) =
                em::fit(&params, &grid, measurements, sensors, consts, econfig)?;
            trace.a_update_skips += em_trace.a_update_skips;
            params = fitted;
            let model = build_model_from_workspace(&params, &grid, &ws)?;
            let es = e_step(&model, &ws, false)?;
            let q = *em_trace.q.last().ok_or_else(|| {
                Error::Params("inner EM performed no iterations".into())
            })?;
            (es.smoothing.xi, es.stats.log_likelihood, q)
        } else {
            let model = build_model_from_workspace(&params, &grid, &ws)?;
            let es = e_step(&model, &ws, need_scatter)?;
            params = robust_m_step(&es.stats, &params, econfig, &mut trace.a_update_skips)?;
            let q = q_from_stats(&params, &es.stats)?;
            (es.smoothing.xi, es.stats.log_likelihood, q)
        };

        let prev_q = trace.stages.last().map(|s| s.q);
        trace.stages.push(DynamicStage { roi: roi.clone(), mesh, log_likelihood: ll, q });
        if let Some(prev) = prev_q {
            if (q - prev).abs() <= econfig.tol * prev.abs().max(1.0)
                && q >= prev - MONOTONICITY_SLACK * prev.abs().max(1.0)
            {
                trace.converged = true;
                break;
            }
        }

        if outer + 1 < dconfig.max_outer_iters {
            if dconfig.shrink {
                roi = shrink_roi(&xi, &grid, dconfig.sigma_multiplier, head)?;
            }
            mesh = grown_mesh(mesh, dconfig.mesh_increment, dconfig.mesh_cap);
            grid = discretize(&roi, mesh)?;
        }
    }

    Ok((params, grid, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::place_sensors;
    use crate::statespace::{simulate, SimConfig};
    use approx::assert_relative_eq;
    use nalgebra::{DVector, Vector3};

    fn head() -> HeadModel {
        HeadModel::new([0.0; 3], 10.0).unwrap()
    }

    fn one_hot(t_steps: usize, k: usize, hot: usize) -> DMatrix<f64> {
        let mut xi = DMatrix::zeros(t_steps, k);
        for t in 0..t_steps {
            xi[(t, hot)] = 1.0;
        }
        xi
    }

    #[test]
    fn shrink_point_mass_min_width() {
        let roi = RoiBox::new([[-4.0, 4.0], [-4.0, 4.0], [0.0, 8.0]]).unwrap();
        let grid = discretize(&roi, [4, 4, 4]).unwrap();
        let xi = one_hot(5, grid.len(), 21);
        let shrunk = shrink_roi(&xi, &grid, 3.0, &head()).unwrap();
        let c = grid.center(21);
        for axis in 0..3 {
            assert!(shrunk.intervals[axis][0] <= c[axis] && c[axis] <= shrunk.intervals[axis][1]);
            assert_relative_eq!(shrunk.width(axis), 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn shrink_uniform_symmetric() {
        let roi = RoiBox::new([[-3.0, 3.0], [-3.0, 3.0], [-3.0, 3.0]]).unwrap();
        let grid = discretize(&roi, [3, 3, 3]).unwrap();
        let k = grid.len();
        let xi = DMatrix::from_element(4, k, 1.0 / k as f64);
        let shrunk = shrink_roi(&xi, &grid, 2.0, &head()).unwrap();
        for axis in 0..3 {
            assert_relative_eq!(
                shrunk.intervals[axis][0],
                -shrunk.intervals[axis][1],
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn shrink_stays_in_head_bounds() {
        let roi = RoiBox::new([[-9.0, 9.0], [-9.0, 9.0], [-9.0, 9.0]]).unwrap();
        let grid = discretize(&roi, [3, 3, 3]).unwrap();
        let k = grid.len();
        let xi = DMatrix::from_element(2, k, 1.0 / k as f64);
        // Huge multiplier: raw intervals exceed the head, must clip.
        let shrunk = shrink_roi(&xi, &grid, 50.0, &head()).unwrap();
        let bounds = head().bounding_box();
        for axis in 0..3 {
            assert!(shrunk.intervals[axis][0] >= bounds.intervals[axis][0] - 1e-12);
            assert!(shrunk.intervals[axis][1] <= bounds.intervals[axis][1] + 1e-12);
        }
    }

    #[test]
    fn stationary_point_mass_rois_non_expanding() {
        let roi = RoiBox::new([[-4.0, 4.0], [-4.0, 4.0], [0.0, 8.0]]).unwrap();
        let mut grid = discretize(&roi, [4, 4, 4]).unwrap();
        let mut prev_widths = [roi.width(0), roi.width(1), roi.width(2)];
        for _ in 0..3 {
            let hot = grid.len() / 2;
            let xi = one_hot(3, grid.len(), hot);
            let shrunk = shrink_roi(&xi, &grid, 3.0, &head()).unwrap();
            for axis in 0..3 {
                assert!(shrunk.width(axis) <= prev_widths[axis] + 1e-12);
                prev_widths[axis] = shrunk.width(axis);
            }
            grid = discretize(&shrunk, [4, 4, 4]).unwrap();
        }
    }

    #[test]
    fn coverage_counter() {
        let roi = RoiBox::new([[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let pts = vec![[0.5, 0.5, 0.5], [2.0, 0.5, 0.5], [0.1, 0.9, 0.0]];
        assert_eq!(coverage_violations(&pts, &roi), 1);
    }

    fn case_setup() -> (ModelParams, SensorArray, FieldConstants, DMatrix<f64>) {
        let sensors = place_sensors(&head(), 30, 7, 0.5).unwrap();
        let params = ModelParams {
            mu0: DVector::from_vec(vec![-1.0, 1.0, 4.0, 3.0, 3.0, 3.0]),
            sigma0: DMatrix::from_diagonal(&DVector::from_vec(vec![
                0.5, 0.5, 0.5, 1e-4, 1e-4, 1e-4,
            ])),
            a: DMatrix::from_diagonal(&DVector::from_vec(vec![0.8, 0.7, 0.9, 1.0, 1.0, 1.0])),
            b: DVector::from_vec(vec![0.3, -0.2, 0.4, 0.0, 0.0, 0.0]),
            sigma: DMatrix::from_diagonal(&DVector::from_vec(vec![
                1.0, 1.0, 0.8, 1e-4, 1e-4, 1e-4,
            ])),
            v: DMatrix::from_diagonal_element(30, 30, 0.005),
            q_fixed: vec![[3.0, 3.0, 3.0]],
        };
        let cfg = SimConfig {
            params: params.clone(),
            head: head(),
            sensors: sensors.clone(),
            steps: 25,
            seed: 17,
            consts: FieldConstants::default(),
        };
        let traj = simulate(&cfg).unwrap();
        (params, sensors, FieldConstants::default(), traj.measurements)
    }

    #[test]
    fn trivial_config_reduces_to_plain_fit() {
        let (params, sensors, consts, measurements) = case_setup();
        let roi = RoiBox::new([[-5.0, 5.0], [-5.0, 5.0], [0.0, 8.0]]).unwrap();
        let mesh = [5, 5, 4];
        let econfig = EmConfig { max_iters: 6, ..EmConfig::default() };

        let mut dconfig = DynamicConfig::new(roi.clone(), mesh);
        dconfig.mesh_increment = 0;
        dconfig.shrink = false;
        dconfig.max_outer_iters = 6;

        let grid = discretize(&roi, mesh).unwrap();
        let (plain, plain_trace) =
            em::fit(&params, &grid, &measurements, &sensors, &consts, &econfig).unwrap();
        let (dyn_params, dyn_grid, dyn_trace) = dynamic_fit(
            &params,
            &measurements,
            &sensors,
            &consts,
            &head(),
            &dconfig,
            &econfig,
        )
        .unwrap();

        assert_eq!(dyn_grid.mesh, mesh);
        assert_eq!(dyn_params.mu0, plain.mu0);
        assert_eq!(dyn_params.a, plain.a);
        assert_eq!(dyn_params.b, plain.b);
        assert_eq!(dyn_params.sigma, plain.sigma);
        assert_eq!(dyn_params.v, plain.v);
        assert_eq!(dyn_trace.stages.len(), plain_trace.log_likelihood.len());
        for (stage, (ll, q)) in dyn_trace
            .stages
            .iter()
            .zip(plain_trace.log_likelihood.iter().zip(plain_trace.q.iter()))
        {
            assert_eq!(stage.log_likelihood, *ll);
            assert_eq!(stage.q, *q);
        }
    }

    #[test]
    fn mesh_grows_monotonically_and_is_capped() {
        let (params, sensors, consts, measurements) = case_setup();
        let roi = RoiBox::new([[-5.0, 5.0], [-5.0, 5.0], [0.0, 8.0]]).unwrap();
        let mut dconfig = DynamicConfig::new(roi, [4, 4, 4]);
        dconfig.mesh_increment = 2;
        dconfig.mesh_cap = 8;
        dconfig.max_outer_iters = 5;
        let econfig = EmConfig { tol: 0.0, ..EmConfig::default() };
        let (_, final_grid, trace) = dynamic_fit(
            &params,
            &measurements,
            &sensors,
            &consts,
            &head(),
            &dconfig,
            &econfig,
        )
        .unwrap();
        for w in trace.stages.windows(2) {
            for axis in 0..3 {
                assert!(w[1].mesh[axis] >= w[0].mesh[axis]);
                assert!(w[1].mesh[axis] <= 8);
            }
        }
        assert_eq!(final_grid.mesh, [8, 8, 8]);
    }

    #[test]
    fn dynamic_fit_localizes_fixed_point() {
        // The AR dynamics pull the source toward its fixed point; after
        // refinement the ROI should tightly cover the visited region.
        let (params, sensors, consts, measurements) = case_setup();
        let roi = RoiBox::new([[-6.0, 6.0], [-6.0, 6.0], [0.0, 9.0]]).unwrap();
        let mut dconfig = DynamicConfig::new(roi.clone(), [5, 5, 4]);
        dconfig.max_outer_iters = 4;
        let econfig = EmConfig::default();
        let (fitted, final_grid, trace) = dynamic_fit(
            &params,
            &measurements,
            &sensors,
            &consts,
            &head(),
            &dconfig,
            &econfig,
        )
        .unwrap();
        fitted.validate().unwrap();
        assert_eq!(trace.stages.len(), 4);
        // Final ROI strictly smaller than the initial box on every axis.
        for axis in 0..3 {
            assert!(final_grid.roi.width(axis) < roi.width(axis));
        }
        // The AR fixed point of the true dynamics is inside the final ROI.
        let fp = Vector3::new(0.3 / 0.2, -0.2 / 0.3, 0.4 / 0.1);
        assert!(final_grid.roi.contains(&fp));
    }

    #[test]
    fn shrink_after_convergence_mode_runs() {
        let (params, sensors, consts, measurements) = case_setup();
        let roi = RoiBox::new([[-5.0, 5.0], [-5.0, 5.0], [0.0, 8.0]]).unwrap();
        let mut dconfig = DynamicConfig::new(roi, [4, 4, 3]);
        dconfig.max_outer_iters = 2;
        dconfig.shrink_after_convergence = true;
        let econfig = EmConfig { max_iters: 4, ..EmConfig::default() };
        let (fitted, _, trace) = dynamic_fit(
            &params,
            &measurements,
            &sensors,
            &consts,
            &head(),
            &dconfig,
            &econfig,
        )
        .unwrap();
        fitted.validate().unwrap();
        assert_eq!(trace.stages.len(), 2);
    }
}
