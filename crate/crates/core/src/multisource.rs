//! Multi-source inference: the exact joint chain over voxel tuples (viable
//! only for small K^N), and the switch procedure that cycles per-source
//! conditional chains, fixing every other source at its posterior-mean
//! location.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::em::{
    self, e_step, needs_full_scatter, q_emission_part, q_location_part, residual_scatter,
    residual_trace, robust_m_step, EmConfig, EmTrace, EmWorkspace, SufficientStats,
    MONOTONICITY_SLACK,
};
use crate::dynamic::{dynamic_fit, DynamicConfig};
use crate::forward::{sensor_field, DipoleState, FieldConstants};
use crate::geometry::{discretize, HeadModel, SensorArray, VoxelGrid};
use crate::hmm::{
    self, build_initial_with_norm, build_transition_with_norm, DiscreteModel,
};
use crate::statespace::ModelParams;
use crate::{Error, Result};

/// Flattened product state space over per-source voxel grids. The flat
/// index runs source 0 fastest: flat = k_0 + K_0 (k_1 + K_1 (...)).
#[derive(Debug, Clone)]
pub struct JointGrid {
    pub grids: Vec<VoxelGrid>,
}

impl JointGrid {
    pub fn new(grids: Vec<VoxelGrid>) -> Result<Self> {
        if grids.is_empty() {
            return Err(Error::Config("joint grid needs at least one source".into()));
        }
        Ok(Self { grids })
    }

    pub fn n_sources(&self) -> usize {
        self.grids.len()
    }

    pub fn len(&self) -> usize {
        self.grids.iter().map(|g| g.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Per-source voxel indices of a flat state.
    pub fn indices(&self, flat: usize) -> Vec<usize> {
        let mut rest = flat;
        self.grids
            .iter()
            .map(|g| {
                let k = rest % g.len();
                rest /= g.len();
                k
            })
            .collect()
    }

    /// Flat state of per-source voxel indices.
    pub fn flatten(&self, indices: &[usize]) -> usize {
        debug_assert_eq!(indices.len(), self.grids.len());
        let mut flat = 0;
        for (g, &k) in self.grids.iter().zip(indices).rev() {
            flat = flat * g.len() + k;
        }
        flat
    }

    /// Location of source `n` in flat state `flat`.
    pub fn center(&self, flat: usize, n: usize) -> Vector3<f64> {
        self.grids[n].center(self.indices(flat)[n])
    }

    /// K^N x 3 matrix of source-`n` locations per flat state.
    pub fn centers_matrix(&self, n: usize) -> DMatrix<f64> {
        let kj = self.len();
        let mut m = DMatrix::zeros(kj, 3);
        for flat in 0..kj {
            let c = self.center(flat, n);
            for j in 0..3 {
                m[(flat, j)] = c[j];
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JointConfig {
    pub em: EmConfig,
    /// Largest flat state space the exact joint chain will accept.
    pub state_cap: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self { em: EmConfig::default(), state_cap: 4096 }
    }
}

/// Predicted sensor vector per flat state: sum of per-source dipole fields
/// at the center tuple.
fn joint_predicted(
    params: &ModelParams,
    joint: &JointGrid,
    sensors: &SensorArray,
    consts: &FieldConstants,
) -> Result<Vec<DVector<f64>>> {
    let per_source: Vec<Vec<DVector<f64>>> = (0..joint.n_sources())
        .map(|n| hmm::predicted_fields(&joint.grids[n], sensors, params.q_fixed[n], consts))
        .collect::<Result<_>>()?;
    let mut predicted = Vec::with_capacity(joint.len());
    for flat in 0..joint.len() {
        let idx = joint.indices(flat);
        let mut field = per_source[0][idx[0]].clone();
        for n in 1..joint.n_sources() {
            field += &per_source[n][idx[n]];
        }
        predicted.push(field);
    }
    Ok(predicted)
}

/// Builds the exact joint chain: initial and transition are products of the
/// per-source factors (sources evolve independently), normalizers add.
pub fn build_joint_model(
    params: &ModelParams,
    joint: &JointGrid,
    ws: &EmWorkspace,
) -> Result<DiscreteModel> {
    let n = joint.n_sources();
    let kj = joint.len();
    let mut initials = Vec::with_capacity(n);
    let mut transitions = Vec::with_capacity(n);
    for s in 0..n {
        initials.push(build_initial_with_norm(params, &joint.grids[s], s)?);
        transitions.push(build_transition_with_norm(params, &joint.grids[s], s)?);
    }

    let mut initial = DVector::zeros(kj);
    let mut log_initial_norm = 0.0;
    for (init_s, norm_s) in &initials {
        let _ = init_s;
        log_initial_norm += norm_s;
    }
    for flat in 0..kj {
        let idx = joint.indices(flat);
        let mut p = initials[0].0[idx[0]];
        for s in 1..n {
            p *= initials[s].0[idx[s]];
        }
        initial[flat] = p;
    }

    let mut transition = DMatrix::zeros(kj, kj);
    let mut log_transition_norm = DVector::zeros(kj);
    for fl in 0..kj {
        let li = joint.indices(fl);
        let mut norm = 0.0;
        for s in 0..n {
            norm += transitions[s].1[li[s]];
        }
        log_transition_norm[fl] = norm;
        for fk in 0..kj {
            let ki = joint.indices(fk);
            let mut p = transitions[0].0[(li[0], ki[0])];
            for s in 1..n {
                p *= transitions[s].0[(li[s], ki[s])];
            }
            transition[(fl, fk)] = p;
        }
    }

    let log_emission = ws.log_emission(&params.v)?;
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

fn stats_from_parts(
    loc: em::LocationMoments,
    n_steps: usize,
    n_sensors: usize,
    resid_trace: f64,
    resid_scatter: Option<DMatrix<f64>>,
    log_likelihood: f64,
) -> SufficientStats {
    SufficientStats {
        n_steps,
        n_sensors,
        m1: loc.m1,
        m1_outer: loc.m1_outer,
        s_x: loc.s_x,
        s_y: loc.s_y,
        c_xx: loc.c_xx,
        c_xy: loc.c_xy,
        c_yy: loc.c_yy,
        resid_trace,
        resid_scatter,
        log_likelihood,
    }
}

/// EM on the exact joint chain. The M-step decomposes by source because the
/// transition and initial densities factorize; V is shared and updated once
/// from the joint residuals. Returns the fitted parameters, the final
/// smoothed joint posterior (T x K^N), and the trace.
pub fn joint_fit(
    params0: &ModelParams,
    joint: &JointGrid,
    measurements: &DMatrix<f64>,
    sensors: &SensorArray,
    consts: &FieldConstants,
    config: &JointConfig,
) -> Result<(ModelParams, DMatrix<f64>, EmTrace)> {
    params0.validate()?;
    let n = joint.n_sources();
    if params0.n_sources() != n {
        return Err(Error::Dimension(format!(
            "parameters describe {} sources, joint grid has {n}",
            params0.n_sources()
        )));
    }
    let kj = joint.len();
    if kj > config.state_cap {
        return Err(Error::JointStateCap { size: kj, cap: config.state_cap });
    }

    let predicted = joint_predicted(params0, joint, sensors, consts)?;
    let ws = EmWorkspace::from_parts(predicted, joint.centers_matrix(0), measurements)?;
    let centers: Vec<DMatrix<f64>> = (0..n).map(|s| joint.centers_matrix(s)).collect();
    let need_scatter = needs_full_scatter(params0, &config.em)?;
    let n_steps = measurements.nrows();
    let n_sensors = measurements.ncols();

    let mut params = params0.clone();
    let mut trace = EmTrace::default();
    for _ in 0..config.em.max_iters {
        let model = build_joint_model(&params, joint, &ws)?;
        let smoothing = hmm::smooth(&model)?;
        let ll = smoothing.log_likelihood;
        if let Some(&prev) = trace.log_likelihood.last() {
            if ll < prev - MONOTONICITY_SLACK * prev.abs().max(1.0) {
                return Err(Error::Params(format!(
                    "log-likelihood decreased from {prev} to {ll}"
                )));
            }
        }
        trace.log_likelihood.push(ll);

        let rt = residual_trace(&smoothing.xi, &ws.resid_sq);
        let scatter = need_scatter.then(|| residual_scatter(&smoothing.xi, &ws));
        let stats: Vec<SufficientStats> = (0..n)
            .map(|s| {
                em::location_moments(&model, &smoothing, &centers[s]).map(|loc| {
                    stats_from_parts(loc, n_steps, n_sensors, rt, scatter.clone(), ll)
                })
            })
            .collect::<Result<_>>()?;

        let q_of = |p: &ModelParams, stats: &[SufficientStats]| -> Result<f64> {
            let mut q_loc = 0.0;
            for s in 0..n {
                q_loc += q_location_part(&p.source_params(s), &stats[s])?;
            }
            Ok(q_loc + q_emission_part(p, &stats[0])?)
        };

        let q_before = q_of(&params, &stats)?;
        for s in 0..n {
            let mut cfg = config.em;
            cfg.update.v = cfg.update.v && s == 0;
            let sub = robust_m_step(
                &stats[s],
                &params.source_params(s),
                &cfg,
                &mut trace.a_update_skips,
            )?;
            params.set_source_params(s, &sub);
        }
        let q_after = q_of(&params, &stats)?;
        if q_after < q_before - MONOTONICITY_SLACK * q_before.abs().max(1.0) {
            return Err(Error::Params(format!(
                "M-step decreased Q from {q_before} to {q_after}"
            )));
        }
        trace.q.push(q_after);
        if (q_after - q_before).abs() <= config.em.tol * q_before.abs().max(1.0) {
            trace.converged = true;
            break;
        }
    }

    let model = build_joint_model(&params, joint, &ws)?;
    let smoothing = hmm::smooth(&model)?;
    Ok((params, smoothing.xi, trace))
}

/// Sums a joint posterior over every source except `n`.
pub fn marginalize(xi_joint: &DMatrix<f64>, joint: &JointGrid, n: usize) -> Result<DMatrix<f64>> {
    if n >= joint.n_sources() {
        return Err(Error::Dimension(format!("source index {n} out of range")));
    }
    if xi_joint.ncols() != joint.len() {
        return Err(Error::Dimension("posterior does not match the joint grid".into()));
    }
    let kn = joint.grids[n].len();
    let mut marginal = DMatrix::zeros(xi_joint.nrows(), kn);
    for flat in 0..joint.len() {
        let k = joint.indices(flat)[n];
        for t in 0..xi_joint.nrows() {
            marginal[(t, k)] += xi_joint[(t, flat)];
        }
    }
    Ok(marginal)
}

#[derive(Debug, Clone, Copy)]
pub struct SwitchConfig {
    /// Full passes over the source list.
    pub sweeps: usize,
    pub em: EmConfig,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Self { sweeps: 4, em: EmConfig::default() }
    }
}

/// Per-source posteriors and the conditioning locations of the switch
/// procedure.
#[derive(Debug, Clone)]
pub struct SwitchState {
    /// T x K_n marginal posterior per source.
    pub zeta: Vec<DMatrix<f64>>,
    /// Posterior-mean location per source and time step; what the other
    /// sources' emissions condition on.
    pub cond_locations: Vec<Vec<Vector3<f64>>>,
    /// Final per-source observed log-likelihoods of the last sweep.
    pub log_likelihoods: Vec<f64>,
}

/// Measurements with every source except `keep` explained away at its
/// current conditioning locations.
fn conditioned_residual(
    measurements: &DMatrix<f64>,
    params: &ModelParams,
    cond: &[Vec<Vector3<f64>>],
    keep: usize,
    sensors: &SensorArray,
    consts: &FieldConstants,
) -> Result<DMatrix<f64>> {
    let mut resid = measurements.clone();
    for other in 0..params.n_sources() {
        if other == keep {
            continue;
        }
        for t in 0..measurements.nrows() {
            let loc = cond[other][t];
            let state = DipoleState::new([loc[0], loc[1], loc[2]], params.q_fixed[other]);
            let field = sensor_field(&state, sensors, consts)?;
            for l in 0..measurements.ncols() {
                resid[(t, l)] -= field[l];
            }
        }
    }
    Ok(resid)
}

fn posterior_mean_locations(zeta: &DMatrix<f64>, grid: &VoxelGrid) -> Vec<Vector3<f64>> {
    (0..zeta.nrows())
        .map(|t| {
            let mut mean = Vector3::zeros();
            for k in 0..grid.len() {
                mean += zeta[(t, k)] * grid.center(k);
            }
            mean
        })
        .collect()
}

/// The switch procedure: cycles sources in ascending order; source n's
/// chain sees the measurements minus the predicted fields of all other
/// sources at their current posterior-mean locations. Sources before n in
/// the cycle contribute this sweep's locations, sources after n the
/// previous sweep's, matching the update order of the reference procedure.
pub fn switch_fit(
    params0: &ModelParams,
    grids: &[VoxelGrid],
    measurements: &DMatrix<f64>,
    sensors: &SensorArray,
    consts: &FieldConstants,
    config: &SwitchConfig,
) -> Result<(ModelParams, SwitchState)> {
    params0.validate()?;
    let n = params0.n_sources();
    if grids.len() != n {
        return Err(Error::Dimension(format!(
            "parameters describe {n} sources but {} grids were given",
            grids.len()
        )));
    }
    if config.sweeps == 0 {
        return Err(Error::Config("switch procedure needs at least one sweep".into()));
    }
    let n_steps = measurements.nrows();

    // Initial conditioning: the discretized prior of each source, constant
    // over time (no posterior information exists yet).
    let mut zeta: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut cond: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(n);
    for s in 0..n {
        let (prior, _) = build_initial_with_norm(params0, &grids[s], s)?;
        let mut z = DMatrix::zeros(n_steps, grids[s].len());
        for t in 0..n_steps {
            z.row_mut(t).copy_from(&prior.transpose());
        }
        let locs = posterior_mean_locations(&z, &grids[s]);
        zeta.push(z);
        cond.push(locs);
    }

    let mut params = params0.clone();
    let mut log_likelihoods = vec![f64::NEG_INFINITY; n];
    for _sweep in 0..config.sweeps {
        for s in 0..n {
            let resid = conditioned_residual(measurements, &params, &cond, s, sensors, consts)?;
            let sub = params.source_params(s);
            let (fitted, _) = em::fit(&sub, &grids[s], &resid, sensors, consts, &config.em)?;

            let ws =
                EmWorkspace::new(&grids[s], sensors, fitted.q_fixed[0], consts, &resid)?;
            let model = em::build_model_from_workspace(&fitted, &grids[s], &ws)?;
            let es = e_step(&model, &ws, false)?;
            zeta[s] = es.smoothing.xi.clone();
            cond[s] = posterior_mean_locations(&zeta[s], &grids[s]);
            log_likelihoods[s] = es.stats.log_likelihood;
            params.set_source_params(s, &fitted);
        }
    }

    Ok((params, SwitchState { zeta, cond_locations: cond, log_likelihoods }))
}

/// Switch procedure with dynamic ROI refinement per source: the first sweep
/// runs the full dynamic fit for each source (shrinking ROI, growing mesh);
/// later sweeps re-estimate on each source's refined grid with updated
/// conditioning, which keeps the cost of extra sweeps low. Returns the
/// refined per-source grids alongside the fit.
pub fn switch_fit_dynamic(
    params0: &ModelParams,
    measurements: &DMatrix<f64>,
    sensors: &SensorArray,
    consts: &FieldConstants,
    head: &HeadModel,
    dconfigs: &[DynamicConfig],
    config: &SwitchConfig,
) -> Result<(ModelParams, SwitchState, Vec<VoxelGrid>)> {
    params0.validate()?;
    let n = params0.n_sources();
    if dconfigs.len() != n {
        return Err(Error::Dimension(format!(
            "parameters describe {n} sources but {} dynamic configs were given",
            dconfigs.len()
        )));
    }
    if config.sweeps == 0 {
        return Err(Error::Config("switch procedure needs at least one sweep".into()));
    }
    let n_steps = measurements.nrows();

    let mut grids: Vec<VoxelGrid> = dconfigs
        .iter()
        .map(|d| discretize(&d.initial_roi, d.initial_mesh))
        .collect::<Result<_>>()?;
    let mut zeta: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut cond: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(n);
    for s in 0..n {
        let (prior, _) = build_initial_with_norm(params0, &grids[s], s)?;
        let mut z = DMatrix::zeros(n_steps, grids[s].len());
        for t in 0..n_steps {
            z.row_mut(t).copy_from(&prior.transpose());
        }
        let locs = posterior_mean_locations(&z, &grids[s]);
        zeta.push(z);
        cond.push(locs);
    }

    let mut params = params0.clone();
    let mut log_likelihoods = vec![f64::NEG_INFINITY; n];
    for sweep in 0..config.sweeps {
        for s in 0..n {
            let resid = conditioned_residual(measurements, &params, &cond, s, sensors, consts)?;
            let sub = params.source_params(s);
            let fitted = if sweep == 0 {
                let (fitted, grid, _) = dynamic_fit(
                    &sub, &resid, sensors, consts, head, &dconfigs[s], &config.em,
                )?;
                grids[s] = grid;
                fitted
            } else {
                let (fitted, _) =
                    em::fit(&sub, &grids[s], &resid, sensors, consts, &config.em)?;
                fitted
            };

            let ws =
                EmWorkspace::new(&grids[s], sensors, fitted.q_fixed[0], consts, &resid)?;
            let model = em::build_model_from_workspace(&fitted, &grids[s], &ws)?;
            let es = e_step(&model, &ws, false)?;
            zeta[s] = es.smoothing.xi.clone();
            cond[s] = posterior_mean_locations(&zeta[s], &grids[s]);
            log_likelihoods[s] = es.stats.log_likelihood;
            params.set_source_params(s, &fitted);
        }
    }

    Ok((params, SwitchState { zeta, cond_locations: cond, log_likelihoods }, grids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{discretize, place_sensors, HeadModel, RoiBox};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head() -> HeadModel {
        HeadModel::new([0.0; 3], 10.0).unwrap()
    }

    fn grid(lo: [f64; 3], hi: [f64; 3], mesh: [usize; 3]) -> VoxelGrid {
        let roi = RoiBox::new([[lo[0], hi[0]], [lo[1], hi[1]], [lo[2], hi[2]]]).unwrap();
        discretize(&roi, mesh).unwrap()
    }

    fn two_source_params(n_sensors: usize) -> ModelParams {
        let mut mu0 = DVector::zeros(12);
        let mut sigma0 = DMatrix::zeros(12, 12);
        let mut a = DMatrix::zeros(12, 12);
        let mut b = DVector::zeros(12);
        let mut sigma = DMatrix::zeros(12, 12);
        let starts = [[2.0, 2.0, 4.0], [-2.0, -2.0, 4.0]];
        for s in 0..2 {
            let o = 6 * s;
            for i in 0..3 {
                mu0[o + i] = starts[s][i];
                mu0[o + i + 3] = 3.0;
                sigma0[(o + i, o + i)] = 0.5;
                sigma0[(o + i + 3, o + i + 3)] = 1e-4;
                a[(o + i, o + i)] = 0.8;
                a[(o + i + 3, o + i + 3)] = 1.0;
                b[o + i] = 0.2 * starts[s][i];
                sigma[(o + i, o + i)] = 0.8;
                sigma[(o + i + 3, o + i + 3)] = 1e-4;
            }
        }
        ModelParams {
            mu0,
            sigma0,
            a,
            b,
            sigma,
            v: DMatrix::from_diagonal_element(n_sensors, n_sensors, 0.01),
            q_fixed: vec![[3.0, 3.0, 3.0], [3.0, 3.0, 3.0]],
        }
    }

    #[test]
    fn joint_index_mapping_is_bijective() {
        let joint = JointGrid::new(vec![
            grid([-2.0, -2.0, 0.0], [2.0, 2.0, 4.0], [2, 3, 1]),
            grid([-1.0, -1.0, 1.0], [1.0, 1.0, 3.0], [2, 2, 2]),
        ])
        .unwrap();
        assert_eq!(joint.len(), 48);
        for flat in 0..joint.len() {
            let idx = joint.indices(flat);
            assert_eq!(joint.flatten(&idx), flat);
        }
    }

    #[test]
    fn joint_transition_is_kronecker_product() {
        let params = two_source_params(10);
        let g1 = grid([-3.0, -3.0, 2.0], [3.0, 3.0, 6.0], [2, 2, 1]);
        let g2 = grid([-4.0, -4.0, 1.0], [0.0, 0.0, 5.0], [2, 1, 2]);
        let (t1, _) = build_transition_with_norm(&params, &g1, 0).unwrap();
        let (t2, _) = build_transition_with_norm(&params, &g2, 1).unwrap();
        let joint = JointGrid::new(vec![g1.clone(), g2.clone()]).unwrap();

        let sensors = place_sensors(&head(), 10, 5, 0.5).unwrap();
        let consts = FieldConstants::default();
        let measurements = DMatrix::zeros(2, 10);
        let predicted = joint_predicted(&params, &joint, &sensors, &consts).unwrap();
        let ws =
            EmWorkspace::from_parts(predicted, joint.centers_matrix(0), &measurements).unwrap();
        let model = build_joint_model(&params, &joint, &ws).unwrap();

        for fl in 0..joint.len() {
            let li = joint.indices(fl);
            for fk in 0..joint.len() {
                let ki = joint.indices(fk);
                let expected = t1[(li[0], ki[0])] * t2[(li[1], ki[1])];
                assert_relative_eq!(model.transition[(fl, fk)], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn state_cap_is_enforced() {
        let params = two_source_params(8);
        let joint = JointGrid::new(vec![
            grid([-3.0, -3.0, 0.0], [3.0, 3.0, 6.0], [3, 3, 3]),
            grid([-3.0, -3.0, 0.0], [3.0, 3.0, 6.0], [3, 3, 3]),
        ])
        .unwrap();
        let sensors = place_sensors(&head(), 8, 5, 0.5).unwrap();
        let measurements = DMatrix::zeros(2, 8);
        let config = JointConfig { state_cap: 100, ..JointConfig::default() };
        let out = joint_fit(
            &params,
            &joint,
            &measurements,
            &sensors,
            &FieldConstants::default(),
            &config,
        );
        assert!(matches!(out, Err(Error::JointStateCap { size: 729, cap: 100 })));
    }

    #[test]
    fn marginalize_random_joint_matches_hand_sum() {
        let joint = JointGrid::new(vec![
            grid([-3.0, -3.0, 0.0], [3.0, 3.0, 6.0], [3, 1, 1]),
            grid([-3.0, -3.0, 0.0], [3.0, 3.0, 6.0], [1, 3, 1]),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut xi = DMatrix::from_fn(4, 9, |_, _| rng.gen::<f64>());
        for t in 0..4 {
            let s: f64 = xi.row(t).sum();
            for k in 0..9 {
                xi[(t, k)] /= s;
            }
        }
        let m0 = marginalize(&xi, &joint, 0).unwrap();
        let m1 = marginalize(&xi, &joint, 1).unwrap();
        for t in 0..4 {
            assert_relative_eq!(m0.row(t).sum(), 1.0, epsilon = 1e-12);
            for k in 0..3 {
                // Source 0 is the fast index.
                let hand: f64 = (0..3).map(|j| xi[(t, k + 3 * j)]).sum();
                assert_relative_eq!(m0[(t, k)], hand, epsilon = 1e-14);
                let hand: f64 = (0..3).map(|j| xi[(t, j + 3 * k)]).sum();
                assert_relative_eq!(m1[(t, k)], hand, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn marginalize_product_form_recovers_factors() {
        let joint = JointGrid::new(vec![
            grid([-3.0, -3.0, 0.0], [3.0, 3.0, 6.0], [2, 1, 1]),
            grid([-3.0, -3.0, 0.0], [3.0, 3.0, 6.0], [1, 3, 1]),
        ])
        .unwrap();
        let f0 = [0.3, 0.7];
        let f1 = [0.2, 0.5, 0.3];
        let mut xi = DMatrix::zeros(1, 6);
        for flat in 0..6 {
            let idx = joint.indices(flat);
            xi[(0, flat)] = f0[idx[0]] * f1[idx[1]];
        }
        let m0 = marginalize(&xi, &joint, 0).unwrap();
        let m1 = marginalize(&xi, &joint, 1).unwrap();
        for k in 0..2 {
            assert_relative_eq!(m0[(0, k)], f0[k], epsilon = 1e-14);
        }
        for k in 0..3 {
            assert_relative_eq!(m1[(0, k)], f1[k], epsilon = 1e-14);
        }
    }

    /// Single-source params and a matching joint wrapper must give the
    /// identical fit: same builders, same update path.
    #[test]
    fn joint_n1_reduces_to_single_source_fit() {
        let sensors = place_sensors(&head(), 20, 3, 0.5).unwrap();
        let consts = FieldConstants::default();
        let g = grid([-4.0, -4.0, 1.0], [4.0, 4.0, 7.0], [4, 4, 3]);
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
            v: DMatrix::from_diagonal_element(20, 20, 0.01),
            q_fixed: vec![[3.0, 3.0, 3.0]],
        };
        let sim = crate::statespace::SimConfig {
            params: params.clone(),
            head: head(),
            sensors: sensors.clone(),
            steps: 10,
            seed: 4,
            consts,
        };
        let measurements = crate::statespace::simulate(&sim).unwrap().measurements;

        let config = JointConfig {
            em: EmConfig { max_iters: 5, ..EmConfig::default() },
            ..JointConfig::default()
        };
        let joint = JointGrid::new(vec![g.clone()]).unwrap();
        let (joint_params, _, joint_trace) =
            joint_fit(&params, &joint, &measurements, &sensors, &consts, &config).unwrap();
        let (single_params, single_trace) =
            em::fit(&params, &g, &measurements, &sensors, &consts, &config.em).unwrap();

        assert_eq!(joint_params.mu0, single_params.mu0);
        assert_eq!(joint_params.sigma0, single_params.sigma0);
        assert_eq!(joint_params.a, single_params.a);
        assert_eq!(joint_params.b, single_params.b);
        assert_eq!(joint_params.sigma, single_params.sigma);
        assert_eq!(joint_params.v, single_params.v);
        assert_eq!(joint_trace.log_likelihood, single_trace.log_likelihood);
        assert_eq!(joint_trace.q, single_trace.q);
    }

    fn two_source_setup() -> (ModelParams, SensorArray, DMatrix<f64>, Vec<VoxelGrid>) {
        let sensors = place_sensors(&head(), 24, 11, 0.5).unwrap();
        let params = two_source_params(24);
        let sim = crate::statespace::SimConfig {
            params: params.clone(),
            head: head(),
            sensors: sensors.clone(),
            steps: 8,
            seed: 21,
            consts: FieldConstants::default(),
        };
        let measurements = crate::statespace::simulate(&sim).unwrap().measurements;
        let grids = vec![
            grid([0.0, 0.0, 2.0], [4.0, 4.0, 6.0], [3, 3, 2]),
            grid([-4.0, -4.0, 2.0], [0.0, 0.0, 6.0], [3, 3, 2]),
        ];
        (params, sensors, measurements, grids)
    }

    #[test]
    fn switch_zeta_rows_normalized() {
        let (params, sensors, measurements, grids) = two_source_setup();
        let config = SwitchConfig {
            sweeps: 2,
            em: EmConfig { max_iters: 3, ..EmConfig::default() },
        };
        let (fitted, state) = switch_fit(
            &params,
            &grids,
            &measurements,
            &sensors,
            &FieldConstants::default(),
            &config,
        )
        .unwrap();
        fitted.validate().unwrap();
        assert_eq!(state.zeta.len(), 2);
        for z in &state.zeta {
            for t in 0..z.nrows() {
                assert_relative_eq!(z.row(t).sum(), 1.0, epsilon = 1e-8);
            }
        }
        for lls in &state.log_likelihoods {
            assert!(lls.is_finite());
        }
    }

    #[test]
    fn switch_dynamic_refines_grids() {
        let (params, sensors, measurements, grids) = two_source_setup();
        let dconfigs: Vec<DynamicConfig> = grids
            .iter()
            .map(|g| {
                let mut d = DynamicConfig::new(g.roi, [2, 2, 2]);
                d.max_outer_iters = 3;
                d.mesh_cap = 4;
                d
            })
            .collect();
        let config = SwitchConfig {
            sweeps: 2,
            em: EmConfig { max_iters: 3, ..EmConfig::default() },
        };
        let (fitted, state, refined) = switch_fit_dynamic(
            &params,
            &measurements,
            &sensors,
            &FieldConstants::default(),
            &head(),
            &dconfigs,
            &config,
        )
        .unwrap();
        fitted.validate().unwrap();
        assert_eq!(refined.len(), 2);
        let bounds = head().bounding_box();
        for s in 0..2 {
            // Refined ROI stays inside the head bounding box (the shrink may
            // move outside the starting ROI if the posterior mass sits near
            // its edge).
            for i in 0..3 {
                assert!(refined[s].roi.intervals[i][0] >= bounds.intervals[i][0] - 1e-12);
                assert!(refined[s].roi.intervals[i][1] <= bounds.intervals[i][1] + 1e-12);
            }
            assert_eq!(state.zeta[s].ncols(), refined[s].len());
            for t in 0..state.zeta[s].nrows() {
                assert_relative_eq!(state.zeta[s].row(t).sum(), 1.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn switch_close_to_joint_on_small_instance() {
        // Well-separated sources with tight dynamics: both procedures must
        // concentrate on the same voxels.
        let sensors = place_sensors(&head(), 24, 11, 0.5).unwrap();
        let mut params = two_source_params(24);
        for i in 0..12 {
            params.sigma0[(i, i)] = params.sigma0[(i, i)].min(0.05);
            params.sigma[(i, i)] = params.sigma[(i, i)].min(0.1);
        }
        let sim = crate::statespace::SimConfig {
            params: params.clone(),
            head: head(),
            sensors: sensors.clone(),
            steps: 5,
            seed: 13,
            consts: FieldConstants::default(),
        };
        let measurements = crate::statespace::simulate(&sim).unwrap().measurements;
        let grids = vec![
            grid([1.0, 1.0, 3.0], [3.0, 3.0, 5.0], [2, 2, 1]),
            grid([-3.0, -3.0, 3.0], [-1.0, -1.0, 5.0], [2, 2, 1]),
        ];
        let consts = FieldConstants::default();
        let em = EmConfig { max_iters: 4, ..EmConfig::default() };

        let joint = JointGrid::new(grids.clone()).unwrap();
        let (_, xi_joint, _) = joint_fit(
            &params,
            &joint,
            &measurements,
            &sensors,
            &consts,
            &JointConfig { em, ..JointConfig::default() },
        )
        .unwrap();
        let (_, state) = switch_fit(
            &params,
            &grids,
            &measurements,
            &sensors,
            &consts,
            &SwitchConfig { sweeps: 3, em },
        )
        .unwrap();

        let mut gap = 0.0f64;
        for s in 0..2 {
            let marginal = marginalize(&xi_joint, &joint, s).unwrap();
            for t in 0..marginal.nrows() {
                for k in 0..marginal.ncols() {
                    gap = gap.max((marginal[(t, k)] - state.zeta[s][(t, k)]).abs());
                }
            }
        }
        // Loose engineering bound; the acceptance suite pins the tighter one.
        assert!(gap < 0.5, "switch-vs-joint marginal gap {gap}");
    }
}
