//! Shared test helpers: an exhaustive path-enumeration oracle for the
//! hidden-chain posteriors, and random instance generators.
//!
//! The oracle evaluates the unnormalized joint density of every one of the
//! K^T state paths directly from Gaussian density values, so it shares no
//! recursion with the forward-backward implementation under test.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use dipole_grid::geometry::{discretize, RoiBox, VoxelGrid};
use dipole_grid::statespace::ModelParams;

/// Log-density of a 3-D Gaussian, from the explicit quadratic form.
pub fn log_gauss3(x: &Vector3<f64>, mean: &Vector3<f64>, cov: &Matrix3<f64>) -> f64 {
    let inv = cov.try_inverse().expect("oracle covariance must be invertible");
    let det = cov.determinant();
    let d = x - mean;
    -0.5 * (d.dot(&(inv * d)) + det.ln() + 3.0 * (2.0 * std::f64::consts::PI).ln())
}

/// Log-density of an L-dim Gaussian with diagonal covariance.
pub fn log_gauss_diag(x: &DVector<f64>, mean: &DVector<f64>, variances: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        let d = x[i] - mean[i];
        acc += -0.5 * (d * d / variances[i] + variances[i].ln() + (2.0 * std::f64::consts::PI).ln());
    }
    acc
}

pub struct OracleResult {
    /// T x K smoothed posterior.
    pub xi: DMatrix<f64>,
    /// Pairwise posteriors, one K x K matrix per transition t-1 -> t.
    pub etas: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

/// Exhaustive enumeration over all K^T paths of the chain with the given
/// per-state log densities: `initial[k]`, `transition[(l, k)]` for l -> k,
/// and `emission[(t, k)]`.
pub fn enumerate_paths(
    initial: &[f64],
    transition: &DMatrix<f64>,
    emission: &DMatrix<f64>,
) -> OracleResult {
    let t_len = emission.nrows();
    let k = emission.ncols();
    let n_paths = k.pow(t_len as u32);

    // Log-weight of each path, then a global shift for stable exponentials.
    let mut path_states = vec![vec![0usize; t_len]; n_paths];
    let mut log_w = vec![0.0f64; n_paths];
    for p in 0..n_paths {
        let mut rest = p;
        for t in 0..t_len {
            path_states[p][t] = rest % k;
            rest /= k;
        }
        let s = &path_states[p];
        let mut lw = initial[s[0]] + emission[(0, s[0])];
        for t in 1..t_len {
            lw += transition[(s[t - 1], s[t])] + emission[(t, s[t])];
        }
        log_w[p] = lw;
    }
    let shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_w.iter().map(|lw| (lw - shift).exp()).collect();
    let total: f64 = weights.iter().sum();

    let mut xi = DMatrix::zeros(t_len, k);
    let mut etas = vec![DMatrix::zeros(k, k); t_len.saturating_sub(1)];
    for (p, w) in weights.iter().enumerate() {
        let s = &path_states[p];
        for t in 0..t_len {
            xi[(t, s[t])] += w / total;
        }
        for t in 1..t_len {
            etas[t - 1][(s[t - 1], s[t])] += w / total;
        }
    }
    OracleResult { xi, etas, log_likelihood: shift + total.ln() }
}

/// The chain's log densities for one source on a grid: Gaussian location
/// prior, AR(1) location transition, and Gaussian emission around the
/// predicted fields.
pub struct ChainDensities {
    pub initial: Vec<f64>,
    pub transition: DMatrix<f64>,
    pub emission: DMatrix<f64>,
}

pub fn chain_densities(
    params: &ModelParams,
    source: usize,
    centers: &[Vector3<f64>],
    predicted: &[DVector<f64>],
    measurements: &DMatrix<f64>,
) -> ChainDensities {
    let k = centers.len();
    let mu0 = params.location_mu0(source);
    let sigma0 = params.location_sigma0(source);
    let a = params.location_a(source);
    let b = params.location_b(source);
    let sigma = params.location_sigma(source);
    let v_diag = params.v.diagonal();

    let initial: Vec<f64> = centers.iter().map(|c| log_gauss3(c, &mu0, &sigma0)).collect();
    let mut transition = DMatrix::zeros(k, k);
    for l in 0..k {
        let mean = a * centers[l] + b;
        for j in 0..k {
            transition[(l, j)] = log_gauss3(&centers[j], &mean, &sigma);
        }
    }
    let t_len = measurements.nrows();
    let mut emission = DMatrix::zeros(t_len, k);
    for t in 0..t_len {
        let y = measurements.row(t).transpose();
        for j in 0..k {
            emission[(t, j)] = log_gauss_diag(&y, &predicted[j], &v_diag);
        }
    }
    ChainDensities { initial, transition, emission }
}

/// Random diagonal single-source parameters on sensible scales.
pub fn random_single_source_params(rng: &mut ChaCha8Rng, n_sensors: usize) -> ModelParams {
    let mut mu0 = DVector::zeros(6);
    let mut sigma0 = DMatrix::zeros(6, 6);
    let mut a = DMatrix::zeros(6, 6);
    let mut b = DVector::zeros(6);
    let mut sigma = DMatrix::zeros(6, 6);
    for i in 0..3 {
        mu0[i] = rng.gen_range(-2.0..2.0);
        mu0[i + 3] = 3.0;
        sigma0[(i, i)] = rng.gen_range(0.2..2.0);
        sigma0[(i + 3, i + 3)] = 1e-4;
        a[(i, i)] = rng.gen_range(0.4..0.95);
        a[(i + 3, i + 3)] = 1.0;
        b[i] = rng.gen_range(-0.5..0.5);
        sigma[(i, i)] = rng.gen_range(0.2..2.0);
        sigma[(i + 3, i + 3)] = 1e-4;
    }
    let v = DMatrix::from_diagonal_element(n_sensors, n_sensors, rng.gen_range(0.005..0.05));
    ModelParams { mu0, sigma0, a, b, sigma, v, q_fixed: vec![[3.0, 3.0, 3.0]] }
}

/// Random small grid inside the upper half-space.
pub fn random_grid(rng: &mut ChaCha8Rng, max_voxels: usize) -> VoxelGrid {
    loop {
        let cx = rng.gen_range(-3.0..3.0);
        let cy = rng.gen_range(-3.0..3.0);
        let cz = rng.gen_range(2.0..6.0);
        let w = rng.gen_range(1.0..4.0);
        let roi = RoiBox::new([
            [cx - w, cx + w],
            [cy - w, cy + w],
            [cz - w, cz + w],
        ])
        .unwrap();
        let mesh = [
            rng.gen_range(1..=3usize),
            rng.gen_range(1..=3usize),
            rng.gen_range(1..=2usize),
        ];
        if mesh[0] * mesh[1] * mesh[2] <= max_voxels {
            return discretize(&roi, mesh).unwrap();
        }
    }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

/// Max elementwise error of `a` against `b`, relative to the scale of `b`
/// (absolute where `b` is tiny).
pub fn max_rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let denom = b[(i, j)].abs().max(1e-300);
            let err = (a[(i, j)] - b[(i, j)]).abs() / denom.max(1e-12);
            worst = worst.max(err);
        }
    }
    worst
}
