//! Dipole forward models: predicted sensor vectors from a source state.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{Modality, SensorArray};
use crate::{Error, Result};

/// One source: location `p` (cm) and moment `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipoleState {
    pub location: [f64; 3],
    pub moment: [f64; 3],
}

impl DipoleState {
    pub fn new(location: [f64; 3], moment: [f64; 3]) -> Self {
        Self { location, moment }
    }

    pub fn location_vec(&self) -> Vector3<f64> {
        Vector3::from(self.location)
    }

    pub fn moment_vec(&self) -> Vector3<f64> {
        Vector3::from(self.moment)
    }
}

/// Field prefactor and fixed vertical unit vector. `kappa` is the mu0/(4*pi)
/// prefactor; the default of 1 keeps the normalized units used throughout the
/// simulations, while the SI value 1e-7 remains configurable.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FieldConstants {
    pub kappa: f64,
}

impl Default for FieldConstants {
    fn default() -> Self {
        Self { kappa: 1.0 }
    }
}

impl FieldConstants {
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(Error::Params(format!("kappa must be > 0, got {kappa}")));
        }
        Ok(Self { kappa })
    }
}

/// Minimum sensor-dipole distance (cm) before the field is considered
/// singular. Rejected rather than clamped: clamping silently corrupts the
/// EM emission probabilities.
pub const MIN_SENSOR_DISTANCE: f64 = 1e-6;

/// Magnetometer field of one dipole at every sensor: the vertical component
/// of q x (r - p) / |r - p|^3, scaled by kappa.
pub fn meg_field(
    state: &DipoleState,
    sensors: &SensorArray,
    consts: &FieldConstants,
) -> Result<DVector<f64>> {
    let p = state.location_vec();
    let q = state.moment_vec();
    let mut field = DVector::zeros(sensors.len());
    for l in 0..sensors.len() {
        let d = sensors.position(l) - p;
        let norm = d.norm();
        if norm < MIN_SENSOR_DISTANCE {
            return Err(Error::DipoleSingularity { sensor: l, distance: norm });
        }
        field[l] = consts.kappa * q.cross(&d).z / (norm * norm * norm);
    }
    Ok(field)
}

/// Electrode potential of one dipole at every sensor:
/// q . (r - p) / (4 pi sigma |r - p|^3).
pub fn eeg_potential(
    state: &DipoleState,
    sensors: &SensorArray,
    _consts: &FieldConstants,
) -> Result<DVector<f64>> {
    if sensors.modality != Modality::Eeg {
        return Err(Error::Params("eeg_potential requires an EEG sensor array".into()));
    }
    let sigma = sensors
        .conductivity
        .ok_or_else(|| Error::Params("EEG sensor array is missing conductivity".into()))?;
    if !(sigma > 0.0) {
        return Err(Error::Params(format!("conductivity must be > 0, got {sigma}")));
    }
    let scale = 1.0 / (4.0 * std::f64::consts::PI * sigma);
    let p = state.location_vec();
    let q = state.moment_vec();
    let mut field = DVector::zeros(sensors.len());
    for l in 0..sensors.len() {
        let d = sensors.position(l) - p;
        let norm = d.norm();
        if norm < MIN_SENSOR_DISTANCE {
            return Err(Error::DipoleSingularity { sensor: l, distance: norm });
        }
        field[l] = scale * q.dot(&d) / (norm * norm * norm);
    }
    Ok(field)
}

/// Predicted sensor vector of one dipole under the array's modality.
pub fn sensor_field(
    state: &DipoleState,
    sensors: &SensorArray,
    consts: &FieldConstants,
) -> Result<DVector<f64>> {
    match sensors.modality {
        Modality::Meg => meg_field(state, sensors, consts),
        Modality::Eeg => eeg_potential(state, sensors, consts),
    }
}

/// Elementwise sum of per-source fields.
pub fn multi_source_field(
    states: &[DipoleState],
    sensors: &SensorArray,
    consts: &FieldConstants,
) -> Result<DVector<f64>> {
    if states.is_empty() {
        return Err(Error::Params("multi_source_field requires at least one source".into()));
    }
    let mut total = DVector::zeros(sensors.len());
    for state in states {
        total += sensor_field(state, sensors, consts)?;
    }
    Ok(total)
}
