//! Head model, sensor placement, ROI boxes and voxel discretization.
//!
//! All lengths are in centimeters. Voxels are enumerated row-major with the
//! x index varying fastest; this ordering is a contract so exported posterior
//! arrays are comparable across runs.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Single-sphere head model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HeadModel {
    pub center: [f64; 3],
    pub radius: f64,
}

impl HeadModel {
    pub fn new(center: [f64; 3], radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Geometry(format!("head radius must be > 0, got {radius}")));
        }
        Ok(Self { center, radius })
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (p - Vector3::from(self.center)).norm() <= self.radius
    }

    /// Axis-aligned bounding box of the sphere.
    pub fn bounding_box(&self) -> RoiBox {
        let mut intervals = [[0.0; 2]; 3];
        for i in 0..3 {
            intervals[i] = [self.center[i] - self.radius, self.center[i] + self.radius];
        }
        RoiBox { intervals }
    }

    /// Bounding box of the upper half of the sphere (z above the center).
    pub fn upper_bounding_box(&self) -> RoiBox {
        let mut roi = self.bounding_box();
        roi.intervals[2][0] = self.center[2];
        roi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Meg,
    Eeg,
}

/// Sensor positions with their modality. `conductivity` (S/cm) is required
/// for EEG only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensorArray {
    pub positions: Vec<[f64; 3]>,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conductivity: Option<f64>,
}

impl SensorArray {
    pub fn meg(positions: Vec<[f64; 3]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Geometry("sensor array must have at least one sensor".into()));
        }
        Ok(Self { positions, modality: Modality::Meg, conductivity: None })
    }

    pub fn eeg(positions: Vec<[f64; 3]>, conductivity: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Geometry("sensor array must have at least one sensor".into()));
        }
        if !(conductivity > 0.0) {
            return Err(Error::Geometry(format!(
                "EEG conductivity must be > 0, got {conductivity}"
            )));
        }
        Ok(Self { positions, modality: Modality::Eeg, conductivity: Some(conductivity) })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, l: usize) -> Vector3<f64> {
        Vector3::from(self.positions[l])
    }
}

/// Default sensor standoff above the scalp, in cm.
pub const DEFAULT_SENSOR_OFFSET: f64 = 0.5;

/// Places `count` sensors uniformly at random on the upper hemisphere of the
/// head, at radius `head.radius + offset`. Deterministic given `seed`
/// (ChaCha8 counter-based generator, so seeds are portable).
pub fn place_sensors(head: &HeadModel, count: usize, seed: u64, offset: f64) -> Result<SensorArray> {
    if count == 0 {
        return Err(Error::Geometry("sensor count must be >= 1".into()));
    }
    if !(offset > 0.0) {
        return Err(Error::Geometry(format!("sensor offset must be > 0, got {offset}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = head.radius + offset;
    let center = Vector3::from(head.center);
    let mut positions = Vec::with_capacity(count);
    for _ in 0..count {
        // Uniform on the upper hemisphere: z = cos(theta) uniform in [0, 1].
        let z: f64 = rng.gen::<f64>();
        let phi: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
        let s = (1.0 - z * z).sqrt();
        let p = center + r * Vector3::new(s * phi.cos(), s * phi.sin(), z);
        positions.push([p.x, p.y, p.z]);
    }
    SensorArray::meg(positions)
}

/// Axis-aligned ROI box: three closed intervals in cm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub intervals: [[f64; 2]; 3],
}

impl RoiBox {
    pub fn new(intervals: [[f64; 2]; 3]) -> Result<Self> {
        for (i, iv) in intervals.iter().enumerate() {
            if !(iv[0] <= iv[1]) || !iv[0].is_finite() || !iv[1].is_finite() {
                return Err(Error::Geometry(format!(
                    "ROI interval {i} is empty or non-finite: [{}, {}]",
                    iv[0], iv[1]
                )));
            }
        }
        Ok(Self { intervals })
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.intervals[axis][1] - self.intervals[axis][0]
    }

    pub fn centroid(&self) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.intervals[0][0] + self.intervals[0][1]),
            0.5 * (self.intervals[1][0] + self.intervals[1][1]),
            0.5 * (self.intervals[2][0] + self.intervals[2][1]),
        )
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.intervals[i][0] && p[i] <= self.intervals[i][1])
    }

    /// Clips this box to `other`, returning an error if the result is empty.
    pub fn clip_to(&self, other: &RoiBox) -> Result<RoiBox> {
        let mut intervals = [[0.0; 2]; 3];
        for i in 0..3 {
            let lo = self.intervals[i][0].max(other.intervals[i][0]);
            let hi = self.intervals[i][1].min(other.intervals[i][1]);
            if lo > hi {
                return Err(Error::Geometry(format!(
                    "ROI clipped to empty box on axis {i}: [{lo}, {hi}]"
                )));
            }
            intervals[i] = [lo, hi];
        }
        RoiBox::new(intervals)
    }

    pub fn intersects_sphere(&self, head: &HeadModel) -> bool {
        // Distance from sphere center to the box.
        let mut d2 = 0.0;
        for i in 0..3 {
            let c = head.center[i];
            let lo = self.intervals[i][0];
            let hi = self.intervals[i][1];
            let d = if c < lo { lo - c } else if c > hi { c - hi } else { 0.0 };
            d2 += d * d;
        }
        d2 <= head.radius * head.radius
    }
}

/// Regular voxelization of an ROI box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub roi: RoiBox,
    pub mesh: [usize; 3],
    /// Voxel centers in row-major order, x index fastest.
    pub centers: Vec<[f64; 3]>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn center(&self, k: usize) -> Vector3<f64> {
        Vector3::from(self.centers[k])
    }

    pub fn widths(&self) -> [f64; 3] {
        let mut w = [0.0; 3];
        for i in 0..3 {
            w[i] = self.roi.width(i) / self.mesh[i] as f64;
        }
        w
    }
}

/// Partitions `roi` into a regular `K1 x K2 x K3` grid of voxels and returns
/// their centers in row-major order (x fastest).
pub fn discretize(roi: &RoiBox, mesh: [usize; 3]) -> Result<VoxelGrid> {
    for (i, &k) in mesh.iter().enumerate() {
        if k == 0 {
            return Err(Error::Geometry(format!("mesh count on axis {i} must be >= 1")));
        }
        if roi.width(i) == 0.0 && k > 1 {
            return Err(Error::Geometry(format!(
                "degenerate ROI interval on axis {i} cannot be split into {k} voxels"
            )));
        }
    }
    let mut centers = Vec::with_capacity(mesh[0] * mesh[1] * mesh[2]);
    let w = [
        roi.width(0) / mesh[0] as f64,
        roi.width(1) / mesh[1] as f64,
        roi.width(2) / mesh[2] as f64,
    ];
    for kz in 0..mesh[2] {
        for ky in 0..mesh[1] {
            for kx in 0..mesh[0] {
                centers.push([
                    roi.intervals[0][0] + (kx as f64 + 0.5) * w[0],
                    roi.intervals[1][0] + (ky as f64 + 0.5) * w[1],
                    roi.intervals[2][0] + (kz as f64 + 0.5) * w[2],
                ]);
            }
        }
    }
    Ok(VoxelGrid { roi: *roi, mesh, centers })
}

/// Maps a point to its voxel index, or `None` outside the ROI. Cells are
/// half-open on their upper faces except at the global upper ROI boundary,
/// which is closed, so every ROI point maps to exactly one voxel.
pub fn voxel_of(grid: &VoxelGrid, point: &Vector3<f64>) -> Option<usize> {
    let mut idx = [0usize; 3];
    for i in 0..3 {
        let lo = grid.roi.intervals[i][0];
        let hi = grid.roi.intervals[i][1];
        let x = point[i];
        if x < lo || x > hi {
            return None;
        }
        let k = grid.mesh[i];
        let w = grid.roi.width(i) / k as f64;
        let j = if w == 0.0 { 0 } else { ((x - lo) / w) as usize };
        idx[i] = j.min(k - 1);
    }
    Some(idx[0] + grid.mesh[0] * (idx[1] + grid.mesh[1] * idx[2]))
}
