//! Constant-velocity Kalman filter over `(u, v, s, r, u̇, v̇, ṡ)`: box center,
//! area, aspect ratio (held constant) and the velocities of the first three.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use super::TrackingError;
use crate::geometry::BoundingBox;

pub type StateVector = SVector<f64, 7>;
pub type StateCovariance = SMatrix<f64, 7, 7>;
type Measurement = SVector<f64, 4>;
type MeasurementMatrix = SMatrix<f64, 4, 7>;

/// Ridge added to a singular innovation covariance before giving up.
const INNOVATION_RIDGE: f64 = 1e-9;

/// Noise magnitudes. Defaults follow the usual SORT parameterization:
/// small position noise, large scale noise, inflated velocity uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanConfig {
    /// Diagonal of Q.
    pub process_noise: [f64; 7],
    /// Diagonal of R.
    pub measurement_noise: [f64; 4],
    /// Diagonal of the covariance given to a freshly spawned track.
    pub initial_covariance: [f64; 7],
    /// Floor for the predicted area (px²).
    pub min_scale: f64,
    /// Floor for the aspect ratio after a correction.
    pub min_aspect: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            process_noise: [1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 1e-4],
            measurement_noise: [1.0, 1.0, 10.0, 10.0],
            initial_covariance: [10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4],
            min_scale: 1.0,
            min_aspect: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: StateVector,
    pub covariance: StateCovariance,
}

fn measure(b: &BoundingBox) -> Measurement {
    let (cx, cy) = b.center();
    Measurement::new(cx, cy, b.area(), b.width() / b.height())
}

fn measurement_matrix() -> MeasurementMatrix {
    MeasurementMatrix::identity()
}

fn transition() -> StateCovariance {
    let mut f = StateCovariance::identity();
    f[(0, 4)] = 1.0;
    f[(1, 5)] = 1.0;
    f[(2, 6)] = 1.0;
    f
}

fn symmetrize(p: &StateCovariance) -> StateCovariance {
    (p + p.transpose()) * 0.5
}

impl KalmanState {
    /// Zero-velocity state centered on `b`.
    pub fn from_box(b: &BoundingBox, cfg: &KalmanConfig) -> Self {
        let z = measure(b);
        let mut mean = StateVector::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(&z);
        Self {
            mean,
            covariance: StateCovariance::from_diagonal(&StateVector::from(cfg.initial_covariance)),
        }
    }

    /// Box implied by the current mean.
    pub fn to_box(&self) -> BoundingBox {
        let (u, v) = (self.mean[0], self.mean[1]);
        let s = self.mean[2].max(f64::MIN_POSITIVE);
        let r = self.mean[3].max(f64::MIN_POSITIVE);
        let w = (s * r).sqrt();
        let h = s / w;
        BoundingBox::from_center(u, v, w, h).expect("positive area and aspect always give a valid box")
    }

    pub fn scale(&self) -> f64 {
        self.mean[2]
    }

    pub fn aspect(&self) -> f64 {
        self.mean[3]
    }
}

/// One constant-velocity step: `x' = F x`, `P' = F P Fᵀ + Q`.
///
/// A predicted area below `cfg.min_scale` is clamped to it and the area
/// velocity zeroed.
pub fn kalman_predict(state: &KalmanState, cfg: &KalmanConfig) -> KalmanState {
    let f = transition();
    let q = StateCovariance::from_diagonal(&StateVector::from(cfg.process_noise));
    let mut mean = f * state.mean;
    if mean[2] < cfg.min_scale {
        mean[2] = cfg.min_scale;
        mean[6] = 0.0;
    }
    let covariance = symmetrize(&(f * state.covariance * f.transpose() + q));
    KalmanState { mean, covariance }
}

/// Linear correction with `observation`. Uses the Joseph form so the
/// posterior covariance stays symmetric positive semi-definite.
pub fn kalman_update(
    state: &KalmanState,
    observation: &BoundingBox,
    cfg: &KalmanConfig,
) -> Result<KalmanState, TrackingError> {
    let h = measurement_matrix();
    let r = SMatrix::<f64, 4, 4>::from_diagonal(&Measurement::from(cfg.measurement_noise));
    let p = &state.covariance;

    let innovation_cov = h * p * h.transpose() + r;
    let inv = match innovation_cov.try_inverse() {
        Some(inv) => inv,
        None => (innovation_cov + SMatrix::<f64, 4, 4>::identity() * INNOVATION_RIDGE)
            .try_inverse()
            .ok_or(TrackingError::NumericalDegeneracy)?,
    };
    if inv.iter().any(|x| !x.is_finite()) {
        return Err(TrackingError::NumericalDegeneracy);
    }

    let gain = p * h.transpose() * inv;
    let residual = measure(observation) - h * state.mean;
    let mut mean = state.mean + gain * residual;
    mean[2] = mean[2].max(cfg.min_scale);
    mean[3] = mean[3].max(cfg.min_aspect);

    let i_kh = StateCovariance::identity() - gain * h;
    let covariance = symmetrize(&(i_kh * p * i_kh.transpose() + gain * r * gain.transpose()));
    Ok(KalmanState { mean, covariance })
}
