//! Residuals, Jacobians and information matrices for every factor kind, plus
//! stationarity detection.

pub mod gravity;
pub mod imu;
pub mod pose;
pub mod zupt;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::degeneracy::AxisMask;
use crate::geometry::Pose;

pub use gravity::{gravity_error, gravity_error_jac, optimal_gravity, MIN_SPECIFIC_FORCE};
pub use imu::{
    imu_error_jac, preintegrate, slice_samples, ImuBias, ImuJacobians, ImuNoise, ImuSample, Preintegration,
    RelativeMotion,
};
pub use pose::{
    map_error, map_error_jac, map_information, no_motion_error, no_motion_error_jac, odometry_error,
    odometry_error_jac, prior_error_jac,
};
pub use zupt::{detect_zupt, window_stats, WindowStats, ZuptParams};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FactorError {
    #[error("specific force too small to define a direction ({0} m/s^2)")]
    ZeroAcceleration(f64),
    #[error("IMU timestamps not strictly increasing at t = {at}")]
    NonMonotonicTimestamps { at: f64 },
    #[error("preintegration needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("ZUPT window spans {span} s, need {required} s")]
    WindowTooShort { span: f64, required: f64 },
    #[error("information matrix is {got}x{got}, residual has dimension {want}")]
    InformationShape { got: usize, want: usize },
    #[error("information matrix is not symmetric positive semi-definite")]
    InformationNotPsd,
}

/// Per-timestamp estimation variables.
///
/// Gravity is not stored here: the graph holds a single shared gravity
/// direction, because the world frame is fixed by the prior map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateNode {
    pub timestamp: f64,
    pub pose: Pose,
    /// World-frame velocity (m/s).
    pub velocity: Vector3<f64>,
    pub bias: ImuBias,
}

impl StateNode {
    pub fn new(timestamp: f64, pose: Pose) -> Self {
        Self { timestamp, pose, velocity: Vector3::zeros(), bias: ImuBias::default() }
    }
}

/// One optimization variable block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarBlock {
    Pose(usize),
    Velocity(usize),
    /// `[accel; gyro]` bias of a state.
    Bias(usize),
    Gravity,
}

impl VarBlock {
    pub fn dim(self) -> usize {
        match self {
            VarBlock::Pose(_) | VarBlock::Bias(_) => 6,
            VarBlock::Velocity(_) | VarBlock::Gravity => 3,
        }
    }

    pub fn state(self) -> Option<usize> {
        match self {
            VarBlock::Pose(i) | VarBlock::Velocity(i) | VarBlock::Bias(i) => Some(i),
            VarBlock::Gravity => None,
        }
    }
}

/// Measurement payload of a factor.
#[derive(Debug, Clone)]
pub enum FactorKind {
    /// Relative pose from the front-end odometry.
    Odometry {
        from: usize,
        to: usize,
        measured: Pose,
    },
    /// Preintegrated IMU between consecutive states.
    Imu {
        from: usize,
        to: usize,
        preintegration: Box<Preintegration>,
        gravity_magnitude: f64,
    },
    /// Bias random walk between consecutive states.
    BiasWalk {
        from: usize,
        to: usize,
    },
    ZeroVelocity {
        state: usize,
    },
    NoMotion {
        from: usize,
        to: usize,
    },
    /// Norm-constrained gravity from a stationary window's mean specific force.
    Gravity {
        state: usize,
        accel_mean: Vector3<f64>,
    },
    /// Scan-to-map registration result, masked along degenerate axes.
    Map {
        state: usize,
        map_pose: Pose,
        mask: AxisMask,
    },
    /// Pose prior anchoring the gauge.
    Prior {
        state: usize,
        pose: Pose,
    },
    BiasPrior {
        state: usize,
        bias: ImuBias,
    },
}

impl FactorKind {
    pub fn name(&self) -> &'static str {
        match self {
            FactorKind::Odometry { .. } => "odometry",
            FactorKind::Imu { .. } => "imu",
            FactorKind::BiasWalk { .. } => "bias_walk",
            FactorKind::ZeroVelocity { .. } => "zero_velocity",
            FactorKind::NoMotion { .. } => "no_motion",
            FactorKind::Gravity { .. } => "gravity",
            FactorKind::Map { .. } => "map",
            FactorKind::Prior { .. } => "prior",
            FactorKind::BiasPrior { .. } => "bias_prior",
        }
    }

    pub fn residual_dim(&self) -> usize {
        match self {
            FactorKind::Odometry { .. } | FactorKind::NoMotion { .. } | FactorKind::Prior { .. } => 6,
            FactorKind::BiasWalk { .. } | FactorKind::BiasPrior { .. } => 6,
            FactorKind::Imu { .. } => 9,
            FactorKind::ZeroVelocity { .. } => 3,
            FactorKind::Gravity { .. } => 4,
            FactorKind::Map { mask, .. } => 6 - mask.len(),
        }
    }

    /// Variable blocks the residual depends on.
    pub fn variables(&self) -> Vec<VarBlock> {
        use VarBlock::*;
        match *self {
            FactorKind::Odometry { from, to, .. } | FactorKind::NoMotion { from, to } => vec![Pose(from), Pose(to)],
            FactorKind::Imu { from, to, .. } => {
                vec![Pose(from), Velocity(from), Bias(from), Pose(to), Velocity(to), Gravity]
            }
            FactorKind::BiasWalk { from, to } => vec![Bias(from), Bias(to)],
            FactorKind::ZeroVelocity { state } => vec![Velocity(state)],
            FactorKind::Gravity { state, .. } => vec![Pose(state), Gravity],
            FactorKind::Map { state, .. } | FactorKind::Prior { state, .. } => vec![Pose(state)],
            FactorKind::BiasPrior { state, .. } => vec![Bias(state)],
        }
    }

    pub fn state_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.variables().iter().filter_map(|b| b.state()).collect();
        v.dedup();
        v
    }
}

/// Residual and per-block Jacobians at a linearization point.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub jacobians: Vec<(VarBlock, DMatrix<f64>)>,
}

/// A factor: measurement plus information (inverse covariance).
#[derive(Debug, Clone)]
pub struct Factor {
    pub kind: FactorKind,
    pub information: DMatrix<f64>,
}

impl Factor {
    /// Builds a factor, checking the information shape and PSD-ness.
    pub fn new(kind: FactorKind, information: DMatrix<f64>) -> Result<Self, FactorError> {
        let want = kind.residual_dim();
        if information.nrows() != want || information.ncols() != want {
            return Err(FactorError::InformationShape { got: information.nrows(), want });
        }
        if !is_symmetric_psd(&information) {
            return Err(FactorError::InformationNotPsd);
        }
        Ok(Self { kind, information })
    }

    pub fn odometry(from: usize, to: usize, measured: Pose, information: Matrix6<f64>) -> Result<Self, FactorError> {
        Self::new(FactorKind::Odometry { from, to, measured }, to_dmatrix6(&information))
    }

    pub fn no_motion(from: usize, to: usize, information: Matrix6<f64>) -> Result<Self, FactorError> {
        Self::new(FactorKind::NoMotion { from, to }, to_dmatrix6(&information))
    }

    pub fn prior(state: usize, pose: Pose, information: Matrix6<f64>) -> Result<Self, FactorError> {
        Self::new(FactorKind::Prior { state, pose }, to_dmatrix6(&information))
    }

    pub fn zero_velocity(state: usize, information: Matrix3<f64>) -> Result<Self, FactorError> {
        Self::new(FactorKind::ZeroVelocity { state }, DMatrix::from_fn(3, 3, |i, j| information[(i, j)]))
    }

    /// Map factor from a registration Hessian; masked rows/columns are deleted.
    pub fn map(state: usize, map_pose: Pose, mask: AxisMask, hessian: &Matrix6<f64>) -> Result<Self, FactorError> {
        Self::new(FactorKind::Map { state, map_pose, mask }, map_information(hessian, mask))
    }

    /// Gravity factor. Direction rows carry `dir_weight`, the norm row
    /// `norm_weight`.
    pub fn gravity(
        state: usize,
        accel_mean: Vector3<f64>,
        dir_weight: f64,
        norm_weight: f64,
    ) -> Result<Self, FactorError> {
        if !(accel_mean.norm() >= MIN_SPECIFIC_FORCE) {
            return Err(FactorError::ZeroAcceleration(accel_mean.norm()));
        }
        let info = DMatrix::from_diagonal(&DVector::from_vec(vec![dir_weight, dir_weight, dir_weight, norm_weight]));
        Self::new(FactorKind::Gravity { state, accel_mean }, info)
    }

    /// IMU factor with the inverse preintegration covariance as information.
    pub fn imu(
        from: usize,
        to: usize,
        preintegration: Preintegration,
        gravity_magnitude: f64,
    ) -> Result<Self, FactorError> {
        let cov = preintegration.covariance + imu::Matrix9::identity() * 1e-12;
        let info = cov.try_inverse().ok_or(FactorError::InformationNotPsd)?;
        let info = (info + info.transpose()) * 0.5;
        let info = DMatrix::from_fn(9, 9, |i, j| info[(i, j)]);
        Self::new(FactorKind::Imu { from, to, preintegration: Box::new(preintegration), gravity_magnitude }, info)
    }

    pub fn bias_walk(from: usize, to: usize, dt: f64, noise: &ImuNoise) -> Result<Self, FactorError> {
        let dt = dt.max(1e-6);
        let wa = 1.0 / (noise.accel_bias_walk.powi(2) * dt);
        let wg = 1.0 / (noise.gyro_bias_walk.powi(2) * dt);
        let info = DMatrix::from_diagonal(&DVector::from_vec(vec![wa, wa, wa, wg, wg, wg]));
        Self::new(FactorKind::BiasWalk { from, to }, info)
    }

    pub fn bias_prior(state: usize, bias: ImuBias, sigma_accel: f64, sigma_gyro: f64) -> Result<Self, FactorError> {
        let wa = 1.0 / sigma_accel.powi(2);
        let wg = 1.0 / sigma_gyro.powi(2);
        let info = DMatrix::from_diagonal(&DVector::from_vec(vec![wa, wa, wa, wg, wg, wg]));
        Self::new(FactorKind::BiasPrior { state, bias }, info)
    }

    pub fn dim(&self) -> usize {
        self.kind.residual_dim()
    }

    /// Residual and Jacobians at `states` and the shared `gravity` direction.
    pub fn linearize(&self, states: &[StateNode], gravity: &Vector3<f64>) -> Linearization {
        use VarBlock::*;
        fn dm<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
            DMatrix::from_fn(R, C, |i, j| m[(i, j)])
        }
        fn dv<const R: usize>(v: &nalgebra::SVector<f64, R>) -> DVector<f64> {
            DVector::from_iterator(R, v.iter().copied())
        }
        match &self.kind {
            FactorKind::Odometry { from, to, measured } => {
                let (r, ji, jj) = odometry_error_jac(&states[*from].pose, &states[*to].pose, measured);
                Linearization { residual: dv(&r), jacobians: vec![(Pose(*from), dm(&ji)), (Pose(*to), dm(&jj))] }
            }
            FactorKind::NoMotion { from, to } => {
                let (r, ji, jj) = no_motion_error_jac(&states[*from].pose, &states[*to].pose);
                Linearization { residual: dv(&r), jacobians: vec![(Pose(*from), dm(&ji)), (Pose(*to), dm(&jj))] }
            }
            FactorKind::Prior { state, pose } => {
                let (r, j) = prior_error_jac(&states[*state].pose, pose);
                Linearization { residual: dv(&r), jacobians: vec![(Pose(*state), dm(&j))] }
            }
            FactorKind::Map { state, map_pose, mask } => {
                let (r, j) = map_error_jac(&states[*state].pose, map_pose, *mask);
                Linearization { residual: r, jacobians: vec![(Pose(*state), j)] }
            }
            FactorKind::ZeroVelocity { state } => Linearization {
                residual: dv(&states[*state].velocity),
                jacobians: vec![(Velocity(*state), DMatrix::identity(3, 3))],
            },
            FactorKind::Gravity { state, accel_mean } => {
                let (r, jp, jg) = gravity_error_jac(&states[*state].pose, gravity, accel_mean)
                    .expect("gravity factor validated at construction");
                Linearization { residual: dv(&r), jacobians: vec![(Pose(*state), dm(&jp)), (Gravity, dm(&jg))] }
            }
            FactorKind::Imu { from, to, preintegration, gravity_magnitude } => {
                let (si, sj) = (&states[*from], &states[*to]);
                let (r, j) = imu_error_jac(
                    preintegration,
                    &si.pose,
                    &si.velocity,
                    &si.bias,
                    &sj.pose,
                    &sj.velocity,
                    gravity,
                    *gravity_magnitude,
                );
                Linearization {
                    residual: dv(&r),
                    jacobians: vec![
                        (Pose(*from), dm(&j.pose_i)),
                        (Velocity(*from), dm(&j.vel_i)),
                        (Bias(*from), dm(&j.bias_i)),
                        (Pose(*to), dm(&j.pose_j)),
                        (Velocity(*to), dm(&j.vel_j)),
                        (Gravity, dm(&j.gravity)),
                    ],
                }
            }
            FactorKind::BiasWalk { from, to } => {
                let r = bias_vector(&states[*to].bias) - bias_vector(&states[*from].bias);
                Linearization {
                    residual: r,
                    jacobians: vec![(Bias(*from), -DMatrix::identity(6, 6)), (Bias(*to), DMatrix::identity(6, 6))],
                }
            }
            FactorKind::BiasPrior { state, bias } => Linearization {
                residual: bias_vector(&states[*state].bias) - bias_vector(bias),
                jacobians: vec![(Bias(*state), DMatrix::identity(6, 6))],
            },
        }
    }

    /// `0.5 * r^T * information * r`.
    pub fn cost(&self, states: &[StateNode], gravity: &Vector3<f64>) -> f64 {
        let r = self.linearize(states, gravity).residual;
        0.5 * (r.transpose() * &self.information * &r)[(0, 0)]
    }
}

pub fn bias_vector(b: &ImuBias) -> DVector<f64> {
    DVector::from_vec(vec![b.accel.x, b.accel.y, b.accel.z, b.gyro.x, b.gyro.y, b.gyro.z])
}

fn to_dmatrix6(m: &Matrix6<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(6, 6, |i, j| m[(i, j)])
}

/// Diagonal 6x6 information from rotation/translation standard deviations.
pub fn pose_information(sigma_rot: f64, sigma_trans: f64) -> Matrix6<f64> {
    let r = 1.0 / (sigma_rot * sigma_rot);
    let t = 1.0 / (sigma_trans * sigma_trans);
    Matrix6::from_diagonal(&nalgebra::Vector6::new(r, r, r, t, t, t))
}

pub fn is_symmetric_psd(m: &DMatrix<f64>) -> bool {
    if m.iter().any(|x| !x.is_finite()) {
        return false;
    }
    let scale = m.amax().max(1e-300);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return false;
    }
    let eig = SymmetricEigen::new(m.clone());
    eig.eigenvalues.iter().all(|l| *l >= -1e-9 * scale)
}
