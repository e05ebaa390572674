//! Feeds a recorded inertial stream and camera frames through the
//! estimator in time order.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::{ImuState, InertialSample, Matrix15, BA, BG, POS, THETA, VEL};
use crate::lie::Pose;
use crate::msckf::{Estimator, EstimatorConfig, Event, MeasurementFrame};
use crate::residuals::ObjectClass;
use crate::sim::ImuRecord;

/// Standard deviations of the initial state error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialUncertainty {
    pub attitude: f64,
    pub velocity: f64,
    pub position: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
}

impl Default for InitialUncertainty {
    fn default() -> Self {
        InitialUncertainty { attitude: 1e-3, velocity: 1e-2, position: 1e-3, gyro_bias: 1e-3, accel_bias: 1e-2 }
    }
}

impl InitialUncertainty {
    pub fn covariance(&self) -> Matrix15 {
        let mut p = Matrix15::zeros();
        for (block, sigma) in [
            (THETA, self.attitude),
            (VEL, self.velocity),
            (POS, self.position),
            (BG, self.gyro_bias),
            (BA, self.accel_bias),
        ] {
            for i in 0..3 {
                p[(block + i, block + i)] = sigma * sigma;
            }
        }
        p
    }
}

/// Everything the estimator consumes.
pub struct RunInputs<'a> {
    pub classes: &'a [ObjectClass],
    pub extrinsics: Pose,
    pub imu: &'a [ImuRecord],
    pub frames: &'a [MeasurementFrame],
    /// State at the time of the first frame.
    pub initial: ImuState,
    pub initial_uncertainty: InitialUncertainty,
}

/// Filter state right after a camera frame was processed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub frame: u64,
    pub t: f64,
    pub state: ImuState,
}

pub struct RunOutput {
    pub trajectory: Vec<TrajectoryPoint>,
    pub events: Vec<Event>,
    pub estimator: Estimator,
}

/// Runs the estimator over every frame. `observe` sees the estimator after
/// each frame and receives the frame's index.
pub fn run(
    inputs: &RunInputs<'_>,
    cfg: &EstimatorConfig,
    mut observe: impl FnMut(usize, &Estimator),
) -> Result<RunOutput> {
    let Some(first) = inputs.frames.first() else {
        return Err(Error::InvalidInput("dataset has no camera frames".into()));
    };
    let mut est = Estimator::new(
        *cfg,
        inputs.classes.to_vec(),
        first.time,
        inputs.initial,
        &inputs.initial_uncertainty.covariance(),
        inputs.extrinsics,
    )?;
    let mut trajectory = Vec::with_capacity(inputs.frames.len());
    let mut events = Vec::new();
    let mut samples = inputs.imu.iter().peekable();
    // A sample straddling a frame is split; this is its unused remainder.
    let mut carry: Option<(f64, InertialSample)> = None;
    // Skip inertial data before the first frame.
    while let Some(r) = samples.peek() {
        if r.t + r.sample.dt <= first.time + 1e-9 {
            samples.next();
        } else {
            break;
        }
    }
    for (k, frame) in inputs.frames.iter().enumerate() {
        let target = frame.time;
        loop {
            let (t, z) = match carry.take() {
                Some(c) => c,
                None => match samples.peek() {
                    Some(r) if r.t < target - 1e-9 => {
                        let r = samples.next().expect("peeked");
                        if r.t < est.fs.time - 1e-9 {
                            if r.t + r.sample.dt <= est.fs.time + 1e-9 {
                                continue;
                            }
                            // Only the part after the filter time is used.
                            let skip = est.fs.time - r.t;
                            (est.fs.time, InertialSample { dt: r.sample.dt - skip, ..r.sample })
                        } else {
                            (r.t, r.sample)
                        }
                    }
                    _ => break,
                },
            };
            if t >= target - 1e-9 {
                carry = Some((t, z));
                break;
            }
            let end = t + z.dt;
            if end > target + 1e-9 {
                let head = InertialSample { dt: target - t, ..z };
                est.process_imu(t, &head)?;
                carry = Some((target, InertialSample { dt: end - target, ..z }));
                break;
            }
            est.process_imu(t, &z)?;
        }
        if (est.fs.time - target).abs() > 1e-6 && k > 0 {
            log::warn!("frame {} at {target:.6} s but inertial data ends at {:.6} s", frame.frame, est.fs.time);
        }
        events.extend(est.process_frame(frame)?);
        trajectory.push(TrajectoryPoint { frame: frame.frame, t: frame.time, state: est.fs.imu });
        observe(k, &est);
    }
    events.extend(est.finish());
    Ok(RunOutput { trajectory, events, estimator: est })
}

/// Initial state with the given pose and velocity and zero biases.
pub fn initial_state(pose: &Pose, velocity: Vector3<f64>) -> ImuState {
    ImuState { rotation: pose.rotation, position: pose.translation, velocity, ..Default::default() }
}
