//! Finite-difference motion dynamics and the dynamics-prediction providers.
//!
//! Stored arrays are 0-based. With frames numbered `1..=T`, `vel3d[i]` is the
//! velocity at frame `i + 2` (between frames `i + 1` and `i + 2`) and `acc3d[i]`
//! is the acceleration centred on frame `i + 2`.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::body::{JointPositions, Skeleton};
use crate::error::{ensure_len, Error, Result};
use crate::geom::Camera;
use crate::motion::{joints_camera, MotionSequence};

pub type Field = Vec<Vec<Vector3<f64>>>;

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid("dt must be positive"));
    }
    Ok(())
}

/// `V^t = (J^t - J^{t-1}) / dt`, one row per consecutive frame pair.
pub fn velocity_field(joints: &JointPositions, dt: f64) -> Result<Field> {
    check_dt(dt)?;
    ensure_len("velocity", 2, joints.frames())?;
    Ok(joints
        .positions
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (b - a) / dt).collect())
        .collect())
}

/// `A^t = (J^{t+1} - 2 J^t + J^{t-1}) / dt^2`.
pub fn acceleration_field(joints: &JointPositions, dt: f64) -> Result<Field> {
    check_dt(dt)?;
    ensure_len("acceleration", 3, joints.frames())?;
    let dt2 = dt * dt;
    Ok(joints
        .positions
        .windows(3)
        .map(|w| {
            (0..w[0].len())
                .map(|j| ((w[2][j] - w[1][j]) - (w[1][j] - w[0][j])) / dt2)
                .collect()
        })
        .collect())
}

/// Third forward difference `J^{t+3} - 3 J^{t+2} + 3 J^{t+1} - J^t`, not divided by dt^3.
pub fn jerk_residuals(joints: &JointPositions) -> Result<Field> {
    ensure_len("jerk term", 4, joints.frames())?;
    Ok(joints
        .positions
        .windows(4)
        .map(|w| {
            (0..w[0].len())
                .map(|j| (w[3][j] - w[0][j]) - 3.0 * (w[2][j] - w[1][j]))
                .collect()
        })
        .collect())
}

/// Per-frame targets from a dynamics predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsPredictions {
    /// Skeleton joint observed by each prediction column.
    pub joint_map: Vec<usize>,
    /// `T x K` pixels.
    pub keypoints2d: Vec<Vec<Vector2<f64>>>,
    /// `(T-1) x K`, m/s, camera frame.
    pub vel3d: Field,
    /// `(T-2) x K`, m/s^2, camera frame.
    pub acc3d: Field,
    /// `T x K` weights in `[0, 1]`.
    pub confidence: Vec<Vec<f64>>,
}

impl DynamicsPredictions {
    pub fn frames(&self) -> usize {
        self.keypoints2d.len()
    }

    pub fn joints(&self) -> usize {
        self.joint_map.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        let k = self.joints();
        if t == 0 || k == 0 {
            return Err(Error::parse("keypoints2d", "predictions need at least one frame and joint"));
        }
        let rows = |field: &str, n: usize, expected: usize| -> Result<()> {
            if n != expected {
                return Err(Error::parse(field, format!("expected {expected} rows, found {n}")));
            }
            Ok(())
        };
        rows("vel3d", self.vel3d.len(), t.saturating_sub(1))?;
        rows("acc3d", self.acc3d.len(), t.saturating_sub(2))?;
        rows("confidence", self.confidence.len(), t)?;
        let width = |field: &str, i: usize, n: usize| -> Result<()> {
            if n != k {
                return Err(Error::parse(format!("{field}[{i}]"), format!("expected {k} joints, found {n}")));
            }
            Ok(())
        };
        for (i, r) in self.keypoints2d.iter().enumerate() {
            width("keypoints2d", i, r.len())?;
            if r.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
                return Err(Error::parse(format!("keypoints2d[{i}]"), "non-finite value"));
            }
        }
        for (name, field) in [("vel3d", &self.vel3d), ("acc3d", &self.acc3d)] {
            for (i, r) in field.iter().enumerate() {
                width(name, i, r.len())?;
                if r.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
                    return Err(Error::parse(format!("{name}[{i}]"), "non-finite value"));
                }
            }
        }
        for (i, r) in self.confidence.iter().enumerate() {
            width("confidence", i, r.len())?;
            for (j, c) in r.iter().enumerate() {
                if !(0.0..=1.0).contains(c) {
                    return Err(Error::parse(format!("confidence[{i}][{j}]"), format!("{c} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// Checks the predictions line up with a sequence of `frames` frames on `skel`.
    pub fn check_compatible(&self, frames: usize, skel: &Skeleton) -> Result<()> {
        if self.frames() != frames {
            return Err(Error::invalid(format!(
                "predictions cover {} frames, sequence has {frames}",
                self.frames()
            )));
        }
        if let Some(&bad) = self.joint_map.iter().find(|&&j| j >= skel.joint_count()) {
            return Err(Error::invalid(format!("joint_map entry {bad} outside skeleton")));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DynamicsPredictions::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PredictionsFile =
            serde_json::from_str(text).map_err(|e| Error::parse("predictions", e.to_string()))?;
        let v3 = |rows: Vec<Vec<[f64; 3]>>| -> Field {
            rows.into_iter().map(|r| r.into_iter().map(Vector3::from).collect()).collect()
        };
        let preds = DynamicsPredictions {
            joint_map: file.joint_map,
            keypoints2d: file
                .keypoints2d
                .into_iter()
                .map(|r| r.into_iter().map(Vector2::from).collect())
                .collect(),
            vel3d: v3(file.vel3d),
            acc3d: v3(file.acc3d),
            confidence: file.confidence,
        };
        preds.validate()?;
        Ok(preds)
    }

    pub fn to_json(&self) -> String {
        let v3 = |f: &Field| -> Vec<Vec<[f64; 3]>> { f.iter().map(|r| r.iter().map(|v| (*v).into()).collect()).collect() };
        let file = PredictionsFile {
            joint_map: self.joint_map.clone(),
            keypoints2d: self
                .keypoints2d
                .iter()
                .map(|r| r.iter().map(|v| (*v).into()).collect())
                .collect(),
            vel3d: v3(&self.vel3d),
            acc3d: v3(&self.acc3d),
            confidence: self.confidence.clone(),
        };
        serde_json::to_string(&file).expect("predictions serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionsFile {
    joint_map: Vec<usize>,
    keypoints2d: Vec<Vec<[f64; 2]>>,
    vel3d: Vec<Vec<[f64; 3]>>,
    acc3d: Vec<Vec<[f64; 3]>>,
    confidence: Vec<Vec<f64>>,
}

/// Noise injected by [`synth_oracle`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub sigma_kp: f64,
    pub sigma_vel: f64,
    pub sigma_acc: f64,
    pub dropout_prob: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_kp: 0.0,
            sigma_vel: 0.0,
            sigma_acc: 0.0,
            dropout_prob: 0.0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |s: f64| s >= 0.0 && s.is_finite();
        if !ok(self.sigma_kp) || !ok(self.sigma_vel) || !ok(self.sigma_acc) {
            return Err(Error::invalid("noise sigmas must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::invalid("dropout probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Independent random streams for each noisy quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum NoiseStream {
    Keypoints = 1,
    Velocity = 2,
    Acceleration = 3,
    Dropout = 4,
    Rotation = 5,
    RootOrient = 6,
    Translation = 7,
}

/// Counter-based generator: every draw is keyed by `(seed, stream, frame,
/// joint, component)`, so results do not depend on evaluation order.
#[derive(Debug, Clone, Copy)]
pub struct KeyedNoise {
    seed: u64,
}

impl KeyedNoise {
    pub fn new(seed: u64) -> Self {
        KeyedNoise { seed }
    }

    fn rng(&self, stream: NoiseStream, frame: usize, joint: usize, component: usize) -> ChaCha8Rng {
        let key = ((stream as u64) << 56) | ((frame as u64 & 0xff_ffff_ffff) << 16) | ((joint as u64 & 0xfff) << 4) | (component as u64 & 0xf);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(key);
        rng
    }

    pub fn normal(&self, stream: NoiseStream, frame: usize, joint: usize, component: usize) -> f64 {
        self.rng(stream, frame, joint, component).sample(StandardNormal)
    }

    pub fn uniform(&self, stream: NoiseStream, frame: usize, joint: usize) -> f64 {
        self.rng(stream, frame, joint, 0).gen::<f64>()
    }

    pub fn vector3(&self, stream: NoiseStream, frame: usize, joint: usize, sigma: f64) -> Vector3<f64> {
        Vector3::new(
            self.normal(stream, frame, joint, 0),
            self.normal(stream, frame, joint, 1),
            self.normal(stream, frame, joint, 2),
        ) * sigma
    }
}

fn perturb(field: &mut Field, noise: &KeyedNoise, stream: NoiseStream, sigma: f64) {
    if sigma == 0.0 {
        return;
    }
    for (t, row) in field.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v += noise.vector3(stream, t, k, sigma);
        }
    }
}

/// Ground-truth dynamics of a world-frame sequence, optionally corrupted.
///
/// Camera-frame joints come from the stored extrinsics; velocities and
/// accelerations use the same stencils as the refinement energy, so zero
/// noise reproduces the model-side quantities exactly.
pub fn synth_oracle(
    gt_seq: &MotionSequence,
    skel: &Skeleton,
    cam: &Camera,
    noise: &NoiseConfig,
) -> Result<DynamicsPredictions> {
    noise.validate()?;
    ensure_len("dynamics predictions", 3, gt_seq.len())?;
    let joint_map = skel.prediction_joints();
    let cam_joints = joints_camera(gt_seq, skel, cam)?.select(&joint_map);
    let mut keypoints2d = Vec::with_capacity(gt_seq.len());
    for (t, row) in cam_joints.positions.iter().enumerate() {
        let mut out = Vec::with_capacity(row.len());
        for (k, p) in row.iter().enumerate() {
            out.push(cam.project_camera_point(t, p).map_err(|e| e.with_joint(joint_map[k]))?);
        }
        keypoints2d.push(out);
    }
    let mut vel3d = velocity_field(&cam_joints, gt_seq.dt)?;
    let mut acc3d = acceleration_field(&cam_joints, gt_seq.dt)?;

    let rng = KeyedNoise::new(noise.seed);
    if noise.sigma_kp != 0.0 {
        for (t, row) in keypoints2d.iter_mut().enumerate() {
            for (k, p) in row.iter_mut().enumerate() {
                p.x += noise.sigma_kp * rng.normal(NoiseStream::Keypoints, t, k, 0);
                p.y += noise.sigma_kp * rng.normal(NoiseStream::Keypoints, t, k, 1);
            }
        }
    }
    perturb(&mut vel3d, &rng, NoiseStream::Velocity, noise.sigma_vel);
    perturb(&mut acc3d, &rng, NoiseStream::Acceleration, noise.sigma_acc);

    let k = joint_map.len();
    let confidence = (0..gt_seq.len())
        .map(|t| {
            (0..k)
                .map(|j| {
                    if noise.dropout_prob > 0.0 && rng.uniform(NoiseStream::Dropout, t, j) < noise.dropout_prob {
                        0.0
                    } else {
                        1.0
                    }
                })
                .collect()
        })
        .collect();

    let preds = DynamicsPredictions {
        joint_map,
        keypoints2d,
        vel3d,
        acc3d,
        confidence,
    };
    preds.validate()?;
    Ok(preds)
}
