//! Synthetic scenarios: ground-truth motion, a corrupted initialization, a
//! camera and oracle predictions, all derived from one seed.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::body::{Frame, FramePose, ShapeCoefficients, Skeleton};
use crate::dynamics::{synth_oracle, DynamicsPredictions, KeyedNoise, NoiseConfig, NoiseStream};
use crate::error::{Error, Result};
use crate::geom::{AxisAngle, Camera, RigidTransform, RotationMatrix};
use crate::motion::{MotionSequence, DEFAULT_DT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    SineWalk,
    Squat,
    Spin,
    Constant,
    OversmoothedWalk,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::SineWalk,
        Scenario::Squat,
        Scenario::Spin,
        Scenario::Constant,
        Scenario::OversmoothedWalk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::SineWalk => "sine_walk",
            Scenario::Squat => "squat",
            Scenario::Spin => "spin",
            Scenario::Constant => "constant",
            Scenario::OversmoothedWalk => "oversmoothed_walk",
        }
    }

    pub fn default_frames(self) -> usize {
        match self {
            Scenario::SineWalk | Scenario::OversmoothedWalk => 300,
            _ => 120,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scenario '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// 0 selects the scenario default.
    pub frames: usize,
    pub dt: f64,
    pub rot_sigma: f64,
    pub trans_sigma: f64,
    /// Gaussian low-pass width in frames, for `oversmoothed_walk`.
    pub smooth_sigma: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 0,
            dt: DEFAULT_DT,
            rot_sigma: 0.05,
            trans_sigma: 0.02,
            smooth_sigma: 2.0,
            noise: NoiseConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub scenario: Scenario,
    pub skeleton: Skeleton,
    pub gt: MotionSequence,
    pub init: MotionSequence,
    pub camera: Camera,
    pub predictions: DynamicsPredictions,
}

pub const FILES: [&str; 5] = ["skeleton.json", "gt.json", "init.json", "camera.json", "predictions.json"];

impl SynthOutput {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.skeleton.save(dir.join(FILES[0]))?;
        self.gt.save(dir.join(FILES[1]))?;
        self.init.save(dir.join(FILES[2]))?;
        self.camera.save(dir.join(FILES[3]))?;
        self.predictions.save(dir.join(FILES[4]))
    }
}

const STANDING_HEIGHT: f64 = 1.17;
const THIGH: f64 = 0.39;
const SHIN: f64 = 0.40;

pub fn synthesize(scenario: Scenario, cfg: &SynthConfig) -> Result<SynthOutput> {
    if !(cfg.dt > 0.0) || !(cfg.rot_sigma >= 0.0) || !(cfg.trans_sigma >= 0.0) || !(cfg.smooth_sigma >= 0.0) {
        return Err(Error::invalid("synth parameters must be non-negative with dt > 0"));
    }
    cfg.noise.validate()?;
    let frames = if cfg.frames == 0 { scenario.default_frames() } else { cfg.frames };
    let skeleton = Skeleton::smpl24();
    let dt = cfg.dt;
    let poses: Vec<FramePose> = (0..frames)
        .map(|t| {
            let time = t as f64 * dt;
            match scenario {
                Scenario::SineWalk => walk_pose(time, 1.0, 1.0),
                Scenario::OversmoothedWalk => walk_pose(time, 1.5, 1.2),
                Scenario::Squat => squat_pose(time),
                Scenario::Spin => spin_pose(time),
                Scenario::Constant => walk_pose(0.3, 1.0, 0.0),
            }
        })
        .collect();
    let gt = MotionSequence::new(dt, Frame::World, ShapeCoefficients(vec![0.0; skeleton.shape_dim()]), poses)?;
    let init = match scenario {
        Scenario::OversmoothedWalk => smooth(&gt, cfg.smooth_sigma)?,
        _ => corrupt(&gt, cfg.rot_sigma, cfg.trans_sigma, cfg.seed)?,
    };
    let camera = match scenario {
        Scenario::SineWalk | Scenario::OversmoothedWalk => tracking_camera(&gt)?,
        _ => Camera::static_camera(1000.0, 1000.0, 960.0, 540.0, look_from(Vector3::new(0.0, 1.0, 4.0)), frames)?,
    };
    let noise = NoiseConfig { seed: cfg.noise.seed ^ cfg.seed, ..cfg.noise.clone() };
    let predictions = synth_oracle(&gt, &skeleton, &camera, &noise)?;
    Ok(SynthOutput { scenario, skeleton, gt, init, camera, predictions })
}

/// Camera at `center` looking down the world -z axis, image y pointing down.
fn look_from(center: Vector3<f64>) -> RigidTransform {
    let r = RotationMatrix::new(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)), 1e-12).expect("valid rotation");
    let t = -(r.matrix() * center);
    RigidTransform::new(r, t)
}

pub fn tracking_camera(gt: &MotionSequence) -> Result<Camera> {
    let ext = gt
        .frames
        .iter()
        .map(|f| look_from(Vector3::new(f.root_trans.x, 1.0, 4.0)))
        .collect();
    Camera::new(1000.0, 1000.0, 960.0, 540.0, ext)
}

fn rest_theta() -> Vec<AxisAngle> {
    vec![AxisAngle::zero(); 24]
}

/// Walking along +x at `speed` m/s with the given cadence in Hz.
fn walk_pose(time: f64, cadence: f64, speed: f64) -> FramePose {
    let phi = 2.0 * PI * cadence * time;
    let (s, c) = phi.sin_cos();
    let mut theta = rest_theta();
    theta[1] = AxisAngle::new(-0.4 * s, 0.0, 0.0);
    theta[2] = AxisAngle::new(0.4 * s, 0.0, 0.0);
    theta[4] = AxisAngle::new(0.3 * (1.0 - c), 0.0, 0.0);
    theta[5] = AxisAngle::new(0.3 * (1.0 + c), 0.0, 0.0);
    theta[7] = AxisAngle::new(0.1 * s, 0.0, 0.0);
    theta[8] = AxisAngle::new(-0.1 * s, 0.0, 0.0);
    for j in [3, 6, 9] {
        theta[j] = AxisAngle::new(0.02, 0.05 * s, 0.0);
    }
    theta[15] = AxisAngle::new(-0.05 * c, 0.0, 0.0);
    theta[16] = AxisAngle::new(0.3 * s, 0.0, -1.2);
    theta[17] = AxisAngle::new(-0.3 * s, 0.0, 1.2);
    theta[18] = AxisAngle::new(0.0, -0.3 - 0.1 * s, 0.0);
    theta[19] = AxisAngle::new(0.0, 0.3 - 0.1 * s, 0.0);
    FramePose {
        theta,
        root_orient: AxisAngle::new(0.0, FRAC_PI_2 + 0.05 * s, 0.0),
        root_trans: Vector3::new(-0.5 * speed * 10.0 + speed * time, STANDING_HEIGHT + 0.015 * (2.0 * phi).cos(), 0.0),
    }
}

/// Squats facing the camera with a 3 s period; the feet stay under the hips.
fn squat_pose(time: f64) -> FramePose {
    let depth = 0.5 * (1.0 - (2.0 * PI * time / 3.0).cos());
    let a = 1.0 * depth;
    let mut theta = rest_theta();
    for (hip, knee, ankle) in [(1, 4, 7), (2, 5, 8)] {
        theta[hip] = AxisAngle::new(-a, 0.0, 0.0);
        theta[knee] = AxisAngle::new(2.0 * a, 0.0, 0.0);
        theta[ankle] = AxisAngle::new(-a, 0.0, 0.0);
    }
    theta[3] = AxisAngle::new(0.3 * depth, 0.0, 0.0);
    theta[16] = AxisAngle::new(0.0, -1.4 * depth, -1.2 * (1.0 - depth));
    theta[17] = AxisAngle::new(0.0, 1.4 * depth, 1.2 * (1.0 - depth));
    FramePose {
        theta,
        root_orient: AxisAngle::zero(),
        root_trans: Vector3::new(0.0, STANDING_HEIGHT - (THIGH + SHIN) * (1.0 - a.cos()), 0.0),
    }
}

/// Turns in place at a quarter revolution per second, arms raised.
fn spin_pose(time: f64) -> FramePose {
    let mut theta = rest_theta();
    let s = (2.0 * PI * 0.5 * time).sin();
    theta[16] = AxisAngle::new(0.0, 0.0, -0.3 + 0.1 * s);
    theta[17] = AxisAngle::new(0.0, 0.0, 0.3 - 0.1 * s);
    theta[1] = AxisAngle::new(-0.1 * s, 0.0, 0.0);
    theta[2] = AxisAngle::new(0.1 * s, 0.0, 0.0);
    FramePose {
        theta,
        root_orient: AxisAngle::new(0.0, 0.5 * PI * time, 0.0),
        root_trans: Vector3::new(0.05 * s, STANDING_HEIGHT, 0.0),
    }
}

/// Adds keyed Gaussian noise to every pose parameter.
pub fn corrupt(seq: &MotionSequence, rot_sigma: f64, trans_sigma: f64, seed: u64) -> Result<MotionSequence> {
    let noise = KeyedNoise::new(seed);
    let mut out = seq.clone();
    for (t, f) in out.frames.iter_mut().enumerate() {
        for (j, th) in f.theta.iter_mut().enumerate() {
            th.0 += noise.vector3(NoiseStream::Rotation, t, j, rot_sigma);
        }
        f.root_orient.0 += noise.vector3(NoiseStream::RootOrient, t, 0, rot_sigma);
        f.root_trans += noise.vector3(NoiseStream::Translation, t, 0, trans_sigma);
    }
    out.validate()?;
    Ok(out)
}

/// Gaussian low-pass filter over every parameter track, with odd reflection
/// at the ends so linear trends pass unchanged.
pub fn smooth(seq: &MotionSequence, sigma: f64) -> Result<MotionSequence> {
    if sigma == 0.0 {
        return Ok(seq.clone());
    }
    let per = seq.params_per_frame();
    let n = seq.len();
    let x = seq.to_params();
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let at = |t: isize, p: usize| -> f64 {
        let last = n as isize - 1;
        if t < 0 {
            2.0 * x[p] - x[(-t) as usize * per + p]
        } else if t > last {
            2.0 * x[last as usize * per + p] - x[(2 * last - t) as usize * per + p]
        } else {
            x[t as usize * per + p]
        }
    };
    let mut y = vec![0.0; x.len()];
    for t in 0..n {
        for p in 0..per {
            y[t * per + p] = (-radius..=radius)
                .zip(&kernel)
                .map(|(k, w)| w * at(t as isize + k, p))
                .sum::<f64>()
                / norm;
        }
    }
    seq.with_params(&y)
}
