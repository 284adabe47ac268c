//! Scale calibration and Adam-based refinement.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::body::Skeleton;
use crate::dynamics::{velocity_field, DynamicsPredictions};
use crate::energy::{EnergyBreakdown, EnergyModel, EnergyWeights};
use crate::error::{ensure_len, Error, Result};
use crate::geom::Camera;
use crate::motion::{joints_camera, MotionSequence};

/// How the initial root trajectory is rescaled before optimizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Calibration {
    Off,
    /// [`calibrate_scale`]: ratio of mean predicted to mean induced joint speed.
    SpeedRatio,
    /// [`calibrate_translation_fit`] over the given number of frames.
    TranslationFit { window: usize },
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration::TranslationFit { window: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weights: EnergyWeights,
    pub record_trace: bool,
    pub calibration: Calibration,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 1e-3,
            epochs: 1500,
            warmup_epochs: 10,
            decay_epoch: 1000,
            decay_factor: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weights: EnergyWeights::default(),
            record_trace: true,
            calibration: Calibration::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::invalid("lr0 must be positive"));
        }
        if !(0 < self.warmup_epochs && self.warmup_epochs < self.decay_epoch && self.decay_epoch < self.epochs) {
            return Err(Error::invalid("need 0 < warmup_epochs < decay_epoch < epochs"));
        }
        if !(self.decay_factor > 0.0) || !self.decay_factor.is_finite() {
            return Err(Error::invalid("decay_factor must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("Adam constants out of range"));
        }
        if self.calibration == (Calibration::TranslationFit { window: 0 }) {
            return Err(Error::invalid("calibration window must be at least 1"));
        }
        self.weights.validate()
    }
}

pub fn learning_rate(epoch: usize, cfg: &OptimConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::invalid(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    Ok(if epoch < cfg.warmup_epochs {
        cfg.lr0 * (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else if epoch < cfg.decay_epoch {
        cfg.lr0
    } else {
        cfg.lr0 * cfg.decay_factor
    })
}

pub const SCALE_MIN: f64 = 0.2;
pub const SCALE_MAX: f64 = 5.0;

fn clamp_scale(num: f64, den: f64) -> f64 {
    if !(den >= 1e-8) || !num.is_finite() {
        return 1.0;
    }
    (num / den).clamp(SCALE_MIN, SCALE_MAX)
}

/// Mean predicted camera-frame joint speed over mean induced speed, clamped
/// to `[SCALE_MIN, SCALE_MAX]`; 1 when the motion is stationary or the inputs
/// do not fit together.
pub fn calibrate_scale(init_world: &MotionSequence, skel: &Skeleton, cam: &Camera, preds: &DynamicsPredictions) -> f64 {
    let run = || -> Result<f64> {
        ensure_len("scale calibration", 2, init_world.len())?;
        preds.check_compatible(init_world.len(), skel)?;
        let cam_joints = joints_camera(init_world, skel, cam)?.select(&preds.joint_map);
        let induced = velocity_field(&cam_joints, init_world.dt)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for (vi, vp) in induced.iter().zip(&preds.vel3d) {
            for (a, b) in vi.iter().zip(vp) {
                den += a.norm();
                num += b.norm();
            }
        }
        Ok(clamp_scale(num, den))
    };
    run().unwrap_or(1.0)
}

/// Least-squares scale of the root-translation part of camera-frame joint
/// displacements over `window` frames.
///
/// Each induced displacement splits into the part carried by the rotated root
/// translation and the rest; `s` minimizes the distance between
/// `rest + s·translation` and the displacement obtained by integrating the
/// predicted velocities over the window. Clamped like [`calibrate_scale`].
pub fn calibrate_translation_fit(
    init_world: &MotionSequence,
    skel: &Skeleton,
    cam: &Camera,
    preds: &DynamicsPredictions,
    window: usize,
) -> Result<f64> {
    ensure_len("scale calibration", 2, init_world.len())?;
    preds.check_compatible(init_world.len(), skel)?;
    cam.check_frames(init_world.len())?;
    let window = window.clamp(1, init_world.len() - 1);
    let pos = joints_camera(init_world, skel, cam)?.select(&preds.joint_map).positions;
    let rotated: Vec<Vector3<f64>> = init_world
        .frames
        .iter()
        .zip(&cam.extrinsics)
        .map(|(f, e)| e.rotation.matrix() * f.root_trans)
        .collect();
    let dt = init_world.dt;
    let mut num = 0.0;
    let mut den = 0.0;
    for t in 0..pos.len() - window {
        let trans = rotated[t + window] - rotated[t];
        for k in 0..pos[t].len() {
            let predicted = (t..t + window).map(|i| preds.vel3d[i][k]).sum::<Vector3<f64>>() * dt;
            let rest = (pos[t + window][k] - pos[t][k]) - trans;
            num += (predicted - rest).dot(&trans);
            den += trans.norm_squared();
        }
    }
    Ok(clamp_scale(num, den))
}

/// Scales the root trajectory by `s` about its centroid.
pub fn apply_scale(seq: &MotionSequence, s: f64) -> MotionSequence {
    let mut out = seq.clone();
    if s != 1.0 && !seq.is_empty() {
        let c = seq.frames.iter().map(|f| f.root_trans).sum::<Vector3<f64>>() / seq.len() as f64;
        for f in out.frames.iter_mut() {
            f.root_trans = c + s * (f.root_trans - c);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    pub lr: f64,
    pub energy: EnergyBreakdown,
}

#[derive(Debug, Clone)]
pub struct RefinementResult {
    pub refined: MotionSequence,
    pub scale: f64,
    pub trace: Option<Vec<TraceEntry>>,
    pub final_energy: EnergyBreakdown,
    pub final_grad_norm: f64,
    pub wall_time: f64,
}

/// Calibrates, then runs Adam on all frames jointly.
///
/// The anchor of the regularizer is the calibrated initialization.
pub fn refine(
    init_world: &MotionSequence,
    skel: &Skeleton,
    cam: &Camera,
    preds: &DynamicsPredictions,
    cfg: &OptimConfig,
) -> Result<RefinementResult> {
    let start = Instant::now();
    cfg.validate()?;
    init_world.validate()?;
    ensure_len("jerk term", 4, init_world.len())?;
    let scale = match cfg.calibration {
        Calibration::Off => 1.0,
        Calibration::SpeedRatio => calibrate_scale(init_world, skel, cam, preds),
        Calibration::TranslationFit { window } => calibrate_translation_fit(init_world, skel, cam, preds, window)?,
    };
    let anchor = apply_scale(init_world, scale);
    let model = EnergyModel::new(&anchor, skel, cam, preds, cfg.weights)?;

    let mut x = anchor.to_params();
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let mut trace = cfg.record_trace.then(|| Vec::with_capacity(cfg.epochs));
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let mut b1t = 1.0;
    let mut b2t = 1.0;
    for epoch in 0..cfg.epochs {
        let lr = learning_rate(epoch, cfg)?;
        let (energy, grad) = model.evaluate_with_gradient(&x).map_err(|e| diverged_after_start(e, epoch))?;
        if !energy.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        if let Some(t) = trace.as_mut() {
            t.push(TraceEntry { epoch, lr, energy });
        }
        b1t *= b1;
        b2t *= b2;
        for i in 0..x.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1t);
            let vh = v[i] / (1.0 - b2t);
            x[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
    let (final_energy, grad) = model.evaluate_with_gradient(&x).map_err(|e| diverged_after_start(e, cfg.epochs))?;
    if !final_energy.is_finite() {
        return Err(Error::Diverged { epoch: cfg.epochs });
    }
    Ok(RefinementResult {
        refined: anchor.with_params(&x)?,
        scale,
        trace,
        final_energy,
        final_grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Points pushed behind the camera by an update mean the iteration blew up.
fn diverged_after_start(e: Error, epoch: usize) -> Error {
    match e {
        Error::BehindCamera { .. } if epoch > 0 => Error::Diverged { epoch },
        other => other,
    }
}

pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("epoch,E_V,E_A,E_K,E_jerk,E_reg,total,lr\n");
    for t in trace {
        let e = &t.energy;
        let _ = writeln!(out, "{},{},{},{},{},{},{},{}", t.epoch, e.e_v, e.e_a, e.e_k, e.e_jerk, e.e_reg, e.total, t.lr);
    }
    out
}

/// Trailing moving average of the total energy.
pub fn moving_average(trace: &[TraceEntry], window: usize) -> Vec<f64> {
    trace
        .windows(window.max(1))
        .map(|w| w.iter().map(|t| t.energy.total).sum::<f64>() / w.len() as f64)
        .collect()
}
