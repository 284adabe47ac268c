//! Refinement energy and its analytic gradient.
//!
//! ```text
//! E = λ_V E_V + λ_A E_A + λ_K E_K + λ_jerk E_jerk + λ_reg E_reg
//! ```
//!
//! `E_V`, `E_A` and `E_K` compare camera-frame velocities, accelerations and
//! projected keypoints of the predicted joints against their targets; each
//! squared residual is scaled by the prediction confidence (the minimum over
//! the frames a stencil touches). They are averaged over frames and over
//! predicted joints. `E_jerk` is the mean squared third difference of all
//! world joints. `E_reg` is the squared deviation from the anchor per frame,
//! with the joint rotations averaged over joints and the root orientation and
//! translation counted once, then averaged over frames.
//!
//! Gradients are hand-derived: stencil and projection adjoints accumulate onto
//! world joint positions, which [`Skeleton::fk_backward`] pulls back onto the
//! pose parameters. Parameters are laid out frame-major as
//! `[theta (3J), root_orient (3), root_trans (3)]`.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::body::{FkCache, FramePose, Skeleton};
use crate::dynamics::DynamicsPredictions;
use crate::error::{ensure_len, Error, Result};
use crate::geom::{AxisAngle, Camera};
use crate::motion::MotionSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyWeights {
    #[serde(alias = "lambda_V")]
    pub lambda_v: f64,
    #[serde(alias = "lambda_A")]
    pub lambda_a: f64,
    #[serde(alias = "lambda_K")]
    pub lambda_k: f64,
    pub lambda_jerk: f64,
    pub lambda_reg: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        EnergyWeights {
            lambda_v: 1.0,
            lambda_a: 0.1,
            lambda_k: 1.0,
            lambda_jerk: 1e4,
            lambda_reg: 1e4,
        }
    }
}

impl EnergyWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_v, self.lambda_a, self.lambda_k, self.lambda_jerk, self.lambda_reg];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("energy weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Only the regularizer active.
    pub fn reg_only(lambda_reg: f64) -> Self {
        EnergyWeights {
            lambda_v: 0.0,
            lambda_a: 0.0,
            lambda_k: 0.0,
            lambda_jerk: 0.0,
            lambda_reg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub e_v: f64,
    pub e_a: f64,
    pub e_k: f64,
    pub e_jerk: f64,
    pub e_reg: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.e_v, self.e_a, self.e_k, self.e_jerk, self.e_reg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Everything the energy needs: current motion, its anchor and the evidence.
#[derive(Debug, Clone)]
pub struct RefinementState {
    pub current: MotionSequence,
    pub anchor: MotionSequence,
    pub skeleton: Skeleton,
    pub camera: Camera,
    pub predictions: DynamicsPredictions,
}

pub fn evaluate(state: &RefinementState, w: &EnergyWeights) -> Result<EnergyBreakdown> {
    let model = EnergyModel::new(&state.anchor, &state.skeleton, &state.camera, &state.predictions, *w)?;
    model.check_compatible(&state.current)?;
    model.evaluate(&state.current.to_params())
}

/// Gradient of [`evaluate`] w.r.t. the flattened parameters of `state.current`.
pub fn gradient(state: &RefinementState, w: &EnergyWeights) -> Result<Vec<f64>> {
    let model = EnergyModel::new(&state.anchor, &state.skeleton, &state.camera, &state.predictions, *w)?;
    model.check_compatible(&state.current)?;
    Ok(model.evaluate_with_gradient(&state.current.to_params())?.1)
}

/// Energy bound to fixed evidence and anchor, evaluated on flat parameter vectors.
#[derive(Debug, Clone)]
pub struct EnergyModel<'a> {
    skeleton: Skeleton,
    camera: &'a Camera,
    predictions: &'a DynamicsPredictions,
    anchor: Vec<f64>,
    frames: usize,
    joints: usize,
    dt: f64,
    weights: EnergyWeights,
}

impl<'a> EnergyModel<'a> {
    pub fn new(
        anchor: &MotionSequence,
        skeleton: &Skeleton,
        camera: &'a Camera,
        predictions: &'a DynamicsPredictions,
        weights: EnergyWeights,
    ) -> Result<Self> {
        weights.validate()?;
        anchor.validate()?;
        ensure_len("jerk term", 4, anchor.len())?;
        if anchor.joint_count() != skeleton.joint_count() {
            return Err(Error::invalid(format!(
                "motion has {} joints, skeleton has {}",
                anchor.joint_count(),
                skeleton.joint_count()
            )));
        }
        camera.check_frames(anchor.len())?;
        predictions.validate()?;
        predictions.check_compatible(anchor.len(), skeleton)?;
        Ok(EnergyModel {
            skeleton: skeleton.apply_shape(&anchor.beta)?,
            camera,
            predictions,
            anchor: anchor.to_params(),
            frames: anchor.len(),
            joints: anchor.joint_count(),
            dt: anchor.dt,
            weights,
        })
    }

    pub fn weights(&self) -> &EnergyWeights {
        &self.weights
    }

    pub fn param_count(&self) -> usize {
        self.anchor.len()
    }

    fn per_frame(&self) -> usize {
        3 * self.joints + 6
    }

    fn check_compatible(&self, seq: &MotionSequence) -> Result<()> {
        if seq.len() != self.frames || seq.joint_count() != self.joints {
            return Err(Error::invalid("current and anchor motions differ in shape"));
        }
        Ok(())
    }

    fn pose(&self, chunk: &[f64]) -> FramePose {
        let n = self.joints;
        let v = |i: usize| Vector3::new(chunk[i], chunk[i + 1], chunk[i + 2]);
        FramePose {
            theta: (0..n).map(|j| AxisAngle(v(3 * j))).collect(),
            root_orient: AxisAngle(v(3 * n)),
            root_trans: v(3 * n + 3),
        }
    }

    /// Per-parameter weights of the regularizer within one frame.
    fn reg_weights(&self) -> Vec<f64> {
        let mut w = vec![1.0 / self.joints as f64; self.per_frame()];
        w[3 * self.joints..].iter_mut().for_each(|x| *x = 1.0);
        w
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.anchor.len() {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, expected {}",
                params.len(),
                self.anchor.len()
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, params: &[f64]) -> Result<EnergyBreakdown> {
        self.run(params, false).map(|(b, _)| b)
    }

    pub fn evaluate_with_gradient(&self, params: &[f64]) -> Result<(EnergyBreakdown, Vec<f64>)> {
        self.run(params, true)
    }

    fn run(&self, params: &[f64], want_grad: bool) -> Result<(EnergyBreakdown, Vec<f64>)> {
        self.check_params(params)?;
        let t_len = self.frames;
        let nj = self.joints;
        let per = self.per_frame();
        let preds = self.predictions;
        let map = &preds.joint_map;
        let nk = map.len();
        let dt = self.dt;
        let dt2 = dt * dt;
        let w = &self.weights;

        let caches: Vec<FkCache> = params
            .chunks_exact(per)
            .map(|c| self.skeleton.fk_cached(&self.pose(c)))
            .collect::<Result<_>>()?;
        let cam_pts: Vec<Vec<Vector3<f64>>> = caches
            .iter()
            .zip(&self.camera.extrinsics)
            .map(|(c, e)| map.iter().map(|&j| e.apply(&c.positions[j])).collect())
            .collect();

        let mut g_cam = vec![vec![Vector3::zeros(); nk]; if want_grad { t_len } else { 0 }];
        let mut g_world = vec![vec![Vector3::zeros(); nj]; if want_grad { t_len } else { 0 }];

        // velocity consistency
        let c_v = 1.0 / ((t_len - 1) as f64 * nk as f64);
        let mut sum_v = 0.0;
        for i in 0..t_len - 1 {
            for k in 0..nk {
                let v = (cam_pts[i + 1][k] - cam_pts[i][k]) / dt;
                let r = v - preds.vel3d[i][k];
                let conf = preds.confidence[i][k].min(preds.confidence[i + 1][k]);
                sum_v += conf * r.norm_squared();
                if want_grad {
                    let g = r * (2.0 * w.lambda_v * c_v * conf / dt);
                    g_cam[i + 1][k] += g;
                    g_cam[i][k] -= g;
                }
            }
        }

        // acceleration consistency
        let c_a = 1.0 / ((t_len - 2) as f64 * nk as f64);
        let mut sum_a = 0.0;
        for i in 0..t_len - 2 {
            for k in 0..nk {
                let a = ((cam_pts[i + 2][k] - cam_pts[i + 1][k]) - (cam_pts[i + 1][k] - cam_pts[i][k])) / dt2;
                let r = a - preds.acc3d[i][k];
                let conf = preds.confidence[i][k]
                    .min(preds.confidence[i + 1][k])
                    .min(preds.confidence[i + 2][k]);
                sum_a += conf * r.norm_squared();
                if want_grad {
                    let g = r * (2.0 * w.lambda_a * c_a * conf / dt2);
                    g_cam[i + 2][k] += g;
                    g_cam[i + 1][k] -= 2.0 * g;
                    g_cam[i][k] += g;
                }
            }
        }

        // 2D keypoints
        let c_k = 1.0 / (t_len as f64 * nk as f64);
        let mut sum_k = 0.0;
        for t in 0..t_len {
            for k in 0..nk {
                let pc = &cam_pts[t][k];
                let u = self.camera.project_camera_point(t, pc).map_err(|e| e.with_joint(map[k]))?;
                let r: Vector2<f64> = u - preds.keypoints2d[t][k];
                let conf = preds.confidence[t][k];
                sum_k += conf * r.norm_squared();
                if want_grad {
                    let g = r * (2.0 * w.lambda_k * c_k * conf);
                    g_cam[t][k] += self.camera.projection_jacobian(pc).transpose() * g;
                }
            }
        }

        // jerk over all world joints
        let c_j = 1.0 / ((t_len - 3) as f64 * nj as f64);
        let mut sum_j = 0.0;
        for i in 0..t_len - 3 {
            for j in 0..nj {
                let p = |f: usize| caches[i + f].positions[j];
                let r = (p(3) - p(0)) - 3.0 * (p(2) - p(1));
                sum_j += r.norm_squared();
                if want_grad {
                    let g = r * (2.0 * w.lambda_jerk * c_j);
                    g_world[i + 3][j] += g;
                    g_world[i][j] -= g;
                    g_world[i + 2][j] -= 3.0 * g;
                    g_world[i + 1][j] += 3.0 * g;
                }
            }
        }

        // regularization
        let c_r = 1.0 / t_len as f64;
        let reg_w = self.reg_weights();
        let sum_r: f64 = params
            .iter()
            .zip(&self.anchor)
            .zip(reg_w.iter().cycle())
            .map(|((x, a), w)| w * (x - a) * (x - a))
            .sum();

        let e_v = c_v * sum_v;
        let e_a = c_a * sum_a;
        let e_k = c_k * sum_k;
        let e_jerk = c_j * sum_j;
        let e_reg = c_r * sum_r;
        let breakdown = EnergyBreakdown {
            e_v,
            e_a,
            e_k,
            e_jerk,
            e_reg,
            total: w.lambda_v * e_v + w.lambda_a * e_a + w.lambda_k * e_k + w.lambda_jerk * e_jerk + w.lambda_reg * e_reg,
        };
        if !want_grad {
            return Ok((breakdown, Vec::new()));
        }

        let mut grad = vec![0.0; params.len()];
        for t in 0..t_len {
            let rt = self.camera.extrinsics[t].rotation.matrix().transpose();
            for (k, &j) in map.iter().enumerate() {
                g_world[t][j] += rt * g_cam[t][k];
            }
            let pg = self.skeleton.fk_backward(&caches[t], &g_world[t]);
            let out = &mut grad[t * per..(t + 1) * per];
            for (j, g) in pg.theta.iter().enumerate() {
                out[3 * j..3 * j + 3].copy_from_slice(g.as_slice());
            }
            out[3 * nj..3 * nj + 3].copy_from_slice(pg.root_orient.as_slice());
            out[3 * nj + 3..3 * nj + 6].copy_from_slice(pg.root_trans.as_slice());
        }
        let s = 2.0 * w.lambda_reg * c_r;
        for (((g, x), a), rw) in grad.iter_mut().zip(params).zip(&self.anchor).zip(reg_w.iter().cycle()) {
            *g += s * rw * (x - a);
        }
        Ok((breakdown, grad))
    }
}
