//! Contact stabilization: stationary-probability targets for end effectors
//! and a per-frame damped least-squares IK pass that pulls them there.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::body::{JointPositions, Skeleton};
use crate::dynamics::DynamicsPredictions;
use crate::error::{ensure_len, Error, Result};
use crate::geom::AxisAngle;
use crate::motion::MotionSequence;

/// Error below which an effector counts as on target.
pub const REACHED_TOLERANCE: f64 = 1e-3;

const SKIP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactConfig {
    /// Speed threshold in m/s.
    pub xi_v: f64,
    /// Defaults to the skeleton's end effectors.
    pub end_effectors: Option<Vec<usize>>,
    pub ik_iterations: usize,
    /// Minimum damping; the solver raises it on rejected steps.
    pub ik_damping: f64,
    /// Stop once an accepted update moves the effector less than this (meters).
    pub ik_step_tolerance: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        ContactConfig {
            xi_v: 0.1,
            end_effectors: None,
            ik_iterations: 20,
            ik_damping: 1e-2,
            ik_step_tolerance: 1e-4,
        }
    }
}

impl ContactConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi_v > 0.0) || !self.xi_v.is_finite() {
            return Err(Error::invalid("xi_v must be positive"));
        }
        if self.ik_iterations == 0 || !(self.ik_damping > 0.0) || !(self.ik_step_tolerance > 0.0) {
            return Err(Error::invalid("IK parameters must be positive"));
        }
        Ok(())
    }

    pub fn effectors(&self, skel: &Skeleton) -> Result<Vec<usize>> {
        let list = self.end_effectors.clone().unwrap_or_else(|| skel.end_effectors.clone());
        if let Some(&e) = list.iter().find(|&&e| e >= skel.joint_count()) {
            return Err(Error::invalid(format!("end effector {e} out of range")));
        }
        Ok(list)
    }
}

pub fn stationary_probability(speed: f64, xi_v: f64) -> Result<f64> {
    if !(speed >= 0.0) {
        return Err(Error::invalid(format!("speed must be non-negative, got {speed}")));
    }
    if !(xi_v > 0.0) {
        return Err(Error::invalid("xi_v must be positive"));
    }
    Ok((1.0 - speed / xi_v).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactTargets {
    pub effectors: Vec<usize>,
    /// `[frame][effector]`
    pub p_s: Vec<Vec<f64>>,
    /// `[frame][effector]`, world frame.
    pub targets: Vec<Vec<Vector3<f64>>>,
}

/// Index into the predictions used for `joint`: the joint itself if it is
/// predicted, else its nearest predicted ancestor.
fn predicted_source(skel: &Skeleton, preds: &DynamicsPredictions, joint: usize) -> Result<usize> {
    skel.ancestry(joint)
        .iter()
        .rev()
        .find_map(|j| preds.joint_map.iter().position(|m| m == j))
        .ok_or_else(|| Error::invalid(format!("joint {joint} has no predicted ancestor")))
}

/// Blends each effector between this frame and the next by its stationary
/// probability: `p_s·J^t + (1−p_s)·J^{t+1}`.
///
/// The speed at frame `t` is the predicted camera-frame speed arriving at `t`
/// (the first frame uses the first prediction); the last frame has no
/// successor and keeps `p_s = 1`.
pub fn contact_targets(
    joints: &JointPositions,
    preds: &DynamicsPredictions,
    skel: &Skeleton,
    cfg: &ContactConfig,
) -> Result<ContactTargets> {
    cfg.validate()?;
    ensure_len("contact targets", 2, joints.frames())?;
    if joints.joints() != skel.joint_count() {
        return Err(Error::invalid("joint positions do not match the skeleton"));
    }
    preds.check_compatible(joints.frames(), skel)?;
    let effectors = cfg.effectors(skel)?;
    let sources = effectors
        .iter()
        .map(|&e| predicted_source(skel, preds, e))
        .collect::<Result<Vec<_>>>()?;
    let t_len = joints.frames();
    let mut p_s = Vec::with_capacity(t_len);
    let mut targets = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut pr = Vec::with_capacity(effectors.len());
        let mut tr = Vec::with_capacity(effectors.len());
        for (&e, &k) in effectors.iter().zip(&sources) {
            let here = joints.positions[t][e];
            if t + 1 == t_len {
                pr.push(1.0);
                tr.push(here);
                continue;
            }
            let speed = preds.vel3d[t.saturating_sub(1)][k].norm();
            let p = stationary_probability(speed, cfg.xi_v)?;
            pr.push(p);
            tr.push(p * here + (1.0 - p) * joints.positions[t + 1][e]);
        }
        p_s.push(pr);
        targets.push(tr);
    }
    Ok(ContactTargets { effectors, p_s, targets })
}

/// Rotations that move `effector` and no other listed effector: its strict
/// ancestors below the root that are not shared with another effector.
pub fn ik_chain(skel: &Skeleton, effector: usize, all: &[usize]) -> Vec<usize> {
    let anc = skel.ancestry(effector);
    anc[..anc.len() - 1]
        .iter()
        .copied()
        .filter(|&a| skel.parent(a).is_some())
        .filter(|&a| all.iter().all(|&o| o == effector || (o != a && !skel.is_ancestor(a, o))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkReportRow {
    pub frame: usize,
    pub effector: usize,
    pub p_s: f64,
    pub pre_error: f64,
    pub post_error: f64,
    pub reached: bool,
}

#[derive(Debug, Clone)]
pub struct IkOutcome {
    pub motion: MotionSequence,
    pub report: Vec<IkReportRow>,
}

impl IkOutcome {
    pub fn report_csv(&self) -> String {
        let mut out = String::from("frame,effector,p_s,pre_error,post_error,reached\n");
        for r in &self.report {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.frame, r.effector, r.p_s, r.pre_error, r.post_error, r.reached);
        }
        out
    }
}

/// Per-frame damped least-squares IK toward `targets`.
///
/// Only each effector's own chain ([`ik_chain`]) moves; root orientation and
/// translation are frozen. A step is kept only if it lowers that effector's
/// error, so no effector ends farther from its target than it started.
pub fn ik_refine(seq: &MotionSequence, skel: &Skeleton, targets: &ContactTargets, cfg: &ContactConfig) -> Result<IkOutcome> {
    cfg.validate()?;
    seq.validate()?;
    if targets.targets.len() != seq.len() || targets.p_s.len() != seq.len() {
        return Err(Error::invalid("contact targets do not cover the sequence"));
    }
    let shaped = skel.apply_shape(&seq.beta)?;
    let chains: Vec<Vec<usize>> = targets
        .effectors
        .iter()
        .map(|&e| ik_chain(&shaped, e, &targets.effectors))
        .collect();
    let mut out = seq.clone();
    let mut report = Vec::with_capacity(seq.len() * targets.effectors.len());
    for (t, frame) in out.frames.iter_mut().enumerate() {
        for (i, &e) in targets.effectors.iter().enumerate() {
            let target = targets.targets[t][i];
            let pre = (shaped.forward_kinematics(frame)?[e] - target).norm();
            let post = if pre < SKIP_TOLERANCE {
                pre
            } else {
                solve_effector(&shaped, frame, e, &chains[i], &target, pre, cfg)?
            };
            report.push(IkReportRow {
                frame: t,
                effector: e,
                p_s: targets.p_s[t][i],
                pre_error: pre,
                post_error: post,
                reached: post <= REACHED_TOLERANCE,
            });
        }
    }
    Ok(IkOutcome { motion: out, report })
}

fn solve_effector(
    skel: &Skeleton,
    frame: &mut crate::body::FramePose,
    effector: usize,
    chain: &[usize],
    target: &Vector3<f64>,
    mut error: f64,
    cfg: &ContactConfig,
) -> Result<f64> {
    if chain.is_empty() {
        return Ok(error);
    }
    let n = 3 * chain.len();
    let floor = cfg.ik_damping * cfg.ik_damping;
    let mut mu = floor;
    for _ in 0..cfg.ik_iterations {
        let cache = skel.fk_cached(frame)?;
        let residual = target - cache.positions[effector];
        let mut jac = DMatrix::zeros(3, n);
        for axis in 0..3 {
            let mut seed = vec![Vector3::zeros(); skel.joint_count()];
            seed[effector][axis] = 1.0;
            let g = skel.fk_backward(&cache, &seed);
            for (c, &j) in chain.iter().enumerate() {
                for k in 0..3 {
                    jac[(axis, 3 * c + k)] = g.theta[j][k];
                }
            }
        }
        let jjt: Matrix3<f64> = (&jac * jac.transpose()).fixed_view::<3, 3>(0, 0).into_owned();

        // Levenberg-Marquardt damping: raise on rejection, relax on success.
        let saved: Vec<AxisAngle> = chain.iter().map(|&j| frame.theta[j]).collect();
        let mut improved = None;
        for _ in 0..16 {
            let Some(inv) = (jjt + Matrix3::identity() * mu).try_inverse() else {
                mu *= 10.0;
                continue;
            };
            let y = inv * residual;
            let delta: DVector<f64> = jac.transpose() * DVector::from_column_slice(y.as_slice());
            for (c, &j) in chain.iter().enumerate() {
                frame.theta[j].0 = saved[c].0 + Vector3::new(delta[3 * c], delta[3 * c + 1], delta[3 * c + 2]);
            }
            let moved = skel.forward_kinematics(frame)?[effector];
            let e_new = (moved - target).norm();
            if e_new < error {
                improved = Some((e_new, (moved - cache.positions[effector]).norm()));
                mu = (mu * 0.1).max(floor);
                break;
            }
            mu *= 10.0;
        }
        match improved {
            Some((e_new, step)) => {
                error = e_new;
                if step < cfg.ik_step_tolerance {
                    break;
                }
            }
            None => {
                for (c, &j) in chain.iter().enumerate() {
                    frame.theta[j] = saved[c];
                }
                break;
            }
        }
    }
    Ok(error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{Frame, FramePose, ShapeCoefficients};
    use crate::dynamics::{synth_oracle, NoiseConfig};
    use crate::synth::{synthesize, Scenario, SynthConfig};
    use crate::motion::joints_world;
    use proptest::prelude::{prop_assert, proptest};

    fn arm() -> Skeleton {
        Skeleton::new(
            vec![None, Some(0), Some(1), Some(2)],
            vec![Vector3::zeros(), Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)],
            ["root", "shoulder", "elbow", "wrist"].map(String::from).to_vec(),
            vec![3],
        )
        .unwrap()
    }

    fn arm_seq(elbow: f64) -> MotionSequence {
        let mut pose = FramePose::rest(4);
        pose.theta[2] = AxisAngle::new(0.0, 0.0, elbow);
        MotionSequence::new(1.0 / 30.0, Frame::World, ShapeCoefficients(vec![]), vec![pose]).unwrap()
    }

    fn single_target(t: Vector3<f64>) -> ContactTargets {
        ContactTargets { effectors: vec![3], p_s: vec![vec![1.0]], targets: vec![vec![t]] }
    }

    #[test]
    fn probability_values() {
        for (s, p) in [(0.0, 1.0), (0.05, 0.5), (0.1, 0.0), (0.2, 0.0)] {
            assert_eq!(stationary_probability(s, 0.1).unwrap(), p);
        }
        assert!(stationary_probability(-0.1, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn probability_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (pl, ph) = (stationary_probability(lo, 0.1).unwrap(), stationary_probability(hi, 0.1).unwrap());
            prop_assert!(pl >= ph && (0.0..=1.0).contains(&pl) && (0.0..=1.0).contains(&ph));
        }
    }

    #[test]
    fn chains_are_disjoint() {
        let s = Skeleton::smpl24();
        let eff = s.end_effectors.clone();
        assert_eq!(ik_chain(&s, 10, &eff), vec![1, 4, 7]);
        assert_eq!(ik_chain(&s, 11, &eff), vec![2, 5, 8]);
        assert_eq!(ik_chain(&s, 22, &eff), vec![13, 16, 18, 20]);
        assert_eq!(ik_chain(&arm(), 3, &[3]), vec![1, 2]);
    }

    #[test]
    fn planar_reach() {
        let target = Vector3::new(1.2, 0.9, 0.0);
        let out = ik_refine(&arm_seq(0.5), &arm(), &single_target(target), &ContactConfig::default()).unwrap();
        let row = &out.report[0];
        assert!(row.post_error < 1e-3 && row.reached, "{row:?}");
        let p = arm().forward_kinematics(&out.motion.frames[0]).unwrap();
        assert!((p[3] - target).norm() < 1e-3);
        assert!(((p[2] - p[1]).norm() - 1.0).abs() < 1e-12);
        assert!(((p[3] - p[2]).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unreachable_target_extends_toward_it() {
        let target = Vector3::new(3.0, 2.0, 0.0);
        let out = ik_refine(&arm_seq(0.7), &arm(), &single_target(target), &ContactConfig::default()).unwrap();
        let p = arm().forward_kinematics(&out.motion.frames[0]).unwrap();
        let ideal = target.normalize() * 2.0;
        assert!((p[3] - ideal).norm() < 1e-3, "{:?}", p[3]);
        assert!(!out.report[0].reached);
        assert!(out.report[0].post_error <= out.report[0].pre_error);
    }

    #[test]
    fn matching_targets_change_nothing() {
        let seq = arm_seq(0.4);
        let here = arm().forward_kinematics(&seq.frames[0]).unwrap()[3];
        let out = ik_refine(&seq, &arm(), &single_target(here), &ContactConfig::default()).unwrap();
        assert_eq!(out.motion, seq);
    }

    #[test]
    fn targets_blend() {
        let s = synthesize(Scenario::SineWalk, &SynthConfig { frames: 12, ..Default::default() }).unwrap();
        let j = joints_world(&s.gt, &s.skeleton).unwrap();
        let mut preds = s.predictions.clone();
        let cfg = ContactConfig::default();
        for (speed, check) in [(0.0, 0.0), (1.0, 1.0), (0.05, 0.5)] {
            preds.vel3d.iter_mut().flatten().for_each(|v| *v = Vector3::new(speed, 0.0, 0.0));
            let tg = contact_targets(&j, &preds, &s.skeleton, &cfg).unwrap();
            for t in 0..11 {
                for (i, &e) in tg.effectors.iter().enumerate() {
                    let want = (1.0 - check) * j.positions[t][e] + check * j.positions[t + 1][e];
                    assert!((tg.targets[t][i] - want).norm() < 1e-12);
                }
            }
            assert!(tg.targets[11].iter().zip(&tg.effectors).all(|(p, &e)| *p == j.positions[11][e]));
        }
    }

    #[test]
    fn targets_are_convex() {
        let s = synthesize(Scenario::Squat, &SynthConfig { frames: 30, ..Default::default() }).unwrap();
        let j = joints_world(&s.init, &s.skeleton).unwrap();
        let tg = contact_targets(&j, &s.predictions, &s.skeleton, &ContactConfig::default()).unwrap();
        for t in 0..29 {
            for (i, &e) in tg.effectors.iter().enumerate() {
                let (a, b) = (j.positions[t][e], j.positions[t + 1][e]);
                let p = tg.targets[t][i];
                let d = (p - a).norm() + (b - p).norm() - (b - a).norm();
                assert!(d.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn squat_ik_never_worse() {
        let s = synthesize(Scenario::Squat, &SynthConfig { frames: 40, ..Default::default() }).unwrap();
        let j = joints_world(&s.init, &s.skeleton).unwrap();
        let preds = synth_oracle(&s.gt, &s.skeleton, &s.camera, &NoiseConfig::default()).unwrap();
        let tg = contact_targets(&j, &preds, &s.skeleton, &ContactConfig::default()).unwrap();
        let out = ik_refine(&s.init, &s.skeleton, &tg, &ContactConfig::default()).unwrap();
        assert!(out.report.iter().all(|r| r.post_error <= r.pre_error));
        let csv = out.report_csv();
        assert_eq!(csv.lines().count(), 1 + 40 * 4);
        for (a, b) in out.motion.frames.iter().zip(&s.init.frames) {
            assert_eq!(a.root_trans, b.root_trans);
            assert_eq!(a.root_orient, b.root_orient);
        }
    }
}
