//! Motion sequences, camera/world lifting and the motion file format.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::body::{Frame, FramePose, JointPositions, ShapeCoefficients, Skeleton};
use crate::error::{Error, Result};
use crate::geom::{AxisAngle, Camera};

pub const DEFAULT_DT: f64 = 1.0 / 30.0;

/// Per-frame pose parameters plus time-invariant shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub dt: f64,
    pub frame_tag: Frame,
    pub beta: ShapeCoefficients,
    pub frames: Vec<FramePose>,
}

impl MotionSequence {
    pub fn new(dt: f64, frame_tag: Frame, beta: ShapeCoefficients, frames: Vec<FramePose>) -> Result<Self> {
        let seq = MotionSequence {
            dt,
            frame_tag,
            beta,
            frames,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid("dt must be positive"));
        }
        if self.frames.is_empty() {
            return Err(Error::invalid("motion needs at least one frame"));
        }
        let j = self.frames[0].theta.len();
        for (t, f) in self.frames.iter().enumerate() {
            if f.theta.len() != j {
                return Err(Error::invalid(format!("frame {t} has {} rotations, expected {j}", f.theta.len())));
            }
            let finite = f.theta.iter().all(AxisAngle::is_finite)
                && f.root_orient.is_finite()
                && f.root_trans.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::invalid(format!("frame {t} has non-finite parameters")));
            }
        }
        if !self.beta.0.iter().all(|b| b.is_finite()) {
            return Err(Error::invalid("non-finite shape coefficient"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.theta.len())
    }

    /// Number of optimized parameters per frame: `3J + 3 + 3`.
    pub fn params_per_frame(&self) -> usize {
        3 * self.joint_count() + 6
    }

    /// Flattens `{theta, root_orient, root_trans}` frame by frame.
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.params_per_frame());
        for f in &self.frames {
            for aa in &f.theta {
                out.extend(aa.0.iter());
            }
            out.extend(f.root_orient.0.iter());
            out.extend(f.root_trans.iter());
        }
        out
    }

    /// Copy of `self` with parameters replaced from a flat vector.
    pub fn with_params(&self, params: &[f64]) -> Result<MotionSequence> {
        let per = self.params_per_frame();
        if params.len() != per * self.len() {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, expected {}",
                params.len(),
                per * self.len()
            )));
        }
        let mut out = self.clone();
        for (f, chunk) in out.frames.iter_mut().zip(params.chunks_exact(per)) {
            for (j, aa) in f.theta.iter_mut().enumerate() {
                aa.0 = Vector3::new(chunk[3 * j], chunk[3 * j + 1], chunk[3 * j + 2]);
            }
            let n = 3 * f.theta.len();
            f.root_orient.0 = Vector3::new(chunk[n], chunk[n + 1], chunk[n + 2]);
            f.root_trans = Vector3::new(chunk[n + 3], chunk[n + 4], chunk[n + 5]);
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MotionSequence::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MotionFile = serde_json::from_str(text).map_err(|e| Error::parse("motion", e.to_string()))?;
        let frames = file
            .frames
            .into_iter()
            .map(|f| FramePose {
                theta: f.theta.into_iter().map(|v| AxisAngle(Vector3::from(v))).collect(),
                root_orient: AxisAngle(Vector3::from(f.root_orient)),
                root_trans: Vector3::from(f.root_trans),
            })
            .collect();
        MotionSequence::new(
            file.dt.unwrap_or(DEFAULT_DT),
            file.frame_tag,
            ShapeCoefficients(file.beta),
            frames,
        )
        .map_err(|e| Error::parse("motion", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let file = MotionFile {
            dt: Some(self.dt),
            frame_tag: self.frame_tag,
            beta: self.beta.0.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| FrameFile {
                    theta: f.theta.iter().map(|aa| aa.0.into()).collect(),
                    root_orient: f.root_orient.0.into(),
                    root_trans: f.root_trans.into(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("motion serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MotionFile {
    #[serde(default)]
    dt: Option<f64>,
    frame_tag: Frame,
    #[serde(default)]
    beta: Vec<f64>,
    frames: Vec<FrameFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameFile {
    theta: Vec<[f64; 3]>,
    root_orient: [f64; 3],
    root_trans: [f64; 3],
}

fn require_tag(seq: &MotionSequence, tag: Frame) -> Result<()> {
    if seq.frame_tag != tag {
        return Err(Error::invalid(format!("expected a {tag:?}-frame sequence, got {:?}", seq.frame_tag)));
    }
    Ok(())
}

/// Lifts a camera-frame sequence to world coordinates.
///
/// The camera stores world-to-camera extrinsics; their per-frame inverses
/// `{R_c, t_c}` are the camera-to-world poses used here:
/// `Gamma_w = R_c Gamma_c`, `tau_w = t_c + R_c (tau_c + t_root) - t_root`.
pub fn camera_to_world(seq_cam: &MotionSequence, cam: &Camera, skel: &Skeleton) -> Result<MotionSequence> {
    require_tag(seq_cam, Frame::Camera)?;
    cam.check_frames(seq_cam.len())?;
    let t_root = skel.t_root;
    let mut out = seq_cam.clone();
    for (f, ext) in out.frames.iter_mut().zip(&cam.extrinsics) {
        let c2w = ext.inverse();
        let orient = c2w.rotation.compose(&f.root_orient.to_matrix()?);
        f.root_orient = orient.to_axis_angle()?;
        f.root_trans = c2w.translation + (c2w.rotation.matrix() * (f.root_trans + t_root) - t_root);
    }
    out.frame_tag = Frame::World;
    Ok(out)
}

/// Exact inverse of [`camera_to_world`].
pub fn world_to_camera(seq_world: &MotionSequence, cam: &Camera, skel: &Skeleton) -> Result<MotionSequence> {
    require_tag(seq_world, Frame::World)?;
    cam.check_frames(seq_world.len())?;
    let t_root = skel.t_root;
    let mut out = seq_world.clone();
    for (f, ext) in out.frames.iter_mut().zip(&cam.extrinsics) {
        let orient = ext.rotation.compose(&f.root_orient.to_matrix()?);
        f.root_orient = orient.to_axis_angle()?;
        f.root_trans = ext.rotation.matrix() * (f.root_trans + t_root) + ext.translation - t_root;
    }
    out.frame_tag = Frame::Camera;
    Ok(out)
}

fn stacked_fk(seq: &MotionSequence, skel: &Skeleton) -> Result<Vec<Vec<Vector3<f64>>>> {
    let shaped = skel.apply_shape(&seq.beta)?;
    seq.frames.iter().map(|f| shaped.forward_kinematics(f)).collect()
}

/// Forward kinematics of a world-frame sequence, frame by frame.
pub fn joints_world(seq: &MotionSequence, skel: &Skeleton) -> Result<JointPositions> {
    require_tag(seq, Frame::World)?;
    JointPositions::new(Frame::World, stacked_fk(seq, skel)?)
}

/// World joints mapped through the stored world-to-camera extrinsics.
pub fn joints_camera(seq: &MotionSequence, skel: &Skeleton, cam: &Camera) -> Result<JointPositions> {
    let world = joints_world(seq, skel)?;
    world_joints_to_camera(&world, cam)
}

pub fn world_joints_to_camera(world: &JointPositions, cam: &Camera) -> Result<JointPositions> {
    if world.frame != Frame::World {
        return Err(Error::invalid("expected world-frame joints"));
    }
    cam.check_frames(world.frames())?;
    let positions = world
        .positions
        .iter()
        .zip(&cam.extrinsics)
        .map(|(f, e)| f.iter().map(|p| e.apply(p)).collect())
        .collect();
    Ok(JointPositions {
        frame: Frame::Camera,
        positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{axis_angle_to_matrix, RigidTransform};
    use rand::{Rng, SeedableRng};
    use std::f64::consts::FRAC_PI_2;

    fn random_seq(rng: &mut impl Rng, frames: usize, joints: usize, tag: Frame) -> MotionSequence {
        let mut v = |r: f64| Vector3::new(rng.gen_range(-r..r), rng.gen_range(-r..r), rng.gen_range(-r..r));
        let frames = (0..frames)
            .map(|_| FramePose {
                theta: (0..joints).map(|_| AxisAngle(v(0.8))).collect(),
                root_orient: AxisAngle(v(1.2)),
                root_trans: v(3.0),
            })
            .collect();
        MotionSequence::new(DEFAULT_DT, tag, ShapeCoefficients(vec![0.5, -0.2]), frames).unwrap()
    }

    fn random_camera(rng: &mut impl Rng, frames: usize) -> Camera {
        let ext = (0..frames)
            .map(|_| {
                let aa = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let t = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                RigidTransform::new(axis_angle_to_matrix(AxisAngle(aa)).unwrap(), t)
            })
            .collect();
        Camera::new(1000.0, 1000.0, 500.0, 500.0, ext).unwrap()
    }

    fn max_param_diff(a: &MotionSequence, b: &MotionSequence) -> f64 {
        a.to_params()
            .iter()
            .zip(b.to_params())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_extrinsics_flip_tag_only() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let seq = random_seq(&mut rng, 5, 6, Frame::Camera);
        let cam = Camera::static_camera(1000.0, 1000.0, 0.0, 0.0, RigidTransform::identity(), 5).unwrap();
        let skel = Skeleton::toy6().with_t_root(Vector3::new(0.1, 0.2, 0.3));
        let w = camera_to_world(&seq, &cam, &skel).unwrap();
        assert_eq!(w.frame_tag, Frame::World);
        assert!(max_param_diff(&w, &seq) < 1e-12);
        let c = world_to_camera(&w, &cam, &skel).unwrap();
        assert_eq!(c.frame_tag, Frame::Camera);
        assert!(max_param_diff(&c, &seq) < 1e-12);
    }

    #[test]
    fn pure_translation_extrinsics() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let seq = random_seq(&mut rng, 4, 6, Frame::Camera);
        let skel = Skeleton::toy6().with_t_root(Vector3::new(0.0, 0.9, 0.0));
        // camera-to-world translation (1,0,0) means world-to-camera t = (-1,0,0)
        let cam = Camera::static_camera(
            1000.0,
            1000.0,
            0.0,
            0.0,
            RigidTransform::new(crate::geom::RotationMatrix::identity(), Vector3::new(-1.0, 0.0, 0.0)),
            4,
        )
        .unwrap();
        let w = camera_to_world(&seq, &cam, &skel).unwrap();
        for (a, b) in w.frames.iter().zip(&seq.frames) {
            assert!((a.root_trans - (b.root_trans + Vector3::new(1.0, 0.0, 0.0))).norm() < 1e-15);
            assert!((a.root_orient.0 - b.root_orient.0).norm() < 1e-12);
            assert_eq!(a.theta, b.theta);
        }
        assert_eq!(w.beta, seq.beta);
        let back = world_to_camera(&w, &cam, &skel).unwrap();
        for (a, b) in back.frames.iter().zip(&w.frames) {
            assert!((a.root_trans - (b.root_trans - Vector3::new(1.0, 0.0, 0.0))).norm() < 1e-15);
        }
    }

    #[test]
    fn lifting_hand_case() {
        // R_c = Rz(pi/2), t_c = 0, t_root = (0, 0.3, 0), tau_c = (1, 0, 0):
        // tau_c + t_root = (1, 0.3, 0); Rz(pi/2) maps it to (-0.3, 1, 0);
        // subtracting t_root gives (-0.3, 0.7, 0).
        let skel = Skeleton::toy6().with_t_root(Vector3::new(0.0, 0.3, 0.0));
        let rz = axis_angle_to_matrix(AxisAngle::new(0.0, 0.0, FRAC_PI_2)).unwrap();
        let c2w = RigidTransform::new(rz, Vector3::zeros());
        let cam = Camera::static_camera(1000.0, 1000.0, 0.0, 0.0, c2w.inverse(), 1).unwrap();
        let mut pose = FramePose::rest(6);
        pose.root_trans = Vector3::new(1.0, 0.0, 0.0);
        let seq = MotionSequence::new(DEFAULT_DT, Frame::Camera, ShapeCoefficients::default(), vec![pose]).unwrap();
        let w = camera_to_world(&seq, &cam, &skel).unwrap();
        assert!((w.frames[0].root_trans - Vector3::new(-0.3, 0.7, 0.0)).norm() < 1e-12);
        assert!((w.frames[0].root_orient.0 - Vector3::new(0.0, 0.0, FRAC_PI_2)).norm() < 1e-12);
    }

    #[test]
    fn round_trip_random() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let skel = Skeleton::toy6().with_t_root(Vector3::new(0.05, 0.9, -0.02));
        for _ in 0..100 {
            let seq = random_seq(&mut rng, 6, 6, Frame::World);
            let cam = random_camera(&mut rng, 6);
            let c = world_to_camera(&seq, &cam, &skel).unwrap();
            let back = camera_to_world(&c, &cam, &skel).unwrap();
            assert!(max_param_diff(&back, &seq) < 1e-10);
        }
    }

    #[test]
    fn lifting_is_rigid_when_root_offset_matches() {
        // With t_root equal to the root rest offset, lifting moves every joint
        // rigidly with the camera pose.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let skel = Skeleton::smpl24();
        let seq = random_seq(&mut rng, 3, 24, Frame::Camera);
        let seq = MotionSequence { beta: ShapeCoefficients::zeros(10), ..seq };
        let cam = random_camera(&mut rng, 3);
        let w = camera_to_world(&seq, &cam, &skel).unwrap();
        let jw = joints_world(&w, &skel).unwrap();
        let as_world = MotionSequence { frame_tag: Frame::World, ..seq };
        let jc = joints_world(&as_world, &skel).unwrap();
        for t in 0..3 {
            let c2w = cam.extrinsics[t].inverse();
            for j in 0..24 {
                assert!((jw.positions[t][j] - c2w.apply(&jc.positions[t][j])).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_tag_and_length_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let seq = random_seq(&mut rng, 4, 6, Frame::World);
        let cam = random_camera(&mut rng, 4);
        assert!(camera_to_world(&seq, &cam, &Skeleton::toy6()).is_err());
        let short = random_camera(&mut rng, 3);
        assert!(world_to_camera(&seq, &short, &Skeleton::toy6()).is_err());
    }

    #[test]
    fn static_identity_camera_joints_coincide() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let seq = random_seq(&mut rng, 4, 6, Frame::World);
        let seq = MotionSequence { beta: ShapeCoefficients::default(), ..seq };
        let cam = Camera::static_camera(1000.0, 1000.0, 0.0, 0.0, RigidTransform::identity(), 4).unwrap();
        let w = joints_world(&seq, &Skeleton::toy6()).unwrap();
        let c = joints_camera(&seq, &Skeleton::toy6(), &cam).unwrap();
        assert_eq!(w.positions, c.positions);
    }

    #[test]
    fn file_round_trip_and_default_dt() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let seq = random_seq(&mut rng, 4, 6, Frame::World);
        let back = MotionSequence::from_json(&seq.to_json()).unwrap();
        assert_eq!(back, seq);
        let text = r#"{"frame_tag":"camera","frames":[{"theta":[[0,0,0],[0,0,0]],"root_orient":[0,0,0],"root_trans":[0,0,1]}]}"#;
        let s = MotionSequence::from_json(text).unwrap();
        assert_eq!(s.dt, DEFAULT_DT);
        assert_eq!(s.frame_tag, Frame::Camera);
    }

    #[test]
    fn params_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let seq = random_seq(&mut rng, 5, 6, Frame::World);
        let p = seq.to_params();
        assert_eq!(p.len(), 5 * 24);
        assert_eq!(seq.with_params(&p).unwrap(), seq);
        assert!(seq.with_params(&p[1..]).is_err());
    }
}
