//! Articulated skeleton, linear shape model and differentiable forward kinematics.
//!
//! Joint 0 is the root. Its world position is `root_trans + rest_offsets[0]`;
//! every other joint sits at `p_parent + G_parent * rest_offset`, where `G` is the
//! accumulated rotation `R(root_orient) * R(theta_0) * ... * R(theta_parent)`.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{rodrigues_with_jacobian, AxisAngle};

const SMPL24_JSON: &str = include_str!("../assets/smpl24.json");

/// Coordinate frame a set of joint positions is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    World,
    Camera,
}

/// Time-invariant shape coefficients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShapeCoefficients(pub Vec<f64>);

impl ShapeCoefficients {
    pub fn zeros(n: usize) -> Self {
        ShapeCoefficients(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-frame joint positions, `positions[t][j]`, in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPositions {
    pub frame: Frame,
    pub positions: Vec<Vec<Vector3<f64>>>,
}

impl JointPositions {
    pub fn new(frame: Frame, positions: Vec<Vec<Vector3<f64>>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("joint positions need at least one frame"));
        }
        let j = positions[0].len();
        if positions.iter().any(|f| f.len() != j) {
            return Err(Error::invalid("ragged joint positions"));
        }
        if positions.iter().flatten().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("non-finite joint position"));
        }
        Ok(JointPositions { frame, positions })
    }

    pub fn frames(&self) -> usize {
        self.positions.len()
    }

    pub fn joints(&self) -> usize {
        self.positions.first().map_or(0, |f| f.len())
    }

    /// Keeps only the listed joints, in the given order.
    pub fn select(&self, joints: &[usize]) -> JointPositions {
        JointPositions {
            frame: self.frame,
            positions: self
                .positions
                .iter()
                .map(|f| joints.iter().map(|&j| f[j]).collect())
                .collect(),
        }
    }
}

/// Pose parameters of a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePose {
    pub theta: Vec<AxisAngle>,
    pub root_orient: AxisAngle,
    pub root_trans: Vector3<f64>,
}

impl FramePose {
    pub fn rest(joints: usize) -> Self {
        FramePose {
            theta: vec![AxisAngle::zero(); joints],
            root_orient: AxisAngle::zero(),
            root_trans: Vector3::zeros(),
        }
    }
}

/// Gradient of a scalar w.r.t. one frame's pose parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGradient {
    pub theta: Vec<Vector3<f64>>,
    pub root_orient: Vector3<f64>,
    pub root_trans: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    parents: Vec<Option<usize>>,
    pub rest_offsets: Vec<Vector3<f64>>,
    /// `shape_basis[j][b]` is the offset delta of joint `j` per unit of `beta[b]`.
    pub shape_basis: Vec<Vec<Vector3<f64>>>,
    pub t_root: Vector3<f64>,
    pub names: Vec<String>,
    pub end_effectors: Vec<usize>,
    feet: Vec<usize>,
    prediction_joints: Option<Vec<usize>>,
}

impl Skeleton {
    pub fn new(
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<Vector3<f64>>,
        names: Vec<String>,
        end_effectors: Vec<usize>,
    ) -> Result<Self> {
        let j = parents.len();
        let skel = Skeleton {
            t_root: rest_offsets.first().copied().unwrap_or_else(Vector3::zeros),
            shape_basis: vec![Vec::new(); j],
            parents,
            rest_offsets,
            names,
            end_effectors,
            feet: Vec::new(),
            prediction_joints: None,
        };
        skel.validate()?;
        Ok(skel)
    }

    pub fn with_shape_basis(mut self, basis: Vec<Vec<Vector3<f64>>>) -> Result<Self> {
        self.shape_basis = basis;
        self.validate()?;
        Ok(self)
    }

    pub fn with_t_root(mut self, t_root: Vector3<f64>) -> Self {
        self.t_root = t_root;
        self
    }

    pub fn with_feet(mut self, feet: Vec<usize>) -> Result<Self> {
        self.feet = feet;
        self.validate()?;
        Ok(self)
    }

    pub fn with_prediction_joints(mut self, joints: Vec<usize>) -> Result<Self> {
        self.prediction_joints = Some(joints);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let j = self.parents.len();
        if j < 2 {
            return Err(Error::invalid("skeleton needs at least two joints"));
        }
        if self.parents[0].is_some() {
            return Err(Error::invalid("joint 0 must be the root"));
        }
        for (i, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < i => {}
                _ => return Err(Error::invalid(format!("joint {i} must have a parent with a smaller index"))),
            }
        }
        if self.rest_offsets.len() != j || self.names.len() != j || self.shape_basis.len() != j {
            return Err(Error::invalid("skeleton arrays disagree on joint count"));
        }
        let b = self.shape_basis[0].len();
        if self.shape_basis.iter().any(|row| row.len() != b) {
            return Err(Error::invalid("shape basis must have the same width for every joint"));
        }
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        if !self.rest_offsets.iter().all(finite)
            || !self.shape_basis.iter().flatten().all(finite)
            || !finite(&self.t_root)
        {
            return Err(Error::invalid("skeleton has non-finite geometry"));
        }
        let in_range = |ids: &[usize]| ids.iter().all(|&i| i < j);
        if !in_range(&self.end_effectors) || !in_range(&self.feet) {
            return Err(Error::invalid("end effector index out of range"));
        }
        if let Some(map) = &self.prediction_joints {
            if map.is_empty() || !in_range(map) {
                return Err(Error::invalid("prediction joint map out of range"));
            }
        }
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis[0].len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    /// Foot joints used for contact metrics. Falls back to end effectors whose
    /// name mentions a foot or ankle, then to all end effectors.
    pub fn feet(&self) -> Vec<usize> {
        if !self.feet.is_empty() {
            return self.feet.clone();
        }
        let named: Vec<usize> = self
            .end_effectors
            .iter()
            .copied()
            .filter(|&i| {
                let n = self.names[i].to_lowercase();
                n.contains("foot") || n.contains("ankle")
            })
            .collect();
        if named.is_empty() {
            self.end_effectors.clone()
        } else {
            named
        }
    }

    /// Skeleton joints observed by the dynamics predictor; all joints when unset.
    pub fn prediction_joints(&self) -> Vec<usize> {
        self.prediction_joints
            .clone()
            .unwrap_or_else(|| (0..self.joint_count()).collect())
    }

    /// Joints from the root down to `joint`, inclusive.
    pub fn ancestry(&self, joint: usize) -> Vec<usize> {
        let mut chain = vec![joint];
        let mut cur = joint;
        while let Some(p) = self.parents[cur] {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        chain
    }

    pub fn is_ancestor(&self, ancestor: usize, joint: usize) -> bool {
        let mut cur = joint;
        while let Some(p) = self.parents[cur] {
            if p == ancestor {
                return true;
            }
            cur = p;
        }
        false
    }

    /// Adds the linear shape displacement to the rest offsets.
    pub fn apply_shape(&self, beta: &ShapeCoefficients) -> Result<Skeleton> {
        if beta.len() > self.shape_dim() {
            return Err(Error::invalid(format!(
                "{} shape coefficients for a basis of width {}",
                beta.len(),
                self.shape_dim()
            )));
        }
        if !beta.0.iter().all(|b| b.is_finite()) {
            return Err(Error::invalid("non-finite shape coefficient"));
        }
        let mut out = self.clone();
        for (offset, basis) in out.rest_offsets.iter_mut().zip(&self.shape_basis) {
            for (b, col) in beta.0.iter().zip(basis) {
                *offset += col * *b;
            }
        }
        Ok(out)
    }

    fn check_pose(&self, pose: &FramePose) -> Result<()> {
        if pose.theta.len() != self.joint_count() {
            return Err(Error::invalid(format!(
                "pose has {} joint rotations, skeleton has {} joints",
                pose.theta.len(),
                self.joint_count()
            )));
        }
        Ok(())
    }

    pub fn forward_kinematics(&self, pose: &FramePose) -> Result<Vec<Vector3<f64>>> {
        Ok(self.fk_cached(pose)?.positions)
    }

    /// Forward pass keeping what the backward pass needs.
    pub fn fk_cached(&self, pose: &FramePose) -> Result<FkCache> {
        self.check_pose(pose)?;
        let n = self.joint_count();
        let local: Vec<_> = pose.theta.iter().map(|aa| rodrigues_with_jacobian(&aa.0)).collect();
        let root = rodrigues_with_jacobian(&pose.root_orient.0);
        let mut global = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        global.push(root.0 * local[0].0);
        positions.push(pose.root_trans + self.rest_offsets[0]);
        for i in 1..n {
            let p = self.parents[i].expect("validated");
            positions.push(positions[p] + global[p] * self.rest_offsets[i]);
            global.push(global[p] * local[i].0);
        }
        Ok(FkCache {
            local,
            root,
            global,
            positions,
        })
    }

    /// Pulls a gradient w.r.t. joint positions back to the pose parameters.
    pub fn fk_backward(&self, cache: &FkCache, grad_positions: &[Vector3<f64>]) -> PoseGradient {
        let n = self.joint_count();
        let mut gp = grad_positions.to_vec();
        let mut gg = vec![Matrix3::zeros(); n];
        let mut theta = vec![Vector3::zeros(); n];
        for i in (1..n).rev() {
            let p = self.parents[i].expect("validated");
            let gpi = gp[i];
            gp[p] += gpi;
            gg[p] += gpi * self.rest_offsets[i].transpose();
            let ggi = gg[i];
            let gl = cache.global[p].transpose() * ggi;
            gg[p] += ggi * cache.local[i].0.transpose();
            theta[i] = contract(&gl, &cache.local[i].1);
        }
        let g_local0 = cache.root.0.transpose() * gg[0];
        let g_root = gg[0] * cache.local[0].0.transpose();
        theta[0] = contract(&g_local0, &cache.local[0].1);
        PoseGradient {
            theta,
            root_orient: contract(&g_root, &cache.root.1),
            root_trans: gp[0],
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Skeleton::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SkeletonFile = serde_json::from_str(text).map_err(|e| Error::parse("skeleton", e.to_string()))?;
        let j = file.parents.len();
        let parents = file
            .parents
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        let names = file
            .names
            .unwrap_or_else(|| (0..j).map(|i| format!("joint_{i}")).collect());
        let offsets: Vec<Vector3<f64>> = file.rest_offsets.iter().map(|o| Vector3::from(*o)).collect();
        let basis = match file.shape_basis {
            Some(b) => {
                let mut rows = Vec::with_capacity(b.len());
                for (ji, axes) in b.iter().enumerate() {
                    let width = axes[0].len();
                    if axes.iter().any(|a| a.len() != width) {
                        return Err(Error::parse(format!("shape_basis[{ji}]"), "axes differ in width"));
                    }
                    rows.push((0..width).map(|k| Vector3::new(axes[0][k], axes[1][k], axes[2][k])).collect());
                }
                rows
            }
            None => vec![Vec::new(); j],
        };
        let mut skel = Skeleton::new(parents, offsets, names, file.end_effectors.unwrap_or_default())
            .and_then(|s| s.with_shape_basis(basis))
            .map_err(|e| Error::parse("skeleton", e.to_string()))?;
        if let Some(t) = file.t_root {
            skel.t_root = Vector3::from(t);
        }
        if let Some(f) = file.feet {
            skel = skel.with_feet(f).map_err(|e| Error::parse("feet", e.to_string()))?;
        }
        if let Some(m) = file.joint_map {
            skel = skel
                .with_prediction_joints(m)
                .map_err(|e| Error::parse("joint_map", e.to_string()))?;
        }
        Ok(skel)
    }

    pub fn to_json(&self) -> String {
        let file = SkeletonFile {
            parents: self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            rest_offsets: self.rest_offsets.iter().map(|o| (*o).into()).collect(),
            shape_basis: (self.shape_dim() > 0).then(|| {
                self.shape_basis
                    .iter()
                    .map(|row| (0..3).map(|a| row.iter().map(|c| c[a]).collect()).collect())
                    .collect()
            }),
            t_root: Some(self.t_root.into()),
            names: Some(self.names.clone()),
            end_effectors: Some(self.end_effectors.clone()),
            feet: (!self.feet.is_empty()).then(|| self.feet.clone()),
            joint_map: self.prediction_joints.clone(),
        };
        serde_json::to_string_pretty(&file).expect("skeleton serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// 24-joint SMPL-topology skeleton with a 17-joint prediction map.
    pub fn smpl24() -> Skeleton {
        Skeleton::from_json(SMPL24_JSON).expect("bundled skeleton is valid")
    }

    /// Six-joint toy body: pelvis, chest, two two-bone legs.
    pub fn toy6() -> Skeleton {
        let parents = vec![None, Some(0), Some(0), Some(2), Some(0), Some(4)];
        let offsets = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 0.5, 0.0),
            Vector3::new(0.1, -0.45, 0.03),
            Vector3::new(0.0, -0.45, -0.03),
            Vector3::new(-0.1, -0.45, 0.03),
            Vector3::new(0.0, -0.45, -0.03),
        ];
        let names = ["pelvis", "chest", "l_knee", "l_foot", "r_knee", "r_foot"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let basis = offsets
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let leg = if i >= 2 { Vector3::new(0.0, -0.05, 0.0) } else { Vector3::zeros() };
                vec![o * 0.1, leg]
            })
            .collect();
        Skeleton::new(parents, offsets, names, vec![3, 5])
            .and_then(|s| s.with_shape_basis(basis))
            .expect("toy skeleton is valid")
    }
}

fn contract(g: &Matrix3<f64>, d: &[Matrix3<f64>; 3]) -> Vector3<f64> {
    Vector3::new(g.dot(&d[0]), g.dot(&d[1]), g.dot(&d[2]))
}

/// Intermediate values of one forward-kinematics pass.
#[derive(Debug, Clone)]
pub struct FkCache {
    local: Vec<(Matrix3<f64>, [Matrix3<f64>; 3])>,
    root: (Matrix3<f64>, [Matrix3<f64>; 3]),
    /// Accumulated rotation of each joint.
    pub global: Vec<Matrix3<f64>>,
    pub positions: Vec<Vector3<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    parents: Vec<i64>,
    rest_offsets: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape_basis: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    t_root: Option<[f64; 3]>,
    #[serde(default)]
    names: Option<Vec<String>>,
    #[serde(default)]
    end_effectors: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feet: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joint_map: Option<Vec<usize>>,
}
