//! Rotations, rigid transforms and the pinhole camera.
//!
//! Rotations live in the optimization state as axis-angle vectors and are
//! expanded to matrices on demand. Camera extrinsics are stored world-to-camera:
//! `p_c = R * p_w + t`.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this angle the Rodrigues map falls back to its Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-7;

/// Minimum camera-frame depth accepted by [`Camera::project`].
pub const MIN_DEPTH: f64 = 1e-6;

const SERIES_ANGLE: f64 = 1e-2;

/// Axis-angle rotation: direction is the axis, magnitude the angle in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AxisAngle(pub Vector3<f64>);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        AxisAngle(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        AxisAngle(Vector3::zeros())
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn to_matrix(&self) -> Result<RotationMatrix> {
        axis_angle_to_matrix(*self)
    }
}

impl From<Vector3<f64>> for AxisAngle {
    fn from(v: Vector3<f64>) -> Self {
        AxisAngle(v)
    }
}

/// A proper rotation matrix (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    /// Validates orthonormality and orientation within `tol`.
    pub fn new(m: Matrix3<f64>, tol: f64) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("rotation matrix has non-finite entries"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if ortho > tol || (det - 1.0).abs() > tol {
            return Err(Error::invalid(format!(
                "matrix is not a rotation (orthonormality error {ortho:.3e}, det {det:.12})"
            )));
        }
        Ok(RotationMatrix(m))
    }

    #[cfg(test)]
    pub(crate) fn new_unchecked(m: Matrix3<f64>) -> Self {
        RotationMatrix(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix(self.0.transpose())
    }

    pub fn compose(&self, other: &RotationMatrix) -> Self {
        RotationMatrix(self.0 * other.0)
    }

    pub fn to_axis_angle(&self) -> Result<AxisAngle> {
        matrix_to_axis_angle(self)
    }
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Coefficients of `R = I + a K + b K^2` and their radial derivatives
/// `c = a'(t)/t`, `d = b'(t)/t`.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < SERIES_ANGLE {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let half = (0.5 * theta).sin() / theta;
        (
            s / theta,
            2.0 * half * half,
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    }
}

fn rodrigues_raw(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    let k = skew(v);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let (a, b, _, _) = rodrigues_coefficients(theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Rodrigues map.
pub fn axis_angle_to_matrix(aa: AxisAngle) -> Result<RotationMatrix> {
    if !aa.is_finite() {
        return Err(Error::invalid("axis-angle has non-finite components"));
    }
    Ok(RotationMatrix(rodrigues_raw(&aa.0)))
}

/// Rodrigues map together with `dR/dv_k` for k = 0..3.
pub fn rodrigues_with_jacobian(v: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let theta = v.norm();
    let k = skew(v);
    let k2 = k * k;
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if theta < SMALL_ANGLE {
        let r = Matrix3::identity() + k + 0.5 * k2;
        let d = basis.map(|e| {
            let ek = skew(&e);
            ek + 0.5 * (ek * k + k * ek)
        });
        return (r, d);
    }
    let (a, b, c, dd) = rodrigues_coefficients(theta);
    let r = Matrix3::identity() + a * k + b * k2;
    let mut out = [Matrix3::zeros(); 3];
    for (i, e) in basis.iter().enumerate() {
        let ek = skew(e);
        out[i] = a * ek + b * (ek * k + k * ek) + (c * v[i]) * k + (dd * v[i]) * k2;
    }
    (r, out)
}

/// Log map. Result has norm in `[0, pi]`.
pub fn matrix_to_axis_angle(r: &RotationMatrix) -> Result<AxisAngle> {
    let m = r.0;
    let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
    if !ortho.is_finite() || ortho > 1e-6 || (m.determinant() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "matrix is not a rotation (orthonormality error {ortho:.3e})"
        )));
    }
    let w = 0.5 * vee(&(m - m.transpose()));
    let sin_t = w.norm();
    let cos_t = 0.5 * (m.trace() - 1.0);
    let theta = sin_t.atan2(cos_t);
    if theta < SMALL_ANGLE {
        return Ok(AxisAngle(w));
    }
    if cos_t > -0.5 {
        return Ok(AxisAngle(w * (theta / sin_t)));
    }
    // Near pi the antisymmetric part vanishes; read the axis off the
    // symmetric part B = (1 - cos) n n^T instead.
    let b = 0.5 * (m + m.transpose()) - cos_t * Matrix3::identity();
    let col = (0..3)
        .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
        .unwrap_or(0);
    let mut axis = b.column(col).into_owned();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    Ok(AxisAngle(axis * theta))
}

/// Rotation followed by translation: `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: RotationMatrix,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: RotationMatrix, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        RigidTransform::new(RotationMatrix::identity(), Vector3::zeros())
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.0 * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.0 * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt.0 * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.0);
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        h
    }
}

/// Pinhole camera with per-frame world-to-camera extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extrinsics: Vec<RigidTransform>,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, extrinsics: Vec<RigidTransform>) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::invalid("focal lengths must be positive and finite"));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(Error::invalid("principal point must be finite"));
        }
        if extrinsics.is_empty() {
            return Err(Error::invalid("camera needs at least one extrinsic"));
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            extrinsics,
        })
    }

    /// Same extrinsic repeated for every frame.
    pub fn static_camera(fx: f64, fy: f64, cx: f64, cy: f64, pose: RigidTransform, frames: usize) -> Result<Self> {
        Camera::new(fx, fy, cx, cy, vec![pose; frames])
    }

    pub fn frame_count(&self) -> usize {
        self.extrinsics.len()
    }

    pub fn check_frames(&self, frames: usize) -> Result<()> {
        if self.extrinsics.len() != frames {
            return Err(Error::invalid(format!(
                "camera has {} extrinsics but sequence has {frames} frames",
                self.extrinsics.len()
            )));
        }
        Ok(())
    }

    fn extrinsic(&self, frame: usize) -> Result<&RigidTransform> {
        self.extrinsics.get(frame).ok_or_else(|| {
            Error::invalid(format!(
                "frame {frame} out of range for camera with {} extrinsics",
                self.extrinsics.len()
            ))
        })
    }

    pub fn world_to_camera(&self, frame: usize, p_world: &Vector3<f64>) -> Result<Vector3<f64>> {
        Ok(self.extrinsic(frame)?.apply(p_world))
    }

    /// Projects a camera-frame point.
    pub fn project_camera_point(&self, frame: usize, pc: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(pc.z > MIN_DEPTH) {
            return Err(Error::BehindCamera {
                frame,
                joint: None,
                depth: pc.z,
            });
        }
        Ok(Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ))
    }

    /// Derivative of the pixel coordinates w.r.t. the camera-frame point.
    pub(crate) fn projection_jacobian(&self, pc: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * pc.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz * iz,
        )
    }

    pub fn project(&self, frame: usize, p_world: &Vector3<f64>) -> Result<Vector2<f64>> {
        let pc = self.world_to_camera(frame, p_world)?;
        self.project_camera_point(frame, &pc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Camera::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CameraFile = serde_json::from_str(text).map_err(|e| Error::parse("camera", e.to_string()))?;
        let mut extrinsics = Vec::with_capacity(file.extrinsics.len());
        for (i, e) in file.extrinsics.iter().enumerate() {
            let m = Matrix3::from_row_slice(&e.r);
            let rot = RotationMatrix::new(m, 1e-6)
                .map_err(|err| Error::parse(format!("extrinsics[{i}].R"), err.to_string()))?;
            let t = Vector3::from(e.t);
            if !t.iter().all(|v| v.is_finite()) {
                return Err(Error::parse(format!("extrinsics[{i}].t"), "non-finite"));
            }
            extrinsics.push(RigidTransform::new(rot, t));
        }
        Camera::new(file.fx, file.fy, file.cx, file.cy, extrinsics).map_err(|e| Error::parse("camera", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let file = CameraFile {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            extrinsics: self
                .extrinsics
                .iter()
                .map(|e| {
                    let m = e.rotation.matrix();
                    let mut r = [0.0; 9];
                    for row in 0..3 {
                        for col in 0..3 {
                            r[row * 3 + col] = m[(row, col)];
                        }
                    }
                    ExtrinsicFile {
                        r,
                        t: e.translation.into(),
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("camera serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    extrinsics: Vec<ExtrinsicFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtrinsicFile {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}
