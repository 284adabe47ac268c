//! World-grounded evaluation: aligned position errors, trajectory error,
//! dynamics errors, jitter, foot sliding and threshold metrics.
//!
//! Positions are in meters; MPJPE-style errors are reported in millimeters.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::body::{Frame, JointPositions, Skeleton};
use crate::dynamics::{acceleration_field, jerk_residuals, velocity_field};
use crate::error::{ensure_len, Error, Result};
use crate::geom::Camera;
use crate::motion::{joints_camera, joints_world, MotionSequence};

pub const SEGMENT_LEN: usize = 100;
pub const DEFAULT_FOOT_HEIGHT: f64 = 0.05;
pub const PCE_THRESHOLDS: [f64; 3] = [0.10, 0.05, 0.01];
pub const PCK_THRESHOLDS: [f64; 2] = [10.0, 5.0];
const DEGENERATE_SPREAD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub r_min: f64,
    pub r_max: f64,
}

impl ValueRange {
    pub fn new(r_min: f64, r_max: f64) -> Result<Self> {
        if !(r_max > r_min) || !r_min.is_finite() || !r_max.is_finite() {
            return Err(Error::invalid(format!("degenerate range [{r_min}, {r_max}]")));
        }
        Ok(ValueRange { r_min, r_max })
    }

    pub fn width(&self) -> f64 {
        self.r_max - self.r_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub velocity: ValueRange,
    pub acceleration: ValueRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    FullSegment,
    FirstTwoFrames,
}

/// Rigid or similarity transform mapping `src` onto `dst`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
    /// Source points were coincident; only the translation was fitted.
    pub translation_only: bool,
}

impl Alignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

fn centroid(pts: &[Vector3<f64>]) -> Vector3<f64> {
    pts.iter().sum::<Vector3<f64>>() / pts.len() as f64
}

/// Least-squares alignment of `src` onto `dst` (Kabsch, or Umeyama when
/// `with_scale`).
pub fn procrustes(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<Alignment> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::invalid("alignment needs equally sized, non-empty point sets"));
    }
    let cs = centroid(src);
    let cd = centroid(dst);
    let spread: f64 = src.iter().map(|p| (p - cs).norm_squared()).sum();
    if spread < DEGENERATE_SPREAD {
        return Ok(Alignment {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: cd - cs,
            translation_only: true,
        });
    }
    let mut h = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        h += (a - cs) * (b - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * fix * u.transpose();
    let scale = if with_scale {
        let s = svd.singular_values;
        (s[0] + s[1] + d * s[2]) / spread
    } else {
        1.0
    };
    Ok(Alignment {
        rotation,
        scale,
        translation: cd - scale * (rotation * cs),
        translation_only: false,
    })
}

fn check_same_shape(pred: &JointPositions, gt: &JointPositions) -> Result<()> {
    if pred.frames() != gt.frames() || pred.joints() != gt.joints() {
        return Err(Error::invalid(format!(
            "shape mismatch: prediction {}x{}, ground truth {}x{}",
            pred.frames(),
            pred.joints(),
            gt.frames(),
            gt.joints()
        )));
    }
    Ok(())
}

/// Non-overlapping segment bounds; a trailing piece shorter than two frames is dropped.
pub fn segments(frames: usize, len: usize) -> Vec<(usize, usize)> {
    (0..frames)
        .step_by(len)
        .map(|s| (s, (s + len).min(frames)))
        .filter(|(s, e)| e - s >= 2)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedError {
    pub mm: f64,
    /// Segments that fell back to translation-only alignment.
    pub translation_only_segments: Vec<usize>,
}

/// WA-MPJPE (`FullSegment`) or W-MPJPE (`FirstTwoFrames`) in millimeters.
pub fn segment_align_mpjpe(pred: &JointPositions, gt: &JointPositions, mode: AlignMode) -> Result<AlignedError> {
    check_same_shape(pred, gt)?;
    ensure_len("segment alignment", 2, pred.frames())?;
    let segs = segments(pred.frames(), SEGMENT_LEN);
    let mut fallback = Vec::new();
    let mut total = 0.0;
    for (idx, &(s, e)) in segs.iter().enumerate() {
        let fit_end = match mode {
            AlignMode::FullSegment => e,
            AlignMode::FirstTwoFrames => s + 2,
        };
        let src: Vec<_> = pred.positions[s..fit_end].iter().flatten().copied().collect();
        let dst: Vec<_> = gt.positions[s..fit_end].iter().flatten().copied().collect();
        let fit = procrustes(&src, &dst, false)?;
        if fit.translation_only {
            fallback.push(idx);
        }
        let mut err = 0.0;
        for (rp, rg) in pred.positions[s..e].iter().zip(&gt.positions[s..e]) {
            for (p, g) in rp.iter().zip(rg) {
                err += (fit.apply(p) - g).norm();
            }
        }
        total += err / ((e - s) * pred.joints()) as f64;
    }
    Ok(AlignedError {
        mm: 1000.0 * total / segs.len() as f64,
        translation_only_segments: fallback,
    })
}

/// Per-frame similarity-aligned MPJPE in millimeters.
pub fn pa_mpjpe(pred: &JointPositions, gt: &JointPositions) -> Result<f64> {
    check_same_shape(pred, gt)?;
    ensure_len("PA-MPJPE", 1, pred.frames())?;
    let mut total = 0.0;
    for (rp, rg) in pred.positions.iter().zip(&gt.positions) {
        let fit = procrustes(rp, rg, true)?;
        total += rp.iter().zip(rg).map(|(p, g)| (fit.apply(p) - g).norm()).sum::<f64>();
    }
    Ok(1000.0 * total / (pred.frames() * pred.joints()) as f64)
}

/// Root translation error in meters after one rigid fit over the whole sequence.
pub fn rte(pred: &MotionSequence, gt: &MotionSequence) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid("root trajectories must have equal, non-zero length"));
    }
    let a: Vec<_> = pred.frames.iter().map(|f| f.root_trans).collect();
    let b: Vec<_> = gt.frames.iter().map(|f| f.root_trans).collect();
    let fit = procrustes(&a, &b, false)?;
    Ok(a.iter().zip(&b).map(|(p, g)| (fit.apply(p) - g).norm()).sum::<f64>() / a.len() as f64)
}

fn mean_norm_diff(a: &[Vec<Vector3<f64>>], b: &[Vec<Vector3<f64>>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            total += (x - y).norm();
            count += 1;
        }
    }
    total / count as f64
}

/// (MPJVE in m/s, MPJAE in m/s²) between camera-frame joint tracks.
pub fn dynamics_errors(pred: &JointPositions, gt: &JointPositions, dt: f64) -> Result<(f64, f64)> {
    check_same_shape(pred, gt)?;
    ensure_len("dynamics errors", 3, pred.frames())?;
    let v = mean_norm_diff(&velocity_field(pred, dt)?, &velocity_field(gt, dt)?);
    let a = mean_norm_diff(&acceleration_field(pred, dt)?, &acceleration_field(gt, dt)?);
    Ok((v, a))
}

/// Mean third-difference magnitude divided by dt³, in m/s³.
pub fn jitter(pred: &JointPositions, dt: f64) -> Result<f64> {
    ensure_len("jitter", 4, pred.frames())?;
    let r = jerk_residuals(pred)?;
    let n = (r.len() * pred.joints()) as f64;
    Ok(r.iter().flatten().map(|v| v.norm()).sum::<f64>() / n / dt.powi(3))
}

/// Foot sliding in millimeters, for a y-up world.
///
/// A foot is in contact when its height above the lowest foot position of the
/// sequence is below `height_thresh`; the metric averages horizontal (x, z)
/// displacement over consecutive frame pairs where the foot is in contact in
/// both. No contact pairs gives 0.
pub fn foot_sliding(pred: &JointPositions, feet: &[usize], height_thresh: f64) -> Result<f64> {
    ensure_len("foot sliding", 2, pred.frames())?;
    if feet.is_empty() {
        return Err(Error::invalid("no foot joints"));
    }
    if let Some(&f) = feet.iter().find(|&&f| f >= pred.joints()) {
        return Err(Error::invalid(format!("foot joint {f} out of range")));
    }
    let ground = pred
        .positions
        .iter()
        .flat_map(|row| feet.iter().map(move |&f| row[f].y))
        .fold(f64::INFINITY, f64::min);
    let contact = |t: usize, f: usize| pred.positions[t][f].y - ground < height_thresh;
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..pred.frames() - 1 {
        for &f in feet {
            if contact(t, f) && contact(t + 1, f) {
                let d = pred.positions[t + 1][f] - pred.positions[t][f];
                total += Vector2::new(d.x, d.z).norm();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { 1000.0 * total / count as f64 })
}

/// Percentage of samples with absolute error strictly below `tau·(r_max − r_min)`.
pub fn pce(pred: &[f64], gt: &[f64], range: &ValueRange, tau: f64) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid("PCE needs equally sized, non-empty samples"));
    }
    let thresh = tau * range.width();
    let hits = pred.iter().zip(gt).filter(|(p, g)| (*p - *g).abs() < thresh).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Linear-interpolation percentiles: the `p`-th percentile sits at sorted
/// index `p/100·(n−1)`.
pub fn percentile_range(samples: &[f64], lo: f64, hi: f64) -> Result<ValueRange> {
    if samples.len() < 2 {
        return Err(Error::invalid("percentiles need at least two samples"));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite sample"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let at = |p: f64| {
        let idx = p / 100.0 * (s.len() - 1) as f64;
        let i = idx.floor() as usize;
        let frac = idx - i as f64;
        if i + 1 < s.len() {
            s[i] + frac * (s[i + 1] - s[i])
        } else {
            s[i]
        }
    };
    ValueRange::new(at(lo), at(hi))
}

/// Percentage of keypoints within `thresh` pixels.
pub fn pck(pred: &[Vec<Vector2<f64>>], gt: &[Vec<Vector2<f64>>], thresh: f64) -> Result<f64> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::invalid("keypoint arrays differ in shape"));
    }
    let n: usize = pred.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::invalid("no keypoints"));
    }
    let hits = pred
        .iter()
        .zip(gt)
        .flat_map(|(a, b)| a.iter().zip(b))
        .filter(|(p, g)| (*p - *g).norm() < thresh)
        .count();
    Ok(100.0 * hits as f64 / n as f64)
}

fn components(field: &[Vec<Vector3<f64>>]) -> Vec<f64> {
    field.iter().flatten().flat_map(|v| [v.x, v.y, v.z]).collect()
}

/// Ranges from ground-truth camera-frame dynamics.
pub fn stats_from(gt_camera: &JointPositions, dt: f64) -> Result<DatasetStats> {
    Ok(DatasetStats {
        velocity: percentile_range(&components(&velocity_field(gt_camera, dt)?), 0.1, 99.9)?,
        acceleration: percentile_range(&components(&acceleration_field(gt_camera, dt)?), 0.1, 99.9)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub wa_mpjpe: f64,
    pub w_mpjpe: f64,
    pub pa_mpjpe: f64,
    pub rte: f64,
    pub jitter: f64,
    pub fs: f64,
    pub mpjve: f64,
    pub mpjae: f64,
    pub pce_velocity: BTreeMap<String, f64>,
    pub pce_acceleration: BTreeMap<String, f64>,
    pub pck: BTreeMap<String, f64>,
    pub translation_only_segments: usize,
}

impl MetricReport {
    /// `(name, unit, value)` rows in display order.
    pub fn rows(&self) -> Vec<(String, &'static str, f64)> {
        let mut rows = vec![
            ("WA-MPJPE".to_string(), "mm", self.wa_mpjpe),
            ("W-MPJPE".to_string(), "mm", self.w_mpjpe),
            ("PA-MPJPE".to_string(), "mm", self.pa_mpjpe),
            ("RTE".to_string(), "m", self.rte),
            ("Jitter".to_string(), "m/s^3", self.jitter),
            ("FS".to_string(), "mm", self.fs),
            ("MPJVE".to_string(), "m/s", self.mpjve),
            ("MPJAE".to_string(), "m/s^2", self.mpjae),
        ];
        for (k, v) in &self.pce_velocity {
            rows.push((format!("PCE-V@{k}"), "%", *v));
        }
        for (k, v) in &self.pce_acceleration {
            rows.push((format!("PCE-A@{k}"), "%", *v));
        }
        for (k, v) in &self.pck {
            rows.push((format!("PCK@{k}"), "%", *v));
        }
        rows
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,unit,value\n");
        for (name, unit, v) in self.rows() {
            let _ = writeln!(out, "{name},{unit},{v}");
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        for (name, unit, v) in self.rows() {
            let _ = writeln!(out, "{name:<12} {v:>14.6} {unit}");
        }
        out
    }
}

pub fn threshold_key(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.2}")
    }
}

/// Every metric for a world-frame prediction against ground truth.
///
/// Position metrics use all joints; camera-frame dynamics, PCE and PCK use the
/// skeleton's prediction joints. Without `stats`, ranges come from the ground
/// truth itself.
pub fn evaluate_motion(
    pred: &MotionSequence,
    gt: &MotionSequence,
    skel: &Skeleton,
    cam: &Camera,
    stats: Option<&DatasetStats>,
) -> Result<MetricReport> {
    for (what, s) in [("prediction", pred), ("ground truth", gt)] {
        if s.frame_tag != Frame::World {
            return Err(Error::invalid(format!("{what} must be a world-frame motion")));
        }
    }
    if pred.len() != gt.len() || pred.joint_count() != gt.joint_count() {
        return Err(Error::invalid(format!(
            "shape mismatch: prediction {}x{}, ground truth {}x{}",
            pred.len(),
            pred.joint_count(),
            gt.len(),
            gt.joint_count()
        )));
    }
    ensure_len("jitter", 4, pred.len())?;
    let pw = joints_world(pred, skel)?;
    let gw = joints_world(gt, skel)?;
    let sel = skel.prediction_joints();
    let pc = joints_camera(pred, skel, cam)?.select(&sel);
    let gc = joints_camera(gt, skel, cam)?.select(&sel);
    let dt = gt.dt;
    let wa = segment_align_mpjpe(&pw, &gw, AlignMode::FullSegment)?;
    let w = segment_align_mpjpe(&pw, &gw, AlignMode::FirstTwoFrames)?;
    let (mpjve, mpjae) = dynamics_errors(&pc, &gc, dt)?;
    let vp = components(&velocity_field(&pc, dt)?);
    let vg = components(&velocity_field(&gc, dt)?);
    let ap = components(&acceleration_field(&pc, dt)?);
    let ag = components(&acceleration_field(&gc, dt)?);
    // A motionless ground truth has no range; its PCE entries are left out.
    let (v_range, a_range) = match stats {
        Some(s) => (Some(s.velocity), Some(s.acceleration)),
        None => (
            percentile_range(&vg, 0.1, 99.9).ok(),
            percentile_range(&ag, 0.1, 99.9).ok(),
        ),
    };
    let project = |j: &JointPositions| -> Result<Vec<Vec<Vector2<f64>>>> {
        j.positions
            .iter()
            .enumerate()
            .map(|(t, row)| row.iter().map(|p| cam.project_camera_point(t, p)).collect())
            .collect()
    };
    let kp = project(&pc)?;
    let kg = project(&gc)?;
    let mut pce_velocity = BTreeMap::new();
    let mut pce_acceleration = BTreeMap::new();
    for tau in PCE_THRESHOLDS {
        if let Some(r) = &v_range {
            pce_velocity.insert(threshold_key(tau), pce(&vp, &vg, r, tau)?);
        }
        if let Some(r) = &a_range {
            pce_acceleration.insert(threshold_key(tau), pce(&ap, &ag, r, tau)?);
        }
    }
    let mut pck_map = BTreeMap::new();
    for th in PCK_THRESHOLDS {
        pck_map.insert(threshold_key(th), pck(&kp, &kg, th)?);
    }
    Ok(MetricReport {
        wa_mpjpe: wa.mm,
        w_mpjpe: w.mm,
        pa_mpjpe: pa_mpjpe(&pw, &gw)?,
        rte: rte(pred, gt)?,
        jitter: jitter(&pw, dt)?,
        fs: foot_sliding(&pw, &skel.feet(), DEFAULT_FOOT_HEIGHT)?,
        mpjve,
        mpjae,
        pce_velocity,
        pce_acceleration,
        pck: pck_map,
        translation_only_segments: wa.translation_only_segments.len() + w.translation_only_segments.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{axis_angle_to_matrix, AxisAngle};
    use nalgebra::{Matrix4, SymmetricEigen, UnitQuaternion, Quaternion};
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn track(rows: Vec<Vec<Vector3<f64>>>) -> JointPositions {
        JointPositions::new(Frame::World, rows).unwrap()
    }

    fn random_rows(rng: &mut impl Rng, t: usize, j: usize) -> Vec<Vec<Vector3<f64>>> {
        (0..t)
            .map(|_| (0..j).map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect())
            .collect()
    }

    /// Horn's closed-form quaternion solution.
    fn horn(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> (Matrix3<f64>, f64, Vector3<f64>) {
        let n = src.len() as f64;
        let cs = src.iter().sum::<Vector3<f64>>() / n;
        let cd = dst.iter().sum::<Vector3<f64>>() / n;
        let mut m = Matrix3::zeros();
        for (a, b) in src.iter().zip(dst) {
            m += (a - cs) * (b - cd).transpose();
        }
        let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
        let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
        let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
        let nmat = Matrix4::new(
            sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
            syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
            szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
            sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
        );
        let eig = SymmetricEigen::new(nmat);
        let best = eig.eigenvalues.imax();
        let q = eig.eigenvectors.column(best);
        let r = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().into_inner();
        let scale = if with_scale {
            let num: f64 = src.iter().zip(dst).map(|(a, b)| (b - cd).dot(&(r * (a - cs)))).sum();
            num / src.iter().map(|a| (a - cs).norm_squared()).sum::<f64>()
        } else {
            1.0
        };
        (r, scale, cd - scale * r * cs)
    }

    fn brute_segment(pred: &[Vec<Vector3<f64>>], gt: &[Vec<Vector3<f64>>], two: bool) -> f64 {
        let t = pred.len();
        let j = pred[0].len();
        let mut seg_errs = Vec::new();
        let mut s = 0;
        while s < t {
            let e = (s + 100).min(t);
            if e - s >= 2 {
                let fe = if two { s + 2 } else { e };
                let src: Vec<_> = pred[s..fe].concat();
                let dst: Vec<_> = gt[s..fe].concat();
                let (r, _, tr) = horn(&src, &dst, false);
                let mut err = 0.0;
                for f in s..e {
                    for k in 0..j {
                        err += (r * pred[f][k] + tr - gt[f][k]).norm();
                    }
                }
                seg_errs.push(err / ((e - s) * j) as f64);
            }
            s += 100;
        }
        1000.0 * seg_errs.iter().sum::<f64>() / seg_errs.len() as f64
    }

    fn rotate_all(rows: &[Vec<Vector3<f64>>], r: &Matrix3<f64>, t: &Vector3<f64>) -> Vec<Vec<Vector3<f64>>> {
        rows.iter().map(|row| row.iter().map(|p| r * p + t).collect()).collect()
    }

    #[test]
    fn segment_bounds() {
        assert_eq!(segments(250, 100), vec![(0, 100), (100, 200), (200, 250)]);
        assert_eq!(segments(201, 100), vec![(0, 100), (100, 200)]);
        assert_eq!(segments(202, 100), vec![(0, 100), (100, 200), (200, 202)]);
    }

    #[test]
    fn identical_and_rigidly_moved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_rows(&mut rng, 230, 4);
        let g = track(gt.clone());
        assert!(segment_align_mpjpe(&g, &g, AlignMode::FullSegment).unwrap().mm < 1e-9);
        let r = *axis_angle_to_matrix(AxisAngle::new(0.3, -1.0, 0.5)).unwrap().matrix();
        let moved = track(rotate_all(&gt, &r, &Vector3::new(1.0, 2.0, -3.0)));
        assert!(segment_align_mpjpe(&moved, &g, AlignMode::FullSegment).unwrap().mm < 1e-9);
        assert!(segment_align_mpjpe(&moved, &g, AlignMode::FirstTwoFrames).unwrap().mm < 1e-9);
    }

    #[test]
    fn offset_after_frame_two_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_rows(&mut rng, 10, 3);
        let mut pred = gt.clone();
        for row in pred.iter_mut().skip(2) {
            for p in row.iter_mut() {
                *p += Vector3::new(0.005, 0.0, 0.0);
            }
        }
        let v = segment_align_mpjpe(&track(pred.clone()), &track(gt.clone()), AlignMode::FirstTwoFrames).unwrap().mm;
        assert!((v - brute_segment(&pred, &gt, true)).abs() < 1e-9);
        assert!((v - 5.0 * 8.0 / 10.0).abs() < 1e-9);
    }

    #[test]
    fn coincident_points_fall_back() {
        let row = vec![Vector3::new(1.0, 1.0, 1.0); 3];
        let pred = track(vec![row.clone(); 4]);
        let gt = track(vec![vec![Vector3::new(0.0, 1.0, 1.0); 3]; 4]);
        let r = segment_align_mpjpe(&pred, &gt, AlignMode::FirstTwoFrames).unwrap();
        assert_eq!(r.translation_only_segments, vec![0]);
        assert!(r.mm < 1e-12);
    }

    #[test]
    fn pa_mpjpe_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_rows(&mut rng, 5, 6);
        let g = track(gt.clone());
        assert!(pa_mpjpe(&g, &g).unwrap() < 1e-9);
        let doubled = track(gt.iter().map(|r| r.iter().map(|p| 2.0 * p).collect()).collect());
        assert!(pa_mpjpe(&doubled, &g).unwrap() < 1e-9);
        let p3 = random_rows(&mut rng, 1, 3);
        let g3 = random_rows(&mut rng, 1, 3);
        let (r, s, t) = horn(&p3[0], &g3[0], true);
        let oracle = 1000.0 * p3[0].iter().zip(&g3[0]).map(|(p, g)| (s * (r * p) + t - g).norm()).sum::<f64>() / 3.0;
        assert!((pa_mpjpe(&track(p3), &track(g3)).unwrap() - oracle).abs() < 1e-9);
    }

    fn seq_with_roots(roots: &[Vector3<f64>]) -> MotionSequence {
        let frames = roots
            .iter()
            .map(|r| crate::body::FramePose { root_trans: *r, ..crate::body::FramePose::rest(1) })
            .collect();
        MotionSequence::new(0.1, Frame::World, crate::body::ShapeCoefficients(vec![]), frames).unwrap()
    }

    #[test]
    fn rte_cases() {
        let roots: Vec<_> = (0..20).map(|t| Vector3::new(t as f64 * 0.1, (t as f64 * 0.3).sin(), 0.0)).collect();
        let a = seq_with_roots(&roots);
        assert!(rte(&a, &a).unwrap() < 1e-12);
        let shifted: Vec<_> = roots.iter().map(|r| r + Vector3::new(1.0, 0.0, 0.0)).collect();
        assert!(rte(&seq_with_roots(&shifted), &a).unwrap() < 1e-9);
        let drift: Vec<_> = roots.iter().enumerate().map(|(t, r)| r + Vector3::new(0.0, 0.0, t as f64 / 19.0)).collect();
        let (r, _, t) = horn(&drift, &roots, false);
        let oracle = drift.iter().zip(&roots).map(|(p, g)| (r * p + t - g).norm()).sum::<f64>() / 20.0;
        assert!((rte(&seq_with_roots(&drift), &a).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn dynamics_error_cases() {
        let dt = 1.0 / 30.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_rows(&mut rng, 8, 2);
        let g = track(gt.clone());
        assert_eq!(dynamics_errors(&g, &g, dt).unwrap(), (0.0, 0.0));
        let off = track(rotate_all(&gt, &Matrix3::identity(), &Vector3::new(3.0, 0.0, 0.0)));
        let (v, a) = dynamics_errors(&off, &g, dt).unwrap();
        assert!(v < 1e-9 && a < 1e-9);
        let mut bumped = gt.clone();
        bumped[4][1].y += 0.01;
        let (v, a) = dynamics_errors(&track(bumped), &g, dt).unwrap();
        // the bump enters two velocity stencils and three acceleration stencils
        assert!((v - 2.0 * 0.01 / dt / (7.0 * 2.0)).abs() < 1e-9);
        assert!((a - (1.0 + 2.0 + 1.0) * 0.01 / (dt * dt) / (6.0 * 2.0)).abs() < 1e-9);
    }

    #[test]
    fn jitter_cases() {
        let dt = 1.0 / 30.0;
        let quad = track((0..10).map(|t| vec![Vector3::new(0.5 * (t as f64).powi(2), 1.0, -(t as f64))]).collect());
        assert!(jitter(&quad, dt).unwrap() < 1e-9);
        let c = 0.7;
        let cubic = track((0..10).map(|t| vec![Vector3::repeat(c * (t as f64 * dt).powi(3))]).collect());
        assert!((jitter(&cubic, dt).unwrap() - 6.0 * c * 3f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn foot_sliding_cases() {
        let still = track((0..10).map(|_| vec![Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.1, 0.0, 0.0)]).collect());
        assert_eq!(foot_sliding(&still, &[1], 0.05).unwrap(), 0.0);
        let slide = track((0..10).map(|t| vec![Vector3::zeros(), Vector3::new(0.002 * t as f64, 0.01, 0.0)]).collect());
        assert!((foot_sliding(&slide, &[1], 0.05).unwrap() - 2.0).abs() < 1e-9);
        let lifted = track((0..10).map(|t| vec![Vector3::zeros(), Vector3::new(0.01 * t as f64, 0.1 * t as f64, 0.0)]).collect());
        assert_eq!(foot_sliding(&lifted, &[1], 0.05).unwrap(), 0.0);
    }

    #[test]
    fn pce_cases() {
        let range = ValueRange::new(0.0, 10.0).unwrap();
        let gt = vec![0.0; 10];
        assert_eq!(pce(&gt, &gt, &range, 0.1).unwrap(), 100.0);
        assert_eq!(pce(&[1.0; 10], &gt, &range, 0.1).unwrap(), 0.0);
        let pred = [0.0, 0.5, -0.5, 0.99, -0.99, 0.2, 0.3, 1.0, 2.0, -1.5];
        assert_eq!(pce(&pred, &gt, &range, 0.1).unwrap(), 70.0);
    }

    #[test]
    fn percentile_cases() {
        let s: Vec<f64> = (0..=1000).map(f64::from).collect();
        let r = percentile_range(&s, 0.1, 99.9).unwrap();
        assert!((r.r_min - 1.0).abs() < 1e-9 && (r.r_max - 999.0).abs() < 1e-9);
        let r = percentile_range(&[1.0, 0.0], 0.1, 99.9).unwrap();
        assert!((r.r_min - 0.001).abs() < 1e-15 && (r.r_max - 0.999).abs() < 1e-15);
        assert!(percentile_range(&[2.0; 5], 0.1, 99.9).is_err());
    }

    #[test]
    fn pck_cases() {
        let gt = vec![vec![Vector2::zeros(); 4]];
        assert_eq!(pck(&gt, &gt, 10.0).unwrap(), 100.0);
        let pred = vec![vec![Vector2::new(11.0, 0.0), Vector2::new(3.0, 3.9), Vector2::new(6.0, 8.0), Vector2::new(0.0, 9.99)]];
        assert_eq!(pck(&pred, &gt, 10.0).unwrap(), 50.0);
        assert_eq!(pck(&pred, &gt, 5.0).unwrap(), 25.0);
    }

    #[test]
    fn motionless_ground_truth_has_no_pce() {
        use crate::synth::{synthesize, Scenario, SynthConfig};
        let cfg = SynthConfig { frames: 10, ..SynthConfig::default() };
        let out = synthesize(Scenario::Constant, &cfg).unwrap();
        let r = evaluate_motion(&out.init, &out.gt, &out.skeleton, &out.camera, None).unwrap();
        assert!(r.pce_velocity.is_empty() && r.pce_acceleration.is_empty());
        assert_eq!(r.pck.len(), 2);
    }

    #[test]
    fn kabsch_matches_horn() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let src = random_rows(&mut rng, 1, 6).remove(0);
            let dst = random_rows(&mut rng, 1, 6).remove(0);
            for scale in [false, true] {
                let a = procrustes(&src, &dst, scale).unwrap();
                let (r, s, t) = horn(&src, &dst, scale);
                assert!((a.rotation - r).norm() < 1e-9);
                assert!((a.scale - s).abs() < 1e-9);
                assert!((a.translation - t).norm() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn full_alignment_never_worse(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rng.gen_range(2..12);
            let j = rng.gen_range(1..5);
            let a = track(random_rows(&mut rng, t, j));
            let b = track(random_rows(&mut rng, t, j));
            let wa = segment_align_mpjpe(&a, &b, AlignMode::FullSegment).unwrap().mm;
            let w = segment_align_mpjpe(&a, &b, AlignMode::FirstTwoFrames).unwrap().mm;
            // squared residual is what Procrustes minimizes; mean-norm ordering can flip only in that sense
            let sq = |mode| {
                let (pa, pb) = (&a.positions, &b.positions);
                let fe = if mode == AlignMode::FullSegment { t } else { 2 };
                let fit = procrustes(&pa[..fe].concat(), &pb[..fe].concat(), false).unwrap();
                pa.iter().flatten().zip(pb.iter().flatten()).map(|(p, g)| (fit.apply(p) - g).norm_squared()).sum::<f64>()
            };
            prop_assert!(sq(AlignMode::FullSegment) <= sq(AlignMode::FirstTwoFrames) + 1e-9);
            prop_assert!(wa.is_finite() && w.is_finite());
        }

        #[test]
        fn thresholds_monotone(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = ValueRange::new(-1.0, 1.0).unwrap();
            prop_assert!(pce(&p, &g, &r, 0.01).unwrap() <= pce(&p, &g, &r, 0.05).unwrap());
            prop_assert!(pce(&p, &g, &r, 0.05).unwrap() <= pce(&p, &g, &r, 0.10).unwrap());
        }

        #[test]
        fn rigid_invariance(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_rows(&mut rng, 8, 3);
            let b = random_rows(&mut rng, 8, 3);
            let r = *axis_angle_to_matrix(AxisAngle::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 0.4)).unwrap().matrix();
            let t = Vector3::new(rng.gen_range(-5.0..5.0), 1.0, 2.0);
            let (ta, tb) = (track(a.clone()), track(b.clone()));
            let (ma, mb) = (track(rotate_all(&a, &r, &t)), track(rotate_all(&b, &r, &t)));
            for mode in [AlignMode::FullSegment, AlignMode::FirstTwoFrames] {
                let x = segment_align_mpjpe(&ta, &tb, mode).unwrap().mm;
                let y = segment_align_mpjpe(&ma, &mb, mode).unwrap().mm;
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((pa_mpjpe(&ta, &tb).unwrap() - pa_mpjpe(&ma, &mb).unwrap()).abs() < 1e-9);
            let shift = Vector3::new(2.0, -1.0, 0.5);
            let (sa, sb) = (track(rotate_all(&a, &Matrix3::identity(), &shift)), track(rotate_all(&b, &Matrix3::identity(), &shift)));
            let (v0, a0) = dynamics_errors(&ta, &tb, 0.1).unwrap();
            let (v1, a1) = dynamics_errors(&sa, &sb, 0.1).unwrap();
            prop_assert!((v0 - v1).abs() < 1e-9 && (a0 - a1).abs() < 1e-9);
        }
    }
}
