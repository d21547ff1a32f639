//! Rigid-pose math, pinhole projection, box-corner pose parameterization,
//! and pose recovery from predicted corner reprojections.

mod pnp;

pub use pnp::{solve_pnp, PnpSolution};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point at or behind the camera plane (z = {z})")]
    BehindCamera { z: f64 },
    #[error("matrix is not a valid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid corner set: {0}")]
    InvalidCorners(String),
    #[error("pose solving needs at least 6 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("correspondence count mismatch: {points3d} 3D points vs {points2d} pixels")]
    CountMismatch { points3d: usize, points2d: usize },
    #[error("degenerate (coplanar or collinear) 3D point configuration")]
    Degenerate,
    #[error("refinement diverged (residual {final_error:.6e}); best pose attached")]
    Divergence { best: Box<Pose>, final_error: f64 },
}

/// Tolerance on the orthonormality and determinant invariants of [`Rotation`].
pub const ROTATION_TOL: f64 = 1e-9;

/// A proper rotation matrix (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validate and wrap a matrix; orthonormality and determinant are
    /// checked within [`ROTATION_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeomError> {
        let gram = m.transpose() * m;
        let dev = (gram - Matrix3::identity()).amax();
        if dev > ROTATION_TOL {
            return Err(GeomError::InvalidRotation(format!(
                "max |R'R - I| = {dev:.3e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeomError::InvalidRotation(format!("det = {det:.12}")));
        }
        Ok(Rotation(m))
    }

    /// Internal constructor for matrices known-good by construction
    /// (products of rotations, exponential map outputs).
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle_rad: f64) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(*axis),
            angle_rad,
        );
        Rotation(*r.matrix())
    }

    /// Exponential map: rotation by ||w|| radians about w.
    pub fn from_scaled_axis(w: &Vector3<f64>) -> Self {
        let r = nalgebra::Rotation3::from_scaled_axis(*w);
        Rotation(*r.matrix())
    }

    /// Nearest proper rotation to an arbitrary matrix (orthogonal Procrustes
    /// via SVD, smallest singular direction flipped if needed for det +1).
    pub fn nearest(m: &Matrix3<f64>) -> Result<Self, GeomError> {
        let svd = m.svd(true, true);
        let u = svd.u.ok_or_else(|| GeomError::InvalidRotation("SVD failed".into()))?;
        let v_t = svd.v_t.ok_or_else(|| GeomError::InvalidRotation("SVD failed".into()))?;
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            // flip the direction of least evidence
            let mut k = 0;
            for i in 1..3 {
                if svd.singular_values[i] < svd.singular_values[k] {
                    k = i;
                }
            }
            let mut u2 = u;
            for row in 0..3 {
                u2[(row, k)] = -u2[(row, k)];
            }
            r = u2 * v_t;
        }
        Self::from_matrix(r)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// Angle between two rotations in degrees, from the trace of the relative
/// rotation, clamped for numerical safety.
pub fn rotation_error_deg(ra: &Rotation, rb: &Rotation) -> f64 {
    let rel = ra.matrix().transpose() * rb.matrix();
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Rigid transform of the object into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Object-frame point into camera frame: R·X + t.
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(x) + self.translation
    }
}

/// Pinhole camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeomError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeomError::InvalidIntrinsics(format!("fx={fx}, fy={fy}")));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }
}

/// Minimum camera-frame depth accepted by projection.
pub const MIN_DEPTH: f64 = 1e-6;

/// Project an object-frame point through a pose and pinhole camera.
pub fn project_point(
    x: &Vector3<f64>,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<[f64; 2], GeomError> {
    let xc = pose.transform(x);
    project_camera_point(&xc, k)
}

/// Project a camera-frame point.
pub fn project_camera_point(xc: &Vector3<f64>, k: &CameraIntrinsics) -> Result<[f64; 2], GeomError> {
    if xc.z <= MIN_DEPTH {
        return Err(GeomError::BehindCamera { z: xc.z });
    }
    Ok([
        k.fx * xc.x / xc.z + k.cx,
        k.fy * xc.y / xc.z + k.cy,
    ])
}

/// The 8 corners of a rectangular box in object frame, in a fixed order:
/// lexicographic over the coordinate signs (-,-,-), (-,-,+), ..., (+,+,+).
#[derive(Debug, Clone, PartialEq)]
pub struct CornerSet {
    corners: [Vector3<f64>; 8],
    diameter: f64,
}

impl CornerSet {
    /// Corners of the box spanning ±half_extents. Extents must be positive
    /// and pairwise distinct so the box has no rotational symmetry ties.
    pub fn from_half_extents(h: Vector3<f64>) -> Result<Self, GeomError> {
        if !(h.x > 0.0 && h.y > 0.0 && h.z > 0.0) {
            return Err(GeomError::InvalidCorners(format!("non-positive extents {h:?}")));
        }
        if h.x == h.y || h.y == h.z || h.x == h.z {
            return Err(GeomError::InvalidCorners(
                "half extents must be pairwise distinct".into(),
            ));
        }
        let mut corners = [Vector3::zeros(); 8];
        let mut i = 0;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    corners[i] = Vector3::new(sx * h.x, sy * h.y, sz * h.z);
                    i += 1;
                }
            }
        }
        let diameter = 2.0 * h.norm();
        Ok(Self { corners, diameter })
    }

    pub fn corners(&self) -> &[Vector3<f64>; 8] {
        &self.corners
    }

    /// Length of the box diagonal.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn half_extents(&self) -> Vector3<f64> {
        // corner 7 is (+,+,+)
        self.corners[7]
    }
}

/// Normalized 2D reprojections of the 8 corners: 16 values, each corner as
/// ((u-cx)/(width/2), (v-cy)/(height/2)) in corner order.
pub fn corner_targets(
    pose: &Pose,
    corners: &CornerSet,
    k: &CameraIntrinsics,
) -> Result<Vec<f64>, GeomError> {
    let half_w = k.width as f64 / 2.0;
    let half_h = k.height as f64 / 2.0;
    let mut out = Vec::with_capacity(16);
    for c in corners.corners() {
        let [u, v] = project_point(c, pose, k)?;
        out.push((u - k.cx) / half_w);
        out.push((v - k.cy) / half_h);
    }
    Ok(out)
}

/// Inverse of the corner-target normalization: 16 values back to 8 pixel points.
pub fn denormalize_corner_targets(targets: &[f64], k: &CameraIntrinsics) -> Vec<[f64; 2]> {
    let half_w = k.width as f64 / 2.0;
    let half_h = k.height as f64 / 2.0;
    targets
        .chunks_exact(2)
        .map(|t| [t[0] * half_w + k.cx, t[1] * half_h + k.cy])
        .collect()
}

/// Camera-frame corner coordinates scaled by 1/z_ref: 24 values in corner order.
pub fn keypoint3d_targets(pose: &Pose, corners: &CornerSet, z_ref: f64) -> Vec<f64> {
    assert!(z_ref > 0.0, "z_ref must be positive");
    let mut out = Vec::with_capacity(24);
    for c in corners.corners() {
        let xc = pose.transform(c) / z_ref;
        out.extend_from_slice(&[xc.x, xc.y, xc.z]);
    }
    out
}

/// Inverse of the keypoint3d normalization: 24 values to 8 camera-frame points.
pub fn denormalize_keypoint3d(targets: &[f64], z_ref: f64) -> Vec<Vector3<f64>> {
    targets
        .chunks_exact(3)
        .map(|t| Vector3::new(t[0], t[1], t[2]) * z_ref)
        .collect()
}
