use nalgebra::{DMatrix, Matrix3, Matrix6, Vector3, Vector6};

use super::{CameraIntrinsics, GeomError, Pose, Rotation};

/// Result of pose recovery: the refined pose plus diagnostics about the
/// linear initialization and the refinement.
#[derive(Debug, Clone)]
pub struct PnpSolution {
    pub pose: Pose,
    /// Mean reprojection error (px) of the linear initialization.
    pub initial_mean_px: f64,
    /// Mean reprojection error (px) after refinement.
    pub final_mean_px: f64,
    pub iterations: usize,
}

const LM_MAX_ITERS: usize = 100;
const LM_MIN_DECREASE: f64 = 1e-12;
const LM_LAMBDA_INIT: f64 = 1e-3;
const LM_LAMBDA_CAP: f64 = 1e12;

/// Recover a pose from ≥6 3D↔2D correspondences: linear (DLT) initialization
/// with the rotation snapped to the nearest orthonormal matrix, then
/// Levenberg–Marquardt over an axis-angle increment and the translation,
/// minimizing summed squared reprojection error.
pub fn solve_pnp(
    points3d: &[Vector3<f64>],
    points2d: &[[f64; 2]],
    k: &CameraIntrinsics,
) -> Result<PnpSolution, GeomError> {
    if points3d.len() != points2d.len() {
        return Err(GeomError::CountMismatch {
            points3d: points3d.len(),
            points2d: points2d.len(),
        });
    }
    if points3d.len() < 6 {
        return Err(GeomError::TooFewPoints(points3d.len()));
    }
    check_nondegenerate(points3d)?;

    let init = dlt_init(points3d, points2d, k)?;
    let initial_sq = total_sq_error(&init, points3d, points2d, k);
    let (pose, final_sq, iterations) = refine_lm(init, points3d, points2d, k)?;

    let n = points3d.len() as f64;
    Ok(PnpSolution {
        pose,
        initial_mean_px: (initial_sq / n).sqrt(),
        final_mean_px: (final_sq / n).sqrt(),
        iterations,
    })
}

/// Reject coplanar/collinear 3D point sets via the covariance spectrum.
fn check_nondegenerate(points3d: &[Vector3<f64>]) -> Result<(), GeomError> {
    let n = points3d.len() as f64;
    let centroid: Vector3<f64> = points3d.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points3d {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = cov.symmetric_eigenvalues();
    let max = eig.amax();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 1e-12 * max.max(1e-12) {
        return Err(GeomError::Degenerate);
    }
    Ok(())
}

/// Direct linear transform on normalized image coordinates. Solves for the
/// 3×4 matrix B ≈ s·[R | t] as the null vector of the 2n×12 design matrix,
/// fixes the global sign so depths are positive, and projects the left 3×3
/// block to the nearest rotation.
fn dlt_init(
    points3d: &[Vector3<f64>],
    points2d: &[[f64; 2]],
    k: &CameraIntrinsics,
) -> Result<Pose, GeomError> {
    let n = points3d.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (x, px)) in points3d.iter().zip(points2d).enumerate() {
        let xn = (px[0] - k.cx) / k.fx;
        let yn = (px[1] - k.cy) / k.fy;
        let row = 2 * i;
        // [X 1 0 -xn*X -xn] structure over the 12 unknowns (row-major B)
        a[(row, 0)] = x.x;
        a[(row, 1)] = x.y;
        a[(row, 2)] = x.z;
        a[(row, 3)] = 1.0;
        a[(row, 8)] = -xn * x.x;
        a[(row, 9)] = -xn * x.y;
        a[(row, 10)] = -xn * x.z;
        a[(row, 11)] = -xn;
        a[(row + 1, 4)] = x.x;
        a[(row + 1, 5)] = x.y;
        a[(row + 1, 6)] = x.z;
        a[(row + 1, 7)] = 1.0;
        a[(row + 1, 8)] = -yn * x.x;
        a[(row + 1, 9)] = -yn * x.y;
        a[(row + 1, 10)] = -yn * x.z;
        a[(row + 1, 11)] = -yn;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or(GeomError::Degenerate)?;
    let mut min_idx = 0;
    for i in 1..svd.singular_values.len() {
        if svd.singular_values[i] < svd.singular_values[min_idx] {
            min_idx = i;
        }
    }
    let p = v_t.row(min_idx);
    let mut b = Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            b[(r, c)] = p[4 * r + c];
        }
    }
    let mut b4 = Vector3::new(p[3], p[7], p[11]);

    // Global sign: majority of depths must be positive.
    let mut positive = 0usize;
    for x in points3d {
        let depth = b.row(2).transpose().dot(x) + b4.z;
        if depth > 0.0 {
            positive += 1;
        }
    }
    if positive * 2 < n {
        b = -b;
        b4 = -b4;
    }

    let svd3 = b.svd(false, false);
    let scale = svd3.singular_values.iter().sum::<f64>() / 3.0;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(GeomError::Degenerate);
    }
    let rotation = Rotation::nearest(&b)?;
    let translation = b4 / scale;
    Ok(Pose::new(rotation, translation))
}

fn total_sq_error(
    pose: &Pose,
    points3d: &[Vector3<f64>],
    points2d: &[[f64; 2]],
    k: &CameraIntrinsics,
) -> f64 {
    let mut e = 0.0;
    for (x, px) in points3d.iter().zip(points2d) {
        let xc = pose.transform(x);
        if xc.z <= super::MIN_DEPTH {
            return f64::INFINITY;
        }
        let u = k.fx * xc.x / xc.z + k.cx;
        let v = k.fy * xc.y / xc.z + k.cy;
        e += (u - px[0]).powi(2) + (v - px[1]).powi(2);
    }
    e
}

/// Levenberg–Marquardt over (axis-angle increment δω applied on the left,
/// translation increment δt). λ starts at 1e-3, ×10 on a rejected step,
/// ÷10 on an accepted one; stops when the error decrease falls below 1e-12
/// or after 100 iterations.
fn refine_lm(
    init: Pose,
    points3d: &[Vector3<f64>],
    points2d: &[[f64; 2]],
    k: &CameraIntrinsics,
) -> Result<(Pose, f64, usize), GeomError> {
    let mut pose = init;
    let mut err = total_sq_error(&pose, points3d, points2d, k);
    let mut lambda = LM_LAMBDA_INIT;

    for iter in 0..LM_MAX_ITERS {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (x, px) in points3d.iter().zip(points2d) {
            let rx = pose.rotation.apply(x);
            let xc = rx + pose.translation;
            let z = xc.z;
            if z <= super::MIN_DEPTH {
                continue;
            }
            let u = k.fx * xc.x / z + k.cx;
            let v = k.fy * xc.y / z + k.cy;
            let ru = u - px[0];
            let rv = v - px[1];
            // d(u,v)/d(Xc)
            let du = Vector3::new(k.fx / z, 0.0, -k.fx * xc.x / (z * z));
            let dv = Vector3::new(0.0, k.fy / z, -k.fy * xc.y / (z * z));
            // d(Xc)/d(δω) = -[R·X]×, d(Xc)/d(δt) = I
            let neg_skew = skew(&-rx);
            let ju_w = neg_skew.transpose() * du;
            let jv_w = neg_skew.transpose() * dv;
            let ju = Vector6::new(ju_w.x, ju_w.y, ju_w.z, du.x, du.y, du.z);
            let jv = Vector6::new(jv_w.x, jv_w.y, jv_w.z, dv.x, dv.y, dv.z);
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * ru + jv * rv;
        }

        // Inner damping search for an acceptable step.
        loop {
            let a = jtj + Matrix6::identity() * lambda;
            let delta = match a.cholesky() {
                Some(ch) => ch.solve(&(-jtr)),
                None => {
                    lambda *= 10.0;
                    if lambda > LM_LAMBDA_CAP {
                        return Err(GeomError::Divergence {
                            best: Box::new(pose),
                            final_error: err,
                        });
                    }
                    continue;
                }
            };
            let dw = Vector3::new(delta[0], delta[1], delta[2]);
            let dt = Vector3::new(delta[3], delta[4], delta[5]);
            let candidate = Pose::new(
                Rotation::from_scaled_axis(&dw) * pose.rotation,
                pose.translation + dt,
            );
            let cand_err = total_sq_error(&candidate, points3d, points2d, k);
            if cand_err < err {
                let decrease = err - cand_err;
                pose = candidate;
                err = cand_err;
                lambda = (lambda / 10.0).max(1e-18);
                if decrease < LM_MIN_DECREASE {
                    return Ok((pose, err, iter + 1));
                }
                break;
            }
            lambda *= 10.0;
            if lambda > LM_LAMBDA_CAP {
                // At the damping cap: a flat step means convergence, a
                // genuinely increasing one means divergence.
                if cand_err - err < LM_MIN_DECREASE {
                    return Ok((pose, err, iter + 1));
                }
                return Err(GeomError::Divergence {
                    best: Box::new(pose),
                    final_error: err,
                });
            }
        }
    }
    Ok((pose, err, LM_MAX_ITERS))
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_point, rotation_error_deg, CornerSet};
    use rand::Rng;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(120.0, 120.0, 32.0, 32.0, 64, 64).unwrap()
    }

    fn box_points() -> Vec<Vector3<f64>> {
        CornerSet::from_half_extents(Vector3::new(0.4, 0.25, 0.15))
            .unwrap()
            .corners()
            .to_vec()
    }

    fn project_all(pose: &Pose, pts: &[Vector3<f64>], k: &CameraIntrinsics) -> Vec<[f64; 2]> {
        pts.iter().map(|p| project_point(p, pose, k).unwrap()).collect()
    }

    #[test]
    fn identity_like_case_recovers() {
        let k = camera();
        let pts = box_points();
        let gt = Pose::new(Rotation::identity(), Vector3::new(0.0, 0.0, 2.5));
        let px = project_all(&gt, &pts, &k);
        let sol = solve_pnp(&pts, &px, &k).unwrap();
        assert!(rotation_error_deg(&gt.rotation, &sol.pose.rotation) < 0.01);
        assert!((sol.pose.translation - gt.translation).norm() < 1e-4);
    }

    #[test]
    fn random_pose_recovers() {
        let k = camera();
        let pts = box_points();
        let gt = Pose::new(
            Rotation::from_axis_angle(&Vector3::new(0.2, -0.5, 0.8), 1.2),
            Vector3::new(0.15, -0.1, 2.9),
        );
        let px = project_all(&gt, &pts, &k);
        let sol = solve_pnp(&pts, &px, &k).unwrap();
        assert!(rotation_error_deg(&gt.rotation, &sol.pose.rotation) < 0.01);
        assert!((sol.pose.translation - gt.translation).norm() < 1e-4);
    }

    #[test]
    fn refinement_does_not_worsen_noisy_fit() {
        let k = camera();
        let pts = box_points();
        let gt = Pose::new(
            Rotation::from_axis_angle(&Vector3::new(1.0, 0.3, -0.2), 0.8),
            Vector3::new(-0.2, 0.1, 3.1),
        );
        let mut rng = crate::seeds::rng(7, "pnp-noise", 0);
        let px: Vec<[f64; 2]> = project_all(&gt, &pts, &k)
            .into_iter()
            .map(|p| {
                [
                    p[0] + rng.gen_range(-0.5..0.5),
                    p[1] + rng.gen_range(-0.5..0.5),
                ]
            })
            .collect();
        let sol = solve_pnp(&pts, &px, &k).unwrap();
        assert!(sol.final_mean_px <= sol.initial_mean_px + 1e-12);
    }

    #[test]
    fn coplanar_points_are_rejected() {
        let k = camera();
        let pts: Vec<Vector3<f64>> = (0..8)
            .map(|i| Vector3::new((i % 4) as f64 * 0.1, (i / 4) as f64 * 0.1, 0.0))
            .collect();
        let pose = Pose::new(Rotation::identity(), Vector3::new(0.0, 0.0, 2.5));
        let px = project_all(&pose, &pts, &k);
        assert!(matches!(solve_pnp(&pts, &px, &k), Err(GeomError::Degenerate)));
    }

    #[test]
    fn too_few_points_rejected() {
        let k = camera();
        let pts = box_points()[..5].to_vec();
        let px = vec![[32.0, 32.0]; 5];
        assert!(matches!(
            solve_pnp(&pts, &px, &k),
            Err(GeomError::TooFewPoints(5))
        ));
    }
}
