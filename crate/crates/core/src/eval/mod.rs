//! Pose metrics, model evaluation, and the before/after feature-gap
//! analysis of the mapper.

mod heatmap;

pub use heatmap::{export_heatmap, export_heatmap_pair, grid_shape};

use nalgebra::Vector3;
use rand::Rng;
use thiserror::Error;

use crate::geometry::{
    project_point, rotation_error_deg, CameraIntrinsics, GeomError, Pose,
};
use crate::model::{images_to_tensor, ModelBundle, ModelError};
use crate::scene::{HeadMode, ObjectModel, Sample};
use crate::seeds;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid thresholds: {0}")]
    BadThresholds(String),
    #[error("misaligned pair set: {0}")]
    Misaligned(String),
    #[error("bad array: {0}")]
    BadArray(String),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("geometry error: {0}")]
    Geom(#[from] GeomError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Correctness thresholds for the three pose metrics, desk-scale defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricThresholds {
    /// 2D-projection threshold in pixels.
    pub proj_px: f64,
    /// 3D-distance threshold as a fraction of the object diameter.
    pub add_frac: f64,
    /// Rotation threshold in degrees.
    pub rot_deg: f64,
    /// Translation threshold in scene units.
    pub trans_units: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        Self {
            proj_px: 2.0,
            add_frac: 0.10,
            rot_deg: 5.0,
            trans_units: 0.05,
        }
    }
}

impl MetricThresholds {
    pub fn validate(&self) -> Result<(), EvalError> {
        let all = [self.proj_px, self.add_frac, self.rot_deg, self.trans_units];
        if all.iter().any(|&v| !(v > 0.0)) {
            return Err(EvalError::BadThresholds(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Identifying context attached to a metric report.
#[derive(Debug, Clone)]
pub struct ReportMeta {
    pub regime: String,
    pub n_real_used: usize,
    pub seed: u64,
}

/// Aggregated evaluation of one trained bundle on one test set.
///
/// In corner mode the rates, the raw-head corner reprojection error, and a
/// 3D mean error over recovered poses are filled and the success curve is
/// empty; in 3D-keypoint mode the mean 3D error and success curve are
/// filled and the pose-rate fields stay zero.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub proj2d_rate: f64,
    pub pose6d_rate: f64,
    pub cm_deg_rate: f64,
    /// Mean pixel distance between the denormalized raw head corners and
    /// the ground-truth corner projections, before any PnP refinement.
    pub mean_corner_reproj_px: f64,
    pub mean_3d_error_units: f64,
    pub success_curve: Vec<(f64, f64)>,
    pub n_frames: usize,
    pub n_pnp_failures: usize,
    pub regime: String,
    pub n_real_used: usize,
    pub seed: u64,
    pub thresholds: MetricThresholds,
}

impl MetricReport {
    /// One CSV row per scalar metric: `regime,n_real,seed,metric,value`.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        let mut push = |metric: &str, value: f64| {
            rows.push(format!(
                "{},{},{},{},{}",
                self.regime, self.n_real_used, self.seed, metric, value
            ));
        };
        push("proj2d_rate", self.proj2d_rate);
        push("pose6d_rate", self.pose6d_rate);
        push("cm_deg_rate", self.cm_deg_rate);
        push("mean_corner_reproj_px", self.mean_corner_reproj_px);
        push("mean_3d_error_units", self.mean_3d_error_units);
        push("n_frames", self.n_frames as f64);
        push("n_pnp_failures", self.n_pnp_failures as f64);
        push("threshold_proj_px", self.thresholds.proj_px);
        push("threshold_add_frac", self.thresholds.add_frac);
        push("threshold_rot_deg", self.thresholds.rot_deg);
        push("threshold_trans_units", self.thresholds.trans_units);
        rows
    }

    /// Two-column CSV of the success curve, with header.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("distance,fraction\n");
        for (d, f) in &self.success_curve {
            out.push_str(&format!("{d},{f}\n"));
        }
        out
    }
}

/// Pooled statistics of per-coefficient absolute feature differences over
/// a pair set, before (|f(xs) − f(xr)|) and after (|f(xs) − g(f(xr))|) the
/// mapper, plus the per-pair arrays for heatmap export.
#[derive(Debug, Clone)]
pub struct FeatureGapReport {
    pub mu_before: f64,
    pub sigma_before: f64,
    pub mu_after: f64,
    pub sigma_after: f64,
    pub before_pairs: Vec<Vec<f64>>,
    pub after_pairs: Vec<Vec<f64>>,
}

impl FeatureGapReport {
    fn mean_per_coefficient(pairs: &[Vec<f64>]) -> Vec<f64> {
        let d = pairs[0].len();
        let mut acc = vec![0.0; d];
        for p in pairs {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        let n = pairs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Per-coefficient mean absolute difference before mapping (length D).
    pub fn mean_before(&self) -> Vec<f64> {
        Self::mean_per_coefficient(&self.before_pairs)
    }

    /// Per-coefficient mean absolute difference after mapping (length D).
    pub fn mean_after(&self) -> Vec<f64> {
        Self::mean_per_coefficient(&self.after_pairs)
    }
}

/// Number of sampled surface points added to the 8 corners when building
/// the metric point set.
pub const SURFACE_SAMPLE_COUNT: usize = 64;
/// Fixed stream seed for the surface samples of the metric point set.
pub const SURFACE_SAMPLE_SEED: u64 = 0x51de_face;

/// The 8 box corners plus `n_surface` points sampled area-uniformly on the
/// box surface with a fixed stream, so the set is identical across runs.
pub fn model_point_set(object: &ObjectModel, n_surface: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut points: Vec<Vector3<f64>> = object.corners().corners().to_vec();
    let h = object.corners().half_extents();
    // face areas for the ±x, ±y, ±z pairs
    let areas = [
        4.0 * h.y * h.z,
        4.0 * h.y * h.z,
        4.0 * h.x * h.z,
        4.0 * h.x * h.z,
        4.0 * h.x * h.y,
        4.0 * h.x * h.y,
    ];
    let total: f64 = areas.iter().sum();
    let mut rng = seeds::rng(seed, "eval.surface", 0);
    for _ in 0..n_surface {
        let mut pick = rng.gen_range(0.0..total);
        let mut face = 0;
        while face + 1 < 6 && pick >= areas[face] {
            pick -= areas[face];
            face += 1;
        }
        let (u, v) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let p = match face {
            0 => Vector3::new(h.x, u * h.y, v * h.z),
            1 => Vector3::new(-h.x, u * h.y, v * h.z),
            2 => Vector3::new(u * h.x, h.y, v * h.z),
            3 => Vector3::new(u * h.x, -h.y, v * h.z),
            4 => Vector3::new(u * h.x, v * h.y, h.z),
            _ => Vector3::new(u * h.x, v * h.y, -h.z),
        };
        points.push(p);
    }
    points
}

/// Mean pixel distance between the projections of the model points under
/// the two poses; correct iff strictly below `tau_px`.
pub fn metric_2d_projection(
    est: &Pose,
    gt: &Pose,
    points: &[Vector3<f64>],
    k: &CameraIntrinsics,
    tau_px: f64,
) -> Result<(f64, bool), EvalError> {
    if points.is_empty() {
        return Err(EvalError::Empty("metric point set".into()));
    }
    let mut sum = 0.0;
    for p in points {
        let a = project_point(p, est, k)?;
        let b = project_point(p, gt, k)?;
        sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    }
    let mean = sum / points.len() as f64;
    Ok((mean, mean < tau_px))
}

/// Mean 3D distance between the transformed model points; correct iff
/// strictly below `frac * diameter`.
pub fn metric_add(
    est: &Pose,
    gt: &Pose,
    points: &[Vector3<f64>],
    diameter: f64,
    frac: f64,
) -> (f64, bool) {
    let mut sum = 0.0;
    for p in points {
        sum += (est.transform(p) - gt.transform(p)).norm();
    }
    let mean = sum / points.len().max(1) as f64;
    (mean, mean < frac * diameter)
}

/// Rotation error (degrees) and translation error (scene units); correct
/// iff both are strictly below their thresholds.
pub fn metric_5cm5deg(est: &Pose, gt: &Pose, th: &MetricThresholds) -> (f64, f64, bool) {
    let rot = rotation_error_deg(&est.rotation, &gt.rotation);
    let trans = (est.translation - gt.translation).norm();
    (rot, trans, rot < th.rot_deg && trans < th.trans_units)
}

/// For each distance, the fraction of frames whose maximum keypoint error
/// is strictly below it.
pub fn success_curve(max_errors: &[f64], distances: &[f64]) -> Result<Vec<f64>, EvalError> {
    if max_errors.is_empty() {
        return Err(EvalError::Empty("success_curve frame list".into()));
    }
    let n = max_errors.len() as f64;
    Ok(distances
        .iter()
        .map(|&d| max_errors.iter().filter(|&&e| e < d).count() as f64 / n)
        .collect())
}

/// Default distance grid for the success curve: 0.01 to 0.50 scene units.
pub fn default_curve_distances() -> Vec<f64> {
    (1..=50).map(|i| i as f64 * 0.01).collect()
}

/// Evaluate a trained bundle on a test set. Inference routes through the
/// mapper according to each sample's domain tag and the bundle's mapper
/// flag; PnP failures count as incorrect on every rate.
pub fn evaluate_bundle(
    bundle: &ModelBundle,
    test: &[Sample],
    k: &CameraIntrinsics,
    object: &ObjectModel,
    z_ref: f64,
    th: &MetricThresholds,
    meta: &ReportMeta,
) -> Result<MetricReport, EvalError> {
    th.validate()?;
    if test.is_empty() {
        return Err(EvalError::Empty("test set".into()));
    }
    let points = model_point_set(object, SURFACE_SAMPLE_COUNT, SURFACE_SAMPLE_SEED);
    let corners = object.corners();
    let diameter = corners.diameter();
    let n = test.len();

    let mut report = MetricReport {
        proj2d_rate: 0.0,
        pose6d_rate: 0.0,
        cm_deg_rate: 0.0,
        mean_corner_reproj_px: 0.0,
        mean_3d_error_units: 0.0,
        success_curve: Vec::new(),
        n_frames: n,
        n_pnp_failures: 0,
        regime: meta.regime.clone(),
        n_real_used: meta.n_real_used,
        seed: meta.seed,
        thresholds: *th,
    };

    match bundle.arch.head_mode {
        HeadMode::Corners16 => {
            let mut n_proj = 0usize;
            let mut n_add = 0usize;
            let mut n_cm = 0usize;
            let mut reproj_sum = 0.0;
            let mut add_sum = 0.0;
            let mut add_frames = 0usize;
            for s in test {
                let raw = bundle.predict_targets(&s.image, s.domain)?;
                reproj_sum += raw_corner_reproj_px(bundle, &raw, s, k, object)?;
                match bundle.run_pnp(&raw, k, corners) {
                    Ok(sol) => {
                        match metric_2d_projection(&sol.pose, &s.pose, &points, k, th.proj_px) {
                            Ok((_, ok)) if ok => n_proj += 1,
                            _ => {}
                        }
                        let (add_err, add_ok) =
                            metric_add(&sol.pose, &s.pose, &points, diameter, th.add_frac);
                        add_sum += add_err;
                        add_frames += 1;
                        if add_ok {
                            n_add += 1;
                        }
                        let (_, _, cm_ok) = metric_5cm5deg(&sol.pose, &s.pose, th);
                        if cm_ok {
                            n_cm += 1;
                        }
                    }
                    Err(_) => report.n_pnp_failures += 1,
                }
            }
            report.proj2d_rate = n_proj as f64 / n as f64;
            report.pose6d_rate = n_add as f64 / n as f64;
            report.cm_deg_rate = n_cm as f64 / n as f64;
            report.mean_corner_reproj_px = reproj_sum / n as f64;
            if add_frames > 0 {
                report.mean_3d_error_units = add_sum / add_frames as f64;
            }
        }
        HeadMode::Keypoint3d24 => {
            let mut mean_sum = 0.0;
            let mut max_errors = Vec::with_capacity(n);
            for s in test {
                let raw = bundle.predict_targets(&s.image, s.domain)?;
                let pred = crate::geometry::denormalize_keypoint3d(&raw, z_ref);
                let mut frame_sum = 0.0;
                let mut frame_max = 0.0f64;
                for (p, c) in pred.iter().zip(corners.corners()) {
                    let d = (p - s.pose.transform(c)).norm();
                    frame_sum += d;
                    frame_max = frame_max.max(d);
                }
                mean_sum += frame_sum / corners.corners().len() as f64;
                max_errors.push(frame_max);
            }
            report.mean_3d_error_units = mean_sum / n as f64;
            let distances = default_curve_distances();
            let fractions = success_curve(&max_errors, &distances)?;
            report.success_curve = distances.into_iter().zip(fractions).collect();
        }
    }
    Ok(report)
}

/// Mean pixel distance of the raw denormalized head corners from the
/// ground-truth corner projections (pre-PnP head quality).
fn raw_corner_reproj_px(
    _bundle: &ModelBundle,
    raw: &[f64],
    s: &Sample,
    k: &CameraIntrinsics,
    object: &ObjectModel,
) -> Result<f64, EvalError> {
    let pred_px = crate::geometry::denormalize_corner_targets(raw, k);
    let mut sum = 0.0;
    for (p, c) in pred_px.iter().zip(object.corners().corners()) {
        let gt = project_point(c, &s.pose, k)?;
        sum += ((p[0] - gt[0]).powi(2) + (p[1] - gt[1]).powi(2)).sqrt();
    }
    Ok(sum / pred_px.len() as f64)
}

const GAP_CHUNK: usize = 64;

/// Per-coefficient absolute feature differences over an index-aligned pair
/// set, before and after the mapper, with pooled mean and standard
/// deviation (population) over all pairs and coefficients.
pub fn feature_gap_stats(
    bundle: &ModelBundle,
    real: &[&Sample],
    paired: &[&Sample],
) -> Result<FeatureGapReport, EvalError> {
    if real.is_empty() {
        return Err(EvalError::Empty("feature gap pair set".into()));
    }
    if real.len() != paired.len() {
        return Err(EvalError::Misaligned(format!(
            "{} real vs {} paired",
            real.len(),
            paired.len()
        )));
    }
    let d = bundle.arch.feature_dim;
    let mut before_pairs = Vec::with_capacity(real.len());
    let mut after_pairs = Vec::with_capacity(real.len());
    for (rc, pc) in real.chunks(GAP_CHUNK).zip(paired.chunks(GAP_CHUNK)) {
        let xr = images_to_tensor(&rc.iter().map(|s| &s.image).collect::<Vec<_>>());
        let xs = images_to_tensor(&pc.iter().map(|s| &s.image).collect::<Vec<_>>());
        let fr = bundle.forward_f(&xr)?;
        let fs = bundle.forward_f(&xs)?;
        let gr = bundle.forward_g(&fr)?;
        for row in 0..rc.len() {
            let mut before = Vec::with_capacity(d);
            let mut after = Vec::with_capacity(d);
            for j in 0..d {
                let s = fs.data()[row * d + j];
                before.push((s - fr.data()[row * d + j]).abs());
                after.push((s - gr.data()[row * d + j]).abs());
            }
            before_pairs.push(before);
            after_pairs.push(after);
        }
    }
    let (mu_before, sigma_before) = pooled_stats(&before_pairs);
    let (mu_after, sigma_after) = pooled_stats(&after_pairs);
    Ok(FeatureGapReport {
        mu_before,
        sigma_before,
        mu_after,
        sigma_after,
        before_pairs,
        after_pairs,
    })
}

fn pooled_stats(pairs: &[Vec<f64>]) -> (f64, f64) {
    let n = pairs.iter().map(|p| p.len()).sum::<usize>() as f64;
    let mean = pairs.iter().flatten().sum::<f64>() / n;
    let var = pairs
        .iter()
        .flatten()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{corner_targets, Rotation};
    use crate::model::init_model;
    use crate::model::ArchSpec;
    use crate::scene::{Domain, Image};
    use rand::Rng;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(120.0, 120.0, 32.0, 32.0, 64, 64).unwrap()
    }

    fn object() -> ObjectModel {
        ObjectModel::from_half_extents(Vector3::new(0.4, 0.25, 0.15)).unwrap()
    }

    fn pose(rot: Rotation, t: Vector3<f64>) -> Pose {
        Pose {
            rotation: rot,
            translation: t,
        }
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let angle: f64 = rng.gen_range(0.0..3.0);
        pose(
            Rotation::from_axis_angle(&axis, angle),
            Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(2.0..3.5)),
        )
    }

    #[test]
    fn identity_poses_score_zero_on_all_metrics() {
        let k = camera();
        let obj = object();
        let points = model_point_set(&obj, 16, 1);
        assert_eq!(points.len(), 24);
        let th = MetricThresholds::default();
        let p = pose(Rotation::identity(), Vector3::new(0.0, 0.0, 2.75));
        let (e2d, ok2d) = metric_2d_projection(&p, &p, &points, &k, th.proj_px).unwrap();
        assert_eq!(e2d, 0.0);
        assert!(ok2d);
        let (eadd, okadd) = metric_add(&p, &p, &points, obj.corners().diameter(), th.add_frac);
        assert_eq!(eadd, 0.0);
        assert!(okadd);
        let (rot, trans, okcm) = metric_5cm5deg(&p, &p, &th);
        assert!(rot < 1e-9 && trans == 0.0 && okcm);
    }

    #[test]
    fn constructed_shift_moves_every_projection_three_pixels() {
        // planar point set at constant depth; a translation of 3*z/fx in x
        // moves every projection exactly 3 px
        let k = camera();
        let points: Vec<Vector3<f64>> = (0..8)
            .map(|i| Vector3::new((i % 4) as f64 * 0.1, (i / 4) as f64 * 0.1, 0.0))
            .collect();
        let z = 2.75;
        let gt = pose(Rotation::identity(), Vector3::new(0.0, 0.0, z));
        let mut est = gt;
        est.translation.x += 3.0 * z / k.fx;
        let (err, ok) = metric_2d_projection(&est, &gt, &points, &k, 2.0).unwrap();
        assert!((err - 3.0).abs() < 1e-12, "err {err}");
        assert!(!ok);
        // symmetry in the pose arguments
        let (err_swapped, _) = metric_2d_projection(&gt, &est, &points, &k, 2.0).unwrap();
        assert!((err - err_swapped).abs() < 1e-12);
    }

    #[test]
    fn add_metric_matches_translation_norm_and_brute_force() {
        let obj = object();
        let points = model_point_set(&obj, SURFACE_SAMPLE_COUNT, SURFACE_SAMPLE_SEED);
        let mut rng = seeds::rng(7, "test.eval", 0);
        let gt = random_pose(&mut rng);
        let delta = Vector3::new(0.03, -0.02, 0.05);
        let mut est = gt;
        est.translation += delta;
        let (err, _) = metric_add(&est, &gt, &points, obj.corners().diameter(), 0.10);
        assert!((err - delta.norm()).abs() < 1e-12);
        // random pose pair vs naive loop
        let a = random_pose(&mut rng);
        let b = random_pose(&mut rng);
        let (err_ab, _) = metric_add(&a, &b, &points, obj.corners().diameter(), 0.10);
        let naive: f64 = points
            .iter()
            .map(|p| (a.transform(p) - b.transform(p)).norm())
            .sum::<f64>()
            / points.len() as f64;
        assert!((err_ab - naive).abs() < 1e-12);
    }

    #[test]
    fn cm_deg_threshold_cases() {
        let th = MetricThresholds::default();
        let t = Vector3::new(0.0, 0.0, 2.75);
        let gt = pose(Rotation::identity(), t);
        let rot4 = Rotation::from_axis_angle(&Vector3::z(), 4.0_f64.to_radians());
        let rot6 = Rotation::from_axis_angle(&Vector3::z(), 6.0_f64.to_radians());
        let near = pose(rot4, t + Vector3::new(0.03, 0.0, 0.0));
        let (_, _, ok) = metric_5cm5deg(&near, &gt, &th);
        assert!(ok);
        let rot_off = pose(rot6, t);
        assert!(!metric_5cm5deg(&rot_off, &gt, &th).2);
        let trans_off = pose(Rotation::identity(), t + Vector3::new(0.06, 0.0, 0.0));
        assert!(!metric_5cm5deg(&trans_off, &gt, &th).2);
    }

    #[test]
    fn success_curve_counts_and_monotonicity() {
        let fr = success_curve(&[1.0, 2.0, 3.0], &[2.5]).unwrap();
        assert!((fr[0] - 2.0 / 3.0).abs() < 1e-15);
        let zeros = success_curve(&[0.0; 5], &default_curve_distances()).unwrap();
        assert!(zeros.iter().all(|&f| f == 1.0));
        assert!(success_curve(&[], &[1.0]).is_err());
        let mut rng = seeds::rng(3, "test.curve", 0);
        let errors: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
        let grid: Vec<f64> = (0..60).map(|i| i as f64 * 0.02).collect();
        let fr = success_curve(&errors, &grid).unwrap();
        assert!(fr.windows(2).all(|w| w[0] <= w[1]));
        assert!(fr.iter().all(|&f| (0.0..=1.0).contains(&f)));
    }

    /// A bundle whose trunk is all zeros and whose head bias equals a fixed
    /// target vector predicts that vector for every image.
    fn rigged_bundle(target: &[f64], mode: HeadMode) -> ModelBundle {
        let arch = ArchSpec::new(64, 64, 16, mode).unwrap();
        let mut bundle = init_model(0, arch);
        for p in bundle.params.iter_mut() {
            let zeros = vec![0.0; p.value.numel()];
            if p.name == "h.b" {
                p.value = crate::autodiff::Tensor::new(p.value.shape().to_vec(), target.to_vec()).unwrap();
            } else {
                p.value = crate::autodiff::Tensor::new(p.value.shape().to_vec(), zeros).unwrap();
            }
        }
        bundle
    }

    fn sample_at(p: Pose, target: Vec<f64>) -> Sample {
        Sample {
            image: Image::new(64, 64, vec![0.5; 64 * 64]),
            pose: p,
            target,
            domain: Domain::Real,
            background_seed: 0,
        }
    }

    #[test]
    fn rigged_perfect_bundle_scores_full_rates() {
        let k = camera();
        let obj = object();
        let mut rng = seeds::rng(11, "test.rig", 0);
        let gt = random_pose(&mut rng);
        let target = corner_targets(&gt, obj.corners(), &k).unwrap();
        let bundle = rigged_bundle(&target, HeadMode::Corners16);
        let test = vec![sample_at(gt, target.clone())];
        let meta = ReportMeta {
            regime: "rigged".into(),
            n_real_used: 0,
            seed: 0,
        };
        let th = MetricThresholds::default();
        let r = evaluate_bundle(&bundle, &test, &k, &obj, 2.75, &th, &meta).unwrap();
        assert_eq!(
            (r.proj2d_rate, r.pose6d_rate, r.cm_deg_rate),
            (1.0, 1.0, 1.0)
        );
        assert!(r.mean_corner_reproj_px < 1e-9, "{}", r.mean_corner_reproj_px);
        assert!(r.mean_3d_error_units < 1e-6);
        assert_eq!(r.n_pnp_failures, 0);
        // determinism: evaluating twice yields the identical report
        let r2 = evaluate_bundle(&bundle, &test, &k, &obj, 2.75, &th, &meta).unwrap();
        assert_eq!(r.proj2d_rate, r2.proj2d_rate);
        assert_eq!(r.mean_corner_reproj_px, r2.mean_corner_reproj_px);
        // csv rows carry the thresholds
        let rows = r.csv_rows();
        assert!(rows.iter().any(|row| row.contains("threshold_proj_px,2")));
        assert_eq!(rows.len(), 11);
    }

    #[test]
    fn keypoint_mode_fills_curve_and_mean_error() {
        let k = camera();
        let obj = object();
        let mut rng = seeds::rng(13, "test.rig3d", 0);
        let gt = random_pose(&mut rng);
        let z_ref = 2.75;
        let target = crate::geometry::keypoint3d_targets(&gt, obj.corners(), z_ref);
        let bundle = rigged_bundle(&target, HeadMode::Keypoint3d24);
        let test = vec![sample_at(gt, target.clone())];
        let meta = ReportMeta {
            regime: "rigged".into(),
            n_real_used: 0,
            seed: 0,
        };
        let r = evaluate_bundle(
            &bundle,
            &test,
            &k,
            &obj,
            z_ref,
            &MetricThresholds::default(),
            &meta,
        )
        .unwrap();
        assert!(r.mean_3d_error_units < 1e-12);
        assert_eq!(r.success_curve.len(), 50);
        assert!(r.success_curve.iter().all(|&(_, f)| f == 1.0));
        assert!(r.curve_csv().lines().count() == 51);
        // rates are not defined in this mode
        assert_eq!(r.proj2d_rate, 0.0);
    }

    #[test]
    fn feature_gap_identity_mapper_and_identical_pairs() {
        let arch = ArchSpec::new(16, 16, 16, HeadMode::Corners16).unwrap();
        let bundle = init_model(5, arch);
        let mut rng = seeds::rng(17, "test.gap", 0);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let data: Vec<f32> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
            sample_with_image(Image::new(16, 16, data))
        };
        let reals: Vec<Sample> = (0..3).map(|_| mk(&mut rng)).collect();
        let paired: Vec<Sample> = (0..3).map(|_| mk(&mut rng)).collect();
        let rr: Vec<&Sample> = reals.iter().collect();
        let pp: Vec<&Sample> = paired.iter().collect();
        let gap = feature_gap_stats(&bundle, &rr, &pp).unwrap();
        // identity mapper: before and after are the same quantity, bitwise
        assert_eq!(gap.mu_before, gap.mu_after);
        assert_eq!(gap.sigma_before, gap.sigma_after);
        assert_eq!(gap.before_pairs, gap.after_pairs);
        assert_eq!(gap.before_pairs.len(), 3);
        assert_eq!(gap.before_pairs[0].len(), 16);
        // identical images: everything is exactly zero
        let gap0 = feature_gap_stats(&bundle, &pp, &pp).unwrap();
        assert_eq!(gap0.mu_before, 0.0);
        assert_eq!(gap0.sigma_after, 0.0);
        // misalignment is rejected
        let short: Vec<&Sample> = paired.iter().take(2).collect();
        assert!(matches!(
            feature_gap_stats(&bundle, &rr, &short),
            Err(EvalError::Misaligned(_))
        ));
    }

    fn sample_with_image(image: Image) -> Sample {
        Sample {
            image,
            pose: Pose {
                rotation: Rotation::identity(),
                translation: Vector3::new(0.0, 0.0, 2.75),
            },
            target: vec![0.0; 16],
            domain: Domain::Real,
            background_seed: 0,
        }
    }

    #[test]
    fn report_is_order_invariant() {
        let k = camera();
        let obj = object();
        let mut rng = seeds::rng(19, "test.order", 0);
        let mut test = Vec::new();
        for _ in 0..4 {
            let gt = random_pose(&mut rng);
            let target = corner_targets(&gt, obj.corners(), &k).unwrap();
            test.push(sample_at(gt, target));
        }
        let bundle = rigged_bundle(&test[0].target.clone(), HeadMode::Corners16);
        let meta = ReportMeta {
            regime: "r".into(),
            n_real_used: 0,
            seed: 0,
        };
        let th = MetricThresholds::default();
        let fwd = evaluate_bundle(&bundle, &test, &k, &obj, 2.75, &th, &meta).unwrap();
        test.reverse();
        let rev = evaluate_bundle(&bundle, &test, &k, &obj, 2.75, &th, &meta).unwrap();
        assert_eq!(fwd.proj2d_rate, rev.proj2d_rate);
        assert_eq!(fwd.pose6d_rate, rev.pose6d_rate);
        assert_eq!(fwd.cm_deg_rate, rev.cm_deg_rate);
        assert!((fwd.mean_corner_reproj_px - rev.mean_corner_reproj_px).abs() < 1e-12);
    }

    #[test]
    fn invalid_thresholds_rejected() {
        let th = MetricThresholds {
            proj_px: 0.0,
            ..MetricThresholds::default()
        };
        assert!(th.validate().is_err());
        assert!(MetricThresholds::default().validate().is_ok());
    }
}
