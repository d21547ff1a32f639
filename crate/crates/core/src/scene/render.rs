use nalgebra::Vector3;

use super::{BackgroundFamily, Image, ObjectModel, SceneError};
use crate::geometry::{CameraIntrinsics, Pose};

/// Minimum camera-frame depth any box corner may have when rendering.
pub const NEAR_PLANE: f64 = 0.1;

/// Directional light, camera frame: unit vector pointing from surfaces
/// toward the light.
fn light_dir() -> Vector3<f64> {
    Vector3::new(1.0, 1.0, -2.0).normalize()
}

/// splitmix64-style avalanche; also used by the seed substream derivation.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic lattice value in [0, 1) for value noise.
fn lattice(seed: u64, family: u64, octave: u64, ix: u64, iy: u64) -> f64 {
    let mut h = mix64(seed ^ 0xa076_1d64_78bd_642f);
    h = mix64(h ^ family.wrapping_mul(0x9ddf_ea08_eb38_2d69));
    h = mix64(h ^ octave.wrapping_add(0x2545_f491_4f6c_dd1d));
    h = mix64(h ^ ix.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    h = mix64(h ^ iy.wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// One octave of value noise at pixel coordinates, lattice cell size `cell`.
fn value_noise(seed: u64, family: u64, octave: u64, x: u32, y: u32, cell: u32) -> f64 {
    let u = x as f64 / cell as f64;
    let v = y as f64 / cell as f64;
    let i = u.floor() as u64;
    let j = v.floor() as u64;
    let fu = smoothstep(u - i as f64);
    let fv = smoothstep(v - j as f64);
    let v00 = lattice(seed, family, octave, i, j);
    let v10 = lattice(seed, family, octave, i + 1, j);
    let v01 = lattice(seed, family, octave, i, j + 1);
    let v11 = lattice(seed, family, octave, i + 1, j + 1);
    let a = v00 + (v10 - v00) * fu;
    let b = v01 + (v11 - v01) * fu;
    a + (b - a) * fv
}

/// Two-octave procedural background. The families use different lattice
/// scales and disjoint hash streams.
pub(crate) fn background(family: BackgroundFamily, seed: u64, width: u32, height: u32) -> Vec<f64> {
    let (c1, c2, ftag) = match family {
        BackgroundFamily::Synthetic => (8u32, 4u32, 0u64),
        BackgroundFamily::Real => (16u32, 8u32, 1u64),
    };
    let mut out = Vec::with_capacity((width * height) as usize);
    for y in 0..height {
        for x in 0..width {
            let v = (2.0 / 3.0) * value_noise(seed, ftag, 0, x, y, c1)
                + (1.0 / 3.0) * value_noise(seed, ftag, 1, x, y, c2);
            out.push(v);
        }
    }
    out
}

/// Z-buffered flat-shaded render of the box over a procedural background.
/// Depth is interpolated as 1/z (linear in screen space); shading is
/// Lambertian with a fixed directional light; output clamped to [0, 1].
pub fn render_clean(
    pose: &Pose,
    model: &ObjectModel,
    k: &CameraIntrinsics,
    family: BackgroundFamily,
    background_seed: u64,
) -> Result<Image, SceneError> {
    let corners_cam: Vec<Vector3<f64>> = model
        .corners()
        .corners()
        .iter()
        .map(|c| pose.transform(c))
        .collect();
    for c in &corners_cam {
        if c.z <= NEAR_PLANE {
            return Err(SceneError::NearPlane(c.z));
        }
    }
    let (w, h) = (k.width, k.height);
    let mut img = background(family, background_seed, w, h);
    let mut zinv = vec![0.0f64; (w * h) as usize];
    let light = light_dir();

    // screen positions and inverse depths of all 8 corners
    let screen: Vec<[f64; 3]> = corners_cam
        .iter()
        .map(|c| {
            [
                k.fx * c.x / c.z + k.cx,
                k.fy * c.y / c.z + k.cy,
                1.0 / c.z,
            ]
        })
        .collect();

    for face in model.faces() {
        let n_cam = pose.rotation.apply(&face.normal);
        let shade = face.albedo * n_cam.dot(&light).max(0.0);
        for tri in face.triangles() {
            raster_triangle(
                &screen[tri[0]],
                &screen[tri[1]],
                &screen[tri[2]],
                shade,
                w,
                h,
                &mut img,
                &mut zinv,
            );
        }
    }

    let pixels = img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(Image::new(w, h, pixels))
}

fn edge(a: &[f64; 3], b: &[f64; 3], px: f64, py: f64) -> f64 {
    (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
}

#[allow(clippy::too_many_arguments)]
fn raster_triangle(
    p0: &[f64; 3],
    p1: &[f64; 3],
    p2: &[f64; 3],
    shade: f64,
    w: u32,
    h: u32,
    img: &mut [f64],
    zinv: &mut [f64],
) {
    let area = edge(p0, p1, p2[0], p2[1]);
    if area.abs() < 1e-12 {
        return;
    }
    let min_x = p0[0].min(p1[0]).min(p2[0]).floor().max(0.0) as u32;
    let max_x = (p0[0].max(p1[0]).max(p2[0]).ceil() as i64).min(w as i64 - 1);
    let min_y = p0[1].min(p1[1]).min(p2[1]).floor().max(0.0) as u32;
    let max_y = (p0[1].max(p1[1]).max(p2[1]).ceil() as i64).min(h as i64 - 1);
    if max_x < min_x as i64 || max_y < min_y as i64 {
        return;
    }
    for y in min_y..=max_y as u32 {
        let py = y as f64 + 0.5;
        for x in min_x..=max_x as u32 {
            let px = x as f64 + 0.5;
            let l0 = edge(p1, p2, px, py) / area;
            let l1 = edge(p2, p0, px, py) / area;
            let l2 = edge(p0, p1, px, py) / area;
            let inside = (l0 >= 0.0 && l1 >= 0.0 && l2 >= 0.0)
                || (l0 <= 0.0 && l1 <= 0.0 && l2 <= 0.0);
            if !inside {
                continue;
            }
            let winv = l0 * p0[2] + l1 * p1[2] + l2 * p2[2];
            let idx = (y * w + x) as usize;
            if winv > zinv[idx] {
                zinv[idx] = winv;
                img[idx] = shade;
            }
        }
    }
}
