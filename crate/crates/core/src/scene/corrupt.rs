use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DomainParams, Image};
use crate::seeds;

/// Simulated capture pipeline, applied in a fixed order: Gaussian blur
/// (sigma drawn from the configured range), gamma remap, vignette, additive
/// Gaussian noise, pixel dropout, final clamp to [0, 1]. Fully determined
/// by the seed.
pub fn apply_domain_transform(image: &Image, params: &DomainParams, seed: u64) -> Image {
    let mut rng = seeds::rng(seed, "corrupt", 0);
    let (w, h) = (image.width, image.height);
    let mut px: Vec<f64> = image.pixels.iter().map(|&v| v as f64).collect();

    let sigma = draw_range(&mut rng, params.blur_sigma);
    if sigma > 1e-12 {
        px = gaussian_blur(&px, w, h, sigma);
    }

    let gamma = draw_range(&mut rng, params.gamma);
    if gamma != 1.0 {
        for v in px.iter_mut() {
            *v = v.max(0.0).powf(gamma);
        }
    }

    if params.vignette > 0.0 {
        let cx = w as f64 / 2.0;
        let cy = h as f64 / 2.0;
        let r_max_sq = cx * cx + cy * cy;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let fall = 1.0 - params.vignette * (dx * dx + dy * dy) / r_max_sq;
                px[(y * w + x) as usize] *= fall;
            }
        }
    }

    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma).unwrap();
        for v in px.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    if params.dropout_prob > 0.0 {
        for v in px.iter_mut() {
            if rng.gen::<f64>() < params.dropout_prob {
                *v = 0.0;
            }
        }
    }

    let out = px.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Image::new(w, h, out)
}

fn draw_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Separable Gaussian blur, kernel radius ceil(3*sigma), clamp-to-edge
/// sampling so borders are not darkened.
fn gaussian_blur(px: &[f64], w: u32, h: u32, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let (wi, hi) = (w as i64, h as i64);
    let mut tmp = vec![0.0; px.len()];
    for y in 0..hi {
        for x in 0..wi {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = (x + ki as i64 - radius).clamp(0, wi - 1);
                acc += k * px[(y * wi + sx) as usize];
            }
            tmp[(y * wi + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; px.len()];
    for y in 0..hi {
        for x in 0..wi {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = (y + ki as i64 - radius).clamp(0, hi - 1);
                acc += k * tmp[(sy * wi + x) as usize];
            }
            out[(y * wi + x) as usize] = acc;
        }
    }
    out
}
