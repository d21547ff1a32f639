//! Inner loops shared by the affine and convolution ops.
//!
//! Convolutions are lowered to im2col + matmul so the only hot kernel is a
//! plain row-major matmul (and its two transposed variants used by the
//! backward pass). Loop order is chosen so the innermost loop is a
//! contiguous axpy/dot that the compiler vectorizes.

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a 2D convolution with fixed padding of 1 on each side.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub const CONV_PAD: usize = 1;

impl ConvGeom {
    pub fn new(
        in_ch: usize,
        in_h: usize,
        in_w: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
    ) -> Option<Self> {
        if stride == 0 || in_h + 2 * CONV_PAD < kh || in_w + 2 * CONV_PAD < kw {
            return None;
        }
        // floor-divided output size
        let out_h = (in_h + 2 * CONV_PAD - kh) / stride + 1;
        let out_w = (in_w + 2 * CONV_PAD - kw) / stride + 1;
        Some(ConvGeom {
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            out_h,
            out_w,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unpack one image `[C, H, W]` into a `[C*kh*kw, out_h*out_w]` patch matrix.
/// Out-of-bounds taps (from the padding) contribute zeros.
pub fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    debug_assert_eq!(img.len(), g.in_ch * g.in_h * g.in_w);
    debug_assert_eq!(col.len(), g.col_rows() * g.out_spatial());
    col.fill(0.0);
    let ow = g.out_w;
    for c in 0..g.in_ch {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * g.out_spatial()..(row + 1) * g.out_spatial()];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - CONV_PAD as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - CONV_PAD as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter a patch-matrix gradient back onto the image.
pub fn col2im_acc(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    debug_assert_eq!(img.len(), g.in_ch * g.in_h * g.in_w);
    debug_assert_eq!(col.len(), g.col_rows() * g.out_spatial());
    let ow = g.out_w;
    for c in 0..g.in_ch {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * g.out_spatial()..(row + 1) * g.out_spatial()];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - CONV_PAD as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - CONV_PAD as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ix as usize] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
}
