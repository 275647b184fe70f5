//! Loop kernels behind the convolution ops.
//!
//! Every reduction runs in a fixed order (ascending `k` in [`gemm_acc`]), so
//! results do not depend on vector width or thread count.

use super::tensor::Scalar;

/// `c[m x n] += a[m x k] * b[k x n]`, all row-major.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    // column blocks keep four accumulator rows resident in L1
    const NB: usize = 256;
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + NB).min(n);
        let mut i = 0;
        while i + 4 <= m {
            let (head, tail) = c.split_at_mut((i + 2) * n);
            let (r0, r1) = head[i * n..].split_at_mut(n);
            let (r2, r3) = tail[..2 * n].split_at_mut(n);
            let (c0, c1, c2, c3) = (&mut r0[j0..j1], &mut r1[j0..j1], &mut r2[j0..j1], &mut r3[j0..j1]);
            for kk in 0..k {
                let w0 = a[i * k + kk];
                let w1 = a[(i + 1) * k + kk];
                let w2 = a[(i + 2) * k + kk];
                let w3 = a[(i + 3) * k + kk];
                let brow = &b[kk * n + j0..kk * n + j1];
                for ((((o0, o1), o2), o3), &bv) in c0
                    .iter_mut()
                    .zip(c1.iter_mut())
                    .zip(c2.iter_mut())
                    .zip(c3.iter_mut())
                    .zip(brow)
                {
                    *o0 += w0 * bv;
                    *o1 += w1 * bv;
                    *o2 += w2 * bv;
                    *o3 += w3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let crow = &mut c[i * n + j0..i * n + j1];
            for kk in 0..k {
                let w = a[i * k + kk];
                let brow = &b[kk * n + j0..kk * n + j1];
                for (o, &bv) in crow.iter_mut().zip(brow) {
                    *o += w * bv;
                }
            }
            i += 1;
        }
        j0 = j1;
    }
}

pub(crate) fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Geometry of one 2-d convolution over a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution reading `height x width` input.
    pub fn conv(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = height + 2 * pad;
        let span_w = width + 2 * pad;
        if stride == 0 || span_h < kernel || span_w < kernel {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (span_h - kernel) / stride + 1,
            out_w: (span_w - kernel) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[channels, height, width]` image into `[channels*k*k, out_h*out_w]`.
pub(crate) fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let k = g.kernel;
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * cols;
                let dst = &mut col[row..row + cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image buffer.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let k = g.kernel;
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * cols;
                let src = &col[row..row + cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
