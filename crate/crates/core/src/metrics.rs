//! PSNR, SSIM and bits per pixel.

use crate::container::Container;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub bpp: f64,
}

impl QualityReport {
    pub fn measure(reference: &Tensor, reconstruction: &Tensor, bpp: f64) -> Result<Self> {
        Ok(QualityReport {
            psnr_db: psnr(reference, reconstruction)?,
            ssim: ssim(reference, reconstruction)?,
            bpp,
        })
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    Ok(s / a.len() as f64)
}

/// Peak signal 1.0. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the valid region of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid region, averaged over channels, for images in `[0, 1]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (n, c, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let hw = h * w;
    let mut total = 0.0;
    for p in 0..n * c {
        let x: Vec<f64> = a.data()[p * hw..(p + 1) * hw].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[p * hw..(p + 1) * hw].iter().map(|&v| v as f64).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &win);
        let my = filter_valid(&y, h, w, &win);
        let sxx = filter_valid(&prod(&x, &x), h, w, &win);
        let syy = filter_valid(&prod(&y, &y), h, w, &win);
        let sxy = filter_valid(&prod(&x, &y), h, w, &win);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / (n * c) as f64)
}

/// Payload bits over pixel count; header bytes are not counted.
pub fn bpp(container: &Container) -> f64 {
    container.bpp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen::<f32>())
    }

    /// Direct 2-d window sums, no separability.
    fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let (n, c, h, w) = a.dims4().unwrap();
        let r = 5i64;
        let mut win = vec![vec![0.0f64; 11]; 11];
        let mut s = 0.0;
        for i in -r..=r {
            for j in -r..=r {
                let v = (-((i * i + j * j) as f64) / (2.0 * 1.5 * 1.5)).exp();
                win[(i + r) as usize][(j + r) as usize] = v;
                s += v;
            }
        }
        let (c1, c2) = (0.0001, 0.0009);
        let mut total = 0.0;
        for p in 0..n * c {
            let at = |t: &Tensor, y: usize, x: usize| t.data()[p * h * w + y * w + x] as f64;
            let mut acc = 0.0;
            let mut count = 0;
            for y in 0..h - 10 {
                for x in 0..w - 10 {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = win[i][j] / s;
                            let (u, v) = (at(a, y + i, x + j), at(b, y + i, x + j));
                            mx += wt * u;
                            my += wt * v;
                            xx += wt * u * u;
                            yy += wt * v * v;
                            xy += wt * u * v;
                        }
                    }
                    let (vx, vy, cv) = (xx - mx * mx, yy - my * my, xy - mx * my);
                    acc += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / (n * c) as f64
    }

    #[test]
    fn psnr_cases() {
        let a = random(&[1, 3, 8, 8], 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let z = Tensor::zeros(&[1, 1, 4, 4]);
        let off = Tensor::full(&[1, 1, 4, 4], 0.1);
        assert!((psnr(&z, &off).unwrap() - 20.0).abs() < 1e-6);
        let b = random(&[1, 3, 8, 8], 2);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &z).is_err());
    }

    #[test]
    fn ssim_cases() {
        let a = random(&[1, 3, 20, 17], 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        let b = random(&[1, 3, 20, 17], 4);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-4);
        let smooth = a.map(|v| 0.5 + 0.1 * v);
        let near = smooth.map(|v| v + 0.01);
        assert!((ssim(&smooth, &near).unwrap() - ssim_oracle(&smooth, &near)).abs() < 1e-4);
        assert!(ssim(&Tensor::zeros(&[1, 1, 10, 30]), &Tensor::zeros(&[1, 1, 10, 30])).is_err());
    }

    #[test]
    fn bpp_counts_payload_only() {
        use crate::entropymodel::VarRateConfig;
        use crate::rangecoder::Bitstream;
        let c = Container {
            width: 100,
            height: 100,
            rate: VarRateConfig::full(4),
            model_hash: [0; 8],
            levels: vec![Bitstream::new(vec![0; 100]), Bitstream::new(vec![0; 25])],
        };
        assert!((bpp(&c) - 0.1).abs() < 1e-12);
    }
}
