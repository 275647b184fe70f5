//! Synthetic (raw, sRGB) pairs from a simplified camera pipeline.
//!
//! Raw images are 3-channel, already demosaiced and linear in `[0, 1]`. The
//! pipeline applies white balance, a colour matrix, a tone curve and display
//! gamma, clips, and quantizes to 8 bits. Clipping and quantization destroy
//! information, which is what the metadata codec has to restore.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{read_bytes, read_u16, read_u8};
use crate::numerics::Tensor;

pub const RAWF_MAGIC: [u8; 4] = *b"RAWF";

/// Ranges for randomized pipelines.
pub const GAIN_RANGE: (f32, f32) = (0.7, 1.5);
pub const TONE_RANGE: (f32, f32) = (0.6, 1.4);
pub const DEFAULT_GAMMA: f32 = 1.0 / 2.2;
/// Largest weight given to the random mixing matrix against the identity.
const MIX_STRENGTH: f32 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct IspParams {
    pub wb_gains: [f32; 3],
    pub color_matrix: [[f32; 3]; 3],
    pub tone: f32,
    pub gamma: f32,
}

impl IspParams {
    pub fn identity() -> Self {
        IspParams {
            wb_gains: [1.0; 3],
            color_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tone: 1.0,
            gamma: DEFAULT_GAMMA,
        }
    }

    /// Draws gains and tone exponent uniformly from [`GAIN_RANGE`] and
    /// [`TONE_RANGE`]; the colour matrix blends the identity with a random
    /// row-stochastic matrix.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut wb_gains = [0.0; 3];
        for g in &mut wb_gains {
            *g = rng.gen_range(GAIN_RANGE.0..=GAIN_RANGE.1);
        }
        let alpha = rng.gen_range(0.0..MIX_STRENGTH);
        let mut color_matrix = [[0.0; 3]; 3];
        for (r, row) in color_matrix.iter_mut().enumerate() {
            let mut mix = [0.0f32; 3];
            for v in &mut mix {
                *v = rng.gen_range(0.05..1.0);
            }
            let total: f32 = mix.iter().sum();
            for (c, v) in row.iter_mut().enumerate() {
                let eye = if r == c { 1.0 } else { 0.0 };
                *v = (1.0 - alpha) * eye + alpha * mix[c] / total;
            }
        }
        IspParams {
            wb_gains,
            color_matrix,
            tone: rng.gen_range(TONE_RANGE.0..=TONE_RANGE.1),
            gamma: DEFAULT_GAMMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.wb_gains.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::invalid(format!("white-balance gains must be positive: {:?}", self.wb_gains)));
        }
        if !(self.tone > 0.0 && self.gamma > 0.0) {
            return Err(Error::invalid("tone and gamma exponents must be positive"));
        }
        let cond = condition_number(&self.color_matrix);
        if !(cond < 1e4) {
            return Err(Error::invalid(format!("colour matrix is ill-conditioned (cond {cond:.3e})")));
        }
        Ok(())
    }
}

/// Frobenius-norm condition number; an upper bound on the 2-norm one.
fn condition_number(m: &[[f32; 3]; 3]) -> f64 {
    let a: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    if det == 0.0 || !det.is_finite() {
        return f64::INFINITY;
    }
    let mut inv_norm = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            let cof = a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0];
            inv_norm += (cof / det).powi(2);
        }
    }
    let norm: f64 = a.iter().flatten().map(|v| v * v).sum();
    norm.sqrt() * inv_norm.sqrt()
}

/// Nearest point of the 8-bit grid. Ties go to the even code value, the
/// rounding rule used everywhere in this crate.
pub fn quantize_value(v: f32) -> f32 {
    (v * 255.0).round_ties_even() / 255.0
}

pub fn quantize_8bit(x: &Tensor) -> Tensor {
    x.map(|v| quantize_value(v.clamp(0.0, 1.0)))
}

/// Continuous pipeline output before clipping and quantization, per pixel.
fn pipeline_pixel(rgb: [f32; 3], p: &IspParams) -> [f32; 3] {
    let balanced = [rgb[0] * p.wb_gains[0], rgb[1] * p.wb_gains[1], rgb[2] * p.wb_gains[2]];
    let mut out = [0.0f32; 3];
    for (o, row) in out.iter_mut().zip(&p.color_matrix) {
        let mixed = row[0] * balanced[0] + row[1] * balanced[1] + row[2] * balanced[2];
        // mixing weights are nonnegative, the max only guards hand-made matrices
        let toned = libm::powf(mixed.max(0.0), p.tone);
        *o = libm::powf(toned, p.gamma);
    }
    out
}

fn check_image(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("{what} must be [1,3,H,W], got {:?}", t.shape())));
    }
    Ok((h, w))
}

pub fn render_srgb(raw: &Tensor, params: &IspParams) -> Result<Tensor> {
    let (h, w) = check_image(raw, "raw image")?;
    params.validate()?;
    if let Some(bad) = raw.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("raw value {bad} outside [0, 1]")));
    }
    let plane = h * w;
    let src = raw.data();
    let mut out = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        let px = pipeline_pixel([src[i], src[plane + i], src[2 * plane + i]], params);
        for c in 0..3 {
            out[c * plane + i] = quantize_value(px[c].clamp(0.0, 1.0));
        }
    }
    Tensor::new(raw.shape(), out)
}

/// Inverts the pipeline for known parameters, ignoring clipping and
/// quantization. Used to measure how much information the rendering lost.
pub fn invert_srgb(srgb: &Tensor, params: &IspParams) -> Result<Tensor> {
    let (h, w) = check_image(srgb, "sRGB image")?;
    params.validate()?;
    let m = &params.color_matrix;
    let a: Vec<f64> = m.iter().flatten().map(|&v| v as f64).collect();
    let det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) + a[2] * (a[3] * a[7] - a[4] * a[6]);
    let inv = [
        (a[4] * a[8] - a[5] * a[7]) / det,
        (a[2] * a[7] - a[1] * a[8]) / det,
        (a[1] * a[5] - a[2] * a[4]) / det,
        (a[5] * a[6] - a[3] * a[8]) / det,
        (a[0] * a[8] - a[2] * a[6]) / det,
        (a[2] * a[3] - a[0] * a[5]) / det,
        (a[3] * a[7] - a[4] * a[6]) / det,
        (a[1] * a[6] - a[0] * a[7]) / det,
        (a[0] * a[4] - a[1] * a[3]) / det,
    ];
    let plane = h * w;
    let src = srgb.data();
    let mut out = vec![0.0f32; 3 * plane];
    let e = 1.0 / (params.gamma as f64 * params.tone as f64);
    for i in 0..plane {
        let lin: Vec<f64> = (0..3).map(|c| (src[c * plane + i] as f64).powf(e)).collect();
        for c in 0..3 {
            let mixed = inv[3 * c] * lin[0] + inv[3 * c + 1] * lin[1] + inv[3 * c + 2] * lin[2];
            out[c * plane + i] = (mixed / params.wb_gains[c] as f64) as f32;
        }
    }
    Tensor::new(srgb.shape(), out)
}

// ---- procedural scenes ------------------------------------------------------

/// Smooth gradients, band-limited noise and a few hard-edged shapes.
pub fn procedural_raw(height: usize, width: usize, rng: &mut impl Rng) -> Tensor {
    let plane = height * width;
    let mut data = vec![0.0f32; 3 * plane];
    let exposure: f32 = rng.gen_range(0.5..1.1);
    for c in 0..3 {
        let base: f32 = rng.gen_range(0.1..0.5);
        let gx: f32 = rng.gen_range(-0.4..0.4);
        let gy: f32 = rng.gen_range(-0.4..0.4);
        let waves: Vec<(f32, f32, f32, f32)> = (0..4)
            .map(|_| {
                let freq = rng.gen_range(0.02..0.25) * std::f32::consts::TAU;
                let theta = rng.gen_range(0.0..std::f32::consts::TAU);
                (freq * libm::cosf(theta), freq * libm::sinf(theta), rng.gen_range(0.0..std::f32::consts::TAU), rng.gen_range(0.01..0.08))
            })
            .collect();
        for y in 0..height {
            let v = y as f32 / height.max(1) as f32;
            for x in 0..width {
                let u = x as f32 / width.max(1) as f32;
                let mut s = base + gx * (u - 0.5) + gy * (v - 0.5);
                for &(fx, fy, phase, amp) in &waves {
                    s += amp * libm::sinf(fx * x as f32 + fy * y as f32 + phase);
                }
                data[c * plane + y * width + x] = s;
            }
        }
    }
    let shapes = rng.gen_range(2..6);
    for _ in 0..shapes {
        let colour = [rng.gen_range(0.0..1.0f32), rng.gen_range(0.0..1.0f32), rng.gen_range(0.0..1.0f32)];
        let cy = rng.gen_range(0.0..height as f32);
        let cx = rng.gen_range(0.0..width as f32);
        let ry = rng.gen_range(2.0..(height as f32 / 3.0).max(3.0));
        let rx = rng.gen_range(2.0..(width as f32 / 3.0).max(3.0));
        let disk = rng.gen_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let dy = (y as f32 - cy) / ry;
                let dx = (x as f32 - cx) / rx;
                let inside = if disk { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    for c in 0..3 {
                        data[c * plane + y * width + x] = colour[c];
                    }
                }
            }
        }
    }
    for v in &mut data {
        *v = (*v * exposure).clamp(0.0, 1.0);
    }
    Tensor::new(&[1, 3, height, width], data).expect("shape built from extents")
}

// ---- pairs and datasets -----------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct PairMeta {
    pub source: String,
    pub isp: IspParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub raw: Tensor,
    pub srgb: Tensor,
    pub meta: PairMeta,
}

impl ImagePair {
    pub fn from_raw(raw: Tensor, isp: IspParams, source: impl Into<String>) -> Result<Self> {
        let srgb = render_srgb(&raw, &isp)?;
        Ok(ImagePair {
            raw,
            srgb,
            meta: PairMeta {
                source: source.into(),
                isp,
            },
        })
    }

    pub fn height(&self) -> usize {
        self.raw.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.raw.shape()[3]
    }
}

/// Where [`make_dataset`] takes scene content from.
#[derive(Clone, Debug)]
pub enum Source {
    /// Images in a directory, linearized and randomly cropped.
    Directory(PathBuf),
    Procedural,
}

fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// `count` pairs of `patch x patch` pixels. Pair `i` depends only on `seed`
/// and `i`, so generation order does not matter.
pub fn make_dataset(source: &Source, count: usize, patch: usize, seed: u64) -> Result<Vec<ImagePair>> {
    if patch == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    match source {
        Source::Procedural => (0..count)
            .map(|i| {
                let mut rng = pair_rng(seed, i);
                let raw = procedural_raw(patch, patch, &mut rng);
                let isp = IspParams::sample(&mut rng);
                ImagePair::from_raw(raw, isp, format!("procedural:{seed}:{i}"))
            })
            .collect(),
        Source::Directory(dir) => {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                        Some("png" | "ppm" | "pnm")
                    )
                })
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::invalid(format!(
                    "{} holds no PNG/PPM images; use the procedural source instead",
                    dir.display()
                )));
            }
            let mut images = Vec::with_capacity(files.len());
            for f in &files {
                let img = read_srgb(f)?;
                let (h, w) = (img.shape()[2], img.shape()[3]);
                if h < patch || w < patch {
                    return Err(Error::invalid(format!("{} is smaller than the {patch}px patch", f.display())));
                }
                images.push((f.display().to_string(), img.map(|v| libm::powf(v, 2.2))));
            }
            (0..count)
                .map(|i| {
                    let mut rng = pair_rng(seed, i);
                    let (name, img) = &images[rng.gen_range(0..images.len())];
                    let y0 = rng.gen_range(0..=img.shape()[2] - patch);
                    let x0 = rng.gen_range(0..=img.shape()[3] - patch);
                    let raw = img.crop(y0, x0, patch, patch)?;
                    let isp = IspParams::sample(&mut rng);
                    ImagePair::from_raw(raw, isp, format!("{name}@{y0},{x0}"))
                })
                .collect()
        }
    }
}

// ---- file formats -----------------------------------------------------------

pub fn write_rawf(raw: &Tensor, mut w: impl Write) -> Result<()> {
    let (h, wd) = check_image(raw, "raw image")?;
    let (h16, w16) = (
        u16::try_from(h).map_err(|_| Error::invalid("height exceeds 65535"))?,
        u16::try_from(wd).map_err(|_| Error::invalid("width exceeds 65535"))?,
    );
    w.write_all(&RAWF_MAGIC)?;
    w.write_all(&h16.to_le_bytes())?;
    w.write_all(&w16.to_le_bytes())?;
    w.write_all(&[3])?;
    let mut buf = Vec::with_capacity(raw.len() * 4);
    for v in raw.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_rawf(mut r: impl Read) -> Result<Tensor> {
    let magic: [u8; 4] = read_bytes(&mut r, 4)?.try_into().expect("four bytes");
    if magic != RAWF_MAGIC {
        return Err(Error::BadMagic {
            expected: RAWF_MAGIC,
            found: magic,
        });
    }
    let h = read_u16(&mut r)? as usize;
    let w = read_u16(&mut r)? as usize;
    let c = read_u8(&mut r)? as usize;
    if c != 3 {
        return Err(Error::Format(format!("RAWF with {c} channels, expected 3")));
    }
    let raw = read_bytes(&mut r, 3 * h * w * 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(&[1, 3, h, w], data)
}

pub fn save_rawf(raw: &Tensor, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    write_rawf(raw, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_rawf(path: &Path) -> Result<Tensor> {
    read_rawf(BufReader::new(fs::File::open(path)?))
}

/// Reads an 8-bit image (PNG or PPM) as a `[1,3,H,W]` tensor on the 8-bit grid.
pub fn read_srgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

/// Writes PNG or PPM depending on the extension.
pub fn write_srgb(srgb: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = check_image(srgb, "sRGB image")?;
    let plane = h * w;
    let src = srgb.data();
    let mut buf = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            buf.push((src[c * plane + i].clamp(0.0, 1.0) * 255.0).round_ties_even() as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized from extents");
    let format = match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("ppm" | "pnm") => image::ImageFormat::Pnm,
        _ => image::ImageFormat::Png,
    };
    img.save_with_format(path, format)?;
    Ok(())
}

/// Dataset manifest: one `raw_path<TAB>srgb_path` line per pair. Relative
/// paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (raw, srgb) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("{}:{}: expected raw<TAB>srgb", path.display(), n + 1)))?;
        out.push((base.join(raw.trim()), base.join(srgb.trim())));
    }
    Ok(out)
}

pub fn write_manifest(entries: &[(PathBuf, PathBuf)], path: &Path) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    for (raw, srgb) in entries {
        writeln!(f, "{}\t{}", raw.display(), srgb.display())?;
    }
    f.flush()?;
    Ok(())
}

/// Loads every pair listed in a manifest.
pub fn load_manifest_pairs(path: &Path) -> Result<Vec<ImagePair>> {
    read_manifest(path)?
        .into_iter()
        .map(|(raw_path, srgb_path)| {
            let raw = load_rawf(&raw_path)?;
            let srgb = read_srgb(&srgb_path)?;
            if raw.shape() != srgb.shape() {
                return Err(Error::shape(format!(
                    "{} is {:?} but {} is {:?}",
                    raw_path.display(),
                    raw.shape(),
                    srgb_path.display(),
                    srgb.shape()
                )));
            }
            Ok(ImagePair {
                raw,
                srgb,
                meta: PairMeta {
                    source: raw_path.display().to_string(),
                    isp: IspParams::identity(),
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(v: f32) -> Tensor {
        Tensor::full(&[1, 3, 1, 1], v)
    }

    #[test]
    fn zero_stays_zero_and_one_stays_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = IspParams::sample(&mut rng);
        assert!(render_srgb(&pixel(0.0), &p).unwrap().data().iter().all(|&v| v == 0.0));
        let mut unit = IspParams::identity();
        unit.tone = 1.3;
        assert!(render_srgb(&pixel(1.0), &unit).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_grey_through_display_gamma() {
        let out = render_srgb(&pixel(0.5), &IspParams::identity()).unwrap();
        let want = (0.5f64.powf(1.0 / 2.2) * 255.0).round() / 255.0;
        assert_eq!(out.data()[0] as f64, want as f32 as f64);
        assert_eq!((out.data()[0] * 255.0).round(), 186.0);
    }

    #[test]
    fn quantizer_grid_points() {
        assert_eq!(quantize_value(1.0), 1.0);
        assert_eq!(quantize_value(0.0), 0.0);
        // 0.3 * 255 is exactly 76.5 in f32; the tie goes to the even code
        assert_eq!(0.3f32 * 255.0, 76.5);
        assert_eq!(quantize_value(0.3), 76.0 / 255.0);
    }

    #[test]
    fn highlights_clip_to_white() {
        let mut p = IspParams::identity();
        p.wb_gains = [1.5, 1.5, 1.5];
        let out = render_srgb(&pixel(0.9), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn out_of_range_raw_rejected() {
        assert!(render_srgb(&pixel(1.2), &IspParams::identity()).is_err());
        assert!(render_srgb(&pixel(-0.1), &IspParams::identity()).is_err());
    }

    #[test]
    fn sampled_params_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p = IspParams::sample(&mut rng);
            p.validate().unwrap();
            assert!(p.wb_gains.iter().all(|g| (0.7..=1.5).contains(g)));
            assert!((0.6..=1.4).contains(&p.tone));
            for row in &p.color_matrix {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let mut p = IspParams::identity();
        p.color_matrix = [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(p.validate().is_err());
    }

    #[test]
    fn rawf_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = procedural_raw(5, 7, &mut rng);
        let mut bytes = Vec::new();
        write_rawf(&raw, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 2 + 1 + 3 * 5 * 7 * 4);
        assert_eq!(read_rawf(bytes.as_slice()).unwrap(), raw);
        assert!(matches!(read_rawf(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
    }
}
