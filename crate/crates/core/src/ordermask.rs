//! Learned coding order.
//!
//! A small network looks at the sRGB guidance, the prior features and the
//! positions already coded, and proposes which latent positions to code
//! next. The proposal is a two-way probability per position, relaxed with
//! Gumbel noise and thresholded into a binary mask. After `N` steps every
//! position belongs to exactly one mask.
//!
//! Evaluation uses a fixed Gumbel sample stored with the model so that the
//! encoder and the decoder derive the same masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

/// Seed of the stored Gumbel sample ("RAWT").
pub const GUMBEL_SEED: u64 = 0x5241_5754;
/// Side length of the stored Gumbel sample; larger latent grids are rejected.
pub const GUMBEL_SIZE: usize = 512;
/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-ln(-ln u)` with `u` uniform on the open unit interval.
pub fn sample_gumbel<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        T::from_f64(-libm::log(-libm::log(u)))
    })
}

/// The stored sample: `[steps, 2, size, size]`.
pub fn gumbel_buffer(steps: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_gumbel(&[steps, 2, size, size], &mut rng)
}

/// Top-left `h x w` window of step `k` of the stored sample, as `[1,2,h,w]`.
pub fn crop_gumbel(buffer: &Tensor, k: usize, h: usize, w: usize) -> Result<Tensor> {
    let (steps, two, bh, bw) = buffer.dims4()?;
    if two != 2 || k >= steps || h > bh || w > bw {
        return Err(Error::shape(format!(
            "cannot take step {k}, {h}x{w} from Gumbel buffer {:?}",
            buffer.shape()
        )));
    }
    let src = buffer.data();
    let mut out = Vec::with_capacity(2 * h * w);
    for c in 0..2 {
        for y in 0..h {
            let row = ((k * 2 + c) * bh + y) * bw;
            out.extend_from_slice(&src[row..row + w]);
        }
    }
    Tensor::new(&[1, 2, h, w], out)
}

/// Relaxed mask `M = softmax((ln m + g) / tau)[0]` for a two-channel
/// probability map `m`. Differentiable in `m`.
pub fn gumbel_softmax<T: Scalar>(g: &mut Graph<T>, m: Var, noise: Tensor<T>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let (_, c, _, _) = g.value(m).dims4()?;
    if c != 2 || noise.shape() != g.shape(m) {
        return Err(Error::shape(format!(
            "gumbel_softmax: probabilities {:?}, noise {:?}",
            g.shape(m),
            noise.shape()
        )));
    }
    let clamped = g.clamp(m, T::from_f64(PROB_FLOOR), T::ONE);
    let logp = g.ln(clamped);
    let noise = g.constant(noise);
    let perturbed = g.add(logp, noise)?;
    let a = g.slice_channels(perturbed, 0, 1)?;
    let b = g.slice_channels(perturbed, 1, 1)?;
    let d = g.sub(a, b)?;
    let d = g.scale(d, T::from_f64(1.0 / tau));
    Ok(g.sigmoid(d))
}

/// `1` where `M >= 0.5` and the position is not yet taken, else `0`. The
/// gradient goes to `M` unchanged.
pub fn binarize<T: Scalar>(g: &mut Graph<T>, soft: Var, accumulated: Var) -> Result<Var> {
    if g.shape(soft) != g.shape(accumulated) {
        return Err(Error::shape(format!(
            "binarize: mask {:?} vs accumulated {:?}",
            g.shape(soft),
            g.shape(accumulated)
        )));
    }
    let half = T::from_f64(0.5);
    let hard: Vec<T> = g
        .value(soft)
        .data()
        .iter()
        .zip(g.value(accumulated).data())
        .map(|(&m, &a)| if m < half || a > T::ZERO { T::ZERO } else { T::ONE })
        .collect();
    let hard = g.constant(Tensor::new(g.shape(soft), hard)?);
    g.straight_through(hard, soft)
}

/// Transposed convolution of sparse latents, normalized by how many
/// unmasked positions reach each output: `deconv(z) / max(1, deconv_1(mask))`.
///
/// `w` is `[c_in, c_out, k, k]`, applied with stride 1 and "same" padding.
/// `mask` is `[n, 1, h, w]` and treated as a constant.
pub fn masked_deconv<T: Scalar>(g: &mut Graph<T>, z: Var, mask: Var, w: Var) -> Result<Var> {
    let (n, _, h, wd) = g.value(z).dims4()?;
    if g.shape(mask) != [n, 1, h, wd] {
        return Err(Error::shape(format!(
            "masked_deconv: mask {:?} for latent {:?}",
            g.shape(mask),
            g.shape(z)
        )));
    }
    let k = g.shape(w)[2];
    let pad = k / 2;
    let num = g.deconv2d(z, w, None, 1, pad)?;
    let m = g.detach(mask);
    let ones = g.constant(Tensor::ones(&[1, 1, k, k]));
    let count = g.deconv2d(m, ones, None, 1, pad)?;
    let divisor = g.value(count).map(|c| c.max(T::ONE));
    let divisor = g.constant(divisor);
    g.div(num, divisor)
}

/// The order network: two convolutions and a two-way softmax.
#[derive(Clone, Debug)]
pub struct MaskPredictor {
    pub hidden: Conv2d,
    pub out: Conv2d,
}

impl MaskPredictor {
    /// `guide` and `prior` are the channel counts of the conditioning inputs.
    /// The output bias starts so that each position is selected with
    /// probability `1 / steps`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        guide: usize,
        prior: usize,
        width: usize,
        kernel: usize,
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let p = MaskPredictor {
            hidden: Conv2d::new(store, &format!("{name}.0"), 1 + guide + prior, width, kernel, 1, rng)?,
            out: Conv2d::new(store, &format!("{name}.1"), width, 2, kernel, 1, rng)?,
        };
        if steps > 1 {
            let share = 1.0 / steps as f32;
            let b = store.get_mut(p.out.bias).value.data_mut();
            b[0] = share.ln();
            b[1] = (1.0 - share).ln();
        }
        Ok(p)
    }

    /// Two-channel probability map for the next mask.
    pub fn predict_logits(&self, g: &mut Graph, store: &ParamStore, accumulated: Var, guide: Var, prior: Var) -> Result<Var> {
        let x = g.concat(&[accumulated, guide, prior])?;
        let h = self.hidden.forward_act(g, store, x)?;
        let l = self.out.forward(g, store, h)?;
        let a = g.slice_channels(l, 0, 1)?;
        let b = g.slice_channels(l, 1, 1)?;
        let d = g.sub(a, b)?;
        let p0 = g.sigmoid(d);
        let nd = g.neg(d);
        let p1 = g.sigmoid(nd);
        g.concat(&[p0, p1])
    }
}

/// Where the Gumbel perturbation comes from.
pub enum MaskNoise<'a, R: Rng> {
    /// Fresh draws, for training.
    Fresh(&'a mut R),
    /// Crops of the stored sample, for coding.
    Stored(&'a Tensor),
}

/// Soft and hard masks of one schedule, still on the graph.
pub struct MaskSchedule {
    pub soft: Vec<Var>,
    pub hard: Vec<Var>,
}

/// Runs the order network for `steps` steps. The last mask is the
/// complement of everything chosen before it, so the masks always
/// partition the grid.
#[allow(clippy::too_many_arguments)]
pub fn generate_mask_schedule<R: Rng>(
    g: &mut Graph,
    store: &ParamStore,
    predictor: &MaskPredictor,
    guide: Var,
    prior: Var,
    steps: usize,
    tau: f64,
    mut noise: MaskNoise<'_, R>,
) -> Result<MaskSchedule> {
    if steps == 0 {
        return Err(Error::invalid("a mask schedule needs at least one step"));
    }
    let (n, _, h, w) = g.value(guide).dims4()?;
    let mut acc = g.constant(Tensor::zeros(&[n, 1, h, w]));
    let ones = g.constant(Tensor::ones(&[n, 1, h, w]));
    let mut soft = Vec::with_capacity(steps);
    let mut hard = Vec::with_capacity(steps);
    for k in 0..steps {
        let (s, m) = if k + 1 == steps {
            let rest = g.sub(ones, acc)?;
            (rest, rest)
        } else {
            let probs = predictor.predict_logits(g, store, acc, guide, prior)?;
            let sample = match &mut noise {
                MaskNoise::Fresh(rng) => sample_gumbel(&[n, 2, h, w], *rng),
                MaskNoise::Stored(buf) => {
                    if n != 1 {
                        return Err(Error::shape("stored Gumbel noise covers a single image"));
                    }
                    crop_gumbel(buf, k, h, w)?
                }
            };
            let s = gumbel_softmax(g, probs, sample, tau)?;
            let m = binarize(g, s, acc)?;
            (s, m)
        };
        acc = g.add(acc, m)?;
        soft.push(s);
        hard.push(m);
    }
    Ok(MaskSchedule { soft, hard })
}

/// Binary masks of one latent grid, in coding order.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderMaskSet {
    pub soft: Vec<Tensor>,
    pub hard: Vec<Tensor>,
    pub tau: f64,
}

impl OrderMaskSet {
    pub fn from_schedule(g: &Graph, s: &MaskSchedule, tau: f64) -> Self {
        OrderMaskSet {
            soft: s.soft.iter().map(|&v| g.value(v).clone()).collect(),
            hard: s.hard.iter().map(|&v| g.value(v).clone()).collect(),
            tau,
        }
    }

    pub fn steps(&self) -> usize {
        self.hard.len()
    }

    /// The same masks coded in the opposite order.
    pub fn reversed(&self) -> Self {
        OrderMaskSet {
            soft: self.soft.iter().rev().cloned().collect(),
            hard: self.hard.iter().rev().cloned().collect(),
            tau: self.tau,
        }
    }

    /// Checks that the hard masks are binary and partition the grid.
    pub fn check_partition(&self) -> Result<()> {
        let first = self.hard.first().ok_or_else(|| Error::invalid("empty mask set"))?;
        let mut cover = vec![0u32; first.len()];
        for (k, m) in self.hard.iter().enumerate() {
            if m.shape() != first.shape() {
                return Err(Error::shape(format!("mask {k} is {:?}, mask 0 is {:?}", m.shape(), first.shape())));
            }
            for (c, &v) in cover.iter_mut().zip(m.data()) {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::invalid(format!("mask {k} holds non-binary value {v}")));
                }
                *c += v as u32;
            }
        }
        match cover.iter().position(|&c| c != 1) {
            Some(i) => Err(Error::invalid(format!("position {i} is covered {} times", cover[i]))),
            None => Ok(()),
        }
    }

    /// For every position, the step that codes it.
    pub fn step_of(&self) -> Vec<usize> {
        let n = self.hard.first().map_or(0, |m| m.len());
        let mut out = vec![0; n];
        for (k, m) in self.hard.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(m.data()) {
                if v == 1.0 {
                    *o = k;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_unit_temperature_recovers_probability() {
        let mut g = Graph::<f64>::new();
        let m = g.leaf(Tensor::new(&[1, 2, 1, 1], vec![0.9, 0.1]).unwrap());
        let out = gumbel_softmax(&mut g, m, Tensor::zeros(&[1, 2, 1, 1]), 1.0).unwrap();
        assert!((g.value(out).data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_approaches_argmax() {
        let mut g = Graph::<f64>::new();
        let m = g.leaf(Tensor::new(&[1, 2, 1, 2], vec![0.3, 0.6, 0.7, 0.4]).unwrap());
        let noise = Tensor::new(&[1, 2, 1, 2], vec![0.5, 0.0, 0.0, 0.1]).unwrap();
        let out = gumbel_softmax(&mut g, m, noise, 1e-3).unwrap();
        // ln .3 + .5 < ln .7 and ln .6 > ln .4 + .1
        let v = g.value(out).data();
        assert!(v[0] < 1e-12 && v[1] > 1.0 - 1e-12, "{v:?}");
    }

    #[test]
    fn channel_swap_complements() {
        let mut g = Graph::<f64>::new();
        let m = g.leaf(Tensor::new(&[1, 2, 1, 1], vec![0.35, 0.65]).unwrap());
        let swapped = g.leaf(Tensor::new(&[1, 2, 1, 1], vec![0.65, 0.35]).unwrap());
        let a = gumbel_softmax(&mut g, m, Tensor::new(&[1, 2, 1, 1], vec![0.2, -0.7]).unwrap(), 0.5).unwrap();
        let b = gumbel_softmax(&mut g, swapped, Tensor::new(&[1, 2, 1, 1], vec![-0.7, 0.2]).unwrap(), 0.5).unwrap();
        assert!((g.value(a).data()[0] + g.value(b).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let mut g = Graph::<f64>::new();
        let m = g.leaf(Tensor::full(&[1, 2, 1, 1], 0.5));
        assert!(gumbel_softmax(&mut g, m, Tensor::zeros(&[1, 2, 1, 1]), 0.0).is_err());
    }

    #[test]
    fn binarize_rules() {
        let mut g = Graph::<f64>::new();
        let soft = g.leaf(Tensor::new(&[1, 1, 1, 4], vec![0.7, 0.7, 0.5, 0.49]).unwrap());
        let acc = g.constant(Tensor::new(&[1, 1, 1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        let hard = binarize(&mut g, soft, acc).unwrap();
        assert_eq!(g.value(hard).data(), &[1.0, 0.0, 1.0, 0.0]);
        let loss = g.sum(hard);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(soft).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn masked_deconv_cases() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        // full mask, constant input: interior is the mean
        let z = g.constant(Tensor::full(&[1, 1, 5, 5], 2.5));
        let full = g.constant(Tensor::ones(&[1, 1, 5, 5]));
        let out = masked_deconv(&mut g, z, full, w).unwrap();
        assert_eq!(g.value(out).data()[2 * 5 + 2], 2.5);
        // empty mask
        let zero = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        let out = masked_deconv(&mut g, zero, zero, w).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        // single contributor: each neighbour gets its kernel tap
        let taps: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let w = g.constant(Tensor::new(&[1, 1, 3, 3], taps).unwrap());
        let mut zi = vec![0.0; 25];
        zi[12] = 2.0;
        let mut mi = vec![0.0; 25];
        mi[12] = 1.0;
        let z = g.constant(Tensor::new(&[1, 1, 5, 5], zi).unwrap());
        let m = g.constant(Tensor::new(&[1, 1, 5, 5], mi).unwrap());
        let out = masked_deconv(&mut g, z, m, w).unwrap();
        let v = g.value(out).data();
        for dy in 0..3 {
            for dx in 0..3 {
                // a transposed convolution places tap (ky, kx) at offset (ky - 1, kx - 1)
                assert_eq!(v[(1 + dy) * 5 + 1 + dx], 2.0 * (dy * 3 + dx + 1) as f64);
            }
        }
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 9);
    }

    #[test]
    fn crop_takes_top_left() {
        let buf = Tensor::from_fn(&[2, 2, 4, 4], |i| i as f32);
        let c = crop_gumbel(&buf, 1, 2, 3).unwrap();
        assert_eq!(c.data(), &[32.0, 33.0, 34.0, 36.0, 37.0, 38.0, 48.0, 49.0, 50.0, 52.0, 53.0, 54.0]);
        assert!(crop_gumbel(&buf, 2, 2, 2).is_err());
        assert!(crop_gumbel(&buf, 0, 5, 2).is_err());
    }

    #[test]
    fn stored_buffer_is_reproducible() {
        let a = gumbel_buffer(1, 16, GUMBEL_SEED);
        let b = gumbel_buffer(1, 16, GUMBEL_SEED);
        assert_eq!(a, b);
        let mean = a.data().iter().map(|&v| v as f64).sum::<f64>() / a.len() as f64;
        // Gumbel(0,1) has mean equal to the Euler-Mascheroni constant
        assert!((mean - 0.5772).abs() < 0.15);
    }
}
