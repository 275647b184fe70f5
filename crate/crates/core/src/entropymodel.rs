//! Context-adaptive Gaussian entropy model with a learned coding order.
//!
//! Each latent level is coded in `N` steps. Before step `k` the context
//! network sees the latents decoded so far (through a masked transposed
//! convolution), the mask of decoded positions, the sRGB guidance and the
//! prior features, and predicts `(mu, sigma, delta)` for every position.
//! Only the positions of mask `k` are coded at step `k`.
//!
//! Variable rate: with `beta < N` the steps from `beta` on are not
//! transmitted. Their latents are replaced by the predicted mean, and the
//! last transmitted step uses a bin width scaled by `2^gamma`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::ordermask::{generate_mask_schedule, masked_deconv, MaskNoise, MaskPredictor, MaskSchedule, OrderMaskSet};
use crate::quant::{bin_probability, bits, likelihood_noisy, log_bounded, log_bounded_inverse, quantize_st, relax_uniform, GaussianParams, QuantMode};
use crate::backbone::ArchConfig;
use crate::rangecoder::{Decoder, Encoder, FixedPmf};

/// How many steps are transmitted, and the bin-width exponent of the last one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarRateConfig {
    pub beta: u8,
    pub gamma: f32,
}

impl VarRateConfig {
    /// Every step transmitted at the learned bin width.
    pub fn full(steps: usize) -> Self {
        VarRateConfig {
            beta: steps as u8,
            gamma: 0.0,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.beta as usize > steps {
            return Err(Error::invalid(format!("beta must be in 0..={steps}, got {}", self.beta)));
        }
        if !self.gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be finite, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// `2^gamma * delta`, kept inside the scaled bin-width range.
pub fn scale_bin_width(delta: f32, gamma: f32, delta_min: f32, delta_max: f32) -> f32 {
    let s = libm::exp2f(gamma);
    let hi = s * delta_max;
    (s * delta).max(delta_min).min(hi.max(delta_min))
}

/// Context network of one latent level.
#[derive(Clone, Debug)]
pub struct ContextModel {
    pub channels: usize,
    pub order: MaskPredictor,
    /// `[channels, hidden, k, k]` kernel of the masked transposed convolution.
    pub gather: ParamId,
    pub gather_fuse: Conv2d,
    pub prior: Conv2d,
    pub head_hidden: Conv2d,
    pub head_out: Conv2d,
}

impl ContextModel {
    /// `channels` latent channels conditioned on `guide` sRGB feature
    /// channels and `prior` prior feature channels.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ArchConfig,
        channels: usize,
        guide: usize,
        prior: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (h, k) = (cfg.hidden_channels, cfg.kernel);
        let order = MaskPredictor::new(store, &format!("{name}.g_m"), guide, prior, h / 2, k, cfg.steps, rng)?;
        let gather = store.add_uniform(&format!("{name}.g_z.deconv.weight"), &[channels, h, k, k], channels * k * k, rng)?;
        let gather_fuse = Conv2d::new(store, &format!("{name}.g_z.fuse"), h + 1 + guide, h, k, 1, rng)?;
        let prior_conv = Conv2d::new(store, &format!("{name}.g_sv"), prior, h, k, 1, rng)?;
        let head_hidden = Conv2d::new(store, &format!("{name}.g_c.0"), 2 * h, 2 * h, 1, 1, rng)?;
        let head_out = Conv2d::new(store, &format!("{name}.g_c.1"), 2 * h, 3 * channels, 1, 1, rng)?;
        let sigma0 = log_bounded_inverse(1.0, cfg.sigma_min, cfg.sigma_max) as f32;
        let delta0 = log_bounded_inverse(cfg.delta_init, cfg.delta_min, cfg.delta_max) as f32;
        let bias = store.get_mut(head_out.bias).value.data_mut();
        bias[channels..2 * channels].iter_mut().for_each(|b| *b = sigma0);
        bias[2 * channels..].iter_mut().for_each(|b| *b = delta0);
        Ok(ContextModel {
            channels,
            order,
            gather,
            gather_fuse,
            prior: prior_conv,
            head_hidden,
            head_out,
        })
    }

    /// Features of the prior, shared by all steps.
    pub fn prior_features(&self, g: &mut Graph, store: &ParamStore, prior: Var) -> Result<Var> {
        self.prior.forward_act(g, store, prior)
    }

    /// `(mu, sigma, delta)` for every position, given the partially decoded
    /// latents and the mask of decoded positions.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_step_params(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ArchConfig,
        partial: Var,
        accumulated: Var,
        guide: Var,
        prior_features: Var,
    ) -> Result<GaussianParams<Var>> {
        let w = g.param(store, self.gather);
        let gathered = masked_deconv(g, partial, accumulated, w)?;
        let x = g.concat(&[gathered, accumulated, guide])?;
        let ctx = self.gather_fuse.forward_act(g, store, x)?;
        let x = g.concat(&[ctx, prior_features])?;
        let x = self.head_hidden.forward_act(g, store, x)?;
        let out = self.head_out.forward(g, store, x)?;
        let c = self.channels;
        let mu = g.slice_channels(out, 0, c)?;
        let sraw = g.slice_channels(out, c, c)?;
        let draw = g.slice_channels(out, 2 * c, c)?;
        Ok(GaussianParams {
            mu,
            sigma: log_bounded(g, sraw, cfg.sigma_min, cfg.sigma_max),
            delta: log_bounded(g, draw, cfg.delta_min, cfg.delta_max),
        })
    }

    /// Training pass over all steps with fresh Gumbel noise. Returns the
    /// relaxed latents and the total estimated bits.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_train(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ArchConfig,
        z: Var,
        guide: Var,
        prior: Var,
        mode: QuantMode,
        rng: &mut impl Rng,
    ) -> Result<LevelForward> {
        let (n, c, h, w) = g.value(z).dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!("context model for {} channels got {c}", self.channels)));
        }
        let masks = generate_mask_schedule(g, store, &self.order, guide, prior, cfg.steps, cfg.tau, MaskNoise::Fresh(rng))?;
        let pf = self.prior_features(g, store, prior)?;
        let mut partial = g.constant(Tensor::zeros(&[n, c, h, w]));
        let mut acc = g.constant(Tensor::zeros(&[n, 1, h, w]));
        let mut total = g.constant(Tensor::scalar(0.0));
        for &mask in &masks.hard {
            let p = self.predict_step_params(g, store, cfg, partial, acc, guide, pf)?;
            let zq = match mode {
                QuantMode::Noise => relax_uniform(g, z, p.delta, rng)?,
                QuantMode::StraightThrough | QuantMode::Hard => quantize_st(g, z, p.delta)?,
            };
            let q = likelihood_noisy(g, zq, &p)?;
            let b = bits(g, q);
            let b = g.mul(b, mask)?;
            let b = g.sum(b);
            total = g.add(total, b)?;
            let kept = g.mul(zq, mask)?;
            partial = g.add(partial, kept)?;
            acc = g.add(acc, mask)?;
        }
        Ok(LevelForward {
            z_hat: partial,
            bits: total,
            masks,
        })
    }

    /// Masks used for coding, from the stored Gumbel sample.
    pub fn coding_masks(&self, store: &ParamStore, cfg: &ArchConfig, gumbel: &Tensor, guide: &Tensor, prior: &Tensor) -> Result<OrderMaskSet> {
        let mut g = Graph::new();
        let gv = g.constant(guide.clone());
        let pv = g.constant(prior.clone());
        let s = generate_mask_schedule::<rand_chacha::ChaCha8Rng>(&mut g, store, &self.order, gv, pv, cfg.steps, cfg.tau, MaskNoise::Stored(gumbel))?;
        Ok(OrderMaskSet::from_schedule(&g, &s, cfg.tau))
    }
}

pub struct LevelForward {
    pub z_hat: Var,
    pub bits: Var,
    pub masks: MaskSchedule,
}

/// Per-position parameters of one coding step, flattened in `(c, y, x)` order.
pub struct StepParams<'a> {
    pub mu: &'a [f32],
    pub sigma: &'a [f32],
    pub delta: &'a [f32],
}

/// Produces the integer symbols of one step: by quantizing and writing them,
/// by reading them back, or by quantizing and only counting.
pub trait SymbolCoder {
    fn code(&mut self, positions: &[usize], params: &StepParams<'_>) -> Result<Vec<i64>>;
}

fn symbol_of(z: f32, delta: f32) -> Result<i64> {
    let j = libm::rintf(z / delta);
    if !j.is_finite() || j.abs() > (1 << 24) as f32 {
        return Err(Error::Unencodable {
            symbol: if j.is_finite() { j as i64 } else { i64::MAX },
            reason: format!("latent {z} with bin width {delta} is out of range"),
        });
    }
    Ok(j as i64)
}

fn symbol_cost(j: i64, mu: f32, sigma: f32, delta: f32) -> f64 {
    let x = (j as f32 * delta) as f64;
    -bin_probability(x, mu as f64, sigma as f64, delta as f64).log2()
}

/// Quantizes and accumulates the model's estimated cost without writing.
pub struct SymbolEstimator<'a> {
    pub z: &'a [f32],
    pub estimated_bits: f64,
}

impl SymbolCoder for SymbolEstimator<'_> {
    fn code(&mut self, positions: &[usize], p: &StepParams<'_>) -> Result<Vec<i64>> {
        positions
            .iter()
            .map(|&i| {
                let j = symbol_of(self.z[i], p.delta[i])?;
                self.estimated_bits += symbol_cost(j, p.mu[i], p.sigma[i], p.delta[i]);
                Ok(j)
            })
            .collect()
    }
}

/// Quantizes and range-codes.
pub struct SymbolEncoder<'a> {
    pub z: &'a [f32],
    pub estimated_bits: f64,
    pub encoder: Encoder,
}

impl<'a> SymbolEncoder<'a> {
    pub fn new(z: &'a [f32]) -> Self {
        SymbolEncoder {
            z,
            estimated_bits: 0.0,
            encoder: Encoder::new(),
        }
    }
}

impl SymbolCoder for SymbolEncoder<'_> {
    fn code(&mut self, positions: &[usize], p: &StepParams<'_>) -> Result<Vec<i64>> {
        positions
            .iter()
            .map(|&i| {
                let j = symbol_of(self.z[i], p.delta[i])?;
                let pmf = FixedPmf::gaussian(p.mu[i] as f64, p.sigma[i] as f64, p.delta[i] as f64)?;
                self.encoder.encode(j, &pmf)?;
                self.estimated_bits += symbol_cost(j, p.mu[i], p.sigma[i], p.delta[i]);
                Ok(j)
            })
            .collect()
    }
}

pub struct SymbolDecoder<'a> {
    pub decoder: Decoder<'a>,
}

impl SymbolCoder for SymbolDecoder<'_> {
    fn code(&mut self, positions: &[usize], p: &StepParams<'_>) -> Result<Vec<i64>> {
        positions
            .iter()
            .map(|&i| {
                let pmf = FixedPmf::gaussian(p.mu[i] as f64, p.sigma[i] as f64, p.delta[i] as f64)?;
                self.decoder.decode(&pmf)
            })
            .collect()
    }
}

/// Runs the step loop shared by the encoder, the decoder and the rate
/// estimator. Returns the reconstructed latents `[1, C, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn code_level(
    ctx: &ContextModel,
    store: &ParamStore,
    cfg: &ArchConfig,
    guide: &Tensor,
    prior: &Tensor,
    masks: &OrderMaskSet,
    rate: VarRateConfig,
    coder: &mut dyn SymbolCoder,
) -> Result<Tensor> {
    rate.validate(masks.steps())?;
    masks.check_partition()?;
    let (_, _, h, w) = guide.dims4()?;
    let (c, hw) = (ctx.channels, h * w);
    if masks.hard[0].shape() != [1, 1, h, w] {
        return Err(Error::shape(format!("masks {:?} for a {h}x{w} latent grid", masks.hard[0].shape())));
    }
    let prior_features = {
        let mut g = Graph::new();
        let p = g.constant(prior.clone());
        let f = ctx.prior_features(&mut g, store, p)?;
        g.value(f).clone()
    };
    let mut partial = Tensor::zeros(&[1, c, h, w]);
    let mut acc = Tensor::zeros(&[1, 1, h, w]);
    let (dmin, dmax) = (cfg.delta_min as f32, cfg.delta_max as f32);
    let beta = rate.beta as usize;
    for (k, mask) in masks.hard.iter().enumerate() {
        let mut g = Graph::new();
        let pv = g.constant(partial.clone());
        let av = g.constant(acc.clone());
        let gv = g.constant(guide.clone());
        let fv = g.constant(prior_features.clone());
        let params = ctx.predict_step_params(&mut g, store, cfg, pv, av, gv, fv)?;
        let mu = g.value(params.mu).data();
        let sigma = g.value(params.sigma).data();
        let mut delta = g.value(params.delta).data().to_vec();
        let positions: Vec<usize> = (0..c)
            .flat_map(|ch| {
                mask.data()
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m == 1.0)
                    .map(move |(i, _)| ch * hw + i)
            })
            .collect();
        let out = partial.data_mut();
        if k < beta {
            if k + 1 == beta {
                for &i in &positions {
                    delta[i] = scale_bin_width(delta[i], rate.gamma, dmin, dmax);
                }
            }
            let step = StepParams { mu, sigma, delta: &delta };
            let symbols = coder.code(&positions, &step)?;
            for (&i, &j) in positions.iter().zip(&symbols) {
                out[i] = j as f32 * delta[i];
            }
        } else {
            for &i in &positions {
                out[i] = delta[i] * libm::rintf(mu[i] / delta[i]);
            }
        }
        for (a, &m) in acc.data_mut().iter_mut().zip(mask.data()) {
            *a += m;
        }
    }
    Ok(partial)
}

/// Bits spent on one image, per level (hyper level first).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RateReport {
    pub pixels: usize,
    pub estimated_bits: [f64; 2],
    /// Payload bits of the range-coded streams; zero when only estimating.
    pub actual_bits: [u64; 2],
}

impl RateReport {
    pub fn estimated_bpp(&self) -> f64 {
        self.estimated_bits.iter().sum::<f64>() / self.pixels as f64
    }

    pub fn actual_bpp(&self) -> f64 {
        self.actual_bits.iter().sum::<u64>() as f64 / self.pixels as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_width_scaling() {
        assert_eq!(scale_bin_width(0.25, 0.0, 1.0 / 4096.0, 2.0), 0.25);
        assert_eq!(scale_bin_width(0.25, 1.0, 1.0 / 4096.0, 2.0), 0.5);
        assert_eq!(scale_bin_width(0.25, -2.0, 1.0 / 4096.0, 2.0), 0.0625);
        // upper bound scales with the exponent
        assert_eq!(scale_bin_width(2.0, 1.0, 1.0 / 4096.0, 2.0), 4.0);
        // lower bound does not
        assert_eq!(scale_bin_width(1.0 / 4096.0, -3.0, 1.0 / 4096.0, 2.0), 1.0 / 4096.0);
    }

    #[test]
    fn rate_config_validation() {
        assert!(VarRateConfig { beta: 0, gamma: 0.0 }.validate(4).is_ok());
        assert!(VarRateConfig { beta: 5, gamma: 0.0 }.validate(4).is_err());
        assert!(VarRateConfig { beta: 2, gamma: f32::NAN }.validate(4).is_err());
        assert!(VarRateConfig { beta: 4, gamma: -1.5 }.validate(4).is_ok());
    }

    #[test]
    fn symbols_round_half_even() {
        assert_eq!(symbol_of(0.125, 0.25).unwrap(), 0);
        assert_eq!(symbol_of(0.375, 0.25).unwrap(), 2);
        assert_eq!(symbol_of(-0.375, 0.25).unwrap(), -2);
        assert!(symbol_of(f32::INFINITY, 0.25).is_err());
    }
}
