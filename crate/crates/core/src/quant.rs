//! Quantization and likelihoods for latent codes.
//!
//! Every latent element gets its own Gaussian `(mu, sigma)` and its own bin
//! width `delta`. Training sees either a noise relaxation (`z + delta * u`)
//! or straight-through rounding; evaluation always rounds. The likelihood of
//! a value is the Gaussian mass of the bin of width `delta` around it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{normal_cdf, normal_pdf, Graph, Scalar, Tensor, Var};

/// Likelihood floor; one count of the coder's 16-bit probability scale.
pub const P_MIN: f64 = 1.0 / 65536.0;

/// Smallest and largest predicted scale.
pub const SIGMA_BOUNDS: (f64, f64) = (1e-3, 1e3);
/// Smallest and largest predicted bin width.
pub const DELTA_BOUNDS: (f64, f64) = (1.0 / 4096.0, 2.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// `z + delta * u` with `u ~ U[-1/2, 1/2]`.
    Noise,
    /// Rounded forward, identity gradient for `z`.
    StraightThrough,
    Hard,
}

/// Per-element `(mu, sigma, delta)`. `V` is a graph handle during a forward
/// pass or a plain tensor when coding.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<V> {
    pub mu: V,
    pub sigma: V,
    pub delta: V,
}

/// Maps unbounded network outputs into `[lo, hi]`, uniformly in log space.
pub fn log_bounded<T: Scalar>(g: &mut Graph<T>, raw: Var, lo: f64, hi: f64) -> Var {
    let s = g.sigmoid(raw);
    let scaled = g.scale(s, T::from_f64(hi.ln() - lo.ln()));
    let shifted = g.add_scalar(scaled, T::from_f64(lo.ln()));
    let out = g.exp(shifted);
    // exp of the end points can land one ulp outside the range
    g.clamp(out, T::from_f64(lo), T::from_f64(hi))
}

/// Inverse of [`log_bounded`], for initializing biases.
pub fn log_bounded_inverse(value: f64, lo: f64, hi: f64) -> f64 {
    let s = (value.ln() - lo.ln()) / (hi.ln() - lo.ln());
    (s / (1.0 - s)).ln()
}

pub fn round_to_grid<T: Scalar>(z: T, delta: T) -> T {
    delta * (z / delta).round_half_even()
}

fn require_positive<T: Scalar>(g: &Graph<T>, delta: Var) -> Result<()> {
    match g.value(delta).data().iter().find(|&&d| !(d > T::ZERO)) {
        Some(d) => Err(Error::invalid(format!("bin width must be positive, got {d:?}"))),
        None => Ok(()),
    }
}

/// `z + delta * u` for a given `u` in `[-1/2, 1/2]`. Differentiable in both
/// `z` and `delta`.
pub fn relax_with<T: Scalar>(g: &mut Graph<T>, z: Var, delta: Var, u: Tensor<T>) -> Result<Var> {
    require_positive(g, delta)?;
    if u.shape() != g.shape(z) {
        return Err(Error::shape(format!("noise {:?} vs latent {:?}", u.shape(), g.shape(z))));
    }
    let u = g.constant(u);
    let step = g.mul(delta, u)?;
    g.add(z, step)
}

/// Uniform-noise relaxation of quantization, for training.
pub fn relax_uniform<T: Scalar>(g: &mut Graph<T>, z: Var, delta: Var, rng: &mut impl Rng) -> Result<Var> {
    let u = Tensor::from_fn(g.shape(z), |_| T::from_f64(rng.gen::<f64>() - 0.5));
    relax_with(g, z, delta, u)
}

/// `delta * round(z / delta)` forward. The gradient is the identity in `z`;
/// `delta` receives the gradient of `z + delta * r` with the rounding offset
/// `r` held fixed, the same form the noise relaxation gives it.
pub fn quantize_st<T: Scalar>(g: &mut Graph<T>, z: Var, delta: Var) -> Result<Var> {
    require_positive(g, delta)?;
    let zs = g.shape(z).to_vec();
    if g.shape(delta) != zs.as_slice() {
        return Err(Error::shape(format!("bin widths {:?} vs latent {:?}", g.shape(delta), zs)));
    }
    let zv = g.value(z).data();
    let dv = g.value(delta).data();
    let hard: Vec<T> = zv.iter().zip(dv).map(|(&z, &d)| round_to_grid(z, d)).collect();
    let offset: Vec<T> = zv
        .iter()
        .zip(dv)
        .map(|(&z, &d)| (z / d).round_half_even() - z / d)
        .collect();
    let hard = g.constant(Tensor::new(&zs, hard)?);
    let offset = g.constant(Tensor::new(&zs, offset)?);
    let moved = g.mul(delta, offset)?;
    let surrogate = g.add(z, moved)?;
    g.straight_through(hard, surrogate)
}

/// Probability of the bin of width `delta` centred on `z_tilde`, floored at
/// [`P_MIN`].
pub fn likelihood_noisy<T: Scalar>(g: &mut Graph<T>, z_tilde: Var, params: &GaussianParams<Var>) -> Result<Var> {
    let d = g.sub(z_tilde, params.mu)?;
    let q = g.normal_bin_mass(d, params.sigma, params.delta)?;
    Ok(g.clamp(q, T::from_f64(P_MIN), T::ONE))
}

/// `-log2` of a likelihood tensor.
pub fn bits<T: Scalar>(g: &mut Graph<T>, likelihood: Var) -> Var {
    let l = g.ln(likelihood);
    g.scale(l, T::from_f64(-std::f64::consts::LOG2_E))
}

/// Gaussian mass of the bin of width `delta` centred on `x`, in 64-bit.
pub fn bin_mass(x: f64, mu: f64, sigma: f64, delta: f64) -> f64 {
    let c = -(x - mu).abs();
    normal_cdf((c + delta / 2.0) / sigma) - normal_cdf((c - delta / 2.0) / sigma)
}

/// [`bin_mass`] floored at [`P_MIN`].
pub fn bin_probability(x: f64, mu: f64, sigma: f64, delta: f64) -> f64 {
    bin_mass(x, mu, sigma, delta).max(P_MIN)
}

/// Exact bin masses for values already on their quantization grid.
pub fn likelihood_quantized(z_hat: &Tensor, params: &GaussianParams<Tensor>) -> Result<Tensor> {
    for t in [&params.mu, &params.sigma, &params.delta] {
        if t.shape() != z_hat.shape() {
            return Err(Error::shape(format!("parameter {:?} vs latent {:?}", t.shape(), z_hat.shape())));
        }
    }
    let data = z_hat
        .data()
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let delta = params.delta.data()[i] as f64;
            if !(delta > 0.0) {
                return Err(Error::invalid(format!("bin width must be positive, got {delta}")));
            }
            let steps = z as f64 / delta;
            if (steps - steps.round()).abs() > 1e-6 {
                return Err(Error::invalid(format!("{z} is not on the grid of width {delta}")));
            }
            let p = bin_probability(z as f64, params.mu.data()[i] as f64, params.sigma.data()[i] as f64, delta);
            Ok(p as f32)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(z_hat.shape(), data)
}

/// Lower bound on the expected code length (bits) of a noise-relaxed latent
/// with bin width `delta` under a zero-mean Gaussian of scale `sigma`.
///
/// Closed form of `-log2(2/delta * int_0^delta c(x) dx - 1)`. Returns
/// `+inf` if the log argument is not positive, which only happens through
/// rounding for extreme `delta / sigma`.
pub fn bpp_lower_bound(delta: f64, sigma: f64) -> f64 {
    let a = delta / sigma;
    let phi0 = normal_pdf(0.0f64);
    // erf(a/sqrt 2) - (2/a) phi(0) (1 - exp(-a^2/2)); expm1 keeps small a accurate
    let arg = libm::erf(a * std::f64::consts::FRAC_1_SQRT_2) + 2.0 / a * phi0 * libm::expm1(-a * a / 2.0);
    if arg > 0.0 {
        (-libm::log2(arg)).max(0.0)
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateBoundCheck {
    /// Smallest Monte-Carlo mean rate over the offset grid.
    pub empirical: f64,
    pub std_error: f64,
    pub bound: f64,
    /// Offset at which the smallest rate was observed.
    pub z: f64,
}

impl RateBoundCheck {
    pub fn holds(&self) -> bool {
        self.empirical >= self.bound - 3.0 * self.std_error
    }
}

/// Monte-Carlo estimate of `min_z E_u[-log2 q(z + u)]` against the bound.
/// The same noise draws are reused at every offset.
pub fn verify_rate_bound(delta: f64, sigma: f64, samples: usize, rng: &mut impl Rng) -> RateBoundCheck {
    let samples = samples.max(1);
    let u: Vec<f64> = (0..samples).map(|_| (rng.gen::<f64>() - 0.5) * delta).collect();
    const OFFSETS: usize = 21;
    let mut best: Option<(f64, f64, f64)> = None;
    for i in 0..OFFSETS {
        let z = delta * (i as f64 / (OFFSETS - 1) as f64 * 2.0 - 1.0);
        let (mut sum, mut sq) = (0.0, 0.0);
        for &ui in &u {
            let r = -bin_probability(z + ui, 0.0, sigma, delta).log2();
            sum += r;
            sq += r * r;
        }
        let n = samples as f64;
        let mean = sum / n;
        let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
        if best.is_none_or(|(m, _, _)| mean < m) {
            best = Some((mean, (var / n).sqrt(), z));
        }
    }
    let (empirical, std_error, z) = best.expect("at least one offset");
    RateBoundCheck {
        empirical,
        std_error,
        bound: bpp_lower_bound(delta, sigma),
        z,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(g: &mut Graph<f64>, mu: f64, sigma: f64, delta: f64) -> GaussianParams<Var> {
        GaussianParams {
            mu: g.constant(Tensor::scalar(mu)),
            sigma: g.constant(Tensor::scalar(sigma)),
            delta: g.constant(Tensor::scalar(delta)),
        }
    }

    #[test]
    fn straight_through_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::new(&[3], vec![0.7, 0.0, -0.25]).unwrap());
        let d = g.constant(Tensor::new(&[3], vec![0.5, 0.3, 0.5]).unwrap());
        let q = quantize_st(&mut g, z, d).unwrap();
        assert_eq!(g.value(q).data(), &[0.5, 0.0, 0.0]);
        let loss = g.sum(q);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(z).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_grid_ties_go_to_even() {
        for k in -6i32..6 {
            let z = (k as f64 + 0.5) * 0.5;
            let q = round_to_grid(z, 0.5);
            let idx = (q / 0.5) as i64;
            assert_eq!(idx % 2, 0, "z={z} -> {q}");
            assert!((q - z).abs() == 0.25);
        }
    }

    #[test]
    fn nonpositive_delta_rejected() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::scalar(1.0));
        let d = g.constant(Tensor::scalar(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(relax_uniform(&mut g, z, d, &mut rng).is_err());
        assert!(quantize_st(&mut g, z, d).is_err());
    }

    #[test]
    fn noise_moments() {
        let n = 100_000;
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[n]));
        let d = g.constant(Tensor::full(&[n], 0.8));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = relax_uniform(&mut g, z, d, &mut rng).unwrap();
        let v = g.value(out).data();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = (0.64f64 / 12.0).sqrt();
        assert!(mean.abs() < 3.0 * sd / (n as f64).sqrt());
        assert!((var / (0.64 / 12.0) - 1.0).abs() < 0.05);
        assert!(v.iter().all(|x| x.abs() <= 0.4));
    }

    #[test]
    fn noisy_likelihood_examples() {
        let mut g = Graph::<f64>::new();
        let p = params(&mut g, 0.3, 1.0, 1.0);
        let z = g.constant(Tensor::scalar(0.3));
        let q = likelihood_noisy(&mut g, z, &p).unwrap();
        assert!((g.value(q).data()[0] - 0.382_924_922_548_026).abs() < 1e-12);

        let p = params(&mut g, 0.0, 1.0, 1e6);
        let q = likelihood_noisy(&mut g, z, &p).unwrap();
        assert!((g.value(q).data()[0] - 1.0).abs() < 1e-12);

        let p = params(&mut g, 1.0, 0.7, 0.4);
        let a = g.constant(Tensor::scalar(1.75));
        let b = g.constant(Tensor::scalar(0.25));
        let qa = likelihood_noisy(&mut g, a, &p).unwrap();
        let qb = likelihood_noisy(&mut g, b, &p).unwrap();
        assert_eq!(g.value(qa).data()[0], g.value(qb).data()[0]);
    }

    #[test]
    fn quantized_likelihood_normalizes() {
        let (mu, sigma, delta): (f64, f64, f64) = (0.37, 0.9, 0.25);
        let lo = ((mu - 8.0 * sigma) / delta).floor() as i64 - 1;
        let hi = ((mu + 8.0 * sigma) / delta).ceil() as i64 + 1;
        // the floor adds mass in the far tails, so normalization is a property
        // of the unfloored masses
        let total: f64 = (lo..=hi).map(|k| bin_mass(k as f64 * delta, mu, sigma, delta)).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quantized_likelihood_checks_grid() {
        let p = GaussianParams {
            mu: Tensor::zeros(&[2]),
            sigma: Tensor::new(&[2], vec![1.0, 1e-3]).unwrap(),
            delta: Tensor::full(&[2], 1.0),
        };
        let q = likelihood_quantized(&Tensor::zeros(&[2]), &p).unwrap();
        assert!((q.data()[0] - 0.382_925).abs() < 1e-6);
        assert!(q.data()[1] > 0.999_999);
        assert!(likelihood_quantized(&Tensor::full(&[2], 0.3), &p).is_err());
    }

    #[test]
    fn bound_values() {
        assert!((bpp_lower_bound(1.0, 1.0) - 1.4393).abs() < 1e-3);
        assert!(bpp_lower_bound(1.0, 1e-9).abs() < 1e-6);
        let mut last = 0.0;
        for i in 1..=40 {
            let b = bpp_lower_bound(1.0, i as f64 * 0.1);
            assert!(b > last);
            last = b;
        }
    }

    #[test]
    fn bound_matches_quadrature() {
        // trapezoid rule on the CDF integral, the definition of the bound
        for &(delta, sigma) in &[(1.0, 1.0), (0.25, 3.0), (4.0, 0.5)] {
            let n = 20_000;
            let h = delta / n as f64;
            let mut integral = 0.0;
            for i in 0..=n {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                integral += w * normal_cdf(i as f64 * h / sigma);
            }
            integral *= h;
            let want = -(2.0 * integral / delta - 1.0).log2();
            assert!((bpp_lower_bound(delta, sigma) - want).abs() < 1e-6, "{delta} {sigma}");
        }
    }

    #[test]
    fn rate_bound_holds_at_unit_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = verify_rate_bound(1.0, 1.0, 20_000, &mut rng);
        assert!(c.holds(), "{c:?}");
        let c = verify_rate_bound(1.0, 1e-9, 10_000, &mut rng);
        assert!(c.empirical >= 0.0);
    }

    #[test]
    fn log_bounded_round_trip() {
        let raw = log_bounded_inverse(0.25, DELTA_BOUNDS.0, DELTA_BOUNDS.1);
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::scalar(raw));
        let v = log_bounded(&mut g, r, DELTA_BOUNDS.0, DELTA_BOUNDS.1);
        assert!((g.value(v).data()[0] - 0.25).abs() < 1e-12);
        let r = g.constant(Tensor::new(&[2], vec![-1e4, 1e4]).unwrap());
        let v = log_bounded(&mut g, r, SIGMA_BOUNDS.0, SIGMA_BOUNDS.1);
        let v = g.value(v).data();
        assert!((v[0] - 1e-3).abs() < 1e-15 && (v[1] - 1e3).abs() < 1e-9);
    }
}
