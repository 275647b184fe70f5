//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rawtide::numerics::{Graph, Tensor, Var};
use rawtide::ordermask::{binarize, gumbel_softmax, masked_deconv};
use rawtide::quant::{bits, likelihood_noisy, log_bounded, quantize_st, relax_with, GaussianParams};
use rawtide::Result;

pub type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// A differentiable function of some inputs, plus an optional surrogate
/// used for finite differences when the forward value is piecewise constant.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: Build,
    pub surrogate: Option<Build>,
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so near-zero gradients are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-2;

/// Largest relative error between reverse-mode gradients of `sum(w * f(x))`
/// and central differences, over every input element.
pub fn gradcheck(case: &Case, rng: &mut impl Rng) -> Result<f64> {
    let probe = {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = (case.f)(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let weights = Tensor::<f64>::from_fn(&probe, |_| rng.gen_range(-1.0..1.0));
    let eval = |f: &Build, inputs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        let w = g.constant(weights.clone());
        let p = g.mul(y, w)?;
        let loss = g.sum(p);
        let value = g.value(loss).data()[0];
        if !grads {
            return Ok((value, vec![]));
        }
        let gr = g.backward(loss)?;
        let out = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| gr.wrt(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, out))
    };
    let (_, analytic) = eval(&case.f, &case.inputs, true)?;
    let fd_fn = case.surrogate.as_ref().unwrap_or(&case.f);
    let mut worst = 0.0f64;
    for (i, t) in case.inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = case.inputs.clone();
            let mut minus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(fd_fn, &plus, false)?.0 - eval(fd_fn, &minus, false)?.0) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, with random sign.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.5);
        if rng.gen() {
            m
        } else {
            -m
        }
    })
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(f),
        surrogate: None,
    }
}

/// One instance of every differentiable operation, with inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let s = [1usize, 2, 3, 4];
    let mut v = vec![
        case("add", vec![uniform(&s, -1.0, 1.0, r), uniform(&[1, 2, 1, 1], -1.0, 1.0, r)], |g, x| g.add(x[0], x[1])),
        case("sub", vec![uniform(&s, -1.0, 1.0, r), uniform(&s, -1.0, 1.0, r)], |g, x| g.sub(x[0], x[1])),
        case("mul", vec![uniform(&s, -1.0, 1.0, r), uniform(&[1, 1, 3, 4], -1.0, 1.0, r)], |g, x| g.mul(x[0], x[1])),
        case("div", vec![uniform(&s, -1.0, 1.0, r), uniform(&s, 0.5, 2.0, r)], |g, x| g.div(x[0], x[1])),
        case("neg", vec![uniform(&s, -1.0, 1.0, r)], |g, x| Ok(g.neg(x[0]))),
        case("exp", vec![uniform(&s, -2.0, 2.0, r)], |g, x| Ok(g.exp(x[0]))),
        case("ln", vec![uniform(&s, 0.2, 3.0, r)], |g, x| Ok(g.ln(x[0]))),
        case("abs", vec![away_from_zero(&s, r)], |g, x| Ok(g.abs(x[0]))),
        case("sqrt", vec![uniform(&s, 0.2, 3.0, r)], |g, x| Ok(g.sqrt(x[0]))),
        case("sigmoid", vec![uniform(&s, -4.0, 4.0, r)], |g, x| Ok(g.sigmoid(x[0]))),
        case("leaky_relu", vec![away_from_zero(&s, r)], |g, x| Ok(g.leaky_relu(x[0], 0.1))),
        case("scale", vec![uniform(&s, -1.0, 1.0, r)], |g, x| Ok(g.scale(x[0], -2.5))),
        case("add_scalar", vec![uniform(&s, -1.0, 1.0, r)], |g, x| Ok(g.add_scalar(x[0], 0.7))),
        case("clamp", vec![away_from_zero(&s, r)], |g, x| Ok(g.clamp(x[0], -0.05, 0.05 + 2.0))),
        case("sum", vec![uniform(&s, -1.0, 1.0, r)], |g, x| Ok(g.sum(x[0]))),
        case("mean", vec![uniform(&s, -1.0, 1.0, r)], |g, x| Ok(g.mean(x[0]))),
        case("sum_channels", vec![uniform(&s, -1.0, 1.0, r)], |g, x| g.sum_channels(x[0])),
        case("concat", vec![uniform(&s, -1.0, 1.0, r), uniform(&[1, 3, 3, 4], -1.0, 1.0, r)], |g, x| g.concat(&[x[0], x[1]])),
        case("slice_channels", vec![uniform(&[1, 4, 3, 3], -1.0, 1.0, r)], |g, x| g.slice_channels(x[0], 1, 2)),
        case("upsample", vec![uniform(&[1, 2, 2, 3], -1.0, 1.0, r)], |g, x| g.upsample(x[0], 2)),
        case(
            "conv2d",
            vec![uniform(&[2, 2, 5, 4], -1.0, 1.0, r), uniform(&[3, 2, 3, 3], -0.5, 0.5, r), uniform(&[3], -0.5, 0.5, r)],
            |g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 1),
        ),
        case(
            "conv2d_stride2",
            vec![uniform(&[1, 2, 6, 5], -1.0, 1.0, r), uniform(&[2, 2, 3, 3], -0.5, 0.5, r), uniform(&[2], -0.5, 0.5, r)],
            |g, x| g.conv2d(x[0], x[1], Some(x[2]), 2, 1),
        ),
        case(
            "deconv2d",
            vec![uniform(&[1, 2, 3, 4], -1.0, 1.0, r), uniform(&[2, 3, 3, 3], -0.5, 0.5, r), uniform(&[3], -0.5, 0.5, r)],
            |g, x| g.deconv2d(x[0], x[1], Some(x[2]), 1, 1),
        ),
        case(
            "deconv2d_stride2",
            vec![uniform(&[1, 2, 3, 2], -1.0, 1.0, r), uniform(&[2, 2, 3, 3], -0.5, 0.5, r)],
            |g, x| g.deconv2d(x[0], x[1], None, 2, 1),
        ),
        case(
            "normal_bin_mass",
            vec![uniform(&s, -2.0, 2.0, r), uniform(&s, 0.3, 2.0, r), uniform(&s, 0.1, 1.5, r)],
            |g, x| g.normal_bin_mass(x[0], x[1], x[2]),
        ),
        case("log_bounded", vec![uniform(&s, -3.0, 3.0, r)], |g, x| Ok(log_bounded(g, x[0], 1e-3, 1e3))),
        {
            let u = uniform(&s, -0.5, 0.5, r);
            case("relax_with", vec![uniform(&s, -2.0, 2.0, r), uniform(&s, 0.1, 1.0, r)], move |g, x| {
                relax_with(g, x[0], x[1], u.clone())
            })
        },
        case(
            "likelihood_and_bits",
            vec![uniform(&s, -1.0, 1.0, r), uniform(&s, -0.5, 0.5, r), uniform(&s, 0.5, 2.0, r), uniform(&s, 0.2, 1.0, r)],
            |g, x| {
                let p = GaussianParams {
                    mu: x[1],
                    sigma: x[2],
                    delta: x[3],
                };
                let q = likelihood_noisy(g, x[0], &p)?;
                Ok(bits(g, q))
            },
        ),
        {
            let noise = uniform(&[1, 2, 3, 4], -1.0, 2.0, r);
            let probs = uniform(&[1, 2, 3, 4], 0.05, 0.95, r);
            case("gumbel_softmax", vec![probs], move |g, x| gumbel_softmax(g, x[0], noise.clone(), 0.5))
        },
        {
            let mask = Tensor::from_fn(&[1, 1, 4, 5], |_| if r.gen_bool(0.4) { 1.0 } else { 0.0 });
            case(
                "masked_deconv",
                vec![uniform(&[1, 2, 4, 5], -1.0, 1.0, r), uniform(&[2, 3, 3, 3], -0.5, 0.5, r)],
                move |g, x| {
                    let m = g.constant(mask.clone());
                    masked_deconv(g, x[0], m, x[1])
                },
            )
        },
    ];
    // piecewise-constant forwards, checked against their surrogate
    let z = uniform(&s, -2.0, 2.0, r);
    let delta = uniform(&s, 0.2, 1.0, r);
    let offset = Tensor::from_fn(&s, |i| {
        let q = z.data()[i] / delta.data()[i];
        q.round_ties_even() - q
    });
    v.push(Case {
        name: "quantize_st",
        inputs: vec![z, delta],
        f: Box::new(|g, x| quantize_st(g, x[0], x[1])),
        surrogate: Some(Box::new(move |g, x| relax_with(g, x[0], x[1], offset.clone()))),
    });
    let acc = Tensor::from_fn(&[1, 1, 3, 4], |_| if r.gen_bool(0.3) { 1.0 } else { 0.0 });
    let soft = uniform(&[1, 1, 3, 4], 0.0, 1.0, r);
    v.push(Case {
        name: "binarize",
        inputs: vec![soft],
        f: Box::new(move |g, x| {
            let a = g.constant(acc.clone());
            binarize(g, x[0], a)
        }),
        surrogate: Some(Box::new(|g, x| Ok(g.scale(x[0], 1.0)))),
    });
    v.push(two_layer_net(r));
    v
}

/// conv -> leaky ReLU -> conv -> bin likelihood, gradients w.r.t. all
/// weights. Draws are repeated until no hidden pre-activation sits near the
/// kink of the activation.
fn two_layer_net(r: &mut impl Rng) -> Case {
    let (x, w1, b1) = loop {
        let x = uniform(&[1, 2, 5, 5], -1.0, 1.0, r);
        let w1 = uniform(&[3, 2, 3, 3], -0.5, 0.5, r);
        let b1 = uniform(&[3], 0.2, 0.4, r);
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w1.clone()), g.constant(b1.clone()));
        let h = g.conv2d(xv, wv, Some(bv), 1, 1).expect("valid shapes");
        if g.value(h).data().iter().all(|v| v.abs() > 1e-2) {
            break (x, w1, b1);
        }
    };
    case(
        "two_layer_net",
        vec![w1, b1, uniform(&[2, 3, 3, 3], -0.5, 0.5, r), uniform(&[2], -0.1, 0.1, r)],
        move |g, p| {
            let xin = g.constant(x.clone());
            let h = g.conv2d(xin, p[0], Some(p[1]), 1, 1)?;
            let h = g.leaky_relu(h, 0.1);
            let y = g.conv2d(h, p[2], Some(p[3]), 2, 1)?;
            let s = g.constant(Tensor::full(g.shape(y), 1.0));
            let d = g.constant(Tensor::full(g.shape(y), 0.5));
            g.normal_bin_mass(y, s, d)
        },
    )
}
