//! Parameterized building blocks shared by the transforms and context nets.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LEAKY_SLOPE: f32 = 0.1;

/// Square-kernel convolution with bias, padded to keep `H/stride x W/stride`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng)?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn forward_act(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.forward(g, store, x)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }
}

/// `x + conv(act(conv(x)))`
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(ResBlock {
            first: Conv2d::new(store, &format!("{name}.0"), channels, channels, kernel, 1, rng)?,
            second: Conv2d::new(store, &format!("{name}.1"), channels, channels, kernel, 1, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward_act(g, store, x)?;
        let h = self.second.forward(g, store, h)?;
        let y = g.add(x, h)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }
}

pub fn run_blocks(blocks: &[ResBlock], g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, store, x)?;
    }
    Ok(x)
}
