//! Analysis and synthesis transforms, and the sRGB feature pyramid that
//! conditions all of them.
//!
//! Level 0 latents live at `H/4`, level 1 (hyper) latents at `H/8`. The
//! guidance features `f1, f2, f3` are at `H/2, H/4, H/8`.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kv;
use crate::layers::{run_blocks, Conv2d, ResBlock, LEAKY_SLOPE};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::ordermask::{GUMBEL_SEED, GUMBEL_SIZE};
use crate::quant::{DELTA_BOUNDS, SIGMA_BOUNDS};

/// Total down-sampling of the deepest latent. Inputs are padded to a multiple of it.
pub const STRIDE: usize = 8;
/// Exponent of the sRGB linearization used as the decoder's starting point.
pub const LINEARIZE_GAMMA: f32 = 2.2;

/// Layer widths and coding hyper-parameters. Stored next to the weights as
/// `key=value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub guide_channels: usize,
    pub hidden_channels: usize,
    pub decoder_channels: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub steps: usize,
    pub tau: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub delta_init: f64,
    pub gumbel_seed: u64,
    pub gumbel_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            latent_channels: 32,
            hyper_channels: 16,
            guide_channels: 16,
            hidden_channels: 32,
            decoder_channels: 16,
            blocks: 1,
            kernel: 3,
            steps: 4,
            tau: 0.5,
            sigma_min: SIGMA_BOUNDS.0,
            sigma_max: SIGMA_BOUNDS.1,
            delta_min: DELTA_BOUNDS.0,
            delta_max: DELTA_BOUNDS.1,
            delta_init: 0.25,
            gumbel_seed: GUMBEL_SEED,
            gumbel_size: GUMBEL_SIZE,
        }
    }
}

impl ArchConfig {
    /// Canonical text form. Also the input to the model hash.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("latent_channels", self.latent_channels.to_string()),
            ("hyper_channels", self.hyper_channels.to_string()),
            ("guide_channels", self.guide_channels.to_string()),
            ("hidden_channels", self.hidden_channels.to_string()),
            ("decoder_channels", self.decoder_channels.to_string()),
            ("blocks", self.blocks.to_string()),
            ("kernel", self.kernel.to_string()),
            ("steps", self.steps.to_string()),
            ("tau", format!("{:?}", self.tau)),
            ("sigma_min", format!("{:?}", self.sigma_min)),
            ("sigma_max", format!("{:?}", self.sigma_max)),
            ("delta_min", format!("{:?}", self.delta_min)),
            ("delta_max", format!("{:?}", self.delta_max)),
            ("delta_init", format!("{:?}", self.delta_init)),
            ("gumbel_seed", format!("{:#x}", self.gumbel_seed)),
            ("gumbel_size", self.gumbel_size.to_string()),
        ]
    }

    /// Parses `key=value` lines. Missing keys keep their defaults, unknown
    /// keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ArchConfig::default();
        kv::parse(text, |k, v| cfg.set(k, v))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "latent_channels" => self.latent_channels = kv::value(v)?,
            "hyper_channels" => self.hyper_channels = kv::value(v)?,
            "guide_channels" => self.guide_channels = kv::value(v)?,
            "hidden_channels" => self.hidden_channels = kv::value(v)?,
            "decoder_channels" => self.decoder_channels = kv::value(v)?,
            "blocks" => self.blocks = kv::value(v)?,
            "kernel" => self.kernel = kv::value(v)?,
            "steps" => self.steps = kv::value(v)?,
            "tau" => self.tau = kv::value(v)?,
            "sigma_min" => self.sigma_min = kv::value(v)?,
            "sigma_max" => self.sigma_max = kv::value(v)?,
            "delta_min" => self.delta_min = kv::value(v)?,
            "delta_max" => self.delta_max = kv::value(v)?,
            "delta_init" => self.delta_init = kv::value(v)?,
            "gumbel_seed" => self.gumbel_seed = kv::int(v)?,
            "gumbel_size" => self.gumbel_size = kv::value(v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.latent_channels,
            self.hyper_channels,
            self.guide_channels,
            self.hidden_channels,
            self.decoder_channels,
        ];
        if widths.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.steps == 0 || self.steps > u8::MAX as usize {
            return Err(Error::invalid(format!("steps must be in 1..=255, got {}", self.steps)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        let ordered = |lo: f64, hi: f64| lo > 0.0 && hi > lo && hi.is_finite();
        if !ordered(self.sigma_min, self.sigma_max) || !ordered(self.delta_min, self.delta_max) {
            return Err(Error::invalid("sigma and delta bounds must satisfy 0 < min < max"));
        }
        if !(self.delta_init > self.delta_min && self.delta_init < self.delta_max) {
            return Err(Error::invalid("delta_init must lie strictly inside the delta bounds"));
        }
        if self.gumbel_size < 1 {
            return Err(Error::invalid("gumbel_size must be positive"));
        }
        Ok(())
    }

    /// Largest image side the stored Gumbel sample can cover.
    pub fn max_side(&self) -> usize {
        self.gumbel_size * 4
    }
}

/// The sRGB feature pyramid `f1, f2, f3`.
#[derive(Clone, Debug)]
pub struct Guide {
    pub stages: [Conv2d; 3],
}

pub struct GuideFeatures {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

impl Guide {
    fn new(store: &mut ParamStore, cfg: &ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        let (f, k) = (cfg.guide_channels, cfg.kernel);
        Ok(Guide {
            stages: [
                Conv2d::new(store, "guide.0", 3, f, k, 2, rng)?,
                Conv2d::new(store, "guide.1", f, f, k, 2, rng)?,
                Conv2d::new(store, "guide.2", f, f, k, 2, rng)?,
            ],
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, srgb: Var) -> Result<GuideFeatures> {
        let f1 = self.stages[0].forward_act(g, store, srgb)?;
        let f2 = self.stages[1].forward_act(g, store, f1)?;
        let f3 = self.stages[2].forward_act(g, store, f2)?;
        Ok(GuideFeatures { f1, f2, f3 })
    }
}

/// Level 0 analysis: `(raw, sRGB) -> z1` at `H/4`.
#[derive(Clone, Debug)]
pub struct Analysis0 {
    pub down1: Conv2d,
    pub down2: Conv2d,
    pub blocks: Vec<ResBlock>,
    pub out: Conv2d,
}

impl Analysis0 {
    fn new(store: &mut ParamStore, cfg: &ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        let (h, k) = (cfg.hidden_channels, cfg.kernel);
        let mid = cfg.decoder_channels;
        Ok(Analysis0 {
            down1: Conv2d::new(store, "g_a0.down1", 6, mid, k, 2, rng)?,
            down2: Conv2d::new(store, "g_a0.down2", mid, h, k, 2, rng)?,
            blocks: (0..cfg.blocks)
                .map(|i| ResBlock::new(store, &format!("g_a0.block{i}"), h, k, rng))
                .collect::<Result<_>>()?,
            out: Conv2d::new(store, "g_a0.out", h, cfg.latent_channels, k, 1, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, raw: Var, srgb: Var) -> Result<Var> {
        let x = g.concat(&[raw, srgb])?;
        let x = self.down1.forward_act(g, store, x)?;
        let x = self.down2.forward_act(g, store, x)?;
        let x = run_blocks(&self.blocks, g, store, x)?;
        self.out.forward(g, store, x)
    }
}

/// Level 0 synthesis: `(z1_hat, sRGB) -> raw_hat`. Predicts a correction to
/// the linearized sRGB image.
#[derive(Clone, Debug)]
pub struct Synthesis0 {
    pub input: Conv2d,
    pub blocks: Vec<ResBlock>,
    pub project: Conv2d,
    pub fuse: Conv2d,
    pub full_blocks: Vec<ResBlock>,
    pub out: Conv2d,
}

impl Synthesis0 {
    fn new(store: &mut ParamStore, cfg: &ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        let (h, d, k) = (cfg.hidden_channels, cfg.decoder_channels, cfg.kernel);
        let s = Synthesis0 {
            input: Conv2d::new(store, "g_s0.in", cfg.latent_channels, h, k, 1, rng)?,
            blocks: (0..cfg.blocks)
                .map(|i| ResBlock::new(store, &format!("g_s0.block{i}"), h, k, rng))
                .collect::<Result<_>>()?,
            project: Conv2d::new(store, "g_s0.project", h, d, 1, 1, rng)?,
            fuse: Conv2d::new(store, "g_s0.fuse", d + 3, d, k, 1, rng)?,
            full_blocks: (0..cfg.blocks)
                .map(|i| ResBlock::new(store, &format!("g_s0.full{i}"), d, k, rng))
                .collect::<Result<_>>()?,
            out: Conv2d::new(store, "g_s0.out", d, 3, k, 1, rng)?,
        };
        // start from the plain linearization
        let w = &mut store.get_mut(s.out.weight).value;
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        Ok(s)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z_hat: Var, srgb: Var) -> Result<Var> {
        let x = self.input.forward_act(g, store, z_hat)?;
        let x = run_blocks(&self.blocks, g, store, x)?;
        let x = self.project.forward_act(g, store, x)?;
        let x = g.upsample(x, 4)?;
        let x = g.concat(&[x, srgb])?;
        let x = self.fuse.forward_act(g, store, x)?;
        let x = run_blocks(&self.full_blocks, g, store, x)?;
        let residual = self.out.forward(g, store, x)?;
        let base = g.value(srgb).map(|v| v.max(0.0).powf(LINEARIZE_GAMMA));
        let base = g.constant(base);
        let y = g.add(base, residual)?;
        Ok(g.clamp(y, 0.0, 1.0))
    }
}

/// Level 1 analysis: `(z1, f2) -> z2` at `H/8`.
#[derive(Clone, Debug)]
pub struct Analysis1 {
    pub down: Conv2d,
    pub out: Conv2d,
}

impl Analysis1 {
    fn new(store: &mut ParamStore, cfg: &ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        let (h, k) = (cfg.hidden_channels, cfg.kernel);
        Ok(Analysis1 {
            down: Conv2d::new(store, "g_a1.down", cfg.latent_channels + cfg.guide_channels, h, k, 2, rng)?,
            out: Conv2d::new(store, "g_a1.out", h, cfg.hyper_channels, k, 1, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z1: Var, f2: Var) -> Result<Var> {
        let x = g.concat(&[z1, f2])?;
        let x = self.down.forward_act(g, store, x)?;
        self.out.forward(g, store, x)
    }
}

/// Level 1 synthesis: `(z2_hat, f3, f2) -> v1`, the prior features of level 0.
#[derive(Clone, Debug)]
pub struct Synthesis1 {
    pub input: Conv2d,
    pub fuse: Conv2d,
    pub out: Conv2d,
}

impl Synthesis1 {
    fn new(store: &mut ParamStore, cfg: &ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        let (h, f, k) = (cfg.hidden_channels, cfg.guide_channels, cfg.kernel);
        Ok(Synthesis1 {
            input: Conv2d::new(store, "g_s1.in", cfg.hyper_channels + f, h, k, 1, rng)?,
            fuse: Conv2d::new(store, "g_s1.fuse", h + f, h, k, 1, rng)?,
            out: Conv2d::new(store, "g_s1.out", h, h, k, 1, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z2_hat: Var, f3: Var, f2: Var) -> Result<Var> {
        let x = g.concat(&[z2_hat, f3])?;
        let x = self.input.forward_act(g, store, x)?;
        let x = g.upsample(x, 2)?;
        let x = g.concat(&[x, f2])?;
        let x = self.fuse.forward_act(g, store, x)?;
        let x = self.out.forward(g, store, x)?;
        Ok(g.leaky_relu(x, LEAKY_SLOPE))
    }
}

/// All transforms of the two-level cascade.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub guide: Guide,
    pub analysis0: Analysis0,
    pub synthesis0: Synthesis0,
    pub analysis1: Analysis1,
    pub synthesis1: Synthesis1,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Backbone {
            guide: Guide::new(store, cfg, rng)?,
            analysis0: Analysis0::new(store, cfg, rng)?,
            synthesis0: Synthesis0::new(store, cfg, rng)?,
            analysis1: Analysis1::new(store, cfg, rng)?,
            synthesis1: Synthesis1::new(store, cfg, rng)?,
        })
    }
}

/// Pads `[1, c, h, w]` by reflection so both sides are multiples of [`STRIDE`].
pub fn pad_to_stride(t: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = t.dims4()?;
    let up = |v: usize| v.div_ceil(STRIDE) * STRIDE;
    if up(h) == h && up(w) == w {
        return Ok(t.clone());
    }
    if h < STRIDE || w < STRIDE {
        return Err(Error::shape(format!("image {h}x{w} is smaller than {STRIDE}x{STRIDE}")));
    }
    t.reflect_pad_to(up(h), up(w))
}
