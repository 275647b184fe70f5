//! The complete two-level codec: transforms, context models, the stored
//! Gumbel sample, and the encode / decode / estimate entry points.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backbone::{pad_to_stride, ArchConfig, Backbone, STRIDE};
use crate::container::Container;
use crate::entropymodel::{code_level, ContextModel, RateReport, SymbolCoder, SymbolDecoder, SymbolEncoder, SymbolEstimator, VarRateConfig};
use crate::error::{Error, Result};
use crate::numerics::{read_checkpoint_into, write_checkpoint, Graph, ParamStore, Tensor, Var};
use crate::ordermask::{gumbel_buffer, MaskSchedule, OrderMaskSet};
use crate::quant::QuantMode;
use crate::rangecoder::{Bitstream, Decoder};

pub const MODEL_EXTENSION: &str = "rtwt";
pub const CONFIG_EXTENSION: &str = "arch";

/// Order in which the mask steps are applied when coding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodingOrder {
    Learned,
    /// The learned masks applied last-to-first.
    Reversed,
}

pub struct Codec {
    pub config: ArchConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    /// Context model of the main latents.
    pub context0: ContextModel,
    /// Context model of the hyper latents.
    pub context1: ContextModel,
    gumbel: Tensor,
}

/// Training-mode outputs of one image, still on the graph.
pub struct TrainForward {
    pub x_hat: Var,
    /// Estimated bits of the main and hyper latents.
    pub bits: [Var; 2],
    pub masks: [MaskSchedule; 2],
}

/// Latents, masks and reconstruction from one coding pass.
#[derive(Clone, Debug)]
pub struct Coded {
    pub x_hat: Tensor,
    /// Main latents, then hyper latents.
    pub z_hat: [Tensor; 2],
    pub masks: [OrderMaskSet; 2],
    pub report: RateReport,
}

pub struct Encoded {
    pub container: Container,
    pub coded: Coded,
}

struct Prepared {
    srgb: Tensor,
    f2: Tensor,
    f3: Tensor,
    height: usize,
    width: usize,
}

impl Codec {
    /// A freshly initialized model.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config, &mut rng)?;
        let h = config.hidden_channels;
        let f = config.guide_channels;
        let context0 = ContextModel::new(&mut store, "level0", &config, config.latent_channels, f, h, &mut rng)?;
        let context1 = ContextModel::new(&mut store, "level1", &config, config.hyper_channels, f, h, &mut rng)?;
        let gumbel = gumbel_buffer(config.steps, config.gumbel_size, config.gumbel_seed);
        Ok(Codec {
            config,
            store,
            backbone,
            context0,
            context1,
            gumbel,
        })
    }

    /// First 8 bytes of SHA-256 over the canonical config and every
    /// parameter (name and little-endian values).
    pub fn hash(&self) -> [u8; 8] {
        let mut h = Sha256::new();
        h.update(self.config.to_text().as_bytes());
        for (_, p) in self.store.iter() {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        let d = h.finalize();
        let mut out = [0u8; 8];
        out.copy_from_slice(&d[..8]);
        out
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }

    pub fn config_path(model: &Path) -> PathBuf {
        model.with_extension(CONFIG_EXTENSION)
    }

    /// Writes the weights to `path` and the config next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(Self::config_path(path), self.config.to_text())?;
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&self.store, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = Self::config_path(path);
        let text = fs::read_to_string(&cfg_path)
            .map_err(|e| Error::Format(format!("cannot read model config {}: {e}", cfg_path.display())))?;
        let mut codec = Codec::new(ArchConfig::parse(&text)?, 0)?;
        read_checkpoint_into(&mut codec.store, BufReader::new(File::open(path)?))?;
        Ok(codec)
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    // ---- training --------------------------------------------------------

    /// Differentiable pass over one image `[1, 3, H, W]` (sides multiple of 8).
    /// Main latents use additive noise, hyper latents straight-through rounding.
    pub fn forward_train(&self, g: &mut Graph, raw: &Tensor, srgb: &Tensor, rng: &mut impl Rng) -> Result<TrainForward> {
        let (_, _, h, w) = srgb.dims4()?;
        if raw.shape() != srgb.shape() || h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(Error::shape(format!(
                "training pair {:?}/{:?} must match with sides a multiple of {STRIDE}",
                raw.shape(),
                srgb.shape()
            )));
        }
        let (x, y) = (g.constant(raw.clone()), g.constant(srgb.clone()));
        let bb = &self.backbone;
        let f = bb.guide.forward(g, &self.store, y)?;
        let z1 = bb.analysis0.forward(g, &self.store, x, y)?;
        let z2 = bb.analysis1.forward(g, &self.store, z1, f.f2)?;
        let empty = g.constant(self.empty_prior(g.shape(f.f3))?);
        let hyper = self
            .context1
            .forward_train(g, &self.store, &self.config, z2, f.f3, empty, QuantMode::StraightThrough, rng)?;
        let v1 = bb.synthesis1.forward(g, &self.store, hyper.z_hat, f.f3, f.f2)?;
        let main = self
            .context0
            .forward_train(g, &self.store, &self.config, z1, f.f2, v1, QuantMode::Noise, rng)?;
        let x_hat = bb.synthesis0.forward(g, &self.store, main.z_hat, y)?;
        Ok(TrainForward {
            x_hat,
            bits: [main.bits, hyper.bits],
            masks: [main.masks, hyper.masks],
        })
    }

    /// The level-1 prior: zeros with the width of the prior features.
    fn empty_prior(&self, guide_shape: &[usize]) -> Result<Tensor> {
        match guide_shape {
            &[n, _, h, w] => Ok(Tensor::zeros(&[n, self.config.hidden_channels, h, w])),
            s => Err(Error::shape(format!("guide features {s:?}"))),
        }
    }

    // ---- coding ----------------------------------------------------------

    fn prepare(&self, srgb: &Tensor) -> Result<Prepared> {
        let (n, c, height, width) = srgb.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::shape(format!("expected one RGB image, got {:?}", srgb.shape())));
        }
        let max = self.config.max_side().min(u16::MAX as usize);
        if height > max || width > max {
            return Err(Error::invalid(format!("image {height}x{width} exceeds the {max}-pixel limit")));
        }
        let srgb = pad_to_stride(srgb)?;
        let mut g = Graph::new();
        let y = g.constant(srgb.clone());
        let f = self.backbone.guide.forward(&mut g, &self.store, y)?;
        Ok(Prepared {
            f2: g.value(f.f2).clone(),
            f3: g.value(f.f3).clone(),
            srgb,
            height,
            width,
        })
    }

    fn analyze(&self, p: &Prepared, raw: &Tensor) -> Result<(Tensor, Tensor)> {
        if raw.shape() != [1, 3, p.height, p.width] {
            return Err(Error::shape(format!(
                "raw image {:?} does not match sRGB image {}x{}",
                raw.shape(),
                p.height,
                p.width
            )));
        }
        let raw = pad_to_stride(raw)?;
        let mut g = Graph::new();
        let x = g.constant(raw);
        let y = g.constant(p.srgb.clone());
        let f2 = g.constant(p.f2.clone());
        let z1 = self.backbone.analysis0.forward(&mut g, &self.store, x, y)?;
        let z2 = self.backbone.analysis1.forward(&mut g, &self.store, z1, f2)?;
        Ok((g.value(z1).clone(), g.value(z2).clone()))
    }

    fn hyper_masks(&self, p: &Prepared, order: CodingOrder) -> Result<OrderMaskSet> {
        let empty = self.empty_prior(p.f3.shape())?;
        let m = self.context1.coding_masks(&self.store, &self.config, &self.gumbel, &p.f3, &empty)?;
        Ok(apply_order(m, order))
    }

    fn prior_features(&self, p: &Prepared, z2_hat: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.constant(z2_hat.clone());
        let f3 = g.constant(p.f3.clone());
        let f2 = g.constant(p.f2.clone());
        let v1 = self.backbone.synthesis1.forward(&mut g, &self.store, z, f3, f2)?;
        Ok(g.value(v1).clone())
    }

    fn main_masks(&self, p: &Prepared, v1: &Tensor, order: CodingOrder) -> Result<OrderMaskSet> {
        let m = self.context0.coding_masks(&self.store, &self.config, &self.gumbel, &p.f2, v1)?;
        Ok(apply_order(m, order))
    }

    fn synthesize(&self, p: &Prepared, z1_hat: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.constant(z1_hat.clone());
        let y = g.constant(p.srgb.clone());
        let x = self.backbone.synthesis0.forward(&mut g, &self.store, z, y)?;
        g.value(x).crop(0, 0, p.height, p.width)
    }

    /// Hyper level first, then the main level, each through `coders`.
    fn run(
        &self,
        p: &Prepared,
        rate: VarRateConfig,
        order: CodingOrder,
        hyper_coder: &mut dyn SymbolCoder,
        main_coder: &mut dyn SymbolCoder,
    ) -> Result<Coded> {
        rate.validate(self.steps())?;
        let hyper_masks = self.hyper_masks(p, order)?;
        let empty = self.empty_prior(p.f3.shape())?;
        let full = VarRateConfig::full(self.steps());
        let z2_hat = code_level(&self.context1, &self.store, &self.config, &p.f3, &empty, &hyper_masks, full, hyper_coder)?;
        let v1 = self.prior_features(p, &z2_hat)?;
        let main_masks = self.main_masks(p, &v1, order)?;
        let z1_hat = code_level(&self.context0, &self.store, &self.config, &p.f2, &v1, &main_masks, rate, main_coder)?;
        let x_hat = self.synthesize(p, &z1_hat)?;
        Ok(Coded {
            x_hat,
            z_hat: [z1_hat, z2_hat],
            masks: [main_masks, hyper_masks],
            report: RateReport {
                pixels: p.height * p.width,
                ..RateReport::default()
            },
        })
    }

    /// Compresses `raw` given its sRGB rendering (both `[1, 3, H, W]`).
    pub fn encode(&self, raw: &Tensor, srgb: &Tensor, rate: VarRateConfig) -> Result<Encoded> {
        let p = self.prepare(srgb)?;
        let (z1, z2) = self.analyze(&p, raw)?;
        let mut hyper = SymbolEncoder::new(z2.data());
        let mut main = SymbolEncoder::new(z1.data());
        let mut coded = self.run(&p, rate, CodingOrder::Learned, &mut hyper, &mut main)?;
        let levels = vec![Bitstream::new(hyper.encoder.finish()), Bitstream::new(main.encoder.finish())];
        coded.report.estimated_bits = [main.estimated_bits, hyper.estimated_bits];
        coded.report.actual_bits = [levels[1].bit_len(), levels[0].bit_len()];
        let container = Container {
            width: p.width as u16,
            height: p.height as u16,
            rate,
            model_hash: self.hash(),
            levels,
        };
        Ok(Encoded { container, coded })
    }

    /// Reconstructs the raw image from a container and the sRGB image it
    /// was encoded with.
    pub fn decode(&self, container: &Container, srgb: &Tensor) -> Result<Coded> {
        let hash = self.hash();
        if container.model_hash != hash {
            return Err(Error::ModelMismatch {
                expected: hex(&container.model_hash),
                found: hex(&hash),
            });
        }
        let (_, _, h, w) = srgb.dims4()?;
        if (h, w) != (container.height as usize, container.width as usize) {
            return Err(Error::shape(format!(
                "container is for a {}x{} image, sRGB image is {h}x{w}",
                container.height, container.width
            )));
        }
        if container.levels.len() != 2 {
            return Err(Error::Format(format!("expected 2 levels, found {}", container.levels.len())));
        }
        for l in &container.levels {
            l.verify()?;
        }
        let p = self.prepare(srgb)?;
        let mut hyper = SymbolDecoder {
            decoder: Decoder::new(&container.levels[0].payload)?,
        };
        let mut main = SymbolDecoder {
            decoder: Decoder::new(&container.levels[1].payload)?,
        };
        let mut coded = self.run(&p, container.rate, CodingOrder::Learned, &mut hyper, &mut main)?;
        for (name, d) in [("hyper", &hyper.decoder), ("main", &main.decoder)] {
            if d.remaining() != 0 {
                return Err(Error::StreamCorrupt(format!("{} unread bytes in the {name} stream", d.remaining())));
            }
        }
        coded.report.actual_bits = [container.levels[1].bit_len(), container.levels[0].bit_len()];
        Ok(coded)
    }

    /// Quantizes and reconstructs without writing a stream, counting the
    /// model's estimated bits.
    pub fn estimate(&self, raw: &Tensor, srgb: &Tensor, rate: VarRateConfig, order: CodingOrder) -> Result<Coded> {
        let p = self.prepare(srgb)?;
        let (z1, z2) = self.analyze(&p, raw)?;
        let mut hyper = SymbolEstimator {
            z: z2.data(),
            estimated_bits: 0.0,
        };
        let mut main = SymbolEstimator {
            z: z1.data(),
            estimated_bits: 0.0,
        };
        let mut coded = self.run(&p, rate, order, &mut hyper, &mut main)?;
        coded.report.estimated_bits = [main.estimated_bits, hyper.estimated_bits];
        Ok(coded)
    }

    /// Reconstruction from the sRGB image alone (all latents zero).
    pub fn reconstruct_without_metadata(&self, srgb: &Tensor) -> Result<Tensor> {
        let p = self.prepare(srgb)?;
        let (_, _, h, w) = p.f2.dims4()?;
        self.synthesize(&p, &Tensor::zeros(&[1, self.config.latent_channels, h, w]))
    }
}

fn apply_order(m: OrderMaskSet, order: CodingOrder) -> OrderMaskSet {
    match order {
        CodingOrder::Learned => m,
        CodingOrder::Reversed => m.reversed(),
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ispsim::{make_dataset, Source};

    fn tiny() -> ArchConfig {
        ArchConfig {
            latent_channels: 4,
            hyper_channels: 2,
            guide_channels: 4,
            hidden_channels: 8,
            decoder_channels: 4,
            gumbel_size: 16,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn round_trip_on_untrained_model() {
        let codec = Codec::new(tiny(), 3).unwrap();
        let pair = &make_dataset(&Source::Procedural, 1, 24, 5).unwrap()[0];
        for beta in 0..=4u8 {
            let rate = VarRateConfig { beta, gamma: 0.5 };
            let enc = codec.encode(&pair.raw, &pair.srgb, rate).unwrap();
            let bytes = enc.container.to_bytes().unwrap();
            let dec = codec.decode(&Container::from_bytes(&bytes).unwrap(), &pair.srgb).unwrap();
            assert_eq!(dec.z_hat, enc.coded.z_hat);
            assert_eq!(dec.x_hat, enc.coded.x_hat);
            assert_eq!(dec.masks, enc.coded.masks);
            let est = codec.estimate(&pair.raw, &pair.srgb, rate, CodingOrder::Learned).unwrap();
            assert_eq!(est.x_hat, enc.coded.x_hat);
            assert_eq!(est.report.estimated_bits, enc.coded.report.estimated_bits);
        }
    }

    #[test]
    fn decode_refuses_other_model() {
        let a = Codec::new(tiny(), 3).unwrap();
        let b = Codec::new(tiny(), 4).unwrap();
        let pair = &make_dataset(&Source::Procedural, 1, 16, 5).unwrap()[0];
        let enc = a.encode(&pair.raw, &pair.srgb, VarRateConfig::full(4)).unwrap();
        assert!(matches!(b.decode(&enc.container, &pair.srgb), Err(Error::ModelMismatch { .. })));
    }

    #[test]
    fn save_load_preserves_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rtwt");
        let a = Codec::new(tiny(), 9).unwrap();
        a.save(&path).unwrap();
        let b = Codec::load(&path).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), Codec::new(tiny(), 10).unwrap().hash());
    }
}
