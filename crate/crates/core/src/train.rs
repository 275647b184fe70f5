//! Rate-distortion training and evaluation.
//!
//! The loss of one image is `bits / pixels + lambda * mean|x_hat - x|`,
//! averaged over the batch. Main latents are relaxed with uniform noise,
//! hyper latents are rounded with a straight-through gradient, masks are
//! sampled with fresh Gumbel noise.
//!
//! Every sample of a batch gets its own graph and its own random stream;
//! gradients are summed in sample order, so results do not depend on the
//! number of worker threads.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::entropymodel::VarRateConfig;
use crate::error::{Error, Result};
use crate::ispsim::ImagePair;
use crate::kv;
use crate::metrics::{mae, psnr, ssim, QualityReport};
use crate::model::{Codec, CodingOrder};
use crate::numerics::{Adam, Graph, ParamGrads, Tensor, Var};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "RAWTIDE_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct RdConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub patch: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub lr_decay: f64,
    /// Epochs without eval improvement before the learning rate decays.
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for RdConfig {
    fn default() -> Self {
        RdConfig {
            lambda: 1000.0,
            lr: 1e-4,
            batch: 8,
            patch: 64,
            epochs: 100,
            max_steps: 0,
            lr_decay: 0.1,
            patience: 10,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl RdConfig {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lambda={:?}", self.lambda);
        let _ = writeln!(s, "lr={:?}", self.lr);
        let _ = writeln!(s, "batch={}", self.batch);
        let _ = writeln!(s, "patch={}", self.patch);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "max_steps={}", self.max_steps);
        let _ = writeln!(s, "lr_decay={:?}", self.lr_decay);
        let _ = writeln!(s, "patience={}", self.patience);
        let _ = writeln!(s, "clip_norm={:?}", self.clip_norm);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RdConfig::default();
        kv::parse(text, |k, v| {
            match k {
                "lambda" => c.lambda = kv::value(v)?,
                "lr" => c.lr = kv::value(v)?,
                "batch" => c.batch = kv::value(v)?,
                "patch" => c.patch = kv::value(v)?,
                "epochs" => c.epochs = kv::value(v)?,
                "max_steps" => c.max_steps = kv::value(v)?,
                "lr_decay" => c.lr_decay = kv::value(v)?,
                "patience" => c.patience = kv::value(v)?,
                "clip_norm" => c.clip_norm = kv::value(v)?,
                "seed" => c.seed = kv::int(v)?,
                other => return Err(format!("unknown key `{other}`")),
            }
            Ok(())
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.lambda) || !pos(self.lr) || !pos(self.clip_norm) {
            return Err(Error::invalid("lambda, lr and clip_norm must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr_decay must be in (0, 1]"));
        }
        if self.batch == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::invalid("batch, epochs and patience must be positive"));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(8) {
            return Err(Error::invalid(format!("patch must be a positive multiple of 8, got {}", self.patch)));
        }
        Ok(())
    }
}

/// Worker threads: `RAWTIDE_THREADS` if set, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `f` over `items` on up to [`thread_count`] threads, results in input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let threads = thread_count().min(items.len()).max(1);
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                let f = &f;
                s.spawn(move || part.iter().enumerate().map(|(j, t)| f(ci * chunk + j, t)).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Loss terms of one image.
pub struct RdTerms {
    pub loss: Var,
    pub rate_bpp: f64,
    pub mae: f64,
}

/// `sum(bits) / pixels + lambda * mean|x_hat - x|`.
pub fn rd_loss(g: &mut Graph, x_hat: Var, x: Var, bits: &[Var], lambda: f64, pixels: usize) -> Result<RdTerms> {
    if g.shape(x_hat) != g.shape(x) {
        return Err(Error::shape(format!("reconstruction {:?} vs target {:?}", g.shape(x_hat), g.shape(x))));
    }
    if pixels == 0 {
        return Err(Error::invalid("pixel count must be positive"));
    }
    for &v in bits.iter().chain([&x_hat, &x]) {
        if !g.value(v).all_finite() {
            return Err(Error::NonFinite("rate-distortion loss input".into()));
        }
    }
    let mut rate = g.constant(Tensor::scalar(0.0));
    for &b in bits {
        let s = g.sum(b);
        rate = g.add(rate, s)?;
    }
    let rate = g.scale(rate, 1.0 / pixels as f32);
    let d = g.sub(x_hat, x)?;
    let d = g.abs(d);
    let dist = g.mean(d);
    let weighted = g.scale(dist, lambda as f32);
    let loss = g.add(rate, weighted)?;
    Ok(RdTerms {
        loss,
        rate_bpp: g.value(rate).data()[0] as f64,
        mae: g.value(dist).data()[0] as f64,
    })
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub rate_bpp: f64,
    pub mae: f64,
    pub loss: f64,
    pub lr: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,rate_bpp,mae,loss,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.rate_bpp, self.mae, self.loss, self.lr)
    }
}

pub fn write_metrics_csv(records: &[StepRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "{}", StepRecord::CSV_HEADER)?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    /// Eval loss after every epoch.
    pub eval_losses: Vec<f64>,
    pub steps: usize,
    pub final_lr: f64,
}

/// Averages over an evaluation set, with real quantization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub rate_bpp: f64,
    pub mae: f64,
    pub loss: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Estimated rate and distortion of `data` at the given quality factors.
pub fn evaluate(codec: &Codec, data: &[ImagePair], rate: VarRateConfig, lambda: f64) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let rows = parallel_map(data, |_, p| -> Result<(f64, f64, f64, f64)> {
        let c = codec.estimate(&p.raw, &p.srgb, rate, CodingOrder::Learned)?;
        let q = QualityReport::measure(&p.raw, &c.x_hat, c.report.estimated_bpp())?;
        Ok((q.bpp, mae(&p.raw, &c.x_hat)?, q.psnr_db, q.ssim))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = |f: fn(&(f64, f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let (rate_bpp, mae) = (mean(|r| r.0), mean(|r| r.1));
    Ok(EvalSummary {
        rate_bpp,
        mae,
        loss: rate_bpp + lambda * mae,
        psnr_db: mean(|r| r.2),
        ssim: mean(|r| r.3),
    })
}

/// Quality of the sRGB-only reconstruction (all latents zero). Rate is 0.
pub fn eval_no_metadata(codec: &Codec, data: &[ImagePair]) -> Result<Vec<QualityReport>> {
    parallel_map(data, |_, p| {
        let x = codec.reconstruct_without_metadata(&p.srgb)?;
        Ok(QualityReport {
            psnr_db: psnr(&p.raw, &x)?,
            ssim: ssim(&p.raw, &x)?,
            bpp: 0.0,
        })
    })
    .into_iter()
    .collect()
}

fn random_crop(p: &ImagePair, patch: usize, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let (h, w) = (p.height(), p.width());
    if h < patch || w < patch {
        return Err(Error::invalid(format!("training image {h}x{w} is smaller than the {patch} patch")));
    }
    let y = rng.gen_range(0..=h - patch);
    let x = rng.gen_range(0..=w - patch);
    Ok((p.raw.crop(y, x, patch, patch)?, p.srgb.crop(y, x, patch, patch)?))
}

struct SampleOut {
    grads: ParamGrads<f32>,
    rate: f64,
    mae: f64,
    loss: f64,
}

fn sample_step(codec: &Codec, pair: &ImagePair, cfg: &RdConfig, batch: usize, rng: &mut ChaCha8Rng) -> Result<SampleOut> {
    let (raw, srgb) = random_crop(pair, cfg.patch, rng)?;
    let mut g = Graph::new();
    let fwd = codec.forward_train(&mut g, &raw, &srgb, rng)?;
    let x = g.constant(raw);
    let terms = rd_loss(&mut g, fwd.x_hat, x, &fwd.bits, cfg.lambda, cfg.patch * cfg.patch)?;
    let loss = g.value(terms.loss).data()[0] as f64;
    let scaled = g.scale(terms.loss, 1.0 / batch as f32);
    Ok(SampleOut {
        grads: g.backward(scaled)?.into_param_grads(),
        rate: terms.rate_bpp,
        mae: terms.mae,
        loss,
    })
}

/// Trains `codec` in place. `eval` drives the plateau schedule; when empty
/// the training set is used. `on_step` sees every log row as it is produced.
///
/// On divergence the parameters are left at the last finite state and
/// [`Error::Diverged`] is returned.
pub fn train_loop(
    codec: &mut Codec,
    data: &[ImagePair],
    eval: &[ImagePair],
    cfg: &RdConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let eval = if eval.is_empty() { data } else { eval };
    let mut adam = Adam {
        lr: cfg.lr,
        ..Adam::default()
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let full = VarRateConfig::full(codec.steps());
    let mut report = TrainReport {
        records: Vec::new(),
        eval_losses: Vec::new(),
        steps: 0,
        final_lr: cfg.lr,
    };
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut sample_index = 0u64;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch) {
            if cfg.max_steps > 0 && report.steps >= cfg.max_steps {
                break 'epochs;
            }
            let step = report.steps + 1;
            let seeds: Vec<(usize, u64)> = batch
                .iter()
                .enumerate()
                .map(|(j, &i)| (i, sample_index + j as u64 + 1))
                .collect();
            sample_index += batch.len() as u64;
            let shared: &Codec = codec;
            let outs = parallel_map(&seeds, |_, &(i, stream)| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(stream);
                sample_step(shared, &data[i], cfg, batch.len(), &mut rng)
            });
            let outs = match outs.into_iter().collect::<Result<Vec<_>>>() {
                Ok(o) => o,
                Err(Error::NonFinite(what)) => {
                    return Err(Error::Diverged {
                        step,
                        reason: format!("non-finite {what}"),
                    })
                }
                Err(e) => return Err(e),
            };
            let n = outs.len() as f64;
            let rec = StepRecord {
                step,
                rate_bpp: outs.iter().map(|o| o.rate).sum::<f64>() / n,
                mae: outs.iter().map(|o| o.mae).sum::<f64>() / n,
                loss: outs.iter().map(|o| o.loss).sum::<f64>() / n,
                lr: adam.lr,
            };
            if !rec.loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: "non-finite loss".into(),
                });
            }
            let store = &mut codec.store;
            store.zero_grad();
            for o in &outs {
                o.grads.accumulate_into(store);
            }
            let norm = store.clip_grad_norm(cfg.clip_norm);
            if !norm.is_finite() {
                store.zero_grad();
                return Err(Error::Diverged {
                    step,
                    reason: "non-finite gradient".into(),
                });
            }
            let snapshot = store.snapshot();
            adam.step(store)?;
            if store.iter().any(|(_, p)| !p.value.all_finite()) {
                store.restore(&snapshot)?;
                return Err(Error::Diverged {
                    step,
                    reason: "non-finite parameters after update".into(),
                });
            }
            store.zero_grad();
            report.steps = step;
            on_step(&rec);
            report.records.push(rec);
        }
        let e = evaluate(codec, eval, full, cfg.lambda)?.loss;
        report.eval_losses.push(e);
        if e < best {
            best = e;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                adam.lr *= cfg.lr_decay;
                stale = 0;
            }
        }
    }
    report.final_lr = adam.lr;
    Ok(report)
}
