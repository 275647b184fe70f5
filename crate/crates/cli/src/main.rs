use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rawtide::backbone::ArchConfig;
use rawtide::container::Container;
use rawtide::entropymodel::VarRateConfig;
use rawtide::ispsim::{self, ImagePair, Source};
use rawtide::metrics::QualityReport;
use rawtide::model::Codec;
use rawtide::quant::{bpp_lower_bound, verify_rate_bound};
use rawtide::train::{self, parallel_map, RdConfig, StepRecord};
use rawtide::Error;

/// Exit codes.
const EXIT_FAILURE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_MODEL: u8 = 3;
const EXIT_HASH: u8 = 4;
const EXIT_STREAM: u8 = 5;

#[derive(Parser)]
#[command(name = "rawtide", version, about = "Stores a raw image as compact metadata beside its sRGB rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate raw/sRGB training pairs and a manifest
    GenData(GenDataArgs),
    /// Train a model with the rate-distortion objective
    Train(TrainArgs),
    /// Compress a raw image given its sRGB rendering
    Encode(EncodeArgs),
    /// Reconstruct a raw image from metadata and its sRGB rendering
    Decode(DecodeArgs),
    /// Report bpp, PSNR and SSIM over a dataset
    Eval(EvalArgs),
    /// Closed-form rate lower bound with a Monte-Carlo check
    Bound(BoundArgs),
    /// Sweep the quality factors over a dataset and write CSV
    RdSweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Side length of each pair in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Crop scenes from PNG/PPM images in this directory instead of generating them
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Where to write the model; the architecture config goes next to it
    #[arg(long)]
    out: PathBuf,
    /// Training config (key=value)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture config (key=value); ignored with --init
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Continue from an existing model
    #[arg(long)]
    init: Option<PathBuf>,
    /// Manifest of the set that drives learning-rate decay (default: training set)
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Per-step metrics CSV
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after this many optimizer steps
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RateArgs {
    /// Number of transmitted mask steps (default: all)
    #[arg(long)]
    beta: Option<u8>,
    /// log2 scale of the last transmitted step's bin width
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    gamma: f32,
}

#[derive(Args)]
struct EncodeArgs {
    /// Raw image (RAWF)
    #[arg(long)]
    raw: PathBuf,
    /// sRGB image (PNG or PPM)
    #[arg(long)]
    srgb: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output container (.rwmd)
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    rate: RateArgs,
    /// Also write the reconstruction the decoder will produce (RAWF)
    #[arg(long)]
    recon: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Container (.rwmd)
    #[arg(long)]
    input: PathBuf,
    /// sRGB image the container was encoded with
    #[arg(long)]
    srgb: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output raw image (RAWF)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    rate: RateArgs,
    /// Evaluate the sRGB-only reconstruction (all latents zero)
    #[arg(long)]
    no_metadata: bool,
    /// Per-image CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    sigma: f64,
    /// Monte-Carlo samples; 0 prints only the closed form
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated gamma values
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,7.5", allow_negative_numbers = true)]
    gammas: Vec<f32>,
    /// Comma-separated beta values (default: 0 to N)
    #[arg(long, value_delimiter = ',')]
    betas: Vec<u8>,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Display) -> Self {
        Failure {
            code,
            message: message.to_string(),
        }
    }
}

/// Default exit code for a library error.
fn classify(e: &Error) -> u8 {
    match e {
        Error::Shape(_) | Error::InvalidArgument(_) => EXIT_INPUT,
        Error::ModelMismatch { .. } => EXIT_HASH,
        Error::Checksum { .. } | Error::StreamExhausted | Error::StreamCorrupt(_) | Error::Unencodable { .. } => EXIT_STREAM,
        _ => EXIT_FAILURE,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(classify(&e), e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(EXIT_FAILURE, e)
    }
}

type CliResult = Result<(), Failure>;

fn context<T>(r: rawtide::Result<T>, code: u8, what: impl Display) -> Result<T, Failure> {
    r.map_err(|e| Failure::new(code, format!("{what}: {e}")))
}

fn input<T>(r: rawtide::Result<T>, path: &Path) -> Result<T, Failure> {
    r.map_err(|e| {
        let code = match e {
            Error::Io(_) | Error::Image(_) => EXIT_FAILURE,
            _ => EXIT_INPUT,
        };
        Failure::new(code, format!("{}: {e}", path.display()))
    })
}

fn load_model(path: &Path) -> Result<Codec, Failure> {
    context(Codec::load(path), EXIT_MODEL, format!("cannot load model {}", path.display()))
}

fn rate_config(args: &RateArgs, codec: &Codec) -> Result<VarRateConfig, Failure> {
    let rate = VarRateConfig {
        beta: args.beta.unwrap_or(codec.steps() as u8),
        gamma: args.gamma,
    };
    rate.validate(codec.steps())?;
    Ok(rate)
}

fn load_pair(raw: &Path, srgb: &Path) -> Result<(rawtide::numerics::Tensor, rawtide::numerics::Tensor), Failure> {
    let r = input(ispsim::load_rawf(raw), raw)?;
    let s = input(ispsim::read_srgb(srgb), srgb)?;
    if r.shape() != s.shape() {
        return Err(Failure::new(
            EXIT_INPUT,
            format!("raw image is {:?} but sRGB image is {:?}", &r.shape()[2..], &s.shape()[2..]),
        ));
    }
    Ok((r, s))
}

fn load_dataset(path: &Path) -> Result<Vec<ImagePair>, Failure> {
    let pairs = input(ispsim::load_manifest_pairs(path), path)?;
    if pairs.is_empty() {
        return Err(Failure::new(EXIT_INPUT, format!("{} lists no pairs", path.display())));
    }
    Ok(pairs)
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let source = match &a.from {
        Some(d) => Source::Directory(d.clone()),
        None => Source::Procedural,
    };
    let pairs = ispsim::make_dataset(&source, a.count, a.size, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let raw = PathBuf::from(format!("raw_{i:04}.rawf"));
        let srgb = PathBuf::from(format!("srgb_{i:04}.png"));
        ispsim::save_rawf(&p.raw, &a.out.join(&raw))?;
        ispsim::write_srgb(&p.srgb, &a.out.join(&srgb))?;
        entries.push((raw, srgb));
    }
    let manifest = a.out.join("manifest.tsv");
    ispsim::write_manifest(&entries, &manifest)?;
    println!("pairs={} manifest={}", pairs.len(), manifest.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => input(fs::read_to_string(p).map_err(Error::from).and_then(|t| RdConfig::parse(&t)), p)?,
        None => RdConfig::default(),
    };
    cfg.lambda = a.lambda.unwrap_or(cfg.lambda);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch = a.batch.unwrap_or(cfg.batch);
    cfg.patch = a.patch.unwrap_or(cfg.patch);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.max_steps = a.steps.unwrap_or(cfg.max_steps);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    let mut codec = match (&a.init, &a.arch) {
        (Some(p), _) => load_model(p)?,
        (None, Some(p)) => {
            let arch = input(fs::read_to_string(p).map_err(Error::from).and_then(|t| ArchConfig::parse(&t)), p)?;
            Codec::new(arch, cfg.seed)?
        }
        (None, None) => Codec::new(ArchConfig::default(), cfg.seed)?,
    };
    let data = load_dataset(&a.data)?;
    let eval = match &a.eval_data {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    let mut log = match &a.metrics {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "{}", StepRecord::CSV_HEADER)?;
            Some(w)
        }
        None => None,
    };
    let result = train::train_loop(&mut codec, &data, &eval, &cfg, |r| {
        if let Some(w) = log.as_mut() {
            let _ = writeln!(w, "{}", r.csv_row());
        }
        if r.step % 10 == 0 || r.step == 1 {
            eprintln!("step {:>6}  loss {:.4}  rate {:.4} bpp  mae {:.5}  lr {:e}", r.step, r.loss, r.rate_bpp, r.mae, r.lr);
        }
    });
    if let Some(mut w) = log {
        w.flush()?;
    }
    // on divergence the model holds the last finite parameters; keep them
    codec.save(&a.out)?;
    let report = result?;
    println!("steps={} final_lr={} model={} hash={}", report.steps, report.final_lr, a.out.display(), codec.hash_hex());
    Ok(())
}

fn encode_cmd(a: EncodeArgs) -> CliResult {
    let (raw, srgb) = load_pair(&a.raw, &a.srgb)?;
    let codec = load_model(&a.model)?;
    let rate = rate_config(&a.rate, &codec)?;
    let enc = codec.encode(&raw, &srgb, rate)?;
    enc.container.save(&a.out)?;
    if let Some(p) = &a.recon {
        ispsim::save_rawf(&enc.coded.x_hat, p)?;
    }
    let r = &enc.coded.report;
    println!("beta={} gamma={}", rate.beta, rate.gamma);
    println!("main_bits={} hyper_bits={}", r.actual_bits[0], r.actual_bits[1]);
    println!("estimated_main_bits={:.1} estimated_hyper_bits={:.1}", r.estimated_bits[0], r.estimated_bits[1]);
    println!("container_bytes={}", enc.container.byte_len());
    println!("bpp={}", enc.container.bpp());
    Ok(())
}

fn decode_cmd(a: DecodeArgs) -> CliResult {
    let container = Container::load(&a.input).map_err(|e| {
        let code = match e {
            Error::Io(_) => EXIT_FAILURE,
            _ => EXIT_STREAM,
        };
        Failure::new(code, format!("{}: {e}", a.input.display()))
    })?;
    let srgb = input(ispsim::read_srgb(&a.srgb), &a.srgb)?;
    let codec = load_model(&a.model)?;
    let coded = codec.decode(&container, &srgb)?;
    ispsim::save_rawf(&coded.x_hat, &a.out)?;
    println!("bpp={}", container.bpp());
    Ok(())
}

struct Row {
    image: usize,
    rate: VarRateConfig,
    quality: QualityReport,
}

fn measure(codec: &Codec, data: &[ImagePair], rate: Option<VarRateConfig>) -> Result<Vec<QualityReport>, Failure> {
    let rows = parallel_map(data, |_, p| -> rawtide::Result<QualityReport> {
        match rate {
            Some(rate) => {
                let enc = codec.encode(&p.raw, &p.srgb, rate)?;
                QualityReport::measure(&p.raw, &enc.coded.x_hat, enc.container.bpp())
            }
            None => QualityReport::measure(&p.raw, &codec.reconstruct_without_metadata(&p.srgb)?, 0.0),
        }
    });
    Ok(rows.into_iter().collect::<rawtide::Result<Vec<_>>>()?)
}

fn mean(rows: &[QualityReport]) -> QualityReport {
    let n = rows.len() as f64;
    QualityReport {
        psnr_db: rows.iter().map(|q| q.psnr_db).sum::<f64>() / n,
        ssim: rows.iter().map(|q| q.ssim).sum::<f64>() / n,
        bpp: rows.iter().map(|q| q.bpp).sum::<f64>() / n,
    }
}

fn write_rows(path: &Path, rows: &[Row]) -> CliResult {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "image,beta,gamma,bpp,psnr,ssim")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.image, r.rate.beta, r.rate.gamma, r.quality.bpp, r.quality.psnr_db, r.quality.ssim
        )?;
    }
    w.flush()?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let data = load_dataset(&a.data)?;
    let codec = load_model(&a.model)?;
    let rate = rate_config(&a.rate, &codec)?;
    let rows = measure(&codec, &data, (!a.no_metadata).then_some(rate))?;
    let m = mean(&rows);
    if let Some(p) = &a.csv {
        let rows: Vec<Row> = rows
            .into_iter()
            .enumerate()
            .map(|(image, quality)| Row { image, rate, quality })
            .collect();
        write_rows(p, &rows)?;
    }
    println!("images={} bpp={} psnr={} ssim={}", data.len(), m.bpp, m.psnr_db, m.ssim);
    Ok(())
}

fn bound_cmd(a: BoundArgs) -> CliResult {
    if !(a.delta > 0.0 && a.sigma > 0.0) {
        return Err(Failure::new(EXIT_INPUT, "delta and sigma must be positive"));
    }
    println!("bound_bits={}", bpp_lower_bound(a.delta, a.sigma));
    if a.samples > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let c = verify_rate_bound(a.delta, a.sigma, a.samples, &mut rng);
        println!("empirical_bits={} std_error={} offset={}", c.empirical, c.std_error, c.z);
        println!("holds={}", c.holds());
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> CliResult {
    let data = load_dataset(&a.data)?;
    let codec = load_model(&a.model)?;
    let betas: Vec<u8> = if a.betas.is_empty() {
        (0..=codec.steps() as u8).collect()
    } else {
        a.betas.clone()
    };
    let mut grid = Vec::new();
    for &beta in &betas {
        for &gamma in &a.gammas {
            let rate = VarRateConfig { beta, gamma };
            rate.validate(codec.steps())?;
            grid.push(rate);
        }
    }
    let mut rows = Vec::new();
    let per_rate: Vec<Vec<QualityReport>> = grid.iter().map(|&r| measure(&codec, &data, Some(r))).collect::<Result<_, _>>()?;
    for image in 0..data.len() {
        for (rate, q) in grid.iter().zip(&per_rate) {
            rows.push(Row {
                image,
                rate: *rate,
                quality: q[image],
            });
        }
    }
    write_rows(&a.out, &rows)?;
    for (rate, q) in grid.iter().zip(&per_rate) {
        let m = mean(q);
        println!("beta={} gamma={} bpp={} psnr={} ssim={}", rate.beta, rate.gamma, m.bpp, m.psnr_db, m.ssim);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Encode(a) => encode_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bound(a) => bound_cmd(a),
        Command::RdSweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
