use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_rawtide");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn rawtide")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/cli")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn field<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .split_whitespace()
        .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key}= in {stdout}"))
}

/// Small dataset plus a briefly trained model in a fresh directory.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(&["gen-data", "--out", s(&data), "--count", "2", "--size", "32", "--seed", "3"]);
    let model = dir.join("m.rtwt");
    ok(&[
        "train", "--data", s(&data.join("manifest.tsv")), "--out", s(&model),
        "--steps", "2", "--batch", "2", "--patch", "32", "--seed", "5",
    ]);
    (data, model)
}

#[test]
fn help_matches_golden() {
    for (name, args) in [("help.txt", vec!["--help"]), ("encode_help.txt", vec!["encode", "--help"])] {
        let text = ok(&args);
        let path = fixtures().join(name);
        if std::env::var_os("RAWTIDE_BLESS").is_some() {
            std::fs::write(&path, &text).unwrap();
        }
        let golden = std::fs::read_to_string(&path).expect("golden help text");
        assert_eq!(text, golden, "{name} differs; rerun with RAWTIDE_BLESS=1 if intended");
    }
}

#[test]
fn encode_decode_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = setup(tmp.path());
    let raw = data.join("raw_0000.rawf");
    let srgb = data.join("srgb_0000.png");
    let bits = tmp.path().join("a.rwmd");
    let recon = tmp.path().join("recon.rawf");
    let out = ok(&[
        "encode", "--raw", s(&raw), "--srgb", s(&srgb), "--model", s(&model),
        "--out", s(&bits), "--beta", "3", "--gamma", "0.5", "--recon", s(&recon),
    ]);
    let bpp: f64 = field(&out, "bpp").parse().unwrap();
    let bytes = std::fs::read(&bits).unwrap();
    assert!(bpp > 0.0);
    assert_eq!(&bytes[..4], b"RWMD");

    let decoded = tmp.path().join("d.rawf");
    let dout = ok(&["decode", "--input", s(&bits), "--srgb", s(&srgb), "--model", s(&model), "--out", s(&decoded)]);
    assert_eq!(field(&dout, "bpp"), field(&out, "bpp"));
    assert_eq!(std::fs::read(&decoded).unwrap(), std::fs::read(&recon).unwrap());

    // same inputs give the same container
    let again = tmp.path().join("b.rwmd");
    ok(&[
        "encode", "--raw", s(&raw), "--srgb", s(&srgb), "--model", s(&model),
        "--out", s(&again), "--beta", "3", "--gamma", "0.5",
    ]);
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = setup(tmp.path());
    let raw = data.join("raw_0000.rawf");
    let srgb = data.join("srgb_0000.png");
    let other_srgb = tmp.path().join("small.png");
    ok(&["gen-data", "--out", s(tmp.path()), "--count", "1", "--size", "16", "--seed", "9"]);
    std::fs::rename(tmp.path().join("srgb_0000.png"), &other_srgb).unwrap();

    let bits = tmp.path().join("a.rwmd");
    let enc = |srgb: &Path, model: &Path| {
        code(&["encode", "--raw", s(&raw), "--srgb", s(srgb), "--model", s(model), "--out", s(&bits)])
    };
    assert_eq!(enc(&other_srgb, &model), 2);
    assert_eq!(enc(&srgb, &tmp.path().join("missing.rtwt")), 3);
    assert_eq!(enc(&srgb, &model), 0);
    assert_eq!(
        code(&["encode", "--raw", s(&raw), "--srgb", s(&srgb), "--model", s(&model), "--out", s(&bits), "--beta", "99"]),
        2
    );

    let out = tmp.path().join("d.rawf");
    let dec = |input: &Path, model: &Path| {
        code(&["decode", "--input", s(input), "--srgb", s(&srgb), "--model", s(model), "--out", s(&out)])
    };

    let other = tmp.path().join("other.rtwt");
    ok(&[
        "train", "--data", s(&data.join("manifest.tsv")), "--out", s(&other),
        "--steps", "1", "--batch", "2", "--patch", "32", "--seed", "6",
    ]);
    assert_eq!(dec(&bits, &other), 4);

    let mut bytes = std::fs::read(&bits).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    let corrupt = tmp.path().join("corrupt.rwmd");
    std::fs::write(&corrupt, &bytes).unwrap();
    assert_eq!(dec(&corrupt, &model), 5);

    let truncated = tmp.path().join("short.rwmd");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(dec(&truncated, &model), 5);
}

#[test]
fn bound_spot_value() {
    let out = ok(&["bound", "--delta", "1", "--sigma", "1", "--samples", "20000"]);
    let bound: f64 = field(&out, "bound_bits").parse().unwrap();
    assert!((bound - 1.4393).abs() < 1e-3);
    assert_eq!(field(&out, "holds"), "true");
    assert_eq!(code(&["bound", "--delta", "0", "--sigma", "1"]), 2);
}

#[test]
fn eval_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = setup(tmp.path());
    let manifest = data.join("manifest.tsv");
    let with = ok(&["eval", "--data", s(&manifest), "--model", s(&model)]);
    let without = ok(&["eval", "--data", s(&manifest), "--model", s(&model), "--no-metadata"]);
    assert_eq!(field(&with, "images"), "2");
    assert_eq!(field(&without, "bpp"), "0");

    let csv = tmp.path().join("rd.csv");
    ok(&[
        "rd-sweep", "--data", s(&manifest), "--model", s(&model),
        "--gammas", "0,2", "--betas", "1,4", "--out", s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "image,beta,gamma,bpp,psnr,ssim");
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    let keys: Vec<(usize, u8, f32)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(keys, sorted);
}

#[test]
fn train_writes_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--out", s(&data), "--count", "2", "--size", "32"]);
    let csv = tmp.path().join("log.csv");
    let model = tmp.path().join("m.rtwt");
    ok(&[
        "train", "--data", s(&data.join("manifest.tsv")), "--out", s(&model),
        "--steps", "3", "--batch", "1", "--patch", "32", "--metrics", s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(model.with_extension("arch").exists());
}
