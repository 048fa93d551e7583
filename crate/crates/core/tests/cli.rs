use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gcodec::cli::{resolve_config, train_config, CommonArgs, TrainArgs};
use gcodec::codec::checkpoint;
use gcodec::data::{load_image, save_image, synthetic_image, tensor_to_rgb};
use gcodec::metrics::RDReport;
use gcodec::training::Stage;

fn gcodec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcodec")).args(args).env_remove("GCODEC_DATA_DIR").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn image_dir(root: &Path, sizes: &[(usize, usize)]) -> PathBuf {
    let dir = root.join("images");
    std::fs::create_dir_all(&dir).unwrap();
    for (i, (h, w)) in sizes.iter().enumerate() {
        save_image(&synthetic_image(77, i as u64, *h, *w).unwrap(), dir.join(format!("img{i}.png"))).unwrap();
    }
    dir
}

const SMALL: [&str; 4] = ["--set", "codec.base_channels=8", "--set", "codec.latent_channels=8"];

fn fresh_model(root: &Path, name: &str, seed: &str, extra: &[&str]) -> PathBuf {
    let out = root.join(name);
    let mut args = vec!["train", "--steps", "0", "--seed", seed, "--lambda", "100", "--out", s(&out)];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    ok(&gcodec(&args));
    out
}

#[test]
fn ingest_tiles_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let src = image_dir(dir.path(), &[(256, 256)]);
    std::fs::write(src.join("broken.png"), b"not an image").unwrap();
    let a = dir.path().join("a");
    ok(&gcodec(&["ingest", "--src", s(&src), "--out", s(&a), "--patch", "64", "--scales", "1"]));
    let rows = |p: &Path| std::fs::read_to_string(p.join("manifest.csv")).unwrap();
    assert_eq!(rows(&a).lines().count(), 1 + 16);
    let b = dir.path().join("b");
    ok(&gcodec(&["ingest", "--src", s(&src), "--out", s(&b), "--patch", "64", "--scales", "1,2"]));
    assert_eq!(rows(&b).lines().count(), 1 + 20);
    let c = dir.path().join("c");
    ok(&gcodec(&["ingest", "--src", s(&src), "--out", s(&c), "--patch", "64", "--scales", "1,2"]));
    assert_eq!(rows(&b), rows(&c));
    let p = load_image(b.join("img0_s2_64_0.png")).unwrap();
    assert_eq!(p.dims(), &[3, 64, 64]);
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(gcodec(&["ingest", "--src", s(&empty), "--out", s(&dir.path().join("d"))]).status.code(), Some(3));
}

#[test]
fn train_then_eval_grid() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.gckp");
    let log = dir.path().join("log.jsonl");
    let mut args = vec!["train", "--steps", "2", "--lambda", "100", "--out", s(&ckpt), "--log", s(&log)];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(&["--set", "data.synthetic=4", "--set", "train.batch_size=2"]);
    ok(&gcodec(&args));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);
    let state = checkpoint::load(&ckpt).unwrap();
    assert_eq!(state.meta.steps_trained, 2);

    let images = image_dir(dir.path(), &[(64, 64), (64, 128), (70, 90), (64, 64)]);
    let out = dir.path().join("rd");
    let grid = "65,120,230,440,850,1600,3100,6000";
    ok(&gcodec(&["eval", "--checkpoint", s(&ckpt), "--images", s(&images), "--lambda-grid", grid, "--out", s(&out)]));
    let rows = RDReport::read_csv(std::fs::File::open(out.join("rd.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 32);
    assert!(rows.iter().all(|r| r.bpp > 0.0 && r.psnr.is_finite()));
    let report = RDReport::read_jsonl(std::io::BufReader::new(std::fs::File::open(out.join("rd.jsonl")).unwrap())).unwrap();
    assert_eq!(report.records, rows);
    assert_eq!(std::fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 9);
}

#[test]
fn training_preconditions_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.gckp");
    let r = gcodec(&["train", "--steps", "5", "--set", "train.stage=bm_finetune", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("checkpoint"));
    let r = gcodec(&["train", "--steps", "5", "--lambda", "10", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3), "no data");
    let r = gcodec(&["train", "--set", "train.bogus=1", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(gcodec(&["frobnicate"]).status.code(), Some(2));
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nsteps = 3\nunknown_key = 1\n").unwrap();
    assert_eq!(gcodec(&["train", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn zero_steps_copy_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let a = fresh_model(dir.path(), "a.gckp", "3", &[]);
    let b = dir.path().join("b.gckp");
    let mut args = vec!["train", "--steps", "0", "--checkpoint", s(&a), "--set", "train.stage=bm_finetune"];
    args.extend_from_slice(&["--lambda-grid", "100,200", "--out", s(&b)]);
    ok(&gcodec(&args));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn compress_decompress_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = fresh_model(dir.path(), "m.gckp", "4", &["--set", "codec.modulator.enabled=true"]);
    let images = image_dir(dir.path(), &[(70, 90)]);
    let src = images.join("img0.png");
    let bits = dir.path().join("img.gcv");
    let recon = dir.path().join("recon.png");
    let stdout = ok(&gcodec(&["compress", "--checkpoint", s(&ckpt), "--input", s(&src), "--lambda", "100", "--out", s(&bits)]));
    assert!(stdout.contains("bpp"));
    let r = gcodec(&["decompress", "--checkpoint", s(&ckpt), "--input", s(&bits), "--out", s(&recon), "--original", s(&src)]);
    assert!(ok(&r).contains("psnr"));

    let state = checkpoint::load(&ckpt).unwrap();
    let x = load_image(&src).unwrap().unsqueeze(0).unwrap();
    let (padded, _) = gcodec::data::reflect_pad(&x, 64).unwrap();
    let fr = state.forward_eval(&padded, 100.0).unwrap();
    let want = tensor_to_rgb(&fr.x_hat.narrow(2, 0, 70).unwrap().narrow(3, 0, 90).unwrap()).unwrap();
    let got = image::open(&recon).unwrap().to_rgb8();
    assert_eq!(got, want);

    let other = fresh_model(dir.path(), "o.gckp", "5", &[]);
    let r = gcodec(&["decompress", "--checkpoint", s(&other), "--input", s(&bits), "--out", s(&recon)]);
    assert_eq!(r.status.code(), Some(4));
    std::fs::write(&bits, b"XXXX garbage").unwrap();
    let r = gcodec(&["decompress", "--checkpoint", s(&ckpt), "--input", s(&bits), "--out", s(&recon)]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn extrapolated_lambda_warns_but_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.gckp");
    let mut args = vec!["train", "--steps", "1", "--lambda", "100", "--out", s(&ckpt)];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(&["--set", "data.synthetic=2", "--set", "train.batch_size=1"]);
    ok(&gcodec(&args));
    let images = image_dir(dir.path(), &[(64, 64)]);
    let r = gcodec(&[
        "compress",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&images.join("img0.png")),
        "--lambda",
        "5000",
        "--out",
        s(&dir.path().join("o.gcv")),
    ]);
    ok(&r);
    assert!(String::from_utf8_lossy(&r.stderr).contains("warning"));
}

#[test]
fn profile_tables() {
    let dir = tempfile::tempdir().unwrap();
    let images = image_dir(dir.path(), &[(64, 64), (64, 64)]);
    let plain = fresh_model(dir.path(), "p.gckp", "1", &["--set", "codec.gate_every_layer_except_first=false"]);
    let out = ok(&gcodec(&["profile", "--checkpoint", s(&plain), "--images", s(&images)]));
    assert!(out.contains("total reduction 1.000x"), "{out}");
    let gated = fresh_model(dir.path(), "g.gckp", "1", &[]);
    let csv_path = dir.path().join("ledger.csv");
    ok(&gcodec(&["profile", "--checkpoint", s(&gated), "--images", s(&images), "--out", s(&csv_path)]));
    let table = std::fs::read_to_string(&csv_path).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 14);
    assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some("true")).count(), 10);
    for name in ["g_a.0", "h_a.0", "h_s.0", "g_s.0"] {
        assert!(rows.iter().any(|r| r.starts_with(&format!("{name},false"))), "{name}");
    }
}

#[test]
fn neutral_modules_give_identical_eval_rows() {
    let dir = tempfile::tempdir().unwrap();
    let images = image_dir(dir.path(), &[(64, 64), (64, 128)]);
    let plain = fresh_model(dir.path(), "p.gckp", "8", &["--set", "codec.gate_every_layer_except_first=false"]);
    let full = fresh_model(dir.path(), "f.gckp", "8", &["--set", "codec.modulator.enabled=true"]);
    let rows = |ckpt: &Path, tag: &str| {
        let out = dir.path().join(tag);
        ok(&gcodec(&["eval", "--checkpoint", s(ckpt), "--images", s(&images), "--lambda-grid", "100,1000", "--out", s(&out)]));
        std::fs::read_to_string(out.join("rd.csv")).unwrap()
    };
    assert_eq!(rows(&plain, "a"), rows(&full, "b"));
}

#[test]
fn data_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let images = image_dir(dir.path(), &[(64, 64)]);
    let ckpt = fresh_model(dir.path(), "m.gckp", "2", &[]);
    let out = dir.path().join("rd");
    let r = Command::new(env!("CARGO_BIN_EXE_gcodec"))
        .args(["eval", "--checkpoint", s(&ckpt), "--lambda", "100", "--out", s(&out)])
        .env("GCODEC_DATA_DIR", &images)
        .output()
        .unwrap();
    ok(&r);
    assert_eq!(std::fs::read_to_string(out.join("rd.csv")).unwrap().lines().count(), 2);
}

fn targs(config: Option<PathBuf>, overrides: Vec<String>, steps: Option<usize>, seed: Option<u64>) -> TrainArgs {
    TrainArgs {
        common: CommonArgs { config, overrides, seed },
        checkpoint: None,
        lambda: None,
        lambda_grid: None,
        steps,
        data: None,
        out: PathBuf::from("unused"),
        log: None,
    }
}

#[test]
fn override_precedence_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.toml");
    std::fs::write(&file, "[train]\nsteps = 30\nseed = 5\nstage = \"ecg\"\n[codec]\nbase_channels = 16\n").unwrap();
    let default = gcodec::training::TrainConfig::default();
    for use_file in [false, true] {
        for set in [false, true] {
            for flag in [false, true] {
                let cfg = use_file.then(|| file.clone());
                let ov = if set { vec!["train.steps=40".to_string()] } else { vec![] };
                let fc = train_config(&targs(cfg, ov, flag.then_some(50), None)).unwrap();
                let want = if flag {
                    50
                } else if set {
                    40
                } else if use_file {
                    30
                } else {
                    default.steps
                };
                assert_eq!(fc.train.steps, want, "file={use_file} set={set} flag={flag}");
            }
        }
    }
    let fc = train_config(&targs(Some(file.clone()), vec![], None, Some(9))).unwrap();
    assert_eq!((fc.train.seed, fc.train.stage, fc.codec.base_channels), (9, Stage::Ecg, 16));
    let fc = resolve_config(Some(&file), &[]).unwrap();
    assert_eq!(fc.train.seed, 5);
    assert_eq!(fc.codec.latent_channels, 48);
}
