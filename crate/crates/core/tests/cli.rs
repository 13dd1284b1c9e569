use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use opstego::harness::{write_synthetic_dataset, METRICS_HEADER};
use opstego::layout::BitMessage;
use opstego::model::{ModelConfig, StegoModel};

fn opstego(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opstego")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = opstego(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_model(dir: &Path, zero_head: bool) -> std::path::PathBuf {
    let cfg = ModelConfig { l_ms: 4, height: 32, width: 32, window: 8, ..Default::default() };
    let mut m = StegoModel::new(cfg, 5).unwrap();
    if zero_head {
        for name in ["enc.head.out.w", "enc.head.out.b"] {
            m.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let p = dir.join(if zero_head { "zero.ckpt" } else { "m.ckpt" });
    m.save(&p).unwrap();
    p
}

#[test]
fn gen_message_is_seed_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let (a, b, c) = (d.path().join("a"), d.path().join("b"), d.path().join("c"));
    ok(&["gen-message", "--bits", "333", "--seed", "8", "--out", s(&a)]);
    ok(&["gen-message", "--bits", "333", "--seed", "8", "--out", s(&b)]);
    ok(&["gen-message", "--bits", "333", "--seed", "9", "--out", s(&c)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(BitMessage::read(&a).unwrap().len(), 333);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(opstego(&["gen-message", "--bogus"]).status.code(), Some(2));
    assert_eq!(opstego(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn capacity_mismatch_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = small_model(d.path(), false);
    write_synthetic_dataset(d.path(), 1, 32, 1).unwrap();
    let msg = d.path().join("m.bits");
    ok(&["gen-message", "--bits", "17", "--out", s(&msg)]);
    let cover = d.path().join("img_00000.png");
    let o = opstego(&["embed", "--cover", s(&cover), "--message", s(&msg), "--checkpoint", s(&ckpt), "--out", s(&d.path().join("x.png"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn missing_files_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let o = opstego(&["extract", "--stego", "nope.png", "--checkpoint", "nope.ckpt", "--out", s(&d.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn embed_then_extract_round_trips_through_files() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = small_model(d.path(), false);
    let data = d.path().join("data");
    write_synthetic_dataset(&data, 1, 48, 3).unwrap();
    let (msg, stego, back) = (d.path().join("m.bits"), d.path().join("s.png"), d.path().join("back.bits"));
    ok(&["gen-message", "--bits", "256", "--seed", "1", "--out", s(&msg)]);
    ok(&["embed", "--cover", s(&data.join("img_00000.png")), "--message", s(&msg), "--checkpoint", s(&ckpt), "--out", s(&stego)]);
    let img = image::open(&stego).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
    ok(&["extract", "--stego", s(&stego), "--checkpoint", s(&ckpt), "--out", s(&back)]);
    let model = StegoModel::load(&ckpt).unwrap();
    let want = model.recover(&opstego::harness::load_image(&stego, None).unwrap()).unwrap().bits;
    assert_eq!(BitMessage::read(&back).unwrap(), want);
}

#[test]
fn zero_residual_writes_mid_gray_residual() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = small_model(d.path(), true);
    write_synthetic_dataset(d.path(), 1, 32, 4).unwrap();
    let cover = d.path().join("img_00000.png");
    let (msg, stego, res) = (d.path().join("m.bits"), d.path().join("s.png"), d.path().join("r.png"));
    ok(&["gen-message", "--bits", "256", "--out", s(&msg)]);
    ok(&["embed", "--cover", s(&cover), "--message", s(&msg), "--checkpoint", s(&ckpt), "--out", s(&stego), "--residual", s(&res)]);
    let r = image::open(&res).unwrap().to_rgb8();
    assert!(r.as_raw().iter().all(|&v| v == 128));
    assert_eq!(image::open(&stego).unwrap().to_rgb8(), image::open(&cover).unwrap().to_rgb8());
}

#[test]
fn eval_writes_one_row_per_image() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = small_model(d.path(), false);
    let data = d.path().join("data");
    write_synthetic_dataset(&data, 3, 32, 5).unwrap();
    let report = d.path().join("r.csv");
    let o = ok(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--report", s(&report), "--seed", "2"]);
    let csv = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.starts_with("0,") && l.split(',').count() == 5));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("images 3 acc "));
}

#[test]
fn tiny_training_run_writes_checkpoint_and_metrics() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    write_synthetic_dataset(&data, 4, 40, 6).unwrap();
    let cfg = d.path().join("run.toml");
    fs::write(
        &cfg,
        "[model]\nl_ms = 4\nheight = 32\nwidth = 32\nwindow = 8\n\n[train]\niterations = 4\nbatch_size = 1\nimage_size = 32\neval_interval = 2\nholdout = 0.25\n",
    )
    .unwrap();
    let (ckpt, metrics) = (d.path().join("t.ckpt"), d.path().join("metrics.csv"));
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt), "--metrics", s(&metrics)]);
    let m = StegoModel::load(&ckpt).unwrap();
    assert_eq!(m.iterations, 4);
    assert_eq!(m.config.l_ms, 4);
    let csv = fs::read_to_string(&metrics).unwrap();
    let iters: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["2", "4"]);
}

#[test]
fn bad_config_exits_3() {
    let d = tempfile::tempdir().unwrap();
    write_synthetic_dataset(d.path(), 1, 32, 7).unwrap();
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "[model]\nn_r = 5\n").unwrap();
    let o = opstego(&["train", "--data", s(d.path()), "--config", s(&cfg), "--out", s(&d.path().join("x.ckpt"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn analyze_pe_reports_every_embedding() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = small_model(d.path(), false);
    let (a, b) = (d.path().join("c.csv"), d.path().join("u.csv"));
    ok(&["analyze-pe", "--checkpoint", s(&ckpt), "--out", s(&a)]);
    ok(&["analyze-pe", "--checkpoint", s(&ckpt), "--out", s(&b), "--no-center"]);
    let csv = fs::read_to_string(&a).unwrap();
    assert!(csv.starts_with("embedding,n,eigenvalue,ratio\n"));
    let model = StegoModel::load(&ckpt).unwrap();
    for (name, _) in model.params.iter().filter(|(n, _)| n.ends_with(".pos")) {
        let rows: Vec<&str> = csv.lines().filter(|l| l.starts_with(&format!("{name},"))).collect();
        assert!(!rows.is_empty(), "{name}");
        let last: f64 = rows.last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
        assert!((last - 1.0).abs() < 1e-5, "{name}: {last}");
    }
    assert_ne!(csv, fs::read_to_string(&b).unwrap());
}

#[test]
fn export_pairs_is_byte_identical_across_runs() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = small_model(d.path(), false);
    let data = d.path().join("data");
    write_synthetic_dataset(&data, 2, 32, 8).unwrap();
    let (o1, o2) = (d.path().join("o1"), d.path().join("o2"));
    for o in [&o1, &o2] {
        ok(&["export-pairs", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(o), "--seed", "3"]);
    }
    let mut names: Vec<String> = fs::read_dir(&o1).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["cover_00000.png", "cover_00001.png", "residual_00000.png", "residual_00001.png", "stego_00000.png", "stego_00001.png"]);
    for n in names {
        assert_eq!(fs::read(o1.join(&n)).unwrap(), fs::read(o2.join(&n)).unwrap(), "{n}");
    }
}
