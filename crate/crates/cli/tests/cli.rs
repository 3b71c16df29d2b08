use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dnp::raster::Image;
use dnp::scene::load_dataset;
use dnp::training::{render_split, Split};

fn dnp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dnp")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        out.push((entry.strip_prefix(dir).unwrap().display().to_string(), fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let o = dnp(&["paint"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn make_scene_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = dnp(&["make-scene", "--T", "30", "--res", "16", "--seed", "7", "--audio", "--out", s(dir)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(listing(&a), listing(&b));
    let d = load_dataset(&a).unwrap();
    assert_eq!(d.len(), 30);
    assert!(d.audio.is_some());
}

#[test]
fn invalid_scene_arguments_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(dnp(&["make-scene", "--T", "1", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(dnp(&["make-scene", "--n-exp", "0", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(dnp(&["make-scene", "--T", "10"]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn train_evaluate_render_reenact() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("scene");
    let ckpt = tmp.path().join("m.dnpc");
    assert!(dnp(&["make-scene", "--T", "30", "--res", "16", "--seed", "3", "--out", s(&data)]).status.success());

    let o = dnp(&[
        "train", "--data", s(&data), "--variant", "F", "--preset", "tiny", "--steps", "30", "--n-v", "8",
        "--snapshot-every", "10", "--seed", "2", "--threads", "1", "--out", s(&ckpt),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let loss_lines = stderr(&o).lines().filter(|l| l.starts_with('{')).count();
    assert_eq!(loss_lines, 3);

    let o = dnp(&["evaluate", "--ckpt", s(&ckpt), "--data", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["variant"], "F");
    assert_eq!(v["step"], 30);
    assert_eq!(v["metrics"]["frames"], 3);
    assert!(v["metrics"]["psnr"].as_f64().unwrap() > 0.0);
    assert!(v["mean_frame_baseline"]["l1"].as_f64().unwrap() > 0.0);

    let png = tmp.path().join("f.png");
    let o = dnp(&["render", "--ckpt", s(&ckpt), "--gaze", "-0.2,0.1", "--res", "32", "--out", s(&png)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = Image::load_png(&png).unwrap();
    assert_eq!((img.height(), img.width()), (32, 32));
    let o = dnp(&["render", "--ckpt", s(&ckpt), "--pose", "0,0,0,0,0", "--out", s(&png)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--pose"));

    // Reenacting the scene's own track matches the held-out renders.
    let frames = tmp.path().join("frames");
    let o = dnp(&["reenact", "--ckpt", s(&ckpt), "--tracks", s(&data.join("tracks.jsonl")), "--out", s(&frames)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let d = load_dataset(&data).unwrap();
    let model = dnp::checkpoint::load_checkpoint(&ckpt).unwrap().model;
    let (held, _) = render_split(&model, &d, Split::HeldOut).unwrap();
    for (&i, img) in d.held_out.iter().zip(&held) {
        let got = Image::load_png(&frames.join(format!("{i:06}.png"))).unwrap();
        assert_eq!(got, img.quantized());
    }
    assert_eq!(fs::read_dir(&frames).unwrap().count(), 30);
}

#[test]
fn reenact_edge_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("scene");
    let ckpt = tmp.path().join("m.dnpc");
    assert!(dnp(&["make-scene", "--T", "12", "--res", "16", "--out", s(&data)]).status.success());
    let o = dnp(&["train", "--data", s(&data), "--preset", "tiny", "--steps", "0", "--n-v", "4", "--out", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = tmp.path().join("none");
    let o = dnp(&["reenact", "--ckpt", s(&ckpt), "--tracks", s(&empty), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 0);

    let text = fs::read_to_string(data.join("tracks.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{\"pose\": [0, 0]}";
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n")).unwrap();
    let o = dnp(&["reenact", "--ckpt", s(&ckpt), "--tracks", s(&bad), "--out", s(&tmp.path().join("bad"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn bench_reports_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench.json");
    let o = dnp(&["bench", "--variant", "C", "--preset", "tiny", "--res", "16,32", "--frames", "3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["variant"], "C");
    assert_eq!(v["entries"].as_array().unwrap().len(), 2);
    assert_eq!(v["warmup"], 10);
    assert_eq!(dnp(&["bench", "--res", "20", "--frames", "2"]).status.code(), Some(2));
    assert_eq!(dnp(&["bench", "--frames", "0"]).status.code(), Some(2));
}

#[test]
fn serve_rejects_missing_checkpoint() {
    let o = dnp(&["serve", "--ckpt", "/nonexistent/model.dnpc"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.dnpc"));
}
