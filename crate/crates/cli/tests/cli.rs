use std::path::Path;
use std::process::{Command, Output};

use mrxray_core::image::Image;
use mrxray_core::projector::dataset::{Manifest, Split};

fn mrxray(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrxray"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let o = mrxray(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("Usage"), "{}", text(&o));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = mrxray(&["dataset", "--seed", "1", "--out", s(dir.path()), "--bogus", "3"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mrxray(&["train", "--data", "x", "--out", "y", "--train.learning_rate", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn dataset_counts_follow_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let o = mrxray(&[
        "dataset", "--phantoms", "4", "--split", "3:1", "--angles", "16", "--pixels", "16", "--seed", "7", "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("manifest_sha256 = "), "{out}");
    let m = Manifest::load(&dir.path().join("manifest.txt")).unwrap();
    assert_eq!(m.pairs_in(Split::Train).count(), 48);
    assert_eq!(m.pairs_in(Split::Test).count(), 16);
}

#[test]
fn bad_split_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mrxray(&["dataset", "--phantoms", "4", "--split", "2:1", "--seed", "1", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stderr).contains("split"));
}

#[test]
fn phantom_and_project_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let o = mrxray(&["phantom", "--seed", "3", "--size", "16", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let vol = dir.path().join("phantom.vol");
    let proj = dir.path().join("proj");
    let o = mrxray(&["project", "--volume", s(&vol), "--pixels", "16", "--angle", "30", "--intensity", "--out", s(&proj)]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let xray = Image::load(&proj.join("xray.img")).unwrap();
    let intensity = Image::load(&proj.join("xray_intensity.img")).unwrap();
    assert_eq!((xray.width(), xray.height()), (16, 16));
    for (&a, &b) in xray.data().iter().zip(intensity.data()) {
        assert!(((-a).exp() - b).abs() < 1e-6);
    }
    assert!(proj.join("mr.pgm").exists());
}

#[test]
fn train_infer_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = mrxray(&[
        "dataset", "--phantoms", "2", "--split", "1:1", "--angles", "2", "--pixels", "16", "--seed", "5", "--out",
        s(&data),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(
        &cfg,
        "# tiny model\ngenerator.base_width = 2\ngenerator.levels = 2\ngenerator.res_blocks_per_level = 1,1\ntrain.epochs = 2\ntrain.batch_size = 2\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let train = |out: &Path| {
        mrxray(&["train", "--data", s(&data), "--config", s(&cfg), "--seed", "9", "--train.lr", "1e-3", "--out", s(out)])
    };
    let o = train(&run);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("train.lr = 0.001") && out.contains("generator.base_width = 2"), "{out}");
    assert!(out.contains("feature_bundle_sha256"), "{out}");
    let metrics = std::fs::read_to_string(run.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");

    let again = dir.path().join("again");
    assert_eq!(train(&again).status.code(), Some(0));
    assert_eq!(
        std::fs::read(run.join("final.ckpt")).unwrap(),
        std::fs::read(again.join("final.ckpt")).unwrap()
    );
    assert_eq!(metrics, std::fs::read_to_string(again.join("metrics.tsv")).unwrap());

    let ckpt = run.join("final.ckpt");
    let input = data.join("ph1_a00_mr.img");
    let inf = |out: &Path| mrxray(&["infer", "--checkpoint", s(&ckpt), "--input", s(&input), "--data", s(&data), "--out", s(out)]);
    let (a, b) = (dir.path().join("inf_a"), dir.path().join("inf_b"));
    assert_eq!(inf(&a).status.code(), Some(0));
    assert_eq!(inf(&b).status.code(), Some(0));
    let gen_a = std::fs::read(a.join("ph1_a00_mr_gen.img")).unwrap();
    assert_eq!(gen_a, std::fs::read(b.join("ph1_a00_mr_gen.img")).unwrap());
    assert_eq!(
        std::fs::read(a.join("ph1_a00_mr_gen.pgm")).unwrap(),
        std::fs::read(b.join("ph1_a00_mr_gen.pgm")).unwrap()
    );
    let m = Manifest::load(&data.join("manifest.txt")).unwrap();
    let img = Image::load(&a.join("ph1_a00_mr_gen.img")).unwrap();
    assert_eq!((img.width(), img.height()), (16, 16));
    let (lo, hi) = (m.xray_norm.denormalize(0.0) as f32, m.xray_norm.denormalize(1.0) as f32);
    assert!(img.data().iter().all(|&v| v >= lo && v <= hi));

    let ev = dir.path().join("eval");
    let o = mrxray(&[
        "eval", "--data", s(&data), "--checkpoint", &format!("a={}", s(&ckpt)), "--checkpoint",
        &format!("b={}", s(&again.join("final.ckpt"))), "--out", s(&ev),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let report = std::fs::read_to_string(ev.join("report.tsv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].split_once('\t').unwrap().1, rows[1].split_once('\t').unwrap().1);
    assert!(ev.join("panel_ph1_a00.pgm").exists());
}

#[test]
fn infer_reports_padding_hint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        mrxray(&["dataset", "--phantoms", "1", "--split", "1:0", "--angles", "1", "--pixels", "16", "--seed", "2", "--out", s(&data)])
            .status
            .code(),
        Some(0)
    );
    let run = dir.path().join("run");
    let o = mrxray(&[
        "train", "--data", s(&data), "--seed", "1", "--generator.base_width", "2", "--generator.levels", "2",
        "--generator.res_blocks_per_level", "1,1", "--train.max_steps", "1", "--out", s(&run),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let odd = dir.path().join("odd.img");
    Image::new(15, 15, vec![0.1; 225]).unwrap().save(&odd).unwrap();
    let o = mrxray(&[
        "infer", "--checkpoint", s(&run.join("final.ckpt")), "--input", s(&odd), "--data", s(&data), "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pad"), "{}", text(&o));
}

#[test]
fn missing_seed_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    mrxray(&["dataset", "--phantoms", "1", "--split", "1:0", "--angles", "1", "--pixels", "16", "--seed", "2", "--out", s(&data)]);
    let o = mrxray(&["train", "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    mrxray(&["dataset", "--phantoms", "1", "--split", "1:0", "--angles", "2", "--pixels", "16", "--seed", "2", "--out", s(&data)]);
    let o = mrxray(&[
        "train", "--data", s(&data), "--seed", "1", "--generator.base_width", "2", "--generator.levels", "2",
        "--generator.res_blocks_per_level", "1,1", "--loss.objective", "pixel_l2", "--train.lr", "50",
        "--train.divergence_factor", "1.0001", "--train.epochs", "30", "--train.batch_size", "1", "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
}

#[test]
fn gradcheck_single_op_passes() {
    let o = mrxray(&["gradcheck", "--ops", "relu,conv2d", "--trials", "3", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(text(&o).matches("pass ").count(), 2);
    let o = mrxray(&["gradcheck", "--ops", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}
