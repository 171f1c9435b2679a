//! Acceptance suite: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. Exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::time::Instant;

use mrxray_core::image::{Image, Pgm16};
use mrxray_core::loss::{perceptual_loss, FeatureExtractor, LossConfig, LossNorm, PixelNorm};
use mrxray_core::netgen::{decoder_checkerboard_energy, generator_gradcheck, preset_proposed, Generator, UpsampleMode};
use mrxray_core::projector::dataset::{build_dataset, DatasetPlan, Manifest, Split};
use mrxray_core::projector::phantom::{generate_phantom, PhantomSpec};
use mrxray_core::projector::{forward_project, volume_io, Channel, Ellipsoid, MarchOptions, ProjectionGeometry, Volume};
use mrxray_core::tensor::gradcheck::{run_op_suite, GradCheckConfig, OP_SUITES};
use mrxray_core::tensor::Tensor;
use mrxray_core::train::{run_ablation, Checkpoint, Objective, Trainer, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Desk-scale ablation budget shared by all arms and seeds.
const ABLATION_PIXELS: usize = 64;
const ABLATION_WIDTH: usize = 16;
const ABLATION_EPOCHS: usize = 20;
const ABLATION_LR: f64 = 2e-4;
const ABLATION_SEEDS: u64 = 5;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn gradient_integrity() -> Verdict {
    let t = Instant::now();
    let cfg = GradCheckConfig::default();
    let mut worst = (0.0f64, "");
    let mut ops_ok = true;
    for (i, name) in OP_SUITES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let r = run_op_suite(name, 20, &cfg, &mut rng).expect("suite runs");
        ops_ok &= r.outcome.max_rel_error < 1e-4;
        if r.outcome.max_rel_error >= worst.0 {
            worst = (r.outcome.max_rel_error, name);
        }
    }
    let model = generator_gradcheck(&preset_proposed(), 16, 17).expect("model check runs");
    let model_err = model.outcome.max_rel_error;
    let secs = t.elapsed().as_secs_f64();
    verdict(
        ops_ok && model_err < 1e-3 && secs < 300.0,
        format!(
            "ops max rel error {:.2e} ({}) < 1e-4; whole model {model_err:.2e} < 1e-3; {secs:.0} s < 300 s",
            worst.0, worst.1
        ),
    )
}

fn projector_oracle() -> Verdict {
    let t = Instant::now();
    let (r, mu) = (15.0, 0.02);
    let mut sphere = Volume::centered([48, 48, 48], [1.0; 3]).unwrap();
    sphere.paint(&Ellipsoid::sphere([0.0; 3], r), mu, mu, 8);
    let geom = ProjectionGeometry::parallel(41, 1, 1.0, 1.0, 0.0);
    let img = forward_project(&sphere, Channel::Attenuation, &geom, MarchOptions::with_step(0.25)).unwrap();
    let mut chord_err = 0.0f64;
    for d in [0.0, 5.0, 9.0, 12.0] {
        let got = img.get(0, 20 + d as usize) as f64;
        let want = 2.0 * mu * (r * r - d * d).sqrt();
        chord_err = chord_err.max((got - want).abs() / want);
    }
    let mut vol = Volume::centered([24, 24, 24], [2.0; 3]).unwrap();
    vol.paint(&Ellipsoid::sphere([3.0, -2.0, 1.0], 12.0), 0.5, 0.02, 4);
    vol.paint(
        &Ellipsoid {
            center: [-6.0, 5.0, -4.0],
            semi_axes: [5.0, 9.0, 4.0],
            yaw: 0.7,
        },
        1.0,
        0.04,
        4,
    );
    let geom = ProjectionGeometry::parallel(60, 60, 1.0, 1.0, 0.0);
    let mut mass_err = 0.0f64;
    for ch in [Channel::Mr, Channel::Attenuation] {
        let img = forward_project(&vol, ch, &geom, MarchOptions::with_step(0.5)).unwrap();
        let proj: f64 = img.data().iter().map(|&v| v as f64).sum();
        let mass: f64 = vol.channel(ch).iter().map(|&v| v as f64).sum::<f64>() * vol.voxel_volume();
        mass_err = mass_err.max((proj - mass).abs() / mass);
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        chord_err < 0.015 && mass_err < 0.02 && secs < 60.0,
        format!(
            "chord error {:.3}% < 1.5%; mass error {:.3}% < 2%; {secs:.1} s < 60 s",
            100.0 * chord_err,
            100.0 * mass_err
        ),
    )
}

fn loss_semantics() -> Verdict {
    let fe = FeatureExtractor::shipped();
    let label = common::phantom_label(11, 64);
    let g = label.map(|v| (v * 0.8 + 0.1).tanh());
    let mut zero_ok = true;
    for norm in [LossNorm::WeightedL1, LossNorm::WeightedL2, LossNorm::Signed] {
        for edge_weighting in [true, false] {
            let cfg = LossConfig {
                norm,
                edge_weighting,
                ..LossConfig::default()
            };
            zero_ok &= perceptual_loss(&label, &label, &fe, &cfg).unwrap() == 0.0;
        }
    }
    let cfg = LossConfig::default();
    let wins = (0..10)
        .filter(|&seed| {
            let (edge, flat) = common::edge_vs_flat_losses(&label, &fe, &cfg, seed);
            edge > flat
        })
        .count();
    // unweighted perceptual loss computed directly from the feature maps
    let off = LossConfig {
        edge_weighting: false,
        ..LossConfig::default()
    };
    let (fl, fg) = (fe.features(&label, 3).unwrap(), fe.features(&g, 3).unwrap());
    let direct: f64 = off
        .layers
        .iter()
        .zip(&off.layer_weights)
        .map(|(&s, &w)| {
            let d = fl[s].data().iter().zip(fg[s].data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
            d / fl[s].numel() as f64 * w
        })
        .sum();
    let got = perceptual_loss(&label, &g, &fe, &off).unwrap();
    verdict(
        zero_ok && wins == 10 && got == direct,
        format!(
            "(a) zero loss for all 6 variants: {zero_ok}; (b) edge > homogeneous in {wins}/10; (c) edge weighting off equals the unweighted loss exactly: {} ({got:.6e})",
            got == direct
        ),
    )
}

fn checkerboard() -> Verdict {
    let mut wins = 0;
    let mut worst_ratio = 0.0f64;
    for seed in 0..10 {
        let smooth = decoder_checkerboard_energy(&Generator::build(&preset_proposed(), seed).unwrap(), 64).unwrap();
        let mut cfg = preset_proposed();
        cfg.upsample_mode = UpsampleMode::TransposedConv;
        let rough = decoder_checkerboard_energy(&Generator::build(&cfg, seed).unwrap(), 64).unwrap();
        if smooth < rough {
            wins += 1;
        }
        worst_ratio = worst_ratio.max(smooth / rough);
    }
    verdict(
        wins == 10,
        format!("bilinear below transposed in {wins}/10 seeds (largest bilinear-to-transposed energy ratio {worst_ratio:.2e})"),
    )
}

fn overfit(dir: &Path) -> Verdict {
    let t = Instant::now();
    let data = dir.join("overfit");
    let manifest = build_dataset(&DatasetPlan::desk(31, 1, (1, 0), 1, 64), &data).unwrap();
    let mut cfg = TrainConfig::with_seed(31);
    cfg.batch_size = 1;
    cfg.epochs = 500;
    cfg.eval_every = 0;
    let mut trainer = Trainer::from_manifest(cfg, &manifest, &data).unwrap();
    let pair = &mrxray_core::train::samples(&manifest, &mrxray_core::projector::dataset::load_pairs(&manifest, &data, Split::Train).unwrap())[0];
    let l1 = |g: &Generator| {
        let y = g.infer(&pair.input).unwrap();
        mrxray_core::loss::pixel_loss(&pair.label, &y, PixelNorm::L1).unwrap() as f64
    };
    let before = l1(trainer.generator());
    trainer.run(None, &mut |_| {}).unwrap();
    let after = l1(trainer.generator());
    let secs = t.elapsed().as_secs_f64();
    verdict(
        after < 0.2 * before && secs < 600.0,
        format!(
            "pixel L1 {before:.4} -> {after:.4} ({:.1}% < 20%) after {} steps; {secs:.0} s < 600 s",
            100.0 * after / before,
            trainer.state().step
        ),
    )
}

fn ablation(dir: &Path) -> Verdict {
    let t = Instant::now();
    let (mut a, mut b) = (0, 0);
    let mut lines = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        let data = dir.join(format!("ablation{seed}"));
        let manifest = build_dataset(&DatasetPlan::desk(seed, 4, (3, 1), 16, ABLATION_PIXELS), &data).unwrap();
        let mut base = TrainConfig::with_seed(seed);
        base.generator.base_width = ABLATION_WIDTH;
        base.epochs = ABLATION_EPOCHS;
        base.lr = ABLATION_LR;
        base.eval_every = 0;
        let out = run_ablation(&manifest, &data, &base, &data.join("runs")).unwrap();
        let edge = |arm: &str| out.report.arm(arm).and_then(|s| s.edge_mae).map(|s| s.mean).unwrap_or(f64::NAN);
        let (be, pp, pe) = (edge("baseline_edge"), edge("proposed_plain"), edge("proposed_edge"));
        a += (pe < pp) as usize;
        b += (pe < be) as usize;
        lines.push(format!("seed {seed}: baseline+edge {be:.4}, proposed {pp:.4}, proposed+edge {pe:.4}"));
    }
    let secs = t.elapsed().as_secs_f64();
    for l in &lines {
        println!("    {l}");
    }
    verdict(
        a >= 4 && b >= 4 && secs < 7200.0,
        format!(
            "test edge-region MAE: proposed+edge < proposed in {a}/{ABLATION_SEEDS}, < baseline+edge in {b}/{ABLATION_SEEDS} (need 4 each); {secs:.0} s < 7200 s"
        ),
    )
}

fn reproducibility(dir: &Path) -> Verdict {
    let data = dir.join("repro");
    let manifest = build_dataset(&DatasetPlan::desk(7, 2, (1, 1), 4, 32), &data).unwrap();
    let run = |name: &str| {
        let mut cfg = TrainConfig::with_seed(7);
        cfg.generator.base_width = 8;
        cfg.epochs = 3;
        cfg.batch_size = 2;
        let out = dir.join(name);
        Trainer::from_manifest(cfg, &manifest, &data).unwrap().run(Some(&out), &mut |_| {}).unwrap();
        (
            std::fs::read(out.join("final.ckpt")).unwrap(),
            std::fs::read(out.join("metrics.tsv")).unwrap(),
        )
    };
    let (c1, m1) = run("repro_a");
    let (c2, m2) = run("repro_b");
    let same = c1 == c2 && m1 == m2;
    verdict(
        same,
        format!(
            "checkpoints identical: {}, metric logs identical: {} (checkpoint sha256 {})",
            c1 == c2,
            m1 == m2,
            &mrxray_core::seeds::content_hash(&c1)[..16]
        ),
    )
}

fn round_trips(dir: &Path) -> Verdict {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let write_read_write = |path: &Path, first: &[u8], reread: &dyn Fn(&Path) -> Vec<u8>| {
        std::fs::write(path, first).unwrap();
        let second = reread(path);
        second == first
    };

    let vol = generate_phantom(&PhantomSpec {
        size: 16,
        spacing: 12.0,
        ..PhantomSpec::with_seed(2)
    })
    .unwrap();
    check(
        "volume",
        write_read_write(&dir.join("v.vol"), &volume_io::to_bytes(&vol), &|p| {
            volume_io::to_bytes(&volume_io::load(p).unwrap())
        }),
    );

    let data = dir.join("roundtrip");
    let manifest = build_dataset(&DatasetPlan::desk(2, 2, (1, 1), 2, 16), &data).unwrap();
    let img = Image::load(&data.join(&manifest.pairs[0].xray_path)).unwrap();
    check(
        "projection",
        write_read_write(&dir.join("p.img"), &img.to_bytes(), &|p| Image::load(p).unwrap().to_bytes()),
    );
    check(
        "manifest",
        write_read_write(&dir.join("m.txt"), manifest.to_text().as_bytes(), &|p| {
            Manifest::load(p).unwrap().to_text().into_bytes()
        }),
    );

    let mut cfg = TrainConfig::with_seed(2);
    cfg.generator.base_width = 4;
    cfg.max_steps = 2;
    cfg.objective = Objective::Pixel(PixelNorm::L1);
    let mut trainer = Trainer::from_manifest(cfg, &manifest, &data).unwrap();
    trainer.run(None, &mut |_| {}).unwrap();
    check(
        "checkpoint",
        write_read_write(&dir.join("c.ckpt"), &trainer.checkpoint().to_bytes(), &|p| {
            Checkpoint::load(p).unwrap().to_bytes()
        }),
    );

    let (lo, hi) = (img.min(), img.max());
    let pgm = img.to_pgm16(lo, hi);
    check(
        "pgm bytes",
        write_read_write(&dir.join("p.pgm"), &pgm.to_bytes(), &|p| Pgm16::load(p).unwrap().to_bytes()),
    );
    let back = Pgm16::load(&dir.join("p.pgm")).unwrap();
    let step = (hi - lo) / 65535.0;
    let within = back
        .pixels
        .iter()
        .zip(img.data())
        .all(|(&q, &v)| ((lo + q as f32 * step) - v).abs() <= 0.5 * step * 1.01 + 1e-6);
    check("pgm quantization", within);

    let t = Tensor::new(&[1, 1, 2, 2], vec![0.5f32, -1.0, 2.0, 0.0]).unwrap();
    check("tensor", {
        let mut buf = Vec::new();
        mrxray_core::tensor::io::write_tensor(&mut buf, &t).unwrap();
        let back = mrxray_core::tensor::io::read_tensor(&mut std::io::Cursor::new(&buf), Path::new("t")).unwrap();
        back == t
    });
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "volume, projection, manifest, checkpoint and PGM survive write-read-write; PGM within half a quantization step".into()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

fn main() {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.strip_prefix("--criterion=").and_then(|v| v.parse().ok()))
        .collect();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    type Criterion<'a> = (usize, &'a str, Box<dyn Fn() -> Verdict + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "gradient integrity", Box::new(gradient_integrity)),
        (2, "projector oracle", Box::new(projector_oracle)),
        (3, "loss semantics", Box::new(loss_semantics)),
        (4, "checkerboard property", Box::new(checkerboard)),
        (5, "overfit capacity", Box::new(|| overfit(dir))),
        (6, "ablation direction", Box::new(|| ablation(dir))),
        (7, "reproducibility", Box::new(|| reproducibility(dir))),
        (8, "format round-trips", Box::new(|| round_trips(dir))),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in &criteria {
        if !only.is_empty() && !only.contains(id) {
            continue;
        }
        let v = run();
        println!("{} criterion {id} ({name}): {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        if !v.passed {
            failed.push(*id);
        }
    }
    drop(criteria);
    drop(tmp);
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
