use std::f64::consts::TAU;
use std::time::Instant;

use mrxray_core::projector::dataset::{build_dataset, default_geometry, angular_sweep, DatasetPlan, Manifest, Split};
use mrxray_core::projector::phantom::{generate_phantom, PhantomSpec};
use mrxray_core::projector::{forward_project, project_pair, Channel, Ellipsoid, MarchOptions, ProjectionGeometry, Volume};

const MU: f64 = 0.02;

fn sphere(radius: f64) -> Volume {
    let mut v = Volume::centered([48, 48, 48], [1.0; 3]).unwrap();
    v.paint(&Ellipsoid::sphere([0.0; 3], radius), MU, MU, 8);
    v
}

fn quarter_step() -> MarchOptions {
    MarchOptions::with_step(0.25)
}

#[test]
fn sphere_chords_match_analytic_lengths() {
    let t = Instant::now();
    let r = 15.0;
    let vol = sphere(r);
    // one detector row through the center; 1 mm columns, col 20 on the axis
    let geom = ProjectionGeometry::parallel(41, 1, 1.0, 1.0, 0.0);
    let img = forward_project(&vol, Channel::Attenuation, &geom, quarter_step()).unwrap();
    let center = img.get(0, 20) as f64;
    let expected = 2.0 * r * MU;
    assert!((center - expected).abs() / expected < 0.01, "center chord {center} vs {expected}");
    for d in [5.0, 9.0, 12.0] {
        let got = img.get(0, 20 + d as usize) as f64;
        let want = 2.0 * MU * (r * r - d * d).sqrt();
        assert!((got - want).abs() / want < 0.015, "offset {d}: {got} vs {want}");
    }
    assert!(t.elapsed().as_secs() < 60);
}

#[test]
fn sphere_chords_are_rotation_invariant() {
    let vol = sphere(12.0);
    let geom = ProjectionGeometry::parallel(1, 1, 1.0, 1.0, 0.0);
    for a in [0.3, 1.1, 2.5, 4.0] {
        let img = forward_project(&vol, Channel::Mr, &ProjectionGeometry { angle: a, ..geom }, quarter_step()).unwrap();
        let want = 2.0 * 12.0 * MU;
        assert!((img.data()[0] as f64 - want).abs() / want < 0.01);
    }
}

#[test]
fn parallel_projection_conserves_mass() {
    let t = Instant::now();
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
    let opts = MarchOptions::with_step(0.5);
    for ch in [Channel::Mr, Channel::Attenuation] {
        let img = forward_project(&vol, ch, &geom, opts).unwrap();
        let proj: f64 = img.data().iter().map(|&v| v as f64).sum::<f64>() * 1.0 * 1.0;
        let mass: f64 = vol.channel(ch).iter().map(|&v| v as f64).sum::<f64>() * vol.voxel_volume();
        assert!((proj - mass).abs() / mass < 0.02, "{ch:?}: {proj} vs {mass}");
    }
    assert!(t.elapsed().as_secs() < 60);
}

fn small_phantom(seed: u64) -> PhantomSpec {
    PhantomSpec {
        size: 24,
        spacing: 8.0,
        ..PhantomSpec::with_seed(seed)
    }
}

#[test]
fn pair_shares_rays() {
    let vol = generate_phantom(&small_phantom(3)).unwrap();
    let geom = ProjectionGeometry {
        du: 8.0,
        dv: 8.0,
        ..default_geometry(32, 24, 8.0)
    };
    let (mr, xray) = project_pair(&vol, &geom, MarchOptions::default()).unwrap();
    let zeros = |d: &[f32]| d.iter().map(|&v| v == 0.0).collect::<Vec<_>>();
    let mask = zeros(mr.data());
    assert!(mask.iter().any(|&z| z), "footprint should leave empty detector pixels");
    assert_eq!(mask, zeros(xray.data()));
}

#[test]
fn full_turn_reproduces_projection() {
    let vol = generate_phantom(&small_phantom(4)).unwrap();
    let geom = ProjectionGeometry {
        angle: 0.7,
        ..default_geometry(16, 24, 8.0)
    };
    let turned = ProjectionGeometry {
        angle: 0.7 + TAU,
        ..geom
    };
    let a = forward_project(&vol, Channel::Attenuation, &geom, MarchOptions::default()).unwrap();
    let b = forward_project(&vol, Channel::Attenuation, &turned, MarchOptions::default()).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "{x} vs {y}");
    }
    let c = forward_project(&vol, Channel::Attenuation, &geom, MarchOptions::default()).unwrap();
    assert_eq!(a, c);
}

fn plan(phantoms: usize, split: (usize, usize), angles: usize) -> DatasetPlan {
    DatasetPlan {
        phantoms: (0..phantoms).map(|k| PhantomSpec { size: 12, spacing: 16.0, supersample: 1, ..PhantomSpec::with_seed(k as u64) }).collect(),
        geometries: angular_sweep(default_geometry(8, 12, 16.0), angles, std::f64::consts::PI),
        split,
        march: MarchOptions::default(),
        noise_sigma: 0.0,
        noise_seed: 0,
    }
}

#[test]
fn three_to_one_split_by_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&plan(4, (3, 1), 2), dir.path()).unwrap();
    assert_eq!(m.phantoms(Split::Train).len(), 3);
    assert_eq!(m.phantoms(Split::Test).len(), 1);
    assert!(m.phantoms(Split::Train).is_disjoint(&m.phantoms(Split::Test)));
    let back = Manifest::load(&dir.path().join("manifest.txt")).unwrap();
    assert_eq!(back, m);
}

#[test]
fn one_to_one_split_counts_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&plan(2, (1, 1), 8), dir.path()).unwrap();
    let train: Vec<_> = m.pairs_in(Split::Train).collect();
    assert_eq!(train.len(), 8);
    assert!(train.iter().all(|p| p.phantom == train[0].phantom));
    assert_eq!(m.pairs_in(Split::Test).count(), 8);
}

#[test]
fn dataset_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = build_dataset(&plan(2, (1, 1), 2), a.path()).unwrap();
    let mb = build_dataset(&plan(2, (1, 1), 2), b.path()).unwrap();
    assert_eq!(ma.hash(), mb.hash());
    for p in &ma.pairs {
        let fa = std::fs::read(a.path().join(&p.xray_path)).unwrap();
        let fb = std::fs::read(b.path().join(&p.xray_path)).unwrap();
        assert_eq!(fa, fb);
    }
}

#[test]
fn bone_shell_shows_in_xray_but_not_mr() {
    let spec = PhantomSpec::with_seed(0);
    let vol = generate_phantom(&spec).unwrap();
    let geom = default_geometry(64, spec.size, spec.spacing);
    let (mr, xray) = project_pair(&vol, &geom, MarchOptions::default()).unwrap();
    // the shell's own contribution to each channel
    let (mu, mrv) = (vol.channel(Channel::Attenuation), vol.channel(Channel::Mr));
    let in_shell: Vec<bool> = mu
        .iter()
        .zip(mrv)
        .map(|(&a, &m)| a as f64 > 0.9 * spec.bone.mu && (m as f64) < 2.0 * spec.bone.mr)
        .collect();
    let keep = |ch: &[f32]| -> Vec<f32> { ch.iter().zip(&in_shell).map(|(&v, &s)| if s { v } else { 0.0 }).collect() };
    let shell = Volume::from_channels(vol.dims(), vol.spacing(), vol.origin(), keep(mrv), keep(mu)).unwrap();
    let (shell_mr, shell_xray) = project_pair(&shell, &geom, MarchOptions::default()).unwrap();
    let region: Vec<bool> = {
        let m = shell_xray.max();
        shell_xray.data().iter().map(|&v| v >= 0.25 * m).collect()
    };
    let energy = |part: &mrxray_core::image::Image, whole: &mrxray_core::image::Image| {
        let scaled = part.map(|v| v / whole.max()).to_tensor::<f64>();
        let edges = mrxray_core::loss::sobel_magnitude(&scaled).unwrap();
        edges.data().iter().zip(&region).filter(|(_, &r)| r).map(|(e, _)| e * e).sum::<f64>()
    };
    let (ex, em) = (energy(&shell_xray, &xray), energy(&shell_mr, &mr));
    assert!(ex > 5.0 * em, "shell edge energy xray {ex} vs mr {em}");
}
