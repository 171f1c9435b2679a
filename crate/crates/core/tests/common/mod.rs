#![allow(dead_code)]

use mrxray_core::loss::{perceptual_loss, sobel_edge_map, FeatureExtractor, LossConfig};
use mrxray_core::projector::dataset::default_geometry;
use mrxray_core::projector::phantom::{generate_phantom, PhantomSpec};
use mrxray_core::projector::{project_pair, MarchOptions};
use mrxray_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// X-ray projection of a default-style phantom, min/max scaled to [-1, 1],
/// as a `[1,1,px,px]` tensor.
pub fn phantom_label(seed: u64, px: usize) -> Tensor<f64> {
    let spec = PhantomSpec {
        size: 32,
        spacing: 6.0,
        ..PhantomSpec::with_seed(seed)
    };
    let vol = generate_phantom(&spec).unwrap();
    let (_, xray) = project_pair(&vol, &default_geometry(px, 32, 6.0), MarchOptions::default()).unwrap();
    let (lo, hi) = (xray.min() as f64, xray.max() as f64);
    let data = xray.data().iter().map(|&v| 2.0 * (v as f64 - lo) / (hi - lo) - 1.0).collect();
    Tensor::new(&[1, 1, px, px], data).unwrap()
}

/// Losses of equal-energy perturbations placed on edge pixels and on
/// homogeneous pixels of `label`: `(edge, homogeneous)`.
pub fn edge_vs_flat_losses(label: &Tensor<f64>, fe: &FeatureExtractor, cfg: &LossConfig, seed: u64) -> (f64, f64) {
    let edges = sobel_edge_map(label).unwrap();
    let on_edge: Vec<usize> = (0..edges.numel()).filter(|&i| edges.data()[i] > 0.5).collect();
    let flat: Vec<usize> = (0..edges.numel()).filter(|&i| edges.data()[i] < 0.05).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 24.min(on_edge.len()).min(flat.len());
    assert!(k >= 8, "label has too few edge ({}) or flat ({}) pixels", on_edge.len(), flat.len());
    let amplitude = 0.2;
    let mut perturb = |pool: &[usize]| {
        let mut g = label.clone();
        for &i in pool.choose_multiple(&mut rng, k).collect::<Vec<_>>() {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            g.data_mut()[i] += sign * amplitude;
        }
        g
    };
    let g_edge = perturb(&on_edge);
    let g_flat = perturb(&flat);
    (
        perceptual_loss(label, &g_edge, fe, cfg).unwrap(),
        perceptual_loss(label, &g_flat, fe, cfg).unwrap(),
    )
}
