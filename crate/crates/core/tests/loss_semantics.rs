mod common;

use mrxray_core::loss::{
    edge_pyramid, perceptual_loss, perceptual_loss_on_tape, FeatureExtractor, LabelTargets, LossConfig, LossNorm,
};
use mrxray_core::seeds::content_hash;
use mrxray_core::tensor::gradcheck::{check, GradCheckConfig};
use mrxray_core::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[1, 1, h, w], (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn variants() -> Vec<LossConfig> {
    let mut out = Vec::new();
    for norm in [LossNorm::WeightedL1, LossNorm::WeightedL2, LossNorm::Signed] {
        for edge_weighting in [true, false] {
            out.push(LossConfig {
                norm,
                edge_weighting,
                ..LossConfig::default()
            });
        }
    }
    out
}

#[test]
fn identical_images_give_zero_loss() {
    let fe = FeatureExtractor::shipped();
    let l = common::phantom_label(3, 32);
    for cfg in variants() {
        assert_eq!(perceptual_loss(&l, &l, &fe, &cfg).unwrap(), 0.0, "{cfg:?}");
    }
}

#[test]
fn unsigned_losses_are_non_negative_and_floored() {
    let fe = FeatureExtractor::shipped();
    let flat = Tensor::full(&[1, 1, 16, 16], 0.3);
    for seed in 0..5 {
        let g = random_image(seed, 16, 16);
        for cfg in variants().into_iter().filter(|c| c.norm != LossNorm::Signed) {
            assert!(perceptual_loss(&random_image(seed + 100, 16, 16), &g, &fe, &cfg).unwrap() >= 0.0);
            // homogeneous label: every weight sits at the floor, yet the loss is positive
            assert!(perceptual_loss(&flat, &g, &fe, &cfg).unwrap() > 0.0);
        }
    }
}

#[test]
fn unweighted_equals_weighted_with_unit_edges() {
    let fe = FeatureExtractor::shipped();
    let l = common::phantom_label(4, 32);
    let g = random_image(9, 32, 32);
    for norm in [LossNorm::WeightedL1, LossNorm::WeightedL2] {
        let off = LossConfig {
            norm,
            edge_weighting: false,
            ..LossConfig::default()
        };
        let on = LossConfig {
            edge_weighting: true,
            ..off.clone()
        };
        let mut targets = LabelTargets::new(&l, &fe, &on).unwrap();
        let ones = Tensor::full(&[1, 1, 32, 32], 1.0);
        targets.weights = Some(edge_pyramid(&ones, &on).unwrap());
        let mut tape = Tape::new();
        let bound = fe.bind(&mut tape);
        let gv = tape.constant(g.clone());
        let weighted = perceptual_loss_on_tape(&mut tape, &fe, &bound, gv, &targets, &on).unwrap();
        let weighted = tape.value(weighted).data()[0];
        assert_eq!(weighted, perceptual_loss(&l, &g, &fe, &off).unwrap());
    }
}

#[test]
fn edge_perturbations_cost_more_than_flat_ones() {
    let fe = FeatureExtractor::shipped();
    let cfg = LossConfig::default();
    let label = common::phantom_label(11, 64);
    for seed in 0..10 {
        let (edge, flat) = common::edge_vs_flat_losses(&label, &fe, &cfg, seed);
        assert!(edge > flat, "seed {seed}: edge {edge} vs flat {flat}");
    }
}

#[test]
fn raising_an_edge_weight_never_lowers_the_loss() {
    let fe = FeatureExtractor::shipped();
    let cfg = LossConfig::default();
    let l = random_image(1, 16, 16);
    let g = random_image(2, 16, 16);
    let base = LabelTargets::new(&l, &fe, &cfg).unwrap();
    let eval = |t: &LabelTargets<f64>| {
        let mut tape = Tape::new();
        let bound = fe.bind(&mut tape);
        let gv = tape.constant(g.clone());
        let v = perceptual_loss_on_tape(&mut tape, &fe, &bound, gv, t, &cfg).unwrap();
        tape.value(v).data()[0]
    };
    let before = eval(&base);
    for (layer, idx) in [(0, 37), (1, 5), (2, 3), (3, 0)] {
        let mut raised = base.clone();
        let w = &mut raised.weights.as_mut().unwrap()[layer];
        w.data_mut()[idx] = (w.data()[idx] + 0.5).min(1.0);
        assert!(eval(&raised) >= before);
    }
}

#[test]
fn feature_gradients_match_finite_differences() {
    let fe = FeatureExtractor::shipped();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // hundreds of relu units per pixel: small step so none crosses its kink,
    // guard as absolute floor against rounding noise
    let cfg = GradCheckConfig {
        step: 1e-6,
        guard: 1e-3,
        ..Default::default()
    };
    for stage in 0..4 {
        let x = random_image(30 + stage as u64, 16, 16);
        let outcome = check(
            &[x],
            &[true],
            |tape: &mut Tape<f64>, v| {
                let bound = fe.bind(tape);
                let feats = fe.extract(tape, &bound, v[0], stage)?;
                tape.sum(feats[stage])
            },
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert!(outcome.max_rel_error < 1e-4, "stage {stage}: {outcome:?}");
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let fe = FeatureExtractor::shipped();
    let l = random_image(40, 16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for cfg in variants() {
        let targets = LabelTargets::new(&l, &fe, &cfg).unwrap();
        let g = random_image(41, 16, 16);
        let outcome = check(
            &[g],
            &[true],
            |tape: &mut Tape<f64>, v| {
                let bound = fe.bind(tape);
                perceptual_loss_on_tape(tape, &fe, &bound, v[0], &targets, &cfg)
            },
            &GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(outcome.max_rel_error < 1e-4, "{cfg:?}: {outcome:?}");
    }
}

#[test]
fn shape_mismatch_and_empty_layers_are_rejected() {
    let fe = FeatureExtractor::shipped();
    let a = random_image(1, 16, 16);
    let b = random_image(1, 8, 8);
    assert!(perceptual_loss(&a, &b, &fe, &LossConfig::default()).is_err());
    let empty = LossConfig {
        layers: vec![],
        layer_weights: vec![],
        ..LossConfig::default()
    };
    assert!(matches!(
        perceptual_loss(&a, &a, &fe, &empty),
        Err(mrxray_core::Error::Config(_))
    ));
}

/// 8x8 reference image paired with the shipped weights.
fn test_vector() -> Tensor<f64> {
    Tensor::new(
        &[1, 1, 8, 8],
        (0..64)
            .map(|i| {
                let (y, x) = ((i / 8) as f64, (i % 8) as f64);
                (0.7 * x).sin() * (0.45 * y).cos()
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn shipped_features_match_frozen_checksum() {
    let fe = FeatureExtractor::shipped();
    let feats = fe.features(&test_vector(), 3).unwrap();
    // quantized to 1e-6 so the anchor does not depend on summation order
    let mut bytes = Vec::new();
    for f in &feats {
        for &v in f.data() {
            bytes.extend_from_slice(&((v * 1e6).round() as i64).to_le_bytes());
        }
    }
    assert_eq!(content_hash(&bytes), "ace7e316d5bbcb4955343df73e616842fdd6dc4dec5305090c8a7921ce4fc373");
}
