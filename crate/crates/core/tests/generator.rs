use std::time::Instant;

use mrxray_core::netgen::{
    decoder_checkerboard_energy, generator_gradcheck, preset_baseline, preset_proposed, Generator, UpsampleMode,
};
use mrxray_core::tensor::Tensor;

#[test]
fn proposed_model_gradients_match_finite_differences() {
    let t = Instant::now();
    let report = generator_gradcheck(&preset_proposed(), 16, 17).unwrap();
    let o = &report.outcome;
    println!("whole model: max rel error {:.3e} over {} coords in {:?}", o.max_rel_error, o.coords_checked, t.elapsed());
    assert!(report.passed(), "{o:?}");
}

#[test]
fn full_size_forward_keeps_shape_and_range() {
    for cfg in [preset_proposed(), preset_baseline()] {
        let g = Generator::build(&cfg, 2).unwrap();
        let x = Tensor::new(&[1, 1, 64, 64], (0..4096).map(|i| ((i % 64) as f32 / 32.0) - 1.0).collect()).unwrap();
        let y = g.infer(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 64, 64]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn bilinear_decoder_is_smoother_than_transposed() {
    let transposed = |mut c: mrxray_core::netgen::GeneratorConfig| {
        c.upsample_mode = UpsampleMode::TransposedConv;
        c
    };
    for seed in 0..10 {
        let smooth = decoder_checkerboard_energy(&Generator::build(&preset_proposed(), seed).unwrap(), 64).unwrap();
        let rough = decoder_checkerboard_energy(&Generator::build(&transposed(preset_proposed()), seed).unwrap(), 64).unwrap();
        assert!(smooth < rough, "seed {seed}: {smooth} vs {rough}");
    }
}
