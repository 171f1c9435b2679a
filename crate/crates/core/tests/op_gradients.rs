use mrxray_core::tensor::gradcheck::{run_op_suite, GradCheckConfig, OP_SUITES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_central_differences() {
    let cfg = GradCheckConfig::default();
    for (i, name) in OP_SUITES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let report = run_op_suite(name, 20, &cfg, &mut rng).unwrap();
        assert!(
            report.passed(),
            "{name}: max rel err {:.3e} at {:?}",
            report.outcome.max_rel_error,
            report.outcome.worst
        );
        assert!(report.outcome.coords_checked >= 20, "{name}");
    }
}
