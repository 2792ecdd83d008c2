mod common;

use common::{gaussian_dataset, gaussian_spec, max_rel, ols_oracle, random_jacobian_case, unit_design};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sor::comparators::fit_naive;
use sor::data::ModelFrame;
use sor::family::FamilyKind;
use sor::sorfit::{fit_sor, FitOptions, WorkingCorrelation};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn jacobian_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng_ratio(&mut rng);
        let case = random_jacobian_case(&mut rng, r);
        let e = case.relative_error();
        prop_assert!(e < 1e-6, "relative error {e} ({:?}, h {:?})", case.kind, case.h);
    }

    #[test]
    fn jacobian_is_zero_without_enrichment(seed in any::<u64>()) {
        let case = random_jacobian_case(&mut ChaCha8Rng::seed_from_u64(seed), 1.0);
        prop_assert!(case.analytic().iter().all(|&v| v == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn score_is_the_loglik_gradient(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng_ratio(&mut rng);
        let case = random_jacobian_case(&mut rng, r);
        let e = case.score_error();
        prop_assert!(e < 1e-5, "relative error {e} ({:?})", case.kind);
    }
}

fn rng_ratio(rng: &mut impl rand::Rng) -> f64 {
    rng.random_range(0.1..20.0)
}

#[test]
fn unit_ratio_sor_is_standard_gee() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data = gaussian_dataset(&mut rng, 60);
    let frame = ModelFrame::build(&data, &gaussian_spec(), &unit_design()).unwrap();
    let opts = FitOptions::new(FamilyKind::Gaussian);
    let sor = fit_sor(&frame, &opts).unwrap();
    let naive = fit_naive(&frame, &opts).unwrap();
    let (beta, phi, cov) = ols_oracle(&frame);
    let b: Vec<f64> = beta.iter().copied().collect();
    assert!(max_rel(sor.beta.as_slice(), &b, 1e-8) < 1e-8);
    assert!(max_rel(naive.beta.as_slice(), &b, 1e-8) < 1e-8);
    assert!((sor.phi - phi).abs() / phi < 1e-8);
    assert!((naive.phi - phi).abs() / phi < 1e-8);
    let sc = sor.beta_covariance();
    assert!(max_rel(sc.as_slice(), cov.as_slice(), 1e-8) < 1e-8, "{sc} vs {cov}");
    assert!(max_rel(naive.covariance.as_slice(), cov.as_slice(), 1e-8) < 1e-8);
}

#[test]
fn unit_ratio_sor_matches_exchangeable_gee() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data = gaussian_dataset(&mut rng, 80);
    let frame = ModelFrame::build(&data, &gaussian_spec(), &unit_design()).unwrap();
    let mut opts = FitOptions::new(FamilyKind::Gaussian);
    opts.working = WorkingCorrelation::Exchangeable;
    opts.no_interference = true;
    let sor = fit_sor(&frame, &opts).unwrap();
    let naive = fit_naive(&frame, &opts).unwrap();
    assert!(max_rel(sor.beta.as_slice(), naive.beta.as_slice(), 1e-8) < 1e-8);
    assert!((sor.phi - naive.phi).abs() / naive.phi < 1e-8);
    assert!((sor.alpha.unwrap() - naive.alpha.unwrap()).abs() < 1e-8);
    assert!(max_rel(sor.beta_covariance().as_slice(), naive.covariance.as_slice(), 1e-8) < 1e-8);
}
