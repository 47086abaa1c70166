use mfeig::models::{ForwardModel, ModelKind, NoiseForm};
use mfeig::prob::{Marginal, NoiseSpec, PriorSpec, RngStream};
use mfeig::utility::{
    analytic_eig_linear_gaussian, eval_utility_grid, nmc_estimator, OuterDraws, Problem,
    UtilityModelSpec,
};
use proptest::prelude::*;

fn linear_gaussian(sigma: f64) -> Problem {
    Problem::new(
        PriorSpec::Independent(vec![Marginal::Normal {
            mean: 0.0,
            std_dev: 1.0,
        }]),
        NoiseSpec::gaussian(vec![sigma]),
    )
    .unwrap()
}

fn linear_spec(id: usize, scale: f64, n_in: usize, reuse: bool) -> UtilityModelSpec {
    let model = ForwardModel::new(id, 1.0, ModelKind::Linear { scale }).unwrap();
    UtilityModelSpec::new(model, NoiseForm::Additive, n_in, reuse).unwrap()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn utility_is_nonnegative_in_expectation() {
    let problem = linear_gaussian(0.5);
    for (k, xi) in [0.1, 0.5, 1.0].into_iter().enumerate() {
        let spec = linear_spec(0, 1.0, 200, false);
        let (_, values) = nmc_estimator(&spec, &problem, &[xi], 10_000, &RngStream::new(k as u64)).unwrap();
        let (mean, se) = mean_se(&values);
        assert!(mean >= -3.0 * se, "xi = {xi}: mean {mean}, se {se}");
    }
}

#[test]
fn nmc_bias_is_positive_and_shrinks_with_inner_size() {
    let problem = linear_gaussian(0.5);
    let xi = 1.0;
    let exact = analytic_eig_linear_gaussian(1.0, xi, 0.5);
    let rng = RngStream::new(77);
    let mut previous = f64::INFINITY;
    for n_in in [10, 100, 1000] {
        // a prefix of the same inner draws at every size
        let (mean, values) = nmc_estimator(&linear_spec(0, 1.0, n_in, false), &problem, &[xi], 10_000, &rng).unwrap();
        let (_, se) = mean_se(&values);
        assert!(mean >= exact - 3.0 * se, "N_in = {n_in}: {mean} below {exact}");
        assert!(mean <= previous, "N_in = {n_in}: {mean} > {previous}");
        previous = mean;
    }
}

#[test]
fn reuse_makes_identical_models_agree() {
    let problem = linear_gaussian(0.3);
    let designs = vec![vec![0.5], vec![1.5]];
    let rng = RngStream::new(4);
    let outer = OuterDraws::draw(&problem, &rng, 50).unwrap();
    let eval = |spec: &UtilityModelSpec| {
        eval_utility_grid(spec, &problem, &designs, &outer, 0..50, &spec.inner_stream(&rng), &[spec.n_in]).unwrap()
    };
    // same forward model under two ids: shared inner draws give equal values
    let a = eval(&linear_spec(0, 1.0, 64, true));
    let b = eval(&linear_spec(1, 1.0, 64, true));
    assert_eq!(a, b);
    let c = eval(&linear_spec(0, 1.0, 64, false));
    let d = eval(&linear_spec(1, 1.0, 64, false));
    assert_ne!(c, d);
}

#[test]
fn enlarging_the_outer_loop_keeps_earlier_samples() {
    let problem = linear_gaussian(0.3);
    let spec = linear_spec(0, 1.0, 32, false);
    let rng = RngStream::new(8);
    let (_, small) = nmc_estimator(&spec, &problem, &[1.0], 20, &rng).unwrap();
    let (_, large) = nmc_estimator(&spec, &problem, &[1.0], 60, &rng).unwrap();
    assert_eq!(small[..], large[..20]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn additive_utility_ignores_constant_shift(
        shift in -5.0f64..5.0,
        xi in 0.0f64..1.0,
        seed in any::<u64>(),
        fidelity in 0usize..3,
    ) {
        let problem = Problem::new(PriorSpec::uniform(&[(0.0, 1.0)]), NoiseSpec::gaussian(vec![0.05])).unwrap();
        let base = ForwardModel::case1(fidelity);
        let rng = RngStream::new(seed);
        let outer = OuterDraws::draw(&problem, &rng, 20).unwrap();
        let eval = |model: ForwardModel| {
            let spec = UtilityModelSpec::new(model, NoiseForm::Additive, 300, false).unwrap();
            eval_utility_grid(&spec, &problem, &[vec![xi]], &outer, 0..20, &spec.inner_stream(&rng), &[300]).unwrap()
        };
        let u = eval(base.clone());
        let v = eval(base.with_offset(shift));
        for (a, b) in u[0].iter().zip(v[0].iter()) {
            // rounding of g + c changes the residuals by about ulp(c) / σ²
            let tol = 64.0 * f64::EPSILON * (1.0 + shift.abs()) / (0.05 * 0.05) * (1.0 + a.abs());
            prop_assert!((a - b).abs() <= tol, "{a} vs {b}");
        }
    }

    #[test]
    fn tiny_noise_keeps_utilities_finite(
        log_sigma in -6.0f64..-2.0,
        xi in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let sigma = 10f64.powf(log_sigma);
        let problem = Problem::new(PriorSpec::uniform(&[(0.0, 1.0)]), NoiseSpec::gaussian(vec![sigma])).unwrap();
        let spec = UtilityModelSpec::new(ForwardModel::case1(0), NoiseForm::Additive, 100_000, false).unwrap();
        let rng = RngStream::new(seed);
        let outer = OuterDraws::draw(&problem, &rng, 3).unwrap();
        let u = eval_utility_grid(&spec, &problem, &[vec![xi]], &outer, 0..3, &spec.inner_stream(&rng), &[100_000]).unwrap();
        prop_assert!(u[0].iter().all(|v| v.is_finite()));
    }
}
