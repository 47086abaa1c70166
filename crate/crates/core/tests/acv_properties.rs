mod common;

use common::*;
use mfeig::acv::{
    component_covariances, estimator_variance, estimator_variance_with_weights, evaluate_acv,
    optimal_weights, AllocationMatrix, SampleGroup,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn estimator_is_unbiased_for_any_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..5 {
        let m = rng.random_range(1..=3);
        let c = random_spd(&mut rng, m + 1);
        let mean = DVector::from_fn(m + 1, |i, _| 1.0 + i as f64);
        let ens = GaussianEnsemble::new(mean, &c);
        let a = random_allocation(&mut rng, m);
        let alpha: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let values: Vec<f64> = (0..1000)
            .map(|_| evaluate_acv(&ens.group_sums(&mut rng, &a), &alpha, &a).unwrap())
            .collect();
        let (mu, var) = mean_var(&values);
        let se = (var / values.len() as f64).sqrt();
        assert!(
            (mu - 1.0).abs() <= 4.0 * se,
            "case {case}: mean {mu} vs 1 (se {se})"
        );
    }
}

#[test]
fn variance_formula_matches_simulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..5 {
        let m = rng.random_range(1..=3);
        let c = random_spd(&mut rng, m + 1);
        let ens = GaussianEnsemble::new(DVector::zeros(m + 1), &c);
        let a = random_allocation(&mut rng, m);
        let est = estimate(&c);
        let comp = component_covariances(&est, &a).unwrap();
        let alpha = optimal_weights(&comp.cov_dd, &comp.cov_d0).unwrap();
        let predicted = estimator_variance(&est, &a).unwrap();
        let values: Vec<f64> = (0..10_000)
            .map(|_| evaluate_acv(&ens.group_sums(&mut rng, &a), alpha.as_slice(), &a).unwrap())
            .collect();
        let (_, var) = mean_var(&values);
        assert!(
            (var - predicted).abs() <= 0.1 * predicted,
            "case {case}: empirical {var} vs predicted {predicted}"
        );
    }
}

/// Q̂₀ and the differences Δₘ = Ûₘ(z*ₘ) − Ûₘ(zₘ), from unit weights.
fn components_of(ens: &GaussianEnsemble, rng: &mut ChaCha8Rng, a: &AllocationMatrix) -> Vec<f64> {
    let m = a.n_low();
    let sums = ens.group_sums(rng, a);
    let q0 = evaluate_acv(&sums, &vec![0.0; m], a).unwrap();
    let mut out = vec![q0];
    for k in 0..m {
        let mut alpha = vec![0.0; m];
        alpha[k] = 1.0;
        out.push(evaluate_acv(&sums, &alpha, a).unwrap() - q0);
    }
    out
}

#[test]
fn component_covariances_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let reps = 20_000;
    for case in 0..3 {
        let m = 2;
        let c = random_spd(&mut rng, m + 1);
        let ens = GaussianEnsemble::new(DVector::zeros(m + 1), &c);
        let a = random_allocation(&mut rng, m);
        let comp = component_covariances(&estimate(&c), &a).unwrap();
        // analytic covariance of (Q̂₀, Δ₁, …, Δ_M)
        let mut analytic = DMatrix::zeros(m + 1, m + 1);
        analytic[(0, 0)] = comp.var0;
        for i in 0..m {
            analytic[(0, i + 1)] = comp.cov_d0[i];
            analytic[(i + 1, 0)] = comp.cov_d0[i];
            for j in 0..m {
                analytic[(i + 1, j + 1)] = comp.cov_dd[(i, j)];
            }
        }
        let draws: Vec<Vec<f64>> = (0..reps).map(|_| components_of(&ens, &mut rng, &a)).collect();
        let means: Vec<f64> = (0..=m)
            .map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / reps as f64)
            .collect();
        for i in 0..=m {
            for j in 0..=m {
                let emp = draws
                    .iter()
                    .map(|d| (d[i] - means[i]) * (d[j] - means[j]))
                    .sum::<f64>()
                    / (reps - 1) as f64;
                // standard error of a Gaussian sample covariance
                let se = ((analytic[(i, i)] * analytic[(j, j)] + analytic[(i, j)].powi(2))
                    / reps as f64)
                    .sqrt();
                assert!(
                    (emp - analytic[(i, j)]).abs() <= 3.0 * se,
                    "case {case} entry ({i},{j}): {emp} vs {} (se {se})",
                    analytic[(i, j)]
                );
            }
        }
    }
}

#[test]
fn optimal_weights_solve_the_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for _ in 0..50 {
        let m = rng.random_range(1..=6);
        let s = random_spd(&mut rng, m);
        let c = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let alpha = optimal_weights(&s, &c).unwrap();
        let residual = (&s * &alpha + &c).norm() / c.norm();
        assert!(residual <= 1e-10, "residual {residual}");
    }
}

/// Appends an independent model that shares no covariance with the others.
fn with_independent_model(c: &DMatrix<f64>, var: f64) -> DMatrix<f64> {
    let n = c.nrows();
    let mut out = DMatrix::zeros(n + 1, n + 1);
    out.view_mut((0, 0), (n, n)).copy_from(c);
    out[(n, n)] = var;
    out
}

fn extend_allocation(a: &AllocationMatrix, zstar: &[bool], z: &[bool]) -> AllocationMatrix {
    let groups = a
        .groups()
        .iter()
        .enumerate()
        .map(|(g, group)| {
            let mut group: SampleGroup = group.clone();
            group.zstar.push(zstar[g]);
            group.z.push(z[g]);
            group
        })
        .collect();
    AllocationMatrix::new(groups).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn optimal_weights_minimize_variance(seed in any::<u64>(), m in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = estimate(&random_spd(&mut rng, m + 1));
        let a = random_allocation(&mut rng, m);
        let comp = component_covariances(&c, &a).unwrap();
        let alpha = optimal_weights(&comp.cov_dd, &comp.cov_d0).unwrap();
        let best = estimator_variance_with_weights(&c, &a, alpha.as_slice()).unwrap();
        prop_assert!((best - estimator_variance(&c, &a).unwrap()).abs() <= 1e-12 * best.abs().max(1e-300));
        for _ in 0..100 {
            let scale = 10f64.powf(rng.random_range(-4.0..0.0));
            let perturbed: Vec<f64> = alpha.iter().map(|x| x + scale * rng.random_range(-1.0..1.0)).collect();
            let v = estimator_variance_with_weights(&c, &a, &perturbed).unwrap();
            prop_assert!(v >= best - 1e-12 * best.abs(), "{v} < {best}");
        }
    }

    #[test]
    fn uncorrelated_extra_model_leaves_variance_unchanged(
        seed in any::<u64>(),
        m in 1usize..=3,
        var in 0.1f64..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_spd(&mut rng, m + 1);
        let a = random_allocation(&mut rng, m);
        let n = a.groups().len();
        // the new model needs nonempty z* and z sets, not necessarily disjoint
        let (zstar, z) = loop {
            let zstar: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let z: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            if zstar.iter().any(|b| *b) && z.iter().any(|b| *b) && zstar != z {
                break (zstar, z);
            }
        };
        let before = estimator_variance(&estimate(&c), &a).unwrap();
        let bigger = extend_allocation(&a, &zstar, &z);
        let after = estimator_variance(&estimate(&with_independent_model(&c, var)), &bigger).unwrap();
        prop_assert!((after - before).abs() <= 1e-10 * before, "{before} -> {after}");
    }

    #[test]
    fn monte_carlo_variance_is_c00_over_n(c00 in 0.01f64..100.0, n in 1usize..10_000) {
        let c = estimate(&DMatrix::from_element(1, 1, c00));
        let a = AllocationMatrix::monte_carlo(n).unwrap();
        let v = estimator_variance(&c, &a).unwrap();
        prop_assert!((v - c00 / n as f64).abs() <= 1e-14 * v);
    }

    #[test]
    fn covariance_subset_preserves_entries(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let full = random_spd(&mut rng, 4);
        let c = estimate(&full);
        let sub = c.subset(&[0, 2, 3]);
        let idx = [0, 2, 3];
        for (i, &a) in idx.iter().enumerate() {
            for (j, &b) in idx.iter().enumerate() {
                prop_assert_eq!(sub.matrix[i][j], full[(a, b)]);
            }
        }
    }
}
