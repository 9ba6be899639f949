mod common;

use approx::assert_relative_eq;
use common::*;
use kernel_mfc::costs::{interaction_direct, interaction_features, KernelEvaluator};
use kernel_mfc::feature_map::{fit_mlp_features, gaussian_kernel, rff_features, FeatureMap, KernelSpec, MlpTrainingConfig};
use kernel_mfc::linalg::SpdMatrix;
use kernel_mfc::objective::{full_lagrangian, per_agent_objective};
use kernel_mfc::optim::{minimize_with, OptimizerOptions};
use kernel_mfc::persistence::sample_initial_conditions;
use kernel_mfc::problem::InitialDistribution;
use kernel_mfc::solvers::dual_update_with_means;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use std::ops::ControlFlow;

fn untrained_mlp(alpha1: f64, rank: usize, seed: u64) -> FeatureMap {
    let cfg = MlpTrainingConfig {
        hidden: 12,
        rank,
        num_samples: 8,
        iterations: 0,
        validation_pairs: 4,
        ..MlpTrainingConfig::desk()
    };
    fit_mlp_features(&KernelSpec::gaussian(alpha1).unwrap(), &cfg, seed).unwrap().0
}

fn any_map(mlp: bool, alpha1: f64, rank: usize, seed: u64, kr: Option<SpdMatrix>) -> FeatureMap {
    let map = if mlp {
        untrained_mlp(alpha1, rank, seed)
    } else {
        rff_features(&KernelSpec::gaussian(alpha1).unwrap(), rank, seed).unwrap()
    };
    match kr {
        Some(k) => map.with_kr(k).unwrap(),
        None => map,
    }
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, 3)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn exact_kernel_is_symmetric_and_peaks_on_the_diagonal(x in point(), y in point(), alpha1 in 0.1..1e5f64) {
        let spec = KernelSpec::gaussian(alpha1).unwrap();
        let kxy = gaussian_kernel(&x, &y, &spec).unwrap();
        prop_assert_eq!(kxy, gaussian_kernel(&y, &x, &spec).unwrap());
        prop_assert!(kxy <= gaussian_kernel(&x, &x, &spec).unwrap());
    }

    #[test]
    fn expanded_kernel_is_symmetric(x in point(), y in point(), mlp: bool, seed in 0u64..1000, dense: bool) {
        let kr = dense.then(|| random_spd(8, &mut rng(seed), 0.1));
        let map = any_map(mlp, 3.0, 8, seed, kr);
        let a = map.expanded_kernel(&x, &y).unwrap();
        let b = map.expanded_kernel(&y, &x).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300));
    }

    #[test]
    fn expanded_gram_is_positive_semidefinite(n in 2usize..25, mlp: bool, seed in 0u64..1000) {
        let mut r = rng(seed);
        let map = any_map(mlp, 2.0, 10, seed, Some(random_spd(10, &mut r, 0.0)));
        let pts = uniform_points(n, &mut r);
        let gram = DMatrix::from_fn(n, n, |i, j| {
            map.expanded_kernel(&pts[3 * i..3 * i + 3], &pts[3 * j..3 * j + 3]).unwrap()
        });
        let eig = SymmetricEigen::new(gram).eigenvalues;
        let max = eig.max();
        prop_assert!(eig.min() >= -1e-8 * max.abs().max(1e-300));
    }

    #[test]
    fn feature_jacobian_matches_finite_differences(x in point(), mlp: bool, seed in 0u64..1000) {
        let map = any_map(mlp, 4.0, 6, seed, None);
        let jac = map.jacobian(&x).unwrap();
        let step = 1e-5;
        let mut fd = vec![0.0; jac.len()];
        for j in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let fp = map.evaluate(&xp).unwrap();
            let fm = map.evaluate(&xm).unwrap();
            for i in 0..6 {
                fd[i * 3 + j] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
        let scale = jac.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(scale > 1e-3);
        prop_assert!(rel_vec(&fd, &jac) <= 1e-5, "{}", rel_vec(&fd, &jac));
    }

    #[test]
    fn feature_interaction_equals_the_expanded_double_sum(n in 1usize..60, mlp: bool, seed in 0u64..1000, dense: bool) {
        let mut r = rng(seed);
        let kr = dense.then(|| random_spd(12, &mut r, 0.1));
        let map = any_map(mlp, 5.0, 12, seed, kr);
        let pts = uniform_points(n, &mut r);
        let fast = interaction_features(&pts, &map).unwrap();
        let slow = interaction_direct(&pts, KernelEvaluator::Expanded(&map)).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-10 * slow.abs());
    }

    #[test]
    fn interaction_is_permutation_invariant(n in 2usize..30, seed in 0u64..1000) {
        let mut r = rng(seed);
        let map = any_map(false, 1.0, 8, seed, None);
        let pts = uniform_points(n, &mut r);
        let mut rev: Vec<f64> = pts.chunks(3).rev().flatten().copied().collect();
        let a = interaction_features(&pts, &map).unwrap();
        let b = interaction_features(&rev, &map).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
        rev.truncate(3);
        prop_assert!(interaction_features(&rev, &map).unwrap() >= 0.0);
    }

    #[test]
    fn dual_update_solves_the_proximal_system(seed in 0u64..1000, h_a in 0.0..5.0f64, dense: bool) {
        let mut r = rng(seed);
        let mut cfg = di_config(1, 3, 1.0, 0.0);
        cfg.features.rank = 5;
        if dense {
            cfg.features.kr = random_spd(5, &mut r, 0.2);
        }
        let spec = spec_of(&cfg);
        let a = random_duals(&spec, &mut r, 2.0);
        let c: Vec<f64> = (0..a.values.len()).map(|_| normal(&mut r)).collect();
        let next = dual_update_with_means(&a, &c, &spec.map, h_a).unwrap();
        // (K + h_a I) a' = K (a + h_a c)
        let k = dense_or_identity(&spec.map, 5);
        for node in 0..3 {
            let rhs: Vec<f64> = (0..5).map(|i| a.node(node)[i] + h_a * c[node * 5 + i]).collect();
            let rhs = mat_vec(&k, &rhs);
            let shifted: Vec<Vec<f64>> = (0..5)
                .map(|i| (0..5).map(|j| k[i][j] + if i == j { h_a } else { 0.0 }).collect())
                .collect();
            let want = conjugate_gradient(|x| mat_vec(&shifted, x), &rhs, 1e-15);
            prop_assert!(rel_vec(next.node(node), &want) < 1e-9);
        }
    }

    #[test]
    fn lagrangian_separates_over_agents(seed in 0u64..1000, agents in 1usize..5) {
        let mut r = rng(seed);
        let mut cfg = di_config(agents, 5, 3.0, 10.0);
        cfg.seed = seed;
        let spec = spec_of(&cfg);
        let a = random_duals(&spec, &mut r, 1.0);
        let theta = random_controls(&spec, &mut r, 1.0);
        let full = full_lagrangian(&a, &theta, &spec).unwrap();
        let mean = (0..agents)
            .map(|l| per_agent_objective(&a, theta.agent(l), spec.initial_state(l), &spec).unwrap())
            .sum::<f64>() / agents as f64;
        prop_assert!((full - mean).abs() <= 1e-12 * mean.abs().max(1.0));
    }

    #[test]
    fn initial_conditions_are_seeded(seed in 0u64..u64::MAX, n in 1usize..50) {
        let init = InitialDistribution::double_integrator(seed);
        let a = sample_initial_conditions(&init, n, seed).unwrap();
        let b = sample_initial_conditions(&init, n, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), 6 * n);
        prop_assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn optimizers_never_increase_the_objective(seed in 0u64..1000, gd: bool) {
        let mut r = rng(seed);
        let dim = 6;
        let shift: Vec<f64> = (0..dim).map(|_| normal(&mut r)).collect();
        let scales: Vec<f64> = (0..dim).map(|i| 1.0 + 10.0 * i as f64).collect();
        let f = |x: &[f64], g: &mut [f64]| -> kernel_mfc::Result<f64> {
            let mut v = 0.0;
            for i in 0..dim {
                let d = x[i] - shift[i];
                v += scales[i] * (d * d + 0.1 * d.powi(4));
                g[i] = scales[i] * (2.0 * d + 0.4 * d.powi(3));
            }
            Ok(v)
        };
        let x0: Vec<f64> = (0..dim).map(|_| 3.0 * normal(&mut r)).collect();
        let opts = if gd { OptimizerOptions::gradient_descent(200, 1e-10) } else { OptimizerOptions::lbfgs(100, 1e-10) };
        let mut values = Vec::new();
        minimize_with(f, x0, &opts, |info| {
            values.push(info.value);
            ControlFlow::Continue(())
        }).unwrap();
        prop_assert!(values.windows(2).all(|w| w[1] <= w[0]));
    }
}

fn dense_or_identity(map: &FeatureMap, r: usize) -> Vec<Vec<f64>> {
    if map.kr().is_identity() {
        (0..r).map(|i| (0..r).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
    } else {
        dense(map.kr())
    }
}
