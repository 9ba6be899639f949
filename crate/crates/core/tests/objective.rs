mod common;

use common::*;
use kernel_mfc::costs::obstacle_q;
use kernel_mfc::dynamics::{euler_rollout, AdjointWorkspace};
use kernel_mfc::objective::{
    dual_residual_max, full_lagrangian, lagrangian_gradient, mean_features_along, objective_jr, objective_jr_gradient,
    per_agent_objective, phi_value_grad, stopping_check,
};
use kernel_mfc::problem::{ControlSchedule, DualCoefficients, ProblemSpec};

/// Straight-line Euler rollout of one double-integrator agent.
fn di_rollout(z0: &[f64], theta: &[f64], h: f64, nodes: usize) -> Vec<[f64; 6]> {
    let mut z: [f64; 6] = z0.try_into().unwrap();
    let mut out = vec![z];
    for k in 0..nodes - 1 {
        let u = &theta[3 * k..3 * k + 3];
        let next = [
            z[0] + h * z[3],
            z[1] + h * z[4],
            z[2] + h * z[5],
            z[3] + h * u[0],
            z[4] + h * u[1],
            z[5] + h * u[2],
        ];
        z = next;
        out.push(z);
    }
    out
}

/// Term-by-term per-agent Lagrangian for the double integrator.
fn oracle_per_agent(a: &DualCoefficients, theta: &[f64], z0: &[f64], spec: &ProblemSpec) -> f64 {
    let h = spec.grid.step();
    let n = spec.grid.nodes;
    let traj = di_rollout(z0, theta, h, n);
    let kr = dense(spec.map.kr());
    let mut dual = 0.0;
    let mut running = 0.0;
    let mut coupling = 0.0;
    for k in 0..n {
        let ak = a.node(k);
        let kinv_a = conjugate_gradient(|x| mat_vec(&kr, x), ak, 1e-14);
        dual += ak.iter().zip(&kinv_a).map(|(x, y)| x * y).sum::<f64>();
        let u = &theta[3 * k..3 * k + 3];
        running += u.iter().map(|v| v * v).sum::<f64>() + spec.costs.alpha2 * obstacle_q(&traj[k][..3], &spec.costs.obstacles);
        let zeta = spec.map.evaluate(&traj[k][..3]).unwrap();
        coupling += ak.iter().zip(&zeta).map(|(x, y)| x * y).sum::<f64>();
    }
    let last = traj[n - 1];
    let terminal: f64 = 0.5 * spec.costs.alpha3 * last.iter().zip(&spec.costs.target).map(|(x, t)| (x - t) * (x - t)).sum::<f64>();
    0.5 * h * dual - h * running - h * coupling - terminal
}

fn agent_controls(theta: &ControlSchedule, l: usize) -> Vec<f64> {
    theta.agent(l).to_vec()
}

#[test]
fn per_agent_objective_vanishes_at_rest_on_target() {
    let cfg = di_config(1, 8, 3.0, 0.0);
    let spec = spec_of(&cfg);
    let a = DualCoefficients::zeros(&spec);
    let theta = vec![0.0; spec.grid.nodes * 3];
    let v = per_agent_objective(&a, &theta, &spec.costs.target, &spec).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn per_agent_objective_with_zero_duals_is_negated_control_cost() {
    let cfg = di_config(1, 9, 3.0, 50.0);
    let spec = spec_of(&cfg);
    let mut r = rng(1);
    let a = DualCoefficients::zeros(&spec);
    let theta = random_controls(&spec, &mut r, 1.0);
    let z0 = spec.initial_state(0).to_vec();
    let h = spec.grid.step();
    let traj = di_rollout(&z0, theta.agent(0), h, spec.grid.nodes);
    let mut cost = 0.0;
    for (k, z) in traj.iter().enumerate() {
        let u = &theta.agent(0)[3 * k..3 * k + 3];
        cost += h * (u.iter().map(|v| v * v).sum::<f64>() + spec.costs.alpha2 * obstacle_q(&z[..3], &spec.costs.obstacles));
    }
    let last = traj.last().unwrap();
    cost += 0.5 * spec.costs.alpha3 * last.iter().zip(&spec.costs.target).map(|(x, t)| (x - t) * (x - t)).sum::<f64>();
    let v = per_agent_objective(&a, theta.agent(0), &z0, &spec).unwrap();
    assert!(rel(v, -cost) < 1e-12, "{v} vs {}", -cost);
}

#[test]
fn per_agent_objective_matches_term_by_term_sum() {
    let mut r = rng(2);
    for (i, kr_dense) in [false, true, false, true].into_iter().enumerate() {
        let mut cfg = di_config(1, 5, 2.0, 30.0);
        cfg.seed = i as u64;
        if kr_dense {
            cfg.features.kr = random_spd(cfg.features.rank, &mut r, 0.5);
        }
        let spec = spec_of(&cfg);
        let a = random_duals(&spec, &mut r, 1.0);
        let theta = random_controls(&spec, &mut r, 1.0);
        let z0 = spec.initial_state(0).to_vec();
        let got = per_agent_objective(&a, theta.agent(0), &z0, &spec).unwrap();
        let want = oracle_per_agent(&a, theta.agent(0), &z0, &spec);
        assert!(rel(got, want) < 1e-10, "instance {i}: {got} vs {want}");
    }
}

#[test]
fn full_lagrangian_is_the_mean_of_per_agent_values() {
    let mut r = rng(3);
    for agents in [1, 2, 5] {
        let mut cfg = di_config(agents, 7, 4.0, 20.0);
        cfg.features.kr = random_spd(cfg.features.rank, &mut r, 1.0);
        let spec = spec_of(&cfg);
        let a = random_duals(&spec, &mut r, 1.0);
        let theta = random_controls(&spec, &mut r, 1.0);
        let full = full_lagrangian(&a, &theta, &spec).unwrap();
        let per: Vec<f64> = (0..agents)
            .map(|l| per_agent_objective(&a, theta.agent(l), spec.initial_state(l), &spec).unwrap())
            .collect();
        let mean = per.iter().sum::<f64>() / agents as f64;
        assert!(rel(full, mean) < 1e-12, "N={agents}: {full} vs {mean}");
        let oracle: f64 = (0..agents)
            .map(|l| oracle_per_agent(&a, &agent_controls(&theta, l), spec.initial_state(l), &spec))
            .sum::<f64>()
            / agents as f64;
        assert!(rel(full, oracle) < 1e-10);
    }
}

#[test]
fn identical_agents_give_the_single_agent_lagrangian() {
    let mut r = rng(4);
    let spec1 = spec_of(&di_config(1, 6, 2.0, 0.0));
    let z0 = spec1.initial_state(0).to_vec();
    let spec3 = spec1.with_initial_states([z0.clone(), z0.clone(), z0.clone()].concat()).unwrap();
    let a = random_duals(&spec1, &mut r, 1.0);
    let one = random_controls(&spec1, &mut r, 1.0);
    let three = ControlSchedule::from_values(one.values.repeat(3), 3, one.nodes, one.control_dim).unwrap();
    let l1 = full_lagrangian(&a, &one, &spec1).unwrap();
    let l3 = full_lagrangian(&a, &three, &spec3).unwrap();
    assert!(rel(l3, l1) < 1e-14);
}

#[test]
fn saddle_value_at_optimal_duals_is_minus_jr() {
    let mut r = rng(5);
    for trial in 0..6 {
        let mut cfg = if trial % 2 == 0 {
            di_config(4, 8, 5.0, 40.0)
        } else {
            quad_config(3, 8, 5.0)
        };
        cfg.seed = trial;
        cfg.features.kr = random_spd(cfg.features.rank, &mut r, 0.3);
        let spec = spec_of(&cfg);
        let theta = random_controls(&spec, &mut r, 0.5);
        let rollout = euler_rollout(&spec.model, spec.initial_states(), &theta, &spec.grid).unwrap();
        let c = mean_features_along(&rollout, &spec.map);
        let kc: Vec<f64> = c.chunks(spec.rank()).flat_map(|ck| {
            let mut out = vec![0.0; ck.len()];
            spec.map.kr().apply(ck, &mut out);
            out
        }).collect();
        let a_star = DualCoefficients::from_values(&spec, kc).unwrap();
        let lag = full_lagrangian(&a_star, &theta, &spec).unwrap();
        let jr = objective_jr(&theta, &spec).unwrap();
        assert!(rel(-lag, jr) < 1e-10, "trial {trial}: {lag} vs {jr}");
        // the primal step maximizes over θ, so a* is the minimizer in a
        let mut other = a_star.clone();
        other.values.iter_mut().for_each(|v| *v += 0.01);
        assert!(full_lagrangian(&other, &theta, &spec).unwrap() > lag);
    }
}

#[test]
fn jr_of_a_resting_agent_is_its_self_interaction() {
    let cfg = di_config(1, 10, 7.0, 0.0);
    let spec = spec_of(&cfg);
    let spec = spec.with_initial_states(spec.costs.target.clone()).unwrap();
    let theta = spec.empty_controls();
    let jr = objective_jr(&theta, &spec).unwrap();
    let zeta = spec.map.evaluate(&spec.costs.target[..3]).unwrap();
    let self_term = 0.5 * zeta.iter().map(|v| v * v).sum::<f64>();
    let want = spec.grid.step() * spec.grid.nodes as f64 * self_term;
    assert!(rel(jr, want) < 1e-12, "{jr} vs {want}");
}

#[test]
fn jr_is_affine_in_the_terminal_weight() {
    let mut r = rng(6);
    let mut cfg = di_config(3, 7, 2.0, 10.0);
    let spec = spec_of(&cfg);
    let theta = random_controls(&spec, &mut r, 1.0);
    let mut at = |alpha3: f64| {
        cfg.costs.alpha3 = alpha3;
        objective_jr(&theta, &spec_of(&cfg)).unwrap()
    };
    let (j0, j1, j2) = (at(0.0), at(5.0), at(10.0));
    assert!(((j2 - j0) - 2.0 * (j1 - j0)).abs() < 1e-10 * j2.abs());
}

#[test]
fn jr_gradient_is_the_scaled_per_agent_gradient_at_optimal_duals() {
    let mut r = rng(7);
    for cfg in [di_config(3, 8, 4.0, 30.0), quad_config(3, 8, 4.0)] {
        let spec = spec_of(&cfg);
        let theta = random_controls(&spec, &mut r, 0.5);
        let (_, g) = objective_jr_gradient(&theta, &spec).unwrap();
        let rollout = euler_rollout(&spec.model, spec.initial_states(), &theta, &spec.grid).unwrap();
        let c = mean_features_along(&rollout, &spec.map);
        let a_star = DualCoefficients::from_values(&spec, c).unwrap();
        let lg = lagrangian_gradient(&a_star, &theta, &spec).unwrap();
        // ∇_θ L = −(1/N) ∇Φ and ∇J_r = (1/N) ∇Φ at a = K_r c
        let neg: Vec<f64> = lg.iter().map(|v| -v).collect();
        assert!(rel_vec(&g, &neg) < 1e-10);
    }
}

#[test]
fn weak_coupling_decouples_the_jr_gradient() {
    let mut r = rng(8);
    let spec = spec_of(&di_config(3, 6, 1e-12, 25.0));
    let theta = random_controls(&spec, &mut r, 1.0);
    let (_, g) = objective_jr_gradient(&theta, &spec).unwrap();
    let zero = DualCoefficients::zeros(&spec);
    let per = theta.per_agent();
    for l in 0..3 {
        let mut gl = vec![0.0; per];
        phi_value_grad(&spec, &zero, l, theta.agent(l), &mut gl, &mut AdjointWorkspace::new()).unwrap();
        let scaled: Vec<f64> = gl.iter().map(|v| v / 3.0).collect();
        assert!(rel_vec(&g[l * per..(l + 1) * per], &scaled) < 1e-9);
    }
}

#[test]
fn mirrored_agents_have_mirrored_gradients() {
    // the pillars and target are symmetric under y -> -y
    let spec = spec_of(&di_config(2, 8, 1e-12, 25.0));
    let mut r = rng(9);
    let mut z0 = spec.initial_states().to_vec();
    for i in 0..6 {
        let sign = if i == 1 || i == 4 { -1.0 } else { 1.0 };
        z0[6 + i] = sign * z0[i];
    }
    let spec = spec.with_initial_states(z0).unwrap();
    let mut theta = random_controls(&spec, &mut r, 1.0);
    let per = theta.per_agent();
    for j in 0..per {
        let sign = if j % 3 == 1 { -1.0 } else { 1.0 };
        theta.values[per + j] = sign * theta.values[j];
    }
    let (_, g) = objective_jr_gradient(&theta, &spec).unwrap();
    let mirrored: Vec<f64> = (0..per).map(|j| if j % 3 == 1 { -g[j] } else { g[j] }).collect();
    assert!(rel_vec(&g[per..], &mirrored) < 1e-9);
}

#[test]
fn stopping_check_edge_cases() {
    let mut r = rng(10);
    let spec = spec_of(&di_config(4, 6, 3.0, 0.0));
    let theta = random_controls(&spec, &mut r, 1.0);
    let rollout = euler_rollout(&spec.model, spec.initial_states(), &theta, &spec.grid).unwrap();
    let c = mean_features_along(&rollout, &spec.map);
    let a = DualCoefficients::from_values(&spec, c.clone()).unwrap();
    let s = stopping_check(&theta, &a, &spec, 1e-12).unwrap();
    assert_eq!(s.dual_residual_max, 0.0);
    assert!(s.dual_ok);

    let b = random_duals(&spec, &mut r, 1.0);
    let s = stopping_check(&theta, &b, &spec, f64::INFINITY).unwrap();
    assert!(s.all());
    let want = (0..spec.grid.nodes)
        .map(|k| {
            let r_ = spec.rank();
            rel_vec(b.node(k), &c[k * r_..(k + 1) * r_]) * c[k * r_..(k + 1) * r_].iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);
    assert!(rel(dual_residual_max(&b, &rollout, &spec.map), want) < 1e-12);
}
