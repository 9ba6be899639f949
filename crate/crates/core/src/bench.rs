//! Timing harnesses: interaction-cost scaling, coefficient reuse across
//! population sizes, and the coupled vs primal-dual race.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::costs::{interaction_direct, interaction_features, KernelEvaluator};
use crate::error::{Error, Result};
use crate::feature_map::{FeatureMap, KernelSpec};
use crate::problem::{DualCoefficients, ProblemSpec, SolveHistory};
use crate::solvers::{coupled_solve, primal_dual_solve, solve_primal_only, CoupledOptions, PrimalDualOptions, StopRule};

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRecord {
    pub label: String,
    pub n: usize,
    pub repetitions: usize,
    /// Seconds per evaluation, minimum over repetitions.
    pub seconds: f64,
    pub workers: usize,
}

/// Least-squares slope of `ln(seconds)` against `ln(n)`.
pub fn loglog_slope(records: &[&TimingRecord]) -> Option<f64> {
    if records.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = records.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.seconds.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Clone, Debug)]
pub struct InteractionBench {
    pub records: Vec<TimingRecord>,
    pub direct_slope: Option<f64>,
    pub features_slope: Option<f64>,
}

impl InteractionBench {
    pub const DIRECT: &'static str = "direct";
    pub const FEATURES: &'static str = "features";

    /// One row per `N` with both timings side by side.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,direct_seconds,features_seconds,repetitions,workers\n");
        for d in self.records.iter().filter(|r| r.label == Self::DIRECT) {
            let f = self
                .records
                .iter()
                .find(|r| r.label == Self::FEATURES && r.n == d.n)
                .map_or(f64::NAN, |r| r.seconds);
            let _ = writeln!(out, "{},{:?},{:?},{},{}", d.n, d.seconds, f, d.repetitions, d.workers);
        }
        out
    }
}

/// Runs `f` until at least `min_time` has elapsed and returns seconds per call.
fn time_per_call<F: FnMut() -> Result<f64>>(mut f: F, min_time: Duration) -> Result<f64> {
    let mut calls = 0u32;
    let start = Instant::now();
    loop {
        black_box(f()?);
        calls += 1;
        let elapsed = start.elapsed();
        if elapsed >= min_time {
            return Ok(elapsed.as_secs_f64() / calls as f64);
        }
    }
}

/// Times the exact `O(N²)` double sum and the `O(N·r)` feature form on
/// uniform samples from `[−3, 3]³`.
pub fn bench_interaction(
    ns: &[usize],
    kernel: &KernelSpec,
    map: &FeatureMap,
    repetitions: usize,
    seed: u64,
) -> Result<InteractionBench> {
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::Argument("Ns must be non-empty and every N >= 1".into()));
    }
    if repetitions < 1 {
        return Err(Error::Argument("repetitions must be >= 1".into()));
    }
    let workers = rayon::current_num_threads();
    let min_time = Duration::from_millis(20);
    let mut records = Vec::new();
    for &n in ns {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        let positions: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut direct = f64::INFINITY;
        let mut feats = f64::INFINITY;
        for _ in 0..repetitions {
            direct = direct.min(time_per_call(
                || interaction_direct(&positions, KernelEvaluator::Exact(kernel)),
                min_time,
            )?);
            feats = feats.min(time_per_call(|| interaction_features(&positions, map), min_time)?);
        }
        records.push(TimingRecord {
            label: InteractionBench::DIRECT.into(),
            n,
            repetitions,
            seconds: direct,
            workers,
        });
        records.push(TimingRecord {
            label: InteractionBench::FEATURES.into(),
            n,
            repetitions,
            seconds: feats,
            workers,
        });
    }
    let slope = |label: &str| loglog_slope(&records.iter().filter(|r| r.label == label).collect::<Vec<_>>());
    Ok(InteractionBench {
        direct_slope: slope(InteractionBench::DIRECT),
        features_slope: slope(InteractionBench::FEATURES),
        records,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReuseReport {
    pub source_n: usize,
    pub eval_n: usize,
    /// `‖z_src − z_ref‖_F / ‖z_ref‖_F` over the whole `N × n × d` array.
    pub rel_traj_diff: f64,
    /// `‖a_src − a_ref‖_F / ‖a_ref‖_F`, nodes stacked.
    pub rel_coeff_diff: f64,
    /// The saddle-point solve that produced `a_src` met its stopping rule.
    pub source_converged: bool,
    /// Every agent of the primal-only re-solve met its inner tolerance.
    pub primal_converged: bool,
}

pub fn reuse_csv(reports: &[ReuseReport]) -> String {
    let mut out = String::from("source_N,eval_N,rel_traj_diff,rel_coeff_diff,source_converged,primal_converged\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{},{}",
            r.source_n, r.eval_n, r.rel_traj_diff, r.rel_coeff_diff, r.source_converged, r.primal_converged
        );
    }
    out
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Fits `a*` at each source size, then re-solves only the primal problems
/// for one fixed set of `eval_n` initial states. The last report is the
/// reference itself (`source_n = eval_n`).
pub fn reuse_study(
    spec: &ProblemSpec,
    source_ns: &[usize],
    eval_n: usize,
    opts: &PrimalDualOptions,
) -> Result<Vec<ReuseReport>> {
    reuse_study_with(spec, source_ns, eval_n, opts, |_| {})
}

pub fn reuse_study_with<P: FnMut(&ReuseReport)>(
    spec: &ProblemSpec,
    source_ns: &[usize],
    eval_n: usize,
    opts: &PrimalDualOptions,
    mut progress: P,
) -> Result<Vec<ReuseReport>> {
    let eval_spec = spec.with_agents(eval_n, spec.init.seed)?;
    let reference = primal_dual_solve(&eval_spec, opts)?;
    let resolve = |a: &DualCoefficients| solve_primal_only(&eval_spec, a, &opts.inner, opts.seed, opts.init_std);
    let z_ref = resolve(&reference.a)?;
    let mut reports = Vec::new();
    for (i, &n) in source_ns.iter().enumerate() {
        let source_spec = spec.with_agents(n, spec.init.seed.wrapping_add(1 + i as u64))?;
        let source = primal_dual_solve(&source_spec, opts)?;
        let z = resolve(&source.a)?;
        let report = ReuseReport {
            source_n: n,
            eval_n,
            rel_traj_diff: rel_diff(&z.rollout.states, &z_ref.rollout.states),
            rel_coeff_diff: rel_diff(&source.a.values, &reference.a.values),
            source_converged: source.converged,
            primal_converged: z.converged,
        };
        progress(&report);
        reports.push(report);
    }
    let own = resolve(&reference.a)?;
    let report = ReuseReport {
        source_n: eval_n,
        eval_n,
        rel_traj_diff: rel_diff(&own.rollout.states, &z_ref.rollout.states),
        rel_coeff_diff: 0.0,
        source_converged: reference.converged,
        primal_converged: own.converged,
    };
    progress(&report);
    reports.push(report);
    Ok(reports)
}

#[derive(Clone, Debug)]
pub struct RaceEntry {
    pub solver: String,
    /// Fastest run's seconds to reach the threshold.
    pub time_to_threshold: Option<f64>,
    pub final_jr_grad_norm: f64,
    pub final_jr_value: f64,
    pub history: SolveHistory,
    pub runs: usize,
}

#[derive(Clone, Debug)]
pub struct RaceReport {
    pub threshold: f64,
    pub workers: usize,
    pub entries: Vec<RaceEntry>,
}

impl RaceReport {
    pub const PRIMAL_DUAL: &'static str = "primal_dual";
    pub const COUPLED: &'static str = "coupled";
    pub const COUPLED_EXACT: &'static str = "coupled_exact";

    pub fn entry(&self, solver: &str) -> Option<&RaceEntry> {
        self.entries.iter().find(|e| e.solver == solver)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("solver,time_to_threshold_s,reached,final_Jr_grad_norm,final_Jr_value,runs,workers\n");
        for e in &self.entries {
            let t = e.time_to_threshold.unwrap_or(f64::NAN);
            let _ = writeln!(
                out,
                "{},{:?},{},{:?},{:?},{},{}",
                e.solver,
                t,
                e.time_to_threshold.is_some(),
                e.final_jr_grad_norm,
                e.final_jr_value,
                e.runs,
                self.workers
            );
        }
        out
    }

    /// `Some(true)` when primal-dual reached the threshold no later than the
    /// feature-based coupled solver; `None` if either never reached it.
    pub fn primal_dual_faster(&self) -> Option<bool> {
        let pd = self.entry(Self::PRIMAL_DUAL)?.time_to_threshold?;
        let co = self.entry(Self::COUPLED)?.time_to_threshold?;
        Some(pd <= co)
    }
}

fn fastest(runs: Vec<(Option<f64>, f64, f64, SolveHistory)>, solver: &str) -> RaceEntry {
    let count = runs.len();
    let best = runs
        .into_iter()
        .min_by(|a, b| {
            let ta = a.0.unwrap_or(f64::INFINITY);
            let tb = b.0.unwrap_or(f64::INFINITY);
            ta.total_cmp(&tb)
        })
        .expect("at least one run");
    RaceEntry {
        solver: solver.into(),
        time_to_threshold: best.0,
        final_jr_grad_norm: best.1,
        final_jr_value: best.2,
        history: best.3,
        runs: count,
    }
}

/// Runs both solvers `runs` times from the same seed until the `J_r`
/// gradient norm drops to `threshold`, keeping each solver's fastest run.
pub fn solver_race(
    spec: &ProblemSpec,
    pd: &PrimalDualOptions,
    coupled: &CoupledOptions,
    threshold: f64,
    runs: usize,
    include_exact: bool,
) -> Result<RaceReport> {
    if runs < 1 || !(threshold > 0.0) {
        return Err(Error::Argument("race needs runs >= 1 and threshold > 0".into()));
    }
    let pd_opts = PrimalDualOptions {
        eps_tol: threshold,
        stop_rule: StopRule::JrOnly,
        ..pd.clone()
    };
    let mut pd_runs = Vec::new();
    for _ in 0..runs {
        let res = primal_dual_solve(spec, &pd_opts)?;
        let last = res.history.last().cloned();
        pd_runs.push((
            res.time_to_threshold,
            last.as_ref().map_or(f64::NAN, |r| r.jr_grad_norm),
            last.as_ref().map_or(f64::NAN, |r| r.jr_value),
            res.history,
        ));
    }
    let mut entries = vec![fastest(pd_runs, RaceReport::PRIMAL_DUAL)];
    let mut variants = vec![(false, RaceReport::COUPLED)];
    if include_exact {
        variants.push((true, RaceReport::COUPLED_EXACT));
    }
    for (exact, label) in variants {
        let mut opts = coupled.clone();
        opts.exact_kernel = exact;
        opts.optimizer.grad_tol = threshold;
        let mut co_runs = Vec::new();
        for _ in 0..runs {
            let res = coupled_solve(spec, &opts)?;
            co_runs.push((res.time_to_threshold, res.grad_norm, res.value, res.history));
        }
        entries.push(fastest(co_runs, label));
    }
    Ok(RaceReport {
        threshold,
        workers: rayon::current_num_threads(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let recs: Vec<TimingRecord> = [10usize, 20, 40]
            .iter()
            .map(|&n| TimingRecord {
                label: "x".into(),
                n,
                repetitions: 3,
                seconds: 1e-6 * (n * n) as f64,
                workers: 1,
            })
            .collect();
        let slope = loglog_slope(&recs.iter().collect::<Vec<_>>()).unwrap();
        assert!((slope - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&recs[..1].iter().collect::<Vec<_>>()).is_none());
    }

    #[test]
    fn single_agent_bench_is_valid() {
        let kernel = KernelSpec::gaussian(1.0).unwrap();
        let map = crate::feature_map::rff_features(&kernel, 10, 0).unwrap();
        let b = bench_interaction(&[1], &kernel, &map, 3, 0).unwrap();
        assert_eq!(b.records.len(), 2);
        assert!(b.records.iter().all(|r| r.seconds > 0.0 && r.n == 1));
        assert!(b.direct_slope.is_none());
        assert_eq!(b.to_csv().lines().count(), 2);
    }

    #[test]
    fn bench_rejects_empty_sizes() {
        let kernel = KernelSpec::gaussian(1.0).unwrap();
        let map = crate::feature_map::rff_features(&kernel, 10, 0).unwrap();
        assert!(bench_interaction(&[], &kernel, &map, 3, 0).is_err());
        assert!(bench_interaction(&[0], &kernel, &map, 3, 0).is_err());
    }
}
