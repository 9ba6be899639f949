//! Unconstrained smooth minimization: limited-memory BFGS with a
//! strong-Wolfe line search, and gradient descent with backtracking.

use std::collections::VecDeque;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lbfgs,
    GradientDescent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerOptions {
    pub method: Method,
    pub max_iters: usize,
    /// Number of stored curvature pairs.
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_line_search: usize,
    /// Initial trial step for gradient descent.
    pub step_size: f64,
    pub grad_tol: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            method: Method::Lbfgs,
            max_iters: 250,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
            step_size: 1e-3,
            grad_tol: 1e-6,
        }
    }
}

impl OptimizerOptions {
    pub fn lbfgs(max_iters: usize, grad_tol: f64) -> Self {
        OptimizerOptions {
            max_iters,
            grad_tol,
            ..Self::default()
        }
    }

    pub fn gradient_descent(max_iters: usize, grad_tol: f64) -> Self {
        OptimizerOptions {
            method: Method::GradientDescent,
            max_iters,
            grad_tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Argument(format!(
                "line search needs 0 < c1 < c2 < 1, got c1={}, c2={}",
                self.c1, self.c2
            )));
        }
        if self.memory == 0 || self.max_line_search == 0 {
            return Err(Error::Argument("memory and max_line_search must be positive".into()));
        }
        if !(self.step_size > 0.0) || self.grad_tol.is_nan() {
            return Err(Error::Argument("step_size must be > 0 and grad_tol a number".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// Line searches that ended on the safeguarded fallback step.
    pub line_search_failures: usize,
    pub converged: bool,
    /// No decrease could be found along the search direction.
    pub stalled: bool,
}

/// Snapshot handed to the per-iteration callback.
#[derive(Clone, Copy, Debug)]
pub struct IterationInfo {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub evaluations: usize,
}

struct Objective<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> Result<f64>> Objective<F> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> Result<f64> {
        self.evaluations += 1;
        (self.f)(x, g)
    }
}

pub fn minimize<F>(f: F, x0: Vec<f64>, opts: &OptimizerOptions) -> Result<MinimizeResult>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    minimize_with(f, x0, opts, |_| ControlFlow::Continue(()))
}

/// Runs the phases in order, each warm-started from the previous result.
pub fn minimize_phased<F>(mut f: F, x0: Vec<f64>, phases: &[OptimizerOptions]) -> Result<MinimizeResult>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let (first, rest) = phases
        .split_first()
        .ok_or_else(|| Error::Argument("at least one optimizer phase is required".into()))?;
    let mut result = minimize(&mut f, x0, first)?;
    for opts in rest {
        if result.converged {
            break;
        }
        let prev = result;
        result = minimize(&mut f, prev.x, opts)?;
        result.iterations += prev.iterations;
        result.evaluations += prev.evaluations;
        result.line_search_failures += prev.line_search_failures;
    }
    Ok(result)
}

/// `callback` sees every accepted iterate (including the start) and may stop
/// the run early by returning `Break`.
pub fn minimize_with<F, C>(f: F, x0: Vec<f64>, opts: &OptimizerOptions, mut callback: C) -> Result<MinimizeResult>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
    C: FnMut(&IterationInfo) -> ControlFlow<()>,
{
    opts.validate()?;
    let mut obj = Objective { f, evaluations: 0 };
    let dim = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; dim];
    let mut value = obj.eval(&x, &mut g)?;
    if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("objective is not finite at the starting point".into()));
    }
    let mut gnorm = norm(&g);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut direction = vec![0.0; dim];
    let mut gd_step = opts.step_size;
    let mut failures = 0;
    let mut stalled = false;
    let mut iterations = 0;

    let mut info = IterationInfo {
        iteration: 0,
        value,
        grad_norm: gnorm,
        evaluations: obj.evaluations,
    };
    let mut stop = callback(&info).is_break();

    while !stop && gnorm > opts.grad_tol && iterations < opts.max_iters {
        let mut x_new = vec![0.0; dim];
        let mut g_new = vec![0.0; dim];
        let accepted = match opts.method {
            Method::Lbfgs => {
                two_loop(&g, &history, &mut direction);
                let mut slope = dot(&g, &direction);
                if !(slope < 0.0) {
                    history.clear();
                    direction.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
                    slope = -gnorm * gnorm;
                }
                let initial = if history.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
                let ls = strong_wolfe(&mut obj, &x, value, slope, &direction, initial, opts, &mut x_new, &mut g_new)?;
                match ls {
                    LineSearch::Wolfe(v) => Some(v),
                    LineSearch::Fallback(v) => {
                        failures += 1;
                        history.clear();
                        Some(v)
                    }
                    LineSearch::NoDecrease => None,
                }
            }
            Method::GradientDescent => {
                direction.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
                let found = backtrack(
                    &mut obj,
                    &x,
                    value,
                    -gnorm * gnorm,
                    &direction,
                    gd_step,
                    opts.c1,
                    60,
                    &mut x_new,
                    &mut g_new,
                )?;
                found.map(|(v, step)| {
                    gd_step = 2.0 * step;
                    v
                })
            }
        };
        let Some(new_value) = accepted else {
            stalled = true;
            break;
        };
        if opts.method == Method::Lbfgs {
            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
                if history.len() == opts.memory {
                    history.pop_front();
                }
                history.push_back((s, y, 1.0 / sy));
            }
        }
        x = x_new;
        g = g_new;
        value = new_value;
        gnorm = norm(&g);
        iterations += 1;
        info = IterationInfo {
            iteration: iterations,
            value,
            grad_norm: gnorm,
            evaluations: obj.evaluations,
        };
        stop = callback(&info).is_break();
    }

    Ok(MinimizeResult {
        converged: gnorm <= opts.grad_tol,
        x,
        value,
        grad: g,
        grad_norm: gnorm,
        iterations,
        evaluations: obj.evaluations,
        line_search_failures: failures,
        stalled,
    })
}

/// `direction = −H g` from the stored pairs (oldest first).
fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, direction: &mut [f64]) {
    direction.copy_from_slice(g);
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let alpha = rho * dot(s, direction);
        axpy(-alpha, y, direction);
        alphas.push(alpha);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        direction.iter_mut().for_each(|d| *d *= gamma);
    }
    for ((s, y, rho), alpha) in history.iter().zip(alphas.iter().rev()) {
        let beta = rho * dot(y, direction);
        axpy(alpha - beta, s, direction);
    }
    direction.iter_mut().for_each(|d| *d = -*d);
}

enum LineSearch {
    Wolfe(f64),
    /// Sufficient decrease without the curvature condition.
    Fallback(f64),
    NoDecrease,
}

struct Trial {
    alpha: f64,
    value: f64,
    slope: f64,
}

#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F: FnMut(&[f64], &mut [f64]) -> Result<f64>>(
    obj: &mut Objective<F>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    dir: &[f64],
    initial: f64,
    opts: &OptimizerOptions,
    x_out: &mut [f64],
    g_out: &mut [f64],
) -> Result<LineSearch> {
    let mut x_trial = vec![0.0; x.len()];
    let mut g_trial = vec![0.0; x.len()];
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut evals = 0;

    let mut eval = |alpha: f64, xt: &mut Vec<f64>, gt: &mut Vec<f64>, evals: &mut usize| -> Result<Trial> {
        for ((t, xi), di) in xt.iter_mut().zip(x).zip(dir) {
            *t = xi + alpha * di;
        }
        *evals += 1;
        let value = match obj.eval(xt, gt) {
            Ok(v) => v,
            // a diverging rollout means the step was too long
            Err(Error::RolloutDiverged { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let slope = if value.is_finite() { dot(gt, dir) } else { f64::NAN };
        Ok(Trial { alpha, value, slope })
    };

    let armijo = |t: &Trial| t.value.is_finite() && t.value <= f0 + opts.c1 * t.alpha * slope0;
    let curvature = |t: &Trial| t.slope.abs() <= -opts.c2 * slope0;

    let remember = |t: &Trial, xt: &[f64], gt: &[f64], best: &mut Option<(f64, Vec<f64>, Vec<f64>)>| {
        if armijo(t) && best.as_ref().is_none_or(|b| t.value < b.0) {
            *best = Some((t.value, xt.to_vec(), gt.to_vec()));
        }
    };

    let mut prev = Trial {
        alpha: 0.0,
        value: f0,
        slope: slope0,
    };
    let mut alpha = initial;
    let mut bracket: Option<(Trial, Trial)> = None;
    let mut first = true;
    while evals < opts.max_line_search {
        let t = eval(alpha, &mut x_trial, &mut g_trial, &mut evals)?;
        remember(&t, &x_trial, &g_trial, &mut best);
        if !t.value.is_finite() {
            bracket = Some((prev, t));
            break;
        }
        if !armijo(&t) || (!first && t.value >= prev.value) {
            bracket = Some((prev, t));
            break;
        }
        if curvature(&t) {
            x_out.copy_from_slice(&x_trial);
            g_out.copy_from_slice(&g_trial);
            return Ok(LineSearch::Wolfe(t.value));
        }
        if t.slope >= 0.0 {
            bracket = Some((t, prev));
            break;
        }
        first = false;
        prev = t;
        alpha *= 2.0;
    }

    if let Some((mut lo, mut hi)) = bracket {
        while evals < opts.max_line_search {
            let alpha = interpolate(&lo, &hi);
            let t = eval(alpha, &mut x_trial, &mut g_trial, &mut evals)?;
            remember(&t, &x_trial, &g_trial, &mut best);
            if !armijo(&t) || t.value >= lo.value {
                hi = t;
            } else {
                if curvature(&t) {
                    x_out.copy_from_slice(&x_trial);
                    g_out.copy_from_slice(&g_trial);
                    return Ok(LineSearch::Wolfe(t.value));
                }
                if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
            if (hi.alpha - lo.alpha).abs() <= 1e-16 * lo.alpha.abs().max(1e-300) {
                break;
            }
        }
    }

    if let Some((v, xb, gb)) = best {
        if v < f0 {
            x_out.copy_from_slice(&xb);
            g_out.copy_from_slice(&gb);
            return Ok(LineSearch::Fallback(v));
        }
    }
    // safeguarded short steps
    let mut alpha = initial.min(1.0) * 1e-3;
    for _ in 0..30 {
        let t = eval(alpha, &mut x_trial, &mut g_trial, &mut evals)?;
        if t.value.is_finite() && t.value < f0 {
            x_out.copy_from_slice(&x_trial);
            g_out.copy_from_slice(&g_trial);
            return Ok(LineSearch::Fallback(t.value));
        }
        alpha *= 0.25;
    }
    Ok(LineSearch::NoDecrease)
}

/// Minimizer of the cubic through both trial points, kept inside the
/// middle 80% of the bracket; bisection otherwise.
fn interpolate(lo: &Trial, hi: &Trial) -> f64 {
    let (a0, a1) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a0 + a1);
    if !(hi.value.is_finite() && hi.slope.is_finite()) {
        return mid;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (a0 - a1);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (a1 - a0).signum() * disc.sqrt();
    let candidate = a1 - (a1 - a0) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    let (left, right) = if a0 < a1 { (a0, a1) } else { (a1, a0) };
    let margin = 0.1 * (right - left);
    if candidate.is_finite() && candidate > left + margin && candidate < right - margin {
        candidate
    } else {
        mid
    }
}

/// Armijo backtracking; returns `(value, accepted step)`.
#[allow(clippy::too_many_arguments)]
fn backtrack<F: FnMut(&[f64], &mut [f64]) -> Result<f64>>(
    obj: &mut Objective<F>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    dir: &[f64],
    initial: f64,
    c1: f64,
    max_halvings: usize,
    x_out: &mut [f64],
    g_out: &mut [f64],
) -> Result<Option<(f64, f64)>> {
    let mut step = initial;
    for _ in 0..max_halvings {
        for ((t, xi), di) in x_out.iter_mut().zip(x).zip(dir) {
            *t = xi + step * di;
        }
        let value = match obj.eval(x_out, g_out) {
            Ok(v) => v,
            Err(Error::RolloutDiverged { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        if value.is_finite() && value <= f0 + c1 * step * slope0 && value <= f0 {
            return Ok(Some((value, step)));
        }
        step *= 0.5;
    }
    Ok(None)
}
