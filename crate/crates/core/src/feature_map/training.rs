//! Fitting a one-hidden-layer feature network to the unit Gaussian kernel.
//!
//! Loss per pair `(x, y)`:
//! `(ζ̃(x)ᵀζ̃(y) − k)² + λ‖∇ₓ[ζ̃(x)ᵀζ̃(y)] − ∇ₓk‖²` with `k = exp(−‖x−y‖²/2b²)`,
//! minimized with Adam on mini-batches and a step decay schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FeatureKind, FeatureMap, KernelSpec, Network};
use crate::error::{Error, Result};
use crate::linalg::{dot, sq_dist};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpTrainingConfig {
    pub hidden: usize,
    pub rank: usize,
    /// Number of training pairs.
    pub num_samples: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub grad_penalty: f64,
    pub validation_pairs: usize,
    pub domain: (f64, f64),
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for MlpTrainingConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MlpTrainingConfig {
    /// Full training budget; slow on a laptop.
    pub fn full() -> Self {
        MlpTrainingConfig {
            num_samples: 100_000,
            iterations: 50_000,
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        MlpTrainingConfig {
            hidden: 100,
            rank: 50,
            num_samples: 10_000,
            iterations: 3_000,
            batch_size: 256,
            step_size: 1e-3,
            decay_factor: 0.1,
            decay_every: 10_000,
            grad_penalty: 0.1,
            validation_pairs: 5_000,
            domain: (-3.0, 3.0),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("rank", self.rank),
            ("num_samples", self.num_samples),
            ("batch_size", self.batch_size),
            ("decay_every", self.decay_every),
            ("validation_pairs", self.validation_pairs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Argument(format!("{name} must be positive")));
            }
        }
        if !(self.step_size > 0.0) || !(self.decay_factor > 0.0) || !(self.grad_penalty >= 0.0) {
            return Err(Error::Argument(
                "step_size and decay_factor must be > 0, grad_penalty >= 0".into(),
            ));
        }
        if !(self.domain.0 < self.domain.1) {
            return Err(Error::Argument("empty training domain".into()));
        }
        Ok(())
    }

    fn learning_rate(&self, iteration: usize) -> f64 {
        self.step_size * self.decay_factor.powi((iteration / self.decay_every) as i32)
    }
}

/// Outcome of a fit; errors are in unit-kernel (`α₁ = 1`) terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub validation_mse: f64,
    pub gradient_mse: f64,
    pub final_train_loss: f64,
    pub num_train_samples: usize,
    pub num_iterations: usize,
    pub seed: u64,
    pub hidden: usize,
    pub rank: usize,
    pub batch_size: usize,
    pub grad_penalty: f64,
    pub activation: String,
}

struct Layout {
    dim: usize,
    hidden: usize,
    rank: usize,
}

impl Layout {
    fn len(&self) -> usize {
        self.hidden * (self.dim + 1 + self.rank) + self.rank
    }
    fn b1(&self) -> usize {
        self.hidden * self.dim
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + self.rank * self.hidden
    }
}

fn init_params(layout: &Layout, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut p = vec![0.0; layout.len()];
    let s1 = (1.0 / layout.dim as f64).sqrt();
    let s2 = (1.0 / layout.hidden as f64).sqrt();
    for v in &mut p[..layout.b1()] {
        *v = s1 * rng.sample::<f64, _>(StandardNormal);
    }
    for v in &mut p[layout.b1()..layout.w2()] {
        *v = rng.random_range(-1.0..1.0);
    }
    for v in &mut p[layout.w2()..layout.b2()] {
        *v = 0.5 * s2 * rng.sample::<f64, _>(StandardNormal);
    }
    p
}

struct Scratch {
    sx: Vec<f64>,
    sy: Vec<f64>,
    fx: Vec<f64>,
    fy: Vec<f64>,
    v: Vec<f64>,
    dux: Vec<f64>,
    duy: Vec<f64>,
    dfx: Vec<f64>,
    dfy: Vec<f64>,
    dv: Vec<f64>,
    g: Vec<f64>,
}

impl Scratch {
    fn new(layout: &Layout) -> Self {
        let h = vec![0.0; layout.hidden];
        let r = vec![0.0; layout.rank];
        Scratch {
            sx: h.clone(),
            sy: h.clone(),
            fx: r.clone(),
            fy: r.clone(),
            v: h.clone(),
            dux: h.clone(),
            duy: h.clone(),
            dfx: r.clone(),
            dfy: r,
            dv: h,
            g: vec![0.0; layout.dim],
        }
    }
}

/// Adds `weight · ∂loss/∂params` for one pair into `grad`; returns the
/// `(squared error, gradient mismatch)` terms.
fn pair_loss_grad(
    params: &[f64],
    layout: &Layout,
    bandwidth: f64,
    penalty: f64,
    x: &[f64],
    y: &[f64],
    weight: f64,
    grad: Option<&mut [f64]>,
    sc: &mut Scratch,
) -> (f64, f64) {
    let (dim, hid, rank) = (layout.dim, layout.hidden, layout.rank);
    let net = Network::from_slice(params, dim, hid, rank);
    net.hidden(x, &mut sc.sx);
    net.hidden(y, &mut sc.sy);
    net.output(&sc.sx, &mut sc.fx);
    net.output(&sc.sy, &mut sc.fy);

    let inv_bw2 = 1.0 / (bandwidth * bandwidth);
    let k = (-0.5 * sq_dist(x, y) * inv_bw2).exp();
    let err = dot(&sc.fx, &sc.fy) - k;

    // v = W₂ᵀ ζ̃(y); g = W₁ᵀ (s'(uₓ) ⊙ v)
    sc.v.iter_mut().for_each(|v| *v = 0.0);
    for o in 0..rank {
        let fo = sc.fy[o];
        for (vi, w) in sc.v.iter_mut().zip(&net.w2[o * hid..(o + 1) * hid]) {
            *vi += fo * w;
        }
    }
    sc.g.iter_mut().for_each(|g| *g = 0.0);
    for i in 0..hid {
        let q = (1.0 - sc.sx[i] * sc.sx[i]) * sc.v[i];
        for j in 0..dim {
            sc.g[j] += net.w1[i * dim + j] * q;
        }
    }
    // dg = g − ∇ₓk, ∇ₓk = −(x − y) k / b²
    let mut mismatch = 0.0;
    for j in 0..dim {
        sc.g[j] += (x[j] - y[j]) * k * inv_bw2;
        mismatch += sc.g[j] * sc.g[j];
    }

    let Some(grad) = grad else {
        return (err * err, mismatch);
    };

    let dpred = 2.0 * err * weight;
    for o in 0..rank {
        sc.dfx[o] = dpred * sc.fy[o];
        sc.dfy[o] = dpred * sc.fx[o];
    }
    let (gw1, rest) = grad.split_at_mut(layout.b1());
    let (gb1, rest) = rest.split_at_mut(hid);
    let (gw2, gb2) = rest.split_at_mut(rank * hid);

    // gradient-penalty branch
    let pscale = 2.0 * penalty * weight;
    for i in 0..hid {
        let sp = 1.0 - sc.sx[i] * sc.sx[i];
        let q = sp * sc.v[i];
        let mut dq = 0.0;
        for j in 0..dim {
            let ddg = pscale * sc.g[j];
            gw1[i * dim + j] += q * ddg;
            dq += net.w1[i * dim + j] * ddg;
        }
        sc.dv[i] = sp * dq;
        sc.dux[i] = sc.v[i] * dq * (-2.0 * sc.sx[i] * sp);
        sc.duy[i] = 0.0;
    }
    for o in 0..rank {
        let w2o = &net.w2[o * hid..(o + 1) * hid];
        let g2o = &mut gw2[o * hid..(o + 1) * hid];
        let fyo = sc.fy[o];
        let mut acc = 0.0;
        for i in 0..hid {
            g2o[i] += fyo * sc.dv[i];
            acc += w2o[i] * sc.dv[i];
        }
        sc.dfy[o] += acc;
    }

    // output layers for x and y
    for o in 0..rank {
        let w2o = &net.w2[o * hid..(o + 1) * hid];
        let g2o = &mut gw2[o * hid..(o + 1) * hid];
        let (dfx, dfy) = (sc.dfx[o], sc.dfy[o]);
        gb2[o] += dfx + dfy;
        for i in 0..hid {
            g2o[i] += dfx * sc.sx[i] + dfy * sc.sy[i];
            sc.dux[i] += w2o[i] * dfx * (1.0 - sc.sx[i] * sc.sx[i]);
            sc.duy[i] += w2o[i] * dfy * (1.0 - sc.sy[i] * sc.sy[i]);
        }
    }
    for i in 0..hid {
        let (dux, duy) = (sc.dux[i], sc.duy[i]);
        gb1[i] += dux + duy;
        for j in 0..dim {
            gw1[i * dim + j] += dux * x[j] + duy * y[j];
        }
    }
    (err * err, mismatch)
}

fn sample_point(rng: &mut ChaCha8Rng, domain: (f64, f64), out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = rng.random_range(domain.0..domain.1));
}

/// Trains `ζ̃` on the unit kernel and returns `ζ = √α₁ ζ̃` plus a report.
pub fn fit_mlp_features(spec: &KernelSpec, cfg: &MlpTrainingConfig, seed: u64) -> Result<(FeatureMap, FitReport)> {
    spec.validate()?;
    cfg.validate()?;
    let layout = Layout {
        dim: spec.input_dim,
        hidden: cfg.hidden,
        rank: cfg.rank,
    };
    let dim = layout.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(&layout, &mut rng);

    let mut train = vec![0.0; cfg.num_samples * 2 * dim];
    for pair in train.chunks_mut(2 * dim) {
        sample_point(&mut rng, cfg.domain, pair);
    }

    let mut grad = vec![0.0; params.len()];
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut scratch = Scratch::new(&layout);
    let weight = 1.0 / cfg.batch_size as f64;
    let mut last_loss = f64::NAN;

    for it in 0..cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..cfg.num_samples);
            let pair = &train[idx * 2 * dim..(idx + 1) * 2 * dim];
            let (x, y) = pair.split_at(dim);
            let (se, gm) = pair_loss_grad(
                &params,
                &layout,
                spec.bandwidth,
                cfg.grad_penalty,
                x,
                y,
                weight,
                Some(&mut grad),
                &mut scratch,
            );
            loss += weight * (se + cfg.grad_penalty * gm);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { iteration: it });
        }
        last_loss = loss;

        let lr = cfg.learning_rate(it);
        let t = (it + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), mi), vi) in params.iter_mut().zip(&grad).zip(&mut m).zip(&mut v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.epsilon);
        }
    }

    // held-out pairs come from an independent stream
    let mut vrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a1d);
    let (mut sse, mut gsse) = (0.0, 0.0);
    let mut x = vec![0.0; dim];
    let mut y = vec![0.0; dim];
    for _ in 0..cfg.validation_pairs {
        sample_point(&mut vrng, cfg.domain, &mut x);
        sample_point(&mut vrng, cfg.domain, &mut y);
        let (se, gm) = pair_loss_grad(
            &params,
            &layout,
            spec.bandwidth,
            cfg.grad_penalty,
            &x,
            &y,
            0.0,
            None,
            &mut scratch,
        );
        sse += se;
        gsse += gm;
    }
    let n_val = cfg.validation_pairs as f64;
    if !(sse.is_finite() && gsse.is_finite()) {
        return Err(Error::TrainingDiverged {
            iteration: cfg.iterations,
        });
    }

    let map = FeatureMap::from_parts(FeatureKind::TrainedNetwork, spec, cfg.rank, seed, params)?;
    let report = FitReport {
        validation_mse: sse / n_val,
        gradient_mse: gsse / n_val,
        final_train_loss: if cfg.iterations == 0 { f64::NAN } else { last_loss },
        num_train_samples: cfg.num_samples,
        num_iterations: cfg.iterations,
        seed,
        hidden: cfg.hidden,
        rank: cfg.rank,
        batch_size: cfg.batch_size,
        grad_penalty: cfg.grad_penalty,
        activation: "tanh".into(),
    };
    Ok((map, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss(params: &[f64], layout: &Layout, x: &[f64], y: &[f64], penalty: f64) -> f64 {
        let mut sc = Scratch::new(layout);
        let (se, gm) = pair_loss_grad(params, layout, 1.3, penalty, x, y, 1.0, None, &mut sc);
        se + penalty * gm
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let layout = Layout {
            dim: 3,
            hidden: 5,
            rank: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = init_params(&layout, &mut rng);
        let x = [0.4, -0.9, 1.2];
        let y = [0.1, -0.3, 0.5];
        let penalty = 0.7;
        let mut grad = vec![0.0; params.len()];
        let mut sc = Scratch::new(&layout);
        pair_loss_grad(&params, &layout, 1.3, penalty, &x, &y, 1.0, Some(&mut grad), &mut sc);
        let step = 1e-6;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += step;
            let up = loss(&p, &layout, &x, &y, penalty);
            p[i] -= 2.0 * step;
            let down = loss(&p, &layout, &x, &y, penalty);
            let fd = (up - down) / (2.0 * step);
            assert!(
                (fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {i}: fd {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn zero_iterations_returns_initialized_map() {
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let cfg = MlpTrainingConfig {
            iterations: 0,
            num_samples: 10,
            validation_pairs: 100,
            ..MlpTrainingConfig::desk()
        };
        let (map, report) = fit_mlp_features(&spec, &cfg, 1).unwrap();
        assert_eq!(map.params().len(), 5450);
        assert!(report.validation_mse.is_finite());
    }

    #[test]
    fn rejects_empty_widths() {
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let cfg = MlpTrainingConfig {
            hidden: 0,
            ..MlpTrainingConfig::desk()
        };
        assert!(matches!(fit_mlp_features(&spec, &cfg, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn huge_step_reports_divergence() {
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let cfg = MlpTrainingConfig {
            hidden: 4,
            rank: 3,
            num_samples: 16,
            batch_size: 8,
            iterations: 50,
            step_size: 1e300,
            ..MlpTrainingConfig::desk()
        };
        let res = fit_mlp_features(&spec, &cfg, 1);
        assert!(matches!(res, Err(Error::TrainingDiverged { .. })), "{res:?}");
    }
}
