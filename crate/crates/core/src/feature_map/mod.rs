//! Gaussian interaction kernel and its low-rank feature expansions.
//!
//! A [`FeatureMap`] realizes `K(x, y) ≈ ζ(x)ᵀ K_r ζ(y)` with `ζ = √α₁ ζ̃`.
//! Two backends share the type: random Fourier features (cheap, fully
//! determined by a seed) and a trained one-hidden-layer network.

mod training;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_finite, Error, Result};
use crate::linalg::{dot, sq_dist, SpdMatrix};

pub use training::{fit_mlp_features, FitReport, MlpTrainingConfig};

/// The exact interaction kernel `α₁·exp(−‖x−y‖²/(2·bandwidth²))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub alpha1: f64,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
}

fn default_bandwidth() -> f64 {
    1.0
}

fn default_input_dim() -> usize {
    3
}

impl KernelSpec {
    pub fn new(alpha1: f64, bandwidth: f64, input_dim: usize) -> Result<Self> {
        let spec = KernelSpec {
            alpha1,
            bandwidth,
            input_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Unit bandwidth on ℝ³.
    pub fn gaussian(alpha1: f64) -> Result<Self> {
        Self::new(alpha1, 1.0, 3)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 > 0.0 && self.alpha1.is_finite()) {
            return Err(Error::Argument(format!("alpha1 must be > 0, got {}", self.alpha1)));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Argument(format!(
                "bandwidth must be > 0, got {}",
                self.bandwidth
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Argument("input_dim must be positive".into()));
        }
        Ok(())
    }

    /// Same kernel with `α₁ = 1`, the target the feature backends are fitted to.
    pub fn unit(&self) -> KernelSpec {
        KernelSpec {
            alpha1: 1.0,
            ..self.clone()
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        self.alpha1 * (-sq_dist(x, y) / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }

    /// ∇ₓK(x, y) accumulated into `out` scaled by `weight`; returns K(x, y).
    #[inline]
    pub(crate) fn eval_grad_unchecked(&self, x: &[f64], y: &[f64], weight: f64, out: &mut [f64]) -> f64 {
        let k = self.eval_unchecked(x, y);
        let inv_bw2 = 1.0 / (self.bandwidth * self.bandwidth);
        for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
            *o -= weight * k * (xi - yi) * inv_bw2;
        }
        k
    }
}

pub fn gaussian_kernel(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<f64> {
    if x.len() != spec.input_dim || y.len() != spec.input_dim {
        return Err(Error::Argument(format!(
            "kernel expects points of dimension {}",
            spec.input_dim
        )));
    }
    ensure_finite(x, "x")?;
    ensure_finite(y, "y")?;
    Ok(spec.eval_unchecked(x, y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    RandomFeature,
    TrainedNetwork,
}

/// A feature expansion `ζ: ℝᴰ → ℝʳ` together with its coupling matrix `K_r`.
///
/// Parameter layout:
/// - `random_feature`: `r×D` frequencies (row-major) then `r` phase offsets.
/// - `trained_network`: `W₁ (H×D)`, `b₁ (H)`, `W₂ (r×H)`, `b₂ (r)`, tanh hidden units.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    kind: FeatureKind,
    rank: usize,
    input_dim: usize,
    alpha1: f64,
    bandwidth: f64,
    seed: u64,
    params: Vec<f64>,
    kr: SpdMatrix,
    hidden: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureMapDoc {
    kind: FeatureKind,
    r: usize,
    input_dim: usize,
    alpha1: f64,
    bandwidth: f64,
    seed: u64,
    parameters: Vec<f64>,
    #[serde(rename = "Kr")]
    kr: SpdMatrix,
}

pub fn rff_features(spec: &KernelSpec, r: usize, seed: u64) -> Result<FeatureMap> {
    spec.validate()?;
    if r < 1 {
        return Err(Error::Argument("rank r must be >= 1".into()));
    }
    let dim = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(r * (dim + 1));
    for _ in 0..r * dim {
        let w: f64 = rng.sample(StandardNormal);
        params.push(w / spec.bandwidth);
    }
    for _ in 0..r {
        params.push(rng.random_range(0.0..2.0 * PI));
    }
    FeatureMap::from_parts(FeatureKind::RandomFeature, spec, r, seed, params)
}

impl FeatureMap {
    /// Assembles a map from raw parameters, `K_r = I`.
    pub fn from_parts(
        kind: FeatureKind,
        spec: &KernelSpec,
        rank: usize,
        seed: u64,
        params: Vec<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        if rank < 1 {
            return Err(Error::Argument("rank r must be >= 1".into()));
        }
        ensure_finite(&params, "feature parameters")?;
        let dim = spec.input_dim;
        let hidden = match kind {
            FeatureKind::RandomFeature => {
                if params.len() != rank * (dim + 1) {
                    return Err(Error::Argument(format!(
                        "random-feature map of rank {rank} needs {} parameters, got {}",
                        rank * (dim + 1),
                        params.len()
                    )));
                }
                0
            }
            FeatureKind::TrainedNetwork => {
                let per_unit = dim + 1 + rank;
                if params.len() <= rank || (params.len() - rank) % per_unit != 0 {
                    return Err(Error::Argument(format!(
                        "{} parameters do not describe a {dim}->H->{rank} network",
                        params.len()
                    )));
                }
                (params.len() - rank) / per_unit
            }
        };
        Ok(FeatureMap {
            kind,
            rank,
            input_dim: dim,
            alpha1: spec.alpha1,
            bandwidth: spec.bandwidth,
            seed,
            params,
            kr: SpdMatrix::identity(rank),
            hidden,
        })
    }

    pub fn with_kr(mut self, kr: SpdMatrix) -> Result<Self> {
        self.kr = kr.with_dim(self.rank)?;
        Ok(self)
    }

    /// Same features, different `α₁` (only the output scale changes).
    pub fn with_alpha1(mut self, alpha1: f64) -> Result<Self> {
        if !(alpha1 > 0.0 && alpha1.is_finite()) {
            return Err(Error::Argument(format!("alpha1 must be > 0, got {alpha1}")));
        }
        self.alpha1 = alpha1;
        Ok(self)
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }
    pub fn rank(&self) -> usize {
        self.rank
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn alpha1(&self) -> f64 {
        self.alpha1
    }
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn hidden(&self) -> usize {
        self.hidden
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn kr(&self) -> &SpdMatrix {
        &self.kr
    }
    /// `√α₁`
    pub fn scale(&self) -> f64 {
        self.alpha1.sqrt()
    }

    pub fn kernel_spec(&self) -> KernelSpec {
        KernelSpec {
            alpha1: self.alpha1,
            bandwidth: self.bandwidth,
            input_dim: self.input_dim,
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Argument(format!(
                "feature map expects dimension {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        ensure_finite(x, "feature input")
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut out = vec![0.0; self.rank];
        self.evaluate_into(x, &mut out);
        Ok(out)
    }

    /// `out = ζ(x)`; no input validation.
    pub fn evaluate_into(&self, x: &[f64], out: &mut [f64]) {
        let scale = self.scale();
        let dim = self.input_dim;
        match self.kind {
            FeatureKind::RandomFeature => {
                let amp = scale * (2.0 / self.rank as f64).sqrt();
                let (w, b) = self.params.split_at(self.rank * dim);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = amp * (dot(&w[i * dim..(i + 1) * dim], x) + b[i]).cos();
                }
            }
            FeatureKind::TrainedNetwork => {
                let net = Network::new(self);
                let mut s = vec![0.0; self.hidden];
                net.hidden(x, &mut s);
                net.output(&s, out);
                out.iter_mut().for_each(|o| *o *= scale);
            }
        }
    }

    /// Jacobian `∂ζ/∂x`, row-major `r × D`.
    pub fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let dim = self.input_dim;
        let scale = self.scale();
        let mut jac = vec![0.0; self.rank * dim];
        match self.kind {
            FeatureKind::RandomFeature => {
                let amp = scale * (2.0 / self.rank as f64).sqrt();
                let (w, b) = self.params.split_at(self.rank * dim);
                for i in 0..self.rank {
                    let wi = &w[i * dim..(i + 1) * dim];
                    let ds = -amp * (dot(wi, x) + b[i]).sin();
                    for j in 0..dim {
                        jac[i * dim + j] = ds * wi[j];
                    }
                }
            }
            FeatureKind::TrainedNetwork => {
                let net = Network::new(self);
                let mut s = vec![0.0; self.hidden];
                net.hidden(x, &mut s);
                for o in 0..self.rank {
                    let w2o = &net.w2[o * self.hidden..(o + 1) * self.hidden];
                    for (h, (&w2, &sh)) in w2o.iter().zip(&s).enumerate() {
                        let c = scale * w2 * (1.0 - sh * sh);
                        for j in 0..dim {
                            jac[o * dim + j] += c * net.w1[h * dim + j];
                        }
                    }
                }
            }
        }
        Ok(jac)
    }

    /// Returns `aᵀζ(x)` and writes `(∂ζ/∂x)ᵀ a` into `grad`; no input validation.
    pub fn contract_with_gradient(&self, x: &[f64], a: &[f64], grad: &mut [f64]) -> f64 {
        let dim = self.input_dim;
        let scale = self.scale();
        grad.iter_mut().for_each(|g| *g = 0.0);
        match self.kind {
            FeatureKind::RandomFeature => {
                let amp = scale * (2.0 / self.rank as f64).sqrt();
                let (w, b) = self.params.split_at(self.rank * dim);
                let mut value = 0.0;
                for (i, &ai) in a.iter().enumerate() {
                    let wi = &w[i * dim..(i + 1) * dim];
                    let (sin, cos) = (dot(wi, x) + b[i]).sin_cos();
                    value += ai * cos;
                    let c = -ai * sin;
                    for j in 0..dim {
                        grad[j] += c * wi[j];
                    }
                }
                grad.iter_mut().for_each(|g| *g *= amp);
                amp * value
            }
            FeatureKind::TrainedNetwork => {
                let net = Network::new(self);
                let h = self.hidden;
                let mut s = vec![0.0; h];
                net.hidden(x, &mut s);
                // p = W₂ᵀ a
                let mut p = vec![0.0; h];
                let mut value = 0.0;
                for (o, &ao) in a.iter().enumerate() {
                    let w2o = &net.w2[o * h..(o + 1) * h];
                    value += ao * (dot(w2o, &s) + net.b2[o]);
                    for (pi, &w) in p.iter_mut().zip(w2o) {
                        *pi += ao * w;
                    }
                }
                for (i, (&pi, &si)) in p.iter().zip(&s).enumerate() {
                    let q = pi * (1.0 - si * si);
                    for j in 0..dim {
                        grad[j] += q * net.w1[i * dim + j];
                    }
                }
                grad.iter_mut().for_each(|g| *g *= scale);
                scale * value
            }
        }
    }

    /// `ζ(x)ᵀ K_r ζ(y)`.
    pub fn expanded_kernel(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let zx = self.evaluate(x)?;
        let zy = self.evaluate(y)?;
        let mut kzy = vec![0.0; self.rank];
        self.kr.apply(&zy, &mut kzy);
        Ok(dot(&zx, &kzy))
    }

    pub fn to_json(&self) -> String {
        let doc = FeatureMapDoc {
            kind: self.kind,
            r: self.rank,
            input_dim: self.input_dim,
            alpha1: self.alpha1,
            bandwidth: self.bandwidth,
            seed: self.seed,
            parameters: self.params.clone(),
            kr: self.kr.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("feature map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FeatureMapDoc = serde_json::from_str(text)?;
        let spec = KernelSpec::new(doc.alpha1, doc.bandwidth, doc.input_dim)?;
        FeatureMap::from_parts(doc.kind, &spec, doc.r, doc.seed, doc.parameters)?.with_kr(doc.kr)
    }

    /// Content hash of the serialized map.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Borrowed view of a trained network's weights.
struct Network<'a> {
    dim: usize,
    hidden: usize,
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

impl<'a> Network<'a> {
    fn new(map: &'a FeatureMap) -> Self {
        Self::from_slice(&map.params, map.input_dim, map.hidden, map.rank)
    }

    fn from_slice(params: &'a [f64], dim: usize, hidden: usize, rank: usize) -> Self {
        let (w1, rest) = params.split_at(hidden * dim);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, b2) = rest.split_at(rank * hidden);
        Network {
            dim,
            hidden,
            w1,
            b1,
            w2,
            b2,
        }
    }

    fn hidden(&self, x: &[f64], s: &mut [f64]) {
        for (i, si) in s.iter_mut().enumerate() {
            *si = (dot(&self.w1[i * self.dim..(i + 1) * self.dim], x) + self.b1[i]).tanh();
        }
    }

    fn output(&self, s: &[f64], out: &mut [f64]) {
        for (o, out_o) in out.iter_mut().enumerate() {
            *out_o = dot(&self.w2[o * self.hidden..(o + 1) * self.hidden], s) + self.b2[o];
        }
    }
}

/// Mean of `(ζ(x)ᵀK_rζ(y) − K(x, y))²` over pairs uniform on `[−3, 3]ᴰ`.
pub fn validate_kernel_fit(map: &FeatureMap, spec: &KernelSpec, num_pairs: usize, seed: u64) -> Result<f64> {
    validate_kernel_fit_on(map, spec, num_pairs, seed, (-3.0, 3.0))
}

pub fn validate_kernel_fit_on(
    map: &FeatureMap,
    spec: &KernelSpec,
    num_pairs: usize,
    seed: u64,
    domain: (f64, f64),
) -> Result<f64> {
    spec.validate()?;
    if num_pairs < 1 {
        return Err(Error::Argument("num_pairs must be >= 1".into()));
    }
    if map.input_dim != spec.input_dim {
        return Err(Error::Argument("map and kernel dimensions differ".into()));
    }
    if !(domain.0 < domain.1) {
        return Err(Error::Argument("empty sampling domain".into()));
    }
    let dim = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; dim];
    let mut y = vec![0.0; dim];
    let mut zx = vec![0.0; map.rank];
    let mut zy = vec![0.0; map.rank];
    let mut kzy = vec![0.0; map.rank];
    let mut total = 0.0;
    for _ in 0..num_pairs {
        x.iter_mut().for_each(|v| *v = rng.random_range(domain.0..domain.1));
        y.iter_mut().for_each(|v| *v = rng.random_range(domain.0..domain.1));
        map.evaluate_into(&x, &mut zx);
        map.evaluate_into(&y, &mut zy);
        map.kr.apply(&zy, &mut kzy);
        let err = dot(&zx, &kzy) - spec.eval_unchecked(&x, &y);
        total += err * err;
    }
    Ok(total / num_pairs as f64)
}
