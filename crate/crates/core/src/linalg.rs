//! Small dense helpers and the symmetric positive-definite interaction matrix.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// The r×r matrix coupling features, `K(x, y) ≈ ζ(x)ᵀ K_r ζ(y)`.
///
/// Identity is kept as its own variant so the common case never touches a
/// factorization.
#[derive(Clone, Debug)]
pub enum SpdMatrix {
    Identity(usize),
    Dense {
        matrix: DMatrix<f64>,
        inverse: DMatrix<f64>,
    },
}

/// Identity compares equal regardless of its recorded size.
impl PartialEq for SpdMatrix {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (SpdMatrix::Identity(_), SpdMatrix::Identity(_)) => true,
            (SpdMatrix::Dense { matrix: a, .. }, SpdMatrix::Dense { matrix: b, .. }) => a == b,
            _ => false,
        }
    }
}

impl SpdMatrix {
    pub fn identity(dim: usize) -> Self {
        SpdMatrix::Identity(dim)
    }

    /// Builds from row-major rows. Fails unless the matrix is symmetric and
    /// admits a Cholesky factorization.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Config("K_r must be a non-empty square matrix".into()));
        }
        let matrix = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("K_r has non-finite entries".into()));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        for i in 0..dim {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Config("K_r is not symmetric".into()));
                }
            }
        }
        let chol = Cholesky::new(matrix.clone())
            .ok_or_else(|| Error::Config("K_r is not positive definite".into()))?;
        let inverse = chol.inverse();
        Ok(SpdMatrix::Dense { matrix, inverse })
    }

    pub fn dim(&self) -> usize {
        match self {
            SpdMatrix::Identity(n) => *n,
            SpdMatrix::Dense { matrix, .. } => matrix.nrows(),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, SpdMatrix::Identity(_))
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..n).map(|i| (0..n).map(|j| self.entry(i, j)).collect()).collect()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            SpdMatrix::Identity(_) => f64::from(u8::from(i == j)),
            SpdMatrix::Dense { matrix, .. } => matrix[(i, j)],
        }
    }

    /// `out = K x`
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        match self {
            SpdMatrix::Identity(_) => out.copy_from_slice(x),
            SpdMatrix::Dense { matrix, .. } => mat_vec(matrix, x, out),
        }
    }

    /// `out = K⁻¹ x`
    pub fn apply_inverse(&self, x: &[f64], out: &mut [f64]) {
        match self {
            SpdMatrix::Identity(_) => out.copy_from_slice(x),
            SpdMatrix::Dense { inverse, .. } => mat_vec(inverse, x, out),
        }
    }

    /// `xᵀ K x`
    pub fn quad(&self, x: &[f64]) -> f64 {
        match self {
            SpdMatrix::Identity(_) => dot(x, x),
            SpdMatrix::Dense { matrix, .. } => {
                let mut tmp = vec![0.0; x.len()];
                mat_vec(matrix, x, &mut tmp);
                dot(x, &tmp)
            }
        }
    }

    /// `xᵀ K⁻¹ x`
    pub fn quad_inverse(&self, x: &[f64]) -> f64 {
        match self {
            SpdMatrix::Identity(_) => dot(x, x),
            SpdMatrix::Dense { inverse, .. } => {
                let mut tmp = vec![0.0; x.len()];
                mat_vec(inverse, x, &mut tmp);
                dot(x, &tmp)
            }
        }
    }

    /// Prepares solves of `(I + s K⁻¹) x = b` for a fixed `s ≥ 0`.
    ///
    /// Uses `(I + s K⁻¹)⁻¹ = (K + s I)⁻¹ K`, which only factors SPD matrices.
    pub fn shifted_solver(&self, shift: f64) -> Result<ShiftedSolver> {
        if !(shift >= 0.0 && shift.is_finite()) {
            return Err(Error::Argument(format!("shift must be finite and >= 0, got {shift}")));
        }
        match self {
            SpdMatrix::Identity(_) => Ok(ShiftedSolver::Scalar(1.0 / (1.0 + shift))),
            SpdMatrix::Dense { matrix, .. } => {
                let n = matrix.nrows();
                let shifted = matrix + DMatrix::identity(n, n) * shift;
                let chol = Cholesky::new(shifted)
                    .ok_or_else(|| Error::Config("K_r + s I is not positive definite".into()))?;
                Ok(ShiftedSolver::Dense {
                    matrix: matrix.clone(),
                    chol,
                })
            }
        }
    }
}

pub enum ShiftedSolver {
    Scalar(f64),
    Dense {
        matrix: DMatrix<f64>,
        chol: Cholesky<f64, nalgebra::Dyn>,
    },
}

impl ShiftedSolver {
    pub fn solve(&self, b: &[f64], out: &mut [f64]) {
        match self {
            ShiftedSolver::Scalar(f) => {
                for (o, v) in out.iter_mut().zip(b) {
                    *o = f * v;
                }
            }
            ShiftedSolver::Dense { matrix, chol } => {
                let kb = matrix * DVector::from_column_slice(b);
                let x = chol.solve(&kb);
                out.copy_from_slice(x.as_slice());
            }
        }
    }
}

fn mat_vec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let n = m.nrows();
    for (i, o) in out.iter_mut().enumerate().take(n) {
        let mut acc = 0.0;
        for (j, xj) in x.iter().enumerate() {
            acc += m[(i, j)] * xj;
        }
        *o = acc;
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SpdRepr {
    Tag(String),
    Rows(Vec<Vec<f64>>),
}

impl Serialize for SpdMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SpdMatrix::Identity(_) => SpdRepr::Tag("identity".into()).serialize(s),
            SpdMatrix::Dense { .. } => SpdRepr::Rows(self.rows()).serialize(s),
        }
    }
}

/// Deserialized identity carries dimension 0; owners resize it with
/// [`SpdMatrix::with_dim`].
impl<'de> Deserialize<'de> for SpdMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match SpdRepr::deserialize(d)? {
            SpdRepr::Tag(t) if t == "identity" => Ok(SpdMatrix::Identity(0)),
            SpdRepr::Tag(t) => Err(serde::de::Error::custom(format!("unknown K_r tag {t:?}"))),
            SpdRepr::Rows(rows) => SpdMatrix::from_rows(&rows).map_err(serde::de::Error::custom),
        }
    }
}

impl SpdMatrix {
    pub(crate) fn with_dim(self, dim: usize) -> Result<Self> {
        match self {
            SpdMatrix::Identity(_) => Ok(SpdMatrix::Identity(dim)),
            dense if dense.dim() == dim => Ok(dense),
            dense => Err(Error::Config(format!(
                "K_r is {0}x{0} but the feature rank is {dim}",
                dense.dim()
            ))),
        }
    }
}
