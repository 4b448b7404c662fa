//! Log-densities and random generators for the prior building blocks:
//! intrinsic CAR, first-order random walk, normal, gamma, multivariate
//! normal, and Wishart.
//!
//! Conventions, stated because parametrizations differ across texts:
//! gamma is shape-rate (mean = shape/rate); the Wishart takes a rate-like
//! scale matrix `S`, so a draw `X ~ Wishart(S, df)` has `E[X] = df * S^-1`.

use crate::error::{Error, Result};
use crate::graph::StructureMatrix;
use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Dense symmetric positive-definite matrix with a cached Cholesky factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SpdMatrixRepr", into = "SpdMatrixRepr")]
pub struct SpdMatrix {
    m: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

#[derive(Serialize, Deserialize)]
struct SpdMatrixRepr {
    rows: Vec<Vec<f64>>,
}

impl From<SpdMatrix> for SpdMatrixRepr {
    fn from(spd: SpdMatrix) -> Self {
        let k = spd.dim();
        SpdMatrixRepr {
            rows: (0..k)
                .map(|i| (0..k).map(|j| spd.m[(i, j)]).collect())
                .collect(),
        }
    }
}

impl TryFrom<SpdMatrixRepr> for SpdMatrix {
    type Error = Error;
    fn try_from(repr: SpdMatrixRepr) -> Result<Self> {
        let k = repr.rows.len();
        if repr.rows.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension("SPD matrix rows must be square".into()));
        }
        SpdMatrix::from_fn(k, |i, j| repr.rows[i][j])
    }
}

impl PartialEq for SpdMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m
    }
}

impl SpdMatrix {
    /// Validates symmetry (to 1e-12 relative) and positive-definiteness.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Dimension("SPD matrix must be square".into()));
        }
        let scale = m.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Domain(format!(
                        "matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let sym = (&m + m.transpose()) * 0.5;
        let chol = Cholesky::new(sym.clone())
            .ok_or_else(|| Error::Domain("matrix is not positive definite".into()))?;
        Ok(Self { m: sym, chol })
    }

    pub fn from_fn(k: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        Self::from_matrix(DMatrix::from_fn(k, k, f))
    }

    pub fn identity(k: usize) -> Self {
        Self::from_matrix(DMatrix::identity(k, k)).expect("identity is SPD")
    }

    pub fn scaled_identity(k: usize, c: f64) -> Result<Self> {
        if c <= 0.0 {
            return Err(Error::Domain(format!("scale {c} must be positive")));
        }
        Self::from_matrix(DMatrix::identity(k, k) * c)
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Log-determinant via the Cholesky factor.
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Quadratic form `x' M x`.
    pub fn quad_form(&self, x: &[f64]) -> Result<f64> {
        let k = self.dim();
        if x.len() != k {
            return Err(Error::Dimension(format!(
                "vector length {} vs matrix dim {k}",
                x.len()
            )));
        }
        let mut q = 0.0;
        for i in 0..k {
            for j in 0..k {
                q += x[i] * self.m[(i, j)] * x[j];
            }
        }
        Ok(q)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Lower-triangular Cholesky factor `L` with `L L' = M`.
    pub fn chol_lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn trace_product(&self, other: &DMatrix<f64>) -> f64 {
        let k = self.dim();
        let mut t = 0.0;
        for i in 0..k {
            for j in 0..k {
                t += self.m[(i, j)] * other[(j, i)];
            }
        }
        t
    }
}

/// Intrinsic CAR log-density: `(rank(Q)/2) ln(tau) - (tau/2) x'Qx`.
///
/// The tau-independent generalized-determinant constant is dropped; the
/// density is improper on the full space (invariant to per-component
/// constant shifts).
pub fn car_logpdf(x: &[f64], tau: f64, q: &StructureMatrix) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("tau {tau} must be positive")));
    }
    let quad = q.quad_form(x)?;
    Ok(0.5 * q.rank() as f64 * tau.ln() - 0.5 * tau * quad)
}

/// RW1 log-density: the path-graph (one-dimensional) case of [`car_logpdf`].
pub fn rw1_logpdf(x: &[f64], tau: f64, r: &StructureMatrix) -> Result<f64> {
    car_logpdf(x, tau, r)
}

/// Exact normal log-density in mean-variance form.
pub fn normal_logpdf(x: f64, mean: f64, variance: f64) -> Result<f64> {
    if variance <= 0.0 {
        return Err(Error::Domain(format!("variance {variance} must be positive")));
    }
    let d = x - mean;
    Ok(-0.5 * (LN_2PI + variance.ln() + d * d / variance))
}

/// Exact gamma log-density, shape-rate parametrization (mean = shape/rate).
pub fn gamma_logpdf(x: f64, shape: f64, rate: f64) -> Result<f64> {
    if shape <= 0.0 || rate <= 0.0 {
        return Err(Error::Domain(format!(
            "gamma parameters must be positive: shape {shape}, rate {rate}"
        )));
    }
    if x <= 0.0 {
        return Err(Error::Domain(format!("gamma support is x > 0, got {x}")));
    }
    Ok(shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x)
}

/// Zero-mean multivariate normal log-density given the precision matrix.
pub fn mvn_logpdf(x: &[f64], prec: &SpdMatrix) -> Result<f64> {
    let k = prec.dim() as f64;
    let quad = prec.quad_form(x)?;
    Ok(0.5 * prec.log_det() - 0.5 * k * LN_2PI - 0.5 * quad)
}

/// Multivariate log-gamma function `ln Gamma_k(a)`.
fn ln_multigamma(k: usize, a: f64) -> f64 {
    let kf = k as f64;
    kf * (kf - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (0..k).map(|i| ln_gamma(a - 0.5 * i as f64)).sum::<f64>()
}

/// Wishart log-density in the rate-matrix convention: for `X ~ Wishart(S, df)`,
/// `ln p(X) = ((df-k-1)/2) ln|X| - tr(S X)/2 + (df/2) ln|S| - (df k/2) ln 2 - ln Gamma_k(df/2)`.
pub fn wishart_logpdf(x: &SpdMatrix, scale: &SpdMatrix, df: f64) -> Result<f64> {
    let k = scale.dim();
    if x.dim() != k {
        return Err(Error::Dimension(format!(
            "wishart argument dim {} vs scale dim {k}",
            x.dim()
        )));
    }
    if df < k as f64 {
        return Err(Error::Domain(format!("wishart df {df} < dim {k}")));
    }
    let kf = k as f64;
    Ok(0.5 * (df - kf - 1.0) * x.log_det() - 0.5 * scale.trace_product(x.matrix())
        + 0.5 * df * scale.log_det()
        - 0.5 * df * kf * std::f64::consts::LN_2
        - ln_multigamma(k, 0.5 * df))
}

/// Normal draw in mean-standard-deviation form.
pub fn sample_normal<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> Result<f64> {
    let dist = Normal::new(mean, sd)
        .map_err(|e| Error::Domain(format!("normal({mean}, {sd}): {e}")))?;
    Ok(dist.sample(rng))
}

/// Gamma draw, shape-rate parametrization.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if rate <= 0.0 {
        return Err(Error::Domain(format!("gamma rate {rate} must be positive")));
    }
    let dist = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Domain(format!("gamma({shape}, {rate}): {e}")))?;
    Ok(dist.sample(rng))
}

/// Wishart draw via the Bartlett decomposition. `scale` is the rate-like
/// matrix, so `E[X] = df * scale^-1`.
pub fn sample_wishart<R: Rng + ?Sized>(
    scale: &SpdMatrix,
    df: f64,
    rng: &mut R,
) -> Result<SpdMatrix> {
    let k = scale.dim();
    if df < k as f64 {
        return Err(Error::Domain(format!("wishart df {df} < dim {k}")));
    }
    // Bartlett factor for Wishart(V = scale^-1, df) in the classic convention.
    let v = SpdMatrix::from_matrix(scale.inverse())?;
    let l = v.chol_lower();
    let mut a = DMatrix::zeros(k, k);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for i in 0..k {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| Error::Domain(format!("chi-squared({}): {e}", df - i as f64)))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal.sample(rng);
        }
    }
    let la = l * a;
    let w = &la * la.transpose();
    SpdMatrix::from_matrix(w)
}
