//! Model variants A-D, the parameter state, and exact evaluation of the
//! Poisson likelihood, priors, and joint log-posterior.
//!
//! The linear predictor for cell (i, j, k) is
//!
//! ```text
//! mu_ijk = sum_{l: k in S_l} lambda_li * delta_lk
//!        + sum_{l: k in S_l} phi_lj * psi_lk
//!        + eta_ij      (variants C, D)
//!        + eps_ijk     (variants B, D)
//! ```
//!
//! with `log(theta_ijk) = alpha_k + mu_ijk` and
//! `Y_ijk ~ Poisson(E_ijk * theta_ijk)`. Weights are sampled on the log
//! scale, so `delta_lk = exp(log_delta_lk) >= 0`.

use crate::dataset::{CancerDataset, ComponentMap};
use crate::error::{Error, Result};
use crate::graph::StructureMatrix;
use crate::priors::{
    car_logpdf, gamma_logpdf, mvn_logpdf, normal_logpdf, rw1_logpdf, wishart_logpdf, SpdMatrix,
};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

/// The four model variants. Heterogeneity means the correlated per-cell
/// term `eps`; interaction means the shared space-time term `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    pub fn has_heterogeneity(self) -> bool {
        matches!(self, Variant::B | Variant::D)
    }

    pub fn has_interaction(self) -> bool {
        matches!(self, Variant::C | Variant::D)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let c = match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
        };
        f.write_str(c)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            other => Err(Error::Format(format!(
                "unknown model variant `{other}`; expected A, B, C or D"
            ))),
        }
    }
}

/// Dimensions, variant, and component-disease map of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub component_map: ComponentMap,
    pub n_areas: usize,
    pub n_periods: usize,
    pub n_diseases: usize,
}

impl ModelSpec {
    pub fn new(
        variant: Variant,
        component_map: ComponentMap,
        n_areas: usize,
        n_periods: usize,
        n_diseases: usize,
    ) -> Result<Self> {
        if n_areas == 0 || n_periods == 0 || n_diseases == 0 {
            return Err(Error::Domain("model dimensions must be positive".into()));
        }
        if component_map.n_diseases() != n_diseases {
            return Err(Error::Dimension(format!(
                "component map covers {} diseases, model has {n_diseases}",
                component_map.n_diseases()
            )));
        }
        Ok(Self {
            variant,
            component_map,
            n_areas,
            n_periods,
            n_diseases,
        })
    }

    pub fn n_components(&self) -> usize {
        self.component_map.n_components()
    }

    pub fn for_variant(&self, variant: Variant) -> Self {
        let mut spec = self.clone();
        spec.variant = variant;
        spec
    }
}

/// Fixed hyperparameters shared by all variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParameters {
    pub gamma_shape: f64,
    pub gamma_rate: f64,
    pub wishart_scale: SpdMatrix,
    pub wishart_df: f64,
    pub weight_prior_variance: f64,
}

impl HyperParameters {
    /// The packaged defaults: Gamma(0.5, 0.0005) on every precision,
    /// Wishart(I_K, K) on the heterogeneity precision, variance 5 on log
    /// weights.
    pub fn default_for(n_diseases: usize) -> Result<Self> {
        if n_diseases == 0 {
            return Err(Error::Domain("need at least one disease".into()));
        }
        Ok(Self {
            gamma_shape: 0.5,
            gamma_rate: 0.0005,
            wishart_scale: SpdMatrix::identity(n_diseases),
            wishart_df: n_diseases as f64,
            weight_prior_variance: 5.0,
        })
    }

    pub fn validate(&self, n_diseases: usize) -> Result<()> {
        if self.gamma_shape <= 0.0 || self.gamma_rate <= 0.0 || self.weight_prior_variance <= 0.0 {
            return Err(Error::Domain(
                "hyperparameter shapes, rates and variances must be positive".into(),
            ));
        }
        if self.wishart_scale.dim() != n_diseases {
            return Err(Error::Dimension(format!(
                "wishart scale dim {} vs {n_diseases} diseases",
                self.wishart_scale.dim()
            )));
        }
        if self.wishart_df < n_diseases as f64 {
            return Err(Error::Domain(format!(
                "wishart df {} < dimension {n_diseases}",
                self.wishart_df
            )));
        }
        Ok(())
    }
}

/// One point in parameter space.
///
/// `log_delta` / `log_psi` hold a full L x K matrix but only entries with
/// `include[l][k]` are meaningful; the rest stay at zero and are never
/// touched by the sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub alpha: Vec<f64>,
    pub lambda: Array2<f64>,
    pub phi: Array2<f64>,
    pub log_delta: Array2<f64>,
    pub log_psi: Array2<f64>,
    pub eta: Option<Array2<f64>>,
    pub epsilon: Option<Array3<f64>>,
    pub tau_lambda: Vec<f64>,
    pub tau_phi: Vec<f64>,
    pub tau_eta: Option<f64>,
    pub prec_epsilon: Option<SpdMatrix>,
}

impl ParameterState {
    /// The all-zero state conforming to `spec`: fields and weights at zero,
    /// precisions at one, heterogeneity precision at the identity.
    pub fn null(spec: &ModelSpec) -> Self {
        let (i, j, k, l) = (
            spec.n_areas,
            spec.n_periods,
            spec.n_diseases,
            spec.n_components(),
        );
        Self {
            alpha: vec![0.0; k],
            lambda: Array2::zeros((l, i)),
            phi: Array2::zeros((l, j)),
            log_delta: Array2::zeros((l, k)),
            log_psi: Array2::zeros((l, k)),
            eta: spec.variant.has_interaction().then(|| Array2::zeros((i, j))),
            epsilon: spec
                .variant
                .has_heterogeneity()
                .then(|| Array3::zeros((i, j, k))),
            tau_lambda: vec![1.0; l],
            tau_phi: vec![1.0; l],
            tau_eta: spec.variant.has_interaction().then_some(1.0),
            prec_epsilon: spec
                .variant
                .has_heterogeneity()
                .then(|| SpdMatrix::identity(k)),
        }
    }

    /// Cheap structural conformance check (shapes and presence flags).
    pub fn conforms(&self, spec: &ModelSpec) -> Result<()> {
        let (i, j, k, l) = (
            spec.n_areas,
            spec.n_periods,
            spec.n_diseases,
            spec.n_components(),
        );
        if self.alpha.len() != k
            || self.lambda.dim() != (l, i)
            || self.phi.dim() != (l, j)
            || self.log_delta.dim() != (l, k)
            || self.log_psi.dim() != (l, k)
            || self.tau_lambda.len() != l
            || self.tau_phi.len() != l
        {
            return Err(Error::Dimension("state shapes do not match spec".into()));
        }
        if self.eta.is_some() != spec.variant.has_interaction()
            || self.tau_eta.is_some() != spec.variant.has_interaction()
        {
            return Err(Error::Dimension(
                "interaction fields must be present iff the variant has interaction".into(),
            ));
        }
        if self.epsilon.is_some() != spec.variant.has_heterogeneity()
            || self.prec_epsilon.is_some() != spec.variant.has_heterogeneity()
        {
            return Err(Error::Dimension(
                "heterogeneity fields must be present iff the variant has heterogeneity".into(),
            ));
        }
        if let Some(eta) = &self.eta {
            if eta.dim() != (i, j) {
                return Err(Error::Dimension("eta shape".into()));
            }
        }
        if let Some(eps) = &self.epsilon {
            if eps.dim() != (i, j, k) {
                return Err(Error::Dimension("epsilon shape".into()));
            }
        }
        if let Some(p) = &self.prec_epsilon {
            if p.dim() != k {
                return Err(Error::Dimension("prec_epsilon dim".into()));
            }
        }
        Ok(())
    }
}

/// Full invariant check: conformance, positivity, finiteness, and the
/// gauge (centering) constraints. Per-island zero sums are asserted only
/// for a connected graph; with islands only the global mean is fixed.
pub fn check_state(
    state: &ParameterState,
    spec: &ModelSpec,
    islands: &[Vec<usize>],
) -> Result<()> {
    state.conforms(spec)?;
    let l = spec.n_components();

    let all_finite = state.alpha.iter().all(|v| v.is_finite())
        && state.lambda.iter().all(|v| v.is_finite())
        && state.phi.iter().all(|v| v.is_finite())
        && state.log_delta.iter().all(|v| v.is_finite())
        && state.log_psi.iter().all(|v| v.is_finite())
        && state.eta.iter().flatten().all(|v| v.is_finite())
        && state.epsilon.iter().flatten().all(|v| v.is_finite());
    if !all_finite {
        return Err(Error::Domain("state contains non-finite values".into()));
    }
    for tau in state
        .tau_lambda
        .iter()
        .chain(state.tau_phi.iter())
        .chain(state.tau_eta.iter())
    {
        if !(tau.is_finite() && *tau > 0.0) {
            return Err(Error::Domain(format!("precision {tau} must be positive")));
        }
    }

    let tol = |n: usize, scale: f64| 1e-9 * (n as f64).max(1.0) * (1.0 + scale);
    for li in 0..l {
        let lam_scale = (0..spec.n_areas)
            .map(|i| state.lambda[[li, i]].abs())
            .fold(0.0f64, f64::max);
        if islands.len() == 1 {
            for island in islands {
                let s: f64 = island.iter().map(|&i| state.lambda[[li, i]]).sum();
                if s.abs() > tol(island.len(), lam_scale) {
                    return Err(Error::Domain(format!(
                        "lambda[{li}] island sum {s} violates centering"
                    )));
                }
            }
        } else {
            let s: f64 = (0..spec.n_areas).map(|i| state.lambda[[li, i]]).sum();
            if s.abs() > tol(spec.n_areas, lam_scale) {
                return Err(Error::Domain(format!(
                    "lambda[{li}] global sum {s} violates centering"
                )));
            }
        }
        let phi_scale = (0..spec.n_periods)
            .map(|j| state.phi[[li, j]].abs())
            .fold(0.0f64, f64::max);
        let s: f64 = (0..spec.n_periods).map(|j| state.phi[[li, j]]).sum();
        if s.abs() > tol(spec.n_periods, phi_scale) {
            return Err(Error::Domain(format!(
                "phi[{li}] sum {s} violates centering"
            )));
        }
        let in_l = spec.component_map.diseases_in(li);
        for (name, w) in [("log_delta", &state.log_delta), ("log_psi", &state.log_psi)] {
            let w_scale = in_l.iter().map(|&k| w[[li, k]].abs()).fold(0.0f64, f64::max);
            let s: f64 = in_l.iter().map(|&k| w[[li, k]]).sum();
            if s.abs() > tol(in_l.len(), w_scale) {
                return Err(Error::Domain(format!(
                    "{name}[{li}] sum {s} violates the weight gauge"
                )));
            }
            for k in 0..spec.n_diseases {
                if !spec.component_map.includes(li, k) && w[[li, k]] != 0.0 {
                    return Err(Error::Domain(format!(
                        "{name}[{li}][{k}] set outside the component's disease set"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// The linear predictor `mu_ijk`.
pub fn linear_predictor(state: &ParameterState, spec: &ModelSpec, i: usize, j: usize, k: usize) -> f64 {
    debug_assert!(i < spec.n_areas && j < spec.n_periods && k < spec.n_diseases);
    let mut mu = 0.0;
    for l in 0..spec.n_components() {
        if spec.component_map.includes(l, k) {
            mu += state.lambda[[l, i]] * state.log_delta[[l, k]].exp();
            mu += state.phi[[l, j]] * state.log_psi[[l, k]].exp();
        }
    }
    if let Some(eta) = &state.eta {
        mu += eta[[i, j]];
    }
    if let Some(eps) = &state.epsilon {
        mu += eps[[i, j, k]];
    }
    mu
}

/// Relative risk `theta_ijk = exp(alpha_k + mu_ijk)`.
pub fn relative_risk(state: &ParameterState, spec: &ModelSpec, i: usize, j: usize, k: usize) -> f64 {
    (state.alpha[k] + linear_predictor(state, spec, i, j, k)).exp()
}

/// Dense tensor of `log(theta_ijk) = alpha_k + mu_ijk`.
pub fn log_relative_risk_field(state: &ParameterState, spec: &ModelSpec) -> Array3<f64> {
    let (ni, nj, nk, nl) = (
        spec.n_areas,
        spec.n_periods,
        spec.n_diseases,
        spec.n_components(),
    );
    let delta = state.log_delta.mapv(f64::exp);
    let psi = state.log_psi.mapv(f64::exp);
    let mut out = Array3::zeros((ni, nj, nk));
    for i in 0..ni {
        for j in 0..nj {
            for k in 0..nk {
                let mut v = state.alpha[k];
                for l in 0..nl {
                    if spec.component_map.includes(l, k) {
                        v += state.lambda[[l, i]] * delta[[l, k]]
                            + state.phi[[l, j]] * psi[[l, k]];
                    }
                }
                if let Some(eta) = &state.eta {
                    v += eta[[i, j]];
                }
                if let Some(eps) = &state.epsilon {
                    v += eps[[i, j, k]];
                }
                out[[i, j, k]] = v;
            }
        }
    }
    out
}

/// One cell's full Poisson log-density given `log(theta)`:
/// `y*(ln E + log theta) - E*theta - ln Gamma(y+1)`.
#[inline]
pub fn cell_loglik(y: u64, e: f64, log_theta: f64) -> f64 {
    y as f64 * (e.ln() + log_theta) - e * log_theta.exp() - ln_gamma(y as f64 + 1.0)
}

/// Full-data Poisson log-likelihood from a precomputed `log(theta)` tensor.
pub fn loglik_from_log_rr(data: &CancerDataset, log_rr: &Array3<f64>) -> f64 {
    let y = data.observed();
    let e = data.expected();
    let mut total = 0.0;
    for ((idx, &yv), &lt) in y.indexed_iter().zip(log_rr.iter()) {
        total += cell_loglik(yv, e[idx], lt);
    }
    total
}

/// Full Poisson log-likelihood including the factorial constant.
pub fn poisson_loglik(data: &CancerDataset, state: &ParameterState, spec: &ModelSpec) -> f64 {
    loglik_from_log_rr(data, &log_relative_risk_field(state, spec))
}

/// `-2` times the full log-likelihood.
pub fn deviance(data: &CancerDataset, state: &ParameterState, spec: &ModelSpec) -> f64 {
    -2.0 * poisson_loglik(data, state, spec)
}

/// `-2` times the log-likelihood at a given `log(theta)` tensor; used for
/// both per-draw deviances and the DIC plug-in so the two are arithmetically
/// identical on identical inputs.
pub fn deviance_from_log_rr(data: &CancerDataset, log_rr: &Array3<f64>) -> f64 {
    -2.0 * loglik_from_log_rr(data, log_rr)
}

/// Joint log-prior. Flat intercepts contribute zero; normalizing constants
/// independent of sampled quantities are dropped only inside the intrinsic
/// CAR/RW1 terms.
pub fn log_prior(
    state: &ParameterState,
    spec: &ModelSpec,
    hyper: &HyperParameters,
    q: &StructureMatrix,
    r: &StructureMatrix,
) -> Result<f64> {
    state.conforms(spec)?;
    hyper.validate(spec.n_diseases)?;
    if q.dim() != spec.n_areas || r.dim() != spec.n_periods {
        return Err(Error::Dimension(
            "structure matrices do not match model dims".into(),
        ));
    }
    let mut lp = 0.0;
    let nl = spec.n_components();
    for l in 0..nl {
        let lam: Vec<f64> = (0..spec.n_areas).map(|i| state.lambda[[l, i]]).collect();
        lp += car_logpdf(&lam, state.tau_lambda[l], q)?;
        let phi: Vec<f64> = (0..spec.n_periods).map(|j| state.phi[[l, j]]).collect();
        lp += rw1_logpdf(&phi, state.tau_phi[l], r)?;
        for k in spec.component_map.diseases_in(l) {
            lp += normal_logpdf(state.log_delta[[l, k]], 0.0, hyper.weight_prior_variance)?;
            lp += normal_logpdf(state.log_psi[[l, k]], 0.0, hyper.weight_prior_variance)?;
        }
        lp += gamma_logpdf(state.tau_lambda[l], hyper.gamma_shape, hyper.gamma_rate)?;
        lp += gamma_logpdf(state.tau_phi[l], hyper.gamma_shape, hyper.gamma_rate)?;
    }
    if let (Some(eta), Some(tau_eta)) = (&state.eta, state.tau_eta) {
        for v in eta.iter() {
            lp += normal_logpdf(*v, 0.0, 1.0 / tau_eta)?;
        }
        lp += gamma_logpdf(tau_eta, hyper.gamma_shape, hyper.gamma_rate)?;
    }
    if let (Some(eps), Some(prec)) = (&state.epsilon, &state.prec_epsilon) {
        let mut row = vec![0.0; spec.n_diseases];
        for i in 0..spec.n_areas {
            for j in 0..spec.n_periods {
                for k in 0..spec.n_diseases {
                    row[k] = eps[[i, j, k]];
                }
                lp += mvn_logpdf(&row, prec)?;
            }
        }
        lp += wishart_logpdf(prec, &hyper.wishart_scale, hyper.wishart_df)?;
    }
    Ok(lp)
}

/// Joint log-posterior: likelihood plus prior.
pub fn log_posterior(
    data: &CancerDataset,
    state: &ParameterState,
    spec: &ModelSpec,
    hyper: &HyperParameters,
    q: &StructureMatrix,
    r: &StructureMatrix,
) -> Result<f64> {
    Ok(poisson_loglik(data, state, spec) + log_prior(state, spec, hyper, q, r)?)
}
