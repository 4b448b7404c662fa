//! Synthetic datasets from known parameter states, so estimation can be
//! validated without registry microdata.

use crate::dataset::CancerDataset;
use crate::error::{Error, Result};
use crate::mcmc::recenter;
use crate::model::{log_relative_risk_field, ModelSpec, ParameterState};
use crate::priors::SpdMatrix;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

/// Everything needed to generate one synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationRecipe {
    pub spec: ModelSpec,
    pub true_state: ParameterState,
    pub expected: Array3<f64>,
    pub seed: u64,
    pub area_labels: Vec<String>,
    pub period_labels: Vec<String>,
    pub disease_labels: Vec<String>,
}

impl SimulationRecipe {
    pub fn new(
        spec: ModelSpec,
        true_state: ParameterState,
        expected: Array3<f64>,
        seed: u64,
        area_labels: Vec<String>,
        period_labels: Vec<String>,
        disease_labels: Vec<String>,
    ) -> Result<Self> {
        true_state.conforms(&spec)?;
        if expected.dim() != (spec.n_areas, spec.n_periods, spec.n_diseases) {
            return Err(Error::Dimension("expected tensor dims vs spec".into()));
        }
        if expected.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::Data("expected counts must be positive".into()));
        }
        if area_labels.len() != spec.n_areas
            || period_labels.len() != spec.n_periods
            || disease_labels.len() != spec.n_diseases
        {
            return Err(Error::Dimension("label lengths vs spec".into()));
        }
        Ok(Self {
            spec,
            true_state,
            expected,
            seed,
            area_labels,
            period_labels,
            disease_labels,
        })
    }

    /// Recipe with generated labels `area01..`, `p1..`, `d1..`.
    pub fn with_default_labels(
        spec: ModelSpec,
        true_state: ParameterState,
        expected: Array3<f64>,
        seed: u64,
    ) -> Result<Self> {
        let area_labels = (1..=spec.n_areas).map(|i| format!("area{i:02}")).collect();
        let period_labels = (1..=spec.n_periods).map(|j| format!("p{j}")).collect();
        let disease_labels = (1..=spec.n_diseases).map(|k| format!("d{k}")).collect();
        Self::new(
            spec,
            true_state,
            expected,
            seed,
            area_labels,
            period_labels,
            disease_labels,
        )
    }
}

/// Draws `Y_ijk ~ Poisson(E_ijk * theta_ijk)` at the recipe's true state.
/// Deterministic given the recipe seed.
pub fn simulate_dataset(recipe: &SimulationRecipe) -> Result<CancerDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let log_rr = log_relative_risk_field(&recipe.true_state, &recipe.spec);
    let dims = recipe.expected.dim();
    let mut y = Array3::zeros(dims);
    for ((idx, slot), (&e, &lt)) in y
        .indexed_iter_mut()
        .zip(recipe.expected.iter().zip(log_rr.iter()))
    {
        let mean = e * lt.exp();
        let poisson = Poisson::new(mean)
            .map_err(|err| Error::Domain(format!("poisson mean {mean} at {idx:?}: {err}")))?;
        *slot = poisson.sample(&mut rng) as u64;
    }
    CancerDataset::new(
        y,
        recipe.expected.clone(),
        recipe.area_labels.clone(),
        recipe.period_labels.clone(),
        recipe.disease_labels.clone(),
    )
}

/// Draws a centered truth inside the identifiable gauge: fields iid
/// `N(0, field_sd^2)` then recentered, log weights `N(0, 0.25)` then
/// centered per component, intercepts `N(0, 0.25)`, precisions matched to
/// `field_sd`.
pub fn draw_true_state<R: Rng + ?Sized>(
    spec: &ModelSpec,
    rng: &mut R,
    field_sd: f64,
) -> Result<ParameterState> {
    if !(field_sd > 0.0) {
        return Err(Error::Domain(format!("field_sd {field_sd} must be positive")));
    }
    let mut state = ParameterState::null(spec);
    let field = |v: &mut f64, rng: &mut R| *v = field_sd * rng.sample::<f64, _>(StandardNormal);
    for v in state.lambda.iter_mut() {
        field(v, rng);
    }
    for v in state.phi.iter_mut() {
        field(v, rng);
    }
    if let Some(eta) = &mut state.eta {
        for v in eta.iter_mut() {
            field(v, rng);
        }
    }
    if let Some(eps) = &mut state.epsilon {
        for v in eps.iter_mut() {
            field(v, rng);
        }
    }
    for l in 0..spec.n_components() {
        for k in spec.component_map.diseases_in(l) {
            state.log_delta[[l, k]] = 0.5 * rng.sample::<f64, _>(StandardNormal);
            state.log_psi[[l, k]] = 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    for a in state.alpha.iter_mut() {
        *a = 0.5 * rng.sample::<f64, _>(StandardNormal);
    }
    let tau = 1.0 / (field_sd * field_sd);
    state.tau_lambda.iter_mut().for_each(|t| *t = tau);
    state.tau_phi.iter_mut().for_each(|t| *t = tau);
    if state.tau_eta.is_some() {
        state.tau_eta = Some(tau);
    }
    if state.prec_epsilon.is_some() {
        state.prec_epsilon = Some(SpdMatrix::scaled_identity(spec.n_diseases, tau)?);
    }
    // recentering keeps the truth comparable with fitted (gauge-fixed) states
    let everyone = vec![(0..spec.n_areas).collect::<Vec<usize>>()];
    Ok(recenter(&state, spec, &everyone))
}
