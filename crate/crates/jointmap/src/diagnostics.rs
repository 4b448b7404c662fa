//! Convergence diagnostics, DIC model comparison, and posterior summaries
//! in the shapes the reports need: temporal relative-risk tables, pairwise
//! weight-ratio tables, and per-cell relative-risk summaries.

use crate::dataset::CancerDataset;
use crate::error::{Error, Result};
use crate::mcmc::ChainOutput;
use crate::model::{deviance_from_log_rr, log_relative_risk_field, ModelSpec, ParameterState};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Median, central 95% interval, mean and draw count of one scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub mean: f64,
    pub n: usize,
}

impl PosteriorSummary {
    fn constant(v: f64, n: usize) -> Self {
        Self {
            median: v,
            lower: v,
            upper: v,
            mean: v,
            n,
        }
    }

    /// True when the 95% interval excludes 1 (the flagging rule used for
    /// weight-ratio tables).
    pub fn excludes_one(&self) -> bool {
        self.lower > 1.0 || self.upper < 1.0
    }
}

/// Deviance information criterion: `dic = d_bar + p_d` with
/// `p_d = d_bar - deviance(plug-in)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DicResult {
    pub d_bar: f64,
    pub p_d: f64,
    pub dic: f64,
}

impl DicResult {
    pub fn new(d_bar: f64, p_d: f64) -> Self {
        Self {
            d_bar,
            p_d,
            dic: d_bar + p_d,
        }
    }
}

/// Quantile by linear interpolation between order statistics at position
/// `(n - 1) * p`. `sorted` must be ascending and non-empty.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (n - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Posterior summary of a scalar's draws: median, central 95% interval by
/// the `(n-1)p` linear-interpolation quantile rule, mean and count.
pub fn summarize(draws: &[f64]) -> Result<PosteriorSummary> {
    if draws.is_empty() {
        return Err(Error::EmptyDraws);
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(PosteriorSummary {
        median: quantile_sorted(&sorted, 0.5),
        lower: quantile_sorted(&sorted, 0.025),
        upper: quantile_sorted(&sorted, 0.975),
        mean: draws.iter().sum::<f64>() / draws.len() as f64,
        n: draws.len(),
    })
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Gelman-Rubin potential scale reduction factor over two or more
/// equal-length chains:
/// `PSRF = sqrt(((n-1)/n * W + B/n) / W)` with `W` the mean within-chain
/// variance and `B` the between-chain variance of chain means times `n`.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Domain(format!(
            "gelman_rubin needs at least 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains[0].len();
    if n < 2 {
        return Err(Error::Domain("chains must have at least 2 draws".into()));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Dimension("chains must have equal length".into()));
    }
    let w = chains.iter().map(|c| sample_variance(c)).sum::<f64>() / chains.len() as f64;
    if w == 0.0 {
        return Err(Error::DegenerateChains);
    }
    let means: Vec<f64> = chains
        .iter()
        .map(|c| c.iter().sum::<f64>() / n as f64)
        .collect();
    let b = n as f64 * sample_variance(&means);
    let nf = n as f64;
    Ok((((nf - 1.0) / nf * w + b / nf) / w).sqrt())
}

/// Extracts one scalar's draw sequence from every chain.
pub fn scalar_draws<F>(chains: &[ChainOutput], f: F) -> Vec<Vec<f64>>
where
    F: Fn(&ParameterState) -> f64,
{
    chains
        .iter()
        .map(|c| c.draws.iter().map(&f).collect())
        .collect()
}

/// All chains' draws of one scalar pooled in chain order.
pub fn pooled_draws<F>(chains: &[ChainOutput], f: F) -> Vec<f64>
where
    F: Fn(&ParameterState) -> f64,
{
    chains
        .iter()
        .flat_map(|c| c.draws.iter().map(&f))
        .collect()
}

/// Running mean that is exact for constant inputs (incremental update).
#[derive(Clone)]
struct RunningMean {
    mean: f64,
    n: usize,
}

impl RunningMean {
    fn new() -> Self {
        Self { mean: 0.0, n: 0 }
    }

    fn push(&mut self, x: f64) {
        self.n += 1;
        self.mean += (x - self.mean) / self.n as f64;
    }
}

/// DIC over the merged retained draws of the given chains. The plug-in
/// deviance is evaluated at the posterior mean of the cellwise log relative
/// risk, and the per-draw deviances stored in the chains define `d_bar`.
pub fn dic(data: &CancerDataset, spec: &ModelSpec, chains: &[ChainOutput]) -> Result<DicResult> {
    let total: usize = chains.iter().map(|c| c.draws.len()).sum();
    if total == 0 {
        return Err(Error::EmptyDraws);
    }
    let mut d_bar = RunningMean::new();
    for c in chains {
        if c.draws.len() != c.deviance.len() {
            return Err(Error::Dimension(
                "chain draws and stored deviances disagree".into(),
            ));
        }
        for &d in &c.deviance {
            d_bar.push(d);
        }
    }
    let dims = (data.n_areas(), data.n_periods(), data.n_diseases());
    let mut mean_log_rr: Array3<RunningMean> =
        Array3::from_shape_simple_fn(dims, RunningMean::new);
    for c in chains {
        for state in &c.draws {
            let log_rr = log_relative_risk_field(state, spec);
            for (cell, &v) in mean_log_rr.iter_mut().zip(log_rr.iter()) {
                cell.push(v);
            }
        }
    }
    let plug_in = mean_log_rr.mapv(|m| m.mean);
    let d_hat = deviance_from_log_rr(data, &plug_in);
    let p_d = d_bar.mean - d_hat;
    Ok(DicResult::new(d_bar.mean, p_d))
}

/// Spatial or temporal side of the weight-ratio tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Spatial,
    Temporal,
}

/// Log-scale relative weight of `col` over `row` in one draw. Antisymmetry
/// is exact here: `weight_log_ratio(s, l, r, c) == -weight_log_ratio(s, l, c, r)`
/// bit for bit, so a ratio times its transpose is `exp(0) = 1` exactly.
pub fn weight_log_ratio(
    state: &ParameterState,
    component: usize,
    row: usize,
    col: usize,
    mode: WeightMode,
) -> f64 {
    match mode {
        WeightMode::Spatial => state.log_delta[[component, col]] - state.log_delta[[component, row]],
        WeightMode::Temporal => state.log_psi[[component, col]] - state.log_psi[[component, row]],
    }
}

/// Pairwise relative-weight table for one component: entry (row, col) is
/// the per-draw ratio `weight_col / weight_row`, summarized. Diagonals are
/// exactly one.
#[derive(Debug, Clone)]
pub struct WeightRatioTable {
    pub component: usize,
    /// Disease ids in the component, ascending; indexes the table.
    pub diseases: Vec<usize>,
    pub entries: Vec<Vec<PosteriorSummary>>,
}

pub fn weight_ratio_table(
    chains: &[ChainOutput],
    spec: &ModelSpec,
    component: usize,
    mode: WeightMode,
) -> Result<WeightRatioTable> {
    if component >= spec.n_components() {
        return Err(Error::Domain(format!(
            "component {component} out of range for {} components",
            spec.n_components()
        )));
    }
    let diseases = spec.component_map.diseases_in(component);
    if diseases.len() < 2 {
        return Err(Error::Domain(format!(
            "component {component} has fewer than 2 diseases"
        )));
    }
    let total: usize = chains.iter().map(|c| c.draws.len()).sum();
    if total == 0 {
        return Err(Error::EmptyDraws);
    }
    let mut entries = Vec::with_capacity(diseases.len());
    for &k_row in &diseases {
        let mut row = Vec::with_capacity(diseases.len());
        for &k_col in &diseases {
            if k_row == k_col {
                row.push(PosteriorSummary::constant(1.0, total));
            } else {
                let draws = pooled_draws(chains, |s| {
                    weight_log_ratio(s, component, k_row, k_col, mode).exp()
                });
                row.push(summarize(&draws)?);
            }
        }
        entries.push(row);
    }
    Ok(WeightRatioTable {
        component,
        diseases,
        entries,
    })
}

/// Per-period summaries of the temporal relative risk `exp(phi_lj)` of one
/// component.
pub fn temporal_rr_table(
    chains: &[ChainOutput],
    spec: &ModelSpec,
    component: usize,
) -> Result<Vec<PosteriorSummary>> {
    if component >= spec.n_components() {
        return Err(Error::Domain(format!("component {component} out of range")));
    }
    (0..spec.n_periods)
        .map(|j| summarize(&pooled_draws(chains, |s| s.phi[[component, j]].exp())))
        .collect()
}

/// Per-area summaries of the spatial relative risk `exp(lambda_li)` of one
/// component.
pub fn spatial_rr_table(
    chains: &[ChainOutput],
    spec: &ModelSpec,
    component: usize,
) -> Result<Vec<PosteriorSummary>> {
    if component >= spec.n_components() {
        return Err(Error::Domain(format!("component {component} out of range")));
    }
    (0..spec.n_areas)
        .map(|i| summarize(&pooled_draws(chains, |s| s.lambda[[component, i]].exp())))
        .collect()
}

/// Cellwise posterior summaries of the relative risk `theta_ijk`, for maps.
pub fn area_rr_map_data(
    chains: &[ChainOutput],
    spec: &ModelSpec,
) -> Result<Array3<PosteriorSummary>> {
    let total: usize = chains.iter().map(|c| c.draws.len()).sum();
    if total == 0 {
        return Err(Error::EmptyDraws);
    }
    let dims = (spec.n_areas, spec.n_periods, spec.n_diseases);
    let mut per_cell: Vec<Vec<f64>> = vec![Vec::with_capacity(total); dims.0 * dims.1 * dims.2];
    for c in chains {
        for state in &c.draws {
            let log_rr = log_relative_risk_field(state, spec);
            for (slot, &v) in per_cell.iter_mut().zip(log_rr.iter()) {
                slot.push(v.exp());
            }
        }
    }
    let summaries: Vec<PosteriorSummary> = per_cell
        .iter()
        .map(|draws| summarize(draws))
        .collect::<Result<_>>()?;
    Array3::from_shape_vec(dims, summaries)
        .map_err(|e| Error::Dimension(format!("summary tensor shape: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ComponentMap;
    use crate::mcmc::McmcConfig;
    use crate::model::{deviance, ModelSpec, Variant};
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn spec2() -> ModelSpec {
        let map = ComponentMap::new(
            arr2(&[[true, true, false], [false, true, true]]),
            vec!["c1".into(), "c2".into()],
        )
        .unwrap();
        ModelSpec::new(Variant::A, map, 2, 2, 3).unwrap()
    }

    fn chain_of(states: Vec<ParameterState>, data: &CancerDataset, spec: &ModelSpec) -> ChainOutput {
        let deviances = states.iter().map(|s| deviance(data, s, spec)).collect();
        ChainOutput {
            draws: states,
            deviance: deviances,
            acceptance_rates: vec![],
            seed: 0,
            chain_index: 0,
            config: McmcConfig::default(),
        }
    }

    fn tiny_data(spec: &ModelSpec, seed: u64) -> CancerDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = (spec.n_areas, spec.n_periods, spec.n_diseases);
        CancerDataset::new(
            Array3::from_shape_fn(dims, |_| rng.random_range(0u64..20)),
            Array3::from_shape_fn(dims, |_| 4.0 + rng.random::<f64>() * 6.0),
            (0..dims.0).map(|i| format!("a{i}")).collect(),
            (0..dims.1).map(|j| format!("p{j}")).collect(),
            (0..dims.2).map(|k| format!("d{k}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn summarize_interpolation_rule() {
        let s = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(s.median, 2.0);
        assert_abs_diff_eq!(s.lower, 1.05, epsilon = 1e-12);
        assert_abs_diff_eq!(s.upper, 2.95, epsilon = 1e-12);
        let c = summarize(&[4.0, 4.0, 4.0]).unwrap();
        assert_eq!((c.lower, c.median, c.upper), (4.0, 4.0, 4.0));
        assert!(matches!(summarize(&[]), Err(Error::EmptyDraws)));
    }

    #[test]
    fn summarize_normal_quantiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let s = summarize(&draws).unwrap();
        assert!((s.lower + 1.96).abs() < 0.02, "lower {}", s.lower);
        assert!((s.upper - 1.96).abs() < 0.02, "upper {}", s.upper);
    }

    #[test]
    fn gelman_rubin_identical_chains() {
        let seq: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let psrf = gelman_rubin(&[seq.clone(), seq]).unwrap();
        let n = 50.0f64;
        assert_abs_diff_eq!(psrf, ((n - 1.0) / n).sqrt(), epsilon = 1e-12);
        assert!(psrf < 1.0);
    }

    #[test]
    fn gelman_rubin_iid_normal_streams_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let chain = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..10_000)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        };
        let psrf = gelman_rubin(&[chain(&mut rng), chain(&mut rng)]).unwrap();
        assert!((0.99..=1.02).contains(&psrf), "psrf {psrf}");
    }

    #[test]
    fn gelman_rubin_spreadsheet_oracle() {
        // two chains with means 0 and 10, sample variance 1, n = 100
        let n = 100usize;
        let base: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mean = base.iter().sum::<f64>() / n as f64;
        let sd = sample_variance(&base).sqrt();
        let c1: Vec<f64> = base.iter().map(|x| (x - mean) / sd).collect();
        let c2: Vec<f64> = c1.iter().map(|x| x + 10.0).collect();
        let psrf = gelman_rubin(&[c1.clone(), c2.clone()]).unwrap();
        // independent spreadsheet-style arithmetic
        let w = (sample_variance(&c1) + sample_variance(&c2)) / 2.0;
        let means = [
            c1.iter().sum::<f64>() / n as f64,
            c2.iter().sum::<f64>() / n as f64,
        ];
        let mean_of_means = (means[0] + means[1]) / 2.0;
        let b = n as f64
            * ((means[0] - mean_of_means).powi(2) + (means[1] - mean_of_means).powi(2))
            / (2.0 - 1.0);
        let nf = n as f64;
        let oracle = (((nf - 1.0) / nf * w + b / nf) / w).sqrt();
        assert_abs_diff_eq!(psrf, oracle, epsilon = 1e-12);
        assert!(psrf > 5.0);
    }

    #[test]
    fn gelman_rubin_errors() {
        assert!(gelman_rubin(&[vec![1.0, 2.0]]).is_err());
        assert!(matches!(
            gelman_rubin(&[vec![1.0, 1.0], vec![1.0, 1.0]]),
            Err(Error::DegenerateChains)
        ));
    }

    #[test]
    fn dic_degenerate_chain_has_zero_pd() {
        let spec = spec2();
        let data = tiny_data(&spec, 1);
        let mut state = ParameterState::null(&spec);
        state.alpha = vec![0.3, -0.2, 0.1];
        let chain = chain_of(vec![state; 25], &data, &spec);
        let result = dic(&data, &spec, &[chain]).unwrap();
        assert_eq!(result.p_d, 0.0);
        assert_eq!(result.dic, result.d_bar);
    }

    #[test]
    fn dic_identity_holds_bit_exactly() {
        let spec = spec2();
        let data = tiny_data(&spec, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states: Vec<ParameterState> = (0..40)
            .map(|_| {
                let mut s = ParameterState::null(&spec);
                s.alpha.iter_mut().for_each(|a| *a = rng.random::<f64>() - 0.5);
                s
            })
            .collect();
        let chain = chain_of(states, &data, &spec);
        let result = dic(&data, &spec, &[chain.clone()]).unwrap();
        assert_eq!(result.dic.to_bits(), (result.d_bar + result.p_d).to_bits());
        assert!(result.p_d > 0.0);
        // d_bar recomputable from the stored per-draw deviances
        let mut m = RunningMean::new();
        chain.deviance.iter().for_each(|&d| m.push(d));
        assert_eq!(result.d_bar.to_bits(), m.mean.to_bits());
    }

    #[test]
    fn weight_ratio_diagonals_and_antisymmetry() {
        let spec = spec2();
        let data = tiny_data(&spec, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let states: Vec<ParameterState> = (0..30)
            .map(|_| {
                let mut s = ParameterState::null(&spec);
                for l in 0..2 {
                    for k in spec.component_map.diseases_in(l) {
                        s.log_delta[[l, k]] = rng.random::<f64>() - 0.5;
                        s.log_psi[[l, k]] = rng.random::<f64>() - 0.5;
                    }
                }
                s
            })
            .collect();
        let chain = chain_of(states.clone(), &data, &spec);
        let table = weight_ratio_table(&[chain], &spec, 0, WeightMode::Spatial).unwrap();
        for (r, row) in table.entries.iter().enumerate() {
            let diag = row[r];
            assert_eq!((diag.lower, diag.median, diag.upper), (1.0, 1.0, 1.0));
        }
        // per-draw antisymmetry: exact on the log scale, so the composed
        // ratio product is exp(0) = 1 exactly; the direct float product is
        // within one ulp
        let ks = table.diseases.clone();
        for s in &states {
            let d_rc = weight_log_ratio(s, 0, ks[0], ks[1], WeightMode::Spatial);
            let d_cr = weight_log_ratio(s, 0, ks[1], ks[0], WeightMode::Spatial);
            assert_eq!(d_rc + d_cr, 0.0);
            assert_eq!((d_rc + d_cr).exp(), 1.0);
            assert!((d_rc.exp() * d_cr.exp() - 1.0).abs() <= f64::EPSILON);
        }
        assert!(weight_ratio_table(&[], &spec, 0, WeightMode::Spatial).is_err());
        assert!(weight_ratio_table(&[chain_of(states, &data, &spec)], &spec, 9, WeightMode::Spatial).is_err());
    }

    #[test]
    fn temporal_table_is_unity_for_zero_phi() {
        let spec = spec2();
        let data = tiny_data(&spec, 6);
        let chain = chain_of(vec![ParameterState::null(&spec); 10], &data, &spec);
        let table = temporal_rr_table(&[chain], &spec, 1).unwrap();
        for s in table {
            assert_eq!((s.lower, s.median, s.upper), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn centered_phi_has_unit_geometric_mean_per_draw() {
        let spec = spec2();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut state = ParameterState::null(&spec);
        for l in 0..2 {
            for j in 0..spec.n_periods {
                state.phi[[l, j]] = rng.random::<f64>() - 0.5;
            }
        }
        let centered = crate::mcmc::recenter(&state, &spec, &[vec![0, 1]]);
        for l in 0..2 {
            let product: f64 = (0..spec.n_periods)
                .map(|j| centered.phi[[l, j]].exp())
                .product();
            assert_abs_diff_eq!(product, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rr_map_degenerate_chain_gives_exp_alpha() {
        let spec = spec2();
        let data = tiny_data(&spec, 8);
        let mut state = ParameterState::null(&spec);
        state.alpha = vec![0.5, -0.25, 0.0];
        let chain = chain_of(vec![state; 7], &data, &spec);
        let map = area_rr_map_data(&[chain], &spec).unwrap();
        for ((_, _, k), s) in map.indexed_iter() {
            let expect = [0.5f64, -0.25, 0.0][k].exp();
            assert_abs_diff_eq!(s.median, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn median_equivariance_under_exp() {
        // odd draw count puts the median exactly on an order statistic
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logs: Vec<f64> = (0..101).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let exps: Vec<f64> = logs.iter().map(|v| v.exp()).collect();
        let m_log = summarize(&logs).unwrap().median;
        let m_exp = summarize(&exps).unwrap().median;
        assert_abs_diff_eq!(m_exp, m_log.exp(), epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn psrf_affine_invariance(a in 0.1f64..10.0, b in -5.0f64..5.0, seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let chains: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..40).map(|_| rng.random::<f64>()).collect())
                .collect();
            let p1 = gelman_rubin(&chains).unwrap();
            let mapped: Vec<Vec<f64>> = chains
                .iter()
                .map(|c| c.iter().map(|x| a * x + b).collect())
                .collect();
            let p2 = gelman_rubin(&mapped).unwrap();
            prop_assert!((p1 - p2).abs() < 1e-9);
        }

        #[test]
        fn quantiles_are_monotone_in_p(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draws: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
            draws.sort_by(f64::total_cmp);
            let mut last = f64::NEG_INFINITY;
            for p in [0.0, 0.025, 0.25, 0.5, 0.75, 0.975, 1.0] {
                let q = quantile_sorted(&draws, p);
                prop_assert!(q >= last);
                last = q;
            }
        }
    }
}
