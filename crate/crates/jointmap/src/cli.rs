//! Command-line front end: `fit`, `simulate`, `compare`, `export-geojson`
//! and `expected` subcommands over JSON run configs.
//!
//! Configs are plain JSON documents; `--set key.path=value` overrides any
//! field before deserialization, and dedicated flags (`--out`, `--chains`,
//! `--seed`) override in turn. Seeds and the resolved config are echoed to
//! `run_meta.json`, and all numeric output is deterministic given the
//! config, so reruns produce byte-identical tables.

use crate::dataset::{
    compute_expected, default_component_map_for, load_counts_path, load_population, CancerDataset,
    ComponentMap, CountsTable, CANONICAL_DISEASES,
};
use crate::diagnostics::{
    area_rr_map_data, dic, gelman_rubin, scalar_draws, spatial_rr_table, temporal_rr_table,
    weight_ratio_table, DicResult, WeightMode,
};
use crate::graph::{rw1_structure, AdjacencyGraph};
use crate::mcmc::{ChainOutput, McmcConfig, Sampler};
use crate::model::{HyperParameters, ModelSpec, Variant};
use crate::simulate::{draw_true_state, simulate_dataset, SimulationRecipe};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

/// PSRF above this is flagged as possible nonconvergence (not an error).
pub const PSRF_FLAG_THRESHOLD: f64 = 1.1;

#[derive(Parser, Debug)]
#[command(
    name = "jointmap",
    version,
    about = "Joint spatio-temporal shared-component disease mapping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one model variant and write draws, summaries and diagnostics
    Fit(ConfigArgs),
    /// Generate a synthetic dataset plus its ground-truth document
    Simulate(ConfigArgs),
    /// Fit variants A-D on one dataset and tabulate DIC
    Compare(ConfigArgs),
    /// Join fitted relative risks onto GeoJSON features
    ExportGeojson(ExportArgs),
    /// Compute expected counts from populations by internal standardization
    Expected(ExpectedArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON config file
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. --set mcmc.thin=5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (overrides the config's `out`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of chains (overrides `mcmc.n_chains`)
    #[arg(long)]
    chains: Option<usize>,
    /// RNG seed (overrides `mcmc.seed` / `seed`)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// summary_rr.csv produced by `fit`
    #[arg(long)]
    summary: PathBuf,
    /// GeoJSON FeatureCollection with one feature per area
    #[arg(long)]
    geojson: PathBuf,
    /// Period label to export
    #[arg(long)]
    period: String,
    /// Disease label to export
    #[arg(long)]
    disease: String,
    /// Feature property holding the area label
    #[arg(long, default_value = "name")]
    label_key: String,
    /// Output GeoJSON path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExpectedArgs {
    /// Counts CSV `area,period,disease,count`
    #[arg(long)]
    counts: PathBuf,
    /// Population CSV `area,period,population`
    #[arg(long)]
    population: PathBuf,
    /// Output CSV path (counts plus an `expected` column)
    #[arg(long)]
    out: PathBuf,
}

/// Fit/compare run configuration (JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub counts: PathBuf,
    pub adjacency: PathBuf,
    #[serde(default)]
    pub population: Option<PathBuf>,
    pub variant: Variant,
    /// Disease-label lists, one per shared component; defaults to the
    /// packaged seven-cancer map when omitted.
    #[serde(default)]
    pub components: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub component_labels: Option<Vec<String>>,
    #[serde(default)]
    pub period_order: Option<Vec<String>>,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default = "default_out_dir")]
    pub out: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Simulation configuration (JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Adjacency file; when omitted a random connected graph is generated.
    #[serde(default)]
    pub adjacency: Option<PathBuf>,
    #[serde(default = "default_sim_areas")]
    pub n_areas: usize,
    #[serde(default = "default_edge_probability")]
    pub edge_probability: f64,
    #[serde(default = "default_sim_periods")]
    pub n_periods: usize,
    #[serde(default)]
    pub diseases: Option<Vec<String>>,
    #[serde(default = "default_sim_diseases")]
    pub n_diseases: usize,
    #[serde(default)]
    pub components: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub component_labels: Option<Vec<String>>,
    pub variant: Variant,
    #[serde(default = "default_field_sd")]
    pub field_sd: f64,
    #[serde(default = "default_expected_per_cell")]
    pub expected_per_cell: f64,
    #[serde(default = "default_sim_seed")]
    pub seed: u64,
    /// Echoed into the generated fit config.
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default = "default_out_dir")]
    pub out: PathBuf,
}

fn default_sim_areas() -> usize {
    10
}
fn default_edge_probability() -> f64 {
    0.3
}
fn default_sim_periods() -> usize {
    5
}
fn default_sim_diseases() -> usize {
    3
}
fn default_field_sd() -> f64 {
    0.3
}
fn default_expected_per_cell() -> f64 {
    200.0
}
fn default_sim_seed() -> u64 {
    1
}

/// Entry point used by the binary and by tests.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    match cli.command {
        Command::Fit(args) => cmd_fit(load_run_config(&args)?),
        Command::Compare(args) => cmd_compare(load_run_config(&args)?),
        Command::Simulate(args) => cmd_simulate(load_sim_config(&args)?),
        Command::ExportGeojson(args) => cmd_export_geojson(&args),
        Command::Expected(args) => cmd_expected(&args),
    }
}

fn load_json(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Applies one `key.path=value` override to a JSON document, creating
/// intermediate objects as needed. Values parse as JSON when possible and
/// fall back to strings.
fn apply_set(doc: &mut serde_json::Value, setting: &str) -> Result<()> {
    let (path, raw) = setting
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{setting}`"))?;
    let value = serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            bail!("--set path `{path}` walks through a non-object");
        }
        let map = cursor.as_object_mut().expect("checked above");
        if depth + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split never yields zero parts")
}

fn load_run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut doc = load_json(&args.config)?;
    for setting in &args.sets {
        apply_set(&mut doc, setting)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(doc).context("invalid run config")?;
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(chains) = args.chains {
        cfg.mcmc.n_chains = chains;
    }
    if let Some(seed) = args.seed {
        cfg.mcmc.seed = seed;
    }
    Ok(cfg)
}

fn load_sim_config(args: &ConfigArgs) -> Result<SimConfig> {
    let mut doc = load_json(&args.config)?;
    for setting in &args.sets {
        apply_set(&mut doc, setting)?;
    }
    let mut cfg: SimConfig = serde_json::from_value(doc).context("invalid simulate config")?;
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(chains) = args.chains {
        cfg.mcmc.n_chains = chains;
    }
    Ok(cfg)
}

fn component_labels_or_default(n: usize, labels: Option<Vec<String>>) -> Vec<String> {
    labels.unwrap_or_else(|| (1..=n).map(|l| format!("comp{l}")).collect())
}

fn resolve_component_map(
    components: &Option<Vec<Vec<String>>>,
    component_labels: Option<Vec<String>>,
    disease_labels: &[String],
) -> Result<ComponentMap> {
    match components {
        Some(lists) => Ok(ComponentMap::from_disease_lists(
            lists,
            component_labels_or_default(lists.len(), component_labels),
            disease_labels,
        )?),
        None => default_component_map_for(disease_labels).map_err(|e| {
            anyhow!(
                "{e}; specify `components` explicitly when the diseases are not \
                 the seven canonical cancers"
            )
        }),
    }
}

fn resolve_dataset(table: CountsTable, population_path: Option<&Path>) -> Result<CancerDataset> {
    if table.expected.is_none() {
        if let Some(path) = population_path {
            let file =
                fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let pop = load_population(file, &table.area_labels, &table.period_labels)?;
            let e = compute_expected(&pop, &table.y, &table.period_labels, &table.disease_labels)?;
            return Ok(CancerDataset::new(
                table.y,
                e,
                table.area_labels,
                table.period_labels,
                table.disease_labels,
            )?);
        }
    }
    Ok(table.into_dataset()?)
}

/// Everything `fit` and `compare` share: data loading, alignment, sampling.
struct FittedModel {
    spec: ModelSpec,
    data: CancerDataset,
    chains: Vec<ChainOutput>,
    n_islands: usize,
}

fn fit_chains(cfg: &RunConfig, variant: Variant) -> Result<FittedModel> {
    let graph_text = fs::read_to_string(&cfg.adjacency)
        .with_context(|| format!("reading adjacency {}", cfg.adjacency.display()))?;
    let graph = AdjacencyGraph::parse(&graph_text)?;
    let table = load_counts_path(&cfg.counts, cfg.period_order.as_deref())
        .with_context(|| format!("loading counts {}", cfg.counts.display()))?;
    let data = resolve_dataset(table, cfg.population.as_deref())?;
    let data = data.align_areas(graph.labels())?;
    let map =
        resolve_component_map(&cfg.components, cfg.component_labels.clone(), data.disease_labels())?;
    let spec = ModelSpec::new(
        variant,
        map,
        data.n_areas(),
        data.n_periods(),
        data.n_diseases(),
    )?;
    let hyper = HyperParameters::default_for(data.n_diseases())?;
    let q = graph.structure_matrix();
    let r = rw1_structure(data.n_periods())?;
    let n_islands = graph.connected_components().len();
    let chains = Sampler::new(&data, &spec, &hyper, &q, &r, cfg.mcmc.clone())?.run_all()?;
    Ok(FittedModel {
        spec,
        data,
        chains,
        n_islands,
    })
}

struct PsrfRow {
    parameter: String,
    psrf: f64,
}

fn psrf_report(fitted: &FittedModel) -> Vec<PsrfRow> {
    let spec = &fitted.spec;
    let chains = &fitted.chains;
    if chains.len() < 2 {
        return Vec::new();
    }
    let mut rows = Vec::new();
    let push = |rows: &mut Vec<PsrfRow>, name: String, draws: Vec<Vec<f64>>| {
        let psrf = gelman_rubin(&draws).unwrap_or(f64::NAN);
        rows.push(PsrfRow {
            parameter: name,
            psrf,
        });
    };
    let diseases = fitted.data.disease_labels();
    for (k, label) in diseases.iter().enumerate() {
        push(
            &mut rows,
            format!("alpha[{label}]"),
            scalar_draws(chains, |s| s.alpha[k]),
        );
    }
    for l in 0..spec.n_components() {
        let comp = &spec.component_map.component_labels()[l];
        let in_l = spec.component_map.diseases_in(l);
        for (a_idx, &row) in in_l.iter().enumerate() {
            for &col in in_l.iter().skip(a_idx + 1) {
                push(
                    &mut rows,
                    format!("delta_ratio[{comp}:{}/{}]", diseases[col], diseases[row]),
                    scalar_draws(chains, |s| {
                        (s.log_delta[[l, col]] - s.log_delta[[l, row]]).exp()
                    }),
                );
                push(
                    &mut rows,
                    format!("psi_ratio[{comp}:{}/{}]", diseases[col], diseases[row]),
                    scalar_draws(chains, |s| {
                        (s.log_psi[[l, col]] - s.log_psi[[l, row]]).exp()
                    }),
                );
            }
        }
    }
    rows.push(PsrfRow {
        parameter: "deviance".into(),
        psrf: gelman_rubin(&chains.iter().map(|c| c.deviance.clone()).collect::<Vec<_>>())
            .unwrap_or(f64::NAN),
    });
    rows
}

fn write_summary_rr(path: &Path, fitted: &FittedModel) -> Result<()> {
    let summaries = area_rr_map_data(&fitted.chains, &fitted.spec)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["area", "period", "disease", "median", "lo", "hi"])?;
    for (i, area) in fitted.data.area_labels().iter().enumerate() {
        for (j, period) in fitted.data.period_labels().iter().enumerate() {
            for (k, disease) in fitted.data.disease_labels().iter().enumerate() {
                let s = summaries[[i, j, k]];
                w.write_record([
                    area.as_str(),
                    period.as_str(),
                    disease.as_str(),
                    &s.median.to_string(),
                    &s.lower.to_string(),
                    &s.upper.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_component_tables(out: &Path, fitted: &FittedModel) -> Result<()> {
    let spec = &fitted.spec;
    let mut w = csv::Writer::from_path(out.join("components_spatial.csv"))?;
    w.write_record(["component", "area", "median", "lo", "hi"])?;
    for l in 0..spec.n_components() {
        let comp = &spec.component_map.component_labels()[l];
        for (i, s) in spatial_rr_table(&fitted.chains, spec, l)?.iter().enumerate() {
            w.write_record([
                comp.as_str(),
                fitted.data.area_labels()[i].as_str(),
                &s.median.to_string(),
                &s.lower.to_string(),
                &s.upper.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("components_temporal.csv"))?;
    w.write_record(["component", "period", "median", "lo", "hi"])?;
    for l in 0..spec.n_components() {
        let comp = &spec.component_map.component_labels()[l];
        for (j, s) in temporal_rr_table(&fitted.chains, spec, l)?.iter().enumerate() {
            w.write_record([
                comp.as_str(),
                fitted.data.period_labels()[j].as_str(),
                &s.median.to_string(),
                &s.lower.to_string(),
                &s.upper.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_weight_tables(out: &Path, fitted: &FittedModel) -> Result<()> {
    let spec = &fitted.spec;
    for (mode, file) in [
        (WeightMode::Spatial, "weights_spatial.csv"),
        (WeightMode::Temporal, "weights_temporal.csv"),
    ] {
        let mut w = csv::Writer::from_path(out.join(file))?;
        w.write_record([
            "component",
            "row_disease",
            "col_disease",
            "median",
            "lo",
            "hi",
            "ci_excludes_one",
        ])?;
        for l in 0..spec.n_components() {
            let comp = &spec.component_map.component_labels()[l];
            let table = weight_ratio_table(&fitted.chains, spec, l, mode)?;
            for (r_idx, &k_row) in table.diseases.iter().enumerate() {
                for (c_idx, &k_col) in table.diseases.iter().enumerate() {
                    let s = table.entries[r_idx][c_idx];
                    w.write_record([
                        comp.as_str(),
                        fitted.data.disease_labels()[k_row].as_str(),
                        fitted.data.disease_labels()[k_col].as_str(),
                        &s.median.to_string(),
                        &s.lower.to_string(),
                        &s.upper.to_string(),
                        &s.excludes_one().to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn write_psrf(path: &Path, rows: &[PsrfRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["parameter", "psrf", "flagged"])?;
    for row in rows {
        w.write_record([
            row.parameter.as_str(),
            &row.psrf.to_string(),
            &(row.psrf > PSRF_FLAG_THRESHOLD).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Draw files: one CSV per chain with the post-burn-in sweep index, a
/// parameter path string, and the value. Diff-able and language-neutral.
fn write_draws(out: &Path, fitted: &FittedModel) -> Result<()> {
    let spec = &fitted.spec;
    let data = &fitted.data;
    let (areas, periods, diseases) = (
        data.area_labels(),
        data.period_labels(),
        data.disease_labels(),
    );
    let comps = spec.component_map.component_labels();
    for chain in &fitted.chains {
        let path = out.join(format!("draws_chain_{}.csv", chain.chain_index));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["iteration", "parameter", "value"])?;
        let thin = chain.config.thin;
        let emit = |w: &mut csv::Writer<fs::File>,
                        iter: usize,
                        name: String,
                        value: f64|
         -> Result<()> {
            w.write_record([&iter.to_string(), &name, &value.to_string()])?;
            Ok(())
        };
        for (d_idx, state) in chain.draws.iter().enumerate() {
            let iter = (d_idx + 1) * thin;
            for (k, d) in diseases.iter().enumerate() {
                emit(&mut w, iter, format!("alpha[{d}]"), state.alpha[k])?;
            }
            for (l, comp) in comps.iter().enumerate() {
                for (i, a) in areas.iter().enumerate() {
                    emit(&mut w, iter, format!("lambda[{comp}][{a}]"), state.lambda[[l, i]])?;
                }
                for (j, p) in periods.iter().enumerate() {
                    emit(&mut w, iter, format!("phi[{comp}][{p}]"), state.phi[[l, j]])?;
                }
                for k in spec.component_map.diseases_in(l) {
                    emit(
                        &mut w,
                        iter,
                        format!("log_delta[{comp}][{}]", diseases[k]),
                        state.log_delta[[l, k]],
                    )?;
                    emit(
                        &mut w,
                        iter,
                        format!("log_psi[{comp}][{}]", diseases[k]),
                        state.log_psi[[l, k]],
                    )?;
                }
                emit(&mut w, iter, format!("tau_lambda[{comp}]"), state.tau_lambda[l])?;
                emit(&mut w, iter, format!("tau_phi[{comp}]"), state.tau_phi[l])?;
            }
            if let Some(eta) = &state.eta {
                for (i, a) in areas.iter().enumerate() {
                    for (j, p) in periods.iter().enumerate() {
                        emit(&mut w, iter, format!("eta[{a}][{p}]"), eta[[i, j]])?;
                    }
                }
                emit(&mut w, iter, "tau_eta".into(), state.tau_eta.unwrap_or(f64::NAN))?;
            }
            if let Some(eps) = &state.epsilon {
                for (i, a) in areas.iter().enumerate() {
                    for (j, p) in periods.iter().enumerate() {
                        for (k, d) in diseases.iter().enumerate() {
                            emit(
                                &mut w,
                                iter,
                                format!("epsilon[{a}][{p}][{d}]"),
                                eps[[i, j, k]],
                            )?;
                        }
                    }
                }
                if let Some(prec) = &state.prec_epsilon {
                    for a in 0..prec.dim() {
                        for b in a..prec.dim() {
                            emit(
                                &mut w,
                                iter,
                                format!("prec_epsilon[{}][{}]", diseases[a], diseases[b]),
                                prec.entry(a, b),
                            )?;
                        }
                    }
                }
            }
            emit(&mut w, iter, "deviance".into(), chain.deviance[d_idx])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn write_run_meta(
    path: &Path,
    cfg: &RunConfig,
    fitted: &FittedModel,
    dic_result: Option<&DicResult>,
    flagged: &[String],
) -> Result<()> {
    let acceptance: Vec<serde_json::Value> = fitted
        .chains
        .iter()
        .map(|c| {
            serde_json::json!({
                "chain": c.chain_index,
                "rates": c.acceptance_rates
                    .iter()
                    .map(|(k, v)| (k.clone(), serde_json::json!(v)))
                    .collect::<serde_json::Map<String, serde_json::Value>>(),
            })
        })
        .collect();
    let meta = serde_json::json!({
        "tool": "jointmap",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "seed": cfg.mcmc.seed,
        "variant": cfg.variant.to_string(),
        "n_areas": fitted.data.n_areas(),
        "n_periods": fitted.data.n_periods(),
        "n_diseases": fitted.data.n_diseases(),
        "n_components": fitted.spec.n_components(),
        "n_islands": fitted.n_islands,
        "islands_flag": fitted.n_islands > 1,
        "n_retained_per_chain": fitted.chains.first().map(|c| c.draws.len()).unwrap_or(0),
        "acceptance_rates": acceptance,
        "dic": dic_result,
        "psrf_flagged": flagged,
    });
    fs::write(path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn cmd_fit(cfg: RunConfig) -> Result<()> {
    let fitted = fit_chains(&cfg, cfg.variant)?;
    let out = &cfg.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    write_summary_rr(&out.join("summary_rr.csv"), &fitted)?;
    write_component_tables(out, &fitted)?;
    write_weight_tables(out, &fitted)?;
    let psrf_rows = psrf_report(&fitted);
    write_psrf(&out.join("psrf.csv"), &psrf_rows)?;
    write_draws(out, &fitted)?;

    let dic_result = dic(&fitted.data, &fitted.spec, &fitted.chains)?;
    fs::write(
        out.join("dic.json"),
        serde_json::to_string_pretty(&dic_result)?,
    )?;

    let flagged: Vec<String> = psrf_rows
        .iter()
        .filter(|r| r.psrf > PSRF_FLAG_THRESHOLD)
        .map(|r| r.parameter.clone())
        .collect();
    write_run_meta(
        &out.join("run_meta.json"),
        &cfg,
        &fitted,
        Some(&dic_result),
        &flagged,
    )?;

    println!(
        "fit variant {} | {} areas x {} periods x {} diseases, {} chains x {} retained draws",
        cfg.variant,
        fitted.data.n_areas(),
        fitted.data.n_periods(),
        fitted.data.n_diseases(),
        fitted.chains.len(),
        fitted.chains.first().map(|c| c.draws.len()).unwrap_or(0),
    );
    println!(
        "DIC = {:.2} (d_bar = {:.2}, p_d = {:.2})",
        dic_result.dic, dic_result.d_bar, dic_result.p_d
    );
    if fitted.chains.len() < 2 {
        println!("PSRF skipped: needs at least 2 chains");
    } else if flagged.is_empty() {
        println!("PSRF below {PSRF_FLAG_THRESHOLD} for all reported scalars");
    } else {
        println!("PSRF above {PSRF_FLAG_THRESHOLD} (possible nonconvergence): {}", flagged.join(", "));
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn cmd_compare(cfg: RunConfig) -> Result<()> {
    let out = &cfg.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows: Vec<(Variant, DicResult)> = Vec::new();
    for variant in Variant::ALL {
        let fitted = fit_chains(&cfg, variant)?;
        let result = dic(&fitted.data, &fitted.spec, &fitted.chains)?;
        rows.push((variant, result));
    }
    let best = rows
        .iter()
        .map(|(_, r)| r.dic)
        .fold(f64::INFINITY, f64::min);

    let mut w = csv::Writer::from_path(out.join("dic_table.csv"))?;
    w.write_record(["model", "d_bar", "p_d", "dic", "best"])?;
    for (variant, r) in &rows {
        w.write_record([
            &variant.to_string(),
            &r.d_bar.to_string(),
            &r.p_d.to_string(),
            &r.dic.to_string(),
            &(r.dic == best).to_string(),
        ])?;
    }
    w.flush()?;

    println!("{:<8} {:>12} {:>10} {:>12}", "Model", "D_bar", "p_D", "DIC");
    for (variant, r) in &rows {
        let marker = if r.dic == best { " <- best" } else { "" };
        println!(
            "{:<8} {:>12.2} {:>10.2} {:>12.2}{marker}",
            variant.to_string(),
            r.d_bar,
            r.p_d,
            r.dic
        );
    }
    println!("table in {}", out.join("dic_table.csv").display());
    Ok(())
}

/// Deterministic random connected graph: a random spanning tree plus
/// independent extra edges.
fn generate_graph(n_areas: usize, edge_probability: f64, seed: u64) -> Result<AdjacencyGraph> {
    if n_areas == 0 {
        bail!("n_areas must be positive");
    }
    let labels: Vec<String> = (1..=n_areas).map(|i| format!("area{i:02}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut edges = Vec::new();
    for v in 1..n_areas {
        let u = rng.random_range(0..v);
        edges.push((u, v));
    }
    for i in 0..n_areas {
        for j in i + 1..n_areas {
            if rng.random::<f64>() < edge_probability && !edges.contains(&(i, j)) {
                edges.push((i, j));
            }
        }
    }
    Ok(AdjacencyGraph::new(labels, &edges)?)
}

fn cmd_simulate(cfg: SimConfig) -> Result<()> {
    let out = &cfg.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let graph = match &cfg.adjacency {
        Some(path) => AdjacencyGraph::parse(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => generate_graph(cfg.n_areas, cfg.edge_probability, cfg.seed)?,
    };
    let disease_labels: Vec<String> = match &cfg.diseases {
        Some(labels) => labels.clone(),
        None if cfg.components.is_none() && cfg.n_diseases == 7 => {
            CANONICAL_DISEASES.iter().map(|s| s.to_string()).collect()
        }
        None => (1..=cfg.n_diseases).map(|k| format!("d{k}")).collect(),
    };
    let map = resolve_component_map(&cfg.components, cfg.component_labels.clone(), &disease_labels)?;
    let spec = ModelSpec::new(
        cfg.variant,
        map,
        graph.n_nodes(),
        cfg.n_periods,
        disease_labels.len(),
    )?;
    if !(cfg.expected_per_cell > 0.0) {
        bail!("expected_per_cell must be positive");
    }

    let mut truth_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    truth_rng.set_stream(1); // counts use stream 0 via the recipe seed
    let truth = draw_true_state(&spec, &mut truth_rng, cfg.field_sd)?;
    let expected = Array3::from_elem(
        (spec.n_areas, spec.n_periods, spec.n_diseases),
        cfg.expected_per_cell,
    );
    let period_labels: Vec<String> = (1..=cfg.n_periods).map(|j| format!("p{j:02}")).collect();
    let recipe = SimulationRecipe::new(
        spec,
        truth,
        expected,
        cfg.seed,
        graph.labels().to_vec(),
        period_labels,
        disease_labels,
    )?;
    let data = simulate_dataset(&recipe)?;

    data.write_csv_path(out.join("counts.csv"))?;
    fs::write(out.join("adjacency.txt"), graph.serialize())?;
    fs::write(
        out.join("truth.json"),
        serde_json::to_string_pretty(&recipe)?,
    )?;

    let fit_cfg = RunConfig {
        counts: out.join("counts.csv"),
        adjacency: out.join("adjacency.txt"),
        population: None,
        variant: cfg.variant,
        components: cfg.components.clone().or_else(|| {
            Some(
                (0..recipe.spec.n_components())
                    .map(|l| {
                        recipe
                            .spec
                            .component_map
                            .diseases_in(l)
                            .into_iter()
                            .map(|k| recipe.disease_labels[k].clone())
                            .collect()
                    })
                    .collect(),
            )
        }),
        component_labels: Some(recipe.spec.component_map.component_labels().to_vec()),
        period_order: None,
        mcmc: cfg.mcmc.clone(),
        out: out.join("fit"),
    };
    fs::write(
        out.join("fit_config.json"),
        serde_json::to_string_pretty(&fit_cfg)?,
    )?;

    println!(
        "simulated {} areas x {} periods x {} diseases (variant {}, seed {})",
        data.n_areas(),
        data.n_periods(),
        data.n_diseases(),
        cfg.variant,
        cfg.seed
    );
    println!(
        "wrote {}, {}, {} and {}",
        out.join("counts.csv").display(),
        out.join("adjacency.txt").display(),
        out.join("truth.json").display(),
        out.join("fit_config.json").display()
    );
    Ok(())
}

fn cmd_expected(args: &ExpectedArgs) -> Result<()> {
    let table = load_counts_path(&args.counts, None)
        .with_context(|| format!("loading counts {}", args.counts.display()))?;
    let file = fs::File::open(&args.population)
        .with_context(|| format!("opening {}", args.population.display()))?;
    let pop = load_population(file, &table.area_labels, &table.period_labels)?;
    let e = compute_expected(&pop, &table.y, &table.period_labels, &table.disease_labels)?;
    let data = CancerDataset::new(
        table.y,
        e,
        table.area_labels,
        table.period_labels,
        table.disease_labels,
    )?;
    data.write_csv_path(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_export_geojson(args: &ExportArgs) -> Result<()> {
    let mut reader = csv::Reader::from_path(&args.summary)
        .with_context(|| format!("opening {}", args.summary.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("summary CSV lacks column `{name}`"))
    };
    let (c_area, c_period, c_disease) = (col("area")?, col("period")?, col("disease")?);
    let (c_median, c_lo, c_hi) = (col("median")?, col("lo")?, col("hi")?);
    let mut by_area: std::collections::HashMap<String, (f64, f64, f64)> = Default::default();
    for record in reader.records() {
        let record = record?;
        if record.get(c_period) == Some(args.period.as_str())
            && record.get(c_disease) == Some(args.disease.as_str())
        {
            let parse = |c: usize| -> Result<f64> {
                record
                    .get(c)
                    .unwrap_or("")
                    .parse()
                    .map_err(|e| anyhow!("bad number in summary CSV: {e}"))
            };
            by_area.insert(
                record.get(c_area).unwrap_or("").to_string(),
                (parse(c_median)?, parse(c_lo)?, parse(c_hi)?),
            );
        }
    }
    if by_area.is_empty() {
        bail!(
            "no summary rows for period `{}` and disease `{}`",
            args.period,
            args.disease
        );
    }

    let text = fs::read_to_string(&args.geojson)
        .with_context(|| format!("reading {}", args.geojson.display()))?;
    let mut doc: serde_json::Value = serde_json::from_str(&text).context("parsing GeoJSON")?;
    let features = doc
        .get_mut("features")
        .and_then(|f| f.as_array_mut())
        .ok_or_else(|| anyhow!("GeoJSON has no `features` array"))?;

    let mut joined = std::collections::HashSet::new();
    let mut unmatched_features = Vec::new();
    for feature in features.iter_mut() {
        let label = feature
            .get("properties")
            .and_then(|p| p.get(&args.label_key))
            .and_then(|v| v.as_str())
            .map(str::to_string);
        let Some(label) = label else {
            unmatched_features.push("<feature without label property>".to_string());
            continue;
        };
        match by_area.get(&label) {
            Some(&(median, lo, hi)) => {
                let props = feature
                    .get_mut("properties")
                    .and_then(|p| p.as_object_mut())
                    .ok_or_else(|| anyhow!("feature properties is not an object"))?;
                props.insert("rr_median".into(), serde_json::json!(median));
                props.insert("rr_lo".into(), serde_json::json!(lo));
                props.insert("rr_hi".into(), serde_json::json!(hi));
                joined.insert(label);
            }
            None => unmatched_features.push(label),
        }
    }
    let mut missing_areas: Vec<&String> = by_area
        .keys()
        .filter(|a| !joined.contains(*a))
        .collect();
    missing_areas.sort();
    if !unmatched_features.is_empty() || !missing_areas.is_empty() {
        unmatched_features.sort();
        bail!(
            "label join failed; features without summary rows: [{}]; areas without features: [{}]",
            unmatched_features.join(", "),
            missing_areas
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        );
    }

    fs::write(&args.out, serde_json::to_string_pretty(&doc)?)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
