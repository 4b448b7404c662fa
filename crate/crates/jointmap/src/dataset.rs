//! Count-data ingestion, expected counts by internal standardization, and
//! the component-disease inclusion map.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// The seven cancers of the packaged default, in their conventional order.
pub const CANONICAL_DISEASES: [&str; 7] = [
    "esophagus",
    "stomach",
    "bladder",
    "colorectal",
    "lung",
    "prostate",
    "breast",
];

/// Observed and expected counts over areas x periods x diseases.
#[derive(Debug, Clone, PartialEq)]
pub struct CancerDataset {
    y: Array3<u64>,
    e: Array3<f64>,
    area_labels: Vec<String>,
    period_labels: Vec<String>,
    disease_labels: Vec<String>,
}

impl CancerDataset {
    pub fn new(
        y: Array3<u64>,
        e: Array3<f64>,
        area_labels: Vec<String>,
        period_labels: Vec<String>,
        disease_labels: Vec<String>,
    ) -> Result<Self> {
        let dims = y.dim();
        if e.dim() != dims {
            return Err(Error::Dimension(format!(
                "Y dims {:?} vs E dims {:?}",
                dims,
                e.dim()
            )));
        }
        if dims.0 != area_labels.len()
            || dims.1 != period_labels.len()
            || dims.2 != disease_labels.len()
        {
            return Err(Error::Dimension(format!(
                "tensor dims {:?} vs label lengths ({}, {}, {})",
                dims,
                area_labels.len(),
                period_labels.len(),
                disease_labels.len()
            )));
        }
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::Domain("dataset dimensions must be positive".into()));
        }
        for (label, list) in [
            ("area", &area_labels),
            ("period", &period_labels),
            ("disease", &disease_labels),
        ] {
            let mut seen = std::collections::HashSet::new();
            for l in list {
                if !seen.insert(l) {
                    return Err(Error::Data(format!("duplicate {label} label `{l}`")));
                }
            }
        }
        if let Some(bad) = e.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Data(format!(
                "expected counts must be strictly positive and finite, found {bad}"
            )));
        }
        Ok(Self {
            y,
            e,
            area_labels,
            period_labels,
            disease_labels,
        })
    }

    pub fn n_areas(&self) -> usize {
        self.y.dim().0
    }

    pub fn n_periods(&self) -> usize {
        self.y.dim().1
    }

    pub fn n_diseases(&self) -> usize {
        self.y.dim().2
    }

    pub fn observed(&self) -> &Array3<u64> {
        &self.y
    }

    pub fn expected(&self) -> &Array3<f64> {
        &self.e
    }

    pub fn area_labels(&self) -> &[String] {
        &self.area_labels
    }

    pub fn period_labels(&self) -> &[String] {
        &self.period_labels
    }

    pub fn disease_labels(&self) -> &[String] {
        &self.disease_labels
    }

    /// Returns a copy with areas permuted into `order`. The label sets must
    /// match exactly; this aligns a dataset with an adjacency graph.
    pub fn align_areas(&self, order: &[String]) -> Result<Self> {
        if order.len() != self.n_areas() {
            return Err(Error::Join(format!(
                "dataset has {} areas, graph has {}",
                self.n_areas(),
                order.len()
            )));
        }
        let position: HashMap<&str, usize> = self
            .area_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let mut missing = Vec::new();
        let perm: Vec<usize> = order
            .iter()
            .filter_map(|l| {
                position.get(l.as_str()).copied().or_else(|| {
                    missing.push(l.clone());
                    None
                })
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::Join(format!(
                "areas absent from the dataset: {}",
                missing.join(", ")
            )));
        }
        let (_, nj, nk) = self.y.dim();
        let mut y = Array3::zeros((order.len(), nj, nk));
        let mut e = Array3::zeros((order.len(), nj, nk));
        for (new_i, &old_i) in perm.iter().enumerate() {
            for j in 0..nj {
                for k in 0..nk {
                    y[[new_i, j, k]] = self.y[[old_i, j, k]];
                    e[[new_i, j, k]] = self.e[[old_i, j, k]];
                }
            }
        }
        Self::new(
            y,
            e,
            order.to_vec(),
            self.period_labels.clone(),
            self.disease_labels.clone(),
        )
    }

    /// Writes the dataset in the counts CSV format with an `expected` column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["area", "period", "disease", "count", "expected"])?;
        for (i, area) in self.area_labels.iter().enumerate() {
            for (j, period) in self.period_labels.iter().enumerate() {
                for (k, disease) in self.disease_labels.iter().enumerate() {
                    w.write_record([
                        area.as_str(),
                        period.as_str(),
                        disease.as_str(),
                        &self.y[[i, j, k]].to_string(),
                        &self.e[[i, j, k]].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Raw parse of a counts CSV before expected counts are resolved.
#[derive(Debug, Clone)]
pub struct CountsTable {
    pub y: Array3<u64>,
    pub expected: Option<Array3<f64>>,
    pub population: Option<Array2<f64>>,
    pub area_labels: Vec<String>,
    pub period_labels: Vec<String>,
    pub disease_labels: Vec<String>,
}

impl CountsTable {
    /// Resolves expected counts: an explicit `expected` column wins, then a
    /// population column via internal standardization.
    pub fn into_dataset(self) -> Result<CancerDataset> {
        let e = match (self.expected, &self.population) {
            (Some(e), _) => e,
            (None, Some(pop)) => compute_expected(pop, &self.y, &self.period_labels, &self.disease_labels)?,
            (None, None) => {
                return Err(Error::Data(
                    "counts file has neither an `expected` nor a `population` column; \
                     supply one or a separate population CSV"
                        .into(),
                ))
            }
        };
        CancerDataset::new(
            self.y,
            e,
            self.area_labels,
            self.period_labels,
            self.disease_labels,
        )
    }
}

fn parse_count(cell: &str, line: usize) -> Result<u64> {
    let cell = cell.trim();
    if let Ok(v) = cell.parse::<u64>() {
        return Ok(v);
    }
    match cell.parse::<f64>() {
        Ok(v) if v < 0.0 => Err(Error::Data(format!("row {line}: negative count {v}"))),
        Ok(v) if v.fract() != 0.0 => {
            Err(Error::Data(format!("row {line}: non-integer count {v}")))
        }
        Ok(v) => Ok(v as u64),
        Err(_) => Err(Error::Data(format!("row {line}: unparseable count `{cell}`"))),
    }
}

/// Loads the counts CSV `area,period,disease,count[,expected][,population]`.
///
/// Every (area, period, disease) cell must appear exactly once; the model
/// has no missing-data mechanism. Areas and diseases are ordered by first
/// appearance; periods sort lexicographically unless `period_order` is
/// given.
pub fn load_counts<R: Read>(reader: R, period_order: Option<&[String]>) -> Result<CountsTable> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(c_area), Some(c_period), Some(c_disease), Some(c_count)) = (
        col("area"),
        col("period"),
        col("disease"),
        col("count"),
    ) else {
        return Err(Error::Format(
            "counts CSV must have header columns area,period,disease,count".into(),
        ));
    };
    let c_expected = col("expected");
    let c_population = col("population");

    struct Row {
        area: String,
        period: String,
        disease: String,
        count: u64,
        expected: Option<f64>,
        population: Option<f64>,
    }

    let mut rows = Vec::new();
    for (idx, record) in csv_reader.records().enumerate() {
        let record = record?;
        let line = idx + 2; // header is line 1
        let get = |c: usize| record.get(c).unwrap_or("").to_string();
        let parse_pos = |c: usize, name: &str| -> Result<f64> {
            let cell = record.get(c).unwrap_or("").trim().to_string();
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Data(format!("row {line}: unparseable {name} `{cell}`")))?;
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Data(format!(
                    "row {line}: {name} must be strictly positive, got {v}"
                )));
            }
            Ok(v)
        };
        rows.push(Row {
            area: get(c_area),
            period: get(c_period),
            disease: get(c_disease),
            count: parse_count(record.get(c_count).unwrap_or(""), line)?,
            expected: c_expected.map(|c| parse_pos(c, "expected")).transpose()?,
            population: c_population.map(|c| parse_pos(c, "population")).transpose()?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Data("counts CSV has no data rows".into()));
    }

    let mut area_labels = Vec::new();
    let mut disease_labels = Vec::new();
    let mut periods_seen = Vec::new();
    for row in &rows {
        if !area_labels.contains(&row.area) {
            area_labels.push(row.area.clone());
        }
        if !disease_labels.contains(&row.disease) {
            disease_labels.push(row.disease.clone());
        }
        if !periods_seen.contains(&row.period) {
            periods_seen.push(row.period.clone());
        }
    }
    let period_labels: Vec<String> = match period_order {
        Some(order) => {
            let mut extra: Vec<&String> =
                periods_seen.iter().filter(|p| !order.contains(p)).collect();
            if !extra.is_empty() {
                extra.sort();
                return Err(Error::Data(format!(
                    "periods missing from period_order: {}",
                    extra.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                )));
            }
            order
                .iter()
                .filter(|p| periods_seen.contains(p))
                .cloned()
                .collect()
        }
        None => {
            let mut sorted = periods_seen.clone();
            sorted.sort();
            sorted
        }
    };

    let index =
        |list: &[String], v: &str| -> usize { list.iter().position(|l| l == v).unwrap() };
    let (ni, nj, nk) = (area_labels.len(), period_labels.len(), disease_labels.len());
    let mut y = Array3::zeros((ni, nj, nk));
    let mut filled = Array3::from_elem((ni, nj, nk), false);
    let mut expected = c_expected.map(|_| Array3::zeros((ni, nj, nk)));
    let mut population = c_population.map(|_| Array2::from_elem((ni, nj), f64::NAN));

    for row in &rows {
        let i = index(&area_labels, &row.area);
        let j = index(&period_labels, &row.period);
        let k = index(&disease_labels, &row.disease);
        if filled[[i, j, k]] {
            return Err(Error::Data(format!(
                "duplicate cell ({}, {}, {})",
                row.area, row.period, row.disease
            )));
        }
        filled[[i, j, k]] = true;
        y[[i, j, k]] = row.count;
        if let (Some(exp), Some(v)) = (expected.as_mut(), row.expected) {
            exp[[i, j, k]] = v;
        }
        if let (Some(pop), Some(v)) = (population.as_mut(), row.population) {
            let slot = &mut pop[[i, j]];
            if slot.is_nan() {
                *slot = v;
            } else if *slot != v {
                return Err(Error::Data(format!(
                    "population for ({}, {}) differs across diseases: {} vs {}",
                    row.area, row.period, *slot, v
                )));
            }
        }
    }

    let mut missing = Vec::new();
    for i in 0..ni {
        for j in 0..nj {
            for k in 0..nk {
                if !filled[[i, j, k]] {
                    missing.push(format!(
                        "({}, {}, {})",
                        area_labels[i], period_labels[j], disease_labels[k]
                    ));
                }
            }
        }
    }
    if !missing.is_empty() {
        missing.truncate(5);
        return Err(Error::Data(format!(
            "incomplete counts table; missing cells include {}",
            missing.join(", ")
        )));
    }

    Ok(CountsTable {
        y,
        expected,
        population,
        area_labels,
        period_labels,
        disease_labels,
    })
}

pub fn load_counts_path<P: AsRef<Path>>(
    path: P,
    period_order: Option<&[String]>,
) -> Result<CountsTable> {
    load_counts(std::fs::File::open(path)?, period_order)
}

/// Expected counts by internal standardization: the national crude rate per
/// (period, disease) times the area population, so that
/// `sum_i E_ijk = sum_i Y_ijk` for every period and disease.
pub fn compute_expected(
    population: &Array2<f64>,
    y: &Array3<u64>,
    period_labels: &[String],
    disease_labels: &[String],
) -> Result<Array3<f64>> {
    let (ni, nj, nk) = y.dim();
    if population.dim() != (ni, nj) {
        return Err(Error::Dimension(format!(
            "population dims {:?} vs counts area/period dims ({ni}, {nj})",
            population.dim()
        )));
    }
    if let Some(bad) = population.iter().find(|&&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::Data(format!(
            "populations must be strictly positive, found {bad}"
        )));
    }
    let mut e = Array3::zeros((ni, nj, nk));
    for j in 0..nj {
        let pop_total: f64 = (0..ni).map(|i| population[[i, j]]).sum();
        for k in 0..nk {
            let case_total: u64 = (0..ni).map(|i| y[[i, j, k]]).sum();
            if case_total == 0 {
                return Err(Error::DegenerateRate {
                    period: period_labels.get(j).cloned().unwrap_or_else(|| j.to_string()),
                    disease: disease_labels.get(k).cloned().unwrap_or_else(|| k.to_string()),
                });
            }
            let rate = case_total as f64 / pop_total;
            for i in 0..ni {
                e[[i, j, k]] = rate * population[[i, j]];
            }
        }
    }
    Ok(e)
}

/// Loads a population CSV `area,period,population` aligned to given labels.
pub fn load_population<R: Read>(
    reader: R,
    area_labels: &[String],
    period_labels: &[String],
) -> Result<Array2<f64>> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(c_area), Some(c_period), Some(c_pop)) =
        (col("area"), col("period"), col("population"))
    else {
        return Err(Error::Format(
            "population CSV must have header columns area,period,population".into(),
        ));
    };
    let (ni, nj) = (area_labels.len(), period_labels.len());
    let mut pop = Array2::from_elem((ni, nj), f64::NAN);
    for (idx, record) in csv_reader.records().enumerate() {
        let record = record?;
        let line = idx + 2;
        let area = record.get(c_area).unwrap_or("");
        let period = record.get(c_period).unwrap_or("");
        let i = area_labels
            .iter()
            .position(|l| l == area)
            .ok_or_else(|| Error::UnknownLabel(area.to_string()))?;
        let j = period_labels
            .iter()
            .position(|l| l == period)
            .ok_or_else(|| Error::UnknownLabel(period.to_string()))?;
        let v: f64 = record
            .get(c_pop)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Data(format!("row {line}: unparseable population")))?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Data(format!(
                "row {line}: population must be strictly positive, got {v}"
            )));
        }
        if !pop[[i, j]].is_nan() {
            return Err(Error::Data(format!(
                "duplicate population row for ({area}, {period})"
            )));
        }
        pop[[i, j]] = v;
    }
    if pop.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("population CSV does not cover every (area, period)".into()));
    }
    Ok(pop)
}

/// Which diseases each shared component loads on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMap {
    include: Array2<bool>,
    component_labels: Vec<String>,
}

impl ComponentMap {
    /// Validates that every component is genuinely shared (>= 2 diseases)
    /// and every disease belongs to at least one component.
    pub fn new(include: Array2<bool>, component_labels: Vec<String>) -> Result<Self> {
        let (l, k) = include.dim();
        if l == 0 || k == 0 {
            return Err(Error::Domain("component map must be non-empty".into()));
        }
        if component_labels.len() != l {
            return Err(Error::Dimension(format!(
                "{} component labels for {l} components",
                component_labels.len()
            )));
        }
        for li in 0..l {
            let n_in = (0..k).filter(|&ki| include[[li, ki]]).count();
            if n_in < 2 {
                return Err(Error::Domain(format!(
                    "component `{}` includes {n_in} diseases; a shared component needs at least 2",
                    component_labels[li]
                )));
            }
        }
        for ki in 0..k {
            if !(0..l).any(|li| include[[li, ki]]) {
                return Err(Error::Domain(format!(
                    "disease {ki} belongs to no component"
                )));
            }
        }
        Ok(Self {
            include,
            component_labels,
        })
    }

    /// Skips the shared-ness validation. Meant for degenerate reductions
    /// (e.g. single-disease sub-models used in sampler verification).
    pub fn new_unchecked(include: Array2<bool>, component_labels: Vec<String>) -> Self {
        Self {
            include,
            component_labels,
        }
    }

    /// Builds a map from per-component disease-label lists.
    pub fn from_disease_lists(
        lists: &[Vec<String>],
        component_labels: Vec<String>,
        disease_labels: &[String],
    ) -> Result<Self> {
        let mut include = Array2::from_elem((lists.len(), disease_labels.len()), false);
        for (l, list) in lists.iter().enumerate() {
            for name in list {
                let k = disease_labels
                    .iter()
                    .position(|d| d == name)
                    .ok_or_else(|| Error::UnknownLabel(name.clone()))?;
                include[[l, k]] = true;
            }
        }
        Self::new(include, component_labels)
    }

    pub fn n_components(&self) -> usize {
        self.include.dim().0
    }

    pub fn n_diseases(&self) -> usize {
        self.include.dim().1
    }

    pub fn includes(&self, component: usize, disease: usize) -> bool {
        self.include[[component, disease]]
    }

    /// Disease ids loaded by `component`, ascending.
    pub fn diseases_in(&self, component: usize) -> Vec<usize> {
        (0..self.n_diseases())
            .filter(|&k| self.include[[component, k]])
            .collect()
    }

    pub fn component_labels(&self) -> &[String] {
        &self.component_labels
    }
}

/// The packaged four-component map over the seven cancers: smoking
/// {esophagus, stomach, bladder, lung}; overweight {esophagus, colorectal,
/// prostate, breast}; diet {esophagus, stomach}; activity {colorectal,
/// breast}.
pub fn default_component_map() -> ComponentMap {
    let diseases: Vec<String> = CANONICAL_DISEASES.iter().map(|s| s.to_string()).collect();
    let lists: Vec<Vec<String>> = vec![
        vec!["esophagus", "stomach", "bladder", "lung"],
        vec!["esophagus", "colorectal", "prostate", "breast"],
        vec!["esophagus", "stomach"],
        vec!["colorectal", "breast"],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    ComponentMap::from_disease_lists(
        &lists,
        vec![
            "smoking".into(),
            "overweight".into(),
            "diet".into(),
            "activity".into(),
        ],
        &diseases,
    )
    .expect("default map is valid")
}

/// Default map permuted to a dataset's disease label order. The labels must
/// be exactly the seven canonical cancers (any order, case-insensitive).
pub fn default_component_map_for(disease_labels: &[String]) -> Result<ComponentMap> {
    if disease_labels.len() != 7 {
        return Err(Error::Domain(format!(
            "the default component map is defined for the 7 canonical cancers, got {} diseases",
            disease_labels.len()
        )));
    }
    let canonical = default_component_map();
    let mut include = Array2::from_elem((4, 7), false);
    for (k_new, label) in disease_labels.iter().enumerate() {
        let k_old = CANONICAL_DISEASES
            .iter()
            .position(|c| c.eq_ignore_ascii_case(label))
            .ok_or_else(|| Error::UnknownLabel(label.clone()))?;
        for l in 0..4 {
            include[[l, k_new]] = canonical.includes(l, k_old);
        }
    }
    ComponentMap::new(include, canonical.component_labels().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn csv_from_rows(rows: &[(&str, &str, &str, &str)]) -> String {
        let mut s = String::from("area,period,disease,count\n");
        for (a, p, d, c) in rows {
            s.push_str(&format!("{a},{p},{d},{c}\n"));
        }
        s
    }

    #[test]
    fn single_cell_parse() {
        let table = load_counts(csv_from_rows(&[("x", "2004", "eso", "7")]).as_bytes(), None)
            .unwrap();
        assert_eq!(table.y[[0, 0, 0]], 7);
        assert_eq!(table.area_labels, vec!["x"]);
    }

    #[test]
    fn row_order_does_not_matter() {
        let rows = [
            ("a", "p1", "d1", "1"),
            ("a", "p1", "d2", "2"),
            ("a", "p2", "d1", "3"),
            ("a", "p2", "d2", "4"),
            ("b", "p1", "d1", "5"),
            ("b", "p1", "d2", "6"),
            ("b", "p2", "d1", "7"),
            ("b", "p2", "d2", "8"),
        ];
        let base = load_counts(csv_from_rows(&rows).as_bytes(), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let mut shuffled = rows;
            shuffled.shuffle(&mut rng);
            let table = load_counts(csv_from_rows(&shuffled).as_bytes(), None).unwrap();
            // align label orders before comparing tensors
            let d_base = CountsTable {
                y: base.y.clone(),
                expected: None,
                population: None,
                area_labels: base.area_labels.clone(),
                period_labels: base.period_labels.clone(),
                disease_labels: base.disease_labels.clone(),
            };
            let sum_base: u64 = d_base.y.iter().sum();
            let sum_shuf: u64 = table.y.iter().sum();
            assert_eq!(sum_base, sum_shuf);
            for (i, a) in table.area_labels.iter().enumerate() {
                for (j, p) in table.period_labels.iter().enumerate() {
                    for (k, d) in table.disease_labels.iter().enumerate() {
                        let bi = base.area_labels.iter().position(|x| x == a).unwrap();
                        let bj = base.period_labels.iter().position(|x| x == p).unwrap();
                        let bk = base.disease_labels.iter().position(|x| x == d).unwrap();
                        assert_eq!(table.y[[i, j, k]], base.y[[bi, bj, bk]]);
                    }
                }
            }
        }
    }

    #[test]
    fn duplicate_cell_is_an_error() {
        let text = csv_from_rows(&[("a", "p", "d", "1"), ("a", "p", "d", "2")]);
        assert!(matches!(
            load_counts(text.as_bytes(), None),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn missing_cell_is_an_error() {
        let text = csv_from_rows(&[
            ("a", "p1", "d1", "1"),
            ("a", "p2", "d1", "2"),
            ("b", "p1", "d1", "3"),
        ]);
        let err = load_counts(text.as_bytes(), None).unwrap_err();
        assert!(err.to_string().contains("incomplete"), "{err}");
    }

    #[test]
    fn bad_counts_are_errors() {
        for bad in ["-1", "2.5", "zebra"] {
            let text = csv_from_rows(&[("a", "p", "d", bad)]);
            assert!(load_counts(text.as_bytes(), None).is_err(), "count {bad}");
        }
    }

    #[test]
    fn periods_sort_lexicographically_by_default() {
        let text = csv_from_rows(&[("a", "2006", "d", "1"), ("a", "2004", "d", "2")]);
        let table = load_counts(text.as_bytes(), None).unwrap();
        assert_eq!(table.period_labels, vec!["2004", "2006"]);
        assert_eq!(table.y[[0, 0, 0]], 2);
    }

    #[test]
    fn explicit_period_order_is_respected() {
        let text = csv_from_rows(&[("a", "late", "d", "1"), ("a", "early", "d", "2")]);
        let order = vec!["early".to_string(), "late".to_string()];
        let table = load_counts(text.as_bytes(), Some(&order)).unwrap();
        assert_eq!(table.period_labels, order);
    }

    #[test]
    fn expected_column_is_used_verbatim() {
        let text = "area,period,disease,count,expected\na,p,d,3,2.5\n";
        let data = load_counts(text.as_bytes(), None)
            .unwrap()
            .into_dataset()
            .unwrap();
        assert_eq!(data.expected()[[0, 0, 0]], 2.5);
    }

    #[test]
    fn single_area_expected_equals_observed() {
        let y = Array3::from_shape_fn((1, 2, 2), |(_, j, k)| (1 + j * 2 + k) as u64);
        let pop = Array2::from_elem((1, 2), 1234.0);
        let e = compute_expected(&pop, &y, &owned(&["p1", "p2"]), &owned(&["d1", "d2"])).unwrap();
        for j in 0..2 {
            for k in 0..2 {
                assert_abs_diff_eq!(e[[0, j, k]], y[[0, j, k]] as f64, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn two_area_proportional_split() {
        let mut y = Array3::zeros((2, 1, 1));
        y[[0, 0, 0]] = 12;
        y[[1, 0, 0]] = 18;
        let pop = Array2::from_shape_vec((2, 1), vec![1000.0, 2000.0]).unwrap();
        let e = compute_expected(&pop, &y, &owned(&["p"]), &owned(&["d"])).unwrap();
        assert_abs_diff_eq!(e[[0, 0, 0]], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e[[1, 0, 0]], 20.0, epsilon = 1e-12);
    }

    #[test]
    fn national_totals_match_observed_totals() {
        // esophagus 2004 national total from the packaged reference: 2584
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ni = 6;
        let mut y = Array3::zeros((ni, 1, 1));
        let mut remaining = 2584u64;
        for i in 0..ni {
            let take = if i + 1 == ni {
                remaining
            } else {
                let t = remaining / 3;
                remaining -= t;
                t
            };
            y[[i, 0, 0]] = take;
        }
        let pop = Array2::from_shape_fn((ni, 1), |_| 1000.0 + rng.random::<f64>() * 9000.0);
        let e = compute_expected(&pop, &y, &owned(&["2004"]), &owned(&["esophagus"])).unwrap();
        let total: f64 = (0..ni).map(|i| e[[i, 0, 0]]).sum();
        assert_abs_diff_eq!(total, 2584.0, epsilon = 2584.0 * 1e-9);
    }

    #[test]
    fn zero_case_period_disease_is_degenerate() {
        let y = Array3::zeros((2, 1, 1));
        let pop = Array2::from_elem((2, 1), 100.0);
        let err = compute_expected(&pop, &y, &owned(&["p"]), &owned(&["d"])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRate { .. }));
    }

    #[test]
    fn population_scaling_leaves_expected_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = Array3::from_shape_fn((4, 2, 3), |_| rng.random_range(1u64..50));
        let pop = Array2::from_shape_fn((4, 2), |_| 500.0 + rng.random::<f64>() * 500.0);
        let periods = owned(&["p1", "p2"]);
        let diseases = owned(&["d1", "d2", "d3"]);
        let e1 = compute_expected(&pop, &y, &periods, &diseases).unwrap();
        let e2 = compute_expected(&(&pop * 13.0), &y, &periods, &diseases).unwrap();
        for (a, b) in e1.iter().zip(e2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9 * a.abs());
        }
    }

    #[test]
    fn default_map_matches_published_assignments() {
        let map = default_component_map();
        assert_eq!(map.n_components(), 4);
        assert_eq!(map.n_diseases(), 7);
        // smoking loads on lung
        assert!(map.includes(0, 4));
        // activity does not load on esophagus
        assert!(!map.includes(3, 0));
        // every component shared by at least 2 diseases
        for l in 0..4 {
            assert!(map.diseases_in(l).len() >= 2);
        }
        // esophagus belongs to exactly 3 components
        let eso_components = (0..4).filter(|&l| map.includes(l, 0)).count();
        assert_eq!(eso_components, 3);
    }

    #[test]
    fn default_map_permutes_to_label_order() {
        let mut labels = owned(&CANONICAL_DISEASES);
        labels.reverse();
        let map = default_component_map_for(&labels).unwrap();
        // smoking loads on lung wherever lung now sits
        let lung = labels.iter().position(|l| l == "lung").unwrap();
        assert!(map.includes(0, lung));
        assert!(default_component_map_for(&owned(&["a", "b"])).is_err());
    }

    #[test]
    fn component_map_validation() {
        let include = ndarray::arr2(&[[true, false], [true, true]]);
        assert!(ComponentMap::new(include, vec!["x".into(), "y".into()]).is_err());
        let orphan = ndarray::arr2(&[[true, true, false]]);
        assert!(ComponentMap::new(orphan, vec!["x".into()]).is_err());
    }

    #[test]
    fn align_areas_permutes_and_validates() {
        let y = Array3::from_shape_fn((2, 1, 1), |(i, _, _)| i as u64 + 1);
        let e = Array3::from_elem((2, 1, 1), 1.0);
        let data = CancerDataset::new(
            y,
            e,
            owned(&["a", "b"]),
            owned(&["p"]),
            owned(&["d"]),
        )
        .unwrap();
        let flipped = data.align_areas(&owned(&["b", "a"])).unwrap();
        assert_eq!(flipped.observed()[[0, 0, 0]], 2);
        assert!(data.align_areas(&owned(&["a", "zzz"])).is_err());
    }

    fn owned(labels: &[&str]) -> Vec<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn synthetic_file_sums_match_text_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (ni, nj, nk) = (30, 5, 7);
        let mut text = String::from("area,period,disease,count\n");
        for i in 0..ni {
            for j in 0..nj {
                for k in 0..nk {
                    text.push_str(&format!(
                        "a{i},p{j},d{k},{}\n",
                        rng.random_range(0u64..200)
                    ));
                }
            }
        }
        let table = load_counts(text.as_bytes(), None).unwrap();
        // independent text-processing oracle: per-disease sums
        let mut oracle = vec![0u64; nk];
        for line in text.lines().skip(1) {
            let mut parts = line.split(',');
            let (_, _, d, c) = (
                parts.next().unwrap(),
                parts.next().unwrap(),
                parts.next().unwrap(),
                parts.next().unwrap(),
            );
            let k: usize = d[1..].parse().unwrap();
            oracle[k] += c.parse::<u64>().unwrap();
        }
        for k in 0..nk {
            let tensor_sum: u64 = (0..ni)
                .flat_map(|i| (0..nj).map(move |j| (i, j)))
                .map(|(i, j)| table.y[[i, j, k]])
                .sum();
            assert_eq!(tensor_sum, oracle[k]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn expected_sums_match_exactly(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (ni, nj, nk) = (5, 3, 2);
            let y = Array3::from_shape_fn((ni, nj, nk), |_| rng.random_range(0u64..40) + 1);
            let pop = Array2::from_shape_fn((ni, nj), |_| 100.0 + rng.random::<f64>() * 900.0);
            let e = compute_expected(&pop, &y, &owned(&["a","b","c"]), &owned(&["x","y"])).unwrap();
            for j in 0..nj {
                for k in 0..nk {
                    let ysum: u64 = (0..ni).map(|i| y[[i, j, k]]).sum();
                    let esum: f64 = (0..ni).map(|i| e[[i, j, k]]).sum();
                    prop_assert!((esum - ysum as f64).abs() <= 1e-9 * ysum as f64);
                }
            }
        }
    }
}
