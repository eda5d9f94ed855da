//! Multiple Factor Analysis: standardized PCA over numeric groups, indicator
//! coding for categorical groups, each group balanced by the inverse of its
//! own first eigenvalue, then one global eigendecomposition.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::{Browser, Category, Profile};

pub const MODEL_VERSION: u32 = 1;

/// Eigenvalues below this fraction of the largest are structural zeros
/// (one per categorical variable, from indicator centering).
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MfaError {
    #[error("variable `{0}` has zero variance")]
    ZeroVariance(String),
    #[error("need at least {needed} rows, got {rows}")]
    Rank { rows: usize, needed: usize },
    #[error("variable `{0}` is not in any group")]
    Ungrouped(String),
    #[error("variable `{0}` is assigned to more than one group")]
    Regrouped(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("variable `{0}` has a value outside the log domain")]
    Domain(String),
    #[error("profile `{0}` has no WDI value")]
    MissingWdi(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub kind: GroupKind,
    pub variables: Vec<String>,
}

impl GroupSpec {
    pub fn new(name: &str, kind: GroupKind, variables: &[&str]) -> Self {
        GroupSpec {
            name: name.into(),
            kind,
            variables: variables.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    fn kind(&self) -> GroupKind {
        match self {
            Column::Numeric(_) => GroupKind::Numeric,
            Column::Categorical(_) => GroupKind::Categorical,
        }
    }
}

/// Named columns of equal length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    columns: BTreeMap<String, Column>,
}

impl Table {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, column: Column) -> Self {
        self.columns.insert(name.to_string(), column);
        self
    }

    pub fn n_rows(&self) -> usize {
        self.columns.values().next().map_or(0, Column::len)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.get(name)
    }

    fn check_lengths(&self) -> Result<usize, MfaError> {
        let n = self.n_rows();
        for (name, c) in &self.columns {
            if c.len() != n {
                return Err(MfaError::Schema(format!("column `{name}` has {} rows, expected {n}", c.len())));
            }
        }
        Ok(n)
    }
}

pub const PRICE: &str = "price";
pub const WDI: &str = "wdi";
pub const OS: &str = "os";

fn browser_vars() -> Vec<String> {
    Browser::ALL
        .iter()
        .flat_map(|b| {
            let l = b.label().to_lowercase();
            [l.clone(), format!("{l}_cookies")]
        })
        .collect()
}

fn credential_vars() -> Vec<String> {
    Category::ALL.iter().map(|c| c.label().to_lowercase()).collect()
}

/// The five profile groups: Price, Browsers, OS, WDI, Credentials.
pub fn profile_groups() -> Vec<GroupSpec> {
    vec![
        GroupSpec::new("Price", GroupKind::Numeric, &[PRICE]),
        GroupSpec {
            name: "Browsers".into(),
            kind: GroupKind::Numeric,
            variables: browser_vars(),
        },
        GroupSpec::new("OS", GroupKind::Categorical, &[OS]),
        GroupSpec::new("WDI", GroupKind::Numeric, &[WDI]),
        GroupSpec {
            name: "Credentials".into(),
            kind: GroupKind::Numeric,
            variables: credential_vars(),
        },
    ]
}

/// Active-variable table of enriched profiles.
pub fn profile_table(profiles: &[Profile]) -> Result<Table, MfaError> {
    let mut t = Table::new().with(PRICE, Column::Numeric(profiles.iter().map(|p| p.price).collect()));
    let wdi = profiles
        .iter()
        .map(|p| p.wdi.ok_or_else(|| MfaError::MissingWdi(p.id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    t = t.with(WDI, Column::Numeric(wdi));
    t = t.with(OS, Column::Categorical(profiles.iter().map(|p| p.os.to_string()).collect()));
    for (k, b) in Browser::ALL.iter().enumerate() {
        let names = &browser_vars()[2 * k..2 * k + 2];
        let present = profiles.iter().map(|p| f64::from(u8::from(p.browser(*b).present))).collect();
        let cookies = profiles.iter().map(|p| f64::from(p.browser(*b).cookies)).collect();
        t = t.with(&names[0], Column::Numeric(present)).with(&names[1], Column::Numeric(cookies));
    }
    for (c, name) in Category::ALL.iter().zip(credential_vars()) {
        t = t.with(&name, Column::Numeric(profiles.iter().map(|p| f64::from(p.credentials.get(*c))).collect()));
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfaOptions {
    /// Apply `ln(1 + x)` to numeric variables before standardizing.
    pub log_transform: bool,
}

impl Default for MfaOptions {
    fn default() -> Self {
        MfaOptions { log_transform: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Coding {
    Numeric { log: bool, mean: f64, sd: f64 },
    /// Indicator of `level`, centered at and scaled by its frequency.
    Level { level: String, freq: f64 },
}

/// One column of the weighted analysis matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedColumn {
    pub label: String,
    pub variable: String,
    pub group: usize,
    pub coding: Coding,
}

impl ExpandedColumn {
    fn standardize_num(&self, x: f64) -> f64 {
        match &self.coding {
            Coding::Numeric { log, mean, sd } => {
                let t = if *log { x.ln_1p() } else { x };
                (t - mean) / sd
            }
            Coding::Level { .. } => unreachable!("numeric coding expected"),
        }
    }

    fn standardize_cat(&self, x: &str) -> f64 {
        match &self.coding {
            Coding::Level { level, freq } => {
                let y = if x == level { 1.0 } else { 0.0 };
                (y - freq) / freq.sqrt()
            }
            Coding::Numeric { .. } => unreachable!("level coding expected"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfaModel {
    pub version: u32,
    pub groups: Vec<GroupSpec>,
    /// Inverse first eigenvalue of each group's own decomposition.
    pub group_weights: Vec<f64>,
    pub columns: Vec<ExpandedColumn>,
    /// Retained eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Unit eigenvectors, one column per dimension.
    pub loadings: DMatrix<f64>,
    pub n_train: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub dim: usize,
    pub eigenvalue: f64,
    pub fraction: f64,
    pub cumulative: f64,
}

fn column_labels(group: &GroupSpec, variable: &str, levels: &[String]) -> Vec<String> {
    match group.kind {
        GroupKind::Numeric => vec![variable.to_string()],
        GroupKind::Categorical => levels.iter().map(|l| format!("{variable}={l}")).collect(),
    }
}

fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Flip each column so that its largest-magnitude entry is positive; the
/// first index wins ties.
pub fn apply_sign_convention(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

fn cross_product(z: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    z.tr_mul(z) / (n as f64 - 1.0)
}

impl MfaModel {
    pub fn fit(table: &Table, groups: &[GroupSpec]) -> Result<Self, MfaError> {
        Self::fit_with(table, groups, MfaOptions::default())
    }

    pub fn fit_with(table: &Table, groups: &[GroupSpec], options: MfaOptions) -> Result<Self, MfaError> {
        let n = table.check_lengths()?;
        let mut seen = HashSet::new();
        for g in groups {
            for v in &g.variables {
                if !seen.insert(v.as_str()) {
                    return Err(MfaError::Regrouped(v.clone()));
                }
                let col = table
                    .column(v)
                    .ok_or_else(|| MfaError::Schema(format!("missing column `{v}`")))?;
                if col.kind() != g.kind {
                    return Err(MfaError::Schema(format!("column `{v}` does not match group `{}`", g.name)));
                }
            }
        }
        if let Some(name) = table.columns.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(MfaError::Ungrouped(name.clone()));
        }
        if n < 2 {
            return Err(MfaError::Rank { rows: n, needed: 2 });
        }

        let mut columns = Vec::new();
        for (gi, g) in groups.iter().enumerate() {
            for v in &g.variables {
                match table.column(v).expect("checked above") {
                    Column::Numeric(xs) => {
                        let log = options.log_transform;
                        if log && xs.iter().any(|&x| !(x > -1.0)) {
                            return Err(MfaError::Domain(v.clone()));
                        }
                        let t: Vec<f64> = xs.iter().map(|&x| if log { x.ln_1p() } else { x }).collect();
                        let mean = t.iter().sum::<f64>() / n as f64;
                        let var = t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                        let sd = var.sqrt();
                        if !(sd > 1e-12 * (1.0 + mean.abs())) {
                            return Err(MfaError::ZeroVariance(v.clone()));
                        }
                        columns.push(ExpandedColumn {
                            label: v.clone(),
                            variable: v.clone(),
                            group: gi,
                            coding: Coding::Numeric { log, mean, sd },
                        });
                    }
                    Column::Categorical(xs) => {
                        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                        for x in xs {
                            *counts.entry(x.as_str()).or_default() += 1;
                        }
                        if counts.len() < 2 {
                            return Err(MfaError::ZeroVariance(v.clone()));
                        }
                        let levels: Vec<String> = counts.keys().map(|s| s.to_string()).collect();
                        for (level, label) in levels.iter().zip(column_labels(g, v, &levels)) {
                            columns.push(ExpandedColumn {
                                label,
                                variable: v.clone(),
                                group: gi,
                                coding: Coding::Level {
                                    level: level.clone(),
                                    freq: counts[level.as_str()] as f64 / n as f64,
                                },
                            });
                        }
                    }
                }
            }
        }

        let z = standardized(table, &columns, n, None)?;
        let mut group_weights = Vec::with_capacity(groups.len());
        for gi in 0..groups.len() {
            let idx: Vec<usize> = (0..columns.len()).filter(|&j| columns[j].group == gi).collect();
            let block = z.select_columns(&idx);
            let (values, _) = sorted_eigen(cross_product(&block, n));
            group_weights.push(1.0 / values[0]);
        }
        let mut x = z;
        for (j, c) in columns.iter().enumerate() {
            x.column_mut(j).scale_mut(group_weights[c.group].sqrt());
        }
        let (values, vectors) = sorted_eigen(cross_product(&x, n));
        let top = values[0];
        let keep = values.iter().take_while(|&&v| v > RANK_TOL * top).count();
        if keep == 0 {
            return Err(MfaError::Rank { rows: n, needed: 2 });
        }
        let mut loadings = vectors.columns(0, keep).into_owned();
        apply_sign_convention(&mut loadings);
        Ok(MfaModel {
            version: MODEL_VERSION,
            groups: groups.to_vec(),
            group_weights,
            columns,
            eigenvalues: values[..keep].to_vec(),
            loadings,
            n_train: n,
        })
    }

    pub fn n_dims(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Weighted standardized analysis matrix for `table`.
    pub fn analysis_matrix(&self, table: &Table) -> Result<DMatrix<f64>, MfaError> {
        let n = table.check_lengths()?;
        standardized(table, &self.columns, n, Some(&self.group_weights))
    }

    /// Dimension scores, one row per table row.
    pub fn project(&self, table: &Table) -> Result<DMatrix<f64>, MfaError> {
        let x = self.analysis_matrix(table)?;
        let k = self.n_dims();
        let rows: Vec<Vec<f64>> = (0..x.nrows())
            .into_par_iter()
            .map(|i| {
                (0..k)
                    .map(|d| {
                        let mut s = 0.0;
                        for j in 0..x.ncols() {
                            s += x[(i, j)] * self.loadings[(j, d)];
                        }
                        s
                    })
                    .collect()
            })
            .collect();
        Ok(DMatrix::from_fn(rows.len(), k, |i, d| rows[i][d]))
    }

    /// Signed contributions in percent, one row per analysis column.
    pub fn contributions(&self) -> DMatrix<f64> {
        self.loadings.map(|v| 100.0 * v * v.abs())
    }

    pub fn column_labels(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.label.clone()).collect()
    }

    pub fn variance_table(&self) -> Vec<VarianceRow> {
        let total: f64 = self.eigenvalues.iter().sum();
        let mut cumulative = 0.0;
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(d, &e)| {
                cumulative += e / total;
                VarianceRow {
                    dim: d + 1,
                    eigenvalue: e,
                    fraction: e / total,
                    cumulative,
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String, MfaError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, MfaError> {
        let m: MfaModel = serde_json::from_str(s)?;
        if m.version != MODEL_VERSION {
            return Err(MfaError::Schema(format!("model version {} unsupported", m.version)));
        }
        Ok(m)
    }
}

fn standardized(table: &Table, columns: &[ExpandedColumn], n: usize, weights: Option<&[f64]>) -> Result<DMatrix<f64>, MfaError> {
    let mut z = DMatrix::zeros(n, columns.len());
    for (j, c) in columns.iter().enumerate() {
        let scale = weights.map_or(1.0, |w| w[c.group].sqrt());
        match (table.column(&c.variable), &c.coding) {
            (Some(Column::Numeric(xs)), Coding::Numeric { log, .. }) => {
                for (i, &x) in xs.iter().enumerate() {
                    if *log && !(x > -1.0) {
                        return Err(MfaError::Domain(c.variable.clone()));
                    }
                    z[(i, j)] = c.standardize_num(x) * scale;
                }
            }
            (Some(Column::Categorical(xs)), Coding::Level { .. }) => {
                for (i, x) in xs.iter().enumerate() {
                    z[(i, j)] = c.standardize_cat(x) * scale;
                }
            }
            (None, _) => return Err(MfaError::Schema(format!("missing column `{}`", c.variable))),
            _ => return Err(MfaError::Schema(format!("column `{}` has the wrong kind", c.variable))),
        }
    }
    Ok(z)
}

/// Correlation of a supplementary variable with each dimension.
pub fn supplementary_correlations(scores: &DMatrix<f64>, values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let my = values.iter().sum::<f64>() / n;
    let sy = values.iter().map(|y| (y - my).powi(2)).sum::<f64>().sqrt();
    scores
        .column_iter()
        .map(|col| {
            let mx = col.sum() / n;
            let sx = col.iter().map(|x| (x - mx).powi(2)).sum::<f64>().sqrt();
            let sxy: f64 = col.iter().zip(values).map(|(x, y)| (x - mx) * (y - my)).sum();
            if sx == 0.0 || sy == 0.0 {
                0.0
            } else {
                sxy / (sx * sy)
            }
        })
        .collect()
}

/// Write scores as CSV with an `id` column and `dim1..dimK`.
pub fn write_scores_csv<W: Write>(w: W, ids: &[String], scores: &DMatrix<f64>) -> Result<(), MfaError> {
    let mut w = csv::Writer::from_writer(w);
    let mut header = vec!["id".to_string()];
    header.extend((1..=scores.ncols()).map(|d| format!("dim{d}")));
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(scores.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Gram matrix of centered score columns scaled to correlations.
pub fn score_correlations(scores: &DMatrix<f64>) -> DMatrix<f64> {
    let n = scores.nrows() as f64;
    let mut c = scores.clone();
    for mut col in c.column_iter_mut() {
        let m = col.sum() / n;
        col.add_scalar_mut(-m);
        let s = col.norm();
        if s > 0.0 {
            col.unscale_mut(s);
        }
    }
    c.tr_mul(&c)
}

/// Eigenvector-entry weights for each original variable: the squared
/// loadings of its analysis columns, per dimension.
pub fn variable_loadings(model: &MfaModel) -> BTreeMap<String, DVector<f64>> {
    let mut out: BTreeMap<String, DVector<f64>> = BTreeMap::new();
    for (j, c) in model.columns.iter().enumerate() {
        let sq = model.loadings.row(j).transpose().map(|v| v * v);
        out.entry(c.variable.clone())
            .and_modify(|acc| *acc += &sq)
            .or_insert(sq);
    }
    out
}
