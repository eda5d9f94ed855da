//! Market-economics summaries over the pipeline's outputs: the scale-up
//! factor, regional supply and demand, variance attribution to original
//! variables, and revenue totals per cutoff.
//!
//! Variable importance is `Σ_dims |contribution(var, dim)| × ΔR²(dim)`,
//! normalized to 100% over the active variables, where `ΔR²` is the gain
//! in marginal R² the dimension brought when it entered the model.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glmm::{CutoffMode, GlmmFit};
use crate::mfa::MfaModel;
use crate::profile::{Profile, Region};
use crate::reconstruct::{DaySource, Interval, SimulationBatch};
use crate::stats::median;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("no simulation batch for the {0} cutoff")]
    MissingBatch(&'static str),
}

/// Multiplier from sampled first-day sales to full-market sales over the
/// whole monitoring window: `1 / (sampling_ratio * (1 - late_sale_fraction))`.
pub fn scale_factor(sampling_ratio: f64, late_sale_fraction: f64) -> Result<f64, ReportError> {
    if !(sampling_ratio > 0.0 && sampling_ratio <= 1.0) {
        return Err(ReportError::Argument(format!("sampling ratio {sampling_ratio} outside (0, 1]")));
    }
    if !(0.0..1.0).contains(&late_sale_fraction) {
        return Err(ReportError::Argument(format!("late-sale fraction {late_sale_fraction} outside [0, 1)")));
    }
    Ok(1.0 / (sampling_ratio * (1.0 - late_sale_fraction)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub region: Region,
    pub offered: usize,
    pub sold: usize,
    /// Percent of all offered profiles.
    pub offered_share: f64,
    /// Percent of all sold profiles.
    pub sales_share: f64,
    pub median_offered_price: Option<f64>,
    pub median_sold_price: Option<f64>,
}

fn median_opt(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| median(v))
}

fn share(part: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * part as f64 / total as f64
    }
}

/// Per-region volumes and median prices of labeled profiles; unlabeled
/// profiles count as offered only.
pub fn regional_report(profiles: &[Profile]) -> Vec<RegionRow> {
    let total = profiles.len();
    let total_sold = profiles.iter().filter(|p| p.sold == Some(true)).count();
    Region::ALL
        .iter()
        .map(|&region| {
            let offered: Vec<f64> = profiles.iter().filter(|p| p.region == region).map(|p| p.price).collect();
            let sold: Vec<f64> = profiles
                .iter()
                .filter(|p| p.region == region && p.sold == Some(true))
                .map(|p| p.price)
                .collect();
            RegionRow {
                region,
                offered: offered.len(),
                sold: sold.len(),
                offered_share: share(offered.len(), total),
                sales_share: share(sold.len(), total_sold),
                median_offered_price: median_opt(&offered),
                median_sold_price: median_opt(&sold),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDayRow {
    pub day: u32,
    pub region: Region,
    pub offered: usize,
    pub sold: usize,
    pub median_price: Option<f64>,
}

/// Daily offered and sold volumes with median offered price, per region.
pub fn regional_series(profiles: &[(u32, &Profile)]) -> Vec<RegionDayRow> {
    let mut cells: BTreeMap<(u32, Region), (Vec<f64>, usize)> = BTreeMap::new();
    for (day, p) in profiles {
        let cell = cells.entry((*day, p.region)).or_default();
        cell.0.push(p.price);
        cell.1 += usize::from(p.sold == Some(true));
    }
    cells
        .into_iter()
        .map(|((day, region), (prices, sold))| RegionDayRow {
            day,
            region,
            offered: prices.len(),
            sold,
            median_price: median_opt(&prices),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableShare {
    pub variable: String,
    pub group: String,
    /// Percent of the explained variance.
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub variables: Vec<VariableShare>,
    /// Shares summed per variable group.
    pub groups: Vec<(String, f64)>,
}

/// Normalized attribution from per-variable absolute contribution
/// fractions (`variables × dimensions`) and the `ΔR²` of each included
/// dimension. All zero when nothing is explained.
pub fn attribute(contributions: &DMatrix<f64>, dims: &[usize], delta_r2: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = (0..contributions.nrows())
        .map(|v| dims.iter().zip(delta_r2).map(|(&d, &r)| contributions[(v, d)].abs() * r).sum())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| if total > 0.0 { 100.0 * x / total } else { 0.0 }).collect()
}

pub fn variable_importance(mfa: &MfaModel, fit: &GlmmFit) -> Importance {
    let contrib = mfa.contributions();
    let mut names: Vec<(String, usize)> = Vec::new();
    for c in &mfa.columns {
        if !names.iter().any(|(n, _)| n == &c.variable) {
            names.push((c.variable.clone(), c.group));
        }
    }
    let per_var = DMatrix::from_fn(names.len(), contrib.ncols(), |v, d| {
        mfa.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.variable == names[v].0)
            .map(|(j, _)| contrib[(j, d)].abs() / 100.0)
            .sum()
    });
    let shares = attribute(&per_var, &fit.dims, &fit.delta_r2);
    let variables: Vec<VariableShare> = names
        .iter()
        .zip(&shares)
        .map(|((variable, g), &share)| VariableShare {
            variable: variable.clone(),
            group: mfa.groups[*g].name.clone(),
            share,
        })
        .collect();
    let groups = mfa
        .groups
        .iter()
        .map(|g| {
            let s = variables.iter().filter(|v| v.group == g.name).map(|v| v.share).sum();
            (g.name.clone(), s)
        })
        .collect();
    Importance { variables, groups }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyRevenueRow {
    pub day: u32,
    pub source: DaySource,
    pub sold: Interval,
    pub revenue: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevenueSummary {
    pub cutoff: CutoffMode,
    pub replications: usize,
    pub measured_sold: u64,
    pub sold: Interval,
    pub mean_price: Interval,
    pub revenue: Interval,
    pub measured_days: usize,
    pub predicted_days: usize,
    pub simulated_days: usize,
    pub daily: Vec<DailyRevenueRow>,
}

/// Totals with 95% intervals for each wanted cutoff. Daily revenue is a
/// replication's sold count for the day times its overall mean sold price.
pub fn revenue_summary(batches: &BTreeMap<CutoffMode, SimulationBatch>, wanted: &[CutoffMode]) -> Result<Vec<RevenueSummary>, ReportError> {
    wanted
        .iter()
        .map(|&mode| {
            let b = batches.get(&mode).ok_or(ReportError::MissingBatch(mode.label()))?;
            let reps = &b.replications;
            let col = |f: &dyn Fn(usize) -> f64| Interval::of(&(0..reps.len()).map(f).collect::<Vec<_>>());
            let mean_price = |r: usize| {
                let s = reps[r].total_sold;
                if s == 0 {
                    0.0
                } else {
                    reps[r].revenue / s as f64
                }
            };
            let daily = b
                .summary
                .per_day
                .iter()
                .map(|d| DailyRevenueRow {
                    day: d.day,
                    source: d.source,
                    sold: d.sold,
                    revenue: d.revenue,
                })
                .collect();
            let days_of = |s: DaySource| b.summary.per_day.iter().filter(|d| d.source == s).count();
            Ok(RevenueSummary {
                cutoff: mode,
                replications: reps.len(),
                measured_sold: b.summary.measured_sold,
                sold: b.summary.total_sold,
                mean_price: col(&mean_price),
                revenue: b.summary.revenue,
                measured_days: days_of(DaySource::Measured),
                predicted_days: days_of(DaySource::Predicted),
                simulated_days: days_of(DaySource::Simulated),
                daily,
            })
        })
        .collect()
}
