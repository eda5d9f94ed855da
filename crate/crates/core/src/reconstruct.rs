//! Reconstruction of days the crawl missed.
//!
//! Days with both the appearance listing and the first persistence cell
//! are measured directly. Every other day gets a [`MissingDayPlan`] with
//! the expected size of its appearance listing. Days whose listing
//! survived (case a) keep their real profiles; the rest are filled by
//! resampling profiles from the nearest listing days. A batch of
//! replications then predicts first-day sales on every unmeasured profile
//! and reports percentile intervals.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distributions::WeightedIndex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crawl::{CrawlDataset, MAX_OFFSET};
use crate::glmm::GlmmFit;
use crate::profile::Region;
use crate::stats::{mean, percentile_interval, signed_rank, StatsError};
use crate::util::rng_stream;

/// Donor days taken on each side of a missing day.
pub const DONORS_PER_SIDE: usize = 3;
/// Largest fraction of replications allowed to fail.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;
pub const CI_LEVEL: f64 = 0.95;

#[derive(Debug, Error)]
pub enum ReconstructError {
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("simulation: {0}")]
    Simulation(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("batch input: {0}")]
    Input(String),
    #[error("detailed batch needs about {needed} bytes, budget is {budget}")]
    MemoryBudget { needed: usize, budget: usize },
    #[error("{failed} of {total} replications failed, first: {first}")]
    Batch { failed: usize, total: usize, first: String },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Count ratios estimated on fully observed days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRatios {
    /// `Σ|L^d_1| / Σ|L^d_0|` over days with both cells.
    pub l1_ratio: f64,
    /// `Σ|L^d_n| / Σ|L^d_0|` for `n = 1..=6` over days with both cells.
    pub offset_ratios: [Option<f64>; MAX_OFFSET],
    /// `Σ|L^d_0| / Σ recap` over days with both.
    pub recap_capture: Option<f64>,
    pub calibration_days: usize,
}

impl CalibrationRatios {
    /// Additive correction for the sales between offsets 1 and `n`,
    /// falling back to the nearest lower offset with data.
    pub fn correction(&self, n: usize) -> f64 {
        (1..=n)
            .rev()
            .find_map(|k| self.offset_ratios[k - 1])
            .map_or(0.0, |r| self.l1_ratio - r)
    }
}

pub fn calibrate(dataset: &CrawlDataset) -> Result<CalibrationRatios, ReconstructError> {
    let mut l0 = [0.0f64; MAX_OFFSET];
    let mut ln = [0.0f64; MAX_OFFSET];
    let mut days = [0usize; MAX_OFFSET];
    let (mut recap_l0, mut recap_sum) = (0.0, 0.0);
    for obs in dataset.days.values() {
        let Some(listing) = &obs.listing else { continue };
        let size = listing.len() as f64;
        for n in 1..=MAX_OFFSET {
            if let Some(cell) = obs.cell(n) {
                l0[n - 1] += size;
                ln[n - 1] += cell.len() as f64;
                days[n - 1] += 1;
            }
        }
        if let Some(r) = obs.recap {
            recap_l0 += size;
            recap_sum += r as f64;
        }
    }
    if days[0] == 0 || l0[0] == 0.0 {
        return Err(ReconstructError::Calibration(
            "no day has both a non-empty listing and its first persistence cell".into(),
        ));
    }
    let mut offset_ratios = [None; MAX_OFFSET];
    for n in 0..MAX_OFFSET {
        if days[n] > 0 && l0[n] > 0.0 {
            offset_ratios[n] = Some(ln[n] / l0[n]);
        }
    }
    let l1_ratio = ln[0] / l0[0];
    if !(l1_ratio > 0.0) {
        return Err(ReconstructError::Calibration("first persistence cells are all empty".into()));
    }
    Ok(CalibrationRatios {
        l1_ratio,
        offset_ratios,
        recap_capture: (recap_sum > 0.0).then(|| recap_l0 / recap_sum),
        calibration_days: days[0],
    })
}

/// Effective sampling ratio `Σ|L^d_0 ∩ L^d_1| / Σ|L^d_1|`: the share of
/// profiles still listed at offset 1 that the appearance crawl captured.
pub fn sampling_ratio(dataset: &CrawlDataset) -> Result<f64, ReconstructError> {
    let (mut captured, mut listed) = (0usize, 0usize);
    for obs in dataset.days.values() {
        let (Some(listing), Some(cell)) = (&obs.listing, obs.cell(1)) else { continue };
        captured += listing.iter().filter(|p| cell.contains(&p.id)).count();
        listed += cell.len();
    }
    if listed == 0 {
        return Err(ReconstructError::Calibration("no first persistence cell to estimate the sampling ratio".into()));
    }
    Ok(captured as f64 / listed as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingCase {
    /// Listing present, first persistence cell missing.
    A,
    /// No listing, first persistence cell present.
    B,
    /// No listing, first present cell is a later offset.
    C,
    /// Only the market recap.
    D,
    /// Nothing observed.
    None,
}

impl MissingCase {
    pub const ALL: [MissingCase; 5] = [MissingCase::A, MissingCase::B, MissingCase::C, MissingCase::D, MissingCase::None];

    pub fn label(self) -> &'static str {
        match self {
            MissingCase::A => "a",
            MissingCase::B => "b",
            MissingCase::C => "c",
            MissingCase::D => "d",
            MissingCase::None => "none",
        }
    }
}

/// Which count a plan's expectation was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSource {
    Listing,
    Offset { n: usize },
    Recap,
    Interpolation { left: Option<u32>, right: Option<u32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationBasis {
    pub source: BasisSource,
    /// The observed count the expectation scales.
    pub count: f64,
    pub ratio: f64,
    /// Subtracted from `ratio` before dividing (sales between offsets).
    pub correction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingDayPlan {
    pub day: u32,
    pub case: MissingCase,
    /// Expected appearance-listing size.
    pub expected: f64,
    pub basis: EstimationBasis,
}

/// Case of a day from which of its cells are present.
pub fn classify(listing: bool, cells: [bool; MAX_OFFSET], recap: bool) -> Option<MissingCase> {
    match (listing, cells[0]) {
        (true, true) => None,
        (true, false) => Some(MissingCase::A),
        (false, true) => Some(MissingCase::B),
        (false, false) if cells.iter().any(|&c| c) => Some(MissingCase::C),
        (false, false) if recap => Some(MissingCase::D),
        _ => Some(MissingCase::None),
    }
}

/// Plan every day in `0..dataset.n_days()` that is not fully measured.
/// Days absent from the dataset count as observing nothing.
pub fn plan_missing_days(dataset: &CrawlDataset, calib: &CalibrationRatios) -> Result<Vec<MissingDayPlan>, ReconstructError> {
    let mut plans = Vec::new();
    // per-day counts the no-information days interpolate between
    let mut known: BTreeMap<u32, f64> = BTreeMap::new();
    let mut blank = Vec::new();
    for d in 0..dataset.n_days() {
        let obs = dataset.days.get(&d).cloned().unwrap_or_default();
        let cells = std::array::from_fn(|k| obs.has_cell(k + 1));
        let Some(case) = classify(obs.has_listing(), cells, obs.recap.is_some()) else {
            known.insert(d, obs.listing.as_ref().map_or(0, Vec::len) as f64);
            continue;
        };
        let basis = match case {
            MissingCase::A => EstimationBasis {
                source: BasisSource::Listing,
                count: obs.listing.as_ref().map_or(0, Vec::len) as f64,
                ratio: 1.0,
                correction: 0.0,
            },
            MissingCase::B | MissingCase::C => {
                let n = (1..=MAX_OFFSET).find(|&n| obs.has_cell(n)).expect("a present cell");
                EstimationBasis {
                    source: BasisSource::Offset { n },
                    count: obs.cell(n).map_or(0, BTreeSet::len) as f64,
                    ratio: calib.l1_ratio,
                    correction: calib.correction(n),
                }
            }
            MissingCase::D => EstimationBasis {
                source: BasisSource::Recap,
                count: obs.recap.unwrap_or(0) as f64,
                ratio: 1.0 / calib.recap_capture.ok_or_else(|| {
                    ReconstructError::Calibration(format!("day {d} has only a recap but no day pairs a recap with a listing"))
                })?,
                correction: 0.0,
            },
            MissingCase::None => {
                blank.push(plans.len());
                EstimationBasis {
                    source: BasisSource::Interpolation { left: None, right: None },
                    count: 0.0,
                    ratio: 1.0,
                    correction: 0.0,
                }
            }
        };
        let denom = basis.ratio - basis.correction;
        if !(denom > 0.0) {
            return Err(ReconstructError::Calibration(format!("day {d}: non-positive scaling ratio {denom}")));
        }
        let expected = (basis.count / denom).max(0.0);
        if case != MissingCase::None {
            known.insert(d, expected);
        }
        plans.push(MissingDayPlan { day: d, case, expected, basis });
    }
    for i in blank {
        let d = plans[i].day;
        let left = known.range(..d).next_back().map(|(&k, &v)| (k, v));
        let right = known.range(d + 1..).next().map(|(&k, &v)| (k, v));
        let value = match (left, right) {
            (Some((l, lv)), Some((r, rv))) => lv + (rv - lv) * f64::from(d - l) / f64::from(r - l),
            (Some((_, v)), None) | (None, Some((_, v))) => v,
            (None, None) => 0.0,
        };
        let plan = &mut plans[i];
        plan.basis.source = BasisSource::Interpolation {
            left: left.map(|x| x.0),
            right: right.map(|x| x.0),
        };
        plan.basis.count = value;
        plan.expected = if value <= 1.0 { 0.0 } else { value };
    }
    Ok(plans)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Donor {
    pub day: u32,
    pub distance: u32,
}

/// The `2 * DONORS_PER_SIDE` listing days closest to `day`, three per side
/// where possible and topped up from the other side otherwise. `available`
/// holds the days with a non-empty listing.
pub fn nearest_donors(day: u32, available: &BTreeSet<u32>) -> Vec<Donor> {
    let left: Vec<u32> = available.range(..day).rev().copied().collect();
    let right: Vec<u32> = available.range(day + 1..).copied().collect();
    let total = 2 * DONORS_PER_SIDE;
    let take_left = DONORS_PER_SIDE.max(total.saturating_sub(right.len())).min(left.len());
    let take_right = (total - take_left).min(right.len());
    left[..take_left]
        .iter()
        .chain(&right[..take_right])
        .map(|&d| Donor { day: d, distance: d.abs_diff(day) })
        .collect()
}

/// Normalized `1 / distance` weights.
pub fn donor_weights(donors: &[Donor]) -> Vec<f64> {
    let raw: Vec<f64> = donors.iter().map(|d| 1.0 / f64::from(d.distance.max(1))).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// One resampled profile: index into the donor list and into that donor's listing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub donor: usize,
    pub profile: usize,
}

/// Draw `n` profiles with replacement: a donor day by weight, then a
/// profile uniformly from it. `sizes[i]` is the listing size of donor `i`.
pub fn simulate_listing(n: usize, donors: &[Donor], sizes: &[usize], rng: &mut impl Rng) -> Result<Vec<Draw>, ReconstructError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if donors.is_empty() {
        return Err(ReconstructError::Simulation("no neighbor listing day to resample from".into()));
    }
    if sizes.len() != donors.len() || sizes.contains(&0) {
        return Err(ReconstructError::Simulation("every donor needs a non-empty listing".into()));
    }
    let pick = WeightedIndex::new(donor_weights(donors)).map_err(|e| ReconstructError::Simulation(e.to_string()))?;
    Ok((0..n)
        .map(|_| {
            let donor = pick.sample(rng);
            Draw {
                donor,
                profile: rng.gen_range(0..sizes[donor]),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub p_values: Vec<f64>,
    pub passed: Vec<bool>,
    pub pass_fraction: f64,
    /// Rows paired per dimension.
    pub pairs: usize,
}

/// Per-dimension signed-rank test between actual and simulated scores,
/// pairing rows by index over the common length. A dimension passes
/// when `p >= alpha`.
pub fn validate_simulation(actual: &DMatrix<f64>, simulated: &DMatrix<f64>, alpha: f64) -> Result<ValidationReport, ReconstructError> {
    if actual.ncols() != simulated.ncols() {
        return Err(ReconstructError::Validation(format!(
            "actual scores have {} dimensions, simulated {}",
            actual.ncols(),
            simulated.ncols()
        )));
    }
    let pairs = actual.nrows().min(simulated.nrows());
    if pairs == 0 || actual.ncols() == 0 {
        return Err(ReconstructError::Validation("nothing to compare".into()));
    }
    let mut p_values = Vec::with_capacity(actual.ncols());
    for k in 0..actual.ncols() {
        let a: Vec<f64> = actual.column(k).rows(0, pairs).iter().copied().collect();
        let s: Vec<f64> = simulated.column(k).rows(0, pairs).iter().copied().collect();
        p_values.push(signed_rank(&a, &s)?.p_value);
    }
    let passed: Vec<bool> = p_values.iter().map(|&p| p >= alpha).collect();
    let pass_fraction = passed.iter().filter(|&&b| b).count() as f64 / passed.len() as f64;
    Ok(ValidationReport {
        p_values,
        passed,
        pass_fraction,
        pairs,
    })
}

/// A listed profile as the batch sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchProfile {
    pub price: f64,
    pub region: Region,
    /// Full score row; only the fit's dimensions are read.
    pub scores: Vec<f64>,
    /// First-day label on measured days.
    pub sold: Option<bool>,
}

/// How unmeasured profiles get their sale label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelRule {
    /// Sold when the population-level probability reaches `cutoff`;
    /// listing sizes are the rounded expectations.
    Cutoff { cutoff: f64 },
    /// Sold with the predicted probability under coefficients drawn from
    /// their sampling distribution and a fresh day effect; listing sizes
    /// are Poisson around the expectations.
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchMode {
    Detailed { memory_budget_bytes: usize },
    StatsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchOptions {
    pub replications: usize,
    pub seed: u64,
    pub mode: BatchMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaySource {
    Measured,
    Predicted,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationStats {
    /// RNG stream index under the batch seed.
    pub index: usize,
    pub total_sold: u64,
    pub revenue: f64,
    pub offered: u64,
    pub measured_sold: u64,
    pub predicted_sold: u64,
    pub simulated_sold: u64,
    /// Sold per day, aligned with [`SimulationBatch::days`].
    pub per_day: Vec<u32>,
    /// Revenue per day, aligned with [`SimulationBatch::days`].
    pub per_day_revenue: Vec<f64>,
    /// Offered per day, aligned with [`SimulationBatch::days`].
    pub per_day_offered: Vec<u32>,
    /// Sold count per region, indexed by [`Region::index`].
    pub region_sold: [u64; 6],
    pub region_revenue: [f64; 6],
}

/// One unmeasured profile of a detailed replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub day: u32,
    /// Day the profile was taken from (the day itself for case a).
    pub donor_day: u32,
    pub donor_index: u32,
    pub sold: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn of(values: &[f64]) -> Interval {
        let (lower, upper) = percentile_interval(values, CI_LEVEL);
        Interval {
            mean: mean(values),
            lower,
            upper,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaySummary {
    pub day: u32,
    pub source: DaySource,
    pub sold: Interval,
    pub revenue: Interval,
    pub offered: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: Region,
    pub sold: Interval,
    pub revenue: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub replications: usize,
    pub failed: usize,
    pub total_sold: Interval,
    pub revenue: Interval,
    pub offered: Interval,
    pub measured_sold: u64,
    pub predicted_sold: Interval,
    pub simulated_sold: Interval,
    pub per_day: Vec<DaySummary>,
    pub per_region: Vec<RegionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationBatch {
    pub mode: BatchMode,
    pub rule: LabelRule,
    /// Replication `r` uses stream `r` of this seed.
    pub seed: u64,
    pub days: Vec<u32>,
    pub summary: BatchSummary,
    pub replications: Vec<ReplicationStats>,
    pub failures: Vec<(usize, String)>,
    /// Unmeasured profiles per replication; detailed mode only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<Vec<Vec<SimRecord>>>,
}

impl SimulationBatch {
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("serializable summary")
    }

    /// Write one `replication_<i>.csv` per retained replication into `dir`,
    /// stopping before the total would exceed `cap_bytes`. Returns the
    /// number of files written.
    pub fn dump_details(&self, dir: &Path, cap_bytes: usize) -> Result<usize, ReconstructError> {
        let Some(details) = &self.details else {
            return Ok(0);
        };
        std::fs::create_dir_all(dir).map_err(|e| ReconstructError::Input(e.to_string()))?;
        let mut used = 0;
        for (i, records) in details.iter().enumerate() {
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| ReconstructError::Input(e.to_string());
            w.write_record(["day", "donor_day", "donor_index", "sold"]).map_err(io)?;
            for r in records {
                w.serialize((r.day, r.donor_day, r.donor_index, u8::from(r.sold))).map_err(io)?;
            }
            let bytes = w.into_inner().map_err(|e| ReconstructError::Input(e.to_string()))?;
            if used + bytes.len() > cap_bytes {
                return Ok(i);
            }
            used += bytes.len();
            std::fs::write(dir.join(format!("replication_{i}.csv")), bytes)
                .map_err(|e| ReconstructError::Input(e.to_string()))?;
        }
        Ok(details.len())
    }
}

struct Unit {
    price: f64,
    region: usize,
    x: Vec<f64>,
    cutoff_sold: bool,
}

enum Work {
    Predict { units: Vec<Unit> },
    Simulate { expected: f64, donors: Vec<Donor>, pools: Vec<usize> },
}

/// Inputs reduced to what a replication touches.
pub struct PreparedBatch {
    days: Vec<u32>,
    sources: Vec<DaySource>,
    work: Vec<(usize, u32, Work)>,
    /// Listing profiles per donor pool.
    pools: Vec<(u32, Vec<Unit>)>,
    measured: Vec<(usize, u64, f64, [u64; 6], [f64; 6], u64)>,
    rule: LabelRule,
    theta: Vec<f64>,
    chol: Option<DMatrix<f64>>,
    sigma: f64,
}

fn unit(p: &BatchProfile, fit: &GlmmFit, rule: &LabelRule) -> Result<Unit, ReconstructError> {
    if let Some(&d) = fit.dims.iter().find(|&&d| d >= p.scores.len()) {
        return Err(ReconstructError::Input(format!("fit uses Dim.{} but a profile has {} scores", d + 1, p.scores.len())));
    }
    let x: Vec<f64> = fit.dims.iter().map(|&d| p.scores[d]).collect();
    let cutoff_sold = match rule {
        LabelRule::Cutoff { cutoff } => crate::stats::logistic(fit.linear_predictor(&p.scores, None)) >= *cutoff,
        LabelRule::Bernoulli => false,
    };
    Ok(Unit {
        price: p.price,
        region: p.region.index(),
        x,
        cutoff_sold,
    })
}

impl PreparedBatch {
    /// `listings` holds every day with an appearance listing; a day is
    /// measured when it has no plan and all its profiles carry labels.
    pub fn new(
        listings: &BTreeMap<u32, Vec<BatchProfile>>,
        plans: &[MissingDayPlan],
        fit: &GlmmFit,
        rule: LabelRule,
    ) -> Result<PreparedBatch, ReconstructError> {
        let planned: BTreeMap<u32, &MissingDayPlan> = plans.iter().map(|p| (p.day, p)).collect();
        let days: Vec<u32> = listings.keys().chain(planned.keys()).copied().collect::<BTreeSet<_>>().into_iter().collect();

        let mut pools = Vec::new();
        let mut pool_of = BTreeMap::new();
        for (&d, profiles) in listings {
            if profiles.is_empty() {
                continue;
            }
            pool_of.insert(d, pools.len());
            pools.push((d, profiles.iter().map(|p| unit(p, fit, &rule)).collect::<Result<Vec<_>, _>>()?));
        }
        let available: BTreeSet<u32> = pool_of.keys().copied().collect();

        let mut sources = vec![DaySource::Measured; days.len()];
        let mut work = Vec::new();
        let mut measured = Vec::new();
        for (i, &d) in days.iter().enumerate() {
            match (planned.get(&d), listings.get(&d)) {
                (Some(plan), listing) if plan.case == MissingCase::A => {
                    let listing = listing.ok_or_else(|| ReconstructError::Input(format!("case-a day {d} has no listing")))?;
                    sources[i] = DaySource::Predicted;
                    let units = listing.iter().map(|p| unit(p, fit, &rule)).collect::<Result<Vec<_>, _>>()?;
                    work.push((i, d, Work::Predict { units }));
                }
                (Some(plan), _) => {
                    sources[i] = DaySource::Simulated;
                    let donors = nearest_donors(d, &available);
                    let pools_idx = donors.iter().map(|x| pool_of[&x.day]).collect();
                    work.push((
                        i,
                        d,
                        Work::Simulate {
                            expected: plan.expected,
                            donors,
                            pools: pools_idx,
                        },
                    ));
                }
                (None, Some(listing)) => {
                    let mut sold = 0u64;
                    let mut revenue = 0.0;
                    let mut rs = [0u64; 6];
                    let mut rr = [0.0f64; 6];
                    for p in listing {
                        match p.sold {
                            Some(true) => {
                                sold += 1;
                                revenue += p.price;
                                rs[p.region.index()] += 1;
                                rr[p.region.index()] += p.price;
                            }
                            Some(false) => {}
                            None => return Err(ReconstructError::Input(format!("day {d} has neither labels nor a plan"))),
                        }
                    }
                    measured.push((i, sold, revenue, rs, rr, listing.len() as u64));
                }
                (None, None) => unreachable!("day {d} came from one of the maps"),
            }
        }

        let theta: Vec<f64> = fit.coefficients.iter().map(|c| c.estimate).collect();
        let chol = match (rule, &fit.covariance) {
            (LabelRule::Bernoulli, Some(cov)) => {
                let q = theta.len();
                if cov.len() != q || cov.iter().any(|r| r.len() != q) {
                    return Err(ReconstructError::Input("coefficient covariance has the wrong shape".into()));
                }
                let m = DMatrix::from_fn(q, q, |i, j| cov[i][j]);
                Some(
                    m.cholesky()
                        .ok_or_else(|| ReconstructError::Input("coefficient covariance is not positive definite".into()))?
                        .l(),
                )
            }
            _ => None,
        };
        Ok(PreparedBatch {
            days,
            sources,
            work,
            pools,
            measured,
            rule,
            theta,
            chol,
            sigma: fit.sigma.abs(),
        })
    }

    pub fn days(&self) -> &[u32] {
        &self.days
    }

    /// Expected unmeasured profiles per replication.
    pub fn expected_records(&self) -> f64 {
        self.work
            .iter()
            .map(|(_, _, w)| match w {
                Work::Predict { units } => units.len() as f64,
                Work::Simulate { expected, .. } => *expected,
            })
            .sum()
    }

    /// Replication `index` under `seed`; reproducible on its own.
    pub fn replicate(&self, seed: u64, index: usize, keep: bool) -> Result<(ReplicationStats, Option<Vec<SimRecord>>), ReconstructError> {
        let mut rng = rng_stream(seed, index as u64);
        let mut stats = ReplicationStats {
            index,
            total_sold: 0,
            revenue: 0.0,
            offered: 0,
            measured_sold: 0,
            predicted_sold: 0,
            simulated_sold: 0,
            per_day: vec![0; self.days.len()],
            per_day_revenue: vec![0.0; self.days.len()],
            per_day_offered: vec![0; self.days.len()],
            region_sold: [0; 6],
            region_revenue: [0.0; 6],
        };
        for &(i, sold, revenue, rs, rr, offered) in &self.measured {
            stats.measured_sold += sold;
            stats.revenue += revenue;
            stats.offered += offered;
            stats.per_day[i] = sold as u32;
            stats.per_day_revenue[i] = revenue;
            stats.per_day_offered[i] = offered as u32;
            for r in 0..6 {
                stats.region_sold[r] += rs[r];
                stats.region_revenue[r] += rr[r];
            }
        }
        let theta = self.draw_theta(&mut rng);
        let mut records = keep.then(Vec::new);
        for (i, d, w) in &self.work {
            let day_effect = match self.rule {
                LabelRule::Bernoulli => self.sigma * rng.sample::<f64, _>(StandardNormal),
                LabelRule::Cutoff { .. } => 0.0,
            };
            let label = |u: &Unit, rng: &mut ChaCha8Rng| -> bool {
                match self.rule {
                    LabelRule::Cutoff { .. } => u.cutoff_sold,
                    LabelRule::Bernoulli => {
                        let eta = theta[0] + u.x.iter().zip(&theta[1..]).map(|(a, b)| a * b).sum::<f64>() + day_effect;
                        rng.gen::<f64>() < crate::stats::logistic(eta)
                    }
                }
            };
            let mut day_sold = 0u64;
            let mut day_revenue = 0.0;
            let mut day_offered = 0u32;
            let mut tally = |u: &Unit, sold: bool, stats: &mut ReplicationStats| {
                stats.offered += 1;
                day_offered += 1;
                if sold {
                    day_sold += 1;
                    day_revenue += u.price;
                    stats.revenue += u.price;
                    stats.region_sold[u.region] += 1;
                    stats.region_revenue[u.region] += u.price;
                }
            };
            match w {
                Work::Predict { units } => {
                    for (k, u) in units.iter().enumerate() {
                        let sold = label(u, &mut rng);
                        tally(u, sold, &mut stats);
                        if let Some(rec) = records.as_mut() {
                            rec.push(SimRecord {
                                day: *d,
                                donor_day: *d,
                                donor_index: k as u32,
                                sold,
                            });
                        }
                    }
                    stats.predicted_sold += day_sold;
                }
                Work::Simulate { expected, donors, pools } => {
                    let n = match self.rule {
                        LabelRule::Cutoff { .. } => expected.round() as usize,
                        LabelRule::Bernoulli if *expected > 0.0 => {
                            Poisson::new(*expected).map_err(|e| ReconstructError::Simulation(e.to_string()))?.sample(&mut rng) as usize
                        }
                        LabelRule::Bernoulli => 0,
                    };
                    let sizes: Vec<usize> = pools.iter().map(|&p| self.pools[p].1.len()).collect();
                    let draws = simulate_listing(n, donors, &sizes, &mut rng)
                        .map_err(|e| ReconstructError::Simulation(format!("day {d}: {e}")))?;
                    for dr in draws {
                        let (donor_day, units) = &self.pools[pools[dr.donor]];
                        let u = &units[dr.profile];
                        let sold = label(u, &mut rng);
                        tally(u, sold, &mut stats);
                        if let Some(rec) = records.as_mut() {
                            rec.push(SimRecord {
                                day: *d,
                                donor_day: *donor_day,
                                donor_index: dr.profile as u32,
                                sold,
                            });
                        }
                    }
                    stats.simulated_sold += day_sold;
                }
            }
            stats.per_day[*i] = day_sold as u32;
            stats.per_day_revenue[*i] = day_revenue;
            stats.per_day_offered[*i] = day_offered;
        }
        stats.total_sold = stats.measured_sold + stats.predicted_sold + stats.simulated_sold;
        Ok((stats, records))
    }

    fn draw_theta(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match (&self.rule, &self.chol) {
            (LabelRule::Bernoulli, Some(l)) => {
                let z = DVector::from_fn(self.theta.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                let shift = l * z;
                self.theta.iter().zip(shift.iter()).map(|(a, b)| a + b).collect()
            }
            _ => self.theta.clone(),
        }
    }
}

/// Run `options.replications` independent replications in parallel and
/// summarize them with means and 95% percentile intervals.
pub fn run_batch(
    listings: &BTreeMap<u32, Vec<BatchProfile>>,
    plans: &[MissingDayPlan],
    fit: &GlmmFit,
    rule: LabelRule,
    options: &BatchOptions,
) -> Result<SimulationBatch, ReconstructError> {
    if options.replications == 0 {
        return Err(ReconstructError::Input("at least one replication is needed".into()));
    }
    let prepared = PreparedBatch::new(listings, plans, fit, rule)?;
    let keep = matches!(options.mode, BatchMode::Detailed { .. });
    if let BatchMode::Detailed { memory_budget_bytes } = options.mode {
        let needed = (prepared.expected_records() * options.replications as f64 * std::mem::size_of::<SimRecord>() as f64) as usize;
        if needed > memory_budget_bytes {
            return Err(ReconstructError::MemoryBudget {
                needed,
                budget: memory_budget_bytes,
            });
        }
    }
    let outcomes: Vec<_> = (0..options.replications)
        .into_par_iter()
        .map(|r| prepared.replicate(options.seed, r, keep))
        .collect();
    let mut replications = Vec::with_capacity(outcomes.len());
    let mut details = keep.then(Vec::new);
    let mut failures = Vec::new();
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok((stats, rec)) => {
                replications.push(stats);
                if let (Some(all), Some(rec)) = (details.as_mut(), rec) {
                    all.push(rec);
                }
            }
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * options.replications as f64 || replications.is_empty() {
        return Err(ReconstructError::Batch {
            failed: failures.len(),
            total: options.replications,
            first: failures[0].1.clone(),
        });
    }
    let summary = summarize(&prepared, &replications, failures.len());
    Ok(SimulationBatch {
        mode: options.mode,
        rule,
        seed: options.seed,
        days: prepared.days.clone(),
        summary,
        replications,
        failures,
        details,
    })
}

fn summarize(prepared: &PreparedBatch, reps: &[ReplicationStats], failed: usize) -> BatchSummary {
    let col = |f: &dyn Fn(&ReplicationStats) -> f64| -> Interval { Interval::of(&reps.iter().map(f).collect::<Vec<_>>()) };
    BatchSummary {
        replications: reps.len(),
        failed,
        total_sold: col(&|r| r.total_sold as f64),
        revenue: col(&|r| r.revenue),
        offered: col(&|r| r.offered as f64),
        measured_sold: reps[0].measured_sold,
        predicted_sold: col(&|r| r.predicted_sold as f64),
        simulated_sold: col(&|r| r.simulated_sold as f64),
        per_day: prepared
            .days
            .iter()
            .enumerate()
            .map(|(i, &day)| DaySummary {
                day,
                source: prepared.sources[i],
                sold: col(&|r| f64::from(r.per_day[i])),
                revenue: col(&|r| r.per_day_revenue[i]),
                offered: col(&|r| f64::from(r.per_day_offered[i])),
            })
            .collect(),
        per_region: Region::ALL
            .iter()
            .map(|&region| RegionSummary {
                region,
                sold: col(&|r| r.region_sold[region.index()] as f64),
                revenue: col(&|r| r.region_revenue[region.index()]),
            })
            .collect(),
    }
}
