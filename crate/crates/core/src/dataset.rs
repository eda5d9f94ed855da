//! Ingestion and preparation of crawl observations: WDI enrichment,
//! credential categorization, diagonalization over complete monitoring
//! windows, and sale labeling with reservation disambiguation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{collapse_aliases, ResourceCatalog};
use crate::crawl::{trace_index, CrawlDataset, DayObservation, MAX_OFFSET};
use crate::geo;
use crate::market::MarketTrace;
use crate::profile::{CategoryCounts, Profile};

/// Reference year for per-capita GDP.
pub const WDI_YEAR: i32 = 2020;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("WDI line {line}: {msg}")]
    Wdi { line: u64, msg: String },
    #[error("monitoring window must lie in 1..=6, got {0}")]
    Window(usize),
    #[error("no day has complete observations through offset 6")]
    NoCompleteDays,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WdiEntry {
    pub year: i32,
    pub value: f64,
}

/// Per-capita GDP by country, one value per country chosen from the
/// reference year or, failing that, the most recent year available.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WdiTable {
    entries: BTreeMap<String, WdiEntry>,
}

impl WdiTable {
    pub fn get(&self, country: &str) -> Option<f64> {
        self.entries.get(country).map(|e| e.value)
    }

    pub fn entry(&self, country: &str) -> Option<&WdiEntry> {
        self.entries.get(country)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn offer(&mut self, country: &str, year: i32, value: f64) {
        let better = match self.entries.get(country) {
            None => true,
            Some(e) if e.year == WDI_YEAR => false,
            Some(e) => year == WDI_YEAR || year > e.year,
        };
        if better {
            self.entries.insert(country.to_string(), WdiEntry { year, value });
        }
    }

    /// Table built from the generator's country list.
    pub fn builtin() -> Self {
        let mut t = WdiTable::default();
        for c in geo::COUNTRIES {
            if let Some(v) = c.gdp_per_capita {
                t.offer(c.code, WDI_YEAR, v);
            }
        }
        t
    }

    /// Parse `country,region,year,gdp_per_capita_usd`. Rows with an empty
    /// value are skipped; `#` starts a comment line.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(reader);
        let want = ["country", "region", "year", "gdp_per_capita_usd"];
        let headers = rdr.headers().map_err(|e| DatasetError::Wdi {
            line: 1,
            msg: e.to_string(),
        })?;
        if headers.iter().map(str::trim).ne(want.iter().copied()) {
            return Err(DatasetError::Wdi {
                line: 1,
                msg: format!("expected header `{}`", want.join(",")),
            });
        }
        let mut table = WdiTable::default();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| DatasetError::Wdi {
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let err = |msg: String| DatasetError::Wdi { line, msg };
            if rec.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", rec.len())));
            }
            let country = rec[0].trim();
            if country.is_empty() {
                return Err(err("empty country code".into()));
            }
            let year: i32 = rec[2].trim().parse().map_err(|e| err(format!("year: {e}")))?;
            let raw = rec[3].trim();
            if raw.is_empty() {
                continue;
            }
            let value: f64 = raw.parse().map_err(|e| err(format!("gdp_per_capita_usd: {e}")))?;
            if !(value > 0.0 && value.is_finite()) {
                return Err(err(format!("gdp_per_capita_usd must be positive, got {value}")));
            }
            table.offer(country, year, value);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["country", "region", "year", "gdp_per_capita_usd"])?;
        for (c, e) in &self.entries {
            let region = geo::lookup(c).map_or(String::new(), |g| g.region.to_string());
            w.write_record([c.as_str(), &region, &e.year.to_string(), &e.value.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub dropped_ids: Vec<String>,
    pub by_country: BTreeMap<String, usize>,
}

impl DropReport {
    pub fn dropped(&self) -> usize {
        self.dropped_ids.len()
    }

    fn merge(&mut self, other: DropReport) {
        self.dropped_ids.extend(other.dropped_ids);
        for (c, n) in other.by_country {
            *self.by_country.entry(c).or_default() += n;
        }
    }
}

/// Attach WDI, collapse platform aliases and recount credentials per
/// category. Profiles from countries without WDI are dropped and reported.
pub fn enrich(profiles: &[Profile], catalog: &ResourceCatalog, wdi: &WdiTable) -> (Vec<Profile>, DropReport) {
    let mut report = DropReport::default();
    let mut out = Vec::with_capacity(profiles.len());
    for p in profiles {
        let Some(value) = wdi.get(&p.country) else {
            report.dropped_ids.push(p.id.clone());
            *report.by_country.entry(p.country.clone()).or_default() += 1;
            continue;
        };
        let platforms = collapse_aliases(&p.platforms, catalog);
        let mut credentials = CategoryCounts::default();
        for id in &platforms {
            credentials.add(catalog.category_of(id), 1);
        }
        out.push(Profile {
            wdi: Some(value),
            platforms,
            credentials,
            ..p.clone()
        });
    }
    (out, report)
}

/// Enrich every listing of a crawl dataset.
pub fn enrich_dataset(dataset: &CrawlDataset, catalog: &ResourceCatalog, wdi: &WdiTable) -> (CrawlDataset, DropReport) {
    let mut report = DropReport::default();
    let mut out = dataset.clone();
    for obs in out.days.values_mut() {
        if let Some(listing) = obs.listing.take() {
            let (kept, r) = enrich(&listing, catalog, wdi);
            report.merge(r);
            obs.listing = Some(kept);
        }
    }
    (out, report)
}

/// Presence of a profile in cells `1..=6`: `None` when the cell is missing.
pub fn presence(obs: &DayObservation, id: &str) -> [Option<bool>; MAX_OFFSET] {
    let mut p = [None; MAX_OFFSET];
    for (k, slot) in p.iter_mut().enumerate() {
        *slot = obs.persistence[k].as_ref().map(|ids| ids.contains(id));
    }
    p
}

/// Outcome of reading one profile's presence vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaleReading {
    /// First absent cell after the last sighting.
    pub sold_at: Option<usize>,
    /// Absent at some cell `k` yet seen again later.
    pub reappeared: bool,
    /// No present cell after `sold_at` could confirm the disappearance.
    pub unverified: bool,
}

pub fn read_presence(p: &[Option<bool>; MAX_OFFSET]) -> SaleReading {
    let last_seen = (1..=MAX_OFFSET).rev().find(|&k| p[k - 1] == Some(true)).unwrap_or(0);
    let sold_at = (last_seen + 1..=MAX_OFFSET).find(|&k| p[k - 1] == Some(false));
    let reappeared = (1..last_seen).any(|k| p[k - 1] == Some(false));
    let unverified = sold_at.is_some_and(|s| (s + 1..=MAX_OFFSET).all(|k| p[k - 1].is_none()));
    SaleReading {
        sold_at,
        reappeared,
        unverified,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledProfile {
    pub day: u32,
    pub profile: Profile,
    pub reading: SaleReading,
    /// Would have been labeled sold from disappearance alone.
    pub corrected: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Availability {
    pub days_kept: usize,
    pub days_total: usize,
    pub profiles_kept: usize,
    pub profiles_total: usize,
    pub sales_captured: usize,
    pub sales_total: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Availability {
    pub fn days_fraction(&self) -> f64 {
        ratio(self.days_kept, self.days_total)
    }

    pub fn profiles_fraction(&self) -> f64 {
        ratio(self.profiles_kept, self.profiles_total)
    }

    pub fn sales_fraction(&self) -> f64 {
        ratio(self.sales_captured, self.sales_total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalizedSet {
    pub window: usize,
    pub retained_days: Vec<u32>,
    pub profiles: Vec<LabeledProfile>,
    pub availability: Availability,
    pub corrections: usize,
    pub unverified: usize,
    /// IDs seen again on a later listing day; the first day is kept.
    pub duplicates: Vec<String>,
}

impl DiagonalizedSet {
    pub fn sold_count(&self) -> usize {
        self.profiles.iter().filter(|p| p.profile.sold == Some(true)).count()
    }
}

fn check_window(n: usize) -> Result<(), DatasetError> {
    if (1..=MAX_OFFSET).contains(&n) {
        Ok(())
    } else {
        Err(DatasetError::Window(n))
    }
}

/// Listing days with their de-duplicated profiles.
fn listings(dataset: &CrawlDataset) -> (Vec<(u32, &DayObservation, Vec<&Profile>)>, Vec<String>) {
    let mut seen = HashSet::new();
    let mut dups = Vec::new();
    let mut out = Vec::new();
    for (&d, obs) in &dataset.days {
        let Some(listing) = &obs.listing else { continue };
        let mut kept = Vec::with_capacity(listing.len());
        for p in listing {
            if seen.insert(p.id.as_str()) {
                kept.push(p);
            } else {
                dups.push(p.id.clone());
            }
        }
        out.push((d, obs, kept));
    }
    (out, dups)
}

fn label_day(d: u32, obs: &DayObservation, profiles: &[&Profile], n: usize) -> Vec<LabeledProfile> {
    profiles
        .iter()
        .map(|p| {
            let pres = presence(obs, &p.id);
            let reading = read_presence(&pres);
            let sold = reading.sold_at.is_some_and(|s| s <= n);
            let corrected = (1..=n).any(|k| pres[k - 1] == Some(false)) && !sold;
            let mut profile = (*p).clone();
            profile.sold = Some(sold);
            LabeledProfile {
                day: d,
                profile,
                reading,
                corrected,
            }
        })
        .collect()
}

/// Label profiles of the days fully observed through offset `n`. A
/// profile is sold when it disappears by offset `n` and never shows up
/// in any later present cell.
pub fn label_sales(dataset: &CrawlDataset, n: usize) -> Result<Vec<LabeledProfile>, DatasetError> {
    Ok(diagonalize(dataset, n)?.profiles)
}

/// Keep the days with complete cells `0..=n`, label their profiles and
/// summarize what the restriction retains.
pub fn diagonalize(dataset: &CrawlDataset, n: usize) -> Result<DiagonalizedSet, DatasetError> {
    check_window(n)?;
    let (days, duplicates) = listings(dataset);
    let mut availability = Availability {
        days_total: days.len(),
        ..Availability::default()
    };
    let mut retained_days = Vec::new();
    let mut profiles = Vec::new();
    for (d, obs, list) in &days {
        availability.profiles_total += list.len();
        let prefix = obs.complete_prefix().unwrap_or(0);
        if prefix >= 1 {
            // sales over the longest window this day supports
            let longest = label_day(*d, obs, list, prefix);
            availability.sales_total += longest.iter().filter(|p| p.profile.sold == Some(true)).count();
        }
        if prefix >= n {
            let labeled = label_day(*d, obs, list, n);
            availability.days_kept += 1;
            availability.profiles_kept += list.len();
            availability.sales_captured += labeled.iter().filter(|p| p.profile.sold == Some(true)).count();
            retained_days.push(*d);
            profiles.extend(labeled);
        }
    }
    let corrections = profiles.iter().filter(|p| p.corrected).count();
    let unverified = profiles
        .iter()
        .filter(|p| p.profile.sold == Some(true) && p.reading.unverified)
        .count();
    Ok(DiagonalizedSet {
        window: n,
        retained_days,
        profiles,
        availability,
        corrections,
        unverified,
        duplicates,
    })
}

/// Availability for every window 1..=6.
pub fn availability_table(dataset: &CrawlDataset) -> Vec<(usize, Availability)> {
    (1..=MAX_OFFSET)
        .map(|n| (n, diagonalize(dataset, n).expect("valid window").availability))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReservationAudit {
    pub days: usize,
    pub profiles: usize,
    pub reappeared: usize,
    pub fraction: f64,
    /// Longest run of consecutive absences that ended in a reappearance.
    pub max_gap: usize,
}

/// Over the days observed through offset 6, how often profiles vanish and
/// come back.
pub fn reservation_audit(dataset: &CrawlDataset) -> Result<ReservationAudit, DatasetError> {
    let (days, _) = listings(dataset);
    let (mut n_days, mut profiles, mut reappeared, mut max_gap) = (0, 0, 0, 0);
    for (_, obs, list) in &days {
        if obs.complete_prefix() != Some(MAX_OFFSET) {
            continue;
        }
        n_days += 1;
        for p in list {
            profiles += 1;
            let pres = presence(obs, &p.id);
            let mut gap = 0;
            let mut came_back = false;
            for v in pres.iter().flatten() {
                if *v {
                    if gap > 0 {
                        came_back = true;
                        max_gap = max_gap.max(gap);
                    }
                    gap = 0;
                } else {
                    gap += 1;
                }
            }
            if came_back {
                reappeared += 1;
            }
        }
    }
    if n_days == 0 || profiles == 0 {
        return Err(DatasetError::NoCompleteDays);
    }
    Ok(ReservationAudit {
        days: n_days,
        profiles,
        reappeared,
        fraction: reappeared as f64 / profiles as f64,
        max_gap,
    })
}

/// Comparison of sale labels with the ground-truth trace.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelCheck {
    pub labeled_sold: usize,
    /// Labeled sold and confirmed by a later present cell, but no sale
    /// happened within the monitoring horizon.
    pub false_sold: usize,
    /// Like `false_sold`, among labels no later cell could confirm.
    pub false_sold_unverified: usize,
    /// Labeled sold within the window, but the sale came later in the horizon.
    pub mistimed: usize,
    /// Sold within the window but labeled unsold.
    pub false_unsold: usize,
}

pub fn check_labels(set: &DiagonalizedSet, trace: &MarketTrace) -> LabelCheck {
    let idx = trace_index(trace);
    let mut c = LabelCheck::default();
    for lp in &set.profiles {
        let Some((_, a)) = idx.get(lp.profile.id.as_str()) else { continue };
        let truth = a.true_sale_day.map(|n| n as usize);
        if lp.profile.sold == Some(true) {
            c.labeled_sold += 1;
            match truth {
                Some(n) if n <= set.window => {}
                Some(n) if n <= MAX_OFFSET => c.mistimed += 1,
                _ if lp.reading.unverified => c.false_sold_unverified += 1,
                _ => c.false_sold += 1,
            }
        } else if truth.is_some_and(|n| n <= set.window) {
            c.false_unsold += 1;
        }
    }
    c
}

/// Profiles of each listing day keyed by day, after de-duplication.
pub fn listing_profiles(dataset: &CrawlDataset) -> BTreeMap<u32, Vec<Profile>> {
    let (days, _) = listings(dataset);
    days.into_iter()
        .map(|(d, _, list)| (d, list.into_iter().cloned().collect()))
        .collect()
}

/// Ground-truth sold-within-`n` status by ID.
pub fn truth_sold_within(trace: &MarketTrace, n: u32) -> HashMap<&str, bool> {
    trace
        .appearances
        .values()
        .flatten()
        .map(|a| (a.profile.id.as_str(), a.true_sale_day.is_some_and(|s| s <= n)))
        .collect()
}
