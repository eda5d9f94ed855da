//! Crawler-fleet simulator.
//!
//! Three appearance crawlers split the ID space into disjoint shares and,
//! during the night after day `d`, each samples a fixed fraction of the
//! listable profiles in its share; their union is `L^d_0`. Three
//! persistence crawlers record which day-`d` IDs are still listed on the
//! following nights: crawler `k` covers monitoring offsets `2k+1` and
//! `2k+2`, and the check for offset `n` runs during the night after day
//! `d + n`.
//!
//! A night's session starts at midnight of the next calendar day, may wait
//! for the market to come back, climbs a fetch-timeout ladder and must
//! finish before the session deadline; otherwise the session's cells are
//! missing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{Appearance, MarketTrace, DAY_MINUTES, SLOT_MINUTES};
use crate::profile::{read_profiles_csv, write_profiles_csv, Profile, ProfileCsvError};
use crate::util::{fnv1a, rng_stream};

/// Monitoring offsets tracked after the appearance day.
pub const MAX_OFFSET: usize = 6;
pub const APPEARANCE_CRAWLERS: usize = 3;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CrawlError {
    #[error("invalid crawl parameters: {0}")]
    Params(String),
    #[error("no day has both a full listing and a reference count")]
    InsufficientData,
    #[error("crawl manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Profiles {
        path: String,
        source: ProfileCsvError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ListingDelay {
    None,
    Exponential { mean_hours: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrawlParams {
    pub per_crawler_sample_rate: f64,
    pub listing_delay: ListingDelay,
    pub session_failure_rate: f64,
    /// Mean minutes spent waiting for an unreachable market before crawling.
    pub unreachable_mean_minutes: f64,
    /// Probability that a page fetch times out at the current timeout.
    pub fetch_failure_prob: f64,
    pub fetch_timeout_base_secs: f64,
    /// Minutes after midnight by which a session must be done.
    pub session_deadline_minutes: f64,
    /// Minutes a successful session spends visiting pages.
    pub work_minutes: f64,
    pub seed: u64,
}

impl Default for CrawlParams {
    fn default() -> Self {
        CrawlParams {
            per_crawler_sample_rate: 0.25,
            listing_delay: ListingDelay::Exponential { mean_hours: 7.4 },
            session_failure_rate: 0.0,
            unreachable_mean_minutes: 10.0,
            fetch_failure_prob: 0.3,
            fetch_timeout_base_secs: 15.0,
            session_deadline_minutes: 120.0,
            work_minutes: 20.0,
            seed: 1,
        }
    }
}

impl CrawlParams {
    /// Every crawler sees every profile at once, and nothing fails.
    pub fn full_visibility(seed: u64) -> Self {
        CrawlParams {
            per_crawler_sample_rate: 1.0,
            listing_delay: ListingDelay::None,
            session_failure_rate: 0.0,
            unreachable_mean_minutes: 0.0,
            fetch_failure_prob: 0.0,
            seed,
            ..CrawlParams::default()
        }
    }

    pub fn validate(&self) -> Result<(), CrawlError> {
        let bad = |m: &str| Err(CrawlError::Params(m.to_string()));
        if !(self.per_crawler_sample_rate > 0.0 && self.per_crawler_sample_rate <= 1.0) {
            return bad("per_crawler_sample_rate must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.session_failure_rate) {
            return bad("session_failure_rate must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.fetch_failure_prob) {
            return bad("fetch_failure_prob must lie in [0, 1)");
        }
        if let ListingDelay::Exponential { mean_hours } = self.listing_delay {
            if !(mean_hours > 0.0) {
                return bad("listing delay mean must be > 0");
            }
        }
        if !(self.fetch_timeout_base_secs > 0.0)
            || !(self.session_deadline_minutes > 0.0)
            || self.unreachable_mean_minutes < 0.0
            || self.work_minutes < 0.0
        {
            return bad("timing parameters must be positive");
        }
        if self.session_deadline_minutes > f64::from(DAY_MINUTES) {
            return bad("session deadline must fall within the day");
        }
        Ok(())
    }
}

/// Everything observed about one appearance day.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DayObservation {
    /// Full-feature listing `L^d_0`.
    pub listing: Option<Vec<Profile>>,
    /// `L^d_1 ..= L^d_6`.
    pub persistence: [Option<BTreeSet<String>>; MAX_OFFSET],
    /// Copy of the market's own daily recap.
    pub recap: Option<u64>,
    /// True number of profiles offered that day, when known.
    pub reference_offered: Option<u64>,
}

impl DayObservation {
    pub fn has_listing(&self) -> bool {
        self.listing.is_some()
    }

    /// Presence of cell `n` (0 = listing).
    pub fn has_cell(&self, n: usize) -> bool {
        if n == 0 {
            self.listing.is_some()
        } else {
            self.persistence[n - 1].is_some()
        }
    }

    pub fn cell(&self, n: usize) -> Option<&BTreeSet<String>> {
        self.persistence[n - 1].as_ref()
    }

    /// Largest `n` such that cells `0..=n` are all present.
    pub fn complete_prefix(&self) -> Option<usize> {
        if !self.has_listing() {
            return None;
        }
        Some((1..=MAX_OFFSET).take_while(|&n| self.has_cell(n)).count())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrawlDataset {
    pub start_date: NaiveDate,
    /// One entry per observation day, including fully missing ones.
    pub days: BTreeMap<u32, DayObservation>,
}

impl CrawlDataset {
    pub fn n_days(&self) -> u32 {
        self.days.keys().next_back().map_or(0, |d| d + 1)
    }

    pub fn present_cells(&self) -> usize {
        self.days
            .values()
            .map(|o| (0..=MAX_OFFSET).filter(|&n| o.has_cell(n)).count())
            .sum()
    }

    pub fn date_of(&self, day: u32) -> NaiveDate {
        self.start_date + chrono::Duration::days(i64::from(day))
    }
}

/// Ground-truth companions of a campaign that the analysis never sees.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignTruth {
    /// IDs the appearance crawlers would have captured on each day had all
    /// their sessions succeeded.
    pub counterfactual_listing: BTreeMap<u32, Vec<String>>,
}

const STREAM_SESSION_FAIL: u64 = 10;
const STREAM_LADDER: u64 = 11;
const STREAM_DELAY: u64 = 1 << 21;
const STREAM_SAMPLE: u64 = 2 << 21;

#[derive(Debug, Clone, Copy)]
struct Session {
    ok: bool,
    /// Minute after midnight at which the crawler reads the listing.
    minute: f64,
}

fn slot_of(minute: f64) -> u8 {
    (minute / f64::from(SLOT_MINUTES)).floor() as u8
}

/// Session outcome per (night, crawler): index `[night][crawler]` with
/// crawlers 0..3 appearance and 3..6 persistence. Night `t` runs in the
/// early minutes of calendar day `t + 1`.
fn draw_sessions(trace: &MarketTrace, params: &CrawlParams, nights: u32) -> Vec<[Session; 6]> {
    let mut fail_rng = rng_stream(params.seed, STREAM_SESSION_FAIL);
    let mut ladder_rng = rng_stream(params.seed, STREAM_LADDER);
    let unreachable = (params.unreachable_mean_minutes > 0.0)
        .then(|| Exp::new(1.0 / params.unreachable_mean_minutes).expect("rate > 0"));
    (0..nights)
        .map(|t| {
            let mut row = [Session { ok: false, minute: 0.0 }; 6];
            for s in row.iter_mut() {
                // drawn unconditionally so raising the rate only adds failures
                let u: f64 = fail_rng.gen();
                let mut minute = unreachable.as_ref().map_or(0.0, |e| e.sample(&mut ladder_rng));
                let mut timeout = params.fetch_timeout_base_secs;
                while ladder_rng.gen::<f64>() < params.fetch_failure_prob && minute <= params.session_deadline_minutes {
                    minute += timeout / 60.0;
                    timeout *= 2.0;
                }
                let read_at = minute;
                let done = minute + params.work_minutes;
                let market_down = trace.downtime.contains(&(t + 1));
                *s = Session {
                    ok: u >= params.session_failure_rate && done <= params.session_deadline_minutes && !market_down,
                    minute: read_at,
                };
            }
            row
        })
        .collect()
}

fn share_of(id: &str) -> usize {
    (fnv1a(id.as_bytes()) % APPEARANCE_CRAWLERS as u64) as usize
}

/// Simulate a crawl campaign over `trace`.
pub fn run_campaign(trace: &MarketTrace, params: &CrawlParams) -> Result<CrawlDataset, CrawlError> {
    run_campaign_with_truth(trace, params).map(|(d, _)| d)
}

pub fn run_campaign_with_truth(
    trace: &MarketTrace,
    params: &CrawlParams,
) -> Result<(CrawlDataset, CampaignTruth), CrawlError> {
    params.validate()?;
    let n_days = trace.n_days;
    let nights = n_days + MAX_OFFSET as u32 + 1;
    let sessions = draw_sessions(trace, params, nights);
    let mut days = BTreeMap::new();
    let mut counterfactual = BTreeMap::new();

    for d in 0..n_days {
        let empty = Vec::new();
        let list: &Vec<Appearance> = trace.appearances.get(&d).unwrap_or(&empty);
        let mut delay_rng = rng_stream(params.seed, STREAM_DELAY + u64::from(d));
        let listable_at: Vec<f64> = list
            .iter()
            .map(|a| {
                let delay = match params.listing_delay {
                    ListingDelay::None => 0.0,
                    ListingDelay::Exponential { mean_hours } => {
                        Exp::new(1.0 / (mean_hours * 60.0)).expect("rate > 0").sample(&mut delay_rng)
                    }
                };
                // every profile is listed by the end of the following day
                (f64::from(a.minute) + delay).min(2.0 * f64::from(DAY_MINUTES))
            })
            .collect();
        // whether profile i is visible to a reader at `minute` of calendar day `day`
        let visible = |i: usize, day: u32, minute: f64| -> bool {
            let a = &list[i];
            let elapsed = f64::from(DAY_MINUTES) * f64::from(day - d) + minute;
            listable_at[i] <= elapsed && !a.sold_before(d, day) && !a.reserved_at(day, slot_of(minute))
        };

        // appearance crawlers, night d
        let mut sample_rng = rng_stream(params.seed, STREAM_SAMPLE + u64::from(d));
        let mut captured: Vec<usize> = Vec::new();
        for (c, session) in sessions[d as usize][..APPEARANCE_CRAWLERS].iter().enumerate() {
            let eligible: Vec<usize> = (0..list.len())
                .filter(|&i| share_of(&list[i].profile.id) == c && visible(i, d + 1, session.minute))
                .collect();
            let k = (params.per_crawler_sample_rate * eligible.len() as f64).round() as usize;
            let picked = sample(&mut sample_rng, eligible.len(), k.min(eligible.len()));
            captured.extend(picked.iter().map(|j| eligible[j]));
        }
        captured.sort_unstable();
        let all_ok = sessions[d as usize][..APPEARANCE_CRAWLERS].iter().all(|s| s.ok);
        let mut obs = DayObservation {
            listing: all_ok.then(|| captured.iter().map(|&i| list[i].profile.clone()).collect()),
            reference_offered: Some(list.len() as u64),
            recap: sessions[d as usize][0].ok.then(|| trace.recap.get(&d).copied().unwrap_or(0)),
            ..DayObservation::default()
        };
        counterfactual.insert(d, captured.iter().map(|&i| list[i].profile.id.clone()).collect());

        for n in 1..=MAX_OFFSET {
            let night = d as usize + n;
            let session = sessions[night][APPEARANCE_CRAWLERS + (n - 1) / 2];
            if !session.ok {
                continue;
            }
            let day = d + n as u32 + 1;
            let ids = (0..list.len())
                .filter(|&i| visible(i, day, session.minute))
                .map(|i| list[i].profile.id.clone())
                .collect();
            obs.persistence[n - 1] = Some(ids);
        }
        days.insert(d, obs);
    }
    Ok((
        CrawlDataset {
            start_date: trace.start_date,
            days,
        },
        CampaignTruth {
            counterfactual_listing: counterfactual,
        },
    ))
}

/// Mean over qualifying days of `|L^d_0|` divided by the day's reference
/// count. The true offered count is the reference when known, else the
/// market recap.
pub fn effective_sampling_ratio(dataset: &CrawlDataset) -> Result<f64, CrawlError> {
    let ratios: Vec<f64> = dataset
        .days
        .values()
        .filter_map(|o| {
            let listing = o.listing.as_ref()?;
            let reference = o.reference_offered.or(o.recap).filter(|&r| r > 0)?;
            Some(listing.len() as f64 / reference as f64)
        })
        .collect();
    if ratios.is_empty() {
        return Err(CrawlError::InsufficientData);
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Which cells of a day survive a missingness mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayMask {
    pub listing: bool,
    pub persistence: [bool; MAX_OFFSET],
    pub recap: bool,
}

impl DayMask {
    pub const ALL: DayMask = DayMask {
        listing: true,
        persistence: [true; MAX_OFFSET],
        recap: true,
    };
}

/// Day-level pattern of missing cells imposed on top of a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessPattern {
    pub days: Vec<DayMask>,
}

/// Day types of the built-in 161-day pattern with their counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DayKind {
    /// Listing present and cells `1..=n` present, cell `n + 1` missing.
    Prefix(usize),
    /// No listing; cell `n` is the first present one.
    FirstCell(usize),
    RecapOnly,
    Nothing,
}

const PAPER_LIKE_KINDS: [(DayKind, usize); 12] = [
    (DayKind::Prefix(0), 6),
    (DayKind::Prefix(1), 12),
    (DayKind::Prefix(2), 3),
    (DayKind::Prefix(3), 9),
    (DayKind::Prefix(4), 5),
    (DayKind::Prefix(5), 5),
    (DayKind::Prefix(6), 67),
    (DayKind::FirstCell(1), 42),
    (DayKind::FirstCell(2), 6),
    (DayKind::FirstCell(3), 1),
    (DayKind::RecapOnly, 4),
    (DayKind::Nothing, 1),
];

impl MissingnessPattern {
    pub fn none(n_days: u32) -> Self {
        MissingnessPattern {
            days: vec![DayMask::ALL; n_days as usize],
        }
    }

    /// A seeded pattern with the day-type mix of a 161-day campaign: 107
    /// listing days whose complete prefixes are distributed 6/12/3/9/5/5/67
    /// over lengths 0..=6, 42 days with only persistence from offset 1, 7
    /// days whose first persistence cell is offset 2 or 3, 4 recap-only
    /// days and one day with nothing. Other lengths rescale the counts.
    pub fn paper_like(n_days: u32, seed: u64) -> Self {
        let total: usize = PAPER_LIKE_KINDS.iter().map(|(_, c)| c).sum();
        let mut counts: Vec<usize> = PAPER_LIKE_KINDS
            .iter()
            .map(|(_, c)| (*c as f64 * f64::from(n_days) / total as f64).round() as usize)
            .collect();
        let sum: usize = counts.iter().sum();
        let full = 6; // index of Prefix(6)
        counts[full] = (counts[full] + n_days as usize).saturating_sub(sum);
        let mut kinds: Vec<DayKind> = PAPER_LIKE_KINDS
            .iter()
            .zip(&counts)
            .flat_map(|((k, _), c)| std::iter::repeat(*k).take(*c))
            .collect();
        kinds.truncate(n_days as usize);
        let mut rng = rng_stream(seed, 0x4d49_5353);
        use rand::seq::SliceRandom;
        kinds.shuffle(&mut rng);
        let days = kinds
            .into_iter()
            .map(|k| {
                let mut m = DayMask {
                    listing: false,
                    persistence: [false; MAX_OFFSET],
                    recap: false,
                };
                let later = |m: &mut DayMask, from: usize, rng: &mut rand_chacha::ChaCha8Rng| {
                    for n in from..=MAX_OFFSET {
                        m.persistence[n - 1] = rng.gen::<f64>() < 0.8;
                    }
                };
                match k {
                    DayKind::Prefix(p) => {
                        m.listing = true;
                        for n in 1..=p {
                            m.persistence[n - 1] = true;
                        }
                        later(&mut m, p + 2, &mut rng);
                        m.recap = rng.gen::<f64>() < 0.9;
                    }
                    DayKind::FirstCell(f) => {
                        m.persistence[f - 1] = true;
                        later(&mut m, f + 1, &mut rng);
                        m.recap = rng.gen::<f64>() < 0.5;
                    }
                    DayKind::RecapOnly => m.recap = true,
                    DayKind::Nothing => {}
                }
                m
            })
            .collect();
        MissingnessPattern { days }
    }

    /// Drop every cell the mask marks missing. Days beyond the mask keep
    /// their cells.
    pub fn apply(&self, dataset: &mut CrawlDataset) {
        for (d, obs) in dataset.days.iter_mut() {
            let Some(m) = self.days.get(*d as usize) else { continue };
            if !m.listing {
                obs.listing = None;
            }
            for n in 0..MAX_OFFSET {
                if !m.persistence[n] {
                    obs.persistence[n] = None;
                }
            }
            if !m.recap {
                obs.recap = None;
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    start_date: NaiveDate,
    days: Vec<ManifestDay>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDay {
    day: u32,
    listing: Option<String>,
    persistence: Vec<Option<String>>,
    recap: Option<u64>,
    reference_offered: Option<u64>,
}

impl CrawlDataset {
    /// Write `manifest.json` plus one CSV per present cell into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CrawlError> {
        fs::create_dir_all(dir)?;
        let mut days = Vec::new();
        for (&d, obs) in &self.days {
            let listing = match &obs.listing {
                Some(profiles) => {
                    let name = format!("listing_{d:04}.csv");
                    let f = fs::File::create(dir.join(&name))?;
                    write_profiles_csv(std::io::BufWriter::new(f), profiles).map_err(|source| {
                        CrawlError::Profiles {
                            path: name.clone(),
                            source,
                        }
                    })?;
                    Some(name)
                }
                None => None,
            };
            let mut persistence = Vec::new();
            for (k, cell) in obs.persistence.iter().enumerate() {
                persistence.push(match cell {
                    Some(ids) => {
                        let name = format!("persist_{d:04}_{}.csv", k + 1);
                        let mut w = csv::Writer::from_path(dir.join(&name))?;
                        w.write_record(["id"])?;
                        for id in ids {
                            w.write_record([id])?;
                        }
                        w.flush()?;
                        Some(name)
                    }
                    None => None,
                });
            }
            days.push(ManifestDay {
                day: d,
                listing,
                persistence,
                recap: obs.recap,
                reference_offered: obs.reference_offered,
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            start_date: self.start_date,
            days,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CrawlError> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(CrawlError::Manifest(format!("unsupported version {}", manifest.version)));
        }
        let mut days = BTreeMap::new();
        for md in manifest.days {
            if md.persistence.len() != MAX_OFFSET {
                return Err(CrawlError::Manifest(format!(
                    "day {} lists {} persistence cells, expected {MAX_OFFSET}",
                    md.day,
                    md.persistence.len()
                )));
            }
            let listing = match &md.listing {
                Some(name) => {
                    let f = fs::File::open(dir.join(name))?;
                    Some(read_profiles_csv(std::io::BufReader::new(f)).map_err(|source| CrawlError::Profiles {
                        path: name.clone(),
                        source,
                    })?)
                }
                None => None,
            };
            let mut obs = DayObservation {
                listing,
                recap: md.recap,
                reference_offered: md.reference_offered,
                ..DayObservation::default()
            };
            for (k, name) in md.persistence.iter().enumerate() {
                if let Some(name) = name {
                    let mut rdr = csv::Reader::from_path(dir.join(name))?;
                    let mut ids = BTreeSet::new();
                    for rec in rdr.records() {
                        ids.insert(rec?.get(0).unwrap_or_default().to_string());
                    }
                    obs.persistence[k] = Some(ids);
                }
            }
            if days.insert(md.day, obs).is_some() {
                return Err(CrawlError::Manifest(format!("day {} listed twice", md.day)));
            }
        }
        Ok(CrawlDataset {
            start_date: manifest.start_date,
            days,
        })
    }
}

/// Index from profile ID to its appearance, for ground-truth lookups.
pub fn trace_index(trace: &MarketTrace) -> HashMap<&str, (u32, &Appearance)> {
    trace
        .appearances
        .iter()
        .flat_map(|(&d, list)| list.iter().map(move |a| (a.profile.id.as_str(), (d, a))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{generate_market, MarketConfig, VolumeModel};

    fn trace(n_days: u32, mean: f64, seed: u64) -> MarketTrace {
        generate_market(&MarketConfig {
            n_days,
            seed,
            volume: VolumeModel {
                mean,
                persistence: 0.0,
                log_sd: 0.0,
            },
            ..MarketConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn total_failure_leaves_nothing() {
        let t = trace(6, 50.0, 1);
        let p = CrawlParams {
            session_failure_rate: 1.0,
            ..CrawlParams::default()
        };
        let ds = run_campaign(&t, &p).unwrap();
        assert_eq!(ds.present_cells(), 0);
        assert!(ds.days.values().all(|o| o.recap.is_none()));
    }

    #[test]
    fn full_visibility_reproduces_truth() {
        let mut c = MarketConfig::default();
        c.n_days = 8;
        c.volume.mean = 60.0;
        c.reservation_rate = 0.0;
        let t = generate_market(&c).unwrap();
        let ds = run_campaign(&t, &CrawlParams::full_visibility(3)).unwrap();
        for (d, obs) in &ds.days {
            let truth: Vec<&Profile> = t.appearances[d].iter().map(|a| &a.profile).collect();
            let got: Vec<&Profile> = obs.listing.as_ref().unwrap().iter().collect();
            assert_eq!(got, truth);
            for n in 1..=MAX_OFFSET {
                let expect: BTreeSet<String> = t.appearances[d]
                    .iter()
                    .filter(|a| a.true_sale_day.map_or(true, |s| s as usize > n))
                    .map(|a| a.profile.id.clone())
                    .collect();
                assert_eq!(obs.cell(n).unwrap(), &expect);
            }
        }
        assert_eq!(effective_sampling_ratio(&ds).unwrap(), 1.0);
    }

    #[test]
    fn paper_regime_sampling_ratio() {
        let t = trace(40, 600.0, 5);
        let ds = run_campaign(&t, &CrawlParams::default()).unwrap();
        let r = effective_sampling_ratio(&ds).unwrap();
        assert!((r - 0.176).abs() < 0.01, "{r}");
    }

    #[test]
    fn half_captured_listing_gives_half() {
        let t = trace(5, 40.0, 2);
        let mut ds = run_campaign(&t, &CrawlParams::full_visibility(1)).unwrap();
        for obs in ds.days.values_mut() {
            let listing = obs.listing.take().unwrap();
            let n = listing.len();
            obs.listing = Some(listing.into_iter().step_by(2).collect());
            obs.reference_offered = Some(2 * obs.listing.as_ref().unwrap().len() as u64);
            assert!(n > 0);
        }
        assert_eq!(effective_sampling_ratio(&ds).unwrap(), 0.5);
    }

    #[test]
    fn sampling_ratio_needs_reference() {
        let t = trace(3, 20.0, 2);
        let mut ds = run_campaign(&t, &CrawlParams::default()).unwrap();
        for obs in ds.days.values_mut() {
            obs.reference_offered = None;
            obs.recap = None;
        }
        assert!(matches!(effective_sampling_ratio(&ds), Err(CrawlError::InsufficientData)));
    }

    #[test]
    fn failures_are_monotone_per_seed() {
        let t = trace(30, 30.0, 4);
        let mut last = usize::MAX;
        for rate in [0.0, 0.1, 0.3, 0.6, 0.9] {
            let p = CrawlParams {
                session_failure_rate: rate,
                seed: 17,
                ..CrawlParams::default()
            };
            let cells = run_campaign(&t, &p).unwrap().present_cells();
            assert!(cells <= last, "rate {rate}: {cells} > {last}");
            last = cells;
        }
    }

    #[test]
    fn persistence_cells_are_consistent_with_truth() {
        let t = trace(20, 200.0, 8);
        let ds = run_campaign(&t, &CrawlParams::default()).unwrap();
        let idx = trace_index(&t);
        for (&d, obs) in &ds.days {
            for n in 1..=MAX_OFFSET {
                let Some(ids) = obs.cell(n) else { continue };
                for id in ids {
                    let (day, a) = idx[id.as_str()];
                    assert_eq!(day, d);
                    assert!(a.true_sale_day.map_or(true, |s| s as usize > n));
                }
                // later cells only gain IDs through reservations
                if n < MAX_OFFSET {
                    if let Some(next) = obs.cell(n + 1) {
                        for id in next.difference(ids) {
                            assert!(!idx[id.as_str()].1.reservations.is_empty());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn downtime_blocks_the_nights_crawl() {
        let mut c = MarketConfig::default();
        c.n_days = 10;
        c.volume.mean = 30.0;
        c.downtime_days = [5].into_iter().collect();
        let t = generate_market(&c).unwrap();
        let ds = run_campaign(&t, &CrawlParams::full_visibility(1)).unwrap();
        // the session of night 4 runs on day 5
        assert!(ds.days[&4].listing.is_none());
        assert!(ds.days[&3].cell(1).is_none());
        assert!(ds.days[&5].listing.is_some());
    }

    #[test]
    fn captured_profiles_resemble_offered() {
        let t = trace(12, 600.0, 9);
        let (_, truth) = run_campaign_with_truth(&t, &CrawlParams::default()).unwrap();
        let idx = trace_index(&t);
        let captured: Vec<f64> = truth
            .counterfactual_listing
            .values()
            .flatten()
            .map(|id| idx[id.as_str()].1.profile.price)
            .take(5000)
            .collect();
        let offered: Vec<f64> = t.appearances.values().flatten().map(|a| a.profile.price).take(5000).collect();
        assert!(captured.len() >= 1000);
        let r = crate::stats::rank_sum(&captured, &offered).unwrap();
        assert!(r.p_value > 0.01, "p = {}", r.p_value);
    }

    #[test]
    fn paper_like_pattern_counts() {
        let m = MissingnessPattern::paper_like(161, 3);
        assert_eq!(m.days.len(), 161);
        let listing = m.days.iter().filter(|d| d.listing).count();
        assert_eq!(listing, 107);
        let n1 = m.days.iter().filter(|d| d.listing && d.persistence[0]).count();
        assert_eq!(n1, 101);
        let b = m.days.iter().filter(|d| !d.listing && d.persistence[0]).count();
        assert_eq!(b, 42);
        let full = m.days.iter().filter(|d| d.listing && d.persistence.iter().all(|p| *p)).count();
        assert_eq!(full, 67);
        assert_eq!(MissingnessPattern::paper_like(40, 1).days.len(), 40);
    }

    #[test]
    fn save_load_round_trip() {
        let t = trace(6, 30.0, 2);
        let mut ds = run_campaign(&t, &CrawlParams::default()).unwrap();
        MissingnessPattern::paper_like(6, 2).apply(&mut ds);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = CrawlDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_bad_params() {
        let t = trace(2, 5.0, 1);
        for p in [
            CrawlParams {
                per_crawler_sample_rate: 0.0,
                ..CrawlParams::default()
            },
            CrawlParams {
                session_failure_rate: 1.2,
                ..CrawlParams::default()
            },
        ] {
            assert!(matches!(run_campaign(&t, &p), Err(CrawlError::Params(_))));
        }
    }
}
