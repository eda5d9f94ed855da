//! Ground-truth market generator.
//!
//! Time is measured in calendar days from the start of the observation
//! period; each day is split into 48 slots of 30 minutes. A profile that
//! appears on day `d` can be sold on day `d + n` (`n >= 1`) at a minute in
//! `[SALE_START_MINUTE, 1440)`, so the nightly crawls (which finish before
//! that minute) never race a sale.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::sync::Arc;

use chrono::{Duration, NaiveDate};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::{Exp, Gamma, LogNormal, Normal, Poisson, WeightedAliasIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::ResourceCatalog;
use crate::geo::{self, Country};
use crate::profile::{Browser, BrowserData, Category, CategoryCounts, Os, Profile, Region};
use crate::stats::logistic;
use crate::util::rng_stream;

pub const SLOTS_PER_DAY: u8 = 48;
pub const SLOT_MINUTES: u16 = 30;
pub const DAY_MINUTES: u16 = 1440;
/// Earliest minute of a day at which a sale may happen.
pub const SALE_START_MINUTE: u16 = 120;
/// Reservations are only drawn this many days past the appearance day.
pub const RESERVATION_DAYS: u32 = 7;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("invalid market configuration: {0}")]
    Config(String),
    #[error("day {day} outside the trace range 0..{n_days}")]
    Range { day: u32, n_days: u32 },
    #[error("trace file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeModel {
    /// Mean number of appearances on a normal day.
    pub mean: f64,
    /// AR(1) coefficient of the log-volume deviation.
    pub persistence: f64,
    /// Stationary standard deviation of the log-volume deviation.
    pub log_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceModel {
    /// Median price (USD) of a region's profiles at reference wealth and credentials.
    pub median: BTreeMap<Region, f64>,
    /// Log-scale noise SD per region.
    pub log_sd: BTreeMap<Region, f64>,
    /// Elasticity of price to `1 + total credentials`.
    pub credential_slope: f64,
    /// Elasticity of price to per-capita GDP.
    pub wdi_slope: f64,
    pub reference_credentials: f64,
    pub reference_wdi: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountModel {
    pub mean: f64,
    /// Gamma shape of the category-specific multiplier (smaller = heavier tail).
    pub shape: f64,
    pub max: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceModel {
    pub categories: BTreeMap<Category, CountModel>,
    /// Gamma shape of the per-profile multiplier shared by all categories.
    pub frailty_shape: f64,
    /// Per-region multiplier on every category mean.
    pub region_multiplier: BTreeMap<Region, f64>,
    /// Probability that a credential is listed under an alias identifier.
    pub alias_rate: f64,
    /// Exponent of the within-category platform popularity law.
    pub popularity_exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrowserModel {
    pub presence: f64,
    pub cookie_log_mean: f64,
    pub cookie_log_sd: f64,
    pub cookie_max: u32,
}

/// Features the latent sale model is defined on. Each is z-scored over the
/// generated population before the coefficients apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SaleFeature {
    LogPrice,
    LogWdi,
    Chrome,
    ChromeCookies,
    Firefox,
    FirefoxCookies,
    Opera,
    OperaCookies,
    Edge,
    EdgeCookies,
    Services,
    Social,
    Commerce,
    MoneyTransfer,
    Crypto,
    OtherCredentials,
    Win8,
    Win7,
    OsOther,
}

impl SaleFeature {
    pub const ALL: [SaleFeature; 19] = [
        SaleFeature::LogPrice,
        SaleFeature::LogWdi,
        SaleFeature::Chrome,
        SaleFeature::ChromeCookies,
        SaleFeature::Firefox,
        SaleFeature::FirefoxCookies,
        SaleFeature::Opera,
        SaleFeature::OperaCookies,
        SaleFeature::Edge,
        SaleFeature::EdgeCookies,
        SaleFeature::Services,
        SaleFeature::Social,
        SaleFeature::Commerce,
        SaleFeature::MoneyTransfer,
        SaleFeature::Crypto,
        SaleFeature::OtherCredentials,
        SaleFeature::Win8,
        SaleFeature::Win7,
        SaleFeature::OsOther,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaleModel {
    pub intercept: f64,
    #[serde(default)]
    pub coefficients: BTreeMap<SaleFeature, f64>,
    /// SD of the random intercept attached to each calendar day.
    pub day_sd: f64,
    /// Hazard on day `n` is the day-1 probability times `later_day_decay^(n-1)`.
    pub later_day_decay: f64,
    /// Profiles unsold after this many days stay unsold.
    pub horizon_days: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecapNoise {
    pub undercount_prob: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketConfig {
    pub n_days: u32,
    pub start_date: NaiveDate,
    pub seed: u64,
    pub volume: VolumeModel,
    pub regional_mix: BTreeMap<Region, f64>,
    pub price_model: PriceModel,
    pub resource_model: ResourceModel,
    pub os_mix: BTreeMap<Os, f64>,
    pub browser_model: BTreeMap<Browser, BrowserModel>,
    pub sale_model: SaleModel,
    pub reservation_rate: f64,
    pub downtime_days: BTreeSet<u32>,
    pub recap_noise: RecapNoise,
}

fn map<K: Ord + Copy, V: Clone>(pairs: &[(K, V)]) -> BTreeMap<K, V> {
    pairs.iter().cloned().collect()
}

impl Default for MarketConfig {
    fn default() -> Self {
        use Region::*;
        let cm = |mean, shape, max| CountModel { mean, shape, max };
        let bm = |presence, cookie_log_mean, cookie_log_sd| BrowserModel {
            presence,
            cookie_log_mean,
            cookie_log_sd,
            cookie_max: 10_000,
        };
        let coefficients = map(&[
            (SaleFeature::LogPrice, 0.10),
            (SaleFeature::LogWdi, 0.7),
            (SaleFeature::Chrome, 0.35),
            (SaleFeature::ChromeCookies, 0.10),
            (SaleFeature::Firefox, 0.15),
            (SaleFeature::FirefoxCookies, 0.05),
            (SaleFeature::Edge, 0.25),
            (SaleFeature::EdgeCookies, 0.05),
            (SaleFeature::Services, 0.05),
            (SaleFeature::Commerce, 0.05),
            (SaleFeature::MoneyTransfer, 0.05),
            (SaleFeature::Win8, -0.10),
            (SaleFeature::Win7, -0.15),
            (SaleFeature::OsOther, 0.60),
        ]);
        MarketConfig {
            n_days: 161,
            start_date: NaiveDate::from_ymd_opt(2021, 1, 21).expect("valid date"),
            seed: 1,
            volume: VolumeModel {
                mean: 606.0,
                persistence: 0.8,
                log_sd: 0.3,
            },
            regional_mix: map(&[
                (Europe, 0.6214),
                (NorthAmerica, 0.1197),
                (SouthAmerica, 0.1183),
                (Asia, 0.1101),
                (Africa, 0.0175),
                (Oceania, 0.0130),
            ]),
            price_model: PriceModel {
                median: map(&[
                    (Europe, 16.0),
                    (NorthAmerica, 23.0),
                    (SouthAmerica, 20.0),
                    (Asia, 17.0),
                    (Africa, 30.0),
                    (Oceania, 17.0),
                ]),
                log_sd: Region::ALL.iter().map(|r| (*r, 0.8)).collect(),
                credential_slope: 0.6,
                wdi_slope: 0.15,
                reference_credentials: 20.0,
                reference_wdi: 27_000.0,
                min: 1.0,
                max: 350.0,
            },
            resource_model: ResourceModel {
                categories: map(&[
                    (Category::Services, cm(10.78, 1.0, 569)),
                    (Category::Social, cm(4.09, 0.7, 263)),
                    (Category::Commerce, cm(3.17, 0.4, 149)),
                    (Category::MoneyTransfer, cm(1.38, 0.15, 248)),
                    (Category::Crypto, cm(0.18, 0.05, 53)),
                    (Category::Other, cm(0.25, 0.12, 38)),
                ]),
                frailty_shape: 0.4,
                region_multiplier: map(&[
                    (Europe, 1.0),
                    (NorthAmerica, 1.35),
                    (SouthAmerica, 0.95),
                    (Asia, 0.65),
                    (Africa, 0.9),
                    (Oceania, 1.1),
                ]),
                alias_rate: 0.3,
                popularity_exponent: 0.9,
            },
            os_mix: map(&[(Os::Win10, 0.78), (Os::Win8, 0.09), (Os::Win7, 0.12), (Os::Other, 0.01)]),
            browser_model: map(&[
                (Browser::Chrome, bm(0.76, 6.83, 1.0)),
                (Browser::Firefox, bm(0.26, 5.59, 1.4)),
                (Browser::Opera, bm(0.20, 5.30, 1.5)),
                (Browser::Edge, bm(0.10, 4.94, 1.5)),
            ]),
            sale_model: SaleModel {
                intercept: -2.55,
                coefficients,
                day_sd: 0.3,
                later_day_decay: 0.6,
                horizon_days: 30,
            },
            reservation_rate: 0.12,
            downtime_days: BTreeSet::new(),
            recap_noise: RecapNoise {
                undercount_prob: 0.3,
                ratio_min: 0.6,
                ratio_max: 0.95,
            },
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<(), MarketError> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(MarketError::Config(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

fn check_nonneg(name: &str, v: f64) -> Result<(), MarketError> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(MarketError::Config(format!("{name} = {v} must be finite and >= 0")));
    }
    Ok(())
}

fn check_mix<K: std::fmt::Debug + Ord + Copy>(
    name: &str,
    mix: &BTreeMap<K, f64>,
    levels: &[K],
) -> Result<(), MarketError> {
    for (k, p) in mix {
        check_prob(&format!("{name}[{k:?}]"), *p)?;
    }
    let total: f64 = levels.iter().map(|k| mix.get(k).copied().unwrap_or(0.0)).sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(MarketError::Config(format!("{name} sums to {total}, expected 1")));
    }
    Ok(())
}

impl MarketConfig {
    pub fn validate(&self) -> Result<(), MarketError> {
        check_mix("regional_mix", &self.regional_mix, Region::ALL)?;
        check_mix("os_mix", &self.os_mix, Os::ALL)?;
        check_prob("reservation_rate", self.reservation_rate)?;
        check_prob("recap_noise.undercount_prob", self.recap_noise.undercount_prob)?;
        let rn = &self.recap_noise;
        if !(0.0 <= rn.ratio_min && rn.ratio_min <= rn.ratio_max && rn.ratio_max <= 1.0) {
            return Err(MarketError::Config("recap ratio range must satisfy 0 <= min <= max <= 1".into()));
        }
        check_nonneg("volume.mean", self.volume.mean)?;
        check_nonneg("volume.log_sd", self.volume.log_sd)?;
        if !(self.volume.persistence.abs() < 1.0) {
            return Err(MarketError::Config("volume.persistence must lie in (-1, 1)".into()));
        }
        for r in Region::ALL {
            let m = self.price_model.median.get(r).copied().unwrap_or(f64::NAN);
            if !(m > 0.0) {
                return Err(MarketError::Config(format!("price_model.median[{r}] must be > 0")));
            }
            check_nonneg(&format!("price_model.log_sd[{r}]"), self.price_model.log_sd.get(r).copied().unwrap_or(0.0))?;
            check_nonneg(
                &format!("resource_model.region_multiplier[{r}]"),
                self.resource_model.region_multiplier.get(r).copied().unwrap_or(1.0),
            )?;
        }
        let pm = &self.price_model;
        if !(pm.min > 0.0 && pm.min <= pm.max) || pm.reference_wdi <= 0.0 || pm.reference_credentials < 0.0 {
            return Err(MarketError::Config("price_model bounds/references are inconsistent".into()));
        }
        for c in Category::ALL {
            let m = self.resource_model.categories.get(c).ok_or_else(|| {
                MarketError::Config(format!("resource_model.categories lacks {c}"))
            })?;
            check_nonneg(&format!("resource_model.categories[{c}].mean"), m.mean)?;
            if !(m.shape > 0.0) {
                return Err(MarketError::Config(format!("resource_model.categories[{c}].shape must be > 0")));
            }
        }
        if !(self.resource_model.frailty_shape > 0.0) {
            return Err(MarketError::Config("resource_model.frailty_shape must be > 0".into()));
        }
        check_prob("resource_model.alias_rate", self.resource_model.alias_rate)?;
        for b in Browser::ALL {
            let m = self.browser_model.get(b).ok_or_else(|| {
                MarketError::Config(format!("browser_model lacks {b}"))
            })?;
            check_prob(&format!("browser_model[{b}].presence"), m.presence)?;
            check_nonneg(&format!("browser_model[{b}].cookie_log_sd"), m.cookie_log_sd)?;
        }
        let sm = &self.sale_model;
        check_nonneg("sale_model.day_sd", sm.day_sd)?;
        check_prob("sale_model.later_day_decay", sm.later_day_decay)?;
        if !sm.intercept.is_finite() || sm.coefficients.values().any(|c| !c.is_finite()) {
            return Err(MarketError::Config("sale_model coefficients must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    /// Calendar day of the reservation.
    pub day: u32,
    pub slot: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub profile: Profile,
    /// Minute of the appearance day at which the profile was put up.
    pub minute: u16,
    pub true_sale_day: Option<u32>,
    pub sale_minute: Option<u16>,
    pub reservations: Vec<Reservation>,
    /// Latent linear predictor (without the day effect).
    pub eta: f64,
}

impl Appearance {
    /// True if the profile is reserved during `slot` of calendar day `day`.
    pub fn reserved_at(&self, day: u32, slot: u8) -> bool {
        self.reservations.iter().any(|r| r.day == day && r.slot == slot)
    }

    /// True if the profile has been sold before calendar day `day` begins,
    /// given it appeared on `appearance_day`.
    pub fn sold_before(&self, appearance_day: u32, day: u32) -> bool {
        self.true_sale_day.is_some_and(|n| appearance_day + n < day)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketTrace {
    pub n_days: u32,
    pub start_date: NaiveDate,
    pub seed: u64,
    pub appearances: BTreeMap<u32, Vec<Appearance>>,
    pub recap: BTreeMap<u32, u64>,
    pub downtime: BTreeSet<u32>,
    /// Random intercept of every calendar day the sale model touched.
    pub day_effects: Vec<f64>,
}

impl MarketTrace {
    pub fn appearance_count(&self, day: u32) -> usize {
        self.appearances.get(&day).map_or(0, Vec::len)
    }

    pub fn total_profiles(&self) -> usize {
        self.appearances.values().map(Vec::len).sum()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), MarketError> {
        let header = TraceRecord::Header {
            n_days: self.n_days,
            start_date: self.start_date,
            seed: self.seed,
            recap: self.recap.iter().map(|(d, c)| (*d, *c)).collect(),
            downtime: self.downtime.clone(),
            day_effects: self.day_effects.clone(),
        };
        serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for (&day, list) in &self.appearances {
            // empty days are still recorded so the day set round-trips
            if list.is_empty() {
                serde_json::to_writer(&mut w, &TraceRecord::EmptyDay { day }).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            for a in list {
                let rec = TraceRecordRef::Appearance { day, appearance: a };
                serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, MarketError> {
        let mut trace: Option<MarketTrace> = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| MarketError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            match (rec, trace.as_mut()) {
                (
                    TraceRecord::Header {
                        n_days,
                        start_date,
                        seed,
                        recap,
                        downtime,
                        day_effects,
                    },
                    None,
                ) => {
                    trace = Some(MarketTrace {
                        n_days,
                        start_date,
                        seed,
                        appearances: BTreeMap::new(),
                        recap: recap.into_iter().collect(),
                        downtime,
                        day_effects,
                    })
                }
                (TraceRecord::Appearance { day, appearance }, Some(t)) => {
                    t.appearances.entry(day).or_default().push(appearance)
                }
                (TraceRecord::EmptyDay { day }, Some(t)) => {
                    t.appearances.entry(day).or_default();
                }
                _ => {
                    return Err(MarketError::Parse {
                        line: i + 1,
                        msg: "header must come first and only once".into(),
                    })
                }
            }
        }
        trace.ok_or(MarketError::Parse {
            line: 0,
            msg: "empty trace file".into(),
        })
    }
}

#[derive(Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceRecord {
    Header {
        n_days: u32,
        start_date: NaiveDate,
        seed: u64,
        // pairs rather than a map: tagged enums cannot read integer map keys
        recap: Vec<(u32, u64)>,
        downtime: BTreeSet<u32>,
        day_effects: Vec<f64>,
    },
    EmptyDay {
        day: u32,
    },
    Appearance {
        day: u32,
        appearance: Appearance,
    },
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceRecordRef<'a> {
    Appearance { day: u32, appearance: &'a Appearance },
}

/// Reported appearance count for day `d`.
pub fn recap_for_day(trace: &MarketTrace, d: u32) -> Result<u64, MarketError> {
    if d >= trace.n_days {
        return Err(MarketError::Range {
            day: d,
            n_days: trace.n_days,
        });
    }
    Ok(trace.recap.get(&d).copied().unwrap_or(0))
}

const STREAM_VOLUME: u64 = 1;
const STREAM_DAY_EFFECTS: u64 = 2;
const STREAM_RECAP: u64 = 3;
const STREAM_PROFILES: u64 = 1 << 20;
const STREAM_OUTCOMES: u64 = 2 << 20;

/// Raw (unstandardized) sale features of a profile whose country has GDP
/// `gdp`; a missing GDP yields NaN for the wealth feature.
pub fn raw_sale_features(p: &Profile, gdp: Option<f64>) -> [f64; 19] {
    let b = |br: Browser| p.browser(br);
    let flag = |x: bool| if x { 1.0 } else { 0.0 };
    let cookies = |br: Browser| (f64::from(b(br).cookies)).ln_1p();
    let cred = |c: Category| f64::from(p.credentials.get(c)).ln_1p();
    [
        p.price.ln(),
        gdp.map_or(f64::NAN, f64::ln),
        flag(b(Browser::Chrome).present),
        cookies(Browser::Chrome),
        flag(b(Browser::Firefox).present),
        cookies(Browser::Firefox),
        flag(b(Browser::Opera).present),
        cookies(Browser::Opera),
        flag(b(Browser::Edge).present),
        cookies(Browser::Edge),
        cred(Category::Services),
        cred(Category::Social),
        cred(Category::Commerce),
        cred(Category::MoneyTransfer),
        cred(Category::Crypto),
        cred(Category::Other),
        flag(p.os == Os::Win8),
        flag(p.os == Os::Win7),
        flag(p.os == Os::Other),
    ]
}

struct Sampler<'a> {
    config: &'a MarketConfig,
    region: WeightedIndex<f64>,
    countries: BTreeMap<Region, (Vec<&'static Country>, WeightedIndex<f64>)>,
    os: WeightedIndex<f64>,
    // per category: canonical platform weights and the identifiers naming it
    platforms: Vec<(WeightedAliasIndex<f64>, Vec<f64>, Vec<Vec<Arc<str>>>)>,
}

impl<'a> Sampler<'a> {
    fn new(config: &'a MarketConfig, catalog: &ResourceCatalog) -> Result<Self, MarketError> {
        let bad = |e: rand::distributions::WeightedError| MarketError::Config(e.to_string());
        let region = WeightedIndex::new(Region::ALL.iter().map(|r| config.regional_mix.get(r).copied().unwrap_or(0.0)))
            .map_err(bad)?;
        let mut countries = BTreeMap::new();
        for r in Region::ALL {
            let list: Vec<&'static Country> = geo::countries_in(*r).collect();
            let w = WeightedIndex::new(list.iter().map(|c| c.weight)).map_err(bad)?;
            countries.insert(*r, (list, w));
        }
        let os = WeightedIndex::new(Os::ALL.iter().map(|o| config.os_mix.get(o).copied().unwrap_or(0.0))).map_err(bad)?;
        let mut platforms = Vec::new();
        for c in Category::ALL {
            let members: Vec<&Arc<str>> = catalog
                .platforms()
                .iter()
                .filter(|(_, cat)| cat == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                return Err(MarketError::Config(format!("catalog has no {c} platforms")));
            }
            let expo = config.resource_model.popularity_exponent;
            let weights: Vec<f64> = (0..members.len()).map(|i| (i as f64 + 1.0).powf(-expo)).collect();
            let idx = WeightedAliasIndex::new(weights.clone()).map_err(|e| MarketError::Config(e.to_string()))?;
            let names = members
                .iter()
                .map(|p| {
                    let mut ids = catalog.identifiers_of(p);
                    // canonical first, aliases after
                    ids.retain(|x| x != *p);
                    ids.insert(0, (*p).clone());
                    ids
                })
                .collect();
            platforms.push((idx, weights, names));
        }
        Ok(Self {
            config,
            region,
            countries,
            os,
            platforms,
        })
    }

    fn profile<R: Rng>(&self, rng: &mut R, id: String, date: NaiveDate) -> (Profile, Option<f64>) {
        let cfg = self.config;
        let region = Region::ALL[self.region.sample(rng)];
        let (list, w) = &self.countries[&region];
        let country = list[w.sample(rng)];
        let os = Os::ALL[self.os.sample(rng)];

        let rm = &cfg.resource_model;
        let frailty = Gamma::new(rm.frailty_shape, 1.0 / rm.frailty_shape).expect("validated").sample(rng);
        let reg_mult = rm.region_multiplier.get(&region).copied().unwrap_or(1.0);
        let mut credentials = CategoryCounts::default();
        let mut platforms = Vec::new();
        for (ci, c) in Category::ALL.iter().enumerate() {
            let m = &rm.categories[c];
            let g = Gamma::new(m.shape, 1.0 / m.shape).expect("validated").sample(rng);
            let lambda = m.mean * frailty * g * reg_mult;
            let n = if lambda > 0.0 {
                (Poisson::new(lambda).expect("positive rate").sample(rng) as u32).min(m.max)
            } else {
                0
            };
            let (idx, weights, names) = &self.platforms[ci];
            let n = (n as usize).min(names.len());
            credentials.add(*c, n as u32);
            for k in distinct_weighted(rng, idx, weights, n) {
                let ids = &names[k];
                if ids.len() > 1 && rng.gen::<f64>() < rm.alias_rate {
                    platforms.push(ids[rng.gen_range(1..ids.len())].clone());
                    // sometimes listed under both names
                    if rng.gen::<f64>() < 0.5 {
                        platforms.push(ids[0].clone());
                    }
                } else {
                    platforms.push(ids[0].clone());
                }
            }
        }

        let mut browsers = [BrowserData::default(); 4];
        for b in Browser::ALL {
            let m = &cfg.browser_model[b];
            if rng.gen::<f64>() < m.presence {
                let ln = LogNormal::new(m.cookie_log_mean, m.cookie_log_sd).expect("validated");
                let c = ln.sample(rng).round().clamp(1.0, f64::from(m.cookie_max));
                browsers[b.index()] = BrowserData {
                    present: true,
                    cookies: c as u32,
                };
            }
        }

        let pm = &cfg.price_model;
        let sd = pm.log_sd.get(&region).copied().unwrap_or(0.0);
        let wdi_term = country
            .gdp_per_capita
            .map_or(0.0, |g| pm.wdi_slope * (g / pm.reference_wdi).ln());
        let cred_term = pm.credential_slope
            * ((1.0 + f64::from(credentials.total())) / (1.0 + pm.reference_credentials)).ln();
        let noise = if sd > 0.0 {
            Normal::new(0.0, sd).expect("validated").sample(rng)
        } else {
            0.0
        };
        let price = (pm.median[&region].ln() + cred_term + wdi_term + noise).exp();
        let price = (price.clamp(pm.min, pm.max) * 100.0).round() / 100.0;

        let lag = Exp::<f64>::new(0.5).expect("rate > 0");
        let update_lag = lag.sample(rng).floor() as i64;
        let infect_lag = (lag.sample(rng) * 1.5).floor() as i64;
        let date_update = date - Duration::days(update_lag);
        let date_infect = date_update - Duration::days(infect_lag);

        let profile = Profile {
            id,
            price,
            country: country.code.to_string(),
            region,
            wdi: None,
            os,
            browsers,
            platforms,
            credentials,
            date_infect,
            date_update,
            sold: None,
        };
        (profile, country.gdp_per_capita)
    }
}

/// `n` distinct indices drawn without replacement with probability
/// proportional to `weights`.
fn distinct_weighted<R: Rng>(rng: &mut R, idx: &WeightedAliasIndex<f64>, weights: &[f64], n: usize) -> Vec<usize> {
    if n * 4 <= weights.len() {
        let mut taken = vec![false; weights.len()];
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let k = idx.sample(rng);
            if !taken[k] {
                taken[k] = true;
                out.push(k);
            }
        }
        out
    } else {
        // exponential-key method for large draws
        let mut keys: Vec<(f64, usize)> = weights
            .iter()
            .enumerate()
            .map(|(i, w)| (rng.gen::<f64>().ln() / w, i))
            .collect();
        keys.sort_by(|a, b| b.0.total_cmp(&a.0));
        keys.truncate(n);
        keys.into_iter().map(|(_, i)| i).collect()
    }
}

/// Generate a ground-truth market trace.
pub fn generate_market(config: &MarketConfig) -> Result<MarketTrace, MarketError> {
    generate_market_with_catalog(config, &ResourceCatalog::synthetic())
}

pub fn generate_market_with_catalog(
    config: &MarketConfig,
    catalog: &ResourceCatalog,
) -> Result<MarketTrace, MarketError> {
    config.validate()?;
    let n_days = config.n_days;
    let sampler = Sampler::new(config, catalog)?;

    // daily volumes
    let mut rng = rng_stream(config.seed, STREAM_VOLUME);
    let v = &config.volume;
    let innov_sd = v.log_sd * (1.0 - v.persistence * v.persistence).sqrt();
    let mut z = v.log_sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
    let mut volumes = Vec::with_capacity(n_days as usize);
    for d in 0..n_days {
        if d > 0 {
            z = v.persistence * z + innov_sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let lambda = v.mean * (z - v.log_sd * v.log_sd / 2.0).exp();
        let count = if config.downtime_days.contains(&d) || lambda <= 0.0 {
            0
        } else {
            Poisson::new(lambda).expect("positive rate").sample(&mut rng) as usize
        };
        volumes.push(count);
    }

    let sm = &config.sale_model;
    let n_effects = (n_days + sm.horizon_days + RESERVATION_DAYS + 2) as usize;
    let mut rng = rng_stream(config.seed, STREAM_DAY_EFFECTS);
    let day_effects: Vec<f64> = (0..n_effects)
        .map(|_| sm.day_sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();

    let days: Vec<Vec<(Profile, Option<f64>, u16)>> = (0..n_days)
        .into_par_iter()
        .map(|d| {
            let mut rng = rng_stream(config.seed, STREAM_PROFILES + u64::from(d));
            let date = config.start_date + Duration::days(i64::from(d));
            (0..volumes[d as usize])
                .map(|i| {
                    let minute = rng.gen_range(0..DAY_MINUTES);
                    let (p, gdp) = sampler.profile(&mut rng, format!("P{d:04}-{i:05}"), date);
                    (p, gdp, minute)
                })
                .collect()
        })
        .collect();

    // standardize features over the whole population
    let mut moments = [(0usize, 0.0f64, 0.0f64); 19];
    for (p, gdp, _) in days.iter().flatten() {
        for (k, x) in raw_sale_features(p, *gdp).iter().enumerate() {
            if x.is_finite() {
                let (n, mean, m2) = &mut moments[k];
                *n += 1;
                let delta = x - *mean;
                *mean += delta / *n as f64;
                *m2 += delta * (x - *mean);
            }
        }
    }
    let scale: Vec<(f64, f64)> = moments
        .iter()
        .map(|&(n, mean, m2)| {
            let sd = if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 };
            (mean, if sd > 0.0 { sd } else { 1.0 })
        })
        .collect();
    let beta: Vec<f64> = SaleFeature::ALL
        .iter()
        .map(|f| sm.coefficients.get(f).copied().unwrap_or(0.0))
        .collect();

    let appearances: BTreeMap<u32, Vec<Appearance>> = days
        .into_par_iter()
        .enumerate()
        .map(|(d, list)| {
            let d = d as u32;
            let mut rng = rng_stream(config.seed, STREAM_OUTCOMES + u64::from(d));
            let out = list
                .into_iter()
                .map(|(profile, gdp, minute)| {
                    let x = raw_sale_features(&profile, gdp);
                    let eta = sm.intercept
                        + x.iter()
                            .zip(&scale)
                            .zip(&beta)
                            .map(|((x, (m, s)), b)| if x.is_finite() { b * (x - m) / s } else { 0.0 })
                            .sum::<f64>();
                    let mut sale = None;
                    let mut decay = 1.0;
                    for n in 1..=sm.horizon_days {
                        let t = d + n;
                        let draw: f64 = rng.gen();
                        if !config.downtime_days.contains(&t)
                            && draw < decay * logistic(eta + day_effects[t as usize])
                        {
                            sale = Some(n);
                            break;
                        }
                        decay *= sm.later_day_decay;
                    }
                    let sale_minute = sale.map(|_| rng.gen_range(SALE_START_MINUTE..DAY_MINUTES));
                    let last = sale.map_or(d + RESERVATION_DAYS, |n| (d + n - 1).min(d + RESERVATION_DAYS));
                    let mut reservations = Vec::new();
                    for t in d + 1..=last {
                        let draw: f64 = rng.gen();
                        let slot = rng.gen_range(0..SLOTS_PER_DAY);
                        if !config.downtime_days.contains(&t) && draw < config.reservation_rate {
                            reservations.push(Reservation { day: t, slot });
                        }
                    }
                    Appearance {
                        profile,
                        minute,
                        true_sale_day: sale,
                        sale_minute,
                        reservations,
                        eta,
                    }
                })
                .collect();
            (d, out)
        })
        .collect();

    let mut rng = rng_stream(config.seed, STREAM_RECAP);
    let rn = &config.recap_noise;
    let recap = (0..n_days)
        .map(|d| {
            let truth = volumes[d as usize] as f64;
            let under = rng.gen::<f64>() < rn.undercount_prob;
            let ratio = if rn.ratio_max > rn.ratio_min {
                rng.gen_range(rn.ratio_min..=rn.ratio_max)
            } else {
                rn.ratio_min
            };
            let reported = if under { (truth * ratio).round() } else { truth };
            (d, reported as u64)
        })
        .collect();

    Ok(MarketTrace {
        n_days,
        start_date: config.start_date,
        seed: config.seed,
        appearances,
        recap,
        downtime: config.downtime_days.iter().copied().filter(|&d| d < n_days).collect(),
        day_effects,
    })
}
