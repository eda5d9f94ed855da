//! End-to-end experiment: generate, crawl, enrich, diagonalize, MFA, fit,
//! calibrate, reconstruct and report.
//!
//! Every stage exists in memory and as a disk step that reads the prior
//! stages' outputs from a run directory, so the command line can run
//! stages one at a time. All stage seeds derive from the config's single
//! top-level seed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::catalog::ResourceCatalog;
use crate::crawl::{run_campaign_with_truth, CampaignTruth, CrawlDataset, CrawlParams, MissingnessPattern};
use crate::dataset::{
    availability_table, diagonalize, enrich_dataset, listing_profiles, reservation_audit, Availability, DiagonalizedSet,
    DropReport, ReservationAudit, WdiTable,
};
use crate::glmm::{
    calibrate_threshold, cross_validate_auc, nested_selection, CutoffMode, CvSummary, GlmmData, GlmmOptions, Selection,
    ThresholdCalibration,
};
use crate::market::{generate_market_with_catalog, MarketConfig, MarketTrace};
use crate::mfa::{profile_groups, profile_table, supplementary_correlations, write_scores_csv, MfaModel};
use crate::profile::Profile;
use crate::reconstruct::{
    calibrate, nearest_donors, plan_missing_days, run_batch, sampling_ratio, simulate_listing, validate_simulation,
    BatchMode, BatchOptions, BatchProfile, BatchSummary, CalibrationRatios, LabelRule, MissingCase, MissingDayPlan,
    SimulationBatch,
};
use crate::report::{regional_report, regional_series, revenue_summary, scale_factor, variable_importance, RevenueSummary};
use crate::util::{content_hash, rng_stream};

/// Batch key of the probabilistic (Bernoulli) reconstruction.
pub const EXPECTED: &str = "expected";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Simulate,
    Crawl,
    Prep,
    Mfa,
    Fit,
    Reconstruct,
    Report,
}

impl Stage {
    pub const PIPELINE: [Stage; 7] = [
        Stage::Simulate,
        Stage::Crawl,
        Stage::Prep,
        Stage::Mfa,
        Stage::Fit,
        Stage::Reconstruct,
        Stage::Report,
    ];

    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Simulate => 10,
            Stage::Crawl => 11,
            Stage::Prep => 12,
            Stage::Mfa => 13,
            Stage::Fit => 14,
            Stage::Reconstruct => 15,
            Stage::Report => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Simulate => "simulate",
            Stage::Crawl => "crawl",
            Stage::Prep => "prep",
            Stage::Mfa => "mfa",
            Stage::Fit => "fit",
            Stage::Reconstruct => "reconstruct",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        self.stage.exit_code()
    }
}

trait Tag<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: fmt::Display> Tag<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage,
            message: e.to_string(),
        })
    }
}

fn fail<T>(stage: Stage, message: impl Into<String>) -> Result<T, PipelineError> {
    Err(PipelineError {
        stage,
        message: message.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MissingnessSpec {
    None,
    /// The built-in day-type mix, shuffled by the run seed.
    PaperLike,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    /// Resource catalog CSV; the synthetic catalog when absent.
    pub catalog: Option<PathBuf>,
    /// WDI CSV; the built-in table when absent.
    pub wdi: Option<PathBuf>,
    /// Saved crawl dataset to analyze instead of simulating one.
    pub crawl_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub alpha: f64,
    pub cv_replications: usize,
    pub train_fraction: f64,
    /// Significance level of the simulation validation tests.
    pub validation_alpha: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            alpha: 0.05,
            cv_replications: 1000,
            train_fraction: 2.0 / 3.0,
            validation_alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutoffSelection {
    Conservative,
    Generous,
    Both,
}

impl CutoffSelection {
    pub fn modes(self) -> Vec<CutoffMode> {
        match self {
            CutoffSelection::Conservative => vec![CutoffMode::Conservative],
            CutoffSelection::Generous => vec![CutoffMode::Generous],
            CutoffSelection::Both => CutoffMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructConfig {
    pub detailed_replications: usize,
    pub stats_replications: usize,
    /// Skip the detailed batch.
    pub stats_only: bool,
    pub memory_budget_mb: usize,
    /// Size cap for per-replication CSV dumps of the detailed batch; no
    /// dump when absent.
    pub dump_cap_mb: Option<usize>,
    pub cutoffs: CutoffSelection,
    /// Also run the probabilistic reconstruction.
    pub expected: bool,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig {
            detailed_replications: 100,
            stats_replications: 10_000,
            stats_only: false,
            memory_budget_mb: 512,
            dump_cap_mb: None,
            cutoffs: CutoffSelection::Both,
            expected: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub market: MarketConfig,
    pub crawl: CrawlParams,
    pub missingness: MissingnessSpec,
    pub inputs: InputPaths,
    pub analysis: AnalysisConfig,
    pub reconstruct: ReconstructConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            market: MarketConfig::default(),
            crawl: CrawlParams::default(),
            missingness: MissingnessSpec::PaperLike,
            inputs: InputPaths::default(),
            analysis: AnalysisConfig::default(),
            reconstruct: ReconstructConfig::default(),
        }
    }
}

const SEED_MISSINGNESS: u64 = 2;
const SEED_CV: u64 = 3;
const SEED_BATCH: u64 = 4;
const SEED_VALIDATION: u64 = 5;

impl ExperimentConfig {
    /// Parse TOML; relative input paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).at(Stage::Config)?;
        for p in [&mut cfg.inputs.catalog, &mut cfg.inputs.wdi, &mut cfg.inputs.crawl_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError {
            stage: Stage::Config,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.market.validate().at(Stage::Config)?;
        self.crawl.validate().at(Stage::Config)?;
        let a = &self.analysis;
        if !(a.alpha > 0.0 && a.alpha < 1.0) || !(a.validation_alpha > 0.0 && a.validation_alpha < 1.0) {
            return fail(Stage::Config, "significance levels must lie in (0, 1)");
        }
        if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
            return fail(Stage::Config, "train_fraction must lie in (0, 1)");
        }
        if self.reconstruct.stats_replications == 0 {
            return fail(Stage::Config, "stats_replications must be positive");
        }
        Ok(())
    }

    /// Push the top-level seed into the stage configs.
    pub fn resolved(mut self) -> Self {
        self.market.seed = self.seed;
        self.crawl.seed = self.seed.wrapping_add(1);
        self
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }

    fn stage_seed(&self, k: u64) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k)
    }
}

/// A resolved config bound to its run directory.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
}

impl RunContext {
    /// The run directory is `out/<first 12 hex digits of the config hash>`.
    pub fn new(config: ExperimentConfig, out: &Path) -> Self {
        let config = config.resolved();
        let hash = config.hash();
        let dir = out.join(&hash[..12]);
        RunContext { config, hash, dir }
    }

    /// First line of every report file.
    pub fn header(&self) -> String {
        format!("# seed={},config_hash={}\n", self.config.seed, self.hash)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<(MarketTrace, ResourceCatalog), PipelineError> {
    let catalog = match &cfg.inputs.catalog {
        Some(p) => ResourceCatalog::load(p).map_err(|e| PipelineError {
            stage: Stage::Simulate,
            message: format!("{}: {e}", p.display()),
        })?,
        None => ResourceCatalog::synthetic(),
    };
    let trace = generate_market_with_catalog(&cfg.market, &catalog).at(Stage::Simulate)?;
    Ok((trace, catalog))
}

pub fn crawl(cfg: &ExperimentConfig, trace: &MarketTrace) -> Result<(CrawlDataset, CampaignTruth), PipelineError> {
    let (mut ds, truth) = run_campaign_with_truth(trace, &cfg.crawl).at(Stage::Crawl)?;
    if cfg.missingness == MissingnessSpec::PaperLike {
        MissingnessPattern::paper_like(trace.n_days, cfg.stage_seed(SEED_MISSINGNESS)).apply(&mut ds);
    }
    Ok((ds, truth))
}

pub fn load_wdi(cfg: &ExperimentConfig) -> Result<WdiTable, PipelineError> {
    match &cfg.inputs.wdi {
        Some(p) => WdiTable::load(p).map_err(|e| PipelineError {
            stage: Stage::Prep,
            message: format!("WDI file {}: {e}", p.display()),
        }),
        None => Ok(WdiTable::builtin()),
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub enriched: CrawlDataset,
    pub drops: DropReport,
    /// First-day labels on days observed through offset 1.
    pub set: DiagonalizedSet,
    pub availability: Vec<(usize, Availability)>,
    pub audit: Option<ReservationAudit>,
    /// Share of six-day sales that happen after the first day.
    pub late_sale_fraction: Option<f64>,
}

impl Prepared {
    pub fn from_enriched(enriched: CrawlDataset, drops: DropReport) -> Result<Self, PipelineError> {
        let set = diagonalize(&enriched, 1).at(Stage::Prep)?;
        if set.profiles.is_empty() {
            return fail(Stage::Prep, "no day is observed through its first persistence cell");
        }
        let six = diagonalize(&enriched, 6).at(Stage::Prep)?;
        let sold: Vec<_> = six.profiles.iter().filter(|p| p.profile.sold == Some(true)).collect();
        let late_sale_fraction = (!sold.is_empty())
            .then(|| sold.iter().filter(|p| p.reading.sold_at.is_some_and(|s| s > 1)).count() as f64 / sold.len() as f64);
        Ok(Prepared {
            availability: availability_table(&enriched),
            audit: reservation_audit(&enriched).ok(),
            set,
            late_sale_fraction,
            enriched,
            drops,
        })
    }
}

pub fn prep(cfg: &ExperimentConfig, raw: &CrawlDataset, catalog: &ResourceCatalog) -> Result<Prepared, PipelineError> {
    let wdi = load_wdi(cfg)?;
    let (enriched, drops) = enrich_dataset(raw, catalog, &wdi);
    Prepared::from_enriched(enriched, drops)
}

#[derive(Debug, Clone)]
pub struct MfaStage {
    pub model: MfaModel,
    /// Every listing profile, day-ordered; row `i` of `scores`.
    pub profiles: Vec<Profile>,
    pub days: Vec<u32>,
    pub scores: DMatrix<f64>,
    pub row_of: HashMap<String, usize>,
}

impl MfaStage {
    pub fn from_model(model: MfaModel, prepared: &Prepared) -> Result<Self, PipelineError> {
        let mut profiles = Vec::new();
        let mut days = Vec::new();
        for (d, list) in listing_profiles(&prepared.enriched) {
            days.extend(std::iter::repeat(d).take(list.len()));
            profiles.extend(list);
        }
        let scores = model.project(&profile_table(&profiles).at(Stage::Mfa)?).at(Stage::Mfa)?;
        let row_of = profiles.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect();
        Ok(MfaStage {
            model,
            profiles,
            days,
            scores,
            row_of,
        })
    }

    pub fn rows_of(&self, profiles: &[&Profile]) -> Vec<usize> {
        profiles.iter().map(|p| self.row_of[&p.id]).collect()
    }
}

/// Fit the MFA on every listing profile.
pub fn mfa(prepared: &Prepared) -> Result<MfaStage, PipelineError> {
    let profiles: Vec<Profile> = listing_profiles(&prepared.enriched).into_values().flatten().collect();
    let model = MfaModel::fit(&profile_table(&profiles).at(Stage::Mfa)?, &profile_groups()).at(Stage::Mfa)?;
    MfaStage::from_model(model, prepared)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStage {
    pub selection: Selection,
    pub cv: Option<CvSummary>,
    pub calibrations: Vec<(CutoffMode, ThresholdCalibration)>,
    /// Correlation of each dimension with the first-day label.
    pub sold_correlations: Vec<f64>,
}

impl FitStage {
    pub fn calibration(&self, mode: CutoffMode) -> Option<&ThresholdCalibration> {
        self.calibrations.iter().find(|(m, _)| *m == mode).map(|(_, c)| c)
    }
}

pub fn glmm_data(prepared: &Prepared, mfa: &MfaStage) -> Result<GlmmData, PipelineError> {
    let labeled: Vec<&Profile> = prepared.set.profiles.iter().map(|p| &p.profile).collect();
    let rows = mfa.rows_of(&labeled);
    let scores = mfa.scores.select_rows(&rows);
    let sold = labeled.iter().map(|p| p.sold == Some(true)).collect();
    let cluster = prepared.set.profiles.iter().map(|p| p.day).collect();
    GlmmData::new(scores, sold, cluster).at(Stage::Fit)
}

pub fn fit(cfg: &ExperimentConfig, prepared: &Prepared, mfa: &MfaStage) -> Result<FitStage, PipelineError> {
    let data = glmm_data(prepared, mfa)?;
    let options = GlmmOptions::default();
    let candidates: Vec<usize> = (0..mfa.model.n_dims()).collect();
    let selection = nested_selection(&data, &candidates, cfg.analysis.alpha, &options).at(Stage::Fit)?;
    let cv = match cfg.analysis.cv_replications {
        0 => None,
        r => Some(
            cross_validate_auc(&data, &selection.fit.dims, &options, r, cfg.analysis.train_fraction, cfg.stage_seed(SEED_CV))
                .at(Stage::Fit)?,
        ),
    };
    let calibrations = CutoffMode::ALL
        .iter()
        .map(|&m| Ok((m, calibrate_threshold(&selection.fit, &data, m.target_tnr()).at(Stage::Fit)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let sold: Vec<f64> = data.sold.iter().map(|&s| f64::from(u8::from(s))).collect();
    Ok(FitStage {
        sold_correlations: supplementary_correlations(&data.scores, &sold),
        selection,
        cv,
        calibrations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub days: usize,
    pub tests: usize,
    pub passed: usize,
    pub pass_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconStage {
    pub ratios: CalibrationRatios,
    pub plans: Vec<MissingDayPlan>,
    pub sampling_ratio: f64,
    pub validation: Option<ValidationSummary>,
    /// Stats-only batches by cutoff label, plus [`EXPECTED`].
    pub batches: BTreeMap<String, SimulationBatch>,
    /// Summaries of the detailed batches.
    pub detailed: BTreeMap<String, BatchSummary>,
    /// Detailed batches with their retained records; not persisted.
    #[serde(skip)]
    pub detailed_batches: BTreeMap<String, SimulationBatch>,
}

impl ReconStage {
    pub fn cutoff_batches(&self) -> BTreeMap<CutoffMode, SimulationBatch> {
        CutoffMode::ALL
            .iter()
            .filter_map(|m| self.batches.get(m.label()).map(|b| (*m, b.clone())))
            .collect()
    }
}

/// Listing profiles as batch inputs, labeled on measured days.
pub fn batch_listings(prepared: &Prepared, mfa: &MfaStage) -> BTreeMap<u32, Vec<BatchProfile>> {
    let labels: HashMap<&str, bool> = prepared
        .set
        .profiles
        .iter()
        .map(|p| (p.profile.id.as_str(), p.profile.sold == Some(true)))
        .collect();
    let mut out: BTreeMap<u32, Vec<BatchProfile>> = BTreeMap::new();
    for (i, p) in mfa.profiles.iter().enumerate() {
        out.entry(mfa.days[i]).or_default().push(BatchProfile {
            price: p.price,
            region: p.region,
            scores: mfa.scores.row(i).iter().copied().collect(),
            sold: labels.get(p.id.as_str()).copied(),
        });
    }
    out
}

/// Resimulate every listing day from its neighbors and compare score
/// distributions dimension by dimension.
pub fn validate_days(mfa: &MfaStage, seed: u64, alpha: f64) -> Result<Option<ValidationSummary>, PipelineError> {
    let mut rows: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &d) in mfa.days.iter().enumerate() {
        rows.entry(d).or_default().push(i);
    }
    let (mut days, mut tests, mut passed) = (0, 0, 0);
    for (&d, own) in &rows {
        let others: BTreeSet<u32> = rows.keys().copied().filter(|&x| x != d).collect();
        let donors = nearest_donors(d, &others);
        if donors.is_empty() || own.len() < 2 {
            continue;
        }
        let sizes: Vec<usize> = donors.iter().map(|x| rows[&x.day].len()).collect();
        let draws = simulate_listing(own.len(), &donors, &sizes, &mut rng_stream(seed, u64::from(d))).at(Stage::Reconstruct)?;
        let sim_rows: Vec<usize> = draws.iter().map(|dr| rows[&donors[dr.donor].day][dr.profile]).collect();
        let report = validate_simulation(&mfa.scores.select_rows(own), &mfa.scores.select_rows(&sim_rows), alpha)
            .at(Stage::Reconstruct)?;
        days += 1;
        tests += report.passed.len();
        passed += report.passed.iter().filter(|&&p| p).count();
    }
    Ok((tests > 0).then(|| ValidationSummary {
        days,
        tests,
        passed,
        pass_fraction: passed as f64 / tests as f64,
    }))
}

pub fn reconstruct(cfg: &ExperimentConfig, prepared: &Prepared, mfa: &MfaStage, fit: &FitStage) -> Result<ReconStage, PipelineError> {
    let st = Stage::Reconstruct;
    let rc = &cfg.reconstruct;
    let ratios = calibrate(&prepared.enriched).at(st)?;
    let plans = plan_missing_days(&prepared.enriched, &ratios).at(st)?;
    let listings = batch_listings(prepared, mfa);
    let seed = cfg.stage_seed(SEED_BATCH);
    let mut rules: Vec<(String, LabelRule)> = Vec::new();
    for mode in rc.cutoffs.modes() {
        let c = fit
            .calibration(mode)
            .ok_or_else(|| PipelineError {
                stage: st,
                message: format!("no {} calibration", mode.label()),
            })?
            .cutoff;
        rules.push((mode.label().to_string(), LabelRule::Cutoff { cutoff: c }));
    }
    if rc.expected {
        rules.push((EXPECTED.to_string(), LabelRule::Bernoulli));
    }
    let mut batches = BTreeMap::new();
    let mut detailed = BTreeMap::new();
    for (name, rule) in rules {
        let opts = BatchOptions {
            replications: rc.stats_replications,
            seed,
            mode: BatchMode::StatsOnly,
        };
        batches.insert(name.clone(), run_batch(&listings, &plans, &fit.selection.fit, rule, &opts).at(st)?);
        if !rc.stats_only && rc.detailed_replications > 0 {
            let opts = BatchOptions {
                replications: rc.detailed_replications,
                seed,
                mode: BatchMode::Detailed {
                    memory_budget_bytes: rc.memory_budget_mb << 20,
                },
            };
            let b = run_batch(&listings, &plans, &fit.selection.fit, rule, &opts).at(st)?;
            detailed.insert(name, b);
        }
    }
    Ok(ReconStage {
        sampling_ratio: sampling_ratio(&prepared.enriched).at(st)?,
        validation: validate_days(mfa, cfg.stage_seed(SEED_VALIDATION), cfg.analysis.validation_alpha)?,
        ratios,
        plans,
        batches,
        detailed: detailed.iter().map(|(k, b)| (k.clone(), b.summary.clone())).collect(),
        detailed_batches: detailed,
    })
}

/// Every in-memory artifact of one experiment.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub prepared: Prepared,
    pub mfa: MfaStage,
    pub fit: FitStage,
    pub recon: ReconStage,
}

pub fn analyze(cfg: &ExperimentConfig, raw: &CrawlDataset, catalog: &ResourceCatalog) -> Result<Analysis, PipelineError> {
    let prepared = prep(cfg, raw, catalog)?;
    let mfa = mfa(&prepared)?;
    let fit = fit(cfg, &prepared, &mfa)?;
    let recon = reconstruct(cfg, &prepared, &mfa, &fit)?;
    Ok(Analysis {
        prepared,
        mfa,
        fit,
        recon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledTotal {
    pub batch: String,
    pub sold_mean: f64,
    pub sold_lower: f64,
    pub sold_upper: f64,
    pub revenue_mean: f64,
    pub revenue_lower: f64,
    pub revenue_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub seed: u64,
    pub config_hash: String,
    pub dropped_profiles: usize,
    pub labeled_profiles: usize,
    pub measured_sold: usize,
    pub reservation_audit: Option<ReservationAudit>,
    pub calibration_ratios: CalibrationRatios,
    pub plan_counts: BTreeMap<String, usize>,
    pub sampling_ratio: f64,
    pub late_sale_fraction: Option<f64>,
    pub scale_factor: Option<f64>,
    pub dims: Vec<usize>,
    pub sigma: f64,
    pub r2_marginal: f64,
    pub r2_conditional: f64,
    pub cv: Option<CvSummary>,
    pub calibrations: Vec<(CutoffMode, ThresholdCalibration)>,
    pub validation: Option<ValidationSummary>,
    pub revenue: Vec<RevenueSummary>,
    pub expected: Option<BatchSummary>,
    pub detailed: BTreeMap<String, BatchSummary>,
    pub scaled: Vec<ScaledTotal>,
}

impl BundleSummary {
    pub fn new(ctx: &RunContext, a: &Analysis) -> Result<Self, PipelineError> {
        let st = Stage::Report;
        let modes = ctx.config.reconstruct.cutoffs.modes();
        let mut revenue = revenue_summary(&a.recon.cutoff_batches(), &modes).at(st)?;
        for r in &mut revenue {
            r.daily.clear();
        }
        let factor = a
            .prepared
            .late_sale_fraction
            .and_then(|l| scale_factor(a.recon.sampling_ratio, l).ok());
        let scaled = match factor {
            Some(f) => a
                .recon
                .batches
                .iter()
                .map(|(name, b)| {
                    let s = &b.summary;
                    ScaledTotal {
                        batch: name.clone(),
                        sold_mean: f * s.total_sold.mean,
                        sold_lower: f * s.total_sold.lower,
                        sold_upper: f * s.total_sold.upper,
                        revenue_mean: f * s.revenue.mean,
                        revenue_lower: f * s.revenue.lower,
                        revenue_upper: f * s.revenue.upper,
                    }
                })
                .collect(),
            None => Vec::new(),
        };
        let mut plan_counts: BTreeMap<String, usize> = MissingCase::ALL.iter().map(|c| (c.label().to_string(), 0)).collect();
        for p in &a.recon.plans {
            *plan_counts.get_mut(p.case.label()).expect("all cases listed") += 1;
        }
        let fit = &a.fit.selection.fit;
        Ok(BundleSummary {
            seed: ctx.config.seed,
            config_hash: ctx.hash.clone(),
            dropped_profiles: a.prepared.drops.dropped(),
            labeled_profiles: a.prepared.set.profiles.len(),
            measured_sold: a.prepared.set.sold_count(),
            reservation_audit: a.prepared.audit,
            calibration_ratios: a.recon.ratios.clone(),
            plan_counts,
            sampling_ratio: a.recon.sampling_ratio,
            late_sale_fraction: a.prepared.late_sale_fraction,
            scale_factor: factor,
            dims: fit.dims.iter().map(|d| d + 1).collect(),
            sigma: fit.sigma,
            r2_marginal: fit.r2_marginal,
            r2_conditional: fit.r2_conditional,
            cv: a.fit.cv.clone().map(|mut c| {
                c.aucs.clear();
                c
            }),
            calibrations: a.fit.calibrations.clone(),
            validation: a.recon.validation.clone(),
            revenue,
            expected: a.recon.batches.get(EXPECTED).map(|b| b.summary.clone()),
            detailed: a.recon.detailed.clone(),
            scaled,
        })
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Write a CSV file whose first line is the run header.
fn write_csv(ctx: &RunContext, path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), PipelineError> {
    let st = Stage::Report;
    let mut buf = ctx.header().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).at(st)?;
        for r in rows {
            w.write_record(&r).at(st)?;
        }
        w.flush().at(st)?;
    }
    fs::write(path, buf).at(st)
}

/// Write the report bundle into `<run dir>/report` and return the paths.
pub fn write_bundle(ctx: &RunContext, a: &Analysis) -> Result<Vec<PathBuf>, PipelineError> {
    let st = Stage::Report;
    let dir = ctx.path("report");
    fs::create_dir_all(&dir).at(st)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<(), PipelineError> {
        let p = dir.join(name);
        write_csv(ctx, &p, header, rows)?;
        written.push(p);
        Ok(())
    };

    emit(
        "availability.csv",
        &["window", "days_kept", "days_total", "days_pct", "profiles_kept", "profiles_total", "profiles_pct", "sales_captured", "sales_total", "sales_pct"],
        a.prepared
            .availability
            .iter()
            .map(|(n, av)| {
                vec![
                    n.to_string(),
                    av.days_kept.to_string(),
                    av.days_total.to_string(),
                    (100.0 * av.days_fraction()).to_string(),
                    av.profiles_kept.to_string(),
                    av.profiles_total.to_string(),
                    (100.0 * av.profiles_fraction()).to_string(),
                    av.sales_captured.to_string(),
                    av.sales_total.to_string(),
                    (100.0 * av.sales_fraction()).to_string(),
                ]
            })
            .collect(),
    )?;

    emit(
        "mfa_variance.csv",
        &["dim", "eigenvalue", "variance_pct", "cumulative_pct", "sold_correlation"],
        a.mfa
            .model
            .variance_table()
            .iter()
            .map(|r| {
                vec![
                    r.dim.to_string(),
                    r.eigenvalue.to_string(),
                    (100.0 * r.fraction).to_string(),
                    (100.0 * r.cumulative).to_string(),
                    opt(a.fit.sold_correlations.get(r.dim - 1).copied()),
                ]
            })
            .collect(),
    )?;

    let fit = &a.fit.selection.fit;
    emit(
        "coefficients.csv",
        &["term", "estimate", "std_error", "z", "p_value", "delta_r2"],
        fit.coefficients
            .iter()
            .enumerate()
            .map(|(k, c)| {
                vec![
                    c.term(),
                    c.estimate.to_string(),
                    c.se.to_string(),
                    c.z.to_string(),
                    c.p_value.to_string(),
                    if k == 0 { String::new() } else { opt(fit.delta_r2.get(k - 1).copied()) },
                ]
            })
            .collect(),
    )?;

    let labeled: Vec<Profile> = a.prepared.set.profiles.iter().map(|p| p.profile.clone()).collect();
    emit(
        "regional.csv",
        &["region", "offered", "sold", "offered_pct", "sales_pct", "median_offered_price", "median_sold_price"],
        regional_report(&labeled)
            .iter()
            .map(|r| {
                vec![
                    r.region.to_string(),
                    r.offered.to_string(),
                    r.sold.to_string(),
                    r.offered_share.to_string(),
                    r.sales_share.to_string(),
                    opt(r.median_offered_price),
                    opt(r.median_sold_price),
                ]
            })
            .collect(),
    )?;
    let by_day: Vec<(u32, &Profile)> = a.prepared.set.profiles.iter().map(|p| (p.day, &p.profile)).collect();
    emit(
        "regional_daily.csv",
        &["day", "date", "region", "offered", "sold", "median_price"],
        regional_series(&by_day)
            .iter()
            .map(|r| {
                vec![
                    r.day.to_string(),
                    a.prepared.enriched.date_of(r.day).to_string(),
                    r.region.to_string(),
                    r.offered.to_string(),
                    r.sold.to_string(),
                    opt(r.median_price),
                ]
            })
            .collect(),
    )?;

    let mut daily = Vec::new();
    for (name, b) in &a.recon.batches {
        for d in &b.summary.per_day {
            for (series, iv) in [("offered", &d.offered), ("sold", &d.sold), ("revenue", &d.revenue)] {
                daily.push(vec![
                    d.day.to_string(),
                    a.prepared.enriched.date_of(d.day).to_string(),
                    format!("{:?}", d.source).to_lowercase(),
                    name.clone(),
                    series.to_string(),
                    iv.mean.to_string(),
                    iv.lower.to_string(),
                    iv.upper.to_string(),
                ]);
            }
        }
    }
    emit("daily.csv", &["day", "date", "source", "batch", "series", "mean", "lower", "upper"], daily)?;

    let imp = variable_importance(&a.mfa.model, fit);
    emit(
        "importance.csv",
        &["variable", "group", "share_pct"],
        imp.variables.iter().map(|v| vec![v.variable.clone(), v.group.clone(), v.share.to_string()]).collect(),
    )?;
    emit(
        "importance_groups.csv",
        &["group", "share_pct"],
        imp.groups.iter().map(|(g, s)| vec![g.clone(), s.to_string()]).collect(),
    )?;

    let summary = BundleSummary::new(ctx, a)?;
    let p = dir.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&summary).at(st)? + "\n").at(st)?;
    written.push(p);
    Ok(written)
}

fn write_json<T: Serialize>(path: &Path, value: &T, stage: Stage) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(stage)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value).at(stage)?).at(stage)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, stage: Stage) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError {
        stage,
        message: format!("{}: {e}", path.display()),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError {
        stage,
        message: format!("{}: {e}", path.display()),
    })
}

fn load_catalog(ctx: &RunContext, stage: Stage) -> Result<ResourceCatalog, PipelineError> {
    let p = ctx.path("market/catalog.csv");
    if p.exists() {
        ResourceCatalog::load(&p).map_err(|e| PipelineError {
            stage,
            message: format!("{}: {e}", p.display()),
        })
    } else if let Some(p) = &ctx.config.inputs.catalog {
        ResourceCatalog::load(p).map_err(|e| PipelineError {
            stage,
            message: format!("{}: {e}", p.display()),
        })
    } else {
        Ok(ResourceCatalog::synthetic())
    }
}

fn load_prepared(ctx: &RunContext) -> Result<Prepared, PipelineError> {
    let st = Stage::Prep;
    let enriched = CrawlDataset::load(&ctx.path("prep/dataset")).map_err(|e| PipelineError {
        stage: st,
        message: format!("{}: {e}", ctx.path("prep/dataset").display()),
    })?;
    let drops: DropReport = read_json(&ctx.path("prep/drops.json"), st)?;
    Prepared::from_enriched(enriched, drops)
}

fn load_mfa(ctx: &RunContext, prepared: &Prepared) -> Result<MfaStage, PipelineError> {
    let p = ctx.path("mfa/model.json");
    let text = fs::read_to_string(&p).map_err(|e| PipelineError {
        stage: Stage::Mfa,
        message: format!("{}: {e}", p.display()),
    })?;
    MfaStage::from_model(MfaModel::from_json(&text).at(Stage::Mfa)?, prepared)
}

/// Run one stage against the run directory, reading what earlier stages
/// wrote there.
pub fn run_stage(ctx: &RunContext, stage: Stage) -> Result<(), PipelineError> {
    let cfg = &ctx.config;
    fs::create_dir_all(&ctx.dir).at(Stage::Config)?;
    write_json(&ctx.path("config.json"), cfg, Stage::Config)?;
    match stage {
        Stage::Config => Ok(()),
        Stage::Simulate => {
            if cfg.inputs.crawl_dir.is_some() {
                return Ok(());
            }
            let (trace, catalog) = simulate(cfg)?;
            let dir = ctx.path("market");
            fs::create_dir_all(&dir).at(stage)?;
            let f = fs::File::create(dir.join("trace.jsonl")).at(stage)?;
            let mut w = std::io::BufWriter::new(f);
            trace.write_jsonl(&mut w).at(stage)?;
            w.flush().at(stage)?;
            catalog
                .write_csv(fs::File::create(dir.join("catalog.csv")).at(stage)?)
                .at(stage)
        }
        Stage::Crawl => {
            let ds = match &cfg.inputs.crawl_dir {
                Some(dir) => CrawlDataset::load(dir).map_err(|e| PipelineError {
                    stage,
                    message: format!("{}: {e}", dir.display()),
                })?,
                None => {
                    let p = ctx.path("market/trace.jsonl");
                    let f = fs::File::open(&p).map_err(|e| PipelineError {
                        stage,
                        message: format!("{}: {e}", p.display()),
                    })?;
                    let trace = MarketTrace::read_jsonl(std::io::BufReader::new(f)).at(stage)?;
                    crawl(cfg, &trace)?.0
                }
            };
            ds.save(&ctx.path("crawl")).at(stage)
        }
        Stage::Prep => {
            let raw = CrawlDataset::load(&ctx.path("crawl")).map_err(|e| PipelineError {
                stage,
                message: format!("{}: {e}", ctx.path("crawl").display()),
            })?;
            let catalog = load_catalog(ctx, stage)?;
            let prepared = prep(cfg, &raw, &catalog)?;
            prepared.enriched.save(&ctx.path("prep/dataset")).at(stage)?;
            write_json(&ctx.path("prep/drops.json"), &prepared.drops, stage)?;
            write_json(&ctx.path("prep/availability.json"), &prepared.availability, stage)
        }
        Stage::Mfa => {
            let prepared = load_prepared(ctx)?;
            let m = mfa(&prepared)?;
            fs::create_dir_all(ctx.path("mfa")).at(stage)?;
            fs::write(ctx.path("mfa/model.json"), m.model.to_json().at(stage)?).at(stage)?;
            let ids: Vec<String> = m.profiles.iter().map(|p| p.id.clone()).collect();
            write_scores_csv(fs::File::create(ctx.path("mfa/scores.csv")).at(stage)?, &ids, &m.scores).at(stage)
        }
        Stage::Fit => {
            let prepared = load_prepared(ctx)?;
            let m = load_mfa(ctx, &prepared)?;
            let f = fit(cfg, &prepared, &m)?;
            write_json(&ctx.path("fit/fit.json"), &f, stage)?;
            f.selection
                .fit
                .write_coefficients_csv(fs::File::create(ctx.path("fit/coefficients.csv")).at(stage)?)
                .at(stage)
        }
        Stage::Reconstruct => {
            let prepared = load_prepared(ctx)?;
            let m = load_mfa(ctx, &prepared)?;
            let f: FitStage = read_json(&ctx.path("fit/fit.json"), Stage::Fit)?;
            let r = reconstruct(cfg, &prepared, &m, &f)?;
            write_json(&ctx.path("reconstruct/recon.json"), &r, stage)?;
            if let Some(cap) = cfg.reconstruct.dump_cap_mb {
                for (name, b) in &r.detailed_batches {
                    b.dump_details(&ctx.path(&format!("reconstruct/details/{name}")), cap << 20).at(stage)?;
                }
            }
            Ok(())
        }
        Stage::Report => {
            let prepared = load_prepared(ctx)?;
            let m = load_mfa(ctx, &prepared)?;
            let fit: FitStage = read_json(&ctx.path("fit/fit.json"), Stage::Fit)?;
            let recon: ReconStage = read_json(&ctx.path("reconstruct/recon.json"), Stage::Reconstruct)?;
            write_bundle(
                ctx,
                &Analysis {
                    prepared,
                    mfa: m,
                    fit,
                    recon,
                },
            )
            .map(|_| ())
        }
    }
}

/// Every stage in order; stops at the first failure, keeping what was written.
pub fn run_experiment(ctx: &RunContext) -> Result<PathBuf, PipelineError> {
    for stage in Stage::PIPELINE {
        run_stage(ctx, stage)?;
    }
    Ok(ctx.path("report"))
}

/// First-day sales among the profiles the appearance crawlers would have
/// captured on every day, had no session failed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub captured: usize,
    pub sold: usize,
    pub revenue: f64,
}

pub fn ground_truth(trace: &MarketTrace, truth: &CampaignTruth, wdi: &WdiTable) -> GroundTruth {
    let by_id: HashMap<&str, &crate::market::Appearance> =
        trace.appearances.values().flatten().map(|a| (a.profile.id.as_str(), a)).collect();
    let mut out = GroundTruth {
        captured: 0,
        sold: 0,
        revenue: 0.0,
    };
    for id in truth.counterfactual_listing.values().flatten() {
        let a = by_id[id.as_str()];
        if wdi.get(&a.profile.country).is_none() {
            continue;
        }
        out.captured += 1;
        if a.true_sale_day.is_some_and(|s| s <= 1) {
            out.sold += 1;
            out.revenue += a.profile.price;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 7;
        cfg.market.n_days = 40;
        cfg.market.volume.mean = 200.0;
        cfg.analysis.cv_replications = 10;
        cfg.reconstruct.stats_replications = 200;
        cfg.reconstruct.detailed_replications = 20;
        cfg
    }

    fn analysis(cfg: &ExperimentConfig) -> Analysis {
        let cfg = cfg.clone().resolved();
        let (trace, catalog) = simulate(&cfg).unwrap();
        let (raw, _) = crawl(&cfg, &trace).unwrap();
        analyze(&cfg, &raw, &catalog).unwrap()
    }

    #[test]
    fn conservative_never_exceeds_generous() {
        let a = analysis(&small());
        let b = a.recon.cutoff_batches();
        let (c, g) = (&b[&CutoffMode::Conservative].summary, &b[&CutoffMode::Generous].summary);
        assert!(c.total_sold.mean <= g.total_sold.mean);
        for (x, y) in c.per_day.iter().zip(&g.per_day) {
            assert_eq!(x.day, y.day);
            assert!(x.sold.mean <= y.sold.mean, "day {}", x.day);
        }
        assert!(a.recon.batches.contains_key(EXPECTED));
        assert_eq!(a.recon.detailed.len(), 3);
    }

    #[test]
    fn staged_runs_are_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let read = |out: &str| {
            let ctx = RunContext::new(small(), &tmp.path().join(out));
            let dir = run_experiment(&ctx).unwrap();
            let mut files: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
            files.sort();
            files.iter().map(|p| (p.file_name().unwrap().to_owned(), fs::read(p).unwrap())).collect::<Vec<_>>()
        };
        let (a, b) = (read("a"), read("b"));
        assert_eq!(a.len(), 9);
        assert_eq!(a, b);
        let header = String::from_utf8(a[0].1.clone()).unwrap();
        assert!(header.starts_with("# seed=7,config_hash="));
    }

    #[test]
    fn missing_wdi_file_fails_at_prep() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.inputs.wdi = Some(tmp.path().join("absent.csv"));
        let ctx = RunContext::new(cfg, tmp.path());
        let err = run_experiment(&ctx).unwrap_err();
        assert_eq!(err.stage, Stage::Prep);
        assert_eq!(err.exit_code(), 12);
        assert!(ctx.dir.join("crawl").exists());
    }

    #[test]
    fn config_parsing() {
        let cfg = ExperimentConfig::from_toml("seed = 3\n[inputs]\nwdi = \"w.csv\"\n", Path::new("/base")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.inputs.wdi.as_deref(), Some(Path::new("/base/w.csv")));
        let err = ExperimentConfig::from_toml("sed = 3\n", Path::new(".")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::from_toml("[analysis]\nalpha = 2.0\n", Path::new(".")).unwrap_err();
        assert_eq!(err.stage, Stage::Config);
    }

    #[test]
    fn seed_changes_the_run_directory() {
        let a = RunContext::new(small(), Path::new("out"));
        let mut cfg = small();
        cfg.seed = 8;
        let b = RunContext::new(cfg, Path::new("out"));
        assert_ne!(a.dir, b.dir);
        assert_eq!(a.dir, RunContext::new(small(), Path::new("out")).dir);
    }
}
