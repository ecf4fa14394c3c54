//! Artifacts-on-disk pipeline orchestrator.
//!
//! Every stage reads and writes only its declared artifacts, records their
//! SHA-256 hashes plus a fingerprint of the active configuration in
//! `manifest.json`, and refuses to run when an upstream artifact is missing
//! (run that stage first) or was produced under a different configuration
//! (stale). Rerunning a stage with the same configuration and inputs
//! produces byte-identical outputs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::carbon::{
    build_ledger, citywide_extrapolation, segment_carbon_summary, write_ledger_csv,
    CitywideExtrapolation, EmissionFactorTable, SegmentSummary,
};
use crate::did::{
    design_att, design_event_study, estimate, estimate_att, event_column_name, placebo, Coef,
    FEEstimate, OutcomeColumn,
};
use crate::error::{Error, Result};
use crate::forest::{
    infer_counterfactual, train_forest, ClassifierReport, ForestParams, InferencePolicy,
};
use crate::panel::{build_panel, read_panel_csv, write_panel_csv, PanelCell};
use crate::psm::{match_cohorts, BalanceTable, CaliperScale, CohortPair, ControlPool};
use crate::spatial::{
    build_daily_graphs, cluster_zones, gcn_train, mean_embeddings, regress_infrastructure,
    zone_feature_rows, zone_outcomes, GcnMetrics, GcnParams, InfraRegression,
};
use crate::synth::zones::{read_zones_csv, write_zones_csv};
use crate::synth::{generate, ScenarioConfig};
use crate::trips::{
    ingest_trips, read_users_csv, write_trips_csv, write_users_csv, Individual, RejectionReport,
    StudyBounds, TravelMode, TripRecord,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsmConfig {
    pub ratio: usize,
    pub caliper_mult: f64,
    pub scale: CaliperScale,
    pub control_pool: ControlPool,
}

impl Default for PsmConfig {
    fn default() -> Self {
        PsmConfig {
            ratio: 2,
            caliper_mult: 0.25,
            scale: CaliperScale::Probability,
            control_pool: ControlPool::NeverTreated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DidConfig {
    pub outcome: OutcomeColumn,
    pub placebo_shifts: Vec<u32>,
    pub placebo_full_sample: bool,
}

impl Default for DidConfig {
    fn default() -> Self {
        DidConfig { outcome: OutcomeColumn::Pst, placebo_shifts: vec![1, 2], placebo_full_sample: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpatialConfig {
    /// Graph-day window [start, end); `None` means the last 60 days.
    pub day_window: Option<(u32, u32)>,
    pub gcn: GcnParams,
    pub cluster_k_min: usize,
    pub cluster_k_max: usize,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig { day_window: None, gcn: GcnParams::default(), cluster_k_min: 2, cluster_k_max: 8 }
    }
}

/// Full pipeline configuration. All stage randomness is derived from the
/// single `seed` via fixed labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub threads: Option<usize>,
    #[serde(skip)]
    pub verbose: bool,
    pub scenario: ScenarioConfig,
    pub psm: PsmConfig,
    pub did: DidConfig,
    pub forest: ForestParams,
    pub inference: InferencePolicy,
    pub factors: EmissionFactorTable,
    pub spatial: SpatialConfig,
    /// Share of citywide trips made by participants, for extrapolation.
    pub participant_trip_share: f64,
    pub days_per_year: f64,
    /// Minimum pre-enrollment trips for individualized inference is in
    /// `inference`; this toggle skips per-individual models entirely.
    pub individualize: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            out_dir: PathBuf::from("out"),
            threads: None,
            verbose: false,
            scenario: ScenarioConfig::demo(1),
            psm: PsmConfig::default(),
            did: DidConfig::default(),
            // Desk-scale settings for the bundled demo; production-sized
            // parameter choices are the type-level defaults.
            forest: ForestParams { n_trees: 80, max_depth: 14, ..ForestParams::default() },
            inference: InferencePolicy::default(),
            factors: EmissionFactorTable::default(),
            spatial: SpatialConfig {
                day_window: None,
                gcn: GcnParams { lr: 0.02, max_iters: 40, dropout: 0.2, ..GcnParams::default() },
                cluster_k_min: 2,
                cluster_k_max: 8,
            },
            participant_trip_share: 0.126,
            days_per_year: 365.0,
            individualize: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.factors.validate()?;
        if self.psm.ratio == 0 {
            return Err(Error::Config("psm.ratio must be >= 1".into()));
        }
        if !(self.psm.caliper_mult > 0.0) {
            return Err(Error::Config("psm.caliper_mult must be > 0".into()));
        }
        if !(self.participant_trip_share > 0.0 && self.participant_trip_share <= 1.0) {
            return Err(Error::Config("participant_trip_share must lie in (0, 1]".into()));
        }
        if !(self.days_per_year > 0.0) {
            return Err(Error::Config("days_per_year must be > 0".into()));
        }
        if self.spatial.cluster_k_min < 2 || self.spatial.cluster_k_min > self.spatial.cluster_k_max {
            return Err(Error::Config("cluster k range must satisfy 2 <= k_min <= k_max".into()));
        }
        Ok(())
    }

    /// Hash of the configuration with volatile fields (paths, threads,
    /// verbosity) excluded; artifacts carry it as their config echo.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Stage-specific sub-seed derived from the pipeline seed by a fixed label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Panel,
    Match,
    Did,
    Counterfactual,
    Spatial,
    Report,
}

pub const ALL_STAGES: [Stage; 7] = [
    Stage::Synth,
    Stage::Panel,
    Stage::Match,
    Stage::Did,
    Stage::Counterfactual,
    Stage::Spatial,
    Stage::Report,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Panel => "panel",
            Stage::Match => "match",
            Stage::Did => "did",
            Stage::Counterfactual => "counterfactual",
            Stage::Spatial => "spatial",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        ALL_STAGES.iter().copied().find(|st| st.name() == s)
    }

    fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Synth => &[],
            Stage::Panel => &[Stage::Synth],
            Stage::Match => &[Stage::Synth, Stage::Panel],
            Stage::Did => &[Stage::Synth, Stage::Panel, Stage::Match],
            Stage::Counterfactual => &[Stage::Synth],
            Stage::Spatial => &[Stage::Synth, Stage::Counterfactual],
            Stage::Report => &[
                Stage::Synth,
                Stage::Panel,
                Stage::Match,
                Stage::Did,
                Stage::Counterfactual,
                Stage::Spatial,
            ],
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &["trips.csv", "users.csv", "zones.csv", "ground_truth.json"],
            Stage::Panel => &["panel.csv", "ingest_report.json"],
            Stage::Match => &["cohort.csv", "balance.json"],
            Stage::Did => &["did_results.json"],
            Stage::Counterfactual => {
                &["ledger.csv", "preferred_modes.csv", "metrics.json", "model_card.json"]
            }
            Stage::Spatial => &["zones_clusters.csv", "gcn_metrics.json", "infra_regression.json"],
            Stage::Report => &["run_report.json"],
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    stages: BTreeMap<String, ManifestStage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestStage {
    config_hash: String,
    outputs: BTreeMap<String, String>,
}

fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.json")
}

fn read_manifest(out_dir: &Path) -> Result<Manifest> {
    let path = manifest_path(out_dir);
    if !path.exists() {
        return Ok(Manifest { schema_version: SCHEMA_VERSION, stages: BTreeMap::new() });
    }
    let bytes = std::fs::read(&path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_manifest(out_dir: &Path, manifest: &Manifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    std::fs::write(manifest_path(out_dir), bytes)?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Check that every dependency stage ran under the current configuration
/// and that its artifacts still match the recorded hashes.
fn check_dependencies(config: &PipelineConfig, manifest: &Manifest, stage: Stage) -> Result<()> {
    let fp = config.fingerprint();
    for dep in stage.dependencies() {
        let Some(rec) = manifest.stages.get(dep.name()) else {
            return Err(Error::Dependency(format!(
                "stage {:?} needs {:?}: run `{}` first",
                stage.name(),
                dep.name(),
                dep.name()
            )));
        };
        if rec.config_hash != fp {
            return Err(Error::StaleArtifact(format!(
                "stage {:?} was produced under a different configuration; rerun it",
                dep.name()
            )));
        }
        for (file, hash) in &rec.outputs {
            let path = config.out_dir.join(file);
            if !path.exists() {
                return Err(Error::Dependency(format!(
                    "artifact {file:?} is missing: run `{}` first",
                    dep.name()
                )));
            }
            let actual = sha256_file(&path)?;
            if &actual != hash {
                return Err(Error::StaleArtifact(format!(
                    "artifact {file:?} changed on disk since `{}` ran",
                    dep.name()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub status: String,
    pub wall_ms: u128,
    pub outputs: Vec<ArtifactHash>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub n_obs: usize,
    pub n_units: usize,
}

impl EstimateSummary {
    fn from_fe(fe: &FEEstimate, coef: &Coef) -> EstimateSummary {
        EstimateSummary {
            estimate: coef.estimate,
            se: coef.se,
            t: coef.t,
            n_obs: fe.n_obs,
            n_units: fe.n_units,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRow {
    pub k: i32,
    pub beta: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaceboRow {
    pub shift: u32,
    pub full_sample: bool,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DidResults {
    pub schema_version: u32,
    pub config_hash: String,
    pub outcome: String,
    pub att: EstimateSummary,
    pub att_naive: EstimateSummary,
    pub event_study: Vec<EventRow>,
    pub placebo: Vec<PlaceboRow>,
    pub n_pairs: usize,
    pub n_matched_treated: usize,
    pub n_matched_controls: usize,
    pub dropped_treated: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchDoc {
    pub schema_version: u32,
    pub config_hash: String,
    pub balance: BalanceTable,
    pub calipers: Vec<(u32, f64)>,
    pub dropped_treated: usize,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfMetricsDoc {
    pub schema_version: u32,
    pub config_hash: String,
    pub classifier: ClassifierReport,
    pub segments: SegmentSummary,
    pub citywide: CitywideExtrapolation,
    pub n_individualized: usize,
    pub n_pooled: usize,
    pub n_individual_fallbacks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCardDoc {
    pub schema_version: u32,
    pub config_hash: String,
    pub params: ForestParams,
    pub policy: InferencePolicy,
    pub cv_scores: Vec<f64>,
    pub held_out_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub n_zones: usize,
    pub mean_car_reduction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GcnMetricsDoc {
    pub schema_version: u32,
    pub config_hash: String,
    pub metrics: GcnMetrics,
    pub test_mse_trace: Vec<f64>,
    pub best_iter: usize,
    pub iters_run: usize,
    pub params: GcnParams,
    pub day_window: (u32, u32),
    pub empty_days: Vec<u32>,
    pub chosen_k: usize,
    pub silhouette: Option<f64>,
    pub calinski_harabasz: Option<f64>,
    pub category_summary: Vec<CategoryRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfraDoc {
    pub schema_version: u32,
    pub config_hash: String,
    pub car_reduction: InfraRegression,
    pub carbon: InfraRegression,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestReportDoc {
    pub schema_version: u32,
    pub config_hash: String,
    pub n_trips: usize,
    pub rejections: RejectionReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Headline {
    pub att: EstimateSummary,
    pub att_naive: EstimateSummary,
    pub event_study: Vec<EventRow>,
    pub placebo: Vec<PlaceboRow>,
    pub forest_accuracy: f64,
    pub annual_co2_tons: f64,
    pub citywide_car_delta: Option<f64>,
    pub categories: Vec<CategoryRow>,
    pub infra_car_reduction: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub stages: Vec<StageReport>,
    pub headline: Option<Headline>,
}

struct StageTimer {
    name: &'static str,
    start: Instant,
    notes: Vec<String>,
}

impl StageTimer {
    fn new(name: &'static str) -> StageTimer {
        StageTimer { name, start: Instant::now(), notes: Vec::new() }
    }

    fn note(&mut self, s: String) {
        self.notes.push(s);
    }

    fn finish(self, config: &PipelineConfig, stage: Stage) -> Result<StageReport> {
        let mut outputs = Vec::new();
        let mut hashes = BTreeMap::new();
        for file in stage.outputs() {
            let path = config.out_dir.join(file);
            let sha256 = sha256_file(&path)?;
            hashes.insert(file.to_string(), sha256.clone());
            outputs.push(ArtifactHash { file: file.to_string(), sha256 });
        }
        let mut manifest = read_manifest(&config.out_dir)?;
        manifest.schema_version = SCHEMA_VERSION;
        manifest
            .stages
            .insert(stage.name().to_string(), ManifestStage { config_hash: config.fingerprint(), outputs: hashes });
        write_manifest(&config.out_dir, &manifest)?;
        Ok(StageReport {
            name: self.name.to_string(),
            status: "ok".to_string(),
            wall_ms: self.start.elapsed().as_millis(),
            outputs,
            notes: self.notes,
        })
    }
}

fn load_inputs(config: &PipelineConfig) -> Result<(StudyBounds, Vec<TripRecord>, Vec<Individual>)> {
    let bounds = config.scenario.bounds()?;
    let (trips, _) = ingest_trips(&config.out_dir.join("trips.csv"), &bounds)?;
    let users = read_users_csv(&config.out_dir.join("users.csv"), &bounds)?;
    Ok((bounds, trips, users))
}

fn stage_synth(config: &PipelineConfig) -> Result<StageReport> {
    let mut timer = StageTimer::new("synth");
    let scenario = ScenarioConfig { seed: derive_seed(config.seed, "synth"), ..config.scenario.clone() };
    let out = generate(&scenario)?;
    std::fs::create_dir_all(&config.out_dir)?;
    write_trips_csv(&config.out_dir.join("trips.csv"), &out.trips)?;
    write_users_csv(&config.out_dir.join("users.csv"), &out.individuals)?;
    write_zones_csv(&config.out_dir.join("zones.csv"), &out.zones)?;
    write_json(&config.out_dir.join("ground_truth.json"), &out.truth)?;
    timer.note(format!(
        "{} individuals, {} trips, {} zones",
        out.individuals.len(),
        out.trips.len(),
        out.zones.len()
    ));
    timer.finish(config, Stage::Synth)
}

fn stage_panel(config: &PipelineConfig) -> Result<StageReport> {
    let mut timer = StageTimer::new("panel");
    let bounds = config.scenario.bounds()?;
    let (trips, rejections) = ingest_trips(&config.out_dir.join("trips.csv"), &bounds)?;
    let users = read_users_csv(&config.out_dir.join("users.csv"), &bounds)?;
    let panel = build_panel(&trips, &users, &bounds)?;
    write_panel_csv(&config.out_dir.join("panel.csv"), &panel)?;
    write_json(
        &config.out_dir.join("ingest_report.json"),
        &IngestReportDoc {
            schema_version: SCHEMA_VERSION,
            config_hash: config.fingerprint(),
            n_trips: trips.len(),
            rejections: rejections.clone(),
        },
    )?;
    timer.note(format!("{} cells, {} rejected rows", panel.len(), rejections.total()));
    timer.finish(config, Stage::Panel)
}

fn stage_match(config: &PipelineConfig) -> Result<StageReport> {
    let mut timer = StageTimer::new("match");
    let bounds = config.scenario.bounds()?;
    let users = read_users_csv(&config.out_dir.join("users.csv"), &bounds)?;
    let panel = read_panel_csv(&config.out_dir.join("panel.csv"))?;
    let matched = match_cohorts(
        &users,
        &panel,
        config.psm.ratio,
        config.psm.caliper_mult,
        config.psm.scale,
        config.psm.control_pool,
    )?;

    let mut w = csv::Writer::from_path(config.out_dir.join("cohort.csv"))?;
    w.write_record(["treated_id", "control_id", "cohort_month"])?;
    for p in &matched.pairs {
        w.write_record(&[p.treated_id.as_str(), p.control_id.as_str(), &p.cohort_month.to_string()])?;
    }
    w.flush()?;

    write_json(
        &config.out_dir.join("balance.json"),
        &MatchDoc {
            schema_version: SCHEMA_VERSION,
            config_hash: config.fingerprint(),
            balance: matched.balance.clone(),
            calipers: matched.calipers.clone(),
            dropped_treated: matched.dropped_treated,
            n_pairs: matched.pairs.len(),
        },
    )?;
    timer.note(format!(
        "{} pairs, {} treated dropped, max post-match SMD {:.4}",
        matched.pairs.len(),
        matched.dropped_treated,
        matched.balance.max_smd_after()
    ));
    timer.finish(config, Stage::Match)
}

fn read_cohort_csv(path: &Path) -> Result<Vec<CohortPair>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut pairs = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        pairs.push(CohortPair {
            treated_id: rec.get(0).unwrap_or_default().to_string(),
            control_id: rec.get(1).unwrap_or_default().to_string(),
            cohort_month: rec
                .get(2)
                .unwrap_or_default()
                .parse()
                .map_err(|_| Error::Validation("bad cohort_month in cohort.csv".into()))?,
        });
    }
    Ok(pairs)
}

fn stage_did(config: &PipelineConfig) -> Result<StageReport> {
    let mut timer = StageTimer::new("did");
    let bounds = config.scenario.bounds()?;
    let users = read_users_csv(&config.out_dir.join("users.csv"), &bounds)?;
    let panel = read_panel_csv(&config.out_dir.join("panel.csv"))?;
    let pairs = read_cohort_csv(&config.out_dir.join("cohort.csv"))?;

    let mut matched_ids: BTreeSet<&str> = BTreeSet::new();
    for p in &pairs {
        matched_ids.insert(p.treated_id.as_str());
        matched_ids.insert(p.control_id.as_str());
    }
    let matched_cells: Vec<PanelCell> =
        panel.iter().filter(|c| matched_ids.contains(c.user_id.as_str())).cloned().collect();

    let enrollment: HashMap<String, u32> = users
        .iter()
        .filter(|u| matched_ids.contains(u.user_id.as_str()))
        .filter_map(|u| u.enrollment_month.map(|m| (u.user_id.clone(), m)))
        .collect();

    let outcome = config.did.outcome;
    let att_fe = estimate_att(&design_att(&matched_cells, outcome)?)?;
    let naive_fe = estimate_att(&design_att(&panel, outcome)?)?;

    let es_fe = estimate(&design_event_study(&matched_cells, &enrollment, outcome)?)?;
    let mut event_study = Vec::new();
    for k in crate::panel::EVENT_TIME_MIN..=crate::panel::EVENT_TIME_MAX {
        if k == crate::panel::EVENT_TIME_REFERENCE {
            continue;
        }
        if let Some(c) = es_fe.coef(&event_column_name(k)) {
            event_study.push(EventRow {
                k,
                beta: c.estimate,
                se: c.se,
                ci_low: c.estimate - 1.96 * c.se,
                ci_high: c.estimate + 1.96 * c.se,
            });
        }
    }

    let mut placebo_rows = Vec::new();
    for &shift in &config.did.placebo_shifts {
        let fe = placebo(&matched_cells, &enrollment, outcome, shift, config.did.placebo_full_sample)?;
        let c = fe.coef("dp").expect("placebo dp coefficient");
        placebo_rows.push(PlaceboRow {
            shift,
            full_sample: config.did.placebo_full_sample,
            estimate: c.estimate,
            se: c.se,
            t: c.t,
        });
    }

    let treated_matched: BTreeSet<&str> = pairs.iter().map(|p| p.treated_id.as_str()).collect();
    let controls_matched: BTreeSet<&str> = pairs.iter().map(|p| p.control_id.as_str()).collect();
    let balance: MatchDoc = read_json(&config.out_dir.join("balance.json"))?;

    let results = DidResults {
        schema_version: SCHEMA_VERSION,
        config_hash: config.fingerprint(),
        outcome: outcome.name().to_string(),
        att: EstimateSummary::from_fe(&att_fe, att_fe.coef("dp").expect("dp")),
        att_naive: EstimateSummary::from_fe(&naive_fe, naive_fe.coef("dp").expect("dp")),
        event_study,
        placebo: placebo_rows,
        n_pairs: pairs.len(),
        n_matched_treated: treated_matched.len(),
        n_matched_controls: controls_matched.len(),
        dropped_treated: balance.dropped_treated,
    };
    write_json(&config.out_dir.join("did_results.json"), &results)?;
    timer.note(format!("att = {:.4} (t = {:.2})", results.att.estimate, results.att.t));
    timer.finish(config, Stage::Did)
}

pub const PREFERRED_HEADER: [&str; 4] = ["trip_row", "user_id", "departure_iso8601", "preferred"];

fn stage_counterfactual(config: &PipelineConfig) -> Result<StageReport> {
    let mut timer = StageTimer::new("counterfactual");
    let (bounds, trips, users) = load_inputs(config)?;
    let enrollment: HashMap<&str, u32> = users
        .iter()
        .filter_map(|u| u.enrollment_month.map(|m| (u.user_id.as_str(), m)))
        .collect();

    // Split enrollee trips by their enrollment month.
    let mut pre = Vec::new();
    let mut post = Vec::new();
    let mut post_rows = Vec::new();
    for (i, t) in trips.iter().enumerate() {
        let Some(&st) = enrollment.get(t.user_id.as_str()) else { continue };
        let month = bounds.month_of(t.departure).ok_or_else(|| {
            Error::Validation(format!("trip for {} outside the study window", t.user_id))
        })?;
        if month < st {
            pre.push(t.clone());
        } else {
            post.push(t.clone());
            post_rows.push(i);
        }
    }

    let params = ForestParams { seed: derive_seed(config.seed, "forest"), ..config.forest };
    let (pooled, report) = train_forest(&pre, &params)?;

    let policy = InferencePolicy {
        min_individual_trips: if config.individualize {
            config.inference.min_individual_trips
        } else {
            usize::MAX
        },
        pooled_params: params,
        individual_params: ForestParams {
            seed: derive_seed(config.seed, "forest_individual"),
            ..config.inference.individual_params
        },
    };
    let inference = infer_counterfactual(&pre, &post, &pooled, &policy)?;

    let ledger = build_ledger(&post, &inference.preferred, &bounds, &config.factors)?;
    write_ledger_csv(&config.out_dir.join("ledger.csv"), &ledger)?;

    let mut w = csv::Writer::from_path(config.out_dir.join("preferred_modes.csv"))?;
    w.write_record(PREFERRED_HEADER)?;
    for ((row, trip), pref) in post_rows.iter().zip(&post).zip(&inference.preferred) {
        w.write_record(&[
            row.to_string(),
            trip.user_id.clone(),
            trip.departure.format("%Y-%m-%dT%H:%M").to_string(),
            pref.token().to_string(),
        ])?;
    }
    w.flush()?;

    let segments = segment_carbon_summary(&ledger, &post, &users, &bounds)?;
    let citywide = citywide_extrapolation(&ledger, config.participant_trip_share, config.days_per_year)?;

    write_json(
        &config.out_dir.join("metrics.json"),
        &CfMetricsDoc {
            schema_version: SCHEMA_VERSION,
            config_hash: config.fingerprint(),
            classifier: report.clone(),
            segments,
            citywide,
            n_individualized: inference.n_individualized,
            n_pooled: inference.n_pooled,
            n_individual_fallbacks: inference.n_individual_fallbacks,
        },
    )?;
    write_json(
        &config.out_dir.join("model_card.json"),
        &ModelCardDoc {
            schema_version: SCHEMA_VERSION,
            config_hash: config.fingerprint(),
            params,
            policy,
            cv_scores: report.cv_scores.clone(),
            held_out_accuracy: report.accuracy,
            n_train: report.n_train,
            n_test: report.n_test,
        },
    )?;
    timer.note(format!(
        "held-out accuracy {:.3}, {} shifted trips, {:.1} kg CO2/day",
        report.accuracy,
        ledger.shifts.len(),
        ledger.mean_daily_cer_kg()
    ));
    timer.finish(config, Stage::Counterfactual)
}

fn read_preferred_csv(path: &Path) -> Result<Vec<(usize, TravelMode)>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let row: usize = rec
            .get(0)
            .unwrap_or_default()
            .parse()
            .map_err(|_| Error::Validation("bad trip_row in preferred_modes.csv".into()))?;
        let mode: TravelMode = rec.get(3).unwrap_or_default().parse()?;
        rows.push((row, mode));
    }
    Ok(rows)
}

fn stage_spatial(config: &PipelineConfig) -> Result<StageReport> {
    let mut timer = StageTimer::new("spatial");
    let (bounds, trips, _) = load_inputs(config)?;
    let zones = read_zones_csv(&config.out_dir.join("zones.csv"))?;
    let preferred_rows = read_preferred_csv(&config.out_dir.join("preferred_modes.csv"))?;

    // Preferred = actual everywhere except the inferred post-enrollment trips.
    let mut preferred: Vec<TravelMode> = trips.iter().map(|t| t.mode).collect();
    for (row, mode) in preferred_rows {
        if row >= preferred.len() {
            return Err(Error::StaleArtifact(
                "preferred_modes.csv indexes past the trip table; rerun counterfactual".into(),
            ));
        }
        preferred[row] = mode;
    }

    let (w0, w1) = match config.spatial.day_window {
        Some(w) => w,
        None => (bounds.n_days().saturating_sub(45), bounds.n_days()),
    };
    let daily = build_daily_graphs(&trips, &preferred, &config.factors, &bounds, w0, w1)?;
    let params = GcnParams { seed: derive_seed(config.seed, "gcn"), ..config.spatial.gcn.clone() };
    let trained = gcn_train(&daily.graphs, &params)?;
    let embeddings = mean_embeddings(&trained.model, &daily.graphs)?;

    let outcomes = zone_outcomes(&trips, &preferred, &config.factors, &bounds, w0, w1)?;
    let car_reduction: Vec<f64> = outcomes.iter().map(|o| o.car_reduction).collect();
    let zone_ids: Vec<u32> = zones.iter().map(|z| z.zone_id).collect();
    let clusters = cluster_zones(
        &zone_ids,
        &embeddings,
        &car_reduction,
        config.spatial.cluster_k_min,
        config.spatial.cluster_k_max,
    )?;

    let mut w = csv::Writer::from_path(config.out_dir.join("zones_clusters.csv"))?;
    w.write_record(["zone_id", "embedding_hash", "cluster", "category", "projection_x", "projection_y"])?;
    for (i, &zid) in zone_ids.iter().enumerate() {
        let mut hasher = Sha256::new();
        for v in &embeddings[i] {
            hasher.update(v.to_le_bytes());
        }
        let hash = hex::encode(&hasher.finalize()[..8]);
        let category = clusters
            .category
            .as_ref()
            .map(|c| c[i].to_string())
            .unwrap_or_default();
        w.write_record(&[
            zid.to_string(),
            hash,
            clusters.cluster[i].to_string(),
            category,
            clusters.projection[i].0.to_string(),
            clusters.projection[i].1.to_string(),
        ])?;
    }
    w.flush()?;

    let mut category_summary = Vec::new();
    if let Some(cats) = &clusters.category {
        for cat in crate::spatial::cluster::ALL_CATEGORIES {
            let idx: Vec<usize> = (0..cats.len()).filter(|&i| cats[i] == cat).collect();
            let mean = if idx.is_empty() {
                0.0
            } else {
                idx.iter().map(|&i| car_reduction[i]).sum::<f64>() / idx.len() as f64
            };
            category_summary.push(CategoryRow {
                category: cat.to_string(),
                n_zones: idx.len(),
                mean_car_reduction: mean,
            });
        }
    }
    let chosen = clusters.scores.iter().find(|s| s.k == clusters.k);
    write_json(
        &config.out_dir.join("gcn_metrics.json"),
        &GcnMetricsDoc {
            schema_version: SCHEMA_VERSION,
            config_hash: config.fingerprint(),
            metrics: trained.metrics,
            test_mse_trace: trained.test_mse_trace.clone(),
            best_iter: trained.best_iter,
            iters_run: trained.iters_run,
            params,
            day_window: (w0, w1),
            empty_days: daily.empty_days.clone(),
            chosen_k: clusters.k,
            silhouette: chosen.and_then(|s| s.silhouette),
            calinski_harabasz: chosen.and_then(|s| s.calinski_harabasz),
            category_summary: category_summary.clone(),
        },
    )?;

    let rows = zone_feature_rows(&zones, &outcomes)?;
    let carbon: Vec<f64> = outcomes.iter().map(|o| o.carbon_kg).collect();
    let infra = InfraDoc {
        schema_version: SCHEMA_VERSION,
        config_hash: config.fingerprint(),
        car_reduction: regress_infrastructure(&rows, &car_reduction, "car_reduction")?,
        carbon: regress_infrastructure(&rows, &carbon, "carbon_kg")?,
    };
    write_json(&config.out_dir.join("infra_regression.json"), &infra)?;

    timer.note(format!(
        "{} graphs ({} empty), k = {}, test MSE {:.5}",
        daily.graphs.len(),
        daily.empty_days.len(),
        clusters.k,
        trained.metrics.mse
    ));
    timer.finish(config, Stage::Spatial)
}

fn stage_report(config: &PipelineConfig, prior: &[StageReport]) -> Result<StageReport> {
    let timer = StageTimer::new("report");
    let did: DidResults = read_json(&config.out_dir.join("did_results.json"))?;
    let cf: CfMetricsDoc = read_json(&config.out_dir.join("metrics.json"))?;
    let gcn: GcnMetricsDoc = read_json(&config.out_dir.join("gcn_metrics.json"))?;
    let infra: InfraDoc = read_json(&config.out_dir.join("infra_regression.json"))?;

    let headline = Headline {
        att: did.att.clone(),
        att_naive: did.att_naive.clone(),
        event_study: did.event_study.clone(),
        placebo: did.placebo.clone(),
        forest_accuracy: cf.classifier.accuracy,
        annual_co2_tons: cf.citywide.annual_co2_tons,
        citywide_car_delta: cf.citywide.citywide_mode_delta[TravelMode::GasolineCar.ordinal()],
        categories: gcn.category_summary.clone(),
        infra_car_reduction: infra
            .car_reduction
            .names
            .iter()
            .cloned()
            .zip(infra.car_reduction.coefficients.iter().copied())
            .collect(),
    };

    let mut stages = prior.to_vec();
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        seed: config.seed,
        config_hash: config.fingerprint(),
        stages: std::mem::take(&mut stages),
        headline: Some(headline),
    };
    write_json(&config.out_dir.join("run_report.json"), &report)?;
    timer.finish(config, Stage::Report)
}

/// Run one stage, verifying its upstream artifacts first.
pub fn run_stage(config: &PipelineConfig, stage: Stage) -> Result<StageReport> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let manifest = read_manifest(&config.out_dir)?;
    check_dependencies(config, &manifest, stage)?;
    if config.verbose {
        eprintln!("[modeshift] running stage {}", stage.name());
    }
    match stage {
        Stage::Synth => stage_synth(config),
        Stage::Panel => stage_panel(config),
        Stage::Match => stage_match(config),
        Stage::Did => stage_did(config),
        Stage::Counterfactual => stage_counterfactual(config),
        Stage::Spatial => stage_spatial(config),
        Stage::Report => stage_report(config, &[]),
    }
}

/// Run the full pipeline in dependency order and return the consolidated
/// report (also written as `run_report.json`).
pub fn run_all(config: &PipelineConfig) -> Result<RunReport> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let mut reports = Vec::new();
    for stage in [Stage::Synth, Stage::Panel, Stage::Match, Stage::Did, Stage::Counterfactual, Stage::Spatial]
    {
        let manifest = read_manifest(&config.out_dir)?;
        check_dependencies(config, &manifest, stage)?;
        if config.verbose {
            eprintln!("[modeshift] running stage {}", stage.name());
        }
        let report = match stage {
            Stage::Synth => stage_synth(config)?,
            Stage::Panel => stage_panel(config)?,
            Stage::Match => stage_match(config)?,
            Stage::Did => stage_did(config)?,
            Stage::Counterfactual => stage_counterfactual(config)?,
            Stage::Spatial => stage_spatial(config)?,
            Stage::Report => unreachable!(),
        };
        reports.push(report);
    }
    let manifest = read_manifest(&config.out_dir)?;
    check_dependencies(config, &manifest, Stage::Report)?;
    let report_stage = stage_report(config, &reports)?;
    reports.push(report_stage);
    read_json(&config.out_dir.join("run_report.json"))
}
