//! Deterministic, seeded synthetic-data oracle.
//!
//! Generates a population, a zoned city, trips, and program enrollment with
//! *planted* treatment effects, so every downstream estimator can be checked
//! against known ground truth. Treatment shifts the per-trip low-carbon
//! choice probability; realized and counterfactual worlds share the same
//! uniform draw per trip (common random numbers), so the no-treatment world
//! is stored exactly, not re-simulated.

pub mod zones;

use chrono::{Datelike, Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trips::{Gender, Individual, StudyBounds, TravelMode, TripRecord, ALL_AGE_BANDS};
use zones::{plant_zone_archetypes, Archetype, ArchetypeLayout, ZoneSpec};

/// Logistic enrollment model over individual covariates. Coefficients are on
/// centered codes: gender (M=+0.5, F=-0.5), age ((ordinal-3)/3), income
/// (level-2), trip-rate segment (segment-1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentModel {
    pub intercept: f64,
    pub gender: f64,
    pub age: f64,
    pub income: f64,
    pub rate: f64,
    /// Enrollment month drawn uniformly from this inclusive range.
    pub month_min: u32,
    pub month_max: u32,
}

impl EnrollmentModel {
    pub fn random_at(rate: f64, month_min: u32, month_max: u32) -> Self {
        EnrollmentModel {
            intercept: (rate / (1.0 - rate)).ln(),
            gender: 0.0,
            age: 0.0,
            income: 0.0,
            rate: 0.0,
            month_min,
            month_max,
        }
    }

    pub fn is_random(&self) -> bool {
        self.gender == 0.0 && self.age == 0.0 && self.income == 0.0 && self.rate == 0.0
    }
}

/// Monthly trip-count model: three frequency segments, per-individual rate
/// drawn from a gamma around the segment mean, counts Poisson per month
/// (a negative-binomial mixture).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRateModel {
    pub segment_weights: [f64; 3],
    pub segment_means: [f64; 3],
    /// Gamma shape of the per-individual rate multiplier (mean 1).
    pub shape: f64,
}

/// Per-trip mode utility model. Mode order everywhere: car, bus, subway, bike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeUtilityModel {
    pub base: [f64; 4],
    pub distance_coef: [f64; 4],
    pub peak_bonus: [f64; 4],
    pub workday_bonus: [f64; 4],
    /// Car-utility shift per income level above/below 2.
    pub income_car: f64,
    /// Bike-utility shift per age ordinal below 3 (younger bike more).
    pub age_bike: f64,
    /// (mu, sigma) of the log-normal trip distance in km.
    pub distance_lognorm: (f64, f64),
    pub speeds_kmh: [f64; 4],
    pub duration_noise_sd: f64,
}

/// How a mode is drawn from utilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChoiceModel {
    /// Multinomial logit: p ∝ exp(scale · utility).
    Logit { scale: f64 },
    /// Utility argmax with probability 1-noise, otherwise uniform over the
    /// four modes. Gives a known Bayes rate of (1-noise) + noise/4.
    ArgmaxNoise { noise: f64 },
}

/// Full scenario description; everything downstream is a deterministic
/// function of this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_individuals: usize,
    pub n_months: u32,
    pub start_date: NaiveDate,
    pub grid_rows: u32,
    pub grid_cols: u32,
    /// (F, M)
    pub gender_weights: [f64; 2],
    pub age_weights: [f64; 7],
    pub income_weights: [f64; 3],
    pub archetype_weights: [f64; 4],
    /// Origin-zone accessibility utility, [archetype][mode].
    pub archetype_access: [[f64; 4]; 4],
    /// Multiplier on the planted effect by origin-zone archetype.
    pub archetype_effect_mult: [f64; 4],
    pub enrollment: EnrollmentModel,
    /// Additive shift of the low-carbon choice probability from enrollment on.
    pub planted_att: f64,
    /// Per-event-time multipliers on `planted_att` for k in [0, 8].
    pub dynamic_profile: [f64; 9],
    /// Probability shift planted at k = -1 (tests of pre-trend detection).
    pub anticipation: f64,
    pub trip_rate: TripRateModel,
    pub utilities: ModeUtilityModel,
    pub choice: ChoiceModel,
    /// Per-month drift of low-carbon utility per unit of (income-2); creates
    /// covariate-correlated trends that bias the unmatched estimator.
    pub covariate_trend: f64,
    /// AR(1) coefficient of the monthly individual utility noise.
    pub noise_rho: f64,
    pub noise_sd: f64,
    /// SD of the time-invariant individual low-carbon preference.
    pub lc_pref_sd: f64,
    /// (F, M) multipliers on the planted effect.
    pub gender_effect_mult: [f64; 2],
    /// (F, M) multipliers on trip distance.
    pub gender_distance_mult: [f64; 2],
    /// Probability a trip starts from the home zone.
    pub home_bias: f64,
    /// Probability a trip ends in its origin zone (short local trips).
    pub dest_home_bias: f64,
    pub archetype_layout: ArchetypeLayout,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            n_individuals: 2_000,
            n_months: 13,
            start_date: NaiveDate::from_ymd_opt(2022, 12, 1).unwrap(),
            grid_rows: 12,
            grid_cols: 12,
            gender_weights: [0.5, 0.5],
            age_weights: [0.06, 0.18, 0.26, 0.14, 0.12, 0.10, 0.14],
            income_weights: [0.3, 0.45, 0.25],
            archetype_weights: [0.25, 0.25, 0.25, 0.25],
            archetype_access: [
                // car, bus, subway, bike
                [-0.10, 0.20, 1.00, 0.10],  // subway-rich
                [0.00, 0.90, -0.30, 0.10],  // bus-rich
                [0.20, 0.10, -0.60, 0.20],  // sparse
                [0.50, -0.20, -1.00, 0.00], // peripheral
            ],
            archetype_effect_mult: [1.0, 1.0, 1.0, 1.0],
            enrollment: EnrollmentModel {
                intercept: -0.85,
                gender: 0.0,
                age: 0.0,
                income: 0.0,
                rate: 0.0,
                month_min: 2,
                month_max: 6,
            },
            planted_att: 0.0,
            dynamic_profile: [1.0; 9],
            anticipation: 0.0,
            trip_rate: TripRateModel {
                segment_weights: [0.35, 0.55, 0.10],
                segment_means: [2.2, 7.0, 18.0],
                shape: 6.0,
            },
            utilities: ModeUtilityModel {
                base: [0.60, 0.15, 0.35, -0.10],
                distance_coef: [0.030, -0.005, 0.015, -0.200],
                peak_bonus: [-0.15, 0.20, 0.35, 0.00],
                workday_bonus: [0.00, 0.10, 0.10, 0.05],
                income_car: 0.25,
                age_bike: 0.15,
                distance_lognorm: (1.504, 0.55),
                speeds_kmh: [30.0, 18.0, 32.0, 13.0],
                duration_noise_sd: 0.15,
            },
            choice: ChoiceModel::Logit { scale: 1.0 },
            covariate_trend: 0.0,
            noise_rho: 0.0,
            noise_sd: 0.20,
            lc_pref_sd: 0.30,
            gender_effect_mult: [1.0, 1.0],
            gender_distance_mult: [1.0, 1.0],
            home_bias: 0.6,
            dest_home_bias: 0.0,
            archetype_layout: ArchetypeLayout::Random,
        }
    }
}

fn weights_ok(w: &[f64]) -> bool {
    w.iter().all(|&x| x >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_individuals == 0 || self.n_individuals > 999_999 {
            return Err(Error::Config("n_individuals must be in 1..=999999".into()));
        }
        if self.n_months == 0 {
            return Err(Error::Config("n_months must be >= 1".into()));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::Config("grid must be non-empty".into()));
        }
        if !weights_ok(&self.gender_weights)
            || !weights_ok(&self.age_weights)
            || !weights_ok(&self.income_weights)
            || !weights_ok(&self.archetype_weights)
            || !weights_ok(&self.trip_rate.segment_weights)
        {
            return Err(Error::Config(
                "mixture weights must be non-negative and sum to 1 per dimension".into(),
            ));
        }
        if !(-1.0..=1.0).contains(&self.planted_att) || !(-1.0..=1.0).contains(&self.anticipation) {
            return Err(Error::Config("planted_att and anticipation must lie in [-1, 1]".into()));
        }
        if self.dynamic_profile.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::Config("dynamic_profile multipliers must be finite and >= 0".into()));
        }
        if self.enrollment.month_min < 1
            || self.enrollment.month_min > self.enrollment.month_max
            || self.enrollment.month_max >= self.n_months
        {
            return Err(Error::Config(
                "enrollment months must satisfy 1 <= month_min <= month_max < n_months".into(),
            ));
        }
        match self.choice {
            ChoiceModel::Logit { scale } => {
                if !(scale > 0.0) {
                    return Err(Error::Config("logit scale must be > 0".into()));
                }
            }
            ChoiceModel::ArgmaxNoise { noise } => {
                if !(noise > 0.0 && noise <= 1.0) {
                    return Err(Error::Config("argmax noise must lie in (0, 1]".into()));
                }
            }
        }
        if self.trip_rate.segment_means.iter().any(|&m| !(m > 0.0)) || !(self.trip_rate.shape > 0.0) {
            return Err(Error::Config("trip-rate means and shape must be > 0".into()));
        }
        if self.utilities.speeds_kmh.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("mode speeds must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.noise_rho) {
            return Err(Error::Config("noise_rho must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.home_bias) {
            return Err(Error::Config("home_bias must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.dest_home_bias) {
            return Err(Error::Config("dest_home_bias must lie in [0, 1]".into()));
        }
        if self.gender_effect_mult.iter().any(|&m| m < 0.0)
            || self.gender_distance_mult.iter().any(|&m| !(m > 0.0))
            || self.archetype_effect_mult.iter().any(|&m| m < 0.0)
        {
            return Err(Error::Config("effect and distance multipliers must be non-negative".into()));
        }
        Ok(())
    }

    pub fn bounds(&self) -> Result<StudyBounds> {
        StudyBounds::new(self.start_date, self.n_months, self.grid_rows, self.grid_cols)
    }

    pub fn user_id(idx: usize) -> String {
        format!("u{idx:06}")
    }

    pub fn user_index(user_id: &str) -> Option<usize> {
        user_id.strip_prefix('u').and_then(|s| s.parse().ok())
    }

    /// Bundled demo scenario: 5k individuals, a decaying planted effect,
    /// covariate-driven self-selection, and zone-graded effectiveness.
    pub fn demo(seed: u64) -> Self {
        ScenarioConfig {
            seed,
            n_individuals: 5_000,
            planted_att: 0.12,
            dynamic_profile: [1.0, 0.96, 0.92, 0.88, 0.84, 0.80, 0.76, 0.73, 0.70],
            enrollment: EnrollmentModel {
                intercept: -0.9,
                gender: 0.2,
                age: -0.3,
                income: 0.5,
                rate: 0.0,
                month_min: 2,
                month_max: 6,
            },
            covariate_trend: 0.002,
            archetype_effect_mult: [1.0, 0.6, 0.3, 0.05],
            home_bias: 0.7,
            dest_home_bias: 0.6,
            archetype_access: [
                [-0.20, -0.10, 1.30, -0.10],
                [-0.10, 1.20, -0.50, -0.10],
                [0.10, -0.50, -0.90, 1.80],
                [0.90, -0.40, -1.20, -0.30],
            ],
            ..ScenarioConfig::default()
        }
    }

    /// Constant planted effect of 0.10 with active covariate self-selection.
    /// Trip rates are kept modest so 50k-individual scenarios stay desk-scale.
    pub fn att_recovery(seed: u64, n_individuals: usize) -> Self {
        ScenarioConfig {
            seed,
            n_individuals,
            planted_att: 0.10,
            enrollment: EnrollmentModel {
                intercept: -0.9,
                gender: 0.2,
                age: -0.4,
                income: 0.6,
                rate: 0.0,
                month_min: 2,
                month_max: 6,
            },
            covariate_trend: 0.004,
            trip_rate: TripRateModel {
                segment_weights: [0.35, 0.55, 0.10],
                segment_means: [1.5, 4.0, 9.0],
                shape: 6.0,
            },
            ..ScenarioConfig::default()
        }
    }

    /// Strong observable self-selection: enrollment loads on income, and
    /// income also drives a per-month drift of the low-carbon utility, so
    /// the unmatched estimator is biased while matching recovers the truth.
    pub fn self_selection(seed: u64, n_individuals: usize) -> Self {
        ScenarioConfig {
            enrollment: EnrollmentModel {
                intercept: -1.3,
                gender: 0.2,
                age: -0.4,
                income: 1.5,
                rate: 0.0,
                month_min: 2,
                month_max: 6,
            },
            covariate_trend: 0.03,
            ..Self::att_recovery(seed, n_individuals)
        }
    }

    /// Single enrollment cohort at month 4 with a planted profile decaying
    /// from 0.204 at k = 0 to 0.128 at k = 8 and clean pre-trends.
    pub fn event_study_decay(seed: u64, n_individuals: usize) -> Self {
        let start = 0.204f64;
        let end = 0.128f64;
        let mut profile = [0.0; 9];
        for (k, p) in profile.iter_mut().enumerate() {
            *p = (start + (end - start) * k as f64 / 8.0) / start;
        }
        ScenarioConfig {
            seed,
            n_individuals,
            planted_att: start,
            dynamic_profile: profile,
            enrollment: EnrollmentModel {
                intercept: -0.7,
                gender: 0.0,
                age: 0.0,
                income: 0.0,
                rate: 0.0,
                month_min: 4,
                month_max: 4,
            },
            covariate_trend: 0.0,
            // Keep the baseline low-carbon share low enough that adding the
            // planted 0.204 never clips the choice probabilities.
            utilities: ModeUtilityModel {
                base: [1.1, 0.15, 0.35, -0.10],
                ..ScenarioConfig::default().utilities
            },
            lc_pref_sd: 0.2,
            noise_sd: 0.15,
            ..ScenarioConfig::default()
        }
    }

    /// Effects strictly post-enrollment (clean placebo null).
    pub fn placebo_null(seed: u64, n_individuals: usize) -> Self {
        ScenarioConfig {
            seed,
            n_individuals,
            planted_att: 0.15,
            enrollment: EnrollmentModel {
                intercept: -0.8,
                gender: 0.0,
                age: 0.0,
                income: 0.3,
                rate: 0.0,
                month_min: 3,
                month_max: 6,
            },
            covariate_trend: 0.0,
            ..ScenarioConfig::default()
        }
    }

    /// Planted anticipation one month before enrollment; a pre-period
    /// placebo must light up on this scenario.
    pub fn anticipation(seed: u64, n_individuals: usize) -> Self {
        ScenarioConfig { anticipation: 0.12, ..Self::placebo_null(seed, n_individuals) }
    }

    /// Deterministic utility-argmax preferences with 10% choice noise: the
    /// Bayes accuracy is 0.9 + 0.1/4 = 0.925 and every utility input is a
    /// function of observable trip features.
    pub fn classifier(seed: u64, n_individuals: usize) -> Self {
        ScenarioConfig {
            seed,
            n_individuals,
            planted_att: 0.0,
            choice: ChoiceModel::ArgmaxNoise { noise: 0.10 },
            lc_pref_sd: 0.0,
            noise_sd: 0.0,
            covariate_trend: 0.0,
            grid_rows: 8,
            grid_cols: 8,
            archetype_layout: ArchetypeLayout::Banded,
            utilities: ModeUtilityModel {
                income_car: 0.0,
                age_bike: 0.0,
                ..ScenarioConfig::default().utilities
            },
            ..ScenarioConfig::default()
        }
    }

    /// 200 zones with archetype-graded planted effectiveness and early
    /// enrollment over a short window, for the spatial-recovery harness.
    pub fn spatial_recovery(seed: u64, n_individuals: usize) -> Self {
        ScenarioConfig {
            seed,
            n_individuals,
            n_months: 4,
            grid_rows: 20,
            grid_cols: 10,
            planted_att: 0.28,
            archetype_effect_mult: [1.0, 0.6, 0.3, 0.05],
            enrollment: EnrollmentModel {
                intercept: -0.3,
                gender: 0.0,
                age: 0.0,
                income: 0.2,
                rate: 0.0,
                month_min: 1,
                month_max: 2,
            },
            home_bias: 0.75,
            dest_home_bias: 0.65,
            covariate_trend: 0.0,
            // Four clearly distinct accessibility profiles (subway-, bus-,
            // bike-, and car-dominant) so zone features carry archetype
            // signal.
            archetype_access: [
                [-0.20, -0.10, 1.30, -0.10],
                [-0.10, 1.20, -0.50, -0.10],
                [0.10, -0.50, -0.90, 1.80],
                [0.90, -0.40, -1.20, -0.30],
            ],
            ..ScenarioConfig::default()
        }
    }

    /// No planted effect and fully random enrollment.
    pub fn null_scenario(seed: u64, n_individuals: usize) -> Self {
        ScenarioConfig {
            seed,
            n_individuals,
            planted_att: 0.0,
            enrollment: EnrollmentModel::random_at(0.3, 2, 6),
            covariate_trend: 0.0,
            ..ScenarioConfig::default()
        }
    }

    /// Serially correlated monthly noise (AR(1) ρ = 0.6) for standard-error
    /// direction checks.
    pub fn serial_noise(seed: u64, n_individuals: usize) -> Self {
        ScenarioConfig {
            seed,
            n_individuals,
            planted_att: 0.10,
            noise_rho: 0.6,
            noise_sd: 0.25,
            enrollment: EnrollmentModel::random_at(0.3, 2, 6),
            ..ScenarioConfig::default()
        }
    }
}

/// Per-(individual, month) ground truth; present only for months with trips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonthTruth {
    pub pst_real: f64,
    pub pst_cf: f64,
    pub n_trips: u32,
}

/// Everything the generator knows that an estimator is supposed to recover.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted_att: f64,
    pub dynamic_profile: [f64; 9],
    /// True event-study coefficients att × profile for k in [0, 8].
    pub beta_k: [f64; 9],
    pub anticipation: f64,
    /// Per-individual enrollment propensity, index-aligned with the
    /// generated individuals.
    pub enroll_propensity: Vec<f64>,
    /// `[individual][month]`, `None` when the month has no trips.
    pub months: Vec<Vec<Option<MonthTruth>>>,
    /// Counterfactual (no-program) mode per trip, aligned with the trips.
    pub cf_modes: Vec<TravelMode>,
    /// Archetype per zone id.
    pub zone_archetypes: Vec<Archetype>,
    pub archetype_effect_mult: [f64; 4],
}

impl GroundTruth {
    /// Mean of (realized - counterfactual) PST over treated post-enrollment
    /// cells: the realized average planted effect.
    pub fn mean_treated_post_gap(&self, individuals: &[Individual]) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, ind) in individuals.iter().enumerate() {
            let Some(st) = ind.enrollment_month else { continue };
            for (t, cell) in self.months[i].iter().enumerate() {
                if (t as u32) < st {
                    continue;
                }
                if let Some(mt) = cell {
                    sum += mt.pst_real - mt.pst_cf;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Generated scenario: trips sorted by (user_id, departure), individuals in
/// index order, zones in id order, and the planted ground truth.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub bounds: StudyBounds,
    pub trips: Vec<TripRecord>,
    pub individuals: Vec<Individual>,
    pub zones: Vec<ZoneSpec>,
    pub truth: GroundTruth,
}

fn pick<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return i;
        }
    }
    weights.len() - 1
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mode probabilities (car, bus, subway, bike) from utilities.
fn choice_probs(choice: &ChoiceModel, utilities: [f64; 4]) -> [f64; 4] {
    match *choice {
        ChoiceModel::Logit { scale } => {
            let m = utilities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut e = [0.0; 4];
            let mut s = 0.0;
            for i in 0..4 {
                e[i] = ((utilities[i] - m) * scale).exp();
                s += e[i];
            }
            for v in &mut e {
                *v /= s;
            }
            e
        }
        ChoiceModel::ArgmaxNoise { noise } => {
            let mut best = 0;
            for i in 1..4 {
                if utilities[i] > utilities[best] {
                    best = i;
                }
            }
            let mut p = [noise / 4.0; 4];
            p[best] += 1.0 - noise;
            p
        }
    }
}

/// Shift the low-carbon probability mass by `e`, preserving the relative
/// composition of the low-carbon modes. `e == 0` returns the input exactly.
fn shift_low_carbon(p: [f64; 4], e: f64) -> [f64; 4] {
    if e == 0.0 {
        return p;
    }
    let p_lc = p[1] + p[2] + p[3];
    let target = (p_lc + e).clamp(0.002, 0.998);
    let factor = target / p_lc;
    [1.0 - target, p[1] * factor, p[2] * factor, p[3] * factor]
}

fn inv_cdf(p: &[f64; 4], u: f64) -> usize {
    let mut cum = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        cum += pi;
        if u < cum {
            return i;
        }
    }
    3
}

struct IndividualOutput {
    individual: Individual,
    propensity: f64,
    months: Vec<Option<MonthTruth>>,
    trips: Vec<TripRecord>,
    cf_modes: Vec<TravelMode>,
}

/// Generate a full scenario. Deterministic for a fixed config (including
/// across thread counts: each individual owns one counter-based stream).
pub fn generate(config: &ScenarioConfig) -> Result<SynthOutput> {
    config.validate()?;
    let bounds = config.bounds()?;

    let mut zone_rng = ChaCha8Rng::seed_from_u64(config.seed);
    zone_rng.set_stream(0);
    let zones = plant_zone_archetypes(
        &mut zone_rng,
        config.grid_rows,
        config.grid_cols,
        &config.archetype_weights,
        config.archetype_layout,
    )?;
    let zone_archetypes: Vec<Archetype> = zones.iter().map(|z| z.archetype).collect();

    let outputs: Vec<IndividualOutput> = (0..config.n_individuals)
        .into_par_iter()
        .map(|idx| generate_individual(config, &bounds, &zone_archetypes, idx))
        .collect();

    let mut trips = Vec::new();
    let mut cf_modes = Vec::new();
    let mut individuals = Vec::with_capacity(config.n_individuals);
    let mut propensities = Vec::with_capacity(config.n_individuals);
    let mut months = Vec::with_capacity(config.n_individuals);
    for out in outputs {
        individuals.push(out.individual);
        propensities.push(out.propensity);
        months.push(out.months);
        trips.extend(out.trips);
        cf_modes.extend(out.cf_modes);
    }

    let beta_k = {
        let mut b = [0.0; 9];
        for (k, m) in config.dynamic_profile.iter().enumerate() {
            b[k] = config.planted_att * m;
        }
        b
    };

    Ok(SynthOutput {
        bounds,
        trips,
        individuals,
        zones,
        truth: GroundTruth {
            planted_att: config.planted_att,
            dynamic_profile: config.dynamic_profile,
            beta_k,
            anticipation: config.anticipation,
            enroll_propensity: propensities,
            months,
            cf_modes,
            zone_archetypes,
            archetype_effect_mult: config.archetype_effect_mult,
        },
    })
}

fn generate_individual(
    config: &ScenarioConfig,
    bounds: &StudyBounds,
    zone_archetypes: &[Archetype],
    idx: usize,
) -> IndividualOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(idx as u64 + 1);
    let u = &config.utilities;

    let gender = if pick(&mut rng, &config.gender_weights) == 0 { Gender::Female } else { Gender::Male };
    let age_band = ALL_AGE_BANDS[pick(&mut rng, &config.age_weights)];
    let income_level = pick(&mut rng, &config.income_weights) as u8 + 1;
    let n_zones = zone_archetypes.len() as u32;
    let home_zone = rng.random_range(0..n_zones);
    let rate_segment = pick(&mut rng, &config.trip_rate.segment_weights);

    let rate_gamma = Gamma::new(config.trip_rate.shape, 1.0 / config.trip_rate.shape).expect("gamma");
    let lambda = (config.trip_rate.segment_means[rate_segment] * rate_gamma.sample(&mut rng)).max(0.2);

    let lc_pref = if config.lc_pref_sd > 0.0 {
        Normal::new(0.0, config.lc_pref_sd).expect("normal").sample(&mut rng)
    } else {
        0.0
    };

    // Centered covariate codes shared by the enrollment model.
    let gender_c = if gender == Gender::Male { 0.5 } else { -0.5 };
    let age_c = (age_band.ordinal() as f64 - 3.0) / 3.0;
    let income_c = income_level as f64 - 2.0;
    let rate_c = rate_segment as f64 - 1.0;

    let em = &config.enrollment;
    let propensity = logistic(
        em.intercept + em.gender * gender_c + em.age * age_c + em.income * income_c + em.rate * rate_c,
    );
    let enrolled = rng.random::<f64>() < propensity;
    let enrollment_month = if enrolled {
        Some(rng.random_range(em.month_min..=em.month_max))
    } else {
        None
    };

    let dist_lognorm = LogNormal::new(u.distance_lognorm.0, u.distance_lognorm.1).expect("lognormal");
    let dur_noise = Normal::new(0.0, u.duration_noise_sd).expect("normal");
    let month_noise = Normal::new(0.0, config.noise_sd).expect("normal");
    let poisson = Poisson::new(lambda).expect("poisson");

    let gender_ix = if gender == Gender::Male { 1 } else { 0 };
    let dist_mult = config.gender_distance_mult[gender_ix];
    let effect_gender = config.gender_effect_mult[gender_ix];
    let t_mid = (config.n_months as f64 - 1.0) / 2.0;

    let mut trips = Vec::new();
    let mut cf_modes = Vec::new();
    let mut months: Vec<Option<MonthTruth>> = vec![None; config.n_months as usize];
    let mut serial = 0.0;

    for t in 0..config.n_months {
        let eps: f64 = month_noise.sample(&mut rng);
        serial = config.noise_rho * serial + eps;
        let lc_drift =
            lc_pref + serial + config.covariate_trend * income_c * (t as f64 - t_mid);

        let n_trips = poisson.sample(&mut rng).round() as u32;
        if n_trips == 0 {
            continue;
        }

        let effect = match enrollment_month {
            Some(st) => {
                let k = t as i64 - st as i64;
                if k >= 0 {
                    config.planted_att * config.dynamic_profile[(k as usize).min(8)] * effect_gender
                } else if k == -1 {
                    config.anticipation * effect_gender
                } else {
                    0.0
                }
            }
            None => 0.0,
        };

        let (first_day, days_in_month) = bounds.month_days(t);
        let mut lc_real = 0u32;
        let mut lc_cf = 0u32;
        let mut month_trips = Vec::with_capacity(n_trips as usize);

        for _ in 0..n_trips {
            let day = first_day + rng.random_range(0..days_in_month);
            let date = bounds.start_date + Days::new(day as u64);
            let r: f64 = rng.random();
            let hour: u32 = if r < 0.30 {
                7 + rng.random_range(0..2)
            } else if r < 0.60 {
                17 + rng.random_range(0..2)
            } else {
                6 + rng.random_range(0..16)
            };
            let minute = rng.random_range(0..60);
            let departure = date.and_hms_opt(hour, minute, 0).unwrap();
            let is_workday = date.weekday().num_days_from_monday() < 5;
            let peak = (7..9).contains(&hour) || (17..19).contains(&hour);

            let origin_zone = if rng.random::<f64>() < config.home_bias {
                home_zone
            } else {
                rng.random_range(0..n_zones)
            };
            // The zero-bias branch must consume exactly one draw so that
            // scenarios without local-trip bias keep their streams.
            let dest_zone = if config.dest_home_bias > 0.0 && rng.random::<f64>() < config.dest_home_bias
            {
                origin_zone
            } else {
                rng.random_range(0..n_zones)
            };
            let origin = (origin_zone / config.grid_cols, origin_zone % config.grid_cols);
            let dest = (dest_zone / config.grid_cols, dest_zone % config.grid_cols);
            let archetype = zone_archetypes[origin_zone as usize];

            let distance = (dist_lognorm.sample(&mut rng) * dist_mult).clamp(0.3, 60.0);

            let mut utilities = [0.0; 4];
            let access = &config.archetype_access[archetype.index()];
            for m in 0..4 {
                utilities[m] = u.base[m]
                    + access[m]
                    + u.distance_coef[m] * distance
                    + if peak { u.peak_bonus[m] } else { 0.0 }
                    + if is_workday { u.workday_bonus[m] } else { 0.0 };
            }
            utilities[0] += u.income_car * income_c;
            utilities[3] += u.age_bike * (3.0 - age_band.ordinal() as f64) / 3.0;
            for m in 1..4 {
                utilities[m] += lc_drift;
            }

            let p_base = choice_probs(&config.choice, utilities);
            let e = effect * config.archetype_effect_mult[archetype.index()];
            let p_shift = shift_low_carbon(p_base, e);

            let draw: f64 = rng.random();
            let cf_mode = TravelMode::from_ordinal(inv_cdf(&p_base, draw)).unwrap();
            let mode = TravelMode::from_ordinal(inv_cdf(&p_shift, draw)).unwrap();

            let duration =
                (distance / u.speeds_kmh[mode.ordinal()] * 60.0 * dur_noise.sample(&mut rng).exp())
                    .max(1.0);

            if mode.is_low_carbon() {
                lc_real += 1;
            }
            if cf_mode.is_low_carbon() {
                lc_cf += 1;
            }

            month_trips.push((
                TripRecord {
                    user_id: ScenarioConfig::user_id(idx),
                    departure,
                    origin_cell: origin,
                    dest_cell: dest,
                    distance_km: (distance * 1000.0).round() / 1000.0,
                    duration_min: (duration * 10.0).round() / 10.0,
                    mode,
                    is_workday,
                },
                cf_mode,
            ));
        }

        months[t as usize] = Some(MonthTruth {
            pst_real: lc_real as f64 / n_trips as f64,
            pst_cf: lc_cf as f64 / n_trips as f64,
            n_trips,
        });
        month_trips.sort_by_key(|(t, _)| t.departure);
        for (trip, cf) in month_trips {
            trips.push(trip);
            cf_modes.push(cf);
        }
    }

    IndividualOutput {
        individual: Individual {
            user_id: ScenarioConfig::user_id(idx),
            gender,
            age_band,
            income_level,
            enrollment_month,
        },
        propensity,
        months,
        trips,
        cf_modes,
    }
}
