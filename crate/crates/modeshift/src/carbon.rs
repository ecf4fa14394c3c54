//! Mode-shift and carbon-reduction accounting.
//!
//! Given each trip's counterfactual preferred mode and the mode actually
//! taken, the ledger tallies, per day: the preferred-to-actual count matrix,
//! mode-shift ratios, the reduction in car travel, and the CO₂ avoided by
//! trips that shifted from car to a low-carbon mode. Emission factors are
//! configuration (kg CO₂ per passenger-km), not measured values.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trips::{Individual, StudyBounds, TravelMode, TripRecord, ALL_MODES};

/// Emission factors in kg CO₂ per passenger-kilometre. The defaults are
/// commonly used transport-accounting approximations, adjustable per
/// deployment; the car factor is divided by the configured occupancy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmissionFactorTable {
    pub car: f64,
    pub bus: f64,
    pub subway: f64,
    pub bike: f64,
    pub car_occupancy: f64,
}

impl Default for EmissionFactorTable {
    fn default() -> Self {
        EmissionFactorTable { car: 0.192, bus: 0.056, subway: 0.035, bike: 0.0, car_occupancy: 1.0 }
    }
}

impl EmissionFactorTable {
    pub fn validate(&self) -> Result<()> {
        if self.car < 0.0 || self.bus < 0.0 || self.subway < 0.0 {
            return Err(Error::Config("emission factors must be non-negative".into()));
        }
        if self.bike != 0.0 {
            return Err(Error::Config("the bike emission factor is zero by definition".into()));
        }
        if !(self.car_occupancy > 0.0) {
            return Err(Error::Config("car occupancy must be positive".into()));
        }
        Ok(())
    }

    pub fn factor(&self, mode: TravelMode) -> f64 {
        match mode {
            TravelMode::GasolineCar => self.car / self.car_occupancy,
            TravelMode::Bus => self.bus,
            TravelMode::Subway => self.subway,
            TravelMode::Bike => self.bike,
        }
    }
}

/// Per-trip record of a preferred→actual shift. `co2_kg` is nonzero only
/// for car→low-carbon shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub trip_index: usize,
    pub day: u32,
    pub preferred: TravelMode,
    pub actual: TravelMode,
    pub distance_km: f64,
    pub co2_kg: f64,
}

/// One day of the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayLedger {
    pub day: u32,
    /// Counts indexed \[preferred]\[actual].
    pub pa: [[u64; 4]; 4],
    /// Row totals: trips whose preferred mode is i.
    pub p: [u64; 4],
    /// Preferred car and actually car.
    pub pac: u64,
    /// Preferred car (total).
    pub pc: u64,
    /// Mode-shift ratios pa/p; `None` where the preferred row is empty.
    pub ms: [[Option<f64>; 4]; 4],
    /// Reduction in car travel ratio, 1 - pac/pc; `None` when pc = 0.
    pub rct: Option<f64>,
    /// Carbon avoided that day (kg CO₂).
    pub cer_kg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeShiftLedger {
    pub factors: EmissionFactorTable,
    /// Sorted by day; only days with at least one trip appear.
    pub days: Vec<DayLedger>,
    /// Every trip whose actual mode differs from the preferred one.
    pub shifts: Vec<ShiftRecord>,
}

impl ModeShiftLedger {
    pub fn total_cer_kg(&self) -> f64 {
        self.days.iter().map(|d| d.cer_kg).sum()
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn mean_daily_cer_kg(&self) -> f64 {
        if self.days.is_empty() {
            0.0
        } else {
            self.total_cer_kg() / self.days.len() as f64
        }
    }

    /// Summed preferred/actual counts per mode over all days.
    pub fn mode_totals(&self) -> ([u64; 4], [u64; 4]) {
        let mut preferred = [0u64; 4];
        let mut actual = [0u64; 4];
        for d in &self.days {
            for i in 0..4 {
                preferred[i] += d.p[i];
                for j in 0..4 {
                    actual[j] += d.pa[i][j];
                }
            }
        }
        (preferred, actual)
    }
}

/// Build the ledger from aligned preferred/actual trips.
pub fn build_ledger(
    trips: &[TripRecord],
    preferred: &[TravelMode],
    bounds: &StudyBounds,
    factors: &EmissionFactorTable,
) -> Result<ModeShiftLedger> {
    factors.validate()?;
    if trips.len() != preferred.len() {
        return Err(Error::Validation(format!(
            "preferred modes ({}) must align one-to-one with trips ({})",
            preferred.len(),
            trips.len()
        )));
    }

    let mut days: BTreeMap<u32, DayLedger> = BTreeMap::new();
    let mut shifts = Vec::new();
    for (i, (trip, &pref)) in trips.iter().zip(preferred).enumerate() {
        if !trip.distance_km.is_finite() || trip.distance_km <= 0.0 {
            return Err(Error::Validation(format!("trip {i} has no usable distance")));
        }
        let day = bounds.day_of(trip.departure).ok_or_else(|| {
            Error::Validation(format!("trip {i} departs outside the study window"))
        })?;
        let entry = days.entry(day).or_insert_with(|| DayLedger {
            day,
            pa: [[0; 4]; 4],
            p: [0; 4],
            pac: 0,
            pc: 0,
            ms: [[None; 4]; 4],
            rct: None,
            cer_kg: 0.0,
        });
        let pi = pref.ordinal();
        let ai = trip.mode.ordinal();
        entry.pa[pi][ai] += 1;
        entry.p[pi] += 1;
        if pref == TravelMode::GasolineCar {
            entry.pc += 1;
            if trip.mode == TravelMode::GasolineCar {
                entry.pac += 1;
            }
        }
        let er = if pref == TravelMode::GasolineCar && trip.mode.is_low_carbon() {
            trip.distance_km * (factors.factor(TravelMode::GasolineCar) - factors.factor(trip.mode))
        } else {
            0.0
        };
        entry.cer_kg += er;
        if pref != trip.mode {
            shifts.push(ShiftRecord {
                trip_index: i,
                day,
                preferred: pref,
                actual: trip.mode,
                distance_km: trip.distance_km,
                co2_kg: er,
            });
        }
    }

    let days = days
        .into_values()
        .map(|mut d| {
            for i in 0..4 {
                if d.p[i] > 0 {
                    for j in 0..4 {
                        d.ms[i][j] = Some(d.pa[i][j] as f64 / d.p[i] as f64);
                    }
                }
            }
            if d.pc > 0 {
                d.rct = Some(1.0 - d.pac as f64 / d.pc as f64);
            }
            d
        })
        .collect();

    Ok(ModeShiftLedger { factors: *factors, days, shifts })
}

/// One row of the per-segment carbon summary. `None` means the segment has
/// no shifted trips.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRow {
    pub dimension: String,
    pub class: String,
    pub n_shifted: u64,
    /// Mean CO₂ avoided per car→low-carbon shifted trip (kg).
    pub mean_er_kg: Option<f64>,
    /// Mean change in the monthly low-carbon ratio from one shifted trip
    /// (1 / trips-in-that-month, averaged over shifted trips).
    pub mean_ratio_delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub rows: Vec<SegmentRow>,
}

impl SegmentSummary {
    pub fn row(&self, dimension: &str, class: &str) -> Option<&SegmentRow> {
        self.rows.iter().find(|r| r.dimension == dimension && r.class == class)
    }
}

fn frequency_class(avg_monthly_trips: f64) -> &'static str {
    if avg_monthly_trips < 3.0 {
        "1-3"
    } else if avg_monthly_trips < 10.0 {
        "3-10"
    } else {
        "10+"
    }
}

fn duration_class(avg_duration: f64) -> &'static str {
    if avg_duration < 15.0 {
        "<15"
    } else if avg_duration < 30.0 {
        "15-30"
    } else if avg_duration < 45.0 {
        "30-45"
    } else if avg_duration < 60.0 {
        "45-60"
    } else {
        "60+"
    }
}

/// Group car→low-carbon shifted trips by traveller segment and average the
/// per-trip carbon saving and the per-trip low-carbon-ratio change.
pub fn segment_carbon_summary(
    ledger: &ModeShiftLedger,
    trips: &[TripRecord],
    individuals: &[Individual],
    bounds: &StudyBounds,
) -> Result<SegmentSummary> {
    if ledger.days.is_empty() {
        return Err(Error::Validation("segment summary needs a non-empty ledger".into()));
    }
    let roster: HashMap<&str, &Individual> =
        individuals.iter().map(|u| (u.user_id.as_str(), u)).collect();

    // Per (user, month) trip counts and per-user monthly averages/durations.
    let mut month_counts: HashMap<(&str, u32), u32> = HashMap::new();
    let mut per_user: HashMap<&str, (f64, u64)> = HashMap::new(); // (duration sum, n)
    for t in trips {
        let m = bounds.month_of(t.departure).ok_or_else(|| {
            Error::Validation(format!("trip for {} departs outside the window", t.user_id))
        })?;
        *month_counts.entry((t.user_id.as_str(), m)).or_default() += 1;
        let e = per_user.entry(t.user_id.as_str()).or_default();
        e.0 += t.duration_min;
        e.1 += 1;
    }
    let mut months_active: HashMap<&str, u32> = HashMap::new();
    for &(user, _) in month_counts.keys() {
        *months_active.entry(user).or_default() += 1;
    }

    // Accumulators keyed by (dimension, class).
    let mut acc: BTreeMap<(String, String), (u64, f64, f64)> = BTreeMap::new();
    let dims: Vec<(&str, Vec<String>)> = vec![
        ("gender", vec!["F".into(), "M".into()]),
        ("age_band", crate::trips::ALL_AGE_BANDS.iter().map(|b| b.token().to_string()).collect()),
        ("income_level", vec!["1".into(), "2".into(), "3".into()]),
        ("frequency", vec!["1-3".into(), "3-10".into(), "10+".into()]),
        ("duration", vec!["<15".into(), "15-30".into(), "30-45".into(), "45-60".into(), "60+".into()]),
    ];
    for (dim, classes) in &dims {
        for class in classes {
            acc.insert((dim.to_string(), class.clone()), (0, 0.0, 0.0));
        }
    }

    for s in &ledger.shifts {
        if !(s.preferred == TravelMode::GasolineCar && s.actual.is_low_carbon()) {
            continue;
        }
        let trip = &trips[s.trip_index];
        let user = roster.get(trip.user_id.as_str()).ok_or_else(|| {
            Error::Validation(format!("shift references unknown user {:?}", trip.user_id))
        })?;
        let month = bounds.month_of(trip.departure).unwrap();
        let n_month = month_counts[&(trip.user_id.as_str(), month)];
        let ratio_delta = 1.0 / n_month as f64;
        let (dur_sum, n_user) = per_user[trip.user_id.as_str()];
        let avg_dur = dur_sum / n_user as f64;
        let avg_monthly = n_user as f64 / months_active[trip.user_id.as_str()] as f64;

        let labels = [
            ("gender", user.gender.token().to_string()),
            ("age_band", user.age_band.token().to_string()),
            ("income_level", user.income_level.to_string()),
            ("frequency", frequency_class(avg_monthly).to_string()),
            ("duration", duration_class(avg_dur).to_string()),
        ];
        for (dim, class) in labels {
            let e = acc.get_mut(&(dim.to_string(), class)).expect("segment bucket");
            e.0 += 1;
            e.1 += s.co2_kg;
            e.2 += ratio_delta;
        }
    }

    let rows = acc
        .into_iter()
        .map(|((dimension, class), (n, er, rd))| SegmentRow {
            dimension,
            class,
            n_shifted: n,
            mean_er_kg: if n > 0 { Some(er / n as f64) } else { None },
            mean_ratio_delta: if n > 0 { Some(rd / n as f64) } else { None },
        })
        .collect();
    Ok(SegmentSummary { rows })
}

/// Citywide scaling of participant-level results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CitywideExtrapolation {
    pub days_covered: usize,
    pub mean_daily_cer_kg: f64,
    pub annual_co2_kg: f64,
    pub annual_co2_tons: f64,
    /// Relative change in participant trips per mode: (actual - preferred) / preferred.
    pub participant_mode_delta: [Option<f64>; 4],
    /// Participant deltas scaled by the participant trip share.
    pub citywide_mode_delta: [Option<f64>; 4],
    pub participant_trip_share: f64,
}

/// Annualize the ledger's daily carbon reduction and scale the mode deltas
/// by the participants' share of citywide trips.
pub fn citywide_extrapolation(
    ledger: &ModeShiftLedger,
    participant_trip_share: f64,
    days_per_year: f64,
) -> Result<CitywideExtrapolation> {
    if !(participant_trip_share > 0.0 && participant_trip_share <= 1.0) {
        return Err(Error::Config("participant_trip_share must lie in (0, 1]".into()));
    }
    if ledger.n_days() < 30 {
        return Err(Error::Validation(format!(
            "citywide extrapolation needs >= 30 ledger days, got {}",
            ledger.n_days()
        )));
    }
    let mean_daily = ledger.mean_daily_cer_kg();
    let annual_kg = mean_daily * days_per_year;
    let (preferred, actual) = ledger.mode_totals();
    let mut participant = [None; 4];
    let mut citywide = [None; 4];
    for m in ALL_MODES {
        let i = m.ordinal();
        if preferred[i] > 0 {
            let delta = actual[i] as f64 / preferred[i] as f64 - 1.0;
            participant[i] = Some(delta);
            citywide[i] = Some(delta * participant_trip_share);
        }
    }
    Ok(CitywideExtrapolation {
        days_covered: ledger.n_days(),
        mean_daily_cer_kg: mean_daily,
        annual_co2_kg: annual_kg,
        annual_co2_tons: annual_kg / 1000.0,
        participant_mode_delta: participant,
        citywide_mode_delta: citywide,
        participant_trip_share,
    })
}

pub const LEDGER_HEADER: [&str; 5] = ["day", "preferred", "actual", "count", "co2_kg"];

/// Aggregated (day, preferred, actual) rows with summed CO₂.
pub fn write_ledger_csv(path: &Path, ledger: &ModeShiftLedger) -> Result<()> {
    // CO₂ per (day, preferred, actual) cell comes from the shift records.
    let mut co2: BTreeMap<(u32, usize, usize), f64> = BTreeMap::new();
    for s in &ledger.shifts {
        *co2.entry((s.day, s.preferred.ordinal(), s.actual.ordinal())).or_default() += s.co2_kg;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LEDGER_HEADER)?;
    for d in &ledger.days {
        for i in 0..4 {
            for j in 0..4 {
                if d.pa[i][j] == 0 {
                    continue;
                }
                let kg = co2.get(&(d.day, i, j)).copied().unwrap_or(0.0);
                w.write_record(&[
                    d.day.to_string(),
                    ALL_MODES[i].token().to_string(),
                    ALL_MODES[j].token().to_string(),
                    d.pa[i][j].to_string(),
                    kg.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
