//! Canonical domain types and trip-record ingestion.
//!
//! A trip is one observed journey: who travelled, when, between which grid
//! cells, how far, how long, and by which mode. Ingestion validates rows
//! against the study bounds and reports rejected rows by reason instead of
//! failing the whole file.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, Months, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four observed travel modes.
///
/// Ordinals are fixed (car=0, bus=1, subway=2, bike=3); classifier vote
/// tie-breaks and ledger row ordering rely on them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TravelMode {
    GasolineCar,
    Bus,
    Subway,
    Bike,
}

pub const ALL_MODES: [TravelMode; 4] = [
    TravelMode::GasolineCar,
    TravelMode::Bus,
    TravelMode::Subway,
    TravelMode::Bike,
];

impl TravelMode {
    /// Bus, subway, and bike count as low-carbon; gasoline car does not.
    pub fn is_low_carbon(self) -> bool {
        !matches!(self, TravelMode::GasolineCar)
    }

    pub fn ordinal(self) -> usize {
        match self {
            TravelMode::GasolineCar => 0,
            TravelMode::Bus => 1,
            TravelMode::Subway => 2,
            TravelMode::Bike => 3,
        }
    }

    pub fn from_ordinal(i: usize) -> Option<Self> {
        ALL_MODES.get(i).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            TravelMode::GasolineCar => "car",
            TravelMode::Bus => "bus",
            TravelMode::Subway => "subway",
            TravelMode::Bike => "bike",
        }
    }
}

impl FromStr for TravelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "car" => Ok(TravelMode::GasolineCar),
            "bus" => Ok(TravelMode::Bus),
            "subway" => Ok(TravelMode::Subway),
            "bike" => Ok(TravelMode::Bike),
            other => Err(Error::Validation(format!("unknown mode token: {other:?}"))),
        }
    }
}

impl fmt::Display for TravelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn token(self) -> &'static str {
        match self {
            Gender::Female => "F",
            Gender::Male => "M",
        }
    }
}

impl FromStr for Gender {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" => Ok(Gender::Female),
            "M" => Ok(Gender::Male),
            other => Err(Error::Validation(format!("unknown gender token: {other:?}"))),
        }
    }
}

/// Age is banded; every analysis is band-level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeBand {
    Le18,
    A19To24,
    A25To34,
    A35To39,
    A40To44,
    A45To49,
    Ge50,
}

pub const ALL_AGE_BANDS: [AgeBand; 7] = [
    AgeBand::Le18,
    AgeBand::A19To24,
    AgeBand::A25To34,
    AgeBand::A35To39,
    AgeBand::A40To44,
    AgeBand::A45To49,
    AgeBand::Ge50,
];

impl AgeBand {
    pub fn ordinal(self) -> usize {
        ALL_AGE_BANDS.iter().position(|&b| b == self).unwrap()
    }

    pub fn token(self) -> &'static str {
        match self {
            AgeBand::Le18 => "le18",
            AgeBand::A19To24 => "19-24",
            AgeBand::A25To34 => "25-34",
            AgeBand::A35To39 => "35-39",
            AgeBand::A40To44 => "40-44",
            AgeBand::A45To49 => "45-49",
            AgeBand::Ge50 => "ge50",
        }
    }
}

impl FromStr for AgeBand {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_AGE_BANDS
            .iter()
            .copied()
            .find(|b| b.token() == s)
            .ok_or_else(|| Error::Validation(format!("unknown age band token: {s:?}")))
    }
}

/// One observed trip. Cells are integer (row, col) indices over the study
/// grid; coordinates were snapped to cell centroids upstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub user_id: String,
    /// Minute-resolution local time.
    pub departure: NaiveDateTime,
    pub origin_cell: (u32, u32),
    pub dest_cell: (u32, u32),
    pub distance_km: f64,
    pub duration_min: f64,
    pub mode: TravelMode,
    pub is_workday: bool,
}

/// One person in the study population. `enrollment_month` is the month
/// index at which they joined the program; `None` marks a never-treated
/// control.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Individual {
    pub user_id: String,
    pub gender: Gender,
    pub age_band: AgeBand,
    /// 1 (low), 2 (middle), or 3 (high).
    pub income_level: u8,
    pub enrollment_month: Option<u32>,
}

impl Individual {
    pub fn is_treated(&self) -> bool {
        self.enrollment_month.is_some()
    }
}

/// Study window (month range starting at a calendar date) plus the grid
/// bounding box. Cells are 500 m squares indexed by (row, col).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyBounds {
    pub start_date: NaiveDate,
    pub n_months: u32,
    pub grid_rows: u32,
    pub grid_cols: u32,
}

impl StudyBounds {
    pub fn new(start_date: NaiveDate, n_months: u32, grid_rows: u32, grid_cols: u32) -> Result<Self> {
        if n_months == 0 || grid_rows == 0 || grid_cols == 0 {
            return Err(Error::Config(
                "study bounds need n_months >= 1 and a non-empty grid".into(),
            ));
        }
        if start_date.day() != 1 {
            return Err(Error::Config("study window must start on the first of a month".into()));
        }
        Ok(StudyBounds { start_date, n_months, grid_rows, grid_cols })
    }

    /// First day after the window.
    pub fn end_date(&self) -> NaiveDate {
        self.start_date + Months::new(self.n_months)
    }

    /// Month index (0-based from the window start), or `None` outside it.
    pub fn month_of(&self, t: NaiveDateTime) -> Option<u32> {
        let d = t.date();
        if d < self.start_date || d >= self.end_date() {
            return None;
        }
        let m = (d.year() - self.start_date.year()) * 12
            + (d.month() as i32 - self.start_date.month() as i32);
        Some(m as u32)
    }

    /// Day index (0-based from the window start), or `None` outside it.
    pub fn day_of(&self, t: NaiveDateTime) -> Option<u32> {
        let d = t.date();
        if d < self.start_date || d >= self.end_date() {
            return None;
        }
        Some((d - self.start_date).num_days() as u32)
    }

    pub fn n_days(&self) -> u32 {
        (self.end_date() - self.start_date).num_days() as u32
    }

    /// First day index of month `m` and the number of days in it.
    pub fn month_days(&self, m: u32) -> (u32, u32) {
        let first = self.start_date + Months::new(m);
        let next = self.start_date + Months::new(m + 1);
        (
            (first - self.start_date).num_days() as u32,
            (next - first).num_days() as u32,
        )
    }

    pub fn cell_in_bounds(&self, cell: (u32, u32)) -> bool {
        cell.0 < self.grid_rows && cell.1 < self.grid_cols
    }

    pub fn n_zones(&self) -> u32 {
        self.grid_rows * self.grid_cols
    }

    /// Flat zone id of a cell (row-major).
    pub fn zone_id(&self, cell: (u32, u32)) -> u32 {
        cell.0 * self.grid_cols + cell.1
    }
}

/// Why a trip row was dropped at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// A field is absent or unparseable.
    MissingField,
    /// Departure outside the window, or a cell outside the grid.
    OutOfBounds,
    NonPositiveDistance,
    NonPositiveDuration,
}

/// Counts of dropped rows by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub missing_field: u64,
    pub out_of_bounds: u64,
    pub non_positive_distance: u64,
    pub non_positive_duration: u64,
}

impl RejectionReport {
    pub fn total(&self) -> u64 {
        self.missing_field + self.out_of_bounds + self.non_positive_distance + self.non_positive_duration
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    fn count(&mut self, reason: RejectReason) {
        match reason {
            RejectReason::MissingField => self.missing_field += 1,
            RejectReason::OutOfBounds => self.out_of_bounds += 1,
            RejectReason::NonPositiveDistance => self.non_positive_distance += 1,
            RejectReason::NonPositiveDuration => self.non_positive_duration += 1,
        }
    }
}

pub const TRIPS_HEADER: [&str; 10] = [
    "user_id",
    "departure_iso8601",
    "origin_row",
    "origin_col",
    "dest_row",
    "dest_col",
    "distance_km",
    "duration_min",
    "mode",
    "is_workday",
];

pub const USERS_HEADER: [&str; 5] =
    ["user_id", "gender", "age_band", "income_level", "enrollment_month"];

const DEPARTURE_FORMAT: &str = "%Y-%m-%dT%H:%M";

fn parse_departure(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, DEPARTURE_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .ok()
}

fn parse_trip_row(rec: &csv::StringRecord, bounds: &StudyBounds) -> std::result::Result<TripRecord, RejectReason> {
    if rec.len() != TRIPS_HEADER.len() {
        return Err(RejectReason::MissingField);
    }
    let field = |i: usize| -> std::result::Result<&str, RejectReason> {
        let s = rec.get(i).ok_or(RejectReason::MissingField)?.trim();
        if s.is_empty() {
            Err(RejectReason::MissingField)
        } else {
            Ok(s)
        }
    };
    let user_id = field(0)?.to_string();
    let departure = parse_departure(field(1)?).ok_or(RejectReason::MissingField)?;
    let origin_row: u32 = field(2)?.parse().map_err(|_| RejectReason::MissingField)?;
    let origin_col: u32 = field(3)?.parse().map_err(|_| RejectReason::MissingField)?;
    let dest_row: u32 = field(4)?.parse().map_err(|_| RejectReason::MissingField)?;
    let dest_col: u32 = field(5)?.parse().map_err(|_| RejectReason::MissingField)?;
    let distance_km: f64 = field(6)?.parse().map_err(|_| RejectReason::MissingField)?;
    let duration_min: f64 = field(7)?.parse().map_err(|_| RejectReason::MissingField)?;
    let mode: TravelMode = field(8)?.parse().map_err(|_| RejectReason::MissingField)?;
    let is_workday = match field(9)? {
        "true" | "1" => true,
        "false" | "0" => false,
        _ => return Err(RejectReason::MissingField),
    };

    if !(distance_km > 0.0) || !distance_km.is_finite() {
        return Err(RejectReason::NonPositiveDistance);
    }
    if !(duration_min > 0.0) || !duration_min.is_finite() {
        return Err(RejectReason::NonPositiveDuration);
    }
    if bounds.month_of(departure).is_none() {
        return Err(RejectReason::OutOfBounds);
    }
    if !bounds.cell_in_bounds((origin_row, origin_col)) || !bounds.cell_in_bounds((dest_row, dest_col)) {
        return Err(RejectReason::OutOfBounds);
    }

    Ok(TripRecord {
        user_id,
        departure,
        origin_cell: (origin_row, origin_col),
        dest_cell: (dest_row, dest_col),
        distance_km,
        duration_min,
        mode,
        is_workday,
    })
}

fn check_header(actual: &csv::StringRecord, expected: &[&str], what: &str) -> Result<()> {
    let got: Vec<&str> = actual.iter().map(|s| s.trim()).collect();
    if got != expected {
        return Err(Error::Validation(format!(
            "malformed {what} header: expected {expected:?}, got {got:?}"
        )));
    }
    Ok(())
}

/// Read `trips.csv`, keeping only rows that satisfy the study bounds and the
/// positivity invariants. Malformed rows are counted and skipped; an
/// unreadable file or malformed header is a hard error.
pub fn ingest_trips(path: &Path, bounds: &StudyBounds) -> Result<(Vec<TripRecord>, RejectionReport)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    check_header(reader.headers()?, &TRIPS_HEADER, "trips.csv")?;

    let mut trips = Vec::new();
    let mut report = RejectionReport::default();
    for rec in reader.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(_) => {
                report.count(RejectReason::MissingField);
                continue;
            }
        };
        match parse_trip_row(&rec, bounds) {
            Ok(t) => trips.push(t),
            Err(reason) => report.count(reason),
        }
    }
    Ok((trips, report))
}

/// Write trips in the canonical column order.
pub fn write_trips_csv(path: &Path, trips: &[TripRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRIPS_HEADER)?;
    for t in trips {
        w.write_record(&[
            t.user_id.as_str(),
            &t.departure.format(DEPARTURE_FORMAT).to_string(),
            &t.origin_cell.0.to_string(),
            &t.origin_cell.1.to_string(),
            &t.dest_cell.0.to_string(),
            &t.dest_cell.1.to_string(),
            &t.distance_km.to_string(),
            &t.duration_min.to_string(),
            t.mode.token(),
            if t.is_workday { "true" } else { "false" },
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read `users.csv`. Violations of the individual invariants are hard
/// errors: the demographics table is small and authoritative.
pub fn read_users_csv(path: &Path, bounds: &StudyBounds) -> Result<Vec<Individual>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    check_header(reader.headers()?, &USERS_HEADER, "users.csv")?;

    let mut users = Vec::new();
    let mut seen = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 2; // 1-based, after header
        let field = |j: usize| -> Result<&str> {
            rec.get(j)
                .map(str::trim)
                .ok_or_else(|| Error::Validation(format!("users.csv row {row}: missing column {j}")))
        };
        let user_id = field(0)?.to_string();
        if user_id.is_empty() {
            return Err(Error::Validation(format!("users.csv row {row}: empty user_id")));
        }
        if let Some(prev) = seen.insert(user_id.clone(), row) {
            return Err(Error::Validation(format!(
                "users.csv row {row}: duplicate user_id {user_id:?} (first at row {prev})"
            )));
        }
        let gender: Gender = field(1)?.parse()?;
        let age_band: AgeBand = field(2)?.parse()?;
        let income_level: u8 = field(3)?
            .parse()
            .map_err(|_| Error::Validation(format!("users.csv row {row}: bad income_level")))?;
        if !(1..=3).contains(&income_level) {
            return Err(Error::Validation(format!(
                "users.csv row {row}: income_level must be 1, 2, or 3"
            )));
        }
        let em = field(4)?;
        let enrollment_month = if em.is_empty() {
            None
        } else {
            let m: u32 = em
                .parse()
                .map_err(|_| Error::Validation(format!("users.csv row {row}: bad enrollment_month")))?;
            if m >= bounds.n_months {
                return Err(Error::Validation(format!(
                    "users.csv row {row}: enrollment_month {m} outside the {}-month window",
                    bounds.n_months
                )));
            }
            Some(m)
        };
        users.push(Individual { user_id, gender, age_band, income_level, enrollment_month });
    }
    Ok(users)
}

pub fn write_users_csv(path: &Path, users: &[Individual]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(USERS_HEADER)?;
    for u in users {
        w.write_record(&[
            u.user_id.as_str(),
            u.gender.token(),
            u.age_band.token(),
            &u.income_level.to_string(),
            &u.enrollment_month.map(|m| m.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
