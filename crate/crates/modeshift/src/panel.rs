//! Monthly individual panel built from raw trips.
//!
//! One cell per (individual, month) with at least one trip. The cell carries
//! the low-carbon travel ratio (share of trips by bus, subway, or bike), the
//! trip count, averaged trip duration/distance, and the absorbing treatment
//! indicator.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trips::{Individual, StudyBounds, TripRecord};

/// One (individual, month) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelCell {
    pub user_id: String,
    /// Month index within the study window.
    pub month: u32,
    /// Low-carbon travel ratio; defined because `n_trips > 0`.
    pub pst: f64,
    pub n_trips: u32,
    pub n_low_carbon: u32,
    /// 1 from the enrollment month onward, 0 before and for controls.
    pub dp: u8,
    pub avg_duration: f64,
    pub avg_distance: f64,
}

/// Month relative to enrollment, clamped to [-4, 8] with endpoint binning.
/// k = -1 is the omitted reference category in event studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventTime(pub i32);

pub const EVENT_TIME_MIN: i32 = -4;
pub const EVENT_TIME_MAX: i32 = 8;
pub const EVENT_TIME_REFERENCE: i32 = -1;

impl EventTime {
    /// Relative month `t - enrollment`, binned into the endpoints.
    pub fn from_relative(k: i64) -> Self {
        EventTime(k.clamp(EVENT_TIME_MIN as i64, EVENT_TIME_MAX as i64) as i32)
    }
}

/// Share of low-carbon trips; `None` when there are no trips, in which case
/// the month produces no panel cell.
pub fn compute_pst(trips: &[&TripRecord]) -> Option<f64> {
    if trips.is_empty() {
        return None;
    }
    let low = trips.iter().filter(|t| t.mode.is_low_carbon()).count();
    Some(low as f64 / trips.len() as f64)
}

/// Build the monthly panel. Every trip's `user_id` must appear in
/// `individuals`; months with zero trips produce no cell.
pub fn build_panel(
    trips: &[TripRecord],
    individuals: &[Individual],
    bounds: &StudyBounds,
) -> Result<Vec<PanelCell>> {
    let index: HashMap<&str, &Individual> =
        individuals.iter().map(|u| (u.user_id.as_str(), u)).collect();

    #[derive(Default)]
    struct Agg {
        n: u32,
        low: u32,
        dur: f64,
        dist: f64,
    }

    let mut cells: HashMap<(&str, u32), Agg> = HashMap::new();
    for t in trips {
        let user = index
            .get(t.user_id.as_str())
            .ok_or_else(|| Error::Validation(format!("trip references unknown user_id {:?}", t.user_id)))?;
        let month = t.departure_month(bounds)?;
        let agg = cells.entry((user.user_id.as_str(), month)).or_default();
        agg.n += 1;
        if t.mode.is_low_carbon() {
            agg.low += 1;
        }
        agg.dur += t.duration_min;
        agg.dist += t.distance_km;
    }

    let mut panel: Vec<PanelCell> = cells
        .into_iter()
        .map(|((user_id, month), agg)| {
            let enrollment = index[user_id].enrollment_month;
            let dp = match enrollment {
                Some(st) if month >= st => 1,
                _ => 0,
            };
            PanelCell {
                user_id: user_id.to_string(),
                month,
                pst: agg.low as f64 / agg.n as f64,
                n_trips: agg.n,
                n_low_carbon: agg.low,
                dp,
                avg_duration: agg.dur / agg.n as f64,
                avg_distance: agg.dist / agg.n as f64,
            }
        })
        .collect();
    panel.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.month.cmp(&b.month)));
    Ok(panel)
}

impl TripRecord {
    fn departure_month(&self, bounds: &StudyBounds) -> Result<u32> {
        self.departure_month_opt(bounds).ok_or_else(|| {
            Error::Validation(format!(
                "trip departure {} outside the study window",
                self.departure
            ))
        })
    }

    pub fn departure_month_opt(&self, bounds: &StudyBounds) -> Option<u32> {
        bounds.month_of(self.departure)
    }
}

pub const PANEL_HEADER: [&str; 8] =
    ["user_id", "month", "pst", "n_trips", "n_low_carbon", "dp", "avg_duration", "avg_distance"];

pub fn write_panel_csv(path: &Path, panel: &[PanelCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PANEL_HEADER)?;
    for c in panel {
        w.write_record(&[
            c.user_id.as_str(),
            &c.month.to_string(),
            &c.pst.to_string(),
            &c.n_trips.to_string(),
            &c.n_low_carbon.to_string(),
            &c.dp.to_string(),
            &c.avg_duration.to_string(),
            &c.avg_distance.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_panel_csv(path: &Path) -> Result<Vec<PanelCell>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let got: Vec<&str> = reader.headers()?.iter().collect();
    if got != PANEL_HEADER {
        return Err(Error::Validation(format!("malformed panel.csv header: {got:?}")));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        out.push(PanelCell {
            user_id: get(0).to_string(),
            month: get(1).parse().map_err(|_| Error::Validation("bad month in panel.csv".into()))?,
            pst: get(2).parse().map_err(|_| Error::Validation("bad pst in panel.csv".into()))?,
            n_trips: get(3).parse().map_err(|_| Error::Validation("bad n_trips in panel.csv".into()))?,
            n_low_carbon: get(4)
                .parse()
                .map_err(|_| Error::Validation("bad n_low_carbon in panel.csv".into()))?,
            dp: get(5).parse().map_err(|_| Error::Validation("bad dp in panel.csv".into()))?,
            avg_duration: get(6)
                .parse()
                .map_err(|_| Error::Validation("bad avg_duration in panel.csv".into()))?,
            avg_distance: get(7)
                .parse()
                .map_err(|_| Error::Validation("bad avg_distance in panel.csv".into()))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trips::{AgeBand, Gender, TravelMode};
    use chrono::NaiveDate;

    fn bounds() -> StudyBounds {
        StudyBounds::new(NaiveDate::from_ymd_opt(2022, 12, 1).unwrap(), 13, 10, 10).unwrap()
    }

    fn trip(user: &str, month: u32, mode: TravelMode) -> TripRecord {
        let b = bounds();
        let (first_day, _) = b.month_days(month);
        let date = b.start_date + chrono::Days::new(first_day as u64 + 3);
        TripRecord {
            user_id: user.to_string(),
            departure: date.and_hms_opt(8, 0, 0).unwrap(),
            origin_cell: (1, 1),
            dest_cell: (2, 2),
            distance_km: 5.0,
            duration_min: 20.0,
            mode,
            is_workday: true,
        }
    }

    fn person(user: &str, enrollment: Option<u32>) -> Individual {
        Individual {
            user_id: user.to_string(),
            gender: Gender::Female,
            age_band: AgeBand::A25To34,
            income_level: 2,
            enrollment_month: enrollment,
        }
    }

    #[test]
    fn pst_ratios() {
        let all_subway: Vec<TripRecord> = (0..5).map(|_| trip("u", 1, TravelMode::Subway)).collect();
        let refs: Vec<&TripRecord> = all_subway.iter().collect();
        assert_eq!(compute_pst(&refs), Some(1.0));

        let all_car: Vec<TripRecord> = (0..5).map(|_| trip("u", 1, TravelMode::GasolineCar)).collect();
        let refs: Vec<&TripRecord> = all_car.iter().collect();
        assert_eq!(compute_pst(&refs), Some(0.0));

        let mut mixed: Vec<TripRecord> = (0..3).map(|_| trip("u", 1, TravelMode::Bus)).collect();
        mixed.extend((0..2).map(|_| trip("u", 1, TravelMode::GasolineCar)));
        let refs: Vec<&TripRecord> = mixed.iter().collect();
        assert_eq!(compute_pst(&refs), Some(0.6));

        assert_eq!(compute_pst(&[]), None);
    }

    #[test]
    fn months_without_trips_have_no_cell() {
        let trips = vec![trip("u1", 2, TravelMode::Bus), trip("u1", 4, TravelMode::GasolineCar)];
        let users = vec![person("u1", None)];
        let panel = build_panel(&trips, &users, &bounds()).unwrap();
        assert_eq!(panel.len(), 2);
        assert_eq!(panel[0].month, 2);
        assert_eq!(panel[1].month, 4);
    }

    #[test]
    fn dp_follows_enrollment() {
        let trips = vec![
            trip("u1", 2, TravelMode::Bus),
            trip("u1", 3, TravelMode::Bus),
            trip("u1", 4, TravelMode::Bus),
        ];
        let users = vec![person("u1", Some(3))];
        let panel = build_panel(&trips, &users, &bounds()).unwrap();
        let dps: Vec<u8> = panel.iter().map(|c| c.dp).collect();
        assert_eq!(dps, vec![0, 1, 1]);
    }

    #[test]
    fn unknown_user_is_hard_error() {
        let trips = vec![trip("ghost", 2, TravelMode::Bus)];
        let users = vec![person("u1", None)];
        assert!(build_panel(&trips, &users, &bounds()).is_err());
    }

    #[test]
    fn event_time_binning() {
        assert_eq!(EventTime::from_relative(-9).0, -4);
        assert_eq!(EventTime::from_relative(-4).0, -4);
        assert_eq!(EventTime::from_relative(-1).0, -1);
        assert_eq!(EventTime::from_relative(0).0, 0);
        assert_eq!(EventTime::from_relative(8).0, 8);
        assert_eq!(EventTime::from_relative(12).0, 8);
    }
}
