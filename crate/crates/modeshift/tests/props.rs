//! Property tests over the panel builder, the ledger, and fixed-effect
//! absorption.

use std::collections::{BTreeSet, HashMap};

use chrono::NaiveDate;
use proptest::prelude::*;

use modeshift::carbon::{build_ledger, EmissionFactorTable};
use modeshift::did::{design_att, estimate_att, OutcomeColumn};
use modeshift::panel::build_panel;
use modeshift::trips::{
    ingest_trips, write_trips_csv, AgeBand, Gender, Individual, StudyBounds, TravelMode,
    TripRecord, ALL_MODES,
};

fn bounds() -> StudyBounds {
    StudyBounds::new(NaiveDate::from_ymd_opt(2022, 12, 1).unwrap(), 13, 6, 6).unwrap()
}

prop_compose! {
    fn arb_trip()(
        user in 0u32..12,
        day in 0u32..395,
        hour in 5u32..23,
        minute in 0u32..60,
        o_row in 0u32..6, o_col in 0u32..6,
        d_row in 0u32..6, d_col in 0u32..6,
        distance in 0.3f64..40.0,
        duration in 1.0f64..90.0,
        mode in 0usize..4,
    ) -> TripRecord {
        let b = bounds();
        let date = b.start_date + chrono::Days::new(day as u64);
        TripRecord {
            user_id: format!("u{user:02}"),
            departure: date.and_hms_opt(hour, minute, 0).unwrap(),
            origin_cell: (o_row, o_col),
            dest_cell: (d_row, d_col),
            distance_km: (distance * 1000.0).round() / 1000.0,
            duration_min: (duration * 10.0).round() / 10.0,
            mode: ALL_MODES[mode],
            is_workday: date.weekday().num_days_from_monday() < 5,
        }
    }
}

fn users_for(trips: &[TripRecord], enroll_every: u32) -> Vec<Individual> {
    let ids: BTreeSet<&str> = trips.iter().map(|t| t.user_id.as_str()).collect();
    ids.iter()
        .enumerate()
        .map(|(i, id)| Individual {
            user_id: id.to_string(),
            gender: if i % 2 == 0 { Gender::Female } else { Gender::Male },
            age_band: AgeBand::A25To34,
            income_level: (i % 3 + 1) as u8,
            enrollment_month: if enroll_every > 0 && i as u32 % enroll_every == 0 {
                Some(2 + (i as u32 % 9))
            } else {
                None
            },
        })
        .collect()
}

use chrono::Datelike;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn panel_is_a_function_and_conserves_trips(trips in prop::collection::vec(arb_trip(), 1..250)) {
        let users = users_for(&trips, 3);
        let panel = build_panel(&trips, &users, &bounds()).unwrap();

        // One cell per (user, month); counts conserved; ratio consistent.
        let mut keys = BTreeSet::new();
        let mut total = 0u64;
        for c in &panel {
            prop_assert!(keys.insert((c.user_id.clone(), c.month)));
            total += c.n_trips as u64;
            prop_assert!((c.pst * c.n_trips as f64 - c.n_low_carbon as f64).abs() < 0.5);
            prop_assert!((0.0..=1.0).contains(&c.pst));
            prop_assert!(c.n_trips > 0);
        }
        prop_assert_eq!(total, trips.len() as u64);

        // dp is absorbing within each individual (panel is month-sorted).
        let mut last: HashMap<&str, u8> = HashMap::new();
        for c in &panel {
            let prev = last.insert(c.user_id.as_str(), c.dp).unwrap_or(0);
            prop_assert!(c.dp >= prev);
        }
    }

    #[test]
    fn trips_csv_round_trip_is_lossless(trips in prop::collection::vec(arb_trip(), 0..120)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trips.csv");
        write_trips_csv(&path, &trips).unwrap();
        let (back, report) = ingest_trips(&path, &bounds()).unwrap();
        prop_assert!(report.is_empty());
        prop_assert_eq!(back, trips);
    }

    #[test]
    fn mode_shift_rows_are_stochastic(
        trips in prop::collection::vec(arb_trip(), 1..200),
        prefs in prop::collection::vec(0usize..4, 200),
    ) {
        let preferred: Vec<TravelMode> =
            trips.iter().zip(&prefs).map(|(_, &p)| ALL_MODES[p]).collect();
        let ledger = build_ledger(&trips, &preferred, &bounds(), &EmissionFactorTable::default()).unwrap();
        for d in &ledger.days {
            for i in 0..4 {
                if d.p[i] > 0 {
                    let s: f64 = (0..4).map(|j| d.ms[i][j].unwrap()).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                } else {
                    prop_assert!((0..4).all(|j| d.ms[i][j].is_none()));
                }
            }
        }
        let day_total: f64 = ledger.days.iter().map(|d| d.cer_kg).sum();
        let shift_total: f64 = ledger.shifts.iter().map(|s| s.co2_kg).sum();
        prop_assert!((day_total - shift_total).abs() < 1e-9);
    }

    #[test]
    fn fixed_effects_absorb_unit_and_global_shifts(
        trips in prop::collection::vec(arb_trip(), 60..250),
        global in -3.0f64..3.0,
    ) {
        let users = users_for(&trips, 2);
        let panel = build_panel(&trips, &users, &bounds()).unwrap();
        let base = match estimate_att(&design_att(&panel, OutcomeColumn::Pst).unwrap()) {
            Ok(fe) => fe.coef("dp").unwrap().estimate,
            Err(_) => return Ok(()), // degenerate draws without dp variation
        };
        let mut shifted = panel.clone();
        for c in &mut shifted {
            let unit_shift = (c.user_id.as_bytes()[1] as f64) * 0.37;
            c.pst += global + unit_shift;
        }
        let alt = estimate_att(&design_att(&shifted, OutcomeColumn::Pst).unwrap())
            .unwrap()
            .coef("dp")
            .unwrap()
            .estimate;
        prop_assert!((base - alt).abs() < 1e-10);
    }
}
