//! Daily multimodal zone graphs.
//!
//! One directed graph per day: zones are nodes, edges carry the day's trip
//! counts between zone pairs, node features are per-mode volumes and average
//! times/distances, and the 5-dim node targets summarize that day's
//! counterfactual mode shifts attributed to the trip's origin zone.

use serde::{Deserialize, Serialize};

use crate::carbon::EmissionFactorTable;
use crate::error::{Error, Result};
use crate::trips::{StudyBounds, TravelMode, TripRecord};

/// Directed edge with per-mode daily trip counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: u32,
    pub to: u32,
    pub count_by_mode: [u32; 4],
}

impl GraphEdge {
    pub fn total(&self) -> u32 {
        self.count_by_mode.iter().sum()
    }
}

/// Per-zone feature block: for each mode, daily volume, average travel
/// time, and average distance (12 features).
pub const NODE_FEATURES: usize = 12;

/// Node target order: car→bus shifts, car→subway shifts, car→bike shifts,
/// car-travel reduction ratio, carbon reduction (kg).
pub const NODE_TARGETS: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneGraph {
    pub day: u32,
    /// Zone ids in node order (the full grid, every day).
    pub nodes: Vec<u32>,
    /// Edges with a nonzero trip count that day.
    pub edges: Vec<GraphEdge>,
    /// n_zones × 12.
    pub features: Vec<Vec<f64>>,
    /// n_zones × 5.
    pub targets: Vec<[f64; NODE_TARGETS]>,
}

impl ZoneGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Reverse every edge (origin and destination roles swap).
    pub fn transposed(&self) -> ZoneGraph {
        let mut g = self.clone();
        for e in &mut g.edges {
            std::mem::swap(&mut e.from, &mut e.to);
        }
        g
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DailyGraphs {
    pub graphs: Vec<ZoneGraph>,
    /// Days inside the window with zero trips (empty graphs were emitted).
    pub empty_days: Vec<u32>,
}

/// Build one graph per day in `[day_start, day_end)`.
///
/// `preferred` must align one-to-one with `trips`; targets count only
/// car→low-carbon shifts of that day, attached to the trip's origin zone.
pub fn build_daily_graphs(
    trips: &[TripRecord],
    preferred: &[TravelMode],
    factors: &EmissionFactorTable,
    bounds: &StudyBounds,
    day_start: u32,
    day_end: u32,
) -> Result<DailyGraphs> {
    if trips.len() != preferred.len() {
        return Err(Error::Validation("preferred modes must align with trips".into()));
    }
    if day_start >= day_end || day_end > bounds.n_days() {
        return Err(Error::Config(format!(
            "day window [{day_start}, {day_end}) must be non-empty and inside the study window"
        )));
    }
    factors.validate()?;
    let n_zones = bounds.n_zones() as usize;
    let n_days = (day_end - day_start) as usize;

    struct DayAcc {
        edge_counts: std::collections::BTreeMap<(u32, u32), [u32; 4]>,
        volume: Vec<[u32; 4]>,
        time_sum: Vec<[f64; 4]>,
        dist_sum: Vec<[f64; 4]>,
        shifts: Vec<[f64; 3]>,
        pc: Vec<u32>,
        pac: Vec<u32>,
        carbon: Vec<f64>,
        any: bool,
    }
    let mut acc: Vec<DayAcc> = (0..n_days)
        .map(|_| DayAcc {
            edge_counts: Default::default(),
            volume: vec![[0; 4]; n_zones],
            time_sum: vec![[0.0; 4]; n_zones],
            dist_sum: vec![[0.0; 4]; n_zones],
            shifts: vec![[0.0; 3]; n_zones],
            pc: vec![0; n_zones],
            pac: vec![0; n_zones],
            carbon: vec![0.0; n_zones],
            any: false,
        })
        .collect();

    for (t, &pref) in trips.iter().zip(preferred) {
        let Some(day) = bounds.day_of(t.departure) else {
            return Err(Error::Validation(format!(
                "trip for {} departs outside the study window",
                t.user_id
            )));
        };
        if day < day_start || day >= day_end {
            continue;
        }
        let d = &mut acc[(day - day_start) as usize];
        d.any = true;
        let o = bounds.zone_id(t.origin_cell) as usize;
        let dz = bounds.zone_id(t.dest_cell);
        let m = t.mode.ordinal();
        d.edge_counts.entry((o as u32, dz)).or_default()[m] += 1;
        d.volume[o][m] += 1;
        d.time_sum[o][m] += t.duration_min;
        d.dist_sum[o][m] += t.distance_km;

        if pref == TravelMode::GasolineCar {
            d.pc[o] += 1;
            if t.mode == TravelMode::GasolineCar {
                d.pac[o] += 1;
            } else {
                match t.mode {
                    TravelMode::Bus => d.shifts[o][0] += 1.0,
                    TravelMode::Subway => d.shifts[o][1] += 1.0,
                    TravelMode::Bike => d.shifts[o][2] += 1.0,
                    TravelMode::GasolineCar => unreachable!(),
                }
                d.carbon[o] += t.distance_km
                    * (factors.factor(TravelMode::GasolineCar) - factors.factor(t.mode));
            }
        }
    }

    let mut graphs = Vec::with_capacity(n_days);
    let mut empty_days = Vec::new();
    for (i, d) in acc.into_iter().enumerate() {
        let day = day_start + i as u32;
        if !d.any {
            empty_days.push(day);
        }
        let edges = d
            .edge_counts
            .into_iter()
            .map(|((from, to), count_by_mode)| GraphEdge { from, to, count_by_mode })
            .collect();
        let mut features = Vec::with_capacity(n_zones);
        let mut targets = Vec::with_capacity(n_zones);
        for z in 0..n_zones {
            let mut f = vec![0.0; NODE_FEATURES];
            for m in 0..4 {
                let v = d.volume[z][m];
                f[m * 3] = v as f64;
                if v > 0 {
                    f[m * 3 + 1] = d.time_sum[z][m] / v as f64;
                    f[m * 3 + 2] = d.dist_sum[z][m] / v as f64;
                }
            }
            features.push(f);
            let rct = if d.pc[z] > 0 { 1.0 - d.pac[z] as f64 / d.pc[z] as f64 } else { 0.0 };
            targets.push([d.shifts[z][0], d.shifts[z][1], d.shifts[z][2], rct, d.carbon[z]]);
        }
        graphs.push(ZoneGraph { day, nodes: (0..n_zones as u32).collect(), edges, features, targets });
    }

    Ok(DailyGraphs { graphs, empty_days })
}

/// Per-zone aggregate program outcomes over a day range (used by the
/// cluster→category mapping and the infrastructure regression).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ZoneOutcome {
    pub zone_id: u32,
    pub preferred_car: u64,
    pub actual_car_given_pref: u64,
    /// 1 - actual/preferred car trips (0 when no car-preferring trips).
    pub car_reduction: f64,
    pub carbon_kg: f64,
    pub avg_car_time: Option<f64>,
    pub avg_transit_time: Option<f64>,
}

pub fn zone_outcomes(
    trips: &[TripRecord],
    preferred: &[TravelMode],
    factors: &EmissionFactorTable,
    bounds: &StudyBounds,
    day_start: u32,
    day_end: u32,
) -> Result<Vec<ZoneOutcome>> {
    if trips.len() != preferred.len() {
        return Err(Error::Validation("preferred modes must align with trips".into()));
    }
    let n_zones = bounds.n_zones() as usize;
    let mut out: Vec<ZoneOutcome> = (0..n_zones)
        .map(|z| ZoneOutcome { zone_id: z as u32, ..Default::default() })
        .collect();
    let mut car_time: Vec<(f64, u64)> = vec![(0.0, 0); n_zones];
    let mut transit_time: Vec<(f64, u64)> = vec![(0.0, 0); n_zones];

    for (t, &pref) in trips.iter().zip(preferred) {
        let Some(day) = bounds.day_of(t.departure) else { continue };
        if day < day_start || day >= day_end {
            continue;
        }
        let z = bounds.zone_id(t.origin_cell) as usize;
        match t.mode {
            TravelMode::GasolineCar => {
                car_time[z].0 += t.duration_min;
                car_time[z].1 += 1;
            }
            TravelMode::Bus | TravelMode::Subway => {
                transit_time[z].0 += t.duration_min;
                transit_time[z].1 += 1;
            }
            TravelMode::Bike => {}
        }
        if pref == TravelMode::GasolineCar {
            out[z].preferred_car += 1;
            if t.mode == TravelMode::GasolineCar {
                out[z].actual_car_given_pref += 1;
            } else {
                out[z].carbon_kg += t.distance_km
                    * (factors.factor(TravelMode::GasolineCar) - factors.factor(t.mode));
            }
        }
    }
    for z in 0..n_zones {
        if out[z].preferred_car > 0 {
            out[z].car_reduction =
                1.0 - out[z].actual_car_given_pref as f64 / out[z].preferred_car as f64;
        }
        if car_time[z].1 > 0 {
            out[z].avg_car_time = Some(car_time[z].0 / car_time[z].1 as f64);
        }
        if transit_time[z].1 > 0 {
            out[z].avg_transit_time = Some(transit_time[z].0 / transit_time[z].1 as f64);
        }
    }
    Ok(out)
}
