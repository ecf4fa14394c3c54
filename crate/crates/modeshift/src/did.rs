//! Two-way fixed-effects panel estimators.
//!
//! Individual and month fixed effects are absorbed by alternating
//! projections (unit demeaning, then time demeaning, iterated to
//! convergence), after which the coefficients of interest are estimated by
//! OLS on the transformed columns. Standard errors are cluster-robust at
//! the individual level.
//!
//! # References
//!
//! - Wooldridge, *Econometric Analysis of Cross Section and Panel Data*, Ch. 10.
//! - Arellano (1987), "Computing robust standard errors for within-groups
//!   estimators." *Oxford Bulletin of Economics and Statistics*.
//! - Guimarães & Portugal (2010) on iterative demeaning for
//!   high-dimensional fixed effects.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_inverse, chol_solve, cholesky_with_failure};
use crate::panel::{PanelCell, EVENT_TIME_MAX, EVENT_TIME_MIN, EVENT_TIME_REFERENCE};

/// Which panel column is the regression outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeColumn {
    /// Low-carbon travel ratio (the headline outcome).
    Pst,
    /// Monthly trip count (alternate outcome).
    NTrips,
    /// Monthly count of low-carbon trips (alternate outcome).
    NLowCarbon,
    AvgDuration,
    AvgDistance,
}

impl OutcomeColumn {
    pub fn value(self, c: &PanelCell) -> f64 {
        match self {
            OutcomeColumn::Pst => c.pst,
            OutcomeColumn::NTrips => c.n_trips as f64,
            OutcomeColumn::NLowCarbon => c.n_low_carbon as f64,
            OutcomeColumn::AvgDuration => c.avg_duration,
            OutcomeColumn::AvgDistance => c.avg_distance,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OutcomeColumn::Pst => "pst",
            OutcomeColumn::NTrips => "n_trips",
            OutcomeColumn::NLowCarbon => "n_low_carbon",
            OutcomeColumn::AvgDuration => "avg_duration",
            OutcomeColumn::AvgDistance => "avg_distance",
        }
    }
}

impl Default for OutcomeColumn {
    fn default() -> Self {
        OutcomeColumn::Pst
    }
}

/// One observation entering a fixed-effects design.
#[derive(Debug, Clone)]
pub struct DesignRow {
    pub unit: String,
    pub time: u32,
    pub y: f64,
    pub x: Vec<f64>,
}

/// A panel design with dense unit/time ids and named regressor columns.
/// Units observed only once are dropped up front (they are absorbed
/// entirely by their own fixed effect) and counted.
#[derive(Debug, Clone)]
pub struct FEDesign {
    pub y: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub x_names: Vec<String>,
    pub unit_ids: Vec<u32>,
    pub time_ids: Vec<u32>,
    pub n_units: usize,
    pub n_times: usize,
    pub n_singletons_dropped: usize,
    /// Event-time bins dropped for lack of support (event-study designs).
    pub dropped_bins: Vec<i32>,
}

impl FEDesign {
    pub fn from_rows(rows: Vec<DesignRow>, x_names: Vec<String>) -> Result<FEDesign> {
        if rows.is_empty() {
            return Err(Error::Validation("empty design".into()));
        }
        let k = x_names.len();
        if rows.iter().any(|r| r.x.len() != k) {
            return Err(Error::Validation("ragged regressor rows".into()));
        }
        let mut unit_count: HashMap<&str, u32> = HashMap::new();
        for r in &rows {
            *unit_count.entry(r.unit.as_str()).or_default() += 1;
        }
        let n_singletons_dropped = unit_count.values().filter(|&&c| c == 1).count();

        let mut unit_index: HashMap<&str, u32> = HashMap::new();
        let mut time_index: HashMap<u32, u32> = HashMap::new();
        let mut y = Vec::with_capacity(rows.len());
        let mut x: Vec<Vec<f64>> = vec![Vec::with_capacity(rows.len()); k];
        let mut unit_ids = Vec::with_capacity(rows.len());
        let mut time_ids = Vec::with_capacity(rows.len());

        for r in &rows {
            if unit_count[r.unit.as_str()] < 2 {
                continue;
            }
            let next_u = unit_index.len() as u32;
            let u = *unit_index.entry(r.unit.as_str()).or_insert(next_u);
            let next_t = time_index.len() as u32;
            let t = *time_index.entry(r.time).or_insert(next_t);
            unit_ids.push(u);
            time_ids.push(t);
            y.push(r.y);
            for (j, &v) in r.x.iter().enumerate() {
                x[j].push(v);
            }
        }
        if y.is_empty() {
            return Err(Error::Validation("design contains only singleton units".into()));
        }
        Ok(FEDesign {
            y,
            x,
            x_names,
            unit_ids,
            time_ids,
            n_units: unit_index.len(),
            n_times: time_index.len(),
            n_singletons_dropped,
            dropped_bins: Vec::new(),
        })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }
}

const DEMEAN_TOL: f64 = 1e-10;
const DEMEAN_MAX_SWEEPS: usize = 500;

/// Absorb unit and time fixed effects from every column by alternating
/// projections. Returns the number of sweeps of the slowest column.
pub fn demean_two_way(
    unit_ids: &[u32],
    time_ids: &[u32],
    n_units: usize,
    n_times: usize,
    columns: &mut [Vec<f64>],
) -> Result<usize> {
    let n = unit_ids.len();
    let mut unit_rows: Vec<Vec<u32>> = vec![Vec::new(); n_units];
    let mut time_rows: Vec<Vec<u32>> = vec![Vec::new(); n_times];
    for i in 0..n {
        unit_rows[unit_ids[i] as usize].push(i as u32);
        time_rows[time_ids[i] as usize].push(i as u32);
    }

    let sweeps: Result<Vec<usize>> = columns
        .par_iter_mut()
        .map(|col| {
            for sweep in 1..=DEMEAN_MAX_SWEEPS {
                let mut max_change = 0.0f64;
                for rows in &unit_rows {
                    let m = rows.iter().map(|&i| col[i as usize]).sum::<f64>() / rows.len() as f64;
                    for &i in rows {
                        col[i as usize] -= m;
                    }
                    max_change = max_change.max(m.abs());
                }
                for rows in &time_rows {
                    let m = rows.iter().map(|&i| col[i as usize]).sum::<f64>() / rows.len() as f64;
                    for &i in rows {
                        col[i as usize] -= m;
                    }
                    max_change = max_change.max(m.abs());
                }
                if max_change < DEMEAN_TOL {
                    return Ok(sweep);
                }
            }
            // Measure the residual change for the error payload.
            let mut last = 0.0f64;
            for rows in &unit_rows {
                let m = rows.iter().map(|&i| col[i as usize]).sum::<f64>() / rows.len() as f64;
                last = last.max(m.abs());
            }
            Err(Error::Numeric(format!(
                "two-way demeaning did not converge in {DEMEAN_MAX_SWEEPS} sweeps (last max change {last:e})"
            )))
        })
        .collect();
    Ok(sweeps?.into_iter().max().unwrap_or(1))
}

/// One estimated coefficient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coef {
    pub name: String,
    pub estimate: f64,
    /// Cluster-robust (by unit) standard error.
    pub se: f64,
    pub se_classical: f64,
    pub t: f64,
}

/// Fitted fixed-effects estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FEEstimate {
    pub coefs: Vec<Coef>,
    pub n_obs: usize,
    pub n_units: usize,
    pub n_times: usize,
    pub n_singletons_dropped: usize,
    pub demean_sweeps: usize,
    pub r2_within: f64,
    /// Cluster-robust covariance, row-major k×k.
    pub vcov: Vec<f64>,
    pub dropped_bins: Vec<i32>,
}

impl FEEstimate {
    pub fn coef(&self, name: &str) -> Option<&Coef> {
        self.coefs.iter().find(|c| c.name == name)
    }
}

/// Estimate the design by demeaned OLS with cluster-robust (by unit)
/// standard errors.
pub fn estimate(design: &FEDesign) -> Result<FEEstimate> {
    let n = design.n_obs();
    let k = design.x.len();
    if k == 0 {
        return Err(Error::Validation("design has no regressors".into()));
    }

    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    cols.push(design.y.clone());
    for c in &design.x {
        cols.push(c.clone());
    }
    let sweeps = demean_two_way(
        &design.unit_ids,
        &design.time_ids,
        design.n_units,
        design.n_times,
        &mut cols,
    )?;
    let y = &cols[0];
    let xs = &cols[1..];

    // A regressor with no variation left was absorbed by the fixed effects.
    for (j, col) in xs.iter().enumerate() {
        let scale = col.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if scale < 1e-9 {
            let name = &design.x_names[j];
            return Err(Error::Numeric(if name == "dp" {
                "treatment collinear with fixed effects".to_string()
            } else {
                format!("regressor {name:?} is collinear with the fixed effects")
            }));
        }
    }

    // Normal equations on the demeaned columns.
    let mut xtx = vec![0.0f64; k * k];
    let mut xty = vec![0.0f64; k];
    for i in 0..n {
        for a in 0..k {
            let xa = xs[a][i];
            xty[a] += xa * y[i];
            for b in a..k {
                xtx[a * k + b] += xa * xs[b][i];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtx[a * k + b] = xtx[b * k + a];
        }
    }

    let l = cholesky_with_failure(&xtx, k).map_err(|j| {
        Error::Numeric(format!(
            "regressor {:?} is collinear with the preceding columns",
            design.x_names[j]
        ))
    })?;
    let beta = chol_solve(&l, k, &xty);
    let xtx_inv = chol_inverse(&l, k);

    let mut rss = 0.0;
    let mut tss = 0.0;
    let mut resid = vec![0.0f64; n];
    for i in 0..n {
        let mut fit = 0.0;
        for a in 0..k {
            fit += beta[a] * xs[a][i];
        }
        let e = y[i] - fit;
        resid[i] = e;
        rss += e * e;
        tss += y[i] * y[i];
    }
    let r2_within = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };

    // Absorbed fixed effects consume degrees of freedom too.
    let k_total = k + design.n_units + design.n_times - 1;
    let dof = (n as f64 - k_total as f64).max(1.0);
    let sigma2 = rss / dof;

    // Liang-Zeger sandwich clustered by unit.
    let mut scores = vec![0.0f64; design.n_units * k];
    for i in 0..n {
        let u = design.unit_ids[i] as usize;
        for a in 0..k {
            scores[u * k + a] += xs[a][i] * resid[i];
        }
    }
    let mut meat = vec![0.0f64; k * k];
    for u in 0..design.n_units {
        for a in 0..k {
            let sa = scores[u * k + a];
            for b in 0..k {
                meat[a * k + b] += sa * scores[u * k + b];
            }
        }
    }
    let g = design.n_units as f64;
    let correction = if g > 1.0 { g / (g - 1.0) * (n as f64 - 1.0) / dof } else { 1.0 };

    // vcov = c * (X'X)^-1 M (X'X)^-1
    let mut tmp = vec![0.0f64; k * k];
    for a in 0..k {
        for b in 0..k {
            let mut s = 0.0;
            for p in 0..k {
                s += xtx_inv[a * k + p] * meat[p * k + b];
            }
            tmp[a * k + b] = s;
        }
    }
    let mut vcov = vec![0.0f64; k * k];
    for a in 0..k {
        for b in 0..k {
            let mut s = 0.0;
            for p in 0..k {
                s += tmp[a * k + p] * xtx_inv[p * k + b];
            }
            vcov[a * k + b] = correction * s;
        }
    }

    let coefs = (0..k)
        .map(|j| {
            let se = vcov[j * k + j].max(0.0).sqrt();
            let se_classical = (sigma2 * xtx_inv[j * k + j]).max(0.0).sqrt();
            Coef {
                name: design.x_names[j].clone(),
                estimate: beta[j],
                se,
                se_classical,
                t: if se > 0.0 { beta[j] / se } else { f64::NAN },
            }
        })
        .collect();

    Ok(FEEstimate {
        coefs,
        n_obs: n,
        n_units: design.n_units,
        n_times: design.n_times,
        n_singletons_dropped: design.n_singletons_dropped,
        demean_sweeps: sweeps,
        r2_within,
        vcov,
        dropped_bins: design.dropped_bins.clone(),
    })
}

/// Design for the average-treatment-effect specification: outcome on the
/// absorbing treatment indicator.
pub fn design_att(cells: &[PanelCell], outcome: OutcomeColumn) -> Result<FEDesign> {
    let rows = cells
        .iter()
        .map(|c| DesignRow {
            unit: c.user_id.clone(),
            time: c.month,
            y: outcome.value(c),
            x: vec![c.dp as f64],
        })
        .collect();
    FEDesign::from_rows(rows, vec!["dp".to_string()])
}

/// Average treatment effect on the treated (the `dp` coefficient).
pub fn estimate_att(design: &FEDesign) -> Result<FEEstimate> {
    estimate(design)
}

pub fn event_column_name(k: i32) -> String {
    format!("k={k}")
}

/// Event-study design: one indicator per relative month k in [-4, 8],
/// k = -1 omitted as the reference, histories outside the window binned
/// into the endpoints. Bins with no support are dropped and recorded.
pub fn design_event_study(
    cells: &[PanelCell],
    enrollment: &HashMap<String, u32>,
    outcome: OutcomeColumn,
) -> Result<FEDesign> {
    let ks: Vec<i32> = (EVENT_TIME_MIN..=EVENT_TIME_MAX).filter(|&k| k != EVENT_TIME_REFERENCE).collect();
    let col_of: HashMap<i32, usize> = ks.iter().enumerate().map(|(i, &k)| (k, i)).collect();

    let mut support = vec![0usize; ks.len()];
    let mut rows = Vec::with_capacity(cells.len());
    for c in cells {
        let mut x = vec![0.0; ks.len()];
        if let Some(&st) = enrollment.get(&c.user_id) {
            let k = (c.month as i64 - st as i64).clamp(EVENT_TIME_MIN as i64, EVENT_TIME_MAX as i64) as i32;
            if k != EVENT_TIME_REFERENCE {
                let j = col_of[&k];
                x[j] = 1.0;
                support[j] += 1;
            }
        }
        rows.push(DesignRow { unit: c.user_id.clone(), time: c.month, y: outcome.value(c), x });
    }

    if support.iter().all(|&s| s == 0) {
        return Err(Error::Numeric("treatment collinear with fixed effects".into()));
    }

    let kept: Vec<usize> = (0..ks.len()).filter(|&j| support[j] > 0).collect();
    let dropped_bins: Vec<i32> = (0..ks.len()).filter(|&j| support[j] == 0).map(|j| ks[j]).collect();
    let x_names: Vec<String> = kept.iter().map(|&j| event_column_name(ks[j])).collect();
    let rows = rows
        .into_iter()
        .map(|mut r| {
            r.x = kept.iter().map(|&j| r.x[j]).collect();
            r
        })
        .collect();

    let mut design = FEDesign::from_rows(rows, x_names)?;
    design.dropped_bins = dropped_bins;
    Ok(design)
}

/// Joint estimate of the event-study coefficients.
pub fn estimate_event_study(design: &FEDesign) -> Result<FEEstimate> {
    estimate(design)
}

/// Per-segment treatment effect derived from an interacted specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentEffect {
    pub class: String,
    pub effect: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeterogeneousEstimate {
    pub fe: FEEstimate,
    /// The average effect (the `dp` coefficient under centered interactions).
    pub average_effect: Coef,
    pub segment_effects: Vec<SegmentEffect>,
}

/// Heterogeneous-effects design: `dp` plus `dp` × centered segment
/// indicators (the lexicographically first class is the reference). The
/// centering keeps the `dp` coefficient interpretable as the average
/// effect; per-class effects are reported for every class.
pub fn estimate_heterogeneous(
    cells: &[PanelCell],
    outcome: OutcomeColumn,
    segment_of: &HashMap<String, String>,
) -> Result<HeterogeneousEstimate> {
    let mut classes: Vec<String> = Vec::new();
    for c in cells {
        let class = segment_of.get(&c.user_id).ok_or_else(|| {
            Error::Validation(format!("no segment label for user {:?}", c.user_id))
        })?;
        if !classes.contains(class) {
            classes.push(class.clone());
        }
    }
    classes.sort();
    if classes.len() < 2 {
        return Err(Error::Numeric(format!(
            "segment covariate is constant ({:?}); interactions are collinear with dp",
            classes.first().cloned().unwrap_or_default()
        )));
    }

    // Shares over observations, for centering.
    let n = cells.len() as f64;
    let mut share: HashMap<&str, f64> = HashMap::new();
    for c in cells {
        *share.entry(segment_of[&c.user_id].as_str()).or_default() += 1.0 / n;
    }

    let included = &classes[1..];
    let mut x_names = vec!["dp".to_string()];
    x_names.extend(included.iter().map(|c| format!("dp_x_{c}")));

    let rows: Vec<DesignRow> = cells
        .iter()
        .map(|c| {
            let dp = c.dp as f64;
            let class = segment_of[&c.user_id].as_str();
            let mut x = Vec::with_capacity(included.len() + 1);
            x.push(dp);
            for inc in included {
                let ind = if class == inc.as_str() { 1.0 } else { 0.0 };
                x.push(dp * (ind - share[inc.as_str()]));
            }
            DesignRow { unit: c.user_id.clone(), time: c.month, y: outcome.value(c), x }
        })
        .collect();

    let design = FEDesign::from_rows(rows, x_names)?;
    let fe = estimate(&design)?;

    let k = fe.coefs.len();
    let beta0 = fe.coefs[0].clone();
    let betas: Vec<f64> = fe.coefs[1..].iter().map(|c| c.estimate).collect();
    let beta_bar: f64 =
        included.iter().zip(&betas).map(|(c, b)| share[c.as_str()] * b).sum();

    // effect(class) = beta0 + beta_class - beta_bar (beta of the reference
    // class is 0); SE via the delta method on the cluster vcov.
    let mut segment_effects = Vec::with_capacity(classes.len());
    for class in &classes {
        let mut weight = vec![0.0f64; k];
        weight[0] = 1.0;
        for (j, inc) in included.iter().enumerate() {
            weight[j + 1] = -share[inc.as_str()];
            if inc == class {
                weight[j + 1] += 1.0;
            }
        }
        let effect = beta0.estimate
            + match included.iter().position(|c| c == class) {
                Some(j) => betas[j] - beta_bar,
                None => -beta_bar,
            };
        let mut var = 0.0;
        for a in 0..k {
            for b in 0..k {
                var += weight[a] * fe.vcov[a * k + b] * weight[b];
            }
        }
        segment_effects.push(SegmentEffect {
            class: class.clone(),
            effect,
            se: var.max(0.0).sqrt(),
        });
    }

    Ok(HeterogeneousEstimate { fe, average_effect: beta0, segment_effects })
}

/// Placebo design: enrollment artificially advanced by `shift` months.
/// By default the sample is restricted to each treated unit's true
/// pre-enrollment months (controls keep all rows), so any "effect" found
/// is a confounded pre-trend; `full_sample` keeps all rows instead.
pub fn design_placebo(
    cells: &[PanelCell],
    enrollment: &HashMap<String, u32>,
    outcome: OutcomeColumn,
    shift: u32,
    full_sample: bool,
) -> Result<FEDesign> {
    if shift == 0 {
        return design_att(cells, outcome);
    }
    for (user, &st) in enrollment {
        if st < shift {
            return Err(Error::Validation(format!(
                "shifted start leaves the study window for user {user:?} (enrollment month {st}, shift {shift})"
            )));
        }
    }
    let mut rows = Vec::new();
    for c in cells {
        let dp = match enrollment.get(&c.user_id) {
            Some(&st) => {
                if !full_sample && c.month >= st {
                    continue; // post-enrollment rows are contaminated by the real effect
                }
                if c.month + shift >= st {
                    1.0
                } else {
                    0.0
                }
            }
            None => 0.0,
        };
        rows.push(DesignRow {
            unit: c.user_id.clone(),
            time: c.month,
            y: outcome.value(c),
            x: vec![dp],
        });
    }
    FEDesign::from_rows(rows, vec!["dp".to_string()])
}

/// Run the placebo specification and return the shifted-treatment estimate.
pub fn placebo(
    cells: &[PanelCell],
    enrollment: &HashMap<String, u32>,
    outcome: OutcomeColumn,
    shift: u32,
    full_sample: bool,
) -> Result<FEEstimate> {
    estimate(&design_placebo(cells, enrollment, outcome, shift, full_sample)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(user: &str, month: u32, pst: f64, dp: u8) -> PanelCell {
        PanelCell {
            user_id: user.to_string(),
            month,
            pst,
            n_trips: 10,
            n_low_carbon: (pst * 10.0).round() as u32,
            dp,
            avg_duration: 20.0,
            avg_distance: 5.0,
        }
    }

    #[test]
    fn classic_two_by_two() {
        // Control A: 1, 1. Treated B at t=1: 1, 1.5. DiD by hand:
        // (1.5 - 1) - (1 - 1) = 0.5.
        let cells = vec![
            cell("a", 0, 1.0, 0),
            cell("a", 1, 1.0, 0),
            cell("b", 0, 1.0, 0),
            cell("b", 1, 1.5, 1),
        ];
        let est = estimate_att(&design_att(&cells, OutcomeColumn::Pst).unwrap()).unwrap();
        assert!((est.coef("dp").unwrap().estimate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_outcome_variation_gives_zero_effect() {
        let cells = vec![
            cell("a", 0, 0.4, 0),
            cell("a", 1, 0.4, 0),
            cell("b", 0, 0.4, 0),
            cell("b", 1, 0.4, 1),
        ];
        let est = estimate_att(&design_att(&cells, OutcomeColumn::Pst).unwrap()).unwrap();
        assert!(est.coef("dp").unwrap().estimate.abs() < 1e-12);
    }

    #[test]
    fn unit_constant_column_is_absorbed() {
        // Outcome varies, but dp is constant within each unit: collinear.
        let cells = vec![
            cell("a", 0, 0.1, 1),
            cell("a", 1, 0.4, 1),
            cell("b", 0, 0.5, 0),
            cell("b", 1, 0.2, 0),
        ];
        let err = estimate_att(&design_att(&cells, OutcomeColumn::Pst).unwrap()).unwrap_err();
        assert!(err.to_string().contains("collinear"));
    }

    #[test]
    fn time_constant_column_is_absorbed() {
        let mut cols = vec![vec![1.0, 1.0, 5.0, 5.0]];
        // Two units, two times; the column depends only on time.
        demean_two_way(&[0, 0, 1, 1], &[0, 1, 0, 1], 2, 2, &mut cols).unwrap();
        // unit ids [0,0,1,1] with times [0,1,0,1]: values 1,5,1,5 by time.
        let mut cols2 = vec![vec![1.0, 5.0, 1.0, 5.0]];
        demean_two_way(&[0, 0, 1, 1], &[0, 1, 0, 1], 2, 2, &mut cols2).unwrap();
        for v in &cols2[0] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn demeaned_columns_have_tiny_group_means() {
        let unit_ids = vec![0, 0, 0, 1, 1, 2, 2, 2, 3, 3];
        let time_ids = vec![0, 1, 2, 0, 2, 1, 2, 3, 0, 3];
        let mut cols = vec![
            vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0, 2.5, 8.0, -3.0, 1.0],
            vec![0.3, 0.1, 0.9, 0.2, 0.8, 0.4, 0.6, 0.7, 0.1, 0.5],
        ];
        demean_two_way(&unit_ids, &time_ids, 4, 4, &mut cols).unwrap();
        for col in &cols {
            for u in 0..4 {
                let rows: Vec<usize> =
                    (0..10).filter(|&i| unit_ids[i] == u).collect();
                let m: f64 = rows.iter().map(|&i| col[i]).sum::<f64>() / rows.len() as f64;
                assert!(m.abs() <= 1e-8);
            }
            for t in 0..4 {
                let rows: Vec<usize> =
                    (0..10).filter(|&i| time_ids[i] == t).collect();
                let m: f64 = rows.iter().map(|&i| col[i]).sum::<f64>() / rows.len() as f64;
                assert!(m.abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn shifting_outcome_by_unit_constants_leaves_effect_unchanged() {
        let cells = vec![
            cell("a", 0, 0.2, 0),
            cell("a", 1, 0.3, 0),
            cell("a", 2, 0.25, 0),
            cell("b", 0, 0.3, 0),
            cell("b", 1, 0.6, 1),
            cell("b", 2, 0.7, 1),
            cell("c", 0, 0.4, 0),
            cell("c", 2, 0.45, 0),
        ];
        let base = estimate_att(&design_att(&cells, OutcomeColumn::Pst).unwrap())
            .unwrap()
            .coef("dp")
            .unwrap()
            .estimate;
        let mut shifted = cells.clone();
        for c in &mut shifted {
            let add = match c.user_id.as_str() {
                "a" => 3.0,
                "b" => -1.5,
                _ => 0.25,
            };
            c.pst += add;
        }
        let alt = estimate_att(&design_att(&shifted, OutcomeColumn::Pst).unwrap())
            .unwrap()
            .coef("dp")
            .unwrap()
            .estimate;
        assert!((base - alt).abs() < 1e-10);
    }

    #[test]
    fn singletons_are_dropped_and_counted() {
        let cells = vec![
            cell("a", 0, 0.2, 0),
            cell("a", 1, 0.3, 0),
            cell("b", 0, 0.3, 0),
            cell("b", 1, 0.6, 1),
            cell("lonely", 1, 0.9, 0),
        ];
        let est = estimate_att(&design_att(&cells, OutcomeColumn::Pst).unwrap()).unwrap();
        assert_eq!(est.n_singletons_dropped, 1);
        assert_eq!(est.n_obs, 4);
    }

    #[test]
    fn all_control_event_study_refuses() {
        let cells = vec![
            cell("a", 0, 0.2, 0),
            cell("a", 1, 0.3, 0),
            cell("b", 0, 0.3, 0),
            cell("b", 1, 0.6, 0),
        ];
        let enrollment = HashMap::new();
        let err = design_event_study(&cells, &enrollment, OutcomeColumn::Pst).unwrap_err();
        assert!(err.to_string().contains("collinear"));
    }

    #[test]
    fn constant_segment_errors() {
        let cells = vec![
            cell("a", 0, 0.2, 0),
            cell("a", 1, 0.3, 0),
            cell("b", 0, 0.3, 0),
            cell("b", 1, 0.6, 1),
        ];
        let segments: HashMap<String, String> =
            [("a", "all"), ("b", "all")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let err = estimate_heterogeneous(&cells, OutcomeColumn::Pst, &segments).unwrap_err();
        assert!(err.to_string().contains("constant"));
    }

    #[test]
    fn placebo_shift_zero_is_att() {
        let cells = vec![
            cell("a", 0, 0.2, 0),
            cell("a", 1, 0.3, 0),
            cell("b", 0, 0.3, 0),
            cell("b", 1, 0.6, 1),
        ];
        let enrollment: HashMap<String, u32> = [("b".to_string(), 1)].into_iter().collect();
        let a = estimate_att(&design_att(&cells, OutcomeColumn::Pst).unwrap()).unwrap();
        let b = placebo(&cells, &enrollment, OutcomeColumn::Pst, 0, false).unwrap();
        assert_eq!(a.coef("dp").unwrap().estimate, b.coef("dp").unwrap().estimate);
    }

    #[test]
    fn placebo_restricts_to_pre_period() {
        // Treated unit b enrolls at t=2; effect raises post outcomes hard.
        // The 1-month placebo must ignore the post rows entirely.
        let cells = vec![
            cell("a", 0, 0.20, 0),
            cell("a", 1, 0.20, 0),
            cell("a", 2, 0.20, 0),
            cell("a", 3, 0.20, 0),
            cell("b", 0, 0.20, 0),
            cell("b", 1, 0.20, 0),
            cell("b", 2, 0.90, 1),
            cell("b", 3, 0.90, 1),
        ];
        let enrollment: HashMap<String, u32> = [("b".to_string(), 2)].into_iter().collect();
        let est = placebo(&cells, &enrollment, OutcomeColumn::Pst, 1, false).unwrap();
        assert!(est.coef("dp").unwrap().estimate.abs() < 1e-12);
        // The full-sample variant picks up the true effect instead.
        let full = placebo(&cells, &enrollment, OutcomeColumn::Pst, 1, true).unwrap();
        assert!(full.coef("dp").unwrap().estimate > 0.3);
    }

    #[test]
    fn placebo_shift_outside_window_errors() {
        let cells = vec![
            cell("a", 0, 0.2, 0),
            cell("a", 1, 0.3, 0),
            cell("b", 0, 0.3, 0),
            cell("b", 1, 0.6, 1),
        ];
        let enrollment: HashMap<String, u32> = [("b".to_string(), 1)].into_iter().collect();
        assert!(placebo(&cells, &enrollment, OutcomeColumn::Pst, 2, false).is_err());
    }
}
