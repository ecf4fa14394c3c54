//! Propensity-score estimation and greedy caliper matching.
//!
//! Enrollment is voluntary, so treated and control groups differ
//! systematically. A logistic model estimates each individual's enrollment
//! propensity from observed covariates; treated units are then paired with
//! their nearest unused controls within a caliper, and covariate balance is
//! diagnosed before and after matching.
//!
//! # References
//!
//! - Rosenbaum & Rubin (1983), "The central role of the propensity score in
//!   observational studies for causal effects." *Biometrika*.
//! - Austin (2011), "An introduction to propensity score methods."

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelCell;
use crate::trips::Individual;

/// Covariates used for propensity estimation, in fixed order.
pub const COVARIATE_NAMES: [&str; 5] =
    ["gender", "age_band", "income_level", "avg_travel_time", "avg_n_trips"];

/// One individual's covariate row. The first three features are categorical
/// codes (gender 0/1, age-band ordinal, income level); the last two are
/// pre-enrollment travel averages.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateRow {
    pub user_id: String,
    pub treated: bool,
    pub features: [f64; 5],
}

/// Fitted logistic propensity model (intercept first).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityModel {
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub converged: bool,
    /// Set when the optimizer detects (quasi-)separation; the returned
    /// coefficients are the last stable iterate.
    pub separation_warning: bool,
    /// Mean log-likelihood trace, one entry per accepted iterate.
    pub log_likelihood_trace: Vec<f64>,
}

impl PropensityModel {
    pub fn predict(&self, features: &[f64]) -> f64 {
        let mut eta = self.coefficients[0];
        for (b, x) in self.coefficients[1..].iter().zip(features) {
            eta += b * x;
        }
        1.0 / (1.0 + (-eta).exp())
    }
}

const IRLS_TOL: f64 = 1e-8;
const IRLS_MAX_ITER: usize = 100;
const SEPARATION_COEF_BOUND: f64 = 30.0;

fn mean_log_likelihood(eta: &DVector<f64>, y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mut ll = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let e = eta[i];
        // log(1 + exp(e)) computed stably.
        let log1pe = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
        ll += yi * e - log1pe;
    }
    ll / n
}

/// Fit a logistic regression by iteratively reweighted least squares with
/// step-halving. `x` is row-major (n × p) *without* an intercept column;
/// the intercept is prepended. Convergence is declared when the sup-norm
/// of the mean-log-likelihood gradient drops below 1e-8.
pub fn fit_logistic(x: &[f64], n: usize, p: usize, y: &[bool]) -> Result<PropensityModel> {
    if n == 0 || x.len() != n * p || y.len() != n {
        return Err(Error::Validation("design dimensions do not match".into()));
    }
    let n_treated = y.iter().filter(|&&t| t).count();
    if n_treated < 2 || n - n_treated < 2 {
        return Err(Error::Validation("need at least 2 individuals per class".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("covariates must be finite".into()));
    }

    let k = p + 1;
    let mut design = DMatrix::zeros(n, k);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        for j in 0..p {
            design[(i, j + 1)] = x[i * p + j];
        }
    }
    let yv: Vec<f64> = y.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();

    let mut beta = DVector::zeros(k);
    let mut eta = &design * &beta;
    let mut ll = mean_log_likelihood(&eta, &yv);
    let mut trace = vec![ll];
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut separation_warning = false;
    let mut last_info: Option<DMatrix<f64>> = None;

    for iter in 0..IRLS_MAX_ITER {
        iterations = iter + 1;
        let mu: DVector<f64> = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let resid: DVector<f64> = DVector::from_iterator(n, (0..n).map(|i| yv[i] - mu[i]));
        let grad = design.transpose() * &resid / n as f64;
        grad_norm = grad.amax();
        if grad_norm < IRLS_TOL {
            converged = true;
            break;
        }

        // Observed information (sum scale): X' W X with W = mu (1 - mu).
        let mut info = DMatrix::zeros(k, k);
        for i in 0..n {
            let w = (mu[i] * (1.0 - mu[i])).max(1e-10);
            let xi = design.row(i);
            for a in 0..k {
                for b in a..k {
                    info[(a, b)] += w * xi[a] * xi[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        last_info = Some(info.clone());

        let step = info
            .lu()
            .solve(&(design.transpose() * &resid))
            .ok_or_else(|| Error::Numeric("singular information matrix in IRLS".into()))?;

        // Step-halving keeps the likelihood non-decreasing.
        let mut s = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * s;
            let cand_eta = &design * &cand;
            let cand_ll = mean_log_likelihood(&cand_eta, &yv);
            if cand_ll >= ll - 1e-14 {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                trace.push(ll);
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            break;
        }
        if beta.amax() > SEPARATION_COEF_BOUND {
            separation_warning = true;
            break;
        }
    }

    // Quasi-separation inflates coefficients without bound; flag it even
    // when the mean gradient has numerically underflowed the tolerance.
    if beta.amax() > SEPARATION_COEF_BOUND / 2.0 {
        separation_warning = true;
    }

    let standard_errors = match last_info {
        Some(info) => match info.try_inverse() {
            Some(cov) => (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect(),
            None => vec![f64::NAN; k],
        },
        None => vec![f64::NAN; k],
    };

    Ok(PropensityModel {
        coefficients: beta.iter().copied().collect(),
        standard_errors,
        iterations,
        final_gradient_norm: grad_norm,
        converged,
        separation_warning,
        log_likelihood_trace: trace,
    })
}

/// Fit the propensity model on the named covariate set.
pub fn fit_propensity(rows: &[CovariateRow]) -> Result<PropensityModel> {
    let n = rows.len();
    let mut x = Vec::with_capacity(n * 5);
    let mut y = Vec::with_capacity(n);
    for r in rows {
        x.extend_from_slice(&r.features);
        y.push(r.treated);
    }
    fit_logistic(&x, n, 5, &y)
}

/// Caliper distances can be measured on the probability or the logit scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaliperScale {
    Probability,
    Logit,
}

impl Default for CaliperScale {
    fn default() -> Self {
        CaliperScale::Probability
    }
}

/// A scored unit entering the matching stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredUnit {
    pub user_id: String,
    pub score: f64,
    pub treated: bool,
}

/// One treated unit with its matched controls, nearest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchTriple {
    pub treated_id: String,
    pub controls: Vec<String>,
}

/// Result of greedy 1:`ratio` caliper matching without replacement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchedSet {
    pub triples: Vec<MatchTriple>,
    pub caliper: f64,
    pub scale: CaliperScale,
    pub dropped_treated: usize,
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Monotone mapping from f64 to u64 so scores can live in an ordered set.
fn order_bits(f: f64) -> u64 {
    let b = f.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// Greedy nearest-neighbour matching: treated units in descending score
/// order each take up to `ratio` nearest unused controls within
/// `caliper_mult` × SD of all scores. Treated units with no in-caliper
/// control are dropped and counted.
pub fn match_greedy(
    units: &[ScoredUnit],
    ratio: usize,
    caliper_mult: f64,
    scale: CaliperScale,
) -> Result<MatchedSet> {
    if ratio == 0 {
        return Err(Error::Config("matching ratio must be >= 1".into()));
    }
    for u in units {
        if !(u.score > 0.0 && u.score < 1.0) {
            return Err(Error::Validation(format!(
                "propensity score for {:?} must lie in (0, 1), got {}",
                u.user_id, u.score
            )));
        }
    }
    let transform = |s: f64| match scale {
        CaliperScale::Probability => s,
        CaliperScale::Logit => (s / (1.0 - s)).ln(),
    };

    let scores: Vec<f64> = units.iter().map(|u| transform(u.score)).collect();
    let caliper = caliper_mult * sample_sd(&scores);

    let mut treated: Vec<(f64, &ScoredUnit)> = Vec::new();
    // Ordered by (score bits, user id) for deterministic nearest scans.
    let mut controls: BTreeSet<(u64, &str)> = BTreeSet::new();
    let mut control_scores: HashMap<&str, f64> = HashMap::new();
    for (u, &s) in units.iter().zip(&scores) {
        if u.treated {
            treated.push((s, u));
        } else {
            controls.insert((order_bits(s), u.user_id.as_str()));
            control_scores.insert(u.user_id.as_str(), s);
        }
    }
    if treated.is_empty() || controls.is_empty() {
        return Err(Error::Validation("both treated and control groups must be non-empty".into()));
    }

    // Descending score; ties broken by ascending user id.
    treated.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.user_id.cmp(&b.1.user_id))
    });

    let mut triples = Vec::new();
    let mut dropped = 0usize;
    for (s, unit) in treated {
        let mut picked: Vec<(f64, &str)> = Vec::with_capacity(ratio);
        // Walk outward below and above the treated score. Controls at
        // exactly the treated score sit on the `above` side only.
        let mut below = controls.range(..(order_bits(s), "")).rev().peekable();
        let mut above = controls.range((order_bits(s), "")..).peekable();
        let dist = |id: &str| (control_scores[id] - s).abs();
        while picked.len() < ratio {
            let db = below.peek().map(|&&(_, id)| dist(id));
            let da = above.peek().map(|&&(_, id)| dist(id));
            let best = match (db, da) {
                (None, None) => break,
                (Some(d), None) | (None, Some(d)) => d,
                (Some(d1), Some(d2)) => d1.min(d2),
            };
            if best > caliper {
                break;
            }
            // Gather every control at the minimal distance, then break the
            // tie by ascending user id.
            let mut tied: Vec<&str> = Vec::new();
            while let Some(&&(_, id)) = below.peek() {
                if dist(id) == best {
                    tied.push(id);
                    below.next();
                } else {
                    break;
                }
            }
            while let Some(&&(_, id)) = above.peek() {
                if dist(id) == best {
                    tied.push(id);
                    above.next();
                } else {
                    break;
                }
            }
            tied.sort_unstable();
            for id in tied {
                if picked.len() < ratio {
                    picked.push((control_scores[id], id));
                }
            }
        }
        if picked.is_empty() {
            dropped += 1;
            continue;
        }
        for &(cs, id) in &picked {
            controls.remove(&(order_bits(cs), id));
        }
        triples.push(MatchTriple {
            treated_id: unit.user_id.clone(),
            controls: picked.iter().map(|&(_, id)| id.to_string()).collect(),
        });
    }

    if triples.is_empty() {
        return Err(Error::Numeric("cohort empty: no treated unit found an in-caliper control".into()));
    }
    Ok(MatchedSet { triples, caliper, scale, dropped_treated: dropped })
}

/// Balance diagnostics for one covariate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceRow {
    pub covariate: String,
    pub smd_before: f64,
    pub smd_after: f64,
    /// Chi-square statistic and degrees of freedom on the matched set;
    /// present for the categorical covariates.
    pub chi_square: Option<(f64, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceTable {
    pub rows: Vec<BalanceRow>,
    pub n_treated_before: usize,
    pub n_control_before: usize,
    pub n_treated_matched: usize,
    pub n_control_matched: usize,
}

impl BalanceTable {
    pub fn max_smd_after(&self) -> f64 {
        self.rows.iter().map(|r| r.smd_after.abs()).fold(0.0, f64::max)
    }

    pub fn max_smd_before(&self) -> f64 {
        self.rows.iter().map(|r| r.smd_before.abs()).fold(0.0, f64::max)
    }
}

/// Standardized mean difference with the pooled-variance denominator.
fn smd(treated: &[f64], control: &[f64]) -> f64 {
    if treated.is_empty() || control.is_empty() {
        return 0.0;
    }
    let mt = treated.iter().sum::<f64>() / treated.len() as f64;
    let mc = control.iter().sum::<f64>() / control.len() as f64;
    let vt = sample_sd(treated).powi(2);
    let vc = sample_sd(control).powi(2);
    let pooled = ((vt + vc) / 2.0).sqrt();
    if pooled == 0.0 {
        0.0
    } else {
        (mt - mc) / pooled
    }
}

fn chi_square(treated: &[f64], control: &[f64]) -> Option<(f64, usize)> {
    let mut categories: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for &v in treated {
        categories.entry(v.to_bits()).or_default().0 += 1.0;
    }
    for &v in control {
        categories.entry(v.to_bits()).or_default().1 += 1.0;
    }
    if categories.len() < 2 {
        return None;
    }
    let nt: f64 = treated.len() as f64;
    let nc: f64 = control.len() as f64;
    let grand = nt + nc;
    let mut stat = 0.0;
    for (_, &(ot, oc)) in categories.iter() {
        let row = ot + oc;
        let et = row * nt / grand;
        let ec = row * nc / grand;
        if et > 0.0 {
            stat += (ot - et).powi(2) / et;
        }
        if ec > 0.0 {
            stat += (oc - ec).powi(2) / ec;
        }
    }
    Some((stat, categories.len() - 1))
}

/// Balance table from explicit before/after covariate groups. The first
/// three covariates additionally get a chi-square statistic on the matched
/// set.
pub fn balance_from_groups(
    before_t: &[&CovariateRow],
    before_c: &[&CovariateRow],
    after_t: &[&CovariateRow],
    after_c: &[&CovariateRow],
) -> Result<BalanceTable> {
    if before_t.is_empty() && before_c.is_empty() {
        return Err(Error::Validation("balance_report needs a non-empty cohort".into()));
    }
    let mut table = Vec::with_capacity(5);
    for (j, name) in COVARIATE_NAMES.iter().enumerate() {
        let col = |rows: &[&CovariateRow]| -> Vec<f64> { rows.iter().map(|r| r.features[j]).collect() };
        let (bt, bc, at, ac) = (col(before_t), col(before_c), col(after_t), col(after_c));
        table.push(BalanceRow {
            covariate: name.to_string(),
            smd_before: smd(&bt, &bc),
            smd_after: smd(&at, &ac),
            chi_square: if j < 3 { chi_square(&at, &ac) } else { None },
        });
    }
    Ok(BalanceTable {
        rows: table,
        n_treated_before: before_t.len(),
        n_control_before: before_c.len(),
        n_treated_matched: after_t.len(),
        n_control_matched: after_c.len(),
    })
}

/// Balance before matching (all rows) and after (matched ids only).
pub fn balance_report(
    rows: &[CovariateRow],
    matched_treated: &BTreeSet<String>,
    matched_controls: &BTreeSet<String>,
) -> Result<BalanceTable> {
    let before_t: Vec<&CovariateRow> = rows.iter().filter(|r| r.treated).collect();
    let before_c: Vec<&CovariateRow> = rows.iter().filter(|r| !r.treated).collect();
    let after_t: Vec<&CovariateRow> =
        rows.iter().filter(|r| r.treated && matched_treated.contains(&r.user_id)).collect();
    let after_c: Vec<&CovariateRow> =
        rows.iter().filter(|r| !r.treated && matched_controls.contains(&r.user_id)).collect();
    balance_from_groups(&before_t, &before_c, &after_t, &after_c)
}

/// Which individuals are eligible as controls for an enrollment cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlPool {
    NeverTreated,
    NotYetTreated,
}

impl Default for ControlPool {
    fn default() -> Self {
        ControlPool::NeverTreated
    }
}

/// One matched pair row of the emitted cohort table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortPair {
    pub treated_id: String,
    pub control_id: String,
    pub cohort_month: u32,
}

/// Matching outcome across all enrollment cohorts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortMatch {
    pub pairs: Vec<CohortPair>,
    pub dropped_treated: usize,
    /// (cohort month, caliper on the matching scale).
    pub calipers: Vec<(u32, f64)>,
    pub balance: BalanceTable,
}

impl CohortMatch {
    pub fn matched_ids(&self) -> (BTreeSet<String>, BTreeSet<String>) {
        let mut t = BTreeSet::new();
        let mut c = BTreeSet::new();
        for p in &self.pairs {
            t.insert(p.treated_id.clone());
            c.insert(p.control_id.clone());
        }
        (t, c)
    }
}

/// Pre-cohort covariates: categorical codes from the roster plus travel
/// averages over months strictly before `cohort_month`. Individuals with no
/// pre-cohort trips are not usable (their travel covariates are undefined).
pub fn cohort_covariates(
    users: &[Individual],
    panel: &[PanelCell],
    cohort_month: u32,
    pool: ControlPool,
) -> Vec<CovariateRow> {
    let mut pre: HashMap<&str, (f64, u32)> = HashMap::new(); // (duration-sum, trips)
    for c in panel {
        if c.month < cohort_month {
            let e = pre.entry(c.user_id.as_str()).or_default();
            e.0 += c.avg_duration * c.n_trips as f64;
            e.1 += c.n_trips;
        }
    }
    let mut rows = Vec::new();
    for u in users {
        let eligible = match u.enrollment_month {
            Some(st) if st == cohort_month => true, // this cohort's treated
            Some(st) => pool == ControlPool::NotYetTreated && st > cohort_month,
            None => true,
        };
        if !eligible {
            continue;
        }
        let Some(&(dur_sum, trips)) = pre.get(u.user_id.as_str()) else { continue };
        if trips == 0 {
            continue;
        }
        rows.push(CovariateRow {
            user_id: u.user_id.clone(),
            treated: u.enrollment_month == Some(cohort_month),
            features: [
                if u.gender == crate::trips::Gender::Male { 1.0 } else { 0.0 },
                u.age_band.ordinal() as f64,
                u.income_level as f64,
                dur_sum / trips as f64,
                trips as f64 / cohort_month as f64,
            ],
        });
    }
    rows
}

/// Match every enrollment cohort (ascending month), never reusing a control
/// across cohorts, then concatenate. Balance is reported on the stacked
/// per-cohort covariate rows.
pub fn match_cohorts(
    users: &[Individual],
    panel: &[PanelCell],
    ratio: usize,
    caliper_mult: f64,
    scale: CaliperScale,
    pool: ControlPool,
) -> Result<CohortMatch> {
    let mut months: Vec<u32> = users.iter().filter_map(|u| u.enrollment_month).collect();
    months.sort_unstable();
    months.dedup();
    if months.is_empty() {
        return Err(Error::Validation("no treated individuals to match".into()));
    }

    let mut used_controls: BTreeSet<String> = BTreeSet::new();
    let mut pairs = Vec::new();
    let mut calipers = Vec::new();
    let mut dropped = 0usize;
    // Before-stack: every cohort's eligible rows. After-stack: the matched
    // treated and control rows of the cohort they were matched in.
    let mut before: Vec<CovariateRow> = Vec::new();
    let mut after_t: Vec<CovariateRow> = Vec::new();
    let mut after_c: Vec<CovariateRow> = Vec::new();

    for &m in &months {
        let rows: Vec<CovariateRow> = cohort_covariates(users, panel, m, pool)
            .into_iter()
            .filter(|r| r.treated || !used_controls.contains(&r.user_id))
            .collect();
        let n_treated = rows.iter().filter(|r| r.treated).count();
        if n_treated == 0 || rows.len() - n_treated < 2 || n_treated < 2 {
            dropped += n_treated;
            continue;
        }
        let model = fit_propensity(&rows)?;
        let units: Vec<ScoredUnit> = rows
            .iter()
            .map(|r| ScoredUnit {
                user_id: r.user_id.clone(),
                score: model.predict(&r.features).clamp(1e-12, 1.0 - 1e-12),
                treated: r.treated,
            })
            .collect();
        let matched = match match_greedy(&units, ratio, caliper_mult, scale) {
            Ok(m) => m,
            Err(Error::Numeric(_)) => {
                dropped += n_treated;
                continue;
            }
            Err(e) => return Err(e),
        };
        dropped += matched.dropped_treated;
        calipers.push((m, matched.caliper));
        let row_of: HashMap<&str, &CovariateRow> =
            rows.iter().map(|r| (r.user_id.as_str(), r)).collect();
        for triple in &matched.triples {
            after_t.push(row_of[triple.treated_id.as_str()].clone());
            for c in &triple.controls {
                after_c.push(row_of[c.as_str()].clone());
                used_controls.insert(c.clone());
                pairs.push(CohortPair {
                    treated_id: triple.treated_id.clone(),
                    control_id: c.clone(),
                    cohort_month: m,
                });
            }
        }
        before.extend(rows);
    }

    if pairs.is_empty() {
        return Err(Error::Numeric("cohort empty: no treated unit matched in any cohort".into()));
    }
    let before_t: Vec<&CovariateRow> = before.iter().filter(|r| r.treated).collect();
    let before_c: Vec<&CovariateRow> = before.iter().filter(|r| !r.treated).collect();
    let balance = balance_from_groups(
        &before_t,
        &before_c,
        &after_t.iter().collect::<Vec<_>>(),
        &after_c.iter().collect::<Vec<_>>(),
    )?;
    Ok(CohortMatch { pairs, dropped_treated: dropped, calipers, balance })
}
