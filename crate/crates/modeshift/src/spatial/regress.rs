//! OLS regression of zone-level program outcomes on infrastructure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_inverse, chol_solve, cholesky_with_failure};
use crate::synth::zones::ZoneSpec;
use super::graphs::ZoneOutcome;

pub const INFRA_FEATURE_NAMES: [&str; 5] =
    ["road_density", "bus_density", "subway_density", "avg_car_time", "avg_transit_time"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfraRegression {
    pub outcome: String,
    /// Intercept first, then the five infrastructure features.
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub r_squared: f64,
    pub n: usize,
}

impl InfraRegression {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }
}

/// OLS with classical standard errors. The design is intercept + the five
/// features; a rank-deficient design errors with the offending column name.
pub fn regress_infrastructure(
    rows: &[[f64; 5]],
    outcomes: &[f64],
    outcome_name: &str,
) -> Result<InfraRegression> {
    let n = rows.len();
    if n != outcomes.len() {
        return Err(Error::Validation("outcome length must match feature rows".into()));
    }
    if n <= 6 {
        return Err(Error::Validation(format!(
            "regression needs more zones than features + intercept (got {n})"
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) || outcomes.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("regression inputs must be finite".into()));
    }

    let k = 6usize;
    let names: Vec<String> = std::iter::once("intercept".to_string())
        .chain(INFRA_FEATURE_NAMES.iter().map(|s| s.to_string()))
        .collect();

    let mut xtx = vec![0.0f64; k * k];
    let mut xty = vec![0.0f64; k];
    let xrow = |r: &[f64; 5], j: usize| if j == 0 { 1.0 } else { r[j - 1] };
    for (r, &y) in rows.iter().zip(outcomes) {
        for a in 0..k {
            let xa = xrow(r, a);
            xty[a] += xa * y;
            for b in a..k {
                xtx[a * k + b] += xa * xrow(r, b);
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtx[a * k + b] = xtx[b * k + a];
        }
    }

    let l = cholesky_with_failure(&xtx, k)
        .map_err(|j| Error::Numeric(format!("design is rank deficient at column {:?}", names[j])))?;
    let beta = chol_solve(&l, k, &xty);
    let inv = chol_inverse(&l, k);

    let mut rss = 0.0;
    let mean_y = outcomes.iter().sum::<f64>() / n as f64;
    let mut tss = 0.0;
    for (r, &y) in rows.iter().zip(outcomes) {
        let mut fit = 0.0;
        for a in 0..k {
            fit += beta[a] * xrow(r, a);
        }
        rss += (y - fit) * (y - fit);
        tss += (y - mean_y) * (y - mean_y);
    }
    let sigma2 = rss / (n - k) as f64;
    let standard_errors: Vec<f64> = (0..k).map(|j| (sigma2 * inv[j * k + j]).max(0.0).sqrt()).collect();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };

    Ok(InfraRegression {
        outcome: outcome_name.to_string(),
        names,
        coefficients: beta,
        standard_errors,
        r_squared,
        n,
    })
}

/// Assemble one feature row per zone: planted densities plus the observed
/// average car/transit travel times (zones without such trips fall back to
/// the citywide mean).
pub fn zone_feature_rows(zones: &[ZoneSpec], outcomes: &[ZoneOutcome]) -> Result<Vec<[f64; 5]>> {
    if zones.len() != outcomes.len() {
        return Err(Error::Validation("zones and outcomes must align".into()));
    }
    let mean_of = |f: &dyn Fn(&ZoneOutcome) -> Option<f64>| -> f64 {
        let vals: Vec<f64> = outcomes.iter().filter_map(|o| f(o)).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let car_mean = mean_of(&|o: &ZoneOutcome| o.avg_car_time);
    let transit_mean = mean_of(&|o: &ZoneOutcome| o.avg_transit_time);
    Ok(zones
        .iter()
        .zip(outcomes)
        .map(|(z, o)| {
            [
                z.road_density,
                z.bus_density,
                z.subway_density,
                o.avg_car_time.unwrap_or(car_mean),
                o.avg_transit_time.unwrap_or(transit_mean),
            ]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_linear_outcomes_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = [0.4, 1.5, -2.0, 3.0, 0.02, -0.01];
        let rows: Vec<[f64; 5]> = (0..80)
            .map(|_| {
                [
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                    rng.random::<f64>() * 40.0,
                    rng.random::<f64>() * 40.0,
                ]
            })
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| truth[0] + r.iter().zip(&truth[1..]).map(|(x, b)| x * b).sum::<f64>())
            .collect();
        let fit = regress_infrastructure(&rows, &y, "car_reduction").unwrap();
        for (b, t) in fit.coefficients.iter().zip(&truth) {
            assert!((b - t).abs() < 1e-8, "{b} vs {t}");
        }
        assert!(fit.r_squared > 1.0 - 1e-10);
    }

    #[test]
    fn pure_noise_has_negligible_r2() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<[f64; 5]> = (0..500)
            .map(|_| std::array::from_fn(|_| rng.random::<f64>()))
            .collect();
        let y: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        let fit = regress_infrastructure(&rows, &y, "noise").unwrap();
        assert!(fit.r_squared < 0.05, "r2 {}", fit.r_squared);
    }

    #[test]
    fn rank_deficiency_names_the_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<[f64; 5]> = (0..50)
            .map(|_| {
                let a = rng.random::<f64>();
                // subway_density duplicates bus_density: collinear.
                [rng.random::<f64>(), a, a, rng.random::<f64>(), rng.random::<f64>()]
            })
            .collect();
        let y: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let err = regress_infrastructure(&rows, &y, "x").unwrap_err();
        assert!(err.to_string().contains("subway_density"), "{err}");
    }

    #[test]
    fn too_few_rows_error() {
        let rows = vec![[0.0; 5]; 5];
        let y = vec![0.0; 5];
        assert!(regress_infrastructure(&rows, &y, "x").is_err());
    }
}
