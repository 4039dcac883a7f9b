//! Network description and validation.
//!
//! A network has `J` single-server stations and `K` infinite-server
//! stations. Jobs leaving single-server station `j` move to
//! infinite-server station `k` with probability `P[j][k]`; jobs leaving
//! infinite-server station `k` move to single-server station `j` with
//! probability `Q[k][j]`. Single-server rates `mu` are per-station (they
//! are sped up by the population scale `n` at simulation time);
//! infinite-server rates `eta` are per-job.
//!
//! The derived load `m_k = eta_k^-1 * sum_j mu_j P[j][k]` is the fluid
//! occupancy fraction of infinite-server station `k`. Critical loading
//! holds when the single-server work is balanced (`sum_k sum_i mu_i
//! P[i][k] Q[k][j] = mu_j` for every `j`) and the infinite-server layer
//! absorbs the whole population (`sum_k m_k = 1`).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row sums of routing matrices must match 1 to this tolerance unless
/// renormalization is requested.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Default tolerance for the critical-loading (heavy-traffic) residuals.
pub const HEAVY_TRAFFIC_TOL: f64 = 1e-9;

/// Raw network description as found in a JSON config file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkConfig {
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub mu: Vec<f64>,
    pub eta: Vec<f64>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{field} has length {found}, expected {expected}")]
    DimensionMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{field}[{index}] = {value} must be positive and finite")]
    NonPositiveRate {
        field: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{matrix} row {row} sums to {sum}, not 1 (renormalization off)")]
    NonStochasticRow {
        matrix: &'static str,
        row: usize,
        sum: f64,
    },
    #[error("{matrix}[{row}][{col}] = {value} must lie in [0, 1] and be finite")]
    InvalidProbability {
        matrix: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error("network must have at least one station of each kind")]
    EmptyNetwork,
}

/// Validated network parameters with derived quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub num_single: usize,
    pub num_infinite: usize,
    /// Per-station single-server rates, scaled by `n` at simulation time.
    pub mu: Vec<f64>,
    /// Per-job infinite-server rates.
    pub eta: Vec<f64>,
    /// Routing single -> infinite, `num_single` rows of length `num_infinite`.
    pub route_to_infinite: Vec<Vec<f64>>,
    /// Routing infinite -> single, `num_infinite` rows of length `num_single`.
    pub route_to_single: Vec<Vec<f64>>,
    /// Fluid occupancy fractions `m_k` of the infinite-server stations.
    pub loads: Vec<f64>,
    pub eta_max: f64,
}

/// Residuals of the critical-loading conditions.
#[derive(Debug, Clone, Serialize)]
pub struct HeavyTrafficReport {
    /// Per single-server station: `|sum_k sum_i mu_i P[i][k] Q[k][j] - mu_j|`.
    pub ht1_residuals: Vec<f64>,
    /// `|sum_k m_k - 1|`.
    pub ht2_residual: f64,
    pub tol: f64,
    pub passes: bool,
}

fn check_rates(field: &'static str, rates: &[f64]) -> Result<(), ModelError> {
    for (i, &r) in rates.iter().enumerate() {
        if !(r.is_finite() && r > 0.0) {
            return Err(ModelError::NonPositiveRate {
                field,
                index: i,
                value: r,
            });
        }
    }
    Ok(())
}

fn check_matrix(
    matrix: &'static str,
    rows: &mut [Vec<f64>],
    nrows: usize,
    ncols: usize,
    renormalize: bool,
) -> Result<(), ModelError> {
    if rows.len() != nrows {
        return Err(ModelError::DimensionMismatch {
            field: matrix,
            expected: nrows,
            found: rows.len(),
        });
    }
    for (r, row) in rows.iter_mut().enumerate() {
        if row.len() != ncols {
            return Err(ModelError::DimensionMismatch {
                field: matrix,
                expected: ncols,
                found: row.len(),
            });
        }
        for (c, &x) in row.iter().enumerate() {
            if !(x.is_finite() && (0.0..=1.0).contains(&x)) {
                return Err(ModelError::InvalidProbability {
                    matrix,
                    row: r,
                    col: c,
                    value: x,
                });
            }
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            if renormalize && sum > 0.0 {
                for x in row.iter_mut() {
                    *x /= sum;
                }
            } else {
                return Err(ModelError::NonStochasticRow {
                    matrix,
                    row: r,
                    sum,
                });
            }
        }
    }
    Ok(())
}

impl NetworkParams {
    /// Validates a raw config and computes the derived loads.
    ///
    /// With `renormalize` set, routing rows whose sums drift from 1 by
    /// more than [`STOCHASTIC_TOL`] are rescaled by their sum; otherwise
    /// such rows are rejected.
    pub fn from_config(config: &NetworkConfig, renormalize: bool) -> Result<Self, ModelError> {
        let (j, k) = (config.j, config.k);
        if j == 0 || k == 0 {
            return Err(ModelError::EmptyNetwork);
        }
        if config.mu.len() != j {
            return Err(ModelError::DimensionMismatch {
                field: "mu",
                expected: j,
                found: config.mu.len(),
            });
        }
        if config.eta.len() != k {
            return Err(ModelError::DimensionMismatch {
                field: "eta",
                expected: k,
                found: config.eta.len(),
            });
        }
        check_rates("mu", &config.mu)?;
        check_rates("eta", &config.eta)?;
        let mut p = config.p.clone();
        let mut q = config.q.clone();
        check_matrix("P", &mut p, j, k, renormalize)?;
        check_matrix("Q", &mut q, k, j, renormalize)?;

        let loads: Vec<f64> = (0..k)
            .map(|kk| {
                let inflow: f64 = (0..j).map(|jj| config.mu[jj] * p[jj][kk]).sum();
                inflow / config.eta[kk]
            })
            .collect();
        let eta_max = config.eta.iter().cloned().fold(f64::MIN, f64::max);

        Ok(NetworkParams {
            num_single: j,
            num_infinite: k,
            mu: config.mu.clone(),
            eta: config.eta.clone(),
            route_to_infinite: p,
            route_to_single: q,
            loads,
            eta_max,
        })
    }

    /// Round-trips the validated parameters back into config form.
    pub fn to_config(&self) -> NetworkConfig {
        NetworkConfig {
            j: self.num_single,
            k: self.num_infinite,
            mu: self.mu.clone(),
            eta: self.eta.clone(),
            p: self.route_to_infinite.clone(),
            q: self.route_to_single.clone(),
        }
    }

    /// Residuals of the two critical-loading conditions at tolerance `tol`.
    ///
    /// The report never rejects the network; callers that require
    /// critical loading (the convergence experiment) check `passes`.
    pub fn heavy_traffic_report(&self, tol: f64) -> HeavyTrafficReport {
        let (j, k) = (self.num_single, self.num_infinite);
        // Flow into infinite-server station k when all single servers are busy.
        let inflow: Vec<f64> = (0..k)
            .map(|kk| {
                (0..j)
                    .map(|jj| self.mu[jj] * self.route_to_infinite[jj][kk])
                    .sum()
            })
            .collect();
        let ht1_residuals: Vec<f64> = (0..j)
            .map(|jj| {
                let back: f64 = (0..k)
                    .map(|kk| inflow[kk] * self.route_to_single[kk][jj])
                    .sum();
                (back - self.mu[jj]).abs()
            })
            .collect();
        let ht2_residual = (self.loads.iter().sum::<f64>() - 1.0).abs();
        let passes =
            ht2_residual <= tol && ht1_residuals.iter().all(|&r| r <= tol);
        HeavyTrafficReport {
            ht1_residuals,
            ht2_residual,
            tol,
            passes,
        }
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("no critically loaded routing found for the drawn (P, mu) after {retries} retries")]
    NoAdmissibleRouting { retries: usize },
}

/// Draws a random network for tests.
///
/// Rows of both routing matrices are uniform draws normalized to sum 1
/// and `mu` is uniform on [0.5, 2]. With `critical` set, `eta` is solved
/// so each load is `1/K`, and the infinite->single routing is projected
/// onto the affine set satisfying the flow-balance condition. The
/// projection can push entries outside [0, 1]; the draw is then blended
/// toward the always-admissible routing proportional to `mu` and retried.
/// Not every random `(P, mu)` pair admits a nearby balanced routing, so
/// this can fail (in practice the blend converges long before the retry
/// budget).
pub fn random_network<R: Rng>(
    j: usize,
    k: usize,
    critical: bool,
    rng: &mut R,
) -> Result<NetworkParams, GenError> {
    assert!(j > 0 && k > 0);
    let draw_row = |rng: &mut R, len: usize| -> Vec<f64> {
        let mut row: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
        row
    };
    let mu: Vec<f64> = (0..j).map(|_| rng.random_range(0.5..2.0)).collect();
    let p: Vec<Vec<f64>> = (0..j).map(|_| draw_row(rng, k)).collect();

    if !critical {
        let eta: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..2.0)).collect();
        let q: Vec<Vec<f64>> = (0..k).map(|_| draw_row(rng, j)).collect();
        let config = NetworkConfig { j, k, mu, eta, p, q };
        return Ok(NetworkParams::from_config(&config, true).expect("generated rows are valid"));
    }

    // inflow[k] = sum_j mu_j P[j][k]; eta_k = K * inflow[k] makes every
    // load exactly 1/K.
    let inflow: Vec<f64> = (0..k)
        .map(|kk| (0..j).map(|jj| mu[jj] * p[jj][kk]).sum())
        .collect();
    let eta: Vec<f64> = inflow.iter().map(|a| a * k as f64).collect();
    let total_mu: f64 = mu.iter().sum();

    // Flow balance requires sum_k Q[k][j] * inflow[k] = mu_j. The routing
    // with every row proportional to mu satisfies it for any (P, mu);
    // random draws are corrected by spreading each column's deficit
    // across rows with weight 1/(K * inflow[k]), which preserves row sums.
    let mut blend = 1.0;
    for attempt in 0..60 {
        let q0: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let row = draw_row(rng, j);
                (0..j)
                    .map(|jj| blend * row[jj] + (1.0 - blend) * mu[jj] / total_mu)
                    .collect()
            })
            .collect();
        let mut q = q0;
        for jj in 0..j {
            let deficit = mu[jj] - (0..k).map(|kk| q[kk][jj] * inflow[kk]).sum::<f64>();
            for kk in 0..k {
                q[kk][jj] += deficit / (k as f64 * inflow[kk]);
            }
        }
        let admissible = q
            .iter()
            .all(|row| row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        if admissible {
            let config = NetworkConfig { j, k, mu, eta, p, q };
            return Ok(
                NetworkParams::from_config(&config, true).expect("projected rows are valid")
            );
        }
        if attempt % 3 == 2 {
            blend *= 0.5;
        }
    }
    Err(GenError::NoAdmissibleRouting { retries: 60 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_pair() -> NetworkConfig {
        NetworkConfig {
            j: 1,
            k: 1,
            mu: vec![1.0],
            eta: vec![1.0],
            p: vec![vec![1.0]],
            q: vec![vec![1.0]],
        }
    }

    fn symmetric() -> NetworkConfig {
        NetworkConfig {
            j: 2,
            k: 2,
            mu: vec![1.0, 1.0],
            eta: vec![2.0, 2.0],
            p: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            q: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        }
    }

    #[test]
    fn loads_single_pair() {
        let params = NetworkParams::from_config(&single_pair(), false).unwrap();
        assert_eq!(params.loads, vec![1.0]);
        assert_eq!(params.eta_max, 1.0);
    }

    #[test]
    fn loads_symmetric() {
        let params = NetworkParams::from_config(&symmetric(), false).unwrap();
        assert_eq!(params.loads, vec![0.5, 0.5]);
        let report = params.heavy_traffic_report(HEAVY_TRAFFIC_TOL);
        assert!(report.passes);
        assert_eq!(report.ht2_residual, 0.0);
        assert_eq!(report.ht1_residuals, vec![0.0, 0.0]);
    }

    #[test]
    fn unbalanced_eta_fails_load_condition() {
        let mut config = symmetric();
        config.eta = vec![2.0, 4.0];
        let params = NetworkParams::from_config(&config, false).unwrap();
        // loads become (1/2, 1/4), so the total misses 1 by exactly 1/4.
        let report = params.heavy_traffic_report(1e-9);
        assert!((report.ht2_residual - 0.25).abs() < 1e-15);
        assert!(!report.passes);
    }

    #[test]
    fn rejects_non_stochastic_row_without_renormalize() {
        let mut config = single_pair();
        config.p = vec![vec![0.9]];
        let err = NetworkParams::from_config(&config, false).unwrap_err();
        assert!(matches!(err, ModelError::NonStochasticRow { matrix: "P", row: 0, .. }));
    }

    #[test]
    fn renormalizes_rows_on_request() {
        let mut config = symmetric();
        config.q = vec![vec![0.3, 0.3], vec![0.2, 0.6]];
        let params = NetworkParams::from_config(&config, true).unwrap();
        for row in &params.route_to_single {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
        }
        for (row, want) in params.route_to_single.iter().zip([[0.5, 0.5], [0.25, 0.75]]) {
            for (got, want) in row.iter().zip(want) {
                assert!((got - want).abs() <= 1e-15, "{} vs {}", got, want);
            }
        }
    }

    #[test]
    fn rejects_bad_dimensions_and_rates() {
        let mut config = symmetric();
        config.mu = vec![1.0];
        assert!(matches!(
            NetworkParams::from_config(&config, false).unwrap_err(),
            ModelError::DimensionMismatch { field: "mu", .. }
        ));

        let mut config = symmetric();
        config.eta[1] = 0.0;
        assert!(matches!(
            NetworkParams::from_config(&config, false).unwrap_err(),
            ModelError::NonPositiveRate { field: "eta", index: 1, .. }
        ));

        let mut config = symmetric();
        config.p[0] = vec![1.5, -0.5];
        assert!(matches!(
            NetworkParams::from_config(&config, false).unwrap_err(),
            ModelError::InvalidProbability { matrix: "P", .. }
        ));
    }

    #[test]
    fn build_is_deterministic() {
        let a = NetworkParams::from_config(&symmetric(), false).unwrap();
        let b = NetworkParams::from_config(&symmetric(), false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rescaling_eta_by_total_load_restores_balance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let params = random_network(3, 2, false, &mut rng).unwrap();
            let total: f64 = params.loads.iter().sum();
            let mut config = params.to_config();
            for e in config.eta.iter_mut() {
                *e *= total;
            }
            let rescaled = NetworkParams::from_config(&config, false).unwrap();
            let report = rescaled.heavy_traffic_report(1e-12);
            assert!(report.ht2_residual <= 1e-12, "ht2 = {}", report.ht2_residual);
        }
    }

    #[test]
    fn generator_critical_instances_pass_heavy_traffic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (j, k) in [(1, 1), (2, 2), (3, 2), (2, 4)] {
            for _ in 0..25 {
                let params = random_network(j, k, true, &mut rng).unwrap();
                let report = params.heavy_traffic_report(HEAVY_TRAFFIC_TOL);
                assert!(
                    report.passes,
                    "J={} K={}: ht1={:?} ht2={}",
                    j, k, report.ht1_residuals, report.ht2_residual
                );
            }
        }
    }
}
