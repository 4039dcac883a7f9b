//! Experiment layer: pathwise oracle checks, empirical driver covariance,
//! and weak-convergence comparisons between prelimit simulations and the
//! regulated diffusion limit.
//!
//! Everything here is replication-parallel with per-replication seeds
//! derived from a single master seed, so reports are reproducible bit for
//! bit from their recorded arguments.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::limitproc::{self, build_covariance, CovMode, LimitError};
use crate::netmodel::{NetworkConfig, NetworkParams, HEAVY_TRAFFIC_TOL};
use crate::regulator::{self, RegulatorError, RegulatorInput, SolveMode};
use crate::scaling::{free_processes, scale_path};
use crate::simulator::{simulate_path, InitialState, PathRecord, SimError};

/// Replications below this make the windowed covariance estimate useless.
pub const MIN_COVARIANCE_REPS: usize = 100;

/// Disjoint increment windows taken from each replication.
pub const COVARIANCE_WINDOWS: usize = 10;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("need at least {need} replications, got {got}")]
    InsufficientReplications { got: usize, need: usize },
    #[error("heavy-traffic conditions violated: worst residual {residual:.3e}")]
    HTViolated { residual: f64 },
    #[error("bad experiment: {reason}")]
    BadExperiment { reason: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Limit(#[from] LimitError),
    #[error(transparent)]
    Regulator(#[from] RegulatorError),
}

// Seed blocks keep the experiment phases on disjoint RNG streams; adding
// replications to one phase leaves every other phase untouched.
const BLOCK_PRELIMIT: u64 = 0x10;
const BLOCK_LIMIT: u64 = 0x01;
const BLOCK_COVARIANCE: u64 = 0x02;

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer.
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-replication RNG seed for stream `index` of phase `block`.
pub fn stream_seed(master: u64, block: u64, index: u64) -> u64 {
    let phase = mix(master ^ block.wrapping_mul(0xA076_1D64_78BD_642F));
    mix(phase ^ index.wrapping_mul(0xE703_7ED1_A0B4_28DB))
}

/// Per-coordinate sup distances between a simulated path and the
/// regulator applied to its own free processes.
#[derive(Debug, Clone, Serialize)]
pub struct OracleCheck {
    pub q_sup: Vec<f64>,
    pub i_sup: Vec<f64>,
    pub v_sup: Vec<f64>,
    pub worst: f64,
}

/// Runs the pathwise identity test on one replication: the regulator
/// applied to `(xi, zeta)` must reproduce `(hatQ, hatI, hatV)` up to
/// quadrature error in the occupancy integral.
pub fn oracle_check(record: &PathRecord, tol: f64) -> Result<OracleCheck, HarnessError> {
    let params = &record.params;
    let bundle = scale_path(record);
    let (xi, zeta) = free_processes(record);
    let input = RegulatorInput::new(&xi, &zeta, params)?;
    let max_iter = regulator::default_max_iter(params, input.horizon());
    let out = regulator::regulate(&input, SolveMode::Forward, tol, max_iter)?;

    let sup_gap = |a: &crate::scaling::GridPath, b: &crate::scaling::GridPath, c: usize| {
        let mut worst = 0.0f64;
        for i in 0..a.len() {
            worst = worst.max((a.value(i, c) - b.value(i, c)).abs());
        }
        worst
    };
    let q_sup: Vec<f64> = (0..params.num_single)
        .map(|j| sup_gap(&out.x, &bundle.hat_q, j))
        .collect();
    let i_sup: Vec<f64> = (0..params.num_single)
        .map(|j| sup_gap(&out.u, &bundle.hat_i, j))
        .collect();
    let v_sup: Vec<f64> = (0..params.num_infinite)
        .map(|k| sup_gap(&out.y, &bundle.hat_v, k))
        .collect();
    let worst = q_sup
        .iter()
        .chain(&i_sup)
        .chain(&v_sup)
        .fold(0.0f64, |m, &x| m.max(x));
    Ok(OracleCheck {
        q_sup,
        i_sup,
        v_sup,
        worst,
    })
}

/// Windowed covariance estimate of the free-process increments.
#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalCovariance {
    pub n: u64,
    pub reps: usize,
    pub windows_per_rep: usize,
    /// Window duration; increments are normalized to per-unit-time.
    pub window: f64,
    pub cov: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub dist_as_written: f64,
    pub dist_projected: f64,
    pub validated_mode: CovMode,
    /// Per-unit-time variance of the summed coordinates; conservation
    /// makes every increment sum cancel, so this sits at rounding level.
    pub summed_increment_variance: f64,
}

/// Estimates the driver covariance from disjoint window increments of
/// `(xi, zeta)` across replications and reports which assembled mode the
/// data favors (smaller max-entry distance).
pub fn empirical_covariance(records: &[PathRecord]) -> Result<EmpiricalCovariance, HarnessError> {
    if records.len() < MIN_COVARIANCE_REPS {
        return Err(HarnessError::InsufficientReplications {
            got: records.len(),
            need: MIN_COVARIANCE_REPS,
        });
    }
    let first = &records[0];
    let params = first.params.clone();
    for r in records {
        if r.params != params
            || r.n != first.n
            || r.steps != first.steps
            || r.grid_step != first.grid_step
        {
            return Err(HarnessError::BadExperiment {
                reason: "records mix instances, populations, or grids".to_string(),
            });
        }
    }

    let d = params.num_single + params.num_infinite;
    let cells = first.steps;
    let stride = (cells / COVARIANCE_WINDOWS).max(1);
    let windows_per_rep = cells / stride;
    let window = stride as f64 * first.grid_step;

    // One pass for the mean, one for the centered second moments.
    let mut increments: Vec<Vec<f64>> = Vec::with_capacity(records.len() * windows_per_rep);
    let mut sums = vec![0.0f64; d];
    for r in records {
        let (xi, zeta) = free_processes(r);
        for w in 0..windows_per_rep {
            let (a, b) = (w * stride, (w + 1) * stride);
            let mut inc = Vec::with_capacity(d);
            for j in 0..params.num_single {
                inc.push(xi.value(b, j) - xi.value(a, j));
            }
            for k in 0..params.num_infinite {
                inc.push(zeta.value(b, k) - zeta.value(a, k));
            }
            for c in 0..d {
                sums[c] += inc[c];
            }
            increments.push(inc);
        }
    }
    let count = increments.len() as f64;
    let means: Vec<f64> = sums.iter().map(|s| s / count).collect();

    let mut raw = vec![vec![0.0f64; d]; d];
    let mut summed_sq = 0.0f64;
    let mut summed_mean = 0.0f64;
    for inc in &increments {
        summed_mean += inc.iter().sum::<f64>();
    }
    summed_mean /= count;
    for inc in &increments {
        for a in 0..d {
            for b in 0..d {
                raw[a][b] += (inc[a] - means[a]) * (inc[b] - means[b]);
            }
        }
        let s = inc.iter().sum::<f64>() - summed_mean;
        summed_sq += s * s;
    }
    for row in raw.iter_mut() {
        for x in row.iter_mut() {
            *x /= count - 1.0;
        }
    }
    let summed_increment_variance = summed_sq / (count - 1.0) / window;

    let cov: Vec<Vec<f64>> = raw
        .iter()
        .map(|row| row.iter().map(|x| x / window).collect())
        .collect();
    // Gaussian sampling error of a covariance entry.
    let se: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    ((raw[a][a] * raw[b][b] + raw[a][b] * raw[a][b]) / (count - 1.0)).sqrt()
                        / window
                })
                .collect()
        })
        .collect();

    let dist_to = |mode: CovMode| -> Result<f64, HarnessError> {
        let spec = build_covariance(&params, mode)?;
        let mut worst = 0.0f64;
        for a in 0..d {
            for b in 0..d {
                worst = worst.max((cov[a][b] - spec.sigma[(a, b)]).abs());
            }
        }
        Ok(worst)
    };
    let dist_as_written = dist_to(CovMode::AsWritten)?;
    let dist_projected = dist_to(CovMode::Projected)?;
    let validated_mode = if dist_projected <= dist_as_written {
        CovMode::Projected
    } else {
        CovMode::AsWritten
    };

    Ok(EmpiricalCovariance {
        n: first.n,
        reps: records.len(),
        windows_per_rep,
        window,
        cov,
        se,
        dist_as_written,
        dist_projected,
        validated_mode,
        summed_increment_variance,
    })
}

/// Two-sample Kolmogorov-Smirnov statistic, ties handled by advancing
/// both samples past each distinct value before reading the gap.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "KS needs nonempty samples");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Median by sorting a copy; averages the middle pair on even lengths.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of empty sample");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Counts upward moves larger than `floor` in a discrepancy sequence.
fn inversions(seq: &[f64], floor: f64) -> usize {
    seq.windows(2).filter(|w| w[1] > w[0] + floor).count()
}

/// Mean and variance gaps for one coordinate at one checkpoint time.
#[derive(Debug, Clone, Serialize)]
pub struct MomentGap {
    pub coord: String,
    pub time: f64,
    pub mean_pre: f64,
    pub var_pre: f64,
    pub mean_limit: f64,
    pub var_limit: f64,
}

/// Everything measured at a single population size.
#[derive(Debug, Clone, Serialize)]
pub struct NSummary {
    pub n: u64,
    pub seed_block: u64,
    pub reps: usize,
    /// Median over reps of `sup_t max_j barQ_j`.
    pub fluid_max_q_median: f64,
    /// Median over reps of `sup_t max_k |barV_k|`.
    pub fluid_max_v_median: f64,
    /// Median over reps of unscaled terminal idleness `max_j (T - busy_j(T))`.
    pub idle_unscaled_median: f64,
    /// Median over reps of `sup_t max_j hatI_j`; stays O(1) under the scaling.
    pub idle_scaled_median: f64,
    pub moment_gaps: Vec<MomentGap>,
}

/// One discrepancy family: a statistic tracked across the population list.
#[derive(Debug, Clone, Serialize)]
pub struct KsFamily {
    pub coord: String,
    pub time: f64,
    pub by_n: Vec<f64>,
    pub inversions: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Thresholds {
    pub ht_tol: f64,
    pub ks_last: f64,
    pub max_inversions: usize,
    /// Upward moves smaller than this do not count as inversions.
    pub ks_noise_floor: f64,
    pub moment_noise_floor: f64,
    /// Allowed growth factor of the scaled-idleness median across n.
    pub idle_growth: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportFlags {
    pub ks_monotone: bool,
    pub ks_last_below: bool,
    pub moments_monotone: bool,
    pub fluid_decreasing: bool,
    pub idle_bounded: bool,
    pub all: bool,
}

/// Full output of a convergence experiment; serializes deterministically
/// (fixed field order, no wall-clock metadata).
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub version: String,
    pub network: NetworkConfig,
    pub n_values: Vec<u64>,
    pub reps: usize,
    pub horizon: f64,
    pub grid_step: f64,
    pub master_seed: u64,
    pub checkpoints: Vec<f64>,
    pub cov_mode_compared: CovMode,
    pub cov_mode_source: String,
    pub covariance: EmpiricalCovariance,
    pub per_n: Vec<NSummary>,
    pub ks: Vec<KsFamily>,
    pub thresholds: Thresholds,
    pub flags: ReportFlags,
}

struct RepExtract {
    /// Checkpoint marginals, `cp * dim + coord`, queue block then infinite.
    marginals: Vec<f64>,
    fluid_max_q: f64,
    fluid_max_v: f64,
    idle_unscaled: f64,
    idle_scaled: f64,
}

fn checkpoint_indices(horizon: f64, grid_step: f64) -> Vec<usize> {
    [0.25, 0.5, 1.0]
        .iter()
        .map(|f| (f * horizon / grid_step).round() as usize)
        .collect()
}

fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Simulates prelimit paths across `n_list`, draws matching limit
/// samples, and assembles marginal, covariance, and trend diagnostics.
///
/// `forced_mode` pins the limit covariance; `None` lets the empirical
/// covariance at the largest population pick it. The master seed fans out
/// to per-phase, per-replication streams, so the report is a pure
/// function of its arguments.
pub fn convergence_experiment(
    params: &NetworkParams,
    n_list: &[u64],
    reps: usize,
    horizon: f64,
    grid_step: f64,
    seed: u64,
    forced_mode: Option<CovMode>,
) -> Result<ComparisonReport, HarnessError> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(HarnessError::BadExperiment {
            reason: "population list must be nonempty and strictly increasing".to_string(),
        });
    }
    if reps < 2 {
        return Err(HarnessError::BadExperiment {
            reason: "need at least 2 replications".to_string(),
        });
    }
    let ht = params.heavy_traffic_report(HEAVY_TRAFFIC_TOL);
    if !ht.passes {
        let worst = ht
            .ht1_residuals
            .iter()
            .fold(ht.ht2_residual, |m, &x| m.max(x));
        return Err(HarnessError::HTViolated { residual: worst });
    }

    let (nj, nk) = (params.num_single, params.num_infinite);
    let dim = nj + nk;
    let cps = checkpoint_indices(horizon, grid_step);
    let cp_times: Vec<f64> = cps.iter().map(|&i| i as f64 * grid_step).collect();

    // Phase 1: windowed covariance at the largest population, on a coarse
    // snapshot grid (the free processes are exact at any snapshot time).
    let n_max = *n_list.last().unwrap();
    let cov_reps = reps.clamp(MIN_COVARIANCE_REPS, 500);
    let cov_grid = horizon / (2 * COVARIANCE_WINDOWS) as f64;
    let cov_records: Vec<PathRecord> = (0..cov_reps)
        .into_par_iter()
        .map(|r| {
            let s = stream_seed(seed, BLOCK_COVARIANCE, r as u64);
            simulate_path(params, n_max, horizon, cov_grid, s, &InitialState::Fluid)
        })
        .collect::<Result<_, _>>()?;
    let covariance = empirical_covariance(&cov_records)?;
    drop(cov_records);

    let (cov_mode_compared, cov_mode_source) = match forced_mode {
        Some(mode) => (mode, "forced".to_string()),
        None => (covariance.validated_mode, "validated".to_string()),
    };

    // Phase 2: limit samples; one pool serves every population size.
    let cov_spec = build_covariance(params, cov_mode_compared)?;
    let initial = vec![0.0; dim];
    let limit_marginals: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let s = stream_seed(seed, BLOCK_LIMIT, r as u64);
            let lp =
                limitproc::simulate_limit(params, &cov_spec, &initial, horizon, grid_step, s, 1e-10)?;
            let mut out = Vec::with_capacity(cps.len() * dim);
            for &i in &cps {
                for j in 0..nj {
                    out.push(lp.q_star.value(i, j));
                }
                for k in 0..nk {
                    out.push(lp.v_star.value(i, k));
                }
            }
            Ok::<_, HarnessError>(out)
        })
        .collect::<Result<_, _>>()?;

    // Phase 3: prelimit replications per population size.
    let mut per_n = Vec::with_capacity(n_list.len());
    let mut pre_marginals: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_list.len());
    for (pos, &n) in n_list.iter().enumerate() {
        let block = BLOCK_PRELIMIT + pos as u64;
        let extracts: Vec<RepExtract> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let s = stream_seed(seed, block, r as u64);
                let record = simulate_path(params, n, horizon, grid_step, s, &InitialState::Fluid)?;
                let bundle = scale_path(&record);
                let mut marginals = Vec::with_capacity(cps.len() * dim);
                for &i in &cps {
                    for j in 0..nj {
                        marginals.push(bundle.hat_q.value(i, j));
                    }
                    for k in 0..nk {
                        marginals.push(bundle.hat_v.value(i, k));
                    }
                }
                let last = record.t.len() - 1;
                let idle_unscaled = (0..nj)
                    .map(|j| record.t[last] - record.busy_at(last, j))
                    .fold(0.0f64, f64::max);
                Ok::<_, HarnessError>(RepExtract {
                    marginals,
                    fluid_max_q: bundle.bar_q.sup_norm(),
                    fluid_max_v: bundle.bar_v.sup_norm(),
                    idle_unscaled,
                    idle_scaled: bundle.hat_i.sup_norm(),
                })
            })
            .collect::<Result<_, _>>()?;

        // Reshape to per-statistic samples for KS and moments.
        let per_stat: Vec<Vec<f64>> = (0..cps.len() * dim)
            .map(|s| extracts.iter().map(|e| e.marginals[s]).collect())
            .collect();

        let mut moment_gaps = Vec::with_capacity(cps.len() * dim);
        for (ci, &t) in cp_times.iter().enumerate() {
            for c in 0..dim {
                let pre = &per_stat[ci * dim + c];
                let lim: Vec<f64> = limit_marginals.iter().map(|m| m[ci * dim + c]).collect();
                let (mean_pre, var_pre) = mean_and_var(pre);
                let (mean_limit, var_limit) = mean_and_var(&lim);
                let coord = if c < nj {
                    format!("hatQ_{}", c + 1)
                } else {
                    format!("hatV_{}", c - nj + 1)
                };
                moment_gaps.push(MomentGap {
                    coord,
                    time: t,
                    mean_pre,
                    var_pre,
                    mean_limit,
                    var_limit,
                });
            }
        }

        per_n.push(NSummary {
            n,
            seed_block: block,
            reps,
            fluid_max_q_median: median(
                &extracts.iter().map(|e| e.fluid_max_q).collect::<Vec<_>>(),
            ),
            fluid_max_v_median: median(
                &extracts.iter().map(|e| e.fluid_max_v).collect::<Vec<_>>(),
            ),
            idle_unscaled_median: median(
                &extracts.iter().map(|e| e.idle_unscaled).collect::<Vec<_>>(),
            ),
            idle_scaled_median: median(
                &extracts.iter().map(|e| e.idle_scaled).collect::<Vec<_>>(),
            ),
            moment_gaps,
        });
        pre_marginals.push(per_stat);
    }

    // KS families across n, one per coordinate and checkpoint.
    let ks_noise_floor = (2.0 / reps as f64).sqrt();
    let moment_noise_floor = 3.0 / (reps as f64).sqrt();
    let mut ks = Vec::with_capacity(cps.len() * dim);
    for (ci, &t) in cp_times.iter().enumerate() {
        for c in 0..dim {
            let lim: Vec<f64> = limit_marginals.iter().map(|m| m[ci * dim + c]).collect();
            let by_n: Vec<f64> = pre_marginals
                .iter()
                .map(|per_stat| ks_statistic(&per_stat[ci * dim + c], &lim))
                .collect();
            let coord = if c < nj {
                format!("hatQ_{}", c + 1)
            } else {
                format!("hatV_{}", c - nj + 1)
            };
            ks.push(KsFamily {
                coord,
                time: t,
                inversions: inversions(&by_n, ks_noise_floor),
                by_n,
            });
        }
    }

    let thresholds = Thresholds {
        ht_tol: HEAVY_TRAFFIC_TOL,
        ks_last: 0.1,
        max_inversions: 1,
        ks_noise_floor,
        moment_noise_floor,
        idle_growth: 1.5,
    };

    let multi = n_list.len() > 1;
    let ks_monotone = ks.iter().all(|f| f.inversions <= thresholds.max_inversions);
    let ks_last_below = ks
        .iter()
        .all(|f| *f.by_n.last().unwrap() <= thresholds.ks_last);
    let moments_monotone = (0..cps.len() * dim).all(|s| {
        let gaps: Vec<f64> = per_n
            .iter()
            .map(|p| {
                let g = &p.moment_gaps[s];
                (g.mean_pre - g.mean_limit).abs()
            })
            .collect();
        inversions(&gaps, moment_noise_floor) <= thresholds.max_inversions
    });
    let strictly_decreasing = |f: &dyn Fn(&NSummary) -> f64| -> bool {
        per_n.windows(2).all(|w| f(&w[1]) < f(&w[0]))
    };
    let fluid_decreasing = !multi
        || (strictly_decreasing(&|p| p.fluid_max_q_median)
            && strictly_decreasing(&|p| p.fluid_max_v_median)
            && strictly_decreasing(&|p| p.idle_unscaled_median));
    let idle_bounded = !multi
        || per_n.last().unwrap().idle_scaled_median
            <= thresholds.idle_growth * per_n[0].idle_scaled_median.max(0.1);
    let flags = ReportFlags {
        ks_monotone,
        ks_last_below,
        moments_monotone,
        fluid_decreasing,
        idle_bounded,
        all: ks_monotone && ks_last_below && moments_monotone && fluid_decreasing && idle_bounded,
    };

    Ok(ComparisonReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        network: params.to_config(),
        n_values: n_list.to_vec(),
        reps,
        horizon,
        grid_step,
        master_seed: seed,
        checkpoints: cp_times,
        cov_mode_compared,
        cov_mode_source,
        covariance,
        per_n,
        ks,
        thresholds,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::NetworkConfig;

    fn params(config: &NetworkConfig) -> NetworkParams {
        NetworkParams::from_config(config, false).unwrap()
    }

    fn single_pair() -> NetworkParams {
        params(&NetworkConfig {
            j: 1,
            k: 1,
            mu: vec![1.0],
            eta: vec![1.0],
            p: vec![vec![1.0]],
            q: vec![vec![1.0]],
        })
    }

    fn symmetric_pair() -> NetworkParams {
        params(&NetworkConfig {
            j: 2,
            k: 2,
            mu: vec![1.0, 1.0],
            eta: vec![2.0, 2.0],
            p: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            q: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        })
    }

    #[test]
    fn seeds_are_distinct_across_blocks_and_indices() {
        let mut seen = std::collections::HashSet::new();
        for block in 0..8u64 {
            for index in 0..1000u64 {
                assert!(seen.insert(stream_seed(42, block, index)));
            }
        }
    }

    #[test]
    fn ks_statistic_hand_cases() {
        // Disjoint supports: D = 1.
        assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        // Identical samples: D = 0.
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        // a = {0, 1}, b = {0.5}: after 0 the gap is 1/2, after 0.5 it is
        // 1/2 again, after 1 it closes. D = 1/2.
        assert_eq!(ks_statistic(&[0.0, 1.0], &[0.5]), 0.5);
        // Ties across samples count on both sides simultaneously.
        assert_eq!(
            ks_statistic(&[1.0, 1.0, 2.0], &[1.0, 2.0, 2.0]),
            1.0 / 3.0
        );
    }

    #[test]
    fn ks_statistic_detects_shift_but_not_same_law() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let a: Vec<f64> = (0..2000).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let b: Vec<f64> = (0..2000).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let shifted: Vec<f64> = a.iter().map(|x| x + 0.3).collect();
        assert!(ks_statistic(&a, &b) < 0.05);
        assert!(ks_statistic(&a, &shifted) > 0.25);
    }

    #[test]
    fn median_hand_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn oracle_check_small_path_is_tight() {
        // Short horizon, modest n: the identity is exact in continuous
        // time, so the gap is pure quadrature error from the occupancy
        // integral inside the regulator.
        let p = symmetric_pair();
        let record = simulate_path(&p, 50, 1.0, 1e-3, 99, &InitialState::Fluid).unwrap();
        let check = oracle_check(&record, 1e-10).unwrap();
        assert!(check.worst <= 0.1, "oracle gap {}", check.worst);
        assert_eq!(check.q_sup.len(), 2);
        assert_eq!(check.v_sup.len(), 2);
    }

    #[test]
    fn oracle_error_shrinks_with_grid() {
        let p = single_pair();
        let mut meds = Vec::new();
        for &step in &[4e-3, 1e-3] {
            let mut worsts = Vec::new();
            for rep in 0..20 {
                let record =
                    simulate_path(&p, 50, 2.0, step, 7000 + rep, &InitialState::Fluid).unwrap();
                worsts.push(oracle_check(&record, 1e-10).unwrap().worst);
            }
            meds.push(median(&worsts));
        }
        assert!(
            meds[1] < meds[0],
            "medians did not shrink with the grid: {:?}",
            meds
        );
    }

    #[test]
    fn empirical_covariance_needs_replications() {
        let p = single_pair();
        let records: Vec<PathRecord> = (0..3)
            .map(|r| simulate_path(&p, 50, 1.0, 0.1, r, &InitialState::Fluid).unwrap())
            .collect();
        match empirical_covariance(&records) {
            Err(HarnessError::InsufficientReplications { got: 3, need }) => {
                assert_eq!(need, MIN_COVARIANCE_REPS)
            }
            other => panic!("unexpected: {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn empirical_covariance_rejects_mixed_records() {
        let p = single_pair();
        let mut records: Vec<PathRecord> = (0..MIN_COVARIANCE_REPS as u64)
            .map(|r| simulate_path(&p, 50, 1.0, 0.1, r, &InitialState::Fluid).unwrap())
            .collect();
        records[7] = simulate_path(&p, 60, 1.0, 0.1, 7, &InitialState::Fluid).unwrap();
        assert!(matches!(
            empirical_covariance(&records),
            Err(HarnessError::BadExperiment { .. })
        ));
    }

    #[test]
    fn empirical_covariance_matches_hand_matrix() {
        // J=1, K=1, mu = eta = 1: the assembled covariance is
        // [[2, -2], [-2, 2]] and the data should sit within a few
        // standard errors at n = 400.
        let p = single_pair();
        let records: Vec<PathRecord> = (0..200u64)
            .into_par_iter()
            .map(|r| {
                simulate_path(&p, 400, 10.0, 0.5, 30_000 + r, &InitialState::Fluid).unwrap()
            })
            .collect();
        let est = empirical_covariance(&records).unwrap();
        let want = [[2.0, -2.0], [-2.0, 2.0]];
        for a in 0..2 {
            for b in 0..2 {
                assert!(
                    (est.cov[a][b] - want[a][b]).abs() <= 5.0 * est.se[a][b],
                    "entry ({}, {}): {} vs {} (se {})",
                    a,
                    b,
                    est.cov[a][b],
                    want[a][b],
                    est.se[a][b]
                );
            }
        }
        assert!(est.summed_increment_variance <= 1e-9);
        assert_eq!(est.windows_per_rep, COVARIANCE_WINDOWS);
        assert_eq!(est.reps, 200);
    }

    #[test]
    fn convergence_experiment_is_deterministic() {
        let p = single_pair();
        let run = || {
            convergence_experiment(&p, &[25], 100, 2.0, 0.05, 11, Some(CovMode::Projected))
                .unwrap()
        };
        let a = serde_json::to_string(&run()).unwrap();
        let b = serde_json::to_string(&run()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn convergence_experiment_rejects_bad_inputs() {
        let p = single_pair();
        assert!(matches!(
            convergence_experiment(&p, &[], 10, 1.0, 0.1, 1, None),
            Err(HarnessError::BadExperiment { .. })
        ));
        assert!(matches!(
            convergence_experiment(&p, &[100, 50], 10, 1.0, 0.1, 1, None),
            Err(HarnessError::BadExperiment { .. })
        ));

        let bad = params(&NetworkConfig {
            j: 1,
            k: 1,
            mu: vec![1.0],
            eta: vec![2.0],
            p: vec![vec![1.0]],
            q: vec![vec![1.0]],
        });
        assert!(matches!(
            convergence_experiment(&bad, &[25, 50], 10, 1.0, 0.1, 1, None),
            Err(HarnessError::HTViolated { .. })
        ));
    }

    #[test]
    fn convergence_report_fields_are_coherent() {
        let p = single_pair();
        let report =
            convergence_experiment(&p, &[25, 50], 120, 2.0, 0.05, 3, None).unwrap();
        assert_eq!(report.n_values, vec![25, 50]);
        assert_eq!(report.per_n.len(), 2);
        assert_eq!(report.checkpoints, vec![0.5, 1.0, 2.0]);
        // 2 coordinates, 3 checkpoints.
        assert_eq!(report.ks.len(), 6);
        for fam in &report.ks {
            assert_eq!(fam.by_n.len(), 2);
            for &d in &fam.by_n {
                assert!((0.0..=1.0).contains(&d));
            }
        }
        assert_eq!(report.covariance.n, 50);
        assert_eq!(report.cov_mode_source, "validated");
        // The summed free coordinates are conserved pathwise, so the
        // projected mode must win the adjudication.
        assert_eq!(report.cov_mode_compared, CovMode::Projected);
        assert!(report.covariance.summed_increment_variance <= 1e-9);
    }
}
