//! The limiting diffusion: covariance assembly, Brownian driver sampling,
//! and the regulated limit triple `(Q*, I*, V*)`.
//!
//! The diffusion-scaled free processes converge to a `(J+K)`-dimensional
//! Brownian motion whose covariance is an explicit function of the rates
//! and routing matrices. This module builds that covariance, draws driver
//! paths on a uniform grid, and pushes them through the regulator to
//! produce limit samples that the harness compares against prelimit
//! simulations.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::NetworkParams;
use crate::regulator::{self, RegulatorError, RegulatorInput, RegulatorOutput, SolveMode};
use crate::scaling::{labels, GridPath};

/// Eigenvalues below this are treated as a formula transcription bug
/// rather than harmless rounding of a singular matrix.
pub const EIGEN_FLOOR: f64 = -1e-6;

#[derive(Debug, Error)]
pub enum LimitError {
    #[error("covariance matrix is indefinite: smallest eigenvalue {eigen_min:.6e}")]
    IndefiniteMatrix { eigen_min: f64 },
    #[error("horizon {horizon} is not an integer multiple of step {step}")]
    BadGrid { horizon: f64, step: f64 },
    #[error("bad initial state: {reason}")]
    BadInitial { reason: String },
    #[error(transparent)]
    Regulator(#[from] RegulatorError),
}

/// How the driver covariance is assembled.
///
/// `AsWritten` fills every entry from the displayed formulas. `Projected`
/// additionally conjugates by the centering projector so the all-ones
/// vector lies in the kernel: the prelimit free processes sum to a
/// constant, so a consistent limit must give the summed coordinates zero
/// variance. The two coincide whenever `ones_quadratic` is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovMode {
    #[serde(rename = "as_written")]
    AsWritten,
    #[serde(rename = "consistency_projected")]
    Projected,
}

impl Default for CovMode {
    fn default() -> Self {
        CovMode::Projected
    }
}

impl std::fmt::Display for CovMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CovMode::AsWritten => write!(f, "as_written"),
            CovMode::Projected => write!(f, "consistency_projected"),
        }
    }
}

/// Driver covariance with its square-root factor.
///
/// `sigma` is symmetric (enforced), `factor` satisfies
/// `factor * factor^T == sigma` up to clipping of eigenvalues that
/// rounding pushed slightly negative. `ones_quadratic` always records
/// `1^T sigma 1` of the unprojected matrix for diagnostics.
#[derive(Debug, Clone)]
pub struct CovarianceSpec {
    pub sigma: DMatrix<f64>,
    pub mode: CovMode,
    pub eigen_min: f64,
    pub ones_quadratic: f64,
    pub factor: DMatrix<f64>,
    pub num_single: usize,
    pub num_infinite: usize,
}

impl CovarianceSpec {
    pub fn dim(&self) -> usize {
        self.num_single + self.num_infinite
    }

    /// Row-major copy for serialization.
    pub fn sigma_rows(&self) -> Vec<Vec<f64>> {
        (0..self.sigma.nrows())
            .map(|r| self.sigma.row(r).iter().copied().collect())
            .collect()
    }
}

/// Fills the covariance entry by entry.
///
/// Blocks, with `m_k` the fluid occupancy fractions:
/// queue block diagonal `sum_k q_kj (1 - q_kj) eta_k m_k + mu_j + sum_k q_kj^2 eta_k m_k`,
/// queue block off-diagonal `sum_k q_ki q_kj eta_k m_k`,
/// infinite block diagonal `sum_j p_jk (1 - p_jk) mu_j + eta_k m_k + sum_j p_jk^2 mu_j`,
/// infinite block off-diagonal `sum_j p_jl p_jk mu_j`,
/// cross block `-p_jk mu_j - q_kj eta_k m_k`.
fn as_written_sigma(params: &NetworkParams) -> DMatrix<f64> {
    let (nj, nk) = (params.num_single, params.num_infinite);
    let d = nj + nk;
    let q = &params.route_to_single;
    let p = &params.route_to_infinite;
    // Per-station infinite-server throughput eta_k * m_k.
    let thru: Vec<f64> = (0..nk).map(|k| params.eta[k] * params.loads[k]).collect();

    let mut sigma = DMatrix::zeros(d, d);
    for i in 0..nj {
        for j in 0..nj {
            sigma[(i, j)] = if i == j {
                let mut s = params.mu[j];
                for k in 0..nk {
                    s += q[k][j] * (1.0 - q[k][j]) * thru[k];
                    s += q[k][j] * q[k][j] * thru[k];
                }
                s
            } else {
                (0..nk).map(|k| q[k][i] * q[k][j] * thru[k]).sum()
            };
        }
    }
    for l in 0..nk {
        for k in 0..nk {
            sigma[(nj + l, nj + k)] = if l == k {
                let mut s = thru[k];
                for j in 0..nj {
                    s += p[j][k] * (1.0 - p[j][k]) * params.mu[j];
                    s += p[j][k] * p[j][k] * params.mu[j];
                }
                s
            } else {
                (0..nj).map(|j| p[j][l] * p[j][k] * params.mu[j]).sum()
            };
        }
    }
    for j in 0..nj {
        for k in 0..nk {
            let c = -p[j][k] * params.mu[j] - q[k][j] * thru[k];
            sigma[(j, nj + k)] = c;
            sigma[(nj + k, j)] = c;
        }
    }
    sigma
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Builds the driver covariance and its eigendecomposition square root.
///
/// The factor comes from a symmetric eigendecomposition with negative
/// eigenvalues clipped at zero; the projected matrix is singular by
/// construction, so Cholesky is not an option.
pub fn build_covariance(
    params: &NetworkParams,
    mode: CovMode,
) -> Result<CovarianceSpec, LimitError> {
    let raw = symmetrize(&as_written_sigma(params));
    let d = raw.nrows();
    let ones = DVector::from_element(d, 1.0);
    let ones_quadratic = (ones.transpose() * &raw * &ones)[(0, 0)];
    let centering = DMatrix::identity(d, d) - DMatrix::from_element(d, d, 1.0 / d as f64);

    let sigma = match mode {
        CovMode::AsWritten => raw,
        CovMode::Projected => symmetrize(&(&centering * raw * &centering)),
    };

    let eigen = nalgebra::SymmetricEigen::new(sigma.clone());
    let eigen_min = eigen.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if eigen_min < EIGEN_FLOOR {
        return Err(LimitError::IndefiniteMatrix { eigen_min });
    }
    let roots = DVector::from_iterator(
        d,
        eigen.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    let factor = &eigen.eigenvectors * DMatrix::from_diagonal(&roots);
    // The eigendecomposition only controls 1' L through ||LL' - sigma||,
    // which leaves per-entry kernel leakage near its square root. Passing
    // the factor through the projector pins 1' L at machine precision, so
    // sampled increments never drift off the zero-sum hyperplane, and it
    // perturbs LL' by no more than the existing factorization error.
    let factor = match mode {
        CovMode::AsWritten => factor,
        CovMode::Projected => &centering * factor,
    };

    Ok(CovarianceSpec {
        sigma,
        mode,
        eigen_min,
        ones_quadratic,
        factor,
        num_single: params.num_single,
        num_infinite: params.num_infinite,
    })
}

fn uniform_grid(horizon: f64, step: f64) -> Result<Vec<f64>, LimitError> {
    if !(step > 0.0) || !(horizon >= 0.0) {
        return Err(LimitError::BadGrid { horizon, step });
    }
    let steps = (horizon / step).round();
    if (horizon / step - steps).abs() > 1e-9 {
        return Err(LimitError::BadGrid { horizon, step });
    }
    Ok((0..=steps as usize).map(|i| i as f64 * step).collect())
}

/// Samples the Brownian driver on a uniform grid.
///
/// `path(0) = initial`, then `path(t_{i+1}) = path(t_i) + sqrt(step) * L g_i`
/// with `g_i` i.i.d. standard normal vectors and `L` the stored factor.
/// The first `num_single` coordinates of `initial` must be nonnegative:
/// they are centered queue lengths at time zero.
pub fn sample_bm(
    cov: &CovarianceSpec,
    initial: &[f64],
    horizon: f64,
    step: f64,
    seed: u64,
) -> Result<GridPath, LimitError> {
    let d = cov.dim();
    if initial.len() != d {
        return Err(LimitError::BadInitial {
            reason: format!("expected {} coordinates, got {}", d, initial.len()),
        });
    }
    if initial.iter().any(|x| !x.is_finite()) {
        return Err(LimitError::BadInitial {
            reason: "non-finite coordinate".to_string(),
        });
    }
    if initial[..cov.num_single].iter().any(|&x| x < 0.0) {
        return Err(LimitError::BadInitial {
            reason: "negative queue coordinate".to_string(),
        });
    }

    let grid = uniform_grid(horizon, step)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sqrt_step = step.sqrt();
    let mut current = initial.to_vec();
    let mut values = Vec::with_capacity(grid.len() * d);
    values.extend_from_slice(&current);
    for _ in 1..grid.len() {
        let g = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let inc = &cov.factor * g;
        for c in 0..d {
            current[c] += sqrt_step * inc[c];
        }
        values.extend_from_slice(&current);
    }

    let mut names = labels("xi", cov.num_single);
    names.extend(labels("zeta", cov.num_infinite));
    Ok(GridPath::new(grid, d, values, names).expect("sampled driver is a valid path"))
}

/// Splits a `(J+K)`-dimensional driver into its queue and infinite blocks.
pub fn split_driver(driver: &GridPath, num_single: usize) -> (GridPath, GridPath) {
    assert!(num_single <= driver.dim(), "driver narrower than queue block");
    let num_infinite = driver.dim() - num_single;
    let xi = GridPath::from_fn(driver.grid().to_vec(), labels("xi", num_single), |i, c| {
        driver.value(i, c)
    })
    .expect("queue block of a valid driver");
    let zeta = GridPath::from_fn(
        driver.grid().to_vec(),
        labels("zeta", num_infinite),
        |i, c| driver.value(i, num_single + c),
    )
    .expect("infinite block of a valid driver");
    (xi, zeta)
}

/// Applies the regulator to an explicit `(J+K)`-dimensional driver path.
pub fn regulate_driver(
    params: &NetworkParams,
    driver: &GridPath,
    tol: f64,
) -> Result<RegulatorOutput, LimitError> {
    assert_eq!(
        driver.dim(),
        params.num_single + params.num_infinite,
        "driver dimension must match the network"
    );
    let (xi, zeta) = split_driver(driver, params.num_single);
    let input = RegulatorInput::new(&xi, &zeta, params)?;
    let max_iter = regulator::default_max_iter(params, input.horizon());
    Ok(regulator::regulate(&input, SolveMode::Forward, tol, max_iter)?)
}

/// One sample of the limit triple together with its driver.
#[derive(Debug, Clone)]
pub struct LimitPath {
    pub q_star: GridPath,
    pub i_star: GridPath,
    pub v_star: GridPath,
    pub driver: GridPath,
    pub residual: f64,
    pub iterations: usize,
}

/// Draws a driver and regulates it into `(Q*, I*, V*)`.
pub fn simulate_limit(
    params: &NetworkParams,
    cov: &CovarianceSpec,
    initial: &[f64],
    horizon: f64,
    step: f64,
    seed: u64,
    tol: f64,
) -> Result<LimitPath, LimitError> {
    let driver = sample_bm(cov, initial, horizon, step, seed)?;
    let out = regulate_driver(params, &driver, tol)?;
    Ok(LimitPath {
        q_star: out.x,
        i_star: out.u,
        v_star: out.y,
        driver,
        residual: out.residual,
        iterations: out.iterations,
    })
}

/// Restriction of a path to every `factor`-th grid point.
///
/// For a Brownian driver this is exact coarsening: the coarse path is the
/// same Brownian skeleton evaluated on the coarser grid, so regulating at
/// two resolutions compares the map, not the noise.
pub fn subsample(path: &GridPath, factor: usize) -> GridPath {
    assert!(factor >= 1);
    assert_eq!(
        (path.len() - 1) % factor,
        0,
        "grid does not refine by {}",
        factor
    );
    let grid: Vec<f64> = path.grid().iter().step_by(factor).copied().collect();
    GridPath::from_fn(grid, path.labels().to_vec(), |i, c| {
        path.value(i * factor, c)
    })
    .expect("subsample of a valid path")
}
