//! Fluid and diffusion rescalings of simulated paths.
//!
//! On the diffusion scale queues are divided by `sqrt(n)`, occupancies
//! are centered at their fluid point `n * m_k` before division, and the
//! idleness of each single-server station is blown up by `sqrt(n)`. The
//! "free" processes are the martingale parts of the rescaled dynamics:
//! what remains of the queue and occupancy once the regulation terms
//! (idleness and occupancy feedback) are stripped. They are extracted
//! through exact counter identities, so apart from the final floating
//! point sums there is no discretization error anywhere in this module.

use crate::simulator::PathRecord;
use thiserror::Error;

/// Largest tolerated deviation from uniform grid spacing.
pub const GRID_SPACING_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid must contain at least one point")]
    EmptyGrid,
    #[error("grid spacing at index {index} is {found}, expected {expected}")]
    NonUniformSpacing {
        index: usize,
        expected: f64,
        found: f64,
    },
    #[error("value at grid index {index}, coordinate {coord} is not finite")]
    NonFiniteValue { index: usize, coord: usize },
    #[error("{got} values for {points} grid points of dimension {dim}")]
    ShapeMismatch {
        got: usize,
        points: usize,
        dim: usize,
    },
}

/// A vector-valued path sampled on a uniform time grid.
///
/// Values are stored time-major: coordinate `c` at grid index `i` sits
/// at `i * dim + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    grid: Vec<f64>,
    values: Vec<f64>,
    dim: usize,
    labels: Vec<String>,
}

impl GridPath {
    pub fn new(
        grid: Vec<f64>,
        dim: usize,
        values: Vec<f64>,
        labels: Vec<String>,
    ) -> Result<Self, GridError> {
        if grid.is_empty() {
            return Err(GridError::EmptyGrid);
        }
        if values.len() != grid.len() * dim || labels.len() != dim {
            return Err(GridError::ShapeMismatch {
                got: values.len(),
                points: grid.len(),
                dim,
            });
        }
        if grid.len() > 1 {
            let step = grid[1] - grid[0];
            if !(step > 0.0) || !step.is_finite() || !grid[0].is_finite() {
                return Err(GridError::NonUniformSpacing {
                    index: 1,
                    expected: f64::NAN,
                    found: step,
                });
            }
            for i in 1..grid.len() {
                let found = grid[i] - grid[i - 1];
                if (found - step).abs() > GRID_SPACING_TOL {
                    return Err(GridError::NonUniformSpacing {
                        index: i,
                        expected: step,
                        found,
                    });
                }
            }
        }
        for (pos, &x) in values.iter().enumerate() {
            if !x.is_finite() {
                return Err(GridError::NonFiniteValue {
                    index: pos / dim,
                    coord: pos % dim,
                });
            }
        }
        Ok(GridPath {
            grid,
            values,
            dim,
            labels,
        })
    }

    /// Builds a path by evaluating `f(grid index, coordinate)`.
    pub fn from_fn(
        grid: Vec<f64>,
        labels: Vec<String>,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, GridError> {
        let dim = labels.len();
        let mut values = Vec::with_capacity(grid.len() * dim);
        for i in 0..grid.len() {
            for c in 0..dim {
                values.push(f(i, c));
            }
        }
        GridPath::new(grid, dim, values, labels)
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Grid spacing; 0 for a single-point grid.
    pub fn step(&self) -> f64 {
        if self.grid.len() > 1 {
            self.grid[1] - self.grid[0]
        } else {
            0.0
        }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn value(&self, i: usize, c: usize) -> f64 {
        self.values[i * self.dim + c]
    }

    /// All coordinates at grid index `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(move |i| self.value(i, c))
    }

    /// Largest absolute coordinate difference against another path on
    /// the same grid shape.
    pub fn sup_distance(&self, other: &GridPath) -> f64 {
        assert_eq!(self.dim, other.dim);
        assert_eq!(self.len(), other.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

pub fn labels(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{}_{}", prefix, i)).collect()
}

/// Every rescaled view of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledBundle {
    pub n: u64,
    /// Diffusion-scaled queues `q_j / sqrt(n)`.
    pub hat_q: GridPath,
    /// Centered occupancies `(v_k - n m_k) / sqrt(n)`.
    pub hat_v: GridPath,
    /// Scaled idleness `sqrt(n) (t - T_j(t))`.
    pub hat_i: GridPath,
    /// Scaled busy time `sqrt(n) T_j(t)`.
    pub hat_t: GridPath,
    /// Fluid queues `q_j / n`.
    pub bar_q: GridPath,
    /// Fluid-centered occupancies `(v_k - n m_k) / n`.
    pub bar_v: GridPath,
    /// Fluid occupancies `v_k / n`.
    pub barbar_v: GridPath,
    /// Diffusion-scaled free queue component.
    pub xi: GridPath,
    /// Diffusion-scaled free occupancy component.
    pub zeta: GridPath,
    /// Fluid-scaled free components, `xi / sqrt(n)` and `zeta / sqrt(n)`.
    pub bar_xi: GridPath,
    pub bar_zeta: GridPath,
}

fn grid_of(record: &PathRecord) -> Vec<f64> {
    record.t.clone()
}

/// Extracts the free processes from the exact event counters.
///
/// The queue component at station `j` collects its initial value, the
/// centered routing counts into `j`, the centered departure count (the
/// busy-time compensator `n mu_j T_j` makes it a martingale), and the
/// routed compensation of the infinite-server departures:
///
/// ```text
/// xi_j(t) = n^{-1/2} [ q_j(0) + sum_k (Psi[k][j] - Q[k][j] F_k)
///                      - (D_j - n mu_j T_j)
///                      + sum_k Q[k][j] (F_k - eta_k intV_k) ]
/// ```
///
/// and symmetrically for the occupancy component. All inputs are exact
/// event counts or exactly accumulated integrals, so the identities the
/// paths satisfy hold to plain summation roundoff.
///
/// Panics if the record violates the [`GridPath`] invariants. Records
/// from `simulate_path` or the CSV readers inside the io envelope
/// always satisfy them.
pub fn free_processes(record: &PathRecord) -> (GridPath, GridPath) {
    let p = &record.params;
    let (nj, nk) = (p.num_single, p.num_infinite);
    let n = record.n as f64;
    let root = n.sqrt();

    let xi = GridPath::from_fn(grid_of(record), labels("xi", nj), |i, j| {
        let mut acc = record.q_at(0, j) as f64;
        for k in 0..nk {
            let fk = record.departures_infinite_at(i, k) as f64;
            let qkj = p.route_to_single[k][j];
            acc += record.route_is_at(i, k, j) as f64 - qkj * fk;
            acc += qkj * (fk - p.eta[k] * record.occupancy_integral_at(i, k));
        }
        acc -= record.departures_single_at(i, j) as f64 - n * p.mu[j] * record.busy_at(i, j);
        acc / root
    })
    .expect("simulator grids are uniform and counters finite");

    let zeta = GridPath::from_fn(grid_of(record), labels("zeta", nk), |i, k| {
        let mut acc = record.v_at(0, k) as f64 - n * p.loads[k];
        for j in 0..nj {
            let dj = record.departures_single_at(i, j) as f64;
            let pjk = p.route_to_infinite[j][k];
            acc += record.route_si_at(i, j, k) as f64 - pjk * dj;
            acc += pjk * (dj - n * p.mu[j] * record.busy_at(i, j));
        }
        acc -= record.departures_infinite_at(i, k) as f64
            - p.eta[k] * record.occupancy_integral_at(i, k);
        acc / root
    })
    .expect("simulator grids are uniform and counters finite");

    (xi, zeta)
}

/// Exact running integral of the diffusion-scaled occupancy,
/// `n^{-1/2} (intV_k(t) - n m_k t)`, needed to verify the queue
/// reconstruction identity without quadrature error.
pub fn centered_occupancy_integral(record: &PathRecord) -> GridPath {
    let p = &record.params;
    let n = record.n as f64;
    GridPath::from_fn(
        grid_of(record),
        labels("int_hatV", p.num_infinite),
        |i, k| (record.occupancy_integral_at(i, k) - n * p.loads[k] * record.t[i]) / n.sqrt(),
    )
    .expect("simulator grids are uniform and counters finite")
}

/// Computes every rescaled view of a replication.
///
/// Panics under the same conditions as [`free_processes`].
pub fn scale_path(record: &PathRecord) -> ScaledBundle {
    let p = &record.params;
    let (nj, nk) = (p.num_single, p.num_infinite);
    let n = record.n as f64;
    let root = n.sqrt();

    let build = |prefix: &str, count: usize, f: &dyn Fn(usize, usize) -> f64| {
        GridPath::from_fn(grid_of(record), labels(prefix, count), f)
            .expect("simulator grids are uniform and counters finite")
    };

    let hat_q = build("hatQ", nj, &|i, j| record.q_at(i, j) as f64 / root);
    let hat_v = build("hatV", nk, &|i, k| {
        (record.v_at(i, k) as f64 - n * p.loads[k]) / root
    });
    let hat_i = build("hatI", nj, &|i, j| {
        root * (record.t[i] - record.busy_at(i, j))
    });
    let hat_t = build("hatT", nj, &|i, j| root * record.busy_at(i, j));
    let bar_q = build("barQ", nj, &|i, j| record.q_at(i, j) as f64 / n);
    let bar_v = build("barV", nk, &|i, k| {
        (record.v_at(i, k) as f64 - n * p.loads[k]) / n
    });
    let barbar_v = build("barbarV", nk, &|i, k| record.v_at(i, k) as f64 / n);

    let (xi, zeta) = free_processes(record);
    let bar_xi = GridPath::from_fn(grid_of(record), labels("bar_xi", nj), |i, j| {
        xi.value(i, j) / root
    })
    .expect("derived from a valid path");
    let bar_zeta = GridPath::from_fn(grid_of(record), labels("bar_zeta", nk), |i, k| {
        zeta.value(i, k) / root
    })
    .expect("derived from a valid path");

    ScaledBundle {
        n: record.n,
        hat_q,
        hat_v,
        hat_i,
        hat_t,
        bar_q,
        bar_v,
        barbar_v,
        xi,
        zeta,
        bar_xi,
        bar_zeta,
    }
}

/// Largest deviation over the grid of `sum_j xi_j + sum_k zeta_k` from
/// its exactly conserved initial value.
pub fn mass_conservation_defect(xi: &GridPath, zeta: &GridPath) -> f64 {
    let initial: f64 = (0..xi.dim()).map(|j| xi.value(0, j)).sum::<f64>()
        + (0..zeta.dim()).map(|k| zeta.value(0, k)).sum::<f64>();
    (0..xi.len())
        .map(|i| {
            let s: f64 = (0..xi.dim()).map(|j| xi.value(i, j)).sum::<f64>()
                + (0..zeta.dim()).map(|k| zeta.value(i, k)).sum::<f64>();
            (s - initial).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest deviation over the grid of the queue and occupancy
/// reconstruction identities. Both express the rescaled state at time t
/// through the free processes and the regulation terms:
///
/// ```text
/// hatQ_j = xi_j + sum_k Q[k][j] eta_k int_hatV_k + mu_j hatI_j
/// hatV_k = zeta_k - eta_k int_hatV_k - sum_j P[j][k] mu_j hatI_j
/// ```
///
/// The queue identity uses the flow-balance condition, so its defect
/// also reflects any critical-loading residual of the parameters.
pub fn reconstruction_defect(record: &PathRecord, bundle: &ScaledBundle) -> f64 {
    let p = &record.params;
    let (nj, nk) = (p.num_single, p.num_infinite);
    let int_hat_v = centered_occupancy_integral(record);
    let mut worst = 0.0f64;
    for i in 0..bundle.hat_q.len() {
        for j in 0..nj {
            let feedback: f64 = (0..nk)
                .map(|k| p.route_to_single[k][j] * p.eta[k] * int_hat_v.value(i, k))
                .sum();
            let lhs = bundle.hat_q.value(i, j);
            let rhs = bundle.xi.value(i, j) + feedback + p.mu[j] * bundle.hat_i.value(i, j);
            worst = worst.max((lhs - rhs).abs());
        }
        for k in 0..nk {
            let pushback: f64 = (0..nj)
                .map(|j| p.route_to_infinite[j][k] * p.mu[j] * bundle.hat_i.value(i, j))
                .sum();
            let lhs = bundle.hat_v.value(i, k);
            let rhs =
                bundle.zeta.value(i, k) - p.eta[k] * int_hat_v.value(i, k) - pushback;
            worst = worst.max((lhs - rhs).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{random_network, NetworkConfig, NetworkParams};
    use crate::simulator::{simulate_path, InitialState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_pair() -> NetworkParams {
        NetworkParams::from_config(
            &NetworkConfig {
                j: 1,
                k: 1,
                mu: vec![1.0],
                eta: vec![1.0],
                p: vec![vec![1.0]],
                q: vec![vec![1.0]],
            },
            false,
        )
        .unwrap()
    }

    fn symmetric() -> NetworkParams {
        NetworkParams::from_config(
            &NetworkConfig {
                j: 2,
                k: 2,
                mu: vec![1.0, 1.0],
                eta: vec![2.0, 2.0],
                p: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
                q: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            },
            false,
        )
        .unwrap()
    }

    #[test]
    fn grid_path_rejects_bad_shapes() {
        assert_eq!(
            GridPath::new(vec![], 1, vec![], vec!["a".into()]).unwrap_err(),
            GridError::EmptyGrid
        );
        assert!(matches!(
            GridPath::new(vec![0.0, 0.1, 0.3], 1, vec![0.0; 3], vec!["a".into()]),
            Err(GridError::NonUniformSpacing { index: 2, .. })
        ));
        assert!(matches!(
            GridPath::new(vec![0.0, 0.1], 1, vec![0.0, f64::NAN], vec!["a".into()]),
            Err(GridError::NonFiniteValue { index: 1, coord: 0 })
        ));
        assert!(matches!(
            GridPath::new(vec![0.0, 0.1], 2, vec![0.0; 3], labels("a", 2)),
            Err(GridError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn scaling_centers_and_divides() {
        // n = 100 jobs, all at the infinite station (m = 1): hatV = 0.
        // Then 5 queued jobs scale to 0.5 and a never-idle busy time
        // keeps hatI at 0.
        let p = single_pair();
        let rec = simulate_path(&p, 100, 0.0, 0.01, 1, &InitialState::Fluid).unwrap();
        let bundle = scale_path(&rec);
        assert_eq!(bundle.hat_v.value(0, 0), 0.0);
        assert_eq!(bundle.hat_q.value(0, 0), 0.0);
        assert_eq!(bundle.barbar_v.value(0, 0), 1.0);

        let rec = simulate_path(
            &p,
            100,
            0.0,
            0.01,
            1,
            &InitialState::Explicit {
                q: vec![5],
                v: vec![95],
            },
        )
        .unwrap();
        let bundle = scale_path(&rec);
        assert_eq!(bundle.hat_q.value(0, 0), 0.5);
        assert_eq!(bundle.hat_v.value(0, 0), -0.5);
        assert_eq!(bundle.bar_q.value(0, 0), 0.05);
        assert_eq!(bundle.hat_i.value(0, 0), 0.0);
    }

    #[test]
    fn free_processes_at_time_zero_are_scaled_initial_masses() {
        let p = symmetric();
        let rec = simulate_path(
            &p,
            100,
            0.0,
            0.01,
            1,
            &InitialState::Explicit {
                q: vec![4, 0],
                v: vec![48, 48],
            },
        )
        .unwrap();
        let (xi, zeta) = free_processes(&rec);
        assert_eq!(xi.value(0, 0), 0.4);
        assert_eq!(xi.value(0, 1), 0.0);
        assert_eq!(zeta.value(0, 0), -0.2);
        assert_eq!(zeta.value(0, 1), -0.2);
    }

    #[test]
    fn free_process_sum_is_conserved_along_paths() {
        let p = symmetric();
        for seed in 0..5 {
            let rec = simulate_path(&p, 100, 5.0, 0.01, seed, &InitialState::Fluid).unwrap();
            let (xi, zeta) = free_processes(&rec);
            let defect = mass_conservation_defect(&xi, &zeta);
            assert!(defect <= 1e-9, "seed {}: defect {}", seed, defect);
        }
    }

    #[test]
    fn reconstruction_identities_hold_on_simulated_paths() {
        let cases = [
            (single_pair(), 100u64),
            (symmetric(), 100),
            (symmetric(), 25),
        ];
        for (params, n) in cases {
            for seed in [3, 11] {
                let rec =
                    simulate_path(&params, n, 5.0, 0.01, seed, &InitialState::Fluid).unwrap();
                let bundle = scale_path(&rec);
                let defect = reconstruction_defect(&rec, &bundle);
                assert!(defect <= 1e-9, "n={} seed={}: defect {}", n, seed, defect);
            }
        }
    }

    #[test]
    fn reconstruction_holds_on_random_balanced_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..5 {
            let params = random_network(2, 3, true, &mut rng).unwrap();
            let rec = simulate_path(&params, 60, 3.0, 0.01, trial, &InitialState::Fluid).unwrap();
            let bundle = scale_path(&rec);
            let defect = reconstruction_defect(&rec, &bundle);
            // The generator balances flows to ~1e-16 relative, amplified
            // by sqrt(n) * n * mu * t in the identity.
            assert!(defect <= 1e-8, "trial {}: defect {}", trial, defect);
            assert!(mass_conservation_defect(&bundle.xi, &bundle.zeta) <= 1e-8);
        }
    }

    #[test]
    fn fluid_views_shrink_with_n() {
        let p = symmetric();
        let median_max = |n: u64| -> (f64, f64) {
            let mut max_bar_q = Vec::new();
            let mut max_bar_xi = Vec::new();
            for rep in 0..30u64 {
                let rec =
                    simulate_path(&p, n, 5.0, 0.05, 900 + rep, &InitialState::Fluid).unwrap();
                let b = scale_path(&rec);
                max_bar_q.push(b.bar_q.sup_norm());
                max_bar_xi.push(b.bar_xi.sup_norm());
            }
            let med = |v: &mut Vec<f64>| {
                v.sort_by(f64::total_cmp);
                v[v.len() / 2]
            };
            (med(&mut max_bar_q), med(&mut max_bar_xi))
        };
        let (q25, xi25) = median_max(25);
        let (q400, xi400) = median_max(400);
        assert!(q400 < q25, "barQ medians: {} vs {}", q25, q400);
        assert!(xi400 < xi25, "bar_xi medians: {} vs {}", xi25, xi400);
    }
}
