//! Exact continuous-time simulation of the closed network.
//!
//! The population is fixed at `n`. Single-server station `j` works at
//! rate `n * mu_j` whenever its queue is nonempty; infinite-server
//! station `k` completes jobs at rate `eta_k * v_k`. Holding times are
//! exponential in the total rate and the event is chosen with
//! probability proportional to its rate, so the path is an exact draw
//! from the Markov chain, not a discretization.
//!
//! Every counting process needed by the diffusion rescaling is tracked:
//! arrivals/departures per station, per-pair routing counts, cumulative
//! busy time per single-server station, and the running time integral of
//! each infinite-server occupancy. Time-like accumulators use
//! compensated summation so that million-event paths keep the identities
//! between counters at full double precision.

use crate::netmodel::NetworkParams;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Compensated (Kahan) accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid initial state: {reason}")]
    InvalidInitialState { reason: String },
    #[error("grid step {grid_step} does not divide horizon {horizon}")]
    GridMismatch { horizon: f64, grid_step: f64 },
    #[error("population must be at least 1")]
    EmptyPopulation,
    #[error("all rates vanished at t = {at}")]
    DeadSystem { at: f64 },
}

/// Initial placement of the `n` jobs.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    /// Infinite-server occupancies at the rounded fluid point `n * m_k`,
    /// remainder in the first queue. If rounding overshoots `n`, jobs are
    /// removed one at a time from the currently largest occupancy.
    Fluid,
    /// Explicit queue lengths and occupancies; must sum to `n`.
    Explicit { q: Vec<u64>, v: Vec<u64> },
}

/// Full state of the chain together with its counting processes.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    t: Kahan,
    /// Queue length at each single-server station.
    pub q: Vec<u64>,
    /// Jobs in service at each infinite-server station.
    pub v: Vec<u64>,
    /// Cumulative arrivals to single-server stations.
    pub arrivals_single: Vec<u64>,
    /// Cumulative departures from single-server stations.
    pub departures_single: Vec<u64>,
    /// Cumulative arrivals to infinite-server stations.
    pub arrivals_infinite: Vec<u64>,
    /// Cumulative departures from infinite-server stations.
    pub departures_infinite: Vec<u64>,
    /// Routing counts single `j` -> infinite `k`, flattened `j * K + k`.
    pub route_si: Vec<u64>,
    /// Routing counts infinite `k` -> single `j`, flattened `k * J + j`.
    pub route_is: Vec<u64>,
    busy: Vec<Kahan>,
    occupancy_integral: Vec<Kahan>,
}

impl SystemState {
    pub fn time(&self) -> f64 {
        self.t.value()
    }

    /// Cumulative busy time of single-server station `j`.
    pub fn busy_time(&self, j: usize) -> f64 {
        self.busy[j].value()
    }

    /// Running value of `int_0^t v_k(s) ds`.
    pub fn occupancy_integral(&self, k: usize) -> f64 {
        self.occupancy_integral[k].value()
    }

    pub fn total_jobs(&self) -> u64 {
        self.q.iter().sum::<u64>() + self.v.iter().sum::<u64>()
    }
}

/// A single transition of the chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    /// Service completion at single-server `station`, job routed to
    /// infinite-server `dest`.
    SingleCompletion { station: usize, dest: usize },
    /// Service completion at infinite-server `station`, job routed to
    /// single-server `dest`.
    InfiniteCompletion { station: usize, dest: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub event: Event,
    pub holding: f64,
}

/// Precomputed rates and routing tables for one `(params, n)` pair.
pub struct Simulator<'a> {
    pub params: &'a NetworkParams,
    pub n: u64,
    n_mu: Vec<f64>,
    cum_to_infinite: Vec<Vec<f64>>,
    cum_to_single: Vec<Vec<f64>>,
}

fn cumulative(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|row| {
            row.iter()
                .scan(0.0, |acc, &x| {
                    *acc += x;
                    Some(*acc)
                })
                .collect()
        })
        .collect()
}

fn pick(cum: &[f64], u: f64) -> usize {
    for (i, &c) in cum.iter().enumerate() {
        if u < c {
            return i;
        }
    }
    cum.len() - 1
}

impl<'a> Simulator<'a> {
    pub fn new(params: &'a NetworkParams, n: u64) -> Self {
        Simulator {
            params,
            n,
            n_mu: params.mu.iter().map(|&m| m * n as f64).collect(),
            cum_to_infinite: cumulative(&params.route_to_infinite),
            cum_to_single: cumulative(&params.route_to_single),
        }
    }

    pub fn initial_state(&self, init: &InitialState) -> Result<SystemState, SimError> {
        let (j, k) = (self.params.num_single, self.params.num_infinite);
        if self.n == 0 {
            return Err(SimError::EmptyPopulation);
        }
        let (q, v) = match init {
            InitialState::Fluid => {
                let mut v: Vec<u64> = self
                    .params
                    .loads
                    .iter()
                    .map(|&m| (self.n as f64 * m).round().max(0.0) as u64)
                    .collect();
                let mut q = vec![0u64; j];
                let placed: u64 = v.iter().sum();
                if placed <= self.n {
                    q[0] = self.n - placed;
                } else {
                    // Rounding overshot; drain from the largest occupancy
                    // (ties broken toward the last station).
                    let mut deficit = placed - self.n;
                    while deficit > 0 {
                        let (imax, _) = v
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.cmp(b.1))
                            .expect("at least one station");
                        v[imax] -= 1;
                        deficit -= 1;
                    }
                }
                (q, v)
            }
            InitialState::Explicit { q, v } => {
                if q.len() != j || v.len() != k {
                    return Err(SimError::InvalidInitialState {
                        reason: format!(
                            "expected {} queue and {} occupancy entries, got {} and {}",
                            j,
                            k,
                            q.len(),
                            v.len()
                        ),
                    });
                }
                let total: u64 = q.iter().sum::<u64>() + v.iter().sum::<u64>();
                if total != self.n {
                    return Err(SimError::InvalidInitialState {
                        reason: format!("jobs sum to {}, expected n = {}", total, self.n),
                    });
                }
                (q.clone(), v.clone())
            }
        };
        Ok(SystemState {
            t: Kahan::default(),
            q,
            v,
            arrivals_single: vec![0; j],
            departures_single: vec![0; j],
            arrivals_infinite: vec![0; k],
            departures_infinite: vec![0; k],
            route_si: vec![0; j * k],
            route_is: vec![0; k * j],
            busy: vec![Kahan::default(); j],
            occupancy_integral: vec![Kahan::default(); k],
        })
    }

    fn total_rate(&self, state: &SystemState) -> f64 {
        let single: f64 = self
            .n_mu
            .iter()
            .zip(&state.q)
            .map(|(&r, &q)| if q > 0 { r } else { 0.0 })
            .sum();
        let infinite: f64 = self
            .params
            .eta
            .iter()
            .zip(&state.v)
            .map(|(&e, &v)| e * v as f64)
            .sum();
        single + infinite
    }

    /// Advances the clock and the time-like accumulators by `holding`.
    fn advance(&self, state: &mut SystemState, holding: f64) {
        state.t.add(holding);
        for (busy, &q) in state.busy.iter_mut().zip(&state.q) {
            if q > 0 {
                busy.add(holding);
            }
        }
        for (acc, &v) in state.occupancy_integral.iter_mut().zip(&state.v) {
            acc.add(v as f64 * holding);
        }
    }

    /// Picks the next event proportionally to the current rates and
    /// applies it to the counters.
    fn select_and_apply<R: Rng>(
        &self,
        state: &mut SystemState,
        total: f64,
        rng: &mut R,
    ) -> Event {
        let mut u = rng.random::<f64>() * total;
        // Roundoff can push u past the last cumulative rate; the final
        // active station then owns the residual mass.
        let mut fallback = None;
        for (j, (&r, &q)) in self.n_mu.iter().zip(&state.q).enumerate() {
            if q == 0 {
                continue;
            }
            fallback = Some(Event::SingleCompletion { station: j, dest: 0 });
            if u < r {
                return self.apply_single(state, j, rng);
            }
            u -= r;
        }
        for (k, (&e, &v)) in self.params.eta.iter().zip(&state.v).enumerate() {
            if v == 0 {
                continue;
            }
            fallback = Some(Event::InfiniteCompletion { station: k, dest: 0 });
            if u < e * v as f64 {
                return self.apply_infinite(state, k, rng);
            }
            u -= e * v as f64;
        }
        match fallback.expect("positive total rate implies an active station") {
            Event::SingleCompletion { station, .. } => self.apply_single(state, station, rng),
            Event::InfiniteCompletion { station, .. } => self.apply_infinite(state, station, rng),
        }
    }

    fn apply_single<R: Rng>(&self, state: &mut SystemState, j: usize, rng: &mut R) -> Event {
        let dest = pick(&self.cum_to_infinite[j], rng.random::<f64>());
        state.q[j] -= 1;
        state.departures_single[j] += 1;
        state.route_si[j * self.params.num_infinite + dest] += 1;
        state.arrivals_infinite[dest] += 1;
        state.v[dest] += 1;
        Event::SingleCompletion { station: j, dest }
    }

    fn apply_infinite<R: Rng>(&self, state: &mut SystemState, k: usize, rng: &mut R) -> Event {
        let dest = pick(&self.cum_to_single[k], rng.random::<f64>());
        state.v[k] -= 1;
        state.departures_infinite[k] += 1;
        state.route_is[k * self.params.num_single + dest] += 1;
        state.arrivals_single[dest] += 1;
        state.q[dest] += 1;
        Event::InfiniteCompletion { station: k, dest }
    }

    pub fn step<R: Rng>(
        &self,
        state: &mut SystemState,
        rng: &mut R,
    ) -> Result<StepOutcome, SimError> {
        let total = self.total_rate(state);
        if total <= 0.0 {
            return Err(SimError::DeadSystem { at: state.time() });
        }
        let holding = -(1.0 - rng.random::<f64>()).ln() / total;
        self.advance(state, holding);
        let event = self.select_and_apply(state, total, rng);
        Ok(StepOutcome { event, holding })
    }
}

/// One replication sampled on a uniform grid, stored column-flattened:
/// entry `i * width + s` is station `s` at grid index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub params: NetworkParams,
    pub n: u64,
    pub seed: u64,
    pub horizon: f64,
    pub grid_step: f64,
    /// Number of grid cells; the record holds `steps + 1` snapshots.
    pub steps: usize,
    pub t: Vec<f64>,
    pub q: Vec<u64>,
    pub v: Vec<u64>,
    pub busy: Vec<f64>,
    pub occupancy_integral: Vec<f64>,
    pub departures_single: Vec<u64>,
    pub departures_infinite: Vec<u64>,
    /// Routing counts single -> infinite, `i * (J * K) + j * K + k`.
    pub route_si: Vec<u64>,
    /// Routing counts infinite -> single, `i * (K * J) + k * J + j`.
    pub route_is: Vec<u64>,
}

impl PathRecord {
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn q_at(&self, i: usize, j: usize) -> u64 {
        self.q[i * self.params.num_single + j]
    }

    pub fn v_at(&self, i: usize, k: usize) -> u64 {
        self.v[i * self.params.num_infinite + k]
    }

    pub fn busy_at(&self, i: usize, j: usize) -> f64 {
        self.busy[i * self.params.num_single + j]
    }

    pub fn occupancy_integral_at(&self, i: usize, k: usize) -> f64 {
        self.occupancy_integral[i * self.params.num_infinite + k]
    }

    pub fn departures_single_at(&self, i: usize, j: usize) -> u64 {
        self.departures_single[i * self.params.num_single + j]
    }

    pub fn departures_infinite_at(&self, i: usize, k: usize) -> u64 {
        self.departures_infinite[i * self.params.num_infinite + k]
    }

    pub fn route_si_at(&self, i: usize, j: usize, k: usize) -> u64 {
        let (nj, nk) = (self.params.num_single, self.params.num_infinite);
        self.route_si[i * nj * nk + j * nk + k]
    }

    pub fn route_is_at(&self, i: usize, k: usize, j: usize) -> u64 {
        let (nj, nk) = (self.params.num_single, self.params.num_infinite);
        self.route_is[i * nj * nk + k * nj + j]
    }
}

fn push_snapshot(record: &mut PathRecord, state: &SystemState, grid_time: f64) {
    // Counters are constant inside a holding interval; only the
    // time-like accumulators need interpolation from the last event.
    let delta = grid_time - state.time();
    record.t.push(grid_time);
    record.q.extend_from_slice(&state.q);
    record.v.extend_from_slice(&state.v);
    for (j, &q) in state.q.iter().enumerate() {
        let run = if q > 0 { delta } else { 0.0 };
        record.busy.push(state.busy_time(j) + run);
    }
    for (k, &v) in state.v.iter().enumerate() {
        record
            .occupancy_integral
            .push(state.occupancy_integral(k) + v as f64 * delta);
    }
    record
        .departures_single
        .extend_from_slice(&state.departures_single);
    record
        .departures_infinite
        .extend_from_slice(&state.departures_infinite);
    record.route_si.extend_from_slice(&state.route_si);
    record.route_is.extend_from_slice(&state.route_is);
}

/// Simulates one replication and snapshots it at `i * grid_step` for
/// `i = 0..=horizon/grid_step`.
///
/// Snapshots use the pre-event state for grid times strictly inside a
/// holding interval and the post-event state at an exact event time, so
/// the recorded path is right-continuous. The same inputs always produce
/// a bit-identical record.
pub fn simulate_path(
    params: &NetworkParams,
    n: u64,
    horizon: f64,
    grid_step: f64,
    seed: u64,
    init: &InitialState,
) -> Result<PathRecord, SimError> {
    if !(horizon >= 0.0 && horizon.is_finite() && grid_step > 0.0 && grid_step.is_finite()) {
        return Err(SimError::GridMismatch { horizon, grid_step });
    }
    let steps_f = horizon / grid_step;
    // Past 2^53 the round-trip check below can no longer certify the
    // cell count, and `as usize` would saturate.
    if !(steps_f < 9.0e15) {
        return Err(SimError::GridMismatch { horizon, grid_step });
    }
    let steps = steps_f.round() as usize;
    if (steps as f64 * grid_step - horizon).abs() > 1e-9 {
        return Err(SimError::GridMismatch { horizon, grid_step });
    }

    let sim = Simulator::new(params, n);
    let mut state = sim.initial_state(init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let size = steps + 1;
    let (nj, nk) = (params.num_single, params.num_infinite);
    let mut record = PathRecord {
        params: params.clone(),
        n,
        seed,
        horizon,
        grid_step,
        steps,
        t: Vec::with_capacity(size),
        q: Vec::with_capacity(size * nj),
        v: Vec::with_capacity(size * nk),
        busy: Vec::with_capacity(size * nj),
        occupancy_integral: Vec::with_capacity(size * nk),
        departures_single: Vec::with_capacity(size * nj),
        departures_infinite: Vec::with_capacity(size * nk),
        route_si: Vec::with_capacity(size * nj * nk),
        route_is: Vec::with_capacity(size * nj * nk),
    };

    push_snapshot(&mut record, &state, 0.0);
    let mut next = 1usize;
    while next <= steps {
        let total = sim.total_rate(&state);
        if total <= 0.0 {
            return Err(SimError::DeadSystem { at: state.time() });
        }
        let holding = -(1.0 - rng.random::<f64>()).ln() / total;
        let event_time = state.time() + holding;
        while next <= steps {
            let grid_time = next as f64 * grid_step;
            if grid_time >= event_time {
                break;
            }
            push_snapshot(&mut record, &state, grid_time);
            next += 1;
        }
        sim.advance(&mut state, holding);
        sim.select_and_apply(&mut state, total, &mut rng);
    }
    Ok(record)
}
