//! File formats: JSON for configs and reports, line-oriented CSV for path
//! data. Every CSV starts with a magic line and a `# config:` line that
//! embeds the resolved run parameters, so any output file reproduces its
//! own run.
//!
//! The readers treat their input as untrusted: strict column counts,
//! bounds on every magnitude, and typed errors instead of panics. Floats
//! are written with 17 significant digits and round-trip bit for bit.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::ComparisonReport;
use crate::limitproc::{CovMode, LimitPath};
use crate::netmodel::{ModelError, NetworkConfig, NetworkParams};
use crate::regulator::RegulatorOutput;
use crate::scaling::{GridPath, ScaledBundle};
use crate::simulator::PathRecord;

/// Magic first line of every CSV this crate writes.
pub const CSV_MAGIC: &str = "# htnet-csv v1";

/// Station counts above this are rejected at the file boundary; they
/// would make label and column allocation attacker-controlled.
pub const MAX_STATIONS: usize = 1024;

/// Cap on `n` and rates from files. Keeps every product the scaling
/// algebra forms comfortably inside f64 range, and counters below 2^53
/// stay exact integers.
pub const MAX_MAGNITUDE: f64 = 1e12;

/// Smallest accepted grid step.
pub const MIN_GRID_STEP: f64 = 1e-9;

/// Largest accepted horizon. Grid times are `i * grid_step`, whose
/// spacing drifts from uniform by about `horizon * 2^-52`; at 4e3 that
/// is 8.9e-13, still inside `scaling::GRID_SPACING_TOL`, so every grid
/// inside the envelope satisfies the `GridPath` invariant.
pub const MAX_HORIZON: f64 = 4.0e3;

/// Largest accepted number of grid cells per replication. Bounds the
/// arithmetic on grid indices, not allocation: the readers grow storage
/// row by row, so memory tracks the actual input size.
pub const MAX_GRID_POINTS: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("line {line}: {msg}")]
    MalformedCsv { line: usize, msg: String },
    #[error("bad file header: {what}")]
    BadHeader { what: String },
    #[error("config outside the supported envelope: {what}")]
    OutOfRange { what: String },
    #[error("config is missing required field `{field}`")]
    MissingField { field: &'static str },
}

/// Resolved parameters of one run, embedded in every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: String,
    pub command: String,
    pub network: NetworkConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_mode: Option<CovMode>,
}

impl RunConfig {
    pub fn new(command: &str, network: NetworkConfig) -> Self {
        RunConfig {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            network,
            n: None,
            horizon: None,
            grid: None,
            reps: None,
            seed: None,
            tol: None,
            cov_mode: None,
        }
    }
}

/// Parses a network config from raw JSON bytes.
pub fn parse_network_config(bytes: &[u8]) -> Result<NetworkConfig, IoError> {
    Ok(serde_json::from_slice(bytes)?)
}

/// Reads a network config from a JSON file.
pub fn read_config(path: &std::path::Path) -> Result<NetworkConfig, IoError> {
    parse_network_config(&std::fs::read(path)?)
}

fn float(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Validates a snapshot grid geometry against the envelope and returns
/// the number of grid cells (one less than the number of grid points).
pub fn resolve_grid(horizon: f64, grid: f64) -> Result<usize, IoError> {
    if !(horizon > 0.0) || horizon > MAX_HORIZON {
        return Err(IoError::OutOfRange {
            what: format!("horizon {}", horizon),
        });
    }
    if !(grid >= MIN_GRID_STEP) {
        return Err(IoError::OutOfRange {
            what: format!("grid step {}", grid),
        });
    }
    let steps_f = horizon / grid;
    let steps = steps_f.round();
    if (steps_f - steps).abs() > 1e-9 || steps < 1.0 {
        return Err(IoError::OutOfRange {
            what: format!("grid {} does not divide horizon {}", grid, horizon),
        });
    }
    if steps > MAX_GRID_POINTS as f64 {
        return Err(IoError::OutOfRange {
            what: format!("{} grid cells exceed {}", steps, MAX_GRID_POINTS),
        });
    }
    Ok(steps as usize)
}

/// Validates an embedded config against the envelope and resolves the
/// grid geometry. Returns `(params, n, horizon, grid_step, steps)`.
pub fn resolve_config(config: &RunConfig) -> Result<(NetworkParams, u64, f64, f64, usize), IoError> {
    let params = NetworkParams::from_config(&config.network, false)?;
    if params.num_single > MAX_STATIONS || params.num_infinite > MAX_STATIONS {
        return Err(IoError::OutOfRange {
            what: format!("station counts above {}", MAX_STATIONS),
        });
    }
    for (name, rates) in [("mu", &params.mu), ("eta", &params.eta)] {
        if rates.iter().any(|&r| r > MAX_MAGNITUDE) {
            return Err(IoError::OutOfRange {
                what: format!("{} above {:e}", name, MAX_MAGNITUDE),
            });
        }
    }
    let n = config.n.ok_or(IoError::MissingField { field: "n" })?;
    if n == 0 || n as f64 > MAX_MAGNITUDE {
        return Err(IoError::OutOfRange {
            what: format!("population n = {}", n),
        });
    }
    let horizon = config.horizon.ok_or(IoError::MissingField { field: "horizon" })?;
    let grid = config.grid.ok_or(IoError::MissingField { field: "grid" })?;
    let steps = resolve_grid(horizon, grid)?;
    Ok((params, n, horizon, grid, steps))
}

fn write_preamble<W: Write>(w: &mut W, kind: &str, config: &RunConfig) -> Result<(), IoError> {
    writeln!(w, "{} kind={}", CSV_MAGIC, kind)?;
    writeln!(w, "# config: {}", serde_json::to_string(config)?)?;
    Ok(())
}

fn paths_header(nj: usize, nk: usize) -> String {
    let mut cols = vec!["rep".to_string(), "seed".to_string(), "t".to_string()];
    let push = |cols: &mut Vec<String>, prefix: &str, count: usize| {
        for i in 1..=count {
            cols.push(format!("{}_{}", prefix, i));
        }
    };
    push(&mut cols, "q", nj);
    push(&mut cols, "v", nk);
    push(&mut cols, "Tbusy", nj);
    push(&mut cols, "intV", nk);
    push(&mut cols, "D", nj);
    push(&mut cols, "F", nk);
    for j in 1..=nj {
        for k in 1..=nk {
            cols.push(format!("Phi_{}_{}", j, k));
        }
    }
    for k in 1..=nk {
        for j in 1..=nj {
            cols.push(format!("Psi_{}_{}", k, j));
        }
    }
    cols.join(",")
}

/// Writes replications as `kind=paths` CSV: raw counters per grid point.
pub fn write_paths_csv<W: Write>(
    w: &mut W,
    config: &RunConfig,
    records: &[PathRecord],
) -> Result<(), IoError> {
    write_preamble(w, "paths", config)?;
    if records.is_empty() {
        return Ok(());
    }
    let (nj, nk) = (
        records[0].params.num_single,
        records[0].params.num_infinite,
    );
    writeln!(w, "{}", paths_header(nj, nk))?;
    for (rep, r) in records.iter().enumerate() {
        for i in 0..r.t.len() {
            let mut row = Vec::with_capacity(3 + nj * 2 + nk * 2 + 2 * nj * nk);
            row.push(rep.to_string());
            row.push(r.seed.to_string());
            row.push(float(r.t[i]));
            for j in 0..nj {
                row.push(r.q_at(i, j).to_string());
            }
            for k in 0..nk {
                row.push(r.v_at(i, k).to_string());
            }
            for j in 0..nj {
                row.push(float(r.busy_at(i, j)));
            }
            for k in 0..nk {
                row.push(float(r.occupancy_integral_at(i, k)));
            }
            for j in 0..nj {
                row.push(r.departures_single_at(i, j).to_string());
            }
            for k in 0..nk {
                row.push(r.departures_infinite_at(i, k).to_string());
            }
            for j in 0..nj {
                for k in 0..nk {
                    row.push(r.route_si_at(i, j, k).to_string());
                }
            }
            for k in 0..nk {
                for j in 0..nj {
                    row.push(r.route_is_at(i, k, j).to_string());
                }
            }
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

struct CsvLines<R: BufRead> {
    reader: R,
    line: usize,
}

impl<R: BufRead> CsvLines<R> {
    fn new(reader: R) -> Self {
        CsvLines { reader, line: 0 }
    }

    /// Next line with its 1-based number, `\r\n` tolerated.
    fn next_line(&mut self) -> Result<Option<(usize, String)>, IoError> {
        let mut buf = String::new();
        let read = self.reader.read_line(&mut buf)?;
        if read == 0 {
            return Ok(None);
        }
        self.line += 1;
        while buf.ends_with('\n') || buf.ends_with('\r') {
            buf.pop();
        }
        Ok(Some((self.line, buf)))
    }
}

fn expect_magic<R: BufRead>(lines: &mut CsvLines<R>, kind: &str) -> Result<(), IoError> {
    let want = format!("{} kind={}", CSV_MAGIC, kind);
    match lines.next_line()? {
        Some((_, line)) if line == want => Ok(()),
        Some((_, line)) => Err(IoError::BadHeader {
            what: format!("expected `{}`, found `{}`", want, line),
        }),
        None => Err(IoError::BadHeader {
            what: "empty file".to_string(),
        }),
    }
}

fn expect_config<R: BufRead>(lines: &mut CsvLines<R>) -> Result<RunConfig, IoError> {
    match lines.next_line()? {
        Some((_, line)) => {
            let rest = line
                .strip_prefix("# config: ")
                .ok_or_else(|| IoError::BadHeader {
                    what: "second line must be `# config: <json>`".to_string(),
                })?;
            Ok(serde_json::from_str(rest)?)
        }
        None => Err(IoError::BadHeader {
            what: "missing config line".to_string(),
        }),
    }
}

/// First non-comment line after the preamble: the column header.
fn expect_columns<R: BufRead>(lines: &mut CsvLines<R>) -> Result<(usize, String), IoError> {
    loop {
        match lines.next_line()? {
            Some((no, line)) if line.starts_with('#') => {
                let _ = (no, line);
            }
            Some((no, line)) => return Ok((no, line)),
            None => {
                return Err(IoError::BadHeader {
                    what: "missing column header".to_string(),
                })
            }
        }
    }
}

fn parse_u64(line: usize, field: &str, name: &str) -> Result<u64, IoError> {
    field.parse::<u64>().map_err(|_| IoError::MalformedCsv {
        line,
        msg: format!("column {}: `{}` is not an unsigned integer", name, field),
    })
}

fn parse_f64(line: usize, field: &str, name: &str) -> Result<f64, IoError> {
    let x = field.parse::<f64>().map_err(|_| IoError::MalformedCsv {
        line,
        msg: format!("column {}: `{}` is not a float", name, field),
    })?;
    if !x.is_finite() {
        return Err(IoError::MalformedCsv {
            line,
            msg: format!("column {}: `{}` is not finite", name, field),
        });
    }
    Ok(x)
}

/// Reads a `kind=paths` CSV back into replication records.
///
/// Rows must be grouped by replication in order, each holding a complete
/// uniform grid; busy times and occupancy integrals must lie in their
/// physical ranges. Violations are reported with line numbers. The `t`
/// column is validated against its grid position and the canonical
/// `i * grid_step` is stored, so reconstructed grids satisfy the
/// `GridPath` spacing invariant by construction.
pub fn read_paths_csv<R: BufRead>(reader: R) -> Result<(Vec<PathRecord>, RunConfig), IoError> {
    let mut lines = CsvLines::new(reader);
    expect_magic(&mut lines, "paths")?;
    let config = expect_config(&mut lines)?;
    let (params, n, horizon, grid_step, steps) = resolve_config(&config)?;
    let (nj, nk) = (params.num_single, params.num_infinite);

    let (header_line, header) = expect_columns(&mut lines)?;
    let want = paths_header(nj, nk);
    if header != want {
        return Err(IoError::MalformedCsv {
            line: header_line,
            msg: format!("column header mismatch: expected `{}`", want),
        });
    }
    let width = 3 + 3 * (nj + nk) + 2 * nj * nk;

    let mut records = Vec::new();
    let mut current: Option<PathRecord> = None;
    let mut row_in_rep = 0usize;
    while let Some((no, line)) = lines.next_line()? {
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            return Err(IoError::MalformedCsv {
                line: no,
                msg: "empty row".to_string(),
            });
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(IoError::MalformedCsv {
                line: no,
                msg: format!("expected {} columns, found {}", width, fields.len()),
            });
        }
        let rep = parse_u64(no, fields[0], "rep")?;
        let seed = parse_u64(no, fields[1], "seed")?;
        let t = parse_f64(no, fields[2], "t")?;

        let expected_rep = records.len() as u64;
        if current.is_none() {
            if rep != expected_rep {
                return Err(IoError::MalformedCsv {
                    line: no,
                    msg: format!("expected replication {}, found {}", expected_rep, rep),
                });
            }
            current = Some(PathRecord {
                params: params.clone(),
                n,
                seed,
                horizon,
                grid_step,
                steps,
                t: Vec::new(),
                q: Vec::new(),
                v: Vec::new(),
                busy: Vec::new(),
                occupancy_integral: Vec::new(),
                departures_single: Vec::new(),
                departures_infinite: Vec::new(),
                route_si: Vec::new(),
                route_is: Vec::new(),
            });
            row_in_rep = 0;
        } else if rep != expected_rep {
            return Err(IoError::MalformedCsv {
                line: no,
                msg: format!(
                    "replication {} is incomplete: found row for {}",
                    expected_rep, rep
                ),
            });
        }
        let record = current.as_mut().expect("initialized above");

        let t_want = row_in_rep as f64 * grid_step;
        if (t - t_want).abs() > 1e-9 * t_want.max(1.0) {
            return Err(IoError::MalformedCsv {
                line: no,
                msg: format!("t = {} but grid position {} expects {}", t, row_in_rep, t_want),
            });
        }
        let mut pos = 3;
        let take_u64 = |count: usize,
                            out: &mut Vec<u64>,
                            name: &str,
                            pos: &mut usize|
         -> Result<(), IoError> {
            for _ in 0..count {
                out.push(parse_u64(no, fields[*pos], name)?);
                *pos += 1;
            }
            Ok(())
        };
        record.t.push(t_want);
        take_u64(nj, &mut record.q, "q", &mut pos)?;
        take_u64(nk, &mut record.v, "v", &mut pos)?;
        for _ in 0..nj {
            let busy = parse_f64(no, fields[pos], "Tbusy")?;
            if !(0.0..=t_want + 1e-9).contains(&busy) {
                return Err(IoError::MalformedCsv {
                    line: no,
                    msg: format!("busy time {} outside [0, {}]", busy, t_want),
                });
            }
            record.busy.push(busy);
            pos += 1;
        }
        for _ in 0..nk {
            let int_v = parse_f64(no, fields[pos], "intV")?;
            let cap = n as f64 * t_want;
            if !(0.0..=cap * (1.0 + 1e-9) + 1e-9).contains(&int_v) {
                return Err(IoError::MalformedCsv {
                    line: no,
                    msg: format!("occupancy integral {} outside [0, {}]", int_v, cap),
                });
            }
            record.occupancy_integral.push(int_v);
            pos += 1;
        }
        take_u64(nj, &mut record.departures_single, "D", &mut pos)?;
        take_u64(nk, &mut record.departures_infinite, "F", &mut pos)?;
        take_u64(nj * nk, &mut record.route_si, "Phi", &mut pos)?;
        take_u64(nk * nj, &mut record.route_is, "Psi", &mut pos)?;

        row_in_rep += 1;
        if row_in_rep == steps + 1 {
            records.push(current.take().expect("complete record"));
        }
    }
    if current.is_some() {
        return Err(IoError::MalformedCsv {
            line: lines.line,
            msg: format!(
                "replication {} truncated after {} of {} rows",
                records.len(),
                row_in_rep,
                steps + 1
            ),
        });
    }
    Ok((records, config))
}

fn bundle_parts(bundle: &ScaledBundle) -> Vec<&GridPath> {
    vec![
        &bundle.hat_q,
        &bundle.hat_v,
        &bundle.hat_i,
        &bundle.hat_t,
        &bundle.bar_q,
        &bundle.bar_v,
        &bundle.barbar_v,
        &bundle.xi,
        &bundle.zeta,
        &bundle.bar_xi,
        &bundle.bar_zeta,
    ]
}

/// Writes diffusion- and fluid-scaled replications as `kind=scaled` CSV.
pub fn write_scaled_csv<W: Write>(
    w: &mut W,
    config: &RunConfig,
    bundles: &[(u64, ScaledBundle)],
) -> Result<(), IoError> {
    write_preamble(w, "scaled", config)?;
    if bundles.is_empty() {
        return Ok(());
    }
    let parts = bundle_parts(&bundles[0].1);
    let mut cols = vec!["rep".to_string(), "t".to_string()];
    for p in &parts {
        cols.extend(p.labels().iter().cloned());
    }
    writeln!(w, "{}", cols.join(","))?;
    for (rep, bundle) in bundles {
        let parts = bundle_parts(bundle);
        let len = parts[0].len();
        for i in 0..len {
            let mut row = Vec::with_capacity(cols.len());
            row.push(rep.to_string());
            row.push(float(parts[0].grid()[i]));
            for p in &parts {
                for c in 0..p.dim() {
                    row.push(float(p.value(i, c)));
                }
            }
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// One replication's free processes read back from a scaled CSV.
#[derive(Debug, Clone)]
pub struct ScaledFrame {
    pub rep: u64,
    pub xi: GridPath,
    pub zeta: GridPath,
}

/// Reads the free-process columns of a `kind=scaled` CSV.
///
/// Only `t`, `xi_*`, and `zeta_*` are consumed (located by name), which
/// is everything the regulator needs; other columns pass through
/// unread. Rows must be grouped by replication with a complete grid.
/// As in [`read_paths_csv`], the stored grid is the canonical
/// `i * grid_step` after the `t` column passes its position check.
pub fn read_scaled_csv<R: BufRead>(reader: R) -> Result<(Vec<ScaledFrame>, RunConfig), IoError> {
    let mut lines = CsvLines::new(reader);
    expect_magic(&mut lines, "scaled")?;
    let config = expect_config(&mut lines)?;
    let (params, _, _, grid_step, steps) = resolve_config(&config)?;
    let (nj, nk) = (params.num_single, params.num_infinite);

    let (header_line, header) = expect_columns(&mut lines)?;
    let names: Vec<&str> = header.split(',').collect();
    let find = |want: String| -> Result<usize, IoError> {
        names
            .iter()
            .position(|&n| n == want)
            .ok_or_else(|| IoError::MalformedCsv {
                line: header_line,
                msg: format!("missing column `{}`", want),
            })
    };
    let rep_col = find("rep".to_string())?;
    let t_col = find("t".to_string())?;
    let xi_cols: Vec<usize> = (1..=nj)
        .map(|j| find(format!("xi_{}", j)))
        .collect::<Result<_, _>>()?;
    let zeta_cols: Vec<usize> = (1..=nk)
        .map(|k| find(format!("zeta_{}", k)))
        .collect::<Result<_, _>>()?;
    let width = names.len();

    struct Partial {
        rep: u64,
        grid: Vec<f64>,
        xi: Vec<f64>,
        zeta: Vec<f64>,
    }
    let mut frames = Vec::new();
    let mut current: Option<Partial> = None;
    let finish = |p: Partial, frames: &mut Vec<ScaledFrame>, line: usize| -> Result<(), IoError> {
        let to_csv_err = |what: String| IoError::MalformedCsv { line, msg: what };
        let xi = GridPath::new(
            p.grid.clone(),
            nj,
            p.xi,
            crate::scaling::labels("xi", nj),
        )
        .map_err(|e| to_csv_err(format!("xi columns: {}", e)))?;
        let zeta = GridPath::new(p.grid, nk, p.zeta, crate::scaling::labels("zeta", nk))
            .map_err(|e| to_csv_err(format!("zeta columns: {}", e)))?;
        frames.push(ScaledFrame {
            rep: p.rep,
            xi,
            zeta,
        });
        Ok(())
    };

    while let Some((no, line)) = lines.next_line()? {
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(IoError::MalformedCsv {
                line: no,
                msg: format!("expected {} columns, found {}", width, fields.len()),
            });
        }
        let rep = parse_u64(no, fields[rep_col], "rep")?;
        let t = parse_f64(no, fields[t_col], "t")?;
        let expected_rep = frames.len() as u64;
        if current.is_none() {
            if rep != expected_rep {
                return Err(IoError::MalformedCsv {
                    line: no,
                    msg: format!("expected replication {}, found {}", expected_rep, rep),
                });
            }
            current = Some(Partial {
                rep,
                grid: Vec::new(),
                xi: Vec::new(),
                zeta: Vec::new(),
            });
        } else if rep != expected_rep {
            return Err(IoError::MalformedCsv {
                line: no,
                msg: format!(
                    "replication {} is incomplete: found row for {}",
                    expected_rep, rep
                ),
            });
        }
        let p = current.as_mut().expect("initialized above");
        let t_want = p.grid.len() as f64 * grid_step;
        if (t - t_want).abs() > 1e-9 * t_want.max(1.0) {
            return Err(IoError::MalformedCsv {
                line: no,
                msg: format!("t = {} but grid position {} expects {}", t, p.grid.len(), t_want),
            });
        }
        p.grid.push(t_want);
        for &c in &xi_cols {
            p.xi.push(parse_f64(no, fields[c], "xi")?);
        }
        for &c in &zeta_cols {
            p.zeta.push(parse_f64(no, fields[c], "zeta")?);
        }
        if p.grid.len() == steps + 1 {
            let done = current.take().expect("complete frame");
            finish(done, &mut frames, no)?;
        }
    }
    if current.is_some() {
        return Err(IoError::MalformedCsv {
            line: lines.line,
            msg: "last replication truncated".to_string(),
        });
    }
    Ok((frames, config))
}

/// Writes regulator outputs as `kind=regulated` CSV with per-replication
/// residual and iteration summaries in comment lines.
pub fn write_regulated_csv<W: Write>(
    w: &mut W,
    config: &RunConfig,
    outputs: &[(u64, RegulatorOutput)],
) -> Result<(), IoError> {
    write_preamble(w, "regulated", config)?;
    if outputs.is_empty() {
        return Ok(());
    }
    for (rep, out) in outputs {
        writeln!(
            w,
            "# rep {}: residual={} iterations={}",
            rep,
            float(out.residual),
            out.iterations
        )?;
    }
    let first = &outputs[0].1;
    let mut cols = vec!["rep".to_string(), "t".to_string()];
    for p in [&first.x, &first.u, &first.y] {
        cols.extend(p.labels().iter().cloned());
    }
    writeln!(w, "{}", cols.join(","))?;
    for (rep, out) in outputs {
        for i in 0..out.x.len() {
            let mut row = Vec::with_capacity(cols.len());
            row.push(rep.to_string());
            row.push(float(out.x.grid()[i]));
            for p in [&out.x, &out.u, &out.y] {
                for c in 0..p.dim() {
                    row.push(float(p.value(i, c)));
                }
            }
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// Writes limit samples as `kind=limit` CSV: regulated triple plus the
/// Brownian driver that produced it.
pub fn write_limit_csv<W: Write>(
    w: &mut W,
    config: &RunConfig,
    paths: &[(u64, LimitPath)],
) -> Result<(), IoError> {
    write_preamble(w, "limit", config)?;
    if paths.is_empty() {
        return Ok(());
    }
    let first = &paths[0].1;
    let (nj, nk) = (first.q_star.dim(), first.v_star.dim());
    let mut cols = vec!["rep".to_string(), "t".to_string()];
    let push = |cols: &mut Vec<String>, prefix: &str, count: usize| {
        for i in 1..=count {
            cols.push(format!("{}_{}", prefix, i));
        }
    };
    push(&mut cols, "Qstar", nj);
    push(&mut cols, "Istar", nj);
    push(&mut cols, "Vstar", nk);
    cols.extend(first.driver.labels().iter().cloned());
    writeln!(w, "{}", cols.join(","))?;
    for (rep, lp) in paths {
        for i in 0..lp.q_star.len() {
            let mut row = Vec::with_capacity(cols.len());
            row.push(rep.to_string());
            row.push(float(lp.q_star.grid()[i]));
            for p in [&lp.q_star, &lp.i_star, &lp.v_star, &lp.driver] {
                for c in 0..p.dim() {
                    row.push(float(p.value(i, c)));
                }
            }
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// Pretty-printed JSON report; field order is fixed by the struct, so
/// equal reports serialize to equal bytes.
pub fn write_report_json<W: Write>(w: &mut W, report: &ComparisonReport) -> Result<(), IoError> {
    serde_json::to_writer_pretty(&mut *w, report)?;
    writeln!(w)?;
    Ok(())
}

/// Long-form companion CSV for plotting: one row per population size,
/// coordinate, and checkpoint.
pub fn write_report_csv<W: Write>(w: &mut W, report: &ComparisonReport) -> Result<(), IoError> {
    writeln!(w, "{} kind=report", CSV_MAGIC)?;
    writeln!(
        w,
        "n,coord,time,ks,mean_pre,var_pre,mean_limit,var_limit,fluid_max_q_median,fluid_max_v_median,idle_unscaled_median,idle_scaled_median"
    )?;
    for (pos, summary) in report.per_n.iter().enumerate() {
        for (fam, gap) in report.ks.iter().zip(&summary.moment_gaps) {
            debug_assert_eq!(fam.coord, gap.coord);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                summary.n,
                gap.coord,
                float(gap.time),
                float(fam.by_n[pos]),
                float(gap.mean_pre),
                float(gap.var_pre),
                float(gap.mean_limit),
                float(gap.var_limit),
                float(summary.fluid_max_q_median),
                float(summary.fluid_max_v_median),
                float(summary.idle_unscaled_median),
                float(summary.idle_scaled_median),
            )?;
        }
    }
    Ok(())
}
