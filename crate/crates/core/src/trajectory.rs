//! Trajectory records produced by rollouts, plus their on-disk formats.
//!
//! A [`Trajectory`] stores one scalar row per retained iterate: loss,
//! selected-gradient norm, step norm, and state norm, with optional full
//! states and an optional auxiliary metric (e.g. distance to a known
//! minimizer). All retained entries are finite: a rollout truncates before
//! the first non-finite iterate and sets the `diverged` flag instead.
//!
//! On disk a trajectory is a small CSV with a `#`-prefixed metadata line
//! (`family`, `instance`, `algorithm`, `T`, `seed`) and columns
//! `t,loss,grad_norm,step_norm,stop`; the `stop` cell is empty except on the
//! final row, which carries the stop reason. Full states go to an optional
//! binary sidecar: two little-endian `u64` words (row count, dimension)
//! followed by row-major little-endian `f64` data.

use crate::problems::Family;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Why a rollout stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Ran the full horizon.
    Horizon,
    /// Loss fell below the configured tolerance.
    LossTol,
    /// A non-finite iterate, loss, or gradient appeared.
    Diverged,
}

impl StopReason {
    pub fn tag(self) -> &'static str {
        match self {
            StopReason::Horizon => "horizon",
            StopReason::LossTol => "loss_tol",
            StopReason::Diverged => "diverged",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "horizon" => Some(StopReason::Horizon),
            "loss_tol" => Some(StopReason::LossTol),
            "diverged" => Some(StopReason::Diverged),
            _ => None,
        }
    }
}

/// Scalar record of one rollout. Index `t` runs over retained iterates,
/// starting at the initial point; `step_norms[0]` is zero by convention.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Loss at each retained iterate.
    pub losses: Vec<f64>,
    /// Norm of the selected gradient at each retained iterate.
    pub grad_norms: Vec<f64>,
    /// `||x^t - x^{t-1}||`; zero at `t = 0`.
    pub step_norms: Vec<f64>,
    /// `||x^t||`.
    pub state_norms: Vec<f64>,
    /// Optional per-iterate observer metric (same length as `losses`).
    pub aux: Option<Vec<f64>>,
    /// Last retained iterate.
    pub final_state: Vec<f64>,
    /// Full iterates, when recording was requested.
    pub states: Option<Vec<Vec<f64>>>,
    /// Set iff the rollout hit a non-finite value; the record holds the
    /// finite prefix.
    pub diverged: bool,
    pub stop: StopReason,
}

impl Trajectory {
    /// Number of steps in the record (retained iterates minus one).
    pub fn horizon(&self) -> usize {
        self.losses.len().saturating_sub(1)
    }

    /// Smallest loss over retained iterates; `+inf` for an empty record.
    pub fn min_loss(&self) -> f64 {
        self.losses.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Loss at the last retained iterate; `+inf` for an empty record.
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::INFINITY)
    }

    /// Panics if the parallel arrays disagree — rollouts must keep them in
    /// lockstep.
    pub fn assert_consistent(&self) {
        let n = self.losses.len();
        assert_eq!(self.grad_norms.len(), n, "grad_norms length");
        assert_eq!(self.step_norms.len(), n, "step_norms length");
        assert_eq!(self.state_norms.len(), n, "state_norms length");
        if let Some(aux) = &self.aux {
            assert_eq!(aux.len(), n, "aux length");
        }
        if let Some(states) = &self.states {
            assert_eq!(states.len(), n, "states length");
        }
        if !self.diverged {
            assert!(
                self.losses.iter().all(|v| v.is_finite())
                    && self.grad_norms.iter().all(|v| v.is_finite())
                    && self.step_norms.iter().all(|v| v.is_finite())
                    && self.state_norms.iter().all(|v| v.is_finite()),
                "non-finite entries without the diverged flag"
            );
        }
    }
}

/// Identifying metadata written to a trajectory dump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryMeta {
    pub family: Family,
    pub instance: u64,
    pub algorithm: String,
    pub seed: u64,
}

/// One parsed row of a trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub t: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub step_norm: f64,
    pub stop: Option<StopReason>,
}

#[derive(Debug, Error)]
pub enum TrajectoryIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed trajectory file {path}: {reason}")]
    Malformed { path: String, reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> TrajectoryIoError {
    TrajectoryIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> TrajectoryIoError {
    TrajectoryIoError::Malformed {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Write the scalar record as CSV with a metadata header line.
pub fn write_trajectory_csv(
    path: &Path,
    meta: &TrajectoryMeta,
    traj: &Trajectory,
) -> Result<(), TrajectoryIoError> {
    traj.assert_consistent();
    let mut out = String::new();
    out.push_str(&format!(
        "# family={},instance={},algorithm={},T={},seed={}\n",
        meta.family,
        meta.instance,
        meta.algorithm,
        traj.horizon(),
        meta.seed
    ));
    out.push_str("t,loss,grad_norm,step_norm,stop\n");
    let last = traj.losses.len().saturating_sub(1);
    for t in 0..traj.losses.len() {
        let stop = if t == last { traj.stop.tag() } else { "" };
        out.push_str(&format!(
            "{t},{},{},{},{stop}\n",
            traj.losses[t], traj.grad_norms[t], traj.step_norms[t]
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
}

/// Read a trajectory CSV back into metadata and rows.
pub fn read_trajectory_csv(
    path: &Path,
) -> Result<(TrajectoryMeta, Vec<TrajectoryRow>), TrajectoryIoError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| malformed(path, "empty file"))?
        .strip_prefix("# ")
        .ok_or_else(|| malformed(path, "missing metadata line"))?;
    let mut family = None;
    let mut instance = None;
    let mut algorithm = None;
    let mut seed = None;
    for pair in header.split(',') {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| malformed(path, format!("bad metadata pair `{pair}`")))?;
        match k {
            "family" => {
                family = Some(match v {
                    "quadratic" => Family::Quadratic,
                    "nn-regression" => Family::NnRegression,
                    other => return Err(malformed(path, format!("unknown family `{other}`"))),
                })
            }
            "instance" => instance = v.parse().ok(),
            "algorithm" => algorithm = Some(v.to_string()),
            "seed" => seed = v.parse().ok(),
            "T" => {}
            other => return Err(malformed(path, format!("unknown metadata key `{other}`"))),
        }
    }
    let meta = TrajectoryMeta {
        family: family.ok_or_else(|| malformed(path, "missing family"))?,
        instance: instance.ok_or_else(|| malformed(path, "missing instance"))?,
        algorithm: algorithm.ok_or_else(|| malformed(path, "missing algorithm"))?,
        seed: seed.ok_or_else(|| malformed(path, "missing seed"))?,
    };

    let columns = lines.next().ok_or_else(|| malformed(path, "missing column line"))?;
    if columns != "t,loss,grad_norm,step_norm,stop" {
        return Err(malformed(path, format!("unexpected columns `{columns}`")));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(malformed(path, format!("bad row `{line}`")));
        }
        let parse_f = |s: &str| -> Result<f64, TrajectoryIoError> {
            s.parse()
                .map_err(|_| malformed(path, format!("bad float `{s}`")))
        };
        rows.push(TrajectoryRow {
            t: parts[0]
                .parse()
                .map_err(|_| malformed(path, format!("bad index `{}`", parts[0])))?,
            loss: parse_f(parts[1])?,
            grad_norm: parse_f(parts[2])?,
            step_norm: parse_f(parts[3])?,
            stop: if parts[4].is_empty() {
                None
            } else {
                Some(
                    StopReason::from_tag(parts[4])
                        .ok_or_else(|| malformed(path, format!("bad stop tag `{}`", parts[4])))?,
                )
            },
        });
    }
    Ok((meta, rows))
}

/// Write full states as the binary sidecar format.
pub fn write_states_bin(path: &Path, states: &[Vec<f64>]) -> Result<(), TrajectoryIoError> {
    let dim = states.first().map_or(0, |s| s.len());
    for s in states {
        assert_eq!(s.len(), dim, "ragged state rows");
    }
    let mut buf = Vec::with_capacity(16 + states.len() * dim * 8);
    buf.extend_from_slice(&(states.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(dim as u64).to_le_bytes());
    for s in states {
        for v in s {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Read a binary states sidecar.
pub fn read_states_bin(path: &Path) -> Result<Vec<Vec<f64>>, TrajectoryIoError> {
    let buf = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if buf.len() < 16 {
        return Err(malformed(path, "truncated header"));
    }
    let rows = u64::from_le_bytes(buf[0..8].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let expected = 16 + rows * dim * 8;
    if buf.len() != expected {
        return Err(malformed(
            path,
            format!("expected {expected} bytes for {rows}x{dim}, got {}", buf.len()),
        ));
    }
    let mut states = Vec::with_capacity(rows);
    let mut off = 16;
    for _ in 0..rows {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            row.push(f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        states.push(row);
    }
    Ok(states)
}
