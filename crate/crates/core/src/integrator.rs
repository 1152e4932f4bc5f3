//! Fixed-step RK4 integration and trajectory-based stability verdicts.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::VectorField;
use crate::error::{Error, Result};

/// States with a 2-norm above this are treated as diverged.
pub const DEFAULT_BLOWUP_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Step size, s.
    pub dt: f64,
    /// Final time `t_n`, s.
    pub horizon: f64,
    /// Convergence radius `xi`.
    pub convergence_radius: f64,
    #[serde(default = "default_blowup")]
    pub blowup_norm: f64,
}

fn default_blowup() -> f64 {
    DEFAULT_BLOWUP_NORM
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            horizon: 100.0,
            convergence_radius: 0.01,
            blowup_norm: DEFAULT_BLOWUP_NORM,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= self.dt && self.horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "horizon {} must be at least dt {}",
                self.horizon, self.dt
            )));
        }
        if !(self.convergence_radius > 0.0) {
            return Err(Error::InvalidArgument("convergence radius must be positive".into()));
        }
        if !(self.blowup_norm > 0.0) {
            return Err(Error::InvalidArgument("blow-up norm must be positive".into()));
        }
        Ok(())
    }

    /// Number of steps `t_n / dt`, rounded to the nearest integer.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// States sampled at `t_i = i * dt`, stored row-major in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    dt: f64,
    states: Vec<f64>,
    expected_len: usize,
    pub converged: bool,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of recorded states, including the initial one.
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// True if the integration stopped early on divergence.
    pub fn truncated(&self) -> bool {
        self.len() < self.expected_len
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn initial_state(&self) -> &[f64] {
        self.state(0)
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    /// Builds a trajectory from pre-computed samples.
    pub fn from_states(dim: usize, dt: f64, states: Vec<f64>, expected_len: usize) -> Self {
        assert!(dim > 0 && states.len() % dim == 0);
        Self {
            dim,
            dt,
            states,
            expected_len,
            converged: false,
        }
    }

    /// Writes `t, psi_1..psi_M, psidot_1..psidot_M` (or `x_1..x_d` for odd
    /// dimensions), one row per step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(state_column_names(self.dim));
        w.write_record(&header)?;
        for (i, s) in self.states().enumerate() {
            let mut row = vec![format!("{}", self.time(i))];
            row.extend(s.iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<trajectory csv>", e))?;
        Ok(())
    }
}

/// Column names for a state vector of dimension `dim`.
pub fn state_column_names(dim: usize) -> Vec<String> {
    if dim % 2 == 0 {
        let m = dim / 2;
        (1..=m)
            .map(|k| format!("psi_{k}"))
            .chain((1..=m).map(|k| format!("psidot_{k}")))
            .collect()
    } else {
        (1..=dim).map(|k| format!("x_{k}")).collect()
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn step<F: VectorField + ?Sized>(&mut self, f: &F, x: &[f64], dt: f64, out: &mut [f64]) {
        let n = x.len();
        f.eval_into(x, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * dt * self.k1[i];
        }
        f.eval_into(&self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * dt * self.k2[i];
        }
        f.eval_into(&self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + dt * self.k3[i];
        }
        f.eval_into(&self.tmp, &mut self.k4);
        for i in 0..n {
            out[i] = x[i] + dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// One classical Runge-Kutta step.
pub fn rk4_step<F: VectorField + ?Sized>(f: &F, x: &[f64], dt: f64) -> Result<Vec<f64>> {
    if x.len() != f.dim() {
        return Err(Error::Dimension {
            expected: f.dim(),
            got: x.len(),
        });
    }
    let mut ws = Rk4Workspace::new(x.len());
    let mut out = vec![0.0; x.len()];
    ws.step(f, x, dt, &mut out);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite { t: dt })
    }
}

/// Integrates `x0` over `[0, horizon]`, recording every step.
///
/// A non-finite state or a norm above `cfg.blowup_norm` truncates the
/// trajectory (the offending state is not recorded) and marks it unconverged.
pub fn simulate<F: VectorField + ?Sized>(f: &F, x0: &[f64], cfg: &SimConfig) -> Trajectory {
    let n = x0.len();
    assert_eq!(n, f.dim(), "initial state dimension");
    let steps = cfg.steps();
    let mut states = Vec::with_capacity((steps + 1) * n);
    states.extend_from_slice(x0);
    let mut traj_ok = x0.iter().all(|v| v.is_finite()) && norm(x0) <= cfg.blowup_norm;
    let mut ws = Rk4Workspace::new(n);
    let mut next = vec![0.0; n];
    if traj_ok {
        for i in 0..steps {
            let cur = &states[i * n..(i + 1) * n];
            ws.step(f, cur, cfg.dt, &mut next);
            if !next.iter().all(|v| v.is_finite()) || norm(&next) > cfg.blowup_norm {
                traj_ok = false;
                break;
            }
            states.extend_from_slice(&next);
        }
    }
    let mut traj = Trajectory {
        dim: n,
        dt: cfg.dt,
        states,
        expected_len: steps + 1,
        converged: false,
    };
    traj.converged = traj_ok && classify_stable(&traj, cfg);
    traj
}

/// Strict verdict `||phi(x, t_n)|| < xi` on a full-horizon trajectory.
pub fn classify_stable(traj: &Trajectory, cfg: &SimConfig) -> bool {
    if traj.is_empty() || traj.truncated() {
        return false;
    }
    let last = traj.final_state();
    last.iter().all(|v| v.is_finite()) && norm(last) < cfg.convergence_radius
}

/// Outcome of an early-exit stability check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyExit {
    pub stable: bool,
    /// Steps taken before the verdict (0 if the initial state already qualifies).
    pub steps: usize,
}

/// Index of the first recorded state inside `region`.
pub fn first_entry(traj: &Trajectory, region: impl Fn(&[f64]) -> bool) -> Option<usize> {
    traj.states().position(region)
}

/// Integrates until the state enters a certified region, without running the
/// full horizon. Reports unstable if the horizon ends or the state blows up
/// before entry.
pub fn early_exit_stable<F: VectorField + ?Sized>(
    f: &F,
    x0: &[f64],
    cfg: &SimConfig,
    region: impl Fn(&[f64]) -> bool,
) -> EarlyExit {
    let n = x0.len();
    if region(x0) {
        return EarlyExit { stable: true, steps: 0 };
    }
    let mut ws = Rk4Workspace::new(n);
    let mut cur = x0.to_vec();
    let mut next = vec![0.0; n];
    for i in 1..=cfg.steps() {
        ws.step(f, &cur, cfg.dt, &mut next);
        if !next.iter().all(|v| v.is_finite()) || norm(&next) > cfg.blowup_norm {
            return EarlyExit { stable: false, steps: i };
        }
        if region(&next) {
            return EarlyExit { stable: true, steps: i };
        }
        std::mem::swap(&mut cur, &mut next);
    }
    EarlyExit {
        stable: false,
        steps: cfg.steps(),
    }
}
