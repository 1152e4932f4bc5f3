//! Swing-equation dynamics in perturbed coordinates.
//!
//! The state of an `M`-machine system is the flat vector
//! `(psi_1..psi_M, psidot_1..psidot_M)` where `psi_i = theta_i - theta*_i`.
//! A swing (infinite) bus, when present, is held at zero and carries no state.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance on the steady-state power balance, per-unit.
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-8;

/// An autonomous vector field `x' = f(x)` with an equilibrium at the origin.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    /// Writes `f(x)` into `out`. Both slices have length `dim()`.
    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        out
    }

    /// Jacobian `df/dx` at `x`. Central differences unless overridden.
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let mut jac = DMatrix::zeros(n, n);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            let h = 1e-6 * (1.0 + x[j].abs());
            xp[j] = x[j] + h;
            self.eval_into(&xp, &mut fp);
            xp[j] = x[j] - h;
            self.eval_into(&xp, &mut fm);
            xp[j] = x[j];
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }
}

/// Linear system `x' = A x`. Used as an analytic reference model.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    a: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimension {
                expected: a.nrows(),
                got: a.ncols(),
            });
        }
        Ok(Self { a })
    }

    /// The scalar decay `x' = -x`.
    pub fn scalar_decay() -> Self {
        Self {
            a: DMatrix::from_element(1, 1, -1.0),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl VectorField for LinearSystem {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.a[(i, j)] * x[j];
            }
            out[i] = acc;
        }
    }

    fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        self.a.clone()
    }
}

/// One bus with a synchronous machine (or the swing bus).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Machine {
    /// Inertia `m_i`, per-unit s^2.
    pub inertia: f64,
    /// Damping `d_i`, per-unit s.
    pub damping: f64,
    /// Mechanical power injection `p_i`, per-unit.
    pub power: f64,
}

/// A lossless branch. The coupling strength is `1 / susceptance`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub susceptance: f64,
}

impl Branch {
    pub fn coupling(&self) -> f64 {
        1.0 / self.susceptance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleUnit {
    Rad,
    Deg,
}

/// On-disk system description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub machines: Vec<Machine>,
    pub branches: Vec<Branch>,
    pub steady_angles: Vec<f64>,
    pub angle_unit: AngleUnit,
    pub swing_bus: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Neighbor {
    bus: usize,
    coupling: f64,
    /// `theta*_i - theta*_j` for the owning bus `i`.
    steady_diff: f64,
}

/// A lossless machine network with fixed steady-state angles.
///
/// Immutable after construction; every constructor enforces positive
/// susceptances, a connected branch graph and the steady-state power balance.
#[derive(Debug, Clone)]
pub struct PowerSystem {
    buses: Vec<Machine>,
    branches: Vec<Branch>,
    steady_angles: Vec<f64>,
    swing_bus: Option<usize>,
    /// Bus index of every state-carrying machine, in state order.
    machine_buses: Vec<usize>,
    /// State slot of each bus, `None` for the swing bus.
    bus_slot: Vec<Option<usize>>,
    neighbors: Vec<Vec<Neighbor>>,
}

impl PowerSystem {
    pub fn new(
        buses: Vec<Machine>,
        branches: Vec<Branch>,
        steady_angles: Vec<f64>,
        swing_bus: Option<usize>,
        residual_tol: f64,
    ) -> Result<Self> {
        let n = buses.len();
        if n == 0 {
            return Err(Error::Topology("system has no machines".into()));
        }
        if steady_angles.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: steady_angles.len(),
            });
        }
        if let Some(s) = swing_bus {
            if s >= n {
                return Err(Error::Index(format!("swing bus {s} out of range 0..{n}")));
            }
        }
        for (i, m) in buses.iter().enumerate() {
            if !(m.inertia.is_finite() && m.damping.is_finite() && m.power.is_finite()) {
                return Err(Error::Parse(format!("machine {i} has non-finite parameters")));
            }
            if m.inertia < 0.0 || m.damping < 0.0 {
                return Err(Error::Parse(format!(
                    "machine {i} has negative inertia or damping"
                )));
            }
            if Some(i) != swing_bus && m.inertia == 0.0 {
                return Err(Error::Parse(format!(
                    "machine {i} has zero inertia; eliminate load buses before loading"
                )));
            }
        }
        if steady_angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::Parse("non-finite steady-state angle".into()));
        }

        let mut neighbors = vec![Vec::new(); n];
        for (k, br) in branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                return Err(Error::Index(format!(
                    "branch {k} references bus outside 0..{n}"
                )));
            }
            if br.from == br.to {
                return Err(Error::Topology(format!("branch {k} is a self-loop")));
            }
            if !(br.susceptance > 0.0 && br.susceptance.is_finite()) {
                return Err(Error::Parse(format!(
                    "branch {k} susceptance must be positive, got {}",
                    br.susceptance
                )));
            }
            let c = br.coupling();
            let d = steady_angles[br.from] - steady_angles[br.to];
            neighbors[br.from].push(Neighbor {
                bus: br.to,
                coupling: c,
                steady_diff: d,
            });
            neighbors[br.to].push(Neighbor {
                bus: br.from,
                coupling: c,
                steady_diff: -d,
            });
        }

        // connectivity over all buses
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for nb in &neighbors[i] {
                if !seen[nb.bus] {
                    seen[nb.bus] = true;
                    queue.push_back(nb.bus);
                }
            }
        }
        if let Some(lonely) = seen.iter().position(|s| !s) {
            return Err(Error::Topology(format!(
                "machine graph is disconnected (bus {lonely} unreachable from bus 0)"
            )));
        }

        for i in 0..n {
            if Some(i) == swing_bus {
                continue;
            }
            let flow: f64 = neighbors[i]
                .iter()
                .map(|nb| nb.coupling * nb.steady_diff.sin())
                .sum();
            let residual = (buses[i].power - flow).abs();
            if residual > residual_tol {
                return Err(Error::Equilibrium {
                    machine: i,
                    residual,
                    tolerance: residual_tol,
                });
            }
        }

        let mut bus_slot = vec![None; n];
        let mut machine_buses = Vec::with_capacity(n);
        for i in 0..n {
            if Some(i) != swing_bus {
                bus_slot[i] = Some(machine_buses.len());
                machine_buses.push(i);
            }
        }

        Ok(Self {
            buses,
            branches,
            steady_angles,
            swing_bus,
            machine_buses,
            bus_slot,
            neighbors,
        })
    }

    /// Number of state-carrying machines (the swing bus excluded).
    pub fn n_machines(&self) -> usize {
        self.machine_buses.len()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_machines()
    }

    pub fn buses(&self) -> &[Machine] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn steady_angles(&self) -> &[f64] {
        &self.steady_angles
    }

    pub fn swing_bus(&self) -> Option<usize> {
        self.swing_bus
    }

    /// Bus index of each machine in state order.
    pub fn machine_buses(&self) -> &[usize] {
        &self.machine_buses
    }

    pub(crate) fn bus_slot(&self, bus: usize) -> Option<usize> {
        self.bus_slot[bus]
    }

    /// Largest steady-state power-balance residual over non-swing buses.
    pub fn steady_state_residual(&self) -> f64 {
        self.machine_buses
            .iter()
            .map(|&i| {
                let flow: f64 = self.neighbors[i]
                    .iter()
                    .map(|nb| nb.coupling * nb.steady_diff.sin())
                    .sum();
                (self.buses[i].power - flow).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Angle deviation of `bus` in state `x`; zero for the swing bus.
    #[inline]
    fn bus_psi(&self, x: &[f64], bus: usize) -> f64 {
        match self.bus_slot[bus] {
            Some(k) => x[k],
            None => 0.0,
        }
    }

    /// Checked evaluation of the perturbed swing equations.
    pub fn vector_field(&self, x: &StateVector) -> Result<StateVector> {
        if x.dim() != self.state_dim() {
            return Err(Error::Dimension {
                expected: self.state_dim(),
                got: x.dim(),
            });
        }
        if x.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("state has non-finite entries".into()));
        }
        Ok(StateVector(self.eval(x.as_slice())))
    }

    pub fn to_file(&self) -> SystemFile {
        SystemFile {
            name: None,
            description: None,
            machines: self.buses.clone(),
            branches: self.branches.clone(),
            steady_angles: self.steady_angles.clone(),
            angle_unit: AngleUnit::Rad,
            swing_bus: self.swing_bus,
        }
    }
}

impl VectorField for PowerSystem {
    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let m = self.n_machines();
        let (psi_dot_out, acc_out) = out.split_at_mut(m);
        psi_dot_out.copy_from_slice(&x[m..2 * m]);
        for (k, &i) in self.machine_buses.iter().enumerate() {
            let psi_i = x[k];
            let mut coupling = 0.0;
            for nb in &self.neighbors[i] {
                let psi_ij = psi_i - self.bus_psi(x, nb.bus);
                coupling += nb.coupling * (nb.steady_diff.sin() - (nb.steady_diff + psi_ij).sin());
            }
            let mach = &self.buses[i];
            acc_out[k] = (coupling - mach.damping * x[m + k]) / mach.inertia;
        }
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let m = self.n_machines();
        let mut jac = DMatrix::zeros(2 * m, 2 * m);
        for k in 0..m {
            jac[(k, m + k)] = 1.0;
        }
        for (k, &i) in self.machine_buses.iter().enumerate() {
            let mach = &self.buses[i];
            let psi_i = x[k];
            for nb in &self.neighbors[i] {
                let psi_ij = psi_i - self.bus_psi(x, nb.bus);
                let w = nb.coupling * (nb.steady_diff + psi_ij).cos() / mach.inertia;
                jac[(m + k, k)] -= w;
                if let Some(l) = self.bus_slot[nb.bus] {
                    jac[(m + k, l)] += w;
                }
            }
            jac[(m + k, m + k)] = -mach.damping / mach.inertia;
        }
        jac
    }
}

/// Flat state `(psi, psi_dot)` of dimension `2 * n_machines`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n_machines: usize) -> Self {
        Self(vec![0.0; 2 * n_machines])
    }

    pub fn from_parts(psi: &[f64], psi_dot: &[f64]) -> Result<Self> {
        if psi.len() != psi_dot.len() {
            return Err(Error::Dimension {
                expected: psi.len(),
                got: psi_dot.len(),
            });
        }
        let mut v = psi.to_vec();
        v.extend_from_slice(psi_dot);
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn psi(&self) -> &[f64] {
        &self.0[..self.0.len() / 2]
    }

    pub fn psi_dot(&self) -> &[f64] {
        &self.0[self.0.len() / 2..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Single machine connected to an infinite bus (bus 1, held at zero).
pub fn build_smib() -> PowerSystem {
    let susceptance = 0.1;
    let theta = (0.05f64).asin();
    let power = theta.sin() / susceptance;
    PowerSystem::new(
        vec![
            Machine {
                inertia: 12.0,
                damping: 20.0,
                power,
            },
            Machine {
                inertia: 0.0,
                damping: 0.0,
                power: -power,
            },
        ],
        vec![Branch {
            from: 0,
            to: 1,
            susceptance,
        }],
        vec![theta, 0.0],
        Some(1),
        DEFAULT_RESIDUAL_TOL,
    )
    .expect("SMIB parameters are consistent")
}

impl SystemFile {
    pub fn into_system(self, residual_tol: f64) -> Result<PowerSystem> {
        let scale = match self.angle_unit {
            AngleUnit::Rad => 1.0,
            AngleUnit::Deg => std::f64::consts::PI / 180.0,
        };
        let angles = self.steady_angles.iter().map(|a| a * scale).collect();
        PowerSystem::new(
            self.machines,
            self.branches,
            angles,
            self.swing_bus,
            residual_tol,
        )
    }
}

pub fn parse_system(text: &str, residual_tol: f64) -> Result<PowerSystem> {
    let file: SystemFile = serde_json::from_str(text)?;
    file.into_system(residual_tol)
}

/// Loads a system description file with the default residual tolerance.
pub fn load_system(path: impl AsRef<Path>) -> Result<PowerSystem> {
    load_system_with_tolerance(path, DEFAULT_RESIDUAL_TOL)
}

pub fn load_system_with_tolerance(path: impl AsRef<Path>, residual_tol: f64) -> Result<PowerSystem> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    parse_system(&text, residual_tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn smib_parameters() {
        let sys = build_smib();
        assert_eq!(sys.n_machines(), 1);
        assert_eq!(sys.state_dim(), 2);
        assert_abs_diff_eq!(sys.steady_angles()[0].sin(), 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(sys.branches()[0].coupling(), 10.0, epsilon = 1e-12);
        assert!(sys.steady_state_residual() <= 1e-12);
    }

    #[test]
    fn smib_field_at_origin_is_zero() {
        let sys = build_smib();
        let f = sys.vector_field(&StateVector::zeros(1)).unwrap();
        assert!(f.as_slice().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn smib_field_values() {
        let sys = build_smib();
        let th = 0.05f64.asin();
        let f = sys.eval(&[0.1, 0.0]);
        let expected = 10.0 * (0.05 - (th + 0.1).sin()) / 12.0;
        assert_abs_diff_eq!(f[1], expected, epsilon = 1e-14);
        assert_abs_diff_eq!(f[1], -0.08290, epsilon = 1e-4);

        let f = sys.eval(&[0.0, 0.2]);
        assert_abs_diff_eq!(f[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], -1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn dimension_error() {
        let sys = build_smib();
        let err = sys.vector_field(&StateVector::new(vec![0.0; 3])).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 2, got: 3 }));
    }

    #[test]
    fn smib_linearization_is_hurwitz() {
        let sys = build_smib();
        let jac = sys.jacobian(&[0.0, 0.0]);
        for ev in jac.complex_eigenvalues().iter() {
            assert!(ev.re < 0.0, "eigenvalue {ev}");
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let sys = triangle_network(0.2);
        let x = [0.3, -0.4, 0.1, 0.7, -0.2, 0.05];
        let analytic = sys.jacobian(&x);
        struct Fd<'a>(&'a PowerSystem);
        impl VectorField for Fd<'_> {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn eval_into(&self, x: &[f64], out: &mut [f64]) {
                self.0.eval_into(x, out)
            }
        }
        let numeric = Fd(&sys).jacobian(&x);
        assert!((analytic - numeric).abs().max() < 1e-7);
    }

    /// Three machines on a triangle, no swing bus.
    fn triangle_network(offset: f64) -> PowerSystem {
        let angles = vec![offset, -0.1, 0.05];
        let branches = vec![
            Branch { from: 0, to: 1, susceptance: 0.2 },
            Branch { from: 1, to: 2, susceptance: 0.5 },
            Branch { from: 0, to: 2, susceptance: 0.25 },
        ];
        let mut machines = vec![
            Machine { inertia: 2.0, damping: 1.0, power: 0.0 },
            Machine { inertia: 3.0, damping: 0.5, power: 0.0 },
            Machine { inertia: 1.5, damping: 0.8, power: 0.0 },
        ];
        for (i, m) in machines.iter_mut().enumerate() {
            m.power = branches
                .iter()
                .map(|b| {
                    if b.from == i {
                        b.coupling() * (angles[i] - angles[b.to]).sin()
                    } else if b.to == i {
                        b.coupling() * (angles[i] - angles[b.from]).sin()
                    } else {
                        0.0
                    }
                })
                .sum();
        }
        PowerSystem::new(machines, branches, angles, None, DEFAULT_RESIDUAL_TOL).unwrap()
    }

    #[test]
    fn coupling_terms_cancel_without_swing_bus() {
        // sum_i (m_i psi_ddot_i + d_i psi_dot_i) is the total coupling, which
        // cancels pairwise on a lossless network.
        let sys = triangle_network(0.3);
        let x = [0.4, -0.7, 1.1, 0.2, -0.3, 0.9];
        let f = sys.eval(&x);
        let total: f64 = sys
            .buses()
            .iter()
            .enumerate()
            .map(|(k, m)| m.inertia * f[3 + k] + m.damping * x[3 + k])
            .sum();
        assert!(total.abs() < 1e-12, "total coupling {total}");
    }

    #[test]
    fn rejects_bad_systems() {
        let smib = build_smib().to_file();

        let mut bad = smib.clone();
        bad.machines[0].power += 0.1;
        assert!(matches!(bad.into_system(DEFAULT_RESIDUAL_TOL), Err(Error::Equilibrium { .. })));

        let mut bad = smib.clone();
        bad.branches[0].susceptance = -0.1;
        assert!(matches!(bad.into_system(DEFAULT_RESIDUAL_TOL), Err(Error::Parse(_))));

        let mut bad = smib.clone();
        bad.machines.push(Machine { inertia: 1.0, damping: 1.0, power: 0.0 });
        bad.steady_angles.push(0.0);
        assert!(matches!(bad.into_system(DEFAULT_RESIDUAL_TOL), Err(Error::Topology(_))));
    }

    #[test]
    fn parser_rejects_unknown_fields() {
        let text = r#"{"machines": [], "branches": [], "steady_angles": [],
            "angle_unit": "rad", "swing_bus": null, "extra": 1}"#;
        assert!(matches!(parse_system(text, 1e-8), Err(Error::Parse(_))));
    }

    #[test]
    fn degree_angles_are_converted() {
        let mut file = build_smib().to_file();
        file.steady_angles = file.steady_angles.iter().map(|a| a.to_degrees()).collect();
        file.angle_unit = AngleUnit::Deg;
        let sys = file.into_system(DEFAULT_RESIDUAL_TOL).unwrap();
        assert_abs_diff_eq!(sys.steady_angles()[0], 0.05f64.asin(), epsilon = 1e-14);
    }
}
