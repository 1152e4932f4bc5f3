//! Energy function and the certified ellipsoidal region of attraction
//! `psi^T L psi + psidot^T Lambda psidot <= C_lambda`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::PowerSystem;
use crate::error::{Error, Result};

/// Energy function of the lossless swing dynamics.
///
/// Each branch contributes its potential
/// `(1/B_ij) [cos th*_ij - cos(th*_ij + psi_ij) - psi_ij sin th*_ij]` once,
/// plus kinetic energy `1/2 sum m_i psidot_i^2`. Along trajectories the
/// derivative is `-sum d_i psidot_i^2`.
pub fn energy_v_star(sys: &PowerSystem, psi: &[f64], psi_dot: &[f64]) -> f64 {
    let angle = |bus: usize| sys.bus_slot(bus).map_or(0.0, |k| psi[k]);
    let th = sys.steady_angles();
    let potential: f64 = sys
        .branches()
        .iter()
        .map(|br| {
            let d = th[br.from] - th[br.to];
            let p = angle(br.from) - angle(br.to);
            br.coupling() * (d.cos() - (d + p).cos() - p * d.sin())
        })
        .sum();
    let kinetic: f64 = sys
        .machine_buses()
        .iter()
        .zip(psi_dot)
        .map(|(&bus, w)| 0.5 * sys.buses()[bus].inertia * w * w)
        .sum();
    potential + kinetic
}

/// [`energy_v_star`] on a flat `(psi, psi_dot)` state.
pub fn energy_of_state(sys: &PowerSystem, x: &[f64]) -> f64 {
    let m = sys.n_machines();
    energy_v_star(sys, &x[..m], &x[m..])
}

/// `2 cos l - (pi - 2 l) sin l`.
pub fn certificate_margin(lambda: f64) -> f64 {
    2.0 * lambda.cos() - (PI - 2.0 * lambda) * lambda.sin()
}

#[derive(Debug, Clone)]
pub struct CertifiedRoa {
    /// Machine-coordinate Laplacian with weights `1/B_ij`, swing bus grounded.
    pub laplacian: DMatrix<f64>,
    /// Diagonal of `Lambda = diag(m)`.
    pub inertia: DVector<f64>,
    pub c_lambda: f64,
    /// Largest steady-state angle difference across a branch.
    pub lambda: f64,
}

pub fn build_certified(sys: &PowerSystem) -> Result<CertifiedRoa> {
    let m = sys.n_machines();
    let th = sys.steady_angles();
    let mut laplacian = DMatrix::zeros(m, m);
    let mut lambda: f64 = 0.0;
    let mut min_coupling = f64::INFINITY;
    for br in sys.branches() {
        let w = br.coupling();
        lambda = lambda.max((th[br.from] - th[br.to]).abs());
        min_coupling = min_coupling.min(w);
        let a = sys.bus_slot(br.from);
        let b = sys.bus_slot(br.to);
        if let Some(i) = a {
            laplacian[(i, i)] += w;
        }
        if let Some(j) = b {
            laplacian[(j, j)] += w;
        }
        if let (Some(i), Some(j)) = (a, b) {
            laplacian[(i, j)] -= w;
            laplacian[(j, i)] -= w;
        }
    }
    let c_lambda = min_coupling * certificate_margin(lambda);
    if !(c_lambda > 0.0) {
        return Err(Error::CertificateVoid { c_lambda, lambda });
    }
    let inertia = DVector::from_iterator(
        m,
        sys.machine_buses().iter().map(|&b| sys.buses()[b].inertia),
    );
    Ok(CertifiedRoa {
        laplacian,
        inertia,
        c_lambda,
        lambda,
    })
}

impl CertifiedRoa {
    pub fn n_machines(&self) -> usize {
        self.inertia.len()
    }

    /// `psi^T L psi + psidot^T Lambda psidot` on a flat state.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let m = self.n_machines();
        let (psi, psi_dot) = x.split_at(m);
        let mut q = 0.0;
        for i in 0..m {
            let mut row = 0.0;
            for j in 0..m {
                row += self.laplacian[(i, j)] * psi[j];
            }
            q += psi[i] * row + self.inertia[i] * psi_dot[i] * psi_dot[i];
        }
        q
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.quadratic_form(x) <= self.c_lambda
    }

    /// Full state-space matrix `blockdiag(L, Lambda)`.
    pub fn form_matrix(&self) -> DMatrix<f64> {
        let m = self.n_machines();
        let mut q = DMatrix::zeros(2 * m, 2 * m);
        q.view_mut((0, 0), (m, m)).copy_from(&self.laplacian);
        for i in 0..m {
            q[(m + i, m + i)] = self.inertia[i];
        }
        q
    }

    /// Closed boundary of the ellipse cut by the plane of state axes
    /// `(a, b)` through the origin; empty if the restricted form is not
    /// positive definite.
    pub fn boundary_polyline(&self, a: usize, b: usize, points: usize) -> Vec<(f64, f64)> {
        let q = self.form_matrix();
        let (qaa, qab, qbb) = (q[(a, a)], q[(a, b)], q[(b, b)]);
        if !(qaa > 0.0 && qaa * qbb - qab * qab > 0.0) {
            return Vec::new();
        }
        (0..=points)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / points as f64;
                let (u, v) = (t.cos(), t.sin());
                let r = (self.c_lambda / (qaa * u * u + 2.0 * qab * u * v + qbb * v * v)).sqrt();
                (r * u, r * v)
            })
            .collect()
    }
}

/// Checked membership in the certified ellipsoid.
pub fn certified_membership(roa: &CertifiedRoa, psi: &[f64], psi_dot: &[f64]) -> Result<bool> {
    let m = roa.n_machines();
    for part in [psi, psi_dot] {
        if part.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: part.len(),
            });
        }
    }
    let mut x = psi.to_vec();
    x.extend_from_slice(psi_dot);
    Ok(roa.contains(&x))
}
