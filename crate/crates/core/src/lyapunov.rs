//! Converse Lyapunov estimates from simulated trajectories.
//!
//! `V(x) = integral_0^inf alpha(||phi(x, t)||) dt` is approximated by the
//! composite trapezoidal rule on the recorded grid. The discretization error
//! is bounded by `kappa n dt^3 / 12 + eta^m ||phi(x, t_n)||^m / (m lambda)`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::dynamics::VectorField;
use crate::error::{Error, Result};
use crate::integrator::Trajectory;

/// Trajectory states with a smaller norm are skipped when estimating kappa.
pub const NORM_FLOOR: f64 = 1e-9;
/// Margin applied to the slowest decay rate of the linearization.
pub const DECAY_SAFETY_FACTOR: f64 = 0.9;

/// Strictly increasing, twice differentiable `alpha` with `alpha(0) = 0`
/// and `alpha(z) <= z^m`.
pub trait GammaFunction: Sync {
    fn value(&self, z: f64) -> f64;
    fn d1(&self, z: f64) -> f64;
    fn d2(&self, z: f64) -> f64;
    fn growth_exponent(&self) -> f64;
}

/// `alpha(z) = z^2`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AlphaSquare;

impl GammaFunction for AlphaSquare {
    fn value(&self, z: f64) -> f64 {
        z * z
    }
    fn d1(&self, z: f64) -> f64 {
        2.0 * z
    }
    fn d2(&self, _z: f64) -> f64 {
        2.0
    }
    fn growth_exponent(&self) -> f64 {
        2.0
    }
}

/// Value and derivatives of `alpha(z) = z^2` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaValue {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    pub m: f64,
}

pub fn alpha_square(z: f64) -> GammaValue {
    let a = AlphaSquare;
    GammaValue {
        value: a.value(z),
        d1: a.d1(z),
        d2: a.d2(z),
        m: a.growth_exponent(),
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trapezoidal quadrature of `alpha(||phi||)` over whatever the trajectory
/// recorded, without checking convergence.
pub fn trapezoid_v<A: GammaFunction + ?Sized>(traj: &Trajectory, alpha: &A) -> f64 {
    let n = traj.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (i, s) in traj.states().enumerate() {
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        sum += w * alpha.value(norm(s));
    }
    sum * traj.dt()
}

/// Discretized converse Lyapunov value of the trajectory's initial state.
pub fn estimate_v<A: GammaFunction + ?Sized>(traj: &Trajectory, alpha: &A) -> Result<f64> {
    if !traj.converged {
        return Err(Error::NotConverged);
    }
    Ok(trapezoid_v(traj, alpha))
}

/// Constants of the discretization error bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBoundParams {
    /// Bound on `|d^2/dt^2 alpha(||phi||)|` over `[0, t_n]`.
    pub kappa: f64,
    pub eta: f64,
    pub lambda: f64,
    pub m: f64,
}

impl ErrorBoundParams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.kappa, self.eta, self.lambda, self.m]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "error bound constants must be positive: {self:?}"
            )))
        }
    }
}

/// `kappa n dt^3 / 12 + eta^m tail^m / (m lambda)`.
pub fn error_bound(params: &ErrorBoundParams, n: usize, dt: f64, tail_norm: f64) -> f64 {
    let quad = params.kappa * n as f64 * dt.powi(3) / 12.0;
    let tail = (params.eta * tail_norm).powf(params.m) / (params.m * params.lambda);
    quad + tail
}

/// Second time derivative of `alpha(||phi(t)||)` at state `phi`, given
/// `f = f(phi)` and the directional derivative `jf = f'(phi) f`.
pub fn alpha_second_time_derivative<A: GammaFunction + ?Sized>(
    alpha: &A,
    phi: &[f64],
    f: &[f64],
    jf: &[f64],
) -> f64 {
    let r = norm(phi);
    let pf = dot(phi, f);
    let ff = dot(f, f);
    let pjf = dot(phi, jf);
    alpha.d2(r) * pf * pf / (r * r) + alpha.d1(r) * ((ff + pjf) / r - pf * pf / (r * r * r))
}

/// `f'(x) v` by central differences with step `1e-6 (1 + ||x||)`.
fn jvp<F: VectorField + ?Sized>(field: &F, x: &[f64], v: &[f64]) -> Vec<f64> {
    let n = x.len();
    let vn = norm(v);
    if vn == 0.0 {
        return vec![0.0; n];
    }
    let h = 1e-6 * (1.0 + norm(x));
    let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b / vn).collect();
    let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b / vn).collect();
    let fp = field.eval(&xp);
    let fm = field.eval(&xm);
    fp.iter().zip(&fm).map(|(p, m)| vn * (p - m) / (2.0 * h)).collect()
}

/// Largest `|d^2/dt^2 alpha(||phi||)|` over the recorded states.
pub fn estimate_kappa<F, A>(traj: &Trajectory, field: &F, alpha: &A) -> Result<f64>
where
    F: VectorField + ?Sized,
    A: GammaFunction + ?Sized,
{
    let mut kappa: Option<f64> = None;
    let mut f = vec![0.0; traj.dim()];
    for phi in traj.states() {
        if norm(phi) <= NORM_FLOOR {
            continue;
        }
        field.eval_into(phi, &mut f);
        let jf = jvp(field, phi, &f);
        let v = alpha_second_time_derivative(alpha, phi, &f, &jf).abs();
        kappa = Some(kappa.map_or(v, |k| k.max(v)));
    }
    kappa.ok_or(Error::DegenerateTrajectory { floor: NORM_FLOOR })
}

/// Exponential envelope `||phi(t)|| <= eta ||phi(t_n)|| e^{-lambda (t - t_n)}`
/// from the linearization at the origin.
///
/// `lambda` is the slowest decay rate scaled by [`DECAY_SAFETY_FACTOR`];
/// `eta` is the 2-norm condition number of the unit-normalized eigenvector
/// matrix.
pub fn estimate_decay_envelope<F: VectorField + ?Sized>(field: &F) -> Result<(f64, f64)> {
    let n = field.dim();
    let jac = field.jacobian(&vec![0.0; n]);
    let eigs = jac.complex_eigenvalues();
    let max_real = eigs.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
    let scale = jac.abs().max().max(1.0);
    if max_real >= -1e-9 * scale {
        return Err(Error::NotHurwitz { max_real });
    }
    let lambda = max_real.abs() * DECAY_SAFETY_FACTOR;

    let jc: DMatrix<Complex64> = jac.map(|v| Complex64::new(v, 0.0));
    let mut vecs = DMatrix::<Complex64>::zeros(n, n);
    for (k, mu) in eigs.iter().enumerate() {
        let shifted = &jc - DMatrix::<Complex64>::identity(n, n) * *mu;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.expect("requested right singular vectors");
        let (idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, s)| if *s < acc.1 { (i, *s) } else { acc });
        for i in 0..n {
            vecs[(i, k)] = v_t[(idx, i)].conj();
        }
    }
    let sv = vecs.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let eta = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    Ok((eta, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{build_smib, LinearSystem, Machine, PowerSystem};
    use crate::integrator::{simulate, SimConfig};
    use approx::assert_abs_diff_eq;

    #[test]
    fn alpha_square_values() {
        assert_eq!(alpha_square(0.0).value, 0.0);
        let g = alpha_square(1.5);
        assert_eq!(g.value, 2.25);
        assert_eq!(g.d1, 3.0);
        assert_eq!(g.d2, 2.0);
        assert_eq!(g.m, 2.0);
    }

    #[test]
    fn alpha_square_is_class_gamma() {
        let a = AlphaSquare;
        let grid: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
        for w in grid.windows(2) {
            assert!(a.value(w[1]) > a.value(w[0]));
        }
        for z in grid {
            assert!(a.value(z) <= z.powf(a.growth_exponent()));
        }
    }

    #[test]
    fn origin_estimate_is_zero() {
        let traj = simulate(&build_smib(), &[0.0, 0.0], &SimConfig::default());
        assert_eq!(estimate_v(&traj, &AlphaSquare).unwrap(), 0.0);
    }

    #[test]
    fn unconverged_trajectory_is_rejected() {
        let traj = simulate(&build_smib(), &[10.0, 10.0], &SimConfig::default());
        assert!(matches!(estimate_v(&traj, &AlphaSquare), Err(Error::NotConverged)));
    }

    #[test]
    fn scalar_decay_estimate() {
        let cfg = SimConfig { horizon: 20.0, ..SimConfig::default() };
        let traj = simulate(&LinearSystem::scalar_decay(), &[1.0], &cfg);
        let v = estimate_v(&traj, &AlphaSquare).unwrap();
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-3);
    }

    #[test]
    fn longer_horizon_never_decreases_estimate() {
        let sys = build_smib();
        let mut prev = 0.0;
        for horizon in [5.0, 10.0, 20.0, 40.0] {
            let cfg = SimConfig { horizon, ..SimConfig::default() };
            let v = trapezoid_v(&simulate(&sys, &[0.8, 0.3], &cfg), &AlphaSquare);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn error_bound_formula() {
        let zero = ErrorBoundParams { kappa: 0.0, eta: 1.0, lambda: 1.0, m: 2.0 };
        assert_eq!(error_bound(&zero, 100, 0.01, 0.0), 0.0);
        let p = ErrorBoundParams { kappa: 12.0, eta: 1.0, lambda: 1.0, m: 2.0 };
        assert_abs_diff_eq!(error_bound(&p, 100, 0.01, 0.01), 1.5e-4, epsilon = 1e-15);
        assert!(zero.validate().is_err());
        assert!(p.validate().is_ok());
    }

    #[test]
    fn kappa_of_scalar_decay() {
        // alpha(x(t)) = e^{-2t}, second derivative 4 e^{-2t}, largest at t = 0
        let cfg = SimConfig { horizon: 5.0, ..SimConfig::default() };
        let sys = LinearSystem::scalar_decay();
        let traj = simulate(&sys, &[1.0], &cfg);
        let kappa = estimate_kappa(&traj, &sys, &AlphaSquare).unwrap();
        assert_abs_diff_eq!(kappa, 4.0, epsilon = 1e-6);
    }

    #[test]
    fn kappa_matches_second_differences_on_smib() {
        let sys = build_smib();
        let cfg = SimConfig { horizon: 30.0, ..SimConfig::default() };
        let traj = simulate(&sys, &[0.5, 0.0], &cfg);
        let kappa = estimate_kappa(&traj, &sys, &AlphaSquare).unwrap();
        assert!(kappa.is_finite() && kappa > 0.0);

        let a: Vec<f64> = traj.states().map(|s| AlphaSquare.value(norm(s))).collect();
        let dt = traj.dt();
        let fd_max = a
            .windows(3)
            .map(|w| ((w[2] - 2.0 * w[1] + w[0]) / (dt * dt)).abs())
            .fold(0.0, f64::max);
        assert!((kappa - fd_max).abs() <= 1e-3 * kappa, "kappa {kappa} vs fd {fd_max}");
    }

    #[test]
    fn degenerate_trajectory() {
        let sys = build_smib();
        let traj = simulate(&sys, &[0.0, 0.0], &SimConfig { horizon: 1.0, ..SimConfig::default() });
        assert!(matches!(
            estimate_kappa(&traj, &sys, &AlphaSquare),
            Err(Error::DegenerateTrajectory { .. })
        ));
    }

    #[test]
    fn decay_envelope_of_scalar_decay() {
        let (eta, lambda) = estimate_decay_envelope(&LinearSystem::scalar_decay()).unwrap();
        assert_abs_diff_eq!(eta, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lambda, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn decay_envelope_of_smib() {
        // s^2 + (d/m) s + (k cos th / m) = 0 with complex roots
        let th = 0.05f64.asin();
        let a = 10.0 * th.cos() / 12.0;
        let b = 20.0 / 12.0;
        let disc = b * b - 4.0 * a;
        assert!(disc < 0.0);
        let slowest = b / 2.0;
        let (eta, lambda) = estimate_decay_envelope(&build_smib()).unwrap();
        assert_abs_diff_eq!(lambda, 0.9 * slowest, epsilon = 1e-9);
        assert!(eta >= 1.0 && eta.is_finite());
    }

    #[test]
    fn undamped_smib_is_not_hurwitz() {
        let mut file = build_smib().to_file();
        file.machines[0] = Machine { damping: 0.0, ..file.machines[0] };
        let sys: PowerSystem = file.into_system(1e-8).unwrap();
        assert!(matches!(estimate_decay_envelope(&sys), Err(Error::NotHurwitz { .. })));
    }
}
