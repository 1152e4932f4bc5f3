//! Exact Gaussian-process regression with a zero prior mean.
//!
//! The model keeps a lower Cholesky factor `L L^T = K_N + (sigma^2 + jitter) I`
//! and the weights `(K_N + sigma^2 I)^{-1} y`. Appending an observation extends
//! the factor by one row; a failed extension falls back to a full jittered
//! refactorization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default length scale of the squared-exponential kernel.
pub const DEFAULT_LENGTH_SCALE: f64 = 1.0;
/// Default ridge parameter for the RKHS norm estimate.
pub const DEFAULT_THETA: f64 = 0.1;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    /// `exp(-||x - x'||^2 / (2 l^2))`
    SquaredExponential { length_scale: f64 },
    /// `x^T x'`
    Linear,
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel::SquaredExponential {
            length_scale: DEFAULT_LENGTH_SCALE,
        }
    }
}

impl Kernel {
    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::SquaredExponential { length_scale } if !(*length_scale > 0.0) => Err(
                Error::InvalidArgument(format!("length scale must be positive, got {length_scale}")),
            ),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Kernel::SquaredExponential { length_scale } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-d2 / (2.0 * length_scale * length_scale)).exp()
            }
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        }
    }

    /// Gram matrix of the points stored row-wise in `points`.
    pub fn gram(&self, points: &[Vec<f64>]) -> DMatrix<f64> {
        let n = points.len();
        DMatrix::from_fn(n, n, |i, j| self.eval(&points[i], &points[j]))
    }
}

/// Posterior mean and variance at one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
}

impl Posterior {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Immutable GP snapshot. [`GpModel::add_observation`] returns a new model.
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: Kernel,
    noise_sigma: f64,
    dim: usize,
    inputs: Vec<Vec<f64>>,
    observations: Vec<f64>,
    chol: DMatrix<f64>,
    /// `L^{-1} y`; the mean is `(L^{-1} k)^T L^{-1} y`, which avoids the
    /// large, cancelling weights `(K + sigma^2 I)^{-1} y` of small-noise models.
    whitened: Vec<f64>,
    jitter: f64,
}

impl GpModel {
    /// An empty model (prior only).
    pub fn new(kernel: Kernel, noise_sigma: f64, dim: usize) -> Result<Self> {
        kernel.validate()?;
        if !(noise_sigma > 0.0 && noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be positive, got {noise_sigma}"
            )));
        }
        Ok(Self {
            kernel,
            noise_sigma,
            dim,
            inputs: Vec::new(),
            observations: Vec::new(),
            chol: DMatrix::zeros(0, 0),
            whitened: Vec::new(),
            jitter: 0.0,
        })
    }

    /// Builds a model from data with one full factorization.
    pub fn from_data(
        kernel: Kernel,
        noise_sigma: f64,
        dim: usize,
        inputs: Vec<Vec<f64>>,
        observations: Vec<f64>,
    ) -> Result<Self> {
        let mut model = Self::new(kernel, noise_sigma, dim)?;
        if inputs.len() != observations.len() {
            return Err(Error::Dimension {
                expected: inputs.len(),
                got: observations.len(),
            });
        }
        for x in &inputs {
            model.check_input(x)?;
        }
        if observations.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite observation".into()));
        }
        model.inputs = inputs;
        model.observations = observations;
        model.refactorize()?;
        Ok(model)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite input".into()));
        }
        Ok(())
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower triangular factor of `K_N + (sigma^2 + jitter) I`.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `K_N` without noise.
    pub fn gram(&self) -> DMatrix<f64> {
        self.kernel.gram(&self.inputs)
    }

    /// Same kernel and data under a different noise level.
    pub fn with_noise(&self, noise_sigma: f64) -> Result<Self> {
        Self::from_data(
            self.kernel,
            noise_sigma,
            self.dim,
            self.inputs.clone(),
            self.observations.clone(),
        )
    }

    /// The model built from the first `n` observations.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let mut out = self.clone();
        out.inputs.truncate(n);
        out.observations.truncate(n);
        out.chol = self.chol.view((0, 0), (n, n)).into_owned();
        if n == 0 {
            out.jitter = 0.0;
        }
        out.update_whitened();
        out
    }

    fn refactorize(&mut self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            self.chol = DMatrix::zeros(0, 0);
            self.whitened.clear();
            self.jitter = 0.0;
            return Ok(());
        }
        let k = self.gram();
        let base = &k + DMatrix::identity(n, n) * self.noise_sigma.powi(2);
        let mean_diag = base.trace() / n as f64;
        let mut jitter = 0.0;
        loop {
            let trial = &base + DMatrix::identity(n, n) * jitter;
            if let Some(c) = trial.cholesky() {
                self.chol = c.unpack();
                self.jitter = jitter;
                break;
            }
            jitter = if jitter == 0.0 {
                JITTER_START * mean_diag
            } else {
                jitter * 10.0
            };
            if jitter > JITTER_MAX * mean_diag * (1.0 + 1e-9) {
                return Err(Error::Factorization { jitter: jitter / 10.0 });
            }
        }
        self.update_whitened();
        Ok(())
    }

    fn update_whitened(&mut self) {
        self.whitened = forward_solve(&self.chol, &self.observations);
    }

    /// Appends `(x, v)` and returns the updated model.
    pub fn add_observation(&self, x: &[f64], v: f64) -> Result<Self> {
        self.check_input(x)?;
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!("observation must be finite, got {v}")));
        }
        let n = self.len();
        let mut out = self.clone();
        out.inputs.push(x.to_vec());
        out.observations.push(v);

        let kvec: Vec<f64> = self.inputs.iter().map(|xi| self.kernel.eval(xi, x)).collect();
        let l = forward_solve(&self.chol, &kvec);
        let kss = self.kernel.eval(x, x) + self.noise_sigma.powi(2) + self.jitter;
        let d2 = kss - l.iter().map(|v| v * v).sum::<f64>();
        if d2 > 1e-12 * kss.abs().max(1e-300) {
            let mut chol = self.chol.clone().resize(n + 1, n + 1, 0.0);
            for (j, lj) in l.iter().enumerate() {
                chol[(n, j)] = *lj;
            }
            chol[(n, n)] = d2.sqrt();
            out.chol = chol;
            out.update_whitened();
        } else {
            out.refactorize()?;
        }
        Ok(out)
    }

    /// Posterior mean and variance at `x`; variance is clamped at zero.
    pub fn posterior(&self, x: &[f64]) -> Posterior {
        let prior = self.kernel.eval(x, x);
        if self.is_empty() {
            return Posterior {
                mean: 0.0,
                variance: prior,
            };
        }
        let kvec: Vec<f64> = self.inputs.iter().map(|xi| self.kernel.eval(xi, x)).collect();
        let v = forward_solve(&self.chol, &kvec);
        let mean = v.iter().zip(&self.whitened).map(|(a, b)| a * b).sum();
        let variance = prior - v.iter().map(|a| a * a).sum::<f64>();
        Posterior {
            mean,
            variance: variance.max(0.0),
        }
    }

    /// Raw (unclamped) posterior variance, for invariant checks.
    pub fn raw_variance(&self, x: &[f64]) -> f64 {
        let prior = self.kernel.eval(x, x);
        if self.is_empty() {
            return prior;
        }
        let kvec: Vec<f64> = self.inputs.iter().map(|xi| self.kernel.eval(xi, x)).collect();
        let v = forward_solve(&self.chol, &kvec);
        prior - v.iter().map(|a| a * a).sum::<f64>()
    }

    pub fn to_checkpoint(&self, theta: f64) -> ModelCheckpoint {
        ModelCheckpoint {
            kernel: self.kernel,
            noise_sigma: self.noise_sigma,
            theta,
            inputs: self.inputs.clone(),
            observations: self.observations.clone(),
        }
    }
}

/// Solves `L z = b` for lower triangular `L`.
fn forward_solve(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut z = b.to_vec();
    for j in 0..n {
        z[j] /= l[(j, j)];
        let zj = z[j];
        let col = l.column(j);
        for i in j + 1..n {
            z[i] -= col[i] * zj;
        }
    }
    z
}

fn symmetric_eigenvalues(k: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(k.clone());
    (eig.eigenvalues.map(|v| v.max(0.0)), eig.eigenvectors)
}

/// `||V||_k^2` of the kernel ridge regression fit, via the eigendecomposition
/// `K_N = P^T diag(l_i) P`: `y^T P^T diag(l_i / (l_i + N theta)^2) P y`.
pub fn rkhs_norm_sq(model: &GpModel, theta: f64) -> f64 {
    let n = model.len();
    if n == 0 {
        return 0.0;
    }
    let (lambdas, q) = symmetric_eigenvalues(&model.gram());
    let y = DVector::from_column_slice(model.observations());
    let w = q.transpose() * y;
    let nt = n as f64 * theta;
    lambdas
        .iter()
        .zip(w.iter())
        .map(|(l, wi)| l / ((l + nt) * (l + nt)) * wi * wi)
        .sum()
}

/// Same quantity as [`rkhs_norm_sq`] computed as `c^T K c` with
/// `c = (K + N theta I)^{-1} y`.
pub fn rkhs_norm_sq_solve(model: &GpModel, theta: f64) -> Result<f64> {
    let n = model.len();
    if n == 0 {
        return Ok(0.0);
    }
    let k = model.gram();
    let reg = &k + DMatrix::identity(n, n) * (n as f64 * theta);
    let chol = reg
        .cholesky()
        .ok_or(Error::Factorization { jitter: 0.0 })?;
    let c = chol.solve(&DVector::from_column_slice(model.observations()));
    Ok((c.transpose() * &k * &c)[(0, 0)])
}

/// Information gain `1/2 sum log(1 + sigma^-2 l_i)` over eigenvalues of `K_N`.
pub fn info_gain(model: &GpModel) -> f64 {
    if model.is_empty() {
        return 0.0;
    }
    let (lambdas, _) = symmetric_eigenvalues(&model.gram());
    let s2 = model.noise_sigma().powi(2);
    0.5 * lambdas.iter().map(|l| (l / s2).ln_1p()).sum::<f64>()
}

/// Upper bound `N / (2 sigma^2)` on the information gain for kernels bounded by 1.
pub fn gamma_bound(n: usize, sigma: f64) -> f64 {
    n as f64 / (2.0 * sigma * sigma)
}

/// Confidence width `2 ||V||_k^2 + 300 gamma ln^3(N / delta)`.
pub fn beta(n: usize, delta: f64, rkhs_norm_sq_bound: f64, gamma: f64) -> f64 {
    2.0 * rkhs_norm_sq_bound + 300.0 * gamma * (n as f64 / delta).ln().powi(3)
}

/// How the acquisition and region widths are chosen per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaSchedule {
    /// The raw confidence width.
    Theoretical,
    /// A constant.
    Fixed { value: f64 },
    /// The raw confidence width times `factor`.
    Scaled { factor: f64 },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Fixed { value: 4.0 }
    }
}

impl BetaSchedule {
    pub fn value(&self, n: usize, delta: f64, rkhs_norm_sq_bound: f64, gamma: f64) -> f64 {
        match *self {
            BetaSchedule::Fixed { value } => value,
            BetaSchedule::Theoretical => beta(n.max(1), delta, rkhs_norm_sq_bound, gamma),
            BetaSchedule::Scaled { factor } => {
                factor * beta(n.max(1), delta, rkhs_norm_sq_bound, gamma)
            }
        }
    }
}

/// Serialized model; the factorization is recomputed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub kernel: Kernel,
    pub noise_sigma: f64,
    pub theta: f64,
    pub inputs: Vec<Vec<f64>>,
    pub observations: Vec<f64>,
}

impl ModelCheckpoint {
    pub fn into_model(self) -> Result<GpModel> {
        let dim = self.inputs.first().map_or(0, |x| x.len());
        GpModel::from_data(self.kernel, self.noise_sigma, dim, self.inputs, self.observations)
    }
}
