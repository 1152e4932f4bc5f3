//! GP-UCB sampling of stable initial states.
//!
//! Each iteration maximizes `mu + sqrt(beta_i) sigma` over the sampling box,
//! simulates the chosen state and either appends its Lyapunov estimate to the
//! GP (stable) or excludes a small ball around it from the box (unstable).

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certified::build_certified;
use crate::dynamics::{PowerSystem, VectorField};
use crate::error::{Error, Result};
use crate::gp::{gamma_bound, rkhs_norm_sq, BetaSchedule, GpModel, Kernel, ModelCheckpoint};
use crate::integrator::{early_exit_stable, simulate, SimConfig};
use crate::lyapunov::{
    error_bound, estimate_decay_envelope, estimate_kappa, trapezoid_v, AlphaSquare,
    ErrorBoundParams, GammaFunction,
};
use crate::region::{ConfidenceRegionSpec, EnergyOffset, OffsetFunction, RegionMode};

/// Box `[lower, upper]` minus balls around excluded (unstable) points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub exclusion_radius: f64,
    #[serde(default)]
    pub excluded: Vec<Vec<f64>>,
}

impl SamplingDomain {
    /// Box with the default exclusion radius (1% of the diagonal).
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Dimension {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (k, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "domain axis {k}: lower {lo} must be below upper {hi}"
                )));
            }
        }
        let diag = lower
            .iter()
            .zip(&upper)
            .map(|(l, u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt();
        Ok(Self {
            lower,
            upper,
            exclusion_radius: 0.01 * diag,
            excluded: Vec::new(),
        })
    }

    pub fn from_box(bbox: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            bbox.iter().map(|b| b.0).collect(),
            bbox.iter().map(|b| b.1).collect(),
        )
    }

    /// `psi in [-4, 4]`, `psidot in [-3, 3]`.
    pub fn smib_default() -> Self {
        Self::new(vec![-4.0, -3.0], vec![4.0, 3.0]).expect("valid box")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.lower.iter().cloned().zip(self.upper.iter().cloned()).collect()
    }

    pub fn in_box(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    pub fn is_excluded(&self, x: &[f64]) -> bool {
        let r2 = self.exclusion_radius * self.exclusion_radius;
        self.excluded.iter().any(|e| {
            e.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= r2
        })
    }

    pub fn admits(&self, x: &[f64]) -> bool {
        self.in_box(x) && !self.is_excluded(x)
    }

    pub fn exclude(&mut self, x: &[f64]) {
        self.excluded.push(x.to_vec());
    }

    fn clamp(&self, x: &mut [f64]) {
        for (k, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[k], self.upper[k]);
        }
    }
}

/// Which surface the sampler maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionScheme {
    /// `mu + sqrt(beta) sigma`
    #[default]
    Ucb,
    /// `mu` alone (greedy).
    Mean,
    /// `sigma` alone (pure exploration).
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub candidate_count: usize,
    pub restarts: usize,
    #[serde(default)]
    pub scheme: AcquisitionScheme,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            candidate_count: 2048,
            restarts: 8,
            scheme: AcquisitionScheme::Ucb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UcbConfig {
    /// Number of stable samples `N`.
    pub target_stable: usize,
    pub delta: f64,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub beta: BetaSchedule,
    #[serde(default)]
    pub kernel: Kernel,
    #[serde(default)]
    pub acquisition: AcquisitionConfig,
    #[serde(default)]
    pub mode: RegionMode,
    #[serde(default)]
    pub rng_seed: u64,
    /// Defaults to `20 N`.
    #[serde(default)]
    pub max_total_iterations: Option<usize>,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// `||V||_k^2` bound used until five observations exist.
    #[serde(default = "default_rkhs_prior")]
    pub rkhs_prior_bound: f64,
    #[serde(default = "default_noise_floor")]
    pub noise_floor: f64,
    /// Fixed GP noise; derived from the discretization error bound if absent.
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    /// Stable verdict from entry into the certified region.
    #[serde(default)]
    pub early_exit: bool,
    /// Overrides the default 1% of the box diagonal.
    #[serde(default)]
    pub exclusion_radius: Option<f64>,
}

fn default_theta() -> f64 {
    crate::gp::DEFAULT_THETA
}
fn default_rkhs_prior() -> f64 {
    10.0
}
fn default_noise_floor() -> f64 {
    1e-4
}

impl Default for UcbConfig {
    fn default() -> Self {
        Self {
            target_stable: 100,
            delta: 0.05,
            sim: SimConfig::default(),
            beta: BetaSchedule::default(),
            kernel: Kernel::default(),
            acquisition: AcquisitionConfig::default(),
            mode: RegionMode::default(),
            rng_seed: 0,
            max_total_iterations: None,
            theta: default_theta(),
            rkhs_prior_bound: default_rkhs_prior(),
            noise_floor: default_noise_floor(),
            noise_sigma: None,
            early_exit: false,
            exclusion_radius: None,
        }
    }
}

impl UcbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_stable == 0 {
            return Err(Error::InvalidArgument("N must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if self.acquisition.candidate_count == 0 {
            return Err(Error::InvalidArgument("candidate_count must be at least 1".into()));
        }
        if !(self.theta > 0.0) || !(self.noise_floor > 0.0) || self.rkhs_prior_bound < 0.0 {
            return Err(Error::InvalidArgument("theta, noise floor and RKHS prior must be positive".into()));
        }
        self.kernel.validate()?;
        self.sim.validate()
    }

    pub fn max_iterations(&self) -> usize {
        self.max_total_iterations.unwrap_or(20 * self.target_stable)
    }

    /// Width used when selecting the `i`-th stable sample (1-based).
    pub fn beta_at(&self, i: usize, model: &GpModel) -> f64 {
        beta_for(i, model, &self.beta, self.delta, self.theta, self.rkhs_prior_bound)
    }
}

/// `beta_i` under `schedule`, with the RKHS norm bound taken from `model`
/// once it holds five observations and `rkhs_prior_bound` before that.
pub fn beta_for(
    i: usize,
    model: &GpModel,
    schedule: &BetaSchedule,
    delta: f64,
    theta: f64,
    rkhs_prior_bound: f64,
) -> f64 {
    let bound = if model.len() >= 5 {
        rkhs_norm_sq(model, theta)
    } else {
        rkhs_prior_bound
    };
    let gamma = gamma_bound(i.max(1), model.noise_sigma());
    schedule.value(i, delta, bound, gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingRecord {
    /// 1-based iteration counter over all attempts, stable or not.
    pub iteration: usize,
    pub point: Vec<f64>,
    pub stable: bool,
    /// Lyapunov estimate `V_hat(x)`; present iff stable.
    pub v_hat: Option<f64>,
    pub acquisition: f64,
}

/// `mu + sqrt(beta) sigma`.
pub fn acquisition(model: &GpModel, beta: f64, x: &[f64]) -> f64 {
    let p = model.posterior(x);
    p.mean + beta.max(0.0).sqrt() * p.std_dev()
}

fn scheme_value(model: &GpModel, beta: f64, scheme: AcquisitionScheme, x: &[f64]) -> (f64, f64) {
    let p = model.posterior(x);
    let s = p.std_dev();
    let v = match scheme {
        AcquisitionScheme::Ucb => p.mean + beta.max(0.0).sqrt() * s,
        AcquisitionScheme::Mean => p.mean,
        AcquisitionScheme::Variance => s,
    };
    (v, s)
}

/// A maximizer of the acquisition surface.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub point: Vec<f64>,
    pub value: f64,
    pub sigma: f64,
}

/// Ranking: larger value, then larger sigma, then lexicographically smaller point.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.value
        .total_cmp(&a.value)
        .then(b.sigma.total_cmp(&a.sigma))
        .then_with(|| {
            a.point
                .iter()
                .zip(&b.point)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

fn refine(
    model: &GpModel,
    domain: &SamplingDomain,
    beta: f64,
    scheme: AcquisitionScheme,
    start: Candidate,
) -> Candidate {
    let diag = domain
        .lower
        .iter()
        .zip(&domain.upper)
        .map(|(l, u)| (u - l) * (u - l))
        .sum::<f64>()
        .sqrt();
    let mut step = 0.02 * diag;
    let mut best = start;
    let n = best.point.len();
    for _ in 0..50 {
        if step < 1e-4 {
            break;
        }
        let mut moved = false;
        for k in 0..n {
            let h = 1e-6 * (1.0 + best.point[k].abs());
            let mut xp = best.point.clone();
            xp[k] += h;
            let mut xm = best.point.clone();
            xm[k] -= h;
            let slope = scheme_value(model, beta, scheme, &xp).0 - scheme_value(model, beta, scheme, &xm).0;
            if slope == 0.0 {
                continue;
            }
            let mut trial = best.point.clone();
            trial[k] += step * slope.signum();
            domain.clamp(&mut trial);
            if trial == best.point || domain.is_excluded(&trial) {
                continue;
            }
            let (value, sigma) = scheme_value(model, beta, scheme, &trial);
            if value > best.value {
                best = Candidate { point: trial, value, sigma };
                moved = true;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    best
}

/// Random-candidate search followed by finite-difference coordinate ascent
/// from the best `restarts` candidates.
pub fn maximize_acquisition<R: Rng>(
    model: &GpModel,
    domain: &SamplingDomain,
    beta: f64,
    cfg: &AcquisitionConfig,
    rng: &mut R,
) -> Result<Candidate> {
    let candidates: Vec<Vec<f64>> = (0..cfg.candidate_count)
        .map(|_| {
            domain
                .lower
                .iter()
                .zip(&domain.upper)
                .map(|(lo, hi)| rng.gen_range(*lo..*hi))
                .collect()
        })
        .filter(|x: &Vec<f64>| !domain.is_excluded(x))
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyDomain);
    }
    let mut scored: Vec<Candidate> = candidates
        .into_par_iter()
        .map(|point| {
            let (value, sigma) = scheme_value(model, beta, cfg.scheme, &point);
            Candidate { point, value, sigma }
        })
        .collect();
    scored.sort_by(rank);
    scored.truncate(cfg.restarts.max(1));
    let refined: Vec<Candidate> = scored
        .into_par_iter()
        .map(|c| refine(model, domain, beta, cfg.scheme, c))
        .collect();
    Ok(refined.into_iter().min_by(rank).expect("at least one candidate"))
}

/// Splits one seed into independent streams by label and index.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    // FNV-1a over the label, then splitmix64 finalization
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Everything a finished sampling run produced.
#[derive(Clone)]
pub struct UcbRun {
    pub model: GpModel,
    pub records: Vec<SamplingRecord>,
    pub domain: SamplingDomain,
    pub noise_sigma: f64,
    /// Decay envelope `(eta, lambda)` of the linearization.
    pub envelope: (f64, f64),
    /// Largest `V_hat` among stable records.
    pub c_max: f64,
    pub offset: Option<Arc<dyn OffsetFunction>>,
}

impl UcbRun {
    pub fn stable_records(&self) -> impl Iterator<Item = &SamplingRecord> {
        self.records.iter().filter(|r| r.stable)
    }

    /// Confidence region with `mu_{N-1}`, `sigma_{N-1}` and `beta_N`.
    pub fn region_spec(&self, cfg: &UcbConfig) -> Result<ConfidenceRegionSpec> {
        region_spec_from_parts(&self.model, self.c_max, self.offset.clone(), cfg)
    }

    pub fn checkpoint(&self, cfg: &UcbConfig) -> RunCheckpoint {
        RunCheckpoint {
            model: self.model.to_checkpoint(cfg.theta),
            mode: cfg.mode,
            delta: cfg.delta,
            beta: cfg.beta,
            rkhs_prior_bound: cfg.rkhs_prior_bound,
        }
    }
}

/// Builds the region from an `N`-observation model: the GP is cut back to its
/// first `N - 1` observations and paired with `beta_N`.
pub fn region_spec_from_parts(
    model: &GpModel,
    c_max: f64,
    offset: Option<Arc<dyn OffsetFunction>>,
    cfg: &UcbConfig,
) -> Result<ConfidenceRegionSpec> {
    let n = model.len();
    let beta_n = cfg.beta_at(n, model);
    let previous = model.truncated(n.saturating_sub(1));
    ConfidenceRegionSpec::new(previous, beta_n, c_max, offset, cfg.delta)
}

/// Largest `V_hat` over the stable records.
pub fn c_max_of(records: &[SamplingRecord]) -> f64 {
    records
        .iter()
        .filter_map(|r| r.v_hat)
        .fold(0.0, f64::max)
}

/// Model checkpoint plus the settings needed to rebuild the region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    #[serde(flatten)]
    pub model: ModelCheckpoint,
    pub mode: RegionMode,
    pub delta: f64,
    pub beta: BetaSchedule,
    pub rkhs_prior_bound: f64,
}

impl RunCheckpoint {
    /// Rebuilds the region of the run that wrote this checkpoint. `offset`
    /// must be present exactly when the run used offset mode.
    pub fn region_spec(
        &self,
        c_max: f64,
        offset: Option<Arc<dyn OffsetFunction>>,
    ) -> Result<ConfidenceRegionSpec> {
        if offset.is_some() != (self.mode == RegionMode::Offset) {
            return Err(Error::InvalidArgument(format!(
                "checkpoint was written in {} mode",
                self.mode
            )));
        }
        let model = self.model.clone().into_model()?;
        let n = model.len();
        let beta_n = beta_for(
            n,
            &model,
            &self.beta,
            self.delta,
            self.model.theta,
            self.rkhs_prior_bound,
        );
        let previous = model.truncated(n.saturating_sub(1));
        ConfidenceRegionSpec::new(previous, beta_n, c_max, offset, self.delta)
    }
}

/// Sampling box as written in run configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DomainBox {
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.lower.iter().cloned().zip(self.upper.iter().cloned()).collect()
    }
}

/// A complete sampling experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub domain: DomainBox,
    pub sampler: UcbConfig,
    /// Cells per axis for region grids.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
}

fn default_resolution() -> usize {
    200
}

impl RunConfig {
    pub fn sampling_domain(&self) -> Result<SamplingDomain> {
        let mut d = SamplingDomain::new(self.domain.lower.clone(), self.domain.upper.clone())?;
        if let Some(r) = self.sampler.exclusion_radius {
            d.exclusion_radius = r;
        }
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling_domain()?;
        if self.resolution < 2 {
            return Err(Error::InvalidArgument("resolution must be at least 2".into()));
        }
        self.sampler.validate()
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: impl AsRef<std::path::Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config(&text)
}

/// Optional pieces of a run that need more than a vector field.
#[derive(Clone, Default)]
pub struct RunHooks {
    /// `V*` for offset mode.
    pub offset: Option<Arc<dyn OffsetFunction>>,
    /// Certified-region predicate for early exit.
    pub certified: Option<Arc<dyn Fn(&[f64]) -> bool + Send + Sync>>,
}

/// Runs the sampler on a power system, wiring the energy offset and the
/// certified region as the configuration requires.
pub fn run_gp_ucb(sys: &PowerSystem, domain: SamplingDomain, cfg: &UcbConfig) -> Result<UcbRun> {
    let mut hooks = RunHooks::default();
    if cfg.mode == RegionMode::Offset {
        hooks.offset = Some(Arc::new(EnergyOffset(sys.clone())));
    }
    if cfg.early_exit {
        let roa = build_certified(sys)?;
        hooks.certified = Some(Arc::new(move |x: &[f64]| roa.contains(x)));
    }
    run_gp_ucb_with(sys, domain, cfg, hooks)
}

pub fn run_gp_ucb_with<F: VectorField>(
    field: &F,
    mut domain: SamplingDomain,
    cfg: &UcbConfig,
    hooks: RunHooks,
) -> Result<UcbRun> {
    cfg.validate()?;
    if domain.dim() != field.dim() {
        return Err(Error::Dimension {
            expected: field.dim(),
            got: domain.dim(),
        });
    }
    if cfg.mode == RegionMode::Offset && hooks.offset.is_none() {
        return Err(Error::InvalidArgument("offset mode needs an offset function".into()));
    }
    if let Some(r) = cfg.exclusion_radius {
        domain.exclusion_radius = r;
    }
    let (eta, lambda) = estimate_decay_envelope(field)?;
    let alpha = AlphaSquare;
    let dim = field.dim();

    let mut model = GpModel::new(cfg.kernel, cfg.noise_sigma.unwrap_or(cfg.noise_floor), dim)?;
    let mut noise_fixed = cfg.noise_sigma.is_some();
    let mut records = Vec::new();
    let mut stable = 0usize;
    let mut c_max: f64 = 0.0;
    let max_iter = cfg.max_iterations();

    for iteration in 1..=max_iter {
        if stable >= cfg.target_stable {
            break;
        }
        let beta_i = cfg.beta_at(stable + 1, &model);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, "acquisition", iteration as u64));
        let cand = maximize_acquisition(&model, &domain, beta_i, &cfg.acquisition, &mut rng)?;
        let x = cand.point;

        let traj = simulate(field, &x, &cfg.sim);
        let is_stable = match &hooks.certified {
            Some(region) => early_exit_stable(field, &x, &cfg.sim, |s| region(s)).stable,
            None => traj.converged,
        };

        if is_stable {
            let v_hat = trapezoid_v(&traj, &alpha);
            if !noise_fixed {
                let kappa = estimate_kappa(&traj, field, &alpha).unwrap_or(0.0);
                let params = ErrorBoundParams {
                    kappa,
                    eta,
                    lambda,
                    m: alpha.growth_exponent(),
                };
                let tail = traj.final_state().iter().map(|v| v * v).sum::<f64>().sqrt();
                let bound = error_bound(&params, cfg.sim.steps(), cfg.sim.dt, tail);
                model = model.with_noise(bound.max(cfg.noise_floor))?;
                noise_fixed = true;
            }
            let observed = match &hooks.offset {
                Some(o) if cfg.mode == RegionMode::Offset => v_hat - o.offset(&x),
                _ => v_hat,
            };
            model = model.add_observation(&x, observed)?;
            stable += 1;
            c_max = c_max.max(v_hat);
            records.push(SamplingRecord {
                iteration,
                point: x,
                stable: true,
                v_hat: Some(v_hat),
                acquisition: cand.value,
            });
        } else {
            domain.exclude(&x);
            records.push(SamplingRecord {
                iteration,
                point: x,
                stable: false,
                v_hat: None,
                acquisition: cand.value,
            });
        }
    }

    if stable < cfg.target_stable {
        return Err(Error::BudgetExhausted {
            found: stable,
            target: cfg.target_stable,
            iterations: max_iter,
        });
    }
    let noise_sigma = model.noise_sigma();
    Ok(UcbRun {
        model,
        records,
        domain,
        noise_sigma,
        envelope: (eta, lambda),
        c_max,
        offset: if cfg.mode == RegionMode::Offset { hooks.offset } else { None },
    })
}

/// CSV with columns `iter, stable, x_1..x_d, v_hat, acquisition`.
pub fn write_records_csv<W: Write>(records: &[SamplingRecord], dim: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iter".to_string(), "stable".to_string()];
    header.extend((1..=dim).map(|k| format!("x_{k}")));
    header.push("v_hat".into());
    header.push("acquisition".into());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.iteration.to_string(), u8::from(r.stable).to_string()];
        row.extend(r.point.iter().map(|v| v.to_string()));
        row.push(r.v_hat.map(|v| v.to_string()).unwrap_or_default());
        row.push(r.acquisition.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<records csv>", e))?;
    Ok(())
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<SamplingRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let ncols = headers.len();
    if ncols < 5 || &headers[0] != "iter" || &headers[1] != "stable" {
        return Err(Error::Parse("records CSV has an unexpected header".into()));
    }
    let dim = ncols - 4;
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Parse(format!("bad number '{s}': {e}")))
    };
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let iteration = row[0]
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("bad iteration '{}': {e}", &row[0])))?;
        let stable = match row[1].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(Error::Parse(format!("bad stable flag '{other}'"))),
        };
        let point = (0..dim).map(|k| num(&row[2 + k])).collect::<Result<Vec<_>>>()?;
        let v = row[2 + dim].trim();
        let v_hat = if v.is_empty() { None } else { Some(num(v)?) };
        let acquisition = num(&row[3 + dim])?;
        out.push(SamplingRecord {
            iteration,
            point,
            stable,
            v_hat,
            acquisition,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{build_smib, LinearSystem};
    use approx::assert_abs_diff_eq;

    #[test]
    fn acquisition_reduces_to_mean_at_zero_beta() {
        let m = GpModel::from_data(Kernel::default(), 0.1, 1, vec![vec![0.0]], vec![2.0]).unwrap();
        let x = [0.4];
        assert_eq!(acquisition(&m, 0.0, &x), m.posterior(&x).mean);
    }

    #[test]
    fn empty_model_acquisition_is_constant() {
        let m = GpModel::new(Kernel::default(), 0.1, 2).unwrap();
        for x in [[0.0, 0.0], [3.0, -1.0], [-10.0, 7.0]] {
            assert_abs_diff_eq!(acquisition(&m, 4.0, &x), 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn acquisition_at_noise_free_training_point() {
        let m = GpModel::from_data(Kernel::default(), 1e-6, 2, vec![vec![1.0, -1.0]], vec![3.0]).unwrap();
        assert_abs_diff_eq!(acquisition(&m, 4.0, &[1.0, -1.0]), 3.0, epsilon = 1e-5);
    }

    #[test]
    fn constant_surface_is_reproducible() {
        let m = GpModel::new(Kernel::default(), 0.1, 2).unwrap();
        let d = SamplingDomain::smib_default();
        let cfg = AcquisitionConfig::default();
        let a = maximize_acquisition(&m, &d, 4.0, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = maximize_acquisition(&m, &d, 4.0, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_abs_diff_eq!(a.value, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn peaked_mean_is_maximized_at_datum() {
        let m = GpModel::from_data(Kernel::default(), 0.01, 1, vec![vec![0.0]], vec![1.0]).unwrap();
        let d = SamplingDomain::new(vec![-3.0], vec![3.0]).unwrap();
        let c = maximize_acquisition(&m, &d, 0.0, &AcquisitionConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // grid oracle
        let grid_best = (0..=6000)
            .map(|i| -3.0 + i as f64 * 1e-3)
            .max_by(|a, b| acquisition(&m, 0.0, &[*a]).total_cmp(&acquisition(&m, 0.0, &[*b])))
            .unwrap();
        assert_abs_diff_eq!(grid_best, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(c.point[0], 0.0, epsilon = 1e-3);
    }

    #[test]
    fn fully_excluded_domain_errors() {
        let m = GpModel::new(Kernel::default(), 0.1, 1).unwrap();
        let mut d = SamplingDomain::new(vec![0.0], vec![1.0]).unwrap();
        d.exclusion_radius = 10.0;
        d.exclude(&[0.5]);
        let r = maximize_acquisition(&m, &d, 1.0, &AcquisitionConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::EmptyDomain)));
    }

    #[test]
    fn single_stable_sample_near_origin() {
        let cfg = UcbConfig { target_stable: 1, ..UcbConfig::default() };
        let d = SamplingDomain::new(vec![-0.3, -0.3], vec![0.3, 0.3]).unwrap();
        let run = run_gp_ucb(&build_smib(), d, &cfg).unwrap();
        assert_eq!(run.stable_records().count(), 1);
        assert!(run.records[0].v_hat.unwrap() > 0.0);
        assert!(run.noise_sigma >= 1e-4);
    }

    #[test]
    fn divergent_domain_exhausts_budget() {
        let cfg = UcbConfig {
            target_stable: 2,
            max_total_iterations: Some(6),
            ..UcbConfig::default()
        };
        let d = SamplingDomain::new(vec![9.5, 9.5], vec![10.5, 10.5]).unwrap();
        let err = run_gp_ucb(&build_smib(), d, &cfg).err().unwrap();
        assert!(matches!(err, Error::BudgetExhausted { found: 0, target: 2, iterations: 6 }));
    }

    #[test]
    fn non_hurwitz_system_is_rejected() {
        let sys = LinearSystem::new(nalgebra::DMatrix::from_element(1, 1, 0.5)).unwrap();
        let d = SamplingDomain::new(vec![-1.0], vec![1.0]).unwrap();
        let r = run_gp_ucb_with(&sys, d, &UcbConfig { target_stable: 1, ..Default::default() }, RunHooks::default());
        assert!(matches!(r, Err(Error::NotHurwitz { .. })));
    }

    #[test]
    fn records_round_trip_through_csv() {
        let recs = vec![
            SamplingRecord { iteration: 1, point: vec![0.5, -0.25], stable: true, v_hat: Some(1.25), acquisition: 2.0 },
            SamplingRecord { iteration: 2, point: vec![3.0, 2.0], stable: false, v_hat: None, acquisition: 2.5 },
        ];
        let mut buf = Vec::new();
        write_records_csv(&recs, 2, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iter,stable,x_1,x_2,v_hat,acquisition\n"));
        assert_eq!(read_records_csv(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn derived_seeds_differ_by_label_and_index() {
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_eq!(derive_seed(5, "a", 3), derive_seed(5, "a", 3));
    }
}
