//! Confidence regions `{x : V*(x) + mu(x) + sqrt(beta) sigma(x) <= C_max}`,
//! their rasterization on 2-D slices, and Monte Carlo volume comparison with
//! the certified ellipsoid.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certified::{energy_of_state, CertifiedRoa};
use crate::dynamics::PowerSystem;
use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::integrator::state_column_names;

/// Default cells per axis for 2-D exports.
pub const DEFAULT_RESOLUTION: usize = 200;

/// A known Lyapunov-like function added to the GP upper bound.
pub trait OffsetFunction: Send + Sync {
    fn offset(&self, x: &[f64]) -> f64;
}

/// The swing-dynamics energy function as an offset.
#[derive(Debug, Clone)]
pub struct EnergyOffset(pub PowerSystem);

impl OffsetFunction for EnergyOffset {
    fn offset(&self, x: &[f64]) -> f64 {
        energy_of_state(&self.0, x)
    }
}

impl OffsetFunction for CertifiedRoa {
    fn offset(&self, x: &[f64]) -> f64 {
        self.quadratic_form(x)
    }
}

/// Whether the GP models `V` directly or the mismatch `V - V*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    #[default]
    Equilibrium,
    Offset,
}

impl fmt::Display for RegionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionMode::Equilibrium => f.write_str("equilibrium"),
            RegionMode::Offset => f.write_str("offset"),
        }
    }
}

impl std::str::FromStr for RegionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equilibrium" => Ok(RegionMode::Equilibrium),
            "offset" => Ok(RegionMode::Offset),
            other => Err(Error::Parse(format!("unknown region mode '{other}'"))),
        }
    }
}

#[derive(Clone)]
pub struct ConfidenceRegionSpec {
    pub model: GpModel,
    pub beta: f64,
    pub c_max: f64,
    pub offset: Option<Arc<dyn OffsetFunction>>,
    pub delta: f64,
}

impl fmt::Debug for ConfidenceRegionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConfidenceRegionSpec")
            .field("n", &self.model.len())
            .field("beta", &self.beta)
            .field("c_max", &self.c_max)
            .field("mode", &self.mode())
            .field("delta", &self.delta)
            .finish()
    }
}

/// Values behind one membership decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionValue {
    pub mu: f64,
    pub sigma: f64,
    pub offset: f64,
    /// `offset + mu + sqrt(beta) sigma`
    pub score: f64,
    pub member: bool,
}

impl ConfidenceRegionSpec {
    pub fn new(
        model: GpModel,
        beta: f64,
        c_max: f64,
        offset: Option<Arc<dyn OffsetFunction>>,
        delta: f64,
    ) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
        }
        if !(c_max >= 0.0 && c_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("c_max must be >= 0, got {c_max}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0,1), got {delta}")));
        }
        Ok(Self {
            model,
            beta,
            c_max,
            offset,
            delta,
        })
    }

    pub fn mode(&self) -> RegionMode {
        if self.offset.is_some() {
            RegionMode::Offset
        } else {
            RegionMode::Equilibrium
        }
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn evaluate(&self, x: &[f64]) -> RegionValue {
        let p = self.model.posterior(x);
        let sigma = p.std_dev();
        let offset = self.offset.as_ref().map_or(0.0, |o| o.offset(x));
        let score = offset + p.mean + self.beta.sqrt() * sigma;
        RegionValue {
            mu: p.mean,
            sigma,
            offset,
            score,
            member: score <= self.c_max,
        }
    }
}

pub fn confidence_membership(spec: &ConfidenceRegionSpec, x: &[f64]) -> bool {
    spec.evaluate(x).member
}

/// Membership, mean and standard deviation on a 2-D grid of cell centers.
///
/// The grid spans state axes `plane = (a, b)`; every other coordinate is held
/// at `base`. Cells are stored with the first axis varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    pub plane: (usize, usize),
    pub lower: (f64, f64),
    pub upper: (f64, f64),
    pub resolution: (usize, usize),
    pub base: Vec<f64>,
    pub member: Vec<bool>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl RegionGrid {
    pub fn cell_count(&self) -> usize {
        self.resolution.0 * self.resolution.1
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.resolution.0 + i
    }

    /// Center of cell `(i, j)` in plane coordinates.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let hx = (self.upper.0 - self.lower.0) / self.resolution.0 as f64;
        let hy = (self.upper.1 - self.lower.1) / self.resolution.1 as f64;
        (
            self.lower.0 + (i as f64 + 0.5) * hx,
            self.lower.1 + (j as f64 + 0.5) * hy,
        )
    }

    /// Full state vector at the center of cell `(i, j)`.
    pub fn cell_state(&self, i: usize, j: usize) -> Vec<f64> {
        let (u, v) = self.cell_center(i, j);
        let mut x = self.base.clone();
        x[self.plane.0] = u;
        x[self.plane.1] = v;
        x
    }

    /// Cell containing the plane point `(u, v)`, if inside the grid.
    pub fn cell_containing(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let fx = (u - self.lower.0) / (self.upper.0 - self.lower.0);
        let fy = (v - self.lower.1) / (self.upper.1 - self.lower.1);
        if !(0.0..=1.0).contains(&fx) || !(0.0..=1.0).contains(&fy) {
            return None;
        }
        let i = ((fx * self.resolution.0 as f64) as usize).min(self.resolution.0 - 1);
        let j = ((fy * self.resolution.1 as f64) as usize).min(self.resolution.1 - 1);
        Some((i, j))
    }

    pub fn is_member(&self, i: usize, j: usize) -> bool {
        self.member[self.index(i, j)]
    }

    /// Membership of the cell that contains the slice's base point.
    pub fn base_cell_is_member(&self) -> bool {
        let (u, v) = (self.base[self.plane.0], self.base[self.plane.1]);
        self.cell_containing(u, v)
            .is_some_and(|(i, j)| self.is_member(i, j))
    }

    pub fn member_count(&self) -> usize {
        self.member.iter().filter(|m| **m).count()
    }

    pub fn member_fraction(&self) -> f64 {
        self.member_count() as f64 / self.cell_count() as f64
    }

    /// CSV with columns `x, y, member, mu, sigma`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "member", "mu", "sigma"])?;
        for j in 0..self.resolution.1 {
            for i in 0..self.resolution.0 {
                let (u, v) = self.cell_center(i, j);
                let k = self.index(i, j);
                w.write_record([
                    u.to_string(),
                    v.to_string(),
                    u8::from(self.member[k]).to_string(),
                    self.mu[k].to_string(),
                    self.sigma[k].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<grid csv>", e))?;
        Ok(())
    }
}

fn check_box(bbox: &[(f64, f64)], dim: usize) -> Result<()> {
    if bbox.len() != dim {
        return Err(Error::Dimension {
            expected: dim,
            got: bbox.len(),
        });
    }
    for (k, (lo, hi)) in bbox.iter().enumerate() {
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!(
                "box axis {k} has lower {lo} >= upper {hi}"
            )));
        }
    }
    Ok(())
}

/// Rasterizes the plane `(a, b)` with all other coordinates fixed at zero.
pub fn slice_grid(
    spec: &ConfidenceRegionSpec,
    plane: (usize, usize),
    bbox: &[(f64, f64)],
    resolution: usize,
) -> Result<RegionGrid> {
    let dim = spec.dim();
    check_box(bbox, dim)?;
    let (a, b) = plane;
    if a >= dim || b >= dim || a == b {
        return Err(Error::Index(format!(
            "plane ({a}, {b}) is not a pair of distinct axes below {dim}"
        )));
    }
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!(
            "resolution must be at least 2, got {resolution}"
        )));
    }
    let mut grid = RegionGrid {
        plane,
        lower: (bbox[a].0, bbox[b].0),
        upper: (bbox[a].1, bbox[b].1),
        resolution: (resolution, resolution),
        base: vec![0.0; dim],
        member: Vec::new(),
        mu: Vec::new(),
        sigma: Vec::new(),
    };
    let values: Vec<RegionValue> = (0..grid.cell_count())
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k % resolution, k / resolution);
            spec.evaluate(&grid.cell_state(i, j))
        })
        .collect();
    grid.member = values.iter().map(|v| v.member).collect();
    grid.mu = values.iter().map(|v| v.mu).collect();
    grid.sigma = values.iter().map(|v| v.sigma).collect();
    Ok(grid)
}

/// Full grid of a two-dimensional state space.
pub fn build_region_grid(
    spec: &ConfidenceRegionSpec,
    bbox: &[(f64, f64)],
    resolution: usize,
) -> Result<RegionGrid> {
    if spec.dim() != 2 {
        return Err(Error::Dimension {
            expected: 2,
            got: spec.dim(),
        });
    }
    slice_grid(spec, (0, 1), bbox, resolution)
}

/// `(psi_k, psidot_k)` planes for every machine.
pub fn machine_planes(dim: usize) -> Vec<(usize, usize)> {
    let m = dim / 2;
    (0..m).map(|k| (k, m + k)).collect()
}

/// Equilibrium slices for each requested plane.
pub fn project_slices(
    spec: &ConfidenceRegionSpec,
    planes: &[(usize, usize)],
    bbox: &[(f64, f64)],
    resolution: usize,
) -> Result<Vec<RegionGrid>> {
    planes
        .iter()
        .map(|&p| slice_grid(spec, p, bbox, resolution))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub plane: (usize, usize),
    pub axes: (String, String),
    pub grid_file: String,
    pub boundary_file: Option<String>,
    pub resolution: usize,
    pub member_fraction: f64,
    pub base_cell_member: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceManifest {
    pub mode: RegionMode,
    pub beta: f64,
    pub c_max: f64,
    pub delta: f64,
    /// Value held by every off-plane coordinate.
    pub fixed_value: f64,
    pub slices: Vec<SliceEntry>,
}

/// Writes one grid CSV (and certified-boundary polyline, when available) per
/// slice, plus `slices.json`.
pub fn write_slices(
    spec: &ConfidenceRegionSpec,
    grids: &[RegionGrid],
    certified: Option<&CertifiedRoa>,
    out_dir: &Path,
) -> Result<SliceManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let names = state_column_names(spec.dim());
    let single = grids.len() == 1 && spec.dim() == 2;
    let mut slices = Vec::with_capacity(grids.len());
    for g in grids {
        let (a, b) = g.plane;
        let stem = if single {
            "grid".to_string()
        } else {
            format!("slice_{}_{}", names[a], names[b])
        };
        let grid_file = format!("{stem}.csv");
        let path = out_dir.join(&grid_file);
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        g.write_csv(std::io::BufWriter::new(f))?;

        let boundary_file = match certified {
            Some(roa) => {
                let pts = roa.boundary_polyline(a, b, 360);
                let name = format!("{stem}_certified.csv");
                let path = out_dir.join(&name);
                let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                let mut w = csv::Writer::from_writer(std::io::BufWriter::new(f));
                w.write_record(["x", "y"])?;
                for (u, v) in pts {
                    w.write_record([u.to_string(), v.to_string()])?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
                Some(name)
            }
            None => None,
        };
        slices.push(SliceEntry {
            plane: g.plane,
            axes: (names[a].clone(), names[b].clone()),
            grid_file,
            boundary_file,
            resolution: g.resolution.0,
            member_fraction: g.member_fraction(),
            base_cell_member: g.base_cell_is_member(),
        });
    }
    let manifest = SliceManifest {
        mode: spec.mode(),
        beta: spec.beta,
        c_max: spec.c_max,
        delta: spec.delta,
        fixed_value: 0.0,
        slices,
    };
    let path = out_dir.join("slices.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Monte Carlo comparison of the confidence region with the certified ellipsoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VolumeRatio {
    Finite {
        ratio: f64,
        half_width: f64,
        confidence_count: usize,
        certified_count: usize,
        samples: usize,
    },
    /// No sample landed in the certified ellipsoid.
    Infinite {
        confidence_count: usize,
        samples: usize,
    },
}

impl VolumeRatio {
    pub fn ratio(&self) -> f64 {
        match self {
            VolumeRatio::Finite { ratio, .. } => *ratio,
            VolumeRatio::Infinite { .. } => f64::INFINITY,
        }
    }
}

/// 95% Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    let z = 1.959_963_984_540_054;
    let n = n as f64;
    let p = k as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k as f64 == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

pub fn volume_ratio(
    spec: &ConfidenceRegionSpec,
    certified: &CertifiedRoa,
    bbox: &[(f64, f64)],
    n_samples: usize,
    seed: u64,
) -> Result<VolumeRatio> {
    check_box(bbox, spec.dim())?;
    if n_samples < 1000 {
        return Err(Error::InvalidArgument(format!(
            "volume estimate needs at least 1000 samples, got {n_samples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| bbox.iter().map(|(lo, hi)| rng.gen_range(*lo..*hi)).collect())
        .collect();
    let (conf, cert) = points
        .par_iter()
        .map(|x| {
            (
                usize::from(confidence_membership(spec, x)),
                usize::from(certified.contains(x)),
            )
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if cert == 0 {
        return Ok(VolumeRatio::Infinite {
            confidence_count: conf,
            samples: n_samples,
        });
    }
    let (pl, pu) = wilson_interval(conf, n_samples);
    let (ql, qu) = wilson_interval(cert, n_samples);
    let lower = pl / qu;
    let upper = pu / ql;
    Ok(VolumeRatio::Finite {
        ratio: conf as f64 / cert as f64,
        half_width: 0.5 * (upper - lower),
        confidence_count: conf,
        certified_count: cert,
        samples: n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certified::build_certified;
    use crate::dynamics::build_smib;
    use crate::gp::Kernel;
    use approx::assert_abs_diff_eq;

    fn empty_model(dim: usize) -> GpModel {
        GpModel::new(Kernel::default(), 0.1, dim).unwrap()
    }

    fn smib_box() -> Vec<(f64, f64)> {
        vec![(-4.0, 4.0), (-3.0, 3.0)]
    }

    #[test]
    fn empty_model_with_positive_beta_has_no_members() {
        let spec = ConfidenceRegionSpec::new(empty_model(2), 4.0, 0.0, None, 0.05).unwrap();
        let grid = build_region_grid(&spec, &smib_box(), 20).unwrap();
        assert_eq!(grid.member_count(), 0);
    }

    #[test]
    fn training_point_with_largest_value_is_member() {
        let xs = vec![vec![0.5, 0.0], vec![-1.0, 0.5], vec![1.5, -1.0]];
        let ys = vec![0.3, 0.9, 2.5];
        let model = GpModel::from_data(Kernel::default(), 1e-6, 2, xs, ys).unwrap();
        let spec = ConfidenceRegionSpec::new(model, 4.0, 2.5, None, 0.05).unwrap();
        let v = spec.evaluate(&[1.5, -1.0]);
        assert_abs_diff_eq!(v.score, 2.5, epsilon = 1e-3);
        assert!(v.sigma < 1e-3);
        // shrink the tolerance consumed by noise: raise c_max by 1e-3
        let spec = ConfidenceRegionSpec { c_max: 2.5 + 1e-3, ..spec };
        assert!(confidence_membership(&spec, &[1.5, -1.0]));
    }

    #[test]
    fn grid_matches_pointwise_calls() {
        let model = GpModel::from_data(Kernel::default(), 0.1, 2, vec![vec![0.0, 0.0]], vec![1.0]).unwrap();
        let spec = ConfidenceRegionSpec::new(model, 1.0, 1.2, None, 0.05).unwrap();
        let grid = build_region_grid(&spec, &smib_box(), 2).unwrap();
        assert_eq!(grid.cell_count(), 4);
        for j in 0..2 {
            for i in 0..2 {
                assert_eq!(grid.is_member(i, j), confidence_membership(&spec, &grid.cell_state(i, j)));
            }
        }
    }

    #[test]
    fn smaller_beta_and_larger_c_max_grow_region() {
        let model = GpModel::from_data(
            Kernel::default(),
            0.1,
            2,
            vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![-2.0, 0.5]],
            vec![0.5, 1.5, 3.0],
        )
        .unwrap();
        let mk = |beta: f64, c: f64| {
            let spec = ConfidenceRegionSpec::new(model.clone(), beta, c, None, 0.05).unwrap();
            build_region_grid(&spec, &smib_box(), 40).unwrap().member
        };
        let contained = |a: &[bool], b: &[bool]| a.iter().zip(b).all(|(x, y)| !*x || *y);
        assert!(contained(&mk(4.0, 2.0), &mk(1.0, 2.0)));
        assert!(contained(&mk(4.0, 2.0), &mk(4.0, 3.0)));
    }

    #[test]
    fn zero_gp_offset_region_is_energy_sublevel_set() {
        let sys = build_smib();
        let offset: Arc<dyn OffsetFunction> = Arc::new(EnergyOffset(sys.clone()));
        let spec = ConfidenceRegionSpec::new(empty_model(2), 0.0, 5.0, Some(offset), 0.05).unwrap();
        let roa = build_certified(&sys).unwrap();
        let grid = build_region_grid(&spec, &smib_box(), 50).unwrap();
        for j in 0..50 {
            for i in 0..50 {
                let x = grid.cell_state(i, j);
                if roa.contains(&x) {
                    assert_eq!(grid.is_member(i, j), energy_of_state(&sys, &x) <= 5.0);
                }
            }
        }
    }

    #[test]
    fn identical_regions_have_unit_ratio() {
        let roa = build_certified(&build_smib()).unwrap();
        let offset: Arc<dyn OffsetFunction> = Arc::new(roa.clone());
        let spec = ConfidenceRegionSpec::new(empty_model(2), 0.0, roa.c_lambda, Some(offset), 0.05).unwrap();
        let r = volume_ratio(&spec, &roa, &smib_box(), 5000, 3).unwrap();
        assert_abs_diff_eq!(r.ratio(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn box_without_ellipse_gives_infinite_ratio() {
        let roa = build_certified(&build_smib()).unwrap();
        let spec = ConfidenceRegionSpec::new(empty_model(2), 0.0, 1.0, None, 0.05).unwrap();
        let r = volume_ratio(&spec, &roa, &[(3.0, 4.0), (2.5, 3.0)], 1000, 1).unwrap();
        assert_eq!(r, VolumeRatio::Infinite { confidence_count: 1000, samples: 1000 });
        assert!(volume_ratio(&spec, &roa, &smib_box(), 999, 1).is_err());
    }

    #[test]
    fn bad_plane_is_index_error() {
        let spec = ConfidenceRegionSpec::new(empty_model(4), 0.0, 1.0, None, 0.05).unwrap();
        let bbox = vec![(-1.0, 1.0); 4];
        assert!(matches!(project_slices(&spec, &[(0, 4)], &bbox, 4), Err(Error::Index(_))));
        assert!(matches!(project_slices(&spec, &[(1, 1)], &bbox, 4), Err(Error::Index(_))));
        assert_eq!(project_slices(&spec, &machine_planes(4), &bbox, 4).unwrap().len(), 2);
    }

    #[test]
    fn wilson_interval_contains_estimate() {
        let (lo, hi) = wilson_interval(30, 100);
        assert!(lo < 0.3 && 0.3 < hi);
        let (lo, hi) = wilson_interval(0, 100);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0);
    }
}
