//! `roa`: sample stable states with GP-UCB, rasterize the confidence region
//! and compare its volume with the certified ellipsoid.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use roa_core::certified::build_certified;
use roa_core::dynamics::{load_system, PowerSystem};
use roa_core::region::{
    machine_planes, project_slices, volume_ratio, write_slices, ConfidenceRegionSpec,
    EnergyOffset, OffsetFunction, RegionMode,
};
use roa_core::ucb::{
    c_max_of, derive_seed, load_run_config, read_records_csv, run_gp_ucb, write_records_csv,
    RunCheckpoint, RunConfig, SamplingRecord,
};
use roa_core::{Error, Result};

const RECORDS_FILE: &str = "records.csv";
const CHECKPOINT_FILE: &str = "model.json";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "roa", version, about = "Probabilistic region-of-attraction estimation for swing dynamics")]
struct Cli {
    /// Worker threads for the parallel sections.
    #[arg(long, global = true, env = "ROA_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the GP-UCB sampler and write records, model checkpoint and manifest.
    Sample {
        #[arg(long)]
        system: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rasterize the confidence region on equilibrium slices.
    Region {
        #[command(flatten)]
        artifacts: Artifacts,
        /// Must match the mode the checkpoint was trained in.
        #[arg(long)]
        mode: Option<RegionMode>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo volume ratio against the certified ellipsoid, as JSON.
    Volume {
        #[command(flatten)]
        artifacts: Artifacts,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Artifacts {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    system: PathBuf,
    /// `lo:hi` for every axis, or one comma-separated `lo:hi` per axis.
    #[arg(long = "box")]
    bbox: Option<String>,
    /// Run configuration supplying the box when `--box` is absent.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize)]
struct ArtifactPaths {
    records: String,
    checkpoint: String,
}

#[derive(Serialize)]
struct ExperimentManifest {
    version: &'static str,
    system_file: String,
    config_file: String,
    config: RunConfig,
    rng_seed: u64,
    artifacts: ArtifactPaths,
    stable_records: usize,
    total_iterations: usize,
    noise_sigma: f64,
    c_max: f64,
    duration_seconds: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Sample { system, config, out, seed } => cmd_sample(&system, &config, &out, seed),
        Command::Region { artifacts, mode, resolution, out } => {
            cmd_region(&artifacts, mode, resolution, &out)
        }
        Command::Volume { artifacts, samples, seed } => cmd_volume(&artifacts, samples, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.class());
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Exit status per error class; 2 is left to argument parsing.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse(_) | Error::Io { .. } => 3,
        Error::Equilibrium { .. } => 4,
        Error::Topology(_) => 5,
        Error::Dimension { .. } => 6,
        Error::Index(_) => 7,
        Error::NonFinite { .. } => 8,
        Error::NotConverged => 9,
        Error::DegenerateTrajectory { .. } => 10,
        Error::NotHurwitz { .. } => 11,
        Error::Factorization { .. } => 12,
        Error::EmptyDomain => 13,
        Error::BudgetExhausted { .. } => 14,
        Error::CertificateVoid { .. } => 15,
        Error::Consistency(_) => 16,
        Error::InvalidArgument(_) => 17,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_sample(system: &Path, config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let start = Instant::now();
    let sys = load_system(system)?;
    let mut cfg = load_run_config(config)?;
    if let Some(s) = seed {
        cfg.sampler.rng_seed = s;
    }
    let domain = cfg.sampling_domain()?;
    if domain.dim() != sys.state_dim() {
        return Err(Error::Dimension {
            expected: sys.state_dim(),
            got: domain.dim(),
        });
    }
    let run = run_gp_ucb(&sys, domain, &cfg.sampler)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let records_path = out.join(RECORDS_FILE);
    let f = std::fs::File::create(&records_path).map_err(|e| Error::io(&records_path, e))?;
    write_records_csv(&run.records, sys.state_dim(), std::io::BufWriter::new(f))?;
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    write_json(&checkpoint_path, &run.checkpoint(&cfg.sampler))?;

    let manifest = ExperimentManifest {
        version: env!("CARGO_PKG_VERSION"),
        system_file: system.display().to_string(),
        config_file: config.display().to_string(),
        rng_seed: cfg.sampler.rng_seed,
        artifacts: ArtifactPaths {
            records: records_path.display().to_string(),
            checkpoint: checkpoint_path.display().to_string(),
        },
        stable_records: run.stable_records().count(),
        total_iterations: run.records.len(),
        noise_sigma: run.noise_sigma,
        c_max: run.c_max,
        duration_seconds: start.elapsed().as_secs_f64(),
        config: cfg,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    println!(
        "{} stable of {} sampled; c_max = {:.6}; artifacts in {}",
        manifest.stable_records,
        manifest.total_iterations,
        manifest.c_max,
        out.display()
    );
    Ok(())
}

/// Loads the checkpoint, records and system and rebuilds the region.
fn load_region(
    a: &Artifacts,
    mode: Option<RegionMode>,
) -> Result<(PowerSystem, ConfidenceRegionSpec, Vec<(f64, f64)>, Option<RunConfig>)> {
    let sys = load_system(&a.system)?;
    let text = std::fs::read_to_string(&a.checkpoint).map_err(|e| Error::io(&a.checkpoint, e))?;
    let checkpoint: RunCheckpoint = serde_json::from_str(&text)?;
    let f = std::fs::File::open(&a.records).map_err(|e| Error::io(&a.records, e))?;
    let records = read_records_csv(f)?;
    check_consistency(&checkpoint, &records)?;
    if let Some(m) = mode {
        if m != checkpoint.mode {
            return Err(Error::Consistency(format!(
                "requested {m} mode but the checkpoint was trained in {} mode",
                checkpoint.mode
            )));
        }
    }
    let dim = sys.state_dim();
    if checkpoint.model.inputs.first().is_some_and(|x| x.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            got: checkpoint.model.inputs[0].len(),
        });
    }
    let offset: Option<Arc<dyn OffsetFunction>> = match checkpoint.mode {
        RegionMode::Offset => Some(Arc::new(EnergyOffset(sys.clone()))),
        RegionMode::Equilibrium => None,
    };
    let spec = checkpoint.region_spec(c_max_of(&records), offset)?;
    let config = a.config.as_ref().map(load_run_config).transpose()?;
    let bbox = match (&a.bbox, &config) {
        (Some(text), _) => parse_box(text, dim)?,
        (None, Some(cfg)) => cfg.domain.bounds(),
        (None, None) => {
            return Err(Error::InvalidArgument("either --box or --config is required".into()))
        }
    };
    if bbox.len() != dim {
        return Err(Error::Dimension {
            expected: dim,
            got: bbox.len(),
        });
    }
    Ok((sys, spec, bbox, config))
}

fn check_consistency(checkpoint: &RunCheckpoint, records: &[SamplingRecord]) -> Result<()> {
    let stable = records.iter().filter(|r| r.stable).count();
    let n = checkpoint.model.observations.len();
    if stable != n {
        return Err(Error::Consistency(format!(
            "records hold {stable} stable samples but the checkpoint has {n} observations"
        )));
    }
    Ok(())
}

fn parse_box(text: &str, dim: usize) -> Result<Vec<(f64, f64)>> {
    let bad = || Error::Parse(format!("box '{text}' is not lo:hi[,lo:hi...]"));
    let axes = text
        .split(',')
        .map(|part| {
            let (lo, hi) = part.split_once(':').ok_or_else(bad)?;
            let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
            let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
            Ok((lo, hi))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(if axes.len() == 1 { vec![axes[0]; dim] } else { axes })
}

fn cmd_region(a: &Artifacts, mode: Option<RegionMode>, resolution: Option<usize>, out: &Path) -> Result<()> {
    let (sys, spec, bbox, config) = load_region(a, mode)?;
    let resolution = resolution
        .or(config.map(|c| c.resolution))
        .unwrap_or(200);
    let certified = build_certified(&sys).ok();
    let grids = project_slices(&spec, &machine_planes(spec.dim()), &bbox, resolution)?;
    let manifest = write_slices(&spec, &grids, certified.as_ref(), out)?;
    let members: usize = grids.iter().map(|g| g.member_count()).sum();
    let cells: usize = grids.iter().map(|g| g.cell_count()).sum();
    println!("c_max = {:.6}", spec.c_max);
    println!("beta = {:.6}", spec.beta);
    println!(
        "member fraction = {:.6} over {} slice(s)",
        members as f64 / cells as f64,
        manifest.slices.len()
    );
    Ok(())
}

fn cmd_volume(a: &Artifacts, samples: usize, seed: u64) -> Result<()> {
    let (sys, spec, bbox, _) = load_region(a, None)?;
    let certified = build_certified(&sys)?;
    let ratio = volume_ratio(&spec, &certified, &bbox, samples, derive_seed(seed, "volume", 0))?;
    println!("{}", serde_json::to_string(&ratio)?);
    Ok(())
}
