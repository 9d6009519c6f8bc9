//! Experiment orchestration: TOML configuration, validation, and the
//! reproducible runner behind the `experiment` and `diagnose` subcommands.
//!
//! A run writes three files into the output directory:
//!
//! * `manifest.json` — config echo, schema and package versions, wall time,
//!   per-cell seeds and status; enough to re-run any cell in isolation.
//! * `counts.csv` — one row per `(cell, replicate)` with the maxima count
//!   and the replicate seed; byte-identical across reruns of the same
//!   config.
//! * `report.json` — one [`DiagnosticsReport`] per `(u, R)` cell.
//!
//! No operation reads system entropy: a master seed is mandatory and all
//! randomness is derived from it.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::critpoints::ScanParams;
use crate::diagnostics::{build_report, simulate_bf_patterns, DiagnosticsReport};
use crate::error::{Error, Result};
use crate::geom::Box2;
use crate::kernels::KernelModel;
use crate::samplers::rng::{derive_seed, StreamDomain};

pub const SCHEMA_VERSION: u32 = 1;

/// Kernel selection by string id plus parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelSpec {
    /// One of `bargmann-fock`, `random-plane-wave`, `monochromatic-sphere`,
    /// `gaussian` (with `width`).
    pub family: String,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    /// Width of the `gaussian` family.
    #[serde(default)]
    pub width: Option<f64>,
}

fn default_dimension() -> usize {
    2
}

impl KernelSpec {
    pub fn build(&self) -> Result<KernelModel> {
        match self.family.as_str() {
            "bargmann-fock" => Ok(KernelModel::bargmann_fock(self.dimension)),
            "random-plane-wave" => Ok(KernelModel::random_plane_wave()),
            "monochromatic-sphere" => Ok(KernelModel::monochromatic_sphere(self.dimension)),
            "gaussian" => {
                let w = self.width.ok_or_else(|| {
                    Error::InvalidConfig(vec![
                        "kernel.width: required for the gaussian family".into()
                    ])
                })?;
                Ok(KernelModel::gaussian_width(self.dimension, w))
            }
            other => Err(Error::UnsupportedFamily {
                family: other.to_string(),
            }),
        }
    }
}

/// Declarative experiment configuration (TOML on disk).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub kernel: KernelSpec,
    /// Levels `u`.
    pub levels: Vec<f64>,
    /// Physical window sides `R` (`[-R/2, R/2]²`).
    pub windows: Vec<f64>,
    pub replicates: usize,
    /// Master seed; mandatory, no entropy default.
    pub seed: Option<u64>,
    #[serde(default = "default_grid_factor")]
    pub grid_factor: f64,
    /// Avoidance boxes as half-sides of centered squares, in rescaled
    /// coordinates.
    #[serde(default = "default_boxes")]
    pub avoidance_half_sides: Vec<f64>,
    /// Worker threads; `GP_THREADS` overrides, default all cores.
    #[serde(default)]
    pub parallelism: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_grid_factor() -> f64 {
    0.25
}

fn default_boxes() -> Vec<f64> {
    vec![0.5]
}

/// Validation output: hard errors plus advisory warnings.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::InvalidConfig(vec![format!("parse error: {e}")]))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

/// Schema and cross-field checks. The quantitative-convergence window
/// `u <= 2 sqrt(log R)` produces a warning, not an error.
pub fn validate_config(config: &ExperimentConfig) -> ValidationReport {
    let mut rep = ValidationReport::default();
    if config.seed.is_none() {
        rep.errors
            .push("seed: missing; a master seed is mandatory (no entropy default)".into());
    }
    if config.replicates == 0 {
        rep.errors.push("replicates: must be at least 1".into());
    }
    if config.levels.is_empty() {
        rep.errors.push("levels: at least one level required".into());
    }
    if config.levels.iter().any(|&u| !(u > 0.0)) {
        rep.errors.push("levels: all levels must be positive".into());
    }
    if config.windows.is_empty() {
        rep.errors.push("windows: at least one window required".into());
    }
    if config.windows.iter().any(|&r| !(r > 0.0)) {
        rep.errors.push("windows: all sides must be positive".into());
    }
    if !(config.grid_factor > 0.0 && config.grid_factor <= 2.0) {
        rep.errors
            .push("grid_factor: must lie in (0, 2]".into());
    }
    if config.schema_version != SCHEMA_VERSION {
        rep.errors.push(format!(
            "schema_version: expected {SCHEMA_VERSION}, found {}",
            config.schema_version
        ));
    }
    if let Err(e) = config.kernel.build() {
        rep.errors.push(format!("kernel: {e}"));
    }
    for &u in &config.levels {
        for &r in &config.windows {
            if r > 1.0 && u > 2.0 * r.ln().sqrt() {
                rep.warnings.push(format!(
                    "cell (u={u}, R={r}): outside the quantitative-convergence window \
                     u <= 2 sqrt(log R) = {:.4}",
                    2.0 * r.ln().sqrt()
                ));
            }
        }
    }
    rep
}

/// Per-cell summary recorded in the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellStatus {
    pub index: usize,
    pub u: f64,
    pub window_side: f64,
    pub seed: u64,
    pub status: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest<'a> {
    pub schema_version: u32,
    pub package_version: &'static str,
    pub config: &'a ExperimentConfig,
    pub cells: Vec<CellStatus>,
    pub wall_time_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub cells: Vec<CellStatus>,
    pub reports: Vec<DiagnosticsReport>,
    pub output_dir: PathBuf,
}

fn threads_from(config: &ExperimentConfig) -> usize {
    std::env::var("GP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .or(config.parallelism)
        .unwrap_or_else(num_threads_default)
        .max(1)
}

fn num_threads_default() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Run every `(u, R)` cell of the config and write the report bundle.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    let validation = validate_config(config);
    if !validation.is_ok() {
        return Err(Error::InvalidConfig(validation.errors));
    }
    let out = config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("gp-out"));
    fs::create_dir_all(&out)?;
    let started = Instant::now();
    let master = config.seed.expect("validated above");
    let kernel = config.kernel.build()?;
    let scan = ScanParams {
        grid_factor: config.grid_factor,
        ..Default::default()
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads_from(config))
        .build()
        .expect("thread pool");

    let mut cells = Vec::new();
    let mut reports = Vec::new();
    let mut counts_rows: Vec<String> = Vec::new();
    let mut cell_index = 0usize;
    for &u in &config.levels {
        for &window in &config.windows {
            let cell_seed = derive_seed(master, StreamDomain::Replicate, cell_index as u64);
            let boxes: Vec<Box2> = config
                .avoidance_half_sides
                .iter()
                .map(|&h| Box2::centered(h))
                .collect();
            let result = pool.install(|| -> Result<(DiagnosticsReport, Vec<u64>)> {
                let patterns =
                    simulate_bf_patterns(u, window, config.replicates, cell_seed, &scan)?;
                // drop avoidance boxes that do not fit in this window
                let fitting: Vec<Box2> = boxes
                    .iter()
                    .copied()
                    .filter(|b| patterns[0].window.contains_box(b))
                    .collect();
                let report = build_report(&kernel, &patterns, u, window, &fitting, cell_seed)?;
                let counts = patterns.iter().map(|p| p.count() as u64).collect();
                Ok((report, counts))
            });
            let status = match result {
                Ok((report, counts)) => {
                    for (rep, count) in counts.iter().enumerate() {
                        let rseed = derive_seed(cell_seed, StreamDomain::Replicate, rep as u64);
                        counts_rows.push(format!(
                            "{cell_index},{u},{window},{rep},{count},{rseed}"
                        ));
                    }
                    reports.push(report);
                    "ok".to_string()
                }
                Err(e) => format!("failed: {e}"),
            };
            cells.push(CellStatus {
                index: cell_index,
                u,
                window_side: window,
                seed: cell_seed,
                status,
            });
            cell_index += 1;
        }
    }

    // counts.csv: header plus deterministic rows
    let mut counts_file = fs::File::create(out.join("counts.csv"))?;
    writeln!(counts_file, "cell,u,window_side,replicate,count,seed")?;
    for row in &counts_rows {
        writeln!(counts_file, "{row}")?;
    }

    let report_json = serde_json::to_string_pretty(&reports)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    fs::write(out.join("report.json"), report_json)?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        package_version: env!("CARGO_PKG_VERSION"),
        config,
        cells: cells.clone(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    fs::write(out.join("manifest.json"), manifest_json)?;

    let failed: Vec<&CellStatus> = cells.iter().filter(|c| c.status != "ok").collect();
    if !failed.is_empty() {
        // partial failures recorded in the manifest; the error lists them
        return Err(Error::InvalidConfig(
            failed
                .iter()
                .map(|c| format!("cell {} (u={}, R={}): {}", c.index, c.u, c.window_side, c.status))
                .collect(),
        ));
    }
    Ok(RunSummary {
        cells,
        reports,
        output_dir: out,
    })
}
