//! Parameter sweeps and batch spectrum fitting, with CSV + JSON artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::hamiltonian::{
    build_ground_hamiltonian, eigensystem, manifold_gap, Manifold, SystemParams,
};
use crate::lindblad::{polarization_theory, solve_point, RateSet};
use crate::odmr::{
    fit_odmr, grid_around, read_spectrum, synthesize_odmr, transition_lines, write_fit,
    write_spectrum, Branch, FitOptions, FitResult, LineShape,
};

/// Overrides the configured worker count.
pub const WORKERS_ENV: &str = "NV_DNP_WORKERS";
pub const ROWS_FILE: &str = "sweep.csv";
pub const METADATA_FILE: &str = "sweep.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const FIT_SUMMARY_FILE: &str = "fit_summary.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Field magnitude, G.
    B,
    /// Misalignment angle, degrees.
    Theta,
    /// Ground transverse strain, MHz.
    Strain,
    /// Optical pump rate, MHz.
    PumpRate,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b" | "B" => Ok(Axis::B),
            "theta" => Ok(Axis::Theta),
            "strain" => Ok(Axis::Strain),
            "pump_rate" => Ok(Axis::PumpRate),
            other => Err(invalid("axis", format!("unknown axis {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Output {
    PTh,
    OdmrSpectrum,
    Lines,
    Eigenvalues,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRange {
    pub start: f64,
    pub stop: f64,
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_step() -> f64 {
    0.9
}

fn default_strain_ratio() -> f64 {
    10.0
}

fn default_outputs() -> Vec<Output> {
    vec![Output::PTh]
}

fn default_output_path() -> PathBuf {
    PathBuf::from("sweep_out")
}

/// Settings for spectra written with the `odmr_spectrum` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSettings {
    pub branch: Branch,
    pub shape: LineShape,
    /// MHz beyond the outermost line on each side.
    pub margin: f64,
    /// Grid spacing, MHz.
    pub step: f64,
}

impl Default for SpectrumSettings {
    fn default() -> Self {
        Self {
            branch: Branch::Plus,
            shape: LineShape {
                width: 1.0,
                contrast: 0.05,
                baseline: 1.0,
            },
            margin: 8.0,
            step: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: Axis,
    /// Uniform grid; exclusive with `values`.
    #[serde(default)]
    pub range: Option<SweepRange>,
    /// Explicit axis values; exclusive with `range`.
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub params: SystemParams,
    #[serde(default)]
    pub rates: RateSet,
    /// Excited-state strain as a multiple of the ground-state strain.
    #[serde(default = "default_strain_ratio")]
    pub strain_ratio: f64,
    #[serde(default = "default_outputs")]
    pub outputs: Vec<Output>,
    #[serde(default = "default_output_path")]
    pub output_path: PathBuf,
    /// Worker threads; all available cores when unset.
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub spectrum: SpectrumSettings,
}

impl SweepConfig {
    pub fn new(axis: Axis, range: SweepRange) -> Self {
        Self {
            axis,
            range: Some(range),
            values: None,
            params: SystemParams::default(),
            rates: RateSet::default(),
            strain_ratio: default_strain_ratio(),
            outputs: default_outputs(),
            output_path: default_output_path(),
            parallelism: None,
            spectrum: SpectrumSettings::default(),
        }
    }

    pub fn with_values(axis: Axis, values: Vec<f64>) -> Self {
        Self {
            range: None,
            values: Some(values),
            ..Self::new(
                axis,
                SweepRange {
                    start: 0.0,
                    stop: 0.0,
                    step: 1.0,
                },
            )
        }
    }

    /// Axis values in sweep order.
    pub fn grid(&self) -> Vec<f64> {
        match (&self.values, &self.range) {
            (Some(v), _) => v.clone(),
            (None, Some(r)) if r.step > 0.0 && r.stop >= r.start => {
                let n = ((r.stop - r.start) / r.step + 1e-9).floor() as usize + 1;
                (0..n).map(|k| r.start + k as f64 * r.step).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Physics parameters at one axis value.
    pub fn point(&self, value: f64) -> (SystemParams, RateSet) {
        let mut params = self.params.clone();
        let mut rates = self.rates.clone();
        match self.axis {
            Axis::B => params.b_magnitude = value,
            Axis::Theta => params.theta = value,
            Axis::Strain => params = params.with_strain(value, self.strain_ratio),
            Axis::PumpRate => rates = rates.with_pump(value),
        }
        (params, rates)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.range, &self.values) {
            (Some(_), Some(_)) => {
                return Err(invalid(
                    "range",
                    "give either `range` or `values`, not both",
                ))
            }
            (None, None) => return Err(invalid("range", "one of `range` or `values` is required")),
            (Some(r), None) => {
                if !(r.step.is_finite() && r.step > 0.0) {
                    return Err(invalid("range.step", "must be > 0"));
                }
                if !(r.start.is_finite() && r.stop.is_finite()) || r.stop < r.start {
                    return Err(invalid("range", "need finite start <= stop"));
                }
            }
            (None, Some(v)) => {
                if v.is_empty() {
                    return Err(invalid("values", "must not be empty"));
                }
                if v.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(invalid("values", "must be strictly increasing"));
                }
            }
        }
        self.params.validate()?;
        self.rates.validate()?;
        if !self.strain_ratio.is_finite() {
            return Err(invalid("strain_ratio", "must be finite"));
        }
        if self.parallelism == Some(0) {
            return Err(invalid("parallelism", "must be >= 1"));
        }
        let shape = &self.spectrum.shape;
        if !(shape.width.is_finite() && shape.width > 0.0) {
            return Err(invalid("spectrum.shape.width", "must be > 0"));
        }
        if !(self.spectrum.step.is_finite() && self.spectrum.step > 0.0) {
            return Err(invalid("spectrum.step", "must be > 0"));
        }
        // every grid point must map to valid physics
        for value in self.grid() {
            let (params, rates) = self.point(value);
            let name = match self.axis {
                Axis::B => "b_magnitude",
                Axis::Theta => "theta",
                Axis::Strain => "strain_ground",
                Axis::PumpRate => "gamma_pump",
            };
            params
                .validate()
                .and_then(|_| rates.validate())
                .map_err(|e| invalid(name, format!("axis value {value}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            path: self.output_path.clone(),
            reason: e.to_string(),
        })
    }

    /// SHA-256 of the resolved config.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex_digest(self.to_toml()?.as_bytes()))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Read and validate a TOML sweep config. Unset physics parameters take
/// their defaults; unknown keys are rejected.
pub fn parse_config(path: &Path) -> Result<SweepConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config { reason, .. } => Error::Config {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

pub fn parse_config_str(text: &str) -> Result<SweepConfig> {
    let config: SweepConfig = toml::from_str(text).map_err(|e| Error::Config {
        path: PathBuf::new(),
        reason: e.to_string(),
    })?;
    config.validate().map_err(|e| Error::Config {
        path: PathBuf::new(),
        reason: e.to_string(),
    })?;
    Ok(config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    /// `ok`, or the failure message.
    pub status: String,
    pub p_th: Option<f64>,
    /// Smallest ground anticrossing-pair gap, MHz.
    pub min_gap: Option<f64>,
    pub ground_ms0: Option<f64>,
    /// `|M rho|_F / |M|_F`
    pub residual: Option<f64>,
    /// Smallest eigenvalue of the steady state.
    pub min_eigenvalue: Option<f64>,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Everything computed at one grid point.
#[derive(Clone, Debug)]
pub struct PointResult {
    pub row: SweepRow,
    pub ground_ms0_populations: Option<[f64; 3]>,
}

pub fn evaluate_point(config: &SweepConfig, value: f64) -> PointResult {
    let (params, rates) = config.point(value);
    let min_gap = manifold_gap(Manifold::Ground, &params)
        .ok()
        .filter(|g| g.is_finite());
    let solved = solve_point(&params, &rates).and_then(|ss| {
        ss.rho.check_invariants()?;
        let p_th = polarization_theory(&ss.rho)?;
        let min_eig = ss.rho.min_eigenvalue()?;
        Ok((ss, p_th, min_eig))
    });
    match solved {
        Ok((ss, p_th, min_eig)) => PointResult {
            row: SweepRow {
                value,
                status: "ok".into(),
                p_th: Some(p_th),
                min_gap,
                ground_ms0: Some(ss.rho.ground_ms0_population()),
                residual: Some(ss.residual / ss.generator_norm),
                min_eigenvalue: Some(min_eig),
            },
            ground_ms0_populations: Some(ss.rho.ground_ms0_populations()),
        },
        Err(e) => PointResult {
            row: SweepRow {
                value,
                status: e.to_string(),
                p_th: None,
                min_gap,
                ground_ms0: None,
                residual: None,
                min_eigenvalue: None,
            },
            ground_ms0_populations: None,
        },
    }
}

/// Worker count: the environment override, then `configured`, then all
/// cores.
pub fn resolve_workers(configured: Option<usize>) -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .or(configured)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn worker_count(config: &SweepConfig) -> usize {
    resolve_workers(config.parallelism)
}

/// Evaluate every grid point on a bounded pool; results are in grid order.
pub fn compute_points(config: &SweepConfig, workers: usize) -> Result<Vec<PointResult>> {
    let grid = config.grid();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| invalid("parallelism", e.to_string()))?;
    Ok(pool.install(|| {
        grid.par_iter()
            .map(|&v| evaluate_point(config, v))
            .collect()
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepMetadata {
    pub version: String,
    pub axis: Axis,
    pub points: usize,
    pub failed: usize,
    pub fingerprint: String,
    pub rows_sha256: String,
    pub outputs: Vec<Output>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub output_dir: PathBuf,
    pub metadata: SweepMetadata,
}

#[derive(Serialize)]
struct LineRecord {
    point: usize,
    value: f64,
    frequency: f64,
    probability: f64,
    source_ms: i8,
    source_mi: i8,
    upper_ms: i8,
    upper_mi: i8,
}

fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    fs::write(path, &bytes)?;
    Ok(bytes)
}

/// Run a sweep and write its artifacts under `config.output_path`:
/// the row table, a metadata sidecar with the config fingerprint, the
/// resolved config, and any requested per-point outputs. Point failures are
/// recorded in the status column and never abort the sweep.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepReport> {
    config.validate()?;
    let dir = config.output_path.clone();
    fs::create_dir_all(&dir)?;
    let resolved = config.to_toml()?;
    fs::write(dir.join(RESOLVED_CONFIG_FILE), &resolved)?;

    let workers = worker_count(config);
    let grid = config.grid();
    info!(
        "sweeping {:?} over {} points with {workers} workers",
        config.axis,
        grid.len()
    );
    let points = compute_points(config, workers)?;
    let rows: Vec<SweepRow> = points.iter().map(|p| p.row.clone()).collect();
    for row in rows.iter().filter(|r| !r.is_ok()) {
        warn!("{:?} = {}: {}", config.axis, row.value, row.status);
    }
    let bytes = write_rows(&dir.join(ROWS_FILE), &rows)?;

    if config.outputs.contains(&Output::Lines) {
        let mut w = csv::Writer::from_path(dir.join("lines.csv"))?;
        for (k, &value) in grid.iter().enumerate() {
            let (params, _) = config.point(value);
            for l in transition_lines(&params, config.spectrum.branch)? {
                w.serialize(LineRecord {
                    point: k,
                    value,
                    frequency: l.frequency,
                    probability: l.probability,
                    source_ms: l.source_label.ms,
                    source_mi: l.source_label.mi,
                    upper_ms: l.upper_label.ms,
                    upper_mi: l.upper_label.mi,
                })?;
            }
        }
        w.flush()?;
    }

    if config.outputs.contains(&Output::Eigenvalues) {
        let mut w = csv::Writer::from_path(dir.join("eigenvalues.csv"))?;
        let mut header = vec!["value".to_string()];
        header.extend((0..9).map(|k| format!("e{k}")));
        w.write_record(&header)?;
        for &value in &grid {
            let (params, _) = config.point(value);
            let es = eigensystem(&build_ground_hamiltonian(&params)?)?;
            let mut rec = vec![value.to_string()];
            rec.extend(es.energies.iter().map(|e| e.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }

    if config.outputs.contains(&Output::OdmrSpectrum) {
        let sdir = dir.join("spectra");
        fs::create_dir_all(&sdir)?;
        for (k, point) in points.iter().enumerate() {
            let Some(populations) = point.ground_ms0_populations else {
                continue;
            };
            let (params, _) = config.point(point.row.value);
            let lines = transition_lines(&params, config.spectrum.branch)?;
            let grid = grid_around(&lines, config.spectrum.margin, config.spectrum.step);
            let s = synthesize_odmr(
                &lines,
                &populations,
                &config.spectrum.shape,
                &grid,
                params.b_magnitude,
                Some(params.theta),
            )?;
            write_spectrum(&sdir.join(format!("point_{k:05}.csv")), &s)?;
        }
    }

    let metadata = SweepMetadata {
        version: env!("CARGO_PKG_VERSION").to_string(),
        axis: config.axis,
        points: rows.len(),
        failed: rows.iter().filter(|r| !r.is_ok()).count(),
        fingerprint: hex_digest(resolved.as_bytes()),
        rows_sha256: hex_digest(&bytes),
        outputs: config.outputs.clone(),
    };
    fs::write(
        dir.join(METADATA_FILE),
        serde_json::to_string_pretty(&metadata)?,
    )?;
    Ok(SweepReport {
        rows,
        output_dir: dir,
        metadata,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub file: PathBuf,
    pub fit: std::result::Result<FitResult, String>,
}

#[derive(Serialize)]
struct SummaryRecord<'a> {
    file: &'a str,
    status: &'a str,
    b_field: Option<f64>,
    p_exp: Option<f64>,
    theta_fit: Option<f64>,
    width: Option<f64>,
    residual: Option<f64>,
}

/// Fit every `*.csv` spectrum in `dir` (sorted by name), concurrently.
/// Files that cannot be read or fitted are logged and recorded as errors.
pub fn fit_batch(
    dir: &Path,
    params: &SystemParams,
    options: &FitOptions,
    workers: usize,
) -> Result<Vec<BatchEntry>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_name().is_some_and(|n| n != FIT_SUMMARY_FILE)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        warn!("no spectra found in {}", dir.display());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| invalid("parallelism", e.to_string()))?;
    let entries: Vec<BatchEntry> = pool.install(|| {
        files
            .par_iter()
            .map(|file| {
                let fit = read_spectrum(file)
                    .and_then(|s| fit_odmr(&s, params, options))
                    .map_err(|e| e.to_string());
                BatchEntry {
                    file: file.clone(),
                    fit,
                }
            })
            .collect()
    });
    for e in &entries {
        match &e.fit {
            Ok(fit) => write_fit(&e.file.with_extension("fit.json"), fit)?,
            Err(reason) => warn!("skipping {}: {reason}", e.file.display()),
        }
    }
    Ok(entries)
}

/// Summary table of a batch: file, status, B, P_exp, theta, width, residual.
pub fn write_fit_summary(path: &Path, entries: &[BatchEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        let name = e.file.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let rec = match &e.fit {
            Ok(f) => SummaryRecord {
                file: name,
                status: "ok",
                b_field: Some(f.b_field),
                p_exp: Some(f.p_exp),
                theta_fit: Some(f.theta_fit),
                width: Some(f.width),
                residual: Some(f.residual),
            },
            Err(reason) => SummaryRecord {
                file: name,
                status: reason,
                b_field: None,
                p_exp: None,
                theta_fit: None,
                width: None,
                residual: None,
            },
        };
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}
