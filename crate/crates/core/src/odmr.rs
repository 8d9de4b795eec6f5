//! Microwave transition lines of the ground manifold, Lorentzian-sum ODMR
//! spectra and their least-squares inversion to nuclear populations.
//!
//! Populations are always ordered by nuclear projection `mI = +1, 0, -1`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use ndarray_linalg::LeastSquaresSvd;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hamiltonian::{build_ground_hamiltonian, eigensystem, StateLabel, SystemParams};
use crate::spin::{embed, spin_matrices};

/// Lines weaker than this fraction of the strongest line are dropped.
pub const PRUNE_THRESHOLD: f64 = 1e-4;
/// Granularity of the reported fit angle, degrees.
pub const THETA_RESOLUTION: f64 = 0.02;
/// Upper bound of the spectrum values.
pub const MAX_FLUORESCENCE: f64 = 1.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// `mS = 0 -> +1`
    Plus,
    /// `mS = 0 -> -1`
    Minus,
}

impl Branch {
    pub fn target_ms(self) -> i8 {
        match self {
            Branch::Plus => 1,
            Branch::Minus => -1,
        }
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plus" | "+1" | "+" => Ok(Branch::Plus),
            "minus" | "-1" | "-" => Ok(Branch::Minus),
            other => Err(invalid(
                "branch",
                format!("expected plus or minus, got {other:?}"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionLine {
    /// MHz
    pub frequency: f64,
    /// Strength relative to the strongest line of the branch.
    pub probability: f64,
    /// `|<f|Sx|i>|^2`
    pub strength: f64,
    pub source_label: StateLabel,
    pub upper_label: StateLabel,
}

impl TransitionLine {
    /// Position of the source `mI` in the population triple.
    pub fn population_slot(&self) -> usize {
        (1 - self.source_label.mi) as usize
    }
}

/// Every line of a branch, without pruning or normalization.
///
/// Source states are all eigenstates not labeled with the target `mS`, so
/// levels mixed by an anticrossing keep contributing under either label.
pub fn raw_transition_lines(params: &SystemParams, branch: Branch) -> Result<Vec<TransitionLine>> {
    let system = eigensystem(&build_ground_hamiltonian(params)?)?;
    let ops = spin_matrices(1.0)?;
    let sx = embed(Some(&ops.sx), None)?.matrix;
    let coupled = sx.dot(&system.vectors);
    let target = branch.target_ms();

    let mut lines = Vec::new();
    for (f, upper) in system.labels.iter().enumerate() {
        if upper.ms != target {
            continue;
        }
        let bra = system.vectors.column(f);
        for (i, source) in system.labels.iter().enumerate() {
            if source.ms == target {
                continue;
            }
            let amp = bra
                .iter()
                .zip(coupled.column(i))
                .map(|(a, b)| a.conj() * b)
                .sum::<num_complex::Complex64>();
            lines.push(TransitionLine {
                frequency: (system.energies[f] - system.energies[i]).abs(),
                probability: 0.0,
                strength: amp.norm_sqr(),
                source_label: *source,
                upper_label: *upper,
            });
        }
    }
    let strongest = lines.iter().map(|l| l.strength).fold(0.0, f64::max);
    if strongest > 0.0 {
        for l in &mut lines {
            l.probability = l.strength / strongest;
        }
    }
    Ok(lines)
}

/// Allowed lines of a branch sorted by frequency, normalized so the
/// strongest has probability 1.
pub fn transition_lines(params: &SystemParams, branch: Branch) -> Result<Vec<TransitionLine>> {
    let mut lines: Vec<_> = raw_transition_lines(params, branch)?
        .into_iter()
        .filter(|l| l.probability >= PRUNE_THRESHOLD && l.frequency > 0.0)
        .collect();
    lines.sort_by(|a, b| a.frequency.total_cmp(&b.frequency));
    Ok(lines)
}

/// Groups of lines whose neighbours lie no more than `max_gap` MHz apart.
/// Input need not be sorted; output clusters are in frequency order.
pub fn line_clusters(lines: &[TransitionLine], max_gap: f64) -> Vec<Vec<TransitionLine>> {
    let mut sorted = lines.to_vec();
    sorted.sort_by(|a, b| a.frequency.total_cmp(&b.frequency));
    let mut clusters: Vec<Vec<TransitionLine>> = Vec::new();
    for line in sorted {
        match clusters.last_mut() {
            Some(c) if line.frequency - c.last().unwrap().frequency <= max_gap => c.push(line),
            _ => clusters.push(vec![line]),
        }
    }
    clusters
}

/// Unit-peak Lorentzian with full width at half maximum `width`.
pub fn lorentzian(nu: f64, center: f64, width: f64) -> f64 {
    let hw = 0.5 * width;
    hw * hw / ((nu - center).powi(2) + hw * hw)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineShape {
    /// FWHM shared by every line, MHz.
    pub width: f64,
    pub contrast: f64,
    pub baseline: f64,
}

impl Default for LineShape {
    fn default() -> Self {
        Self {
            width: 1.0,
            contrast: 0.1,
            baseline: 1.0,
        }
    }
}

/// Normalized fluorescence on a frequency grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdmrSpectrum {
    /// MHz, strictly increasing.
    pub frequencies: Vec<f64>,
    pub values: Vec<f64>,
    /// Gauss.
    pub b_field: f64,
    /// Nominal misalignment, degrees.
    pub theta: Option<f64>,
}

impl OdmrSpectrum {
    pub fn new(
        frequencies: Vec<f64>,
        values: Vec<f64>,
        b_field: f64,
        theta: Option<f64>,
    ) -> Result<Self> {
        let s = Self {
            frequencies,
            values,
            b_field,
            theta,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frequencies.len() != self.values.len() {
            return Err(Error::InvalidSpectrum(format!(
                "{} frequencies but {} values",
                self.frequencies.len(),
                self.values.len()
            )));
        }
        if self.frequencies.is_empty() {
            return Err(Error::InvalidSpectrum("empty grid".into()));
        }
        if let Some(k) = self.frequencies.iter().position(|f| !f.is_finite()) {
            return Err(Error::InvalidSpectrum(format!(
                "non-finite frequency at row {k}"
            )));
        }
        if let Some(k) = self.frequencies.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSpectrum(format!(
                "grid not strictly increasing at row {}",
                k + 1
            )));
        }
        if let Some(k) = self
            .values
            .iter()
            .position(|v| !(v.is_finite() && *v > 0.0 && *v <= MAX_FLUORESCENCE))
        {
            return Err(Error::InvalidSpectrum(format!(
                "value {} at row {k} outside (0, {MAX_FLUORESCENCE}]",
                self.values[k]
            )));
        }
        if !self.b_field.is_finite() || self.b_field < 0.0 {
            return Err(invalid("b_field", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Uniform grid from `start` to `stop` inclusive.
pub fn uniform_grid(start: f64, stop: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![start],
        n => (0..n)
            .map(|k| start + (stop - start) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Grid covering every line with `margin` MHz to spare on both sides.
pub fn grid_around(lines: &[TransitionLine], margin: f64, step: f64) -> Vec<f64> {
    let lo = lines
        .iter()
        .map(|l| l.frequency)
        .fold(f64::INFINITY, f64::min)
        - margin;
    let hi = lines
        .iter()
        .map(|l| l.frequency)
        .fold(f64::NEG_INFINITY, f64::max)
        + margin;
    if !lo.is_finite() || !hi.is_finite() || step <= 0.0 {
        return Vec::new();
    }
    let n = ((hi - lo) / step).ceil() as usize + 1;
    uniform_grid(lo, lo + step * (n - 1) as f64, n)
}

fn check_populations(populations: &[f64; 3]) -> Result<()> {
    if populations.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(invalid("populations", "must be finite and non-negative"));
    }
    Ok(())
}

fn dip_profile(lines: &[TransitionLine], amplitudes: &[f64; 3], width: f64, nu: f64) -> f64 {
    lines
        .iter()
        .map(|l| {
            amplitudes[l.population_slot()] * l.probability * lorentzian(nu, l.frequency, width)
        })
        .sum()
}

/// `baseline - contrast * sum_i p_i N(mI_i) Lor(nu; nu_i, width)` on `grid`.
pub fn synthesize_odmr(
    lines: &[TransitionLine],
    populations: &[f64; 3],
    shape: &LineShape,
    grid: &[f64],
    b_field: f64,
    theta: Option<f64>,
) -> Result<OdmrSpectrum> {
    if lines.is_empty() {
        return Err(Error::EmptyLines);
    }
    if !(shape.width > 0.0 && shape.width.is_finite()) {
        return Err(invalid("width", "must be positive"));
    }
    check_populations(populations)?;
    let amps = populations.map(|n| n * shape.contrast);
    let values = grid
        .iter()
        .map(|&nu| shape.baseline - dip_profile(lines, &amps, shape.width, nu))
        .collect();
    OdmrSpectrum::new(grid.to_vec(), values, b_field, theta)
}

/// Nuclear polarization `sum mI N(mI) / sum N(mI)` for `I = 1`.
pub fn polarization_from_populations(populations: &[f64; 3]) -> Result<f64> {
    check_populations(populations)?;
    let total: f64 = populations.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroPopulations);
    }
    Ok((populations[0] - populations[2]) / total)
}

pub fn polarization_experimental(fit: &FitResult) -> Result<f64> {
    polarization_from_populations(&fit.populations)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub branch: Branch,
    /// Starting angle, degrees. Defaults to the spectrum's nominal angle.
    pub theta_guess: Option<f64>,
    /// Additional starting angles, degrees.
    pub theta_starts: Vec<f64>,
    /// Starting FWHM, MHz. Estimated from the deepest dip when unset.
    pub width_guess: Option<f64>,
    pub width_bounds: (f64, f64),
    pub theta_max: f64,
    /// Half-width (degrees) of the coarse angle scan around the guess.
    pub scan_span: f64,
    /// Step (degrees) of the coarse angle scan; zero disables it.
    pub scan_step: f64,
    /// Scan minima refined in addition to the fixed starts.
    pub scan_candidates: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Frequency windows (MHz) left out of the fit.
    pub exclude: Vec<(f64, f64)>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            branch: Branch::Plus,
            theta_guess: None,
            theta_starts: vec![0.0, 0.1, 0.3],
            width_guess: None,
            width_bounds: (1e-3, 100.0),
            theta_max: 10.0,
            scan_span: 1.0,
            scan_step: 0.005,
            scan_candidates: 4,
            max_iterations: 200,
            tolerance: 1e-12,
            exclude: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Normalized to unit sum, ordered `mI = +1, 0, -1`.
    pub populations: [f64; 3],
    /// MHz
    pub width: f64,
    /// Degrees, rounded to [`THETA_RESOLUTION`].
    pub theta_fit: f64,
    /// Degrees, as optimized.
    pub theta_raw: f64,
    pub baseline: f64,
    pub contrast: f64,
    pub p_exp: f64,
    /// RMS of the fit residual.
    pub residual: f64,
    pub iterations: usize,
    pub b_field: f64,
}

pub fn round_theta(theta: f64) -> f64 {
    let r = (theta / THETA_RESOLUTION).round() * THETA_RESOLUTION;
    // keep the printed value free of float noise
    (r * 1e9).round() / 1e9
}

/// Linear sub-problem at fixed width and angle: baseline and the three
/// non-negative amplitudes `contrast * N(mI)`.
struct Projection {
    baseline: f64,
    amplitudes: [f64; 3],
    residual: Array1<f64>,
}

struct Problem<'a> {
    nu: Vec<f64>,
    y: Array1<f64>,
    params: &'a SystemParams,
    branch: Branch,
}

impl Problem<'_> {
    fn design(&self, width: f64, theta: f64) -> Result<Array2<f64>> {
        let params = self
            .params
            .clone()
            .with_field(self.params.b_magnitude, theta);
        let lines = raw_transition_lines(&params, self.branch)?;
        let mut a = Array2::<f64>::zeros((self.nu.len(), 4));
        for (r, &nu) in self.nu.iter().enumerate() {
            a[[r, 0]] = 1.0;
            for l in &lines {
                a[[r, 1 + l.population_slot()]] -=
                    l.probability * lorentzian(nu, l.frequency, width);
            }
        }
        Ok(a)
    }

    fn project(&self, width: f64, theta: f64) -> Result<Projection> {
        let a = self.design(width, theta)?;
        let scale = (0..3)
            .map(|k| a.column(k + 1).iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        for k in 0..3 {
            let norm = a.column(k + 1).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 1e-9 * scale || scale == 0.0 {
                let mi = 1 - k as i8;
                return Err(Error::FitFailed(format!(
                    "degenerate Jacobian: no line with source mI = {mi} inside the fitted window"
                )));
            }
        }
        // exhaustive active set over the three amplitude bounds
        let mut best: Option<Projection> = None;
        for mask in 0..8u8 {
            let cols: Vec<usize> = std::iter::once(0)
                .chain((0..3).filter(|k| mask & (1 << k) != 0).map(|k| k + 1))
                .collect();
            let sub = a.select(ndarray::Axis(1), &cols);
            let sol = sub.least_squares(&self.y)?.solution;
            if sol.iter().skip(1).any(|&x| x < 0.0) {
                continue;
            }
            let mut amplitudes = [0.0; 3];
            for (j, &c) in cols.iter().enumerate().skip(1) {
                amplitudes[c - 1] = sol[j];
            }
            let residual = &self.y - &sub.dot(&sol);
            let cost = residual.dot(&residual);
            if best
                .as_ref()
                .is_none_or(|b| cost < b.residual.dot(&b.residual))
            {
                best = Some(Projection {
                    baseline: sol[0],
                    amplitudes,
                    residual,
                });
            }
        }
        best.ok_or_else(|| Error::FitFailed("no feasible amplitude solution".into()))
    }
}

fn estimate_width(spectrum: &OdmrSpectrum) -> Option<f64> {
    let v = &spectrum.values;
    let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (k, bottom) = v
        .iter()
        .cloned()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    let half = 0.5 * (top + bottom);
    let left = (0..k).rev().find(|&j| v[j] >= half)?;
    let right = (k..v.len()).find(|&j| v[j] >= half)?;
    let w = spectrum.frequencies[right] - spectrum.frequencies[left];
    (w > 0.0).then_some(w)
}

/// Lowest local minima of the projected cost on a uniform angle grid.
fn scan_minima(problem: &Problem, width: f64, center: f64, options: &FitOptions) -> Vec<f64> {
    if options.scan_step <= 0.0 || options.scan_candidates == 0 {
        return Vec::new();
    }
    let lo = (center - options.scan_span).max(0.0);
    let hi = (center + options.scan_span).min(options.theta_max);
    let n = ((hi - lo) / options.scan_step).round() as usize + 1;
    let grid = uniform_grid(lo, hi, n.max(2));
    let cost: Vec<f64> = grid
        .iter()
        .map(|&t| {
            problem
                .project(width, t)
                .map(|p| p.residual.dot(&p.residual))
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    let mut minima: Vec<(f64, f64)> = (0..grid.len())
        .filter(|&k| {
            let left = k == 0 || cost[k] <= cost[k - 1];
            let right = k + 1 == grid.len() || cost[k] <= cost[k + 1];
            left && right && cost[k].is_finite()
        })
        .map(|k| (cost[k], grid[k]))
        .collect();
    minima.sort_by(|a, b| a.0.total_cmp(&b.0));
    minima.truncate(options.scan_candidates);
    minima.into_iter().map(|(_, t)| t).collect()
}

struct Trajectory {
    width: f64,
    theta: f64,
    projection: Projection,
    iterations: usize,
}

/// Damped Gauss-Newton over (ln width, theta) on the variable-projection
/// residual; the linear parameters are eliminated exactly at each step.
fn levenberg_marquardt(
    problem: &Problem,
    width0: f64,
    theta0: f64,
    options: &FitOptions,
) -> Result<Trajectory> {
    let (wmin, wmax) = options.width_bounds;
    let clamp = |x: [f64; 2]| {
        [
            x[0].clamp(wmin.ln(), wmax.ln()),
            x[1].clamp(0.0, options.theta_max),
        ]
    };
    let eval = |x: [f64; 2]| problem.project(x[0].exp(), x[1]);

    let mut x = clamp([width0.ln(), theta0]);
    let mut current = eval(x)?;
    let mut cost = current.residual.dot(&current.residual);
    let mut lambda = 1e-3;
    let steps = [1e-6, 1e-5];

    for iter in 1..=options.max_iterations {
        let n = current.residual.len();
        let mut jac = Array2::<f64>::zeros((n, 2));
        for p in 0..2 {
            let mut hi = x;
            let mut lo = x;
            hi[p] += steps[p];
            lo[p] -= steps[p];
            // one-sided at the theta = 0 bound
            let (lo, span) = if p == 1 && lo[1] < 0.0 {
                (x, steps[p])
            } else {
                (lo, 2.0 * steps[p])
            };
            let d = (&eval(hi)?.residual - &eval(lo)?.residual) / span;
            jac.column_mut(p).assign(&d);
        }
        let jtj = jac.t().dot(&jac);
        let grad = jac.t().dot(&current.residual);

        let mut accepted = false;
        for _ in 0..30 {
            let a = [
                [jtj[[0, 0]] * (1.0 + lambda), jtj[[0, 1]]],
                [jtj[[1, 0]], jtj[[1, 1]] * (1.0 + lambda)],
            ];
            let a = [[a[0][0] + 1e-300, a[0][1]], [a[1][0], a[1][1] + 1e-300]];
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            if det.abs() < 1e-300 || !det.is_finite() {
                lambda *= 10.0;
                continue;
            }
            let dx = [
                -(a[1][1] * grad[0] - a[0][1] * grad[1]) / det,
                -(-a[1][0] * grad[0] + a[0][0] * grad[1]) / det,
            ];
            let trial_x = clamp([x[0] + dx[0], x[1] + dx[1]]);
            let trial = eval(trial_x)?;
            let trial_cost = trial.residual.dot(&trial.residual);
            if trial_cost <= cost {
                let gain = cost - trial_cost;
                let moved = (trial_x[0] - x[0]).abs() + (trial_x[1] - x[1]).abs();
                x = trial_x;
                current = trial;
                cost = trial_cost;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if gain <= options.tolerance * cost || moved < 1e-10 || cost < 1e-28 * n as f64 {
                    return Ok(Trajectory {
                        width: x[0].exp(),
                        theta: x[1],
                        projection: current,
                        iterations: iter,
                    });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no downhill step at any damping: stationary to working precision
            return Ok(Trajectory {
                width: x[0].exp(),
                theta: x[1],
                projection: current,
                iterations: iter,
            });
        }
    }
    Err(Error::FitFailed(format!(
        "no convergence after {} iterations",
        options.max_iterations
    )))
}

/// Fit populations, shared width, misalignment angle and baseline to a
/// spectrum. Line positions and strengths are recomputed from the ground
/// Hamiltonian (at the spectrum's field) for every trial angle.
///
/// The contrast and the population scale are not separately identifiable;
/// the populations are normalized to unit sum and the contrast absorbs the
/// scale. The spectrum is even in the angle, so the angle is fitted as
/// non-negative.
pub fn fit_odmr(
    spectrum: &OdmrSpectrum,
    params: &SystemParams,
    options: &FitOptions,
) -> Result<FitResult> {
    spectrum.validate()?;
    let params = params
        .clone()
        .with_field(spectrum.b_field, spectrum.theta.unwrap_or(params.theta));
    params.validate()?;

    let keep: Vec<usize> = (0..spectrum.len())
        .filter(|&k| {
            let f = spectrum.frequencies[k];
            !options.exclude.iter().any(|&(lo, hi)| f >= lo && f <= hi)
        })
        .collect();
    if keep.len() < 6 {
        return Err(Error::InvalidSpectrum(format!(
            "{} usable points, need at least 6",
            keep.len()
        )));
    }
    let problem = Problem {
        nu: keep.iter().map(|&k| spectrum.frequencies[k]).collect(),
        y: keep.iter().map(|&k| spectrum.values[k]).collect(),
        params: &params,
        branch: options.branch,
    };

    let (wmin, wmax) = options.width_bounds;
    let width0 = options
        .width_guess
        .or_else(|| estimate_width(spectrum))
        .unwrap_or(1.0)
        .clamp(wmin, wmax);
    let mut starts = vec![options.theta_guess.or(spectrum.theta).unwrap_or(0.0).abs()];
    for t in &options.theta_starts {
        if !starts.iter().any(|s| (s - t.abs()).abs() < 1e-12) {
            starts.push(t.abs());
        }
    }

    starts.extend(scan_minima(&problem, width0, starts[0], options));

    let mut best: Option<Trajectory> = None;
    let mut last_err = None;
    for theta0 in starts {
        match levenberg_marquardt(&problem, width0, theta0, options) {
            Ok(t) => {
                let better = best.as_ref().is_none_or(|b| {
                    t.projection.residual.dot(&t.projection.residual)
                        < b.projection.residual.dot(&b.projection.residual)
                });
                if better {
                    best = Some(t);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let best = match (best, last_err) {
        (Some(b), _) => b,
        (None, Some(e)) => return Err(e),
        (None, None) => return Err(Error::FitFailed("no starting point".into())),
    };

    let at_bound = |x: f64, b: f64| (x - b).abs() <= 1e-9 * b.abs().max(1.0);
    if at_bound(best.width, wmin) || at_bound(best.width, wmax) {
        return Err(Error::FitFailed(format!(
            "width at bound ({:.4} MHz)",
            best.width
        )));
    }
    if at_bound(best.theta, options.theta_max) {
        return Err(Error::FitFailed(format!(
            "theta at bound ({:.4} deg)",
            best.theta
        )));
    }

    let contrast: f64 = best.projection.amplitudes.iter().sum();
    if contrast <= 0.0 {
        return Err(Error::ZeroPopulations);
    }
    let populations = best.projection.amplitudes.map(|a| a / contrast);
    let n = best.projection.residual.len() as f64;
    let residual = (best.projection.residual.dot(&best.projection.residual) / n).sqrt();
    Ok(FitResult {
        populations,
        width: best.width,
        theta_fit: round_theta(best.theta),
        theta_raw: best.theta,
        baseline: best.projection.baseline,
        contrast,
        p_exp: polarization_from_populations(&populations)?,
        residual,
        iterations: best.iterations,
        b_field: spectrum.b_field,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SpectrumMeta {
    b_field: f64,
    theta: Option<f64>,
    points: usize,
    frequency_min: f64,
    frequency_max: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpectrumRow {
    frequency_mhz: f64,
    fluorescence: f64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Two-column CSV plus a JSON metadata sidecar next to it.
pub fn write_spectrum(path: &Path, spectrum: &OdmrSpectrum) -> Result<()> {
    spectrum.validate()?;
    let mut w = csv::Writer::from_path(path)?;
    for (&f, &v) in spectrum.frequencies.iter().zip(&spectrum.values) {
        w.serialize(SpectrumRow {
            frequency_mhz: f,
            fluorescence: v,
        })?;
    }
    w.flush()?;
    let meta = SpectrumMeta {
        b_field: spectrum.b_field,
        theta: spectrum.theta,
        points: spectrum.len(),
        frequency_min: spectrum.frequencies[0],
        frequency_max: spectrum.frequencies[spectrum.len() - 1],
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_spectrum(path: &Path) -> Result<OdmrSpectrum> {
    let meta: SpectrumMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let mut frequencies = Vec::new();
    let mut values = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let row: SpectrumRow = row?;
        frequencies.push(row.frequency_mhz);
        values.push(row.fluorescence);
    }
    if frequencies.len() != meta.points {
        return Err(Error::InvalidSpectrum(format!(
            "sidecar declares {} points, file has {}",
            meta.points,
            frequencies.len()
        )));
    }
    OdmrSpectrum::new(frequencies, values, meta.b_field, meta.theta)
}

pub fn write_fit(path: &Path, fit: &FitResult) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(fit)?)?;
    Ok(())
}

pub fn read_fit(path: &Path) -> Result<FitResult> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::build_ground_hamiltonian;
    use crate::lindblad::{polarization_theory, solve_point};
    use crate::RateSet;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn distinct(lines: &[TransitionLine], tol: f64) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for l in lines {
            if !out.iter().any(|f| (f - l.frequency).abs() < tol) {
                out.push(l.frequency);
            }
        }
        out.sort_by(f64::total_cmp);
        out
    }

    fn gslac_spectrum(populations: [f64; 3], width: f64, theta: f64) -> OdmrSpectrum {
        let lines = transition_lines(
            &SystemParams::default().with_field(1024.0, theta),
            Branch::Plus,
        )
        .unwrap();
        let grid = grid_around(&lines, 8.0, 0.05);
        let shape = LineShape {
            width,
            contrast: 0.1,
            baseline: 1.0,
        };
        synthesize_odmr(&lines, &populations, &shape, &grid, 1024.0, None).unwrap()
    }

    #[test]
    fn zero_field_lines_are_split_by_parallel_hyperfine() {
        let p = SystemParams::default();
        let lines = transition_lines(&p, Branch::Plus).unwrap();
        let freqs = distinct(&lines, 0.01);
        assert_eq!(freqs.len(), 3);
        // diagonal evaluation: D + A_par * mI, the quadrupole term cancels
        for (f, mi) in freqs.iter().zip([1.0, 0.0, -1.0]) {
            assert_abs_diff_eq!(*f, p.d_ground + p.a_par_ground * mi, epsilon = 0.02);
        }
        assert_abs_diff_eq!(freqs[1] - freqs[0], 2.16, epsilon = 0.02);
        assert_abs_diff_eq!(freqs[2] - freqs[1], 2.16, epsilon = 0.02);
    }

    #[test]
    fn low_field_lines_have_equal_probability() {
        let p = SystemParams::default().with_field(20.0, 0.0);
        let lines = transition_lines(&p, Branch::Plus).unwrap();
        assert_eq!(lines.len(), 3);
        let zeeman = p.d_ground + p.gamma_e * 20.0;
        for l in &lines {
            assert!(l.probability > 0.999, "{}", l.probability);
            let mi = l.source_label.mi as f64;
            assert_abs_diff_eq!(l.frequency, zeeman + p.a_par_ground * mi, epsilon = 0.05);
            assert_eq!(l.source_label.mi, l.upper_label.mi);
        }
    }

    #[test]
    fn misaligned_gslac_opens_forbidden_lines() {
        let lines = transition_lines(
            &SystemParams::default().with_field(1024.0, 0.3),
            Branch::Plus,
        )
        .unwrap();
        assert!(lines.len() > 3);
        // brute force over the eigenbasis
        let es = eigensystem(
            &build_ground_hamiltonian(&SystemParams::default().with_field(1024.0, 0.3)).unwrap(),
        )
        .unwrap();
        let sx = embed(Some(&spin_matrices(1.0).unwrap().sx), None)
            .unwrap()
            .matrix;
        let mut strengths = Vec::new();
        for f in 0..9 {
            for i in 0..9 {
                if es.labels[f].ms == 1 && es.labels[i].ms != 1 {
                    let mut amp = num_complex::Complex64::new(0.0, 0.0);
                    for a in 0..9 {
                        for b in 0..9 {
                            amp += es.vectors[[a, f]].conj() * sx[[a, b]] * es.vectors[[b, i]];
                        }
                    }
                    strengths.push(amp.norm_sqr());
                }
            }
        }
        let max = strengths.iter().cloned().fold(0.0, f64::max);
        let allowed = strengths
            .iter()
            .filter(|s| **s / max >= PRUNE_THRESHOLD)
            .count();
        assert_eq!(allowed, lines.len());
    }

    #[test]
    fn minus_branch_mirrors_plus_at_low_field() {
        let p = SystemParams::default().with_field(20.0, 0.0);
        let lines = transition_lines(&p, Branch::Minus).unwrap();
        assert_eq!(lines.len(), 3);
        let zeeman = p.d_ground - p.gamma_e * 20.0;
        for l in &lines {
            assert_eq!(l.upper_label.ms, -1);
            assert_abs_diff_eq!(l.frequency, zeeman, epsilon = 3.0);
        }
        assert_eq!("minus".parse::<Branch>().unwrap(), Branch::Minus);
        assert!("sideways".parse::<Branch>().is_err());
    }

    #[test]
    fn full_transition_sum_is_basis_independent() {
        // sum over every eigenpair equals tr(Sx^2) = 6 for any rotation
        let sx = embed(Some(&spin_matrices(1.0).unwrap().sx), None)
            .unwrap()
            .matrix;
        for (b, theta) in [(0.0, 0.0), (512.0, 0.7), (1024.0, 0.3), (1024.0, 5.0)] {
            let es = eigensystem(
                &build_ground_hamiltonian(&SystemParams::default().with_field(b, theta)).unwrap(),
            )
            .unwrap();
            let m = dagger_dot(&es.vectors, &sx);
            let total: f64 = m.iter().map(|z| z.norm_sqr()).sum();
            assert_abs_diff_eq!(total, 6.0, epsilon = 1e-9);
        }
    }

    fn dagger_dot(v: &crate::spin::Mat, op: &crate::spin::Mat) -> crate::spin::Mat {
        crate::spin::dagger(&v.view()).dot(op).dot(v)
    }

    #[test]
    fn zero_contrast_is_flat() {
        let lines =
            transition_lines(&SystemParams::default().with_field(20.0, 0.0), Branch::Plus).unwrap();
        let grid = grid_around(&lines, 5.0, 0.1);
        let shape = LineShape {
            width: 0.5,
            contrast: 0.0,
            baseline: 0.98,
        };
        let s = synthesize_odmr(&lines, &[0.3, 0.3, 0.4], &shape, &grid, 20.0, None).unwrap();
        assert!(s.values.iter().all(|v| *v == 0.98));
    }

    #[test]
    fn single_population_gives_single_dip() {
        let lines =
            transition_lines(&SystemParams::default().with_field(20.0, 0.0), Branch::Plus).unwrap();
        let grid = grid_around(&lines, 5.0, 0.01);
        let shape = LineShape {
            width: 0.5,
            contrast: 0.1,
            baseline: 1.0,
        };
        let s = synthesize_odmr(&lines, &[1.0, 0.0, 0.0], &shape, &grid, 20.0, None).unwrap();
        let (k, v) = s
            .values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let plus = lines.iter().find(|l| l.source_label.mi == 1).unwrap();
        assert_abs_diff_eq!(s.frequencies[k], plus.frequency, epsilon = 0.01);
        assert_abs_diff_eq!(*v, 0.9, epsilon = 1e-3);
        for l in lines.iter().filter(|l| l.source_label.mi != 1) {
            let j = s
                .frequencies
                .iter()
                .position(|f| (f - l.frequency).abs() < 0.006)
                .unwrap();
            assert!(1.0 - s.values[j] < 0.01);
        }
    }

    #[test]
    fn equal_populations_give_equal_dips() {
        let lines =
            transition_lines(&SystemParams::default().with_field(20.0, 0.0), Branch::Plus).unwrap();
        let shape = LineShape {
            width: 0.3,
            contrast: 0.05,
            baseline: 1.0,
        };
        let centers: Vec<f64> = lines.iter().map(|l| l.frequency).collect();
        let s = synthesize_odmr(&lines, &[1.0; 3], &shape, &centers, 20.0, None).unwrap();
        for v in &s.values {
            assert_abs_diff_eq!(*v, s.values[0], epsilon = 1e-3);
        }
    }

    #[test]
    fn synthesis_rejects_bad_input() {
        let shape = LineShape::default();
        assert!(matches!(
            synthesize_odmr(&[], &[1.0, 0.0, 0.0], &shape, &[1.0, 2.0], 0.0, None),
            Err(Error::EmptyLines)
        ));
        let lines = transition_lines(&SystemParams::default(), Branch::Plus).unwrap();
        let bad = LineShape {
            width: 0.0,
            ..shape
        };
        assert!(synthesize_odmr(&lines, &[1.0, 0.0, 0.0], &bad, &[1.0, 2.0], 0.0, None).is_err());
        assert!(
            synthesize_odmr(&lines, &[-1.0, 0.0, 0.0], &shape, &[1.0, 2.0], 0.0, None).is_err()
        );
        assert!(OdmrSpectrum::new(vec![2.0, 1.0], vec![1.0, 1.0], 0.0, None).is_err());
        assert!(OdmrSpectrum::new(vec![1.0, 2.0], vec![1.0, 1.2], 0.0, None).is_err());
        assert!(OdmrSpectrum::new(vec![1.0, 2.0], vec![1.0, 0.0], 0.0, None).is_err());
        assert!(OdmrSpectrum::new(vec![1.0, 2.0], vec![1.0], 0.0, None).is_err());
    }

    #[test]
    fn experimental_polarization_examples() {
        assert_eq!(
            polarization_from_populations(&[1.0, 0.0, 0.0]).unwrap(),
            1.0
        );
        assert_eq!(
            polarization_from_populations(&[1.0, 1.0, 1.0]).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(
            polarization_from_populations(&[0.98, 0.01, 0.01]).unwrap(),
            0.97,
            epsilon = 1e-12
        );
        assert!(matches!(
            polarization_from_populations(&[0.0; 3]),
            Err(Error::ZeroPopulations)
        ));
    }

    #[test]
    fn theta_rounding_has_two_hundredths_granularity() {
        assert_eq!(round_theta(0.213), 0.22);
        assert_eq!(round_theta(0.0), 0.0);
        assert_eq!(round_theta(0.459), 0.46);
    }

    #[test]
    fn noiseless_round_trip_recovers_all_parameters() {
        let truth = [0.9, 0.07, 0.03];
        let spectrum = gslac_spectrum(truth, 0.8, 0.15);
        let fit = fit_odmr(&spectrum, &SystemParams::default(), &FitOptions::default()).unwrap();
        let rel = |got: f64, want: f64| ((got - want) / want).abs();
        for (got, want) in fit.populations.iter().zip(truth) {
            assert!(rel(*got, want) <= 1e-3, "{fit:?}");
        }
        assert!(rel(fit.width, 0.8) <= 1e-3);
        assert!(rel(fit.theta_raw, 0.15) <= 1e-3);
        assert!(rel(fit.contrast, 0.1) <= 1e-3);
        assert!(rel(fit.baseline, 1.0) <= 1e-3);
        assert!((fit.theta_fit - 0.15).abs() <= THETA_RESOLUTION);
        assert_abs_diff_eq!(
            fit.p_exp,
            polarization_experimental(&fit).unwrap(),
            epsilon = 1e-15
        );
        assert!(fit.residual < 1e-8);
    }

    #[test]
    fn noisy_round_trip_recovers_populations_and_angle() {
        // white noise of 0.5 % of the baseline on a 0.02 MHz grid
        let truth = [0.9, 0.07, 0.03];
        let lines = transition_lines(
            &SystemParams::default().with_field(1024.0, 0.15),
            Branch::Plus,
        )
        .unwrap();
        let grid = grid_around(&lines, 8.0, 0.02);
        let shape = LineShape {
            width: 0.8,
            contrast: 0.1,
            baseline: 1.0,
        };
        let clean = synthesize_odmr(&lines, &truth, &shape, &grid, 1024.0, None).unwrap();
        let noise = Normal::new(0.0, 0.005).unwrap();
        for seed in 0..5 {
            let mut spectrum = clean.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in &mut spectrum.values {
                *v += noise.sample(&mut rng);
            }
            let fit =
                fit_odmr(&spectrum, &SystemParams::default(), &FitOptions::default()).unwrap();
            for (got, want) in fit.populations.iter().zip(truth) {
                assert!((got - want).abs() <= 0.03, "seed {seed}: {fit:?}");
            }
            assert!((fit.theta_fit - 0.15).abs() <= 0.02, "seed {seed}: {fit:?}");
            assert!(fit.populations.iter().all(|p| *p >= 0.0));
            assert!(fit.width > 0.0);
        }
    }

    #[test]
    fn fit_excludes_windows() {
        let spectrum = gslac_spectrum([0.5, 0.3, 0.2], 0.8, 0.0);
        let lo = spectrum.frequencies[0];
        let opts = FitOptions {
            exclude: vec![(lo - 1.0, lo + 2.0)],
            ..FitOptions::default()
        };
        let fit = fit_odmr(&spectrum, &SystemParams::default(), &opts).unwrap();
        assert_abs_diff_eq!(fit.populations[0], 0.5, epsilon = 1e-6);
        let all = FitOptions {
            exclude: vec![(0.0, 1e5)],
            ..FitOptions::default()
        };
        assert!(fit_odmr(&spectrum, &SystemParams::default(), &all).is_err());
    }

    #[test]
    fn fit_reports_width_at_bound() {
        let p = SystemParams::default().with_field(20.0, 0.0);
        let lines = transition_lines(&p, Branch::Plus).unwrap();
        let f0 = lines[0].frequency;
        let grid = uniform_grid(f0 - 0.5, f0 + 0.5, 200);
        let spectrum = synthesize_odmr(
            &lines,
            &[1.0, 0.0, 0.0],
            &LineShape::default(),
            &grid,
            20.0,
            None,
        )
        .unwrap();
        let narrow = FitOptions {
            width_bounds: (1e-3, 1e-2),
            ..FitOptions::default()
        };
        let err = fit_odmr(&spectrum, &p, &narrow).unwrap_err();
        assert!(err.to_string().contains("width at bound"), "{err}");
    }

    #[test]
    fn eslac_spectrum_reads_back_high_polarization() {
        let params = SystemParams::default().with_field(512.0, 0.2);
        let rho = solve_point(&params, &RateSet::default()).unwrap().rho;
        let p_th = polarization_theory(&rho).unwrap();
        let populations = rho.ground_ms0_populations();
        let lines = transition_lines(&params, Branch::Plus).unwrap();
        let grid = grid_around(&lines, 6.0, 0.05);
        let shape = LineShape {
            width: 1.0,
            contrast: 0.05,
            baseline: 1.0,
        };
        let s = synthesize_odmr(&lines, &populations, &shape, &grid, 512.0, Some(0.2)).unwrap();
        let fit = fit_odmr(&s, &params, &FitOptions::default()).unwrap();
        assert!(fit.p_exp >= 0.9, "{}", fit.p_exp);
        assert_abs_diff_eq!(fit.p_exp, p_th, epsilon = 0.02);
    }

    #[test]
    fn spectrum_and_fit_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spectrum = gslac_spectrum([0.6, 0.3, 0.1], 1.0, 0.2);
        let path = dir.path().join("b1024.csv");
        write_spectrum(&path, &spectrum).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = read_spectrum(&path).unwrap();
        assert_eq!(back, spectrum);

        let fit = fit_odmr(&back, &SystemParams::default(), &FitOptions::default()).unwrap();
        let fpath = dir.path().join("fit.json");
        write_fit(&fpath, &fit).unwrap();
        assert_eq!(read_fit(&fpath).unwrap(), fit);

        std::fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(read_spectrum(&path).is_err());
    }

    #[test]
    fn clusters_split_on_gaps() {
        let lines =
            transition_lines(&SystemParams::default().with_field(20.0, 0.0), Branch::Plus).unwrap();
        assert_eq!(line_clusters(&lines, 3.0).len(), 1);
        assert_eq!(line_clusters(&lines, 1.0).len(), 3);
        assert!(line_clusters(&[], 1.0).is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn lines_are_well_formed(b in 0.0..1500.0f64, theta in 0.0..2.0f64) {
            let lines = transition_lines(&SystemParams::default().with_field(b, theta), Branch::Plus).unwrap();
            prop_assert!(!lines.is_empty());
            for l in &lines {
                prop_assert!(l.frequency > 0.0);
                prop_assert!((PRUNE_THRESHOLD..=1.0).contains(&l.probability));
            }
            prop_assert!(lines.iter().any(|l| l.probability == 1.0));
        }

        #[test]
        fn three_lines_far_from_gslac(b in prop_oneof![1.0..920.0f64, 1120.0..2000.0f64]) {
            let lines = transition_lines(&SystemParams::default().with_field(b, 0.0), Branch::Plus).unwrap();
            prop_assert_eq!(lines.len(), 3);
        }

        #[test]
        fn branch_strength_sum_is_stable_for_small_angles(b in 0.0..1100.0f64, theta in 0.0..0.1f64) {
            let sum = |t: f64| -> f64 {
                raw_transition_lines(&SystemParams::default().with_field(b, t), Branch::Plus)
                    .unwrap().iter().map(|l| l.strength).sum()
            };
            prop_assert!((sum(theta) - sum(0.0)).abs() <= 1e-6);
        }

        #[test]
        fn synthesized_values_stay_in_range(
            n in prop::array::uniform3(0.0..1.0f64),
            width in 0.2..3.0f64,
            contrast in 0.0..0.3f64,
        ) {
            let lines = transition_lines(&SystemParams::default().with_field(1024.0, 0.2), Branch::Plus).unwrap();
            let grid = grid_around(&lines, 5.0, 0.25);
            let s = synthesize_odmr(&lines, &n, &LineShape { width, contrast, baseline: 1.0 }, &grid, 1024.0, None);
            // depth can exceed the baseline when many lines overlap
            let depth: f64 = lines.iter().map(|l| l.probability).sum::<f64>() * contrast;
            if depth < 0.99 {
                let s = s.unwrap();
                prop_assert!(s.values.iter().all(|v| *v > 0.0 && *v <= 1.0));
            }
        }
    }
}
