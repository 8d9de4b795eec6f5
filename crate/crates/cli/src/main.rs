use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nv_dnp::hamiltonian::{default_search_range, find_anticrossing};
use nv_dnp::odmr::{transition_lines, Branch, FitOptions};
use nv_dnp::sweep::{
    fit_batch, parse_config, resolve_workers, run_sweep, write_fit_summary, FIT_SUMMARY_FILE,
};
use nv_dnp::{Error, Manifold, SystemParams};

#[derive(Parser)]
#[command(
    name = "nvdnp",
    version,
    about = "NV-center 14N polarization sweeps and ODMR fits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a TOML config.
    Sweep { config: PathBuf },
    /// Fit every spectrum (CSV + JSON sidecar) in a directory.
    Fit {
        dir: PathBuf,
        /// TOML file of system parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        /// TOML file of fit options.
        #[arg(long)]
        options: Option<PathBuf>,
    },
    /// Print the allowed microwave lines of the ground manifold.
    Lines {
        /// Field, G.
        #[arg(long = "b", allow_negative_numbers = true)]
        b: f64,
        /// Misalignment, degrees.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        theta: f64,
        #[arg(long, default_value = "plus")]
        branch: Branch,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Locate the mS = 0 / -1 level anticrossing.
    Anticross {
        #[arg(long)]
        manifold: Manifold,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        theta: f64,
        /// Search window start, G.
        #[arg(long)]
        start: Option<f64>,
        /// Search window end, G.
        #[arg(long)]
        stop: Option<f64>,
        #[arg(long)]
        params: Option<PathBuf>,
    },
}

fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> nv_dnp::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn run(cli: Cli, out: &mut impl Write) -> nv_dnp::Result<()> {
    match cli.command {
        Command::Sweep { config } => {
            let config = parse_config(&config)?;
            let report = run_sweep(&config)?;
            let failed = report.metadata.failed;
            writeln!(
                out,
                "{} points, {} failed -> {}",
                report.rows.len(),
                failed,
                report.output_dir.display()
            )?;
            writeln!(out, "fingerprint {}", report.metadata.fingerprint)?;
        }
        Command::Fit {
            dir,
            params,
            options,
        } => {
            if !dir.is_dir() {
                return Err(Error::Config {
                    path: dir,
                    reason: "not a directory".into(),
                });
            }
            let params: SystemParams = load_toml(params.as_deref())?;
            params.validate()?;
            let options: FitOptions = load_toml(options.as_deref())?;
            let workers = resolve_workers(None);
            let entries = fit_batch(&dir, &params, &options, workers)?;
            write_fit_summary(&dir.join(FIT_SUMMARY_FILE), &entries)?;
            writeln!(
                out,
                "{:<24} {:>9} {:>8} {:>8} {:>8} {:>10}",
                "file", "B", "P_exp", "theta", "width", "residual"
            )?;
            for e in &entries {
                let name = e.file.file_name().and_then(|n| n.to_str()).unwrap_or("?");
                match &e.fit {
                    Ok(f) => writeln!(
                        out,
                        "{name:<24} {:>9.2} {:>8.4} {:>8.2} {:>8.4} {:>10.3e}",
                        f.b_field, f.p_exp, f.theta_fit, f.width, f.residual
                    )?,
                    Err(reason) => writeln!(out, "{name:<24} skipped: {reason}")?,
                }
            }
            if entries.is_empty() {
                eprintln!("warning: no spectra in {}", dir.display());
            }
        }
        Command::Lines {
            b,
            theta,
            branch,
            params,
            json,
        } => {
            let params: SystemParams = load_toml(params.as_deref())?;
            let params = params.with_field(b, theta);
            let lines = transition_lines(&params, branch)?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&lines)?)?;
            } else {
                writeln!(
                    out,
                    "{:>14} {:>12}  {:>8}  {:>8}",
                    "freq (MHz)", "probability", "lower", "upper"
                )?;
                for l in &lines {
                    writeln!(
                        out,
                        "{:>14.4} {:>12.6}  ({:+},{:+})  ({:+},{:+})",
                        l.frequency,
                        l.probability,
                        l.source_label.ms,
                        l.source_label.mi,
                        l.upper_label.ms,
                        l.upper_label.mi
                    )?;
                }
            }
        }
        Command::Anticross {
            manifold,
            theta,
            start,
            stop,
            params,
        } => {
            let base: SystemParams = load_toml(params.as_deref())?;
            let mut base = base;
            base.theta = theta;
            base.validate()?;
            let (lo, hi) = default_search_range(manifold);
            let field =
                find_anticrossing(manifold, &base, (start.unwrap_or(lo), stop.unwrap_or(hi)))?;
            writeln!(out, "{field:.2}")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out).and_then(|()| out.flush().map_err(Error::from)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}
