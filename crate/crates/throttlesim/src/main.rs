//! Command-line front end: `calibrate` fits the model to a measured-target
//! table, `run <experiment>` executes one experiment and writes its CSV
//! tables and JSON summary, and `report` digests previously written
//! summaries. Exit codes: 0 on success, 2 for configuration problems,
//! 3 for calibration failures.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use throttlesim::error::{SimError, SimResult};
use throttlesim::harness::calibrate::{calibrate_model, read_targets, CalibratedParams};
use throttlesim::harness::config::MachineConfig;
use throttlesim::harness::experiments::{run_experiment, EXPERIMENT_IDS};
use throttlesim::harness::report::{
    emit_report, f6, read_summaries, ExperimentReport, OutputFormat, Table,
};

/// Print a status line, exiting quietly if the reader closed the pipe
/// (`report | head` must not look like a crash); artifacts are already on
/// disk by the time anything is printed.
macro_rules! say {
    ($($t:tt)*) => {{
        if writeln!(std::io::stdout(), $($t)*).is_err() {
            std::process::exit(0);
        }
    }};
}

#[derive(Parser)]
#[command(
    name = "throttlesim",
    version,
    about = "Deterministic simulator of current-management side effects and the timing channels they enable"
)]
struct Cli {
    /// TOML machine config; defaults to the built-in mobile reference.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for tables and summaries.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Write only CSV tables or only the JSON summary (default: both).
    #[arg(long, global = true, value_parser = ["csv", "summary"])]
    format: Option<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit capacitance weights and slew to a measured throttling-period
    /// table, check monotonicity, and cross-check against the simulator.
    Calibrate {
        /// Target CSV with columns: class, freq_ghz, cores, tp_us.
        #[arg(long, default_value = "targets/default_tp_targets.csv")]
        targets: PathBuf,
    },
    /// Run one experiment and emit its report.
    Run {
        /// One of the known experiment ids (see `run --help`).
        #[arg(value_parser = EXPERIMENT_IDS)]
        experiment: String,
    },
    /// Print a digest of every summary already in the output directory.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> SimResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => MachineConfig::load(path)?,
        None => MachineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let format = match cli.format.as_deref() {
        None => None,
        Some(s) => Some(OutputFormat::parse(s).ok_or_else(|| {
            SimError::Config(format!("unknown format {s:?}; use csv or summary"))
        })?),
    };

    match cli.cmd {
        Cmd::Calibrate { targets } => {
            let rows = read_targets(&targets)?;
            let params = calibrate_model(&cfg, &rows)?;
            let report = calibration_report(&cfg, &params);
            let written = emit_report(&report, &cli.out_dir, format)?;
            say!(
                "calibration ok: slew {} mV/us, full ramp {} us, max residual {}",
                f6(params.slew_mbvr_mv_per_us),
                f6(params.full_ramp_mbvr_us),
                f6(params.max_rel_residual)
            );
            for p in written {
                say!("wrote {}", p.display());
            }
        }
        Cmd::Run { experiment } => {
            let report = run_experiment(&cfg, &experiment)?;
            let written = emit_report(&report, &cli.out_dir, format)?;
            say!(
                "{}: {} tables, {} summary keys",
                report.experiment,
                report.tables.len(),
                report.summary.len()
            );
            for p in written {
                say!("wrote {}", p.display());
            }
        }
        Cmd::Report => {
            let summaries = read_summaries(&cli.out_dir)?;
            if summaries.is_empty() {
                say!("no summaries under {}", cli.out_dir.display());
            }
            for s in summaries {
                say!(
                    "== {} (config {}, seed {})",
                    s.experiment,
                    &s.config_hash[..s.config_hash.len().min(12)],
                    s.seed
                );
                for (k, v) in &s.summary {
                    say!("  {k}: {v}");
                }
            }
        }
    }
    Ok(())
}

fn calibration_report(cfg: &MachineConfig, params: &CalibratedParams) -> ExperimentReport {
    let mut report = ExperimentReport::new("calibration", &cfg.config_hash(), cfg.seed);

    let mut fit = Table::new(
        "fit",
        &["class", "freq_mhz", "cores", "target_us", "fitted_us", "abs_err_us", "rel_err"],
    );
    for r in &params.fit {
        fit.push_row(vec![
            r.class.name().to_string(),
            r.freq_mhz.to_string(),
            r.cores.to_string(),
            f6(r.target_us),
            f6(r.fitted_us),
            f6(r.abs_err_us),
            f6(r.rel_err),
        ]);
    }
    report.add_table(fit);

    let mut oracle = Table::new(
        "oracle",
        &["class", "freq_mhz", "cores", "sim_ns", "analytic_ns", "transitions", "abs_err_ns", "ok"],
    );
    for o in &params.oracle {
        oracle.push_row(vec![
            o.class.name().to_string(),
            o.freq_mhz.to_string(),
            o.cores.to_string(),
            o.sim_ns.to_string(),
            o.analytic_ns.to_string(),
            o.transitions.to_string(),
            o.abs_err_ns.to_string(),
            o.ok.to_string(),
        ]);
    }
    report.add_table(oracle);

    use throttlesim::core::InstructionClass;
    for &class in &InstructionClass::ALL {
        report.set(
            &format!("cdyn_{}", class.name()),
            params.cdyn[class.level()],
        );
    }
    report.set("slew_mbvr_mv_per_us", params.slew_mbvr_mv_per_us);
    report.set("slew_ivr_mv_per_us", params.slew_ivr_mv_per_us);
    report.set("slew_ldo_mv_per_us", params.slew_ldo_mv_per_us);
    report.set("full_ramp_mbvr_us", params.full_ramp_mbvr_us);
    report.set("full_ramp_ivr_us", params.full_ramp_ivr_us);
    report.set("full_ramp_ldo_us", params.full_ramp_ldo_us);
    report.set("max_rel_residual", params.max_rel_residual);
    report.set("oracle_ok", params.oracle_ok);
    let max_oracle = params.oracle.iter().map(|o| o.abs_err_ns).max().unwrap_or(0);
    report.set("max_oracle_err_ns", max_oracle);
    let anchor = |cores: usize| {
        params
            .fit
            .iter()
            .find(|r| {
                r.class == throttlesim::core::InstructionClass::L256bHeavy
                    && r.freq_mhz == 1000
                    && r.cores == cores
            })
            .map(|r| r.fitted_us)
    };
    if let Some(us) = anchor(1) {
        report.set("tp_256b_heavy_1000mhz_1core_us", us);
    }
    if let Some(us) = anchor(2) {
        report.set("tp_256b_heavy_1000mhz_2core_us", us);
    }
    report
}
