//! Model calibration: fit the per-class capacitance weights and the
//! motherboard-regulator slew rate to a table of measured throttling
//! periods, then cross-check the fitted model against the event simulator
//! with an analytic serialized-transition oracle.
//!
//! The measurement model is linear: a first request from baseline raises
//! the domain target by `Δcdyn × Vbase(f) × f × R_ll × k` millivolts, and
//! the throttling period is that step divided by the slew rate. A second
//! core running the same class queues an equal step behind the first, so
//! its own period is both steps back to back minus its start stagger.
//! Every target row therefore constrains only the ratio `Δcdyn / slew`;
//! the fit is underdetermined by one overall scale (doubling all weight
//! steps and the slew changes nothing), so the configured 256-bit-heavy
//! weight is kept as the scale anchor and everything else is fitted.

use std::path::Path;

use crate::core::InstructionClass;
use crate::error::{SimError, SimResult};
use crate::harness::config::MachineConfig;
use crate::machine::{Machine, ProgramSet};
use crate::pdn::transition_ns;
use crate::core::Phase;

/// One measured throttling-period target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetRow {
    pub class: InstructionClass,
    pub freq_mhz: u32,
    pub cores: usize,
    pub tp_us: f64,
}

/// Per-row fit quality.
#[derive(Clone, Debug)]
pub struct FitRow {
    pub class: InstructionClass,
    pub freq_mhz: u32,
    pub cores: usize,
    pub target_us: f64,
    pub fitted_us: f64,
    pub abs_err_us: f64,
    pub rel_err: f64,
}

/// One oracle comparison: simulated throttle episode vs. the analytic sum
/// of queued transition times.
#[derive(Clone, Debug)]
pub struct OracleRow {
    pub class: InstructionClass,
    pub freq_mhz: u32,
    pub cores: usize,
    pub sim_ns: u64,
    pub analytic_ns: u64,
    pub transitions: u64,
    pub abs_err_ns: u64,
    pub ok: bool,
}

/// Everything `calibrate` produces.
#[derive(Clone, Debug)]
pub struct CalibratedParams {
    /// Fitted dynamic-capacitance weights, indexed by class level.
    pub cdyn: [f64; 7],
    pub slew_mbvr_mv_per_us: f64,
    pub slew_ivr_mv_per_us: f64,
    pub slew_ldo_mv_per_us: f64,
    /// Scalar→widest-class full-ramp time at the top channel frequency.
    pub full_ramp_mbvr_us: f64,
    pub full_ramp_ivr_us: f64,
    pub full_ramp_ldo_us: f64,
    pub fit: Vec<FitRow>,
    pub max_rel_residual: f64,
    pub oracle: Vec<OracleRow>,
    pub oracle_ok: bool,
}

impl CalibratedParams {
    /// Write the fitted weights and slews back into a config.
    pub fn apply(&self, cfg: &mut MachineConfig) {
        cfg.set_cdyn_table(self.cdyn);
        cfg.slew_mbvr_mv_per_us = self.slew_mbvr_mv_per_us;
        cfg.slew_ivr_mv_per_us = self.slew_ivr_mv_per_us;
        cfg.slew_ldo_mv_per_us = self.slew_ldo_mv_per_us;
    }
}

/// Millivolts of domain guardband per unit of capacitance-weight delta at
/// a given frequency.
pub fn b_factor(cfg: &MachineConfig, freq_mhz: u32) -> f64 {
    let f_ghz = freq_mhz as f64 / 1000.0;
    cfg.vcc_baseline_mv(freq_mhz) * f_ghz * cfg.r_ll_mohm * cfg.k_icc
}

/// Wall-clock stagger between consecutive core starts, in integer ns.
pub fn stagger_ns(cfg: &MachineConfig, freq_mhz: u32) -> u64 {
    cfg.stagger_cycles * 1000 / freq_mhz as u64
}

/// Closed-form throttling period of the last-started of `cores` identical
/// cores: `cores` equal serialized transitions minus the start stagger.
pub fn analytic_tp_ns(
    cfg: &MachineConfig,
    delta_cdyn: f64,
    freq_mhz: u32,
    cores: usize,
    slew_mv_per_us: f64,
) -> u64 {
    let gb_mv = delta_cdyn * b_factor(cfg, freq_mhz);
    let single = transition_ns(gb_mv, slew_mv_per_us);
    (single * cores as u64).saturating_sub((cores as u64 - 1) * stagger_ns(cfg, freq_mhz))
}

/// Generate the exact target table the current config would measure.
/// This is what the shipped default target file is derived from.
pub fn synthetic_targets(cfg: &MachineConfig) -> Vec<TargetRow> {
    let table = cfg.cdyn_table();
    let scalar = table[0];
    let mut rows = Vec::new();
    for &class in &InstructionClass::ALL {
        for &freq in &cfg.char_freqs_mhz {
            for cores in [1usize, 2] {
                let tp_ns = analytic_tp_ns(
                    cfg,
                    table[class.level()] - scalar,
                    freq,
                    cores,
                    cfg.slew_mbvr_mv_per_us,
                );
                rows.push(TargetRow {
                    class,
                    freq_mhz: freq,
                    cores,
                    tp_us: tp_ns as f64 / 1000.0,
                });
            }
        }
    }
    rows
}

/// Read a target table from CSV with columns `class, freq_ghz, cores, tp_us`.
pub fn read_targets(path: &Path) -> SimResult<Vec<TargetRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| SimError::Config(format!("cannot read targets {}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| SimError::Config(format!("bad targets header: {e}")))?
        .clone();
    let col = |name: &str| -> SimResult<usize> {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                SimError::Config(format!(
                    "targets file {} is missing column {name}",
                    path.display()
                ))
            })
    };
    let (ci, fi, ni, ti) = (col("class")?, col("freq_ghz")?, col("cores")?, col("tp_us")?);
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| SimError::Config(format!("bad targets row {}: {e}", line + 2)))?;
        let field = |i: usize| -> SimResult<&str> {
            rec.get(i)
                .ok_or_else(|| SimError::Config(format!("short targets row {}", line + 2)))
        };
        let class = InstructionClass::parse(field(ci)?).ok_or_else(|| {
            SimError::Config(format!(
                "unknown class {:?} in targets row {}",
                rec.get(ci).unwrap_or(""),
                line + 2
            ))
        })?;
        let freq_ghz: f64 = field(fi)?
            .parse()
            .map_err(|e| SimError::Config(format!("bad freq_ghz in row {}: {e}", line + 2)))?;
        let cores: usize = field(ni)?
            .parse()
            .map_err(|e| SimError::Config(format!("bad cores in row {}: {e}", line + 2)))?;
        let tp_us: f64 = field(ti)?
            .parse()
            .map_err(|e| SimError::Config(format!("bad tp_us in row {}: {e}", line + 2)))?;
        if cores == 0 || cores > 2 {
            return Err(SimError::Config(format!(
                "targets row {}: cores must be 1 or 2",
                line + 2
            )));
        }
        rows.push(TargetRow {
            class,
            freq_mhz: (freq_ghz * 1000.0).round() as u32,
            cores,
            tp_us,
        });
    }
    Ok(rows)
}

fn check_coverage(cfg: &MachineConfig, rows: &[TargetRow]) -> SimResult<()> {
    for &class in &InstructionClass::ALL {
        for &freq in &cfg.char_freqs_mhz {
            if !rows
                .iter()
                .any(|r| r.class == class && r.freq_mhz == freq && r.cores == 1)
            {
                return Err(SimError::Config(format!(
                    "targets are missing a 1-core row for {} at {freq} MHz",
                    class.name()
                )));
            }
        }
    }
    if !rows.iter().any(|r| r.cores == 2) {
        return Err(SimError::Config(
            "targets need at least one 2-core exacerbation row".into(),
        ));
    }
    Ok(())
}

/// Fit weights and slew to the targets, validate monotonicity, and run the
/// simulator oracle over every throttling row.
pub fn calibrate_model(cfg: &MachineConfig, rows: &[TargetRow]) -> SimResult<CalibratedParams> {
    check_coverage(cfg, rows)?;

    // Scalar rows carry no constraint (zero weight delta); they must be zero.
    for r in rows.iter().filter(|r| r.class.level() == 0) {
        if r.tp_us.abs() > 1e-9 {
            return Err(SimError::Calibration(format!(
                "scalar target at {} MHz reports a nonzero throttling period",
                r.freq_mhz
            )));
        }
    }

    // Per-class least squares on x_c = Δcdyn_c / slew:
    //   1-core row:  tp = x · B(f)·1000
    //   2-core row:  tp + stagger = x · 2·B(f)·1000
    let mut x = [0.0f64; 7];
    for &class in InstructionClass::ALL.iter().skip(1) {
        let mut num = 0.0;
        let mut den = 0.0;
        for r in rows.iter().filter(|r| r.class == class) {
            let a = r.cores as f64 * b_factor(cfg, r.freq_mhz) * 1000.0;
            let t = r.tp_us * 1000.0
                + (r.cores as f64 - 1.0) * stagger_ns(cfg, r.freq_mhz) as f64;
            num += a * t;
            den += a * a;
        }
        if den == 0.0 {
            return Err(SimError::Config(format!(
                "no usable targets for class {}",
                class.name()
            )));
        }
        x[class.level()] = num / den;
        if x[class.level()] <= 0.0 {
            return Err(SimError::Calibration(format!(
                "fitted ramp for class {} is not positive",
                class.name()
            )));
        }
    }

    // Gauge: keep the configured 256b-heavy weight step, solve the slew.
    let table_cfg = cfg.cdyn_table();
    let anchor = InstructionClass::L256bHeavy.level();
    let anchor_delta = table_cfg[anchor] - table_cfg[0];
    let slew_mbvr = anchor_delta / x[anchor];

    let mut cdyn = [0.0f64; 7];
    cdyn[0] = table_cfg[0];
    for &class in InstructionClass::ALL.iter().skip(1) {
        cdyn[class.level()] = cdyn[0] + x[class.level()] * slew_mbvr;
    }
    for w in cdyn.windows(2) {
        if w[1] <= w[0] + 1e-9 {
            return Err(SimError::Calibration(format!(
                "fitted weights are not strictly increasing ({:.6} then {:.6})",
                w[0], w[1]
            )));
        }
    }

    // Derived slews: the integrated regulator is pinned to a 9 µs full
    // ramp at the top channel frequency; the per-core LDO keeps its
    // configured rate but must complete any ramp in under half a µs.
    let top_freq = cfg.char_freqs_mhz.iter().copied().max().unwrap_or(cfg.freq_mhz);
    let full_mv = (cdyn[6] - cdyn[0]) * b_factor(cfg, top_freq);
    let slew_ivr = full_mv / 9.0;
    let slew_ldo = cfg.slew_ldo_mv_per_us;
    let full_ramp_mbvr_us = transition_ns(full_mv, slew_mbvr) as f64 / 1000.0;
    let full_ramp_ivr_us = transition_ns(full_mv, slew_ivr) as f64 / 1000.0;
    let full_ramp_ldo_us = transition_ns(full_mv, slew_ldo) as f64 / 1000.0;
    if full_ramp_ldo_us >= 0.5 {
        return Err(SimError::Calibration(format!(
            "per-core LDO full ramp takes {full_ramp_ldo_us:.3} µs; it must stay under 0.5 µs"
        )));
    }

    // Residuals of the fitted closed form against every target row.
    let mut fit = Vec::with_capacity(rows.len());
    let mut max_rel = 0.0f64;
    for r in rows {
        let fitted_ns = analytic_tp_ns(
            cfg,
            cdyn[r.class.level()] - cdyn[0],
            r.freq_mhz,
            r.cores,
            slew_mbvr,
        );
        let fitted_us = fitted_ns as f64 / 1000.0;
        let abs_err = (fitted_us - r.tp_us).abs();
        let rel = if r.tp_us > 0.0 { abs_err / r.tp_us } else { 0.0 };
        max_rel = max_rel.max(rel);
        fit.push(FitRow {
            class: r.class,
            freq_mhz: r.freq_mhz,
            cores: r.cores,
            target_us: r.tp_us,
            fitted_us,
            abs_err_us: abs_err,
            rel_err: rel,
        });
    }

    let mut params = CalibratedParams {
        cdyn,
        slew_mbvr_mv_per_us: slew_mbvr,
        slew_ivr_mv_per_us: slew_ivr,
        slew_ldo_mv_per_us: slew_ldo,
        full_ramp_mbvr_us,
        full_ramp_ivr_us,
        full_ramp_ldo_us,
        fit,
        max_rel_residual: max_rel,
        oracle: Vec::new(),
        oracle_ok: true,
    };
    params.oracle = run_oracle(cfg, &params, rows)?;
    params.oracle_ok = params.oracle.iter().all(|o| o.ok);
    if !params.oracle_ok {
        return Err(SimError::Calibration(
            "simulated throttling periods disagree with the serialized-transition oracle".into(),
        ));
    }
    Ok(params)
}

/// Simulate every throttling target row with the fitted model and compare
/// the last-started core's throttle episode against the analytic value,
/// within one nanosecond tick per serialized transition.
pub fn run_oracle(
    cfg: &MachineConfig,
    params: &CalibratedParams,
    rows: &[TargetRow],
) -> SimResult<Vec<OracleRow>> {
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.class.level() > 0) {
        let mut c = cfg.clone();
        params.apply(&mut c);
        c.freq_mhz = r.freq_mhz;
        c.cores = c.cores.max(r.cores).max(2);
        c.validate()?;

        let delta = params.cdyn[r.class.level()] - params.cdyn[0];
        let analytic = analytic_tp_ns(&c, delta, r.freq_mhz, r.cores, params.slew_mbvr_mv_per_us);
        let ramp_cycles = analytic * r.freq_mhz as u64 / 1000 + 4;
        let iters = c.char_probe_iters.max(ramp_cycles / 4 + 512);

        let mut ps = ProgramSet::empty(c.cores);
        for k in 0..r.cores {
            ps.set(
                k,
                0,
                vec![
                    Phase::WaitCycles(k as u64 * c.stagger_cycles),
                    Phase::MeasureTp {
                        class: r.class,
                        iters,
                    },
                ],
            );
        }
        let mut m = Machine::new(&c, ps)?;
        let budget = (r.cores as u64 * c.stagger_cycles + ramp_cycles + iters * 4) * 2 + 200_000;
        m.run_to_completion(budget)?;

        let probe_core = r.cores - 1;
        let episode = m
            .episodes_for(probe_core)
            .last()
            .cloned()
            .ok_or_else(|| {
                SimError::Model(format!(
                    "oracle run for {} at {} MHz produced no throttle episode",
                    r.class.name(),
                    r.freq_mhz
                ))
            })?;
        let sim_ns = episode.duration_ns().ok_or_else(|| {
            SimError::Model("oracle throttle episode never ended".into())
        })?;
        let transitions = r.cores as u64;
        let abs_err = sim_ns.abs_diff(analytic);
        out.push(OracleRow {
            class: r.class,
            freq_mhz: r.freq_mhz,
            cores: r.cores,
            sim_ns,
            analytic_ns: analytic,
            transitions,
            abs_err_ns: abs_err,
            ok: abs_err <= transitions,
        });
    }
    Ok(out)
}
