//! Power-management-unit policy: guardbanded voltage targets for the core
//! domain, the frequency ladder that keeps the package inside its electrical
//! limits, and the per-core grant/demand bookkeeping used for hysteresis.
//!
//! The PMU never trusts instantaneous measurements it does not have: targets
//! and admission checks are computed from the activity weights the cores are
//! *licensed* for, evaluated at the voltage the regulator is being asked to
//! provide.

use crate::core::NUM_CLASSES;
use crate::error::{SimError, SimResult};
use crate::harness::config::MachineConfig;
use crate::pdn;

/// Baseline-relative guardband one core adds to the domain voltage when it
/// is licensed for weight ladder position `level` at `f_mhz`.
pub fn core_guardband_mv(cfg: &MachineConfig, cdyn: &[f64], level: usize, f_mhz: u32) -> f64 {
    let f_ghz = f_mhz as f64 / 1000.0;
    let base = cfg.vcc_baseline_mv(f_mhz);
    pdn::guardband_delta(cdyn[0], cdyn[level], base, f_ghz, cfg.r_ll_mohm, cfg.k_icc)
}

/// Domain supply target: the scalar baseline for `f_mhz` plus one guardband
/// contribution per *active* core (idle cores draw nothing and need none).
pub fn domain_target_mv(
    cfg: &MachineConfig,
    cdyn: &[f64],
    levels: &[usize],
    active: &[bool],
    f_mhz: u32,
) -> f64 {
    let mut v = cfg.vcc_baseline_mv(f_mhz);
    for (k, &lvl) in levels.iter().enumerate() {
        if active[k] {
            v += core_guardband_mv(cfg, cdyn, lvl, f_mhz);
        }
    }
    v
}

/// Supply target for one core behind a private regulator.
pub fn per_core_target_mv(cfg: &MachineConfig, cdyn: &[f64], level: usize, f_mhz: u32) -> f64 {
    cfg.vcc_baseline_mv(f_mhz) + core_guardband_mv(cfg, cdyn, level, f_mhz)
}

/// Package current if every active core ran at its licensed weight with the
/// supply at `vcc_mv`. Leakage is a single domain-wide term.
pub fn icc_estimate(
    cfg: &MachineConfig,
    cdyn: &[f64],
    levels: &[usize],
    active: &[bool],
    vcc_mv: f64,
    f_mhz: u32,
) -> f64 {
    let f_ghz = f_mhz as f64 / 1000.0;
    let mut icc = cfg.icc_lkg_a;
    for (k, &lvl) in levels.iter().enumerate() {
        if active[k] {
            icc += pdn::icc_dynamic(cdyn[lvl], vcc_mv, f_ghz, cfg.k_icc);
        }
    }
    icc
}

const LIMIT_EPS: f64 = 1e-9;

/// Walk the frequency ladder down from `preferred_mhz` until both electrical
/// limits hold for the requested weight levels, returning the admitted
/// frequency and the domain voltage target at that frequency.
///
/// Fails if even the floor frequency cannot satisfy the limits, or if the
/// admitted target would sit below the domain's minimum operating voltage.
pub fn enforce_limits(
    cfg: &MachineConfig,
    cdyn: &[f64],
    levels: &[usize],
    active: &[bool],
    preferred_mhz: u32,
) -> SimResult<(u32, f64)> {
    let mut f = preferred_mhz;
    loop {
        let v = domain_target_mv(cfg, cdyn, levels, active, f);
        let i = icc_estimate(cfg, cdyn, levels, active, v, f);
        if v <= cfg.vcc_max_mv + LIMIT_EPS && i <= cfg.icc_max_a + LIMIT_EPS {
            if v < cfg.vcc_min_mv - LIMIT_EPS {
                return Err(SimError::Config(format!(
                    "admitted target {v:.3} mV at {f} MHz is below vcc_min \
                     {:.3} mV",
                    cfg.vcc_min_mv
                )));
            }
            return Ok((f, v));
        }
        if f <= cfg.freq_min_mhz {
            return Err(SimError::Config(format!(
                "no admissible frequency: at the {f} MHz floor the request \
                 needs {v:.3} mV / {i:.3} A against limits {:.3} mV / {:.3} A",
                cfg.vcc_max_mv, cfg.icc_max_a
            )));
        }
        f = f.saturating_sub(cfg.freq_step_mhz).max(cfg.freq_min_mhz);
    }
}

/// Per-core licensing state. `granted` is what a core may execute at full
/// speed right now; `demanded` is the highest weight it has asked for and
/// not yet been granted. Grants step up only when the domain voltage covers
/// them; they step down on hysteresis expiry, which needs no throttling.
#[derive(Clone, Debug)]
pub struct Pmu {
    pub granted: Vec<usize>,
    pub demanded: Vec<usize>,
    /// Cores currently held at reduced issue rate while the supply ramps.
    pub throttling: Vec<bool>,
    /// Last time each (core, class) finished executing, for the hysteresis
    /// window. `None` means the class never ran on that core.
    pub last_exec_ns: Vec<[Option<u64>; NUM_CLASSES]>,
    /// Secure mode: every core is permanently licensed for the top weight,
    /// trading idle power for request-invisibility.
    pub secure: bool,
}

impl Pmu {
    pub fn new(cores: usize, secure: bool) -> Self {
        let initial = if secure { NUM_CLASSES - 1 } else { 0 };
        Pmu {
            granted: vec![initial; cores],
            demanded: vec![0; cores],
            throttling: vec![false; cores],
            last_exec_ns: vec![[None; NUM_CLASSES]; cores],
            secure,
        }
    }

    /// Weight level the PMU must keep core `k`'s guardband sized for:
    /// everything granted whose hysteresis window is still warm, plus
    /// anything demanded but not yet granted.
    ///
    /// `warm` reports whether a class ran recently enough to count;
    /// callers fold in still-open execution as warm before calling.
    pub fn window_level(
        &self,
        k: usize,
        now_ns: u64,
        hysteresis_ns: u64,
        open_level: Option<usize>,
    ) -> usize {
        if self.secure {
            return NUM_CLASSES - 1;
        }
        let mut level = 0;
        for (lvl, &last) in self.last_exec_ns[k].iter().enumerate() {
            if lvl > level && lvl <= self.granted[k] {
                if let Some(t) = last {
                    if now_ns.saturating_sub(t) < hysteresis_ns {
                        level = lvl;
                    }
                }
            }
        }
        if let Some(open) = open_level {
            level = level.max(open.min(self.granted[k]));
        }
        level.max(self.demanded[k])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::MachineConfig;

    fn mobile() -> MachineConfig {
        MachineConfig::default()
    }

    fn desktop() -> MachineConfig {
        MachineConfig::desktop_reference()
    }

    #[test]
    fn domain_target_adds_one_guardband_per_active_core() {
        let cfg = mobile();
        let cdyn = cfg.cdyn_table();
        // One core licensed for heavy 512-bit at 1.4 GHz on the 2-core part.
        let levels = [6, 0];
        let active = [true, false];
        let v = domain_target_mv(&cfg, &cdyn, &levels, &active, 1400);
        // Baseline 790 mV plus 1.233·790·1.4·2·0.004 = 10.909584 mV.
        assert!((v - 800.909584).abs() < 1e-9);
        // The idle core contributes nothing even if licensed high.
        let levels = [6, 6];
        let v2 = domain_target_mv(&cfg, &cdyn, &levels, &active, 1400);
        assert_eq!(v, v2);
    }

    #[test]
    fn desktop_two_heavy_256_cores_add_seventeen_mv() {
        let cfg = desktop();
        let cdyn = cfg.cdyn_table();
        let mut levels = vec![0usize; 8];
        let mut active = vec![false; 8];
        active[0] = true;
        active[1] = true;
        let base = domain_target_mv(&cfg, &cdyn, &levels, &active, 2000);
        assert!((base - 788.0).abs() < 1e-9);
        levels[0] = 4;
        levels[1] = 4;
        let v = domain_target_mv(&cfg, &cdyn, &levels, &active, 2000);
        assert!((v - 804.9854976).abs() < 1e-9);
    }

    #[test]
    fn limits_pull_desktop_avx_one_bin_down() {
        let cfg = desktop();
        let cdyn = cfg.cdyn_table();
        let mut levels = vec![0usize; 8];
        let mut active = vec![false; 8];
        levels[0] = 4; // heavy 256-bit
        active[0] = true;
        let (f, v) = enforce_limits(&cfg, &cdyn, &levels, &active, 4900).unwrap();
        assert_eq!(f, 4800);
        assert!((v - 1262.225821696).abs() < 1e-9);
        // The rejected bin really was voltage-bound, not current-bound.
        let v49 = domain_target_mv(&cfg, &cdyn, &levels, &active, 4900);
        assert!(v49 > cfg.vcc_max_mv);
        let i49 = icc_estimate(&cfg, &cdyn, &levels, &active, v49, 4900);
        assert!(i49 < cfg.icc_max_a);
    }

    #[test]
    fn limits_pull_mobile_dual_avx_down_to_current_bound() {
        let cfg = mobile();
        let cdyn = cfg.cdyn_table();
        let levels = [4usize, 4];
        let active = [true, true];
        let (f, v) = enforce_limits(&cfg, &cdyn, &levels, &active, 3100).unwrap();
        assert_eq!(f, 2200);
        assert!((v - 890.6283264).abs() < 1e-9);
        // 2.3 GHz misses on current (not voltage) by a hair.
        let v23 = domain_target_mv(&cfg, &cdyn, &levels, &active, 2300);
        assert!(v23 < cfg.vcc_max_mv);
        let i23 = icc_estimate(&cfg, &cdyn, &levels, &active, v23, 2300);
        assert!(i23 > cfg.icc_max_a && i23 < cfg.icc_max_a + 1.0);
    }

    #[test]
    fn scalar_load_is_admissible_at_preferred_frequency() {
        let cfg = mobile();
        let cdyn = cfg.cdyn_table();
        let levels = [0usize, 0];
        let active = [true, true];
        let (f, v) = enforce_limits(&cfg, &cdyn, &levels, &active, 3100).unwrap();
        assert_eq!(f, 3100);
        assert!((v - 960.0).abs() < 1e-9);
    }

    #[test]
    fn window_level_tracks_recent_and_demanded() {
        let mut pmu = Pmu::new(1, false);
        pmu.granted[0] = 4;
        pmu.last_exec_ns[0][4] = Some(1_000);
        pmu.last_exec_ns[0][2] = Some(600_000);
        let hys = 650_000;
        // 256-bit heavy still warm shortly after it ran.
        assert_eq!(pmu.window_level(0, 100_000, hys, None), 4);
        // 651 µs later the 256-bit window expired; 128-bit heavy remains.
        assert_eq!(pmu.window_level(0, 652_000, hys, None), 2);
        // Open execution counts as warm; demand floors the result.
        assert_eq!(pmu.window_level(0, 2_000_000, hys, Some(3)), 3);
        pmu.demanded[0] = 5;
        assert_eq!(pmu.window_level(0, 2_000_000, hys, None), 5);
    }

    #[test]
    fn secure_mode_pins_the_top_level() {
        let pmu = Pmu::new(2, true);
        assert_eq!(pmu.granted, vec![NUM_CLASSES - 1; 2]);
        assert_eq!(pmu.window_level(0, 0, 650_000, None), NUM_CLASSES - 1);
        assert_eq!(pmu.window_level(1, u64::MAX / 2, 650_000, None), NUM_CLASSES - 1);
    }
}
