//! Machine and experiment configuration.
//!
//! The on-disk format is a flat TOML file: every key is a top-level scalar
//! or array, documented in the repository README. Unknown keys are rejected
//! so a typo fails loudly instead of silently running with a default.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::core::{InstructionClass, NUM_CLASSES};
use crate::error::{SimError, SimResult};
use crate::pdn::VrKind;

/// Complete simulator configuration. [`Default`] is the 2-core mobile part;
/// [`MachineConfig::desktop_reference`] is the 8-core desktop part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineConfig {
    // ---- topology ----
    pub cores: usize,
    /// Two hardware threads per core when true, one otherwise.
    pub smt: bool,

    // ---- power delivery ----
    pub vr_kind: VrKind,
    pub r_ll_mohm: f64,
    /// Domain leakage, charged once regardless of core count.
    pub icc_lkg_a: f64,
    /// Converts weight · mV · GHz into amperes of dynamic current.
    pub k_icc: f64,
    pub slew_mbvr_mv_per_us: f64,
    pub slew_ivr_mv_per_us: f64,
    pub slew_ldo_mv_per_us: f64,

    // ---- V/f curve and clocking ----
    /// Scalar-baseline supply target is `vcc_base_mv + slope · f_GHz`.
    pub vcc_base_mv: f64,
    pub vcc_slope_mv_per_ghz: f64,
    pub freq_mhz: u32,
    pub freq_min_mhz: u32,
    pub freq_step_mhz: u32,

    // ---- electrical limits ----
    pub icc_max_a: f64,
    pub vcc_max_mv: f64,
    pub vcc_min_mv: f64,

    // ---- PMU timing ----
    /// Grace window after the last wide op before the guardband is dropped.
    pub hysteresis_us: u64,
    /// Power-gate wake latency; the model is validated for 8–15 ns.
    pub wake_ns: u64,
    /// Idle time after which an execution-unit power gate closes.
    pub gate_close_us: u64,

    // ---- per-class activity weights (scalar pinned at 1.0) ----
    pub cdyn_scalar64b: f64,
    pub cdyn_128b_light: f64,
    pub cdyn_128b_heavy: f64,
    pub cdyn_256b_light: f64,
    pub cdyn_256b_heavy: f64,
    pub cdyn_512b_light: f64,
    pub cdyn_512b_heavy: f64,

    // ---- mitigations ----
    /// Replace the shared regulator with one fast LDO per core.
    pub per_core_vr: bool,
    /// Gate only the offending thread's wide ops instead of the whole core.
    pub improved_throttling: bool,
    /// Pin every core at the worst-case guardband permanently.
    pub secure_mode: bool,

    // ---- channel protocol ----
    /// Symbol slot length. Must leave room for the sender burst plus the
    /// full hysteresis reset between consecutive symbols.
    pub epoch_us: u64,
    /// Iterations of the encoded class per transmitted symbol.
    pub sender_iters: u64,
    pub probe_iters_same_thread: u64,
    pub probe_iters_cross_smt: u64,
    pub probe_iters_cross_core: u64,
    /// Receiver-side delay so the sender's regulator request is enqueued
    /// first when sender and receiver sit on different cores.
    pub cross_core_probe_delay_cycles: u64,
    /// Probe repetitions per symbol value when calibrating thresholds.
    pub calib_reps: usize,
    pub transcript_bits: usize,
    /// Optional raw text file of 0/1 characters to transmit; empty means
    /// generate the transcript from the seed.
    pub bits_file: String,
    pub channel_freqs_mhz: Vec<u32>,
    /// An iteration counts as throttled when its timestamp delta is at
    /// least this multiple of the unthrottled delta.
    pub throttle_detect_factor: u64,
    /// Minimum consecutive slow iterations before a run counts as a
    /// throttling period (rejects isolated noise spikes).
    pub throttle_min_run_iters: u64,

    // ---- characterization sweeps ----
    pub char_freqs_mhz: Vec<u32>,
    pub char_probe_iters: u64,
    /// Start offset between cores in multi-core exacerbation runs.
    pub stagger_cycles: u64,

    // ---- system noise ----
    pub noise_bits: usize,
    pub noise_seeds: u64,
    pub noise_rates_per_s: Vec<f64>,
    pub interrupt_lat_min_ns: u64,
    pub interrupt_lat_max_ns: u64,
    pub ctx_switch_lat_min_ns: u64,
    pub ctx_switch_lat_max_ns: u64,
    /// Spread noise events uniformly over all hardware threads (true) or
    /// aim everything at the receiver thread (false).
    pub noise_all_threads: bool,

    // ---- concurrent wide-vector application ----
    pub appphi_rates_per_s: Vec<f64>,
    pub appphi_burst_iters: u64,
    pub appphi_core: usize,
    pub appphi_thread: usize,

    // ---- limits demonstration scenario ----
    pub limits_pref_freq_mhz: u32,
    pub limits_active_cores: usize,
    pub limits_phi_class: String,

    pub seed: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            cores: 2,
            smt: true,
            vr_kind: VrKind::SharedMotherboard,
            r_ll_mohm: 2.0,
            icc_lkg_a: 2.0,
            k_icc: 0.004,
            slew_mbvr_mv_per_us: 0.80832,
            slew_ivr_mv_per_us: 1.212176,
            slew_ldo_mv_per_us: 150.0,
            vcc_base_mv: 650.0,
            vcc_slope_mv_per_ghz: 100.0,
            freq_mhz: 1400,
            freq_min_mhz: 800,
            freq_step_mhz: 100,
            icc_max_a: 29.0,
            vcc_max_mv: 1150.0,
            vcc_min_mv: 550.0,
            hysteresis_us: 650,
            wake_ns: 10,
            gate_close_us: 650,
            cdyn_scalar64b: 1.0,
            cdyn_128b_light: 1.15,
            cdyn_128b_heavy: 1.22,
            cdyn_256b_light: 1.448,
            cdyn_256b_heavy: 1.6736,
            cdyn_512b_light: 1.93,
            cdyn_512b_heavy: 2.233,
            per_core_vr: false,
            improved_throttling: false,
            secure_mode: false,
            epoch_us: 688,
            sender_iters: 3000,
            probe_iters_same_thread: 5000,
            probe_iters_cross_smt: 7000,
            probe_iters_cross_core: 7000,
            cross_core_probe_delay_cycles: 64,
            calib_reps: 50,
            transcript_bits: 1000,
            bits_file: String::new(),
            channel_freqs_mhz: vec![1200, 1400],
            throttle_detect_factor: 2,
            throttle_min_run_iters: 3,
            char_freqs_mhz: vec![1000, 1200, 1400],
            char_probe_iters: 12000,
            stagger_cycles: 1000,
            noise_bits: 200,
            noise_seeds: 20,
            noise_rates_per_s: vec![100.0, 500.0, 1000.0, 2000.0],
            interrupt_lat_min_ns: 2_000,
            interrupt_lat_max_ns: 10_000,
            ctx_switch_lat_min_ns: 10_000,
            ctx_switch_lat_max_ns: 30_000,
            noise_all_threads: true,
            appphi_rates_per_s: vec![10.0, 100.0, 1000.0, 10000.0],
            appphi_burst_iters: 256,
            appphi_core: 0,
            appphi_thread: 1,
            limits_pref_freq_mhz: 3100,
            limits_active_cores: 2,
            limits_phi_class: "256b_heavy".to_string(),
            seed: 7,
        }
    }
}

impl MachineConfig {
    /// The 8-core desktop reference part: higher V/f curve, deeper current
    /// budget, voltage-bound rather than current-bound at the top bins.
    pub fn desktop_reference() -> Self {
        MachineConfig {
            cores: 8,
            icc_lkg_a: 5.0,
            vcc_base_mv: 472.0,
            vcc_slope_mv_per_ghz: 158.0,
            freq_mhz: 2000,
            icc_max_a: 100.0,
            vcc_max_mv: 1270.0,
            sender_iters: 6000,
            limits_pref_freq_mhz: 4900,
            limits_active_cores: 1,
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> SimResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SimError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> SimResult<Self> {
        let cfg: MachineConfig =
            toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Scalar-baseline supply target at `f_mhz`.
    pub fn vcc_baseline_mv(&self, f_mhz: u32) -> f64 {
        self.vcc_base_mv + self.vcc_slope_mv_per_ghz * f_mhz as f64 / 1000.0
    }

    pub fn cdyn_table(&self) -> [f64; NUM_CLASSES] {
        [
            self.cdyn_scalar64b,
            self.cdyn_128b_light,
            self.cdyn_128b_heavy,
            self.cdyn_256b_light,
            self.cdyn_256b_heavy,
            self.cdyn_512b_light,
            self.cdyn_512b_heavy,
        ]
    }

    pub fn set_cdyn_table(&mut self, t: [f64; NUM_CLASSES]) {
        self.cdyn_scalar64b = t[0];
        self.cdyn_128b_light = t[1];
        self.cdyn_128b_heavy = t[2];
        self.cdyn_256b_light = t[3];
        self.cdyn_256b_heavy = t[4];
        self.cdyn_512b_light = t[5];
        self.cdyn_512b_heavy = t[6];
    }

    /// Regulator topology after mitigations are applied.
    pub fn effective_vr_kind(&self) -> VrKind {
        if self.per_core_vr {
            VrKind::PerCoreLdo
        } else {
            self.vr_kind
        }
    }

    pub fn slew_for(&self, kind: VrKind) -> f64 {
        match kind {
            VrKind::SharedMotherboard => self.slew_mbvr_mv_per_us,
            VrKind::Integrated => self.slew_ivr_mv_per_us,
            VrKind::PerCoreLdo => self.slew_ldo_mv_per_us,
        }
    }

    pub fn threads_per_core(&self) -> usize {
        if self.smt {
            2
        } else {
            1
        }
    }

    pub fn hysteresis_ns(&self) -> u64 {
        self.hysteresis_us * 1_000
    }

    pub fn gate_close_ns(&self) -> u64 {
        self.gate_close_us * 1_000
    }

    pub fn limits_class(&self) -> SimResult<InstructionClass> {
        InstructionClass::parse(&self.limits_phi_class).ok_or_else(|| {
            SimError::Config(format!(
                "limits_phi_class '{}' is not an instruction class",
                self.limits_phi_class
            ))
        })
    }

    /// SHA-256 over the canonical JSON encoding; embedded in every report so
    /// results are traceable to the exact configuration that produced them.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn validate(&self) -> SimResult<()> {
        fn fail(msg: String) -> SimResult<()> {
            Err(SimError::Config(msg))
        }
        if self.cores == 0 || self.cores > 64 {
            return fail(format!("cores = {} out of range 1..=64", self.cores));
        }
        for (name, v) in [
            ("r_ll_mohm", self.r_ll_mohm),
            ("k_icc", self.k_icc),
            ("slew_mbvr_mv_per_us", self.slew_mbvr_mv_per_us),
            ("slew_ivr_mv_per_us", self.slew_ivr_mv_per_us),
            ("slew_ldo_mv_per_us", self.slew_ldo_mv_per_us),
            ("vcc_base_mv", self.vcc_base_mv),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if self.icc_lkg_a < 0.0 || !self.icc_lkg_a.is_finite() {
            return fail(format!("icc_lkg_a must be ≥ 0, got {}", self.icc_lkg_a));
        }
        if self.icc_max_a <= self.icc_lkg_a {
            return fail(format!(
                "icc_max_a ({}) must exceed leakage ({})",
                self.icc_max_a, self.icc_lkg_a
            ));
        }
        if !(self.vcc_min_mv > 0.0 && self.vcc_min_mv < self.vcc_max_mv) {
            return fail(format!(
                "need 0 < vcc_min_mv < vcc_max_mv, got {} / {}",
                self.vcc_min_mv, self.vcc_max_mv
            ));
        }
        if self.vcc_slope_mv_per_ghz < 0.0 {
            return fail("vcc_slope_mv_per_ghz must be ≥ 0".to_string());
        }
        if self.freq_min_mhz == 0 || self.freq_mhz < self.freq_min_mhz {
            return fail(format!(
                "need 0 < freq_min_mhz ({}) ≤ freq_mhz ({})",
                self.freq_min_mhz, self.freq_mhz
            ));
        }
        if self.freq_step_mhz == 0 {
            return fail("freq_step_mhz must be ≥ 1".to_string());
        }
        if self.limits_pref_freq_mhz < self.freq_min_mhz {
            return fail("limits_pref_freq_mhz below freq_min_mhz".to_string());
        }
        if !(8..=15).contains(&self.wake_ns) {
            return fail(format!(
                "wake_ns = {} outside the validated 8..=15 ns range",
                self.wake_ns
            ));
        }
        if self.hysteresis_us == 0 || self.gate_close_us == 0 {
            return fail("hysteresis_us and gate_close_us must be ≥ 1".to_string());
        }
        if self.epoch_us <= self.hysteresis_us {
            return fail(format!(
                "epoch_us ({}) must exceed hysteresis_us ({}) so the \
                 guardband resets between symbols",
                self.epoch_us, self.hysteresis_us
            ));
        }
        if self.cdyn_scalar64b != 1.0 {
            return fail(format!(
                "cdyn_scalar64b is the weight unit and must be exactly 1.0, \
                 got {}",
                self.cdyn_scalar64b
            ));
        }
        let tbl = self.cdyn_table();
        if let Some(v) = tbl.iter().find(|v| !v.is_finite()) {
            return fail(format!("cdyn table entries must be finite, got {v}"));
        }
        for i in 1..NUM_CLASSES {
            if tbl[i] <= tbl[i - 1] {
                return fail(format!(
                    "cdyn table must be strictly increasing; entry {i} \
                     ({}) ≤ entry {} ({})",
                    tbl[i],
                    i - 1,
                    tbl[i - 1]
                ));
            }
        }
        for (name, v) in [
            ("sender_iters", self.sender_iters),
            ("probe_iters_same_thread", self.probe_iters_same_thread),
            ("probe_iters_cross_smt", self.probe_iters_cross_smt),
            ("probe_iters_cross_core", self.probe_iters_cross_core),
            ("char_probe_iters", self.char_probe_iters),
            ("appphi_burst_iters", self.appphi_burst_iters),
            ("throttle_min_run_iters", self.throttle_min_run_iters),
        ] {
            if v == 0 {
                return fail(format!("{name} must be ≥ 1"));
            }
        }
        if self.throttle_detect_factor < 2 {
            return fail("throttle_detect_factor must be ≥ 2".to_string());
        }
        if self.calib_reps == 0 {
            return fail("calib_reps must be ≥ 1".to_string());
        }
        for (name, v) in [
            ("transcript_bits", self.transcript_bits),
            ("noise_bits", self.noise_bits),
        ] {
            if v < 2 || v % 2 != 0 {
                return fail(format!("{name} must be an even number ≥ 2, got {v}"));
            }
        }
        if self.channel_freqs_mhz.is_empty() || self.char_freqs_mhz.is_empty() {
            return fail("channel_freqs_mhz and char_freqs_mhz must be non-empty".to_string());
        }
        for &f in self
            .channel_freqs_mhz
            .iter()
            .chain(self.char_freqs_mhz.iter())
            .chain(std::iter::once(&self.freq_mhz))
        {
            if f < self.freq_min_mhz {
                return fail(format!("frequency {f} MHz below freq_min_mhz"));
            }
        }
        for &f in self.channel_freqs_mhz.iter().chain(std::iter::once(&self.freq_mhz)) {
            if !(self.epoch_us * f as u64).is_multiple_of(4) {
                return fail(format!(
                    "epoch_us × {f} MHz = {} cycles is not a multiple of the \
                     4-cycle throttle window; symbol slots would drift \
                     against the delivery pattern",
                    self.epoch_us * f as u64
                ));
            }
        }
        for rates in [&self.noise_rates_per_s, &self.appphi_rates_per_s] {
            for &r in rates {
                if r < 0.0 || !r.is_finite() {
                    return fail(format!("event rate {r} must be ≥ 0"));
                }
            }
        }
        if self.interrupt_lat_min_ns == 0 || self.interrupt_lat_min_ns > self.interrupt_lat_max_ns
        {
            return fail("need 1 ≤ interrupt_lat_min_ns ≤ interrupt_lat_max_ns".to_string());
        }
        if self.ctx_switch_lat_min_ns == 0
            || self.ctx_switch_lat_min_ns > self.ctx_switch_lat_max_ns
        {
            return fail("need 1 ≤ ctx_switch_lat_min_ns ≤ ctx_switch_lat_max_ns".to_string());
        }
        if self.appphi_core >= self.cores {
            return fail(format!(
                "appphi_core {} out of range for {} cores",
                self.appphi_core, self.cores
            ));
        }
        if self.appphi_thread >= self.threads_per_core() {
            return fail(format!(
                "appphi_thread {} invalid (smt = {})",
                self.appphi_thread, self.smt
            ));
        }
        if self.limits_active_cores == 0 || self.limits_active_cores > self.cores {
            return fail(format!(
                "limits_active_cores {} out of range 1..={}",
                self.limits_active_cores, self.cores
            ));
        }
        self.limits_class()?;
        if self.noise_seeds == 0 {
            return fail("noise_seeds must be ≥ 1".to_string());
        }
        Ok(())
    }
}
