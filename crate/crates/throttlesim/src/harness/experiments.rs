//! The experiment suite behind the CLI: throttling-period characterization,
//! pre-warm shortening, channel throughput, BER sweeps under interrupt and
//! application interference, the mitigation matrix, frequency-limit
//! enforcement, and the guardband staircase trace. Every experiment is a
//! pure function of the config (including its seed) and emits tables plus
//! a summary through [`crate::harness::report`].

use std::path::Path;

use crate::core::{InstructionClass, Phase};
use crate::covert::{
    self, calibrate_thresholds, random_bits, read_bits_file, run_transcript, symbol_to_bits,
    ChannelKind, TranscriptOptions, SYMBOL_CLASSES,
};
use crate::error::{SimError, SimResult};
use crate::harness::calibrate::{analytic_tp_ns, stagger_ns};
use crate::harness::config::MachineConfig;
use crate::harness::report::{f6, ExperimentReport, Table};
use crate::machine::{Machine, ProgramSet};
use crate::noise::{all_hw_threads, app_phi_program, schedule_events};
use crate::pmu;

/// Every experiment id `run <experiment>` accepts.
pub const EXPERIMENT_IDS: [&str; 8] = [
    "tp_characterization",
    "tp_prewarm",
    "throughput",
    "ber_noise_sweep",
    "ber_appphi_sweep",
    "mitigation_matrix",
    "limits_demo",
    "guardband_trace",
];

/// Dispatch by experiment id.
pub fn run_experiment(cfg: &MachineConfig, id: &str) -> SimResult<ExperimentReport> {
    match id {
        "tp_characterization" => tp_characterization(cfg),
        "tp_prewarm" => tp_prewarm(cfg),
        "throughput" => throughput(cfg),
        "ber_noise_sweep" => ber_noise_sweep(cfg),
        "ber_appphi_sweep" => ber_appphi_sweep(cfg),
        "mitigation_matrix" => mitigation_matrix(cfg),
        "limits_demo" => limits_demo(cfg),
        "guardband_trace" => guardband_trace(cfg),
        other => Err(SimError::Config(format!(
            "unknown experiment {other:?}; known experiments: {}",
            EXPERIMENT_IDS.join(", ")
        ))),
    }
}

fn top_channel_freq(cfg: &MachineConfig) -> u32 {
    cfg.channel_freqs_mhz.iter().copied().max().unwrap_or(cfg.freq_mhz)
}

/// Deterministic per-run RNG seed derived from the config seed and the
/// sweep coordinates.
fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(a.wrapping_mul(0x2545_f491_4f6c_dd1d))
        .wrapping_add(b)
}

struct TpSample {
    episode_ns: u64,
    tp_cycles: u64,
    wake_stall_ns: u64,
}

/// Measure the throttling period of `class` at `freq_mhz` with `cores`
/// cores starting `stagger_cycles` apart; the sample comes from the
/// last-started core.
fn staggered_tp(
    cfg: &MachineConfig,
    class: InstructionClass,
    freq_mhz: u32,
    cores: usize,
) -> SimResult<TpSample> {
    let mut c = cfg.clone();
    c.freq_mhz = freq_mhz;
    c.cores = c.cores.max(2);
    c.validate()?;
    let table = c.cdyn_table();
    let delta = table[class.level()] - table[0];
    let ramp_ns = analytic_tp_ns(&c, delta, freq_mhz, cores, c.slew_mbvr_mv_per_us)
        + (cores as u64 - 1) * stagger_ns(&c, freq_mhz);
    let ramp_cycles = ramp_ns * freq_mhz as u64 / 1000 + 4;
    let iters = c.char_probe_iters.max(ramp_cycles / 4 + 512);

    let mut ps = ProgramSet::empty(c.cores);
    for k in 0..cores {
        ps.set(
            k,
            0,
            vec![
                Phase::WaitCycles(k as u64 * c.stagger_cycles),
                Phase::MeasureTp { class, iters },
            ],
        );
    }
    let mut m = Machine::new(&c, ps)?;
    let budget = (cores as u64 * c.stagger_cycles + ramp_cycles + iters * 4) * 2 + 200_000;
    m.run_to_completion(budget)?;
    let probe = cores - 1;
    let rec = &m.cores[probe].threads[0].measures[0];
    let (tp_cycles, wake_stall_ns) = (rec.tp_cycles, rec.wake_stall_ns);
    let episode_ns = m
        .episodes_for(probe)
        .last()
        .and_then(|e| e.duration_ns())
        .unwrap_or(0);
    Ok(TpSample {
        episode_ns,
        tp_cycles,
        wake_stall_ns,
    })
}

/// TP(class, frequency, core count) over the whole class ladder, checking
/// strict monotonicity in class order at every operating point.
fn tp_characterization(cfg: &MachineConfig) -> SimResult<ExperimentReport> {
    let mut report = ExperimentReport::new("tp_characterization", &cfg.config_hash(), cfg.seed);
    let mut table = Table::new(
        "tp",
        &["class", "freq_mhz", "cores", "tp_us", "tp_cycles", "wake_stall_ns"],
    );
    let mut monotone = true;
    let mut anchor_1 = None;
    let mut anchor_2 = None;
    for &freq in &cfg.char_freqs_mhz {
        for cores in [1usize, 2] {
            let mut prev: i64 = -1;
            for &class in &InstructionClass::ALL {
                let s = staggered_tp(cfg, class, freq, cores)?;
                monotone &= s.tp_cycles as i64 > prev;
                prev = s.tp_cycles as i64;
                if class == InstructionClass::L256bHeavy && freq == 1000 {
                    let us = s.episode_ns as f64 / 1000.0;
                    if cores == 1 {
                        anchor_1 = Some(us);
                    } else {
                        anchor_2 = Some(us);
                    }
                }
                table.push_row(vec![
                    class.name().to_string(),
                    freq.to_string(),
                    cores.to_string(),
                    f6(s.episode_ns as f64 / 1000.0),
                    s.tp_cycles.to_string(),
                    s.wake_stall_ns.to_string(),
                ]);
            }
        }
    }
    report.add_table(table);
    report.set("monotone_tp_in_class_order", monotone);
    if let Some(us) = anchor_1 {
        report.set("tp_256b_heavy_1000mhz_1core_us", us);
    }
    if let Some(us) = anchor_2 {
        report.set("tp_256b_heavy_1000mhz_2core_us", us);
    }
    Ok(report)
}

/// TP of the widest class after pre-warming every possible granted level:
/// strictly decreasing in the pre-loop's weight, clustering into plateaus.
fn tp_prewarm(cfg: &MachineConfig) -> SimResult<ExperimentReport> {
    let mut c = cfg.clone();
    c.freq_mhz = *cfg.char_freqs_mhz.iter().max().unwrap_or(&cfg.freq_mhz);
    c.validate()?;
    let probe = InstructionClass::L512bHeavy;
    let table_cdyn = c.cdyn_table();
    let full_ramp =
        analytic_tp_ns(&c, table_cdyn[6] - table_cdyn[0], c.freq_mhz, 1, c.slew_mbvr_mv_per_us);
    let ramp_cycles = full_ramp * c.freq_mhz as u64 / 1000 + 4;
    let probe_iters = cfg.probe_iters_same_thread.max(ramp_cycles / 4 + 512);

    let mut report = ExperimentReport::new("tp_prewarm", &cfg.config_hash(), cfg.seed);
    let mut table = Table::new(
        "prewarm",
        &["pre_class", "pre_level", "tp_cycles", "tp_us", "wake_stall_ns"],
    );
    let mut tps = Vec::new();
    for pre_level in 0..=6usize {
        let pre = InstructionClass::from_level(pre_level);
        let mut ps = ProgramSet::empty(c.cores);
        ps.set(
            0,
            0,
            vec![
                Phase::Run {
                    class: pre,
                    iters: c.char_probe_iters,
                },
                Phase::MeasureTp {
                    class: probe,
                    iters: probe_iters,
                },
            ],
        );
        let mut m = Machine::new(&c, ps)?;
        let budget = (c.char_probe_iters * 4 + ramp_cycles * 2 + probe_iters * 4) * 2 + 200_000;
        m.run_to_completion(budget)?;
        let rec = &m.cores[0].threads[0].measures[0];
        tps.push(rec.tp_cycles);
        table.push_row(vec![
            pre.name().to_string(),
            pre_level.to_string(),
            rec.tp_cycles.to_string(),
            f6(rec.tp_cycles as f64 / c.freq_mhz as f64),
            rec.wake_stall_ns.to_string(),
        ]);
    }
    report.add_table(table);

    let strictly_decreasing = tps.windows(2).all(|w| w[1] < w[0]);
    // Greedy plateau clustering on the (already descending) TP sequence:
    // a drop of more than 2000 cycles starts a new plateau.
    let mut plateaus = 1usize;
    for w in tps.windows(2) {
        if w[0] - w[1] > 2000 {
            plateaus += 1;
        }
    }
    report.set("strictly_decreasing", strictly_decreasing);
    report.set("plateau_count", plateaus as u64);
    report.set("tp_cycles_by_pre_level", tps.clone());
    Ok(report)
}

fn transcript_table(name: &str, res: &covert::TranscriptResult) -> Table {
    let mut t = Table::new(
        name,
        &["symbol_index", "sent_bits", "tp_cycles", "decoded_bits", "wall_time_ns"],
    );
    for s in &res.symbols {
        let sent = symbol_to_bits(s.sent);
        let decoded = match s.decoded {
            Some(d) => {
                let b = symbol_to_bits(d);
                format!("{}{}", b[0], b[1])
            }
            None => "??".to_string(),
        };
        t.push_row(vec![
            s.index.to_string(),
            format!("{}{}", sent[0], sent[1]),
            s.tp_cycles.to_string(),
            decoded,
            s.epoch_start_ns.to_string(),
        ]);
    }
    t
}

fn transcript_payload(cfg: &MachineConfig) -> SimResult<Vec<u8>> {
    if cfg.bits_file.is_empty() {
        Ok(random_bits(cfg.seed, cfg.transcript_bits))
    } else {
        read_bits_file(Path::new(&cfg.bits_file))
    }
}

/// Full-length noiseless transcripts on all three channels, with the
/// epoch-rate throughput and its ratios against reference rates.
fn throughput(cfg: &MachineConfig) -> SimResult<ExperimentReport> {
    let freq = top_channel_freq(cfg);
    let bits = transcript_payload(cfg)?;
    let mut report = ExperimentReport::new("throughput", &cfg.config_hash(), cfg.seed);
    let mut bps = 0.0;
    for kind in ChannelKind::ALL {
        let cal = calibrate_thresholds(cfg, kind, freq)?;
        let res = run_transcript(cfg, kind, freq, &bits, &cal.thresholds, &TranscriptOptions::default())?;
        report.add_table(transcript_table(&format!("transcript_{}", kind.name()), &res));
        report.set(&format!("ber_{}", kind.name()), res.ber);
        report.set(&format!("bit_errors_{}", kind.name()), res.bit_errors as u64);
        report.set(&format!("erasures_{}", kind.name()), res.erasures as u64);
        report.set(&format!("calibration_ok_{}", kind.name()), cal.thresholds.ok);
        bps = res.throughput_bps;
    }
    report.set("throughput_bps", bps);
    report.set("ratio_vs_20", bps / 20.0);
    report.set("ratio_vs_61", bps / 61.0);
    report.set("ratio_vs_122", bps / 122.0);
    report.set("symbol_cycle_us", cfg.epoch_us as f64);
    report.set("bits", bits.len() as u64);
    Ok(report)
}

/// BER of the cross-SMT channel under Poisson interrupt/context-switch
/// noise on every hardware thread, swept over arrival rates.
fn ber_noise_sweep(cfg: &MachineConfig) -> SimResult<ExperimentReport> {
    let kind = ChannelKind::CrossSmt;
    let freq = top_channel_freq(cfg);
    let cal = calibrate_thresholds(cfg, kind, freq)?;
    let bits = random_bits(cfg.seed, cfg.noise_bits);
    let n_sym = bits.len() / 2;
    let horizon_ns = (n_sym as u64 + 2) * cfg.epoch_us * 1000;
    let targets = if cfg.noise_all_threads {
        all_hw_threads(cfg)
    } else {
        vec![kind.receiver_slot()]
    };

    let mut report = ExperimentReport::new("ber_noise_sweep", &cfg.config_hash(), cfg.seed);
    let mut table = Table::new(
        "ber",
        &["rate_per_s", "runs", "mean_ber", "min_ber", "max_ber", "mean_erasures"],
    );
    for (ri, &rate) in cfg.noise_rates_per_s.iter().enumerate() {
        let mut bers = Vec::new();
        let mut erasures = 0usize;
        for rep in 0..cfg.noise_seeds {
            let seed = mix_seed(cfg.seed, ri as u64 + 1, rep);
            let noise = schedule_events(cfg, rate, horizon_ns, &targets, seed);
            let opts = TranscriptOptions {
                noise,
                ..Default::default()
            };
            let res = run_transcript(cfg, kind, freq, &bits, &cal.thresholds, &opts)?;
            bers.push(res.ber);
            erasures += res.erasures;
        }
        let mean = bers.iter().sum::<f64>() / bers.len() as f64;
        let min = bers.iter().copied().fold(f64::INFINITY, f64::min);
        let max = bers.iter().copied().fold(0.0f64, f64::max);
        table.push_row(vec![
            f6(rate),
            bers.len().to_string(),
            f6(mean),
            f6(min),
            f6(max),
            f6(erasures as f64 / bers.len() as f64),
        ]);
        report.set(&format!("mean_ber_rate_{}", rate as u64), mean);
    }
    report.add_table(table);
    report.set("noise_all_threads", cfg.noise_all_threads);
    report.set("runs_per_rate", cfg.noise_seeds);
    Ok(report)
}

/// BER of the same-thread channel against a background application that
/// bursts wide-vector work on the SMT sibling: a Poisson rate sweep plus
/// a deterministic sent-level × app-level interference grid with bursts
/// aligned to the epoch start.
fn ber_appphi_sweep(cfg: &MachineConfig) -> SimResult<ExperimentReport> {
    let kind = ChannelKind::SameThread;
    let freq = top_channel_freq(cfg);
    let cal = calibrate_thresholds(cfg, kind, freq)?;
    let mut report = ExperimentReport::new("ber_appphi_sweep", &cfg.config_hash(), cfg.seed);

    // Poisson-arrival burst sweep.
    let bits = random_bits(cfg.seed, cfg.noise_bits);
    let n_sym = bits.len() / 2;
    let horizon_ns = (n_sym as u64 + 1) * cfg.epoch_us * 1000;
    let mut table = Table::new("ber_vs_rate", &["rate_per_s", "runs", "mean_ber", "max_ber"]);
    let mut means = Vec::new();
    for (ri, &rate) in cfg.appphi_rates_per_s.iter().enumerate() {
        let mut bers = Vec::new();
        for rep in 0..cfg.noise_seeds {
            let seed = mix_seed(cfg.seed, (ri as u64 + 1) << 8, rep);
            let opts = TranscriptOptions {
                app_program: app_phi_program(cfg, rate, horizon_ns, seed),
                ..Default::default()
            };
            let res = run_transcript(cfg, kind, freq, &bits, &cal.thresholds, &opts)?;
            bers.push(res.ber);
        }
        let mean = bers.iter().sum::<f64>() / bers.len() as f64;
        let max = bers.iter().copied().fold(0.0f64, f64::max);
        means.push((rate, mean));
        table.push_row(vec![
            f6(rate),
            bers.len().to_string(),
            f6(mean),
            f6(max),
        ]);
        report.set(&format!("mean_ber_rate_{}", rate as u64), mean);
    }
    report.add_table(table);
    let monotone = means.windows(2).all(|w| w[1].1 >= w[0].1);
    report.set("monotone_in_rate", monotone);
    if let (Some(lo), Some(hi)) = (means.first(), means.last()) {
        report.set("mean_ber_lowest_rate", lo.1);
        report.set("mean_ber_highest_rate", hi.1);
        report.set("highest_at_least_5x_lowest", hi.1 >= 5.0 * lo.1);
    }

    // Deterministic interference grid: one symbol per run, with a single
    // app burst synchronized to the symbol's epoch start. The domain then
    // ramps to the larger of the two levels, so the probe decodes
    // max(sent, app): an error exactly when the app runs hotter than the
    // sender.
    let epoch = cfg.epoch_us * freq as u64;
    let mut grid = Table::new(
        "interference_grid",
        &["sent_symbol", "app_symbol", "tp_cycles", "decoded", "bit_errors"],
    );
    let mut errors_above = 0usize;
    let mut errors_other = 0usize;
    for sent in 0..4u8 {
        for app in 0..4u8 {
            let opts = TranscriptOptions {
                app_program: vec![
                    Phase::WaitCycles(1),
                    Phase::SyncEpoch {
                        epoch_cycles: epoch,
                    },
                    Phase::Run {
                        class: SYMBOL_CLASSES[app as usize],
                        iters: cfg.appphi_burst_iters,
                    },
                ],
                ..Default::default()
            };
            let bits2 = symbol_to_bits(sent).to_vec();
            let res = run_transcript(cfg, kind, freq, &bits2, &cal.thresholds, &opts)?;
            let rec = res.symbols[0];
            if app > sent {
                errors_above += res.bit_errors;
            } else {
                errors_other += res.bit_errors;
            }
            grid.push_row(vec![
                sent.to_string(),
                app.to_string(),
                rec.tp_cycles.to_string(),
                rec.decoded.map_or("??".to_string(), |d| d.to_string()),
                res.bit_errors.to_string(),
            ]);
        }
    }
    report.add_table(grid);
    report.set("grid_bit_errors_app_above_sent", errors_above as u64);
    report.set("grid_bit_errors_otherwise", errors_other as u64);
    Ok(report)
}

/// Calibrate and run every channel under each hardware mitigation and
/// report which survive.
fn mitigation_matrix(cfg: &MachineConfig) -> SimResult<ExperimentReport> {
    let freq = top_channel_freq(cfg);
    let bits = random_bits(cfg.seed, cfg.noise_bits);
    let mut report = ExperimentReport::new("mitigation_matrix", &cfg.config_hash(), cfg.seed);
    let mut table = Table::new(
        "matrix",
        &[
            "variant",
            "channel",
            "calibration_ok",
            "min_gap_cycles",
            "tp_variance",
            "mean_tp_sym0",
            "mean_tp_sym1",
            "mean_tp_sym2",
            "mean_tp_sym3",
            "ber",
            "erasures",
        ],
    );

    type Tweak = fn(&mut MachineConfig);
    let variants: [(&str, Tweak); 4] = [
        ("baseline", |_| {}),
        ("per_core_vr", |c| c.per_core_vr = true),
        ("improved_throttling", |c| c.improved_throttling = true),
        ("secure_mode", |c| c.secure_mode = true),
    ];
    for (name, tweak) in variants {
        let mut vcfg = cfg.clone();
        tweak(&mut vcfg);
        vcfg.validate()?;
        for kind in ChannelKind::ALL {
            let cal = calibrate_thresholds(&vcfg, kind, freq)?;
            let res = run_transcript(
                &vcfg,
                kind,
                freq,
                &bits,
                &cal.thresholds,
                &TranscriptOptions::default(),
            )?;
            table.push_row(vec![
                name.to_string(),
                kind.name().to_string(),
                cal.thresholds.ok.to_string(),
                f6(cal.thresholds.min_gap),
                f6(cal.tp_variance),
                f6(cal.thresholds.means[0]),
                f6(cal.thresholds.means[1]),
                f6(cal.thresholds.means[2]),
                f6(cal.thresholds.means[3]),
                f6(res.ber),
                res.erasures.to_string(),
            ]);
            report.set(&format!("ber_{}_{}", name, kind.name()), res.ber);
            report.set(
                &format!("calibration_ok_{}_{}", name, kind.name()),
                cal.thresholds.ok,
            );
            report.set(
                &format!("tp_variance_{}_{}", name, kind.name()),
                cal.tp_variance,
            );
        }
    }
    report.add_table(table);
    Ok(report)
}

/// Drive the configured limits scenario: ask for the preferred frequency
/// while the configured cores run the configured class, and record the
/// admitted frequency, the settled voltage, and the worst-case draw.
fn limits_demo(cfg: &MachineConfig) -> SimResult<ExperimentReport> {
    let mut c = cfg.clone();
    c.freq_mhz = cfg.limits_pref_freq_mhz;
    c.validate()?;
    let class = c.limits_class()?;
    let active_cores = c.limits_active_cores.clamp(1, c.cores);

    let mut ps = ProgramSet::empty(c.cores);
    for k in 0..active_cores {
        ps.set(
            k,
            0,
            vec![Phase::Run {
                class,
                iters: 40_000,
            }],
        );
    }
    let mut m = Machine::new(&c, ps)?;
    m.run_to_completion(8_000_000)?;

    // The machine re-admits the preferred frequency once the demand's
    // hysteresis lapses, so the enforcement result is the trace minimum,
    // and the settled voltage is the first target requested at or after
    // the moment the clock dropped there.
    let admitted = m
        .freq_trace
        .iter()
        .map(|&(_, f)| f)
        .min()
        .unwrap_or(c.freq_mhz);
    let admitted_ns = m
        .freq_trace
        .iter()
        .find(|&&(_, f)| f == admitted)
        .map(|&(ns, _)| ns)
        .unwrap_or(0);
    // The voltage request for the admitted frequency is logged at the request
    // instant, which never trails the clock edge, so the settled target is the
    // last request at or before the admitted timestamp.
    let settled_target = m
        .target_trace
        .iter()
        .take_while(|&&(ns, _)| ns <= admitted_ns)
        .last()
        .or(m.target_trace.first())
        .map(|&(_, v)| v)
        .unwrap_or(0.0);
    let restored = m.freq_trace.last().map(|&(_, f)| f).unwrap_or(c.freq_mhz);

    // Identify which constraint pins the admitted frequency by probing one
    // step higher with the same demand.
    let levels: Vec<usize> = (0..c.cores)
        .map(|k| if k < active_cores { class.level() } else { 0 })
        .collect();
    let active: Vec<bool> = (0..c.cores).map(|k| k < active_cores).collect();
    let binding = if admitted >= cfg.limits_pref_freq_mhz {
        "none".to_string()
    } else {
        let f2 = admitted + c.freq_step_mhz;
        let table = c.cdyn_table();
        let v2 = pmu::domain_target_mv(&c, &table, &levels, &active, f2);
        let icc2 = pmu::icc_estimate(&c, &table, &levels, &active, v2, f2);
        if icc2 > c.icc_max_a {
            "icc".to_string()
        } else if v2 > c.vcc_max_mv {
            "vcc".to_string()
        } else {
            "ladder".to_string()
        }
    };

    let mut report = ExperimentReport::new("limits_demo", &cfg.config_hash(), cfg.seed);
    let mut ft = Table::new("freq_trace", &["ns", "freq_mhz"]);
    for &(ns, f) in &m.freq_trace {
        ft.push_row(vec![ns.to_string(), f.to_string()]);
    }
    report.add_table(ft);
    let mut vt = Table::new("voltage_targets", &["ns", "target_mv"]);
    for &(ns, v) in &m.target_trace {
        vt.push_row(vec![ns.to_string(), f6(v)]);
    }
    report.add_table(vt);
    let mut et = Table::new("throttle_episodes", &["core", "on_ns", "off_ns", "duration_ns"]);
    for core in 0..c.cores {
        for e in m.episodes_for(core) {
            et.push_row(vec![
                core.to_string(),
                e.on_ns.to_string(),
                e.off_ns.map_or("-".into(), |v| v.to_string()),
                e.duration_ns().map_or("-".into(), |v| v.to_string()),
            ]);
        }
    }
    report.add_table(et);

    report.set("preferred_freq_mhz", cfg.limits_pref_freq_mhz);
    report.set("admitted_freq_mhz", admitted);
    report.set("settled_target_mv", settled_target);
    report.set("restored_freq_mhz", restored);
    report.set("max_icc_a", m.max_icc_a);
    report.set("max_vcc_mv", m.max_vcc_mv);
    report.set("icc_max_a", c.icc_max_a);
    report.set("vcc_max_mv", c.vcc_max_mv);
    report.set("limits_ok", m.limits_ok);
    report.set("binding_constraint", binding);
    report.set("freq_changes", (m.freq_trace.len().saturating_sub(1)) as u64);
    Ok(report)
}

/// Two staggered cores entering and leaving a 256-bit-heavy phase at a
/// fixed 2 GHz: the voltage target climbs one per-core guardband step per
/// entry and sheds the same steps after the hysteresis window, with no
/// frequency change.
fn guardband_trace(cfg: &MachineConfig) -> SimResult<ExperimentReport> {
    let mut c = cfg.clone();
    c.freq_mhz = 2000;
    c.validate()?;
    if c.cores < 2 {
        return Err(SimError::Config(
            "guardband_trace needs at least 2 cores".into(),
        ));
    }
    let class = InstructionClass::L256bHeavy;
    let iters = 30_000u64;
    let mut ps = ProgramSet::empty(c.cores);
    ps.set(0, 0, vec![Phase::Run { class, iters }]);
    ps.set(
        1,
        0,
        vec![
            Phase::WaitCycles(c.stagger_cycles),
            Phase::Run { class, iters },
        ],
    );
    let mut m = Machine::new(&c, ps)?;
    m.run_to_completion(4_000_000)?;
    // Keep the clock moving past program completion so the hysteresis
    // steps back down and the regulator settles.
    let hys_cycles = c.hysteresis_ns() * c.freq_mhz as u64 / 1000;
    m.run(m.now_cycle() + 2 * hys_cycles + 400_000)?;

    let baseline = c.vcc_baseline_mv(2000);
    let mut steps = Vec::new();
    let mut prev = baseline;
    let mut vt = Table::new("voltage_targets", &["ns", "target_mv", "delta_mv"]);
    for &(ns, v) in &m.target_trace {
        let delta = v - prev;
        if delta.abs() > 1e-9 {
            steps.push(delta);
            vt.push_row(vec![ns.to_string(), f6(v), f6(delta)]);
        }
        prev = v;
    }
    let mut st = Table::new("settles", &["ns", "voltage_mv"]);
    for &(ns, v) in &m.settle_trace {
        st.push_row(vec![ns.to_string(), f6(v)]);
    }

    let mut report = ExperimentReport::new("guardband_trace", &cfg.config_hash(), cfg.seed);
    report.add_table(vt);
    report.add_table(st);
    report.set("baseline_mv", baseline);
    report.set("steps_mv", steps.clone());
    report.set("step_count", steps.len() as u64);
    report.set(
        "freq_changes",
        (m.freq_trace.len().saturating_sub(1)) as u64,
    );
    let up: Vec<f64> = steps.iter().copied().filter(|d| *d > 0.0).collect();
    let down: Vec<f64> = steps.iter().copied().filter(|d| *d < 0.0).collect();
    report.set("up_steps", up.len() as u64);
    report.set("down_steps", down.len() as u64);
    let symmetric = up.len() == down.len()
        && up.iter()
            .zip(down.iter().rev())
            .all(|(u, d)| (u + d).abs() < 1e-6);
    report.set("removal_symmetric", symmetric);
    Ok(report)
}
