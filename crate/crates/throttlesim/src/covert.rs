//! Covert channels over the current-management side-effects: 2-bit symbols
//! encoded as wide-vector intensity levels, received by timing one's own
//! throttling period, with threshold decoding and transcript scoring.
//!
//! Three placements are modeled. `SameThread` sends and probes on one
//! hardware thread (the probe's throttling shortens as the sent level
//! rises, so the mapping is inverted). `CrossSmt` probes scalar code on the
//! sender's SMT sibling, which the whole-core throttle gate slows for the
//! duration of the sender's voltage ramp. `CrossCore` probes from another
//! core, whose own licensing request queues behind the sender's transition
//! on the shared regulator. Senders and receivers rendezvous on wall-clock
//! epochs computed from the shared timestamp counter; each symbol occupies
//! exactly one epoch, sized so the guardband decays back to baseline before
//! the next symbol begins.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::core::{InstructionClass, MeasureRecord, Phase, Program};
use crate::error::{SimError, SimResult};
use crate::harness::config::MachineConfig;
use crate::machine::{Machine, ProgramSet};
use crate::noise::NoiseEvent;

/// Sender classes by 2-bit symbol value: 00, 01, 10, 11 in level order.
pub const SYMBOL_CLASSES: [InstructionClass; 4] = [
    InstructionClass::L128bHeavy,
    InstructionClass::L256bLight,
    InstructionClass::L256bHeavy,
    InstructionClass::L512bHeavy,
];

/// Minimum separation between adjacent calibrated level means for the
/// decoder to be considered usable.
pub const MIN_GAP_CYCLES: f64 = 2000.0;

/// Which microarchitectural boundary the channel crosses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelKind {
    /// Send and probe on the same hardware thread, time-multiplexed.
    SameThread,
    /// Probe on the sender's SMT sibling, concurrently.
    CrossSmt,
    /// Probe on a different core sharing the voltage domain, concurrently.
    CrossCore,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 3] = [
        ChannelKind::SameThread,
        ChannelKind::CrossSmt,
        ChannelKind::CrossCore,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::SameThread => "same_thread",
            ChannelKind::CrossSmt => "cross_smt",
            ChannelKind::CrossCore => "cross_core",
        }
    }

    pub fn parse(s: &str) -> Option<ChannelKind> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }

    /// The class the receiver loops on while timing itself.
    pub fn probe_class(self) -> InstructionClass {
        match self {
            ChannelKind::SameThread => InstructionClass::L512bHeavy,
            ChannelKind::CrossSmt => InstructionClass::Scalar64b,
            ChannelKind::CrossCore => InstructionClass::L128bHeavy,
        }
    }

    pub fn sender_slot(self) -> (usize, usize) {
        (0, 0)
    }

    pub fn receiver_slot(self) -> (usize, usize) {
        match self {
            ChannelKind::SameThread => (0, 0),
            ChannelKind::CrossSmt => (0, 1),
            ChannelKind::CrossCore => (1, 0),
        }
    }

    pub fn probe_iters(self, cfg: &MachineConfig) -> u64 {
        match self {
            ChannelKind::SameThread => cfg.probe_iters_same_thread,
            ChannelKind::CrossSmt => cfg.probe_iters_cross_smt,
            ChannelKind::CrossCore => cfg.probe_iters_cross_core,
        }
    }
}

/// Class the sender loops on for a 2-bit symbol.
pub fn encode_symbol(symbol: u8) -> InstructionClass {
    SYMBOL_CLASSES[symbol as usize]
}

/// Pack a bit stream into 2-bit symbols, first bit high.
pub fn bits_to_symbols(bits: &[u8]) -> Vec<u8> {
    assert!(bits.len().is_multiple_of(2), "bit count must be even");
    bits.chunks(2).map(|p| (p[0] << 1) | p[1]).collect()
}

/// Unpack a symbol back into its two bits, high bit first.
pub fn symbol_to_bits(symbol: u8) -> [u8; 2] {
    [(symbol >> 1) & 1, symbol & 1]
}

fn hamming2(a: u8, b: u8) -> usize {
    let x = (a ^ b) & 0b11;
    ((x >> 1) + (x & 1)) as usize
}

/// Calibrated decoder: per-symbol TP means, the symbols ordered by mean,
/// and three cut points splitting the TP axis into four bounded ranges.
/// Values on a cut decode to the lower range; values outside `[lo, hi]`
/// are erasures.
#[derive(Clone, Debug)]
pub struct DecodeThresholds {
    /// Mean measured TP per symbol value, in cycles.
    pub means: [f64; 4],
    /// Symbol values sorted ascending by mean (ties keep symbol order).
    pub order: [usize; 4],
    /// Midpoints between adjacent means, ascending.
    pub cuts: [f64; 3],
    /// Lower edge of the bottom range (bottom mean minus half its gap up).
    pub lo: f64,
    /// Upper edge of the top range (top mean plus half its gap down).
    pub hi: f64,
    /// Smallest separation between adjacent ordered means.
    pub min_gap: f64,
    /// True when every adjacent gap exceeds [`MIN_GAP_CYCLES`].
    pub ok: bool,
}

impl DecodeThresholds {
    /// Build the range structure from per-symbol TP means.
    pub fn from_means(means: [f64; 4]) -> DecodeThresholds {
        let mut order = [0usize, 1, 2, 3];
        order.sort_by(|&a, &b| {
            means[a]
                .partial_cmp(&means[b])
                .expect("TP means are finite")
                .then(a.cmp(&b))
        });
        let m = [
            means[order[0]],
            means[order[1]],
            means[order[2]],
            means[order[3]],
        ];
        let cuts = [
            (m[0] + m[1]) / 2.0,
            (m[1] + m[2]) / 2.0,
            (m[2] + m[3]) / 2.0,
        ];
        let gaps = [m[1] - m[0], m[2] - m[1], m[3] - m[2]];
        let lo = (m[0] - gaps[0] / 2.0).max(0.0);
        let hi = m[3] + gaps[2] / 2.0;
        let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
        DecodeThresholds {
            means,
            order,
            cuts,
            lo,
            hi,
            min_gap,
            ok: min_gap > MIN_GAP_CYCLES,
        }
    }

    /// Decode a measured TP to a symbol value; `None` is an erasure.
    pub fn decode(&self, tp_cycles: u64) -> Option<u8> {
        let t = tp_cycles as f64;
        if t < self.lo || t > self.hi {
            return None;
        }
        let range = if t <= self.cuts[0] {
            0
        } else if t <= self.cuts[1] {
            1
        } else if t <= self.cuts[2] {
            2
        } else {
            3
        };
        Some(self.order[range] as u8)
    }
}

/// Result of a threshold training run.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub kind: ChannelKind,
    pub freq_mhz: u32,
    pub thresholds: DecodeThresholds,
    /// Raw TP samples per symbol value.
    pub samples: [Vec<u64>; 4],
    /// Largest within-symbol population variance, in cycles².
    pub tp_variance: f64,
}

/// Extra inputs to a transcript run beyond the bits themselves.
#[derive(Clone, Debug, Default)]
pub struct TranscriptOptions {
    /// Cycles the sender is late to start (tolerated below epoch/2).
    pub sender_offset_cycles: u64,
    /// Cycles the receiver is late to start (tolerated below epoch/2).
    pub receiver_offset_cycles: u64,
    /// Injected interrupt/context-switch stalls.
    pub noise: Vec<NoiseEvent>,
    /// Background application program, placed on the configured app slot.
    pub app_program: Program,
}

/// Decode outcome for one transmitted symbol.
#[derive(Clone, Copy, Debug)]
pub struct SymbolRecord {
    pub index: usize,
    pub sent: u8,
    pub tp_cycles: u64,
    /// Decoded symbol; `None` is an erasure (scored as 2 bit errors).
    pub decoded: Option<u8>,
    pub epoch_start_ns: u64,
}

/// Scored transcript of one covert-channel run.
#[derive(Clone, Debug)]
pub struct TranscriptResult {
    pub kind: ChannelKind,
    pub freq_mhz: u32,
    pub bits_sent: Vec<u8>,
    pub symbols: Vec<SymbolRecord>,
    pub bit_errors: usize,
    pub erasures: usize,
    pub ber: f64,
    pub throughput_bps: f64,
    /// Wall time one symbol occupies (one epoch), in nanoseconds.
    pub symbol_cycle_ns: u64,
}

fn epoch_cycles(cfg: &MachineConfig, freq_mhz: u32) -> u64 {
    cfg.epoch_us * freq_mhz as u64
}

fn channel_config(cfg: &MachineConfig, freq_mhz: u32) -> SimResult<MachineConfig> {
    let mut c = cfg.clone();
    c.freq_mhz = freq_mhz;
    c.validate()?;
    Ok(c)
}

/// Build the sender/receiver/app thread programs for a symbol sequence.
///
/// Every program starts with a one-cycle guard so the first epoch barrier
/// lands on epoch boundary 1 even for a thread that starts exactly at
/// cycle 0 — this is what makes start offsets below half an epoch
/// harmless: both ends still meet at the same boundary.
fn channel_programs(
    cfg: &MachineConfig,
    kind: ChannelKind,
    symbols: &[u8],
    opts: &TranscriptOptions,
    freq_mhz: u32,
) -> SimResult<ProgramSet> {
    if kind == ChannelKind::CrossCore && cfg.cores < 2 {
        return Err(SimError::Config(
            "the cross-core channel needs at least 2 cores".into(),
        ));
    }
    if kind == ChannelKind::CrossSmt && !cfg.smt {
        return Err(SimError::Config(
            "the cross-SMT channel needs smt = true".into(),
        ));
    }
    let epoch = epoch_cycles(cfg, freq_mhz);
    let probe = kind.probe_class();
    let probe_iters = kind.probe_iters(cfg);

    let mut sender = vec![Phase::WaitCycles(1 + opts.sender_offset_cycles)];
    let mut receiver = vec![Phase::WaitCycles(1 + opts.receiver_offset_cycles)];
    for &s in symbols {
        sender.push(Phase::SyncEpoch {
            epoch_cycles: epoch,
        });
        sender.push(Phase::Run {
            class: encode_symbol(s),
            iters: cfg.sender_iters,
        });
        match kind {
            ChannelKind::SameThread => {
                // Probe immediately after sending, on the same thread.
                sender.push(Phase::MeasureTp {
                    class: probe,
                    iters: probe_iters,
                });
            }
            ChannelKind::CrossSmt => {
                receiver.push(Phase::SyncEpoch {
                    epoch_cycles: epoch,
                });
                receiver.push(Phase::MeasureTp {
                    class: probe,
                    iters: probe_iters,
                });
            }
            ChannelKind::CrossCore => {
                receiver.push(Phase::SyncEpoch {
                    epoch_cycles: epoch,
                });
                receiver.push(Phase::WaitCycles(cfg.cross_core_probe_delay_cycles));
                receiver.push(Phase::MeasureTp {
                    class: probe,
                    iters: probe_iters,
                });
            }
        }
    }

    let mut ps = ProgramSet::empty(cfg.cores);
    ps.set(0, 0, sender);
    if kind != ChannelKind::SameThread {
        let (rc, rt) = kind.receiver_slot();
        ps.set(rc, rt, receiver);
    }
    if !opts.app_program.is_empty() {
        let (ac, at) = (cfg.appphi_core, cfg.appphi_thread);
        if ac >= cfg.cores {
            return Err(SimError::Config(format!(
                "app thread placed on core {ac} but the machine has {} cores",
                cfg.cores
            )));
        }
        if !ps.0[ac][at].is_empty() {
            return Err(SimError::Config(format!(
                "app thread slot (core {ac}, thread {at}) is occupied by the channel"
            )));
        }
        ps.set(ac, at, opts.app_program.clone());
    }
    Ok(ps)
}

fn receiver_measures(m: &Machine, kind: ChannelKind) -> &[MeasureRecord] {
    let (rc, rt) = kind.receiver_slot();
    &m.cores[rc].threads[rt].measures
}

/// Train the decoder: send each symbol `calib_reps` times on a noiseless
/// machine and derive ranges from the per-symbol TP means. A collapsed
/// level structure (any adjacent gap ≤ 2000 cycles) is reported via
/// `thresholds.ok`, not an error, so mitigation studies can still score
/// transcripts against the degenerate decoder.
pub fn calibrate_thresholds(
    cfg: &MachineConfig,
    kind: ChannelKind,
    freq_mhz: u32,
) -> SimResult<Calibration> {
    let cfg = channel_config(cfg, freq_mhz)?;
    let reps = cfg.calib_reps;
    let mut samples: [Vec<u64>; 4] = Default::default();
    let mut means = [0.0f64; 4];
    for sym in 0..4u8 {
        let symbols = vec![sym; reps];
        let opts = TranscriptOptions::default();
        let ps = channel_programs(&cfg, kind, &symbols, &opts, freq_mhz)?;
        let mut m = Machine::new(&cfg, ps)?;
        let budget = (reps as u64 + 4) * epoch_cycles(&cfg, freq_mhz);
        m.run_to_completion(budget)?;
        let recs = receiver_measures(&m, kind);
        if recs.len() != reps {
            return Err(SimError::Model(format!(
                "calibration expected {reps} probe records, got {}",
                recs.len()
            )));
        }
        let tps: Vec<u64> = recs.iter().map(|r| r.tp_cycles).collect();
        means[sym as usize] = tps.iter().sum::<u64>() as f64 / reps as f64;
        samples[sym as usize] = tps;
    }
    let tp_variance = samples
        .iter()
        .enumerate()
        .map(|(s, v)| {
            v.iter()
                .map(|&t| (t as f64 - means[s]).powi(2))
                .sum::<f64>()
                / v.len() as f64
        })
        .fold(0.0f64, f64::max);
    Ok(Calibration {
        kind,
        freq_mhz,
        thresholds: DecodeThresholds::from_means(means),
        samples,
        tp_variance,
    })
}

/// Run a full sender+receiver co-simulation of `bits` and score it against
/// a previously calibrated decoder.
pub fn run_transcript(
    cfg: &MachineConfig,
    kind: ChannelKind,
    freq_mhz: u32,
    bits: &[u8],
    thresholds: &DecodeThresholds,
    opts: &TranscriptOptions,
) -> SimResult<TranscriptResult> {
    if bits.is_empty() || !bits.len().is_multiple_of(2) {
        return Err(SimError::Config(format!(
            "transcript needs a non-empty even number of bits, got {}",
            bits.len()
        )));
    }
    if bits.iter().any(|&b| b > 1) {
        return Err(SimError::Config("transcript bits must be 0 or 1".into()));
    }
    let cfg = channel_config(cfg, freq_mhz)?;
    let symbols = bits_to_symbols(bits);
    let ps = channel_programs(&cfg, kind, &symbols, opts, freq_mhz)?;
    let mut m = Machine::new(&cfg, ps)?;
    for ev in &opts.noise {
        if ev.core >= cfg.cores {
            return Err(SimError::Config(format!(
                "noise event targets core {} on a {}-core machine",
                ev.core, cfg.cores
            )));
        }
    }
    m.add_noise(opts.noise.clone());
    let epoch = epoch_cycles(&cfg, freq_mhz);
    let budget = (symbols.len() as u64 + 4) * epoch;
    m.run_to_completion(budget)?;

    let recs = receiver_measures(&m, kind);
    if recs.len() != symbols.len() {
        return Err(SimError::Model(format!(
            "transcript expected {} probe records, got {}",
            symbols.len(),
            recs.len()
        )));
    }
    let epoch_ns = cfg.epoch_us * 1000;
    let mut records = Vec::with_capacity(symbols.len());
    let mut bit_errors = 0usize;
    let mut erasures = 0usize;
    for (i, (&sent, rec)) in symbols.iter().zip(recs.iter()).enumerate() {
        let decoded = thresholds.decode(rec.tp_cycles);
        match decoded {
            Some(d) => bit_errors += hamming2(d, sent),
            None => {
                erasures += 1;
                bit_errors += 2;
            }
        }
        records.push(SymbolRecord {
            index: i,
            sent,
            tp_cycles: rec.tp_cycles,
            decoded,
            epoch_start_ns: (i as u64 + 1) * epoch_ns,
        });
    }
    let total_ns = symbols.len() as u64 * epoch_ns;
    Ok(TranscriptResult {
        kind,
        freq_mhz,
        bits_sent: bits.to_vec(),
        symbols: records,
        bit_errors,
        erasures,
        ber: bit_errors as f64 / bits.len() as f64,
        throughput_bps: bits.len() as f64 * 1e9 / total_ns as f64,
        symbol_cycle_ns: epoch_ns,
    })
}

/// Deterministic random bit string for transcript payloads.
pub fn random_bits(seed: u64, n: usize) -> Vec<u8> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..2u8)).collect()
}

/// Read a transcript payload from a text file of `0`/`1` characters;
/// whitespace is ignored, anything else rejected.
pub fn read_bits_file(path: &Path) -> SimResult<Vec<u8>> {
    let text = std::fs::read_to_string(path)?;
    let mut bits = Vec::new();
    for ch in text.chars() {
        match ch {
            '0' => bits.push(0),
            '1' => bits.push(1),
            c if c.is_whitespace() => {}
            c => {
                return Err(SimError::Config(format!(
                    "bits file {} contains {c:?}; only 0, 1, and whitespace are allowed",
                    path.display()
                )))
            }
        }
    }
    if bits.is_empty() || !bits.len().is_multiple_of(2) {
        return Err(SimError::Config(format!(
            "bits file {} must hold a non-empty even number of bits, got {}",
            path.display(),
            bits.len()
        )));
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn symbol_encoding_is_the_level_ladder() {
        assert_eq!(encode_symbol(0), InstructionClass::L128bHeavy);
        assert_eq!(encode_symbol(1), InstructionClass::L256bLight);
        assert_eq!(encode_symbol(2), InstructionClass::L256bHeavy);
        assert_eq!(encode_symbol(3), InstructionClass::L512bHeavy);
        // Bijective and ordered by level.
        for s in 0..3u8 {
            assert!(encode_symbol(s).level() < encode_symbol(s + 1).level());
        }
    }

    #[test]
    fn bit_packing_round_trips_high_bit_first() {
        let bits = [1, 0, 0, 1, 1, 1, 0, 0];
        let syms = bits_to_symbols(&bits);
        assert_eq!(syms, vec![2, 1, 3, 0]);
        let back: Vec<u8> = syms.iter().flat_map(|&s| symbol_to_bits(s)).collect();
        assert_eq!(back, bits);
    }

    #[test]
    fn thresholds_partition_the_axis_with_midpoint_cuts() {
        let thr = DecodeThresholds::from_means([3400.0, 6900.0, 10300.0, 18900.0]);
        assert_eq!(thr.order, [0, 1, 2, 3]);
        assert_eq!(thr.cuts, [5150.0, 8600.0, 14600.0]);
        assert_eq!(thr.lo, 3400.0 - 1750.0);
        assert_eq!(thr.hi, 18900.0 + 4300.0);
        assert!(thr.ok);
        // Each mean decodes to its own symbol.
        for s in 0..4u8 {
            assert_eq!(thr.decode(thr.means[s as usize] as u64), Some(s));
        }
        // Boundary decodes to the lower range; one past it to the upper.
        assert_eq!(thr.decode(5150), Some(0));
        assert_eq!(thr.decode(5151), Some(1));
        assert_eq!(thr.decode(14600), Some(2));
        // Outside the outer bounds is an erasure.
        assert_eq!(thr.decode(1649), None);
        assert_eq!(thr.decode(23201), None);
        assert_eq!(thr.decode(0), None);
    }

    #[test]
    fn inverted_channels_sort_symbols_by_mean() {
        // Higher sent level ⇒ shorter TP, as on the same-thread channel.
        let thr = DecodeThresholds::from_means([15525.0, 12031.0, 8573.0, 10.0]);
        assert_eq!(thr.order, [3, 2, 1, 0]);
        assert_eq!(thr.decode(10), Some(3));
        assert_eq!(thr.decode(15525), Some(0));
        assert_eq!(thr.decode(8573), Some(2));
        assert!(thr.ok);
    }

    #[test]
    fn collapsed_means_flag_calibration_failure_and_decode_constant() {
        let thr = DecodeThresholds::from_means([5000.0, 5000.0, 5000.0, 5000.0]);
        assert!(!thr.ok);
        assert_eq!(thr.min_gap, 0.0);
        // The single point decodes (to the first symbol by stable order);
        // anything else is an erasure.
        assert_eq!(thr.decode(5000), Some(0));
        assert_eq!(thr.decode(5001), None);
        assert_eq!(thr.decode(4999), None);
    }

    #[test]
    fn random_bits_are_deterministic_binary() {
        let a = random_bits(9, 64);
        let b = random_bits(9, 64);
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert!(a.iter().all(|&x| x <= 1));
        assert!(a.contains(&0) && a.contains(&1));
        assert_ne!(random_bits(10, 64), a);
    }

    #[test]
    fn bits_file_accepts_whitespace_and_rejects_junk() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.txt");
        let mut f = std::fs::File::create(&good).unwrap();
        writeln!(f, "01\n10 11").unwrap();
        drop(f);
        assert_eq!(read_bits_file(&good).unwrap(), vec![0, 1, 1, 0, 1, 1]);

        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, "01x1").unwrap();
        assert!(matches!(read_bits_file(&bad), Err(SimError::Config(_))));

        let odd = dir.path().join("odd.txt");
        std::fs::write(&odd, "011").unwrap();
        assert!(matches!(read_bits_file(&odd), Err(SimError::Config(_))));
    }

    #[test]
    fn erasures_count_as_two_bit_errors() {
        assert_eq!(hamming2(0b00, 0b11), 2);
        assert_eq!(hamming2(0b01, 0b11), 1);
        assert_eq!(hamming2(0b10, 0b10), 0);
    }
}
