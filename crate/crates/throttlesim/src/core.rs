//! Core-local execution model: instruction classes and their activity
//! weights, SMT thread programs, closed-form retirement arithmetic under the
//! 1-of-4 front-end throttle, AVX power gates, and the slow-iteration
//! detector used by measurement code.
//!
//! The closed forms here are the hot path of the event engine; a naive
//! cycle-by-cycle reference core lives at the bottom of the file and the
//! tests check the two against each other.

/// Instruction mix classes, ordered by activity weight. Everything above
/// `Scalar64b` uses the wide (PHI) execution units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InstructionClass {
    Scalar64b,
    L128bLight,
    L128bHeavy,
    L256bLight,
    L256bHeavy,
    L512bLight,
    L512bHeavy,
}

/// Execution-unit blocks that can be power-gated independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateUnit {
    Avx256,
    Avx512,
}

pub const NUM_CLASSES: usize = 7;

impl InstructionClass {
    pub const ALL: [InstructionClass; NUM_CLASSES] = [
        InstructionClass::Scalar64b,
        InstructionClass::L128bLight,
        InstructionClass::L128bHeavy,
        InstructionClass::L256bLight,
        InstructionClass::L256bHeavy,
        InstructionClass::L512bLight,
        InstructionClass::L512bHeavy,
    ];

    /// Position in the weight ladder, 0 (scalar) through 6 (heavy 512-bit).
    pub fn level(self) -> usize {
        self as usize
    }

    pub fn from_level(level: usize) -> InstructionClass {
        Self::ALL[level]
    }

    /// Wide-vector instructions need the PHI units and a raised guardband.
    pub fn is_phi(self) -> bool {
        self != InstructionClass::Scalar64b
    }

    /// Which power-gated unit block this class executes on, if any.
    /// 128-bit ops run on always-on units.
    pub fn unit(self) -> Option<GateUnit> {
        match self {
            InstructionClass::Scalar64b
            | InstructionClass::L128bLight
            | InstructionClass::L128bHeavy => None,
            InstructionClass::L256bLight | InstructionClass::L256bHeavy => Some(GateUnit::Avx256),
            InstructionClass::L512bLight | InstructionClass::L512bHeavy => Some(GateUnit::Avx512),
        }
    }

    /// Micro-ops retired per delivered iteration: scalar code dual-issues,
    /// wide code retires one op per iteration.
    pub fn base_ipc(self) -> u64 {
        if self.is_phi() {
            1
        } else {
            2
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InstructionClass::Scalar64b => "scalar64b",
            InstructionClass::L128bLight => "128b_light",
            InstructionClass::L128bHeavy => "128b_heavy",
            InstructionClass::L256bLight => "256b_light",
            InstructionClass::L256bHeavy => "256b_heavy",
            InstructionClass::L512bLight => "512b_light",
            InstructionClass::L512bHeavy => "512b_heavy",
        }
    }

    pub fn parse(s: &str) -> Option<InstructionClass> {
        Self::ALL.iter().copied().find(|c| c.name() == s)
    }
}

/// Throttled front ends deliver micro-ops on one cycle out of this many.
pub const THROTTLE_WINDOW: u64 = 4;

/// First delivery slot at or after `cycle`. Delivery slots are the cycles
/// whose absolute index is a multiple of the throttle window, so the pattern
/// is machine-global rather than relative to when throttling engaged.
pub fn first_delivery_slot(cycle: u64) -> u64 {
    cycle.div_ceil(THROTTLE_WINDOW) * THROTTLE_WINDOW
}

/// Number of retirement opportunities in `[start, end)` for a thread that is
/// ready the whole interval. Unthrottled threads retire every cycle;
/// throttled threads only on delivery slots.
pub fn count_retire_slots(start: u64, end: u64, throttled: bool) -> u64 {
    if end <= start {
        return 0;
    }
    if !throttled {
        return end - start;
    }
    let first = first_delivery_slot(start);
    if first >= end {
        0
    } else {
        (end - 1 - first) / THROTTLE_WINDOW + 1
    }
}

/// Cycle of the `k`-th retirement (0-based) for a thread ready from `start`.
pub fn kth_retire_cycle(start: u64, k: u64, throttled: bool) -> u64 {
    if throttled {
        first_delivery_slot(start) + k * THROTTLE_WINDOW
    } else {
        start + k
    }
}

/// One step of an SMT thread's workload script.
#[derive(Clone, Debug, PartialEq)]
pub enum Phase {
    /// Execute `iters` iterations of `class` back to back.
    Run { class: InstructionClass, iters: u64 },
    /// Same as `Run`, but record per-iteration retirement timing for the
    /// slow-iteration detector.
    MeasureTp { class: InstructionClass, iters: u64 },
    /// Spin for a fixed number of core cycles.
    WaitCycles(u64),
    /// Spin until wall-clock time reaches `ns`.
    WaitUntilNs(u64),
    /// Spin until the timestamp counter is the next multiple of
    /// `epoch_cycles` (a shared-clock barrier both channel ends can compute).
    SyncEpoch { epoch_cycles: u64 },
}

pub type Program = Vec<Phase>;

/// A maximal run of uniformly spaced retirements, the unit the detector
/// consumes. `iters` retirements at `first_retire_cycle`, `first + stride`,
/// `first + 2·stride`, ...
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub first_retire_cycle: u64,
    pub iters: u64,
    pub stride: u64,
}

impl Block {
    pub fn last_retire_cycle(&self) -> u64 {
        self.first_retire_cycle + (self.iters - 1) * self.stride
    }
}

/// Timing summary of one `MeasureTp` phase.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureRecord {
    /// Detected throttling period in cycles (0 when nothing qualified).
    pub tp_cycles: u64,
    /// Cycle the phase was entered (timestamp read before the first iteration).
    pub start_cycle: u64,
    /// Cycle after the last retirement (timestamp read after the loop).
    pub end_cycle: u64,
    pub iters: u64,
    /// Iterations whose delta met the slow threshold.
    pub throttled_iters: u64,
    /// Power-gate wake time that stalled this phase's first iteration, ns.
    pub wake_stall_ns: u64,
    /// The retirement timeline the detector ran over.
    pub blocks: Vec<Block>,
}

/// Scan per-iteration timestamp deltas for the longest run of slow
/// iterations. An iteration is slow when its delta from the previous
/// retirement is at least `factor` times the unthrottled delta (one cycle);
/// a run qualifies once it has `min_run` consecutive slow iterations.
///
/// Returns `(tp_cycles, slow_iters_total)` where `tp_cycles` is the span
/// from the retirement preceding the longest run to its last retirement —
/// i.e. the wall-cycle cost of the slow region including the initial stall.
pub fn detect_tp(blocks: &[Block], entry_cycle: u64, factor: u64, min_run: u64) -> (u64, u64) {
    let threshold = factor; // unthrottled delta is exactly one cycle
    let mut prev = entry_cycle.saturating_sub(1);
    let mut slow_total = 0u64;
    let mut best = 0u64;
    // Current run state: retirement before the run started, last slow
    // retirement, and how many slow iterations the run has.
    let mut run_prev = 0u64;
    let mut run_last = 0u64;
    let mut run_len = 0u64;
    let mut in_run = false;

    let mut close_run = |in_run: &mut bool, run_len: u64, run_prev: u64, run_last: u64| {
        if *in_run && run_len >= min_run {
            best = best.max(run_last - run_prev);
        }
        *in_run = false;
    };

    for b in blocks {
        debug_assert!(b.iters >= 1);
        // First iteration of the block: delta from the previous retirement.
        let d0 = b.first_retire_cycle - prev;
        if d0 >= threshold {
            if !in_run {
                in_run = true;
                run_prev = prev;
                run_len = 0;
            }
            run_len += 1;
            run_last = b.first_retire_cycle;
            slow_total += 1;
        } else {
            close_run(&mut in_run, run_len, run_prev, run_last);
        }
        // Remaining iterations all share the block's stride.
        if b.iters > 1 {
            if b.stride >= threshold {
                if !in_run {
                    in_run = true;
                    run_prev = b.first_retire_cycle;
                    run_len = 0;
                }
                run_len += b.iters - 1;
                run_last = b.last_retire_cycle();
                slow_total += b.iters - 1;
            } else {
                close_run(&mut in_run, run_len, run_prev, run_last);
            }
        }
        prev = b.last_retire_cycle();
    }
    close_run(&mut in_run, run_len, run_prev, run_last);
    (best, slow_total)
}

/// Lifecycle of one power-gated unit block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateState {
    /// Powered and usable now.
    Open,
    /// Wake in progress; usable at the contained time.
    Waking { ready_ns: u64 },
    /// Power-gated; using it costs a wake.
    Closed,
}

/// One power-gated execution-unit block. The gate closes lazily: a unit
/// left unused for the close-delay is considered off the next time anyone
/// looks, without an explicit close event.
#[derive(Clone, Copy, Debug, Default)]
pub struct PowerGate {
    ready_ns: u64,
    last_use_ns: Option<u64>,
}

impl PowerGate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self, now_ns: u64, close_after_ns: u64) -> GateState {
        if let Some(u) = self.last_use_ns {
            if now_ns.saturating_sub(u) < close_after_ns && now_ns >= u {
                return GateState::Open;
            }
        }
        if self.ready_ns > now_ns {
            GateState::Waking {
                ready_ns: self.ready_ns,
            }
        } else {
            GateState::Closed
        }
    }

    /// Request the unit at `now_ns`. Returns when it can first be used:
    /// `now_ns` if already open, the in-progress ready time if a wake is
    /// underway, or `now_ns + wake_ns` for a cold start.
    pub fn powergate_wake(&mut self, now_ns: u64, wake_ns: u64, close_after_ns: u64) -> u64 {
        match self.state(now_ns, close_after_ns) {
            GateState::Open => {
                self.last_use_ns = Some(now_ns);
                now_ns
            }
            GateState::Waking { ready_ns } => ready_ns,
            GateState::Closed => {
                self.ready_ns = now_ns + wake_ns;
                self.ready_ns
            }
        }
    }

    /// Record that the unit executed something at `ns`, restarting the lazy
    /// close countdown.
    pub fn touch(&mut self, ns: u64) {
        self.last_use_ns = Some(match self.last_use_ns {
            Some(u) => u.max(ns),
            None => ns,
        });
    }

    pub fn last_use_ns(&self) -> Option<u64> {
        self.last_use_ns
    }
}

/// Naive reference core: two SMT threads stepped one cycle at a time.
///
/// It understands programs made of `Run`/`MeasureTp`/`WaitCycles`/
/// `SyncEpoch` phases and an externally driven throttle gate, and records
/// every retirement timestamp. It knows nothing about voltage, power gates,
/// or wall-clock time — it exists so the event engine's batched arithmetic
/// has something slow and obviously correct to be compared against.
pub struct MicroCore {
    pub threads: [MicroThread; 2],
    pub gate_active: bool,
    /// Gate only PHI micro-ops of threads in this mask instead of the whole
    /// front end (per-thread throttling).
    pub improved: bool,
    pub phi_mask: u8,
    pub cycle: u64,
}

#[derive(Default)]
pub struct MicroThread {
    pub program: Program,
    pc: usize,
    iters_left: u64,
    wait_until: u64,
    entered: bool,
    pub retires: Vec<u64>,
    pub retired_uops: u64,
}

impl MicroThread {
    pub fn new(program: Program) -> Self {
        MicroThread {
            program,
            ..Default::default()
        }
    }

    pub fn done(&self) -> bool {
        self.pc >= self.program.len()
    }
}

impl MicroCore {
    pub fn new(t0: Program, t1: Program) -> Self {
        MicroCore {
            threads: [MicroThread::new(t0), MicroThread::new(t1)],
            gate_active: false,
            improved: false,
            phi_mask: 0,
            cycle: 0,
        }
    }

    pub fn all_done(&self) -> bool {
        self.threads.iter().all(|t| t.done())
    }

    /// Advance the whole core by one cycle.
    pub fn step_cycle(&mut self) {
        let cycle = self.cycle;
        for tid in 0..2 {
            let gate_active = self.gate_active;
            let improved = self.improved;
            let masked = self.phi_mask & (1 << tid) != 0;
            let t = &mut self.threads[tid];
            // Resolve the current phase; waits of zero length fall through.
            loop {
                if t.done() {
                    break;
                }
                if !t.entered {
                    t.entered = true;
                    match &t.program[t.pc] {
                        Phase::Run { iters, .. } | Phase::MeasureTp { iters, .. } => {
                            t.iters_left = *iters;
                        }
                        Phase::WaitCycles(n) => t.wait_until = cycle + n,
                        Phase::SyncEpoch { epoch_cycles } => {
                            t.wait_until = cycle.div_ceil(*epoch_cycles) * epoch_cycles;
                        }
                        Phase::WaitUntilNs(_) => {
                            panic!("reference core has no wall clock");
                        }
                    }
                }
                match &t.program[t.pc] {
                    Phase::Run { class, .. } | Phase::MeasureTp { class, .. } => {
                        let gated = gate_active && (!improved || (masked && class.is_phi()));
                        let delivers = !gated || cycle.is_multiple_of(THROTTLE_WINDOW);
                        if delivers {
                            t.retires.push(cycle);
                            t.retired_uops += class.base_ipc();
                            t.iters_left -= 1;
                            if t.iters_left == 0 {
                                t.pc += 1;
                                t.entered = false;
                                // Next phase begins on the following cycle.
                            }
                        }
                        break;
                    }
                    Phase::WaitCycles(_) | Phase::SyncEpoch { .. } => {
                        if cycle >= t.wait_until {
                            t.pc += 1;
                            t.entered = false;
                            continue; // zero-length wait: same-cycle fallthrough
                        }
                        break;
                    }
                    Phase::WaitUntilNs(_) => unreachable!(),
                }
            }
        }
        self.cycle += 1;
    }
}
