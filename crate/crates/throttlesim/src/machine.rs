//! The event-driven multicore machine: a master cycle clock, per-thread
//! workload programs executed with closed-form batching, voltage regulators
//! on an exact-nanosecond timeline, and the PMU policy tying them together.
//!
//! Two event queues drive the simulation. Cycle-keyed events carry
//! everything that happens on clock-cycle boundaries (phase ends, stall
//! ends, throttle-gate activation, frequency switches); nanosecond-keyed
//! events carry everything physical (regulator settle points, hysteresis
//! expiries, injected noise). The two timelines are tied by an exact
//! integer mapping: `ns(cycle) = epoch_ns + ⌊Δcycle · 1000 / f_MHz⌋`, with a
//! new epoch anchored at every frequency change, so identical runs are
//! bit-identical and no floating-point time ever accumulates.
//!
//! Threads do not execute cycle by cycle. A thread running a phase opens a
//! *segment* — a span with constant gating — and the engine computes every
//! retirement in the segment in closed form when the segment closes (at a
//! gate flip, a stall, or the phase's own end). Property tests compare this
//! batched arithmetic against the naive reference core.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::core::{
    count_retire_slots, detect_tp, kth_retire_cycle, Block, GateUnit, InstructionClass,
    MeasureRecord, Phase, PowerGate, Program, NUM_CLASSES,
};
use crate::error::{SimError, SimResult};
use crate::harness::config::MachineConfig;
use crate::noise::NoiseEvent;
use crate::pdn::{self, RequestAck, Vr, VrKind};
use crate::pmu::{self, Pmu};

#[derive(Clone, Debug, PartialEq, Eq)]
enum CycKind {
    PhaseEnd { core: usize, thread: usize, gen: u32 },
    StallEnd { core: usize, thread: usize, gen: u32 },
    GateOn { core: usize },
    FreqSet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct CycEvent {
    cycle: u64,
    seq: u64,
    kind: CycKind,
}

impl Ord for CycEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.cycle, self.seq).cmp(&(other.cycle, other.seq))
    }
}
impl PartialOrd for CycEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum NsKind {
    VrDue { vr: usize },
    HysCheck { core: usize },
    Noise { idx: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct NsEvent {
    ns: u64,
    seq: u64,
    kind: NsKind,
}

impl Ord for NsEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.ns, self.seq).cmp(&(other.ns, other.seq))
    }
}
impl PartialOrd for NsEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ThreadState {
    Running(InstructionClass),
    Waiting,
    Done,
}

/// One hardware thread executing its program.
pub struct Thread {
    pub program: Program,
    pc: usize,
    state: ThreadState,
    /// Bumped on every segment/phase transition; events carry the value
    /// they were scheduled under and are dropped when it no longer matches.
    gen: u32,
    iters_left: u64,
    seg_open: bool,
    seg_start: u64,
    seg_throttled: bool,
    stall_until_ns: u64,
    advance_at_stall_end: bool,
    wait_target_ns: Option<u64>,
    measuring: bool,
    measure_entry_cycle: u64,
    measure_wake_ns: u64,
    blocks: Vec<Block>,
    pub measures: Vec<MeasureRecord>,
    pub retired_uops: u64,
    pub done_cycle: Option<u64>,
}

impl Thread {
    fn new(program: Program) -> Self {
        Thread {
            program,
            pc: 0,
            state: ThreadState::Done,
            gen: 0,
            iters_left: 0,
            seg_open: false,
            seg_start: 0,
            seg_throttled: false,
            stall_until_ns: 0,
            advance_at_stall_end: false,
            wait_target_ns: None,
            measuring: false,
            measure_entry_cycle: 0,
            measure_wake_ns: 0,
            blocks: Vec::new(),
            measures: Vec::new(),
            retired_uops: 0,
            done_cycle: None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.state == ThreadState::Done
    }
}

/// One physical core: two SMT thread slots, the front-end throttle gate,
/// and the power gates for the wide execution units.
pub struct Core {
    pub threads: Vec<Thread>,
    pub gate_active: bool,
    /// Threads whose wide ops are gated under per-thread throttling.
    pub phi_mask: u8,
    pub gates: [PowerGate; 2],
}

/// Start/stop record of one throttling episode on a core. `on_ns` is the
/// licensing request that opened it; `off_ns` the regulator settle (or
/// policy decision) that released it, so `off_ns − on_ns` is directly
/// comparable to the analytic sum of transition times.
#[derive(Clone, Copy, Debug)]
pub struct ThrottleEpisode {
    pub core: usize,
    pub on_ns: u64,
    pub on_cycle: u64,
    pub off_ns: Option<u64>,
    pub off_cycle: Option<u64>,
}

impl ThrottleEpisode {
    pub fn duration_ns(&self) -> Option<u64> {
        self.off_ns.map(|off| off - self.on_ns)
    }
}

/// Per-core thread programs handed to [`Machine::new`]. Index 0 is SMT
/// thread 0; leave a slot empty for an idle thread.
pub struct ProgramSet(pub Vec<[Program; 2]>);

impl ProgramSet {
    pub fn empty(cores: usize) -> Self {
        ProgramSet((0..cores).map(|_| [Vec::new(), Vec::new()]).collect())
    }

    pub fn set(&mut self, core: usize, thread: usize, program: Program) -> &mut Self {
        self.0[core][thread] = program;
        self
    }
}

const GATE_UNITS: usize = 2;

fn unit_index(u: GateUnit) -> usize {
    match u {
        GateUnit::Avx256 => 0,
        GateUnit::Avx512 => 1,
    }
}

pub struct Machine {
    pub cfg: MachineConfig,
    cdyn: [f64; NUM_CLASSES],
    hys_ns: u64,
    close_ns: u64,
    detect_factor: u64,
    min_run: u64,

    now_cycle: u64,
    now_ns: u64,
    in_cycle_event: bool,
    freq_mhz: u32,
    epoch_cycle: u64,
    epoch_ns: u64,
    preferred_mhz: u32,
    freq_change_pending: bool,

    seq: u64,
    cyc_heap: BinaryHeap<Reverse<CycEvent>>,
    ns_heap: BinaryHeap<Reverse<NsEvent>>,

    pub cores: Vec<Core>,
    pub pmu: Pmu,
    /// One shared regulator, or one per core under the LDO mitigation.
    pub vrs: Vec<Vr>,
    active: Vec<bool>,
    noise_events: Vec<NoiseEvent>,

    pub episodes: Vec<ThrottleEpisode>,
    /// Admitted domain voltage target over time (ns, mV).
    pub target_trace: Vec<(u64, f64)>,
    /// Regulator settle points over time (ns, mV).
    pub settle_trace: Vec<(u64, f64)>,
    /// Frequency switches over time (ns, MHz).
    pub freq_trace: Vec<(u64, u32)>,
    pub max_icc_a: f64,
    pub max_vcc_mv: f64,
    /// True while every sampled operating point respected both limits.
    pub limits_ok: bool,
    pub total_wake_stall_ns: u64,
}

const VOLT_EPS: f64 = 1e-9;

impl Machine {
    pub fn new(cfg: &MachineConfig, programs: ProgramSet) -> SimResult<Machine> {
        cfg.validate()?;
        if programs.0.len() != cfg.cores {
            return Err(SimError::Config(format!(
                "program set covers {} cores, machine has {}",
                programs.0.len(),
                cfg.cores
            )));
        }
        let cdyn = cfg.cdyn_table();
        let pmu = Pmu::new(cfg.cores, cfg.secure_mode);
        let active: Vec<bool> = programs
            .0
            .iter()
            .map(|p| p.iter().any(|prog| !prog.is_empty()))
            .collect();
        if !cfg.smt {
            for (c, p) in programs.0.iter().enumerate() {
                if !p[1].is_empty() {
                    return Err(SimError::Config(format!(
                        "core {c} thread 1 has a program but smt = false"
                    )));
                }
            }
        }

        // Admit the initial operating point (secure mode may demote the
        // preferred frequency because every core starts fully licensed).
        let levels: Vec<usize> = pmu.granted.clone();
        let (f0, v0) = pmu::enforce_limits(cfg, &cdyn, &levels, &active, cfg.freq_mhz)?;

        let kind = cfg.effective_vr_kind();
        let slew = cfg.slew_for(kind);
        let vrs: Vec<Vr> = match kind {
            VrKind::PerCoreLdo => (0..cfg.cores)
                .map(|c| {
                    let v = pmu::per_core_target_mv(cfg, &cdyn, levels[c], f0);
                    Vr::new(kind, slew, v)
                })
                .collect(),
            _ => vec![Vr::new(kind, slew, v0)],
        };

        let cores = programs
            .0
            .into_iter()
            .map(|[p0, p1]| Core {
                threads: vec![Thread::new(p0), Thread::new(p1)],
                gate_active: false,
                phi_mask: 0,
                gates: [PowerGate::new(); GATE_UNITS],
            })
            .collect();

        let mut m = Machine {
            cfg: cfg.clone(),
            cdyn,
            hys_ns: cfg.hysteresis_ns(),
            close_ns: cfg.gate_close_ns(),
            detect_factor: cfg.throttle_detect_factor,
            min_run: cfg.throttle_min_run_iters,
            now_cycle: 0,
            now_ns: 0,
            in_cycle_event: true,
            freq_mhz: f0,
            epoch_cycle: 0,
            epoch_ns: 0,
            preferred_mhz: cfg.freq_mhz,
            freq_change_pending: false,
            seq: 0,
            cyc_heap: BinaryHeap::new(),
            ns_heap: BinaryHeap::new(),
            cores,
            pmu,
            vrs,
            active,
            noise_events: Vec::new(),
            episodes: Vec::new(),
            target_trace: vec![(0, v0)],
            settle_trace: Vec::new(),
            freq_trace: vec![(0, f0)],
            max_icc_a: 0.0,
            max_vcc_mv: 0.0,
            limits_ok: true,
            total_wake_stall_ns: 0,
        };
        m.record_limits_sample();
        for c in 0..m.cores.len() {
            for t in 0..2 {
                m.enter_phase(c, t, 0)?;
            }
        }
        Ok(m)
    }

    /// Register pre-generated noise events before running.
    pub fn add_noise(&mut self, events: Vec<NoiseEvent>) {
        for (i, ev) in events.iter().enumerate() {
            self.push_ns(ev.at_ns, NsKind::Noise { idx: i });
        }
        self.noise_events = events;
    }

    // ---- exact clock mapping ----

    pub fn cycle_to_ns(&self, cycle: u64) -> u64 {
        debug_assert!(cycle >= self.epoch_cycle);
        let d = (cycle - self.epoch_cycle) as u128;
        self.epoch_ns + (d * 1000 / self.freq_mhz as u128) as u64
    }

    /// Smallest cycle whose boundary time is ≥ `ns`.
    pub fn ns_to_cycle_ceil(&self, ns: u64) -> u64 {
        if ns <= self.epoch_ns {
            return self.epoch_cycle;
        }
        let d = (ns - self.epoch_ns) as u128;
        let m = self.freq_mhz as u128;
        self.epoch_cycle + ((d * m).div_ceil(1000)) as u64
    }

    pub fn freq_mhz(&self) -> u32 {
        self.freq_mhz
    }

    pub fn now_cycle(&self) -> u64 {
        self.now_cycle
    }

    pub fn now_ns(&self) -> u64 {
        self.now_ns
    }

    /// The timestamp counter: a shared monotonic cycle count, deliberately
    /// unaffected by throttling.
    pub fn read_tsc(&self, _core: usize, _thread: usize) -> u64 {
        self.now_cycle
    }

    fn next_boundary_cycle(&self) -> u64 {
        if self.in_cycle_event {
            self.now_cycle + 1
        } else {
            self.ns_to_cycle_ceil(self.now_ns)
        }
    }

    fn push_cyc(&mut self, cycle: u64, kind: CycKind) {
        self.seq += 1;
        self.cyc_heap.push(Reverse(CycEvent {
            cycle,
            seq: self.seq,
            kind,
        }));
    }

    fn push_ns(&mut self, ns: u64, kind: NsKind) {
        self.seq += 1;
        self.ns_heap.push(Reverse(NsEvent {
            ns,
            seq: self.seq,
            kind,
        }));
    }

    // ---- event loop ----

    /// Process every event up to and including `limit_cycle`.
    pub fn run(&mut self, limit_cycle: u64) -> SimResult<()> {
        loop {
            let next_cyc = self.cyc_heap.peek().map(|Reverse(e)| e.cycle);
            let next_ns = self.ns_heap.peek().map(|Reverse(e)| e.ns);
            let pop_ns = match (next_cyc, next_ns) {
                (None, None) => break,
                (Some(_), None) => false,
                (None, Some(_)) => true,
                // Nanosecond events win ties so physical effects (releases,
                // settles) are visible to the cycle that starts at the same
                // instant.
                (Some(c), Some(n)) => self.cycle_to_ns(c) >= n,
            };
            if pop_ns {
                let Reverse(ev) = self.ns_heap.pop().expect("peeked");
                if self.ns_to_cycle_ceil(ev.ns) > limit_cycle {
                    self.ns_heap.push(Reverse(ev));
                    break;
                }
                self.now_ns = self.now_ns.max(ev.ns);
                self.in_cycle_event = false;
                self.dispatch_ns(ev)?;
            } else {
                let Reverse(ev) = self.cyc_heap.pop().expect("peeked");
                if ev.cycle > limit_cycle {
                    self.cyc_heap.push(Reverse(ev));
                    break;
                }
                self.now_cycle = ev.cycle;
                self.now_ns = self.now_ns.max(self.cycle_to_ns(ev.cycle));
                self.in_cycle_event = true;
                self.dispatch_cyc(ev)?;
            }
        }
        Ok(())
    }

    pub fn all_done(&self) -> bool {
        self.cores
            .iter()
            .all(|c| c.threads.iter().all(|t| t.is_done()))
    }

    /// Run until every thread finished and the event queues drained, with a
    /// hard cycle budget as a deadlock backstop.
    pub fn run_to_completion(&mut self, limit_cycle: u64) -> SimResult<()> {
        self.run(limit_cycle)?;
        if !self.all_done() {
            return Err(SimError::Model(format!(
                "threads still busy at the {limit_cycle}-cycle budget"
            )));
        }
        Ok(())
    }

    fn dispatch_cyc(&mut self, ev: CycEvent) -> SimResult<()> {
        match ev.kind {
            CycKind::PhaseEnd { core, thread, gen } => self.on_phase_end(core, thread, gen),
            CycKind::StallEnd { core, thread, gen } => self.on_stall_end(core, thread, gen),
            CycKind::GateOn { core } => {
                if self.pmu.throttling[core] && !self.cores[core].gate_active {
                    self.cores[core].gate_active = true;
                    self.rejig_core(core, self.now_cycle)?;
                }
                Ok(())
            }
            CycKind::FreqSet => self.on_freq_set(),
        }
    }

    fn dispatch_ns(&mut self, ev: NsEvent) -> SimResult<()> {
        match ev.kind {
            NsKind::VrDue { vr } => self.on_vr_due(vr),
            NsKind::HysCheck { core } => self.tick_hysteresis(core),
            NsKind::Noise { idx } => self.on_noise(idx),
        }
    }

    // ---- thread/program machinery ----

    fn enter_phase(&mut self, c: usize, t: usize, at_cycle: u64) -> SimResult<()> {
        loop {
            let at_ns = self.cycle_to_ns(at_cycle);
            let th = &mut self.cores[c].threads[t];
            th.gen += 1;
            th.wait_target_ns = None;
            let Some(phase) = th.program.get(th.pc).cloned() else {
                th.state = ThreadState::Done;
                th.done_cycle = Some(at_cycle);
                return Ok(());
            };
            match phase {
                Phase::Run { class, iters } | Phase::MeasureTp { class, iters } => {
                    let measuring = matches!(phase, Phase::MeasureTp { .. });
                    th.state = ThreadState::Running(class);
                    th.iters_left = iters;
                    th.measuring = measuring;
                    if measuring {
                        th.blocks.clear();
                        th.measure_entry_cycle = at_cycle;
                        th.measure_wake_ns = 0;
                    }
                    self.issue_phi(c, t, class, at_cycle)?;
                    let th = &mut self.cores[c].threads[t];
                    if th.stall_until_ns > at_ns {
                        let due = th.stall_until_ns;
                        let gen = th.gen;
                        let cyc = self.ns_to_cycle_ceil(due);
                        self.push_cyc(
                            cyc,
                            CycKind::StallEnd {
                                core: c,
                                thread: t,
                                gen,
                            },
                        );
                    } else {
                        self.open_segment(c, t, at_cycle);
                    }
                    return Ok(());
                }
                Phase::WaitCycles(n) => {
                    if n == 0 {
                        th.pc += 1;
                        continue;
                    }
                    th.state = ThreadState::Waiting;
                    let gen = th.gen;
                    self.push_cyc(
                        at_cycle + n,
                        CycKind::PhaseEnd {
                            core: c,
                            thread: t,
                            gen,
                        },
                    );
                    return Ok(());
                }
                Phase::WaitUntilNs(ns) => {
                    let due = self.ns_to_cycle_ceil(ns);
                    let th = &mut self.cores[c].threads[t];
                    if due <= at_cycle {
                        th.pc += 1;
                        continue;
                    }
                    th.state = ThreadState::Waiting;
                    th.wait_target_ns = Some(ns);
                    let gen = th.gen;
                    self.push_cyc(
                        due,
                        CycKind::PhaseEnd {
                            core: c,
                            thread: t,
                            gen,
                        },
                    );
                    return Ok(());
                }
                Phase::SyncEpoch { epoch_cycles } => {
                    assert!(epoch_cycles > 0, "epoch length must be positive");
                    let target = at_cycle.div_ceil(epoch_cycles) * epoch_cycles;
                    if target <= at_cycle {
                        th.pc += 1;
                        continue;
                    }
                    th.state = ThreadState::Waiting;
                    let gen = th.gen;
                    self.push_cyc(
                        target,
                        CycKind::PhaseEnd {
                            core: c,
                            thread: t,
                            gen,
                        },
                    );
                    return Ok(());
                }
            }
        }
    }

    /// Whether thread `t` of core `c` retires under the 1-of-4 pattern.
    fn thread_gated(&self, c: usize, t: usize, class: InstructionClass) -> bool {
        let core = &self.cores[c];
        if !core.gate_active {
            return false;
        }
        if self.cfg.improved_throttling {
            core.phi_mask & (1 << t) != 0 && class.is_phi()
        } else {
            true
        }
    }

    fn open_segment(&mut self, c: usize, t: usize, at_cycle: u64) {
        let class = match self.cores[c].threads[t].state {
            ThreadState::Running(cl) => cl,
            _ => unreachable!("segment on a non-running thread"),
        };
        let gated = self.thread_gated(c, t, class);
        let at_ns = self.cycle_to_ns(at_cycle);
        if let Some(u) = class.unit() {
            self.cores[c].gates[unit_index(u)].touch(at_ns);
        }
        let th = &mut self.cores[c].threads[t];
        debug_assert!(th.iters_left > 0);
        th.seg_open = true;
        th.seg_start = at_cycle;
        th.seg_throttled = gated;
        th.gen += 1;
        let end = kth_retire_cycle(at_cycle, th.iters_left - 1, gated) + 1;
        let gen = th.gen;
        self.push_cyc(
            end,
            CycKind::PhaseEnd {
                core: c,
                thread: t,
                gen,
            },
        );
    }

    /// Close the open segment of (c, t) at `end_cycle` (exclusive),
    /// crediting every retirement it contained in closed form. Advances to
    /// the next phase if this completed the current one.
    fn close_segment(&mut self, c: usize, t: usize, end_cycle: u64) -> SimResult<()> {
        let (start, thr, class) = {
            let th = &self.cores[c].threads[t];
            if !th.seg_open {
                return Ok(());
            }
            let class = match th.state {
                ThreadState::Running(cl) => cl,
                _ => unreachable!("open segment on non-running thread"),
            };
            (th.seg_start, th.seg_throttled, class)
        };
        let n = count_retire_slots(start, end_cycle, thr).min(self.cores[c].threads[t].iters_left);
        let mut last_ns = 0;
        if n > 0 {
            let first = kth_retire_cycle(start, 0, thr);
            let last = kth_retire_cycle(start, n - 1, thr);
            last_ns = self.cycle_to_ns(last);
            let stride = if thr { 4 } else { 1 };
            let th = &mut self.cores[c].threads[t];
            th.retired_uops += n * class.base_ipc();
            if th.measuring {
                th.blocks.push(Block {
                    first_retire_cycle: first,
                    iters: n,
                    stride,
                });
            }
            th.iters_left -= n;
            // Execution bookkeeping: hysteresis timestamps and gate usage.
            let lvl = class.level();
            let prev = self.pmu.last_exec_ns[c][lvl];
            self.pmu.last_exec_ns[c][lvl] = Some(prev.map_or(last_ns, |p| p.max(last_ns)));
            if let Some(u) = class.unit() {
                self.cores[c].gates[unit_index(u)].touch(last_ns);
            }
        }
        let th = &mut self.cores[c].threads[t];
        th.seg_open = false;
        th.gen += 1;
        let finished = th.iters_left == 0;
        let stalled = th.stall_until_ns > self.now_ns;
        if finished {
            if th.measuring {
                let blocks = std::mem::take(&mut th.blocks);
                let (tp, slow) =
                    detect_tp(&blocks, th.measure_entry_cycle, self.detect_factor, self.min_run);
                let rec = MeasureRecord {
                    tp_cycles: tp,
                    start_cycle: th.measure_entry_cycle,
                    end_cycle,
                    iters: blocks.iter().map(|b| b.iters).sum(),
                    throttled_iters: slow,
                    wake_stall_ns: th.measure_wake_ns,
                    blocks,
                };
                th.measures.push(rec);
                th.measuring = false;
            }
            th.pc += 1;
            if stalled {
                th.advance_at_stall_end = true;
            } else {
                self.enter_phase(c, t, end_cycle)?;
            }
        }
        if n > 0 && class.is_phi() && !self.pmu.secure {
            self.push_ns(last_ns + self.hys_ns, NsKind::HysCheck { core: c });
        }
        Ok(())
    }

    /// Re-split a running thread's segment after a gating change at
    /// `at_cycle`.
    fn rejig_thread(&mut self, c: usize, t: usize, at_cycle: u64) -> SimResult<()> {
        if self.cores[c].threads[t].seg_open {
            self.close_segment(c, t, at_cycle)?;
            let th = &self.cores[c].threads[t];
            if matches!(th.state, ThreadState::Running(_)) && !th.seg_open && th.iters_left > 0 {
                self.open_segment(c, t, at_cycle);
            }
        }
        Ok(())
    }

    fn rejig_core(&mut self, c: usize, at_cycle: u64) -> SimResult<()> {
        for t in 0..2 {
            self.rejig_thread(c, t, at_cycle)?;
        }
        Ok(())
    }

    /// Force the front-end gate of a core on or off at the current cycle,
    /// bypassing PMU policy (testing/demo hook).
    pub fn set_throttle(&mut self, core: usize, active: bool) -> SimResult<()> {
        if self.cores[core].gate_active != active {
            self.cores[core].gate_active = active;
            self.rejig_core(core, self.now_cycle)?;
        }
        Ok(())
    }

    fn on_phase_end(&mut self, c: usize, t: usize, gen: u32) -> SimResult<()> {
        let th = &self.cores[c].threads[t];
        if th.gen != gen {
            return Ok(());
        }
        match th.state {
            ThreadState::Running(_) => {
                debug_assert!(th.seg_open);
                self.close_segment(c, t, self.now_cycle)
            }
            ThreadState::Waiting => {
                // Re-verify: wall-clock waits may have been recomputed under
                // a different frequency, and stalls extend waits.
                let now_ns = self.now_ns;
                let th = &self.cores[c].threads[t];
                let resume_ns = th.wait_target_ns.unwrap_or(0).max(th.stall_until_ns);
                if resume_ns > now_ns {
                    let cyc = self.ns_to_cycle_ceil(resume_ns);
                    self.push_cyc(
                        cyc,
                        CycKind::PhaseEnd {
                            core: c,
                            thread: t,
                            gen,
                        },
                    );
                    return Ok(());
                }
                let th = &mut self.cores[c].threads[t];
                th.pc += 1;
                self.enter_phase(c, t, self.now_cycle)
            }
            ThreadState::Done => Ok(()),
        }
    }

    fn on_stall_end(&mut self, c: usize, t: usize, gen: u32) -> SimResult<()> {
        let th = &self.cores[c].threads[t];
        if th.gen != gen {
            return Ok(());
        }
        if th.stall_until_ns > self.now_ns {
            let due = th.stall_until_ns;
            let cyc = self.ns_to_cycle_ceil(due);
            self.push_cyc(
                cyc,
                CycKind::StallEnd {
                    core: c,
                    thread: t,
                    gen,
                },
            );
            return Ok(());
        }
        let th = &mut self.cores[c].threads[t];
        if th.advance_at_stall_end {
            th.advance_at_stall_end = false;
            return self.enter_phase(c, t, self.now_cycle);
        }
        if matches!(th.state, ThreadState::Running(_)) && !th.seg_open && th.iters_left > 0 {
            self.open_segment(c, t, self.now_cycle);
        }
        Ok(())
    }

    // ---- PMU and power delivery ----

    /// First issue attempt of a phase: wake the unit's power gate if needed
    /// and raise a licensing request for unlicensed wide ops. Both effects
    /// start immediately and run concurrently.
    fn issue_phi(
        &mut self,
        c: usize,
        t: usize,
        class: InstructionClass,
        at_cycle: u64,
    ) -> SimResult<()> {
        let at_ns = self.cycle_to_ns(at_cycle);
        if let Some(u) = class.unit() {
            let wake = self.cfg.wake_ns;
            let close = self.close_ns;
            let ready = self.cores[c].gates[unit_index(u)].powergate_wake(at_ns, wake, close);
            if ready > at_ns {
                let stall = ready - at_ns;
                self.total_wake_stall_ns += stall;
                let th = &mut self.cores[c].threads[t];
                th.stall_until_ns = th.stall_until_ns.max(ready);
                if th.measuring {
                    th.measure_wake_ns += stall;
                }
            }
        }
        if !self.pmu.secure && class.level() > self.pmu.granted[c] {
            self.on_phi_request(c, t, class, at_cycle)?;
        }
        Ok(())
    }

    fn on_phi_request(
        &mut self,
        c: usize,
        t: usize,
        class: InstructionClass,
        at_cycle: u64,
    ) -> SimResult<()> {
        self.pmu.demanded[c] = self.pmu.demanded[c].max(class.level());
        self.cores[c].phi_mask |= 1 << t;
        if !self.pmu.throttling[c] {
            self.pmu.throttling[c] = true;
            self.episodes.push(ThrottleEpisode {
                core: c,
                on_ns: self.cycle_to_ns(at_cycle),
                on_cycle: at_cycle + 1,
                off_ns: None,
                off_cycle: None,
            });
            self.push_cyc(at_cycle + 1, CycKind::GateOn { core: c });
        }
        self.pmu_recompute()
    }

    /// Weight level each core's guardband must currently cover.
    fn window_levels(&self) -> Vec<usize> {
        (0..self.cores.len())
            .map(|c| {
                let open = self.cores[c]
                    .threads
                    .iter()
                    .filter_map(|t| match t.state {
                        ThreadState::Running(cl) if cl.is_phi() => Some(cl.level()),
                        _ => None,
                    })
                    .max();
                self.pmu.window_level(c, self.now_ns, self.hys_ns, open)
            })
            .collect()
    }

    /// Recompute the admitted operating point and drive the regulator(s)
    /// toward it. Called on licensing requests, hysteresis expiries, and
    /// frequency switches.
    fn pmu_recompute(&mut self) -> SimResult<()> {
        let levels = self.window_levels();
        let (f_adm, v_t) =
            pmu::enforce_limits(&self.cfg, &self.cdyn, &levels, &self.active, self.preferred_mhz)?;
        if f_adm != self.freq_mhz {
            if !self.freq_change_pending {
                self.freq_change_pending = true;
                let b = self.next_boundary_cycle();
                self.push_cyc(b, CycKind::FreqSet);
            }
            self.record_limits_sample();
            return Ok(());
        }
        self.request_voltage(&levels, v_t);
        self.try_release()?;
        self.record_limits_sample();
        Ok(())
    }

    fn request_voltage(&mut self, levels: &[usize], v_domain: f64) {
        match self.cfg.effective_vr_kind() {
            VrKind::PerCoreLdo => {
                for (c, &lvl) in levels.iter().enumerate() {
                    let v_c = pmu::per_core_target_mv(&self.cfg, &self.cdyn, lvl, self.freq_mhz);
                    let ack = self.vrs[c].vr_request(self.now_ns, v_c);
                    if let RequestAck::Started { end_ns, .. } = ack {
                        self.push_ns(end_ns, NsKind::VrDue { vr: c });
                    }
                }
            }
            _ => {
                let ack = self.vrs[0].vr_request(self.now_ns, v_domain);
                if let RequestAck::Started { end_ns, .. } = ack {
                    self.push_ns(end_ns, NsKind::VrDue { vr: 0 });
                }
            }
        }
        if self
            .target_trace
            .last()
            .is_none_or(|&(_, v)| (v - v_domain).abs() > VOLT_EPS)
        {
            self.target_trace.push((self.now_ns, v_domain));
        }
    }

    fn on_vr_due(&mut self, vr: usize) -> SimResult<()> {
        let done = self.vrs[vr].vr_step(self.now_ns);
        if done.is_empty() {
            return Ok(());
        }
        for tr in &done {
            self.settle_trace.push((tr.end_ns, tr.to_mv));
        }
        if let Some(inflight) = self.vrs[vr].inflight() {
            let end = inflight.end_ns;
            self.push_ns(end, NsKind::VrDue { vr });
        }
        self.try_release()?;
        self.record_limits_sample();
        Ok(())
    }

    /// Release every throttled core whose requirement the regulator output
    /// now covers, provided the post-release operating point stays inside
    /// both electrical limits (a grant must never itself break a limit).
    fn try_release(&mut self) -> SimResult<()> {
        if self.pmu.secure || !self.pmu.throttling.iter().any(|&b| b) {
            return Ok(());
        }
        let levels = self.window_levels();
        match self.cfg.effective_vr_kind() {
            VrKind::PerCoreLdo => {
                for c in 0..self.cores.len() {
                    if !self.pmu.throttling[c] {
                        continue;
                    }
                    let req =
                        pmu::per_core_target_mv(&self.cfg, &self.cdyn, levels[c], self.freq_mhz);
                    let v = self.vrs[c].voltage_at(self.now_ns);
                    if v + VOLT_EPS < req || v > self.cfg.vcc_max_mv + VOLT_EPS {
                        continue;
                    }
                    let mut post = self.pmu.granted.clone();
                    post[c] = post[c].max(self.pmu.demanded[c]);
                    if self.ldo_icc_now(&post) > self.cfg.icc_max_a + VOLT_EPS {
                        continue;
                    }
                    self.release_core(c)?;
                }
            }
            _ => {
                let req =
                    pmu::domain_target_mv(&self.cfg, &self.cdyn, &levels, &self.active, self.freq_mhz);
                let v = self.vrs[0].voltage_at(self.now_ns);
                if v + VOLT_EPS < req || v > self.cfg.vcc_max_mv + VOLT_EPS {
                    return Ok(());
                }
                let post: Vec<usize> = (0..self.cores.len())
                    .map(|c| self.pmu.granted[c].max(self.pmu.demanded[c]))
                    .collect();
                let icc =
                    pmu::icc_estimate(&self.cfg, &self.cdyn, &post, &self.active, v, self.freq_mhz);
                if icc > self.cfg.icc_max_a + VOLT_EPS {
                    return Ok(());
                }
                for c in 0..self.cores.len() {
                    if self.pmu.throttling[c] {
                        self.release_core(c)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn release_core(&mut self, c: usize) -> SimResult<()> {
        self.pmu.granted[c] = self.pmu.granted[c].max(self.pmu.demanded[c]);
        self.pmu.demanded[c] = 0;
        self.pmu.throttling[c] = false;
        let boundary = self.ns_to_cycle_ceil(self.now_ns);
        if let Some(ep) = self
            .episodes
            .iter_mut()
            .rev()
            .find(|e| e.core == c && e.off_ns.is_none())
        {
            ep.off_ns = Some(self.now_ns);
            ep.off_cycle = Some(boundary);
        }
        self.cores[c].phi_mask = 0;
        if self.cores[c].gate_active {
            self.cores[c].gate_active = false;
            self.rejig_core(c, boundary)?;
        }
        Ok(())
    }

    /// Hysteresis expiry check for one core: if every class above the
    /// current window level has gone cold, step the grant down to the
    /// window level and re-admit the operating point (step-downs never
    /// throttle anyone).
    pub fn tick_hysteresis(&mut self, c: usize) -> SimResult<()> {
        if self.pmu.secure {
            return Ok(());
        }
        let w = self.window_levels()[c];
        if w < self.pmu.granted[c] {
            self.pmu.granted[c] = w;
            self.pmu_recompute()?;
        }
        // Re-arm at the next potential expiry among still-warm classes.
        let mut next: Option<u64> = None;
        for lvl in 1..=self.pmu.granted[c] {
            if let Some(ts) = self.pmu.last_exec_ns[c][lvl] {
                let e = ts + self.hys_ns;
                if e > self.now_ns {
                    next = Some(next.map_or(e, |n: u64| n.min(e)));
                }
            }
        }
        if let Some(e) = next {
            self.push_ns(e, NsKind::HysCheck { core: c });
        }
        Ok(())
    }

    fn on_freq_set(&mut self) -> SimResult<()> {
        self.freq_change_pending = false;
        let levels = self.window_levels();
        let (f_adm, v_t) =
            pmu::enforce_limits(&self.cfg, &self.cdyn, &levels, &self.active, self.preferred_mhz)?;
        if f_adm != self.freq_mhz {
            // Re-anchor the exact cycle↔ns mapping at this boundary.
            self.epoch_ns = self.cycle_to_ns(self.now_cycle);
            self.epoch_cycle = self.now_cycle;
            self.freq_mhz = f_adm;
            self.freq_trace.push((self.epoch_ns, f_adm));
        }
        self.request_voltage(&levels, v_t);
        self.try_release()?;
        self.record_limits_sample();
        Ok(())
    }

    fn on_noise(&mut self, idx: usize) -> SimResult<()> {
        let ev = self.noise_events[idx];
        let (c, t) = (ev.core, ev.thread);
        if c >= self.cores.len() || t >= 2 {
            return Ok(());
        }
        let end = ev.at_ns + ev.latency_ns;
        let x = self.ns_to_cycle_ceil(ev.at_ns);
        // Closing may complete the phase and immediately open the next
        // one's segment; close that fresh zero-iteration segment too so the
        // stall applies to it.
        for _ in 0..2 {
            let th = &self.cores[c].threads[t];
            if matches!(th.state, ThreadState::Running(_)) && th.seg_open {
                self.close_segment(c, t, x)?;
            } else {
                break;
            }
        }
        let th = &mut self.cores[c].threads[t];
        if th.state == ThreadState::Done {
            return Ok(());
        }
        th.stall_until_ns = th.stall_until_ns.max(end);
        if matches!(th.state, ThreadState::Running(_)) || th.advance_at_stall_end {
            let due = th.stall_until_ns;
            let gen = th.gen;
            let cyc = self.ns_to_cycle_ceil(due);
            self.push_cyc(
                cyc,
                CycKind::StallEnd {
                    core: c,
                    thread: t,
                    gen,
                },
            );
        }
        Ok(())
    }

    fn ldo_icc_now(&self, levels: &[usize]) -> f64 {
        let f_ghz = self.freq_mhz as f64 / 1000.0;
        let mut icc = self.cfg.icc_lkg_a;
        for (c, &lvl) in levels.iter().enumerate() {
            if self.active[c] {
                let v = self.vrs[c].voltage_at(self.now_ns);
                icc += pdn::icc_dynamic(self.cdyn[lvl], v, f_ghz, self.cfg.k_icc);
            }
        }
        icc
    }

    /// Sample the operating point for the limits invariant. Current is
    /// estimated from *granted* levels — what cores may actually execute —
    /// at the regulator's present output voltage.
    fn record_limits_sample(&mut self) {
        let (v, icc) = match self.cfg.effective_vr_kind() {
            VrKind::PerCoreLdo => {
                let v = (0..self.cores.len())
                    .map(|c| self.vrs[c].voltage_at(self.now_ns))
                    .fold(0.0f64, f64::max);
                (v, self.ldo_icc_now(&self.pmu.granted))
            }
            _ => {
                let v = self.vrs[0].voltage_at(self.now_ns);
                let icc = pmu::icc_estimate(
                    &self.cfg,
                    &self.cdyn,
                    &self.pmu.granted,
                    &self.active,
                    v,
                    self.freq_mhz,
                );
                (v, icc)
            }
        };
        self.max_vcc_mv = self.max_vcc_mv.max(v);
        self.max_icc_a = self.max_icc_a.max(icc);
        if v > self.cfg.vcc_max_mv + VOLT_EPS || icc > self.cfg.icc_max_a + VOLT_EPS {
            self.limits_ok = false;
        }
    }

    /// Completed throttle episodes for one core, oldest first.
    pub fn episodes_for(&self, core: usize) -> Vec<ThrottleEpisode> {
        self.episodes
            .iter()
            .filter(|e| e.core == core && e.off_ns.is_some())
            .copied()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::MicroCore;
    use proptest::prelude::*;

    fn one_core_cfg() -> MachineConfig {
        MachineConfig {
            cores: 1,
            limits_active_cores: 1,
            ..MachineConfig::default()
        }
    }

    fn run_done(m: &mut Machine) {
        m.run_to_completion(200_000_000).unwrap();
    }

    #[test]
    fn scalar_program_runs_unthrottled() {
        let cfg = one_core_cfg();
        let mut ps = ProgramSet::empty(1);
        ps.set(
            0,
            0,
            vec![Phase::Run {
                class: InstructionClass::Scalar64b,
                iters: 100,
            }],
        );
        let mut m = Machine::new(&cfg, ps).unwrap();
        run_done(&mut m);
        let th = &m.cores[0].threads[0];
        assert_eq!(th.retired_uops, 200);
        assert_eq!(th.done_cycle, Some(100));
        assert!(m.episodes.is_empty());
        assert!(m.vrs[0].completed.is_empty());
    }

    #[test]
    fn unthrottled_measure_reports_zero_tp() {
        let cfg = one_core_cfg();
        let mut ps = ProgramSet::empty(1);
        ps.set(
            0,
            0,
            vec![Phase::MeasureTp {
                class: InstructionClass::Scalar64b,
                iters: 500,
            }],
        );
        let mut m = Machine::new(&cfg, ps).unwrap();
        run_done(&mut m);
        let rec = &m.cores[0].threads[0].measures[0];
        assert_eq!(rec.tp_cycles, 0);
        assert_eq!(rec.iters, 500);
        assert_eq!(rec.end_cycle - rec.start_cycle, 500);
        assert_eq!(rec.wake_stall_ns, 0);
    }

    #[test]
    fn heavy_256_ramp_matches_the_analytic_transition_time() {
        // Mobile part at 1.4 GHz: one core stepping scalar → heavy 256-bit.
        let cfg = one_core_cfg();
        let mut ps = ProgramSet::empty(1);
        ps.set(
            0,
            0,
            vec![Phase::MeasureTp {
                class: InstructionClass::L256bHeavy,
                iters: 4000,
            }],
        );
        let mut m = Machine::new(&cfg, ps).unwrap();
        run_done(&mut m);
        let delta = (1.6736 - 1.0) * 790.0 * 1.4 * 2.0 * 0.004;
        let expect_ns = pdn::transition_ns(delta, cfg.slew_mbvr_mv_per_us);
        let eps = m.episodes_for(0);
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].duration_ns(), Some(expect_ns));
        // Detector view: the measured period covers the ramp, in cycles.
        let rec = &m.cores[0].threads[0].measures[0];
        let tp_ns_approx = rec.tp_cycles as f64 * 1000.0 / 1400.0;
        assert!((tp_ns_approx - expect_ns as f64).abs() < 20.0);
        // The power-gate wake contributed exactly the configured latency.
        assert_eq!(rec.wake_stall_ns, cfg.wake_ns);
        assert!(rec.throttled_iters > 100);
    }

    #[test]
    fn guardband_resets_after_hysteresis_and_ramps_again() {
        let cfg = one_core_cfg();
        let gap_cycles = 1400 * 800; // 800 µs at 1.4 GHz
        let mut ps = ProgramSet::empty(1);
        ps.set(
            0,
            0,
            vec![
                Phase::Run {
                    class: InstructionClass::L256bHeavy,
                    iters: 3000,
                },
                Phase::WaitCycles(gap_cycles),
                Phase::Run {
                    class: InstructionClass::L256bHeavy,
                    iters: 100,
                },
            ],
        );
        let mut m = Machine::new(&cfg, ps).unwrap();
        run_done(&mut m);
        let ups: Vec<_> = m.vrs[0]
            .completed
            .iter()
            .filter(|t| t.to_mv > t.from_mv)
            .collect();
        let downs: Vec<_> = m.vrs[0]
            .completed
            .iter()
            .filter(|t| t.to_mv < t.from_mv)
            .collect();
        assert_eq!(ups.len(), 2, "second burst must ramp from baseline again");
        assert_eq!(downs.len(), 2);
        assert!((ups[0].to_mv - ups[0].from_mv - (ups[1].to_mv - ups[1].from_mv)).abs() < 1e-9);
        assert_eq!(m.episodes_for(0).len(), 2);
    }

    #[test]
    fn secure_mode_never_throttles_or_ramps() {
        let mut cfg = one_core_cfg();
        cfg.secure_mode = true;
        let mut ps = ProgramSet::empty(1);
        ps.set(
            0,
            0,
            vec![Phase::MeasureTp {
                class: InstructionClass::L512bHeavy,
                iters: 2000,
            }],
        );
        let mut m = Machine::new(&cfg, ps).unwrap();
        run_done(&mut m);
        assert!(m.episodes.is_empty());
        assert!(m.vrs[0].completed.is_empty());
        let rec = &m.cores[0].threads[0].measures[0];
        assert_eq!(rec.tp_cycles, 0);
        // The wake still happens — power gates are orthogonal to licensing.
        assert_eq!(rec.wake_stall_ns, cfg.wake_ns);
    }

    #[test]
    fn per_thread_throttling_spares_the_scalar_sibling() {
        let mut cfg = one_core_cfg();
        cfg.improved_throttling = true;
        let mut ps = ProgramSet::empty(1);
        ps.set(
            0,
            0,
            vec![Phase::Run {
                class: InstructionClass::L256bHeavy,
                iters: 4000,
            }],
        );
        ps.set(
            0,
            1,
            vec![Phase::MeasureTp {
                class: InstructionClass::Scalar64b,
                iters: 9000,
            }],
        );
        let mut m = Machine::new(&cfg, ps).unwrap();
        run_done(&mut m);
        // The offender was throttled...
        assert_eq!(m.episodes_for(0).len(), 1);
        // ...but the scalar sibling never saw a slow iteration.
        let rec = &m.cores[0].threads[1].measures[0];
        assert_eq!(rec.tp_cycles, 0);
        assert_eq!(rec.throttled_iters, 0);
    }

    #[test]
    fn whole_core_throttling_gates_both_smt_threads() {
        let cfg = one_core_cfg();
        let mut ps = ProgramSet::empty(1);
        ps.set(
            0,
            0,
            vec![Phase::Run {
                class: InstructionClass::L256bHeavy,
                iters: 4000,
            }],
        );
        ps.set(
            0,
            1,
            vec![Phase::MeasureTp {
                class: InstructionClass::Scalar64b,
                iters: 9000,
            }],
        );
        let mut m = Machine::new(&cfg, ps).unwrap();
        run_done(&mut m);
        let ep = m.episodes_for(0)[0];
        let rec = &m.cores[0].threads[1].measures[0];
        assert!(rec.tp_cycles > 0);
        // Every sibling retirement inside the episode is on a 1-of-4 slot.
        for b in &rec.blocks {
            if b.first_retire_cycle >= ep.on_cycle
                && b.last_retire_cycle() < ep.off_cycle.unwrap()
            {
                assert_eq!(b.stride, 4);
                assert_eq!(b.first_retire_cycle % 4, 0);
            }
        }
    }

    #[test]
    fn ldo_cores_ramp_independently() {
        let cfg = MachineConfig {
            per_core_vr: true,
            ..Default::default()
        };
        let mut ps = ProgramSet::empty(2);
        ps.set(
            0,
            0,
            vec![Phase::Run {
                class: InstructionClass::L256bHeavy,
                iters: 2000,
            }],
        );
        ps.set(
            1,
            0,
            vec![Phase::Run {
                class: InstructionClass::L256bHeavy,
                iters: 2000,
            }],
        );
        let mut m = Machine::new(&cfg, ps).unwrap();
        run_done(&mut m);
        // Each core saw its own (fast) transition; neither queued behind
        // the other, and episodes are sub-microsecond.
        assert_eq!(m.vrs[0].completed.iter().filter(|t| t.to_mv > t.from_mv).count(), 1);
        assert_eq!(m.vrs[1].completed.iter().filter(|t| t.to_mv > t.from_mv).count(), 1);
        for c in 0..2 {
            let ep = m.episodes_for(c);
            assert_eq!(ep.len(), 1);
            assert!(ep[0].duration_ns().unwrap() < 500);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn batched_engine_matches_reference_core(
            seed_phases in proptest::collection::vec(
                (0usize..4, 1u64..120, 0u64..12), 1..6),
            sibling_phases in proptest::collection::vec(
                (0usize..4, 1u64..120, 0u64..12), 0..6),
        ) {
            // Classes without power gates so wakes don't shift alignment:
            // the reference core has no nanosecond timeline.
            let classes = [
                InstructionClass::Scalar64b,
                InstructionClass::L128bLight,
                InstructionClass::L128bHeavy,
                InstructionClass::Scalar64b,
            ];
            let build = |spec: &[(usize, u64, u64)]| {
                let mut p = Vec::new();
                for &(ci, iters, wait) in spec {
                    if wait > 0 {
                        p.push(Phase::WaitCycles(wait));
                    }
                    p.push(Phase::MeasureTp { class: classes[ci], iters });
                }
                p
            };
            let p0 = build(&seed_phases);
            let p1 = build(&sibling_phases);

            let cfg = one_core_cfg();
            let mut ps = ProgramSet::empty(1);
            ps.set(0, 0, p0.clone());
            ps.set(0, 1, p1.clone());
            let mut m = Machine::new(&cfg, ps).unwrap();
            m.run_to_completion(50_000_000).unwrap();

            // Replay with the naive core, driving the gate from the
            // machine's episode log.
            let mut flips: Vec<(u64, bool)> = Vec::new();
            for e in m.episodes_for(0) {
                flips.push((e.on_cycle, true));
                flips.push((e.off_cycle.unwrap(), false));
            }
            flips.sort();
            let mut mc = MicroCore::new(p0, p1);
            let mut fi = 0;
            while !mc.all_done() {
                while fi < flips.len() && flips[fi].0 == mc.cycle {
                    mc.gate_active = flips[fi].1;
                    fi += 1;
                }
                mc.step_cycle();
            }
            for t in 0..2 {
                let batched: Vec<u64> = m.cores[0].threads[t]
                    .measures
                    .iter()
                    .flat_map(|r| r.blocks.iter())
                    .flat_map(|b| (0..b.iters).map(move |k| b.first_retire_cycle + k * b.stride))
                    .collect();
                prop_assert_eq!(&batched, &mc.threads[t].retires,
                    "thread {} retirement timelines diverge", t);
                prop_assert_eq!(m.cores[0].threads[t].retired_uops,
                    mc.threads[t].retired_uops);
            }
        }
    }
}
