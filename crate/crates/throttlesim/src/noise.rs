//! Seeded system-noise generators: interrupts and context switches as
//! Poisson point processes that stall a thread for a latency drawn from a
//! configured range, and a background application that fires wide-vector
//! bursts of random intensity at Poisson times.
//!
//! Generators are pure: they produce event lists or thread programs, and
//! the machine merges them into its own event queue. Noise never touches
//! licensing state directly — interrupts act through lost time, and the
//! application's bursts act through the same licensing path as any other
//! wide-vector code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::core::{Phase, Program};
use crate::covert::SYMBOL_CLASSES;
use crate::harness::config::MachineConfig;

/// What stole the CPU from the target thread.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Interrupt,
    ContextSwitch,
}

/// One externally injected stall: the target thread makes no progress for
/// `latency_ns` starting at `at_ns`, while the timestamp counter keeps
/// advancing.
#[derive(Clone, Copy, Debug)]
pub struct NoiseEvent {
    pub at_ns: u64,
    pub core: usize,
    pub thread: usize,
    pub latency_ns: u64,
    pub kind: NoiseKind,
}

/// Draw Poisson arrivals at `rate_per_s` over `[0, horizon_ns)`, each an
/// interrupt or context switch (equal odds) with latency uniform in the
/// configured range for its kind, targeting one of `targets` uniformly.
/// Deterministic in `seed`; a rate of zero yields no events.
pub fn schedule_events(
    cfg: &MachineConfig,
    rate_per_s: f64,
    horizon_ns: u64,
    targets: &[(usize, usize)],
    seed: u64,
) -> Vec<NoiseEvent> {
    let mut events = Vec::new();
    if rate_per_s <= 0.0 || targets.is_empty() {
        return events;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut t_ns = 0.0f64;
    loop {
        let u: f64 = rng.gen();
        t_ns += -(1.0 - u).ln() / rate_per_s * 1e9;
        if t_ns >= horizon_ns as f64 {
            return events;
        }
        let kind = if rng.gen_bool(0.5) {
            NoiseKind::Interrupt
        } else {
            NoiseKind::ContextSwitch
        };
        let latency_ns = match kind {
            NoiseKind::Interrupt => {
                rng.gen_range(cfg.interrupt_lat_min_ns..=cfg.interrupt_lat_max_ns)
            }
            NoiseKind::ContextSwitch => {
                rng.gen_range(cfg.ctx_switch_lat_min_ns..=cfg.ctx_switch_lat_max_ns)
            }
        };
        let (core, thread) = targets[rng.gen_range(0..targets.len())];
        events.push(NoiseEvent {
            at_ns: t_ns as u64,
            core,
            thread,
            latency_ns,
            kind,
        });
    }
}

/// Every hardware thread of the machine, the default interrupt target set.
pub fn all_hw_threads(cfg: &MachineConfig) -> Vec<(usize, usize)> {
    let tpc = cfg.threads_per_core();
    (0..cfg.cores)
        .flat_map(|c| (0..tpc).map(move |t| (c, t)))
        .collect()
}

/// Build the background application's thread program: wide-vector bursts of
/// `appphi_burst_iters` iterations at Poisson times over `[0, horizon_ns)`,
/// each at a level drawn uniformly from the four signaling classes.
/// Deterministic in `seed`; a rate of zero yields an empty program.
pub fn app_phi_program(
    cfg: &MachineConfig,
    rate_per_s: f64,
    horizon_ns: u64,
    seed: u64,
) -> Program {
    let mut program = Program::new();
    if rate_per_s <= 0.0 {
        return program;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut t_ns = 0.0f64;
    loop {
        let u: f64 = rng.gen();
        t_ns += -(1.0 - u).ln() / rate_per_s * 1e9;
        if t_ns >= horizon_ns as f64 {
            return program;
        }
        let class = SYMBOL_CLASSES[rng.gen_range(0..SYMBOL_CLASSES.len())];
        program.push(Phase::WaitUntilNs(t_ns as u64));
        program.push(Phase::Run {
            class,
            iters: cfg.appphi_burst_iters,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MachineConfig {
        MachineConfig::default()
    }

    #[test]
    fn zero_rate_produces_nothing() {
        let c = cfg();
        assert!(schedule_events(&c, 0.0, 1_000_000_000, &[(0, 0)], 1).is_empty());
        assert!(app_phi_program(&c, 0.0, 1_000_000_000, 1).is_empty());
    }

    #[test]
    fn same_seed_reproduces_the_event_list() {
        let c = cfg();
        let targets = all_hw_threads(&c);
        let a = schedule_events(&c, 1500.0, 500_000_000, &targets, 42);
        let b = schedule_events(&c, 1500.0, 500_000_000, &targets, 42);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.at_ns, y.at_ns);
            assert_eq!(x.latency_ns, y.latency_ns);
            assert_eq!(x.kind, y.kind);
            assert_eq!((x.core, x.thread), (y.core, y.thread));
        }
        let d = schedule_events(&c, 1500.0, 500_000_000, &targets, 43);
        assert!(a.iter().zip(d.iter()).any(|(x, y)| x.at_ns != y.at_ns));
    }

    #[test]
    fn arrival_counts_match_the_poisson_rate() {
        let c = cfg();
        let targets = all_hw_threads(&c);
        let mut total = 0usize;
        for seed in 0..10 {
            let ev = schedule_events(&c, 1000.0, 1_000_000_000, &targets, seed);
            // Each draw within 4σ of the mean (σ = √1000 ≈ 31.6).
            assert!((874..=1126).contains(&ev.len()), "count {}", ev.len());
            total += ev.len();
        }
        let mean = total as f64 / 10.0;
        assert!((900.0..=1100.0).contains(&mean), "mean {mean}");
    }

    #[test]
    fn events_are_ordered_with_latencies_in_range() {
        let c = cfg();
        let targets = all_hw_threads(&c);
        let ev = schedule_events(&c, 2000.0, 1_000_000_000, &targets, 7);
        let mut saw_int = false;
        let mut saw_ctx = false;
        for w in ev.windows(2) {
            assert!(w[0].at_ns <= w[1].at_ns);
        }
        for e in &ev {
            assert!(e.at_ns < 1_000_000_000);
            match e.kind {
                NoiseKind::Interrupt => {
                    saw_int = true;
                    assert!(
                        (c.interrupt_lat_min_ns..=c.interrupt_lat_max_ns)
                            .contains(&e.latency_ns)
                    );
                }
                NoiseKind::ContextSwitch => {
                    saw_ctx = true;
                    assert!(
                        (c.ctx_switch_lat_min_ns..=c.ctx_switch_lat_max_ns)
                            .contains(&e.latency_ns)
                    );
                }
            }
            assert!(targets.contains(&(e.core, e.thread)));
        }
        assert!(saw_int && saw_ctx);
    }

    #[test]
    fn app_program_is_timed_bursts_of_signal_classes() {
        let c = cfg();
        let p = app_phi_program(&c, 5000.0, 100_000_000, 11);
        assert!(!p.is_empty());
        assert_eq!(p.len() % 2, 0);
        let mut last = 0;
        for pair in p.chunks(2) {
            match (&pair[0], &pair[1]) {
                (Phase::WaitUntilNs(t), Phase::Run { class, iters }) => {
                    assert!(*t >= last);
                    last = *t;
                    assert!(SYMBOL_CLASSES.contains(class));
                    assert_eq!(*iters, c.appphi_burst_iters);
                }
                other => panic!("unexpected phase pair {other:?}"),
            }
        }
    }
}
