//! Power-delivery model: load-line droop, dynamic-current estimation,
//! voltage guardbands, and a serialized voltage-regulator transition queue.
//!
//! All voltages are in millivolts, currents in amperes, resistances in
//! milliohms, frequencies in gigahertz, and times in integer nanoseconds.
//! With those units `1 A` across `1 mΩ` drops exactly `1 mV`, so the
//! load-line needs no unit conversion.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Voltage seen by the load behind a resistive load-line.
///
/// `vcc_mv` is the regulator set point, `icc_a` the instantaneous current,
/// `r_ll_mohm` the load-line resistance.
pub fn load_voltage(vcc_mv: f64, icc_a: f64, r_ll_mohm: f64) -> f64 {
    vcc_mv - icc_a * r_ll_mohm
}

/// Dynamic current drawn by one hardware context running instructions of
/// activity weight `cdyn` at `vcc_mv` / `f_ghz`. `k_icc` converts
/// weight × mV × GHz into amperes.
pub fn icc_dynamic(cdyn: f64, vcc_mv: f64, f_ghz: f64, k_icc: f64) -> f64 {
    cdyn * vcc_mv * f_ghz * k_icc
}

/// Extra supply voltage needed so that the load voltage stays constant when
/// a core moves from activity weight `cdyn_from` to `cdyn_to`.
///
/// The droop increase is ΔIcc·R_LL with ΔIcc evaluated at the pre-step
/// operating voltage `vcc1_mv`; the regulator must add exactly that much.
pub fn guardband_delta(
    cdyn_from: f64,
    cdyn_to: f64,
    vcc1_mv: f64,
    f_ghz: f64,
    r_ll_mohm: f64,
    k_icc: f64,
) -> f64 {
    (cdyn_to - cdyn_from) * vcc1_mv * f_ghz * r_ll_mohm * k_icc
}

/// Where a voltage regulator lives, which determines its slew rate and
/// whether cores share it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VrKind {
    /// Motherboard regulator shared by the whole core domain (slowest).
    SharedMotherboard,
    /// On-package integrated regulator shared by the core domain.
    Integrated,
    /// One low-dropout regulator per core (fastest, private per core).
    PerCoreLdo,
}

/// One voltage transition executed by a regulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub id: u64,
    pub from_mv: f64,
    pub to_mv: f64,
    /// When the regulator began slewing.
    pub start_ns: u64,
    /// When the output settles at `to_mv`.
    pub end_ns: u64,
    /// When the request was enqueued (≤ `start_ns` if it had to wait).
    pub requested_ns: u64,
}

/// Outcome of [`Vr::vr_request`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RequestAck {
    /// The target already matches the end of the transition chain.
    Noop,
    /// The regulator was idle; the transition is now in flight.
    Started { id: u64, end_ns: u64 },
    /// A transition is in flight; this one will start when the queue drains.
    Enqueued { id: u64 },
}

#[derive(Clone, Debug)]
struct PendingReq {
    id: u64,
    target_mv: f64,
    requested_ns: u64,
}

/// A voltage regulator with a finite slew rate and a strictly serialized
/// transition queue: at most one transition is in flight, later requests
/// wait, and a queued step-down is dropped when a later request asks for a
/// voltage above it (the higher requirement subsumes the lower one).
#[derive(Clone, Debug)]
pub struct Vr {
    pub kind: VrKind,
    slew_mv_per_us: f64,
    settled_mv: f64,
    inflight: Option<Transition>,
    pending: VecDeque<PendingReq>,
    next_id: u64,
    /// Finished transitions, in completion order.
    pub completed: Vec<Transition>,
}

/// Comparisons between f64 voltage targets use this tolerance.
const VOLT_EPS: f64 = 1e-9;

/// Time to slew `delta_mv` at `slew_mv_per_us`, rounded up to whole ns.
pub fn transition_ns(delta_mv: f64, slew_mv_per_us: f64) -> u64 {
    (delta_mv.abs() * 1000.0 / slew_mv_per_us).ceil() as u64
}

impl Vr {
    pub fn new(kind: VrKind, slew_mv_per_us: f64, initial_mv: f64) -> Self {
        assert!(slew_mv_per_us > 0.0, "slew rate must be positive");
        Vr {
            kind,
            slew_mv_per_us,
            settled_mv: initial_mv,
            inflight: None,
            pending: VecDeque::new(),
            next_id: 0,
            completed: Vec::new(),
        }
    }

    pub fn slew_mv_per_us(&self) -> f64 {
        self.slew_mv_per_us
    }

    /// Voltage the output will sit at once every queued transition finishes.
    pub fn final_target_mv(&self) -> f64 {
        if let Some(last) = self.pending.back() {
            last.target_mv
        } else if let Some(t) = &self.inflight {
            t.to_mv
        } else {
            self.settled_mv
        }
    }

    pub fn is_idle(&self) -> bool {
        self.inflight.is_none() && self.pending.is_empty()
    }

    /// The in-flight transition, if any.
    pub fn inflight(&self) -> Option<&Transition> {
        self.inflight.as_ref()
    }

    /// Output voltage at time `ns`. Between events the output ramps linearly
    /// toward the in-flight target; callers must have advanced the queue past
    /// any transition that ended before `ns` (see [`Vr::vr_step`]).
    pub fn voltage_at(&self, ns: u64) -> f64 {
        match &self.inflight {
            Some(t) if ns >= t.start_ns => {
                let ramped = self.slew_mv_per_us * (ns - t.start_ns) as f64 / 1000.0;
                if t.to_mv >= t.from_mv {
                    (t.from_mv + ramped).min(t.to_mv)
                } else {
                    (t.from_mv - ramped).max(t.to_mv)
                }
            }
            _ => self.settled_mv,
        }
    }

    /// Ask the regulator to move to `target_mv`. Requests are served in
    /// arrival order; an in-flight transition is never preempted. Queued
    /// step-downs below `target_mv` are superseded (removed) because the new
    /// request proves the higher voltage is still needed.
    pub fn vr_request(&mut self, now_ns: u64, target_mv: f64) -> RequestAck {
        // Drop queued step-downs that the new request subsumes. Walk from the
        // back: a pending entry is a step-down if it is below its predecessor
        // in the chain, where the predecessor is the chain value just before
        // it (in-flight target or settled voltage if the queue empties).
        while let Some(last) = self.pending.back() {
            let pred = if self.pending.len() >= 2 {
                self.pending[self.pending.len() - 2].target_mv
            } else if let Some(t) = &self.inflight {
                t.to_mv
            } else {
                self.settled_mv
            };
            if last.target_mv < pred - VOLT_EPS && target_mv > last.target_mv + VOLT_EPS {
                self.pending.pop_back();
            } else {
                break;
            }
        }

        if (target_mv - self.final_target_mv()).abs() <= VOLT_EPS {
            return RequestAck::Noop;
        }

        let id = self.next_id;
        self.next_id += 1;
        self.pending.push_back(PendingReq {
            id,
            target_mv,
            requested_ns: now_ns,
        });
        if self.inflight.is_none() {
            self.start_next(now_ns);
            let t = self.inflight.as_ref().expect("transition just started");
            RequestAck::Started {
                id: t.id,
                end_ns: t.end_ns,
            }
        } else {
            RequestAck::Enqueued { id }
        }
    }

    fn start_next(&mut self, now_ns: u64) {
        debug_assert!(self.inflight.is_none());
        if let Some(req) = self.pending.pop_front() {
            let dur = transition_ns(req.target_mv - self.settled_mv, self.slew_mv_per_us);
            self.inflight = Some(Transition {
                id: req.id,
                from_mv: self.settled_mv,
                to_mv: req.target_mv,
                start_ns: now_ns,
                end_ns: now_ns + dur,
                requested_ns: req.requested_ns,
            });
        }
    }

    /// Advance the queue to `now_ns`: retire every transition that has
    /// settled, chaining the next queued one at the exact completion time.
    /// Returns the transitions completed by this call, in order.
    pub fn vr_step(&mut self, now_ns: u64) -> Vec<Transition> {
        let mut done = Vec::new();
        while let Some(t) = &self.inflight {
            if t.end_ns > now_ns {
                break;
            }
            let t = self.inflight.take().expect("checked above");
            self.settled_mv = t.to_mv;
            let chain_at = t.end_ns;
            self.completed.push(t.clone());
            done.push(t);
            self.start_next(chain_at);
        }
        done
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn load_voltage_known_points() {
        assert_eq!(load_voltage(1000.0, 0.0, 2.0), 1000.0);
        assert_eq!(load_voltage(1270.0, 100.0, 2.0), 1070.0);
        assert!((load_voltage(1150.0, 29.0, 1.6) - 1103.6).abs() < 1e-12);
    }

    #[test]
    fn guardband_matches_droop_delta() {
        // Stepping 1.0 → 1.6736 at 750 mV / 2 GHz / 2 mΩ / k = 0.004.
        let g = guardband_delta(1.0, 1.6736, 750.0, 2.0, 2.0, 0.004);
        let droop_before = icc_dynamic(1.0, 750.0, 2.0, 0.004) * 2.0;
        let droop_after = icc_dynamic(1.6736, 750.0, 2.0, 0.004) * 2.0;
        assert!((g - (droop_after - droop_before)).abs() < 1e-12);
    }

    #[test]
    fn idle_request_ramps_at_slew_rate() {
        // 800 → 810 mV at 1 mV/µs settles exactly 10 µs later.
        let mut vr = Vr::new(VrKind::SharedMotherboard, 1.0, 800.0);
        match vr.vr_request(0, 810.0) {
            RequestAck::Started { end_ns, .. } => assert_eq!(end_ns, 10_000),
            other => panic!("expected immediate start, got {other:?}"),
        }
        assert_eq!(vr.voltage_at(5_000), 805.0);
        let done = vr.vr_step(10_000);
        assert_eq!(done.len(), 1);
        assert_eq!(vr.voltage_at(10_000), 810.0);
        assert!(vr.is_idle());
    }

    #[test]
    fn busy_request_waits_for_queue() {
        // A transition with 10 µs left plus a queued 8 µs step: the second
        // request settles 18 µs after the first started.
        let mut vr = Vr::new(VrKind::SharedMotherboard, 1.0, 800.0);
        assert!(matches!(vr.vr_request(0, 810.0), RequestAck::Started { .. }));
        assert!(matches!(
            vr.vr_request(0, 818.0),
            RequestAck::Enqueued { .. }
        ));
        let done = vr.vr_step(10_000);
        assert_eq!(done.len(), 1);
        let t = vr.inflight().expect("second transition chained");
        assert_eq!(t.start_ns, 10_000);
        assert_eq!(t.end_ns, 18_000);
        let done = vr.vr_step(18_000);
        assert_eq!(done.len(), 1);
        assert_eq!(vr.final_target_mv(), 818.0);
        assert!(vr.is_idle());
    }

    #[test]
    fn zero_delta_request_is_noop() {
        let mut vr = Vr::new(VrKind::Integrated, 2.0, 900.0);
        assert_eq!(vr.vr_request(123, 900.0), RequestAck::Noop);
        assert!(vr.is_idle());
    }

    #[test]
    fn queued_step_down_superseded_by_later_step_up() {
        let mut vr = Vr::new(VrKind::SharedMotherboard, 1.0, 800.0);
        assert!(matches!(vr.vr_request(0, 850.0), RequestAck::Started { .. }));
        // Queue a step back down, then demand an even higher voltage: the
        // step-down must vanish from the chain.
        assert!(matches!(
            vr.vr_request(1_000, 800.0),
            RequestAck::Enqueued { .. }
        ));
        assert!(matches!(
            vr.vr_request(2_000, 860.0),
            RequestAck::Enqueued { .. }
        ));
        assert_eq!(vr.final_target_mv(), 860.0);
        vr.vr_step(50_000);
        vr.vr_step(60_001);
        assert!(vr.is_idle());
        assert_eq!(vr.voltage_at(60_001), 860.0);
        // Exactly two transitions ran: 800→850 and 850→860.
        assert_eq!(vr.completed.len(), 2);
        assert_eq!(vr.completed[1].from_mv, 850.0);
        assert_eq!(vr.completed[1].to_mv, 860.0);
    }

    #[test]
    fn transition_duration_rounds_up_to_whole_ns() {
        assert_eq!(transition_ns(10.0, 3.0), 3_334);
        assert_eq!(transition_ns(-10.0, 3.0), 3_334);
        assert_eq!(transition_ns(0.0, 3.0), 0);
    }

    proptest! {
        #[test]
        fn load_never_exceeds_supply(vcc in 400.0..1400.0f64, icc in 0.0..120.0f64,
                                     r in 0.1..5.0f64) {
            prop_assert!(load_voltage(vcc, icc, r) <= vcc);
        }

        #[test]
        fn guardband_is_antisymmetric(a in 1.0..2.5f64, b in 1.0..2.5f64,
                                      v in 500.0..1300.0f64, f in 0.4..5.0f64) {
            let fwd = guardband_delta(a, b, v, f, 2.0, 0.004);
            let rev = guardband_delta(b, a, v, f, 2.0, 0.004);
            prop_assert!((fwd + rev).abs() < 1e-9);
        }

        #[test]
        fn guardband_linear_in_weight_delta(a in 1.0..2.0f64, d in 0.0..1.5f64,
                                            v in 500.0..1300.0f64, f in 0.4..5.0f64) {
            let one = guardband_delta(a, a + d, v, f, 2.0, 0.004);
            let two = guardband_delta(a, a + 2.0 * d, v, f, 2.0, 0.004);
            prop_assert!((two - 2.0 * one).abs() < 1e-9);
        }

        #[test]
        fn completed_transitions_never_overlap(
            targets in proptest::collection::vec(600.0..1000.0f64, 1..8),
            times in proptest::collection::vec(0u64..1000, 1..8),
        ) {
            let mut vr = Vr::new(VrKind::Integrated, 1.5, 700.0);
            let mut now = 0u64;
            for (t, dt) in targets.iter().zip(times.iter()) {
                now += dt;
                vr.vr_step(now);
                vr.vr_request(now, *t);
            }
            vr.vr_step(u64::MAX / 2);
            prop_assert!(vr.is_idle());
            for w in vr.completed.windows(2) {
                prop_assert!(w[0].end_ns <= w[1].start_ns);
                // Chained starts are exact: the next transition begins at the
                // previous end when it was already queued.
                prop_assert!(w[1].start_ns >= w[0].end_ns);
            }
            for t in &vr.completed {
                let dur = transition_ns(t.to_mv - t.from_mv, 1.5);
                prop_assert_eq!(t.end_ns - t.start_ns, dur);
                prop_assert!(t.requested_ns <= t.start_ns);
            }
        }

        #[test]
        fn ramp_is_monotone_toward_target(from in 600.0..900.0f64, to in 600.0..900.0f64) {
            let mut vr = Vr::new(VrKind::SharedMotherboard, 0.9, from);
            vr.vr_request(0, to);
            let mut prev = vr.voltage_at(0);
            let end = transition_ns(to - from, 0.9);
            for ns in (0..=end).step_by((end as usize / 16).max(1)) {
                let v = vr.voltage_at(ns);
                if to >= from {
                    prop_assert!(v >= prev - 1e-12);
                    prop_assert!(v <= to + 1e-12);
                } else {
                    prop_assert!(v <= prev + 1e-12);
                    prop_assert!(v >= to - 1e-12);
                }
                prev = v;
            }
        }
    }
}
