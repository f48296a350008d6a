//! Channel-protocol properties exercised through the public library API:
//! calibrate-then-transmit round trips, start-offset tolerance, degenerate
//! decoders, and topology preconditions.

use throttlesim::covert::{
    calibrate_thresholds, random_bits, run_transcript, ChannelKind, TranscriptOptions,
};
use throttlesim::error::SimError;
use throttlesim::harness::config::MachineConfig;

fn repo_config() -> MachineConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mobile.toml");
    MachineConfig::load(&path).expect("mobile config loads")
}

#[test]
fn round_trip_is_error_free_on_every_channel_and_frequency() {
    let cfg = repo_config();
    let bits = random_bits(99, 200);
    for kind in ChannelKind::ALL {
        for &freq in &cfg.channel_freqs_mhz {
            let calib = calibrate_thresholds(&cfg, kind, freq).expect("calibration runs");
            assert!(
                calib.thresholds.ok,
                "{} at {freq} MHz: adjacent levels closer than the decode margin",
                kind.name()
            );
            // The self-probing sender measures the tail of its own ramp, so
            // its readings shrink as the level rises; remote probes grow.
            let means = calib.thresholds.means;
            for w in means.windows(2) {
                if kind == ChannelKind::SameThread {
                    assert!(w[0] > w[1], "{}: means not descending", kind.name());
                } else {
                    assert!(w[0] < w[1], "{}: means not ascending", kind.name());
                }
            }
            let res = run_transcript(
                &cfg,
                kind,
                freq,
                &bits,
                &calib.thresholds,
                &TranscriptOptions::default(),
            )
            .expect("transcript runs");
            assert_eq!(res.bit_errors, 0, "{} at {freq} MHz", kind.name());
            assert_eq!(res.erasures, 0, "{} at {freq} MHz", kind.name());
            assert_eq!(res.ber, 0.0, "{} at {freq} MHz", kind.name());
        }
    }
}

#[test]
fn start_offsets_below_half_an_epoch_are_tolerated() {
    let cfg = repo_config();
    let freq = *cfg.channel_freqs_mhz.iter().max().expect("channel freqs");
    let epoch_cycles = cfg.epoch_us * freq as u64;
    let calib = calibrate_thresholds(&cfg, ChannelKind::CrossSmt, freq).expect("calibration");
    let bits = random_bits(3, 60);
    for sender_off in [0, 4_096, epoch_cycles / 2 - 1] {
        for receiver_off in [0, epoch_cycles / 8, epoch_cycles / 2 - 1] {
            let opts = TranscriptOptions {
                sender_offset_cycles: sender_off,
                receiver_offset_cycles: receiver_off,
                ..Default::default()
            };
            let res = run_transcript(&cfg, ChannelKind::CrossSmt, freq, &bits, &calib.thresholds, &opts)
                .expect("transcript runs");
            assert_eq!(
                res.bit_errors, 0,
                "offsets {sender_off}/{receiver_off} cycles broke the epoch barrier"
            );
            assert_eq!(res.erasures, 0);
        }
    }
}

#[test]
fn pinned_guardband_yields_flat_samples_and_chance_decoding() {
    let mut cfg = repo_config();
    cfg.secure_mode = true;
    let freq = *cfg.channel_freqs_mhz.iter().max().expect("channel freqs");
    let calib = calibrate_thresholds(&cfg, ChannelKind::CrossSmt, freq).expect("calibration");
    assert!(!calib.thresholds.ok, "flat levels must be flagged unusable");
    assert_eq!(calib.tp_variance, 0.0, "pinned guardband must remove all timing variance");
    assert!(calib.samples.iter().all(|s| s.iter().all(|&t| t == 0)));

    let bits = random_bits(11, 200);
    let res = run_transcript(
        &cfg,
        ChannelKind::CrossSmt,
        freq,
        &bits,
        &calib.thresholds,
        &TranscriptOptions::default(),
    )
    .expect("transcript runs");
    assert!(
        (0.35..=0.65).contains(&res.ber),
        "constant decoder should score chance BER, got {}",
        res.ber
    );
}

#[test]
fn cross_core_channel_requires_a_second_core() {
    let mut cfg = repo_config();
    cfg.cores = 1;
    cfg.limits_active_cores = 1;
    let freq = cfg.channel_freqs_mhz[0];
    let err = calibrate_thresholds(&cfg, ChannelKind::CrossCore, freq).unwrap_err();
    assert!(
        matches!(err, SimError::Config(_)),
        "expected a configuration error, got {err:?}"
    );
}
