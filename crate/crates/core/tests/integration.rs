//! Cross-module runs that exercise the public API the way the CLI does.

use aenr_core::kalman::KalmanAec;
use aenr_core::kalman::KalmanConfig;
use aenr_core::metrics::{erle, si_sdr, Segment};
use aenr_core::model::{Model, ModelConfig, WeightSource};
use aenr_core::pipeline::{Pipeline, PipelineConfig, Stage};
use aenr_core::scene::{
    convolve_truncated, exponential_rir, synthetic_speech, Scenario,
};

/// The canceller on a converged linear far-end-single-talk scene clears
/// 25 dB of echo over the converged span.
#[test]
fn converged_kf_erle_over_fst_segments() {
    let far = synthetic_speech(33, 10.0).unwrap();
    let rir = exponential_rir(9, 100.0, 1600);
    let mic = convolve_truncated(&far, &rir);
    let mut kf = KalmanAec::new(KalmanConfig::default()).unwrap();
    let (_, residual) = kf.process_signal(&mic, &far).unwrap();
    // Converged region: seconds 5..10, all far-end single talk.
    let segs = [Segment::new(5 * 16000..residual.len(), Scenario::FarSingleTalk)];
    let value = erle(&mic[..residual.len()], &residual, &segs).unwrap();
    assert!(value >= 25.0, "converged ERLE {value} dB");
}

/// Near-end single talk passes an identity-configured chain with high
/// fidelity: with no echo the error equals the mic and SI-SDR against the
/// clean near end is bounded by the scene noise, not the canceller.
#[test]
fn nst_scene_error_signal_tracks_mic() {
    let near = synthetic_speech(71, 5.0).unwrap();
    let mic = near.clone();
    let far = vec![0.0; near.len()];
    let pipeline =
        Pipeline::new(PipelineConfig::default(), WeightSource::Random { seed: 4 }).unwrap();
    let out = pipeline.process(&mic, &far, Stage::KfOnly).unwrap();
    // Fully-overlapped interior: skip the analysis/synthesis ramps.
    let n = out.enhanced.len();
    let (a, b) = (512, n - 512);
    let v = si_sdr(&near[a..b], &out.enhanced[a..b]).unwrap();
    assert!(v >= 100.0, "kf-only on echo-free input must be transparent, got {v} dB");
}

/// Weight files survive a disk round trip and rebuild the same model.
#[test]
fn weight_store_file_round_trip() {
    let cfg = ModelConfig::default();
    let model = Model::build(&cfg, WeightSource::Random { seed: 77 }).unwrap();
    let dir = std::env::temp_dir().join(format!("aenr_ws_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("weights.aulc");
    model.to_store().save(&path).unwrap();
    let loaded = aenr_core::model::WeightStore::load(&path).unwrap();
    let rebuilt = Model::build(&cfg, WeightSource::Store(loaded)).unwrap();
    assert_eq!(model.checksum(), rebuilt.checksum());
}
