//! Synthetic acoustic scene generator.
//!
//! Produces microphone / far-end / reference triplets for near-end
//! single-talk, far-end single-talk and double-talk scenarios with a
//! controlled echo path (delay, memoryless nonlinearity, exponential-decay
//! impulse response, optional band-limit) and exact SER/SNR scaling.
//!
//! Conventions, since these fix what the numbers mean:
//! * SER and SNR are measured over 10 ms frames where the reference
//!   signal's envelope exceeds -40 dBFS (near-end speech for NST/DT, the
//!   echo itself for FST). Scaling happens after every linear stage, so
//!   the realized ratios match the request to float precision.
//! * The band-limit applies to every microphone-side component (near
//!   speech, echo, noise), matching a receive chain that low-passes the
//!   whole mic signal; the far-end reference stays wideband.
//! * The mic is stored as `(s + e) + v` evaluated in that order, so
//!   `x == s + e + v` holds bit-exactly when recomputed the same way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::stft::{analyze, synthesize, StftConfig};
use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 16000;
/// Envelope threshold for "active" frames: -40 dBFS.
const ACTIVE_RMS: f64 = 0.01;
/// Envelope frame length: 10 ms.
const ENVELOPE_FRAME: usize = 160;

/// Talk activity pattern of the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    NearSingleTalk,
    FarSingleTalk,
    DoubleTalk,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nst" => Ok(Self::NearSingleTalk),
            "fst" => Ok(Self::FarSingleTalk),
            "dt" => Ok(Self::DoubleTalk),
            other => Err(Error::Config(format!(
                "scenario: unknown value {other:?} (expected nst|fst|dt)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NearSingleTalk => "nst",
            Self::FarSingleTalk => "fst",
            Self::DoubleTalk => "dt",
        }
    }
}

/// Memoryless loudspeaker distortion applied to the delayed far-end signal
/// before the room response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Nonlinearity {
    None,
    /// Symmetric clipping at `threshold`.
    HardClip { threshold: f64 },
    /// Scaled logistic saturation `2/(1+exp(-gain*v)) - 1`.
    Sigmoid { gain: f64 },
}

impl Nonlinearity {
    fn apply(&self, v: f64) -> f64 {
        match *self {
            Nonlinearity::None => v,
            Nonlinearity::HardClip { threshold } => v.clamp(-threshold, threshold),
            Nonlinearity::Sigmoid { gain } => 2.0 / (1.0 + (-gain * v).exp()) - 1.0,
        }
    }
}

/// Full description of one synthetic scene. The seed determines the noise
/// realization; sources are passed in separately.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub scenario: Scenario,
    pub ser_db: f64,
    pub snr_db: f64,
    pub delay_ms: f64,
    pub rir: Vec<f64>,
    pub nonlinearity: Nonlinearity,
    pub bandlimit_hz: Option<f64>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(-20.0..=20.0).contains(&self.ser_db) {
            return Err(Error::InvalidInput(format!(
                "ser_db: {} outside [-20, 20]",
                self.ser_db
            )));
        }
        if !(-5.0..=30.0).contains(&self.snr_db) {
            return Err(Error::InvalidInput(format!(
                "snr_db: {} outside [-5, 30]",
                self.snr_db
            )));
        }
        if !(0.0..=1500.0).contains(&self.delay_ms) {
            return Err(Error::InvalidInput(format!(
                "delay_ms: {} outside [0, 1500]",
                self.delay_ms
            )));
        }
        if self.rir.is_empty() || self.rir.len() > 4096 {
            return Err(Error::InvalidInput(format!(
                "rir: length {} outside [1, 4096]",
                self.rir.len()
            )));
        }
        Ok(())
    }
}

/// Generated scene: the mic mixture and the individual components
/// (`mic == near_ref + echo_ref + noise_ref` sample-wise).
#[derive(Debug, Clone)]
pub struct SceneOutput {
    pub mic: Vec<f64>,
    pub far_end: Vec<f64>,
    pub near_ref: Vec<f64>,
    pub echo_ref: Vec<f64>,
    pub noise_ref: Vec<f64>,
}

/// Indices of 10 ms frames whose RMS exceeds -40 dBFS.
fn active_frames(signal: &[f64]) -> Vec<usize> {
    signal
        .chunks(ENVELOPE_FRAME)
        .enumerate()
        .filter(|(_, chunk)| {
            let p: f64 = chunk.iter().map(|v| v * v).sum();
            (p / chunk.len() as f64).sqrt() > ACTIVE_RMS
        })
        .map(|(i, _)| i)
        .collect()
}

/// Mean power of `signal` over the given 10 ms frame indices.
fn power_over_frames(signal: &[f64], frames: &[usize]) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for &f in frames {
        let start = f * ENVELOPE_FRAME;
        let end = (start + ENVELOPE_FRAME).min(signal.len());
        for &v in &signal[start..end] {
            acc += v * v;
        }
        count += end - start;
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

/// Direct-form convolution truncated to the input length.
pub fn convolve_truncated(signal: &[f64], taps: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; signal.len()];
    for (j, &h) in taps.iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        for i in j..signal.len() {
            out[i] += h * signal[i - j];
        }
    }
    out
}

/// Zeroes STFT bins strictly above `cutoff_hz` and resynthesizes. The
/// signal is padded on both sides so the reconstruction covers the full
/// length without edge ramps.
pub fn bandlimit(signal: &[f64], cutoff_hz: f64, stft: &StftConfig) -> Result<Vec<f64>> {
    let n = stft.window_len;
    let mut padded = vec![0.0; n];
    padded.extend_from_slice(signal);
    padded.extend(std::iter::repeat_n(0.0, 2 * n));
    let mut frames = analyze(&padded, stft)?;
    let bin_hz = stft.sample_rate as f64 / stft.fft_size as f64;
    for frame in &mut frames {
        for (k, bin) in frame.bins.iter_mut().enumerate() {
            if k as f64 * bin_hz > cutoff_hz {
                *bin = num_complex::Complex::new(0.0, 0.0);
            }
        }
    }
    let recon = synthesize(&frames, stft)?;
    Ok(recon[n..n + signal.len()].to_vec())
}

/// Builds the scene. `src_near` and `src_far` must be at least 3 s long;
/// the output length is the shorter of the two.
pub fn generate(spec: &SceneSpec, src_near: &[f64], src_far: &[f64]) -> Result<SceneOutput> {
    spec.validate()?;
    let min_len = 3 * SAMPLE_RATE as usize;
    if src_near.len() < min_len || src_far.len() < min_len {
        return Err(Error::InvalidInput(format!(
            "sources must be >= 3 s ({} samples), got {} and {}",
            min_len,
            src_near.len(),
            src_far.len()
        )));
    }
    let len = src_near.len().min(src_far.len());
    let far_end = src_far[..len].to_vec();
    let stft = StftConfig::default();

    // Echo chain: delay -> nonlinearity -> room response -> band-limit.
    let delay = (spec.delay_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize;
    let mut echo = vec![0.0; len];
    if spec.scenario != Scenario::NearSingleTalk {
        let mut driven = vec![0.0; len];
        for i in delay..len {
            driven[i] = spec.nonlinearity.apply(far_end[i - delay]);
        }
        echo = convolve_truncated(&driven, &spec.rir);
    }

    let mut near = if spec.scenario == Scenario::FarSingleTalk {
        vec![0.0; len]
    } else {
        src_near[..len].to_vec()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0f64..1.0)).collect();

    if let Some(cutoff) = spec.bandlimit_hz {
        near = bandlimit(&near, cutoff, &stft)?;
        echo = bandlimit(&echo, cutoff, &stft)?;
        noise = bandlimit(&noise, cutoff, &stft)?;
    }

    // Reference activity: near speech for NST/DT, the echo itself for FST.
    let reference_frames = if spec.scenario == Scenario::FarSingleTalk {
        active_frames(&echo)
    } else {
        active_frames(&near)
    };
    if reference_frames.is_empty() {
        return Err(Error::InvalidInput(
            "reference signal has no active segments above -40 dBFS".into(),
        ));
    }
    let p_ref = if spec.scenario == Scenario::FarSingleTalk {
        power_over_frames(&echo, &reference_frames)
    } else {
        power_over_frames(&near, &reference_frames)
    };

    // Scale the echo to the requested SER (double-talk only; FST keeps the
    // raw echo level, NST has none).
    if spec.scenario == Scenario::DoubleTalk {
        let p_echo = power_over_frames(&echo, &reference_frames);
        if p_echo > 0.0 {
            let scale = (p_ref / (p_echo * 10f64.powf(spec.ser_db / 10.0))).sqrt();
            for v in &mut echo {
                *v *= scale;
            }
        }
    }

    // Scale the noise to the requested SNR against the reference power.
    let p_noise = power_over_frames(&noise, &reference_frames);
    if p_noise > 0.0 {
        let scale = (p_ref / (p_noise * 10f64.powf(spec.snr_db / 10.0))).sqrt();
        for v in &mut noise {
            *v *= scale;
        }
    }

    let mic: Vec<f64> =
        (0..len).map(|i| (near[i] + echo[i]) + noise[i]).collect();
    Ok(SceneOutput { mic, far_end, near_ref: near, echo_ref: echo, noise_ref: noise })
}

/// Measures the realized SER of a scene over the stored convention
/// (near-active frames). Returns `None` when a component is silent.
pub fn measure_ser_db(out: &SceneOutput) -> Option<f64> {
    let frames = active_frames(&out.near_ref);
    let p_s = power_over_frames(&out.near_ref, &frames);
    let p_e = power_over_frames(&out.echo_ref, &frames);
    if p_s > 0.0 && p_e > 0.0 {
        Some(10.0 * (p_s / p_e).log10())
    } else {
        None
    }
}

/// Measures the realized SNR (reference activity convention as in
/// [`generate`]).
pub fn measure_snr_db(out: &SceneOutput, scenario: Scenario) -> Option<f64> {
    let reference =
        if scenario == Scenario::FarSingleTalk { &out.echo_ref } else { &out.near_ref };
    let frames = active_frames(reference);
    let p_ref = power_over_frames(reference, &frames);
    let p_v = power_over_frames(&out.noise_ref, &frames);
    if p_ref > 0.0 && p_v > 0.0 {
        Some(10.0 * (p_ref / p_v).log10())
    } else {
        None
    }
}

/// Speech-shaped test signal: band-shaped noise under a syllabic envelope
/// with hard pauses. Bursts last 0.5-1.2 s and every pause is at least
/// 0.2 s, so any 3 s stretch contains a full pause. Deterministic per seed.
pub fn synthetic_speech(seed: u64, duration_secs: f64) -> Result<Vec<f64>> {
    if duration_secs < 1.0 {
        return Err(Error::InvalidInput(format!(
            "duration: {duration_secs} s is below the 1 s minimum"
        )));
    }
    let n = (duration_secs * SAMPLE_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0f64; n];
    let mut pos = 0usize;
    // Two-pole lowpass state shapes the white excitation toward a rough
    // speech spectrum.
    let (mut lp1, mut lp2) = (0.0f64, 0.0f64);
    while pos < n {
        let burst_len = (rng.random_range(0.5..1.2) * SAMPLE_RATE as f64) as usize;
        let pause_len = (rng.random_range(0.2..0.45) * SAMPLE_RATE as f64) as usize;
        let amp = rng.random_range(0.5..1.0);
        let syllable_hz = rng.random_range(2.5..5.0);
        let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
        let end = (pos + burst_len).min(n);
        for (j, slot) in out[pos..end].iter_mut().enumerate() {
            let white = rng.random_range(-1.0f64..1.0);
            lp1 += 0.25 * (white - lp1);
            lp2 += 0.25 * (lp1 - lp2);
            let t = j as f64 / SAMPLE_RATE as f64;
            let envelope =
                0.55 + 0.45 * (std::f64::consts::TAU * syllable_hz * t + phase0).sin();
            *slot = amp * envelope * lp2;
        }
        pos = end + pause_len;
    }
    // Normalize to a fixed overall RMS so levels are comparable across
    // seeds. Pauses stay exactly zero.
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        let scale = 0.1 / rms;
        for v in &mut out {
            *v *= scale;
        }
    }
    Ok(out)
}

/// Exponential-decay impulse response: unit direct tap followed by a white
/// tail decaying 60 dB over `t60_ms`. Deterministic per seed.
pub fn exponential_rir(seed: u64, t60_ms: f64, len: usize) -> Vec<f64> {
    let len = len.clamp(1, 4096);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t60_samples = t60_ms * SAMPLE_RATE as f64 / 1000.0;
    let mut rir = vec![0.0; len];
    rir[0] = 1.0;
    for (i, tap) in rir.iter_mut().enumerate().skip(1) {
        let decay = (-6.907755278982137 * i as f64 / t60_samples).exp();
        *tap = 0.35 * decay * rng.random_range(-1.0f64..1.0);
    }
    rir
}
