//! Input preprocessing: power-law magnitude compression and channel-wise
//! subband feature reorientation.
//!
//! Reorientation rearranges the per-frame magnitude spectrum into a
//! channels x features layout. Two modes share one interface:
//!
//! * [`ReorientMode::Sampled`] assigns subband `b` to channel `b % gamma`
//!   (strided interleave). Every channel then mixes low and high
//!   frequencies, so a band-limited input still excites all channels.
//! * [`ReorientMode::Subband`] assigns subband `b` to channel
//!   `b / (B/gamma)` (contiguous grouping). A band-limited input leaves
//!   whole channels at zero, which is the failure mode the sampled mode
//!   exists to avoid.
//!
//! With the default zero overlap both modes are pure permutations of the
//! zero-padded spectrum, so they preserve values and energy exactly and
//! invert bit-exactly.

use crate::stft::ComplexSpectrumFrame;
use crate::tensor::LatentTensor;
use crate::{Error, Result};

/// Default power-law compression exponent.
pub const DEFAULT_ALPHA: f64 = 0.3;

/// Power-law compressed view of one spectrum frame: `|bin|^alpha` plus the
/// unmodified phase.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedFeatures {
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
}

/// Compresses bin magnitudes with exponent `alpha` in (0, 1], keeping phase.
pub fn compress(frame: &ComplexSpectrumFrame, alpha: f64) -> Result<CompressedFeatures> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("features.alpha: {alpha} not in (0, 1]")));
    }
    let mut magnitude = Vec::with_capacity(frame.bins.len());
    let mut phase = Vec::with_capacity(frame.bins.len());
    for b in &frame.bins {
        magnitude.push(b.norm().powf(alpha));
        phase.push(b.im.atan2(b.re));
    }
    Ok(CompressedFeatures { magnitude, phase })
}

/// Inverse of the magnitude compression.
pub fn decompress_magnitude(mag: f64, alpha: f64) -> f64 {
    mag.powf(1.0 / alpha)
}

/// Which grouping rule maps subbands to channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReorientMode {
    /// Strided interleave: subband `b` goes to channel `b % gamma`.
    Sampled,
    /// Contiguous grouping: subband `b` goes to channel `b / (B/gamma)`.
    Subband,
}

impl ReorientMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(Self::Sampled),
            "subband" => Ok(Self::Subband),
            other => Err(Error::Config(format!(
                "layout.mode: unknown mode {other:?} (expected sampled|subband)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sampled => "sampled",
            Self::Subband => "subband",
        }
    }
}

/// Frozen description of one reorientation: subband geometry plus the
/// resolved output-to-input index map.
///
/// `gather[flat]` is the padded-input index feeding output position `flat`,
/// where `flat = channel * (B/gamma * K_B) + position * K_B + offset`.
/// For zero overlap this map is a bijection on `[0, padded_len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReorientLayout {
    /// Bins per subband (K_B).
    pub subband_size: usize,
    /// Overlap factor in [0, 1). Zero means disjoint subbands.
    pub overlap: f64,
    /// Total subband count (B), always a multiple of `sampling_factor`.
    pub subband_count: usize,
    /// Channel count (gamma).
    pub sampling_factor: usize,
    /// Output features total, `B * K_B`.
    pub padded_len: usize,
    /// Padded input length the gather map reads from.
    pub input_len: usize,
    /// Spectrum bins the layout was built for (zero-padded up to `input_len`).
    pub num_bins: usize,
    pub mode: ReorientMode,
    gather: Vec<usize>,
}

impl ReorientLayout {
    /// Builds a layout for `num_bins` spectrum bins. Subbands start every
    /// `round(K_B * (1 - overlap))` bins; the subband count is rounded up
    /// to a multiple of `gamma` and the input is zero-padded at the top of
    /// the spectrum to cover it.
    pub fn new(
        num_bins: usize,
        subband_size: usize,
        overlap: f64,
        gamma: usize,
        mode: ReorientMode,
    ) -> Result<Self> {
        if subband_size == 0 {
            return Err(Error::Config("layout.subband_size: must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&overlap) {
            return Err(Error::Config(format!("layout.overlap: {overlap} not in [0, 1)")));
        }
        if gamma == 0 {
            return Err(Error::Config("layout.sampling_factor: must be >= 1".into()));
        }
        if num_bins == 0 {
            return Err(Error::Config("layout.num_bins: must be >= 1".into()));
        }
        let stride = ((subband_size as f64) * (1.0 - overlap)).round().max(1.0) as usize;
        // Enough subbands to cover every bin, rounded up so gamma divides B.
        let covering = if num_bins <= subband_size {
            1
        } else {
            (num_bins - subband_size).div_ceil(stride) + 1
        };
        let subband_count = covering.div_ceil(gamma) * gamma;
        let input_len = (subband_count - 1) * stride + subband_size;
        let padded_len = subband_count * subband_size;
        let per_channel = subband_count / gamma;
        let mut gather = vec![0usize; padded_len];
        for b in 0..subband_count {
            let (channel, position) = match mode {
                ReorientMode::Sampled => (b % gamma, b / gamma),
                ReorientMode::Subband => (b / per_channel, b % per_channel),
            };
            for w in 0..subband_size {
                let flat = channel * (per_channel * subband_size) + position * subband_size + w;
                gather[flat] = b * stride + w;
            }
        }
        Ok(Self {
            subband_size,
            overlap,
            subband_count,
            sampling_factor: gamma,
            padded_len,
            input_len,
            num_bins,
            mode,
            gather,
        })
    }

    /// Default layout for a 257-bin spectrum: K_B=2, no overlap, gamma=5,
    /// giving 130 subbands, 5 channels of 52 features, 260 padded bins.
    pub fn default_for_bins(num_bins: usize, mode: ReorientMode) -> Self {
        Self::new(num_bins, 2, 0.0, 5, mode).expect("default layout parameters are valid")
    }

    pub fn channels(&self) -> usize {
        self.sampling_factor
    }

    pub fn features_per_channel(&self) -> usize {
        self.padded_len / self.sampling_factor
    }

    /// Output-position -> padded-input index map.
    pub fn permutation(&self) -> &[usize] {
        &self.gather
    }

    /// True when the gather map is a bijection (no subband overlap).
    pub fn is_permutation(&self) -> bool {
        self.padded_len == self.input_len
    }

    /// Channel and within-channel position of subband `b`.
    pub fn subband_placement(&self, b: usize) -> (usize, usize) {
        let per_channel = self.subband_count / self.sampling_factor;
        match self.mode {
            ReorientMode::Sampled => (b % self.sampling_factor, b / self.sampling_factor),
            ReorientMode::Subband => (b / per_channel, b % per_channel),
        }
    }

    /// Zero-pads a magnitude vector of at most `input_len` bins.
    pub fn pad_input(&self, mag: &[f64]) -> Result<Vec<f64>> {
        if mag.len() > self.input_len {
            return Err(Error::Shape(format!(
                "input of {} bins exceeds layout capacity {}",
                mag.len(),
                self.input_len
            )));
        }
        let mut padded = vec![0.0; self.input_len];
        padded[..mag.len()].copy_from_slice(mag);
        Ok(padded)
    }

    /// Gathers a padded input vector into the flat output order.
    pub fn apply(&self, padded: &[f64]) -> Result<Vec<f64>> {
        if padded.len() != self.input_len {
            return Err(Error::Shape(format!(
                "padded input has {} bins, layout expects {}",
                padded.len(),
                self.input_len
            )));
        }
        Ok(self.gather.iter().map(|&src| padded[src]).collect())
    }

    /// Scatters a flat output vector back to padded-input order. Only
    /// defined when the layout is a permutation.
    pub fn invert(&self, flat: &[f64]) -> Result<Vec<f64>> {
        if !self.is_permutation() {
            return Err(Error::Shape(
                "overlapping layouts are not invertible (overlap > 0)".into(),
            ));
        }
        if flat.len() != self.padded_len {
            return Err(Error::Shape(format!(
                "flat input has {} values, layout expects {}",
                flat.len(),
                self.padded_len
            )));
        }
        let mut out = vec![0.0; self.input_len];
        for (flat_idx, &src) in self.gather.iter().enumerate() {
            out[src] = flat[flat_idx];
        }
        Ok(out)
    }

    /// Adjoint of [`apply`](Self::apply): scatter-add of output-shaped
    /// gradients back to padded-input positions. For permutations this is
    /// exactly the inverse permutation.
    pub fn adjoint(&self, grad_flat: &[f64]) -> Result<Vec<f64>> {
        if grad_flat.len() != self.padded_len {
            return Err(Error::Shape(format!(
                "gradient has {} values, layout expects {}",
                grad_flat.len(),
                self.padded_len
            )));
        }
        let mut out = vec![0.0; self.input_len];
        for (flat_idx, &src) in self.gather.iter().enumerate() {
            out[src] += grad_flat[flat_idx];
        }
        Ok(out)
    }
}

/// Reoriented features: channels x frames x features plus the layout that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ReorientedFeatures {
    pub data: LatentTensor,
    pub layout: ReorientLayout,
}

/// Reorients one frame of magnitudes (length <= `layout.input_len`,
/// zero-padded internally).
pub fn reorient_forward(mag: &[f64], layout: &ReorientLayout) -> Result<ReorientedFeatures> {
    reorient_forward_frames(std::slice::from_ref(&mag), layout)
}

/// Reorients a sequence of frames into one channels x frames x features
/// tensor.
pub fn reorient_forward_frames<M: AsRef<[f64]>>(
    mags: &[M],
    layout: &ReorientLayout,
) -> Result<ReorientedFeatures> {
    let channels = layout.channels();
    let features = layout.features_per_channel();
    let mut data = LatentTensor::zeros(channels, mags.len(), features);
    for (t, mag) in mags.iter().enumerate() {
        let flat = layout.apply(&layout.pad_input(mag.as_ref())?)?;
        for c in 0..channels {
            for p in 0..features {
                *data.at_mut(c, t, p) = flat[c * features + p];
            }
        }
    }
    Ok(ReorientedFeatures { data, layout: layout.clone() })
}

/// Inverts a single-frame reorientation back to the padded magnitude
/// vector. Exact inverse of [`reorient_forward`] for permutation layouts.
pub fn reorient_inverse(feat: &ReorientedFeatures) -> Result<Vec<f64>> {
    if feat.data.frames != 1 {
        return Err(Error::Shape(format!(
            "expected a single frame, got {}",
            feat.data.frames
        )));
    }
    reorient_inverse_frame(feat, 0)
}

/// Inverts frame `t` of a reoriented tensor.
pub fn reorient_inverse_frame(feat: &ReorientedFeatures, t: usize) -> Result<Vec<f64>> {
    let layout = &feat.layout;
    let channels = layout.channels();
    let features = layout.features_per_channel();
    if feat.data.channels != channels || feat.data.features != features {
        return Err(Error::Shape(format!(
            "features are {}x{}, layout expects {}x{}",
            feat.data.channels, feat.data.features, channels, features
        )));
    }
    let mut flat = vec![0.0; layout.padded_len];
    for c in 0..channels {
        for p in 0..features {
            flat[c * features + p] = feat.data.at(c, t, p);
        }
    }
    layout.invert(&flat)
}

/// Applies the adjoint of the reorientation to output-shaped gradients,
/// returning a padded-input gradient vector (single frame).
pub fn reorient_backward(grad: &ReorientedFeatures) -> Result<Vec<f64>> {
    let layout = &grad.layout;
    if grad.data.frames != 1 {
        return Err(Error::Shape(format!(
            "expected a single frame of gradients, got {}",
            grad.data.frames
        )));
    }
    let channels = layout.channels();
    let features = layout.features_per_channel();
    if grad.data.channels != channels || grad.data.features != features {
        return Err(Error::Shape("gradient shape does not match layout".into()));
    }
    let mut flat = vec![0.0; layout.padded_len];
    for c in 0..channels {
        for p in 0..features {
            flat[c * features + p] = grad.data.at(c, 0, p);
        }
    }
    layout.adjoint(&flat)
}

/// Per-channel all-zero flags across every frame.
pub fn zero_channel_report(feat: &ReorientedFeatures) -> Vec<bool> {
    (0..feat.data.channels)
        .map(|c| {
            (0..feat.data.frames)
                .all(|t| (0..feat.data.features).all(|p| feat.data.at(c, t, p) == 0.0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame_from_mags(mags: &[f64]) -> ComplexSpectrumFrame {
        ComplexSpectrumFrame {
            bins: mags.iter().map(|&m| Complex::new(m, 0.0)).collect(),
            frame_index: 0,
        }
    }

    #[test]
    fn compress_fixed_points() {
        let frame = frame_from_mags(&[1.0, 0.0, 8.0]);
        let c = compress(&frame, 0.3).unwrap();
        assert_eq!(c.magnitude[0], 1.0);
        assert_eq!(c.magnitude[1], 0.0);
        // 8^0.3, evaluated independently as exp(0.3 * ln 8).
        assert!((c.magnitude[2] - 1.8660659830736148).abs() < 1e-12);
    }

    #[test]
    fn compress_rejects_bad_alpha() {
        let frame = frame_from_mags(&[1.0]);
        assert!(compress(&frame, 0.0).is_err());
        assert!(compress(&frame, 1.5).is_err());
        assert!(compress(&frame, 1.0).is_ok());
    }

    #[test]
    fn compress_preserves_phase() {
        let frame = ComplexSpectrumFrame {
            bins: vec![Complex::new(1.0, 1.0), Complex::new(-2.0, 0.5)],
            frame_index: 0,
        };
        let c = compress(&frame, 0.3).unwrap();
        for (k, b) in frame.bins.iter().enumerate() {
            assert_eq!(c.phase[k], b.im.atan2(b.re));
        }
    }

    #[test]
    fn default_layout_shape() {
        let layout = ReorientLayout::default_for_bins(257, ReorientMode::Sampled);
        assert_eq!(layout.subband_count, 130);
        assert_eq!(layout.padded_len, 260);
        assert_eq!(layout.input_len, 260);
        assert_eq!(layout.channels(), 5);
        assert_eq!(layout.features_per_channel(), 52);
        assert!(layout.is_permutation());
    }

    #[test]
    fn sampled_ramp_channel_zero() {
        // Subbands 0, 5, 10, ... land in channel 0, so a 0..260 ramp starts
        // channel 0 with [0, 1, 10, 11, 20, 21].
        let layout = ReorientLayout::default_for_bins(257, ReorientMode::Sampled);
        let ramp: Vec<f64> = (0..260).map(|i| i as f64).collect();
        let feat = reorient_forward(&ramp, &layout).unwrap();
        let got: Vec<f64> = (0..6).map(|p| feat.data.at(0, 0, p)).collect();
        assert_eq!(got, vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        let back = reorient_inverse(&feat).unwrap();
        assert_eq!(back, ramp);
    }

    #[test]
    fn forward_shape_for_257_bins() {
        let layout = ReorientLayout::default_for_bins(257, ReorientMode::Sampled);
        let mag = vec![1.0; 257];
        let feat = reorient_forward(&mag, &layout).unwrap();
        assert_eq!(feat.data.channels, 5);
        assert_eq!(feat.data.features, 52);
    }

    #[test]
    fn inverse_of_forward_is_identity() {
        for mode in [ReorientMode::Sampled, ReorientMode::Subband] {
            let layout = ReorientLayout::default_for_bins(257, mode);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let v: Vec<f64> = (0..260).map(|_| rng.random_range(-1.0..1.0)).collect();
            let feat = reorient_forward(&v, &layout).unwrap();
            assert_eq!(reorient_inverse(&feat).unwrap(), v);
        }
    }

    #[test]
    fn inverse_of_zeros_is_zeros() {
        let layout = ReorientLayout::default_for_bins(257, ReorientMode::Subband);
        let feat = reorient_forward(&vec![0.0; 257], &layout).unwrap();
        assert!(reorient_inverse(&feat).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_oversized_input() {
        let layout = ReorientLayout::default_for_bins(257, ReorientMode::Sampled);
        assert!(reorient_forward(&vec![0.0; 261], &layout).is_err());
    }

    #[test]
    fn zero_channels_under_band_limit() {
        // Support on bins 0..=128 (4 kHz at 16 kHz / 512): the contiguous
        // grouping leaves channels 3 and 4 all-zero, the strided one none.
        let mut mag = vec![0.0; 257];
        for v in mag.iter_mut().take(129) {
            *v = 1.0;
        }
        let subband = ReorientLayout::default_for_bins(257, ReorientMode::Subband);
        let flags = zero_channel_report(&reorient_forward(&mag, &subband).unwrap());
        assert_eq!(flags, vec![false, false, false, true, true]);

        let sampled = ReorientLayout::default_for_bins(257, ReorientMode::Sampled);
        let flags = zero_channel_report(&reorient_forward(&mag, &sampled).unwrap());
        assert!(flags.iter().all(|&f| !f));
    }

    #[test]
    fn white_noise_has_no_zero_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mag: Vec<f64> = (0..257).map(|_| rng.random_range(0.01..1.0)).collect();
        for mode in [ReorientMode::Sampled, ReorientMode::Subband] {
            let layout = ReorientLayout::default_for_bins(257, mode);
            let flags = zero_channel_report(&reorient_forward(&mag, &layout).unwrap());
            assert!(flags.iter().all(|&f| !f));
        }
    }

    #[test]
    fn backward_is_inverse_permutation() {
        let layout = ReorientLayout::default_for_bins(257, ReorientMode::Sampled);
        let ones = reorient_forward(&vec![1.0; 260], &layout).unwrap();
        let back = reorient_backward(&ones).unwrap();
        assert!(back.iter().all(|&v| v == 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g: Vec<f64> = (0..260).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gf = reorient_forward(&g, &layout).unwrap();
        assert_eq!(reorient_backward(&gf).unwrap(), g);
    }

    /// Central finite differences through the permutation: for
    /// f(x) = sum(g . forward(x)), df/dx must equal backward(g).
    #[test]
    fn backward_matches_finite_differences() {
        let layout = ReorientLayout::default_for_bins(257, ReorientMode::Sampled);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Vec<f64> = (0..260).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..260).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |v: &[f64]| -> f64 {
            let f = layout.apply(v).unwrap();
            f.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let grad_feat = ReorientedFeatures {
            data: LatentTensor::from_fn(5, 1, 52, |c, _, p| g[c * 52 + p]),
            layout: layout.clone(),
        };
        let analytic = reorient_backward(&grad_feat).unwrap();
        let h = 1e-3;
        for i in (0..260).step_by(17) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!(
                (fd - analytic[i]).abs() <= 1e-10 * fd.abs().max(1.0),
                "fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn overlapping_layout_gathers_and_rejects_inverse() {
        let layout = ReorientLayout::new(257, 4, 0.5, 5, ReorientMode::Sampled).unwrap();
        assert!(!layout.is_permutation());
        assert_eq!(layout.padded_len, layout.subband_count * 4);
        let mag = vec![1.0; 257];
        let feat = reorient_forward(&mag, &layout).unwrap();
        assert_eq!(feat.data.channels, 5);
        assert!(reorient_inverse(&feat).is_err());
        // Stride 2 with K_B=4: neighbouring subbands share bins.
        let ramp: Vec<f64> = (0..layout.input_len).map(|i| i as f64).collect();
        let flat = layout.apply(&ramp).unwrap();
        let (c0, p0) = layout.subband_placement(0);
        let (c1, p1) = layout.subband_placement(1);
        let fpc = layout.features_per_channel();
        // Subband 0 covers bins 0..4, subband 1 covers bins 2..6.
        assert_eq!(flat[c0 * fpc + p0 * 4 + 2], 2.0);
        assert_eq!(flat[c1 * fpc + p1 * 4], 2.0);
    }

    proptest! {
        /// Both modes are value-preserving bijections and conserve energy.
        #[test]
        fn permutation_preserves_multiset(values in proptest::collection::vec(-1e3f64..1e3, 260)) {
            for mode in [ReorientMode::Sampled, ReorientMode::Subband] {
                let layout = ReorientLayout::default_for_bins(257, mode);
                let feat = reorient_forward(&values, &layout).unwrap();
                let flat = layout.apply(&values).unwrap();
                let mut sorted_in = values.clone();
                let mut sorted_out = flat.clone();
                sorted_in.sort_by(|a, b| a.partial_cmp(b).unwrap());
                sorted_out.sort_by(|a, b| a.partial_cmp(b).unwrap());
                // Summing the sorted vectors fixes the addition order, so
                // energy equality holds bit-exactly.
                let e_in: f64 = sorted_in.iter().map(|v| v * v).sum();
                let e_out: f64 = sorted_out.iter().map(|v| v * v).sum();
                prop_assert_eq!(sorted_in, sorted_out);
                prop_assert_eq!(e_in, e_out);
                prop_assert_eq!(reorient_inverse(&feat).unwrap(), values.clone());
            }
        }

        /// Any input supported on bins [0, 130) leaves no sampled channel
        /// empty, while the contiguous grouping always has at least one.
        #[test]
        fn band_limited_support_flags(lo_vals in proptest::collection::vec(0.01f64..1.0, 130)) {
            let mut mag = vec![0.0; 257];
            mag[..130].copy_from_slice(&lo_vals);
            let sampled = ReorientLayout::default_for_bins(257, ReorientMode::Sampled);
            let subband = ReorientLayout::default_for_bins(257, ReorientMode::Subband);
            let s_flags = zero_channel_report(&reorient_forward(&mag, &sampled).unwrap());
            let b_flags = zero_channel_report(&reorient_forward(&mag, &subband).unwrap());
            prop_assert!(s_flags.iter().all(|&f| !f));
            prop_assert!(b_flags.iter().any(|&f| f));
        }

        /// Compression is strictly monotone in magnitude.
        #[test]
        fn compression_monotonicity(a in 0.0f64..1e3, b in 1e-6f64..1e3) {
            let (lo, hi) = (a, a + b);
            let frame = frame_from_mags(&[lo, hi]);
            let c = compress(&frame, 0.3).unwrap();
            prop_assert!(c.magnitude[0] < c.magnitude[1]);
        }
    }
}
