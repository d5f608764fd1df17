//! Streaming analysis/synthesis STFT frontend.
//!
//! 512-point FFT, 512-sample periodic Hann analysis window, 256-sample hop
//! at 16 kHz (32 ms / 16 ms). Synthesis uses the exact COLA-dual of the
//! analysis window, so overlap-add reconstruction is exact on the fully
//! overlapped interior without a trailing normalization pass.
//!
//! Frame 0 starts at sample 0 (no center padding); frame `t` covers samples
//! `[t*hop, t*hop + window_len)`. Every downstream stage shares this frame
//! clock, so delay indices map to hops directly.

use num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use std::f64::consts::PI;
use std::sync::Arc;

use crate::{Error, Result};

/// STFT framing parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    pub fft_size: usize,
    pub window_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { fft_size: 512, window_len: 512, hop: 256, sample_rate: 16000 }
    }
}

impl StftConfig {
    /// Number of non-redundant spectrum bins, `fft_size/2 + 1`.
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames per second at this hop.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || !self.fft_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "stft.fft_size: {} is not a power of two",
                self.fft_size
            )));
        }
        if self.window_len != self.fft_size {
            return Err(Error::Config(format!(
                "stft.window_len: {} must equal fft_size {}",
                self.window_len, self.fft_size
            )));
        }
        if self.hop == 0 || self.window_len % self.hop != 0 {
            return Err(Error::Config(format!(
                "stft.hop: {} must divide window_len {}",
                self.hop, self.window_len
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("stft.sample_rate: must be nonzero".into()));
        }
        Ok(())
    }
}

/// One STFT frame: `num_bins` complex values plus the frame index on the
/// shared hop clock. Bin 0 and the Nyquist bin are real.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrumFrame {
    pub bins: Vec<Complex<f64>>,
    pub frame_index: usize,
}

impl ComplexSpectrumFrame {
    pub fn zeros(num_bins: usize, frame_index: usize) -> Self {
        Self { bins: vec![Complex::new(0.0, 0.0); num_bins], frame_index }
    }
}

/// Periodic Hann window of length `n`.
pub fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos())).collect()
}

/// COLA-dual synthesis window for `analysis` at hop `hop`:
/// `w_s[i] = w_a[i] / sum_j w_a[j]^2` over all `j = i (mod hop)`.
/// The product `w_a * w_s` then overlap-adds to exactly 1.
pub fn cola_dual_window(analysis: &[f64], hop: usize) -> Vec<f64> {
    let n = analysis.len();
    let mut denom = vec![0.0f64; hop];
    for (i, &w) in analysis.iter().enumerate() {
        denom[i % hop] += w * w;
    }
    (0..n).map(|i| analysis[i] / denom[i % hop]).collect()
}

/// Maximum relative deviation of the analysis*synthesis overlap-add from 1.
pub fn cola_deviation(analysis: &[f64], synthesis: &[f64], hop: usize) -> f64 {
    let n = analysis.len();
    let mut worst = 0.0f64;
    for phase in 0..hop {
        let mut acc = 0.0;
        let mut i = phase;
        while i < n {
            acc += analysis[i] * synthesis[i];
            i += hop;
        }
        worst = worst.max((acc - 1.0).abs());
    }
    worst
}

fn make_plans(cfg: &StftConfig) -> (Arc<dyn RealToComplex<f64>>, Arc<dyn ComplexToReal<f64>>) {
    let mut planner = RealFftPlanner::<f64>::new();
    (planner.plan_fft_forward(cfg.fft_size), planner.plan_fft_inverse(cfg.fft_size))
}

/// Splits a mono signal into windowed spectra. A signal shorter than one
/// window yields no frames.
pub fn analyze(signal: &[f64], cfg: &StftConfig) -> Result<Vec<ComplexSpectrumFrame>> {
    cfg.validate()?;
    if signal.len() < cfg.window_len {
        return Ok(Vec::new());
    }
    let num_frames = (signal.len() - cfg.window_len) / cfg.hop + 1;
    let window = periodic_hann(cfg.window_len);
    let (fft, _) = make_plans(cfg);
    let mut frames = Vec::with_capacity(num_frames);
    let mut scratch = vec![0.0f64; cfg.fft_size];
    let mut spectrum = fft.make_output_vec();
    for t in 0..num_frames {
        let start = t * cfg.hop;
        for i in 0..cfg.window_len {
            scratch[i] = signal[start + i] * window[i];
        }
        fft.process(&mut scratch, &mut spectrum)
            .map_err(|e| Error::InvalidInput(format!("fft failed: {e}")))?;
        let mut bins = spectrum.clone();
        // Real input: DC and Nyquist are real by construction.
        bins[0].im = 0.0;
        let last = bins.len() - 1;
        bins[last].im = 0.0;
        frames.push(ComplexSpectrumFrame { bins, frame_index: t });
    }
    Ok(frames)
}

/// Overlap-add resynthesis. For frames produced by [`analyze`] the output
/// equals the input on the fully overlapped interior
/// `[hop, (T-1)*hop + window_len - hop)`.
pub fn synthesize(frames: &[ComplexSpectrumFrame], cfg: &StftConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    let mut synth = StftSynthesizer::new(cfg)?;
    let mut out = Vec::with_capacity((frames.len() - 1) * cfg.hop + cfg.window_len);
    for frame in frames {
        out.extend_from_slice(&synth.push_frame(frame)?);
    }
    out.extend_from_slice(&synth.flush());
    Ok(out)
}

/// Incremental analyzer: feed samples, pop frames as hops complete.
pub struct StftAnalyzer {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn RealToComplex<f64>>,
    buffer: Vec<f64>,
    consumed: usize,
    next_index: usize,
}

impl StftAnalyzer {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let (fft, _) = make_plans(cfg);
        Ok(Self {
            cfg: cfg.clone(),
            window: periodic_hann(cfg.window_len),
            fft,
            buffer: Vec::new(),
            consumed: 0,
            next_index: 0,
        })
    }

    pub fn push(&mut self, samples: &[f64]) {
        self.buffer.extend_from_slice(samples);
    }

    /// Returns the next complete frame, if buffered samples allow one.
    pub fn next_frame(&mut self) -> Result<Option<ComplexSpectrumFrame>> {
        if self.buffer.len() - self.consumed < self.cfg.window_len {
            return Ok(None);
        }
        let start = self.consumed;
        let mut scratch = vec![0.0f64; self.cfg.fft_size];
        for i in 0..self.cfg.window_len {
            scratch[i] = self.buffer[start + i] * self.window[i];
        }
        let mut spectrum = self.fft.make_output_vec();
        self.fft
            .process(&mut scratch, &mut spectrum)
            .map_err(|e| Error::InvalidInput(format!("fft failed: {e}")))?;
        spectrum[0].im = 0.0;
        let last = spectrum.len() - 1;
        spectrum[last].im = 0.0;
        let frame = ComplexSpectrumFrame { bins: spectrum, frame_index: self.next_index };
        self.next_index += 1;
        self.consumed += self.cfg.hop;
        // Drop samples no frame will touch again.
        if self.consumed >= 4 * self.cfg.window_len {
            self.buffer.drain(..self.consumed);
            self.consumed = 0;
        }
        Ok(Some(frame))
    }
}

/// Incremental overlap-add synthesizer. Each pushed frame finalizes `hop`
/// output samples; [`flush`](Self::flush) emits the remaining tail.
pub struct StftSynthesizer {
    cfg: StftConfig,
    synthesis: Vec<f64>,
    ifft: Arc<dyn ComplexToReal<f64>>,
    ola: Vec<f64>,
    time_scratch: Vec<f64>,
    received: usize,
}

impl StftSynthesizer {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let (_, ifft) = make_plans(cfg);
        let analysis = periodic_hann(cfg.window_len);
        Ok(Self {
            cfg: cfg.clone(),
            synthesis: cola_dual_window(&analysis, cfg.hop),
            ifft,
            ola: vec![0.0; cfg.window_len],
            time_scratch: vec![0.0; cfg.fft_size],
            received: 0,
        })
    }

    pub fn push_frame(&mut self, frame: &ComplexSpectrumFrame) -> Result<Vec<f64>> {
        let num_bins = self.cfg.num_bins();
        if frame.bins.len() != num_bins {
            return Err(Error::Shape(format!(
                "frame has {} bins, expected {num_bins}",
                frame.bins.len()
            )));
        }
        let mut spectrum = frame.bins.clone();
        spectrum[0].im = 0.0;
        spectrum[num_bins - 1].im = 0.0;
        self.ifft
            .process(&mut spectrum, &mut self.time_scratch)
            .map_err(|e| Error::InvalidInput(format!("inverse fft failed: {e}")))?;
        let scale = 1.0 / self.cfg.fft_size as f64;
        for i in 0..self.cfg.window_len {
            self.ola[i] += self.time_scratch[i] * scale * self.synthesis[i];
        }
        let hop = self.cfg.hop;
        let out = self.ola[..hop].to_vec();
        self.ola.copy_within(hop.., 0);
        let n = self.cfg.window_len;
        self.ola[n - hop..].fill(0.0);
        self.received += 1;
        Ok(out)
    }

    /// Emits the `window_len - hop` samples still held in the overlap
    /// buffer. Call once after the final frame.
    pub fn flush(&mut self) -> Vec<f64> {
        if self.received == 0 {
            return Vec::new();
        }
        let tail = self.cfg.window_len - self.cfg.hop;
        let out = self.ola[..tail].to_vec();
        self.ola.fill(0.0);
        out
    }
}
