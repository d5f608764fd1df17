//! End-to-end processing chain: echo canceller, feature preprocessing,
//! post-filter, mask application and resynthesis, on one shared 512/256
//! clock.
//!
//! The batch entry point drives the same per-hop engine as the streaming
//! one, so both produce bit-identical output. All cross-module dimension
//! constraints are validated up front with the offending field named.

use crate::features::{compress, reorient_forward, ReorientLayout};
use crate::kalman::{KalmanAec, KalmanConfig};
use crate::model::layers::{Activation, SeparableConv};
use crate::model::{apply_mask, Model, ModelConfig, StreamState, WeightSource};
use crate::stft::{ComplexSpectrumFrame, StftAnalyzer, StftConfig, StftSynthesizer};
use crate::tensor::Tensor2;
use crate::time_align::{DelayDistribution, TaStream, TaWeights};
use crate::{Error, Result};

/// Which signals feed the NE and FE streams. The error signal always
/// leads the NE stream; the echo estimate can be stacked onto either side
/// along the channel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputRouting {
    /// NE <- error, FE <- far end (the default).
    ErrorFar,
    /// NE <- error + echo estimate, FE <- far end.
    ErrorEchoFar,
    /// NE <- error, FE <- far end + echo estimate.
    ErrorFarEcho,
}

impl InputRouting {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "error-far" => Ok(Self::ErrorFar),
            "error-echo-far" => Ok(Self::ErrorEchoFar),
            "error-far-echo" => Ok(Self::ErrorFarEcho),
            other => Err(Error::Config(format!(
                "routing: unknown value {other:?} (expected error-far|error-echo-far|error-far-echo)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ErrorFar => "error-far",
            Self::ErrorEchoFar => "error-echo-far",
            Self::ErrorFarEcho => "error-far-echo",
        }
    }
}

/// How far through the chain to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Full,
    /// Stop after the echo canceller; output is the error signal.
    KfOnly,
}

/// Cross-module configuration of the whole chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub stft: StftConfig,
    pub kalman: KalmanConfig,
    /// Power-law compression exponent.
    pub alpha: f64,
    pub model: ModelConfig,
    pub routing: InputRouting,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            kalman: KalmanConfig::default(),
            alpha: crate::features::DEFAULT_ALPHA,
            model: ModelConfig::default(),
            routing: InputRouting::ErrorFar,
        }
    }
}

impl PipelineConfig {
    /// Rebuilds the model channel counts from the routing and layout.
    pub fn with_routing(mut self, routing: InputRouting) -> Self {
        self.routing = routing;
        let base = self.model.layout.channels();
        self.model.ne_channels =
            if routing == InputRouting::ErrorEchoFar { 2 * base } else { base };
        self.model.fe_channels =
            if routing == InputRouting::ErrorFarEcho { 2 * base } else { base };
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.kalman.validate()?;
        self.model.plan()?;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("features.alpha: {} not in (0, 1]", self.alpha)));
        }
        if self.kalman.fft_size != self.stft.fft_size {
            return Err(Error::Config(format!(
                "kalman.fft_size: {} does not match stft.fft_size {}",
                self.kalman.fft_size, self.stft.fft_size
            )));
        }
        if self.kalman.hop != self.stft.hop {
            return Err(Error::Config(format!(
                "kalman.hop: {} does not match stft.hop {}",
                self.kalman.hop, self.stft.hop
            )));
        }
        if self.model.num_bins != self.stft.num_bins() {
            return Err(Error::Config(format!(
                "model.num_bins: {} does not match stft bins {}",
                self.model.num_bins,
                self.stft.num_bins()
            )));
        }
        let base = self.model.layout.channels();
        let want_ne =
            if self.routing == InputRouting::ErrorEchoFar { 2 * base } else { base };
        let want_fe =
            if self.routing == InputRouting::ErrorFarEcho { 2 * base } else { base };
        if self.model.ne_channels != want_ne {
            return Err(Error::Config(format!(
                "model.ne_channels: {} but routing {} needs {want_ne}",
                self.model.ne_channels,
                self.routing.name()
            )));
        }
        if self.model.fe_channels != want_fe {
            return Err(Error::Config(format!(
                "model.fe_channels: {} but routing {} needs {want_fe}",
                self.model.fe_channels,
                self.routing.name()
            )));
        }
        Ok(())
    }
}

/// Result of a batch run.
#[derive(Debug, Clone)]
pub struct ProcessOutput {
    pub enhanced: Vec<f64>,
    pub frames: usize,
    /// Smallest and largest mask magnitude seen (full stage only).
    pub mask_range: Option<(f64, f64)>,
}

/// A built pipeline: immutable configuration plus model weights.
pub struct Pipeline {
    cfg: PipelineConfig,
    model: Model,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, weights: WeightSource) -> Result<Self> {
        cfg.validate()?;
        let model = Model::build(&cfg.model, weights)?;
        Ok(Self { cfg, model })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Starts a streaming session.
    pub fn stream(&self, stage: Stage) -> Result<PipelineStream<'_>> {
        PipelineStream::new(self, stage)
    }

    /// Batch processing: drives the streaming engine over the whole input
    /// (bit-identical to feeding the stream in arbitrary chunks).
    pub fn process(&self, mic: &[f64], far: &[f64], stage: Stage) -> Result<ProcessOutput> {
        if mic.is_empty() || far.is_empty() {
            return Err(Error::InvalidInput("process: empty input signal".into()));
        }
        let mut stream = self.stream(stage)?;
        let n = mic.len().min(far.len());
        let mut enhanced = stream.push(&mic[..n], &far[..n])?;
        enhanced.extend_from_slice(&stream.finish());
        Ok(ProcessOutput { enhanced, frames: stream.frames_done, mask_range: stream.mask_range })
    }
}

/// Streaming engine. Push sample pairs in any chunk sizes; enhanced
/// samples come back as soon as whole frames complete.
pub struct PipelineStream<'a> {
    cfg: &'a PipelineConfig,
    model: &'a Model,
    stage: Stage,
    kf: KalmanAec,
    mic_pending: Vec<f64>,
    far_pending: Vec<f64>,
    error_analyzer: StftAnalyzer,
    far_analyzer: StftAnalyzer,
    echo_analyzer: StftAnalyzer,
    synth: StftSynthesizer,
    state: StreamState,
    frames_done: usize,
    mask_range: Option<(f64, f64)>,
}

impl<'a> PipelineStream<'a> {
    fn new(pipeline: &'a Pipeline, stage: Stage) -> Result<Self> {
        let cfg = &pipeline.cfg;
        Ok(Self {
            cfg,
            model: &pipeline.model,
            stage,
            kf: KalmanAec::new(cfg.kalman.clone())?,
            mic_pending: Vec::new(),
            far_pending: Vec::new(),
            error_analyzer: StftAnalyzer::new(&cfg.stft)?,
            far_analyzer: StftAnalyzer::new(&cfg.stft)?,
            echo_analyzer: StftAnalyzer::new(&cfg.stft)?,
            synth: StftSynthesizer::new(&cfg.stft)?,
            state: pipeline.model.init_state(),
            frames_done: 0,
            mask_range: None,
        })
    }

    /// Reoriented compressed-magnitude frame of a spectrum.
    fn features_of(&self, frame: &ComplexSpectrumFrame) -> Result<Tensor2> {
        let compressed = compress(frame, self.cfg.alpha)?;
        let feat = reorient_forward(&compressed.magnitude, &self.cfg.model.layout)?;
        Ok(feat.data.frame(0))
    }

    fn stack(top: &Tensor2, bottom: &Tensor2) -> Tensor2 {
        let mut out = Tensor2::zeros(top.rows + bottom.rows, top.cols);
        out.data[..top.data.len()].copy_from_slice(&top.data);
        out.data[top.data.len()..].copy_from_slice(&bottom.data);
        out
    }

    /// Feeds matched mic/far samples; returns finalized enhanced samples.
    pub fn push(&mut self, mic: &[f64], far: &[f64]) -> Result<Vec<f64>> {
        if mic.len() != far.len() {
            return Err(Error::InvalidInput(format!(
                "push: chunk lengths differ ({} vs {})",
                mic.len(),
                far.len()
            )));
        }
        self.mic_pending.extend_from_slice(mic);
        self.far_pending.extend_from_slice(far);
        let hop = self.cfg.stft.hop;
        let mut out = Vec::new();
        let mut consumed = 0;
        while self.mic_pending.len() - consumed >= hop {
            let mic_hop = &self.mic_pending[consumed..consumed + hop];
            let far_hop = &self.far_pending[consumed..consumed + hop];
            let kf_out = self.kf.process_hop(mic_hop, far_hop)?;
            self.error_analyzer.push(&kf_out.error);
            self.far_analyzer.push(far_hop);
            self.echo_analyzer.push(&kf_out.echo_estimate);
            consumed += hop;

            while let Some(z_frame) = self.error_analyzer.next_frame()? {
                let y_frame = self
                    .far_analyzer
                    .next_frame()?
                    .expect("far analyzer is fed in lockstep with the error analyzer");
                let e_frame = self
                    .echo_analyzer
                    .next_frame()?
                    .expect("echo analyzer is fed in lockstep with the error analyzer");
                let enhanced = match self.stage {
                    Stage::KfOnly => z_frame,
                    Stage::Full => {
                        let z_feat = self.features_of(&z_frame)?;
                        let y_feat = self.features_of(&y_frame)?;
                        let (ne_input, fe_input) = match self.cfg.routing {
                            InputRouting::ErrorFar => (z_feat, y_feat),
                            InputRouting::ErrorEchoFar => {
                                let e_feat = self.features_of(&e_frame)?;
                                (Self::stack(&z_feat, &e_feat), y_feat)
                            }
                            InputRouting::ErrorFarEcho => {
                                let e_feat = self.features_of(&e_frame)?;
                                (z_feat, Self::stack(&y_feat, &e_feat))
                            }
                        };
                        let mask = self.model.step(&ne_input, &fe_input, &mut self.state)?;
                        let (mut lo, mut hi) = self.mask_range.unwrap_or((f64::INFINITY, f64::NEG_INFINITY));
                        for &m in &mask.magnitude {
                            lo = lo.min(m);
                            hi = hi.max(m);
                        }
                        self.mask_range = Some((lo, hi));
                        apply_mask(&z_frame, &mask, self.cfg.alpha)?
                    }
                };
                out.extend_from_slice(&self.synth.push_frame(&enhanced)?);
                self.frames_done += 1;
            }
        }
        self.mic_pending.drain(..consumed);
        self.far_pending.drain(..consumed);
        Ok(out)
    }

    /// Emits the overlap-add tail. Call once after the last push.
    pub fn finish(&mut self) -> Vec<f64> {
        self.synth.flush()
    }

    pub fn frames_done(&self) -> usize {
        self.frames_done
    }
}

/// Identity-configured stream convolutions: delta depthwise kernels,
/// channel-replicating pointwise maps, zero bias. Compressed magnitudes
/// are nonnegative, so the ReLU passes them through unchanged.
fn identity_stream(
    in_channels: usize,
    filters: usize,
    kernel1: usize,
    kernel2: usize,
) -> (SeparableConv, SeparableConv) {
    let mut conv1 = SeparableConv {
        depthwise: Tensor2::zeros(in_channels, kernel1),
        pointwise: Tensor2::zeros(filters, in_channels),
        bias: vec![0.0; filters],
        activation: Activation::Relu,
    };
    for c in 0..in_channels {
        *conv1.depthwise.at_mut(c, (kernel1 - 1) / 2) = 1.0;
    }
    for o in 0..filters {
        *conv1.pointwise.at_mut(o, o % in_channels) = 1.0;
    }
    let mut conv2 = SeparableConv {
        depthwise: Tensor2::zeros(filters, kernel2),
        pointwise: Tensor2::zeros(filters, filters),
        bias: vec![0.0; filters],
        activation: Activation::Relu,
    };
    for c in 0..filters {
        *conv2.depthwise.at_mut(c, (kernel2 - 1) / 2) = 1.0;
        *conv2.pointwise.at_mut(c, c) = 1.0;
    }
    (conv1, conv2)
}

/// Significance bound for the averaged peak: z-score of the peak against
/// the mean and spread of the other delays (excluding a +-3 neighborhood).
/// In-span scenes measure z >= 5, chance peaks stay below 4.
pub const OUT_OF_SPAN_PEAK_Z: f64 = 4.4;

/// Result of the delay probe.
#[derive(Debug, Clone)]
pub struct DelayProbe {
    pub dist: DelayDistribution,
    /// Time-averaged distribution (warmup frames skipped).
    pub averaged: Vec<f64>,
    /// 0-based delay index (in frames) of the averaged peak.
    pub peak_index: usize,
    /// Peak significance (z-score against the non-peak delays).
    pub peak_z: f64,
    /// True when no stable peak exists inside the alignment span.
    pub out_of_span: bool,
}

/// Runs the front half of the chain (STFT, compression, reorientation,
/// identity conv streams, identity-configured alignment) and returns the
/// delay probability distribution. With a pure-delay echo the averaged
/// distribution peaks at the true delay.
pub fn probe_delay(far_end: &[f64], near_mix: &[f64], cfg: &PipelineConfig) -> Result<DelayProbe> {
    cfg.validate()?;
    if far_end.len() < cfg.stft.window_len || near_mix.len() < cfg.stft.window_len {
        return Err(Error::InvalidInput(format!(
            "probe_delay: signals shorter than one frame ({} samples)",
            cfg.stft.window_len
        )));
    }
    let layout: &ReorientLayout = &cfg.model.layout;
    let base = layout.channels();
    let (conv1, conv2) = identity_stream(
        base,
        cfg.model.stream_filters,
        cfg.model.stream_kernel1,
        cfg.model.stream_kernel2,
    );
    let ta = TaWeights::identity(cfg.model.stream_filters, cfg.model.similarity_channels);
    let mut ta_stream = TaStream::new(ta, cfg.model.d_max)?;

    let mut mic_analyzer = StftAnalyzer::new(&cfg.stft)?;
    let mut far_analyzer = StftAnalyzer::new(&cfg.stft)?;
    let n = far_end.len().min(near_mix.len());
    mic_analyzer.push(&near_mix[..n]);
    far_analyzer.push(&far_end[..n]);

    let mut rows: Vec<Vec<f64>> = Vec::new();
    while let Some(mic_frame) = mic_analyzer.next_frame()? {
        let far_frame = far_analyzer
            .next_frame()?
            .expect("both analyzers consume the same sample count");
        let mic_feat = {
            let c = compress(&mic_frame, cfg.alpha)?;
            reorient_forward(&c.magnitude, layout)?.data.frame(0)
        };
        let far_feat = {
            let c = compress(&far_frame, cfg.alpha)?;
            reorient_forward(&c.magnitude, layout)?.data.frame(0)
        };
        let ne_latent = conv2.apply(&crate::model::layers::max_pool2(&conv1.apply(&mic_feat)));
        let fe_latent = conv2.apply(&crate::model::layers::max_pool2(&conv1.apply(&far_feat)));
        let (_, dist_row) = ta_stream.step(&ne_latent, &fe_latent)?;
        rows.push(dist_row);
    }

    let d_max = cfg.model.d_max;
    let mut data = Tensor2::zeros(rows.len(), d_max);
    for (t, row) in rows.iter().enumerate() {
        data.row_mut(t).copy_from_slice(row);
    }
    let dist = DelayDistribution { data };
    let skip = d_max.min(dist.frames() / 2);
    let averaged = dist.time_average(skip);
    let (peak_index, peak) = averaged
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, &v)| (i, v))
        .unwrap_or((0, 0.0));
    let background: Vec<f64> = averaged
        .iter()
        .enumerate()
        .filter(|(i, _)| (*i as isize - peak_index as isize).abs() > 3)
        .map(|(_, &v)| v)
        .collect();
    let peak_z = if background.len() > 1 {
        let mu = background.iter().sum::<f64>() / background.len() as f64;
        let var =
            background.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / background.len() as f64;
        (peak - mu) / var.sqrt().max(1e-12)
    } else {
        f64::INFINITY
    };
    let out_of_span = peak_z < OUT_OF_SPAN_PEAK_Z;
    Ok(DelayProbe { dist, averaged, peak_index, peak_z, out_of_span })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::erle_trace;
    use crate::scene::{self, exponential_rir, synthetic_speech, Nonlinearity, SceneSpec, Scenario};

    fn dt_scene(seed: u64, secs: f64) -> scene::SceneOutput {
        let near = synthetic_speech(seed, secs).unwrap();
        let far = synthetic_speech(seed + 101, secs).unwrap();
        let spec = SceneSpec {
            scenario: Scenario::DoubleTalk,
            ser_db: 0.0,
            snr_db: 20.0,
            delay_ms: 64.0,
            rir: exponential_rir(seed + 7, 120.0, 1600),
            nonlinearity: Nonlinearity::None,
            bandlimit_hz: None,
            seed,
        };
        scene::generate(&spec, &near, &far).unwrap()
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = PipelineConfig::default();
        cfg.kalman.hop = 128;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("kalman.hop"), "{err}");

        let mut cfg = PipelineConfig::default();
        cfg.model.num_bins = 129;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("num_bins"), "{err}");

        let cfg =
            PipelineConfig { routing: InputRouting::ErrorEchoFar, ..PipelineConfig::default() };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("model.ne_channels"), "{err}");
        let cfg = PipelineConfig::default().with_routing(InputRouting::ErrorEchoFar);
        cfg.validate().unwrap();
    }

    #[test]
    fn kf_only_cancels_linear_fst_scene() {
        let far = synthetic_speech(31, 8.0).unwrap();
        let rir = exponential_rir(3, 100.0, 1600);
        let mic = scene::convolve_truncated(&far, &rir);
        let pipeline =
            Pipeline::new(PipelineConfig::default(), WeightSource::Random { seed: 1 }).unwrap();
        let out = pipeline.process(&mic, &far, Stage::KfOnly).unwrap();
        let n = out.enhanced.len().min(mic.len());
        let trace = erle_trace(&mic[..n], &out.enhanced[..n], 1.0, 16000).unwrap();
        let late: f64 = trace[5..8.min(trace.len())].iter().sum::<f64>() / 3.0;
        assert!(late >= 20.0, "late ERLE {late} dB, trace {trace:?}");
    }

    #[test]
    fn streaming_equals_batch_bitwise() {
        let scene = dt_scene(5, 3.0);
        let pipeline =
            Pipeline::new(PipelineConfig::default(), WeightSource::Random { seed: 42 }).unwrap();
        let batch = pipeline.process(&scene.mic, &scene.far_end, Stage::Full).unwrap();
        let mut stream = pipeline.stream(Stage::Full).unwrap();
        let mut out = Vec::new();
        let mut pos = 0;
        let mut chunk = 1usize;
        while pos < scene.mic.len() {
            let end = (pos + chunk).min(scene.mic.len());
            out.extend(stream.push(&scene.mic[pos..end], &scene.far_end[pos..end]).unwrap());
            pos = end;
            chunk = chunk % 701 + 13;
        }
        out.extend(stream.finish());
        assert_eq!(batch.enhanced, out);
    }

    #[test]
    fn past_output_ignores_future_input() {
        let scene = dt_scene(6, 3.0);
        let pipeline =
            Pipeline::new(PipelineConfig::default(), WeightSource::Random { seed: 42 }).unwrap();
        let base = pipeline.process(&scene.mic, &scene.far_end, Stage::Full).unwrap();
        let cut = 256 * 120;
        let mut mic2 = scene.mic.clone();
        let mut far2 = scene.far_end.clone();
        for v in mic2[cut..].iter_mut() {
            *v = 0.33;
        }
        for v in far2[cut..].iter_mut() {
            *v = -0.25;
        }
        let other = pipeline.process(&mic2, &far2, Stage::Full).unwrap();
        // Mutating samples from `cut` on can affect output from one hop
        // before (the block transform spans two hops).
        let safe = cut - 2 * 256;
        assert_eq!(base.enhanced[..safe], other.enhanced[..safe]);
    }

    #[test]
    fn full_stage_stays_finite_and_bounded() {
        let scene = dt_scene(7, 3.0);
        for routing in
            [InputRouting::ErrorFar, InputRouting::ErrorEchoFar, InputRouting::ErrorFarEcho]
        {
            let cfg = PipelineConfig::default().with_routing(routing);
            let pipeline = Pipeline::new(cfg, WeightSource::Random { seed: 2 }).unwrap();
            let out = pipeline.process(&scene.mic, &scene.far_end, Stage::Full).unwrap();
            assert!(out.enhanced.iter().all(|v| v.is_finite()));
            let (lo, hi) = out.mask_range.unwrap();
            assert!(lo >= 0.0 && hi <= 1.0, "mask range [{lo}, {hi}]");
        }
    }

    #[test]
    fn probe_recovers_pure_delays() {
        let far = synthetic_speech(88, 5.0).unwrap();
        let cfg = PipelineConfig::default();
        for delay_frames in [0usize, 8, 32] {
            let d = delay_frames * 256;
            let mut mic = vec![0.0; far.len()];
            for i in d..far.len() {
                mic[i] = 0.6 * far[i - d];
            }
            let probe = probe_delay(&far, &mic, &cfg).unwrap();
            assert_eq!(probe.peak_index, delay_frames, "delay {delay_frames} frames");
            assert!(!probe.out_of_span);
            assert!(probe.dist.max_row_sum_deviation() < 1e-6);
        }
    }

    #[test]
    fn probe_flags_out_of_span_delay() {
        let far = synthetic_speech(89, 6.0).unwrap();
        // 75 frames = 1.2 s, beyond the 64-frame span.
        let d = 75 * 256;
        let mut mic = vec![0.0; far.len()];
        for i in d..far.len() {
            mic[i] = 0.6 * far[i - d];
        }
        let probe = probe_delay(&far, &mic, &PipelineConfig::default()).unwrap();
        assert!(probe.out_of_span, "peak {} at {}", probe.averaged[probe.peak_index], probe.peak_index);
    }

    #[test]
    fn probe_rejects_short_signals() {
        let cfg = PipelineConfig::default();
        assert!(probe_delay(&[0.0; 100], &[0.0; 100], &cfg).is_err());
    }
}
