//! Flat key-value configuration files: one `key = value` per line, `#`
//! starts a comment. Unknown keys are rejected. Anything not present
//! keeps its default; cross-field consistency is validated after parsing.

use std::path::{Path, PathBuf};

use aenr_core::features::{ReorientLayout, ReorientMode};
use aenr_core::pipeline::{InputRouting, PipelineConfig};

use crate::{CliError, CliResult};

/// Parsed configuration file: the pipeline settings plus CLI-level
/// extras (weight file and init seed).
#[derive(Debug, Clone)]
pub struct FileConfig {
    pub pipeline: PipelineConfig,
    pub weights_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self { pipeline: PipelineConfig::default(), weights_path: None, seed: 42 }
    }
}

struct LayoutKnobs {
    subband_size: usize,
    overlap: f64,
    sampling_factor: usize,
    mode: ReorientMode,
}

impl Default for LayoutKnobs {
    fn default() -> Self {
        Self { subband_size: 2, overlap: 0.0, sampling_factor: 5, mode: ReorientMode::Sampled }
    }
}

pub fn load(path: &Path) -> CliResult<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> CliResult<FileConfig> {
    let mut cfg = FileConfig::default();
    let mut layout = LayoutKnobs::default();
    let mut routing = InputRouting::ErrorFar;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::usage(format!(
                "config line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| {
            CliError::usage(format!("config key {key}: cannot parse {value:?} as {what}"))
        };
        let parse_usize =
            || -> CliResult<usize> { value.parse::<usize>().map_err(|_| bad("integer")) };
        macro_rules! parse_f64 {
            () => {
                value.parse::<f64>().map_err(|_| bad("number"))?
            };
        }
        match key {
            "stft.fft_size" => cfg.pipeline.stft.fft_size = parse_usize()?,
            "stft.window_len" => cfg.pipeline.stft.window_len = parse_usize()?,
            "stft.hop" => cfg.pipeline.stft.hop = parse_usize()?,
            "stft.sample_rate" => {
                cfg.pipeline.stft.sample_rate =
                    value.parse::<u32>().map_err(|_| bad("integer"))?
            }
            "kalman.partitions" => cfg.pipeline.kalman.num_partitions = parse_usize()?,
            "kalman.transition_factor" => cfg.pipeline.kalman.transition_factor = parse_f64!(),
            "kalman.noise_smoothing" => {
                cfg.pipeline.kalman.observation_noise_smoothing = parse_f64!()
            }
            "kalman.covariance_init" => cfg.pipeline.kalman.initial_covariance = parse_f64!(),
            "kalman.noise_floor" => cfg.pipeline.kalman.process_noise_floor = parse_f64!(),
            "features.alpha" => cfg.pipeline.alpha = parse_f64!(),
            "layout.subband_size" => layout.subband_size = parse_usize()?,
            "layout.overlap" => layout.overlap = parse_f64!(),
            "layout.sampling_factor" => layout.sampling_factor = parse_usize()?,
            "layout.mode" => layout.mode = ReorientMode::parse(value)?,
            "ta.similarity_channels" => cfg.pipeline.model.similarity_channels = parse_usize()?,
            "ta.d_max" => cfg.pipeline.model.d_max = parse_usize()?,
            "model.stream_filters" => cfg.pipeline.model.stream_filters = parse_usize()?,
            "model.joint_filters1" => cfg.pipeline.model.joint_filters1 = parse_usize()?,
            "model.joint_filters2" => cfg.pipeline.model.joint_filters2 = parse_usize()?,
            "model.fgru_hidden" => cfg.pipeline.model.fgru_hidden = parse_usize()?,
            "model.subband_groups" => cfg.pipeline.model.subband_groups = parse_usize()?,
            "model.subband_hidden" => cfg.pipeline.model.subband_hidden = parse_usize()?,
            "model.phase_hidden" => cfg.pipeline.model.phase_hidden = parse_usize()?,
            "routing" => routing = InputRouting::parse(value)?,
            "weights" => cfg.weights_path = Some(PathBuf::from(value)),
            "seed" => cfg.seed = value.parse::<u64>().map_err(|_| bad("integer"))?,
            other => {
                return Err(CliError::usage(format!("config: unknown key {other:?}")));
            }
        }
    }

    // Rebuild the derived pieces: kalman block clock, layout, channels.
    cfg.pipeline.kalman.fft_size = cfg.pipeline.stft.fft_size;
    cfg.pipeline.kalman.hop = cfg.pipeline.stft.hop;
    let num_bins = cfg.pipeline.stft.fft_size / 2 + 1;
    cfg.pipeline.model.num_bins = num_bins;
    cfg.pipeline.model.layout = ReorientLayout::new(
        num_bins,
        layout.subband_size,
        layout.overlap,
        layout.sampling_factor,
        layout.mode,
    )?;
    cfg.pipeline = cfg.pipeline.with_routing(routing);
    cfg.pipeline.validate()?;
    Ok(cfg)
}
