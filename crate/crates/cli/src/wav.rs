//! WAV input/output: 16 kHz mono, 16-bit PCM or 32-bit float.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::{CliError, CliResult};

pub const SAMPLE_RATE: u32 = 16000;

/// Reads a mono 16 kHz WAV. 16-bit PCM samples are scaled to [-1, 1);
/// 32-bit float samples are taken as-is.
pub fn read(path: &Path) -> CliResult<Vec<f64>> {
    let reader = WavReader::open(path)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(CliError::usage(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(CliError::usage(format!(
            "{}: unsupported sample rate {} (expected {SAMPLE_RATE})",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?,
        (format, bits) => {
            return Err(CliError::usage(format!(
                "{}: unsupported format {format:?}/{bits} bits (expected 16-bit PCM or 32-bit float)",
                path.display()
            )));
        }
    };
    Ok(samples)
}

/// Sample encoding for written files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Float32,
    Pcm16,
}

impl WavFormat {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "float" => Ok(Self::Float32),
            "pcm16" => Ok(Self::Pcm16),
            other => Err(CliError::usage(format!(
                "format: unknown value {other:?} (expected float|pcm16)"
            ))),
        }
    }
}

/// Writes a mono 16 kHz WAV. Float output round-trips bit-exactly through
/// [`read`].
pub fn write(path: &Path, samples: &[f64], format: WavFormat) -> CliResult<()> {
    let spec = match format {
        WavFormat::Float32 => WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
        WavFormat::Pcm16 => WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
    };
    let mut writer = WavWriter::create(path, spec)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    match format {
        WavFormat::Float32 => {
            for &v in samples {
                writer
                    .write_sample(v as f32)
                    .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
            }
        }
        WavFormat::Pcm16 => {
            for &v in samples {
                let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer
                    .write_sample(q)
                    .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
            }
        }
    }
    writer.finalize().map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join("aenr_wav_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.wav");
        let samples: Vec<f64> = (0..1000).map(|i| ((i as f64) * 0.37).sin() * 0.5).collect();
        write(&path, &samples, WavFormat::Float32).unwrap();
        let back = read(&path).unwrap();
        let expected: Vec<f64> = samples.iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(back, expected);
        // And a second write of the same data is byte-identical.
        let path2 = dir.join("roundtrip2.wav");
        write(&path2, &back, WavFormat::Float32).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn pcm16_values_land_in_unit_range() {
        let dir = std::env::temp_dir().join("aenr_wav_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pcm.wav");
        write(&path, &[0.0, 0.5, -1.0, 0.999], WavFormat::Pcm16).unwrap();
        let back = read(&path).unwrap();
        assert!(back.iter().all(|&v| (-1.0..1.0).contains(&v)));
        assert_eq!(back[2], -1.0);
    }
}
