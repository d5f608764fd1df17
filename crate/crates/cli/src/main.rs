use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aenr_cli::commands;

/// Hybrid acoustic echo and noise reduction at 16 kHz: a partitioned-block
/// Kalman echo canceller followed by a low-complexity neural post-filter.
#[derive(Parser)]
#[command(name = "aenr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic test scene (mic, far-end and reference WAVs).
    Simulate {
        /// Scene type: nst, fst or dt.
        #[arg(long, default_value = "dt")]
        scenario: String,
        /// Signal-to-echo ratio in dB, [-20, 20].
        #[arg(long, default_value_t = 0.0)]
        ser: f64,
        /// Signal-to-noise ratio in dB, [-5, 30].
        #[arg(long, default_value_t = 20.0)]
        snr: f64,
        /// Echo delay in milliseconds, [0, 1500].
        #[arg(long, default_value_t = 0.0)]
        delay_ms: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10.0)]
        duration_s: f64,
        /// Reverberation time of the synthetic impulse response.
        #[arg(long, default_value_t = 150.0)]
        t60_ms: f64,
        #[arg(long, default_value_t = 2048)]
        rir_len: usize,
        /// Loudspeaker model: none, `clip:T` (threshold) or `sigmoid:G` (gain).
        #[arg(long, default_value = "none")]
        nonlinearity: String,
        /// Optional low-pass cutoff applied to the microphone components.
        #[arg(long)]
        bandlimit_hz: Option<f64>,
        /// Output sample encoding: float or pcm16.
        #[arg(long, default_value = "float")]
        format: String,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the processing chain over mic/far-end WAVs.
    Process {
        #[arg(long)]
        mic: PathBuf,
        #[arg(long)]
        far: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// full (echo canceller + post-filter) or kf-only.
        #[arg(long, default_value = "full")]
        stage: String,
        /// Feed the engine in small chunks (output is identical to batch).
        #[arg(long)]
        streaming: bool,
        /// Weight file (binary store); defaults to seeded random init.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Seed for random weight init (when no weight file is given).
        #[arg(long)]
        seed: Option<u64>,
        /// Clean near-end reference; prints an SI-SDR report when given.
        #[arg(long)]
        near_ref: Option<PathBuf>,
        /// Also write the metric report as CSV.
        #[arg(long)]
        metrics_csv: Option<PathBuf>,
        /// Save the weights actually used (binary store format).
        #[arg(long)]
        export_weights: Option<PathBuf>,
    },
    /// Estimate the echo delay distribution from a far-end/mic pair.
    ProbeDelay {
        #[arg(long)]
        far: PathBuf,
        #[arg(long)]
        mic: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV (frame,d1..dN probability rows).
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the feature reorientation table as CSV.
    FeaturesDump {
        /// Override the layout mode: sampled or subband.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Objective metrics between a reference and an estimate.
    Metrics {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        /// Unprocessed microphone signal (needed for ERLE).
        #[arg(long)]
        mic: Option<PathBuf>,
        /// Far-end single-talk segments as start:end sample ranges.
        #[arg(long)]
        fst: Vec<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Report model complexity and measured real-time factor.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Length of the timed stream in seconds.
        #[arg(long, default_value_t = 60.0)]
        seconds: f64,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate {
            scenario,
            ser,
            snr,
            delay_ms,
            seed,
            duration_s,
            t60_ms,
            rir_len,
            nonlinearity,
            bandlimit_hz,
            format,
            out_dir,
        } => commands::simulate(
            scenario,
            *ser,
            *snr,
            *delay_ms,
            *seed,
            *duration_s,
            *t60_ms,
            *rir_len,
            nonlinearity,
            *bandlimit_hz,
            format,
            out_dir,
        ),
        Command::Process {
            mic,
            far,
            out,
            config,
            stage,
            streaming,
            weights,
            seed,
            near_ref,
            metrics_csv,
            export_weights,
        } => commands::process(
            mic,
            far,
            out,
            config.as_deref(),
            stage,
            *streaming,
            weights.as_deref(),
            *seed,
            near_ref.as_deref(),
            metrics_csv.as_deref(),
            export_weights.as_deref(),
        ),
        Command::ProbeDelay { far, mic, config, out } => {
            commands::probe(far, mic, config.as_deref(), out)
        }
        Command::FeaturesDump { mode, config, out } => {
            commands::features_dump(mode.as_deref(), config.as_deref(), out.as_deref())
        }
        Command::Metrics { reference, estimate, mic, fst, csv } => {
            commands::metrics(reference, estimate, mic.as_deref(), fst, csv.as_deref())
        }
        Command::Bench { config, seconds, repeat, seed } => {
            commands::bench(config.as_deref(), *seconds, *repeat, *seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code)
        }
    }
}
