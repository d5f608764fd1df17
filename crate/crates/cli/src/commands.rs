//! Subcommand implementations.

use std::path::Path;
use std::time::Instant;

use aenr_core::metrics::{erle, si_sdr, MetricReport, Segment};
use aenr_core::model::{complexity, WeightSource, WeightStore};
use aenr_core::pipeline::{probe_delay, Pipeline, Stage};
use aenr_core::scene::{self, Nonlinearity, SceneSpec, Scenario};

use crate::config::FileConfig;
use crate::wav::{self, WavFormat};
use crate::{CliError, CliResult};

/// Published complexity figures the bench output compares against.
const REFERENCE_PARAMS_M: f64 = 0.69;
const REFERENCE_GMACS: f64 = 0.10;

fn load_config(path: Option<&Path>) -> CliResult<FileConfig> {
    match path {
        Some(p) => crate::config::load(p),
        None => {
            let cfg = FileConfig::default();
            cfg.pipeline.validate()?;
            Ok(cfg)
        }
    }
}

fn weight_source(cfg: &FileConfig, weights_flag: Option<&Path>, seed_flag: Option<u64>) -> CliResult<WeightSource> {
    let path = weights_flag.or(cfg.weights_path.as_deref());
    match path {
        Some(p) => {
            let store = WeightStore::load(p)
                .map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
            Ok(WeightSource::Store(store))
        }
        None => Ok(WeightSource::Random { seed: seed_flag.unwrap_or(cfg.seed) }),
    }
}

pub fn parse_nonlinearity(s: &str) -> CliResult<Nonlinearity> {
    if s == "none" {
        return Ok(Nonlinearity::None);
    }
    if let Some(v) = s.strip_prefix("clip:") {
        let threshold: f64 =
            v.parse().map_err(|_| CliError::usage(format!("nonlinearity: bad threshold {v:?}")))?;
        if threshold <= 0.0 {
            return Err(CliError::usage("nonlinearity: clip threshold must be > 0"));
        }
        return Ok(Nonlinearity::HardClip { threshold });
    }
    if let Some(v) = s.strip_prefix("sigmoid:") {
        let gain: f64 =
            v.parse().map_err(|_| CliError::usage(format!("nonlinearity: bad gain {v:?}")))?;
        if gain <= 0.0 {
            return Err(CliError::usage("nonlinearity: sigmoid gain must be > 0"));
        }
        return Ok(Nonlinearity::Sigmoid { gain });
    }
    Err(CliError::usage(format!(
        "nonlinearity: unknown value {s:?} (expected none|clip:<threshold>|sigmoid:<gain>)"
    )))
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    scenario: &str,
    ser: f64,
    snr: f64,
    delay_ms: f64,
    seed: u64,
    duration_s: f64,
    t60_ms: f64,
    rir_len: usize,
    nonlinearity: &str,
    bandlimit_hz: Option<f64>,
    format: &str,
    out_dir: &Path,
) -> CliResult<()> {
    let scenario = Scenario::parse(scenario)?;
    let nonlinearity = parse_nonlinearity(nonlinearity)?;
    let format = WavFormat::parse(format)?;
    let spec = SceneSpec {
        scenario,
        ser_db: ser,
        snr_db: snr,
        delay_ms,
        rir: scene::exponential_rir(seed ^ 0x5245_5242, t60_ms, rir_len),
        nonlinearity,
        bandlimit_hz,
        seed,
    };
    let near_seed = seed;
    let far_seed = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let near = scene::synthetic_speech(near_seed, duration_s)?;
    let far = scene::synthetic_speech(far_seed, duration_s)?;
    let out = scene::generate(&spec, &near, &far)?;

    std::fs::create_dir_all(out_dir)?;
    wav::write(&out_dir.join("x.wav"), &out.mic, format)?;
    wav::write(&out_dir.join("y.wav"), &out.far_end, format)?;
    wav::write(&out_dir.join("s.wav"), &out.near_ref, format)?;
    wav::write(&out_dir.join("e.wav"), &out.echo_ref, format)?;
    wav::write(&out_dir.join("v.wav"), &out.noise_ref, format)?;

    let mut meta = String::new();
    meta.push_str(&format!("scenario = {}\n", spec.scenario.name()));
    meta.push_str(&format!("ser_db = {}\n", spec.ser_db));
    meta.push_str(&format!("snr_db = {}\n", spec.snr_db));
    meta.push_str(&format!("delay_ms = {}\n", spec.delay_ms));
    meta.push_str(&format!("rir_len = {}\n", spec.rir.len()));
    meta.push_str(&format!("rir_t60_ms = {t60_ms}\n"));
    meta.push_str(&format!("nonlinearity = {nonlinearity:?}\n"));
    meta.push_str(&format!("bandlimit_hz = {bandlimit_hz:?}\n"));
    meta.push_str(&format!("seed = {}\n", spec.seed));
    meta.push_str(&format!("near_seed = {near_seed}\n"));
    meta.push_str(&format!("far_seed = {far_seed}\n"));
    meta.push_str(&format!("duration_s = {duration_s}\n"));
    if let Some(r) = scene::measure_ser_db(&out) {
        meta.push_str(&format!("realized_ser_db = {r:.6}\n"));
    }
    if let Some(r) = scene::measure_snr_db(&out, spec.scenario) {
        meta.push_str(&format!("realized_snr_db = {r:.6}\n"));
    }
    std::fs::write(out_dir.join("meta.txt"), meta)?;
    println!("wrote x/y/s/e/v.wav and meta.txt to {}", out_dir.display());
    Ok(())
}

pub fn parse_stage(s: &str) -> CliResult<Stage> {
    match s {
        "full" => Ok(Stage::Full),
        "kf-only" => Ok(Stage::KfOnly),
        other => Err(CliError::usage(format!("stage: unknown value {other:?} (expected full|kf-only)"))),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn process(
    mic_path: &Path,
    far_path: &Path,
    out_path: &Path,
    config_path: Option<&Path>,
    stage: &str,
    streaming: bool,
    weights: Option<&Path>,
    seed: Option<u64>,
    near_ref: Option<&Path>,
    metrics_csv: Option<&Path>,
    export_weights: Option<&Path>,
) -> CliResult<()> {
    let stage = parse_stage(stage)?;
    let cfg = load_config(config_path)?;
    let mic = wav::read(mic_path)?;
    let far = wav::read(far_path)?;
    if mic.is_empty() {
        return Err(CliError::usage(format!("{}: empty signal", mic_path.display())));
    }
    if far.is_empty() {
        return Err(CliError::usage(format!("{}: empty signal", far_path.display())));
    }
    let source = weight_source(&cfg, weights, seed)?;
    let pipeline = Pipeline::new(cfg.pipeline, source)?;
    if let Some(path) = export_weights {
        pipeline
            .model()
            .to_store()
            .save(path)
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        println!("wrote weights to {}", path.display());
    }

    let enhanced = if streaming {
        let mut stream = pipeline.stream(stage)?;
        let n = mic.len().min(far.len());
        let mut out = Vec::new();
        for start in (0..n).step_by(160) {
            let end = (start + 160).min(n);
            out.extend(stream.push(&mic[start..end], &far[start..end])?);
        }
        out.extend(stream.finish());
        out
    } else {
        pipeline.process(&mic, &far, stage)?.enhanced
    };
    wav::write(out_path, &enhanced, WavFormat::Float32)?;
    println!("wrote {} ({} samples)", out_path.display(), enhanced.len());

    if let Some(ref_path) = near_ref {
        let reference = wav::read(ref_path)?;
        let n = reference.len().min(enhanced.len());
        if n == 0 {
            return Err(CliError::usage("near reference or output is empty"));
        }
        let report = MetricReport {
            si_sdr_db: Some(si_sdr(&reference[..n], &enhanced[..n])?),
            erle_db: None,
            segments: Vec::new(),
        };
        print!("{}", report.format_table());
        if let Some(csv) = metrics_csv {
            std::fs::write(csv, report.to_csv())?;
        }
    }
    Ok(())
}

pub fn probe(
    far_path: &Path,
    mic_path: &Path,
    config_path: Option<&Path>,
    out_csv: &Path,
) -> CliResult<()> {
    let cfg = load_config(config_path)?;
    let far = wav::read(far_path)?;
    let mic = wav::read(mic_path)?;
    let result = probe_delay(&far, &mic, &cfg.pipeline)?;

    let d_max = result.dist.delays();
    let mut csv = String::new();
    if result.out_of_span {
        csv.push_str("# out-of-span: no stable peak within the alignment span\n");
    }
    csv.push_str("frame");
    for d in 1..=d_max {
        csv.push_str(&format!(",d{d}"));
    }
    csv.push('\n');
    for t in 0..result.dist.frames() {
        csv.push_str(&t.to_string());
        for &v in result.dist.row(t) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    std::fs::write(out_csv, csv)?;

    let hop_ms = 1000.0 * 256.0 / 16000.0;
    println!(
        "peak delay: {} frames ({} ms), z={:.1}, out_of_span={}",
        result.peak_index,
        result.peak_index as f64 * hop_ms,
        result.peak_z,
        result.out_of_span
    );
    println!("wrote {}", out_csv.display());
    Ok(())
}

pub fn features_dump(
    mode: Option<&str>,
    config_path: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    let cfg = load_config(config_path)?;
    let layout = match mode {
        None => cfg.pipeline.model.layout.clone(),
        Some(m) => {
            let mode = aenr_core::features::ReorientMode::parse(m)?;
            let l = &cfg.pipeline.model.layout;
            aenr_core::features::ReorientLayout::new(
                l.num_bins,
                l.subband_size,
                l.overlap,
                l.sampling_factor,
                mode,
            )?
        }
    };
    let mut csv = String::from("subband,channel,position\n");
    for b in 0..layout.subband_count {
        let (channel, position) = layout.subband_placement(b);
        csv.push_str(&format!("{b},{channel},{position}\n"));
    }
    match out {
        Some(path) => {
            std::fs::write(path, csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn parse_range(s: &str) -> CliResult<std::ops::Range<usize>> {
    let Some((a, b)) = s.split_once(':') else {
        return Err(CliError::usage(format!("segment {s:?}: expected start:end in samples")));
    };
    let start: usize =
        a.parse().map_err(|_| CliError::usage(format!("segment start {a:?} is not an integer")))?;
    let end: usize =
        b.parse().map_err(|_| CliError::usage(format!("segment end {b:?} is not an integer")))?;
    if end <= start {
        return Err(CliError::usage(format!("segment {s:?}: end must exceed start")));
    }
    Ok(start..end)
}

pub fn metrics(
    reference: &Path,
    estimate: &Path,
    mic: Option<&Path>,
    fst: &[String],
    csv: Option<&Path>,
) -> CliResult<()> {
    let reference_sig = wav::read(reference)?;
    let estimate_sig = wav::read(estimate)?;
    let n = reference_sig.len().min(estimate_sig.len());
    if n == 0 {
        return Err(CliError::usage("metrics: empty input"));
    }
    let mut report = MetricReport {
        si_sdr_db: Some(si_sdr(&reference_sig[..n], &estimate_sig[..n])?),
        erle_db: None,
        segments: Vec::new(),
    };
    if let Some(mic_path) = mic {
        if fst.is_empty() {
            return Err(CliError::usage("metrics: --mic given but no --fst segments"));
        }
        let mic_sig = wav::read(mic_path)?;
        let m = mic_sig.len().min(estimate_sig.len());
        let mut segments = Vec::new();
        for s in fst {
            let range = parse_range(s)?;
            if range.end > m {
                return Err(CliError::usage(format!(
                    "segment {s}: beyond signal length {m}"
                )));
            }
            segments.push(Segment::new(range, Scenario::FarSingleTalk));
        }
        let value = erle(&mic_sig[..m], &estimate_sig[..m], &segments)?;
        report.erle_db = Some(value);
        for seg in &segments {
            let one = erle(&mic_sig[..m], &estimate_sig[..m], std::slice::from_ref(seg))?;
            report.segments.push((format!("fst {}..{}", seg.range.start, seg.range.end), one));
        }
    }
    print!("{}", report.format_table());
    if let Some(path) = csv {
        std::fs::write(path, report.to_csv())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cpu_model() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".into())
}

pub fn bench(
    config_path: Option<&Path>,
    seconds: f64,
    repeat: usize,
    seed: Option<u64>,
) -> CliResult<()> {
    if seconds < 1.0 {
        return Err(CliError::usage("bench: --seconds must be >= 1"));
    }
    if repeat == 0 {
        return Err(CliError::usage("bench: --repeat must be >= 1"));
    }
    let cfg = load_config(config_path)?;
    let model_cfg = &cfg.pipeline.model;
    let params = complexity::param_count(model_cfg);
    let frame_rate = cfg.pipeline.stft.frame_rate();
    let macs_frame = complexity::macs_per_frame(model_cfg);
    let gmacs = complexity::macs_per_second(model_cfg, frame_rate) / 1e9;
    let params_m = params as f64 / 1e6;
    println!("params:          {params} ({params_m:.4} M)");
    println!(
        "  reference      {REFERENCE_PARAMS_M:.2} M  (deviation {:+.1}%)",
        100.0 * (params_m - REFERENCE_PARAMS_M) / REFERENCE_PARAMS_M
    );
    println!("macs per frame:  {macs_frame}");
    println!("gmacs:           {gmacs:.4} at {frame_rate} frames/s");
    println!(
        "  reference      {REFERENCE_GMACS:.2}    (deviation {:+.1}%)",
        100.0 * (gmacs - REFERENCE_GMACS) / REFERENCE_GMACS
    );

    let pipeline =
        Pipeline::new(cfg.pipeline.clone(), WeightSource::Random { seed: seed.unwrap_or(cfg.seed) })?;
    let near = scene::synthetic_speech(11, seconds)?;
    let far = scene::synthetic_speech(12, seconds)?;
    let spec = SceneSpec {
        scenario: Scenario::DoubleTalk,
        ser_db: 0.0,
        snr_db: 15.0,
        delay_ms: 96.0,
        rir: scene::exponential_rir(9, 120.0, 1600),
        nonlinearity: Nonlinearity::None,
        bandlimit_hz: None,
        seed: 3,
    };
    let out = scene::generate(&spec, &near, &far)?;

    let mut rtfs = Vec::with_capacity(repeat);
    for run in 0..repeat {
        let start = Instant::now();
        let result = pipeline.process(&out.mic, &out.far_end, Stage::Full)?;
        let elapsed = start.elapsed().as_secs_f64();
        let audio_secs = result.enhanced.len() as f64 / 16000.0;
        let rtf = elapsed / audio_secs;
        println!("run {}: {elapsed:.3} s for {audio_secs:.1} s audio, rtf {rtf:.4}", run + 1);
        rtfs.push(rtf);
    }
    rtfs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = rtfs[rtfs.len() / 2];
    let spread = rtfs.last().unwrap() - rtfs.first().unwrap();
    println!("rtf median:      {median:.4} (spread {spread:.4}, {} runs)", rtfs.len());
    println!("cpu:             {}", cpu_model());
    Ok(())
}
