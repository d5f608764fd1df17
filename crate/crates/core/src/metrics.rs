//! Objective evaluation: scale-invariant SDR and segment-labelled ERLE.

use std::ops::Range;

use crate::scene::Scenario;
use crate::{Error, Result};

/// Cap applied when the projection residual underflows (perfect or
/// near-perfect reconstruction).
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Scale-invariant signal-to-distortion ratio in dB: the estimate is
/// projected onto the reference and the ratio of target power to residual
/// power is returned, capped at +100 dB.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.is_empty() || reference.len() != estimate.len() {
        return Err(Error::InvalidInput(format!(
            "si_sdr: lengths {} vs {}",
            reference.len(),
            estimate.len()
        )));
    }
    let ref_power: f64 = reference.iter().map(|v| v * v).sum();
    if ref_power == 0.0 {
        return Err(Error::InvalidInput("si_sdr: reference is all zero".into()));
    }
    let dot: f64 = reference.iter().zip(estimate).map(|(r, e)| r * e).sum();
    let scale = dot / ref_power;
    let target_power = scale * scale * ref_power;
    let residual_power: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let d = e - scale * r;
            d * d
        })
        .sum();
    if residual_power <= target_power * 1e-10 || residual_power == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target_power / residual_power).log10()).min(SI_SDR_CAP_DB))
}

/// A labelled sample range of a test scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub range: Range<usize>,
    pub label: Scenario,
}

impl Segment {
    pub fn new(range: Range<usize>, label: Scenario) -> Self {
        Self { range, label }
    }
}

/// Echo return loss enhancement over the far-end single-talk segments:
/// `10*log10(P_mic / P_processed)` with powers summed over FST-labelled
/// samples only.
pub fn erle(mic: &[f64], processed: &[f64], segments: &[Segment]) -> Result<f64> {
    if mic.is_empty() || mic.len() != processed.len() {
        return Err(Error::InvalidInput(format!(
            "erle: lengths {} vs {}",
            mic.len(),
            processed.len()
        )));
    }
    let mut p_mic = 0.0;
    let mut p_proc = 0.0;
    let mut any = false;
    for seg in segments.iter().filter(|s| s.label == Scenario::FarSingleTalk) {
        if seg.range.end > mic.len() || seg.range.start >= seg.range.end {
            return Err(Error::InvalidInput(format!(
                "erle: segment {:?} outside signal of {} samples",
                seg.range,
                mic.len()
            )));
        }
        any = true;
        for i in seg.range.clone() {
            p_mic += mic[i] * mic[i];
            p_proc += processed[i] * processed[i];
        }
    }
    if !any {
        return Err(Error::InvalidInput("erle: no FST segments given".into()));
    }
    if p_mic == 0.0 {
        return Err(Error::InvalidInput("erle: FST segments are silent".into()));
    }
    let floored = p_proc.max(1e-12 * p_mic);
    Ok(10.0 * (p_mic / floored).log10())
}

/// Evaluation summary with an optional per-segment breakdown.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub si_sdr_db: Option<f64>,
    pub erle_db: Option<f64>,
    pub segments: Vec<(String, f64)>,
}

impl MetricReport {
    /// Aligned-column text rendering.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        let mut push = |name: &str, value: f64| {
            let capped = if value >= SI_SDR_CAP_DB { " (capped)" } else { "" };
            out.push_str(&format!("{name:<24} {value:>10.2} dB{capped}\n"));
        };
        if let Some(v) = self.si_sdr_db {
            push("si-sdr", v);
        }
        if let Some(v) = self.erle_db {
            push("erle (fst)", v);
        }
        for (label, v) in &self.segments {
            push(label, *v);
        }
        out
    }

    /// CSV rendering, `metric,value_db` per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value_db\n");
        if let Some(v) = self.si_sdr_db {
            out.push_str(&format!("si_sdr,{v}\n"));
        }
        if let Some(v) = self.erle_db {
            out.push_str(&format!("erle,{v}\n"));
        }
        for (label, v) in &self.segments {
            out.push_str(&format!("{label},{v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn white_noise(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn perfect_and_scaled_estimates_are_capped() {
        let s = white_noise(1, 4000);
        assert_eq!(si_sdr(&s, &s).unwrap(), SI_SDR_CAP_DB);
        let scaled: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&s, &scaled).unwrap(), SI_SDR_CAP_DB);
    }

    #[test]
    fn orthogonal_noise_at_minus_20_db_gives_20_db() {
        // Orthogonal construction: reference on even samples, noise on odd
        // samples, with noise power 1/100 of signal power.
        let n = 8000;
        let mut reference = vec![0.0; n];
        let mut estimate = vec![0.0; n];
        let noise = white_noise(2, n);
        let mut sig_p = 0.0;
        for i in (0..n).step_by(2) {
            reference[i] = noise[i];
            sig_p += noise[i] * noise[i];
        }
        let mut noise_p = 0.0;
        for i in (1..n).step_by(2) {
            noise_p += noise[i] * noise[i];
        }
        let scale = (sig_p / (100.0 * noise_p)).sqrt();
        for i in 0..n {
            estimate[i] = reference[i] + if i % 2 == 1 { scale * noise[i] } else { 0.0 };
        }
        let v = si_sdr(&reference, &estimate).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn scale_invariance_is_exact() {
        let s = white_noise(3, 2000);
        let noisy: Vec<f64> =
            s.iter().zip(white_noise(4, 2000)).map(|(a, b)| a + 0.05 * b).collect();
        let base = si_sdr(&s, &noisy).unwrap();
        for c in [0.1, 3.0, 257.0] {
            let scaled: Vec<f64> = noisy.iter().map(|v| c * v).collect();
            let got = si_sdr(&s, &scaled).unwrap();
            assert!((got - base).abs() < 1e-9, "scale {c}: {got} vs {base}");
        }
    }

    #[test]
    fn si_sdr_decreases_with_noise_power() {
        let s = white_noise(5, 4000);
        let n = white_noise(6, 4000);
        let mut last = f64::INFINITY;
        for gain in [0.01, 0.03, 0.1, 0.3, 1.0] {
            let est: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + gain * b).collect();
            let v = si_sdr(&s, &est).unwrap();
            assert!(v < last, "gain {gain}: {v} not below {last}");
            last = v;
        }
    }

    #[test]
    fn si_sdr_input_validation() {
        assert!(si_sdr(&[], &[]).is_err());
        assert!(si_sdr(&[1.0], &[1.0, 2.0]).is_err());
        assert!(si_sdr(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn erle_fixed_ratios() {
        let mic = white_noise(7, 6000);
        let segs = [Segment::new(0..6000, Scenario::FarSingleTalk)];
        assert!(erle(&mic, &mic, &segs).unwrap().abs() < 1e-12);
        let tiny: Vec<f64> = mic.iter().map(|v| 0.01 * v).collect();
        let v = erle(&mic, &tiny, &segs).unwrap();
        assert!((v - 40.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn erle_uses_only_fst_segments() {
        let mic = white_noise(8, 6000);
        let mut processed = mic.clone();
        // Perfect suppression inside FST, untouched elsewhere.
        for v in processed[2000..4000].iter_mut() {
            *v = 0.0;
        }
        let segs = [
            Segment::new(0..2000, Scenario::DoubleTalk),
            Segment::new(2000..4000, Scenario::FarSingleTalk),
            Segment::new(4000..6000, Scenario::NearSingleTalk),
        ];
        let v = erle(&mic, &processed, &segs).unwrap();
        assert!(v > 100.0, "floored suppression should exceed 100 dB, got {v}");
        let no_fst = [Segment::new(0..6000, Scenario::DoubleTalk)];
        assert!(erle(&mic, &processed, &no_fst).is_err());
    }

    #[test]
    fn erle_gain_additivity() {
        let mic = white_noise(9, 4000);
        let segs = [Segment::new(0..4000, Scenario::FarSingleTalk)];
        let base: Vec<f64> = mic.iter().map(|v| 0.1 * v).collect();
        let erle_base = erle(&mic, &base, &segs).unwrap();
        for g in [0.5, 2.0] {
            let scaled: Vec<f64> = base.iter().map(|v| g * v).collect();
            let got = erle(&mic, &scaled, &segs).unwrap();
            let expect = erle_base - 20.0 * g.log10();
            assert!((got - expect).abs() < 1e-9, "gain {g}: {got} vs {expect}");
        }
    }

    #[test]
    fn report_rendering() {
        let report = MetricReport {
            si_sdr_db: Some(12.345),
            erle_db: Some(30.0),
            segments: vec![("fst 0..2".into(), 25.0)],
        };
        let table = report.format_table();
        assert!(table.contains("si-sdr"));
        assert!(table.contains("12.35"));
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,value_db\n"));
        assert!(csv.contains("erle,30"));
    }
}
