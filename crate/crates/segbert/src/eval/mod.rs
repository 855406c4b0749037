//! Objective prosody comparison between reference and synthesized
//! utterances: F0 on DTW-paired voiced frames, per-phone energy and duration,
//! each scored by Pearson correlation and mean square error.

pub mod f0;

use rayon::prelude::*;
use thiserror::Error;

use crate::features::{AlignmentRecord, MelSpectrogram, Utterance, Waveform};
use crate::template::{dtw_align, DtwError, DtwMapping};

pub use f0::{estimate_f0, voiced_median, F0Config};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("vectors of length {a} and {b} cannot be compared")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least two points, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: {0} input has zero variance")]
    ZeroVariance(&'static str),
    #[error(transparent)]
    Dtw(#[from] DtwError),
    #[error("no utterance pairs to compare")]
    EmptyPairs,
}

/// Standard Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.len() < 2 {
        return Err(EvalError::TooShort(a.len()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 {
        return Err(EvalError::ZeroVariance("first"));
    }
    if vb == 0.0 {
        return Err(EvalError::ZeroVariance("second"));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean of squared differences.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.is_empty() {
        return Err(EvalError::TooShort(0));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Per-phone mean of the frame log energies, where a frame's log energy is
/// the log-sum-exp of its mel bins.
pub fn phone_energy(mel: &MelSpectrogram, align: &AlignmentRecord) -> Vec<f64> {
    align
        .phones
        .iter()
        .map(|p| {
            let frames = (p.start_frame as usize)..(p.end_frame as usize);
            let n = frames.len() as f64;
            frames.map(|t| log_sum_exp(mel.frames.row(t))).sum::<f64>() / n
        })
        .collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Per-phone frame counts.
pub fn phone_durations(align: &AlignmentRecord) -> Vec<f64> {
    align.phones.iter().map(|p| (p.end_frame - p.start_frame) as f64).collect()
}

/// Frame pairing between a reference and a synthesized mel (the two are not
/// time-synchronous in general).
pub fn align_tracks(reference: &MelSpectrogram, hypothesis: &MelSpectrogram) -> Result<DtwMapping, EvalError> {
    let (mapping, _) = dtw_align(&reference.frames, &hypothesis.frames)?;
    Ok(mapping)
}

/// One utterance pair to score. Waveforms are optional (no F0 without them);
/// a hypothesis alignment is optional (no duration metric without it).
pub struct EvalPair<'a> {
    pub reference: &'a Utterance,
    pub ref_waveform: Option<&'a Waveform>,
    pub hyp_mel: &'a MelSpectrogram,
    pub hyp_waveform: Option<&'a Waveform>,
    pub hyp_alignment: Option<&'a AlignmentRecord>,
}

/// One factor's scores. `None` values mean the factor could not be computed;
/// `flags` says why. Values are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorReport {
    pub factor: &'static str,
    pub correlation: Option<f64>,
    pub mse: Option<f64>,
    /// Pooled sample count the scores were computed over.
    pub count: usize,
    pub flags: String,
}

/// The 3 factors x 2 metrics table.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub f0: FactorReport,
    pub energy: FactorReport,
    pub duration: FactorReport,
    pub utterances: usize,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("factor,correlation,mse,count,flags\n");
        for fr in [&self.f0, &self.energy, &self.duration] {
            let corr = fr.correlation.map(|v| format!("{v:.6}")).unwrap_or_default();
            let m = fr.mse.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", fr.factor, corr, m, fr.count, fr.flags));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct F0Contour {
    pub utterance: String,
    /// (reference Hz, hypothesis Hz) on DTW-paired voiced frames.
    pub paired: Vec<(f64, f64)>,
}

struct PairFactors {
    f0: Vec<(f64, f64)>,
    energy: Vec<(f64, f64)>,
    duration: Vec<(f64, f64)>,
    f0_skipped: bool,
    duration_skipped: bool,
}

/// How factor samples combine across utterances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoolingMode {
    /// Concatenate all samples, then score once.
    #[default]
    Concat,
    /// Score each utterance separately and average the defined scores.
    PerUtterance,
}

/// Scores a set of utterance pairs. Pair processing is parallel; the
/// reduction order is the input order.
pub fn compare(
    pairs: &[EvalPair<'_>],
    f0_cfg: &F0Config,
    pooling: PoolingMode,
) -> Result<(MetricsReport, Vec<F0Contour>), EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    let per_pair: Vec<PairFactors> = pairs
        .par_iter()
        .map(|p| pair_factors(p, f0_cfg))
        .collect::<Result<_, _>>()?;

    let contours = pairs
        .iter()
        .zip(&per_pair)
        .map(|(p, f)| F0Contour { utterance: p.reference.id.clone(), paired: f.f0.clone() })
        .collect();
    let f0_skipped = per_pair.iter().any(|f| f.f0_skipped);
    let duration_skipped = per_pair.iter().any(|f| f.duration_skipped);

    let report = match pooling {
        PoolingMode::Concat => {
            let pool = |get: fn(&PairFactors) -> &Vec<(f64, f64)>| -> Vec<(f64, f64)> {
                per_pair.iter().flat_map(|f| get(f).iter().copied()).collect()
            };
            MetricsReport {
                f0: score_factor("f0", &pool(|f| &f.f0), f0_skipped, "no-waveforms"),
                energy: score_factor("energy", &pool(|f| &f.energy), false, ""),
                duration: score_factor("duration", &pool(|f| &f.duration), duration_skipped, "no-hyp-alignment"),
                utterances: pairs.len(),
            }
        }
        PoolingMode::PerUtterance => MetricsReport {
            f0: score_factor_averaged("f0", per_pair.iter().map(|f| f.f0.as_slice()), f0_skipped, "no-waveforms"),
            energy: score_factor_averaged("energy", per_pair.iter().map(|f| f.energy.as_slice()), false, ""),
            duration: score_factor_averaged(
                "duration",
                per_pair.iter().map(|f| f.duration.as_slice()),
                duration_skipped,
                "no-hyp-alignment",
            ),
            utterances: pairs.len(),
        },
    };
    Ok((report, contours))
}

fn score_factor_averaged<'s>(
    name: &'static str,
    per_utt: impl Iterator<Item = &'s [(f64, f64)]>,
    skipped: bool,
    skip_reason: &str,
) -> FactorReport {
    if skipped {
        return FactorReport { factor: name, correlation: None, mse: None, count: 0, flags: format!("skipped:{skip_reason}") };
    }
    let (mut corr_sum, mut corr_n) = (0.0, 0usize);
    let (mut mse_sum, mut mse_n) = (0.0, 0usize);
    let mut count = 0usize;
    for samples in per_utt {
        let scored = score_factor(name, samples, false, "");
        count += scored.count;
        if let Some(r) = scored.correlation {
            corr_sum += r;
            corr_n += 1;
        }
        if let Some(m) = scored.mse {
            mse_sum += m;
            mse_n += 1;
        }
    }
    FactorReport {
        factor: name,
        correlation: (corr_n > 0).then(|| corr_sum / corr_n as f64),
        mse: (mse_n > 0).then(|| mse_sum / mse_n as f64),
        count,
        flags: if corr_n > 0 { "ok:per-utterance".into() } else { "undefined-correlation".into() },
    }
}

fn score_factor(name: &'static str, pairs: &[(f64, f64)], skipped: bool, skip_reason: &str) -> FactorReport {
    if skipped || pairs.len() < 2 {
        let flags = if skipped { format!("skipped:{skip_reason}") } else { "skipped:too-few-samples".to_string() };
        return FactorReport { factor: name, correlation: None, mse: None, count: pairs.len(), flags };
    }
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let m = mse(&a, &b).ok();
    match pearson(&a, &b) {
        Ok(r) => FactorReport { factor: name, correlation: Some(r), mse: m, count: pairs.len(), flags: "ok".into() },
        Err(EvalError::ZeroVariance(_)) => {
            FactorReport { factor: name, correlation: None, mse: m, count: pairs.len(), flags: "undefined-correlation".into() }
        }
        Err(_) => FactorReport { factor: name, correlation: None, mse: m, count: pairs.len(), flags: "error".into() },
    }
}

fn pair_factors(p: &EvalPair<'_>, f0_cfg: &F0Config) -> Result<PairFactors, EvalError> {
    // energy always compares per-phone; without a hypothesis alignment the
    // teacher-forced setting reuses the reference alignment (lengths match)
    let hyp_align = p.hyp_alignment.unwrap_or(&p.reference.alignment);
    let ref_energy = phone_energy(&p.reference.mel, &p.reference.alignment);
    let hyp_energy = phone_energy_clamped(p.hyp_mel, hyp_align);
    let energy: Vec<(f64, f64)> = ref_energy.into_iter().zip(hyp_energy).collect();

    let (duration, duration_skipped) = match p.hyp_alignment {
        Some(h) => {
            let rd = phone_durations(&p.reference.alignment);
            let hd = phone_durations(h);
            (rd.into_iter().zip(hd).collect(), false)
        }
        None => (Vec::new(), true),
    };

    let (f0_pairs, f0_skipped) = match (p.ref_waveform, p.hyp_waveform) {
        (Some(rw), Some(hw)) => {
            let rf = estimate_f0(&rw.samples, rw.sample_rate, f0_cfg);
            let hf = estimate_f0(&hw.samples, hw.sample_rate, f0_cfg);
            let mapping = align_tracks(&p.reference.mel, p.hyp_mel)?;
            let mut pairs = Vec::new();
            for &(i, j) in &mapping.path {
                // f0 tracks use a longer analysis window than the mel, so
                // clamp frame indices into the track
                let a = rf.get(i.min(rf.len().saturating_sub(1))).copied().unwrap_or(0.0);
                let b = hf.get(j.min(hf.len().saturating_sub(1))).copied().unwrap_or(0.0);
                if a > 0.0 && b > 0.0 {
                    pairs.push((a, b));
                }
            }
            (pairs, false)
        }
        _ => (Vec::new(), true),
    };

    Ok(PairFactors { f0: f0_pairs, energy, duration, f0_skipped, duration_skipped })
}

/// Like [`phone_energy`] but tolerant of a hypothesis mel shorter than the
/// alignment (free-running decodes may truncate): frames are clamped.
fn phone_energy_clamped(mel: &MelSpectrogram, align: &AlignmentRecord) -> Vec<f64> {
    let t = mel.t();
    align
        .phones
        .iter()
        .map(|p| {
            let start = (p.start_frame as usize).min(t.saturating_sub(1));
            let end = (p.end_frame as usize).min(t).max(start + 1);
            let n = (end - start) as f64;
            (start..end).map(|fr| log_sum_exp(mel.frames.row(fr))).sum::<f64>() / n
        })
        .collect()
}

/// Contour CSV for external plotting: one row per paired voiced frame.
pub fn contour_csv(c: &F0Contour) -> String {
    let mut out = String::from("ref_hz,hyp_hz\n");
    for (a, b) in &c.paired {
        out.push_str(&format!("{a:.3},{b:.3}\n"));
    }
    out
}
