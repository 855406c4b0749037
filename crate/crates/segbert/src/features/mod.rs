//! Waveform-to-log-mel extraction, alignment ingestion and corpus assembly.

pub mod alignment;
pub mod corpus;
pub mod melfile;
pub mod wav;

use thiserror::Error;

use crate::mat::Mat;
pub use alignment::{AlignmentError, AlignmentRecord, Phone};
pub use corpus::{Corpus, Utterance};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("waveform of {samples} samples is shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("invalid mel config: {0}")]
    BadConfig(String),
}

/// Mono audio in [-1, 1].
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// T x B log mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Mat,
    pub frame_shift_ms: f64,
}

impl MelSpectrogram {
    pub fn t(&self) -> usize {
        self.frames.rows()
    }

    pub fn bins(&self) -> usize {
        self.frames.cols()
    }
}

/// Log-mel extraction parameters. The window length, mel scale variant and
/// energy floor are not dictated by anything upstream; these defaults pair a
/// 50 ms Hann window with the 12.5 ms shift and HTK mels.
#[derive(Clone, Copy, Debug)]
pub struct MelConfig {
    pub bins: usize,
    pub shift_ms: f64,
    pub window_ms: f64,
    pub fmin: f64,
    pub fmax: f64,
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { bins: 80, shift_ms: 12.5, window_ms: 50.0, fmin: 0.0, fmax: 8000.0, floor: 1e-10 }
    }
}

/// Closed-form frame count for a given waveform length.
pub fn frame_count(samples: usize, window: usize, shift: usize) -> Option<usize> {
    if samples < window {
        return None;
    }
    Some((samples - window) / shift + 1)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided DFT bins of a `window`-point
/// transform: `bins` rows of `window/2 + 1` weights, HTK mel spacing, peak 1.
pub fn mel_filterbank(bins: usize, window: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Mat {
    let nfft_bins = window / 2 + 1;
    let mel_lo = hz_to_mel(fmin);
    let mel_hi = hz_to_mel(fmax);
    // bins + 2 edge points, evenly spaced on the mel scale
    let edges: Vec<f64> = (0..bins + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (bins + 1) as f64))
        .collect();
    Mat::from_fn(bins, nfft_bins, |b, k| {
        let f = k as f64 * sample_rate as f64 / window as f64;
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        let rise = if mid > lo { (f - lo) / (mid - lo) } else { 0.0 };
        let fall = if hi > mid { (hi - f) / (hi - mid) } else { 0.0 };
        rise.min(fall).max(0.0)
    })
}

/// Log mel energies: per frame, `log(max(floor, filterbank . |DFT(hann*x)|^2))`.
/// T is exactly `(len - window)/shift + 1`.
pub fn compute_log_mel(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram, FeatureError> {
    if cfg.window_ms < cfg.shift_ms {
        return Err(FeatureError::BadConfig(format!("window {} ms < shift {} ms", cfg.window_ms, cfg.shift_ms)));
    }
    let nyquist = w.sample_rate as f64 / 2.0;
    if cfg.fmax > nyquist {
        return Err(FeatureError::BadConfig(format!("fmax {} above Nyquist {}", cfg.fmax, nyquist)));
    }
    let window = (cfg.window_ms * w.sample_rate as f64 / 1000.0).round() as usize;
    let shift = (cfg.shift_ms * w.sample_rate as f64 / 1000.0).round() as usize;
    if window == 0 || shift == 0 {
        return Err(FeatureError::BadConfig("window or shift rounds to zero samples".into()));
    }
    let t = frame_count(w.samples.len(), window, shift)
        .ok_or(FeatureError::TooShort { samples: w.samples.len(), window })?;

    let hann: Vec<f64> = (0..window)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / window as f64).cos())
        .collect();
    let fb = mel_filterbank(cfg.bins, window, w.sample_rate, cfg.fmin, cfg.fmax);
    let nfft_bins = window / 2 + 1;

    let mut frames = Mat::zeros(t, cfg.bins);
    let mut windowed = vec![0.0; window];
    let mut power = vec![0.0; nfft_bins];
    for fr in 0..t {
        let start = fr * shift;
        for (n, wv) in windowed.iter_mut().enumerate() {
            *wv = w.samples[start + n] * hann[n];
        }
        power_spectrum(&windowed, &mut power);
        for b in 0..cfg.bins {
            let row = fb.row(b);
            let mut e = 0.0;
            for (p, wgt) in power.iter().zip(row) {
                e += p * wgt;
            }
            frames.set(fr, b, e.max(cfg.floor).ln());
        }
    }
    Ok(MelSpectrogram { frames, frame_shift_ms: cfg.shift_ms })
}

/// One-sided power spectrum of an N-point DFT, evaluated by incremental
/// rotation per bin (the test oracle recomputes this with independent
/// direct-summation arithmetic).
fn power_spectrum(x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        let theta = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
        let (step_s, step_c) = theta.sin_cos();
        let (mut c, mut s) = (1.0, 0.0);
        let (mut re, mut im) = (0.0, 0.0);
        for &v in x {
            re += v * c;
            im += v * s;
            let nc = c * step_c - s * step_s;
            s = s * step_c + c * step_s;
            c = nc;
        }
        *o = re * re + im * im;
    }
}

/// Per-phone mel sub-matrices; stacking them reconstitutes the covered rows.
pub fn phone_segments<'a>(mel: &MelSpectrogram, align: &'a AlignmentRecord) -> Vec<(&'a str, Mat)> {
    align
        .phones
        .iter()
        .map(|p| {
            let len = (p.end_frame - p.start_frame) as usize;
            (p.id.as_str(), mel.frames.slice_rows(p.start_frame as usize, len))
        })
        .collect()
}

/// Frame span of each syllable: start of its first phone to end of its last.
pub fn syllable_spans(align: &AlignmentRecord) -> Vec<(usize, usize)> {
    align
        .syllables
        .iter()
        .map(|&(first, last)| {
            (
                align.phones[first as usize].start_frame as usize,
                align.phones[last as usize].end_frame as usize,
            )
        })
        .collect()
}
