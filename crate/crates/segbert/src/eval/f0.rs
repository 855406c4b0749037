//! Frame-level F0 by normalized autocorrelation.
//!
//! Per frame, the normalized autocorrelation is scanned over the lag band
//! [sr/fmax, sr/fmin]; the best peak below the voicing threshold (or a
//! near-silent frame) reads as unvoiced (0 Hz). Lags stay integral, so the
//! estimate is the exact sr/lag grid point nearest the peak.

/// Voicing decision threshold on the normalized peak.
pub const VOICING_THRESHOLD: f64 = 0.3;

const ENERGY_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct F0Config {
    pub fmin: f64,
    pub fmax: f64,
    pub frame_shift_ms: f64,
}

impl Default for F0Config {
    fn default() -> Self {
        Self { fmin: 60.0, fmax: 400.0, frame_shift_ms: 12.5 }
    }
}

/// Per-frame F0 in Hz; 0 marks unvoiced frames.
pub fn estimate_f0(samples: &[f64], sample_rate: u32, cfg: &F0Config) -> Vec<f64> {
    let sr = sample_rate as f64;
    let lag_min = (sr / cfg.fmax).floor().max(1.0) as usize;
    let lag_max = (sr / cfg.fmin).ceil() as usize;
    // window long enough that the largest lag still has half-window support
    let window = 2 * lag_max;
    let shift = (cfg.frame_shift_ms * sr / 1000.0).round().max(1.0) as usize;
    if samples.len() < window {
        return Vec::new();
    }
    let frames = (samples.len() - window) / shift + 1;
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let x = &samples[f * shift..f * shift + window];
        out.push(frame_f0(x, sr, lag_min, lag_max));
    }
    out
}

fn frame_f0(x: &[f64], sr: f64, lag_min: usize, lag_max: usize) -> f64 {
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if energy < ENERGY_FLOOR {
        return 0.0;
    }
    let mut best_lag = 0usize;
    let mut best_r = f64::NEG_INFINITY;
    for lag in lag_min..=lag_max.min(x.len() - 1) {
        let n = x.len() - lag;
        let (mut dot, mut e0, mut e1) = (0.0, 0.0, 0.0);
        for i in 0..n {
            dot += x[i] * x[i + lag];
            e0 += x[i] * x[i];
            e1 += x[i + lag] * x[i + lag];
        }
        let denom = (e0 * e1).sqrt();
        if denom <= 0.0 {
            continue;
        }
        let r = dot / denom;
        if r > best_r {
            best_r = r;
            best_lag = lag;
        }
    }
    if best_r < VOICING_THRESHOLD || best_lag == 0 {
        0.0
    } else {
        sr / best_lag as f64
    }
}

/// Median of the nonzero entries; None when everything is unvoiced.
pub fn voiced_median(f0: &[f64]) -> Option<f64> {
    let mut voiced: Vec<f64> = f0.iter().copied().filter(|&v| v > 0.0).collect();
    if voiced.is_empty() {
        return None;
    }
    voiced.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(voiced[voiced.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sawtooth(freq: f64, sr: u32, seconds: f64) -> Vec<f64> {
        let n = (seconds * sr as f64) as usize;
        (0..n)
            .map(|i| {
                let phase = (i as f64 * freq / sr as f64).fract();
                2.0 * phase - 1.0
            })
            .collect()
    }

    #[test]
    fn sawtooth_pitch_within_two_hz() {
        let sr = 16000;
        let s = sawtooth(200.0, sr, 1.0);
        let f0 = estimate_f0(&s, sr, &F0Config::default());
        let med = voiced_median(&f0).expect("voiced frames");
        assert!((med - 200.0).abs() <= 2.0, "median {med}");
        let voiced = f0.iter().filter(|&&v| v > 0.0).count();
        assert!(voiced as f64 / f0.len() as f64 > 0.9);
    }

    #[test]
    fn shifting_by_one_period_barely_moves_estimates() {
        let sr = 16000;
        let s = sawtooth(200.0, sr, 1.0);
        let period = 80; // 16000 / 200
        let shifted: Vec<f64> = s.iter().cycle().skip(period).take(s.len()).copied().collect();
        let a = estimate_f0(&s, sr, &F0Config::default());
        let b = estimate_f0(&shifted, sr, &F0Config::default());
        let mut deltas: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect();
        deltas.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!(deltas[deltas.len() / 2] < 1.0);
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let s: Vec<f64> = (0..16000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f0 = estimate_f0(&s, 16000, &F0Config::default());
        let unvoiced = f0.iter().filter(|&&v| v == 0.0).count();
        assert!(unvoiced as f64 / f0.len() as f64 >= 0.9, "unvoiced {unvoiced}/{}", f0.len());
    }

    #[test]
    fn silence_is_all_unvoiced() {
        let s = vec![0.0; 16000];
        let f0 = estimate_f0(&s, 16000, &F0Config::default());
        assert!(!f0.is_empty());
        assert!(f0.iter().all(|&v| v == 0.0));
    }
}
