//! Synthetic corpus generation for the designed experiments: deterministic
//! mel/align/txt triples with controllable prosody structure.
//!
//! Mel content is a per-phoneme spectral pattern plus a smooth additive
//! contour. The three prosody modes differ in how the contour is drawn:
//!
//! - `independent`: one random smooth sinusoid per utterance;
//! - `chained`: a per-syllable offset where syllable k's offset is a fixed
//!   deterministic function of syllable k-1's;
//! - `ambiguous-pair`: every text is rendered twice with opposite-sign
//!   per-syllable offsets, so the text alone never determines the contour.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::alignment::{AlignmentRecord, Phone};
use crate::features::melfile::{self, MEL_MAGIC};
use crate::mat::Mat;

#[derive(Debug, Error)]
pub enum ToyGenError {
    #[error("io error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("invalid spec: {0}")]
    BadSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProsodyMode {
    #[default]
    Independent,
    Chained,
    AmbiguousPair,
}

impl fmt::Display for ProsodyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProsodyMode::Independent => "independent",
            ProsodyMode::Chained => "chained",
            ProsodyMode::AmbiguousPair => "ambiguous-pair",
        };
        f.write_str(s)
    }
}

impl FromStr for ProsodyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "independent" => Ok(ProsodyMode::Independent),
            "chained" => Ok(ProsodyMode::Chained),
            "ambiguous-pair" => Ok(ProsodyMode::AmbiguousPair),
            other => Err(format!("unknown prosody mode `{other}`")),
        }
    }
}

/// In `ambiguous-pair` mode, `utterance_count` counts base texts; each text
/// is emitted twice (renditions `a` and `b`).
#[derive(Clone, Copy, Debug)]
pub struct ToyCorpusSpec {
    pub utterance_count: usize,
    pub vocab_size: usize,
    pub syllables_per_utterance: usize,
    pub min_frames_per_syllable: usize,
    pub max_frames_per_syllable: usize,
    pub bins: usize,
    pub prosody_mode: ProsodyMode,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            utterance_count: 8,
            vocab_size: 6,
            syllables_per_utterance: 3,
            min_frames_per_syllable: 18,
            max_frames_per_syllable: 22,
            bins: 8,
            prosody_mode: ProsodyMode::Independent,
            seed: 42,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<(), ToyGenError> {
        if self.utterance_count == 0 || self.vocab_size == 0 || self.syllables_per_utterance == 0 || self.bins == 0 {
            return Err(ToyGenError::BadSpec("all counts must be >= 1".into()));
        }
        if self.min_frames_per_syllable < 2 || self.min_frames_per_syllable > self.max_frames_per_syllable {
            return Err(ToyGenError::BadSpec(format!(
                "frames per syllable range {}..{} invalid (need >= 2, non-reversed)",
                self.min_frames_per_syllable, self.max_frames_per_syllable
            )));
        }
        Ok(())
    }
}

/// Per-syllable contour offset magnitude in ambiguous/chained modes. Large
/// against the ~[-1, 1.5] pattern scale, so contour error dominates the mel
/// MSE of a model that cannot resolve the rendition.
const CONTOUR_DELTA: f64 = 1.5;

pub const FRAME_SHIFT_MS: f64 = 12.5;

/// One generated utterance, before writing to disk.
pub struct ToyUtterance {
    pub id: String,
    pub tokens: Vec<usize>,
    pub speaker: u32,
    pub mel: Mat,
    pub alignment: AlignmentRecord,
}

/// Spectral pattern of a phoneme: a bump centred on a token-dependent bin,
/// with a mild time ramp inside the phone.
fn phoneme_pattern(token: usize, bins: usize, frame_in_phone: usize, b: usize) -> f64 {
    let centre = (token * 3 + 1) % bins;
    let dist = b as f64 - centre as f64;
    let bump = 1.5 * (-dist * dist / 2.0).exp() - 0.4;
    bump + 0.1 * ((frame_in_phone as f64) * 0.3).sin()
}

struct TextPlan {
    tokens: Vec<usize>,
    /// (start_frame, end_frame) per phone; two phones per syllable.
    phone_spans: Vec<(u32, u32)>,
    syllables: Vec<(u32, u32)>,
    /// syllable index of each frame
    frame_syllable: Vec<usize>,
    total_frames: usize,
}

fn plan_text(spec: &ToyCorpusSpec, rng: &mut ChaCha8Rng) -> TextPlan {
    let mut tokens = Vec::new();
    let mut phone_spans = Vec::new();
    let mut syllables = Vec::new();
    let mut frame_syllable = Vec::new();
    let mut cursor = 0u32;
    for s in 0..spec.syllables_per_utterance {
        let frames = rng.random_range(spec.min_frames_per_syllable..=spec.max_frames_per_syllable) as u32;
        let first_len = frames / 2;
        let t1 = rng.random_range(0..spec.vocab_size);
        let t2 = rng.random_range(0..spec.vocab_size);
        tokens.push(t1);
        tokens.push(t2);
        phone_spans.push((cursor, cursor + first_len));
        phone_spans.push((cursor + first_len, cursor + frames));
        let base = phone_spans.len() as u32 - 2;
        syllables.push((base, base + 1));
        frame_syllable.extend(std::iter::repeat_n(s, frames as usize));
        cursor += frames;
    }
    TextPlan { tokens, phone_spans, syllables, frame_syllable, total_frames: cursor as usize }
}

fn render_mel(spec: &ToyCorpusSpec, plan: &TextPlan, contour: &[f64]) -> Mat {
    debug_assert_eq!(contour.len(), plan.total_frames);
    let mut mel = Mat::zeros(plan.total_frames, spec.bins);
    for (phone_idx, &(start, end)) in plan.phone_spans.iter().enumerate() {
        let token = plan.tokens[phone_idx];
        for (offset, frame) in (start as usize..end as usize).enumerate() {
            for b in 0..spec.bins {
                mel.set(frame, b, phoneme_pattern(token, spec.bins, offset, b) + contour[frame]);
            }
        }
    }
    mel
}

fn alignment_of(plan: &TextPlan) -> AlignmentRecord {
    let phones = plan
        .phone_spans
        .iter()
        .zip(&plan.tokens)
        .map(|(&(start, end), &tok)| Phone { id: format!("p{tok:03}"), start_frame: start, end_frame: end })
        .collect();
    AlignmentRecord::new(phones, plan.syllables.clone()).expect("generated alignments are valid by construction")
}

/// Smooth per-frame sinusoid contour (independent mode).
fn sinusoid_contour(frames: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let amp = rng.random_range(0.5..1.0);
    let freq = rng.random_range(0.05..0.15);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..frames).map(|t| amp * (freq * t as f64 + phase).sin()).collect()
}

/// chained mode: syllable offsets walk a fixed three-level cycle, so each
/// syllable's level is a deterministic function of the previous one.
fn chained_contour(plan: &TextPlan, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const LEVELS: [f64; 3] = [-CONTOUR_DELTA, 0.0, CONTOUR_DELTA];
    let mut level = rng.random_range(0..3usize);
    let mut per_syllable = Vec::with_capacity(plan.syllables.len());
    for _ in 0..plan.syllables.len() {
        per_syllable.push(LEVELS[level]);
        level = (level + 1) % 3;
    }
    plan.frame_syllable.iter().map(|&s| per_syllable[s]).collect()
}

/// ambiguous-pair mode: a smooth sinusoid contour with a random phase per
/// text; rendition A carries it with positive sign, rendition B negated, so
/// the renditions disagree at (almost) every frame.
fn paired_contours(plan: &TextPlan, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let period = 17.0;
    let a: Vec<f64> = (0..plan.total_frames)
        .map(|t| CONTOUR_DELTA * (std::f64::consts::TAU * t as f64 / period + phase).sin())
        .collect();
    let b: Vec<f64> = a.iter().map(|v| -v).collect();
    (a, b)
}

/// Generates the corpus in memory, in emission order.
pub fn generate(spec: &ToyCorpusSpec) -> Result<Vec<ToyUtterance>, ToyGenError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for u in 0..spec.utterance_count {
        let plan = plan_text(spec, &mut rng);
        let alignment = alignment_of(&plan);
        match spec.prosody_mode {
            ProsodyMode::Independent => {
                let contour = sinusoid_contour(plan.total_frames, &mut rng);
                out.push(ToyUtterance {
                    id: format!("u{u:03}"),
                    tokens: plan.tokens.clone(),
                    speaker: 0,
                    mel: render_mel(spec, &plan, &contour),
                    alignment,
                });
            }
            ProsodyMode::Chained => {
                let contour = chained_contour(&plan, &mut rng);
                out.push(ToyUtterance {
                    id: format!("u{u:03}"),
                    tokens: plan.tokens.clone(),
                    speaker: 0,
                    mel: render_mel(spec, &plan, &contour),
                    alignment,
                });
            }
            ProsodyMode::AmbiguousPair => {
                let (ca, cb) = paired_contours(&plan, &mut rng);
                for (tag, contour) in [("a", ca), ("b", cb)] {
                    out.push(ToyUtterance {
                        id: format!("u{u:03}{tag}"),
                        tokens: plan.tokens.clone(),
                        speaker: 0,
                        mel: render_mel(spec, &plan, &contour),
                        alignment: alignment.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Emits `<id>.mel`, `<id>.align` and `<id>.txt` triples under `out_dir`.
/// Byte-identical for identical specs.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec, out_dir: &Path) -> Result<usize, ToyGenError> {
    let utterances = generate(spec)?;
    std::fs::create_dir_all(out_dir).map_err(|source| ToyGenError::Io { path: out_dir.to_path_buf(), source })?;
    let write = |path: std::path::PathBuf, bytes: &[u8]| -> Result<(), ToyGenError> {
        std::fs::write(&path, bytes).map_err(|source| ToyGenError::Io { path, source })
    };
    for u in &utterances {
        let mel_bytes = melfile::encode(MEL_MAGIC, &u.mel, FRAME_SHIFT_MS);
        write(out_dir.join(format!("{}.mel", u.id)), &mel_bytes)?;
        write(out_dir.join(format!("{}.align", u.id)), u.alignment.serialize().as_bytes())?;
        let mut txt = format!("spk:{}", u.speaker);
        for t in &u.tokens {
            txt.push_str(&format!(" {t}"));
        }
        txt.push('\n');
        write(out_dir.join(format!("{}.txt", u.id)), txt.as_bytes())?;
    }
    Ok(utterances.len())
}
