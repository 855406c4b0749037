//! Syllable mask planning and template padding of masked spans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{syllable_spans, AlignmentRecord, MelSpectrogram};
use crate::template::{pad_mask, AcousticTemplate};

use super::ModelError;

/// The syllable frame-spans chosen for masking in one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// (start_frame, end_frame) per chosen syllable, in utterance order.
    pub spans: Vec<(usize, usize)>,
    pub seed: u64,
}

/// Selects each syllable independently with probability `rate`.
pub fn plan_masks(align: &AlignmentRecord, rate: f64, seed: u64) -> MaskPlan {
    assert!((0.0..=1.0).contains(&rate), "mask rate {rate} outside [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spans = syllable_spans(align)
        .into_iter()
        .filter(|_| rng.random::<f64>() < rate)
        .collect();
    MaskPlan { spans, seed }
}

/// Selects exactly `round(rate * syllable_count)` syllables (seeded draw
/// without replacement), returned in utterance order.
pub fn plan_masks_exact(align: &AlignmentRecord, rate: f64, seed: u64) -> MaskPlan {
    assert!((0.0..=1.0).contains(&rate), "mask rate {rate} outside [0, 1]");
    let spans = syllable_spans(align);
    let want = (rate * spans.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..spans.len()).collect();
    for i in 0..order.len() {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    let mut chosen: Vec<usize> = order.into_iter().take(want).collect();
    chosen.sort_unstable();
    MaskPlan { spans: chosen.into_iter().map(|i| spans[i]).collect(), seed }
}

/// Replaces the frames of each planned span with the padded template; frames
/// outside the spans are bit-identical to the input.
pub fn apply_masks(
    mel: &MelSpectrogram,
    plan: &MaskPlan,
    template: &AcousticTemplate,
) -> Result<MelSpectrogram, ModelError> {
    if template.bins() != mel.bins() {
        return Err(ModelError::TemplateBins { got: template.bins(), want: mel.bins() });
    }
    let mut out = mel.clone();
    for &(start, end) in &plan.spans {
        if end > mel.t() || start >= end {
            return Err(ModelError::SpanOutOfRange { start, end, t: mel.t() });
        }
        let fill = pad_mask(template, end - start);
        for (offset, frame) in (start..end).enumerate() {
            out.frames.row_mut(frame).copy_from_slice(fill.row(offset));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Phone;
    use crate::mat::Mat;

    fn toy_alignment(syllables: usize, frames_per: u32) -> AlignmentRecord {
        let phones = (0..syllables)
            .map(|i| Phone {
                id: format!("p{i:02}"),
                start_frame: i as u32 * frames_per,
                end_frame: (i as u32 + 1) * frames_per,
            })
            .collect();
        let syl = (0..syllables as u32).map(|i| (i, i)).collect();
        AlignmentRecord::new(phones, syl).unwrap()
    }

    #[test]
    fn rate_zero_and_one_are_degenerate() {
        let a = toy_alignment(5, 4);
        assert!(plan_masks(&a, 0.0, 1).spans.is_empty());
        assert_eq!(plan_masks(&a, 1.0, 1).spans.len(), 5);
    }

    #[test]
    fn bernoulli_rate_concentrates() {
        // 10,000 syllables at rate 0.2 -> selected fraction within 0.2 +- 0.01
        let a = toy_alignment(10_000, 1);
        let plan = plan_masks(&a, 0.2, 42);
        let frac = plan.spans.len() as f64 / 10_000.0;
        assert!((frac - 0.2).abs() < 0.01, "fraction {frac}");
    }

    #[test]
    fn exact_mode_hits_the_count() {
        let a = toy_alignment(10, 3);
        let plan = plan_masks_exact(&a, 0.2, 7);
        assert_eq!(plan.spans.len(), 2);
        // spans stay in utterance order
        assert!(plan.spans.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn masking_is_local_and_follows_pad_rule() {
        let mel = MelSpectrogram { frames: Mat::from_fn(8, 2, |r, c| (10 * r + c) as f64), frame_shift_ms: 12.5 };
        let template = AcousticTemplate { frames: Mat::from_fn(3, 2, |r, c| -((r * 2 + c) as f64)) };
        let plan = MaskPlan { spans: vec![(2, 5)], seed: 0 };
        let out = apply_masks(&mel, &plan, &template).unwrap();
        for r in 0..8 {
            if (2..5).contains(&r) {
                assert_eq!(out.frames.row(r), template.frames.row(r - 2));
            } else {
                assert_eq!(out.frames.row(r), mel.frames.row(r));
            }
        }
    }

    #[test]
    fn span_longer_than_template_follows_duplication() {
        // span of 5 frames over a 2-frame template: rows cycle t0,t1,t0,t1,t0
        let mel = MelSpectrogram { frames: Mat::from_fn(6, 2, |r, c| (r * 2 + c) as f64 + 100.0), frame_shift_ms: 12.5 };
        let template = AcousticTemplate { frames: Mat::from_fn(2, 2, |r, c| (r * 2 + c) as f64) };
        let plan = MaskPlan { spans: vec![(0, 5)], seed: 0 };
        let out = apply_masks(&mel, &plan, &template).unwrap();
        for r in 0..5 {
            assert_eq!(out.frames.row(r), template.frames.row(r % 2), "row {r}");
        }
        assert_eq!(out.frames.row(5), mel.frames.row(5));
    }

    #[test]
    fn empty_plan_is_identity() {
        let mel = MelSpectrogram { frames: Mat::from_fn(4, 2, |r, c| (r + c) as f64), frame_shift_ms: 12.5 };
        let template = AcousticTemplate { frames: Mat::zeros(2, 2) };
        let plan = MaskPlan { spans: vec![], seed: 0 };
        assert_eq!(apply_masks(&mel, &plan, &template).unwrap(), mel);
    }

    #[test]
    fn out_of_range_span_rejected() {
        let mel = MelSpectrogram { frames: Mat::zeros(4, 2), frame_shift_ms: 12.5 };
        let template = AcousticTemplate { frames: Mat::zeros(2, 2) };
        let plan = MaskPlan { spans: vec![(2, 6)], seed: 0 };
        assert!(matches!(apply_masks(&mel, &plan, &template), Err(ModelError::SpanOutOfRange { .. })));
    }
}
