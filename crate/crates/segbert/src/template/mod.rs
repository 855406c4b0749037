//! The acoustic segment template: successive DTW over all phone segments of a
//! corpus yields one averaged segment, which pads masked syllable spans.

pub mod dtw;

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::features::melfile::{self, MelFileError, TEMPLATE_MAGIC};
use crate::features::{phone_segments, Corpus};
use crate::mat::Mat;
pub use dtw::{dtw_align, warp_to, DtwError, DtwMapping};

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("no phone segments to build a template from")]
    EmptySet,
    #[error(transparent)]
    Dtw(#[from] DtwError),
    #[error(transparent)]
    File(#[from] MelFileError),
}

/// The single global averaged phone segment, in log-mel space.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticTemplate {
    pub frames: Mat,
}

impl AcousticTemplate {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn bins(&self) -> usize {
        self.frames.cols()
    }

    pub fn save(&self, path: &Path, frame_shift_ms: f64) -> Result<(), TemplateError> {
        melfile::write(path, TEMPLATE_MAGIC, &self.frames, frame_shift_ms)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let (frames, _) = melfile::read(path, TEMPLATE_MAGIC)?;
        Ok(Self { frames })
    }
}

/// Phone segments grouped per phone id, in deterministic processing order.
#[derive(Clone, Debug, Default)]
pub struct PhoneSegmentSet {
    /// (phone_id, segments in corpus order); groups sorted by phone id.
    pub groups: Vec<(String, Vec<Mat>)>,
}

impl PhoneSegmentSet {
    pub fn is_empty(&self) -> bool {
        self.groups.iter().all(|(_, segs)| segs.is_empty())
    }

    /// Extracts every phone segment of the corpus, grouped by phone id
    /// (ascending), instances in corpus order. Extraction parallelizes per
    /// utterance; grouping stays sequential and deterministic.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let per_utt: Vec<Vec<(String, Mat)>> = corpus
            .utterances
            .par_iter()
            .map(|u| {
                phone_segments(&u.mel, &u.alignment)
                    .into_iter()
                    .map(|(id, seg)| (id.to_string(), seg))
                    .collect()
            })
            .collect();
        let mut groups: Vec<(String, Vec<Mat>)> = Vec::new();
        for segs in per_utt {
            for (id, seg) in segs {
                match groups.binary_search_by(|(g, _)| g.as_str().cmp(&id)) {
                    Ok(pos) => groups[pos].1.push(seg),
                    Err(pos) => groups.insert(pos, (id, vec![seg])),
                }
            }
        }
        Self { groups }
    }
}

/// Successive DTW: iterate segments in deterministic order; the first one
/// initializes the template, and each later segment is merged by warping the
/// pair onto the longer operand and averaging with weight one half.
pub fn build_template(set: &PhoneSegmentSet) -> Result<AcousticTemplate, TemplateError> {
    let mut template: Option<Mat> = None;
    for (_, segs) in &set.groups {
        for seg in segs {
            if seg.rows() == 0 {
                return Err(TemplateError::Dtw(DtwError::EmptyInput("phone segment")));
            }
            template = Some(match template {
                None => seg.clone(),
                Some(s) => {
                    if seg.rows() >= s.rows() {
                        // map the template onto the incoming segment
                        let (mapping, _) = dtw_align(&s, seg)?;
                        let warped = warp_to(&s, seg.rows(), &mapping)?;
                        average(&warped, seg)
                    } else {
                        // map the incoming segment onto the template
                        let (mapping, _) = dtw_align(seg, &s)?;
                        let warped = warp_to(seg, s.rows(), &mapping)?;
                        average(&warped, &s)
                    }
                }
            });
        }
    }
    template.map(|frames| AcousticTemplate { frames }).ok_or(TemplateError::EmptySet)
}

fn average(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.rows(), b.rows());
    debug_assert_eq!(a.cols(), b.cols());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

/// Fills a K-frame gap from an L-frame template: the first K frames when
/// K <= L, otherwise the template duplicated end to end and truncated to K.
pub fn pad_mask(template: &AcousticTemplate, k: usize) -> Mat {
    assert!(k >= 1, "pad_mask needs K >= 1");
    let l = template.len();
    let b = template.bins();
    Mat::from_fn(k, b, |r, c| template.frames.get(r % l, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(rows: usize, cols: usize, scale: f64) -> Mat {
        Mat::from_fn(rows, cols, |r, c| scale * (r * cols + c) as f64)
    }

    fn set_of(segs: Vec<Mat>) -> PhoneSegmentSet {
        PhoneSegmentSet { groups: vec![("p00".to_string(), segs)] }
    }

    #[test]
    fn single_segment_initializes_the_template() {
        let s = seg(4, 3, 1.0);
        let t = build_template(&set_of(vec![s.clone()])).unwrap();
        assert_eq!(t.frames, s);
    }

    #[test]
    fn two_identical_segments_are_a_fixed_point() {
        let s = seg(4, 3, 2.0);
        let t = build_template(&set_of(vec![s.clone(), s.clone()])).unwrap();
        assert_eq!(t.frames, s);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(matches!(build_template(&PhoneSegmentSet::default()), Err(TemplateError::EmptySet)));
    }

    #[test]
    fn running_average_weights_later_segments_more() {
        // equal-length, near-identical segments keep DTW on the diagonal, so
        // unrolling the half-updates twice gives a/4 + b/4 + c/2
        let base = seg(5, 2, 3.0);
        let bump = |eps: f64| {
            let data = base.data().iter().map(|v| v + eps).collect();
            Mat::from_vec(5, 2, data)
        };
        let (a, b, c) = (bump(0.00), bump(0.01), bump(0.02));
        let t = build_template(&set_of(vec![a.clone(), b.clone(), c.clone()])).unwrap();
        for i in 0..t.frames.data().len() {
            let want = 0.25 * a.data()[i] + 0.25 * b.data()[i] + 0.5 * c.data()[i];
            assert!((t.frames.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn template_adopts_the_longer_length() {
        let t = build_template(&set_of(vec![seg(3, 2, 1.0), seg(6, 2, 1.0), seg(4, 2, 1.0)])).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn pad_exact_and_truncated() {
        let t = AcousticTemplate { frames: seg(3, 2, 1.0) };
        assert_eq!(pad_mask(&t, 3), t.frames);
        let p2 = pad_mask(&t, 2);
        assert_eq!(p2, t.frames.slice_rows(0, 2));
    }

    #[test]
    fn pad_duplicates_then_truncates() {
        // L=3, K=5 -> rows [t0, t1, t2, t0, t1]
        let t = AcousticTemplate { frames: seg(3, 2, 1.0) };
        let p = pad_mask(&t, 5);
        for r in 0..5 {
            assert_eq!(p.row(r), t.frames.row(r % 3), "row {r}");
        }
        // K = 2L is the template concatenated with itself
        let p = pad_mask(&t, 6);
        assert_eq!(p.slice_rows(0, 3), t.frames);
        assert_eq!(p.slice_rows(3, 3), t.frames);
    }
}
