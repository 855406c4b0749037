//! Dynamic time warping between two frame sequences.
//!
//! Monotone steps {(1,0), (0,1), (1,1)}, per-cell cost = squared Euclidean
//! distance between frames, no slope constraint. The backtrace breaks ties by
//! preferring the diagonal step, then (1,0), then (0,1).

use thiserror::Error;

use crate::mat::{frame_dist_sq, Mat};

#[derive(Debug, Error, PartialEq)]
pub enum DtwError {
    #[error("empty {0} segment")]
    EmptyInput(&'static str),
    #[error("bin mismatch: {a} vs {b}")]
    BinMismatch { a: usize, b: usize },
    #[error("mapping targets {mapping} frames but {requested} were requested")]
    TargetMismatch { mapping: usize, requested: usize },
    #[error("mapping sources {mapping} frames but the segment has {actual}")]
    SourceMismatch { mapping: usize, actual: usize },
}

/// A monotone alignment path between a source and a target sequence.
///
/// Starts at (0,0), ends at (source_len-1, target_len-1); each step
/// increments the source index, the target index, or both by exactly one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DtwMapping {
    pub path: Vec<(usize, usize)>,
    pub source_len: usize,
    pub target_len: usize,
}

impl DtwMapping {
    /// Identity mapping for equal-length sequences.
    pub fn identity(len: usize) -> Self {
        Self { path: (0..len).map(|i| (i, i)).collect(), source_len: len, target_len: len }
    }

    /// The same path with source/target roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            path: self.path.iter().map(|&(i, j)| (j, i)).collect(),
            source_len: self.target_len,
            target_len: self.source_len,
        }
    }
}

/// Minimum-total-cost monotone alignment of `a` (source) to `b` (target).
/// Returns the mapping and the total path cost.
pub fn dtw_align(a: &Mat, b: &Mat) -> Result<(DtwMapping, f64), DtwError> {
    if a.rows() == 0 {
        return Err(DtwError::EmptyInput("source"));
    }
    if b.rows() == 0 {
        return Err(DtwError::EmptyInput("target"));
    }
    if a.cols() != b.cols() {
        return Err(DtwError::BinMismatch { a: a.cols(), b: b.cols() });
    }
    let (n, m) = (a.rows(), b.rows());
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = frame_dist_sq(a.row(i), b.row(j));
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * m + (j - 1)] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * m + (j - 1)] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * m + j] = best + c;
        }
    }

    // backtrace, tie order: (1,1), (1,0), (0,1)
    let mut path = Vec::with_capacity(n + m - 1);
    let (mut i, mut j) = (n - 1, m - 1);
    path.push((i, j));
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[(i - 1) * m + (j - 1)] } else { f64::INFINITY };
        let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
        let left = if j > 0 { acc[i * m + (j - 1)] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    Ok((DtwMapping { path, source_len: n, target_len: m }, acc[(n - 1) * m + (m - 1)]))
}

/// Resamples `source` to `target_len` frames: target frame j is the
/// arithmetic mean of the source frames paired with j on the path.
pub fn warp_to(source: &Mat, target_len: usize, mapping: &DtwMapping) -> Result<Mat, DtwError> {
    if mapping.target_len != target_len {
        return Err(DtwError::TargetMismatch { mapping: mapping.target_len, requested: target_len });
    }
    if mapping.source_len != source.rows() {
        return Err(DtwError::SourceMismatch { mapping: mapping.source_len, actual: source.rows() });
    }
    let cols = source.cols();
    let mut out = Mat::zeros(target_len, cols);
    let mut counts = vec![0usize; target_len];
    for &(i, j) in &mapping.path {
        let src = source.row(i);
        let dst = out.row_mut(j);
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
        counts[j] += 1;
    }
    for j in 0..target_len {
        // path boundary + monotonicity guarantee every target frame is hit
        debug_assert!(counts[j] > 0);
        let inv = 1.0 / counts[j] as f64;
        for v in out.row_mut(j) {
            *v *= inv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(frames: &[&[f64]]) -> Mat {
        let cols = frames[0].len();
        Mat::from_fn(frames.len(), cols, |r, c| frames[r][c])
    }

    #[test]
    fn identical_segments_align_diagonally_with_zero_cost() {
        let a = seg(&[&[0.0, 1.0], &[2.0, 3.0], &[4.0, 5.0], &[6.0, 7.0]]);
        let (m, cost) = dtw_align(&a, &a).unwrap();
        assert_eq!(cost, 0.0);
        assert_eq!(m.path, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn one_to_many_has_single_monotone_completion() {
        let a = seg(&[&[1.0]]);
        let b = seg(&[&[1.0], &[2.0], &[3.0]]);
        let (m, _) = dtw_align(&a, &b).unwrap();
        assert_eq!(m.path, vec![(0, 0), (0, 1), (0, 2)]);
    }

    #[test]
    fn empty_and_mismatched_inputs_are_errors() {
        let a = Mat::zeros(0, 2);
        let b = Mat::zeros(3, 2);
        assert_eq!(dtw_align(&a, &b).unwrap_err(), DtwError::EmptyInput("source"));
        let a = Mat::zeros(2, 2);
        let b = Mat::zeros(3, 4);
        assert_eq!(dtw_align(&a, &b).unwrap_err(), DtwError::BinMismatch { a: 2, b: 4 });
    }

    #[test]
    fn warp_identity_is_bit_exact() {
        let a = seg(&[&[0.5, -1.0], &[2.0, 0.0], &[3.0, 9.0]]);
        let m = DtwMapping::identity(3);
        assert_eq!(warp_to(&a, 3, &m).unwrap(), a);
    }

    #[test]
    fn warp_replicates_single_source_frame() {
        let a = seg(&[&[1.0, 2.0]]);
        let m = DtwMapping { path: vec![(0, 0), (0, 1), (0, 2)], source_len: 1, target_len: 3 };
        let out = warp_to(&a, 3, &m).unwrap();
        for j in 0..3 {
            assert_eq!(out.row(j), &[1.0, 2.0]);
        }
    }

    #[test]
    fn warp_averages_connected_sources() {
        // 3 frames onto 2: frame 0 = mean(src0, src1), frame 1 = src2
        let a = seg(&[&[0.0], &[2.0], &[5.0]]);
        let m = DtwMapping { path: vec![(0, 0), (1, 0), (2, 1)], source_len: 3, target_len: 2 };
        let out = warp_to(&a, 2, &m).unwrap();
        assert_eq!(out.row(0), &[1.0]);
        assert_eq!(out.row(1), &[5.0]);
    }

    #[test]
    fn warp_mapping_mismatch_is_an_error() {
        let a = seg(&[&[0.0], &[2.0]]);
        let m = DtwMapping::identity(3);
        assert!(warp_to(&a, 3, &m).is_err());
        let m2 = DtwMapping::identity(2);
        assert!(warp_to(&a, 3, &m2).is_err());
    }
}
