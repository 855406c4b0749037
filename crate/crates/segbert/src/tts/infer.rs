//! Autoregressive inference with dynamic embedding refresh.
//!
//! The loop: feed the previous mel-linear-1 frame through the pre-net, pair
//! it with the current embedding row, re-decode the whole prefix, emit the
//! next frame, and every `segment_len` emitted frames feed the buffered
//! frames to the speech encoder to refresh the embedding matrix (the first
//! segment always runs on the all-zero matrix). The driver is generic over a
//! [`DecodeCore`] so the counter/refresh machinery can be exercised with a
//! stub decoder.

use crate::mat::Mat;
use crate::speechbert::{ModelError, SpeechBertModel};
use crate::tensor::graph::Graph;

use super::TransformerTtsModel;

/// One frame prediction plus embedding refresh, abstracted away from the
/// bookkeeping of the autoregressive loop.
pub trait DecodeCore {
    fn mel_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    /// Predicts the next frame from the full history of (embedding row,
    /// previous frame) input pairs. Returns the frame and the stop
    /// probability for it.
    fn predict(&mut self, inputs: &[(Vec<f64>, Vec<f64>)]) -> Result<(Vec<f64>, f64), ModelError>;
    /// New embedding matrix from the buffered segment frames.
    fn refresh(&mut self, q: &Mat) -> Result<Mat, ModelError>;
}

/// The loop bookkeeping: global frame counter, within-segment index, emitted
/// frames O, segment buffer Q, decoder input pairs I, embedding matrix E.
pub struct InferenceState {
    pub t: usize,
    pub i: usize,
    /// Emitted mel-linear-1 frames (the zero o_0 is implicit, not stored).
    pub emitted: Vec<Vec<f64>>,
    /// Frames accumulated since the last refresh.
    pub segment_buffer: Vec<Vec<f64>>,
    /// (embedding row e_i, previous frame o_t) per decoded frame.
    pub inputs: Vec<(Vec<f64>, Vec<f64>)>,
    pub embedding: Mat,
}

#[derive(Clone, Debug)]
pub struct RefreshEvent {
    /// Frames emitted when the refresh fired.
    pub after_frame: usize,
    /// The exact frames fed to the speech encoder.
    pub q: Mat,
}

#[derive(Clone, Debug)]
pub struct FrameEvent {
    /// 1-based index of the emitted frame.
    pub frame: usize,
    /// Within-segment embedding index used for this frame's input.
    pub i: usize,
    /// The embedding row consumed (before projection-1).
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct InferenceTrace {
    pub frames: Vec<FrameEvent>,
    pub refreshes: Vec<RefreshEvent>,
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct InferenceSettings {
    pub segment_len: usize,
    pub stop_threshold: f64,
    pub max_frames: usize,
}

/// Runs the autoregressive loop to completion. Hitting `max_frames` sets the
/// truncation flag rather than erroring.
pub fn run_inference(
    core: &mut dyn DecodeCore,
    settings: &InferenceSettings,
) -> Result<(Mat, InferenceTrace), ModelError> {
    let d_f = core.mel_dim();
    let d_e = core.embed_dim();
    let t_s = settings.segment_len;
    let mut state = InferenceState {
        t: 0,
        i: 0,
        emitted: Vec::new(),
        segment_buffer: Vec::new(),
        inputs: Vec::new(),
        embedding: Mat::zeros(t_s, d_e),
    };
    let mut trace = InferenceTrace::default();
    let mut prev = vec![0.0; d_f]; // o_0

    loop {
        if state.i >= state.embedding.rows() {
            return Err(ModelError::Shape(format!(
                "segment index {} outruns the {}-row embedding matrix",
                state.i,
                state.embedding.rows()
            )));
        }
        let e_row = state.embedding.row(state.i).to_vec();
        state.inputs.push((e_row.clone(), prev.clone()));
        let (next, stop_prob) = core.predict(&state.inputs)?;
        debug_assert_eq!(next.len(), d_f);
        state.emitted.push(next.clone());
        state.segment_buffer.push(next.clone());
        trace.frames.push(FrameEvent { frame: state.t + 1, i: state.i, embedding: e_row });
        prev = next;
        state.i += 1;
        state.t += 1;

        if stop_prob > settings.stop_threshold {
            break;
        }
        if state.t >= settings.max_frames {
            trace.truncated = true;
            break;
        }
        if state.i % t_s == 0 {
            let q = rows_to_mat(&state.segment_buffer, d_f);
            state.embedding = core.refresh(&q)?;
            if state.embedding.rows() == 0 || state.embedding.cols() != d_e {
                return Err(ModelError::Shape(format!(
                    "refresh produced {}x{}, expected rows x {d_e}",
                    state.embedding.rows(),
                    state.embedding.cols()
                )));
            }
            trace.refreshes.push(RefreshEvent { after_frame: state.t, q });
            state.segment_buffer.clear();
            state.i = 0;
        }
    }
    Ok((rows_to_mat(&state.emitted, d_f), trace))
}

fn rows_to_mat(rows: &[Vec<f64>], cols: usize) -> Mat {
    let mut m = Mat::zeros(rows.len(), cols);
    for (r, row) in rows.iter().enumerate() {
        m.row_mut(r).copy_from_slice(row);
    }
    m
}

/// The real decode core: re-runs the causal decoder over the whole prefix
/// each step against a precomputed text-encoder memory, and refreshes
/// embeddings through the speech BERT encoder (dynamic path only).
struct ModelCore<'a> {
    model: &'a TransformerTtsModel,
    bert: Option<&'a SpeechBertModel>,
    memory: Mat,
}

impl DecodeCore for ModelCore<'_> {
    fn mel_dim(&self) -> usize {
        self.model.cfg.bins
    }

    fn embed_dim(&self) -> usize {
        self.model.cfg.embed_dim
    }

    fn predict(&mut self, inputs: &[(Vec<f64>, Vec<f64>)]) -> Result<(Vec<f64>, f64), ModelError> {
        let n = inputs.len();
        let cfg = &self.model.cfg;
        let g = Graph::new();
        let memory = g.constant(self.memory.rows(), self.memory.cols(), self.memory.data().to_vec());

        let mut frame_data = Vec::with_capacity(n * cfg.bins);
        let mut e_data = Vec::with_capacity(n * cfg.embed_dim);
        for (e_row, o_prev) in inputs {
            e_data.extend_from_slice(e_row);
            frame_data.extend_from_slice(o_prev);
        }
        let frames = g.constant(n, cfg.bins, frame_data);
        let e_rows = if cfg.dynamic_embedding {
            Some(g.constant(n, cfg.embed_dim, e_data))
        } else {
            None
        };
        let x = self.model.decoder_inputs(&g, &frames, e_rows.as_ref(), None)?;
        let states = self.model.decode(&g, &x, &memory)?;
        let last = states.slice_rows(n - 1, 1);
        let mel = self.model.mel_head.forward(&g, &self.model.store, &last);
        let stop = self.model.stop_head.forward(&g, &self.model.store, &last).sigmoid();
        Ok((mel.value(), stop.scalar()))
    }

    fn refresh(&mut self, q: &Mat) -> Result<Mat, ModelError> {
        match self.bert {
            Some(bert) => bert.extract_embedding(q),
            // embeddings are inert on the baseline path
            None => Ok(Mat::zeros(self.model.cfg.segment_len, self.model.cfg.embed_dim)),
        }
    }
}

/// The synthesized mel plus the loop trace.
pub struct SynthesisResult {
    /// Raw mel-linear-1 output (o_0 dropped).
    pub mel1: Mat,
    /// Post-net refined mel, the deliverable.
    pub mel_post: Mat,
    pub truncated: bool,
    pub trace: InferenceTrace,
}

pub fn synthesize(
    model: &TransformerTtsModel,
    bert: Option<&SpeechBertModel>,
    token_ids: &[usize],
    speaker_id: u32,
) -> Result<SynthesisResult, ModelError> {
    synthesize_with_limit(model, bert, token_ids, speaker_id, model.cfg.max_decode_frames)
}

/// As [`synthesize`] with an explicit frame budget (prefix-stability checks
/// rely on re-running with a smaller one).
pub fn synthesize_with_limit(
    model: &TransformerTtsModel,
    bert: Option<&SpeechBertModel>,
    token_ids: &[usize],
    speaker_id: u32,
    max_frames: usize,
) -> Result<SynthesisResult, ModelError> {
    if model.cfg.dynamic_embedding {
        let bert = bert.ok_or_else(|| ModelError::Shape("dynamic synthesis needs a speech BERT model".into()))?;
        if bert.cfg.embed_dim() != model.cfg.embed_dim {
            return Err(ModelError::Shape(format!(
                "BERT embedding width {} vs TTS d_E {}",
                bert.cfg.embed_dim(),
                model.cfg.embed_dim
            )));
        }
        if bert.cfg.bins != model.cfg.bins {
            return Err(ModelError::Shape(format!("BERT bins {} vs TTS bins {}", bert.cfg.bins, model.cfg.bins)));
        }
    }
    // the text memory is fixed for the whole utterance; encode it once
    let memory = {
        let g = Graph::new();
        let m = model.encode_text(&g, token_ids, speaker_id)?;
        Mat::from_vec(m.rows(), m.cols(), m.value())
    };
    let mut core = ModelCore { model, bert: if model.cfg.dynamic_embedding { bert } else { None }, memory };
    let settings = InferenceSettings {
        segment_len: model.cfg.segment_len,
        stop_threshold: model.cfg.stop_threshold,
        max_frames,
    };
    let (mel1, trace) = run_inference(&mut core, &settings)?;

    let g = Graph::new();
    let mel1_t = g.constant(mel1.rows(), mel1.cols(), mel1.data().to_vec());
    let post = model.postnet_refine(&g, &mel1_t);
    let mel_post = Mat::from_vec(post.rows(), post.cols(), post.value());
    Ok(SynthesisResult { mel1, mel_post, truncated: trace.truncated, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Deterministic stub: frame values encode the frame number; stop fires
    /// at a scripted step; refresh returns a recognizable matrix.
    struct StubCore {
        stop_at: usize,
        refreshes: usize,
        t_s: usize,
        d: usize,
    }

    impl DecodeCore for StubCore {
        fn mel_dim(&self) -> usize {
            self.d
        }

        fn embed_dim(&self) -> usize {
            self.d
        }

        fn predict(&mut self, inputs: &[(Vec<f64>, Vec<f64>)]) -> Result<(Vec<f64>, f64), ModelError> {
            let t_next = inputs.len(); // frames emitted so far + 1
            let frame = vec![t_next as f64; self.d];
            let stop = if t_next >= self.stop_at { 1.0 } else { 0.0 };
            Ok((frame, stop))
        }

        fn refresh(&mut self, _q: &Mat) -> Result<Mat, ModelError> {
            self.refreshes += 1;
            // rows tagged with the refresh ordinal
            Ok(Mat::from_fn(self.t_s, self.d, |_, _| self.refreshes as f64))
        }
    }

    fn settings(t_s: usize, max: usize) -> InferenceSettings {
        InferenceSettings { segment_len: t_s, stop_threshold: 0.5, max_frames: max }
    }

    #[test]
    fn stop_at_one_never_refreshes_and_uses_zero_embeddings() {
        let mut core = StubCore { stop_at: 1, refreshes: 0, t_s: 20, d: 3 };
        let (mel, trace) = run_inference(&mut core, &settings(20, 100)).unwrap();
        assert_eq!(mel.rows(), 1);
        assert!(trace.refreshes.is_empty());
        assert!(trace.frames[0].embedding.iter().all(|&v| v == 0.0));
        assert!(!trace.truncated);
    }

    #[test]
    fn alg2_trace_at_forty_five_frames() {
        // T_S = 20, stop at t = 45: exactly two refreshes, fed frames 1-20
        // and 21-40; the first 20 frames ran on zero embeddings.
        let mut core = StubCore { stop_at: 45, refreshes: 0, t_s: 20, d: 2 };
        let (mel, trace) = run_inference(&mut core, &settings(20, 1000)).unwrap();
        assert_eq!(mel.rows(), 45);
        assert_eq!(trace.refreshes.len(), 2);
        assert_eq!(trace.refreshes[0].after_frame, 20);
        assert_eq!(trace.refreshes[1].after_frame, 40);
        // refresh inputs are the mel-linear-1 outputs of those exact frames
        for (r, lo) in [(0usize, 1usize), (1, 21)] {
            let q = &trace.refreshes[r].q;
            assert_eq!(q.rows(), 20);
            for row in 0..20 {
                assert!(q.row(row).iter().all(|&v| v == (lo + row) as f64));
            }
        }
        for ev in &trace.frames[..20] {
            assert!(ev.embedding.iter().all(|&v| v == 0.0), "frame {} embedding nonzero", ev.frame);
        }
        for ev in &trace.frames[20..40] {
            assert!(ev.embedding.iter().all(|&v| v == 1.0));
        }
        for ev in &trace.frames[40..] {
            assert!(ev.embedding.iter().all(|&v| v == 2.0));
        }
    }

    #[test]
    fn refresh_cadence_matches_floor_of_final_frame_over_segment() {
        // holds for stop frames that are not exact segment multiples
        for stop_at in [1usize, 7, 19, 21, 39, 45, 61] {
            let mut core = StubCore { stop_at, refreshes: 0, t_s: 20, d: 1 };
            let (_, trace) = run_inference(&mut core, &settings(20, 1000)).unwrap();
            assert_eq!(trace.refreshes.len(), stop_at / 20, "stop_at {stop_at}");
        }
    }

    #[test]
    fn stop_on_a_segment_boundary_skips_that_refresh() {
        // the stop check precedes the refresh, so stopping exactly at a
        // multiple of T_S leaves that boundary's refresh unrun
        let mut core = StubCore { stop_at: 40, refreshes: 0, t_s: 20, d: 1 };
        let (_, trace) = run_inference(&mut core, &settings(20, 1000)).unwrap();
        assert_eq!(trace.refreshes.len(), 1);
    }

    #[test]
    fn frame_budget_sets_truncation_flag() {
        let mut core = StubCore { stop_at: 10_000, refreshes: 0, t_s: 4, d: 1 };
        let (mel, trace) = run_inference(&mut core, &settings(4, 11)).unwrap();
        assert!(trace.truncated);
        assert_eq!(mel.rows(), 11);
    }

    #[test]
    fn within_segment_index_wraps() {
        let mut core = StubCore { stop_at: 9, refreshes: 0, t_s: 4, d: 1 };
        let (_, trace) = run_inference(&mut core, &settings(4, 100)).unwrap();
        let seen: Vec<usize> = trace.frames.iter().map(|f| f.i).collect();
        assert_eq!(seen, vec![0, 1, 2, 3, 0, 1, 2, 3, 0]);
    }
}
