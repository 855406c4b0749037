//! Transformer TTS: the autoregressive baseline and the dynamic-embedding
//! variant that concatenates segment-level prosody embeddings (from the
//! speech BERT encoder) with the decoder pre-net stream.

pub mod infer;
pub mod train;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::mat::Mat;
use crate::speechbert::ModelError;
use crate::tensor::checkpoint;
use crate::tensor::graph::{Graph, ParamId, ParamStore, Tensor};
use crate::tensor::nn::{xavier, AttnMask, Conv1d, DecoderBlock, EncoderBlock, Linear, Prenet, ScaledPositionalEncoding};

pub use infer::{synthesize, synthesize_with_limit, DecodeCore, InferenceState, InferenceTrace, SynthesisResult};
pub use train::{embedding_sequence, train_tts};

#[derive(Clone, Copy, Debug)]
pub struct TtsConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Segment size T_S in frames.
    pub segment_len: usize,
    /// Prosody embedding width d_E (must match the BERT encoder when the
    /// dynamic path is enabled).
    pub embed_dim: usize,
    /// Width of the projected dynamic embedding (projection-1 output); 80 in
    /// the `paper` profile.
    pub dyn_width: usize,
    pub dynamic_embedding: bool,
    pub speaker_count: usize,
    pub speaker_dim: usize,
    pub bins: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
    pub stop_threshold: f64,
    pub max_decode_frames: usize,
    /// Decoder pre-net dropout (training only; 0 keeps runs deterministic
    /// without a dropout stream).
    pub prenet_dropout: f64,
}

impl Default for TtsConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            segment_len: 20,
            embed_dim: 32,
            dyn_width: 8,
            dynamic_embedding: false,
            speaker_count: 1,
            speaker_dim: 8,
            bins: 8,
            postnet_layers: 3,
            postnet_kernel: 5,
            stop_threshold: 0.5,
            max_decode_frames: 600,
            prenet_dropout: 0.0,
        }
    }
}

impl TtsConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::Shape(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.segment_len == 0 || self.max_decode_frames == 0 {
            return Err(ModelError::Shape("segment_len and max_decode_frames must be >= 1".into()));
        }
        if !(0.0 < self.stop_threshold && self.stop_threshold < 1.0) {
            return Err(ModelError::Shape(format!("stop_threshold {} outside (0, 1)", self.stop_threshold)));
        }
        if self.postnet_kernel % 2 == 0 {
            return Err(ModelError::Shape("postnet kernel must be odd".into()));
        }
        if self.speaker_count == 0 {
            return Err(ModelError::Shape("speaker_count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct TransformerTtsModel {
    pub cfg: TtsConfig,
    pub vocab_size: usize,
    pub store: ParamStore,
    token_table: ParamId,
    text_prenet: Linear,
    text_pe: ScaledPositionalEncoding,
    enc_blocks: Vec<EncoderBlock>,
    speaker_table: ParamId,
    speaker_merge: Linear,
    dec_prenet: Prenet,
    /// Baseline input projection (absent when the dynamic path is enabled).
    input_proj: Option<Linear>,
    /// projection-1 (d_E -> dyn_width) and projection-2 (concat -> d_model);
    /// present only when the dynamic path is enabled.
    proj1: Option<Linear>,
    proj2: Option<Linear>,
    dec_pe: ScaledPositionalEncoding,
    dec_blocks: Vec<DecoderBlock>,
    mel_head: Linear,
    stop_head: Linear,
    postnet: Vec<Conv1d>,
}

impl TransformerTtsModel {
    pub fn init(cfg: TtsConfig, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let token_table = xavier(&mut store, &mut rng, "text.tokens", vocab_size, d);
        let text_prenet = Linear::init(&mut store, &mut rng, "text.prenet", d, d);
        let text_pe = ScaledPositionalEncoding::init(&mut store, "text.pe", d);
        let enc_blocks = (0..cfg.enc_layers)
            .map(|i| EncoderBlock::init(&mut store, &mut rng, &format!("enc.block{i}"), d, cfg.heads))
            .collect();
        let speaker_table = xavier(&mut store, &mut rng, "spk.table", cfg.speaker_count, cfg.speaker_dim);
        let speaker_merge = Linear::init(&mut store, &mut rng, "spk.merge", d + cfg.speaker_dim, d);
        let dec_prenet = Prenet::init(&mut store, &mut rng, "dec.prenet", cfg.bins, d, cfg.prenet_dropout);
        let (input_proj, proj1, proj2) = if cfg.dynamic_embedding {
            (
                None,
                Some(Linear::init(&mut store, &mut rng, "dyn.proj1", cfg.embed_dim, cfg.dyn_width)),
                Some(Linear::init(&mut store, &mut rng, "dyn.proj2", d + cfg.dyn_width, d)),
            )
        } else {
            (Some(Linear::init(&mut store, &mut rng, "dec.input_proj", d, d)), None, None)
        };
        let dec_pe = ScaledPositionalEncoding::init(&mut store, "dec.pe", d);
        let dec_blocks = (0..cfg.dec_layers)
            .map(|i| DecoderBlock::init(&mut store, &mut rng, &format!("dec.block{i}"), d, cfg.heads))
            .collect();
        let mel_head = Linear::init(&mut store, &mut rng, "dec.mel_head", d, cfg.bins);
        let stop_head = Linear::init(&mut store, &mut rng, "dec.stop_head", d, 1);
        let postnet = (0..cfg.postnet_layers)
            .map(|i| Conv1d::init(&mut store, &mut rng, &format!("postnet.conv{i}"), cfg.bins, cfg.bins, cfg.postnet_kernel))
            .collect();
        Ok(Self {
            cfg,
            vocab_size,
            store,
            token_table,
            text_prenet,
            text_pe,
            enc_blocks,
            speaker_table,
            speaker_merge,
            dec_prenet,
            input_proj,
            proj1,
            proj2,
            dec_pe,
            dec_blocks,
            mel_head,
            stop_head,
            postnet,
        })
    }

    /// Encoder states before the speaker vector is merged in.
    fn encode_text_unmerged(&self, g: &Graph, token_ids: &[usize]) -> Result<Tensor, ModelError> {
        let table = g.param(&self.store, self.token_table);
        let mut x = table.gather_rows(token_ids)?;
        x = self.text_prenet.forward(g, &self.store, &x).relu();
        x = self.text_pe.add_to(g, &self.store, &x);
        for block in &self.enc_blocks {
            x = block.forward(g, &self.store, &x, None)?;
        }
        Ok(x)
    }

    /// Text-encoder states with the speaker embedding concatenated to every
    /// row, width-restored by an affine layer.
    pub fn encode_text(&self, g: &Graph, token_ids: &[usize], speaker_id: u32) -> Result<Tensor, ModelError> {
        if speaker_id as usize >= self.cfg.speaker_count {
            return Err(ModelError::Tensor(crate::tensor::TensorError::Vocabulary {
                id: speaker_id as usize,
                vocab: self.cfg.speaker_count,
            }));
        }
        let x = self.encode_text_unmerged(g, token_ids)?;
        let table = g.param(&self.store, self.speaker_table);
        let spk = table.gather_rows(&vec![speaker_id as usize; x.rows()])?;
        let merged = Tensor::concat_cols(&[&x, &spk]);
        Ok(self.speaker_merge.forward(g, &self.store, &merged))
    }

    /// projection-1 of an embedding row concatenated with a pre-net output
    /// row: [e_in || o_in]. projection-2 is applied by the decoder feed, not
    /// here.
    pub fn concat_dynamic(&self, g: &Graph, e_i: &Tensor, o_in: &Tensor) -> Result<Tensor, ModelError> {
        let proj1 = self.proj1.as_ref().ok_or_else(|| ModelError::Shape("dynamic path disabled".into()))?;
        if e_i.cols() != self.cfg.embed_dim {
            return Err(ModelError::Shape(format!("embedding width {} vs d_E {}", e_i.cols(), self.cfg.embed_dim)));
        }
        if o_in.cols() != self.cfg.d_model || o_in.rows() != e_i.rows() {
            return Err(ModelError::Shape(format!(
                "pre-net output {}x{} vs embedding rows {}",
                o_in.rows(), o_in.cols(), e_i.rows()
            )));
        }
        let e_in = proj1.forward(g, &self.store, e_i);
        Ok(Tensor::concat_cols(&[&e_in, o_in]))
    }

    /// Decoder input stream for a [T x bins] mel-frame matrix (already
    /// shifted for teacher forcing, or the emitted prefix during inference)
    /// plus, on the dynamic path, one embedding row per frame.
    fn decoder_inputs(
        &self,
        g: &Graph,
        frames: &Tensor,
        e_rows: Option<&Tensor>,
        drop_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let o_in = self.dec_prenet.forward(g, &self.store, frames, drop_rng);
        let x = if self.cfg.dynamic_embedding {
            let e_rows = e_rows.ok_or_else(|| ModelError::Shape("dynamic path needs embedding rows".into()))?;
            let concat = self.concat_dynamic(g, e_rows, &o_in)?;
            self.proj2.as_ref().unwrap().forward(g, &self.store, &concat)
        } else {
            self.input_proj.as_ref().unwrap().forward(g, &self.store, &o_in)
        };
        Ok(self.dec_pe.add_to(g, &self.store, &x))
    }

    fn decode(
        &self,
        g: &Graph,
        inputs: &Tensor,
        memory: &Tensor,
    ) -> Result<Tensor, ModelError> {
        let mask = AttnMask::causal(inputs.rows());
        let mut x = inputs.clone();
        for block in &self.dec_blocks {
            x = block.forward(g, &self.store, &x, memory, Some(&mask))?;
        }
        Ok(x)
    }

    fn postnet_refine(&self, g: &Graph, mel1: &Tensor) -> Tensor {
        if self.postnet.is_empty() {
            return mel1.clone();
        }
        let mut x = mel1.clone();
        for (i, conv) in self.postnet.iter().enumerate() {
            x = conv.forward(g, &self.store, &x);
            if i + 1 < self.postnet.len() {
                x = x.tanh_act();
            }
        }
        mel1.add(&x)
    }

    /// Teacher-forced forward pass. The decoder consumes pre-net(shifted
    /// ground-truth mel) — concatenated with per-frame embedding rows when
    /// the dynamic path is on — under a strict causal mask.
    ///
    /// `e_seq[k]` must hold the embedding of ground-truth segment k-1
    /// (`e_seq[0]` all zeros); it is ignored when the dynamic path is off.
    pub fn forward_teacher_forced(
        &self,
        g: &Graph,
        token_ids: &[usize],
        speaker_id: u32,
        gt_mel: &Mat,
        e_seq: &[Mat],
        drop_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Tensor, Tensor), ModelError> {
        let t = gt_mel.rows();
        if t == 0 || gt_mel.cols() != self.cfg.bins {
            return Err(ModelError::Shape(format!("ground-truth mel {}x{}", t, gt_mel.cols())));
        }
        let memory = self.encode_text(g, token_ids, speaker_id)?;

        // shifted input: frame 0 is zeros, frame t is gt[t-1]
        let mut shifted = vec![0.0; t * self.cfg.bins];
        shifted[self.cfg.bins..].copy_from_slice(&gt_mel.data()[..(t - 1) * self.cfg.bins]);
        let frames = g.constant(t, self.cfg.bins, shifted);

        let e_rows = if self.cfg.dynamic_embedding {
            Some(g.constant(t, self.cfg.embed_dim, per_frame_embedding_rows(e_seq, t, self.cfg.segment_len, self.cfg.embed_dim)?))
        } else {
            None
        };
        let inputs = self.decoder_inputs(g, &frames, e_rows.as_ref(), drop_rng)?;
        let states = self.decode(g, &inputs, &memory)?;
        let mel1 = self.mel_head.forward(g, &self.store, &states);
        let stop_logits = self.stop_head.forward(g, &self.store, &states);
        let mel_post = self.postnet_refine(g, &mel1);
        Ok((mel1, mel_post, stop_logits))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let c = &self.cfg;
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), 2.0);
        meta.insert("vocab".into(), self.vocab_size as f64);
        meta.insert("d_model".into(), c.d_model as f64);
        meta.insert("heads".into(), c.heads as f64);
        meta.insert("enc_layers".into(), c.enc_layers as f64);
        meta.insert("dec_layers".into(), c.dec_layers as f64);
        meta.insert("segment_len".into(), c.segment_len as f64);
        meta.insert("embed_dim".into(), c.embed_dim as f64);
        meta.insert("dyn_width".into(), c.dyn_width as f64);
        meta.insert("dynamic".into(), if c.dynamic_embedding { 1.0 } else { 0.0 });
        meta.insert("speaker_count".into(), c.speaker_count as f64);
        meta.insert("speaker_dim".into(), c.speaker_dim as f64);
        meta.insert("bins".into(), c.bins as f64);
        meta.insert("postnet_layers".into(), c.postnet_layers as f64);
        meta.insert("postnet_kernel".into(), c.postnet_kernel as f64);
        meta.insert("stop_threshold".into(), c.stop_threshold);
        meta.insert("max_decode_frames".into(), c.max_decode_frames as f64);
        meta.insert("prenet_dropout".into(), c.prenet_dropout);
        checkpoint::save(path, &self.store, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let loaded = checkpoint::load(path)?;
        let get = |k: &str| loaded.meta_value(k).map_err(|_| ModelError::BadMeta(k.to_string()));
        if get("kind")? != 2.0 {
            return Err(ModelError::BadMeta("kind (expected a TTS checkpoint)".into()));
        }
        let cfg = TtsConfig {
            d_model: get("d_model")? as usize,
            heads: get("heads")? as usize,
            enc_layers: get("enc_layers")? as usize,
            dec_layers: get("dec_layers")? as usize,
            segment_len: get("segment_len")? as usize,
            embed_dim: get("embed_dim")? as usize,
            dyn_width: get("dyn_width")? as usize,
            dynamic_embedding: get("dynamic")? != 0.0,
            speaker_count: get("speaker_count")? as usize,
            speaker_dim: get("speaker_dim")? as usize,
            bins: get("bins")? as usize,
            postnet_layers: get("postnet_layers")? as usize,
            postnet_kernel: get("postnet_kernel")? as usize,
            stop_threshold: get("stop_threshold")?,
            max_decode_frames: get("max_decode_frames")? as usize,
            prenet_dropout: get("prenet_dropout")?,
        };
        let vocab = get("vocab")? as usize;
        let mut model = Self::init(cfg, vocab, 0)?;
        loaded.fill_store(&mut model.store)?;
        Ok(model)
    }
}

/// Expands a per-segment embedding sequence into one row per frame: frame t
/// reads row (t mod T_S) of `e_seq[t / T_S]`.
fn per_frame_embedding_rows(e_seq: &[Mat], t: usize, segment_len: usize, d_e: usize) -> Result<Vec<f64>, ModelError> {
    let segments = t.div_ceil(segment_len);
    if e_seq.len() != segments {
        return Err(ModelError::Shape(format!(
            "embedding sequence holds {} segments but the mel needs {segments}",
            e_seq.len()
        )));
    }
    let mut rows = Vec::with_capacity(t * d_e);
    for frame in 0..t {
        let k = frame / segment_len;
        let i = frame % segment_len;
        let e = &e_seq[k];
        if e.cols() != d_e {
            return Err(ModelError::Shape(format!("embedding width {} vs d_E {d_e}", e.cols())));
        }
        if i >= e.rows() {
            return Err(ModelError::Shape(format!(
                "frame {frame} needs embedding row {i} but segment {k} has only {} rows",
                e.rows()
            )));
        }
        rows.extend_from_slice(e.row(i));
    }
    Ok(rows)
}

/// MSE(mel1, gt) + MSE(mel_post, gt) + BCE(stop_logits, gt_stop).
pub fn tts_loss(
    mel1: &Tensor,
    mel_post: &Tensor,
    stop_logits: &Tensor,
    gt: &Tensor,
    gt_stop: &[f64],
) -> Result<Tensor, ModelError> {
    if mel1.rows() != gt.rows() || mel1.cols() != gt.cols() || mel_post.rows() != gt.rows() || mel_post.cols() != gt.cols() {
        return Err(ModelError::Shape(format!(
            "mel {}x{} / post {}x{} vs ground truth {}x{}",
            mel1.rows(), mel1.cols(), mel_post.rows(), mel_post.cols(), gt.rows(), gt.cols()
        )));
    }
    if stop_logits.rows() != gt.rows() || stop_logits.cols() != 1 {
        return Err(ModelError::Shape(format!("stop logits {}x{} vs {} frames", stop_logits.rows(), stop_logits.cols(), gt.rows())));
    }
    if gt_stop.len() != gt.rows() {
        return Err(ModelError::Shape(format!("gt_stop holds {} frames, mel {}", gt_stop.len(), gt.rows())));
    }
    let mel_terms = mel1.mse_vs(gt).add(&mel_post.mse_vs(gt));
    Ok(mel_terms.add(&stop_logits.bce_with_logits_mean(gt_stop)))
}

/// 1 on the final frame, 0 elsewhere.
pub fn stop_targets(t: usize) -> Vec<f64> {
    let mut v = vec![0.0; t];
    if t > 0 {
        v[t - 1] = 1.0;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorError;

    fn toy_cfg(dynamic: bool) -> TtsConfig {
        TtsConfig {
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            segment_len: 4,
            embed_dim: 8,
            dyn_width: 4,
            dynamic_embedding: dynamic,
            speaker_count: 2,
            speaker_dim: 3,
            bins: 4,
            postnet_layers: 2,
            postnet_kernel: 3,
            ..Default::default()
        }
    }

    fn toy_mel(t: usize) -> Mat {
        Mat::from_fn(t, 4, |r, c| ((r * 4 + c) as f64 * 0.31).sin())
    }

    fn zero_e_seq(t: usize, cfg: &TtsConfig) -> Vec<Mat> {
        (0..t.div_ceil(cfg.segment_len)).map(|_| Mat::zeros(cfg.segment_len, cfg.embed_dim)).collect()
    }

    #[test]
    fn encoder_states_per_token_and_speaker_sensitivity() {
        let m = TransformerTtsModel::init(toy_cfg(false), 6, 3).unwrap();
        let g = Graph::new();
        let s0 = m.encode_text(&g, &[0, 1, 2], 0).unwrap();
        assert_eq!((s0.rows(), s0.cols()), (3, 8));
        let s1 = m.encode_text(&g, &[0, 1, 2], 1).unwrap();
        assert_ne!(s0.value(), s1.value(), "speaker vector not injected");
    }

    #[test]
    fn zeroed_speaker_row_with_identity_merge_recovers_base_encoder() {
        let mut m = TransformerTtsModel::init(toy_cfg(false), 6, 3).unwrap();
        // speaker row 0 := zeros; merge := [I | 0] with zero bias
        let table = m.store.get_mut(m.speaker_table);
        table.data[..3].iter_mut().for_each(|v| *v = 0.0);
        let w = m.store.get_mut(m.speaker_merge.w);
        w.data.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..8 {
            w.data[i * (8 + 3) + i] = 1.0;
        }
        let g = Graph::new();
        let merged = m.encode_text(&g, &[3, 4], 0).unwrap();
        let base = m.encode_text_unmerged(&g, &[3, 4]).unwrap();
        assert_eq!(merged.value(), base.value());
    }

    #[test]
    fn speaker_out_of_range_rejected() {
        let m = TransformerTtsModel::init(toy_cfg(false), 6, 3).unwrap();
        let g = Graph::new();
        assert!(matches!(
            m.encode_text(&g, &[0], 2),
            Err(ModelError::Tensor(TensorError::Vocabulary { id: 2, vocab: 2 }))
        ));
    }

    #[test]
    fn concat_dynamic_widths_and_zero_embedding() {
        let m = TransformerTtsModel::init(toy_cfg(true), 6, 3).unwrap();
        let g = Graph::new();
        let e = g.zeros(1, 8);
        let o = g.constant(1, 8, (0..8).map(|v| v as f64).collect());
        let cat = m.concat_dynamic(&g, &e, &o).unwrap();
        assert_eq!(cat.cols(), 4 + 8);
        // zero embedding + zero bias leaves the e_in half all zeros
        let v = cat.value();
        assert!(v[..4].iter().all(|&x| x == 0.0));
        assert_eq!(&v[4..], &o.value()[..]);
    }

    #[test]
    fn concat_dynamic_hand_projection() {
        let mut m = TransformerTtsModel::init(toy_cfg(true), 6, 3).unwrap();
        // unit embedding row: e_in[j] = sum of column weights of row j
        let proj1 = m.proj1.as_ref().unwrap().clone();
        let w = m.store.get_mut(proj1.w);
        let wd = w.data.clone(); // 4 x 8
        let g = Graph::new();
        let e = g.constant(1, 8, vec![1.0; 8]);
        let o = g.zeros(1, 8);
        let cat = m.concat_dynamic(&g, &e, &o).unwrap();
        let v = cat.value();
        for j in 0..4 {
            let want: f64 = wd[j * 8..(j + 1) * 8].iter().sum();
            assert!((v[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn paper_scale_concat_width_is_eighty_plus_prenet() {
        let cfg = TtsConfig { dyn_width: 80, embed_dim: 32, d_model: 32, heads: 2, dynamic_embedding: true, ..toy_cfg(true) };
        let m = TransformerTtsModel::init(cfg, 4, 0).unwrap();
        let g = Graph::new();
        let e = g.zeros(1, 32);
        let o = g.zeros(1, 32);
        assert_eq!(m.concat_dynamic(&g, &e, &o).unwrap().cols(), 80 + 32);
    }

    #[test]
    fn baseline_ignores_embedding_sequence() {
        let m = TransformerTtsModel::init(toy_cfg(false), 6, 3).unwrap();
        let mel = toy_mel(6);
        let g = Graph::new();
        let (a1, ap, asl) = m.forward_teacher_forced(&g, &[0, 1], 0, &mel, &[], None).unwrap();
        let g2 = Graph::new();
        let junk: Vec<Mat> = vec![Mat::from_fn(4, 8, |r, c| (r + c) as f64), Mat::from_fn(4, 8, |_, _| -3.0)];
        let (b1, bp, bsl) = m.forward_teacher_forced(&g2, &[0, 1], 0, &mel, &junk, None).unwrap();
        assert_eq!(a1.value(), b1.value());
        assert_eq!(ap.value(), bp.value());
        assert_eq!(asl.value(), bsl.value());
    }

    #[test]
    fn baseline_has_no_dynamic_parameters() {
        let m = TransformerTtsModel::init(toy_cfg(false), 6, 3).unwrap();
        assert!(m.store.iter().all(|(_, e)| !e.name.starts_with("dyn.")));
        let d = TransformerTtsModel::init(toy_cfg(true), 6, 3).unwrap();
        assert!(d.store.find("dyn.proj1.w").is_some());
        assert!(d.store.find("dec.input_proj.w").is_none());
    }

    #[test]
    fn causality_of_mel1_under_input_perturbation() {
        let m = TransformerTtsModel::init(toy_cfg(true), 6, 3).unwrap();
        let mel = toy_mel(7);
        let e_seq = zero_e_seq(7, &m.cfg);
        let g = Graph::new();
        let (mel1, _, _) = m.forward_teacher_forced(&g, &[0, 1, 2], 0, &mel, &e_seq, None).unwrap();
        let base = mel1.value();

        let mut bumped = mel.clone();
        let t_perturb = 4;
        bumped.set(t_perturb, 1, bumped.get(t_perturb, 1) + 2.5);
        let g2 = Graph::new();
        let (mel1b, _, _) = m.forward_teacher_forced(&g2, &[0, 1, 2], 0, &bumped, &e_seq, None).unwrap();
        let after = mel1b.value();
        // frames <= t_perturb depend only on gt frames < t_perturb
        assert_eq!(&base[..(t_perturb + 1) * 4], &after[..(t_perturb + 1) * 4]);
        assert_ne!(&base[(t_perturb + 1) * 4..], &after[(t_perturb + 1) * 4..]);
    }

    #[test]
    fn tts_loss_trivial_cases() {
        let g = Graph::new();
        let gt = g.constant(2, 2, vec![0.5, -0.5, 1.0, 0.0]);
        let stops = stop_targets(2);
        // saturated stop logits and perfect mels drive the loss to ~0
        let logits = g.constant(2, 1, vec![-40.0, 40.0]);
        let loss = tts_loss(&gt, &gt, &logits, &gt, &stops).unwrap().scalar();
        assert!(loss.abs() < 1e-12, "loss {loss}");

        // zero postnet residual: mel terms collapse to 2 x MSE(mel1, gt)
        let mel1 = g.constant(2, 2, vec![1.5, -0.5, 1.0, 1.0]);
        let zero_logits = g.constant(2, 1, vec![0.0, 0.0]);
        let loss = tts_loss(&mel1, &mel1, &zero_logits, &gt, &stops).unwrap().scalar();
        let mse = mel1.mse_vs(&gt).scalar();
        let bce = zero_logits.bce_with_logits_mean(&stops).scalar();
        assert!((loss - (2.0 * mse + bce)).abs() < 1e-12);
    }

    #[test]
    fn tts_loss_hand_case_matches_scalar_oracle() {
        // 2 frames x 1 bin, hand-computed
        let g = Graph::new();
        let mel1 = g.constant(2, 1, vec![1.0, 2.0]);
        let post = g.constant(2, 1, vec![1.5, 2.5]);
        let gt = g.constant(2, 1, vec![1.0, 3.0]);
        let logits = g.constant(2, 1, vec![0.2, -0.3]);
        let stops = vec![0.0, 1.0];
        let got = tts_loss(&mel1, &post, &logits, &gt, &stops).unwrap().scalar();
        // scalar-loop oracle: -ln(1 - sigmoid(0.2)) for the 0 target,
        // -ln(sigmoid(-0.3)) for the 1 target, averaged
        let mse1 = ((1.0f64 - 1.0).powi(2) + (2.0f64 - 3.0).powi(2)) / 2.0;
        let mse2 = ((1.5f64 - 1.0).powi(2) + (2.5f64 - 3.0).powi(2)) / 2.0;
        let bce = (-(1.0 - crate::tensor::graph::sigmoid(0.2)).ln() - crate::tensor::graph::sigmoid(-0.3).ln()) / 2.0;
        assert!((got - (mse1 + mse2 + bce)).abs() < 1e-12);
    }

    #[test]
    fn zero_postnet_layers_passes_mel1_through() {
        let cfg = TtsConfig { postnet_layers: 0, ..toy_cfg(false) };
        let m = TransformerTtsModel::init(cfg, 6, 3).unwrap();
        let mel = toy_mel(4);
        let g = Graph::new();
        let (mel1, post, _) = m.forward_teacher_forced(&g, &[0], 0, &mel, &[], None).unwrap();
        assert_eq!(mel1.value(), post.value());
    }

    #[test]
    fn save_load_round_trip() {
        let m = TransformerTtsModel::init(toy_cfg(true), 6, 3).unwrap();
        let dir = std::env::temp_dir().join(format!("segbert-tts-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tts.sbtc");
        m.save(&path).unwrap();
        let back = TransformerTtsModel::load(&path).unwrap();
        assert!(back.cfg.dynamic_embedding);
        let mel = toy_mel(5);
        let e_seq = zero_e_seq(5, &m.cfg);
        let g1 = Graph::new();
        let (a, _, _) = m.forward_teacher_forced(&g1, &[1, 2], 1, &mel, &e_seq, None).unwrap();
        let g2 = Graph::new();
        let (b, _, _) = back.forward_teacher_forced(&g2, &[1, 2], 1, &mel, &e_seq, None).unwrap();
        assert_eq!(a.value(), b.value());
        std::fs::remove_dir_all(&dir).ok();
    }
}
