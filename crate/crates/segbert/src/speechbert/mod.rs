//! The speech BERT model: a text encoder and a speech encoder feeding a
//! bidirectional decoder that reconstructs syllable-masked mel frames.
//!
//! Relative to the autoregressive TTS decoder, the self-attention here is
//! unmasked and there is no stop-token head; the decoder's input stream is
//! the speech-encoder states themselves. The speech-encoder top-layer states
//! are the prosody embeddings consumed by the dynamic TTS variant.

pub mod masking;
pub mod train;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::MelSpectrogram;
use crate::mat::Mat;
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::graph::{Graph, ParamId, ParamStore, Tensor, TensorError};
use crate::tensor::nn::{DecoderBlock, EncoderBlock, Linear, Prenet, ScaledPositionalEncoding};

pub use masking::{apply_masks, plan_masks, plan_masks_exact, MaskPlan};
pub use train::{train_bert, TrainReport};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("utterance has {t} frames, over the configured max {max}")]
    TooManyFrames { t: usize, max: usize },
    #[error("mask span {start}..{end} invalid for a mel of {t} frames")]
    SpanOutOfRange { start: usize, end: usize, t: usize },
    #[error("template has {got} bins but the mel has {want}")]
    TemplateBins { got: usize, want: usize },
    #[error("empty segment")]
    EmptySegment,
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus mel has {got} bins but the model expects {want}")]
    CorpusBins { got: usize, want: usize },
    #[error("checkpoint meta field `{0}` is missing or invalid")]
    BadMeta(String),
}

/// How training picks syllables to mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Independent per-syllable choice with probability `mask_rate`.
    Bernoulli,
    /// Exactly `round(mask_rate * syllables)` per utterance.
    ExactCount,
}

#[derive(Clone, Copy, Debug)]
pub struct SpeechBertConfig {
    pub d_model: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub speech_layers: usize,
    pub dec_layers: usize,
    pub mask_rate: f64,
    pub bins: usize,
    pub max_frames: usize,
    pub mask_mode: MaskMode,
    /// When set, the reconstruction loss covers only the masked spans
    /// (ablation flag; the default loss covers every frame).
    pub loss_masked_only: bool,
}

impl Default for SpeechBertConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            text_layers: 2,
            speech_layers: 2,
            dec_layers: 2,
            mask_rate: 0.2,
            bins: 8,
            max_frames: 2000,
            mask_mode: MaskMode::Bernoulli,
            loss_masked_only: false,
        }
    }
}

impl SpeechBertConfig {
    /// Width of the prosody embedding: the speech-encoder states are used
    /// directly, so it always equals d_model.
    pub fn embed_dim(&self) -> usize {
        self.d_model
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::Shape(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(ModelError::Shape(format!("mask_rate {} outside [0,1]", self.mask_rate)));
        }
        if self.bins == 0 || self.max_frames == 0 {
            return Err(ModelError::Shape("bins and max_frames must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct SpeechBertModel {
    pub cfg: SpeechBertConfig,
    pub vocab_size: usize,
    pub store: ParamStore,
    token_table: ParamId,
    text_pe: ScaledPositionalEncoding,
    text_blocks: Vec<EncoderBlock>,
    speech_prenet: Prenet,
    speech_pe: ScaledPositionalEncoding,
    speech_blocks: Vec<EncoderBlock>,
    dec_blocks: Vec<DecoderBlock>,
    mel_head: Linear,
}

impl SpeechBertModel {
    pub fn init(cfg: SpeechBertConfig, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let token_table = crate::tensor::nn::xavier(&mut store, &mut rng, "text.tokens", vocab_size, d);
        let text_pe = ScaledPositionalEncoding::init(&mut store, "text.pe", d);
        let text_blocks = (0..cfg.text_layers)
            .map(|i| EncoderBlock::init(&mut store, &mut rng, &format!("text.block{i}"), d, cfg.heads))
            .collect();
        let speech_prenet = Prenet::init(&mut store, &mut rng, "speech.prenet", cfg.bins, d, 0.0);
        let speech_pe = ScaledPositionalEncoding::init(&mut store, "speech.pe", d);
        let speech_blocks = (0..cfg.speech_layers)
            .map(|i| EncoderBlock::init(&mut store, &mut rng, &format!("speech.block{i}"), d, cfg.heads))
            .collect();
        let dec_blocks = (0..cfg.dec_layers)
            .map(|i| DecoderBlock::init(&mut store, &mut rng, &format!("dec.block{i}"), d, cfg.heads))
            .collect();
        let mel_head = Linear::init(&mut store, &mut rng, "dec.mel_head", d, cfg.bins);
        Ok(Self {
            cfg,
            vocab_size,
            store,
            token_table,
            text_pe,
            text_blocks,
            speech_prenet,
            speech_pe,
            speech_blocks,
            dec_blocks,
            mel_head,
        })
    }

    fn encode_text(&self, g: &Graph, token_ids: &[usize]) -> Result<Tensor, ModelError> {
        let table = g.param(&self.store, self.token_table);
        let mut x = table.gather_rows(token_ids)?;
        x = self.text_pe.add_to(g, &self.store, &x);
        for block in &self.text_blocks {
            x = block.forward(g, &self.store, &x, None)?;
        }
        Ok(x)
    }

    /// Speech-encoder states for an already-built input tensor.
    fn encode_speech_tensor(&self, g: &Graph, frames: &Tensor) -> Result<Tensor, ModelError> {
        let mut x = self.speech_prenet.forward(g, &self.store, frames, None);
        x = self.speech_pe.add_to(g, &self.store, &x);
        for block in &self.speech_blocks {
            x = block.forward(g, &self.store, &x, None)?;
        }
        Ok(x)
    }

    /// Full forward pass: reconstruction plus the speech-encoder states.
    /// No attention anywhere is causally masked.
    pub fn forward(
        &self,
        g: &Graph,
        token_ids: &[usize],
        masked_mel: &Mat,
    ) -> Result<(Tensor, Tensor), ModelError> {
        if masked_mel.rows() > self.cfg.max_frames {
            return Err(ModelError::TooManyFrames { t: masked_mel.rows(), max: self.cfg.max_frames });
        }
        if masked_mel.cols() != self.cfg.bins {
            return Err(ModelError::Shape(format!("mel bins {} vs model {}", masked_mel.cols(), self.cfg.bins)));
        }
        let text = self.encode_text(g, token_ids)?;
        let mel_in = g.constant(masked_mel.rows(), masked_mel.cols(), masked_mel.data().to_vec());
        let speech = self.encode_speech_tensor(g, &mel_in)?;
        let mut x = speech.clone();
        for block in &self.dec_blocks {
            x = block.forward(g, &self.store, &x, &text, None)?;
        }
        let recon = self.mel_head.forward(g, &self.store, &x);
        Ok((recon, speech))
    }

    /// Prosody embedding of one segment: the speech-encoder top-layer states
    /// with the segment alone as input. Pure function of (frozen model,
    /// segment); rows match the segment's frame count.
    pub fn extract_embedding(&self, segment: &Mat) -> Result<Mat, ModelError> {
        if segment.rows() == 0 {
            return Err(ModelError::EmptySegment);
        }
        if segment.cols() != self.cfg.bins {
            return Err(ModelError::Shape(format!("segment bins {} vs model {}", segment.cols(), self.cfg.bins)));
        }
        let g = Graph::new();
        let x = g.constant(segment.rows(), segment.cols(), segment.data().to_vec());
        let states = self.encode_speech_tensor(&g, &x)?;
        Ok(Mat::from_vec(states.rows(), states.cols(), states.value()))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), 1.0);
        meta.insert("vocab".into(), self.vocab_size as f64);
        meta.insert("d_model".into(), self.cfg.d_model as f64);
        meta.insert("heads".into(), self.cfg.heads as f64);
        meta.insert("text_layers".into(), self.cfg.text_layers as f64);
        meta.insert("speech_layers".into(), self.cfg.speech_layers as f64);
        meta.insert("dec_layers".into(), self.cfg.dec_layers as f64);
        meta.insert("mask_rate".into(), self.cfg.mask_rate);
        meta.insert("bins".into(), self.cfg.bins as f64);
        meta.insert("max_frames".into(), self.cfg.max_frames as f64);
        meta.insert("mask_exact".into(), if self.cfg.mask_mode == MaskMode::ExactCount { 1.0 } else { 0.0 });
        meta.insert("loss_masked_only".into(), if self.cfg.loss_masked_only { 1.0 } else { 0.0 });
        checkpoint::save(path, &self.store, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let loaded = checkpoint::load(path)?;
        let get = |k: &str| loaded.meta_value(k).map_err(|_| ModelError::BadMeta(k.to_string()));
        if get("kind")? != 1.0 {
            return Err(ModelError::BadMeta("kind (expected a speech BERT checkpoint)".into()));
        }
        let cfg = SpeechBertConfig {
            d_model: get("d_model")? as usize,
            heads: get("heads")? as usize,
            text_layers: get("text_layers")? as usize,
            speech_layers: get("speech_layers")? as usize,
            dec_layers: get("dec_layers")? as usize,
            mask_rate: get("mask_rate")?,
            bins: get("bins")? as usize,
            max_frames: get("max_frames")? as usize,
            mask_mode: if get("mask_exact")? != 0.0 { MaskMode::ExactCount } else { MaskMode::Bernoulli },
            loss_masked_only: get("loss_masked_only")? != 0.0,
        };
        let vocab = get("vocab")? as usize;
        let mut model = Self::init(cfg, vocab, 0)?;
        loaded.fill_store(&mut model.store)?;
        Ok(model)
    }
}

/// Mean squared error over all T x B elements.
pub fn bert_loss(recon: &Tensor, ground_truth: &Tensor) -> Result<Tensor, ModelError> {
    if recon.rows() != ground_truth.rows() || recon.cols() != ground_truth.cols() {
        return Err(ModelError::Shape(format!(
            "reconstruction {}x{} vs ground truth {}x{}",
            recon.rows(), recon.cols(), ground_truth.rows(), ground_truth.cols()
        )));
    }
    Ok(recon.mse_vs(ground_truth))
}

/// Masked-span-only variant: mean squared error over frames inside the plan's
/// spans (ablation path behind `loss_masked_only`).
pub fn bert_loss_masked(
    recon: &Tensor,
    ground_truth: &Tensor,
    plan: &MaskPlan,
) -> Result<Tensor, ModelError> {
    if recon.rows() != ground_truth.rows() || recon.cols() != ground_truth.cols() {
        return Err(ModelError::Shape("masked loss shape mismatch".into()));
    }
    let (t, b) = (recon.rows(), recon.cols());
    let mut weight = vec![0.0; t * b];
    let mut covered = 0usize;
    for &(start, end) in &plan.spans {
        for fr in start..end.min(t) {
            weight[fr * b..(fr + 1) * b].iter_mut().for_each(|w| *w = 1.0);
        }
        covered += end.min(t).saturating_sub(start);
    }
    if covered == 0 {
        // nothing masked: fall back to the full-frame loss
        return bert_loss(recon, ground_truth);
    }
    let g = recon.graph().clone();
    let w = g.constant(t, b, weight);
    let diff = recon.sub(ground_truth);
    let sq = diff.mul(&diff).mul(&w);
    Ok(sq.sum_all().scale(1.0 / (covered * b) as f64))
}

/// Embeddings of a mel split into fixed-length segments: entry k holds the
/// embedding of segment k-1 (entry 0 is all zeros). This is both the training
/// cache rule and the inference refresh rule of the dynamic TTS.
pub fn embedding_cache(
    model: &SpeechBertModel,
    mel: &MelSpectrogram,
    segment_len: usize,
) -> Result<Vec<Mat>, ModelError> {
    assert!(segment_len >= 1);
    let t = mel.t();
    let segments = t.div_ceil(segment_len);
    let mut out = Vec::with_capacity(segments);
    out.push(Mat::zeros(segment_len.min(t), model.cfg.embed_dim()));
    for k in 1..segments {
        let start = (k - 1) * segment_len;
        let prev = mel.frames.slice_rows(start, segment_len.min(t - start));
        out.push(model.extract_embedding(&prev)?);
    }
    Ok(out)
}
