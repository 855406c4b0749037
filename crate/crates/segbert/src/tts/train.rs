//! Teacher-forced TTS training. On the dynamic path, per-utterance embedding
//! sequences are extracted once from the ground-truth mels (segment k-1 feeds
//! segment k; the first segment runs on zeros) before any optimizer step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::features::{Corpus, MelSpectrogram};
use crate::mat::Mat;
use crate::speechbert::train::TrainReport;
use crate::speechbert::{embedding_cache, ModelError, SpeechBertModel};
use crate::tensor::graph::Graph;
use crate::tensor::{Adam, AdamConfig};

use super::{stop_targets, tts_loss, TransformerTtsModel, TtsConfig};

/// Ground-truth embedding sequence for one utterance (the training-time
/// analogue of the inference refresh rule).
pub fn embedding_sequence(
    bert: &SpeechBertModel,
    mel: &MelSpectrogram,
    segment_len: usize,
) -> Result<Vec<Mat>, ModelError> {
    embedding_cache(bert, mel, segment_len)
}

/// Trains for `steps` utterance-level teacher-forced steps. Deterministic
/// for a given seed; `steps == 0` returns the initialization untouched.
pub fn train_tts(
    corpus: &Corpus,
    bert: Option<&SpeechBertModel>,
    cfg: TtsConfig,
    steps: usize,
    seed: u64,
    lr: f64,
) -> Result<(TransformerTtsModel, TrainReport), ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    if corpus.bins() != cfg.bins {
        return Err(ModelError::CorpusBins { got: corpus.bins(), want: cfg.bins });
    }
    if corpus.speaker_count() as usize > cfg.speaker_count {
        return Err(ModelError::Shape(format!(
            "corpus has {} speakers but the model table holds {}",
            corpus.speaker_count(),
            cfg.speaker_count
        )));
    }
    let caches: Vec<Vec<Mat>> = if cfg.dynamic_embedding {
        let bert = bert.ok_or_else(|| ModelError::Shape("dynamic training needs a frozen speech BERT model".into()))?;
        if bert.cfg.embed_dim() != cfg.embed_dim {
            return Err(ModelError::Shape(format!(
                "BERT embedding width {} vs TTS d_E {}",
                bert.cfg.embed_dim(),
                cfg.embed_dim
            )));
        }
        if bert.cfg.bins != cfg.bins {
            return Err(ModelError::Shape(format!("BERT bins {} vs TTS bins {}", bert.cfg.bins, cfg.bins)));
        }
        // offline extraction; pure per utterance, so it parallelizes freely
        corpus
            .utterances
            .par_iter()
            .map(|u| embedding_sequence(bert, &u.mel, cfg.segment_len))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };

    let mut model = TransformerTtsModel::init(cfg, corpus.vocab_size(), seed)?;
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed);
    sample_rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
    drop_rng.set_stream(3);

    let mut adam = Adam::new(AdamConfig { lr, ..AdamConfig::default() }, &model.store);
    let mut report = TrainReport::default();
    let empty: Vec<Mat> = Vec::new();

    for step in 0..steps {
        let idx = sample_rng.random_range(0..corpus.len());
        let utt = &corpus.utterances[idx];
        let e_seq = if model.cfg.dynamic_embedding { &caches[idx] } else { &empty };

        let g = Graph::new();
        let rng_arg = if model.cfg.prenet_dropout > 0.0 { Some(&mut drop_rng) } else { None };
        let (mel1, mel_post, stop_logits) =
            model.forward_teacher_forced(&g, &utt.phoneme_sequence, utt.speaker_id, &utt.mel.frames, e_seq, rng_arg)?;
        let gt = g.constant(utt.mel.t(), utt.mel.bins(), utt.mel.frames.data().to_vec());
        let loss = tts_loss(&mel1, &mel_post, &stop_logits, &gt, &stop_targets(utt.mel.t()))?;
        let loss_val = loss.scalar();
        if !loss_val.is_finite() {
            return Err(ModelError::Diverged { step });
        }
        g.backward(&loss)?;
        let grads = g.param_grads(&model.store);
        adam.step(&mut model.store, &grads)?;
        report.losses.push((step, loss_val));
    }
    Ok((model, report))
}

/// Pooled teacher-forced mel MSE of the refined output over a corpus,
/// dropout off. The evaluation half of the overfit/disambiguation runs.
pub fn teacher_forced_mel_mse(
    model: &TransformerTtsModel,
    bert: Option<&SpeechBertModel>,
    corpus: &Corpus,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    let empty: Vec<Mat> = Vec::new();
    for utt in &corpus.utterances {
        let e_seq = if model.cfg.dynamic_embedding {
            let bert = bert.ok_or_else(|| ModelError::Shape("dynamic evaluation needs the BERT model".into()))?;
            embedding_sequence(bert, &utt.mel, model.cfg.segment_len)?
        } else {
            empty.clone()
        };
        let g = Graph::new();
        let (_, mel_post, _) =
            model.forward_teacher_forced(&g, &utt.phoneme_sequence, utt.speaker_id, &utt.mel.frames, &e_seq, None)?;
        let pred = mel_post.value();
        let gt = utt.mel.frames.data();
        total += pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += gt.len();
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{AlignmentRecord, Phone, Utterance};
    use crate::speechbert::SpeechBertConfig;

    fn tiny_corpus(utts: usize, t: usize, bins: usize) -> Corpus {
        let utterances = (0..utts)
            .map(|u| {
                let phones = vec![
                    Phone { id: "p00".into(), start_frame: 0, end_frame: (t / 2) as u32 },
                    Phone { id: "p01".into(), start_frame: (t / 2) as u32, end_frame: t as u32 },
                ];
                let alignment = AlignmentRecord::new(phones, vec![(0, 0), (1, 1)]).unwrap();
                let frames = Mat::from_fn(t, bins, |r, c| ((u * 17 + r * bins + c) as f64 * 0.29).cos());
                Utterance {
                    id: format!("u{u:03}"),
                    phoneme_sequence: vec![u % 3, (u + 1) % 3],
                    mel: MelSpectrogram { frames, frame_shift_ms: 12.5 },
                    alignment,
                    speaker_id: 0,
                }
            })
            .collect();
        Corpus { utterances }
    }

    fn tiny_cfg(dynamic: bool) -> TtsConfig {
        TtsConfig {
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            segment_len: 4,
            embed_dim: 8,
            dyn_width: 4,
            dynamic_embedding: dynamic,
            speaker_count: 1,
            speaker_dim: 3,
            bins: 4,
            postnet_layers: 2,
            postnet_kernel: 3,
            ..Default::default()
        }
    }

    fn tiny_bert() -> SpeechBertModel {
        let cfg = SpeechBertConfig { d_model: 8, heads: 2, text_layers: 1, speech_layers: 1, dec_layers: 1, bins: 4, ..Default::default() };
        SpeechBertModel::init(cfg, 3, 21).unwrap()
    }

    #[test]
    fn zero_steps_is_the_initialization() {
        let corpus = tiny_corpus(2, 10, 4);
        let (model, _) = train_tts(&corpus, None, tiny_cfg(false), 0, 5, 1e-3).unwrap();
        let fresh = TransformerTtsModel::init(tiny_cfg(false), corpus.vocab_size(), 5).unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(fresh.store.iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn dynamic_training_requires_bert() {
        let corpus = tiny_corpus(2, 10, 4);
        assert!(train_tts(&corpus, None, tiny_cfg(true), 1, 5, 1e-3).is_err());
    }

    #[test]
    fn seeded_determinism_for_both_variants() {
        let corpus = tiny_corpus(3, 10, 4);
        let bert = tiny_bert();
        for dynamic in [false, true] {
            let b = dynamic.then_some(&bert);
            let (_, r1) = train_tts(&corpus, b, tiny_cfg(dynamic), 8, 4, 1e-3).unwrap();
            let (_, r2) = train_tts(&corpus, b, tiny_cfg(dynamic), 8, 4, 1e-3).unwrap();
            assert_eq!(r1.losses, r2.losses, "dynamic={dynamic}");
        }
    }

    #[test]
    fn embedding_cache_counts_and_first_zero() {
        let bert = tiny_bert();
        let mel = MelSpectrogram { frames: Mat::from_fn(10, 4, |r, c| (r + c) as f64 * 0.1), frame_shift_ms: 12.5 };
        let seq = embedding_sequence(&bert, &mel, 4).unwrap();
        assert_eq!(seq.len(), 3); // ceil(10/4)
        assert!(seq[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_embedding_rows_depend_only_on_previous_segment() {
        let bert = tiny_bert();
        let mel = MelSpectrogram { frames: Mat::from_fn(12, 4, |r, c| ((r * 4 + c) as f64 * 0.13).sin()), frame_shift_ms: 12.5 };
        let base = embedding_sequence(&bert, &mel, 4).unwrap();

        // perturb segment 1 (frames 4..8): only e_seq[2] may move
        let mut bumped = mel.clone();
        bumped.frames.set(5, 2, bumped.frames.get(5, 2) + 1.0);
        let after = embedding_sequence(&bert, &bumped, 4).unwrap();
        assert_eq!(base[0], after[0]);
        assert_eq!(base[1], after[1]);
        assert_ne!(base[2], after[2]);
    }

    #[test]
    fn loss_decreases_briefly() {
        let corpus = tiny_corpus(2, 10, 4);
        let (_, report) = train_tts(&corpus, None, tiny_cfg(false), 120, 7, 1e-3).unwrap();
        assert!(report.last_loss().unwrap() < report.first_loss().unwrap());
    }
}
