//! Corpus directory loading.
//!
//! Layout: `corpus/<utt_id>.mel` (SBML binary), `<utt_id>.align` (alignment
//! text), `<utt_id>.txt` (space-separated token ids with a leading
//! `spk:<u32>` token). Files are loaded per-utterance in parallel; the
//! resulting corpus is immutable and ordered by utterance id.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use super::alignment::{self, AlignmentRecord};
use super::melfile;
use super::MelSpectrogram;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Mel { path: PathBuf, source: melfile::MelFileError },
    #[error("{path}: {source}")]
    Alignment { path: PathBuf, source: alignment::AlignmentError },
    #[error("{path}: {detail}")]
    Tokens { path: PathBuf, detail: String },
    #[error("utterance {id}: alignment has {phones} phones but the text has {tokens} tokens")]
    PhoneTokenMismatch { id: String, phones: usize, tokens: usize },
    #[error("utterance {id}: mel has {got} bins, expected {want}")]
    BinMismatch { id: String, got: usize, want: usize },
    #[error("no utterances found in {0}")]
    Empty(PathBuf),
}

/// One corpus item: text tokens, mel, alignment, speaker.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub phoneme_sequence: Vec<usize>,
    pub mel: MelSpectrogram,
    pub alignment: AlignmentRecord,
    pub speaker_id: u32,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn bins(&self) -> usize {
        self.utterances.first().map(|u| u.mel.bins()).unwrap_or(0)
    }

    pub fn vocab_size(&self) -> usize {
        self.utterances
            .iter()
            .flat_map(|u| u.phoneme_sequence.iter())
            .max()
            .map(|&m| m + 1)
            .unwrap_or(0)
    }

    pub fn speaker_count(&self) -> u32 {
        self.utterances.iter().map(|u| u.speaker_id).max().map(|m| m + 1).unwrap_or(0)
    }

    pub fn mean_frames(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.utterances.iter().map(|u| u.mel.t() as f64).sum::<f64>() / self.len() as f64
    }
}

/// Parses a token line: `spk:<u32> <id> <id> ...`.
pub fn parse_tokens(text: &str) -> Result<(u32, Vec<usize>), String> {
    let mut it = text.split_whitespace();
    let spk = it
        .next()
        .and_then(|t| t.strip_prefix("spk:"))
        .and_then(|t| t.parse::<u32>().ok())
        .ok_or("first token must be spk:<u32>")?;
    let mut tokens = Vec::new();
    for t in it {
        tokens.push(t.parse::<usize>().map_err(|_| format!("bad token id `{t}`"))?);
    }
    if tokens.is_empty() {
        return Err("no token ids after the speaker tag".into());
    }
    Ok((spk, tokens))
}

pub fn load_utterance(dir: &Path, id: &str) -> Result<Utterance, CorpusError> {
    let mel_path = dir.join(format!("{id}.mel"));
    let (frames, shift) = melfile::read(&mel_path, melfile::MEL_MAGIC)
        .map_err(|source| CorpusError::Mel { path: mel_path, source })?;
    let mel = MelSpectrogram { frames, frame_shift_ms: shift };

    let align_path = dir.join(format!("{id}.align"));
    let bytes = std::fs::read(&align_path).map_err(|source| CorpusError::Io { path: align_path.clone(), source })?;
    let alignment = alignment::parse(&bytes).map_err(|source| CorpusError::Alignment { path: align_path.clone(), source })?;
    alignment
        .validate_against_frames(mel.t())
        .map_err(|source| CorpusError::Alignment { path: align_path, source })?;

    let txt_path = dir.join(format!("{id}.txt"));
    let text = std::fs::read_to_string(&txt_path).map_err(|source| CorpusError::Io { path: txt_path.clone(), source })?;
    let (speaker_id, phoneme_sequence) =
        parse_tokens(&text).map_err(|detail| CorpusError::Tokens { path: txt_path, detail })?;

    if phoneme_sequence.len() != alignment.phones.len() {
        return Err(CorpusError::PhoneTokenMismatch {
            id: id.to_string(),
            phones: alignment.phones.len(),
            tokens: phoneme_sequence.len(),
        });
    }
    Ok(Utterance { id: id.to_string(), phoneme_sequence, mel, alignment, speaker_id })
}

/// Loads every `<id>.mel`/`.align`/`.txt` triple under `dir`, in id order.
pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let mut ids: Vec<String> = std::fs::read_dir(dir)
        .map_err(|source| CorpusError::Io { path: dir.to_path_buf(), source })?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".mel").map(str::to_string)
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(CorpusError::Empty(dir.to_path_buf()));
    }
    let mut utterances: Vec<Utterance> = ids
        .par_iter()
        .map(|id| load_utterance(dir, id))
        .collect::<Result<_, _>>()?;
    utterances.sort_by(|a, b| a.id.cmp(&b.id));

    let bins = utterances[0].mel.bins();
    for u in &utterances {
        if u.mel.bins() != bins {
            return Err(CorpusError::BinMismatch { id: u.id.clone(), got: u.mel.bins(), want: bins });
        }
    }
    Ok(Corpus { utterances })
}
