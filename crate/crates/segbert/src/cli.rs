//! Command-line entry points: corpus generation, template building, BERT
//! pretraining, TTS training/synthesis, evaluation and the gradient
//! self-check. Every subcommand is deterministic given (config, seed) and
//! writes a run manifest beside its outputs.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::path::{Path, PathBuf};
use std::sync::Once;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::eval::{compare, contour_csv, EvalPair, F0Config};
use crate::features::corpus::load_corpus;
use crate::features::melfile::{self, MEL_MAGIC};
use crate::features::{alignment, wav, MelSpectrogram, Waveform};
use crate::selfcheck;
use crate::speechbert::{train_bert, SpeechBertModel};
use crate::template::{build_template, AcousticTemplate, PhoneSegmentSet};
use crate::toygen::{generate_toy_corpus, ProsodyMode, ToyCorpusSpec};
use crate::tts::{synthesize, train_tts, TransformerTtsModel};

#[derive(Parser)]
#[command(name = "segbert", version, about = "Segment-level prosody pretraining and transformer TTS, desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic toy corpus
    Gen(GenArgs),
    /// Acoustic segment template
    Template {
        #[command(subcommand)]
        cmd: TemplateCmd,
    },
    /// Speech BERT pretraining
    Bert {
        #[command(subcommand)]
        cmd: BertCmd,
    },
    /// Transformer TTS training and synthesis
    Tts {
        #[command(subcommand)]
        cmd: TtsCmd,
    },
    /// Objective prosody evaluation
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Internal consistency checks
    Selfcheck {
        #[command(subcommand)]
        cmd: SelfcheckCmd,
    },
}

#[derive(Args)]
struct GenArgs {
    /// Output corpus directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    utterances: usize,
    #[arg(long, default_value_t = 6)]
    vocab: usize,
    #[arg(long, default_value_t = 3)]
    syllables: usize,
    #[arg(long, default_value_t = 18)]
    min_frames: usize,
    #[arg(long, default_value_t = 22)]
    max_frames: usize,
    #[arg(long, default_value_t = 8)]
    bins: usize,
    /// independent | chained | ambiguous-pair
    #[arg(long, default_value = "independent")]
    mode: ProsodyMode,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Subcommand)]
enum TemplateCmd {
    /// Build the averaged acoustic segment template from a corpus
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BertCmd {
    /// Pretrain the speech BERT on masked syllable reconstruction
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        template: PathBuf,
        /// Config file path, or a builtin profile name (desk | paper)
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TtsCmd {
    /// Teacher-forced training (baseline, or dynamic when the config enables it)
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Frozen speech BERT checkpoint, or `none` for the baseline
        #[arg(long, default_value = "none")]
        bert: String,
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Autoregressive synthesis to a mel file
    Synth {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "none")]
        bert: String,
        /// Text file of space-separated token ids (a leading spk:<id> token
        /// is tolerated and ignored in favour of --speaker)
        #[arg(long)]
        text: PathBuf,
        #[arg(long, default_value_t = 0)]
        speaker: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Compare synthesized utterances against references
    Compare {
        /// Reference corpus directory (mel/align/txt, optional wav)
        #[arg(long)]
        r#ref: PathBuf,
        /// Hypothesis directory (<id>.mel, optional <id>.align / <id>.wav)
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value = "desk")]
        config: String,
        /// Report CSV path
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SelfcheckCmd {
    /// Verify analytic gradients against central finite differences
    Grad,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Message(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("another run holds the lock {0} (remove it if stale)")]
    Locked(PathBuf),
}

type CliResult = Result<(), CliError>;

fn fail(e: impl std::fmt::Display) -> CliError {
    CliError::Message(e.to_string())
}

/// Worker-pool cap; read once per process.
pub fn init_threads() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        if let Ok(v) = std::env::var("SEGBERT_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
                }
            }
        }
    });
}

/// Parses argv and dispatches. Returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    let result = match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Template { cmd: TemplateCmd::Build { corpus, out } } => cmd_template_build(&corpus, &out),
        Cmd::Bert { cmd: BertCmd::Pretrain { corpus, template, config, out } } => {
            cmd_bert_pretrain(&corpus, &template, &config, &out)
        }
        Cmd::Tts { cmd } => match cmd {
            TtsCmd::Train { corpus, bert, config, out } => cmd_tts_train(&corpus, &bert, &config, &out),
            TtsCmd::Synth { model, bert, text, speaker, out } => cmd_tts_synth(&model, &bert, &text, speaker, &out),
        },
        Cmd::Eval { cmd: EvalCmd::Compare { r#ref, hyp, config, out } } => cmd_eval_compare(&r#ref, &hyp, &config, &out),
        Cmd::Selfcheck { cmd: SelfcheckCmd::Grad } => cmd_selfcheck_grad(),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(spec: &str) -> Result<RunConfig, CliError> {
    match spec {
        "desk" | "paper" => RunConfig::profile(spec).map_err(fail),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|source| CliError::Io { path: PathBuf::from(path), source })?;
            RunConfig::parse(&text).map_err(fail)
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A crude advisory lock beside the output path; concurrent writers to one
/// output are refused rather than interleaved.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(out: &Path) -> Result<Self, CliError> {
        let path = lock_path(out);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(source) => Err(CliError::Io { path, source }),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        std::fs::remove_file(&self.path).ok();
    }
}

fn lock_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".lock");
    out.with_file_name(name)
}

/// `<out>.manifest`, written beside the output (never inside a generated
/// directory, so directory outputs stay byte-reproducible). The full
/// canonical config is embedded so the manifest alone suffices to re-run.
fn write_manifest(out: &Path, command: &str, cfg: Option<&RunConfig>, seed: u64, started: Instant) -> CliResult {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    let path = out.with_file_name(name);
    let cfg_text = cfg.map(RunConfig::serialize).unwrap_or_default();
    let cfg_hash = fnv1a(cfg_text.as_bytes());
    let mut text = format!(
        "command = {command}\nconfig_hash = {cfg_hash:#018x}\nseed = {seed}\nversion = {}\nelapsed_ms = {}\n",
        env!("CARGO_PKG_VERSION"),
        started.elapsed().as_millis()
    );
    if !cfg_text.is_empty() {
        text.push_str("--- config ---\n");
        text.push_str(&cfg_text);
    }
    std::fs::write(&path, text).map_err(|source| CliError::Io { path, source })
}

fn cmd_gen(args: GenArgs) -> CliResult {
    let started = Instant::now();
    let spec = ToyCorpusSpec {
        utterance_count: args.utterances,
        vocab_size: args.vocab,
        syllables_per_utterance: args.syllables,
        min_frames_per_syllable: args.min_frames,
        max_frames_per_syllable: args.max_frames,
        bins: args.bins,
        prosody_mode: args.mode,
        seed: args.seed,
    };
    let _lock = OutputLock::acquire(&args.out)?;
    let n = generate_toy_corpus(&spec, &args.out).map_err(fail)?;
    println!("wrote {n} utterances to {}", args.out.display());
    let cmd = format!(
        "gen --utterances {} --vocab {} --syllables {} --min-frames {} --max-frames {} --bins {} --mode {} --seed {}",
        args.utterances, args.vocab, args.syllables, args.min_frames, args.max_frames, args.bins, args.mode, args.seed
    );
    write_manifest(&args.out, &cmd, None, args.seed, started)
}

fn cmd_template_build(corpus_dir: &Path, out: &Path) -> CliResult {
    let started = Instant::now();
    let corpus = load_corpus(corpus_dir).map_err(fail)?;
    let shift = corpus.utterances[0].mel.frame_shift_ms;
    let set = PhoneSegmentSet::from_corpus(&corpus);
    let template = build_template(&set).map_err(fail)?;
    let _lock = OutputLock::acquire(out)?;
    template.save(out, shift).map_err(fail)?;
    println!("template: {} frames x {} bins -> {}", template.len(), template.bins(), out.display());
    write_manifest(out, "template build", None, 0, started)
}

fn cmd_bert_pretrain(corpus_dir: &Path, template_path: &Path, config: &str, out: &Path) -> CliResult {
    let started = Instant::now();
    let cfg = load_config(config)?;
    let corpus = load_corpus(corpus_dir).map_err(fail)?;
    let template = AcousticTemplate::load(template_path).map_err(fail)?;
    let _lock = OutputLock::acquire(out)?;
    let (model, report) = train_bert(&corpus, &template, cfg.bert, cfg.bert_steps, cfg.seed, cfg.bert_lr).map_err(fail)?;
    model.save(out).map_err(fail)?;
    write_sibling(out, ".loss.csv", report.to_csv().as_bytes())?;
    println!(
        "pretrained {} steps: loss {} -> {} ({})",
        cfg.bert_steps,
        report.first_loss().map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        report.last_loss().map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        out.display()
    );
    write_manifest(out, "bert pretrain", Some(&cfg), cfg.seed, started)
}

fn load_bert_arg(bert: &str) -> Result<Option<SpeechBertModel>, CliError> {
    if bert == "none" {
        return Ok(None);
    }
    SpeechBertModel::load(Path::new(bert)).map(Some).map_err(fail)
}

fn cmd_tts_train(corpus_dir: &Path, bert: &str, config: &str, out: &Path) -> CliResult {
    let started = Instant::now();
    let cfg = load_config(config)?;
    let corpus = load_corpus(corpus_dir).map_err(fail)?;
    let bert_model = load_bert_arg(bert)?;
    if cfg.tts.dynamic_embedding && bert_model.is_none() {
        return Err(CliError::Message("config enables the dynamic embedding but --bert is `none`".into()));
    }
    let _lock = OutputLock::acquire(out)?;
    let (model, report) =
        train_tts(&corpus, bert_model.as_ref(), cfg.tts, cfg.tts_steps, cfg.seed, cfg.tts_lr).map_err(fail)?;
    model.save(out).map_err(fail)?;
    write_sibling(out, ".loss.csv", report.to_csv().as_bytes())?;
    println!(
        "trained {} steps ({}): loss {} -> {} ({})",
        cfg.tts_steps,
        if cfg.tts.dynamic_embedding { "dynamic" } else { "baseline" },
        report.first_loss().map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        report.last_loss().map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        out.display()
    );
    write_manifest(out, "tts train", Some(&cfg), cfg.seed, started)
}

fn cmd_tts_synth(model_path: &Path, bert: &str, text: &Path, speaker: u32, out: &Path) -> CliResult {
    let started = Instant::now();
    let model = TransformerTtsModel::load(model_path).map_err(fail)?;
    let bert_model = load_bert_arg(bert)?;
    let tokens = read_token_file(text)?;
    let _lock = OutputLock::acquire(out)?;
    let result = synthesize(&model, bert_model.as_ref(), &tokens, speaker).map_err(fail)?;
    if result.truncated {
        eprintln!("warning: decode hit max_decode_frames ({}) before the stop token", model.cfg.max_decode_frames);
    }
    melfile::write(out, MEL_MAGIC, &result.mel_post, 12.5).map_err(fail)?;
    println!("synthesized {} frames -> {}", result.mel_post.rows(), out.display());
    write_manifest(out, "tts synth", None, 0, started)
}

fn read_token_file(path: &Path) -> Result<Vec<usize>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    let mut tokens = Vec::new();
    for (i, tok) in text.split_whitespace().enumerate() {
        if i == 0 && tok.starts_with("spk:") {
            continue;
        }
        tokens.push(
            tok.parse::<usize>()
                .map_err(|_| CliError::Message(format!("{}: bad token id `{tok}`", path.display())))?,
        );
    }
    if tokens.is_empty() {
        return Err(CliError::Message(format!("{}: no token ids", path.display())));
    }
    Ok(tokens)
}

fn cmd_eval_compare(ref_dir: &Path, hyp_dir: &Path, config: &str, out: &Path) -> CliResult {
    let started = Instant::now();
    let cfg = load_config(config)?;
    let corpus = load_corpus(ref_dir).map_err(fail)?;

    struct HypEntry {
        mel: MelSpectrogram,
        alignment: Option<crate::features::AlignmentRecord>,
        waveform: Option<Waveform>,
    }
    let mut hyp_entries: Vec<HypEntry> = Vec::with_capacity(corpus.len());
    let mut ref_waves: Vec<Option<Waveform>> = Vec::with_capacity(corpus.len());
    for u in &corpus.utterances {
        let mel_path = hyp_dir.join(format!("{}.mel", u.id));
        let (frames, shift) = melfile::read(&mel_path, MEL_MAGIC)
            .map_err(|e| CliError::Message(format!("{}: {e}", mel_path.display())))?;
        let align_path = hyp_dir.join(format!("{}.align", u.id));
        let alignment = if align_path.exists() {
            let bytes = std::fs::read(&align_path).map_err(|source| CliError::Io { path: align_path.clone(), source })?;
            Some(alignment::parse(&bytes).map_err(|e| CliError::Message(format!("{}: {e}", align_path.display())))?)
        } else {
            None
        };
        let waveform = read_optional_wav(&hyp_dir.join(format!("{}.wav", u.id)))?;
        hyp_entries.push(HypEntry { mel: MelSpectrogram { frames, frame_shift_ms: shift }, alignment, waveform });
        ref_waves.push(read_optional_wav(&ref_dir.join(format!("{}.wav", u.id)))?);
    }

    let pairs: Vec<EvalPair<'_>> = corpus
        .utterances
        .iter()
        .zip(&hyp_entries)
        .zip(&ref_waves)
        .map(|((u, h), rw)| EvalPair {
            reference: u,
            ref_waveform: rw.as_ref(),
            hyp_mel: &h.mel,
            hyp_waveform: h.waveform.as_ref(),
            hyp_alignment: h.alignment.as_ref(),
        })
        .collect();

    let f0_cfg = F0Config { frame_shift_ms: cfg.features.shift_ms, ..F0Config::default() };
    let (report, contours) = compare(&pairs, &f0_cfg, cfg.eval_pooling).map_err(fail)?;
    let _lock = OutputLock::acquire(out)?;
    std::fs::write(out, report.to_csv()).map_err(|source| CliError::Io { path: out.to_path_buf(), source })?;

    // raw contour CSVs for external plotting, only when F0 was computed
    if report.f0.correlation.is_some() {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".contours");
        let dir = out.with_file_name(name);
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
        for c in &contours {
            let p = dir.join(format!("{}.csv", c.utterance));
            std::fs::write(&p, contour_csv(c)).map_err(|source| CliError::Io { path: p, source })?;
        }
    }
    for line in report.to_csv().lines() {
        println!("{line}");
    }
    write_manifest(out, "eval compare", Some(&cfg), cfg.seed, started)
}

fn read_optional_wav(path: &Path) -> Result<Option<Waveform>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    wav::read(path).map(Some).map_err(|e| CliError::Message(format!("{}: {e}", path.display())))
}

fn cmd_selfcheck_grad() -> CliResult {
    let results = selfcheck::run_all();
    for r in &results {
        println!(
            "{:<20} max_rel_err {:.3e}  ({} checks)",
            r.name, r.outcome.max_rel_err, r.outcome.checks
        );
    }
    let max = selfcheck::max_rel_err(&results);
    println!("overall max relative error: {max:.3e} (tolerance {})", selfcheck::TOLERANCE);
    if max < selfcheck::TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Message(format!("gradient check failed: {max:.3e} >= {}", selfcheck::TOLERANCE)))
    }
}

fn write_sibling(out: &Path, suffix: &str, bytes: &[u8]) -> CliResult {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    let path = out.with_file_name(name);
    std::fs::write(&path, bytes).map_err(|source| CliError::Io { path, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_arguments_is_a_usage_error() {
        assert_eq!(run(["segbert"]), 2);
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(run(["segbert", "frobnicate"]), 2);
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(run(["segbert", "gen", "--nonsense", "1"]), 2);
    }

    #[test]
    fn missing_corpus_is_a_domain_error() {
        assert_eq!(run(["segbert", "template", "build", "--corpus", "/nonexistent", "--out", "/tmp/t.sbtp"]), 1);
    }

    #[test]
    fn selfcheck_grad_exits_zero() {
        assert_eq!(run(["segbert", "selfcheck", "grad"]), 0);
    }

    #[test]
    fn lock_refuses_second_writer() {
        let out = std::env::temp_dir().join(format!("segbert-lock-{}", std::process::id()));
        let _l = OutputLock::acquire(&out).unwrap();
        assert!(matches!(OutputLock::acquire(&out), Err(CliError::Locked(_))));
    }
}
