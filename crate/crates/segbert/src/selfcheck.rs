//! Gradient self-check: analytic gradients of every layer kind, and of the
//! full training losses on tiny inputs, against central finite differences.
//! Backs the `selfcheck grad` command and acceptance testing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mat::Mat;
use crate::speechbert::{bert_loss, SpeechBertConfig, SpeechBertModel};
use crate::tensor::gradcheck::{all_picks, compare, spread_picks, CheckOutcome, DEFAULT_H};
use crate::tensor::graph::{Graph, ParamStore, Tensor};
use crate::tensor::nn::{
    AttnMask, Conv1d, FeedForward, LayerNorm, Linear, MultiHeadAttention, Prenet, ScaledPositionalEncoding,
};
use crate::tts::{stop_targets, tts_loss, TransformerTtsModel, TtsConfig};

pub const TOLERANCE: f64 = 1e-5;

/// How many parameter components to probe on the full-model losses (probing
/// every weight would need two forwards per weight).
const MODEL_PICKS: usize = 160;

pub struct CaseResult {
    pub name: String,
    pub outcome: CheckOutcome,
}

/// Runs every check; deterministic.
pub fn run_all() -> Vec<CaseResult> {
    let mut results = Vec::new();
    results.extend(layer_cases());
    results.push(bert_case());
    results.push(tts_case(false));
    results.push(tts_case(true));
    results
}

pub fn max_rel_err(results: &[CaseResult]) -> f64 {
    results.iter().map(|r| r.outcome.max_rel_err).fold(0.0, f64::max)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Moves every parameter to a generic point. Freshly initialized biases are
/// exactly zero, and the teacher-forced first frame is exactly zero, leaving
/// ReLUs precisely at their kink where central differences straddle the
/// nondifferentiability; a small jitter steps off that measure-zero set.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for i in 0..store.len() {
        let entry = store.get_mut(crate::tensor::graph::ParamId::index(i));
        for v in entry.data.iter_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
}

/// Checks one store-parameterized forward against finite differences over
/// every parameter component.
fn check<F>(name: &str, mut store: ParamStore, build: F) -> CaseResult
where
    F: Fn(&ParamStore) -> Tensor,
{
    let analytic = {
        let loss = build(&store);
        loss.graph().backward(&loss).expect("scalar loss");
        loss.graph().param_grads(&store)
    };
    let picks = all_picks(&store);
    let outcome = compare(&mut store, |s| build(s).scalar(), &analytic, &picks, DEFAULT_H);
    CaseResult { name: name.to_string(), outcome }
}

fn layer_cases() -> Vec<CaseResult> {
    let mut out = Vec::new();

    // linear: randomized shapes up to 8x32
    for (i, (n, d_in, d_out)) in [(2usize, 3usize, 4usize), (8, 32, 16), (5, 7, 1)].iter().enumerate() {
        let mut store = ParamStore::new();
        let mut r = rng(100 + i as u64);
        let lin = Linear::init(&mut store, &mut r, "lin", *d_in, *d_out);
        let x: Vec<f64> = (0..n * d_in).map(|_| r.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..n * d_out).map(|_| r.random_range(-1.0..1.0)).collect();
        let (n, d_in, d_out) = (*n, *d_in, *d_out);
        out.push(check(&format!("linear[{n}x{d_in}->{d_out}]"), store, move |s| {
            let g = Graph::new();
            let xin = g.constant(n, d_in, x.clone());
            let t = g.constant(n, d_out, target.clone());
            lin.forward(&g, s, &xin).mse_vs(&t)
        }));
    }

    // multi-head attention, unmasked and causal
    for (name, masked) in [("attention", false), ("attention_causal", true)] {
        let mut store = ParamStore::new();
        let mut r = rng(7);
        let attn = MultiHeadAttention::init(&mut store, &mut r, "attn", 8, 2);
        let q: Vec<f64> = (0..6 * 8).map(|_| r.random_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..5 * 8).map(|_| r.random_range(-1.0..1.0)).collect();
        out.push(check(name, store, move |s| {
            let g = Graph::new();
            if masked {
                let x = g.constant(6, 8, q.clone());
                let mask = AttnMask::causal(6);
                attn.forward(&g, s, &x, &x, &x, Some(&mask)).unwrap().mean_all()
            } else {
                let qt = g.constant(6, 8, q.clone());
                let kvt = g.constant(5, 8, kv.clone());
                let y = attn.forward(&g, s, &qt, &kvt, &kvt, None).unwrap();
                y.mul(&y).mean_all()
            }
        }));
    }

    // layer norm
    {
        let mut store = ParamStore::new();
        let ln = LayerNorm::init(&mut store, "ln", 6);
        let mut r = rng(8);
        let x: Vec<f64> = (0..4 * 6).map(|_| r.random_range(-2.0..2.0)).collect();
        out.push(check("layer_norm", store, move |s| {
            let g = Graph::new();
            let xin = g.constant(4, 6, x.clone());
            let y = ln.forward(&g, s, &xin);
            y.mul(&y).mean_all()
        }));
    }

    // feed-forward
    {
        let mut store = ParamStore::new();
        let mut r = rng(9);
        let ff = FeedForward::init(&mut store, &mut r, "ff", 6);
        let x: Vec<f64> = (0..3 * 6).map(|_| r.random_range(-1.0..1.0)).collect();
        out.push(check("feed_forward", store, move |s| {
            let g = Graph::new();
            let xin = g.constant(3, 6, x.clone());
            ff.forward(&g, s, &xin).mul(&ff.forward(&g, s, &xin)).mean_all()
        }));
    }

    // trainable positional scale
    {
        let mut store = ParamStore::new();
        let pe = ScaledPositionalEncoding::init(&mut store, "pe", 8);
        out.push(check("positional_scale", store, move |s| {
            let g = Graph::new();
            let table = pe.forward(&g, s, 5);
            table.mul(&table).mean_all()
        }));
    }

    // 1-D convolution (the post-net building block) with tanh
    {
        let mut store = ParamStore::new();
        let mut r = rng(10);
        let conv = Conv1d::init(&mut store, &mut r, "conv", 4, 4, 3);
        let x: Vec<f64> = (0..6 * 4).map(|_| r.random_range(-1.0..1.0)).collect();
        out.push(check("conv1d_tanh", store, move |s| {
            let g = Graph::new();
            let xin = g.constant(6, 4, x.clone());
            conv.forward(&g, s, &xin).tanh_act().mul(&xin).mean_all()
        }));
    }

    // embedding lookup with repeated indices (fan-out accumulation)
    {
        let mut store = ParamStore::new();
        let mut r = rng(11);
        let table = crate::tensor::nn::xavier(&mut store, &mut r, "emb", 5, 4);
        let target: Vec<f64> = (0..4 * 4).map(|_| r.random_range(-1.0..1.0)).collect();
        out.push(check("embedding_gather", store, move |s| {
            let g = Graph::new();
            let t = g.param(s, table);
            let x = t.gather_rows(&[0, 2, 2, 4]).unwrap();
            let tgt = g.constant(4, 4, target.clone());
            x.mse_vs(&tgt)
        }));
    }

    // stop head: sigmoid / binary cross-entropy path
    {
        let mut store = ParamStore::new();
        let mut r = rng(12);
        let head = Linear::init(&mut store, &mut r, "stop", 6, 1);
        let x: Vec<f64> = (0..5 * 6).map(|_| r.random_range(-1.0..1.0)).collect();
        out.push(check("stop_bce", store, move |s| {
            let g = Graph::new();
            let xin = g.constant(5, 6, x.clone());
            head.forward(&g, s, &xin).bce_with_logits_mean(&stop_targets(5))
        }));
    }

    // pre-net with a fixed dropout mask (dropout is linear given the mask)
    {
        let mut store = ParamStore::new();
        let mut r = rng(13);
        let prenet = Prenet::init(&mut store, &mut r, "prenet", 4, 6, 0.5);
        let x: Vec<f64> = (0..3 * 4).map(|_| r.random_range(-1.0..1.0)).collect();
        out.push(check("prenet_dropout", store, move |s| {
            let g = Graph::new();
            let xin = g.constant(3, 4, x.clone());
            // the mask must be identical across finite-difference probes
            let mut drop = rng(99);
            let y = prenet.forward(&g, s, &xin, Some(&mut drop));
            y.mul(&y).mean_all()
        }));
    }

    out
}

fn bert_case() -> CaseResult {
    let cfg = SpeechBertConfig {
        d_model: 8,
        heads: 2,
        text_layers: 1,
        speech_layers: 1,
        dec_layers: 1,
        bins: 4,
        ..Default::default()
    };
    let mut model = SpeechBertModel::init(cfg, 5, 31).expect("valid config");
    jitter(&mut model.store, 71);
    let mut r = rng(32);
    let mel = Mat::from_fn(6, 4, |_, _| r.random_range(-1.0..1.0));
    let gt = Mat::from_fn(6, 4, |_, _| r.random_range(-1.0..1.0));
    let tokens = vec![0usize, 3, 4];

    let loss_of = {
        let model = model.clone();
        move |s: &ParamStore| {
            let mut m = model.clone();
            m.store = s.clone();
            let g = Graph::new();
            let (recon, _) = m.forward(&g, &tokens, &mel).unwrap();
            let gt_t = g.constant(6, 4, gt.data().to_vec());
            bert_loss(&recon, &gt_t).unwrap()
        }
    };
    let mut store = model.store.clone();
    let analytic = {
        let loss = loss_of(&store);
        loss.graph().backward(&loss).unwrap();
        loss.graph().param_grads(&store)
    };
    let picks = spread_picks(&store, MODEL_PICKS);
    let outcome = compare(&mut store, |s| loss_of(s).scalar(), &analytic, &picks, DEFAULT_H);
    CaseResult { name: "bert_loss_full".into(), outcome }
}

fn tts_case(dynamic: bool) -> CaseResult {
    let cfg = TtsConfig {
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        segment_len: 3,
        embed_dim: 8,
        dyn_width: 4,
        dynamic_embedding: dynamic,
        speaker_count: 2,
        speaker_dim: 3,
        bins: 4,
        postnet_layers: 2,
        postnet_kernel: 3,
        ..Default::default()
    };
    let mut model = TransformerTtsModel::init(cfg, 5, 33).expect("valid config");
    jitter(&mut model.store, 72);
    let mut r = rng(34);
    let gt = Mat::from_fn(5, 4, |_, _| r.random_range(-1.0..1.0));
    let e_seq: Vec<Mat> = if dynamic {
        vec![Mat::zeros(3, 8), Mat::from_fn(3, 8, |_, _| r.random_range(-1.0..1.0))]
    } else {
        Vec::new()
    };
    let tokens = vec![1usize, 2, 0];

    let loss_of = {
        let model = model.clone();
        move |s: &ParamStore| {
            let mut m = model.clone();
            m.store = s.clone();
            let g = Graph::new();
            let (mel1, post, stop) = m.forward_teacher_forced(&g, &tokens, 1, &gt, &e_seq, None).unwrap();
            let gt_t = g.constant(5, 4, gt.data().to_vec());
            tts_loss(&mel1, &post, &stop, &gt_t, &stop_targets(5)).unwrap()
        }
    };
    let mut store = model.store.clone();
    let analytic = {
        let loss = loss_of(&store);
        loss.graph().backward(&loss).unwrap();
        loss.graph().param_grads(&store)
    };
    let picks = spread_picks(&store, MODEL_PICKS);
    let outcome = compare(&mut store, |s| loss_of(s).scalar(), &analytic, &picks, DEFAULT_H);
    CaseResult { name: if dynamic { "tts_loss_dynamic".into() } else { "tts_loss_baseline".into() }, outcome }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_is_within_tolerance() {
        let results = run_all();
        assert!(!results.is_empty());
        for r in &results {
            assert!(
                r.outcome.max_rel_err < TOLERANCE,
                "{}: {} ({} checks, worst {})",
                r.name,
                r.outcome.max_rel_err,
                r.outcome.checks,
                r.outcome.worst
            );
        }
    }
}
