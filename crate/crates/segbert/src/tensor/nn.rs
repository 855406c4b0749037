//! Neural layers shared by both models: linear maps, multi-head attention,
//! layer norm, feed-forward, scaled sinusoidal positions, 1-D convolution.
//!
//! A layer owns [`ParamId`]s into the model's [`ParamStore`] and builds its
//! forward computation on a per-pass [`Graph`].

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, ParamId, ParamStore, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Uniform init in +-sqrt(6/(fan_in+fan_out)); fan_in = cols, fan_out = rows.
pub fn xavier(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    store.add(name, rows, cols, data)
}

/// y = x . W^T + b, with W stored out_dim x in_dim.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = xavier(store, rng, format!("{name}.w"), out_dim, in_dim);
        let b = store.zeros(format!("{name}.b"), 1, out_dim);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Tensor) -> Tensor {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        x.matmul_bt(&w).add_row(&b)
    }
}

/// Boolean attention mask over query rows x key columns; `true` = attend.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub n: usize,
    pub m: usize,
    pub allow: Vec<bool>,
}

impl AttnMask {
    pub fn causal(n: usize) -> Self {
        let mut allow = vec![false; n * n];
        for q in 0..n {
            for k in 0..=q {
                allow[q * n + k] = true;
            }
        }
        Self { n, m: n, allow }
    }

    pub fn from_rows(n: usize, m: usize, allow: Vec<bool>) -> Self {
        assert_eq!(allow.len(), n * m);
        Self { n, m, allow }
    }

    fn degenerate_row(&self) -> Option<usize> {
        (0..self.n).find(|&r| !self.allow[r * self.m..(r + 1) * self.m].iter().any(|&b| b))
    }
}

/// Multi-head scaled dot-product attention with input projections Wq/Wk/Wv
/// and output projection Wo (all bias-free, d_model x d_model).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize, heads: usize) -> Self {
        assert!(d_model % heads == 0, "d_model {} not divisible by heads {}", d_model, heads);
        Self {
            wq: xavier(store, rng, format!("{name}.wq"), d_model, d_model),
            wk: xavier(store, rng, format!("{name}.wk"), d_model, d_model),
            wv: xavier(store, rng, format!("{name}.wv"), d_model, d_model),
            wo: xavier(store, rng, format!("{name}.wo"), d_model, d_model),
            heads,
            d_model,
        }
    }

    /// softmax(q k^T / sqrt(d_head))-weighted values per head, concatenated
    /// and output-projected. `q_src` supplies queries; `k_src`/`v_src` supply
    /// keys and values (equal for self-attention).
    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        q_src: &Tensor,
        k_src: &Tensor,
        v_src: &Tensor,
        mask: Option<&AttnMask>,
    ) -> Result<Tensor, TensorError> {
        let n = q_src.rows();
        let m = k_src.rows();
        if q_src.cols() != self.d_model || k_src.cols() != self.d_model || v_src.cols() != self.d_model {
            return Err(TensorError::Dimension {
                op: "attention",
                detail: format!(
                    "inputs {}x{}, {}x{}, {}x{} vs d_model {}",
                    q_src.rows(), q_src.cols(), k_src.rows(), k_src.cols(), v_src.rows(), v_src.cols(), self.d_model
                ),
            });
        }
        if k_src.rows() != v_src.rows() {
            return Err(TensorError::Dimension {
                op: "attention",
                detail: format!("key rows {} vs value rows {}", k_src.rows(), v_src.rows()),
            });
        }
        let mask_rc = match mask {
            Some(mk) => {
                if mk.n != n || mk.m != m {
                    return Err(TensorError::Dimension {
                        op: "attention",
                        detail: format!("mask {}x{} vs scores {}x{}", mk.n, mk.m, n, m),
                    });
                }
                if let Some(row) = mk.degenerate_row() {
                    return Err(TensorError::DegenerateMask { row });
                }
                Some(Rc::new(mk.allow.clone()))
            }
            None => None,
        };

        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let wo = g.param(store, self.wo);
        let q = q_src.matmul_bt(&wq);
        let k = k_src.matmul_bt(&wk);
        let v = v_src.matmul_bt(&wv);

        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh);
            let kh = k.slice_cols(h * dh, dh);
            let vh = v.slice_cols(h * dh, dh);
            let scores = qh.matmul_bt(&kh).scale(scale);
            let weights = scores.softmax_rows(mask_rc.clone());
            heads_out.push(weights.matmul(&vh));
        }
        let refs: Vec<&Tensor> = heads_out.iter().collect();
        let concat = Tensor::concat_cols(&refs);
        Ok(concat.matmul_bt(&wo))
    }
}

/// Per-row standardization with trainable gamma/beta.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.constant(format!("{name}.gamma"), 1, d, 1.0);
        let beta = store.zeros(format!("{name}.beta"), 1, d);
        Self { gamma, beta, eps: LAYER_NORM_EPS }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Tensor) -> Tensor {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        x.layer_norm(&gamma, &beta, self.eps)
    }
}

/// Two linear maps with a ReLU between (hidden width 2 * d_model).
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize) -> Self {
        let hidden = 2 * d_model;
        Self {
            lin1: Linear::init(store, rng, &format!("{name}.lin1"), d_model, hidden),
            lin2: Linear::init(store, rng, &format!("{name}.lin2"), hidden, d_model),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Tensor) -> Tensor {
        self.lin2.forward(g, store, &self.lin1.forward(g, store, x).relu())
    }
}

/// Sinusoidal position table scaled by a single trainable alpha.
#[derive(Clone, Debug)]
pub struct ScaledPositionalEncoding {
    pub alpha: ParamId,
    pub d_model: usize,
}

impl ScaledPositionalEncoding {
    pub fn init(store: &mut ParamStore, name: &str, d_model: usize) -> Self {
        let alpha = store.constant(format!("{name}.alpha"), 1, 1, 1.0);
        Self { alpha, d_model }
    }

    /// The unscaled table: row `pos`, columns alternate
    /// sin(pos / 10000^(2i/d)), cos(pos / 10000^(2i/d)).
    pub fn table(length: usize, d_model: usize) -> Vec<f64> {
        let mut out = vec![0.0; length * d_model];
        for pos in 0..length {
            for i in 0..d_model / 2 {
                let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
                let angle = pos as f64 * rate;
                out[pos * d_model + 2 * i] = angle.sin();
                out[pos * d_model + 2 * i + 1] = angle.cos();
            }
            if d_model % 2 == 1 {
                let i = d_model / 2;
                let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
                out[pos * d_model + d_model - 1] = (pos as f64 * rate).sin();
            }
        }
        out
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, length: usize) -> Tensor {
        let table = g.constant(length, self.d_model, Self::table(length, self.d_model));
        let alpha = g.param(store, self.alpha);
        table.scale_by(&alpha)
    }

    /// Adds the scaled table to a [length x d_model] input.
    pub fn add_to(&self, g: &Graph, store: &ParamStore, x: &Tensor) -> Tensor {
        x.add(&self.forward(g, store, x.rows()))
    }
}

/// 1-D convolution along time over a [T x d_in] sequence, SAME zero padding.
/// Implemented as unfold + matmul; kernel is stored (d_out) x (k * d_in).
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Conv1d {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "conv kernel must be odd for SAME padding");
        let w = xavier(store, rng, format!("{name}.w"), d_out, k * d_in);
        let b = store.zeros(format!("{name}.b"), 1, d_out);
        Self { w, b, k, d_in, d_out }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.cols(), self.d_in, "conv1d input width");
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        x.unfold_time(self.k).matmul_bt(&w).add_row(&b)
    }
}

/// Two affine+ReLU layers, optionally with inverted dropout after each ReLU.
#[derive(Clone, Debug)]
pub struct Prenet {
    pub lin1: Linear,
    pub lin2: Linear,
    pub dropout: f64,
}

impl Prenet {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize, dropout: f64) -> Self {
        Self {
            lin1: Linear::init(store, rng, &format!("{name}.lin1"), d_in, d_out),
            lin2: Linear::init(store, rng, &format!("{name}.lin2"), d_out, d_out),
            dropout,
        }
    }

    /// `drop_rng`: when present and dropout > 0, applies seeded inverted
    /// dropout after each ReLU (training mode only).
    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Tensor, drop_rng: Option<&mut ChaCha8Rng>) -> Tensor {
        let h1 = self.lin1.forward(g, store, x).relu();
        match drop_rng {
            Some(rng) if self.dropout > 0.0 => {
                let h1 = h1.dropout(keep_mask(rng, self.dropout, h1.rows() * h1.cols()));
                let h2 = self.lin2.forward(g, store, &h1).relu();
                h2.dropout(keep_mask(rng, self.dropout, h2.rows() * h2.cols()))
            }
            _ => self.lin2.forward(g, store, &h1).relu(),
        }
    }
}

fn keep_mask(rng: &mut ChaCha8Rng, p: f64, len: usize) -> Rc<Vec<f64>> {
    let scale = 1.0 / (1.0 - p);
    Rc::new((0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { scale }).collect())
}

/// Post-LN transformer encoder block: self-attention then feed-forward, each
/// with a residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff: FeedForward,
    pub ln2: LayerNorm,
}

impl EncoderBlock {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize, heads: usize) -> Self {
        Self {
            attn: MultiHeadAttention::init(store, rng, &format!("{name}.attn"), d_model, heads),
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), d_model),
            ff: FeedForward::init(store, rng, &format!("{name}.ff"), d_model),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), d_model),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Tensor, mask: Option<&AttnMask>) -> Result<Tensor, TensorError> {
        let a = self.attn.forward(g, store, x, x, x, mask)?;
        let x = self.ln1.forward(g, store, &x.add(&a));
        let f = self.ff.forward(g, store, &x);
        Ok(self.ln2.forward(g, store, &x.add(&f)))
    }
}

/// Decoder block: self-attention (masked or not), cross-attention over the
/// encoder memory, feed-forward; post-LN residuals throughout.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
    pub ln3: LayerNorm,
}

impl DecoderBlock {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize, heads: usize) -> Self {
        Self {
            self_attn: MultiHeadAttention::init(store, rng, &format!("{name}.self"), d_model, heads),
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), d_model),
            cross_attn: MultiHeadAttention::init(store, rng, &format!("{name}.cross"), d_model, heads),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), d_model),
            ff: FeedForward::init(store, rng, &format!("{name}.ff"), d_model),
            ln3: LayerNorm::init(store, &format!("{name}.ln3"), d_model),
        }
    }

    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        x: &Tensor,
        memory: &Tensor,
        self_mask: Option<&AttnMask>,
    ) -> Result<Tensor, TensorError> {
        let a = self.self_attn.forward(g, store, x, x, x, self_mask)?;
        let x = self.ln1.forward(g, store, &x.add(&a));
        let c = self.cross_attn.forward(g, store, &x, memory, memory, None)?;
        let x = self.ln2.forward(g, store, &x.add(&c));
        let f = self.ff.forward(g, store, &x);
        Ok(self.ln3.forward(g, store, &x.add(&f)))
    }
}
