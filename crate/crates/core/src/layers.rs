//! Transformer building blocks shared by the embedder, encoder and planner.
//!
//! Layers are pre-norm: `x + drop(sublayer(LN(x)))`. Parameters live in a
//! flat [`ModelParams`] registry under a caller-chosen prefix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Graph, ModelParams, Tensor, Var, BLOCK};

/// Attention probabilities of one head, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnRecord {
    pub layer: String,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub probs: Vec<f64>,
}

/// Seeded parameter initializer; values depend only on the seed and the
/// order of registration.
pub struct ParamInit<'a> {
    pub params: &'a mut ModelParams,
    rng: ChaCha8Rng,
}

impl<'a> ParamInit<'a> {
    pub fn new(params: &'a mut ModelParams, seed: u64) -> Self {
        Self {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.params.insert(name, Tensor::new(shape, data)?)
    }

    /// Glorot-uniform matrix.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(name, vec![rows, cols], bound)
    }

    /// Lookup table whose rows have unit expected squared norm.
    pub fn table(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let bound = (3.0 / cols as f64).sqrt();
        self.uniform(name, vec![rows, cols], bound)
    }

    pub fn zeros(&mut self, name: &str, len: usize) -> Result<()> {
        self.params.insert(name, Tensor::zeros(vec![len]))
    }

    pub fn ones(&mut self, name: &str, len: usize) -> Result<()> {
        self.params.insert(name, Tensor::new(vec![len], vec![1.0; len])?)
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.ones(&format!("{prefix}.g"), d)?;
        self.zeros(&format!("{prefix}.b"), d)
    }

    pub fn attention(&mut self, prefix: &str, d: usize) -> Result<()> {
        for w in ["wq", "wk", "wv", "wo"] {
            self.xavier(&format!("{prefix}.{w}"), d, d)?;
        }
        self.zeros(&format!("{prefix}.bo"), d)
    }

    pub fn ffn(&mut self, prefix: &str, d: usize, ff: usize) -> Result<()> {
        self.xavier(&format!("{prefix}.ff1.w"), d, ff)?;
        self.zeros(&format!("{prefix}.ff1.b"), ff)?;
        self.xavier(&format!("{prefix}.ff2.w"), ff, d)?;
        self.zeros(&format!("{prefix}.ff2.b"), d)
    }

    pub fn encoder_layer(&mut self, prefix: &str, d: usize, ff: usize) -> Result<()> {
        self.layer_norm(&format!("{prefix}.ln1"), d)?;
        self.attention(&format!("{prefix}.attn"), d)?;
        self.layer_norm(&format!("{prefix}.ln2"), d)?;
        self.ffn(prefix, d, ff)
    }

    pub fn decoder_layer(&mut self, prefix: &str, d: usize, ff: usize) -> Result<()> {
        self.layer_norm(&format!("{prefix}.ln1"), d)?;
        self.attention(&format!("{prefix}.self"), d)?;
        self.layer_norm(&format!("{prefix}.ln2"), d)?;
        self.attention(&format!("{prefix}.cross"), d)?;
        self.layer_norm(&format!("{prefix}.ln3"), d)?;
        self.ffn(prefix, d, ff)
    }
}

/// Shape and regularization shared by every layer call.
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub n_heads: usize,
    pub dropout: f64,
}

pub fn layer_norm(g: &mut Graph, p: &ModelParams, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(p, &format!("{prefix}.g"))?;
    let bias = g.param(p, &format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias)
}

/// Multi-head attention of `q_in` rows over `kv_in` rows with an additive
/// mask (`rows(q_in) x rows(kv_in)` or one broadcast row).
#[allow(clippy::too_many_arguments)]
pub fn attention(
    g: &mut Graph,
    p: &ModelParams,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    spec: LayerSpec,
    mask: Option<&[f64]>,
    trace: Option<&mut Vec<AttnRecord>>,
) -> Result<Var> {
    let (_, d) = g.dims(q_in);
    let heads = spec.n_heads;
    let dh = d / heads;
    let wq = g.param(p, &format!("{prefix}.wq"))?;
    let wk = g.param(p, &format!("{prefix}.wk"))?;
    let wv = g.param(p, &format!("{prefix}.wv"))?;
    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut records = Vec::new();
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh);
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale);
        let a = g.masked_softmax(s, mask)?;
        if trace.is_some() {
            let (rows, cols) = g.dims(a);
            records.push(AttnRecord {
                layer: prefix.to_string(),
                head: h,
                rows,
                cols,
                probs: g.value(a).to_vec(),
            });
        }
        outs.push(g.matmul(a, vh)?);
    }
    if let Some(t) = trace {
        t.extend(records);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let wo = g.param(p, &format!("{prefix}.wo"))?;
    let bo = g.param(p, &format!("{prefix}.bo"))?;
    let o = g.matmul(cat, wo)?;
    g.add_row(o, bo)
}

pub fn ffn(g: &mut Graph, p: &ModelParams, prefix: &str, x: Var) -> Result<Var> {
    let w1 = g.param(p, &format!("{prefix}.ff1.w"))?;
    let b1 = g.param(p, &format!("{prefix}.ff1.b"))?;
    let w2 = g.param(p, &format!("{prefix}.ff2.w"))?;
    let b2 = g.param(p, &format!("{prefix}.ff2.b"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    g.add_row(o, b2)
}

pub fn encoder_layer(
    g: &mut Graph,
    p: &ModelParams,
    prefix: &str,
    x: Var,
    spec: LayerSpec,
    mask: Option<&[f64]>,
    trace: Option<&mut Vec<AttnRecord>>,
) -> Result<Var> {
    let n = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let a = attention(g, p, &format!("{prefix}.attn"), n, n, spec, mask, trace)?;
    let a = g.dropout(a, spec.dropout);
    let x = g.add(x, a)?;
    let n = layer_norm(g, p, &format!("{prefix}.ln2"), x)?;
    let f = ffn(g, p, prefix, n)?;
    let f = g.dropout(f, spec.dropout);
    g.add(x, f)
}

pub fn decoder_layer(
    g: &mut Graph,
    p: &ModelParams,
    prefix: &str,
    x: Var,
    memory: Var,
    spec: LayerSpec,
    self_mask: &[f64],
) -> Result<Var> {
    let n = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let a = attention(g, p, &format!("{prefix}.self"), n, n, spec, Some(self_mask), None)?;
    let a = g.dropout(a, spec.dropout);
    let x = g.add(x, a)?;
    let n = layer_norm(g, p, &format!("{prefix}.ln2"), x)?;
    let c = attention(g, p, &format!("{prefix}.cross"), n, memory, spec, None, None)?;
    let c = g.dropout(c, spec.dropout);
    let x = g.add(x, c)?;
    let n = layer_norm(g, p, &format!("{prefix}.ln3"), x)?;
    let f = ffn(g, p, prefix, n)?;
    let f = g.dropout(f, spec.dropout);
    g.add(x, f)
}

/// `t x t` mask letting row `i` attend to columns `0..=i`.
pub fn causal_mask(t: usize) -> Vec<f64> {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = BLOCK;
        }
    }
    m
}
