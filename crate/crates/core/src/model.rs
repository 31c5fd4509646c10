//! Model configuration, parameter registry layout and the shared encoding
//! path used by training and decoding.

use serde::{Deserialize, Serialize};

use crate::embed::{embed_context_aware, embed_numerical, EmbedOptions, TripleFeatures, Vocab};
use crate::encoder::{encode, init_encoder, EncoderSpec, EncoderTrace};
use crate::error::{Error, Result};
use crate::layers::{LayerSpec, ParamInit};
use crate::numerics::{Graph, ModelParams, Var};
use crate::schema::{CorpusMode, StructuredInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_emb: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub n_fusion: usize,
    pub shared_fusion: bool,
    pub dropout: f64,
    /// Rows of the decoders' step embeddings; bounds plan length + 1.
    pub max_steps: usize,
    pub mode: CorpusMode,
    /// Layers of the context encoder (dialogue mode).
    pub ctx_layers: usize,
    pub embed: EmbedOptions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_emb: 64,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 64,
            n_fusion: 2,
            shared_fusion: false,
            dropout: 0.0,
            max_steps: 64,
            mode: CorpusMode::Table,
            ctx_layers: 2,
            embed: EmbedOptions::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_emb == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_fusion == 0 {
            return bad("n_fusion must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_steps < 2 {
            return bad("max_steps must be at least 2".into());
        }
        Ok(())
    }

    pub fn layer_spec(&self) -> LayerSpec {
        LayerSpec {
            n_heads: self.n_heads,
            dropout: self.dropout,
        }
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            layers: self.enc_layers,
            n_fusion: self.n_fusion,
            shared_fusion: self.shared_fusion,
            layer: self.layer_spec(),
        }
    }

    pub fn context_aware(&self) -> bool {
        self.mode == CorpusMode::Dialogue
    }
}

pub const SELECTORS: [&str; 2] = ["plan.ent", "plan.kn"];

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
}

/// Encoder outputs plus the pointer candidates derived from them.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub h: Var,
    pub h_e: Var,
    /// `[H_e; stop]`, `(p + 1) x d`.
    pub cand_e: Var,
    /// `[H; stop]`, `(n_total + 1) x d`.
    pub cand_k: Var,
    /// `cand_e · W_he`.
    pub proj_e: Var,
    /// `cand_k · W_h`.
    pub proj_k: Var,
}

impl Model {
    /// Registers and initializes every parameter from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ModelParams::new();
        let mut init = ParamInit::new(&mut params, seed);
        let (d, e, v, ff) = (config.d_model, config.d_emb, vocab.len(), config.d_ff);
        if config.context_aware() {
            init.table("ctx.tok", v, d)?;
            init.table("ctx.pos", config.embed.max_seq_len, d)?;
            for l in 0..config.ctx_layers {
                init.encoder_layer(&format!("ctx.l{l}"), d, ff)?;
            }
            init.layer_norm("ctx.ln_f", d)?;
        } else {
            for t in ["embed.name", "embed.attr", "embed.value", "embed.type"] {
                init.table(t, v, e)?;
            }
            init.table("embed.value_mag", 1, e)?;
            init.xavier("embed.w", 4 * e, d)?;
            init.zeros("embed.b", d)?;
        }
        init_encoder(&mut init, &config.encoder_spec(), d, ff)?;
        for sel in SELECTORS {
            init.table(&format!("{sel}.start"), 1, d)?;
            init.table(&format!("{sel}.pos"), config.max_steps, d)?;
            for l in 0..config.dec_layers {
                init.decoder_layer(&format!("{sel}.l{l}"), d, ff)?;
            }
            init.layer_norm(&format!("{sel}.ln_f"), d)?;
            init.table(&format!("{sel}.stop"), 1, d)?;
            init.xavier(&format!("{sel}.ptr.wh"), d, d)?;
            init.xavier(&format!("{sel}.ptr.ws"), d, d)?;
            init.xavier(&format!("{sel}.ptr.v"), d, 1)?;
        }
        Ok(Self { config, vocab, params })
    }

    pub fn features(&self, input: &StructuredInput) -> TripleFeatures {
        TripleFeatures::new(input, &self.vocab, &self.config.embed, self.config.context_aware())
    }

    /// Triple embeddings, `n_total x d_model`.
    pub fn embed(&self, g: &mut Graph, f: &TripleFeatures) -> Result<Var> {
        let x = if self.config.context_aware() {
            embed_context_aware(g, &self.params, f, self.config.ctx_layers, self.config.layer_spec())?
        } else {
            embed_numerical(g, &self.params, f, &self.config.embed)?
        };
        if !g.value(x).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("triple embedding".into()));
        }
        Ok(g.dropout(x, self.config.dropout))
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        input: &StructuredInput,
        trace: Option<&mut EncoderTrace>,
    ) -> Result<Encoded> {
        let f = self.features(input);
        let x = self.embed(g, &f)?;
        let (h, h_e) = encode(g, &self.params, x, input, &self.config.encoder_spec(), trace)?;
        let stop_e = g.param(&self.params, "plan.ent.stop")?;
        let stop_k = g.param(&self.params, "plan.kn.stop")?;
        let cand_e = g.concat_rows(&[h_e, stop_e])?;
        let cand_k = g.concat_rows(&[h, stop_k])?;
        let wh_e = g.param(&self.params, "plan.ent.ptr.wh")?;
        let wh_k = g.param(&self.params, "plan.kn.ptr.wh")?;
        let proj_e = g.matmul(cand_e, wh_e)?;
        let proj_k = g.matmul(cand_k, wh_k)?;
        Ok(Encoded {
            h,
            h_e,
            cand_e,
            cand_k,
            proj_e,
            proj_k,
        })
    }
}
