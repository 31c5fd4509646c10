//! Entity-centric local-global encoder.
//!
//! Each fusion round runs a local stack (attention confined to the entity
//! block) and a global stack (unrestricted) on the same input and combines
//! them with the gate `σ(L + G)`:
//! `H = σ(L+G)⊙L + (1−σ(L+G))⊙G`, evaluated as `G + σ(L+G)⊙(L−G)` so that
//! `L == G` yields `H == L` exactly. Entity states come from one more
//! attention layer over the `[HOL]` rows of the final `H`.

use crate::error::{Error, Result};
use crate::layers::{encoder_layer, layer_norm, AttnRecord, LayerSpec, ParamInit};
use crate::numerics::{Graph, ModelParams, Var, BLOCK};
use crate::schema::StructuredInput;

/// `n_total x n_total`; 0 inside entity blocks, [`BLOCK`] across them.
pub fn local_mask(input: &StructuredInput) -> Vec<f64> {
    let n = input.num_total();
    let ids: Vec<usize> = input.triples().iter().map(|t| t.entity_id).collect();
    let mut m = vec![BLOCK; n * n];
    for i in 0..n {
        for j in 0..n {
            if ids[i] == ids[j] {
                m[i * n + j] = 0.0;
            }
        }
    }
    m
}

pub fn global_mask(input: &StructuredInput) -> Vec<f64> {
    vec![0.0; input.num_total() * input.num_total()]
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderSpec {
    pub layers: usize,
    pub n_fusion: usize,
    /// Reuse round 0's parameters in every round.
    pub shared_fusion: bool,
    pub layer: LayerSpec,
}

impl EncoderSpec {
    fn round_prefix(&self, k: usize) -> String {
        format!("enc.f{}", if self.shared_fusion { 0 } else { k })
    }
}

pub fn init_encoder(init: &mut ParamInit, spec: &EncoderSpec, d: usize, ff: usize) -> Result<()> {
    let rounds = if spec.shared_fusion { 1 } else { spec.n_fusion };
    for k in 0..rounds {
        for side in ["local", "global"] {
            let prefix = format!("enc.f{k}.{side}");
            for l in 0..spec.layers {
                init.encoder_layer(&format!("{prefix}.l{l}"), d, ff)?;
            }
            init.layer_norm(&format!("{prefix}.ln_f"), d)?;
        }
    }
    init.encoder_layer("enc.pool.l0", d, ff)?;
    init.layer_norm("enc.pool.ln_f", d)
}

/// Intermediate values recorded for inspection.
#[derive(Debug, Clone, Default)]
pub struct EncoderTrace {
    pub local_attention: Vec<AttnRecord>,
    pub global_attention: Vec<AttnRecord>,
    /// `(L, G, H)` values of each fusion round.
    pub fusion: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

fn check_finite(g: &Graph, v: Var, layer: &str) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("encoder layer {layer}")))
    }
}

/// Layers of one stack followed by its final layer norm.
#[allow(clippy::too_many_arguments)]
pub fn run_stack(
    g: &mut Graph,
    p: &ModelParams,
    prefix: &str,
    mut x: Var,
    layers: usize,
    spec: LayerSpec,
    mask: &[f64],
    mut trace: Option<&mut Vec<AttnRecord>>,
) -> Result<Var> {
    for l in 0..layers {
        let name = format!("{prefix}.l{l}");
        x = encoder_layer(g, p, &name, x, spec, Some(mask), trace.as_deref_mut())?;
        check_finite(g, x, &name)?;
    }
    layer_norm(g, p, &format!("{prefix}.ln_f"), x)
}

/// `G + σ(L+G)⊙(L−G)`.
pub fn fuse(g: &mut Graph, l: Var, gl: Var) -> Result<Var> {
    let s = g.add(l, gl)?;
    let gate = g.sigmoid(s);
    let diff = g.sub(l, gl)?;
    let gd = g.mul(gate, diff)?;
    g.add(gl, gd)
}

/// Returns `(H, H_e)` with shapes `n_total x d` and `p x d`.
pub fn encode(
    g: &mut Graph,
    p: &ModelParams,
    x: Var,
    input: &StructuredInput,
    spec: &EncoderSpec,
    mut trace: Option<&mut EncoderTrace>,
) -> Result<(Var, Var)> {
    if spec.n_fusion == 0 {
        return Err(Error::Config("n_fusion must be at least 1".into()));
    }
    let local = local_mask(input);
    let global = global_mask(input);
    let mut h = x;
    for k in 0..spec.n_fusion {
        let prefix = spec.round_prefix(k);
        let l = run_stack(
            g,
            p,
            &format!("{prefix}.local"),
            h,
            spec.layers,
            spec.layer,
            &local,
            trace.as_deref_mut().map(|t| &mut t.local_attention),
        )?;
        let gl = run_stack(
            g,
            p,
            &format!("{prefix}.global"),
            h,
            spec.layers,
            spec.layer,
            &global,
            trace.as_deref_mut().map(|t| &mut t.global_attention),
        )?;
        h = fuse(g, l, gl)?;
        check_finite(g, h, &format!("{prefix}.fusion"))?;
        if let Some(t) = trace.as_deref_mut() {
            t.fusion
                .push((g.value(l).to_vec(), g.value(gl).to_vec(), g.value(h).to_vec()));
        }
    }
    let hol = g.gather_rows(h, &input.hol_rows())?;
    let pooled = encoder_layer(g, p, "enc.pool.l0", hol, spec.layer, None, None)?;
    let h_e = layer_norm(g, p, "enc.pool.ln_f", pooled)?;
    check_finite(g, h_e, "enc.pool")?;
    Ok((h, h_e))
}
