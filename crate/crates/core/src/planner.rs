//! Hierarchical pointer planner.
//!
//! Two causal transformer decoders run in lockstep. At step `t` the entity
//! selector's state `s^e_t` scores `[H_e; stop]` and the knowledge selector's
//! state `s^k_t = s^e_t + DecK_t` scores `[H; stop]`, both through
//! `g(c, s) = vᵀ tanh(W_h c + W_s s)`. Decoder inputs are the start row
//! followed by the candidates chosen at earlier steps, plus step embeddings;
//! the entity decoder attends over `H_e`, the knowledge decoder over `H`.
//! Sentinel rows are never selectable; with `no_repeat`, neither are triples
//! chosen earlier.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::layers::{causal_mask, decoder_layer, layer_norm};
use crate::model::{Encoded, Model};
use crate::numerics::{Graph, Var, BLOCK};
use crate::schema::{Plan, PlanStep, StructuredInput};

/// Prefix of a partial plan; entity `p` and triple `n_total` denote stop.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeState {
    pub entities: Vec<usize>,
    pub triples: Vec<usize>,
    pub log_prob: f64,
}

impl DecodeState {
    pub fn step(&self) -> usize {
        self.triples.len()
    }
}

/// Decoder states for every step of a prefix: `(prefix.len() + 1) x d`.
fn decoder_states(g: &mut Graph, model: &Model, sel: &str, cand: Var, memory: Var, prefix: &[usize]) -> Result<Var> {
    let p = &model.params;
    let t = prefix.len() + 1;
    if t > model.config.max_steps {
        return Err(Error::Config(format!(
            "plan of {} steps exceeds max_steps = {}",
            prefix.len(),
            model.config.max_steps
        )));
    }
    let start = g.param(p, &format!("{sel}.start"))?;
    let x = if prefix.is_empty() {
        start
    } else {
        let chosen = g.gather_rows(cand, prefix)?;
        g.concat_rows(&[start, chosen])?
    };
    let pos_table = g.param(p, &format!("{sel}.pos"))?;
    let steps: Vec<usize> = (0..t).collect();
    let pos = g.gather_rows(pos_table, &steps)?;
    let mut x = g.add(x, pos)?;
    x = g.dropout(x, model.config.dropout);
    let mask = causal_mask(t);
    for l in 0..model.config.dec_layers {
        x = decoder_layer(g, p, &format!("{sel}.l{l}"), x, memory, model.config.layer_spec(), &mask)?;
    }
    layer_norm(g, p, &format!("{sel}.ln_f"), x)
}

/// Pointer scores of every state row against every candidate, `T x k`.
pub fn pointer_scores(g: &mut Graph, model: &Model, sel: &str, proj: Var, states: Var) -> Result<Var> {
    let p = &model.params;
    let ws = g.param(p, &format!("{sel}.ptr.ws"))?;
    let v = g.param(p, &format!("{sel}.ptr.v"))?;
    let (t, _) = g.dims(states);
    let (k, _) = g.dims(proj);
    let b = g.matmul(states, ws)?;
    let pre = g.pairwise_add(b, proj)?;
    let act = g.tanh(pre);
    let s = g.matmul(act, v)?;
    g.reshape(s, t, k)
}

/// Triple-candidate mask for one step: sentinels always blocked, `used`
/// blocked when `no_repeat`; the stop column is never blocked.
pub fn triple_mask(input: &StructuredInput, used: &[usize], no_repeat: bool) -> Vec<f64> {
    let mut m: Vec<f64> = input
        .triples()
        .iter()
        .map(|t| if t.is_hol { BLOCK } else { 0.0 })
        .collect();
    if no_repeat {
        for &u in used {
            if u < m.len() {
                m[u] = BLOCK;
            }
        }
    }
    m.push(0.0);
    m
}

/// Teacher-forced log-probabilities over a whole target sequence.
pub struct Forced {
    /// `T x (p + 1)`.
    pub entity_logp: Var,
    /// `T x (n_total + 1)`.
    pub triple_logp: Var,
}

/// Runs both selectors over gold prefixes: `entities`/`triples` are the
/// targets of steps `0..T-1` (stop excluded); the outputs have `T` rows, the
/// last being the stop step.
pub fn teacher_forced(
    g: &mut Graph,
    model: &Model,
    input: &StructuredInput,
    enc: &Encoded,
    entities: &[usize],
    triples: &[usize],
    no_repeat: bool,
) -> Result<Forced> {
    let s_e = decoder_states(g, model, "plan.ent", enc.cand_e, enc.h_e, entities)?;
    let dec_k = decoder_states(g, model, "plan.kn", enc.cand_k, enc.h, triples)?;
    let s_k = g.add(s_e, dec_k)?;
    let score_e = pointer_scores(g, model, "plan.ent", enc.proj_e, s_e)?;
    let score_k = pointer_scores(g, model, "plan.kn", enc.proj_k, s_k)?;
    let t = triples.len() + 1;
    let mut mask = Vec::with_capacity(t * (input.num_total() + 1));
    for step in 0..t {
        mask.extend(triple_mask(input, &triples[..step], no_repeat));
    }
    Ok(Forced {
        entity_logp: g.masked_log_softmax(score_e, None)?,
        triple_logp: g.masked_log_softmax(score_k, Some(&mask))?,
    })
}

/// Entity log-distribution over `p + 1` options at the state's step, and
/// the state `s^e_t` it came from.
pub fn entity_step(g: &mut Graph, model: &Model, enc: &Encoded, state: &DecodeState) -> Result<(Vec<f64>, Var)> {
    let all = decoder_states(g, model, "plan.ent", enc.cand_e, enc.h_e, &state.entities)?;
    let s = g.gather_rows(all, &[state.step()])?;
    let scores = pointer_scores(g, model, "plan.ent", enc.proj_e, s)?;
    let logp = g.masked_log_softmax(scores, None)?;
    Ok((g.value(logp).to_vec(), s))
}

/// Triple log-distribution over `n_total + 1` options given this step's
/// entity state, and the knowledge state `s^k_t = s^e_t + DecK_t`.
/// Fails with [`Error::DegenerateStep`] when every triple is masked.
pub fn knowledge_step(
    g: &mut Graph,
    model: &Model,
    input: &StructuredInput,
    enc: &Encoded,
    state: &DecodeState,
    s_e: Var,
    no_repeat: bool,
) -> Result<(Vec<f64>, Var)> {
    let mask = triple_mask(input, &state.triples, no_repeat);
    if mask[..input.num_total()].iter().all(|&m| m == BLOCK) {
        return Err(Error::DegenerateStep);
    }
    let all = decoder_states(g, model, "plan.kn", enc.cand_k, enc.h, &state.triples)?;
    let dec = g.gather_rows(all, &[state.step()])?;
    let s = g.add(s_e, dec)?;
    let scores = pointer_scores(g, model, "plan.kn", enc.proj_k, s)?;
    let logp = g.masked_log_softmax(scores, Some(&mask))?;
    Ok((g.value(logp).to_vec(), s))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices sorted by value descending, ties by index ascending.
fn ranked(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub max_len: usize,
    pub no_repeat: bool,
    pub beam: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            max_len: 50,
            no_repeat: true,
            beam: 5,
        }
    }
}

/// A decoded plan with its summed log-probability (both selectors, stop
/// step included).
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub plan: Plan,
    pub log_prob: f64,
}

fn finish(input: &StructuredInput, state: &DecodeState, terminated: bool) -> Decoded {
    let steps = state
        .entities
        .iter()
        .zip(&state.triples)
        .filter(|(_, &t)| t < input.num_total())
        .map(|(&entity, &triple)| PlanStep { entity, triple })
        .collect();
    Decoded {
        plan: Plan::new(steps, terminated),
        log_prob: state.log_prob,
    }
}

/// Both distributions for the next step; a degenerate knowledge step puts
/// all mass on stop.
fn step_distributions(
    g: &mut Graph,
    model: &Model,
    input: &StructuredInput,
    enc: &Encoded,
    state: &DecodeState,
    no_repeat: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (le, s_e) = entity_step(g, model, enc, state)?;
    let lk = match knowledge_step(g, model, input, enc, state, s_e, no_repeat) {
        Ok((lk, _)) => lk,
        Err(Error::DegenerateStep) => {
            let mut forced = vec![f64::NEG_INFINITY; input.num_total() + 1];
            forced[input.num_total()] = 0.0;
            forced
        }
        Err(e) => return Err(e),
    };
    Ok((le, lk))
}

pub fn decode_greedy(model: &Model, input: &StructuredInput, opts: &DecodeOptions) -> Result<Decoded> {
    if opts.max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut g = Graph::new();
    let enc = model.encode(&mut g, input, None)?;
    greedy_from(&mut g, model, input, &enc, opts)
}

fn greedy_from(
    g: &mut Graph,
    model: &Model,
    input: &StructuredInput,
    enc: &Encoded,
    opts: &DecodeOptions,
) -> Result<Decoded> {
    let stop = input.num_total();
    let mut state = DecodeState::default();
    while state.step() < opts.max_len {
        let (le, lk) = step_distributions(g, model, input, enc, &state, opts.no_repeat)?;
        let e = argmax(&le);
        let k = argmax(&lk);
        state.log_prob += le[e] + lk[k];
        state.entities.push(e);
        state.triples.push(k);
        if k == stop {
            return Ok(finish(input, &state, true));
        }
    }
    Ok(finish(input, &state, false))
}

fn normalized(d: &Decoded) -> f64 {
    d.log_prob / (d.plan.len() + 1) as f64
}

/// Beam search over joint (entity, triple) expansions. Each hypothesis
/// proposes its top `beam` entities crossed with its top `beam` triples,
/// ranked by summed log-probability with ties broken by (hypothesis,
/// entity rank, triple rank). Among finished hypotheses whose raw score is
/// at least the greedy plan's, the best length-normalized one is returned;
/// the greedy plan is always a candidate, so `beam = 1` returns exactly
/// [`decode_greedy`]'s plan and larger beams never lower the raw score.
pub fn decode_beam(model: &Model, input: &StructuredInput, opts: &DecodeOptions) -> Result<Decoded> {
    if opts.beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    if opts.max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut g = Graph::new();
    let enc = model.encode(&mut g, input, None)?;
    let greedy = greedy_from(&mut g, model, input, &enc, opts)?;
    let stop = input.num_total();
    let width = opts.beam;

    let mut beam = vec![DecodeState::default()];
    let mut done: Vec<Decoded> = Vec::new();
    while !beam.is_empty() {
        let mut cands: Vec<(f64, usize, usize, usize, usize, usize)> = Vec::new();
        let mut dists = Vec::with_capacity(beam.len());
        for (h, state) in beam.iter().enumerate() {
            let (le, lk) = step_distributions(&mut g, model, input, &enc, state, opts.no_repeat)?;
            let re = ranked(&le);
            let rk = ranked(&lk);
            for (ei, &e) in re.iter().take(width).enumerate() {
                for (ki, &k) in rk.iter().take(width).enumerate() {
                    if lk[k] < BLOCK / 2.0 {
                        continue;
                    }
                    cands.push((state.log_prob + (le[e] + lk[k]), h, ei, ki, e, k));
                }
            }
            dists.push((le, lk));
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        let mut next = Vec::with_capacity(width);
        for &(score, h, _, _, e, k) in cands.iter().take(width) {
            let mut s = beam[h].clone();
            s.log_prob = score;
            s.entities.push(e);
            s.triples.push(k);
            if k == stop {
                done.push(finish(input, &s, true));
            } else if s.step() >= opts.max_len {
                done.push(finish(input, &s, false));
            } else {
                next.push(s);
            }
        }
        beam = next;
    }

    let mut best = greedy.clone();
    for d in done {
        if d.log_prob >= greedy.log_prob && normalized(&d).total_cmp(&normalized(&best)) == Ordering::Greater {
            best = d;
        }
    }
    Ok(best)
}

/// Greedy when `beam == 1`, beam search otherwise.
pub fn decode(model: &Model, input: &StructuredInput, opts: &DecodeOptions) -> Result<Decoded> {
    if opts.beam <= 1 {
        decode_greedy(model, input, opts)
    } else {
        decode_beam(model, input, opts)
    }
}
