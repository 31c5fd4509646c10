//! Multi-task objective: `L = w_k·L_k + w_e·L_e + w_m·L_m`.
//!
//! `L_k` and `L_e` are negative log-likelihoods of the gold triple and
//! entity at every teacher-forced step, the final stop step included.
//! `L_m = (1/p²) Σ_t (map(K̂_t) − Ê_t)²` over the argmax selections of the
//! teacher-forced distributions, where `map` gives a triple's parent entity
//! and stop maps to `p`. `L_m` is a value only: it enters the total as a
//! constant and contributes no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, Var};
use crate::planner::{argmax, teacher_forced, triple_mask};
use crate::schema::{Plan, StructuredInput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub k: f64,
    pub e: f64,
    pub m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { k: 1.0, e: 1.0, m: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchingMode {
    /// Squared difference of entity indices.
    #[default]
    Verbatim,
    /// 1 per step whose entities disagree.
    Indicator,
}

/// `L_k = −Σ_t log P(gold triple at t)`; rows of `logp` are steps.
pub fn loss_triples(g: &mut Graph, logp: Var, targets: &[usize]) -> Result<Var> {
    g.nll(logp, targets)
}

/// `L_e = −Σ_t log P(gold entity at t)`.
pub fn loss_entities(g: &mut Graph, logp: Var, targets: &[usize]) -> Result<Var> {
    g.nll(logp, targets)
}

/// `L_m` over `(map(K_t), E_t)` pairs for an input with `p` entities.
pub fn loss_matching(pairs: &[(usize, usize)], p: usize, mode: MatchingMode) -> f64 {
    let norm = (p * p) as f64;
    pairs
        .iter()
        .map(|&(m, e)| match mode {
            MatchingMode::Verbatim => {
                let d = m as f64 - e as f64;
                d * d / norm
            }
            MatchingMode::Indicator => f64::from(u8::from(m != e)),
        })
        .sum()
}

/// `(map(K̂_t), Ê_t)` from per-step triple and entity choices; stop on
/// either side maps to `p`.
pub fn matching_pairs(input: &StructuredInput, triples: &[usize], entities: &[usize]) -> Vec<(usize, usize)> {
    let p = input.num_entities();
    triples
        .iter()
        .zip(entities)
        .map(|(&k, &e)| {
            let mapped = if k >= input.num_total() { p } else { input.triple(k).entity_id };
            (mapped, e.min(p))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_k: f64,
    pub l_e: f64,
    pub l_m: f64,
    pub total: f64,
}

/// Records the total loss of one example on `g`.
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    g: &mut Graph,
    model: &Model,
    input: &StructuredInput,
    gold: &Plan,
    weights: LossWeights,
    mode: MatchingMode,
    no_repeat: bool,
) -> Result<(Var, LossParts)> {
    let triples = gold.triples();
    let entities = gold.entities();
    for (t, &j) in triples.iter().enumerate() {
        if triple_mask(input, &triples[..t], no_repeat)[j] != 0.0 {
            return Err(Error::TrainingSetup(format!("gold triple {j} at step {t} is masked")));
        }
    }
    let enc = model.encode(g, input, None)?;
    let forced = teacher_forced(g, model, input, &enc, &entities, &triples, no_repeat)?;

    let p = input.num_entities();
    let mut k_targets = triples.clone();
    k_targets.push(input.num_total());
    let mut e_targets = entities.clone();
    e_targets.push(p);
    let l_k = loss_triples(g, forced.triple_logp, &k_targets)?;
    let l_e = loss_entities(g, forced.entity_logp, &e_targets)?;

    let (_, ck) = g.dims(forced.triple_logp);
    let (_, ce) = g.dims(forced.entity_logp);
    let k_hat: Vec<usize> = g.value(forced.triple_logp).chunks(ck).map(argmax).collect();
    let e_hat: Vec<usize> = g.value(forced.entity_logp).chunks(ce).map(argmax).collect();
    let l_m = loss_matching(&matching_pairs(input, &k_hat, &e_hat), p, mode);

    let wk = g.scale(l_k, weights.k);
    let we = g.scale(l_e, weights.e);
    let sum = g.add(wk, we)?;
    let total = g.add_scalar(sum, weights.m * l_m);
    let parts = LossParts {
        l_k: g.scalar(l_k),
        l_e: g.scalar(l_e),
        l_m,
        total: g.scalar(total),
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_examples() {
        assert_eq!(loss_matching(&[(0, 1)], 2, MatchingMode::Verbatim), 0.25);
        assert_eq!(loss_matching(&[(1, 1), (2, 2)], 2, MatchingMode::Verbatim), 0.0);
        assert_eq!(loss_matching(&[(0, 3), (1, 1)], 3, MatchingMode::Indicator), 1.0);
    }

    #[test]
    fn uniform_nll() {
        let mut g = Graph::new();
        let x = g.constant(2, 4, vec![0.0; 8]).unwrap();
        let lp = g.masked_log_softmax(x, None).unwrap();
        let l = loss_triples(&mut g, lp, &[1, 3]).unwrap();
        assert!((g.scalar(l) - 2.0 * 4f64.ln()).abs() < 1e-12);
        let x = g.constant(1, 3, vec![0.0; 3]).unwrap();
        let lp = g.masked_log_softmax(x, None).unwrap();
        let l = loss_entities(&mut g, lp, &[2]).unwrap();
        assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-12);
    }
}
