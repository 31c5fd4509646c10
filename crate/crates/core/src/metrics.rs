//! Plan-level accuracy: content selection (CS), content ordering (CO) and
//! knowledge selection (KS).
//!
//! Conventions: an empty prediction has precision 0 and an empty gold side
//! has recall 0, except that empty against empty scores 1 everywhere. CO is
//! the unrestricted Damerau-Levenshtein distance divided by the longer length;
//! the reported CO score is one minus that.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::schema::{Plan, StructuredInput};

/// A triple identified by its surface content rather than by index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CanonicalTriple {
    pub entity: String,
    pub attr: String,
    pub value: String,
}

pub fn canonical_triples(plan: &Plan, input: &StructuredInput) -> Vec<CanonicalTriple> {
    plan.steps
        .iter()
        .map(|s| {
            let t = input.triple(s.triple);
            CanonicalTriple {
                entity: input.entity(t.entity_id).name.clone(),
                attr: t.attribute.clone(),
                value: t.value.clone(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

/// Overlap counts behind a [`Prf`], kept for micro aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub hits: usize,
    pub pred: usize,
    pub gold: usize,
}

impl Counts {
    pub fn prf(&self) -> Prf {
        if self.pred == 0 && self.gold == 0 {
            return Prf { p: 1.0, r: 1.0, f1: 1.0 };
        }
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        // 2h/(|pred|+|gold|) equals the harmonic mean of p and r with one rounding
        Prf {
            p: ratio(self.hits, self.pred),
            r: ratio(self.hits, self.gold),
            f1: ratio(2 * self.hits, self.pred + self.gold),
        }
    }

    fn add(&mut self, o: &Counts) {
        self.hits += o.hits;
        self.pred += o.pred;
        self.gold += o.gold;
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn multiset_counts<T: Eq + Hash>(pred: &[T], gold: &[T]) -> Counts {
    let mut bag: HashMap<&T, usize> = HashMap::new();
    for g in gold {
        *bag.entry(g).or_default() += 1;
    }
    let mut hits = 0;
    for p in pred {
        if let Some(c) = bag.get_mut(p) {
            if *c > 0 {
                *c -= 1;
                hits += 1;
            }
        }
    }
    Counts {
        hits,
        pred: pred.len(),
        gold: gold.len(),
    }
}

/// CS counts: multiset intersection of predicted and gold triples.
pub fn content_selection_counts<T: Eq + Hash>(pred: &[T], gold: &[T]) -> Counts {
    multiset_counts(pred, gold)
}

pub fn content_selection<T: Eq + Hash>(pred: &[T], gold: &[T]) -> Prf {
    multiset_counts(pred, gold).prf()
}

/// Unrestricted Damerau-Levenshtein distance (unit costs for insertion,
/// deletion, substitution and adjacent transposition).
pub fn damerau_levenshtein<T: Eq>(a: &[T], b: &[T]) -> usize {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return n + m;
    }
    // dense symbol ids so the last-row table is a plain vector
    let mut alphabet: Vec<&T> = Vec::new();
    let mut intern = |x| match alphabet.iter().position(|y| *y == x) {
        Some(i) => i,
        None => {
            alphabet.push(x);
            alphabet.len() - 1
        }
    };
    let ids_a: Vec<usize> = a.iter().map(&mut intern).collect();
    let ids_b: Vec<usize> = b.iter().map(&mut intern).collect();
    let symbols = ids_a.iter().chain(&ids_b).max().map_or(0, |m| m + 1);

    let max = n + m;
    let w = m + 2;
    let mut d = vec![0usize; (n + 2) * w];
    d[0] = max;
    for i in 0..=n {
        d[(i + 1) * w] = max;
        d[(i + 1) * w + 1] = i;
    }
    for j in 0..=m {
        d[j + 1] = max;
        d[w + j + 1] = j;
    }
    let mut last_row = vec![0usize; symbols];
    for i in 1..=n {
        let mut last_col = 0;
        for j in 1..=m {
            let i1 = last_row[ids_b[j - 1]];
            let j1 = last_col;
            let cost = if ids_a[i - 1] == ids_b[j - 1] {
                last_col = j;
                0
            } else {
                1
            };
            let sub = d[i * w + j] + cost;
            let ins = d[(i + 1) * w + j] + 1;
            let del = d[i * w + j + 1] + 1;
            let trans = d[i1 * w + j1] + (i - i1 - 1) + 1 + (j - j1 - 1);
            d[(i + 1) * w + j + 1] = sub.min(ins).min(del).min(trans);
        }
        last_row[ids_a[i - 1]] = i;
    }
    d[(n + 1) * w + m + 1]
}

/// Damerau-Levenshtein distance normalized by the longer length; 0 when both
/// are empty.
pub fn normalized_dld<T: Eq>(pred: &[T], gold: &[T]) -> f64 {
    let longest = pred.len().max(gold.len());
    if longest == 0 {
        0.0
    } else {
        damerau_levenshtein(pred, gold) as f64 / longest as f64
    }
}

/// CO as (normalized distance, score = 1 − distance).
pub fn content_ordering<T: Eq>(pred: &[T], gold: &[T]) -> (f64, f64) {
    let d = normalized_dld(pred, gold);
    (d, 1.0 - d)
}

pub fn knowledge_selection_counts(pred: &Plan, gold: &Plan) -> Counts {
    let p: BTreeSet<(usize, usize)> = pred.steps.iter().map(|s| (s.entity, s.triple)).collect();
    let g: BTreeSet<(usize, usize)> = gold.steps.iter().map(|s| (s.entity, s.triple)).collect();
    Counts {
        hits: p.intersection(&g).count(),
        pred: p.len(),
        gold: g.len(),
    }
}

/// KS: set comparison over (entity, triple) pairs.
pub fn knowledge_selection(pred: &Plan, gold: &Plan) -> Prf {
    knowledge_selection_counts(pred, gold).prf()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanScore {
    pub cs_p: f64,
    pub cs_r: f64,
    pub cs_f1: f64,
    /// Normalized DLD (lower is better).
    pub co_dld: f64,
    /// 1 − `co_dld`.
    pub co: f64,
    pub ks_p: f64,
    pub ks_r: f64,
    pub ks_f1: f64,
    pub cs_counts: Counts,
    pub ks_counts: Counts,
}

impl PlanScore {
    fn from_parts(cs_counts: Counts, ks_counts: Counts, co_dld: f64) -> Self {
        let cs = cs_counts.prf();
        let ks = ks_counts.prf();
        Self {
            cs_p: cs.p,
            cs_r: cs.r,
            cs_f1: cs.f1,
            co_dld,
            co: 1.0 - co_dld,
            ks_p: ks.p,
            ks_r: ks.r,
            ks_f1: ks.f1,
            cs_counts,
            ks_counts,
        }
    }
}

/// Scores a predicted plan against the gold plan over the same input. CS and
/// CO compare canonical triples, KS compares (entity, triple) index pairs.
pub fn score_plan(pred: &Plan, gold: &Plan, input: &StructuredInput) -> PlanScore {
    let p = canonical_triples(pred, input);
    let g = canonical_triples(gold, input);
    PlanScore::from_parts(
        content_selection_counts(&p, &g),
        knowledge_selection_counts(pred, gold),
        normalized_dld(&p, &g),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Micro,
    Macro,
}

/// Corpus-level score. Micro sums counts before dividing; macro averages the
/// per-example values. CO is always a per-example mean. An empty corpus
/// scores as a single empty-versus-empty example.
pub fn aggregate(scores: &[PlanScore], averaging: Averaging) -> PlanScore {
    let mut cs = Counts::default();
    let mut ks = Counts::default();
    for s in scores {
        cs.add(&s.cs_counts);
        ks.add(&s.ks_counts);
    }
    let n = scores.len().max(1) as f64;
    let co_dld = scores.iter().map(|s| s.co_dld).sum::<f64>() / n;
    let mut out = PlanScore::from_parts(cs, ks, co_dld);
    if averaging == Averaging::Macro && !scores.is_empty() {
        let mean = |f: fn(&PlanScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
        out.cs_p = mean(|s| s.cs_p);
        out.cs_r = mean(|s| s.cs_r);
        out.cs_f1 = mean(|s| s.cs_f1);
        out.ks_p = mean(|s| s.ks_p);
        out.ks_r = mean(|s| s.ks_r);
        out.ks_f1 = mean(|s| s.ks_f1);
    }
    out
}
