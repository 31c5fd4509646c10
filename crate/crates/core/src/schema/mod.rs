//! Structured knowledge, plans and corpora.
//!
//! A [`StructuredInput`] stores its triples flat, grouped by entity, with one
//! `[HOL]` sentinel at the head of every entity block. Internally plans index
//! into that flat list; files use indices that skip the sentinels.

mod corpus;
mod lcs;
mod plans;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use corpus::{load_corpus, parse_corpus, save_corpus, write_corpus, CorpusMode};
pub use lcs::{label_gold_plan_lcs, LcsOptions};
pub use plans::{load_plans, parse_plans, write_plans, PlanRecord};

use crate::error::{Error, Result};

pub const HOL_ATTR: &str = "[HOL]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Number,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeTriple {
    pub entity_id: usize,
    pub attribute: String,
    pub value: String,
    pub value_kind: ValueKind,
    pub is_hol: bool,
}

impl KnowledgeTriple {
    pub fn numeric_value(&self) -> Option<f64> {
        match self.value_kind {
            ValueKind::Number => self.value.trim().parse().ok(),
            ValueKind::Text => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: usize,
    pub name: String,
}

/// Attribute/value pair as declared in a corpus record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttrValue {
    pub attr: String,
    pub value: String,
    pub kind: ValueKind,
}

impl AttrValue {
    pub fn new(attr: impl Into<String>, value: impl Into<String>, kind: ValueKind) -> Self {
        Self {
            attr: attr.into(),
            value: value.into(),
            kind,
        }
    }

    pub fn number(attr: impl Into<String>, value: impl ToString) -> Self {
        Self::new(attr, value.to_string(), ValueKind::Number)
    }

    pub fn text(attr: impl Into<String>, value: impl Into<String>) -> Self {
        Self::new(attr, value, ValueKind::Text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredInput {
    entities: Vec<Entity>,
    triples: Vec<KnowledgeTriple>,
    blocks: Vec<Range<usize>>,
    pub context: Option<Vec<String>>,
}

impl StructuredInput {
    /// Builds the flat triple list, injecting one `[HOL]` sentinel per entity.
    pub fn new(entities: Vec<(String, Vec<AttrValue>)>, context: Option<Vec<String>>) -> Result<Self> {
        let mut ents = Vec::with_capacity(entities.len());
        let mut triples = Vec::new();
        let mut blocks = Vec::with_capacity(entities.len());
        for (id, (name, attrs)) in entities.into_iter().enumerate() {
            if name.trim().is_empty() {
                return Err(Error::Config(format!("entity {id} has an empty name")));
            }
            let start = triples.len();
            triples.push(KnowledgeTriple {
                entity_id: id,
                attribute: HOL_ATTR.to_string(),
                value: String::new(),
                value_kind: ValueKind::Text,
                is_hol: true,
            });
            for av in attrs {
                if av.attr == HOL_ATTR {
                    return Err(Error::Config(format!("entity {name}: attribute {HOL_ATTR} is reserved")));
                }
                if av.kind == ValueKind::Number && !av.value.trim().parse::<f64>().is_ok_and(f64::is_finite) {
                    return Err(Error::Config(format!(
                        "entity {name}: attribute {} has non-numeric value {:?}",
                        av.attr, av.value
                    )));
                }
                triples.push(KnowledgeTriple {
                    entity_id: id,
                    attribute: av.attr,
                    value: av.value,
                    value_kind: av.kind,
                    is_hol: false,
                });
            }
            blocks.push(start..triples.len());
            ents.push(Entity { id, name });
        }
        if ents.is_empty() {
            return Err(Error::Config("input has no entities".into()));
        }
        Ok(Self {
            entities: ents,
            triples,
            blocks,
            context,
        })
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn triples(&self) -> &[KnowledgeTriple] {
        &self.triples
    }

    pub fn triple(&self, idx: usize) -> &KnowledgeTriple {
        &self.triples[idx]
    }

    pub fn entity(&self, id: usize) -> &Entity {
        &self.entities[id]
    }

    /// Number of entities (`p`).
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Number of rows including sentinels.
    pub fn num_total(&self) -> usize {
        self.triples.len()
    }

    /// Number of real (non-sentinel) triples.
    pub fn num_real(&self) -> usize {
        self.triples.len() - self.entities.len()
    }

    /// Row range of each entity block; the first row is the sentinel.
    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn hol_rows(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.start).collect()
    }

    /// Real triple rows of one entity, sentinel excluded.
    pub fn entity_rows(&self, entity: usize) -> Range<usize> {
        let b = &self.blocks[entity];
        b.start + 1..b.end
    }

    /// Flat row of the `real`-th non-sentinel triple.
    pub fn real_to_flat(&self, real: usize) -> Option<usize> {
        let mut remaining = real;
        for b in &self.blocks {
            let len = b.len() - 1;
            if remaining < len {
                return Some(b.start + 1 + remaining);
            }
            remaining -= len;
        }
        None
    }

    /// Inverse of [`Self::real_to_flat`]; `None` for sentinels and out-of-range rows.
    pub fn flat_to_real(&self, flat: usize) -> Option<usize> {
        let t = self.triples.get(flat)?;
        if t.is_hol {
            return None;
        }
        Some(flat - t.entity_id - 1)
    }

    pub fn real_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.triples
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.is_hol)
            .map(|(i, _)| i)
    }

    /// Entities with their declared triples, sentinels stripped.
    pub fn to_declared(&self) -> Vec<(String, Vec<AttrValue>)> {
        self.entities
            .iter()
            .map(|e| {
                let attrs = self
                    .entity_rows(e.id)
                    .map(|i| {
                        let t = &self.triples[i];
                        AttrValue::new(t.attribute.clone(), t.value.clone(), t.value_kind)
                    })
                    .collect();
                (e.name.clone(), attrs)
            })
            .collect()
    }

    /// The same input with entity blocks reordered: new entity `k` is old
    /// entity `order[k]`.
    pub fn permute_entities(&self, order: &[usize]) -> Result<Self> {
        let declared = self.to_declared();
        if order.len() != declared.len() {
            return Err(Error::Config("permutation length differs from entity count".into()));
        }
        let permuted = order.iter().map(|&i| declared[i].clone()).collect();
        Self::new(permuted, self.context.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PlanStep {
    pub entity: usize,
    /// Flat row index (sentinels included).
    pub triple: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Plan {
    pub steps: Vec<PlanStep>,
    /// Ended by the stop symbol rather than by the length cap.
    pub terminated: bool,
}

impl Plan {
    pub fn new(steps: Vec<PlanStep>, terminated: bool) -> Self {
        Self { steps, terminated }
    }

    /// Gold-style plan: every step's entity is its triple's parent.
    pub fn from_triples(input: &StructuredInput, triples: &[usize]) -> Self {
        Self {
            steps: triples
                .iter()
                .map(|&t| PlanStep {
                    entity: input.triple(t).entity_id,
                    triple: t,
                })
                .collect(),
            terminated: true,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn triples(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.triple).collect()
    }

    pub fn entities(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.entity).collect()
    }

    /// Checks indices against `input`; gold plans must also agree with the
    /// parent entity of each triple.
    pub fn validate(&self, input: &StructuredInput, gold: bool) -> std::result::Result<(), String> {
        for (t, s) in self.steps.iter().enumerate() {
            let Some(triple) = input.triples().get(s.triple) else {
                return Err(format!("step {t}: triple {} out of range", s.triple));
            };
            if triple.is_hol {
                return Err(format!("step {t}: triple {} is a sentinel", s.triple));
            }
            if gold && s.entity != triple.entity_id {
                return Err(format!(
                    "step {t}: entity {} is not the parent ({}) of triple {}",
                    s.entity, triple.entity_id, s.triple
                ));
            }
            if !gold && s.entity > input.num_entities() {
                return Err(format!("step {t}: entity {} out of range", s.entity));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub input: StructuredInput,
    pub gold_plan: Option<Plan>,
    pub reference: Option<String>,
}

/// Lowercased whitespace tokens with surrounding punctuation stripped;
/// punctuation-only tokens are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let t = w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '_');
            let t = t.strip_suffix("'s").unwrap_or(t);
            (!t.is_empty()).then(|| t.to_lowercase())
        })
        .collect()
}
