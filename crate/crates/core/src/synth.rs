//! Seeded box-score-like corpora whose gold plans follow a fixed rule.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::realize::{realize_plan, TemplateLibrary};
use crate::schema::{AttrValue, Example, Plan, StructuredInput, ValueKind};

/// Attribute pool in declaration order; a config with `n_attrs = m` uses the
/// first `m`.
pub const ATTRIBUTES: [(&str, ValueKind); 10] = [
    ("points", ValueKind::Number),
    ("rebounds", ValueKind::Number),
    ("minutes", ValueKind::Number),
    ("assists", ValueKind::Number),
    ("steals", ValueKind::Number),
    ("blocks", ValueKind::Number),
    ("college", ValueKind::Text),
    ("hometown", ValueKind::Text),
    ("turnovers", ValueKind::Number),
    ("FTM", ValueKind::Number),
];

pub const MAX_VALUE: i64 = 40;

const FIRST: [&str; 20] = [
    "Alden", "Bram", "Cato", "Dario", "Emery", "Finn", "Gage", "Hale", "Ivo", "Jory", "Kade", "Lior", "Milo", "Nico",
    "Orin", "Pax", "Quill", "Remy", "Soren", "Tavi",
];

const LAST: [&str; 20] = [
    "Abbott", "Barlow", "Crane", "Dunmore", "Ellery", "Fenwick", "Garrow", "Holt", "Ingram", "Jessup", "Kendrick",
    "Lowell", "Marsh", "Norcott", "Oakes", "Pryor", "Quaid", "Rourke", "Sutter", "Thorne",
];

/// Text-value pool shared by every text attribute.
pub const PLACES: [&str; 50] = [
    "Ashford", "Brackley", "Caldera", "Dunmoor", "Eastvale", "Fairhaven", "Glenrock", "Harrowgate", "Ironwood",
    "Juniper", "Kestrel", "Larchmont", "Millbrook", "Northwind", "Oakridge", "Pinecrest", "Quarry", "Redfield",
    "Stonebridge", "Thornbury", "Umberlee", "Valemont", "Westmarch", "Yarrow", "Zephyr", "Alderney", "Birchwood",
    "Coldspring", "Driftwood", "Elmstead", "Foxhollow", "Greyhaven", "Hollowmere", "Ivywood", "Jasperton",
    "Kingsbury", "Lakeshore", "Moorland", "Newhaven", "Orchard", "Pebblebrook", "Riverside", "Silverlake",
    "Timberline", "Upland", "Violet", "Willowdale", "Yellowstone", "Brightwater", "Copperfield",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    /// The `k` entities with the highest `score` contribute `slots`, ordered
    /// by score descending (ties by entity index).
    TopKByScore { k: usize, score: String, slots: Vec<String> },
    /// Entities with `score >= min` contribute `slots`, ordered as above.
    Threshold { min: i64, score: String, slots: Vec<String> },
    /// The listed entities contribute `slots`, in the listed order.
    FixedSlots { entities: Vec<usize>, slots: Vec<String> },
}

impl Default for Rule {
    fn default() -> Self {
        Rule::TopKByScore {
            k: 2,
            score: "points".into(),
            slots: vec!["points".into(), "rebounds".into(), "minutes".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_examples: usize,
    pub n_entities: usize,
    pub n_attrs: usize,
    pub rule: Rule,
    /// Attach a single fixed dialogue context to every example.
    pub dialogue: bool,
    /// Draw the top-k score attribute without replacement within an
    /// example, so no gold plan depends on the index tie-break.
    pub distinct_scores: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_examples: 200,
            n_entities: 6,
            n_attrs: 8,
            rule: Rule::default(),
            dialogue: false,
            distinct_scores: true,
        }
    }
}

pub const DIALOGUE_CONTEXT: &str = "who had the best game tonight ?";

impl SynthConfig {
    pub fn attributes(&self) -> &'static [(&'static str, ValueKind)] {
        &ATTRIBUTES[..self.n_attrs.min(ATTRIBUTES.len())]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_entities == 0 || self.n_entities > FIRST.len() * LAST.len() {
            return Err(Error::Config(format!("n_entities {} out of range", self.n_entities)));
        }
        if self.n_attrs == 0 || self.n_attrs > ATTRIBUTES.len() {
            return Err(Error::Config(format!("n_attrs must be in 1..={}", ATTRIBUTES.len())));
        }
        let attrs = self.attributes();
        let numeric = |name: &str| {
            attrs
                .iter()
                .any(|(a, k)| *a == name && *k == ValueKind::Number)
        };
        let present = |name: &str| attrs.iter().any(|(a, _)| *a == name);
        let slots = match &self.rule {
            Rule::TopKByScore { k, score, slots } => {
                if *k > self.n_entities {
                    return Err(Error::Config(format!("k = {k} exceeds n_entities = {}", self.n_entities)));
                }
                if !numeric(score) {
                    return Err(Error::Config(format!("score attribute {score} is not a numeric attribute")));
                }
                if self.distinct_scores && self.n_entities > MAX_VALUE as usize + 1 {
                    return Err(Error::Config(format!(
                        "distinct scores need n_entities <= {}",
                        MAX_VALUE + 1
                    )));
                }
                slots
            }
            Rule::Threshold { score, slots, .. } => {
                if !numeric(score) {
                    return Err(Error::Config(format!("score attribute {score} is not a numeric attribute")));
                }
                slots
            }
            Rule::FixedSlots { entities, slots } => {
                if let Some(e) = entities.iter().find(|&&e| e >= self.n_entities) {
                    return Err(Error::Config(format!("entity {e} out of range")));
                }
                slots
            }
        };
        if let Some(s) = slots.iter().find(|s| !present(s)) {
            return Err(Error::Config(format!("slot {s} is not among the generated attributes")));
        }
        Ok(())
    }
}

fn attr_value(input: &StructuredInput, entity: usize, attr: &str) -> Option<(usize, i64)> {
    input.entity_rows(entity).find_map(|r| {
        let t = input.triple(r);
        (t.attribute == attr).then(|| (r, t.value.parse().unwrap_or(0)))
    })
}

/// Gold plan for `input` under `rule`.
pub fn apply_rule(rule: &Rule, input: &StructuredInput) -> Plan {
    let slot_rows = |e: usize, slots: &[String]| -> Vec<usize> {
        slots
            .iter()
            .filter_map(|s| attr_value(input, e, s).map(|(r, _)| r))
            .collect()
    };
    let by_score = |score: &str| -> Vec<(usize, i64)> {
        let mut ranked: Vec<(usize, i64)> = (0..input.num_entities())
            .map(|e| (e, attr_value(input, e, score).map_or(i64::MIN, |(_, v)| v)))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    };
    let (entities, slots): (Vec<usize>, &[String]) = match rule {
        Rule::TopKByScore { k, score, slots } => (by_score(score).into_iter().take(*k).map(|(e, _)| e).collect(), slots),
        Rule::Threshold { min, score, slots } => (
            by_score(score)
                .into_iter()
                .filter(|(_, v)| v >= min)
                .map(|(e, _)| e)
                .collect(),
            slots,
        ),
        Rule::FixedSlots { entities, slots } => (entities.clone(), slots),
    };
    let rows: Vec<usize> = entities.iter().flat_map(|&e| slot_rows(e, slots)).collect();
    Plan::from_triples(input, &rows)
}

pub fn generate(config: &SynthConfig) -> Result<Vec<Example>> {
    generate_with(config, &TemplateLibrary::default())
}

/// Deterministic in `config`: values, names and text choices are drawn in a
/// fixed order from one ChaCha8 stream.
pub fn generate_with(config: &SynthConfig, lib: &TemplateLibrary) -> Result<Vec<Example>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let attrs = config.attributes();
    let mut out = Vec::with_capacity(config.n_examples);
    let distinct = match &config.rule {
        Rule::TopKByScore { score, .. } if config.distinct_scores => Some(score.as_str()),
        _ => None,
    };
    for i in 0..config.n_examples {
        let names = sample(&mut rng, FIRST.len() * LAST.len(), config.n_entities);
        let scores = distinct.map(|_| sample(&mut rng, MAX_VALUE as usize + 1, config.n_entities));
        let entities = names
            .iter()
            .enumerate()
            .map(|(e, n)| {
                let name = format!("{}_{}", FIRST[n / LAST.len()], LAST[n % LAST.len()]);
                let values = attrs
                    .iter()
                    .map(|&(a, kind)| match kind {
                        ValueKind::Number if Some(a) == distinct => {
                            AttrValue::number(a, scores.as_ref().expect("drawn").index(e))
                        }
                        ValueKind::Number => AttrValue::number(a, rng.random_range(0..=MAX_VALUE)),
                        ValueKind::Text => AttrValue::text(a, PLACES[rng.random_range(0..PLACES.len())]),
                    })
                    .collect();
                (name, values)
            })
            .collect();
        let context = config.dialogue.then(|| vec![DIALOGUE_CONTEXT.to_string()]);
        let input = StructuredInput::new(entities, context)?;
        let gold = apply_rule(&config.rule, &input);
        let reference = realize_plan(&gold, &input, lib);
        out.push(Example {
            id: format!("synth-{}-{i:05}", config.seed),
            input,
            gold_plan: Some(gold),
            reference: Some(reference),
        });
    }
    Ok(out)
}
