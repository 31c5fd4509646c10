//! Triple embeddings.
//!
//! Each triple has four token bags: entity name, attribute name, value and
//! type. A bag embeds as the mean of its token rows in that field's table.
//! Numbers contribute a magnitude bucket token, a signed log-magnitude
//! channel and, when enabled, an exact-value token for frequent values.
//! `[HOL]` sentinels use the `[HOL]` token in all four bags.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{encoder_layer, layer_norm, LayerSpec};
use crate::numerics::{Graph, ModelParams, Var};
use crate::schema::{tokenize, Example, StructuredInput, ValueKind};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const HOL: usize = 4;
pub const STOP: usize = 5;
pub const RESERVED: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[HOL]", "[STOP]"];

/// Upper edges of the non-negative magnitude buckets below 100.
const BUCKETS: [&str; 13] = [
    "<num:neg>", "<num:0>", "<num:1-9>", "<num:10-19>", "<num:20-29>", "<num:30-39>", "<num:40-49>", "<num:50-59>",
    "<num:60-69>", "<num:70-79>", "<num:80-89>", "<num:90-99>", "<num:100+>",
];

pub fn bucket_token(v: f64) -> &'static str {
    if v < 0.0 {
        BUCKETS[0]
    } else if v < 1.0 {
        BUCKETS[1]
    } else if v < 10.0 {
        BUCKETS[2]
    } else if v < 100.0 {
        BUCKETS[2 + (v / 10.0).floor() as usize]
    } else {
        BUCKETS[12]
    }
}

pub fn exact_token(v: f64) -> String {
    format!("<num={v}>")
}

/// Signed log-magnitude of a numeric value.
pub fn magnitude(v: f64) -> f64 {
    v.signum() * v.abs().ln_1p()
}

fn kind_token(kind: ValueKind) -> &'static str {
    match kind {
        ValueKind::Number => "<kind:number>",
        ValueKind::Text => "<kind:text>",
    }
}

fn category_token(category: &str) -> String {
    format!("<cat:{category}>")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedOptions {
    /// Exact-value tokens are kept for numbers seen at least this often;
    /// `None` leaves numbers to their bucket and magnitude.
    pub exact_min_count: Option<usize>,
    /// Name, attribute and text tokens are kept when seen at least this
    /// often. Rare entity names otherwise become memorization handles.
    pub word_min_count: usize,
    /// Entity name → category; the type bag carries the category token.
    pub entity_categories: BTreeMap<String, String>,
    pub default_category: String,
    /// Feed the signed log-magnitude of numbers into the value embedding.
    pub magnitude: bool,
    /// Token cap for context-aware sequences.
    pub max_seq_len: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            exact_min_count: None,
            word_min_count: 5,
            entity_categories: BTreeMap::new(),
            default_category: "entity".into(),
            magnitude: true,
            max_seq_len: 256,
        }
    }
}

impl EmbedOptions {
    fn category(&self, entity: &str) -> &str {
        self.entity_categories
            .get(entity)
            .map_or(self.default_category.as_str(), String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Ids are dense; the first six are the reserved tokens in order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Config(format!("vocabulary must start with {RESERVED:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Collects tokens from `examples` in sorted order after the reserved
    /// block. Bucket, kind and category tokens are always present.
    pub fn build(examples: &[Example], opts: &EmbedOptions) -> Self {
        let mut words: BTreeMap<String, usize> = BTreeMap::new();
        let mut exact: BTreeMap<String, usize> = BTreeMap::new();
        let mut all: Vec<String> = BUCKETS.iter().map(|b| b.to_string()).collect();
        all.push(kind_token(ValueKind::Number).into());
        all.push(kind_token(ValueKind::Text).into());
        all.push(category_token(&opts.default_category));
        all.extend(opts.entity_categories.values().map(|c| category_token(c)));
        let mut add = |w: String| *words.entry(w).or_default() += 1;
        for ex in examples {
            let input = &ex.input;
            for e in input.entities() {
                tokenize(&e.name).into_iter().for_each(&mut add);
            }
            for t in input.triples().iter().filter(|t| !t.is_hol) {
                tokenize(&t.attribute).into_iter().for_each(&mut add);
                match t.numeric_value() {
                    Some(v) => *exact.entry(exact_token(v)).or_default() += 1,
                    None => tokenize(&t.value).into_iter().for_each(&mut add),
                }
            }
            for u in input.context.iter().flatten() {
                tokenize(u).into_iter().for_each(&mut add);
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(
            words
                .into_iter()
                .filter(|(_, c)| *c >= opts.word_min_count)
                .map(|(t, _)| t),
        );
        all.extend(
            exact
                .into_iter()
                .filter(|(_, c)| opts.exact_min_count.is_some_and(|m| *c >= m))
                .map(|(t, _)| t),
        );
        all.sort();
        all.dedup();
        all.retain(|t| !RESERVED.contains(&t.as_str()));
        tokens.extend(all);
        Self::from_tokens(tokens).expect("reserved block and unique tokens by construction")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Unknown tokens map to `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    /// One token per line; line number = id.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tokens(fs::read_to_string(path)?.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }
}

/// Token bags of every row of one input, sentinels included.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleFeatures {
    pub name: Vec<Vec<usize>>,
    pub attr: Vec<Vec<usize>>,
    pub value: Vec<Vec<usize>>,
    pub kind: Vec<Vec<usize>>,
    /// Signed log-magnitude per row (0 for text and sentinels).
    pub magnitude: Vec<f64>,
    /// Context-aware token sequence per row (dialogue mode only).
    pub sequences: Option<Vec<Vec<usize>>>,
}

fn non_empty(ids: Vec<usize>) -> Vec<usize> {
    if ids.is_empty() {
        vec![UNK]
    } else {
        ids
    }
}

impl TripleFeatures {
    pub fn new(input: &StructuredInput, vocab: &Vocab, opts: &EmbedOptions, context_aware: bool) -> Self {
        let ids = |text: &str| -> Vec<usize> { tokenize(text).iter().map(|t| vocab.id(t)).collect() };
        let mut f = Self {
            name: Vec::new(),
            attr: Vec::new(),
            value: Vec::new(),
            kind: Vec::new(),
            magnitude: Vec::new(),
            sequences: None,
        };
        for t in input.triples() {
            if t.is_hol {
                for bag in [&mut f.name, &mut f.attr, &mut f.value, &mut f.kind] {
                    bag.push(vec![HOL]);
                }
                f.magnitude.push(0.0);
                continue;
            }
            let entity = &input.entity(t.entity_id).name;
            f.name.push(non_empty(ids(entity)));
            f.attr.push(non_empty(ids(&t.attribute)));
            match t.numeric_value() {
                Some(v) => {
                    let mut bag = vec![vocab.id(bucket_token(v))];
                    bag.extend(vocab.get(&exact_token(v)));
                    f.value.push(bag);
                    f.magnitude.push(magnitude(v));
                }
                None => {
                    f.value.push(non_empty(ids(&t.value)));
                    f.magnitude.push(0.0);
                }
            }
            f.kind
                .push(vec![vocab.id(kind_token(t.value_kind)), vocab.id(&category_token(opts.category(entity)))]);
        }
        if context_aware {
            let context: Vec<usize> = input
                .context
                .iter()
                .flatten()
                .flat_map(|u| ids(u))
                .collect();
            let seqs = (0..input.num_total())
                .map(|r| {
                    let triple: Vec<usize> = if input.triple(r).is_hol {
                        vec![HOL]
                    } else {
                        f.name[r]
                            .iter()
                            .chain(&f.attr[r])
                            .chain(&f.value[r])
                            .copied()
                            .collect()
                    };
                    context_sequence(&context, &triple, opts.max_seq_len)
                })
                .collect();
            f.sequences = Some(seqs);
        }
        f
    }

    pub fn rows(&self) -> usize {
        self.name.len()
    }
}

/// `[CLS] context [SEP] triple [SEP]`, dropping the oldest context tokens
/// first; the triple side is cut only if it alone exceeds the cap. An empty
/// context gives `[CLS] [SEP] triple [SEP]`.
pub fn context_sequence(context: &[usize], triple: &[usize], cap: usize) -> Vec<usize> {
    let room = cap.saturating_sub(3);
    let triple = &triple[..triple.len().min(room)];
    let ctx_room = room - triple.len();
    let context = &context[context.len().saturating_sub(ctx_room)..];
    let mut seq = Vec::with_capacity(context.len() + triple.len() + 3);
    seq.push(CLS);
    seq.extend_from_slice(context);
    seq.push(SEP);
    seq.extend_from_slice(triple);
    seq.push(SEP);
    seq
}

/// `relu(W_e [n; a; v; t] + b_e)` per row, `rows x d_model`.
pub fn embed_numerical(g: &mut Graph, p: &ModelParams, f: &TripleFeatures, opts: &EmbedOptions) -> Result<Var> {
    let mut parts = Vec::with_capacity(4);
    for (table, bags) in [
        ("embed.name", &f.name),
        ("embed.attr", &f.attr),
        ("embed.value", &f.value),
        ("embed.type", &f.kind),
    ] {
        let t = g.param(p, table)?;
        let mut e = g.embedding_bag(t, bags)?;
        if table == "embed.value" && opts.magnitude {
            let m = g.constant(f.rows(), 1, f.magnitude.clone())?;
            let u = g.param(p, "embed.value_mag")?;
            let mu = g.matmul(m, u)?;
            e = g.add(e, mu)?;
        }
        parts.push(e);
    }
    let cat = g.concat_cols(&parts)?;
    let w = g.param(p, "embed.w")?;
    let b = g.param(p, "embed.b")?;
    let h = g.matmul(cat, w)?;
    let h = g.add_row(h, b)?;
    Ok(g.relu(h))
}

/// `[CLS]` state of the context encoder run over each row's sequence,
/// `rows x d_model`.
pub fn embed_context_aware(
    g: &mut Graph,
    p: &ModelParams,
    f: &TripleFeatures,
    layers: usize,
    spec: LayerSpec,
) -> Result<Var> {
    let seqs = f
        .sequences
        .as_ref()
        .ok_or_else(|| Error::Config("context-aware embedding needs token sequences".into()))?;
    let tok = g.param(p, "ctx.tok")?;
    let pos = g.param(p, "ctx.pos")?;
    let mut rows = Vec::with_capacity(seqs.len());
    // identical sequences give identical states, so each is encoded once
    let mut cache: HashMap<&[usize], Var> = HashMap::new();
    for seq in seqs {
        if let Some(&v) = cache.get(seq.as_slice()) {
            rows.push(v);
            continue;
        }
        let x = g.embedding(tok, seq)?;
        let positions: Vec<usize> = (0..seq.len()).collect();
        let pe = g.embedding(pos, &positions)?;
        let mut x = g.add(x, pe)?;
        x = g.dropout(x, spec.dropout);
        for l in 0..layers {
            x = encoder_layer(g, p, &format!("ctx.l{l}"), x, spec, None, None)?;
        }
        let x = layer_norm(g, p, "ctx.ln_f", x)?;
        let cls = g.gather_rows(x, &[0])?;
        cache.insert(seq.as_slice(), cls);
        rows.push(cls);
    }
    g.concat_rows(&rows)
}
