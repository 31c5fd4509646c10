use super::{tokenize, Plan, PlanStep, StructuredInput, ValueKind};

#[derive(Debug, Clone)]
pub struct LcsOptions {
    /// Minimum LCS coverage of a text value's tokens.
    pub text_threshold: f64,
    /// Entity mentions within this many tokens break value ties.
    pub entity_window: usize,
    /// Attribute-name mentions within this many tokens break remaining ties.
    pub attr_window: usize,
}

impl Default for LcsOptions {
    fn default() -> Self {
        Self {
            text_threshold: 0.8,
            entity_window: 10,
            attr_window: 3,
        }
    }
}

struct Occurrence {
    triple: usize,
    start: usize,
    end: usize,
}

fn lcs_matched(a: &[String], b: &[String]) -> (usize, usize) {
    // length of the LCS and the index in `b` of its last matched token
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in 0..n {
        for j in 0..m {
            dp[i + 1][j + 1] = if a[i] == b[j] {
                dp[i][j] + 1
            } else {
                dp[i][j + 1].max(dp[i + 1][j])
            };
        }
    }
    let best = dp[n][m];
    let last = (1..=m).find(|&j| dp[n][j] == best).unwrap_or(1) - 1;
    (best, last)
}

fn numbers_equal(token: &str, value: f64) -> bool {
    token.parse::<f64>().is_ok_and(|t| t == value)
}

fn occurrences(input: &StructuredInput, refs: &[String], threshold: f64) -> Vec<Occurrence> {
    let mut out = Vec::new();
    for row in input.real_rows() {
        let t = input.triple(row);
        match t.value_kind {
            ValueKind::Number => {
                let Some(v) = t.numeric_value() else { continue };
                for (i, tok) in refs.iter().enumerate() {
                    if numbers_equal(tok, v) {
                        out.push(Occurrence {
                            triple: row,
                            start: i,
                            end: i + 1,
                        });
                    }
                }
            }
            ValueKind::Text => {
                let value = tokenize(&t.value);
                if value.is_empty() {
                    continue;
                }
                let slack = value.len().div_ceil(4);
                for i in 0..refs.len() {
                    if refs[i] != value[0] && !value.contains(&refs[i]) {
                        continue;
                    }
                    let end = (i + value.len() + slack).min(refs.len());
                    let (len, last) = lcs_matched(&value, &refs[i..end]);
                    if len as f64 / value.len() as f64 >= threshold {
                        out.push(Occurrence {
                            triple: row,
                            start: i,
                            end: i + last + 1,
                        });
                    }
                }
            }
        }
    }
    out
}

fn mention_positions(refs: &[String], name: &[String]) -> Vec<usize> {
    if name.is_empty() || name.len() > refs.len() {
        return Vec::new();
    }
    (0..=refs.len() - name.len())
        .filter(|&i| refs[i..i + name.len()] == *name)
        .collect()
}

fn attr_matches(token: &str, attr: &str) -> bool {
    token.len() >= 2 && (token == attr || attr.starts_with(token) || token.starts_with(attr))
}

/// Labels a gold plan by matching triple values against the reference.
///
/// Numeric values need an exact numeric token; text values need LCS coverage
/// of at least `text_threshold`. Each reference position and each triple is
/// used at most once, and steps are ordered by match position. When several
/// triples match the same position the winner is, in order: the one whose
/// entity is mentioned nearest within `entity_window` (preceding mentions
/// first), the one whose attribute name is nearest within `attr_window`, the
/// lowest triple index.
pub fn label_gold_plan_lcs(reference: &str, input: &StructuredInput, opts: &LcsOptions) -> Plan {
    let refs = tokenize(reference);
    let mut occ = occurrences(input, &refs, opts.text_threshold);
    occ.sort_by_key(|o| (o.start, o.triple));

    let mentions: Vec<Vec<usize>> = input
        .entities()
        .iter()
        .map(|e| mention_positions(&refs, &tokenize(&e.name)))
        .collect();
    let entity_rank = |row: usize, pos: usize| -> usize {
        let mut best = usize::MAX;
        for &m in &mentions[input.triple(row).entity_id] {
            let rank = if m <= pos && pos - m <= opts.entity_window {
                pos - m
            } else if m > pos && m - pos <= opts.entity_window {
                opts.entity_window + m - pos
            } else {
                continue;
            };
            best = best.min(rank);
        }
        best
    };
    let attr_rank = |row: usize, o: &Occurrence| -> usize {
        let attr = input.triple(row).attribute.to_lowercase();
        let lo = o.start.saturating_sub(opts.attr_window);
        let hi = (o.end + opts.attr_window).min(refs.len());
        (lo..hi)
            .filter(|&i| (i < o.start || i >= o.end) && attr_matches(&refs[i], &attr))
            .map(|i| if i < o.start { o.start - i } else { i + 1 - o.end })
            .min()
            .unwrap_or(usize::MAX)
    };

    let mut used_tok = vec![false; refs.len()];
    let mut used_triple = vec![false; input.num_total()];
    let mut steps = Vec::new();
    let mut i = 0;
    while i < occ.len() {
        let pos = occ[i].start;
        let mut j = i;
        while j < occ.len() && occ[j].start == pos {
            j += 1;
        }
        let winner = occ[i..j]
            .iter()
            .filter(|o| !used_triple[o.triple] && !used_tok[o.start..o.end].iter().any(|&u| u))
            .min_by_key(|o| (entity_rank(o.triple, pos), attr_rank(o.triple, o), o.triple));
        if let Some(o) = winner {
            used_triple[o.triple] = true;
            used_tok[o.start..o.end].iter_mut().for_each(|u| *u = true);
            steps.push(PlanStep {
                entity: input.triple(o.triple).entity_id,
                triple: o.triple,
            });
        }
        i = j;
    }
    Plan::new(steps, true)
}
