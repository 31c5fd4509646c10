//! Template realization of plans and its exact inverse.
//!
//! Consecutive steps whose triples share an entity form one sentence: the
//! first clause leads with the entity name, later clauses follow after
//! " and ", and the sentence ends with ".". Sentences are joined by a space.
//!
//! Pattern syntax: slots `{entity}`, `{value}`, `{attr}` and `{unit}` (the
//! attribute with underscores as spaces, lowercased); text inside `[...]` is
//! rendered only in a leading clause. A leading clause gets the entity name
//! prepended unless its pattern already contains `{entity}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{label_gold_plan_lcs, LcsOptions, Plan, StructuredInput};

pub const FALLBACK_PATTERN: &str = "{entity}'s {attr} is {value}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub attr: String,
    pub pattern: String,
    #[serde(default)]
    pub priority: i32,
    /// Restricts the template to one entity name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
}

impl Template {
    pub fn new(attr: &str, pattern: &str, priority: i32) -> Self {
        Self {
            attr: attr.into(),
            pattern: pattern.into(),
            priority,
            entity: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let mut depth = 0;
        let mut rest = self.pattern.as_str();
        while let Some(c) = rest.chars().next() {
            match c {
                '[' if depth == 0 => depth = 1,
                ']' if depth == 1 => depth = 0,
                '[' | ']' => return Err(Error::Config(format!("template {:?}: unbalanced brackets", self.pattern))),
                '{' => {
                    let end = rest
                        .find('}')
                        .ok_or_else(|| Error::Config(format!("template {:?}: unclosed slot", self.pattern)))?;
                    let slot = &rest[1..end];
                    if !matches!(slot, "entity" | "value" | "attr" | "unit") {
                        return Err(Error::Config(format!("template {:?}: unknown slot {{{slot}}}", self.pattern)));
                    }
                    rest = &rest[end + 1..];
                    continue;
                }
                _ => {}
            }
            rest = &rest[c.len_utf8()..];
        }
        if depth != 0 {
            return Err(Error::Config(format!("template {:?}: unbalanced brackets", self.pattern)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateLibrary {
    templates: Vec<Template>,
}

impl Default for TemplateLibrary {
    /// Box-score phrasing; each attribute's clause is distinct in both
    /// leading and following position.
    fn default() -> Self {
        let t = |a, p| Template::new(a, p, 1);
        Self {
            templates: vec![
                t("points", "finished with {value} points"),
                t("rebounds", "[had ]{value} rebounds"),
                t("assists", "[had ]{value} assists"),
                t("steals", "[had ]{value} steals"),
                t("blocks", "[had ]{value} blocks"),
                t("turnovers", "[had ]{value} turnovers"),
                t("minutes", "[played ]{value} minutes"),
                t("FGM", "[had ]{value} made field goals"),
                t("FGA", "[had ]{value} field goal attempts"),
                t("FTM", "[had ]{value} made free throws"),
                t("FTA", "[had ]{value} free throw attempts"),
                t("FG3M", "[had ]{value} made threes"),
                t("FG3A", "[had ]{value} three-point attempts"),
                t("wins", "[has ]{value} wins"),
                t("losses", "[has ]{value} losses"),
                t("college", "[went to ]college at {value}"),
                t("hometown", "[is ]from {value}"),
            ],
        }
    }
}

impl TemplateLibrary {
    pub fn new(templates: Vec<Template>) -> Result<Self> {
        for t in &templates {
            t.validate()?;
        }
        Ok(Self { templates })
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    /// Line-delimited records `{attr, pattern, priority}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut templates = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            templates.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Self::new(templates)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.templates {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Highest priority match; earlier templates win ties.
    fn pattern_for(&self, attr: &str, entity: &str) -> &str {
        let mut best: Option<&Template> = None;
        for t in &self.templates {
            if t.attr == attr
                && t.entity.as_deref().is_none_or(|e| e == entity)
                && best.is_none_or(|b| t.priority > b.priority)
            {
                best = Some(t);
            }
        }
        best.map_or(FALLBACK_PATTERN, |t| t.pattern.as_str())
    }

    fn priority_for(&self, attr: &str, entity: &str) -> i32 {
        self.templates
            .iter()
            .filter(|t| t.attr == attr && t.entity.as_deref().is_none_or(|e| e == entity))
            .map(|t| t.priority)
            .max()
            .unwrap_or(i32::MIN)
    }
}

fn humanize(attr: &str) -> String {
    attr.replace('_', " ").to_lowercase()
}

/// Renders one triple's clause.
pub fn render_clause(input: &StructuredInput, triple: usize, lead: bool, lib: &TemplateLibrary) -> String {
    let t = input.triple(triple);
    let entity = &input.entity(t.entity_id).name;
    let pattern = lib.pattern_for(&t.attribute, entity);
    let mut out = String::new();
    if lead && !pattern.contains("{entity}") {
        out.push_str(entity);
        out.push(' ');
    }
    let mut optional = false;
    let mut rest = pattern;
    while let Some(c) = rest.chars().next() {
        match c {
            '[' => optional = true,
            ']' => optional = false,
            '{' => {
                let end = rest.find('}').unwrap_or(rest.len() - 1);
                if lead || !optional {
                    match &rest[1..end] {
                        "entity" => out.push_str(entity),
                        "value" => out.push_str(&t.value),
                        "attr" => out.push_str(&t.attribute),
                        "unit" => out.push_str(&humanize(&t.attribute)),
                        _ => {}
                    }
                }
                rest = &rest[end + 1..];
                continue;
            }
            _ if lead || !optional => out.push(c),
            _ => {}
        }
        rest = &rest[c.len_utf8()..];
    }
    out
}

/// Realizes a plan as text; empty plans give an empty string.
pub fn realize_plan(plan: &Plan, input: &StructuredInput, lib: &TemplateLibrary) -> String {
    let mut sentences = Vec::new();
    let mut current = String::new();
    let mut run_entity = None;
    for s in &plan.steps {
        let e = input.triple(s.triple).entity_id;
        if run_entity == Some(e) {
            current.push_str(" and ");
            current.push_str(&render_clause(input, s.triple, false, lib));
        } else {
            if run_entity.is_some() {
                current.push('.');
                sentences.push(std::mem::take(&mut current));
            }
            current = render_clause(input, s.triple, true, lib);
            run_entity = Some(e);
        }
    }
    if run_entity.is_some() {
        current.push('.');
        sentences.push(current);
    }
    sentences.join(" ")
}

struct Candidate {
    triple: usize,
    text: String,
    priority: i32,
}

fn candidates(input: &StructuredInput, lib: &TemplateLibrary, lead: bool, entity: Option<usize>) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = input
        .real_rows()
        .filter(|&r| entity.is_none_or(|e| input.triple(r).entity_id == e))
        .map(|r| {
            let t = input.triple(r);
            Candidate {
                triple: r,
                text: render_clause(input, r, lead, lib),
                priority: lib.priority_for(&t.attribute, &input.entity(t.entity_id).name),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.priority
            .cmp(&a.priority)
            .then(b.text.len().cmp(&a.text.len()))
            .then(a.triple.cmp(&b.triple))
    });
    out
}

/// Inverts [`realize_plan`] by depth-first parsing; `None` when the text is
/// not a realization over `input`.
pub fn parse_realization(text: &str, input: &StructuredInput, lib: &TemplateLibrary) -> Option<Vec<usize>> {
    let leads = candidates(input, lib, true, None);
    let follows: Vec<Vec<Candidate>> = (0..input.num_entities())
        .map(|e| candidates(input, lib, false, Some(e)))
        .collect();

    // returns the triples of the remaining text given the clause kind expected at `pos`
    fn go(
        text: &str,
        pos: usize,
        entity: Option<usize>,
        input: &StructuredInput,
        leads: &[Candidate],
        follows: &[Vec<Candidate>],
        out: &mut Vec<usize>,
    ) -> bool {
        let rest = &text[pos..];
        let pool = match entity {
            None => leads,
            Some(e) => &follows[e][..],
        };
        for c in pool {
            if !rest.starts_with(&c.text) {
                continue;
            }
            let after = &rest[c.text.len()..];
            let e = input.triple(c.triple).entity_id;
            out.push(c.triple);
            let consumed = pos + c.text.len();
            if after.starts_with(" and ") && go(text, consumed + 5, Some(e), input, leads, follows, out) {
                return true;
            }
            if after == "." {
                return true;
            }
            if after.starts_with(". ") && go(text, consumed + 2, None, input, leads, follows, out) {
                return true;
            }
            out.pop();
        }
        false
    }

    if text.is_empty() {
        return Some(Vec::new());
    }
    let mut out = Vec::new();
    go(text, 0, None, input, &leads, &follows, &mut out).then_some(out)
}

/// Triples conveyed by `text`, in surface order: the template inverse when
/// the text parses as a realization, LCS labeling otherwise.
pub fn extract_triples(text: &str, input: &StructuredInput, lib: &TemplateLibrary) -> Vec<usize> {
    let text = text.trim();
    if text.is_empty() {
        return Vec::new();
    }
    parse_realization(text, input, lib)
        .unwrap_or_else(|| label_gold_plan_lcs(text, input, &LcsOptions::default()).triples())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::AttrValue;

    fn lopez() -> StructuredInput {
        StructuredInput::new(
            vec![(
                "Brook_Lopez".into(),
                vec![
                    AttrValue::number("points", 26),
                    AttrValue::number("rebounds", 9),
                    AttrValue::number("mystery", 4),
                ],
            )],
            None,
        )
        .unwrap()
    }

    #[test]
    fn lopez_sentence() {
        let input = lopez();
        let lib = TemplateLibrary::default();
        let plan = Plan::from_triples(&input, &[1, 2]);
        assert_eq!(realize_plan(&plan, &input, &lib), "Brook_Lopez finished with 26 points and 9 rebounds.");
        let plan = Plan::from_triples(&input, &[2, 1]);
        assert_eq!(realize_plan(&plan, &input, &lib), "Brook_Lopez had 9 rebounds and finished with 26 points.");
    }

    #[test]
    fn fallback_and_empty() {
        let input = lopez();
        let lib = TemplateLibrary::default();
        assert_eq!(realize_plan(&Plan::default(), &input, &lib), "");
        let plan = Plan::from_triples(&input, &[3]);
        assert_eq!(realize_plan(&plan, &input, &lib), "Brook_Lopez's mystery is 4.");
        assert_eq!(extract_triples("", &input, &lib), Vec::<usize>::new());
    }

    #[test]
    fn parse_inverts_realize() {
        let input = lopez();
        let lib = TemplateLibrary::default();
        for plan in [vec![1, 2, 3], vec![3, 1], vec![2], vec![3, 3, 1]] {
            let text = realize_plan(&Plan::from_triples(&input, &plan), &input, &lib);
            assert_eq!(parse_realization(&text, &input, &lib), Some(plan), "{text}");
        }
        assert_eq!(parse_realization("Brook_Lopez scored 26", &input, &lib), None);
    }

    #[test]
    fn template_validation() {
        assert!(TemplateLibrary::new(vec![Template::new("a", "{value} {bogus}", 0)]).is_err());
        assert!(TemplateLibrary::new(vec![Template::new("a", "[{value}", 0)]).is_err());
        assert!(TemplateLibrary::new(vec![Template::new("a", "[x ]{value} {unit}", 0)]).is_ok());
    }

    #[test]
    fn priority_and_unit_slots() {
        let input = StructuredInput::new(vec![("A".into(), vec![AttrValue::number("fast_breaks", 3)])], None).unwrap();
        let lib = TemplateLibrary::new(vec![
            Template::new("fast_breaks", "[ran ]{value} {unit}", 1),
            Template::new("fast_breaks", "[logged ]{value} {unit}", 2),
        ])
        .unwrap();
        assert_eq!(realize_plan(&Plan::from_triples(&input, &[1]), &input, &lib), "A logged 3 fast breaks.");
    }
}
