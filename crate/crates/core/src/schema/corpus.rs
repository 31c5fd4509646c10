use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttrValue, Example, Plan, PlanStep, StructuredInput, ValueKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    Table,
    Dialogue,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context: Option<Vec<String>>,
    entities: Vec<EntityRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_plan: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntityRecord {
    name: String,
    triples: Vec<TripleRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TripleRecord {
    attr: String,
    value: String,
    kind: ValueKind,
}

fn to_example(rec: Record, mode: CorpusMode) -> Result<Example> {
    let invalid = |message: String| Error::Validation {
        id: rec.id.clone(),
        message,
    };
    let context = match mode {
        CorpusMode::Dialogue => Some(rec.context.clone().unwrap_or_default()),
        CorpusMode::Table => rec.context.clone(),
    };
    let entities = rec
        .entities
        .iter()
        .map(|e| {
            let attrs = e
                .triples
                .iter()
                .map(|t| AttrValue::new(t.attr.clone(), t.value.clone(), t.kind))
                .collect();
            (e.name.clone(), attrs)
        })
        .collect();
    let input = StructuredInput::new(entities, context).map_err(|e| invalid(e.to_string()))?;
    let gold_plan = match &rec.gold_plan {
        None => None,
        Some(steps) => {
            let mut plan = Vec::with_capacity(steps.len());
            for (t, &[entity, real]) in steps.iter().enumerate() {
                let triple = input.real_to_flat(real).ok_or_else(|| {
                    invalid(format!(
                        "gold_plan step {t}: triple index {real} out of range (n = {})",
                        input.num_real()
                    ))
                })?;
                if entity >= input.num_entities() {
                    return Err(invalid(format!(
                        "gold_plan step {t}: entity index {entity} out of range (p = {})",
                        input.num_entities()
                    )));
                }
                plan.push(PlanStep { entity, triple });
            }
            let plan = Plan::new(plan, true);
            plan.validate(&input, true).map_err(invalid)?;
            Some(plan)
        }
    };
    Ok(Example {
        id: rec.id,
        input,
        gold_plan,
        reference: rec.reference,
    })
}

fn to_record(ex: &Example) -> Record {
    Record {
        id: ex.id.clone(),
        context: ex.input.context.clone(),
        entities: ex
            .input
            .to_declared()
            .into_iter()
            .map(|(name, attrs)| EntityRecord {
                name,
                triples: attrs
                    .into_iter()
                    .map(|a| TripleRecord {
                        attr: a.attr,
                        value: a.value,
                        kind: a.kind,
                    })
                    .collect(),
            })
            .collect(),
        gold_plan: ex.gold_plan.as_ref().map(|p| {
            p.steps
                .iter()
                .map(|s| {
                    let real = ex.input.flat_to_real(s.triple).expect("gold plan never points at a sentinel");
                    [s.entity, real]
                })
                .collect()
        }),
        reference: ex.reference.clone(),
    }
}

/// Parses corpus text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus(text: &str, mode: CorpusMode) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Validation {
                id: rec.id,
                message: "duplicate id".into(),
            });
        }
        out.push(to_example(rec, mode)?);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path, mode: CorpusMode) -> Result<Vec<Example>> {
    parse_corpus(&fs::read_to_string(path)?, mode)
}

/// Writes one record per line in the file's declaration order.
pub fn write_corpus<W: Write>(mut w: W, examples: &[Example]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, &to_record(ex))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(path: &Path, examples: &[Example]) -> Result<()> {
    let mut buf = Vec::new();
    write_corpus(&mut buf, examples)?;
    fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BY_TWO: &str = r#"{"id":"a","entities":[{"name":"A","triples":[{"attr":"pts","value":"3","kind":"number"},{"attr":"city","value":"X","kind":"text"}]},{"name":"B","triples":[{"attr":"pts","value":"5","kind":"number"},{"attr":"wins","value":"1","kind":"number"}]}],"gold_plan":[[1,2],[0,0]],"reference":"B has 5 and A has 3"}"#;

    #[test]
    fn two_by_two_record_gets_six_rows() {
        let ex = parse_corpus(TWO_BY_TWO, CorpusMode::Table).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].input.num_total(), 6);
        let plan = ex[0].gold_plan.as_ref().unwrap();
        assert_eq!(plan.triples(), vec![4, 1]);
        assert_eq!(plan.entities(), vec![1, 0]);
    }

    #[test]
    fn out_of_range_gold_index_is_validation_error() {
        let bad = TWO_BY_TWO.replace("[[1,2],[0,0]]", "[[1,4]]");
        match parse_corpus(&bad, CorpusMode::Table) {
            Err(Error::Validation { id, message }) => {
                assert_eq!(id, "a");
                assert!(message.contains("out of range"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inconsistent_gold_entity_is_validation_error() {
        let bad = TWO_BY_TWO.replace("[[1,2],[0,0]]", "[[0,2]]");
        assert!(matches!(parse_corpus(&bad, CorpusMode::Table), Err(Error::Validation { .. })));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{TWO_BY_TWO}\n\n{{\"id\": 3}}\n");
        match parse_corpus(&text, CorpusMode::Table) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = format!("{TWO_BY_TWO}\n{TWO_BY_TWO}\n");
        assert!(matches!(parse_corpus(&text, CorpusMode::Table), Err(Error::Validation { .. })));
    }

    #[test]
    fn dialogue_mode_defaults_context() {
        let ex = parse_corpus(TWO_BY_TWO, CorpusMode::Dialogue).unwrap();
        assert_eq!(ex[0].input.context, Some(vec![]));
    }

    #[test]
    fn save_then_load_is_identity() {
        let ex = parse_corpus(TWO_BY_TWO, CorpusMode::Table).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &ex).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().trim_end(), TWO_BY_TWO);
        let back = parse_corpus(std::str::from_utf8(&buf).unwrap(), CorpusMode::Table).unwrap();
        assert_eq!(back, ex);
    }
}
