//! Plan files: one JSON object per line, `{"id", "plan", "terminated",
//! "log_prob"?}`, with `plan` a list of `[entity, triple]` pairs indexed as
//! in corpus files (sentinels excluded).

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Plan, PlanStep, StructuredInput};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRecord {
    pub id: String,
    pub plan: Vec<[usize; 2]>,
    #[serde(default)]
    pub terminated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_prob: Option<f64>,
}

impl PlanRecord {
    pub fn from_plan(id: &str, plan: &Plan, input: &StructuredInput, log_prob: Option<f64>) -> Self {
        Self {
            id: id.to_string(),
            plan: plan
                .steps
                .iter()
                .map(|s| [s.entity, input.flat_to_real(s.triple).expect("plans never select sentinels")])
                .collect(),
            terminated: plan.terminated,
            log_prob,
        }
    }

    pub fn to_plan(&self, input: &StructuredInput) -> Result<Plan> {
        let steps = self
            .plan
            .iter()
            .map(|&[entity, real]| {
                let triple = input.real_to_flat(real).ok_or_else(|| Error::Validation {
                    id: self.id.clone(),
                    message: format!("triple {real} out of range"),
                })?;
                Ok(PlanStep { entity, triple })
            })
            .collect::<Result<Vec<_>>>()?;
        let plan = Plan::new(steps, self.terminated);
        plan.validate(input, false)
            .map_err(|m| Error::Validation { id: self.id.clone(), message: m })?;
        Ok(plan)
    }
}

pub fn parse_plans(text: &str) -> Result<Vec<PlanRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PlanRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Validation { id: rec.id, message: "duplicate id".into() });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_plans(path: &Path) -> Result<Vec<PlanRecord>> {
    parse_plans(&fs::read_to_string(path)?)
}

pub fn write_plans<W: Write>(mut w: W, records: &[PlanRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
