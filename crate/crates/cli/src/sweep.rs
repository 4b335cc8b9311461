//! Parameter sweeps: one scenario run per value of a scalar leaf.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, LabResult};
use crate::runner::run_scenario;
use crate::scenario::Scenario;

pub const SWEEP_FILE: &str = "sweep.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub output_dir: PathBuf,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub summary: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: String,
    /// JSON pointer of the swept leaf.
    pub pointer: String,
    pub rows: Vec<SweepRow>,
    pub warnings: Vec<String>,
}

fn collect_leaves(value: &Value, pointer: String, key: Option<&str>, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let escaped = k.replace('~', "~0").replace('/', "~1");
                collect_leaves(v, format!("{pointer}/{escaped}"), Some(k), out);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                collect_leaves(v, format!("{pointer}/{i}"), None, out);
            }
        }
        Value::Number(_) => {
            if let Some(k) = key {
                out.push((k.to_string(), pointer));
            }
        }
        _ => {}
    }
}

/// Resolves `name` to a JSON pointer of a numeric leaf.
///
/// Dotted names (`model.h`, `task_params.z0`) are exact paths; a bare name must
/// match exactly one numeric leaf anywhere in the scenario.
pub fn resolve_parameter(scenario: &Value, name: &str) -> LabResult<String> {
    if name.is_empty() {
        return Err(LabError::Scenario("empty sweep parameter".into()));
    }
    if name.contains('.') {
        let pointer: String = name.split('.').map(|p| format!("/{p}")).collect();
        return match scenario.pointer(&pointer) {
            Some(Value::Number(_)) => Ok(pointer),
            Some(_) => Err(LabError::Scenario(format!("{name} is not a scalar number"))),
            None => Err(LabError::Scenario(format!("{name} does not name a scenario field"))),
        };
    }
    let mut leaves = Vec::new();
    collect_leaves(scenario, String::new(), None, &mut leaves);
    let hits: Vec<String> = leaves.into_iter().filter(|(k, _)| k == name).map(|(_, p)| p).collect();
    match hits.len() {
        1 => Ok(hits.into_iter().next().unwrap()),
        0 => Err(LabError::Scenario(format!("no numeric field named {name}"))),
        _ => Err(LabError::Scenario(format!(
            "{name} is ambiguous ({}); use a dotted path",
            hits.join(", ")
        ))),
    }
}

/// Parses `0.2,0.1,0.05`.
pub fn parse_values(text: &str) -> LabResult<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| LabError::Scenario(format!("sweep value {s:?} is not a finite number")))
        })
        .collect()
}

fn point_scenario(base: &Value, pointer: &str, value: f64, out: PathBuf) -> LabResult<Scenario> {
    let mut v = base.clone();
    let slot = v.pointer_mut(pointer).expect("pointer resolved on this value");
    // keep integer leaves integral so e.g. grid.n still parses
    *slot = if slot.is_u64() && value.fract() == 0.0 && value >= 0.0 {
        Value::from(value as u64)
    } else {
        Value::from(value)
    };
    let mut scenario = Scenario::from_value(v)?;
    scenario.output_dir = out;
    Ok(scenario)
}

/// Runs the scenario once per value on a pool of `jobs` workers and writes
/// the aggregated table to `out/sweep.json`.
pub fn sweep(scenario: &Scenario, parameter: &str, values: &[f64], jobs: usize, out: &Path) -> LabResult<SweepTable> {
    if values.is_empty() {
        return Err(LabError::Scenario("sweep needs at least one value".into()));
    }
    let base = scenario.to_value();
    let pointer = resolve_parameter(&base, parameter)?;
    std::fs::create_dir_all(out).map_err(LabError::io(out))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| LabError::Scenario(format!("worker pool: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        values
            .par_iter()
            .enumerate()
            .map(|(k, &value)| {
                let dir = out.join(format!("{k:03}_{parameter}={value}"));
                let result = point_scenario(&base, &pointer, value, dir.clone())
                    .and_then(|s| run_scenario(&s, &dir));
                match result {
                    Ok(report) => SweepRow {
                        value,
                        output_dir: dir,
                        ok: true,
                        exit_code: None,
                        error: None,
                        summary: report.summary,
                    },
                    Err(e) => SweepRow {
                        value,
                        output_dir: dir,
                        ok: false,
                        exit_code: Some(e.exit_code()),
                        error: Some(e.to_string()),
                        summary: Value::Null,
                    },
                }
            })
            .collect()
    });
    let warnings: Vec<String> = rows
        .iter()
        .filter(|r| !r.ok)
        .map(|r| format!("{parameter} = {}: {}", r.value, r.error.as_deref().unwrap_or("")))
        .collect();
    let table = SweepTable {
        parameter: parameter.to_string(),
        pointer,
        rows,
        warnings,
    };
    let path = out.join(SWEEP_FILE);
    let mut text = serde_json::to_string_pretty(&table).expect("table serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(LabError::io(&path))?;
    if table.rows.iter().all(|r| !r.ok) {
        let first = &table.rows[0];
        return Err(LabError::SweepFailed {
            count: table.rows.len(),
            first: first.error.clone().unwrap_or_default(),
            code: first.exit_code.unwrap_or(3),
        });
    }
    Ok(table)
}
