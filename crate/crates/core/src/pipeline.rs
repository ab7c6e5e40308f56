//! End-to-end generation: analyze, execute, synthesize, inject.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::catalog::{ApiCatalog, PropertyKind};
use crate::error::Result;
use crate::finder::{find_properties, AnalysisReport};
use crate::harness::{ExecutorCommand, RunConfig};
use crate::mutation::default_property_kind;
use crate::notebook::{is_generated_line, Notebook};
use crate::protocol::{RunExit, RunOutcome};
use crate::pysrc::ParsedCell;
use crate::runner::collect_assertions;
use crate::synth::{inject, synthesize, AssertionSpec};

#[derive(Debug, Clone, Serialize)]
pub struct GenerationReport {
    pub notebook: String,
    pub config: String,
    pub analysis: AnalysisReport,
    pub assertions: Vec<AssertionSpec>,
    /// Properties that produced no assertion.
    pub properties_without_assertions: Vec<String>,
    pub runs_total: usize,
    pub runs_failed: usize,
    pub run_outcomes: Vec<RunOutcome>,
}

pub fn generate(
    nb: &Notebook,
    name: &str,
    catalog: &ApiCatalog,
    cfg: &RunConfig,
    exec: &ExecutorCommand,
    confidence: f64,
    config_header: &str,
) -> Result<(Notebook, GenerationReport)> {
    let clean = nb.strip();
    let analysis = find_properties(&clean, catalog);
    let traces = crate::harness::execute_runs(&clean, &analysis, catalog, cfg, exec)?;
    let specs = synthesize(&traces, &analysis, confidence)?;
    let out = inject(&clean, &specs)?;
    let covered: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.property_id.as_str()).collect();
    let report = GenerationReport {
        notebook: name.to_string(),
        config: config_header.to_string(),
        properties_without_assertions: analysis
            .properties
            .iter()
            .filter(|p| !covered.contains(p.id.as_str()))
            .map(|p| p.id.clone())
            .collect(),
        assertions: specs,
        runs_total: traces.run_outcomes.len(),
        runs_failed: traces.run_outcomes.iter().filter(|o| o.exit != RunExit::Ok).count(),
        run_outcomes: traces.run_outcomes,
        analysis,
    };
    Ok((out, report))
}

/// Property kind behind each injected assertion, recovered by re-analyzing
/// the stripped notebook and matching cell, anchor and target. Assertions
/// without a matching property fall back to a kind implied by the
/// assertion function.
pub fn assertion_property_kinds(nb: &Notebook, catalog: &ApiCatalog) -> BTreeMap<String, PropertyKind> {
    let analysis = find_properties(&nb.strip(), catalog);
    let mut out = BTreeMap::new();
    for a in collect_assertions(nb) {
        let cell = &nb.cells[a.cell_index];
        let stripped_cell = a.cell_index - nb.cells[..a.cell_index].iter().filter(|c| c.is_generated()).count();
        let anchor = cell
            .source
            .split('\n')
            .take(a.line - 1)
            .filter(|l| !is_generated_line(l))
            .count();
        let target = assertion_target(&cell.source, a.line);
        let kind = analysis
            .properties
            .iter()
            .find(|p| {
                p.cell_index == stripped_cell && p.anchor_line == anchor && Some(p.target.as_str()) == target.as_deref()
            })
            .map_or_else(|| default_property_kind(a.kind), |p| p.kind);
        out.insert(a.test_id, kind);
    }
    out
}

fn assertion_target(source: &str, line: usize) -> Option<String> {
    use rustpython_parser::ast::{Expr, Ranged, Stmt};
    let parsed = ParsedCell::parse(source).ok()?;
    let mut found = None;
    crate::pysrc::walk_stmts(&parsed.suite, &mut |s| {
        if found.is_some() || parsed.span(s.stmt.range()).0 != line {
            return;
        }
        if let Stmt::Expr(e) = s.stmt {
            if let Expr::Call(c) = e.value.as_ref() {
                found = c.args.first().map(|a| parsed.slice(a.range()).to_string());
            }
        }
    });
    found
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::literal::ExpectedValue;
    use crate::notebook::Cell;
    use crate::synth::AssertionKind;

    #[test]
    fn kinds_recovered_from_analysis() {
        let base = Notebook::new(vec![
            Cell::code("import pandas as pd\ndf = pd.read_csv('a.csv')"),
            Cell::code("n = len(df)"),
        ]);
        let catalog = ApiCatalog::builtin();
        let analysis = find_properties(&base, &catalog);
        let p = &analysis.properties[0];
        assert_eq!(p.kind, PropertyKind::Dataset);
        let specs = vec![
            AssertionSpec {
                test_id: "0_0".into(),
                kind: AssertionKind::AllClose,
                target_expr: "df".into(),
                expected: ExpectedValue::Float(1.0),
                atol: Some(0.0),
                property_id: p.id.clone(),
                cell_index: 0,
                anchor_line: p.anchor_line,
            },
            AssertionSpec {
                test_id: "1_0".into(),
                kind: AssertionKind::AllClose,
                target_expr: "n".into(),
                expected: ExpectedValue::Int(3),
                atol: Some(0.0),
                property_id: String::new(),
                cell_index: 1,
                anchor_line: 1,
            },
        ];
        let nb = inject(&base, &specs).unwrap();
        let kinds = assertion_property_kinds(&nb, &catalog);
        // Matched property wins over the function-implied default.
        assert_eq!(kinds["0_0"], PropertyKind::Dataset);
        assert_eq!(kinds["1_0"], PropertyKind::ModelPerf);
    }
}
