//! Rewrites a notebook so that a run records per-property summaries and
//! uses a chosen random seed.

use std::collections::BTreeMap;

use log::warn;
use rustpython_parser::ast::{self, Expr, Ranged, Stmt};
use rustpython_parser::text_size::TextRange;
use serde::Serialize;

use crate::catalog::ApiCatalog;
use crate::error::{Error, Result};
use crate::finder::{self, AnalysisReport, Context, ImportTable, TrackedProperty};
use crate::notebook::Notebook;
use crate::pysrc::{self, ParsedCell};

pub const PROBE_FN: &str = "__nbtest_probe";
const TMP_PREFIX: &str = "__nbtest_tmp_";

/// Callables whose first positional argument is a seed.
const SEEDING_CALLS: &[&str] = &[
    "seed",
    "manual_seed",
    "manual_seed_all",
    "set_seed",
    "set_random_seed",
    "default_rng",
    "RandomState",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SeedSite {
    /// Cell index in the original notebook.
    pub cell_index: usize,
    /// 1-based line of the literal in the original cell.
    pub line: usize,
    pub original: String,
}

#[derive(Debug, Clone)]
pub struct InstrumentedNotebook {
    pub notebook: Notebook,
    /// property id -> (cell index in the instrumented notebook, 1-based probe line)
    pub probe_index: BTreeMap<String, (usize, usize)>,
    pub seed_sites: Vec<SeedSite>,
}

pub fn probe_statement(id: &str, kind: &str, value: &str) -> String {
    format!(
        "{PROBE_FN}({}, {}, {value})",
        py_str(id),
        py_str(kind)
    )
}

fn py_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

/// Lines of the preamble cell: runtime import, probe binding and global seeding.
pub fn preamble(imports: &ImportTable, run_seed: u32) -> Vec<String> {
    let mut lines = vec![
        "import nbtest".to_string(),
        format!("{PROBE_FN} = nbtest.probe"),
        "import random as __nbtest_random".to_string(),
        format!("__nbtest_random.seed({run_seed})"),
    ];
    let uses = |roots: &[&str]| imports.modules().any(|m| roots.iter().any(|r| m == *r || m.starts_with(&format!("{r}."))));
    if uses(&["numpy", "pandas", "sklearn", "scipy", "torch", "tensorflow", "keras", "seaborn", "xgboost"]) {
        lines.push("import numpy as __nbtest_numpy".into());
        lines.push(format!("__nbtest_numpy.random.seed({run_seed})"));
    }
    if uses(&["torch"]) {
        lines.push("import torch as __nbtest_torch".into());
        lines.push(format!("__nbtest_torch.manual_seed({run_seed})"));
    }
    if uses(&["tensorflow", "keras"]) {
        lines.push("import tensorflow as __nbtest_tf".into());
        lines.push(format!("__nbtest_tf.random.set_seed({run_seed})"));
    }
    lines
}

#[derive(Default)]
struct Site<'a> {
    first: usize,
    last: usize,
    stmt: Option<&'a Stmt>,
    seed_edits: Vec<(TextRange, String)>,
    temps: Vec<(TextRange, String, bool)>,
    probes: Vec<String>,
}

pub fn instrument(
    nb: &Notebook,
    report: &AnalysisReport,
    catalog: &ApiCatalog,
    run_seed: u32,
) -> Result<InstrumentedNotebook> {
    let imports = ImportTable::from_notebook(nb);
    let mut out = nb.clone();
    let mut seed_sites = Vec::new();
    let mut tmp_counter = 0usize;

    for cell in nb.code_cells().filter(|c| !c.is_generated()) {
        let props: Vec<&TrackedProperty> = report
            .properties
            .iter()
            .filter(|p| p.cell_index == cell.index)
            .collect();
        let parsed = match ParsedCell::parse(&cell.source) {
            Ok(p) => p,
            Err(e) if !props.is_empty() => {
                return Err(Error::InstrumentationConflict(format!(
                    "cell {} no longer parses: {e}",
                    cell.index
                )))
            }
            Err(_) => continue,
        };
        let string_lines = pysrc::lines_inside_strings(&cell.source);
        let mut sites: BTreeMap<usize, Site> = BTreeMap::new();

        // Seed literals, in any simple statement.
        pysrc::walk_stmts(&parsed.suite, &mut |s| {
            if !pysrc::child_bodies(s.stmt).is_empty() {
                return;
            }
            let edits = seed_edits(s.stmt, catalog, run_seed);
            if edits.is_empty() {
                return;
            }
            let (first, last) = parsed.span(s.stmt.range());
            if !rewritable(&parsed, s.stmt, &string_lines) {
                warn!("cell {}: seed at line {first} left unchanged (statement not rewritable)", cell.index);
                return;
            }
            for (range, _) in &edits {
                seed_sites.push(SeedSite {
                    cell_index: cell.index,
                    line: parsed.line_of(usize::from(range.start())),
                    original: parsed.slice(*range).to_string(),
                });
            }
            let site = sites.entry(first).or_default();
            site.first = first;
            site.last = last;
            site.stmt = Some(s.stmt);
            site.seed_edits = edits;
        });

        let eligible = finder::eligible_statements(&parsed);
        for prop in props {
            let stmt = eligible
                .iter()
                .copied()
                .find(|s| parsed.span(s.range()).1 == prop.anchor_line && anchors(&parsed, s, prop))
                .ok_or_else(|| {
                    Error::InstrumentationConflict(format!(
                        "property {} ({}) not found at cell {} line {}",
                        prop.id, prop.target, prop.cell_index, prop.anchor_line
                    ))
                })?;
            let (first, last) = parsed.span(stmt.range());
            let site = sites.entry(first).or_default();
            site.first = first;
            site.last = last;
            site.stmt = Some(stmt);
            let value = match prop.context {
                Context::Assignment => prop.target.clone(),
                Context::PrintArgument | Context::LastExpression => {
                    let expr = find_expr(&parsed, stmt, &prop.target).expect("checked by anchors");
                    if rewritable(&parsed, stmt, &string_lines) {
                        let name = format!("{TMP_PREFIX}{tmp_counter}");
                        tmp_counter += 1;
                        site.temps.push((
                            expr,
                            name.clone(),
                            prop.context == Context::LastExpression,
                        ));
                        name
                    } else {
                        warn!(
                            "property {}: statement not rewritable, probing expression directly",
                            prop.id
                        );
                        prop.target.clone()
                    }
                }
            };
            site.probes
                .push(probe_statement(&prop.id, prop.kind.as_str(), &value));
        }

        for site in sites.values().rev() {
            out = apply_site(&out, cell.index, &parsed, site)?;
        }
    }

    let mut notebook = out.with_preamble(&preamble(&imports, run_seed));
    notebook.reindex();
    let mut probe_index = BTreeMap::new();
    for cell in notebook.code_cells() {
        for (i, line) in cell.source.split('\n').enumerate() {
            if let Some(rest) = line.trim_start().strip_prefix(&format!("{PROBE_FN}(")) {
                if let Some(id) = rest
                    .strip_prefix('"')
                    .and_then(|r| r.split_once('"'))
                    .map(|(id, _)| id)
                {
                    probe_index.insert(id.to_string(), (cell.index, i + 1));
                }
            }
        }
    }
    for p in &report.properties {
        if !probe_index.contains_key(&p.id) {
            return Err(Error::InstrumentationConflict(format!("probe for {} missing", p.id)));
        }
    }
    Ok(InstrumentedNotebook {
        notebook,
        probe_index,
        seed_sites,
    })
}

fn apply_site(nb: &Notebook, cell: usize, parsed: &ParsedCell, site: &Site) -> Result<Notebook> {
    let stmt = site.stmt.expect("site has a statement");
    if site.seed_edits.is_empty() && site.temps.is_empty() {
        return nb.insert_statements(cell, site.last, &site.probes);
    }
    let indent = pysrc::leading_ws(&parsed.text()[parsed.line_start(site.first)..]).to_string();
    let mut replacement = Vec::new();
    for (range, name, _) in &site.temps {
        let inner: Vec<_> = site
            .seed_edits
            .iter()
            .filter(|(r, _)| range.contains_range(*r))
            .cloned()
            .collect();
        let text = splice(parsed, *range, &inner);
        push_lines(&mut replacement, &indent, &format!("{name} = {text}"));
    }
    let mut outer: Vec<(TextRange, String)> = site
        .seed_edits
        .iter()
        .filter(|(r, _)| !site.temps.iter().any(|(t, _, _)| t.contains_range(*r)))
        .cloned()
        .collect();
    let mut last_expr_tmp = None;
    for (range, name, is_last) in &site.temps {
        if *is_last && stmt_is_expr(stmt, *range) {
            last_expr_tmp = Some(name.clone());
        } else {
            outer.push((*range, name.clone()));
        }
    }
    if last_expr_tmp.is_none() {
        let text = splice(parsed, stmt.range(), &outer);
        push_lines(&mut replacement, &indent, &text);
    }
    let (rewritten, last) = nb.rewrite_lines(cell, site.first, site.last, &replacement)?;
    let mut tail = site.probes.clone();
    if let Some(name) = last_expr_tmp {
        tail.push(name);
    }
    rewritten.insert_statements(cell, last, &tail)
}

fn stmt_is_expr(stmt: &Stmt, range: TextRange) -> bool {
    matches!(stmt, Stmt::Expr(e) if e.value.range() == range)
}

fn push_lines(out: &mut Vec<String>, indent: &str, text: &str) {
    for (i, line) in text.split('\n').enumerate() {
        if i == 0 {
            out.push(format!("{indent}{line}"));
        } else {
            out.push(line.to_string());
        }
    }
}

/// Source of `range` with non-overlapping `edits` applied.
fn splice(parsed: &ParsedCell, range: TextRange, edits: &[(TextRange, String)]) -> String {
    let mut edits: Vec<_> = edits.iter().filter(|(r, _)| range.contains_range(*r)).collect();
    edits.sort_by_key(|(r, _)| r.start());
    let mut out = String::new();
    let mut pos = range.start();
    for (r, text) in edits {
        out.push_str(parsed.slice(TextRange::new(pos, r.start())));
        out.push_str(text);
        pos = r.end();
    }
    out.push_str(parsed.slice(TextRange::new(pos, range.end())));
    out
}

/// A statement can be rewritten line-wise when it owns its lines and no
/// line break falls inside a string literal.
fn rewritable(parsed: &ParsedCell, stmt: &Stmt, string_lines: &std::collections::BTreeSet<usize>) -> bool {
    let (first, last) = parsed.span(stmt.range());
    if (first..=last).any(|l| string_lines.contains(&l)) {
        return false;
    }
    let text = parsed.text();
    let start = usize::from(stmt.range().start());
    let end = usize::from(stmt.range().end());
    let before = &text[parsed.line_start(first)..start];
    let after = text[end..].split('\n').next().unwrap_or("").trim();
    before.trim().is_empty() && (after.is_empty() || after.starts_with('#'))
}

fn anchors(parsed: &ParsedCell, stmt: &Stmt, prop: &TrackedProperty) -> bool {
    match prop.context {
        Context::Assignment => match stmt {
            Stmt::Assign(a) => a
                .targets
                .iter()
                .any(|t| pysrc::target_texts(parsed, t).contains(&prop.target)),
            Stmt::AnnAssign(a) => pysrc::target_texts(parsed, &a.target).contains(&prop.target),
            _ => false,
        },
        _ => find_expr(parsed, stmt, &prop.target).is_some(),
    }
}

fn find_expr(parsed: &ParsedCell, stmt: &Stmt, target: &str) -> Option<TextRange> {
    let mut found = None;
    for e in pysrc::header_exprs(stmt) {
        pysrc::walk_expr(e, &mut |x| {
            if found.is_none() && parsed.slice(x.range()) == target {
                found = Some(x.range());
            }
        });
    }
    found
}

fn seed_edits(stmt: &Stmt, catalog: &ApiCatalog, run_seed: u32) -> Vec<(TextRange, String)> {
    let mut edits = Vec::new();
    for call in pysrc::calls_in_stmt(stmt) {
        for kw in &call.keywords {
            if let Some(arg) = &kw.arg {
                if catalog.is_seed_parameter(arg.as_str()) && is_int_literal(&kw.value) {
                    edits.push((kw.value.range(), run_seed.to_string()));
                }
            }
        }
        let path = pysrc::callee_path(&call.func);
        let last = path.rsplit('.').next().unwrap_or(&path);
        if SEEDING_CALLS.contains(&last) {
            if let Some(first) = call.args.first() {
                if is_int_literal(first) {
                    edits.push((first.range(), run_seed.to_string()));
                }
            }
        }
    }
    edits.sort_by_key(|(r, _)| r.start());
    edits.dedup_by_key(|(r, _)| *r);
    edits
}

fn is_int_literal(expr: &Expr) -> bool {
    match expr {
        Expr::Constant(c) => matches!(c.value, ast::Constant::Int(_)),
        Expr::UnaryOp(u) => matches!(u.op, ast::UnaryOp::USub) && is_int_literal(&u.operand),
        _ => false,
    }
}
