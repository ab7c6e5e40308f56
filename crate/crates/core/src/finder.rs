//! Static discovery of ML-relevant properties in code cells.
//!
//! A property is found in one of three contexts: the value of an
//! assignment, an argument to `print`, or the last expression of a cell.
//! Only top-level statements and loop/branch bodies are considered;
//! function and class bodies are skipped because probes placed there would
//! not run at definition time.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rustpython_parser::ast::{self, Expr, Ranged, Stmt};
use serde::Serialize;

use crate::catalog::{ApiCatalog, ApiEntry, PropertyKind};
use crate::notebook::Notebook;
use crate::pysrc::{self, ParsedCell};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Context {
    Assignment,
    PrintArgument,
    LastExpression,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrackedProperty {
    pub id: String,
    pub kind: PropertyKind,
    pub cell_index: usize,
    /// Last line (1-based) of the statement whose completion defines the value.
    pub anchor_line: usize,
    pub target: String,
    pub context: Context,
    /// Catalog entry that matched, or `custom-metric` for detected reductions.
    pub origin_entry: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct KindCounts {
    pub dataset: usize,
    pub model_arch: usize,
    pub model_perf: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AnalysisReport {
    pub properties: Vec<TrackedProperty>,
    pub counts: KindCounts,
    pub skipped_cells: Vec<(usize, String)>,
}

impl AnalysisReport {
    pub fn property(&self, id: &str) -> Option<&TrackedProperty> {
        self.properties.iter().find(|p| p.id == id)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for p in &self.properties {
            out.push_str(&format!(
                "{:<5} cell {:>3} line {:>3}  {:<9} {:<14} {}  [{}]\n",
                p.id,
                p.cell_index,
                p.anchor_line,
                p.kind.as_str(),
                format!("{:?}", p.context),
                p.target,
                p.origin_entry
            ));
        }
        out.push_str(&format!(
            "{} properties: {} Dataset, {} ModelArch, {} ModelPerf\n",
            self.properties.len(),
            self.counts.dataset,
            self.counts.model_arch,
            self.counts.model_perf
        ));
        for (idx, reason) in &self.skipped_cells {
            out.push_str(&format!("skipped cell {idx}: {reason}\n"));
        }
        out
    }
}

pub const CUSTOM_METRIC: &str = "custom-metric";

/// Import bindings of a notebook: local name -> qualified module path.
#[derive(Debug, Clone, Default)]
pub struct ImportTable {
    bindings: HashMap<String, String>,
}

impl ImportTable {
    pub fn from_notebook(nb: &Notebook) -> Self {
        let mut table = ImportTable::default();
        for cell in nb.code_cells() {
            if let Ok(parsed) = ParsedCell::parse(&cell.source) {
                table.add_suite(&parsed.suite);
            }
        }
        table
    }

    pub fn add_suite(&mut self, suite: &[Stmt]) {
        pysrc::walk_stmts(suite, &mut |s| match s.stmt {
            Stmt::Import(imp) => {
                for alias in &imp.names {
                    let full = alias.name.to_string();
                    match &alias.asname {
                        Some(a) => self.bindings.insert(a.to_string(), full),
                        None => {
                            let head = full.split('.').next().unwrap_or(&full).to_string();
                            self.bindings.insert(head.clone(), head)
                        }
                    };
                }
            }
            Stmt::ImportFrom(imp) if imp.level.map_or(true, |l| l.to_u32() == 0) => {
                let Some(module) = &imp.module else { return };
                for alias in &imp.names {
                    if alias.name.as_str() == "*" {
                        continue;
                    }
                    let local = alias.asname.as_ref().unwrap_or(&alias.name).to_string();
                    self.bindings
                        .insert(local, format!("{}.{}", module, alias.name));
                }
            }
            _ => {}
        });
    }

    /// Qualified paths of all import bindings.
    pub fn modules(&self) -> impl Iterator<Item = &str> {
        self.bindings.values().map(String::as_str)
    }

    pub fn binds(&self, name: &str) -> bool {
        self.bindings.contains_key(name)
    }

    /// Qualifies a dotted call path; the flag says whether the head resolved.
    pub fn qualify(&self, path: &str) -> (String, bool) {
        let (head, rest) = match path.split_once('.') {
            Some((h, r)) => (h, Some(r)),
            None => (path, None),
        };
        match self.bindings.get(head) {
            Some(q) => match rest {
                Some(r) => (format!("{q}.{r}"), true),
                None => (q.clone(), true),
            },
            None => (path.to_string(), false),
        }
    }

    pub fn lookup<'c>(&self, catalog: &'c ApiCatalog, func: &Expr) -> Option<&'c ApiEntry> {
        let (path, resolved) = self.qualify(&pysrc::callee_path(func));
        catalog.lookup(&path, resolved)
    }
}

/// A detected custom-metric expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExprAnchor {
    pub context: Context,
    /// Expression source, or the assigned name in the assignment context.
    pub target: String,
    pub anchor_line: usize,
}

pub fn find_properties(nb: &Notebook, catalog: &ApiCatalog) -> AnalysisReport {
    let imports = ImportTable::from_notebook(nb);
    let mut found: Vec<TrackedProperty> = Vec::new();
    let mut skipped = Vec::new();
    for cell in nb.code_cells() {
        if cell.is_generated() {
            continue;
        }
        let parsed = match ParsedCell::parse(&cell.source) {
            Ok(p) => p,
            Err(e) => {
                skipped.push((cell.index, format!("syntax error: {e}")));
                continue;
            }
        };
        let mut seen = BTreeSet::new();
        let mut cell_props = Vec::new();
        for cand in cell_candidates(&parsed, catalog, &imports) {
            if seen.insert((cand.anchor_line, cand.target.clone())) {
                cell_props.push(TrackedProperty {
                    id: String::new(),
                    kind: cand.kind,
                    cell_index: cell.index,
                    anchor_line: cand.anchor_line,
                    target: cand.target,
                    context: cand.context,
                    origin_entry: cand.origin,
                });
            }
        }
        cell_props.sort_by_key(|p| p.anchor_line);
        found.extend(cell_props);
    }
    let mut counts = KindCounts::default();
    for (i, p) in found.iter_mut().enumerate() {
        p.id = format!("p{i}");
        match p.kind {
            PropertyKind::Dataset => counts.dataset += 1,
            PropertyKind::ModelArch => counts.model_arch += 1,
            PropertyKind::ModelPerf => counts.model_perf += 1,
        }
    }
    AnalysisReport {
        properties: found,
        counts,
        skipped_cells: skipped,
    }
}

struct Candidate {
    kind: PropertyKind,
    anchor_line: usize,
    target: String,
    context: Context,
    origin: String,
}

/// Statements eligible for instrumentation, in source order.
pub fn eligible_statements(cell: &ParsedCell) -> Vec<&Stmt> {
    let mut out = Vec::new();
    pysrc::walk_stmts(&cell.suite, &mut |s| {
        if !s.in_definition && !is_definition(s.stmt) {
            out.push(s.stmt);
        }
    });
    out
}

fn is_definition(stmt: &Stmt) -> bool {
    matches!(
        stmt,
        Stmt::FunctionDef(_) | Stmt::AsyncFunctionDef(_) | Stmt::ClassDef(_)
    )
}

/// Peels value-preserving wrappers: `round(x, n)`, `float(x)`, `x * 100`.
fn unwrap_value(expr: &Expr) -> &Expr {
    match expr {
        Expr::Call(c)
            if matches!(pysrc::callee_path(&c.func).as_str(), "round" | "float" | "abs" | "int")
                && !c.args.is_empty() =>
        {
            unwrap_value(&c.args[0])
        }
        Expr::BinOp(b) if is_number(&b.right) => unwrap_value(&b.left),
        Expr::BinOp(b) if is_number(&b.left) => unwrap_value(&b.right),
        _ => expr,
    }
}

fn is_number(expr: &Expr) -> bool {
    matches!(
        expr,
        Expr::Constant(c) if matches!(c.value, ast::Constant::Int(_) | ast::Constant::Float(_))
    )
}

fn tracked_call<'c>(
    expr: &Expr,
    catalog: &'c ApiCatalog,
    imports: &ImportTable,
) -> Option<(&'c ApiEntry, PropertyKind)> {
    let Expr::Call(call) = unwrap_value(expr) else {
        return None;
    };
    let entry = imports.lookup(catalog, &call.func)?;
    Some((entry, entry.category.property_kind()?))
}

fn print_arguments(stmt: &Stmt) -> Option<Vec<&Expr>> {
    let Stmt::Expr(e) = stmt else { return None };
    let Expr::Call(call) = &*e.value else {
        return None;
    };
    if pysrc::callee_path(&call.func) != "print" {
        return None;
    }
    let mut args = Vec::new();
    for a in &call.args {
        match a {
            Expr::JoinedStr(j) => {
                for v in &j.values {
                    if let Expr::FormattedValue(f) = v {
                        args.push(&*f.value);
                    }
                }
            }
            other => args.push(other),
        }
    }
    Some(args)
}

fn cell_candidates(cell: &ParsedCell, catalog: &ApiCatalog, imports: &ImportTable) -> Vec<Candidate> {
    let mut out = Vec::new();
    let metrics = detect_custom_metrics(cell, catalog, imports);
    let last_top = cell.suite.last();
    for stmt in eligible_statements(cell) {
        let (_, end) = cell.span(stmt.range());
        let mut push = |kind, target: String, context, origin: String| {
            out.push(Candidate {
                kind,
                anchor_line: end,
                target,
                context,
                origin,
            })
        };
        match stmt {
            Stmt::Assign(a) => {
                if let Some((entry, kind)) = tracked_call(&a.value, catalog, imports) {
                    for t in &a.targets {
                        for name in pysrc::target_texts(cell, t) {
                            push(kind, name, Context::Assignment, entry.name.clone());
                        }
                    }
                }
            }
            Stmt::AnnAssign(a) => {
                if let Some(value) = &a.value {
                    if let Some((entry, kind)) = tracked_call(value, catalog, imports) {
                        for name in pysrc::target_texts(cell, &a.target) {
                            push(kind, name, Context::Assignment, entry.name.clone());
                        }
                    }
                }
            }
            Stmt::Expr(e) => {
                if let Some(args) = print_arguments(stmt) {
                    for arg in args {
                        if let Some((entry, kind)) = tracked_call(arg, catalog, imports) {
                            let text = cell.slice(arg.range()).to_string();
                            push(kind, text, Context::PrintArgument, entry.name.clone());
                        }
                    }
                } else if last_top.is_some_and(|l| std::ptr::eq(l, stmt)) {
                    if let Some((entry, kind)) = tracked_call(&e.value, catalog, imports) {
                        let text = cell.slice(e.value.range()).to_string();
                        push(kind, text, Context::LastExpression, entry.name.clone());
                    }
                }
            }
            _ => {}
        }
    }
    for m in metrics {
        out.push(Candidate {
            kind: PropertyKind::ModelPerf,
            anchor_line: m.anchor_line,
            target: m.target,
            context: m.context,
            origin: CUSTOM_METRIC.to_string(),
        });
    }
    out
}

/// Finds numeric reductions (mean/sum/ratio) over predictions of a tracked
/// inference call, following def-use chains within the cell in statement
/// order.
pub fn detect_custom_metrics(
    cell: &ParsedCell,
    catalog: &ApiCatalog,
    imports: &ImportTable,
) -> Vec<ExprAnchor> {
    let mut tainted: BTreeSet<String> = BTreeSet::new();
    let mut out = Vec::new();
    let last_top = cell.suite.last();
    let derives = |e: &Expr, tainted: &BTreeSet<String>| -> bool {
        let mut hit = false;
        pysrc::walk_expr(e, &mut |x| match x {
            Expr::Name(n) if tainted.contains(n.id.as_str()) => hit = true,
            Expr::Call(c) => {
                if imports
                    .lookup(catalog, &c.func)
                    .is_some_and(ApiEntry::is_inference)
                {
                    hit = true;
                }
            }
            _ => {}
        });
        hit
    };
    for stmt in eligible_statements(cell) {
        let (_, end) = cell.span(stmt.range());
        match stmt {
            Stmt::Assign(a) => {
                let value_derives = derives(&a.value, &tainted);
                if value_derives
                    && tracked_call(&a.value, catalog, imports).is_none()
                    && is_reduction(unwrap_value(&a.value))
                {
                    for t in &a.targets {
                        for name in pysrc::target_texts(cell, t) {
                            out.push(ExprAnchor {
                                context: Context::Assignment,
                                target: name,
                                anchor_line: end,
                            });
                        }
                    }
                }
                if value_derives {
                    for t in &a.targets {
                        tainted.extend(pysrc::target_names(t));
                    }
                }
            }
            Stmt::Expr(e) => {
                let candidates: Vec<(&Expr, Context)> = match print_arguments(stmt) {
                    Some(args) => args.into_iter().map(|a| (a, Context::PrintArgument)).collect(),
                    None if last_top.is_some_and(|l| std::ptr::eq(l, stmt)) => {
                        vec![(&*e.value, Context::LastExpression)]
                    }
                    None => Vec::new(),
                };
                for (expr, context) in candidates {
                    if derives(expr, &tainted)
                        && tracked_call(expr, catalog, imports).is_none()
                        && is_reduction(unwrap_value(expr))
                    {
                        out.push(ExprAnchor {
                            context,
                            target: cell.slice(expr.range()).to_string(),
                            anchor_line: end,
                        });
                    }
                }
            }
            Stmt::AugAssign(a) => {
                if derives(&a.value, &tainted) {
                    tainted.extend(pysrc::target_names(&a.target));
                }
            }
            _ => {}
        }
    }
    out
}

const REDUCERS: &[&str] = &["mean", "sum", "average", "nanmean", "nansum", "count_nonzero"];

fn is_reduction(expr: &Expr) -> bool {
    match expr {
        Expr::Call(c) => {
            let path = pysrc::callee_path(&c.func);
            let last = path.rsplit('.').next().unwrap_or(&path);
            REDUCERS.contains(&last)
        }
        Expr::BinOp(b) if matches!(b.op, ast::Operator::Div) => {
            let counts = |e: &Expr| {
                is_reduction(unwrap_value(e))
                    || matches!(e, Expr::Call(c) if pysrc::callee_path(&c.func) == "len")
            };
            counts(&b.left) || counts(&b.right)
        }
        _ => false,
    }
}

/// Per-kind counts as a map, for reports.
pub fn kind_histogram(props: &[TrackedProperty]) -> BTreeMap<PropertyKind, usize> {
    let mut m = BTreeMap::new();
    for p in props {
        *m.entry(p.kind).or_insert(0) += 1;
    }
    m
}
