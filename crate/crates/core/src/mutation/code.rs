//! Source-level mutation operators over notebook code cells.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustpython_parser::ast::{self, Constant, Expr, Ranged, Stmt};
use rustpython_parser::text_size::{TextRange, TextSize};

use super::Operator;
use crate::catalog::{ApiCatalog, ApiEntry};
use crate::error::{Error, Result};
use crate::finder::ImportTable;
use crate::literal::{py_repr, render_float};
use crate::notebook::{is_generated_line, Notebook};
use crate::pysrc::{self, ParsedCell};

const LR_PARAMS: &[&str] = &["lr", "learning_rate", "learning_rate_init", "eta"];
const DROPOUT_PARAMS: &[&str] = &["dropout", "rate", "p", "recurrent_dropout"];
const EPOCH_PARAMS: &[&str] = &["epochs", "n_epochs", "num_epochs", "max_iter", "n_estimators"];
const MAX_KWARG_EDITS: usize = 4;

/// Layers whose removal leaves a model structurally valid.
const NON_CRITICAL_LAYERS: &[&str] = &[
    "Dropout",
    "Dropout1d",
    "Dropout2d",
    "Dropout3d",
    "AlphaDropout",
    "SpatialDropout1D",
    "SpatialDropout2D",
    "SpatialDropout3D",
    "GaussianDropout",
    "ReLU",
    "LeakyReLU",
    "ELU",
    "GELU",
    "SELU",
    "PReLU",
    "Sigmoid",
    "Tanh",
    "Activation",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CodeMutant {
    pub notebook: Notebook,
    pub site: String,
}

/// One candidate edit set, confined to a single cell.
struct Site {
    cell: usize,
    edits: Vec<(TextRange, String)>,
    description: String,
}

/// Up to `max` mutants for `op`; an empty list means no applicable site.
/// When more sites exist, `max` of them are chosen with the seeded RNG and
/// kept in source order.
pub fn mutate_code(
    nb: &Notebook,
    op: Operator,
    catalog: &ApiCatalog,
    seed: u64,
    max: usize,
) -> Result<Vec<CodeMutant>> {
    if op.is_data() {
        return Err(Error::inapplicable(op, "not a code operator"));
    }
    let imports = ImportTable::from_notebook(nb);
    let mut sites = Vec::new();
    for cell in nb.code_cells().filter(|c| !c.is_generated()) {
        let Ok(parsed) = ParsedCell::parse(&cell.source) else {
            continue;
        };
        let ctx = Ctx {
            cell: cell.index,
            parsed: &parsed,
            catalog,
            imports: &imports,
        };
        match op {
            Operator::RemoveZeroGrad => ctx.zero_grad_sites(&parsed.suite, &mut sites),
            Operator::ModifyHyperparams => ctx.call_sites(&mut sites, Ctx::modify_hyperparams),
            Operator::RemoveHyperparams => ctx.call_sites(&mut sites, Ctx::remove_hyperparams),
            Operator::SwapApis => ctx.call_sites(&mut sites, Ctx::swap_api),
            Operator::RemoveLayers => ctx.layer_sites(&parsed.suite, &mut sites),
            _ => unreachable!(),
        }
    }
    let chosen: Vec<Site> = if sites.len() > max {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, sites.len(), max).into_vec();
        idx.sort_unstable();
        let mut sites: Vec<Option<Site>> = sites.into_iter().map(Some).collect();
        idx.into_iter().map(|i| sites[i].take().expect("distinct")).collect()
    } else {
        sites
    };
    chosen
        .into_iter()
        .map(|site| {
            let mut out = nb.clone();
            let src = &mut out.cells[site.cell].source;
            *src = apply_edits(src, &site.edits);
            Ok(CodeMutant {
                notebook: out,
                site: format!("cell {} {}", site.cell, site.description),
            })
        })
        .collect()
}

fn apply_edits(src: &str, edits: &[(TextRange, String)]) -> String {
    let mut edits: Vec<&(TextRange, String)> = edits.iter().collect();
    edits.sort_by_key(|(r, _)| std::cmp::Reverse(r.start()));
    let mut out = src.to_string();
    for (r, text) in edits {
        out.replace_range(usize::from(r.start())..usize::from(r.end()), text);
    }
    out
}

struct Ctx<'a> {
    cell: usize,
    parsed: &'a ParsedCell,
    catalog: &'a ApiCatalog,
    imports: &'a ImportTable,
}

impl<'a> Ctx<'a> {
    fn text(&self, r: TextRange) -> &str {
        self.parsed.slice(r)
    }

    fn line_of(&self, r: TextRange) -> usize {
        self.parsed.line_of(usize::from(r.start()))
    }

    fn generated(&self, stmt: &Stmt) -> bool {
        let (first, mut last) = self.parsed.span(stmt.range());
        if !pysrc::child_bodies(stmt).is_empty() {
            // Compound statements: only the header line counts.
            last = first;
        }
        let lines: Vec<&str> = self.parsed.text().split('\n').collect();
        (first..=last).any(|l| lines.get(l - 1).is_some_and(|s| is_generated_line(s)))
    }

    fn site(&self, edits: Vec<(TextRange, String)>, at: TextRange, what: String) -> Site {
        Site {
            cell: self.cell,
            edits,
            description: format!("line {}: {what}", self.line_of(at)),
        }
    }

    /// Edit removing a statement: its whole lines when it owns them, or
    /// `pass` when it is the only statement of a block.
    fn remove_stmt(&self, stmt: &Stmt, sole: bool) -> (TextRange, String) {
        let text = self.parsed.text();
        let (first, last) = self.parsed.span(stmt.range());
        let start = self.parsed.line_start(first);
        let end = if last < self.parsed.line_count() {
            self.parsed.line_start(last + 1)
        } else {
            text.len()
        };
        let owns = text[start..usize::from(stmt.range().start())].trim().is_empty()
            && text[usize::from(stmt.range().end())..end]
                .trim()
                .trim_start_matches(';')
                .trim()
                .chars()
                .next()
                .map_or(true, |c| c == '#');
        if sole || !owns {
            return (stmt.range(), "pass".into());
        }
        (
            TextRange::new(TextSize::from(start as u32), TextSize::from(end as u32)),
            String::new(),
        )
    }

    fn zero_grad_sites(&self, body: &[Stmt], out: &mut Vec<Site>) {
        for stmt in body {
            if let Stmt::Expr(e) = stmt {
                if let Expr::Call(c) = e.value.as_ref() {
                    let path = pysrc::callee_path(&c.func);
                    if path.rsplit('.').next() == Some("zero_grad") && !self.generated(stmt) {
                        let edit = self.remove_stmt(stmt, body.len() == 1);
                        out.push(self.site(vec![edit], stmt.range(), format!("remove {path}()")));
                    }
                }
            }
            for (child, _) in pysrc::child_bodies(stmt) {
                self.zero_grad_sites(child, out);
            }
        }
    }

    fn call_sites(
        &self,
        out: &mut Vec<Site>,
        f: fn(&Self, &Stmt, &ast::ExprCall, &ApiEntry) -> Option<Site>,
    ) {
        pysrc::walk_stmts(&self.parsed.suite, &mut |s| {
            if self.generated(s.stmt) {
                return;
            }
            for call in pysrc::calls_in_stmt(s.stmt) {
                if let Some(entry) = self.imports.lookup(self.catalog, &call.func) {
                    if let Some(site) = f(self, s.stmt, call, entry) {
                        out.push(site);
                    }
                }
            }
        });
    }

    fn modify_hyperparams(&self, _: &Stmt, call: &ast::ExprCall, entry: &ApiEntry) -> Option<Site> {
        let mut edits = Vec::new();
        let mut changed = Vec::new();
        for kw in &call.keywords {
            if edits.len() == MAX_KWARG_EDITS {
                break;
            }
            let Some(arg) = &kw.arg else { continue };
            let name = arg.as_str();
            let replacement = if LR_PARAMS.contains(&name) {
                match number(&kw.value) {
                    Some(v) => Some(render_number(v * 10.0, is_int(&kw.value))),
                    None => Some(format!("({}) * 10", self.text(kw.value.range()))),
                }
            } else if DROPOUT_PARAMS.contains(&name) {
                number(&kw.value).map(|v| {
                    let shifted = if v < 0.5 { v + 0.4 } else { v - 0.4 };
                    render_float((shifted * 1e9).round() / 1e9)
                })
            } else if name == "activation" {
                string(&kw.value).map(|s| py_repr(swap_activation(&s)))
            } else if EPOCH_PARAMS.contains(&name) {
                number(&kw.value)
                    .filter(|_| is_int(&kw.value))
                    .map(|v| render_number(v * 2.0, true))
            } else if self.catalog.is_seed_parameter(name) {
                number(&kw.value)
                    .filter(|_| is_int(&kw.value))
                    .map(|v| render_number(v + 1.0, true))
            } else {
                None
            };
            if let Some(text) = replacement {
                changed.push(format!("{name}={text}"));
                edits.push((kw.value.range(), text));
            }
        }
        (!edits.is_empty()).then(|| {
            self.site(
                edits,
                call.range,
                format!("{}: {}", entry.callable(), changed.join(", ")),
            )
        })
    }

    fn remove_hyperparams(&self, _: &Stmt, call: &ast::ExprCall, entry: &ApiEntry) -> Option<Site> {
        let removable: Vec<&ast::Keyword> = call
            .keywords
            .iter()
            .filter(|k| {
                k.arg
                    .as_ref()
                    .is_some_and(|a| !entry.required_params.iter().any(|r| r == a.as_str()))
            })
            .collect();
        if removable.is_empty() {
            return None;
        }
        let mut parts: Vec<(TextSize, &str)> = call
            .args
            .iter()
            .map(|a| (a.range().start(), self.text(a.range())))
            .collect();
        for kw in &call.keywords {
            if !removable.iter().any(|r| std::ptr::eq(*r, kw)) {
                parts.push((kw.range.start(), self.text(kw.range)));
            }
        }
        parts.sort_by_key(|(p, _)| *p);
        let args: Vec<&str> = parts.into_iter().map(|(_, t)| t).collect();
        let text = format!("{}({})", self.text(call.func.range()), args.join(", "));
        let names: Vec<&str> = removable
            .iter()
            .filter_map(|k| k.arg.as_ref().map(|a| a.as_str()))
            .collect();
        Some(self.site(
            vec![(call.range, text)],
            call.range,
            format!("{}: drop {}", entry.callable(), names.join(", ")),
        ))
    }

    fn swap_api(&self, stmt: &Stmt, call: &ast::ExprCall, entry: &ApiEntry) -> Option<Site> {
        let group = self.catalog.swap_groups.iter().find(|g| g.contains(&entry.name))?;
        let pos = group.iter().position(|m| *m == entry.name)?;
        let alt = self.catalog.entry(&group[(pos + 1) % group.len()])?;
        let alt_module = alt.module()?;
        let mut edits = Vec::new();
        match call.func.as_ref() {
            Expr::Attribute(a) => {
                let (qualified, _) = self.imports.qualify(&pysrc::callee_path(&a.value));
                if qualified == alt_module {
                    let start = a.range.end() - TextSize::from(a.attr.as_str().len() as u32);
                    edits.push((TextRange::new(start, a.range.end()), alt.callable().to_string()));
                } else {
                    edits.push((a.range, alt.name.clone()));
                    edits.push(self.import_before(stmt, &format!("import {alt_module}")));
                }
            }
            Expr::Name(n) => {
                edits.push((n.range, alt.callable().to_string()));
                edits.push(self.import_before(
                    stmt,
                    &format!("from {alt_module} import {}", alt.callable()),
                ));
            }
            _ => return None,
        }
        Some(self.site(
            edits,
            call.range,
            format!("{} -> {}", entry.name, alt.name),
        ))
    }

    fn import_before(&self, stmt: &Stmt, line: &str) -> (TextRange, String) {
        let (first, _) = self.parsed.span(stmt.range());
        let start = self.parsed.line_start(first);
        let indent = pysrc::leading_ws(&self.parsed.text()[start..]);
        let at = TextSize::from(start as u32);
        (TextRange::new(at, at), format!("{indent}{line}\n"))
    }

    fn layer_sites(&self, body: &[Stmt], out: &mut Vec<Site>) {
        for stmt in body {
            if self.generated(stmt) {
                continue;
            }
            // `model.add(Dropout(...))`
            if let Stmt::Expr(e) = stmt {
                if let Expr::Call(c) = e.value.as_ref() {
                    if let Expr::Attribute(a) = c.func.as_ref() {
                        if a.attr.as_str() == "add" && c.args.len() == 1 {
                            if let Some(layer) = non_critical(&c.args[0]) {
                                let edit = self.remove_stmt(stmt, body.len() == 1);
                                out.push(self.site(vec![edit], stmt.range(), format!("remove add({layer})")));
                            }
                        }
                    }
                }
            }
            for call in pysrc::calls_in_stmt(stmt) {
                let is_sequential = pysrc::callee_path(&call.func)
                    .rsplit('.')
                    .next()
                    .is_some_and(|n| n == "Sequential");
                if !is_sequential {
                    continue;
                }
                let elements: &[Expr] = match call.args.first() {
                    Some(Expr::List(l)) => &l.elts,
                    Some(_) => &call.args,
                    None => continue,
                };
                for (i, el) in elements.iter().enumerate() {
                    if let Some(layer) = non_critical(el) {
                        out.push(self.site(
                            vec![remove_element(elements, i)],
                            el.range(),
                            format!("remove layer {layer}"),
                        ));
                    }
                }
            }
            for (child, _) in pysrc::child_bodies(stmt) {
                self.layer_sites(child, out);
            }
        }
    }
}

/// Deletes element `i` of a comma-separated sequence along with one separator.
fn remove_element(elements: &[Expr], i: usize) -> (TextRange, String) {
    let el = elements[i].range();
    let range = if let Some(next) = elements.get(i + 1) {
        TextRange::new(el.start(), next.range().start())
    } else if i > 0 {
        TextRange::new(elements[i - 1].range().end(), el.end())
    } else {
        el
    };
    (range, String::new())
}

fn non_critical(expr: &Expr) -> Option<String> {
    let Expr::Call(c) = expr else { return None };
    let path = pysrc::callee_path(&c.func);
    let name = path.rsplit('.').next()?;
    NON_CRITICAL_LAYERS.contains(&name).then(|| name.to_string())
}

fn swap_activation(current: &str) -> &'static str {
    match current {
        "relu" => "sigmoid",
        "sigmoid" => "relu",
        "tanh" => "relu",
        "softmax" => "sigmoid",
        _ => "relu",
    }
}

fn number(expr: &Expr) -> Option<f64> {
    match expr {
        Expr::Constant(c) => match &c.value {
            Constant::Int(i) => i.to_string().parse().ok(),
            Constant::Float(f) => Some(*f),
            _ => None,
        },
        Expr::UnaryOp(u) if matches!(u.op, ast::UnaryOp::USub) => number(&u.operand).map(|v| -v),
        _ => None,
    }
}

fn is_int(expr: &Expr) -> bool {
    match expr {
        Expr::Constant(c) => matches!(c.value, Constant::Int(_)),
        Expr::UnaryOp(u) => is_int(&u.operand),
        _ => false,
    }
}

fn string(expr: &Expr) -> Option<String> {
    match expr {
        Expr::Constant(c) => match &c.value {
            Constant::Str(s) => Some(s.clone()),
            _ => None,
        },
        _ => None,
    }
}

fn render_number(v: f64, int: bool) -> String {
    if int && v.fract() == 0.0 && v.abs() < 9e15 {
        format!("{}", v as i64)
    } else {
        render_float((v * 1e12).round() / 1e12)
    }
}
