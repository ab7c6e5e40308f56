//! Cell matching between notebook versions, assertion transfer, and
//! version-level kill metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rustpython_parser::ast::{Expr, Ranged, Stmt};
use serde::Serialize;

use crate::error::Result;
use crate::harness::{ExecutorCommand, RunConfig};
use crate::literal::ExpectedValue;
use crate::notebook::{is_generated_line, strip_source, Notebook};
use crate::pysrc::{self, ParsedCell};
use crate::runner::{collect_assertions, run_tests, AssertionStatus, RunReport};
use crate::synth::{inject, AssertionKind, AssertionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchKind {
    Identical,
    AstSimilar,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CellMatch {
    pub pairs: Vec<(usize, usize, MatchKind)>,
    pub unmatched_old: Vec<usize>,
    pub unmatched_new: Vec<usize>,
}

impl CellMatch {
    pub fn partner_of_old(&self, old: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == old).map(|p| p.1)
    }
}

struct CellInfo {
    index: usize,
    ordinal: usize,
    text: String,
    fingerprint: Option<Fingerprint>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Fingerprint {
    targets: Vec<String>,
    calls: Vec<(String, usize, Vec<String>)>,
}

fn fingerprint(parsed: &ParsedCell) -> Fingerprint {
    let mut targets = Vec::new();
    let mut calls = Vec::new();
    pysrc::walk_stmts(&parsed.suite, &mut |s| {
        match s.stmt {
            Stmt::Assign(a) => {
                for t in &a.targets {
                    targets.extend(pysrc::target_texts(parsed, t));
                }
            }
            Stmt::AnnAssign(a) => targets.extend(pysrc::target_texts(parsed, &a.target)),
            Stmt::AugAssign(a) => targets.extend(pysrc::target_texts(parsed, &a.target)),
            _ => {}
        }
        for c in pysrc::calls_in_stmt(s.stmt) {
            let mut kws: Vec<String> = c
                .keywords
                .iter()
                .map(|k| k.arg.as_ref().map_or("**".to_string(), |a| a.to_string()))
                .collect();
            kws.sort();
            calls.push((pysrc::callee_path(&c.func), c.args.len(), kws));
        }
    });
    targets.sort();
    targets.dedup();
    calls.sort();
    Fingerprint { targets, calls }
}

fn cell_infos(nb: &Notebook) -> Vec<CellInfo> {
    nb.code_cells()
        .filter(|c| !c.is_generated())
        .enumerate()
        .map(|(ordinal, c)| {
            let source = strip_source(&c.source);
            CellInfo {
                index: c.index,
                ordinal,
                text: pysrc::strip_comments(&source),
                fingerprint: ParsedCell::parse(&source).ok().map(|p| fingerprint(&p)),
            }
        })
        .collect()
}

/// Pairs code cells: first by identical comment-free source, then by AST
/// fingerprint. Among several candidates the nearest position wins.
pub fn match_cells(old: &Notebook, new: &Notebook) -> CellMatch {
    let old_cells = cell_infos(old);
    let new_cells = cell_infos(new);
    let mut old_used = vec![false; old_cells.len()];
    let mut new_used = vec![false; new_cells.len()];
    let mut pairs = Vec::new();

    let mut stage = |kind: MatchKind, same: &dyn Fn(&CellInfo, &CellInfo) -> bool| {
        for (i, o) in old_cells.iter().enumerate() {
            if old_used[i] {
                continue;
            }
            let best = new_cells
                .iter()
                .enumerate()
                .filter(|(j, n)| !new_used[*j] && same(o, n))
                .min_by_key(|(_, n)| (n.ordinal.abs_diff(o.ordinal), n.ordinal));
            if let Some((j, n)) = best {
                old_used[i] = true;
                new_used[j] = true;
                pairs.push((o.index, n.index, kind));
            }
        }
    };
    stage(MatchKind::Identical, &|o, n| o.text == n.text);
    stage(MatchKind::AstSimilar, &|o, n| {
        o.fingerprint.is_some() && o.fingerprint == n.fingerprint
    });
    pairs.sort();
    CellMatch {
        pairs,
        unmatched_old: old_cells
            .iter()
            .zip(&old_used)
            .filter(|(_, u)| !**u)
            .map(|(c, _)| c.index)
            .collect(),
        unmatched_new: new_cells
            .iter()
            .zip(&new_used)
            .filter(|(_, u)| !**u)
            .map(|(c, _)| c.index)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    NoCell,
    NoAnchor,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferResult {
    pub transferred: Vec<AssertionSpec>,
    pub skipped: Vec<(String, SkipReason)>,
    /// `None` when the source carries no assertions.
    pub transfer_ratio: Option<f64>,
    #[serde(skip)]
    pub notebook: Notebook,
}

/// Rebuilds a spec from an injected assertion statement.
fn spec_from_stmt(parsed: &ParsedCell, stmt: &Stmt, kind: AssertionKind, test_id: &str) -> Option<AssertionSpec> {
    let Stmt::Expr(e) = stmt else { return None };
    let Expr::Call(call) = e.value.as_ref() else { return None };
    if call.args.len() != 2 {
        return None;
    }
    let expected = ExpectedValue::parse(parsed.slice(call.args[1].range()))?;
    let mut atol = None;
    for kw in &call.keywords {
        match kw.arg.as_ref().map(|a| a.as_str()) {
            Some("test_id") => {}
            Some("atol") => match ExpectedValue::parse(parsed.slice(kw.value.range()))? {
                ExpectedValue::Float(f) => atol = Some(f),
                ExpectedValue::Int(i) => atol = Some(i as f64),
                _ => return None,
            },
            _ => return None,
        }
    }
    Some(AssertionSpec {
        test_id: test_id.to_string(),
        kind,
        target_expr: parsed.slice(call.args[0].range()).to_string(),
        expected,
        atol,
        property_id: String::new(),
        cell_index: 0,
        anchor_line: 0,
    })
}

/// Statement after which an assertion at `line` (1-based, in the raw cell)
/// was placed, found in the stripped cell.
fn preceding_statement<'p>(raw: &str, stripped: &'p ParsedCell, line: usize) -> Option<&'p Stmt> {
    let raw_lines: Vec<&str> = raw.split('\n').collect();
    let indent = pysrc::leading_ws(raw_lines.get(line - 1)?).len();
    // Stripped line number of the last kept raw line before the assertion.
    let kept_before = raw_lines[..line - 1]
        .iter()
        .filter(|l| !is_generated_line(l))
        .count();
    if kept_before == 0 {
        return None;
    }
    let mut same_indent = None;
    let mut innermost: Option<(usize, &Stmt)> = None;
    pysrc::walk_stmts(&stripped.suite, &mut |s| {
        let (start, end) = stripped.span(s.stmt.range());
        if end != kept_before {
            return;
        }
        let start_indent = pysrc::leading_ws(&stripped.text()[stripped.line_start(start)..]).len();
        if start_indent == indent {
            same_indent = Some(s.stmt);
        }
        if innermost.map_or(true, |(d, _)| s.depth >= d) {
            innermost = Some((s.depth, s.stmt));
        }
    });
    same_indent.or(innermost.map(|(_, s)| s))
}

/// Copies assertions from `src` onto `dst` wherever the statement preceding
/// an assertion reappears, unchanged after normalization, in the paired cell.
pub fn transfer_assertions(src: &Notebook, dst: &Notebook, matching: &CellMatch) -> Result<TransferResult> {
    // Cell positions in `dst` once its generated cells are gone.
    let stripped_pos = |i: usize| i - dst.cells[..i].iter().filter(|c| c.is_generated()).count();
    let dst = dst.strip();
    let mut transferred = Vec::new();
    let mut skipped = Vec::new();
    let found = collect_assertions(src);
    for a in &found {
        let Some(dst_index) = matching.partner_of_old(a.cell_index).map(stripped_pos) else {
            skipped.push((a.test_id.clone(), SkipReason::NoCell));
            continue;
        };
        let raw = &src.cells[a.cell_index].source;
        let spec = ParsedCell::parse(raw).ok().and_then(|p| {
            let mut hit = None;
            pysrc::walk_stmts(&p.suite, &mut |s| {
                if hit.is_none() && p.span(s.stmt.range()).0 == a.line {
                    hit = spec_from_stmt(&p, s.stmt, a.kind, &a.test_id);
                }
            });
            hit
        });
        let Some(mut spec) = spec else {
            skipped.push((a.test_id.clone(), SkipReason::Unparseable));
            continue;
        };
        let Ok(stripped) = ParsedCell::parse(&strip_source(raw)) else {
            skipped.push((a.test_id.clone(), SkipReason::NoAnchor));
            continue;
        };
        let Some(prev) = preceding_statement(raw, &stripped, a.line) else {
            skipped.push((a.test_id.clone(), SkipReason::NoAnchor));
            continue;
        };
        let wanted = pysrc::normalized_stmt(prev);
        let prev_line = stripped.span(prev.range()).1;
        let Ok(dst_cell) = ParsedCell::parse(&dst.cells[dst_index].source) else {
            skipped.push((a.test_id.clone(), SkipReason::NoAnchor));
            continue;
        };
        let mut best: Option<usize> = None;
        pysrc::walk_stmts(&dst_cell.suite, &mut |s| {
            if pysrc::normalized_stmt(s.stmt) == wanted {
                let end = dst_cell.span(s.stmt.range()).1;
                if best.map_or(true, |b| end.abs_diff(prev_line) < b.abs_diff(prev_line)) {
                    best = Some(end);
                }
            }
        });
        match best {
            Some(end) => {
                spec.cell_index = dst_index;
                spec.anchor_line = end;
                transferred.push(spec);
            }
            None => skipped.push((a.test_id.clone(), SkipReason::NoAnchor)),
        }
    }
    let notebook = inject(&dst, &transferred)?;
    let total = found.len();
    Ok(TransferResult {
        transfer_ratio: (total > 0).then(|| transferred.len() as f64 / total as f64),
        transferred,
        skipped,
        notebook,
    })
}

/// Assertion statuses of one version: `matrix[run][assertion]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VersionOutcome {
    pub version: String,
    pub assertion_kinds: Vec<AssertionKind>,
    pub matrix: Vec<Vec<AssertionStatus>>,
}

impl VersionOutcome {
    pub fn from_report(version: &str, kinds: Vec<AssertionKind>, rep: &RunReport) -> Self {
        VersionOutcome {
            version: version.to_string(),
            assertion_kinds: kinds,
            matrix: rep
                .per_run
                .iter()
                .map(|run| run.iter().map(|r| r.status).collect())
                .collect(),
        }
    }

    pub fn killable(&self) -> bool {
        !self.assertion_kinds.is_empty()
    }

    /// Positions of assertions with passrate below one.
    pub fn failing(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for run in &self.matrix {
            for (i, s) in run.iter().enumerate() {
                if matches!(s, AssertionStatus::Fail | AssertionStatus::Error) {
                    out.insert(i);
                }
            }
        }
        out
    }

    pub fn killed(&self) -> bool {
        !self.failing().is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct KillMetrics {
    /// Versions with at least one transferred assertion.
    pub versions_total: usize,
    /// K_V.
    pub versions_killed: usize,
    pub versions_unkillable: usize,
    pub notebooks_total: usize,
    pub notebooks_any_killed: usize,
    /// K_N: notebooks whose every killable version is killed.
    pub notebooks_all_killed: usize,
    /// Killed versions with a failing assertion of each kind.
    pub per_kind: BTreeMap<AssertionKind, usize>,
}

pub fn kill_metrics(groups: &BTreeMap<String, Vec<VersionOutcome>>) -> KillMetrics {
    let mut m = KillMetrics::default();
    for versions in groups.values() {
        let killable: Vec<&VersionOutcome> = versions.iter().filter(|v| v.killable()).collect();
        m.versions_unkillable += versions.len() - killable.len();
        if killable.is_empty() {
            continue;
        }
        m.notebooks_total += 1;
        let mut killed = 0;
        for v in &killable {
            m.versions_total += 1;
            let failing = v.failing();
            if failing.is_empty() {
                continue;
            }
            killed += 1;
            let kinds: BTreeSet<AssertionKind> = failing.iter().map(|i| v.assertion_kinds[*i]).collect();
            for k in kinds {
                *m.per_kind.entry(k).or_insert(0) += 1;
            }
        }
        m.versions_killed += killed;
        if killed > 0 {
            m.notebooks_any_killed += 1;
        }
        if killed == killable.len() {
            m.notebooks_all_killed += 1;
        }
    }
    m
}

/// A version to evaluate: its notebook (with transferred assertions) and
/// the directory its data files live in.
#[derive(Debug, Clone)]
pub struct VersionInput {
    pub version: String,
    pub notebook: Notebook,
    pub source_dir: Option<PathBuf>,
}

pub fn evaluate_versions(
    groups: &BTreeMap<String, Vec<VersionInput>>,
    runs: usize,
    cfg: &RunConfig,
    exec: &ExecutorCommand,
) -> Result<(KillMetrics, BTreeMap<String, Vec<VersionOutcome>>)> {
    let mut outcomes: BTreeMap<String, Vec<VersionOutcome>> = BTreeMap::new();
    for (name, versions) in groups {
        for v in versions {
            let kinds: Vec<AssertionKind> = collect_assertions(&v.notebook).into_iter().map(|a| a.kind).collect();
            let mut vcfg = cfg.clone();
            vcfg.workspace = cfg.workspace.join(sanitize(name)).join(sanitize(&v.version));
            vcfg.source_dir = v.source_dir.clone();
            let rep = if kinds.is_empty() {
                None
            } else {
                Some(run_tests(&v.notebook, &v.version, runs, &vcfg, exec)?)
            };
            let outcome = match &rep {
                Some(rep) => VersionOutcome::from_report(&v.version, kinds, rep),
                None => VersionOutcome {
                    version: v.version.clone(),
                    assertion_kinds: kinds,
                    matrix: Vec::new(),
                },
            };
            outcomes.entry(name.clone()).or_default().push(outcome);
        }
    }
    Ok((kill_metrics(&outcomes), outcomes))
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}
