//! Runs a notebook carrying generated assertions and tallies per-assertion
//! results over repeated runs.

use std::collections::BTreeMap;

use log::debug;
use rustpython_parser::ast::{Constant, Expr, Stmt};
use serde::Serialize;

use crate::error::Result;
use crate::harness::{run_jobs, ExecutorCommand, Job, RawRun, RunConfig};
use crate::notebook::Notebook;
use crate::protocol::{AssertStatus, Event, RunExit, RunOutcome};
use crate::pysrc::{self, ParsedCell};
use crate::synth::{AssertionKind, RUNTIME_MODULE};

/// An assertion statement found in a notebook.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InjectedAssertion {
    pub test_id: String,
    pub kind: AssertionKind,
    pub cell_index: usize,
    pub line: usize,
}

pub fn collect_assertions(nb: &Notebook) -> Vec<InjectedAssertion> {
    let mut found = Vec::new();
    for cell in nb.code_cells() {
        let Ok(parsed) = ParsedCell::parse(&cell.source) else {
            continue;
        };
        pysrc::walk_stmts(&parsed.suite, &mut |s| {
            if let Some((kind, id)) = assertion_call(s.stmt) {
                found.push(InjectedAssertion {
                    test_id: id,
                    kind,
                    cell_index: cell.index,
                    line: parsed.span(rustpython_parser::ast::Ranged::range(s.stmt)).0,
                });
            }
        });
    }
    found
}

fn assertion_call(stmt: &Stmt) -> Option<(AssertionKind, String)> {
    let Stmt::Expr(e) = stmt else { return None };
    let Expr::Call(call) = e.value.as_ref() else {
        return None;
    };
    let path = pysrc::callee_path(&call.func);
    let (module, func) = path.rsplit_once('.')?;
    if module != RUNTIME_MODULE {
        return None;
    }
    let kind = AssertionKind::from_function(func)?;
    let id = call.keywords.iter().find_map(|k| {
        if k.arg.as_ref()?.as_str() != "test_id" {
            return None;
        }
        match &k.value {
            Expr::Constant(c) => match &c.value {
                Constant::Str(s) => Some(s.clone()),
                _ => None,
            },
            _ => None,
        }
    })?;
    Some((kind, id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AssertionStatus {
    Pass,
    Fail,
    Error,
    NotReached,
}

impl AssertionStatus {
    pub fn evaluated(self) -> bool {
        self != AssertionStatus::NotReached
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssertionResult {
    pub test_id: String,
    pub status: AssertionStatus,
    pub message: String,
    pub cell_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub notebook: String,
    pub per_run: Vec<Vec<AssertionResult>>,
    /// `None` when the assertion was never evaluated.
    pub passrate: BTreeMap<String, Option<f64>>,
    pub overall_passrate: Option<f64>,
    pub run_count: usize,
    pub run_outcomes: Vec<RunOutcome>,
}

/// p = P / N over evaluated runs only.
pub fn passrate(statuses: &[AssertionStatus]) -> Option<f64> {
    let evaluated = statuses.iter().filter(|s| s.evaluated()).count();
    let passed = statuses
        .iter()
        .filter(|s| **s == AssertionStatus::Pass)
        .count();
    (evaluated > 0).then(|| passed as f64 / evaluated as f64)
}

/// Results of one run. An assertion evaluated several times (loops) fails
/// if any evaluation failed.
pub fn results_from_events(
    assertions: &[InjectedAssertion],
    events: &[Event],
) -> Vec<AssertionResult> {
    let mut seen: BTreeMap<&str, (AssertionStatus, String)> = BTreeMap::new();
    for ev in events {
        let Event::Assert { test_id, status, msg } = ev else {
            continue;
        };
        let status = match status {
            AssertStatus::Pass => AssertionStatus::Pass,
            AssertStatus::Fail => AssertionStatus::Fail,
            AssertStatus::Error => AssertionStatus::Error,
        };
        let entry = seen
            .entry(test_id.as_str())
            .or_insert((AssertionStatus::Pass, String::new()));
        let rank = |s: AssertionStatus| match s {
            AssertionStatus::Fail => 2,
            AssertionStatus::Error => 1,
            _ => 0,
        };
        if rank(status) >= rank(entry.0) {
            *entry = (status, msg.clone().unwrap_or_default());
        }
    }
    assertions
        .iter()
        .map(|a| {
            let (status, message) = seen
                .remove(a.test_id.as_str())
                .unwrap_or((AssertionStatus::NotReached, String::new()));
            AssertionResult {
                test_id: a.test_id.clone(),
                status,
                message,
                cell_index: a.cell_index,
            }
        })
        .collect()
}

pub fn build_report(name: &str, assertions: &[InjectedAssertion], runs: &[RawRun]) -> RunReport {
    let per_run: Vec<Vec<AssertionResult>> = runs
        .iter()
        .map(|r| {
            let mut results = results_from_events(assertions, &r.events);
            if r.exit == RunExit::Timeout || r.exit == RunExit::Crash {
                debug!("run {} ended with {:?}", r.run_index, r.exit);
                for res in &mut results {
                    if res.status == AssertionStatus::NotReached {
                        res.message = format!("run ended with {:?}", r.exit).to_lowercase();
                    }
                }
            }
            results
        })
        .collect();
    let mut passrates = BTreeMap::new();
    let mut all = Vec::new();
    for a in assertions {
        let statuses: Vec<AssertionStatus> = per_run
            .iter()
            .flat_map(|run| run.iter().filter(|r| r.test_id == a.test_id).map(|r| r.status))
            .collect();
        passrates.insert(a.test_id.clone(), passrate(&statuses));
        all.extend(statuses);
    }
    RunReport {
        notebook: name.to_string(),
        per_run,
        passrate: passrates,
        overall_passrate: passrate(&all),
        run_count: runs.len(),
        run_outcomes: runs.iter().map(RawRun::outcome).collect(),
    }
}

/// Executes the notebook `runs` times with assertions enabled. Runs use
/// seeds `base_seed + i` through the environment only; the notebook itself
/// is not rewritten.
pub fn run_tests(
    nb: &Notebook,
    name: &str,
    runs: usize,
    cfg: &RunConfig,
    exec: &ExecutorCommand,
) -> Result<RunReport> {
    let mut cfg = cfg.clone();
    cfg.iterations = runs;
    cfg.validate()?;
    let assertions = collect_assertions(nb);
    let jobs = (0..runs)
        .map(|i| Job {
            run_index: i,
            notebook: nb.clone(),
            seed: cfg.seed_for(i),
            asserts_enabled: true,
        })
        .collect();
    let raw = run_jobs(&cfg, &cfg.workspace.join("runs"), exec, jobs)?;
    Ok(build_report(name, &assertions, &raw))
}

impl RunReport {
    /// 0 when every evaluated assertion passed in every run, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        let failed = self
            .per_run
            .iter()
            .flatten()
            .any(|r| matches!(r.status, AssertionStatus::Fail | AssertionStatus::Error));
        i32::from(failed)
    }

    pub fn test_ids(&self) -> Vec<&str> {
        self.passrate.keys().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notebook::Cell;
    use std::time::Duration;

    fn assertions(ids: &[&str]) -> Vec<InjectedAssertion> {
        ids.iter()
            .map(|id| InjectedAssertion {
                test_id: id.to_string(),
                kind: AssertionKind::AllClose,
                cell_index: 1,
                line: 1,
            })
            .collect()
    }

    fn raw(i: usize, events: Vec<Event>) -> RawRun {
        RawRun {
            run_index: i,
            exit: RunExit::Ok,
            events,
            message: None,
            elapsed: Duration::ZERO,
        }
    }

    fn assert_ev(id: &str, pass: bool) -> Event {
        Event::Assert {
            test_id: id.into(),
            status: if pass { AssertStatus::Pass } else { AssertStatus::Fail },
            msg: (!pass).then(|| "expected 1.0, got 2.0, atol 0.0".into()),
        }
    }

    #[test]
    fn collects_generated_calls() {
        let nb = Notebook::new(vec![
            Cell::code("import nbtest"),
            Cell::code(
                "df = f()\nnbtest.assert_shape(df, (2, 2), test_id='1_0')  # nbtest:generated\nfor i in x:\n    nbtest.assert_allclose(i, 1.0, atol=0.0, test_id='1_1')\nother.assert_shape(df, (1,), test_id='z')",
            ),
        ]);
        let found = collect_assertions(&nb);
        assert_eq!(found.len(), 2);
        assert_eq!(found[0].test_id, "1_0");
        assert_eq!(found[0].kind, AssertionKind::Shape);
        assert_eq!((found[1].cell_index, found[1].line), (1, 4));
    }

    #[test]
    fn passrate_counts_evaluated_only() {
        use AssertionStatus::*;
        let mut s = vec![Pass; 18];
        s.extend(vec![Fail; 12]);
        s.extend(vec![NotReached; 5]);
        assert_eq!(passrate(&s), Some(0.6));
        assert_eq!(passrate(&[NotReached]), None);
    }

    #[test]
    fn single_failure_in_ten_runs() {
        let a = assertions(&["0_0", "0_1"]);
        let runs: Vec<RawRun> = (0..10)
            .map(|i| raw(i, vec![assert_ev("0_0", true), assert_ev("0_1", i != 0)]))
            .collect();
        let rep = build_report("nb.ipynb", &a, &runs);
        assert_eq!(rep.passrate["0_1"], Some(0.9));
        assert_eq!(rep.passrate["0_0"], Some(1.0));
        assert_eq!(rep.exit_code(), 1);
        assert_eq!(rep.per_run[0][1].message, "expected 1.0, got 2.0, atol 0.0");
    }

    #[test]
    fn all_pass_exit_zero() {
        let a = assertions(&["0_0"]);
        let runs: Vec<RawRun> = (0..3).map(|i| raw(i, vec![assert_ev("0_0", true)])).collect();
        let rep = build_report("nb", &a, &runs);
        assert_eq!(rep.overall_passrate, Some(1.0));
        assert_eq!(rep.exit_code(), 0);
    }

    #[test]
    fn missing_events_not_reached() {
        let a = assertions(&["0_0", "2_0"]);
        let rep = build_report("nb", &a, &[raw(0, vec![assert_ev("0_0", true)])]);
        assert_eq!(rep.per_run[0][1].status, AssertionStatus::NotReached);
        assert_eq!(rep.passrate["2_0"], None);
        assert_eq!(rep.exit_code(), 0);
    }

    #[test]
    fn zero_events_tolerated() {
        let rep = build_report("nb", &[], &[raw(0, vec![Event::Done])]);
        assert!(rep.passrate.is_empty());
        assert_eq!(rep.overall_passrate, None);
        assert_eq!(rep.exit_code(), 0);
    }
}
