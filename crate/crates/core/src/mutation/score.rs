//! Mutant generation, materialization, execution and scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use walkdir::WalkDir;

use super::{mutate_code, mutate_table, MutantSpec, MutationRates, Operator};
use crate::catalog::{ApiCatalog, PropertyKind};
use crate::error::{Error, Result};
use crate::harness::{copy_tree, run_jobs, ExecutorCommand, Job, RunConfig, SKIPPED_DIRS};
use crate::notebook::{serialize_notebook, Notebook};
use crate::protocol::{AssertStatus, Event, RunExit};
use crate::runner::collect_assertions;
use crate::synth::AssertionKind;

pub const MUTANT_RECORD: &str = "mutant.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Mutant {
    pub spec: MutantSpec,
    pub notebook: Notebook,
    /// Replacement data files, relative to the source directory.
    pub files: Vec<(PathBuf, Vec<u8>)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skipped {
    pub operator: Operator,
    pub target: String,
    pub reason: String,
}

fn table_files(dir: &Path, exclude: &[PathBuf]) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_entry(|e| {
            !exclude.iter().any(|x| e.path().starts_with(x)) && !SKIPPED_DIRS.iter().any(|d| e.file_name() == *d)
        })
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .filter(|e| {
            e.path()
                .extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "csv" | "tsv"))
        })
        .filter_map(|e| e.path().strip_prefix(dir).ok().map(Path::to_path_buf))
        .collect();
    files.sort();
    files
}

fn op_seed(seed: u64, op: Operator, k: usize) -> u64 {
    let op_index = Operator::ALL.iter().position(|o| *o == op).unwrap_or(0) as u64;
    seed.wrapping_add(op_index << 32).wrapping_add(k as u64)
}

/// Builds up to `max_per_op` mutants per operator. Data operators mutate the
/// table files under `source_dir`, preferring files the notebook mentions;
/// code operators rewrite `nb`.
#[allow(clippy::too_many_arguments)]
pub fn generate_mutants(
    nb: &Notebook,
    source_dir: Option<&Path>,
    out_root: &Path,
    operators: &[Operator],
    catalog: &ApiCatalog,
    rates: &MutationRates,
    seed: u64,
    max_per_op: usize,
) -> Result<(Vec<Mutant>, Vec<Skipped>)> {
    let mut mutants = Vec::new();
    let mut skipped = Vec::new();
    let source_text: String = nb.code_cells().map(|c| c.source.as_str()).collect::<Vec<_>>().join("\n");
    let tables = source_dir
        .map(|d| {
            let all = table_files(d, &[out_root.to_path_buf()]);
            let mentioned: Vec<PathBuf> = all
                .iter()
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| source_text.contains(n))
                })
                .cloned()
                .collect();
            if mentioned.is_empty() { all } else { mentioned }
        })
        .unwrap_or_default();

    for &op in operators {
        let before = mutants.len();
        let id = |k: usize| format!("{}-{k}", op.slug());
        if op.is_data() {
            if tables.is_empty() {
                skipped.push(Skipped {
                    operator: op,
                    target: "-".into(),
                    reason: "no table files".into(),
                });
            }
            for (k, rel) in tables.iter().enumerate() {
                if mutants.len() - before == max_per_op {
                    break;
                }
                let dir = source_dir.expect("tables imply a source dir");
                let path = dir.join(rel);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let s = op_seed(seed, op, k);
                match mutate_table(&bytes, op, s, rates) {
                    Ok(m) => {
                        let mutant_id = id(mutants.len() - before);
                        mutants.push(Mutant {
                            spec: MutantSpec {
                                workspace: out_root.join("mutants").join(&mutant_id),
                                mutant_id,
                                operator: op,
                                seed: s,
                                site: format!("{}: {}", rel.display(), m.site),
                            },
                            notebook: nb.clone(),
                            files: vec![(rel.clone(), m.bytes)],
                        });
                    }
                    Err(Error::OperatorInapplicable { reason, .. }) | Err(Error::Config(reason)) => {
                        skipped.push(Skipped { operator: op, target: rel.display().to_string(), reason })
                    }
                    Err(Error::Csv(e)) => skipped.push(Skipped {
                        operator: op,
                        target: rel.display().to_string(),
                        reason: format!("unreadable table: {e}"),
                    }),
                    Err(e) => return Err(e),
                }
            }
        } else {
            let s = op_seed(seed, op, 0);
            let found = mutate_code(nb, op, catalog, s, max_per_op)?;
            if found.is_empty() {
                skipped.push(Skipped {
                    operator: op,
                    target: "notebook".into(),
                    reason: "no applicable site".into(),
                });
            }
            for (k, m) in found.into_iter().enumerate() {
                mutants.push(Mutant {
                    spec: MutantSpec {
                        mutant_id: id(k),
                        operator: op,
                        seed: s,
                        site: m.site,
                        workspace: out_root.join("mutants").join(id(k)),
                    },
                    notebook: m.notebook,
                    files: Vec::new(),
                });
            }
        }
    }
    Ok((mutants, skipped))
}

/// Writes the mutant workspace: source copy, mutated files, notebook and
/// provenance record.
pub fn materialize(mutant: &Mutant, source_dir: Option<&Path>, notebook_name: &str) -> Result<()> {
    let ws = &mutant.spec.workspace;
    if ws.exists() {
        fs::remove_dir_all(ws).map_err(|e| Error::io(ws, e))?;
    }
    fs::create_dir_all(ws).map_err(|e| Error::io(ws, e))?;
    if let Some(src) = source_dir {
        // Never copy the mutants tree into itself.
        let mutants_dir = ws.parent().map(Path::to_path_buf);
        copy_tree(src, ws, &mutants_dir.into_iter().collect::<Vec<_>>())?;
    }
    for (rel, bytes) in &mutant.files {
        let path = ws.join(rel);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let nb_path = ws.join(notebook_name);
    fs::write(&nb_path, serialize_notebook(&mutant.notebook)).map_err(|e| Error::io(&nb_path, e))?;
    let record = ws.join(MUTANT_RECORD);
    let json = serde_json::to_vec_pretty(&mutant.spec)?;
    fs::write(&record, json).map_err(|e| Error::io(&record, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "verdict")]
pub enum RunVerdict {
    /// At least one assertion failed; the failing test ids.
    Killed { failing: BTreeSet<String> },
    Survived,
    /// Run ended abnormally without an assertion failure.
    Excluded { exit: RunExit },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MutantOutcome {
    pub spec: MutantSpec,
    pub runs: Vec<RunVerdict>,
}

pub fn verdict(exit: RunExit, events: &[Event]) -> RunVerdict {
    let failing: BTreeSet<String> = events
        .iter()
        .filter_map(|e| match e {
            Event::Assert { test_id, status: AssertStatus::Fail, .. } => Some(test_id.clone()),
            _ => None,
        })
        .collect();
    if !failing.is_empty() {
        RunVerdict::Killed { failing }
    } else if exit != RunExit::Ok {
        RunVerdict::Excluded { exit }
    } else {
        RunVerdict::Survived
    }
}

/// Executes a materialized mutant `runs` times with assertions enabled.
pub fn run_mutant(
    mutant: &Mutant,
    runs: usize,
    cfg: &RunConfig,
    exec: &ExecutorCommand,
) -> Result<MutantOutcome> {
    let ws = &mutant.spec.workspace;
    let mut cfg = cfg.clone();
    cfg.iterations = runs;
    cfg.workspace = ws.join("runs");
    cfg.source_dir = Some(ws.clone());
    let jobs = (0..runs)
        .map(|i| Job {
            run_index: i,
            notebook: mutant.notebook.clone(),
            seed: cfg.seed_for(i),
            asserts_enabled: true,
        })
        .collect();
    let raw = run_jobs(&cfg, &cfg.workspace.clone(), exec, jobs)?;
    Ok(MutantOutcome {
        spec: mutant.spec.clone(),
        runs: raw.iter().map(|r| verdict(r.exit, &r.events)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MutantScore {
    pub mutant_id: String,
    pub operator: Operator,
    pub site: String,
    pub runs: usize,
    pub killed_runs: usize,
    pub excluded_runs: usize,
    /// Killed runs over counted (non-excluded) runs.
    pub kill_fraction: Option<f64>,
    pub killing_assertion_kinds: BTreeSet<AssertionKind>,
    pub killing_property_kinds: BTreeSet<PropertyKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MutationReport {
    pub mutants: Vec<MutantScore>,
    pub per_operator: BTreeMap<Operator, Option<f64>>,
    /// m = (1/M) Σ kill_fraction_i over mutants with a defined fraction.
    pub mutation_score: Option<f64>,
    /// Mutants killed by at least one assertion of each kind.
    pub by_assertion_kind: BTreeMap<AssertionKind, usize>,
    pub by_property_kind: BTreeMap<PropertyKind, usize>,
    pub skipped: Vec<Skipped>,
}

/// Property kind an assertion kind checks when no provenance is recorded.
pub fn default_property_kind(kind: AssertionKind) -> PropertyKind {
    match kind {
        AssertionKind::ModelLayers => PropertyKind::ModelArch,
        AssertionKind::AllClose | AssertionKind::Equal | AssertionKind::True | AssertionKind::False => {
            PropertyKind::ModelPerf
        }
        _ => PropertyKind::Dataset,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Reduces outcomes to scores. `assertion_kinds` and `property_kinds` map
/// test ids to what they check.
pub fn score(
    outcomes: &[MutantOutcome],
    assertion_kinds: &BTreeMap<String, AssertionKind>,
    property_kinds: &BTreeMap<String, PropertyKind>,
    skipped: Vec<Skipped>,
) -> MutationReport {
    let mut mutants = Vec::new();
    let mut by_assertion_kind = BTreeMap::new();
    let mut by_property_kind = BTreeMap::new();
    for o in outcomes {
        let killed_runs = o.runs.iter().filter(|r| matches!(r, RunVerdict::Killed { .. })).count();
        let excluded_runs = o.runs.iter().filter(|r| matches!(r, RunVerdict::Excluded { .. })).count();
        let counted = o.runs.len() - excluded_runs;
        let failing: BTreeSet<&String> = o
            .runs
            .iter()
            .filter_map(|r| match r {
                RunVerdict::Killed { failing } => Some(failing),
                _ => None,
            })
            .flatten()
            .collect();
        let akinds: BTreeSet<AssertionKind> =
            failing.iter().filter_map(|id| assertion_kinds.get(*id).copied()).collect();
        let pkinds: BTreeSet<PropertyKind> = failing
            .iter()
            .filter_map(|id| {
                property_kinds
                    .get(*id)
                    .copied()
                    .or_else(|| assertion_kinds.get(*id).map(|k| default_property_kind(*k)))
            })
            .collect();
        for k in &akinds {
            *by_assertion_kind.entry(*k).or_insert(0) += 1;
        }
        for k in &pkinds {
            *by_property_kind.entry(*k).or_insert(0) += 1;
        }
        mutants.push(MutantScore {
            mutant_id: o.spec.mutant_id.clone(),
            operator: o.spec.operator,
            site: o.spec.site.clone(),
            runs: o.runs.len(),
            killed_runs,
            excluded_runs,
            kill_fraction: (counted > 0).then(|| killed_runs as f64 / counted as f64),
            killing_assertion_kinds: akinds,
            killing_property_kinds: pkinds,
        });
    }
    let mut per_operator = BTreeMap::new();
    let ops: BTreeSet<Operator> = mutants.iter().map(|m| m.operator).collect();
    for op in ops {
        per_operator.insert(
            op,
            mean(mutants.iter().filter(|m| m.operator == op).filter_map(|m| m.kill_fraction)),
        );
    }
    MutationReport {
        mutation_score: mean(mutants.iter().filter_map(|m| m.kill_fraction)),
        mutants,
        per_operator,
        by_assertion_kind,
        by_property_kind,
        skipped,
    }
}

/// Materializes and runs every mutant against a notebook carrying
/// assertions, then scores the suite.
pub fn score_mutants(
    mutants: &[Mutant],
    skipped: Vec<Skipped>,
    runs: usize,
    cfg: &RunConfig,
    exec: &ExecutorCommand,
    property_kinds: &BTreeMap<String, PropertyKind>,
) -> Result<MutationReport> {
    let mut outcomes = Vec::new();
    let mut assertion_kinds = BTreeMap::new();
    for m in mutants {
        for a in collect_assertions(&m.notebook) {
            assertion_kinds.insert(a.test_id, a.kind);
        }
        materialize(m, cfg.source_dir.as_deref(), &cfg.notebook_name)?;
        let outcome = run_mutant(m, runs, cfg, exec)?;
        let killed = outcome.runs.iter().filter(|r| matches!(r, RunVerdict::Killed { .. })).count();
        info!("{}: killed in {killed}/{runs} runs", m.spec.mutant_id);
        if outcome.runs.iter().all(|r| matches!(r, RunVerdict::Excluded { .. })) {
            warn!("{}: every run ended abnormally", m.spec.mutant_id);
        }
        outcomes.push(outcome);
    }
    Ok(score(&outcomes, &assertion_kinds, property_kinds, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(id: &str, op: Operator, runs: Vec<RunVerdict>) -> MutantOutcome {
        MutantOutcome {
            spec: MutantSpec {
                mutant_id: id.into(),
                operator: op,
                seed: 0,
                site: String::new(),
                workspace: PathBuf::new(),
            },
            runs,
        }
    }

    fn killed(id: &str) -> RunVerdict {
        RunVerdict::Killed { failing: [id.to_string()].into() }
    }

    fn fraction_runs(killed_n: usize, total: usize, id: &str) -> Vec<RunVerdict> {
        (0..total)
            .map(|i| if i < killed_n { killed(id) } else { RunVerdict::Survived })
            .collect()
    }

    #[test]
    fn paper_arithmetic() {
        let outs = vec![
            outcome("a", Operator::AddNulls, fraction_runs(8, 10, "0_0")),
            outcome("b", Operator::SwapApis, fraction_runs(5, 10, "0_0")),
        ];
        let rep = score(&outs, &BTreeMap::new(), &BTreeMap::new(), vec![]);
        assert!((rep.mutation_score.unwrap() - 0.65).abs() < 1e-12);
        assert_eq!(rep.per_operator[&Operator::AddNulls], Some(0.8));
    }

    #[test]
    fn never_killed_is_zero() {
        let outs = vec![outcome("a", Operator::AddNulls, fraction_runs(0, 5, "x"))];
        assert_eq!(score(&outs, &BTreeMap::new(), &BTreeMap::new(), vec![]).mutation_score, Some(0.0));
    }

    #[test]
    fn attribution_by_kind() {
        let kinds: BTreeMap<String, AssertionKind> =
            [("0_3".to_string(), AssertionKind::DfMean)].into();
        let outs = vec![outcome("a", Operator::AddOutliers, fraction_runs(3, 3, "0_3"))];
        let rep = score(&outs, &kinds, &BTreeMap::new(), vec![]);
        assert_eq!(rep.by_property_kind.get(&PropertyKind::Dataset), Some(&1));
        assert_eq!(rep.by_assertion_kind.get(&AssertionKind::DfMean), Some(&1));
        assert_eq!(rep.by_property_kind.get(&PropertyKind::ModelPerf), None);
    }

    #[test]
    fn crashes_excluded_unless_assertion_failed() {
        let v = verdict(RunExit::CellError, &[]);
        assert_eq!(v, RunVerdict::Excluded { exit: RunExit::CellError });
        let ev = Event::Assert { test_id: "1_0".into(), status: AssertStatus::Fail, msg: None };
        assert!(matches!(verdict(RunExit::CellError, &[ev]), RunVerdict::Killed { .. }));
        let outs = vec![outcome(
            "a",
            Operator::AddNulls,
            vec![killed("x"), RunVerdict::Excluded { exit: RunExit::Crash }, RunVerdict::Survived],
        )];
        let rep = score(&outs, &BTreeMap::new(), &BTreeMap::new(), vec![]);
        assert_eq!(rep.mutants[0].kill_fraction, Some(0.5));
        assert_eq!(rep.mutants[0].excluded_runs, 1);
    }
}
