//! Text, JSON and JUnit renderings of a run report.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::Error;
use crate::runner::{AssertionStatus, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
    Junit,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            "junit" | "junit-xml" => Ok(ReportFormat::Junit),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Outcome of one assertion over all runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Passed,
    Failed,
    Errored,
    NotReached,
}

pub struct Row<'a> {
    pub test_id: &'a str,
    pub verdict: Verdict,
    pub passrate: Option<f64>,
    /// (run index, message) of failing evaluations.
    pub failures: Vec<(usize, &'a str)>,
}

pub fn rows(rep: &RunReport) -> Vec<Row<'_>> {
    let Some(first) = rep.per_run.first() else {
        return rep
            .passrate
            .keys()
            .map(|id| Row { test_id: id, verdict: Verdict::NotReached, passrate: None, failures: vec![] })
            .collect();
    };
    first
        .iter()
        .enumerate()
        .map(|(pos, r)| {
            let mut failures = Vec::new();
            let (mut fail, mut error, mut pass) = (false, false, false);
            for (run, results) in rep.per_run.iter().enumerate() {
                let res = &results[pos];
                match res.status {
                    AssertionStatus::Pass => pass = true,
                    AssertionStatus::Fail => fail = true,
                    AssertionStatus::Error => error = true,
                    AssertionStatus::NotReached => {}
                }
                if matches!(res.status, AssertionStatus::Fail | AssertionStatus::Error) {
                    failures.push((run, res.message.as_str()));
                }
            }
            let verdict = if fail {
                Verdict::Failed
            } else if error {
                Verdict::Errored
            } else if pass {
                Verdict::Passed
            } else {
                Verdict::NotReached
            };
            Row {
                test_id: &r.test_id,
                verdict,
                passrate: rep.passrate.get(&r.test_id).copied().flatten(),
                failures,
            }
        })
        .collect()
}

pub fn render_report(rep: &RunReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Text => render_text(rep).into_bytes(),
        ReportFormat::Json => {
            let mut v = serde_json::to_vec_pretty(rep).expect("report serialization");
            v.push(b'\n');
            v
        }
        ReportFormat::Junit => render_junit(rep).into_bytes(),
    }
}

fn render_text(rep: &RunReport) -> String {
    let rows = rows(rep);
    if rows.is_empty() {
        return format!("{}: no assertions collected\n", rep.notebook);
    }
    let mut out = String::new();
    for row in &rows {
        let label = match row.verdict {
            Verdict::Passed => "PASSED",
            Verdict::Failed => "FAILED",
            Verdict::Errored => "ERROR",
            Verdict::NotReached => "NOT REACHED",
        };
        write!(out, "{}::nbtest_id_{} {label}", rep.notebook, row.test_id).unwrap();
        if rep.run_count > 1 {
            if let Some(p) = row.passrate {
                write!(out, " (p={p:.2})").unwrap();
            }
        }
        out.push('\n');
    }
    let bad: Vec<&Row> = rows
        .iter()
        .filter(|r| matches!(r.verdict, Verdict::Failed | Verdict::Errored))
        .collect();
    if !bad.is_empty() {
        out.push_str("\n=== failures ===\n");
        for row in &bad {
            for (run, msg) in &row.failures {
                writeln!(out, "nbtest_id_{} [run {run}]: {msg}", row.test_id).unwrap();
            }
        }
    }
    let count = |v: Verdict| rows.iter().filter(|r| r.verdict == v).count();
    writeln!(
        out,
        "\n=== {} passed, {} failed, {} errors, {} not reached in {} run(s) ===",
        count(Verdict::Passed),
        count(Verdict::Failed),
        count(Verdict::Errored),
        count(Verdict::NotReached),
        rep.run_count
    )
    .unwrap();
    out
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c if (c as u32) < 0x20 && !matches!(c, '\n' | '\t' | '\r') => {}
            c => out.push(c),
        }
    }
    out
}

fn render_junit(rep: &RunReport) -> String {
    let rows = rows(rep);
    let count = |v: Verdict| rows.iter().filter(|r| r.verdict == v).count();
    let name = xml_escape(&rep.notebook);
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    writeln!(
        out,
        "<testsuites><testsuite name=\"{name}\" tests=\"{}\" failures=\"{}\" errors=\"{}\" skipped=\"{}\">",
        rows.len(),
        count(Verdict::Failed),
        count(Verdict::Errored),
        count(Verdict::NotReached)
    )
    .unwrap();
    for row in &rows {
        write!(
            out,
            "  <testcase classname=\"{name}\" name=\"nbtest_id_{}\"",
            xml_escape(row.test_id)
        )
        .unwrap();
        let detail = || {
            row.failures
                .iter()
                .map(|(run, m)| format!("run {run}: {m}"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        match row.verdict {
            Verdict::Passed => out.push_str("/>\n"),
            Verdict::Failed | Verdict::Errored => {
                let tag = if row.verdict == Verdict::Failed { "failure" } else { "error" };
                let first = row.failures.first().map_or("", |f| f.1);
                writeln!(
                    out,
                    "><{tag} message=\"{}\">{}</{tag}></testcase>",
                    xml_escape(first),
                    xml_escape(&detail())
                )
                .unwrap();
            }
            Verdict::NotReached => out.push_str("><skipped message=\"not reached\"/></testcase>\n"),
        }
    }
    out.push_str("</testsuite></testsuites>\n");
    out
}
