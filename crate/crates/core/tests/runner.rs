mod common;

use common::{config, stub};
use nbtest_core::notebook::{Cell, Notebook};
use nbtest_core::report::{render_report, ReportFormat};
use nbtest_core::runner::{run_tests, AssertionStatus};

fn nb_with(ids: &[(usize, &str)]) -> Notebook {
    let mut cells = vec![Cell::code("x = 1"), Cell::code("y = 2"), Cell::code("z = 3")];
    for (cell, id) in ids {
        cells[*cell]
            .source
            .push_str(&format!("\nnbtest.assert_allclose(x, 1.0, atol=0.0, test_id='{id}')  # nbtest:generated"));
    }
    Notebook::new(cells)
}

fn emit(lines: &[&str]) -> String {
    lines
        .iter()
        .map(|l| format!("echo '{l}' >> \"$NBTEST_EVENT_PATH\""))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn failure_in_one_run_gives_point_nine() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        "[ \"$NBTEST_ASSERTS\" = 1 ] || exit 3\n{}\nif [ \"$NBTEST_SEED\" = 0 ]; then {}; else {}; fi\n{}",
        emit(&[r#"{"ev":"assert","test_id":"0_0","status":"pass"}"#]),
        emit(&[r#"{"ev":"assert","test_id":"0_1","status":"fail","msg":"expected 1.0 got 2.0"}"#]),
        emit(&[r#"{"ev":"assert","test_id":"0_1","status":"pass"}"#]),
        emit(&[r#"{"ev":"done"}"#]),
    );
    let exec = stub(tmp.path(), "drv.sh", &body);
    let nb = nb_with(&[(0, "0_0"), (0, "0_1")]);
    let rep = run_tests(&nb, "nb.ipynb", 10, &config(&tmp.path().join("out"), 1), &exec).unwrap();
    assert_eq!(rep.passrate["0_0"], Some(1.0));
    assert_eq!(rep.passrate["0_1"], Some(0.9));
    assert_eq!(rep.overall_passrate, Some(19.0 / 20.0));
    assert_eq!(rep.exit_code(), 1);
    assert_eq!(rep.run_count, 10);
    // Passrate numerator equals the count of pass indicators.
    let passes = rep
        .per_run
        .iter()
        .flatten()
        .filter(|r| r.test_id == "0_1" && r.status == AssertionStatus::Pass)
        .count();
    assert_eq!(passes, 9);
    let text = String::from_utf8(render_report(&rep, ReportFormat::Text)).unwrap();
    assert!(text.contains("nb.ipynb::nbtest_id_0_1 FAILED (p=0.90)"));
    assert!(text.contains("nbtest_id_0_1 [run 0]: expected 1.0 got 2.0"));
}

#[test]
fn eighteen_of_thirty() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        "if [ \"$NBTEST_SEED\" -lt 18 ]; then {}; else {}; fi\n{}",
        emit(&[r#"{"ev":"assert","test_id":"1_0","status":"pass"}"#]),
        emit(&[r#"{"ev":"assert","test_id":"1_0","status":"fail"}"#]),
        emit(&[r#"{"ev":"done"}"#]),
    );
    let exec = stub(tmp.path(), "drv.sh", &body);
    let mut cfg = config(&tmp.path().join("out"), 1);
    cfg.parallelism = 4;
    let rep = run_tests(&nb_with(&[(1, "1_0")]), "nb", 30, &cfg, &exec).unwrap();
    assert_eq!(rep.passrate["1_0"], Some(0.6));
}

#[test]
fn zero_events_tolerated() {
    let tmp = tempfile::tempdir().unwrap();
    let exec = stub(tmp.path(), "drv.sh", &emit(&[r#"{"ev":"done"}"#]));
    let rep = run_tests(&nb_with(&[(0, "0_0")]), "nb", 3, &config(&tmp.path().join("out"), 1), &exec).unwrap();
    assert_eq!(rep.passrate["0_0"], None);
    assert_eq!(rep.overall_passrate, None);
    assert!(rep.per_run.iter().flatten().all(|r| r.status == AssertionStatus::NotReached));
    assert_eq!(rep.exit_code(), 0);
}

#[test]
fn all_pass_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let exec = stub(
        tmp.path(),
        "drv.sh",
        &emit(&[
            r#"{"ev":"assert","test_id":"0_0","status":"pass"}"#,
            r#"{"ev":"assert","test_id":"2_0","status":"pass"}"#,
            r#"{"ev":"done"}"#,
        ]),
    );
    let rep = run_tests(&nb_with(&[(0, "0_0"), (2, "2_0")]), "nb", 4, &config(&tmp.path().join("out"), 1), &exec)
        .unwrap();
    assert_eq!(rep.overall_passrate, Some(1.0));
    assert_eq!(rep.exit_code(), 0);
}

#[test]
fn assertions_after_crashed_cell_not_reached() {
    let tmp = tempfile::tempdir().unwrap();
    let exec = stub(
        tmp.path(),
        "drv.sh",
        &emit(&[
            r#"{"ev":"cell_start","cell":0}"#,
            r#"{"ev":"assert","test_id":"0_0","status":"pass"}"#,
            r#"{"ev":"cell_start","cell":1}"#,
            r#"{"ev":"cell_error","cell":1,"msg":"ZeroDivisionError"}"#,
            r#"{"ev":"cell_start","cell":2}"#,
            r#"{"ev":"done"}"#,
        ]),
    );
    let rep = run_tests(&nb_with(&[(0, "0_0"), (2, "2_0")]), "nb", 2, &config(&tmp.path().join("out"), 1), &exec)
        .unwrap();
    for run in &rep.per_run {
        assert_eq!(run[0].status, AssertionStatus::Pass);
        assert_eq!(run[1].status, AssertionStatus::NotReached);
    }
    assert_eq!(rep.passrate["2_0"], None);
    assert_eq!(rep.exit_code(), 0);
}

#[test]
fn runtime_error_status_counts_as_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let exec = stub(
        tmp.path(),
        "drv.sh",
        &emit(&[r#"{"ev":"assert","test_id":"0_0","status":"error","msg":"TypeError"}"#, r#"{"ev":"done"}"#]),
    );
    let rep = run_tests(&nb_with(&[(0, "0_0")]), "nb", 1, &config(&tmp.path().join("out"), 1), &exec).unwrap();
    assert_eq!(rep.per_run[0][0].status, AssertionStatus::Error);
    assert_eq!(rep.exit_code(), 1);
}
