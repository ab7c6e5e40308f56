mod common;

use std::collections::BTreeMap;

use common::{config, read_fixture, sim_driver, stub, workspace_with};
use nbtest_core::catalog::ApiCatalog;
use nbtest_core::notebook::{Cell, Notebook};
use nbtest_core::pipeline::generate;
use nbtest_core::runner::collect_assertions;
use nbtest_core::versions::{
    evaluate_versions, match_cells, transfer_assertions, MatchKind, SkipReason, VersionInput,
};

/// heart_classification with assertions from the simulated driver.
fn source_with_assertions() -> Notebook {
    let tmp = workspace_with(&["heart_classification.ipynb", "heart.csv"]);
    let mut cfg = config(&tmp.path().join(".nbtest"), 3);
    cfg.source_dir = Some(tmp.path().to_path_buf());
    let nb = read_fixture("heart_classification.ipynb");
    generate(&nb, "h.ipynb", &ApiCatalog::builtin(), &cfg, &sim_driver(&[]), 0.99, "").unwrap().0
}

fn edit(nb: &Notebook, cell: usize, from: &str, to: &str) -> Notebook {
    let mut out = nb.clone();
    assert!(out.cells[cell].source.contains(from));
    out.cells[cell].source = out.cells[cell].source.replace(from, to);
    out
}

#[test]
fn identical_version_transfers_everything() {
    let src = source_with_assertions();
    let dst = read_fixture("heart_classification.ipynb");
    let m = match_cells(&src, &dst);
    assert!(m.pairs.iter().all(|p| p.2 == MatchKind::Identical));
    assert_eq!(m.pairs.len(), 6);
    let t = transfer_assertions(&src, &dst, &m).unwrap();
    assert_eq!(t.transfer_ratio, Some(1.0));
    assert_eq!(t.notebook, src);
    // Matching is symmetric on identical inputs.
    let back = match_cells(&dst, &src);
    let flipped: Vec<_> = back.pairs.iter().map(|p| (p.1, p.0, p.2)).collect();
    let mut flipped = flipped;
    flipped.sort();
    assert_eq!(flipped, m.pairs);
}

#[test]
fn comment_and_hyperparameter_edits() {
    let src = source_with_assertions();
    let base = read_fixture("heart_classification.ipynb");
    let dst = edit(&base, 5, "C=1.0", "C=0.5");
    let dst = edit(&dst, 2, "df.head()", "df.head()  # peek");
    let m = match_cells(&src, &dst);
    assert!(m.pairs.contains(&(3, 2, MatchKind::Identical)));
    assert!(m.pairs.contains(&(6, 5, MatchKind::AstSimilar)));
    let t = transfer_assertions(&src, &dst, &m).unwrap();
    // The model cell's anchor statement changed, so its assertion is skipped.
    let skipped: Vec<&str> = t.skipped.iter().map(|(id, _)| id.as_str()).collect();
    let model_ids: Vec<String> = collect_assertions(&src)
        .into_iter()
        .filter(|a| a.cell_index == 6)
        .map(|a| a.test_id)
        .collect();
    assert_eq!(skipped, model_ids.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(t.skipped.iter().all(|(_, r)| *r == SkipReason::NoAnchor));
    // Destination logic is untouched.
    assert_eq!(t.notebook.strip(), dst);
}

#[test]
fn renamed_variable_blocks_transfer() {
    let src = source_with_assertions();
    let base = read_fixture("heart_classification.ipynb");
    let dst = edit(&base, 3, "df = df.dropna()\nX = df.drop(columns=['target'])\ny = df['target']", "clean = df.dropna()\nX = clean.drop(columns=['target'])\ny = clean['target']");
    let m = match_cells(&src, &dst);
    assert!(m.unmatched_new.contains(&3));
    let t = transfer_assertions(&src, &dst, &m).unwrap();
    let cell3: Vec<String> = collect_assertions(&src)
        .into_iter()
        .filter(|a| a.cell_index == 4)
        .map(|a| a.test_id)
        .collect();
    assert!(!cell3.is_empty());
    for id in &cell3 {
        assert!(t.skipped.contains(&(id.clone(), SkipReason::NoCell)), "{id}");
    }
    let total = collect_assertions(&src).len();
    assert_eq!(t.transferred.len() + t.skipped.len(), total);
    assert!((t.transfer_ratio.unwrap() - (total - cell3.len()) as f64 / total as f64).abs() < 1e-12);
}

/// Driver that fails every assertion when the notebook contains `BROKEN`.
const FAILING_DRIVER: &str = r#"for nb; do :; done
ids=$(grep -o "test_id='[0-9_]*'" "$nb" | sed "s/test_id='\(.*\)'/\1/")
status=pass
grep -q BROKEN "$nb" && status=fail
for id in $ids; do
  echo "{\"ev\":\"assert\",\"test_id\":\"$id\",\"status\":\"$status\"}" >> "$NBTEST_EVENT_PATH"
done
echo '{"ev":"done"}' >> "$NBTEST_EVENT_PATH""#;

fn version(name: &str, nb: Notebook) -> VersionInput {
    VersionInput { version: name.into(), notebook: nb, source_dir: None }
}

#[test]
fn kill_counts_over_versions() {
    let tmp = tempfile::tempdir().unwrap();
    let exec = stub(tmp.path(), "drv.sh", FAILING_DRIVER);
    let with = Notebook::new(vec![
        Cell::code("x = 1\nnbtest.assert_allclose(x, 1.0, atol=0.0, test_id='0_0')  # nbtest:generated"),
    ]);
    let broken = {
        let mut n = with.clone();
        n.cells[0].source = n.cells[0].source.replace("x = 1", "x = 2  # BROKEN");
        n
    };
    let without = Notebook::new(vec![Cell::code("x = 1")]);
    let groups: BTreeMap<String, Vec<VersionInput>> = [
        (
            "a".to_string(),
            vec![version("v1", broken.clone()), version("v2", with.clone()), version("v3", broken.clone())],
        ),
        ("b".to_string(), vec![version("v1", broken.clone()), version("v2", without)]),
    ]
    .into();
    let (m, outcomes) = evaluate_versions(&groups, 3, &config(&tmp.path().join("ws"), 1), &exec).unwrap();
    assert_eq!(m.versions_total, 4);
    assert_eq!(m.versions_killed, 3);
    assert_eq!(m.versions_unkillable, 1);
    assert_eq!(m.notebooks_any_killed, 2);
    assert_eq!(m.notebooks_all_killed, 1);
    assert!(m.notebooks_all_killed <= m.notebooks_any_killed);
    let a: Vec<bool> = outcomes["a"].iter().map(|v| v.killed()).collect();
    assert_eq!(a, vec![true, false, true]);
}
