//! Acceptance checks; one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use common::{config, fixture, read_fixture, sim_driver, stub, workspace_with};
use nbtest_core::bounds::{bound, chebyshev_k};
use nbtest_core::catalog::{ApiCatalog, PropertyKind};
use nbtest_core::finder::{find_properties, Context};
use nbtest_core::harness::{execute_runs, run_jobs, Job};
use nbtest_core::mutation::{
    generate_mutants, mutate_code, mutate_table, score, MutantOutcome, MutantSpec, MutationRates, Operator,
    RunVerdict,
};
use nbtest_core::notebook::{parse_notebook, serialize_notebook, Cell, Notebook};
use nbtest_core::pipeline::generate;
use nbtest_core::protocol::{RunExit, TraceSet};
use nbtest_core::runner::{collect_assertions, AssertionStatus};
use nbtest_core::synth::AssertionKind;
use nbtest_core::versions::{
    evaluate_versions, kill_metrics, match_cells, transfer_assertions, SkipReason, VersionInput, VersionOutcome,
};
use nbtest_core::Error;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn chebyshev_math() -> Result<String, String> {
    let start = Instant::now();
    for (c, k) in [(0.75, 2.0), (0.99, 10.0), (0.9999, 100.0)] {
        let got = chebyshev_k(c).map_err(|e| e.to_string())?;
        ensure!((got - k).abs() < 1e-9, "k({c}) = {got}, want {k}");
    }
    for c in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
        ensure!(matches!(chebyshev_k(c), Err(Error::Domain(_))), "k({c}) accepted");
    }
    let samples = [0.84, 0.86, 0.85, 0.87, 0.83];
    let b = bound(&samples, 0.99).map_err(|e| e.to_string())?;
    ensure!(b.atol == b.k * b.std, "atol {} != k*std {}", b.atol, b.k * b.std);
    let flat = bound(&[0.85; 30], 0.99).map_err(|e| e.to_string())?;
    ensure!(flat.atol == 0.0 && flat.mean == 0.85, "zero-variance bound {flat:?}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("k = 2, 10, 100; zero variance gives atol 0; {elapsed:.2?}"))
}

enum Gen {
    Normal(Normal<f64>),
    Uniform(Uniform<f64>),
    Bimodal(Normal<f64>, Normal<f64>),
}

impl Gen {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Gen::Normal(d) => d.sample(rng),
            Gen::Uniform(d) => d.sample(rng),
            Gen::Bimodal(a, b) => {
                if rng.gen_bool(0.5) {
                    a.sample(rng)
                } else {
                    b.sample(rng)
                }
            }
        }
    }
}

fn bound_coverage() -> Result<String, String> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for set in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + set);
        let scale = 0.5 + set as f64 * 0.25;
        let gen = match set % 3 {
            0 => Gen::Normal(Normal::new(set as f64, scale).unwrap()),
            1 => Gen::Uniform(Uniform::new(-scale, scale * 2.0)),
            _ => Gen::Bimodal(Normal::new(-2.0 * scale, 0.3).unwrap(), Normal::new(2.0 * scale, 0.3).unwrap()),
        };
        let samples: Vec<f64> = (0..30).map(|_| gen.draw(&mut rng)).collect();
        let b = bound(&samples, 0.99).map_err(|e| e.to_string())?;
        ensure!((b.k - 10.0).abs() < 1e-9, "k = {}", b.k);
        let held_out = 10_000;
        let violations = (0..held_out).filter(|_| (gen.draw(&mut rng) - b.mean).abs() > b.atol).count();
        let rate = violations as f64 / held_out as f64;
        ensure!(rate <= 0.03, "set {set}: violation rate {rate}");
        worst = worst.max(rate);
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("20 sets, worst violation rate {worst:.4}; {elapsed:.2?}"))
}

fn property_finding() -> Result<String, String> {
    let nb = read_fixture("finder_contexts.ipynb");
    let catalog = ApiCatalog::builtin();
    ensure!(nb.cells.len() == 6, "fixture has {} cells", nb.cells.len());
    let first = find_properties(&nb, &catalog);
    for _ in 0..9 {
        ensure!(find_properties(&nb, &catalog) == first, "non-deterministic result");
    }
    let count = |k: PropertyKind| first.properties.iter().filter(|p| p.kind == k).count();
    let counts = (count(PropertyKind::Dataset), count(PropertyKind::ModelArch), count(PropertyKind::ModelPerf));
    ensure!(counts == (5, 1, 2), "counts {counts:?}");
    let targets: Vec<&str> = first.properties.iter().map(|p| p.target.as_str()).collect();
    let want = [
        "df",
        "X_train",
        "X_test",
        "y_train",
        "y_test",
        "clf",
        "accuracy_score(y_test, pred)",
        "(check == y_test).mean()",
    ];
    ensure!(targets == want, "targets {targets:?}");
    for ctx in [Context::Assignment, Context::PrintArgument, Context::LastExpression] {
        ensure!(first.properties.iter().any(|p| p.context == ctx), "context {ctx:?} missing");
    }
    Ok("5 Dataset, 1 ModelArch, 2 ModelPerf over 3 contexts, stable over 10 repeats".into())
}

fn round_trip() -> Result<String, String> {
    let dir = fixture("");
    let mut names: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ipynb"))
        .collect();
    names.sort();
    ensure!(names.len() >= 10, "only {} fixtures", names.len());
    let catalog = ApiCatalog::builtin();
    let mut injected = 0;
    for path in &names {
        let bytes = fs::read(path).map_err(|e| e.to_string())?;
        let nb = parse_notebook(&bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure!(serialize_notebook(&nb) == bytes, "{}: not a fixed point", path.display());
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = config(tmp.path(), 3);
        cfg.source_dir = Some(dir.clone());
        let (with, _) = generate(&nb, "nb", &catalog, &cfg, &sim_driver(&[]), 0.99, "")
            .map_err(|e| format!("{}: {e}", path.display()))?;
        injected += collect_assertions(&with).len();
        ensure!(serialize_notebook(&with.strip()) == bytes, "{}: strip(inject) differs", path.display());
    }
    Ok(format!("{} fixtures byte-identical; {injected} injected assertions stripped cleanly", names.len()))
}

fn outcome(i: usize, killed: usize, total: usize) -> MutantOutcome {
    MutantOutcome {
        spec: MutantSpec {
            mutant_id: format!("m{i}"),
            operator: Operator::AddNulls,
            seed: 0,
            site: String::new(),
            workspace: PathBuf::new(),
        },
        runs: (0..total)
            .map(|r| {
                if r < killed {
                    RunVerdict::Killed { failing: ["0_0".to_string()].into() }
                } else {
                    RunVerdict::Survived
                }
            })
            .collect(),
    }
}

fn metrics_arithmetic() -> Result<String, String> {
    let rep = score(&[outcome(0, 8, 10), outcome(1, 5, 10)], &BTreeMap::new(), &BTreeMap::new(), Vec::new());
    let m = rep.mutation_score.ok_or("no score")?;
    ensure!((m - 0.65).abs() < 1e-12, "m = {m}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..1000 {
        let mut groups = BTreeMap::new();
        let (mut kv, mut total, mut any, mut all) = (0, 0, 0, 0);
        for g in 0..rng.gen_range(1..6) {
            let mut versions = Vec::new();
            let mut killed_here = 0;
            let mut killable = 0;
            for _ in 0..rng.gen_range(1..5) {
                let n_assert = rng.gen_range(0..4);
                let runs = rng.gen_range(1..6);
                let matrix: Vec<Vec<AssertionStatus>> = (0..runs)
                    .map(|_| {
                        (0..n_assert)
                            .map(|_| match rng.gen_range(0..10) {
                                0 => AssertionStatus::Fail,
                                1 => AssertionStatus::NotReached,
                                _ => AssertionStatus::Pass,
                            })
                            .collect()
                    })
                    .collect();
                if n_assert > 0 {
                    killable += 1;
                    // p < 1 for some assertion.
                    let dead = (0..n_assert).any(|a| {
                        let evaluated: Vec<_> =
                            matrix.iter().map(|r| r[a]).filter(|s| *s != AssertionStatus::NotReached).collect();
                        let pass = evaluated.iter().filter(|s| **s == AssertionStatus::Pass).count();
                        !evaluated.is_empty() && pass < evaluated.len()
                    });
                    killed_here += usize::from(dead);
                }
                versions.push(VersionOutcome {
                    version: String::new(),
                    assertion_kinds: vec![AssertionKind::Shape; n_assert],
                    matrix,
                });
            }
            total += killable;
            kv += killed_here;
            any += usize::from(killable > 0 && killed_here > 0);
            all += usize::from(killable > 0 && killed_here == killable);
            groups.insert(format!("nb{g}"), versions);
        }
        let got = kill_metrics(&groups);
        ensure!(
            (got.versions_killed, got.versions_total, got.notebooks_any_killed, got.notebooks_all_killed)
                == (kv, total, any, all),
            "trial {trial}: {got:?} vs K_V={kv} total={total} any={any} all={all}"
        );
    }
    Ok("kill fractions {0.8, 0.5} give m = 0.65; K_V/K_N agree with recount over 1000 trials".into())
}

fn harness_with_stubs() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let probe = r#"{"ev":"probe","id":"p0","kind":"ModelPerf","payload":{"type":"scalar","value":0.85}}"#;
    let exec = stub(
        tmp.path(),
        "probe.sh",
        &format!("printf '%s\\n%s\\n' '{probe}' '{{\"ev\":\"done\"}}' > \"$NBTEST_EVENT_PATH\""),
    );
    let nb = Notebook::new(vec![Cell::code("x = 1")]);
    let catalog = ApiCatalog::builtin();
    let report = find_properties(&nb, &catalog);
    let traces: TraceSet = execute_runs(&nb, &report, &catalog, &config(&tmp.path().join("a"), 5), &exec)
        .map_err(|e| e.to_string())?;
    let n = traces.samples.get("p0").map_or(0, Vec::len);
    ensure!(n == 5, "{n} samples");

    let slow = stub(tmp.path(), "slow.sh", "sleep 30 &\nwait");
    let mut cfg = config(&tmp.path().join("b"), 1);
    cfg.timeout = Duration::from_secs(1);
    let job = Job { run_index: 0, notebook: nb.clone(), seed: 0, asserts_enabled: false };
    let start = Instant::now();
    let runs = run_jobs(&cfg, &tmp.path().join("b/runs"), &slow, vec![job]).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(runs[0].exit == RunExit::Timeout, "exit {:?}", runs[0].exit);
    ensure!(elapsed < cfg.timeout + Duration::from_secs(1), "killed after {elapsed:?}");

    // A run that sees an earlier run's file reports a cell error.
    let src = tmp.path().join("src");
    fs::create_dir_all(&src).map_err(|e| e.to_string())?;
    fs::write(src.join("data.csv"), "a\n1\n").map_err(|e| e.to_string())?;
    let writer = stub(
        tmp.path(),
        "writer.sh",
        "if [ -e leftover ]; then echo '{\"ev\":\"cell_error\",\"cell\":0}' >> \"$NBTEST_EVENT_PATH\"; fi\n\
         touch leftover; echo 2 >> data.csv\n\
         echo '{\"ev\":\"done\"}' >> \"$NBTEST_EVENT_PATH\"",
    );
    let mut cfg = config(&tmp.path().join("c"), 4);
    cfg.parallelism = 1;
    cfg.source_dir = Some(src.clone());
    let jobs = (0..4).map(|i| Job { run_index: i, notebook: nb.clone(), seed: i as u32, asserts_enabled: false }).collect();
    let runs = run_jobs(&cfg, &tmp.path().join("c/runs"), &writer, jobs).map_err(|e| e.to_string())?;
    ensure!(runs.iter().all(|r| r.exit == RunExit::Ok), "a run saw another run's writes");
    ensure!(!src.join("leftover").exists(), "source directory modified");
    ensure!(fs::read_to_string(src.join("data.csv")).unwrap() == "a\n1\n", "source data modified");
    Ok(format!("5 runs -> 5 samples; timeout run killed after {elapsed:.2?}; runs isolated"))
}

fn mutation_determinism() -> Result<String, String> {
    let catalog = ApiCatalog::builtin();
    let rates = MutationRates::default();
    let mut count = 0;
    let fixtures = [
        "heart_classification.ipynb",
        "keras_regression.ipynb",
        "torch_training.ipynb",
        "loops_and_defs.ipynb",
        "seeded_pipeline.ipynb",
        "pipeline_api_swap.ipynb",
    ];
    for name in fixtures {
        let nb = read_fixture(name);
        for op in Operator::ALL.into_iter().filter(|o| !o.is_data()) {
            let a = mutate_code(&nb, op, &catalog, 17, 4).map_err(|e| e.to_string())?;
            let b = mutate_code(&nb, op, &catalog, 17, 4).map_err(|e| e.to_string())?;
            ensure!(a.len() == b.len(), "{name} {op}: mutant count differs");
            for (x, y) in a.iter().zip(&b) {
                ensure!(
                    serialize_notebook(&x.notebook) == serialize_notebook(&y.notebook),
                    "{name} {op}: bytes differ"
                );
                let cell: usize = x.site.split_whitespace().nth(1).and_then(|c| c.parse().ok()).ok_or("bad site")?;
                let line: usize = x
                    .site
                    .split_whitespace()
                    .nth(3)
                    .and_then(|c| c.trim_end_matches(':').parse().ok())
                    .ok_or("bad site")?;
                let changed: Vec<usize> =
                    (0..nb.cells.len()).filter(|&i| nb.cells[i].source != x.notebook.cells[i].source).collect();
                ensure!(changed == vec![cell], "{name} {}: cells {changed:?} changed", x.site);
                let before: Vec<&str> = nb.cells[cell].source.split('\n').collect();
                let after: Vec<&str> = x.notebook.cells[cell].source.split('\n').collect();
                let prefix = before.iter().zip(&after).take_while(|(p, q)| p == q).count();
                ensure!(prefix + 1 >= line, "{name} {}: edit above the site", x.site);
                count += 1;
            }
        }
    }
    let heart = fs::read(fixture("heart.csv")).map_err(|e| e.to_string())?;
    for op in Operator::ALL.into_iter().filter(|o| o.is_data()) {
        let a = mutate_table(&heart, op, 3, &rates).map_err(|e| e.to_string())?;
        let b = mutate_table(&heart, op, 3, &rates).map_err(|e| e.to_string())?;
        ensure!(a.bytes == b.bytes, "{op}: bytes differ");
        count += 1;
    }
    let nine = fs::read(fixture("nine_cols.csv")).map_err(|e| e.to_string())?;
    ensure!(
        matches!(mutate_table(&nine, Operator::AddNulls, 3, &rates), Err(Error::OperatorInapplicable { .. })),
        "AddNulls applied to a 9-column table"
    );
    // And through the generator, where it is reported as skipped.
    let tmp = workspace_with(&["pipeline_api_swap.ipynb", "nine_cols.csv"]);
    let (_, skipped) = generate_mutants(
        &read_fixture("pipeline_api_swap.ipynb"),
        Some(tmp.path()),
        &tmp.path().join("out"),
        &[Operator::AddNulls],
        &catalog,
        &rates,
        3,
        4,
    )
    .map_err(|e| e.to_string())?;
    ensure!(skipped.len() == 1, "skips {skipped:?}");
    Ok(format!("{count} mutants reproducible and single-site; 9-column AddNulls inapplicable"))
}

fn version_transfer() -> Result<String, String> {
    let tmp = workspace_with(&["heart_classification.ipynb", "heart.csv"]);
    let mut cfg = config(&tmp.path().join(".nbtest"), 3);
    cfg.source_dir = Some(tmp.path().to_path_buf());
    let base = read_fixture("heart_classification.ipynb");
    let (src, _) = generate(&base, "h", &ApiCatalog::builtin(), &cfg, &sim_driver(&[]), 0.99, "")
        .map_err(|e| e.to_string())?;
    let t = transfer_assertions(&src, &base, &match_cells(&src, &base)).map_err(|e| e.to_string())?;
    ensure!(t.transfer_ratio == Some(1.0), "identical ratio {:?}", t.transfer_ratio);

    let mut renamed = base.clone();
    renamed.cells[2].source = renamed.cells[2].source.replace("df = pd.read_csv", "frame = pd.read_csv").replace("df.head()", "frame.head()");
    let t = transfer_assertions(&src, &renamed, &match_cells(&src, &renamed)).map_err(|e| e.to_string())?;
    let cell_ids: Vec<String> =
        collect_assertions(&src).into_iter().filter(|a| a.cell_index == 3).map(|a| a.test_id).collect();
    ensure!(!cell_ids.is_empty(), "no assertions on the renamed cell");
    for id in &cell_ids {
        ensure!(
            t.skipped.iter().any(|(s, r)| s == id && matches!(r, SkipReason::NoCell | SkipReason::NoAnchor)),
            "{id} not skipped"
        );
    }
    ensure!(t.transfer_ratio.is_some_and(|r| r < 1.0), "ratio {:?}", t.transfer_ratio);

    let failing = stub(
        tmp.path(),
        "versions.sh",
        "for nb; do :; done\nstatus=pass\ngrep -q BROKEN \"$nb\" && status=fail\n\
         for id in $(grep -o \"test_id='[0-9_]*'\" \"$nb\" | sed \"s/test_id='\\(.*\\)'/\\1/\"); do\n\
         echo \"{\\\"ev\\\":\\\"assert\\\",\\\"test_id\\\":\\\"$id\\\",\\\"status\\\":\\\"$status\\\"}\" >> \"$NBTEST_EVENT_PATH\"; done\n\
         echo '{\"ev\":\"done\"}' >> \"$NBTEST_EVENT_PATH\"",
    );
    let broken = {
        let mut n = src.clone();
        n.cells[7].source.push_str("\n# BROKEN");
        n
    };
    let versions = vec![
        VersionInput { version: "v1".into(), notebook: broken.clone(), source_dir: None },
        VersionInput { version: "v2".into(), notebook: src.clone(), source_dir: None },
        VersionInput { version: "v3".into(), notebook: broken, source_dir: None },
    ];
    let groups = BTreeMap::from([("heart".to_string(), versions)]);
    let (m, _) = evaluate_versions(&groups, 2, &config(&tmp.path().join("ws"), 1), &failing).map_err(|e| e.to_string())?;
    ensure!(m.versions_killed == 2, "K_V = {}", m.versions_killed);
    Ok(format!("identical ratio 1.0; rename skipped {} assertions; K_V = 2 of 3", cell_ids.len()))
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 8] = [
        ("chebyshev-math", chebyshev_math),
        ("bound-coverage", bound_coverage),
        ("property-finding", property_finding),
        ("round-trip-reversibility", round_trip),
        ("metrics-arithmetic", metrics_arithmetic),
        ("harness-stub-executor", harness_with_stubs),
        ("mutation-determinism", mutation_determinism),
        ("version-transfer", version_transfer),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in checks {
        let result = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
