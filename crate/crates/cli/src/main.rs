use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use nbtest_core::catalog::{load_catalog, ApiCatalog};
use nbtest_core::config::{ConfigLayer, ToolConfig, CONFIG_FILE};
use nbtest_core::finder::find_properties;
use nbtest_core::harness::{ExecutorCommand, RunConfig, WORK_DIR};
use nbtest_core::mutation::{generate_mutants, score_mutants, Operator};
use nbtest_core::notebook::{parse_notebook, serialize_notebook, Notebook};
use nbtest_core::pipeline::{assertion_property_kinds, generate};
use nbtest_core::report::{render_report, ReportFormat};
use nbtest_core::runner::run_tests;
use nbtest_core::versions::{evaluate_versions, match_cells, transfer_assertions, VersionInput};
use nbtest_core::Error;

/// Exit status for failures that are not test failures.
const EXIT_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "nbtest", version, about = "Regression assertions for computational notebooks")]
struct Cli {
    /// Configuration file (default: ./nbtest.config.json when present).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List tracked properties found in a notebook.
    Analyze {
        notebook: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PlainFormat::Text)]
        format: PlainFormat,
    },
    /// Execute a notebook repeatedly and inject regression assertions.
    Gen {
        notebook: PathBuf,
        #[command(flatten)]
        exec: ExecFlags,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        confidence: Option<f64>,
        /// Output notebook (default: <stem>.nbtest.ipynb).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generation report (default: <stem>.nbtest.json).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the injected assertions and report per-assertion results.
    Run {
        notebook: PathBuf,
        #[command(flatten)]
        exec: ExecFlags,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_enum, default_value_t = TestFormat::Text)]
        format: TestFormat,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate mutants and score the notebook's assertions against them.
    Mutate {
        notebook: PathBuf,
        #[command(flatten)]
        exec: ExecFlags,
        /// `all` or a comma-separated operator list.
        #[arg(long, default_value = "all")]
        operators: String,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, default_value_t = 4)]
        max_per_op: usize,
        /// Directory holding the notebook's data files (default: its directory).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Copy assertions from one notebook version onto another.
    Transfer {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the assertions of every version under <group>/<notebook>/<version>.ipynb.
    EvalVersions {
        #[arg(long)]
        group: PathBuf,
        #[command(flatten)]
        exec: ExecFlags,
        #[arg(long)]
        runs: Option<usize>,
        /// Version stem holding assertions; transferred into its siblings first.
        #[arg(long)]
        transfer_from: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Remove everything the tool added to a notebook.
    Strip {
        notebook: PathBuf,
        /// Output path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExecFlags {
    /// Driver command; the notebook path is appended.
    #[arg(long)]
    executor: Option<String>,
    /// Per-run timeout in seconds.
    #[arg(long)]
    timeout: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Working directory for runs (default: .nbtest/<stem> next to the notebook).
    #[arg(long)]
    workdir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlainFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum TestFormat {
    Text,
    Json,
    Junit,
}

impl From<TestFormat> for ReportFormat {
    fn from(f: TestFormat) -> Self {
        match f {
            TestFormat::Text => ReportFormat::Text,
            TestFormat::Json => ReportFormat::Json,
            TestFormat::Junit => ReportFormat::Junit,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("nbtest: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn read_notebook(path: &Path) -> Result<Notebook, Error> {
    let bytes = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_notebook(&bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "notebook".into(), |n| n.to_string_lossy().into_owned())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// `nb.ipynb` -> `nb.nbtest.<ext>` next to it.
fn sibling(path: &Path, ext: &str) -> PathBuf {
    parent_dir(path).join(format!("{}.nbtest.{ext}", stem(path)))
}

fn load_config(explicit: Option<&Path>, flags: ConfigLayer) -> Result<ToolConfig, Error> {
    let file = match explicit {
        Some(p) if !p.exists() => return Err(Error::Config(format!("{}: no such file", p.display()))),
        Some(p) => ConfigLayer::load(p)?,
        None => ConfigLayer::load(Path::new(CONFIG_FILE))?,
    };
    ToolConfig::resolve(&file, &flags)
}

fn flags_layer(exec: Option<&ExecFlags>) -> ConfigLayer {
    let mut layer = ConfigLayer::default();
    if let Some(f) = exec {
        layer.executor = f.executor.clone();
        layer.timeout_seconds = f.timeout;
        layer.jobs = f.jobs;
        layer.seed = f.seed;
        layer.catalog_path = f.catalog.clone();
    }
    layer
}

fn catalog_for(cfg: &ToolConfig) -> Result<ApiCatalog, Error> {
    match &cfg.catalog_path {
        Some(p) => load_catalog(p),
        None => Ok(ApiCatalog::builtin()),
    }
}

fn workdir(exec: &ExecFlags, notebook: &Path) -> PathBuf {
    exec.workdir
        .clone()
        .unwrap_or_else(|| parent_dir(notebook).join(WORK_DIR).join(stem(notebook)))
}

fn run_config(cfg: &ToolConfig, workspace: PathBuf, notebook: &Path) -> RunConfig {
    let mut rc = cfg.run_config(workspace);
    rc.source_dir = Some(parent_dir(notebook));
    rc.notebook_name = file_name(notebook);
    rc
}

fn dispatch(cli: Cli) -> Result<u8, Error> {
    let config_path = cli.config.clone();
    match cli.command {
        Command::Analyze { notebook, catalog, format } => {
            let mut flags = ConfigLayer::default();
            flags.catalog_path = catalog;
            let cfg = load_config(config_path.as_deref(), flags)?;
            let nb = read_notebook(&notebook)?;
            let report = find_properties(&nb.strip(), &catalog_for(&cfg)?);
            match format {
                PlainFormat::Text => print!("{}", report.render_text()),
                PlainFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            Ok(0)
        }
        Command::Gen { notebook, exec, iterations, confidence, out, report } => {
            let mut flags = flags_layer(Some(&exec));
            flags.iterations = iterations;
            flags.confidence = confidence;
            let cfg = load_config(config_path.as_deref(), flags)?;
            let nb = read_notebook(&notebook)?;
            let rc = run_config(&cfg, workdir(&exec, &notebook).join("gen"), &notebook);
            let executor = ExecutorCommand::parse(&cfg.executor)?;
            let (injected, rep) =
                generate(&nb, &file_name(&notebook), &catalog_for(&cfg)?, &rc, &executor, cfg.confidence, &cfg.header())?;
            let out = out.unwrap_or_else(|| sibling(&notebook, "ipynb"));
            let report = report.unwrap_or_else(|| sibling(&notebook, "json"));
            write_file(&out, &serialize_notebook(&injected))?;
            write_json(&report, &rep)?;
            println!(
                "{}: {} assertions for {} properties from {}/{} ok runs -> {}",
                file_name(&notebook),
                rep.assertions.len(),
                rep.analysis.properties.len(),
                rep.runs_total - rep.runs_failed,
                rep.runs_total,
                out.display()
            );
            Ok(0)
        }
        Command::Run { notebook, exec, runs, format, out } => {
            let mut flags = flags_layer(Some(&exec));
            flags.runs = runs;
            let cfg = load_config(config_path.as_deref(), flags)?;
            info!("{}", cfg.header());
            let nb = read_notebook(&notebook)?;
            let rc = run_config(&cfg, workdir(&exec, &notebook).join("run"), &notebook);
            let executor = ExecutorCommand::parse(&cfg.executor)?;
            let rep = run_tests(&nb, &file_name(&notebook), cfg.runs, &rc, &executor)?;
            let bytes = render_report(&rep, format.into());
            match out {
                Some(path) => {
                    write_file(&path, &bytes)?;
                    print!("{}", String::from_utf8_lossy(&render_report(&rep, ReportFormat::Text)));
                }
                None => std::io::stdout().write_all(&bytes).map_err(|e| Error::Config(e.to_string()))?,
            }
            Ok(rep.exit_code() as u8)
        }
        Command::Mutate { notebook, exec, operators, runs, max_per_op, data_dir, report } => {
            let mut flags = flags_layer(Some(&exec));
            flags.runs = runs;
            let cfg = load_config(config_path.as_deref(), flags)?;
            let operators: Vec<Operator> = Operator::parse_list(&operators)?;
            let nb = read_notebook(&notebook)?;
            let catalog = catalog_for(&cfg)?;
            let data_dir = data_dir.unwrap_or_else(|| parent_dir(&notebook));
            let out_root = workdir(&exec, &notebook);
            let (mutants, skipped) = generate_mutants(
                &nb,
                Some(&data_dir),
                &out_root,
                &operators,
                &catalog,
                &cfg.mutation,
                cfg.seed,
                max_per_op,
            )?;
            for s in &skipped {
                warn!("{} skipped on {}: {}", s.operator.as_str(), s.target, s.reason);
            }
            let mut rc = run_config(&cfg, out_root.clone(), &notebook);
            rc.source_dir = Some(data_dir);
            let executor = ExecutorCommand::parse(&cfg.executor)?;
            let kinds = assertion_property_kinds(&nb, &catalog);
            let rep = score_mutants(&mutants, skipped, cfg.runs, &rc, &executor, &kinds)?;
            let report = report.unwrap_or_else(|| out_root.join("mutation.json"));
            write_json(&report, &rep)?;
            let score = rep.mutation_score.map_or("n/a".to_string(), |m| format!("{m:.4}"));
            println!("{}: {} mutants, mutation score {score}", file_name(&notebook), rep.mutants.len());
            for (op, s) in &rep.per_operator {
                println!("  {:<18} {}", op.as_str(), s.map_or("n/a".to_string(), |m| format!("{m:.4}")));
            }
            Ok(0)
        }
        Command::Transfer { from, to, out, report } => {
            let src = read_notebook(&from)?;
            let dst = read_notebook(&to)?;
            let matching = match_cells(&src, &dst);
            let result = transfer_assertions(&src, &dst, &matching)?;
            write_file(&out, &serialize_notebook(&result.notebook))?;
            if let Some(path) = report {
                write_json(&path, &serde_json::json!({ "matching": matching, "transfer": result }))?;
            }
            let ratio = result.transfer_ratio.map_or("n/a".to_string(), |r| format!("{r:.4}"));
            println!(
                "{} -> {}: {} transferred, {} skipped, ratio {ratio}",
                file_name(&from),
                file_name(&to),
                result.transferred.len(),
                result.skipped.len()
            );
            for (id, reason) in &result.skipped {
                println!("  skipped {id}: {}", serde_json::to_value(reason)?.as_str().unwrap_or_default());
            }
            Ok(0)
        }
        Command::EvalVersions { group, exec, runs, transfer_from, report } => {
            let mut flags = flags_layer(Some(&exec));
            flags.runs = runs;
            let cfg = load_config(config_path.as_deref(), flags)?;
            let groups = load_group(&group, transfer_from.as_deref())?;
            let ws = exec.workdir.clone().unwrap_or_else(|| group.join(WORK_DIR));
            let rc = cfg.run_config(ws);
            let executor = ExecutorCommand::parse(&cfg.executor)?;
            let (metrics, outcomes) = evaluate_versions(&groups, cfg.runs, &rc, &executor)?;
            if let Some(path) = report {
                write_json(&path, &serde_json::json!({ "metrics": metrics, "versions": outcomes }))?;
            }
            println!(
                "versions killed {}/{} ({} unkillable); notebooks any-killed {}/{}, all-killed {}/{}",
                metrics.versions_killed,
                metrics.versions_total,
                metrics.versions_unkillable,
                metrics.notebooks_any_killed,
                metrics.notebooks_total,
                metrics.notebooks_all_killed,
                metrics.notebooks_total
            );
            Ok(0)
        }
        Command::Strip { notebook, out } => {
            let nb = read_notebook(&notebook)?;
            let bytes = serialize_notebook(&nb.strip());
            match out {
                Some(path) => write_file(&path, &bytes)?,
                None => std::io::stdout().write_all(&bytes).map_err(|e| Error::Config(e.to_string()))?,
            }
            Ok(0)
        }
    }
}

/// Reads `<group>/<notebook>/<version>.ipynb`. With `transfer_from`, that
/// version's assertions are transferred onto the other versions, which are
/// then evaluated; the source version itself is not.
fn load_group(group: &Path, transfer_from: Option<&str>) -> Result<BTreeMap<String, Vec<VersionInput>>, Error> {
    let mut out = BTreeMap::new();
    let read_dir = |dir: &Path| -> Result<Vec<PathBuf>, Error> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        Ok(entries)
    };
    for nb_dir in read_dir(group)?.into_iter().filter(|p| p.is_dir()) {
        let name = file_name(&nb_dir);
        if name.starts_with('.') {
            continue;
        }
        let files: Vec<PathBuf> = read_dir(&nb_dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "ipynb"))
            .collect();
        let source = match transfer_from {
            Some(s) => {
                let path = nb_dir.join(format!("{s}.ipynb"));
                if !path.exists() {
                    warn!("{name}: no {s}.ipynb, skipped");
                    continue;
                }
                Some(read_notebook(&path)?)
            }
            None => None,
        };
        let mut versions = Vec::new();
        for path in files {
            let version = stem(&path);
            if Some(version.as_str()) == transfer_from {
                continue;
            }
            let nb = read_notebook(&path)?;
            let nb = match &source {
                Some(src) => {
                    let t = transfer_assertions(src, &nb, &match_cells(src, &nb))?;
                    info!("{name}/{version}: transferred {} of {}", t.transferred.len(), t.transferred.len() + t.skipped.len());
                    t.notebook
                }
                None => nb,
            };
            versions.push(VersionInput { version, notebook: nb, source_dir: Some(nb_dir.clone()) });
        }
        if !versions.is_empty() {
            out.insert(name, versions);
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{}: no notebook versions found", group.display())));
    }
    Ok(out)
}
