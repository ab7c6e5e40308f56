//! Repeated, isolated notebook execution through an external driver.

use std::fs;
use std::io::ErrorKind;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use walkdir::WalkDir;

use crate::catalog::ApiCatalog;
use crate::error::{Error, Result};
use crate::finder::AnalysisReport;
use crate::instrument::instrument;
use crate::notebook::{serialize_notebook, Notebook};
use crate::protocol::{
    parse_event_stream, scan_mixed_output, Event, RunExit, RunOutcome, TraceSet, ENV_ASSERTS,
    ENV_EVENT_PATH, ENV_HASH_SEED, ENV_SEED,
};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const STDOUT_FILE: &str = "stdout.log";
pub const STDERR_FILE: &str = "stderr.log";
const POLL: Duration = Duration::from_millis(10);

/// Driver invocation; the notebook path is appended as the last argument.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutorCommand {
    pub program: String,
    pub args: Vec<String>,
}

impl ExecutorCommand {
    pub fn parse(command: &str) -> Result<Self> {
        let words = shlex::split(command)
            .ok_or_else(|| Error::Config(format!("cannot split executor command {command:?}")))?;
        let (program, args) = words
            .split_first()
            .ok_or_else(|| Error::Config("empty executor command".into()))?;
        Ok(ExecutorCommand {
            program: program.clone(),
            args: args.to_vec(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub iterations: usize,
    pub timeout: Duration,
    /// Root for per-run directories (`<workspace>/runs/<i>/`).
    pub workspace: PathBuf,
    pub parallelism: usize,
    pub base_seed: u32,
    /// Directory copied into each run (data files); skipped when absent.
    pub source_dir: Option<PathBuf>,
    /// File name of the notebook inside a run directory.
    pub notebook_name: String,
}

impl RunConfig {
    pub fn new(workspace: impl Into<PathBuf>) -> Self {
        RunConfig {
            iterations: 30,
            timeout: Duration::from_secs(600),
            workspace: workspace.into(),
            parallelism: 1,
            base_seed: 0,
            source_dir: None,
            notebook_name: "notebook.ipynb".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be >= 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(Error::Config("timeout must be positive".into()));
        }
        Ok(())
    }

    pub fn seed_for(&self, run_index: usize) -> u32 {
        self.base_seed.wrapping_add(run_index as u32)
    }
}

/// One execution to perform.
#[derive(Debug, Clone)]
pub struct Job {
    pub run_index: usize,
    pub notebook: Notebook,
    pub seed: u32,
    pub asserts_enabled: bool,
}

#[derive(Debug, Clone)]
pub struct RawRun {
    pub run_index: usize,
    pub exit: RunExit,
    pub events: Vec<Event>,
    pub message: Option<String>,
    pub elapsed: Duration,
}

impl RawRun {
    pub fn outcome(&self) -> RunOutcome {
        RunOutcome {
            run_index: self.run_index,
            exit: self.exit,
            message: self.message.clone(),
        }
    }
}

/// Default name of the tool's working directory next to a notebook.
pub const WORK_DIR: &str = ".nbtest";

/// Directory names never copied into run workspaces or scanned for data.
pub const SKIPPED_DIRS: [&str; 3] = [".git", ".ipynb_checkpoints", WORK_DIR];

/// Copies `src` into `dst`, skipping `exclude` (typically the output tree).
pub fn copy_tree(src: &Path, dst: &Path, exclude: &[PathBuf]) -> Result<()> {
    let exclude: Vec<PathBuf> = exclude
        .iter()
        .map(|p| p.canonicalize().unwrap_or_else(|_| p.clone()))
        .collect();
    let walker = WalkDir::new(src).follow_links(false).into_iter().filter_entry(|e| {
        let path = e.path().canonicalize().unwrap_or_else(|_| e.path().to_path_buf());
        !exclude.iter().any(|x| path.starts_with(x)) && !SKIPPED_DIRS.iter().any(|d| e.file_name() == *d)
    });
    for entry in walker {
        let entry = entry.map_err(|e| Error::io(src, e.into()))?;
        let rel = entry.path().strip_prefix(src).expect("walk stays under root");
        let target = dst.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&target).map_err(|e| Error::io(&target, e))?;
        } else if entry.file_type().is_file() {
            fs::copy(entry.path(), &target).map_err(|e| Error::io(&target, e))?;
        }
    }
    Ok(())
}

fn prepare_dir(cfg: &RunConfig, runs_root: &Path, job: &Job) -> Result<PathBuf> {
    // The driver runs inside `dir`, so every path handed to it is absolute.
    let dir = std::path::absolute(runs_root.join(job.run_index.to_string())).map_err(|e| Error::io(runs_root, e))?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if let Some(src) = &cfg.source_dir {
        copy_tree(src, &dir, &[cfg.workspace.clone()])?;
    }
    let nb_path = dir.join(&cfg.notebook_name);
    fs::write(&nb_path, serialize_notebook(&job.notebook)).map_err(|e| Error::io(&nb_path, e))?;
    let events = dir.join(EVENTS_FILE);
    if events.exists() {
        fs::remove_file(&events).map_err(|e| Error::io(&events, e))?;
    }
    Ok(dir)
}

fn kill_group(pid: u32) {
    // The child leads its own process group, so this reaches grandchildren.
    unsafe {
        libc::kill(-(pid as i32), libc::SIGKILL);
    }
}

/// Runs one job in its own directory and classifies the outcome.
pub fn run_job(
    cfg: &RunConfig,
    runs_root: &Path,
    exec: &ExecutorCommand,
    job: &Job,
) -> Result<RawRun> {
    let dir = prepare_dir(cfg, runs_root, job)?;
    let stdout_path = dir.join(STDOUT_FILE);
    let stderr_path = dir.join(STDERR_FILE);
    let events_path = dir.join(EVENTS_FILE);
    let stdout = fs::File::create(&stdout_path).map_err(|e| Error::io(&stdout_path, e))?;
    let stderr = fs::File::create(&stderr_path).map_err(|e| Error::io(&stderr_path, e))?;

    let program = Path::new(&exec.program);
    let program = if program.is_relative() && program.components().count() > 1 {
        std::path::absolute(program).map_err(|e| Error::io(program, e))?
    } else {
        program.to_path_buf()
    };
    let mut cmd = Command::new(program);
    cmd.args(&exec.args)
        .arg(&cfg.notebook_name)
        .current_dir(&dir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .env(ENV_EVENT_PATH, &events_path)
        .env(ENV_SEED, job.seed.to_string())
        .env(ENV_HASH_SEED, job.seed.to_string())
        .process_group(0);
    if job.asserts_enabled {
        cmd.env(ENV_ASSERTS, "1");
    } else {
        cmd.env_remove(ENV_ASSERTS);
    }

    let start = Instant::now();
    let mut child = cmd.spawn().map_err(|e| match e.kind() {
        ErrorKind::NotFound | ErrorKind::PermissionDenied => {
            Error::ExecutorUnavailable(format!("{}: {e}", exec.program))
        }
        _ => Error::io(&dir, e),
    })?;
    debug!("run {} started (pid {})", job.run_index, child.id());

    let status = loop {
        match child.try_wait().map_err(|e| Error::io(&dir, e))? {
            Some(status) => break Some(status),
            None if start.elapsed() >= cfg.timeout => {
                kill_group(child.id());
                let _ = child.wait();
                break None;
            }
            None => thread::sleep(POLL),
        }
    };
    let elapsed = start.elapsed();

    let Some(status) = status else {
        return Ok(RawRun {
            run_index: job.run_index,
            exit: RunExit::Timeout,
            events: read_events(&events_path, &stdout_path).unwrap_or_default(),
            message: Some(format!("killed after {:?}", cfg.timeout)),
            elapsed,
        });
    };
    let events = match read_events(&events_path, &stdout_path) {
        Ok(evs) => evs,
        Err(e) => {
            return Ok(RawRun {
                run_index: job.run_index,
                exit: RunExit::Crash,
                events: Vec::new(),
                message: Some(e.to_string()),
                elapsed,
            })
        }
    };
    let cell_error = events.iter().find_map(|e| match e {
        Event::CellError { cell, msg } => Some(format!(
            "cell {cell}: {}",
            msg.as_deref().unwrap_or("error")
        )),
        _ => None,
    });
    let done = events.iter().any(|e| matches!(e, Event::Done));
    let (exit, message) = if let Some(msg) = cell_error {
        (RunExit::CellError, Some(msg))
    } else if !status.success() {
        let tail = fs::read_to_string(&stderr_path).unwrap_or_default();
        let tail: String = tail.lines().rev().take(5).collect::<Vec<_>>().into_iter().rev().collect::<Vec<_>>().join("\n");
        (RunExit::Crash, Some(format!("driver exited with {status}: {tail}")))
    } else if !done {
        (RunExit::Crash, Some("event stream ended without done".into()))
    } else {
        (RunExit::Ok, None)
    };
    Ok(RawRun {
        run_index: job.run_index,
        exit,
        events,
        message,
        elapsed,
    })
}

fn read_events(events_path: &Path, stdout_path: &Path) -> Result<Vec<Event>> {
    if events_path.exists() {
        let text = fs::read_to_string(events_path).map_err(|e| Error::io(events_path, e))?;
        parse_event_stream(&text)
    } else {
        let text = fs::read_to_string(stdout_path).map_err(|e| Error::io(stdout_path, e))?;
        scan_mixed_output(&text)
    }
}

/// Executes jobs on min(parallelism, jobs) worker threads, each driving one
/// subprocess at a time. Results come back ordered by run index.
pub fn run_jobs(
    cfg: &RunConfig,
    runs_root: &Path,
    exec: &ExecutorCommand,
    jobs: Vec<Job>,
) -> Result<Vec<RawRun>> {
    cfg.validate()?;
    let total = jobs.len();
    let workers = cfg.parallelism.min(total).max(1);
    let queue = Mutex::new(jobs.into_iter());
    let (tx, rx) = mpsc::channel::<Result<RawRun>>();
    thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            scope.spawn(move || loop {
                let next = queue.lock().expect("job queue").next();
                let Some(job) = next else { break };
                let result = run_job(cfg, runs_root, exec, &job);
                let stop = result.is_err();
                if tx.send(result).is_err() || stop {
                    break;
                }
            });
        }
        drop(tx);
    });
    let mut runs = Vec::with_capacity(total);
    for result in rx {
        runs.push(result?);
    }
    runs.sort_by_key(|r| r.run_index);
    Ok(runs)
}

/// Instruments the notebook once per run with seed `base_seed + i`, executes
/// every run and collects probe samples from the ok runs.
pub fn execute_runs(
    nb: &Notebook,
    report: &AnalysisReport,
    catalog: &ApiCatalog,
    cfg: &RunConfig,
    exec: &ExecutorCommand,
) -> Result<TraceSet> {
    cfg.validate()?;
    let jobs = (0..cfg.iterations)
        .map(|i| {
            let seed = cfg.seed_for(i);
            Ok(Job {
                run_index: i,
                notebook: instrument(nb, report, catalog, seed)?.notebook,
                seed,
                asserts_enabled: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let runs = run_jobs(cfg, &cfg.workspace.join("runs"), exec, jobs)?;
    let mut traces = TraceSet::default();
    for run in &runs {
        traces.run_outcomes.push(run.outcome());
        if run.exit == RunExit::Ok {
            traces.record_run(run.run_index, &run.events);
        } else {
            warn!(
                "run {} excluded ({:?}): {}",
                run.run_index,
                run.exit,
                run.message.as_deref().unwrap_or("")
            );
        }
    }
    let failed = traces.failed_runs();
    if failed * 2 > runs.len() {
        return Err(Error::GenerationAborted {
            failed,
            total: runs.len(),
        });
    }
    Ok(traces)
}
