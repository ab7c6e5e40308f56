#![allow(dead_code)]

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use nbtest_core::harness::{ExecutorCommand, RunConfig};

/// Writes an executable shell script and returns a command running it.
pub fn stub(dir: &Path, name: &str, body: &str) -> ExecutorCommand {
    let path = dir.join(name);
    fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
    ExecutorCommand {
        program: path.to_string_lossy().into_owned(),
        args: Vec::new(),
    }
}

pub fn config(workspace: &Path, iterations: usize) -> RunConfig {
    let mut cfg = RunConfig::new(workspace);
    cfg.iterations = iterations;
    cfg.timeout = std::time::Duration::from_secs(20);
    cfg.parallelism = 2;
    cfg
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn read_fixture(name: &str) -> nbtest_core::notebook::Notebook {
    nbtest_core::notebook::parse_notebook(&fs::read(fixture(name)).unwrap()).unwrap()
}

/// Copies fixture files into a fresh temporary directory.
pub fn workspace_with(files: &[&str]) -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    for f in files {
        fs::copy(fixture(f), tmp.path().join(f)).unwrap();
    }
    tmp
}

/// Checksum of the CSV files in `dir`, as the simulated driver computes it.
pub fn data_cksum(dir: &Path) -> String {
    let out = std::process::Command::new("sh")
        .arg("-c")
        .arg("cat ./*.csv 2>/dev/null | cksum | cut -d' ' -f1")
        .current_dir(dir)
        .output()
        .unwrap();
    String::from_utf8(out.stdout).unwrap().trim().to_string()
}

/// The simulated driver; `args` are its baseline values (see the script).
pub fn sim_driver(args: &[&str]) -> ExecutorCommand {
    ExecutorCommand {
        program: fixture("sim_driver.sh").to_string_lossy().into_owned(),
        args: args.iter().map(|s| s.to_string()).collect(),
    }
}
