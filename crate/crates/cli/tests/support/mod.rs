//! Shared by the CLI integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const DEMO_QUERY: &str = "Where was the director of Lantern Bay born?";

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture(name: &str) -> PathBuf {
    fixtures().join(name)
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn memgraph(args: &[&str], cwd: &Path) -> Run {
    let Output { status, stdout, stderr } = Command::new(env!("CARGO_BIN_EXE_memgraph"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn memgraph");
    Run {
        code: status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
    }
}

/// Fixture trajectories: (name, script, extra flags).
pub const EPISODES: &[(&str, &str, &[&str])] = &[
    ("demo", "demo_script.json", &[]),
    ("dead_end", "dead_end_script.json", &[]),
    ("duplicate", "duplicate_script.json", &[]),
    ("truncated", "demo_script.json", &["--t-max", "1"]),
];

/// Run one fixture episode into `out`; returns the process result.
pub fn run_fixture_episode(name: &str, script: &str, extra: &[&str], out: &Path) -> Run {
    let config = fixture("demo.toml");
    let script = fixture(script);
    let mut args = vec![
        "-c",
        config.to_str().unwrap(),
        "run",
        "--query",
        DEMO_QUERY,
        "--gold",
        "Lyon",
        "--id",
        name,
        "--script",
        script.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    memgraph(&args, out.parent().unwrap())
}

/// Compare against a committed file; `UPDATE_GOLDEN=1` rewrites it first.
pub fn golden(path: &Path, actual: &str) -> Result<(), String> {
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(path, actual).map_err(|e| e.to_string())?;
    }
    let expected = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        let line = expected.lines().zip(actual.lines()).position(|(a, b)| a != b);
        Err(format!("{} differs (first differing line: {line:?})", path.display()))
    }
}
