#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn mmfl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmfl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str], cwd: &Path) -> String {
    let out = mmfl(args, cwd);
    assert!(
        out.status.success(),
        "mmfl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Runs a command that must fail; returns its diagnostic.
pub fn fails(args: &[&str], cwd: &Path) -> String {
    let out = mmfl(args, cwd);
    assert!(
        !out.status.success(),
        "mmfl {args:?} unexpectedly succeeded"
    );
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.starts_with("error:") || err.contains("error:"),
        "no diagnostic: {err}"
    );
    err
}

pub const SMALL_GEN: &str = "[overrides]\nn_train = 6\nn_val = 4\n";

/// Smoke plan: two rounds of two local steps on a narrow network.
pub fn smoke_plan(runs: &str) -> String {
    format!(
        "data = \"data\"\nout = \"runs\"\n\n[defaults]\nrounds = 2\ntau = 2\nwarmup_rounds = 1\ndecay_start_round = 1\nbase_width = 4\n\n{runs}"
    )
}

/// Workspace with a small generated dataset under `data/`.
pub fn workspace(gen: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("gen.toml"), gen).unwrap();
    ok(
        &["generate", "--out", "data", "--config", "gen.toml"],
        dir.path(),
    );
    dir
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Relative path and contents of every file below `root`, sorted.
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
