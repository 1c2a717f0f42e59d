// Each integration-test binary compiles this module independently and uses a
// different subset of it.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Fresh scratch directory per test; stale content from a previous run is
/// discarded so byte comparisons never see leftovers.
pub fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("twoscale-test-{name}"));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn run_cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twoscale"))
        .args(args)
        .output()
        .expect("binary should launch")
}

pub fn exit_of(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}
