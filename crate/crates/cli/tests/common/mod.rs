#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_topiclabel")
}

pub fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy.toml")
}

/// Runs the binary against the toy configuration with the mock model.
pub fn topiclabel(out: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .arg("--config")
        .arg(toy_config())
        .arg("--mock-llm")
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary runs")
}

pub struct Server {
    pub child: Child,
    pub base: String,
}

impl Server {
    /// Starts `rate-serve` on an ephemeral port and waits for its address.
    pub fn start(out: &Path, extra: &[&str]) -> Server {
        let mut child = Command::new(bin())
            .arg("--config")
            .arg(toy_config())
            .arg("--out")
            .arg(out)
            .args(["rate-serve", "--bind", "127.0.0.1:0"])
            .args(extra)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("server starts");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .expect("server prints its address");
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected server output {line:?}"))
            .to_owned();
        Server { child, base }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    /// SIGKILL, no chance to flush or clean up.
    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
