//! Execution of generated plotting scripts.
//!
//! The real executor is an external shim speaking JSON over stdio: one
//! [`SandboxRequest`] object on stdin, one [`SandboxResult`] object on stdout, invoked as
//! `sandbox-runner --json`. The shim runs the script with `cwd = workdir` and reports
//! `ok` only if the script exited cleanly and left a non-empty `figure.png` there. A shim
//! that cannot run scripts at all answers `{"environment_error": "..."}` instead.
//!
//! [`StubSandbox`] stands in for the shim where no plotting runtime is available.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{Error, Result};
use crate::model::RenderStatus;

/// File name every generated script must save its figure to, relative to its cwd.
pub const FIGURE_FILE: &str = "figure.png";
pub const DEFAULT_TIMEOUT_S: u64 = 30;
/// Extra time granted to the shim beyond the script timeout before it is killed.
pub const GRACE: Duration = Duration::from_secs(5);
pub const STDERR_TAIL_BYTES: usize = 4096;
pub const ENV_SANDBOX_PY: &str = "CHARTFORGE_SANDBOX_PY";

pub const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxRequest {
    pub script: String,
    pub timeout_s: u64,
    pub workdir: PathBuf,
}

impl SandboxRequest {
    pub fn validate(&self) -> Result<()> {
        if self.script.trim().is_empty() {
            return Err(Error::invalid("sandbox script is empty"));
        }
        if self.timeout_s == 0 {
            return Err(Error::invalid("sandbox timeout must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxResult {
    pub status: RenderStatus,
    pub exit_code: Option<i32>,
    pub stderr_tail: String,
    pub figure_file: Option<PathBuf>,
    pub wall_time_ms: u64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ShimReply {
    Environment { environment_error: String },
    Result(SandboxResult),
}

pub trait Sandbox: Send + Sync {
    /// Run one script. Script failures are reported through [`SandboxResult::status`];
    /// `Err` is reserved for an unusable execution environment.
    fn execute(&self, request: &SandboxRequest) -> Result<SandboxResult>;
}

impl<S: Sandbox + ?Sized> Sandbox for &S {
    fn execute(&self, request: &SandboxRequest) -> Result<SandboxResult> {
        (**self).execute(request)
    }
}

impl<S: Sandbox + ?Sized> Sandbox for Box<S> {
    fn execute(&self, request: &SandboxRequest) -> Result<SandboxResult> {
        (**self).execute(request)
    }
}

/// Last `max` bytes of `text`, cut on a char boundary.
pub fn tail(text: &str, max: usize) -> String {
    if text.len() <= max {
        return text.to_string();
    }
    let mut start = text.len() - max;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    text[start..].to_string()
}

pub fn has_png_magic(path: &Path) -> bool {
    let mut header = [0u8; 8];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut header))
        .map(|_| header == PNG_MAGIC)
        .unwrap_or(false)
}

/// Client for the external JSON-over-stdio shim.
#[derive(Clone, Debug)]
pub struct ShimSandbox {
    program: PathBuf,
    args: Vec<String>,
    grace: Duration,
}

impl Default for ShimSandbox {
    fn default() -> Self {
        ShimSandbox::new("sandbox-runner")
    }
}

/// Environment variables forwarded to the shim; everything else (proxies, API keys) is dropped.
const FORWARDED_ENV: &[&str] = &["PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "PYTHONPATH", ENV_SANDBOX_PY];

impl ShimSandbox {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        ShimSandbox {
            program: program.into(),
            args: vec!["--json".to_string()],
            grace: GRACE,
        }
    }

    pub fn with_grace(mut self, grace: Duration) -> Self {
        self.grace = grace;
        self
    }

    fn command(&self, workdir: &Path) -> Command {
        let mut cmd = Command::new(&self.program);
        cmd.args(&self.args)
            .current_dir(workdir)
            .env_clear()
            .env("MPLBACKEND", "Agg")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        for key in FORWARDED_ENV {
            if let Ok(value) = std::env::var(key) {
                cmd.env(key, value);
            }
        }
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            cmd.process_group(0);
        }
        cmd
    }
}

#[cfg(unix)]
fn kill_group(child: &mut std::process::Child) {
    let pgid = child.id();
    let _ = Command::new("kill")
        .args(["-KILL", "--", &format!("-{pgid}")])
        .stderr(Stdio::null())
        .status();
    let _ = child.kill();
}

#[cfg(not(unix))]
fn kill_group(child: &mut std::process::Child) {
    let _ = child.kill();
}

impl Sandbox for ShimSandbox {
    fn execute(&self, request: &SandboxRequest) -> Result<SandboxResult> {
        request.validate()?;
        fs::create_dir_all(&request.workdir)?;
        let started = Instant::now();
        let mut child = self.command(&request.workdir).spawn().map_err(|e| {
            Error::SandboxEnvironment(format!("cannot start {}: {e}", self.program.display()))
        })?;

        let payload = serde_json::to_vec(request)?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            // A shim that exits early closes its stdin; the reply decides the outcome.
            let _ = stdin.write_all(&payload);
        }
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let out_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stdout.read_to_end(&mut buf);
            buf
        });
        let err_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });

        let budget = Duration::from_secs(request.timeout_s) + self.grace;
        let exit = child.wait_timeout(budget)?;
        if exit.is_none() {
            kill_group(&mut child);
            let _ = child.wait();
            let err = err_reader.join().unwrap_or_default();
            return Ok(SandboxResult {
                status: RenderStatus::Timeout,
                exit_code: None,
                stderr_tail: tail(&String::from_utf8_lossy(&err), STDERR_TAIL_BYTES),
                figure_file: None,
                wall_time_ms: started.elapsed().as_millis() as u64,
            });
        }
        #[cfg(unix)]
        {
            // Reap anything the shim left running in its group.
            let _ = Command::new("kill")
                .args(["-KILL", "--", &format!("-{}", child.id())])
                .stderr(Stdio::null())
                .status();
        }
        let out = out_reader.join().unwrap_or_default();
        let err = err_reader.join().unwrap_or_default();
        let reply: ShimReply = serde_json::from_slice(&out).map_err(|e| {
            Error::SandboxEnvironment(format!(
                "shim reply is not a result object ({e}); stderr: {}",
                tail(&String::from_utf8_lossy(&err), 512)
            ))
        })?;
        match reply {
            ShimReply::Environment { environment_error } => Err(Error::SandboxEnvironment(environment_error)),
            ShimReply::Result(mut result) => {
                result.stderr_tail = tail(&result.stderr_tail, STDERR_TAIL_BYTES);
                if let Some(file) = &result.figure_file {
                    if file.is_relative() {
                        result.figure_file = Some(request.workdir.join(file));
                    }
                }
                Ok(result)
            }
        }
    }
}

/// In-process stand-in for the shim. It does not execute anything; it classifies the
/// script text and, for scripts that look runnable, writes a small valid PNG to
/// `figure.png`. Classification, first match wins:
///
/// * unbalanced brackets or quotes: `exec_error` (syntax error)
/// * a `raise` statement: `exec_error`
/// * `while True:` loop: `timeout`
/// * no `savefig` call naming `figure.png`: `no_figure`
/// * otherwise: `ok`
#[derive(Clone, Debug, Default)]
pub struct StubSandbox;

impl StubSandbox {
    pub fn classify(script: &str) -> (RenderStatus, String) {
        if let Some(problem) = syntax_problem(script) {
            return (RenderStatus::ExecError, format!("SyntaxError: {problem}"));
        }
        if script.lines().any(|l| {
            let t = l.trim_start();
            t.starts_with("raise ") || t == "raise"
        }) {
            return (
                RenderStatus::ExecError,
                "Traceback (most recent call last):\n  File \"script.py\"\nRuntimeError: raised by script".into(),
            );
        }
        if script.lines().any(|l| l.trim_start().starts_with("while True")) {
            return (RenderStatus::Timeout, String::new());
        }
        let saves = script
            .lines()
            .any(|l| l.contains("savefig(") && l.contains(FIGURE_FILE));
        if !saves {
            return (RenderStatus::NoFigure, String::new());
        }
        (RenderStatus::Ok, String::new())
    }
}

fn syntax_problem(script: &str) -> Option<String> {
    let mut stack = Vec::new();
    for (n, line) in script.lines().enumerate() {
        let mut quote: Option<char> = None;
        for c in line.chars() {
            match quote {
                Some(q) if c == q => quote = None,
                Some(_) => {}
                None => match c {
                    '#' => break,
                    '"' | '\'' => quote = Some(c),
                    '(' | '[' | '{' => stack.push(c),
                    ')' | ']' | '}' => {
                        let open = match c {
                            ')' => '(',
                            ']' => '[',
                            _ => '{',
                        };
                        if stack.pop() != Some(open) {
                            return Some(format!("unmatched '{c}' on line {}", n + 1));
                        }
                    }
                    _ => {}
                },
            }
        }
        if quote.is_some() {
            return Some(format!("unterminated string on line {}", n + 1));
        }
    }
    stack.last().map(|c| format!("'{c}' was never closed"))
}

/// A 1x1 RGBA PNG.
pub const TINY_PNG: [u8; 68] = [
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52,
    0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x06, 0x00, 0x00, 0x00, 0x1f, 0x15, 0xc4,
    0x89, 0x00, 0x00, 0x00, 0x0b, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0xf8, 0x0f, 0x04, 0x00,
    0x09, 0xfb, 0x03, 0xfd, 0xfb, 0x5e, 0x6b, 0x2b, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44,
    0xae, 0x42, 0x60, 0x82,
];

impl Sandbox for StubSandbox {
    fn execute(&self, request: &SandboxRequest) -> Result<SandboxResult> {
        request.validate()?;
        let (status, stderr) = StubSandbox::classify(&request.script);
        let (exit_code, figure_file) = match status {
            RenderStatus::Ok => {
                fs::create_dir_all(&request.workdir)?;
                let path = request.workdir.join(FIGURE_FILE);
                fs::write(&path, TINY_PNG)?;
                (Some(0), Some(path))
            }
            RenderStatus::NoFigure => (Some(0), None),
            RenderStatus::ExecError => (Some(1), None),
            RenderStatus::Timeout => (None, None),
        };
        Ok(SandboxResult {
            status,
            exit_code,
            stderr_tail: tail(&stderr, STDERR_TAIL_BYTES),
            figure_file,
            wall_time_ms: 0,
        })
    }
}
