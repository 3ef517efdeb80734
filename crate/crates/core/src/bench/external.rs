//! Black boxes implemented by an external program.
//!
//! One process per evaluation: the coordinates go to standard input as a
//! single line of space-separated decimals and the program answers with one
//! number on standard output.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::problem::BlackBox;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalCommand {
    /// Program followed by its arguments.
    pub argv: Vec<String>,
    pub timeout: Duration,
}

impl ExternalCommand {
    pub fn new(argv: Vec<String>) -> Self {
        Self { argv, timeout: DEFAULT_TIMEOUT }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn display(&self) -> String {
        self.argv.join(" ")
    }
}

/// Formats a point the way the child reads it.
pub fn encode_point(x: &[f64]) -> String {
    let mut line = x.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ");
    line.push('\n');
    line
}

/// Parses the child's answer: exactly one decimal number, surrounding
/// whitespace allowed.
pub fn decode_value(output: &str) -> Result<f64, EvalError> {
    let mut tokens = output.split_whitespace();
    match (tokens.next(), tokens.next()) {
        (Some(tok), None) => tok.parse::<f64>().map_err(|_| EvalError::Parse { output: output.to_string() }),
        _ => Err(EvalError::Parse { output: output.to_string() }),
    }
}

impl BlackBox for ExternalCommand {
    fn evaluate(&self, x: &[f64]) -> Result<f64, EvalError> {
        let command = self.display();
        let (program, args) = self.argv.split_first().ok_or_else(|| EvalError::Spawn {
            command: command.clone(),
            reason: "empty command".into(),
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| EvalError::Spawn { command: command.clone(), reason: e.to_string() })?;

        // A child that exits without reading its input closes the pipe; that
        // shows up below through its exit status or output, not here.
        if let Some(mut stdin) = child.stdin.take() {
            let _ = stdin.write_all(encode_point(x).as_bytes());
        }
        let drain = |pipe: Option<Box<dyn Read + Send>>| {
            thread::spawn(move || {
                let mut buf = String::new();
                if let Some(mut p) = pipe {
                    let _ = p.read_to_string(&mut buf);
                }
                buf
            })
        };
        let stdout = drain(child.stdout.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
        let stderr = drain(child.stderr.take().map(|p| Box::new(p) as Box<dyn Read + Send>));

        let started = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if started.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(EvalError::Timeout { command, timeout: self.timeout });
                }
                Ok(None) => thread::sleep(Duration::from_millis(2)),
                Err(e) => return Err(EvalError::Spawn { command, reason: e.to_string() }),
            }
        };
        let out = stdout.join().unwrap_or_default();
        let err = stderr.join().unwrap_or_default();
        if !status.success() {
            return Err(EvalError::ExitStatus {
                command,
                status: status.to_string(),
                stderr: err.trim().to_string(),
            });
        }
        decode_value(&out)
    }
}
