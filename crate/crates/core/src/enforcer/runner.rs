//! The single seam through which every external command is run.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Mutex;

use super::EnforcerError;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommandOutput {
    /// Exit code; `None` when the command died from a signal.
    pub status: Option<i32>,
    pub stdout: String,
    pub stderr: String,
}

impl CommandOutput {
    pub fn success(stdout: impl Into<String>) -> Self {
        CommandOutput {
            status: Some(0),
            stdout: stdout.into(),
            stderr: String::new(),
        }
    }

    pub fn failure(code: i32, stderr: impl Into<String>) -> Self {
        CommandOutput {
            status: Some(code),
            stdout: String::new(),
            stderr: stderr.into(),
        }
    }

    pub fn ok(&self) -> bool {
        self.status == Some(0)
    }
}

pub trait CommandRunner: Send + Sync {
    fn run(&self, program: &str, args: &[String], stdin: Option<&str>) -> std::io::Result<CommandOutput>;

    /// Whether `program` can be found at all.
    fn exists(&self, program: &str) -> bool;
}

/// Runs commands on the host.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemRunner;

impl CommandRunner for SystemRunner {
    fn run(&self, program: &str, args: &[String], stdin: Option<&str>) -> std::io::Result<CommandOutput> {
        let mut cmd = Command::new(program);
        cmd.args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() });
        let mut child = cmd.spawn()?;
        if let (Some(input), Some(mut pipe)) = (stdin, child.stdin.take()) {
            pipe.write_all(input.as_bytes())?;
        }
        let out = child.wait_with_output()?;
        Ok(CommandOutput {
            status: out.status.code(),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        })
    }

    fn exists(&self, program: &str) -> bool {
        find_in_path(program).is_some()
    }
}

pub fn find_in_path(program: &str) -> Option<PathBuf> {
    if program.contains('/') {
        let p = PathBuf::from(program);
        return p.is_file().then_some(p);
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|dir| dir.join(program))
            .find(|candidate| candidate.is_file())
    })
}

/// Records every invocation and answers from a script instead of executing.
///
/// Programs without a scripted response succeed with empty output. Every
/// program is reported as existing unless marked missing.
#[derive(Debug, Default)]
pub struct RecordingRunner {
    calls: Mutex<Vec<Vec<String>>>,
    responses: Mutex<HashMap<String, CommandOutput>>,
    missing: Mutex<Vec<String>>,
}

impl RecordingRunner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Answers every later invocation of `program` with `output`.
    pub fn respond(&self, program: &str, output: CommandOutput) {
        self.responses.lock().unwrap().insert(program.to_string(), output);
    }

    /// Makes `program` look absent: `exists` is false and `run` fails to spawn.
    pub fn mark_missing(&self, program: &str) {
        self.missing.lock().unwrap().push(program.to_string());
    }

    pub fn calls(&self) -> Vec<Vec<String>> {
        self.calls.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        self.calls.lock().unwrap().clear();
    }
}

impl CommandRunner for RecordingRunner {
    fn run(&self, program: &str, args: &[String], _stdin: Option<&str>) -> std::io::Result<CommandOutput> {
        if self.missing.lock().unwrap().iter().any(|m| m == program) {
            return Err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{program}: not found"),
            ));
        }
        let mut call = vec![program.to_string()];
        call.extend(args.iter().cloned());
        self.calls.lock().unwrap().push(call);
        Ok(self
            .responses
            .lock()
            .unwrap()
            .get(program)
            .cloned()
            .unwrap_or_else(|| CommandOutput::success("")))
    }

    fn exists(&self, program: &str) -> bool {
        !self.missing.lock().unwrap().iter().any(|m| m == program)
    }
}

impl<R: CommandRunner + ?Sized> CommandRunner for std::sync::Arc<R> {
    fn run(&self, program: &str, args: &[String], stdin: Option<&str>) -> std::io::Result<CommandOutput> {
        (**self).run(program, args, stdin)
    }

    fn exists(&self, program: &str) -> bool {
        (**self).exists(program)
    }
}

/// Runs a command and turns a spawn failure or nonzero exit into
/// [`EnforcerError::ExternalCommandFailed`].
pub fn run_checked(
    runner: &dyn CommandRunner,
    program: &str,
    args: &[String],
    stdin: Option<&str>,
) -> Result<String, EnforcerError> {
    let command = std::iter::once(program.to_string())
        .chain(args.iter().cloned())
        .collect::<Vec<_>>()
        .join(" ");
    match runner.run(program, args, stdin) {
        Ok(out) if out.ok() => Ok(out.stdout),
        Ok(out) => Err(EnforcerError::ExternalCommandFailed {
            command,
            status: out.status,
            output: format!("{}{}", out.stdout, out.stderr).trim().to_string(),
        }),
        Err(e) => Err(EnforcerError::ExternalCommandFailed {
            command,
            status: None,
            output: e.to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn system_runner_captures_output() {
        let out = SystemRunner
            .run("sh", &["-c".into(), "echo hi; echo err >&2; exit 3".into()], None)
            .unwrap();
        assert_eq!(out.status, Some(3));
        assert_eq!(out.stdout, "hi\n");
        assert_eq!(out.stderr, "err\n");
    }

    #[test]
    fn system_runner_feeds_stdin() {
        let out = SystemRunner.run("cat", &[], Some("quit\n")).unwrap();
        assert_eq!(out.stdout, "quit\n");
    }

    #[test]
    fn run_checked_reports_failures() {
        let r = RecordingRunner::new();
        r.respond("nvidia-smi", CommandOutput::failure(9, "no devices"));
        let err = run_checked(&r, "nvidia-smi", &["-rgc".into()], None).unwrap_err();
        match err {
            EnforcerError::ExternalCommandFailed { command, status, output } => {
                assert_eq!(command, "nvidia-smi -rgc");
                assert_eq!(status, Some(9));
                assert_eq!(output, "no devices");
            }
            other => panic!("unexpected {other:?}"),
        }
        r.mark_missing("cpupower");
        assert!(!r.exists("cpupower"));
        assert!(run_checked(&r, "cpupower", &[], None).is_err());
        assert_eq!(r.calls(), vec![vec!["nvidia-smi".to_string(), "-rgc".to_string()]]);
    }
}
