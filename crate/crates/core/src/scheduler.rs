//! Sequential execution of federation rounds.
//!
//! For each client in order: apply its enforcement plan, spawn the training
//! command inside the restricted environment, classify the outcome, release
//! the plan. In simulated mode the perf model stands in for the child.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::unix::io::AsRawFd;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enforcer::{
    find_in_path, read_memory_peak, read_oom_kills, ApplyOptions, EnforcementLease, Enforcer,
    EnforcerError,
};
use crate::perfmodel::{predict_failure, predict_time, FailurePrediction, WorkloadSpec};
use crate::profiles::{plan_enforcement, Catalog, HardwareProfile, HostCapabilities, ProfileError};

/// Grace period between SIGTERM and SIGKILL after a timeout.
pub const KILL_GRACE: Duration = Duration::from_secs(2);

const POLL_INTERVAL: Duration = Duration::from_millis(5);

static TERMINATE: AtomicBool = AtomicBool::new(false);

extern "C" fn on_terminate(_sig: libc::c_int) {
    TERMINATE.store(true, Ordering::SeqCst);
}

/// Makes SIGINT and SIGTERM stop the in-flight child and fail the run with
/// [`SchedulerError::Interrupted`], so the caller can reset the host.
pub fn install_termination_handler() {
    // SAFETY: the handler only stores to an atomic, which is async-signal-safe.
    unsafe {
        libc::signal(libc::SIGINT, on_terminate as *const () as libc::sighandler_t);
        libc::signal(libc::SIGTERM, on_terminate as *const () as libc::sighandler_t);
    }
}

fn terminate_requested() -> bool {
    TERMINATE.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Real,
    Simulated,
}

impl std::str::FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(RunMode::Real),
            "simulated" => Ok(RunMode::Simulated),
            other => Err(format!("unknown mode '{other}' (real, simulated)")),
        }
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunMode::Real => "real",
            RunMode::Simulated => "simulated",
        })
    }
}

/// One fully resolved client invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCommand {
    pub argv: Vec<String>,
    pub working_dir: PathBuf,
    pub params_in: PathBuf,
    pub params_out: PathBuf,
    pub timeout_s: f64,
    #[serde(default)]
    pub extra_env: BTreeMap<String, String>,
}

impl TaskCommand {
    /// Checks the preconditions for spawning; the error text ends up in the
    /// client's result.
    pub fn check(&self) -> Result<(), String> {
        let Some(program) = self.argv.first() else {
            return Err("argv is empty".into());
        };
        let resolvable = if program.contains('/') {
            let p = Path::new(program);
            let p = if p.is_relative() { self.working_dir.join(p) } else { p.to_path_buf() };
            p.is_file()
        } else {
            find_in_path(program).is_some()
        };
        if !resolvable {
            return Err(format!("{program}: command not found"));
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(format!("timeout_s must be positive, got {}", self.timeout_s));
        }
        if let Err(e) = File::open(&self.params_in) {
            return Err(format!("params_in {}: {e}", self.params_in.display()));
        }
        match self.params_out.parent() {
            Some(dir) if dir.as_os_str().is_empty() || dir.is_dir() => Ok(()),
            _ => Err(format!(
                "parent directory of params_out {} does not exist",
                self.params_out.display()
            )),
        }
    }
}

/// Per-client task with `{params_in}`, `{params_out}`, `{client_idx}`,
/// `{profile_id}` and `{round_idx}` placeholders in argv and env values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskTemplate {
    pub argv: Vec<String>,
    #[serde(default = "default_working_dir")]
    pub working_dir: PathBuf,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default)]
    pub extra_env: BTreeMap<String, String>,
}

fn default_working_dir() -> PathBuf {
    PathBuf::from(".")
}

fn default_timeout() -> f64 {
    3600.0
}

impl TaskTemplate {
    pub fn instantiate(
        &self,
        round_idx: usize,
        client_idx: usize,
        profile_id: &str,
        params_in: &Path,
        params_out: &Path,
    ) -> TaskCommand {
        let params_in_s = params_in.display().to_string();
        let params_out_s = params_out.display().to_string();
        let fill = |s: &str| {
            s.replace("{params_in}", &params_in_s)
                .replace("{params_out}", &params_out_s)
                .replace("{client_idx}", &client_idx.to_string())
                .replace("{profile_id}", profile_id)
                .replace("{round_idx}", &round_idx.to_string())
        };
        TaskCommand {
            argv: self.argv.iter().map(|a| fill(a)).collect(),
            working_dir: self.working_dir.clone(),
            params_in: params_in.to_path_buf(),
            params_out: params_out.to_path_buf(),
            timeout_s: self.timeout_s,
            extra_env: self.extra_env.iter().map(|(k, v)| (k.clone(), fill(v))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    NonzeroExit { code: i32 },
    OomKilled,
    Timeout,
    SpawnFailed,
    /// Exited 0 but left no (or an empty) params_out.
    MissingOutput,
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        *self == RunStatus::Ok
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunStatus::Ok => f.write_str("ok"),
            RunStatus::NonzeroExit { code } => write!(f, "nonzero_exit({code})"),
            RunStatus::OomKilled => f.write_str("oom_killed"),
            RunStatus::Timeout => f.write_str("timeout"),
            RunStatus::SpawnFailed => f.write_str("spawn_failed"),
            RunStatus::MissingOutput => f.write_str("missing_output"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRunResult {
    pub client_idx: usize,
    pub profile_id: String,
    pub status: RunStatus,
    pub wall_time_s: f64,
    pub peak_memory_bytes: u64,
    pub params_out: Option<PathBuf>,
    /// Seconds on the run's timeline: monotonic since experiment start in
    /// real mode, accumulated predicted time in simulated mode.
    pub started_at: f64,
    pub ended_at: f64,
    pub enforcement_skips: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_idx: usize,
    pub host: HostCapabilities,
    pub runs: Vec<ClientRunResult>,
    pub mode: RunMode,
}

impl RoundReport {
    /// Whether all run intervals are pairwise disjoint and ordered.
    pub fn is_sequential(&self) -> bool {
        self.runs.iter().all(|r| r.ended_at >= r.started_at)
            && self.runs.windows(2).all(|w| w[0].ended_at <= w[1].started_at)
    }
}

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("unknown profile '{0}' in federation")]
    UnknownProfile(String),
    #[error(transparent)]
    NotEmulable(ProfileError),
    #[error(transparent)]
    Enforcer(#[from] EnforcerError),
    #[error("{0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("interrupted by signal")]
    Interrupted,
}

/// Source of `started_at`/`ended_at` values.
#[derive(Debug, Clone)]
pub struct Timeline {
    origin: Instant,
    virtual_s: f64,
}

impl Default for Timeline {
    fn default() -> Self {
        Self::new()
    }
}

impl Timeline {
    pub fn new() -> Self {
        Timeline {
            origin: Instant::now(),
            virtual_s: 0.0,
        }
    }

    fn now(&self, mode: RunMode) -> f64 {
        match mode {
            RunMode::Real => self.origin.elapsed().as_secs_f64(),
            RunMode::Simulated => self.virtual_s,
        }
    }
}

/// Everything a round needs besides the federation itself.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub mode: RunMode,
    pub host: &'a HostCapabilities,
    pub catalog: &'a Catalog,
    /// Required in real mode.
    pub enforcer: Option<&'a Enforcer>,
    /// Required in simulated mode.
    pub workload: Option<&'a WorkloadSpec<f64>>,
    pub run_id: &'a str,
    pub degrade_allowed: bool,
    /// Per-client directories go below this (real mode).
    pub output_dir: &'a Path,
    pub params_in: &'a Path,
}

/// Releases the lease when dropped, so no exit path can leak limits.
struct LeaseGuard<'a> {
    enforcer: &'a Enforcer,
    lease: EnforcementLease,
}

impl LeaseGuard<'_> {
    fn release(mut self) -> Result<(), EnforcerError> {
        self.enforcer.release(&mut self.lease).map(|_| ())
    }
}

impl Drop for LeaseGuard<'_> {
    fn drop(&mut self) {
        if !self.lease.released {
            if let Err(e) = self.enforcer.release(&mut self.lease) {
                log::error!("releasing lease for {}: {e}", self.lease.plan.profile_id);
            }
        }
    }
}

struct Reaped {
    raw_status: i32,
    rusage: libc::rusage,
    timed_out: bool,
    wall: Duration,
}

fn write_pid(buf: &mut [u8; 24], mut pid: u32) -> usize {
    // No allocation: runs between fork and exec.
    let mut tmp = [0u8; 20];
    let mut n = 0;
    loop {
        tmp[n] = b'0' + (pid % 10) as u8;
        n += 1;
        pid /= 10;
        if pid == 0 {
            break;
        }
    }
    for i in 0..n {
        buf[i] = tmp[n - 1 - i];
    }
    buf[n] = b'\n';
    n + 1
}

fn cpu_set(cpus: &[usize]) -> libc::cpu_set_t {
    // SAFETY: cpu_set_t is plain data and all-zero is the empty set.
    let mut set: libc::cpu_set_t = unsafe { std::mem::zeroed() };
    for &c in cpus {
        // SAFETY: CPU_SET bounds-checks against the set size.
        unsafe { libc::CPU_SET(c, &mut set) };
    }
    set
}

fn log_file(dir: &Path, name: &str) -> Stdio {
    File::create(dir.join(name)).map(Stdio::from).unwrap_or_else(|_| Stdio::null())
}

fn spawn(task: &TaskCommand, lease: &EnforcementLease) -> io::Result<u32> {
    let log_dir = task.params_out.parent().unwrap_or(Path::new("."));
    let mut cmd = Command::new(&task.argv[0]);
    cmd.args(&task.argv[1..])
        .current_dir(&task.working_dir)
        .envs(&lease.plan.child_env)
        .envs(&task.extra_env)
        .stdin(Stdio::null())
        .stdout(log_file(log_dir, "stdout.log"))
        .stderr(log_file(log_dir, "stderr.log"));

    let procs = match &lease.cgroup_dir {
        Some(dir) => Some(
            OpenOptions::new()
                .append(true)
                .create(true)
                .open(dir.join("cgroup.procs"))?,
        ),
        None => None,
    };
    let procs_fd = procs.as_ref().map(|f| f.as_raw_fd());
    let affinity = lease.affinity.as_deref().map(cpu_set);

    // SAFETY: the closure only makes async-signal-safe syscalls and touches
    // no heap memory.
    unsafe {
        cmd.pre_exec(move || {
            if libc::setpgid(0, 0) != 0 {
                return Err(io::Error::last_os_error());
            }
            if let Some(fd) = procs_fd {
                let mut buf = [0u8; 24];
                let n = write_pid(&mut buf, libc::getpid() as u32);
                if libc::write(fd, buf.as_ptr().cast(), n) < 0 {
                    return Err(io::Error::last_os_error());
                }
            }
            if let Some(set) = &affinity {
                if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), set) != 0 {
                    return Err(io::Error::last_os_error());
                }
            }
            Ok(())
        });
    }
    let child = cmd.spawn()?;
    drop(procs);
    Ok(child.id())
}

fn signal_group(pid: u32, sig: libc::c_int) {
    // SAFETY: plain syscall; ESRCH when the group is gone is fine.
    unsafe {
        libc::kill(-(pid as libc::pid_t), sig);
    }
}

fn reap(pid: u32, started: Instant, timeout: Duration) -> Result<Reaped, SchedulerError> {
    let deadline = started + timeout;
    let mut term_sent_at: Option<Instant> = None;
    let mut killed = false;
    let mut interrupted = false;
    loop {
        let mut status = 0;
        // SAFETY: zeroed rusage is a valid out-parameter.
        let mut rusage: libc::rusage = unsafe { std::mem::zeroed() };
        // SAFETY: `pid` is our unreaped child.
        let r = unsafe { libc::wait4(pid as libc::pid_t, &mut status, libc::WNOHANG, &mut rusage) };
        if r == pid as libc::pid_t {
            let wall = started.elapsed();
            // Grandchildren must not outlive the client.
            signal_group(pid, libc::SIGKILL);
            if interrupted {
                return Err(SchedulerError::Interrupted);
            }
            return Ok(Reaped {
                raw_status: status,
                rusage,
                timed_out: term_sent_at.is_some(),
                wall,
            });
        }
        if r < 0 {
            let e = io::Error::last_os_error();
            if e.kind() == io::ErrorKind::Interrupted {
                continue;
            }
            return Err(SchedulerError::Io {
                context: format!("waiting for child {pid}"),
                source: e,
            });
        }
        let now = Instant::now();
        if terminate_requested() && !interrupted {
            interrupted = true;
            signal_group(pid, libc::SIGKILL);
        }
        match term_sent_at {
            None if now >= deadline => {
                signal_group(pid, libc::SIGTERM);
                term_sent_at = Some(now);
            }
            Some(at) if !killed && now >= at + KILL_GRACE => {
                signal_group(pid, libc::SIGKILL);
                killed = true;
            }
            _ => {}
        }
        thread::sleep(POLL_INTERVAL);
    }
}

fn classify(reaped: &Reaped, oom_kills: u64, params_out: &Path) -> RunStatus {
    if reaped.timed_out {
        return RunStatus::Timeout;
    }
    if oom_kills > 0 {
        return RunStatus::OomKilled;
    }
    let s = reaped.raw_status;
    if libc::WIFEXITED(s) {
        match libc::WEXITSTATUS(s) {
            0 if fs::metadata(params_out).is_ok_and(|m| m.len() > 0) => RunStatus::Ok,
            0 => RunStatus::MissingOutput,
            code => RunStatus::NonzeroExit { code },
        }
    } else {
        RunStatus::NonzeroExit {
            code: 128 + libc::WTERMSIG(s),
        }
    }
}

fn run_real(
    profile: &HardwareProfile,
    task: &TaskCommand,
    client_idx: usize,
    ctx: &RoundContext<'_>,
    started_at: f64,
    timeline: &Timeline,
) -> Result<ClientRunResult, SchedulerError> {
    let enforcer = ctx
        .enforcer
        .ok_or_else(|| SchedulerError::Config("real mode needs an enforcer".into()))?;
    let plan = plan_enforcement(profile, ctx.host).map_err(SchedulerError::NotEmulable)?;
    let mut result = ClientRunResult {
        client_idx,
        profile_id: profile.id.clone(),
        status: RunStatus::SpawnFailed,
        wall_time_s: 0.0,
        peak_memory_bytes: 0,
        params_out: None,
        started_at,
        ended_at: started_at,
        enforcement_skips: Vec::new(),
        detail: None,
    };
    if let Err(reason) = task.check() {
        result.detail = Some(reason);
        result.ended_at = timeline.now(RunMode::Real);
        return Ok(result);
    }

    let opts = ApplyOptions {
        run_id: ctx.run_id.to_string(),
        client_idx,
        degrade_allowed: ctx.degrade_allowed,
    };
    let guard = LeaseGuard {
        enforcer,
        lease: enforcer.apply(&plan, &opts)?,
    };
    result.enforcement_skips = guard.lease.skipped();

    let spawned_at = Instant::now();
    match spawn(task, &guard.lease) {
        Err(e) => result.detail = Some(format!("{}: {e}", task.argv[0])),
        Ok(pid) => {
            let reaped = reap(pid, spawned_at, Duration::from_secs_f64(task.timeout_s))?;
            let cgroup = guard.lease.cgroup_dir.as_deref();
            let oom_kills = cgroup.and_then(read_oom_kills).unwrap_or(0);
            result.status = classify(&reaped, oom_kills, &task.params_out);
            result.wall_time_s = reaped.wall.as_secs_f64();
            result.peak_memory_bytes = cgroup
                .and_then(read_memory_peak)
                .unwrap_or(reaped.rusage.ru_maxrss.max(0) as u64 * 1024);
            if fs::metadata(&task.params_out).is_ok_and(|m| m.len() > 0) {
                result.params_out = Some(task.params_out.clone());
            }
        }
    }
    guard.release()?;
    result.ended_at = timeline.now(RunMode::Real).max(result.started_at);
    Ok(result)
}

fn run_simulated(
    profile: &HardwareProfile,
    task: &TaskCommand,
    client_idx: usize,
    ctx: &RoundContext<'_>,
    started_at: f64,
) -> Result<ClientRunResult, SchedulerError> {
    let workload = ctx
        .workload
        .ok_or_else(|| SchedulerError::Config("simulated mode needs a workload".into()))?;
    let (status, wall, peak, detail) = match predict_failure(profile, workload) {
        FailurePrediction::OomRam => (
            RunStatus::OomKilled,
            0.0,
            profile.ram_bytes(),
            Some("predicted: RAM exceeds profile".to_string()),
        ),
        FailurePrediction::OomVram => (
            RunStatus::OomKilled,
            0.0,
            workload.peak_ram_bytes,
            Some("predicted: VRAM exceeds profile".to_string()),
        ),
        FailurePrediction::None => match predict_time(profile, workload, ctx.catalog) {
            Ok(t) if t > task.timeout_s => (RunStatus::Timeout, task.timeout_s, workload.peak_ram_bytes, None),
            Ok(t) => (RunStatus::Ok, t, workload.peak_ram_bytes, None),
            Err(e) => (RunStatus::SpawnFailed, 0.0, 0, Some(e.to_string())),
        },
    };
    Ok(ClientRunResult {
        client_idx,
        profile_id: profile.id.clone(),
        status,
        wall_time_s: wall,
        peak_memory_bytes: peak,
        params_out: None,
        started_at,
        ended_at: started_at + wall,
        enforcement_skips: Vec::new(),
        detail,
    })
}

/// Runs one client. Runtime failures (bad exit, OOM, timeout, spawn error)
/// come back as data; enforcement problems and unemulable profiles are
/// errors. The lease is released on every path.
pub fn run_client(
    profile: &HardwareProfile,
    task: &TaskCommand,
    client_idx: usize,
    ctx: &RoundContext<'_>,
    timeline: &mut Timeline,
) -> Result<ClientRunResult, SchedulerError> {
    let started_at = timeline.now(ctx.mode);
    let result = match ctx.mode {
        RunMode::Real => run_real(profile, task, client_idx, ctx, started_at, timeline)?,
        RunMode::Simulated => run_simulated(profile, task, client_idx, ctx, started_at)?,
    };
    if ctx.mode == RunMode::Simulated {
        timeline.virtual_s = result.ended_at;
    }
    Ok(result)
}

pub fn round_dir(output_dir: &Path, round_idx: usize) -> PathBuf {
    output_dir.join(format!("round-{round_idx:04}"))
}

/// Runs `federation` in order. Unknown ids and (in real mode) profiles the
/// host cannot emulate abort before any client starts.
pub fn run_round(
    round_idx: usize,
    federation: &[String],
    template: &TaskTemplate,
    ctx: &RoundContext<'_>,
    timeline: &mut Timeline,
) -> Result<RoundReport, SchedulerError> {
    let profiles: Vec<&HardwareProfile> = federation
        .iter()
        .map(|id| ctx.catalog.get(id).ok_or_else(|| SchedulerError::UnknownProfile(id.clone())))
        .collect::<Result<_, _>>()?;
    if ctx.mode == RunMode::Real {
        for p in &profiles {
            plan_enforcement(p, ctx.host).map_err(SchedulerError::NotEmulable)?;
        }
    }

    let mut runs = Vec::with_capacity(profiles.len());
    for (client_idx, profile) in profiles.into_iter().enumerate() {
        let client_dir = round_dir(ctx.output_dir, round_idx).join(format!("client-{client_idx:04}"));
        if ctx.mode == RunMode::Real {
            fs::create_dir_all(&client_dir).map_err(|source| SchedulerError::Io {
                context: format!("creating {}", client_dir.display()),
                source,
            })?;
        }
        let task = template.instantiate(
            round_idx,
            client_idx,
            &profile.id,
            ctx.params_in,
            &client_dir.join("params.bin"),
        );
        let result = run_client(profile, &task, client_idx, ctx, timeline)?;
        log::info!(
            "round {round_idx} client {client_idx} ({}): {} in {:.3}s",
            result.profile_id,
            result.status,
            result.wall_time_s
        );
        runs.push(result);
    }
    Ok(RoundReport {
        round_idx,
        host: ctx.host.clone(),
        runs,
        mode: ctx.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enforcer::MockBackend;
    use crate::profiles::test_fixtures::{gtx_1060, host, host_profile};

    fn workload() -> WorkloadSpec<f64> {
        WorkloadSpec {
            name: "w".into(),
            t_compute_ref_s: 42.0,
            t_load_ref_s: 6.0,
            peak_ram_bytes: 3 << 30,
            peak_vram_bytes: 5 << 29,
            reference_host_id: "rtx-4070-super-host".into(),
        }
    }

    fn catalog() -> Catalog {
        let mut c = Catalog::new();
        c.insert(host_profile()).unwrap();
        c.insert(gtx_1060()).unwrap();
        c
    }

    fn template(argv: &[&str], timeout_s: f64) -> TaskTemplate {
        TaskTemplate {
            argv: argv.iter().map(|s| s.to_string()).collect(),
            working_dir: ".".into(),
            timeout_s,
            extra_env: BTreeMap::new(),
        }
    }

    #[test]
    fn pid_formatting() {
        let mut buf = [0u8; 24];
        let n = write_pid(&mut buf, 40213);
        assert_eq!(&buf[..n], b"40213\n");
        let n = write_pid(&mut buf, 0);
        assert_eq!(&buf[..n], b"0\n");
    }

    #[test]
    fn placeholders_are_filled() {
        let mut t = template(&["train", "--in", "{params_in}", "--out={params_out}", "{profile_id}#{client_idx}@{round_idx}"], 5.0);
        t.extra_env.insert("TAG".into(), "{profile_id}".into());
        let cmd = t.instantiate(3, 7, "gtx-1060", Path::new("/a/in.bin"), Path::new("/b/out.bin"));
        assert_eq!(cmd.argv, vec!["train", "--in", "/a/in.bin", "--out=/b/out.bin", "gtx-1060#7@3"]);
        assert_eq!(cmd.extra_env["TAG"], "gtx-1060");
    }

    #[test]
    fn simulated_round_is_sequential_and_exact() {
        let catalog = catalog();
        let w = workload();
        let h = HostCapabilities::without_capabilities(host_profile());
        let tmp = tempfile::tempdir().unwrap();
        let ctx = RoundContext {
            mode: RunMode::Simulated,
            host: &h,
            catalog: &catalog,
            enforcer: None,
            workload: Some(&w),
            run_id: "r",
            degrade_allowed: false,
            output_dir: tmp.path(),
            params_in: Path::new("/nonexistent"),
        };
        let fed: Vec<String> = ["rtx-4070-super-host", "gtx-1060", "rtx-4070-super-host"]
            .map(String::from)
            .to_vec();
        let mut timeline = Timeline::new();
        let report = run_round(0, &fed, &template(&["x"], 1e9), &ctx, &mut timeline).unwrap();
        assert_eq!(report.runs.len(), 3);
        assert_eq!(report.runs[0].wall_time_s, 48.0);
        assert!(report.is_sequential());
        assert_eq!(report.runs[2].started_at, report.runs[1].ended_at);
        // No files in simulated mode.
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);

        let report = run_round(1, &[], &template(&["x"], 1.0), &ctx, &mut timeline).unwrap();
        assert!(report.runs.is_empty());

        let short = run_round(2, &fed[..1], &template(&["x"], 10.0), &ctx, &mut timeline).unwrap();
        assert_eq!(short.runs[0].status, RunStatus::Timeout);
        assert_eq!(short.runs[0].wall_time_s, 10.0);

        let err = run_round(3, &["nope".to_string()], &template(&["x"], 1.0), &ctx, &mut timeline);
        assert!(matches!(err, Err(SchedulerError::UnknownProfile(id)) if id == "nope"));
    }

    #[test]
    fn simulated_oom_has_zero_wall_time() {
        let mut small = gtx_1060();
        small.ram_mib = 1024;
        let mut catalog = catalog();
        catalog.insert(HardwareProfile { id: "small".into(), ..small }).unwrap();
        let w = workload();
        let h = HostCapabilities::without_capabilities(host_profile());
        let ctx = RoundContext {
            mode: RunMode::Simulated,
            host: &h,
            catalog: &catalog,
            enforcer: None,
            workload: Some(&w),
            run_id: "r",
            degrade_allowed: false,
            output_dir: Path::new("/nonexistent"),
            params_in: Path::new("/nonexistent"),
        };
        let report = run_round(0, &["small".to_string()], &template(&["x"], 100.0), &ctx, &mut Timeline::new()).unwrap();
        assert_eq!(report.runs[0].status, RunStatus::OomKilled);
        assert_eq!(report.runs[0].wall_time_s, 0.0);
    }

    fn real_ctx<'a>(
        enforcer: &'a Enforcer,
        h: &'a HostCapabilities,
        catalog: &'a Catalog,
        out: &'a Path,
        params_in: &'a Path,
    ) -> RoundContext<'a> {
        RoundContext {
            mode: RunMode::Real,
            host: h,
            catalog,
            enforcer: Some(enforcer),
            workload: None,
            run_id: "r",
            degrade_allowed: false,
            output_dir: out,
            params_in,
        }
    }

    #[test]
    fn real_round_with_mock_backend() {
        let tmp = tempfile::tempdir().unwrap();
        let params_in = tmp.path().join("in.bin");
        fs::write(&params_in, b"params").unwrap();
        let catalog = catalog();
        let h = host();
        let mock = MockBackend::new();
        let enforcer = Enforcer::new(Box::new(mock.clone()));
        let ctx = real_ctx(&enforcer, &h, &catalog, tmp.path(), &params_in);
        let fed: Vec<String> = vec!["gtx-1060".into(), "gtx-1060".into(), "gtx-1060".into(), "gtx-1060".into()];

        // Client 0 copies params (ok), 1 exits 3, 2 exits 0 without output, 3 cannot spawn.
        let script = "case {client_idx} in \
            0) [ \"$BOUQUET_PROFILE_ID\" = gtx-1060 ] && [ \"$CUDA_MPS_ACTIVE_THREAD_PERCENTAGE\" = 18 ] && cp {params_in} {params_out} ;; \
            1) exit 3 ;; \
            2) exit 0 ;; esac";
        let mut t = template(&["sh", "-c", script], 10.0);
        let mut timeline = Timeline::new();
        let mut runs = run_round(0, &fed[..3], &t, &ctx, &mut timeline).unwrap().runs;
        t.argv = vec!["/definitely/not/here".into()];
        runs.extend(run_round(1, &fed[3..], &t, &ctx, &mut timeline).unwrap().runs);

        assert_eq!(runs[0].status, RunStatus::Ok, "{:?}", runs[0]);
        let out = runs[0].params_out.as_ref().unwrap();
        assert_eq!(fs::read(out).unwrap(), b"params");
        assert_eq!(runs[1].status, RunStatus::NonzeroExit { code: 3 });
        assert_eq!(runs[2].status, RunStatus::MissingOutput);
        assert_eq!(runs[3].status, RunStatus::SpawnFailed);
        assert!(runs[3].detail.as_deref().unwrap().contains("not found"));
        assert!(!enforcer.has_active_lease());
        assert!(mock.snapshot().cgroups.is_empty());
        for w in runs.windows(2) {
            assert!(w[0].ended_at <= w[1].started_at);
        }
    }

    #[test]
    fn real_timeout_kills_within_grace() {
        let tmp = tempfile::tempdir().unwrap();
        let params_in = tmp.path().join("in.bin");
        fs::write(&params_in, b"p").unwrap();
        let catalog = catalog();
        let h = host();
        let enforcer = Enforcer::new(Box::new(MockBackend::new()));
        let ctx = real_ctx(&enforcer, &h, &catalog, tmp.path(), &params_in);
        // Ignores SIGTERM so the SIGKILL path is exercised too.
        let t = template(&["sh", "-c", "trap '' TERM; while :; do sleep 0.05; done"], 0.3);
        let report = run_round(0, &["gtx-1060".to_string()], &t, &ctx, &mut Timeline::new()).unwrap();
        let run = &report.runs[0];
        assert_eq!(run.status, RunStatus::Timeout);
        assert!(run.wall_time_s >= 0.3 && run.wall_time_s <= 0.3 + KILL_GRACE.as_secs_f64() + 0.5, "{}", run.wall_time_s);
        assert!(!enforcer.has_active_lease());
    }

    #[test]
    fn real_mode_refuses_unemulable_profiles_up_front() {
        let tmp = tempfile::tempdir().unwrap();
        let mut big = gtx_1060();
        big.id = "big".into();
        big.ram_mib = 1 << 20;
        let mut catalog = catalog();
        catalog.insert(big).unwrap();
        let h = host();
        let enforcer = Enforcer::new(Box::new(MockBackend::new()));
        let ctx = real_ctx(&enforcer, &h, &catalog, tmp.path(), tmp.path());
        let fed = vec!["gtx-1060".to_string(), "big".to_string()];
        let err = run_round(0, &fed, &template(&["true"], 1.0), &ctx, &mut Timeline::new()).unwrap_err();
        assert!(matches!(err, SchedulerError::NotEmulable(_)));
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    }
}
