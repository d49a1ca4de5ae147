use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::cgroup;
use super::runner::{run_checked, CommandRunner};
use super::{
    ActionKind, ActionRecord, Backend, BackendCapabilityReport, EnforcerError, Mechanism,
    PlannedAction, ResetOutcome, ResetReport, PRIVILEGE_REASON,
};

pub const ENV_STATE_DIR: &str = "BOUQUET_STATE_DIR";

const MARK_GPU_CORE: &str = "gpu-core-clock-locked";
const MARK_GPU_MEM: &str = "gpu-mem-clock-locked";
const MARK_MPS: &str = "mps-daemon-owned";

const CPUPOWER: &str = "cpupower";
const NVIDIA_SMI: &str = "nvidia-smi";
const MPS_CONTROL: &str = "nvidia-cuda-mps-control";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinuxConfig {
    pub cgroup_root: Option<PathBuf>,
    /// Usually `/sys/devices/system/cpu`.
    pub sys_cpu_root: PathBuf,
    /// Marker files for state that has no readable trace on the host
    /// (locked GPU clocks, an MPS daemon we started).
    pub state_dir: PathBuf,
    pub privileged: bool,
}

impl LinuxConfig {
    pub fn from_env(privileged: bool) -> Result<Self, EnforcerError> {
        let state_dir = std::env::var_os(ENV_STATE_DIR)
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("bouquet-state"));
        Ok(LinuxConfig {
            cgroup_root: cgroup::detect_root(),
            sys_cpu_root: PathBuf::from("/sys/devices/system/cpu"),
            state_dir,
            privileged,
        })
    }

    /// Everything under one directory; nothing outside it is touched.
    pub fn for_test_root(root: PathBuf) -> Self {
        LinuxConfig {
            sys_cpu_root: root.join("sys-cpu"),
            state_dir: root.join("state"),
            cgroup_root: Some(root),
            privileged: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct CpuFreqState {
    pub cpu: usize,
    pub scaling_max_khz: u64,
    pub hw_max_khz: Option<u64>,
}

pub(crate) fn read_cpufreq(sys_cpu_root: &Path) -> Vec<CpuFreqState> {
    let mut out: Vec<CpuFreqState> = fs::read_dir(sys_cpu_root)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let cpu: usize = name.strip_prefix("cpu")?.parse().ok()?;
            let dir = e.path().join("cpufreq");
            let read = |f: &str| -> Option<u64> { fs::read_to_string(dir.join(f)).ok()?.trim().parse().ok() };
            Some(CpuFreqState {
                cpu,
                scaling_max_khz: read("scaling_max_freq")?,
                hw_max_khz: read("cpuinfo_max_freq"),
            })
        })
        .collect();
    out.sort_by_key(|s| s.cpu);
    out
}

/// Linux host controls: cgroup v2 for memory, `cpupower` for CPU frequency,
/// `nvidia-smi` for GPU clocks and the MPS control daemon for compute share.
pub struct LinuxBackend {
    id: String,
    config: LinuxConfig,
    runner: Box<dyn CommandRunner>,
    caps: BackendCapabilityReport,
    mps_owned: Mutex<bool>,
}

impl LinuxBackend {
    pub fn new(
        id: impl Into<String>,
        config: LinuxConfig,
        runner: Box<dyn CommandRunner>,
        mut caps: BackendCapabilityReport,
    ) -> Self {
        let id = id.into();
        caps.backend_id = id.clone();
        LinuxBackend {
            id,
            config,
            runner,
            caps,
            mps_owned: Mutex::new(false),
        }
    }

    pub fn config(&self) -> &LinuxConfig {
        &self.config
    }

    fn runner(&self) -> &dyn CommandRunner {
        self.runner.as_ref()
    }

    fn cgroup_root(&self) -> Result<&Path, EnforcerError> {
        self.config.cgroup_root.as_deref().ok_or(EnforcerError::UnsupportedAction {
            mechanism: Mechanism::MemoryCgroup,
            reason: "no cgroup v2 hierarchy found".into(),
        })
    }

    fn marker(&self, name: &str) -> PathBuf {
        self.config.state_dir.join(name)
    }

    fn set_marker(&self, name: &str) -> Result<(), EnforcerError> {
        let io = |source| EnforcerError::Io {
            context: format!("writing marker in {}", self.config.state_dir.display()),
            source,
        };
        fs::create_dir_all(&self.config.state_dir).map_err(io)?;
        fs::write(self.marker(name), std::process::id().to_string()).map_err(io)
    }

    fn clear_marker(&self, name: &str) {
        let _ = fs::remove_file(self.marker(name));
    }

    fn smi(&self, args: &[&str]) -> Result<String, EnforcerError> {
        let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        run_checked(self.runner(), NVIDIA_SMI, &args, None)
    }

    fn cpupower(&self, cpu: Option<usize>, khz: u64) -> Result<String, EnforcerError> {
        let mut args = Vec::new();
        if let Some(c) = cpu {
            args.extend(["-c".to_string(), c.to_string()]);
        }
        args.extend(["frequency-set".to_string(), "-u".to_string(), format!("{khz}kHz")]);
        run_checked(self.runner(), CPUPOWER, &args, None)
    }

    fn ensure_mps_daemon(&self) -> Result<(), EnforcerError> {
        let mut owned = self.mps_owned.lock().unwrap();
        if *owned {
            return Ok(());
        }
        match run_checked(self.runner(), MPS_CONTROL, &["-d".to_string()], None) {
            Ok(_) => {
                *owned = true;
                self.set_marker(MARK_MPS)?;
            }
            // Already running under someone else; we use it but do not own it.
            Err(e) => log::info!("not starting MPS daemon: {e}"),
        }
        Ok(())
    }

    fn stop_mps_daemon(&self) -> Result<(), EnforcerError> {
        run_checked(self.runner(), MPS_CONTROL, &[], Some("quit\n"))?;
        self.clear_marker(MARK_MPS);
        Ok(())
    }
}

impl Backend for LinuxBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> &BackendCapabilityReport {
        &self.caps
    }

    fn apply_action(&self, action: &PlannedAction) -> Result<Option<String>, EnforcerError> {
        match action.kind {
            ActionKind::CpuFreqCap => {
                let khz: u64 = action.new_value.parse().map_err(|_| {
                    EnforcerError::Config(format!("bad frequency '{}'", action.new_value))
                })?;
                let prior = read_cpufreq(&self.config.sys_cpu_root);
                self.cpupower(None, khz)?;
                Ok((!prior.is_empty()).then(|| {
                    prior
                        .iter()
                        .map(|s| format!("{}={}", s.cpu, s.scaling_max_khz))
                        .collect::<Vec<_>>()
                        .join(",")
                }))
            }
            ActionKind::MemoryCgroup => {
                let root = self.cgroup_root()?;
                let leaf = cgroup::create_leaf(root, &action.target).map_err(|e| {
                    if e.kind() == std::io::ErrorKind::AlreadyExists {
                        EnforcerError::LeaseHeld(format!("cgroup {} already exists", action.target))
                    } else {
                        EnforcerError::Io {
                            context: format!("creating cgroup {}", action.target),
                            source: e,
                        }
                    }
                })?;
                let bytes: u64 = action.new_value.parse().unwrap_or(u64::MAX);
                if let Err(e) = cgroup::write_memory_max(&leaf, bytes) {
                    let _ = cgroup::remove_leaf(root, &leaf);
                    return Err(EnforcerError::Io {
                        context: format!("writing memory.max in {}", leaf.display()),
                        source: e,
                    });
                }
                Ok(None)
            }
            ActionKind::GpuCoreClockCap => {
                self.smi(&["-lgc", &format!("0,{}", action.new_value)])?;
                self.set_marker(MARK_GPU_CORE)?;
                Ok(Some("default".into()))
            }
            ActionKind::GpuMemClockCap => {
                self.smi(&["-lmc", &format!("0,{}", action.new_value)])?;
                self.set_marker(MARK_GPU_MEM)?;
                Ok(Some("default".into()))
            }
            ActionKind::MpsActiveThreads => {
                // The percentage itself travels in the child's environment.
                self.ensure_mps_daemon()?;
                Ok(None)
            }
            // Cooperative: the child applies the fraction to its own allocator.
            ActionKind::VramFraction => Ok(None),
        }
    }

    fn restore_action(&self, record: &ActionRecord) -> Result<(), EnforcerError> {
        match record.kind {
            ActionKind::CpuFreqCap => {
                let targets: Vec<(Option<usize>, u64)> = match &record.prior_value {
                    Some(prior) => prior
                        .split(',')
                        .filter_map(|kv| {
                            let (cpu, khz) = kv.split_once('=')?;
                            Some((Some(cpu.parse().ok()?), khz.parse().ok()?))
                        })
                        .collect(),
                    None => read_cpufreq(&self.config.sys_cpu_root)
                        .into_iter()
                        .filter_map(|s| Some((Some(s.cpu), s.hw_max_khz?)))
                        .collect(),
                };
                let failures: Vec<String> = targets
                    .into_iter()
                    .filter_map(|(cpu, khz)| self.cpupower(cpu, khz).err().map(|e| e.to_string()))
                    .collect();
                if failures.is_empty() {
                    Ok(())
                } else {
                    Err(EnforcerError::RestoreFailed(failures))
                }
            }
            ActionKind::MemoryCgroup => {
                let root = self.cgroup_root()?;
                let leaf = cgroup::owner_dir(root).join(&record.target);
                cgroup::remove_leaf(root, &leaf).map_err(|e| EnforcerError::Io {
                    context: format!("removing cgroup {}", leaf.display()),
                    source: e,
                })
            }
            ActionKind::GpuCoreClockCap => {
                self.smi(&["-rgc"])?;
                self.clear_marker(MARK_GPU_CORE);
                Ok(())
            }
            ActionKind::GpuMemClockCap => {
                self.smi(&["-rmc"])?;
                self.clear_marker(MARK_GPU_MEM);
                Ok(())
            }
            ActionKind::MpsActiveThreads | ActionKind::VramFraction => Ok(()),
        }
    }

    fn cgroup_path(&self, target: &str) -> Option<PathBuf> {
        self.config
            .cgroup_root
            .as_deref()
            .map(|root| cgroup::owner_dir(root).join(target))
    }

    fn stale_state(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .config
            .cgroup_root
            .as_deref()
            .map(cgroup::list_leaves)
            .unwrap_or_default()
            .into_iter()
            .map(|p| format!("cgroup {}", p.display()))
            .collect();
        for mark in [MARK_GPU_CORE, MARK_GPU_MEM] {
            if self.marker(mark).exists() {
                out.push(format!("marker {mark}"));
            }
        }
        if self.marker(MARK_MPS).exists() && !*self.mps_owned.lock().unwrap() {
            out.push(format!("marker {MARK_MPS}"));
        }
        out
    }

    fn emergency_reset(&self) -> ResetReport {
        let mut report = ResetReport::default();
        if !self.config.privileged {
            for action in ["cpu_freq_reset", "cgroup_cleanup", "gpu_clock_reset", "mps_daemon_stop"] {
                report.push(action, "host", ResetOutcome::Skipped { reason: PRIVILEGE_REASON.into() });
            }
            return report;
        }
        let outcome = |r: Result<(), String>| match r {
            Ok(()) => ResetOutcome::Done,
            Err(error) => ResetOutcome::Failed { error },
        };

        for s in read_cpufreq(&self.config.sys_cpu_root) {
            if let Some(hw) = s.hw_max_khz.filter(|hw| *hw != s.scaling_max_khz) {
                let r = self.cpupower(Some(s.cpu), hw).map(|_| ()).map_err(|e| e.to_string());
                report.push("cpu_freq_reset", format!("cpu{}", s.cpu), outcome(r));
            }
        }

        if let Some(root) = self.config.cgroup_root.as_deref() {
            for leaf in cgroup::list_leaves(root) {
                let r = cgroup::remove_leaf(root, &leaf).map_err(|e| e.to_string());
                report.push("cgroup_remove", leaf.display().to_string(), outcome(r));
            }
        }

        for (mark, flag, action) in [
            (MARK_GPU_CORE, "-rgc", "gpu_core_clock_reset"),
            (MARK_GPU_MEM, "-rmc", "gpu_mem_clock_reset"),
        ] {
            if self.marker(mark).exists() {
                let r = self.smi(&[flag]).map(|_| ()).map_err(|e| e.to_string());
                if r.is_ok() {
                    self.clear_marker(mark);
                }
                report.push(action, "gpu0", outcome(r));
            }
        }

        if self.marker(MARK_MPS).exists() {
            let r = self.stop_mps_daemon().map_err(|e| e.to_string());
            if r.is_ok() {
                *self.mps_owned.lock().unwrap() = false;
            }
            report.push("mps_daemon_stop", "mps", outcome(r));
        }
        report
    }

    fn shutdown(&self) {
        let mut owned = self.mps_owned.lock().unwrap();
        if *owned {
            if let Err(e) = self.stop_mps_daemon() {
                log::error!("stopping MPS daemon: {e}");
            }
            *owned = false;
        }
    }
}
