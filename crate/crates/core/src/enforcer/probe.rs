//! Read-only host inspection.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::linux::read_cpufreq;
use super::runner::CommandRunner;
use super::{cgroup, BackendCapabilityReport, Mechanism, PRIVILEGE_REASON};
use crate::profiles::{Catalog, CpuSpec, GpuSpec, HardwareProfile, HostCapabilities};

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub proc_root: PathBuf,
    pub sys_cpu_root: PathBuf,
    pub cgroup_root: Option<PathBuf>,
    pub euid: u32,
    /// Used to resolve the GPU's model name to a full spec (CUDA cores are
    /// not reported by the management tool).
    pub catalog: Option<Catalog>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            proc_root: PathBuf::from("/proc"),
            sys_cpu_root: PathBuf::from("/sys/devices/system/cpu"),
            cgroup_root: cgroup::detect_root(),
            // SAFETY: geteuid has no preconditions.
            euid: unsafe { libc::geteuid() },
            catalog: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub host: HostCapabilities,
    pub report: BackendCapabilityReport,
}

pub(crate) fn allowed_cpus() -> Vec<usize> {
    // SAFETY: cpu_set_t is plain data; sched_getaffinity fills it for pid 0 (self).
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
            return vec![0];
        }
        (0..libc::CPU_SETSIZE as usize)
            .filter(|&c| libc::CPU_ISSET(c, &set))
            .collect()
    }
}

fn probe_cpu(cfg: &ProbeConfig) -> CpuSpec {
    let cpuinfo = fs::read_to_string(cfg.proc_root.join("cpuinfo")).unwrap_or_default();
    let mut model = None;
    let mut threads = 0u32;
    let mut mhz: Option<f64> = None;
    let mut physical: Option<String> = None;
    let mut cores = BTreeSet::new();
    for line in cpuinfo.lines() {
        let Some((key, value)) = line.split_once(':') else { continue };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "processor" => threads += 1,
            "model name" if model.is_none() => model = Some(value.to_string()),
            "cpu MHz" if mhz.is_none() => mhz = value.parse().ok(),
            "physical id" => physical = Some(value.to_string()),
            "core id" => {
                cores.insert((physical.clone().unwrap_or_default(), value.to_string()));
            }
            _ => {}
        }
    }
    let threads = threads.max(1);
    let allowed = allowed_cpus().len().max(1) as u32;
    let cores = (if cores.is_empty() { threads } else { cores.len() as u32 })
        .clamp(1, threads)
        .min(allowed);

    let freq = read_cpufreq(&cfg.sys_cpu_root);
    let boost_khz = freq.iter().filter_map(|s| s.hw_max_khz).max();
    let base_khz = fs::read_to_string(cfg.sys_cpu_root.join("cpu0/cpufreq/base_frequency"))
        .ok()
        .and_then(|s| s.trim().parse::<u64>().ok());
    let fallback = mhz.map(|m| m.round() as u32).filter(|&m| m > 0).unwrap_or(1);
    let boost = boost_khz.map(|k| (k / 1000) as u32).filter(|&m| m > 0).unwrap_or(fallback);
    let base = base_khz
        .map(|k| (k / 1000) as u32)
        .filter(|&m| m > 0)
        .unwrap_or(boost.min(fallback))
        .min(boost);

    CpuSpec {
        model_name: model.unwrap_or_else(|| "unknown".into()),
        cores,
        threads: threads.max(cores),
        base_clock_mhz: base.max(1),
        boost_clock_mhz: boost.max(1),
    }
}

fn probe_ram_mib(cfg: &ProbeConfig) -> u64 {
    fs::read_to_string(cfg.proc_root.join("meminfo"))
        .ok()
        .and_then(|m| {
            m.lines().find_map(|l| {
                let rest = l.strip_prefix("MemTotal:")?;
                rest.split_whitespace().next()?.parse::<u64>().ok()
            })
        })
        .map(|kib| kib / 1024)
        .unwrap_or(1)
        .max(1)
}

struct SmiGpu {
    name: String,
    vram_mib: u64,
    max_graphics_mhz: Option<u32>,
}

fn query_gpu(runner: &dyn CommandRunner) -> Option<SmiGpu> {
    let args = [
        "--query-gpu=name,memory.total,clocks.max.graphics",
        "--format=csv,noheader,nounits",
    ]
    .map(String::from);
    let out = runner.run("nvidia-smi", &args, None).ok()?;
    if !out.ok() {
        return None;
    }
    let line = out.stdout.lines().next()?;
    let mut fields = line.split(',').map(str::trim);
    Some(SmiGpu {
        name: fields.next()?.to_string(),
        vram_mib: fields.next()?.parse().ok()?,
        max_graphics_mhz: fields.next().and_then(|f| f.parse().ok()),
    })
}

fn resolve_gpu(smi: &SmiGpu, catalog: Option<&Catalog>) -> Option<GpuSpec> {
    let wanted = smi.name.to_lowercase();
    catalog?
        .iter()
        .filter_map(|p| p.gpu.as_ref())
        .find(|g| {
            let known = g.model_name.to_lowercase();
            wanted.contains(&known) || known.contains(&wanted)
        })
        .cloned()
        .map(|mut g| {
            g.vram_mib = g.vram_mib.min(smi.vram_mib.max(1));
            if let Some(mhz) = smi.max_graphics_mhz.filter(|&m| m >= g.base_clock_mhz) {
                g.boost_clock_mhz = g.boost_clock_mhz.min(mhz);
            }
            g
        })
}

/// Inspects CPU, memory, GPU, cgroup support and privilege. Changes nothing
/// except a scratch cgroup created and removed to verify memory limits work.
pub fn probe_host(cfg: &ProbeConfig, runner: &dyn CommandRunner) -> ProbeResult {
    let privileged = cfg.euid == 0;
    let cpu = probe_cpu(cfg);
    let ram_mib = probe_ram_mib(cfg);

    let has_smi = runner.exists("nvidia-smi");
    let smi_gpu = if has_smi { query_gpu(runner) } else { None };
    let gpu = smi_gpu.as_ref().and_then(|g| resolve_gpu(g, cfg.catalog.as_ref()));
    let has_mps = runner.exists("nvidia-cuda-mps-control");

    let has_cgroup_v2 = cfg
        .cgroup_root
        .as_deref()
        .is_some_and(|r| cgroup::is_cgroup2_fs(r) && r.join("cgroup.controllers").exists());
    let has_cpu_freq = runner.exists("cpupower") && !read_cpufreq(&cfg.sys_cpu_root).is_empty();

    let mut report = BackendCapabilityReport::new("linux");
    let privilege = || Some(PRIVILEGE_REASON.to_string());

    if !privileged {
        report.set(Mechanism::CpuFreq, false, privilege());
    } else if !runner.exists("cpupower") {
        report.set(Mechanism::CpuFreq, false, Some("cpupower not found".into()));
    } else if !has_cpu_freq {
        report.set(Mechanism::CpuFreq, false, Some("cpufreq sysfs interface not present".into()));
    } else {
        report.set(Mechanism::CpuFreq, true, None);
    }

    report.set(Mechanism::CpuAffinity, true, None);

    match (&cfg.cgroup_root, privileged) {
        (_, false) => report.set(Mechanism::MemoryCgroup, false, privilege()),
        (None, _) => report.set(Mechanism::MemoryCgroup, false, Some("no cgroup v2 mount found".into())),
        (Some(root), true) => match cgroup::memory_roundtrip_probe(root) {
            Ok(()) => report.set(Mechanism::MemoryCgroup, true, None),
            Err(reason) => report.set(Mechanism::MemoryCgroup, false, Some(reason)),
        },
    }

    let no_gpu_reason = if !has_smi {
        "nvidia-smi not found".to_string()
    } else if smi_gpu.is_none() {
        "nvidia-smi reported no GPU".to_string()
    } else if gpu.is_none() {
        format!(
            "GPU '{}' not found in the profile catalog",
            smi_gpu.as_ref().map(|g| g.name.as_str()).unwrap_or("")
        )
    } else {
        String::new()
    };
    let gpu_ok = gpu.is_some();

    if !gpu_ok {
        report.set(Mechanism::GpuClock, false, Some(no_gpu_reason.clone()));
    } else if !privileged {
        report.set(Mechanism::GpuClock, false, privilege());
    } else {
        report.set(Mechanism::GpuClock, true, None);
    }
    if !gpu_ok {
        report.set(Mechanism::GpuMps, false, Some(no_gpu_reason.clone()));
    } else if !has_mps {
        report.set(Mechanism::GpuMps, false, Some("nvidia-cuda-mps-control not found".into()));
    } else {
        report.set(Mechanism::GpuMps, true, None);
    }
    if gpu_ok {
        report.set(
            Mechanism::VramHint,
            true,
            Some("cooperative: the child applies the fraction to its allocator".into()),
        );
    } else {
        report.set(Mechanism::VramHint, false, Some(no_gpu_reason));
    }

    let host = HostCapabilities {
        hardware: HardwareProfile {
            id: "probed-host".into(),
            cpu,
            gpu,
            ram_mib,
        },
        has_gpu_management_tool: has_smi,
        has_mps,
        has_cgroup_v2,
        has_cpu_freq_control: has_cpu_freq,
        is_privileged: privileged,
    };
    ProbeResult { host, report }
}
