//! Hardware profiles, the host description, and the translation of a profile
//! into host-relative limits.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Fraction, MIB};

pub const ENV_MPS_PCT: &str = "CUDA_MPS_ACTIVE_THREAD_PERCENTAGE";
pub const ENV_VRAM_FRACTION: &str = "BOUQUET_VRAM_FRACTION";
pub const ENV_CPU_CORES: &str = "BOUQUET_CPU_CORES";
pub const ENV_PROFILE_ID: &str = "BOUQUET_PROFILE_ID";
pub const ENV_GPU_DISABLED: &str = "BOUQUET_GPU_DISABLED";
pub const ENV_CUDA_VISIBLE_DEVICES: &str = "CUDA_VISIBLE_DEVICES";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpuSpec {
    pub model_name: String,
    /// Physical cores.
    pub cores: u32,
    pub threads: u32,
    pub base_clock_mhz: u32,
    pub boost_clock_mhz: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSpec {
    pub model_name: String,
    pub cuda_cores: u32,
    pub base_clock_mhz: u32,
    pub boost_clock_mhz: u32,
    pub vram_mib: u64,
    /// Family label such as `"GTX 10"` or `"RTX 30"`.
    pub generation: String,
    /// Memory clock as reported by the vendor management tool. Optional; when
    /// absent no memory clock cap is planned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_clock_mhz: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub id: String,
    pub cpu: CpuSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu: Option<GpuSpec>,
    pub ram_mib: u64,
}

impl HardwareProfile {
    pub fn ram_bytes(&self) -> u64 {
        self.ram_mib.saturating_mul(MIB)
    }

    /// Checks the per-type invariants. Returns the first broken rule.
    pub fn check_invariants(&self) -> Result<(), ProfileError> {
        let fail = |field: &str, rule: &str| {
            Err(ProfileError::InvariantViolation {
                profile: self.id.clone(),
                field: field.to_string(),
                rule: rule.to_string(),
            })
        };
        if self.id.trim().is_empty() {
            return fail("id", "id must be nonempty");
        }
        let cpu = &self.cpu;
        if cpu.cores < 1 {
            return fail("cpu.cores", "cores >= 1");
        }
        if cpu.threads < cpu.cores {
            return fail("cpu.threads", "threads >= cores");
        }
        if cpu.base_clock_mhz == 0 {
            return fail("cpu.base_clock_mhz", "base_clock_mhz > 0");
        }
        if cpu.boost_clock_mhz < cpu.base_clock_mhz {
            return fail("cpu.boost_clock_mhz", "boost_clock_mhz >= base_clock_mhz");
        }
        if let Some(gpu) = &self.gpu {
            if gpu.cuda_cores < 1 {
                return fail("gpu.cuda_cores", "cuda_cores >= 1");
            }
            if gpu.base_clock_mhz == 0 {
                return fail("gpu.base_clock_mhz", "base_clock_mhz > 0");
            }
            if gpu.boost_clock_mhz < gpu.base_clock_mhz {
                return fail("gpu.boost_clock_mhz", "boost_clock_mhz >= base_clock_mhz");
            }
            if gpu.vram_mib < 1 {
                return fail("gpu.vram_mib", "vram_mib >= 1");
            }
            if gpu.mem_clock_mhz == Some(0) {
                return fail("gpu.mem_clock_mhz", "mem_clock_mhz > 0");
            }
        }
        if self.ram_mib < 1 {
            return fail("ram_mib", "ram_mib >= 1");
        }
        Ok(())
    }
}

/// What the orchestrator knows about the machine it runs on.
///
/// The hardware part has the same shape as a profile; the flags are only ever
/// set from probe results.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostCapabilities {
    pub hardware: HardwareProfile,
    pub has_gpu_management_tool: bool,
    pub has_mps: bool,
    pub has_cgroup_v2: bool,
    pub has_cpu_freq_control: bool,
    pub is_privileged: bool,
}

impl HostCapabilities {
    /// A host description with every capability flag cleared.
    pub fn without_capabilities(hardware: HardwareProfile) -> Self {
        HostCapabilities {
            hardware,
            has_gpu_management_tool: false,
            has_mps: false,
            has_cgroup_v2: false,
            has_cpu_freq_control: false,
            is_privileged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnforcementPlan {
    pub profile_id: String,
    pub gpu_active_thread_pct: Option<u8>,
    pub gpu_core_clock_cap_mhz: Option<u32>,
    pub gpu_mem_clock_cap_mhz: Option<u32>,
    pub vram_fraction: Option<Fraction>,
    pub cpu_freq_cap_khz: Option<u64>,
    pub cpu_core_count: u32,
    pub memory_max_bytes: u64,
    pub child_env: BTreeMap<String, String>,
}

impl EnforcementPlan {
    /// A plan that only caps memory. Mostly useful for tests and probes.
    pub fn memory_only(profile_id: &str, memory_max_bytes: u64, cpu_core_count: u32) -> Self {
        let mut child_env = BTreeMap::new();
        child_env.insert(ENV_CPU_CORES.to_string(), cpu_core_count.to_string());
        child_env.insert(ENV_PROFILE_ID.to_string(), profile_id.to_string());
        child_env.insert(ENV_GPU_DISABLED.to_string(), "1".to_string());
        child_env.insert(ENV_CUDA_VISIBLE_DEVICES.to_string(), String::new());
        EnforcementPlan {
            profile_id: profile_id.to_string(),
            gpu_active_thread_pct: None,
            gpu_core_clock_cap_mhz: None,
            gpu_mem_clock_cap_mhz: None,
            vram_fraction: None,
            cpu_freq_cap_khz: None,
            cpu_core_count,
            memory_max_bytes,
            child_env,
        }
    }
}

/// Renders a fraction as the shortest decimal that parses back to the same
/// `f64`, e.g. `1/2` → `"0.5"`, `1` → `"1"`.
pub fn fraction_to_decimal(f: &Fraction) -> String {
    let v = *f.numer() as f64 / *f.denom() as f64;
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    CpuCores { profile: u32, host: u32 },
    CpuClock { profile: u32, host: u32 },
    Ram { profile: u64, host: u64 },
    HostHasNoGpu,
    GpuCores { profile: u32, host: u32 },
    GpuClock { profile: u32, host: u32 },
    GpuMemClock { profile: u32, host: u32 },
    Vram { profile: u64, host: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::CpuCores { profile, host } => {
                write!(f, "CPU cores: profile {profile} > host {host}")
            }
            Violation::CpuClock { profile, host } => {
                write!(f, "CPU boost clock: profile {profile} MHz > host {host} MHz")
            }
            Violation::Ram { profile, host } => {
                write!(f, "RAM: profile {profile} MiB > host {host} MiB")
            }
            Violation::HostHasNoGpu => write!(f, "GPU: profile has a GPU, host has none"),
            Violation::GpuCores { profile, host } => {
                write!(f, "GPU cores: profile {profile} > host {host}")
            }
            Violation::GpuClock { profile, host } => {
                write!(f, "GPU boost clock: profile {profile} MHz > host {host} MHz")
            }
            Violation::GpuMemClock { profile, host } => {
                write!(f, "GPU memory clock: profile {profile} MHz > host {host} MHz")
            }
            Violation::Vram { profile, host } => {
                write!(f, "VRAM: profile {profile} MiB > host {host} MiB")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub profile_id: String,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_emulable(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "profile '{}' is not emulable on this host: ", self.profile_id)?;
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate profile id '{0}'")]
    DuplicateId(String),
    #[error("profile '{profile}': field {field} violates {rule}")]
    InvariantViolation {
        profile: String,
        field: String,
        rule: String,
    },
    #[error("{0}")]
    NotEmulable(ValidationReport),
    #[error("unknown profile id '{0}'")]
    UnknownId(String),
}

/// Profiles keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    profiles: BTreeMap<String, HardwareProfile>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_profiles(
        profiles: impl IntoIterator<Item = HardwareProfile>,
    ) -> Result<Self, ProfileError> {
        let mut catalog = Catalog::new();
        for p in profiles {
            catalog.insert(p)?;
        }
        Ok(catalog)
    }

    pub fn insert(&mut self, profile: HardwareProfile) -> Result<(), ProfileError> {
        profile.check_invariants()?;
        if self.profiles.contains_key(&profile.id) {
            return Err(ProfileError::DuplicateId(profile.id));
        }
        self.profiles.insert(profile.id.clone(), profile);
        Ok(())
    }

    /// Adds every profile of `other`; ids must not collide.
    pub fn merge(&mut self, other: Catalog) -> Result<(), ProfileError> {
        for (_, p) in other.profiles {
            self.insert(p)?;
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&HardwareProfile> {
        self.profiles.get(id)
    }

    pub fn resolve(&self, id: &str) -> Result<&HardwareProfile, ProfileError> {
        self.get(id).ok_or_else(|| ProfileError::UnknownId(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.profiles.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &HardwareProfile> {
        self.profiles.values()
    }

    /// Serializes to the catalog file format (a JSON array ordered by id).
    pub fn to_json_string(&self) -> String {
        let list: Vec<&HardwareProfile> = self.profiles.values().collect();
        let mut s = serde_json::to_string_pretty(&list).expect("profiles always serialize");
        s.push('\n');
        s
    }

    pub fn parse_str(content: &str, origin: &str) -> Result<Self, ProfileError> {
        let list: Vec<HardwareProfile> =
            serde_json::from_str(content).map_err(|e| ProfileError::Parse {
                path: origin.to_string(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        Catalog::from_profiles(list)
    }
}

/// Reads a JSON profile catalog. Unknown fields, broken invariants and
/// duplicate ids are all rejected.
pub fn load_profile_catalog(path: impl AsRef<Path>) -> Result<Catalog, ProfileError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Catalog::parse_str(&content, &path.display().to_string())
}

/// Loads several catalog files into one; ids must be unique across all of them.
pub fn load_catalogs<P: AsRef<Path>>(paths: &[P]) -> Result<Catalog, ProfileError> {
    let mut catalog = Catalog::new();
    for p in paths {
        catalog.merge(load_profile_catalog(p)?)?;
    }
    Ok(catalog)
}

/// Lists every reason `profile` cannot be emulated by restricting `host`.
///
/// Restriction can only take resources away, so each capacity of the profile
/// must fit inside the host's.
pub fn validate_against_host(profile: &HardwareProfile, host: &HostCapabilities) -> ValidationReport {
    let hw = &host.hardware;
    let mut violations = Vec::new();
    if profile.cpu.cores > hw.cpu.cores {
        violations.push(Violation::CpuCores {
            profile: profile.cpu.cores,
            host: hw.cpu.cores,
        });
    }
    if profile.cpu.boost_clock_mhz > hw.cpu.boost_clock_mhz {
        violations.push(Violation::CpuClock {
            profile: profile.cpu.boost_clock_mhz,
            host: hw.cpu.boost_clock_mhz,
        });
    }
    if profile.ram_mib > hw.ram_mib {
        violations.push(Violation::Ram {
            profile: profile.ram_mib,
            host: hw.ram_mib,
        });
    }
    if let Some(gpu) = &profile.gpu {
        match &hw.gpu {
            None => violations.push(Violation::HostHasNoGpu),
            Some(host_gpu) => {
                if gpu.cuda_cores > host_gpu.cuda_cores {
                    violations.push(Violation::GpuCores {
                        profile: gpu.cuda_cores,
                        host: host_gpu.cuda_cores,
                    });
                }
                if gpu.boost_clock_mhz > host_gpu.boost_clock_mhz {
                    violations.push(Violation::GpuClock {
                        profile: gpu.boost_clock_mhz,
                        host: host_gpu.boost_clock_mhz,
                    });
                }
                if let (Some(p), Some(h)) = (gpu.mem_clock_mhz, host_gpu.mem_clock_mhz) {
                    if p > h {
                        violations.push(Violation::GpuMemClock { profile: p, host: h });
                    }
                }
                if gpu.vram_mib > host_gpu.vram_mib {
                    violations.push(Violation::Vram {
                        profile: gpu.vram_mib,
                        host: host_gpu.vram_mib,
                    });
                }
            }
        }
    }
    ValidationReport {
        profile_id: profile.id.clone(),
        violations,
    }
}

/// Translates `profile` into limits relative to `host`.
///
/// The GPU compute share is the CUDA-core ratio, rounded up to a whole
/// percent. Clock caps target the profile's boost clocks. Profiles without a
/// GPU get no GPU limits and a child environment that hides the GPU.
pub fn plan_enforcement(
    profile: &HardwareProfile,
    host: &HostCapabilities,
) -> Result<EnforcementPlan, ProfileError> {
    let report = validate_against_host(profile, host);
    if !report.is_emulable() {
        return Err(ProfileError::NotEmulable(report));
    }

    let mut plan = EnforcementPlan::memory_only(&profile.id, profile.ram_bytes(), profile.cpu.cores);
    plan.cpu_freq_cap_khz = Some(u64::from(profile.cpu.boost_clock_mhz) * 1000);

    if let (Some(gpu), Some(host_gpu)) = (&profile.gpu, &host.hardware.gpu) {
        let pct = ceil_div(100 * u64::from(gpu.cuda_cores), u64::from(host_gpu.cuda_cores));
        let pct = pct.clamp(1, 100) as u8;
        let fraction = Fraction::new(gpu.vram_mib, host_gpu.vram_mib);
        plan.gpu_active_thread_pct = Some(pct);
        plan.gpu_core_clock_cap_mhz = Some(gpu.boost_clock_mhz);
        plan.gpu_mem_clock_cap_mhz = gpu.mem_clock_mhz;
        plan.child_env.insert(ENV_MPS_PCT.to_string(), pct.to_string());
        plan.child_env
            .insert(ENV_VRAM_FRACTION.to_string(), fraction_to_decimal(&fraction));
        plan.child_env.insert(ENV_GPU_DISABLED.to_string(), "0".to_string());
        plan.child_env.remove(ENV_CUDA_VISIBLE_DEVICES);
        plan.vram_fraction = Some(fraction);
    }
    Ok(plan)
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

#[cfg(test)]
pub(crate) mod test_fixtures {
    use super::*;

    pub fn ryzen_1800x() -> CpuSpec {
        CpuSpec {
            model_name: "AMD Ryzen 7 1800X".into(),
            cores: 8,
            threads: 16,
            base_clock_mhz: 3600,
            boost_clock_mhz: 4000,
        }
    }

    pub fn gpu(name: &str, cores: u32, base: u32, boost: u32, vram: u64, gen: &str) -> GpuSpec {
        GpuSpec {
            model_name: name.into(),
            cuda_cores: cores,
            base_clock_mhz: base,
            boost_clock_mhz: boost,
            vram_mib: vram,
            generation: gen.into(),
            mem_clock_mhz: None,
        }
    }

    pub fn host_profile() -> HardwareProfile {
        HardwareProfile {
            id: "rtx-4070-super-host".into(),
            cpu: ryzen_1800x(),
            gpu: Some(gpu("GeForce RTX 4070 SUPER", 7168, 1980, 2475, 12288, "RTX 40")),
            ram_mib: 32768,
        }
    }

    pub fn host() -> HostCapabilities {
        HostCapabilities {
            hardware: host_profile(),
            has_gpu_management_tool: true,
            has_mps: true,
            has_cgroup_v2: true,
            has_cpu_freq_control: true,
            is_privileged: true,
        }
    }

    pub fn gtx_1060() -> HardwareProfile {
        HardwareProfile {
            id: "gtx-1060".into(),
            cpu: ryzen_1800x(),
            gpu: Some(gpu("GeForce GTX 1060 6GB", 1280, 1506, 1708, 6144, "GTX 10")),
            ram_mib: 32768,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_fixtures::*;
    use super::*;

    #[test]
    fn identity_profile_gets_full_share() {
        let host = host();
        let plan = plan_enforcement(&host.hardware, &host).unwrap();
        assert_eq!(plan.gpu_active_thread_pct, Some(100));
        assert_eq!(plan.vram_fraction, Some(Fraction::from_integer(1)));
        assert_eq!(plan.gpu_core_clock_cap_mhz, Some(2475));
        assert_eq!(plan.cpu_freq_cap_khz, Some(4_000_000));
        assert_eq!(plan.cpu_core_count, 8);
        assert_eq!(plan.child_env[ENV_VRAM_FRACTION], "1");
        assert_eq!(plan.child_env[ENV_MPS_PCT], "100");
    }

    #[test]
    fn gtx_1060_on_4070_super() {
        // ceil(100 * 1280 / 7168) = ceil(17.857...) = 18; 6144 / 12288 = 1/2
        let plan = plan_enforcement(&gtx_1060(), &host()).unwrap();
        assert_eq!(plan.gpu_active_thread_pct, Some(18));
        assert_eq!(plan.vram_fraction, Some(Fraction::new(1, 2)));
        assert_eq!(plan.child_env[ENV_VRAM_FRACTION], "0.5");
        assert_eq!(plan.child_env[ENV_GPU_DISABLED], "0");
        assert_eq!(plan.child_env[ENV_PROFILE_ID], "gtx-1060");
    }

    #[test]
    fn ram_unit_conversion() {
        let mut p = gtx_1060();
        p.ram_mib = 8192;
        let plan = plan_enforcement(&p, &host()).unwrap();
        assert_eq!(plan.memory_max_bytes, 8_589_934_592);
    }

    #[test]
    fn tiny_gpu_share_clamps_to_one_percent() {
        let mut host = host();
        host.hardware.gpu.as_mut().unwrap().cuda_cores = 100_000;
        let plan = plan_enforcement(&gtx_1060(), &host).unwrap();
        assert_eq!(plan.gpu_active_thread_pct, Some(2));
        let mut p = gtx_1060();
        p.gpu.as_mut().unwrap().cuda_cores = 1;
        let plan = plan_enforcement(&p, &host).unwrap();
        assert_eq!(plan.gpu_active_thread_pct, Some(1));
    }

    #[test]
    fn cpu_only_profile_disables_gpu() {
        let mut p = gtx_1060();
        p.gpu = None;
        let plan = plan_enforcement(&p, &host()).unwrap();
        assert!(plan.gpu_active_thread_pct.is_none());
        assert!(plan.gpu_core_clock_cap_mhz.is_none());
        assert!(plan.vram_fraction.is_none());
        assert_eq!(plan.child_env[ENV_GPU_DISABLED], "1");
        assert!(!plan.child_env.contains_key(ENV_MPS_PCT));
    }

    #[test]
    fn identity_validates_clean() {
        let host = host();
        assert!(validate_against_host(&host.hardware, &host).is_emulable());
    }

    #[test]
    fn one_mib_too_much_ram() {
        let host = host();
        let mut p = host.hardware.clone();
        p.ram_mib += 1;
        let report = validate_against_host(&p, &host);
        assert_eq!(
            report.violations,
            vec![Violation::Ram { profile: 32769, host: 32768 }]
        );
    }

    #[test]
    fn rtx_3080_exceeds_host_cores() {
        let mut p = gtx_1060();
        p.gpu = Some(gpu("GeForce RTX 3080", 8704, 1440, 1710, 10240, "RTX 30"));
        let report = validate_against_host(&p, &host());
        assert_eq!(
            report.violations,
            vec![Violation::GpuCores { profile: 8704, host: 7168 }]
        );
        assert!(matches!(
            plan_enforcement(&p, &host()),
            Err(ProfileError::NotEmulable(_))
        ));
    }

    #[test]
    fn gpu_profile_on_gpuless_host() {
        let mut host = host();
        host.hardware.gpu = None;
        let report = validate_against_host(&gtx_1060(), &host);
        assert_eq!(report.violations, vec![Violation::HostHasNoGpu]);
    }

    #[test]
    fn catalog_rejects_boost_below_base() {
        let json = r#"[{"id":"x","cpu":{"model_name":"c","cores":2,"threads":2,
            "base_clock_mhz":3000,"boost_clock_mhz":2000},"ram_mib":1024}]"#;
        match Catalog::parse_str(json, "inline") {
            Err(ProfileError::InvariantViolation { field, .. }) => {
                assert_eq!(field, "cpu.boost_clock_mhz")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn catalog_rejects_unknown_field_with_locus() {
        let json = "[\n{\"id\":\"x\",\"ram_mib\":1,\"colour\":\"red\"}]";
        match Catalog::parse_str(json, "inline") {
            Err(ProfileError::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("colour"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn catalog_rejects_duplicates() {
        let p = gtx_1060();
        let err = Catalog::from_profiles([p.clone(), p]).unwrap_err();
        assert!(matches!(err, ProfileError::DuplicateId(id) if id == "gtx-1060"));
    }

    #[test]
    fn catalog_single_profile() {
        let c = Catalog::from_profiles([gtx_1060()]).unwrap();
        let back = Catalog::parse_str(&c.to_json_string(), "mem").unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back, c);
    }
}
