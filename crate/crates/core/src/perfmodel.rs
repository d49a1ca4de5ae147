//! Analytic timing model used by simulated mode.
//!
//! A workload is split into a GPU compute phase and a CPU data-loading phase,
//! each measured once on a reference host. A profile's time is each phase
//! scaled by how much slower the profile is on the resource that phase uses:
//!
//! ```text
//! t = t_compute / (s * c_g) + t_load / (k * c_c)
//!   s   = cuda_cores / ref.cuda_cores
//!   c_g = gpu_boost / ref.gpu_boost
//!   k   = min(cpu_cores, ref.cpu_cores) / ref.cpu_cores
//!   c_c = cpu_boost / ref.cpu_boost
//! ```
//!
//! This is a test vehicle for the pipeline, not a fidelity claim.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::{Catalog, HardwareProfile};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec<T> {
    pub name: String,
    pub t_compute_ref_s: T,
    pub t_load_ref_s: T,
    pub peak_ram_bytes: u64,
    pub peak_vram_bytes: u64,
    pub reference_host_id: String,
}

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("workload '{workload}': {message}")]
    InvalidWorkload { workload: String, message: String },
    #[error("profile '{0}' has no GPU but the workload needs one")]
    MissingGpu(String),
    #[error("reference host '{0}' not found in catalog")]
    UnknownReferenceHost(String),
    #[error("reference host '{0}' has no GPU but the workload has a GPU phase")]
    ReferenceHostWithoutGpu(String),
}

impl<T: Scalar> WorkloadSpec<T> {
    pub fn validate(&self) -> Result<(), PerfError> {
        let bad = |message: &str| {
            Err(PerfError::InvalidWorkload {
                workload: self.name.clone(),
                message: message.to_string(),
            })
        };
        if !self.t_compute_ref_s.is_finite() || self.t_compute_ref_s <= T::zero() {
            return bad("t_compute_ref_s must be finite and positive");
        }
        if !self.t_load_ref_s.is_finite() || self.t_load_ref_s < T::zero() {
            return bad("t_load_ref_s must be finite and nonnegative");
        }
        if self.peak_ram_bytes == 0 {
            return bad("peak_ram_bytes must be positive");
        }
        Ok(())
    }
}

pub fn load_workload<T: Scalar + DeserializeOwned>(
    path: impl AsRef<Path>,
) -> Result<WorkloadSpec<T>, PerfError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|source| PerfError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let spec: WorkloadSpec<T> = serde_json::from_str(&content).map_err(|e| PerfError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

fn ratio<T: Scalar>(num: u64, den: u64) -> T {
    T::of_u64(num) / T::of_u64(den)
}

/// Predicted wall time of `workload` on `profile`, in seconds.
pub fn predict_time<T: Scalar>(
    profile: &HardwareProfile,
    workload: &WorkloadSpec<T>,
    catalog: &Catalog,
) -> Result<T, PerfError> {
    let reference = catalog
        .get(&workload.reference_host_id)
        .ok_or_else(|| PerfError::UnknownReferenceHost(workload.reference_host_id.clone()))?;

    let gpu = profile
        .gpu
        .as_ref()
        .ok_or_else(|| PerfError::MissingGpu(profile.id.clone()))?;
    let ref_gpu = reference
        .gpu
        .as_ref()
        .ok_or_else(|| PerfError::ReferenceHostWithoutGpu(reference.id.clone()))?;

    let share: T = ratio(gpu.cuda_cores.into(), ref_gpu.cuda_cores.into());
    let gpu_clock: T = ratio(gpu.boost_clock_mhz.into(), ref_gpu.boost_clock_mhz.into());
    let compute = workload.t_compute_ref_s / (share * gpu_clock);

    let cores = profile.cpu.cores.min(reference.cpu.cores);
    let core_share: T = ratio(cores.into(), reference.cpu.cores.into());
    let cpu_clock: T = ratio(
        profile.cpu.boost_clock_mhz.into(),
        reference.cpu.boost_clock_mhz.into(),
    );
    let load = workload.t_load_ref_s / (core_share * cpu_clock);

    Ok(compute + load)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePrediction {
    None,
    OomRam,
    OomVram,
}

/// Capacity check: RAM first, then VRAM. Clocks play no part.
pub fn predict_failure<T>(profile: &HardwareProfile, workload: &WorkloadSpec<T>) -> FailurePrediction {
    if workload.peak_ram_bytes > profile.ram_bytes() {
        return FailurePrediction::OomRam;
    }
    if let Some(gpu) = &profile.gpu {
        if workload.peak_vram_bytes > gpu.vram_mib.saturating_mul(crate::MIB) {
            return FailurePrediction::OomVram;
        }
    }
    FailurePrediction::None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::test_fixtures::*;
    use crate::MIB;

    fn workload(compute: f64, load: f64) -> WorkloadSpec<f64> {
        WorkloadSpec {
            name: "w".into(),
            t_compute_ref_s: compute,
            t_load_ref_s: load,
            peak_ram_bytes: 1 << 30,
            peak_vram_bytes: 1 << 30,
            reference_host_id: "rtx-4070-super-host".into(),
        }
    }

    fn catalog() -> Catalog {
        Catalog::from_profiles([host_profile(), gtx_1060()]).unwrap()
    }

    #[test]
    fn reference_on_itself_is_sum_of_phases() {
        let t = predict_time(&host_profile(), &workload(42.0, 6.0), &catalog()).unwrap();
        assert_eq!(t, 48.0);
    }

    #[test]
    fn half_cores_doubles_compute() {
        let mut p = host_profile();
        p.gpu.as_mut().unwrap().cuda_cores = 3584;
        let t = predict_time(&p, &workload(10.0, 0.0), &catalog()).unwrap();
        assert_eq!(t, 20.0);
    }

    #[test]
    fn f32_instantiation() {
        let w = WorkloadSpec::<f32> {
            name: "w".into(),
            t_compute_ref_s: 3.0,
            t_load_ref_s: 1.0,
            peak_ram_bytes: 1,
            peak_vram_bytes: 0,
            reference_host_id: "rtx-4070-super-host".into(),
        };
        let t: f32 = predict_time(&host_profile(), &w, &catalog()).unwrap();
        assert_eq!(t, 4.0);
    }

    #[test]
    fn extra_cores_saturate() {
        let mut p = host_profile();
        p.cpu.cores = 64;
        p.cpu.threads = 128;
        let t = predict_time(&p, &workload(1.0, 5.0), &catalog()).unwrap();
        assert_eq!(t, 6.0);
    }

    #[test]
    fn missing_gpu_and_reference() {
        let mut p = gtx_1060();
        p.gpu = None;
        assert!(matches!(
            predict_time(&p, &workload(1.0, 1.0), &catalog()),
            Err(PerfError::MissingGpu(_))
        ));
        let mut w = workload(1.0, 1.0);
        w.reference_host_id = "nope".into();
        assert!(matches!(
            predict_time(&gtx_1060(), &w, &catalog()),
            Err(PerfError::UnknownReferenceHost(_))
        ));
    }

    #[test]
    fn ram_boundary_is_strict() {
        let p = gtx_1060();
        let mut w = workload(1.0, 1.0);
        w.peak_ram_bytes = p.ram_mib * MIB;
        assert_eq!(predict_failure(&p, &w), FailurePrediction::None);
        w.peak_ram_bytes += 1;
        assert_eq!(predict_failure(&p, &w), FailurePrediction::OomRam);
    }

    #[test]
    fn vram_oom_on_6gib_card() {
        let mut w = workload(1.0, 1.0);
        w.peak_vram_bytes = 8 << 30;
        assert_eq!(predict_failure(&gtx_1060(), &w), FailurePrediction::OomVram);
    }

    #[test]
    fn ram_checked_before_vram() {
        let mut p = gtx_1060();
        p.ram_mib = 8192;
        let mut w = workload(1.0, 1.0);
        w.peak_ram_bytes = 16 << 30;
        w.peak_vram_bytes = 16 << 30;
        assert_eq!(predict_failure(&p, &w), FailurePrediction::OomRam);
    }

    #[test]
    fn workload_validation() {
        assert!(workload(0.0, 1.0).validate().is_err());
        assert!(workload(1.0, -1.0).validate().is_err());
        assert!(workload(f64::INFINITY, 1.0).validate().is_err());
        assert!(workload(1.0, 0.0).validate().is_ok());
    }
}
