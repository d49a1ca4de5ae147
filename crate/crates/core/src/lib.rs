//! Single-host emulation of heterogeneous federated-learning clients.
//!
//! Each client is described by a [`HardwareProfile`]. The orchestrator turns a
//! profile into host-relative limits ([`EnforcementPlan`]), applies them through
//! an [`enforcer::Enforcer`], runs the client's training command inside the
//! restricted environment and releases the limits before the next client runs.
//! Clients always run one at a time because the underlying controls (CPU
//! frequency, GPU clocks) are host-global.
//!
//! The numeric cores of [`analysis`] and [`perfmodel`] are generic over
//! [`Scalar`]; the aliases below fix them to `f64`, which is what the scheduler
//! and CLI use.

pub mod analysis;
pub mod enforcer;
pub mod experiment;
pub mod perfmodel;
pub mod profiles;
pub mod sampler;
pub mod scheduler;
mod scalar;

pub use scalar::Scalar;

pub use profiles::{
    load_profile_catalog, plan_enforcement, validate_against_host, Catalog, CpuSpec,
    EnforcementPlan, GpuSpec, HardwareProfile, HostCapabilities,
};

pub type PairedSeries = analysis::PairedSeries<f64>;
pub type WorkloadSpec = perfmodel::WorkloadSpec<f64>;
pub type PairedSeries32 = analysis::PairedSeries<f32>;
pub type WorkloadSpec32 = perfmodel::WorkloadSpec<f32>;

/// Exact fraction used for VRAM shares and popularity weights.
pub type Fraction = num_rational::Ratio<u64>;

pub const MIB: u64 = 1 << 20;
