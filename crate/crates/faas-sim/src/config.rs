//! Scenario files: a versioned TOML schema validated exhaustively before a
//! run starts. Overrides apply with `CLI flag > scenario file > default`
//! precedence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoscaler::ScalingConfig;
use crate::cluster::{FunctionId, FunctionType};
use crate::loadbalancer::{ArchitectureMode, SelectPolicy};
use crate::metrics::VmSecondsMode;
use crate::scheduler::{PlacementPolicy, UtilizationKey};
use crate::workload::{ExecTimeDist, FunctionArrivalSpec, RateProfile, SyntheticSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read scenario `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid config at `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Command-line overrides; `None` keeps the scenario-file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub end_time_s: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub log_events: Option<bool>,
}

// ---- raw on-disk schema ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawScenario {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub end_time_s: f64,
    pub cluster: RawCluster,
    pub architecture: RawArchitecture,
    #[serde(default)]
    pub scheduler: RawScheduler,
    #[serde(default)]
    pub load_balancer: RawLoadBalancer,
    #[serde(default)]
    pub scaling: ScalingConfig,
    pub functions: Vec<RawFunction>,
    pub workload: RawWorkload,
    #[serde(default)]
    pub output: RawOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCluster {
    pub vm_count: u32,
    pub vcpus: f64,
    pub mem_mb: f64,
    #[serde(default = "default_startup_delay")]
    pub startup_delay_s: f64,
    #[serde(default = "default_keep_alive")]
    pub keep_alive_s: f64,
}

fn default_startup_delay() -> f64 {
    0.5
}

fn default_keep_alive() -> f64 {
    600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawArchitecture {
    #[serde(default)]
    pub scale_per_request: bool,
    #[serde(default)]
    pub container_idling: bool,
    #[serde(default)]
    pub request_concurrency: bool,
    #[serde(default = "default_retry_interval")]
    pub retry_interval_s: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

fn default_retry_interval() -> f64 {
    1.0
}

fn default_max_retries() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawScheduler {
    pub policy: PlacementPolicy,
    #[serde(default)]
    pub utilization_key: UtilizationKey,
}

impl Default for RawScheduler {
    fn default() -> Self {
        RawScheduler {
            policy: PlacementPolicy::FirstFit,
            utilization_key: UtilizationKey::Cpu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawLoadBalancer {
    pub policy: SelectPolicy,
}

impl Default for RawLoadBalancer {
    fn default() -> Self {
        RawLoadBalancer {
            policy: SelectPolicy::FirstFit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFunction {
    pub name: String,
    pub cpu_demand_vcpu: f64,
    pub mem_demand_mb: f64,
    pub container_cpu_share: f64,
    pub container_mem_mb: f64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: u32,
}

fn default_concurrency() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    Trace,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawWorkload {
    pub source: WorkloadKind,
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Vec<RawArrival>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawArrival {
    pub function: String,
    pub base_rate_rps: f64,
    #[serde(default = "default_peak_multiplier")]
    pub peak_multiplier: f64,
    pub profile: RateProfile,
    /// Defaults to the scenario end time.
    #[serde(default)]
    pub duration_s: Option<f64>,
    /// Defaults to a stream derived from the scenario seed.
    #[serde(default)]
    pub seed: Option<u64>,
    pub exec_time: ExecTimeDist,
}

fn default_peak_multiplier() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RawOutput {
    pub directory: Option<PathBuf>,
    pub vm_seconds_mode: VmSecondsMode,
    pub log_events: bool,
    pub monitoring: Option<bool>,
}

// ---- resolved form ----

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSettings {
    pub vm_count: u32,
    pub vcpus: f64,
    pub mem_mb: f64,
    pub startup_delay_s: f64,
    pub keep_alive_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadSource {
    Trace { path: PathBuf },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSettings {
    pub directory: Option<PathBuf>,
    pub vm_seconds_mode: VmSecondsMode,
    pub log_events: bool,
    pub monitoring: bool,
}

/// Fully validated scenario: policies resolved, functions interned, and the
/// workload source pinned down.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub end_time_s: f64,
    pub cluster: ClusterSettings,
    pub architecture: ArchitectureMode,
    pub scheduler_policy: PlacementPolicy,
    pub utilization_key: UtilizationKey,
    pub lb_policy: SelectPolicy,
    pub scaling: ScalingConfig,
    pub functions: Vec<FunctionType>,
    pub workload: WorkloadSource,
    pub output: OutputSettings,
}

/// Stable per-subsystem RNG stream derivation (splitmix64 step).
pub fn derive_stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG stream tags; workload streams start at [`STREAM_WORKLOAD_BASE`] + index.
pub const STREAM_SCHEDULER: u64 = 1;
pub const STREAM_LOAD_BALANCER: u64 = 2;
pub const STREAM_AUTOSCALER: u64 = 3;
pub const STREAM_WORKLOAD_BASE: u64 = 100;

pub fn load_scenario(path: &Path, overrides: &Overrides) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let raw = parse_raw(&text)?;
    resolve(raw, path.parent(), overrides)
}

pub fn parse_raw(text: &str) -> Result<RawScenario, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
}

/// Validate a raw scenario and intern it. `base_dir` anchors relative trace
/// paths (normally the scenario file's directory).
pub fn resolve(
    mut raw: RawScenario,
    base_dir: Option<&Path>,
    overrides: &Overrides,
) -> Result<ScenarioConfig, ConfigError> {
    if let Some(seed) = overrides.seed {
        raw.seed = seed;
    }
    if let Some(end) = overrides.end_time_s {
        raw.end_time_s = end;
    }
    if let Some(dir) = &overrides.output_dir {
        raw.output.directory = Some(dir.clone());
    }
    if let Some(log_events) = overrides.log_events {
        raw.output.log_events = log_events;
    }

    if raw.schema_version != SCHEMA_VERSION {
        return Err(invalid(
            "schema_version",
            format!("expected {SCHEMA_VERSION}, got {}", raw.schema_version),
        ));
    }
    if !(raw.end_time_s > 0.0) {
        return Err(invalid("end_time_s", "must be > 0"));
    }

    let c = &raw.cluster;
    if c.vm_count == 0 {
        return Err(invalid("cluster.vm_count", "must be >= 1"));
    }
    if !(c.vcpus > 0.0) || !(c.mem_mb > 0.0) {
        return Err(invalid("cluster", "vcpus and mem_mb must be > 0"));
    }
    if c.startup_delay_s < 0.0 {
        return Err(invalid("cluster.startup_delay_s", "must be >= 0"));
    }
    if c.keep_alive_s < 0.0 {
        return Err(invalid("cluster.keep_alive_s", "must be >= 0"));
    }

    let a = &raw.architecture;
    if a.scale_per_request && a.request_concurrency {
        return Err(invalid(
            "architecture",
            "scale_per_request and request_concurrency are mutually exclusive",
        ));
    }
    if !a.scale_per_request && !a.request_concurrency {
        return Err(invalid(
            "architecture",
            "exactly one of scale_per_request / request_concurrency must be enabled",
        ));
    }
    if !(a.retry_interval_s > 0.0) {
        return Err(invalid("architecture.retry_interval_s", "must be > 0"));
    }

    let s = &raw.scaling;
    if s.enabled {
        if !(s.interval_s > 0.0) {
            return Err(invalid("scaling.interval_s", "must be > 0"));
        }
        if !(s.cpu_threshold_low > 0.0
            && s.cpu_threshold_low < s.cpu_threshold_high
            && s.cpu_threshold_high <= 1.0)
        {
            return Err(invalid(
                "scaling",
                "thresholds must satisfy 0 < low < high <= 1",
            ));
        }
        if s.min_replicas > s.max_replicas {
            return Err(invalid("scaling", "min_replicas must be <= max_replicas"));
        }
        if s.vertical.enabled {
            let v = &s.vertical;
            if v.cpu_steps.is_empty() || v.mem_steps.is_empty() {
                return Err(invalid(
                    "scaling.vertical",
                    "step lists must be non-empty when vertical scaling is enabled",
                ));
            }
            if v.cpu_steps.len() != v.mem_steps.len() {
                return Err(invalid(
                    "scaling.vertical",
                    "cpu_steps and mem_steps must pair up (equal lengths)",
                ));
            }
            if let Some(cap) = v.cpu_max {
                if cap > c.vcpus {
                    return Err(invalid(
                        "scaling.vertical.cpu_max",
                        "per-container cap exceeds VM capacity",
                    ));
                }
            }
            if let Some(cap) = v.mem_max_mb {
                if cap > c.mem_mb {
                    return Err(invalid(
                        "scaling.vertical.mem_max_mb",
                        "per-container cap exceeds VM capacity",
                    ));
                }
            }
        }
    }

    if raw.functions.is_empty() {
        return Err(invalid("functions", "at least one function is required"));
    }
    let mut functions = Vec::with_capacity(raw.functions.len());
    for (i, f) in raw.functions.iter().enumerate() {
        let field = format!("functions[{i}] `{}`", f.name);
        if functions.iter().any(|existing: &FunctionType| existing.name == f.name) {
            return Err(invalid(&field, "duplicate function name"));
        }
        if !(f.cpu_demand_vcpu > 0.0) || !(f.mem_demand_mb > 0.0) {
            return Err(invalid(&field, "resource demands must be > 0"));
        }
        if !(f.container_cpu_share > 0.0) || !(f.container_mem_mb > 0.0) {
            return Err(invalid(&field, "container shape must be > 0"));
        }
        if f.cpu_demand_vcpu > f.container_cpu_share || f.mem_demand_mb > f.container_mem_mb {
            return Err(invalid(
                &field,
                "a single request must fit its container (demand <= container shape)",
            ));
        }
        if f.container_cpu_share > c.vcpus || f.container_mem_mb > c.mem_mb {
            return Err(invalid(&field, "container shape exceeds VM capacity"));
        }
        if f.max_concurrency == 0 {
            return Err(invalid(&field, "max_concurrency must be >= 1"));
        }
        functions.push(FunctionType {
            name: f.name.clone(),
            cpu_demand_vcpu: f.cpu_demand_vcpu,
            mem_demand_mb: f.mem_demand_mb,
            cpu_share: f.container_cpu_share,
            mem_mb: f.container_mem_mb,
            // single-request architecture forces one request per container
            max_concurrency: if a.scale_per_request { 1 } else { f.max_concurrency },
        });
    }

    let workload = match raw.workload.source {
        WorkloadKind::Trace => {
            if !raw.workload.synthetic.is_empty() {
                return Err(invalid(
                    "workload",
                    "trace source cannot also declare synthetic arrivals",
                ));
            }
            let path = raw
                .workload
                .trace_path
                .as_ref()
                .ok_or_else(|| invalid("workload.trace_path", "required for trace source"))?;
            let path = if path.is_relative() {
                base_dir.map(|d| d.join(path)).unwrap_or_else(|| path.clone())
            } else {
                path.clone()
            };
            WorkloadSource::Trace { path }
        }
        WorkloadKind::Synthetic => {
            if raw.workload.trace_path.is_some() {
                return Err(invalid(
                    "workload",
                    "synthetic source cannot also declare trace_path",
                ));
            }
            if raw.workload.synthetic.is_empty() {
                return Err(invalid(
                    "workload.synthetic",
                    "at least one arrival spec is required",
                ));
            }
            let mut arrivals = Vec::with_capacity(raw.workload.synthetic.len());
            for (i, arr) in raw.workload.synthetic.iter().enumerate() {
                let field = format!("workload.synthetic[{i}]");
                let function = functions
                    .iter()
                    .position(|f| f.name == arr.function)
                    .ok_or_else(|| {
                        invalid(&field, format!("unknown function `{}`", arr.function))
                    })? as FunctionId;
                if arr.base_rate_rps < 0.0 {
                    return Err(invalid(&field, "base_rate_rps must be >= 0"));
                }
                if arr.peak_multiplier < 0.0 {
                    return Err(invalid(&field, "peak_multiplier must be >= 0"));
                }
                let duration = arr.duration_s.unwrap_or(raw.end_time_s);
                if !(duration > 0.0) {
                    return Err(invalid(&field, "duration_s must be > 0"));
                }
                match arr.exec_time {
                    ExecTimeDist::Constant { value_s } if !(value_s > 0.0) => {
                        return Err(invalid(&field, "exec_time value_s must be > 0"));
                    }
                    ExecTimeDist::LogNormal { sigma, .. } if sigma < 0.0 => {
                        return Err(invalid(&field, "exec_time sigma must be >= 0"));
                    }
                    _ => {}
                }
                arrivals.push(FunctionArrivalSpec {
                    function,
                    base_rate_rps: arr.base_rate_rps,
                    peak_multiplier: arr.peak_multiplier,
                    profile: arr.profile,
                    duration_s: duration,
                    seed: arr
                        .seed
                        .unwrap_or_else(|| derive_stream_seed(raw.seed, STREAM_WORKLOAD_BASE + i as u64)),
                    exec_time: arr.exec_time,
                });
            }
            WorkloadSource::Synthetic(SyntheticSpec { functions: arrivals })
        }
    };

    Ok(ScenarioConfig {
        seed: raw.seed,
        end_time_s: raw.end_time_s,
        cluster: ClusterSettings {
            vm_count: c.vm_count,
            vcpus: c.vcpus,
            mem_mb: c.mem_mb,
            startup_delay_s: c.startup_delay_s,
            keep_alive_s: c.keep_alive_s,
        },
        architecture: ArchitectureMode {
            scale_per_request: a.scale_per_request,
            container_idling: a.container_idling,
            request_concurrency: a.request_concurrency,
            retry_interval_s: a.retry_interval_s,
            max_retries: a.max_retries,
        },
        scheduler_policy: raw.scheduler.policy,
        utilization_key: raw.scheduler.utilization_key,
        lb_policy: raw.load_balancer.policy,
        scaling: raw.scaling,
        functions,
        workload,
        output: OutputSettings {
            directory: raw.output.directory,
            vm_seconds_mode: raw.output.vm_seconds_mode,
            log_events: raw.output.log_events,
            monitoring: raw.output.monitoring.unwrap_or(true),
        },
    })
}
