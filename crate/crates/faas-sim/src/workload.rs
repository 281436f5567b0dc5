//! Request workloads: canonical trace CSV ingestion and seeded synthetic
//! arrival generation with time-varying Poisson rates.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{FunctionId, FunctionType, RequestId};

/// Canonical trace header, in column order.
pub const TRACE_HEADER: [&str; 5] = [
    "arrival_time_s",
    "function_id",
    "exec_time_s",
    "cpu_demand_vcpu",
    "mem_demand_mb",
];

/// Terminal state of a request at simulation end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestOutcome {
    Completed,
    Rejected,
}

/// One function invocation. The static fields come from the workload; the
/// trailing fields are filled in while the simulation runs.
#[derive(Debug, Clone)]
pub struct ServerlessRequest {
    pub id: RequestId,
    pub function: FunctionId,
    pub arrival_time_s: f64,
    /// CPU work in vCPU-seconds: trace execution time times demand share.
    pub cpu_work: f64,
    pub cpu_demand_vcpu: f64,
    pub mem_demand_mb: f64,
    pub submitted_at: Option<f64>,
    pub started_at: Option<f64>,
    pub completed_at: Option<f64>,
    pub cold_start: bool,
    pub retries: u32,
    pub outcome: Option<RequestOutcome>,
}

impl ServerlessRequest {
    fn new(
        id: RequestId,
        function: FunctionId,
        arrival_time_s: f64,
        exec_time_s: f64,
        cpu_demand_vcpu: f64,
        mem_demand_mb: f64,
    ) -> Self {
        ServerlessRequest {
            id,
            function,
            arrival_time_s,
            cpu_work: exec_time_s * cpu_demand_vcpu,
            cpu_demand_vcpu,
            mem_demand_mb,
            submitted_at: None,
            started_at: None,
            completed_at: None,
            cold_start: false,
            retries: 0,
            outcome: None,
        }
    }

    pub fn response_time(&self) -> Option<f64> {
        self.completed_at.map(|c| c - self.arrival_time_s)
    }
}

/// One row of the canonical trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_time_s: f64,
    pub function_id: String,
    pub exec_time_s: f64,
    pub cpu_demand_vcpu: f64,
    pub mem_demand_mb: f64,
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("cannot read trace `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("trace parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Shape of the time-varying arrival rate over the generation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateProfile {
    /// Flat `base_rate` for the whole window.
    Constant,
    /// One full sine cycle: `base_rate` at the edges, `base_rate *
    /// peak_multiplier` mid-window.
    DiurnalSine,
    /// `base_rate` for the first half, `base_rate * peak_multiplier` after.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExecTimeDist {
    Constant { value_s: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl ExecTimeDist {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            ExecTimeDist::Constant { value_s } => value_s,
            ExecTimeDist::LogNormal { mu, sigma } => {
                LogNormal::new(mu, sigma).expect("validated sigma").sample(rng)
            }
        }
    }
}

/// Per-function arrival process of a synthetic workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionArrivalSpec {
    pub function: FunctionId,
    pub base_rate_rps: f64,
    pub peak_multiplier: f64,
    pub profile: RateProfile,
    pub duration_s: f64,
    pub seed: u64,
    pub exec_time: ExecTimeDist,
}

impl FunctionArrivalSpec {
    fn rate_at(&self, t: f64) -> f64 {
        match self.profile {
            RateProfile::Constant => self.base_rate_rps,
            RateProfile::DiurnalSine => {
                let swing = (self.peak_multiplier - 1.0)
                    * (1.0 - (2.0 * std::f64::consts::PI * t / self.duration_s).cos())
                    / 2.0;
                self.base_rate_rps * (1.0 + swing)
            }
            RateProfile::Step => {
                if t < self.duration_s / 2.0 {
                    self.base_rate_rps
                } else {
                    self.base_rate_rps * self.peak_multiplier
                }
            }
        }
    }

    fn rate_max(&self) -> f64 {
        match self.profile {
            RateProfile::Constant => self.base_rate_rps,
            RateProfile::DiurnalSine | RateProfile::Step => {
                self.base_rate_rps * self.peak_multiplier.max(1.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub functions: Vec<FunctionArrivalSpec>,
}

/// Read and validate a canonical trace, resolving function names through
/// `functions`. Rows out of arrival order are accepted, re-sorted, and
/// reported with a warning on stderr.
pub fn ingest_trace(
    path: &Path,
    functions: &[FunctionType],
) -> Result<Vec<ServerlessRequest>, WorkloadError> {
    let by_name: BTreeMap<&str, FunctionId> = functions
        .iter()
        .enumerate()
        .map(|(i, f)| (f.name.as_str(), i as FunctionId))
        .collect();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => WorkloadError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => WorkloadError::Parse {
            line: 1,
            message: e.to_string(),
        },
    })?;
    let headers = reader.headers().map_err(|e| WorkloadError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(WorkloadError::Parse {
            line: 1,
            message: format!(
                "header mismatch: expected `{}`, found `{}`",
                TRACE_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut rows: Vec<(TraceRecord, FunctionId)> = Vec::new();
    for (i, record) in reader.deserialize::<TraceRecord>().enumerate() {
        let line = i + 2; // header is line 1
        let record = record.map_err(|e| WorkloadError::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.arrival_time_s < 0.0 {
            return Err(WorkloadError::Parse {
                line,
                message: format!("arrival_time_s must be >= 0, got {}", record.arrival_time_s),
            });
        }
        if record.exec_time_s <= 0.0 {
            return Err(WorkloadError::Parse {
                line,
                message: format!("exec_time_s must be > 0, got {}", record.exec_time_s),
            });
        }
        if record.cpu_demand_vcpu <= 0.0 || record.mem_demand_mb <= 0.0 {
            return Err(WorkloadError::Parse {
                line,
                message: "resource demands must be > 0".to_string(),
            });
        }
        let function = *by_name
            .get(record.function_id.as_str())
            .ok_or_else(|| WorkloadError::Parse {
                line,
                message: format!("unknown function `{}`", record.function_id),
            })?;
        rows.push((record, function));
    }

    let monotonic = rows
        .windows(2)
        .all(|w| w[0].0.arrival_time_s <= w[1].0.arrival_time_s);
    if !monotonic {
        eprintln!(
            "warning: trace `{}` has non-monotonic arrival times; rows re-sorted",
            path.display()
        );
        rows.sort_by(|a, b| a.0.arrival_time_s.total_cmp(&b.0.arrival_time_s));
    }

    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(id, (r, function))| {
            ServerlessRequest::new(
                id as RequestId,
                function,
                r.arrival_time_s,
                r.exec_time_s,
                r.cpu_demand_vcpu,
                r.mem_demand_mb,
            )
        })
        .collect())
}

/// Write requests back out in the canonical trace format.
pub fn write_trace(
    path: &Path,
    requests: &[ServerlessRequest],
    functions: &[FunctionType],
) -> Result<(), WorkloadError> {
    let mut out = std::fs::File::create(path).map_err(|source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let io_err = |source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    };
    writeln!(out, "{}", TRACE_HEADER.join(",")).map_err(io_err)?;
    for r in requests {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.arrival_time_s,
            functions[r.function as usize].name,
            r.cpu_work / r.cpu_demand_vcpu,
            r.cpu_demand_vcpu,
            r.mem_demand_mb
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Generate Poisson arrivals for every function in the spec by thinning
/// against the profile's peak rate. Deterministic for a fixed spec: the
/// per-function RNG stream is seeded from the spec alone.
///
/// Per-request demands come from the function declarations.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    functions: &[FunctionType],
) -> Vec<ServerlessRequest> {
    // (arrival, function index within spec, exec time); the index breaks
    // ties so the merged order never depends on float coincidences.
    let mut arrivals: Vec<(f64, usize, f64)> = Vec::new();
    for (fi, f) in spec.functions.iter().enumerate() {
        let lambda_max = f.rate_max();
        if lambda_max <= 0.0 || f.duration_s <= 0.0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(f.seed);
        let exp = rand_distr::Exp::new(lambda_max).expect("positive rate");
        let mut t = 0.0;
        loop {
            t += exp.sample(&mut rng);
            if t >= f.duration_s {
                break;
            }
            let keep: f64 = rng.gen();
            if keep * lambda_max <= f.rate_at(t) {
                let exec = f.exec_time.sample(&mut rng);
                arrivals.push((t, fi, exec));
            }
        }
    }
    arrivals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    arrivals
        .into_iter()
        .enumerate()
        .map(|(id, (t, fi, exec))| {
            let function = spec.functions[fi].function;
            let ft = &functions[function as usize];
            ServerlessRequest::new(
                id as RequestId,
                function,
                t,
                exec,
                ft.cpu_demand_vcpu,
                ft.mem_demand_mb,
            )
        })
        .collect()
}
