//! Per-request records, per-VM usage series, and end-of-run summaries.
//!
//! VM utilization is tracked twice on purpose: a streaming accumulator
//! updated as changes are recorded, and a step-function series integrated
//! after the run. The two routes must agree to within 1e-9; the summary
//! reports the series route.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{FunctionType, VmId};
use crate::workload::{RequestOutcome, ServerlessRequest};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VmUsagePoint {
    pub time: f64,
    pub allocated_frac: f64,
    pub busy_frac: f64,
}

/// Step function of one VM's allocated and busy CPU fractions; values change
/// only at event times.
#[derive(Debug, Clone)]
pub struct VmUsageSeries {
    pub vm: VmId,
    pub points: Vec<VmUsagePoint>,
}

impl VmUsageSeries {
    /// Integrals of (allocated, busy, allocated>0) over `[0, upto]`.
    fn integrals_at(&self, upto: f64) -> (f64, f64, f64) {
        let mut alloc = 0.0;
        let mut busy = 0.0;
        let mut active = 0.0;
        let mut prev = VmUsagePoint {
            time: 0.0,
            allocated_frac: 0.0,
            busy_frac: 0.0,
        };
        for p in &self.points {
            let t = p.time.min(upto);
            let dt = (t - prev.time).max(0.0);
            alloc += prev.allocated_frac * dt;
            busy += prev.busy_frac * dt;
            if prev.allocated_frac > 0.0 {
                active += dt;
            }
            if p.time >= upto {
                return (alloc, busy, active);
            }
            prev = *p;
        }
        let dt = (upto - prev.time).max(0.0);
        alloc += prev.allocated_frac * dt;
        busy += prev.busy_frac * dt;
        if prev.allocated_frac > 0.0 {
            active += dt;
        }
        (alloc, busy, active)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct StreamingIntegral {
    last_t: f64,
    alloc: f64,
    busy: f64,
    alloc_area: f64,
    busy_area: f64,
    active_area: f64,
}

impl StreamingIntegral {
    fn advance(&mut self, t: f64) {
        let dt = t - self.last_t;
        if dt > 0.0 {
            self.alloc_area += self.alloc * dt;
            self.busy_area += self.busy * dt;
            if self.alloc > 0.0 {
                self.active_area += dt;
            }
            self.last_t = t;
        }
    }
}

/// How the provider cost proxy counts VM time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VmSecondsMode {
    /// Every provisioned VM for the whole makespan (fixed fleet).
    #[default]
    Fixed,
    /// Only time during which a VM hosts at least one container.
    Active,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no requests arrived; summary metrics are undefined")]
    EmptyRun,
}

/// Flat per-request output row.
#[derive(Debug, Clone, Serialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub function: String,
    pub arrival_time_s: f64,
    pub started_at_s: Option<f64>,
    pub completed_at_s: Option<f64>,
    pub response_time_s: Option<f64>,
    pub cold_start: bool,
    pub retries: u32,
    pub outcome: RequestOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSummary {
    pub arrt_s: Option<f64>,
    pub completed_count: u64,
    pub rejected_count: u64,
    pub cold_start_fraction: f64,
    pub throughput_rps: f64,
}

/// End-of-run summary over both the application-owner and provider views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Mean response time (completion - arrival) over completed requests.
    pub arrt_s: Option<f64>,
    /// Time-weighted mean reserved-CPU fraction over all VMs; `None` when
    /// monitoring was disabled.
    pub avg_vm_util_allocated: Option<f64>,
    /// Same, counting only shares actively executing requests.
    pub avg_vm_util_busy: Option<f64>,
    pub cold_start_fraction: f64,
    pub completed_count: u64,
    pub rejected_count: u64,
    pub throughput_rps: f64,
    pub vm_seconds: f64,
    pub makespan_s: f64,
    pub per_function: BTreeMap<String, FunctionSummary>,
}

#[derive(Debug)]
pub struct MetricsCollector {
    monitoring: bool,
    vm_count: u32,
    arrivals: u64,
    last_terminal: Option<f64>,
    series: Vec<VmUsageSeries>,
    streams: Vec<StreamingIntegral>,
}

impl MetricsCollector {
    pub fn new(vm_count: u32, monitoring: bool) -> Self {
        MetricsCollector {
            monitoring,
            vm_count,
            arrivals: 0,
            last_terminal: None,
            series: (0..vm_count)
                .map(|vm| VmUsageSeries {
                    vm,
                    points: Vec::new(),
                })
                .collect(),
            streams: vec![StreamingIntegral::default(); vm_count as usize],
        }
    }

    pub fn monitoring(&self) -> bool {
        self.monitoring
    }

    pub fn on_arrival(&mut self) {
        self.arrivals += 1;
    }

    pub fn arrivals(&self) -> u64 {
        self.arrivals
    }

    /// A request reached its terminal state (completed or rejected) at `t`.
    pub fn on_terminal(&mut self, t: f64) {
        self.last_terminal = Some(self.last_terminal.map_or(t, |m: f64| m.max(t)));
    }

    /// Record a VM's new allocated/busy fractions effective from `t`.
    pub fn on_vm_changed(&mut self, t: f64, vm: VmId, allocated_frac: f64, busy_frac: f64) {
        if !self.monitoring {
            return;
        }
        let stream = &mut self.streams[vm as usize];
        stream.advance(t);
        stream.alloc = allocated_frac;
        stream.busy = busy_frac;

        let points = &mut self.series[vm as usize].points;
        match points.last_mut() {
            // several changes at one event time collapse to the final value
            Some(last) if last.time == t => {
                last.allocated_frac = allocated_frac;
                last.busy_frac = busy_frac;
            }
            Some(last) if last.allocated_frac == allocated_frac && last.busy_frac == busy_frac => {}
            _ => points.push(VmUsagePoint {
                time: t,
                allocated_frac,
                busy_frac,
            }),
        }
    }

    pub fn vm_series(&self) -> &[VmUsageSeries] {
        &self.series
    }

    /// Makespan: time of the last request terminal event.
    pub fn makespan(&self) -> f64 {
        self.last_terminal.unwrap_or(0.0)
    }

    /// Streaming-route integrals of (allocated, busy, active) over `[0, t]`.
    /// `t` must not precede the last recorded change.
    pub fn streaming_integrals_at(&self, vm: VmId, t: f64) -> (f64, f64, f64) {
        let mut s = self.streams[vm as usize];
        s.advance(t);
        (s.alloc_area, s.busy_area, s.active_area)
    }

    /// Series-route integrals of (allocated, busy, active) over `[0, t]`.
    pub fn series_integrals_at(&self, vm: VmId, t: f64) -> (f64, f64, f64) {
        self.series[vm as usize].integrals_at(t)
    }

    pub fn summarize(
        &self,
        requests: &[ServerlessRequest],
        functions: &[FunctionType],
        vm_seconds_mode: VmSecondsMode,
    ) -> Result<RunSummary, MetricsError> {
        if requests.is_empty() {
            return Err(MetricsError::EmptyRun);
        }
        let makespan = self.makespan();

        let mut completed = 0u64;
        let mut rejected = 0u64;
        let mut cold_completed = 0u64;
        let mut response_sum = 0.0;
        #[derive(Default)]
        struct FnAccum {
            completed: u64,
            rejected: u64,
            cold: u64,
            response_sum: f64,
        }
        let mut per_fn: Vec<FnAccum> = functions.iter().map(|_| FnAccum::default()).collect();
        for r in requests {
            let acc = &mut per_fn[r.function as usize];
            match r.outcome {
                Some(RequestOutcome::Completed) => {
                    completed += 1;
                    acc.completed += 1;
                    let rt = r.response_time().expect("completed request");
                    response_sum += rt;
                    acc.response_sum += rt;
                    if r.cold_start {
                        cold_completed += 1;
                        acc.cold += 1;
                    }
                }
                Some(RequestOutcome::Rejected) => {
                    rejected += 1;
                    acc.rejected += 1;
                }
                None => panic!("request {} has no terminal outcome", r.id),
            }
        }

        let (util_alloc, util_busy, active_time) = if self.monitoring && makespan > 0.0 {
            let mut alloc = 0.0;
            let mut busy = 0.0;
            let mut active = 0.0;
            for vm in 0..self.vm_count {
                let (a, b, act) = self.series_integrals_at(vm, makespan);
                alloc += a / makespan;
                busy += b / makespan;
                active += act;
            }
            let n = self.vm_count as f64;
            (Some(alloc / n), Some(busy / n), active)
        } else if self.monitoring {
            (Some(0.0), Some(0.0), 0.0)
        } else {
            (None, None, 0.0)
        };

        let vm_seconds = match vm_seconds_mode {
            VmSecondsMode::Fixed => self.vm_count as f64 * makespan,
            VmSecondsMode::Active => active_time,
        };

        let per_function = functions
            .iter()
            .zip(per_fn.iter())
            .map(|(f, acc)| {
                (
                    f.name.clone(),
                    FunctionSummary {
                        arrt_s: (acc.completed > 0)
                            .then(|| acc.response_sum / acc.completed as f64),
                        completed_count: acc.completed,
                        rejected_count: acc.rejected,
                        cold_start_fraction: if acc.completed > 0 {
                            acc.cold as f64 / acc.completed as f64
                        } else {
                            0.0
                        },
                        throughput_rps: if makespan > 0.0 {
                            acc.completed as f64 / makespan
                        } else {
                            0.0
                        },
                    },
                )
            })
            .collect();

        Ok(RunSummary {
            arrt_s: (completed > 0).then(|| response_sum / completed as f64),
            avg_vm_util_allocated: util_alloc,
            avg_vm_util_busy: util_busy,
            cold_start_fraction: if completed > 0 {
                cold_completed as f64 / completed as f64
            } else {
                0.0
            },
            completed_count: completed,
            rejected_count: rejected,
            throughput_rps: if makespan > 0.0 {
                completed as f64 / makespan
            } else {
                0.0
            },
            vm_seconds,
            makespan_s: makespan,
            per_function,
        })
    }
}

/// Build the flat per-request rows for `requests.csv`.
pub fn request_records(
    requests: &[ServerlessRequest],
    functions: &[FunctionType],
) -> Vec<RequestRecord> {
    requests
        .iter()
        .map(|r| RequestRecord {
            request_id: r.id,
            function: functions[r.function as usize].name.clone(),
            arrival_time_s: r.arrival_time_s,
            started_at_s: r.started_at,
            completed_at_s: r.completed_at,
            response_time_s: r.response_time(),
            cold_start: r.cold_start,
            retries: r.retries,
            outcome: r.outcome.expect("terminal"),
        })
        .collect()
}
