//! Run orchestration: builds every component from a scenario config, wires
//! the event handlers, executes the run to completion, and summarizes it.
//!
//! Event flow per request: `RequestArrival` routes through the load
//! balancer; a `NewContainer` decision reserves the created container for
//! the triggering request, which then starts (cold) at `ContainerReady`.
//! Capacity misses turn into `RetryScheduling` attempts until the retry
//! budget is spent, after which the request is rejected.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autoscaler::{FunctionAutoScaler, ScalingAction};
use crate::cluster::{
    Cluster, CompletionEffect, ContainerId, LifecyclePolicy, RequestExec, RequestId,
};
use crate::config::{
    derive_stream_seed, ScenarioConfig, WorkloadSource, STREAM_AUTOSCALER, STREAM_LOAD_BALANCER,
    STREAM_SCHEDULER,
};
use crate::engine::{
    Engine, EngineCore, EngineError, EventKind, EventPayload, SimEvent,
};
use crate::loadbalancer::{Decision, RequestLoadBalancer};
use crate::metrics::{MetricsCollector, MetricsError, RunSummary};
use crate::scheduler::FunctionScheduler;
use crate::workload::{
    generate_synthetic, ingest_trace, RequestOutcome, ServerlessRequest, WorkloadError,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invariant violation at t={at}: {message}")]
    Invariant { at: f64, message: String },
}

/// Mutable state shared by all event handlers.
pub struct SimWorld {
    pub cluster: Cluster,
    pub lb: RequestLoadBalancer,
    pub scheduler: FunctionScheduler,
    pub scaler: Option<FunctionAutoScaler>,
    pub metrics: MetricsCollector,
    pub requests: Vec<ServerlessRequest>,
    /// Pending container -> request that triggered its creation.
    reservations: BTreeMap<ContainerId, RequestId>,
    end_time: f64,
    /// Largest |delivered - cpu_work| seen at any completion.
    pub max_work_error: f64,
    /// Replica creations skipped because no VM could host them.
    pub scaling_placement_failures: u64,
    vm_seconds_mode: crate::metrics::VmSecondsMode,
}

pub struct Simulation {
    engine: Engine<SimWorld>,
    world: SimWorld,
}

/// Everything a finished run produces.
pub struct RunOutput {
    pub summary: RunSummary,
    pub requests: Vec<ServerlessRequest>,
    pub functions: Vec<crate::cluster::FunctionType>,
    pub vm_series: Vec<crate::metrics::VmUsageSeries>,
    pub event_log: Option<Vec<SimEvent>>,
    pub events_dispatched: u64,
    pub final_clock: f64,
    pub max_work_error: f64,
    pub scaling_placement_failures: u64,
}

impl Simulation {
    pub fn from_config(cfg: &ScenarioConfig) -> Result<Simulation, SimError> {
        let mut requests = match &cfg.workload {
            WorkloadSource::Trace { path } => ingest_trace(path, &cfg.functions)?,
            WorkloadSource::Synthetic(spec) => generate_synthetic(spec, &cfg.functions),
        };
        let before = requests.len();
        requests.retain(|r| r.arrival_time_s <= cfg.end_time_s);
        if requests.len() < before {
            eprintln!(
                "warning: dropped {} arrivals past end_time_s={}",
                before - requests.len(),
                cfg.end_time_s
            );
            for (id, r) in requests.iter_mut().enumerate() {
                r.id = id as RequestId;
            }
        }

        let arch = cfg.architecture;
        let lifecycle = LifecyclePolicy {
            startup_delay_s: cfg.cluster.startup_delay_s,
            keep_alive_s: arch.container_idling.then_some(cfg.cluster.keep_alive_s),
            destroy_on_last_completion: arch.scale_per_request && !arch.container_idling,
            container_cpu_max: cfg.scaling.vertical.cpu_max,
            container_mem_max_mb: cfg.scaling.vertical.mem_max_mb,
        };
        let cluster = Cluster::new(
            cfg.cluster.vm_count,
            cfg.cluster.vcpus,
            cfg.cluster.mem_mb,
            cfg.functions.clone(),
            lifecycle,
        );
        let world = SimWorld {
            cluster,
            lb: RequestLoadBalancer::new(
                arch,
                cfg.lb_policy,
                derive_stream_seed(cfg.seed, STREAM_LOAD_BALANCER),
            ),
            scheduler: FunctionScheduler::new(
                cfg.scheduler_policy,
                cfg.utilization_key,
                derive_stream_seed(cfg.seed, STREAM_SCHEDULER),
            ),
            scaler: cfg.scaling.enabled.then(|| {
                FunctionAutoScaler::new(
                    cfg.scaling.clone(),
                    derive_stream_seed(cfg.seed, STREAM_AUTOSCALER),
                )
            }),
            metrics: MetricsCollector::new(cfg.cluster.vm_count, cfg.output.monitoring),
            requests,
            reservations: BTreeMap::new(),
            end_time: cfg.end_time_s,
            max_work_error: 0.0,
            scaling_placement_failures: 0,
            vm_seconds_mode: cfg.output.vm_seconds_mode,
        };

        let mut engine = Engine::new();
        if cfg.output.log_events {
            engine.core_mut().enable_logging();
        }
        engine.register(EventKind::RequestArrival, handle_request_arrival);
        engine.register(EventKind::RetryScheduling, handle_retry);
        engine.register(EventKind::ContainerReady, handle_container_ready);
        engine.register(EventKind::RequestCompletion, handle_request_completion);
        engine.register(EventKind::IdleTimeout, handle_idle_timeout);
        engine.register(EventKind::ScalingTick, handle_scaling_tick);
        engine.register(EventKind::SimulationEnd, |_, _, _| {});

        let mut sim = Simulation { engine, world };
        for r in &sim.world.requests {
            sim.engine
                .schedule(
                    r.arrival_time_s,
                    EventKind::RequestArrival,
                    EventPayload::request(r.id),
                )
                .expect("arrivals are in the future");
        }
        if let Some(scaler) = &sim.world.scaler {
            let first_tick = scaler.config().interval_s;
            if first_tick <= cfg.end_time_s {
                sim.engine
                    .schedule(first_tick, EventKind::ScalingTick, EventPayload::default())
                    .expect("future event");
            }
        }
        sim.engine
            .schedule(cfg.end_time_s, EventKind::SimulationEnd, EventPayload::default())
            .expect("future event");
        Ok(sim)
    }

    /// Run every event to completion and summarize.
    pub fn run(&mut self) -> Result<RunOutput, SimError> {
        self.run_with_hook(|_| Ok(()))
    }

    /// Like [`Self::run`], invoking `hook` after every dispatched event.
    /// Property tests use it to assert cluster invariants at each boundary.
    pub fn run_with_hook(
        &mut self,
        mut hook: impl FnMut(&SimWorld) -> Result<(), String>,
    ) -> Result<RunOutput, SimError> {
        let mut dispatched = 0u64;
        loop {
            let Some(ev) = self.engine.step(&mut self.world, f64::INFINITY)? else {
                break;
            };
            dispatched += 1;
            flush_vm_changes(&mut self.world, ev.time);
            hook(&self.world).map_err(|message| SimError::Invariant {
                at: ev.time,
                message,
            })?;
        }
        let summary = self.world.metrics.summarize(
            &self.world.requests,
            self.world.cluster.functions(),
            self.world.vm_seconds_mode,
        )?;
        Ok(RunOutput {
            summary,
            requests: self.world.requests.clone(),
            functions: self.world.cluster.functions().to_vec(),
            vm_series: self.world.metrics.vm_series().to_vec(),
            event_log: self.engine.core().dispatch_log().map(|l| l.to_vec()),
            events_dispatched: dispatched,
            final_clock: self.engine.now(),
            max_work_error: self.world.max_work_error,
            scaling_placement_failures: self.world.scaling_placement_failures,
        })
    }

    pub fn world(&self) -> &SimWorld {
        &self.world
    }
}

/// Record new allocation/busy fractions for every VM touched by the event.
fn flush_vm_changes(world: &mut SimWorld, now: f64) {
    for vm_id in world.cluster.drain_dirty_vms() {
        let vm = world.cluster.vm(vm_id);
        let alloc = (vm.allocated_vcpu / vm.vcpus).clamp(0.0, 1.0);
        let busy = (vm.busy_vcpu / vm.vcpus).clamp(0.0, 1.0);
        world.metrics.on_vm_changed(now, vm_id, alloc, busy);
    }
}

fn handle_request_arrival(world: &mut SimWorld, core: &mut EngineCore, ev: &SimEvent) {
    let rid = ev.payload.request.expect("arrival carries a request");
    world.requests[rid as usize].submitted_at = Some(ev.time);
    world.metrics.on_arrival();
    attempt_route(world, core, rid);
}

fn handle_retry(world: &mut SimWorld, core: &mut EngineCore, ev: &SimEvent) {
    attempt_route(world, core, ev.payload.request.expect("retry carries a request"));
}

fn attempt_route(world: &mut SimWorld, core: &mut EngineCore, rid: RequestId) {
    let now = core.now();
    let decision = world
        .lb
        .route_request(&world.requests[rid as usize], now, &world.cluster);
    match decision {
        Decision::UseContainer(cid) => start_on(world, core, rid, cid, false),
        Decision::NewContainer => {
            let function = world.requests[rid as usize].function;
            let spec = world.cluster.function(function);
            let (cpu, mem) = (spec.cpu_share, spec.mem_mb);
            match world
                .scheduler
                .find_vm_for_container(cpu, mem, world.cluster.vms())
            {
                Some(vm) => {
                    let cid = world
                        .cluster
                        .create_container(core, function, vm)
                        .expect("scheduler verified capacity");
                    world.lb.index.on_created(function, cid);
                    world.reservations.insert(cid, rid);
                }
                // no VM can host a container right now: burn a retry
                None => retry_or_reject(world, core, rid),
            }
        }
        Decision::Retry { at } => {
            world.requests[rid as usize].retries += 1;
            core.schedule(at, EventKind::RetryScheduling, EventPayload::request(rid))
                .expect("future event");
        }
        Decision::Reject => reject(world, core, rid),
    }
}

fn retry_or_reject(world: &mut SimWorld, core: &mut EngineCore, rid: RequestId) {
    let now = core.now();
    match world.lb.retry_or_reject(&world.requests[rid as usize], now) {
        Decision::Retry { at } => {
            world.requests[rid as usize].retries += 1;
            core.schedule(at, EventKind::RetryScheduling, EventPayload::request(rid))
                .expect("future event");
        }
        _ => reject(world, core, rid),
    }
}

fn reject(world: &mut SimWorld, core: &mut EngineCore, rid: RequestId) {
    let r = &mut world.requests[rid as usize];
    debug_assert!(r.outcome.is_none());
    r.outcome = Some(RequestOutcome::Rejected);
    world.metrics.on_terminal(core.now());
}

fn start_on(world: &mut SimWorld, core: &mut EngineCore, rid: RequestId, cid: ContainerId, cold: bool) {
    let r = &world.requests[rid as usize];
    let exec = RequestExec {
        request: rid,
        cpu_work: r.cpu_work,
        cpu_demand: r.cpu_demand_vcpu,
        mem_demand: r.mem_demand_mb,
    };
    world
        .cluster
        .start_request(core, cid, exec)
        .expect("router verified admission");
    let r = &mut world.requests[rid as usize];
    r.started_at = Some(core.now());
    r.cold_start = cold;
}

fn handle_container_ready(world: &mut SimWorld, core: &mut EngineCore, ev: &SimEvent) {
    let cid = ev.payload.container.expect("ready carries a container");
    let function = world.cluster.container(cid).function;
    let reserved = world.reservations.remove(&cid);
    world.cluster.container_ready(core, cid, reserved.is_none());
    world.lb.index.on_ready(function, cid);
    if let Some(rid) = reserved {
        start_on(world, core, rid, cid, true);
    }
}

fn handle_request_completion(world: &mut SimWorld, core: &mut EngineCore, ev: &SimEvent) {
    let rid = ev.payload.request.expect("completion carries a request");
    let cid = ev.payload.container.expect("completion carries a container");
    let done = world.cluster.complete_request(core, cid, rid);
    let r = &mut world.requests[rid as usize];
    r.completed_at = Some(ev.time);
    r.outcome = Some(RequestOutcome::Completed);
    let err = (done.delivered_work - r.cpu_work).abs();
    if err > world.max_work_error {
        world.max_work_error = err;
    }
    world.metrics.on_terminal(ev.time);
    if done.effect == CompletionEffect::Destroyed {
        let function = world.cluster.container(cid).function;
        world.lb.index.on_destroyed(function, cid);
    }
}

fn handle_idle_timeout(world: &mut SimWorld, core: &mut EngineCore, ev: &SimEvent) {
    let cid = ev.payload.container.expect("timeout carries a container");
    debug_assert!(
        world.cluster.idle_timeout_is_live(cid, ev.seq),
        "stale idle timeout dispatched"
    );
    if world.cluster.idle_timeout_is_live(cid, ev.seq) {
        let function = world.cluster.container(cid).function;
        world
            .cluster
            .destroy_container(core, cid)
            .expect("idle container");
        world.lb.index.on_destroyed(function, cid);
    }
}

fn handle_scaling_tick(world: &mut SimWorld, core: &mut EngineCore, ev: &SimEvent) {
    let now = ev.time;
    let mut scaler = world.scaler.take().expect("tick only fires with a scaler");
    let snapshot = scaler.collect_snapshot(now, &world.cluster);

    // vertical first: resizes are in place before replica decisions execute
    for action in scaler.vertical_scale(&snapshot, &world.cluster) {
        let ScalingAction::Resize {
            container,
            new_cpu_share,
            new_mem_mb,
        } = action
        else {
            unreachable!("vertical scaler emits resizes only");
        };
        world
            .cluster
            .resize_container(core, container, new_cpu_share, new_mem_mb)
            .expect("scaler verified feasibility");
    }

    for action in scaler.horizontal_scale(&snapshot, &world.cluster) {
        match action {
            ScalingAction::CreateReplica { function } => {
                let spec = world.cluster.function(function);
                let (cpu, mem) = (spec.cpu_share, spec.mem_mb);
                match world
                    .scheduler
                    .find_vm_for_container(cpu, mem, world.cluster.vms())
                {
                    Some(vm) => {
                        let cid = world
                            .cluster
                            .create_container(core, function, vm)
                            .expect("scheduler verified capacity");
                        world.lb.index.on_created(function, cid);
                    }
                    None => world.scaling_placement_failures += 1,
                }
            }
            ScalingAction::DestroyIdle { container } => {
                let function = world.cluster.container(container).function;
                world
                    .cluster
                    .destroy_container(core, container)
                    .expect("scaler picked an idle container");
                world.lb.index.on_destroyed(function, container);
            }
            ScalingAction::Resize { .. } => unreachable!("horizontal scaler never resizes"),
        }
    }

    world.scaler = Some(scaler);
    let next = now + world.scaler.as_ref().unwrap().config().interval_s;
    if next <= world.end_time {
        core.schedule(next, EventKind::ScalingTick, EventPayload::default())
            .expect("future event");
    }
}
