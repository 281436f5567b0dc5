//! Hosts, VMs, and function containers with strict capacity accounting.
//!
//! Containers execute in-flight requests under egalitarian processor
//! sharing: each of `k` concurrent requests receives `cpu_share / k` vCPU.
//! Every change to a container's membership or share advances the delivered
//! work of its in-flight requests and reschedules their completion events.
//!
//! VM capacity is charged when a container is granted (while still Pending),
//! not at first use, so Pending containers can never over-commit a VM.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::engine::{EngineCore, EventId, EventKind, EventPayload};

pub type VmId = u32;
pub type ContainerId = u64;
pub type FunctionId = u32;
pub type RequestId = u64;

/// Absolute slack used when comparing virtual times and capacities.
pub const TIME_EPS: f64 = 1e-9;
/// Tolerance on residual work when a completion event fires.
pub const WORK_EPS: f64 = 1e-6;

/// Static description of a deployed function type.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionType {
    pub name: String,
    /// Per-request CPU demand used for container admission.
    pub cpu_demand_vcpu: f64,
    pub mem_demand_mb: f64,
    /// Default CPU share of a fresh container of this function.
    pub cpu_share: f64,
    /// Default memory of a fresh container.
    pub mem_mb: f64,
    pub max_concurrency: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerState {
    Pending,
    Running,
    Idle,
    Destroyed,
}

impl ContainerState {
    pub fn name(self) -> &'static str {
        match self {
            ContainerState::Pending => "pending",
            ContainerState::Running => "running",
            ContainerState::Idle => "idle",
            ContainerState::Destroyed => "destroyed",
        }
    }
}

/// One in-flight request executing inside a container.
#[derive(Debug, Clone)]
pub struct InflightRequest {
    pub request: RequestId,
    pub remaining_work: f64,
    pub delivered_work: f64,
    pub cpu_demand: f64,
    pub mem_demand: f64,
    completion_event: EventId,
}

#[derive(Debug)]
pub struct Container {
    pub id: ContainerId,
    pub function: FunctionId,
    pub vm: VmId,
    pub cpu_share: f64,
    pub mem_mb: f64,
    pub max_concurrency: u32,
    state: ContainerState,
    inflight: Vec<InflightRequest>,
    pub created_at: f64,
    pub ready_at: Option<f64>,
    pub destroyed_at: Option<f64>,
    pub idle_since: Option<f64>,
    idle_timeout: Option<EventId>,
    ready_event: Option<EventId>,
    /// Last time in-flight work was advanced.
    last_progress_at: f64,
    /// Total seconds this container has had at least one in-flight request.
    busy_accum: f64,
    busy_mark: Option<f64>,
}

impl Container {
    pub fn state(&self) -> ContainerState {
        self.state
    }

    pub fn inflight(&self) -> &[InflightRequest] {
        &self.inflight
    }

    pub fn inflight_len(&self) -> usize {
        self.inflight.len()
    }

    pub fn has_free_slot(&self) -> bool {
        (self.inflight.len() as u32) < self.max_concurrency
    }

    fn inflight_cpu_demand(&self) -> f64 {
        self.inflight.iter().map(|r| r.cpu_demand).sum()
    }

    fn inflight_mem_demand(&self) -> f64 {
        self.inflight.iter().map(|r| r.mem_demand).sum()
    }

    /// Admission check: a free concurrency slot plus CPU/memory headroom
    /// for the request's declared demand.
    pub fn fits_request(&self, cpu_demand: f64, mem_demand: f64) -> bool {
        self.has_free_slot()
            && self.inflight_cpu_demand() + cpu_demand <= self.cpu_share + TIME_EPS
            && self.inflight_mem_demand() + mem_demand <= self.mem_mb + TIME_EPS
    }

    /// Total busy time since creation, including a currently open interval.
    pub fn busy_time_total(&self, now: f64) -> f64 {
        self.busy_accum + self.busy_mark.map_or(0.0, |m| now - m)
    }
}

#[derive(Debug)]
pub struct Vm {
    pub id: VmId,
    pub host: u32,
    pub vcpus: f64,
    pub mem_mb: f64,
    pub allocated_vcpu: f64,
    pub allocated_mem_mb: f64,
    /// Share-weighted busy CPU: sum of cpu_share over resident containers
    /// that currently have in-flight requests.
    pub busy_vcpu: f64,
    resident: Vec<ContainerId>,
}

impl Vm {
    pub fn free_vcpu(&self) -> f64 {
        self.vcpus - self.allocated_vcpu
    }

    pub fn free_mem_mb(&self) -> f64 {
        self.mem_mb - self.allocated_mem_mb
    }

    pub fn can_fit(&self, cpu: f64, mem: f64) -> bool {
        self.allocated_vcpu + cpu <= self.vcpus + TIME_EPS
            && self.allocated_mem_mb + mem <= self.mem_mb + TIME_EPS
    }

    pub fn resident(&self) -> &[ContainerId] {
        &self.resident
    }
}

/// Bare-metal node; the default fleet places one identically-sized VM per host.
#[derive(Debug)]
pub struct Host {
    pub id: u32,
    pub vcpus: f64,
    pub mem_mb: f64,
    pub vms: Vec<VmId>,
}

/// Lifecycle behaviour resolved from the architecture mode.
#[derive(Debug, Clone)]
pub struct LifecyclePolicy {
    pub startup_delay_s: f64,
    /// `Some(t)`: arm an IdleTimeout `t` seconds after a container goes idle.
    pub keep_alive_s: Option<f64>,
    /// Destroy a container as soon as its last in-flight request completes
    /// (scale-per-request without idling).
    pub destroy_on_last_completion: bool,
    /// Per-container resize ceilings; `None` leaves resizing uncapped.
    pub container_cpu_max: Option<f64>,
    pub container_mem_max_mb: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("vm {vm} cannot fit {need_cpu} vCPU / {need_mem} MB (free {free_cpu} vCPU / {free_mem} MB)")]
    Capacity {
        vm: VmId,
        need_cpu: f64,
        need_mem: f64,
        free_cpu: f64,
        free_mem: f64,
    },
    #[error("container {container} resize to {cpu} vCPU / {mem} MB exceeds per-container cap")]
    CapacityCap {
        container: ContainerId,
        cpu: f64,
        mem: f64,
    },
    #[error("container {container} cannot admit request: {reason}")]
    Concurrency {
        container: ContainerId,
        reason: &'static str,
    },
    #[error("container {container} is {actual}, expected {expected}")]
    State {
        container: ContainerId,
        expected: &'static str,
        actual: &'static str,
    },
    #[error("container {container} cannot shrink below in-flight demand ({floor_cpu} vCPU / {floor_mem} MB)")]
    Floor {
        container: ContainerId,
        floor_cpu: f64,
        floor_mem: f64,
    },
}

/// What happened to the container when a request completed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionEffect {
    StillRunning,
    WentIdle,
    Destroyed,
}

#[derive(Debug, Clone, Copy)]
pub struct CompletedRequest {
    pub delivered_work: f64,
    pub effect: CompletionEffect,
}

/// Everything start_request needs to know about the request being admitted.
#[derive(Debug, Clone, Copy)]
pub struct RequestExec {
    pub request: RequestId,
    pub cpu_work: f64,
    pub cpu_demand: f64,
    pub mem_demand: f64,
}

#[derive(Debug)]
pub struct Cluster {
    hosts: Vec<Host>,
    vms: Vec<Vm>,
    containers: Vec<Container>,
    functions: Vec<FunctionType>,
    policy: LifecyclePolicy,
    /// VMs whose allocation or busy share changed since the last drain.
    dirty_vms: BTreeSet<VmId>,
    /// When enabled, every state transition in order of occurrence.
    transitions: Option<Vec<(ContainerId, ContainerState, ContainerState)>>,
}

impl Cluster {
    /// Build a homogeneous fleet: `vm_count` VMs of the given shape, one per host.
    pub fn new(
        vm_count: u32,
        vcpus: f64,
        mem_mb: f64,
        functions: Vec<FunctionType>,
        policy: LifecyclePolicy,
    ) -> Self {
        let mut hosts = Vec::with_capacity(vm_count as usize);
        let mut vms = Vec::with_capacity(vm_count as usize);
        for id in 0..vm_count {
            hosts.push(Host {
                id,
                vcpus,
                mem_mb,
                vms: vec![id],
            });
            vms.push(Vm {
                id,
                host: id,
                vcpus,
                mem_mb,
                allocated_vcpu: 0.0,
                allocated_mem_mb: 0.0,
                busy_vcpu: 0.0,
                resident: Vec::new(),
            });
        }
        Cluster {
            hosts,
            vms,
            containers: Vec::new(),
            functions,
            policy,
            dirty_vms: BTreeSet::new(),
            transitions: None,
        }
    }

    /// Start recording every container state transition (test support).
    pub fn enable_transition_log(&mut self) {
        self.transitions = Some(Vec::new());
    }

    pub fn transition_log(&self) -> Option<&[(ContainerId, ContainerState, ContainerState)]> {
        self.transitions.as_deref()
    }

    fn set_state(&mut self, id: ContainerId, to: ContainerState) {
        let from = self.containers[id as usize].state;
        self.containers[id as usize].state = to;
        if let Some(log) = self.transitions.as_mut() {
            if from != to {
                log.push((id, from, to));
            }
        }
    }

    pub fn vms(&self) -> &[Vm] {
        &self.vms
    }

    pub fn vm(&self, id: VmId) -> &Vm {
        &self.vms[id as usize]
    }

    pub fn hosts(&self) -> &[Host] {
        &self.hosts
    }

    pub fn containers(&self) -> &[Container] {
        &self.containers
    }

    pub fn container(&self, id: ContainerId) -> &Container {
        &self.containers[id as usize]
    }

    pub fn functions(&self) -> &[FunctionType] {
        &self.functions
    }

    pub fn function(&self, id: FunctionId) -> &FunctionType {
        &self.functions[id as usize]
    }

    pub fn policy(&self) -> &LifecyclePolicy {
        &self.policy
    }

    /// VMs touched since the last call; the metrics collector drains this
    /// after every dispatched event.
    pub fn drain_dirty_vms(&mut self) -> Vec<VmId> {
        let drained: Vec<VmId> = self.dirty_vms.iter().copied().collect();
        self.dirty_vms.clear();
        drained
    }

    /// Grant a new container of `function` on `vm`. Capacity is reserved
    /// immediately; the container becomes usable at `now + startup_delay`.
    pub fn create_container(
        &mut self,
        core: &mut EngineCore,
        function: FunctionId,
        vm: VmId,
    ) -> Result<ContainerId, ClusterError> {
        let spec = &self.functions[function as usize];
        let (cpu, mem) = (spec.cpu_share, spec.mem_mb);
        let max_concurrency = spec.max_concurrency;
        let vm_state = &mut self.vms[vm as usize];
        if !vm_state.can_fit(cpu, mem) {
            return Err(ClusterError::Capacity {
                vm,
                need_cpu: cpu,
                need_mem: mem,
                free_cpu: vm_state.free_vcpu(),
                free_mem: vm_state.free_mem_mb(),
            });
        }
        let id = self.containers.len() as ContainerId;
        let now = core.now();
        vm_state.allocated_vcpu += cpu;
        vm_state.allocated_mem_mb += mem;
        vm_state.resident.push(id);
        self.dirty_vms.insert(vm);

        let ready_event = core
            .schedule(
                now + self.policy.startup_delay_s,
                EventKind::ContainerReady,
                EventPayload::container(id),
            )
            .expect("future event");
        self.containers.push(Container {
            id,
            function,
            vm,
            cpu_share: cpu,
            mem_mb: mem,
            max_concurrency,
            state: ContainerState::Pending,
            inflight: Vec::new(),
            created_at: now,
            ready_at: None,
            destroyed_at: None,
            idle_since: None,
            idle_timeout: None,
            ready_event: Some(ready_event),
            last_progress_at: now,
            busy_accum: 0.0,
            busy_mark: None,
        });
        Ok(id)
    }

    /// Transition a Pending container to Idle once its startup delay elapsed.
    /// `arm_idle` is false when a reserved request starts immediately.
    pub fn container_ready(&mut self, core: &mut EngineCore, id: ContainerId, arm_idle: bool) {
        let now = core.now();
        debug_assert_eq!(self.containers[id as usize].state, ContainerState::Pending);
        self.set_state(id, ContainerState::Idle);
        let c = &mut self.containers[id as usize];
        c.ready_at = Some(now);
        c.idle_since = Some(now);
        c.ready_event = None;
        c.last_progress_at = now;
        if arm_idle {
            self.arm_idle_timeout(core, id);
        }
    }

    fn arm_idle_timeout(&mut self, core: &mut EngineCore, id: ContainerId) {
        if let Some(keep_alive) = self.policy.keep_alive_s {
            let ev = core
                .schedule(
                    core.now() + keep_alive,
                    EventKind::IdleTimeout,
                    EventPayload::container(id),
                )
                .expect("future event");
            self.containers[id as usize].idle_timeout = Some(ev);
        }
    }

    /// True when the firing IdleTimeout is the one currently armed on an
    /// idle container; stale timers (already cancelled or superseded) are not.
    pub fn idle_timeout_is_live(&self, id: ContainerId, event: EventId) -> bool {
        let c = &self.containers[id as usize];
        c.state == ContainerState::Idle && c.idle_timeout == Some(event)
    }

    /// Admit a request into an Idle or Running container and reschedule the
    /// completion events of everything in flight under the new share split.
    pub fn start_request(
        &mut self,
        core: &mut EngineCore,
        id: ContainerId,
        exec: RequestExec,
    ) -> Result<EventId, ClusterError> {
        let now = core.now();
        let state = self.containers[id as usize].state;
        match state {
            ContainerState::Idle | ContainerState::Running => {}
            other => {
                return Err(ClusterError::State {
                    container: id,
                    expected: "idle or running",
                    actual: other.name(),
                })
            }
        }
        {
            let c = &self.containers[id as usize];
            if !c.has_free_slot() {
                return Err(ClusterError::Concurrency {
                    container: id,
                    reason: "max concurrency reached",
                });
            }
            if !c.fits_request(exec.cpu_demand, exec.mem_demand) {
                return Err(ClusterError::Concurrency {
                    container: id,
                    reason: "insufficient free cpu/memory for request demand",
                });
            }
        }
        self.advance_progress(id, now);
        self.set_state(id, ContainerState::Running);
        let c = &mut self.containers[id as usize];
        if let Some(timer) = c.idle_timeout.take() {
            core.cancel(timer);
        }
        if c.inflight.is_empty() {
            c.busy_mark = Some(now);
            c.idle_since = None;
            self.vms[c.vm as usize].busy_vcpu += c.cpu_share;
            self.dirty_vms.insert(c.vm);
        }
        c.inflight.push(InflightRequest {
            request: exec.request,
            remaining_work: exec.cpu_work,
            delivered_work: 0.0,
            cpu_demand: exec.cpu_demand,
            mem_demand: exec.mem_demand,
            completion_event: 0, // set by reschedule below
        });
        self.reschedule_completions(core, id);
        let c = &self.containers[id as usize];
        Ok(c
            .inflight
            .iter()
            .find(|r| r.request == exec.request)
            .expect("just inserted")
            .completion_event)
    }

    /// Finish a request whose completion event fired. Residual work must be
    /// within tolerance of zero.
    pub fn complete_request(
        &mut self,
        core: &mut EngineCore,
        id: ContainerId,
        request: RequestId,
    ) -> CompletedRequest {
        let now = core.now();
        self.advance_progress(id, now);
        let c = &mut self.containers[id as usize];
        debug_assert_eq!(c.state, ContainerState::Running);
        let idx = c
            .inflight
            .iter()
            .position(|r| r.request == request)
            .expect("completion fired for request not in flight");
        debug_assert!(
            c.inflight[idx].remaining_work.abs() <= WORK_EPS,
            "residual work {} outside tolerance",
            c.inflight[idx].remaining_work
        );
        let entry = c.inflight.remove(idx);
        let delivered = entry.delivered_work + entry.remaining_work.max(0.0);

        let effect = if c.inflight.is_empty() {
            c.busy_accum += now - c.busy_mark.take().expect("was busy");
            let vm = c.vm;
            let share = c.cpu_share;
            self.vms[vm as usize].busy_vcpu -= share;
            self.dirty_vms.insert(vm);
            self.set_state(id, ContainerState::Idle);
            if self.policy.destroy_on_last_completion {
                self.destroy_container(core, id).expect("idle container");
                CompletionEffect::Destroyed
            } else {
                self.containers[id as usize].idle_since = Some(now);
                self.arm_idle_timeout(core, id);
                CompletionEffect::WentIdle
            }
        } else {
            self.reschedule_completions(core, id);
            CompletionEffect::StillRunning
        };
        CompletedRequest {
            delivered_work: delivered,
            effect,
        }
    }

    /// Release an Idle or Pending container; Running containers cannot be
    /// destroyed.
    pub fn destroy_container(
        &mut self,
        core: &mut EngineCore,
        id: ContainerId,
    ) -> Result<(), ClusterError> {
        let now = core.now();
        let c = &mut self.containers[id as usize];
        match c.state {
            ContainerState::Idle | ContainerState::Pending => {}
            other => {
                return Err(ClusterError::State {
                    container: id,
                    expected: "idle or pending",
                    actual: other.name(),
                })
            }
        }
        if let Some(timer) = c.idle_timeout.take() {
            core.cancel(timer);
        }
        if let Some(ready) = c.ready_event.take() {
            core.cancel(ready);
        }
        c.state = ContainerState::Destroyed;
        c.destroyed_at = Some(now);
        c.idle_since = None;
        let (vm, cpu, mem) = (c.vm, c.cpu_share, c.mem_mb);
        let vm_state = &mut self.vms[vm as usize];
        vm_state.allocated_vcpu -= cpu;
        vm_state.allocated_mem_mb -= mem;
        vm_state.resident.retain(|&cid| cid != id);
        self.dirty_vms.insert(vm);
        Ok(())
    }

    /// Change a container's CPU share and memory in place. In-flight requests
    /// keep their delivered work; their completion times are recomputed with
    /// the new share effective from now.
    pub fn resize_container(
        &mut self,
        core: &mut EngineCore,
        id: ContainerId,
        new_cpu_share: f64,
        new_mem_mb: f64,
    ) -> Result<(), ClusterError> {
        let now = core.now();
        let c = &self.containers[id as usize];
        if c.state == ContainerState::Destroyed {
            return Err(ClusterError::State {
                container: id,
                expected: "not destroyed",
                actual: "destroyed",
            });
        }
        if let Some(cap) = self.policy.container_cpu_max {
            if new_cpu_share > cap + TIME_EPS {
                return Err(ClusterError::CapacityCap {
                    container: id,
                    cpu: new_cpu_share,
                    mem: new_mem_mb,
                });
            }
        }
        if let Some(cap) = self.policy.container_mem_max_mb {
            if new_mem_mb > cap + TIME_EPS {
                return Err(ClusterError::CapacityCap {
                    container: id,
                    cpu: new_cpu_share,
                    mem: new_mem_mb,
                });
            }
        }
        let floor_cpu = c.inflight_cpu_demand();
        let floor_mem = c.inflight_mem_demand();
        if new_cpu_share + TIME_EPS < floor_cpu || new_mem_mb + TIME_EPS < floor_mem {
            return Err(ClusterError::Floor {
                container: id,
                floor_cpu,
                floor_mem,
            });
        }
        let delta_cpu = new_cpu_share - c.cpu_share;
        let delta_mem = new_mem_mb - c.mem_mb;
        let vm = c.vm;
        if !self.vms[vm as usize].can_fit(delta_cpu, delta_mem) {
            let vm_state = &self.vms[vm as usize];
            return Err(ClusterError::Capacity {
                vm,
                need_cpu: delta_cpu,
                need_mem: delta_mem,
                free_cpu: vm_state.free_vcpu(),
                free_mem: vm_state.free_mem_mb(),
            });
        }
        self.advance_progress(id, now);
        let c = &mut self.containers[id as usize];
        let was_busy = !c.inflight.is_empty();
        c.cpu_share = new_cpu_share;
        c.mem_mb = new_mem_mb;
        let vm_state = &mut self.vms[vm as usize];
        vm_state.allocated_vcpu += delta_cpu;
        vm_state.allocated_mem_mb += delta_mem;
        if was_busy {
            vm_state.busy_vcpu += delta_cpu;
        }
        self.dirty_vms.insert(vm);
        if was_busy {
            self.reschedule_completions(core, id);
        }
        Ok(())
    }

    /// Apply processor-sharing progress to a container's in-flight requests
    /// for the interval since the last update.
    fn advance_progress(&mut self, id: ContainerId, now: f64) {
        let c = &mut self.containers[id as usize];
        let dt = now - c.last_progress_at;
        c.last_progress_at = now;
        if c.inflight.is_empty() || dt <= 0.0 {
            return;
        }
        let rate = c.cpu_share / c.inflight.len() as f64;
        for entry in &mut c.inflight {
            let done = rate * dt;
            entry.remaining_work -= done;
            entry.delivered_work += done;
        }
    }

    /// Cancel and re-issue completion events for everything in flight,
    /// using the current share split. Must run after `advance_progress`.
    fn reschedule_completions(&mut self, core: &mut EngineCore, id: ContainerId) {
        let now = core.now();
        let c = &mut self.containers[id as usize];
        if c.inflight.is_empty() {
            return;
        }
        let rate = c.cpu_share / c.inflight.len() as f64;
        debug_assert!(rate > 0.0, "container must have a positive share");
        for entry in &mut c.inflight {
            core.cancel(entry.completion_event);
            let eta = now + entry.remaining_work.max(0.0) / rate;
            entry.completion_event = core
                .schedule(
                    eta,
                    EventKind::RequestCompletion,
                    EventPayload::request_on_container(entry.request, id),
                )
                .expect("future event");
        }
    }

    /// Verify the capacity ledgers against a recount of resident containers.
    /// Used by property tests after every dispatched event.
    pub fn check_capacity_invariants(&self) -> Result<(), String> {
        for vm in &self.vms {
            let mut cpu = 0.0;
            let mut mem = 0.0;
            for &cid in &vm.resident {
                let c = &self.containers[cid as usize];
                if c.state != ContainerState::Destroyed {
                    cpu += c.cpu_share;
                    mem += c.mem_mb;
                }
            }
            if (cpu - vm.allocated_vcpu).abs() > WORK_EPS
                || (mem - vm.allocated_mem_mb).abs() > WORK_EPS
            {
                return Err(format!(
                    "vm {} ledger drift: recount {cpu}/{mem}, ledger {}/{}",
                    vm.id, vm.allocated_vcpu, vm.allocated_mem_mb
                ));
            }
            if vm.allocated_vcpu < -TIME_EPS || vm.allocated_vcpu > vm.vcpus + TIME_EPS {
                return Err(format!(
                    "vm {} cpu allocation {} outside [0, {}]",
                    vm.id, vm.allocated_vcpu, vm.vcpus
                ));
            }
            if vm.allocated_mem_mb < -TIME_EPS || vm.allocated_mem_mb > vm.mem_mb + TIME_EPS {
                return Err(format!(
                    "vm {} mem allocation {} outside [0, {}]",
                    vm.id, vm.allocated_mem_mb, vm.mem_mb
                ));
            }
        }
        for host in &self.hosts {
            let cap: f64 = host.vms.iter().map(|&v| self.vms[v as usize].vcpus).sum();
            if cap > host.vcpus + TIME_EPS {
                return Err(format!("host {} over-subscribed", host.id));
            }
        }
        Ok(())
    }
}
