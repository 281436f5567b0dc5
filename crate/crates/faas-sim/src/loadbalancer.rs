//! Request routing: send each arriving request to a warm container, a new
//! container, a timed retry, or — once the retry budget is spent — reject it.
//!
//! Two architectures are supported. Under scale-per-request a container
//! serves one request at a time; with idling enabled, warm idle containers
//! are preferred and a new container is the fallback. Under
//! request-concurrency the active containers of the function are scanned for
//! free capacity; if none fits but the container type exists (active or
//! pending), the request waits for a retry instead of forcing a new
//! container.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, ContainerId, ContainerState, FunctionId};
use crate::workload::ServerlessRequest;

/// Execution-architecture switches plus the retry budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureMode {
    pub scale_per_request: bool,
    pub container_idling: bool,
    pub request_concurrency: bool,
    pub retry_interval_s: f64,
    pub max_retries: u32,
}

/// Routing decision for one attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    NewContainer,
    UseContainer(ContainerId),
    Retry { at: f64 },
    Reject,
}

/// Container-selection strategy over the fitting candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectPolicy {
    FirstFit,
    Random,
}

#[derive(Debug, Default)]
struct FnContainers {
    active: BTreeSet<ContainerId>,
    pending: BTreeSet<ContainerId>,
}

/// Per-function view of active and pending containers; mirrors cluster state
/// after every event.
#[derive(Debug, Default)]
pub struct FunctionContainerIndex {
    per_function: BTreeMap<FunctionId, FnContainers>,
}

impl FunctionContainerIndex {
    pub fn on_created(&mut self, function: FunctionId, container: ContainerId) {
        self.per_function
            .entry(function)
            .or_default()
            .pending
            .insert(container);
    }

    pub fn on_ready(&mut self, function: FunctionId, container: ContainerId) {
        let entry = self.per_function.entry(function).or_default();
        entry.pending.remove(&container);
        entry.active.insert(container);
    }

    pub fn on_destroyed(&mut self, function: FunctionId, container: ContainerId) {
        if let Some(entry) = self.per_function.get_mut(&function) {
            entry.active.remove(&container);
            entry.pending.remove(&container);
        }
    }

    pub fn active(&self, function: FunctionId) -> impl Iterator<Item = ContainerId> + '_ {
        self.per_function
            .get(&function)
            .into_iter()
            .flat_map(|e| e.active.iter().copied())
    }

    pub fn has_pending(&self, function: FunctionId) -> bool {
        self.per_function
            .get(&function)
            .is_some_and(|e| !e.pending.is_empty())
    }

    pub fn has_any(&self, function: FunctionId) -> bool {
        self.per_function
            .get(&function)
            .is_some_and(|e| !e.active.is_empty() || !e.pending.is_empty())
    }

    /// Verify the index against a recount from cluster state (test support).
    pub fn check_mirrors(&self, cluster: &Cluster) -> Result<(), String> {
        let mut expect: BTreeMap<FunctionId, (BTreeSet<ContainerId>, BTreeSet<ContainerId>)> =
            BTreeMap::new();
        for c in cluster.containers() {
            let entry = expect.entry(c.function).or_default();
            match c.state() {
                ContainerState::Pending => {
                    entry.1.insert(c.id);
                }
                ContainerState::Idle | ContainerState::Running => {
                    entry.0.insert(c.id);
                }
                ContainerState::Destroyed => {}
            }
        }
        for (f, (active, pending)) in expect {
            let idx = self.per_function.get(&f);
            let (idx_active, idx_pending) = idx
                .map(|e| (e.active.clone(), e.pending.clone()))
                .unwrap_or_default();
            if idx_active != active || idx_pending != pending {
                return Err(format!(
                    "index for function {f} diverged: active {idx_active:?} vs {active:?}, \
                     pending {idx_pending:?} vs {pending:?}"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct RequestLoadBalancer {
    mode: ArchitectureMode,
    select: SelectPolicy,
    rng: ChaCha8Rng,
    pub index: FunctionContainerIndex,
}

impl RequestLoadBalancer {
    pub fn new(mode: ArchitectureMode, select: SelectPolicy, seed: u64) -> Self {
        RequestLoadBalancer {
            mode,
            select,
            rng: ChaCha8Rng::seed_from_u64(seed),
            index: FunctionContainerIndex::default(),
        }
    }

    pub fn mode(&self) -> &ArchitectureMode {
        &self.mode
    }

    /// Route one attempt of `r`. Callers convert a failed `NewContainer`
    /// placement into another attempt via [`Self::retry_or_reject`].
    pub fn route_request(&mut self, r: &ServerlessRequest, now: f64, cluster: &Cluster) -> Decision {
        if self.mode.scale_per_request {
            if self.mode.container_idling {
                if let Some(c) = self.select_container(r, cluster) {
                    return Decision::UseContainer(c);
                }
            }
            return Decision::NewContainer;
        }

        // request-concurrency flow
        if let Some(c) = self.select_container(r, cluster) {
            return Decision::UseContainer(c);
        }
        let type_exists =
            self.index.active(r.function).next().is_some() || self.index.has_pending(r.function);
        if type_exists {
            self.retry_or_reject(r, now)
        } else {
            Decision::NewContainer
        }
    }

    /// Another attempt within the retry budget, or rejection once spent.
    pub fn retry_or_reject(&self, r: &ServerlessRequest, now: f64) -> Decision {
        if r.retries < self.mode.max_retries {
            Decision::Retry {
                at: now + self.mode.retry_interval_s,
            }
        } else {
            Decision::Reject
        }
    }

    /// Scan the function's active containers in VM-creation then
    /// container-creation order and apply the selection policy over those
    /// with a free slot and resource headroom.
    pub fn select_container(&mut self, r: &ServerlessRequest, cluster: &Cluster) -> Option<ContainerId> {
        let mut candidates: Vec<(u32, ContainerId)> = self
            .index
            .active(r.function)
            .map(|cid| (cluster.container(cid).vm, cid))
            .collect();
        candidates.sort_unstable();
        let fitting: Vec<ContainerId> = candidates
            .into_iter()
            .map(|(_, cid)| cid)
            .filter(|&cid| {
                cluster
                    .container(cid)
                    .fits_request(r.cpu_demand_vcpu, r.mem_demand_mb)
            })
            .collect();
        match self.select {
            SelectPolicy::FirstFit => fitting.first().copied(),
            SelectPolicy::Random => {
                if fitting.is_empty() {
                    None
                } else {
                    Some(fitting[self.rng.gen_range(0..fitting.len())])
                }
            }
        }
    }
}
