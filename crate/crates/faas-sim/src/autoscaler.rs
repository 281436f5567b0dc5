//! Periodic utilization collection and threshold-triggered scaling.
//!
//! Horizontal scaling follows the proportional rule
//! `desired = ceil(current * avg_util / threshold_high)`, clamped to the
//! configured replica bounds; scale-in destroys idle containers only,
//! oldest-idle first. Vertical scaling enumerates the configured step levels
//! that fit the hosting VM and the per-container caps, then picks one by the
//! configured selection rule.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, ContainerId, ContainerState, FunctionId, VmId, TIME_EPS};

fn default_interval() -> f64 {
    30.0
}

fn default_threshold_high() -> f64 {
    0.6
}

fn default_threshold_low() -> f64 {
    0.2
}

fn default_max_replicas() -> u32 {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActionSelection {
    /// Seeded uniform pick from the viable step levels.
    #[default]
    Random,
    /// The viable level with the largest CPU change.
    LargestFeasible,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VerticalScalingConfig {
    pub enabled: bool,
    /// Step levels; `cpu_steps[i]` and `mem_steps[i]` form one action.
    pub cpu_steps: Vec<f64>,
    pub mem_steps: Vec<f64>,
    /// Per-container ceilings a resize may never exceed.
    pub cpu_max: Option<f64>,
    pub mem_max_mb: Option<f64>,
    pub selection: ActionSelection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub enabled: bool,
    pub interval_s: f64,
    pub cpu_threshold_high: f64,
    pub cpu_threshold_low: f64,
    pub min_replicas: u32,
    pub max_replicas: u32,
    pub vertical: VerticalScalingConfig,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            enabled: false,
            interval_s: default_interval(),
            cpu_threshold_high: default_threshold_high(),
            cpu_threshold_low: default_threshold_low(),
            min_replicas: 0,
            max_replicas: default_max_replicas(),
            vertical: VerticalScalingConfig::default(),
        }
    }
}

/// Busy-CPU fraction of one container over the last tick interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContainerUtilization {
    pub container: ContainerId,
    pub busy_fraction: f64,
}

/// Per-function utilization snapshot taken at a scaling tick.
#[derive(Debug, Clone, PartialEq)]
pub struct FnUtilizationSnapshot {
    pub taken_at: f64,
    pub per_function: BTreeMap<FunctionId, Vec<ContainerUtilization>>,
}

impl FnUtilizationSnapshot {
    pub fn replica_count(&self, function: FunctionId) -> u32 {
        self.per_function.get(&function).map_or(0, |c| c.len() as u32)
    }

    pub fn avg_utilization(&self, function: FunctionId) -> f64 {
        match self.per_function.get(&function) {
            Some(containers) if !containers.is_empty() => {
                containers.iter().map(|c| c.busy_fraction).sum::<f64>() / containers.len() as f64
            }
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalingAction {
    CreateReplica {
        function: FunctionId,
    },
    DestroyIdle {
        container: ContainerId,
    },
    Resize {
        container: ContainerId,
        new_cpu_share: f64,
        new_mem_mb: f64,
    },
}

/// Proportional replica target with the configured bounds applied. The tiny
/// slack keeps exact-threshold ratios (which float products can overshoot by
/// one ulp) from rounding up a replica.
pub fn desired_replicas(current: u32, avg_util: f64, threshold: f64, min: u32, max: u32) -> u32 {
    let raw = (current as f64 * avg_util / threshold - 1e-9).ceil();
    let desired = if raw <= 0.0 { 0 } else { raw as u32 };
    desired.clamp(min, max)
}

#[derive(Debug)]
pub struct FunctionAutoScaler {
    config: ScalingConfig,
    rng: ChaCha8Rng,
    /// Cumulative busy time per container at the previous tick.
    prev_busy: BTreeMap<ContainerId, f64>,
}

impl FunctionAutoScaler {
    pub fn new(config: ScalingConfig, seed: u64) -> Self {
        FunctionAutoScaler {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prev_busy: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ScalingConfig {
        &self.config
    }

    /// Measure each live container's busy fraction over the window since the
    /// previous tick. Every function type appears, even with zero replicas.
    pub fn collect_snapshot(&mut self, now: f64, cluster: &Cluster) -> FnUtilizationSnapshot {
        let mut per_function: BTreeMap<FunctionId, Vec<ContainerUtilization>> = BTreeMap::new();
        for f in 0..cluster.functions().len() as FunctionId {
            per_function.insert(f, Vec::new());
        }
        let mut next_busy = BTreeMap::new();
        for c in cluster.containers() {
            if c.state() == ContainerState::Destroyed {
                continue;
            }
            let total = c.busy_time_total(now);
            let window = total - self.prev_busy.get(&c.id).copied().unwrap_or(0.0);
            let busy_fraction = (window / self.config.interval_s).clamp(0.0, 1.0);
            next_busy.insert(c.id, total);
            per_function.entry(c.function).or_default().push(ContainerUtilization {
                container: c.id,
                busy_fraction,
            });
        }
        self.prev_busy = next_busy;
        FnUtilizationSnapshot {
            taken_at: now,
            per_function,
        }
    }

    /// Replica actions for every function: create when the average busy
    /// fraction exceeds the high threshold, destroy idle containers when the
    /// target drops below the current count.
    pub fn horizontal_scale(
        &self,
        snapshot: &FnUtilizationSnapshot,
        cluster: &Cluster,
    ) -> Vec<ScalingAction> {
        let mut actions = Vec::new();
        for (&function, _) in &snapshot.per_function {
            let current = snapshot.replica_count(function);
            let avg = snapshot.avg_utilization(function);
            let desired = desired_replicas(
                current,
                avg,
                self.config.cpu_threshold_high,
                self.config.min_replicas,
                self.config.max_replicas,
            );
            if desired > current {
                for _ in 0..(desired - current) {
                    actions.push(ScalingAction::CreateReplica { function });
                }
            } else if desired < current {
                let mut idle: Vec<&crate::cluster::Container> = cluster
                    .containers()
                    .iter()
                    .filter(|c| c.function == function && c.state() == ContainerState::Idle)
                    .collect();
                idle.sort_by(|a, b| {
                    a.idle_since
                        .unwrap_or(f64::INFINITY)
                        .total_cmp(&b.idle_since.unwrap_or(f64::INFINITY))
                        .then(a.id.cmp(&b.id))
                });
                // running containers are never destroyed; any shortfall is
                // re-evaluated at the next tick
                for c in idle.into_iter().take((current - desired) as usize) {
                    actions.push(ScalingAction::DestroyIdle { container: c.id });
                }
            }
        }
        actions
    }

    /// Step resizes for containers outside the utilization band. The set of
    /// emitted actions is jointly feasible: capacity claimed by one action is
    /// unavailable to later ones in the same tick.
    pub fn vertical_scale(
        &mut self,
        snapshot: &FnUtilizationSnapshot,
        cluster: &Cluster,
    ) -> Vec<ScalingAction> {
        if !self.config.vertical.enabled {
            return Vec::new();
        }
        let vcfg = &self.config.vertical;
        let mut actions = Vec::new();
        let mut claimed: BTreeMap<VmId, (f64, f64)> = BTreeMap::new();
        for (_, containers) in snapshot.per_function.iter() {
            for cu in containers {
                let c = cluster.container(cu.container);
                if !matches!(c.state(), ContainerState::Idle | ContainerState::Running) {
                    continue;
                }
                let up = cu.busy_fraction > self.config.cpu_threshold_high;
                let down = cu.busy_fraction < self.config.cpu_threshold_low;
                if !up && !down {
                    continue;
                }
                let vm = cluster.vm(c.vm);
                let (claimed_cpu, claimed_mem) = claimed.get(&c.vm).copied().unwrap_or((0.0, 0.0));
                let fn_type = cluster.function(c.function);
                let mut viable: Vec<(f64, f64)> = Vec::new();
                for (&dc, &dm) in vcfg.cpu_steps.iter().zip(vcfg.mem_steps.iter()) {
                    if up && dc > 0.0 {
                        let new_cpu = c.cpu_share + dc;
                        let new_mem = c.mem_mb + dm;
                        let under_caps = vcfg.cpu_max.map_or(true, |cap| new_cpu <= cap + TIME_EPS)
                            && vcfg.mem_max_mb.map_or(true, |cap| new_mem <= cap + TIME_EPS);
                        if under_caps && vm.can_fit(claimed_cpu + dc, claimed_mem + dm) {
                            viable.push((dc, dm));
                        }
                    } else if down && dc < 0.0 {
                        let new_cpu = c.cpu_share + dc;
                        let new_mem = c.mem_mb + dm;
                        // keep the container able to serve one request
                        let floor_cpu = fn_type.cpu_demand_vcpu;
                        let floor_mem = fn_type.mem_demand_mb;
                        let inflight_cpu: f64 = c.inflight().iter().map(|r| r.cpu_demand).sum();
                        let inflight_mem: f64 = c.inflight().iter().map(|r| r.mem_demand).sum();
                        if new_cpu + TIME_EPS >= floor_cpu.max(inflight_cpu)
                            && new_mem + TIME_EPS >= floor_mem.max(inflight_mem)
                        {
                            viable.push((dc, dm));
                        }
                    }
                }
                if viable.is_empty() {
                    continue;
                }
                let (dc, dm) = match vcfg.selection {
                    ActionSelection::Random => viable[self.rng.gen_range(0..viable.len())],
                    ActionSelection::LargestFeasible => *viable
                        .iter()
                        .max_by(|a, b| a.0.abs().total_cmp(&b.0.abs()))
                        .expect("non-empty"),
                };
                let entry = claimed.entry(c.vm).or_insert((0.0, 0.0));
                entry.0 += dc.max(0.0);
                entry.1 += dm.max(0.0);
                actions.push(ScalingAction::Resize {
                    container: c.id,
                    new_cpu_share: c.cpu_share + dc,
                    new_mem_mb: c.mem_mb + dm,
                });
            }
        }
        actions
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{FunctionType, LifecyclePolicy, RequestExec};
    use crate::engine::EngineCore;

    fn test_cluster(share: f64, conc: u32) -> Cluster {
        Cluster::new(
            2,
            4.0,
            3072.0,
            vec![FunctionType {
                name: "f1".to_string(),
                cpu_demand_vcpu: 0.1,
                mem_demand_mb: 64.0,
                cpu_share: share,
                mem_mb: 512.0,
                max_concurrency: conc,
            }],
            LifecyclePolicy {
                startup_delay_s: 0.0,
                keep_alive_s: None,
                destroy_on_last_completion: false,
                container_cpu_max: None,
                container_mem_max_mb: None,
            },
        )
    }

    fn scaler(config: ScalingConfig) -> FunctionAutoScaler {
        FunctionAutoScaler::new(config, 7)
    }

    fn base_config() -> ScalingConfig {
        ScalingConfig {
            enabled: true,
            interval_s: 30.0,
            cpu_threshold_high: 0.6,
            cpu_threshold_low: 0.2,
            min_replicas: 1,
            max_replicas: 100,
            vertical: VerticalScalingConfig::default(),
        }
    }

    fn ready(core: &mut EngineCore, cluster: &mut Cluster, vm: u32) -> ContainerId {
        let cid = cluster.create_container(core, 0, vm).unwrap();
        core.step_due(f64::INFINITY).unwrap();
        cluster.container_ready(core, cid, false);
        cid
    }

    #[test]
    fn snapshot_busy_fractions() {
        let mut core = EngineCore::new();
        let mut cluster = test_cluster(1.0, 1);
        let busy_all = ready(&mut core, &mut cluster, 0);
        let idle_all = ready(&mut core, &mut cluster, 0);
        let busy_half = ready(&mut core, &mut cluster, 1);
        // busy_all: work 30 at 1.0 vCPU covers the whole window
        cluster
            .start_request(&mut core, busy_all, RequestExec { request: 0, cpu_work: 30.0, cpu_demand: 0.1, mem_demand: 64.0 })
            .unwrap();
        // busy_half: work 15 completes mid-window
        cluster
            .start_request(&mut core, busy_half, RequestExec { request: 1, cpu_work: 15.0, cpu_demand: 0.1, mem_demand: 64.0 })
            .unwrap();
        let ev = core.step_due(f64::INFINITY).unwrap();
        assert_eq!(ev.time, 15.0);
        cluster.complete_request(&mut core, busy_half, 1);
        core.schedule(30.0, crate::engine::EventKind::ScalingTick, Default::default())
            .unwrap();
        core.step_due(f64::INFINITY).unwrap();

        let mut s = scaler(base_config());
        let snap = s.collect_snapshot(30.0, &cluster);
        let utils = &snap.per_function[&0];
        let get = |cid| utils.iter().find(|u| u.container == cid).unwrap().busy_fraction;
        assert!((get(busy_all) - 1.0).abs() < 1e-9);
        assert_eq!(get(idle_all), 0.0);
        assert!((get(busy_half) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn snapshot_windows_do_not_double_count() {
        let mut core = EngineCore::new();
        let mut cluster = test_cluster(1.0, 1);
        let cid = ready(&mut core, &mut cluster, 0);
        cluster
            .start_request(&mut core, cid, RequestExec { request: 0, cpu_work: 45.0, cpu_demand: 0.1, mem_demand: 64.0 })
            .unwrap();
        let mut s = scaler(base_config());
        let first = s.collect_snapshot(30.0, &cluster);
        assert!((first.per_function[&0][0].busy_fraction - 1.0).abs() < 1e-9);
        // by t=60 the request finished at t=45: only 15 s busy in the window
        core.schedule(45.0, crate::engine::EventKind::ScalingTick, Default::default()).unwrap();
        core.step_due(f64::INFINITY).unwrap();
        cluster.complete_request(&mut core, cid, 0);
        let second = s.collect_snapshot(60.0, &cluster);
        assert!((second.per_function[&0][0].busy_fraction - 0.5).abs() < 1e-9);
    }

    #[test]
    fn formula_examples() {
        assert_eq!(desired_replicas(4, 0.90, 0.6, 0, 100), 6);
        assert_eq!(desired_replicas(4, 0.60, 0.6, 0, 100), 4);
        assert_eq!(desired_replicas(5, 0.10, 0.6, 1, 100), 1);
        assert_eq!(desired_replicas(0, 0.0, 0.6, 1, 100), 1);
        assert_eq!(desired_replicas(10, 1.0, 0.5, 0, 12), 12);
    }

    #[test]
    fn overloaded_function_gets_new_replicas() {
        let mut core = EngineCore::new();
        let mut cluster = test_cluster(0.5, 1);
        for _ in 0..4 {
            ready(&mut core, &mut cluster, 0);
        }
        let snap = FnUtilizationSnapshot {
            taken_at: 30.0,
            per_function: BTreeMap::from([(
                0,
                (0..4)
                    .map(|i| ContainerUtilization { container: i, busy_fraction: 0.9 })
                    .collect(),
            )]),
        };
        let actions = scaler(base_config()).horizontal_scale(&snap, &cluster);
        assert_eq!(
            actions,
            vec![
                ScalingAction::CreateReplica { function: 0 },
                ScalingAction::CreateReplica { function: 0 }
            ]
        );
    }

    #[test]
    fn at_threshold_is_a_fixed_point() {
        let mut core = EngineCore::new();
        let mut cluster = test_cluster(0.5, 1);
        for _ in 0..4 {
            ready(&mut core, &mut cluster, 0);
        }
        let snap = FnUtilizationSnapshot {
            taken_at: 30.0,
            per_function: BTreeMap::from([(
                0,
                (0..4)
                    .map(|i| ContainerUtilization { container: i, busy_fraction: 0.6 })
                    .collect(),
            )]),
        };
        assert!(scaler(base_config()).horizontal_scale(&snap, &cluster).is_empty());
    }

    #[test]
    fn underutilized_function_destroys_oldest_idle_first() {
        let mut core = EngineCore::new();
        let mut cluster = test_cluster(0.5, 1);
        let mut ids = Vec::new();
        for vm in [0, 0, 0, 1, 1] {
            ids.push(ready(&mut core, &mut cluster, vm));
        }
        // make container ids[1] running so it can never be a victim
        cluster
            .start_request(&mut core, ids[1], RequestExec { request: 0, cpu_work: 100.0, cpu_demand: 0.1, mem_demand: 64.0 })
            .unwrap();
        let snap = FnUtilizationSnapshot {
            taken_at: 30.0,
            per_function: BTreeMap::from([(
                0,
                ids.iter()
                    .map(|&c| ContainerUtilization { container: c, busy_fraction: 0.1 })
                    .collect(),
            )]),
        };
        let actions = scaler(base_config()).horizontal_scale(&snap, &cluster);
        // desired = ceil(5*0.1/0.6) = 1: four must go; the running container
        // is excluded, and all candidates went idle at the same instant so
        // victims order by id
        assert_eq!(
            actions,
            vec![
                ScalingAction::DestroyIdle { container: ids[0] },
                ScalingAction::DestroyIdle { container: ids[2] },
                ScalingAction::DestroyIdle { container: ids[3] },
                ScalingAction::DestroyIdle { container: ids[4] },
            ]
        );
    }

    #[test]
    fn pinned_replica_bounds_make_horizontal_a_noop() {
        let mut core = EngineCore::new();
        let mut cluster = test_cluster(0.5, 1);
        ready(&mut core, &mut cluster, 0);
        let snap = FnUtilizationSnapshot {
            taken_at: 30.0,
            per_function: BTreeMap::from([(
                0,
                vec![ContainerUtilization { container: 0, busy_fraction: 0.95 }],
            )]),
        };
        let mut cfg = base_config();
        cfg.min_replicas = 1;
        cfg.max_replicas = 1;
        assert!(scaler(cfg).horizontal_scale(&snap, &cluster).is_empty());
    }

    fn vertical_config(steps: (Vec<f64>, Vec<f64>), selection: ActionSelection) -> ScalingConfig {
        ScalingConfig {
            enabled: true,
            interval_s: 30.0,
            cpu_threshold_high: 0.6,
            cpu_threshold_low: 0.2,
            min_replicas: 1,
            max_replicas: 1,
            vertical: VerticalScalingConfig {
                enabled: true,
                cpu_steps: steps.0,
                mem_steps: steps.1,
                cpu_max: Some(1.0),
                mem_max_mb: Some(3072.0),
                selection,
            },
        }
    }

    fn snapshot_for(container: ContainerId, busy: f64) -> FnUtilizationSnapshot {
        FnUtilizationSnapshot {
            taken_at: 30.0,
            per_function: BTreeMap::from([(
                0,
                vec![ContainerUtilization { container, busy_fraction: busy }],
            )]),
        }
    }

    #[test]
    fn vertical_upscale_picks_among_viable_steps() {
        let mut core = EngineCore::new();
        let mut cluster = test_cluster(0.5, 1);
        let cid = ready(&mut core, &mut cluster, 0);
        let cfg = vertical_config((vec![0.25, 0.5], vec![0.0, 0.0]), ActionSelection::LargestFeasible);
        let mut s = scaler(cfg);
        let actions = s.vertical_scale(&snapshot_for(cid, 0.95), &cluster);
        assert_eq!(
            actions,
            vec![ScalingAction::Resize { container: cid, new_cpu_share: 1.0, new_mem_mb: 512.0 }]
        );
    }

    #[test]
    fn vertical_random_selection_is_seeded() {
        let mut core = EngineCore::new();
        let mut cluster = test_cluster(0.5, 1);
        let cid = ready(&mut core, &mut cluster, 0);
        let pick = |seed| {
            let cfg = vertical_config((vec![0.25, 0.5], vec![0.0, 0.0]), ActionSelection::Random);
            let mut s = FunctionAutoScaler::new(cfg, seed);
            s.vertical_scale(&snapshot_for(cid, 0.95), &cluster)
        };
        assert_eq!(pick(3), pick(3));
    }

    #[test]
    fn container_at_cap_gets_no_upscale() {
        let mut core = EngineCore::new();
        let mut cluster = test_cluster(1.0, 1);
        let cid = ready(&mut core, &mut cluster, 0);
        let cfg = vertical_config((vec![0.25], vec![256.0]), ActionSelection::Random);
        let mut s = scaler(cfg);
        assert!(s.vertical_scale(&snapshot_for(cid, 0.99), &cluster).is_empty());
    }

    #[test]
    fn vertical_downscale_respects_the_demand_floor() {
        let mut core = EngineCore::new();
        let mut cluster = test_cluster(0.5, 1);
        let cid = ready(&mut core, &mut cluster, 0);
        let cfg = vertical_config((vec![-0.25], vec![0.0]), ActionSelection::Random);
        let mut s = scaler(cfg);
        // 0.5 - 0.25 = 0.25 stays above the 0.1 per-request demand
        let actions = s.vertical_scale(&snapshot_for(cid, 0.05), &cluster);
        assert_eq!(
            actions,
            vec![ScalingAction::Resize { container: cid, new_cpu_share: 0.25, new_mem_mb: 512.0 }]
        );
        // a second step would cross the floor
        let mut shrunk = test_cluster(0.15, 1);
        let mut core2 = EngineCore::new();
        let cid2 = ready(&mut core2, &mut shrunk, 0);
        let cfg = vertical_config((vec![-0.25], vec![0.0]), ActionSelection::Random);
        let mut s2 = scaler(cfg);
        assert!(s2.vertical_scale(&snapshot_for(cid2, 0.05), &shrunk).is_empty());
    }

    #[test]
    fn emitted_upscales_never_overcommit_a_vm() {
        let mut core = EngineCore::new();
        // 4-vCPU VM with two 1.75-share containers: only 0.5 free
        let mut cluster = Cluster::new(
            1,
            4.0,
            3072.0,
            vec![FunctionType {
                name: "f1".to_string(),
                cpu_demand_vcpu: 0.1,
                mem_demand_mb: 64.0,
                cpu_share: 1.75,
                mem_mb: 512.0,
                max_concurrency: 1,
            }],
            LifecyclePolicy {
                startup_delay_s: 0.0,
                keep_alive_s: None,
                destroy_on_last_completion: false,
                container_cpu_max: None,
                container_mem_max_mb: None,
            },
        );
        let a = ready(&mut core, &mut cluster, 0);
        let b = ready(&mut core, &mut cluster, 0);
        let cfg = ScalingConfig {
            enabled: true,
            interval_s: 30.0,
            cpu_threshold_high: 0.6,
            cpu_threshold_low: 0.2,
            min_replicas: 1,
            max_replicas: 2,
            vertical: VerticalScalingConfig {
                enabled: true,
                cpu_steps: vec![0.5],
                mem_steps: vec![0.0],
                cpu_max: None,
                mem_max_mb: None,
                selection: ActionSelection::Random,
            },
        };
        let snap = FnUtilizationSnapshot {
            taken_at: 30.0,
            per_function: BTreeMap::from([(
                0,
                vec![
                    ContainerUtilization { container: a, busy_fraction: 0.9 },
                    ContainerUtilization { container: b, busy_fraction: 0.9 },
                ],
            )]),
        };
        let mut s = scaler(cfg);
        let actions = s.vertical_scale(&snap, &cluster);
        // only the first fits: the claimed 0.5 leaves nothing for the second
        assert_eq!(actions.len(), 1);
    }
}
