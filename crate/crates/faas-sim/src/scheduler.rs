//! Container-to-VM placement policies: first-fit, round-robin, random,
//! best-fit, and worst-fit over the live allocation ledgers.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{Vm, VmId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementPolicy {
    FirstFit,
    RoundRobin,
    Random,
    BestFit,
    WorstFit,
}

/// Ordering key for the bin-packing policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UtilizationKey {
    /// Allocated vCPU fraction (default).
    #[default]
    Cpu,
    /// Max of the allocated CPU and memory fractions.
    Combined,
}

/// Reserved-capacity utilization of a VM under the given key.
pub fn utilization(vm: &Vm, key: UtilizationKey) -> f64 {
    let cpu = vm.allocated_vcpu / vm.vcpus;
    match key {
        UtilizationKey::Cpu => cpu,
        UtilizationKey::Combined => cpu.max(vm.allocated_mem_mb / vm.mem_mb),
    }
}

#[derive(Debug)]
pub struct FunctionScheduler {
    policy: PlacementPolicy,
    util_key: UtilizationKey,
    rr_cursor: usize,
    rng: ChaCha8Rng,
}

impl FunctionScheduler {
    pub fn new(policy: PlacementPolicy, util_key: UtilizationKey, seed: u64) -> Self {
        FunctionScheduler {
            policy,
            util_key,
            rr_cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn policy(&self) -> PlacementPolicy {
        self.policy
    }

    /// Pick a VM with room for a `cpu` vCPU / `mem` MB container, or `None`
    /// when nothing fits. `vms` must be in creation order.
    pub fn find_vm_for_container(&mut self, cpu: f64, mem: f64, vms: &[Vm]) -> Option<VmId> {
        let feasible = |vm: &Vm| vm.can_fit(cpu, mem);
        match self.policy {
            PlacementPolicy::FirstFit => vms.iter().find(|vm| feasible(vm)).map(|vm| vm.id),
            PlacementPolicy::RoundRobin => {
                if vms.is_empty() {
                    return None;
                }
                for offset in 0..vms.len() {
                    let idx = (self.rr_cursor + offset) % vms.len();
                    if feasible(&vms[idx]) {
                        self.rr_cursor = (idx + 1) % vms.len();
                        return Some(vms[idx].id);
                    }
                }
                None
            }
            PlacementPolicy::Random => {
                let candidates: Vec<VmId> =
                    vms.iter().filter(|vm| feasible(vm)).map(|vm| vm.id).collect();
                if candidates.is_empty() {
                    None
                } else {
                    Some(candidates[self.rng.gen_range(0..candidates.len())])
                }
            }
            PlacementPolicy::BestFit => {
                let mut best: Option<(VmId, f64)> = None;
                for vm in vms.iter().filter(|vm| feasible(vm)) {
                    let u = utilization(vm, self.util_key);
                    // strictly greater keeps the lowest id on ties
                    if best.map_or(true, |(_, bu)| u > bu) {
                        best = Some((vm.id, u));
                    }
                }
                best.map(|(id, _)| id)
            }
            PlacementPolicy::WorstFit => {
                let mut worst: Option<(VmId, f64)> = None;
                for vm in vms.iter().filter(|vm| feasible(vm)) {
                    let u = utilization(vm, self.util_key);
                    if worst.map_or(true, |(_, wu)| u < wu) {
                        worst = Some((vm.id, u));
                    }
                }
                worst.map(|(id, _)| id)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{Cluster, FunctionType, LifecyclePolicy};
    use crate::engine::EngineCore;

    fn fleet(allocations: &[f64]) -> Cluster {
        // one function whose share we use to pre-load VMs
        let functions = vec![FunctionType {
            name: "pad".to_string(),
            cpu_demand_vcpu: 0.25,
            mem_demand_mb: 16.0,
            cpu_share: 0.25,
            mem_mb: 16.0,
            max_concurrency: 1,
        }];
        let policy = LifecyclePolicy {
            startup_delay_s: 0.0,
            keep_alive_s: None,
            destroy_on_last_completion: false,
            container_cpu_max: None,
            container_mem_max_mb: None,
        };
        let mut cluster = Cluster::new(allocations.len() as u32, 4.0, 3072.0, functions, policy);
        let mut core = EngineCore::new();
        for (vm, &alloc) in allocations.iter().enumerate() {
            let pads = (alloc * 4.0 / 0.25).round() as u32;
            for _ in 0..pads {
                cluster.create_container(&mut core, 0, vm as u32).unwrap();
            }
        }
        cluster
    }

    #[test]
    fn utilization_examples() {
        let cluster = fleet(&[0.0, 0.75]);
        assert_eq!(utilization(cluster.vm(0), UtilizationKey::Cpu), 0.0);
        assert_eq!(utilization(cluster.vm(1), UtilizationKey::Cpu), 0.75);
    }

    #[test]
    fn combined_key_takes_the_max_fraction() {
        let functions = vec![FunctionType {
            name: "wide".to_string(),
            cpu_demand_vcpu: 0.5,
            mem_demand_mb: 100.0,
            cpu_share: 2.0,         // cpu fraction 0.5
            mem_mb: 2457.6,         // mem fraction 0.8
            max_concurrency: 1,
        }];
        let policy = LifecyclePolicy {
            startup_delay_s: 0.0,
            keep_alive_s: None,
            destroy_on_last_completion: false,
            container_cpu_max: None,
            container_mem_max_mb: None,
        };
        let mut cluster = Cluster::new(1, 4.0, 3072.0, functions, policy);
        let mut core = EngineCore::new();
        cluster.create_container(&mut core, 0, 0).unwrap();
        let u = utilization(cluster.vm(0), UtilizationKey::Combined);
        assert!((u - 0.8).abs() < 1e-9, "expected max rule to pick 0.8, got {u}");
    }

    #[test]
    fn best_fit_picks_the_most_utilized_feasible_vm() {
        let cluster = fleet(&[0.75, 0.50, 0.25]);
        let mut sched = FunctionScheduler::new(PlacementPolicy::BestFit, UtilizationKey::Cpu, 0);
        let vm = sched.find_vm_for_container(0.5, 128.0, cluster.vms());
        assert_eq!(vm, Some(0));
    }

    #[test]
    fn best_fit_skips_infeasible_vms() {
        let cluster = fleet(&[1.0, 0.50, 0.25]);
        let mut sched = FunctionScheduler::new(PlacementPolicy::BestFit, UtilizationKey::Cpu, 0);
        // vm 0 is full for a 0.5 vCPU ask
        let vm = sched.find_vm_for_container(0.5, 128.0, cluster.vms());
        assert_eq!(vm, Some(1));
    }

    #[test]
    fn worst_fit_picks_the_least_utilized() {
        let cluster = fleet(&[0.75, 0.50, 0.25]);
        let mut sched = FunctionScheduler::new(PlacementPolicy::WorstFit, UtilizationKey::Cpu, 0);
        assert_eq!(sched.find_vm_for_container(0.5, 128.0, cluster.vms()), Some(2));
    }

    #[test]
    fn ties_break_to_the_lowest_vm_id() {
        let cluster = fleet(&[0.5, 0.5, 0.5]);
        let mut best = FunctionScheduler::new(PlacementPolicy::BestFit, UtilizationKey::Cpu, 0);
        let mut worst = FunctionScheduler::new(PlacementPolicy::WorstFit, UtilizationKey::Cpu, 0);
        assert_eq!(best.find_vm_for_container(0.5, 128.0, cluster.vms()), Some(0));
        assert_eq!(worst.find_vm_for_container(0.5, 128.0, cluster.vms()), Some(0));
    }

    #[test]
    fn round_robin_cycles_through_feasible_vms() {
        let cluster = fleet(&[0.0, 0.0, 0.0, 0.0]);
        let mut sched = FunctionScheduler::new(PlacementPolicy::RoundRobin, UtilizationKey::Cpu, 0);
        let picks: Vec<_> = (0..4)
            .map(|_| sched.find_vm_for_container(1.0, 512.0, cluster.vms()).unwrap())
            .collect();
        assert_eq!(picks, vec![0, 1, 2, 3]);
    }

    #[test]
    fn first_fit_returns_minimal_feasible_index() {
        let cluster = fleet(&[1.0, 1.0, 0.25]);
        let mut sched = FunctionScheduler::new(PlacementPolicy::FirstFit, UtilizationKey::Cpu, 0);
        assert_eq!(sched.find_vm_for_container(0.5, 128.0, cluster.vms()), Some(2));
    }

    #[test]
    fn no_feasible_vm_yields_none() {
        let cluster = fleet(&[1.0, 1.0]);
        for policy in [
            PlacementPolicy::FirstFit,
            PlacementPolicy::RoundRobin,
            PlacementPolicy::Random,
            PlacementPolicy::BestFit,
            PlacementPolicy::WorstFit,
        ] {
            let mut sched = FunctionScheduler::new(policy, UtilizationKey::Cpu, 0);
            assert_eq!(sched.find_vm_for_container(0.5, 128.0, cluster.vms()), None);
        }
    }

    #[test]
    fn random_policy_is_deterministic_under_a_seed() {
        let cluster = fleet(&[0.0, 0.0, 0.0, 0.0]);
        let picks = |seed| {
            let mut sched = FunctionScheduler::new(PlacementPolicy::Random, UtilizationKey::Cpu, seed);
            (0..8)
                .map(|_| sched.find_vm_for_container(0.25, 64.0, cluster.vms()).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(picks(42), picks(42));
    }
}
