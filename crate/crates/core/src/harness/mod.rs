//! Two-stage discrete-event simulator, exact small-instance oracles,
//! adversarial worst-case instances, synthetic workloads, and the empirical
//! competitive-ratio experiment.

mod adversarial;
mod metrics;
mod oracle;
mod ratio;
mod sim;
mod synth;

pub use adversarial::{adversarial_instance, AdversarialInstance, RatioParams};
pub use metrics::{mean, paired_permutation_test, variance};
pub use oracle::{
    brute_force_mdp, dpda_policy_value, offline_exhaustive, random_tiny_instance, TinyInstance,
    BRUTE_FORCE_STATE_CAP,
};
pub use ratio::{competitive_ratio, stage1_value, RatioReport, ScheduledInstance};
pub use sim::{
    run_two_stage, ActionRecord, EpisodeConfig, EpisodeReport, OrderPolicyKind, Stage1Algo,
    Stage1Record, Stage2Algo,
};
pub use synth::{
    synth_city, synth_demand, synth_fleet, synth_scheduled_instance, synth_bound_instance,
    SynthScale,
};

use crate::cst::{serve_probabilities, CstError, CstTable};
use crate::demand::DemandModel;
use crate::stage2::{Stage2Error, VirtualDemand};
use crate::world::{RegionId, Request, RequestId, TimeStep, TravelTimeMatrix, VehicleId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("vehicle {vehicle} missed commitment {request:?} due at {time}: vehicle at {location} (free at {free_at})")]
    CommitmentViolation {
        vehicle: VehicleId,
        request: RequestId,
        time: u32,
        location: u32,
        free_at: u32,
    },
    #[error("configuration error: {0}")]
    ConfigError(String),
    #[error("instance too large to enumerate: {states} states exceeds the {cap} cap")]
    InstanceTooLarge { states: u64, cap: u64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Cst(#[from] CstError),
    #[error(transparent)]
    Stage2(#[from] Stage2Error),
}

/// Expected single-vehicle value at `start` as identical co-located vehicles
/// pile on: entry `k` is the table value after `k` applications of the
/// sequential-dispatch demand-thinning update. The series starts at the plain
/// single-vehicle value and can only shrink as mass is absorbed.
pub fn cst_vs_fleet(
    matrix: &TravelTimeMatrix,
    demand: &DemandModel,
    anchor: &Request,
    start: (TimeStep, RegionId),
    max_vehicles: usize,
) -> Result<Vec<f64>, HarnessError> {
    let mut h = VirtualDemand::from_model(demand);
    let mut series = Vec::with_capacity(max_vehicles);
    for k in 0..max_vehicles {
        let mut table = CstTable::build(matrix, &h, anchor)?;
        series.push(table.value(&h, start.0, start.1)?);
        if k + 1 < max_vehicles {
            let probs = serve_probabilities(&mut table, &h, start)?;
            h.apply(&probs)?;
        }
    }
    Ok(series)
}
