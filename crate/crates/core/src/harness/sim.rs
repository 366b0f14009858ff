//! The two-stage episode simulator.
//!
//! Stage 1 feeds the sampled scheduled stream through the configured
//! admission algorithm, building per-vehicle schedule books. Stage 2 replays
//! the day tick by tick: due commitments are served exactly on time (a miss
//! is a bug and aborts the episode), then the configured dispatcher assigns
//! free vehicles to the tick's realized on-demand requests or relocates
//! them. Every random draw descends from the master seed through named
//! streams, so two runs of one config are identical and changing the
//! algorithm never perturbs the sampled workload.

use super::HarnessError;
use crate::baselines::{enhanced_km_cached, greedy_km, lpa_dispatch, lpa_learn, lpa_stage1, BipartiteInstance, LpaValueTable, Transition};
use crate::cst::CstCache;
use crate::demand::{sample_on_demand, sample_scheduled, DemandModel, DemandView};
use crate::rng::Rng;
use crate::stage1::{
    best_score_traced, first_fit, random_best_score_traced, Decision, RankWeights, ScoreVariant,
};
use crate::stage2::{dpda_su, FleetVehicle, OrderPolicy};
use crate::world::{
    Action, RegionId, Request, RequestId, RequestKind, ScheduleBook, TimeStep, TravelTimeMatrix,
    Vehicle, VehicleId,
};
use std::collections::BTreeMap;

const VIRTUAL_END_ID_BASE: u64 = 900_000_000;
const ON_DEMAND_ID_BASE: u64 = 1_000_000_000;
const LPA_TRAINING_DAYS: u64 = 14;

/// Stage-1 algorithm selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stage1Algo {
    FirstFit,
    BestScore(ScoreVariant),
    RandomBestScore {
        variant: ScoreVariant,
        alpha: f64,
        /// Scale of the priority bonus; defaults to the demand model's mean
        /// type value when absent.
        beta: Option<f64>,
    },
    Lpa {
        gamma: f64,
    },
}

/// Stage-2 dispatcher selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stage2Algo {
    DpdaSu,
    GreedyKm,
    EnhancedKm,
    Lpa { gamma: f64 },
}

/// Vehicle-ordering policy, resolved to a seeded shuffle per tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderPolicyKind {
    Initial,
    Reverse,
    Random,
}

#[derive(Debug, Clone)]
pub struct EpisodeConfig<'a> {
    pub matrix: &'a TravelTimeMatrix,
    pub demand: &'a DemandModel,
    pub fleet: Vec<Vehicle>,
    pub kappa: f64,
    pub stage1: Stage1Algo,
    pub stage2: Stage2Algo,
    pub order: OrderPolicyKind,
    pub seed: u64,
    /// Collect per-decision and per-action records (costs memory).
    pub collect_traces: bool,
}

/// One admission decision, ready for the decision-log CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Record {
    pub seq: usize,
    pub request_id: RequestId,
    pub algorithm: &'static str,
    pub accepted: bool,
    pub vehicle: Option<VehicleId>,
    pub delta: Option<f64>,
    pub delta_prime: Option<f64>,
}

/// One dispatch action, ready for the action-trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionRecord {
    pub tick: u32,
    pub vehicle: VehicleId,
    pub kind: &'static str,
    pub target_region: Option<RegionId>,
    pub request: Option<RequestId>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReport {
    pub total_value: f64,
    pub scheduled_value: f64,
    pub on_demand_value: f64,
    pub stage1_accepted: usize,
    pub stage1_rejected: usize,
    pub stage2_served: usize,
    pub stage2_rejected: usize,
    pub per_vehicle_earnings: BTreeMap<VehicleId, f64>,
    pub earnings_variance: f64,
    pub commitment_violations: usize,
    pub wall_time_s: f64,
    pub stage1_log: Vec<Stage1Record>,
    pub action_trace: Vec<ActionRecord>,
}

pub(super) struct Stage1Summary {
    pub books: Vec<ScheduleBook>,
    pub accepted: usize,
    pub rejected: usize,
    pub accepted_value: f64,
    pub log: Vec<Stage1Record>,
}

fn algo_name(algo: &Stage1Algo) -> &'static str {
    match algo {
        Stage1Algo::FirstFit => "firstfit",
        Stage1Algo::BestScore(ScoreVariant::Plain) => "bestscore",
        Stage1Algo::BestScore(ScoreVariant::RejectNonPositive) => "bestscore-r",
        Stage1Algo::BestScore(ScoreVariant::AcceptExp) => "bestscore-a",
        Stage1Algo::RandomBestScore {
            variant: ScoreVariant::Plain,
            ..
        } => "randombestscore",
        Stage1Algo::RandomBestScore {
            variant: ScoreVariant::RejectNonPositive,
            ..
        } => "randombestscore-r",
        Stage1Algo::RandomBestScore {
            variant: ScoreVariant::AcceptExp,
            ..
        } => "randombestscore-a",
        Stage1Algo::Lpa { .. } => "lpa",
    }
}

/// Run one admission pass. The demand view is the raw estimated model: the
/// advance-booking stage precedes any real-time thinning.
pub(super) fn run_stage1(
    matrix: &TravelTimeMatrix,
    demand: &DemandModel,
    fleet: &[Vehicle],
    stream: &[Request],
    algo: &Stage1Algo,
    seed: u64,
    collect_log: bool,
) -> Stage1Summary {
    let master = Rng::new(seed);
    let mut accept_rng = master.stream("stage1-accept");
    let mut books: Vec<ScheduleBook> = fleet
        .iter()
        .enumerate()
        .map(|(i, v)| ScheduleBook::new(*v, VIRTUAL_END_ID_BASE + i as u64))
        .collect();
    let mut cache = CstCache::new();
    let weights = match algo {
        Stage1Algo::RandomBestScore { alpha, beta, .. } => {
            let ids: Vec<VehicleId> = fleet.iter().map(|v| v.id).collect();
            let beta = beta.unwrap_or_else(|| demand.mean_value());
            let mut wrng = master.stream("stage1-weights");
            Some(RankWeights::draw(&ids, *alpha, beta, &mut wrng))
        }
        _ => None,
    };
    let lpa_table = match algo {
        Stage1Algo::Lpa { gamma } => Some(build_lpa_table(matrix, demand, *gamma, &master)),
        _ => None,
    };
    let mut summary = Stage1Summary {
        books: Vec::new(),
        accepted: 0,
        rejected: 0,
        accepted_value: 0.0,
        log: Vec::new(),
    };
    for (seq, r) in stream.iter().enumerate() {
        let (decision, delta, delta_prime) = match algo {
            Stage1Algo::FirstFit => (first_fit(matrix, r, &mut books), None, None),
            Stage1Algo::BestScore(variant) => {
                let (d, delta) =
                    best_score_traced(matrix, r, &mut books, demand, *variant, &mut cache, &mut accept_rng);
                (d, delta, None)
            }
            Stage1Algo::RandomBestScore { variant, .. } => {
                let (d, delta, dp) = random_best_score_traced(
                    matrix,
                    r,
                    &mut books,
                    demand,
                    weights.as_ref().unwrap(),
                    *variant,
                    &mut cache,
                    &mut accept_rng,
                );
                (d, delta, dp)
            }
            Stage1Algo::Lpa { .. } => (
                lpa_stage1(matrix, r, lpa_table.as_ref().unwrap(), &mut books),
                None,
                None,
            ),
        };
        match decision {
            Decision::Accept(v) => {
                summary.accepted += 1;
                summary.accepted_value += r.value;
                if collect_log {
                    summary.log.push(Stage1Record {
                        seq,
                        request_id: r.id,
                        algorithm: algo_name(algo),
                        accepted: true,
                        vehicle: Some(v),
                        delta,
                        delta_prime,
                    });
                }
            }
            Decision::Reject => {
                summary.rejected += 1;
                if collect_log {
                    summary.log.push(Stage1Record {
                        seq,
                        request_id: r.id,
                        algorithm: algo_name(algo),
                        accepted: false,
                        vehicle: None,
                        delta,
                        delta_prime,
                    });
                }
            }
        }
    }
    summary.books = books;
    summary
}

/// Train the tabular values on simulated history: a fleet working sampled
/// training days under myopic matching, logging one transition per decision
/// (served rides carry their value, idle waits carry zero). This keeps the
/// learned state values at per-driver scale.
fn build_lpa_table(
    matrix: &TravelTimeMatrix,
    demand: &DemandModel,
    gamma: f64,
    master: &Rng,
) -> LpaValueTable {
    let horizon = demand.horizon();
    let n_vehicles = 8.min(matrix.n_regions()).max(2);
    let mut transitions = Vec::new();
    for day in 0..LPA_TRAINING_DAYS {
        let mut rng = master.stream_indexed("lpa-training", day);
        let stream = sample_on_demand(demand, &mut rng, 0);
        let mut by_tick: Vec<Vec<Request>> = vec![Vec::new(); horizon as usize];
        for r in stream {
            by_tick[r.start().get() as usize - 1].push(r);
        }
        // Free-at/location per training vehicle, spread across regions.
        let mut state: Vec<(u32, RegionId)> = (0..n_vehicles)
            .map(|i| (1u32, RegionId::new(1 + (i % matrix.n_regions()) as u32)))
            .collect();
        for t in 1..=horizon {
            let pool = &by_tick[t as usize - 1];
            let free: Vec<usize> = (0..n_vehicles).filter(|&i| state[i].0 <= t).collect();
            if free.is_empty() {
                continue;
            }
            let mut edges = Vec::new();
            for (li, &i) in free.iter().enumerate() {
                for (ri, r) in pool.iter().enumerate() {
                    if r.origin() == state[i].1 {
                        edges.push((li, ri, r.value));
                    }
                }
            }
            let instance = BipartiteInstance {
                left: free.iter().map(|&i| VehicleId(i as u32)).collect(),
                right: pool.clone(),
                edges,
            };
            let matching = greedy_km(&instance);
            let mut matched = vec![false; free.len()];
            for (li, ri) in &matching.pairs {
                matched[*li] = true;
                let i = free[*li];
                let r = &instance.right[*ri];
                let duration = matrix.time(r.origin(), r.destination()).max(1);
                transitions.push(Transition {
                    state: (TimeStep::new(t), state[i].1),
                    reward: r.value,
                    next: r.dropoff(matrix),
                    duration,
                });
                state[i] = (t + duration, r.destination());
            }
            for (li, &i) in free.iter().enumerate() {
                if !matched[li] && t < horizon {
                    transitions.push(Transition {
                        state: (TimeStep::new(t), state[i].1),
                        reward: 0.0,
                        next: (TimeStep::new(t + 1), state[i].1),
                        duration: 1,
                    });
                    state[i].0 = t + 1;
                }
            }
        }
    }
    lpa_learn(&transitions, gamma, horizon, demand.n_regions())
}

struct VehState {
    vehicle: Vehicle,
    commitments: Vec<Request>,
    commit_ix: usize,
    free_at: u32,
    loc: RegionId,
    retired: bool,
    earnings: f64,
}

impl VehState {
    fn next_commitment(&self) -> &Request {
        &self.commitments[self.commit_ix]
    }
}

/// Run a full two-stage episode.
pub fn run_two_stage(config: &EpisodeConfig) -> Result<EpisodeReport, HarnessError> {
    let started = std::time::Instant::now();
    let matrix = config.matrix;
    let demand = config.demand;
    let horizon = demand.horizon();
    if config.fleet.is_empty() {
        return Err(HarnessError::ConfigError("fleet is empty".into()));
    }
    for v in &config.fleet {
        if v.end.0.get() > horizon {
            return Err(HarnessError::ConfigError(format!(
                "vehicle {} ends after the horizon",
                v.id
            )));
        }
    }
    if !(config.kappa >= 0.0) {
        return Err(HarnessError::ConfigError("kappa must be non-negative".into()));
    }
    let master = Rng::new(config.seed);

    // Stage 1: sample the booking stream and run admission.
    let mut sched_rng = master.stream("scheduled-sampling");
    let scheduled = sample_scheduled(demand, config.kappa, &mut sched_rng, 1);
    let stage1 = run_stage1(
        matrix,
        demand,
        &config.fleet,
        &scheduled,
        &config.stage1,
        config.seed,
        config.collect_traces,
    );

    // Stage 2 workload: one day of on-demand requests, bucketed per tick.
    let mut demand_rng = master.stream("demand-sampling");
    let day_stream = sample_on_demand(demand, &mut demand_rng, ON_DEMAND_ID_BASE);
    let realized_total = day_stream.len();
    let mut by_tick: Vec<Vec<Request>> = vec![Vec::new(); horizon as usize];
    for r in day_stream {
        by_tick[r.start().get() as usize - 1].push(r);
    }

    let lpa_table = match config.stage2 {
        Stage2Algo::Lpa { gamma } => Some(build_lpa_table(matrix, demand, gamma, &master)),
        _ => None,
    };
    let mut dispatch_cache = CstCache::new(); // Enhanced-KM tables; raw view only
    let shuffle_master = master.stream("shuffles");

    let mut vehicles: Vec<VehState> = stage1
        .books
        .iter()
        .map(|book| VehState {
            vehicle: book.vehicle,
            commitments: book.commitments().to_vec(),
            commit_ix: 0,
            free_at: book.vehicle.start.0.get(),
            loc: book.vehicle.start.1,
            retired: false,
            earnings: 0.0,
        })
        .collect();

    let mut report = EpisodeReport {
        total_value: 0.0,
        scheduled_value: 0.0,
        on_demand_value: 0.0,
        stage1_accepted: stage1.accepted,
        stage1_rejected: stage1.rejected,
        stage2_served: 0,
        stage2_rejected: 0,
        per_vehicle_earnings: BTreeMap::new(),
        earnings_variance: 0.0,
        commitment_violations: 0,
        wall_time_s: 0.0,
        stage1_log: stage1.log,
        action_trace: Vec::new(),
    };

    for t in 1..=horizon {
        let mut pool: Vec<Request> = std::mem::take(&mut by_tick[t as usize - 1]);
        let mut acted = vec![false; vehicles.len()];

        // Due commitments are served exactly on time, or the episode aborts.
        for (i, vs) in vehicles.iter_mut().enumerate() {
            if vs.retired {
                continue;
            }
            let c = *vs.next_commitment();
            if c.start().get() != t {
                continue;
            }
            if vs.free_at > t || vs.loc != c.origin() {
                report.commitment_violations += 1;
                return Err(HarnessError::CommitmentViolation {
                    vehicle: vs.vehicle.id,
                    request: c.id,
                    time: t,
                    location: vs.loc.get(),
                    free_at: vs.free_at,
                });
            }
            vs.earnings += c.value;
            report.scheduled_value += c.value;
            if c.kind == RequestKind::VirtualEnd {
                vs.retired = true;
            } else {
                vs.free_at = t + matrix.time(c.origin(), c.destination());
                vs.loc = c.destination();
                vs.commit_ix += 1;
            }
            acted[i] = true;
            if config.collect_traces {
                report.action_trace.push(ActionRecord {
                    tick: t,
                    vehicle: vs.vehicle.id,
                    kind: "serve-scheduled",
                    target_region: Some(c.destination()),
                    request: Some(c.id),
                    value: c.value,
                });
            }
        }

        let free: Vec<usize> = (0..vehicles.len())
            .filter(|&i| !vehicles[i].retired && !acted[i] && vehicles[i].free_at <= t)
            .collect();
        if free.is_empty() {
            report.stage2_rejected += pool.len();
            continue;
        }

        let earnings: BTreeMap<VehicleId, f64> = vehicles
            .iter()
            .map(|vs| (vs.vehicle.id, vs.earnings))
            .collect();
        let policy = match config.order {
            OrderPolicyKind::Initial => OrderPolicy::Initial,
            OrderPolicyKind::Reverse => OrderPolicy::Reverse,
            OrderPolicyKind::Random => {
                OrderPolicy::Random(shuffle_master.stream_indexed("tick", t as u64).next_u64())
            }
        };

        match config.stage2 {
            Stage2Algo::DpdaSu => {
                let fleet: Vec<FleetVehicle> = free
                    .iter()
                    .map(|&i| {
                        let vs = &vehicles[i];
                        FleetVehicle {
                            vehicle: vs.vehicle,
                            time: TimeStep::new(t),
                            location: vs.loc,
                            anchor: *vs.next_commitment(),
                            following: vs.commitments.get(vs.commit_ix + 1).copied(),
                        }
                    })
                    .collect();
                let actions = dpda_su(matrix, &fleet, demand, policy, &mut pool, &earnings)?;
                for &i in &free {
                    let vs = &mut vehicles[i];
                    let action = actions[&vs.vehicle.id];
                    apply_action(matrix, vs, t, &action, &mut report, config.collect_traces);
                }
            }
            Stage2Algo::GreedyKm | Stage2Algo::EnhancedKm | Stage2Algo::Lpa { .. } => {
                let instance = build_instance(matrix, &vehicles, &free, &pool, t);
                let matching = match config.stage2 {
                    Stage2Algo::GreedyKm => greedy_km(&instance),
                    Stage2Algo::EnhancedKm => {
                        let anchors: BTreeMap<VehicleId, Request> = free
                            .iter()
                            .map(|&i| (vehicles[i].vehicle.id, *vehicles[i].next_commitment()))
                            .collect();
                        enhanced_km_cached(matrix, &instance, demand, &anchors, &mut dispatch_cache)
                            .expect("anchors cover every free vehicle")
                    }
                    Stage2Algo::Lpa { .. } => {
                        lpa_dispatch(matrix, &instance, lpa_table.as_ref().unwrap())
                    }
                    Stage2Algo::DpdaSu => unreachable!(),
                };
                let mut matched = vec![false; free.len()];
                for (li, ri) in &matching.pairs {
                    matched[*li] = true;
                    let vs = &mut vehicles[free[*li]];
                    let r = instance.right[*ri];
                    pool.retain(|p| p.id != r.id);
                    apply_action(
                        matrix,
                        vs,
                        t,
                        &Action::Serve(r),
                        &mut report,
                        config.collect_traces,
                    );
                }
                // Unmatched vehicles wait if the next pickup stays reachable,
                // otherwise they must head straight for it now.
                for (li, &i) in free.iter().enumerate() {
                    if matched[li] {
                        continue;
                    }
                    let anchor = *vehicles[i].next_commitment();
                    let vs = &mut vehicles[i];
                    let slack = anchor.start().get() - t;
                    let dist = matrix.time(vs.loc, anchor.origin());
                    let action = if dist + 1 <= slack {
                        Action::Wait
                    } else {
                        Action::Relocate(anchor.origin())
                    };
                    apply_action(matrix, vs, t, &action, &mut report, config.collect_traces);
                }
            }
        }
        report.stage2_rejected += pool.len();
    }

    debug_assert_eq!(report.stage2_served + report.stage2_rejected, realized_total);
    for vs in &vehicles {
        debug_assert!(vs.retired, "vehicle {} never reached its end", vs.vehicle.id);
        report
            .per_vehicle_earnings
            .insert(vs.vehicle.id, vs.earnings);
    }
    let earnings: Vec<f64> = report.per_vehicle_earnings.values().copied().collect();
    report.earnings_variance = super::metrics::variance(&earnings);
    report.total_value = report.scheduled_value + report.on_demand_value;
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}

fn build_instance(
    matrix: &TravelTimeMatrix,
    vehicles: &[VehState],
    free: &[usize],
    pool: &[Request],
    t: u32,
) -> BipartiteInstance {
    let mut edges = Vec::new();
    for (li, &i) in free.iter().enumerate() {
        let vs = &vehicles[i];
        let anchor = vs.next_commitment();
        let slack = anchor.start().get() - t;
        for (ri, r) in pool.iter().enumerate() {
            if r.origin() == vs.loc
                && r.start().get() == t
                && r.destination() != vs.loc
                && matrix.time(vs.loc, r.destination())
                    + matrix.time(r.destination(), anchor.origin())
                    <= slack
            {
                edges.push((li, ri, r.value));
            }
        }
    }
    BipartiteInstance {
        left: free.iter().map(|&i| vehicles[i].vehicle.id).collect(),
        right: pool.to_vec(),
        edges,
    }
}

fn apply_action(
    matrix: &TravelTimeMatrix,
    vs: &mut VehState,
    t: u32,
    action: &Action,
    report: &mut EpisodeReport,
    trace: bool,
) {
    let (kind, target, request, value) = match action {
        Action::Serve(r) => {
            vs.earnings += r.value;
            report.on_demand_value += r.value;
            report.stage2_served += 1;
            vs.free_at = t + matrix.time(r.origin(), r.destination());
            vs.loc = r.destination();
            ("serve", Some(r.destination()), Some(r.id), r.value)
        }
        Action::Relocate(d) => {
            vs.free_at = t + matrix.time(vs.loc, *d);
            vs.loc = *d;
            ("relocate", Some(*d), None, 0.0)
        }
        Action::Wait => {
            vs.free_at = t + 1;
            ("wait", None, None, 0.0)
        }
        Action::ServeScheduled(r) => {
            // Normally consumed by the due-commitment pass; kept for safety.
            vs.earnings += r.value;
            report.scheduled_value += r.value;
            vs.free_at = t + matrix.time(r.origin(), r.destination());
            vs.loc = r.destination();
            if r.kind == RequestKind::VirtualEnd {
                vs.retired = true;
            } else {
                vs.commit_ix += 1;
            }
            ("serve-scheduled", Some(r.destination()), Some(r.id), r.value)
        }
    };
    if trace {
        report.action_trace.push(ActionRecord {
            tick: t,
            vehicle: vs.vehicle.id,
            kind,
            target_region: target,
            request,
            value,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::TypeDemand;
    use crate::harness::synth::{synth_city, synth_demand, synth_fleet};
    use crate::world::RequestType;

    fn ts(t: u32) -> TimeStep {
        TimeStep::new(t)
    }
    fn rg(r: u32) -> RegionId {
        RegionId::new(r)
    }

    fn empty_model(horizon: u32, n: u32) -> DemandModel {
        DemandModel::new(horizon, n, BTreeMap::new()).unwrap()
    }

    fn config<'a>(
        matrix: &'a TravelTimeMatrix,
        demand: &'a DemandModel,
        fleet: Vec<Vehicle>,
        seed: u64,
    ) -> EpisodeConfig<'a> {
        EpisodeConfig {
            matrix,
            demand,
            fleet,
            kappa: 0.05,
            stage1: Stage1Algo::FirstFit,
            stage2: Stage2Algo::GreedyKm,
            order: OrderPolicyKind::Initial,
            seed,
            collect_traces: false,
        }
    }

    #[test]
    fn empty_world_yields_zero_report() {
        let matrix = TravelTimeMatrix::build(&[vec![0, 1], vec![1, 0]]).unwrap();
        let demand = empty_model(30, 2);
        let fleet = vec![Vehicle::new(1, (ts(1), rg(1)), (ts(30), rg(1)), &matrix).unwrap()];
        let report = run_two_stage(&config(&matrix, &demand, fleet, 7)).unwrap();
        assert_eq!(report.total_value, 0.0);
        assert_eq!(report.stage1_accepted, 0);
        assert_eq!(report.stage2_served, 0);
        assert_eq!(report.stage2_rejected, 0);
        assert_eq!(report.commitment_violations, 0);
    }

    #[test]
    fn scheduled_only_total_is_the_accepted_value() {
        // Demand exists for sampling the booking stream, but the realized
        // on-demand day is suppressed by sampling from a model whose CCDFs
        // are concentrated on the scheduled stream only... simplest honest
        // construction: run with kappa > 0 and a tiny model, then compare
        // against the recomputed stage-1 value.
        let (_, matrix) = synth_city(5, 3);
        let demand = synth_demand(&matrix, 60, 12.0, 3);
        let fleet = synth_fleet(&matrix, 3, 60, 3);
        let mut cfg = config(&matrix, &demand, fleet.clone(), 5);
        cfg.kappa = 0.2;
        let report = run_two_stage(&cfg).unwrap();
        let master = Rng::new(5);
        let mut sched_rng = master.stream("scheduled-sampling");
        let stream = sample_scheduled(&demand, 0.2, &mut sched_rng, 1);
        let summary = run_stage1(
            &matrix,
            &demand,
            &fleet,
            &stream,
            &Stage1Algo::FirstFit,
            5,
            false,
        );
        assert_eq!(report.stage1_accepted + report.stage1_rejected, stream.len());
        assert!((report.scheduled_value - summary.accepted_value).abs() < 1e-9);
        assert_eq!(report.commitment_violations, 0);
    }

    #[test]
    fn same_seed_same_report() {
        let (_, matrix) = synth_city(6, 9);
        let demand = synth_demand(&matrix, 80, 30.0, 9);
        let fleet = synth_fleet(&matrix, 4, 80, 9);
        for stage2 in [Stage2Algo::GreedyKm, Stage2Algo::DpdaSu] {
            let mut cfg = config(&matrix, &demand, fleet.clone(), 42);
            cfg.stage2 = stage2;
            cfg.stage1 = Stage1Algo::BestScore(ScoreVariant::Plain);
            let a = run_two_stage(&cfg).unwrap();
            let b = run_two_stage(&cfg).unwrap();
            assert_eq!(a.total_value, b.total_value);
            assert_eq!(a.per_vehicle_earnings, b.per_vehicle_earnings);
            assert_eq!(a.stage2_served, b.stage2_served);
        }
    }

    #[test]
    fn workload_is_algorithm_invariant() {
        // Changing the dispatcher must not change the sampled workload:
        // served + rejected is constant across algorithms.
        let (_, matrix) = synth_city(6, 13);
        let demand = synth_demand(&matrix, 80, 40.0, 13);
        let fleet = synth_fleet(&matrix, 4, 80, 13);
        let mut totals = Vec::new();
        for stage2 in [
            Stage2Algo::GreedyKm,
            Stage2Algo::EnhancedKm,
            Stage2Algo::DpdaSu,
            Stage2Algo::Lpa { gamma: 0.9 },
        ] {
            let mut cfg = config(&matrix, &demand, fleet.clone(), 21);
            cfg.stage2 = stage2;
            let report = run_two_stage(&cfg).unwrap();
            totals.push(report.stage2_served + report.stage2_rejected);
        }
        assert!(totals.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn all_dispatchers_serve_commitments() {
        let (_, matrix) = synth_city(6, 17);
        let demand = synth_demand(&matrix, 100, 50.0, 17);
        let fleet = synth_fleet(&matrix, 5, 100, 17);
        for stage1 in [
            Stage1Algo::FirstFit,
            Stage1Algo::BestScore(ScoreVariant::Plain),
            Stage1Algo::RandomBestScore {
                variant: ScoreVariant::AcceptExp,
                alpha: 1.0,
                beta: None,
            },
            Stage1Algo::Lpa { gamma: 0.9 },
        ] {
            for stage2 in [
                Stage2Algo::GreedyKm,
                Stage2Algo::EnhancedKm,
                Stage2Algo::DpdaSu,
                Stage2Algo::Lpa { gamma: 0.9 },
            ] {
                let mut cfg = config(&matrix, &demand, fleet.clone(), 33);
                cfg.kappa = 0.15;
                cfg.stage1 = stage1;
                cfg.stage2 = stage2;
                cfg.order = OrderPolicyKind::Reverse;
                let report = run_two_stage(&cfg).unwrap();
                assert_eq!(report.commitment_violations, 0);
                assert!(report.stage1_accepted > 0, "no commitments exercised");
            }
        }
    }

    #[test]
    fn traces_record_served_requests() {
        let m = TravelTimeMatrix::build(&[vec![0, 2], vec![2, 0]]).unwrap();
        let demand = DemandModel::new(
            20,
            2,
            [(
                RequestType::new(rg(1), rg(2), ts(3)),
                TypeDemand {
                    ccdf: vec![1.0],
                    value: 2.0,
                },
            )]
            .into(),
        )
        .unwrap();
        let fleet = vec![Vehicle::new(1, (ts(1), rg(1)), (ts(20), rg(1)), &m).unwrap()];
        let mut cfg = config(&m, &demand, fleet, 3);
        cfg.kappa = 0.0;
        cfg.stage2 = Stage2Algo::DpdaSu;
        cfg.collect_traces = true;
        let report = run_two_stage(&cfg).unwrap();
        assert_eq!(report.stage2_served, 1);
        assert!(report
            .action_trace
            .iter()
            .any(|a| a.kind == "serve" && a.value == 2.0));
        // The day ends with the virtual end being served on time.
        assert!(report
            .action_trace
            .iter()
            .any(|a| a.kind == "serve-scheduled" && a.tick == 20));
    }
}
