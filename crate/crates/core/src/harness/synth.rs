//! Synthetic city, demand, and fleet generators.
//!
//! Stand-ins for proprietary trip logs: a clustered set of region centers, a
//! demand model with rush-hour peaks and popularity-weighted corridors, and
//! fleets parked across the map. Everything is deterministic in the seed.

use super::ratio::ScheduledInstance;
use crate::demand::{matrix_from_centers, sample_scheduled, DemandModel, RegionMap, TypeDemand};
use crate::rng::Rng;
use crate::world::{RegionId, Request, RequestType, TimeStep, TravelTimeMatrix, Vehicle};
use std::collections::BTreeMap;

/// Knobs for a full synthetic world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthScale {
    pub n_regions: usize,
    pub horizon: u32,
    pub vehicles: usize,
    /// Expected on-demand requests per day.
    pub target_daily: f64,
    /// Scheduled-to-on-demand volume ratio.
    pub kappa: f64,
}

impl SynthScale {
    /// Full-day city scale: 21 regions, minute steps, 50 vehicles, about
    /// 1800 on-demand requests and a twentieth as many scheduled ones.
    pub fn full() -> Self {
        SynthScale {
            n_regions: 21,
            horizon: 1440,
            vehicles: 50,
            target_daily: 1800.0,
            kappa: 1.0 / 20.0,
        }
    }

    /// Desk-scale variant for quick tests.
    pub fn small() -> Self {
        SynthScale {
            n_regions: 6,
            horizon: 120,
            vehicles: 6,
            target_daily: 80.0,
            kappa: 0.1,
        }
    }
}

/// Clustered region centers plus their metric travel-time matrix
/// (minute steps at urban speed).
pub fn synth_city(n_regions: usize, seed: u64) -> (Vec<(f64, f64)>, TravelTimeMatrix) {
    let mut rng = Rng::new(seed).stream("city");
    // Three urban cores inside roughly a nine-kilometre box.
    let cores = [(0.015, 0.02), (0.05, 0.055), (0.075, 0.025)];
    let mut centers = Vec::with_capacity(n_regions);
    for i in 0..n_regions {
        let core = cores[i % cores.len()];
        let jitter = 0.012 + 0.018 * rng.next_f64();
        let angle = rng.next_f64() * std::f64::consts::TAU;
        centers.push((
            core.0 + jitter * angle.sin(),
            core.1 + jitter * angle.cos(),
        ));
    }
    let map = RegionMap { centers: centers.clone() };
    let matrix = matrix_from_centers(&map, 60, 30.0).expect("synthetic centers are valid");
    (centers, matrix)
}

/// Rush-hour intensity profile over the day, in [0.15, 1].
fn time_profile(t: u32, horizon: u32) -> f64 {
    let x = t as f64 / horizon as f64;
    let peak = |center: f64, width: f64| (-((x - center) / width).powi(2)).exp();
    0.15 + 0.85 * (peak(0.33, 0.08) + peak(0.75, 0.1)).min(1.0)
}

/// Demand model with popularity-weighted corridors and rush-hour peaks,
/// scaled until the expected daily volume reaches `target_daily`. Values are
/// proportional to trip duration (unit constant).
pub fn synth_demand(
    matrix: &TravelTimeMatrix,
    horizon: u32,
    target_daily: f64,
    seed: u64,
) -> DemandModel {
    let mut rng = Rng::new(seed).stream("demand");
    let n = matrix.n_regions();
    let popularity: Vec<f64> = (0..n).map(|_| 0.2 + rng.next_f64()).collect();
    let mut types: BTreeMap<RequestType, TypeDemand> = BTreeMap::new();
    let mut expected = 0.0f64;
    let mut guard = 0usize;
    while expected < target_daily && guard < 2_000_000 {
        guard += 1;
        let o = pick_weighted(&popularity, &mut rng);
        let mut weights: Vec<f64> = (0..n)
            .map(|d| {
                if d == o {
                    0.0
                } else {
                    popularity[d] / (1.0 + matrix.time_idx(o, d) as f64).sqrt()
                }
            })
            .collect();
        let d = pick_weighted(&weights, &mut rng);
        weights.clear();
        let t = 1 + rng.next_below(horizon as usize) as u32;
        if rng.next_f64() > time_profile(t, horizon) {
            continue;
        }
        let w = RequestType::new(
            RegionId::new(o as u32 + 1),
            RegionId::new(d as u32 + 1),
            TimeStep::new(t),
        );
        if types.contains_key(&w) {
            continue;
        }
        let q1 = 0.3 + 0.6 * rng.next_f64();
        let mut ccdf = vec![q1];
        if rng.next_f64() < 0.2 {
            ccdf.push(q1 * (0.2 + 0.3 * rng.next_f64()));
        }
        expected += ccdf.iter().sum::<f64>();
        let value = matrix.time_idx(o, d) as f64;
        types.insert(w, TypeDemand { ccdf, value });
    }
    DemandModel::new(horizon, n as u32, types).expect("generated model is valid")
}

fn pick_weighted(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.next_f64() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= *w;
    }
    weights.len() - 1
}

/// Vehicles parked at random regions, in service for the whole day and
/// required to end where they started.
pub fn synth_fleet(
    matrix: &TravelTimeMatrix,
    n_vehicles: usize,
    horizon: u32,
    seed: u64,
) -> Vec<Vehicle> {
    let mut rng = Rng::new(seed).stream("fleet");
    (0..n_vehicles)
        .map(|i| {
            let home = RegionId::new(1 + rng.next_below(matrix.n_regions()) as u32);
            Vehicle::new(
                i as u32 + 1,
                (TimeStep::new(1), home),
                (TimeStep::new(horizon), home),
                matrix,
            )
            .expect("full-day window is always feasible")
        })
        .collect()
}

/// A scheduled-only instance following the ratio-experiment protocol: a small
/// synthetic city, a fleet with staggered service windows, and an arrival
/// stream drawn i.i.d. from the demand model (which the scored algorithms
/// also use for their estimates). Window heterogeneity is what separates the
/// admission algorithms: spending a scarce long-window vehicle on an early
/// ride is exactly the mistake a first-fit scan keeps making.
pub fn synth_scheduled_instance(seed: u64, n_requests: usize) -> ScheduledInstance {
    let master = Rng::new(seed);
    let (_, matrix) = synth_city(8, master.stream("city-seed").next_u64());
    let horizon = 240u32;
    let demand = synth_demand(
        &matrix,
        horizon,
        120.0,
        master.stream("demand-seed").next_u64(),
    );
    let mut frng = master.stream("fleet-seed");
    let vehicles: Vec<Vehicle> = (0..8)
        .map(|i| {
            let home = RegionId::new(1 + frng.next_below(matrix.n_regions()) as u32);
            // Half the fleet works the whole day; the rest cover shifts.
            let (start, end) = match i % 4 {
                0 | 1 => (1, horizon),
                2 => (1, horizon / 2 + frng.next_below(20) as u32),
                _ => (horizon / 3 + frng.next_below(20) as u32, horizon),
            };
            Vehicle::new(
                i as u32 + 1,
                (TimeStep::new(start), home),
                (TimeStep::new(end), home),
                &matrix,
            )
            .expect("shift windows are feasible")
        })
        .collect();
    let mut srng = master.stream("scheduled");
    let kappa = n_requests as f64 / demand.expected_daily();
    let stream = sample_scheduled(&demand, kappa, &mut srng, 1);
    ScheduledInstance {
        matrix,
        vehicles,
        stream,
        scoring_model: demand,
    }
}

/// A scheduled-only instance for the admission bound check: values equal trip
/// lengths and the shortest inter-region hop is one step, so the worst-case
/// value ratio is just the longest travel time. Pickup times keep a
/// longest-hop margin from both window edges, so every request is reachable
/// by every vehicle on both sides and capacity conflicts come only from
/// accepted commitments.
pub fn synth_bound_instance(seed: u64) -> ScheduledInstance {
    let mut rng = Rng::new(seed).stream("bound-instance");
    let n = 3 + rng.next_below(3);
    let mut raw: Vec<Vec<i64>> = (0..n)
        .map(|u| {
            (0..n)
                .map(|v| if u == v { 0 } else { 1 + rng.next_below(5) as i64 })
                .collect()
        })
        .collect();
    // Pin the smallest possible value to one step.
    raw[0][1] = 1;
    raw[1][0] = 1;
    let matrix = TravelTimeMatrix::build(&raw).unwrap();
    let reach = matrix.max_entry();
    let horizon = 8 * reach + 20 + rng.next_below(40) as u32;
    let n_vehicles = 1 + rng.next_below(3);
    let vehicles: Vec<Vehicle> = (0..n_vehicles)
        .map(|i| {
            let home = RegionId::new(1 + rng.next_below(n) as u32);
            Vehicle::new(
                i as u32 + 1,
                (TimeStep::new(1), home),
                (TimeStep::new(horizon), home),
                &matrix,
            )
            .unwrap()
        })
        .collect();
    let n_requests = 8 + rng.next_below(13);
    let mut stream = Vec::with_capacity(n_requests);
    for j in 0..n_requests {
        let o = 1 + rng.next_below(n) as u32;
        let mut d = 1 + rng.next_below(n) as u32;
        if d == o {
            d = 1 + (o % n as u32);
        }
        let len = matrix.time(RegionId::new(o), RegionId::new(d));
        let earliest = 1 + reach;
        let latest = horizon - len - reach;
        let t = earliest + rng.next_below((latest - earliest + 1) as usize) as u32;
        stream.push(Request::scheduled(
            j as u64 + 1,
            RequestType::new(RegionId::new(o), RegionId::new(d), TimeStep::new(t)),
            len as f64,
        ));
    }
    let scoring_model = DemandModel::new(horizon, n as u32, BTreeMap::new()).unwrap();
    ScheduledInstance {
        matrix,
        vehicles,
        stream,
        scoring_model,
    }
}
