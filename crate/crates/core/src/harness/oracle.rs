//! Exact desk-scale oracles.
//!
//! `brute_force_mdp` evaluates the constrained dispatch problem by backward
//! induction over the complete state space — every time-location pair times
//! every subset realization of the requests visible there — with no
//! policy-structure shortcuts, so it is an independent check on the compact
//! value tables. `dpda_policy_value` scores the induced policy itself by
//! enumerating whole-day demand realizations. `offline_exhaustive` searches
//! all assignments of a small scheduled stream.

use super::HarnessError;
use crate::demand::DemandView;
use crate::stage2::{dpda_with_table, Stage2Error};
use crate::world::{
    Action, DispatchState, RegionId, Request, RequestType, TimeStep, TravelTimeMatrix, Vehicle,
};
use crate::cst::CstTable;

pub const BRUTE_FORCE_STATE_CAP: u64 = 10_000_000;

/// A randomly drawn desk-scale instance for oracle-equivalence checks: at
/// most three regions, a handful of Bernoulli demand types, and an anchor at
/// most six steps out.
pub struct TinyInstance {
    pub matrix: TravelTimeMatrix,
    pub demand: crate::demand::DemandModel,
    pub anchor: Request,
    pub start: (TimeStep, RegionId),
}

pub fn random_tiny_instance(rng: &mut crate::rng::Rng) -> TinyInstance {
    use crate::demand::{DemandModel, TypeDemand};
    let n = 2 + rng.next_below(2);
    let raw: Vec<Vec<i64>> = (0..n)
        .map(|u| {
            (0..n)
                .map(|v| if u == v { 0 } else { 1 + rng.next_below(3) as i64 })
                .collect()
        })
        .collect();
    let matrix = TravelTimeMatrix::build(&raw).unwrap();
    let anchor_o = RegionId::new(1 + rng.next_below(n) as u32);
    let span = 2 + rng.next_below(5) as u32;
    let mut types = Vec::new();
    for _ in 0..(1 + rng.next_below(3)) {
        let o = 1 + rng.next_below(n) as u32;
        let mut d = 1 + rng.next_below(n) as u32;
        if d == o {
            d = 1 + (o % n as u32);
        }
        if d == o {
            continue;
        }
        let t = 1 + rng.next_below(span as usize) as u32;
        types.push((
            RequestType::new(RegionId::new(o), RegionId::new(d), TimeStep::new(t)),
            TypeDemand {
                ccdf: vec![(1 + rng.next_below(9)) as f64 / 10.0],
                value: (1 + rng.next_below(12)) as f64,
            },
        ));
    }
    types.sort_by_key(|(ty, _)| *ty);
    types.dedup_by_key(|(ty, _)| *ty);
    let demand = DemandModel::new(span + 2, n as u32, types.into_iter().collect()).unwrap();
    let anchor = Request::virtual_end(900, (TimeStep::new(1 + span), anchor_o));
    let mut start = (TimeStep::new(1), anchor_o);
    for l in matrix.regions() {
        if matrix.time(l, anchor_o) <= span {
            start = (TimeStep::new(1), l);
            break;
        }
    }
    TinyInstance {
        matrix,
        demand,
        anchor,
        start,
    }
}

/// Expected optimal value collectible from `start` before the anchor's
/// pickup, by exhaustive backward induction.
pub fn brute_force_mdp(
    matrix: &TravelTimeMatrix,
    view: &dyn DemandView,
    anchor: &Request,
    start: (TimeStep, RegionId),
) -> Result<f64, HarnessError> {
    let n = matrix.n_regions();
    let anchor_t = anchor.start().get();
    let anchor_o = anchor.origin();
    let t0 = start.0.get();
    if t0 > anchor_t || matrix.time(start.1, anchor_o) > anchor_t - t0 {
        return Err(HarnessError::InvalidParams(format!(
            "start ({}, {}) cannot reach the anchor",
            start.0, start.1
        )));
    }

    // Cost guard: sum of 2^(types per cell) over the cone.
    let mut states: u64 = 0;
    for t in t0..=anchor_t {
        for l in matrix.regions() {
            if matrix.time(l, anchor_o) > anchor_t - t {
                continue;
            }
            let k = feasible_types(matrix, view, anchor, t, l).len() as u32;
            states = states.saturating_add(1u64 << k.min(62));
            if states > BRUTE_FORCE_STATE_CAP {
                return Err(HarnessError::InstanceTooLarge {
                    states,
                    cap: BRUTE_FORCE_STATE_CAP,
                });
            }
        }
    }

    // expected[(anchor_t - t) * n + l] = E over request realizations of the
    // optimal state value at (t, l).
    let rows = (anchor_t - t0 + 1) as usize;
    let mut expected = vec![f64::NAN; rows * n];
    let cell = |t: u32, l: usize| (anchor_t - t) as usize * n + l;
    for t in (t0..=anchor_t).rev() {
        for l_id in matrix.regions() {
            let l = l_id.index();
            let slack = anchor_t - t;
            if matrix.time(l_id, anchor_o) > slack {
                continue;
            }
            if t == anchor_t && l_id == anchor_o {
                expected[cell(t, l)] = 0.0;
                continue;
            }
            // Value of idling: best relocation or wait continuation.
            let mut idle_best = f64::NEG_INFINITY;
            for d in matrix.regions() {
                if d != l_id
                    && matrix.time(l_id, d) + matrix.time(d, anchor_o) <= slack
                {
                    idle_best = idle_best.max(expected[cell(t + matrix.time(l_id, d), d.index())]);
                }
            }
            if matrix.time(l_id, anchor_o) + 1 <= slack {
                idle_best = idle_best.max(expected[cell(t + 1, l)]);
            }
            debug_assert!(idle_best.is_finite(), "in-cone cell must have an action");

            let types = feasible_types(matrix, view, anchor, t, l_id);
            let k = types.len();
            let mut e = 0.0f64;
            for mask in 0..(1u32 << k) {
                let mut prob = 1.0f64;
                let mut best = idle_best;
                for (i, (dest, q, value)) in types.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        prob *= q;
                        let land = cell(t + matrix.time(l_id, *dest), dest.index());
                        best = best.max(value + expected[land]);
                    } else {
                        prob *= 1.0 - q;
                    }
                }
                e += prob * best;
            }
            expected[cell(t, l)] = e;
        }
    }
    Ok(expected[cell(t0, start.1.index())])
}

fn feasible_types(
    matrix: &TravelTimeMatrix,
    view: &dyn DemandView,
    anchor: &Request,
    t: u32,
    l: RegionId,
) -> Vec<(RegionId, f64, f64)> {
    let slack = anchor.start().get() - t;
    view.types_at(TimeStep::new(t), l)
        .iter()
        .filter_map(|ta| {
            let dest = RegionId::new(ta.dest as u32);
            if dest != l
                && ta.q1 > 0.0
                && matrix.time(l, dest) + matrix.time(dest, anchor.origin()) <= slack
            {
                Some((dest, ta.q1, ta.value))
            } else {
                None
            }
        })
        .collect()
}

/// All demand types with positive presence, in deterministic order.
fn all_types(view: &dyn DemandView, matrix: &TravelTimeMatrix) -> Vec<(RequestType, f64, f64)> {
    let mut out = Vec::new();
    for t in 1..=view.horizon() {
        for o in matrix.regions() {
            for ta in view.types_at(TimeStep::new(t), o) {
                if ta.q1 > 0.0 {
                    out.push((
                        RequestType::new(o, RegionId::new(ta.dest as u32), TimeStep::new(t)),
                        ta.q1,
                        ta.value,
                    ));
                }
            }
        }
    }
    out
}

/// Exact expected value of the policy the real-time dispatcher induces,
/// by enumerating every presence/absence realization of the demand types
/// (so the view must be Bernoulli per type) and rolling the policy forward.
pub fn dpda_policy_value(
    matrix: &TravelTimeMatrix,
    view: &dyn DemandView,
    anchor: &Request,
    start: (TimeStep, RegionId),
) -> Result<f64, HarnessError> {
    let types = all_types(view, matrix);
    if types.len() > 20 {
        return Err(HarnessError::InstanceTooLarge {
            states: 1u64 << types.len().min(62),
            cap: 1 << 20,
        });
    }
    let mut table = CstTable::build(matrix, view, anchor)?;
    let mut total = 0.0f64;
    for mask in 0..(1u64 << types.len()) {
        let mut prob = 1.0f64;
        for (i, (_, q, _)) in types.iter().enumerate() {
            prob *= if mask & (1 << i) != 0 { *q } else { 1.0 - *q };
        }
        if prob == 0.0 {
            continue;
        }
        let mut value = 0.0f64;
        let (mut t, mut l) = (start.0, start.1);
        loop {
            if t == anchor.start() && l == anchor.origin() {
                break;
            }
            let available: Vec<Request> = types
                .iter()
                .enumerate()
                .filter(|(i, (w, _, _))| {
                    mask & (1 << i) != 0
                        && w.origin == l
                        && w.start == t
                        && w.destination != l
                        && matrix.time(l, w.destination)
                            + matrix.time(w.destination, anchor.origin())
                            <= anchor.start().get() - t.get()
                })
                .map(|(i, (w, _, v))| Request::on_demand(i as u64, *w, *v))
                .collect();
            let state = DispatchState {
                time: t,
                location: l,
                available_requests: available,
            };
            let action = dpda_with_table(matrix, &state, anchor, view, &mut table)
                .map_err(|e| match e {
                    Stage2Error::Cst(c) => HarnessError::Cst(c),
                    other => HarnessError::Stage2(other),
                })?;
            value += action.immediate_value();
            if matches!(action, Action::ServeScheduled(_)) {
                break;
            }
            let (lt, ll) = action.landing(matrix, t, l);
            t = lt;
            l = ll;
        }
        total += prob * value;
    }
    Ok(total)
}

/// Optimal scheduled-only value by trying every request-to-vehicle
/// assignment and keeping the feasible maximum. Chains must respect strictly
/// increasing pickups plus the vehicle's start and end window.
pub fn offline_exhaustive(
    matrix: &TravelTimeMatrix,
    vehicles: &[Vehicle],
    requests: &[Request],
) -> Result<f64, HarnessError> {
    if requests.len() > 12 {
        return Err(HarnessError::InstanceTooLarge {
            states: (vehicles.len() as u64 + 1).pow(requests.len() as u32),
            cap: (vehicles.len() as u64 + 1).pow(12),
        });
    }
    let mut assignment = vec![usize::MAX; requests.len()];
    fn chain_feasible(matrix: &TravelTimeMatrix, v: &Vehicle, rs: &[&Request]) -> bool {
        let mut sorted: Vec<&Request> = rs.to_vec();
        sorted.sort_by_key(|r| (r.start(), r.id));
        let mut prev_dropoff = v.start;
        let mut prev_start: Option<TimeStep> = None;
        for r in sorted {
            if prev_start == Some(r.start()) {
                return false;
            }
            if prev_dropoff.0.get() + matrix.time(prev_dropoff.1, r.origin()) > r.start().get() {
                return false;
            }
            prev_start = Some(r.start());
            prev_dropoff = r.dropoff(matrix);
        }
        prev_dropoff.0.get() + matrix.time(prev_dropoff.1, v.end.1) <= v.end.0.get()
    }
    fn search(
        matrix: &TravelTimeMatrix,
        vehicles: &[Vehicle],
        requests: &[Request],
        assignment: &mut Vec<usize>,
        i: usize,
    ) -> f64 {
        if i == requests.len() {
            let mut total = 0.0;
            for (vi, v) in vehicles.iter().enumerate() {
                let chosen: Vec<&Request> = requests
                    .iter()
                    .enumerate()
                    .filter(|(ri, _)| assignment[*ri] == vi)
                    .map(|(_, r)| r)
                    .collect();
                if !chain_feasible(matrix, v, &chosen) {
                    return f64::NEG_INFINITY;
                }
                total += chosen.iter().map(|r| r.value).sum::<f64>();
            }
            return total;
        }
        let mut best = f64::NEG_INFINITY;
        for choice in std::iter::once(usize::MAX).chain(0..vehicles.len()) {
            assignment[i] = choice;
            best = best.max(search(matrix, vehicles, requests, assignment, i + 1));
        }
        assignment[i] = usize::MAX;
        best
    }
    Ok(search(matrix, vehicles, requests, &mut assignment, 0).max(0.0))
}
