//! Real-time dispatch.
//!
//! `dpda` makes the optimal single-vehicle decision: among the admissible
//! actions, take the one maximizing immediate value plus the constrained
//! expected value at the landing pair. `dpda_su` extends it to a fleet by
//! dispatching vehicles one at a time while evolving a virtual demand
//! distribution, so each vehicle plans against the demand its predecessors
//! are expected to leave behind.

use crate::cst::{serve_probabilities, CstError, CstTable, ServeProbabilities};
use crate::demand::{DemandModel, DemandView, FlatDemand, TypeAt};
use crate::rng::Rng;
use crate::world::{
    reachable_destinations, wait_admissible, Action, DispatchState, RegionId, Request,
    RequestKind, RequestType, TimeStep, TravelTimeMatrix, Vehicle, VehicleId,
};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Stage2Error {
    #[error("vehicle at ({time}, {location}) can no longer reach its committed pickup")]
    AnchorUnreachable { time: u32, location: u32 },
    #[error("serve probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("no earnings ledger entry for vehicle {0}")]
    MissingLedgerEntry(VehicleId),
    #[error(transparent)]
    Cst(#[from] CstError),
}

/// Virtual demand distribution: a copy of the estimated CCDF tables that the
/// sequential dispatcher thins out as vehicles are assigned. Stored as flat
/// arrays cloned wholesale from the model's template, since the dispatcher
/// rebuilds one of these every tick.
#[derive(Debug, Clone)]
pub struct VirtualDemand {
    horizon: u32,
    n_regions: u32,
    flat: FlatDemand,
    /// Live CCDF length per entry; thinning only ever truncates.
    ccdf_len: Vec<u32>,
    has_positive: bool,
    stamp: u64,
}

impl VirtualDemand {
    /// Copy the model's distribution as the initial virtual demand.
    pub fn from_model(model: &DemandModel) -> Self {
        let flat = model.flat().clone();
        let ccdf_len = (0..flat.cell_entries.len())
            .map(|i| flat.ccdf_offsets[i + 1] - flat.ccdf_offsets[i])
            .collect();
        VirtualDemand {
            horizon: model.horizon(),
            n_regions: model.n_regions(),
            flat,
            ccdf_len,
            has_positive: model.has_positive_value_demand(),
            stamp: crate::demand::fresh_stamp(),
        }
    }

    fn entry_index(&self, w: &RequestType) -> Option<usize> {
        if w.start.get() > self.horizon || w.origin.get() > self.n_regions {
            return None;
        }
        let cell = self.cell_index(w.start, w.origin);
        let lo = self.flat.cell_offsets[cell] as usize;
        let hi = self.flat.cell_offsets[cell + 1] as usize;
        (lo..hi).find(|&i| self.flat.cell_entries[i].dest as u32 == w.destination.get())
    }

    pub fn ccdf(&self, w: &RequestType) -> &[f64] {
        match self.entry_index(w) {
            Some(i) => {
                let lo = self.flat.ccdf_offsets[i] as usize;
                &self.flat.ccdf_values[lo..lo + self.ccdf_len[i] as usize]
            }
            None => &[],
        }
    }

    /// Thin the distribution by one vehicle's serve probabilities:
    /// `h'(X >= i) = (1 - p) h(X >= i) + p h(X >= i + 1)` for every level i.
    /// Only truncation of trailing zeros renormalizes the result.
    pub fn apply(&mut self, probs: &ServeProbabilities) -> Result<(), Stage2Error> {
        let mut touched = false;
        for (w, &p) in probs.iter() {
            // Tolerate sub-nanoscale rounding outside [0, 1]; anything larger
            // is a genuinely invalid probability.
            if !(-1e-9..=1.0 + 1e-9).contains(&p) {
                return Err(Stage2Error::InvalidProbability(p));
            }
            let p = p.clamp(0.0, 1.0);
            if p == 0.0 {
                continue;
            }
            let Some(idx) = self.entry_index(w) else {
                continue;
            };
            let lo = self.flat.ccdf_offsets[idx] as usize;
            let len = self.ccdf_len[idx] as usize;
            let list = &mut self.flat.ccdf_values[lo..lo + len];
            for i in 0..len {
                let next = if i + 1 < len { list[i + 1] } else { 0.0 };
                let mut updated = ((1.0 - p) * list[i] + p * next).clamp(0.0, 1.0);
                if i > 0 && updated > list[i - 1] {
                    updated = list[i - 1]; // enforce monotonicity against fp dust
                }
                list[i] = updated;
            }
            let mut live = len;
            while live > 0 && list[live - 1] == 0.0 {
                live -= 1;
            }
            self.ccdf_len[idx] = live as u32;
            self.flat.cell_entries[idx].q1 = if live > 0 { list[0] } else { 0.0 };
            touched = true;
        }
        if touched {
            self.stamp = crate::demand::fresh_stamp();
            debug_assert!(self.check_validity().is_ok());
        }
        Ok(())
    }

    /// Entry-wise CCDF validity: in [0, 1] and nonincreasing.
    pub fn check_validity(&self) -> Result<(), String> {
        for i in 0..self.flat.cell_entries.len() {
            let lo = self.flat.ccdf_offsets[i] as usize;
            let list = &self.flat.ccdf_values[lo..lo + self.ccdf_len[i] as usize];
            let mut prev = 1.0f64;
            for &p in list {
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("{:?}: entry {p} outside [0,1]", self.flat.types[i]));
                }
                if p > prev {
                    return Err(format!("{:?}: not nonincreasing", self.flat.types[i]));
                }
                prev = p;
            }
        }
        Ok(())
    }

    #[inline]
    fn cell_index(&self, t: TimeStep, origin: RegionId) -> usize {
        (t.get() as usize - 1) * self.n_regions as usize + origin.index()
    }
}

impl DemandView for VirtualDemand {
    fn horizon(&self) -> u32 {
        self.horizon
    }
    fn n_regions(&self) -> u32 {
        self.n_regions
    }
    fn presence(&self, w: &RequestType) -> f64 {
        self.entry_index(w)
            .map_or(0.0, |i| self.flat.cell_entries[i].q1)
    }
    fn type_value(&self, w: &RequestType) -> f64 {
        self.entry_index(w)
            .map_or(0.0, |i| self.flat.cell_entries[i].value)
    }
    fn types_at(&self, t: TimeStep, origin: RegionId) -> &[TypeAt] {
        let i = self.cell_index(t, origin);
        &self.flat.cell_entries
            [self.flat.cell_offsets[i] as usize..self.flat.cell_offsets[i + 1] as usize]
    }
    fn has_positive_value_demand(&self) -> bool {
        // Conservative: thinning can zero types out, but a stale true only
        // costs compute, never correctness.
        self.has_positive
    }
    fn stamp(&self) -> u64 {
        self.stamp
    }
}

/// Pure form of the virtual-demand update.
pub fn update_prob_dist(
    h: &VirtualDemand,
    probs: &ServeProbabilities,
) -> Result<VirtualDemand, Stage2Error> {
    let mut next = h.clone();
    next.apply(probs)?;
    Ok(next)
}

/// How the dispatcher orders vehicles within a tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderPolicy {
    /// Fixed registration order.
    Initial,
    /// Ascending accumulated earnings (poorest vehicle first), ties by id.
    Reverse,
    /// Seeded shuffle.
    Random(u64),
}

/// Order a fleet for sequential dispatch under the given policy.
pub fn order_vehicles(
    fleet: &[Vehicle],
    policy: OrderPolicy,
    earnings: &BTreeMap<VehicleId, f64>,
) -> Result<Vec<VehicleId>, Stage2Error> {
    let mut ids: Vec<VehicleId> = fleet.iter().map(|v| v.id).collect();
    match policy {
        OrderPolicy::Initial => {}
        OrderPolicy::Reverse => {
            for id in &ids {
                if !earnings.contains_key(id) {
                    return Err(Stage2Error::MissingLedgerEntry(*id));
                }
            }
            ids.sort_by(|a, b| {
                earnings[a]
                    .partial_cmp(&earnings[b])
                    .unwrap()
                    .then(a.cmp(b))
            });
        }
        OrderPolicy::Random(seed) => {
            let mut rng = Rng::new(seed).stream("vehicle-shuffle");
            rng.shuffle(&mut ids);
        }
    }
    Ok(ids)
}

/// The optimal single-vehicle decision at `state` for a vehicle committed to
/// `anchor`. When the commitment is due here and now the only admissible
/// action is to serve it; otherwise all of serve / relocate / wait compete on
/// immediate value plus landing-cell expected value. Ties prefer serving over
/// relocating over waiting, then the lowest request or region id.
pub fn dpda(
    matrix: &TravelTimeMatrix,
    state: &DispatchState,
    anchor: &Request,
    view: &dyn DemandView,
) -> Result<Action, Stage2Error> {
    let mut table = CstTable::build(matrix, view, anchor)?;
    dpda_with_table(matrix, state, anchor, view, &mut table)
}

/// Rank for tie-breaking between action classes.
fn action_class(a: &Action) -> u8 {
    match a {
        Action::Serve(_) => 0,
        Action::Relocate(_) => 1,
        Action::Wait => 2,
        Action::ServeScheduled(_) => 3,
    }
}

fn action_tie_id(a: &Action) -> u64 {
    match a {
        Action::Serve(r) | Action::ServeScheduled(r) => r.id.0,
        Action::Relocate(d) => d.get() as u64,
        Action::Wait => 0,
    }
}

pub fn dpda_with_table(
    matrix: &TravelTimeMatrix,
    state: &DispatchState,
    anchor: &Request,
    view: &dyn DemandView,
    table: &mut CstTable,
) -> Result<Action, Stage2Error> {
    let (t, l) = (state.time, state.location);
    if t > anchor.start() || matrix.time(l, anchor.origin()) > anchor.start().get() - t.get() {
        return Err(Stage2Error::AnchorUnreachable {
            time: t.get(),
            location: l.get(),
        });
    }
    if t == anchor.start() && l == anchor.origin() {
        return Ok(Action::ServeScheduled(*anchor));
    }
    let mut candidates: Vec<Action> = Vec::new();
    for r in &state.available_requests {
        debug_assert_eq!(r.origin(), l);
        debug_assert_eq!(r.start(), t);
        candidates.push(Action::Serve(*r));
    }
    for d in reachable_destinations(matrix, t, l, anchor).map_err(|_| {
        Stage2Error::AnchorUnreachable {
            time: t.get(),
            location: l.get(),
        }
    })? {
        candidates.push(Action::Relocate(d));
    }
    if wait_admissible(matrix, t, l, anchor) {
        candidates.push(Action::Wait);
    }
    let mut best: Option<(f64, u8, u64, Action)> = None;
    for a in candidates {
        let (land_t, land_l) = a.landing(matrix, t, l);
        let cont = table.value(view, land_t, land_l)?;
        let score = a.immediate_value() + cont;
        let class = action_class(&a);
        let tie = action_tie_id(&a);
        let better = match &best {
            None => true,
            Some((bs, bc, bi, _)) => {
                score > *bs || (score == *bs && (class < *bc || (class == *bc && tie < *bi)))
            }
        };
        if better {
            best = Some((score, class, tie, a));
        }
    }
    best.map(|(_, _, _, a)| a)
        .ok_or(Stage2Error::AnchorUnreachable {
            time: t.get(),
            location: l.get(),
        })
}

/// One fleet vehicle's inputs for a sequential-dispatch tick.
#[derive(Debug, Clone)]
pub struct FleetVehicle {
    pub vehicle: Vehicle,
    pub time: TimeStep,
    pub location: RegionId,
    /// Next committed pickup (the virtual end when no real one remains).
    pub anchor: Request,
    /// The commitment after `anchor`, used to keep thinning the demand when
    /// the anchor itself is served this tick.
    pub following: Option<Request>,
}

/// Sequential multi-vehicle dispatch: order the fleet, then for each vehicle
/// build a fresh value table under the current virtual demand, decide via
/// [`dpda_with_table`], withdraw a served request from the shared pool, and
/// thin the virtual demand by the vehicle's serve probabilities before the
/// next vehicle plans.
pub fn dpda_su(
    matrix: &TravelTimeMatrix,
    fleet: &[FleetVehicle],
    demand: &DemandModel,
    policy: OrderPolicy,
    pool: &mut Vec<Request>,
    earnings: &BTreeMap<VehicleId, f64>,
) -> Result<BTreeMap<VehicleId, Action>, Stage2Error> {
    let vehicles: Vec<Vehicle> = fleet.iter().map(|f| f.vehicle).collect();
    let order = order_vehicles(&vehicles, policy, earnings)?;
    let by_id: HashMap<VehicleId, &FleetVehicle> =
        fleet.iter().map(|f| (f.vehicle.id, f)).collect();
    let mut h = VirtualDemand::from_model(demand);
    let mut actions = BTreeMap::new();
    for id in order {
        let fv = by_id[&id];
        let available: Vec<Request> = pool
            .iter()
            .filter(|r| {
                r.origin() == fv.location
                    && r.start() == fv.time
                    && r.destination() != fv.location
                    && matrix.time(fv.location, r.destination())
                        + matrix.time(r.destination(), fv.anchor.origin())
                        <= fv.anchor.start().get() - fv.time.get()
            })
            .copied()
            .collect();
        let state = DispatchState {
            time: fv.time,
            location: fv.location,
            available_requests: available,
        };
        let mut table = CstTable::build(matrix, &h, &fv.anchor)?;
        let action = dpda_with_table(matrix, &state, &fv.anchor, &h, &mut table)?;
        if let Action::Serve(r) = &action {
            pool.retain(|p| p.id != r.id);
        }
        let landing = action.landing(matrix, fv.time, fv.location);
        // Thin the virtual demand by what this vehicle is expected to absorb
        // from its landing point on. Serving the anchor moves the vehicle past
        // it, so the projection continues under the following commitment.
        let probs = match &action {
            Action::ServeScheduled(r) => {
                if r.kind == RequestKind::VirtualEnd {
                    None // end of service: nothing further to absorb
                } else if let Some(next_anchor) = &fv.following {
                    let mut next_table = CstTable::build(matrix, &h, next_anchor)?;
                    Some(serve_probabilities(&mut next_table, &h, landing)?)
                } else {
                    None
                }
            }
            _ => Some(serve_probabilities(&mut table, &h, landing)?),
        };
        if let Some(p) = probs {
            h.apply(&p)?;
        }
        actions.insert(id, action);
    }
    Ok(actions)
}
