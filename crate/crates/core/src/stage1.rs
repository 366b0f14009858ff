//! Online admission of scheduled requests.
//!
//! Every algorithm sees the arrival stream one request at a time and must
//! accept (binding the request to a vehicle's schedule book) or reject before
//! the next arrival. FirstFit takes the first vehicle that fits. BestScore
//! ranks vehicles by the expected-value increment of the insertion, estimated
//! from the constrained value tables around the insertion slot.
//! RandomBestScore perturbs that ranking with a per-episode exponential
//! priority.

use crate::cst::CstCache;
use crate::demand::DemandView;
use crate::rng::Rng;
use crate::world::{InsertSlot, Request, ScheduleBook, TravelTimeMatrix, VehicleId};
use std::collections::BTreeMap;

/// Outcome of one admission decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept(VehicleId),
    Reject,
}

/// How a score-based algorithm treats a non-positive best increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreVariant {
    /// Accept the best feasible vehicle even at a negative increment.
    Plain,
    /// Reject when the best increment is non-positive.
    RejectNonPositive,
    /// When the best increment is non-positive, accept with probability
    /// `exp(delta)`.
    AcceptExp,
}

/// Expected-value increment of inserting a request into one vehicle's book.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementScore {
    pub vehicle: VehicleId,
    pub slot: InsertSlot,
    /// Estimated value of the vehicle without taking the request: the value
    /// collectible between the predecessor's drop-off and the successor.
    pub e0: f64,
    /// Estimated value after taking it: roaming into the request, its own
    /// value, and roaming from its drop-off to the successor.
    pub e1: f64,
    pub delta: f64,
}

/// Assign to the first vehicle, in fixed order, whose book admits the
/// request; mutates that book.
pub fn first_fit(matrix: &TravelTimeMatrix, r: &Request, books: &mut [ScheduleBook]) -> Decision {
    for book in books.iter_mut() {
        if let Some(slot) = book.find_insert_slot(r, matrix) {
            let vehicle = book.vehicle.id;
            book.insert(*r, &slot);
            return Decision::Accept(vehicle);
        }
    }
    Decision::Reject
}

/// Score one vehicle for one request, or `None` when the book has no
/// feasible slot. Both estimates read the same demand view; the chain
/// inequalities of the slot guarantee every queried pair lies inside the
/// corresponding anchor's feasibility cone.
pub fn score_increment(
    matrix: &TravelTimeMatrix,
    r: &Request,
    book: &ScheduleBook,
    view: &dyn DemandView,
    cache: &mut CstCache,
) -> Option<IncrementScore> {
    let slot = book.find_insert_slot(r, matrix)?;
    let (pre_t, pre_l) = slot.predecessor_dropoff;
    let e0 = cache
        .value(matrix, view, &slot.successor, pre_t, pre_l)
        .expect("slot chain guarantees the predecessor drop-off is in the successor cone");
    let before = cache
        .value(matrix, view, r, pre_t, pre_l)
        .expect("slot chain guarantees the predecessor drop-off is in the request cone");
    let (drop_t, drop_l) = r.dropoff(matrix);
    let after = cache
        .value(matrix, view, &slot.successor, drop_t, drop_l)
        .expect("slot chain guarantees the request drop-off is in the successor cone");
    let e1 = before + r.value + after;
    Some(IncrementScore {
        vehicle: book.vehicle.id,
        slot,
        e0,
        e1,
        delta: e1 - e0,
    })
}

fn apply_accept(books: &mut [ScheduleBook], r: &Request, score: &IncrementScore) -> Decision {
    let book = books
        .iter_mut()
        .find(|b| b.vehicle.id == score.vehicle)
        .expect("scored vehicle exists");
    book.insert(*r, &score.slot);
    Decision::Accept(score.vehicle)
}

/// Accept into the vehicle with the highest increment. Rejects only when no
/// vehicle is feasible (Plain) or per the variant's non-positive rule.
/// Returns the chosen increment alongside the decision.
pub fn best_score_traced(
    matrix: &TravelTimeMatrix,
    r: &Request,
    books: &mut [ScheduleBook],
    view: &dyn DemandView,
    variant: ScoreVariant,
    cache: &mut CstCache,
    rng: &mut Rng,
) -> (Decision, Option<f64>) {
    let mut best: Option<IncrementScore> = None;
    for book in books.iter() {
        if let Some(score) = score_increment(matrix, r, book, view, cache) {
            let better = match &best {
                None => true,
                Some(b) => {
                    score.delta > b.delta || (score.delta == b.delta && score.vehicle < b.vehicle)
                }
            };
            if better {
                best = Some(score);
            }
        }
    }
    let Some(score) = best else {
        return (Decision::Reject, None);
    };
    let delta = score.delta;
    let accept = gate(variant, delta, delta, rng);
    if accept {
        (apply_accept(books, r, &score), Some(delta))
    } else {
        (Decision::Reject, Some(delta))
    }
}

pub fn best_score(
    matrix: &TravelTimeMatrix,
    r: &Request,
    books: &mut [ScheduleBook],
    view: &dyn DemandView,
    variant: ScoreVariant,
    cache: &mut CstCache,
    rng: &mut Rng,
) -> Decision {
    best_score_traced(matrix, r, books, view, variant, cache, rng).0
}

/// The non-positive-increment gate shared by the scored algorithms. The sign
/// test always uses the unrandomized best increment; the acceptance
/// probability uses the chosen vehicle's own increment.
fn gate(variant: ScoreVariant, max_delta: f64, chosen_delta: f64, rng: &mut Rng) -> bool {
    match variant {
        ScoreVariant::Plain => true,
        ScoreVariant::RejectNonPositive => max_delta > 0.0,
        ScoreVariant::AcceptExp => {
            if max_delta > 0.0 {
                true
            } else {
                rng.next_f64() < chosen_delta.exp().min(1.0)
            }
        }
    }
}

/// Per-episode randomized priorities: each vehicle draws `k ~ U[0,1]` once
/// and keeps the additive bonus `beta * exp(alpha * k)` for the whole
/// arrival stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RankWeights {
    pub alpha: f64,
    pub beta: f64,
    k: BTreeMap<VehicleId, f64>,
}

impl RankWeights {
    pub fn draw(vehicles: &[VehicleId], alpha: f64, beta: f64, rng: &mut Rng) -> Self {
        let k = vehicles.iter().map(|v| (*v, rng.next_f64())).collect();
        RankWeights { alpha, beta, k }
    }

    /// Fixed weights, for tests.
    pub fn with_k(alpha: f64, beta: f64, k: BTreeMap<VehicleId, f64>) -> Self {
        RankWeights { alpha, beta, k }
    }

    pub fn k(&self, vehicle: VehicleId) -> f64 {
        self.k.get(&vehicle).copied().unwrap_or(0.0)
    }

    pub fn priority(&self, vehicle: VehicleId) -> f64 {
        self.beta * (self.alpha * self.k(vehicle)).exp()
    }

    pub fn delta_prime(&self, vehicle: VehicleId, delta: f64) -> f64 {
        delta + self.priority(vehicle)
    }
}

/// BestScore with the vehicle ranking perturbed by the episode priorities:
/// argmax of `delta + beta * exp(alpha * k)`. The non-positive gate of the
/// R/A variants still tests the unrandomized best increment.
pub fn random_best_score_traced(
    matrix: &TravelTimeMatrix,
    r: &Request,
    books: &mut [ScheduleBook],
    view: &dyn DemandView,
    weights: &RankWeights,
    variant: ScoreVariant,
    cache: &mut CstCache,
    rng: &mut Rng,
) -> (Decision, Option<f64>, Option<f64>) {
    let mut best: Option<(IncrementScore, f64)> = None;
    let mut max_delta = f64::NEG_INFINITY;
    for book in books.iter() {
        if let Some(score) = score_increment(matrix, r, book, view, cache) {
            max_delta = max_delta.max(score.delta);
            let dp = weights.delta_prime(score.vehicle, score.delta);
            let better = match &best {
                None => true,
                Some((b, bdp)) => dp > *bdp || (dp == *bdp && score.vehicle < b.vehicle),
            };
            if better {
                best = Some((score, dp));
            }
        }
    }
    let Some((score, dp)) = best else {
        return (Decision::Reject, None, None);
    };
    let delta = score.delta;
    let accept = gate(variant, max_delta, delta, rng);
    if accept {
        (apply_accept(books, r, &score), Some(delta), Some(dp))
    } else {
        (Decision::Reject, Some(delta), Some(dp))
    }
}

pub fn random_best_score(
    matrix: &TravelTimeMatrix,
    r: &Request,
    books: &mut [ScheduleBook],
    view: &dyn DemandView,
    weights: &RankWeights,
    variant: ScoreVariant,
    cache: &mut CstCache,
    rng: &mut Rng,
) -> Decision {
    random_best_score_traced(matrix, r, books, view, weights, variant, cache, rng).0
}
