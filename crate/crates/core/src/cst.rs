//! Constrained spatio-temporal value table.
//!
//! `CstTable` memoizes, for one anchor commitment, the expected value a lone
//! vehicle can collect from `(t, l)` before it must arrive at the anchor's
//! pickup, under the optimal single-vehicle policy. Each cell also records
//! the policy structure: the ranked list of request destinations worth
//! serving and the idle target `d*`, which is what the serve-probability
//! propagation walks.
//!
//! Cells live on the feasibility cone `{(t, l) : delta(l, o_anchor) <=
//! t_anchor - t}`. Rows are filled lazily from the anchor time downward, so a
//! query at `(t, l)` materializes exactly the rows `t..=t_anchor`. Every move
//! strictly advances time (waiting costs one step), which makes a plain
//! backward row sweep sufficient — no recursion, no call-depth concerns.

use crate::demand::DemandView;
use crate::world::{RegionId, Request, RequestType, TimeStep, TravelTimeMatrix};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CstError {
    #[error("anchor at ({time}, {origin}) is not feasible within the horizon")]
    InfeasibleAnchor { time: u32, origin: u32 },
    #[error("({time}, {location}) is outside the anchor's feasibility cone")]
    OutOfDomain { time: u32, location: u32 },
    #[error("travel matrix has a zero off-diagonal entry; expected-value tables need strictly positive travel times between distinct regions")]
    DegenerateMetric,
}

/// Idle-target encoding per cell: region id (1-based) or `WAIT`.
const WAIT: u16 = 0;
const UNSET: u16 = u16::MAX;

#[derive(Clone, Copy)]
struct Candidate {
    /// `delta(l, d) + delta(d, o_anchor)`; feasible iff `<= t_anchor - t`.
    key: u32,
    /// Landing-cell offset relative to the current cell's row base:
    /// `(d - 1) - step * n`, so `cont = values[row_base + rel]`.
    rel: i32,
    dest: u16,
}

/// Memoized expected-value table for one anchor commitment.
pub struct CstTable {
    anchor: Request,
    anchor_t: u32,
    anchor_o: u16,
    n: usize,
    view_stamp: u64,
    /// True when the view has no type with positive presence and value; the
    /// whole table is identically zero and carries no ranked destinations.
    valueless: bool,
    delta: Vec<u32>,
    cand_offsets: Vec<u32>,
    cand_entries: Vec<Candidate>,
    /// Lowest materialized time row; rows cover `t_lo..=anchor_t`.
    t_lo: u32,
    /// Row-major values, row index `(anchor_t - t)`; NaN marks out-of-cone.
    values: Vec<f64>,
    /// Idle target per cell; `UNSET` for out-of-cone cells.
    dstar: Vec<u16>,
    /// Ranked request destinations `a_1..a_j`, only for cells where some
    /// request beats idling.
    ranked: HashMap<u32, Vec<u16>>,
}

impl CstTable {
    /// Prepare a lazy table. Values materialize on first query.
    pub fn build(
        matrix: &TravelTimeMatrix,
        view: &dyn DemandView,
        anchor: &Request,
    ) -> Result<Self, CstError> {
        let n = matrix.n_regions();
        let anchor_t = anchor.start().get();
        let anchor_o = anchor.origin();
        if anchor_t > view.horizon() || anchor_o.get() as usize > n {
            return Err(CstError::InfeasibleAnchor {
                time: anchor_t,
                origin: anchor_o.get(),
            });
        }
        let valueless = !view.has_positive_value_demand();
        if !valueless {
            // A zero-length hop between distinct regions would let the sweep
            // collect value without advancing time; reject such worlds up
            // front when there is any value to collect.
            if matrix.min_off_diagonal() == Some(0) {
                return Err(CstError::DegenerateMetric);
            }
        }
        let mut delta = vec![0u32; n * n];
        for u in 0..n {
            for v in 0..n {
                delta[u * n + v] = matrix.time_idx(u, v);
            }
        }
        let mut cand_offsets = Vec::with_capacity(n + 1);
        let mut cand_entries = Vec::new();
        cand_offsets.push(0u32);
        for l in 0..n {
            let mut cands: Vec<Candidate> = (0..n)
                .filter(|&d| d != l)
                .map(|d| Candidate {
                    key: delta[l * n + d] + delta[d * n + anchor_o.index()],
                    rel: d as i32 - (delta[l * n + d] as usize * n) as i32,
                    dest: d as u16 + 1,
                })
                .collect();
            cands.sort_by_key(|c| (c.key, c.dest));
            cand_entries.extend_from_slice(&cands);
            cand_offsets.push(cand_entries.len() as u32);
        }
        Ok(CstTable {
            anchor: *anchor,
            anchor_t,
            anchor_o: anchor_o.get() as u16,
            n,
            view_stamp: view.stamp(),
            valueless,
            delta,
            cand_offsets,
            cand_entries,
            t_lo: anchor_t + 1, // no rows yet
            values: Vec::new(),
            dstar: Vec::new(),
            ranked: HashMap::new(),
        })
    }

    pub fn anchor(&self) -> &Request {
        &self.anchor
    }

    #[inline]
    fn cell(&self, t: u32, l: usize) -> usize {
        (self.anchor_t - t) as usize * self.n + l
    }

    #[inline]
    fn in_cone(&self, t: u32, l: usize) -> bool {
        t <= self.anchor_t
            && self.delta[l * self.n + (self.anchor_o as usize - 1)] <= self.anchor_t - t
    }

    /// Memoized value at `(t, l)`, materializing rows as needed.
    pub fn value(
        &mut self,
        view: &dyn DemandView,
        t: TimeStep,
        l: RegionId,
    ) -> Result<f64, CstError> {
        assert_eq!(
            view.stamp(),
            self.view_stamp,
            "table queried under a different demand view than it was built for"
        );
        if !self.in_cone(t.get(), l.index()) {
            return Err(CstError::OutOfDomain {
                time: t.get(),
                location: l.get(),
            });
        }
        self.ensure_rows(view, t.get());
        Ok(self.values[self.cell(t.get(), l.index())])
    }

    /// O(1) read of an already-materialized cell.
    pub fn lookup(&self, t: TimeStep, l: RegionId) -> Result<f64, CstError> {
        if !self.in_cone(t.get(), l.index()) || t.get() < self.t_lo {
            return Err(CstError::OutOfDomain {
                time: t.get(),
                location: l.get(),
            });
        }
        Ok(self.values[self.cell(t.get(), l.index())])
    }

    /// Materialize the full cone down to `t = 1`.
    pub fn materialize_all(&mut self, view: &dyn DemandView) {
        self.ensure_rows(view, 1);
    }

    fn ensure_rows(&mut self, view: &dyn DemandView, t: u32) {
        while self.t_lo > t {
            let next = self.t_lo - 1;
            self.compute_row(view, next);
            self.t_lo = next;
        }
    }

    fn compute_row(&mut self, view: &dyn DemandView, t: u32) {
        debug_assert_eq!(t + 1, self.t_lo);
        let n = self.n;
        let slack = self.anchor_t - t;
        let row_base = self.values.len();
        self.values.resize(row_base + n, f64::NAN);
        self.dstar.resize(row_base + n, UNSET);
        let anchor_o_idx = self.anchor_o as usize - 1;
        for l in 0..n {
            if self.delta[l * n + anchor_o_idx] > slack {
                continue; // out of cone
            }
            if t == self.anchor_t && l == anchor_o_idx {
                self.values[row_base + l] = 0.0;
                continue;
            }
            // Idle target: best continuation over reachable destinations,
            // with waiting competing as a pseudo-destination at this region's
            // own id. Ties go to the lower region id.
            let mut best_cont = f64::NEG_INFINITY;
            let mut best_tie = u16::MAX;
            let mut best_target = UNSET;
            if self.delta[l * n + anchor_o_idx] <= slack.saturating_sub(1) && slack >= 1 {
                // Waiting lands at (t + 1, l).
                let cont = self.values[self.cell(t + 1, l)];
                best_cont = cont;
                best_tie = l as u16 + 1;
                best_target = WAIT;
            }
            let lo = self.cand_offsets[l] as usize;
            let hi = self.cand_offsets[l + 1] as usize;
            for c in &self.cand_entries[lo..hi] {
                if c.key > slack {
                    break; // candidates are sorted by key
                }
                let cont = self.values[(row_base as i32 + c.rel) as usize];
                if cont > best_cont || (cont == best_cont && c.dest < best_tie) {
                    best_cont = cont;
                    best_tie = c.dest;
                    best_target = c.dest;
                }
            }
            debug_assert!(best_target != UNSET, "in-cone cell must have an action");
            self.dstar[row_base + l] = best_target;

            if self.valueless {
                self.values[row_base + l] = 0.0;
                continue;
            }

            // Ranked request destinations: those whose value plus continuation
            // strictly beats idling, in decreasing order (ties to lower id).
            let origin = RegionId::new(l as u32 + 1);
            let mut ranked: Vec<(f64, u16, f64)> = Vec::new();
            for ta in view.types_at(TimeStep::new(t), origin) {
                let d = ta.dest as usize - 1;
                if d == l || ta.q1 <= 0.0 {
                    continue;
                }
                if self.delta[l * n + d] + self.delta[d * n + anchor_o_idx] > slack {
                    continue;
                }
                let cont = self.values[self.cell(t + self.delta[l * n + d], d)];
                let score = ta.value + cont;
                if score > best_cont {
                    ranked.push((score, ta.dest, ta.q1));
                }
            }
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

            let mut f = 0.0f64;
            let mut p = 1.0f64;
            for (score, _, q) in &ranked {
                f += p * q * score;
                p *= 1.0 - q;
            }
            f += p * best_cont;
            self.values[row_base + l] = f;
            if !ranked.is_empty() {
                self.ranked.insert(
                    (row_base + l) as u32,
                    ranked.iter().map(|(_, d, _)| *d).collect(),
                );
            }
        }
    }
}

/// Eagerly computed table over the whole feasibility cone.
pub fn compute_cst(
    matrix: &TravelTimeMatrix,
    view: &dyn DemandView,
    anchor: &Request,
) -> Result<CstTable, CstError> {
    let mut table = CstTable::build(matrix, view, anchor)?;
    table.materialize_all(view);
    Ok(table)
}

/// O(1) memoized read; errors outside the materialized domain.
pub fn cst_lookup(table: &CstTable, t: TimeStep, l: RegionId) -> Result<f64, CstError> {
    table.lookup(t, l)
}

/// Per-type probabilities that the table's induced policy serves a request
/// of that type, conditioned on at least one appearing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeProbabilities {
    pub anchor: Request,
    pub start: (TimeStep, RegionId),
    p: BTreeMap<RequestType, f64>,
    /// Probability mass that reached the anchor; 1 up to rounding.
    pub terminal_mass: f64,
}

impl ServeProbabilities {
    /// Assemble from an explicit per-type map (handy for tests and for
    /// replaying updates outside the propagation walk).
    pub fn from_parts(
        anchor: Request,
        start: (TimeStep, RegionId),
        p: BTreeMap<RequestType, f64>,
    ) -> Self {
        ServeProbabilities {
            anchor,
            start,
            p,
            terminal_mass: 1.0,
        }
    }

    pub fn get(&self, w: &RequestType) -> f64 {
        self.p.get(w).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&RequestType, &f64)> {
        self.p.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Walk the table's preferred-action structure from `start`, splitting unit
/// probability mass across serve branches and the idle chain. For each cell
/// the mass that survives all higher-ranked types is credited to a type as
/// its conditional serve probability; the unconditional serving share
/// recurses through the destination and the leftover follows `d*`.
pub fn serve_probabilities(
    table: &mut CstTable,
    view: &dyn DemandView,
    start: (TimeStep, RegionId),
) -> Result<ServeProbabilities, CstError> {
    let (t0, l0) = start;
    // Materializes rows and validates cone membership and view identity.
    table.value(view, t0, l0)?;
    let mut probs = ServeProbabilities {
        anchor: table.anchor,
        start,
        p: BTreeMap::new(),
        terminal_mass: 0.0,
    };
    if table.valueless {
        // Zero table: the whole mass idles to the anchor untouched.
        probs.terminal_mass = 1.0;
        return Ok(probs);
    }
    let n = table.n;
    let anchor_o_idx = table.anchor_o as usize - 1;
    let rows = (table.anchor_t - t0.get() + 1) as usize;
    let mut mass = vec![0.0f64; rows * n];
    // Mass rows share the table's indexing: row (anchor_t - t).
    let row_of = |t: u32| (table.anchor_t - t) as usize;
    mass[row_of(t0.get()) * n + l0.index()] = 1.0;
    for t in t0.get()..=table.anchor_t {
        for l in 0..n {
            let m = mass[row_of(t) * n + l];
            if m == 0.0 {
                continue;
            }
            if t == table.anchor_t && l == anchor_o_idx {
                probs.terminal_mass += m;
                continue;
            }
            let cell = table.cell(t, l);
            let mut p = 1.0f64;
            if let Some(ranked) = table.ranked.get(&(cell as u32)) {
                let origin = RegionId::new(l as u32 + 1);
                for &dest in ranked.clone().iter() {
                    let w = RequestType::new(origin, RegionId::new(dest as u32), TimeStep::new(t));
                    let q = view.presence(&w);
                    *probs.p.entry(w).or_insert(0.0) += m * p;
                    let land_t = t + table.delta[l * n + (dest as usize - 1)];
                    mass[row_of(land_t) * n + dest as usize - 1] += m * p * q;
                    p *= 1.0 - q;
                }
            }
            let target = table.dstar[cell];
            debug_assert!(target != UNSET);
            if target == WAIT {
                mass[row_of(t + 1) * n + l] += m * p;
            } else {
                let d = target as usize - 1;
                let land_t = t + table.delta[l * n + d];
                mass[row_of(land_t) * n + d] += m * p;
            }
        }
    }
    // Accumulated masses are probabilities; shave off rounding dust.
    for p in probs.p.values_mut() {
        debug_assert!(*p >= -1e-9 && *p <= 1.0 + 1e-9, "serve probability {p}");
        *p = p.clamp(0.0, 1.0);
    }
    Ok(probs)
}

/// In-memory table cache keyed by anchor identity and demand-view stamp.
/// Admission scoring hits the same anchors for every vehicle and every
/// arriving request, so reuse here is what makes Stage 1 cheap.
pub struct CstCache {
    tables: HashMap<(crate::world::RequestId, u64), CstTable>,
}

impl CstCache {
    pub fn new() -> Self {
        CstCache {
            tables: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    /// Value of `(t, l)` under the table anchored at `anchor`, building and
    /// caching the table on first use.
    pub fn value(
        &mut self,
        matrix: &TravelTimeMatrix,
        view: &dyn DemandView,
        anchor: &Request,
        t: TimeStep,
        l: RegionId,
    ) -> Result<f64, CstError> {
        let key = (anchor.id, view.stamp());
        if !self.tables.contains_key(&key) {
            self.tables.insert(key, CstTable::build(matrix, view, anchor)?);
        }
        self.tables.get_mut(&key).unwrap().value(view, t, l)
    }
}

impl Default for CstCache {
    fn default() -> Self {
        Self::new()
    }
}
