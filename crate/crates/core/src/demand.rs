//! Spatio-temporal demand model.
//!
//! Historical trips are discretized into regions (k-means over coordinates)
//! and time steps, then summarized per request type `w = (origin,
//! destination, start)` as a complementary CDF `Pr[X_w >= i]` over the daily
//! count plus a mean value `V_w`. Samplers draw per-day request streams from
//! the model; the dispatch algorithms read it through [`DemandView`].

use crate::rng::Rng;
use crate::world::{RegionId, Request, RequestType, TimeStep, TravelTimeMatrix};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DemandError {
    #[error("trip file missing: {0}")]
    FileMissing(String),
    #[error("trip file header mismatch: expected `{expected}`, found `{found}`")]
    SchemaMismatch { expected: String, found: String },
    #[error("malformed trip row {0}: {1}")]
    MalformedRow(usize, String),
    #[error("need at least {k} distinct coordinates for {k} clusters, found {found}")]
    TooFewDistinctPoints { k: usize, found: usize },
    #[error("no trips to estimate from")]
    EmptyInput,
    #[error("invalid complementary CDF for type {0:?}: {1}")]
    InvalidCcdf(RequestType, String),
}

pub const TRIP_CSV_HEADER: &str = "start_epoch_s,duration_s,origin_lat,origin_lng,dest_lat,dest_lng";

/// One historical trip record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub start_epoch_s: i64,
    pub duration_s: i64,
    pub origin: (f64, f64),
    pub destination: (f64, f64),
}

/// Parse the documented trip CSV. The header row is required; the first
/// malformed row aborts ingestion with its 1-based row number.
pub fn ingest_trips(path: &Path) -> Result<Vec<TripRecord>, DemandError> {
    let file = std::fs::File::open(path)
        .map_err(|_| DemandError::FileMissing(path.display().to_string()))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| DemandError::MalformedRow(1, e.to_string()))?
        .unwrap_or_default();
    if header.trim() != TRIP_CSV_HEADER {
        return Err(DemandError::SchemaMismatch {
            expected: TRIP_CSV_HEADER.to_string(),
            found: header,
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2; // 1-based, after the header
        let line = line.map_err(|e| DemandError::MalformedRow(row, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_trip_row(&line, row)?);
    }
    Ok(out)
}

fn parse_trip_row(line: &str, row: usize) -> Result<TripRecord, DemandError> {
    let fields: Vec<&str> = line.trim().split(',').collect();
    if fields.len() != 6 {
        return Err(DemandError::MalformedRow(
            row,
            format!("expected 6 fields, found {}", fields.len()),
        ));
    }
    let num = |i: usize| -> Result<f64, DemandError> {
        fields[i]
            .trim()
            .parse::<f64>()
            .map_err(|e| DemandError::MalformedRow(row, format!("field {}: {e}", i + 1)))
    };
    let start_epoch_s = fields[0]
        .trim()
        .parse::<i64>()
        .map_err(|e| DemandError::MalformedRow(row, format!("field 1: {e}")))?;
    let duration_s = fields[1]
        .trim()
        .parse::<i64>()
        .map_err(|e| DemandError::MalformedRow(row, format!("field 2: {e}")))?;
    let rec = TripRecord {
        start_epoch_s,
        duration_s,
        origin: (num(2)?, num(3)?),
        destination: (num(4)?, num(5)?),
    };
    if rec.duration_s <= 0 {
        return Err(DemandError::MalformedRow(row, "duration must be positive".into()));
    }
    if rec.start_epoch_s < 0 {
        return Err(DemandError::MalformedRow(row, "start epoch must be non-negative".into()));
    }
    for (lat, lng) in [rec.origin, rec.destination] {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lng) {
            return Err(DemandError::MalformedRow(row, "coordinate out of range".into()));
        }
    }
    Ok(rec)
}

/// Region discretization: every coordinate belongs to its nearest center by
/// squared Euclidean distance (ties to the lowest center index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub centers: Vec<(f64, f64)>,
}

impl RegionMap {
    pub fn n_regions(&self) -> usize {
        self.centers.len()
    }

    pub fn assign(&self, point: (f64, f64)) -> RegionId {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centers.iter().enumerate() {
            let d = sq_dist(*c, point);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        RegionId::new(best as u32 + 1)
    }
}

fn sq_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// Lloyd's iteration with seeded initialization from a random subset of k
/// distinct points. Stops when assignments no longer change or after
/// `max_iters` rounds. Empty clusters keep their previous center.
pub fn cluster_regions(
    coords: &[(f64, f64)],
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<RegionMap, DemandError> {
    let mut distinct: Vec<(f64, f64)> = Vec::new();
    for &c in coords {
        if !distinct.contains(&c) {
            distinct.push(c);
        }
    }
    if distinct.len() < k || k == 0 {
        return Err(DemandError::TooFewDistinctPoints {
            k,
            found: distinct.len(),
        });
    }
    let mut rng = Rng::new(seed).stream("kmeans-init");
    let mut order: Vec<usize> = (0..distinct.len()).collect();
    rng.shuffle(&mut order);
    let mut centers: Vec<(f64, f64)> = order[..k].iter().map(|&i| distinct[i]).collect();

    let map_of = |centers: &[(f64, f64)]| RegionMap {
        centers: centers.to_vec(),
    };
    let mut assignment: Vec<u32> = coords
        .iter()
        .map(|&c| map_of(&centers).assign(c).get())
        .collect();
    for _ in 0..max_iters {
        // Recompute centers as the mean of their assigned points.
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); k];
        for (&c, &a) in coords.iter().zip(assignment.iter()) {
            let s = &mut sums[a as usize - 1];
            s.0 += c.0;
            s.1 += c.1;
            s.2 += 1;
        }
        for (i, s) in sums.iter().enumerate() {
            if s.2 > 0 {
                centers[i] = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
        let next: Vec<u32> = coords
            .iter()
            .map(|&c| map_of(&centers).assign(c).get())
            .collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(RegionMap { centers })
}

/// Within-cluster sum of squared distances, used by tests to check Lloyd's
/// objective never increases.
pub fn within_cluster_ss(coords: &[(f64, f64)], map: &RegionMap) -> f64 {
    coords
        .iter()
        .map(|&c| sq_dist(c, map.centers[map.assign(c).index()]))
        .sum()
}

/// Demand for one request type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeDemand {
    /// `ccdf[i-1] = Pr[X_w >= i]`, truncated after the last nonzero entry.
    pub ccdf: Vec<f64>,
    pub value: f64,
}

/// Sparse per-cell view used by the hot dispatch loops: all demanded
/// destinations out of one `(time, origin)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TypeAt {
    pub dest: u16,
    /// `Pr[X >= 1]` under the view this slice came from.
    pub q1: f64,
    pub value: f64,
}

/// Flat CSR layout of a demand distribution: per-cell type entries plus a
/// parallel CCDF pool. The sequential dispatcher clones this wholesale every
/// tick, so it is all contiguous arrays.
#[derive(Debug, Clone, Default)]
pub(crate) struct FlatDemand {
    /// `horizon * n_regions + 1` offsets into `cell_entries`.
    pub cell_offsets: Vec<u32>,
    pub cell_entries: Vec<TypeAt>,
    /// Request type per entry, parallel to `cell_entries`.
    pub types: Vec<RequestType>,
    /// CCDF pool: entry `i` owns `ccdf_values[ccdf_offsets[i]..ccdf_offsets[i+1]]`.
    pub ccdf_offsets: Vec<u32>,
    pub ccdf_values: Vec<f64>,
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Read-only interface the dispatch algorithms use to consult a demand
/// distribution: either the raw estimated model or a virtual distribution
/// evolved by sequential dispatch.
pub trait DemandView {
    fn horizon(&self) -> u32;
    fn n_regions(&self) -> u32;
    /// `Pr[X_w >= 1]` (zero for unknown types).
    fn presence(&self, w: &RequestType) -> f64;
    /// `V_w` (zero for unknown types).
    fn type_value(&self, w: &RequestType) -> f64;
    /// Demanded destinations out of `(t, origin)`, sorted by destination.
    fn types_at(&self, t: TimeStep, origin: RegionId) -> &[TypeAt];
    /// False when no type has both positive presence and positive value, in
    /// which case every expected-value table is identically zero.
    fn has_positive_value_demand(&self) -> bool;
    /// Changes whenever the distribution content changes; used as a cache key.
    fn stamp(&self) -> u64;
}

/// Empirical demand model over a discretized day.
#[derive(Debug, Clone)]
pub struct DemandModel {
    horizon: u32,
    n_regions: u32,
    types: BTreeMap<RequestType, TypeDemand>,
    flat: FlatDemand,
    has_positive: bool,
    stamp: u64,
}

impl DemandModel {
    pub fn new(
        horizon: u32,
        n_regions: u32,
        types: BTreeMap<RequestType, TypeDemand>,
    ) -> Result<Self, DemandError> {
        let mut kept: BTreeMap<RequestType, TypeDemand> = BTreeMap::new();
        for (w, mut td) in types {
            while td.ccdf.last().is_some_and(|p| *p == 0.0) {
                td.ccdf.pop();
            }
            if td.ccdf.is_empty() {
                continue; // absent type
            }
            validate_ccdf(&w, &td.ccdf)?;
            if td.value < 0.0 {
                return Err(DemandError::InvalidCcdf(w, "negative value".into()));
            }
            if w.origin.get() > n_regions
                || w.destination.get() > n_regions
                || w.start.get() > horizon
            {
                return Err(DemandError::InvalidCcdf(w, "type outside the world".into()));
            }
            kept.insert(w, td);
        }
        let mut model = DemandModel {
            horizon,
            n_regions,
            types: kept,
            flat: FlatDemand::default(),
            has_positive: false,
            stamp: fresh_stamp(),
        };
        model.rebuild_cells();
        Ok(model)
    }

    fn rebuild_cells(&mut self) {
        let cells = self.horizon as usize * self.n_regions as usize;
        let mut per_cell: Vec<Vec<(TypeAt, RequestType)>> = vec![Vec::new(); cells];
        let mut has_positive = false;
        for (w, td) in &self.types {
            let q1 = td.ccdf[0];
            if q1 > 0.0 && td.value > 0.0 {
                has_positive = true;
            }
            per_cell[self.cell_index(w.start, w.origin)].push((
                TypeAt {
                    dest: w.destination.get() as u16,
                    q1,
                    value: td.value,
                },
                *w,
            ));
        }
        let mut flat = FlatDemand::default();
        flat.cell_offsets.reserve(cells + 1);
        flat.cell_offsets.push(0u32);
        flat.ccdf_offsets.push(0u32);
        for mut cell in per_cell {
            cell.sort_by_key(|(e, _)| e.dest);
            for (entry, w) in cell {
                flat.cell_entries.push(entry);
                flat.types.push(w);
                flat.ccdf_values.extend_from_slice(&self.types[&w].ccdf);
                flat.ccdf_offsets.push(flat.ccdf_values.len() as u32);
            }
            flat.cell_offsets.push(flat.cell_entries.len() as u32);
        }
        self.flat = flat;
        self.has_positive = has_positive;
    }

    pub(crate) fn flat(&self) -> &FlatDemand {
        &self.flat
    }

    #[inline]
    fn cell_index(&self, t: TimeStep, origin: RegionId) -> usize {
        (t.get() as usize - 1) * self.n_regions as usize + origin.index()
    }

    pub fn types(&self) -> &BTreeMap<RequestType, TypeDemand> {
        &self.types
    }

    /// Expected number of requests per day: `E[X] = sum_i Pr[X >= i]` summed
    /// over all types.
    pub fn expected_daily(&self) -> f64 {
        self.types
            .values()
            .map(|td| td.ccdf.iter().sum::<f64>())
            .sum()
    }

    pub fn mean_value(&self) -> f64 {
        if self.types.is_empty() {
            return 0.0;
        }
        self.types.values().map(|td| td.value).sum::<f64>() / self.types.len() as f64
    }
}

fn validate_ccdf(w: &RequestType, ccdf: &[f64]) -> Result<(), DemandError> {
    let mut prev = 1.0f64;
    for &p in ccdf {
        if !(0.0..=1.0).contains(&p) {
            return Err(DemandError::InvalidCcdf(*w, format!("entry {p} outside [0,1]")));
        }
        if p > prev {
            return Err(DemandError::InvalidCcdf(*w, "not nonincreasing".into()));
        }
        prev = p;
    }
    Ok(())
}

impl DemandView for DemandModel {
    fn horizon(&self) -> u32 {
        self.horizon
    }
    fn n_regions(&self) -> u32 {
        self.n_regions
    }
    fn presence(&self, w: &RequestType) -> f64 {
        self.types.get(w).map_or(0.0, |td| td.ccdf[0])
    }
    fn type_value(&self, w: &RequestType) -> f64 {
        self.types.get(w).map_or(0.0, |td| td.value)
    }
    fn types_at(&self, t: TimeStep, origin: RegionId) -> &[TypeAt] {
        let i = self.cell_index(t, origin);
        &self.flat.cell_entries
            [self.flat.cell_offsets[i] as usize..self.flat.cell_offsets[i + 1] as usize]
    }
    fn has_positive_value_demand(&self) -> bool {
        self.has_positive
    }
    fn stamp(&self) -> u64 {
        self.stamp
    }
}

const DEFAULT_SPEED_KMH: f64 = 30.0;

/// Everything `estimate_demand` derives from a trip log.
#[derive(Debug, Clone)]
pub struct EstimatedDemand {
    pub model: DemandModel,
    pub matrix: TravelTimeMatrix,
    pub region_map: RegionMap,
    /// Trips dropped because they span midnight.
    pub dropped_midnight: usize,
    /// Trips dropped because origin and destination land in the same region.
    pub dropped_loop: usize,
}

/// Build the empirical model: per type, `Pr[X_w >= i]` is the fraction of
/// days observing at least `i` trips of that type, and `V_w` is the mean
/// trip duration in time steps. Travel times come from distances between
/// region centers (metric-closed, at least one step between distinct regions).
pub fn estimate_demand(
    trips: &[TripRecord],
    region_map: &RegionMap,
    step_seconds: u32,
    day_count: u32,
) -> Result<EstimatedDemand, DemandError> {
    if trips.is_empty() || day_count == 0 {
        return Err(DemandError::EmptyInput);
    }
    let horizon = (86_400 / step_seconds).max(1);
    let mut dropped_midnight = 0usize;
    let mut dropped_loop = 0usize;
    // (type, day) -> count; plus duration sums for the value table.
    let mut day_counts: BTreeMap<(RequestType, i64), u32> = BTreeMap::new();
    let mut durations: BTreeMap<RequestType, (f64, u32)> = BTreeMap::new();
    for trip in trips {
        let day = trip.start_epoch_s.div_euclid(86_400);
        let within = trip.start_epoch_s.rem_euclid(86_400);
        if within + trip.duration_s > 86_400 {
            dropped_midnight += 1;
            continue;
        }
        let origin = region_map.assign(trip.origin);
        let destination = region_map.assign(trip.destination);
        if origin == destination {
            dropped_loop += 1;
            continue;
        }
        let start = TimeStep::new((within as u32 / step_seconds) + 1);
        let w = RequestType::new(origin, destination, start);
        *day_counts.entry((w, day)).or_insert(0) += 1;
        let d = durations.entry(w).or_insert((0.0, 0));
        d.0 += trip.duration_s as f64 / step_seconds as f64;
        d.1 += 1;
    }

    let mut per_type_counts: BTreeMap<RequestType, Vec<u32>> = BTreeMap::new();
    for ((w, _day), count) in &day_counts {
        per_type_counts.entry(*w).or_default().push(*count);
    }
    let mut types = BTreeMap::new();
    for (w, counts) in per_type_counts {
        let max_count = counts.iter().copied().max().unwrap_or(0);
        let ccdf: Vec<f64> = (1..=max_count)
            .map(|i| counts.iter().filter(|&&c| c >= i).count() as f64 / day_count as f64)
            .collect();
        let (sum, n) = durations[&w];
        types.insert(
            w,
            TypeDemand {
                ccdf,
                value: sum / n as f64,
            },
        );
    }

    let matrix = matrix_from_centers(region_map, step_seconds, DEFAULT_SPEED_KMH)?;
    let model = DemandModel::new(horizon, region_map.n_regions() as u32, types)?;
    Ok(EstimatedDemand {
        model,
        matrix,
        region_map: region_map.clone(),
        dropped_midnight,
        dropped_loop,
    })
}

/// Travel times from straight-line distances between centers at a constant
/// urban speed, rounded to whole steps with a one-step floor between
/// distinct regions, then metric-closed.
pub fn matrix_from_centers(
    region_map: &RegionMap,
    step_seconds: u32,
    speed_kmh: f64,
) -> Result<TravelTimeMatrix, DemandError> {
    let n = region_map.n_regions();
    let km = |a: (f64, f64), b: (f64, f64)| -> f64 {
        let mean_lat = ((a.0 + b.0) / 2.0).to_radians();
        let dx = (a.1 - b.1) * 111.320 * mean_lat.cos();
        let dy = (a.0 - b.0) * 110.574;
        (dx * dx + dy * dy).sqrt()
    };
    let raw: Vec<Vec<i64>> = (0..n)
        .map(|u| {
            (0..n)
                .map(|v| {
                    if u == v {
                        0
                    } else {
                        let hours = km(region_map.centers[u], region_map.centers[v]) / speed_kmh;
                        let steps = (hours * 3600.0 / step_seconds as f64).round() as i64;
                        steps.max(1)
                    }
                })
                .collect()
        })
        .collect();
    TravelTimeMatrix::build(&raw).map_err(|e| DemandError::InvalidCcdf(
        RequestType::new(RegionId::new(1), RegionId::new(1), TimeStep::new(1)),
        format!("derived travel matrix invalid: {e}"),
    ))
}

/// Sample one day's on-demand stream: per type, draw the daily count from the
/// CCDF by inversion and emit that many requests. The stream is time-ordered
/// and byte-identical for a given generator state.
pub fn sample_on_demand(model: &DemandModel, rng: &mut Rng, first_id: u64) -> Vec<Request> {
    let mut drawn: Vec<(RequestType, f64)> = Vec::new();
    for (w, td) in &model.types {
        let u = rng.next_f64();
        // P[X >= i] > u for exactly the first n entries of a nonincreasing CCDF.
        let n = td.ccdf.iter().take_while(|&&p| p > u).count();
        for _ in 0..n {
            drawn.push((*w, td.value));
        }
    }
    drawn.sort_by_key(|(w, _)| (w.start, w.origin, w.destination));
    drawn
        .into_iter()
        .enumerate()
        .map(|(i, (w, v))| Request::on_demand(first_id + i as u64, w, v))
        .collect()
}

/// Sample the advance-booking stream: the count is `round(kappa * expected
/// daily on-demand count)`; types are i.i.d. proportional to `Pr[X_w >= 1]`.
/// Arrival order is the sampling order, not pickup-time order.
pub fn sample_scheduled(
    model: &DemandModel,
    kappa: f64,
    rng: &mut Rng,
    first_id: u64,
) -> Vec<Request> {
    let count = (kappa * model.expected_daily()).round() as usize;
    let weights: Vec<(RequestType, f64, f64)> = model
        .types
        .iter()
        .map(|(w, td)| (*w, td.ccdf[0], td.value))
        .collect();
    let total: f64 = weights.iter().map(|(_, q, _)| q).sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut u = rng.next_f64() * total;
        let mut chosen = weights.len() - 1;
        for (j, (_, q, _)) in weights.iter().enumerate() {
            if u < *q {
                chosen = j;
                break;
            }
            u -= *q;
        }
        let (w, _, v) = weights[chosen];
        out.push(Request::scheduled(first_id + i as u64, w, v));
    }
    out
}

/// On-disk form of an estimated model (demand plus the derived geometry).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub horizon: u32,
    pub n_regions: u32,
    pub centers: Vec<(f64, f64)>,
    pub travel_matrix: Vec<Vec<u32>>,
    pub types: Vec<ModelFileType>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFileType {
    pub origin: u32,
    pub destination: u32,
    pub start: u32,
    pub ccdf: Vec<f64>,
    pub value: f64,
}

impl ModelFile {
    pub fn from_parts(model: &DemandModel, matrix: &TravelTimeMatrix, centers: &[(f64, f64)]) -> Self {
        let n = matrix.n_regions();
        ModelFile {
            horizon: model.horizon,
            n_regions: model.n_regions,
            centers: centers.to_vec(),
            travel_matrix: (0..n)
                .map(|u| (0..n).map(|v| matrix.time_idx(u, v)).collect())
                .collect(),
            types: model
                .types
                .iter()
                .map(|(w, td)| ModelFileType {
                    origin: w.origin.get(),
                    destination: w.destination.get(),
                    start: w.start.get(),
                    ccdf: td.ccdf.clone(),
                    value: td.value,
                })
                .collect(),
        }
    }

    pub fn into_parts(self) -> Result<(DemandModel, TravelTimeMatrix, RegionMap), DemandError> {
        let n = self.n_regions as usize;
        let flat: Vec<u32> = self.travel_matrix.iter().flatten().copied().collect();
        let matrix = TravelTimeMatrix::from_metric(n, flat);
        let mut types = BTreeMap::new();
        for t in self.types {
            types.insert(
                RequestType::new(
                    RegionId::new(t.origin),
                    RegionId::new(t.destination),
                    TimeStep::new(t.start),
                ),
                TypeDemand {
                    ccdf: t.ccdf,
                    value: t.value,
                },
            );
        }
        let model = DemandModel::new(self.horizon, self.n_regions, types)?;
        let map = RegionMap {
            centers: self.centers,
        };
        Ok((model, matrix, map))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn w(o: u32, d: u32, t: u32) -> RequestType {
        RequestType::new(RegionId::new(o), RegionId::new(d), TimeStep::new(t))
    }

    fn model_of(types: Vec<(RequestType, Vec<f64>, f64)>) -> DemandModel {
        let map = types
            .into_iter()
            .map(|(ty, ccdf, value)| (ty, TypeDemand { ccdf, value }))
            .collect();
        DemandModel::new(1440, 3, map).unwrap()
    }

    fn write_csv(content: &str) -> std::path::PathBuf {
        let mut path = std::env::temp_dir();
        path.push(format!("trips-{}.csv", fresh_stamp()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn ingest_empty_file_with_header() {
        let path = write_csv("start_epoch_s,duration_s,origin_lat,origin_lng,dest_lat,dest_lng\n");
        assert!(ingest_trips(&path).unwrap().is_empty());
    }

    #[test]
    fn ingest_single_row() {
        let path = write_csv(
            "start_epoch_s,duration_s,origin_lat,origin_lng,dest_lat,dest_lng\n3600,600,31.2,121.4,31.3,121.5\n",
        );
        let trips = ingest_trips(&path).unwrap();
        assert_eq!(trips.len(), 1);
        assert_eq!(trips[0].duration_s, 600);
    }

    #[test]
    fn ingest_rejects_negative_duration_with_row_number() {
        let path = write_csv(
            "start_epoch_s,duration_s,origin_lat,origin_lng,dest_lat,dest_lng\n3600,-5,31.2,121.4,31.3,121.5\n",
        );
        match ingest_trips(&path) {
            Err(DemandError::MalformedRow(2, _)) => {}
            other => panic!("expected MalformedRow(2), got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_wrong_header() {
        let path = write_csv("a,b,c\n");
        assert!(matches!(
            ingest_trips(&path),
            Err(DemandError::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn ingest_missing_file() {
        assert!(matches!(
            ingest_trips(Path::new("/nonexistent/trips.csv")),
            Err(DemandError::FileMissing(_))
        ));
    }

    #[test]
    fn kmeans_each_point_its_own_center() {
        let pts = vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)];
        let map = cluster_regions(&pts, 3, 100, 7).unwrap();
        let mut got: Vec<RegionId> = pts.iter().map(|&p| map.assign(p)).collect();
        got.sort();
        got.dedup();
        assert_eq!(got.len(), 3);
        for &p in &pts {
            assert!(map.centers.contains(&p));
        }
    }

    #[test]
    fn kmeans_single_cluster_is_the_mean() {
        let pts = vec![(0.0, 0.0), (2.0, 0.0), (0.0, 2.0), (2.0, 2.0)];
        let map = cluster_regions(&pts, 1, 100, 7).unwrap();
        assert!((map.centers[0].0 - 1.0).abs() < 1e-12);
        assert!((map.centers[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_two_well_separated_clusters() {
        // Exhaustive 2-partition oracle over 20 points is the argmin of
        // within-cluster squared distance; for two tight, far-apart blobs it
        // is the blob split, whose centers are the blob means.
        let mut pts = Vec::new();
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            pts.push((rng.next_f64() * 0.1, rng.next_f64() * 0.1));
        }
        for _ in 0..10 {
            pts.push((100.0 + rng.next_f64() * 0.1, 100.0 + rng.next_f64() * 0.1));
        }
        let map = cluster_regions(&pts, 2, 100, 11).unwrap();
        let blob_a_mean = (
            pts[..10].iter().map(|p| p.0).sum::<f64>() / 10.0,
            pts[..10].iter().map(|p| p.1).sum::<f64>() / 10.0,
        );
        let blob_b_mean = (
            pts[10..].iter().map(|p| p.0).sum::<f64>() / 10.0,
            pts[10..].iter().map(|p| p.1).sum::<f64>() / 10.0,
        );
        let mut centers = map.centers.clone();
        centers.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert!(sq_dist(centers[0], blob_a_mean) < 1e-9);
        assert!(sq_dist(centers[1], blob_b_mean) < 1e-9);
    }

    #[test]
    fn kmeans_objective_never_increases() {
        let mut rng = Rng::new(17);
        let pts: Vec<(f64, f64)> = (0..60)
            .map(|_| (rng.next_f64() * 10.0, rng.next_f64() * 10.0))
            .collect();
        // Run Lloyd one extra round at a time and watch the objective.
        let mut prev = f64::INFINITY;
        for iters in 1..10 {
            let map = cluster_regions(&pts, 4, iters, 5).unwrap();
            let ss = within_cluster_ss(&pts, &map);
            assert!(ss <= prev + 1e-9, "objective increased at iter {iters}");
            prev = ss;
        }
    }

    #[test]
    fn kmeans_too_few_distinct_points() {
        let pts = vec![(1.0, 1.0), (1.0, 1.0)];
        assert!(matches!(
            cluster_regions(&pts, 2, 10, 1),
            Err(DemandError::TooFewDistinctPoints { .. })
        ));
    }

    fn trip(day: i64, step: u32, dur_steps: i64, from: (f64, f64), to: (f64, f64)) -> TripRecord {
        TripRecord {
            start_epoch_s: day * 86_400 + (step as i64 - 1) * 60,
            duration_s: dur_steps * 60,
            origin: from,
            destination: to,
        }
    }

    fn two_region_map() -> RegionMap {
        RegionMap {
            centers: vec![(31.20, 121.40), (31.30, 121.60)],
        }
    }

    #[test]
    fn estimate_single_day_single_trip() {
        let map = two_region_map();
        let trips = vec![trip(0, 10, 8, map.centers[0], map.centers[1])];
        let est = estimate_demand(&trips, &map, 60, 1).unwrap();
        let ty = w(1, 2, 10);
        assert_eq!(est.model.types()[&ty].ccdf, vec![1.0]);
        assert!((est.model.types()[&ty].value - 8.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_two_days_half_frequency() {
        let map = two_region_map();
        let trips = vec![trip(0, 10, 8, map.centers[0], map.centers[1])];
        let est = estimate_demand(&trips, &map, 60, 2).unwrap();
        assert_eq!(est.model.types()[&w(1, 2, 10)].ccdf, vec![0.5]);
    }

    #[test]
    fn estimate_counts_two_then_one() {
        let map = two_region_map();
        // Day 0 has two trips of the type, day 1 has one: direct frequency
        // count gives Pr[X>=1] = 1.0 and Pr[X>=2] = 0.5.
        let trips = vec![
            trip(0, 10, 8, map.centers[0], map.centers[1]),
            trip(0, 10, 8, map.centers[0], map.centers[1]),
            trip(1, 10, 8, map.centers[0], map.centers[1]),
        ];
        let est = estimate_demand(&trips, &map, 60, 2).unwrap();
        assert_eq!(est.model.types()[&w(1, 2, 10)].ccdf, vec![1.0, 0.5]);
    }

    #[test]
    fn estimate_drops_midnight_spanners_and_loops() {
        let map = two_region_map();
        let mut spanning = trip(0, 1435, 20, map.centers[0], map.centers[1]);
        spanning.start_epoch_s = 86_400 - 300; // 5 minutes before midnight
        spanning.duration_s = 600;
        let looping = trip(0, 10, 5, map.centers[0], map.centers[0]);
        let good = trip(0, 10, 8, map.centers[0], map.centers[1]);
        let est = estimate_demand(&[spanning, looping, good], &map, 60, 1).unwrap();
        assert_eq!(est.dropped_midnight, 1);
        assert_eq!(est.dropped_loop, 1);
        assert_eq!(est.model.types().len(), 1);
    }

    #[test]
    fn sample_on_demand_zero_model_is_empty() {
        let model = model_of(vec![]);
        let mut rng = Rng::new(1);
        assert!(sample_on_demand(&model, &mut rng, 0).is_empty());
    }

    #[test]
    fn sample_on_demand_degenerate_distribution() {
        let model = model_of(vec![(w(1, 2, 5), vec![1.0], 4.0)]);
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let stream = sample_on_demand(&model, &mut rng, 0);
            assert_eq!(stream.len(), 1);
            assert_eq!(stream[0].ty, w(1, 2, 5));
            assert_eq!(stream[0].value, 4.0);
        }
    }

    #[test]
    fn sample_on_demand_mean_matches_expectation_identity() {
        // E[X] = sum_i Pr[X >= i]; the seeded mean over 10k days must fall
        // within 3 standard errors.
        let ccdf = vec![0.9, 0.5, 0.2];
        let model = model_of(vec![(w(1, 2, 5), ccdf.clone(), 4.0)]);
        let expected: f64 = ccdf.iter().sum();
        // Var[X] = sum_i (2i-1) Pr[X>=i] - E^2rough; compute directly instead.
        let pmf = [
            1.0 - ccdf[0],
            ccdf[0] - ccdf[1],
            ccdf[1] - ccdf[2],
            ccdf[2],
        ];
        let var: f64 = pmf
            .iter()
            .enumerate()
            .map(|(i, p)| p * (i as f64 - expected).powi(2))
            .sum();
        let days = 10_000usize;
        let mut rng = Rng::new(123);
        let mut total = 0usize;
        for _ in 0..days {
            total += sample_on_demand(&model, &mut rng, 0).len();
        }
        let mean = total as f64 / days as f64;
        let se = (var / days as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 3.0 * se,
            "mean {mean} vs expected {expected} (se {se})"
        );
    }

    #[test]
    fn sample_on_demand_is_deterministic() {
        let model = model_of(vec![
            (w(1, 2, 5), vec![0.9, 0.4], 4.0),
            (w(2, 1, 9), vec![0.7], 2.0),
        ]);
        let a = sample_on_demand(&model, &mut Rng::new(42), 100);
        let b = sample_on_demand(&model, &mut Rng::new(42), 100);
        assert_eq!(a, b);
        // Time-ordered stream.
        for pair in a.windows(2) {
            assert!(pair[0].start() <= pair[1].start());
        }
    }

    #[test]
    fn sample_scheduled_zero_count() {
        let model = model_of(vec![(w(1, 2, 5), vec![0.4], 4.0)]);
        let mut rng = Rng::new(1);
        // kappa * E = 0.4 * 0.1 rounds to zero.
        assert!(sample_scheduled(&model, 0.1, &mut rng, 0).is_empty());
    }

    #[test]
    fn sample_scheduled_single_type() {
        let model = model_of(vec![(w(1, 2, 5), vec![1.0], 4.0)]);
        let mut rng = Rng::new(9);
        let stream = sample_scheduled(&model, 3.0, &mut rng, 0);
        assert_eq!(stream.len(), 3);
        assert!(stream.iter().all(|r| r.ty == w(1, 2, 5)));
    }

    #[test]
    fn sample_scheduled_count_tracks_expected_volume() {
        // A model with 1804 expected daily requests at kappa = 1/20 yields a
        // stream in the high eighties.
        let mut types = Vec::new();
        for i in 0..902u32 {
            let t = 1 + (i % 1400);
            let (o, d) = if i % 2 == 0 { (1, 2) } else { (2, 3) };
            types.push((w(o, d, t), vec![1.0, 1.0], 4.0));
        }
        let model = model_of(types);
        assert!((model.expected_daily() - 1804.0).abs() < 1e-9);
        let mut rng = Rng::new(4);
        let stream = sample_scheduled(&model, 1.0 / 20.0, &mut rng, 0);
        assert_eq!(stream.len(), 90); // round(1804 / 20)
        assert!((stream.len() as i64 - 87).abs() <= 5);
    }

    #[test]
    fn ccdf_monotonicity_enforced_at_build() {
        let bad = DemandModel::new(
            100,
            2,
            [(
                w(1, 2, 5),
                TypeDemand {
                    ccdf: vec![0.3, 0.6],
                    value: 1.0,
                },
            )]
            .into(),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn estimation_recovers_generating_ccdf() {
        // Sample many synthetic days from a known CCDF, re-estimate by day
        // frequency, and compare within sampling error.
        let ccdf = vec![0.8, 0.45, 0.15];
        let model = model_of(vec![(w(1, 2, 5), ccdf.clone(), 4.0)]);
        let days = 20_000usize;
        let mut rng = Rng::new(77);
        let mut at_least = vec![0usize; 5];
        for _ in 0..days {
            let n = sample_on_demand(&model, &mut rng, 0).len();
            for i in 1..=n.min(4) {
                at_least[i] += 1;
            }
        }
        for (i, &target) in ccdf.iter().enumerate() {
            let est = at_least[i + 1] as f64 / days as f64;
            let se = (target * (1.0 - target) / days as f64).sqrt();
            assert!(
                (est - target).abs() <= 4.0 * se,
                "ccdf[{i}] estimate {est} vs {target}"
            );
        }
    }

    #[test]
    fn model_file_round_trip() {
        let map = two_region_map();
        let trips = vec![
            trip(0, 10, 8, map.centers[0], map.centers[1]),
            trip(0, 70, 9, map.centers[1], map.centers[0]),
        ];
        let est = estimate_demand(&trips, &map, 60, 1).unwrap();
        let file = ModelFile::from_parts(&est.model, &est.matrix, &map.centers);
        let json = serde_json::to_string_pretty(&file).unwrap();
        let parsed: ModelFile = serde_json::from_str(&json).unwrap();
        let (model, matrix, _) = parsed.into_parts().unwrap();
        assert_eq!(model.types(), est.model.types());
        assert_eq!(matrix, est.matrix);
    }
}
