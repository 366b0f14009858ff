//! Two-stage fleet dispatch.
//!
//! Stage 1 admits scheduled ride requests online (FirstFit, BestScore,
//! RandomBestScore); Stage 2 dispatches vehicles to real-time on-demand
//! requests while guaranteeing every accepted commitment is served exactly
//! on time. Both stages are built around a constrained spatio-temporal value
//! table: the expected value a vehicle can collect before it must arrive at
//! its next commitment.

pub mod baselines;
pub mod cst;
pub mod demand;
pub mod harness;
pub mod rng;
pub mod stage1;
pub mod stage2;
pub mod world;

pub use cst::{CstCache, CstTable, ServeProbabilities};
pub use demand::{DemandModel, DemandView, RegionMap, TripRecord};
pub use rng::Rng;
pub use world::{
    Action, DispatchState, RegionId, Request, RequestId, RequestKind, RequestType, ScheduleBook,
    TimeStep, TravelTimeMatrix, Vehicle, VehicleId,
};
