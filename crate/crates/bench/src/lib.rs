//! Shared fixtures for the kernel benchmarks.

use dispatchlab_core::demand::DemandModel;
use dispatchlab_core::harness::{synth_city, synth_demand, synth_fleet};
use dispatchlab_core::world::{Request, TimeStep, TravelTimeMatrix, Vehicle};

pub struct Fixture {
    pub matrix: TravelTimeMatrix,
    pub demand: DemandModel,
    pub fleet: Vec<Vehicle>,
    pub anchor: Request,
}

/// Full-day 21-region world with a mid-day decision point.
pub fn full_day_fixture() -> Fixture {
    let (_, matrix) = synth_city(21, 7);
    let demand = synth_demand(&matrix, 1440, 1800.0, 7);
    let fleet = synth_fleet(&matrix, 50, 1440, 7);
    let anchor = Request::virtual_end(900_000, (TimeStep::new(1440), fleet[0].start.1));
    Fixture {
        matrix,
        demand,
        fleet,
        anchor,
    }
}
