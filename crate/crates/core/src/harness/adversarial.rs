//! The worst-case admission instance: a four-vertex road network and a
//! six-request stream on which any deterministic online algorithm earns the
//! cheap first ride while the offline optimum fills the whole horizon.

use super::HarnessError;
use crate::world::{RegionId, Request, RequestType, TimeStep, TravelTimeMatrix, Vehicle};

/// Parameters of the construction: `mu` is the ratio between the largest and
/// smallest possible request value, `t` the length of the short edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RatioParams {
    pub mu: u32,
    pub t: u32,
}

#[derive(Debug, Clone)]
pub struct AdversarialInstance {
    pub matrix: TravelTimeMatrix,
    pub vehicle: Vehicle,
    /// Arrival-ordered scheduled stream.
    pub stream: Vec<Request>,
    /// Value of the offline optimum: `4*mu - 2 + t`.
    pub optimal_value: f64,
}

/// Build the four-region instance. Regions 1..4 play A..D; a single vehicle
/// starts at A at step 1 and must end at D when the horizon closes. The
/// stream opens with the short B-to-C ride (the only one an online algorithm
/// can safely take) followed by the five rides that tile the horizon.
///
/// Values equal trip lengths, so with `t = 1` the offline-to-online ratio is
/// exactly `4*mu - 1`.
pub fn adversarial_instance(params: RatioParams) -> Result<AdversarialInstance, HarnessError> {
    let RatioParams { mu, t } = params;
    if mu < 1 || t < 1 || t > mu {
        return Err(HarnessError::InvalidParams(format!(
            "need mu >= 1 and 1 <= t <= mu, got mu={mu}, t={t}"
        )));
    }
    let m = mu as i64;
    let tt = t as i64;
    // Regions: A=1, B=2, C=3, D=4.
    let raw = vec![
        vec![0, m - 1, m, m],
        vec![m - 1, 0, tt, m],
        vec![m, tt, 0, m - 1],
        vec![m, m, m - 1, 0],
    ];
    let matrix = TravelTimeMatrix::build(&raw).expect("construction table is valid");
    // Trips must complete within the horizon, so the world's last step is the
    // arrival step of the final ride.
    let horizon = 4 * mu + t - 1;
    let vehicle = Vehicle::new(
        1,
        (TimeStep::new(1), RegionId::new(1)),
        (TimeStep::new(horizon), RegionId::new(4)),
        &matrix,
    )
    .expect("vehicle window is feasible");

    let rt = |o: u32, d: u32, start: u32| {
        RequestType::new(RegionId::new(o), RegionId::new(d), TimeStep::new(start))
    };
    let mu_f = mu as f64;
    let t_f = t as f64;
    let stream = vec![
        Request::scheduled(1, rt(2, 3, 2 * mu), t_f),
        Request::scheduled(2, rt(1, 4, 1), mu_f),
        Request::scheduled(3, rt(4, 3, mu + 1), mu_f - 1.0),
        Request::scheduled(4, rt(3, 2, 2 * mu), t_f),
        Request::scheduled(5, rt(2, 1, 2 * mu + t), mu_f - 1.0),
        Request::scheduled(6, rt(1, 4, 3 * mu + t - 1), mu_f),
    ];
    Ok(AdversarialInstance {
        matrix,
        vehicle,
        stream,
        optimal_value: 4.0 * mu_f - 2.0 + t_f,
    })
}
