use crate::error::{Error, Result};
use crate::nn::LossWeights;

use super::config::Schedule;

/// Hard-label weight for round `round` (1-based) of `total_rounds`.
pub fn rho_schedule(round: usize, total_rounds: usize, schedule: Schedule) -> Result<LossWeights> {
    if round == 0 || round > total_rounds {
        return Err(Error::Validation(format!(
            "round {round} outside 1..={total_rounds}"
        )));
    }
    let decay = 1.0 - round as f64 / total_rounds as f64;
    let rho = match schedule {
        Schedule::DynamicWithThreshold { threshold } => decay.max(threshold),
        Schedule::DynamicNoThreshold => decay,
        Schedule::Fixed { rho } => rho,
    };
    LossWeights::new(rho)
}
