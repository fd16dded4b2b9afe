use crate::data::{Intensity, OutlierType};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Where the agent looks for an evening venue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecreationPool {
    Favorites,
    All,
}

/// Behavioral knobs for one agent-day.
#[derive(Debug, Clone, PartialEq)]
pub struct DayPlan {
    pub work: bool,
    pub hunger_period_hours: f64,
    pub evening_prob: f64,
    pub recreation: RecreationPool,
}

/// Whether an outlier of this intensity acts abnormally today. Exactly one
/// uniform draw per call.
pub fn inject_roll(intensity: Intensity, rng: &mut SeededRng) -> bool {
    rng.uniform() < intensity.probability()
}

/// Apply abnormal behavior to a day plan. Normal agents pass through
/// without touching the RNG.
pub fn inject(
    kind: OutlierType,
    intensity: Intensity,
    mut plan: DayPlan,
    hunger_factor: f64,
    rng: &mut SeededRng,
) -> Result<DayPlan> {
    match (kind, intensity) {
        (OutlierType::None, Intensity::None) => return Ok(plan),
        (OutlierType::None, _) | (_, Intensity::None) => {
            return Err(Error::Config(format!("invalid outlier class {kind}/{intensity}")))
        }
        _ => {}
    }
    if !inject_roll(intensity, rng) {
        return Ok(plan);
    }
    match kind {
        OutlierType::Work => plan.work = false,
        OutlierType::Hunger => plan.hunger_period_hours /= hunger_factor,
        OutlierType::Social => plan.recreation = RecreationPool::All,
        OutlierType::None => unreachable!(),
    }
    Ok(plan)
}
