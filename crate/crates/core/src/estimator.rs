//! Trajectory extraction from recorded samples.
//!
//! The reported estimate comes from the highest-weight association visited by
//! a sampler. Every component with unit existence probability, which is every
//! track holding at least two detections, contributes one trajectory: the
//! birth/end pair with the largest mixture weight is selected and its state
//! sequence is backward-smoothed over the whole life span.

use crate::assoc::Theta;
use crate::error::{Error, Result};
use crate::linear::rts_smooth;
use crate::recursion::{full_hypothesis, Problem};
use crate::store::SampleStore;
use crate::types::{GaussianMoments, TrajectoryComponent};

/// One extracted trajectory: the originating track slot, its birth and end
/// scans, and smoothed moments for every scan in `birth..=end`.
#[derive(Debug, Clone)]
pub struct TrajectoryEstimate {
    pub slot: u32,
    pub birth: usize,
    pub end: usize,
    pub states: Vec<GaussianMoments>,
}

/// Highest-weight recorded association; ties keep the first one visited.
pub fn map_hypothesis(store: &SampleStore) -> Result<&Theta> {
    store.best().map(|b| &b.theta).ok_or(Error::EmptyStore)
}

fn map_component(components: &[TrajectoryComponent]) -> Option<&TrajectoryComponent> {
    let mut best: Option<&TrajectoryComponent> = None;
    for c in components {
        let better = match best {
            None => true,
            Some(b) => {
                c.log_weight > b.log_weight
                    || (c.log_weight == b.log_weight
                        && (c.birth < b.birth || (c.birth == b.birth && c.end > b.end)))
            }
        };
        if better {
            best = Some(c);
        }
    }
    best
}

/// Extracts one smoothed trajectory per track with at least two detections in
/// `theta`, ordered by slot id. Tracks whose birth/end mixture ends up empty
/// under the active truncation thresholds are skipped.
pub fn extract(problem: &Problem, theta: &Theta) -> Result<Vec<TrajectoryEstimate>> {
    let mut slots: Vec<u32> = theta.confirmed_slots().to_vec();
    slots.sort_unstable();
    let mut out = Vec::with_capacity(slots.len());
    for slot in slots {
        let hyp = full_hypothesis(problem, theta.history(slot));
        debug_assert!(
            hyp.existence > 1.0 - 1e-9,
            "multi-detection track must have unit existence, got {}",
            hyp.existence
        );
        let Some(c) = map_component(&hyp.components) else {
            continue;
        };
        let track = c.track.as_ref().expect("expanded with state sequences");
        let states = rts_smooth(&track.filtered, &track.predicted, &problem.params.motion)?;
        debug_assert_eq!(states.len(), c.end - c.birth + 1);
        out.push(TrajectoryEstimate {
            slot,
            birth: c.birth,
            end: c.end,
            states,
        });
    }
    Ok(out)
}
