//! Shared value types: Gaussian moments, trajectory mixture components, local
//! hypotheses, Poisson intensity components, and log-domain weight utilities.

use nalgebra::{Matrix4, Vector4};

use crate::error::{Error, Result};

/// (scan, measurement) pair, both 0-based. Identifies one measurement in a batch.
pub type MeasKey = (u16, u16);

/// Measurement history of one Bernoulli component, ordered by scan. The first
/// entry is always the measurement that created the component.
pub type History = Vec<MeasKey>;

/// Mean and covariance of a 4-D state (px, vx, py, vy).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
}

/// Filtered and one-step-predicted marginals of a component, kept only when a
/// trajectory will be smoothed. `filtered` covers scans birth..=end; `predicted[t]`
/// is the prediction of scan birth+1+t from `filtered[t]`.
#[derive(Debug, Clone)]
pub struct ComponentTrack {
    pub filtered: Vec<GaussianMoments>,
    pub predicted: Vec<GaussianMoments>,
}

/// One atom of a trajectory density: a (birth, end) pair with its state estimate.
/// `log_weight` is normalized within the owning hypothesis. `latest` is the state
/// at `end`; the component is alive iff `end` equals the hypothesis step.
#[derive(Debug, Clone)]
pub struct TrajectoryComponent {
    pub log_weight: f64,
    pub birth: usize,
    pub end: usize,
    pub latest: GaussianMoments,
    pub track: Option<ComponentTrack>,
}

/// A local hypothesis of one Bernoulli component: existence probability, a mixture
/// over trajectory birth/end times, and the accumulated unnormalized log-weight of
/// its measurement history.
#[derive(Debug, Clone)]
pub struct LocalHypothesis {
    pub log_weight: f64,
    pub existence: f64,
    /// Scan the recursion has processed up to (0-based).
    pub step: usize,
    pub components: Vec<TrajectoryComponent>,
    pub history: History,
}

impl LocalHypothesis {
    /// True when any component extends to the current step.
    pub fn is_alive(&self) -> bool {
        self.components.iter().any(|c| c.end == self.step)
    }

    /// Probability that the trajectory is still alive at the current step,
    /// conditioned on existence.
    pub fn alive_mass(&self) -> f64 {
        self.components
            .iter()
            .filter(|c| c.end == self.step)
            .map(|c| c.log_weight.exp())
            .sum()
    }

    /// Largest component end time. Detections and update moves past this scan are
    /// impossible under the hypothesis.
    pub fn max_end(&self) -> usize {
        self.components.iter().map(|c| c.end).max().unwrap_or(0)
    }
}

/// One Gaussian component of the undetected-trajectory Poisson intensity.
/// `log_weight` is an unnormalized intensity weight. `filtered` holds the
/// propagated prior marginals for scans birth..=end; with constant detection
/// probability an undetected trajectory is never updated, so these marginals
/// equal the one-step predictions.
#[derive(Debug, Clone)]
pub struct PoissonComponent {
    pub log_weight: f64,
    pub birth: usize,
    pub filtered: Vec<GaussianMoments>,
}

impl PoissonComponent {
    pub fn end(&self) -> usize {
        self.birth + self.filtered.len() - 1
    }

    pub fn latest(&self) -> &GaussianMoments {
        self.filtered.last().expect("component has at least one marginal")
    }
}

/// Poisson intensity over undetected trajectories at one scan.
#[derive(Debug, Clone, Default)]
pub struct PoissonIntensity {
    pub step: usize,
    pub components: Vec<PoissonComponent>,
}

/// log(sum(exp(x))) with an empty sum mapping to -inf.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalizes log weights, returning linear weights summing to one and the
/// log of the total mass. Large offsets are handled by subtracting the maximum.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<(Vec<f64>, f64)> {
    if log_weights.is_empty() {
        return Err(Error::EmptyInput("normalize_log_weights"));
    }
    let total = log_sum_exp(log_weights);
    if total == f64::NEG_INFINITY {
        return Err(Error::DegenerateMixture);
    }
    Ok((log_weights.iter().map(|w| (w - total).exp()).collect(), total))
}

/// Removes components whose normalized weight is strictly below `threshold` and
/// renormalizes the survivors. A weight exactly at the threshold is kept. The
/// max-weight component always survives, so the mixture never empties. Returns
/// the number of removed components.
pub fn prune_components(
    components: &mut Vec<TrajectoryComponent>,
    threshold: f64,
) -> Result<usize> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::InvalidThreshold(threshold));
    }
    if components.is_empty() {
        return Err(Error::EmptyInput("prune_components"));
    }
    let logs: Vec<f64> = components.iter().map(|c| c.log_weight).collect();
    let (weights, _) = normalize_log_weights(&logs)?;
    let max_idx = weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty");
    let before = components.len();
    let mut idx = 0;
    components.retain(|_| {
        let keep = weights[idx] >= threshold || idx == max_idx;
        idx += 1;
        keep
    });
    let removed = before - components.len();
    if removed > 0 {
        let kept: Vec<f64> = components.iter().map(|c| c.log_weight).collect();
        let total = log_sum_exp(&kept);
        for c in components.iter_mut() {
            c.log_weight -= total;
        }
    }
    Ok(removed)
}
