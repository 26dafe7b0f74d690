//! Sample bookkeeping shared by both samplers.

use std::collections::HashMap;

use crate::assoc::Theta;

/// Best association seen so far.
#[derive(Debug, Clone)]
pub struct BestSample {
    pub theta: Theta,
    pub log_pi: f64,
    /// 1-based index of the recorded sample that first reached this weight.
    pub first_seen: u64,
}

/// Accumulates visited associations: per-digest visit counts plus the highest
/// weight association. Ties keep the first visit, so reruns with the same seed
/// reproduce the same pick.
#[derive(Debug, Default)]
pub struct SampleStore {
    counts: HashMap<u64, u64>,
    best: Option<BestSample>,
    recorded: u64,
}

impl SampleStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, theta: &Theta, log_pi: f64) {
        self.recorded += 1;
        *self.counts.entry(theta.digest()).or_insert(0) += 1;
        let better = match &self.best {
            None => true,
            Some(b) => log_pi > b.log_pi,
        };
        if better {
            self.best = Some(BestSample {
                theta: theta.clone(),
                log_pi,
                first_seen: self.recorded,
            });
        }
    }

    pub fn recorded(&self) -> u64 {
        self.recorded
    }

    pub fn best(&self) -> Option<&BestSample> {
        self.best.as_ref()
    }

    pub fn best_log_pi(&self) -> f64 {
        self.best.as_ref().map_or(f64::NEG_INFINITY, |b| b.log_pi)
    }

    /// Visit counts keyed by association digest.
    pub fn counts(&self) -> &HashMap<u64, u64> {
        &self.counts
    }

    /// Fraction of recorded samples on each visited association.
    pub fn empirical(&self) -> HashMap<u64, f64> {
        let total = self.recorded.max(1) as f64;
        self.counts
            .iter()
            .map(|(&d, &c)| (d, c as f64 / total))
            .collect()
    }
}

/// Total variation distance between an empirical distribution and a reference
/// distribution, both keyed by association digest.
pub fn tv_distance(empirical: &HashMap<u64, f64>, reference: &HashMap<u64, f64>) -> f64 {
    let mut sum = 0.0;
    for (d, p) in empirical {
        sum += (p - reference.get(d).copied().unwrap_or(0.0)).abs();
    }
    for (d, q) in reference {
        if !empirical.contains_key(d) {
            sum += q;
        }
    }
    0.5 * sum
}
