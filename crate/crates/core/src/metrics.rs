//! Trajectory set distance with localization, missed, false, and switch parts.
//!
//! The distance between a ground-truth set and an estimated set of trajectories
//! is the optimum of a linear program over per-scan soft assignments between
//! the two sets. Each scan contributes capped position errors for matched
//! alive pairs and half the cutoff cost for unmatched alive steps on either
//! side; consecutive scans contribute half the switch penalty per unit of
//! assignment change. Keeping a pair assigned while one member is dead costs
//! the same as leaving it unmatched, so track birth and death never generate
//! switch charges at the optimum.
//!
//! Arguments are put into a canonical order before solving, which makes the
//! returned distance exactly symmetric; the missed and false parts are swapped
//! back when the order was flipped.

use std::cmp::Ordering;
use std::collections::HashMap;

use minilp::{ComparisonOp, OptimizationDirection, Problem as Lp, Variable};
use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::estimator::TrajectoryEstimate;
use crate::types::MeasKey;

/// Metric parameters: order, cutoff distance, and switch penalty.
#[derive(Debug, Clone, Copy)]
pub struct GospaConfig {
    pub p: f64,
    pub c: f64,
    pub gamma: f64,
}

impl GospaConfig {
    pub fn new(p: f64, c: f64, gamma: f64) -> Result<Self> {
        if !(p >= 1.0) {
            return Err(Error::InvalidParameter(format!("metric order {p}")));
        }
        if !(c > 0.0) {
            return Err(Error::InvalidParameter(format!("metric cutoff {c}")));
        }
        if !(gamma > 0.0) {
            return Err(Error::InvalidParameter(format!("switch penalty {gamma}")));
        }
        Ok(GospaConfig { p, c, gamma })
    }

    /// Order 1, cutoff 10 m, switch penalty 2: the benchmark configuration.
    pub fn benchmark() -> Self {
        GospaConfig {
            p: 1.0,
            c: 10.0,
            gamma: 2.0,
        }
    }
}

/// One trajectory reduced to what the metric needs: birth scan and per-scan
/// planar positions.
#[derive(Debug, Clone)]
pub struct MetricTrack {
    pub birth: usize,
    pub positions: Vec<Vector2<f64>>,
}

impl MetricTrack {
    pub fn from_estimate(est: &TrajectoryEstimate) -> Self {
        MetricTrack {
            birth: est.birth,
            positions: est
                .states
                .iter()
                .map(|s| Vector2::new(s.mean[0], s.mean[2]))
                .collect(),
        }
    }

    /// Last scan the trajectory exists at.
    pub fn end(&self) -> usize {
        self.birth + self.positions.len() - 1
    }

    pub fn pos_at(&self, t: usize) -> Option<&Vector2<f64>> {
        if t < self.birth {
            return None;
        }
        self.positions.get(t - self.birth)
    }
}

/// Cost components attributed to one scan.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScanCosts {
    pub localization: f64,
    pub missed: f64,
    pub false_: f64,
    pub switch_: f64,
}

/// Metric value, its decomposition, the per-scan attribution, and the matching
/// read off the optimal assignment (pairs with weight above one half).
#[derive(Debug, Clone)]
pub struct GospaResult {
    pub total: f64,
    pub localization: f64,
    pub missed: f64,
    pub false_: f64,
    pub switch_: f64,
    pub per_time: Vec<ScanCosts>,
    /// Per scan: matched (truth index, estimate index) pairs, both alive.
    pub matching: Vec<Vec<(usize, usize)>>,
}

fn cmp_f64(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Deterministic total order on track sets, used to canonicalize the argument
/// order before solving so the metric is exactly symmetric.
fn cmp_sets(a: &[MetricTrack], b: &[MetricTrack]) -> Ordering {
    a.len()
        .cmp(&b.len())
        .then_with(|| {
            let sa: usize = a.iter().map(|t| t.positions.len()).sum();
            let sb: usize = b.iter().map(|t| t.positions.len()).sum();
            sa.cmp(&sb)
        })
        .then_with(|| {
            for (x, y) in a.iter().zip(b) {
                let o = x
                    .birth
                    .cmp(&y.birth)
                    .then(x.positions.len().cmp(&y.positions.len()));
                if o != Ordering::Equal {
                    return o;
                }
            }
            Ordering::Equal
        })
        .then_with(|| {
            for (x, y) in a.iter().zip(b) {
                for (p, q) in x.positions.iter().zip(&y.positions) {
                    let o = cmp_f64(p.x, q.x).then_with(|| cmp_f64(p.y, q.y));
                    if o != Ordering::Equal {
                        return o;
                    }
                }
            }
            Ordering::Equal
        })
}

/// Metric between two sets of trajectories with its decomposition.
pub fn trajectory_gospa(
    truth: &[MetricTrack],
    est: &[MetricTrack],
    cfg: &GospaConfig,
) -> Result<GospaResult> {
    if cmp_sets(truth, est) == Ordering::Greater {
        let mut r = solve(est, truth, cfg)?;
        std::mem::swap(&mut r.missed, &mut r.false_);
        for s in &mut r.per_time {
            std::mem::swap(&mut s.missed, &mut s.false_);
        }
        for scan in &mut r.matching {
            for pair in scan.iter_mut() {
                *pair = (pair.1, pair.0);
            }
            scan.sort_unstable();
        }
        return Ok(r);
    }
    solve(truth, est, cfg)
}

fn solve(truth: &[MetricTrack], est: &[MetricTrack], cfg: &GospaConfig) -> Result<GospaResult> {
    let scans = truth
        .iter()
        .chain(est)
        .map(|t| t.end() + 1)
        .max()
        .unwrap_or(0);
    let nx = truth.len();
    let ny = est.len();
    let half_cutoff = cfg.c.powf(cfg.p) / 2.0;
    let half_switch = cfg.gamma.powf(cfg.p) / 2.0;
    if scans == 0 {
        return Ok(GospaResult {
            total: 0.0,
            localization: 0.0,
            missed: 0.0,
            false_: 0.0,
            switch_: 0.0,
            per_time: Vec::new(),
            matching: Vec::new(),
        });
    }

    let mut lp = Lp::new(OptimizationDirection::Minimize);
    // Pair, miss, and false assignment weights for every scan; dead tracks
    // keep their rows and columns with zero-cost entries.
    let mut w: Vec<Vec<Vec<Variable>>> = Vec::with_capacity(scans);
    let mut miss: Vec<Vec<Variable>> = Vec::with_capacity(scans);
    let mut fals: Vec<Vec<Variable>> = Vec::with_capacity(scans);
    for t in 0..scans {
        let mut wt = Vec::with_capacity(nx);
        let mut mt = Vec::with_capacity(nx);
        for i in 0..nx {
            let xt = truth[i].pos_at(t);
            let mut row = Vec::with_capacity(ny);
            for target in est {
                let cost = match (xt, target.pos_at(t)) {
                    (Some(x), Some(y)) => ((x - y).norm()).min(cfg.c).powf(cfg.p),
                    (None, None) => 0.0,
                    _ => half_cutoff,
                };
                row.push(lp.add_var(cost, (0.0, 1.0)));
            }
            wt.push(row);
            let cost = if xt.is_some() { half_cutoff } else { 0.0 };
            mt.push(lp.add_var(cost, (0.0, 1.0)));
        }
        w.push(wt);
        miss.push(mt);
        let mut ft = Vec::with_capacity(ny);
        for target in est {
            let cost = if target.pos_at(t).is_some() {
                half_cutoff
            } else {
                0.0
            };
            ft.push(lp.add_var(cost, (0.0, 1.0)));
        }
        fals.push(ft);
        for i in 0..nx {
            let mut row: Vec<(Variable, f64)> = (0..ny).map(|j| (w[t][i][j], 1.0)).collect();
            row.push((miss[t][i], 1.0));
            lp.add_constraint(row, ComparisonOp::Eq, 1.0);
        }
        for j in 0..ny {
            let mut col: Vec<(Variable, f64)> = (0..nx).map(|i| (w[t][i][j], 1.0)).collect();
            col.push((fals[t][j], 1.0));
            lp.add_constraint(col, ComparisonOp::Eq, 1.0);
        }
    }
    // Absolute assignment changes between consecutive scans.
    for t in 0..scans.saturating_sub(1) {
        for i in 0..nx {
            for j in 0..ny {
                let e = lp.add_var(half_switch, (0.0, 1.0));
                lp.add_constraint(
                    [(e, 1.0), (w[t + 1][i][j], -1.0), (w[t][i][j], 1.0)],
                    ComparisonOp::Ge,
                    0.0,
                );
                lp.add_constraint(
                    [(e, 1.0), (w[t + 1][i][j], 1.0), (w[t][i][j], -1.0)],
                    ComparisonOp::Ge,
                    0.0,
                );
            }
        }
    }
    let sol = if nx == 0 && ny == 0 {
        None
    } else {
        Some(lp.solve().map_err(|e| Error::LinearProgram(e.to_string()))?)
    };
    let value = |v: Variable| sol.as_ref().map_or(0.0, |s| s[v]);

    let mut per_time = vec![ScanCosts::default(); scans];
    let mut matching = vec![Vec::new(); scans];
    for t in 0..scans {
        let pt = &mut per_time[t];
        for i in 0..nx {
            let xt = truth[i].pos_at(t);
            for j in 0..ny {
                let yv = value(w[t][i][j]);
                match (xt, est[j].pos_at(t)) {
                    (Some(x), Some(y)) => {
                        pt.localization += yv * (x - y).norm().min(cfg.c).powf(cfg.p);
                        if yv > 0.5 {
                            matching[t].push((i, j));
                        }
                    }
                    (Some(_), None) => pt.missed += yv * half_cutoff,
                    (None, Some(_)) => pt.false_ += yv * half_cutoff,
                    (None, None) => {}
                }
            }
            if xt.is_some() {
                pt.missed += value(miss[t][i]) * half_cutoff;
            }
        }
        for j in 0..ny {
            if est[j].pos_at(t).is_some() {
                pt.false_ += value(fals[t][j]) * half_cutoff;
            }
        }
        if t > 0 {
            for i in 0..nx {
                for j in 0..ny {
                    let delta = (value(w[t][i][j]) - value(w[t - 1][i][j])).abs();
                    pt.switch_ += half_switch * delta;
                }
            }
        }
    }
    let mut result = GospaResult {
        total: 0.0,
        localization: 0.0,
        missed: 0.0,
        false_: 0.0,
        switch_: 0.0,
        per_time,
        matching,
    };
    for s in &result.per_time {
        result.localization += s.localization;
        result.missed += s.missed;
        result.false_ += s.false_;
        result.switch_ += s.switch_;
    }
    result.total = result.localization + result.missed + result.false_ + result.switch_;
    Ok(result)
}

/// Counts scans at which a matched estimate contains the measurement the
/// matched truth trajectory generated. `origins` holds, per truth track and
/// per step, the measurement the track generated at that step, if any.
pub fn correct_association_count(
    truth: &[MetricTrack],
    origins: &[Vec<Option<MeasKey>>],
    est_histories: &[Vec<MeasKey>],
    matching: &[Vec<(usize, usize)>],
) -> Result<usize> {
    if origins.len() != truth.len() {
        return Err(Error::LengthMismatch(format!(
            "{} origin rows for {} truth tracks",
            origins.len(),
            truth.len()
        )));
    }
    for (tr, or) in truth.iter().zip(origins) {
        if or.len() != tr.positions.len() {
            return Err(Error::LengthMismatch(format!(
                "{} origin labels for a track of {} steps",
                or.len(),
                tr.positions.len()
            )));
        }
    }
    let mut count = 0;
    for (t, pairs) in matching.iter().enumerate() {
        for &(i, j) in pairs {
            let Some(step) = t.checked_sub(truth[i].birth) else {
                continue;
            };
            let Some(Some(key)) = origins[i].get(step) else {
                continue;
            };
            if est_histories[j].contains(key) {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Number of object-generated measurements grouped into the track paired with
/// their object, under a greedy one-to-one object/track pairing by overlap.
///
/// This is the cheap convergence diagnostic traced during sampling: it needs
/// only the origin labels and the tracks' measurement histories, no metric
/// solve. At the true association it equals the total number of detections.
pub fn correct_groupings(origins: &[Vec<Option<MeasKey>>], histories: &[Vec<MeasKey>]) -> usize {
    let mut owner: HashMap<MeasKey, usize> = HashMap::new();
    for (o, row) in origins.iter().enumerate() {
        for key in row.iter().flatten() {
            owner.insert(*key, o);
        }
    }
    // overlap[(object, track)] = number of that object's measurements in that track
    let mut overlap: HashMap<(usize, usize), usize> = HashMap::new();
    for (i, hist) in histories.iter().enumerate() {
        for key in hist {
            if let Some(&o) = owner.get(key) {
                *overlap.entry((o, i)).or_insert(0) += 1;
            }
        }
    }
    let mut triples: Vec<(usize, usize, usize)> =
        overlap.into_iter().map(|((o, i), c)| (c, o, i)).collect();
    triples.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut object_used = vec![false; origins.len()];
    let mut track_used = vec![false; histories.len()];
    let mut count = 0;
    for (c, o, i) in triples {
        if !object_used[o] && !track_used[i] {
            object_used[o] = true;
            track_used[i] = true;
            count += c;
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(birth: usize, steps: usize, x0: f64, y: f64, vx: f64) -> MetricTrack {
        MetricTrack {
            birth,
            positions: (0..steps)
                .map(|k| Vector2::new(x0 + vx * k as f64, y))
                .collect(),
        }
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let cfg = GospaConfig::benchmark();
        let a = vec![straight(0, 10, 0.0, 5.0, 1.0), straight(3, 6, -20.0, -5.0, 2.0)];
        let r = trajectory_gospa(&a, &a, &cfg).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(r.switch_, 0.0);
    }

    #[test]
    fn empty_estimate_costs_half_cutoff_per_truth_step() {
        let cfg = GospaConfig::benchmark();
        let truth = vec![straight(2, 7, 0.0, 0.0, 1.0)];
        let r = trajectory_gospa(&truth, &[], &cfg).unwrap();
        assert_eq!(r.total, 35.0);
        assert_eq!(r.missed, 35.0);
        assert_eq!(r.localization, 0.0);
        assert_eq!(r.false_, 0.0);
        assert_eq!(r.switch_, 0.0);
        // And the mirrored call charges it all as false tracks.
        let r = trajectory_gospa(&[], &truth, &cfg).unwrap();
        assert_eq!(r.total, 35.0);
        assert_eq!(r.false_, 35.0);
        assert_eq!(r.missed, 0.0);
        let r = trajectory_gospa(&[], &[], &cfg).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn distance_is_exactly_symmetric() {
        let cfg = GospaConfig::benchmark();
        let a = vec![straight(0, 12, 0.0, 3.0, 1.0), straight(4, 5, 8.0, -3.0, -1.0)];
        let b = vec![
            straight(0, 12, 0.4, 2.6, 1.0),
            straight(5, 4, 7.0, -3.3, -1.0),
            straight(9, 3, 30.0, 30.0, 0.0),
        ];
        let ab = trajectory_gospa(&a, &b, &cfg).unwrap();
        let ba = trajectory_gospa(&b, &a, &cfg).unwrap();
        assert_eq!(ab.total, ba.total);
        assert_eq!(ab.localization, ba.localization);
        assert_eq!(ab.missed, ba.false_);
        assert_eq!(ab.false_, ba.missed);
        assert_eq!(ab.switch_, ba.switch_);
        assert!(ab.total > 0.0);
        for (x, y) in ab.matching.iter().zip(&ba.matching) {
            let flipped: Vec<(usize, usize)> = y.iter().map(|&(i, j)| (j, i)).collect();
            assert_eq!(*x, flipped);
        }
    }

    #[test]
    fn decomposition_sums_to_total() {
        let cfg = GospaConfig::benchmark();
        let a = vec![straight(0, 12, 0.0, 3.0, 1.0), straight(4, 5, 8.0, -3.0, -1.0)];
        let b = vec![straight(1, 10, 0.5, 3.2, 1.0), straight(4, 7, 9.0, -2.5, -1.0)];
        let r = trajectory_gospa(&a, &b, &cfg).unwrap();
        let sum = r.localization + r.missed + r.false_ + r.switch_;
        assert!((r.total - sum).abs() < 1e-12);
        let mut per: ScanCosts = ScanCosts::default();
        for s in &r.per_time {
            per.localization += s.localization;
            per.missed += s.missed;
            per.false_ += s.false_;
            per.switch_ += s.switch_;
        }
        assert!((per.localization - r.localization).abs() < 1e-12);
        assert!((per.switch_ - r.switch_).abs() < 1e-12);
    }

    #[test]
    fn small_offsets_accumulate_as_localization() {
        let cfg = GospaConfig::benchmark();
        let truth = vec![straight(0, 9, 0.0, 0.0, 1.0)];
        let est = vec![straight(0, 9, 0.0, 3.0, 1.0)];
        let r = trajectory_gospa(&truth, &est, &cfg).unwrap();
        assert!((r.total - 27.0).abs() < 1e-9);
        assert!((r.localization - 27.0).abs() < 1e-9);
        // Far beyond the cutoff the match saturates at the cutoff cost.
        let est = vec![straight(0, 9, 0.0, 50.0, 1.0)];
        let r = trajectory_gospa(&truth, &est, &cfg).unwrap();
        assert!((r.total - 90.0).abs() < 1e-9);
    }

    #[test]
    fn identity_swap_is_charged_as_switches() {
        let cfg = GospaConfig::benchmark();
        let truth = vec![straight(0, 10, 0.0, 40.0, 1.0), straight(0, 10, 0.0, -40.0, 1.0)];
        // The estimates follow the truth but trade identities at scan 5.
        let mut e1 = straight(0, 10, 0.0, 40.0, 1.0);
        let mut e2 = straight(0, 10, 0.0, -40.0, 1.0);
        for k in 5..10 {
            let tmp = e1.positions[k];
            e1.positions[k] = e2.positions[k];
            e2.positions[k] = tmp;
        }
        let r = trajectory_gospa(&truth, &[e1, e2], &cfg).unwrap();
        assert!((r.total - 4.0).abs() < 1e-9, "total {}", r.total);
        assert!((r.switch_ - 4.0).abs() < 1e-9);
        assert_eq!(r.localization, 0.0);
        // The matching crosses over from scan 5 on.
        assert_eq!(r.matching[4], vec![(0, 0), (1, 1)]);
        assert_eq!(r.matching[5], vec![(0, 1), (1, 0)]);
        assert!(r.per_time[5].switch_ > 0.0);
    }

    #[test]
    fn never_exceeds_the_no_assignment_bound() {
        let cfg = GospaConfig::benchmark();
        let a = vec![straight(0, 12, 0.0, 3.0, 1.0), straight(4, 5, 8.0, -3.0, -1.0)];
        let b = vec![straight(1, 10, 4.0, 9.0, -1.0)];
        let r = trajectory_gospa(&a, &b, &cfg).unwrap();
        let scans = 12;
        let mut bound = 0.0;
        for t in 0..scans {
            let alive_a = a.iter().filter(|x| x.pos_at(t).is_some()).count();
            let alive_b = b.iter().filter(|x| x.pos_at(t).is_some()).count();
            bound += (alive_a + alive_b) as f64 * 5.0;
        }
        assert!(r.total <= bound + 1e-9);
    }

    #[test]
    fn association_counting_follows_the_matching() {
        let truth = vec![straight(0, 4, 0.0, 10.0, 1.0), straight(0, 4, 0.0, -10.0, 1.0)];
        let origins = vec![
            vec![Some((0u16, 0u16)), Some((1, 0)), None, Some((3, 0))],
            vec![Some((0, 1)), Some((1, 1)), Some((2, 1)), Some((3, 1))],
        ];
        let est = vec![straight(0, 4, 0.0, 10.0, 1.0), straight(0, 4, 0.0, -10.0, 1.0)];
        let hists = vec![
            vec![(0u16, 0u16), (1, 0), (3, 0)],
            vec![(0u16, 1u16), (1, 1), (2, 1), (3, 1)],
        ];
        let cfg = GospaConfig::benchmark();
        let r = trajectory_gospa(&truth, &est, &cfg).unwrap();
        let n = correct_association_count(&truth, &origins, &hists, &r.matching).unwrap();
        // Every generated measurement is in the matched estimate's history.
        assert_eq!(n, 7);

        // Swapping the two histories breaks every association.
        let swapped = vec![hists[1].clone(), hists[0].clone()];
        let n = correct_association_count(&truth, &origins, &swapped, &r.matching).unwrap();
        assert_eq!(n, 0);

        // Origin labels must align with the truth steps.
        let bad = vec![origins[0][..2].to_vec(), origins[1].clone()];
        assert!(correct_association_count(&truth, &bad, &hists, &r.matching).is_err());

        assert_eq!(
            correct_association_count(&truth, &origins, &[], &[]).unwrap(),
            0
        );
    }

    #[test]
    fn grouping_count_rewards_pure_tracks_and_penalizes_merges() {
        let origins = vec![
            vec![Some((0u16, 0u16)), Some((1, 0)), None, Some((3, 0))],
            vec![Some((0, 1)), Some((1, 1)), Some((2, 1)), Some((3, 1))],
        ];
        // Perfect grouping recovers every one of the seven detections.
        let perfect = vec![
            vec![(0u16, 0u16), (1, 0), (3, 0)],
            vec![(0u16, 1u16), (1, 1), (2, 1), (3, 1)],
        ];
        assert_eq!(correct_groupings(&origins, &perfect), 7);

        // Splitting the second object across two tracks loses the shorter part.
        let split = vec![
            perfect[0].clone(),
            vec![(0u16, 1u16), (1, 1)],
            vec![(2u16, 1u16), (3, 1)],
        ];
        assert_eq!(correct_groupings(&origins, &split), 5);

        // Merging both objects into one track serves only one of them; the
        // other object has no remaining track to pair with.
        let merged: Vec<Vec<MeasKey>> =
            vec![perfect[0].iter().chain(&perfect[1]).copied().collect()];
        assert_eq!(correct_groupings(&origins, &merged), 4);

        // Clutter keys in a history contribute nothing.
        let with_clutter = vec![
            perfect[0].iter().copied().chain([(2u16, 9u16)]).collect(),
            perfect[1].clone(),
        ];
        assert_eq!(correct_groupings(&origins, &with_clutter), 7);

        assert_eq!(correct_groupings(&origins, &[]), 0);
    }
}
