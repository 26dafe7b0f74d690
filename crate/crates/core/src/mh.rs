//! Metropolis-Hastings sampling over associations.
//!
//! Each iteration draws one of four move types and proposes a local change to
//! the association, accepted with the exact Hastings ratio so the chain leaves
//! the posterior invariant:
//!
//! * update: pick a track with at least two detections and one scan inside its
//!   life window, then redraw that block from its conditional. The conditional
//!   factors cancel against the posterior ratio, leaving only the window-length
//!   correction.
//! * merge: absorb one track into an earlier one whose detections all precede
//!   it; the reverse is a split at the absorbed track's first detection.
//! * split: cut a track's detection sequence at a random position; the tail
//!   becomes a track of its own, started by its first measurement.
//! * switch: swap the assignments of two tracks from a random scan onward. The
//!   swap preserves both the detection union and the proposal window, so only
//!   the posterior ratio remains.
//!
//! Every proposal is built without touching the state; the edit list is applied
//! only on acceptance. Infeasible reverses get ratio -inf and are never
//! accepted.

use rand::Rng;

use crate::assoc::Theta;
use crate::gibbs::{block_conditional, sample_from_log_scores};
use crate::recursion::{final_info, final_info_probe, state_after, Problem, WeightCache};
use crate::store::SampleStore;

/// Move type probabilities. The presets differ in how much probability the
/// switch move gets relative to the update move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MovePreset {
    /// Switch-heavy: update 1/6, merge 1/6, split 1/6, switch 1/2.
    High,
    /// Balanced: update 1/3, merge 1/6, split 1/6, switch 1/3.
    Medium,
    /// Update-heavy: update 1/2, merge 1/6, split 1/6, switch 1/6.
    Low,
}

impl MovePreset {
    /// Probabilities in move order: update, merge, split, switch.
    pub fn probs(self) -> [f64; 4] {
        match self {
            MovePreset::High => [1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.5],
            MovePreset::Medium => [1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0],
            MovePreset::Low => [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveKind {
    Update,
    Merge,
    Split,
    Switch,
}

/// A constructed proposal: the edits realizing it, the exact posterior change,
/// and the log Hastings ratio (posterior change plus proposal correction).
#[derive(Debug, Clone)]
pub struct Proposal {
    pub kind: MoveKind,
    /// (scan, leading row, value) edits, applied in order on acceptance.
    pub edits: Vec<(usize, usize, u16)>,
    pub delta_log_pi: f64,
    pub log_ratio: f64,
}

fn endpoints(theta: &Theta, slot: u32) -> (u16, u16) {
    let h = theta.history(slot);
    (h[0].0, h[h.len() - 1].0)
}

fn compatible(a: (u16, u16), b: (u16, u16)) -> bool {
    a.1 < b.0 || b.1 < a.0
}

/// Redraws one in-window block of a confirmed track from its conditional.
pub fn propose_update<R: Rng>(
    problem: &Problem,
    theta: &Theta,
    cache: &mut WeightCache,
    rng: &mut R,
) -> Option<Proposal> {
    let confirmed = theta.confirmed_slots();
    if confirmed.is_empty() {
        return None;
    }
    let slot = confirmed[rng.random_range(0..confirmed.len())];
    let hist = theta.history(slot).to_vec();
    let t_first = hist[0].0 as usize;
    let t_end = final_info(problem, &hist, cache).t_end as usize;
    debug_assert!(t_end > t_first);
    let window = t_end - t_first;
    let t = t_first + 1 + rng.random_range(0..window);
    let i = slot as usize;
    let Some(cond) = block_conditional(problem, theta, t, i, cache) else {
        // Support is the lone current zero; the proposal is the identity.
        return Some(Proposal {
            kind: MoveKind::Update,
            edits: Vec::new(),
            delta_log_pi: 0.0,
            log_ratio: 0.0,
        });
    };
    let cur = theta.value(t, i);
    let pick = sample_from_log_scores(&cond.log_scores, rng)?;
    let v = cond.values[pick];
    if v == cur {
        return Some(Proposal {
            kind: MoveKind::Update,
            edits: Vec::new(),
            delta_log_pi: 0.0,
            log_ratio: 0.0,
        });
    }
    let old = cond.index_of(cur).expect("current value in support");
    let delta_log_pi = cond.log_scores[pick] - cond.log_scores[old];
    let new_hist = theta.history_with(slot, t, v);
    // The reverse move must be able to pick the same track and scan.
    let log_ratio = if new_hist.len() < 2 {
        f64::NEG_INFINITY
    } else {
        let t_end_new = final_info_probe(problem, &new_hist, cache).t_end as usize;
        if t > t_end_new {
            f64::NEG_INFINITY
        } else {
            // Conditional factors cancel; the track sets are equal in size.
            (window as f64).ln() - ((t_end_new - t_first) as f64).ln()
        }
    };
    Some(Proposal {
        kind: MoveKind::Update,
        edits: vec![(t, i, v)],
        delta_log_pi,
        log_ratio,
    })
}

/// Swaps the assignments of two confirmed tracks from a random scan onward.
pub fn propose_switch<R: Rng>(
    problem: &Problem,
    theta: &Theta,
    cache: &mut WeightCache,
    rng: &mut R,
) -> Option<Proposal> {
    let confirmed = theta.confirmed_slots();
    if confirmed.len() < 2 {
        return None;
    }
    let idx1 = rng.random_range(0..confirmed.len());
    let idx2 = {
        let r = rng.random_range(0..confirmed.len() - 1);
        if r >= idx1 {
            r + 1
        } else {
            r
        }
    };
    let (s1, s2) = (confirmed[idx1], confirmed[idx2]);
    let (f1, l1) = endpoints(theta, s1);
    let (f2, l2) = endpoints(theta, s2);
    let f = f1.max(f2) as usize;
    let l = l1.max(l2) as usize;
    debug_assert!(l > f, "confirmed tracks span more than one scan");
    let t = f + 1 + rng.random_range(0..l - f);

    let h1 = theta.history(s1);
    let h2 = theta.history(s2);
    let c1 = h1.partition_point(|key| (key.0 as usize) < t);
    let c2 = h2.partition_point(|key| (key.0 as usize) < t);
    let mut n1 = h1[..c1].to_vec();
    n1.extend_from_slice(&h2[c2..]);
    let mut n2 = h2[..c2].to_vec();
    n2.extend_from_slice(&h1[c1..]);
    // Both tracks must stay confirmed or the reverse pair cannot be drawn;
    // the swap preserves first detections and the union of lasts, so the
    // reverse window and pair probability match the forward ones exactly.
    let log_ratio;
    let delta_log_pi;
    if n1.len() < 2 || n2.len() < 2 {
        log_ratio = f64::NEG_INFINITY;
        delta_log_pi = f64::NEG_INFINITY;
    } else {
        delta_log_pi = final_info_probe(problem, &n1, cache).log_weight
            + final_info_probe(problem, &n2, cache).log_weight
            - final_info(problem, h1, cache).log_weight
            - final_info(problem, h2, cache).log_weight;
        log_ratio = delta_log_pi;
    }
    let mut edits = Vec::new();
    if log_ratio > f64::NEG_INFINITY {
        for s in t..problem.batch.num_scans() {
            let a = theta.value(s, s1 as usize);
            let b = theta.value(s, s2 as usize);
            if a == b {
                continue;
            }
            edits.push((s, s2 as usize, 0));
            edits.push((s, s1 as usize, b));
            edits.push((s, s2 as usize, a));
        }
    }
    Some(Proposal {
        kind: MoveKind::Switch,
        edits,
        delta_log_pi,
        log_ratio,
    })
}

/// Counts merge partners of `x` among `universe`, with endpoint overrides so
/// the count can be evaluated on a virtual post-split state.
fn partner_count(
    universe: &[u32],
    extra: Option<u32>,
    x: u32,
    endp: &dyn Fn(u32) -> (u16, u16),
) -> usize {
    let ex = endp(x);
    universe
        .iter()
        .copied()
        .chain(extra)
        .filter(|&y| y != x && compatible(ex, endp(y)))
        .count()
}

/// Absorbs a later track into an earlier one whose detections all precede it.
pub fn propose_merge<R: Rng>(
    problem: &Problem,
    theta: &Theta,
    cache: &mut WeightCache,
    rng: &mut R,
) -> Option<Proposal> {
    let detected = theta.detected_slots();
    if detected.len() < 2 {
        return None;
    }
    let endp = |s: u32| endpoints(theta, s);
    let i1 = detected[rng.random_range(0..detected.len())];
    let partners: Vec<u32> = detected
        .iter()
        .copied()
        .filter(|&y| y != i1 && compatible(endp(i1), endp(y)))
        .collect();
    if partners.is_empty() {
        return None;
    }
    let i2 = partners[rng.random_range(0..partners.len())];
    let (a, b) = if endp(i1).1 < endp(i2).0 { (i1, i2) } else { (i2, i1) };
    let ha = theta.history(a);
    let hb = theta.history(b);
    let mut merged = ha.to_vec();
    merged.extend_from_slice(hb);
    let delta_log_pi = final_info_probe(problem, &merged, cache).log_weight
        - final_info(problem, ha, cache).log_weight
        - final_info(problem, hb, cache).log_weight;

    // Forward: either order of the unordered pair draw lands on this merge.
    let p1 = partner_count(detected, None, i1, &endp);
    let p2 = partner_count(detected, None, i2, &endp);
    let log_q_fwd = (1.0 / detected.len() as f64 * (1.0 / p1 as f64 + 1.0 / p2 as f64)).ln();
    // Reverse: a split of the merged track at the absorbed track's first
    // detection, one position out of len-1, one track out of the confirmed set.
    let confirmed_after = theta.confirmed_slots().len() + usize::from(ha.len() == 1)
        - usize::from(hb.len() >= 2);
    let log_q_rev =
        -(confirmed_after as f64).ln() - ((merged.len() - 1) as f64).ln();

    let mut edits = Vec::new();
    for &(k, _) in &hb[1..] {
        edits.push((k as usize, b as usize, 0));
    }
    for &(k, j) in hb {
        edits.push((k as usize, a as usize, j + 1));
    }
    Some(Proposal {
        kind: MoveKind::Merge,
        edits,
        delta_log_pi,
        log_ratio: delta_log_pi + log_q_rev - log_q_fwd,
    })
}

/// Cuts a confirmed track at a random position; the tail becomes its own track.
pub fn propose_split<R: Rng>(
    problem: &Problem,
    theta: &Theta,
    cache: &mut WeightCache,
    rng: &mut R,
) -> Option<Proposal> {
    let confirmed = theta.confirmed_slots();
    if confirmed.is_empty() {
        return None;
    }
    let i = confirmed[rng.random_range(0..confirmed.len())];
    let hist = theta.history(i).to_vec();
    let p = 1 + rng.random_range(0..hist.len() - 1);
    let prefix = &hist[..p];
    let tail = &hist[p..];
    let b = theta.slot_of(tail[0]);
    let delta_log_pi = final_info_probe(problem, prefix, cache).log_weight
        + final_info_probe(problem, tail, cache).log_weight
        - final_info(problem, &hist, cache).log_weight;

    let log_q_fwd = -(confirmed.len() as f64).ln() - ((hist.len() - 1) as f64).ln();
    // Reverse: a merge drawn on the post-split state, where the prefix keeps
    // slot i with a shortened last scan and the tail lives in slot b.
    let detected = theta.detected_slots();
    let endp_after = |s: u32| -> (u16, u16) {
        if s == i {
            (prefix[0].0, prefix[prefix.len() - 1].0)
        } else if s == b {
            (tail[0].0, tail[tail.len() - 1].0)
        } else {
            endpoints(theta, s)
        }
    };
    let d_after = detected.len() + 1;
    let pi = partner_count(detected, Some(b), i, &endp_after);
    let pb = partner_count(detected, Some(b), b, &endp_after);
    let log_q_rev = (1.0 / d_after as f64 * (1.0 / pi as f64 + 1.0 / pb as f64)).ln();

    let mut edits = Vec::new();
    for &(k, _) in tail {
        edits.push((k as usize, i as usize, 0));
    }
    for &(k, j) in &tail[1..] {
        edits.push((k as usize, b as usize, j + 1));
    }
    Some(Proposal {
        kind: MoveKind::Split,
        edits,
        delta_log_pi,
        log_ratio: delta_log_pi + log_q_rev - log_q_fwd,
    })
}

/// Per-move proposal and acceptance counters, in move order.
#[derive(Debug, Clone, Copy, Default)]
pub struct MoveStats {
    pub proposed: [u64; 4],
    pub accepted: [u64; 4],
}

/// One Metropolis-Hastings chain.
pub struct Mh<'a> {
    pub problem: &'a Problem,
    pub theta: Theta,
    pub cache: WeightCache,
    pub log_pi: f64,
    pub stats: MoveStats,
    probs: [f64; 4],
    iterations_done: u64,
}

const RESYNC_EVERY: u64 = 65536;

impl<'a> Mh<'a> {
    pub fn new(problem: &'a Problem, theta: Theta, preset: MovePreset, cache_cap: usize) -> Self {
        Self::with_probs(problem, theta, preset.probs(), cache_cap)
    }

    /// Like [`Mh::new`] with explicit move probabilities, in the order update,
    /// merge, split, switch. They must be nonnegative and sum to one.
    pub fn with_probs(
        problem: &'a Problem,
        theta: Theta,
        probs: [f64; 4],
        cache_cap: usize,
    ) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut cache = WeightCache::with_capacity_limit(cache_cap);
        let log_pi = theta.log_pi(problem, &mut cache);
        Mh {
            problem,
            theta,
            cache,
            log_pi,
            stats: MoveStats::default(),
            probs,
            iterations_done: 0,
        }
    }

    /// One proposal plus accept step. Returns whether the state changed.
    pub fn step<R: Rng>(&mut self, rng: &mut R) -> bool {
        let u: f64 = rng.random();
        let mut kind = 3;
        let mut acc = 0.0;
        for (idx, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                kind = idx;
                break;
            }
        }
        let proposal = match kind {
            0 => propose_update(self.problem, &self.theta, &mut self.cache, rng),
            1 => propose_merge(self.problem, &self.theta, &mut self.cache, rng),
            2 => propose_split(self.problem, &self.theta, &mut self.cache, rng),
            _ => propose_switch(self.problem, &self.theta, &mut self.cache, rng),
        };
        self.stats.proposed[kind] += 1;
        self.iterations_done += 1;
        if self.iterations_done % RESYNC_EVERY == 0 {
            self.log_pi = self.theta.log_pi(self.problem, &mut self.cache);
        }
        let Some(p) = proposal else {
            return false;
        };
        let u: f64 = rng.random();
        if u.ln() < p.log_ratio {
            for &(k, i, v) in &p.edits {
                self.theta.apply_set(k, i, v);
            }
            // Proposals are scored without caching prefix states; the accepted
            // histories become current, so record theirs now.
            let mut touched: Vec<usize> = p.edits.iter().map(|&(_, i, _)| i).collect();
            touched.sort_unstable();
            touched.dedup();
            for i in touched {
                let hist = self.theta.history(i as u32);
                if !hist.is_empty() {
                    let hist = hist.to_vec();
                    state_after(self.problem, &hist, &mut self.cache);
                }
            }
            self.log_pi += p.delta_log_pi;
            self.stats.accepted[kind] += 1;
            !p.edits.is_empty()
        } else {
            false
        }
    }

    /// Runs `iterations` steps, recording the state after each into `store`.
    pub fn run<R: Rng>(
        &mut self,
        iterations: u64,
        rng: &mut R,
        store: &mut SampleStore,
        mut observe: impl FnMut(u64, &Theta, f64),
    ) {
        for it in 0..iterations {
            self.step(rng);
            store.record(&self.theta, self.log_pi);
            observe(it, &self.theta, self.log_pi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{exact_distribution, toy_problem, two_lane_problem, two_lane_tracks};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn deltas_match_full_recompute_for_every_move() {
        let problem = two_lane_problem();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut cache = WeightCache::default();
        let lanes = two_lane_tracks(&problem);
        // A state with a hole: lane one misses scan 2, leaving that
        // measurement free, so update proposals favor a real change there.
        let mut gap = Theta::all_singletons(&problem.batch);
        for k in 1..5 {
            if k != 2 {
                gap.apply_set(k, 0, 1);
            }
            gap.apply_set(k, 1, 2);
        }
        gap.validate(&problem.batch).unwrap();
        let states = [lanes, gap, Theta::all_singletons(&problem.batch)];
        let mut checked = [0u32; 4];
        for state in &states {
            let before = state.log_pi(&problem, &mut cache);
            for _ in 0..400 {
                for kind in 0..4usize {
                    let proposal = match kind {
                        0 => propose_update(&problem, state, &mut cache, &mut rng),
                        1 => propose_merge(&problem, state, &mut cache, &mut rng),
                        2 => propose_split(&problem, state, &mut cache, &mut rng),
                        _ => propose_switch(&problem, state, &mut cache, &mut rng),
                    };
                    let Some(p) = proposal else { continue };
                    if p.log_ratio == f64::NEG_INFINITY || p.edits.is_empty() {
                        continue;
                    }
                    let mut applied = state.clone();
                    for &(k, i, v) in &p.edits {
                        applied.apply_set(k, i, v);
                    }
                    applied.validate(&problem.batch).unwrap();
                    let after = applied.log_pi(&problem, &mut cache);
                    assert!(
                        (after - before - p.delta_log_pi).abs() < 1e-9,
                        "{:?}: delta {} vs {}",
                        p.kind,
                        p.delta_log_pi,
                        after - before
                    );
                    checked[kind] += 1;
                }
            }
        }
        assert!(checked.iter().all(|&c| c >= 20), "coverage {:?}", checked);
    }

    #[test]
    fn split_reverses_merge_exactly() {
        let problem = toy_problem();
        let mut theta = Theta::all_singletons(&problem.batch);
        // Join (0,0) and (1,0) into slot 0, then (2,0) as well.
        theta.apply_set(1, 0, 1);
        theta.apply_set(2, 0, 1);
        let digest = theta.digest();
        let mut cache = WeightCache::default();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        // Sample splits until one cuts after the first detection, apply it,
        // then verify a merge proposal that restores the original exists.
        let mut restored = false;
        for _ in 0..100 {
            let mut work = theta.clone();
            let Some(sp) = propose_split(&problem, &work, &mut cache, &mut rng) else {
                continue;
            };
            for &(k, i, v) in &sp.edits {
                work.apply_set(k, i, v);
            }
            work.validate(&problem.batch).unwrap();
            for _ in 0..200 {
                let Some(mg) = propose_merge(&problem, &work, &mut cache, &mut rng) else {
                    continue;
                };
                let mut back = work.clone();
                for &(k, i, v) in &mg.edits {
                    back.apply_set(k, i, v);
                }
                if back.digest() == digest {
                    restored = true;
                    break;
                }
            }
            if restored {
                break;
            }
        }
        assert!(restored);
    }

    #[test]
    fn chain_matches_exact_distribution() {
        let problem = toy_problem();
        let exact = exact_distribution(&problem);
        assert_eq!(exact.len(), 10);
        for preset in [MovePreset::High, MovePreset::Medium, MovePreset::Low] {
            let mut rng = ChaCha12Rng::seed_from_u64(17);
            let mut store = SampleStore::new();
            let mut mh = Mh::new(
                &problem,
                Theta::all_singletons(&problem.batch),
                preset,
                usize::MAX,
            );
            mh.run(150000, &mut rng, &mut store, |_, _, _| {});
            let tv = crate::store::tv_distance(&store.empirical(), &exact);
            assert!(tv < 0.03, "{:?}: tv {}", preset, tv);
            let drift = (mh.log_pi - mh.theta.log_pi(&problem, &mut mh.cache)).abs();
            assert!(drift < 1e-8, "running weight drift {}", drift);
            mh.theta.validate(&problem.batch).unwrap();
        }
    }
}
