//! Per-track filtering recursion and memoized local-hypothesis weights.
//!
//! A local hypothesis is identified by its measurement history: the measurement
//! that created the Bernoulli component followed by the measurements that updated
//! it. Its unnormalized weight is accumulated by composing, scan by scan, a
//! creation step (from the predicted undetected-trajectory Poisson intensity),
//! survival predictions, and detection or misdetection updates, through the final
//! scan of the batch. Only the latest state of alive mixture components is
//! maintained while sampling; full per-scan marginals are kept only when a
//! trajectory is about to be smoothed.

use std::collections::HashMap;

use nalgebra::{Cholesky, Vector2};

use crate::error::{Error, Result};
use crate::linear::{
    chi_square_quantile, kf_predict, kf_update, log_gaussian2, predict_measurement, BirthModel,
    MeasurementModel, MotionModel,
};
use crate::types::{
    log_sum_exp, prune_components, ComponentTrack, GaussianMoments, History, LocalHypothesis,
    MeasKey, PoissonComponent, PoissonIntensity, TrajectoryComponent,
};

/// Mixture reduction thresholds. All comparisons remove weights strictly below
/// the threshold, so zero disables a truncation.
#[derive(Debug, Clone, Copy)]
pub struct Thresholds {
    /// Unnormalized Poisson intensity components below this are dropped.
    pub poisson_prune: f64,
    /// Trajectory components below this are dropped when a Bernoulli is created.
    pub birth_pmf: f64,
    /// Trajectory components below this are dropped after each prediction.
    pub end_pmf: f64,
    /// A new Bernoulli with existence below this is treated as pure clutter.
    pub existence_clamp: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            poisson_prune: 1e-4,
            birth_pmf: 1e-2,
            end_pmf: 1e-4,
            existence_clamp: 1e-2,
        }
    }
}

impl Thresholds {
    /// No truncation at all; exact recursion for small problems and oracles.
    pub fn none() -> Self {
        Thresholds {
            poisson_prune: 0.0,
            birth_pmf: 0.0,
            end_pmf: 0.0,
            existence_clamp: 0.0,
        }
    }
}

/// Model set plus derived constants for one tracking problem.
#[derive(Debug, Clone)]
pub struct Params {
    pub motion: MotionModel,
    pub meas: MeasurementModel,
    pub birth: BirthModel,
    /// Gate probability; `None` disables gating.
    pub gate_prob: Option<f64>,
    pub thresholds: Thresholds,
    gate_threshold: Option<f64>,
    log_clutter: f64,
}

impl Params {
    pub fn new(
        motion: MotionModel,
        meas: MeasurementModel,
        birth: BirthModel,
        gate_prob: Option<f64>,
        thresholds: Thresholds,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&meas.detection) {
            return Err(Error::InvalidParameter(format!(
                "detection probability {}",
                meas.detection
            )));
        }
        if !(0.0..=1.0).contains(&motion.survival) {
            return Err(Error::InvalidParameter(format!(
                "survival probability {}",
                motion.survival
            )));
        }
        if meas.clutter_rate < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "clutter rate {}",
                meas.clutter_rate
            )));
        }
        let gate_threshold = match gate_prob {
            Some(p) => Some(chi_square_quantile(p, 2)?),
            None => None,
        };
        let log_clutter = meas.log_clutter_density();
        Ok(Params {
            motion,
            meas,
            birth,
            gate_prob,
            thresholds,
            gate_threshold,
            log_clutter,
        })
    }

    /// Squared-Mahalanobis gate threshold, if gating is enabled.
    pub fn gate_threshold(&self) -> Option<f64> {
        self.gate_threshold
    }

    /// Log clutter intensity (constant over the region).
    pub fn log_clutter(&self) -> f64 {
        self.log_clutter
    }
}

/// A fixed batch of measurements over consecutive scans.
#[derive(Debug, Clone)]
pub struct Batch {
    scans: Vec<Vec<Vector2<f64>>>,
    cum: Vec<u32>,
}

impl Batch {
    pub fn new(scans: Vec<Vec<Vector2<f64>>>) -> Result<Self> {
        if scans.is_empty() {
            return Err(Error::EmptyInput("batch with no scans"));
        }
        let mut cum = Vec::with_capacity(scans.len() + 1);
        cum.push(0u32);
        for s in &scans {
            if s.len() > u16::MAX as usize {
                return Err(Error::InvalidParameter("too many measurements in one scan".into()));
            }
            cum.push(cum.last().unwrap() + s.len() as u32);
        }
        if scans.len() > u16::MAX as usize {
            return Err(Error::InvalidParameter("too many scans".into()));
        }
        Ok(Batch { scans, cum })
    }

    pub fn num_scans(&self) -> usize {
        self.scans.len()
    }

    /// Measurement count of scan `t`.
    pub fn m(&self, t: usize) -> usize {
        self.scans[t].len()
    }

    /// Number of Bernoulli components that exist before scan `t` is processed.
    pub fn n_before(&self, t: usize) -> usize {
        self.cum[t] as usize
    }

    pub fn total(&self) -> usize {
        *self.cum.last().unwrap() as usize
    }

    pub fn scans(&self) -> &[Vec<Vector2<f64>>] {
        &self.scans
    }

    pub fn z(&self, key: MeasKey) -> &Vector2<f64> {
        &self.scans[key.0 as usize][key.1 as usize]
    }

    /// Global index of the Bernoulli component created by a measurement.
    pub fn bernoulli_index(&self, key: MeasKey) -> usize {
        self.cum[key.0 as usize] as usize + key.1 as usize
    }

    /// Inverse of [`Batch::bernoulli_index`].
    pub fn key_of(&self, bernoulli: usize) -> MeasKey {
        let b = bernoulli as u32;
        let t = match self.cum.binary_search(&b) {
            Ok(mut i) => {
                // Skip empty scans: the creating scan is the last with this offset.
                while i + 1 < self.cum.len() && self.cum[i + 1] == b {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        };
        (t as u16, (b - self.cum[t]) as u16)
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Predicts the undetected-trajectory intensity one scan ahead: survivors are
/// propagated, fresh birth components are appended at the new scan.
pub fn ppp_predict(intensity: &PoissonIntensity, params: &Params) -> PoissonIntensity {
    let step = intensity.step + 1;
    let ln_ps = params.motion.survival.ln();
    let mut components = Vec::with_capacity(intensity.components.len() + params.birth.components.len());
    if params.motion.survival > 0.0 {
        for c in &intensity.components {
            let mut filtered = c.filtered.clone();
            filtered.push(kf_predict(c.latest(), &params.motion));
            components.push(PoissonComponent {
                log_weight: c.log_weight + ln_ps,
                birth: c.birth,
                filtered,
            });
        }
    }
    for b in &params.birth.components {
        components.push(PoissonComponent {
            log_weight: b.log_weight,
            birth: step,
            filtered: vec![b.moments.clone()],
        });
    }
    PoissonIntensity { step, components }
}

/// Misdetection update of the undetected-trajectory intensity: weights scale by
/// (1 - detection); components below the prune threshold are removed.
pub fn ppp_update(intensity: &PoissonIntensity, params: &Params) -> PoissonIntensity {
    let ln_miss = (1.0 - params.meas.detection).ln();
    let ln_thr = params.thresholds.poisson_prune.ln();
    let components = intensity
        .components
        .iter()
        .filter_map(|c| {
            let log_weight = c.log_weight + ln_miss;
            (log_weight >= ln_thr && log_weight > f64::NEG_INFINITY).then(|| PoissonComponent {
                log_weight,
                birth: c.birth,
                filtered: c.filtered.clone(),
            })
        })
        .collect();
    PoissonIntensity {
        step: intensity.step,
        components,
    }
}

/// Initial predicted intensity at scan 0: birth components only.
pub fn ppp_initial(params: &Params) -> PoissonIntensity {
    PoissonIntensity {
        step: 0,
        components: params
            .birth
            .components
            .iter()
            .map(|b| PoissonComponent {
                log_weight: b.log_weight,
                birth: 0,
                filtered: vec![b.moments.clone()],
            })
            .collect(),
    }
}

/// Creates the "first detection" local hypothesis for measurement `key` from the
/// predicted intensity at its scan. The weight covers both origins of the
/// measurement: clutter plus a first detection of an undetected trajectory.
pub fn new_bernoulli(
    ppp: &PoissonIntensity,
    key: MeasKey,
    z: &Vector2<f64>,
    params: &Params,
    keep_track: bool,
) -> LocalHypothesis {
    debug_assert_eq!(ppp.step, key.0 as usize);
    let ln_pd = params.meas.detection.ln();
    let mut contribs: Vec<f64> = Vec::with_capacity(ppp.components.len());
    let mut updated: Vec<TrajectoryComponent> = Vec::with_capacity(ppp.components.len());
    for c in &ppp.components {
        let (zhat, s) = predict_measurement(c.latest(), &params.meas);
        let Some(chol) = Cholesky::new(s) else { continue };
        if let Some(thr) = params.gate_threshold {
            let nu = z - zhat;
            if nu.dot(&chol.solve(&nu)) > thr {
                continue;
            }
        }
        let ell = log_gaussian2(z, &zhat, &chol);
        let contrib = c.log_weight + ln_pd + ell;
        if contrib == f64::NEG_INFINITY {
            continue;
        }
        let (post, _) = kf_update(c.latest(), z, &params.meas).expect("innovation factored above");
        let track = keep_track.then(|| {
            let mut filtered = c.filtered.clone();
            let predicted = filtered[1..].to_vec();
            *filtered.last_mut().unwrap() = post.clone();
            ComponentTrack { filtered, predicted }
        });
        contribs.push(contrib);
        updated.push(TrajectoryComponent {
            log_weight: contrib,
            birth: c.birth,
            end: key.0 as usize,
            latest: post,
            track,
        });
    }
    let log_phi_u = log_sum_exp(&contribs);
    let log_weight = log_add_exp(params.log_clutter(), log_phi_u);
    let mut existence = if log_phi_u == f64::NEG_INFINITY {
        0.0
    } else {
        (log_phi_u - log_weight).exp()
    };
    let mut components = updated;
    for c in components.iter_mut() {
        c.log_weight -= log_phi_u;
    }
    if !components.is_empty() && params.thresholds.birth_pmf > 0.0 {
        prune_components(&mut components, params.thresholds.birth_pmf)
            .expect("valid threshold and non-empty mixture");
    }
    if existence < params.thresholds.existence_clamp {
        existence = 0.0;
        components.clear();
    }
    LocalHypothesis {
        log_weight,
        existence,
        step: key.0 as usize,
        components,
        history: vec![key],
    }
}

/// Survival prediction of a Bernoulli local hypothesis to the next scan. Each
/// alive component splits into a dead copy (end frozen) and a surviving copy.
pub fn bernoulli_predict(hyp: &mut LocalHypothesis, params: &Params, keep_track: bool) {
    let old_step = hyp.step;
    hyp.step += 1;
    if hyp.components.is_empty() {
        return;
    }
    let ps = params.motion.survival;
    let (ln_ps, ln_die) = (ps.ln(), (1.0 - ps).ln());
    let mut out = Vec::with_capacity(hyp.components.len() * 2);
    // Weight-only evaluation never reads a dead component again except through
    // the mixture total and the latest end time, so dead mass collapses into a
    // single entry instead of growing by one component per scan.
    let mut dead_lw = f64::NEG_INFINITY;
    let mut dead_end = 0;
    let mut dead_latest: Option<GaussianMoments> = None;
    for c in hyp.components.drain(..) {
        if c.end < old_step {
            if keep_track {
                out.push(c);
            } else {
                dead_lw = log_add_exp(dead_lw, c.log_weight);
                if dead_latest.is_none() || c.end > dead_end {
                    dead_end = c.end;
                    dead_latest = Some(c.latest);
                }
            }
            continue;
        }
        if ps < 1.0 {
            if keep_track {
                out.push(TrajectoryComponent {
                    log_weight: c.log_weight + ln_die,
                    birth: c.birth,
                    end: c.end,
                    latest: c.latest.clone(),
                    track: c.track.clone(),
                });
            } else {
                dead_lw = log_add_exp(dead_lw, c.log_weight + ln_die);
                if dead_latest.is_none() || c.end > dead_end {
                    dead_end = c.end;
                    dead_latest = Some(c.latest.clone());
                }
            }
        }
        if ps > 0.0 {
            let pred = kf_predict(&c.latest, &params.motion);
            let track = keep_track.then(|| {
                let mut tr = c.track.clone().expect("tracked component");
                tr.predicted.push(pred.clone());
                tr.filtered.push(pred.clone());
                tr
            });
            out.push(TrajectoryComponent {
                log_weight: c.log_weight + ln_ps,
                birth: c.birth,
                end: c.end + 1,
                latest: pred,
                track,
            });
        }
    }
    if let Some(latest) = dead_latest {
        out.push(TrajectoryComponent {
            log_weight: dead_lw,
            birth: 0,
            end: dead_end,
            latest,
            track: None,
        });
    }
    hyp.components = out;
    if hyp.components.is_empty() {
        // Certain death: existence of the (now fully dead) trajectory is untouched,
        // but nothing remains to detect.
        return;
    }
    if params.thresholds.end_pmf > 0.0 {
        prune_components(&mut hyp.components, params.thresholds.end_pmf)
            .expect("valid threshold and non-empty mixture");
    }
}

/// Misdetection update at the current scan.
pub fn bernoulli_misdetect(hyp: &mut LocalHypothesis, params: &Params) {
    let pd = params.meas.detection;
    let alive = hyp.alive_mass();
    let phi0 = pd * alive;
    let omega = 1.0 - hyp.existence * phi0;
    if omega <= 0.0 {
        hyp.log_weight = f64::NEG_INFINITY;
        hyp.existence = 0.0;
        hyp.components.clear();
        return;
    }
    hyp.log_weight += omega.ln();
    hyp.existence = hyp.existence * (1.0 - phi0) / omega;
    if hyp.components.is_empty() || phi0 == 0.0 {
        return;
    }
    let step = hyp.step;
    let ln_miss = (1.0 - pd).ln();
    hyp.components.retain_mut(|c| {
        if c.end == step {
            c.log_weight += ln_miss;
        }
        c.log_weight > f64::NEG_INFINITY
    });
    if hyp.components.is_empty() {
        hyp.existence = 0.0;
        return;
    }
    // Renormalizing divides every component by the remaining mass 1 - phi0;
    // doing it numerically holds the mixture invariant exactly.
    let total = log_sum_exp(&hyp.components.iter().map(|c| c.log_weight).collect::<Vec<_>>());
    for c in hyp.components.iter_mut() {
        c.log_weight -= total;
    }
}

/// Detection update at the current scan with measurement `key`. Impossible
/// detections (no alive mass in the gate) drive the weight to -inf.
pub fn bernoulli_detect(
    hyp: &mut LocalHypothesis,
    key: MeasKey,
    z: &Vector2<f64>,
    params: &Params,
    keep_track: bool,
) {
    debug_assert_eq!(hyp.step, key.0 as usize);
    hyp.history.push(key);
    if hyp.existence == 0.0 || hyp.components.is_empty() {
        hyp.log_weight = f64::NEG_INFINITY;
        hyp.existence = 0.0;
        hyp.components.clear();
        return;
    }
    let ln_pd = params.meas.detection.ln();
    let step = hyp.step;
    let mut contribs = Vec::with_capacity(hyp.components.len());
    let mut updated = Vec::with_capacity(hyp.components.len());
    for c in hyp.components.drain(..) {
        if c.end != step {
            continue;
        }
        let (zhat, s) = predict_measurement(&c.latest, &params.meas);
        let Some(chol) = Cholesky::new(s) else { continue };
        if let Some(thr) = params.gate_threshold {
            let nu = z - zhat;
            if nu.dot(&chol.solve(&nu)) > thr {
                continue;
            }
        }
        let ell = log_gaussian2(z, &zhat, &chol);
        let contrib = c.log_weight + ln_pd + ell;
        if contrib == f64::NEG_INFINITY {
            continue;
        }
        let (post, _) = kf_update(&c.latest, z, &params.meas).expect("innovation factored above");
        let track = keep_track.then(|| {
            let mut tr = c.track.clone().expect("tracked component");
            *tr.filtered.last_mut().unwrap() = post.clone();
            tr
        });
        contribs.push(contrib);
        updated.push(TrajectoryComponent {
            log_weight: contrib,
            birth: c.birth,
            end: c.end,
            latest: post,
            track,
        });
    }
    let log_phi = log_sum_exp(&contribs);
    if log_phi == f64::NEG_INFINITY {
        hyp.log_weight = f64::NEG_INFINITY;
        hyp.existence = 0.0;
        hyp.components.clear();
        return;
    }
    hyp.log_weight += hyp.existence.ln() + log_phi;
    hyp.existence = 1.0;
    for c in updated.iter_mut() {
        c.log_weight -= log_phi;
    }
    hyp.components = updated;
}

/// One predict + misdetect step.
fn step_miss(hyp: &mut LocalHypothesis, params: &Params, keep_track: bool) {
    bernoulli_predict(hyp, params, keep_track);
    bernoulli_misdetect(hyp, params);
}

/// Final compact result of evaluating one history through the last scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalInfo {
    pub log_weight: f64,
    pub existence: f64,
    /// Last scan any mixture component survives to (0-based).
    pub t_end: u16,
}

struct TwoGen<V> {
    hot: HashMap<History, V>,
    cold: HashMap<History, V>,
    cap: usize,
}

impl<V: Clone> TwoGen<V> {
    fn new(cap: usize) -> Self {
        TwoGen {
            hot: HashMap::new(),
            cold: HashMap::new(),
            cap,
        }
    }

    fn get(&mut self, k: &[MeasKey]) -> Option<&V> {
        if self.hot.contains_key(k) {
            return self.hot.get(k);
        }
        if let Some(v) = self.cold.remove(k) {
            self.insert(k.to_vec(), v);
            return self.hot.get(k);
        }
        None
    }

    fn insert(&mut self, k: History, v: V) {
        if self.hot.len() >= self.cap {
            self.cold = std::mem::take(&mut self.hot);
        }
        self.hot.insert(k, v);
    }
}

/// Memoized per-history evaluations for one chain. Hits are bit-identical to
/// recomputation; eviction swaps generations once the hot map reaches capacity.
pub struct WeightCache {
    finals: TwoGen<FinalInfo>,
    states: TwoGen<LocalHypothesis>,
    pub hits: u64,
    pub misses: u64,
}

impl Default for WeightCache {
    fn default() -> Self {
        Self::unbounded()
    }
}

impl WeightCache {
    pub fn unbounded() -> Self {
        Self::with_capacity_limit(usize::MAX)
    }

    /// Caps each generation of each internal map at `cap` entries.
    pub fn with_capacity_limit(cap: usize) -> Self {
        WeightCache {
            finals: TwoGen::new(cap),
            states: TwoGen::new(cap),
            hits: 0,
            misses: 0,
        }
    }
}

/// A measurement batch with its model set and the per-scan predicted intensities
/// and single-detection tables computed up front.
pub struct Problem {
    pub params: Params,
    pub batch: Batch,
    /// Predicted undetected-trajectory intensity entering each scan.
    pub ppp_predicted: Vec<PoissonIntensity>,
    singles: Vec<SingleInfo>,
}

struct SingleInfo {
    final_info: FinalInfo,
    /// Gated measurement indices at scans creation+1, creation+2, ... while the
    /// single-detection hypothesis still has alive mass.
    gates: Vec<Vec<u16>>,
}

impl Problem {
    pub fn new(params: Params, batch: Batch) -> Result<Self> {
        let k = batch.num_scans();
        let mut ppp_predicted = Vec::with_capacity(k);
        ppp_predicted.push(ppp_initial(&params));
        for t in 0..k - 1 {
            let updated = ppp_update(&ppp_predicted[t], &params);
            ppp_predicted.push(ppp_predict(&updated, &params));
        }
        let mut problem = Problem {
            params,
            batch,
            ppp_predicted,
            singles: Vec::new(),
        };
        problem.singles = problem.build_singles();
        Ok(problem)
    }

    fn build_singles(&self) -> Vec<SingleInfo> {
        let k = self.batch.num_scans();
        let mut singles = Vec::with_capacity(self.batch.total());
        for t in 0..k {
            for j in 0..self.batch.m(t) {
                let key = (t as u16, j as u16);
                let mut hyp = new_bernoulli(
                    &self.ppp_predicted[t],
                    key,
                    self.batch.z(key),
                    &self.params,
                    false,
                );
                let mut gates = Vec::new();
                for s in t + 1..k {
                    if !hyp.is_alive() {
                        break;
                    }
                    bernoulli_predict(&mut hyp, &self.params, false);
                    gates.push(self.gated_measurements(&hyp, s));
                    bernoulli_misdetect(&mut hyp, &self.params);
                }
                // Trailing scans past the alive horizon contribute factor one.
                let t_end = if hyp.components.is_empty() { t } else { hyp.max_end() };
                let final_info = FinalInfo {
                    log_weight: hyp.log_weight,
                    existence: hyp.existence,
                    t_end: t_end as u16,
                };
                singles.push(SingleInfo { final_info, gates });
            }
        }
        singles
    }

    /// Measurement indices of scan `scan` gated by any alive component of `hyp`
    /// (which must be predicted to `scan`). Without gating every index passes.
    pub fn gated_measurements(&self, hyp: &LocalHypothesis, scan: usize) -> Vec<u16> {
        debug_assert_eq!(hyp.step, scan);
        let m = self.batch.m(scan);
        let mut out = Vec::new();
        let Some(thr) = self.params.gate_threshold() else {
            if hyp.is_alive() {
                out.extend(0..m as u16);
            }
            return out;
        };
        let alive: Vec<(Vector2<f64>, Cholesky<f64, nalgebra::U2>)> = hyp
            .components
            .iter()
            .filter(|c| c.end == scan)
            .filter_map(|c| {
                let (zhat, s) = predict_measurement(&c.latest, &self.params.meas);
                Cholesky::new(s).map(|chol| (zhat, chol))
            })
            .collect();
        'meas: for j in 0..m {
            let z = self.batch.z((scan as u16, j as u16));
            for (zhat, chol) in &alive {
                let nu = z - zhat;
                if nu.dot(&chol.solve(&nu)) <= thr {
                    out.push(j as u16);
                    continue 'meas;
                }
            }
        }
        out
    }

    /// Single-detection weight of the history {key}, propagated through the batch.
    pub fn single_final(&self, key: MeasKey) -> FinalInfo {
        self.singles[self.batch.bernoulli_index(key)].final_info
    }

    /// Gated candidate measurements at `scan` for a Bernoulli whose current
    /// history is exactly its creating measurement.
    pub fn single_gates(&self, creating: MeasKey, scan: usize) -> &[u16] {
        let info = &self.singles[self.batch.bernoulli_index(creating)];
        let d = scan - creating.0 as usize;
        debug_assert!(d >= 1);
        info.gates.get(d - 1).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// State of a history right after its last detection update (sampling mode,
/// no per-scan marginals). Cached; intermediate prefixes are cached too.
pub fn state_after(problem: &Problem, hist: &[MeasKey], cache: &mut WeightCache) -> LocalHypothesis {
    state_after_snap(problem, hist, cache, true)
}

fn state_after_snap(
    problem: &Problem,
    hist: &[MeasKey],
    cache: &mut WeightCache,
    snapshot: bool,
) -> LocalHypothesis {
    debug_assert!(!hist.is_empty());
    if let Some(st) = cache.states.get(hist) {
        cache.hits += 1;
        return st.clone();
    }
    cache.misses += 1;
    let mut start = hist.len() - 1;
    let mut st: Option<LocalHypothesis> = None;
    while start >= 1 {
        if let Some(s) = cache.states.get(&hist[..start]) {
            st = Some(s.clone());
            break;
        }
        start -= 1;
    }
    let mut st = match st {
        Some(s) => s,
        None => {
            start = 1;
            let key = hist[0];
            let h = new_bernoulli(
                &problem.ppp_predicted[key.0 as usize],
                key,
                problem.batch.z(key),
                &problem.params,
                false,
            );
            cache.states.insert(hist[..1].to_vec(), h.clone());
            h
        }
    };
    for d in start..hist.len() {
        let key = hist[d];
        extend_by_detection(problem, &mut st, key);
        if snapshot {
            cache.states.insert(hist[..=d].to_vec(), st.clone());
        }
    }
    st
}

/// Advances a post-detection state through misdetected scans and applies the
/// detection at `key.0`.
pub fn extend_by_detection(problem: &Problem, st: &mut LocalHypothesis, key: MeasKey) {
    let target = key.0 as usize;
    debug_assert!(target > st.step);
    for _ in st.step + 1..target {
        step_miss(st, &problem.params, false);
    }
    bernoulli_predict(st, &problem.params, false);
    bernoulli_detect(st, key, problem.batch.z(key), &problem.params, false);
}

/// Advances a state through trailing misdetections to the end of the batch and
/// compacts it. Factors become one once no alive component remains.
pub fn propagate_to_end(problem: &Problem, st: &mut LocalHypothesis) -> FinalInfo {
    let k = problem.batch.num_scans();
    for _ in st.step + 1..k {
        if !st.is_alive() || st.log_weight == f64::NEG_INFINITY {
            break;
        }
        step_miss(st, &problem.params, false);
    }
    st.step = k - 1;
    let t_end = if st.components.is_empty() {
        st.history.last().map(|p| p.0 as usize).unwrap_or(0)
    } else {
        st.max_end()
    };
    FinalInfo {
        log_weight: st.log_weight,
        existence: st.existence,
        t_end: t_end as u16,
    }
}

/// Unnormalized log-weight and final existence of a measurement history,
/// evaluated through the last scan. The empty history has weight one.
pub fn final_info(problem: &Problem, hist: &[MeasKey], cache: &mut WeightCache) -> FinalInfo {
    final_info_snap(problem, hist, cache, true)
}

/// Like [`final_info`] but records only the final result, not the intermediate
/// prefix states. Proposal evaluation rejects most candidate histories, and
/// their prefixes would only churn the cache.
pub fn final_info_probe(problem: &Problem, hist: &[MeasKey], cache: &mut WeightCache) -> FinalInfo {
    final_info_snap(problem, hist, cache, false)
}

fn final_info_snap(
    problem: &Problem,
    hist: &[MeasKey],
    cache: &mut WeightCache,
    snapshot: bool,
) -> FinalInfo {
    if hist.is_empty() {
        return FinalInfo {
            log_weight: 0.0,
            existence: 0.0,
            t_end: 0,
        };
    }
    if let Some(fi) = cache.finals.get(hist) {
        cache.hits += 1;
        return *fi;
    }
    cache.misses += 1;
    if hist.len() == 1 {
        let fi = problem.single_final(hist[0]);
        cache.finals.insert(hist.to_vec(), fi);
        return fi;
    }
    let mut st = state_after_snap(problem, hist, cache, snapshot);
    let fi = propagate_to_end(problem, &mut st);
    cache.finals.insert(hist.to_vec(), fi);
    fi
}

/// Log-weight of a history (convenience wrapper over [`final_info`]).
pub fn local_weight(problem: &Problem, hist: &[MeasKey], cache: &mut WeightCache) -> f64 {
    final_info(problem, hist, cache).log_weight
}

/// Recomputes a history in estimation mode, carrying full filtered and predicted
/// marginals for every component, through the final scan.
pub fn full_hypothesis(problem: &Problem, hist: &[MeasKey]) -> LocalHypothesis {
    assert!(!hist.is_empty(), "cannot expand an empty history");
    let key = hist[0];
    let mut st = new_bernoulli(
        &problem.ppp_predicted[key.0 as usize],
        key,
        problem.batch.z(key),
        &problem.params,
        true,
    );
    for &key in &hist[1..] {
        let target = key.0 as usize;
        for _ in st.step + 1..target {
            bernoulli_predict(&mut st, &problem.params, true);
            bernoulli_misdetect(&mut st, &problem.params);
        }
        bernoulli_predict(&mut st, &problem.params, true);
        bernoulli_detect(&mut st, key, problem.batch.z(key), &problem.params, true);
    }
    let k = problem.batch.num_scans();
    while st.step + 1 < k && st.is_alive() && st.log_weight > f64::NEG_INFINITY {
        bernoulli_predict(&mut st, &problem.params, true);
        bernoulli_misdetect(&mut st, &problem.params);
    }
    st.step = k - 1;
    st
}

/// Predicted state of a history prefix at `scan` (before any update there):
/// the mixture a detection candidate at `scan` would be gated against.
pub fn predicted_state_at(
    problem: &Problem,
    prefix: &[MeasKey],
    scan: usize,
    cache: &mut WeightCache,
) -> LocalHypothesis {
    debug_assert!(!prefix.is_empty());
    debug_assert!((prefix.last().unwrap().0 as usize) < scan);
    let mut st = state_after(problem, prefix, cache);
    for _ in st.step + 1..scan {
        step_miss(&mut st, &problem.params, false);
    }
    bernoulli_predict(&mut st, &problem.params, false);
    st
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{ncv_motion, position_measurement, BirthComponent, Region};
    use crate::types::GaussianMoments;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix4, Vector4};

    fn region() -> Region {
        Region {
            xmin: -200.0,
            xmax: 200.0,
            ymin: -200.0,
            ymax: 200.0,
        }
    }

    fn birth_at(positions: &[[f64; 2]]) -> BirthModel {
        BirthModel {
            components: positions
                .iter()
                .map(|p| BirthComponent {
                    log_weight: 0.01f64.ln(),
                    moments: GaussianMoments {
                        mean: Vector4::new(p[0], 0.0, p[1], 0.0),
                        cov: Matrix4::identity() * 4.0,
                    },
                })
                .collect(),
        }
    }

    fn params(thresholds: Thresholds, gate: Option<f64>) -> Params {
        Params::new(
            ncv_motion(1.0, 0.09, 0.98),
            position_measurement(1.0, 0.7, 30.0, region()),
            birth_at(&[[0.0, 0.0]]),
            gate,
            thresholds,
        )
        .unwrap()
    }

    #[test]
    fn ppp_chain_weights_scale_and_prune() {
        let p = params(Thresholds::default(), None);
        let init = ppp_initial(&p);
        assert_eq!(init.components.len(), 1);
        assert_relative_eq!(init.components[0].log_weight.exp(), 0.01, epsilon = 1e-12);
        let upd = ppp_update(&init, &p);
        assert_relative_eq!(upd.components[0].log_weight.exp(), 0.003, epsilon = 1e-12);
        let pred = ppp_predict(&upd, &p);
        // Survivor plus a fresh birth component.
        assert_eq!(pred.components.len(), 2);
        assert_relative_eq!(
            pred.components[0].log_weight.exp(),
            0.003 * 0.98,
            epsilon = 1e-12
        );
        assert_eq!(pred.components[0].filtered.len(), 2);
        assert_eq!(pred.components[1].birth, 1);
        // After the fourth update the scan-0 component has intensity weight
        // 0.01 * 0.3^4 * 0.98^3 = 7.6e-5 and falls below the prune threshold.
        let mut cur = pred;
        for _ in 0..3 {
            let upd = ppp_update(&cur, &p);
            cur = ppp_predict(&upd, &p);
        }
        let last = ppp_update(&cur, &p);
        assert_eq!(last.components.len(), 3);
        assert!(last.components.iter().all(|c| c.log_weight.exp() >= 1e-4));
        assert!(last.components.iter().all(|c| c.birth >= 1));
    }

    #[test]
    fn misdetect_matches_closed_form() {
        let p = params(Thresholds::none(), None);
        let mut hyp = LocalHypothesis {
            log_weight: 0.0,
            existence: 0.5,
            step: 3,
            components: vec![TrajectoryComponent {
                log_weight: 0.0,
                birth: 3,
                end: 3,
                latest: GaussianMoments {
                    mean: Vector4::zeros(),
                    cov: Matrix4::identity(),
                },
                track: None,
            }],
            history: vec![(3, 0)],
        };
        bernoulli_misdetect(&mut hyp, &p);
        assert_relative_eq!(hyp.log_weight, (1.0f64 - 0.5 * 0.7).ln(), epsilon = 1e-12);
        assert_relative_eq!(hyp.existence, 0.5 * 0.3 / 0.65, epsilon = 1e-12);
        assert_relative_eq!(hyp.alive_mass(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn predict_splits_alive_mass_by_survival() {
        let p = params(Thresholds::none(), None);
        let mut hyp = LocalHypothesis {
            log_weight: 0.0,
            existence: 1.0,
            step: 0,
            components: vec![TrajectoryComponent {
                log_weight: 0.0,
                birth: 0,
                end: 0,
                latest: GaussianMoments {
                    mean: Vector4::zeros(),
                    cov: Matrix4::identity(),
                },
                track: None,
            }],
            history: vec![(0, 0)],
        };
        bernoulli_predict(&mut hyp, &p, false);
        assert_eq!(hyp.components.len(), 2);
        assert_relative_eq!(hyp.alive_mass(), 0.98, epsilon = 1e-12);
        // Ten survival-only predictions leave alive mass 0.98^10.
        for _ in 0..9 {
            bernoulli_predict(&mut hyp, &p, false);
        }
        assert_relative_eq!(hyp.alive_mass(), 0.98f64.powi(10), epsilon = 1e-12);
        assert_relative_eq!(hyp.existence, 1.0, epsilon = 1e-12);
    }

    fn one_meas_batch(z: [f64; 2]) -> Batch {
        Batch::new(vec![vec![Vector2::new(z[0], z[1])]]).unwrap()
    }

    #[test]
    fn new_bernoulli_far_measurement_is_pure_clutter() {
        let p = params(Thresholds::default(), Some(0.999));
        let batch = one_meas_batch([150.0, -150.0]);
        let problem = Problem::new(p, batch).unwrap();
        let hyp = new_bernoulli(
            &problem.ppp_predicted[0],
            (0, 0),
            problem.batch.z((0, 0)),
            &problem.params,
            false,
        );
        assert_relative_eq!(hyp.log_weight.exp(), 30.0 / 160000.0, epsilon = 1e-15);
        assert_eq!(hyp.existence, 0.0);
        assert!(hyp.components.is_empty());
    }

    #[test]
    fn new_bernoulli_without_clutter_is_certain() {
        let mut meas = position_measurement(1.0, 0.7, 0.0, region());
        meas.clutter_rate = 0.0;
        let p = Params::new(
            ncv_motion(1.0, 0.09, 0.98),
            meas,
            birth_at(&[[0.0, 0.0]]),
            None,
            Thresholds::none(),
        )
        .unwrap();
        let batch = one_meas_batch([0.5, -0.5]);
        let problem = Problem::new(p, batch).unwrap();
        let hyp = new_bernoulli(
            &problem.ppp_predicted[0],
            (0, 0),
            problem.batch.z((0, 0)),
            &problem.params,
            false,
        );
        assert_relative_eq!(hyp.existence, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn new_bernoulli_weight_matches_quadrature() {
        // One scan, one measurement: w = clutter + pd * sum_l w_l <N(m_l,P_l), N(z;Hx,R)>,
        // checked against direct integration over position.
        let p = params(Thresholds::none(), None);
        let batch = one_meas_batch([1.2, 0.7]);
        let problem = Problem::new(p, batch).unwrap();
        let z = *problem.batch.z((0, 0));
        let hyp = new_bernoulli(&problem.ppp_predicted[0], (0, 0), &z, &problem.params, false);

        let n = 801;
        let half = 14.0;
        let h = 2.0 * half / n as f64;
        let prior_mean = Vector2::new(0.0, 0.0);
        let pchol = Cholesky::new(nalgebra::Matrix2::identity() * 4.0).unwrap();
        let rchol = Cholesky::new(problem.params.meas.r).unwrap();
        let mut integral = 0.0;
        for ix in 0..n {
            let x = -half + (ix as f64 + 0.5) * h;
            for iy in 0..n {
                let y = -half + (iy as f64 + 0.5) * h;
                let pos = Vector2::new(x, y);
                integral += (log_gaussian2(&pos, &prior_mean, &pchol)
                    + log_gaussian2(&z, &pos, &rchol))
                .exp();
            }
        }
        integral *= h * h;
        let expect = 30.0 / 160000.0 + 0.7 * 0.01 * integral;
        assert_relative_eq!(hyp.log_weight.exp(), expect, max_relative = 1e-4);
        assert_relative_eq!(
            hyp.existence,
            0.7 * 0.01 * integral / expect,
            max_relative = 1e-4
        );
    }

    fn three_scan_problem(thresholds: Thresholds, gate: Option<f64>) -> Problem {
        let p = params(thresholds, gate);
        let batch = Batch::new(vec![
            vec![Vector2::new(0.3, -0.2), Vector2::new(60.0, 60.0)],
            vec![Vector2::new(0.5, 0.1)],
            vec![Vector2::new(1.1, 0.4), Vector2::new(-70.0, 40.0)],
        ])
        .unwrap();
        Problem::new(p, batch).unwrap()
    }

    #[test]
    fn local_weight_empty_history_is_unit() {
        let problem = three_scan_problem(Thresholds::none(), None);
        let mut cache = WeightCache::default();
        let fi = final_info(&problem, &[], &mut cache);
        assert_eq!(fi.log_weight, 0.0);
        assert_eq!(fi.existence, 0.0);
    }

    #[test]
    fn local_weight_matches_manual_composition() {
        let problem = three_scan_problem(Thresholds::none(), None);
        let mut cache = WeightCache::default();
        let hist: History = vec![(0, 0), (2, 0)];
        let fi = final_info(&problem, &hist, &mut cache);

        let mut manual = new_bernoulli(
            &problem.ppp_predicted[0],
            (0, 0),
            problem.batch.z((0, 0)),
            &problem.params,
            false,
        );
        bernoulli_predict(&mut manual, &problem.params, false);
        bernoulli_misdetect(&mut manual, &problem.params);
        bernoulli_predict(&mut manual, &problem.params, false);
        bernoulli_detect(
            &mut manual,
            (2, 0),
            problem.batch.z((2, 0)),
            &problem.params,
            false,
        );
        assert_eq!(fi.log_weight, manual.log_weight);
        assert_eq!(fi.existence, 1.0);
        assert!(fi.log_weight.is_finite());
    }

    #[test]
    fn two_detections_pin_existence() {
        let problem = three_scan_problem(Thresholds::none(), None);
        let mut cache = WeightCache::default();
        let fi = final_info(&problem, &[(0, 0), (1, 0)], &mut cache);
        assert_eq!(fi.existence, 1.0);
        let single = final_info(&problem, &[(0, 0)], &mut cache);
        assert!(single.existence > 0.0 && single.existence < 1.0);
    }

    #[test]
    fn singles_table_matches_direct_evaluation() {
        let problem = three_scan_problem(Thresholds::default(), Some(0.999));
        for t in 0..problem.batch.num_scans() {
            for j in 0..problem.batch.m(t) {
                let key = (t as u16, j as u16);
                let mut st = new_bernoulli(
                    &problem.ppp_predicted[t],
                    key,
                    problem.batch.z(key),
                    &problem.params,
                    false,
                );
                let direct = propagate_to_end(&problem, &mut st);
                let table = problem.single_final(key);
                assert_eq!(direct.log_weight, table.log_weight);
                assert_eq!(direct.existence, table.existence);
                assert_eq!(direct.t_end, table.t_end);
            }
        }
    }

    #[test]
    fn cache_hits_are_bit_identical() {
        let problem = three_scan_problem(Thresholds::default(), Some(0.999));
        let hist: History = vec![(0, 0), (1, 0), (2, 0)];
        let mut warm = WeightCache::default();
        let first = final_info(&problem, &hist, &mut warm);
        let second = final_info(&problem, &hist, &mut warm);
        let mut cold = WeightCache::default();
        let fresh = final_info(&problem, &hist, &mut cold);
        assert_eq!(first, second);
        assert_eq!(first, fresh);
        assert!(warm.hits > 0);
    }

    #[test]
    fn full_hypothesis_tracks_are_consistent() {
        let problem = three_scan_problem(Thresholds::none(), None);
        let hyp = full_hypothesis(&problem, &[(0, 0), (2, 0)]);
        let mut cache = WeightCache::default();
        let fi = final_info(&problem, &[(0, 0), (2, 0)], &mut cache);
        assert_eq!(hyp.log_weight, fi.log_weight);
        for c in &hyp.components {
            let tr = c.track.as_ref().expect("estimation mode keeps tracks");
            assert_eq!(tr.filtered.len(), c.end - c.birth + 1);
            assert_eq!(tr.predicted.len(), tr.filtered.len() - 1);
            let last = tr.filtered.last().unwrap();
            assert_eq!(last.mean, c.latest.mean);
        }
    }

    #[test]
    fn gate_lists_respect_distance() {
        let problem = three_scan_problem(Thresholds::default(), Some(0.999));
        // From the near-origin track start, the far measurement at scan 2 is not gated.
        let gates = problem.single_gates((0, 0), 2);
        assert!(gates.contains(&0));
        assert!(!gates.contains(&1));
    }

    #[test]
    fn detect_on_nonexistent_is_impossible() {
        let problem = three_scan_problem(Thresholds::default(), Some(0.999));
        // The far measurement at scan 0 creates a clutter-clamped Bernoulli.
        let mut cache = WeightCache::default();
        let fi = final_info(&problem, &[(0, 1), (1, 0)], &mut cache);
        assert_eq!(fi.log_weight, f64::NEG_INFINITY);
    }
}
