//! Shared fixtures and brute-force helpers for unit tests.

use std::collections::HashMap;

use nalgebra::{Matrix4, Vector2, Vector4};

use crate::assoc::Theta;
use crate::linear::{ncv_motion, position_measurement, BirthComponent, BirthModel, Region};
use crate::recursion::{Batch, Params, Problem, Thresholds, WeightCache};
use crate::types::GaussianMoments;

/// Three scans with 1, 2, 1 measurements and no gating: exactly ten valid
/// associations, small enough for exhaustive checks.
pub(crate) fn toy_problem() -> Problem {
    let region = Region {
        xmin: -50.0,
        xmax: 50.0,
        ymin: -50.0,
        ymax: 50.0,
    };
    let birth = BirthModel {
        components: vec![BirthComponent {
            log_weight: 0.05f64.ln(),
            moments: GaussianMoments {
                mean: Vector4::zeros(),
                cov: Matrix4::identity() * 4.0,
            },
        }],
    };
    let params = Params::new(
        ncv_motion(1.0, 0.09, 0.95),
        position_measurement(1.0, 0.8, 2.0, region),
        birth,
        None,
        Thresholds::none(),
    )
    .unwrap();
    let batch = Batch::new(vec![
        vec![Vector2::new(0.1, -0.3)],
        vec![Vector2::new(0.4, 0.2), Vector2::new(5.0, -4.0)],
        vec![Vector2::new(0.9, 0.5)],
    ])
    .unwrap();
    Problem::new(params, batch).unwrap()
}

/// Five scans, two measurements each, laid out as two well-separated lanes.
pub(crate) fn two_lane_problem() -> Problem {
    let region = Region {
        xmin: -50.0,
        xmax: 50.0,
        ymin: -50.0,
        ymax: 50.0,
    };
    let birth = BirthModel {
        components: vec![BirthComponent {
            log_weight: 0.1f64.ln(),
            moments: GaussianMoments {
                mean: Vector4::zeros(),
                cov: Matrix4::identity() * 25.0,
            },
        }],
    };
    let params = Params::new(
        ncv_motion(1.0, 0.09, 0.95),
        position_measurement(1.0, 0.8, 2.0, region),
        birth,
        None,
        Thresholds::none(),
    )
    .unwrap();
    let scans = (0..5)
        .map(|k| {
            vec![
                Vector2::new(k as f64, 3.0),
                Vector2::new(4.0 - k as f64, -3.0),
            ]
        })
        .collect();
    Problem::new(params, Batch::new(scans).unwrap()).unwrap()
}

/// Both lanes of `two_lane_problem` followed as two five-detection tracks.
pub(crate) fn two_lane_tracks(problem: &Problem) -> Theta {
    let mut theta = Theta::all_singletons(&problem.batch);
    for k in 1..5 {
        theta.apply_set(k, 0, 1);
        theta.apply_set(k, 1, 2);
    }
    theta.validate(&problem.batch).unwrap();
    theta
}

/// Enumerates every valid association of a small batch by depth-first search
/// over leading-row values, validating with the public constructor.
pub(crate) fn enumerate_valid(problem: &Problem) -> Vec<Theta> {
    let batch = &problem.batch;
    let shape: Vec<(usize, usize)> = (0..batch.num_scans())
        .map(|t| (batch.n_before(t), batch.m(t)))
        .collect();
    let mut out = Vec::new();
    let mut rows: Vec<Vec<u16>> = shape.iter().map(|&(n, m)| vec![0u16; n + m]).collect();
    fn fill(
        shape: &[(usize, usize)],
        rows: &mut Vec<Vec<u16>>,
        batch: &Batch,
        k: usize,
        i: usize,
        out: &mut Vec<Theta>,
    ) {
        if k == shape.len() {
            let mut candidate = rows.clone();
            for (t, &(n, m)) in shape.iter().enumerate() {
                for j in 0..m {
                    let taken = (0..n).any(|ii| candidate[t][ii] == j as u16 + 1);
                    candidate[t][n + j] = if taken { 0 } else { j as u16 + 1 };
                }
            }
            if let Ok(theta) = Theta::from_rows(batch, candidate) {
                out.push(theta);
            }
            return;
        }
        let (n, m) = shape[k];
        if i == n {
            fill(shape, rows, batch, k + 1, 0, out);
            return;
        }
        for v in 0..=m as u16 {
            rows[k][i] = v;
            fill(shape, rows, batch, k, i + 1, out);
        }
        rows[k][i] = 0;
    }
    fill(&shape, &mut rows, batch, 0, 0, &mut out);
    out
}

/// Exact posterior over association digests by exhaustive enumeration.
pub(crate) fn exact_distribution(problem: &Problem) -> HashMap<u64, f64> {
    let all = enumerate_valid(problem);
    let mut cache = WeightCache::default();
    let lps: Vec<f64> = all.iter().map(|t| t.log_pi(problem, &mut cache)).collect();
    let base = lps.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let total: f64 = lps.iter().map(|&lp| (lp - base).exp()).sum();
    all.iter()
        .zip(&lps)
        .map(|(t, &lp)| (t.digest(), (lp - base).exp() / total))
        .collect()
}
