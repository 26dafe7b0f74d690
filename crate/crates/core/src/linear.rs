//! Linear-Gaussian models and primitives: constant-velocity motion, position
//! measurements, Kalman prediction/update, Rauch-Tung-Striebel smoothing, and
//! ellipsoidal gating.

use nalgebra::{Cholesky, Matrix2, Matrix2x4, Matrix4, Vector2, U2};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::types::GaussianMoments;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Linear motion model with survival probability per step.
#[derive(Debug, Clone)]
pub struct MotionModel {
    pub f: Matrix4<f64>,
    pub q: Matrix4<f64>,
    /// Probability that an alive trajectory survives one more step.
    pub survival: f64,
}

/// Rectangular surveillance region; clutter is uniform over it.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Region {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Region {
    pub fn area(&self) -> f64 {
        (self.xmax - self.xmin) * (self.ymax - self.ymin)
    }

    pub fn contains(&self, z: &Vector2<f64>) -> bool {
        z.x >= self.xmin && z.x <= self.xmax && z.y >= self.ymin && z.y <= self.ymax
    }
}

/// Linear position measurement model with constant detection probability and
/// uniform Poisson clutter.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    pub h: Matrix2x4<f64>,
    pub r: Matrix2<f64>,
    /// Probability of detecting an alive trajectory per scan.
    pub detection: f64,
    /// Expected number of clutter measurements per scan.
    pub clutter_rate: f64,
    pub region: Region,
}

impl MeasurementModel {
    /// Log clutter intensity at any point of the region: rate times the uniform density.
    pub fn log_clutter_density(&self) -> f64 {
        (self.clutter_rate / self.region.area()).ln()
    }
}

/// One Gaussian component of the birth intensity.
#[derive(Debug, Clone)]
pub struct BirthComponent {
    pub log_weight: f64,
    pub moments: GaussianMoments,
}

/// Gaussian-mixture birth intensity, appended at every prediction step.
#[derive(Debug, Clone, Default)]
pub struct BirthModel {
    pub components: Vec<BirthComponent>,
}

/// Nearly-constant-velocity motion: block form per axis is [1 ts; 0 1] for the
/// transition and noise * [ts^3/2 ts^2/2; ts^2/2 ts] for the process covariance.
pub fn ncv_motion(ts: f64, noise: f64, survival: f64) -> MotionModel {
    let f = Matrix4::new(
        1.0, ts, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, ts, //
        0.0, 0.0, 0.0, 1.0,
    );
    let (a, b, c) = (ts.powi(3) / 2.0, ts * ts / 2.0, ts);
    let q = noise
        * Matrix4::new(
            a, b, 0.0, 0.0, //
            b, c, 0.0, 0.0, //
            0.0, 0.0, a, b, //
            0.0, 0.0, b, c,
        );
    MotionModel { f, q, survival }
}

/// Position-only measurement with isotropic noise variance `var`.
pub fn position_measurement(
    var: f64,
    detection: f64,
    clutter_rate: f64,
    region: Region,
) -> MeasurementModel {
    let h = Matrix2x4::new(
        1.0, 0.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0,
    );
    MeasurementModel {
        h,
        r: Matrix2::identity() * var,
        detection,
        clutter_rate,
        region,
    }
}

fn sym4(m: Matrix4<f64>) -> Matrix4<f64> {
    (m + m.transpose()) * 0.5
}

fn sym2(m: Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

/// One-step prediction through the motion model.
pub fn kf_predict(m: &GaussianMoments, model: &MotionModel) -> GaussianMoments {
    GaussianMoments {
        mean: model.f * m.mean,
        cov: sym4(model.f * m.cov * model.f.transpose() + model.q),
    }
}

/// Predicted measurement moments (innovation mean and covariance).
pub fn predict_measurement(m: &GaussianMoments, model: &MeasurementModel) -> (Vector2<f64>, Matrix2<f64>) {
    (
        model.h * m.mean,
        sym2(model.h * m.cov * model.h.transpose() + model.r),
    )
}

/// Squared Mahalanobis distance of `z` under a factored innovation covariance.
pub fn mahalanobis2(z: &Vector2<f64>, mean: &Vector2<f64>, chol: &Cholesky<f64, U2>) -> f64 {
    let nu = z - mean;
    nu.dot(&chol.solve(&nu))
}

/// Log density of `z` under N(mean, cov) given the covariance factorization.
pub fn log_gaussian2(z: &Vector2<f64>, mean: &Vector2<f64>, chol: &Cholesky<f64, U2>) -> f64 {
    let d2 = mahalanobis2(z, mean, chol);
    let ln_det = 2.0 * chol.l_dirty().diagonal().map(f64::ln).sum();
    -LN_2PI - 0.5 * (ln_det + d2)
}

/// Kalman update with the Joseph-form covariance. Returns the posterior moments
/// and the log predictive likelihood of `z`.
pub fn kf_update(
    m: &GaussianMoments,
    z: &Vector2<f64>,
    model: &MeasurementModel,
) -> Result<(GaussianMoments, f64)> {
    let (zhat, s) = predict_measurement(m, model);
    let chol = Cholesky::new(s).ok_or(Error::NotPositiveDefinite("kf_update innovation"))?;
    let log_lik = log_gaussian2(z, &zhat, &chol);
    let s_inv = chol.inverse();
    let k = m.cov * model.h.transpose() * s_inv;
    let mean = m.mean + k * (z - zhat);
    let i_kh = Matrix4::identity() - k * model.h;
    let cov = sym4(i_kh * m.cov * i_kh.transpose() + k * model.r * k.transpose());
    Ok((GaussianMoments { mean, cov }, log_lik))
}

/// Rauch-Tung-Striebel smoother. `filtered` covers consecutive scans; `predicted[t]`
/// must be the one-step prediction of `filtered[t]` (so its length is one less).
pub fn rts_smooth(
    filtered: &[GaussianMoments],
    predicted: &[GaussianMoments],
    model: &MotionModel,
) -> Result<Vec<GaussianMoments>> {
    if filtered.is_empty() {
        return Err(Error::EmptyInput("rts_smooth"));
    }
    if predicted.len() + 1 != filtered.len() {
        return Err(Error::LengthMismatch(format!(
            "rts_smooth: {} filtered vs {} predicted",
            filtered.len(),
            predicted.len()
        )));
    }
    let n = filtered.len();
    let mut out = filtered.to_vec();
    for t in (0..n - 1).rev() {
        let pred = &predicted[t];
        let chol = Cholesky::new(pred.cov)
            .ok_or(Error::NotPositiveDefinite("rts_smooth predicted covariance"))?;
        // G = P_f F' inv(P_pred), computed as (inv(P_pred) F P_f)'.
        let g = chol.solve(&(model.f * filtered[t].cov)).transpose();
        out[t] = GaussianMoments {
            mean: filtered[t].mean + g * (out[t + 1].mean - pred.mean),
            cov: sym4(filtered[t].cov + g * (out[t + 1].cov - pred.cov) * g.transpose()),
        };
    }
    Ok(out)
}

/// Chi-square quantile, used for the gate threshold.
pub fn chi_square_quantile(prob: f64, dof: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&prob) || prob == 0.0 {
        return Err(Error::InvalidParameter(format!(
            "gate probability {prob} outside (0, 1)"
        )));
    }
    let dist = ChiSquared::new(dof as f64)
        .map_err(|e| Error::InvalidParameter(format!("chi-square dof {dof}: {e}")))?;
    Ok(dist.inverse_cdf(prob))
}

/// Ellipsoidal gate test: true when the squared Mahalanobis distance of `z` from
/// the predicted measurement is at most `threshold` (boundary inclusive).
pub fn gate(z: &Vector2<f64>, mean: &Vector2<f64>, cov: &Matrix2<f64>, threshold: f64) -> Result<bool> {
    let chol = Cholesky::new(*cov).ok_or(Error::NotPositiveDefinite("gate covariance"))?;
    Ok(mahalanobis2(z, mean, &chol) <= threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector4;

    fn moments(mean: [f64; 4], cov: Matrix4<f64>) -> GaussianMoments {
        GaussianMoments {
            mean: Vector4::from_column_slice(&mean),
            cov,
        }
    }

    #[test]
    fn predict_identity_keeps_moments() {
        let model = MotionModel {
            f: Matrix4::identity(),
            q: Matrix4::zeros(),
            survival: 1.0,
        };
        let m = moments([1.0, 2.0, 3.0, 4.0], Matrix4::identity() * 2.0);
        let p = kf_predict(&m, &model);
        assert_eq!(p.mean, m.mean);
        assert_eq!(p.cov, m.cov);
    }

    #[test]
    fn predict_ncv_moves_position_by_velocity() {
        let model = ncv_motion(1.0, 0.09, 0.98);
        let m = moments([0.0, 1.0, 10.0, -2.0], Matrix4::identity());
        let p = kf_predict(&m, &model);
        assert_relative_eq!(p.mean[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(p.mean[1], 1.0, epsilon = 1e-14);
        assert_relative_eq!(p.mean[2], 8.0, epsilon = 1e-14);
        assert_relative_eq!(p.mean[3], -2.0, epsilon = 1e-14);
        // Hand expansion of F P F' + Q for P = I: position variance 2 + noise*ts^3/2.
        assert_relative_eq!(p.cov[(0, 0)], 2.0 + 0.045, epsilon = 1e-14);
        assert_relative_eq!(p.cov[(0, 1)], 1.0 + 0.045, epsilon = 1e-14);
        assert_relative_eq!(p.cov[(1, 1)], 1.0 + 0.09, epsilon = 1e-14);
        assert_relative_eq!(p.cov[(2, 3)], 1.0 + 0.045, epsilon = 1e-14);
    }

    #[test]
    fn ncv_process_noise_is_positive_definite() {
        let model = ncv_motion(1.0, 0.09, 0.98);
        assert!(Cholesky::new(model.q).is_some());
    }

    fn region() -> Region {
        Region {
            xmin: -200.0,
            xmax: 200.0,
            ymin: -200.0,
            ymax: 200.0,
        }
    }

    #[test]
    fn update_matches_per_axis_conjugacy() {
        // Position prior N(0, I), R = I, z = (2, 0): posterior N((1,0), I/2) per axis,
        // log-likelihood is the sum of two 1-D predictive densities N(.; 0, 2).
        let model = position_measurement(1.0, 0.7, 30.0, region());
        let m = moments([0.0, 5.0, 0.0, -5.0], Matrix4::identity());
        let z = Vector2::new(2.0, 0.0);
        let (post, log_lik) = kf_update(&m, &z, &model).unwrap();
        assert_relative_eq!(post.mean[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(post.mean[2], 0.0, epsilon = 1e-12);
        assert_relative_eq!(post.mean[1], 5.0, epsilon = 1e-12);
        assert_relative_eq!(post.cov[(0, 0)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(post.cov[(2, 2)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(post.cov[(1, 1)], 1.0, epsilon = 1e-12);
        let expect = -0.5 * ((2.0 * std::f64::consts::PI * 2.0).ln() + 4.0 / 2.0)
            - 0.5 * (2.0 * std::f64::consts::PI * 2.0).ln();
        assert_relative_eq!(log_lik, expect, epsilon = 1e-12);
    }

    #[test]
    fn update_with_certain_prior_keeps_prior() {
        let model = position_measurement(1.0, 0.7, 30.0, region());
        let m = moments([1.0, 0.0, -1.0, 0.0], Matrix4::zeros());
        let z = Vector2::new(1.5, -1.0);
        let (post, log_lik) = kf_update(&m, &z, &model).unwrap();
        assert_relative_eq!(post.mean[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(post.cov.norm(), 0.0, epsilon = 1e-12);
        // Predictive is N(z; Hm, R).
        let expect = -LN_2PI - 0.5 * (0.5f64.powi(2) + 0.0);
        assert_relative_eq!(log_lik, expect, epsilon = 1e-12);
    }

    #[test]
    fn update_posterior_matches_grid_quadrature() {
        // Correlated position prior embedded in 4-D with decoupled velocities; the
        // position block of the posterior must match direct Bayes on a 2-D grid.
        let mut cov = Matrix4::zeros();
        cov[(0, 0)] = 1.0;
        cov[(0, 2)] = 0.3;
        cov[(2, 0)] = 0.3;
        cov[(2, 2)] = 0.8;
        cov[(1, 1)] = 2.0;
        cov[(3, 3)] = 2.0;
        let m = moments([0.2, 0.0, -0.4, 0.0], cov);
        let mut model = position_measurement(1.0, 0.7, 30.0, region());
        model.r = Matrix2::new(0.5, 0.1, 0.1, 0.4);
        let z = Vector2::new(1.1, 0.3);
        let (post, log_lik) = kf_update(&m, &z, &model).unwrap();

        let prior_mean = Vector2::new(m.mean[0], m.mean[2]);
        let prior_cov = Matrix2::new(1.0, 0.3, 0.3, 0.8);
        let pchol = Cholesky::new(prior_cov).unwrap();
        let rchol = Cholesky::new(model.r).unwrap();
        let n = 501;
        let half = 8.0;
        let hx = 2.0 * half / n as f64;
        let (mut mass, mut ex, mut ey, mut exx, mut exy, mut eyy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for ix in 0..n {
            let x = prior_mean.x - half + (ix as f64 + 0.5) * hx;
            for iy in 0..n {
                let y = prior_mean.y - half + (iy as f64 + 0.5) * hx;
                let p = Vector2::new(x, y);
                let f = (log_gaussian2(&p, &prior_mean, &pchol)
                    + log_gaussian2(&z, &p, &rchol))
                .exp();
                mass += f;
                ex += f * x;
                ey += f * y;
                exx += f * x * x;
                exy += f * x * y;
                eyy += f * y * y;
            }
        }
        let (mx, my) = (ex / mass, ey / mass);
        assert_relative_eq!(post.mean[0], mx, max_relative = 1e-4);
        assert_relative_eq!(post.mean[2], my, max_relative = 1e-4);
        assert_relative_eq!(post.cov[(0, 0)], exx / mass - mx * mx, max_relative = 1e-4);
        assert_relative_eq!(post.cov[(0, 2)], exy / mass - mx * my, max_relative = 1e-4);
        assert_relative_eq!(post.cov[(2, 2)], eyy / mass - my * my, max_relative = 1e-4);
        assert_relative_eq!(log_lik.exp(), mass * hx * hx, max_relative = 1e-4);
    }

    #[test]
    fn smoother_single_step_is_identity() {
        let model = ncv_motion(1.0, 0.09, 0.98);
        let f = vec![moments([1.0, 0.0, 2.0, 0.0], Matrix4::identity())];
        let s = rts_smooth(&f, &[], &model).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean, f[0].mean);
    }

    #[test]
    fn smoother_rejects_mismatched_lengths() {
        let model = ncv_motion(1.0, 0.09, 0.98);
        let f = vec![
            moments([0.0; 4], Matrix4::identity()),
            moments([0.0; 4], Matrix4::identity()),
        ];
        assert!(matches!(
            rts_smooth(&f, &[], &model),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn smoother_recovers_straight_line_under_tiny_noise() {
        // Filter a constant-velocity track with near-zero process noise and exact
        // position measurements; smoothing must land on the line.
        let motion = ncv_motion(1.0, 1e-12, 1.0);
        let mut model = position_measurement(1e-12, 1.0, 0.0, region());
        model.clutter_rate = 1.0;
        let mut filt = vec![moments([0.0, 1.0, 0.0, 2.0], Matrix4::identity() * 10.0)];
        let mut preds = Vec::new();
        for t in 1..5usize {
            let pred = kf_predict(filt.last().unwrap(), &motion);
            let z = Vector2::new(t as f64, 2.0 * t as f64);
            let (post, _) = kf_update(&pred, &z, &model).unwrap();
            preds.push(pred);
            filt.push(post);
        }
        let sm = rts_smooth(&filt, &preds, &motion).unwrap();
        for (t, s) in sm.iter().enumerate() {
            assert_relative_eq!(s.mean[0], t as f64, epsilon = 1e-5);
            assert_relative_eq!(s.mean[2], 2.0 * t as f64, epsilon = 1e-5);
            assert_relative_eq!(s.mean[1], 1.0, epsilon = 1e-4);
            assert_relative_eq!(s.mean[3], 2.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn chi_square_matches_closed_form_for_two_dof() {
        // For 2 dof the quantile is exactly -2 ln(1 - p).
        for p in [0.5, 0.9, 0.99, 0.999, 0.9999] {
            let q = chi_square_quantile(p, 2).unwrap();
            assert_relative_eq!(q, -2.0 * (1.0 - p).ln(), max_relative = 1e-9);
        }
        let q = chi_square_quantile(0.999, 2).unwrap();
        assert_relative_eq!(q, 13.8155, epsilon = 1e-3);
    }

    #[test]
    fn gate_boundary_is_inclusive() {
        let cov = Matrix2::identity();
        let mean = Vector2::zeros();
        let thr = 4.0;
        assert!(gate(&Vector2::new(2.0, 0.0), &mean, &cov, thr).unwrap());
        assert!(gate(&Vector2::zeros(), &mean, &cov, thr).unwrap());
        assert!(!gate(&Vector2::new(2.0 + 1e-9, 0.0), &mean, &cov, thr).unwrap());
    }

    #[test]
    fn quantile_rejects_bad_probability() {
        assert!(chi_square_quantile(0.0, 2).is_err());
        assert!(chi_square_quantile(1.0, 2).is_err());
    }
}
