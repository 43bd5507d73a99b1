use nalgebra::{DMatrix, DVector};

use crate::spatial::Vec6;

use super::dynamics::{features, leg_odometry, model_increment, LegMeasurement, RigidBodyParams, FEATURE_DIM};
use super::net::ModelErrorNet;
use super::{EstimatorError, EstimatorState, Mat6, NoiseParams};

const S_REGULARIZATION: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub state: EstimatorState,
    /// Network correction added to the model step.
    pub correction: Vec6,
    pub q: Mat6,
}

/// Model step plus learned correction. The state Jacobian of the reduced model
/// is the identity, so `P <- P + Q` with `Q = eps eps^T + Q_floor`.
pub fn kf_predict(
    state: &EstimatorState,
    legs: &LegMeasurement,
    net: &ModelErrorNet,
    params: &RigidBodyParams,
    noise: &NoiseParams,
) -> Prediction {
    let phi = features(&state.x, legs);
    predict_from_increment(state, &model_increment(legs, params), &phi, net, noise, params.dt)
}

/// Same as [`kf_predict`] given a precomputed model increment `Dyn(x) - x`
/// and feature vector (the prior slots of `phi` are overwritten with `state.x`).
pub fn predict_from_increment(
    state: &EstimatorState,
    increment: &Vec6,
    phi: &[f64; FEATURE_DIM],
    net: &ModelErrorNet,
    noise: &NoiseParams,
    dt: f64,
) -> Prediction {
    let mut phi = *phi;
    phi[..6].copy_from_slice(state.x.as_slice());
    let eps = net.predict(&phi);
    let q = eps * eps.transpose() + noise.process_floor();
    let p = state.p + q;
    let next = EstimatorState {
        x: state.x + increment + eps,
        p: (p + p.transpose()) * 0.5,
        x_filtered: state.x_filtered,
        t: state.t + dt,
    };
    Prediction { state: next, correction: eps, q }
}

/// Stacked `[R omega_imu; v_odom]` in the world frame, and odometry validity.
pub fn measurement(legs: &LegMeasurement) -> (Vec6, bool) {
    let w = legs.world_angular_velocity();
    match leg_odometry(legs) {
        Some(v) => (Vec6::new(w.x, w.y, w.z, v.x, v.y, v.z), true),
        None => (Vec6::new(w.x, w.y, w.z, 0.0, 0.0, 0.0), false),
    }
}

/// Joseph-form update with `C = I`; the velocity rows are dropped when the
/// odometry is invalid.
pub fn kf_update(state: &EstimatorState, y: &Vec6, odometry_valid: bool, noise: &NoiseParams) -> EstimatorState {
    let m = if odometry_valid { 6 } else { 3 };
    let c = DMatrix::<f64>::identity(m, 6);
    let p = DMatrix::from_column_slice(6, 6, state.p.as_slice());
    let r = noise.measurement().view((0, 0), (m, m)).clone_owned();
    let r = DMatrix::from_column_slice(m, m, r.as_slice());
    let x = DVector::from_column_slice(state.x.as_slice());
    let innovation = DVector::from_column_slice(&y.as_slice()[..m]) - &c * &x;
    let mut s = &c * &p * c.transpose() + &r;
    let chol = match s.clone().cholesky() {
        Some(ch) => ch,
        None => {
            log::warn!("innovation covariance singular at t={:.4}; regularizing", state.t);
            s += DMatrix::identity(m, m) * S_REGULARIZATION;
            match s.clone().cholesky() {
                Some(ch) => ch,
                None => return state.clone(),
            }
        }
    };
    // K = P C^T S^-1, computed as (S^-1 C P)^T because S and P are symmetric.
    let k = chol.solve(&(&c * &p)).transpose();
    let x_new = &x + &k * innovation;
    let ikc = DMatrix::identity(6, 6) - &k * &c;
    let p_new = &ikc * &p * ikc.transpose() + &k * &r * k.transpose();
    let p_new = (&p_new + p_new.transpose()) * 0.5;
    EstimatorState {
        x: Vec6::from_column_slice(x_new.as_slice()),
        p: Mat6::from_column_slice(p_new.as_slice()),
        x_filtered: state.x_filtered,
        t: state.t,
    }
}

/// `x_f <- alpha x + (1 - alpha) x_f`; returns the new filtered value.
pub fn low_pass(state: &mut EstimatorState, alpha_lp: f64) -> Vec6 {
    state.x_filtered = state.x * alpha_lp + state.x_filtered * (1.0 - alpha_lp);
    state.x_filtered
}

/// Owns the filter state and runs predict, update and low-pass per sample.
#[derive(Debug, Clone)]
pub struct KalmanFilter {
    pub params: RigidBodyParams,
    pub noise: NoiseParams,
    pub alpha_lp: f64,
    pub net: ModelErrorNet,
    pub state: EstimatorState,
}

impl KalmanFilter {
    pub fn new(
        params: RigidBodyParams,
        noise: NoiseParams,
        alpha_lp: f64,
        net: ModelErrorNet,
        initial: EstimatorState,
    ) -> Result<Self, EstimatorError> {
        if !params.is_valid() {
            return Err(EstimatorError::BadParams);
        }
        if !(0.0..=1.0).contains(&alpha_lp) {
            return Err(EstimatorError::BadAlpha(alpha_lp));
        }
        Ok(Self { params, noise, alpha_lp, net, state: initial })
    }

    /// `legs` carries the inputs over the interval ending at this sample and
    /// the measurements taken at its end.
    pub fn step(&mut self, legs: &LegMeasurement) -> &EstimatorState {
        let pred = kf_predict(&self.state, legs, &self.net, &self.params, &self.noise);
        let (y, valid) = measurement(legs);
        self.state = kf_update(&pred.state, &y, valid, &self.noise);
        low_pass(&mut self.state, self.alpha_lp);
        &self.state
    }

    /// Replay variant driven by logged increments and measurements.
    pub fn step_logged(&mut self, increment: &Vec6, phi: &[f64; FEATURE_DIM], y: &Vec6, valid: bool) -> &EstimatorState {
        let pred = predict_from_increment(&self.state, increment, phi, &self.net, &self.noise, self.params.dt);
        self.state = kf_update(&pred.state, y, valid, &self.noise);
        low_pass(&mut self.state, self.alpha_lp);
        &self.state
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::dynamics::{reduced_dynamics, FootMeasurement};
    use crate::spatial::{Rotation, Vec3};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn stance_legs(v: Vec3) -> LegMeasurement {
        let p = RigidBodyParams::default();
        let f = Vec3::new(0.0, 0.0, p.mass * 9.81 / 4.0);
        let corners = [(0.2, 0.1), (0.2, -0.1), (-0.2, 0.1), (-0.2, -0.1)];
        let feet = corners.map(|(x, y)| FootMeasurement {
            contact: true,
            position: Vec3::new(x, y, -0.3),
            velocity: -v,
            grf: f,
        });
        LegMeasurement::new(feet, Vec3::zeros(), Rotation::identity())
    }

    #[test]
    fn zero_net_prediction_is_model_step() {
        let legs = stance_legs(Vec3::new(0.2, 0.0, 0.0));
        let s = EstimatorState::new(Vec6::new(0.0, 0.0, 0.1, 0.2, 0.0, 0.0), Mat6::identity() * 0.01);
        let params = RigidBodyParams::default();
        let noise = NoiseParams::default();
        let pred = kf_predict(&s, &legs, &ModelErrorNet::zeroed(), &params, &noise);
        assert_eq!(pred.correction, Vec6::zeros());
        assert_abs_diff_eq!(pred.state.x, reduced_dynamics(&s.x, &legs, &params), epsilon = 1e-15);
        assert_abs_diff_eq!(pred.q, Mat6::identity() * 1e-8, epsilon = 1e-20);
    }

    #[test]
    fn outer_product_rank_and_trace() {
        let eps = Vec6::new(0.1, -0.2, 0.3, 0.0, 0.5, -0.1);
        let q = eps * eps.transpose();
        assert_abs_diff_eq!(q.trace(), eps.norm_squared(), epsilon = 1e-15);
        assert_eq!(q.rank(1e-12), 1);
        let ev = nalgebra::SymmetricEigen::new(q).eigenvalues;
        assert!(ev.min() > -1e-15);
    }

    /// Independent transcription of predict/update for a sequence.
    #[test]
    fn matches_reference_transcription() {
        let params = RigidBodyParams::default();
        let noise = NoiseParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 0.05).unwrap();
        let mut s = EstimatorState::new(Vec6::zeros(), Mat6::identity() * 0.1);
        let mut xr = Vec6::zeros();
        let mut pr = Mat6::identity() * 0.1;
        for k in 0..50 {
            let mut legs = stance_legs(Vec3::new(0.1 * k as f64 / 50.0, 0.0, 0.0));
            for f in legs.feet.iter_mut() {
                f.grf += Vec3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
                f.velocity += Vec3::new(n.sample(&mut rng), 0.0, 0.0);
            }
            legs.feet[k % 4].contact = k % 7 != 0;
            let pred = kf_predict(&s, &legs, &ModelErrorNet::zeroed(), &params, &noise);
            let (y, valid) = measurement(&legs);
            s = kf_update(&pred.state, &y, valid, &noise);

            // reference: x- = x + dt [I^-1 sum p x f ; sum f / m + g], P- = P + Q
            let mut tq = Vec3::zeros();
            let mut fs = Vec3::zeros();
            for f in legs.feet.iter().filter(|f| f.contact) {
                tq += f.position.cross(&f.grf);
                fs += f.grf;
            }
            let inv = params.inertia.try_inverse().unwrap();
            let dw = inv * tq * params.dt;
            let dv = (fs / params.mass + params.gravity) * params.dt;
            let xm = xr + Vec6::new(dw.x, dw.y, dw.z, dv.x, dv.y, dv.z);
            let pm = pr + noise.process_floor();
            let rfull = *noise.measurement();
            let (rows, yv): (Vec<usize>, Vec6) = (if valid { (0..6).collect() } else { (0..3).collect() }, y);
            let mut xn = xm;
            let mut pn = pm;
            // sequential scalar updates are equivalent for diagonal R
            for &i in &rows {
                let sii = pn[(i, i)] + rfull[(i, i)];
                let kcol = pn.column(i) / sii;
                xn += kcol * (yv[i] - xn[i]);
                pn -= kcol * pn.row(i);
            }
            xr = xn;
            pr = (pn + pn.transpose()) * 0.5;
            assert_abs_diff_eq!(s.x, xr, epsilon = 1e-10);
            assert_abs_diff_eq!(s.p, pr, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_innovation_shrinks_covariance() {
        let s = EstimatorState::new(Vec6::new(0.1, 0.0, 0.0, 0.3, 0.0, 0.0), Mat6::identity() * 0.01);
        let out = kf_update(&s, &s.x, true, &NoiseParams::default());
        assert_abs_diff_eq!(out.x, s.x, epsilon = 1e-15);
        assert!(out.p.trace() < s.p.trace());
    }

    #[test]
    fn scalar_identity() {
        // With diagonal P and R each axis reduces to the scalar filter.
        let (p0, r0) = (0.7, 0.2);
        let noise = NoiseParams::new(Mat6::identity() * r0, 0.0).unwrap();
        let s = EstimatorState::new(Vec6::zeros(), Mat6::identity() * p0);
        let out = kf_update(&s, &Vec6::repeat(1.0), true, &noise);
        for i in 0..6 {
            assert_abs_diff_eq!(out.p[(i, i)], p0 * r0 / (p0 + r0), epsilon = 1e-14);
            assert_abs_diff_eq!(out.x[i], p0 / (p0 + r0), epsilon = 1e-14);
        }
    }

    #[test]
    fn invalid_odometry_leaves_velocity_unmeasured() {
        let s = EstimatorState::new(Vec6::zeros(), Mat6::identity() * 0.01);
        let y = Vec6::new(0.0, 0.0, 0.0, 5.0, 5.0, 5.0);
        let out = kf_update(&s, &y, false, &NoiseParams::default());
        assert_eq!(&out.x.as_slice()[3..], &[0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(out.p[(3, 3)], 0.01, epsilon = 1e-15);
    }

    #[test]
    fn near_perfect_measurement_is_adopted() {
        let noise = NoiseParams::new(Mat6::identity() * 1e-14, 1e-8).unwrap();
        let s = EstimatorState::new(Vec6::repeat(3.0), Mat6::identity());
        let y = Vec6::new(0.1, -0.2, 0.3, 1.0, 2.0, -1.0);
        let out = kf_update(&s, &y, true, &noise);
        assert_abs_diff_eq!(out.x, y, epsilon = 1e-8);
    }

    #[test]
    fn low_pass_closed_form() {
        let mut s = EstimatorState::new(Vec6::zeros(), Mat6::identity());
        s.x = Vec6::repeat(1.0);
        for k in 1..=10 {
            let v = low_pass(&mut s, 0.2);
            assert_abs_diff_eq!(v[0], 1.0 - 0.8f64.powi(k), epsilon = 1e-14);
        }
        let mut s = EstimatorState::new(Vec6::repeat(0.5), Mat6::identity());
        s.x = Vec6::repeat(2.0);
        assert_eq!(low_pass(&mut s, 1.0), Vec6::repeat(2.0));
        let mut s = EstimatorState::new(Vec6::repeat(0.5), Mat6::identity());
        s.x = Vec6::repeat(2.0);
        for _ in 0..100 {
            assert_eq!(low_pass(&mut s, 0.0), Vec6::repeat(0.5));
        }
    }

    #[test]
    fn constant_velocity_beats_raw_measurements() {
        let params = RigidBodyParams::default();
        let noise = NoiseParams::new(Mat6::identity() * 0.05f64.powi(2), 1e-8).unwrap();
        let truth = Vec3::new(0.4, -0.1, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = Normal::new(0.0, 0.05).unwrap();
        let mut kf = KalmanFilter::new(params, noise, 1.0, ModelErrorNet::zeroed(), EstimatorState::new(Vec6::zeros(), Mat6::identity())).unwrap();
        let (mut se_f, mut se_m) = (0.0, 0.0);
        for _ in 0..200 {
            let legs = stance_legs(truth);
            let pred = kf_predict(&kf.state, &legs, &kf.net, &kf.params, &kf.noise);
            let (mut y, _) = measurement(&legs);
            for i in 0..6 {
                y[i] += n.sample(&mut rng);
            }
            kf.state = kf_update(&pred.state, &y, true, &kf.noise);
            let t6 = Vec6::new(0.0, 0.0, 0.0, truth.x, truth.y, truth.z);
            se_f += (kf.state.x - t6).norm_squared();
            se_m += (y - t6).norm_squared();
        }
        assert!(se_f < se_m, "filter {se_f} vs raw {se_m}");
    }

    #[test]
    fn covariance_stays_psd_over_long_runs() {
        let params = RigidBodyParams::default();
        let noise = NoiseParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut s = EstimatorState::default();
        let mut worst: f64 = 0.0;
        for k in 0..100_000 {
            let legs = stance_legs(Vec3::zeros());
            let eps = Vec6::from_fn(|_, _| 0.01 * n.sample(&mut rng));
            let mut pred = kf_predict(&s, &legs, &ModelErrorNet::zeroed(), &params, &noise);
            pred.state.p += eps * eps.transpose();
            let y = Vec6::from_fn(|_, _| n.sample(&mut rng));
            s = kf_update(&pred.state, &y, k % 5 != 0, &noise);
            if k % 97 == 0 {
                worst = worst.min(s.min_eigenvalue());
                assert!(s.asymmetry() <= 1e-10);
            }
        }
        assert!(worst >= -1e-9);
    }
}
