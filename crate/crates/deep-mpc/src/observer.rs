//! Modified state observer in the auxiliary estimation circuit.
//!
//! The observer integrates the estimated plant with a correction
//! +Lambda*(x - xhat) and exposes the estimation error that drives the
//! online sign-descent training of the uncertainty approximator. The
//! instantaneous regression target is the residual implied by the
//! correction term: the approximator output plus B^+ Lambda e_a.

use nalgebra::{DMatrix, DVector};

use crate::approximator::Approximator;
use crate::error::{check_dim, Error, Result};
use crate::plant::{eval_known_dynamics, ControlInput, PlantModel, State};

/// Observer estimate and gain.
#[derive(Clone, Debug)]
pub struct ObserverState {
    pub x_hat: State,
    gain: DMatrix<f64>,
}

/// Tracking error, estimation error, and estimate tracking error.
#[derive(Clone, Debug)]
pub struct ErrorTriple {
    /// e_r = x - x_d
    pub tracking: DVector<f64>,
    /// e_a = x - xhat
    pub estimation: DVector<f64>,
    /// ehat_r = xhat - x_d
    pub estimate_tracking: DVector<f64>,
}

impl ObserverState {
    /// Requires a symmetric positive-definite gain.
    pub fn new(x_hat: State, gain: DMatrix<f64>) -> Result<Self> {
        check_dim("observer gain rows", x_hat.len(), gain.nrows())?;
        check_dim("observer gain cols", x_hat.len(), gain.ncols())?;
        if (&gain - gain.transpose()).norm() > 1e-10 * (1.0 + gain.norm()) {
            return Err(Error::NotPositiveDefinite("gain is not symmetric"));
        }
        let eig = gain.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&e| e <= 0.0) {
            return Err(Error::NotPositiveDefinite(
                "gain has a non-positive eigenvalue",
            ));
        }
        Ok(ObserverState { x_hat, gain })
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }
}

/// e_r = x - x_d, e_a = x - xhat, ehat_r = xhat - x_d.
pub fn error_triple(x: &State, x_hat: &State, x_d: &State) -> Result<ErrorTriple> {
    check_dim("x_hat", x.len(), x_hat.len())?;
    check_dim("x_d", x.len(), x_d.len())?;
    Ok(ErrorTriple {
        tracking: &x.0 - &x_d.0,
        estimation: &x.0 - &x_hat.0,
        estimate_tracking: &x_hat.0 - &x_d.0,
    })
}

/// Observer derivative: f(x) + B*(xi_hat + u) + Lambda*(x - xhat).
pub fn observer_derivative(
    model: &PlantModel,
    x: &State,
    observer: &ObserverState,
    u: &ControlInput,
    xi_hat: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("uncertainty estimate", model.n_u(), xi_hat.len())?;
    check_dim("control input", model.n_u(), u.len())?;
    let f = eval_known_dynamics(model, x)?;
    let correction = &observer.gain * (&x.0 - &observer.x_hat.0);
    Ok(f + model.control_matrix() * (xi_hat + &u.0) + correction)
}

/// One sign-descent step of the uncertainty approximator against the
/// residual implied by the current estimation error:
/// target = xi_hat(x) + B^+ Lambda e_a.
pub fn train_uncertainty_step(
    approx: &mut Approximator,
    model: &PlantModel,
    observer: &ObserverState,
    x: &State,
    estimation_error: &DVector<f64>,
) -> Result<()> {
    check_dim("estimation error", model.n_x(), estimation_error.len())?;
    let b = model.control_matrix();
    let pinv = b
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|_| Error::RankDeficient)?;
    let implied_residual = pinv * (&observer.gain * estimation_error);
    let current = approx.forward(&x.0)?;
    let target = current + implied_residual;
    let grad = approx.gradient_of_loss(&x.0, &target)?;
    approx.sign_update(&grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{eval_true_dynamics, rk4_step, DisturbanceScenario};
    use approx::assert_relative_eq;

    #[test]
    fn error_triple_direct_substitution() {
        let x = State::from_slice(&[1.0, 0.0]);
        let x_hat = State::from_slice(&[0.5, 0.0]);
        let x_d = State::from_slice(&[0.0, 0.0]);
        let e = error_triple(&x, &x_hat, &x_d).unwrap();
        assert_relative_eq!(e.tracking[0], 1.0);
        assert_relative_eq!(e.estimation[0], 0.5);
        assert_relative_eq!(e.estimate_tracking[0], 0.5);
    }

    #[test]
    fn all_zero_when_coincident() {
        let x = State::from_slice(&[0.3, -0.2]);
        let e = error_triple(&x, &x, &x).unwrap();
        assert_eq!(e.tracking.norm(), 0.0);
        assert_eq!(e.estimation.norm(), 0.0);
        assert_eq!(e.estimate_tracking.norm(), 0.0);
    }

    #[test]
    fn decomposition_identity_on_random_triples() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let v = |rng: &mut rand_chacha::ChaCha8Rng| {
                State(DVector::from_fn(4, |_, _| rng.gen_range(-10.0..10.0)))
            };
            let (x, xh, xd) = (v(&mut rng), v(&mut rng), v(&mut rng));
            let e = error_triple(&x, &xh, &xd).unwrap();
            let residual = &e.tracking - (&e.estimation + &e.estimate_tracking);
            assert!(residual.norm() < 1e-12);
        }
    }

    #[test]
    fn gain_must_be_positive_definite() {
        let x_hat = State::from_slice(&[0.0, 0.0]);
        assert!(ObserverState::new(x_hat.clone(), DMatrix::zeros(2, 2)).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(ObserverState::new(x_hat.clone(), indef).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(ObserverState::new(x_hat.clone(), asym).is_err());
        assert!(ObserverState::new(x_hat, DMatrix::identity(2, 2) * 3.0).is_ok());
    }

    #[test]
    fn exact_estimate_tracks_plant() {
        let model = PlantModel::scalar_uncertain(0.8, 1.0);
        let x = State::from_slice(&[0.4]);
        let obs = ObserverState::new(x.clone(), DMatrix::identity(1, 1) * 5.0).unwrap();
        let u = ControlInput::from_slice(&[0.2]);
        let xi_exact = DVector::from_element(1, 0.8);
        let od = observer_derivative(&model, &x, &obs, &u, &xi_exact).unwrap();
        let pd = eval_true_dynamics(&model, &x, &u, &DisturbanceScenario::none(0), 0.0).unwrap();
        assert_relative_eq!(od[0], pd[0], epsilon = 1e-14);
    }

    /// With Lambda = lambda*I and an exact estimate, e_a decays as
    /// exp(-lambda t); check against the closed form after joint RK4
    /// integration of plant and observer.
    #[test]
    fn estimation_error_decays_exponentially_on_linear_toy() {
        let lambda = 4.0;
        let model = PlantModel::scalar_uncertain(0.5, 1.0);
        let scenario = DisturbanceScenario::none(0);
        let u = ControlInput::from_slice(&[0.0]);
        let xi_exact = DVector::from_element(1, 0.5);

        let mut x = State::from_slice(&[0.0]);
        let mut obs = ObserverState::new(
            State::from_slice(&[1.0]),
            DMatrix::identity(1, 1) * lambda,
        )
        .unwrap();
        let e0 = (x.0[0] - obs.x_hat.0[0]).abs();

        let h = 1e-3;
        let mut t = 0.0;
        let checkpoints = [0.5 / lambda, 1.0 / lambda, 2.0 / lambda];
        let mut next_cp = 0;
        while next_cp < checkpoints.len() {
            // joint integration of [x; xhat]
            let mut z = DVector::zeros(2);
            z[0] = x.0[0];
            z[1] = obs.x_hat.0[0];
            let zn = rk4_step(&z, t, h, |tt, zz| {
                let xs = State::from_slice(&[zz[0]]);
                let mut ob = obs.clone();
                ob.x_hat = State::from_slice(&[zz[1]]);
                let dx = eval_true_dynamics(&model, &xs, &u, &scenario, tt)?;
                let dxh = observer_derivative(&model, &xs, &ob, &u, &xi_exact)?;
                Ok(DVector::from_column_slice(&[dx[0], dxh[0]]))
            })
            .unwrap();
            x = State::from_slice(&[zn[0]]);
            obs.x_hat = State::from_slice(&[zn[1]]);
            t += h;
            if (t - checkpoints[next_cp]).abs() < h / 2.0 {
                let ea = (x.0[0] - obs.x_hat.0[0]).abs();
                let expected = e0 * (-lambda * t).exp();
                assert!(
                    (ea - expected).abs() / expected < 0.01,
                    "t={t}: |e_a|={ea}, expected {expected}"
                );
                next_cp += 1;
            }
        }
    }

    #[test]
    fn zero_estimation_error_leaves_weights_unchanged() {
        let model = PlantModel::scalar_uncertain(0.0, 0.0);
        let mut approx = Approximator::standard(1, 1, 1e-3, 11).unwrap();
        let before = approx.flat_weights();
        let obs = ObserverState::new(
            State::from_slice(&[0.0]),
            DMatrix::identity(1, 1) * 2.0,
        )
        .unwrap();
        train_uncertainty_step(
            &mut approx,
            &model,
            &obs,
            &State::from_slice(&[0.3]),
            &DVector::zeros(1),
        )
        .unwrap();
        assert_eq!(before, approx.flat_weights());
    }
}
