//! Dynamic-inversion control law: substitute desired reference dynamics
//! for the (estimated) plant dynamics by inverting the control matrix,
//! with slack augmentation when B is not square.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::plant::{ControlInput, State};

/// Stable linear reference system xdot_d = A_m x_d + B_m u_L.
#[derive(Clone, Debug)]
pub struct ReferenceModel {
    pub a_m: DMatrix<f64>,
    pub b_m: DMatrix<f64>,
    pub u_l: DVector<f64>,
}

impl ReferenceModel {
    /// Critically damped second-order reference per joint block:
    /// qddot_d = -wn^2 q_d - 2 wn qdot_d + wn^2 u_L.
    pub fn critically_damped(n_joints: usize, natural_frequency: f64) -> Self {
        let n = 2 * n_joints;
        let wn = natural_frequency;
        let mut a_m = DMatrix::zeros(n, n);
        let mut b_m = DMatrix::zeros(n, n_joints);
        for j in 0..n_joints {
            a_m[(j, n_joints + j)] = 1.0;
            a_m[(n_joints + j, j)] = -wn * wn;
            a_m[(n_joints + j, n_joints + j)] = -2.0 * wn;
            b_m[(n_joints + j, j)] = wn * wn;
        }
        ReferenceModel {
            a_m,
            b_m,
            u_l: DVector::zeros(n_joints),
        }
    }

    /// Desired derivative f*(x_d, u_L).
    pub fn desired_derivative(&self, x_d: &State) -> DVector<f64> {
        &self.a_m * &x_d.0 + &self.b_m * &self.u_l
    }
}

/// Orthonormal completion of a tall control matrix.
#[derive(Clone, Debug)]
pub struct SlackAugmentation {
    /// Columns spanning the orthogonal complement of range(B); empty when
    /// B is already square.
    pub b_slack: DMatrix<f64>,
    n_physical: usize,
}

impl SlackAugmentation {
    /// Extract the physical control components from an augmented solution.
    pub fn select(&self, augmented: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.n_physical,
            augmented.iter().take(self.n_physical).copied(),
        )
    }

    pub fn slack_components(&self, augmented: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            augmented.len() - self.n_physical,
            augmented.iter().skip(self.n_physical).copied(),
        )
    }
}

/// Complete a full-column-rank B to an invertible square matrix
/// [B | B_s] with B_s an orthonormal basis of range(B)^perp.
pub fn augment_slack(b: &DMatrix<f64>) -> Result<SlackAugmentation> {
    let (n, m) = (b.nrows(), b.ncols());
    if m > n || b.rank(1e-10) < m {
        return Err(Error::RankDeficient);
    }
    if m == n {
        return Ok(SlackAugmentation {
            b_slack: DMatrix::zeros(n, 0),
            n_physical: m,
        });
    }
    // orthonormal basis of range(B) via thin QR
    let q_range = b.clone().qr().q();
    // Gram-Schmidt the identity columns against range(B) and each other.
    let mut complement: Vec<DVector<f64>> = Vec::with_capacity(n - m);
    for i in 0..n {
        let mut v: DVector<f64> = DVector::zeros(n);
        v[i] = 1.0;
        for c in q_range.column_iter() {
            let proj = c.dot(&v);
            v -= c * proj;
        }
        for u in &complement {
            let proj = u.dot(&v);
            v -= u * proj;
        }
        let norm = v.norm();
        if norm > 1e-8 {
            complement.push(v / norm);
        }
        if complement.len() == n - m {
            break;
        }
    }
    if complement.len() != n - m {
        return Err(Error::RankDeficient);
    }
    let b_slack = DMatrix::from_columns(&complement.iter().map(|v| v.column(0)).collect::<Vec<_>>());
    Ok(SlackAugmentation {
        b_slack,
        n_physical: m,
    })
}

/// Result of the inversion law: the actuated input and any slack
/// components absorbed by the augmentation (reported, never actuated).
#[derive(Clone, Debug)]
pub struct InversionOutput {
    pub control: ControlInput,
    pub slack: DVector<f64>,
}

fn ensure_spd(gamma: &DMatrix<f64>) -> Result<()> {
    if (gamma - gamma.transpose()).norm() > 1e-10 * (1.0 + gamma.norm()) {
        return Err(Error::NotPositiveDefinite("Gamma is not symmetric"));
    }
    let eig = gamma.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&e| e <= 0.0) {
        return Err(Error::NotPositiveDefinite("Gamma has a non-positive eigenvalue"));
    }
    Ok(())
}

/// u = B^-1 (f*(x_d, u_L) - fhat(x) - Gamma (x - x_d)), solved through the
/// slack-augmented square system when B is tall.
pub fn inversion_control(
    x: &State,
    x_d: &State,
    desired_derivative: &DVector<f64>,
    f_hat_total: &DVector<f64>,
    gamma: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<InversionOutput> {
    let n = b.nrows();
    check_dim("state", n, x.len())?;
    check_dim("desired state", n, x_d.len())?;
    check_dim("desired derivative", n, desired_derivative.len())?;
    check_dim("dynamics estimate", n, f_hat_total.len())?;
    ensure_spd(gamma)?;
    let rhs = desired_derivative - f_hat_total - gamma * (&x.0 - &x_d.0);

    if b.ncols() == n {
        let u = b
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or(Error::SingularControlMatrix)?;
        return Ok(InversionOutput {
            control: ControlInput(u),
            slack: DVector::zeros(0),
        });
    }

    let aug = augment_slack(b)?;
    let mut square = DMatrix::zeros(n, n);
    square.columns_mut(0, b.ncols()).copy_from(b);
    square
        .columns_mut(b.ncols(), n - b.ncols())
        .copy_from(&aug.b_slack);
    let solution = square
        .lu()
        .solve(&rhs)
        .ok_or(Error::SingularControlMatrix)?;
    Ok(InversionOutput {
        control: ControlInput(aug.select(&solution)),
        slack: aug.slack_components(&solution),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{eval_known_dynamics, eval_true_dynamics, rk4_step, DisturbanceScenario, PlantModel};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn no_correction_needed_at_reference() {
        let b = DMatrix::identity(2, 2);
        let gamma = DMatrix::identity(2, 2) * 2.0;
        let x = State::from_slice(&[0.3, -0.1]);
        let desired = DVector::from_column_slice(&[0.7, 0.2]);
        let out = inversion_control(&x, &x, &desired, &desired, &gamma, &b).unwrap();
        assert!(out.control.norm() < 1e-14);
    }

    #[test]
    fn scalar_hand_evaluation() {
        // B=1, f*=0, fhat=0.5, Gamma=2, x=1, x_d=0 -> u = -2.5
        let b = DMatrix::identity(1, 1);
        let gamma = DMatrix::identity(1, 1) * 2.0;
        let out = inversion_control(
            &State::from_slice(&[1.0]),
            &State::from_slice(&[0.0]),
            &DVector::zeros(1),
            &DVector::from_element(1, 0.5),
            &gamma,
            &b,
        )
        .unwrap();
        assert_relative_eq!(out.control[0], -2.5);
    }

    #[test]
    fn substitution_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let b = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0))
                + DMatrix::identity(3, 3) * 2.0;
            let mut gamma = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-0.2..0.2));
            gamma = &gamma * gamma.transpose() + DMatrix::identity(3, 3);
            let x = State(DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)));
            let x_d = State(DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)));
            let desired = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let f_hat = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let out = inversion_control(&x, &x_d, &desired, &f_hat, &gamma, &b).unwrap();
            let reproduced = &b * &out.control.0 + &f_hat;
            let expected = &desired - &gamma * (&x.0 - &x_d.0);
            assert!((reproduced - expected).norm() < 1e-10);
        }
    }

    #[test]
    fn square_b_needs_no_slack() {
        let aug = augment_slack(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(aug.b_slack.ncols(), 0);
        let v = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        assert_eq!(aug.select(&v), v);
    }

    #[test]
    fn tall_b_completion_spans_complement() {
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let aug = augment_slack(&b).unwrap();
        assert_eq!(aug.b_slack.ncols(), 1);
        // B_s = [1; 0] up to sign
        assert_relative_eq!(aug.b_slack[(0, 0)].abs(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(aug.b_slack[(1, 0)].abs(), 0.0, epsilon = 1e-12);
        let mut square = DMatrix::zeros(2, 2);
        square.columns_mut(0, 1).copy_from(&b);
        square.columns_mut(1, 1).copy_from(&aug.b_slack);
        assert!(square.determinant().abs() > 0.5);
    }

    #[test]
    fn augmented_solve_matches_least_squares_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let b = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
            if b.rank(1e-8) < 2 {
                continue;
            }
            let coeff = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let rhs = &b * &coeff; // rhs in range(B)
            let aug = augment_slack(&b).unwrap();
            let mut square = DMatrix::zeros(4, 4);
            square.columns_mut(0, 2).copy_from(&b);
            square.columns_mut(2, 2).copy_from(&aug.b_slack);
            let sol = square.lu().solve(&rhs).unwrap();
            let physical = aug.select(&sol);
            // least-squares oracle
            let ls = b.clone().svd(true, true).solve(&rhs, 1e-12).unwrap();
            assert!((physical - ls).norm() < 1e-9);
            // slack is zero for in-range targets
            assert!(aug.slack_components(&sol).norm() < 1e-9);
        }
    }

    #[test]
    fn rank_deficient_b_is_rejected() {
        let b = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert!(augment_slack(&b).is_err());
    }

    /// Closed-loop tracking on a fully actuated linear plant with exact
    /// estimate: ||e_r(t)|| follows the exp(-lambda_min(Gamma) t) envelope.
    #[test]
    fn closed_loop_error_follows_exponential_envelope() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::identity(2, 2);
        let model = PlantModel::linear(a, b.clone(), DVector::zeros(2), 0.0).unwrap();
        let gamma = DMatrix::identity(2, 2) * 3.0;
        let scenario = DisturbanceScenario::none(0);

        let x_d = State::from_slice(&[0.0, 0.0]);
        let desired = DVector::zeros(2);
        let mut x = State::from_slice(&[1.0, -0.5]);
        let e0 = x.norm();
        let h = 1e-3;
        let mut t = 0.0;
        while t < 1.0 - 1e-9 {
            let f_hat = eval_known_dynamics(&model, &x).unwrap();
            let out = inversion_control(&x, &x_d, &desired, &f_hat, &gamma, &b).unwrap();
            let next = rk4_step(&x.0, t, h, |tt, xx| {
                eval_true_dynamics(&model, &State(xx.clone()), &out.control, &scenario, tt)
            })
            .unwrap();
            x = State(next);
            t += h;
            // control held over one step is near-continuous at h=1e-3
        }
        let expected = e0 * (-3.0f64 * t).exp();
        assert!(
            ((x.norm() - expected) / expected).abs() < 0.05,
            "||e_r(1)|| = {}, envelope {}",
            x.norm(),
            expected
        );
    }

    /// Doubling the scalar gain at least halves the settling time.
    #[test]
    fn gain_monotonicity_on_double_integrator_drift() {
        let settle_time = |lambda: f64| -> f64 {
            let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
            let b = DMatrix::identity(2, 2);
            let model = PlantModel::linear(a, b.clone(), DVector::zeros(2), 0.0).unwrap();
            let gamma = DMatrix::identity(2, 2) * lambda;
            let scenario = DisturbanceScenario::none(0);
            let x_d = State::from_slice(&[0.0, 0.0]);
            let mut x = State::from_slice(&[1.0, 0.0]);
            let h = 1e-3;
            let mut t = 0.0;
            while x.norm() >= 1e-3 {
                let f_hat = eval_known_dynamics(&model, &x).unwrap();
                let out =
                    inversion_control(&x, &x_d, &DVector::zeros(2), &f_hat, &gamma, &b).unwrap();
                x = State(
                    rk4_step(&x.0, t, h, |tt, xx| {
                        eval_true_dynamics(&model, &State(xx.clone()), &out.control, &scenario, tt)
                    })
                    .unwrap(),
                );
                t += h;
            }
            t
        };
        let t1 = settle_time(2.0);
        let t2 = settle_time(4.0);
        assert!(t2 <= t1 / 2.0 + 2e-3, "t1={t1}, t2={t2}");
    }
}
