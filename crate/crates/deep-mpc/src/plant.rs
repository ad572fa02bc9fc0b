//! Uncertain plant models: known drift f(x), constant control matrix B,
//! state-dependent uncertainty entering through B, and timed external-force
//! disturbance scenarios.
//!
//! Manipulators are expressed in computed-torque coordinates, so B = [0; I]
//! per joint block is constant and the control input is a commanded joint
//! acceleration; gravity/Coriolis drift stays in f and external pushes fold
//! into the uncertainty channel as M^-1 J^T F.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::arm::ArmParams;
use crate::error::{check_dim, Error, Result};

/// Plant state (manipulator: joint angles stacked over joint velocities).
#[derive(Clone, Debug, PartialEq)]
pub struct State(pub DVector<f64>);

/// Control input (manipulator: commanded joint accelerations).
#[derive(Clone, Debug, PartialEq)]
pub struct ControlInput(pub DVector<f64>);

impl State {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(State(values))
        } else {
            Err(Error::NonFinite("state"))
        }
    }

    pub fn from_slice(values: &[f64]) -> Self {
        State(DVector::from_column_slice(values))
    }
}

impl ControlInput {
    pub fn from_slice(values: &[f64]) -> Self {
        ControlInput(DVector::from_column_slice(values))
    }

    pub fn zeros(n_u: usize) -> Self {
        ControlInput(DVector::zeros(n_u))
    }
}

impl std::ops::Deref for State {
    type Target = DVector<f64>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl std::ops::Deref for ControlInput {
    type Target = DVector<f64>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

/// A timed external push on one link, world frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Push {
    /// 1-based link index; the force acts at the link's end point.
    pub link: usize,
    /// Force [fx, fy, fz] in newtons; fz is ignored by the planar models.
    pub force: [f64; 3],
    pub t_start: f64,
    pub t_end: f64,
    /// Optional modulation: force * sin(2*pi*f*(t - t_start)).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency_hz: Option<f64>,
}

/// One of the shipped disturbance scenarios.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DisturbanceScenario {
    pub scenario_id: u32,
    pub pushes: Vec<Push>,
}

impl DisturbanceScenario {
    pub fn none(scenario_id: u32) -> Self {
        Self {
            scenario_id,
            pushes: Vec::new(),
        }
    }

    pub fn validate(&self, n_links: usize) -> Result<()> {
        for p in &self.pushes {
            if p.link < 1 || p.link > n_links {
                return Err(Error::InvalidLink {
                    link: p.link,
                    n_links,
                });
            }
            if p.t_start >= p.t_end {
                return Err(Error::Config(format!(
                    "push window [{}, {}) is empty",
                    p.t_start, p.t_end
                )));
            }
        }
        Ok(())
    }
}

/// Planar force on `link` at time `t`: active pushes summed over [start, end).
pub fn external_wrench(
    scenario: &DisturbanceScenario,
    t: f64,
    link: usize,
    n_links: usize,
) -> Result<DVector<f64>> {
    if link < 1 || link > n_links {
        return Err(Error::InvalidLink { link, n_links });
    }
    let mut f = DVector::zeros(2);
    for p in &scenario.pushes {
        if p.link == link && t >= p.t_start && t < p.t_end {
            let scale = match p.frequency_hz {
                Some(freq) => (2.0 * std::f64::consts::PI * freq * (t - p.t_start)).sin(),
                None => 1.0,
            };
            f[0] += scale * p.force[0];
            f[1] += scale * p.force[1];
        }
    }
    Ok(f)
}

/// The uncertain nonlinear system xdot = f(x) + B*(xi(x,t) + u).
#[derive(Clone, Debug)]
pub enum PlantModel {
    /// xdot = A x + B (xi + u), constant uncertainty vector.
    Linear {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        xi: DVector<f64>,
        disturbance_bound: f64,
    },
    /// Planar point-mass chain in computed-torque coordinates, B = [0; I].
    Manipulator {
        arm: ArmParams,
        b: DMatrix<f64>,
        disturbance_bound: f64,
    },
}

impl PlantModel {
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>, xi: DVector<f64>, wbar: f64) -> Result<Self> {
        check_dim("linear plant B rows", a.nrows(), b.nrows())?;
        check_dim("linear plant xi", b.ncols(), xi.len())?;
        if b.rank(1e-12) < b.ncols() {
            return Err(Error::RankDeficient);
        }
        Ok(PlantModel::Linear {
            a,
            b,
            xi,
            disturbance_bound: wbar,
        })
    }

    /// Companion-form double integrator: x = (p, v), u = a, B = [0; 1].
    pub fn double_integrator() -> Self {
        PlantModel::Linear {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            b: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            xi: DVector::zeros(1),
            disturbance_bound: 0.0,
        }
    }

    /// Scalar plant xdot = xi + u with constant uncertainty.
    pub fn scalar_uncertain(xi: f64, wbar: f64) -> Self {
        PlantModel::Linear {
            a: DMatrix::zeros(1, 1),
            b: DMatrix::identity(1, 1),
            xi: DVector::from_element(1, xi),
            disturbance_bound: wbar,
        }
    }

    pub fn manipulator(arm: ArmParams, wbar: f64) -> Self {
        let n = arm.n_links();
        let mut b = DMatrix::zeros(2 * n, n);
        for j in 0..n {
            b[(n + j, j)] = 1.0;
        }
        PlantModel::Manipulator {
            arm,
            b,
            disturbance_bound: wbar,
        }
    }

    pub fn two_link() -> Self {
        Self::manipulator(ArmParams::uniform(2), 0.0)
    }

    pub fn three_link() -> Self {
        Self::manipulator(ArmParams::uniform(3), 0.0)
    }

    pub fn n_x(&self) -> usize {
        match self {
            PlantModel::Linear { a, .. } => a.nrows(),
            PlantModel::Manipulator { arm, .. } => 2 * arm.n_links(),
        }
    }

    pub fn n_u(&self) -> usize {
        self.control_matrix().ncols()
    }

    pub fn n_links(&self) -> usize {
        match self {
            PlantModel::Linear { .. } => 0,
            PlantModel::Manipulator { arm, .. } => arm.n_links(),
        }
    }

    pub fn control_matrix(&self) -> &DMatrix<f64> {
        match self {
            PlantModel::Linear { b, .. } => b,
            PlantModel::Manipulator { b, .. } => b,
        }
    }

    pub fn disturbance_bound(&self) -> f64 {
        match self {
            PlantModel::Linear {
                disturbance_bound, ..
            } => *disturbance_bound,
            PlantModel::Manipulator {
                disturbance_bound, ..
            } => *disturbance_bound,
        }
    }

    pub fn arm(&self) -> Option<&ArmParams> {
        match self {
            PlantModel::Manipulator { arm, .. } => Some(arm),
            _ => None,
        }
    }
}

/// Known drift term f(x): excludes control and uncertainty.
pub fn eval_known_dynamics(model: &PlantModel, x: &State) -> Result<DVector<f64>> {
    check_dim("state", model.n_x(), x.len())?;
    match model {
        PlantModel::Linear { a, .. } => Ok(a * &x.0),
        PlantModel::Manipulator { arm, .. } => {
            let n = arm.n_links();
            let q = x.0.rows(0, n).iter().copied().collect::<Vec<_>>();
            let qd = x.0.rows(n, n).iter().copied().collect::<Vec<_>>();
            let acc = arm.forward_accel(&q, &qd, &DVector::zeros(n));
            let mut dx = DVector::zeros(2 * n);
            dx.rows_mut(0, n).copy_from(&x.0.rows(n, n));
            dx.rows_mut(n, n).copy_from(&acc);
            Ok(dx)
        }
    }
}

/// Uncertainty xi(x, t) seen through the control channel: intrinsic model
/// uncertainty plus scenario pushes mapped as M^-1 J^T F.
pub fn eval_uncertainty(
    model: &PlantModel,
    x: &State,
    scenario: &DisturbanceScenario,
    t: f64,
) -> Result<DVector<f64>> {
    check_dim("state", model.n_x(), x.len())?;
    match model {
        PlantModel::Linear { xi, .. } => {
            if !scenario.pushes.is_empty() {
                return Err(Error::Config(
                    "link pushes are only defined for manipulator models".into(),
                ));
            }
            Ok(xi.clone())
        }
        PlantModel::Manipulator { arm, .. } => {
            let n = arm.n_links();
            scenario.validate(n)?;
            let q = x.0.rows(0, n).iter().copied().collect::<Vec<_>>();
            let mut tau = DVector::zeros(n);
            for link in 1..=n {
                let f = external_wrench(scenario, t, link, n)?;
                if f[0] != 0.0 || f[1] != 0.0 {
                    tau += arm.link_jacobian(&q, link).transpose() * f;
                }
            }
            let m = arm.mass_matrix(&q);
            Ok(m.lu().solve(&tau).expect("mass matrix positive-definite"))
        }
    }
}

/// Full plant derivative f(x) + B*xi(x,t) + B*u.
pub fn eval_true_dynamics(
    model: &PlantModel,
    x: &State,
    u: &ControlInput,
    scenario: &DisturbanceScenario,
    t: f64,
) -> Result<DVector<f64>> {
    check_dim("control input", model.n_u(), u.len())?;
    let f = eval_known_dynamics(model, x)?;
    let xi = eval_uncertainty(model, x, scenario, t)?;
    Ok(f + model.control_matrix() * (xi + &u.0))
}

/// One classical RK4 step of an arbitrary time-varying derivative.
pub fn rk4_step<F>(x: &DVector<f64>, t: f64, h: f64, mut deriv: F) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = deriv(t, x)?;
    let k2 = deriv(t + 0.5 * h, &(x + &k1 * (0.5 * h)))?;
    let k3 = deriv(t + 0.5 * h, &(x + &k2 * (0.5 * h)))?;
    let k4 = deriv(t + h, &(x + &k3 * h))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// One RK4 step of the true plant dynamics under zero-order-hold input.
pub fn integrate_step(
    model: &PlantModel,
    x: &State,
    u: &ControlInput,
    scenario: &DisturbanceScenario,
    t: f64,
    h: f64,
) -> Result<State> {
    if h <= 0.0 {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    let next = rk4_step(&x.0, t, h, |tt, xx| {
        eval_true_dynamics(model, &State(xx.clone()), u, scenario, tt)
    })?;
    State::new(next).map_err(|_| Error::IntegrationBlowUp { t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn no_dist() -> DisturbanceScenario {
        DisturbanceScenario::none(0)
    }

    #[test]
    fn double_integrator_companion_form() {
        let model = PlantModel::double_integrator();
        let x = State::from_slice(&[0.7, -1.3]);
        let u = ControlInput::from_slice(&[2.0]);
        let dx = eval_true_dynamics(&model, &x, &u, &no_dist(), 0.0).unwrap();
        assert_relative_eq!(dx[0], -1.3);
        assert_relative_eq!(dx[1], 2.0);
        let f = eval_known_dynamics(&model, &x).unwrap();
        assert_relative_eq!(f[0], -1.3);
        assert_relative_eq!(f[1], 0.0);
    }

    #[test]
    fn hanging_arm_is_an_equilibrium() {
        let model = PlantModel::two_link();
        let x = State::from_slice(&[0.0, 0.0, 0.0, 0.0]);
        let dx =
            eval_true_dynamics(&model, &x, &ControlInput::zeros(2), &no_dist(), 0.0).unwrap();
        assert!(dx.norm() < 1e-12);
        let stepped = integrate_step(&model, &x, &ControlInput::zeros(2), &no_dist(), 0.0, 0.01)
            .unwrap();
        assert!((stepped.0 - x.0).norm() < 1e-12);
    }

    #[test]
    fn wrench_schedule_lookup() {
        let scenario = DisturbanceScenario {
            scenario_id: 2,
            pushes: vec![Push {
                link: 2,
                force: [0.0, -10.0, 0.0],
                t_start: 2.0,
                t_end: 4.0,
                frequency_hz: None,
            }],
        };
        let before = external_wrench(&scenario, 1.0, 2, 3).unwrap();
        assert_relative_eq!(before.norm(), 0.0);
        let during = external_wrench(&scenario, 3.0, 2, 3).unwrap();
        assert_relative_eq!(during[0], 0.0);
        assert_relative_eq!(during[1], -10.0);
        // half-open window
        let at_end = external_wrench(&scenario, 4.0, 2, 3).unwrap();
        assert_relative_eq!(at_end.norm(), 0.0);
        assert!(external_wrench(&scenario, 3.0, 5, 3).is_err());
    }

    #[test]
    fn overlapping_pushes_superpose() {
        let scenario = DisturbanceScenario {
            scenario_id: 6,
            pushes: vec![
                Push {
                    link: 1,
                    force: [1.0, 2.0, 0.0],
                    t_start: 0.0,
                    t_end: 5.0,
                    frequency_hz: None,
                },
                Push {
                    link: 1,
                    force: [0.5, -1.0, 0.0],
                    t_start: 1.0,
                    t_end: 3.0,
                    frequency_hz: None,
                },
            ],
        };
        let f = external_wrench(&scenario, 2.0, 1, 2).unwrap();
        assert_relative_eq!(f[0], 1.5);
        assert_relative_eq!(f[1], 1.0);
    }

    #[test]
    fn rk4_exact_on_double_integrator_drift() {
        let model = PlantModel::double_integrator();
        let x = State::from_slice(&[0.0, 1.0]);
        let next =
            integrate_step(&model, &x, &ControlInput::zeros(1), &no_dist(), 0.0, 0.1).unwrap();
        assert_relative_eq!(next[0], 0.1, epsilon = 1e-14);
        assert_relative_eq!(next[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn rk4_fourth_order_convergence_on_arm() {
        let model = PlantModel::two_link();
        let x0 = State::from_slice(&[0.8, -0.4, 0.3, 0.6]);
        let u = ControlInput::zeros(2);
        let integrate = |h: f64, t_final: f64| -> State {
            let mut x = x0.clone();
            let mut t = 0.0;
            while t < t_final - 1e-12 {
                x = integrate_step(&model, &x, &u, &no_dist(), t, h).unwrap();
                t += h;
            }
            x
        };
        // reference with h/10
        let reference = integrate(1e-3, 0.1);
        let hs = [1e-2, 5e-3, 2.5e-3];
        let errs: Vec<f64> = hs
            .iter()
            .map(|&h| (integrate(h, 0.1).0.clone() - &reference.0).norm())
            .collect();
        let order01 = (errs[0] / errs[1]).log2();
        let order12 = (errs[1] / errs[2]).log2();
        assert!(order01 >= 3.7, "observed order {order01}");
        assert!(order12 >= 3.7, "observed order {order12}");
    }

    #[test]
    fn undriven_arm_conserves_energy() {
        let model = PlantModel::two_link();
        let arm = model.arm().unwrap().clone();
        let mut x = State::from_slice(&[1.0, 0.5, 0.0, 0.0]);
        let e0 = arm.total_energy(&[1.0, 0.5], &[0.0, 0.0]);
        let h = 1e-3;
        for k in 0..1000 {
            x = integrate_step(&model, &x, &ControlInput::zeros(2), &no_dist(), k as f64 * h, h)
                .unwrap();
        }
        let q = [x[0], x[1]];
        let qd = [x[2], x[3]];
        let e1 = arm.total_energy(&q, &qd);
        assert!(
            ((e1 - e0) / e0).abs() < 1e-6,
            "relative energy drift {} over 1 s",
            ((e1 - e0) / e0).abs()
        );
    }

    #[test]
    fn disturbance_lies_in_control_column_space() {
        let model = PlantModel::three_link();
        let scenario = DisturbanceScenario {
            scenario_id: 3,
            pushes: vec![Push {
                link: 2,
                force: [4.0, -6.0, 0.0],
                t_start: 0.0,
                t_end: 10.0,
                frequency_hz: None,
            }],
        };
        let x = State::from_slice(&[0.4, -0.2, 0.9, 0.1, -0.3, 0.5]);
        let u = ControlInput::from_slice(&[0.3, -0.1, 0.8]);
        let full = eval_true_dynamics(&model, &x, &u, &scenario, 1.0).unwrap();
        let known = eval_known_dynamics(&model, &x).unwrap();
        let residual = full - known - model.control_matrix() * &u.0;
        // least-squares projection onto range(B)
        let b = model.control_matrix();
        let coeffs = b.clone().svd(true, true).solve(&residual, 1e-12).unwrap();
        let off_range = &residual - b * coeffs;
        assert!(off_range.norm() < 1e-10);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let model = PlantModel::double_integrator();
        let x = State::from_slice(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            eval_known_dynamics(&model, &x),
            Err(Error::DimensionMismatch { .. })
        ));
        let u = ControlInput::from_slice(&[0.0, 0.0]);
        assert!(eval_true_dynamics(
            &model,
            &State::from_slice(&[0.0, 0.0]),
            &u,
            &no_dist(),
            0.0
        )
        .is_err());
    }
}
