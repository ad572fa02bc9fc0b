//! Robust setpoint-tracking MPC: nominal predictions over the horizon,
//! geometrically tightened constraints, an optimizer-chosen artificial
//! equilibrium, and a quadratic incremental-Lyapunov terminal set.
//!
//! The NLP is solved by sequential quadratic programming over a
//! single-shooting parameterization [v(0..N-1), x_eq, v_eq]: dynamics and
//! constraints are linearized at each iterate and the dense active-set QP
//! subproblem is warm-started from the previous solution shifted by one
//! step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::approximator::Approximator;
use crate::error::{check_dim, Error, Result};
use crate::plant::{eval_known_dynamics, rk4_step, ControlInput, PlantModel, State};
use crate::qp::{solve_qp, QpProblem};

/// Discrete-time nominal prediction model used inside the MPC.
pub trait NominalModel: Send + Sync {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_y(&self) -> usize;
    /// One-step nominal prediction x_{k+1} = f_nominal(x_k, v_k).
    fn step(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;
    /// Output map o(x, v).
    fn output(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;
}

/// The scalar discrete integrator x+ = x + v with y = x.
#[derive(Clone, Debug, Default)]
pub struct Integrator1D;

impl NominalModel for Integrator1D {
    fn n_x(&self) -> usize {
        1
    }
    fn n_u(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        1
    }
    fn step(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[0] + v[0])
    }
    fn output(&self, x: &DVector<f64>, _v: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
}

/// RK4 zero-order-hold discretization of a plant's known dynamics plus
/// control channel; for manipulators the output is the joint-angle block.
#[derive(Clone, Debug)]
pub struct DiscretizedPlant {
    pub plant: PlantModel,
    pub dt: f64,
    pub substeps: usize,
}

impl NominalModel for DiscretizedPlant {
    fn n_x(&self) -> usize {
        self.plant.n_x()
    }
    fn n_u(&self) -> usize {
        self.plant.n_u()
    }
    fn n_y(&self) -> usize {
        match self.plant.n_links() {
            0 => self.plant.n_x(),
            n => n,
        }
    }
    fn step(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let h = self.dt / self.substeps as f64;
        let mut xx = x.clone();
        for _ in 0..self.substeps {
            xx = rk4_step(&xx, 0.0, h, |_, s| {
                Ok(eval_known_dynamics(&self.plant, &State(s.clone()))
                    .expect("dimensions fixed by construction")
                    + self.plant.control_matrix() * v)
            })
            .expect("known dynamics are total");
        }
        xx
    }
    fn output(&self, x: &DVector<f64>, _v: &DVector<f64>) -> DVector<f64> {
        match self.plant.n_links() {
            0 => x.clone(),
            n => DVector::from(x.rows(0, n)),
        }
    }
}

/// Which signal an affine box constraint acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintTarget {
    State,
    Input,
}

/// Per-component box constraint; unbounded sides use infinities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoxConstraint {
    pub on: ConstraintTarget,
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Weights, tightening parameters, terminal radius and constraint list.
#[derive(Clone, Debug)]
pub struct MpcConfig {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Offset weight on ||y_eq - y_d||^2, making the reference enter the
    /// optimization.
    pub t_offset: DMatrix<f64>,
    pub rho_d: f64,
    pub wbar_d: f64,
    pub alpha: f64,
    pub constraints: Vec<BoxConstraint>,
    /// Tightening constant per affine constraint row (two rows per box:
    /// upper then lower, in `constraints` order, skipping infinite sides).
    pub c_eta: Vec<f64>,
}

impl MpcConfig {
    pub fn new(
        horizon: usize,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        t_offset: DMatrix<f64>,
        rho_d: f64,
        wbar_d: f64,
        alpha: f64,
        constraints: Vec<BoxConstraint>,
    ) -> Result<Self> {
        let n_rows = constraints
            .iter()
            .map(|b| (b.hi.is_finite() as usize) + (b.lo.is_finite() as usize))
            .sum();
        let cfg = MpcConfig {
            horizon,
            q,
            r,
            t_offset,
            rho_d,
            wbar_d,
            alpha,
            constraints,
            c_eta: vec![1.0; n_rows],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.rho_d) {
            return Err(Error::Config(format!(
                "contraction rate rho_d must lie in [0, 1), got {}",
                self.rho_d
            )));
        }
        if self.wbar_d < 0.0 {
            return Err(Error::Config("disturbance bound must be >= 0".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config("terminal radius alpha must be > 0".into()));
        }
        for (name, m) in [("Q", &self.q), ("R", &self.r), ("T", &self.t_offset)] {
            if (m - m.transpose()).norm() > 1e-10 * (1.0 + m.norm()) {
                return Err(Error::Config(format!("{name} must be symmetric")));
            }
            let eig = m.clone().symmetric_eigen();
            if eig.eigenvalues.iter().any(|&e| e <= 0.0) {
                return Err(Error::Config(format!("{name} must be positive-definite")));
            }
        }
        Ok(())
    }

    /// True when the terminal set around an equilibrium is non-empty.
    pub fn terminal_set_nonempty(&self) -> bool {
        self.alpha > geometric_sum(self.rho_d, self.horizon) * self.wbar_d
    }
}

/// (1 - rho^k) / (1 - rho), the k-term geometric sum of the disturbance
/// contraction.
pub fn geometric_sum(rho: f64, k: usize) -> f64 {
    (1.0 - rho.powi(k as i32)) / (1.0 - rho)
}

/// Accumulated tightening for constraint `eta` at prediction step `k`.
pub fn tightening_margin(k: usize, eta: usize, cfg: &MpcConfig) -> Result<f64> {
    if cfg.rho_d >= 1.0 {
        return Err(Error::Config(format!(
            "contraction rate must be < 1, got {}",
            cfg.rho_d
        )));
    }
    if eta >= cfg.c_eta.len() {
        return Err(Error::Config(format!(
            "constraint index {eta} out of range ({} rows)",
            cfg.c_eta.len()
        )));
    }
    Ok(cfg.c_eta[eta] * geometric_sum(cfg.rho_d, k) * cfg.wbar_d)
}

/// Quadratic incremental Lyapunov function V_delta(x, z) = (x-z)' P (x-z).
pub fn incremental_lyapunov(x: &DVector<f64>, z: &DVector<f64>, p: &DMatrix<f64>) -> f64 {
    let d = x - z;
    d.dot(&(p * &d))
}

/// Artificial equilibrium chosen by the optimizer.
#[derive(Clone, Debug)]
pub struct ArtificialEquilibrium {
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    pub y: DVector<f64>,
}

/// Nominal prediction over the horizon: N inputs, N+1 states.
#[derive(Clone, Debug)]
pub struct PredictedTrajectory {
    pub inputs: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
}

/// Terminal membership: sqrt(V_delta(x, x_eq)) + geometric tube radius
/// at the horizon must stay within alpha.
pub fn terminal_set_contains(
    x: &DVector<f64>,
    eq: &ArtificialEquilibrium,
    p: &DMatrix<f64>,
    alpha: f64,
    horizon: usize,
    cfg: &MpcConfig,
) -> bool {
    incremental_lyapunov(x, &eq.x, p).sqrt()
        + geometric_sum(cfg.rho_d, horizon) * cfg.wbar_d
        <= alpha
}

/// The tracking objective: summed stage costs around the artificial
/// equilibrium, the offset cost pulling the equilibrium output to the
/// reference, and an optional learned terminal value on the final state
/// deviation.
pub fn objective(
    traj: &PredictedTrajectory,
    eq: &ArtificialEquilibrium,
    y_d: &DVector<f64>,
    cfg: &MpcConfig,
    value_estimate: Option<&Approximator>,
) -> Result<f64> {
    check_dim("trajectory inputs", cfg.horizon, traj.inputs.len())?;
    check_dim("trajectory states", cfg.horizon + 1, traj.states.len())?;
    let mut j = 0.0;
    for k in 0..cfg.horizon {
        let dx = &traj.states[k + 1] - &eq.x;
        let dv = &traj.inputs[k] - &eq.v;
        j += dx.dot(&(&cfg.q * &dx)) + dv.dot(&(&cfg.r * &dv));
    }
    let dy = &eq.y - y_d;
    j += dy.dot(&(&cfg.t_offset * &dy));
    if let Some(vhat) = value_estimate {
        let dx_n = traj.states[cfg.horizon].clone() - &eq.x;
        j += vhat.forward(&dx_n)?[0];
    }
    Ok(j)
}

/// Discrete LQR terminal metric: fixed point of the Riccati difference
/// equation for the linearization (A, B) with weights (Q, R).
pub fn dlqr_terminal_metric(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    for _ in 0..20_000 {
        let btpb = b.transpose() * &p * b + r;
        let gain = btpb
            .clone()
            .lu()
            .solve(&(b.transpose() * &p * a))
            .ok_or_else(|| Error::Config("Riccati iteration became singular".into()))?;
        let next = q + a.transpose() * &p * (a - b * &gain);
        let next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &p).norm();
        p = next;
        if delta < 1e-12 {
            return Ok(p);
        }
    }
    Err(Error::Config(
        "Riccati iteration did not converge; is (A, B) stabilizable?".into(),
    ))
}

// ---------------------------------------------------------------------------
// solver
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RowClass {
    TightenedState,
    TightenedInput,
    Equilibrium,
    Terminal,
}

impl RowClass {
    fn name(self) -> &'static str {
        match self {
            RowClass::TightenedState => "tightened state bound",
            RowClass::TightenedInput => "tightened input bound",
            RowClass::Equilibrium => "equilibrium admissibility",
            RowClass::Terminal => "terminal set",
        }
    }
}

/// One affine row a_x' x + a_v' v <= b expanded from the box list.
#[derive(Clone, Debug)]
struct AffineRow {
    on: ConstraintTarget,
    index: usize,
    coeff: f64, // +1 for upper bound, -1 for lower bound
    bound: f64, // coeff * signal <= bound
}

fn expand_rows(constraints: &[BoxConstraint]) -> Vec<AffineRow> {
    let mut rows = Vec::new();
    for b in constraints {
        if b.hi.is_finite() {
            rows.push(AffineRow {
                on: b.on,
                index: b.index,
                coeff: 1.0,
                bound: b.hi,
            });
        }
        if b.lo.is_finite() {
            rows.push(AffineRow {
                on: b.on,
                index: b.index,
                coeff: -1.0,
                bound: -b.lo,
            });
        }
    }
    rows
}

#[derive(Clone, Debug)]
pub struct RmpcSolution {
    pub trajectory: PredictedTrajectory,
    pub equilibrium: ArtificialEquilibrium,
    /// Optimal value S_N(x_k, y_d).
    pub value: f64,
    /// Infinity-norm KKT residual of the NLP at the reported optimum.
    pub kkt_residual: f64,
    pub sqp_iterations: usize,
}

/// One line of the optional solver trace.
#[derive(Clone, Debug)]
pub struct SolverTraceRecord {
    pub iteration: usize,
    pub objective: f64,
    pub kkt_residual: f64,
}

pub struct RmpcSolver<M: NominalModel> {
    model: M,
    cfg: MpcConfig,
    p: DMatrix<f64>,
    rows: Vec<AffineRow>,
    warm: Option<DVector<f64>>,
    warm_active: Vec<usize>,
    pub trace: Vec<SolverTraceRecord>,
    pub keep_trace: bool,
}

const SQP_MAX_ITER: usize = 60;
const SQP_TOL: f64 = 1e-9;
const FD_EPS: f64 = 1e-5;

impl<M: NominalModel> RmpcSolver<M> {
    /// Build a solver around a nominal model. The terminal metric P is the
    /// discrete LQR Lyapunov metric at the linearization around
    /// `x_ref` (with the input chosen to hold it), and the tightening
    /// constants c_eta are the Lipschitz bounds of each affine row in the
    /// P-metric.
    pub fn new(model: M, mut cfg: MpcConfig, x_ref: &DVector<f64>) -> Result<Self> {
        cfg.validate()?;
        check_dim("x_ref", model.n_x(), x_ref.len())?;
        check_dim("Q", model.n_x(), cfg.q.nrows())?;
        check_dim("R", model.n_u(), cfg.r.nrows())?;
        check_dim("T", model.n_y(), cfg.t_offset.nrows())?;

        // input holding x_ref approximately stationary
        let sv = jacobian_v(&model, x_ref, &DVector::zeros(model.n_u()));
        let drift = x_ref - model.step(x_ref, &DVector::zeros(model.n_u()));
        let v_ref = sv
            .clone()
            .svd(true, true)
            .solve(&drift, 1e-12)
            .map_err(|e| Error::Config(format!("could not compute holding input: {e}")))?;

        let a = jacobian_x(&model, x_ref, &v_ref);
        let b = jacobian_v(&model, x_ref, &v_ref);
        let p = dlqr_terminal_metric(&a, &b, &cfg.q, &cfg.r)?;

        let rows = expand_rows(&cfg.constraints);
        let p_inv = p
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Config("terminal metric is singular".into()))?;
        cfg.c_eta = rows
            .iter()
            .map(|row| match row.on {
                // affine state row a'x <= b: Lipschitz bound in the P metric
                // is ||a||_{P^-1}, exact for affine constraints
                ConstraintTarget::State => p_inv[(row.index, row.index)].sqrt(),
                ConstraintTarget::Input => 0.0,
            })
            .collect();

        if !cfg.terminal_set_nonempty() {
            eprintln!(
                "warning: terminal set is empty (alpha = {} <= tube radius {})",
                cfg.alpha,
                geometric_sum(cfg.rho_d, cfg.horizon) * cfg.wbar_d
            );
        }

        Ok(RmpcSolver {
            model,
            cfg,
            p,
            rows,
            warm: None,
            warm_active: Vec::new(),
            trace: Vec::new(),
            keep_trace: false,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn terminal_metric(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    /// Override the tightening constants (fixtures and tests).
    pub fn set_c_eta(&mut self, c_eta: Vec<f64>) -> Result<()> {
        check_dim("c_eta", self.rows.len(), c_eta.len())?;
        self.cfg.c_eta = c_eta;
        Ok(())
    }

    /// Drop the warm start (new problem instance).
    pub fn reset_warm(&mut self) {
        self.warm = None;
        self.warm_active.clear();
    }

    fn nz(&self) -> usize {
        self.cfg.horizon * self.model.n_u() + self.model.n_x() + self.model.n_u()
    }

    fn split(&self, z: &DVector<f64>) -> (Vec<DVector<f64>>, DVector<f64>, DVector<f64>) {
        split_variables(&self.model, self.cfg.horizon, z)
    }

    fn rollout(&self, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        rollout_states(&self.model, x0, inputs)
    }

    fn row_classes(&self) -> Vec<RowClass> {
        let n = self.cfg.horizon;
        let mut classes = Vec::new();
        for row in &self.rows {
            match row.on {
                ConstraintTarget::State => {
                    classes.extend(std::iter::repeat(RowClass::TightenedState).take(n));
                    classes.push(RowClass::Equilibrium);
                }
                ConstraintTarget::Input => {
                    classes.extend(std::iter::repeat(RowClass::TightenedInput).take(n));
                    classes.push(RowClass::Equilibrium);
                }
            }
        }
        classes.push(RowClass::Terminal);
        classes
    }

    /// Solve the tracking NLP from `x0` toward reference output `y_d`.
    pub fn solve(
        &mut self,
        x0: &State,
        y_d: &DVector<f64>,
        vhat: Option<&Approximator>,
    ) -> Result<RmpcSolution> {
        check_dim("initial state", self.model.n_x(), x0.len())?;
        check_dim("reference output", self.model.n_y(), y_d.len())?;
        let tube = geometric_sum(self.cfg.rho_d, self.cfg.horizon) * self.cfg.wbar_d;
        if self.cfg.alpha < tube {
            return Err(Error::Infeasible {
                class: RowClass::Terminal.name().into(),
                violation: tube - self.cfg.alpha,
            });
        }
        // precondition: the measured state satisfies the untightened
        // state constraints
        for row in &self.rows {
            if row.on == ConstraintTarget::State {
                let v = row.coeff * x0.0[row.index] - row.bound;
                if v > 1e-9 {
                    return Err(Error::Infeasible {
                        class: "initial state".into(),
                        violation: v,
                    });
                }
            }
        }

        let sqrt_q = cholesky_transpose(&self.cfg.q)?;
        let sqrt_r = cholesky_transpose(&self.cfg.r)?;
        let sqrt_t = cholesky_transpose(&self.cfg.t_offset)?;

        let nz = self.nz();
        let (nx, nu, n) = (self.model.n_x(), self.model.n_u(), self.cfg.horizon);
        let mut z = match self.warm.take() {
            Some(w) => w,
            None => {
                let mut z0 = DVector::zeros(nz);
                z0.rows_mut(n * nu, nx).copy_from(&x0.0);
                z0
            }
        };

        if self.keep_trace {
            self.trace.clear();
        }

        let (model, cfg, p_metric, rows) = (&self.model, &self.cfg, &self.p, &self.rows);
        let eval = |z: &DVector<f64>| {
            evaluate_nlp(model, cfg, rows, p_metric, x0, y_d, z, &sqrt_q, &sqrt_r, &sqrt_t, vhat)
        };
        let stack = |z: &DVector<f64>| -> DVector<f64> {
            let (r, v_term, c_eq, c_in) = eval(z);
            let mut s = DVector::zeros(r.len() + 1 + c_eq.len() + c_in.len());
            s.rows_mut(0, r.len()).copy_from(&r);
            s[r.len()] = v_term;
            s.rows_mut(r.len() + 1, c_eq.len()).copy_from(&c_eq);
            s.rows_mut(r.len() + 1 + c_eq.len(), c_in.len())
                .copy_from(&c_in);
            s
        };
        let objective_of = |r: &DVector<f64>, v_term: f64| r.norm_squared() + v_term;
        let merit = |z: &DVector<f64>, nu_pen: f64| -> f64 {
            let (r, v_term, c_eq, c_in) = eval(z);
            objective_of(&r, v_term)
                + nu_pen
                    * (c_eq.iter().map(|v| v.abs()).sum::<f64>()
                        + c_in.iter().map(|v| v.max(0.0)).sum::<f64>())
        };

        let mut penalty = 10.0f64;
        let mut kkt = f64::INFINITY;
        let mut converged = false;
        let mut iterations = 0;
        let mut active: Vec<usize> = std::mem::take(&mut self.warm_active);

        for iter in 0..SQP_MAX_ITER {
            iterations = iter + 1;
            let (r, v_term, c_eq, c_in) = eval(&z);
            if r.iter().any(|v| !v.is_finite()) || !v_term.is_finite() {
                return Err(Error::NonFinite("MPC rollout"));
            }
            let s0 = stack(&z);
            let jac = central_jacobian(&stack, &z, FD_EPS);
            let nr = r.len();
            let jr = jac.rows(0, nr).into_owned();
            let g_vterm = jac.row(nr).transpose();
            let a_eq = jac.rows(nr + 1, c_eq.len()).into_owned();
            let a_in = jac.rows(nr + 1 + c_eq.len(), c_in.len()).into_owned();

            let grad = &jr.transpose() * &r * 2.0 + &g_vterm;
            let mut h = &jr.transpose() * &jr * 2.0;
            for i in 0..nz {
                h[(i, i)] += 1e-8 + if vhat.is_some() { 1e-4 } else { 0.0 };
            }

            let qp = QpProblem {
                h,
                c: grad.clone(),
                a_eq: a_eq.clone(),
                b_eq: -c_eq.clone(),
                a_in: a_in.clone(),
                b_in: -c_in.clone(),
            };
            let qp_sol = match solve_qp(&qp, Some(&active)) {
                Ok(s) => s,
                Err(_) => {
                    // linearized subproblem unsolvable: report the most
                    // violated constraint class at the current iterate
                    return Err(self.infeasibility_report(&c_in, &c_eq));
                }
            };
            active = qp_sol.active_set.clone();

            // NLP KKT residual with the QP multipliers
            let stationarity = (&grad
                + a_eq.transpose() * &qp_sol.eq_multipliers
                + a_in.transpose() * &qp_sol.in_multipliers)
                .amax();
            let viol = c_eq
                .iter()
                .map(|v| v.abs())
                .chain(c_in.iter().map(|v| v.max(0.0)))
                .fold(0.0f64, f64::max);
            kkt = stationarity.max(viol);
            if self.keep_trace {
                self.trace.push(SolverTraceRecord {
                    iteration: iter,
                    objective: objective_of(&r, v_term),
                    kkt_residual: kkt,
                });
            }

            let step_norm = qp_sol.x.amax();
            if step_norm < SQP_TOL * (1.0 + z.amax()) && viol < 1e-9 {
                converged = true;
                break;
            }

            let mult_max = qp_sol
                .eq_multipliers
                .iter()
                .chain(qp_sol.in_multipliers.iter())
                .fold(0.0f64, |m, &v| m.max(v.abs()));
            penalty = penalty.max(1.5 * mult_max + 10.0);

            // backtracking line search on the l1 merit
            let m0 = merit(&z, penalty);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand = &z + &qp_sol.x * t;
                if merit(&cand, penalty) < m0 - 1e-12 * t {
                    z = cand;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // no merit progress; accept the full step only if it is
                // tiny (numerical floor), otherwise stop here
                if step_norm < 1e-7 {
                    z += &qp_sol.x;
                    converged = viol < 1e-7;
                }
                break;
            }
            let _ = s0;
        }

        let (r, v_term, c_eq, c_in) = eval(&z);
        let max_viol = c_eq
            .iter()
            .map(|v| v.abs())
            .chain(c_in.iter().map(|v| v.max(0.0)))
            .fold(0.0f64, f64::max);
        if max_viol > 1e-6 {
            return Err(self.infeasibility_report(&c_in, &c_eq));
        }
        if !converged && kkt > 1e-6 {
            return Err(Error::MaxIterations {
                iterations,
                best_objective: objective_of(&r, v_term),
            });
        }

        let (inputs, x_eq, v_eq) = self.split(&z);
        let states = self.rollout(&x0.0, &inputs);
        let y_eq = self.model.output(&x_eq, &v_eq);
        let value = objective_of(&r, v_term);

        // shift-by-one warm start for the receding-horizon loop
        let mut warm = z.clone();
        for k in 0..n.saturating_sub(1) {
            let src = DVector::from(z.rows((k + 1) * nu, nu));
            warm.rows_mut(k * nu, nu).copy_from(&src);
        }
        self.warm = Some(warm);
        self.warm_active = active;

        Ok(RmpcSolution {
            trajectory: PredictedTrajectory { inputs, states },
            equilibrium: ArtificialEquilibrium {
                x: x_eq,
                v: v_eq,
                y: y_eq,
            },
            value,
            kkt_residual: kkt,
            sqp_iterations: iterations,
        })
    }

    fn infeasibility_report(&self, c_in: &DVector<f64>, c_eq: &DVector<f64>) -> Error {
        let classes = self.row_classes();
        let mut worst = (RowClass::Equilibrium, c_eq.amax());
        for (i, &v) in c_in.iter().enumerate() {
            if v > worst.1 {
                worst = (classes[i], v);
            }
        }
        Error::Infeasible {
            class: worst.0.name().into(),
            violation: worst.1,
        }
    }

    /// The control law L(x_k, y_d) = v*(0|k).
    pub fn control_law(
        &mut self,
        x0: &State,
        y_d: &DVector<f64>,
        vhat: Option<&Approximator>,
    ) -> Result<ControlInput> {
        let sol = self.solve(x0, y_d, vhat)?;
        Ok(ControlInput(sol.trajectory.inputs[0].clone()))
    }
}

fn split_variables<M: NominalModel>(
    model: &M,
    horizon: usize,
    z: &DVector<f64>,
) -> (Vec<DVector<f64>>, DVector<f64>, DVector<f64>) {
    let (nx, nu, n) = (model.n_x(), model.n_u(), horizon);
    let inputs = (0..n)
        .map(|k| DVector::from(z.rows(k * nu, nu)))
        .collect();
    let x_eq = DVector::from(z.rows(n * nu, nx));
    let v_eq = DVector::from(z.rows(n * nu + nx, nu));
    (inputs, x_eq, v_eq)
}

fn rollout_states<M: NominalModel>(
    model: &M,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for v in inputs {
        let next = model.step(states.last().unwrap(), v);
        states.push(next);
    }
    states
}

/// Stacked evaluation: weighted residuals, terminal value term,
/// equality constraints, inequality constraints.
#[allow(clippy::too_many_arguments)]
fn evaluate_nlp<M: NominalModel>(
    model: &M,
    cfg: &MpcConfig,
    rows: &[AffineRow],
    p: &DMatrix<f64>,
    x0: &State,
    y_d: &DVector<f64>,
    z: &DVector<f64>,
    sqrt_q: &DMatrix<f64>,
    sqrt_r: &DMatrix<f64>,
    sqrt_t: &DMatrix<f64>,
    vhat: Option<&Approximator>,
) -> (DVector<f64>, f64, DVector<f64>, DVector<f64>) {
    let (nx, n) = (model.n_x(), cfg.horizon);
    let (inputs, x_eq, v_eq) = split_variables(model, n, z);
    let states = rollout_states(model, &x0.0, &inputs);
    let y_eq = model.output(&x_eq, &v_eq);

    // residuals
    let nr = n * (nx + model.n_u()) + model.n_y();
    let mut r = DVector::zeros(nr);
    let mut off = 0;
    for k in 0..n {
        r.rows_mut(off, nx)
            .copy_from(&(sqrt_q * (&states[k + 1] - &x_eq)));
        off += nx;
        r.rows_mut(off, model.n_u())
            .copy_from(&(sqrt_r * (&inputs[k] - &v_eq)));
        off += model.n_u();
    }
    r.rows_mut(off, model.n_y())
        .copy_from(&(sqrt_t * (&y_eq - y_d)));

    let v_term = match vhat {
        Some(vh) => vh
            .forward(&(states[n].clone() - &x_eq))
            .map(|o| o[0])
            .unwrap_or(f64::NAN),
        None => 0.0,
    };

    // equality: x_eq - step(x_eq, v_eq) = 0
    let c_eq = &x_eq - model.step(&x_eq, &v_eq);

    // inequalities
    let mut c_in = Vec::new();
    for (eta, row) in rows.iter().enumerate() {
        let margin = |k: usize| cfg.c_eta[eta] * geometric_sum(cfg.rho_d, k) * cfg.wbar_d;
        match row.on {
            ConstraintTarget::State => {
                for k in 1..=n {
                    c_in.push(row.coeff * states[k][row.index] - row.bound + margin(k));
                }
                c_in.push(row.coeff * x_eq[row.index] - row.bound + margin(n));
            }
            ConstraintTarget::Input => {
                for v in inputs.iter() {
                    c_in.push(row.coeff * v[row.index] - row.bound);
                }
                c_in.push(row.coeff * v_eq[row.index] - row.bound);
            }
        }
    }
    // terminal: V_delta(x_N, x_eq) <= (alpha - tube)^2
    let tube = geometric_sum(cfg.rho_d, n) * cfg.wbar_d;
    let radius = cfg.alpha - tube;
    c_in.push(incremental_lyapunov(&states[n], &x_eq, p) - radius * radius.max(0.0));

    (r, v_term, c_eq, DVector::from_vec(c_in))
}

fn cholesky_transpose(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l().transpose())
        .ok_or_else(|| Error::Config("weight matrix is not positive-definite".into()))
}

fn central_jacobian<F>(f: &F, z: &DVector<f64>, eps: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = z.len();
    let probe = f(z);
    let mut jac = DMatrix::zeros(probe.len(), n);
    for i in 0..n {
        let h = eps * (1.0 + z[i].abs());
        let mut zp = z.clone();
        zp[i] += h;
        let mut zm = z.clone();
        zm[i] -= h;
        let col = (f(&zp) - f(&zm)) / (2.0 * h);
        jac.set_column(i, &col);
    }
    jac
}

fn jacobian_x<M: NominalModel>(model: &M, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let f = |xx: &DVector<f64>| model.step(xx, v);
    central_jacobian(&f, x, FD_EPS)
}

fn jacobian_v<M: NominalModel>(model: &M, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let f = |vv: &DVector<f64>| model.step(x, vv);
    central_jacobian(&f, v, FD_EPS)
}
