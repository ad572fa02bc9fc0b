//! Scenario runner: loads a scenario description, simulates the closed
//! loop under one of three controllers (plain dynamic inversion, robust
//! MPC, or inversion with the online-trained uncertainty estimate), and
//! produces trajectory logs, metrics, and plot-ready exports.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::approximator::Approximator;
use crate::arm::ArmParams;
use crate::error::{Error, Result};
use crate::observer::{error_triple, observer_derivative, train_uncertainty_step, ObserverState};
use crate::plant::{
    eval_true_dynamics, eval_uncertainty, rk4_step, ControlInput, DisturbanceScenario, PlantModel,
    Push, State,
};
use crate::rmpc::{
    BoxConstraint, ConstraintTarget, DiscretizedPlant, MpcConfig, RmpcSolver,
};

/// Error-norm threshold used by the time-to-threshold metric [rad].
pub const TRACKING_THRESHOLD: f64 = 1e-2;

// ---------------------------------------------------------------------------
// scenario description
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(rename = "type")]
    pub kind: String,
    pub n_links: usize,
    pub masses: Vec<f64>,
    pub lengths: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControllerSpec {
    /// Natural frequency of the tracking-error dynamics [rad/s].
    #[serde(default = "default_omega")]
    pub omega: f64,
    /// Observer gain Lambda = lambda * I.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Sign-update step size for the online uncertainty estimate.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub net_seed: u64,
}

fn default_omega() -> f64 {
    5.0
}
fn default_lambda() -> f64 {
    30.0
}
fn default_eta() -> f64 {
    0.002
}

impl Default for ControllerSpec {
    fn default() -> Self {
        ControllerSpec {
            omega: default_omega(),
            lambda: default_lambda(),
            eta: default_eta(),
            net_seed: 0,
        }
    }
}

/// Per-joint quintic point-to-point reference.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub q_start: Vec<f64>,
    pub q_goal: Vec<f64>,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstraintSpec {
    #[serde(rename = "type")]
    pub kind: String,
    pub on: String,
    pub lo: f64,
    pub hi: f64,
    /// Component index; applies to every component when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MpcSpec {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "Q_diag")]
    pub q_diag: Vec<f64>,
    #[serde(rename = "R_diag")]
    pub r_diag: Vec<f64>,
    #[serde(rename = "T_diag")]
    pub t_diag: Vec<f64>,
    pub rho_d: f64,
    pub wbar_d: f64,
    pub alpha: f64,
    #[serde(default)]
    pub constraints: Vec<ConstraintSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario_id: u32,
    pub model: ModelSpec,
    #[serde(default)]
    pub pushes: Vec<Push>,
    #[serde(default)]
    pub controller: ControllerSpec,
    pub reference: ReferenceSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc: Option<MpcSpec>,
}

impl ScenarioSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let spec: ScenarioSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.kind != "manipulator" {
            return Err(Error::Config(format!(
                "unsupported model type '{}'",
                self.model.kind
            )));
        }
        if self.model.masses.len() != self.model.n_links
            || self.model.lengths.len() != self.model.n_links
        {
            return Err(Error::Config(
                "masses/lengths must have n_links entries".into(),
            ));
        }
        if self.reference.q_start.len() != self.model.n_links
            || self.reference.q_goal.len() != self.model.n_links
        {
            return Err(Error::Config(
                "reference waypoints must have n_links entries".into(),
            ));
        }
        if self.reference.t_start >= self.reference.t_end {
            return Err(Error::Config("reference window is empty".into()));
        }
        Ok(())
    }

    pub fn arm(&self) -> ArmParams {
        ArmParams {
            masses: self.model.masses.clone(),
            lengths: self.model.lengths.clone(),
            gravity: 9.81,
        }
    }

    pub fn disturbances(&self) -> DisturbanceScenario {
        DisturbanceScenario {
            scenario_id: self.scenario_id,
            pushes: self.pushes.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// reference trajectory
// ---------------------------------------------------------------------------

/// Minimum-jerk interpolation s(tau) = 10 tau^3 - 15 tau^4 + 6 tau^5.
#[derive(Clone, Debug)]
pub struct QuinticReference {
    q_start: DVector<f64>,
    q_goal: DVector<f64>,
    t_start: f64,
    t_end: f64,
}

impl QuinticReference {
    pub fn new(spec: &ReferenceSpec) -> Self {
        QuinticReference {
            q_start: DVector::from_column_slice(&spec.q_start),
            q_goal: DVector::from_column_slice(&spec.q_goal),
            t_start: spec.t_start,
            t_end: spec.t_end,
        }
    }

    fn shape(&self, t: f64) -> (f64, f64, f64) {
        if t <= self.t_start {
            return (0.0, 0.0, 0.0);
        }
        if t >= self.t_end {
            return (1.0, 0.0, 0.0);
        }
        let big_t = self.t_end - self.t_start;
        let tau = (t - self.t_start) / big_t;
        let s = tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau);
        let sd = tau * tau * (30.0 - 60.0 * tau + 30.0 * tau * tau) / big_t;
        let sdd = tau * (60.0 - 180.0 * tau + 120.0 * tau * tau) / (big_t * big_t);
        (s, sd, sdd)
    }

    /// Desired state [q_d; qdot_d].
    pub fn state(&self, t: f64) -> State {
        let (s, sd, _) = self.shape(t);
        let span = &self.q_goal - &self.q_start;
        let n = span.len();
        let mut x = DVector::zeros(2 * n);
        x.rows_mut(0, n).copy_from(&(&self.q_start + &span * s));
        x.rows_mut(n, n).copy_from(&(&span * sd));
        State(x)
    }

    /// Desired state derivative [qdot_d; qddot_d].
    pub fn derivative(&self, t: f64) -> DVector<f64> {
        let (_, sd, sdd) = self.shape(t);
        let span = &self.q_goal - &self.q_start;
        let n = span.len();
        let mut dx = DVector::zeros(2 * n);
        dx.rows_mut(0, n).copy_from(&(&span * sd));
        dx.rows_mut(n, n).copy_from(&(&span * sdd));
        dx
    }
}

// ---------------------------------------------------------------------------
// run configuration and log
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControllerKind {
    Inversion,
    Rmpc,
    Adaptive,
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inversion" => Ok(ControllerKind::Inversion),
            "rmpc" => Ok(ControllerKind::Rmpc),
            "adaptive" => Ok(ControllerKind::Adaptive),
            other => Err(Error::Config(format!(
                "unknown controller '{other}' (expected inversion|rmpc|adaptive)"
            ))),
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControllerKind::Inversion => "inversion",
            ControllerKind::Rmpc => "rmpc",
            ControllerKind::Adaptive => "adaptive",
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub scenario: PathBuf,
    pub controller: ControllerKind,
    /// Total simulated time [s].
    pub duration: f64,
    /// Controller update period [s]; the integration step is
    /// control_period / substeps.
    pub control_period: f64,
    pub substeps: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn defaults(scenario: PathBuf, controller: ControllerKind) -> Self {
        RunConfig {
            scenario,
            controller,
            duration: 6.0,
            control_period: 0.01,
            substeps: 10,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.duration <= 0.0 {
            return Err(Error::Config(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if self.control_period <= 0.0 || self.substeps == 0 {
            return Err(Error::Config(
                "control period must be positive and substeps at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One sample of the closed-loop trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub t: f64,
    pub x: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub x_d: DVector<f64>,
    pub u: DVector<f64>,
    pub e_r: DVector<f64>,
    pub e_a: DVector<f64>,
    pub ehat_r: DVector<f64>,
    /// Norm of the active uncertainty xi(x, t).
    pub disturbance_norm: f64,
    /// Norm of the unexplained residual xi - xi_hat.
    pub residual_norm: f64,
    pub stage_cost: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryLog {
    pub n_x: usize,
    pub n_u: usize,
    pub records: Vec<LogRecord>,
    /// Set when a controller failure truncated the run.
    pub failure: Option<String>,
}

// ---------------------------------------------------------------------------
// simulation
// ---------------------------------------------------------------------------

fn inversion_gain(n: usize, omega: f64) -> DMatrix<f64> {
    // Block gain [[a I, b I], [b I, c I]] with b = omega^2, c = 2 omega;
    // the acceleration rows give critically damped error dynamics
    // eddot + c edot + b e = residual, and a = 2 b^2 / c keeps the full
    // matrix positive-definite.
    let b = omega * omega;
    let c = 2.0 * omega;
    let a = 2.0 * b * b / c;
    let mut g = DMatrix::zeros(2 * n, 2 * n);
    for j in 0..n {
        g[(j, j)] = a;
        g[(j, n + j)] = b;
        g[(n + j, j)] = b;
        g[(n + j, n + j)] = c;
    }
    g
}

fn mpc_config_from_spec(spec: &MpcSpec, n_x: usize, n_u: usize, n_y: usize) -> Result<MpcConfig> {
    let diag = |vals: &[f64], dim: usize, name: &str| -> Result<DMatrix<f64>> {
        if vals.len() != dim {
            return Err(Error::Config(format!(
                "{name} diagonal needs {dim} entries, got {}",
                vals.len()
            )));
        }
        Ok(DMatrix::from_diagonal(&DVector::from_column_slice(vals)))
    };
    let mut constraints = Vec::new();
    for c in &spec.constraints {
        if c.kind != "box" {
            return Err(Error::Config(format!("unsupported constraint '{}'", c.kind)));
        }
        let (on, dim) = match c.on.as_str() {
            "state" => (ConstraintTarget::State, n_x),
            "input" => (ConstraintTarget::Input, n_u),
            other => {
                return Err(Error::Config(format!(
                    "constraint target must be state|input, got '{other}'"
                )))
            }
        };
        match c.index {
            Some(i) if i >= dim => {
                return Err(Error::Config(format!(
                    "constraint index {i} out of range for dimension {dim}"
                )))
            }
            Some(i) => constraints.push(BoxConstraint {
                on,
                index: i,
                lo: c.lo,
                hi: c.hi,
            }),
            None => {
                for i in 0..dim {
                    constraints.push(BoxConstraint {
                        on,
                        index: i,
                        lo: c.lo,
                        hi: c.hi,
                    });
                }
            }
        }
    }
    MpcConfig::new(
        spec.n,
        diag(&spec.q_diag, n_x, "Q")?,
        diag(&spec.r_diag, n_u, "R")?,
        diag(&spec.t_diag, n_y, "T")?,
        spec.rho_d,
        spec.wbar_d,
        spec.alpha,
        constraints,
    )
}

fn default_mpc_spec(n_links: usize) -> MpcSpec {
    MpcSpec {
        n: 4,
        q_diag: [vec![50.0; n_links], vec![5.0; n_links]].concat(),
        r_diag: vec![0.01; n_links],
        t_diag: vec![200.0; n_links],
        rho_d: 0.8,
        wbar_d: 0.0,
        alpha: 10.0,
        constraints: Vec::new(),
    }
}

/// Run a scenario file under the configured controller.
pub fn run_scenario(cfg: &RunConfig) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let spec = ScenarioSpec::load(&cfg.scenario)?;
    simulate(&spec, cfg)
}

/// Simulate an in-memory scenario.
pub fn simulate(spec: &ScenarioSpec, cfg: &RunConfig) -> Result<TrajectoryLog> {
    cfg.validate()?;
    spec.validate()?;
    let model = PlantModel::manipulator(spec.arm(), 0.0);
    let scenario = spec.disturbances();
    scenario.validate(spec.model.n_links)?;
    let reference = QuinticReference::new(&spec.reference);

    match cfg.controller {
        ControllerKind::Inversion => {
            simulate_inversion(spec, cfg, &model, &scenario, &reference, false)
        }
        ControllerKind::Adaptive => {
            simulate_inversion(spec, cfg, &model, &scenario, &reference, true)
        }
        ControllerKind::Rmpc => simulate_rmpc(spec, cfg, &model, &scenario, &reference),
    }
}

/// Joint RK4 advance of [x; x_hat] over one control period with the input
/// and the uncertainty estimate held constant.
#[allow(clippy::too_many_arguments)]
fn advance_joint(
    model: &PlantModel,
    scenario: &DisturbanceScenario,
    observer: &ObserverState,
    x: &State,
    u: &ControlInput,
    xi_hat: &DVector<f64>,
    t: f64,
    h: f64,
    substeps: usize,
) -> Result<(State, State)> {
    let n_x = model.n_x();
    let mut z = DVector::zeros(2 * n_x);
    z.rows_mut(0, n_x).copy_from(&x.0);
    z.rows_mut(n_x, n_x).copy_from(&observer.x_hat.0);
    let mut tt = t;
    for _ in 0..substeps {
        z = rk4_step(&z, tt, h, |ti, zz| {
            let xs = State::new(DVector::from(zz.rows(0, n_x)))
                .map_err(|_| Error::IntegrationBlowUp { t: ti })?;
            let mut obs = observer.clone();
            obs.x_hat = State(DVector::from(zz.rows(n_x, n_x)));
            let dx = eval_true_dynamics(model, &xs, u, scenario, ti)?;
            let dxh = observer_derivative(model, &xs, &obs, u, xi_hat)?;
            let mut dz = DVector::zeros(2 * n_x);
            dz.rows_mut(0, n_x).copy_from(&dx);
            dz.rows_mut(n_x, n_x).copy_from(&dxh);
            Ok(dz)
        })?;
        tt += h;
    }
    let x_next = State::new(DVector::from(z.rows(0, n_x)))
        .map_err(|_| Error::IntegrationBlowUp { t })?;
    let xh_next = State::new(DVector::from(z.rows(n_x, n_x)))
        .map_err(|_| Error::IntegrationBlowUp { t })?;
    Ok((x_next, xh_next))
}

#[allow(clippy::too_many_arguments)]
fn push_record(
    log: &mut TrajectoryLog,
    model: &PlantModel,
    scenario: &DisturbanceScenario,
    t: f64,
    x: &State,
    x_hat: &State,
    x_d: &State,
    u: &DVector<f64>,
    xi_hat: &DVector<f64>,
) -> Result<DVector<f64>> {
    let triple = error_triple(x, x_hat, x_d)?;
    let xi = eval_uncertainty(model, x, scenario, t)?;
    let residual = &xi - xi_hat;
    let stage_cost = triple.tracking.norm_squared() + 1e-3 * u.norm_squared();
    let e_a = triple.estimation.clone();
    log.records.push(LogRecord {
        t,
        x: x.0.clone(),
        x_hat: x_hat.0.clone(),
        x_d: x_d.0.clone(),
        u: u.clone(),
        e_r: triple.tracking,
        e_a,
        ehat_r: triple.estimate_tracking,
        disturbance_norm: xi.norm(),
        residual_norm: residual.norm(),
        stage_cost,
    });
    Ok(triple.estimation)
}

fn simulate_inversion(
    spec: &ScenarioSpec,
    cfg: &RunConfig,
    model: &PlantModel,
    scenario: &DisturbanceScenario,
    reference: &QuinticReference,
    learn: bool,
) -> Result<TrajectoryLog> {
    let n_x = model.n_x();
    let n_u = model.n_u();
    let gamma = inversion_gain(spec.model.n_links, spec.controller.omega);
    let lambda = DMatrix::identity(n_x, n_x) * spec.controller.lambda;
    let b = model.control_matrix().clone();
    let h = cfg.control_period / cfg.substeps as f64;
    let steps = (cfg.duration / cfg.control_period).round() as usize;

    let mut net = Approximator::standard(
        n_x,
        n_u,
        spec.controller.eta,
        spec.controller.net_seed ^ cfg.seed,
    )?;
    let mut x = reference.state(0.0);
    let mut observer = ObserverState::new(x.clone(), lambda)?;
    let mut log = TrajectoryLog {
        n_x,
        n_u,
        records: Vec::with_capacity(steps + 1),
        failure: None,
    };

    for k in 0..steps {
        let t = k as f64 * cfg.control_period;
        let x_d = reference.state(t);
        let xi_hat = if learn {
            net.forward(&x.0)?
        } else {
            DVector::zeros(n_u)
        };
        let f_known = crate::plant::eval_known_dynamics(model, &x)?;
        let f_hat_total = &f_known + &b * &xi_hat;
        let out = match crate::inversion::inversion_control(
            &x,
            &x_d,
            &reference.derivative(t),
            &f_hat_total,
            &gamma,
            &b,
        ) {
            Ok(out) => out,
            Err(e) => {
                log.failure = Some(e.to_string());
                return Ok(log);
            }
        };

        let e_a = push_record(&mut log, model, scenario, t, &x, &observer.x_hat, &x_d,
            &out.control.0, &xi_hat)?;
        if learn {
            train_uncertainty_step(&mut net, model, &observer, &x, &e_a)?;
        }

        let (x_next, xh_next) = advance_joint(
            model, scenario, &observer, &x, &out.control, &xi_hat, t, h, cfg.substeps,
        )?;
        x = x_next;
        observer.x_hat = xh_next;
    }

    // closing sample
    let t = steps as f64 * cfg.control_period;
    let x_d = reference.state(t);
    let xi_hat = if learn {
        net.forward(&x.0)?
    } else {
        DVector::zeros(n_u)
    };
    push_record(&mut log, model, scenario, t, &x, &observer.x_hat, &x_d,
        &DVector::zeros(n_u), &xi_hat)?;
    Ok(log)
}

fn simulate_rmpc(
    spec: &ScenarioSpec,
    cfg: &RunConfig,
    model: &PlantModel,
    scenario: &DisturbanceScenario,
    reference: &QuinticReference,
) -> Result<TrajectoryLog> {
    let n_x = model.n_x();
    let n_u = model.n_u();
    let n_links = spec.model.n_links;
    let mpc_spec = spec.mpc.clone().unwrap_or_else(|| default_mpc_spec(n_links));
    let mpc_cfg = mpc_config_from_spec(&mpc_spec, n_x, n_u, n_links)?;
    let nominal = DiscretizedPlant {
        plant: model.clone(),
        dt: cfg.control_period,
        substeps: 2,
    };
    let goal_state = {
        let mut xg = DVector::zeros(n_x);
        xg.rows_mut(0, n_links)
            .copy_from(&DVector::from_column_slice(&spec.reference.q_goal));
        xg
    };
    let mut solver = RmpcSolver::new(nominal, mpc_cfg, &goal_state)?;

    let lambda = DMatrix::identity(n_x, n_x) * spec.controller.lambda;
    let h = cfg.control_period / cfg.substeps as f64;
    let steps = (cfg.duration / cfg.control_period).round() as usize;
    let xi_zero = DVector::zeros(n_u);

    let mut x = reference.state(0.0);
    let mut observer = ObserverState::new(x.clone(), lambda)?;
    let mut log = TrajectoryLog {
        n_x,
        n_u,
        records: Vec::with_capacity(steps + 1),
        failure: None,
    };

    for k in 0..steps {
        let t = k as f64 * cfg.control_period;
        let x_d = reference.state(t);
        let y_d = DVector::from(x_d.0.rows(0, n_links));
        let u = match solver.control_law(&x, &y_d, None) {
            Ok(u) => u,
            Err(e) => {
                log.failure = Some(e.to_string());
                return Ok(log);
            }
        };
        push_record(&mut log, model, scenario, t, &x, &observer.x_hat, &x_d, &u.0, &xi_zero)?;
        let (x_next, xh_next) = advance_joint(
            model, scenario, &observer, &x, &u, &xi_zero, t, h, cfg.substeps,
        )?;
        x = x_next;
        observer.x_hat = xh_next;
    }
    let t = steps as f64 * cfg.control_period;
    let x_d = reference.state(t);
    push_record(&mut log, model, scenario, t, &x, &observer.x_hat, &x_d,
        &DVector::zeros(n_u), &xi_zero)?;
    Ok(log)
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct OnsetPeak {
    pub onset_t: f64,
    pub peak_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    /// RMS of ||e_r|| over the last 10% of samples.
    pub final_window_rms: f64,
    /// First time after which ||e_r|| stays below the threshold.
    pub time_to_threshold: Option<f64>,
    pub peaks_after_onset: Vec<OnsetPeak>,
    pub total_cost: f64,
}

pub fn compute_metrics(log: &TrajectoryLog) -> Result<Metrics> {
    if log.records.is_empty() {
        return Err(Error::EmptyLog("trajectory log has no records"));
    }
    let norms: Vec<f64> = log.records.iter().map(|r| r.e_r.norm()).collect();
    let window = (log.records.len().max(10) / 10).max(1);
    let tail = &norms[norms.len() - window..];
    let final_window_rms = (tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64).sqrt();

    let mut time_to_threshold = None;
    for i in 0..norms.len() {
        if norms[i..].iter().all(|&v| v < TRACKING_THRESHOLD) {
            time_to_threshold = Some(log.records[i].t);
            break;
        }
    }

    let mut peaks_after_onset = Vec::new();
    let mut onsets = Vec::new();
    for i in 0..log.records.len() {
        let prev = if i == 0 { 0.0 } else { log.records[i - 1].disturbance_norm };
        if log.records[i].disturbance_norm > 1e-12 && prev <= 1e-12 {
            onsets.push(i);
        }
    }
    for (j, &start) in onsets.iter().enumerate() {
        let end = onsets.get(j + 1).copied().unwrap_or(log.records.len());
        let peak = norms[start..end].iter().cloned().fold(0.0f64, f64::max);
        peaks_after_onset.push(OnsetPeak {
            onset_t: log.records[start].t,
            peak_error: peak,
        });
    }

    let total_cost = log.records.iter().map(|r| r.stage_cost).sum();
    Ok(Metrics {
        final_window_rms,
        time_to_threshold,
        peaks_after_onset,
        total_cost,
    })
}

// ---------------------------------------------------------------------------
// exports
// ---------------------------------------------------------------------------

fn csv_header(n_x: usize, n_u: usize) -> String {
    let mut cols = vec!["t".to_string()];
    let block = |prefix: &str, n: usize, cols: &mut Vec<String>| {
        for i in 0..n {
            cols.push(format!("{prefix}{i}"));
        }
    };
    block("x", n_x, &mut cols);
    block("xhat", n_x, &mut cols);
    block("xd", n_x, &mut cols);
    block("u", n_u, &mut cols);
    block("er", n_x, &mut cols);
    block("ea", n_x, &mut cols);
    block("ehatr", n_x, &mut cols);
    cols.push("dist_norm".into());
    cols.push("residual_norm".into());
    cols.push("stage_cost".into());
    cols.join(",")
}

pub fn export_csv(log: &TrajectoryLog, path: &Path) -> Result<()> {
    let wrap = |e: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(wrap)?);
    writeln!(f, "{}", csv_header(log.n_x, log.n_u)).map_err(wrap)?;
    for r in &log.records {
        let mut fields = vec![format!("{:.17e}", r.t)];
        for v in r
            .x
            .iter()
            .chain(r.x_hat.iter())
            .chain(r.x_d.iter())
            .chain(r.u.iter())
            .chain(r.e_r.iter())
            .chain(r.e_a.iter())
            .chain(r.ehat_r.iter())
        {
            fields.push(format!("{v:.17e}"));
        }
        fields.push(format!("{:.17e}", r.disturbance_norm));
        fields.push(format!("{:.17e}", r.residual_norm));
        fields.push(format!("{:.17e}", r.stage_cost));
        writeln!(f, "{}", fields.join(",")).map_err(wrap)?;
    }
    Ok(())
}

/// Parse a log CSV produced by `export_csv`.
pub fn import_csv(path: &Path) -> Result<TrajectoryLog> {
    let wrap = |msg: String| Error::Parse {
        path: path.display().to_string(),
        message: msg,
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| wrap("missing header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let n_x = cols.iter().filter(|c| c.starts_with("er")).count();
    let count = |p: &str| cols.iter().filter(|c| c.starts_with(p) && c[p.len()..].chars().all(|ch| ch.is_ascii_digit()) && c.len() > p.len()).count();
    let n_u = count("u");
    if header != csv_header(n_x, n_u) {
        return Err(wrap("unrecognized log schema".into()));
    }
    let mut log = TrajectoryLog {
        n_x,
        n_u,
        records: Vec::new(),
        failure: None,
    };
    for (lineno, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wrap(format!("line {}: {e}", lineno + 2)))?;
        if vals.len() != 1 + 6 * n_x + n_u + 3 {
            return Err(wrap(format!("line {}: wrong field count", lineno + 2)));
        }
        let mut it = vals.into_iter();
        let t = it.next().unwrap();
        let mut take = |n: usize| -> DVector<f64> {
            DVector::from_iterator(n, it.by_ref().take(n))
        };
        let x = take(n_x);
        let x_hat = take(n_x);
        let x_d = take(n_x);
        let u = take(n_u);
        let e_r = take(n_x);
        let e_a = take(n_x);
        let ehat_r = take(n_x);
        let disturbance_norm = it.next().unwrap();
        let residual_norm = it.next().unwrap();
        let stage_cost = it.next().unwrap();
        log.records.push(LogRecord {
            t,
            x,
            x_hat,
            x_d,
            u,
            e_r,
            e_a,
            ehat_r,
            disturbance_norm,
            residual_norm,
            stage_cost,
        });
    }
    Ok(log)
}

/// Companion matplotlib script referencing the CSV by relative path.
pub fn export_plot_script(log: &TrajectoryLog, csv_name: &str, path: &Path) -> Result<()> {
    let wrap = |e: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source: e,
    };
    let n_x = log.n_x;
    let script = format!(
        r#"#!/usr/bin/env python3
"""Plot tracking errors from the companion trajectory log."""
import csv
import math
import os

import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
rows = list(csv.DictReader(open(os.path.join(here, "{csv_name}"))))
t = [float(r["t"]) for r in rows]
er = [math.sqrt(sum(float(r[f"er{{i}}"]) ** 2 for i in range({n_x}))) for r in rows]
ea = [math.sqrt(sum(float(r[f"ea{{i}}"]) ** 2 for i in range({n_x}))) for r in rows]
dist = [float(r["dist_norm"]) for r in rows]

fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(8, 6))
ax1.semilogy(t, er, label="||e_r||")
ax1.semilogy(t, ea, label="||e_a||")
ax1.set_ylabel("error norm")
ax1.legend()
ax2.plot(t, dist, color="tab:red")
ax2.set_ylabel("||xi||")
ax2.set_xlabel("t [s]")
fig.tight_layout()
fig.savefig(os.path.join(here, "{csv_name}".replace(".csv", ".png")), dpi=150)
"#
    );
    std::fs::write(path, script).map_err(wrap)
}
