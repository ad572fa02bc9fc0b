//! Episode loop around the robust MPC: run the closed loop, collect
//! transition tuples with their running costs, regress a value estimate
//! on backward cost-to-go sums, and feed it back into the MPC as an
//! additive terminal cost.

use std::collections::VecDeque;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::approximator::Approximator;
use crate::error::{Error, Result};
use crate::plant::{ControlInput, State};
use crate::rmpc::{NominalModel, RmpcSolver};

/// One step of experience: state, applied input, running cost, successor.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTuple {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub cost: f64,
    pub x_next: DVector<f64>,
    pub t: f64,
    /// Last tuple of its episode; the cost-to-go recursion restarts here.
    pub terminal: bool,
}

/// FIFO experience buffer with bounded capacity.
#[derive(Clone, Debug, Default)]
pub struct Buffer {
    items: VecDeque<TransitionTuple>,
    capacity: usize,
}

impl Buffer {
    pub fn with_capacity(capacity: usize) -> Self {
        Buffer {
            items: VecDeque::new(),
            capacity,
        }
    }

    pub fn push(&mut self, tuple: TransitionTuple) {
        if self.capacity > 0 && self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(tuple);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> std::collections::vec_deque::Iter<'_, TransitionTuple> {
        self.items.iter()
    }
}

/// Quadratic running cost charged on the successor state and the input.
pub fn stage_cost(
    x_next: &DVector<f64>,
    u: &DVector<f64>,
    x_ref: &DVector<f64>,
    q: &nalgebra::DMatrix<f64>,
    r: &nalgebra::DMatrix<f64>,
) -> f64 {
    let dx = x_next - x_ref;
    dx.dot(&(q * &dx)) + u.dot(&(r * u))
}

/// Undiscounted cost-to-go targets: target(k) = c(k) + target(k+1), with
/// the recursion restarting after each terminal tuple.
pub fn cost_to_go_targets(buffer: &Buffer) -> Vec<f64> {
    let mut targets = vec![0.0; buffer.len()];
    let mut tail = 0.0;
    for (i, tuple) in buffer.iter().enumerate().rev() {
        if tuple.terminal {
            tail = 0.0;
        }
        tail += tuple.cost;
        targets[i] = tail;
    }
    targets
}

/// Run one closed-loop episode of `length` steps, appending exactly
/// `length` tuples on success. `step_true` advances the real system from
/// (x, u, step index); for nominal experiments it is the model step.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<M, F>(
    solver: &mut RmpcSolver<M>,
    x0: &State,
    x_ref: &DVector<f64>,
    y_d: &DVector<f64>,
    length: usize,
    vhat: Option<&Approximator>,
    mut step_true: F,
    buffer: &mut Buffer,
) -> Result<f64>
where
    M: NominalModel,
    F: FnMut(&DVector<f64>, &DVector<f64>, usize) -> DVector<f64>,
{
    if length == 0 {
        return Err(Error::Config("episode length must be at least 1".into()));
    }
    solver.reset_warm();
    let mut x = x0.0.clone();
    let mut total = 0.0;
    for k in 0..length {
        let u: ControlInput = match solver.control_law(&State::new(x.clone())?, y_d, vhat) {
            Ok(u) => u,
            // a rough value surface can stall the SQP; fall back to the
            // plain quadratic objective for this step
            Err(Error::MaxIterations { .. }) if vhat.is_some() => {
                solver.control_law(&State::new(x.clone())?, y_d, None)?
            }
            Err(e) => return Err(e),
        };
        let x_next = step_true(&x, &u.0, k);
        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("episode rollout"));
        }
        let c = stage_cost(&x_next, &u.0, x_ref, &solver.config().q, &solver.config().r);
        total += c;
        buffer.push(TransitionTuple {
            x: x.clone(),
            u: u.0.clone(),
            cost: c,
            x_next: x_next.clone(),
            t: k as f64,
            terminal: k + 1 == length,
        });
        x = x_next;
    }
    Ok(total)
}

/// Regress the value estimate toward the buffer's cost-to-go targets with
/// batch sign-descent epochs. Each epoch that fails to lower the batch
/// loss is rejected and the step size halved. Returns the final batch
/// loss (0 on an empty buffer, with a warning).
pub fn update_value(
    buffer: &Buffer,
    vhat: &mut Approximator,
    x_ref: &DVector<f64>,
    epochs: usize,
) -> Result<f64> {
    if buffer.is_empty() {
        eprintln!("warning: update_value called with an empty buffer; no-op");
        return Ok(0.0);
    }
    let targets = cost_to_go_targets(buffer);
    let inputs: Vec<DVector<f64>> = buffer.iter().map(|t| &t.x - x_ref).collect();
    let anchor_x = DVector::zeros(x_ref.len());
    let anchor_t = DVector::zeros(1);

    let batch_loss = |net: &Approximator| -> Result<f64> {
        let mut loss = 0.0;
        for (x, &target) in inputs.iter().zip(&targets) {
            let y = net.forward(x)?;
            loss += (y[0] - target).powi(2);
        }
        let y0 = net.forward(&anchor_x)?;
        loss += y0[0].powi(2);
        Ok(loss / (inputs.len() + 1) as f64)
    };

    let mut loss = batch_loss(vhat)?;
    for _ in 0..epochs {
        let mut grad = vhat.gradient_of_loss(&anchor_x, &anchor_t)?;
        for (x, &target) in inputs.iter().zip(&targets) {
            grad.add_assign(&vhat.gradient_of_loss(x, &DVector::from_element(1, target))?);
        }
        let snapshot = vhat.clone();
        vhat.sign_update(&grad)?;
        let new_loss = batch_loss(vhat)?;
        if new_loss <= loss {
            loss = new_loss;
        } else {
            let eta = snapshot.step_size();
            *vhat = snapshot;
            vhat.set_step_size(eta * 0.5);
            if vhat.step_size() < 1e-12 {
                break;
            }
        }
    }
    Ok(loss)
}

/// One point of the learning curve.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningRecord {
    pub episode: usize,
    pub total_cost: f64,
    pub value_loss: f64,
}

/// Training hyperparameters for the episode/update alternation.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub episodes: usize,
    pub episode_length: usize,
    pub buffer_capacity: usize,
    pub update_epochs: usize,
    pub value_hidden: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for TrainSetup {
    fn default() -> Self {
        TrainSetup {
            episodes: 20,
            episode_length: 30,
            buffer_capacity: 300,
            update_epochs: 60,
            value_hidden: 16,
            step_size: 0.01,
            seed: 0,
        }
    }
}

/// Alternate episodes and value updates on a regulation task toward
/// `x_ref`. Initial states are sampled by `sample_x0` from a seeded RNG,
/// so the whole run is deterministic in `setup.seed`.
pub fn train<M, F, S>(
    solver: &mut RmpcSolver<M>,
    x_ref: &DVector<f64>,
    y_d: &DVector<f64>,
    setup: &TrainSetup,
    mut sample_x0: S,
    mut step_true: F,
) -> Result<(Approximator, Vec<LearningRecord>)>
where
    M: NominalModel,
    F: FnMut(&DVector<f64>, &DVector<f64>, usize) -> DVector<f64>,
    S: FnMut(&mut ChaCha8Rng) -> State,
{
    if setup.episodes == 0 {
        return Err(Error::Config("episodes must be at least 1".into()));
    }
    let n_x = solver.model().n_x();
    let mut vhat = Approximator::new(
        &[n_x, setup.value_hidden, 1],
        setup.step_size,
        setup.seed ^ 0x5eed_0001,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut buffer = Buffer::with_capacity(setup.buffer_capacity);
    let mut curve = Vec::with_capacity(setup.episodes);
    for episode in 0..setup.episodes {
        let x0 = sample_x0(&mut rng);
        let total_cost = run_episode(
            solver,
            &x0,
            x_ref,
            y_d,
            setup.episode_length,
            Some(&vhat),
            &mut step_true,
            &mut buffer,
        )?;
        let value_loss = update_value(&buffer, &mut vhat, x_ref, setup.update_epochs)?;
        curve.push(LearningRecord {
            episode,
            total_cost,
            value_loss,
        });
    }
    Ok((vhat, curve))
}

/// Write the learning curve as CSV with a fixed header.
pub fn write_learning_curve(curve: &[LearningRecord], path: &Path) -> Result<()> {
    let wrap = |e: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = std::fs::File::create(path).map_err(wrap)?;
    writeln!(f, "episode,total_cost,value_loss").map_err(wrap)?;
    for r in curve {
        writeln!(f, "{},{:.17e},{:.17e}", r.episode, r.total_cost, r.value_loss).map_err(wrap)?;
    }
    Ok(())
}

/// The 1-D integrator regulation task used throughout the tests: returns
/// a fresh solver with the weights used for learning experiments.
pub fn integrator_task() -> Result<RmpcSolver<crate::rmpc::Integrator1D>> {
    use nalgebra::DMatrix;
    let cfg = crate::rmpc::MpcConfig::new(
        1,
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1) * 1000.0,
        0.5,
        0.0,
        10.0,
        vec![],
    )?;
    RmpcSolver::new(crate::rmpc::Integrator1D, cfg, &DVector::zeros(1))
}

/// Unit-magnitude random-sign initial state for the integrator task.
pub fn sample_unit_sign(rng: &mut ChaCha8Rng) -> State {
    let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    State::from_slice(&[s])
}
