//! Layered function approximator trained with sign-only weight steps.
//!
//! One instance learns the uncertainty estimate online in the observer
//! circuit; another learns the value estimate in the outer loop. Hidden
//! layers are tanh, the output layer is linear. Every update moves each
//! weight by exactly -eta * sign(gradient), with sign(0) = 0, so the
//! per-step weight motion is bounded by eta regardless of gradient scale.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Layer {
    weights: DMatrix<f64>,
    biases: DVector<f64>,
}

/// Feed-forward approximator with a fixed sign-descent step size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Approximator {
    layers: Vec<Layer>,
    step_size: f64,
}

/// Gradient of a loss with respect to every weight and bias.
#[derive(Clone, Debug)]
pub struct Gradient {
    layers: Vec<Layer>,
}

impl Gradient {
    pub fn zeros_like(approx: &Approximator) -> Self {
        Gradient {
            layers: approx
                .layers
                .iter()
                .map(|l| Layer {
                    weights: DMatrix::zeros(l.weights.nrows(), l.weights.ncols()),
                    biases: DVector::zeros(l.biases.len()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.biases += &b.biases;
        }
    }

    /// Iterate all gradient entries (weights then biases, layer by layer).
    pub fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }
}

impl Approximator {
    /// Uniform [-0.1, 0.1] initialization from a seeded generator.
    pub fn new(layer_sizes: &[usize], step_size: f64, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(
                "approximator needs at least two non-empty layers".into(),
            ));
        }
        if step_size <= 0.0 {
            return Err(Error::Config("step size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| Layer {
                weights: DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-0.1..0.1)),
                biases: DVector::from_fn(w[1], |_, _| rng.gen_range(-0.1..0.1)),
            })
            .collect();
        Ok(Approximator { layers, step_size })
    }

    /// Standard architecture used throughout: two tanh hidden layers of 32.
    pub fn standard(n_in: usize, n_out: usize, step_size: f64, seed: u64) -> Result<Self> {
        Self::new(&[n_in, 32, 32, n_out], step_size, seed)
    }

    pub fn zeroed(layer_sizes: &[usize], step_size: f64) -> Result<Self> {
        let mut a = Self::new(layer_sizes, step_size, 0)?;
        for l in &mut a.layers {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
        Ok(a)
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn set_step_size(&mut self, eta: f64) {
        self.step_size = eta;
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    /// Deterministic feed-forward evaluation.
    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("approximator input", self.input_dim(), x.len())?;
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            a = &layer.weights * a + &layer.biases;
            if i < last {
                a.apply(|v| *v = v.tanh());
            }
        }
        Ok(a)
    }

    /// Gradient of the squared-error loss ||forward(x) - target||^2.
    pub fn gradient_of_loss(&self, x: &DVector<f64>, target: &DVector<f64>) -> Result<Gradient> {
        check_dim("approximator input", self.input_dim(), x.len())?;
        check_dim("approximator target", self.output_dim(), target.len())?;
        let last = self.layers.len() - 1;

        // forward pass, caching post-activation values
        let mut activations = vec![x.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut a = &layer.weights * activations.last().unwrap() + &layer.biases;
            if i < last {
                a.apply(|v| *v = v.tanh());
            }
            activations.push(a);
        }

        // backward pass; delta = dL/d(pre-activation)
        let mut grad = Gradient::zeros_like(self);
        let mut delta = (activations.last().unwrap() - target) * 2.0;
        for i in (0..self.layers.len()).rev() {
            grad.layers[i].weights = &delta * activations[i].transpose();
            grad.layers[i].biases = delta.clone();
            if i > 0 {
                let upstream = self.layers[i].weights.transpose() * &delta;
                // d tanh(z) = 1 - tanh(z)^2, with activations[i] = tanh(z)
                delta = upstream.zip_map(&activations[i], |u, a| u * (1.0 - a * a));
            }
        }
        Ok(grad)
    }

    /// w <- w - eta * sign(g); sign(0) = 0 leaves the weight untouched.
    pub fn sign_update(&mut self, gradient: &Gradient) -> Result<()> {
        check_dim("gradient layers", self.layers.len(), gradient.layers.len())?;
        for (layer, g) in self.layers.iter_mut().zip(&gradient.layers) {
            check_dim("gradient rows", layer.weights.nrows(), g.weights.nrows())?;
            check_dim("gradient cols", layer.weights.ncols(), g.weights.ncols())?;
            let eta = self.step_size;
            layer
                .weights
                .zip_apply(&g.weights, |w, g| *w -= eta * sign(g));
            layer.biases.zip_apply(&g.biases, |b, g| *b -= eta * sign(g));
        }
        if self
            .layers
            .iter()
            .any(|l| l.weights.iter().chain(l.biases.iter()).any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("approximator weights"));
        }
        Ok(())
    }

    /// Flat copy of all parameters (for boundedness checks and snapshots).
    pub fn flat_weights(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
            .collect()
    }

    /// Add `delta` to the parameter at `index` in `flat_weights` order
    /// (finite-difference probes in tests).
    pub fn perturb_flat(&mut self, index: usize, delta: f64) {
        let mut i = index;
        for l in &mut self.layers {
            let nw = l.weights.len();
            if i < nw {
                l.weights[i] += delta;
                return;
            }
            i -= nw;
            let nb = l.biases.len();
            if i < nb {
                l.biases[i] += delta;
                return;
            }
            i -= nb;
        }
        panic!("flat parameter index {index} out of range");
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let data = serde_json::to_string(self).expect("approximator serializes");
        std::fs::write(path, data).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let data = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&data).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
