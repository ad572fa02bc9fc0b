//! Planar n-link manipulator dynamics with point masses at the link ends.
//!
//! Joint angles are relative; q = 0 is the hanging (straight-down)
//! configuration, so gravity vanishes there. All quantities are derived
//! from the kinetic/potential energy of the point-mass chain, which keeps
//! the model analytic and cheap for n <= 3.

use nalgebra::{DMatrix, DVector};

/// Physical parameters of the chain.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ArmParams {
    /// Point mass at the end of each link [kg].
    pub masses: Vec<f64>,
    /// Link lengths [m].
    pub lengths: Vec<f64>,
    /// Gravitational acceleration [m/s^2], pulling in -y.
    pub gravity: f64,
}

impl ArmParams {
    pub fn uniform(n_links: usize) -> Self {
        Self {
            masses: vec![1.0; n_links],
            lengths: vec![1.0; n_links],
            gravity: 9.81,
        }
    }

    pub fn n_links(&self) -> usize {
        self.masses.len()
    }

    /// Absolute link angles from the downward vertical.
    fn absolute_angles(&self, q: &[f64]) -> Vec<f64> {
        let mut theta = Vec::with_capacity(q.len());
        let mut acc = 0.0;
        for &qi in q {
            acc += qi;
            theta.push(acc);
        }
        theta
    }

    /// Joint-space mass matrix M(q).
    ///
    /// M_ab = sum_i m_i * sum_{j>=a, j'>=b, j,j'<=i} l_j l_j' cos(theta_j - theta_j')
    pub fn mass_matrix(&self, q: &[f64]) -> DMatrix<f64> {
        let n = self.n_links();
        let theta = self.absolute_angles(q);
        let mut m = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                let mut sum = 0.0;
                for i in a.max(b)..n {
                    for j in a..=i {
                        for jp in b..=i {
                            sum += self.masses[i]
                                * self.lengths[j]
                                * self.lengths[jp]
                                * (theta[j] - theta[jp]).cos();
                        }
                    }
                }
                m[(a, b)] = sum;
            }
        }
        m
    }

    /// dM/dq_c, needed for the Christoffel symbols.
    fn mass_matrix_partial(&self, q: &[f64], c: usize) -> DMatrix<f64> {
        let n = self.n_links();
        let theta = self.absolute_angles(q);
        let mut dm = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                let mut sum = 0.0;
                for i in a.max(b)..n {
                    for j in a..=i {
                        for jp in b..=i {
                            let dep = (j >= c) as i32 - (jp >= c) as i32;
                            if dep != 0 {
                                sum -= self.masses[i]
                                    * self.lengths[j]
                                    * self.lengths[jp]
                                    * (theta[j] - theta[jp]).sin()
                                    * dep as f64;
                            }
                        }
                    }
                }
                dm[(a, b)] = sum;
            }
        }
        dm
    }

    /// Coriolis/centrifugal torque vector C(q, qdot) * qdot.
    pub fn coriolis_vector(&self, q: &[f64], qd: &[f64]) -> DVector<f64> {
        let n = self.n_links();
        let partials: Vec<DMatrix<f64>> = (0..n).map(|c| self.mass_matrix_partial(q, c)).collect();
        let mut cv = DVector::zeros(n);
        for a in 0..n {
            let mut sum = 0.0;
            for b in 0..n {
                for c in 0..n {
                    let gamma = 0.5
                        * (partials[c][(a, b)] + partials[b][(a, c)] - partials[a][(b, c)]);
                    sum += gamma * qd[b] * qd[c];
                }
            }
            cv[a] = sum;
        }
        cv
    }

    /// Gravity torque vector G(q) = dU/dq.
    pub fn gravity_vector(&self, q: &[f64]) -> DVector<f64> {
        let n = self.n_links();
        let theta = self.absolute_angles(q);
        let mut g = DVector::zeros(n);
        for a in 0..n {
            let mut sum = 0.0;
            for i in a..n {
                for j in a..=i {
                    sum += self.masses[i] * self.lengths[j] * theta[j].sin();
                }
            }
            g[a] = self.gravity * sum;
        }
        g
    }

    /// Position Jacobian (2 x n) of the end of `link` (1-based).
    pub fn link_jacobian(&self, q: &[f64], link: usize) -> DMatrix<f64> {
        let n = self.n_links();
        assert!(link >= 1 && link <= n, "link index out of range");
        let theta = self.absolute_angles(q);
        let mut jac = DMatrix::zeros(2, n);
        for a in 0..link {
            let mut jx = 0.0;
            let mut jy = 0.0;
            for j in a..link {
                jx += self.lengths[j] * theta[j].cos();
                jy += self.lengths[j] * theta[j].sin();
            }
            jac[(0, a)] = jx;
            jac[(1, a)] = jy;
        }
        jac
    }

    /// Forward joint accelerations: qdd = M^-1 (tau - C qd - G).
    pub fn forward_accel(&self, q: &[f64], qd: &[f64], tau: &DVector<f64>) -> DVector<f64> {
        let m = self.mass_matrix(q);
        let rhs = tau - self.coriolis_vector(q, qd) - self.gravity_vector(q);
        m.lu().solve(&rhs).expect("mass matrix is positive-definite")
    }

    /// Total mechanical energy (kinetic + potential, datum at the base).
    pub fn total_energy(&self, q: &[f64], qd: &[f64]) -> f64 {
        let m = self.mass_matrix(q);
        let qd_v = DVector::from_column_slice(qd);
        let kinetic = 0.5 * qd_v.dot(&(&m * &qd_v));
        let theta = self.absolute_angles(q);
        let mut potential = 0.0;
        let mut y = 0.0;
        for i in 0..self.n_links() {
            y -= self.lengths[i] * theta[i].cos();
            potential += self.masses[i] * self.gravity * y;
        }
        kinetic + potential
    }
}
