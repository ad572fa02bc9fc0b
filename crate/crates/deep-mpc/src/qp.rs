//! Dense active-set solver for strictly convex quadratic programs
//!
//! ```text
//!     minimize    1/2 x' H x + c' x
//!     subject to  A_eq x  = b_eq
//!                 A_in x <= b_in
//! ```
//!
//! The working set is iterated by KKT refactorization: solve the
//! equality-constrained subproblem, add the most violated inequality,
//! drop the most negative multiplier. Warm starts reuse the previous
//! active set, which is what the SQP loop feeds back between iterations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    /// One multiplier per inequality row; zero for inactive rows.
    pub in_multipliers: DVector<f64>,
    pub active_set: Vec<usize>,
    pub iterations: usize,
}

const FEAS_TOL: f64 = 1e-9;
const MULT_TOL: f64 = 1e-9;

pub fn solve_qp(qp: &QpProblem, warm_active: Option<&[usize]>) -> Result<QpSolution> {
    let m_eq = qp.a_eq.nrows();
    let m_in = qp.a_in.nrows();
    let max_iter = 50 + 10 * (m_eq + m_in);

    let mut working: Vec<usize> = warm_active
        .map(|w| w.iter().copied().filter(|&i| i < m_in).collect())
        .unwrap_or_default();
    working.dedup();

    let mut last_objective = f64::INFINITY;
    for iter in 0..max_iter {
        let (x, lam_eq, lam_w) = match solve_kkt(qp, &working) {
            Some(sol) => sol,
            None => {
                // linearly dependent working set; drop the newest row
                if working.pop().is_none() {
                    return Err(Error::MaxIterations {
                        iterations: iter,
                        best_objective: f64::INFINITY,
                    });
                }
                continue;
            }
        };
        last_objective = 0.5 * x.dot(&(&qp.h * &x)) + qp.c.dot(&x);

        // most violated inactive inequality
        let mut worst = (None, FEAS_TOL);
        for i in 0..m_in {
            if working.contains(&i) {
                continue;
            }
            let v = qp.a_in.row(i).dot(&x.transpose()) - qp.b_in[i];
            if v > worst.1 {
                worst = (Some(i), v);
            }
        }
        if let Some(i) = worst.0 {
            working.push(i);
            continue;
        }

        // most negative working multiplier
        let mut drop = (None, -MULT_TOL);
        for (k, &i) in working.iter().enumerate() {
            if lam_w[k] < drop.1 {
                drop = (Some((k, i)), lam_w[k]);
            }
        }
        if let Some((k, _)) = drop.0 {
            working.remove(k);
            continue;
        }

        let mut in_multipliers = DVector::zeros(m_in);
        for (k, &i) in working.iter().enumerate() {
            in_multipliers[i] = lam_w[k].max(0.0);
        }
        return Ok(QpSolution {
            x,
            eq_multipliers: lam_eq,
            in_multipliers,
            active_set: working,
            iterations: iter + 1,
        });
    }

    Err(Error::MaxIterations {
        iterations: max_iter,
        best_objective: last_objective,
    })
}

/// Solve the KKT system for the current working set; `None` on a singular
/// (linearly dependent) system.
fn solve_kkt(
    qp: &QpProblem,
    working: &[usize],
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = qp.h.nrows();
    let m_eq = qp.a_eq.nrows();
    let m_w = working.len();
    let dim = n + m_eq + m_w;

    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
    if m_eq > 0 {
        kkt.view_mut((n, 0), (m_eq, n)).copy_from(&qp.a_eq);
        kkt.view_mut((0, n), (n, m_eq))
            .copy_from(&qp.a_eq.transpose());
    }
    for (k, &i) in working.iter().enumerate() {
        for j in 0..n {
            kkt[(n + m_eq + k, j)] = qp.a_in[(i, j)];
            kkt[(j, n + m_eq + k)] = qp.a_in[(i, j)];
        }
    }

    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&qp.c));
    rhs.rows_mut(n, m_eq).copy_from(&qp.b_eq);
    for (k, &i) in working.iter().enumerate() {
        rhs[n + m_eq + k] = qp.b_in[i];
    }

    let lu = kkt.full_piv_lu();
    let sol = lu.solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = DVector::from(sol.rows(0, n));
    let lam_eq = DVector::from(sol.rows(n, m_eq));
    let lam_w = DVector::from(sol.rows(n + m_eq, m_w));
    Some((x, lam_eq, lam_w))
}

/// Infinity-norm KKT residual (stationarity, primal feasibility, and
/// complementarity) of a candidate solution.
pub fn kkt_residual(qp: &QpProblem, sol: &QpSolution) -> f64 {
    let stationarity = (&qp.h * &sol.x
        + &qp.c
        + qp.a_eq.transpose() * &sol.eq_multipliers
        + qp.a_in.transpose() * &sol.in_multipliers)
        .amax();
    let eq_res = if qp.a_eq.nrows() > 0 {
        (&qp.a_eq * &sol.x - &qp.b_eq).amax()
    } else {
        0.0
    };
    let mut in_res: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..qp.a_in.nrows() {
        let slack = qp.a_in.row(i).dot(&sol.x.transpose()) - qp.b_in[i];
        in_res = in_res.max(slack.max(0.0));
        comp = comp.max((sol.in_multipliers[i] * slack).abs());
    }
    stationarity.max(eq_res).max(in_res).max(comp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn box_qp(p: &[f64], lo: f64, hi: f64) -> QpProblem {
        let n = p.len();
        let mut a_in = DMatrix::zeros(2 * n, n);
        let mut b_in = DVector::zeros(2 * n);
        for i in 0..n {
            a_in[(i, i)] = 1.0;
            b_in[i] = hi;
            a_in[(n + i, i)] = -1.0;
            b_in[n + i] = -lo;
        }
        QpProblem {
            h: DMatrix::identity(n, n),
            c: DVector::from_iterator(n, p.iter().map(|v| -v)),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in,
            b_in,
        }
    }

    #[test]
    fn unconstrained_minimum_inside_box() {
        let qp = box_qp(&[0.3, -0.7], -1.0, 1.0);
        let sol = solve_qp(&qp, None).unwrap();
        assert_relative_eq!(sol.x[0], 0.3, epsilon = 1e-10);
        assert_relative_eq!(sol.x[1], -0.7, epsilon = 1e-10);
        assert!(kkt_residual(&qp, &sol) < 1e-9);
    }

    #[test]
    fn projection_onto_box_clamps() {
        // min ||x - p||^2 over a box has the clamped point as solution
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let qp = box_qp(&p, -1.0, 1.0);
            let sol = solve_qp(&qp, None).unwrap();
            for i in 0..4 {
                assert_relative_eq!(sol.x[i], p[i].clamp(-1.0, 1.0), epsilon = 1e-9);
            }
            assert!(kkt_residual(&qp, &sol) < 1e-8);
        }
    }

    #[test]
    fn equality_constrained_closed_form() {
        // min 1/2 ||x||^2 s.t. x1 + x2 = 1 -> x = (0.5, 0.5)
        let qp = QpProblem {
            h: DMatrix::identity(2, 2),
            c: DVector::zeros(2),
            a_eq: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b_eq: DVector::from_element(1, 1.0),
            a_in: DMatrix::zeros(0, 2),
            b_in: DVector::zeros(0),
        };
        let sol = solve_qp(&qp, None).unwrap();
        assert_relative_eq!(sol.x[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn mixed_constraints_with_warm_start() {
        // min 1/2 x'Hx + c'x, x1 + x2 = 1, x >= 0.4 each side conflicting
        let qp = QpProblem {
            h: DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]),
            c: DVector::from_column_slice(&[-1.0, 0.0]),
            a_eq: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b_eq: DVector::from_element(1, 1.0),
            a_in: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]),
            b_in: DVector::from_column_slice(&[-0.4, -0.4]),
        };
        let cold = solve_qp(&qp, None).unwrap();
        let warm = solve_qp(&qp, Some(&cold.active_set)).unwrap();
        assert!((&cold.x - &warm.x).norm() < 1e-10);
        assert!(warm.iterations <= cold.iterations);
        assert!(kkt_residual(&qp, &cold) < 1e-9);
    }

    #[test]
    fn random_qps_satisfy_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = 5;
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &m * m.transpose() + DMatrix::identity(n, n);
            let c = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let a_in = DMatrix::from_fn(8, n, |_, _| rng.gen_range(-1.0..1.0));
            let b_in = DVector::from_fn(8, |_, _| rng.gen_range(0.1..1.0));
            let qp = QpProblem {
                h,
                c,
                a_eq: DMatrix::zeros(0, n),
                b_eq: DVector::zeros(0),
                a_in,
                b_in,
            };
            let sol = solve_qp(&qp, None).unwrap();
            assert!(kkt_residual(&qp, &sol) < 1e-8);
        }
    }
}
