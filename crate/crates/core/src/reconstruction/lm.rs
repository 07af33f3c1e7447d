//! Dense Levenberg–Marquardt for small problems.

use nalgebra::{DMatrix, DVector};

pub(crate) trait LeastSquares {
    /// Residuals at `x`, or `None` when `x` is outside the valid domain.
    fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>>;
    fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>>;
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LmSettings {
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_iterations: usize,
    pub g_tol: f64,
    pub f_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Termination {
    Gradient,
    CostDecrease,
    /// Damping grew past the point where any step changes the cost.
    Stalled,
    MaxIterations,
    /// The start point or its Jacobian could not be evaluated.
    InvalidStart,
}

#[derive(Debug, Clone)]
pub(crate) struct LmReport {
    pub x: DVector<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Cost after every accepted step, starting with the initial cost.
    pub history: Vec<f64>,
}

impl LmReport {
    pub fn converged(&self) -> bool {
        matches!(
            self.termination,
            Termination::Gradient | Termination::CostDecrease | Termination::Stalled
        )
    }
}

const MAX_DAMPING: f64 = 1e16;

fn half_sq(r: &DVector<f64>) -> f64 {
    0.5 * r.norm_squared()
}

pub(crate) fn minimize<P: LeastSquares>(problem: &P, x0: DVector<f64>, s: &LmSettings) -> LmReport {
    let mut x = x0;
    let Some(mut r) = problem.residuals(&x) else {
        return LmReport {
            cost: f64::INFINITY,
            x,
            iterations: 0,
            termination: Termination::InvalidStart,
            history: Vec::new(),
        };
    };
    let mut cost = half_sq(&r);
    let mut history = vec![cost];
    let mut lambda = s.initial_damping;
    let mut iterations = 0;

    let termination = 'outer: loop {
        if iterations >= s.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;
        let Some(j) = problem.jacobian(&x) else {
            break Termination::InvalidStart;
        };
        let jt = j.transpose();
        let gradient = &jt * &r;
        // A small gradient alone is not enough in long flat valleys; keep
        // stepping while steps still lower the cost.
        let flat = gradient.amax() < s.g_tol;
        let normal = &jt * &j;
        let diag_floor = normal.diagonal().amax().max(1.0) * 1e-12;

        loop {
            let mut damped = normal.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda * normal[(i, i)].max(diag_floor);
            }
            let step = damped.cholesky().map(|c| c.solve(&(-&gradient)));
            if let Some(step) = step {
                let candidate = &x + &step;
                if let Some(r_new) = problem.residuals(&candidate) {
                    let new_cost = half_sq(&r_new);
                    if new_cost < cost {
                        let decrease = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                        x = candidate;
                        r = r_new;
                        cost = new_cost;
                        history.push(cost);
                        lambda = (lambda / s.damping_decrease).max(1e-15);
                        if decrease < s.f_tol || cost == 0.0 {
                            break 'outer Termination::CostDecrease;
                        }
                        break;
                    }
                }
            }
            if flat {
                break 'outer Termination::Gradient;
            }
            lambda *= s.damping_increase;
            if lambda > MAX_DAMPING {
                break 'outer Termination::Stalled;
            }
        }
    };

    LmReport {
        x,
        cost,
        iterations,
        termination,
        history,
    }
}
