//! Parameter fitting by multistart BFGS on the training MSE.

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::cell::RefCell;

use crate::datagen::Dataset;
use crate::expr::{ExprError, ExpressionTree, Program, Workspace};
use crate::rng::{derive_seed, StreamRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("prediction/target length mismatch ({pred} vs {target})")]
    LengthMismatch { pred: usize, target: usize },
    #[error("cannot compute MSE of an empty vector")]
    Empty,
    #[error("objective is not finite at the given parameters")]
    NonFiniteObjective,
    #[error("objective was non-finite at all {restarts} starting points")]
    AllRestartsFailed { restarts: usize },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

pub fn mse(pred: &[f64], targets: &[f64]) -> Result<f64, FitError> {
    if pred.len() != targets.len() {
        return Err(FitError::LengthMismatch {
            pred: pred.len(),
            target: targets.len(),
        });
    }
    if pred.is_empty() {
        return Err(FitError::Empty);
    }
    let sse: f64 = pred.iter().zip(targets).map(|(p, y)| (p - y).powi(2)).sum();
    Ok(sse / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMethod {
    /// Central differences with step `1e-6 * max(1, |theta_i|)`.
    FiniteDifference,
    /// Reverse accumulation through the protected operators.
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    /// Standard deviation of the random starting points (mean 0).
    pub init_sd: f64,
    pub gradient: GradientMethod,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 100,
            max_iter: 500,
            grad_tol: 1e-8,
            rel_tol: 1e-12,
            init_sd: 2.0,
            gradient: GradientMethod::Reverse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Vec<f64>,
    pub mse_train: f64,
    pub restarts_run: usize,
    pub best_restart: usize,
}

/// Training MSE of a compiled tree as a function of its parameters.
pub struct Objective<'a> {
    prog: Program,
    ws: RefCell<Workspace>,
    y: &'a [f64],
    gradient: GradientMethod,
}

impl<'a> Objective<'a> {
    pub fn new(
        tree: &ExpressionTree,
        x: &'a [f64],
        dim: usize,
        y: &'a [f64],
        gradient: GradientMethod,
    ) -> Result<Self, FitError> {
        let prog = tree.compile();
        let n = prog.check_inputs(tree.theta(), x, dim)?;
        if n != y.len() {
            return Err(FitError::LengthMismatch { pred: n, target: y.len() });
        }
        if n == 0 {
            return Err(FitError::Empty);
        }
        let ws = RefCell::new(prog.workspace(x, dim));
        Ok(Objective { prog, ws, y, gradient })
    }

    pub fn for_dataset(tree: &ExpressionTree, data: &'a Dataset, gradient: GradientMethod) -> Result<Self, FitError> {
        Self::new(tree, &data.x, data.dim, &data.y, gradient)
    }

    fn n(&self) -> f64 {
        self.y.len() as f64
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        self.ws.borrow_mut().sse(&self.prog, theta, self.y) / self.n()
    }

    /// Objective value and gradient at `theta`.
    pub fn value_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        match self.gradient {
            GradientMethod::Reverse => {
                let sse = self.ws.borrow_mut().sse_with_gradient(&self.prog, theta, self.y, grad);
                grad.iter_mut().for_each(|g| *g /= self.n());
                sse / self.n()
            }
            GradientMethod::FiniteDifference => {
                let f = self.value(theta);
                central_gradient(|t| self.value(t), theta, grad);
                f
            }
        }
    }
}

/// Central-difference gradient with step `1e-6 * max(1, |theta_i|)`.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, theta: &[f64], grad: &mut [f64]) {
    let mut t = theta.to_vec();
    for i in 0..theta.len() {
        let h = 1e-6 * theta[i].abs().max(1.0);
        t[i] = theta[i] + h;
        let fp = f(&t);
        t[i] = theta[i] - h;
        let fm = f(&t);
        t[i] = theta[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    pub theta: Vec<f64>,
    pub mse: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Search direction from `theta` with directional derivative `slope < 0`.
struct Step<'a> {
    theta: &'a [f64],
    f0: f64,
    slope: f64,
    d: &'a [f64],
}

impl Step<'_> {
    fn point(&self, alpha: f64, out: &mut [f64]) {
        for ((o, t), d) in out.iter_mut().zip(self.theta).zip(self.d) {
            *o = t + alpha * d;
        }
    }

    fn sufficient(&self, alpha: f64, f: f64) -> bool {
        f.is_finite() && f <= self.f0 + 1e-4 * alpha * self.slope
    }
}

/// Halves `alpha` until sufficient decrease; leaves the point in `trial`.
fn armijo(obj: &Objective<'_>, step: &Step<'_>, mut alpha: f64, trial: &mut [f64]) -> Option<f64> {
    for _ in 0..60 {
        step.point(alpha, trial);
        let f = obj.value(trial);
        if step.sufficient(alpha, f) {
            return Some(f);
        }
        alpha *= 0.5;
    }
    None
}

/// One BFGS run from `theta0` with Armijo backtracking.
///
/// Returns `None` if the objective is not finite at `theta0`. The returned
/// MSE never exceeds the starting value.
pub fn bfgs(obj: &Objective<'_>, theta0: &[f64], config: &FitConfig) -> Option<LocalFit> {
    let p = theta0.len();
    let mut theta = theta0.to_vec();
    let mut g = vec![0.0; p];
    let mut f = obj.value_and_gradient(&theta, &mut g);
    if !f.is_finite() {
        return None;
    }
    if p == 0 {
        return Some(LocalFit { theta, mse: f, iterations: 0, converged: true });
    }

    // Inverse Hessian approximation, row-major.
    let mut h = identity(p);
    let mut h_is_identity = true;
    let mut g_new = vec![0.0; p];
    let mut d = vec![0.0; p];
    let mut trial = vec![0.0; p];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_iter {
        if !g.iter().all(|v| v.is_finite()) {
            break;
        }
        if inf_norm(&g) < config.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut accepted = None;
        for attempt in 0..2 {
            mat_vec_neg(&h, &g, &mut d);
            let mut slope = dot(&g, &d);
            if !(slope < 0.0) {
                h = identity(p);
                h_is_identity = true;
                d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
                slope = dot(&g, &d);
            }
            let alpha = if h_is_identity { (1.0 / inf_norm(&g)).min(1.0) } else { 1.0 };
            let step = Step { theta: &theta, f0: f, slope, d: &d };
            // The workspace still holds the accepted point, so this only
            // adds the reverse pass.
            accepted = armijo(obj, &step, alpha, &mut trial).map(|_| obj.value_and_gradient(&trial, &mut g_new));
            if accepted.is_some() || (attempt == 0 && h_is_identity) {
                break;
            }
            // Retry once along steepest descent.
            h = identity(p);
            h_is_identity = true;
        }
        let Some(f_new) = accepted else {
            break;
        };

        let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let small_change = (f - f_new).abs() <= config.rel_tol * f.abs();

        theta.copy_from_slice(&trial);
        g.copy_from_slice(&g_new);
        let f_old = f;
        f = f_new;
        if small_change || f == 0.0 {
            converged = true;
            break;
        }
        debug_assert!(f <= f_old);

        let sy = dot(&s, &yv);
        let yy = dot(&yv, &yv);
        if sy > 1e-12 * dot(&s, &s).sqrt() * yy.sqrt() && sy.is_finite() && yy > 0.0 {
            if h_is_identity {
                let scale = sy / yy;
                h.iter_mut().for_each(|v| *v *= scale);
            }
            bfgs_update(&mut h, &s, &yv, sy);
            h_is_identity = false;
            if !h.iter().all(|v| v.is_finite()) {
                h = identity(p);
                h_is_identity = true;
            }
        }
    }
    Some(LocalFit { theta, mse: f, iterations, converged })
}

fn identity(p: usize) -> Vec<f64> {
    let mut h = vec![0.0; p * p];
    for i in 0..p {
        h[i * p + i] = 1.0;
    }
    h
}

fn mat_vec_neg(h: &[f64], g: &[f64], out: &mut [f64]) {
    let p = g.len();
    for i in 0..p {
        out[i] = -dot(&h[i * p..(i + 1) * p], g);
    }
}

/// `H <- (I - r s y^T) H (I - r y s^T) + r s s^T` with `r = 1 / (s.y)`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let p = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..p).map(|i| dot(&h[i * p..(i + 1) * p], y)).collect();
    let yhy = dot(y, &hy);
    let coef = rho * rho * yhy + rho;
    for i in 0..p {
        for j in 0..p {
            h[i * p + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

/// Multistart fit. Restart 0 starts from the tree's embedded parameters,
/// the rest from `N(0, init_sd^2)` draws on per-restart substreams seeded
/// from one draw of `rng`. Ties keep the lowest restart index.
pub fn fit_parameters<R: RngCore + ?Sized>(
    tree: &ExpressionTree,
    train: &Dataset,
    config: &FitConfig,
    rng: &mut R,
) -> Result<FitResult, FitError> {
    let obj = Objective::for_dataset(tree, train, config.gradient)?;
    let p = tree.num_params();
    if p == 0 {
        let mse_train = obj.value(&[]);
        if !mse_train.is_finite() {
            return Err(FitError::NonFiniteObjective);
        }
        return Ok(FitResult { theta_hat: vec![], mse_train, restarts_run: 0, best_restart: 0 });
    }

    let base = rng.next_u64();
    let restarts = config.restarts.max(1);
    let init = Normal::new(0.0, config.init_sd).expect("init_sd is finite and non-negative");
    let mut best: Option<(usize, LocalFit)> = None;
    for j in 0..restarts {
        let start: Vec<f64> = if j == 0 {
            tree.theta().to_vec()
        } else {
            let mut r = StreamRng::seed_from_u64(derive_seed(base, "fit-restart", j as u64));
            (0..p).map(|_| init.sample(&mut r)).collect()
        };
        let Some(local) = bfgs(&obj, &start, config) else {
            continue;
        };
        if best.as_ref().is_none_or(|(_, b)| local.mse < b.mse) {
            best = Some((j, local));
        }
    }
    let (best_restart, local) = best.ok_or(FitError::AllRestartsFailed { restarts })?;
    Ok(FitResult {
        theta_hat: local.theta,
        mse_train: local.mse,
        restarts_run: restarts,
        best_restart,
    })
}

/// Single BFGS run on `(x, y)` warm-started at `theta0`.
pub fn refit_from(
    tree: &ExpressionTree,
    x: &[f64],
    dim: usize,
    y: &[f64],
    theta0: &[f64],
    config: &FitConfig,
) -> Result<LocalFit, FitError> {
    let obj = Objective::new(tree, x, dim, y, config.gradient)?;
    bfgs(&obj, theta0, config).ok_or(FitError::NonFiniteObjective)
}
