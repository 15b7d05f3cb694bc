//! Entropic, KL-relaxed transport loss (ROT) via damped log-domain Sinkhorn.
//!
//! With `log K = log F / eps` and `tau = (1 + alpha eps / (1 - alpha))^-1`,
//! each iteration performs
//!
//! ```text
//! log a_i <- tau * (log(n z_i) - LSE_j(log K_ij + log b_j))
//! log b_j <- -LSE_i(log K_ij + log a_i)
//! ```
//!
//! starting from `log b = 0`. The plan is `U = diag(a) K diag(b)` and the
//! returned value is
//!
//! ```text
//! alpha/n * (-<log F, U> - eps H(U)) + (1 - alpha) KL(U 1_n / n | z)
//! H(U) = -sum U_ij (log U_ij - 1)
//! ```
//!
//! `H` is evaluated exactly as written, so a one-hot column contributes
//! `H = 1`: for a singleton bag with one-hot `z` the value is
//! `-alpha log f_c - alpha eps`, not `-alpha log f_c`.
//!
//! At `alpha = 1`, `tau = 0` and `a = 1`: the plan is the per-column entropic
//! softmin and the marginal term drops out.

// Kernel loops index rows and columns of several matrices at once.
#![allow(clippy::needless_range_loop)]

use serde::{Deserialize, Serialize};

use crate::error::{LlpError, Result};
use crate::numerics::{logsumexp_iter, DenseMatrix, SimplexVec};

use super::{PredictionMatrix, TransportPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    /// Reverse-mode through every Sinkhorn iteration and the objective.
    #[default]
    Unrolled,
    /// Plan held fixed: `d loss / d log F = -alpha U / n`.
    Envelope,
}

/// Penalty on the row marginal. Only generalized KL admits the scaling
/// updates used here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MarginalDivergence {
    #[default]
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub n_iter: usize,
    #[serde(default)]
    pub divergence: MarginalDivergence,
    #[serde(default)]
    pub grad_mode: GradMode,
}

impl Default for RotConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            epsilon: 1.0,
            n_iter: 75,
            divergence: MarginalDivergence::Kl,
            grad_mode: GradMode::Unrolled,
        }
    }
}

impl RotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(LlpError::invalid(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LlpError::invalid(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.n_iter == 0 {
            return Err(LlpError::invalid("n_iter must be at least 1"));
        }
        Ok(())
    }

    /// Damping exponent of the row update; zero at `alpha = 1`.
    pub fn tau(&self) -> f64 {
        if self.alpha >= 1.0 {
            0.0
        } else {
            1.0 / (1.0 + self.alpha * self.epsilon / (1.0 - self.alpha))
        }
    }
}

/// Final Sinkhorn state and loss value.
#[derive(Debug, Clone, PartialEq)]
pub struct RotSolution {
    pub value: f64,
    pub plan: TransportPlan,
    pub log_plan: DenseMatrix,
    pub log_a: Vec<f64>,
    pub log_b: Vec<f64>,
    /// Exponent the iterates were computed with.
    pub tau: f64,
}

struct Problem {
    log_k: DenseMatrix,
    log_nz: Vec<f64>,
    tau: f64,
}

impl Problem {
    fn new(f: &PredictionMatrix, z: &SimplexVec, cfg: &RotConfig, tau: f64) -> Self {
        let n = f.bag_size() as f64;
        let eps = cfg.epsilon;
        Self {
            log_k: f.log_values().map(|x| x / eps),
            log_nz: z.values().iter().map(|&zi| (n * zi).ln()).collect(),
            tau,
        }
    }

    fn k(&self) -> usize {
        self.log_k.rows()
    }

    fn n(&self) -> usize {
        self.log_k.cols()
    }

    /// `LSE_j(log K_ij + log b_j)`.
    fn row_lse(&self, i: usize, log_b: &[f64]) -> f64 {
        logsumexp_iter(self.log_k.row(i).iter().zip(log_b).map(|(k, b)| k + b))
    }

    /// `LSE_i(log K_ij + log a_i)`.
    fn col_lse(&self, j: usize, log_a: &[f64]) -> f64 {
        logsumexp_iter((0..self.k()).map(|i| self.log_k.get(i, j) + log_a[i]))
    }

    fn a_update(&self, i: usize, log_b: &[f64]) -> f64 {
        if self.tau == 0.0 {
            0.0
        } else if self.log_nz[i] == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.tau * (self.log_nz[i] - self.row_lse(i, log_b))
        }
    }

    fn b_update(&self, j: usize, log_a: &[f64]) -> f64 {
        -self.col_lse(j, log_a)
    }

    /// Runs the iterations; with `history`, stores every `(log a, log b)` pair.
    fn iterate(
        &self,
        n_iter: usize,
        mut history: Option<&mut Vec<(Vec<f64>, Vec<f64>)>>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (k, n) = (self.k(), self.n());
        let mut log_a = vec![0.0; k];
        let mut log_b = vec![0.0; n];
        for it in 1..=n_iter {
            for (i, a) in log_a.iter_mut().enumerate() {
                *a = self.a_update(i, &log_b);
            }
            if log_a.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
                return Err(LlpError::SinkhornDiverged { iteration: it });
            }
            for (j, b) in log_b.iter_mut().enumerate() {
                *b = self.b_update(j, &log_a);
            }
            if log_b.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
                return Err(LlpError::SinkhornDiverged { iteration: it });
            }
            if let Some(h) = history.as_deref_mut() {
                h.push((log_a.clone(), log_b.clone()));
            }
        }
        Ok((log_a, log_b))
    }

    fn log_plan(&self, log_a: &[f64], log_b: &[f64]) -> DenseMatrix {
        DenseMatrix::from_fn(self.k(), self.n(), |i, j| {
            log_a[i] + self.log_k.get(i, j) + log_b[j]
        })
    }
}

/// Row means `U 1_n / n`.
fn plan_marginal(u: &DenseMatrix) -> Vec<f64> {
    let n = u.cols() as f64;
    (0..u.rows())
        .map(|i| u.row(i).iter().sum::<f64>() / n)
        .collect()
}

/// Objective at a given plan, using `0 log 0 = 0`.
fn objective(f: &PredictionMatrix, z: &SimplexVec, cfg: &RotConfig, log_u: &DenseMatrix) -> f64 {
    let lf = f.log_values();
    let n = f.bag_size() as f64;
    let alpha = cfg.alpha;
    let mut transport = 0.0;
    let mut neg_entropy = 0.0;
    for (idx, &lu) in log_u.data().iter().enumerate() {
        if lu == f64::NEG_INFINITY {
            continue;
        }
        let u = lu.exp();
        transport -= u * lf.data()[idx];
        neg_entropy += u * (lu - 1.0);
    }
    let fit = if alpha == 0.0 {
        0.0
    } else {
        alpha / n * (transport + cfg.epsilon * neg_entropy)
    };
    let marginal = if alpha == 1.0 {
        0.0
    } else {
        let u = log_u.map(f64::exp);
        (1.0 - alpha) * super::generalized_kl(&plan_marginal(&u), z.values())
    };
    fit + marginal
}

fn finish(
    f: &PredictionMatrix,
    z: &SimplexVec,
    cfg: &RotConfig,
    p: &Problem,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
) -> Result<RotSolution> {
    let log_plan = p.log_plan(&log_a, &log_b);
    if !log_plan.is_valid_log_domain() {
        return Err(LlpError::SinkhornDiverged {
            iteration: cfg.n_iter,
        });
    }
    let value = objective(f, z, cfg, &log_plan);
    if value.is_nan() {
        return Err(LlpError::SinkhornDiverged {
            iteration: cfg.n_iter,
        });
    }
    let plan = TransportPlan::new(log_plan.map(f64::exp))?;
    Ok(RotSolution {
        value,
        plan,
        log_plan,
        log_a,
        log_b,
        tau: p.tau,
    })
}

fn warn_alpha_zero(cfg: &RotConfig) {
    if cfg.alpha == 0.0 {
        log::warn!(
            "ROT loss with alpha = 0 carries no transport term; only the marginal KL remains"
        );
    }
}

/// Runs the damped Sinkhorn iterations and evaluates the ROT objective.
pub fn rot_loss(f: &PredictionMatrix, z: &SimplexVec, cfg: &RotConfig) -> Result<RotSolution> {
    solve_with_exponent(f, z, cfg, cfg.tau())
}

/// [`rot_loss`] with an explicit row-update exponent in place of `cfg.tau()`.
///
/// Exists so the fixed-point diagnostics can be exercised against a solver
/// with a wrong exponent.
#[doc(hidden)]
pub fn solve_with_exponent(
    f: &PredictionMatrix,
    z: &SimplexVec,
    cfg: &RotConfig,
    tau: f64,
) -> Result<RotSolution> {
    f.check_dim(z)?;
    cfg.validate()?;
    warn_alpha_zero(cfg);
    let p = Problem::new(f, z, cfg, tau);
    let (log_a, log_b) = p.iterate(cfg.n_iter, None)?;
    finish(f, z, cfg, &p, log_a, log_b)
}

/// Max-norm residuals of the fixed-point equations at the final iterate,
/// in log domain: `(a-equation, b-equation)`.
pub fn sinkhorn_residual(
    sol: &RotSolution,
    f: &PredictionMatrix,
    z: &SimplexVec,
    cfg: &RotConfig,
) -> (f64, f64) {
    let p = Problem::new(f, z, cfg, cfg.tau());
    let diff = |x: f64, y: f64| if x == y { 0.0 } else { (x - y).abs() };
    let ra = (0..p.k())
        .map(|i| diff(sol.log_a[i], p.a_update(i, &sol.log_b)))
        .fold(0.0, f64::max);
    let rb = (0..p.n())
        .map(|j| diff(sol.log_b[j], p.b_update(j, &sol.log_a)))
        .fold(0.0, f64::max);
    (ra, rb)
}

/// Gradient of the ROT value with respect to `log F`, per `cfg.grad_mode`.
pub fn rot_loss_gradient(
    f: &PredictionMatrix,
    z: &SimplexVec,
    cfg: &RotConfig,
) -> Result<(RotSolution, DenseMatrix)> {
    f.check_dim(z)?;
    cfg.validate()?;
    warn_alpha_zero(cfg);
    let p = Problem::new(f, z, cfg, cfg.tau());
    match cfg.grad_mode {
        GradMode::Envelope => {
            let (log_a, log_b) = p.iterate(cfg.n_iter, None)?;
            let sol = finish(f, z, cfg, &p, log_a, log_b)?;
            let scale = -cfg.alpha / f.bag_size() as f64;
            let g = sol.plan.values().map(|u| scale * u);
            Ok((sol, g))
        }
        GradMode::Unrolled => {
            let mut history = Vec::with_capacity(cfg.n_iter);
            let (log_a, log_b) = p.iterate(cfg.n_iter, Some(&mut history))?;
            let sol = finish(f, z, cfg, &p, log_a, log_b)?;
            let g = unrolled_backward(f, z, cfg, &p, &sol, &history);
            Ok((sol, g))
        }
    }
}

/// Reverse sweep through the objective and every recorded iteration.
/// `log(n z)` is data and receives no gradient.
fn unrolled_backward(
    f: &PredictionMatrix,
    z: &SimplexVec,
    cfg: &RotConfig,
    p: &Problem,
    sol: &RotSolution,
    history: &[(Vec<f64>, Vec<f64>)],
) -> DenseMatrix {
    let (k, n) = (p.k(), p.n());
    let nf = n as f64;
    let alpha = cfg.alpha;
    let eps = cfg.epsilon;
    let lf = f.log_values();
    let log_u = &sol.log_plan;
    let u = sol.plan.values();

    let marg = plan_marginal(u);
    let log_ratio: Vec<f64> = marg
        .iter()
        .zip(z.values())
        .map(|(&pi, &zi)| if pi == 0.0 { 0.0 } else { (pi / zi).ln() })
        .collect();

    // Gradient with respect to log U (chain through U = exp(log U)), and the
    // explicit dependence of the transport term on log F.
    let mut g_f = DenseMatrix::zeros(k, n);
    let mut g_logk = DenseMatrix::zeros(k, n);
    let mut g_la = vec![0.0; k];
    let mut g_lb = vec![0.0; n];
    for i in 0..k {
        for j in 0..n {
            let uij = u.get(i, j);
            if uij == 0.0 {
                continue;
            }
            let mut du = 0.0;
            if alpha != 0.0 {
                du += alpha / nf * (-lf.get(i, j) + eps * log_u.get(i, j));
                g_f.set(i, j, -alpha / nf * uij);
            }
            if alpha != 1.0 {
                du += (1.0 - alpha) / nf * log_ratio[i];
            }
            let g = uij * du;
            g_logk.set(i, j, g);
            g_la[i] += g;
            g_lb[j] += g;
        }
    }

    let zeros_b = vec![0.0; n];
    for t in (0..history.len()).rev() {
        let (la, lb) = &history[t];
        // b_j = -LSE_i(log K_ij + a_i): weights are the column softmax.
        for j in 0..n {
            let gb = g_lb[j];
            if gb == 0.0 {
                continue;
            }
            for i in 0..k {
                let w = (p.log_k.get(i, j) + la[i] + lb[j]).exp();
                if w == 0.0 {
                    continue;
                }
                let v = g_logk.get(i, j) - gb * w;
                g_logk.set(i, j, v);
                g_la[i] -= gb * w;
            }
        }
        // a_i = tau (log n z_i - LSE_j(log K_ij + b_prev_j)).
        let lb_prev = if t == 0 { &zeros_b } else { &history[t - 1].1 };
        let mut g_lb_prev = vec![0.0; n];
        if p.tau != 0.0 {
            for i in 0..k {
                if p.log_nz[i] == f64::NEG_INFINITY || g_la[i] == 0.0 {
                    continue;
                }
                let gs = -p.tau * g_la[i];
                let s = p.row_lse(i, lb_prev);
                for j in 0..n {
                    let w = (p.log_k.get(i, j) + lb_prev[j] - s).exp();
                    if w == 0.0 {
                        continue;
                    }
                    let v = g_logk.get(i, j) + gs * w;
                    g_logk.set(i, j, v);
                    g_lb_prev[j] += gs * w;
                }
            }
        }
        g_la.iter_mut().for_each(|x| *x = 0.0);
        g_lb = g_lb_prev;
    }

    for (gf, gk) in g_f.data_mut().iter_mut().zip(g_logk.data()) {
        *gf += gk / eps;
    }
    g_f
}
