//! Bag-level losses.
//!
//! Every loss compares a [`PredictionMatrix`] (per-instance class
//! log-probabilities, one column per instance) against the bag's proportion
//! vector `z`:
//!
//! - [`kl_loss`]: cross-entropy of `z` against the mean prediction.
//! - [`prop_loss`]: a divergence between `z` and the mean prediction.
//! - [`avg_instance_kl`]: mean over instances of the cross-entropy against `z`.
//! - [`comb_loss_exact`] / [`comb_loss_binary`]: the combinatorial label-guessing
//!   loss, by enumeration or (for two classes) by sorting.
//! - [`relax_lp_loss_exact`]: the transportation-polytope relaxation with exact
//!   marginals, solved by enumerating polytope vertices.
//! - [`rot_loss`]: the entropic, KL-relaxed transport loss computed with damped
//!   log-domain Sinkhorn iterations, plus its gradients.

mod bag;
mod comb;
mod rot;

pub use bag::{
    avg_instance_kl, avg_instance_kl_grad, kl_loss, kl_loss_grad, prop_loss, KL_MEAN_FLOOR,
};
pub use comb::{
    comb_loss_binary, comb_loss_exact, relax_lp_loss_exact, CombSolution, LpSolution, ORACLE_BOUND,
};
pub use rot::{
    rot_loss, rot_loss_gradient, sinkhorn_residual, solve_with_exponent, GradMode,
    MarginalDivergence, RotConfig, RotSolution,
};

use serde::{Deserialize, Serialize};

use crate::error::{LlpError, Result};
use crate::numerics::{log_softmax, logsumexp_iter, DenseMatrix, SimplexVec};

/// Losses the trainer can optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Kl,
    Rot,
    AvgKl,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Kl, LossKind::Rot, LossKind::AvgKl];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Kl => "kl",
            LossKind::Rot => "rot",
            LossKind::AvgKl => "avgkl",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = LlpError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(LossKind::Kl),
            "rot" => Ok(LossKind::Rot),
            "avgkl" | "avg-kl" | "avg_kl" => Ok(LossKind::AvgKl),
            other => Err(LlpError::invalid(format!("unknown loss `{other}`"))),
        }
    }
}

/// Value and `d loss / d log F` of a trainable bag loss.
pub fn bag_loss_and_grad(
    kind: LossKind,
    f: &PredictionMatrix,
    z: &SimplexVec,
    rot: &RotConfig,
) -> Result<(f64, DenseMatrix)> {
    match kind {
        LossKind::Kl => Ok((kl_loss(f, z)?, kl_loss_grad(f, z)?)),
        LossKind::AvgKl => Ok((avg_instance_kl(f, z)?, avg_instance_kl_grad(f, z)?)),
        LossKind::Rot => {
            let (sol, g) = rot_loss_gradient(f, z, rot)?;
            Ok((sol.value, g))
        }
    }
}

/// Value only.
pub fn bag_loss(
    kind: LossKind,
    f: &PredictionMatrix,
    z: &SimplexVec,
    rot: &RotConfig,
) -> Result<f64> {
    match kind {
        LossKind::Kl => kl_loss(f, z),
        LossKind::AvgKl => avg_instance_kl(f, z),
        LossKind::Rot => Ok(rot_loss(f, z, rot)?.value),
    }
}

/// Column tolerance for log-normalization of a [`PredictionMatrix`].
pub const PREDICTION_TOL: f64 = 1e-9;

/// `K x n` matrix of per-instance class log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    log_values: DenseMatrix,
}

impl PredictionMatrix {
    pub fn new(log_values: DenseMatrix) -> Result<Self> {
        if log_values.rows() == 0 || log_values.cols() == 0 {
            return Err(LlpError::invalid("prediction matrix must be nonempty"));
        }
        if !log_values.is_valid_log_domain() {
            return Err(LlpError::NonFinite("prediction matrix"));
        }
        for j in 0..log_values.cols() {
            let lse = logsumexp_iter((0..log_values.rows()).map(|i| log_values.get(i, j)));
            if (lse).abs() > PREDICTION_TOL {
                return Err(LlpError::invalid(format!(
                    "prediction column {j} is not normalized (log-sum {lse})"
                )));
            }
        }
        Ok(Self { log_values })
    }

    /// From linear-domain probability columns.
    pub fn from_prob_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let m = DenseMatrix::from_columns(columns)?;
        Self::new(m.map(f64::ln))
    }

    /// Applies `log_softmax` to each logit column.
    pub fn from_logit_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns
            .iter()
            .map(|c| log_softmax(c))
            .collect::<Result<Vec<_>>>()?;
        Self::new(DenseMatrix::from_columns(&cols)?)
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.log_values.rows()
    }

    #[inline]
    pub fn bag_size(&self) -> usize {
        self.log_values.cols()
    }

    #[inline]
    pub fn log_values(&self) -> &DenseMatrix {
        &self.log_values
    }

    /// Linear-domain probabilities.
    pub fn probs(&self) -> DenseMatrix {
        self.log_values.map(f64::exp)
    }

    /// `log(F 1_n / n)`, computed without leaving the log domain.
    pub fn log_mean(&self) -> Vec<f64> {
        let n = self.bag_size() as f64;
        (0..self.num_classes())
            .map(|i| logsumexp_iter(self.log_values.row(i).iter().copied()) - n.ln())
            .collect()
    }

    pub(crate) fn check_dim(&self, z: &SimplexVec) -> Result<()> {
        if z.dim() != self.num_classes() {
            return Err(LlpError::DimensionMismatch {
                what: "proportion vector",
                expected: self.num_classes(),
                found: z.dim(),
            });
        }
        Ok(())
    }
}

/// `K x n` soft assignment of instances to classes; columns lie on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    values: DenseMatrix,
}

impl TransportPlan {
    pub const COLUMN_TOL: f64 = 1e-6;

    pub fn new(values: DenseMatrix) -> Result<Self> {
        for &x in values.data() {
            if !(0.0..=1.0 + 1e-9).contains(&x) {
                return Err(LlpError::invalid(format!("plan entry {x} outside [0, 1]")));
            }
        }
        for j in 0..values.cols() {
            let s: f64 = (0..values.rows()).map(|i| values.get(i, j)).sum();
            if (s - 1.0).abs() > Self::COLUMN_TOL {
                return Err(LlpError::invalid(format!("plan column {j} sums to {s}")));
            }
        }
        Ok(Self { values })
    }

    /// The 0/1 plan of a hard assignment.
    pub fn from_assignment(k: usize, t: &AssignmentVec) -> Self {
        let n = t.len();
        Self {
            values: DenseMatrix::from_fn(k, n, |i, j| if t.classes()[j] == i { 1.0 } else { 0.0 }),
        }
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.values.rows())
            .map(|i| self.values.row(i).iter().sum())
            .collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.values.cols())
            .map(|j| (0..self.values.rows()).map(|i| self.values.get(i, j)).sum())
            .collect()
    }

    /// Per-column argmax, lowest index on ties.
    pub fn column_argmax(&self) -> Vec<usize> {
        (0..self.values.cols())
            .map(|j| argmax((0..self.values.rows()).map(|i| self.values.get(i, j))))
            .collect()
    }

    pub fn is_binary(&self) -> bool {
        self.values.data().iter().all(|&x| x == 0.0 || x == 1.0)
    }
}

pub(crate) fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in it.enumerate() {
        if v > best_v || i == 0 {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Hard label guesses, one class per instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AssignmentVec(Vec<usize>);

impl AssignmentVec {
    pub fn new(classes: Vec<usize>) -> Self {
        Self(classes)
    }

    pub fn classes(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `count(t) / n` as a vector of length `k`.
    pub fn proportions(&self, k: usize) -> Vec<f64> {
        let mut p = vec![0.0; k];
        for &c in &self.0 {
            p[c] += 1.0;
        }
        let n = self.0.len() as f64;
        p.iter_mut().for_each(|x| *x /= n);
        p
    }
}

/// Divergences between a guessed and a target distribution.
///
/// `L2` is the squared Euclidean distance. `Kl` is the generalized KL
/// `sum a log(a/b) - a + b`, with `0 log 0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Indicator,
    L1,
    L2,
    Kl,
}

/// Entries closer than this count as equal for [`DivergenceKind::Indicator`].
pub const INDICATOR_TOL: f64 = 1e-12;

impl DivergenceKind {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let pairs = a.iter().zip(b);
        match self {
            DivergenceKind::Indicator => {
                if pairs
                    .into_iter()
                    .all(|(x, y)| (x - y).abs() <= INDICATOR_TOL)
                {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            DivergenceKind::L1 => pairs.map(|(x, y)| (x - y).abs()).sum(),
            DivergenceKind::L2 => pairs.map(|(x, y)| (x - y) * (x - y)).sum(),
            DivergenceKind::Kl => generalized_kl(a, b),
        }
    }
}

/// `sum_i a_i log(a_i / b_i) - a_i + b_i` over nonnegative vectors.
pub fn generalized_kl(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == 0.0 {
                y
            } else if y == 0.0 {
                f64::INFINITY
            } else {
                x * (x / y).ln() - x + y
            }
        })
        .sum()
}
