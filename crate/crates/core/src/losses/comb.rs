//! Exact solvers for the combinatorial loss and its exact-marginal relaxation.
//!
//! These are brute-force oracles for small bags, plus the `O(n log n)`
//! sorting solver for two classes.

use crate::error::{LlpError, Result};
use crate::numerics::SimplexVec;

use super::{AssignmentVec, DivergenceKind, PredictionMatrix, TransportPlan};

/// Largest search space the enumeration oracles accept.
pub const ORACLE_BOUND: f64 = 1e7;

#[derive(Debug, Clone, PartialEq)]
pub struct CombSolution {
    pub value: f64,
    /// `None` when no assignment has finite loss (infeasible indicator constraint).
    pub assignment: Option<AssignmentVec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub value: f64,
    pub assignment: AssignmentVec,
    pub plan: TransportPlan,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LlpError::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `sum_j -log F[t_j, j]`, accumulated in column order.
fn nll_sum(f: &PredictionMatrix, t: &[usize]) -> f64 {
    let lv = f.log_values();
    t.iter().enumerate().map(|(j, &c)| -lv.get(c, j)).sum()
}

/// `alpha / n * nll + (1 - alpha) * d`.
///
/// A zero weight switches its term off even when the term is infinite, except
/// for the indicator divergence, which acts as a hard constraint at any alpha.
fn combine(alpha: f64, n: usize, nll: f64, d: DivergenceKind, div: f64) -> f64 {
    if d == DivergenceKind::Indicator && div.is_infinite() {
        return f64::INFINITY;
    }
    let fit = if alpha == 0.0 {
        0.0
    } else {
        alpha / n as f64 * nll
    };
    let prop = if alpha == 1.0 {
        0.0
    } else {
        (1.0 - alpha) * div
    };
    fit + prop
}

fn warn_infeasible(n: usize) {
    log::warn!(
        "indicator divergence with non-integral n * z (n = {n}): every assignment is infeasible"
    );
}

/// Minimizes `-(alpha/n) sum_j log F[t_j, j] + (1 - alpha) d(count(t)/n, z)`
/// over all `t` in `[0, K)^n` by enumeration. Ties go to the
/// lexicographically smallest `t`.
pub fn comb_loss_exact(
    f: &PredictionMatrix,
    z: &SimplexVec,
    alpha: f64,
    d: DivergenceKind,
) -> Result<CombSolution> {
    f.check_dim(z)?;
    check_alpha(alpha)?;
    let (k, n) = (f.num_classes(), f.bag_size());
    let size = (k as f64).powi(n as i32);
    if size > ORACLE_BOUND {
        return Err(LlpError::OracleBoundExceeded {
            size,
            bound: ORACLE_BOUND,
        });
    }
    if d == DivergenceKind::Indicator && !z.is_integral_for(n) {
        warn_infeasible(n);
        return Ok(CombSolution {
            value: f64::INFINITY,
            assignment: None,
        });
    }

    let mut t = vec![0usize; n];
    let mut counts = vec![0usize; k];
    counts[0] = n;
    let mut props = vec![0.0; k];
    let mut best = f64::INFINITY;
    let mut best_t: Option<Vec<usize>> = None;
    loop {
        for (p, &c) in props.iter_mut().zip(&counts) {
            *p = c as f64 / n as f64;
        }
        let v = combine(alpha, n, nll_sum(f, &t), d, d.eval(&props, z.values()));
        if v < best {
            best = v;
            best_t = Some(t.clone());
        }
        // Odometer, last position fastest: visits t in lexicographic order.
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok(CombSolution {
                    value: best,
                    assignment: best_t.map(AssignmentVec::new),
                });
            }
            pos -= 1;
            counts[t[pos]] -= 1;
            if t[pos] + 1 < k {
                t[pos] += 1;
                counts[t[pos]] += 1;
                break;
            }
            t[pos] = 0;
            counts[0] += 1;
        }
    }
}

/// Two-class solver: sort instances by decreasing class-1 log-odds, then for
/// each `m` in `0..=n` assign the top `m` to class 1. The likelihood term of
/// every split comes from prefix/suffix sums, so the scan is linear after the
/// sort.
pub fn comb_loss_binary(
    f: &PredictionMatrix,
    z: &SimplexVec,
    alpha: f64,
    d: DivergenceKind,
) -> Result<CombSolution> {
    f.check_dim(z)?;
    check_alpha(alpha)?;
    if f.num_classes() != 2 {
        return Err(LlpError::invalid(format!(
            "binary solver needs K = 2, got K = {}",
            f.num_classes()
        )));
    }
    let n = f.bag_size();
    if d == DivergenceKind::Indicator && !z.is_integral_for(n) {
        warn_infeasible(n);
        return Ok(CombSolution {
            value: f64::INFINITY,
            assignment: None,
        });
    }
    let lv = f.log_values();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let la = lv.get(1, a) - lv.get(0, a);
        let lb = lv.get(1, b) - lv.get(0, b);
        lb.total_cmp(&la).then(a.cmp(&b))
    });

    // prefix1[m]: cost of the top m as class 1; suffix0[m]: the rest as class 0.
    let mut prefix1 = vec![0.0; n + 1];
    for (r, &j) in order.iter().enumerate() {
        prefix1[r + 1] = prefix1[r] - lv.get(1, j);
    }
    let mut suffix0 = vec![0.0; n + 1];
    for r in (0..n).rev() {
        suffix0[r] = suffix0[r + 1] - lv.get(0, order[r]);
    }

    let mut best = f64::INFINITY;
    let mut best_m = None;
    for m in 0..=n {
        let props = [(n - m) as f64 / n as f64, m as f64 / n as f64];
        let v = combine(
            alpha,
            n,
            prefix1[m] + suffix0[m],
            d,
            d.eval(&props, z.values()),
        );
        if v < best {
            best = v;
            best_m = Some(m);
        }
    }
    let assignment = best_m.map(|m| {
        let mut t = vec![0; n];
        for &j in &order[..m] {
            t[j] = 1;
        }
        AssignmentVec::new(t)
    });
    Ok(CombSolution {
        value: best,
        assignment,
    })
}

/// `n! / prod(c_i!)` in floating point.
fn multinomial(counts: &[usize]) -> f64 {
    let mut acc = 1.0;
    let mut total = 0usize;
    for &c in counts {
        for r in 1..=c {
            total += 1;
            acc *= total as f64 / r as f64;
        }
    }
    acc
}

/// Minimizes `(1/n) trace(C^T U)` over plans with column sums 1 and row sums
/// `n z` by enumerating the 0/1 vertices of the transportation polytope.
pub fn relax_lp_loss_exact(f: &PredictionMatrix, z: &SimplexVec) -> Result<LpSolution> {
    f.check_dim(z)?;
    let (k, n) = (f.num_classes(), f.bag_size());
    let counts = z.counts_for(n).ok_or(LlpError::InfeasibleMarginals)?;
    let size = multinomial(&counts);
    if size > ORACLE_BOUND {
        return Err(LlpError::OracleBoundExceeded {
            size,
            bound: ORACLE_BOUND,
        });
    }

    struct Search<'a> {
        f: &'a PredictionMatrix,
        n: usize,
        remaining: Vec<usize>,
        t: Vec<usize>,
        best: f64,
        best_t: Option<Vec<usize>>,
    }

    impl Search<'_> {
        fn go(&mut self, pos: usize) {
            if pos == self.n {
                let v = 1.0 / self.n as f64 * nll_sum(self.f, &self.t);
                if v < self.best || self.best_t.is_none() {
                    self.best = v;
                    self.best_t = Some(self.t.clone());
                }
                return;
            }
            for c in 0..self.remaining.len() {
                if self.remaining[c] == 0 {
                    continue;
                }
                self.remaining[c] -= 1;
                self.t[pos] = c;
                self.go(pos + 1);
                self.remaining[c] += 1;
            }
        }
    }

    let mut s = Search {
        f,
        n,
        remaining: counts,
        t: vec![0; n],
        best: f64::INFINITY,
        best_t: None,
    };
    s.go(0);
    let t = AssignmentVec::new(s.best_t.expect("at least one feasible vertex"));
    Ok(LpSolution {
        value: s.best,
        plan: TransportPlan::from_assignment(k, &t),
        assignment: t,
    })
}
