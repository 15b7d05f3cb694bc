//! Dense matrices, simplex vectors and log-domain reductions.
//!
//! Probabilities travel as log-probabilities. `-inf` is the canonical zero
//! mass and `exp(-inf) = 0` inside every reduction.

use serde::{Deserialize, Serialize};

use crate::error::{LlpError, Result};

/// Tolerance on the sum of a [`SimplexVec`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LlpError::DimensionMismatch {
                what: "matrix data",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a `rows x columns.len()` matrix whose `j`-th column is `columns[j]`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if let Some(bad) = columns.iter().find(|c| c.len() != rows) {
            return Err(LlpError::DimensionMismatch {
                what: "column length",
                expected: rows,
                found: bad.len(),
            });
        }
        Ok(Self::from_fn(rows, cols, |i, j| columns[j][i]))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Largest absolute entrywise difference. Equal infinities count as zero.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| if a == b { 0.0 } else { (a - b).abs() })
            .fold(0.0, f64::max)
    }

    /// Checks the log-domain invariant: no NaN, no `+inf`.
    pub fn is_valid_log_domain(&self) -> bool {
        self.data.iter().all(|x| !x.is_nan() && *x != f64::INFINITY)
    }
}

/// A point of the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVec(Vec<f64>);

impl SimplexVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(LlpError::invalid("simplex vector must be nonempty"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LlpError::invalid(
                "simplex entries must be finite and nonnegative",
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(LlpError::invalid(format!(
                "simplex entries sum to {sum}, not 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn uniform(dim: usize) -> Self {
        Self(vec![1.0 / dim as f64; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// True when `n * z` is integral within `1e-9`.
    pub fn is_integral_for(&self, n: usize) -> bool {
        self.counts_for(n).is_some()
    }

    /// Class counts `n * z`, when they are all integral.
    pub fn counts_for(&self, n: usize) -> Option<Vec<usize>> {
        let mut counts = Vec::with_capacity(self.dim());
        for &z in &self.0 {
            let c = z * n as f64;
            let r = c.round();
            if (c - r).abs() > 1e-9 {
                return None;
            }
            counts.push(r as usize);
        }
        (counts.iter().sum::<usize>() == n).then_some(counts)
    }
}

impl TryFrom<Vec<f64>> for SimplexVec {
    type Error = LlpError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SimplexVec> for Vec<f64> {
    fn from(v: SimplexVec) -> Self {
        v.0
    }
}

/// One-hot encoding of a class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotVec {
    dim: usize,
    hot: usize,
}

impl OneHotVec {
    pub fn new(dim: usize, hot: usize) -> Result<Self> {
        if hot >= dim {
            return Err(LlpError::invalid(format!(
                "class {hot} out of range for {dim} classes"
            )));
        }
        Ok(Self { dim, hot })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hot_index(&self) -> usize {
        self.hot
    }

    pub fn to_simplex(&self) -> SimplexVec {
        let mut v = vec![0.0; self.dim];
        v[self.hot] = 1.0;
        SimplexVec(v)
    }
}

/// `log(sum(exp(v)))`, shifted by the maximum.
///
/// Returns `-inf` iff every entry is `-inf`.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(LlpError::EmptyReduction);
    }
    Ok(logsumexp_iter(v.iter().copied()))
}

/// Non-allocating `logsumexp` over an iterator; `-inf` for an empty iterator.
pub(crate) fn logsumexp_iter<I>(it: I) -> f64
where
    I: Iterator<Item = f64> + Clone,
{
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m.is_nan() || m == f64::INFINITY {
        return m;
    }
    let s: f64 = it.map(|x| (x - m).exp()).sum();
    m + s.ln()
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(LlpError::NonFinite("log_softmax input"));
    }
    let lse = logsumexp(logits)?;
    Ok(logits.iter().map(|x| x - lse).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn logsumexp_examples() {
        assert_abs_diff_eq!(logsumexp(&[0.0, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, 3.5]).unwrap(), 3.5);
        assert_eq!(
            logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
        // 1000 + ln 3, high-precision value 1001.0986122886681098...
        assert_abs_diff_eq!(
            logsumexp(&[1000.0; 3]).unwrap(),
            1_001.098_612_288_668,
            epsilon = 1e-12
        );
        assert!(matches!(logsumexp(&[]), Err(LlpError::EmptyReduction)));
    }

    #[test]
    fn log_softmax_examples() {
        let o = log_softmax(&[0.0, 0.0, 0.0]).unwrap();
        for x in o {
            assert_abs_diff_eq!(x, -(3f64.ln()), epsilon = 1e-15);
        }
        let c = -17.25;
        let o = log_softmax(&[c, c + 1.0]).unwrap();
        let l = (1.0 + 1f64.exp()).ln();
        assert_abs_diff_eq!(o[0], -l, epsilon = 1e-12);
        assert_abs_diff_eq!(o[1], 1.0 - l, epsilon = 1e-12);

        // ln(e^2 + 1 + e^-1) = 2.169846...
        let lse = (2f64.exp() + 1.0 + (-1f64).exp()).ln();
        let o = log_softmax(&[2.0, 0.0, -1.0]).unwrap();
        assert_abs_diff_eq!(o[0], 2.0 - lse, epsilon = 1e-14);
        assert_abs_diff_eq!(o[0], -0.16984, epsilon = 1e-5);
        assert_abs_diff_eq!(o[1], -2.16984, epsilon = 1e-5);
        assert_abs_diff_eq!(o[2], -3.16984, epsilon = 1e-5);

        assert!(log_softmax(&[0.0, f64::NAN]).is_err());
        assert!(log_softmax(&[0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn simplex_validation() {
        assert!(SimplexVec::new(vec![0.5, 0.5]).is_ok());
        assert!(SimplexVec::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexVec::new(vec![-0.1, 1.1]).is_err());
        assert!(SimplexVec::new(vec![]).is_err());
        let z = SimplexVec::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(z.counts_for(4), Some(vec![1, 3]));
        assert_eq!(z.counts_for(3), None);
        let e = OneHotVec::new(3, 2).unwrap().to_simplex();
        assert_eq!(e.values(), &[0.0, 0.0, 1.0]);
        assert!(OneHotVec::new(3, 3).is_err());
    }

    #[test]
    fn matrix_shapes() {
        let m =
            DenseMatrix::from_columns(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 3));
        assert_eq!(m.row(1), &[2.0, 4.0, 6.0]);
        assert_eq!(m.column(2), vec![5.0, 6.0]);
        assert_eq!(m.transpose().get(2, 1), 6.0);
        assert!(DenseMatrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn logsumexp_shift(v in prop::collection::vec(-300.0f64..300.0, 1..20), c in -300.0f64..300.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = logsumexp(&shifted).unwrap();
            let b = logsumexp(&v).unwrap() + c;
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }

        #[test]
        fn log_softmax_normalizes(v in prop::collection::vec(-700.0f64..700.0, 1..20)) {
            let o = log_softmax(&v).unwrap();
            let s: f64 = o.iter().map(|x| x.exp()).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn log_softmax_translation(v in prop::collection::vec(-100.0f64..100.0, 1..20), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = log_softmax(&v).unwrap();
            let b = log_softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
