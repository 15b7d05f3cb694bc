use crate::error::{LlpError, Result};
use crate::numerics::{logsumexp_iter, DenseMatrix, SimplexVec};

use super::{DivergenceKind, PredictionMatrix};

/// Floor applied to the mean prediction before the log in [`kl_loss`].
pub const KL_MEAN_FLOOR: f64 = 1e-30;

/// Cross-entropy `-sum_i z_i log (F 1_n / n)_i`. Classes with `z_i = 0` are skipped.
pub fn kl_loss(f: &PredictionMatrix, z: &SimplexVec) -> Result<f64> {
    f.check_dim(z)?;
    let floor = KL_MEAN_FLOOR.ln();
    Ok(f.log_mean()
        .iter()
        .zip(z.values())
        .filter(|(_, &zi)| zi > 0.0)
        .map(|(&lm, &zi)| -zi * lm.max(floor))
        .sum())
}

/// Gradient of [`kl_loss`] with respect to the log-prediction matrix.
pub fn kl_loss_grad(f: &PredictionMatrix, z: &SimplexVec) -> Result<DenseMatrix> {
    f.check_dim(z)?;
    let lv = f.log_values();
    let (k, n) = (lv.rows(), lv.cols());
    let floor = KL_MEAN_FLOOR.ln();
    let mut g = DenseMatrix::zeros(k, n);
    for i in 0..k {
        let zi = z.values()[i];
        if zi == 0.0 {
            continue;
        }
        let lse = logsumexp_iter(lv.row(i).iter().copied());
        if lse - (n as f64).ln() < floor {
            continue;
        }
        for j in 0..n {
            g.set(i, j, -zi * (lv.get(i, j) - lse).exp());
        }
    }
    Ok(g)
}

/// `d(z, F 1_n / n)`.
///
/// With [`DivergenceKind::Kl`] this is the generalized KL of `z` against the
/// mean prediction, i.e. [`kl_loss`] minus the entropy of `z`.
pub fn prop_loss(f: &PredictionMatrix, z: &SimplexVec, d: DivergenceKind) -> Result<f64> {
    f.check_dim(z)?;
    if d == DivergenceKind::Indicator {
        return Err(LlpError::invalid(
            "indicator divergence is not usable as a proportion loss",
        ));
    }
    let mean: Vec<f64> = f.log_mean().into_iter().map(f64::exp).collect();
    Ok(d.eval(z.values(), &mean))
}

/// Mean over instances of the cross-entropy of each prediction against `z`.
pub fn avg_instance_kl(f: &PredictionMatrix, z: &SimplexVec) -> Result<f64> {
    f.check_dim(z)?;
    let lv = f.log_values();
    let n = lv.cols();
    let mut total = 0.0;
    for j in 0..n {
        let ce: f64 = (0..lv.rows())
            .filter(|&i| z.values()[i] > 0.0)
            .map(|i| -z.values()[i] * lv.get(i, j))
            .sum();
        total += ce;
    }
    Ok(total / n as f64)
}

pub fn avg_instance_kl_grad(f: &PredictionMatrix, z: &SimplexVec) -> Result<DenseMatrix> {
    f.check_dim(z)?;
    let n = f.bag_size() as f64;
    Ok(DenseMatrix::from_fn(
        f.num_classes(),
        f.bag_size(),
        |i, _| -z.values()[i] / n,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pm(cols: &[Vec<f64>]) -> PredictionMatrix {
        PredictionMatrix::from_prob_columns(cols).unwrap()
    }

    fn simplex(v: &[f64]) -> SimplexVec {
        SimplexVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn kl_loss_examples() {
        let f = pm(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_abs_diff_eq!(
            kl_loss(&f, &simplex(&[0.5, 0.5])).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );

        let f = pm(&[vec![0.9, 0.1]]);
        assert_abs_diff_eq!(
            kl_loss(&f, &simplex(&[1.0, 0.0])).unwrap(),
            -(0.9f64.ln()),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            kl_loss(&f, &simplex(&[1.0, 0.0])).unwrap(),
            0.105361,
            epsilon = 1e-6
        );

        let f = pm(&[vec![0.5, 0.3, 0.2], vec![0.1, 0.6, 0.3]]);
        let z = SimplexVec::uniform(3);
        let expected = -(0.3f64.ln() + 0.45f64.ln() + 0.25f64.ln()) / 3.0;
        assert_abs_diff_eq!(kl_loss(&f, &z).unwrap(), expected, epsilon = 1e-14);
        assert_abs_diff_eq!(expected, 1.129592, epsilon = 1e-6);

        assert!(kl_loss(&f, &simplex(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn kl_loss_floors_zero_mean() {
        let f = pm(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let v = kl_loss(&f, &simplex(&[0.5, 0.5])).unwrap();
        assert_abs_diff_eq!(v, -0.5 * KL_MEAN_FLOOR.ln(), epsilon = 1e-12);
        let g = kl_loss_grad(&f, &simplex(&[0.5, 0.5])).unwrap();
        assert!(g.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn prop_loss_examples() {
        let f = pm(&[vec![0.2, 0.8], vec![0.4, 0.6]]);
        let z = simplex(&[0.3, 0.7]);
        assert_abs_diff_eq!(
            prop_loss(&f, &z, DivergenceKind::L1).unwrap(),
            0.0,
            epsilon = 1e-15
        );

        let f = pm(&[vec![0.5, 0.5]]);
        assert_abs_diff_eq!(
            prop_loss(&f, &simplex(&[1.0, 0.0]), DivergenceKind::L2).unwrap(),
            0.5,
            epsilon = 1e-15
        );

        let f = pm(&[vec![0.0, 1.0], vec![0.5, 0.5]]);
        let z = simplex(&[0.5, 0.5]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert_abs_diff_eq!(
            prop_loss(&f, &z, DivergenceKind::Kl).unwrap(),
            expected,
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(expected, 0.143841, epsilon = 1e-6);

        assert!(prop_loss(&f, &z, DivergenceKind::Indicator).is_err());
    }

    #[test]
    fn prop_kl_is_kl_loss_minus_entropy() {
        let f = pm(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]]);
        let z = simplex(&[0.5, 0.25, 0.25]);
        let entropy: f64 = z.values().iter().map(|x| -x * x.ln()).sum();
        let a = prop_loss(&f, &z, DivergenceKind::Kl).unwrap();
        let b = kl_loss(&f, &z).unwrap() - entropy;
        assert_abs_diff_eq!(a, b, epsilon = 1e-14);
    }

    #[test]
    fn avg_instance_kl_examples() {
        let f = pm(&[vec![0.3, 0.7]]);
        let z = simplex(&[0.4, 0.6]);
        assert_eq!(avg_instance_kl(&f, &z).unwrap(), kl_loss(&f, &z).unwrap());

        let f = pm(&[vec![0.3, 0.7], vec![0.3, 0.7], vec![0.3, 0.7]]);
        assert_abs_diff_eq!(
            avg_instance_kl(&f, &z).unwrap(),
            kl_loss(&f, &z).unwrap(),
            epsilon = 1e-15
        );

        let f = pm(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        let z = simplex(&[0.5, 0.5]);
        let avg = -0.25 * (0.9f64.ln() + 0.1f64.ln() + 0.2f64.ln() + 0.8f64.ln());
        let kl = -0.5 * (0.55f64.ln() + 0.45f64.ln());
        assert_abs_diff_eq!(avg_instance_kl(&f, &z).unwrap(), avg, epsilon = 1e-14);
        assert_abs_diff_eq!(kl_loss(&f, &z).unwrap(), kl, epsilon = 1e-14);
        assert_abs_diff_eq!(avg, 1.060132, epsilon = 1e-6);
        assert_abs_diff_eq!(kl, 0.698172, epsilon = 1e-6);
        assert!(kl < avg);
    }

    fn arb_instance() -> impl Strategy<Value = (PredictionMatrix, SimplexVec)> {
        (1usize..5, 1usize..7).prop_flat_map(|(k, n)| {
            (
                prop::collection::vec(prop::collection::vec(-6.0f64..6.0, k + 1), n),
                prop::collection::vec(0.0f64..1.0, k + 1),
            )
                .prop_map(|(logits, w)| {
                    let f = PredictionMatrix::from_logit_columns(&logits).unwrap();
                    let s: f64 = w.iter().sum::<f64>() + 1e-3;
                    let mut z: Vec<f64> =
                        w.iter().map(|x| (x + 1e-3 / w.len() as f64) / s).collect();
                    let t: f64 = z.iter().sum();
                    z.iter_mut().for_each(|x| *x /= t);
                    (f, SimplexVec::new(z).unwrap())
                })
        })
    }

    fn fd_check(
        f: &PredictionMatrix,
        z: &SimplexVec,
        loss: fn(&PredictionMatrix, &SimplexVec) -> Result<f64>,
        g: &DenseMatrix,
    ) {
        // Raw log-entries are perturbed without renormalization; the formulas
        // are defined for any log matrix.
        let h = 1e-6;
        let lv = f.log_values();
        for i in 0..lv.rows() {
            for j in 0..lv.cols() {
                let mut p = lv.clone();
                p.set(i, j, lv.get(i, j) + h);
                let mut m = lv.clone();
                m.set(i, j, lv.get(i, j) - h);
                let up = loss(&PredictionMatrix { log_values: p }, z).unwrap();
                let dn = loss(&PredictionMatrix { log_values: m }, z).unwrap();
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (fd - g.get(i, j)).abs() < 1e-6,
                    "fd {fd} vs {}",
                    g.get(i, j)
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = PredictionMatrix::from_logit_columns(&[vec![0.3, -1.0, 2.0], vec![1.5, 0.2, -0.7]])
            .unwrap();
        let z = simplex(&[0.5, 0.0, 0.5]);
        fd_check(&f, &z, kl_loss, &kl_loss_grad(&f, &z).unwrap());
        fd_check(
            &f,
            &z,
            avg_instance_kl,
            &avg_instance_kl_grad(&f, &z).unwrap(),
        );
    }

    proptest! {
        #[test]
        fn jensen_kl_below_avg((f, z) in arb_instance()) {
            let kl = kl_loss(&f, &z).unwrap();
            let avg = avg_instance_kl(&f, &z).unwrap();
            prop_assert!(kl <= avg + 1e-12);
        }
    }
}
