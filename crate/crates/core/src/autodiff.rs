//! Reverse-mode tape over column-batched MLP evaluation.
//!
//! A bag of `n` instances is evaluated as one `d x n` input matrix, so every
//! slot on the tape is a dense matrix with one column per instance. The tape
//! is rebuilt on every forward pass.

use crate::error::{LlpError, Result};
use crate::losses::{bag_loss_and_grad, LossKind, PredictionMatrix, RotConfig};
use crate::model::{Activation, ParamStore};
use crate::numerics::{logsumexp_iter, DenseMatrix, SimplexVec};

type Slot = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    /// `W x (+ b)` with the parameters of `layer`.
    Affine {
        layer: usize,
        input: Slot,
    },
    Activation {
        kind: Activation,
        input: Slot,
    },
    /// Column-wise log-softmax.
    LogSoftmax {
        input: Slot,
    },
    /// Scalar loss of a log-prediction matrix; `local_grad` is
    /// `d loss / d input`, captured during the forward pass.
    Loss {
        kind: LossKind,
        input: Slot,
        local_grad: DenseMatrix,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    output: Slot,
}

fn matmul(w: &DenseMatrix, x: &DenseMatrix) -> DenseMatrix {
    let (m, k, n) = (w.rows(), w.cols(), x.cols());
    debug_assert_eq!(k, x.rows());
    let mut out = DenseMatrix::zeros(m, n);
    let od = out.data_mut();
    for i in 0..m {
        let wr = w.row(i);
        let orow = &mut od[i * n..(i + 1) * n];
        for (p, &wip) in wr.iter().enumerate() {
            if wip == 0.0 {
                continue;
            }
            for (o, &xv) in orow.iter_mut().zip(x.row(p)) {
                *o += wip * xv;
            }
        }
    }
    out
}

fn affine(params: &ParamStore, layer: usize, x: &DenseMatrix) -> DenseMatrix {
    let l = &params.layers[layer];
    let mut out = matmul(&l.weight, x);
    if let Some(b) = &l.bias {
        let n = out.cols();
        for (i, &bi) in b.iter().enumerate() {
            for j in 0..n {
                let v = out.get(i, j) + bi;
                out.set(i, j, v);
            }
        }
    }
    out
}

fn log_softmax_columns(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for j in 0..x.cols() {
        let lse = logsumexp_iter((0..x.rows()).map(|i| x.get(i, j)));
        for i in 0..x.rows() {
            out.set(i, j, x.get(i, j) - lse);
        }
    }
    out
}

fn input_matrix(params: &ParamStore, xs: &[&[f64]]) -> Result<DenseMatrix> {
    if xs.is_empty() {
        return Err(LlpError::invalid("empty bag"));
    }
    let d = params.input_dim();
    if let Some(x) = xs.iter().find(|x| x.len() != d) {
        return Err(LlpError::DimensionMismatch {
            what: "input features",
            expected: d,
            found: x.len(),
        });
    }
    if xs.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(LlpError::NonFinite("input features"));
    }
    Ok(DenseMatrix::from_fn(d, xs.len(), |i, j| xs[j][i]))
}

/// Log-probabilities of one instance.
pub fn forward(params: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
    let (f, tape) = forward_bag(params, &[x])?;
    Ok((f.log_values().column(0), tape))
}

/// Per-instance log-probabilities stacked as columns.
pub fn forward_bag(params: &ParamStore, xs: &[&[f64]]) -> Result<(PredictionMatrix, Tape)> {
    let x = input_matrix(params, xs)?;
    let mut nodes = vec![Node {
        op: Op::Input,
        value: x,
    }];
    let last = params.layers.len() - 1;
    for layer in 0..params.layers.len() {
        let input = nodes.len() - 1;
        let z = affine(params, layer, &nodes[input].value);
        nodes.push(Node {
            op: Op::Affine { layer, input },
            value: z,
        });
        if layer < last {
            let input = nodes.len() - 1;
            let kind = params.activation;
            let y = nodes[input].value.map(|v| kind.apply(v));
            nodes.push(Node {
                op: Op::Activation { kind, input },
                value: y,
            });
        }
    }
    let input = nodes.len() - 1;
    let out = log_softmax_columns(&nodes[input].value);
    nodes.push(Node {
        op: Op::LogSoftmax { input },
        value: out.clone(),
    });
    let tape = Tape {
        output: nodes.len() - 1,
        nodes,
    };
    Ok((PredictionMatrix::new(out)?, tape))
}

impl Tape {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The log-prediction matrix recorded by the forward pass.
    pub fn output(&self) -> &DenseMatrix {
        &self.nodes[self.output].value
    }

    /// Appends a scalar loss on the prediction output and returns its value.
    pub fn push_loss(&mut self, kind: LossKind, z: &SimplexVec, rot: &RotConfig) -> Result<f64> {
        let f = PredictionMatrix::new(self.output().clone())?;
        let (value, local_grad) = bag_loss_and_grad(kind, &f, z, rot)?;
        self.nodes.push(Node {
            op: Op::Loss {
                kind,
                input: self.output,
                local_grad,
            },
            value: DenseMatrix::filled(1, 1, value),
        });
        Ok(value)
    }

    /// Loss value recorded by the terminal node.
    pub fn loss_value(&self) -> Option<f64> {
        match self.nodes.last() {
            Some(Node {
                op: Op::Loss { .. },
                value,
            }) => Some(value.get(0, 0)),
            _ => None,
        }
    }

    pub fn loss_kind(&self) -> Option<LossKind> {
        match self.nodes.last().map(|n| &n.op) {
            Some(Op::Loss { kind, .. }) => Some(*kind),
            _ => None,
        }
    }

    /// Recomputes every slot from the recorded input and `params`.
    pub fn replay(&self, params: &ParamStore) -> Vec<DenseMatrix> {
        let mut values: Vec<DenseMatrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input => node.value.clone(),
                Op::Affine { layer, input } => affine(params, *layer, &values[*input]),
                Op::Activation { kind, input } => values[*input].map(|v| kind.apply(v)),
                Op::LogSoftmax { input } => log_softmax_columns(&values[*input]),
                // The loss value depends only on its input, which replays
                // identically, so the recorded scalar is reused.
                Op::Loss { .. } => node.value.clone(),
            };
            values.push(v);
        }
        values
    }

    /// Reverse-mode accumulation from the terminal loss node, scaled by `seed`.
    pub fn backward(&self, params: &ParamStore, seed: f64) -> Result<ParamStore> {
        let last = self.nodes.len() - 1;
        match &self.nodes[last].op {
            Op::Loss { .. } => {}
            _ => return Err(LlpError::NotScalarTerminated),
        }
        self.reverse(params, last, DenseMatrix::filled(1, 1, seed))
    }

    /// Reverse-mode accumulation from an arbitrary slot gradient; `slot_grad`
    /// is `d loss / d (prediction output)`.
    pub fn backward_from_output(
        &self,
        params: &ParamStore,
        output_grad: DenseMatrix,
    ) -> Result<ParamStore> {
        let out = &self.nodes[self.output].value;
        if !out.same_shape(&output_grad) {
            return Err(LlpError::DimensionMismatch {
                what: "output gradient",
                expected: out.rows() * out.cols(),
                found: output_grad.rows() * output_grad.cols(),
            });
        }
        self.reverse(params, self.output, output_grad)
    }

    fn reverse(&self, params: &ParamStore, start: Slot, seed: DenseMatrix) -> Result<ParamStore> {
        let mut grads = params.zeros_like();
        let mut slot_grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        slot_grads[start] = Some(seed);
        for s in (0..=start).rev() {
            let Some(g) = slot_grads[s].take() else {
                continue;
            };
            let node = &self.nodes[s];
            match &node.op {
                Op::Input => {}
                Op::Loss {
                    input, local_grad, ..
                } => {
                    let seed = g.get(0, 0);
                    accumulate(&mut slot_grads[*input], local_grad.map(|v| seed * v));
                }
                Op::LogSoftmax { input } => {
                    let y = &node.value;
                    let mut gi = g.clone();
                    for j in 0..y.cols() {
                        let sum: f64 = (0..y.rows()).map(|i| g.get(i, j)).sum();
                        for i in 0..y.rows() {
                            gi.set(i, j, g.get(i, j) - y.get(i, j).exp() * sum);
                        }
                    }
                    accumulate(&mut slot_grads[*input], gi);
                }
                Op::Activation { kind, input } => {
                    let x = &self.nodes[*input].value;
                    let y = &node.value;
                    let gi = DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| {
                        g.get(i, j) * kind.derivative(x.get(i, j), y.get(i, j))
                    });
                    accumulate(&mut slot_grads[*input], gi);
                }
                Op::Affine { layer, input } => {
                    let x = &self.nodes[*input].value;
                    let l = &params.layers[*layer];
                    let gl = &mut grads.layers[*layer];
                    // dW = G X^T
                    for i in 0..l.d_out() {
                        for p in 0..l.d_in() {
                            let v: f64 = g.row(i).iter().zip(x.row(p)).map(|(a, b)| a * b).sum();
                            let cur = gl.weight.get(i, p);
                            gl.weight.set(i, p, cur + v);
                        }
                    }
                    if let Some(gb) = &mut gl.bias {
                        for (i, b) in gb.iter_mut().enumerate() {
                            *b += g.row(i).iter().sum::<f64>();
                        }
                    }
                    if !matches!(self.nodes[*input].op, Op::Input) {
                        accumulate(&mut slot_grads[*input], matmul(&l.weight.transpose(), &g));
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(slot: &mut Option<DenseMatrix>, g: DenseMatrix) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// One parameter's entry in a [`GradCheckReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    /// Index into [`ParamStore::to_flat`].
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| !e.flagged)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.flagged)
    }
}

/// Central step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

fn bag_loss_at(
    params: &ParamStore,
    xs: &[&[f64]],
    z: &SimplexVec,
    kind: LossKind,
    rot: &RotConfig,
) -> Result<f64> {
    let (_, mut tape) = forward_bag(params, xs)?;
    tape.push_loss(kind, z, rot)
}

/// Compares tape gradients against central differences on every parameter.
/// Entries whose absolute error exceeds `tolerance` are flagged.
pub fn grad_check(
    params: &ParamStore,
    xs: &[&[f64]],
    z: &SimplexVec,
    kind: LossKind,
    rot: &RotConfig,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, mut tape) = forward_bag(params, xs)?;
    tape.push_loss(kind, z, rot)?;
    let analytic = tape.backward(params, 1.0)?.to_flat();
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut entries = Vec::with_capacity(base.len());
    let h = GRAD_CHECK_STEP;
    for (idx, &a) in analytic.iter().enumerate() {
        let mut flat = base.clone();
        flat[idx] = base[idx] + h;
        probe.set_flat(&flat)?;
        let up = bag_loss_at(&probe, xs, z, kind, rot)?;
        flat[idx] = base[idx] - h;
        probe.set_flat(&flat)?;
        let dn = bag_loss_at(&probe, xs, z, kind, rot)?;
        let numeric = (up - dn) / (2.0 * h);
        let abs_error = (a - numeric).abs();
        let rel_error = abs_error / a.abs().max(numeric.abs()).max(1e-12);
        entries.push(GradCheckEntry {
            index: idx,
            analytic: a,
            numeric,
            abs_error,
            rel_error,
            flagged: abs_error > tolerance,
        });
    }
    Ok(GradCheckReport {
        max_abs_error: entries.iter().map(|e| e.abs_error).fold(0.0, f64::max),
        max_rel_error: entries.iter().map(|e| e.rel_error).fold(0.0, f64::max),
        tolerance,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{kl_loss, GradMode};
    use crate::model::{Layer, ModelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(hidden: Vec<usize>) -> ModelSpec {
        ModelSpec {
            input_dim: 5,
            hidden,
            num_classes: 3,
            activation: Activation::Tanh,
            hidden_bias: true,
        }
    }

    fn points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn zero_linear_model_is_uniform() {
        let mut p = ParamStore::init(
            &ModelSpec {
                hidden: vec![],
                ..spec(vec![])
            },
            0,
        )
        .unwrap();
        p.scale(0.0);
        let (out, _) = forward(&p, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        for v in out {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ParamStore::init(&spec(vec![4]), 2).unwrap();
        let xs = points(&mut rng, 4, 5);
        let (f, tape) = forward_bag(&p, &refs(&xs)).unwrap();
        for j in 0..4 {
            let s: f64 = f.log_values().column(j).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let (single, _) = forward(&p, &xs[2]).unwrap();
        assert_eq!(single, f.log_values().column(2));

        let perm = [2, 0, 3, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| xs[i].clone()).collect();
        let (g, _) = forward_bag(&p, &refs(&permuted)).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(g.log_values().column(j), f.log_values().column(i));
        }

        let replayed = tape.replay(&p);
        for (a, b) in replayed.iter().zip(&tape.nodes) {
            assert_eq!(a, &b.value);
        }
        let (f2, _) = forward_bag(&p, &refs(&xs)).unwrap();
        assert_eq!(f, f2);

        assert!(forward_bag(&p, &[]).is_err());
        assert!(forward(&p, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn backward_requires_loss() {
        let p = ParamStore::init(&spec(vec![]), 2).unwrap();
        let (_, tape) = forward(&p, &[0.0; 5]).unwrap();
        assert!(matches!(
            tape.backward(&p, 1.0),
            Err(LlpError::NotScalarTerminated)
        ));
    }

    #[test]
    fn linear_sum_gradient_is_input() {
        // d/dW of sum(W x + b) is x in every row.
        let p = ParamStore::init(&spec(vec![]), 5).unwrap();
        let x = [0.5, -1.0, 2.0, 0.25, 3.0];
        let (_, tape) = forward(&p, &x).unwrap();
        let pre_softmax = tape.nodes[1].value.clone();
        let g = tape.reverse(&p, 1, pre_softmax.map(|_| 1.0)).unwrap();
        for i in 0..3 {
            assert_eq!(g.layers[0].weight.row(i), &x);
        }
        assert_eq!(g.layers[0].bias.as_deref(), Some(&[1.0, 1.0, 1.0][..]));
    }

    #[test]
    fn backward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ParamStore::init(&spec(vec![4]), 2).unwrap();
        let xs = points(&mut rng, 3, 5);
        let (_, mut tape) = forward_bag(&p, &refs(&xs)).unwrap();
        let z = SimplexVec::new(vec![1.0 / 3.0, 2.0 / 3.0, 0.0]).unwrap();
        tape.push_loss(LossKind::Rot, &z, &RotConfig::default())
            .unwrap();
        let a = tape.backward(&p, 1.0).unwrap();
        let b = tape.backward(&p, 1.0).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
    }

    #[test]
    fn output_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ParamStore::init(
            &ModelSpec {
                activation: Activation::Relu,
                ..spec(vec![6])
            },
            4,
        )
        .unwrap();
        let x = points(&mut rng, 1, 5).remove(0);
        let base = p.to_flat();
        let h = 1e-5;
        for out_i in 0..3 {
            let (_, tape) = forward(&p, &x).unwrap();
            let mut seed = DenseMatrix::zeros(3, 1);
            seed.set(out_i, 0, 1.0);
            let g = tape.backward_from_output(&p, seed).unwrap().to_flat();
            let mut probe = p.clone();
            for idx in 0..base.len() {
                let mut flat = base.clone();
                flat[idx] += h;
                probe.set_flat(&flat).unwrap();
                let up = forward(&probe, &x).unwrap().0[out_i];
                flat[idx] -= 2.0 * h;
                probe.set_flat(&flat).unwrap();
                let dn = forward(&probe, &x).unwrap().0[out_i];
                let fd = (up - dn) / (2.0 * h);
                let scale = g[idx].abs().max(fd.abs()).max(1e-3);
                assert!(
                    (g[idx] - fd).abs() / scale < 1e-5,
                    "param {idx}: {} vs {fd}",
                    g[idx]
                );
            }
        }
    }

    #[test]
    fn kl_bag_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = ParamStore::init(&spec(vec![4]), 6).unwrap();
        let xs = points(&mut rng, 4, 5);
        let z = SimplexVec::new(vec![0.5, 0.25, 0.25]).unwrap();
        let rep = grad_check(
            &p,
            &refs(&xs),
            &z,
            LossKind::Kl,
            &RotConfig::default(),
            1e-6,
        )
        .unwrap();
        assert!(rep.passed(), "max abs {}", rep.max_abs_error);
        let (f, _) = forward_bag(&p, &refs(&xs)).unwrap();
        assert_eq!(
            bag_loss_at(&p, &refs(&xs), &z, LossKind::Kl, &RotConfig::default()).unwrap(),
            kl_loss(&f, &z).unwrap()
        );
    }

    #[test]
    fn grad_check_flags_unconverged_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = ParamStore::init(&spec(vec![4]), 7).unwrap();
        // Sharp predictions keep two Sinkhorn sweeps far from the fixed point.
        p.scale(4.0);
        let xs = points(&mut rng, 4, 5);
        let z = SimplexVec::new(vec![0.75, 0.25, 0.0]).unwrap();
        let unrolled = RotConfig::default();
        let rep = grad_check(&p, &refs(&xs), &z, LossKind::Rot, &unrolled, GRAD_CHECK_TOL).unwrap();
        assert!(rep.passed(), "max abs {}", rep.max_abs_error);
        let env = RotConfig {
            n_iter: 2,
            grad_mode: GradMode::Envelope,
            ..unrolled
        };
        let rep = grad_check(&p, &refs(&xs), &z, LossKind::Rot, &env, GRAD_CHECK_TOL).unwrap();
        assert!(!rep.passed(), "max abs {}", rep.max_abs_error);
        assert!(rep.flagged().count() > 0);
    }

    #[test]
    fn final_bias_shift_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = ParamStore::init(&spec(vec![4]), 8).unwrap();
        let xs = points(&mut rng, 4, 5);
        let z = SimplexVec::new(vec![0.5, 0.25, 0.25]).unwrap();
        let mut shifted = p.clone();
        let last: &mut Layer = shifted.layers.last_mut().unwrap();
        last.bias
            .as_mut()
            .unwrap()
            .iter_mut()
            .for_each(|b| *b += 3.7);
        for kind in LossKind::ALL {
            let a = bag_loss_at(&p, &refs(&xs), &z, kind, &RotConfig::default()).unwrap();
            let b = bag_loss_at(&shifted, &refs(&xs), &z, kind, &RotConfig::default()).unwrap();
            assert!((a - b).abs() < 1e-10, "{kind}: {a} vs {b}");
        }
    }
}
