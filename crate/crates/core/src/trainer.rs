//! Empirical-risk minimization over bags with SGD and momentum.

use std::borrow::Cow;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::forward_bag;
use crate::bags::BagDataset;
use crate::dataset::LabeledDataset;
use crate::error::{LlpError, Result};
use crate::losses::{LossKind, RotConfig};
use crate::model::{ModelSpec, ParamStore};
use crate::numerics::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub rot: RotConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epoch from which the learning rate is divided by 10; `None` means
    /// `epochs / 2`.
    pub lr_drop_epoch: Option<usize>,
    pub bags_per_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Kl,
            rot: RotConfig::default(),
            learning_rate: 0.03,
            momentum: 0.9,
            weight_decay: 0.005,
            epochs: 100,
            lr_drop_epoch: None,
            bags_per_batch: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_drop_epoch(&self) -> usize {
        self.lr_drop_epoch.unwrap_or(self.epochs / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LlpError::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LlpError::invalid(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(LlpError::invalid(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.bags_per_batch == 0 {
            return Err(LlpError::invalid("bags_per_batch must be at least 1"));
        }
        if self.lr_drop_epoch() > self.epochs {
            return Err(LlpError::invalid(format!(
                "lr_drop_epoch {} exceeds epochs {}",
                self.lr_drop_epoch(),
                self.epochs
            )));
        }
        if self.loss_kind == LossKind::Rot {
            self.rot.validate()?;
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch() {
            self.learning_rate / 10.0
        } else {
            self.learning_rate
        }
    }
}

/// Momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub velocity: ParamStore,
}

impl OptState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            velocity: params.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `NaN` when no evaluation set was supplied.
    pub test_accuracy: f64,
    pub seconds: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }
}

/// Per-instance transformation applied in the batch path before the forward
/// pass.
pub trait Augmentation: Sync {
    fn apply<'a>(&self, x: &'a [f64]) -> Cow<'a, [f64]>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoAugmentation;

impl Augmentation for NoAugmentation {
    fn apply<'a>(&self, x: &'a [f64]) -> Cow<'a, [f64]> {
        Cow::Borrowed(x)
    }
}

/// Optional side outputs and evaluation for [`train_with`].
pub struct TrainOptions<'a> {
    pub eval_set: Option<&'a LabeledDataset>,
    /// Streams `epoch,train_loss,test_accuracy,seconds`, flushed per epoch.
    pub history_csv: Option<PathBuf>,
    /// Final checkpoint path; with `checkpoint_every = Some(k)` a copy is
    /// also written every `k` epochs as `<path>.epoch<e>`.
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
    /// Write 0 instead of wall time so repeated runs produce identical files.
    pub zero_timing: bool,
    pub augmentation: &'a dyn Augmentation,
    pub initial_params: Option<ParamStore>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            eval_set: None,
            history_csv: None,
            checkpoint: None,
            checkpoint_every: None,
            zero_timing: false,
            augmentation: &NoAugmentation,
            initial_params: None,
        }
    }
}

fn bag_risk(
    params: &ParamStore,
    ds: &BagDataset,
    bag: usize,
    cfg: &TrainConfig,
    aug: &dyn Augmentation,
) -> Result<(f64, ParamStore)> {
    let raw = ds.bag_features(bag);
    let owned: Vec<Cow<[f64]>> = raw.iter().map(|x| aug.apply(x)).collect();
    let xs: Vec<&[f64]> = owned.iter().map(|c| c.as_ref()).collect();
    let (_, mut tape) = forward_bag(params, &xs)?;
    let z = &ds.bags()[bag].proportions;
    let value = tape.push_loss(cfg.loss_kind, z, &cfg.rot)?;
    let grads = tape.backward(params, 1.0)?;
    Ok((value, grads))
}

/// Mean loss over `batch` (indices into `ds`) and the matching mean gradient.
/// Per-bag terms may be computed in parallel; the reduction runs in batch order.
pub fn empirical_risk(
    params: &ParamStore,
    ds: &BagDataset,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, ParamStore)> {
    empirical_risk_with(params, ds, batch, cfg, &NoAugmentation)
}

fn empirical_risk_with(
    params: &ParamStore,
    ds: &BagDataset,
    batch: &[usize],
    cfg: &TrainConfig,
    aug: &dyn Augmentation,
) -> Result<(f64, ParamStore)> {
    if batch.is_empty() {
        return Err(LlpError::invalid("empty batch"));
    }
    if let Some(&b) = batch.iter().find(|&&b| b >= ds.len()) {
        return Err(LlpError::invalid(format!("bag index {b} out of range")));
    }
    let terms: Vec<Result<(f64, ParamStore)>> = if batch.len() == 1 {
        vec![bag_risk(params, ds, batch[0], cfg, aug)]
    } else {
        batch
            .par_iter()
            .map(|&b| bag_risk(params, ds, b, cfg, aug))
            .collect()
    };
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for (&b, term) in batch.iter().zip(terms) {
        let (v, g) = term.map_err(|e| e.in_bag(b))?;
        total += v;
        grads.add_scaled(&g, 1.0);
    }
    let m = batch.len() as f64;
    if batch.len() > 1 {
        grads.scale(1.0 / m);
    }
    Ok((total / m, grads))
}

/// `v <- momentum v + (g + weight_decay theta)`, `theta <- theta - lr v`.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut OptState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.velocity) {
        return Err(LlpError::invalid(
            "sgd_step: parameter, gradient and velocity shapes differ",
        ));
    }
    // Two passes over matching entries: first the velocity, then the step.
    let mut decayed = grads.clone();
    decayed.add_scaled(params, weight_decay);
    state
        .velocity
        .zip_apply(&decayed, |v, d| *v = momentum * *v + d);
    params.add_scaled(&state.velocity, -lr);
    Ok(())
}

/// Bag visiting order for `epoch`.
pub fn epoch_order(num_bags: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_bags).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
}

pub fn train(
    ds: &BagDataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<(ParamStore, TrainHistory)> {
    train_with(ds, spec, cfg, TrainOptions::default())
}

pub fn train_with(
    ds: &BagDataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<(ParamStore, TrainHistory)> {
    cfg.validate()?;
    if spec.input_dim != ds.source().dim() || spec.num_classes != ds.num_classes() {
        return Err(LlpError::invalid(format!(
            "model expects {} features / {} classes, bags have {} / {}",
            spec.input_dim,
            spec.num_classes,
            ds.source().dim(),
            ds.num_classes()
        )));
    }
    if ds.is_empty() {
        return Err(LlpError::invalid("no bags to train on"));
    }
    let mut params = match opts.initial_params {
        Some(p) => p,
        None => ParamStore::init(spec, cfg.seed)?,
    };
    let mut state = OptState::new(&params);
    let mut history = TrainHistory::default();
    let mut csv = match &opts.history_csv {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            writeln!(w, "epoch,train_loss,test_accuracy,seconds")?;
            w.flush()?;
            Some(w)
        }
        None => None,
    };
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = epoch_order(ds.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, batch) in order.chunks(cfg.bags_per_batch).enumerate() {
            let (loss, grads) = empirical_risk_with(&params, ds, batch, cfg, opts.augmentation)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(LlpError::NonFiniteLoss { epoch, batch: bi });
            }
            sgd_step(
                &mut params,
                &grads,
                &mut state,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            loss_sum += loss;
            batches += 1;
        }
        let test_accuracy = match opts.eval_set {
            Some(eval) => evaluate(&params, eval)?.accuracy,
            None => f64::NAN,
        };
        let seconds = if opts.zero_timing {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            test_accuracy,
            seconds,
            learning_rate: lr,
        };
        log::debug!(
            "epoch {epoch}: loss {:.6} acc {:.4} lr {lr}",
            rec.train_loss,
            rec.test_accuracy
        );
        if let Some(w) = csv.as_mut() {
            writeln!(
                w,
                "{},{},{},{}",
                rec.epoch, rec.train_loss, rec.test_accuracy, rec.seconds
            )?;
            w.flush()?;
        }
        history.records.push(rec);
        if let (Some(path), Some(k)) = (&opts.checkpoint, opts.checkpoint_every) {
            if k > 0 && (epoch + 1) % k == 0 {
                let mut p = path.clone().into_os_string();
                p.push(format!(".epoch{}", epoch + 1));
                params.write_checkpoint(PathBuf::from(p))?;
            }
        }
    }
    if let Some(path) = &opts.checkpoint {
        params.write_checkpoint(path)?;
    }
    Ok((params, history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

const EVAL_CHUNK: usize = 256;

/// Predicted class of each column of a log-probability matrix; ties go to
/// the lowest class index.
pub fn predict_columns(logp: &DenseMatrix) -> Vec<usize> {
    (0..logp.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..logp.rows() {
                if logp.get(i, j) > logp.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn predict(params: &ParamStore, ds: &LabeledDataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.features().chunks(EVAL_CHUNK) {
        let xs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
        let (f, _) = forward_bag(params, &xs)?;
        out.extend(predict_columns(f.log_values()));
    }
    Ok(out)
}

pub fn evaluate(params: &ParamStore, ds: &LabeledDataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(LlpError::invalid("cannot evaluate on an empty dataset"));
    }
    if params.num_classes() != ds.num_classes() {
        return Err(LlpError::DimensionMismatch {
            what: "number of classes",
            expected: params.num_classes(),
            found: ds.num_classes(),
        });
    }
    let predictions = predict(params, ds)?;
    let k = ds.num_classes();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    for (&y, &p) in ds.labels().iter().zip(&predictions) {
        confusion[y][p] += 1;
        correct += usize::from(y == p);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / ds.len() as f64,
        confusion,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bags::make_bags;
    use crate::dataset::{gen_blobs, BlobSpec};
    use crate::model::{Activation, Layer};
    use std::sync::Arc;

    fn scalar_store(theta: f64) -> ParamStore {
        ParamStore {
            layers: vec![Layer {
                weight: DenseMatrix::filled(1, 1, theta),
                bias: None,
            }],
            activation: Activation::Relu,
        }
    }

    #[test]
    fn sgd_step_examples() {
        let mut p = scalar_store(1.0);
        let g = scalar_store(1.0);
        let mut st = OptState::new(&p);
        sgd_step(&mut p, &g, &mut st, 0.1, 0.9, 0.005).unwrap();
        assert_eq!(st.velocity.to_flat(), vec![1.005]);
        assert!((p.to_flat()[0] - 0.8995).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut st, 0.1, 0.9, 0.005).unwrap();
        // Independent arithmetic: v = 0.9 * 1.005 + (1 + 0.005 * 0.8995).
        let v2 = 0.9 * 1.005 + (1.0 + 0.005 * 0.8995);
        assert_eq!(st.velocity.to_flat()[0], v2);
        assert!((v2 - 1.9089975).abs() < 1e-12);
        assert_eq!(p.to_flat()[0], 0.8995 - 0.1 * v2);

        let mut p = scalar_store(2.0);
        let mut st = OptState::new(&p);
        sgd_step(&mut p, &scalar_store(0.0), &mut st, 1.0, 0.0, 0.005).unwrap();
        assert!((p.to_flat()[0] - 1.99).abs() < 1e-15);

        let mut p = scalar_store(3.0);
        let mut st = OptState::new(&p);
        sgd_step(&mut p, &scalar_store(0.5), &mut st, 0.2, 0.0, 0.0).unwrap();
        assert_eq!(p.to_flat()[0], 3.0 - 0.2 * 0.5);
    }

    #[test]
    fn sgd_step_shape_mismatch() {
        let spec = ModelSpec {
            input_dim: 2,
            hidden: vec![],
            num_classes: 2,
            activation: Activation::Relu,
            hidden_bias: false,
        };
        let mut p = ParamStore::init(&spec, 0).unwrap();
        let mut st = OptState::new(&p);
        assert!(sgd_step(&mut p, &scalar_store(1.0), &mut st, 0.1, 0.0, 0.0).is_err());
    }

    fn toy() -> (Arc<LabeledDataset>, ModelSpec) {
        let ds = gen_blobs(&BlobSpec {
            num_classes: 3,
            per_class: 20,
            dim: 4,
            spread: 0.5,
            center_scale: 2.0,
            seed: 1,
        })
        .unwrap();
        let spec = ModelSpec {
            input_dim: 4,
            hidden: vec![8],
            num_classes: 3,
            activation: Activation::Relu,
            hidden_bias: false,
        };
        (Arc::new(ds), spec)
    }

    #[test]
    fn empirical_risk_averaging() {
        let (ds, spec) = toy();
        let bags = make_bags(ds, 4, 3).unwrap();
        let p = ParamStore::init(&spec, 0).unwrap();
        for kind in LossKind::ALL {
            let cfg = TrainConfig {
                loss_kind: kind,
                ..TrainConfig::default()
            };
            let (one, g1) = empirical_risk(&p, &bags, &[2], &cfg).unwrap();
            let (f, mut tape) = forward_bag(&p, &bags.bag_features(2)).unwrap();
            let direct = tape
                .push_loss(kind, &bags.bags()[2].proportions, &cfg.rot)
                .unwrap();
            drop(f);
            assert_eq!(one, direct);
            let (two, g2) = empirical_risk(&p, &bags, &[2, 2], &cfg).unwrap();
            assert!((two - one).abs() < 1e-12);
            for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
                assert!((a - b).abs() < 1e-12);
            }
            let (ab, _) = empirical_risk(&p, &bags, &[0, 5, 7], &cfg).unwrap();
            let (ba, _) = empirical_risk(&p, &bags, &[7, 0, 5], &cfg).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
        let cfg = TrainConfig::default();
        assert!(empirical_risk(&p, &bags, &[], &cfg).is_err());
        assert!(empirical_risk(&p, &bags, &[bags.len()], &cfg).is_err());
    }

    #[test]
    fn rot_singleton_updates_scale_kl_by_alpha() {
        let (ds, spec) = toy();
        let bags = make_bags(ds, 1, 3).unwrap();
        let p = ParamStore::init(&spec, 0).unwrap();
        let kl = TrainConfig::default();
        let rot = TrainConfig {
            loss_kind: LossKind::Rot,
            ..TrainConfig::default()
        };
        let (_, gk) = empirical_risk(&p, &bags, &[4], &kl).unwrap();
        let (_, gr) = empirical_risk(&p, &bags, &[4], &rot).unwrap();
        for (a, b) in gk.to_flat().iter().zip(gr.to_flat()) {
            assert!((rot.rot.alpha * a - b).abs() < 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn epochs_zero_returns_init() {
        let (ds, spec) = toy();
        let bags = make_bags(ds, 4, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (p, h) = train(&bags, &spec, &cfg).unwrap();
        assert_eq!(p, ParamStore::init(&spec, cfg.seed).unwrap());
        assert!(h.is_empty());
    }

    #[test]
    fn lr_drop_and_determinism() {
        let (ds, spec) = toy();
        let bags = make_bags(ds, 4, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            bags_per_batch: 2,
            ..TrainConfig::default()
        };
        let (p1, h1) = train(&bags, &spec, &cfg).unwrap();
        let (p2, h2) = train(&bags, &spec, &cfg).unwrap();
        assert_eq!(p1.to_checkpoint_bytes(), p2.to_checkpoint_bytes());
        assert_eq!(h1.losses(), h2.losses());
        assert_eq!(h1.len(), 6);
        for r in &h1.records {
            let expected = if r.epoch >= 3 {
                cfg.learning_rate / 10.0
            } else {
                cfg.learning_rate
            };
            assert_eq!(r.learning_rate, expected);
        }
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                weight_decay: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                bags_per_batch: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr_drop_epoch: Some(200),
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn evaluate_fixture() {
        // Linear model W = I on 3-dim one-hot-ish inputs predicts argmax(x).
        let params = ParamStore {
            layers: vec![Layer {
                weight: DenseMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 }),
                bias: None,
            }],
            activation: Activation::Relu,
        };
        let x = |c: usize| {
            let mut v = vec![0.0; 3];
            v[c] = 1.0;
            v
        };
        let features = vec![x(0), x(0), x(1), x(2), x(2), x(0)];
        let labels = vec![0, 0, 1, 1, 2, 2];
        let ds = LabeledDataset::new(3, features, labels).unwrap();
        let ev = evaluate(&params, &ds).unwrap();
        assert!((ev.accuracy - 4.0 / 6.0).abs() < 1e-15);
        let row_sums: Vec<usize> = ev.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(row_sums, ds.class_counts());
        assert_eq!(ev.confusion[1][2], 1);
        assert_eq!(ev.confusion[2][0], 1);

        // Constant predictor: all ties, lowest index wins.
        let zero = ParamStore {
            layers: vec![Layer {
                weight: DenseMatrix::zeros(3, 3),
                bias: None,
            }],
            activation: Activation::Relu,
        };
        let ev = evaluate(&zero, &ds).unwrap();
        assert!((ev.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!(ev.predictions.iter().all(|&p| p == 0));

        let empty = LabeledDataset::new(3, vec![], vec![]);
        if let Ok(empty) = empty {
            assert!(evaluate(&params, &empty).is_err());
        }
    }

    #[test]
    fn epoch_order_is_permutation_and_varies() {
        let a = epoch_order(50, 7, 0);
        let b = epoch_order(50, 7, 1);
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(50, 7, 0));
    }
}
