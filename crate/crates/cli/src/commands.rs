use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use llp_core::bags::{make_bags, BagDataset};
use llp_core::dataset::{gen_blobs, load_csv, write_csv, BlobSpec, LabeledDataset};
use llp_core::harness::{self, DataSource, ExperimentConfig, ModelShape, SweepWriter};
use llp_core::model::ParamStore;
use llp_core::trainer::{evaluate, train_with, TrainConfig, TrainOptions};
use llp_core::LlpError;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::overlay;
use crate::{BagsArgs, EvalArgs, GenArgs, LosscheckArgs, SweepArgs, TrainArgs, TrainFlags};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(LlpError),
    LosscheckFailed,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::LosscheckFailed => f.write_str("loss property checks failed"),
        }
    }
}

impl From<LlpError> for CliError {
    fn from(e: LlpError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

fn is_numeric_failure(e: &LlpError) -> bool {
    match e {
        LlpError::NonFiniteLoss { .. }
        | LlpError::SinkhornDiverged { .. }
        | LlpError::NonFinite(_)
        | LlpError::EmptyReduction
        | LlpError::NotScalarTerminated => true,
        LlpError::Bag { source, .. } => is_numeric_failure(source),
        _ => false,
    }
}

impl CliError {
    /// 1 for bad input, 2 for training or numeric failures, 3 for failed checks.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if is_numeric_failure(e) => 2,
            CliError::Core(_) => 1,
            CliError::LosscheckFailed => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_dataset(path: &Path, num_classes: Option<usize>) -> Result<LabeledDataset> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{}: no such file", path.display())));
    }
    Ok(load_csv(path, num_classes)?)
}

fn write_json(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(LlpError::from)?;
    match out {
        Some(path) => fs::write(path, text + "\n")?,
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
        }
    }
    Ok(())
}

pub fn gen(a: GenArgs) -> Result<()> {
    let d = BlobSpec::default();
    let spec = BlobSpec {
        num_classes: a.classes.unwrap_or(d.num_classes),
        per_class: a.per_class.unwrap_or(d.per_class),
        dim: a.dim.unwrap_or(d.dim),
        spread: a.spread.unwrap_or(d.spread),
        center_scale: a.center_scale.unwrap_or(d.center_scale),
        seed: a.seed.unwrap_or(d.seed),
    };
    let spec = overlay(spec, a.config.as_deref())?;
    let ds = gen_blobs(&spec)?;
    write_csv(&ds, &a.out)?;
    log::info!("wrote {} instances to {}", ds.len(), a.out.display());
    Ok(())
}

pub fn bags(a: BagsArgs) -> Result<()> {
    let ds = Arc::new(read_dataset(&a.data, a.num_classes)?);
    let bags = make_bags(ds, a.bag_size, a.seed)?;
    bags.write_jsonl(&a.out)?;
    log::info!(
        "wrote {} bags of size {} to {}",
        bags.len(),
        a.bag_size,
        a.out.display()
    );
    Ok(())
}

fn apply_flags(f: &TrainFlags, train: &mut TrainConfig, model: &mut ModelShape) {
    if let Some(v) = f.alpha {
        train.rot.alpha = v;
    }
    if let Some(v) = f.epsilon {
        train.rot.epsilon = v;
    }
    if let Some(v) = f.sinkhorn_iters {
        train.rot.n_iter = v;
    }
    if let Some(v) = f.grad_mode {
        train.rot.grad_mode = v;
    }
    if let Some(v) = f.lr {
        train.learning_rate = v;
    }
    if let Some(v) = f.momentum {
        train.momentum = v;
    }
    if let Some(v) = f.weight_decay {
        train.weight_decay = v;
    }
    if let Some(v) = f.epochs {
        train.epochs = v;
    }
    if f.lr_drop_epoch.is_some() {
        train.lr_drop_epoch = f.lr_drop_epoch;
    }
    if let Some(v) = f.bags_per_batch {
        train.bags_per_batch = v;
    }
    if let Some(v) = &f.hidden {
        model.hidden = v.clone();
    }
    if let Some(v) = f.activation {
        model.activation = v;
    }
    if f.hidden_bias {
        model.hidden_bias = true;
    }
}

/// Everything `llp train` needs; `--config` files use this layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainRun {
    data: Option<PathBuf>,
    num_classes: Option<usize>,
    bags: Option<PathBuf>,
    bag_size: Option<usize>,
    test: Option<PathBuf>,
    model: ModelShape,
    train: TrainConfig,
    out: Option<PathBuf>,
    history: Option<PathBuf>,
    checkpoint_every: Option<usize>,
    record_timing: bool,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            data: None,
            num_classes: None,
            bags: None,
            bag_size: None,
            test: None,
            model: ModelShape::default(),
            train: TrainConfig::default(),
            out: None,
            history: None,
            checkpoint_every: None,
            record_timing: true,
        }
    }
}

fn load_bags(run: &TrainRun, ds: Arc<LabeledDataset>) -> Result<BagDataset> {
    match (&run.bags, run.bag_size) {
        (Some(path), _) => Ok(BagDataset::read_jsonl(path, ds)?),
        (None, Some(n)) => Ok(make_bags(ds, n, run.train.seed)?),
        (None, None) => Err(CliError::Usage(
            "either --bags or --bag-size is required".into(),
        )),
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut run = TrainRun {
        data: a.data,
        num_classes: a.num_classes,
        bags: a.bags,
        bag_size: a.bag_size,
        test: a.test,
        out: a.out,
        history: a.history,
        checkpoint_every: a.checkpoint_every,
        record_timing: !a.flags.no_timing,
        ..TrainRun::default()
    };
    if let Some(l) = a.loss {
        run.train.loss_kind = l;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    apply_flags(&a.flags, &mut run.train, &mut run.model);
    let run: TrainRun = overlay(run, a.config.as_deref())?;

    let data = run
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let out = run
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let ds = Arc::new(read_dataset(data, run.num_classes)?);
    let bags = load_bags(&run, ds.clone())?;
    let test = run
        .test
        .as_ref()
        .map(|p| read_dataset(p, Some(ds.num_classes())))
        .transpose()?;
    let spec = run.model.spec_for(&ds);
    let history = run.history.clone().unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".history.csv");
        PathBuf::from(p)
    });
    let opts = TrainOptions {
        eval_set: test.as_ref(),
        history_csv: Some(history.clone()),
        checkpoint: Some(out.clone()),
        checkpoint_every: run.checkpoint_every,
        zero_timing: !run.record_timing,
        ..TrainOptions::default()
    };
    let (_, hist) = train_with(&bags, &spec, &run.train, opts)?;
    let last = hist.last();
    write_json(
        &json!({
            "epochs": hist.len(),
            "bags": bags.len(),
            "final_train_loss": last.map(|r| r.train_loss),
            "test_accuracy": last.map(|r| r.test_accuracy).filter(|a| a.is_finite()),
            "checkpoint": out,
            "history": history,
        }),
        None,
    )
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let params = ParamStore::read_checkpoint(&a.model)?;
    let ds = read_dataset(&a.data, a.num_classes.or(Some(params.num_classes())))?;
    if ds.dim() != params.input_dim() {
        return Err(LlpError::DimensionMismatch {
            what: "dataset features",
            expected: params.input_dim(),
            found: ds.dim(),
        }
        .into());
    }
    let ev = evaluate(&params, &ds)?;
    write_json(
        &json!({
            "num_instances": ds.len(),
            "accuracy": ev.accuracy,
            "confusion": ev.confusion,
        }),
        a.out.as_deref(),
    )
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = ExperimentConfig {
        record_timing: !a.flags.no_timing,
        ..ExperimentConfig::default()
    };
    if let Some(path) = a.data {
        cfg.data = DataSource::Csv {
            path,
            num_classes: None,
        };
    }
    if let Some(v) = a.bag_sizes {
        cfg.bag_sizes = v;
    }
    if let Some(n) = a.bag_size {
        cfg.bag_sizes = vec![n];
    }
    if let Some(v) = a.loss {
        cfg.losses = v;
    }
    if let Some(v) = a.alphas {
        cfg.alphas = v;
    }
    if let Some(v) = a.flags.alpha {
        cfg.alphas = vec![v];
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    apply_flags(&a.flags, &mut cfg.train, &mut cfg.model);
    let cfg: ExperimentConfig = overlay(cfg, a.config.as_deref())?;
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("sweep.csv"));
    let mut writer = SweepWriter::create(&out)?;
    let rows = harness::sweep(&cfg, Some(&mut writer))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!(
            "{failed} of {} runs failed; see the empty rows in {}",
            rows.len(),
            out.display()
        );
    }
    log::info!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

pub fn losscheck(a: LosscheckArgs) -> Result<()> {
    let report = if a.inject_tau_fault {
        harness::losscheck_with(a.seed, harness::flipped_tau_solver)
    } else {
        harness::losscheck(a.seed)
    };
    let value = serde_json::to_value(&report).map_err(LlpError::from)?;
    write_json(&value, a.out.as_deref())?;
    for c in report
        .checks
        .iter()
        .filter(|c| c.status == harness::CheckStatus::Fail)
    {
        eprintln!(
            "FAIL {}: max error {:e} > {:e}",
            c.name, c.max_error, c.tolerance
        );
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::LosscheckFailed)
    }
}
