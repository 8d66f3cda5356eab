//! The seeded train/evaluate loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{
    blobs_from_stream, load_feature_cache, load_mnist_idx, synth_blobs, train_val_split,
    LabeledDataset,
};
use crate::error::{Error, Result};
use crate::losses::regularized_batch_loss;
use crate::model::{
    backward, clip_global_norm, forward, init_params, predict_logits, sgd_step, ModelParams,
    OptimState,
};
use crate::numerics::{mean_prediction_entropy, softmax, softmax_backward, LabelVector};
use crate::rng::{stream, Purpose};

use super::config::{DataSource, ExperimentConfig};
use super::metrics::EpochRecord;

const EVAL_CHUNK: usize = 4096;

/// Standard MNIST file names inside `mnist_dir`.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Splits and labels ready for training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Training split carrying the corrupted labels.
    pub train: LabeledDataset,
    /// The training split's labels before corruption.
    pub clean_train_labels: LabelVector,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    /// True when the source has no test set and validation stands in.
    pub test_is_val: bool,
}

/// Loads the configured source as `(train pool, optional test set)`, with
/// the configured limits applied.
pub fn load_source(cfg: &ExperimentConfig) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
    let (train, test) = match &cfg.source {
        DataSource::Mnist { dir } => {
            let file = |i: usize| dir.join(MNIST_FILES[i]);
            let train = load_mnist_idx(&file(0), &file(1))?;
            let test = load_mnist_idx(&file(2), &file(3))?;
            (train, Some(test))
        }
        DataSource::FeatureCache { train, test } => {
            let tr = load_feature_cache(train)?;
            let te = test.as_deref().map(load_feature_cache).transpose()?;
            if let Some(te) = &te {
                if te.dim() != tr.dim() || te.num_classes() != tr.num_classes() {
                    return Err(Error::format(
                        test.as_deref().unwrap_or(Path::new("")),
                        format!(
                            "test cache is {}-d/{} classes, train cache {}-d/{} classes",
                            te.dim(),
                            te.num_classes(),
                            tr.dim(),
                            tr.num_classes()
                        ),
                    ));
                }
            }
            (tr, te)
        }
        DataSource::Synth {
            n,
            test_n,
            num_classes,
            dim,
            separation,
        } => (
            synth_blobs(*n, *num_classes, *dim, *separation, cfg.seed)?,
            Some(blobs_from_stream(
                *test_n,
                *num_classes,
                *dim,
                *separation,
                cfg.seed,
                Purpose::SynthTest,
            )?),
        ),
    };
    let train = match cfg.train_limit {
        Some(n) => train.take_first(n),
        None => train,
    };
    let test = match (test, cfg.test_limit) {
        (Some(t), Some(n)) => Some(t.take_first(n)),
        (t, _) => t,
    };
    Ok((train, test))
}

/// Loads, splits and corrupts the training labels. Validation and test
/// labels are never touched.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (pool, test) = load_source(cfg)?;
    prepare_from(cfg, &pool, test)
}

/// [`prepare_data`] over an already loaded pool.
pub fn prepare_from(
    cfg: &ExperimentConfig,
    pool: &LabeledDataset,
    test: Option<LabeledDataset>,
) -> Result<PreparedData> {
    let (mut train, val) = train_val_split(pool, cfg.val_fraction, cfg.seed)?;
    let clean_train_labels = train.labels.clone();
    if let Some(noise) = &cfg.noise {
        let spec = noise.resolve(train.num_classes(), cfg.seed)?;
        train.labels = spec.apply(&train.labels)?;
    }
    let test_is_val = test.is_none();
    let test = test.unwrap_or_else(|| val.clone());
    Ok(PreparedData {
        train,
        clean_train_labels,
        val,
        test,
        test_is_val,
    })
}

/// Records plus the final parameters.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub records: Vec<EpochRecord>,
    pub params: ModelParams,
}

/// Runs the configured experiment end to end.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    Ok(train_on(cfg, &data)?.records)
}

/// Accuracy and mean prediction entropy of `params` on `ds`.
pub fn evaluate(params: &ModelParams, ds: &LabeledDataset) -> Result<(f64, f64)> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    let mut entropy_sum = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = ds.features.select_rows(chunk);
        let probs = softmax(&predict_logits(params, &x)?)?;
        entropy_sum += mean_prediction_entropy(&probs)? * chunk.len() as f64;
        correct += probs
            .argmax()
            .iter()
            .zip(chunk)
            .filter(|(&pred, &i)| pred == ds.labels.labels()[i])
            .count();
    }
    Ok((correct as f64 / n as f64, entropy_sum / n as f64))
}

/// Draws one complementary label per sample, uniformly among the other classes.
fn complementary_labels(labels: &LabelVector, seed: u64, epoch: usize) -> Result<LabelVector> {
    let k = labels.num_classes();
    let mut rng = stream(seed, Purpose::Complementary, epoch as u64);
    let out = labels
        .labels()
        .iter()
        .map(|&y| {
            let r = rng.random_range(0..k - 1);
            if r >= y {
                r + 1
            } else {
                r
            }
        })
        .collect();
    LabelVector::new(out, k)
}

fn at(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::Divergence { reason, .. } => Error::Divergence {
            epoch,
            batch,
            reason,
        },
        other => other,
    }
}

/// Trains a fresh model on prepared data.
pub fn train_on(cfg: &ExperimentConfig, data: &PreparedData) -> Result<TrainedRun> {
    cfg.validate()?;
    let train = &data.train;
    let n = train.len();
    let k = train.num_classes();
    let mut params = init_params(cfg.arch, train.dim(), k, cfg.seed)?;
    let mut state = OptimState::new(cfg.optimizer, &params)?;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = cfg.record_timing.then(Instant::now);
        let lambda = cfg.loss.lambda_for_epoch(epoch)?;
        let targets = if cfg.loss.kind.uses_complementary_labels() {
            complementary_labels(&train.labels, cfg.seed, epoch)?
        } else {
            train.labels.clone()
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, epoch as u64));

        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |reason: String| Error::Divergence {
                epoch,
                batch,
                reason,
            };
            let x = train.features.select_rows(idx);
            let y = targets.select(idx);
            let (logits, cache) = forward(&params, &x).map_err(|e| at(epoch, batch, e))?;
            if !logits.is_finite() {
                return Err(diverged("non-finite logits".into()));
            }
            let probs = softmax(&logits)?;
            let (value, grad_p) = regularized_batch_loss(&cfg.loss, &probs, &y, lambda)?;
            if !value.is_finite() {
                return Err(diverged(format!("loss is {value}")));
            }
            loss_sum += value * idx.len() as f64;
            let grad_z = softmax_backward(&probs, &grad_p)?;
            let mut grads = backward(&params, &cache, &grad_z)?;
            if !grads.is_finite() {
                return Err(diverged("non-finite gradient".into()));
            }
            clip_global_norm(&mut grads, cfg.optimizer.clip_norm)?;
            sgd_step(&mut params, &mut state, &grads).map_err(|e| at(epoch, batch, e))?;
        }

        let (train_acc, mean_entropy) = evaluate(&params, train)?;
        let (val_acc, _) = evaluate(&params, &data.val)?;
        let test_acc = if data.test_is_val {
            val_acc
        } else {
            evaluate(&params, &data.test)?.0
        };
        records.push(EpochRecord {
            epoch,
            lambda,
            train_loss: loss_sum / n as f64,
            train_acc,
            val_acc,
            test_acc,
            mean_entropy,
            ms: started.map_or(0, |t| t.elapsed().as_millis() as u64),
        });
    }
    Ok(TrainedRun { records, params })
}
