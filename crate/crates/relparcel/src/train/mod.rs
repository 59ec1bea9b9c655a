//! End-to-end training: shuffled mini-batches, Nadam updates over every
//! parameter, plateau decay, and early stopping, all reproducible from
//! one seed.

mod optim;
mod schedule;
mod split;

pub use optim::Nadam;
pub use schedule::{Schedule, ScheduleDecision};
pub use split::{binarize, k_fold_split, split_train_val};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::metrics::{dataset_metrics, MetricsReport, MultiHot};
use crate::model::Model;
use crate::rng::substream_indexed;
use crate::tensor::Tape;

/// One history row, logged after the epoch's updates with the frozen
/// model: train-split loss, validation loss, the learning rate used
/// during the epoch, and validation mean F1.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainState {
    pub history: Vec<EpochStats>,
    pub best_val: f64,
    pub stopped_early: bool,
    pub lr_decays: u32,
}

pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Nadam,
    pub state: TrainState,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Mean loss and per-parameter mean gradients over a batch. Examples are
/// processed on worker threads, each on its own tape; the reduction runs
/// in index order so results do not depend on scheduling.
fn batch_gradients(model: &Model, batch: &[&LabeledImage]) -> Result<(f64, Vec<Vec<f64>>)> {
    let per_example: Vec<(f64, Vec<Vec<f64>>)> = batch
        .par_iter()
        .map(|img| -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let image = tape.constant(img.pixels.clone(), &[1, img.size, img.size])?;
            let bound = model.bind(&tape, true)?;
            let pass = bound.forward(&tape, model, &image)?;
            let loss = tape.bce_loss(&pass.probs, &img.labels.as_f64())?;
            tape.backward(&loss)?;
            let grads = bound
                .leaves
                .iter()
                .map(|leaf| {
                    tape.grad(leaf)
                        .unwrap_or_else(|| vec![0.0; leaf.numel()])
                })
                .collect();
            Ok((tape.scalar_value(&loss), grads))
        })
        .collect::<Result<_>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut acc: Vec<Vec<f64>> = model
        .param_refs()
        .iter()
        .map(|p| vec![0.0; p.numel()])
        .collect();
    for (l, grads) in &per_example {
        loss += l;
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        for x in a.iter_mut() {
            *x *= scale;
        }
    }
    Ok((loss * scale, acc))
}

/// Per-example probabilities over a frozen model, evaluated in parallel.
pub fn predict_all(model: &Model, examples: &[&LabeledImage]) -> Result<Vec<Vec<f64>>> {
    examples
        .par_iter()
        .map(|img| model.predict_probs(&img.pixels, img.size, img.size))
        .collect()
}

/// Mean loss and thresholded metrics of a frozen model.
pub fn evaluate(
    model: &Model,
    examples: &[&LabeledImage],
    threshold: f64,
) -> Result<(f64, MetricsReport)> {
    if examples.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty example list"));
    }
    let probs = predict_all(model, examples)?;
    let mut loss = 0.0;
    for (p, img) in probs.iter().zip(examples) {
        let tape = Tape::new();
        let pt = tape.constant(p.clone(), &[p.len()])?;
        loss += tape.scalar_value(&tape.bce_loss(&pt, &img.labels.as_f64())?);
    }
    loss /= examples.len() as f64;
    let preds: Vec<MultiHot> = probs.iter().map(|p| binarize(p, threshold)).collect();
    let gts: Vec<MultiHot> = examples.iter().map(|e| e.labels.clone()).collect();
    let report = dataset_metrics(&preds, &gts)?;
    Ok((loss, report))
}

/// Train a fresh model on the dataset. The seed drives initialization,
/// the train/validation split, and every shuffle.
pub fn train(config: &RunConfig, dataset: &[LabeledImage], seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("training needs a nonempty dataset"));
    }
    let l_count = dataset[0].labels.len();
    if l_count != config.model.num_labels {
        return Err(Error::config(format!(
            "dataset has {l_count} labels but the model is configured for {}",
            config.model.num_labels
        )));
    }
    if dataset[0].size != config.backbone.input_size {
        return Err(Error::config(format!(
            "dataset images are {0}x{0} but the backbone expects {1}x{1}",
            dataset[0].size, config.backbone.input_size
        )));
    }

    let (train_idx, val_idx) = split_train_val(dataset.len(), config.train.val_fraction, seed)?;
    let mut model = Model::new(
        &config.model.to_model_config(),
        &config.backbone,
        1,
        seed,
    )?;
    let sizes: Vec<usize> = model.param_refs().iter().map(|p| p.numel()).collect();
    let mut optimizer = Nadam::new(config.train.lr, &sizes);
    let mut sched = Schedule::new(config.train.patience, config.train.decay_patience);
    let mut state = TrainState { best_val: f64::INFINITY, ..TrainState::default() };

    let train_set: Vec<&LabeledImage> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let val_set: Vec<&LabeledImage> = val_idx.iter().map(|&i| &dataset[i]).collect();

    for epoch in 1..=config.train.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut substream_indexed(seed, "train/shuffle", epoch as u64));

        for chunk in order.chunks(config.train.batch_size) {
            let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| train_set[i]).collect();
            let (_, grads) = batch_gradients(&model, &batch)?;
            optimizer.begin_step();
            for (idx, param) in model.param_refs_mut().into_iter().enumerate() {
                optimizer.update(idx, &mut param.data, &grads[idx])?;
            }
        }

        let (train_loss, _) = evaluate(&model, &train_set, config.train.threshold)?;
        let (val_loss, val_report) = evaluate(&model, &val_set, config.train.threshold)?;
        state.history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr: optimizer.lr(),
            val_f1: val_report.mean_f1,
        });
        state.best_val = state.best_val.min(val_loss);

        match sched.update(val_loss) {
            ScheduleDecision::Continue => {}
            ScheduleDecision::DecayLr => {
                state.lr_decays += 1;
                optimizer.set_lr(optimizer.lr() / config.train.decay_factor);
            }
            ScheduleDecision::Stop => {
                state.stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model,
        optimizer,
        state,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}
