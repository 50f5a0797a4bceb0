//! Mini-batch Adam training with best-on-validation selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::data::{DataLoader, PreparedSplit, Split};
use crate::channel_sim::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pairs, loss_nmse, MetricValue};
use crate::models::{RefinerModel, Variant};
use crate::tensor_core::{adam_step, AdamState, ParamStore, Tape, Tensor};

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5eed_5eed;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches; `None` for the
    /// initialization row.
    pub train_nmse: Option<f64>,
    pub val_nmse: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model holding the best-validation parameters.
    pub model: RefinerModel,
    pub history: Vec<EpochRecord>,
    /// 0 when the initialization was never beaten.
    pub epoch_best: usize,
    pub best_val_nmse: f64,
    pub steps: usize,
    /// Validation and test samples read while optimizer steps ran.
    pub leaked_reads: usize,
}

/// Fresh model for `variant`, seeded from the experiment seed, with
/// external backbone weights applied when configured.
pub fn init_model(cfg: &ExperimentConfig, variant: Variant) -> Result<RefinerModel> {
    let seed = derive_seed(cfg.seed, INIT_STREAM, variant as u64);
    let mut model = RefinerModel::new(
        cfg.backbone(variant),
        cfg.dims.n_tx,
        cfg.dims.n_sub,
        cfg.patch_size,
        seed,
    )?;
    if let (Variant::Llm, Some(path)) = (variant, &cfg.backbone_weights) {
        model.import_backbone(path)?;
    }
    Ok(model)
}

/// Loss and parameter gradients of one batch, accumulated over micro-batches
/// in a fixed order with weights `len(chunk) / len(batch)`.
pub fn batch_gradients(
    model: &RefinerModel,
    loader: &DataLoader,
    idx: &[usize],
    micro: usize,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut loss = 0.0;
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    for chunk in idx.chunks(micro.max(1)) {
        let w = chunk.len() as f64 / idx.len() as f64;
        let (tokens, targets) = loader.batch(Split::Train, chunk)?;
        let mut tape = Tape::new();
        let trace = model.forward_tape(&mut tape, &tokens)?;
        let l = loss_nmse(&mut tape, trace.output, &targets)?;
        loss += w * tape.value(l).item()?;
        for (name, g) in tape.backward(l)?.into_params() {
            match total.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += w * v),
                None => {
                    let mut g = g;
                    g.data_mut().iter_mut().for_each(|v| *v *= w);
                    total.insert(name, g);
                }
            }
        }
    }
    Ok((loss, total))
}

/// Mean per-sample NMSE of the model on a prepared split, in the
/// normalized domain.
pub fn split_nmse(model: &RefinerModel, data: &PreparedSplit, micro: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut sum = 0.0;
    for chunk in idx.chunks(micro.max(1)) {
        let (tokens, targets) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let trace = model.forward_tape(&mut tape, &tokens)?;
        let per = targets.len() / chunk.len();
        let pred = tape.value(trace.output).data();
        for (p, t) in pred.chunks(per).zip(targets.data().chunks(per)) {
            let num: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = t.iter().map(|b| b * b).sum();
            sum += num / den;
        }
    }
    Ok(sum / data.len() as f64)
}

/// NMSE and GCS of the refined, de-normalized channels of a split.
pub fn evaluate_model(model: &RefinerModel, data: &PreparedSplit, micro: usize) -> Result<MetricValue> {
    let mut refined = Vec::with_capacity(data.len());
    for chunk in data.h_in.chunks(micro.max(1)) {
        refined.extend(model.forward_batch(chunk)?);
    }
    evaluate_pairs(data.h.iter().zip(&refined))
}

/// Metrics of the coarse reconstruction itself.
pub fn evaluate_coarse(data: &PreparedSplit) -> Result<MetricValue> {
    evaluate_pairs(data.h.iter().zip(&data.h_in))
}

fn snapshot(store: &ParamStore) -> ParamStore {
    store.clone()
}

pub fn train(cfg: &ExperimentConfig, variant: Variant, loader: &DataLoader) -> Result<TrainOutcome> {
    train_model(cfg, init_model(cfg, variant)?, loader)
}

pub fn train_model(cfg: &ExperimentConfig, mut model: RefinerModel, loader: &DataLoader) -> Result<TrainOutcome> {
    let n = loader.len(Split::Train);
    if n == 0 {
        return Err(Error::Contract("training split is empty".into()));
    }
    let mut adam = AdamState::new(cfg.lr);
    let mut best_val = split_nmse(&model, loader.split(Split::Val), cfg.micro_batch)?;
    let mut best = snapshot(model.params());
    let mut epoch_best = 0;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_nmse: None,
        val_nmse: best_val,
    }];
    let mut steps = 0;
    let mut leaked = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            SHUFFLE_STREAM,
            epoch as u64,
        )));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let before = loader.reads();
            let (loss, grads) = batch_gradients(&model, loader, batch, cfg.micro_batch)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss {loss} at epoch {epoch}, batch {b}"
                )));
            }
            adam_step(model.params_mut(), &grads, &mut adam)?;
            let after = loader.reads();
            leaked += (after[1] - before[1]) + (after[2] - before[2]);
            loss_sum += loss;
            batches += 1;
            steps += 1;
        }
        let val = split_nmse(&model, loader.split(Split::Val), cfg.micro_batch)?;
        if !val.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation NMSE at epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_nmse: Some(loss_sum / batches as f64),
            val_nmse: val,
        });
        if val < best_val {
            best_val = val;
            best = snapshot(model.params());
            epoch_best = epoch;
        }
    }
    model.assign_weights(&best)?;
    Ok(TrainOutcome {
        model,
        history,
        epoch_best,
        best_val_nmse: best_val,
        steps,
        leaked_reads: leaked,
    })
}
