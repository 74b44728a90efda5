//! Joint training with Adam, global-norm clipping and early stopping on dev.

use std::cmp::Ordering;

use crate::checkpoint::CheckpointMeta;
use crate::config::ModelConfig;
use crate::data::{make_batches, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::numerics::{seeded_rng, AdamState, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean joint loss over the epoch's batches.
    pub train_loss: f64,
    pub dev: EvalReport,
    pub improved: bool,
}

pub struct TrainOutcome {
    /// Parameters from the best dev epoch.
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
    pub history: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub loss_trace: Vec<f64>,
}

/// Higher overall accuracy wins, then higher slot F1; equal scores keep the
/// earlier epoch.
fn better(candidate: &EvalReport, best: &EvalReport) -> bool {
    let key = |r: &EvalReport| (r.overall_accuracy, r.slot_f1);
    matches!(key(candidate).partial_cmp(&key(best)), Some(Ordering::Greater))
}

/// Vocabularies for a run: words from `train`, labels from every split given.
pub fn build_vocab(config: &ModelConfig, train: &[Utterance], others: &[&[Utterance]]) -> Result<Vocab> {
    let mut vocab = Vocab::build(train, config.min_freq)?;
    for split in others {
        vocab.extend_labels(split);
    }
    Ok(vocab)
}

pub fn train(
    config: &ModelConfig,
    vocab: Vocab,
    pretrained: Option<&Tensor<f32>>,
    train_data: &[Utterance],
    dev_data: &[Utterance],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train_data.is_empty() || dev_data.is_empty() {
        return Err(Error::Contract("training and dev splits must be non-empty".into()));
    }
    let mut model = Model::<f32>::new(config.clone(), vocab, pretrained)?;
    let encoded = model.vocab.encode_all(train_data)?;
    let mut adam = AdamState::new(&model.store, config.lr, config.l2);
    let mut dropout_rng = seeded_rng(config.seed.wrapping_add(1));

    let mut best: Option<(Vec<Tensor<f32>>, CheckpointMeta)> = None;
    let mut history = Vec::new();
    let mut loss_trace = Vec::new();
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        let shuffle = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
        let batches = make_batches(&encoded, config.batch_size, Some(shuffle))?;
        let mut epoch_loss = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            model.store.zero_grad();
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, batch, Some(&mut dropout_rng))?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: value,
                });
            }
            tape.backward(loss, &mut model.store)?;
            model.store.fill_missing_grads();
            if config.grad_clip > 0.0 {
                model.store.clip_grad_norm(config.grad_clip);
            }
            adam.step(&mut model.store)?;
            loss_trace.push(value);
            epoch_loss += value;
        }

        let dev = model.evaluate(dev_data)?;
        let improved = best.as_ref().is_none_or(|(_, m)| better(&dev, m.dev.as_ref().expect("set")));
        if improved {
            let snapshot = model.store.iter().map(|(_, p)| p.value.clone()).collect();
            best = Some((
                snapshot,
                CheckpointMeta {
                    epoch,
                    dev: Some(dev.clone()),
                },
            ));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let log = EpochLog {
            epoch,
            train_loss: epoch_loss / batches.len() as f64,
            dev,
            improved,
        };
        on_epoch(&log);
        history.push(log);
        if since_best >= config.patience {
            break;
        }
    }

    let (values, meta) = best.ok_or_else(|| Error::Config("max_epochs must be at least 1".into()))?;
    for (p, v) in model.store.iter_mut().zip(values) {
        p.value = v;
        p.grad = None;
    }
    Ok(TrainOutcome {
        model,
        meta,
        history,
        loss_trace,
    })
}

/// Evaluation-mode metrics for a trained model; rejects data whose labels
/// the model has never seen.
pub fn evaluate_checkpoint(model: &Model<f32>, data: &[Utterance]) -> Result<EvalReport> {
    for u in data {
        model.vocab.intent_id(&u.intent)?;
        for s in &u.slots {
            model.vocab.slot_id(s)?;
        }
    }
    model.evaluate(data)
}
