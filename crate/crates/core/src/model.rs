//! The assembled network: encoder, interaction stack and both decoders.

use crate::cointeractive::{CoInteractiveStack, LayerOutput, Regularization};
use crate::config::ModelConfig;
use crate::data::{make_batches, Batch, Utterance, Vocab};
use crate::decoders::{joint_loss, CrfHead, IntentHead};
use crate::encoder::{uniform, Encoder};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, Frame};
use crate::numerics::{seeded_rng, ParamStore, Real, SeededRng, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub stack: CoInteractiveStack,
    pub intent: IntentHead,
    pub crf: CrfHead,
}

/// Graph handles of one forward pass.
pub struct Forward {
    pub intent_logits: Var,
    pub emissions: Var,
    pub layers: Vec<LayerOutput>,
}

/// Decoded labels for one batch, in row order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub intents: Vec<usize>,
    pub slots: Vec<Vec<usize>>,
}

impl<T: Real> Model<T> {
    /// Fresh parameters drawn from `seeded_rng(config.seed)`.
    pub fn new(config: ModelConfig, vocab: Vocab, pretrained: Option<&Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        if vocab.slots.is_empty() || vocab.intents.is_empty() {
            return Err(Error::Config("label vocabularies must be non-empty".into()));
        }
        let mut rng = seeded_rng(config.seed);
        let mut store = ParamStore::new();
        let d = config.hidden_dim;
        let encoder = Encoder::new(&mut store, vocab.words.len(), config.embedding_dim, d, pretrained, &mut rng)?;
        let bound = 1.0 / (d as f64).sqrt();
        let slot_labels = store.add("labels.slot", uniform(&mut rng, &[d, vocab.slots.len()], bound), true)?;
        let intent_labels = store.add("labels.intent", uniform(&mut rng, &[d, vocab.intents.len()], bound), true)?;
        let stack = CoInteractiveStack::new(
            &mut store,
            slot_labels,
            intent_labels,
            config.layers,
            d,
            config.heads,
            config.ffn_dim,
            config.ablation,
            config.layer_norm_eps,
            &mut rng,
        )?;
        let intent = IntentHead::new(&mut store, intent_labels, &mut rng)?;
        let crf = CrfHead::new(&mut store, slot_labels, &mut rng)?;
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            stack,
            intent,
            crf,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            stack: self.stack.clone(),
            intent: self.intent.clone(),
            crf: self.crf.clone(),
        }
    }

    /// Dropout is active iff `rng` is given.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch, rng: Option<&mut SeededRng>) -> Result<Forward> {
        let mut reg = match rng {
            Some(r) => Regularization {
                dropout: self.config.dropout,
                rng: Some(r),
            },
            None => Regularization::eval(),
        };
        let emb_dropout = if reg.rng.is_some() { self.config.embedding_dropout } else { 0.0 };
        let h = self.encoder.encode(
            tape,
            &self.store,
            &batch.token_ids,
            batch.size,
            batch.max_len,
            &batch.mask,
            emb_dropout,
            reg.rng.as_deref_mut(),
        )?;
        let layers = self.stack.run(tape, &self.store, h, &batch.mask, &mut reg)?;
        let last = layers.last().expect("at least one layer");
        let intent_logits = self.intent.logits(tape, &self.store, last.intent, &batch.mask)?;
        let emissions = self.crf.emissions(tape, &self.store, last.slot)?;
        Ok(Forward {
            intent_logits,
            emissions,
            layers,
        })
    }

    pub fn loss(&self, tape: &mut Tape<T>, batch: &Batch, rng: Option<&mut SeededRng>) -> Result<Var> {
        let f = self.forward(tape, batch, rng)?;
        let transitions = tape.param(&self.store, self.crf.transitions);
        joint_loss(
            tape,
            f.intent_logits,
            &batch.intent_ids,
            f.emissions,
            transitions,
            &batch.slot_ids,
            &batch.mask,
        )
    }

    /// Evaluation-mode decode: argmax intent, Viterbi slots.
    pub fn decode(&self, batch: &Batch) -> Result<Decoded> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, batch, None)?;
        Ok(Decoded {
            intents: IntentHead::predict(tape.value(f.intent_logits)),
            slots: self.crf.decode(&self.store, tape.value(f.emissions), &batch.mask)?,
        })
    }

    /// Predicted frames for `data`, in input order.
    pub fn predict(&self, data: &[Utterance]) -> Result<Vec<Frame>> {
        let encoded = data
            .iter()
            .map(|u| {
                Ok(crate::data::Encoded {
                    tokens: u.tokens.iter().map(|w| self.vocab.word_id(w)).collect(),
                    slots: vec![0; u.tokens.len()],
                    intent: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut frames = vec![None; data.len()];
        for batch in make_batches(&encoded, self.config.batch_size, None)? {
            let out = self.decode(&batch)?;
            for (row, &idx) in batch.indices.iter().enumerate() {
                frames[idx] = Some(Frame {
                    intent: self.vocab.intents.label(out.intents[row]).unwrap_or_default().to_string(),
                    tags: out.slots[row]
                        .iter()
                        .map(|&s| self.vocab.slots.label(s).unwrap_or_default().to_string())
                        .collect(),
                });
            }
        }
        Ok(frames.into_iter().map(|f| f.expect("every row decoded")).collect())
    }

    pub fn evaluate(&self, data: &[Utterance]) -> Result<EvalReport> {
        let pred = self.predict(data)?;
        let gold: Vec<Frame> = data
            .iter()
            .map(|u| Frame {
                intent: u.intent.clone(),
                tags: u.slots.clone(),
            })
            .collect();
        evaluate(&pred, &gold)
    }
}
