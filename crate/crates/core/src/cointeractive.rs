//! The stacked interaction block: label attention, cross-attention between the
//! intent and slot streams, and the windowed feed-forward fusion.

use crate::config::AblationMode;
use crate::encoder::uniform;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Real, SeededRng, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, input: usize, output: usize, rng: &mut SeededRng) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            weight: store.add(format!("{prefix}.weight"), uniform(rng, &[input, output], bound), true)?,
            bias: store.add(format!("{prefix}.bias"), uniform(rng, &[output], bound), false)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(vec![dim]), false)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(vec![dim]), false)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

/// Query/key/value projections of one attention path.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub width: usize,
}

impl Attention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, width: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{prefix}.query"), width, width, rng)?,
            key: Linear::new(store, &format!("{prefix}.key"), width, width, rng)?,
            value: Linear::new(store, &format!("{prefix}.value"), width, width, rng)?,
            width,
        })
    }
}

/// Shared dropout settings for one forward pass.
pub struct Regularization<'a> {
    pub dropout: f64,
    pub rng: Option<&'a mut SeededRng>,
}

impl Regularization<'_> {
    pub fn eval() -> Self {
        Regularization { dropout: 0.0, rng: None }
    }

    fn apply<T: Real>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.dropout(x, self.dropout, self.rng.as_deref_mut())
    }
}

/// `[B×n×w] → [B·h × n × w/h]`
fn split_heads<T: Real>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let (b, n, w) = (tape.shape(x)[0], tape.shape(x)[1], tape.shape(x)[2]);
    let x = tape.reshape(x, vec![b, n, heads, w / heads])?;
    let x = tape.swap_axes_12(x)?;
    tape.reshape(x, vec![b * heads, n, w / heads])
}

fn merge_heads<T: Real>(tape: &mut Tape<T>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let (n, dk) = (tape.shape(x)[1], tape.shape(x)[2]);
    let x = tape.reshape(x, vec![batch, heads, n, dk])?;
    let x = tape.swap_axes_12(x)?;
    tape.reshape(x, vec![batch, n, heads * dk])
}

/// Scaled dot-product attention of `queries_from` over `keys_from`.
/// Returns the merged context `[B×n×w]` and the attention weights
/// `[B·heads × n × n]`. Keys at padded positions get zero weight.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &Attention,
    queries_from: Var,
    keys_from: Var,
    mask: &[bool],
    heads: usize,
    reg: &mut Regularization<'_>,
) -> Result<(Var, Var)> {
    if heads == 0 || !params.width.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {} is not divisible by {heads} heads", params.width)));
    }
    let (b, n) = (tape.shape(queries_from)[0], tape.shape(queries_from)[1]);
    if tape.shape(keys_from)[..2] != [b, n] || mask.len() != b * n {
        return Err(Error::shape("attention", "query and key streams must share B, n and mask"));
    }
    let q = params.query.forward(tape, store, queries_from)?;
    let k = params.key.forward(tape, store, keys_from)?;
    let v = params.value.forward(tape, store, keys_from)?;
    let (q, k, v) = (split_heads(tape, q, heads)?, split_heads(tape, k, heads)?, split_heads(tape, v, heads)?);

    let dk = params.width / heads;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let mut key_mask = Vec::with_capacity(b * heads * n * n);
    for bi in 0..b {
        for _ in 0..heads * n {
            key_mask.extend_from_slice(&mask[bi * n..(bi + 1) * n]);
        }
    }
    let probs = tape.softmax(scores, Some(&key_mask))?;
    let dropped = reg.apply(tape, probs)?;
    let ctx = tape.bmm(dropped, v, false)?;
    Ok((merge_heads(tape, ctx, b, heads)?, probs))
}

/// Attention of each token over a label embedding matrix `labels[d×L]`:
/// `H + softmax(H·W)·Wᵀ` at real positions, `H` at padded ones.
pub fn label_attention<T: Real>(tape: &mut Tape<T>, h: Var, labels: Var, mask: &[bool]) -> Result<(Var, Var)> {
    let d = tape.value(h).last_dim();
    if tape.shape(labels).len() != 2 || tape.shape(labels)[0] != d || tape.shape(labels)[1] == 0 {
        return Err(Error::Dimension {
            op: "label_attention",
            lhs: tape.shape(h).to_vec(),
            rhs: tape.shape(labels).to_vec(),
        });
    }
    let scores = tape.linear(h, labels, None)?;
    let weights = tape.softmax(scores, None)?;
    let labels_t = tape.transpose(labels)?;
    let ctx = tape.linear(weights, labels_t, None)?;
    let out = tape.add(h, ctx)?;
    Ok((tape.select_rows(mask, out, h)?, weights))
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

/// Per-layer parameters.
#[derive(Clone, Debug)]
pub struct CoInteractiveLayer {
    /// Slot queries over intent keys/values (Q_S, K_I, V_I).
    pub intent_to_slot: Option<Attention>,
    /// Intent queries over slot keys/values (Q_I, K_S, V_S).
    pub slot_to_intent: Option<Attention>,
    /// Used instead of the two paths above in self-attention mode.
    pub joint: Option<Attention>,
    pub attn_norm_slot: Norm,
    pub attn_norm_intent: Norm,
    pub ffn: FeedForward,
    pub ffn_norm_slot: Norm,
    pub ffn_norm_intent: Norm,
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub intent: Var,
    pub slot: Var,
    /// Attention weight tensors computed in this layer, one per path.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct CoInteractiveStack {
    pub layers: Vec<CoInteractiveLayer>,
    /// W^S, shared with the slot decoder.
    pub slot_labels: ParamId,
    /// W^I, shared with the intent decoder.
    pub intent_labels: ParamId,
    pub mode: AblationMode,
    pub hidden: usize,
    pub heads: usize,
    pub eps: f64,
}

impl CoInteractiveStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        slot_labels: ParamId,
        intent_labels: ParamId,
        layers: usize,
        hidden: usize,
        heads: usize,
        ffn_dim: usize,
        mode: AblationMode,
        eps: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if layers < 1 {
            return Err(Error::Config("at least one interaction layer is required".into()));
        }
        let width = if mode == AblationMode::SelfAttention { 2 * hidden } else { hidden };
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("hidden width {width} is not divisible by {heads} heads")));
        }
        let mut built = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = format!("layers.{l}");
            let (i2s, s2i, joint) = if mode == AblationMode::SelfAttention {
                (None, None, Some(Attention::new(store, &format!("{p}.self_attention"), 2 * hidden, rng)?))
            } else {
                (
                    Some(Attention::new(store, &format!("{p}.intent_to_slot"), hidden, rng)?),
                    Some(Attention::new(store, &format!("{p}.slot_to_intent"), hidden, rng)?),
                    None,
                )
            };
            built.push(CoInteractiveLayer {
                intent_to_slot: i2s,
                slot_to_intent: s2i,
                joint,
                attn_norm_slot: Norm::new(store, &format!("{p}.attn_norm_slot"), hidden)?,
                attn_norm_intent: Norm::new(store, &format!("{p}.attn_norm_intent"), hidden)?,
                ffn: FeedForward {
                    inner: Linear::new(store, &format!("{p}.ffn.inner"), 6 * hidden, ffn_dim, rng)?,
                    outer: Linear::new(store, &format!("{p}.ffn.outer"), ffn_dim, hidden, rng)?,
                },
                ffn_norm_slot: Norm::new(store, &format!("{p}.ffn_norm_slot"), hidden)?,
                ffn_norm_intent: Norm::new(store, &format!("{p}.ffn_norm_intent"), hidden)?,
            });
        }
        Ok(Self {
            layers: built,
            slot_labels,
            intent_labels,
            mode,
            hidden,
            heads,
            eps,
        })
    }

    /// Cross-attention between the streams followed by residual layer norms.
    /// Returns `(H'_S, H'_I, attention weights)`.
    #[allow(clippy::too_many_arguments)]
    pub fn co_attention<T: Real>(
        &self,
        layer: &CoInteractiveLayer,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        slot: Var,
        intent: Var,
        mask: &[bool],
        reg: &mut Regularization<'_>,
    ) -> Result<(Var, Var, Vec<Var>)> {
        let mut weights = Vec::new();
        let (slot_ctx, intent_ctx) = if let Some(joint) = &layer.joint {
            let both = tape.concat_last(&[slot, intent])?;
            let (ctx, w) = multi_head_attention(tape, store, joint, both, both, mask, self.heads, reg)?;
            weights.push(w);
            (
                Some(tape.slice_last(ctx, 0, self.hidden)?),
                Some(tape.slice_last(ctx, self.hidden, self.hidden)?),
            )
        } else {
            let mut slot_ctx = None;
            let mut intent_ctx = None;
            if self.mode.intent_to_slot() {
                let p = layer.intent_to_slot.as_ref().expect("built for co-attention");
                let (ctx, w) = multi_head_attention(tape, store, p, slot, intent, mask, self.heads, reg)?;
                weights.push(w);
                slot_ctx = Some(ctx);
            }
            if self.mode.slot_to_intent() {
                let p = layer.slot_to_intent.as_ref().expect("built for co-attention");
                let (ctx, w) = multi_head_attention(tape, store, p, intent, slot, mask, self.heads, reg)?;
                weights.push(w);
                intent_ctx = Some(ctx);
            }
            (slot_ctx, intent_ctx)
        };
        let residual = |tape: &mut Tape<T>, base: Var, ctx: Option<Var>| match ctx {
            Some(c) => tape.add(base, c),
            None => Ok(base),
        };
        let slot_sum = residual(tape, slot, slot_ctx)?;
        let intent_sum = residual(tape, intent, intent_ctx)?;
        let slot_out = layer.attn_norm_slot.forward(tape, store, slot_sum, self.eps)?;
        let intent_out = layer.attn_norm_intent.forward(tape, store, intent_sum, self.eps)?;
        Ok((slot_out, intent_out, weights))
    }

    /// Window feed-forward fusion; one FFN output feeds both residuals.
    /// Returns `(Ĥ_I, Ĥ_S)`.
    #[allow(clippy::too_many_arguments)]
    pub fn ffn_fuse<T: Real>(
        &self,
        layer: &CoInteractiveLayer,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        intent: Var,
        slot: Var,
        mask: &[bool],
        reg: &mut Regularization<'_>,
    ) -> Result<(Var, Var)> {
        let joint = tape.concat_last(&[intent, slot])?;
        let prev = tape.shift_time(joint, -1, mask)?;
        let next = tape.shift_time(joint, 1, mask)?;
        let window = tape.concat_last(&[prev, joint, next])?;
        let inner = layer.ffn.inner.forward(tape, store, window)?;
        let inner = tape.relu(inner);
        let fused = layer.ffn.outer.forward(tape, store, inner)?;
        let fused = reg.apply(tape, fused)?;
        let intent_sum = tape.add(intent, fused)?;
        let slot_sum = tape.add(slot, fused)?;
        Ok((
            layer.ffn_norm_intent.forward(tape, store, intent_sum, self.eps)?,
            layer.ffn_norm_slot.forward(tape, store, slot_sum, self.eps)?,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn run_layer<T: Real>(
        &self,
        index: usize,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        intent_in: Var,
        slot_in: Var,
        mask: &[bool],
        reg: &mut Regularization<'_>,
    ) -> Result<LayerOutput> {
        let layer = &self.layers[index];
        let slot = if self.mode.slot_label_attention() {
            let w = tape.param(store, self.slot_labels);
            label_attention(tape, slot_in, w, mask)?.0
        } else {
            slot_in
        };
        let intent = if self.mode.intent_label_attention() {
            let w = tape.param(store, self.intent_labels);
            label_attention(tape, intent_in, w, mask)?.0
        } else {
            intent_in
        };
        let (slot, intent, attention) = self.co_attention(layer, tape, store, slot, intent, mask, reg)?;
        let (intent, slot) = self.ffn_fuse(layer, tape, store, intent, slot, mask, reg)?;
        Ok(LayerOutput { intent, slot, attention })
    }

    /// All layers; the first consumes the encoder output for both streams.
    pub fn run<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        mask: &[bool],
        reg: &mut Regularization<'_>,
    ) -> Result<Vec<LayerOutput>> {
        let mut outputs: Vec<LayerOutput> = Vec::with_capacity(self.layers.len());
        let (mut intent, mut slot) = (h, h);
        for l in 0..self.layers.len() {
            let out = self.run_layer(l, tape, store, intent, slot, mask, reg)?;
            intent = out.intent;
            slot = out.slot;
            outputs.push(out);
        }
        Ok(outputs)
    }
}
