//! Word embeddings followed by a bidirectional LSTM.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Real, SeededRng, Tape, Tensor, Var};

pub(crate) fn uniform<T: Real>(rng: &mut SeededRng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// One LSTM direction. Gate layout along the last axis: input, forget,
/// candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        bound: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            w_input: store.add(format!("{prefix}.w_input"), uniform(rng, &[input, 4 * hidden], bound), true)?,
            w_hidden: store.add(format!("{prefix}.w_hidden"), uniform(rng, &[hidden, 4 * hidden], bound), true)?,
            bias: store.add(format!("{prefix}.bias"), uniform(rng, &[4 * hidden], bound), false)?,
            hidden,
        })
    }

    /// Runs over `x[B×n×e]` in the given time order. Padded steps keep the
    /// previous state and emit zeros, so a reversed pass starts fresh at the
    /// last real token of each row.
    fn run<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: &[bool],
        reverse: bool,
    ) -> Result<Var> {
        let (b, n) = (tape.shape(x)[0], tape.shape(x)[1]);
        let h = self.hidden;
        let w_in = tape.param(store, self.w_input);
        let w_hid = tape.param(store, self.w_hidden);
        let bias = tape.param(store, self.bias);
        let projected = tape.linear(x, w_in, Some(bias))?;

        let zeros = tape.constant(Tensor::zeros(vec![b, h]));
        let (mut h_prev, mut c_prev) = (zeros, zeros);
        let mut outputs = vec![zeros; n];
        let steps: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in steps {
            let step_mask: Vec<bool> = (0..b).map(|r| mask[r * n + t]).collect();
            let xt = tape.select_time(projected, t)?;
            let rec = tape.matmul(h_prev, w_hid)?;
            let gates = tape.add(xt, rec)?;
            let i = tape.slice_last(gates, 0, h)?;
            let f = tape.slice_last(gates, h, h)?;
            let g = tape.slice_last(gates, 2 * h, h)?;
            let o = tape.slice_last(gates, 3 * h, h)?;
            let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
            let keep = tape.mul(f, c_prev)?;
            let write = tape.mul(i, g)?;
            let c = tape.add(keep, write)?;
            let c_act = tape.tanh(c);
            let h_new = tape.mul(o, c_act)?;
            c_prev = tape.select_rows(&step_mask, c, c_prev)?;
            h_prev = tape.select_rows(&step_mask, h_new, h_prev)?;
            outputs[t] = tape.select_rows(&step_mask, h_new, zeros)?;
        }
        tape.stack_time(&outputs)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embedding: ParamId,
    pub forward: LstmCell,
    pub backward: LstmCell,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
}

impl Encoder {
    /// `pretrained`, when given, is the full `|V|×e` initial table.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        embedding_dim: usize,
        hidden_dim: usize,
        pretrained: Option<&Tensor<f32>>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if !hidden_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("hidden_dim {hidden_dim} must be even")));
        }
        let table: Tensor<T> = match pretrained {
            Some(t) if t.shape() == [vocab_size, embedding_dim] => t.cast(),
            Some(t) => {
                return Err(Error::Dimension {
                    op: "pretrained embeddings",
                    lhs: vec![vocab_size, embedding_dim],
                    rhs: t.shape().to_vec(),
                })
            }
            None => {
                let mut t = uniform(rng, &[vocab_size, embedding_dim], 0.1);
                t.data_mut()[..embedding_dim].iter_mut().for_each(|x| *x = T::zero());
                t
            }
        };
        let embedding = store.add("embedding.weight", table, true)?;
        let half = hidden_dim / 2;
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let forward = LstmCell::new(store, "encoder.forward", embedding_dim, half, bound, rng)?;
        let backward = LstmCell::new(store, "encoder.backward", embedding_dim, half, bound, rng)?;
        Ok(Self {
            embedding,
            forward,
            backward,
            vocab_size,
            embedding_dim,
            hidden_dim,
        })
    }

    /// `token_ids` and `mask` are row-major `B×n`. Returns `H[B×n×d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        token_ids: &[usize],
        batch: usize,
        len: usize,
        mask: &[bool],
        embedding_dropout: f64,
        rng: Option<&mut SeededRng>,
    ) -> Result<Var> {
        if len == 0 {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        if mask.len() != batch * len {
            return Err(Error::shape("encode", "mask must be B×n"));
        }
        let table = tape.param(store, self.embedding);
        let emb = tape.embedding(table, token_ids, &[batch, len])?;
        let emb = tape.dropout(emb, embedding_dropout, rng)?;
        let fw = self.forward.run(tape, store, emb, mask, false)?;
        let bw = self.backward.run(tape, store, emb, mask, true)?;
        tape.concat_last(&[fw, bw])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn build(vocab: usize, e: usize, d: usize) -> (ParamStore<f64>, Encoder) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, vocab, e, d, None, &mut seeded_rng(7)).unwrap();
        (store, enc)
    }

    fn run(store: &ParamStore<f64>, enc: &Encoder, ids: &[usize], b: usize, n: usize, mask: &[bool]) -> Tensor<f64> {
        let mut tape = Tape::new();
        let h = enc.encode(&mut tape, store, ids, b, n, mask, 0.0, None).unwrap();
        tape.value(h).clone()
    }

    #[test]
    fn single_token_shape() {
        let (store, enc) = build(10, 300, 128);
        let h = run(&store, &enc, &[3], 1, 1, &[true]);
        assert_eq!(h.shape(), &[1, 1, 128]);
    }

    #[test]
    fn padding_leaves_real_positions_unchanged() {
        let (store, enc) = build(10, 12, 8);
        let a = run(&store, &enc, &[2, 5, 7], 1, 3, &[true; 3]);
        let b = run(&store, &enc, &[2, 5, 7, 0], 1, 4, &[true, true, true, false]);
        for i in 0..3 * 8 {
            let r = (i / 8) * 8 + i % 8;
            assert!((a.data()[i] - b.data()[r]).abs() < 1e-5);
        }
        assert!(b.data()[24..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let (mut store, enc) = build(10, 12, 8);
        for name in [
            "encoder.forward.w_input",
            "encoder.forward.w_hidden",
            "encoder.forward.bias",
            "encoder.backward.w_input",
            "encoder.backward.w_hidden",
            "encoder.backward.bias",
        ] {
            store.by_name_mut(name).unwrap().value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let h = run(&store, &enc, &[2, 5, 7, 1], 2, 2, &[true; 4]);
        assert!(h.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reversal_swaps_directions_with_shared_cells() {
        let (mut store, enc) = build(10, 5, 6);
        for part in ["w_input", "w_hidden", "bias"] {
            let v = store.by_name(&format!("encoder.forward.{part}")).unwrap().value.clone();
            store.by_name_mut(&format!("encoder.backward.{part}")).unwrap().value = v;
        }
        let ids = [4, 2, 9, 3];
        let rev: Vec<usize> = ids.iter().rev().copied().collect();
        let a = run(&store, &enc, &ids, 1, 4, &[true; 4]);
        let b = run(&store, &enc, &rev, 1, 4, &[true; 4]);
        let half = 3;
        for t in 0..4 {
            let at = &a.data()[t * 6..(t + 1) * 6];
            let bt = &b.data()[(3 - t) * 6..(4 - t) * 6];
            assert_eq!(&at[..half], &bt[half..]);
            assert_eq!(&at[half..], &bt[..half]);
        }
    }

    #[test]
    fn out_of_vocabulary_id_is_an_error() {
        let (store, enc) = build(4, 3, 4);
        let mut tape = Tape::new();
        assert!(matches!(
            enc.encode(&mut tape, &store, &[4], 1, 1, &[true], 0.0, None),
            Err(Error::Index { index: 4, .. })
        ));
    }

    #[test]
    fn pretrained_rows_seed_the_table() {
        let mut store = ParamStore::<f64>::new();
        let table = Tensor::<f32>::full(vec![3, 2], 0.25);
        Encoder::new(&mut store, 3, 2, 4, Some(&table), &mut seeded_rng(0)).unwrap();
        assert!(store.by_name("embedding.weight").unwrap().value.data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (mut store, enc) = build(6, 4, 8);
        let ids = [1, 4, 5, 0];
        let mask = [true, true, true, false];
        let report = crate::gradcheck::check_params(&mut store, |tape, s| {
            let h = enc.encode(tape, s, &ids, 2, 2, &mask, 0.0, None)?;
            let w = tape.constant(Tensor::from_f64(vec![2, 2, 8], &(0..32).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>())?);
            let p = tape.mul(h, w)?;
            Ok(tape.sum(p))
        })
        .unwrap();
        for g in &report.groups {
            assert!(g.passed(), "{}: {:e}", g.name, g.max_rel_error);
        }
    }
}
