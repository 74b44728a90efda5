//! Intent classifier, linear-chain CRF slot decoder and the joint loss.
//!
//! The CRF transition matrix has `S + 2` rows and columns; index `S` is the
//! virtual start state and `S + 1` the virtual end state. Row `S + 1` and
//! column `S` hold [`FORBIDDEN`] and are never read by any path score.

use crate::encoder::uniform;
use crate::error::{Error, Result};
use crate::numerics::kernels::log_sum_exp;
use crate::numerics::{ParamId, ParamStore, Real, SeededRng, Tape, Tensor, Var};

pub const FORBIDDEN: f64 = -1e4;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct IntentHead {
    /// W^I, shared with intent label attention.
    pub weight: ParamId,
    pub bias: ParamId,
    pub labels: usize,
}

impl IntentHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, weight: ParamId, rng: &mut SeededRng) -> Result<Self> {
        let shape = store.get(weight).value.shape().to_vec();
        let labels = shape[1];
        let bias = store.add("intent.bias", uniform(rng, &[labels], 1.0 / (shape[0] as f64).sqrt()), false)?;
        Ok(Self { weight, bias, labels })
    }

    /// `h[B×n×d]` → logits `[B×|I|]` from the masked max over time.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var, mask: &[bool]) -> Result<Var> {
        let pooled = tape.maxpool_time(h, mask)?;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(pooled, w, Some(b))
    }

    pub fn predict<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
        logits.data().chunks(logits.last_dim()).map(argmax).collect()
    }
}

#[derive(Clone, Debug)]
pub struct CrfHead {
    /// W^S, shared with slot label attention.
    pub weight: ParamId,
    pub bias: ParamId,
    pub transitions: ParamId,
    pub labels: usize,
}

impl CrfHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, weight: ParamId, rng: &mut SeededRng) -> Result<Self> {
        let shape = store.get(weight).value.shape().to_vec();
        let labels = shape[1];
        let bias = store.add("crf.bias", uniform(rng, &[labels], 1.0 / (shape[0] as f64).sqrt()), false)?;
        let transitions = store.add("crf.transitions", initial_transitions(labels), false)?;
        Ok(Self {
            weight,
            bias,
            transitions,
            labels,
        })
    }

    /// `h[B×n×d]` → emissions `[B×n×|S|]`.
    pub fn emissions<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(h, w, Some(b))
    }

    pub fn nll<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, emissions: Var, gold: &[usize], mask: &[bool]) -> Result<Var> {
        let t = tape.param(store, self.transitions);
        crf_nll(tape, emissions, t, gold, mask)
    }

    pub fn decode<T: Real>(&self, store: &ParamStore<T>, emissions: &Tensor<T>, mask: &[bool]) -> Result<Vec<Vec<usize>>> {
        crf_viterbi(emissions, &store.get(self.transitions).value, mask)
    }
}

/// Zero transitions with the unreachable entries pinned.
pub fn initial_transitions<T: Real>(labels: usize) -> Tensor<T> {
    let k = labels + 2;
    let mut t = Tensor::zeros(vec![k, k]);
    let d = t.data_mut();
    for i in 0..k {
        d[i * k + labels] = T::of(FORBIDDEN);
        d[(labels + 1) * k + i] = T::of(FORBIDDEN);
    }
    t
}

/// One sequence: `emissions[n×S]` row-major with `transitions[(S+2)×(S+2)]`.
#[derive(Clone, Copy, Debug)]
pub struct Chain<'a, T> {
    pub emissions: &'a [T],
    pub transitions: &'a [T],
    pub labels: usize,
}

impl<'a, T: Real> Chain<'a, T> {
    pub fn new(emissions: &'a [T], transitions: &'a [T], labels: usize) -> Result<Self> {
        let k = labels + 2;
        if labels == 0 || !emissions.len().is_multiple_of(labels) || transitions.len() != k * k {
            return Err(Error::shape("crf", format!("inconsistent sizes for {labels} labels")));
        }
        Ok(Self {
            emissions,
            transitions,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.emissions.len() / self.labels
    }

    pub fn is_empty(&self) -> bool {
        self.emissions.is_empty()
    }

    fn trans(&self, from: usize, to: usize) -> T {
        self.transitions[from * (self.labels + 2) + to]
    }

    fn emit(&self, t: usize, y: usize) -> T {
        self.emissions[t * self.labels + y]
    }

    fn start(&self) -> usize {
        self.labels
    }

    fn end(&self) -> usize {
        self.labels + 1
    }

    pub fn path_score(&self, path: &[usize]) -> T {
        let mut prev = self.start();
        let mut s = T::zero();
        for (t, &y) in path.iter().enumerate() {
            s += self.trans(prev, y) + self.emit(t, y);
            prev = y;
        }
        s + self.trans(prev, self.end())
    }

    /// Forward log-messages `alpha[n×S]`.
    fn alphas(&self) -> Vec<T> {
        let (n, s) = (self.len(), self.labels);
        let mut alpha = vec![T::zero(); n * s];
        for y in 0..s {
            alpha[y] = self.trans(self.start(), y) + self.emit(0, y);
        }
        for t in 1..n {
            for y in 0..s {
                let lse = log_sum_exp((0..s).map(|p| alpha[(t - 1) * s + p] + self.trans(p, y)));
                alpha[t * s + y] = lse + self.emit(t, y);
            }
        }
        alpha
    }

    fn betas(&self) -> Vec<T> {
        let (n, s) = (self.len(), self.labels);
        let mut beta = vec![T::zero(); n * s];
        for y in 0..s {
            beta[(n - 1) * s + y] = self.trans(y, self.end());
        }
        for t in (0..n - 1).rev() {
            for y in 0..s {
                beta[t * s + y] = log_sum_exp((0..s).map(|q| self.trans(y, q) + self.emit(t + 1, q) + beta[(t + 1) * s + q]));
            }
        }
        beta
    }

    pub fn log_partition(&self) -> T {
        let (n, s) = (self.len(), self.labels);
        let alpha = self.alphas();
        log_sum_exp((0..s).map(|y| alpha[(n - 1) * s + y] + self.trans(y, self.end())))
    }

    /// `(log Z, node marginals [n×S], expected transition counts [(S+2)²])`.
    pub fn marginals(&self) -> (T, Vec<T>, Vec<T>) {
        let (n, s, k) = (self.len(), self.labels, self.labels + 2);
        let alpha = self.alphas();
        let beta = self.betas();
        let log_z = log_sum_exp((0..s).map(|y| alpha[(n - 1) * s + y] + self.trans(y, self.end())));
        let node: Vec<T> = alpha.iter().zip(&beta).map(|(&a, &b)| (a + b - log_z).exp()).collect();
        let mut pair = vec![T::zero(); k * k];
        for y in 0..s {
            pair[self.start() * k + y] = node[y];
            pair[y * k + self.end()] = node[(n - 1) * s + y];
        }
        for t in 1..n {
            for p in 0..s {
                for q in 0..s {
                    let lp = alpha[(t - 1) * s + p] + self.trans(p, q) + self.emit(t, q) + beta[t * s + q] - log_z;
                    pair[p * k + q] += lp.exp();
                }
            }
        }
        (log_z, node, pair)
    }

    /// Highest-scoring path and its score; backpointer ties go to the lowest label.
    pub fn viterbi(&self) -> (Vec<usize>, T) {
        let (n, s) = (self.len(), self.labels);
        let mut delta: Vec<T> = (0..s).map(|y| self.trans(self.start(), y) + self.emit(0, y)).collect();
        let mut back = vec![0usize; n * s];
        for t in 1..n {
            let mut next = vec![T::zero(); s];
            for y in 0..s {
                let cand: Vec<T> = (0..s).map(|p| delta[p] + self.trans(p, y)).collect();
                let p = argmax(&cand);
                back[t * s + y] = p;
                next[y] = cand[p] + self.emit(t, y);
            }
            delta = next;
        }
        let fin: Vec<T> = (0..s).map(|y| delta[y] + self.trans(y, self.end())).collect();
        let mut y = argmax(&fin);
        let score = fin[y];
        let mut path = vec![0; n];
        for t in (0..n).rev() {
            path[t] = y;
            y = back[t * s + y];
        }
        (path, score)
    }
}

fn emission_dims<T: Real>(emissions: &Tensor<T>, transitions: &Tensor<T>, mask: &[bool]) -> Result<(usize, usize, usize)> {
    let [b, n, s] = *emissions.shape() else {
        return Err(Error::shape("crf", format!("expected B×n×S emissions, got {:?}", emissions.shape())));
    };
    if transitions.shape() != [s + 2, s + 2] {
        return Err(Error::Dimension {
            op: "crf transitions",
            lhs: emissions.shape().to_vec(),
            rhs: transitions.shape().to_vec(),
        });
    }
    if mask.len() != b * n {
        return Err(Error::shape("crf", "mask must be B×n"));
    }
    Ok((b, n, s))
}

/// Number of real tokens in row `r`; real tokens must form a prefix.
fn row_length(mask: &[bool], r: usize, n: usize) -> Result<usize> {
    let row = &mask[r * n..(r + 1) * n];
    let len = row.iter().take_while(|&&m| m).count();
    if len == 0 || row[len..].iter().any(|&m| m) {
        return Err(Error::Contract(format!("row {r} needs a non-empty prefix of real tokens")));
    }
    Ok(len)
}

/// Summed negative log-likelihood of the gold paths; padded positions are ignored.
pub fn crf_nll<T: Real>(tape: &mut Tape<T>, emissions: Var, transitions: Var, gold: &[usize], mask: &[bool]) -> Result<Var> {
    let (b, n, s) = emission_dims(tape.value(emissions), tape.value(transitions), mask)?;
    if gold.len() != b * n {
        return Err(Error::shape("crf_nll", "gold must be B×n"));
    }
    let k = s + 2;
    let e = tape.value(emissions).data();
    let tr = tape.value(transitions).data();
    let mut total = T::zero();
    let mut d_emit = vec![T::zero(); b * n * s];
    let mut d_trans = vec![T::zero(); k * k];
    for r in 0..b {
        let len = row_length(mask, r, n)?;
        let path = &gold[r * n..r * n + len];
        if let Some(&bad) = path.iter().find(|&&y| y >= s) {
            return Err(Error::Index {
                what: "slot labels",
                index: bad,
                size: s,
            });
        }
        let chain = Chain::new(&e[r * n * s..(r * n + len) * s], tr, s)?;
        let (log_z, node, pair) = chain.marginals();
        total += log_z - chain.path_score(path);
        let base = r * n * s;
        for (i, m) in node.iter().enumerate() {
            d_emit[base + i] += *m;
        }
        for (i, m) in pair.iter().enumerate() {
            d_trans[i] += *m;
        }
        let mut prev = s;
        for (t, &y) in path.iter().enumerate() {
            d_emit[base + t * s + y] -= T::one();
            d_trans[prev * k + y] -= T::one();
            prev = y;
        }
        d_trans[prev * k + s + 1] -= T::one();
    }
    tape.scalar_fn(total, &[emissions, transitions], vec![d_emit, d_trans])
}

/// Best path per batch row, truncated to the row's real length.
pub fn crf_viterbi<T: Real>(emissions: &Tensor<T>, transitions: &Tensor<T>, mask: &[bool]) -> Result<Vec<Vec<usize>>> {
    let (b, n, s) = emission_dims(emissions, transitions, mask)?;
    let e = emissions.data();
    (0..b)
        .map(|r| {
            let len = row_length(mask, r, n)?;
            Ok(Chain::new(&e[r * n * s..(r * n + len) * s], transitions.data(), s)?.viterbi().0)
        })
        .collect()
}

/// `(Σ intent cross-entropy + Σ CRF NLL) / B`.
pub fn joint_loss<T: Real>(
    tape: &mut Tape<T>,
    intent_logits: Var,
    intent_gold: &[usize],
    emissions: Var,
    transitions: Var,
    slot_gold: &[usize],
    mask: &[bool],
) -> Result<Var> {
    let b = tape.shape(intent_logits)[0];
    let ce = tape.cross_entropy_sum(intent_logits, intent_gold)?;
    let nll = crf_nll(tape, emissions, transitions, slot_gold, mask)?;
    let sum = tape.add(ce, nll)?;
    Ok(tape.scale(sum, 1.0 / b as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_inputs;
    use crate::numerics::seeded_rng;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    fn random_transitions(rng: &mut SeededRng, s: usize) -> Tensor<f64> {
        let mut tr = initial_transitions::<f64>(s);
        let k = s + 2;
        for from in 0..k {
            for to in 0..k {
                if from != s + 1 && to != s {
                    tr.data_mut()[from * k + to] = rng.gen_range(-2.0..2.0);
                }
            }
        }
        tr
    }

    /// Every label sequence of length `n` over `s` labels.
    fn all_paths(n: usize, s: usize) -> Vec<Vec<usize>> {
        (0..s.pow(n as u32))
            .map(|mut code| {
                (0..n)
                    .map(|_| {
                        let y = code % s;
                        code /= s;
                        y
                    })
                    .collect()
            })
            .collect()
    }

    fn nll_of(e: &Tensor<f64>, tr: &Tensor<f64>, gold: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let (ev, tv) = (tape.constant(e.clone()), tape.constant(tr.clone()));
        let mask = vec![true; gold.len()];
        let l = crf_nll(&mut tape, ev, tv, gold, &mask).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn single_label_single_token_has_zero_loss() {
        let e = t(&[1, 1, 1], &[0.7]);
        let tr = initial_transitions(1);
        assert!(nll_of(&e, &tr, &[0]).abs() < 1e-12);
    }

    #[test]
    fn uniform_model_has_log_s_per_token() {
        let e = Tensor::zeros(vec![1, 3, 4]);
        let tr = initial_transitions(4);
        assert!((nll_of(&e, &tr, &[0, 3, 1]) - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_partition_by_enumeration() {
        let e = [1.0, -0.5, 0.25, 2.0];
        let mut tr = initial_transitions::<f64>(2);
        let vals = [(0, 0, 0.3), (0, 1, -1.0), (1, 0, 0.8), (1, 1, 0.1), (2, 0, 0.5), (2, 1, -0.2), (0, 3, 0.4), (1, 3, -0.6)];
        for (a, b, v) in vals {
            tr.data_mut()[a * 4 + b] = v;
        }
        let chain = Chain::new(&e, tr.data(), 2).unwrap();
        let mut scores = Vec::new();
        for y0 in 0..2 {
            for y1 in 0..2 {
                let tv = |a: usize, b: usize| tr.data()[a * 4 + b];
                scores.push(tv(2, y0) + e[y0] + tv(y0, y1) + e[2 + y1] + tv(y1, 3));
            }
        }
        let brute = scores.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((chain.log_partition() - brute).abs() < 1e-6);
    }

    #[test]
    fn enumeration_oracle_on_random_instances() {
        let mut rng = seeded_rng(21);
        for _ in 0..100 {
            let n = rng.gen_range(1..=4);
            let s = rng.gen_range(1..=4);
            let e: Vec<f64> = (0..n * s).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let tr = random_transitions(&mut rng, s);
            let chain = Chain::new(&e, tr.data(), s).unwrap();
            let paths = all_paths(n, s);
            let scores: Vec<f64> = paths.iter().map(|p| chain.path_score(p)).collect();
            let brute = log_sum_exp(scores.iter().copied());
            assert!((chain.log_partition() - brute).abs() < 1e-6);
            let (best, score) = chain.viterbi();
            assert_eq!(best, paths[argmax(&scores)]);
            assert!((score - chain.path_score(&best)).abs() < 1e-9);

            let et = t(&[1, n, s], &e);
            let mass: f64 = paths.iter().map(|p| (-nll_of(&et, &tr, p)).exp()).sum();
            assert!((mass - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn viterbi_beats_gold_and_is_shift_invariant() {
        let mut rng = seeded_rng(22);
        for _ in 0..50 {
            let (n, s) = (rng.gen_range(1..=5), rng.gen_range(2..=4));
            let mut e: Vec<f64> = (0..n * s).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let tr = random_transitions(&mut rng, s);
            let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..s)).collect();
            let chain = Chain::new(&e, tr.data(), s).unwrap();
            let (best, score) = chain.viterbi();
            assert!(score >= chain.path_score(&gold));
            let p = nll_of(&t(&[1, n, s], &e), &tr, &gold);

            let step = rng.gen_range(0..n);
            e[step * s..(step + 1) * s].iter_mut().for_each(|x| *x += 1.7);
            let shifted = Chain::new(&e, tr.data(), s).unwrap();
            assert_eq!(shifted.viterbi().0, best);
            let q = nll_of(&t(&[1, n, s], &e), &tr, &gold);
            assert!(((-p).exp() - (-q).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn single_token_viterbi_uses_boundaries() {
        let mut tr = initial_transitions::<f64>(3);
        tr.data_mut()[3 * 5] = 2.0; // start → 0
        tr.data_mut()[5 + 4] = 0.5; // 1 → end
        let e = [0.0, 1.0, 1.4];
        assert_eq!(Chain::new(&e, tr.data(), 3).unwrap().viterbi().0, vec![0]);
    }

    #[test]
    fn forbidden_bigram_is_avoided() {
        let mut tr = initial_transitions::<f64>(3);
        tr.data_mut()[5 + 2] = FORBIDDEN;
        let e = [0.0, 5.0, 0.0, 0.0, 0.0, 5.0];
        let path = Chain::new(&e, tr.data(), 3).unwrap().viterbi().0;
        assert_ne!(path, vec![1, 2]);
        assert!(path == vec![1, 0] || path == vec![0, 2] || path == vec![2, 2] || path == vec![1, 1]);
    }

    #[test]
    fn padded_rows_decode_their_prefix() {
        let mut rng = seeded_rng(23);
        let tr = random_transitions(&mut rng, 3);
        let e: Vec<f64> = (0..2 * 4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = [true, true, true, true, true, true, false, false];
        let paths = crf_viterbi(&t(&[2, 4, 3], &e), &tr, &mask).unwrap();
        assert_eq!(paths[1].len(), 2);
        let alone = Chain::new(&e[12..18], tr.data(), 3).unwrap().viterbi().0;
        assert_eq!(paths[1], alone);
    }

    #[test]
    fn intent_logits_by_hand() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("intent_labels", t(&[2, 2], &[1.0, 2.0, -1.0, 0.5]), true).unwrap();
        let head = IntentHead::new(&mut store, w, &mut seeded_rng(0)).unwrap();
        store.get_mut(head.bias).value = t(&[2], &[0.1, -0.1]);
        let mut tape = Tape::new();
        // max over time of [[3, -1], [1, 2]] is c = [3, 2]
        let h = tape.constant(t(&[1, 2, 2], &[3.0, -1.0, 1.0, 2.0]));
        let l = head.logits(&mut tape, &store, h, &[true, true]).unwrap();
        assert_eq!(tape.value(l).data(), &[3.0 - 2.0 + 0.1, 6.0 + 1.0 - 0.1]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.3, 0.3]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }

    #[test]
    fn joint_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 7]));
        let e = tape.constant(Tensor::zeros(vec![1, 1, 1]));
        let tr = tape.constant(initial_transitions(1));
        let l = joint_loss(&mut tape, logits, &[3], e, tr, &[0], &[true]).unwrap();
        assert!((tape.value(l).item() - 7f64.ln()).abs() < 1e-12);

        let logits = tape.constant(t(&[1, 2], &[100.0, -100.0]));
        let l = joint_loss(&mut tape, logits, &[0], e, tr, &[0], &[true]).unwrap();
        assert!(tape.value(l).item() < 1e-12);
    }

    #[test]
    fn batch_loss_is_the_mean_of_single_losses() {
        let mut rng = seeded_rng(24);
        let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tr = random_transitions(&mut rng, 2);
        let single = |r: usize, len: usize| {
            let mut tape = Tape::new();
            let lv = tape.constant(t(&[1, 3], &logits[r * 3..r * 3 + 3]));
            let ev = tape.constant(t(&[1, len, 2], &e[r * 6..r * 6 + len * 2]));
            let tv = tape.constant(tr.clone());
            let gold = [1, 0, 1];
            let l = joint_loss(&mut tape, lv, &[r], ev, tv, &gold[..len], &vec![true; len]).unwrap();
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let lv = tape.constant(t(&[2, 3], &logits));
        let ev = tape.constant(t(&[2, 3, 2], &e));
        let tv = tape.constant(tr.clone());
        let l = joint_loss(&mut tape, lv, &[0, 1], ev, tv, &[1, 0, 1, 1, 0, 0], &[true, true, true, true, true, false]).unwrap();
        assert!((tape.value(l).item() - (single(0, 3) + single(1, 2)) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_gradients_match_finite_differences() {
        let mut rng = seeded_rng(25);
        let logits = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let e = Tensor::new(vec![2, 3, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let tr = random_transitions(&mut rng, 4);
        let mask = [true, true, true, true, false, false];
        let report = check_inputs("joint_loss", &[logits, e, tr], |tape, v| {
            joint_loss(tape, v[0], &[2, 0], v[1], v[2], &[1, 3, 0, 2, 0, 0], &mask)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.groups);
    }

    #[test]
    fn bad_masks_and_labels_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::zeros(vec![1, 2, 2]));
        let tr = tape.constant(initial_transitions(2));
        assert!(matches!(crf_nll(&mut tape, e, tr, &[0, 0], &[false, true]), Err(Error::Contract(_))));
        assert!(matches!(crf_nll(&mut tape, e, tr, &[0, 5], &[true, true]), Err(Error::Index { .. })));
        let tr3 = tape.constant(initial_transitions(3));
        assert!(matches!(crf_nll(&mut tape, e, tr3, &[0, 0], &[true, true]), Err(Error::Dimension { .. })));
    }
}
