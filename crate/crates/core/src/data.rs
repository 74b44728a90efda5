//! Corpus ingestion, vocabularies, pretrained vectors and batching.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, SeededRng, Tensor};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

pub const TOKENS_FILE: &str = "seq.in";
pub const TAGS_FILE: &str = "seq.out";
pub const INTENT_FILE: &str = "label";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub slots: Vec<String>,
    pub intent: String,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

/// Reads `seq.in`, `seq.out` and `label` from `dir`.
pub fn load_split(dir: impl AsRef<Path>, lowercase: bool) -> Result<Vec<Utterance>> {
    let dir = dir.as_ref();
    let tokens_path = dir.join(TOKENS_FILE);
    let tags_path = dir.join(TAGS_FILE);
    let intent_path = dir.join(INTENT_FILE);
    let tokens = read_lines(&tokens_path)?;
    let tags = read_lines(&tags_path)?;
    let intents = read_lines(&intent_path)?;

    // A trailing newline is not an extra record.
    let trim = |mut v: Vec<String>| {
        while v.last().is_some_and(String::is_empty) {
            v.pop();
        }
        v
    };
    let (tokens, tags, intents) = (trim(tokens), trim(tags), trim(intents));

    if tokens.len() != tags.len() || tokens.len() != intents.len() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            line: tokens.len().min(tags.len()).min(intents.len()) + 1,
            msg: format!(
                "line counts differ: {TOKENS_FILE}={}, {TAGS_FILE}={}, {INTENT_FILE}={}",
                tokens.len(),
                tags.len(),
                intents.len()
            ),
        });
    }

    let mut out = Vec::with_capacity(tokens.len());
    for (i, ((tok_line, tag_line), intent)) in tokens.iter().zip(&tags).zip(&intents).enumerate() {
        let toks: Vec<String> = tok_line
            .split_whitespace()
            .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
            .collect();
        let slots: Vec<String> = tag_line.split_whitespace().map(str::to_string).collect();
        if toks.is_empty() {
            return Err(Error::Format {
                path: tokens_path.clone(),
                line: i + 1,
                msg: "empty utterance".into(),
            });
        }
        if toks.len() != slots.len() {
            return Err(Error::Format {
                path: tags_path.clone(),
                line: i + 1,
                msg: format!("{} tokens but {} tags", toks.len(), slots.len()),
            });
        }
        if intent.is_empty() {
            return Err(Error::Format {
                path: intent_path.clone(),
                line: i + 1,
                msg: "missing intent label".into(),
            });
        }
        out.push(Utterance {
            tokens: toks,
            slots,
            intent: intent.clone(),
        });
    }
    Ok(out)
}

/// Token lines of `dir/seq.in` alone, for unlabeled prediction.
pub fn load_tokens(dir: impl AsRef<Path>, lowercase: bool) -> Result<Vec<Vec<String>>> {
    let path = dir.as_ref().join(TOKENS_FILE);
    let mut lines = read_lines(&path)?;
    while lines.last().is_some_and(String::is_empty) {
        lines.pop();
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let toks: Vec<String> = l
                .split_whitespace()
                .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
                .collect();
            if toks.is_empty() {
                return Err(Error::Format {
                    path: path.clone(),
                    line: i + 1,
                    msg: "empty utterance".into(),
                });
            }
            Ok(toks)
        })
        .collect()
}

/// Writes a split in the same three-file layout `load_split` reads.
pub fn write_split(dir: impl AsRef<Path>, data: &[Utterance]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, f: &dyn Fn(&Utterance) -> String| -> Result<()> {
        let path = dir.join(name);
        let mut body = String::new();
        for u in data {
            body.push_str(&f(u));
            body.push('\n');
        }
        fs::write(&path, body).map_err(|e| Error::io(path, e))
    };
    write(TOKENS_FILE, &|u| u.tokens.join(" "))?;
    write(TAGS_FILE, &|u| u.slots.join(" "))?;
    write(INTENT_FILE, &|u| u.intent.clone())
}

/// Dense, stable string ↔ id map.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelMap {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelMap {
    fn from(items: Vec<String>) -> Self {
        let index = items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { items, index }
    }
}

impl From<LabelMap> for Vec<String> {
    fn from(m: LabelMap) -> Self {
        m.items
    }
}

impl LabelMap {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn id(&self, s: &str) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }
}

/// Frequency-descending, then lexicographic.
fn ranked<'a>(items: impl Iterator<Item = &'a str>, min_freq: usize) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in items {
        *counts.entry(s).or_default() += 1;
    }
    let mut v: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v.into_iter().map(|(s, _)| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub words: LabelMap,
    pub slots: LabelMap,
    pub intents: LabelMap,
}

impl Vocab {
    pub fn build(train: &[Utterance], min_freq: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Contract("cannot build a vocabulary from an empty split".into()));
        }
        let mut words = vec![PAD.to_string(), UNK.to_string()];
        words.extend(
            ranked(train.iter().flat_map(|u| u.tokens.iter().map(String::as_str)), min_freq.max(1))
                .into_iter()
                .filter(|w| w != PAD && w != UNK),
        );
        let slots = ranked(train.iter().flat_map(|u| u.slots.iter().map(String::as_str)), 1);
        let intents = ranked(train.iter().map(|u| u.intent.as_str()), 1);
        Ok(Self {
            words: words.into(),
            slots: slots.into(),
            intents: intents.into(),
        })
    }

    /// Appends slot and intent labels that appear in `data` but not yet in
    /// the vocabulary. Existing ids are unchanged.
    pub fn extend_labels(&mut self, data: &[Utterance]) {
        let mut slots = self.slots.items().to_vec();
        slots.extend(
            ranked(data.iter().flat_map(|u| u.slots.iter().map(String::as_str)), 1)
                .into_iter()
                .filter(|s| self.slots.id(s).is_none()),
        );
        let mut intents = self.intents.items().to_vec();
        intents.extend(
            ranked(data.iter().map(|u| u.intent.as_str()), 1)
                .into_iter()
                .filter(|s| self.intents.id(s).is_none()),
        );
        self.slots = slots.into();
        self.intents = intents.into();
    }

    pub fn word_id(&self, w: &str) -> usize {
        self.words.id(w).unwrap_or(UNK_ID)
    }

    pub fn slot_id(&self, tag: &str) -> Result<usize> {
        self.slots.id(tag).ok_or_else(|| Error::UnknownLabel {
            kind: "slot",
            label: tag.to_string(),
        })
    }

    pub fn intent_id(&self, intent: &str) -> Result<usize> {
        self.intents.id(intent).ok_or_else(|| Error::UnknownLabel {
            kind: "intent",
            label: intent.to_string(),
        })
    }

    pub fn encode(&self, u: &Utterance) -> Result<Encoded> {
        Ok(Encoded {
            tokens: u.tokens.iter().map(|t| self.word_id(t)).collect(),
            slots: u.slots.iter().map(|s| self.slot_id(s)).collect::<Result<_>>()?,
            intent: self.intent_id(&u.intent)?,
        })
    }

    pub fn encode_all(&self, data: &[Utterance]) -> Result<Vec<Encoded>> {
        data.iter().map(|u| self.encode(u)).collect()
    }
}

/// An utterance mapped to ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub tokens: Vec<usize>,
    pub slots: Vec<usize>,
    pub intent: usize,
}

/// Row-major padded batch; `mask[b * max_len + i]` is true iff `i < lengths[b]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub max_len: usize,
    pub token_ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub slot_ids: Vec<usize>,
    pub intent_ids: Vec<usize>,
    pub lengths: Vec<usize>,
    /// Position of each row in the input the batch was built from.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_encoded(items: &[&Encoded], indices: Vec<usize>) -> Self {
        let size = items.len();
        let max_len = items.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let mut batch = Batch {
            size,
            max_len,
            token_ids: vec![PAD_ID; size * max_len],
            mask: vec![false; size * max_len],
            slot_ids: vec![0; size * max_len],
            intent_ids: Vec::with_capacity(size),
            lengths: Vec::with_capacity(size),
            indices,
        };
        for (b, e) in items.iter().enumerate() {
            let row = b * max_len;
            for (i, (&tok, &slot)) in e.tokens.iter().zip(&e.slots).enumerate() {
                batch.token_ids[row + i] = tok;
                batch.slot_ids[row + i] = slot;
                batch.mask[row + i] = true;
            }
            batch.intent_ids.push(e.intent);
            batch.lengths.push(e.tokens.len());
        }
        batch
    }

    /// Same rows padded to `max_len` (≥ the current width).
    pub fn padded_to(&self, max_len: usize) -> Self {
        assert!(max_len >= self.max_len);
        let mut out = self.clone();
        out.max_len = max_len;
        out.token_ids = vec![PAD_ID; self.size * max_len];
        out.mask = vec![false; self.size * max_len];
        out.slot_ids = vec![0; self.size * max_len];
        for b in 0..self.size {
            for i in 0..self.lengths[b] {
                out.token_ids[b * max_len + i] = self.token_ids[b * self.max_len + i];
                out.slot_ids[b * max_len + i] = self.slot_ids[b * self.max_len + i];
                out.mask[b * max_len + i] = true;
            }
        }
        out
    }

    /// Real-position slot ids of row `b`.
    pub fn slots(&self, b: usize) -> &[usize] {
        &self.slot_ids[b * self.max_len..b * self.max_len + self.lengths[b]]
    }

    pub fn tokens(&self, b: usize) -> &[usize] {
        &self.token_ids[b * self.max_len..b * self.max_len + self.lengths[b]]
    }
}

/// Splits `data` into batches of `batch_size`, optionally shuffled with a
/// seeded permutation. Each batch pads only to its own longest sequence.
pub fn make_batches(data: &[Encoded], batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut seeded_rng(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let items: Vec<&Encoded> = idx.iter().map(|&i| &data[i]).collect();
            Batch::from_encoded(&items, idx.to_vec())
        })
        .collect())
}

/// Embedding table initialized from pretrained vectors where available.
#[derive(Clone, Debug)]
pub struct PretrainedInit {
    /// `|V| × e`, one row per vocabulary word.
    pub table: Tensor<f32>,
    pub covered: usize,
}

impl PretrainedInit {
    /// Fraction of non-reserved vocabulary words found in the file.
    pub fn coverage(&self) -> f64 {
        let total = self.table.shape()[0].saturating_sub(2);
        if total == 0 {
            0.0
        } else {
            self.covered as f64 / total as f64
        }
    }
}

/// Uniform(-0.1, 0.1) rows with a zero padding row.
pub fn random_embeddings(vocab_size: usize, dim: usize, rng: &mut SeededRng) -> Tensor<f32> {
    let mut data: Vec<f32> = (0..vocab_size * dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let pad = dim.min(data.len());
    data[..pad].iter_mut().for_each(|x| *x = 0.0);
    Tensor::new(vec![vocab_size, dim], data).expect("shape")
}

/// Streams a whitespace-separated text vector file, copying rows for
/// vocabulary words. A leading `count dim` header line is skipped.
pub fn load_pretrained_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocab,
    dim: usize,
    rng: &mut SeededRng,
) -> Result<PretrainedInit> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table = random_embeddings(vocab.words.len(), dim, rng);
    let mut seen = vec![false; vocab.words.len()];
    let mut covered = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        if i == 0 && rest.len() == 1 && word.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            continue;
        }
        if rest.len() != dim {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {dim} values, found {}", rest.len()),
            });
        }
        let Some(id) = vocab.words.id(word) else { continue };
        if id == PAD_ID || id == UNK_ID || seen[id] {
            continue;
        }
        let row = &mut table.data_mut()[id * dim..(id + 1) * dim];
        for (dst, s) in row.iter_mut().zip(&rest) {
            *dst = s.parse::<f32>().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("`{s}` is not a number"),
            })?;
        }
        seen[id] = true;
        covered += 1;
    }
    Ok(PretrainedInit { table, covered })
}

/// `<root>/{train,dev,test}`; `valid` is accepted in place of `dev`.
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn split(&self, name: &str) -> PathBuf {
        let dir = self.root.join(name);
        if name == "dev" && !dir.exists() && self.root.join("valid").exists() {
            return self.root.join("valid");
        }
        dir
    }

    pub fn has_split(&self, name: &str) -> bool {
        self.split(name).join(TOKENS_FILE).exists()
    }
}

pub fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(tokens: &str, slots: &str, intent: &str) -> Utterance {
        Utterance {
            tokens: tokens.split(' ').map(String::from).collect(),
            slots: slots.split(' ').map(String::from).collect(),
            intent: intent.into(),
        }
    }

    fn write_raw(dir: &Path, tokens: &str, tags: &str, labels: &str) {
        fs::write(dir.join(TOKENS_FILE), tokens).unwrap();
        fs::write(dir.join(TAGS_FILE), tags).unwrap();
        fs::write(dir.join(INTENT_FILE), labels).unwrap();
    }

    #[test]
    fn loads_the_watch_movie_example() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), "watch action movie\n", "O B-movie-type I-movie-type\n", "WatchMovie\n");
        let data = load_split(dir.path(), true).unwrap();
        assert_eq!(data, vec![utt("watch action movie", "O B-movie-type I-movie-type", "WatchMovie")]);
    }

    #[test]
    fn lowercasing_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), "Show Flights\n", "O O\n", "flight\n");
        assert_eq!(load_split(dir.path(), true).unwrap()[0].tokens, ["show", "flights"]);
        assert_eq!(load_split(dir.path(), false).unwrap()[0].tokens, ["Show", "Flights"]);
    }

    #[test]
    fn empty_files_give_empty_split() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), "", "", "");
        assert!(load_split(dir.path(), true).unwrap().is_empty());
    }

    #[test]
    fn tag_count_mismatch_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), "a b\nx y z\n", "O O\nO O\n", "i\nj\n");
        let err = load_split(dir.path(), true).unwrap_err();
        match err {
            Error::Format { line, ref path, .. } => {
                assert_eq!(line, 2);
                assert!(path.ends_with(TAGS_FILE));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn line_count_mismatch_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), "a\nb\n", "O\n", "i\nj\n");
        assert!(matches!(load_split(dir.path(), true), Err(Error::Format { .. })));

        fs::remove_file(dir.path().join(TAGS_FILE)).unwrap();
        let msg = load_split(dir.path(), true).unwrap_err().to_string();
        assert!(msg.contains(TAGS_FILE), "{msg}");
    }

    #[test]
    fn split_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let data = vec![utt("a b", "O B-x", "i"), utt("c", "I-y", "j")];
        write_split(dir.path(), &data).unwrap();
        let text = fs::read_to_string(dir.path().join(TOKENS_FILE)).unwrap();
        assert_eq!(text, "a b\nc\n");
        assert_eq!(load_split(dir.path(), false).unwrap(), data);
    }

    #[test]
    fn vocab_reserves_pad_and_unk() {
        let v = Vocab::build(&[utt("a b a", "O O O", "i")], 1).unwrap();
        assert_eq!(v.words.items(), [PAD, UNK, "a", "b"]);
        assert_eq!(v.word_id("zzz"), UNK_ID);
        assert_eq!(v.slots.items(), ["O"]);
        for id in 0..v.words.len() {
            assert_eq!(v.words.id(v.words.label(id).unwrap()), Some(id));
        }
    }

    #[test]
    fn vocab_ordering_is_frequency_then_lexicographic() {
        let data = vec![utt("b c a c", "O B-x O B-y", "q"), utt("a", "B-y", "p")];
        let v = Vocab::build(&data, 1).unwrap();
        assert_eq!(v.words.items(), [PAD, UNK, "a", "c", "b"]);
        assert_eq!(v.slots.items(), ["B-y", "O", "B-x"]);
        assert_eq!(v.intents.items(), ["p", "q"]);
        assert_eq!(Vocab::build(&data, 1).unwrap(), v);
        assert_eq!(Vocab::build(&data, 2).unwrap().words.items(), [PAD, UNK, "a", "c"]);
    }

    #[test]
    fn label_extension_keeps_existing_ids() {
        let mut v = Vocab::build(&[utt("a", "B-x", "i")], 1).unwrap();
        v.extend_labels(&[utt("b c", "B-y O", "j"), utt("d", "B-x", "i")]);
        assert_eq!(v.slots.items(), ["B-x", "B-y", "O"]);
        assert_eq!(v.intents.items(), ["i", "j"]);
        assert_eq!(v.word_id("b"), UNK_ID);
    }

    #[test]
    fn unknown_labels_are_errors() {
        let v = Vocab::build(&[utt("a", "O", "i")], 1).unwrap();
        assert!(matches!(v.encode(&utt("a", "B-new", "i")), Err(Error::UnknownLabel { kind: "slot", .. })));
        assert!(matches!(v.encode(&utt("a", "O", "other")), Err(Error::UnknownLabel { kind: "intent", .. })));
        assert_eq!(v.encode(&utt("dev-only", "O", "i")).unwrap().tokens, vec![UNK_ID]);
    }

    #[test]
    fn batches_have_expected_sizes_and_padding() {
        let data: Vec<Encoded> = (1..=5)
            .map(|n| Encoded {
                tokens: vec![2; n],
                slots: vec![0; n],
                intent: 0,
            })
            .collect();
        let batches = make_batches(&data, 2, None).unwrap();
        assert_eq!(batches.iter().map(|b| b.size).collect::<Vec<_>>(), [2, 2, 1]);
        assert_eq!(batches.iter().map(|b| b.max_len).collect::<Vec<_>>(), [2, 4, 5]);
        for b in &batches {
            for r in 0..b.size {
                for i in 0..b.max_len {
                    assert_eq!(b.mask[r * b.max_len + i], i < b.lengths[r]);
                }
            }
        }
        let s1 = make_batches(&data, 2, Some(9)).unwrap();
        let s2 = make_batches(&data, 2, Some(9)).unwrap();
        assert_eq!(s1, s2);
        assert!(make_batches(&data, 0, None).is_err());
    }

    #[test]
    fn batch_decodes_back_to_the_corpus() {
        let data = vec![utt("show me flights", "O O O", "flight"), utt("to boston", "O B-toloc", "flight")];
        let v = Vocab::build(&data, 1).unwrap();
        let enc = v.encode_all(&data).unwrap();
        for batch in make_batches(&enc, 2, Some(1)).unwrap() {
            for r in 0..batch.size {
                let u = &data[batch.indices[r]];
                let toks: Vec<&str> = batch.tokens(r).iter().map(|&i| v.words.label(i).unwrap()).collect();
                let tags: Vec<&str> = batch.slots(r).iter().map(|&i| v.slots.label(i).unwrap()).collect();
                assert_eq!(toks, u.tokens);
                assert_eq!(tags, u.slots);
                assert_eq!(v.intents.label(batch.intent_ids[r]).unwrap(), u.intent);
            }
        }
    }

    #[test]
    fn pretrained_rows_are_copied() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        fs::write(&path, "2 3\nflights 0.5 -1 2\nunrelated 1 1 1\n").unwrap();
        let v = Vocab::build(&[utt("show flights", "O O", "i")], 1).unwrap();
        let init = load_pretrained_embeddings(&path, &v, 3, &mut seeded_rng(0)).unwrap();
        let id = v.word_id("flights");
        assert_eq!(&init.table.data()[id * 3..id * 3 + 3], &[0.5, -1.0, 2.0]);
        let show = v.word_id("show");
        assert!(init.table.data()[show * 3..show * 3 + 3].iter().all(|x| x.abs() <= 0.1));
        assert_eq!(init.covered, 1);
        assert!((init.coverage() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn malformed_vector_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        let mut body = String::from("ok");
        body.push_str(&" 0.1".repeat(300));
        body.push_str("\nbad");
        body.push_str(&" 0.1".repeat(299));
        body.push('\n');
        fs::write(&path, body).unwrap();
        let v = Vocab::build(&[utt("ok", "O", "i")], 1).unwrap();
        match load_pretrained_embeddings(&path, &v, 300, &mut seeded_rng(0)) {
            Err(Error::Format { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
