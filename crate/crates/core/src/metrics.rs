//! Slot F1 over BIO chunks, intent accuracy and sentence-level frame accuracy.
//!
//! Chunking follows conlleval: an `I-x` that does not continue an open `x`
//! chunk starts a new one.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chunk {
    pub kind: String,
    /// Inclusive token span.
    pub start: usize,
    pub end: usize,
}

fn split_tag(tag: &str) -> Option<(char, &str)> {
    let (prefix, kind) = tag.split_once('-')?;
    match prefix {
        "B" => Some(('B', kind)),
        "I" => Some(('I', kind)),
        _ => None,
    }
}

pub fn extract_chunks<S: AsRef<str>>(tags: &[S]) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let parsed = split_tag(tag.as_ref());
        let continues = matches!((&open, parsed), (Some((k, _)), Some(('I', kind))) if k == kind);
        if continues {
            continue;
        }
        if let Some((kind, start)) = open.take() {
            chunks.push(Chunk { kind, start, end: i - 1 });
        }
        if let Some((_, kind)) = parsed {
            open = Some((kind.to_string(), i));
        }
    }
    if let Some((kind, start)) = open {
        chunks.push(Chunk {
            kind,
            start,
            end: tags.len() - 1,
        });
    }
    chunks
}

/// One sentence's intent and tag sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub intent: String,
    pub tags: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub gold_chunks: usize,
    pub predicted_chunks: usize,
    pub correct_chunks: usize,
    pub sentences: usize,
    pub correct_intents: usize,
    pub exact_slot_sentences: usize,
    pub correct_sentences: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub slot_f1: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub intent_accuracy: f64,
    pub overall_accuracy: f64,
    pub counts: EvalCounts,
}

/// `hits / total`, where an empty denominator is perfect only if the
/// opposite side is empty too.
fn ratio(hits: usize, total: usize, other_total: usize) -> f64 {
    if total == 0 {
        if other_total == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        hits as f64 / total as f64
    }
}

impl EvalReport {
    pub fn from_counts(counts: EvalCounts) -> Self {
        let p = ratio(counts.correct_chunks, counts.predicted_chunks, counts.gold_chunks);
        let r = ratio(counts.correct_chunks, counts.gold_chunks, counts.predicted_chunks);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let acc = |n: usize| {
            if counts.sentences == 0 {
                0.0
            } else {
                n as f64 / counts.sentences as f64
            }
        };
        Self {
            slot_f1: f1,
            slot_precision: p,
            slot_recall: r,
            intent_accuracy: acc(counts.correct_intents),
            overall_accuracy: acc(counts.correct_sentences),
            counts,
        }
    }

    /// `key<TAB>value` lines.
    pub fn to_kv(&self, prefix: &str) -> Vec<(String, String)> {
        let c = &self.counts;
        vec![
            (format!("{prefix}slot_f1"), format!("{:.6}", self.slot_f1)),
            (format!("{prefix}slot_precision"), format!("{:.6}", self.slot_precision)),
            (format!("{prefix}slot_recall"), format!("{:.6}", self.slot_recall)),
            (format!("{prefix}intent_accuracy"), format!("{:.6}", self.intent_accuracy)),
            (format!("{prefix}overall_accuracy"), format!("{:.6}", self.overall_accuracy)),
            (format!("{prefix}gold_chunks"), c.gold_chunks.to_string()),
            (format!("{prefix}predicted_chunks"), c.predicted_chunks.to_string()),
            (format!("{prefix}correct_chunks"), c.correct_chunks.to_string()),
            (format!("{prefix}sentences"), c.sentences.to_string()),
            (format!("{prefix}correct_sentences"), c.correct_sentences.to_string()),
        ]
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Slot F1 {:.2}  Intent Acc {:.2}  Overall Acc {:.2}  (P {:.2} R {:.2}, {} sentences)",
            100.0 * self.slot_f1,
            100.0 * self.intent_accuracy,
            100.0 * self.overall_accuracy,
            100.0 * self.slot_precision,
            100.0 * self.slot_recall,
            self.counts.sentences
        )
    }
}

pub fn evaluate(pred: &[Frame], gold: &[Frame]) -> Result<EvalReport> {
    if pred.len() != gold.len() {
        return Err(Error::Alignment {
            index: pred.len().min(gold.len()),
            msg: format!("{} predicted sentences vs {} gold", pred.len(), gold.len()),
        });
    }
    let mut c = EvalCounts {
        sentences: gold.len(),
        ..Default::default()
    };
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.tags.len() != g.tags.len() {
            return Err(Error::Alignment {
                index: i,
                msg: format!("{} predicted tags vs {} gold", p.tags.len(), g.tags.len()),
            });
        }
        let gold_chunks: HashSet<Chunk> = extract_chunks(&g.tags).into_iter().collect();
        let pred_chunks: HashSet<Chunk> = extract_chunks(&p.tags).into_iter().collect();
        c.gold_chunks += gold_chunks.len();
        c.predicted_chunks += pred_chunks.len();
        c.correct_chunks += gold_chunks.intersection(&pred_chunks).count();
        let intent_ok = p.intent == g.intent;
        let slots_ok = p.tags == g.tags;
        c.correct_intents += intent_ok as usize;
        c.exact_slot_sentences += slots_ok as usize;
        c.correct_sentences += (intent_ok && slots_ok) as usize;
    }
    Ok(EvalReport::from_counts(c))
}

/// One sentence in the prediction interchange format.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionRecord {
    pub tokens: Vec<String>,
    pub gold: Option<Frame>,
    pub pred: Frame,
}

pub const INTENT_PREFIX: &str = "# intent:";

/// Tab-separated `token [gold] pred` lines, an intent header per sentence and
/// blank-line separators.
pub fn write_predictions(mut w: impl Write, records: &[PredictionRecord]) -> std::io::Result<()> {
    for r in records {
        match &r.gold {
            Some(g) => writeln!(w, "{INTENT_PREFIX}\t{}\t{}", g.intent, r.pred.intent)?,
            None => writeln!(w, "{INTENT_PREFIX}\t{}", r.pred.intent)?,
        }
        for (i, tok) in r.tokens.iter().enumerate() {
            match &r.gold {
                Some(g) => writeln!(w, "{tok}\t{}\t{}", g.tags[i], r.pred.tags[i])?,
                None => writeln!(w, "{tok}\t{}", r.pred.tags[i])?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };

    let mut records = Vec::new();
    let mut current: Option<PredictionRecord> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            if let Some(r) = current.take() {
                records.push(r);
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix(INTENT_PREFIX) {
            if let Some(r) = current.take() {
                records.push(r);
            }
            let fields: Vec<&str> = rest.split('\t').filter(|s| !s.is_empty()).collect();
            let (gold, pred) = match fields.as_slice() {
                [g, p] => (Some(g.trim()), p.trim()),
                [p] => (None, p.trim()),
                _ => return Err(err(lineno, "intent line needs one or two labels")),
            };
            current = Some(PredictionRecord {
                tokens: Vec::new(),
                gold: gold.map(|g| Frame {
                    intent: g.to_string(),
                    tags: Vec::new(),
                }),
                pred: Frame {
                    intent: pred.to_string(),
                    tags: Vec::new(),
                },
            });
            continue;
        }
        let r = current.as_mut().ok_or_else(|| err(lineno, "token line before intent line"))?;
        let fields: Vec<&str> = line.split('\t').collect();
        match (fields.as_slice(), r.gold.as_mut()) {
            ([tok, g, p], Some(gold)) => {
                r.tokens.push(tok.to_string());
                gold.tags.push(g.to_string());
                r.pred.tags.push(p.to_string());
            }
            ([tok, p], None) => {
                r.tokens.push(tok.to_string());
                r.pred.tags.push(p.to_string());
            }
            _ => return Err(err(lineno, "column count does not match the intent line")),
        }
    }
    if let Some(r) = current {
        records.push(r);
    }
    Ok(records)
}

/// Scores a prediction file that carries gold labels.
pub fn score_predictions(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let records = read_predictions(path)?;
    let mut gold = Vec::with_capacity(records.len());
    let mut pred = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let g = r.gold.ok_or_else(|| Error::Alignment {
            index: i,
            msg: format!("{} has no gold column", path.display()),
        })?;
        gold.push(g);
        pred.push(r.pred);
    }
    evaluate(&pred, &gold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(intent: &str, tags: &str) -> Frame {
        Frame {
            intent: intent.into(),
            tags: tags.split(' ').map(String::from).collect(),
        }
    }

    fn chunk(kind: &str, start: usize, end: usize) -> Chunk {
        Chunk {
            kind: kind.into(),
            start,
            end,
        }
    }

    #[test]
    fn chunk_examples() {
        assert_eq!(extract_chunks(&["O", "B-movie-type", "I-movie-type"]), vec![chunk("movie-type", 1, 2)]);
        assert!(extract_chunks(&["O", "O"]).is_empty());
        assert_eq!(extract_chunks(&["I-a", "I-a", "O", "I-a"]), vec![chunk("a", 0, 1), chunk("a", 3, 3)]);
    }

    #[test]
    fn chunks_close_on_type_change_and_new_begin() {
        assert_eq!(
            extract_chunks(&["B-a", "I-b", "B-b", "B-b", "I-b"]),
            vec![chunk("a", 0, 0), chunk("b", 1, 1), chunk("b", 2, 2), chunk("b", 3, 4)]
        );
        // Dotted ATIS-style types keep everything after the first hyphen.
        assert_eq!(
            extract_chunks(&["B-fromloc.city_name", "I-fromloc.city_name"]),
            vec![chunk("fromloc.city_name", 0, 1)]
        );
    }

    #[test]
    fn identical_frames_score_one() {
        let g = vec![frame("a", "O B-x I-x"), frame("b", "B-y O O")];
        let r = evaluate(&g, &g).unwrap();
        assert_eq!(
            (r.slot_f1, r.slot_precision, r.slot_recall, r.intent_accuracy, r.overall_accuracy),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn one_wrong_tag_counts_for_intent_but_not_overall() {
        let g = vec![frame("a", "O B-x I-x")];
        let p = vec![frame("a", "O B-x O")];
        let r = evaluate(&p, &g).unwrap();
        assert_eq!(r.intent_accuracy, 1.0);
        assert_eq!(r.overall_accuracy, 0.0);
    }

    #[test]
    fn partial_chunk_match() {
        // gold: one chunk; pred: two chunks, one matching → P = 1/2, R = 1, F1 = 2/3
        let g = vec![frame("a", "B-x I-x O O")];
        let p = vec![frame("a", "B-x I-x O B-y")];
        let r = evaluate(&p, &g).unwrap();
        assert_eq!(r.slot_precision, 0.5);
        assert_eq!(r.slot_recall, 1.0);
        assert!((r.slot_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(r.overall_accuracy <= r.intent_accuracy);
    }

    #[test]
    fn misaligned_input_names_the_sentence() {
        let g = vec![frame("a", "O O"), frame("a", "O O")];
        let p = vec![frame("a", "O O"), frame("a", "O")];
        assert!(matches!(evaluate(&p, &g), Err(Error::Alignment { index: 1, .. })));
        assert!(matches!(evaluate(&p[..1], &g), Err(Error::Alignment { .. })));
    }

    #[test]
    fn prediction_file_round_trip() {
        let records = vec![
            PredictionRecord {
                tokens: vec!["watch".into(), "action".into(), "movie".into()],
                gold: Some(frame("WatchMovie", "O B-movie-type I-movie-type")),
                pred: frame("WatchMovie", "O B-movie-type O"),
            },
            PredictionRecord {
                tokens: vec!["hi".into()],
                gold: Some(frame("Greet", "O")),
                pred: frame("Other", "O"),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.tsv");
        let mut buf = Vec::new();
        write_predictions(&mut buf, &records).unwrap();
        fs::write(&path, &buf).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), records);

        let direct = evaluate(
            &records.iter().map(|r| r.pred.clone()).collect::<Vec<_>>(),
            &records.iter().map(|r| r.gold.clone().unwrap()).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(score_predictions(&path).unwrap(), direct);
    }

    #[test]
    fn gold_free_predictions_cannot_be_scored() {
        let records = vec![PredictionRecord {
            tokens: vec!["hi".into()],
            gold: None,
            pred: frame("Greet", "O"),
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.tsv");
        let mut buf = Vec::new();
        write_predictions(&mut buf, &records).unwrap();
        fs::write(&path, &buf).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), records);
        assert!(score_predictions(&path).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tag() -> impl Strategy<Value = String> {
            prop_oneof![
                Just("O".to_string()),
                "[ab]".prop_map(|k| format!("B-{k}")),
                "[ab]".prop_map(|k| format!("I-{k}")),
            ]
        }

        fn frames() -> impl Strategy<Value = Vec<Frame>> {
            prop::collection::vec(
                ("[pq]", prop::collection::vec(tag(), 1..8)).prop_map(|(intent, tags)| Frame { intent, tags }),
                1..6,
            )
        }

        fn corrupt(frames: &[Frame], seed: usize) -> Vec<Frame> {
            frames
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let mut f = f.clone();
                    if (i + seed).is_multiple_of(3) {
                        let j = (i + seed) % f.tags.len();
                        f.tags[j] = if f.tags[j] == "O" { "B-a".into() } else { "O".into() };
                    }
                    if (i + seed) % 4 == 1 {
                        f.intent.push('x');
                    }
                    f
                })
                .collect()
        }

        proptest! {
            #[test]
            fn self_evaluation_is_perfect(x in frames()) {
                let r = evaluate(&x, &x).unwrap();
                prop_assert_eq!(r.slot_f1, 1.0);
                prop_assert_eq!(r.intent_accuracy, 1.0);
                prop_assert_eq!(r.overall_accuracy, 1.0);
            }

            #[test]
            fn precision_and_recall_swap(x in frames(), seed in 0usize..12) {
                let y = corrupt(&x, seed);
                let a = evaluate(&x, &y).unwrap();
                let b = evaluate(&y, &x).unwrap();
                prop_assert_eq!(a.slot_precision, b.slot_recall);
                prop_assert_eq!(a.slot_recall, b.slot_precision);
                prop_assert!(a.overall_accuracy <= a.intent_accuracy);
            }

            #[test]
            fn sentence_order_does_not_matter(x in frames(), seed in 0usize..12) {
                let y = corrupt(&x, seed);
                let a = evaluate(&y, &x).unwrap();
                let mut xr = x.clone();
                let mut yr = y.clone();
                xr.reverse();
                yr.reverse();
                prop_assert_eq!(a, evaluate(&yr, &xr).unwrap());
            }
        }
    }
}
