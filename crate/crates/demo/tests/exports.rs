use coit_demo::{co_attention_json, crf_decode_json, score_chunks_json, AttentionOutput, CrfOutput, ScoreOutput};
use serde_json::json;

fn crf(input: serde_json::Value) -> CrfOutput {
    serde_json::from_str(&crf_decode_json(&input.to_string()).unwrap()).unwrap()
}

#[test]
fn crf_viterbi_and_partition_match_enumeration() {
    let emissions: [[f64; 3]; 2] = [[1.0, -0.5, 0.3], [0.2, 0.9, -1.0]];
    let trans = [[0.1, 0.4, -0.2], [-0.3, 0.0, 0.5], [0.2, -0.1, 0.3]];
    let (start, end) = ([0.5, -0.2, 0.0], [0.0, 0.3, -0.4]);
    let out = crf(json!({
        "labels": ["O", "B-x", "I-x"],
        "emissions": emissions, "transitions": trans, "start": start, "end": end,
    }));
    let mut scores = Vec::new();
    for a in 0..3 {
        for b in 0..3 {
            scores.push((start[a] + emissions[0][a] + trans[a][b] + emissions[1][b] + end[b], vec![a, b]));
        }
    }
    let z = scores.iter().map(|(s, _)| s.exp()).sum::<f64>().ln();
    let best = scores.iter().max_by(|x, y| x.0.total_cmp(&y.0)).unwrap();
    assert!((out.log_partition - z).abs() < 1e-12);
    assert_eq!(out.path, best.1);
    assert!((out.score - best.0).abs() < 1e-12);
    assert!((out.path_probability - (best.0 - z).exp()).abs() < 1e-12);
    for row in &out.marginals {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn crf_rejects_ragged_input() {
    let bad = json!({"labels": ["O", "B-x"], "emissions": [[0.0]], "transitions": [[0.0, 0.0], [0.0, 0.0]]});
    assert!(crf_decode_json(&bad.to_string()).unwrap_err().contains("2 scores"));
    assert!(crf_decode_json("not json").is_err());
}

#[test]
fn co_attention_rows_are_distributions_per_mode() {
    for (mode, paths) in [
        ("full", vec!["intent_to_slot", "slot_to_intent"]),
        ("self_attention", vec!["self"]),
        ("intent_to_slot_only", vec!["intent_to_slot"]),
    ] {
        let input = json!({
            "tokens": ["Show", "flights", "to", "Boston"],
            "slot_labels": ["O", "B-toloc.city_name"],
            "intent_labels": ["atis_flight", "atis_airfare"],
            "mode": mode, "layers": 2,
        });
        let out: AttentionOutput = serde_json::from_str(&co_attention_json(&input.to_string()).unwrap()).unwrap();
        assert_eq!(out.maps.len(), 2 * paths.len(), "{mode}");
        for m in &out.maps {
            assert!(paths.contains(&m.path.as_str()));
            assert_eq!(m.weights.len(), 4);
            for row in &m.weights {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(out.tags.len(), 4);
        assert!(["atis_flight", "atis_airfare"].contains(&out.intent.as_str()));
    }
}

#[test]
fn co_attention_rejects_unknown_mode() {
    let input = json!({"tokens": ["a"], "slot_labels": ["O"], "intent_labels": ["q"], "mode": "both_ways"});
    assert!(co_attention_json(&input.to_string()).unwrap_err().contains("both_ways"));
}

#[test]
fn scorer_reports_partial_match() {
    let input = json!({
        "gold": [["B-a", "O", "O"]],
        "pred": [["B-a", "O", "B-b"]],
        "gold_intents": ["x"], "pred_intents": ["x"],
    });
    let out: ScoreOutput = serde_json::from_str(&score_chunks_json(&input.to_string()).unwrap()).unwrap();
    assert_eq!(out.report.slot_precision, 0.5);
    assert_eq!(out.report.slot_recall, 1.0);
    assert!((out.report.slot_f1 - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(out.report.overall_accuracy, 0.0);
    assert_eq!(out.sentences[0].matched.len(), 1);
    assert_eq!(out.sentences[0].pred.len(), 2);
}

#[test]
fn scorer_checks_lengths() {
    let input = json!({"gold": [["O"]], "pred": []});
    assert!(score_chunks_json(&input.to_string()).is_err());
}
