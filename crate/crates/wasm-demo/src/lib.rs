//! Browser bindings for three interactive views: fertility marginals,
//! expected permutations, and grammar-constrained Viterbi decoding.
//! Each takes and returns JSON strings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use structrans::data::Vocab;
use structrans::fertility::{self, FertilityTable};
use structrans::grammar::{viterbi_cyk, Grammar};
use structrans::reordering::{self, Orientation, SpanScores};
use structrans::Array;

fn parse_matrix(text: &str) -> Result<Vec<Vec<f64>>, String> {
    serde_json::from_str(text).map_err(|e| format!("expected a JSON array of rows: {e}"))
}

fn rows_of(a: &Array, cols: usize) -> Vec<Vec<f64>> {
    a.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Row-normalizes non-negative weights into a fertility table and returns
/// its length distribution plus the marginals for `length`.
pub fn fertility_json(weights: &str, length: usize) -> Result<String, String> {
    let rows = parse_matrix(weights)?;
    let normalized = rows
        .iter()
        .map(|r| {
            let total: f64 = r.iter().sum();
            if r.iter().any(|&x| !(x >= 0.0)) || total <= 0.0 {
                return Err("each row needs non-negative weights with a positive sum".to_string());
            }
            Ok(r.iter().map(|x| x / total).collect())
        })
        .collect::<Result<Vec<Vec<f64>>, String>>()?;
    let table = FertilityTable::from_rows(&normalized).map_err(|e| e.to_string())?;
    let dist = fertility::length_distribution(&table);
    let d = table.max_fertility();
    let mut out = json!({
        "probs": normalized,
        "length_distribution": dist,
    });
    match fertility::marginal_fertility(&table, length) {
        Ok(m) => {
            // per input: an l × d block
            let blocks: Vec<Vec<Vec<f64>>> = m
                .tensor
                .data()
                .chunks(length * d)
                .map(|b| b.chunks(d).map(<[f64]>::to_vec).collect())
                .collect();
            out["marginals"] = json!(blocks);
            out["expected_fertilities"] = json!(m.expected_fertilities());
        }
        Err(e) => out["error"] = Value::String(e.to_string()),
    }
    Ok(out.to_string())
}

/// Expected permutation for `length` positions with span scores
/// `straight = jitter·u`, `inverted = bias + jitter·u'` (`u` uniform on
/// [-1, 1], drawn from `seed`).
pub fn permutation_json(length: usize, bias: f64, jitter: f64, seed: u64) -> Result<String, String> {
    if !(1..=40).contains(&length) {
        return Err("length must lie in 1..=40".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = SpanScores::from_fn(length, |_, _, o| {
        let noise = jitter * rng.gen_range(-1.0..=1.0);
        match o {
            Orientation::Straight => noise,
            Orientation::Inverted => bias + noise,
        }
    });
    let chart = reordering::inside(&scores);
    let r = reordering::expected_permutation(&scores);
    Ok(json!({
        "matrix": rows_of(&r.matrix, length),
        "log_partition": chart.root(),
    })
    .to_string())
}

/// Best string of the grammar under per-position distributions whose
/// columns follow `terminals`.
pub fn viterbi_json(grammar: &str, terminals: &str, distributions: &str) -> Result<String, String> {
    let grammar = Grammar::parse(grammar).map_err(|e| e.to_string())?;
    let terms: Vec<String> = serde_json::from_str(terminals).map_err(|e| format!("terminals: {e}"))?;
    let vocab = Vocab::from(terms.clone());
    if vocab.len() != terms.iter().collect::<std::collections::HashSet<_>>().len() {
        return Err("terminals must be distinct".into());
    }
    let compiled = grammar.compile(&vocab).map_err(|e| e.to_string())?;
    let rows = parse_matrix(distributions)?;
    if rows.iter().any(|r| r.len() != terms.len()) {
        return Err(format!("every row needs {} probabilities", terms.len()));
    }
    let dist = Array::from_rows(&rows).map_err(|e| e.to_string())?;
    let (tokens, log_prob) = viterbi_cyk(&dist, &compiled).map_err(|e| e.to_string())?;
    Ok(json!({
        "tokens": vocab.decode(&tokens),
        "log_prob": log_prob,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn fertility(weights: &str, length: usize) -> Result<String, JsValue> {
    fertility_json(weights, length).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn permutation(length: usize, bias: f64, jitter: f64, seed: u32) -> Result<String, JsValue> {
    permutation_json(length, bias, jitter, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn viterbi(grammar: &str, terminals: &str, distributions: &str) -> Result<String, JsValue> {
    viterbi_json(grammar, terminals, distributions).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fertility_rows_are_normalized() {
        let v: Value = serde_json::from_str(&fertility_json("[[1,1],[2,2]]", 1).unwrap()).unwrap();
        assert_eq!(v["length_distribution"], json!([0.25, 0.5, 0.25]));
        assert_eq!(v["marginals"], json!([[[0.5]], [[0.5]]]));
        let v: Value = serde_json::from_str(&fertility_json("[[1,1]]", 3).unwrap()).unwrap();
        assert!(v["error"].is_string());
        assert!(fertility_json("[[0,0]]", 1).is_err());
    }

    #[test]
    fn strong_inversion_reverses() {
        let v: Value = serde_json::from_str(&permutation_json(4, 30.0, 0.0, 1).unwrap()).unwrap();
        // all-inverted trees all give the reversal
        for i in 0..4 {
            assert!((v["matrix"][i][3 - i].as_f64().unwrap() - 1.0).abs() < 1e-9);
        }
        assert!(permutation_json(0, 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn viterbi_respects_grammar() {
        let g = "S -> A B\nA -> 'a'\nB -> 'b'";
        let out = viterbi_json(g, r#"["a","b"]"#, "[[0.1,0.9],[0.9,0.1]]").unwrap();
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["tokens"], json!(["a", "b"]));
        assert!(viterbi_json(g, r#"["a","b"]"#, "[[0.5,0.5]]").is_err());
        assert!(viterbi_json(g, r#"["a","a"]"#, "[[0.5,0.5]]").is_err());
    }
}
