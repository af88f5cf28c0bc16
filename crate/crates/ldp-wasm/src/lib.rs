//! Browser bindings for the demo page in `www/`.
//!
//! Every export takes and returns JSON strings so the page needs no glue
//! beyond `JSON.parse`. Errors surface as thrown strings.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use ldp_core::fixtures;
use ldp_core::identity::validate_card;
use ldp_core::payload::{encode_a2a, encode_mode0, encode_mode1};
use ldp_core::routing::{route, RoutingPolicy, TaskSpec};
use ldp_core::{DelegateIdentityCard, SemanticFrame};

fn to_js(result: Result<Value, String>) -> Result<String, JsValue> {
    result.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

pub fn card_report(card_json: &str) -> Result<Value, String> {
    let card = DelegateIdentityCard::from_json(card_json).map_err(|e| format!("not a card: {e}"))?;
    let report = validate_card(&card);
    Ok(json!({
        "delegate_id": card.delegate_id,
        "valid": report.is_valid(),
        "violations": report.violations,
    }))
}

pub fn encoding_sizes(text: &str, frame_json: &str) -> Result<Value, String> {
    let frame: SemanticFrame = serde_json::from_str(frame_json).map_err(|e| format!("frame: {e}"))?;
    let framed = encode_mode1(&frame).map_err(|e| e.to_string())?;
    let t = encode_mode0(text).token_estimate();
    let f = framed.token_estimate();
    let a = encode_a2a(text).token_estimate();
    Ok(json!({
        "text_tokens": t,
        "frame_tokens": f,
        "a2a_tokens": a,
        "frame_vs_text": f as f64 / t as f64,
        "frame_vs_a2a": f as f64 / a as f64,
        "frame_bytes": framed.as_str(),
    }))
}

/// Routes one task on the bundled pool under every policy.
pub fn route_all(task_json: &str, seed: u64) -> Result<Value, String> {
    let task: TaskSpec = serde_json::from_str(task_json).map_err(|e| format!("task: {e}"))?;
    let pool = fixtures::default_pool();
    let decisions = RoutingPolicy::ALL
        .into_iter()
        .map(|p| match route(&pool, &task, p, seed) {
            Ok(d) => serde_json::to_value(d).expect("decision serializes"),
            Err(e) => json!({ "policy": p.as_str(), "error": e.to_string() }),
        })
        .collect::<Vec<_>>();
    Ok(Value::Array(decisions))
}

#[wasm_bindgen(js_name = validateCard)]
pub fn validate_card_js(card_json: &str) -> Result<String, JsValue> {
    to_js(card_report(card_json))
}

#[wasm_bindgen(js_name = compareEncodings)]
pub fn compare_encodings_js(text: &str, frame_json: &str) -> Result<String, JsValue> {
    to_js(encoding_sizes(text, frame_json))
}

#[wasm_bindgen(js_name = routeTask)]
pub fn route_task_js(task_json: &str, seed: u32) -> Result<String, JsValue> {
    to_js(route_all(task_json, seed as u64))
}

/// Starting values for the page's inputs.
#[wasm_bindgen(js_name = samples)]
pub fn samples_js() -> String {
    let entry = fixtures::sentiment_entry();
    json!({
        "card": serde_json::from_str::<Value>(fixtures::REFERENCE_CARD_JSON).expect("bundled card parses"),
        "text": entry.text,
        "frame": entry.frame,
        "task": fixtures::rq1_tasks()[0],
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_card_is_valid() {
        let v = card_report(fixtures::REFERENCE_CARD_JSON).unwrap();
        assert_eq!(v["valid"], true);
        assert!(card_report("{}").is_err());
    }

    #[test]
    fn sentiment_sizes() {
        let e = fixtures::sentiment_entry();
        let v = encoding_sizes(&e.text, &serde_json::to_string(&e.frame).unwrap()).unwrap();
        assert_eq!((v["text_tokens"].as_u64(), v["frame_tokens"].as_u64(), v["a2a_tokens"].as_u64()), (Some(58), Some(32), Some(65)));
    }

    #[test]
    fn routes_under_each_policy() {
        let task = serde_json::to_string(&fixtures::rq1_tasks()[0]).unwrap();
        let v = route_all(&task, 1).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 3);
        assert_eq!(v[0]["chosen"], fixtures::LLAMA_3B);
    }

    #[test]
    fn samples_parse() {
        let v: Value = serde_json::from_str(&samples_js()).unwrap();
        assert!(v["card"].is_object() && v["task"].is_object());
    }
}
