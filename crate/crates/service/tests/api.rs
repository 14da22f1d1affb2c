use std::path::Path;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use defgen_core::corpus::{Dataset, DictEntry};
use defgen_core::model::{init_params, ModelConfig};
use defgen_core::tokenizer::train_bpe;
use defgen_core::training::{save_checkpoint, Checkpoint};
use defgen_core::Lang;
use defgen_service::config::{build_state, ServiceConfig};
use defgen_service::app;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Tokenizer, tiny en-en checkpoint, gazetteer and index under `dir`.
fn write_artifacts(dir: &Path) -> ServiceConfig {
    let entries = vec![
        DictEntry::new("cat", "the cat sat on the mat", "a small pet", Lang::en(), Lang::en()),
        DictEntry::new("dog", "a dog ran to the cat", "a loyal pet", Lang::en(), Lang::en()),
        DictEntry::new("Homer", "Homer wrote poems", "a poet", Lang::en(), Lang::en()),
    ];
    let lines: Vec<String> = entries
        .iter()
        .flat_map(|e| [e.word.clone(), e.context.clone(), e.definition.clone()])
        .collect();
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    let tok = train_bpe(&refs, 80, &[Lang::en(), Lang::zh()]).unwrap();
    tok.save(dir.join("tok.bpe")).unwrap();
    let params = init_params(&ModelConfig::tiny(tok.vocab_size()), 1).unwrap();
    save_checkpoint(&Checkpoint::new(params), dir.join("en.ckpt")).unwrap();
    std::fs::write(dir.join("gaz.tsv"), "Homer\tName\ta name used to refer to a particular person\n").unwrap();
    Dataset::new(entries).save(dir.join("index.jsonl")).unwrap();
    let text = r#"
        tokenizer = "tok.bpe"
        gazetteer = "gaz.tsv"
        corpus_index = "index.jsonl"
        feedback_store = "feedback.jsonl"
        [modes.en-en]
        checkpoint = "en.ckpt"
        beam = 2
        max_len = 8
        [modes.zh-en]
        checkpoint = "missing.ckpt"
    "#;
    ServiceConfig::from_toml(text, dir).unwrap()
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), 1 << 20).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn setup() -> (tempfile::TempDir, axum::Router) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_artifacts(dir.path());
    let app = app(build_state(&cfg).unwrap());
    (dir, app)
}

#[tokio::test]
async fn define_endpoint() {
    let (dir, app) = setup();
    let ckpt_before = std::fs::read(dir.path().join("en.ckpt")).unwrap();

    let body = r#"{"word":"cat","context":"the cat sat on the mat","mode":"en-en"}"#;
    let (status, v) = call(&app, "POST", "/api/define", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["source"], "generated");
    assert_eq!(v["mode"], "en-en");
    assert!(!v["definition"].as_str().unwrap().is_empty());
    assert_eq!(v["examples"], json!(["the cat sat on the mat", "a dog ran to the cat"]));
    let (_, again) = call(&app, "POST", "/api/define", Some(body)).await;
    assert_eq!(v, again);

    let (status, v) = call(&app, "POST", "/api/define", Some(r#"{"word":"Homer","context":"Homer wrote poems","mode":"zh-en"}"#)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["source"], "predefined");
    assert_eq!(v["model_id"], Value::Null);

    let (status, v) = call(&app, "POST", "/api/define", Some(r#"{"word":"bird","context":"the cat sat","mode":"en-en"}"#)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["code"], "word_not_in_context");

    let (status, _) = call(&app, "POST", "/api/define", Some(r#"{"word":"cat","mode":"en-en"}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/api/define", Some("{not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, v) = call(&app, "POST", "/api/define", Some(r#"{"word":"cat","context":"cat","mode":"fr-fr"}"#)).await;
    assert_eq!((status, v["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("unsupported_mode")));

    let (status, v) = call(&app, "POST", "/api/define", Some(r#"{"word":"猫","context":"一只猫","mode":"zh-en"}"#)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"]["code"], "model_unavailable");

    assert_eq!(std::fs::read(dir.path().join("en.ckpt")).unwrap(), ckpt_before);
}

#[tokio::test]
async fn feedback_and_suggestions() {
    let (_dir, app) = setup();
    let fb = json!({
        "word": "cat",
        "context": "the cat sat on the mat",
        "proposed_definition": "a small domesticated feline",
        "client_id": "browser-1"
    });
    let (status, ack) = call(&app, "POST", "/api/feedback", Some(&fb.to_string())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack["id"], 1);

    let (status, ack2) = call(&app, "POST", "/api/suggestion", Some(r#"{"message":"please add more examples"}"#)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack2["id"], 2);

    let (status, _) = call(&app, "POST", "/api/feedback", Some(r#"{"word":"cat"}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, v) = call(&app, "POST", "/api/feedback", Some(r#"{"word":" ","proposed_definition":"x"}"#)).await;
    assert_eq!((status, v["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid_record")));

    let (status, list) = call(&app, "GET", "/api/admin/feedback", None).await;
    assert_eq!(status, StatusCode::OK);
    let records = list["records"].as_array().unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0]["kind"], "feedback");
    assert_eq!(records[0]["word"], fb["word"]);
    assert_eq!(records[0]["context"], fb["context"]);
    assert_eq!(records[0]["text"], fb["proposed_definition"]);
    assert_eq!(records[0]["client_id"], fb["client_id"]);
    assert_eq!(records[0]["timestamp"], ack["timestamp"]);
    assert_eq!(records[1]["kind"], "suggestion");
    assert_eq!(records[1]["word"], Value::Null);
}

#[tokio::test]
async fn examples_and_health() {
    let (_dir, app) = setup();
    let (status, v) = call(&app, "GET", "/api/examples?word=cat&k=1", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["examples"], json!(["the cat sat on the mat"]));
    let (status, _) = call(&app, "GET", "/api/examples?k=1", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", "/api/examples?word=cat&k=lots", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, v) = call(&app, "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["modes"], json!({"en-en": true, "zh-zh": false, "zh-en": false}));
}
