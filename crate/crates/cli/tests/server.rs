use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use iospe::personalization::EmbeddingTable;
use iospe::pipeline::{extract_pool, train_models, Models, PipelineConfig, Snapshot, SnapshotStore};
use iospe::synthetic::product_corpus;
use iospe_cli::server::{router, AppState};

fn models() -> &'static (Models, Vec<iospe::pipeline::SellingPoint>, Vec<iospe::personalization::CustomerProfile>) {
    static CELL: OnceLock<(Models, Vec<iospe::pipeline::SellingPoint>, Vec<iospe::personalization::CustomerProfile>)> =
        OnceLock::new();
    CELL.get_or_init(|| {
        let c = product_corpus(20, 8);
        let config = PipelineConfig::default();
        let (models, _) = train_models(&c.products, &c.human_selling_points, &c.pairs, &config).unwrap();
        let pool = extract_pool(&c.products, &models, &config).unwrap();
        (models, pool, c.profiles)
    })
}

fn state(with_models: bool) -> Arc<AppState> {
    let (m, pool, profiles) = models();
    let snapshot = Snapshot::new(pool.clone(), profiles.clone(), EmbeddingTable::from_screener(&m.fine));
    AppState::new(
        SnapshotStore::new(snapshot),
        with_models.then(|| m.clone()),
        PipelineConfig::default(),
    )
}

async fn call(state: Arc<AppState>, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = router(state).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

#[tokio::test]
async fn pool_lookup() {
    let (status, body) = call(state(false), "GET", "/v1/pool/sku-0001", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(!body.as_array().unwrap().is_empty());
    let (status, _) = call(state(false), "GET", "/v1/pool/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn assignment() {
    let body = json!({"customer_id": "cust-001", "sku_id": "sku-0002"}).to_string();
    let (status, v) = call(state(false), "POST", "/v1/assign", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert!(v["selling_point_id"].as_str().unwrap().starts_with("sku-0002:"));
    assert!(v["segment"].is_string());

    let body = json!({"customer_id": "cust-001", "sku_id": "missing"}).to_string();
    assert_eq!(call(state(false), "POST", "/v1/assign", Some(body)).await.0, StatusCode::NOT_FOUND);

    let body = json!({"customer_id": "", "sku_id": "sku-0002"}).to_string();
    assert_eq!(call(state(false), "POST", "/v1/assign", Some(body)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let body = json!({"customer": "x"}).to_string();
    assert_eq!(call(state(false), "POST", "/v1/assign", Some(body)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(
        call(state(false), "POST", "/v1/assign", Some("{not json".into())).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
}

#[tokio::test]
async fn extraction() {
    let product = json!({
        "sku_id": "new-1",
        "title": "Acme kettle",
        "description": "The acme kettle ships in a plain cardboard box. Fast heating, quiet motor.",
    })
    .to_string();
    let (status, v) = call(state(true), "POST", "/v1/extract", Some(product.clone())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let points = v.as_array().unwrap();
    assert!(!points.is_empty());
    assert!(points.iter().all(|p| p["sku_id"] == "new-1" && p["score"].as_f64().unwrap() >= 0.6));

    assert_eq!(call(state(false), "POST", "/v1/extract", Some(product)).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let bad = json!({"sku_id": "  ", "description": "x"}).to_string();
    assert_eq!(call(state(true), "POST", "/v1/extract", Some(bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn logs_feed_metrics() {
    let st = state(false);
    let ev = |position: &str, event: &str| {
        json!({"ts": "2024-02-01T00:00:00Z", "position": position, "sku_id": "sku-0001",
               "selling_point_id": "sku-0001:abc", "event": event, "recall_source_tag": "desc"})
    };
    let batch = json!([ev("base", "exposure"), ev("base", "exposure"), ev("base", "click"), ev("ctrl", "exposure")]);
    let (status, v) = call(st.clone(), "POST", "/v1/logs", Some(batch.to_string())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["accepted"], 4);

    let (status, v) = call(st.clone(), "GET", "/v1/metrics", None).await;
    assert_eq!(status, StatusCode::OK);
    let a = &v.as_array().unwrap()[0];
    assert_eq!((a["base_exp_pv"].as_u64(), a["base_clk_pv"].as_u64(), a["ctrl_exp_pv"].as_u64()), (Some(2), Some(1), Some(1)));
    assert!(a["relative_increase"].is_null());

    let bad = json!([{"ts": "2024-02-01T00:00:00Z", "position": "side", "sku_id": "a", "selling_point_id": "b", "event": "click"}]);
    assert_eq!(call(st.clone(), "POST", "/v1/logs", Some(bad.to_string())).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let empty_id = json!([{"ts": "2024-02-01T00:00:00Z", "position": "base", "sku_id": "", "selling_point_id": "b", "event": "click"}]);
    assert_eq!(call(st, "POST", "/v1/logs", Some(empty_id.to_string())).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn snapshot_swap_is_visible() {
    let st = state(false);
    let (m, _, profiles) = models();
    st.store.swap(Snapshot::new(vec![], profiles.clone(), EmbeddingTable::from_screener(&m.fine)));
    assert_eq!(call(st, "GET", "/v1/pool/sku-0001", None).await.0, StatusCode::NOT_FOUND);
}
