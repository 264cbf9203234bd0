use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = e2t_service::router().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

#[tokio::test]
async fn health_and_listing() {
    let req = Request::get("/health").body(Body::empty()).unwrap();
    let resp = e2t_service::router().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let req = Request::get("/v1/commands").body(Body::empty()).unwrap();
    let resp = e2t_service::router().oneshot(req).await.unwrap();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(v["commands"].as_array().unwrap().len(), 5);
}

#[tokio::test]
async fn gen_data_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let (status, v) = call(
        "/v1/gen-data",
        json!({"config": {"data": {"synthetic": {"n_subjects": 2, "n_sentences": 3}}},
               "overrides": {"out_dir": dir.path(), "seed": 4}}),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["pairs"], json!(6));
    assert!(dir.path().join("data/manifest.jsonl").is_file());
}

#[tokio::test]
async fn errors_carry_kind_and_exit_code() {
    let (status, v) = call("/v1/pretrain", json!({"config": {"preset": "huge"}})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["kind"], json!("config"));
    assert_eq!(v["exit_code"], json!(2));

    let (status, v) = call("/v1/train-everything", json!({})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["kind"], json!("config"));
}

#[tokio::test]
async fn spawned_server_binds_an_ephemeral_port() {
    let (addr, handle) = e2t_service::spawn("127.0.0.1:0".parse().unwrap()).await.unwrap();
    assert_ne!(addr.port(), 0);
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream.write_all(b"GET /health HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n").await.unwrap();
    let mut buf = String::new();
    stream.read_to_string(&mut buf).await.unwrap();
    assert!(buf.starts_with("HTTP/1.1 200"), "{buf}");
    assert!(buf.contains("\"ok\""));
    handle.abort();
}
