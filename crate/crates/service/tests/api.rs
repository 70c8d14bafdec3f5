use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use deformnet_core::data::{Family, MorphConfig};
use deformnet_core::train::TrainConfig;
use deformnet_service::api::router;
use deformnet_service::infer::infer;
use deformnet_service::pipeline::{compute_defos, evaluate, gen_data, train_defo_stage, train_param_stage, DataConfig};
use deformnet_service::ModelBundle;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn bundle() -> Arc<ModelBundle> {
    static B: OnceLock<Arc<ModelBundle>> = OnceLock::new();
    B.get_or_init(|| {
        let ds = gen_data(&DataConfig::new(Family::Circle2d, 16, &[5, 5])).unwrap();
        let morph = MorphConfig {
            iters: 20,
            levels: 2,
            ..MorphConfig::default()
        };
        let (fields, _) = compute_defos(&ds, &morph).unwrap();
        let cfg = TrainConfig {
            steps_param: 50,
            steps_defo: 50,
            log_interval: 25,
            ..TrainConfig::default()
        };
        let (b, _) = train_param_stage(&ds, &fields, vec![0, 1], &cfg).unwrap();
        let (mut b, _) = train_defo_stage(&b, &ds, &cfg).unwrap();
        b.ablation = Some(evaluate(&b, &ds).unwrap());
        Arc::new(b)
    })
    .clone()
}

async fn call(req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(bundle(), None).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, v)
}

fn post(path: &str, body: impl Into<Body>) -> Request<Body> {
    Request::post(path).header("content-type", "application/json").body(body.into()).unwrap()
}

fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).unwrap()
}

#[tokio::test]
async fn meta_describes_bundle() {
    let (s, v) = call(get("/api/meta")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["param_axes"].as_array().unwrap().len(), 2);
    assert_eq!(v["param_axes"][0]["name"], "size");
    assert_eq!(v["sdf_res"], json!([16, 16]));
    assert_eq!(v["defo_res"], json!([4, 4]));
    assert_eq!(v["dims"], 2);
}

#[tokio::test]
async fn infer_beta_only() {
    let (s, v) = call(post("/api/infer", r#"{"alpha":[0.2,0.7],"want":["beta"]}"#)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["beta"].as_array().unwrap().len(), 2);
    assert!(v.get("contour").is_none());
    assert!(v.get("sdf").is_none());
    assert_eq!(v["clamped"], false);
}

#[tokio::test]
async fn infer_full_payload_matches_library() {
    let body = r#"{"alpha":[0.5,0.25],"want":["beta","contour","sdf","timings"]}"#;
    let (s, v) = call(post("/api/infer", body)).await;
    assert_eq!(s, StatusCode::OK);
    let raw = base64::engine::general_purpose::STANDARD
        .decode(v["sdf"]["data"].as_str().unwrap())
        .unwrap();
    let got: Vec<f32> = raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let want = infer(&bundle(), &[0.5, 0.25]).unwrap();
    let want: Vec<f32> = want.psi.values().iter().map(|&x| x as f32).collect();
    assert_eq!(got, want);
    assert_eq!(v["sdf"]["res"], json!([16, 16]));
    let lines = v["contour"].as_array().unwrap();
    assert!(!lines.is_empty());
    assert!(lines[0]["points"].as_array().unwrap().len() > 3);
    for k in ["net_eval_ms", "defo_assemble_ms", "advect_ms", "total_ms"] {
        assert!(v["timings"][k].as_f64().unwrap() >= 0.0, "{k}");
    }
}

#[tokio::test]
async fn infer_clamps_out_of_range() {
    let (s, v) = call(post("/api/infer", r#"{"alpha":[1.5,-0.2],"want":["beta"]}"#)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["clamped"], true);
    assert_eq!(v["alpha"], json!([1.0, 0.0]));
}

#[tokio::test]
async fn reference_overlay_at_test_point() {
    let b = bundle();
    let a = b.references[0].alpha.clone();
    let body = json!({"alpha": a, "want": ["reference"]}).to_string();
    let (s, v) = call(post("/api/infer", body)).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["reference"]["loss"].as_f64().unwrap() >= 0.0);
    assert!(!v["reference"]["contour"].as_array().unwrap().is_empty());
    let (_, v) = call(post("/api/infer", r#"{"alpha":[0.123,0.456],"want":["reference"]}"#)).await;
    assert!(v["reference"].is_null());
}

#[tokio::test]
async fn wrong_alpha_length_is_422() {
    let (s, v) = call(post("/api/infer", r#"{"alpha":[0.5]}"#)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let msg = v["error"].as_str().unwrap();
    assert!(msg.contains("1 components") && msg.contains('2'), "{msg}");
}

#[tokio::test]
async fn malformed_bodies_are_400() {
    for body in [
        "not json",
        r#"{"alpha":"x"}"#,
        r#"{"want":["beta"]}"#,
        r#"{"alpha":[0.1,0.2],"want":["colour"]}"#,
        r#"{"alpha":[0.1,0.2],"extra":1}"#,
    ] {
        let (s, _) = call(post("/api/infer", body)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body}");
    }
}

#[tokio::test]
async fn unknown_routes_are_404() {
    assert_eq!(call(get("/api/nothing")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(get("/elsewhere")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn ablation_endpoint() {
    let (s, v) = call(get("/api/ablation")).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["l_base"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["n_samples"], 1);
    let mut bare = (*bundle()).clone();
    bare.ablation = None;
    let resp = router(Arc::new(bare), None).oneshot(get("/api/ablation")).await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn index_and_static_dir() {
    let (s, v) = call(get("/")).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v.as_str().unwrap().contains("/api/meta"));
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>explorer</p>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let app = router(bundle(), Some(dir.path().to_path_buf()));
    let resp = app.clone().oneshot(get("/app.js")).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let resp = app.clone().oneshot(get("/")).await.unwrap();
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], b"<p>explorer</p>");
    let resp = app.clone().oneshot(get("/missing.css")).await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    let resp = app.oneshot(get("/api/meta")).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_agree() {
    let app = router(bundle(), None);
    let body = r#"{"alpha":[0.31,0.62],"want":["beta","sdf","contour"]}"#;
    let mut handles = Vec::new();
    for k in 0..16 {
        let app = app.clone();
        // Interleave a different point so handlers overlap with other work.
        let b = if k % 2 == 0 { body.to_string() } else { r#"{"alpha":[0.9,0.1],"want":["sdf"]}"#.to_string() };
        handles.push(tokio::spawn(async move {
            let resp = app.oneshot(post("/api/infer", b)).await.unwrap();
            assert_eq!(resp.status(), StatusCode::OK);
            (k, resp.into_body().collect().await.unwrap().to_bytes())
        }));
    }
    let mut same = Vec::new();
    for h in handles {
        let (k, bytes) = h.await.unwrap();
        if k % 2 == 0 {
            same.push(bytes);
        }
    }
    assert!(same.windows(2).all(|w| w[0] == w[1]));
}
