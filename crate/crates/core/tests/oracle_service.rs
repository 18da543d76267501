use std::net::TcpListener;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use dfzsl::diffmath::Tensor;
use dfzsl::oracle::{spawn_server, HttpOracle, PredictionService, RetryPolicy, ScoreMode, ServerClassifier};
use dfzsl::{ClassPrototypes, Error};

const DIM: usize = 8;
const CLASSES: usize = 4;

fn weights(seed: u64) -> ClassPrototypes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..CLASSES)
        .map(|_| (0..DIM).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let names = (0..CLASSES).map(|i| format!("secret_class_{i}")).collect();
    ClassPrototypes::new(names, Tensor::from_rows(&rows).unwrap().normalized_rows().unwrap()).unwrap()
}

fn features(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::matrix(n, DIM, data).unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|r| t.row_slice(r).iter().map(|&v| v as f32).collect()).collect()
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

/// Posts a raw body and returns the status with the parsed JSON response.
fn post(url: &str, body: &str) -> (u16, Value, String) {
    let mut resp = agent()
        .post(&format!("{url}/v1/predict"))
        .header("content-type", "application/json")
        .send(body)
        .unwrap();
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().unwrap();
    (status, serde_json::from_str(&text).unwrap(), text)
}

fn error_code(url: &str, body: Value) -> (u16, String) {
    let (status, v, _) = post(url, &body.to_string());
    (status, v["error"].as_str().unwrap_or_default().to_owned())
}

#[test]
fn http_error_codes() {
    let server = spawn_server(ServerClassifier::new(weights(1), ScoreMode::Cosine), "127.0.0.1:0").unwrap();
    let url = server.url();
    assert_eq!(error_code(&url, json!({"features": [[1.0, 2.0]]})), (400, "dim_mismatch".into()));
    assert_eq!(error_code(&url, json!({"features": []})), (400, "empty_batch".into()));
    let big = vec![vec![0.5f32; DIM]; 129];
    assert_eq!(error_code(&url, json!({ "features": big })), (400, "batch_too_large".into()));
    assert_eq!(error_code(&url, json!({"rows": 1})), (400, "malformed_request".into()));
    assert_eq!(error_code(&url, json!({ "features": [vec![0.0f32; DIM]] })), (400, "malformed_request".into()));

    let client = HttpOracle::new(&url, RetryPolicy::default());
    match client.predict(&Tensor::matrix(2, 3, vec![0.5; 6]).unwrap()) {
        Err(Error::Remote(code)) => assert_eq!(code, "dim_mismatch"),
        other => panic!("expected dim_mismatch, got {other:?}"),
    }
}

#[test]
fn oversized_batches_are_chunked() {
    let w = weights(2);
    let server = spawn_server(ServerClassifier::new(w.clone(), ScoreMode::Cosine), "127.0.0.1:0").unwrap();
    let client = HttpOracle::new(server.url(), RetryPolicy::default());
    let x = features(257, 3);
    let before = server.request_count();
    let remote = client.predict(&x).unwrap();
    assert_eq!(server.request_count() - before, 3);
    assert_eq!(remote.shape(), &[257, CLASSES]);
    let local = x.normalized_rows().unwrap().matmul_t(w.directions()).unwrap();
    for (r, l) in remote.data().iter().zip(local.data()) {
        assert!((r - l).abs() < 1e-6);
    }
}

#[test]
fn request_for_a_weight_row_peaks_at_one() {
    let w = weights(4);
    let server = spawn_server(ServerClassifier::new(w.clone(), ScoreMode::Cosine), "127.0.0.1:0").unwrap();
    let client = HttpOracle::new(server.url(), RetryPolicy::default());
    let k = 2;
    let x = Tensor::matrix(1, DIM, w.direction(k).to_vec()).unwrap();
    let s = client.predict(&x).unwrap();
    let (argmax, max) = s.row_slice(0).iter().enumerate().fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
    assert_eq!(argmax, k);
    assert!((max - 1.0).abs() < 1e-6);
}

#[test]
fn unreachable_service_surfaces_after_retries() {
    // bind then release a port so nothing is listening on it
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let policy = RetryPolicy {
        attempts: 3,
        backoff_ms: 1,
    };
    let client = HttpOracle::new(format!("http://127.0.0.1:{port}"), policy);
    match client.predict(&features(1, 0)) {
        Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected transport failure, got {other:?}"),
    }
}

#[test]
fn responses_never_carry_weights_or_names() {
    let w = weights(5);
    let server = spawn_server(ServerClassifier::new(w.clone(), ScoreMode::Cosine), "127.0.0.1:0").unwrap();
    let url = server.url();
    let mut corpus = String::new();
    let mut info = agent().get(&format!("{url}/v1/info")).call().unwrap();
    for (name, value) in info.headers() {
        corpus.push_str(&format!("{name}: {value:?}\n"));
    }
    let info_body = info.body_mut().read_to_string().unwrap();
    let keys: Vec<String> = serde_json::from_str::<Value>(&info_body).unwrap().as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys, ["dim", "num_classes", "score_mode"]);
    corpus.push_str(&info_body);
    for body in [
        json!({"features": rows(&features(5, 6))}).to_string(),
        json!({"features": [[1.0]]}).to_string(),
        json!({"features": []}).to_string(),
        "not json".to_owned(),
    ] {
        corpus.push_str(&post(&url, &body).2);
    }
    assert!(!corpus.contains("secret_class"));
    for v in w.directions().data() {
        let f = *v as f32;
        for text in [f.to_string(), format!("{:.6}", f), v.to_string()] {
            assert!(!corpus.contains(&text), "weight value {text} appeared in a response");
        }
    }
}

#[test]
fn stateless_under_reordering() {
    let server = spawn_server(ServerClassifier::new(weights(7), ScoreMode::Cosine), "127.0.0.1:0").unwrap();
    let url = server.url();
    let a = json!({"features": rows(&features(3, 8))}).to_string();
    let b = json!({"features": rows(&features(4, 9))}).to_string();
    let first = post(&url, &a).2;
    let _ = post(&url, &b);
    let threads: Vec<_> = (0..4)
        .map(|i| {
            let (url, a, b) = (url.clone(), a.clone(), b.clone());
            std::thread::spawn(move || if i % 2 == 0 { post(&url, &a).2 } else { post(&url, &b).2 })
        })
        .collect();
    let results: Vec<String> = threads.into_iter().map(|t| t.join().unwrap()).collect();
    assert_eq!(results[0], first);
    assert_eq!(results[2], first);
    assert_eq!(post(&url, &a).2, first);
}
