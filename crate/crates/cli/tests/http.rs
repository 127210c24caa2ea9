use std::sync::Arc;

use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use slpgen::api::{serve, AppState, Provenance, ShapeRecord};
use slpgen_core::data::{decode_ply, encode_ply};
use slpgen_core::diffusion::{DdpmConfig, DdpmKind, DenoiserConfig, LatentDdpm, ScheduleConfig};
use slpgen_core::edit::{correspond, CorrespondStrategy, EditMode, Models};
use slpgen_core::nets::{AeConfig, Autoencoder};

fn ddpm(kind: DdpmKind, dim: usize, seed: u64) -> LatentDdpm {
    let mut denoiser = match kind {
        DdpmKind::Position => DenoiserConfig::position(),
        DdpmKind::Feature => DenoiserConfig::feature(dim),
    };
    denoiser.hidden = 32;
    LatentDdpm::new(DdpmConfig { denoiser, schedule: ScheduleConfig::scaled(20) }, seed).unwrap()
}

fn models() -> Models {
    let ae = Autoencoder::new(AeConfig::toy(), 1).unwrap();
    Models::new(ae, ddpm(DdpmKind::Position, 3, 2), ddpm(DdpmKind::Feature, 6, 3)).unwrap()
}

struct Server {
    base: String,
    client: Client,
    state: Arc<AppState>,
}

impl Server {
    async fn start(state: AppState) -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let state = Arc::new(state);
        tokio::spawn(serve(listener, state.clone()));
        Self { base, client: Client::new(), state }
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let resp = self.client.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let resp = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap())
    }

    async fn generate(&self, count: usize, seed: u64) -> Vec<ShapeRecord> {
        let (status, body) = self.post("/v1/generate", json!({"count": count, "seed": seed})).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        serde_json::from_value(body).unwrap()
    }
}

fn record(v: Value) -> ShapeRecord {
    serde_json::from_value(v).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn generate_follows_the_shape_contract() {
    let srv = Server::start(AppState::new(models())).await;
    let (status, health) = srv.get("/v1/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["status"], "ok");
    assert_eq!(health["model_config"]["autoencoder"]["latent_points"], 4);

    let (status, raw) = srv.post("/v1/generate", json!({"count": 1, "seed": 5})).await;
    assert_eq!(status, StatusCode::OK);
    let shape = &raw[0];
    assert_eq!(shape["latent"]["positions"].as_array().unwrap().len(), 4);
    assert!(shape["latent"]["positions"].as_array().unwrap().iter().all(|p| p.as_array().unwrap().len() == 3));
    assert_eq!(shape["cloud"]["positions"].as_array().unwrap().len(), 32);
    assert!(shape["cloud"]["normals"].as_array().unwrap().iter().all(|p| p.as_array().unwrap().len() == 3));

    let again = srv.generate(2, 5).await;
    let first = record(shape.clone());
    assert_eq!(again[0].latent, first.latent);
    assert_eq!(again[0].cloud, first.cloud);
    assert_ne!(again[1].latent, first.latent);
    assert_eq!((again[0].seed, again[1].seed), (Some(5), Some(6)));
    assert_ne!(again[0].id, first.id);
    assert_eq!(srv.state.len(), 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn keep_features_returns_the_stored_cloud() {
    let srv = Server::start(AppState::new(models())).await;
    let shape = srv.generate(1, 1).await.remove(0);
    let (status, out) = srv.post("/v1/edit", json!({"id": shape.id, "mode": "KeepFeatures"})).await;
    assert_eq!(status, StatusCode::OK, "{out}");
    let out = record(out);
    assert_eq!(out.cloud, shape.cloud);
    assert_eq!(out.latent, shape.latent);
    assert_eq!(out.seed, None);
    assert_eq!(out.provenance, Provenance::Edited { from: Some(shape.id.clone()), mode: EditMode::KeepFeatures });

    let (status, fetched) = srv.get(&format!("/v1/shapes/{}", shape.id)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(record(fetched), shape);
}

#[tokio::test(flavor = "multi_thread")]
async fn resample_moved_keeps_fixed_rows() {
    let srv = Server::start(AppState::new(models())).await;
    let shape = srv.generate(1, 2).await.remove(0);
    let mut latent = shape.latent.clone();
    latent.positions[2][1] += 0.25;
    let body = json!({"id": shape.id, "latent": latent, "moved_mask": [false, false, true, false], "mode": "ResampleMoved", "seed": 4});
    let (status, out) = srv.post("/v1/edit", body).await;
    assert_eq!(status, StatusCode::OK, "{out}");
    let out = record(out);
    assert_eq!(out.latent.positions, latent.positions);
    for i in [0, 1, 3] {
        assert_eq!(out.latent.features[i], shape.latent.features[i]);
    }
    assert_ne!(out.latent.features[2], shape.latent.features[2]);
    assert_eq!(out.seed, Some(4));
}

#[tokio::test(flavor = "multi_thread")]
async fn interpolation_endpoints_match_the_sources() {
    let srv = Server::start(AppState::new(models())).await;
    let shapes = srv.generate(2, 10).await;
    let (a, b) = (&shapes[0], &shapes[1]);
    let (status, out) = srv.post("/v1/interpolate", json!({"id_a": a.id, "id_b": b.id, "steps": 3})).await;
    assert_eq!(status, StatusCode::OK, "{out}");
    let out: Vec<ShapeRecord> = serde_json::from_value(out).unwrap();
    assert_eq!(out.len(), 3);

    let (_, stored_a) = srv.get(&format!("/v1/shapes/{}", a.id)).await;
    let stored_a = record(stored_a);
    assert_eq!(out[0].latent, stored_a.latent);
    assert_eq!(out[0].cloud, stored_a.cloud);

    let (_, stored_b) = srv.get(&format!("/v1/shapes/{}", b.id)).await;
    let stored_b = record(stored_b);
    let aligned = correspond(&a.latent, &stored_b.latent, CorrespondStrategy::Positions).unwrap().apply(&stored_b.latent).unwrap();
    assert_eq!(out[2].latent, aligned);
    assert_eq!(out[2].cloud, srv.state.models().decode(&aligned).unwrap());
    assert_eq!(out[1].provenance, Provenance::Interpolated { a: a.id.clone(), b: b.id.clone(), s: 0.5 });

    // A masked row stays at A for every step.
    let (status, masked) = srv.post("/v1/interpolate", json!({"id_a": a.id, "id_b": b.id, "steps": 4, "mask": [true, false, false, false]})).await;
    assert_eq!(status, StatusCode::OK);
    let masked: Vec<ShapeRecord> = serde_json::from_value(masked).unwrap();
    assert!(masked.iter().all(|r| r.latent.positions[0] == a.latent.positions[0]));
}

#[tokio::test(flavor = "multi_thread")]
async fn combine_rows_follow_provenance() {
    let srv = Server::start(AppState::new(models())).await;
    let shapes = srv.generate(2, 20).await;
    let body = json!({"parts": [{"id": shapes[0].id, "indices": [3, 0]}, {"id": shapes[1].id, "indices": [1, 2]}]});
    let (status, out) = srv.post("/v1/combine", body).await;
    assert_eq!(status, StatusCode::OK, "{out}");
    let out = record(out);
    let sources = [(0, 3), (0, 0), (1, 1), (1, 2)];
    for (row, (part, idx)) in sources.into_iter().enumerate() {
        assert_eq!(out.latent.positions[row], shapes[part].latent.positions[idx]);
        assert_eq!(out.latent.features[row], shapes[part].latent.features[idx]);
    }
    assert_eq!(out.provenance, Provenance::Combined { parts: vec![shapes[0].id.clone(), shapes[1].id.clone()] });
}

#[tokio::test(flavor = "multi_thread")]
async fn ply_route_serves_the_stored_cloud() {
    let srv = Server::start(AppState::new(models())).await;
    let shape = srv.generate(1, 3).await.remove(0);
    let resp = srv.client.get(format!("{}/v1/shapes/{}.ply", srv.base, shape.id)).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let bytes = resp.bytes().await.unwrap();
    assert_eq!(bytes.as_ref(), encode_ply(&shape.cloud).unwrap().as_slice());
    assert_eq!(decode_ply(&bytes).unwrap(), shape.cloud);
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_map_to_status_codes() {
    let srv = Server::start(AppState::new(models())).await;
    let shape = srv.generate(1, 0).await.remove(0);

    assert_eq!(srv.get("/v1/shapes/shape-999").await.0, StatusCode::NOT_FOUND);
    assert_eq!(srv.get("/v1/shapes/shape-999.ply").await.0, StatusCode::NOT_FOUND);
    assert_eq!(srv.post("/v1/edit", json!({"id": "nope", "mode": "ResampleAll"})).await.0, StatusCode::NOT_FOUND);
    assert_eq!(srv.post("/v1/interpolate", json!({"id_a": shape.id, "id_b": "nope", "steps": 3})).await.0, StatusCode::NOT_FOUND);
    assert_eq!(srv.post("/v1/combine", json!({"parts": [{"id": "nope", "indices": [0]}]})).await.0, StatusCode::NOT_FOUND);

    let (status, body) = srv.post("/v1/generate", json!({"count": 0})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].is_string());
    assert_eq!(srv.post("/v1/generate", json!({"seed": 1})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(srv.post("/v1/edit", json!({"mode": "ResampleAll"})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(srv.post("/v1/edit", json!({"id": shape.id, "mode": "sideways"})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(srv.post("/v1/interpolate", json!({"id_a": shape.id, "id_b": shape.id, "steps": 1})).await.0, StatusCode::BAD_REQUEST);
    let dup = json!({"parts": [{"id": shape.id, "indices": [0, 0, 1, 2]}]});
    assert_eq!(srv.post("/v1/combine", dup).await.0, StatusCode::BAD_REQUEST);
    let all_moved = json!({"id": shape.id, "moved_mask": [true, true, true, true], "mode": "ResampleMoved"});
    assert_eq!(srv.post("/v1/edit", all_moved).await.0, StatusCode::BAD_REQUEST);
    let resp = srv.client.post(format!("{}/v1/generate", srv.base)).header("content-type", "application/json").body("{").send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);

    let mut narrow = shape.latent.clone();
    narrow.positions.pop();
    narrow.features.pop();
    assert_eq!(srv.post("/v1/edit", json!({"latent": narrow, "mode": "KeepFeatures"})).await.0, StatusCode::CONFLICT);
    let short_mask = json!({"id": shape.id, "moved_mask": [false, true], "mode": "ResampleMoved"});
    assert_eq!(srv.post("/v1/edit", short_mask).await.0, StatusCode::CONFLICT);
    let short_mask = json!({"id_a": shape.id, "id_b": shape.id, "steps": 2, "mask": [true]});
    assert_eq!(srv.post("/v1/interpolate", short_mask).await.0, StatusCode::CONFLICT);
    assert_eq!(srv.state.len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_edits_match_serial_ones() {
    let srv = Arc::new(Server::start(AppState::new(models())).await);
    let source = srv.generate(1, 30).await.remove(0);
    let body = |seed: u64| {
        json!({"id": source.id, "moved_mask": [seed % 2 == 0, true, false, false], "mode": if seed % 3 == 0 { "ResampleAll" } else { "ResampleMoved" }, "seed": seed})
    };

    let tasks: Vec<_> = (0..8u64)
        .map(|seed| {
            let (srv, b) = (srv.clone(), body(seed));
            tokio::spawn(async move { srv.post("/v1/edit", b).await })
        })
        .collect();
    let mut parallel = Vec::new();
    for t in tasks {
        let (status, v) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK, "{v}");
        parallel.push(record(v));
    }
    for (seed, par) in (0..8u64).zip(&parallel) {
        let (_, serial) = srv.post("/v1/edit", body(seed)).await;
        let serial = record(serial);
        assert_eq!(par.latent, serial.latent, "seed {seed}");
        assert_eq!(par.cloud, serial.cloud, "seed {seed}");
        assert_eq!(par.seed, Some(seed));
    }
    // Edits create new records and leave the source alone.
    assert_eq!(srv.state.get(&source.id).unwrap().as_ref(), &source);
    assert_eq!(srv.state.len(), 17);
}

#[tokio::test(flavor = "multi_thread")]
async fn store_log_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shapes.jsonl");
    let first = {
        let srv = Server::start(AppState::with_log(models(), &path).unwrap()).await;
        srv.generate(2, 40).await
    };
    let srv = Server::start(AppState::with_log(models(), &path).unwrap()).await;
    assert_eq!(srv.state.len(), 2);
    let (status, back) = srv.get(&format!("/v1/shapes/{}", first[1].id)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(record(back), first[1]);
    let next = srv.generate(1, 50).await.remove(0);
    assert!(first.iter().all(|r| r.id != next.id));
}
