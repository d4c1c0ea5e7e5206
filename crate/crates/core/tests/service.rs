mod common;

use std::io::{Read, Write};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use common::*;
use http_body_util::BodyExt;
use scenenav::pipeline::Pipeline;
use scenenav::service::{self, Command, Controller, RunStatus, Shared, Snapshot};
use scenenav::synth::Renderer;
use scenenav::{Error, PipelineConfig};
use tower::ServiceExt;

async fn call(shared: &Arc<Shared>, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, String) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let resp = service::router(shared.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn state(shared: &Arc<Shared>) -> Snapshot {
    let (status, body) = call(shared, "GET", "/state", None).await;
    assert_eq!(status, StatusCode::OK);
    Snapshot::decode(&body).unwrap()
}

fn pipeline_for(frames: usize) -> (Pipeline, Renderer) {
    let spec = scene(ORBIT_ROOM, frames);
    let cfg = PipelineConfig {
        block_size: spec.block_size,
        anchor_count: spec.anchor_count,
        ..PipelineConfig::default()
    };
    let p = Pipeline::new(cfg).unwrap().with_class_names(spec.class_names.clone());
    (p, Renderer::new(spec))
}

/// Starts the pipeline on its own thread with the given commands queued.
fn start(frames: usize, queued: &[Command]) -> (Arc<Shared>, thread::JoinHandle<Pipeline>) {
    let (mut p, renderer) = pipeline_for(frames);
    let (mut ctl, shared): (Controller, Arc<Shared>) = service::channel(p.class_names().clone(), 0.0);
    for cmd in queued {
        shared.send(cmd.clone()).unwrap();
    }
    let handle = thread::spawn(move || {
        let stream = renderer.stream(frames).map(|r| r.map(|(f, _)| f));
        ctl.drive(&mut p, stream).unwrap();
        p
    });
    (shared, handle)
}

async fn wait_for(shared: &Arc<Shared>, pred: impl Fn(&Snapshot) -> bool) -> Snapshot {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let snap = state(shared).await;
        if pred(&snap) {
            return snap;
        }
        assert!(Instant::now() < deadline, "timed out; last state {snap:?}");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

#[tokio::test]
async fn warming_state_before_the_first_block() {
    let (_ctl, shared) = service::channel(Default::default(), 0.0);
    let snap = state(&shared).await;
    assert_eq!(snap.status, RunStatus::Warming);
    assert_eq!(snap.block, -1);
    assert!(snap.objects.is_empty() && snap.plan.is_none() && snap.rasters.is_empty());
    let (status, _) = call(&shared, "GET", "/nav/occupancy", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn goal_requests_are_validated() {
    let names = [(56, "chair".to_string())].into_iter().collect();
    let (_ctl, shared) = service::channel(names, 0.0);
    let (status, body) = call(&shared, "POST", "/goal", Some(r#"{"class":"sofa"}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    assert_eq!(call(&shared, "POST", "/goal", Some(r#"{"class":"Chair"}"#)).await.0, StatusCode::ACCEPTED);
    assert_eq!(call(&shared, "POST", "/goal", Some(r#"{"class":"57"}"#)).await.0, StatusCode::ACCEPTED);
    assert_eq!(call(&shared, "DELETE", "/goal", None).await.0, StatusCode::ACCEPTED);
    assert!(call(&shared, "POST", "/goal", Some("not json")).await.0.is_client_error());
}

#[tokio::test]
async fn playback_requests_are_validated() {
    let (_ctl, shared) = service::channel(Default::default(), 0.0);
    for (body, want) in [
        (r#"{"action":"pause"}"#, StatusCode::ACCEPTED),
        (r#"{"action":"resume"}"#, StatusCode::ACCEPTED),
        (r#"{"action":"step"}"#, StatusCode::ACCEPTED),
        (r#"{"action":"speed","speed":2.5}"#, StatusCode::ACCEPTED),
        (r#"{"action":"speed"}"#, StatusCode::BAD_REQUEST),
        (r#"{"action":"speed","speed":-1}"#, StatusCode::BAD_REQUEST),
        (r#"{"action":"rewind"}"#, StatusCode::BAD_REQUEST),
    ] {
        assert_eq!(call(&shared, "POST", "/playback", Some(body)).await.0, want, "{body}");
    }
}

#[tokio::test]
async fn commands_fail_once_the_pipeline_is_gone() {
    let (ctl, shared) = service::channel(Default::default(), 0.0);
    drop(ctl);
    let (status, _) = call(&shared, "POST", "/playback", Some(r#"{"action":"pause"}"#)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn paused_state_is_stable_and_resumes_to_completion() {
    let (shared, handle) = start(60, &[Command::Pause, Command::Step, Command::Step]);
    let snap = wait_for(&shared, |s| s.status == RunStatus::Paused).await;
    assert_eq!(snap.block, 1);
    assert!(snap.playback.paused);
    let (_, first) = call(&shared, "GET", "/state", None).await;
    tokio::time::sleep(Duration::from_millis(200)).await;
    let (_, second) = call(&shared, "GET", "/state", None).await;
    assert_eq!(first, second);

    let (status, registry) = call(&shared, "GET", "/registry", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(!registry.trim().is_empty());
    let (_, trajectory) = call(&shared, "GET", "/trajectory", None).await;
    assert_eq!(trajectory.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).count(), 20);
    for layer in ["occupancy", "density", "min_height", "label", "plan"] {
        assert_eq!(call(&shared, "GET", &format!("/nav/{layer}"), None).await.0, StatusCode::OK, "{layer}");
    }
    assert_eq!(call(&shared, "GET", "/nav/heat", None).await.0, StatusCode::NOT_FOUND);

    assert_eq!(call(&shared, "POST", "/playback", Some(r#"{"action":"resume"}"#)).await.0, StatusCode::ACCEPTED);
    let p = tokio::task::spawn_blocking(move || handle.join().unwrap()).await.unwrap();
    let done = state(&shared).await;
    assert_eq!(done.status, RunStatus::Finished);
    assert_eq!(done.block, 5);
    assert_eq!(done.block as usize, p.last_block().unwrap());
}

#[tokio::test]
async fn chair_goal_is_planned_within_two_blocks() {
    let (shared, handle) = start(80, &[Command::Pause, Command::Step, Command::Step]);
    let snap = wait_for(&shared, |s| s.status == RunStatus::Paused).await;
    let issued_at = snap.block;
    assert_eq!(call(&shared, "POST", "/goal", Some(r#"{"class":"chair"}"#)).await.0, StatusCode::ACCEPTED);
    for _ in 0..2 {
        call(&shared, "POST", "/playback", Some(r#"{"action":"step"}"#)).await;
    }
    let snap = wait_for(&shared, |s| s.status == RunStatus::Paused && s.block == issued_at + 2).await;
    assert_eq!(snap.goal_class, Some(56));
    let plan = snap.plan.clone().expect("plan after two blocks");
    let target = plan.goal_tracklet.expect("semantic goal chosen");
    let object = snap.objects.iter().find(|o| o.id == target).expect("goal is a known object");
    assert_eq!(object.class_name.as_deref(), Some("chair"));
    assert!(matches!(plan.status.as_str(), "planned" | "reached"), "{}", plan.status);
    assert!(!plan.waypoints.is_empty());

    assert_eq!(call(&shared, "DELETE", "/goal", None).await.0, StatusCode::ACCEPTED);
    call(&shared, "POST", "/playback", Some(r#"{"action":"resume"}"#)).await;
    tokio::task::spawn_blocking(move || handle.join().unwrap()).await.unwrap();
    let done = state(&shared).await;
    assert_eq!(done.goal_class, None);
    assert_ne!(done.plan.map(|p| p.goal_tracklet.is_some()), Some(true));
}

#[tokio::test]
async fn events_stream_starts_with_the_current_snapshot() {
    let (shared, handle) = start(20, &[]);
    tokio::task::spawn_blocking(move || handle.join().unwrap()).await.unwrap();
    let req = Request::builder().uri("/events").body(Body::empty()).unwrap();
    let resp = service::router(shared.clone()).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));
    let mut body = resp.into_body();
    let frame = tokio::time::timeout(Duration::from_secs(5), body.frame()).await.unwrap().unwrap().unwrap();
    let text = String::from_utf8(frame.into_data().unwrap().to_vec()).unwrap();
    assert!(text.starts_with("event: snapshot\n"), "{text}");
    let data: String = text.lines().filter_map(|l| l.strip_prefix("data: ")).collect();
    assert_eq!(Snapshot::decode(&data).unwrap(), shared.latest().snapshot);
}

#[tokio::test]
async fn snapshots_round_trip_and_rasters_decode() {
    let (shared, handle) = start(40, &[]);
    let p = tokio::task::spawn_blocking(move || handle.join().unwrap()).await.unwrap();
    let published = shared.latest();
    let snap = Snapshot::decode(&published.json).unwrap();
    assert_eq!(snap, published.snapshot);
    assert_eq!(snap.encode(), published.json);
    let occ = snap.raster("occupancy").unwrap().decode().unwrap();
    let live = p.occupancy().unwrap();
    assert_eq!((occ.width(), occ.height()), (live.width(), live.height()));
    assert!(occ.data().iter().zip(live.data()).all(|(&a, b)| a == b.code() as u32));
    assert_eq!(snap.trajectory_tail.len(), 16);
    assert_eq!(snap.trajectory_tail.last().unwrap().frame, 39);
}

#[tokio::test]
async fn serves_over_tcp_and_reports_a_busy_port() {
    let listener = service::bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
    let addr = listener.local_addr().unwrap();
    match service::bind(addr).await {
        Err(Error::Service(msg)) => assert!(msg.contains(&addr.to_string())),
        other => panic!("expected a service error, got {other:?}"),
    }
    let (_ctl, shared) = service::channel(Default::default(), 0.0);
    tokio::spawn(service::serve(listener, shared));
    let response = tokio::task::spawn_blocking(move || {
        let mut stream = std::net::TcpStream::connect(addr).unwrap();
        stream
            .write_all(b"GET /state HTTP/1.1\r\nhost: localhost\r\nconnection: close\r\n\r\n")
            .unwrap();
        let mut response = String::new();
        stream.read_to_string(&mut response).unwrap();
        response
    })
    .await
    .unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"status\":\"warming\""));
}
