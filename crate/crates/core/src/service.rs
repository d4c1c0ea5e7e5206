//! HTTP access to a running pipeline.
//!
//! The pipeline thread publishes one snapshot per block into a latest-value
//! slot and applies queued commands only between blocks.
//!
//! | route | |
//! |---|---|
//! | `GET /state` | latest snapshot (JSON) |
//! | `GET /events` | server-sent snapshots |
//! | `POST /goal` `{"class": "chair"}`, `DELETE /goal` | semantic goal |
//! | `POST /playback` `{"action": "pause" \| "resume" \| "step" \| "speed", "speed": 2.0}` | playback |
//! | `GET /registry`, `GET /trajectory`, `GET /nav/<layer>` | text exports |

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use crate::error::{Error, Result};
use crate::geometry::Grid;
use crate::ingest::format_trajectory;
use crate::pipeline::Pipeline;

/// Runs of equal values in one raster row: `[value, length]`.
pub type RleRow = Vec<[u32; 2]>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RleRaster {
    pub layer: String,
    pub width: usize,
    pub height: usize,
    pub rows: Vec<RleRow>,
}

impl RleRaster {
    pub fn encode(layer: &str, grid: &Grid<u32>) -> Self {
        let rows = (0..grid.height())
            .map(|y| {
                let mut row: RleRow = Vec::new();
                for x in 0..grid.width() {
                    let v = *grid.get(x, y);
                    match row.last_mut() {
                        Some(run) if run[0] == v => run[1] += 1,
                        _ => row.push([v, 1]),
                    }
                }
                row
            })
            .collect();
        Self {
            layer: layer.to_string(),
            width: grid.width(),
            height: grid.height(),
            rows,
        }
    }

    pub fn decode(&self) -> Result<Grid<u32>> {
        if self.rows.len() != self.height {
            return Err(Error::Format(format!("{}: {} rows for height {}", self.layer, self.rows.len(), self.height)));
        }
        let mut data = Vec::with_capacity(self.width * self.height);
        for (y, row) in self.rows.iter().enumerate() {
            let before = data.len();
            for &[v, n] in row {
                data.extend(std::iter::repeat_n(v, n as usize));
            }
            if data.len() - before != self.width {
                return Err(Error::Format(format!("{}: row {y} does not span width {}", self.layer, self.width)));
            }
        }
        Grid::from_vec(self.width, self.height, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Warming,
    Running,
    Paused,
    Finished,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub frame: usize,
    /// Row-major 3×4.
    pub pose: [f64; 12],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub id: u32,
    pub class_id: u32,
    pub class_name: Option<String>,
    pub state: String,
    pub confidence: f64,
    pub last_seen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub status: String,
    pub user_cell: Option<[usize; 2]>,
    pub goal_cell: Option<[usize; 2]>,
    pub goal_tracklet: Option<u32>,
    pub waypoints: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaybackState {
    pub paused: bool,
    /// Blocks per second, 0 for unthrottled.
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub status: RunStatus,
    /// −1 before the first block.
    pub block: i64,
    pub goal_class: Option<u32>,
    pub playback: PlaybackState,
    pub trajectory_tail: Vec<PoseEntry>,
    /// Lattice index of raster cell (0, 0) and the cell size in meters.
    pub grid_origin: Option<[i64; 2]>,
    pub cell: f64,
    pub rasters: Vec<RleRaster>,
    pub objects: Vec<ObjectSummary>,
    pub plan: Option<PlanSummary>,
    /// `[nx, ny, nz, offset]`.
    pub plane: Option<[f64; 4]>,
}

pub const TRAJECTORY_TAIL: usize = 16;

impl Snapshot {
    pub fn warming(playback: PlaybackState) -> Self {
        Self {
            status: RunStatus::Warming,
            block: -1,
            goal_class: None,
            playback,
            trajectory_tail: Vec::new(),
            grid_origin: None,
            cell: 0.0,
            rasters: Vec::new(),
            objects: Vec::new(),
            plan: None,
            plane: None,
        }
    }

    pub fn from_pipeline(p: &Pipeline, status: RunStatus, playback: PlaybackState) -> Self {
        let traj = p.trajectory();
        let tail = &traj[traj.len().saturating_sub(TRAJECTORY_TAIL)..];
        let mut rasters = Vec::new();
        if let (Some(grid), Some(occ)) = (p.grid(), p.occupancy()) {
            rasters.push(RleRaster::encode("occupancy", &occ.map(|s| s.code() as u32)));
            let label = grid.label.map(|&id| if id == 0 { 0 } else { p.registry().resolve(id) });
            rasters.push(RleRaster::encode("label", &label));
        }
        let names = p.class_names();
        let objects = p
            .registry()
            .tracklets()
            .map(|t| ObjectSummary {
                id: t.id,
                class_id: t.class_id,
                class_name: names.get(&t.class_id).cloned(),
                state: t.state.to_string(),
                confidence: t.confidence,
                last_seen: t.last_seen,
            })
            .collect();
        let cell = |c: (usize, usize)| [c.0, c.1];
        let plan = p.plan().map(|plan| PlanSummary {
            status: plan.status.as_str().to_string(),
            user_cell: p.user_cell().map(cell),
            goal_cell: plan.goal_cell.map(cell),
            goal_tracklet: plan.goal_tracklet,
            waypoints: plan.waypoints.iter().copied().map(cell).collect(),
        });
        Self {
            status,
            block: p.last_block().map_or(-1, |b| b as i64),
            goal_class: p.goal_class(),
            playback,
            trajectory_tail: tail
                .iter()
                .map(|(f, pose)| PoseEntry {
                    frame: *f,
                    pose: pose.to_row_major(),
                })
                .collect(),
            grid_origin: p.grid().map(|g| [g.origin.0, g.origin.1]),
            cell: p.config().grid_cell,
            rasters,
            objects,
            plan,
            plane: p
                .reference_plane()
                .map(|pl| [pl.normal.x, pl.normal.y, pl.normal.z, pl.offset]),
        }
    }

    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }

    pub fn decode(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("snapshot: {e}")))
    }

    pub fn raster(&self, layer: &str) -> Option<&RleRaster> {
        self.rasters.iter().find(|r| r.layer == layer)
    }
}

/// Everything readers can fetch for one published state.
#[derive(Clone, Debug)]
pub struct Published {
    pub snapshot: Snapshot,
    pub json: String,
    pub registry: String,
    pub trajectory: String,
    pub nav: BTreeMap<String, String>,
}

impl Published {
    fn new(snapshot: Snapshot, p: Option<&Pipeline>) -> Self {
        let json = snapshot.encode();
        let (registry, trajectory, nav) = match p {
            Some(p) => (
                p.registry().export(),
                format_trajectory(p.trajectory()),
                p.rasters()
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .chain(std::iter::once(("plan".to_string(), p.plan_text())))
                    .collect(),
            ),
            None => Default::default(),
        };
        Self {
            snapshot,
            json,
            registry,
            trajectory,
            nav,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    SetGoal(Option<u32>),
    Pause,
    Resume,
    Step,
    Speed(f64),
}

/// State shared between the HTTP handlers and the pipeline thread.
#[derive(Debug)]
pub struct Shared {
    published: watch::Sender<Arc<Published>>,
    commands: Mutex<mpsc::Sender<Command>>,
    class_names: BTreeMap<u32, String>,
}

impl Shared {
    pub fn latest(&self) -> Arc<Published> {
        self.published.borrow().clone()
    }

    pub fn subscribe(&self) -> watch::Receiver<Arc<Published>> {
        self.published.subscribe()
    }

    pub fn send(&self, cmd: Command) -> Result<()> {
        self.commands
            .lock()
            .map_err(|_| Error::Service("command queue poisoned".into()))?
            .send(cmd)
            .map_err(|_| Error::Service("pipeline has stopped".into()))
    }

    fn class_id(&self, name_or_id: &str) -> Option<u32> {
        name_or_id.parse().ok().or_else(|| {
            self.class_names
                .iter()
                .find(|(_, n)| n.eq_ignore_ascii_case(name_or_id))
                .map(|(&id, _)| id)
        })
    }
}

/// Pipeline-side end: applies commands between blocks and publishes.
#[derive(Debug)]
pub struct Controller {
    shared: Arc<Shared>,
    commands: mpsc::Receiver<Command>,
    paused: bool,
    steps: usize,
    speed: f64,
    last_block: Option<Instant>,
}

/// Creates the linked controller and shared state.
pub fn channel(class_names: BTreeMap<u32, String>, speed: f64) -> (Controller, Arc<Shared>) {
    let playback = PlaybackState { paused: false, speed };
    let (published, _) = watch::channel(Arc::new(Published::new(Snapshot::warming(playback), None)));
    let (tx, rx) = mpsc::channel();
    let shared = Arc::new(Shared {
        published,
        commands: Mutex::new(tx),
        class_names,
    });
    let ctl = Controller {
        shared: shared.clone(),
        commands: rx,
        paused: false,
        steps: 0,
        speed,
        last_block: None,
    };
    (ctl, shared)
}

impl Controller {
    pub fn playback(&self) -> PlaybackState {
        PlaybackState {
            paused: self.paused,
            speed: self.speed,
        }
    }

    pub fn publish(&self, p: &Pipeline, status: RunStatus) {
        let snap = if p.last_block().is_none() {
            Snapshot {
                status,
                goal_class: p.goal_class(),
                ..Snapshot::warming(self.playback())
            }
        } else {
            Snapshot::from_pipeline(p, status, self.playback())
        };
        let published = Published::new(snap, Some(p));
        self.shared.published.send_replace(Arc::new(published));
    }

    fn apply(&mut self, p: &mut Pipeline, cmd: Command) {
        match cmd {
            Command::SetGoal(c) => p.set_goal_class(c),
            Command::Pause => self.paused = true,
            Command::Resume => {
                self.paused = false;
                self.steps = 0;
            }
            Command::Step => self.steps += 1,
            Command::Speed(s) => self.speed = s.max(0.0),
        }
    }

    /// Runs between blocks: applies queued commands, honours pause and
    /// speed, and returns once the next block may start.
    pub fn boundary(&mut self, p: &mut Pipeline) {
        let status_of = |p: &Pipeline| if p.last_block().is_some() { RunStatus::Paused } else { RunStatus::Warming };
        loop {
            while let Ok(cmd) = self.commands.try_recv() {
                self.apply(p, cmd);
            }
            if self.paused && self.steps == 0 {
                self.publish(p, status_of(p));
                match self.commands.recv() {
                    Ok(cmd) => self.apply(p, cmd),
                    // every sender is gone: nobody can resume us
                    Err(_) => self.paused = false,
                }
                continue;
            }
            if self.speed > 0.0 {
                if let Some(last) = self.last_block {
                    let due = last + Duration::from_secs_f64(1.0 / self.speed);
                    let now = Instant::now();
                    if now < due {
                        if let Ok(cmd) = self.commands.recv_timeout(due - now) {
                            self.apply(p, cmd);
                        }
                        continue;
                    }
                }
            }
            break;
        }
        if self.paused && self.steps > 0 {
            self.steps -= 1;
        }
        self.last_block = Some(Instant::now());
    }

    /// Drives `frames` through the pipeline, publishing after every block.
    pub fn drive<I>(&mut self, p: &mut Pipeline, frames: I) -> Result<()>
    where
        I: IntoIterator<Item = Result<crate::ingest::FrameRecord>>,
    {
        self.publish(p, RunStatus::Warming);
        self.boundary(p);
        let result = crate::pipeline::drive(p, frames, |p| {
            self.publish(p, RunStatus::Running);
            self.boundary(p);
            Ok(true)
        });
        self.publish(p, RunStatus::Finished);
        result
    }
}

#[derive(Debug, Deserialize)]
struct GoalBody {
    class: String,
}

#[derive(Debug, Deserialize)]
struct PlaybackBody {
    action: String,
    speed: Option<f64>,
}

fn rejected(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

fn queued(shared: &Shared, cmd: Command) -> Response {
    match shared.send(cmd) {
        Ok(()) => (StatusCode::ACCEPTED, Json(serde_json::json!({ "queued": true }))).into_response(),
        Err(e) => rejected(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
    }
}

fn text(body: String) -> Response {
    ([(axum::http::header::CONTENT_TYPE, "text/plain; charset=utf-8")], body).into_response()
}

async fn get_state(State(s): State<Arc<Shared>>) -> Response {
    let p = s.latest();
    ([(axum::http::header::CONTENT_TYPE, "application/json")], p.json.clone()).into_response()
}

async fn get_events(State(s): State<Arc<Shared>>) -> Sse<impl Stream<Item = std::result::Result<Event, Infallible>>> {
    let rx = s.subscribe();
    let stream = futures::stream::unfold((rx, true), |(mut rx, first)| async move {
        if !first {
            rx.changed().await.ok()?;
        }
        let json = rx.borrow_and_update().json.clone();
        Some((Ok(Event::default().event("snapshot").data(json)), (rx, false)))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

async fn post_goal(State(s): State<Arc<Shared>>, Json(body): Json<GoalBody>) -> Response {
    match s.class_id(&body.class) {
        Some(id) => queued(&s, Command::SetGoal(Some(id))),
        None => rejected(StatusCode::BAD_REQUEST, format!("unknown class {:?}", body.class)),
    }
}

async fn delete_goal(State(s): State<Arc<Shared>>) -> Response {
    queued(&s, Command::SetGoal(None))
}

async fn post_playback(State(s): State<Arc<Shared>>, Json(body): Json<PlaybackBody>) -> Response {
    let cmd = match body.action.as_str() {
        "pause" => Command::Pause,
        "resume" => Command::Resume,
        "step" => Command::Step,
        "speed" => match body.speed {
            Some(v) if v.is_finite() && v >= 0.0 => Command::Speed(v),
            _ => return rejected(StatusCode::BAD_REQUEST, "speed needs a non-negative \"speed\" value"),
        },
        other => return rejected(StatusCode::BAD_REQUEST, format!("unknown action {other:?}")),
    };
    queued(&s, cmd)
}

async fn get_registry(State(s): State<Arc<Shared>>) -> Response {
    text(s.latest().registry.clone())
}

async fn get_trajectory(State(s): State<Arc<Shared>>) -> Response {
    text(s.latest().trajectory.clone())
}

async fn get_nav(State(s): State<Arc<Shared>>, Path(layer): Path<String>) -> Response {
    match s.latest().nav.get(&layer) {
        Some(body) => text(body.clone()),
        None => rejected(StatusCode::NOT_FOUND, format!("no layer {layer:?}")),
    }
}

pub fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/events", get(get_events))
        .route("/goal", post(post_goal).delete(delete_goal))
        .route("/playback", post(post_playback))
        .route("/registry", get(get_registry))
        .route("/trajectory", get(get_trajectory))
        .route("/nav/:layer", get(get_nav))
        .with_state(shared)
}

/// Binds `addr`; a busy port is a service error.
pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Service(format!("cannot bind {addr}: {e}")))
}

pub async fn serve(listener: tokio::net::TcpListener, shared: Arc<Shared>) -> Result<()> {
    axum::serve(listener, router(shared))
        .await
        .map_err(|e| Error::Service(e.to_string()))
}
