//! Per-block driver: align, lift semantics, track the floor and rebuild the
//! navigation map, then export artifacts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};

use crate::align::{AlignedBlock, BlockAligner};
use crate::config::{KvText, PipelineConfig};
use crate::error::{Error, Result};
use crate::geometry::{Grid, RigidPose, Vec3};
use crate::ingest::{blockify, format_trajectory, Block, FrameRecord, Session};
use crate::metrics::{ate_rmse, cloud_accuracy_completeness, id_consistency, AlignMode, EvalReport, IdTimeline};
use crate::nav::{
    export_raster, frontier_explore, goal_candidates, plan_path, Cell, CellState, FramePoint, GoalSelector, NavGrid,
    NavPlan, Occupancy, PlanStatus,
};
use crate::plane::{estimate_floor, PlaneEstimate, PlaneTracker, PlaneUpdate};
use crate::semantics::{ForegroundCloud, ObjectState, Registry, SemanticLifter};
use crate::synth::GroundTruth;

/// Sizes of the state a block needs while it is processed. Excludes the
/// accumulated cloud and the registry, which grow with scene content.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WorkingState {
    pub window_frames: usize,
    pub track_points: usize,
    pub labeled_points: usize,
    pub cells_touched: usize,
    pub retained_poses: usize,
}

impl WorkingState {
    pub fn total(&self) -> usize {
        self.window_frames + self.track_points + self.labeled_points + self.cells_touched + self.retained_poses
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub block: usize,
    pub first_frame: usize,
    pub last_frame: usize,
    pub scale: f64,
    pub scale_fallback: bool,
    pub created: usize,
    pub merged: usize,
    pub plane_update: Option<PlaneUpdate>,
    pub plan_status: PlanStatus,
    pub working_state: WorkingState,
    pub elapsed_ms: f64,
}

/// Summary written to `report.txt`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub frames: usize,
    pub blocks: usize,
    pub block_scales: Vec<f64>,
    pub scale_fallbacks: usize,
    pub tracklets: usize,
    pub merges: usize,
    pub recent: usize,
    pub retained: usize,
    pub removed: usize,
    pub plane_changes: usize,
    pub reference_plane: Option<PlaneEstimate>,
    pub background_points: usize,
    pub foreground_points: usize,
    pub peak_working_state: usize,
    pub plan_status: Option<PlanStatus>,
    pub plan_waypoints: usize,
    pub plan_goal_tracklet: Option<u32>,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut kv = KvText::default();
        kv.push("frames", self.frames);
        kv.push("blocks", self.blocks);
        let scales: Vec<String> = self.block_scales.iter().map(f64::to_string).collect();
        kv.push("block_scales", scales.join(" "));
        kv.push("scale_fallbacks", self.scale_fallbacks);
        kv.push("tracklets", self.tracklets);
        kv.push("merges", self.merges);
        kv.push("recent", self.recent);
        kv.push("retained", self.retained);
        kv.push("removed", self.removed);
        kv.push("plane_changes", self.plane_changes);
        match &self.reference_plane {
            Some(p) => kv.push(
                "reference_plane",
                format!("{} {} {} {}", p.normal.x, p.normal.y, p.normal.z, p.offset),
            ),
            None => kv.push("reference_plane", "none"),
        }
        kv.push("background_points", self.background_points);
        kv.push("foreground_points", self.foreground_points);
        kv.push("peak_working_state", self.peak_working_state);
        kv.push("plan_status", self.plan_status.map_or("none", PlanStatus::as_str));
        kv.push("plan_waypoints", self.plan_waypoints);
        kv.push(
            "plan_goal_tracklet",
            self.plan_goal_tracklet.map_or("none".to_string(), |t| t.to_string()),
        );
        kv.to_text()
    }
}

/// Streaming engine state.
#[derive(Debug)]
pub struct Pipeline {
    config: PipelineConfig,
    class_names: BTreeMap<u32, String>,
    aligner: BlockAligner,
    lifter: SemanticLifter,
    tracker: PlaneTracker,
    grid: Option<NavGrid>,
    occupancy: Option<Occupancy>,
    selector: GoalSelector,
    goal_class: Option<u32>,
    plan: Option<NavPlan>,
    user_cell: Option<Cell>,
    /// `(frame, instance, tracklet)` per assigned mask.
    assignments: Vec<(usize, u16, u32)>,
    blocks: Vec<BlockReport>,
    plane_changes: usize,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            aligner: BlockAligner::new(config.clone()),
            lifter: SemanticLifter::new(config.clone()),
            tracker: PlaneTracker::new(config.plane_history),
            goal_class: config.goal_class,
            config,
            class_names: BTreeMap::new(),
            grid: None,
            occupancy: None,
            selector: GoalSelector::default(),
            plan: None,
            user_cell: None,
            assignments: Vec::new(),
            blocks: Vec::new(),
            plane_changes: 0,
        })
    }

    pub fn with_class_names(mut self, names: BTreeMap<u32, String>) -> Self {
        self.class_names = names;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn class_names(&self) -> &BTreeMap<u32, String> {
        &self.class_names
    }

    /// Resolves a class given by name or numeric id.
    pub fn class_id(&self, name_or_id: &str) -> Option<u32> {
        name_or_id.parse().ok().or_else(|| {
            self.class_names
                .iter()
                .find(|(_, n)| n.eq_ignore_ascii_case(name_or_id))
                .map(|(&id, _)| id)
        })
    }

    pub fn goal_class(&self) -> Option<u32> {
        self.goal_class
    }

    /// Takes effect at the next block.
    pub fn set_goal_class(&mut self, class: Option<u32>) {
        if class != self.goal_class {
            self.selector.reset();
        }
        self.goal_class = class;
    }

    pub fn registry(&self) -> &Registry {
        &self.lifter.registry
    }

    pub fn trajectory(&self) -> &[(usize, RigidPose)] {
        &self.aligner.map.trajectory
    }

    pub fn background(&self) -> &[Vec3] {
        &self.aligner.map.background.points
    }

    pub fn foreground_view(&self) -> Result<ForegroundCloud> {
        self.lifter.foreground_view()
    }

    pub fn grid(&self) -> Option<&NavGrid> {
        self.grid.as_ref()
    }

    pub fn occupancy(&self) -> Option<&Occupancy> {
        self.occupancy.as_ref()
    }

    pub fn plan(&self) -> Option<&NavPlan> {
        self.plan.as_ref()
    }

    pub fn user_cell(&self) -> Option<Cell> {
        self.user_cell
    }

    pub fn reference_plane(&self) -> Option<&PlaneEstimate> {
        self.tracker.reference()
    }

    pub fn blocks(&self) -> &[BlockReport] {
        &self.blocks
    }

    pub fn last_block(&self) -> Option<usize> {
        self.blocks.last().map(|b| b.block)
    }

    pub fn assignments(&self) -> &[(usize, u16, u32)] {
        &self.assignments
    }

    pub fn process_block(&mut self, block: &Block) -> Result<&BlockReport> {
        let start = Instant::now();
        let mut report = self.process_inner(block).map_err(|e| e.in_block(block.index))?;
        report.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        debug!(
            "block {} frames {}..={} scale {} in {:.1} ms",
            report.block, report.first_frame, report.last_frame, report.scale, report.elapsed_ms
        );
        self.blocks.push(report);
        Ok(self.blocks.last().expect("just pushed"))
    }

    fn process_inner(&mut self, block: &Block) -> Result<BlockReport> {
        if let Some(last) = self.last_block() {
            if block.index != last + 1 {
                return Err(Error::Consistency(format!("block {} after block {last}", block.index)));
            }
        }
        let cfg = self.config.clone();
        let aligned = self.aligner.process(block)?;
        let AlignedBlock {
            alignment,
            validity,
            new_background,
        } = &aligned;
        let semantic = self
            .lifter
            .process_block(block, |f| alignment.pose_of(f).copied(), validity)?;
        for fa in &semantic.assignments {
            for m in &fa.masks {
                if let Some(t) = m.tracklet_id {
                    self.assignments.push((fa.frame, m.instance_id, t));
                }
            }
        }

        let plane_update = self.update_plane(block)?;
        let fg_view = self.lifter.foreground_view()?;
        let mut cells_touched = 0;
        let mut plan_status = PlanStatus::NoGoal;
        if let Some(reference) = self.tracker.reference().copied() {
            let map = &self.aligner.map;
            let rebuild = self.grid.is_none() || plane_update.is_some_and(PlaneUpdate::reference_changed);
            let grid = if rebuild {
                let all: Vec<FramePoint> = frame_points(&map.background.points, &map.background_frames, 0..map.background.len());
                self.grid.insert(NavGrid::reproject_all(reference, &all, &fg_view, &cfg))
            } else {
                let grid = self.grid.as_mut().expect("grid exists");
                let new = frame_points(&map.background.points, &map.background_frames, new_background.clone());
                grid.project_block(&new, &reference)?;
                grid.refresh_foreground(&fg_view);
                grid
            };
            let mut touched = HashSet::new();
            for p in &map.background.points[new_background.clone()] {
                touched.extend(grid.cell_of(p));
            }
            for p in &self.lifter.foreground().points[semantic.new_foreground.clone()] {
                touched.extend(grid.cell_of(&p.position));
            }
            cells_touched = touched.len();
            let occ = grid.build_occupancy(&cfg);
            let user_pos = alignment.pose_of(block.last_frame().index).map(RigidPose::center);
            let user = user_pos.and_then(|c| grid.clamped_cell_of(&c));
            let plan = match user {
                Some(user) => plan_for(
                    &occ,
                    grid,
                    &self.lifter.registry,
                    self.goal_class,
                    &mut self.selector,
                    user,
                    &cfg,
                )?,
                None => NavPlan::none(),
            };
            plan_status = plan.status;
            self.user_cell = user;
            self.plan = Some(plan);
            self.occupancy = Some(occ);
        }

        let window_frames = block.frames.len() + block.anchors.len();
        let track_points = block
            .anchors
            .iter()
            .chain(&block.frames)
            .map(|f| f.track_points.len() + f.next_window.as_ref().map_or(0, |w| w.track_points.len()))
            .sum();
        let first = block.frames.first().expect("non-empty block").index;
        Ok(BlockReport {
            block: block.index,
            first_frame: first,
            last_frame: block.last_frame().index,
            scale: alignment.scale,
            scale_fallback: alignment.scale_fallback,
            created: semantic.created.len(),
            merged: semantic.merged.len(),
            plane_update,
            plan_status,
            working_state: WorkingState {
                window_frames,
                track_points,
                labeled_points: semantic.labeled_points,
                cells_touched,
                retained_poses: self.aligner.retained_poses(),
            },
            elapsed_ms: 0.0,
        })
    }

    fn update_plane(&mut self, block: &Block) -> Result<Option<PlaneUpdate>> {
        let due = self.tracker.reference().is_none() || block.index.is_multiple_of(self.config.plane_every);
        if !due {
            return Ok(None);
        }
        let map = &self.aligner.map;
        match estimate_floor(&map.background.points, &map.trajectory, &self.config, block.last_frame().index) {
            Ok(estimate) => {
                let update = self.tracker.update(estimate, &self.config);
                if update == PlaneUpdate::Switched {
                    self.plane_changes += 1;
                    info!("block {}: reference plane switched", block.index);
                }
                Ok(Some(update))
            }
            Err(Error::NoPlane(why)) => {
                warn!("block {}: no floor estimate ({why})", block.index);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    pub fn run_report(&self) -> Result<RunReport> {
        let reg = self.registry();
        let plan = self.plan.as_ref();
        Ok(RunReport {
            frames: self.aligner.map.trajectory.len(),
            blocks: self.blocks.len(),
            block_scales: self.blocks.iter().map(|b| b.scale).collect(),
            scale_fallbacks: self.blocks.iter().filter(|b| b.scale_fallback).count(),
            tracklets: reg.len(),
            merges: reg.merge_count(),
            recent: reg.count_in_state(ObjectState::Recent),
            retained: reg.count_in_state(ObjectState::Retained),
            removed: reg.count_in_state(ObjectState::Removed),
            plane_changes: self.plane_changes,
            reference_plane: self.tracker.reference().copied(),
            background_points: self.aligner.map.background.len(),
            foreground_points: self.lifter.foreground_view()?.len(),
            peak_working_state: self.peak_working_state(),
            plan_status: plan.map(|p| p.status),
            plan_waypoints: plan.map_or(0, |p| p.waypoints.len()),
            plan_goal_tracklet: plan.and_then(|p| p.goal_tracklet),
        })
    }

    pub fn peak_working_state(&self) -> usize {
        self.blocks.iter().map(|b| b.working_state.total()).max().unwrap_or(0)
    }

    /// `x y z` background lines, then `x y z class id` foreground lines.
    pub fn cloud_text(&self) -> Result<String> {
        let mut out = String::new();
        for p in self.background() {
            let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
        }
        for p in &self.foreground_view()?.points {
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                p.position.x, p.position.y, p.position.z, p.class_id, p.tracklet_id
            );
        }
        Ok(out)
    }

    /// Named raster exports of the current map.
    pub fn rasters(&self) -> Vec<(&'static str, String)> {
        let (Some(grid), Some(occ)) = (&self.grid, &self.occupancy) else {
            return Vec::new();
        };
        let (w, h) = (grid.width(), grid.height());
        let mut density = Grid::new(w, h, 0.0f64);
        let mut min_height = Grid::new(w, h, f64::INFINITY);
        for y in 0..h {
            for x in 0..w {
                density.set(x, y, grid.background.density_mean(x, y) + grid.foreground.density_mean(x, y));
                let m = grid.background.min_height.get(x, y).min(*grid.foreground.min_height.get(x, y));
                min_height.set(x, y, m);
            }
        }
        vec![
            ("occupancy", export_raster("occupancy", occ, |s: &CellState| s.code().to_string())),
            ("density", export_raster("density", &density, |v| v.to_string())),
            ("min_height", export_raster("min_height", &min_height, |v| v.to_string())),
            ("label", export_raster("label", &grid.label, |v| v.to_string())),
        ]
    }

    pub fn plan_text(&self) -> String {
        let mut out = String::new();
        let Some(plan) = &self.plan else {
            out.push_str("status none\n");
            return out;
        };
        let _ = writeln!(out, "status {}", plan.status.as_str());
        let cell = |c: Option<Cell>| c.map_or("none".to_string(), |c| format!("{} {}", c.0, c.1));
        let _ = writeln!(out, "user {}", cell(self.user_cell));
        let _ = writeln!(out, "goal {}", cell(plan.goal_cell));
        let _ = writeln!(
            out,
            "goal_tracklet {}",
            plan.goal_tracklet.map_or("none".to_string(), |t| t.to_string())
        );
        let _ = writeln!(out, "cost {} {}", plan.cost.straight, plan.cost.diagonal);
        for c in &plan.waypoints {
            let _ = writeln!(out, "{} {}", c.0, c.1);
        }
        out
    }

    pub fn timings_text(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            let _ = writeln!(out, "{} {:.3}", b.block, b.elapsed_ms);
        }
        out
    }

    /// Writes every artifact under `out`. All but `timings.txt` are
    /// deterministic.
    pub fn write_outputs(&self, out: &Path) -> Result<RunReport> {
        let nav = out.join("nav");
        fs::create_dir_all(&nav).map_err(|e| Error::io(&nav, e))?;
        let write = |p: PathBuf, body: &str| fs::write(&p, body).map_err(|e| Error::io(p, e));
        let report = self.run_report()?;
        write(out.join("trajectory.txt"), &format_trajectory(self.trajectory()))?;
        write(out.join("cloud.xyz"), &self.cloud_text()?)?;
        write(out.join("registry.txt"), &self.registry().export())?;
        let mut assignments = String::new();
        for (f, i, t) in &self.assignments {
            let _ = writeln!(assignments, "{f} {i} {t}");
        }
        write(out.join("assignments.txt"), &assignments)?;
        for (name, body) in self.rasters() {
            write(nav.join(format!("{name}.txt")), &body)?;
        }
        write(nav.join("plan.txt"), &self.plan_text())?;
        write(out.join("report.txt"), &report.to_text())?;
        write(out.join("timings.txt"), &self.timings_text())?;
        Ok(report)
    }

    /// Compares the run so far with ground truth.
    pub fn evaluate(&self, gt: &GroundTruth) -> Result<EvalReport> {
        let est = self.trajectory();
        let done: HashSet<usize> = est.iter().map(|(i, _)| *i).collect();
        let reference: Vec<(usize, RigidPose)> = gt.trajectory.iter().filter(|(i, _)| done.contains(i)).copied().collect();
        let mut report = EvalReport {
            frames: est.len(),
            ..EvalReport::default()
        };
        if est.len() >= 2 {
            report.ate_none = Some(ate_rmse(est, &reference, AlignMode::None)?);
            report.ate_rigid = Some(ate_rmse(est, &reference, AlignMode::Rigid)?);
        }
        let mut pred: Vec<Vec3> = self.background().to_vec();
        pred.extend(self.foreground_view()?.points.iter().map(|p| p.position));
        if !pred.is_empty() && !gt.surface.is_empty() {
            report.cloud = Some(cloud_accuracy_completeness(&pred, &gt.surface)?);
        }
        let predicted: HashMap<(usize, u16), u32> =
            self.assignments.iter().map(|&(f, i, t)| ((f, i), self.registry().resolve(t))).collect();
        let mut timeline = IdTimeline::default();
        for &(frame, inst, obj) in gt.instances.iter().filter(|(f, _, _)| done.contains(f)) {
            timeline.push(obj, frame, predicted.get(&(frame, inst)).copied().unwrap_or(0))?;
        }
        report.gt_objects = timeline.tracks.len();
        if !timeline.tracks.is_empty() {
            report.id_consistency_without_midblock = id_consistency(&timeline, false).ok();
            report.id_consistency_with_midblock = id_consistency(&timeline, true).ok();
        }
        Ok(report)
    }
}

fn frame_points(points: &[Vec3], frames: &[usize], range: std::ops::Range<usize>) -> Vec<FramePoint> {
    range
        .map(|i| FramePoint {
            position: points[i],
            frame: frames[i],
        })
        .collect()
}

/// Semantic goal when a class is requested and a candidate survives,
/// otherwise frontier exploration.
fn plan_for(
    occ: &Occupancy,
    grid: &NavGrid,
    registry: &Registry,
    goal_class: Option<u32>,
    selector: &mut GoalSelector,
    user: Cell,
    cfg: &PipelineConfig,
) -> Result<NavPlan> {
    let snap = cfg.snap_radius / cfg.grid_cell;
    let attempt = |goal: Cell| match plan_path(occ, user, goal, snap) {
        Err(Error::InvalidStart(c)) => {
            warn!("user cell {c:?} has no free cell within the snap radius");
            Ok(NavPlan {
                goal_cell: Some(goal),
                ..NavPlan::none()
            })
        }
        other => other,
    };
    if let Some(class) = goal_class {
        let candidates = goal_candidates(&grid.label, occ, registry, class, user, cfg.grid_cell, cfg);
        if let Some(goal) = selector.choose(&candidates, cfg.goal_hysteresis) {
            let mut plan = attempt(goal.cell)?;
            plan.goal_tracklet = Some(goal.tracklet_id);
            return Ok(plan);
        }
    }
    match frontier_explore(occ, user) {
        Some(cell) => {
            let mut plan = attempt(cell)?;
            if plan.status == PlanStatus::Planned {
                plan.status = PlanStatus::Exploring;
            }
            Ok(plan)
        }
        None => Ok(NavPlan::none()),
    }
}

/// Options of a batch run.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub session: PathBuf,
    pub out: Option<PathBuf>,
    /// Explicit config file.
    pub config_file: Option<PathBuf>,
    pub max_frames: Option<usize>,
    pub seed: Option<u64>,
    /// Session directory holding `gt/`.
    pub eval: Option<PathBuf>,
}

/// Opens the session and builds its pipeline. Layout values from the
/// manifest override defaults; an explicit config contradicting them fails.
pub fn open_session(opts: &RunOptions) -> Result<(Session, Pipeline)> {
    let session = Session::open(&opts.session)?;
    let (base, explicit) = match &opts.config_file {
        Some(p) => {
            let kv = KvText::read(p)?;
            let mut cfg = PipelineConfig::default();
            cfg.apply(&kv)?;
            let explicit = kv.get("block_size").is_some() || kv.get("anchor_count").is_some();
            (cfg, explicit)
        }
        None => (PipelineConfig::default(), false),
    };
    let mut cfg = session.manifest().resolve_config(&base, explicit)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let pipeline = Pipeline::new(cfg)?.with_class_names(session.manifest().class_names.clone());
    Ok((session, pipeline))
}

/// Feeds frames block by block. `between` runs after every block and may
/// stop the run by returning `false`.
pub fn drive<I>(
    pipeline: &mut Pipeline,
    frames: I,
    mut between: impl FnMut(&mut Pipeline) -> Result<bool>,
) -> Result<()>
where
    I: IntoIterator<Item = Result<FrameRecord>>,
{
    let cfg = pipeline.config().clone();
    for block in blockify(frames, &cfg) {
        pipeline.process_block(&block?)?;
        if !between(pipeline)? {
            break;
        }
    }
    Ok(())
}

/// Outcome of a batch run.
#[derive(Debug)]
pub struct RunOutcome {
    pub pipeline: Pipeline,
    pub report: RunReport,
    pub eval: Option<EvalReport>,
}

pub fn run(opts: &RunOptions) -> Result<RunOutcome> {
    let (session, mut pipeline) = open_session(opts)?;
    let limit = opts.max_frames.unwrap_or(usize::MAX).min(session.len());
    drive(&mut pipeline, session.frames().take(limit), |_| Ok(true))?;
    finish(pipeline, opts)
}

/// Writes outputs and evaluates per the options.
pub fn finish(pipeline: Pipeline, opts: &RunOptions) -> Result<RunOutcome> {
    let report = match &opts.out {
        Some(out) => pipeline.write_outputs(out)?,
        None => pipeline.run_report()?,
    };
    let eval = match &opts.eval {
        Some(gt_root) => {
            let gt = GroundTruth::read(gt_root)?;
            let eval = pipeline.evaluate(&gt)?;
            if let Some(out) = &opts.out {
                let write = |p: PathBuf, body: &str| fs::write(&p, body).map_err(|e| Error::io(p, e));
                write(out.join("metrics.txt"), &eval.to_text())?;
                write(out.join("metrics.json"), &eval.to_json())?;
            }
            Some(eval)
        }
        None => None,
    };
    Ok(RunOutcome { pipeline, report, eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Renderer, SceneSpec};

    fn scene(frames: usize) -> SceneSpec {
        let text = format!(
            "frames={frames}\nwidth=48\nheight=36\nfx=24\nroom=-3 -3 3 3 2.6\n\
             object=56 -0.6 -0.4 0 -0.1 0.1 0.5\nobject=62 0.5 0.4 0 0.9 0.8 0.8\n\
             orbit=0 0 2.0 1.3 0.3 3 0\nscale=0.7\n"
        );
        SceneSpec::parse(&text).unwrap()
    }

    fn run_scene(spec: SceneSpec) -> Pipeline {
        let cfg = PipelineConfig {
            block_size: spec.block_size,
            anchor_count: spec.anchor_count,
            ..PipelineConfig::default()
        };
        let mut p = Pipeline::new(cfg).unwrap();
        let frames = Renderer::new(spec.clone()).stream(spec.frames).map(|r| r.map(|(f, _)| f));
        drive(&mut p, frames, |_| Ok(true)).unwrap();
        p
    }

    #[test]
    fn noiseless_blocks_recover_scale_and_poses() {
        let spec = scene(30);
        let p = run_scene(spec.clone());
        assert_eq!(p.blocks().len(), 3);
        for b in p.blocks() {
            assert!((b.scale - 0.7).abs() < 1e-4, "block {} scale {}", b.block, b.scale);
        }
        let gt = spec.true_trajectory(spec.frames);
        let ate = ate_rmse(p.trajectory(), &gt, AlignMode::None).unwrap();
        assert!(ate < 1e-5, "{ate}");
        assert!(p.reference_plane().is_some());
        assert!(p.registry().len() >= 2);
    }

    #[test]
    fn out_of_order_block_is_rejected() {
        let spec = scene(20);
        let cfg = PipelineConfig::default();
        let mut p = Pipeline::new(cfg.clone()).unwrap();
        let frames: Vec<_> = Renderer::new(spec).stream(20).map(|r| r.map(|(f, _)| f)).collect();
        let blocks: Vec<Block> = blockify(frames, &cfg).map(|b| b.unwrap()).collect();
        let err = p.process_block(&blocks[1]).unwrap_err();
        assert!(matches!(err, Error::InBlock { block: 1, .. }), "{err}");
    }
}
