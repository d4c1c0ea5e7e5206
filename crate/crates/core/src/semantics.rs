//! Lifting 2-D instance masks to persistent, labeled 3-D objects.
//!
//! Tracklets are born only on the first keyframe of a block. Sampled mask
//! pixels of that keyframe are followed through the window by the supplied
//! track correspondences, and every later mask takes the class-consistent
//! majority label of the points landing inside it. Newly born tracklets are
//! re-identified against inactive ones by a partial-observation Chamfer
//! distance over per-frame median points, and at the end of each block every
//! unobserved object is checked for visibility and decays toward removal.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::align::{build_validity_mask, ValidityMask};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::{
    backproject, componentwise_median, project, voxel_key, Mask, RigidPose, Vec3, VoxelKey,
};
use crate::ingest::{Block, FrameRecord, InstanceMask, TrackPoint};
use crate::morphology;
use crate::spatial::{directed_mean_distance, NearestIndex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectState {
    Recent,
    Removed,
    Retained,
}

impl fmt::Display for ObjectState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectState::Recent => "recent",
            ObjectState::Removed => "removed",
            ObjectState::Retained => "retained",
        })
    }
}

impl FromStr for ObjectState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recent" => Ok(ObjectState::Recent),
            "removed" => Ok(ObjectState::Removed),
            "retained" => Ok(ObjectState::Retained),
            other => Err(Error::Format(format!("unknown object state {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub id: u32,
    pub class_id: u32,
    /// Median point per observing frame, capped to the most recent entries.
    pub per_frame_medians: BTreeMap<usize, Vec3>,
    pub last_seen: usize,
    pub confidence: f64,
    pub state: ObjectState,
    pub observed_in_block: bool,
    /// Block in which the tracklet was created.
    pub born_block: usize,
}

impl Tracklet {
    pub fn medians(&self) -> Vec<Vec3> {
        self.per_frame_medians.values().copied().collect()
    }

    fn record_median(&mut self, frame: usize, median: Vec3, cap: usize) {
        self.per_frame_medians.insert(frame, median);
        while self.per_frame_medians.len() > cap.max(1) {
            self.per_frame_medians.pop_first();
        }
    }

    fn mark_observed(&mut self, frame: usize) {
        self.observed_in_block = true;
        self.last_seen = self.last_seen.max(frame);
        self.state = ObjectState::Recent;
        self.confidence = 1.0;
    }
}

/// Persistent object memory with merge aliases.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Registry {
    tracklets: BTreeMap<u32, Tracklet>,
    aliases: BTreeMap<u32, u32>,
    next_id: u32,
    merges: usize,
}

impl Registry {
    pub fn new() -> Self {
        Self {
            next_id: 1,
            ..Self::default()
        }
    }

    pub fn create(&mut self, class_id: u32, frame: usize, block: usize) -> u32 {
        if self.next_id == 0 {
            self.next_id = 1;
        }
        let id = self.next_id;
        self.next_id += 1;
        self.tracklets.insert(
            id,
            Tracklet {
                id,
                class_id,
                per_frame_medians: BTreeMap::new(),
                last_seen: frame,
                confidence: 1.0,
                state: ObjectState::Recent,
                observed_in_block: false,
                born_block: block,
            },
        );
        id
    }

    /// Follows merge aliases to the live id.
    pub fn resolve(&self, mut id: u32) -> u32 {
        while let Some(&next) = self.aliases.get(&id) {
            id = next;
        }
        id
    }

    pub fn get(&self, id: u32) -> Option<&Tracklet> {
        self.tracklets.get(&self.resolve(id))
    }

    pub fn get_mut(&mut self, id: u32) -> Option<&mut Tracklet> {
        let id = self.resolve(id);
        self.tracklets.get_mut(&id)
    }

    pub fn tracklets(&self) -> impl Iterator<Item = &Tracklet> {
        self.tracklets.values()
    }

    pub fn len(&self) -> usize {
        self.tracklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracklets.is_empty()
    }

    pub fn merge_count(&self) -> usize {
        self.merges
    }

    pub fn count_in_state(&self, state: ObjectState) -> usize {
        self.tracklets.values().filter(|t| t.state == state).count()
    }

    /// Folds `from` into `into`; `from` becomes an alias.
    pub fn merge(&mut self, from: u32, into: u32, cap: usize) -> Result<()> {
        let (from, into) = (self.resolve(from), self.resolve(into));
        if from == into {
            return Ok(());
        }
        let src = self
            .tracklets
            .remove(&from)
            .ok_or_else(|| Error::Consistency(format!("merge source {from} missing")))?;
        let dst = self
            .tracklets
            .get_mut(&into)
            .ok_or_else(|| Error::Consistency(format!("merge target {into} missing")))?;
        for (frame, m) in src.per_frame_medians {
            dst.record_median(frame, m, cap);
        }
        dst.last_seen = dst.last_seen.max(src.last_seen);
        if src.observed_in_block {
            dst.observed_in_block = true;
        }
        self.aliases.insert(from, into);
        self.merges += 1;
        Ok(())
    }

    /// One line per live tracklet:
    /// `id class state confidence last_seen n_medians` then median triples.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for t in self.tracklets.values() {
            let _ = write!(
                out,
                "{} {} {} {} {} {}",
                t.id,
                t.class_id,
                t.state,
                t.confidence,
                t.last_seen,
                t.per_frame_medians.len()
            );
            for m in t.per_frame_medians.values() {
                let _ = write!(out, " {} {} {}", m.x, m.y, m.z);
            }
            out.push('\n');
        }
        out
    }
}

/// Parsed registry export line.
#[derive(Clone, Debug, PartialEq)]
pub struct RegistryRecord {
    pub id: u32,
    pub class_id: u32,
    pub state: ObjectState,
    pub confidence: f64,
    pub last_seen: usize,
    pub medians: Vec<Vec3>,
}

pub fn parse_registry(text: &str) -> Result<Vec<RegistryRecord>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("bad registry line {line:?}"));
        if f.len() < 6 {
            return Err(bad());
        }
        let n: usize = f[5].parse().map_err(|_| bad())?;
        if f.len() != 6 + 3 * n {
            return Err(bad());
        }
        let nums: Vec<f64> = f[6..].iter().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        out.push(RegistryRecord {
            id: f[0].parse().map_err(|_| bad())?,
            class_id: f[1].parse().map_err(|_| bad())?,
            state: f[2].parse()?,
            confidence: f[3].parse().map_err(|_| bad())?,
            last_seen: f[4].parse().map_err(|_| bad())?,
            medians: nums.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
        });
    }
    Ok(out)
}

/// A sampled keyframe pixel carrying a tracklet id.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPoint2D {
    pub u: f64,
    pub v: f64,
    pub tracklet_id: u32,
    pub point_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForegroundPoint {
    pub position: Vec3,
    pub class_id: u32,
    pub tracklet_id: u32,
    pub frame: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForegroundCloud {
    pub points: Vec<ForegroundPoint>,
}

impl ForegroundCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count_of(&self, tracklet: u32) -> usize {
        self.points.iter().filter(|p| p.tracklet_id == tracklet).count()
    }
}

pub fn erode_mask(mask: &Mask, radius: usize) -> Mask {
    morphology::erode(mask, radius)
}

/// Grid-aligned mask pixels (`u ≡ v ≡ 0 mod stride`); when the grid misses
/// the mask entirely, the mask pixel nearest the centroid.
pub fn sample_mask(mask: &Mask, stride: usize) -> Vec<(usize, usize)> {
    let stride = stride.max(1);
    let mut out: Vec<(usize, usize)> = mask
        .iter_cells()
        .filter(|&(u, v, &b)| b && u % stride == 0 && v % stride == 0)
        .map(|(u, v, _)| (u, v))
        .collect();
    if out.is_empty() {
        let pix: Vec<(usize, usize)> = mask.iter_cells().filter(|c| *c.2).map(|(u, v, _)| (u, v)).collect();
        if pix.is_empty() {
            return out;
        }
        let n = pix.len() as f64;
        let cu = pix.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cv = pix.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        let nearest = pix
            .iter()
            .min_by(|a, b| {
                let da = (a.0 as f64 - cu).powi(2) + (a.1 as f64 - cv).powi(2);
                let db = (b.0 as f64 - cu).powi(2) + (b.1 as f64 - cv).powi(2);
                da.total_cmp(&db)
            })
            .copied()
            .expect("non-empty");
        out.push(nearest);
    }
    out
}

#[inline]
fn pixel_of(u: f64, v: f64) -> (i64, i64) {
    (u.round() as i64, v.round() as i64)
}

fn in_mask(mask: &Mask, u: f64, v: f64) -> bool {
    let (x, y) = pixel_of(u, v);
    mask.in_bounds(x, y) && *mask.get(x as usize, y as usize)
}

/// Keeps at most `cap` items spread uniformly over the input order.
fn subsample<T: Copy>(items: &[T], cap: usize) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    (0..cap).map(|i| items[i * items.len() / cap]).collect()
}

/// Chooses keyframe track points for one mask: for each grid sample the
/// nearest visible track within half a stride inside the mask.
pub fn label_samples(
    mask: &Mask,
    sample_mask_src: &Mask,
    tracks: &[TrackPoint],
    tracklet_id: u32,
    config: &PipelineConfig,
) -> Vec<LabeledPoint2D> {
    let samples = sample_mask(sample_mask_src, config.sample_stride);
    let reach = (config.sample_stride as f64 / 2.0).max(0.5);
    let candidates: Vec<&TrackPoint> = tracks.iter().filter(|t| t.visible && in_mask(mask, t.u, t.v)).collect();
    let mut by_pixel: HashMap<(i64, i64), Vec<&TrackPoint>> = HashMap::new();
    for t in &candidates {
        by_pixel.entry(pixel_of(t.u, t.v)).or_default().push(t);
    }
    let r = reach.ceil() as i64;
    let mut used = HashSet::new();
    let mut picked = Vec::new();
    for (su, sv) in samples {
        let (su, sv) = (su as f64, sv as f64);
        let mut best: Option<(f64, &TrackPoint)> = None;
        for dy in -r..=r {
            for dx in -r..=r {
                let key = (su as i64 + dx, sv as i64 + dy);
                for t in by_pixel.get(&key).into_iter().flatten() {
                    let d = (t.u - su).abs().max((t.v - sv).abs());
                    if d <= reach && !used.contains(&t.point_id) {
                        let better = best.is_none_or(|(bd, bt)| d < bd || (d == bd && t.point_id < bt.point_id));
                        if better {
                            best = Some((d, t));
                        }
                    }
                }
            }
        }
        if let Some((_, t)) = best {
            used.insert(t.point_id);
            picked.push(LabeledPoint2D {
                u: t.u,
                v: t.v,
                tracklet_id,
                point_id: t.point_id,
            });
        }
    }
    subsample(&picked, config.max_points_per_instance)
}

/// Assignment of one mask in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskAssignment {
    pub instance_id: u16,
    pub class_id: u32,
    /// `None` marks an untracked mask.
    pub tracklet_id: Option<u32>,
}

/// Majority vote of class-consistent propagated points per mask. Each
/// tracklet labels at most one mask per frame; conflicts are resolved
/// greedily by descending vote count, then ascending tracklet id.
pub fn assign_masks(
    masks: &[InstanceMask],
    propagated: &[LabeledPoint2D],
    class_of: impl Fn(u32) -> Option<u32>,
) -> Vec<MaskAssignment> {
    let mut votes: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    for p in propagated {
        let Some(class) = class_of(p.tracklet_id) else {
            continue;
        };
        for (mi, m) in masks.iter().enumerate() {
            if m.class_id == class && in_mask(&m.mask, p.u, p.v) {
                *votes.entry((mi, p.tracklet_id)).or_default() += 1;
                break;
            }
        }
    }
    let mut ranked: Vec<((usize, u32), usize)> = votes.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0 .1.cmp(&b.0 .1)).then(a.0 .0.cmp(&b.0 .0)));
    let mut out: Vec<MaskAssignment> = masks
        .iter()
        .map(|m| MaskAssignment {
            instance_id: m.instance_id,
            class_id: m.class_id,
            tracklet_id: None,
        })
        .collect();
    let mut taken = HashSet::new();
    for ((mi, tid), _) in ranked {
        if out[mi].tracklet_id.is_none() && !taken.contains(&tid) {
            out[mi].tracklet_id = Some(tid);
            taken.insert(tid);
        }
    }
    out
}

/// Labeled 3-D points and the median of each lifted instance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LiftResult {
    pub points: Vec<ForegroundPoint>,
    pub medians: Vec<(u32, Vec3)>,
}

/// Back-projects eroded, valid pixels of every assigned mask. Masks without
/// valid pixels are skipped.
pub fn lift_instances(
    frame: &FrameRecord,
    assignment: &[MaskAssignment],
    pose: &RigidPose,
    validity: &ValidityMask,
    erosion_radius: usize,
) -> Result<LiftResult> {
    let mut out = LiftResult::default();
    for (m, a) in frame.instance_masks.iter().zip(assignment) {
        let Some(tid) = a.tracklet_id else { continue };
        let mut mask = erode_mask(&m.mask, erosion_radius);
        for (o, &ok) in mask.data_mut().iter_mut().zip(validity.mask.data()) {
            *o &= ok;
        }
        let cloud = backproject(&frame.sensor_depth, &frame.intrinsics, pose, &mask)?;
        if cloud.is_empty() {
            continue;
        }
        out.medians.push((tid, componentwise_median(&cloud.points)));
        out.points.extend(cloud.points.into_iter().map(|position| ForegroundPoint {
            position,
            class_id: m.class_id,
            tracklet_id: tid,
            frame: frame.index,
        }));
    }
    Ok(out)
}

/// Minimum of the two directed mean nearest-neighbor distances between median sets.
pub fn median_set_distance(a: &[Vec3], b: &[Vec3]) -> Option<f64> {
    let ia = NearestIndex::build(a);
    let ib = NearestIndex::build(b);
    Some(directed_mean_distance(a, &ib)?.min(directed_mean_distance(b, &ia)?))
}

/// Best same-class candidate under `merge_threshold`, ties to the lower id.
pub fn reidentify<'a>(
    new: &Tracklet,
    inactive: impl IntoIterator<Item = &'a Tracklet>,
    config: &PipelineConfig,
) -> Option<(u32, f64)> {
    let medians = new.medians();
    if medians.is_empty() {
        return None;
    }
    let mut best: Option<(u32, f64)> = None;
    for cand in inactive {
        if cand.class_id != new.class_id || cand.id == new.id {
            continue;
        }
        let Some(d) = median_set_distance(&medians, &cand.medians()) else {
            continue;
        };
        if d < config.merge_threshold && best.is_none_or(|(bid, bd)| d < bd || (d == bd && cand.id < bid)) {
            best = Some((cand.id, d));
        }
    }
    best
}

/// Visibility verdict of an unobserved object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visibility {
    OutOfView,
    Occluded,
    Visible,
}

pub fn object_visibility(
    medians: &[Vec3],
    frame: &FrameRecord,
    pose: &RigidPose,
    config: &PipelineConfig,
) -> Visibility {
    if medians.is_empty() {
        return Visibility::OutOfView;
    }
    let mut in_view = 0usize;
    let mut unoccluded = 0usize;
    for m in medians {
        let Some(p) = project(m, &frame.intrinsics, pose) else {
            continue;
        };
        in_view += 1;
        let (u, v) = p.pixel();
        let sensed = frame.sensor_depth.depth(u, v);
        if sensed > 0.0 && sensed > p.depth - config.occlusion_margin {
            unoccluded += 1;
        }
    }
    if (in_view as f64) < config.visibility_fraction * medians.len() as f64 {
        Visibility::OutOfView
    } else if 2 * unoccluded > in_view {
        Visibility::Visible
    } else {
        Visibility::Occluded
    }
}

/// End-of-block state update against the block's last frame.
pub fn update_object_states(
    registry: &mut Registry,
    frame: &FrameRecord,
    pose: &RigidPose,
    config: &PipelineConfig,
) {
    for t in registry.tracklets.values_mut() {
        if t.observed_in_block {
            t.state = ObjectState::Recent;
            t.confidence = 1.0;
            continue;
        }
        if t.state == ObjectState::Removed {
            continue;
        }
        match object_visibility(&t.medians(), frame, pose, config) {
            Visibility::OutOfView | Visibility::Occluded => t.state = ObjectState::Retained,
            Visibility::Visible => {
                t.confidence = (t.confidence - config.decay_rate).max(0.0);
                if t.confidence <= 1e-12 {
                    t.confidence = 0.0;
                    t.state = ObjectState::Removed;
                } else {
                    t.state = ObjectState::Retained;
                }
            }
        }
    }
}

/// Cloud view through the registry: ids resolved through merges, points of
/// Removed objects dropped. Uses stored payloads only.
pub fn rebuild_foreground_view(registry: &Registry, cloud: &ForegroundCloud) -> Result<ForegroundCloud> {
    let mut points = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        let id = registry.resolve(p.tracklet_id);
        let t = registry
            .tracklets
            .get(&id)
            .ok_or_else(|| Error::Consistency(format!("cloud references unknown tracklet {}", p.tracklet_id)))?;
        if t.state == ObjectState::Removed {
            continue;
        }
        points.push(ForegroundPoint {
            tracklet_id: id,
            ..*p
        });
    }
    Ok(ForegroundCloud { points })
}

/// Assignments of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameAssignment {
    pub frame: usize,
    pub masks: Vec<MaskAssignment>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SemanticBlockOutcome {
    pub assignments: Vec<FrameAssignment>,
    pub created: Vec<u32>,
    /// `(new, old)` pairs merged by re-identification.
    pub merged: Vec<(u32, u32)>,
    pub labeled_points: usize,
    pub new_foreground: std::ops::Range<usize>,
}

/// Streaming owner of the registry and the foreground cloud.
#[derive(Debug)]
pub struct SemanticLifter {
    config: PipelineConfig,
    pub registry: Registry,
    foreground: ForegroundCloud,
    occupied: HashSet<(u32, VoxelKey)>,
    /// Mask assignments of the frame that will key the next block.
    carried: Option<(usize, HashMap<u16, u32>)>,
}

impl SemanticLifter {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            config,
            registry: Registry::new(),
            foreground: ForegroundCloud::default(),
            occupied: HashSet::new(),
            carried: None,
        }
    }

    /// Stored cloud with raw ids.
    pub fn foreground(&self) -> &ForegroundCloud {
        &self.foreground
    }

    pub fn foreground_view(&self) -> Result<ForegroundCloud> {
        rebuild_foreground_view(&self.registry, &self.foreground)
    }

    /// Processes one block. `pose_of` returns global poses for the window's
    /// frames (anchors and block frames).
    pub fn process_block(
        &mut self,
        block: &Block,
        pose_of: impl Fn(usize) -> Option<RigidPose>,
        validity: &[ValidityMask],
    ) -> Result<SemanticBlockOutcome> {
        let cfg = self.config.clone();
        let mut outcome = SemanticBlockOutcome::default();
        for t in self.registry.tracklets.values_mut() {
            t.observed_in_block = false;
        }
        let fg_start = self.foreground.len();

        let keyframe = block.keyframe().clone();
        let kf_is_own = block.anchors.is_empty();
        let kf_pose = pose_of(keyframe.index)
            .ok_or_else(|| Error::Consistency(format!("no pose for keyframe {}", keyframe.index)))?;
        let kf_validity = if kf_is_own {
            validity[0].clone()
        } else {
            build_validity_mask(&keyframe, &cfg)
        };
        let kf_tracks: &[TrackPoint] = if kf_is_own {
            &keyframe.track_points
        } else {
            keyframe
                .next_window
                .as_ref()
                .map(|w| w.track_points.as_slice())
                .unwrap_or(&[])
        };
        let carried = match self.carried.take() {
            Some((frame, map)) if frame == keyframe.index => map,
            _ => HashMap::new(),
        };

        // Keyframe: carry ids, create tracklets for the rest.
        let mut kf_assign = Vec::with_capacity(keyframe.instance_masks.len());
        let mut fresh = Vec::new();
        for m in &keyframe.instance_masks {
            let tid = match carried.get(&m.instance_id) {
                Some(&t) if self.registry.get(t).is_some() => self.registry.resolve(t),
                _ => {
                    let t = self.registry.create(m.class_id, keyframe.index, block.index);
                    fresh.push(t);
                    t
                }
            };
            kf_assign.push(MaskAssignment {
                instance_id: m.instance_id,
                class_id: m.class_id,
                tracklet_id: Some(tid),
            });
        }
        outcome.created = fresh.clone();
        let kf_lift = lift_instances(&keyframe, &kf_assign, &kf_pose, &kf_validity, cfg.erosion_radius)?;
        for &(tid, median) in &kf_lift.medians {
            if fresh.contains(&tid) {
                if let Some(t) = self.registry.get_mut(tid) {
                    t.record_median(keyframe.index, median, cfg.max_medians);
                }
            }
        }

        // Re-identification of fresh tracklets against inactive ones.
        let active: BTreeSet<u32> = kf_assign.iter().filter_map(|a| a.tracklet_id).collect();
        let mut absorbed = BTreeSet::new();
        for &new_id in &fresh {
            let Some(new_t) = self.registry.get(new_id).cloned() else { continue };
            let candidates = self
                .registry
                .tracklets()
                .filter(|t| t.born_block < block.index && !active.contains(&t.id) && !absorbed.contains(&t.id));
            if let Some((old, _)) = reidentify(&new_t, candidates, &cfg) {
                self.registry.merge(new_id, old, cfg.max_medians)?;
                let t = self.registry.get_mut(old).expect("merge target");
                t.last_seen = t.last_seen.max(keyframe.index);
                t.state = ObjectState::Recent;
                t.confidence = 1.0;
                absorbed.insert(old);
                outcome.merged.push((new_id, old));
            }
        }
        for a in &mut kf_assign {
            a.tracklet_id = a.tracklet_id.map(|t| self.registry.resolve(t));
        }

        // Sample and label keyframe pixels.
        let mut labeled = Vec::new();
        for (m, a) in keyframe.instance_masks.iter().zip(&kf_assign) {
            let tid = a.tracklet_id.expect("keyframe masks are all assigned");
            let eroded = erode_mask(&m.mask, cfg.erosion_radius);
            let src = if eroded.count() > 0 { &eroded } else { &m.mask };
            labeled.extend(label_samples(&m.mask, src, kf_tracks, tid, &cfg));
        }
        outcome.labeled_points = labeled.len();
        let label_of: HashMap<u32, u32> = labeled.iter().map(|l| (l.point_id, l.tracklet_id)).collect();

        // Remaining frames of the block.
        for (frame, validity) in block.frames.iter().zip(validity) {
            let pose = pose_of(frame.index)
                .ok_or_else(|| Error::Consistency(format!("no pose for frame {}", frame.index)))?;
            let assignment = if kf_is_own && frame.index == keyframe.index {
                kf_assign.clone()
            } else {
                let propagated: Vec<LabeledPoint2D> = frame
                    .track_points
                    .iter()
                    .filter(|t| t.visible)
                    .filter_map(|t| {
                        label_of.get(&t.point_id).map(|&tid| LabeledPoint2D {
                            u: t.u,
                            v: t.v,
                            tracklet_id: tid,
                            point_id: t.point_id,
                        })
                    })
                    .collect();
                let registry = &self.registry;
                assign_masks(&frame.instance_masks, &propagated, |tid| registry.get(tid).map(|t| t.class_id))
            };
            let lift = lift_instances(frame, &assignment, &pose, validity, cfg.erosion_radius)?;
            for a in &assignment {
                if let Some(tid) = a.tracklet_id {
                    if let Some(t) = self.registry.get_mut(tid) {
                        t.mark_observed(frame.index);
                    }
                }
            }
            for &(tid, median) in &lift.medians {
                if let Some(t) = self.registry.get_mut(tid) {
                    t.record_median(frame.index, median, cfg.max_medians);
                }
            }
            self.store_points(lift.points);
            outcome.assignments.push(FrameAssignment {
                frame: frame.index,
                masks: assignment,
            });
        }

        // Carry assignments of the next keyframe.
        let next_kf = block.frames.len().saturating_sub(cfg.anchor_count);
        if let Some(fa) = outcome.assignments.get(next_kf) {
            let map = fa
                .masks
                .iter()
                .filter_map(|a| a.tracklet_id.map(|t| (a.instance_id, t)))
                .collect();
            self.carried = Some((fa.frame, map));
        }

        let last = block.last_frame();
        let last_pose = pose_of(last.index).expect("pose of last frame checked above");
        update_object_states(&mut self.registry, last, &last_pose, &cfg);
        outcome.new_foreground = fg_start..self.foreground.len();
        Ok(outcome)
    }

    fn store_points(&mut self, points: Vec<ForegroundPoint>) {
        let size = self.config.voxel_size();
        for p in points {
            if self.occupied.insert((p.tracklet_id, voxel_key(&p.position, size))) {
                self.foreground.points.push(p);
            }
        }
    }
}
