//! Session directory format and block-ordered frame streaming.
//!
//! ```text
//! <session>/manifest                 key=value: version, frames, width, height, fx, fy, cx, cy, ...
//! <session>/frame_<i>/sensor_depth.f32   W·H little-endian float32, row-major, 0 = invalid
//! <session>/frame_<i>/pred_depth.f32     same layout, model units
//! <session>/frame_<i>/pred_conf.f32      same layout
//! <session>/frame_<i>/pose.txt           12 decimals, row-major 3x4 [R|t], window-local
//! <session>/frame_<i>/masks.u16          W·H little-endian uint16 instance raster, 0 = background
//! <session>/frame_<i>/mask_classes.txt   `<instance-id> <class-id>` lines
//! <session>/frame_<i>/tracks.txt         `<point-id> <u> <v> <visible:0|1>` lines
//! ```
//!
//! Local poses and tracks are expressed in the window of the block that owns
//! the frame (first window frame = identity). A frame that also serves as an
//! anchor of the next block carries that window's view in
//! `anchor_pose.txt` and `anchor_tracks.txt`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::config::{parse_value, KvText, PipelineConfig};
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Grid, Intrinsics, Mask, RigidPose};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub instance_id: u16,
    pub class_id: u32,
    pub mask: Mask,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    pub point_id: u32,
    pub u: f64,
    pub v: f64,
    pub visible: bool,
}

/// A frame as seen from the window of the following block (anchor role).
#[derive(Clone, Debug, PartialEq)]
pub struct WindowView {
    pub local_pose: RigidPose,
    pub track_points: Vec<TrackPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub sensor_depth: DepthMap,
    pub pred_depth: DepthMap,
    pub pred_confidence: Grid<f32>,
    pub local_pose: RigidPose,
    pub intrinsics: Intrinsics,
    pub instance_masks: Vec<InstanceMask>,
    pub track_points: Vec<TrackPoint>,
    pub next_window: Option<WindowView>,
}

impl FrameRecord {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Union of all instance masks.
    pub fn instance_union(&self) -> Mask {
        let mut out = Mask::new(self.width(), self.height(), false);
        for m in &self.instance_masks {
            for (o, &b) in out.data_mut().iter_mut().zip(m.mask.data()) {
                *o |= b;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            frame: self.index,
            message,
        };
        let (w, h) = (self.width(), self.height());
        let shaped = |g: &Grid<f32>| g.width() == w && g.height() == h;
        if !shaped(&self.sensor_depth.values) || !shaped(&self.pred_depth.values) || !shaped(&self.pred_confidence) {
            return Err(fail(format!("grid sizes differ from {w}x{h}")));
        }
        for (name, g) in [
            ("sensor_depth", &self.sensor_depth.values),
            ("pred_depth", &self.pred_depth.values),
            ("pred_conf", &self.pred_confidence),
        ] {
            if g.data().iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(fail(format!("{name} holds negative or non-finite values")));
            }
        }
        let mut union = Mask::new(w, h, false);
        let mut ids = HashSet::new();
        for m in &self.instance_masks {
            if m.mask.width() != w || m.mask.height() != h {
                return Err(fail(format!("mask {} has wrong size", m.instance_id)));
            }
            if m.instance_id == 0 || !ids.insert(m.instance_id) {
                return Err(fail(format!("bad or duplicate instance id {}", m.instance_id)));
            }
            for (o, &b) in union.data_mut().iter_mut().zip(m.mask.data()) {
                if *o && b {
                    return Err(fail(format!("mask {} overlaps another mask", m.instance_id)));
                }
                *o |= b;
            }
        }
        let check_tracks = |tracks: &[TrackPoint]| -> Result<()> {
            let mut seen = HashSet::new();
            for t in tracks {
                if !seen.insert(t.point_id) {
                    return Err(fail(format!("duplicate track point id {}", t.point_id)));
                }
            }
            Ok(())
        };
        check_tracks(&self.track_points)?;
        if let Some(view) = &self.next_window {
            check_tracks(&view.track_points)?;
        }
        Ok(())
    }
}

/// Parsed `manifest` file.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionManifest {
    pub frames: usize,
    pub intrinsics: Intrinsics,
    pub block_size: Option<usize>,
    pub anchor_count: Option<usize>,
    pub class_names: BTreeMap<u32, String>,
    /// Entries beyond the fixed keys, kept for config overrides.
    pub extra: KvText,
}

const FIXED_KEYS: &[&str] = &[
    "version", "frames", "width", "height", "fx", "fy", "cx", "cy", "block_size", "anchor_count",
];

impl SessionManifest {
    pub fn new(frames: usize, intrinsics: Intrinsics) -> Self {
        Self {
            frames,
            intrinsics,
            block_size: None,
            anchor_count: None,
            class_names: BTreeMap::new(),
            extra: KvText::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvText::parse(text)?;
        let version: u32 = kv.require("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported session version {version}")));
        }
        let intrinsics = Intrinsics::new(
            kv.require("fx")?,
            kv.require("fy")?,
            kv.require("cx")?,
            kv.require("cy")?,
            kv.require("width")?,
            kv.require("height")?,
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        let mut class_names = BTreeMap::new();
        let mut extra = KvText::default();
        for (k, v) in &kv.entries {
            if let Some(id) = k.strip_prefix("class.") {
                class_names.insert(parse_value(k, id)?, v.clone());
            } else if !FIXED_KEYS.contains(&k.as_str()) {
                extra.push(k.clone(), v);
            }
        }
        Ok(Self {
            frames: kv.require("frames")?,
            intrinsics,
            block_size: kv.optional("block_size")?,
            anchor_count: kv.optional("anchor_count")?,
            class_names,
            extra,
        })
    }

    pub fn to_text(&self) -> String {
        let i = &self.intrinsics;
        let mut kv = KvText::default();
        kv.push("version", FORMAT_VERSION);
        kv.push("frames", self.frames);
        kv.push("width", i.width);
        kv.push("height", i.height);
        kv.push("fx", i.fx);
        kv.push("fy", i.fy);
        kv.push("cx", i.cx);
        kv.push("cy", i.cy);
        if let Some(n) = self.block_size {
            kv.push("block_size", n);
        }
        if let Some(k) = self.anchor_count {
            kv.push("anchor_count", k);
        }
        for (id, name) in &self.class_names {
            kv.push(format!("class.{id}"), name);
        }
        kv.entries.extend(self.extra.entries.iter().cloned());
        kv.to_text()
    }

    /// Config with manifest overrides applied. Block layout keys of the
    /// manifest describe how the poses were produced and therefore win; a
    /// contradicting explicit config is rejected.
    pub fn resolve_config(&self, base: &PipelineConfig, explicit_layout: bool) -> Result<PipelineConfig> {
        let mut cfg = base.clone();
        cfg.apply(&self.extra)?;
        for (name, manifest_value, cfg_value) in [
            ("block_size", self.block_size, &mut cfg.block_size),
            ("anchor_count", self.anchor_count, &mut cfg.anchor_count),
        ] {
            if let Some(v) = manifest_value {
                if explicit_layout && *cfg_value != v {
                    return Err(Error::Config(format!(
                        "{name}={} contradicts the session's {name}={v}",
                        cfg_value
                    )));
                }
                *cfg_value = v;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn class_id(&self, name_or_id: &str) -> Option<u32> {
        name_or_id.parse().ok().or_else(|| {
            self.class_names
                .iter()
                .find(|(_, n)| n.as_str() == name_or_id)
                .map(|(id, _)| *id)
        })
    }
}

/// Handle on a session directory.
#[derive(Clone, Debug)]
pub struct Session {
    root: PathBuf,
    manifest: SessionManifest,
}

impl Session {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let root = path.as_ref().to_path_buf();
        let manifest_path = root.join("manifest");
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", manifest_path.display())))?;
        let manifest = SessionManifest::parse(&text)?;
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &SessionManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.frames
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames == 0
    }

    pub fn frame_dir(&self, index: usize) -> PathBuf {
        frame_dir(&self.root, index)
    }

    pub fn read_frame(&self, index: usize) -> Result<FrameRecord> {
        read_frame(&self.frame_dir(index), index, &self.manifest.intrinsics)
    }

    /// Lazily reads frames in index order, one at a time.
    pub fn frames(&self) -> impl Iterator<Item = Result<FrameRecord>> + '_ {
        (0..self.len()).map(move |i| self.read_frame(i))
    }
}

pub fn frame_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("frame_{index}"))
}

fn frame_error(index: usize, message: impl Into<String>) -> Error {
    Error::Validation {
        frame: index,
        message: message.into(),
    }
}

fn read_bytes(path: &Path, index: usize) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| frame_error(index, format!("cannot read {}: {e}", path.display())))
}

fn read_text(path: &Path, index: usize) -> Result<String> {
    fs::read_to_string(path).map_err(|e| frame_error(index, format!("cannot read {}: {e}", path.display())))
}

fn read_f32_grid(path: &Path, index: usize, w: usize, h: usize) -> Result<Grid<f32>> {
    let bytes = read_bytes(path, index)?;
    if bytes.len() != w * h * 4 {
        return Err(frame_error(
            index,
            format!("{} has {} bytes, expected {}", path.display(), bytes.len(), w * h * 4),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Grid::from_vec(w, h, data)
}

fn read_u16_grid(path: &Path, index: usize, w: usize, h: usize) -> Result<Grid<u16>> {
    let bytes = read_bytes(path, index)?;
    if bytes.len() != w * h * 2 {
        return Err(frame_error(
            index,
            format!("{} has {} bytes, expected {}", path.display(), bytes.len(), w * h * 2),
        ));
    }
    let data = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Grid::from_vec(w, h, data)
}

pub(crate) fn parse_pose(text: &str) -> Option<RigidPose> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse().ok())
        .collect::<Option<_>>()?;
    let arr: [f64; 12] = values.try_into().ok()?;
    Some(RigidPose::from_row_major(&arr))
}

pub(crate) fn format_pose(pose: &RigidPose) -> String {
    let vals = pose.to_row_major();
    let mut out = String::new();
    for (i, v) in vals.iter().enumerate() {
        let sep = if i % 4 == 3 { "\n" } else { " " };
        let _ = write!(out, "{v}{sep}");
    }
    out
}

fn parse_tracks(text: &str, index: usize) -> Result<Vec<TrackPoint>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let parsed = (|| {
            if f.len() != 4 {
                return None;
            }
            Some(TrackPoint {
                point_id: f[0].parse().ok()?,
                u: f[1].parse().ok()?,
                v: f[2].parse().ok()?,
                visible: match f[3] {
                    "0" => false,
                    "1" => true,
                    _ => return None,
                },
            })
        })();
        out.push(parsed.ok_or_else(|| frame_error(index, format!("bad track line {line:?}")))?);
    }
    Ok(out)
}

fn format_tracks(tracks: &[TrackPoint]) -> String {
    let mut out = String::new();
    for t in tracks {
        let _ = writeln!(out, "{} {} {} {}", t.point_id, t.u, t.v, u8::from(t.visible));
    }
    out
}

pub fn read_frame(dir: &Path, index: usize, intr: &Intrinsics) -> Result<FrameRecord> {
    let (w, h) = (intr.width, intr.height);
    let sensor = read_f32_grid(&dir.join("sensor_depth.f32"), index, w, h)?;
    let pred = read_f32_grid(&dir.join("pred_depth.f32"), index, w, h)?;
    let conf = read_f32_grid(&dir.join("pred_conf.f32"), index, w, h)?;
    let local_pose = parse_pose(&read_text(&dir.join("pose.txt"), index)?)
        .ok_or_else(|| frame_error(index, "pose.txt must hold 12 decimals"))?;
    let raster = read_u16_grid(&dir.join("masks.u16"), index, w, h)?;
    let mut classes = BTreeMap::new();
    for line in read_text(&dir.join("mask_classes.txt"), index)?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parsed = (|| Some((it.next()?.parse::<u16>().ok()?, it.next()?.parse::<u32>().ok()?)))();
        let (id, class) = parsed.ok_or_else(|| frame_error(index, format!("bad mask class line {line:?}")))?;
        classes.insert(id, class);
    }
    let mut masks: BTreeMap<u16, Mask> = classes.keys().map(|&id| (id, Mask::new(w, h, false))).collect();
    for (u, v, &id) in raster.iter_cells() {
        if id == 0 {
            continue;
        }
        match masks.get_mut(&id) {
            Some(m) => m.set(u, v, true),
            None => return Err(frame_error(index, format!("instance {id} has no class entry"))),
        }
    }
    let instance_masks = masks
        .into_iter()
        .map(|(id, mask)| InstanceMask {
            instance_id: id,
            class_id: classes[&id],
            mask,
        })
        .collect();
    let track_points = parse_tracks(&read_text(&dir.join("tracks.txt"), index)?, index)?;

    let anchor_pose_path = dir.join("anchor_pose.txt");
    let next_window = if anchor_pose_path.exists() {
        let local_pose = parse_pose(&read_text(&anchor_pose_path, index)?)
            .ok_or_else(|| frame_error(index, "anchor_pose.txt must hold 12 decimals"))?;
        let tracks_path = dir.join("anchor_tracks.txt");
        let track_points = if tracks_path.exists() {
            parse_tracks(&read_text(&tracks_path, index)?, index)?
        } else {
            Vec::new()
        };
        Some(WindowView {
            local_pose,
            track_points,
        })
    } else {
        None
    };

    let record = FrameRecord {
        index,
        sensor_depth: DepthMap::new(sensor),
        pred_depth: DepthMap::new(pred),
        pred_confidence: conf,
        local_pose,
        intrinsics: *intr,
        instance_masks,
        track_points,
        next_window,
    };
    record.validate()?;
    Ok(record)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_bytes(g: &Grid<f32>) -> Vec<u8> {
    g.data().iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn write_manifest(root: &Path, manifest: &SessionManifest) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_file(&root.join("manifest"), manifest.to_text().as_bytes())
}

pub fn write_frame(root: &Path, frame: &FrameRecord) -> Result<()> {
    frame.validate()?;
    let dir = frame_dir(root, frame.index);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_file(&dir.join("sensor_depth.f32"), &f32_bytes(&frame.sensor_depth.values))?;
    write_file(&dir.join("pred_depth.f32"), &f32_bytes(&frame.pred_depth.values))?;
    write_file(&dir.join("pred_conf.f32"), &f32_bytes(&frame.pred_confidence))?;
    write_file(&dir.join("pose.txt"), format_pose(&frame.local_pose).as_bytes())?;

    let mut raster = Grid::new(frame.width(), frame.height(), 0u16);
    let mut classes = String::new();
    for m in &frame.instance_masks {
        for (r, &b) in raster.data_mut().iter_mut().zip(m.mask.data()) {
            if b {
                *r = m.instance_id;
            }
        }
        let _ = writeln!(classes, "{} {}", m.instance_id, m.class_id);
    }
    let bytes: Vec<u8> = raster.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_file(&dir.join("masks.u16"), &bytes)?;
    write_file(&dir.join("mask_classes.txt"), classes.as_bytes())?;
    write_file(&dir.join("tracks.txt"), format_tracks(&frame.track_points).as_bytes())?;
    if let Some(view) = &frame.next_window {
        write_file(&dir.join("anchor_pose.txt"), format_pose(&view.local_pose).as_bytes())?;
        write_file(&dir.join("anchor_tracks.txt"), format_tracks(&view.track_points).as_bytes())?;
    }
    Ok(())
}

/// One line per pose: index then the 3×4 row-major matrix.
pub fn format_trajectory(poses: &[(usize, RigidPose)]) -> String {
    let mut out = String::new();
    for (i, p) in poses {
        let _ = write!(out, "{i}");
        for v in p.to_row_major() {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_trajectory(text: &str) -> Result<Vec<(usize, RigidPose)>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("bad trajectory line {line:?}"));
        if f.len() != 13 {
            return Err(bad());
        }
        let idx: usize = f[0].parse().map_err(|_| bad())?;
        let vals: Vec<f64> = f[1..].iter().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let arr: [f64; 12] = vals.try_into().map_err(|_| bad())?;
        out.push((idx, RigidPose::from_row_major(&arr)));
    }
    Ok(out)
}

/// `n` frames of block `index` plus the trailing `k` frames of the previous
/// block as anchors.
#[derive(Clone, Debug)]
pub struct Block {
    pub index: usize,
    pub frames: Vec<Arc<FrameRecord>>,
    pub anchors: Vec<Arc<FrameRecord>>,
}

impl Block {
    /// First window frame: the first anchor, or the first frame of block 0.
    pub fn keyframe(&self) -> &Arc<FrameRecord> {
        self.anchors.first().unwrap_or(&self.frames[0])
    }

    pub fn last_frame(&self) -> &Arc<FrameRecord> {
        self.frames.last().expect("non-empty block")
    }

    pub fn frame_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.frames.iter().map(|f| f.index)
    }
}

/// Groups an index-ordered frame stream into blocks.
pub struct Blockify<I> {
    stream: I,
    block_size: usize,
    anchor_count: usize,
    next_block: usize,
    previous_tail: Vec<Arc<FrameRecord>>,
    peak_buffered: usize,
    done: bool,
}

pub fn blockify<I>(stream: I, config: &PipelineConfig) -> Blockify<I::IntoIter>
where
    I: IntoIterator<Item = Result<FrameRecord>>,
{
    Blockify {
        stream: stream.into_iter(),
        block_size: config.block_size,
        anchor_count: config.anchor_count,
        next_block: 0,
        previous_tail: Vec::new(),
        peak_buffered: 0,
        done: false,
    }
}

impl<I> Blockify<I> {
    /// Largest number of frames held at once (anchors + current block).
    pub fn peak_buffered(&self) -> usize {
        self.peak_buffered
    }
}

impl<I> Iterator for Blockify<I>
where
    I: Iterator<Item = Result<FrameRecord>>,
{
    type Item = Result<Block>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut frames = Vec::with_capacity(self.block_size);
        let expected_start = self.next_block * self.block_size;
        while frames.len() < self.block_size {
            match self.stream.next() {
                Some(Ok(frame)) => {
                    let expected = expected_start + frames.len();
                    if frame.index != expected {
                        self.done = true;
                        return Some(Err(frame_error(
                            frame.index,
                            format!("out of order: expected frame {expected}"),
                        )));
                    }
                    frames.push(Arc::new(frame));
                    self.peak_buffered = self.peak_buffered.max(frames.len() + self.previous_tail.len());
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                None => {
                    self.done = true;
                    break;
                }
            }
        }
        if frames.is_empty() {
            return None;
        }
        let anchors = std::mem::take(&mut self.previous_tail);
        let tail_start = frames.len().saturating_sub(self.anchor_count);
        self.previous_tail = frames[tail_start..].to_vec();
        let block = Block {
            index: self.next_block,
            frames,
            anchors,
        };
        self.next_block += 1;
        Some(Ok(block))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_frame(index: usize) -> FrameRecord {
        let intr = Intrinsics::new(10.0, 10.0, 2.0, 1.5, 4, 3).unwrap();
        let mut mask = Mask::new(4, 3, false);
        mask.set(1, 1, true);
        FrameRecord {
            index,
            sensor_depth: DepthMap::new(Grid::new(4, 3, 1.5)),
            pred_depth: DepthMap::new(Grid::new(4, 3, 0.3)),
            pred_confidence: Grid::new(4, 3, 2.0),
            local_pose: RigidPose::from_translation(crate::geometry::Vec3::new(0.1, 0.2, 1.0 / 3.0)),
            intrinsics: intr,
            instance_masks: vec![InstanceMask {
                instance_id: 4,
                class_id: 7,
                mask,
            }],
            track_points: vec![TrackPoint {
                point_id: 1,
                u: 1.25,
                v: 0.1,
                visible: true,
            }],
            next_window: Some(WindowView {
                local_pose: RigidPose::identity(),
                track_points: vec![],
            }),
        }
    }

    fn config(n: usize, k: usize) -> PipelineConfig {
        PipelineConfig {
            block_size: n,
            anchor_count: k,
            ..PipelineConfig::default()
        }
    }

    fn sizes(frames: usize, n: usize, k: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
        blockify((0..frames).map(|i| Ok(tiny_frame(i))), &config(n, k))
            .map(|b| {
                let b = b.unwrap();
                (
                    b.frames.iter().map(|f| f.index).collect(),
                    b.anchors.iter().map(|f| f.index).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn blocks_of_ten_with_full_overlap() {
        let blocks = sizes(25, 10, 10);
        let lens: Vec<_> = blocks.iter().map(|(f, a)| (f.len(), a.len())).collect();
        assert_eq!(lens, vec![(10, 0), (10, 10), (5, 10)]);
        assert_eq!(blocks[2].1, (10..20).collect::<Vec<_>>());
    }

    #[test]
    fn single_block_has_no_anchors() {
        assert_eq!(sizes(10, 10, 10), vec![((0..10).collect(), vec![])]);
    }

    #[test]
    fn short_anchor_window() {
        let blocks = sizes(9, 4, 2);
        assert_eq!(blocks.len(), 3);
        assert_eq!(blocks[2].1, vec![6, 7]);
        let mut seen: Vec<usize> = blocks.iter().flat_map(|(f, _)| f.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn frames_are_released_after_their_last_block() {
        let mut weak = Vec::new();
        let mut it = blockify((0..50).map(|i| Ok(tiny_frame(i))), &config(4, 2));
        for block in it.by_ref() {
            let block = block.unwrap();
            weak.extend(block.frames.iter().map(Arc::downgrade));
            let alive = weak.iter().filter(|w| w.strong_count() > 0).count();
            assert!(alive <= 6, "{alive} frames alive");
        }
        assert!(it.peak_buffered() <= 6);
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = tiny_frame(3);
        let manifest = SessionManifest::new(4, f.intrinsics);
        write_manifest(dir.path(), &manifest).unwrap();
        write_frame(dir.path(), &f).unwrap();
        let session = Session::open(dir.path()).unwrap();
        assert_eq!(session.manifest(), &manifest);
        assert_eq!(session.read_frame(3).unwrap(), f);
    }

    #[test]
    fn missing_manifest_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Session::open(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_grid_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let f = tiny_frame(2);
        write_manifest(dir.path(), &SessionManifest::new(3, f.intrinsics)).unwrap();
        write_frame(dir.path(), &f).unwrap();
        fs::write(frame_dir(dir.path(), 2).join("pred_conf.f32"), [0u8; 5]).unwrap();
        let err = Session::open(dir.path()).unwrap().read_frame(2).unwrap_err();
        assert!(matches!(err, Error::Validation { frame: 2, .. }), "{err}");
    }

    #[test]
    fn overlapping_masks_rejected() {
        let mut f = tiny_frame(0);
        let dup = InstanceMask {
            instance_id: 5,
            ..f.instance_masks[0].clone()
        };
        f.instance_masks.push(dup);
        assert!(matches!(f.validate(), Err(Error::Validation { frame: 0, .. })));
    }

    #[test]
    fn manifest_layout_contradiction() {
        let mut m = SessionManifest::new(10, tiny_frame(0).intrinsics);
        m.block_size = Some(4);
        m.anchor_count = Some(2);
        let cfg = m.resolve_config(&PipelineConfig::default(), false).unwrap();
        assert_eq!((cfg.block_size, cfg.anchor_count), (4, 2));
        assert!(m.resolve_config(&PipelineConfig::default(), true).is_err());
    }
}
