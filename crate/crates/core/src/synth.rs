//! Box-world synthetic sessions with ground truth.
//!
//! A scene is an axis-aligned room (floor at z = 0, world z up) holding
//! axis-aligned boxes. Depth and instance rasters are ray cast; predicted
//! depth, window-local poses and confidences are derived from the truth with
//! optional seeded noise. Ground truth is expressed in the session gauge,
//! where frame 0 is the identity.
//!
//! Scene files use the `key=value` convention:
//!
//! ```text
//! frames=30
//! width=80
//! height=60
//! fx=40
//! fy=40
//! room=-3 -3 3 3 2.6            # xmin ymin xmax ymax ceiling
//! object=56 -0.6 -0.2 0 -0.2 0.2 0.5 remove=20
//! orbit=0 0 2.5 1.4 0.4 3 -90   # cx cy radius height look_z deg_per_frame start_deg
//! waypoint=0 0 0 1.4 0 -10      # frame x y z yaw_deg pitch_deg (instead of orbit)
//! scale=0.7
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{parse_numbers, parse_value, KvText};
use crate::error::{Error, Result};
use crate::geometry::{rotation_from_axis_angle, voxel_key, DepthMap, Grid, Intrinsics, Mask, RigidPose, Vec3};
use crate::ingest::{
    format_trajectory, parse_trajectory, write_frame, write_manifest, FrameRecord, InstanceMask, SessionManifest, TrackPoint, WindowView,
};

#[derive(Clone, Debug, PartialEq)]
pub struct BoxObject {
    pub id: u32,
    pub class_id: u32,
    pub min: Vec3,
    pub max: Vec3,
    /// First frame without the object.
    pub remove_frame: Option<usize>,
    /// First frame with the object.
    pub insert_frame: Option<usize>,
}

impl BoxObject {
    pub fn active(&self, frame: usize) -> bool {
        self.insert_frame.is_none_or(|f| frame >= f) && self.remove_frame.is_none_or(|f| frame < f)
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    /// Distance from `p` to the box surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        let outside = Vec3::new(
            (self.min.x - p.x).max(p.x - self.max.x).max(0.0),
            (self.min.y - p.y).max(p.y - self.max.y).max(0.0),
            (self.min.z - p.z).max(p.z - self.max.z).max(0.0),
        );
        if outside.norm() > 0.0 {
            return outside.norm();
        }
        (0..3)
            .map(|a| (p[a] - self.min[a]).min(self.max[a] - p[a]))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrajectorySpec {
    Orbit {
        center: (f64, f64),
        radius: f64,
        height: f64,
        look_z: f64,
        deg_per_frame: f64,
        start_deg: f64,
    },
    /// `(frame, position, yaw°, pitch°)`, linearly interpolated.
    Waypoints(Vec<(usize, Vec3, f64, f64)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub rot_deg: f64,
    pub trans_m: f64,
    /// Multiplicative σ of predicted depth.
    pub depth_sigma: f64,
    /// Multiplicative σ of sensor depth.
    pub sensor_sigma: f64,
    /// Predicted depth and local translations are divided by this factor.
    pub scale: f64,
    pub conf_high: f64,
    pub conf_low: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            rot_deg: 0.0,
            trans_m: 0.0,
            depth_sigma: 0.0,
            sensor_sigma: 0.0,
            scale: 1.0,
            conf_high: 3.0,
            conf_low: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub frames: usize,
    pub intrinsics: Intrinsics,
    pub room_min: Vec3,
    pub room_max: Vec3,
    pub objects: Vec<BoxObject>,
    pub trajectory: TrajectorySpec,
    pub noise: NoiseSpec,
    pub block_size: usize,
    pub anchor_count: usize,
    /// Sensor depth outside this range reads 0.
    pub sensor_range: (f64, f64),
    /// Pixel stride of track query points on window keyframes.
    pub query_stride: usize,
    pub seed: u64,
    pub class_names: BTreeMap<u32, String>,
}

impl SceneSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvText::parse(text)?;
        let width: usize = kv.optional("width")?.unwrap_or(80);
        let height: usize = kv.optional("height")?.unwrap_or(60);
        let fx: f64 = kv.optional("fx")?.unwrap_or(40.0);
        let fy: f64 = kv.optional("fy")?.unwrap_or(fx);
        let cx: f64 = kv.optional("cx")?.unwrap_or(width as f64 / 2.0 - 0.5);
        let cy: f64 = kv.optional("cy")?.unwrap_or(height as f64 / 2.0 - 0.5);
        let intrinsics = Intrinsics::new(fx, fy, cx, cy, width, height)?;
        let room = parse_numbers("room", kv.get("room").unwrap_or("-3 -3 3 3 2.6"))?;
        if room.len() != 5 {
            return Err(Error::Format("room needs xmin ymin xmax ymax ceiling".into()));
        }
        let mut objects = Vec::new();
        for (i, raw) in kv.get_all("object").enumerate() {
            objects.push(parse_object(i as u32 + 1, raw)?);
        }
        let mut waypoints = Vec::new();
        for raw in kv.get_all("waypoint") {
            let v = parse_numbers("waypoint", raw)?;
            if v.len() != 6 {
                return Err(Error::Format(format!("waypoint needs 6 values: {raw:?}")));
            }
            waypoints.push((v[0] as usize, Vec3::new(v[1], v[2], v[3]), v[4], v[5]));
        }
        let trajectory = match kv.get("orbit") {
            Some(raw) => {
                let v = parse_numbers("orbit", raw)?;
                if v.len() != 7 {
                    return Err(Error::Format("orbit needs 7 values".into()));
                }
                TrajectorySpec::Orbit {
                    center: (v[0], v[1]),
                    radius: v[2],
                    height: v[3],
                    look_z: v[4],
                    deg_per_frame: v[5],
                    start_deg: v[6],
                }
            }
            None if !waypoints.is_empty() => {
                waypoints.sort_by_key(|w| w.0);
                TrajectorySpec::Waypoints(waypoints)
            }
            None => return Err(Error::Format("scene needs orbit= or waypoint= entries".into())),
        };
        let d = NoiseSpec::default();
        let noise = NoiseSpec {
            rot_deg: kv.optional("rot_noise_deg")?.unwrap_or(d.rot_deg),
            trans_m: kv.optional("trans_noise")?.unwrap_or(d.trans_m),
            depth_sigma: kv.optional("depth_sigma")?.unwrap_or(d.depth_sigma),
            sensor_sigma: kv.optional("sensor_sigma")?.unwrap_or(d.sensor_sigma),
            scale: kv.optional("scale")?.unwrap_or(d.scale),
            conf_high: kv.optional("conf_high")?.unwrap_or(d.conf_high),
            conf_low: kv.optional("conf_low")?.unwrap_or(d.conf_low),
        };
        let sensor_range = match kv.get("sensor_range") {
            Some(raw) => {
                let v = parse_numbers("sensor_range", raw)?;
                if v.len() != 2 {
                    return Err(Error::Format("sensor_range needs 2 values".into()));
                }
                (v[0], v[1])
            }
            None => (0.1, 10.0),
        };
        let mut class_names = BTreeMap::new();
        for (k, v) in &kv.entries {
            if let Some(id) = k.strip_prefix("class.") {
                class_names.insert(parse_value(k, id)?, v.clone());
            }
        }
        let spec = Self {
            frames: kv.require("frames")?,
            intrinsics,
            room_min: Vec3::new(room[0], room[1], 0.0),
            room_max: Vec3::new(room[2], room[3], room[4]),
            objects,
            trajectory,
            noise,
            block_size: kv.optional("block_size")?.unwrap_or(10),
            anchor_count: kv.optional("anchor_count")?.unwrap_or(10),
            sensor_range,
            query_stride: kv.optional("query_stride")?.unwrap_or(2),
            seed: kv.optional("seed")?.unwrap_or(0),
            class_names,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let i = &self.intrinsics;
        let mut kv = KvText::default();
        kv.push("frames", self.frames);
        kv.push("width", i.width);
        kv.push("height", i.height);
        kv.push("fx", i.fx);
        kv.push("fy", i.fy);
        kv.push("cx", i.cx);
        kv.push("cy", i.cy);
        kv.push(
            "room",
            format!(
                "{} {} {} {} {}",
                self.room_min.x, self.room_min.y, self.room_max.x, self.room_max.y, self.room_max.z
            ),
        );
        for o in &self.objects {
            let mut s = format!(
                "{} {} {} {} {} {} {}",
                o.class_id, o.min.x, o.min.y, o.min.z, o.max.x, o.max.y, o.max.z
            );
            if let Some(f) = o.remove_frame {
                let _ = write!(s, " remove={f}");
            }
            if let Some(f) = o.insert_frame {
                let _ = write!(s, " insert={f}");
            }
            kv.push("object", s);
        }
        match &self.trajectory {
            TrajectorySpec::Orbit {
                center,
                radius,
                height,
                look_z,
                deg_per_frame,
                start_deg,
            } => kv.push(
                "orbit",
                format!("{} {} {radius} {height} {look_z} {deg_per_frame} {start_deg}", center.0, center.1),
            ),
            TrajectorySpec::Waypoints(w) => {
                for (f, p, yaw, pitch) in w {
                    kv.push("waypoint", format!("{f} {} {} {} {yaw} {pitch}", p.x, p.y, p.z));
                }
            }
        }
        let n = &self.noise;
        kv.push("rot_noise_deg", n.rot_deg);
        kv.push("trans_noise", n.trans_m);
        kv.push("depth_sigma", n.depth_sigma);
        kv.push("sensor_sigma", n.sensor_sigma);
        kv.push("scale", n.scale);
        kv.push("conf_high", n.conf_high);
        kv.push("conf_low", n.conf_low);
        kv.push("block_size", self.block_size);
        kv.push("anchor_count", self.anchor_count);
        kv.push("sensor_range", format!("{} {}", self.sensor_range.0, self.sensor_range.1));
        kv.push("query_stride", self.query_stride);
        kv.push("seed", self.seed);
        for (id, name) in &self.class_names {
            kv.push(format!("class.{id}"), name);
        }
        kv.to_text()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.frames == 0 {
            return bad("scene needs at least one frame".into());
        }
        if self.anchor_count == 0 || self.anchor_count > self.block_size {
            return bad("require 0 < anchor_count <= block_size".into());
        }
        if !(self.noise.scale > 0.0) {
            return bad("scale must be > 0".into());
        }
        if self.query_stride == 0 {
            return bad("query_stride must be >= 1".into());
        }
        let (lo, hi) = (self.room_min, self.room_max);
        if !(lo.x < hi.x && lo.y < hi.y && hi.z > 0.0) {
            return bad("empty room".into());
        }
        for o in &self.objects {
            let inside = (0..3).all(|a| o.min[a] >= lo[a] && o.max[a] <= hi[a] && o.min[a] < o.max[a]);
            if !inside {
                return bad(format!("object {} is not inside the room", o.id));
            }
        }
        for f in [0, self.frames / 2, self.frames - 1] {
            let c = self.camera_pose(f).translation;
            if !(c.z > 0.0 && c.z < hi.z && c.x > lo.x && c.x < hi.x && c.y > lo.y && c.y < hi.y) {
                return bad(format!("camera of frame {f} is outside the room"));
            }
        }
        Ok(())
    }

    /// World pose of the camera (x right, y down, z forward).
    pub fn camera_pose(&self, frame: usize) -> RigidPose {
        match &self.trajectory {
            TrajectorySpec::Orbit {
                center,
                radius,
                height,
                look_z,
                deg_per_frame,
                start_deg,
            } => {
                let a = (start_deg + deg_per_frame * frame as f64).to_radians();
                let pos = Vec3::new(center.0 + radius * a.cos(), center.1 + radius * a.sin(), *height);
                let target = Vec3::new(center.0, center.1, *look_z);
                look_at(pos, target - pos)
            }
            TrajectorySpec::Waypoints(w) => {
                let (pos, yaw, pitch) = interpolate(w, frame);
                let (yaw, pitch) = (yaw.to_radians(), pitch.to_radians());
                let dir = Vec3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin());
                look_at(pos, dir)
            }
        }
    }

    /// Maps world coordinates to the session gauge (frame 0 = identity).
    pub fn world_to_session(&self) -> RigidPose {
        self.camera_pose(0).inverse()
    }

    /// True trajectory in the session gauge.
    pub fn true_trajectory(&self, frames: usize) -> Vec<(usize, RigidPose)> {
        let g = self.world_to_session();
        (0..frames.min(self.frames)).map(|f| (f, g.compose(&self.camera_pose(f)))).collect()
    }

    /// Distance from a session-gauge point to the nearest scene surface,
    /// counting every object that exists at any frame.
    pub fn surface_distance(&self, p_session: &Vec3) -> f64 {
        let p = self.camera_pose(0).apply(p_session);
        let (lo, hi) = (self.room_min, self.room_max);
        let room = BoxObject {
            id: 0,
            class_id: 0,
            min: lo,
            max: hi,
            remove_frame: None,
            insert_frame: None,
        };
        self.objects
            .iter()
            .map(|o| o.surface_distance(&p))
            .fold(room.surface_distance(&p), f64::min)
    }

    fn window_keyframe(&self, block: usize) -> usize {
        if block == 0 {
            0
        } else {
            block * self.block_size - self.anchor_count
        }
    }

    /// Blocks whose window contains `frame`: its own block, plus the next
    /// when `frame` is one of the trailing anchors.
    fn windows_of(&self, frame: usize) -> (usize, Option<usize>) {
        let own = frame / self.block_size;
        let next = own + 1;
        let is_anchor = frame >= self.window_keyframe(next) && next * self.block_size < self.frames;
        (own, is_anchor.then_some(next))
    }
}

fn parse_object(id: u32, raw: &str) -> Result<BoxObject> {
    let mut nums = Vec::new();
    let (mut remove_frame, mut insert_frame) = (None, None);
    for tok in raw.split_whitespace() {
        if let Some(v) = tok.strip_prefix("remove=") {
            remove_frame = Some(parse_value("remove", v)?);
        } else if let Some(v) = tok.strip_prefix("insert=") {
            insert_frame = Some(parse_value("insert", v)?);
        } else {
            nums.push(parse_value::<f64>("object", tok)?);
        }
    }
    if nums.len() != 7 {
        return Err(Error::Format(format!("object needs class and 6 bounds: {raw:?}")));
    }
    Ok(BoxObject {
        id,
        class_id: nums[0] as u32,
        min: Vec3::new(nums[1], nums[2], nums[3]),
        max: Vec3::new(nums[4], nums[5], nums[6]),
        remove_frame,
        insert_frame,
    })
}

fn interpolate(w: &[(usize, Vec3, f64, f64)], frame: usize) -> (Vec3, f64, f64) {
    let first = &w[0];
    if frame <= first.0 {
        return (first.1, first.2, first.3);
    }
    for pair in w.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if frame <= b.0 {
            let t = if b.0 == a.0 { 1.0 } else { (frame - a.0) as f64 / (b.0 - a.0) as f64 };
            return (a.1 + (b.1 - a.1) * t, a.2 + (b.2 - a.2) * t, a.3 + (b.3 - a.3) * t);
        }
    }
    let last = w.last().expect("non-empty");
    (last.1, last.2, last.3)
}

/// Camera at `pos` looking along `dir` with world z up.
pub fn look_at(pos: Vec3, dir: Vec3) -> RigidPose {
    let f = dir.normalize();
    let right = f.cross(&Vec3::z()).try_normalize(1e-9).unwrap_or(Vec3::x());
    let down = f.cross(&right);
    RigidPose::new(Matrix3::from_columns(&[right, down, f]), pos)
}

/// Entry/exit ray parameters of an axis-aligned box (slab method).
fn slab(origin: &Vec3, dir: &Vec3, min: &Vec3, max: &Vec3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < min[a] || origin[a] > max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((min[a] - origin[a]) * inv, (max[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Ray-cast truth of one frame.
#[derive(Clone, Debug)]
pub struct TrueView {
    /// Camera-z depth per pixel.
    pub depth: Grid<f64>,
    /// Hit object id per pixel, 0 for the room.
    pub hit: Grid<u32>,
    pub pose: RigidPose,
}

pub fn raycast(spec: &SceneSpec, frame: usize) -> TrueView {
    let intr = &spec.intrinsics;
    let pose = spec.camera_pose(frame);
    let (w, h) = (intr.width, intr.height);
    let mut depth = Grid::new(w, h, 0.0);
    let mut hit = Grid::new(w, h, 0u32);
    let active: Vec<&BoxObject> = spec.objects.iter().filter(|o| o.active(frame)).collect();
    for v in 0..h {
        for u in 0..w {
            let dir = pose.rotation * intr.ray(u as f64, v as f64);
            let mut best = slab(&pose.translation, &dir, &spec.room_min, &spec.room_max)
                .map(|(_, t1)| t1)
                .unwrap_or(f64::INFINITY);
            let mut id = 0;
            for o in &active {
                if let Some((t0, _)) = slab(&pose.translation, &dir, &o.min, &o.max) {
                    if t0 > 1e-9 && t0 < best {
                        best = t0;
                        id = o.id;
                    }
                }
            }
            if best.is_finite() {
                depth.set(u, v, best);
            }
            hit.set(u, v, id);
        }
    }
    TrueView { depth, hit, pose }
}

/// Ground truth attached to a rendered frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTruth {
    pub index: usize,
    /// Pose in the session gauge.
    pub pose: RigidPose,
    /// `(instance id, object id)` of every mask.
    pub instances: Vec<(u16, u32)>,
}

fn frame_rng(seed: u64, frame: usize, stream: u64) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((frame as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(stream.wrapping_mul(0x94D0_49BB_1331_11EB));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Renders frames; caches the track queries of the two most recent windows.
#[derive(Debug)]
pub struct Renderer {
    spec: SceneSpec,
    queries: HashMap<usize, Arc<Vec<(u32, Vec3)>>>,
}

impl Renderer {
    pub fn new(spec: SceneSpec) -> Self {
        Self {
            spec,
            queries: HashMap::new(),
        }
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// World points of the object pixels of a window keyframe on the
    /// query grid, keyed by pixel index.
    fn window_queries(&mut self, block: usize, keyframe_view: Option<&TrueView>) -> Arc<Vec<(u32, Vec3)>> {
        if let Some(q) = self.queries.get(&block) {
            return q.clone();
        }
        let kf = self.spec.window_keyframe(block);
        let owned;
        let view = match keyframe_view {
            Some(v) => v,
            None => {
                owned = raycast(&self.spec, kf);
                &owned
            }
        };
        let intr = self.spec.intrinsics;
        let s = self.spec.query_stride;
        let mut out = Vec::new();
        for (u, v, &id) in view.hit.iter_cells() {
            if id != 0 && u % s == 0 && v % s == 0 {
                let d = *view.depth.get(u, v);
                let p = view.pose.apply(&(intr.ray(u as f64, v as f64) * d));
                out.push(((v * intr.width + u) as u32, p));
            }
        }
        let q = Arc::new(out);
        self.queries.insert(block, q.clone());
        let keep_from = block.saturating_sub(1);
        self.queries.retain(|&b, _| b >= keep_from);
        q
    }

    fn tracks(&self, queries: &[(u32, Vec3)], view: &TrueView, frame: usize) -> Vec<TrackPoint> {
        let intr = &self.spec.intrinsics;
        let inv = view.pose.inverse();
        let obj_of_query = |p: &Vec3| {
            self.spec
                .objects
                .iter()
                .filter(|o| o.surface_distance(p) < 1e-6)
                .any(|o| o.active(frame))
        };
        queries
            .iter()
            .map(|&(id, p)| {
                let c = inv.apply(&p);
                let (mut u, mut v, mut visible) = (-1.0, -1.0, false);
                if c.z > 1e-9 {
                    u = intr.fx * c.x / c.z + intr.cx;
                    v = intr.fy * c.y / c.z + intr.cy;
                    let (pu, pv) = (u.round(), v.round());
                    if pu >= 0.0 && pv >= 0.0 && (pu as usize) < intr.width && (pv as usize) < intr.height {
                        let d = *view.depth.get(pu as usize, pv as usize);
                        visible = (d - c.z).abs() <= 0.02 * c.z + 1e-3 && obj_of_query(&p);
                    }
                }
                TrackPoint {
                    point_id: id,
                    u,
                    v,
                    visible,
                }
            })
            .collect()
    }

    fn local_pose(&self, block: usize, view: &TrueView, frame: usize) -> RigidPose {
        let kf = self.spec.window_keyframe(block);
        if frame == kf {
            return RigidPose::identity();
        }
        let base = self.spec.camera_pose(kf);
        let rel = base.inverse().compose(&view.pose);
        let mut rel = RigidPose::new(rel.rotation, rel.translation / self.spec.noise.scale);
        let n = &self.spec.noise;
        if n.rot_deg > 0.0 || n.trans_m > 0.0 {
            let mut rng = frame_rng(self.spec.seed, frame, 1 + block as u64);
            let std = Normal::new(0.0, 1.0).expect("unit normal");
            let axis = Vec3::new(std.sample(&mut rng), std.sample(&mut rng), std.sample(&mut rng));
            let angle = n.rot_deg.to_radians() * std.sample(&mut rng);
            let dt = Vec3::new(std.sample(&mut rng), std.sample(&mut rng), std.sample(&mut rng)) * n.trans_m;
            rel = RigidPose::new(rotation_from_axis_angle(&axis, angle) * rel.rotation, rel.translation + dt);
        }
        rel
    }

    /// Renders frame `index` with its ground truth.
    pub fn render(&mut self, index: usize) -> Result<(FrameRecord, FrameTruth)> {
        let spec = self.spec.clone();
        if index >= spec.frames {
            return Err(Error::InvalidInput(format!("frame {index} beyond scene length {}", spec.frames)));
        }
        let view = raycast(&spec, index);
        let intr = spec.intrinsics;
        let (w, h) = (intr.width, intr.height);
        let n = &spec.noise;
        let mut rng = frame_rng(spec.seed, index, 0);
        let std = Normal::new(0.0, 1.0).expect("unit normal");

        let mut sensor = Grid::new(w, h, 0f32);
        let mut pred = Grid::new(w, h, 0f32);
        let mut conf = Grid::new(w, h, 0f32);
        for v in 0..h {
            for u in 0..w {
                let d = *view.depth.get(u, v);
                let sd = d * (1.0 + n.sensor_sigma * std.sample(&mut rng));
                if sd >= spec.sensor_range.0 && sd <= spec.sensor_range.1 {
                    sensor.set(u, v, sd as f32);
                }
                let pd = d / n.scale * (1.0 + n.depth_sigma * std.sample(&mut rng));
                pred.set(u, v, pd.max(0.0) as f32);
                let edge = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(du, dv)| {
                    let (x, y) = (u as i64 + du, v as i64 + dv);
                    view.depth.in_bounds(x, y) && (view.depth.get(x as usize, y as usize) - d).abs() > 0.05 * d
                });
                let c = if edge {
                    n.conf_low
                } else {
                    1.0 + (n.conf_high - 1.0) * (-d / 5.0).exp()
                };
                conf.set(u, v, c as f32);
            }
        }

        let mut present: Vec<u32> = view.hit.data().iter().copied().filter(|&id| id != 0).collect();
        present.sort_unstable();
        present.dedup();
        let mut instance_masks = Vec::new();
        let mut instances = Vec::new();
        for (rank, &obj) in present.iter().enumerate() {
            let o = spec.objects.iter().find(|o| o.id == obj).expect("hit ids are objects");
            let inst = rank as u16 + 1;
            instance_masks.push(InstanceMask {
                instance_id: inst,
                class_id: o.class_id,
                mask: view.hit.map(|&id| id == obj),
            });
            instances.push((inst, obj));
        }

        let (own, next) = spec.windows_of(index);
        let own_kf = spec.window_keyframe(own);
        let own_queries = self.window_queries(own, (own_kf == index).then_some(&view));
        let track_points = self.tracks(&own_queries, &view, index);
        let local_pose = self.local_pose(own, &view, index);
        let next_window = match next {
            Some(b) => {
                let kf = spec.window_keyframe(b);
                let q = self.window_queries(b, (kf == index).then_some(&view));
                Some(WindowView {
                    local_pose: self.local_pose(b, &view, index),
                    track_points: self.tracks(&q, &view, index),
                })
            }
            None => None,
        };

        let record = FrameRecord {
            index,
            sensor_depth: DepthMap::new(sensor),
            pred_depth: DepthMap::new(pred),
            pred_confidence: conf,
            local_pose,
            intrinsics: intr,
            instance_masks,
            track_points,
            next_window,
        };
        let truth = FrameTruth {
            index,
            pose: spec.world_to_session().compose(&view.pose),
            instances,
        };
        Ok((record, truth))
    }

    /// Frames `0..limit` in order.
    pub fn stream(mut self, limit: usize) -> impl Iterator<Item = Result<(FrameRecord, FrameTruth)>> {
        let n = limit.min(self.spec.frames);
        (0..n).map(move |i| self.render(i))
    }
}

/// True surface points of a frame in the session gauge.
pub fn true_surface_points(spec: &SceneSpec, frame: usize) -> Vec<Vec3> {
    let view = raycast(spec, frame);
    let g = spec.world_to_session();
    let intr = &spec.intrinsics;
    view.depth
        .iter_cells()
        .filter(|c| *c.2 > 0.0)
        .map(|(u, v, &d)| g.apply(&view.pose.apply(&(intr.ray(u as f64, v as f64) * d))))
        .collect()
}

pub fn manifest_for(spec: &SceneSpec) -> SessionManifest {
    let mut m = SessionManifest::new(spec.frames, spec.intrinsics);
    m.block_size = Some(spec.block_size);
    m.anchor_count = Some(spec.anchor_count);
    m.class_names = spec.class_names.clone();
    m
}

/// Ground truth stored next to a session under `gt/`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub trajectory: Vec<(usize, RigidPose)>,
    /// `(frame, instance id, object id)`.
    pub instances: Vec<(usize, u16, u32)>,
    pub surface: Vec<Vec3>,
}

pub const GT_SURFACE_VOXEL: f64 = 0.01;

impl GroundTruth {
    pub fn read(root: &Path) -> Result<Self> {
        let dir = root.join("gt");
        let text = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let trajectory = parse_trajectory(&text("trajectory.txt")?)?;
        let mut instances = Vec::new();
        for line in text("instances.txt")?.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Format(format!("bad instance line {line:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            instances.push((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
            ));
        }
        let mut surface = Vec::new();
        for line in text("surface.xyz")?.lines().filter(|l| !l.trim().is_empty()) {
            let v = parse_numbers("surface", line)?;
            if v.len() < 3 {
                return Err(Error::Format(format!("bad surface line {line:?}")));
            }
            surface.push(Vec3::new(v[0], v[1], v[2]));
        }
        Ok(Self {
            trajectory,
            instances,
            surface,
        })
    }
}

/// Writes the session frames, its manifest and the `gt/` directory.
pub fn write_session(spec: &SceneSpec, root: &Path) -> Result<()> {
    write_manifest(root, &manifest_for(spec))?;
    let gt_dir = root.join("gt");
    fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
    let mut renderer = Renderer::new(spec.clone());
    let mut trajectory = Vec::with_capacity(spec.frames);
    let mut instances = String::new();
    let mut surface = String::new();
    let mut seen = HashSet::new();
    for index in 0..spec.frames {
        let (record, truth) = renderer.render(index)?;
        write_frame(root, &record)?;
        trajectory.push((index, truth.pose));
        for (inst, obj) in &truth.instances {
            let _ = writeln!(instances, "{index} {inst} {obj}");
        }
        for p in true_surface_points(spec, index) {
            if seen.insert(voxel_key(&p, GT_SURFACE_VOXEL)) {
                let _ = writeln!(surface, "{} {} {}", p.x, p.y, p.z);
            }
        }
    }
    let write = |name: &str, body: &str| {
        let p = gt_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    write("trajectory.txt", &format_trajectory(&trajectory))?;
    write("instances.txt", &instances)?;
    write("surface.xyz", &surface)?;
    write("scene.spec", &spec.to_text())?;
    let mut objects = String::new();
    for o in &spec.objects {
        let _ = writeln!(
            objects,
            "{} {} {} {} {} {} {} {} {} {}",
            o.id,
            o.class_id,
            o.min.x,
            o.min.y,
            o.min.z,
            o.max.x,
            o.max.y,
            o.max.z,
            o.remove_frame.map_or("-".to_string(), |f| f.to_string()),
            o.insert_frame.map_or("-".to_string(), |f| f.to_string()),
        );
    }
    write("objects.txt", &objects)?;
    Ok(())
}

/// All-true mask matching the image size.
pub fn full_mask(intr: &Intrinsics) -> Mask {
    Grid::new(intr.width, intr.height, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::build_validity_mask;
    use crate::config::PipelineConfig;
    use crate::geometry::backproject;

    fn spec_text() -> &'static str {
        "frames=30\nwidth=40\nheight=30\nfx=20\nroom=-3 -3 3 3 2.6\n\
         object=56 -0.5 -0.5 0 0.5 0.5 0.6 remove=20\n\
         orbit=0 0 2 1.2 0.3 2 0\nscale=0.7\n"
    }

    #[test]
    fn spec_round_trip() {
        let s = SceneSpec::parse(spec_text()).unwrap();
        assert_eq!(SceneSpec::parse(&s.to_text()).unwrap(), s);
        assert_eq!(s.objects[0].remove_frame, Some(20));
        assert!(SceneSpec::parse("frames=3\nobject=1 5 5 0 6 6 1\norbit=0 0 1 1 1 1 0\n").is_err());
    }

    #[test]
    fn wall_at_three_meters() {
        let text = "frames=1\nwidth=16\nheight=12\nfx=40\nroom=-3 -3 3 3 2.6\nwaypoint=0 0 0 1.3 0 0\n";
        let s = SceneSpec::parse(text).unwrap();
        let v = raycast(&s, 0);
        assert!(v.depth.data().iter().all(|&d| (d - 3.0).abs() < 1e-12), "{:?}", v.depth.data());
    }

    #[test]
    fn removal_hides_object() {
        let s = SceneSpec::parse(spec_text()).unwrap();
        let mut r = Renderer::new(s);
        let (before, _) = r.render(19).unwrap();
        let (after, truth) = r.render(20).unwrap();
        assert!(!before.instance_masks.is_empty());
        assert!(after.instance_masks.is_empty() && truth.instances.is_empty());
    }

    #[test]
    fn render_backproject_round_trip() {
        let s = SceneSpec::parse(spec_text()).unwrap();
        let mut r = Renderer::new(s.clone());
        for f in [0, 7, 13] {
            let (rec, truth) = r.render(f).unwrap();
            let cloud = backproject(&rec.sensor_depth, &rec.intrinsics, &truth.pose, &full_mask(&rec.intrinsics)).unwrap();
            for p in &cloud.points {
                // stored depth is f32
                assert!(s.surface_distance(p) < 1e-5, "{}", s.surface_distance(p));
            }
            let truth_pts = true_surface_points(&s, f);
            assert_eq!(truth_pts.len(), cloud.len());
            for (a, b) in truth_pts.iter().zip(&cloud.points) {
                assert!((a - b).norm() < 1e-5 * a.norm().max(1.0));
            }
            for p in &truth_pts {
                assert!(s.surface_distance(p) < 1e-6);
            }
        }
    }

    #[test]
    fn frames_validate_and_tracks_follow_windows() {
        let s = SceneSpec::parse(spec_text()).unwrap();
        let mut r = Renderer::new(s.clone());
        let cfg = PipelineConfig::default();
        for f in 0..s.frames {
            let (rec, _) = r.render(f).unwrap();
            rec.validate().unwrap();
            assert!(build_validity_mask(&rec, &cfg).count() > 0);
            // anchors of the block after f's own, which must exist
            assert_eq!(rec.next_window.is_some(), f < 20, "frame {f}");
        }
    }

    #[test]
    fn keyframe_tracks_hit_their_pixels() {
        let s = SceneSpec::parse(spec_text()).unwrap();
        let mut r = Renderer::new(s.clone());
        let (rec, _) = r.render(0).unwrap();
        let visible: Vec<_> = rec.track_points.iter().filter(|t| t.visible).collect();
        assert!(!visible.is_empty());
        for t in visible {
            assert!((t.u - t.u.round()).abs() < 1e-6 && (t.v - t.v.round()).abs() < 1e-6);
            let id = t.point_id as usize;
            assert_eq!((t.u.round() as usize, t.v.round() as usize), (id % 40, id / 40));
        }
    }
}
