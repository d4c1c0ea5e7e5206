//! Block-wise metric alignment: validity masking, scale recovery, anchor
//! based inter-block transforms and background cloud accumulation.

use std::collections::{BTreeMap, HashSet};

use log::warn;
use nalgebra::{Matrix4, Rotation3, SymmetricEigen, UnitQuaternion, Vector4};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::{
    backproject, lower_median, voxel_key, DepthMap, Mask, PointCloud, RigidPose, Vec3, VoxelKey,
};
use crate::ingest::{Block, FrameRecord};

/// Pixels trusted for both the predicted and the sensor depth.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidityMask {
    pub mask: Mask,
}

impl ValidityMask {
    pub fn count(&self) -> usize {
        self.mask.count()
    }
}

/// Confidence value below which a pixel falls into the lowest `q` fraction
/// of the frame: the element at rank `⌊q·N⌋` of the sorted confidences.
pub fn confidence_quantile(conf: &[f32], q: f64) -> f32 {
    if conf.is_empty() {
        return f32::INFINITY;
    }
    let mut sorted = conf.to_vec();
    let rank = ((q * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    let (_, v, _) = sorted.select_nth_unstable_by(rank, |a, b| a.total_cmp(b));
    *v
}

pub fn build_validity_mask(frame: &FrameRecord, config: &PipelineConfig) -> ValidityMask {
    let conf = &frame.pred_confidence;
    let cutoff = confidence_quantile(conf.data(), config.conf_quantile);
    let (lo, hi) = config.sensor_range;
    let mut mask = Mask::new(frame.width(), frame.height(), false);
    for (u, v, &c) in conf.iter_cells() {
        let sensor = *frame.sensor_depth.values.get(u, v) as f64;
        let pred = *frame.pred_depth.values.get(u, v);
        let ok = c as f64 >= config.conf_threshold
            && c >= cutoff
            && sensor > 0.0
            && sensor >= lo
            && sensor <= hi
            && pred > 0.0
            && pred.is_finite();
        if ok {
            mask.set(u, v, true);
        }
    }
    ValidityMask { mask }
}

/// Closed-form least-squares scale `Σ pred·sensor / Σ pred²` over valid pixels.
pub fn frame_scale(pred: &DepthMap, sensor: &DepthMap, mask: &ValidityMask) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &valid) in mask.mask.data().iter().enumerate() {
        if !valid {
            continue;
        }
        let p = pred.values.data()[i] as f64;
        let s = sensor.values.data()[i] as f64;
        num += p * s;
        den += p * p;
    }
    if den > 0.0 {
        Ok(num / den)
    } else {
        Err(Error::NoScale)
    }
}

/// Lower median of the available per-frame scales.
pub fn median_scale(scales: &[f64]) -> Option<f64> {
    if scales.is_empty() {
        return None;
    }
    let mut v = scales.to_vec();
    Some(lower_median(&mut v))
}

pub fn block_scale(block: &Block, masks: &[ValidityMask]) -> Result<f64> {
    let scales: Vec<f64> = block
        .frames
        .iter()
        .zip(masks)
        .filter_map(|(f, m)| frame_scale(&f.pred_depth, &f.sensor_depth, m).ok())
        .collect();
    median_scale(&scales).ok_or(Error::BlockScale { block: block.index })
}

pub fn scale_pose(pose: &RigidPose, s: f64) -> RigidPose {
    RigidPose::new(pose.rotation, pose.translation * s)
}

/// Multiplies translations and depths by `s`; rotations are untouched.
pub fn apply_block_scale(
    local_poses: &[RigidPose],
    depths: &[&DepthMap],
    s: f64,
) -> Result<(Vec<RigidPose>, Vec<DepthMap>)> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidScale(s));
    }
    Ok((
        local_poses.iter().map(|p| scale_pose(p, s)).collect(),
        depths.iter().map(|d| d.scaled(s)).collect(),
    ))
}

/// Eigen-decomposition average of rotations: the dominant eigenvector of
/// `Σ qᵢ qᵢᵀ`. Sign-invariant in the quaternions.
pub fn average_rotations(rotations: &[nalgebra::Matrix3<f64>]) -> Option<nalgebra::Matrix3<f64>> {
    if rotations.is_empty() {
        return None;
    }
    let mut acc = Matrix4::<f64>::zeros();
    for r in rotations {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
        let v = Vector4::new(q.w, q.i, q.j, q.k);
        acc += v * v.transpose();
    }
    let eig = SymmetricEigen::new(acc);
    let (best, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    let v = eig.eigenvectors.column(best);
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]));
    Some(*q.to_rotation_matrix().matrix())
}

/// Rigid transform carrying the scaled block-local frame into the global
/// frame. Candidates `Tᵢ = globalᵢ ∘ localᵢ⁻¹` are fused by rotation
/// averaging and a component-wise lower median of translations.
pub fn estimate_block_transform(
    anchor_global: &[RigidPose],
    anchor_local_scaled: &[RigidPose],
) -> Result<RigidPose> {
    if anchor_global.is_empty() || anchor_global.len() != anchor_local_scaled.len() {
        return Err(Error::Alignment(format!(
            "need matching non-empty anchor lists, got {} global / {} local",
            anchor_global.len(),
            anchor_local_scaled.len()
        )));
    }
    let candidates: Vec<RigidPose> = anchor_global
        .iter()
        .zip(anchor_local_scaled)
        .map(|(g, l)| g.compose(&l.inverse()))
        .collect();
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    let rotations: Vec<_> = candidates.iter().map(|c| c.rotation).collect();
    let rotation = average_rotations(&rotations).expect("non-empty");
    let mut translation = Vec3::zeros();
    let mut scratch = Vec::with_capacity(candidates.len());
    for axis in 0..3 {
        scratch.clear();
        scratch.extend(candidates.iter().map(|c| c.translation[axis]));
        translation[axis] = lower_median(&mut scratch);
    }
    Ok(RigidPose::new(rotation, translation))
}

/// Result of aligning one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockAlignment {
    pub block: usize,
    pub scale: f64,
    pub scale_fallback: bool,
    pub block_to_global: RigidPose,
    /// Global pose of every non-anchor frame, in frame order.
    pub per_frame_global: Vec<(usize, RigidPose)>,
    /// Global pose of each anchor as re-derived through this block.
    pub anchor_global: Vec<(usize, RigidPose)>,
    /// Largest rotation (rad) and translation (m) disagreement between the
    /// re-derived anchors and their poses from the previous block.
    pub anchor_residual: (f64, f64),
}

impl BlockAlignment {
    pub fn pose_of(&self, frame: usize) -> Option<&RigidPose> {
        self.per_frame_global
            .iter()
            .chain(&self.anchor_global)
            .find(|(i, _)| *i == frame)
            .map(|(_, p)| p)
    }
}

/// Trajectory plus the position-only background cloud.
#[derive(Clone, Debug, Default)]
pub struct GlobalMap {
    pub trajectory: Vec<(usize, RigidPose)>,
    pub background: PointCloud,
    /// Frame that contributed each background point.
    pub background_frames: Vec<usize>,
    occupied: HashSet<VoxelKey>,
}

impl GlobalMap {
    pub fn occupied_voxels(&self) -> usize {
        self.occupied.len()
    }
}

/// Background pixels: valid and outside every instance mask.
pub fn background_mask(frame: &FrameRecord, validity: &ValidityMask) -> Mask {
    let union = frame.instance_union();
    let mut out = validity.mask.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(union.data()) {
        *o &= !m;
    }
    out
}

/// Appends the block's frames to the trajectory and its background points
/// to the cloud. Points are voxel-downsampled per block; voxels already
/// present in the map are not added again. Returns the index range of the
/// new background points.
pub fn accumulate(
    map: &mut GlobalMap,
    block: &Block,
    alignment: &BlockAlignment,
    masks: &[ValidityMask],
    voxel_size: f64,
) -> Result<std::ops::Range<usize>> {
    let start = map.background.len();
    for (idx, pose) in &alignment.per_frame_global {
        if map.trajectory.last().is_some_and(|(last, _)| last >= idx) {
            return Err(Error::Consistency(format!("trajectory index {idx} not increasing")));
        }
        map.trajectory.push((*idx, *pose));
    }
    let mut block_voxels: BTreeMap<VoxelKey, (Vec3, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    for ((frame, validity), (idx, pose)) in block.frames.iter().zip(masks).zip(&alignment.per_frame_global) {
        debug_assert_eq!(frame.index, *idx);
        let bg = background_mask(frame, validity);
        let cloud = backproject(&frame.sensor_depth, &frame.intrinsics, pose, &bg)?;
        for p in cloud.points {
            let key = voxel_key(&p, voxel_size);
            if map.occupied.contains(&key) {
                continue;
            }
            block_voxels.entry(key).or_insert_with(|| {
                order.push(key);
                (p, *idx)
            });
        }
    }
    for key in order {
        let (p, frame) = block_voxels[&key];
        map.occupied.insert(key);
        map.background.points.push(p);
        map.background_frames.push(frame);
    }
    Ok(start..map.background.len())
}

/// Streaming aligner state: the previous scale and the global poses of the
/// frames that will anchor the next block.
#[derive(Debug)]
pub struct BlockAligner {
    config: PipelineConfig,
    previous_scale: Option<f64>,
    anchor_poses: BTreeMap<usize, RigidPose>,
    pub map: GlobalMap,
}

/// Everything the later stages need from alignment of one block.
#[derive(Clone, Debug)]
pub struct AlignedBlock {
    pub alignment: BlockAlignment,
    pub validity: Vec<ValidityMask>,
    pub new_background: std::ops::Range<usize>,
}

impl BlockAligner {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            config,
            previous_scale: None,
            anchor_poses: BTreeMap::new(),
            map: GlobalMap::default(),
        }
    }

    /// Global pose of a frame of the previous block kept as anchor.
    pub fn anchor_pose(&self, frame: usize) -> Option<&RigidPose> {
        self.anchor_poses.get(&frame)
    }

    /// Number of poses retained for the next block.
    pub fn retained_poses(&self) -> usize {
        self.anchor_poses.len()
    }

    pub fn align(&self, block: &Block) -> Result<(BlockAlignment, Vec<ValidityMask>)> {
        let validity: Vec<ValidityMask> = block
            .frames
            .iter()
            .map(|f| build_validity_mask(f, &self.config))
            .collect();
        let (scale, scale_fallback) = match block_scale(block, &validity) {
            Ok(s) => (s, false),
            Err(e) => match self.previous_scale {
                Some(prev) => {
                    warn!("block {}: {e}; reusing previous scale {prev}", block.index);
                    (prev, true)
                }
                None => return Err(e),
            },
        };
        let local: Vec<RigidPose> = block.frames.iter().map(|f| f.local_pose).collect();
        let (scaled_frames, _) = apply_block_scale(&local, &[], scale)?;

        let (block_to_global, anchor_global, anchor_residual) = if block.index == 0 {
            (RigidPose::identity(), Vec::new(), (0.0, 0.0))
        } else {
            if block.anchors.is_empty() {
                return Err(Error::Alignment(format!("block {} has no anchor frames", block.index)));
            }
            let mut global = Vec::with_capacity(block.anchors.len());
            let mut scaled_local = Vec::with_capacity(block.anchors.len());
            for a in &block.anchors {
                let g = self.anchor_poses.get(&a.index).ok_or_else(|| {
                    Error::Alignment(format!("no global pose for anchor frame {}", a.index))
                })?;
                let view = a.next_window.as_ref().ok_or_else(|| {
                    Error::Alignment(format!("anchor frame {} lacks its window pose", a.index))
                })?;
                global.push(*g);
                scaled_local.push(scale_pose(&view.local_pose, scale));
            }
            let t = estimate_block_transform(&global, &scaled_local)?.renormalized();
            let mut residual: (f64, f64) = (0.0, 0.0);
            let rederived: Vec<(usize, RigidPose)> = block
                .anchors
                .iter()
                .zip(&scaled_local)
                .zip(&global)
                .map(|((a, l), g)| {
                    let p = t.compose(l);
                    residual.0 = residual.0.max(p.rotation_angle_to(g));
                    residual.1 = residual.1.max((p.translation - g.translation).norm());
                    (a.index, p)
                })
                .collect();
            (t, rederived, residual)
        };
        let per_frame_global = block
            .frames
            .iter()
            .zip(&scaled_frames)
            .map(|(f, l)| (f.index, block_to_global.compose(l)))
            .collect();
        Ok((
            BlockAlignment {
                block: block.index,
                scale,
                scale_fallback,
                block_to_global,
                per_frame_global,
                anchor_global,
                anchor_residual,
            },
            validity,
        ))
    }

    /// Aligns the block, accumulates its background and keeps the trailing
    /// `k` global poses for the next block.
    pub fn process(&mut self, block: &Block) -> Result<AlignedBlock> {
        let (alignment, validity) = self.align(block)?;
        let new_background = accumulate(&mut self.map, block, &alignment, &validity, self.config.voxel_size())?;
        self.previous_scale = Some(alignment.scale);
        self.anchor_poses.clear();
        let keep = alignment.per_frame_global.len().saturating_sub(self.config.anchor_count);
        for (idx, pose) in &alignment.per_frame_global[keep..] {
            self.anchor_poses.insert(*idx, *pose);
        }
        Ok(AlignedBlock {
            alignment,
            validity,
            new_background,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_from_axis_angle, Grid, Intrinsics};
    use crate::ingest::{FrameRecord, InstanceMask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn frame_with(conf: Vec<f32>, sensor: Vec<f32>, pred: Vec<f32>, w: usize, h: usize) -> FrameRecord {
        FrameRecord {
            index: 0,
            sensor_depth: DepthMap::new(Grid::from_vec(w, h, sensor).unwrap()),
            pred_depth: DepthMap::new(Grid::from_vec(w, h, pred).unwrap()),
            pred_confidence: Grid::from_vec(w, h, conf).unwrap(),
            local_pose: RigidPose::identity(),
            intrinsics: Intrinsics::new(50.0, 50.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(),
            instance_masks: vec![],
            track_points: vec![],
            next_window: None,
        }
    }

    #[test]
    fn uniform_confidence_is_all_valid() {
        let f = frame_with(vec![2.0; 20], vec![1.0; 20], vec![1.0; 20], 5, 4);
        assert_eq!(build_validity_mask(&f, &PipelineConfig::default()).count(), 20);
    }

    #[test]
    fn low_confidence_pixel_dropped() {
        let mut conf = vec![2.0; 20];
        conf[7] = 1.0;
        let f = frame_with(conf, vec![1.0; 20], vec![1.0; 20], 5, 4);
        let m = build_validity_mask(&f, &PipelineConfig::default());
        assert!(!*m.mask.get(2, 1));
        assert_eq!(m.count(), 19);
    }

    #[test]
    fn quantile_excludes_bottom_tenth() {
        // 1.2, 1.21, ..., 2.19 shuffled
        let mut conf: Vec<f32> = (0..100).map(|i| 1.2 + 0.01 * i as f32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in (1..conf.len()).rev() {
            conf.swap(i, rng.gen_range(0..=i));
        }
        let f = frame_with(conf.clone(), vec![1.0; 100], vec![1.0; 100], 10, 10);
        let m = build_validity_mask(&f, &PipelineConfig::default());
        let mut sorted = conf.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        for (i, &c) in conf.iter().enumerate() {
            assert_eq!(m.mask.data()[i], c >= sorted[10], "pixel {i} conf {c}");
        }
        assert_eq!(m.count(), 90);
    }

    #[test]
    fn sensor_range_and_zero_depth() {
        let mut sensor = vec![1.0; 4];
        sensor[0] = 0.0;
        sensor[1] = 50.0;
        let mut pred = vec![1.0; 4];
        pred[2] = 0.0;
        let f = frame_with(vec![2.0; 4], sensor, pred, 2, 2);
        let m = build_validity_mask(&f, &PipelineConfig::default());
        assert_eq!(m.mask.data(), &[false, false, false, true]);
    }

    #[test]
    fn scale_closed_form_cases() {
        let all = ValidityMask {
            mask: Mask::new(3, 1, true),
        };
        let d = |v: Vec<f32>| DepthMap::new(Grid::from_vec(3, 1, v).unwrap());
        assert_eq!(frame_scale(&d(vec![1.0, 2.0, 3.0]), &d(vec![1.0, 2.0, 3.0]), &all).unwrap(), 1.0);
        assert_eq!(frame_scale(&d(vec![2.0, 4.0, 6.0]), &d(vec![1.0, 2.0, 3.0]), &all).unwrap(), 0.5);
        let none = ValidityMask {
            mask: Mask::new(3, 1, false),
        };
        assert!(matches!(frame_scale(&d(vec![1.0; 3]), &d(vec![1.0; 3]), &none), Err(Error::NoScale)));
    }

    #[test]
    fn median_scale_is_robust() {
        assert_eq!(median_scale(&[0.5, 0.5, 0.5]), Some(0.5));
        assert_eq!(median_scale(&[0.4, 0.5, 9.0]), Some(0.5));
        assert_eq!(median_scale(&[0.4, 0.5, 0.6, 9.0]), Some(0.5));
        assert_eq!(median_scale(&[]), None);
    }

    #[test]
    fn scaling_poses() {
        let p = RigidPose::new(rotation_from_axis_angle(&Vec3::z(), 0.3), Vec3::new(1.0, 2.0, 3.0));
        let (same, _) = apply_block_scale(&[p], &[], 1.0).unwrap();
        assert_eq!(same[0], p);
        let (half, _) = apply_block_scale(&[p], &[], 0.5).unwrap();
        assert_eq!(half[0].translation, Vec3::new(0.5, 1.0, 1.5));
        assert_eq!(half[0].rotation, p.rotation);
        assert!(matches!(apply_block_scale(&[p], &[], 0.0), Err(Error::InvalidScale(_))));
    }

    #[test]
    fn scaled_camera_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let poses: Vec<RigidPose> = (0..20)
            .map(|_| {
                RigidPose::new(
                    rotation_from_axis_angle(&Vec3::new(rng.gen(), rng.gen(), rng.gen()), rng.gen()),
                    Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
                )
            })
            .collect();
        let (scaled, _) = apply_block_scale(&poses, &[], 0.37).unwrap();
        for i in 0..poses.len() {
            for j in 0..poses.len() {
                let a = (poses[i].center() - poses[j].center()).norm();
                let b = (scaled[i].center() - scaled[j].center()).norm();
                assert!((b - 0.37 * a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transform_from_aligned_anchors_is_identity() {
        let p = RigidPose::new(rotation_from_axis_angle(&Vec3::x(), 0.2), Vec3::new(1.0, 0.0, 2.0));
        let q = RigidPose::new(rotation_from_axis_angle(&Vec3::y(), -0.4), Vec3::new(0.0, 1.0, 0.0));
        let t = estimate_block_transform(&[p, q], &[p, q]).unwrap();
        assert!(t.rotation_angle_to(&RigidPose::identity()) < 1e-9);
        assert!(t.translation.norm() < 1e-9);
    }

    #[test]
    fn single_anchor_is_exact() {
        let g = RigidPose::new(rotation_from_axis_angle(&Vec3::new(1.0, 2.0, 0.5), 1.1), Vec3::new(3.0, -1.0, 0.2));
        let l = RigidPose::new(rotation_from_axis_angle(&Vec3::y(), 0.7), Vec3::new(0.1, 0.0, 0.9));
        let t = estimate_block_transform(&[g], &[l]).unwrap();
        assert_eq!(t, g.compose(&l.inverse()));
        assert!(matches!(estimate_block_transform(&[], &[]), Err(Error::Alignment(_))));
    }

    fn block_of(frames: Vec<FrameRecord>, index: usize) -> Block {
        Block {
            index,
            frames: frames.into_iter().map(Arc::new).collect(),
            anchors: vec![],
        }
    }

    #[test]
    fn fully_masked_frame_adds_no_background() {
        let mut f = frame_with(vec![2.0; 16], vec![1.0; 16], vec![1.0; 16], 4, 4);
        f.instance_masks.push(InstanceMask {
            instance_id: 1,
            class_id: 1,
            mask: Mask::new(4, 4, true),
        });
        let block = block_of(vec![f], 0);
        let mut aligner = BlockAligner::new(PipelineConfig::default());
        let out = aligner.process(&block).unwrap();
        assert_eq!(out.new_background.len(), 0);
        assert_eq!(aligner.map.trajectory.len(), 1);
    }

    #[test]
    fn voxels_are_not_duplicated_across_blocks() {
        let mk = |i| {
            let mut f = frame_with(vec![2.0; 64], vec![1.0; 64], vec![1.0; 64], 8, 8);
            f.index = i;
            f.next_window = Some(crate::ingest::WindowView {
                local_pose: RigidPose::identity(),
                track_points: vec![],
            });
            f
        };
        let cfg = PipelineConfig {
            block_size: 1,
            anchor_count: 1,
            ..PipelineConfig::default()
        };
        let mut aligner = BlockAligner::new(cfg);
        let b0 = block_of(vec![mk(0)], 0);
        let first = aligner.process(&b0).unwrap().new_background.len();
        assert!(first > 0);
        let mut b1 = block_of(vec![mk(1)], 1);
        b1.anchors = b0.frames.clone();
        let second = aligner.process(&b1).unwrap();
        assert_eq!(second.new_background.len(), 0);
        assert!(second.alignment.anchor_residual.1 < 1e-12);
    }

    #[test]
    fn missing_scale_on_first_block_is_fatal() {
        let f = frame_with(vec![0.5; 4], vec![1.0; 4], vec![1.0; 4], 2, 2);
        let aligner = BlockAligner::new(PipelineConfig::default());
        assert!(matches!(aligner.align(&block_of(vec![f], 0)), Err(Error::BlockScale { block: 0 })));
    }
}
