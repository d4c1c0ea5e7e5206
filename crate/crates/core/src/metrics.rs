//! Trajectory, reconstruction and identity metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use nalgebra::Matrix3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{RigidPose, Vec3};
use crate::spatial::NearestIndex;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMode {
    None,
    Rigid,
}

/// Rotation and translation minimizing `Σ‖R·aᵢ + t − bᵢ‖²` (Kabsch).
pub fn kabsch(a: &[Vec3], b: &[Vec3]) -> RigidPose {
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vec3>() / n;
    let cb = b.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        h += (p - ca) * (q - cb).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    RigidPose::new(r, cb - r * ca)
}

/// RMSE of camera-center differences, optionally after rigid alignment of
/// the estimate onto the reference.
pub fn ate_rmse(estimated: &[(usize, RigidPose)], reference: &[(usize, RigidPose)], mode: AlignMode) -> Result<f64> {
    if estimated.len() != reference.len() || estimated.iter().zip(reference).any(|(a, b)| a.0 != b.0) {
        return Err(Error::InvalidInput("trajectory index sets differ".into()));
    }
    if estimated.len() < 2 {
        return Err(Error::InvalidInput("ATE needs at least 2 poses".into()));
    }
    let est: Vec<Vec3> = estimated.iter().map(|(_, p)| p.translation).collect();
    let gt: Vec<Vec3> = reference.iter().map(|(_, p)| p.translation).collect();
    let est = match mode {
        AlignMode::None => est,
        AlignMode::Rigid => {
            let t = kabsch(&est, &gt);
            est.iter().map(|p| t.apply(p)).collect()
        }
    };
    let sq: f64 = est.iter().zip(&gt).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok((sq / est.len() as f64).sqrt())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CloudMetrics {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub compl_mean: f64,
    pub compl_median: f64,
}

fn nn_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    let index = NearestIndex::build(to);
    from.iter().map(|p| index.nearest_distance(p).expect("non-empty")).collect()
}

pub fn cloud_accuracy_completeness(pred: &[Vec3], gt: &[Vec3]) -> Result<CloudMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::InvalidInput("accuracy/completeness needs non-empty clouds".into()));
    }
    let mut acc = nn_distances(pred, gt);
    let mut compl = nn_distances(gt, pred);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(CloudMetrics {
        acc_mean: mean(&acc),
        acc_median: median(&mut acc),
        compl_mean: mean(&compl),
        compl_median: median(&mut compl),
    })
}

/// Per ground-truth object: `(frame, predicted id or 0)` in frame order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdTimeline {
    pub tracks: BTreeMap<u32, Vec<(usize, u32)>>,
}

impl IdTimeline {
    pub fn push(&mut self, gt_id: u32, frame: usize, predicted: u32) -> Result<()> {
        let track = self.tracks.entry(gt_id).or_default();
        if track.last().is_some_and(|&(f, _)| f >= frame) {
            return Err(Error::InvalidInput(format!("object {gt_id}: frame {frame} not increasing")));
        }
        track.push((frame, predicted));
        Ok(())
    }
}

/// Mean dominance share over ground-truth objects, in percent. The dominant
/// id is the most frequent non-zero prediction (ties to the lower id).
/// With `count_midblock` zeros stay in the denominator; without, objects
/// that never received an id are excluded.
pub fn id_consistency(timeline: &IdTimeline, count_midblock: bool) -> Result<f64> {
    let mut shares = Vec::new();
    for track in timeline.tracks.values() {
        if track.is_empty() {
            continue;
        }
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for &(_, id) in track {
            if id != 0 {
                *counts.entry(id).or_default() += 1;
            }
        }
        let dominant = counts.values().copied().max().unwrap_or(0);
        let nonzero: usize = counts.values().sum();
        if count_midblock {
            shares.push(dominant as f64 / track.len() as f64);
        } else if nonzero > 0 {
            shares.push(dominant as f64 / nonzero as f64);
        }
    }
    if shares.is_empty() {
        return Err(Error::InvalidInput("no ground-truth object with predictions".into()));
    }
    Ok(100.0 * shares.iter().sum::<f64>() / shares.len() as f64)
}

/// Evaluation summary written as `key=value` text and JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub frames: usize,
    pub ate_none: Option<f64>,
    pub ate_rigid: Option<f64>,
    pub cloud: Option<CloudMetrics>,
    pub id_consistency_without_midblock: Option<f64>,
    pub id_consistency_with_midblock: Option<f64>,
    pub gt_objects: usize,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: Option<f64>| {
            let _ = match v {
                Some(v) => writeln!(out, "{k}={v}"),
                None => writeln!(out, "{k}=none"),
            };
        };
        kv("ate_rmse_none", self.ate_none);
        kv("ate_rmse_rigid", self.ate_rigid);
        kv("accuracy_mean", self.cloud.map(|c| c.acc_mean));
        kv("accuracy_median", self.cloud.map(|c| c.acc_median));
        kv("completeness_mean", self.cloud.map(|c| c.compl_mean));
        kv("completeness_median", self.cloud.map(|c| c.compl_median));
        kv("id_consistency_without_midblock", self.id_consistency_without_midblock);
        kv("id_consistency_with_midblock", self.id_consistency_with_midblock);
        let _ = writeln!(out, "frames={}", self.frames);
        let _ = writeln!(out, "gt_objects={}", self.gt_objects);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}
