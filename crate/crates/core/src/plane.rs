//! Floor plane estimation and the reference-plane tracker.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::{RigidPose, Vec3};

/// Plane `{x : normal · x + offset = 0}` with unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneEstimate {
    pub normal: Vec3,
    pub offset: f64,
    pub inlier_count: usize,
    pub frame_index: usize,
}

impl PlaneEstimate {
    pub fn new(normal: Vec3, offset: f64) -> Self {
        let n = normal.norm();
        Self {
            normal: normal / n,
            offset: offset / n,
            inlier_count: 0,
            frame_index: 0,
        }
    }

    /// Plane through `point` with the given normal.
    pub fn through(point: &Vec3, normal: Vec3) -> Self {
        let n = normal.normalize();
        Self::new(n, -n.dot(point))
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }

    pub fn flipped(&self) -> Self {
        Self {
            normal: -self.normal,
            offset: -self.offset,
            ..*self
        }
    }

    /// Angle between normals in degrees.
    pub fn angle_to(&self, other: &PlaneEstimate) -> f64 {
        let cross = self.normal.cross(&other.normal).norm();
        cross.atan2(self.normal.dot(&other.normal)).to_degrees()
    }

    /// Orients the normal so that `viewpoint` lies on the positive side.
    pub fn oriented_toward(&self, viewpoint: &Vec3) -> Self {
        if self.signed_distance(viewpoint) < 0.0 {
            self.flipped()
        } else {
            *self
        }
    }

    fn canonical(&self) -> Self {
        let n = self.normal;
        let key = if n.z.abs() > 1e-12 {
            n.z
        } else if n.y.abs() > 1e-12 {
            n.y
        } else {
            n.x
        };
        if key < 0.0 {
            self.flipped()
        } else {
            *self
        }
    }
}

pub fn planes_match(a: &PlaneEstimate, b: &PlaneEstimate, config: &PipelineConfig) -> bool {
    a.angle_to(b) < config.plane_angle_tol && (a.offset - b.offset).abs() < config.plane_offset_tol
}

/// Orientation prior for floor candidates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GravityPrior {
    /// Unit vector pointing down.
    pub down: Vec3,
    pub max_angle_deg: f64,
    /// Point that must lie above the floor (trajectory centroid).
    pub viewpoint: Vec3,
}

impl GravityPrior {
    fn admits(&self, normal: &Vec3, offset: f64) -> Option<(Vec3, f64)> {
        let (n, d) = if normal.dot(&self.down) > 0.0 {
            (-normal, -offset)
        } else {
            (*normal, offset)
        };
        let cos = (-n.dot(&self.down)).clamp(-1.0, 1.0);
        let ok = cos >= self.max_angle_deg.to_radians().cos() && n.dot(&self.viewpoint) + d > 0.0;
        ok.then_some((n, d))
    }
}

/// Gravity prior from a trajectory. The down axis is the world axis of
/// smallest camera-center variance when it is well separated from the next
/// one, otherwise the mean camera down direction; its sign always follows
/// the mean camera down direction (image rows increasing).
pub fn gravity_prior(trajectory: &[(usize, RigidPose)], max_angle_deg: f64) -> Option<GravityPrior> {
    if trajectory.is_empty() {
        return None;
    }
    let n = trajectory.len() as f64;
    let centroid = trajectory.iter().map(|(_, p)| p.translation).sum::<Vec3>() / n;
    let cam_down = trajectory
        .iter()
        .map(|(_, p)| p.rotation * Vec3::y())
        .sum::<Vec3>();
    let cam_down = cam_down.try_normalize(1e-9)?;
    let var: Vec<f64> = (0..3)
        .map(|a| trajectory.iter().map(|(_, p)| (p.translation[a] - centroid[a]).powi(2)).sum::<f64>() / n)
        .collect();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| var[a].total_cmp(&var[b]));
    let down = if trajectory.len() >= 3 && var[order[0]] < 0.5 * var[order[1]] {
        let mut axis = Vec3::zeros();
        axis[order[0]] = 1.0;
        if axis.dot(&cam_down) < 0.0 {
            -axis
        } else {
            axis
        }
    } else {
        cam_down
    };
    Some(GravityPrior {
        down,
        max_angle_deg,
        viewpoint: centroid,
    })
}

fn refine(points: &[Vec3], inliers: &[usize]) -> Option<(Vec3, f64)> {
    if inliers.len() < 3 {
        return None;
    }
    let n = inliers.len() as f64;
    let centroid = inliers.iter().map(|&i| points[i]).sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for &i in inliers {
        let d = points[i] - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let normal = eig.eigenvectors.column(idx).into_owned().try_normalize(1e-12)?;
    Some((normal, -normal.dot(&centroid)))
}

/// Seeded RANSAC over 3-point hypotheses, refined by least squares over the
/// inliers of the best hypothesis.
pub fn ransac_plane(
    points: &[Vec3],
    iterations: usize,
    inlier_tol: f64,
    seed: u64,
    prior: Option<&GravityPrior>,
) -> Result<PlaneEstimate> {
    if points.len() < 3 {
        return Err(Error::NoPlane(format!("{} points", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vec3, f64)> = None;
    let scale = points.iter().map(|p| p.norm()).fold(1.0, f64::max);
    for _ in 0..iterations.max(1) {
        let i = rng.gen_range(0..points.len());
        let j = rng.gen_range(0..points.len());
        let k = rng.gen_range(0..points.len());
        if i == j || j == k || i == k {
            continue;
        }
        let cross = (points[j] - points[i]).cross(&(points[k] - points[i]));
        if cross.norm() <= 1e-12 * scale * scale {
            continue;
        }
        let mut normal = cross.normalize();
        let mut offset = -normal.dot(&points[i]);
        if let Some(prior) = prior {
            match prior.admits(&normal, offset) {
                Some((n, d)) => (normal, offset) = (n, d),
                None => continue,
            }
        }
        let count = points
            .iter()
            .filter(|p| (normal.dot(p) + offset).abs() <= inlier_tol)
            .count();
        if best.is_none_or(|(c, _, _)| count > c) {
            best = Some((count, normal, offset));
        }
    }
    let (_, normal, offset) =
        best.ok_or_else(|| Error::NoPlane("no admissible non-degenerate hypothesis".into()))?;
    let inliers: Vec<usize> = (0..points.len())
        .filter(|&i| (normal.dot(&points[i]) + offset).abs() <= inlier_tol)
        .collect();
    let (mut rn, mut rd) = refine(points, &inliers).unwrap_or((normal, offset));
    if rn.dot(&normal) < 0.0 {
        rn = -rn;
        rd = -rd;
    }
    let mut plane = PlaneEstimate::new(rn, rd);
    plane.inlier_count = points.iter().filter(|p| plane.signed_distance(p).abs() <= inlier_tol).count();
    Ok(match prior {
        Some(p) => plane.oriented_toward(&p.viewpoint),
        None => plane.canonical(),
    })
}

/// Floor estimate from the accumulated cloud under the trajectory prior.
/// Large clouds are thinned by a fixed stride before sampling.
pub fn estimate_floor(
    cloud: &[Vec3],
    trajectory: &[(usize, RigidPose)],
    config: &PipelineConfig,
    frame_index: usize,
) -> Result<PlaneEstimate> {
    let prior = gravity_prior(trajectory, config.plane_prior_deg);
    let stride = cloud.len().div_ceil(config.ransac_max_points.max(3)).max(1);
    let thinned: Vec<Vec3> = cloud.iter().step_by(stride).copied().collect();
    let mut plane = ransac_plane(
        &thinned,
        config.ransac_iterations,
        config.ransac_inlier_tol,
        config.seed ^ frame_index as u64,
        prior.as_ref(),
    )?;
    plane.frame_index = frame_index;
    Ok(plane)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlaneUpdate {
    Initialized,
    Unchanged,
    Switched,
}

impl PlaneUpdate {
    pub fn reference_changed(self) -> bool {
        !matches!(self, PlaneUpdate::Unchanged)
    }
}

#[derive(Clone, Debug)]
pub struct PlaneTracker {
    reference: Option<PlaneEstimate>,
    history: VecDeque<PlaneEstimate>,
    capacity: usize,
    switches: usize,
}

impl PlaneTracker {
    pub fn new(history: usize) -> Self {
        Self {
            reference: None,
            history: VecDeque::with_capacity(history),
            capacity: history.max(1),
            switches: 0,
        }
    }

    pub fn reference(&self) -> Option<&PlaneEstimate> {
        self.reference.as_ref()
    }

    pub fn history(&self) -> impl Iterator<Item = &PlaneEstimate> {
        self.history.iter()
    }

    /// Number of reference changes after initialization.
    pub fn switches(&self) -> usize {
        self.switches
    }

    /// Pushes `new` into the history; the reference moves to `new` only when
    /// it disagrees with the reference and strictly more than half of the
    /// history capacity (the new entry included) agrees with it.
    pub fn update(&mut self, new: PlaneEstimate, config: &PipelineConfig) -> PlaneUpdate {
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(new);
        let Some(reference) = self.reference else {
            self.reference = Some(new);
            return PlaneUpdate::Initialized;
        };
        if planes_match(&new, &reference, config) {
            return PlaneUpdate::Unchanged;
        }
        let agree = self.history.iter().filter(|h| planes_match(h, &new, config)).count();
        if agree > self.capacity / 2 {
            self.reference = Some(new);
            self.switches += 1;
            PlaneUpdate::Switched
        } else {
            PlaneUpdate::Unchanged
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_from_axis_angle;

    fn tilted(deg: f64, offset: f64) -> PlaneEstimate {
        let r = rotation_from_axis_angle(&Vec3::x(), deg.to_radians());
        PlaneEstimate::new(r * Vec3::z(), offset)
    }

    #[test]
    fn match_thresholds() {
        let c = PipelineConfig::default();
        let base = tilted(0.0, 0.0);
        assert!(planes_match(&base, &base, &c));
        assert!(planes_match(&base, &tilted(4.0, 0.0), &c));
        assert!(!planes_match(&base, &tilted(6.0, 0.0), &c));
        assert!(!planes_match(&base, &tilted(0.0, 0.15), &c));
        assert!(planes_match(&base, &tilted(4.9, 0.09), &c));
        assert!(!planes_match(&base, &tilted(5.1, 0.0), &c));
        assert!(!planes_match(&base, &tilted(0.0, 0.11), &c));
    }

    fn floor_cloud(rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        let mut pts: Vec<Vec3> = (0..1000)
            .map(|_| Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.0))
            .collect();
        pts.extend((0..50).map(|_| {
            Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(0.2..2.0))
        }));
        pts
    }

    #[test]
    fn ransac_recovers_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = floor_cloud(&mut rng);
        let p = ransac_plane(&pts, 256, 0.02, 7, None).unwrap();
        assert!((p.normal - Vec3::z()).norm() < 1e-6, "{:?}", p.normal);
        assert!(p.offset.abs() < 1e-6);
        assert_eq!(p.inlier_count, 1000);
        assert_eq!(ransac_plane(&pts, 256, 0.02, 7, None).unwrap(), p);
    }

    #[test]
    fn collinear_and_tiny_inputs_have_no_plane() {
        let line: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.5)).collect();
        assert!(matches!(ransac_plane(&line, 64, 0.02, 1, None), Err(Error::NoPlane(_))));
        assert!(ransac_plane(&line[..2], 64, 0.02, 1, None).is_err());
    }

    #[test]
    fn prior_rejects_walls_and_ceiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = Vec::new();
        // wall x=2 and ceiling z=2.5 together outnumber the floor z=0
        for _ in 0..3000 {
            pts.push(Vec3::new(2.0, rng.gen_range(-3.0..3.0), rng.gen_range(0.0..2.5)));
        }
        for _ in 0..2000 {
            pts.push(Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-3.0..3.0), 2.5));
        }
        for _ in 0..2500 {
            pts.push(Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-3.0..3.0), 0.0));
        }
        let prior = GravityPrior {
            down: -Vec3::z(),
            max_angle_deg: 30.0,
            viewpoint: Vec3::new(0.0, 0.0, 1.4),
        };
        let p = ransac_plane(&pts, 256, 0.02, 1, Some(&prior)).unwrap();
        // wall points within the inlier band pull the refit slightly
        assert!(p.angle_to(&PlaneEstimate::new(Vec3::z(), 0.0)) < 0.5, "{p:?}");
        assert!(p.offset.abs() < 0.01, "{p:?}");
        assert!(p.signed_distance(&prior.viewpoint) > 0.0);
    }

    #[test]
    fn gravity_from_level_walk() {
        // camera looking along +y of the world, image down = world -z
        let r = nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0);
        let traj: Vec<(usize, RigidPose)> = (0..10)
            .map(|i| (i, RigidPose::new(r, Vec3::new(0.3 * i as f64, 0.1 * (i % 3) as f64, 1.4))))
            .collect();
        let g = gravity_prior(&traj, 30.0).unwrap();
        assert!((g.down + Vec3::z()).norm() < 1e-12);
        let straight: Vec<(usize, RigidPose)> =
            (0..2).map(|i| (i, RigidPose::new(r, Vec3::new(i as f64, 0.0, 1.4)))).collect();
        assert!((gravity_prior(&straight, 30.0).unwrap().down + Vec3::z()).norm() < 1e-12);
    }

    #[test]
    fn tracker_switches_on_third_mismatch() {
        let c = PipelineConfig::default();
        let mut t = PlaneTracker::new(5);
        assert_eq!(t.update(tilted(0.0, 0.0), &c), PlaneUpdate::Initialized);
        for _ in 0..4 {
            assert_eq!(t.update(tilted(0.5, 0.01), &c), PlaneUpdate::Unchanged);
        }
        assert_eq!(t.update(tilted(10.0, 0.0), &c), PlaneUpdate::Unchanged);
        assert_eq!(t.update(tilted(10.0, 0.0), &c), PlaneUpdate::Unchanged);
        assert_eq!(t.update(tilted(10.0, 0.0), &c), PlaneUpdate::Switched);
        assert!(planes_match(t.reference().unwrap(), &tilted(10.0, 0.0), &c));
        assert_eq!(t.update(tilted(10.0, 0.0), &c), PlaneUpdate::Unchanged);
        assert_eq!(t.switches(), 1);
    }

    #[test]
    fn single_jolt_never_switches() {
        let c = PipelineConfig::default();
        let mut t = PlaneTracker::new(5);
        t.update(tilted(0.0, 0.0), &c);
        assert_eq!(t.update(tilted(25.0, 0.3), &c), PlaneUpdate::Unchanged);
        for _ in 0..6 {
            assert_eq!(t.update(tilted(0.0, 0.0), &c), PlaneUpdate::Unchanged);
        }
        assert_eq!(t.switches(), 0);
    }
}
