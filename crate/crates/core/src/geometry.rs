//! Rigid transforms, pinhole camera math and raster containers.
//!
//! Camera convention: +z forward, +x right, +y down. Pixel `(u, v)` has `u`
//! along the image width; integer pixel coordinates address pixel centers, so
//! the ray through pixel `(u, v)` is `K⁻¹·[u, v, 1]`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Row-major `width × height` raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "grid data has {} cells, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Grid<T> {
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn in_bounds(&self, u: i64, v: i64) -> bool {
        u >= 0 && v >= 0 && (u as usize) < self.width && (v as usize) < self.height
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Iterates `(u, v, &value)` in row-major order.
    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, value)| (i % w, i / w, value))
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// SE(3) camera-to-world transform. Translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn apply(&self, point: &Vec3) -> Vec3 {
        self.rotation * point + self.translation
    }

    /// Camera center in the target frame.
    #[inline]
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Nearest orthonormal rotation via polar decomposition, translation kept.
    pub fn renormalized(&self) -> RigidPose {
        RigidPose {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    /// Angle in radians of the relative rotation between two poses.
    pub fn rotation_angle_to(&self, other: &RigidPose) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    pub fn from_row_major(values: &[f64; 12]) -> RigidPose {
        let r = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8],
            values[9], values[10],
        );
        RigidPose::new(r, Vec3::new(values[3], values[7], values[11]))
    }

    /// Row-major 3×4 `[R|t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let should_be_i = self.rotation.transpose() * self.rotation;
        (should_be_i - Matrix3::identity()).abs().max() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|x| x.is_finite())
    }
}

pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u_fixed = u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * v_t;
    }
    r
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Camera-frame ray with unit z through pixel `(u, v)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Depth raster in meters; 0 marks an invalid reading.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub values: Grid<f32>,
    pub validity: Option<Mask>,
}

impl DepthMap {
    pub fn new(values: Grid<f32>) -> Self {
        Self {
            values,
            validity: None,
        }
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    #[inline]
    pub fn depth(&self, u: usize, v: usize) -> f64 {
        *self.values.get(u, v) as f64
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        let d = *self.values.get(u, v);
        d.is_finite() && d > 0.0 && self.validity.as_ref().is_none_or(|m| *m.get(u, v))
    }

    pub fn scaled(&self, s: f64) -> DepthMap {
        DepthMap {
            values: self.values.map(|d| (*d as f64 * s) as f32),
            validity: self.validity.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PointLabel {
    pub class_id: u32,
    pub instance_id: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub labels: Option<Vec<PointLabel>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vec3>) -> Self {
        Self {
            points,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    pub fn extend(&mut self, other: PointCloud) {
        match (&mut self.labels, other.labels) {
            (Some(mine), Some(theirs)) => mine.extend(theirs),
            (None, None) => {}
            _ => panic!("mixing labeled and unlabeled clouds"),
        }
        self.points.extend(other.points);
    }
}

/// One world point per masked pixel with positive finite depth:
/// `pose ∘ (d · K⁻¹ · [u, v, 1])`.
pub fn backproject(
    depth: &DepthMap,
    intr: &Intrinsics,
    pose: &RigidPose,
    mask: &Mask,
) -> Result<PointCloud> {
    if depth.width() != intr.width || depth.height() != intr.height || !depth.values.same_shape(mask)
    {
        return Err(Error::InvalidInput(format!(
            "backproject: depth {}x{}, mask {}x{}, intrinsics {}x{}",
            depth.width(),
            depth.height(),
            mask.width(),
            mask.height(),
            intr.width,
            intr.height
        )));
    }
    let mut points = Vec::new();
    for (u, v, &m) in mask.iter_cells() {
        if m && depth.is_valid(u, v) {
            let d = depth.depth(u, v);
            points.push(pose.apply(&(intr.ray(u as f64, v as f64) * d)));
        }
    }
    Ok(PointCloud::from_points(points))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    /// Nearest pixel index.
    pub fn pixel(&self) -> (usize, usize) {
        (self.u.round() as usize, self.v.round() as usize)
    }
}

/// Projects a world point into the camera; `None` when behind the camera or
/// outside the image (pixel centers span `[-0.5, size - 0.5)`).
pub fn project(point: &Vec3, intr: &Intrinsics, pose: &RigidPose) -> Option<Projection> {
    let cam = pose.inverse().apply(point);
    if cam.z <= 1e-9 {
        return None;
    }
    let u = intr.fx * cam.x / cam.z + intr.cx;
    let v = intr.fy * cam.y / cam.z + intr.cy;
    let inside = u >= -0.5 && v >= -0.5 && u < intr.width as f64 - 0.5 && v < intr.height as f64 - 0.5;
    inside.then_some(Projection { u, v, depth: cam.z })
}

pub type VoxelKey = (i64, i64, i64);

#[inline]
pub fn voxel_key(p: &Vec3, size: f64) -> VoxelKey {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

/// Axis-angle rotation matrix.
pub fn rotation_from_axis_angle(axis: &Vec3, angle: f64) -> Matrix3<f64> {
    match nalgebra::Unit::try_new(*axis, 1e-12) {
        Some(unit) => *nalgebra::Rotation3::from_axis_angle(&unit, angle).matrix(),
        None => Matrix3::identity(),
    }
}

/// Component-wise lower median. Panics on empty input.
pub fn componentwise_median(points: &[Vec3]) -> Vec3 {
    assert!(!points.is_empty());
    let mut out = Vec3::zeros();
    let mut scratch: Vec<f64> = Vec::with_capacity(points.len());
    for axis in 0..3 {
        scratch.clear();
        scratch.extend(points.iter().map(|p| p[axis]));
        out[axis] = lower_median(&mut scratch);
    }
    out
}

/// Lower median (element at `(len - 1) / 2` after sorting). Panics on empty.
pub fn lower_median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    let mid = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}
