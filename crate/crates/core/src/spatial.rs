//! Nearest-neighbor queries over 3-D point sets.

use kdtree::distance::squared_euclidean;
use kdtree::KdTree;

use crate::geometry::Vec3;

/// KD-tree over a fixed point set.
pub struct NearestIndex {
    tree: KdTree<f64, usize, [f64; 3]>,
}

impl NearestIndex {
    pub fn build(points: &[Vec3]) -> Self {
        let mut tree = KdTree::with_capacity(3, 32);
        for (i, p) in points.iter().enumerate() {
            // coordinates are finite by PointCloud invariant
            tree.add([p.x, p.y, p.z], i).expect("finite point");
        }
        Self { tree }
    }

    pub fn len(&self) -> usize {
        self.tree.size()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.size() == 0
    }

    /// Distance and index of the nearest indexed point.
    pub fn nearest(&self, p: &Vec3) -> Option<(f64, usize)> {
        self.tree
            .nearest(&[p.x, p.y, p.z], 1, &squared_euclidean)
            .ok()
            .and_then(|hits| hits.first().map(|&(d2, &i)| (d2.sqrt(), i)))
    }

    pub fn nearest_distance(&self, p: &Vec3) -> Option<f64> {
        self.nearest(p).map(|(d, _)| d)
    }
}

/// Mean over `from` of the distance to the nearest point of `to`.
/// Returns `None` when either side is empty.
pub fn directed_mean_distance(from: &[Vec3], to: &NearestIndex) -> Option<f64> {
    if from.is_empty() || to.is_empty() {
        return None;
    }
    let total: f64 = from
        .iter()
        .map(|p| to.nearest_distance(p).expect("non-empty index"))
        .sum();
    Some(total / from.len() as f64)
}

/// Minimum of the two directed mean nearest-neighbor distances.
pub fn min_directed_chamfer(a: &[Vec3], b: &[Vec3]) -> Option<f64> {
    let ia = NearestIndex::build(a);
    let ib = NearestIndex::build(b);
    let ab = directed_mean_distance(a, &ib)?;
    let ba = directed_mean_distance(b, &ia)?;
    Some(ab.min(ba))
}
