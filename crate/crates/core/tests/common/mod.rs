//! Reference implementations used as oracles, plus scene builders shared by
//! the integration tests. Each oracle is the slow, obvious version of a fast
//! path in the library.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{Matrix3, SVD};
use scenenav::geometry::{RigidPose, Vec3};
use scenenav::nav::{CellState, Occupancy};
use scenenav::synth::SceneSpec;

/// Chordal L2 rotation mean: the SO(3) projection of the summed matrices.
pub fn chordal_mean(rotations: &[Matrix3<f64>]) -> Matrix3<f64> {
    let sum: Matrix3<f64> = rotations.iter().sum();
    let svd = SVD::new(sum, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Element at index `(n - 1) / 2` after sorting.
pub fn naive_lower_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[(v.len() - 1) / 2]
}

/// Chordal mean of the candidate rotations, per-axis lower median of the
/// candidate translations.
pub fn anchor_transform_oracle(global: &[RigidPose], local: &[RigidPose]) -> RigidPose {
    let cands: Vec<RigidPose> = global.iter().zip(local).map(|(g, l)| g.compose(&l.inverse())).collect();
    let rotation = chordal_mean(&cands.iter().map(|c| c.rotation).collect::<Vec<_>>());
    let t = Vec3::new(
        naive_lower_median(&cands.iter().map(|c| c.translation.x).collect::<Vec<_>>()),
        naive_lower_median(&cands.iter().map(|c| c.translation.y).collect::<Vec<_>>()),
        naive_lower_median(&cands.iter().map(|c| c.translation.z).collect::<Vec<_>>()),
    );
    RigidPose::new(rotation, t)
}

/// Golden-section search of `Σ (s·pred − sensor)²` on `[lo, hi]`.
pub fn golden_scale(pred: &[f64], sensor: &[f64], lo: f64, hi: f64) -> f64 {
    let f = |s: f64| pred.iter().zip(sensor).map(|(p, q)| (s * p - q).powi(2)).sum::<f64>();
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
        if b - a < 1e-13 {
            break;
        }
    }
    (a + b) / 2.0
}

pub fn brute_nearest(points: &[Vec3], q: &Vec3) -> f64 {
    points.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min)
}

pub fn brute_directed_mean(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().map(|p| brute_nearest(b, p)).sum::<f64>() / a.len() as f64
}

pub fn brute_chamfer_min(a: &[Vec3], b: &[Vec3]) -> f64 {
    brute_directed_mean(a, b).min(brute_directed_mean(b, a))
}

/// Mean and sorted-middle median of nearest distances from `a` to `b`.
pub fn brute_mean_median(a: &[Vec3], b: &[Vec3]) -> (f64, f64) {
    let mut d: Vec<f64> = a.iter().map(|p| brute_nearest(b, p)).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = d.len();
    let median = if n % 2 == 1 { d[n / 2] } else { (d[n / 2 - 1] + d[n / 2]) / 2.0 };
    (mean, median)
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.partial_cmp(&self.0).unwrap().then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra over Free cells, diagonal √2 allowed only when both orthogonal
/// neighbours are Free. Returns `(cost, straight steps, diagonal steps)`.
pub fn dijkstra(occ: &Occupancy, start: (usize, usize), goal: (usize, usize)) -> Option<(f64, u32, u32)> {
    let (w, h) = (occ.width(), occ.height());
    let free = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && *occ.get(x as usize, y as usize) == CellState::Free;
    if !free(start.0 as i64, start.1 as i64) || !free(goal.0 as i64, goal.1 as i64) {
        return None;
    }
    let mut dist = vec![f64::INFINITY; w * h];
    let mut steps = vec![(0u32, 0u32); w * h];
    let idx = |x: usize, y: usize| y * w + x;
    dist[idx(start.0, start.1)] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Entry(0.0, idx(start.0, start.1)));
    while let Some(Entry(d, i)) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 || !free(x + dx, y + dy) {
                    continue;
                }
                let diag = dx != 0 && dy != 0;
                if diag && (!free(x + dx, y) || !free(x, y + dy)) {
                    continue;
                }
                let j = idx((x + dx) as usize, (y + dy) as usize);
                let nd = d + if diag { std::f64::consts::SQRT_2 } else { 1.0 };
                if nd < dist[j] - 1e-12 {
                    dist[j] = nd;
                    let (s, g) = steps[i];
                    steps[j] = if diag { (s, g + 1) } else { (s + 1, g) };
                    heap.push(Entry(nd, j));
                }
            }
        }
    }
    let gi = idx(goal.0, goal.1);
    dist[gi].is_finite().then(|| (dist[gi], steps[gi].0, steps[gi].1))
}

/// Parses a scene and overrides its frame count.
pub fn scene(text: &str, frames: usize) -> SceneSpec {
    let mut spec = SceneSpec::parse(text).expect("valid scene");
    spec.frames = frames;
    spec
}

/// Orbiting camera around three boxes in a 6 m room.
pub const ORBIT_ROOM: &str = "frames=30\nwidth=64\nheight=48\nfx=32\nroom=-3 -3 3 3 2.6\n\
    object=56 -1.2 -0.3 0 -0.8 0.1 0.9\nobject=56 1.0 0.8 0 1.4 1.2 0.9\n\
    object=60 -0.3 -1.4 0 0.5 -0.8 0.75\norbit=0 0 2.2 1.5 0.3 2 0\nscale=0.7\n\
    class.56=chair\nclass.60=table\n";

/// Five boxes kept in view by a slow side-to-side pan.
pub const FIVE_OBJECTS: &str = "frames=100\nwidth=80\nheight=60\nfx=40\nroom=-4 -4 4 4 2.8\n\
    object=56 1.6 -1.3 0 1.9 -1.0 0.6\nobject=57 1.8 -0.6 0 2.1 -0.3 0.5\n\
    object=58 2.0 0.0 0 2.3 0.3 0.7\nobject=59 1.8 0.6 0 2.1 0.9 0.5\n\
    object=60 1.6 1.2 0 1.9 1.5 0.6\n\
    waypoint=0 -1.2 -0.3 1.4 0 -15\nwaypoint=50 -1.2 0.3 1.4 0 -15\nwaypoint=99 -1.2 -0.3 1.4 0 -15\n\
    scale=0.8\n";
