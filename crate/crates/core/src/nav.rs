//! Floor-plane grid map, occupancy, goal selection and path planning.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::{Grid, Mask, Vec3};
use crate::morphology;
use crate::plane::PlaneEstimate;
use crate::semantics::{ForegroundCloud, ObjectState, Registry};

pub type Cell = (usize, usize);

/// Orthonormal chart of the plane: `u` is world x projected onto the plane
/// (world y when x is nearly parallel to the normal), `v = normal × u`.
pub fn plane_basis(plane: &PlaneEstimate) -> (Vec3, Vec3) {
    let n = plane.normal;
    let seed = if n.x.abs() > 0.9 { Vec3::y() } else { Vec3::x() };
    let u = (seed - n * n.dot(&seed)).normalize();
    (u, n.cross(&u))
}

/// Per-cell accumulators of one source of points.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityLayer {
    /// Points inside the obstacle height band.
    pub density_sum: Grid<f64>,
    /// Frames with any point on the cell.
    pub obs_frames: Grid<u32>,
    /// Lowest height above the plane; `+∞` if never observed.
    pub min_height: Grid<f64>,
    last_frame: Grid<usize>,
}

impl DensityLayer {
    fn new(w: usize, h: usize) -> Self {
        Self {
            density_sum: Grid::new(w, h, 0.0),
            obs_frames: Grid::new(w, h, 0),
            min_height: Grid::new(w, h, f64::INFINITY),
            last_frame: Grid::new(w, h, usize::MAX),
        }
    }

    fn grown(&self, w: usize, h: usize, dx: usize, dy: usize) -> Self {
        let mut out = Self::new(w, h);
        for (x, y, &v) in self.density_sum.iter_cells() {
            out.density_sum.set(x + dx, y + dy, v);
            out.obs_frames.set(x + dx, y + dy, *self.obs_frames.get(x, y));
            out.min_height.set(x + dx, y + dy, *self.min_height.get(x, y));
            out.last_frame.set(x + dx, y + dy, *self.last_frame.get(x, y));
        }
        out
    }

    pub fn density_mean(&self, x: usize, y: usize) -> f64 {
        *self.density_sum.get(x, y) / (*self.obs_frames.get(x, y)).max(1) as f64
    }

    fn add(&mut self, c: Cell, height: f64, frame: usize, in_band: bool) {
        if *self.last_frame.get(c.0, c.1) != frame {
            self.last_frame.set(c.0, c.1, frame);
            *self.obs_frames.get_mut(c.0, c.1) += 1;
        }
        if in_band {
            *self.density_sum.get_mut(c.0, c.1) += 1.0;
        }
        let m = self.min_height.get_mut(c.0, c.1);
        if height < *m {
            *m = height;
        }
    }

    pub fn total_points(&self) -> f64 {
        self.density_sum.data().iter().sum()
    }
}

/// Point with the frame that observed it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FramePoint {
    pub position: Vec3,
    pub frame: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellState {
    Free,
    Obstacle,
    Unknown,
}

impl CellState {
    pub fn code(self) -> u8 {
        match self {
            CellState::Free => 0,
            CellState::Obstacle => 1,
            CellState::Unknown => 2,
        }
    }
}

pub type Occupancy = Grid<CellState>;

/// Grid over the reference plane. Background points accumulate across
/// blocks; the foreground layer and label raster are rebuilt each block
/// from the registry view.
#[derive(Clone, Debug, PartialEq)]
pub struct NavGrid {
    plane: PlaneEstimate,
    basis: (Vec3, Vec3),
    pub cell: f64,
    /// Lattice index of cell (0, 0).
    pub origin: (i64, i64),
    band: (f64, f64),
    pub background: DensityLayer,
    pub foreground: DensityLayer,
    /// Majority tracklet id per cell, 0 for none.
    pub label: Grid<u32>,
    projected: usize,
}

const GROW_MARGIN: i64 = 16;

impl NavGrid {
    pub fn new(plane: PlaneEstimate, config: &PipelineConfig) -> Self {
        Self {
            plane,
            basis: plane_basis(&plane),
            cell: config.grid_cell,
            origin: (0, 0),
            band: (config.floor_eps, config.agent_height),
            background: DensityLayer::new(0, 0),
            foreground: DensityLayer::new(0, 0),
            label: Grid::new(0, 0, 0),
            projected: 0,
        }
    }

    pub fn plane(&self) -> &PlaneEstimate {
        &self.plane
    }

    pub fn width(&self) -> usize {
        self.label.width()
    }

    pub fn height(&self) -> usize {
        self.label.height()
    }

    /// Points projected into the background layer so far.
    pub fn projected_points(&self) -> usize {
        self.projected
    }

    /// Plane coordinates and height above the plane.
    pub fn chart(&self, p: &Vec3) -> (f64, f64, f64) {
        (p.dot(&self.basis.0), p.dot(&self.basis.1), self.plane.signed_distance(p))
    }

    fn lattice(&self, p: &Vec3) -> (i64, i64, f64) {
        let (a, b, h) = self.chart(p);
        ((a / self.cell).floor() as i64, (b / self.cell).floor() as i64, h)
    }

    /// Cell containing the projection of `p`, if inside the grid.
    pub fn cell_of(&self, p: &Vec3) -> Option<Cell> {
        let (i, j, _) = self.lattice(p);
        let (x, y) = (i - self.origin.0, j - self.origin.1);
        self.label.in_bounds(x, y).then_some((x as usize, y as usize))
    }

    /// Nearest in-grid cell to the projection of `p`.
    pub fn clamped_cell_of(&self, p: &Vec3) -> Option<Cell> {
        if self.width() == 0 || self.height() == 0 {
            return None;
        }
        let (i, j, _) = self.lattice(p);
        let x = (i - self.origin.0).clamp(0, self.width() as i64 - 1);
        let y = (j - self.origin.1).clamp(0, self.height() as i64 - 1);
        Some((x as usize, y as usize))
    }

    /// World position of a cell center on the plane.
    pub fn cell_center(&self, c: Cell) -> Vec3 {
        let a = (self.origin.0 + c.0 as i64) as f64 * self.cell + self.cell / 2.0;
        let b = (self.origin.1 + c.1 as i64) as f64 * self.cell + self.cell / 2.0;
        let foot = -self.plane.normal * self.plane.offset;
        foot + self.basis.0 * a + self.basis.1 * b
    }

    fn ensure_covers(&mut self, lo: (i64, i64), hi: (i64, i64)) {
        let (w, h) = (self.width() as i64, self.height() as i64);
        let empty = w == 0 || h == 0;
        let cur_lo = self.origin;
        let cur_hi = (self.origin.0 + w - 1, self.origin.1 + h - 1);
        if !empty && lo.0 >= cur_lo.0 && lo.1 >= cur_lo.1 && hi.0 <= cur_hi.0 && hi.1 <= cur_hi.1 {
            return;
        }
        let (new_lo, new_hi) = if empty {
            (
                (lo.0 - GROW_MARGIN, lo.1 - GROW_MARGIN),
                (hi.0 + GROW_MARGIN, hi.1 + GROW_MARGIN),
            )
        } else {
            (
                (
                    if lo.0 < cur_lo.0 { lo.0 - GROW_MARGIN } else { cur_lo.0 },
                    if lo.1 < cur_lo.1 { lo.1 - GROW_MARGIN } else { cur_lo.1 },
                ),
                (
                    if hi.0 > cur_hi.0 { hi.0 + GROW_MARGIN } else { cur_hi.0 },
                    if hi.1 > cur_hi.1 { hi.1 + GROW_MARGIN } else { cur_hi.1 },
                ),
            )
        };
        let nw = (new_hi.0 - new_lo.0 + 1) as usize;
        let nh = (new_hi.1 - new_lo.1 + 1) as usize;
        let (dx, dy) = if empty {
            (0, 0)
        } else {
            ((cur_lo.0 - new_lo.0) as usize, (cur_lo.1 - new_lo.1) as usize)
        };
        self.background = self.background.grown(nw, nh, dx, dy);
        self.foreground = self.foreground.grown(nw, nh, dx, dy);
        let mut label = Grid::new(nw, nh, 0);
        for (x, y, &v) in self.label.iter_cells() {
            label.set(x + dx, y + dy, v);
        }
        self.label = label;
        self.origin = new_lo;
    }

    fn bounds_of<'a>(&self, pts: impl Iterator<Item = &'a Vec3>) -> Option<((i64, i64), (i64, i64))> {
        let mut out: Option<((i64, i64), (i64, i64))> = None;
        for p in pts {
            let (i, j, _) = self.lattice(p);
            out = Some(match out {
                None => ((i, j), (i, j)),
                Some((lo, hi)) => ((lo.0.min(i), lo.1.min(j)), (hi.0.max(i), hi.1.max(j))),
            });
        }
        out
    }

    fn in_band(&self, h: f64) -> bool {
        h > self.band.0 && h <= self.band.1
    }

    /// Adds background points observed under `plane`.
    pub fn project_block(&mut self, points: &[FramePoint], plane: &PlaneEstimate) -> Result<()> {
        if plane.normal != self.plane.normal || plane.offset != self.plane.offset {
            return Err(Error::ReprojectionRequired);
        }
        if let Some((lo, hi)) = self.bounds_of(points.iter().map(|p| &p.position)) {
            self.ensure_covers(lo, hi);
        }
        for p in points {
            let (i, j, h) = self.lattice(&p.position);
            let c = ((i - self.origin.0) as usize, (j - self.origin.1) as usize);
            let band = self.in_band(h);
            self.background.add(c, h, p.frame, band);
        }
        self.projected += points.len();
        Ok(())
    }

    /// Rebuilds the foreground layer and label raster from a registry view.
    pub fn refresh_foreground(&mut self, view: &ForegroundCloud) {
        if let Some((lo, hi)) = self.bounds_of(view.points.iter().map(|p| &p.position)) {
            self.ensure_covers(lo, hi);
        }
        let (w, h) = (self.width(), self.height());
        self.foreground = DensityLayer::new(w, h);
        let mut votes: HashMap<Cell, HashMap<u32, u32>> = HashMap::new();
        // frame order matters for the per-frame counter
        let mut order: Vec<usize> = (0..view.points.len()).collect();
        order.sort_by_key(|&i| view.points[i].frame);
        for i in order {
            let p = &view.points[i];
            let (ci, cj, ht) = self.lattice(&p.position);
            let c = ((ci - self.origin.0) as usize, (cj - self.origin.1) as usize);
            let band = self.in_band(ht);
            self.foreground.add(c, ht, p.frame, band);
            *votes.entry(c).or_default().entry(p.tracklet_id).or_default() += 1;
        }
        self.label = Grid::new(w, h, 0);
        for (c, counts) in votes {
            let best = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&id, _)| id)
                .unwrap_or(0);
            self.label.set(c.0, c.1, best);
        }
    }

    /// Fresh grid under `plane` from the persisted clouds.
    pub fn reproject_all(
        plane: PlaneEstimate,
        background: &[FramePoint],
        foreground: &ForegroundCloud,
        config: &PipelineConfig,
    ) -> Self {
        let mut g = Self::new(plane, config);
        g.project_block(background, &plane).expect("same plane");
        g.refresh_foreground(foreground);
        g
    }

    pub fn build_occupancy(&self, config: &PipelineConfig) -> Occupancy {
        let (w, h) = (self.width(), self.height());
        let mut seed = Mask::new(w, h, false);
        let mut known = Mask::new(w, h, false);
        for y in 0..h {
            for x in 0..w {
                let dense = self.background.density_mean(x, y) >= config.density_threshold
                    || self.foreground.density_mean(x, y) >= config.density_threshold;
                seed.set(x, y, dense);
                let lowest = self.background.min_height.get(x, y).min(*self.foreground.min_height.get(x, y));
                known.set(x, y, lowest.abs() <= config.floor_eps);
            }
        }
        let opened = morphology::open(&seed, 1);
        let radius = (config.dilation_radius / self.cell).round() as usize;
        let obstacle = morphology::dilate(&opened, radius);
        let mut occ = Grid::new(w, h, CellState::Unknown);
        for y in 0..h {
            for x in 0..w {
                let s = if *obstacle.get(x, y) {
                    CellState::Obstacle
                } else if *known.get(x, y) {
                    CellState::Free
                } else {
                    CellState::Unknown
                };
                occ.set(x, y, s);
            }
        }
        occ
    }
}

const NEIGHBORS8: [(i64, i64); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

fn neighbors8<T>(grid: &Grid<T>, c: Cell) -> impl Iterator<Item = Cell> + '_ {
    NEIGHBORS8.iter().filter_map(move |&(dx, dy)| {
        let (x, y) = (c.0 as i64 + dx, c.1 as i64 + dy);
        grid.in_bounds(x, y).then_some((x as usize, y as usize))
    })
}

/// 8-connected components of a mask, in row-major order of their first cell.
pub fn components8(mask: &Mask) -> Vec<Vec<Cell>> {
    let mut seen = Mask::new(mask.width(), mask.height(), false);
    let mut out = Vec::new();
    for (x, y, &m) in mask.iter_cells() {
        if !m || *seen.get(x, y) {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![(x, y)];
        seen.set(x, y, true);
        while let Some(c) = stack.pop() {
            comp.push(c);
            for n in neighbors8(mask, c) {
                if *mask.get(n.0, n.1) && !*seen.get(n.0, n.1) {
                    seen.set(n.0, n.1, true);
                    stack.push(n);
                }
            }
        }
        comp.sort_by_key(|&(x, y)| (y, x));
        out.push(comp);
    }
    out
}

fn centroid(cells: &[Cell]) -> (f64, f64) {
    let n = cells.len() as f64;
    (
        cells.iter().map(|c| c.0 as f64).sum::<f64>() / n,
        cells.iter().map(|c| c.1 as f64).sum::<f64>() / n,
    )
}

fn dist(a: (f64, f64), b: Cell) -> f64 {
    ((a.0 - b.0 as f64).powi(2) + (a.1 - b.1 as f64).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Goal {
    pub cell: Cell,
    pub tracklet_id: u32,
    /// Distance in cells from the user to the component centroid.
    pub distance: f64,
}

/// Semantic goal candidates nearest first: components of the target class,
/// each snapped to the Free cell nearest its centroid within `snap_radius`
/// of the component.
pub fn goal_candidates(
    label: &Grid<u32>,
    occupancy: &Occupancy,
    registry: &Registry,
    target_class: u32,
    user: Cell,
    cell_size: f64,
    config: &PipelineConfig,
) -> Vec<Goal> {
    let mask = label.map(|&id| {
        id != 0
            && registry
                .get(id)
                .is_some_and(|t| t.class_id == target_class && t.state != ObjectState::Removed)
    });
    let reach = config.snap_radius / cell_size;
    let r = reach.ceil() as i64;
    let mut out = Vec::new();
    for comp in components8(&mask) {
        if comp.len() < config.min_component_area {
            continue;
        }
        let cen = centroid(&comp);
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for c in &comp {
            *counts.entry(*label.get(c.0, c.1)).or_default() += 1;
        }
        let tracklet_id = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&id, _)| id)
            .unwrap_or(0);
        let mut within = Mask::new(label.width(), label.height(), false);
        for c in &comp {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (x, y) = (c.0 as i64 + dx, c.1 as i64 + dy);
                    if ((dx * dx + dy * dy) as f64).sqrt() <= reach && within.in_bounds(x, y) {
                        within.set(x as usize, y as usize, true);
                    }
                }
            }
        }
        let snapped = within
            .iter_cells()
            .filter(|&(x, y, &w)| w && *occupancy.get(x, y) == CellState::Free)
            .map(|(x, y, _)| (x, y))
            .min_by(|&a, &b| dist(cen, a).total_cmp(&dist(cen, b)).then((a.1, a.0).cmp(&(b.1, b.0))));
        if let Some(cell) = snapped {
            out.push(Goal {
                cell,
                tracklet_id,
                distance: dist(cen, user),
            });
        }
    }
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.tracklet_id.cmp(&b.tracklet_id)));
    out
}

pub fn select_goal(
    label: &Grid<u32>,
    occupancy: &Occupancy,
    registry: &Registry,
    target_class: u32,
    user: Cell,
    cell_size: f64,
    config: &PipelineConfig,
) -> Option<Goal> {
    goal_candidates(label, occupancy, registry, target_class, user, cell_size, config)
        .into_iter()
        .next()
}

/// Keeps the previous goal object unless a candidate is closer by at least
/// the hysteresis fraction.
#[derive(Clone, Debug, Default)]
pub struct GoalSelector {
    previous: Option<u32>,
}

impl GoalSelector {
    pub fn choose(&mut self, candidates: &[Goal], hysteresis: f64) -> Option<Goal> {
        let best = *candidates.first()?;
        let kept = self
            .previous
            .and_then(|id| candidates.iter().find(|g| g.tracklet_id == id))
            .copied();
        let pick = match kept {
            Some(prev) if best.distance > (1.0 - hysteresis) * prev.distance => prev,
            _ => best,
        };
        self.previous = Some(pick.tracklet_id);
        Some(pick)
    }

    pub fn reset(&mut self) {
        self.previous = None;
    }
}

/// Free cells 8-adjacent to Unknown, grouped into 8-connected components.
pub fn frontier_components(occ: &Occupancy) -> Vec<Vec<Cell>> {
    let mask = Grid::from_vec(
        occ.width(),
        occ.height(),
        occ.iter_cells()
            .map(|(x, y, &s)| {
                s == CellState::Free && neighbors8(occ, (x, y)).any(|n| *occ.get(n.0, n.1) == CellState::Unknown)
            })
            .collect(),
    )
    .expect("same shape");
    components8(&mask)
}

/// Largest frontier, with components within 10% of the largest size
/// ranked by centroid distance; returns its cell nearest the user.
pub fn frontier_explore(occ: &Occupancy, user: Cell) -> Option<Cell> {
    let comps = frontier_components(occ);
    let largest = comps.iter().map(Vec::len).max()?;
    let band = 0.9 * largest as f64;
    let chosen = comps
        .iter()
        .filter(|c| c.len() as f64 >= band)
        .min_by(|a, b| dist(centroid(a), user).total_cmp(&dist(centroid(b), user)))?;
    let u = (user.0 as f64, user.1 as f64);
    chosen
        .iter()
        .copied()
        .min_by(|&a, &b| dist(u, a).total_cmp(&dist(u, b)))
}

/// Path cost `straight + diagonal·√2`, compared exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct PathCost {
    pub straight: u32,
    pub diagonal: u32,
}

impl PathCost {
    pub fn value(&self) -> f64 {
        self.straight as f64 + self.diagonal as f64 * std::f64::consts::SQRT_2
    }

    fn add(self, other: PathCost) -> PathCost {
        PathCost {
            straight: self.straight + other.straight,
            diagonal: self.diagonal + other.diagonal,
        }
    }

    /// Octile distance between cells.
    pub fn octile(a: Cell, b: Cell) -> PathCost {
        let dx = a.0.abs_diff(b.0) as u32;
        let dy = a.1.abs_diff(b.1) as u32;
        PathCost {
            straight: dx.max(dy) - dx.min(dy),
            diagonal: dx.min(dy),
        }
    }
}

impl Ord for PathCost {
    fn cmp(&self, other: &Self) -> Ordering {
        // sign of da + db·√2; mixed signs compare da² with 2·db²
        let da = self.straight as i64 - other.straight as i64;
        let db = self.diagonal as i64 - other.diagonal as i64;
        if da >= 0 && db >= 0 {
            (da + db).cmp(&0)
        } else if da <= 0 && db <= 0 {
            0.cmp(&-(da + db))
        } else if da > 0 {
            (da * da).cmp(&(2 * db * db))
        } else {
            (2 * db * db).cmp(&(da * da))
        }
    }
}

impl PartialOrd for PathCost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanStatus {
    Reached,
    Planned,
    Exploring,
    NoGoal,
}

impl PlanStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanStatus::Reached => "reached",
            PlanStatus::Planned => "planned",
            PlanStatus::Exploring => "exploring",
            PlanStatus::NoGoal => "no_goal",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NavPlan {
    pub goal_cell: Option<Cell>,
    pub goal_tracklet: Option<u32>,
    pub waypoints: Vec<Cell>,
    pub status: PlanStatus,
    pub cost: PathCost,
}

impl NavPlan {
    pub fn none() -> Self {
        Self {
            goal_cell: None,
            goal_tracklet: None,
            waypoints: Vec::new(),
            status: PlanStatus::NoGoal,
            cost: PathCost::default(),
        }
    }
}

/// Steps allowed from `c`: 8-connected over Free cells, diagonals only when
/// both adjacent orthogonal cells are Free.
pub fn free_steps(occ: &Occupancy, c: Cell) -> impl Iterator<Item = (Cell, PathCost)> + '_ {
    let free = move |x: i64, y: i64| occ.in_bounds(x, y) && *occ.get(x as usize, y as usize) == CellState::Free;
    NEIGHBORS8.iter().filter_map(move |&(dx, dy)| {
        let (x, y) = (c.0 as i64 + dx, c.1 as i64 + dy);
        if !free(x, y) {
            return None;
        }
        if dx != 0 && dy != 0 {
            if !free(c.0 as i64 + dx, c.1 as i64) || !free(c.0 as i64, c.1 as i64 + dy) {
                return None;
            }
            Some(((x as usize, y as usize), PathCost { straight: 0, diagonal: 1 }))
        } else {
            Some(((x as usize, y as usize), PathCost { straight: 1, diagonal: 0 }))
        }
    })
}

/// Nearest Free cell within `radius` cells (Euclidean), ties row-major.
pub fn snap_to_free(occ: &Occupancy, c: Cell, radius: f64) -> Option<Cell> {
    if occ.in_bounds(c.0 as i64, c.1 as i64) && *occ.get(c.0, c.1) == CellState::Free {
        return Some(c);
    }
    let r = radius.floor() as i64;
    let mut best: Option<(i64, Cell)> = None;
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = dx * dx + dy * dy;
            let (x, y) = (c.0 as i64 + dx, c.1 as i64 + dy);
            if (d2 as f64) > radius * radius || !occ.in_bounds(x, y) {
                continue;
            }
            if *occ.get(x as usize, y as usize) == CellState::Free {
                let cell = (x as usize, y as usize);
                if best.is_none_or(|(bd, bc)| d2 < bd || (d2 == bd && (y, x) < (bc.1 as i64, bc.0 as i64))) {
                    best = Some((d2, cell));
                }
            }
        }
    }
    best.map(|(_, c)| c)
}

#[derive(PartialEq, Eq)]
struct Open {
    f: PathCost,
    h: PathCost,
    cell: Cell,
}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .cmp(&self.f)
            .then_with(|| other.h.cmp(&self.h))
            .then_with(|| (other.cell.1, other.cell.0).cmp(&(self.cell.1, self.cell.0)))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A* with the octile heuristic and exact costs. The start is snapped to
/// Free within `snap_cells`; an unreachable goal yields `NoGoal`.
pub fn plan_path(occ: &Occupancy, start: Cell, goal: Cell, snap_cells: f64) -> Result<NavPlan> {
    let start = snap_to_free(occ, start, snap_cells).ok_or(Error::InvalidStart(start))?;
    let mut plan = NavPlan {
        goal_cell: Some(goal),
        ..NavPlan::none()
    };
    if !occ.in_bounds(goal.0 as i64, goal.1 as i64) || *occ.get(goal.0, goal.1) != CellState::Free {
        return Ok(plan);
    }
    if start == goal {
        plan.status = PlanStatus::Reached;
        plan.waypoints = vec![start];
        return Ok(plan);
    }
    let (w, h) = (occ.width(), occ.height());
    let idx = |c: Cell| c.1 * w + c.0;
    let mut g: Vec<Option<PathCost>> = vec![None; w * h];
    let mut parent: Vec<usize> = vec![usize::MAX; w * h];
    let mut closed = vec![false; w * h];
    let mut open = BinaryHeap::new();
    g[idx(start)] = Some(PathCost::default());
    let h0 = PathCost::octile(start, goal);
    open.push(Open { f: h0, h: h0, cell: start });
    while let Some(Open { cell, .. }) = open.pop() {
        let ci = idx(cell);
        if closed[ci] {
            continue;
        }
        closed[ci] = true;
        if cell == goal {
            break;
        }
        let gc = g[ci].expect("opened cells have a cost");
        for (n, step) in free_steps(occ, cell) {
            let ni = idx(n);
            if closed[ni] {
                continue;
            }
            let cand = gc.add(step);
            if g[ni].is_none_or(|old| cand < old) {
                g[ni] = Some(cand);
                parent[ni] = ci;
                let hn = PathCost::octile(n, goal);
                open.push(Open { f: cand.add(hn), h: hn, cell: n });
            }
        }
    }
    let gi = idx(goal);
    let Some(cost) = g[gi].filter(|_| closed[gi]) else {
        return Ok(plan);
    };
    let mut path = vec![goal];
    let mut cur = gi;
    while cur != idx(start) {
        cur = parent[cur];
        path.push((cur % w, cur / w));
    }
    path.reverse();
    plan.waypoints = path;
    plan.cost = cost;
    plan.status = PlanStatus::Planned;
    Ok(plan)
}

/// `layer width height` header followed by row-major values.
pub fn export_raster<T>(layer: &str, grid: &Grid<T>, fmt: impl Fn(&T) -> String) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{layer} {} {}", grid.width(), grid.height());
    for y in 0..grid.height() {
        let row: Vec<String> = (0..grid.width()).map(|x| fmt(grid.get(x, y))).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Parses a raster export back into its layer name and values.
pub fn parse_raster(text: &str) -> Result<(String, Grid<String>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty raster".into()))?;
    let f: Vec<&str> = header.split_whitespace().collect();
    let bad = || Error::Format(format!("bad raster header {header:?}"));
    if f.len() != 3 {
        return Err(bad());
    }
    let (w, h): (usize, usize) = (f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?);
    let values: Vec<String> = lines.flat_map(|l| l.split_whitespace().map(str::to_string)).collect();
    Ok((f[0].to_string(), Grid::from_vec(w, h, values)?))
}
