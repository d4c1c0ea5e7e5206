mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenenav::align::{build_validity_mask, estimate_block_transform, frame_scale, ValidityMask};
use scenenav::geometry::{rotation_from_axis_angle, DepthMap, Grid, Intrinsics, RigidPose, Vec3};
use scenenav::ingest::FrameRecord;
use scenenav::metrics::{ate_rmse, cloud_accuracy_completeness, AlignMode};
use scenenav::nav::{plan_path, CellState, Occupancy, PlanStatus};
use scenenav::spatial::{min_directed_chamfer, NearestIndex};
use scenenav::PipelineConfig;

fn vec3() -> impl Strategy<Value = Vec3> {
    (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rand_pose(rng: &mut ChaCha8Rng, spread: f64) -> RigidPose {
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let t = Vec3::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), rng.gen_range(-spread..spread));
    RigidPose::new(rotation_from_axis_angle(&axis, rng.gen_range(-3.0..3.0)), t)
}

fn flat_frame(w: usize, h: usize, conf: Vec<f32>, sensor: Vec<f32>, pred: Vec<f32>) -> FrameRecord {
    FrameRecord {
        index: 0,
        sensor_depth: DepthMap::new(Grid::from_vec(w, h, sensor).unwrap()),
        pred_depth: DepthMap::new(Grid::from_vec(w, h, pred).unwrap()),
        pred_confidence: Grid::from_vec(w, h, conf).unwrap(),
        local_pose: RigidPose::identity(),
        intrinsics: Intrinsics::new(10.0, 10.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(),
        instance_masks: vec![],
        track_points: vec![],
        next_window: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scale_matches_line_search(pairs in prop::collection::vec((0.2..6.0f64, 0.1..3.0f64, -0.05..0.05f64), 1..200)) {
        let pred: Vec<f64> = pairs.iter().map(|p| (p.0 as f32) as f64).collect();
        let sensor: Vec<f64> = pairs.iter().map(|p| ((p.0 * p.1 * (1.0 + p.2)) as f32) as f64).collect();
        let n = pred.len();
        let dm = |v: &[f64]| DepthMap::new(Grid::from_vec(n, 1, v.iter().map(|&x| x as f32).collect()).unwrap());
        let mask = ValidityMask { mask: Grid::new(n, 1, true) };
        let fast = frame_scale(&dm(&pred), &dm(&sensor), &mask).unwrap();
        let slow = golden_scale(&pred, &sensor, 0.0, 10.0);
        prop_assert!((fast - slow).abs() < 1e-6, "{} vs {}", fast, slow);
    }

    #[test]
    fn nearest_and_chamfer_match_brute_force(a in prop::collection::vec(vec3(), 1..60), b in prop::collection::vec(vec3(), 1..60)) {
        let index = NearestIndex::build(&b);
        for q in &a {
            let (d, i) = index.nearest(q).unwrap();
            prop_assert!((d - brute_nearest(&b, q)).abs() < 1e-12);
            prop_assert!(((b[i] - q).norm() - d).abs() < 1e-12);
        }
        let fast = min_directed_chamfer(&a, &b).unwrap();
        prop_assert!((fast - brute_chamfer_min(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn cloud_metrics_match_brute_force(a in prop::collection::vec(vec3(), 1..80), b in prop::collection::vec(vec3(), 1..80)) {
        let m = cloud_accuracy_completeness(&a, &b).unwrap();
        let (am, amed) = brute_mean_median(&a, &b);
        let (cm, cmed) = brute_mean_median(&b, &a);
        prop_assert!((m.acc_mean - am).abs() < 1e-12 && (m.acc_median - amed).abs() < 1e-12);
        prop_assert!((m.compl_mean - cm).abs() < 1e-12 && (m.compl_median - cmed).abs() < 1e-12);
    }

    #[test]
    fn rigid_ate_never_exceeds_unaligned(seed in 0u64..10_000, n in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est: Vec<_> = (0..n).map(|i| (i, rand_pose(&mut rng, 3.0))).collect();
        let gt: Vec<_> = (0..n).map(|i| (i, rand_pose(&mut rng, 3.0))).collect();
        let none = ate_rmse(&est, &gt, AlignMode::None).unwrap();
        let rigid = ate_rmse(&est, &gt, AlignMode::Rigid).unwrap();
        prop_assert!(rigid <= none + 1e-9);
    }
}

#[test]
fn anchor_transform_agrees_with_chordal_oracle() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = rand_pose(&mut rng, 4.0);
        let global: Vec<RigidPose> = (0..10).map(|_| rand_pose(&mut rng, 2.0)).collect();
        let local: Vec<RigidPose> = global
            .iter()
            .map(|g| {
                let l = truth.inverse().compose(g);
                let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let jitter = rotation_from_axis_angle(&axis, rng.gen_range(-1.0..1.0f64).to_radians());
                RigidPose::new(jitter * l.rotation, l.translation)
            })
            .collect();
        let fast = estimate_block_transform(&global, &local).unwrap();
        let oracle = anchor_transform_oracle(&global, &local);
        assert!(fast.rotation_angle_to(&oracle).to_degrees() < 0.05, "seed {seed}");
        assert!((fast.translation - oracle.translation).norm() < 1e-12, "seed {seed}");
    }
}

#[test]
fn validity_mask_matches_sorted_cutoff() {
    let cfg = PipelineConfig::default();
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.gen_range(3..20), rng.gen_range(3..20));
        let n = w * h;
        let conf: Vec<f32> = (0..n).map(|_| [1.0, 1.1, 1.2, 2.0][rng.gen_range(0..4)] + rng.gen_range(0..3) as f32 * 0.25).collect();
        let sensor: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..6.0)).collect();
        let pred: Vec<f32> = (0..n).map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.1..4.0) }).collect();
        let frame = flat_frame(w, h, conf.clone(), sensor.clone(), pred.clone());
        let mask = build_validity_mask(&frame, &cfg);
        let mut sorted = conf.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cutoff = sorted[(0.1 * n as f64).floor() as usize];
        for i in 0..n {
            let expect = conf[i] as f64 >= 1.1
                && conf[i] >= cutoff
                && sensor[i] as f64 >= 0.15
                && sensor[i] as f64 <= 5.0
                && pred[i] > 0.0;
            assert_eq!(mask.mask.data()[i], expect, "seed {seed} cell {i}");
        }
    }
}

fn random_grid(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Occupancy {
    let p_block = rng.gen_range(0.1..0.35);
    let data = (0..w * h)
        .map(|_| {
            let r: f64 = rng.gen();
            if r < p_block {
                CellState::Obstacle
            } else if r < p_block + 0.05 {
                CellState::Unknown
            } else {
                CellState::Free
            }
        })
        .collect();
    Grid::from_vec(w, h, data).unwrap()
}

fn random_free(rng: &mut ChaCha8Rng, occ: &Occupancy) -> (usize, usize) {
    loop {
        let c = (rng.gen_range(0..occ.width()), rng.gen_range(0..occ.height()));
        if *occ.get(c.0, c.1) == CellState::Free {
            return c;
        }
    }
}

#[test]
fn planner_matches_dijkstra() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (w, h) = (rng.gen_range(8..40), rng.gen_range(8..40));
        let occ = random_grid(&mut rng, w, h);
        let (s, g) = (random_free(&mut rng, &occ), random_free(&mut rng, &occ));
        let plan = plan_path(&occ, s, g, 0.0).unwrap();
        match dijkstra(&occ, s, g) {
            Some((cost, straight, diagonal)) => {
                assert!(matches!(plan.status, PlanStatus::Planned | PlanStatus::Reached), "seed {seed}");
                assert_eq!((plan.cost.straight, plan.cost.diagonal), (straight, diagonal), "seed {seed}");
                assert!((plan.cost.value() - cost).abs() < 1e-9);
            }
            None => assert_eq!(plan.status, PlanStatus::NoGoal, "seed {seed}"),
        }
    }
}
