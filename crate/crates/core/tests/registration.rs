use nalgebra::{Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use priorloc::geometry::{rot_z, so3_exp, PointCloud, Pose, SpatialIndex, Twist};
use priorloc::pipeline::scene::{cast_scan, sample_surfaces, scene_surfaces, LidarSpec, Rect};
use priorloc::pipeline::SceneKind;
use priorloc::registration::{
    align, assemble_system, find_correspondences, unit_hessian, Correspondence, RegistrationParams,
};

struct Room {
    surfaces: Vec<Rect>,
    map: PointCloud,
    index: SpatialIndex,
}

fn room(seed: u64) -> Room {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surfaces = scene_surfaces(SceneKind::CubeRoom, [10.0, 8.0, 3.0]);
    let map = sample_surfaces(&surfaces, 400.0, 0.0, &mut rng);
    let index = SpatialIndex::build(&map).unwrap();
    Room { surfaces, map, index }
}

fn sensor_pose() -> Pose {
    Pose::new(so3_exp(&Vector3::new(0.02, -0.01, 0.7)), Vector3::new(4.0, 3.5, 1.3))
}

fn scan_at(room: &Room, pose: &Pose, seed: u64) -> PointCloud {
    let lidar = LidarSpec { channels: 16, azimuth_steps: 180, ..Default::default() };
    cast_scan(&room.surfaces, pose, &lidar, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
    let d = a.between(b).log();
    (d.rotation.norm(), (a.translation - b.translation).norm())
}

#[test]
fn plane_offset_along_normal_is_the_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let floor = scene_surfaces(SceneKind::PlaneOnly, [20.0, 20.0, 0.0]);
    let map = sample_surfaces(&floor, 100.0, 0.0, &mut rng);
    let index = SpatialIndex::build(&map).unwrap();
    let scan = PointCloud::new(
        (0..200).map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.05)).collect(),
    );
    let corrs = find_correspondences(&scan, &map, &index, &Pose::identity(), 0.5).unwrap();
    assert_eq!(corrs.len(), 200);
    for c in &corrs {
        assert!((c.residual - 0.05).abs() < 1e-9);
    }
}

#[test]
fn recovers_a_perturbed_room_scan() {
    let room = room(2);
    let gt = sensor_pose();
    let scan = scan_at(&room, &gt, 3);
    let init = gt.retract_left(&Twist::new(Vector3::new(0.0, 0.0, 2f64.to_radians()), Vector3::new(0.1, 0.0, 0.0)));
    let a = align(&scan, &room.map, &room.index, &init, &RegistrationParams::default()).unwrap();
    let (rot, trans) = pose_error(&a.pose, &gt);
    assert!(a.converged);
    assert!(rot < 1e-4 && trans < 1e-4, "error {rot:e} rad, {trans:e} m");
}

#[test]
fn ground_truth_is_a_fixed_point() {
    let room = room(2);
    let gt = sensor_pose();
    // drop returns near room edges, where the nearest map sample may sit on the adjacent surface
    let bounds = [10.0, 8.0, 3.0];
    let mut scan = scan_at(&room, &gt, 3);
    scan.points.retain(|p| {
        let w = gt.transform_point(p);
        (0..3).filter(|&k| w[k] < 0.1 || w[k] > bounds[k] - 0.1).count() < 2
    });
    let a = align(&scan, &room.map, &room.index, &gt, &RegistrationParams::default()).unwrap();
    assert!(a.iterations <= 2, "{} iterations", a.iterations);
    assert!(a.residual_rms < 1e-9, "rms {:e}", a.residual_rms);
}

#[test]
fn huber_kernel_rejects_uniform_outliers() {
    let room = room(5);
    let gt = sensor_pose();
    let mut scan = scan_at(&room, &gt, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let outliers = scan.len() / 4; // 20% of the final cloud
    let inv = gt.inverse();
    for _ in 0..outliers {
        let w = Vector3::new(rng.random_range(0.0..10.0), rng.random_range(0.0..8.0), rng.random_range(0.0..3.0));
        scan.points.push(inv.transform_point(&w));
    }
    let init = gt.retract_left(&Twist::new(Vector3::new(0.0, 0.0, 0.02), Vector3::new(0.1, -0.05, 0.05)));
    let a = align(&scan, &room.map, &room.index, &init, &RegistrationParams::default()).unwrap();
    let (_, trans) = pose_error(&a.pose, &gt);
    assert!(trans < 5e-3, "pose error {trans:e} m");
}

#[test]
fn accepted_iterations_never_increase_cost() {
    let room = room(2);
    let gt = sensor_pose();
    let mut scan = scan_at(&room, &gt, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in scan.points.iter_mut() {
        *p += p.normalize() * rng.random_range(-0.03..0.03);
    }
    let init = gt.retract_left(&Twist::new(Vector3::new(0.01, 0.0, -0.05), Vector3::new(-0.2, 0.15, 0.05)));
    let a = align(&scan, &room.map, &room.index, &init, &RegistrationParams::default()).unwrap();
    assert!(!a.log.is_empty());
    for it in a.log.iter().filter(|it| it.accepted) {
        assert!(it.cost_after <= it.cost_before, "{it:?}");
    }
}

/// Correspondences lying exactly on their planes at `pose`.
fn exact_correspondences(rng: &mut ChaCha8Rng, pose: &Pose) -> Vec<Correspondence> {
    (0..50)
        .map(|_| {
            let source =
                Vector3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-2.0..2.0));
            let normal =
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                    .normalize();
            let target = pose.transform_point(&source);
            Correspondence { source, target, normal, residual: 0.0 }
        })
        .collect()
}

#[test]
fn hessian_matches_finite_difference_hessian_of_the_cost() {
    // at zero residuals the Gauss-Newton matrix is the exact Hessian
    let h_step = 1e-5;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = Pose::new(so3_exp(&Vector3::new(0.3, -0.2, 1.1)), Vector3::new(1.0, 2.0, 0.5));
        let corrs = exact_correspondences(&mut rng, &pose);
        let (h, _, _) = assemble_system(&corrs, &pose, 10.0);
        let mut fd = Matrix6::zeros();
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h_step;
            let (_, bp, _) = assemble_system(&corrs, &pose.retract_left(&Twist::from_vector(&d)), 10.0);
            let (_, bm, _) = assemble_system(&corrs, &pose.retract_left(&Twist::from_vector(&-d)), 10.0);
            fd.set_column(k, &((bp - bm) / (2.0 * h_step)));
        }
        let rel = (h - fd).norm() / fd.norm();
        assert!(rel < 1e-4, "seed {seed}: relative error {rel:e}");
        assert_eq!(h, unit_hessian(&corrs, &pose));
    }
}

#[test]
fn alignment_is_equivariant_under_world_transforms() {
    let room = room(2);
    let gt = sensor_pose();
    let scan = scan_at(&room, &gt, 3);
    let init = gt.retract_left(&Twist::new(Vector3::new(0.01, 0.0, 0.03), Vector3::new(0.1, -0.1, 0.02)));
    let params = RegistrationParams { convergence_threshold: 1e-9, ..Default::default() };
    let a = align(&scan, &room.map, &room.index, &init, &params).unwrap();

    let q = Pose::new(rot_z(0.8) * so3_exp(&Vector3::new(0.1, 0.2, 0.0)), Vector3::new(-30.0, 12.0, 4.0));
    let moved = room.map.transformed(&q);
    let moved_index = SpatialIndex::build(&moved).unwrap();
    let b = align(&scan, &moved, &moved_index, &q.compose(&init), &params).unwrap();
    let (rot, trans) = pose_error(&b.pose, &q.compose(&a.pose));
    assert!(rot < 1e-6 && trans < 1e-6, "{rot:e} rad, {trans:e} m");
}

#[test]
fn result_is_independent_of_thread_count() {
    let room = room(2);
    let gt = sensor_pose();
    let scan = scan_at(&room, &gt, 4);
    let init = gt.retract_left(&Twist::new(Vector3::new(0.0, 0.01, 0.04), Vector3::new(0.2, 0.1, -0.05)));
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| align(&scan, &room.map, &room.index, &init, &RegistrationParams::default()).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.pose, b.pose);
    assert_eq!(a.hessian, b.hessian);
    assert_eq!(a.correspondences, b.correspondences);
}
