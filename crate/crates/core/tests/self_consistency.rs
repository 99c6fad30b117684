use dmp_core::fusion::{fuse_sequence, FusionConfig};
use dmp_core::geometry::{Intrinsics, Pose};
use dmp_core::metrics::{dmp, DmpOptions};
use dmp_core::synth::{AnalyticScene, Fixture, Primitive};
use nalgebra::{UnitQuaternion, Vector3};

// A wall seen head-on and obliquely: no depth edges, so the only error is
// the constant-depth splat approximation.
#[test]
fn noiseless_plane_scene_is_self_consistent() {
    let scene = AnalyticScene::new(vec![Primitive::Plane {
        normal: Vector3::z(),
        offset: 2.0,
    }])
    .unwrap();
    let intrinsics = Intrinsics::new(120.0, 120.0, 80.0, 60.0, 160, 120, 0.3, 8.0).unwrap();
    let poses = (0..12)
        .map(|i| {
            let a = (i as f64 - 6.0) * 0.04;
            Pose::new(UnitQuaternion::from_euler_angles(a, -a, 0.0), Vector3::new(0.05 * i as f64, 0.0, 0.0))
        })
        .collect();
    let fx = Fixture {
        scene,
        intrinsics,
        poses,
        t0: 0.0,
        dt: 0.1,
    };
    fx.validate().unwrap();
    let frames = fx.render_frames();
    let map = fuse_sequence(&frames, &frames.poses(), &FusionConfig::default()).unwrap();
    let r = dmp(&map, &frames, &DmpOptions::default()).unwrap();
    assert!(r.mean_sq < 1e-4, "mean_sq {}", r.mean_sq);
    assert!(r.coverage > 0.9, "coverage {}", r.coverage);
}
