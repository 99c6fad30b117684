//! Depth rendering of a surfel map: the sensor model that predicts what a
//! depth camera at a given pose would read.
//!
//! Every surfel is splatted as a screen-space disk of constant depth (its
//! center's camera-frame `z`); a z-buffer keeps the nearest depth per pixel.
//! Pixel centers sit at integer coordinates.

use crate::fusion::{Surfel, SurfelMap};
use crate::geometry::{DepthImage, Intrinsics, Pose};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Lower bound on the splat radius in pixels.
    pub min_splat_px: f64,
    /// Skip surfels whose normal does not face the camera.
    pub backface_culling: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            min_splat_px: 1.0,
            backface_culling: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Splat {
    u: f64,
    v: f64,
    depth: f64,
    radius_px: f64,
}

fn splat(s: &Surfel, world_to_cam: &Pose, k: &Intrinsics, cfg: &RenderConfig) -> Option<Splat> {
    let p = world_to_cam.transform_point(&s.position);
    let z = p.z;
    if !(z > 0.0) || !k.in_depth_range(z) {
        return None;
    }
    if cfg.backface_culling && world_to_cam.transform_vector(&s.normal).dot(&p) >= 0.0 {
        return None;
    }
    Some(Splat {
        u: k.cx + k.fx * (p.x / z),
        v: k.cy + k.fy * (p.y / z),
        depth: z,
        radius_px: cfg.min_splat_px.max(k.fx * s.radius / z),
    })
}

fn rasterize(surfels: &[Surfel], world_to_cam: &Pose, k: &Intrinsics, cfg: &RenderConfig) -> Vec<f64> {
    let (w, h) = (k.width as i64, k.height as i64);
    let mut zbuf = vec![f64::INFINITY; k.pixel_count()];
    for s in surfels {
        let Some(sp) = splat(s, world_to_cam, k, cfg) else {
            continue;
        };
        let r = sp.radius_px;
        let r2 = r * r;
        let u0 = ((sp.u - r).ceil() as i64).max(0);
        let u1 = ((sp.u + r).floor() as i64).min(w - 1);
        let v0 = ((sp.v - r).ceil() as i64).max(0);
        let v1 = ((sp.v + r).floor() as i64).min(h - 1);
        for py in v0..=v1 {
            let dy = py as f64 - sp.v;
            let row = py as usize * k.width;
            for px in u0..=u1 {
                let dx = px as f64 - sp.u;
                if dx * dx + dy * dy <= r2 {
                    let cell = &mut zbuf[row + px as usize];
                    if sp.depth < *cell {
                        *cell = sp.depth;
                    }
                }
            }
        }
    }
    zbuf
}

const MIN_CHUNK: usize = 4096;

/// Renders the predicted depth image of `map` seen from camera pose `pose`.
///
/// Surfel chunks rasterize concurrently into private z-buffers that are then
/// reduced by `min`, so the output does not depend on the thread count.
pub fn render_depth(map: &SurfelMap, pose: &Pose, k: &Intrinsics, cfg: &RenderConfig) -> DepthImage {
    let world_to_cam = pose.inverse();
    let surfels = map.surfels();
    let chunk = MIN_CHUNK.max(surfels.len().div_ceil(4 * par::current_threads()));
    let mut buffers = par::map_chunks(surfels, chunk, |c| rasterize(c, &world_to_cam, k, cfg)).into_iter();
    let mut zbuf = buffers.next().unwrap_or_else(|| vec![f64::INFINITY; k.pixel_count()]);
    for b in buffers {
        for (dst, src) in zbuf.iter_mut().zip(b) {
            if src < *dst {
                *dst = src;
            }
        }
    }
    to_image(k, zbuf)
}

fn to_image(k: &Intrinsics, zbuf: Vec<f64>) -> DepthImage {
    let samples = zbuf.into_iter().map(|z| z.is_finite().then_some(z)).collect();
    DepthImage::from_samples(k.width, k.height, samples).expect("buffer sized from intrinsics")
}

/// Brute-force reference renderer: for every pixel, tests every surfel.
///
/// Quadratic in map size; intended for checking [`render_depth`] on small maps.
pub fn render_depth_oracle(map: &SurfelMap, pose: &Pose, k: &Intrinsics, cfg: &RenderConfig) -> DepthImage {
    let world_to_cam = pose.inverse();
    DepthImage::from_fn(k.width, k.height, |px, py| {
        let mut best: Option<f64> = None;
        for s in map.surfels() {
            let p = world_to_cam.rotation * s.position + world_to_cam.translation;
            if p.z <= 0.0 || p.z < k.depth_min || p.z > k.depth_max {
                continue;
            }
            if cfg.backface_culling {
                let n = world_to_cam.rotation * s.normal;
                if n.x * p.x + n.y * p.y + n.z * p.z >= 0.0 {
                    continue;
                }
            }
            let u = k.cx + k.fx * (p.x / p.z);
            let v = k.cy + k.fy * (p.y / p.z);
            let r = f64::max(cfg.min_splat_px, k.fx * s.radius / p.z);
            let (du, dv) = (px as f64 - u, py as f64 - v);
            if du * du + dv * dv <= r * r && best.is_none_or(|b| p.z < b) {
                best = Some(p.z);
            }
        }
        best
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100, 0.1, 10.0).unwrap()
    }

    fn facing(p: Vector3<f64>, radius: f64) -> Surfel {
        Surfel {
            position: p,
            normal: Vector3::new(0.0, 0.0, -1.0),
            radius,
            confidence: 1,
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, n: usize) -> SurfelMap {
        let surfels = (0..n)
            .map(|_| {
                let normal = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                    .normalize();
                Surfel {
                    position: Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(-0.5..4.0)),
                    normal,
                    radius: rng.random_range(0.0..0.05),
                    confidence: 1,
                }
            })
            .collect();
        SurfelMap::from_surfels(0.0, surfels)
    }

    #[test]
    fn empty_map_renders_invalid() {
        let d = render_depth(&SurfelMap::new(0.01), &Pose::identity(), &k100(), &RenderConfig::default());
        assert_eq!(d.valid_count(), 0);
    }

    #[test]
    fn nearest_wins() {
        let map = SurfelMap::from_surfels(
            0.0,
            vec![facing(Vector3::new(0.0, 0.0, 3.0), 0.01), facing(Vector3::new(0.0, 0.0, 2.0), 0.01)],
        );
        let cfg = RenderConfig::default();
        let d = render_depth(&map, &Pose::identity(), &k100(), &cfg);
        assert_eq!(d.get(50, 50), Some(2.0));
        assert_eq!(d, render_depth_oracle(&map, &Pose::identity(), &k100(), &cfg));
    }

    #[test]
    fn dense_plane_fills_image() {
        let k = k100();
        let surfels = (0..100)
            .flat_map(|v| (0..100).map(move |u| (u, v)))
            .map(|(u, v)| facing(crate::geometry::backproject(u as f64, v as f64, 2.0, &k).unwrap(), 0.02))
            .collect();
        let map = SurfelMap::from_surfels(0.0, surfels);
        let d = render_depth(&map, &Pose::identity(), &k, &RenderConfig::default());
        assert_eq!(d.valid_count(), 100 * 100);
        assert!(d.samples().iter().all(|z| (z.unwrap() - 2.0).abs() < 1e-9));
    }

    #[test]
    fn zero_radius_surfel_covers_unit_disk() {
        let map = SurfelMap::from_surfels(0.0, vec![facing(Vector3::new(0.0, 0.0, 2.0), 0.0)]);
        let cfg = RenderConfig::default();
        let k = k100();
        let d = render_depth(&map, &Pose::identity(), &k, &cfg);
        // integer pixels within distance 1 of (50, 50)
        let mut expect = Vec::new();
        for v in 48..=52i64 {
            for u in 48..=52i64 {
                if (u - 50).pow(2) + (v - 50).pow(2) <= 1 {
                    expect.push((u as usize, v as usize));
                }
            }
        }
        assert_eq!(expect.len(), 5);
        let got: Vec<(usize, usize)> = (0..100)
            .flat_map(|v| (0..100).map(move |u| (u, v)))
            .filter(|&(u, v)| d.get(u, v).is_some())
            .collect();
        let mut expect_sorted = expect.clone();
        expect_sorted.sort_by_key(|&(u, v)| (v, u));
        assert_eq!(got, expect_sorted);
        assert_eq!(d, render_depth_oracle(&map, &Pose::identity(), &k, &cfg));
    }

    #[test]
    fn backface_and_clamp_culling() {
        let k = k100();
        let away = Surfel {
            normal: Vector3::new(0.0, 0.0, 1.0),
            ..facing(Vector3::new(0.0, 0.0, 2.0), 0.01)
        };
        let far = facing(Vector3::new(0.0, 0.0, 12.0), 0.01);
        let map = SurfelMap::from_surfels(0.0, vec![away, far]);
        assert_eq!(render_depth(&map, &Pose::identity(), &k, &RenderConfig::default()).valid_count(), 0);
        let no_cull = RenderConfig {
            backface_culling: false,
            ..Default::default()
        };
        assert_eq!(render_depth(&map, &Pose::identity(), &k, &no_cull).get(50, 50), Some(2.0));
    }

    #[test]
    fn oracle_equivalence_small_random_maps() {
        let k = Intrinsics::new(30.0, 30.0, 16.0, 12.0, 32, 24, 0.1, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let map = random_map(&mut rng, 500);
            let cfg = RenderConfig {
                backface_culling: trial % 2 == 0,
                ..Default::default()
            };
            let pose = Pose::new(
                UnitQuaternion::from_euler_angles(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0),
                Vector3::new(0.0, 0.0, rng.random_range(-0.3..0.3)),
            );
            let a = render_depth(&map, &pose, &k, &cfg);
            let b = render_depth_oracle(&map, &pose, &k, &cfg);
            for (x, y) in a.samples().iter().zip(b.samples()) {
                match (x, y) {
                    (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-9),
                    (None, None) => {}
                    _ => panic!("valid masks differ in trial {trial}"),
                }
            }
        }
    }

    #[test]
    fn rigid_invariance() {
        let k = Intrinsics::new(30.0, 30.0, 16.0, 12.0, 32, 24, 0.1, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = random_map(&mut rng, 300);
        let g = Pose::new(UnitQuaternion::from_euler_angles(0.3, 1.0, -0.7), Vector3::new(2.0, -1.0, 0.4));
        let t = Pose::from_translation(0.05, 0.0, -0.1);
        let cfg = RenderConfig::default();
        let a = render_depth(&map, &t, &k, &cfg);
        let b = render_depth(&map.transformed(&g), &(g * t), &k, &cfg);
        let mut mismatched = 0;
        for (x, y) in a.samples().iter().zip(b.samples()) {
            match (x, y) {
                (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-9),
                (None, None) => {}
                _ => mismatched += 1,
            }
        }
        // a disk boundary may flip under last-bit rounding; none expected here
        assert_eq!(mismatched, 0);
    }

    #[test]
    fn adding_surfels_never_increases_depth() {
        let k = Intrinsics::new(30.0, 30.0, 16.0, 12.0, 32, 24, 0.1, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = random_map(&mut rng, 200);
        let extra = random_map(&mut rng, 200);
        let mut both = base.surfels().to_vec();
        both.extend_from_slice(extra.surfels());
        let cfg = RenderConfig::default();
        let a = render_depth(&base, &Pose::identity(), &k, &cfg);
        let b = render_depth(&SurfelMap::from_surfels(0.0, both), &Pose::identity(), &k, &cfg);
        for (x, y) in a.samples().iter().zip(b.samples()) {
            if let Some(x) = x {
                assert!(y.unwrap() <= *x);
            }
        }
    }
}
