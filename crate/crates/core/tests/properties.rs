use gsdf_core::dataset::{load_manifest, make_synthetic, save_manifest, Shape, SyntheticSpec, MANIFEST_FILE};
use gsdf_core::geom::{quat_norm, quat_normalize};
use gsdf_core::mesher::{extract_mesh, AnalyticField};
use gsdf_core::losses::{align_pseudo_depth, wavelet_level, AlignParams};
use gsdf_core::raster::{render, RasterConfig};
use gsdf_core::scene::{bounds_from_points, covariance_from_params, Disparity, GaussianPrimitive, Image, SceneBounds};
use gsdf_core::sdf::encoding::{denormalize_coord, normalize_coord};
use gsdf_core::sdf::sdf_to_opacity;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{camera, random_scene};

fn quat() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0f64..1.0).prop_filter("non-degenerate", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_determinant_is_squared_scale_product(q in quat(), s in prop::array::uniform3(1e-3f64..3.0)) {
        let cov = covariance_from_params(&quat_normalize(&q), &s).unwrap();
        let want = (s[0] * s[1] * s[2]).powi(2);
        prop_assert!((cov.determinant() - want).abs() <= 1e-9 * want);
    }

    #[test]
    fn bounds_follow_translation(
        pts in prop::collection::vec(prop::array::uniform3(-1000i32..1000), 5..60),
        shift in prop::array::uniform3(-4096i32..4096),
    ) {
        let p: Vec<[f64; 3]> = pts.iter().map(|v| v.map(|x| x as f64 / 1024.0)).collect();
        let t = shift.map(|x| x as f64 / 1024.0);
        let q: Vec<[f64; 3]> = p.iter().map(|v| std::array::from_fn(|a| v[a] + t[a])).collect();
        let a = bounds_from_points(&p, 0.05, 96.0).unwrap();
        let b = bounds_from_points(&q, 0.05, 96.0).unwrap();
        for k in 0..3 {
            prop_assert!((b.center[k] - a.center[k] - t[k]).abs() < 1e-12);
            prop_assert!((b.extent[k] - a.extent[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_is_monotone_and_invertible(
        c in prop::array::uniform3(-5.0f64..5.0),
        e in prop::array::uniform3(0.1f64..10.0),
        x in prop::array::uniform3(-0.5f64..0.5),
        dx in 1e-6f64..1.0,
    ) {
        let bounds = SceneBounds::new(c, e).unwrap();
        let p = Vector3::from_fn(|a, _| c[a] + x[a] * e[a]);
        let u = normalize_coord(&p, &bounds);
        let back = denormalize_coord(&u, &bounds);
        for a in 0..3 {
            prop_assert!((back[a] - p[a]).abs() < 1e-6 * e[a]);
            let mut q = p;
            q[a] += dx * e[a];
            prop_assert!(normalize_coord(&q, &bounds)[a] > u[a]);
        }
    }

    #[test]
    fn wavelet_levels_compose(w in 1usize..5, h in 1usize..5, a in 0u32..3, b in 0u32..3, seed in any::<u64>()) {
        let mut state = seed;
        let img = Image::from_fn(w * 16, h * 16, 3, |_, _, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        });
        let direct = wavelet_level(&img, a + b);
        let nested = wavelet_level(&wavelet_level(&img, a), b);
        prop_assert_eq!(direct.width, nested.width);
        for (x, y) in direct.data.iter().zip(&nested.data) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn alignment_loss_is_gauge_invariant(
        disp in prop::collection::vec(0.2f64..2.0, 16),
        depth in prop::collection::vec(0.5f64..4.0, 16),
        s in 0.5f64..2.0, t in 0.0f64..1.0, a in 0.5f64..2.0, b in -0.5f64..0.5,
        c in 0.1f64..10.0,
    ) {
        let d = Disparity { values: Image { width: 4, height: 4, channels: 1, data: disp }, mask: vec![true; 16] };
        let z = Image { width: 4, height: 4, channels: 1, data: depth };
        let m = vec![true; 16];
        let l0 = align_pseudo_depth(&d, &z, &m, &AlignParams { s, t, a, b }).unwrap().loss;
        let l1 = align_pseudo_depth(&d, &z, &m, &AlignParams { s: c * s, t: c * t, a: c * a, b }).unwrap().loss;
        prop_assert!((l0 - l1).abs() < 1e-9);
    }

    #[test]
    fn blending_conserves_transmittance(seed in any::<u64>()) {
        let (scene, ops) = random_scene(seed, 8);
        let cam = camera(16, 16);
        let maps = render(&scene, &ops, &cam, [0.0; 3], &RasterConfig::default()).unwrap();
        for p in 0..256 {
            let sum: f64 = maps.pixel_intersections(p).iter().map(|i| i.weight).sum();
            prop_assert!((maps.residual_transmittance(p) + sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn opaque_front_splat_hides_the_rest(seed in any::<u64>()) {
        let (mut scene, mut ops) = random_scene(seed, 6);
        let cam = camera(16, 16);
        // Large, fully opaque and nearer than anything in the random scene.
        scene.push(GaussianPrimitive::isotropic([0.0, 0.0, -2.5], 2.0, [0.9, 0.1, 0.4], 1.0));
        ops.push(1.0);
        let front = scene.len() - 1;
        let alone = render(&scene[front..], &ops[front..], &cam, [0.0; 3], &RasterConfig::default()).unwrap();
        let maps = render(&scene, &ops, &cam, [0.0; 3], &RasterConfig::default()).unwrap();
        for p in 0..256 {
            let hits = maps.pixel_intersections(p);
            prop_assert_eq!(hits[0].source as usize, front);
            // Everything behind shares what the front splat lets through.
            let leak = 1.0 - hits[0].weight;
            for c in 0..3 {
                prop_assert!((maps.color.data[3 * p + c] - alone.color.data[3 * p + c]).abs() <= leak + 1e-12);
            }
        }
    }

    #[test]
    fn input_order_does_not_change_a_single_bit(seed in any::<u64>()) {
        let (scene, ops) = random_scene(seed, 8);
        let mut order: Vec<usize> = (0..scene.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        let shuffled: Vec<_> = order.iter().map(|&i| scene[i].clone()).collect();
        let shuffled_ops: Vec<f64> = order.iter().map(|&i| ops[i]).collect();
        let cam = camera(16, 16);
        let a = render(&scene, &ops, &cam, [0.1; 3], &RasterConfig::default()).unwrap();
        let b = render(&shuffled, &shuffled_ops, &cam, [0.1; 3], &RasterConfig::default()).unwrap();
        for (x, y) in [(&a.color, &b.color), (&a.depth, &b.depth), (&a.normal, &b.normal), (&a.alpha, &b.alpha)] {
            prop_assert!(x.data.iter().zip(&y.data).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn renormalized_rotation_has_unit_norm(q in quat(), s in 1e-3f64..1e3) {
        let mut g = GaussianPrimitive::new([0.0; 3], q.map(|v| v * s), [0.1; 3], [0.5; 3], 0.5);
        g.renormalize();
        prop_assert!((quat_norm(&g.rot) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn opacity_map_is_even_and_decreasing_on_a_grid() {
    assert_eq!(sdf_to_opacity(0.0, 100.0), 1.0);
    let mut prev = 1.0;
    for i in 1..=10_000 {
        let s = i as f64 * 1e-5;
        let v = sdf_to_opacity(s, 100.0);
        assert_eq!(v, sdf_to_opacity(-s, 100.0));
        assert!(v < prev || v == 0.0, "not decreasing at {s}");
        prev = v;
    }
}

#[test]
fn normalization_jacobian_at_center() {
    let bounds = SceneBounds::new([0.3, -1.0, 2.0], [2.0, 0.5, 4.0]).unwrap();
    let c = Vector3::from(bounds.center);
    let h = 1e-6;
    for a in 0..3 {
        let mut p = c;
        p[a] += h;
        let mut m = c;
        m[a] -= h;
        let d = (normalize_coord(&p, &bounds)[a] - normalize_coord(&m, &bounds)[a]) / (2.0 * h);
        assert!((d - 1.0 / (2.0 * bounds.extent[a])).abs() < 1e-9);
    }
}

#[test]
fn manifest_survives_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { cameras: 3, width: 8, height: 8, points: 20, ..SyntheticSpec::default() };
    let syn = make_synthetic(&spec, dir.path(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let copy = dir.path().join("copy.json");
    save_manifest(&copy, &syn.dataset.manifest).unwrap();
    let a = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
    let b = load_manifest(&copy).unwrap();
    assert_eq!(a, syn.dataset.manifest);
    assert_eq!(a, b);
    for (entry, cam) in a.cameras.iter().zip(&syn.dataset.cameras) {
        let back = entry.to_camera().unwrap();
        assert!((back.rotation - cam.rotation).abs().max() < 1e-12);
        assert!((back.translation - cam.translation).abs().max() < 1e-12);
    }
}

#[test]
fn synthetic_depth_lands_on_the_surface() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        shapes: vec![
            Shape::Sphere { center: [0.0; 3], radius: 0.5 },
            Shape::Sphere { center: [0.4, 0.2, 0.1], radius: 0.3 },
        ],
        cameras: 4,
        width: 24,
        height: 24,
        fx: 33.0,
        ..SyntheticSpec::default()
    };
    let syn = make_synthetic(&spec, dir.path(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut checked = 0;
    for (v, cam) in syn.dataset.cameras.iter().enumerate() {
        let rt = cam.rotation.transpose();
        for p in 0..cam.width * cam.height {
            if !syn.hit[v][p] {
                continue;
            }
            let ray = cam.pixel_ray((p % cam.width) as f64 + 0.5, (p / cam.width) as f64 + 0.5);
            let x = rt * (ray * (syn.depth[v].data[p] / ray.z) - cam.translation);
            assert!(syn.scene.sdf(&x).abs() < 1e-3);
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn mesh_extraction_is_deterministic() {
    let field = AnalyticField {
        value: |p: &Vector3<f64>| p.norm() - 0.5,
        grad: |p: &Vector3<f64>| p.normalize(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sphere = gsdf_core::dataset::AnalyticScene { shapes: vec![Shape::Sphere { center: [0.0; 3], radius: 0.5 }] };
    let prims: Vec<GaussianPrimitive> = sphere
        .sample_surface(400, &mut rng)
        .unwrap()
        .into_iter()
        .map(|p| GaussianPrimitive::isotropic(p, 0.05, [0.5; 3], 0.5))
        .collect();
    let (a, _) = extract_mesh(&prims, &field, 32, 3.0).unwrap();
    let (b, _) = extract_mesh(&prims, &field, 32, 3.0).unwrap();
    assert_eq!(a, b);
}
