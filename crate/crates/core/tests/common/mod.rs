#![allow(dead_code)]

use gsdf_core::geom::quat_normalize;
use gsdf_core::scene::{Camera, GaussianPrimitive};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Camera on the -z axis looking at the origin.
pub fn camera(width: usize, height: usize) -> Camera {
    Camera::look_at(
        "test",
        Vector3::new(0.0, 0.0, -5.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        1.2 * width as f64,
        width,
        height,
        0.1,
        100.0,
    )
}

/// Up to `n` anisotropic primitives near the origin, in view of [`camera`],
/// with their opacities.
pub fn random_scene(seed: u64, n: usize) -> (Vec<GaussianPrimitive>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=n);
    let mut prims = Vec::with_capacity(count);
    let mut ops = Vec::with_capacity(count);
    for _ in 0..count {
        let mu = [rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), rng.random_range(-1.0..1.0)];
        let q = quat_normalize(&[rng.random_range(0.2..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let scale = [rng.random_range(0.1..0.6), rng.random_range(0.1..0.6), rng.random_range(0.1..0.6)];
        let color = [rng.random(), rng.random(), rng.random()];
        let o = rng.random_range(0.1..0.9);
        prims.push(GaussianPrimitive::new(mu, q, scale, color, o));
        ops.push(o);
    }
    (prims, ops)
}
