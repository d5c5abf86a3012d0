//! Pairwise spread of blending weights along each pixel's ray.

use crate::raster::{MapGrads, RenderedMaps};

/// `mean over pixels of sum_{i,j} w_i w_j |z_i - z_j|` with gradients
/// w.r.t. every intersection's weight and depth.
pub fn distortion_loss(maps: &RenderedMaps) -> (f64, MapGrads) {
    let npix = maps.width * maps.height;
    let m = maps.intersections.len();
    let mut gw = vec![0.0; m];
    let mut gz = vec![0.0; m];
    if npix == 0 {
        return (0.0, MapGrads::default());
    }
    let inv = 1.0 / npix as f64;
    let mut total = 0.0;
    for p in 0..npix {
        let (lo, hi) = (maps.isect_offsets[p], maps.isect_offsets[p + 1]);
        if hi - lo < 2 {
            continue;
        }
        let list = &maps.intersections[lo..hi];
        let w_all: f64 = list.iter().map(|i| i.weight).sum();
        let wz_all: f64 = list.iter().map(|i| i.weight * i.depth).sum();
        // Depths are ascending, so prefix sums split each term into the
        // pairs in front of and behind intersection i.
        let (mut w_front, mut wz_front) = (0.0, 0.0);
        let mut pixel = 0.0;
        for (k, is) in list.iter().enumerate() {
            let (w_back, wz_back) = (w_all - w_front - is.weight, wz_all - wz_front - is.weight * is.depth);
            let spread = is.depth * w_front - wz_front + wz_back - is.depth * w_back;
            pixel += is.weight * (is.depth * w_front - wz_front);
            gw[lo + k] = 2.0 * inv * spread;
            gz[lo + k] = 2.0 * inv * is.weight * (w_front - w_back);
            w_front += is.weight;
            wz_front += is.weight * is.depth;
        }
        total += 2.0 * pixel;
    }
    (
        total * inv,
        MapGrads {
            weight: Some(gw),
            isect_depth: Some(gz),
            ..Default::default()
        },
    )
}
