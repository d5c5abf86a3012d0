//! Haar pyramid levels and the L1 + SSIM photometric term.

use crate::error::{Error, Result};
use crate::scene::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const L1_WEIGHT: f64 = 0.8;
const SSIM_WEIGHT: f64 = 0.2;

/// Approximation band of an `l`-level Haar decomposition, divided by `2^l`
/// so that intensities stay in their original range. Images whose sides are
/// not divisible by `2^l` are cropped first.
pub fn wavelet_level(img: &Image, level: u32) -> Image {
    if level == 0 {
        return img.clone();
    }
    let f = 1usize << level;
    let (w, h) = ((img.width / f) * f, (img.height / f) * f);
    if w != img.width || h != img.height {
        log::warn!(
            "{}x{} image is not divisible by {f}; cropping to {w}x{h} for wavelet level {level}",
            img.width,
            img.height
        );
    }
    let mut cur = Image::from_fn(w, h, img.channels, |x, y, c| img.get(x, y, c));
    for _ in 0..level {
        cur = Image::from_fn(cur.width / 2, cur.height / 2, cur.channels, |x, y, c| {
            // Approximation coefficient is (a+b+c+d)/2; rescaling by 1/2 gives the block mean.
            let s = cur.get(2 * x, 2 * y, c)
                + cur.get(2 * x + 1, 2 * y, c)
                + cur.get(2 * x, 2 * y + 1, c)
                + cur.get(2 * x + 1, 2 * y + 1, c);
            s * 0.25
        });
        if cur.width == 0 || cur.height == 0 {
            break;
        }
    }
    cur
}

/// Window sums of a single-channel plane over the `SSIM_WINDOW` box clipped
/// to the image, via a summed-area table.
fn box_sum(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let mut sat = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += plane[y * w + x];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            out[y * w + x] =
                sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
        }
    }
    out
}

fn window_counts(w: usize, h: usize) -> Vec<f64> {
    box_sum(&vec![1.0; w * h], w, h)
}

/// Mean SSIM over pixels and channels, and its gradient w.r.t. `x`.
pub fn ssim_with_grad(x: &Image, y: &Image) -> Result<(f64, Image)> {
    if !x.same_shape(y) {
        return Err(Error::DimensionMismatch(format!(
            "ssim of {}x{}x{} and {}x{}x{} images",
            x.width, x.height, x.channels, y.width, y.height, y.channels
        )));
    }
    let (w, h, ch) = (x.width, x.height, x.channels);
    let n = w * h;
    if n == 0 || ch == 0 {
        return Err(Error::EmptyInput("ssim of an empty image".into()));
    }
    let counts = window_counts(w, h);
    let mut grad = Image::new(w, h, ch);
    let mut total = 0.0;
    let norm = 1.0 / (n * ch) as f64;
    for c in 0..ch {
        let xs: Vec<f64> = (0..n).map(|p| x.data[p * ch + c]).collect();
        let ys: Vec<f64> = (0..n).map(|p| y.data[p * ch + c]).collect();
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let sx = box_sum(&xs, w, h);
        let sy = box_sum(&ys, w, h);
        let sxx = box_sum(&sq(&xs, &xs), w, h);
        let syy = box_sum(&sq(&ys, &ys), w, h);
        let sxy = box_sum(&sq(&xs, &ys), w, h);
        let mut ca = vec![0.0; n];
        let mut cb = vec![0.0; n];
        let mut cc = vec![0.0; n];
        for p in 0..n {
            let k = counts[p];
            let (mx, my) = (sx[p] / k, sy[p] / k);
            let (exx, eyy, exy) = (sxx[p] / k, syy[p] / k, sxy[p] / k);
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * (exy - mx * my) + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            let d_mx = (2.0 * my * a2 - 2.0 * my * a1) / (b1 * b2) - s * (2.0 * mx / b1 - 2.0 * mx / b2);
            let d_exx = -s / b2;
            let d_exy = 2.0 * a1 / (b1 * b2);
            ca[p] = d_mx / k;
            cb[p] = d_exx / k;
            cc[p] = d_exy / k;
        }
        // The clipped window relation is symmetric, so scattering back is another box sum.
        let ba = box_sum(&ca, w, h);
        let bb = box_sum(&cb, w, h);
        let bc = box_sum(&cc, w, h);
        for p in 0..n {
            grad.data[p * ch + c] = norm * (ba[p] + 2.0 * xs[p] * bb[p] + ys[p] * bc[p]);
        }
    }
    Ok((total * norm, grad))
}

pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    ssim_with_grad(x, y).map(|(s, _)| s)
}

/// `0.8 * mean|r - g| + 0.2 * (1 - SSIM(r, g))` and its gradient w.r.t. `rendered`.
pub fn photometric_loss(rendered: &Image, gt: &Image) -> Result<(f64, Image)> {
    let (s, mut grad) = ssim_with_grad(rendered, gt)?;
    let n = rendered.data.len() as f64;
    let mut l1 = 0.0;
    for ((g, r), t) in grad.data.iter_mut().zip(&rendered.data).zip(&gt.data) {
        let d = r - t;
        l1 += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = L1_WEIGHT * sign / n - SSIM_WEIGHT * *g;
    }
    Ok((L1_WEIGHT * l1 / n + SSIM_WEIGHT * (1.0 - s), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
        Image::from_fn(w, h, c, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn wavelet_identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 16, 8, 3);
        assert_eq!(wavelet_level(&img, 0), img);
        let c = Image::filled(16, 16, 3, 0.37);
        let out = wavelet_level(&c, 3);
        assert_eq!((out.width, out.height), (2, 2));
        assert!(out.data.iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn wavelet_checkerboard_is_half() {
        let img = Image::from_fn(2, 2, 1, |x, y, _| ((x + y) % 2) as f64);
        let out = wavelet_level(&img, 1);
        assert_eq!(out.data, vec![0.5]);
    }

    #[test]
    fn wavelet_crops_indivisible_sizes() {
        let img = Image::filled(10, 7, 1, 1.0);
        let out = wavelet_level(&img, 2);
        assert_eq!((out.width, out.height), (2, 1));
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 12, 9, 3);
        let (l, g) = photometric_loss(&img, &img).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Image::new(4, 4, 3);
        let b = Image::new(4, 5, 3);
        assert!(photometric_loss(&a, &b).is_err());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 14, 13, 2);
        let y = random_image(&mut rng, 14, 13, 2);
        let (_, g) = ssim_with_grad(&x, &y).unwrap();
        let h = 1e-6;
        for _ in 0..20 {
            let i = rng.random_range(0..x.data.len());
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (ssim(&xp, &y).unwrap() - ssim(&xm, &y).unwrap()) / (2.0 * h);
            assert!((fd - g.data[i]).abs() <= 1e-5 * fd.abs().max(1e-6), "{fd} vs {}", g.data[i]);
        }
    }
}
