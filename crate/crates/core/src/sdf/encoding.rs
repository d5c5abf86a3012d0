//! Coordinate normalization, one-blob encoding and SDF-to-opacity maps.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::scene::SceneBounds;

/// How world coordinates are squashed into the unit cube the hash grid expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Per-axis logistic with slope `2 / extent` around the bounds center.
    #[default]
    Sigmoid,
    /// Unbounded-scene contraction into a radius-2 ball, rescaled to (0, 1).
    Contraction,
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Normalized coordinates are kept this far inside the open unit interval;
/// the logistic itself rounds to exactly 0 or 1 beyond about 37 slopes.
pub const UNIT_MARGIN: f64 = 1e-12;

/// Sigmoid normalization `1 / (1 + exp(-sigma (x - center)))` with `sigma = 2 / extent`.
pub fn normalize_coord(x: &Vector3<f64>, bounds: &SceneBounds) -> Vector3<f64> {
    Vector3::from_fn(|a, _| {
        logistic(2.0 / bounds.extent[a] * (x[a] - bounds.center[a])).clamp(UNIT_MARGIN, 1.0 - UNIT_MARGIN)
    })
}

/// Closed-form inverse of [`normalize_coord`].
pub fn denormalize_coord(u: &Vector3<f64>, bounds: &SceneBounds) -> Vector3<f64> {
    Vector3::from_fn(|a, _| bounds.center[a] + 0.5 * bounds.extent[a] * (u[a] / (1.0 - u[a])).ln())
}

impl Normalization {
    /// Normalized coordinate and its Jacobian w.r.t. the world point.
    pub fn apply(&self, x: &Vector3<f64>, bounds: &SceneBounds) -> (Vector3<f64>, Matrix3<f64>) {
        match self {
            Normalization::Sigmoid => {
                let u = normalize_coord(x, bounds);
                let d = Vector3::from_fn(|a, _| 2.0 / bounds.extent[a] * u[a] * (1.0 - u[a]));
                (u, Matrix3::from_diagonal(&d))
            }
            Normalization::Contraction => {
                let scale = Vector3::from_fn(|a, _| 2.0 / bounds.extent[a]);
                let xt = Vector3::from_fn(|a, _| (x[a] - bounds.center[a]) * scale[a]);
                let r = xt.norm();
                let (c, dc) = if r <= 1.0 {
                    (xt, Matrix3::identity())
                } else {
                    let k = 2.0 / r - 1.0 / (r * r);
                    let dk = -2.0 / (r * r) + 2.0 / (r * r * r);
                    (xt * k, Matrix3::identity() * k + (xt * xt.transpose()) * (dk / r))
                };
                let u = c * 0.25 + Vector3::repeat(0.5);
                (u, dc * 0.25 * Matrix3::from_diagonal(&scale))
            }
        }
    }
}

/// Value of the unnormalized kernel at the truncation radius of 3 bins.
const ONEBLOB_FLOOR: f64 = 0.011108996538242306; // exp(-4.5)

/// One-blob encoding of `u` over `k` bins: a Gaussian kernel of width `1/k`
/// at the bin centers `(i + 0.5) / k`, truncated at 3 bins and shifted so it
/// reaches zero continuously there. Writes values and `d value / d u`.
pub fn oneblob_encode_into(u: f64, k: usize, out: &mut [f64], dout: &mut [f64]) {
    let kf = k as f64;
    let u = if u > 0.0 && u < 1.0 {
        u
    } else {
        crate::counters::ONEBLOB_CLAMPED.bump();
        if u.is_nan() {
            0.5
        } else {
            u.clamp(UNIT_MARGIN, 1.0 - UNIT_MARGIN)
        }
    };
    for i in 0..k {
        let d = (u - (i as f64 + 0.5) / kf) * kf;
        if d.abs() >= 3.0 {
            out[i] = 0.0;
            dout[i] = 0.0;
        } else {
            let e = (-0.5 * d * d).exp();
            out[i] = (e - ONEBLOB_FLOOR) / (1.0 - ONEBLOB_FLOOR);
            dout[i] = e * (-d * kf) / (1.0 - ONEBLOB_FLOOR);
        }
    }
}

pub fn oneblob_encode(u: f64, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    let mut d = vec![0.0; k];
    oneblob_encode_into(u, k, &mut out, &mut d);
    out
}

/// Maps a signed distance to a primitive opacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OpacityMap {
    /// `exp(-(beta s)^2)`; full opacity on the surface.
    #[default]
    Gaussian,
    /// Logistic-density bell `sigmoid(beta s) (1 - sigmoid(beta s))`, peaking at 0.25.
    Bell,
}

impl OpacityMap {
    /// Opacity with its derivatives w.r.t. `s` and `beta`.
    pub fn eval(&self, s: f64, beta: f64) -> (f64, f64, f64) {
        match self {
            OpacityMap::Gaussian => {
                let g = sdf_to_opacity(s, beta);
                (g, -2.0 * beta * beta * s * g, -2.0 * beta * s * s * g)
            }
            OpacityMap::Bell => {
                let p = logistic(beta * s);
                let v = p * (1.0 - p);
                let dv = v * (1.0 - 2.0 * p);
                (v, dv * beta, dv * s)
            }
        }
    }
}

pub fn sdf_to_opacity(s: f64, beta: f64) -> f64 {
    let t = beta * s;
    (-t * t).exp()
}

/// `d sdf_to_opacity / d s`.
pub fn sdf_to_opacity_grad(s: f64, beta: f64) -> f64 {
    -2.0 * beta * beta * s * sdf_to_opacity(s, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bounds() -> SceneBounds {
        SceneBounds::new([0.3, -1.0, 2.0], [2.0, 0.5, 4.0]).unwrap()
    }

    #[test]
    fn center_maps_to_half() {
        let b = bounds();
        let u = normalize_coord(&Vector3::from(b.center), &b);
        assert_eq!(u, Vector3::repeat(0.5));
    }

    #[test]
    fn half_extent_maps_to_logistic_of_one() {
        let b = bounds();
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        for a in 0..3 {
            let mut x = Vector3::from(b.center);
            x[a] += b.extent[a] / 2.0;
            let u = normalize_coord(&x, &b);
            assert!((u[a] - want).abs() < 1e-12);
            assert!((u[a] - 0.73106).abs() < 1e-5);
        }
    }

    #[test]
    fn far_points_saturate_but_stay_open() {
        let b = bounds();
        let x = Vector3::from(b.center) + Vector3::from(b.extent) * 100.0;
        let u = normalize_coord(&x, &b);
        for a in 0..3 {
            assert!(u[a] > 0.999 && u[a] < 1.0);
        }
    }

    #[test]
    fn jacobian_at_center_is_half_inverse_extent() {
        let b = bounds();
        let (_, j) = Normalization::Sigmoid.apply(&Vector3::from(b.center), &b);
        for a in 0..3 {
            assert!((j[(a, a)] - 1.0 / (2.0 * b.extent[a])).abs() < 1e-9);
        }
    }

    #[test]
    fn contraction_jacobian_matches_finite_differences() {
        let b = bounds();
        for x in [Vector3::new(0.4, -1.1, 2.3), Vector3::new(5.0, 3.0, -7.0)] {
            let (_, j) = Normalization::Contraction.apply(&x, &b);
            for a in 0..3 {
                let mut e = Vector3::zeros();
                e[a] = 1e-6;
                let d = (Normalization::Contraction.apply(&(x + e), &b).0 - Normalization::Contraction.apply(&(x - e), &b).0) / 2e-6;
                assert!((j.column(a) - d).norm() < 1e-7);
            }
            let (u, _) = Normalization::Contraction.apply(&x, &b);
            assert!(u.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    proptest! {
        #[test]
        fn normalization_round_trips(t in prop::array::uniform3(-0.5f64..0.5)) {
            let b = bounds();
            let x = Vector3::from_fn(|a, _| b.center[a] + t[a] * b.extent[a]);
            let back = denormalize_coord(&normalize_coord(&x, &b), &b);
            for a in 0..3 {
                prop_assert!((back[a] - x[a]).abs() < 1e-6 * b.extent[a]);
            }
        }

        #[test]
        fn normalization_is_monotone(a in -50.0f64..50.0, d in 1e-6f64..10.0) {
            let b = bounds();
            let lo = normalize_coord(&Vector3::repeat(a), &b);
            let hi = normalize_coord(&Vector3::repeat(a + d), &b);
            for k in 0..3 {
                prop_assert!(hi[k] >= lo[k]);
            }
        }
    }

    #[test]
    fn oneblob_peaks_at_bin_center() {
        let k = 16;
        let j = 5;
        let v = oneblob_encode((j as f64 + 0.5) / k as f64, k);
        let (arg, _) = v.iter().enumerate().fold((0, f64::MIN), |m, (i, &x)| if x > m.1 { (i, x) } else { m });
        assert_eq!(arg, j);
        assert!((v[j] - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn oneblob_symmetry() {
        let k = 16;
        let v = oneblob_encode(0.5, k);
        for i in 0..k {
            assert!((v[i] - v[k - 1 - i]).abs() < 1e-12);
        }
        let a = oneblob_encode(0.25, 8);
        let b = oneblob_encode(0.75, 8);
        for i in 0..8 {
            assert!((a[i] - b[7 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn opacity_map_values() {
        assert_eq!(sdf_to_opacity(0.0, 100.0), 1.0);
        assert!((sdf_to_opacity(0.01, 100.0) - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(sdf_to_opacity(0.037, 100.0), sdf_to_opacity(-0.037, 100.0));
        let (bell0, _, _) = OpacityMap::Bell.eval(0.0, 100.0);
        assert_eq!(bell0, 0.25);
        // Monotone decreasing on s >= 0 over a fine grid.
        let mut prev = 1.0;
        for i in 1..=10_000 {
            let g = sdf_to_opacity(i as f64 * 1e-5, 100.0);
            assert!(g < prev);
            prev = g;
        }
    }

    #[test]
    fn opacity_map_derivatives() {
        for map in [OpacityMap::Gaussian, OpacityMap::Bell] {
            for &s in &[-0.013, 0.0, 0.004, 0.02] {
                let beta = 80.0;
                let (_, ds, db) = map.eval(s, beta);
                let h = 1e-7;
                let fd_s = (map.eval(s + h, beta).0 - map.eval(s - h, beta).0) / (2.0 * h);
                let fd_b = (map.eval(s, beta + h).0 - map.eval(s, beta - h).0) / (2.0 * h);
                assert!((ds - fd_s).abs() < 1e-5 * (1.0 + fd_s.abs()));
                assert!((db - fd_b).abs() < 1e-5 * (1.0 + fd_b.abs()));
            }
        }
    }
}
