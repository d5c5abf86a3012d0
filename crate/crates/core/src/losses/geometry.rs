//! Monocular geometry cues: expected depth, affine-disparity alignment,
//! normals from depth maps, and the two normal-agreement terms.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{Error, Result};
use crate::raster::{MapGrads, RenderedMaps};
use crate::scene::{Camera, Disparity, Image};

/// Pixels with accumulated opacity below this carry no surface estimate.
pub const MIN_COVERAGE: f64 = 0.5;
/// Smallest admissible alignment denominator `s * Z + t`.
pub const ALIGN_EPS: f64 = 1e-6;

/// Opacity-normalized rendered depth `D / alpha` on well-covered pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedDepth {
    pub depth: Image,
    pub mask: Vec<bool>,
}

pub fn expected_depth(maps: &RenderedMaps) -> ExpectedDepth {
    let n = maps.width * maps.height;
    let mut depth = Image::new(maps.width, maps.height, 1);
    let mut mask = vec![false; n];
    for p in 0..n {
        let a = maps.alpha.data[p];
        if a >= MIN_COVERAGE {
            depth.data[p] = maps.depth.data[p] / a;
            mask[p] = true;
        }
    }
    ExpectedDepth { depth, mask }
}

/// Pulls a gradient on [`ExpectedDepth::depth`] back to the depth and alpha buffers.
pub fn expected_depth_backward(maps: &RenderedMaps, grad: &Image) -> MapGrads {
    let n = maps.width * maps.height;
    let mut gd = Image::new(maps.width, maps.height, 1);
    let mut ga = Image::new(maps.width, maps.height, 1);
    for p in 0..n {
        let a = maps.alpha.data[p];
        if a >= MIN_COVERAGE && grad.data[p] != 0.0 {
            gd.data[p] = grad.data[p] / a;
            ga.data[p] = -grad.data[p] * maps.depth.data[p] / (a * a);
        }
    }
    MapGrads {
        depth: Some(gd),
        alpha: Some(ga),
        ..Default::default()
    }
}

/// Per-view map from pseudo-disparity to depth, `a / (s * Z + t) + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignParams {
    pub s: f64,
    pub t: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            s: 1.0,
            t: 0.0,
            a: 1.0,
            b: 0.0,
        }
    }
}

impl AlignParams {
    pub fn to_array(self) -> [f64; 4] {
        [self.s, self.t, self.a, self.b]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            s: v[0],
            t: v[1],
            a: v[2],
            b: v[3],
        }
    }

    pub fn depth_from(&self, z: f64) -> Option<f64> {
        let den = self.s * z + self.t;
        (den > ALIGN_EPS).then(|| self.a / den + self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignOutput {
    pub loss: f64,
    pub pseudo_depth: Image,
    /// Pixels that entered the loss.
    pub mask: Vec<bool>,
    pub dropped: usize,
    pub grad_params: AlignParams,
    /// Gradient w.r.t. the supervised depth image.
    pub grad_depth: Image,
}

/// Mean absolute difference between the aligned pseudo-depth and `depth`
/// over pixels valid in both `disp` and `depth_mask`.
pub fn align_pseudo_depth(
    disp: &Disparity,
    depth: &Image,
    depth_mask: &[bool],
    params: &AlignParams,
) -> Result<AlignOutput> {
    if !disp.values.same_shape(depth) || disp.mask.len() != depth_mask.len() {
        return Err(Error::DimensionMismatch(format!(
            "disparity {}x{} vs depth {}x{}",
            disp.values.width, disp.values.height, depth.width, depth.height
        )));
    }
    let n = depth.data.len();
    let mut mask = vec![false; n];
    let mut dropped = 0;
    for p in 0..n {
        if disp.mask[p] && depth_mask[p] {
            if params.s * disp.values.data[p] + params.t > ALIGN_EPS {
                mask[p] = true;
            } else {
                dropped += 1;
            }
        }
    }
    if dropped > 0 {
        counters::ALIGN_DROPPED.add(dropped as u64);
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::EmptyResult("no pixel left for pseudo-depth alignment".into()));
    }
    let inv = 1.0 / count as f64;
    let mut pseudo = Image::new(depth.width, depth.height, 1);
    let mut grad_depth = Image::new(depth.width, depth.height, 1);
    let mut g = [0.0; 4];
    let mut loss = 0.0;
    for p in 0..n {
        if !mask[p] {
            continue;
        }
        let z = disp.values.data[p];
        let den = params.s * z + params.t;
        let dh = params.a / den + params.b;
        pseudo.data[p] = dh;
        let r = dh - depth.data[p];
        loss += r.abs() * inv;
        let sign = if r > 0.0 {
            inv
        } else if r < 0.0 {
            -inv
        } else {
            0.0
        };
        let q = params.a / (den * den);
        g[0] -= sign * q * z;
        g[1] -= sign * q;
        g[2] += sign / den;
        g[3] += sign;
        grad_depth.data[p] = -sign;
    }
    Ok(AlignOutput {
        loss,
        pseudo_depth: pseudo,
        mask,
        dropped,
        grad_params: AlignParams::from_array(g),
        grad_depth,
    })
}

/// Fits the alignment parameters alone against a fixed depth image by
/// damped Gauss-Newton on squared residuals, starting from `init`. Returns
/// the parameters and their `L_D`.
pub fn fit_alignment(
    disp: &Disparity,
    depth: &Image,
    depth_mask: &[bool],
    init: AlignParams,
    max_iters: usize,
) -> Result<(AlignParams, f64)> {
    let pixels: Vec<(f64, f64)> = (0..depth.data.len())
        .filter(|&p| disp.mask[p] && depth_mask[p])
        .map(|p| (disp.values.data[p], depth.data[p]))
        .collect();
    if pixels.is_empty() {
        return Err(Error::EmptyResult("no pixel available for pseudo-depth alignment".into()));
    }
    let cost = |q: &[f64; 4]| -> f64 {
        let mut c = 0.0;
        for &(z, d) in &pixels {
            let den = q[0] * z + q[1];
            if den <= ALIGN_EPS {
                return f64::INFINITY;
            }
            let r = q[2] / den + q[3] - d;
            c += r * r;
        }
        c
    };
    let mut q = init.to_array();
    let mut c = cost(&q);
    if !c.is_finite() {
        return Err(Error::InvalidParameter("initial alignment makes a denominator vanish".into()));
    }
    let mut lambda = 1e-3;
    for _ in 0..max_iters {
        let mut jtj = nalgebra::Matrix4::<f64>::zeros();
        let mut jtr = nalgebra::Vector4::<f64>::zeros();
        for &(z, d) in &pixels {
            let den = q[0] * z + q[1];
            let r = q[2] / den + q[3] - d;
            let k = q[2] / (den * den);
            let j = nalgebra::Vector4::new(-k * z, -k, 1.0 / den, 1.0);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for i in 0..4 {
                a[(i, i)] += lambda * (jtj[(i, i)] + 1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = [q[0] + step[0], q[1] + step[1], q[2] + step[2], q[3] + step[3]];
            let cc = cost(&cand);
            if cc < c {
                q = cand;
                c = cc;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || c <= 1e-28 {
            break;
        }
    }
    let fitted = AlignParams::from_array(q);
    let loss = align_pseudo_depth(disp, depth, depth_mask, &fitted)?.loss;
    Ok((fitted, loss))
}

/// Unit normals with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    pub normals: Image,
    pub valid: Vec<bool>,
}

/// Indices (forward, backward) of the difference stencil along one axis.
fn stencil(i: usize, len: usize) -> Option<(usize, usize)> {
    if len < 2 {
        None
    } else if i == 0 {
        Some((1, 0))
    } else if i == len - 1 {
        Some((len - 1, len - 2))
    } else {
        Some((i + 1, i - 1))
    }
}

fn backproject(depth: &Image, cam: &Camera, x: usize, y: usize) -> Vector3<f64> {
    cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5) * depth.data[y * depth.width + x]
}

struct PixelTangents {
    xs: (usize, usize),
    ys: (usize, usize),
    tu: Vector3<f64>,
    tv: Vector3<f64>,
    cross: Vector3<f64>,
}

fn pixel_tangents(depth: &Image, mask: &[bool], cam: &Camera, x: usize, y: usize) -> Option<PixelTangents> {
    let w = depth.width;
    if !mask[y * w + x] {
        return None;
    }
    let xs = stencil(x, w)?;
    let ys = stencil(y, depth.height)?;
    let ok = mask[y * w + xs.0] && mask[y * w + xs.1] && mask[ys.0 * w + x] && mask[ys.1 * w + x];
    if !ok {
        return None;
    }
    let tu = backproject(depth, cam, xs.0, y) - backproject(depth, cam, xs.1, y);
    let tv = backproject(depth, cam, x, ys.0) - backproject(depth, cam, x, ys.1);
    let cross = tv.cross(&tu);
    (cross.norm() > 1e-300 && cross.iter().all(|v| v.is_finite())).then_some(PixelTangents {
        xs,
        ys,
        tu,
        tv,
        cross,
    })
}

/// Camera-frame normals of the surface implied by a z-depth image, facing
/// the camera (a fronto-parallel plane gives `(0, 0, -1)`).
pub fn pseudo_normal_from_depth(depth: &Image, mask: &[bool], cam: &Camera) -> Result<NormalField> {
    if depth.width != cam.width || depth.height != cam.height || mask.len() != depth.pixel_count() {
        return Err(Error::DimensionMismatch(format!(
            "depth {}x{} for a {}x{} camera",
            depth.width, depth.height, cam.width, cam.height
        )));
    }
    let (w, h) = (depth.width, depth.height);
    let mut normals = Image::new(w, h, 3);
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if let Some(t) = pixel_tangents(depth, mask, cam, x, y) {
                let n = t.cross.normalize();
                let p = y * w + x;
                normals.data[3 * p..3 * p + 3].copy_from_slice(n.as_slice());
                valid[p] = true;
            }
        }
    }
    Ok(NormalField { normals, valid })
}

/// Gradient w.r.t. `depth` of an objective with gradient `grad` on the
/// normals of [`pseudo_normal_from_depth`].
pub fn pseudo_normal_backward(depth: &Image, mask: &[bool], cam: &Camera, grad: &Image) -> Image {
    let (w, h) = (depth.width, depth.height);
    let mut out = Image::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let g = Vector3::new(grad.data[3 * p], grad.data[3 * p + 1], grad.data[3 * p + 2]);
            if g == Vector3::zeros() {
                continue;
            }
            let Some(t) = pixel_tangents(depth, mask, cam, x, y) else {
                continue;
            };
            let len = t.cross.norm();
            let n = t.cross / len;
            let dc = (g - n * n.dot(&g)) / len;
            // cross = tv x tu
            let dtv = t.tu.cross(&dc);
            let dtu = dc.cross(&t.tv);
            let ray = |xx: usize, yy: usize| cam.pixel_ray(xx as f64 + 0.5, yy as f64 + 0.5);
            out.data[y * w + t.xs.0] += ray(t.xs.0, y).dot(&dtu);
            out.data[y * w + t.xs.1] -= ray(t.xs.1, y).dot(&dtu);
            out.data[t.ys.0 * w + x] += ray(x, t.ys.0).dot(&dtv);
            out.data[t.ys.1 * w + x] -= ray(x, t.ys.1).dot(&dtv);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalAgreement {
    pub loss: f64,
    pub count: usize,
    /// Gradient w.r.t. the rendered (un-normalized) normal buffer.
    pub grad_rendered: Image,
    /// Gradient w.r.t. the reference normals.
    pub grad_reference: Image,
}

/// Mean of `1 - <n_ref, N / |N|>` over pixels valid in `reference`, covered
/// in `alpha`, and with a non-vanishing rendered normal.
pub fn normal_agreement(reference: &NormalField, rendered: &Image, alpha: &Image) -> Result<NormalAgreement> {
    if !reference.normals.same_shape(rendered) || alpha.pixel_count() != rendered.pixel_count() {
        return Err(Error::DimensionMismatch("normal images differ in shape".into()));
    }
    let n = rendered.pixel_count();
    let usable = |p: usize| {
        let v = &rendered.data[3 * p..3 * p + 3];
        reference.valid[p] && alpha.data[p] >= MIN_COVERAGE && v.iter().map(|c| c * c).sum::<f64>() > 1e-24
    };
    let count = (0..n).filter(|&p| usable(p)).count();
    let mut grad_rendered = Image::new(rendered.width, rendered.height, 3);
    let mut grad_reference = Image::new(rendered.width, rendered.height, 3);
    if count == 0 {
        return Ok(NormalAgreement {
            loss: 0.0,
            count,
            grad_rendered,
            grad_reference,
        });
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for p in (0..n).filter(|&p| usable(p)) {
        let v = Vector3::from_column_slice(&rendered.data[3 * p..3 * p + 3]);
        let r = Vector3::from_column_slice(&reference.normals.data[3 * p..3 * p + 3]);
        let len = v.norm();
        let u = v / len;
        loss += (1.0 - r.dot(&u)) * inv;
        let gv = -(r - u * u.dot(&r)) / len * inv;
        let gr = -u * inv;
        grad_rendered.data[3 * p..3 * p + 3].copy_from_slice(gv.as_slice());
        grad_reference.data[3 * p..3 * p + 3].copy_from_slice(gr.as_slice());
    }
    Ok(NormalAgreement {
        loss,
        count,
        grad_rendered,
        grad_reference,
    })
}

/// Agreement between pseudo-normals and rendered normals. The pseudo-normals
/// act as a fixed target. Empty masks are an error.
pub fn normal_cue_loss(pseudo: &NormalField, rendered: &Image, alpha: &Image) -> Result<(f64, Image)> {
    let out = normal_agreement(pseudo, rendered, alpha)?;
    if out.count == 0 {
        return Err(Error::EmptyResult("no pixel where pseudo and rendered normals are both defined".into()));
    }
    Ok((out.loss, out.grad_rendered))
}

/// Agreement between rendered normals and the normals of the rendered
/// expected depth. Gradients reach both the normal and the depth/alpha
/// buffers. Empty masks give zero.
pub fn depth_normal_loss(maps: &RenderedMaps, cam: &Camera) -> Result<(f64, MapGrads)> {
    let ed = expected_depth(maps);
    let field = pseudo_normal_from_depth(&ed.depth, &ed.mask, cam)?;
    let out = normal_agreement(&field, &maps.normal, &maps.alpha)?;
    if out.count == 0 {
        counters::EMPTY_DEPTH_NORMAL.bump();
        return Ok((0.0, MapGrads::default()));
    }
    let g_depth = pseudo_normal_backward(&ed.depth, &ed.mask, cam, &out.grad_reference);
    let mut grads = expected_depth_backward(maps, &g_depth);
    grads.normal = Some(out.grad_rendered);
    Ok((out.loss, grads))
}
