//! Differentiable software rasterizer for 3D Gaussian primitives.
//!
//! Primitives are projected with the EWA approximation, sorted front to back
//! by camera-space depth and alpha-blended per pixel into color, depth, normal
//! and accumulated-alpha buffers. Every blended contribution is recorded so
//! [`render_backward`] can return exact gradients for all primitive
//! parameters and for the per-primitive opacity.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{rotation_from_quat, rotation_from_quat_backward};
use crate::scene::{Camera, GaussianPrimitive, Image};

const TILE: usize = 8;
/// Fixed chunk count for the backward reduction so results do not depend on
/// the worker count.
const BACKWARD_CHUNKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    /// Isotropic variance added to every screen-space covariance, in pixels².
    pub dilation: f64,
    /// Footprint truncation in standard deviations; `f64::INFINITY` disables it.
    pub cutoff_sigma: f64,
    /// Blending stops once transmittance falls below this value.
    pub min_transmittance: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            dilation: 0.3,
            cutoff_sigma: 3.0,
            min_transmittance: 1e-4,
        }
    }
}

impl RasterConfig {
    /// No footprint truncation and no early exit: the blended outputs are then
    /// smooth in every parameter, which finite-difference checks rely on.
    pub fn untruncated() -> Self {
        Self {
            cutoff_sigma: f64::INFINITY,
            min_transmittance: 0.0,
            ..Self::default()
        }
    }
}

/// A primitive projected to the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    /// Inverse covariance as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// Camera-space z of the primitive mean.
    pub depth: f64,
    /// Unit normal in the camera frame, facing the camera.
    pub normal: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub source_index: usize,
    /// Pixel half-size of the footprint bounding box.
    pub radius: f64,
    normal_axis: usize,
    normal_sign: f64,
    p_cam: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CullReason {
    BehindNear,
    BeyondFar,
    OffScreen,
    Singular,
}

/// Camera-space normal of a primitive: its shortest scale axis, flipped to
/// face the camera. Ties pick the lowest axis index.
pub fn normal_from_splat(g: &GaussianPrimitive, cam: &Camera) -> Vector3<f64> {
    let (n, _, _) = normal_parts(g, cam, &cam.to_camera(&g.mean()));
    n
}

fn normal_parts(g: &GaussianPrimitive, cam: &Camera, p_cam: &Vector3<f64>) -> (Vector3<f64>, usize, f64) {
    let mut axis = 0;
    for k in 1..3 {
        if g.scale[k] < g.scale[axis] {
            axis = k;
        }
    }
    let r = rotation_from_quat(&g.rot);
    let n = cam.rotation * r.column(axis);
    let sign = if n.dot(p_cam) > 0.0 { -1.0 } else { 1.0 };
    (n * sign, axis, sign)
}

pub fn project_primitive(g: &GaussianPrimitive, opacity: f64, cam: &Camera) -> Option<Splat2D> {
    project_with_config(g, opacity, cam, &RasterConfig::default(), 0).ok()
}

/// Projects `g`, or reports why it was culled.
pub fn project_with_config(
    g: &GaussianPrimitive,
    opacity: f64,
    cam: &Camera,
    cfg: &RasterConfig,
    source_index: usize,
) -> std::result::Result<Splat2D, CullReason> {
    let p = cam.to_camera(&g.mean());
    if p.z <= cam.near {
        return Err(CullReason::BehindNear);
    }
    if p.z >= cam.far {
        return Err(CullReason::BeyondFar);
    }
    let (z, x, y) = (p.z, p.x, p.y);
    let mean2d = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy];
    let j = Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z));
    let sigma = g.covariance().map_err(|_| CullReason::Singular)?;
    let m = cam.rotation * sigma * cam.rotation.transpose();
    let mut cov2d = j * m * j.transpose();
    cov2d = (cov2d + cov2d.transpose()) * 0.5 + Matrix2::identity() * cfg.dilation;
    let det = cov2d.determinant();
    if !(det > 1e-12) || !det.is_finite() {
        return Err(CullReason::Singular);
    }
    let conic = [cov2d[(1, 1)] / det, -cov2d[(0, 1)] / det, cov2d[(0, 0)] / det];
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = cfg.cutoff_sigma * lambda_max.sqrt();
    if radius.is_finite()
        && (mean2d[0] + radius < 0.0
            || mean2d[0] - radius > cam.width as f64
            || mean2d[1] + radius < 0.0
            || mean2d[1] - radius > cam.height as f64)
    {
        return Err(CullReason::OffScreen);
    }
    let (normal, normal_axis, normal_sign) = normal_parts(g, cam, &p);
    Ok(Splat2D {
        mean2d,
        cov2d,
        conic,
        depth: z,
        normal: [normal.x, normal.y, normal.z],
        opacity,
        color: g.color,
        source_index,
        radius,
        normal_axis,
        normal_sign,
        p_cam: p,
    })
}

/// One blended contribution at a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intersection {
    /// Blending weight `T_i * o_i`.
    pub weight: f64,
    pub depth: f64,
    pub source: u32,
    /// Index into [`RenderedMaps::splats`].
    pub splat: u32,
    pub transmittance: f64,
    /// Evaluated opacity `o_i` at the pixel center.
    pub opacity: f64,
    /// Footprint value `exp(power)` so that `opacity = splat.opacity * gauss`.
    pub gauss: f64,
}

#[derive(Debug, Clone)]
pub struct RenderedMaps {
    pub width: usize,
    pub height: usize,
    pub color: Image,
    pub depth: Image,
    pub normal: Image,
    pub alpha: Image,
    pub background: [f64; 3],
    /// Visible splats sorted front to back.
    pub splats: Vec<Splat2D>,
    /// `intersections[isect_offsets[p]..isect_offsets[p + 1]]` belong to pixel `p`,
    /// ordered by ascending depth.
    pub isect_offsets: Vec<usize>,
    pub intersections: Vec<Intersection>,
    pub culled: usize,
    pub primitive_count: usize,
}

impl RenderedMaps {
    pub fn pixel_intersections(&self, pixel: usize) -> &[Intersection] {
        &self.intersections[self.isect_offsets[pixel]..self.isect_offsets[pixel + 1]]
    }

    /// Transmittance left after the last blended splat at `pixel`.
    pub fn residual_transmittance(&self, pixel: usize) -> f64 {
        1.0 - self.alpha.data[pixel]
    }
}

/// Renders `scene` with one opacity per primitive.
pub fn render(
    scene: &[GaussianPrimitive],
    opacities: &[f64],
    cam: &Camera,
    background: [f64; 3],
    cfg: &RasterConfig,
) -> Result<RenderedMaps> {
    if scene.len() != opacities.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} primitives but {} opacities",
            scene.len(),
            opacities.len()
        )));
    }
    let projected: Vec<_> = scene
        .par_iter()
        .zip(opacities.par_iter())
        .enumerate()
        .map(|(i, (g, &o))| project_with_config(g, o, cam, cfg, i))
        .collect();
    let culled = projected.iter().filter(|p| p.is_err()).count();
    let mut splats: Vec<Splat2D> = projected.into_iter().filter_map(|p| p.ok()).collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source_index.cmp(&b.source_index)));

    let (w, h) = (cam.width, cam.height);
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let (x0, x1) = pixel_span(s.mean2d[0], s.radius, w);
        let (y0, y1) = pixel_span(s.mean2d[1], s.radius, h);
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        for ty in y0 / TILE..=(y1 - 1) / TILE {
            for tx in x0 / TILE..=(x1 - 1) / TILE {
                tile_lists[ty * tiles_x + tx].push(si as u32);
            }
        }
    }

    let cutoff_power = -0.5 * cfg.cutoff_sigma * cfg.cutoff_sigma;
    let tiles: Vec<TileOutput> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let tx = t % tiles_x;
            let ty = t / tiles_x;
            let mut out = TileOutput::default();
            for py in ty * TILE..((ty + 1) * TILE).min(h) {
                for px in tx * TILE..((tx + 1) * TILE).min(w) {
                    let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
                    let start = out.isects.len();
                    let mut t_acc = 1.0f64;
                    let mut col = [0.0; 3];
                    let mut dep = 0.0;
                    let mut nor = [0.0; 3];
                    for &si in &tile_lists[t] {
                        let s = &splats[si as usize];
                        let dx = u - s.mean2d[0];
                        let dy = v - s.mean2d[1];
                        let power = -0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy);
                        if power < cutoff_power || power > 0.0 && power.is_nan() {
                            continue;
                        }
                        let gauss = power.exp();
                        let o = s.opacity * gauss;
                        if o <= 0.0 {
                            continue;
                        }
                        let wgt = t_acc * o;
                        for c in 0..3 {
                            col[c] += wgt * s.color[c];
                            nor[c] += wgt * s.normal[c];
                        }
                        dep += wgt * s.depth;
                        out.isects.push(Intersection {
                            weight: wgt,
                            depth: s.depth,
                            source: s.source_index as u32,
                            splat: si,
                            transmittance: t_acc,
                            opacity: o,
                            gauss,
                        });
                        t_acc *= 1.0 - o;
                        if t_acc < cfg.min_transmittance {
                            break;
                        }
                    }
                    out.pixels.push(PixelOut {
                        index: py * w + px,
                        color: col,
                        depth: dep,
                        normal: nor,
                        transmittance: t_acc,
                        isect_range: (start, out.isects.len()),
                    });
                }
            }
            out
        })
        .collect();

    let mut color = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut normal = Image::new(w, h, 3);
    let mut alpha = Image::new(w, h, 1);
    let mut counts = vec![0usize; w * h];
    for tile in &tiles {
        for p in &tile.pixels {
            for c in 0..3 {
                color.data[p.index * 3 + c] = p.color[c] + p.transmittance * background[c];
                normal.data[p.index * 3 + c] = p.normal[c];
            }
            depth.data[p.index] = p.depth;
            alpha.data[p.index] = 1.0 - p.transmittance;
            counts[p.index] = p.isect_range.1 - p.isect_range.0;
        }
    }
    let mut isect_offsets = Vec::with_capacity(w * h + 1);
    isect_offsets.push(0);
    for c in &counts {
        isect_offsets.push(isect_offsets.last().unwrap() + c);
    }
    let mut intersections = vec![
        Intersection {
            weight: 0.0,
            depth: 0.0,
            source: 0,
            splat: 0,
            transmittance: 0.0,
            opacity: 0.0,
            gauss: 0.0
        };
        *isect_offsets.last().unwrap()
    ];
    for tile in &tiles {
        for p in &tile.pixels {
            let dst = isect_offsets[p.index];
            let src = &tile.isects[p.isect_range.0..p.isect_range.1];
            intersections[dst..dst + src.len()].copy_from_slice(src);
        }
    }

    Ok(RenderedMaps {
        width: w,
        height: h,
        color,
        depth,
        normal,
        alpha,
        background,
        splats,
        isect_offsets,
        intersections,
        culled,
        primitive_count: scene.len(),
    })
}

fn pixel_span(center: f64, radius: f64, size: usize) -> (usize, usize) {
    if !radius.is_finite() {
        return (0, size);
    }
    let lo = (center - radius).floor().max(0.0) as usize;
    let hi = ((center + radius).ceil().max(0.0) as usize).min(size);
    (lo.min(size), hi)
}

#[derive(Default)]
struct TileOutput {
    pixels: Vec<PixelOut>,
    isects: Vec<Intersection>,
}

struct PixelOut {
    index: usize,
    color: [f64; 3],
    depth: f64,
    normal: [f64; 3],
    transmittance: f64,
    isect_range: (usize, usize),
}

/// Upstream gradients of a scalar objective w.r.t. the rendered outputs.
/// Absent buffers count as zero.
#[derive(Debug, Clone, Default)]
pub struct MapGrads {
    pub color: Option<Image>,
    pub depth: Option<Image>,
    pub normal: Option<Image>,
    pub alpha: Option<Image>,
    /// Per-intersection gradient w.r.t. the blending weight, aligned with
    /// [`RenderedMaps::intersections`].
    pub weight: Option<Vec<f64>>,
    /// Per-intersection gradient w.r.t. the intersection depth.
    pub isect_depth: Option<Vec<f64>>,
}

impl MapGrads {
    pub fn add_assign(&mut self, other: MapGrads) {
        fn merge_img(a: &mut Option<Image>, b: Option<Image>) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.data.iter_mut().zip(y.data).for_each(|(p, q)| *p += q),
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
        fn merge_vec(a: &mut Option<Vec<f64>>, b: Option<Vec<f64>>) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.iter_mut().zip(y).for_each(|(p, q)| *p += q),
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
        merge_img(&mut self.color, other.color);
        merge_img(&mut self.depth, other.depth);
        merge_img(&mut self.normal, other.normal);
        merge_img(&mut self.alpha, other.alpha);
        merge_vec(&mut self.weight, other.weight);
        merge_vec(&mut self.isect_depth, other.isect_depth);
    }
}

/// Gradients per primitive, indexed like the rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveGrads {
    pub mu: Vec<[f64; 3]>,
    pub rot: Vec<[f64; 4]>,
    pub scale: Vec<[f64; 3]>,
    pub color: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    /// Gradient w.r.t. the projected pixel-space mean (densification statistic).
    pub mean2d: Vec<[f64; 2]>,
}

impl PrimitiveGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu: vec![[0.0; 3]; n],
            rot: vec![[0.0; 4]; n],
            scale: vec![[0.0; 3]; n],
            color: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            mean2d: vec![[0.0; 2]; n],
        }
    }
}

#[derive(Clone, Copy, Default)]
struct SplatGrad {
    color: [f64; 3],
    depth: f64,
    normal: [f64; 3],
    opacity: f64,
    mean2d: [f64; 2],
    conic: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for c in 0..3 {
            self.color[c] += o.color[c];
            self.normal[c] += o.normal[c];
            self.conic[c] += o.conic[c];
        }
        self.depth += o.depth;
        self.opacity += o.opacity;
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
    }
}

/// Reverse pass of [`render`]: gradients of the objective whose output
/// gradients are `upstream`, w.r.t. every parameter of `scene` and the
/// supplied opacities.
pub fn render_backward(
    maps: &RenderedMaps,
    scene: &[GaussianPrimitive],
    cam: &Camera,
    upstream: &MapGrads,
) -> Result<PrimitiveGrads> {
    let npix = maps.width * maps.height;
    if maps.isect_offsets.len() != npix + 1 {
        return Err(Error::MissingIntersections);
    }
    if scene.len() != maps.primitive_count {
        return Err(Error::DimensionMismatch("scene differs from the rendered one".into()));
    }
    let nsplat = maps.splats.len();
    let rows_per_chunk = maps.height.div_ceil(BACKWARD_CHUNKS).max(1);
    let partials: Vec<Vec<SplatGrad>> = (0..BACKWARD_CHUNKS)
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![SplatGrad::default(); nsplat];
            let y0 = chunk * rows_per_chunk;
            let y1 = ((chunk + 1) * rows_per_chunk).min(maps.height);
            for py in y0..y1 {
                for px in 0..maps.width {
                    backward_pixel(maps, upstream, py * maps.width + px, px, py, &mut acc);
                }
            }
            acc
        })
        .collect();
    let mut splat_grads = vec![SplatGrad::default(); nsplat];
    for part in &partials {
        for (a, b) in splat_grads.iter_mut().zip(part) {
            a.add(b);
        }
    }

    let mut out = PrimitiveGrads::zeros(scene.len());
    let per_splat: Vec<_> = maps
        .splats
        .par_iter()
        .zip(splat_grads.par_iter())
        .map(|(s, g)| splat_param_grads(s, g, &scene[s.source_index], cam))
        .collect();
    for (s, (g_mu, g_rot, g_scale, g_color, g_op, g_m2)) in maps.splats.iter().zip(per_splat) {
        let i = s.source_index;
        out.mu[i] = g_mu;
        out.rot[i] = g_rot;
        out.scale[i] = g_scale;
        out.color[i] = g_color;
        out.opacity[i] = g_op;
        out.mean2d[i] = g_m2;
    }
    Ok(out)
}

fn backward_pixel(maps: &RenderedMaps, up: &MapGrads, p: usize, px: usize, py: usize, acc: &mut [SplatGrad]) {
    let start = maps.isect_offsets[p];
    let isects = maps.pixel_intersections(p);
    if isects.is_empty() {
        return;
    }
    let g_col = up.color.as_ref().map(|g| [g.data[3 * p], g.data[3 * p + 1], g.data[3 * p + 2]]);
    let g_dep = up.depth.as_ref().map(|g| g.data[p]).unwrap_or(0.0);
    let g_nor = up.normal.as_ref().map(|g| [g.data[3 * p], g.data[3 * p + 1], g.data[3 * p + 2]]);
    let g_alpha = up.alpha.as_ref().map(|g| g.data[p]).unwrap_or(0.0);
    let g_col = g_col.unwrap_or([0.0; 3]);
    let g_nor = g_nor.unwrap_or([0.0; 3]);

    // Back-to-front accumulation of what lies behind each splat, normalized
    // by its transmittance: A_i = o_i y_i + (1 - o_i) A_{i+1}.
    let mut behind_col = maps.background;
    let mut behind_dep = 0.0;
    let mut behind_nor = [0.0; 3];
    let mut behind_alpha = 0.0;
    let mut behind_w = 0.0;
    let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
    for (k, is) in isects.iter().enumerate().rev() {
        let s = &maps.splats[is.splat as usize];
        let t = is.transmittance;
        let o = is.opacity;
        let gw = up.weight.as_ref().map(|g| g[start + k]).unwrap_or(0.0);
        let gz = up.isect_depth.as_ref().map(|g| g[start + k]).unwrap_or(0.0);

        let mut g_o = 0.0;
        for c in 0..3 {
            g_o += (s.color[c] - behind_col[c]) * g_col[c] + (s.normal[c] - behind_nor[c]) * g_nor[c];
        }
        g_o += (s.depth - behind_dep) * g_dep + (1.0 - behind_alpha) * g_alpha + (gw - behind_w);
        g_o *= t;

        let sg = &mut acc[is.splat as usize];
        let wgt = t * o;
        for c in 0..3 {
            sg.color[c] += wgt * g_col[c];
            sg.normal[c] += wgt * g_nor[c];
        }
        sg.depth += wgt * g_dep + gz;
        sg.opacity += is.gauss * g_o;
        let g_power = o * g_o;
        let dx = u - s.mean2d[0];
        let dy = v - s.mean2d[1];
        sg.mean2d[0] += g_power * (s.conic[0] * dx + s.conic[1] * dy);
        sg.mean2d[1] += g_power * (s.conic[1] * dx + s.conic[2] * dy);
        sg.conic[0] += g_power * (-0.5 * dx * dx);
        sg.conic[1] += g_power * (-dx * dy);
        sg.conic[2] += g_power * (-0.5 * dy * dy);

        for c in 0..3 {
            behind_col[c] = o * s.color[c] + (1.0 - o) * behind_col[c];
            behind_nor[c] = o * s.normal[c] + (1.0 - o) * behind_nor[c];
        }
        behind_dep = o * s.depth + (1.0 - o) * behind_dep;
        behind_alpha = o + (1.0 - o) * behind_alpha;
        behind_w = o * gw + (1.0 - o) * behind_w;
    }
}

type ParamGrads = ([f64; 3], [f64; 4], [f64; 3], [f64; 3], f64, [f64; 2]);

fn splat_param_grads(s: &Splat2D, g: &SplatGrad, prim: &GaussianPrimitive, cam: &Camera) -> ParamGrads {
    let w = &cam.rotation;
    let p = &s.p_cam;
    let (x, y, z) = (p.x, p.y, p.z);
    let (fx, fy) = (cam.fx, cam.fy);

    // Conic -> covariance: dL/dCov = -K G_K K with the off-diagonal split.
    let k = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let gk = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let g_cov = -(k * gk * k);

    let r = rotation_from_quat(&prim.rot);
    let s2 = Matrix3::from_diagonal(&Vector3::new(
        prim.scale[0] * prim.scale[0],
        prim.scale[1] * prim.scale[1],
        prim.scale[2] * prim.scale[2],
    ));
    let sigma = r * s2 * r.transpose();
    let m = w * sigma * w.transpose();
    let j = Matrix2x3::new(fx / z, 0.0, -fx * x / (z * z), 0.0, fy / z, -fy * y / (z * z));

    let g_j = 2.0 * g_cov * j * m;
    let g_m = j.transpose() * g_cov * j;
    let g_sigma = w.transpose() * g_m * w;

    let mut g_r = 2.0 * g_sigma * r * s2;
    let rt_g_r = r.transpose() * g_sigma * r;
    let g_scale = [
        2.0 * prim.scale[0] * rt_g_r[(0, 0)],
        2.0 * prim.scale[1] * rt_g_r[(1, 1)],
        2.0 * prim.scale[2] * rt_g_r[(2, 2)],
    ];
    let g_n = Vector3::new(g.normal[0], g.normal[1], g.normal[2]);
    let g_col_r = s.normal_sign * (w.transpose() * g_n);
    for row in 0..3 {
        g_r[(row, s.normal_axis)] += g_col_r[row];
    }
    let g_rot = rotation_from_quat_backward(&prim.rot, &g_r);

    let gm = Vector2::new(g.mean2d[0], g.mean2d[1]);
    let mut g_p = Vector3::new(
        gm.x * fx / z,
        gm.y * fy / z,
        -gm.x * fx * x / (z * z) - gm.y * fy * y / (z * z) + g.depth,
    );
    g_p.x += g_j[(0, 2)] * (-fx / (z * z));
    g_p.y += g_j[(1, 2)] * (-fy / (z * z));
    g_p.z += g_j[(0, 0)] * (-fx / (z * z))
        + g_j[(0, 2)] * (2.0 * fx * x / (z * z * z))
        + g_j[(1, 1)] * (-fy / (z * z))
        + g_j[(1, 2)] * (2.0 * fy * y / (z * z * z));
    let g_mu = w.transpose() * g_p;

    (
        [g_mu.x, g_mu.y, g_mu.z],
        g_rot,
        g_scale,
        g.color,
        g.opacity,
        g.mean2d,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::quat_from_axis_angle;

    fn cam(w: usize, h: usize, f: f64) -> Camera {
        Camera::look_at("t", Vector3::new(0.0, 0.0, -4.0), Vector3::zeros(), -Vector3::y(), f, w, h, 0.1, 100.0)
    }

    #[test]
    fn on_axis_primitive_projects_to_principal_point() {
        let c = cam(32, 32, 40.0);
        let g = GaussianPrimitive::isotropic([0.0; 3], 0.1, [1.0; 3], 1.0);
        let s = project_primitive(&g, 1.0, &c).unwrap();
        assert!((s.mean2d[0] - c.cx).abs() < 1e-12 && (s.mean2d[1] - c.cy).abs() < 1e-12);
    }

    #[test]
    fn isotropic_cov2d_matches_finite_difference_jacobian() {
        let c = cam(64, 64, 50.0);
        let sigma = 0.2;
        let g = GaussianPrimitive::isotropic([0.0; 3], sigma, [1.0; 3], 1.0);
        let s = project_primitive(&g, 1.0, &c).unwrap();
        // Oracle: numerically differentiate the pinhole projection at the mean.
        let project = |p: Vector3<f64>| {
            let q = c.to_camera(&p);
            Vector2::new(c.fx * q.x / q.z + c.cx, c.fy * q.y / q.z + c.cy)
        };
        let h = 1e-6;
        let mut jac = nalgebra::Matrix2x3::zeros();
        for a in 0..3 {
            let mut e = Vector3::zeros();
            e[a] = h;
            let d = (project(e) - project(-e)) / (2.0 * h);
            jac.set_column(a, &d);
        }
        let want = jac * (Matrix3::identity() * sigma * sigma) * jac.transpose() + Matrix2::identity() * 0.3;
        assert!((s.cov2d - want).abs().max() < 1e-6);
        let expected_diag = (c.fx * sigma / 4.0).powi(2) + 0.3;
        assert!((s.cov2d[(0, 0)] - expected_diag).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        let c = cam(32, 32, 40.0);
        let g = GaussianPrimitive::isotropic([0.0, 0.0, -5.0], 0.1, [1.0; 3], 1.0);
        assert!(project_primitive(&g, 1.0, &c).is_none());
    }

    #[test]
    fn disk_normal_faces_camera() {
        let c = cam(32, 32, 40.0);
        let disk = GaussianPrimitive::new([0.0; 3], [1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.01], [1.0; 3], 1.0);
        let n = normal_from_splat(&disk, &c);
        assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-6);

        let q = quat_from_axis_angle(Vector3::x(), std::f64::consts::FRAC_PI_2);
        let tilted = GaussianPrimitive::new([0.0; 3], q, [1.0, 1.0, 0.01], [1.0; 3], 1.0);
        let n = normal_from_splat(&tilted, &c);
        // Oracle: rotate the z axis by the quaternion, then into the camera frame.
        let axis = c.rotation * (rotation_from_quat(&q) * Vector3::z());
        assert!((n.abs() - axis.abs()).norm() < 1e-6);
        assert!(n.dot(&c.to_camera(&tilted.mean())) <= 0.0);
        assert!((n.y.abs() - 1.0).abs() < 1e-6);

        let iso = GaussianPrimitive::isotropic([0.0; 3], 0.5, [1.0; 3], 1.0);
        let n = normal_from_splat(&iso, &c);
        let axis0 = c.rotation * Vector3::x();
        assert!((n.abs() - axis0.abs()).norm() < 1e-12);
    }

    #[test]
    fn single_opaque_splat_at_pixel_center() {
        // Even-sized image: put the splat exactly on pixel (8, 8)'s center.
        let mut c = cam(16, 16, 40.0);
        c.cx = 8.5;
        c.cy = 8.5;
        let g = GaussianPrimitive::isotropic([0.0; 3], 0.05, [0.2, 0.4, 0.6], 1.0);
        let maps = render(&[g], &[1.0], &c, [0.0; 3], &RasterConfig::default()).unwrap();
        let p = 8 * 16 + 8;
        assert!((maps.alpha.data[p] - 1.0).abs() < 1e-12);
        for ch in 0..3 {
            assert!((maps.color.data[3 * p + ch] - [0.2, 0.4, 0.6][ch]).abs() < 1e-12);
        }
        assert!((maps.depth.data[p] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn two_half_opaque_splats_blend_front_to_back() {
        let mut c = cam(16, 16, 40.0);
        c.cx = 8.5;
        c.cy = 8.5;
        let front = GaussianPrimitive::isotropic([0.0, 0.0, -1.0], 0.05, [1.0, 0.0, 0.0], 1.0);
        let back = GaussianPrimitive::isotropic([0.0, 0.0, 1.0], 0.05, [0.0, 1.0, 0.0], 1.0);
        let bg = [0.0, 0.0, 1.0];
        let maps = render(&[back, front], &[0.5, 0.5], &c, bg, &RasterConfig::default()).unwrap();
        let p = 8 * 16 + 8;
        let got = &maps.color.data[3 * p..3 * p + 3];
        let want = [0.5, 0.25, 0.25];
        for ch in 0..3 {
            assert!((got[ch] - want[ch]).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let c = cam(8, 8, 10.0);
        let maps = render(&[], &[], &c, [0.1, 0.2, 0.3], &RasterConfig::default()).unwrap();
        for p in 0..64 {
            assert_eq!(maps.alpha.data[p], 0.0);
            assert_eq!(maps.depth.data[p], 0.0);
            assert_eq!(&maps.color.data[3 * p..3 * p + 3], &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn color_gradient_of_single_splat_is_its_weight() {
        let mut c = cam(16, 16, 40.0);
        c.cx = 8.5;
        c.cy = 8.5;
        let g = GaussianPrimitive::isotropic([0.0; 3], 0.05, [0.2, 0.4, 0.6], 0.7);
        let maps = render(std::slice::from_ref(&g), &[0.7], &c, [0.0; 3], &RasterConfig::default()).unwrap();
        let p = 8 * 16 + 8;
        let mut up = Image::new(16, 16, 3);
        up.data[3 * p] = 1.0;
        let grads = render_backward(
            &maps,
            &[g],
            &c,
            &MapGrads {
                color: Some(up),
                ..Default::default()
            },
        )
        .unwrap();
        let o = maps.pixel_intersections(p)[0].opacity;
        assert!((grads.color[0][0] - o).abs() < 1e-12);
        assert_eq!(grads.color[0][1], 0.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let c = cam(16, 16, 40.0);
        let g = GaussianPrimitive::isotropic([0.1, 0.0, 0.0], 0.3, [0.2, 0.4, 0.6], 0.7);
        let maps = render(std::slice::from_ref(&g), &[0.7], &c, [0.0; 3], &RasterConfig::default()).unwrap();
        let grads = render_backward(&maps, &[g], &c, &MapGrads::default()).unwrap();
        assert_eq!(grads, PrimitiveGrads::zeros(1));
    }

    fn scalar_objective(maps: &RenderedMaps, wc: &Image, wd: &Image, wn: &Image, wa: &Image) -> f64 {
        let dot = |a: &Image, b: &Image| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
        dot(&maps.color, wc) + dot(&maps.depth, wd) + dot(&maps.normal, wn) + dot(&maps.alpha, wa)
    }

    #[test]
    fn backward_matches_central_differences_small_scene() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let c = cam(16, 16, 20.0);
        let cfg = RasterConfig::untruncated();
        let mut scene: Vec<GaussianPrimitive> = (0..4)
            .map(|_| {
                let q = crate::geom::quat_normalize(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                GaussianPrimitive::new(
                    [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-1.5..1.5)],
                    q,
                    [rng.random_range(0.1..0.5), rng.random_range(0.1..0.5), rng.random_range(0.1..0.5)],
                    [rng.random(), rng.random(), rng.random()],
                    0.5,
                )
            })
            .collect();
        let mut ops: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..0.9)).collect();
        let rand_img = |ch: usize, rng: &mut rand_chacha::ChaCha8Rng| Image::from_fn(16, 16, ch, |_, _, _| 0.0).data.iter().map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let mk = |ch, d: Vec<f64>| Image { width: 16, height: 16, channels: ch, data: d };
        let wc = mk(3, rand_img(3, &mut rng));
        let wd = mk(1, rand_img(1, &mut rng));
        let wn = mk(3, rand_img(3, &mut rng));
        let wa = mk(1, rand_img(1, &mut rng));
        let maps = render(&scene, &ops, &c, [0.3, 0.1, 0.2], &cfg).unwrap();
        let up = MapGrads { color: Some(wc.clone()), depth: Some(wd.clone()), normal: Some(wn.clone()), alpha: Some(wa.clone()), ..Default::default() };
        let g = render_backward(&maps, &scene, &c, &up).unwrap();
        let h = 1e-5;
        let eval = |scene: &[GaussianPrimitive], ops: &[f64]| scalar_objective(&render(scene, ops, &c, [0.3, 0.1, 0.2], &cfg).unwrap(), &wc, &wd, &wn, &wa);
        let mut worst: f64 = 0.0;
        for i in 0..4 {
            let mut params: Vec<(&str, usize, f64)> = Vec::new();
            for a in 0..3 { params.push(("mu", a, g.mu[i][a])); params.push(("scale", a, g.scale[i][a])); params.push(("color", a, g.color[i][a])); }
            for a in 0..4 { params.push(("rot", a, g.rot[i][a])); }
            params.push(("op", 0, g.opacity[i]));
            for (name, a, analytic) in params {
                let mut f = [0.0; 2];
                for (k, sgn) in [1.0, -1.0].iter().enumerate() {
                    let mut sc = scene.clone();
                    let mut op = ops.clone();
                    match name {
                        "mu" => sc[i].mu[a] += sgn * h,
                        "scale" => sc[i].scale[a] += sgn * h,
                        "color" => sc[i].color[a] += sgn * h,
                        "rot" => sc[i].rot[a] += sgn * h,
                        _ => op[i] += sgn * h,
                    }
                    f[k] = eval(&sc, &op);
                }
                let fd = (f[0] - f[1]) / (2.0 * h);
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{name}[{a}] prim {i}: fd {fd} analytic {analytic}");
            }
        }
        scene.clear();
        ops.clear();
        assert!(worst < 1e-4);
    }
}
