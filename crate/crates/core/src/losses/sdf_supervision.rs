//! Ray samples around the rendered surface and the near-surface /
//! free-space regression of the signed distance field.

use nalgebra::Vector3;
use rand::Rng;

use super::geometry::ExpectedDepth;
use crate::counters;
use crate::error::{Error, Result};
use crate::scene::{Camera, Image};
use crate::sdf::{SdfField, SdfGrads};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRay {
    pub pixel: usize,
    pub origin: Vector3<f64>,
    /// Unit world-space direction.
    pub dir: Vector3<f64>,
    /// Length of the z = 1 camera ray, converting z-depth to ray distance.
    pub ray_scale: f64,
    /// Ray distance to the rendered surface.
    pub surface: f64,
    /// Ray distance to the near plane.
    pub near: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub ray: usize,
    pub t: f64,
    pub near_surface: bool,
    pub point: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SdfSampleBatch {
    pub rays: Vec<SampleRay>,
    pub samples: Vec<RaySample>,
    pub truncation: f64,
}

impl SdfSampleBatch {
    pub fn near_count(&self) -> usize {
        self.samples.iter().filter(|s| s.near_surface).count()
    }

    pub fn free_count(&self) -> usize {
        self.samples.len() - self.near_count()
    }
}

/// Draws `rays` covered pixels and, per ray, `near_count` distances in the
/// truncation band around the surface plus `free_count` between the near
/// plane and the band.
pub fn sample_sdf_rays(
    depth: &ExpectedDepth,
    cam: &Camera,
    rays: usize,
    near_count: usize,
    free_count: usize,
    truncation: f64,
    rng: &mut impl Rng,
) -> Result<SdfSampleBatch> {
    if !(truncation > 0.0) {
        return Err(Error::InvalidParameter(format!("truncation must be positive, got {truncation}")));
    }
    if depth.depth.width != cam.width || depth.depth.height != cam.height {
        return Err(Error::DimensionMismatch("depth image does not match the camera".into()));
    }
    let covered: Vec<usize> = (0..depth.mask.len()).filter(|&p| depth.mask[p]).collect();
    let chosen: Vec<usize> = if covered.len() <= rays {
        if covered.len() < rays {
            log::warn!("only {} covered pixels for {rays} requested rays; sampling all", covered.len());
        }
        covered
    } else {
        rand::seq::index::sample(rng, covered.len(), rays).into_iter().map(|i| covered[i]).collect()
    };
    let origin = cam.center();
    let rot_t = cam.rotation.transpose();
    let w = cam.width;
    let mut batch = SdfSampleBatch {
        truncation,
        ..Default::default()
    };
    for pixel in chosen {
        let r = cam.pixel_ray((pixel % w) as f64 + 0.5, (pixel / w) as f64 + 0.5);
        let ray_scale = r.norm();
        let dir = rot_t * (r / ray_scale);
        let surface = depth.depth.data[pixel] * ray_scale;
        let near = cam.near * ray_scale;
        let ri = batch.rays.len();
        batch.rays.push(SampleRay {
            pixel,
            origin,
            dir,
            ray_scale,
            surface,
            near,
        });
        let lo = (surface - truncation).max(near);
        let hi = surface + truncation;
        if hi > lo {
            for _ in 0..near_count {
                let t = rng.random_range(lo..=hi);
                batch.samples.push(RaySample {
                    ray: ri,
                    t,
                    near_surface: true,
                    point: origin + dir * t,
                });
            }
        }
        if surface - truncation > near {
            for _ in 0..free_count {
                let t = rng.random_range(near..surface - truncation);
                if t <= near {
                    continue;
                }
                batch.samples.push(RaySample {
                    ray: ri,
                    t,
                    near_surface: false,
                    point: origin + dir * t,
                });
            }
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdfRegularization {
    pub near_surface: f64,
    pub free_space: f64,
    pub values: Vec<f64>,
    pub field_grads: SdfGrads,
    /// Gradient w.r.t. the expected depth image the batch was drawn from.
    pub grad_depth: Image,
}

/// `L_ns` (squared error to the signed offset `surface - t`) and `L_fs`
/// (squared error to `+1`), both means over their sample sets. Gradients are
/// for `w_ns * L_ns + w_fs * L_fs`; the depth gradient is zero when
/// `detach_depth` is set.
pub fn sdf_regularization(
    batch: &SdfSampleBatch,
    field: &SdfField,
    depth_shape: (usize, usize),
    w_ns: f64,
    w_fs: f64,
    detach_depth: bool,
) -> SdfRegularization {
    let points: Vec<Vector3<f64>> = batch.samples.iter().map(|s| s.point).collect();
    let (values, traces) = field.query_batch_traced(&points);
    let n_near = batch.near_count();
    let n_free = batch.free_count();
    if n_near == 0 {
        counters::EMPTY_NEAR_SURFACE.bump();
    }
    let mut grad_depth = Image::new(depth_shape.0, depth_shape.1, 1);
    let mut upstream = vec![0.0; values.len()];
    let (mut ns, mut fs) = (0.0, 0.0);
    for (i, (s, v)) in batch.samples.iter().zip(&values).enumerate() {
        if s.near_surface {
            let ray = &batch.rays[s.ray];
            let r = v - (ray.surface - s.t);
            let k = 1.0 / n_near as f64;
            ns += r * r * k;
            upstream[i] = w_ns * 2.0 * r * k;
            if !detach_depth {
                grad_depth.data[ray.pixel] -= w_ns * 2.0 * r * k * ray.ray_scale;
            }
        } else {
            let r = v - 1.0;
            let k = 1.0 / n_free as f64;
            fs += r * r * k;
            upstream[i] = w_fs * 2.0 * r * k;
        }
    }
    let mut field_grads = SdfGrads::zeros_like(field);
    field.backward_traces(&traces, &upstream, &mut field_grads);
    SdfRegularization {
        near_surface: ns,
        free_space: fs,
        values,
        field_grads,
        grad_depth,
    }
}
