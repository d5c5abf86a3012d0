//! Dataset manifests, image and disparity files, analytic synthetic scenes
//! and image metrics.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Camera, Disparity, Image, ImageSet, View};

pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub world_to_cam: [f64; 16],
}

impl CameraEntry {
    pub fn from_camera(c: &Camera) -> Self {
        Self {
            id: c.id.clone(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
            world_to_cam: c.world_to_cam_matrix(),
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        Camera::from_world_to_cam(
            self.id.clone(),
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            self.near,
            self.far,
            &self.world_to_cam,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub camera: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disparity: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cameras: Vec<CameraEntry>,
    pub views: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analytic: Option<AnalyticScene>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn save_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::json("manifest", e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Shapes of an analytic scene; the scene's signed distance is the minimum
/// over its shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Points with `normal . x > offset` are outside. `half_size` bounds the
    /// patch used when sampling the surface.
    Plane {
        normal: [f64; 3],
        offset: f64,
        #[serde(default = "default_plane_half_size")]
        half_size: f64,
    },
}

fn default_plane_half_size() -> f64 {
    1.0
}

impl Shape {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - Vector3::from(*center)).norm() - radius,
            Shape::Box { center, half_extents } => {
                let q = (p - Vector3::from(*center)).abs() - Vector3::from(*half_extents);
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
            Shape::Plane { normal, offset, .. } => Vector3::from(*normal).normalize().dot(p) - offset,
        }
    }

    /// Radius of a ball around the origin enclosing the shape; planes are unbounded and report 0.
    fn enclosing_radius(&self) -> f64 {
        match self {
            Shape::Sphere { center, radius } => Vector3::from(*center).norm() + radius,
            Shape::Box { center, half_extents } => Vector3::from(*center).norm() + Vector3::from(*half_extents).norm(),
            Shape::Plane { .. } => 0.0,
        }
    }

    fn area(&self) -> f64 {
        match self {
            Shape::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            Shape::Box { half_extents: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Shape::Plane { half_size, .. } => 4.0 * half_size * half_size,
        }
    }

    fn sample_surface(&self, rng: &mut impl Rng) -> Vector3<f64> {
        match self {
            Shape::Sphere { center, radius } => {
                let d = Vector3::from_fn(|_, _| StandardNormal.sample(rng)).normalize();
                Vector3::from(*center) + d * *radius
            }
            Shape::Box { center, half_extents: h } => {
                let faces = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let x = rng.random_range(0.0..faces.iter().sum::<f64>());
                let axis = if x < faces[0] {
                    0
                } else if x < faces[0] + faces[1] {
                    1
                } else {
                    2
                };
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let p = Vector3::from_fn(|a, _| if a == axis { sign * h[a] } else { rng.random_range(-h[a]..=h[a]) });
                Vector3::from(*center) + p
            }
            Shape::Plane { normal, offset, half_size } => {
                let n = Vector3::from(*normal).normalize();
                let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
                let u = n.cross(&helper).normalize();
                let v = n.cross(&u);
                n * *offset + u * rng.random_range(-*half_size..*half_size) + v * rng.random_range(-*half_size..*half_size)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub shapes: Vec<Shape>,
}

impl AnalyticScene {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.shapes.iter().map(|s| s.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    /// Central-difference gradient.
    pub fn gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = 1e-6;
        Vector3::from_fn(|a, _| {
            let mut e = Vector3::zeros();
            e[a] = h;
            (self.sdf(&(p + e)) - self.sdf(&(p - e))) / (2.0 * h)
        })
    }

    pub fn enclosing_radius(&self) -> f64 {
        self.shapes.iter().map(|s| s.enclosing_radius()).fold(0.0, f64::max)
    }

    /// Area-weighted samples on the boundary of the union.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<[f64; 3]>> {
        if self.shapes.is_empty() {
            return Err(Error::EmptyInput("analytic scene has no shapes".into()));
        }
        let areas: Vec<f64> = self.shapes.iter().map(|s| s.area()).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(Error::EmptyResult("union surface too small to sample".into()));
            }
            let mut x = rng.random_range(0.0..total);
            let mut k = 0;
            while k + 1 < areas.len() && x >= areas[k] {
                x -= areas[k];
                k += 1;
            }
            let p = self.shapes[k].sample_surface(rng);
            if self.sdf(&p).abs() < 1e-9 {
                out.push([p.x, p.y, p.z]);
            }
        }
        Ok(out)
    }

    /// Distance along the unit ray to the first zero crossing, by sphere tracing.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_min: f64, t_max: f64) -> Option<f64> {
        let mut t = t_min;
        for _ in 0..512 {
            let s = self.sdf(&(origin + dir * t));
            if s.abs() < 1e-10 {
                return Some(t);
            }
            t += s;
            if t > t_max || t < t_min {
                return None;
            }
        }
        None
    }
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub cameras: Vec<Camera>,
    pub images: ImageSet,
    pub points: Option<Vec<[f64; 3]>>,
}

impl Dataset {
    pub fn analytic(&self) -> Option<&AnalyticScene> {
        self.manifest.analytic.as_ref()
    }
}

/// Loads `dir/manifest.json` (or the manifest file itself) and everything it references.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = load_manifest(&manifest_path)?;
    let cameras = manifest
        .cameras
        .iter()
        .map(|c| {
            c.to_camera().map_err(|e| Error::Dataset {
                entry: format!("camera {}", c.id),
                reason: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let views = manifest
        .views
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let entry = format!("view {i} ({})", v.image);
            let camera = cameras.iter().position(|c| c.id == v.camera).ok_or_else(|| Error::Dataset {
                entry: entry.clone(),
                reason: format!("unknown camera id `{}`", v.camera),
            })?;
            let image = load_png(&root.join(&v.image))?;
            let disparity = v.disparity.as_ref().map(|d| load_disparity(&root.join(d))).transpose()?;
            Ok(View {
                image,
                disparity,
                camera,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let images = ImageSet { views };
    images.validate(&cameras)?;
    if !images.has_disparity() {
        log::info!("dataset has no pseudo-disparity; geometry-cue losses will be disabled");
    }
    let points = manifest.points.as_ref().map(|p| read_points_ply(&root.join(p))).transpose()?;
    Ok(Dataset {
        root,
        manifest,
        cameras,
        images,
        points,
    })
}

/// Decodes an 8- or 16-bit PNG to [0, 1] floats, dropping any alpha channel.
pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Image {
        width: w,
        height: h,
        channels: 3,
        data: rgb.into_raw().into_iter().map(|v| v as f64).collect(),
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel image with values in [0, 1] as an 8-bit PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let res = match img.channels {
        3 => image::RgbImage::from_raw(w, h, img.data.iter().map(|v| to_u8(*v)).collect())
            .expect("buffer size matches")
            .save(path),
        1 => image::GrayImage::from_raw(w, h, img.data.iter().map(|v| to_u8(*v)).collect())
            .expect("buffer size matches")
            .save(path),
        c => return Err(Error::invalid(format!("cannot write a {c}-channel PNG"))),
    };
    res.map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes a single-channel image as 16-bit PNG with `value * scale` stored.
pub fn save_png16(path: &Path, img: &Image, scale: f64) -> Result<()> {
    let data: Vec<u16> = img.data.iter().map(|v| (v * scale).round().clamp(0.0, 65535.0) as u16).collect();
    image::ImageBuffer::<image::Luma<u16>, _>::from_raw(img.width as u32, img.height as u32, data)
        .expect("buffer size matches")
        .save(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisparitySidecar {
    pub width: usize,
    pub height: usize,
    /// Stored value marking an invalid pixel.
    pub invalid_value: f32,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Raw little-endian f32 grid plus a `<path>.json` sidecar.
pub fn save_disparity(path: &Path, d: &Disparity) -> Result<()> {
    let side = DisparitySidecar {
        width: d.values.width,
        height: d.values.height,
        invalid_value: 0.0,
    };
    let mut bytes = Vec::with_capacity(4 * d.values.data.len());
    for (v, m) in d.values.data.iter().zip(&d.mask) {
        let x = if *m { *v as f32 } else { side.invalid_value };
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sp = sidecar_path(path);
    let text = serde_json::to_string(&side).map_err(|e| Error::json("disparity sidecar", e))?;
    fs::write(&sp, text).map_err(|e| Error::io(&sp, e))
}

pub fn load_disparity(path: &Path) -> Result<Disparity> {
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: DisparitySidecar = serde_json::from_str(&text).map_err(|e| Error::json(sp.display().to_string(), e))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * side.width * side.height {
        return Err(Error::Dataset {
            entry: path.display().to_string(),
            reason: format!("expected {}x{} f32 values, found {} bytes", side.width, side.height, bytes.len()),
        });
    }
    let raw: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mask: Vec<bool> = raw.iter().map(|v| *v != side.invalid_value && v.is_finite() && *v > 0.0).collect();
    Ok(Disparity {
        values: Image {
            width: side.width,
            height: side.height,
            channels: 1,
            data: raw.iter().map(|v| *v as f64).collect(),
        },
        mask,
    })
}

pub fn write_points_ply(path: &Path, points: &[[f64; 3]]) -> Result<()> {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    );
    for p in points {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads the first three vertex properties of an ASCII PLY as positions.
pub fn read_points_ply(path: &Path) -> Result<Vec<[f64; 3]>> {
    let bad = |reason: String| Error::Dataset {
        entry: path.display().to_string(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let mut count = None;
    for line in lines.by_ref() {
        let l = line.trim();
        if l == "end_header" {
            break;
        }
        if l.starts_with("format") && !l.contains("ascii") {
            return Err(bad("point files must be ASCII PLY".into()));
        }
        if let Some(n) = l.strip_prefix("element vertex ") {
            count = n.trim().parse::<usize>().ok();
        }
    }
    let count = count.ok_or_else(|| bad("missing vertex count".into()))?;
    let mut out = Vec::with_capacity(count);
    for (i, line) in lines.take(count).enumerate() {
        let v: Vec<f64> = line.split_whitespace().take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| bad(format!("vertex {i}: {e}")))?;
        if v.len() < 3 {
            return Err(bad(format!("vertex {i} has fewer than 3 coordinates")));
        }
        out.push([v[0], v[1], v[2]]);
    }
    if out.len() != count {
        return Err(bad(format!("expected {count} vertices, found {}", out.len())));
    }
    Ok(out)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch("psnr of differently shaped images".into()));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64;
    Ok(if mse <= 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

/// Parameters of a generated scene: shapes seen by a ring of cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub shapes: Vec<Shape>,
    pub cameras: usize,
    pub ring_radius: f64,
    /// Cameras alternate between `+elevation_deg` and `-elevation_deg`.
    pub elevation_deg: f64,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub near: f64,
    pub far: f64,
    /// Pseudo-disparity is `1 / (s0 * depth + t0)`.
    pub disparity_perturbation: [f64; 2],
    pub points: usize,
    /// Standard deviation of the initial-point noise, world units.
    pub point_noise: f64,
    pub background: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shapes: vec![Shape::Sphere {
                center: [0.0; 3],
                radius: 0.5,
            }],
            cameras: 16,
            ring_radius: 2.0,
            elevation_deg: 20.0,
            width: 64,
            height: 64,
            fx: 88.0,
            near: 0.1,
            far: 6.0,
            disparity_perturbation: [1.0, 0.0],
            points: 2000,
            point_noise: 0.01,
            background: [0.0; 3],
        }
    }
}

/// Smooth albedo used for synthetic surfaces.
pub fn procedural_texture(p: &Vector3<f64>) -> [f64; 3] {
    [
        0.5 + 0.3 * (3.0 * p.x + 1.0).sin() * (2.0 * p.y).cos(),
        0.5 + 0.3 * (2.5 * p.y - 0.5).sin() * (3.0 * p.z + 0.3).cos(),
        0.5 + 0.3 * (3.5 * p.z + 0.7).sin() * (2.0 * p.x - 0.4).cos(),
    ]
}

/// Per-view ground truth kept in memory next to the written dataset.
pub struct SyntheticScene {
    pub dataset: Dataset,
    pub scene: AnalyticScene,
    /// Camera-space z of the first hit, 0 where the ray misses.
    pub depth: Vec<Image>,
    pub hit: Vec<Vec<bool>>,
}

pub fn ring_cameras(spec: &SyntheticSpec) -> Vec<Camera> {
    (0..spec.cameras)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / spec.cameras as f64;
            let el = if i % 2 == 0 { spec.elevation_deg } else { -spec.elevation_deg }.to_radians();
            let eye = Vector3::new(theta.cos() * el.cos(), theta.sin() * el.cos(), el.sin()) * spec.ring_radius;
            let mut cam = Camera::look_at(
                format!("cam{i:02}"),
                eye,
                Vector3::zeros(),
                Vector3::z(),
                spec.fx,
                spec.width,
                spec.height,
                spec.near,
                spec.far,
            );
            cam.fy = spec.fx;
            cam
        })
        .collect()
}

/// Renders the analytic scene from a camera ring and writes images, pseudo-
/// disparities, noisy surface points and the manifest into `out_dir`.
pub fn make_synthetic(spec: &SyntheticSpec, out_dir: &Path, rng: &mut impl Rng) -> Result<SyntheticScene> {
    if spec.shapes.is_empty() {
        return Err(Error::invalid("synthetic scene needs at least one shape"));
    }
    if spec.cameras < 2 {
        return Err(Error::invalid("synthetic scene needs at least two cameras"));
    }
    let scene = AnalyticScene {
        shapes: spec.shapes.clone(),
    };
    let radius = scene.enclosing_radius();
    if spec.ring_radius <= radius {
        return Err(Error::invalid(format!(
            "camera ring radius {} does not exceed the scene radius {radius}",
            spec.ring_radius
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cameras = ring_cameras(spec);
    let [s0, t0] = spec.disparity_perturbation;
    let mut depths = Vec::new();
    let mut hits = Vec::new();
    let mut views = Vec::new();
    for (i, cam) in cameras.iter().enumerate() {
        let (w, h) = (cam.width, cam.height);
        let origin = cam.center();
        let rt = cam.rotation.transpose();
        let traced: Vec<Option<(f64, [f64; 3])>> = (0..w * h)
            .into_par_iter()
            .map(|p| {
                let r = cam.pixel_ray((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
                let len = r.norm();
                let dir = rt * (r / len);
                scene
                    .trace(&origin, &dir, cam.near * len, cam.far * len)
                    .map(|t| (t / len, procedural_texture(&(origin + dir * t))))
            })
            .collect();
        let mut color = Image::new(w, h, 3);
        let mut depth = Image::new(w, h, 1);
        let mut disp = Image::new(w, h, 1);
        let mut hit = vec![false; w * h];
        for (p, t) in traced.iter().enumerate() {
            match t {
                Some((z, c)) => {
                    depth.data[p] = *z;
                    disp.data[p] = 1.0 / (s0 * z + t0);
                    hit[p] = disp.data[p].is_finite() && disp.data[p] > 0.0;
                    color.data[3 * p..3 * p + 3].copy_from_slice(c);
                }
                None => color.data[3 * p..3 * p + 3].copy_from_slice(&spec.background),
            }
        }
        let image_name = format!("view_{i:02}.png");
        let disp_name = format!("view_{i:02}.disp.f32");
        save_png(&out_dir.join(&image_name), &color)?;
        save_disparity(
            &out_dir.join(&disp_name),
            &Disparity {
                values: disp,
                mask: hit.clone(),
            },
        )?;
        views.push(ViewEntry {
            camera: cam.id.clone(),
            image: image_name,
            disparity: Some(disp_name),
        });
        depths.push(depth);
        hits.push(hit);
    }
    let noise = Normal::new(0.0, spec.point_noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut points = scene.sample_surface(spec.points, rng)?;
    for p in points.iter_mut() {
        for c in p.iter_mut() {
            *c += noise.sample(rng);
        }
    }
    write_points_ply(&out_dir.join("points.ply"), &points)?;
    let manifest = Manifest {
        cameras: cameras.iter().map(CameraEntry::from_camera).collect(),
        views,
        points: Some("points.ply".into()),
        analytic: Some(scene.clone()),
    };
    save_manifest(&out_dir.join(MANIFEST_FILE), &manifest)?;
    let dataset = load_dataset(out_dir)?;
    Ok(SyntheticScene {
        dataset,
        scene,
        depth: depths,
        hit: hits,
    })
}
