//! Scene domain types: Gaussian primitives, pinhole cameras, scene bounds and
//! images, plus the covariance factorization and the JSON-lines checkpoint.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{quat_norm, quat_normalize, rotation_from_quat, vec3, Quat};

/// Smallest extent an axis of [`SceneBounds`] may have.
pub const EXTENT_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub mu: [f64; 3],
    pub rot: Quat,
    pub scale: [f64; 3],
    pub color: [f64; 3],
    /// Free opacity, used only until the SDF drives opacity.
    pub raw_opacity: f64,
    /// Sum of screen-space positional gradient norms since the last densify.
    #[serde(skip)]
    pub accum_grad: f64,
    /// Number of renders contributing to `accum_grad`.
    #[serde(skip)]
    pub accum_count: u32,
}

impl GaussianPrimitive {
    pub fn new(mu: [f64; 3], rot: Quat, scale: [f64; 3], color: [f64; 3], raw_opacity: f64) -> Self {
        Self {
            mu,
            rot,
            scale,
            color,
            raw_opacity,
            accum_grad: 0.0,
            accum_count: 0,
        }
    }

    pub fn isotropic(mu: [f64; 3], scale: f64, color: [f64; 3], raw_opacity: f64) -> Self {
        Self::new(mu, crate::geom::IDENTITY_QUAT, [scale; 3], color, raw_opacity)
    }

    pub fn mean(&self) -> Vector3<f64> {
        vec3(self.mu)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_from_params(&self.rot, &self.scale)
    }

    pub fn max_scale(&self) -> f64 {
        self.scale.iter().cloned().fold(f64::MIN, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .mu
            .iter()
            .chain(&self.rot)
            .chain(&self.scale)
            .chain(&self.color)
            .chain(std::iter::once(&self.raw_opacity))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("primitive has non-finite parameters"));
        }
        if (quat_norm(&self.rot) - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("primitive rotation is not a unit quaternion"));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("primitive scale must be positive"));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) || !(0.0..=1.0).contains(&self.raw_opacity) {
            return Err(Error::invalid("primitive color/opacity outside [0, 1]"));
        }
        Ok(())
    }

    pub fn renormalize(&mut self) {
        self.rot = quat_normalize(&self.rot);
    }
}

/// `R diag(scale^2) R^T` for the rotation encoded by `rot`.
pub fn covariance_from_params(rot: &Quat, scale: &[f64; 3]) -> Result<Matrix3<f64>> {
    if rot.iter().chain(scale).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite rotation or scale"));
    }
    if quat_norm(rot) == 0.0 {
        return Err(Error::invalid("zero quaternion"));
    }
    let r = rotation_from_quat(rot);
    let s2 = Matrix3::from_diagonal(&Vector3::new(scale[0] * scale[0], scale[1] * scale[1], scale[2] * scale[2]));
    let cov = r * s2 * r.transpose();
    Ok((cov + cov.transpose()) * 0.5)
}

/// Pinhole camera with a world-to-camera rigid pose. Camera frame is
/// x right, y down, z forward; pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!("camera {}: focal lengths must be positive", self.id)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid(format!("camera {}: need 0 < near < far", self.id)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!("camera {}: empty image size", self.id)));
        }
        let ortho = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || self.rotation.determinant() < 0.0 {
            return Err(Error::invalid(format!("camera {}: pose rotation not orthonormal", self.id)));
        }
        Ok(())
    }

    /// Camera looking from `eye` at `target`, with `up` hinting the image's upward direction.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        id: impl Into<String>,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self {
            id: id.into(),
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near,
            far,
            rotation,
            translation,
        }
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera-frame ray through a continuous pixel position, scaled to unit z.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Camera with intrinsics and resolution divided by `2^level`.
    pub fn downscaled(&self, level: u32) -> Self {
        let f = (1u64 << level) as f64;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: (self.width >> level).max(1),
            height: (self.height >> level).max(1),
            ..self.clone()
        }
    }

    /// Camera from intrinsics and a row-major 4x4 world-to-camera matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn from_world_to_cam(
        id: impl Into<String>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
        m: &[f64; 16],
    ) -> Result<Self> {
        let cam = Self {
            id: id.into(),
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near,
            far,
            rotation: Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vector3::new(m[3], m[7], m[11]),
        };
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::invalid(format!("camera {}: last matrix row must be (0, 0, 0, 1)", cam.id)));
        }
        cam.validate()?;
        Ok(cam)
    }

    /// Row-major 4x4 world-to-camera matrix.
    pub fn world_to_cam_matrix(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub center: [f64; 3],
    pub extent: [f64; 3],
}

impl SceneBounds {
    pub fn new(center: [f64; 3], extent: [f64; 3]) -> Result<Self> {
        if center.iter().chain(&extent).any(|v| !v.is_finite()) || extent.iter().any(|&e| e <= 0.0) {
            return Err(Error::invalid("scene bounds need finite center and positive extent"));
        }
        Ok(Self { center, extent })
    }

    pub fn extent_norm(&self) -> f64 {
        vec3(self.extent).norm()
    }

    pub fn min_corner(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.center[a] - 0.5 * self.extent[a])
    }

    pub fn max_corner(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.center[a] + 0.5 * self.extent[a])
    }
}

/// Default central percentile range kept by [`bounds_from_points`] (2nd to 98th).
pub const DEFAULT_CENTRAL_PERCENT: f64 = 96.0;
pub const DEFAULT_MARGIN_FRACTION: f64 = 0.05;

/// Axis-aligned box over the central `central_percent` of `points` per axis,
/// inflated by `margin_fraction` of its extent.
pub fn bounds_from_points(points: &[[f64; 3]], margin_fraction: f64, central_percent: f64) -> Result<SceneBounds> {
    if points.is_empty() {
        return Err(Error::EmptyInput("bounds_from_points needs at least one point".into()));
    }
    if !(margin_fraction >= 0.0) || !(0.0..=100.0).contains(&central_percent) {
        return Err(Error::invalid("margin must be >= 0 and percentile in [0, 100]"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite point"));
    }
    let lo_q = (100.0 - central_percent) / 200.0;
    let hi_q = 1.0 - lo_q;
    let mut center = [0.0; 3];
    let mut extent = [0.0; 3];
    let mut degenerate = true;
    for axis in 0..3 {
        let mut vals: Vec<f64> = points.iter().map(|p| p[axis]).collect();
        vals.sort_by(f64::total_cmp);
        let lo = quantile_sorted(&vals, lo_q);
        let hi = quantile_sorted(&vals, hi_q);
        center[axis] = 0.5 * (lo + hi);
        let e = (hi - lo) * (1.0 + margin_fraction);
        if e > EXTENT_FLOOR {
            degenerate = false;
        }
        extent[axis] = e.max(EXTENT_FLOOR);
    }
    if degenerate {
        warn!("all points coincide; using floor extent {EXTENT_FLOOR} per axis");
    }
    SceneBounds::new(center, extent)
}

/// Linear-interpolated quantile of ascending `sorted`, `q` in [0, 1].
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    let t = pos - i as f64;
    sorted[i] * (1.0 - t) + sorted[j] * t
}

/// Row-major image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Pseudo-disparity map with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Disparity {
    pub values: Image,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Image,
    pub disparity: Option<Disparity>,
    /// Index into the camera list.
    pub camera: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageSet {
    pub views: Vec<View>,
}

impl ImageSet {
    pub fn validate(&self, cameras: &[Camera]) -> Result<()> {
        for (i, v) in self.views.iter().enumerate() {
            let cam = cameras.get(v.camera).ok_or_else(|| Error::Dataset {
                entry: format!("view {i}"),
                reason: "camera index out of range".into(),
            })?;
            if v.image.width != cam.width || v.image.height != cam.height {
                return Err(Error::Dataset {
                    entry: format!("view {i}"),
                    reason: format!(
                        "image {}x{} does not match camera {} ({}x{})",
                        v.image.width, v.image.height, cam.id, cam.width, cam.height
                    ),
                });
            }
            if let Some(d) = &v.disparity {
                if d.values.width != cam.width || d.values.height != cam.height || d.mask.len() != cam.width * cam.height {
                    return Err(Error::Dataset {
                        entry: format!("view {i}"),
                        reason: "disparity dimensions do not match camera".into(),
                    });
                }
                let bad = d.values.data.iter().zip(&d.mask).any(|(&z, &m)| m && !(z.is_finite() && z > 0.0));
                if bad {
                    return Err(Error::Dataset {
                        entry: format!("view {i}"),
                        reason: "disparity must be finite and positive where valid".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn has_disparity(&self) -> bool {
        self.views.iter().any(|v| v.disparity.is_some())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    bounds: SceneBounds,
    iteration: u64,
    count: usize,
}

/// Writes primitives as JSON lines after a header carrying bounds and iteration.
pub fn save_scene_checkpoint(path: &Path, prims: &[GaussianPrimitive], bounds: &SceneBounds, iteration: u64) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = CheckpointHeader {
        bounds: *bounds,
        iteration,
        count: prims.len(),
    };
    let mut write_line = |s: String| writeln!(w, "{s}").map_err(|e| Error::io(path, e));
    write_line(serde_json::to_string(&header).map_err(|e| Error::json("checkpoint header", e))?)?;
    for p in prims {
        write_line(serde_json::to_string(p).map_err(|e| Error::json("checkpoint primitive", e))?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_scene_checkpoint(path: &Path) -> Result<(Vec<GaussianPrimitive>, SceneBounds, u64)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::EmptyInput(format!("{} has no header", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::json(format!("{} header", path.display()), e))?;
    let mut prims = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: GaussianPrimitive =
            serde_json::from_str(&line).map_err(|e| Error::json(format!("{} line {}", path.display(), i + 2), e))?;
        prims.push(p);
    }
    if prims.len() != header.count {
        return Err(Error::Dataset {
            entry: path.display().to_string(),
            reason: format!("header declares {} primitives, found {}", header.count, prims.len()),
        });
    }
    Ok((prims, header.bounds, header.iteration))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::quat_from_axis_angle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Plain triple-loop product `R S S^T R^T`, independent of nalgebra's operators.
    fn covariance_oracle(r: &Matrix3<f64>, s: &[f64; 3]) -> [[f64; 3]; 3] {
        let mut rs = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rs[i][j] = r[(i, j)] * s[j];
            }
        }
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += rs[i][k] * rs[j][k];
                }
            }
        }
        out
    }

    #[test]
    fn covariance_identity_and_axis_aligned() {
        let c = covariance_from_params(&[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(c, Matrix3::identity());
        let c = covariance_from_params(&[1.0, 0.0, 0.0, 0.0], &[2.0, 1.0, 1.0]).unwrap();
        assert_eq!(c, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)));
    }

    #[test]
    fn covariance_quarter_turn_about_z_swaps_axes() {
        let q = quat_from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2);
        let c = covariance_from_params(&q, &[2.0, 1.0, 1.0]).unwrap();
        let oracle = covariance_oracle(&rotation_from_quat(&q), &[2.0, 1.0, 1.0]);
        let expected = [[1.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((oracle[i][j] - expected[i][j]).abs() < 1e-12);
                assert!((c[(i, j)] - expected[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariance_rejects_non_finite() {
        assert!(covariance_from_params(&[f64::NAN, 0.0, 0.0, 0.0], &[1.0; 3]).is_err());
        assert!(covariance_from_params(&[1.0, 0.0, 0.0, 0.0], &[1.0, f64::INFINITY, 1.0]).is_err());
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let q = quat_normalize(&[0.3, 0.5, -0.2, 0.7]);
        let s = [0.5, 1.5, 0.2];
        let c = covariance_from_params(&q, &s).unwrap();
        let mut eig: Vec<f64> = c.symmetric_eigenvalues().iter().cloned().collect();
        eig.sort_by(f64::total_cmp);
        let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
        want.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((c - c.transpose()).abs().max() < 1e-9);
    }

    proptest! {
        #[test]
        fn covariance_determinant_is_squared_volume(
            q in prop::array::uniform4(-1.0f64..1.0),
            s in prop::array::uniform3(0.05f64..3.0),
        ) {
            prop_assume!(quat_norm(&q) > 1e-3);
            let c = covariance_from_params(&quat_normalize(&q), &s).unwrap();
            let want = (s[0] * s[1] * s[2]).powi(2);
            prop_assert!((c.determinant() - want).abs() <= 1e-9 * want);
        }

        #[test]
        fn bounds_translation_equivariant(
            pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..50),
            t in prop::array::uniform3(-3.0f64..3.0),
        ) {
            // Dyadic shifts keep the arithmetic exact.
            let t = t.map(|v| (v * 4.0).round() / 4.0);
            let pts: Vec<[f64; 3]> = pts.iter().map(|p| p.map(|v| (v * 64.0).round() / 64.0)).collect();
            let a = bounds_from_points(&pts, 0.0, 100.0).unwrap();
            let shifted: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
            let b = bounds_from_points(&shifted, 0.0, 100.0).unwrap();
            for k in 0..3 {
                prop_assert_eq!(b.center[k], a.center[k] + t[k]);
                prop_assert_eq!(b.extent[k], a.extent[k]);
            }
        }
    }

    #[test]
    fn bounds_of_unit_cube_corners() {
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push([(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]);
        }
        let b = bounds_from_points(&pts, 0.0, 100.0).unwrap();
        assert_eq!(b.center, [0.5; 3]);
        assert_eq!(b.extent, [1.0; 3]);
    }

    #[test]
    fn bounds_single_point_floors_extent() {
        let b = bounds_from_points(&[[1.0, 2.0, 3.0]], 0.05, 96.0).unwrap();
        assert_eq!(b.extent, [EXTENT_FLOOR; 3]);
        assert_eq!(b.center, [1.0, 2.0, 3.0]);
        assert!(bounds_from_points(&[], 0.0, 96.0).is_err());
    }

    #[test]
    fn bounds_percentile_ignores_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pts: Vec<[f64; 3]> = (0..1000).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        pts.push([100.0, 0.0, 0.0]);
        // Oracle: the 0.5th..99.5th percentile span of the x coordinates.
        let mut xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        let span = quantile_sorted(&xs, 0.995) - quantile_sorted(&xs, 0.005);
        let b = bounds_from_points(&pts, 0.0, 99.0).unwrap();
        assert!((b.extent[0] - span).abs() < 1e-12);
        assert!((b.extent[0] - 1.0).abs() < 0.05, "extent {}", b.extent[0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.jsonl");
        let prims = vec![
            GaussianPrimitive::new([0.1, 0.2, 0.3], quat_normalize(&[0.9, 0.1, 0.0, 0.2]), [0.1, 0.2, 0.05], [0.2, 0.5, 0.9], 0.4),
            GaussianPrimitive::isotropic([1.0, -2.0, 3.5], 0.3, [1.0, 0.0, 0.0], 1.0),
        ];
        let bounds = SceneBounds::new([0.0; 3], [2.0, 2.0, 2.0]).unwrap();
        save_scene_checkpoint(&path, &prims, &bounds, 1234).unwrap();
        let (back, b2, it) = load_scene_checkpoint(&path).unwrap();
        assert_eq!(back, prims);
        assert_eq!(b2, bounds);
        assert_eq!(it, 1234);
    }

    #[test]
    fn look_at_camera_is_valid_and_centered() {
        let cam = Camera::look_at("c", Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), -Vector3::y(), 50.0, 32, 32, 0.1, 10.0);
        cam.validate().unwrap();
        let p = cam.to_camera(&Vector3::zeros());
        assert!((p - Vector3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
        assert!((cam.center() - Vector3::new(0.0, 0.0, -3.0)).norm() < 1e-12);
    }
}
