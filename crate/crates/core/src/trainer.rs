//! Joint optimization of the primitives and the signed distance field.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::rotation_from_quat;
use crate::losses::geometry::{normal_cue_loss, MIN_COVERAGE};
use crate::losses::{
    align_pseudo_depth, depth_normal_loss, distortion_loss, expected_depth, expected_depth_backward, fit_alignment,
    photometric_loss, pseudo_normal_from_depth, sample_sdf_rays, sdf_regularization, total_loss, wavelet_level,
    AlignParams, LossGates, LossReport, LossTerms, LossWeights,
};
use crate::optim::Adam;
use crate::raster::{render, render_backward, MapGrads, RasterConfig, RenderedMaps};
use crate::scene::{
    bounds_from_points, save_scene_checkpoint, Camera, Disparity, GaussianPrimitive, Image, SceneBounds, View,
    DEFAULT_CENTRAL_PERCENT, DEFAULT_MARGIN_FRACTION,
};
use crate::sdf::{OpacityMap, SdfConfig, SdfField, SdfGrads};

/// Raw opacities are kept inside this margin so their logit stays finite.
const OPACITY_MARGIN: f64 = 1e-6;
/// Newton iterations used to move centers onto the zero level set at activation.
const SNAP_STEPS: usize = 3;
/// Split children shrink their scale by this factor.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
/// Primitives with a largest scale above this fraction of the extent norm are split, not cloned.
pub const SPLIT_EXTENT_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    /// Remove primitives whose center has signed distance above the truncation.
    #[default]
    Sdf,
    /// Remove primitives whose opacity fell below `opacity_prune_threshold`.
    Opacity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_sdf: f64,
    pub lr_align: f64,
    pub lr_beta: f64,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    pub densify_grad_threshold: f64,
    pub densify_statistic: DensifyStatistic,
    pub max_primitives: usize,
    pub sdf_from: usize,
    pub distortion_from: usize,
    pub depthnormal_from: usize,
    pub wavelet_start_level: u32,
    pub full_res_from: usize,
    /// `false` renders at full resolution from the start.
    pub multires: bool,
    pub lambda_d: f64,
    pub lambda_n: f64,
    pub lambda_ns: f64,
    pub lambda_fs: f64,
    pub lambda_depth: f64,
    pub lambda_normal: f64,
    pub geometry_cues: bool,
    pub rays: usize,
    pub near_samples: usize,
    pub free_samples: usize,
    /// World-units truncation; `None` means 5% of the scene-extent norm.
    pub truncation: Option<f64>,
    pub beta: f64,
    pub learnable_beta: bool,
    pub opacity_map: OpacityMap,
    /// `None` means `densify_interval`.
    pub prune_interval: Option<usize>,
    pub prune_mode: PruneMode,
    pub opacity_prune_threshold: f64,
    /// Field regression steps on the current rendered depths right before the
    /// field takes over opacity.
    pub sdf_warmup_steps: usize,
    /// Iterations over which the field's learning rate ramps linearly from 0
    /// to `lr_sdf` once the field takes over opacity.
    pub sdf_lr_ramp: usize,
    /// Stop the SDF losses from moving the rendered depth.
    pub detach_sdf_depth: bool,
    pub initial_opacity: f64,
    pub background: [f64; 3],
    pub log_interval: usize,
    pub checkpoint_interval: usize,
    pub bounds_margin: f64,
    pub bounds_percentile: f64,
    /// Primitives drawn uniformly in the bounds when the dataset has no points.
    pub random_init_points: usize,
    pub sdf: SdfConfig,
    pub raster: RasterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30000,
            lr_position: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_color: 2.5e-3,
            lr_opacity: 5e-2,
            lr_sdf: 2e-3,
            lr_align: 1e-2,
            lr_beta: 1e-1,
            densify_from: 500,
            densify_until: 15000,
            densify_interval: 100,
            densify_grad_threshold: 2e-4,
            densify_statistic: DensifyStatistic::Total,
            max_primitives: 200_000,
            sdf_from: 5000,
            distortion_from: 3000,
            depthnormal_from: 7000,
            wavelet_start_level: 3,
            full_res_from: 10000,
            multires: true,
            lambda_d: 100.0,
            lambda_n: 0.05,
            lambda_ns: 1000.0,
            lambda_fs: 10.0,
            lambda_depth: 0.05,
            lambda_normal: 0.1,
            geometry_cues: true,
            rays: 10000,
            near_samples: 11,
            free_samples: 64,
            truncation: None,
            beta: 100.0,
            learnable_beta: false,
            opacity_map: OpacityMap::Gaussian,
            prune_interval: None,
            prune_mode: PruneMode::Sdf,
            opacity_prune_threshold: 0.005,
            sdf_warmup_steps: 300,
            sdf_lr_ramp: 1000,
            detach_sdf_depth: false,
            initial_opacity: 0.1,
            background: [0.0; 3],
            log_interval: 100,
            checkpoint_interval: 1000,
            bounds_margin: DEFAULT_MARGIN_FRACTION,
            bounds_percentile: DEFAULT_CENTRAL_PERCENT,
            random_init_points: 5000,
            sdf: SdfConfig::default(),
            raster: RasterConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: `iterations` steps with every schedule mark scaled
    /// by `iterations / 30000`, fewer rays and free-space samples, and
    /// densification every `densify_interval` steps.
    pub fn desk(iterations: usize) -> Self {
        let base = Self::default();
        let f = iterations as f64 / base.iterations as f64;
        let scale = |v: usize| (v as f64 * f).round() as usize;
        Self {
            iterations,
            densify_from: scale(base.densify_from),
            densify_until: scale(base.densify_until),
            sdf_from: scale(base.sdf_from),
            distortion_from: scale(base.distortion_from),
            depthnormal_from: scale(base.depthnormal_from),
            full_res_from: scale(base.full_res_from),
            sdf_lr_ramp: scale(base.sdf_lr_ramp),
            lr_sdf: 5e-4,
            wavelet_start_level: 1,
            densify_statistic: DensifyStatistic::Photometric,
            max_primitives: 15_000,
            rays: 512,
            free_samples: 16,
            log_interval: 10,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [
            ("lr_position", self.lr_position),
            ("lr_position_final", self.lr_position_final),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
            ("lr_color", self.lr_color),
            ("lr_opacity", self.lr_opacity),
            ("lr_sdf", self.lr_sdf),
            ("lr_align", self.lr_align),
            ("lr_beta", self.lr_beta),
        ];
        if let Some((name, v)) = lrs.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
        if let Some(tr) = self.truncation {
            if !(tr > 0.0) {
                return Err(Error::InvalidParameter(format!("truncation must be positive, got {tr}")));
            }
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidParameter("beta must be positive".into()));
        }
        if self.densify_interval == 0 || self.log_interval == 0 || self.prune_interval == Some(0) {
            return Err(Error::InvalidParameter("intervals must be positive".into()));
        }
        let marks = [
            ("densify_from", self.densify_from),
            ("sdf_from", self.sdf_from),
            ("distortion_from", self.distortion_from),
            ("depthnormal_from", self.depthnormal_from),
            ("full_res_from", self.full_res_from),
        ];
        // Marks past the end simply never fire, but they hint at a mis-scaled schedule.
        for (name, v) in marks {
            if v > self.iterations {
                log::warn!("{name} = {v} lies beyond the {} training iterations", self.iterations);
            }
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            depth: self.lambda_depth,
            normal: self.lambda_normal,
            near_surface: self.lambda_ns,
            free_space: self.lambda_fs,
            distortion: self.lambda_d,
            depth_normal: self.lambda_n,
        }
    }

    pub fn loss_gates(&self) -> LossGates {
        LossGates {
            distortion_from: self.distortion_from,
            depth_normal_from: self.depthnormal_from,
            sdf_from: self.sdf_from,
            geometry_cues: self.geometry_cues,
        }
    }

    pub fn prune_every(&self) -> usize {
        self.prune_interval.unwrap_or(self.densify_interval)
    }

    pub fn truncation_for(&self, bounds: &SceneBounds) -> f64 {
        self.truncation.unwrap_or(0.05 * bounds.extent_norm())
    }
}

/// Pyramid level rendered at `iteration`: `start` at 0, one level finer at
/// each of `start` equal intervals, full resolution from `full_res_from`.
pub fn wavelet_schedule(iteration: usize, start: u32, full_res_from: usize) -> u32 {
    if start == 0 || iteration >= full_res_from {
        return 0;
    }
    let stepped = (iteration as u128 * start as u128 / full_res_from as u128) as u32;
    start - stepped.min(start)
}

/// Keeps primitives with `sdf(mu) <= truncation`, in order. Returns the
/// survivors, their original indices and the largest surviving signed distance.
pub fn prune_by_sdf(
    prims: &[GaussianPrimitive],
    field: &SdfField,
    truncation: f64,
) -> Result<(Vec<GaussianPrimitive>, Vec<usize>, f64)> {
    let means: Vec<Vector3<f64>> = prims.iter().map(|g| g.mean()).collect();
    let sdf = field.query_batch(&means);
    prune_by_values(prims, &sdf, truncation)
}

fn prune_by_values(
    prims: &[GaussianPrimitive],
    sdf: &[f64],
    truncation: f64,
) -> Result<(Vec<GaussianPrimitive>, Vec<usize>, f64)> {
    let kept: Vec<usize> = (0..prims.len()).filter(|&i| sdf[i] <= truncation).collect();
    if kept.is_empty() {
        return Err(Error::EmptyResult(format!(
            "every primitive lies farther than the truncation {truncation} outside the surface"
        )));
    }
    let max_sdf = kept.iter().map(|&i| sdf[i]).fold(f64::NEG_INFINITY, f64::max);
    Ok((kept.iter().map(|&i| prims[i].clone()).collect(), kept, max_sdf))
}

/// Outcome of one densification pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyResult {
    pub primitives: Vec<GaussianPrimitive>,
    /// Source row per output primitive; `None` for newly created ones.
    pub sources: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
}

/// Clones small and splits large primitives whose mean screen-space
/// gradient exceeds the threshold, then resets the statistics.
pub fn densify(
    prims: &[GaussianPrimitive],
    threshold: f64,
    extent_norm: f64,
    max_primitives: usize,
    rng: &mut impl Rng,
) -> DensifyResult {
    let mut out = Vec::with_capacity(prims.len());
    let mut sources = Vec::with_capacity(prims.len());
    let mut extra = Vec::new();
    let (mut cloned, mut split) = (0, 0);
    let mut budget = max_primitives.saturating_sub(prims.len());
    let reset = |g: &GaussianPrimitive| GaussianPrimitive {
        accum_grad: 0.0,
        accum_count: 0,
        ..g.clone()
    };
    for (i, g) in prims.iter().enumerate() {
        let avg = if g.accum_count > 0 { g.accum_grad / g.accum_count as f64 } else { 0.0 };
        if avg <= threshold || budget == 0 {
            out.push(reset(g));
            sources.push(Some(i));
            continue;
        }
        budget -= 1;
        if g.max_scale() <= SPLIT_EXTENT_FRACTION * extent_norm {
            let mut c = reset(g);
            for a in 0..3 {
                let n: f64 = StandardNormal.sample(rng);
                c.mu[a] += n * g.scale[a] * 0.5;
            }
            out.push(reset(g));
            sources.push(Some(i));
            extra.push(c);
            cloned += 1;
        } else {
            let r = rotation_from_quat(&g.rot);
            for _ in 0..2 {
                let local = Vector3::from_fn(|a, _| {
                    let n: f64 = StandardNormal.sample(rng);
                    n * g.scale[a]
                });
                let offset = r * local;
                let mut c = reset(g);
                for a in 0..3 {
                    c.mu[a] += offset[a];
                    c.scale[a] = g.scale[a] / SPLIT_SCALE_DIVISOR;
                }
                extra.push(c);
            }
            split += 1;
        }
    }
    sources.extend(std::iter::repeat_n(None, extra.len()));
    out.extend(extra);
    DensifyResult {
        primitives: out,
        sources,
        cloned,
        split,
    }
}

/// Isotropic primitives at `points`, sized by the mean distance to the
/// three nearest neighbors.
pub fn init_primitives(points: &[[f64; 3]], opacity: f64, bounds: &SceneBounds) -> Vec<GaussianPrimitive> {
    let floor = 1e-4 * bounds.extent_norm();
    let ceiling = 0.05 * bounds.extent_norm();
    let tree: Option<ImmutableKdTree<f64, 3>> = (points.len() > 1).then(|| ImmutableKdTree::new_from_slice(points));
    points
        .iter()
        .map(|p| {
            let s = match &tree {
                Some(t) => {
                    let k = points.len().min(4);
                    let nn = t.nearest_n::<SquaredEuclidean>(p, std::num::NonZero::new(k).expect("k > 0"));
                    let d: Vec<f64> = nn.iter().skip(1).map(|n| n.distance.sqrt()).collect();
                    d.iter().sum::<f64>() / d.len().max(1) as f64
                }
                None => ceiling,
            };
            GaussianPrimitive::isotropic(*p, s.clamp(floor, ceiling), [0.5; 3], opacity)
        })
        .collect()
}

/// Per-interval check that rendering used the field-derived opacities.
/// Which objective's screen-space gradient drives densification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DensifyStatistic {
    /// The full weighted objective.
    #[default]
    Total,
    /// The photometric term alone, so geometric terms cannot inflate the population.
    Photometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpacityAudit {
    pub iter: usize,
    pub sdf_active: bool,
    /// Largest |rendered opacity - recomputed opacity| over primitives.
    pub max_coupling_error: f64,
    /// Opacity of the primitive closest to the zero level set.
    pub surface_opacity: f64,
    pub min_abs_sdf: f64,
    /// Opacity the map assigns to an exact surface point.
    pub peak_opacity: f64,
    pub max_opacity: f64,
    pub mean_opacity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub iter: usize,
    pub mode: PruneMode,
    pub before: usize,
    pub after: usize,
    /// Largest signed distance among survivors (SDF mode).
    pub max_sdf_after: f64,
    pub truncation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensifyEvent {
    pub iter: usize,
    pub before: usize,
    pub cloned: usize,
    pub split: usize,
    pub after: usize,
}

/// A view prepared for training: its camera and disparity pyramid.
struct TrainView {
    camera: usize,
    image: Image,
    disparity: Option<Disparity>,
}

/// Averages disparity over `2^level` blocks; blocks with any invalid pixel are invalid.
pub fn downsample_disparity(d: &Disparity, level: u32) -> Disparity {
    if level == 0 {
        return d.clone();
    }
    let f = 1usize << level;
    let (w, h) = (d.values.width / f, d.values.height / f);
    let mut values = Image::new(w, h, 1);
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut ok = true;
            for yy in y * f..(y + 1) * f {
                for xx in x * f..(x + 1) * f {
                    let p = yy * d.values.width + xx;
                    ok &= d.mask[p];
                    sum += d.values.data[p];
                }
            }
            if ok {
                values.data[y * w + x] = sum / (f * f) as f64;
                mask[y * w + x] = true;
            }
        }
    }
    Disparity { values, mask }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn scale_image(img: &mut Image, k: f64) {
    img.data.iter_mut().for_each(|v| *v *= k);
}

fn scale_map_grads(g: &mut MapGrads, k: f64) {
    for img in [&mut g.color, &mut g.depth, &mut g.normal, &mut g.alpha].into_iter().flatten() {
        scale_image(img, k);
    }
    for v in [&mut g.weight, &mut g.isect_depth].into_iter().flatten() {
        v.iter_mut().for_each(|x| *x *= k);
    }
}

struct Optimizers {
    mu: Adam,
    log_scale: Adam,
    rot: Adam,
    color: Adam,
    opacity: Adam,
    features: Adam,
    mlp: Adam,
    beta: Adam,
    align: Vec<Adam>,
}

impl Optimizers {
    fn remap(&mut self, sources: &[Option<usize>]) {
        self.mu.remap_rows(3, sources);
        self.log_scale.remap_rows(3, sources);
        self.rot.remap_rows(4, sources);
        self.color.remap_rows(3, sources);
        self.opacity.remap_rows(1, sources);
    }
}

/// Final state and logs of a run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub primitives: Vec<GaussianPrimitive>,
    pub field: SdfField,
    pub bounds: SceneBounds,
    pub truncation: f64,
    pub log: Vec<LossReport>,
    pub audits: Vec<OpacityAudit>,
    pub prunes: Vec<PruneEvent>,
    pub densifications: Vec<DensifyEvent>,
    /// Primitive count after every step, index = iteration.
    pub counts: Vec<usize>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub cameras: Vec<Camera>,
    views: Vec<TrainView>,
    pub primitives: Vec<GaussianPrimitive>,
    pub field: SdfField,
    pub bounds: SceneBounds,
    pub truncation: f64,
    pub align: Vec<AlignParams>,
    align_ready: Vec<bool>,
    opt: Optimizers,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub iteration: usize,
    pub log: Vec<LossReport>,
    pub audits: Vec<OpacityAudit>,
    pub prunes: Vec<PruneEvent>,
    pub densifications: Vec<DensifyEvent>,
    pub counts: Vec<usize>,
    out_dir: Option<PathBuf>,
    cues_available: bool,
}

impl Trainer {
    /// Sets up primitives (from `points`, or uniform in the bounds of the
    /// camera centers' targets when absent), the field and optimizers.
    pub fn new(
        cameras: Vec<Camera>,
        views: &[View],
        points: Option<&[[f64; 3]]>,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if views.len() < 2 {
            return Err(Error::InvalidParameter(format!("training needs at least 2 views, got {}", views.len())));
        }
        for c in &cameras {
            c.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bounds, prims) = match points {
            Some(p) if !p.is_empty() => {
                let bounds = bounds_from_points(p, cfg.bounds_margin, cfg.bounds_percentile)?;
                (bounds, init_primitives(p, cfg.initial_opacity, &bounds))
            }
            _ => {
                // Without points, fill a box around the origin that every camera looks into.
                let radius = cameras.iter().map(|c| c.center().norm()).fold(0.0, f64::max) * 0.5;
                let bounds = SceneBounds::new([0.0; 3], [radius.max(1e-3) * 2.0; 3])?;
                let pts: Vec<[f64; 3]> = (0..cfg.random_init_points)
                    .map(|_| std::array::from_fn(|a| bounds.center[a] + bounds.extent[a] * rng.random_range(-0.5..0.5)))
                    .collect();
                (bounds, init_primitives(&pts, cfg.initial_opacity, &bounds))
            }
        };
        let sdf_cfg = SdfConfig {
            beta: cfg.beta,
            learnable_beta: cfg.learnable_beta,
            ..cfg.sdf
        };
        let field = SdfField::new(bounds, sdf_cfg, &mut rng);
        let truncation = cfg.truncation_for(&bounds);
        let cues_available = views.iter().any(|v| v.disparity.is_some());
        if cfg.geometry_cues && !cues_available {
            log::info!("no pseudo-disparity in the dataset; geometry-cue losses disabled");
        }
        let train_views: Vec<TrainView> = views
            .iter()
            .map(|v| TrainView {
                camera: v.camera,
                image: v.image.clone(),
                disparity: v.disparity.clone(),
            })
            .collect();
        let n = prims.len();
        let opt = Optimizers {
            mu: Adam::new(3 * n, cfg.lr_position),
            log_scale: Adam::new(3 * n, cfg.lr_scale),
            rot: Adam::new(4 * n, cfg.lr_rotation),
            color: Adam::new(3 * n, cfg.lr_color),
            opacity: Adam::new(n, cfg.lr_opacity),
            features: Adam::new(field.features.len(), cfg.lr_sdf),
            mlp: Adam::new(field.mlp.num_params(), cfg.lr_sdf),
            beta: Adam::new(1, cfg.lr_beta),
            align: (0..views.len()).map(|_| Adam::new(4, cfg.lr_align)).collect(),
        };
        let nviews = views.len();
        Ok(Self {
            cfg,
            cameras,
            views: train_views,
            counts: Vec::new(),
            primitives: prims,
            field,
            bounds,
            truncation,
            align: vec![AlignParams::default(); nviews],
            align_ready: vec![false; nviews],
            opt,
            rng,
            order: Vec::new(),
            cursor: 0,
            iteration: 0,
            log: Vec::new(),
            audits: Vec::new(),
            prunes: Vec::new(),
            densifications: Vec::new(),
            out_dir: None,
            cues_available,
        })
    }

    /// Writes logs and periodic checkpoints under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in ["loss_log.jsonl", "audit_log.jsonl", "events.jsonl"] {
            let p = dir.join(name);
            File::create(&p).map_err(|e| Error::io(&p, e))?;
        }
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    fn append(&self, name: &str, line: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let p = dir.join(name);
            let mut f = fs::OpenOptions::new().append(true).open(&p).map_err(|e| Error::io(&p, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn sdf_active(&self) -> bool {
        self.iteration >= self.cfg.sdf_from
    }

    fn cues_on(&self) -> bool {
        self.cfg.geometry_cues && self.cues_available
    }

    pub fn level(&self) -> u32 {
        if self.cfg.multires {
            wavelet_schedule(self.iteration, self.cfg.wavelet_start_level, self.cfg.full_res_from)
        } else {
            0
        }
    }

    /// Signed distances at the primitive centers.
    pub fn center_sdf(&self) -> Vec<f64> {
        let means: Vec<Vector3<f64>> = self.primitives.iter().map(|g| g.mean()).collect();
        self.field.query_batch(&means)
    }

    /// Opacities used for rendering at the current iteration.
    pub fn current_opacities(&self) -> Vec<f64> {
        if self.sdf_active() {
            self.center_sdf().iter().map(|&s| self.cfg.opacity_map.eval(s, self.field.beta).0).collect()
        } else {
            self.primitives.iter().map(|g| g.raw_opacity).collect()
        }
    }

    pub fn render_camera(&self, cam: &Camera) -> Result<RenderedMaps> {
        render(&self.primitives, &self.current_opacities(), cam, self.cfg.background, &self.cfg.raster)
    }

    /// Mean full-resolution photometric loss over the training views.
    pub fn photometric_over_views(&self) -> Result<f64> {
        let mut total = 0.0;
        for v in &self.views {
            let maps = self.render_camera(&self.cameras[v.camera])?;
            total += photometric_loss(&maps.color, &v.image)?.0;
        }
        Ok(total / self.views.len() as f64)
    }

    fn next_view(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.views.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// Initializes the field from the current rendered surfaces of all views:
    /// regresses the distance to the back-projected depth points, signed by
    /// the depth difference near the surface and by free-space carving away
    /// from it.
    fn sdf_warmup(&mut self) -> Result<()> {
        if self.cfg.sdf_warmup_steps == 0 {
            return Ok(());
        }
        let opac: Vec<f64> = self.primitives.iter().map(|g| g.raw_opacity).collect();
        let mut shots = Vec::new();
        let mut surface: Vec<[f64; 3]> = Vec::new();
        for v in &self.views {
            let cam = self.cameras[v.camera].clone();
            let maps = render(&self.primitives, &opac, &cam, self.cfg.background, &self.cfg.raster)?;
            let ed = expected_depth(&maps);
            let rt = cam.rotation.transpose();
            let origin = cam.center();
            for (p, &ok) in ed.mask.iter().enumerate() {
                if ok {
                    let ray = cam.pixel_ray((p % cam.width) as f64 + 0.5, (p / cam.width) as f64 + 0.5);
                    let x = origin + rt * (ray * ed.depth.data[p]);
                    surface.push([x.x, x.y, x.z]);
                }
            }
            shots.push((cam, ed));
        }
        if surface.is_empty() {
            log::warn!("no covered pixel at iteration {}; field warm-up skipped", self.iteration);
            return Ok(());
        }
        let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&surface);
        let band = self.truncation;
        let target = |x: &Vector3<f64>| -> f64 {
            let d = tree.nearest_one::<SquaredEuclidean>(&[x.x, x.y, x.z]).distance.sqrt();
            let (mut near_sum, mut near_n, mut carved) = (0.0, 0, false);
            for (cam, ed) in &shots {
                let pc = cam.to_camera(x);
                if pc.z <= cam.near {
                    continue;
                }
                let u = cam.fx * pc.x / pc.z + cam.cx;
                let v = cam.fy * pc.y / pc.z + cam.cy;
                if u < 0.0 || v < 0.0 || u >= cam.width as f64 || v >= cam.height as f64 {
                    continue;
                }
                let p = v as usize * cam.width + u as usize;
                if !ed.mask[p] {
                    carved = true;
                    continue;
                }
                let diff = ed.depth.data[p] - pc.z;
                if diff.abs() < band {
                    near_sum += diff;
                    near_n += 1;
                } else if diff > 0.0 {
                    carved = true;
                }
            }
            let outside = if d < band && near_n > 0 { near_sum >= 0.0 } else { carved };
            if outside { d } else { -d }
        };
        let bounds = self.bounds;
        let rng = &mut self.rng;
        let mut sample = |i: usize| -> Vector3<f64> {
            let base = surface[rng.random_range(0..surface.len())];
            let spread = match i % 4 {
                0 => {
                    return Vector3::from_fn(|a, _| bounds.center[a] + bounds.extent[a] * rng.random_range(-0.75..0.75));
                }
                1 => 3.0 * band,
                _ => 0.5 * band,
            };
            Vector3::from_fn(|a, _| {
                let n: f64 = StandardNormal.sample(rng);
                base[a] + spread * n
            })
        };
        let loss = self.field.fit_samples(&target, self.cfg.sdf_warmup_steps, 1024, 5e-3, &mut sample);
        let snapped = self.snap_to_surface();
        let sdf = self.center_sdf();
        let near = sdf.iter().filter(|s| s.abs() < 1.0 / self.field.beta).count();
        log::info!(
            "field warm-up at iteration {}: loss {loss:.3e}, {snapped} centers snapped, {near}/{} within 1/beta of the zero level set",
            self.iteration,
            sdf.len()
        );
        Ok(())
    }

    /// Moves every center within the truncation band onto the zero level
    /// set with a few Newton steps along the field gradient. Returns how many
    /// centers were moved.
    fn snap_to_surface(&mut self) -> usize {
        let band = self.truncation;
        let field = &self.field;
        let moved: Vec<Option<[f64; 3]>> = self
            .primitives
            .par_iter()
            .map(|g| {
                let mut x = g.mean();
                if field.value(&x).abs() > band {
                    return None;
                }
                for _ in 0..SNAP_STEPS {
                    let s = field.value(&x);
                    let grad = field.gradient(&x);
                    let n2 = grad.norm_squared();
                    if n2 < 1e-12 {
                        return None;
                    }
                    let step = grad * (s / n2);
                    x -= step.cap_magnitude(band);
                }
                (field.value(&x).abs() <= band).then_some([x.x, x.y, x.z])
            })
            .collect();
        let mut count = 0;
        for (g, m) in self.primitives.iter_mut().zip(moved) {
            if let Some(mu) = m {
                g.mu = mu;
                count += 1;
            }
        }
        count
    }

    /// One optimization step; returns the loss report of the step.
    pub fn step(&mut self) -> Result<LossReport> {
        let it = self.iteration;
        if it == self.cfg.sdf_from {
            self.sdf_warmup()?;
        }
        let vi = self.next_view();
        let level = self.level();
        let cam = self.cameras[self.views[vi].camera].downscaled(level);
        let gt = wavelet_level(&self.views[vi].image, level);
        let sdf_on = self.sdf_active();
        let beta = self.field.beta;

        let means: Vec<Vector3<f64>> = self.primitives.iter().map(|g| g.mean()).collect();
        let (opacities, center_sdf, traces) = if sdf_on {
            let (s, traces) = self.field.query_batch_traced(&means);
            (s.iter().map(|&v| self.cfg.opacity_map.eval(v, beta).0).collect::<Vec<_>>(), Some(s), traces)
        } else {
            (self.primitives.iter().map(|g| g.raw_opacity).collect(), None, Vec::new())
        };
        if it % self.cfg.log_interval == 0 || it + 1 == self.cfg.iterations {
            self.audit(&opacities, center_sdf.as_deref())?;
        }

        let maps = render(&self.primitives, &opacities, &cam, self.cfg.background, &self.cfg.raster)?;
        let gates = self.cfg.loss_gates();
        let mut terms = LossTerms::default();
        let (p, g_color) = photometric_loss(&maps.color, &gt)?;
        terms.p = p;
        let photo_only = MapGrads {
            color: Some(g_color),
            ..Default::default()
        };
        let mut grads = photo_only.clone();
        let ed = expected_depth(&maps);
        let mut g_ed = Image::new(cam.width, cam.height, 1);

        if self.cues_on() {
            if let Some(disp) = &self.views[vi].disparity {
                let disp_l = downsample_disparity(disp, level);
                if !self.align_ready[vi] {
                    if let Ok((fit, _)) = fit_alignment(&disp_l, &ed.depth, &ed.mask, AlignParams::default(), 100) {
                        self.align[vi] = fit;
                    }
                    self.align_ready[vi] = true;
                }
                match align_pseudo_depth(&disp_l, &ed.depth, &ed.mask, &self.align[vi]) {
                    Ok(out) => {
                        terms.depth = out.loss;
                        let mut gd = out.grad_depth.clone();
                        scale_image(&mut gd, self.cfg.lambda_depth);
                        g_ed.data.iter_mut().zip(&gd.data).for_each(|(a, b)| *a += b);
                        let ga = out.grad_params.to_array().map(|v| v * self.cfg.lambda_depth);
                        let mut params = self.align[vi].to_array();
                        self.opt.align[vi].step(&mut params, &ga);
                        self.align[vi] = AlignParams::from_array(params);
                        let pseudo = pseudo_normal_from_depth(&out.pseudo_depth, &out.mask, &cam)?;
                        if let Ok((ln, mut gn)) = normal_cue_loss(&pseudo, &maps.normal, &maps.alpha) {
                            terms.normal = ln;
                            scale_image(&mut gn, self.cfg.lambda_normal);
                            grads.normal = Some(gn);
                        }
                    }
                    Err(Error::EmptyResult(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }

        if gates.distortion(it) {
            let (d, mut gd) = distortion_loss(&maps);
            terms.d = d;
            scale_map_grads(&mut gd, self.cfg.lambda_d);
            grads.add_assign(gd);
        }
        if gates.depth_normal(it) {
            let (n, mut gn) = depth_normal_loss(&maps, &cam)?;
            terms.n = n;
            scale_map_grads(&mut gn, self.cfg.lambda_n);
            grads.add_assign(gn);
        }
        let mut field_grads = SdfGrads::zeros_like(&self.field);
        if sdf_on {
            let batch = sample_sdf_rays(
                &ed,
                &cam,
                self.cfg.rays,
                self.cfg.near_samples,
                self.cfg.free_samples,
                self.truncation,
                &mut self.rng,
            )?;
            if !batch.samples.is_empty() {
                let reg = sdf_regularization(
                    &batch,
                    &self.field,
                    (cam.width, cam.height),
                    self.cfg.lambda_ns,
                    self.cfg.lambda_fs,
                    self.cfg.detach_sdf_depth,
                );
                terms.ns = reg.near_surface;
                terms.fs = reg.free_space;
                g_ed.data.iter_mut().zip(&reg.grad_depth.data).for_each(|(a, b)| *a += b);
                field_grads.add_assign(&reg.field_grads);
            }
        }
        if g_ed.data.iter().any(|v| *v != 0.0) {
            grads.add_assign(expected_depth_backward(&maps, &g_ed));
        }

        let report = total_loss(&terms, &self.cfg.loss_weights(), &gates, it, self.primitives.len());
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                self.write_checkpoint("diverged")?;
                return Err(e);
            }
        };

        let pg = render_backward(&maps, &self.primitives, &cam, &grads)?;
        let n = self.primitives.len();
        let mut g_mu: Vec<f64> = pg.mu.iter().flatten().copied().collect();
        let mut g_beta = 0.0;
        let mut g_opacity = vec![0.0; n];
        if let Some(sdf) = &center_sdf {
            let mut upstream = vec![0.0; n];
            for i in 0..n {
                let (_, ds, db) = self.cfg.opacity_map.eval(sdf[i], beta);
                upstream[i] = pg.opacity[i] * ds;
                g_beta += pg.opacity[i] * db;
            }
            let dx = self.field.backward_traces(&traces, &upstream, &mut field_grads);
            for i in 0..n {
                for a in 0..3 {
                    g_mu[3 * i + a] += dx[i][a];
                }
            }
        } else {
            for i in 0..n {
                let o = self.primitives[i].raw_opacity;
                g_opacity[i] = pg.opacity[i] * o * (1.0 - o);
            }
        }

        // Screen-space gradient statistic in normalized device units.
        if it < self.cfg.densify_until {
            let stat = match self.cfg.densify_statistic {
                DensifyStatistic::Total => pg.mean2d.clone(),
                DensifyStatistic::Photometric => render_backward(&maps, &self.primitives, &cam, &photo_only)?.mean2d,
            };
            let half = [cam.width as f64 * 0.5, cam.height as f64 * 0.5];
            for s in &maps.splats {
                let g = &stat[s.source_index];
                let prim = &mut self.primitives[s.source_index];
                prim.accum_grad += ((g[0] * half[0]).powi(2) + (g[1] * half[1]).powi(2)).sqrt();
                prim.accum_count += 1;
            }
        }

        self.apply_updates(&g_mu, &pg.rot, &pg.scale, &pg.color, &g_opacity, &field_grads, g_beta, sdf_on);

        let done = it + 1;
        if done > self.cfg.densify_from
            && done <= self.cfg.densify_until
            && done % self.cfg.densify_interval == 0
        {
            self.densify_now(done);
        }
        if sdf_on && (done - self.cfg.sdf_from) % self.cfg.prune_every() == 0 {
            self.prune_now(done)?;
        }

        if it % self.cfg.log_interval == 0 || done == self.cfg.iterations {
            self.log.push(report);
            self.append("loss_log.jsonl", &report.to_json_line())?;
            log::info!(
                "iter {it} level {level} loss {:.5} photometric {:.5} primitives {}",
                report.total,
                report.terms.p,
                self.primitives.len()
            );
        }
        self.iteration = done;
        self.counts.push(self.primitives.len());
        if self.cfg.checkpoint_interval > 0 && done % self.cfg.checkpoint_interval == 0 {
            self.write_checkpoint(&format!("{done:06}"))?;
        }
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_updates(
        &mut self,
        g_mu: &[f64],
        g_rot: &[[f64; 4]],
        g_scale: &[[f64; 3]],
        g_color: &[[f64; 3]],
        g_opacity: &[f64],
        field_grads: &SdfGrads,
        g_beta: f64,
        sdf_on: bool,
    ) {
        let n = self.primitives.len();
        let t = self.iteration as f64 / self.cfg.iterations.max(1) as f64;
        let lr_pos = self.cfg.lr_position * (self.cfg.lr_position_final / self.cfg.lr_position).powf(t);
        self.opt.mu.lr = lr_pos * self.bounds.extent_norm();

        let mut mu: Vec<f64> = self.primitives.iter().flat_map(|g| g.mu).collect();
        self.opt.mu.step(&mut mu, g_mu);
        let mut log_s: Vec<f64> = self.primitives.iter().flat_map(|g| g.scale.map(f64::ln)).collect();
        let g_log_s: Vec<f64> = (0..3 * n).map(|k| g_scale[k / 3][k % 3] * self.primitives[k / 3].scale[k % 3]).collect();
        self.opt.log_scale.step(&mut log_s, &g_log_s);
        let mut rot: Vec<f64> = self.primitives.iter().flat_map(|g| g.rot).collect();
        let g_r: Vec<f64> = g_rot.iter().flatten().copied().collect();
        self.opt.rot.step(&mut rot, &g_r);
        let mut color: Vec<f64> = self.primitives.iter().flat_map(|g| g.color).collect();
        let g_c: Vec<f64> = g_color.iter().flatten().copied().collect();
        self.opt.color.step(&mut color, &g_c);
        if !sdf_on {
            let mut lo: Vec<f64> = self.primitives.iter().map(|g| logit(g.raw_opacity)).collect();
            self.opt.opacity.step(&mut lo, g_opacity);
            for (g, l) in self.primitives.iter_mut().zip(lo) {
                g.raw_opacity = sigmoid(l).clamp(OPACITY_MARGIN, 1.0 - OPACITY_MARGIN);
            }
        }
        for (i, g) in self.primitives.iter_mut().enumerate() {
            for a in 0..3 {
                g.mu[a] = mu[3 * i + a];
                g.scale[a] = log_s[3 * i + a].exp();
                g.color[a] = color[3 * i + a].clamp(0.0, 1.0);
            }
            g.rot = [rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]];
            g.renormalize();
        }
        if sdf_on {
            let since = (self.iteration + 1).saturating_sub(self.cfg.sdf_from) as f64;
            let ramp = (since / self.cfg.sdf_lr_ramp.max(1) as f64).min(1.0);
            self.opt.features.lr = self.cfg.lr_sdf * ramp;
            self.opt.mlp.lr = self.cfg.lr_sdf * ramp;
            self.opt.features.step(&mut self.field.features, &field_grads.features);
            self.opt.mlp.step(&mut self.field.mlp.params, &field_grads.mlp);
            if self.cfg.learnable_beta {
                let mut b = [self.field.beta];
                self.opt.beta.step(&mut b, &[g_beta]);
                self.field.beta = b[0].max(1e-3);
            }
        }
    }

    fn densify_now(&mut self, iter: usize) {
        let before = self.primitives.len();
        let res = densify(
            &self.primitives,
            self.cfg.densify_grad_threshold,
            self.bounds.extent_norm(),
            self.cfg.max_primitives,
            &mut self.rng,
        );
        self.opt.remap(&res.sources);
        self.primitives = res.primitives;
        let ev = DensifyEvent {
            iter,
            before,
            cloned: res.cloned,
            split: res.split,
            after: self.primitives.len(),
        };
        log::debug!("densify at {iter}: {before} -> {} ({} cloned, {} split)", ev.after, ev.cloned, ev.split);
        self.densifications.push(ev);
        let _ = self.append("events.jsonl", &serde_json::json!({ "densify": ev }).to_string());
    }

    fn prune_now(&mut self, iter: usize) -> Result<()> {
        let before = self.primitives.len();
        let (kept, idx, max_sdf) = match self.cfg.prune_mode {
            PruneMode::Sdf => match prune_by_sdf(&self.primitives, &self.field, self.truncation) {
                Ok(r) => r,
                Err(e) => {
                    self.write_checkpoint("diverged")?;
                    return Err(e);
                }
            },
            PruneMode::Opacity => {
                let opac = self.current_opacities();
                let idx: Vec<usize> = (0..before).filter(|&i| opac[i] >= self.cfg.opacity_prune_threshold).collect();
                if idx.is_empty() {
                    self.write_checkpoint("diverged")?;
                    return Err(Error::EmptyResult("opacity pruning removed every primitive".into()));
                }
                let sdf = self.center_sdf();
                let max_sdf = idx.iter().map(|&i| sdf[i]).fold(f64::NEG_INFINITY, f64::max);
                (idx.iter().map(|&i| self.primitives[i].clone()).collect(), idx, max_sdf)
            }
        };
        let sources: Vec<Option<usize>> = idx.into_iter().map(Some).collect();
        self.opt.remap(&sources);
        self.primitives = kept;
        let ev = PruneEvent {
            iter,
            mode: self.cfg.prune_mode,
            before,
            after: self.primitives.len(),
            max_sdf_after: max_sdf,
            truncation: self.truncation,
        };
        self.prunes.push(ev);
        self.append("events.jsonl", &serde_json::json!({ "prune": ev }).to_string())
    }

    /// Recomputes every opacity from scratch and compares with the values
    /// about to be rendered.
    fn audit(&mut self, rendered: &[f64], center_sdf: Option<&[f64]>) -> Result<()> {
        let beta = self.field.beta;
        let n = rendered.len().max(1) as f64;
        let mut audit = OpacityAudit {
            iter: self.iteration,
            sdf_active: center_sdf.is_some(),
            max_coupling_error: 0.0,
            surface_opacity: f64::NAN,
            min_abs_sdf: f64::NAN,
            peak_opacity: self.cfg.opacity_map.eval(0.0, beta).0,
            max_opacity: rendered.iter().cloned().fold(0.0, f64::max),
            mean_opacity: rendered.iter().sum::<f64>() / n,
        };
        if center_sdf.is_some() {
            let mut best = (f64::INFINITY, f64::NAN);
            for (g, &o) in self.primitives.iter().zip(rendered) {
                let s = self.field.query(&g.mean())?;
                let fresh = self.cfg.opacity_map.eval(s, beta).0;
                audit.max_coupling_error = audit.max_coupling_error.max((fresh - o).abs());
                if s.abs() < best.0 {
                    best = (s.abs(), fresh);
                }
            }
            audit.min_abs_sdf = best.0;
            audit.surface_opacity = best.1;
        }
        self.audits.push(audit);
        self.append("audit_log.jsonl", &serde_json::to_string(&audit).map_err(|e| Error::json("audit", e))?)
    }

    pub fn checkpoint_state(&self) -> CheckpointState {
        CheckpointState {
            iteration: self.iteration,
            sdf_active: self.sdf_active(),
            opacity_map: self.cfg.opacity_map,
            beta: self.field.beta,
        }
    }

    pub fn write_checkpoint(&self, tag: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            write_json(&dir.join(format!("state_{tag}.json")), &self.checkpoint_state())?;
            save_scene_checkpoint(
                &dir.join(format!("scene_{tag}.jsonl")),
                &self.primitives,
                &self.bounds,
                self.iteration as u64,
            )?;
            self.field.save(&dir.join(format!("field_{tag}.bin")))?;
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.iteration < self.cfg.iterations {
            self.step()?;
        }
        if let Some(dir) = &self.out_dir {
            save_scene_checkpoint(&dir.join("scene.jsonl"), &self.primitives, &self.bounds, self.iteration as u64)?;
            self.field.save(&dir.join("field.bin"))?;
            write_json(&dir.join("state.json"), &self.checkpoint_state())?;
            write_json(&dir.join("align.json"), &self.align)?;
            write_json(&dir.join("counts.json"), &self.counts)?;
        }
        Ok(TrainOutcome {
            primitives: self.primitives,
            field: self.field,
            bounds: self.bounds,
            truncation: self.truncation,
            log: self.log,
            audits: self.audits,
            prunes: self.prunes,
            densifications: self.densifications,
            counts: self.counts,
        })
    }
}

/// What a renderer needs besides the primitives and the field to reproduce
/// the opacities of a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub iteration: usize,
    pub sdf_active: bool,
    pub opacity_map: OpacityMap,
    pub beta: f64,
}

impl CheckpointState {
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// Rendering opacities: field-derived once the field is active, raw otherwise.
    pub fn opacities(&self, prims: &[GaussianPrimitive], field: &SdfField) -> Vec<f64> {
        if self.sdf_active {
            let means: Vec<Vector3<f64>> = prims.iter().map(|g| g.mean()).collect();
            field.query_batch(&means).iter().map(|&s| self.opacity_map.eval(s, self.beta).0).collect()
        } else {
            prims.iter().map(|g| g.raw_opacity).collect()
        }
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::json(path.display().to_string(), e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains on `views` from `points` (or a random cloud) with a fixed seed.
pub fn train(
    cameras: &[Camera],
    views: &[View],
    points: Option<&[[f64; 3]]>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    Trainer::new(cameras.to_vec(), views, points, cfg.clone(), seed)?.run()
}

/// Fraction of covered pixels, a cheap sanity statistic for renders.
pub fn coverage(maps: &RenderedMaps) -> f64 {
    maps.alpha.data.iter().filter(|a| **a >= MIN_COVERAGE).count() as f64 / maps.alpha.data.len().max(1) as f64
}
