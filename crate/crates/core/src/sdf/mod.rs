//! Implicit surface: normalization, one-blob + hash-grid encoding, and an
//! MLP decoder producing a signed distance (negative inside).

pub mod encoding;
pub mod hashgrid;
pub mod mlp;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::scene::SceneBounds;

pub use encoding::{
    denormalize_coord, normalize_coord, oneblob_encode, sdf_to_opacity, sdf_to_opacity_grad, Normalization, OpacityMap,
};
use hashgrid::{build_levels, corners, Corner, GridLevel};
use mlp::{Mlp, MlpTrace};

/// Queries per parallel work item in batched evaluation.
const BATCH_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdfConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub base_resolution: u32,
    pub growth: f64,
    pub log2_table_size: u32,
    pub oneblob_bins: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub softplus_sharpness: f64,
    pub beta: f64,
    pub learnable_beta: bool,
    pub normalization: Normalization,
    /// Initial zero level set radius as a fraction of the bounds' diagonal.
    pub init_radius_fraction: f64,
    pub init_steps: usize,
}

impl Default for SdfConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            features_per_level: 2,
            base_resolution: 16,
            growth: 1.5,
            log2_table_size: 15,
            oneblob_bins: 16,
            hidden_width: 32,
            hidden_layers: 2,
            softplus_sharpness: 100.0,
            beta: 100.0,
            learnable_beta: false,
            normalization: Normalization::Sigmoid,
            init_radius_fraction: 0.25,
            init_steps: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdfField {
    pub bounds: SceneBounds,
    pub config: SdfConfig,
    pub levels: Vec<GridLevel>,
    pub features: Vec<f64>,
    pub mlp: Mlp,
    pub beta: f64,
}

/// Gradients w.r.t. every learnable quantity of an [`SdfField`].
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrads {
    pub features: Vec<f64>,
    pub mlp: Vec<f64>,
    pub beta: f64,
}

impl SdfGrads {
    pub fn zeros_like(field: &SdfField) -> Self {
        Self {
            features: vec![0.0; field.features.len()],
            mlp: vec![0.0; field.mlp.num_params()],
            beta: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &SdfGrads) {
        self.features.iter_mut().zip(&other.features).for_each(|(a, b)| *a += b);
        self.mlp.iter_mut().zip(&other.mlp).for_each(|(a, b)| *a += b);
        self.beta += other.beta;
    }

    pub fn scale(&mut self, k: f64) {
        self.features.iter_mut().for_each(|a| *a *= k);
        self.mlp.iter_mut().for_each(|a| *a *= k);
        self.beta *= k;
    }
}

/// Intermediate values of one query, kept for the reverse pass.
#[derive(Debug, Clone, Default)]
pub struct QueryTrace {
    jac: Matrix3<f64>,
    enc_deriv: Vec<f64>,
    corners: Vec<Corner>,
    input: Vec<f64>,
    mlp: MlpTrace,
}

impl SdfField {
    /// Field with random weights and a geometric initialization whose zero
    /// level set is a sphere of radius `init_radius_fraction * |extent|`
    /// around the bounds center.
    pub fn new(bounds: SceneBounds, config: SdfConfig, rng: &mut impl Rng) -> Self {
        let mut field = Self::with_random_weights(bounds, config, rng);
        field.geometric_init(rng);
        field
    }

    pub fn with_random_weights(bounds: SceneBounds, config: SdfConfig, rng: &mut impl Rng) -> Self {
        let levels = build_levels(
            config.levels,
            config.base_resolution,
            config.growth,
            config.log2_table_size,
            config.features_per_level,
        );
        let total = levels.last().map(|l| l.offset + l.table_size * config.features_per_level).unwrap_or(0);
        let features = (0..total).map(|_| rng.random_range(-1e-4..1e-4)).collect();
        let input_dim = 3 * config.oneblob_bins + config.levels * config.features_per_level;
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
        dims.push(1);
        let mlp = Mlp::new(dims, config.softplus_sharpness, rng);
        Self {
            bounds,
            config,
            levels,
            features,
            mlp,
            beta: config.beta,
        }
    }

    pub fn geometric_init(&mut self, rng: &mut impl Rng) {
        let center = Vector3::from(self.bounds.center);
        let radius = self.config.init_radius_fraction * self.bounds.extent_norm();
        let steps = self.config.init_steps;
        self.fit_analytic(&|x: &Vector3<f64>| (x - center).norm() - radius, steps, 512, 5e-3, rng);
    }

    /// Regresses the field onto an analytic signed distance with an MSE loss
    /// on points spread over the bounds and the far field. Returns the final
    /// batch loss.
    pub fn fit_analytic(
        &mut self,
        target: &(dyn Fn(&Vector3<f64>) -> f64 + Sync),
        steps: usize,
        batch: usize,
        lr: f64,
        rng: &mut impl Rng,
    ) -> f64 {
        let bounds = self.bounds;
        let mut sample = |i: usize| {
            if i % 4 == 0 {
                let u = Vector3::from_fn(|_, _| rng.random_range(0.01..0.99));
                denormalize_coord(&u, &bounds)
            } else {
                Vector3::from_fn(|a, _| bounds.center[a] + bounds.extent[a] * rng.random_range(-0.75..0.75))
            }
        };
        self.fit_samples(target, steps, batch, lr, &mut sample)
    }

    /// Same regression with a caller-chosen sampler; `sample(i)` draws the
    /// `i`-th point of a batch. The learning rate decays tenfold over the run.
    pub fn fit_samples(
        &mut self,
        target: &(dyn Fn(&Vector3<f64>) -> f64 + Sync),
        steps: usize,
        batch: usize,
        lr: f64,
        sample: &mut dyn FnMut(usize) -> Vector3<f64>,
    ) -> f64 {
        let clamp = self.bounds.extent_norm();
        let mut feat_opt = Adam::new(self.features.len(), lr);
        let mut mlp_opt = Adam::new(self.mlp.num_params(), lr);
        let mut last = f64::NAN;
        for step in 0..steps {
            let decay = 0.1f64.powf(step as f64 / steps.max(1) as f64);
            feat_opt.lr = lr * decay;
            mlp_opt.lr = lr * decay;
            let pts: Vec<Vector3<f64>> = (0..batch).map(&mut *sample).collect();
            let values = self.query_batch(&pts);
            let targets: Vec<f64> = pts.par_iter().map(|p| target(p).clamp(-clamp, clamp)).collect();
            let n = batch as f64;
            let mut loss = 0.0;
            let upstream: Vec<f64> = values
                .iter()
                .zip(&targets)
                .map(|(s, t)| {
                    let r = s - t;
                    loss += r * r / n;
                    2.0 * r / n
                })
                .collect();
            let mut grads = SdfGrads::zeros_like(self);
            self.backward_batch(&pts, &upstream, &mut grads);
            feat_opt.step(&mut self.features, &grads.features);
            mlp_opt.step(&mut self.mlp.params, &grads.mlp);
            last = loss;
        }
        last
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Signed distance at world point `x`, with the trace needed by [`Self::backward_traced`].
    pub fn forward_traced(&self, x: &Vector3<f64>, tr: &mut QueryTrace) -> f64 {
        let k = self.config.oneblob_bins;
        let f = self.config.features_per_level;
        let (u, jac) = self.config.normalization.apply(x, &self.bounds);
        tr.jac = jac;
        let dim = self.input_dim();
        tr.input.clear();
        tr.input.resize(dim, 0.0);
        tr.enc_deriv.clear();
        tr.enc_deriv.resize(3 * k, 0.0);
        for a in 0..3 {
            encoding::oneblob_encode_into(u[a], k, &mut tr.input[a * k..(a + 1) * k], &mut tr.enc_deriv[a * k..(a + 1) * k]);
        }
        tr.corners.clear();
        tr.corners.resize(self.levels.len() * 8, Corner::default());
        let p = [u.x, u.y, u.z];
        for (l, level) in self.levels.iter().enumerate() {
            let cs = &mut tr.corners[l * 8..(l + 1) * 8];
            corners(level, f, p, cs);
            let base = 3 * k + l * f;
            for c in cs.iter() {
                for j in 0..f {
                    tr.input[base + j] += c.weight * self.features[c.feature_index + j];
                }
            }
        }
        let input = std::mem::take(&mut tr.input);
        let s = self.mlp.forward(&input, &mut tr.mlp);
        tr.input = input;
        s
    }

    /// Accumulates parameter gradients for upstream `ds` and returns `ds * d s / d x`.
    pub fn backward_traced(&self, tr: &QueryTrace, ds: f64, grads: &mut SdfGrads) -> Vector3<f64> {
        let mut g_in = Vec::new();
        self.mlp.backward(&tr.mlp, ds, &mut grads.mlp, &mut g_in);
        let du = self.input_grad_to_coord(tr, &g_in, |idx, v| grads.features[idx] += v);
        tr.jac.transpose() * du
    }

    fn input_grad_to_coord(&self, tr: &QueryTrace, g_in: &[f64], mut feature_sink: impl FnMut(usize, f64)) -> Vector3<f64> {
        let k = self.config.oneblob_bins;
        let f = self.config.features_per_level;
        let mut du = Vector3::zeros();
        for a in 0..3 {
            for i in 0..k {
                du[a] += g_in[a * k + i] * tr.enc_deriv[a * k + i];
            }
        }
        for l in 0..self.levels.len() {
            let base = 3 * k + l * f;
            for c in &tr.corners[l * 8..(l + 1) * 8] {
                let mut dot = 0.0;
                for j in 0..f {
                    let g = g_in[base + j];
                    feature_sink(c.feature_index + j, c.weight * g);
                    dot += g * self.features[c.feature_index + j];
                }
                for a in 0..3 {
                    du[a] += dot * c.dweight[a];
                }
            }
        }
        du
    }

    /// Signed distance with a finiteness check naming the failing stage.
    pub fn query(&self, x: &Vector3<f64>) -> Result<f64> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite query point"));
        }
        let mut tr = QueryTrace::default();
        let s = self.forward_traced(x, &mut tr);
        if s.is_finite() {
            return Ok(s);
        }
        let stage = if !tr.input[..3 * self.config.oneblob_bins].iter().all(|v| v.is_finite()) {
            "one-blob encoding".to_string()
        } else if !tr.input.iter().all(|v| v.is_finite()) {
            "hash-grid features".to_string()
        } else {
            let layer = tr.mlp.acts.iter().position(|a| !a.iter().all(|v| v.is_finite())).unwrap_or(0);
            format!("mlp layer {layer}")
        };
        Err(Error::NonFinite {
            term: "sdf_query".into(),
            detail: format!("non-finite value at {stage}"),
        })
    }

    /// Unchecked signed distance.
    pub fn value(&self, x: &Vector3<f64>) -> f64 {
        let mut tr = QueryTrace::default();
        self.forward_traced(x, &mut tr)
    }

    /// `d s / d x` by the chain rule through normalization, encodings and the MLP.
    pub fn gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let mut tr = QueryTrace::default();
        self.forward_traced(x, &mut tr);
        let mut g_in = Vec::new();
        let mut scratch = vec![0.0; self.mlp.num_params()];
        self.mlp.backward(&tr.mlp, 1.0, &mut scratch, &mut g_in);
        let du = self.input_grad_to_coord(&tr, &g_in, |_, _| {});
        tr.jac.transpose() * du
    }

    /// Hash-grid feature vector (all levels concatenated) at normalized point `p`.
    pub fn grid_lookup(&self, p: [f64; 3]) -> Vec<f64> {
        let f = self.config.features_per_level;
        let mut out = vec![0.0; self.levels.len() * f];
        let mut cs = [Corner::default(); 8];
        for (l, level) in self.levels.iter().enumerate() {
            corners(level, f, p, &mut cs);
            for c in &cs {
                for j in 0..f {
                    out[l * f + j] += c.weight * self.features[c.feature_index + j];
                }
            }
        }
        out
    }

    pub fn query_batch(&self, points: &[Vector3<f64>]) -> Vec<f64> {
        points
            .par_chunks(BATCH_CHUNK)
            .flat_map_iter(|chunk| {
                let mut tr = QueryTrace::default();
                chunk.iter().map(move |p| self.forward_traced(p, &mut tr)).collect::<Vec<_>>()
            })
            .collect()
    }

    /// Values together with the per-point traces that `backward_traces` consumes.
    pub fn query_batch_traced(&self, points: &[Vector3<f64>]) -> (Vec<f64>, Vec<QueryTrace>) {
        points
            .par_iter()
            .map(|p| {
                let mut tr = QueryTrace::default();
                let s = self.forward_traced(p, &mut tr);
                (s, tr)
            })
            .unzip()
    }

    /// Accumulates `sum_i upstream[i] * d s(points[i])` into `grads` and
    /// returns the per-point spatial gradients scaled by `upstream`.
    pub fn backward_batch(&self, points: &[Vector3<f64>], upstream: &[f64], grads: &mut SdfGrads) -> Vec<Vector3<f64>> {
        let (_, traces) = self.query_batch_traced(points);
        self.backward_traces(&traces, upstream, grads)
    }

    /// `backward_batch` for traces produced by `query_batch_traced`.
    pub fn backward_traces(&self, traces: &[QueryTrace], upstream: &[f64], grads: &mut SdfGrads) -> Vec<Vector3<f64>> {
        assert_eq!(traces.len(), upstream.len());
        struct Partial {
            mlp: Vec<f64>,
            features: Vec<(u32, f64)>,
            dx: Vec<Vector3<f64>>,
            beta: f64,
        }
        let nparams = self.mlp.num_params();
        let partials: Vec<Partial> = traces
            .par_chunks(BATCH_CHUNK)
            .zip(upstream.par_chunks(BATCH_CHUNK))
            .map(|(trs, ups)| {
                let mut part = Partial {
                    mlp: vec![0.0; nparams],
                    features: Vec::new(),
                    dx: Vec::with_capacity(trs.len()),
                    beta: 0.0,
                };
                let mut g_in = Vec::new();
                for (tr, &up) in trs.iter().zip(ups) {
                    if up == 0.0 {
                        part.dx.push(Vector3::zeros());
                        continue;
                    }
                    self.mlp.backward(&tr.mlp, up, &mut part.mlp, &mut g_in);
                    let feats = &mut part.features;
                    let du = self.input_grad_to_coord(tr, &g_in, |i, v| feats.push((i as u32, v)));
                    part.dx.push(tr.jac.transpose() * du);
                }
                part
            })
            .collect();
        let mut dx = Vec::with_capacity(traces.len());
        for part in partials {
            grads.mlp.iter_mut().zip(&part.mlp).for_each(|(a, b)| *a += b);
            for (i, v) in part.features {
                grads.features[i as usize] += v;
            }
            grads.beta += part.beta;
            dx.extend(part.dx);
        }
        dx
    }

    /// Sets the output layer to zero so the field is identically `bias`.
    pub fn set_constant(&mut self, bias: f64) {
        let range = self.mlp.output_weight_range();
        self.mlp.params[range].iter_mut().for_each(|w| *w = 0.0);
        let b = self.mlp.output_bias_index();
        self.mlp.params[b] = bias;
    }

    /// Writes a one-line JSON header followed by little-endian f32 features
    /// and then MLP parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = FieldHeader {
            resolutions: self.levels.iter().map(|l| l.resolution).collect(),
            table_sizes: self.levels.iter().map(|l| l.table_size).collect(),
            oneblob_bins: self.config.oneblob_bins,
            beta: self.beta,
            bounds: self.bounds,
            config: self.config,
            mlp_dims: self.mlp.dims.clone(),
            feature_count: self.features.len(),
            mlp_param_count: self.mlp.num_params(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let line = serde_json::to_string(&header).map_err(|e| Error::json("field header", e))?;
        let mut bytes = Vec::with_capacity(line.len() + 1 + 4 * (self.features.len() + self.mlp.num_params()));
        bytes.extend_from_slice(line.as_bytes());
        bytes.push(b'\n');
        for v in self.features.iter().chain(&self.mlp.params) {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: FieldHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::json(format!("{} header", path.display()), e))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        let want = 4 * (header.feature_count + header.mlp_param_count);
        if rest.len() != want {
            return Err(Error::Dataset {
                entry: path.display().to_string(),
                reason: format!("expected {want} payload bytes, found {}", rest.len()),
            });
        }
        let vals: Vec<f64> = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let config = header.config;
        let levels = build_levels(
            config.levels,
            config.base_resolution,
            config.growth,
            config.log2_table_size,
            config.features_per_level,
        );
        let ok = levels.iter().map(|l| l.resolution).eq(header.resolutions.iter().cloned())
            && levels.iter().map(|l| l.table_size).eq(header.table_sizes.iter().cloned());
        if !ok {
            return Err(Error::Dataset {
                entry: path.display().to_string(),
                reason: "grid layout in header does not match its configuration".into(),
            });
        }
        let (features, params) = vals.split_at(header.feature_count);
        Ok(Self {
            bounds: header.bounds,
            config,
            levels,
            features: features.to_vec(),
            mlp: Mlp {
                dims: header.mlp_dims,
                sharpness: config.softplus_sharpness,
                params: params.to_vec(),
            },
            beta: header.beta,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldHeader {
    resolutions: Vec<u32>,
    table_sizes: Vec<usize>,
    oneblob_bins: usize,
    beta: f64,
    bounds: SceneBounds,
    config: SdfConfig,
    mlp_dims: Vec<usize>,
    feature_count: usize,
    mlp_param_count: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> SdfConfig {
        SdfConfig {
            levels: 4,
            log2_table_size: 12,
            init_steps: 200,
            ..SdfConfig::default()
        }
    }

    fn unit_bounds() -> SceneBounds {
        SceneBounds::new([0.0; 3], [1.2; 3]).unwrap()
    }

    #[test]
    fn geometric_init_is_inside_at_center_and_outside_far_away() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = SceneBounds::new([1.0, -2.0, 0.5], [2.0, 1.0, 1.5]).unwrap();
        let field = SdfField::new(b, SdfConfig::default(), &mut rng);
        assert!(field.query(&Vector3::from(b.center)).unwrap() < 0.0);
        let far = Vector3::from(b.center) + Vector3::from(b.extent) * 10.0;
        assert!(field.query(&far).unwrap() > 0.0);
    }

    #[test]
    fn grid_lookup_interpolation_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut field = SdfField::with_random_weights(unit_bounds(), small_config(), &mut rng);
        for v in field.features.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let f = field.config.features_per_level;
        // Vertex (3, 5, 7) of the 16-resolution level, which is dense.
        let level = field.levels[0];
        let p = [3.0 / 16.0, 5.0 / 16.0, 7.0 / 16.0];
        let got = field.grid_lookup(p);
        let idx = level.offset + level.index(3, 5, 7) * f;
        assert_eq!(&got[..f], &field.features[idx..idx + f]);
        // Cell center: mean of the eight corners.
        let p = [3.5 / 16.0, 5.5 / 16.0, 7.5 / 16.0];
        let got = field.grid_lookup(p);
        for j in 0..f {
            let mut mean = 0.0;
            for c in 0..8 {
                let i = level.offset + level.index(3 + (c & 1), 5 + ((c >> 1) & 1), 7 + ((c >> 2) & 1)) * f + j;
                mean += field.features[i] / 8.0;
            }
            assert!((got[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_feature_gradient_is_trilinear_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut field = SdfField::with_random_weights(unit_bounds(), small_config(), &mut rng);
        let p = [0.3141, 0.2718, 0.6931];
        let level = field.levels[1];
        let mut cs = [Corner::default(); 8];
        corners(&level, 2, p, &mut cs);
        let target = cs[5];
        let h = 1e-6;
        field.features[target.feature_index] += h;
        let up = field.grid_lookup(p)[2];
        field.features[target.feature_index] -= 2.0 * h;
        let down = field.grid_lookup(p)[2];
        let fd = (up - down) / (2.0 * h);
        assert!((fd - target.weight).abs() < 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let field = SdfField::new(unit_bounds(), small_config(), &mut rng);
        let x = Vector3::new(0.21, -0.13, 0.34);
        let g = field.gradient(&x);
        let h = 1e-4;
        for a in 0..3 {
            let mut e = Vector3::zeros();
            e[a] = h;
            let fd = (field.value(&(x + e)) - field.value(&(x - e))) / (2.0 * h);
            assert!((fd - g[a]).abs() <= 1e-3 * fd.abs().max(g.norm()), "axis {a}: {fd} vs {}", g[a]);
        }
    }

    #[test]
    fn constant_field_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut field = SdfField::with_random_weights(unit_bounds(), small_config(), &mut rng);
        field.set_constant(0.7);
        let x = Vector3::new(0.1, 0.2, -0.3);
        assert_eq!(field.gradient(&x), Vector3::zeros());
        assert_eq!(field.value(&x), 0.7);
    }

    #[test]
    fn checkpoint_round_trip_at_f32_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let field = SdfField::new(unit_bounds(), small_config(), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.bin");
        field.save(&path).unwrap();
        let back = SdfField::load(&path).unwrap();
        assert_eq!(back.levels, field.levels);
        assert_eq!(back.beta, field.beta);
        let x = Vector3::new(0.05, -0.2, 0.1);
        assert!((back.value(&x) - field.value(&x)).abs() < 1e-4);
    }
}
