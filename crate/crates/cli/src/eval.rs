//! Metric report for a trained checkpoint.

use std::path::{Path, PathBuf};

use gsdf_core::dataset::{psnr, Dataset};
use gsdf_core::losses::ssim;
use gsdf_core::mesher::{chamfer_distance, TriangleMesh};
use gsdf_core::scene::Image;
use gsdf_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Written next to every extracted mesh as `<mesh>.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshSidecar {
    pub resolution: usize,
    /// `None` for an unconstrained (dense) search.
    pub radius_sigma: Option<f64>,
    pub vertices: usize,
    pub triangles: usize,
    pub active_cells: usize,
    pub total_cells: usize,
    pub active_fraction: f64,
    pub seconds: f64,
}

impl MeshSidecar {
    pub fn path_for(mesh: &Path) -> PathBuf {
        let mut s = mesh.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountSummary {
    pub first: usize,
    pub peak: usize,
    pub last: usize,
    /// Count when training switched to full resolution, if reached.
    pub at_full_resolution: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// World units; absent without an analytic scene description or a mesh.
    pub chamfer: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub holdout: Vec<usize>,
    pub per_view_psnr: Vec<f64>,
    pub active_fraction: Option<f64>,
    pub meshing_seconds: Option<f64>,
    pub counts: CountSummary,
    pub notices: Vec<String>,
}

pub struct EvalInputs<'a> {
    pub dataset: &'a Dataset,
    /// Rendered color per held-out view index.
    pub renders: &'a [(usize, Image)],
    pub mesh: Option<&'a Path>,
    pub counts: &'a [usize],
    pub full_res_from: usize,
    pub seed: u64,
    pub samples: usize,
}

pub fn evaluate(inp: &EvalInputs) -> Result<EvalReport> {
    let mut notices = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(inp.seed);

    let (mut chamfer, mut active_fraction, mut meshing_seconds) = (None, None, None);
    match (inp.mesh, inp.dataset.analytic()) {
        (Some(path), Some(scene)) => {
            let mesh = TriangleMesh::read_ply(path)?;
            let a = mesh.sample_surface(inp.samples, &mut rng)?;
            let b = scene.sample_surface(inp.samples, &mut rng)?;
            chamfer = Some(chamfer_distance(&a, &b)?);
        }
        (None, _) => notices.push("no mesh given; chamfer omitted".to_string()),
        (Some(_), None) => notices.push("dataset has no analytic surface; chamfer omitted".to_string()),
    }
    if let Some(path) = inp.mesh {
        let side = MeshSidecar::path_for(path);
        if side.exists() {
            let text = std::fs::read_to_string(&side).map_err(|source| Error::Io { path: side.clone(), source })?;
            let s: MeshSidecar = serde_json::from_str(&text).map_err(|source| Error::Json {
                context: side.display().to_string(),
                source,
            })?;
            active_fraction = Some(s.active_fraction);
            meshing_seconds = Some(s.seconds);
        }
    }

    let mut per_view_psnr = Vec::new();
    let mut ssims = Vec::new();
    for (i, img) in inp.renders {
        let gt = &inp.dataset.images.views[*i].image;
        per_view_psnr.push(psnr(img, gt)?);
        ssims.push(ssim(img, gt)?);
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    if inp.renders.is_empty() {
        notices.push("empty holdout list; PSNR and SSIM omitted".to_string());
    }

    let c = inp.counts;
    let counts = CountSummary {
        first: c.first().copied().unwrap_or(0),
        peak: c.iter().copied().max().unwrap_or(0),
        last: c.last().copied().unwrap_or(0),
        at_full_resolution: inp.full_res_from.checked_sub(1).and_then(|i| c.get(i).copied()),
    };
    let report = EvalReport {
        chamfer,
        psnr: mean(&per_view_psnr),
        ssim: mean(&ssims),
        holdout: inp.renders.iter().map(|(i, _)| *i).collect(),
        per_view_psnr,
        active_fraction,
        meshing_seconds,
        counts,
        notices,
    };
    let finite = [report.chamfer, report.psnr, report.ssim].iter().flatten().all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite {
            term: "evaluation".into(),
            detail: "a metric is not finite".into(),
        });
    }
    Ok(report)
}
