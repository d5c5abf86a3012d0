mod config;
mod eval;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsdf_core::dataset::{load_dataset, make_synthetic, save_png, save_png16, CameraEntry, SyntheticSpec};
use gsdf_core::error::ErrorClass;
use gsdf_core::losses::expected_depth;
use gsdf_core::mesher::extract_mesh;
use gsdf_core::raster::render;
use gsdf_core::scene::{load_scene_checkpoint, Image, View};
use gsdf_core::sdf::{Normalization, OpacityMap, SdfField};
use gsdf_core::trainer::{CheckpointState, PruneMode, TrainConfig, Trainer};
use gsdf_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::Preset;
use crate::eval::{evaluate, EvalInputs, EvalReport, MeshSidecar};

/// Depth PNGs store `depth * DEPTH_PNG_SCALE` as 16-bit integers.
const DEPTH_PNG_SCALE: f64 = 1000.0;

#[derive(Parser)]
#[command(name = "gsdf", version, about = "Gaussian primitives coupled to a neural signed distance field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset rendered from analytic shapes.
    Synth(SynthArgs),
    /// Optimize primitives and field on a dataset.
    Train(TrainArgs),
    /// Extract a triangle mesh from a trained checkpoint.
    Mesh(MeshArgs),
    /// Render color, depth and normal images of a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint and mesh against held-out views and the analytic surface.
    Eval(EvalArgs),
    /// Train, mesh and score a set of variants on one dataset and seed.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON or TOML file with synthetic-scene settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct TrainSettings {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    preset: Preset,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated view indices withheld from training.
    #[arg(long, value_delimiter = ',')]
    holdout: Vec<usize>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    lambda_n: Option<f64>,
    #[arg(long)]
    lambda_ns: Option<f64>,
    #[arg(long)]
    lambda_fs: Option<f64>,
    #[arg(long)]
    lambda_depth: Option<f64>,
    #[arg(long)]
    lambda_normal: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    truncation: Option<f64>,
}

impl TrainSettings {
    fn flags(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let pairs = [
            ("lambda_d", self.lambda_d),
            ("lambda_n", self.lambda_n),
            ("lambda_ns", self.lambda_ns),
            ("lambda_fs", self.lambda_fs),
            ("lambda_depth", self.lambda_depth),
            ("lambda_normal", self.lambda_normal),
            ("beta", self.beta),
            ("truncation", self.truncation),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                m.insert(k.into(), json!(v));
            }
        }
        m
    }

    fn resolve(&self) -> Result<TrainConfig> {
        let file = self.config.as_deref().map(config::read_config_file).transpose()?;
        config::layered(config::base_config(self.preset, self.iters), file.as_ref(), &self.flags())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: TrainSettings,
}

#[derive(Args)]
struct MeshArgs {
    /// Training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    /// Neighborhood radius in units of the largest primitive scale; `inf` searches the whole grid.
    #[arg(long, default_value_t = 3.0)]
    radius_sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Camera JSON in the dataset-manifest camera format.
    #[arg(long)]
    camera: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    holdout: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Surface samples per side for the chamfer distance.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Report file; defaults to `eval.json` in the checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Variant as `axis=value`; repeatable. The unmodified configuration always runs first as `ours`.
    #[arg(long = "variant")]
    variants: Vec<String>,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[command(flatten)]
    settings: TrainSettings,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        return report_error(&e);
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Mesh(a) => cmd_mesh(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> ExitCode {
    let (class, code) = match e.class() {
        ErrorClass::BadInput => ("bad_input", 2),
        ErrorClass::Numeric => ("numeric", 3),
        ErrorClass::EmptyResult => ("empty_result", 4),
    };
    eprintln!("{}", json!({ "error": class, "message": e.to_string() }));
    ExitCode::from(code)
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("GSDF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::InvalidParameter(format!("GSDF_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    writeln!(w).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec: SyntheticSpec = match &a.config {
        Some(p) => serde_json::from_value(config::read_config_file(p)?)
            .map_err(|e| Error::InvalidParameter(format!("{}: {e}", p.display())))?,
        None => SyntheticSpec::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let scene = make_synthetic(&spec, &a.out, &mut rng)?;
    println!(
        "{}",
        json!({ "dataset": a.out, "views": scene.dataset.images.views.len(), "points": spec.points })
    );
    Ok(())
}

fn split_views(views: &[View], holdout: &[usize]) -> Result<(Vec<View>, Vec<usize>)> {
    if let Some(bad) = holdout.iter().find(|&&i| i >= views.len()) {
        return Err(Error::InvalidParameter(format!(
            "holdout view {bad} out of range for {} views",
            views.len()
        )));
    }
    let train: Vec<View> = views
        .iter()
        .enumerate()
        .filter(|(i, _)| !holdout.contains(i))
        .map(|(_, v)| v.clone())
        .collect();
    Ok((train, holdout.to_vec()))
}

/// Trains into `out` and returns the initial and final mean photometric loss.
fn run_training(data: &Path, out: &Path, s: &TrainSettings, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let ds = load_dataset(data)?;
    let (train_views, _) = split_views(&ds.images.views, &s.holdout)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join("config.json"), cfg)?;
    let trainer =
        Trainer::new(ds.cameras.clone(), &train_views, ds.points.as_deref(), cfg.clone(), s.seed)?.with_output(out)?;
    let initial = trainer.photometric_over_views()?;
    let mut trainer = trainer;
    while trainer.iteration < trainer.cfg.iterations {
        trainer.step()?;
    }
    let final_loss = trainer.photometric_over_views()?;
    let outcome = trainer.run()?;
    let prunes_ok = outcome.prunes.iter().all(|p| p.max_sdf_after <= p.truncation);
    let coupling = outcome.audits.iter().map(|a| a.max_coupling_error).fold(0.0, f64::max);
    write_json(
        &out.join("train_summary.json"),
        &json!({
            "seed": s.seed,
            "holdout": s.holdout,
            "iterations": cfg.iterations,
            "initial_photometric": initial,
            "final_photometric": final_loss,
            "final_count": outcome.primitives.len(),
            "prune_events": outcome.prunes.len(),
            "prunes_within_truncation": prunes_ok,
            "max_coupling_error": coupling,
        }),
    )?;
    Ok((initial, final_loss))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.settings.resolve()?;
    let (initial, final_loss) = run_training(&a.data, &a.out, &a.settings, &cfg)?;
    println!(
        "{}",
        json!({ "out": a.out, "initial_photometric": initial, "final_photometric": final_loss })
    );
    Ok(())
}

struct Checkpoint {
    primitives: Vec<gsdf_core::scene::GaussianPrimitive>,
    field: SdfField,
    state: CheckpointState,
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let (primitives, _, _) = load_scene_checkpoint(&dir.join("scene.jsonl"))?;
    let field = SdfField::load(&dir.join("field.bin"))?;
    let state = CheckpointState::load(&dir.join("state.json"))?;
    Ok(Checkpoint {
        primitives,
        field,
        state,
    })
}

fn cmd_mesh(a: &MeshArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (mesh, stats) = extract_mesh(&ck.primitives, &ck.field, a.resolution, a.radius_sigma)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    mesh.write_ply(&a.out)?;
    let sidecar = MeshSidecar {
        resolution: a.resolution,
        radius_sigma: a.radius_sigma.is_finite().then_some(a.radius_sigma),
        vertices: mesh.vertices.len(),
        triangles: mesh.triangles.len(),
        active_cells: stats.active_cells,
        total_cells: stats.total_cells,
        active_fraction: stats.active_fraction,
        seconds: stats.seconds,
    };
    write_json(&MeshSidecar::path_for(&a.out), &sidecar)?;
    println!("{}", serde_json::to_string(&sidecar).expect("sidecar serializes"));
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg: TrainConfig = read_json(&a.checkpoint.join("config.json"))?;
    let entry: CameraEntry = read_json(&a.camera)?;
    let cam = entry.to_camera()?;
    let opac = ck.state.opacities(&ck.primitives, &ck.field);
    let maps = render(&ck.primitives, &opac, &cam, cfg.background, &cfg.raster)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    save_png(&a.out.join("color.png"), &maps.color)?;
    let ed = expected_depth(&maps);
    save_png16(&a.out.join("depth.png"), &ed.depth, DEPTH_PNG_SCALE)?;
    write_json(
        &a.out.join("depth.json"),
        &json!({ "scale": DEPTH_PNG_SCALE, "meaning": "camera-space z times scale; 0 where coverage < 0.5" }),
    )?;
    let mut normal = maps.normal.clone();
    normal.data.iter_mut().for_each(|v| *v = (*v * 0.5 + 0.5).clamp(0.0, 1.0));
    save_png(&a.out.join("normal.png"), &normal)?;
    println!("{}", json!({ "out": a.out, "width": cam.width, "height": cam.height }));
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let report = eval_checkpoint(&a.checkpoint, &a.data, a.mesh.as_deref(), &a.holdout, a.seed, a.samples)?;
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.join("eval.json"));
    write_json(&out, &report)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn eval_checkpoint(
    checkpoint: &Path,
    data: &Path,
    mesh: Option<&Path>,
    holdout: &[usize],
    seed: u64,
    samples: usize,
) -> Result<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg: TrainConfig = read_json(&checkpoint.join("config.json"))?;
    let ds = load_dataset(data)?;
    split_views(&ds.images.views, holdout)?;
    let counts: Vec<usize> = read_json(&checkpoint.join("counts.json"))?;
    let opac = ck.state.opacities(&ck.primitives, &ck.field);
    let renders: Vec<(usize, Image)> = holdout
        .iter()
        .map(|&i| {
            let v = &ds.images.views[i];
            render(&ck.primitives, &opac, &ds.cameras[v.camera], cfg.background, &cfg.raster).map(|m| (i, m.color))
        })
        .collect::<Result<_>>()?;
    evaluate(&EvalInputs {
        dataset: &ds,
        renders: &renders,
        mesh,
        counts: &counts,
        full_res_from: cfg.full_res_from,
        seed,
        samples,
    })
}

const REGISTRY: &str = "sdf2o=gaussian|bell, norm=sigmoid|contraction, multires=on|off, geo=on|off, prune=sdf|opacity";

/// Applies one `axis=value` variant to a configuration.
fn apply_variant(cfg: &mut TrainConfig, spec: &str) -> Result<()> {
    let unknown = || Error::UnknownVariant {
        name: spec.to_string(),
        registry: REGISTRY.to_string(),
    };
    let (axis, value) = spec.split_once('=').ok_or_else(unknown)?;
    match (axis.trim(), value.trim()) {
        ("sdf2o", "gaussian") => cfg.opacity_map = OpacityMap::Gaussian,
        ("sdf2o", "bell") => cfg.opacity_map = OpacityMap::Bell,
        ("norm", "sigmoid") => cfg.sdf.normalization = Normalization::Sigmoid,
        ("norm", "contraction") => cfg.sdf.normalization = Normalization::Contraction,
        ("multires", "on") => cfg.multires = true,
        ("multires", "off") => cfg.multires = false,
        ("geo", "on") => cfg.geometry_cues = true,
        ("geo", "off") => cfg.geometry_cues = false,
        ("prune", "sdf") => cfg.prune_mode = PruneMode::Sdf,
        ("prune", "opacity") => cfg.prune_mode = PruneMode::Opacity,
        _ => return Err(unknown()),
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    initial_photometric: f64,
    final_photometric: f64,
    surface_opacity: Option<f64>,
    report: EvalReport,
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let base = a.settings.resolve()?;
    let mut runs = vec![("ours".to_string(), base.clone())];
    for v in &a.variants {
        let mut cfg = base.clone();
        apply_variant(&mut cfg, v)?;
        cfg.validate()?;
        runs.push((v.clone(), cfg));
    }
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let mut rows = Vec::new();
    for (name, cfg) in &runs {
        let dir = a.out.join(name.replace('=', "-"));
        log::info!("ablation variant {name} -> {}", dir.display());
        let (initial, final_loss) = run_training(&a.data, &dir, &a.settings, cfg)?;
        let ck = load_checkpoint(&dir)?;
        let (mesh, stats) = extract_mesh(&ck.primitives, &ck.field, a.resolution, 3.0)?;
        let mesh_path = dir.join("mesh.ply");
        mesh.write_ply(&mesh_path)?;
        write_json(
            &MeshSidecar::path_for(&mesh_path),
            &MeshSidecar {
                resolution: a.resolution,
                radius_sigma: Some(3.0),
                vertices: mesh.vertices.len(),
                triangles: mesh.triangles.len(),
                active_cells: stats.active_cells,
                total_cells: stats.total_cells,
                active_fraction: stats.active_fraction,
                seconds: stats.seconds,
            },
        )?;
        let report = eval_checkpoint(&dir, &a.data, Some(&mesh_path), &a.settings.holdout, a.settings.seed, a.samples)?;
        let surface_opacity = last_surface_opacity(&dir.join("audit_log.jsonl"))?;
        rows.push(AblationRow {
            variant: name.clone(),
            initial_photometric: initial,
            final_photometric: final_loss,
            surface_opacity,
            report,
        });
    }
    write_json(&a.out.join("ablation.json"), &rows)?;
    let table = ablation_table(&rows);
    let p = a.out.join("ablation.txt");
    fs::write(&p, &table).map_err(io_err(&p))?;
    print!("{table}");
    Ok(())
}

/// Surface opacity of the last audit taken with the field active.
fn last_surface_opacity(path: &Path) -> Result<Option<f64>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut last = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        if v["sdf_active"].as_bool() == Some(true) {
            last = v["surface_opacity"].as_f64();
        }
    }
    Ok(last)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<22} {:>10} {:>10} {:>10} {:>9} {:>9} {:>12} {:>10}\n",
        "variant", "photo_0", "photo_T", "chamfer", "psnr", "surf_op", "count@full", "count_T"
    );
    for r in rows {
        s += &format!(
            "{:<22} {:>10.5} {:>10.5} {:>10} {:>9} {:>9} {:>12} {:>10}\n",
            r.variant,
            r.initial_photometric,
            r.final_photometric,
            fmt_opt(r.report.chamfer, 5),
            fmt_opt(r.report.psnr, 2),
            fmt_opt(r.surface_opacity, 4),
            r.report.counts.at_full_resolution.map_or("-".into(), |c| c.to_string()),
            r.report.counts.last,
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_follow_the_registry() {
        let mut cfg = TrainConfig::default();
        apply_variant(&mut cfg, "sdf2o=bell").unwrap();
        apply_variant(&mut cfg, "multires=off").unwrap();
        apply_variant(&mut cfg, "prune=opacity").unwrap();
        assert_eq!(cfg.opacity_map, OpacityMap::Bell);
        assert!(!cfg.multires);
        assert_eq!(cfg.prune_mode, PruneMode::Opacity);
        for bad in ["sdf2o=cubic", "colour=on", "multires"] {
            match apply_variant(&mut cfg, bad) {
                Err(Error::UnknownVariant { registry, .. }) => assert!(registry.contains("sdf2o")),
                other => panic!("expected a registry error, got {other:?}"),
            }
        }
    }
}
