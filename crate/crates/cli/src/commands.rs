use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use bilagrid::grid4d::LowRank4DGrid;
use bilagrid::metrics::{evaluate, MetricsTable};
use bilagrid::pipeline::dataset::{save_dataset, DatasetManifest, ViewRecord};
use bilagrid::pipeline::synthetic::geometry_only;
use bilagrid::pipeline::{
    evaluate_views, fit_stage_one, lift_edit, reapply_processing, render_finished, synthesize_dataset, synthetic_setup,
    write_history_csv, LossRecord,
};
use bilagrid::{BilateralGrid3D, Camera, GuidanceFn, Image, LossReport, VoxelScene};
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{output, CliError};
use crate::{ApplyArgs, EvalArgs, FitArgs, LiftArgs, RenderArgs, SynthArgs};

/// Gray level of the initial scene colors handed to `fit`.
const INIT_GRAY: f64 = 0.5;

pub struct Context {
    pub cfg: RunConfig,
    pub out_root: PathBuf,
}

impl Context {
    fn out_dir(&self, explicit: Option<PathBuf>, command: &str) -> Result<PathBuf, CliError> {
        let dir = explicit
            .or_else(|| self.cfg.output_dir.clone())
            .unwrap_or_else(|| self.out_root.join(command));
        output(fs::create_dir_all(&dir), &dir)?;
        Ok(dir)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    output(fs::write(path, text + "\n"), path)
}

fn write_history(path: &Path, history: &[LossRecord]) -> Result<(), CliError> {
    let file = output(fs::File::create(path), path)?;
    output(write_history_csv(file, history), path)
}

fn save_image(img: &Image, dir: &Path, stem: &str) -> Result<(), CliError> {
    let raw = dir.join(format!("{stem}.bimg"));
    output(img.save(&raw), &raw)?;
    let png = dir.join(format!("{stem}.png"));
    output(img.save_png(&png), &png)
}

fn find_camera<'a>(cameras: &'a [Camera], id: usize) -> Result<&'a Camera, CliError> {
    cameras
        .iter()
        .find(|c| c.id == id)
        .ok_or_else(|| CliError::Input(format!("no camera with id {id}")))
}

fn input<T>(r: bilagrid::Result<T>, what: &Path) -> Result<T, CliError> {
    r.map_err(|e| CliError::Input(format!("{}: {e}", what.display())))
}

fn metrics_json(table: &MetricsTable) -> Result<serde_json::Value, CliError> {
    let text = table.to_json().map_err(CliError::from)?;
    serde_json::from_str(&text).map_err(|e| CliError::Other(e.to_string()))
}

pub fn synth(ctx: &Context, args: SynthArgs) -> Result<(), CliError> {
    let seed = args.seed.unwrap_or(ctx.cfg.seed);
    let mut syn = ctx.cfg.synthetic;
    syn.seed = seed;
    let setup = synthetic_setup(&syn)?;
    let dir = ctx.out_dir(args.out, "synth")?;
    let render = ctx.cfg.render;

    let train = synthesize_dataset(&setup.scene, &setup.train_cameras, &ctx.cfg.isp, &render, seed)?;
    let held_out: Vec<ViewRecord> = setup
        .test_cameras
        .iter()
        .map(|cam| {
            let clean = setup.scene.render_view(cam, &render);
            ViewRecord {
                camera: cam.clone(),
                processed: clean.clone(),
                clean,
                chain: Vec::new(),
            }
        })
        .collect();
    let init = geometry_only(&setup.scene, INIT_GRAY);
    output(save_dataset(&dir, &train, &held_out, &setup.scene, &init, &render, seed), &dir)?;

    let all: Vec<Camera> = setup.train_cameras.iter().chain(&setup.test_cameras).cloned().collect();
    let cams = dir.join("cameras.json");
    output(Camera::save_all(&all, &cams), &cams)?;
    let mut effective = ctx.cfg.clone();
    effective.seed = seed;
    effective.synthetic = syn;
    write_json(&dir.join("config.json"), &effective)?;
    println!("wrote {} training and {} held-out views to {}", train.len(), held_out.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct FitReport {
    steps: usize,
    freeze_grids: bool,
    seed: u64,
    final_loss: LossReport,
    /// Reapplied grids against the processed training images.
    train: serde_json::Value,
    /// Fitted scene against clean held-out renders.
    held_out: Option<serde_json::Value>,
}

pub fn fit(ctx: &Context, args: FitArgs) -> Result<(), CliError> {
    let manifest = input(DatasetManifest::load(&args.dataset), &args.dataset)?;
    let views = input(manifest.load_fit_views(&args.dataset), &args.dataset)?;
    let init_path = args.dataset.join(&manifest.scene_init);
    let scene_init = input(VoxelScene::load(&init_path), &init_path)?;

    let mut cfg = ctx.cfg.stage_one;
    cfg.seed = args.seed.unwrap_or(ctx.cfg.seed);
    cfg.freeze_grids |= args.freeze_grids;
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(lr) = args.lr_color {
        cfg.lr_color = lr;
    }
    if let Some(lr) = args.lr_grid {
        cfg.lr_grid = lr;
    }
    if let Some(l) = args.lambda_tv {
        cfg.lambda_tv = l;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    info!("fitting {} views for {} steps", views.len(), cfg.steps);
    let result = fit_stage_one(&views, &scene_init, &cfg)?;
    let dir = ctx.out_dir(args.out, "fit")?;

    let scene_path = dir.join("scene.bscn");
    output(result.scene.save(&scene_path), &scene_path)?;
    let grid_dir = dir.join("grids");
    output(fs::create_dir_all(&grid_dir), &grid_dir)?;
    for (view, grid) in views.iter().zip(&result.grids) {
        let p = grid_dir.join(format!("grid_{:03}.bgrd", view.camera.id));
        output(grid.save(&p), &p)?;
    }
    write_history(&dir.join("loss.csv"), &result.history)?;

    let preds: Vec<Image> = views
        .iter()
        .zip(&result.grids)
        .map(|(v, g)| reapply_processing(&result.scene, g, &v.camera, &cfg.render))
        .collect();
    let targets: Vec<Image> = views.iter().map(|v| v.image.clone()).collect();
    let ids: Vec<usize> = views.iter().map(|v| v.camera.id).collect();
    let train = evaluate_views(&preds, &targets, &ids)?;

    let held_out = if manifest.held_out.is_empty() {
        None
    } else {
        let mut preds = Vec::new();
        let mut refs = Vec::new();
        let mut ids = Vec::new();
        for v in &manifest.held_out {
            let p = args.dataset.join(&v.clean);
            refs.push(input(Image::load(&p), &p)?);
            preds.push(result.scene.render_view(&v.camera, &cfg.render));
            ids.push(v.camera.id);
        }
        Some(evaluate_views(&preds, &refs, &ids)?)
    };

    let report = FitReport {
        steps: cfg.steps,
        freeze_grids: cfg.freeze_grids,
        seed: cfg.seed,
        final_loss: result.report,
        train: metrics_json(&train)?,
        held_out: held_out.as_ref().map(metrics_json).transpose()?,
    };
    write_json(&dir.join("report.json"), &report)?;
    let m = train.mean();
    print!("final loss {:.6e}; train psnr {:.2}", result.report.total, m.psnr);
    if let Some(h) = &held_out {
        print!("; held-out cc-psnr {:.2}", h.mean().cc_psnr);
    }
    println!(" -> {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct LiftReport {
    camera_id: usize,
    steps: usize,
    rank: usize,
    seed: u64,
    mlp_guidance: bool,
    final_loss: LossReport,
    /// Largest entry of `A(p) - [I | 0]` over all cells.
    identity_deviation: f64,
    views: Vec<usize>,
}

pub fn lift(ctx: &Context, args: LiftArgs) -> Result<(), CliError> {
    let scene = input(VoxelScene::load(&args.scene), &args.scene)?;
    let cameras = input(Camera::load_all(&args.cameras), &args.cameras)?;
    let edited = input(Image::load(&args.edited), &args.edited)?;
    let camera = find_camera(&cameras, args.camera_id)?;
    if edited.width() != camera.width || edited.height() != camera.height {
        return Err(CliError::Input(format!(
            "edited image is {}x{}, camera {} renders {}x{}",
            edited.width(),
            edited.height(),
            camera.id,
            camera.width,
            camera.height
        )));
    }
    let views: Vec<&Camera> = if args.views.is_empty() {
        cameras.iter().filter(|c| c.id != camera.id).collect()
    } else {
        args.views.iter().map(|&id| find_camera(&cameras, id)).collect::<Result<_, _>>()?
    };

    let mut cfg = ctx.cfg.lift;
    cfg.seed = args.seed.unwrap_or(ctx.cfg.seed);
    cfg.mlp_guidance |= args.mlp_guidance;
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(r) = args.rank {
        cfg.rank = r;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    info!("lifting edit from camera {} for {} steps", camera.id, cfg.steps);
    let result = lift_edit(&scene, &edited, camera, &cfg)?;
    let dir = ctx.out_dir(args.out, "lift")?;
    let grid_path = dir.join("grid.bgr4");
    output(result.grid.save(&grid_path, result.mlp()), &grid_path)?;
    write_history(&dir.join("loss.csv"), &result.history)?;

    // Renders use the stored (f32) grid so they match `render --grid4d`.
    let (stored, mlp) = input(LowRank4DGrid::load(&grid_path), &grid_path)?;
    let gfn = mlp.map_or(GuidanceFn::Luminance, GuidanceFn::Mlp);
    for cam in &views {
        let before = scene.render_view(cam, &cfg.render);
        let after = render_finished(&scene, &stored, &gfn, cam, &cfg.render);
        save_image(&before, &dir, &format!("before_{:03}", cam.id))?;
        save_image(&after, &dir, &format!("after_{:03}", cam.id))?;
    }
    let report = LiftReport {
        camera_id: camera.id,
        steps: cfg.steps,
        rank: cfg.rank,
        seed: cfg.seed,
        mlp_guidance: cfg.mlp_guidance,
        final_loss: result.report,
        identity_deviation: result.grid.max_identity_deviation(),
        views: views.iter().map(|c| c.id).collect(),
    };
    write_json(&dir.join("report.json"), &report)?;
    println!(
        "final loss {:.6e}; rendered {} views -> {}",
        result.report.total,
        views.len(),
        dir.display()
    );
    Ok(())
}

pub fn apply(ctx: &Context, args: ApplyArgs) -> Result<(), CliError> {
    let scene = input(VoxelScene::load(&args.scene), &args.scene)?;
    let grid = input(BilateralGrid3D::load(&args.grid), &args.grid)?;
    let cameras = input(Camera::load_all(&args.cameras), &args.cameras)?;
    let camera = find_camera(&cameras, args.camera_id)?;
    let img = reapply_processing(&scene, &grid, camera, &ctx.cfg.render);
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        output(fs::create_dir_all(parent), parent)?;
    }
    output(img.save(&args.out), &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn render(ctx: &Context, args: RenderArgs) -> Result<(), CliError> {
    let scene = input(VoxelScene::load(&args.scene), &args.scene)?;
    let cameras = input(Camera::load_all(&args.cameras), &args.cameras)?;
    let selected: Vec<&Camera> = if args.camera_id.is_empty() {
        cameras.iter().collect()
    } else {
        args.camera_id.iter().map(|&id| find_camera(&cameras, id)).collect::<Result<_, _>>()?
    };
    let finish: Option<(LowRank4DGrid, GuidanceFn)> = match &args.grid4d {
        None => None,
        Some(p) => {
            let (grid, mlp) = input(LowRank4DGrid::load(p), p)?;
            Some((grid, mlp.map_or(GuidanceFn::Luminance, GuidanceFn::Mlp)))
        }
    };
    let dir = ctx.out_dir(args.out, "render")?;
    let opts = ctx.cfg.render;
    for cam in &selected {
        let img = match &finish {
            None => scene.render_view(cam, &opts),
            Some((grid, gfn)) => render_finished(&scene, grid, gfn, cam, &opts),
        };
        save_image(&img, &dir, &format!("render_{:03}", cam.id))?;
    }
    println!("rendered {} views -> {}", selected.len(), dir.display());
    Ok(())
}

/// Image files in `dir` keyed by name. A `.bimg` wins over a `.png` with the
/// same stem.
fn image_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    let mut raw = BTreeSet::new();
    let mut png = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::Input(e.to_string()))?.path();
        let (Some(stem), Some(ext)) = (path.file_stem().and_then(|s| s.to_str()), path.extension()) else {
            continue;
        };
        if ext == "bimg" {
            raw.insert(stem.to_string());
        } else if ext == "png" {
            png.insert(stem.to_string());
        }
    }
    let mut out: Vec<(String, PathBuf)> = raw.iter().map(|s| (s.clone(), dir.join(format!("{s}.bimg")))).collect();
    out.extend(png.difference(&raw).map(|s| (s.clone(), dir.join(format!("{s}.png")))));
    out.sort();
    Ok(out)
}

pub fn eval(ctx: &Context, args: EvalArgs) -> Result<(), CliError> {
    let preds = image_files(&args.pred)?;
    let refs = image_files(&args.reference)?;
    let pred_names: BTreeSet<&str> = preds.iter().map(|(n, _)| n.as_str()).collect();
    let ref_names: BTreeSet<&str> = refs.iter().map(|(n, _)| n.as_str()).collect();
    if preds.is_empty() {
        return Err(CliError::Input(format!("no images in {}", args.pred.display())));
    }
    if let Some(missing) = pred_names.symmetric_difference(&ref_names).next() {
        return Err(CliError::Input(format!("{missing} has no counterpart in the other directory")));
    }

    let mut table = MetricsTable::default();
    for ((name, p), (_, r)) in preds.iter().zip(&refs) {
        let pred = input(Image::load(p), p)?;
        let reference = input(Image::load(r), r)?;
        let report = evaluate(&pred, &reference, args.quantized).map_err(|e| CliError::Input(format!("{name}: {e}")))?;
        table.push(name.clone(), report);
    }
    let dir = ctx.out_dir(args.out, "eval")?;
    let csv_path = dir.join("metrics.csv");
    output(table.save(&csv_path, dir.join("metrics.json")), &csv_path)?;
    let mut stdout = std::io::stdout().lock();
    table.write_csv(&mut stdout)?;
    Ok(())
}
