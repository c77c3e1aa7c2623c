//! Joint fit of scene colors and one 3D bilateral grid per training view.
//!
//! Densities stay fixed, so every pixel color is a fixed linear function of
//! the voxel colors. That function is precomputed once as a sparse operator.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::FitView;
use super::{DivergenceGuard, LossRecord, DEFAULT_DIVERGENCE_RATIO};
use crate::error::{Error, Result};
use crate::grid3d::BilateralGrid3D;
use crate::guidance::GuidanceFn;
use crate::image::Image;
use crate::losses::{tv_loss_grids, LossReport};
use crate::optim::{Adam, AdamConfig};
use crate::scene::{Camera, RenderOptions, VoxelScene};
use crate::Rgb;

const PIXEL_CHUNK: usize = 256;
const VOXEL_CHUNK: usize = 512;

/// Sparse map from voxel colors to pixel colors, stored both by pixel and by
/// voxel so that forward and backward passes are gathers.
#[derive(Clone, Debug)]
pub struct FootprintOperator {
    voxel_count: usize,
    row_start: Vec<usize>,
    row_voxel: Vec<u32>,
    row_weight: Vec<f64>,
    col_start: Vec<usize>,
    col_pixel: Vec<u32>,
    col_weight: Vec<f64>,
}

impl FootprintOperator {
    /// Pixels are numbered camera by camera, row-major within a camera.
    pub fn build(scene: &VoxelScene, cameras: &[Camera], opts: &RenderOptions, min_weight: f64) -> Self {
        let rows: Vec<Vec<(u32, f64)>> = cameras
            .iter()
            .flat_map(|c| (0..c.pixel_count()).map(move |i| (c, i)))
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(c, i)| scene.footprint(&c.ray(i % c.width, i / c.width), opts, i as u64, min_weight))
            .collect();
        Self::from_rows(scene.voxel_count(), &rows)
    }

    pub fn from_rows(voxel_count: usize, rows: &[Vec<(u32, f64)>]) -> Self {
        let nnz: usize = rows.iter().map(Vec::len).sum();
        let mut row_start = Vec::with_capacity(rows.len() + 1);
        let mut row_voxel = Vec::with_capacity(nnz);
        let mut row_weight = Vec::with_capacity(nnz);
        let mut counts = vec![0usize; voxel_count + 1];
        row_start.push(0);
        for row in rows {
            for &(v, w) in row {
                row_voxel.push(v);
                row_weight.push(w);
                counts[v as usize + 1] += 1;
            }
            row_start.push(row_voxel.len());
        }
        for i in 0..voxel_count {
            counts[i + 1] += counts[i];
        }
        let col_start = counts.clone();
        let mut fill = counts;
        let mut col_pixel = vec![0u32; nnz];
        let mut col_weight = vec![0.0; nnz];
        for (p, row) in rows.iter().enumerate() {
            for &(v, w) in row {
                let slot = &mut fill[v as usize];
                col_pixel[*slot] = p as u32;
                col_weight[*slot] = w;
                *slot += 1;
            }
        }
        Self {
            voxel_count,
            row_start,
            row_voxel,
            row_weight,
            col_start,
            col_pixel,
            col_weight,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.row_voxel.len()
    }

    pub fn pixel(&self, p: usize, colors: &[f64]) -> Rgb {
        let mut c = [0.0; 3];
        for k in self.row_start[p]..self.row_start[p + 1] {
            let v = self.row_voxel[k] as usize * 3;
            let w = self.row_weight[k];
            c[0] += w * colors[v];
            c[1] += w * colors[v + 1];
            c[2] += w * colors[v + 2];
        }
        c
    }

    pub fn forward(&self, colors: &[f64], out: &mut [Rgb]) {
        out.par_chunks_mut(PIXEL_CHUNK).enumerate().for_each(|(chunk, px)| {
            for (i, o) in px.iter_mut().enumerate() {
                *o = self.pixel(chunk * PIXEL_CHUNK + i, colors);
            }
        });
    }

    /// Overwrites `color_grad` with the adjoint applied to `pixel_grad`.
    pub fn backward(&self, pixel_grad: &[Rgb], color_grad: &mut [f64]) {
        debug_assert_eq!(color_grad.len(), 3 * self.voxel_count);
        color_grad.par_chunks_mut(3 * VOXEL_CHUNK).enumerate().for_each(|(chunk, out)| {
            for (i, g) in out.chunks_exact_mut(3).enumerate() {
                let v = chunk * VOXEL_CHUNK + i;
                let mut acc = [0.0; 3];
                for k in self.col_start[v]..self.col_start[v + 1] {
                    let d = pixel_grad[self.col_pixel[k] as usize];
                    let w = self.col_weight[k];
                    acc[0] += w * d[0];
                    acc[1] += w * d[1];
                    acc[2] += w * d[2];
                }
                g.copy_from_slice(&acc);
            }
        });
    }

    /// Adds the adjoint of a subset of pixels, visiting them in order.
    pub fn backward_rows(&self, pixels: &[usize], pixel_grad: &[Rgb], color_grad: &mut [f64]) {
        for (&p, d) in pixels.iter().zip(pixel_grad) {
            for k in self.row_start[p]..self.row_start[p + 1] {
                let v = self.row_voxel[k] as usize * 3;
                let w = self.row_weight[k];
                for ch in 0..3 {
                    color_grad[v + ch] += w * d[ch];
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOneConfig {
    /// `(W, H, M)` of every per-view grid.
    pub grid_dims: [usize; 3],
    pub lambda_tv: f64,
    pub steps: usize,
    pub lr_grid: f64,
    pub lr_color: f64,
    pub adam: AdamConfig,
    pub render: RenderOptions,
    /// Keep every grid at identity (the no-grid baseline).
    pub freeze_grids: bool,
    /// Steps at the start during which only scene colors are updated.
    pub grid_warmup: usize,
    /// Random pixels per step; `None` uses every pixel.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Footprint entries lighter than this are dropped.
    pub min_weight: f64,
    pub divergence_ratio: f64,
}

impl Default for StageOneConfig {
    fn default() -> Self {
        Self {
            grid_dims: [8, 8, 4],
            lambda_tv: 10.0,
            steps: 5000,
            lr_grid: 1e-2,
            lr_color: 5e-3,
            adam: AdamConfig::default(),
            render: RenderOptions::default(),
            freeze_grids: false,
            grid_warmup: 1000,
            batch_size: None,
            seed: 0,
            min_weight: 1e-10,
            divergence_ratio: DEFAULT_DIVERGENCE_RATIO,
        }
    }
}

impl StageOneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_dims.contains(&0) {
            return Err(Error::InvalidDimensions(format!("grid dims {:?}", self.grid_dims)));
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !(self.lambda_tv >= 0.0 && self.lambda_tv.is_finite()) {
            return Err(Error::InvalidArgument("lambda_tv must be finite and non-negative".into()));
        }
        if !positive(self.lr_grid) || !positive(self.lr_color) || !positive(self.divergence_ratio) {
            return Err(Error::InvalidArgument("learning rates and divergence ratio must be positive".into()));
        }
        if self.render.samples == 0 || self.batch_size == Some(0) || !(self.min_weight >= 0.0) {
            return Err(Error::InvalidArgument("samples and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StageOneResult {
    pub scene: VoxelScene,
    pub grids: Vec<BilateralGrid3D>,
    pub history: Vec<LossRecord>,
    /// Objective at the returned parameters.
    pub report: LossReport,
}

struct Problem<'a> {
    op: FootprintOperator,
    targets: Vec<Rgb>,
    uv: Vec<(f64, f64)>,
    /// First pixel of each view.
    view_start: Vec<usize>,
    cfg: &'a StageOneConfig,
}

impl Problem<'_> {
    fn view_of(&self, p: usize) -> usize {
        self.view_start.partition_point(|&s| s <= p) - 1
    }

    /// Objective over all pixels. Gradients overwrite the buffers.
    fn full(&self, colors: &[f64], grids: &[BilateralGrid3D], frozen: bool, color_grad: &mut [f64], grid_grads: &mut [Vec<f64>]) -> LossReport {
        let gfn = GuidanceFn::Luminance;
        let n = self.op.pixel_count();
        let mut rendered = vec![[0.0; 3]; n];
        self.op.forward(colors, &mut rendered);

        let mut pixel_grad = vec![[0.0; 3]; n];
        let mut per_view: Vec<(usize, &mut [Rgb])> = Vec::with_capacity(grids.len());
        let mut rest: &mut [Rgb] = &mut pixel_grad;
        for l in 0..grids.len() {
            let (head, tail) = rest.split_at_mut(self.view_start[l + 1] - self.view_start[l]);
            per_view.push((l, head));
            rest = tail;
        }
        let partials: Vec<(f64, Vec<f64>)> = per_view
            .into_par_iter()
            .map(|(l, dpix)| {
                let grid = &grids[l];
                let mut gg = if frozen { Vec::new() } else { vec![0.0; grid.coeffs().len()] };
                let mut loss = 0.0;
                for (i, d) in dpix.iter_mut().enumerate() {
                    let p = self.view_start[l] + i;
                    let c = rendered[p];
                    let (u, v) = self.uv[p];
                    let out = if frozen { c } else { grid.process_pixel(u, v, c, &gfn) };
                    let t = self.targets[p];
                    let e = [out[0] - t[0], out[1] - t[1], out[2] - t[2]];
                    loss += e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
                    let up = e.map(|x| 2.0 * x);
                    *d = if frozen {
                        up
                    } else {
                        grid.grad_process_pixel(u, v, c, &gfn, up, &mut gg, &mut [])
                    };
                }
                (loss, gg)
            })
            .collect();
        let mut data = 0.0;
        for (l, (loss, gg)) in partials.into_iter().enumerate() {
            data += loss;
            if !frozen {
                grid_grads[l] = gg;
            }
        }
        self.op.backward(&pixel_grad, color_grad);
        self.finish(data, grids, frozen, grid_grads)
    }

    /// Objective over a subset of pixels.
    #[allow(clippy::too_many_arguments)]
    fn batch(
        &self,
        pixels: &[usize],
        colors: &[f64],
        grids: &[BilateralGrid3D],
        frozen: bool,
        color_grad: &mut [f64],
        grid_grads: &mut [Vec<f64>],
    ) -> LossReport {
        let gfn = GuidanceFn::Luminance;
        color_grad.fill(0.0);
        for g in grid_grads.iter_mut() {
            g.fill(0.0);
        }
        let mut data = 0.0;
        let mut pixel_grad = Vec::with_capacity(pixels.len());
        for &p in pixels {
            let l = self.view_of(p);
            let c = self.op.pixel(p, colors);
            let (u, v) = self.uv[p];
            let out = if frozen { c } else { grids[l].process_pixel(u, v, c, &gfn) };
            let t = self.targets[p];
            let e = [out[0] - t[0], out[1] - t[1], out[2] - t[2]];
            data += e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
            let up = e.map(|x| 2.0 * x);
            pixel_grad.push(if frozen {
                up
            } else {
                grids[l].grad_process_pixel(u, v, c, &gfn, up, &mut grid_grads[l], &mut [])
            });
        }
        self.op.backward_rows(pixels, &pixel_grad, color_grad);
        self.finish(data, grids, frozen, grid_grads)
    }

    fn finish(&self, data: f64, grids: &[BilateralGrid3D], frozen: bool, grid_grads: &mut [Vec<f64>]) -> LossReport {
        let lambda = if self.cfg.freeze_grids { 0.0 } else { self.cfg.lambda_tv };
        if frozen || lambda == 0.0 {
            return LossReport::new(data, 0.0, lambda);
        }
        let mut tv_grads: Vec<Vec<f64>> = grids.iter().map(|g| vec![0.0; g.coeffs().len()]).collect();
        let tv = tv_loss_grids(grids, &mut tv_grads);
        for (g, t) in grid_grads.iter_mut().zip(&tv_grads) {
            for (a, b) in g.iter_mut().zip(t) {
                *a += lambda * b;
            }
        }
        LossReport::new(data, tv, lambda)
    }
}

/// Jointly fits scene colors and per-view grids to the processed images.
/// Densities of `scene_init` are kept fixed; grids use luminance guidance.
pub fn fit_stage_one(views: &[FitView], scene_init: &VoxelScene, cfg: &StageOneConfig) -> Result<StageOneResult> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidArgument("no training views".into()));
    }
    let cameras: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
    let mut view_start = vec![0];
    let mut targets = Vec::new();
    let mut uv = Vec::new();
    for v in views {
        if v.image.width() != v.camera.width || v.image.height() != v.camera.height {
            return Err(Error::ShapeMismatch(format!("image of camera {} has the wrong size", v.camera.id)));
        }
        targets.extend(v.image.pixels());
        for i in 0..v.camera.pixel_count() {
            uv.push(v.camera.uv(i % v.camera.width, i / v.camera.width));
        }
        view_start.push(targets.len());
    }
    let op = FootprintOperator::build(scene_init, &cameras, &cfg.render, cfg.min_weight);
    log::info!("stage one: {} pixels, {} footprint entries", op.pixel_count(), op.nnz());
    let problem = Problem {
        op,
        targets,
        uv,
        view_start,
        cfg,
    };

    let [gw, gh, gm] = cfg.grid_dims;
    let mut scene = scene_init.clone();
    let mut grids = vec![BilateralGrid3D::new(gw, gh, gm)?; views.len()];
    let mut color_adam = Adam::new(cfg.adam);
    color_adam.add_block("colors", scene.colors().len(), cfg.lr_color);
    // Grid moments start when the grids start moving.
    let mut grid_adam: Option<Adam> = None;

    let total_pixels = problem.op.pixel_count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut color_grad = vec![0.0; scene.colors().len()];
    let mut grid_grads: Vec<Vec<f64>> = grids.iter().map(|g| vec![0.0; g.coeffs().len()]).collect();
    let mut guard = DivergenceGuard::new(cfg.divergence_ratio);
    let mut history = Vec::with_capacity(cfg.steps + 1);
    let as_divergence = |step: usize, loss: f64| {
        move |e: Error| match e {
            Error::NonFiniteGradient { .. } => Error::Divergence { step, loss },
            other => other,
        }
    };

    for step in 0..cfg.steps {
        let grids_active = !cfg.freeze_grids && step >= cfg.grid_warmup;
        let frozen = !grids_active;
        let report = match cfg.batch_size {
            Some(b) if b < total_pixels => {
                let mut idx = sample(&mut rng, total_pixels, b).into_vec();
                idx.sort_unstable();
                problem.batch(&idx, scene.colors(), &grids, frozen, &mut color_grad, &mut grid_grads)
            }
            _ => problem.full(scene.colors(), &grids, frozen, &mut color_grad, &mut grid_grads),
        };
        history.push(LossRecord::new(step, &report));
        guard.check(step, report.total)?;
        if step % 500 == 0 {
            log::debug!("stage one step {step}: total {:.6e} data {:.6e} tv {:.6e}", report.total, report.data_term, report.tv_term);
        }
        color_adam
            .step(&mut [scene.colors_mut()], &[&color_grad])
            .map_err(as_divergence(step, report.total))?;
        if grids_active {
            let adam = grid_adam.get_or_insert_with(|| {
                let mut a = Adam::new(cfg.adam);
                for l in 0..grids.len() {
                    a.add_block(format!("grid{l}"), grids[l].coeffs().len(), cfg.lr_grid);
                }
                a
            });
            let mut params: Vec<&mut [f64]> = grids.iter_mut().map(|g| g.coeffs_mut()).collect();
            let grads: Vec<&[f64]> = grid_grads.iter().map(Vec::as_slice).collect();
            adam.step(&mut params, &grads).map_err(as_divergence(step, report.total))?;
        }
    }
    let report = problem.full(scene.colors(), &grids, cfg.freeze_grids, &mut color_grad, &mut grid_grads);
    history.push(LossRecord::new(cfg.steps, &report));
    guard.check(cfg.steps, report.total)?;
    Ok(StageOneResult {
        scene,
        grids,
        history,
        report,
    })
}

/// Renders `camera` and processes every pixel with `grid`.
pub fn reapply_processing(scene: &VoxelScene, grid: &BilateralGrid3D, camera: &Camera, opts: &RenderOptions) -> Image {
    let clean = scene.render_view(camera, opts);
    let gfn = GuidanceFn::Luminance;
    clean.map(|x, y, c| {
        let (u, v) = camera.uv(x, y);
        grid.process_pixel(u, v, c, &gfn)
    })
}
